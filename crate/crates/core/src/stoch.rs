//! Stochastic and relaxation primitives built on the graph.
//!
//! Besides plain composites (Gumbel-softmax, closed-form Gaussian KL) this
//! module holds the fused relaxed-Bernoulli divergence used by the
//! selective objective: its forward value and analytic gradient are computed
//! in one pass so the k noise draws never materialize as graph nodes.

use crate::graph::{Axis, Graph, GraphError, Result, Value};
use crate::rng::Rng;
use crate::tensor::Tensor;

// Mask entries are clamped into [CLAMP, 1-CLAMP] before taking log-odds;
// sigmoid outputs saturate to exact 0/1 in f64 well before this matters.
const MASK_CLAMP: f64 = 1e-12;

impl Graph {
    /// Relaxed categorical sample: the mean over `k` draws of
    /// `softmax((g + log_softmax(logits)) / tau)` with Gumbel noise
    /// `g = -ln(-ln u)`. Accepts a row or column vector; the output has the
    /// same shape, entries positive and summing to one.
    pub fn gumbel_softmax(&self, logits: Value, tau: f64, k: usize, rng: &mut Rng) -> Result<Value> {
        let (r, c) = self.shape(logits);
        if r != 1 && c != 1 {
            return Err(GraphError::InvalidArg {
                op: "gumbel_softmax",
                msg: format!("expected a vector, got {r}x{c}"),
            });
        }
        if !self.data(logits).all_finite() {
            return Err(GraphError::NonFinite {
                op: "gumbel_softmax",
            });
        }
        if tau <= 0.0 {
            return Err(GraphError::InvalidArg {
                op: "gumbel_softmax",
                msg: format!("tau must be positive, got {tau}"),
            });
        }
        if k == 0 {
            return Err(GraphError::InvalidArg {
                op: "gumbel_softmax",
                msg: "k must be at least 1".into(),
            });
        }
        let axis = if r == 1 { Axis::Cols } else { Axis::Rows };
        let log_probs = self.log_softmax(logits, axis);
        let mut acc: Option<Value> = None;
        for _ in 0..k {
            let mut noise = Tensor::zeros(r, c);
            for x in noise.data_mut() {
                *x = rng.gumbel();
            }
            let g = self.constant(noise);
            let shifted = self.add(log_probs, g)?;
            let scaled = self.scale_shift(shifted, 1.0 / tau, 0.0);
            let sample = self.softmax(scaled, axis);
            acc = Some(match acc {
                None => sample,
                Some(a) => self.add(a, sample)?,
            });
        }
        Ok(self.scale_shift(acc.unwrap(), 1.0 / k as f64, 0.0))
    }

    /// Mean over entries of the closed-form KL between diagonal Gaussians:
    /// `ln(sq/sp) + (sp^2 + (mp - mq)^2) / (2 sq^2) - 1/2` per entry.
    /// All four arguments share a shape; standard deviations must be
    /// strictly positive.
    pub fn gaussian_kl(
        &self,
        mu_p: Value,
        sigma_p: Value,
        mu_q: Value,
        sigma_q: Value,
    ) -> Result<Value> {
        let shape = self.shape(mu_p);
        for (name, v) in [("sigma_p", sigma_p), ("mu_q", mu_q), ("sigma_q", sigma_q)] {
            if self.shape(v) != shape {
                return Err(GraphError::ShapeMismatch {
                    op: "gaussian_kl",
                    lhs: shape,
                    rhs: self.shape(v),
                });
            }
            let _ = name;
        }
        for (name, v) in [("sigma_p", sigma_p), ("sigma_q", sigma_q)] {
            if self.data(v).iter().any(|&s| s <= 0.0) {
                return Err(GraphError::InvalidArg {
                    op: "gaussian_kl",
                    msg: format!("{name} must be strictly positive"),
                });
            }
        }
        let log_ratio = self.sub(self.ln(sigma_q)?, self.ln(sigma_p)?)?;
        let diff = self.sub(mu_p, mu_q)?;
        let diff2 = self.mul(diff, diff)?;
        let sp2 = self.mul(sigma_p, sigma_p)?;
        let num = self.add(sp2, diff2)?;
        let sq2 = self.mul(sigma_q, sigma_q)?;
        let den = self.scale_shift(sq2, 2.0, 0.0);
        let frac = self.div(num, den)?;
        let sum = self.add(log_ratio, frac)?;
        let per_entry = self.scale_shift(sum, 1.0, -0.5);
        Ok(self.mean_all(per_entry))
    }

    /// Monte Carlo divergence of a relaxed binary mask from the uniform
    /// prior on (0, 1).
    ///
    /// Each mask entry `m` parameterizes a binary Concrete distribution with
    /// log-odds `ln(m / (1-m))` and temperature `tau` (the two-category
    /// Gumbel-softmax): a draw is `s = sigmoid((logit(m) + L) / tau)` with
    /// `L` standard logistic noise. Against the uniform prior the KL reduces
    /// to `E[ln p(s)]`, estimated by averaging the closed-form log-density
    /// over `k` reparameterized draws per entry, then over entries.
    ///
    /// Fused: value and d/d(mask) are computed here and recorded as a single
    /// node, so the k samples never enter the graph.
    pub fn concrete_uniform_kl(
        &self,
        mask: Value,
        tau: f64,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Value> {
        if tau <= 0.0 {
            return Err(GraphError::InvalidArg {
                op: "concrete_uniform_kl",
                msg: format!("tau must be positive, got {tau}"),
            });
        }
        if k == 0 {
            return Err(GraphError::InvalidArg {
                op: "concrete_uniform_kl",
                msg: "k must be at least 1".into(),
            });
        }
        let m = self.data_clone(mask);
        if m.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(GraphError::InvalidArg {
                op: "concrete_uniform_kl",
                msg: "mask entries must lie in [0, 1]".into(),
            });
        }
        let (rows, cols) = m.shape();
        let n = m.len();
        let inv = 1.0 / (n as f64 * k as f64);
        let log_tau = tau.ln();
        let mut total = 0.0;
        let mut grad = Tensor::zeros(rows, cols);
        for (i, &raw) in m.iter().enumerate() {
            let mc = raw.clamp(MASK_CLAMP, 1.0 - MASK_CLAMP);
            let a = (mc / (1.0 - mc)).ln();
            let da_dm = if raw <= MASK_CLAMP || raw >= 1.0 - MASK_CLAMP {
                0.0
            } else {
                1.0 / (mc * (1.0 - mc))
            };
            let mut gsum = 0.0;
            for _ in 0..k {
                let noise = rng.logistic();
                let h = (a + noise) / tau;
                let s = 1.0 / (1.0 + (-h).exp());
                let ln_s = -softplus(-h);
                let ln_1ms = -softplus(h);
                // ln p(s) = ln tau + a - (tau+1)(ln s + ln(1-s))
                //           - 2 * lse(a - tau ln s, -tau ln(1-s))
                let t1 = a - tau * ln_s;
                let t2 = -tau * ln_1ms;
                let lse = log_sum_exp(t1, t2);
                total += log_tau + a - (tau + 1.0) * (ln_s + ln_1ms) - 2.0 * lse;
                // d ln p / d a, with s = sigmoid((a + L)/tau) on the same draw
                gsum += 1.0 - (tau + 1.0) * (1.0 - 2.0 * s) / tau - 2.0 * s;
            }
            grad.data_mut()[i] = gsum * inv * da_dm;
        }
        let value = Tensor::scalar(total * inv);
        Ok(self.push_fused(value, grad, mask))
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn log_sum_exp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Reference estimator for the relaxed-Bernoulli divergence: the same
/// expectation as [`Graph::concrete_uniform_kl`] for a single mask value,
/// brute-forced with `samples` fresh draws. Test oracle; no gradients.
pub fn concrete_uniform_kl_reference(m: f64, tau: f64, samples: usize, rng: &mut Rng) -> f64 {
    let mc = m.clamp(MASK_CLAMP, 1.0 - MASK_CLAMP);
    let a = (mc / (1.0 - mc)).ln();
    let log_tau = tau.ln();
    let mut total = 0.0;
    for _ in 0..samples {
        let h = (a + rng.logistic()) / tau;
        let ln_s = -softplus(-h);
        let ln_1ms = -softplus(h);
        let lse = log_sum_exp(a - tau * ln_s, -tau * ln_1ms);
        total += log_tau + a - (tau + 1.0) * (ln_s + ln_1ms) - 2.0 * lse;
    }
    total / samples as f64
}
