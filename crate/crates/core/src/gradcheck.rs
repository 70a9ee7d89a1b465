//! Central finite-difference verification of analytic gradients.
//!
//! The checker is deliberately independent of the backward pass: it probes
//! the loss with forward evaluations only. Stochastic primitives participate
//! by reseeding their noise source per evaluation, which freezes the draw
//! and isolates the differentiable path.
//!
//! Relative error is scale-floored: `|a - fd| / max(1, |a|, |fd|)`. For
//! gradients of ordinary magnitude this is a true relative error; for
//! near-zero gradients it degrades to an absolute bound, which is the best a
//! central difference at fixed step can certify.

use crate::graph::{Axis, Graph, Result, Value};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Worst observed error for one primitive over all instances.
#[derive(Clone, Debug)]
pub struct PrimitiveCheck {
    pub name: &'static str,
    pub max_rel_err: f64,
}

/// Max scale-floored relative error between analytic gradients and central
/// finite differences of `build` at step `h`, over every entry of every
/// input. `build` must be a pure function of the inputs (stochastic ops
/// reseed internally).
pub fn finite_diff_max_rel_err<F>(inputs: &[Tensor], build: &F, h: f64) -> f64
where
    F: Fn(&Graph, &[Value]) -> Result<Value>,
{
    let eval = |xs: &[Tensor]| -> f64 {
        let g = Graph::new();
        let leaves: Vec<Value> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&g, &leaves).expect("gradcheck build failed");
        let out = g.data(loss).item();
        out
    };

    let g = Graph::new();
    let leaves: Vec<Value> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = build(&g, &leaves).expect("gradcheck build failed");
    g.backward(loss).expect("gradcheck backward failed");
    let grads: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            g.try_grad(v)
                .unwrap_or_else(|| Tensor::zeros(t.rows(), t.cols()))
        })
        .collect();

    let mut worst = 0.0f64;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for i in 0..inputs.len() {
        for e in 0..inputs[i].len() {
            let orig = work[i].data()[e];
            work[i].data_mut()[e] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[e] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[e] = orig;
            let fd = (up - down) / (2.0 * h);
            let a = grads[i].data()[e];
            let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

/// Run `instances` random checks for every differentiable primitive and
/// composite, returning the worst error per entry. The stop-gradient wrapper
/// is excluded by construction (its analytic gradient is zero by definition,
/// not equal to the forward sensitivity); it is checked separately.
pub fn check_all_primitives(instances: usize, h: f64, seed: u64) -> Vec<PrimitiveCheck> {
    let mut rng = Rng::new(seed);
    let mut out = Vec::new();
    macro_rules! entry {
        ($name:expr, $f:expr) => {
            out.push(PrimitiveCheck {
                name: $name,
                max_rel_err: run_instances(instances, h, &mut rng, $f),
            });
        };
    }

    entry!("matmul", |rng: &mut Rng| {
        let a = Tensor::random_uniform(3, 4, -2.0, 2.0, rng);
        let b = Tensor::random_uniform(4, 5, -2.0, 2.0, rng);
        let w = Tensor::random_uniform(3, 5, -1.0, 1.0, rng);
        boxed(vec![a, b], move |g, xs| {
            let c = g.matmul(xs[0], xs[1])?;
            weighted_mean(g, c, &w)
        })
    });
    entry!("matmul_nt", |rng: &mut Rng| {
        let a = Tensor::random_uniform(3, 4, -2.0, 2.0, rng);
        let b = Tensor::random_uniform(5, 4, -2.0, 2.0, rng);
        let w = Tensor::random_uniform(3, 5, -1.0, 1.0, rng);
        boxed(vec![a, b], move |g, xs| {
            let c = g.matmul_nt(xs[0], xs[1])?;
            weighted_mean(g, c, &w)
        })
    });
    entry!("add_bias", |rng: &mut Rng| {
        let a = Tensor::random_uniform(4, 6, -2.0, 2.0, rng);
        let b = Tensor::random_uniform(4, 1, -2.0, 2.0, rng);
        let w = Tensor::random_uniform(4, 6, -1.0, 1.0, rng);
        boxed(vec![a, b], move |g, xs| {
            let c = g.add_bias(xs[0], xs[1])?;
            weighted_mean(g, c, &w)
        })
    });
    entry!("add", |rng: &mut Rng| binary_case(rng, |g, a, b| g.add(a, b)));
    entry!("sub", |rng: &mut Rng| binary_case(rng, |g, a, b| g.sub(a, b)));
    entry!("mul", |rng: &mut Rng| binary_case(rng, |g, a, b| g.mul(a, b)));
    entry!("div", |rng: &mut Rng| {
        let a = Tensor::random_uniform(3, 4, -2.0, 2.0, rng);
        let mut b = Tensor::random_uniform(3, 4, 0.5, 2.0, rng);
        for v in b.data_mut() {
            if rng.uniform() < 0.5 {
                *v = -*v;
            }
        }
        let w = Tensor::random_uniform(3, 4, -1.0, 1.0, rng);
        boxed(vec![a, b], move |g, xs| {
            let c = g.div(xs[0], xs[1])?;
            weighted_mean(g, c, &w)
        })
    });
    entry!("scale_shift", |rng: &mut Rng| {
        let a = Tensor::random_uniform(3, 4, -2.0, 2.0, rng);
        let (s, t) = (rng.range(-2.0, 2.0), rng.range(-1.0, 1.0));
        let w = Tensor::random_uniform(3, 4, -1.0, 1.0, rng);
        boxed(vec![a], move |g, xs| {
            let c = g.scale_shift(xs[0], s, t);
            weighted_mean(g, c, &w)
        })
    });
    entry!("elu", |rng: &mut Rng| unary_case(rng, |g, v| Ok(g.elu(v))));
    entry!("sigmoid", |rng: &mut Rng| unary_case(rng, |g, v| Ok(g.sigmoid(v))));
    entry!("exp", |rng: &mut Rng| unary_case(rng, |g, v| Ok(g.exp(v))));
    entry!("ln", |rng: &mut Rng| {
        let a = Tensor::random_uniform(3, 4, 0.1, 3.0, rng);
        let w = Tensor::random_uniform(3, 4, -1.0, 1.0, rng);
        boxed(vec![a], move |g, xs| {
            let c = g.ln(xs[0])?;
            weighted_mean(g, c, &w)
        })
    });
    entry!("clamp_min", |rng: &mut Rng| {
        // Keep samples off the kink at the floor.
        let mut a = Tensor::random_uniform(3, 4, 0.1, 2.0, rng);
        for v in a.data_mut() {
            if rng.uniform() < 0.5 {
                *v = -*v;
            }
        }
        let w = Tensor::random_uniform(3, 4, -1.0, 1.0, rng);
        boxed(vec![a], move |g, xs| {
            let c = g.clamp_min(xs[0], 0.0);
            weighted_mean(g, c, &w)
        })
    });
    entry!("softmax_rows", |rng: &mut Rng| unary_case(rng, |g, v| {
        Ok(g.softmax(v, Axis::Rows))
    }));
    entry!("softmax_cols", |rng: &mut Rng| unary_case(rng, |g, v| {
        Ok(g.softmax(v, Axis::Cols))
    }));
    entry!("log_softmax_rows", |rng: &mut Rng| unary_case(rng, |g, v| {
        Ok(g.log_softmax(v, Axis::Rows))
    }));
    entry!("log_softmax_cols", |rng: &mut Rng| unary_case(rng, |g, v| {
        Ok(g.log_softmax(v, Axis::Cols))
    }));
    entry!("max_cols", |rng: &mut Rng| {
        let a = spread_rows(3, 6, rng);
        let w = Tensor::random_uniform(3, 1, -1.0, 1.0, rng);
        boxed(vec![a], move |g, xs| {
            let c = g.max_cols(xs[0]);
            weighted_mean(g, c, &w)
        })
    });
    entry!("mean_cols", |rng: &mut Rng| {
        let a = Tensor::random_uniform(3, 6, -2.0, 2.0, rng);
        let w = Tensor::random_uniform(3, 1, -1.0, 1.0, rng);
        boxed(vec![a], move |g, xs| {
            let c = g.mean_cols(xs[0]);
            weighted_mean(g, c, &w)
        })
    });
    entry!("var_cols", |rng: &mut Rng| {
        let a = Tensor::random_uniform(3, 6, -2.0, 2.0, rng);
        let w = Tensor::random_uniform(3, 1, -1.0, 1.0, rng);
        boxed(vec![a], move |g, xs| {
            let c = g.var_cols(xs[0]);
            weighted_mean(g, c, &w)
        })
    });
    entry!("group_max_cols", |rng: &mut Rng| {
        let a = spread_rows(3, 8, rng);
        let groups = vec![vec![0, 2, 5], vec![1, 3], vec![4, 6, 7]];
        let w = Tensor::random_uniform(3, 3, -1.0, 1.0, rng);
        boxed(vec![a], move |g, xs| {
            let c = g.group_max_cols(xs[0], &groups)?;
            weighted_mean(g, c, &w)
        })
    });
    entry!("cross_entropy", |rng: &mut Rng| {
        let classes = 5;
        let batch = 3;
        let a = Tensor::random_uniform(classes, batch, -2.0, 2.0, rng);
        let labels: Vec<usize> = (0..batch).map(|_| rng.below(classes)).collect();
        boxed(vec![a], move |g, xs| g.cross_entropy(xs[0], &labels))
    });
    entry!("concat_slice_cols", |rng: &mut Rng| {
        let a = Tensor::random_uniform(3, 2, -2.0, 2.0, rng);
        let b = Tensor::random_uniform(3, 4, -2.0, 2.0, rng);
        let w = Tensor::random_uniform(3, 3, -1.0, 1.0, rng);
        boxed(vec![a, b], move |g, xs| {
            let c = g.concat_cols(&[xs[0], xs[1]])?;
            let s = g.slice_cols(c, 1, 3)?;
            weighted_mean(g, s, &w)
        })
    });
    entry!("mean_all", |rng: &mut Rng| {
        let a = Tensor::random_uniform(4, 5, -2.0, 2.0, rng);
        boxed(vec![a], move |g, xs| Ok(g.mean_all(xs[0])))
    });
    entry!("affine_stack_chain", |rng: &mut Rng| {
        // Five-layer random graph mixing the model-facing primitives.
        let x = Tensor::random_uniform(4, 7, -1.0, 1.0, rng);
        let w1 = Tensor::random_uniform(6, 4, -0.7, 0.7, rng);
        let b1 = Tensor::random_uniform(6, 1, -0.5, 0.5, rng);
        let w2 = Tensor::random_uniform(5, 6, -0.7, 0.7, rng);
        let b2 = Tensor::random_uniform(5, 1, -0.5, 0.5, rng);
        let labels = vec![rng.below(5)];
        boxed(vec![x, w1, b1, w2, b2], move |g, xs| {
            let h1 = g.elu(g.add_bias(g.matmul(xs[1], xs[0])?, xs[2])?);
            let h2 = g.add_bias(g.matmul(xs[3], h1)?, xs[4])?;
            let pooled = g.mean_cols(g.sigmoid(h2));
            g.cross_entropy(pooled, &labels)
        })
    });
    entry!("gumbel_softmax", |rng: &mut Rng| {
        let logits = Tensor::random_uniform(1, 6, -1.5, 1.5, rng);
        let w = Tensor::random_uniform(1, 6, -1.0, 1.0, rng);
        let seed = rng.below(1 << 30) as u64;
        boxed(vec![logits], move |g, xs| {
            let mut noise = Rng::new(seed);
            let s = g.gumbel_softmax(xs[0], 0.7, 8, &mut noise)?;
            weighted_mean(g, s, &w)
        })
    });
    entry!("gaussian_kl", |rng: &mut Rng| {
        let mp = Tensor::random_uniform(1, 5, -1.0, 1.0, rng);
        let sp = Tensor::random_uniform(1, 5, 0.5, 1.5, rng);
        let mq = Tensor::random_uniform(1, 5, -1.0, 1.0, rng);
        let sq = Tensor::random_uniform(1, 5, 0.5, 1.5, rng);
        boxed(vec![mp, sp, mq, sq], move |g, xs| {
            g.gaussian_kl(xs[0], xs[1], xs[2], xs[3])
        })
    });
    entry!("concrete_uniform_kl", |rng: &mut Rng| {
        let mask = Tensor::random_uniform(4, 5, 0.1, 0.9, rng);
        let seed = rng.below(1 << 30) as u64;
        boxed(vec![mask], move |g, xs| {
            let mut noise = Rng::new(seed);
            g.concrete_uniform_kl(xs[0], 0.7, 8, &mut noise)
        })
    });

    out
}

type Build = Box<dyn Fn(&Graph, &[Value]) -> Result<Value>>;

fn boxed<F>(inputs: Vec<Tensor>, f: F) -> (Vec<Tensor>, Build)
where
    F: Fn(&Graph, &[Value]) -> Result<Value> + 'static,
{
    (inputs, Box::new(f))
}

fn run_instances(
    instances: usize,
    h: f64,
    rng: &mut Rng,
    make: impl Fn(&mut Rng) -> (Vec<Tensor>, Build),
) -> f64 {
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (inputs, build) = make(rng);
        worst = worst.max(finite_diff_max_rel_err(&inputs, &build, h));
    }
    worst
}

fn weighted_mean(g: &Graph, v: Value, w: &Tensor) -> Result<Value> {
    let wc = g.constant(w.clone());
    Ok(g.mean_all(g.mul(v, wc)?))
}

fn unary_case(
    rng: &mut Rng,
    f: impl Fn(&Graph, Value) -> Result<Value> + 'static,
) -> (Vec<Tensor>, Build) {
    let a = Tensor::random_uniform(3, 4, -2.0, 2.0, rng);
    let w = Tensor::random_uniform(3, 4, -1.0, 1.0, rng);
    boxed(vec![a], move |g, xs| {
        let c = f(g, xs[0])?;
        weighted_mean(g, c, &w)
    })
}

fn binary_case(
    rng: &mut Rng,
    f: impl Fn(&Graph, Value, Value) -> Result<Value> + 'static,
) -> (Vec<Tensor>, Build) {
    let a = Tensor::random_uniform(3, 4, -2.0, 2.0, rng);
    let b = Tensor::random_uniform(3, 4, -2.0, 2.0, rng);
    let w = Tensor::random_uniform(3, 4, -1.0, 1.0, rng);
    boxed(vec![a, b], move |g, xs| {
        let c = f(g, xs[0], xs[1])?;
        weighted_mean(g, c, &w)
    })
}

/// Random matrix whose per-row top-two values are separated by at least 0.1,
/// keeping max-style reductions away from argmax flips under the FD step.
fn spread_rows(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(rows, cols);
    for r in 0..rows {
        loop {
            let vals: Vec<f64> = (0..cols).map(|_| rng.range(-2.0, 2.0)).collect();
            let mut sorted = vals.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if sorted[0] - sorted[1] > 0.1 {
                for (c, v) in vals.into_iter().enumerate() {
                    t.set(r, c, v);
                }
                break;
            }
        }
    }
    t
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_every_primitive() {
        for check in check_all_primitives(3, 1e-3, 2024) {
            assert!(
                check.max_rel_err < 1e-4,
                "{} exceeded tolerance: {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn max_cols_matches_fd_away_from_ties() {
        // Scattering the adjoint to argmax positions is the whole gradient.
        let mut rng = Rng::new(8);
        let a = spread_rows(4, 5, &mut rng);
        let w = Tensor::random_uniform(4, 1, -1.0, 1.0, &mut rng);
        let (inputs, build) = boxed(vec![a], move |g: &Graph, xs: &[Value]| {
            let m = g.max_cols(xs[0]);
            weighted_mean(g, m, &w)
        });
        assert!(finite_diff_max_rel_err(&inputs, &build, 1e-3) < 1e-4);
    }
}
