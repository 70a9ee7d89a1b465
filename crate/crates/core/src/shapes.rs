//! Synthetic labeled point clouds and point-cloud file IO.
//!
//! Six parametric shape families stand in for a CAD dataset at desk scale.
//! Points are sampled uniformly by surface area, jittered, and normalized to
//! the unit sphere. Composite shapes allocate points across parts by nominal
//! area with largest-remainder rounding, so part coverage is deterministic;
//! each point keeps a part id for qualitative inspection (in memory only,
//! the `.xyz` format does not carry it).

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum ShapeError {
    #[error("unknown shape kind `{0}` (expected one of {})", ShapeKind::ALL_NAMES)]
    UnknownKind(String),
    #[error("need at least {min} points, got {n}")]
    TooFewPoints { n: usize, min: usize },
    #[error("jitter must be non-negative, got {0}")]
    NegativeJitter(f64),
    #[error("degenerate cloud: all points identical, scale undefined")]
    DegenerateCloud,
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{path}: empty point cloud file")]
    EmptyFile { path: PathBuf },
    #[error("manifest missing key `{0}`")]
    MissingKey(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, ShapeError>;

/// A point cloud: `n` points with optional class label and per-point part
/// ids. Coordinates are unitless; after [`normalize_unit_sphere`] the
/// centroid is the origin and the farthest point sits on the unit sphere.
#[derive(Clone, Debug)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub label: Option<usize>,
    pub part_ids: Option<Vec<u8>>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Self {
        PointCloud {
            points,
            label: None,
            part_ids: None,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for d in 0..3 {
                c[d] += p[d];
            }
        }
        let n = self.points.len() as f64;
        for v in &mut c {
            *v /= n;
        }
        c
    }

    /// Cloud with the listed point indices removed; label kept, part ids
    /// filtered alongside. Indices may arrive in any order.
    pub fn without_points(&self, drop: &[usize]) -> PointCloud {
        let mut keep = vec![true; self.points.len()];
        for &i in drop {
            keep[i] = false;
        }
        let points = self
            .points
            .iter()
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|(p, _)| *p)
            .collect();
        let part_ids = self.part_ids.as_ref().map(|ids| {
            ids.iter()
                .zip(&keep)
                .filter(|(_, &k)| k)
                .map(|(id, _)| *id)
                .collect()
        });
        PointCloud {
            points,
            label: self.label,
            part_ids,
        }
    }
}

/// The shape families. `PotPlant` and `ChairLike` are composites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Cone,
    PotPlant,
    ChairLike,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Cone,
        ShapeKind::PotPlant,
        ShapeKind::ChairLike,
    ];
    const ALL_NAMES: &'static str = "sphere, cube, cylinder, cone, pot_plant, chair_like";

    pub fn name(&self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Cone => "cone",
            ShapeKind::PotPlant => "pot_plant",
            ShapeKind::ChairLike => "chair_like",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = ShapeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "cube" => Ok(ShapeKind::Cube),
            "cylinder" => Ok(ShapeKind::Cylinder),
            "cone" => Ok(ShapeKind::Cone),
            "pot_plant" => Ok(ShapeKind::PotPlant),
            "chair_like" => Ok(ShapeKind::ChairLike),
            other => Err(ShapeError::UnknownKind(other.to_string())),
        }
    }
}

/// Sample `n` points from a shape's surface, apply Gaussian jitter of scale
/// `jitter`, and normalize to the unit sphere.
pub fn generate_shape(kind: ShapeKind, n: usize, rng: &mut Rng, jitter: f64) -> Result<PointCloud> {
    if n < 8 {
        return Err(ShapeError::TooFewPoints { n, min: 8 });
    }
    if jitter < 0.0 {
        return Err(ShapeError::NegativeJitter(jitter));
    }
    let mut pc = match kind {
        ShapeKind::Sphere => sample_parts(n, rng, &[(4.0 * PI, Part::SphereShell)]),
        ShapeKind::Cube => sample_parts(n, rng, &[(24.0, Part::Box3 { c: [0.0; 3], h: [1.0; 3] })]),
        ShapeKind::Cylinder => {
            let r = 0.6;
            let lateral = 2.0 * PI * r * 2.0;
            let caps = 2.0 * PI * r * r;
            sample_parts(
                n,
                rng,
                &[
                    (lateral, Part::CylinderSide { r }),
                    (caps, Part::CylinderCaps { r }),
                ],
            )
        }
        ShapeKind::Cone => {
            let r: f64 = 0.8;
            let slant = (r * r + 4.0).sqrt();
            sample_parts(
                n,
                rng,
                &[
                    (PI * r * slant, Part::ConeSide { r }),
                    (PI * r * r, Part::ConeBase { r }),
                ],
            )
        }
        ShapeKind::PotPlant => {
            // Bowl opening upward under a spherical canopy shell. The bowl
            // is the discriminative part: without it the canopy reads as a
            // sphere, mirroring plant/pot confusions at toy scale.
            let pot_r = 0.45;
            let canopy_r = 0.55;
            sample_parts(
                n,
                rng,
                &[
                    (2.0 * PI * pot_r * pot_r, Part::Bowl { r: pot_r }),
                    (4.0 * PI * canopy_r * canopy_r, Part::CanopyShell { r: canopy_r }),
                ],
            )
        }
        ShapeKind::ChairLike => {
            // Chunky box seat; the back and legs are what separate it from
            // a plain cube.
            let seat = Part::Box3 {
                c: [0.0, 0.0, -0.1],
                h: [0.5, 0.5, 0.38],
            };
            let back = Part::Box3 {
                c: [0.0, -0.47, 0.62],
                h: [0.5, 0.04, 0.34],
            };
            let legs = Part::ChairLegs;
            sample_parts(
                n,
                rng,
                &[
                    (box_area([0.5, 0.5, 0.38]), seat),
                    (box_area([0.5, 0.04, 0.34]), back),
                    (4.0 * box_area([0.05, 0.05, 0.25]), legs),
                ],
            )
        }
    };
    if jitter > 0.0 {
        for p in &mut pc.points {
            for v in p.iter_mut() {
                *v += jitter * rng.normal();
            }
        }
    }
    let mut pc = normalize_unit_sphere(pc)?;
    pc.label = None;
    Ok(pc)
}

const PI: f64 = std::f64::consts::PI;

#[derive(Clone, Copy)]
enum Part {
    SphereShell,
    Box3 { c: [f64; 3], h: [f64; 3] },
    CylinderSide { r: f64 },
    CylinderCaps { r: f64 },
    ConeSide { r: f64 },
    ConeBase { r: f64 },
    Bowl { r: f64 },
    CanopyShell { r: f64 },
    ChairLegs,
}

fn box_area(h: [f64; 3]) -> f64 {
    8.0 * (h[1] * h[2] + h[0] * h[2] + h[0] * h[1])
}

/// Largest-remainder allocation of `n` points over parts by nominal area,
/// then per-part surface sampling.
fn sample_parts(n: usize, rng: &mut Rng, parts: &[(f64, Part)]) -> PointCloud {
    let total: f64 = parts.iter().map(|(a, _)| a).sum();
    let mut counts: Vec<usize> = Vec::with_capacity(parts.len());
    let mut remainders: Vec<(f64, usize)> = Vec::with_capacity(parts.len());
    let mut assigned = 0;
    for (i, (area, _)) in parts.iter().enumerate() {
        let exact = n as f64 * area / total;
        let floor = exact.floor() as usize;
        counts.push(floor);
        assigned += floor;
        remainders.push((exact - floor as f64, i));
    }
    remainders.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    for k in 0..n - assigned {
        counts[remainders[k % remainders.len()].1] += 1;
    }

    let mut points = Vec::with_capacity(n);
    let mut ids = Vec::with_capacity(n);
    for (pid, ((_, part), count)) in parts.iter().zip(&counts).enumerate() {
        match part {
            // Antipodal pairs keep the sample centroid exactly at the
            // origin, so normalizing a jitter-free sphere leaves every
            // point at norm one.
            Part::SphereShell => {
                let mut left = *count;
                while left >= 2 {
                    let p = sphere_surface(1.0, rng);
                    points.push(p);
                    points.push([-p[0], -p[1], -p[2]]);
                    ids.push(pid as u8);
                    ids.push(pid as u8);
                    left -= 2;
                }
                if left == 1 {
                    points.push(sphere_surface(1.0, rng));
                    ids.push(pid as u8);
                }
            }
            _ => {
                for _ in 0..*count {
                    points.push(sample_part(*part, rng));
                    ids.push(pid as u8);
                }
            }
        }
    }
    PointCloud {
        points,
        label: None,
        part_ids: Some(ids),
    }
}

fn sample_part(part: Part, rng: &mut Rng) -> [f64; 3] {
    match part {
        Part::SphereShell => sphere_surface(1.0, rng),
        Part::Box3 { c, h } => box_surface(c, h, rng),
        Part::CylinderSide { r } => {
            let theta = rng.range(0.0, 2.0 * PI);
            [r * theta.cos(), r * theta.sin(), rng.range(-1.0, 1.0)]
        }
        Part::CylinderCaps { r } => {
            let theta = rng.range(0.0, 2.0 * PI);
            let rad = r * rng.uniform().sqrt();
            let z = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            [rad * theta.cos(), rad * theta.sin(), z]
        }
        Part::ConeSide { r } => {
            // Area-uniform along the slant: radial fraction sqrt(u).
            let t = rng.uniform().sqrt();
            let theta = rng.range(0.0, 2.0 * PI);
            [t * r * theta.cos(), t * r * theta.sin(), 1.0 - 2.0 * t]
        }
        Part::ConeBase { r } => {
            let rad = r * rng.uniform().sqrt();
            let theta = rng.range(0.0, 2.0 * PI);
            [rad * theta.cos(), rad * theta.sin(), -1.0]
        }
        Part::Bowl { r } => {
            // Lower hemisphere opening upward, rim hanging below the canopy.
            let p = sphere_surface(r, rng);
            [p[0], p[1], -p[2].abs() - 0.45]
        }
        Part::CanopyShell { r } => {
            // Spherical shell centered above the bowl.
            let p = sphere_surface(r, rng);
            [p[0], p[1], p[2] + 0.4]
        }
        Part::ChairLegs => {
            let leg = rng.below(4);
            let (sx, sy) = [(0.42, 0.42), (-0.42, 0.42), (0.42, -0.42), (-0.42, -0.42)][leg];
            box_surface([sx, sy, -0.73], [0.05, 0.05, 0.25], rng)
        }
    }
}

fn sphere_surface(r: f64, rng: &mut Rng) -> [f64; 3] {
    let z = rng.range(-1.0, 1.0);
    let theta = rng.range(0.0, 2.0 * PI);
    let s = (1.0 - z * z).max(0.0).sqrt();
    [r * s * theta.cos(), r * s * theta.sin(), r * z]
}

fn box_surface(c: [f64; 3], h: [f64; 3], rng: &mut Rng) -> [f64; 3] {
    // Pick a face pair by area, then a sign and in-face uv.
    let areas = [h[1] * h[2], h[0] * h[2], h[0] * h[1]];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.uniform() * total;
    let mut axis = 2;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            axis = i;
            break;
        }
        pick -= a;
    }
    let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
    let mut p = [0.0; 3];
    for d in 0..3 {
        p[d] = if d == axis {
            sign * h[d]
        } else {
            rng.range(-h[d], h[d])
        };
    }
    [c[0] + p[0], c[1] + p[1], c[2] + p[2]]
}

/// Center the cloud on its centroid and scale the farthest point to norm
/// one. Idempotent; rejects clouds whose points are all identical.
pub fn normalize_unit_sphere(mut pc: PointCloud) -> Result<PointCloud> {
    if pc.is_empty() {
        return Err(ShapeError::TooFewPoints { n: 0, min: 1 });
    }
    let c = pc.centroid();
    let mut max_norm: f64 = 0.0;
    for p in &mut pc.points {
        for d in 0..3 {
            p[d] -= c[d];
        }
        let norm = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
        max_norm = max_norm.max(norm);
    }
    if max_norm < 1e-12 {
        return Err(ShapeError::DegenerateCloud);
    }
    for p in &mut pc.points {
        for v in p.iter_mut() {
            *v /= max_norm;
        }
    }
    Ok(pc)
}

// ── .xyz file IO ─────────────────────────────────────────────────────
//
// One point per line, `x y z` or `x y z score`, nine significant digits,
// line-feed separated.

pub fn save_xyz(path: &Path, pc: &PointCloud, scores: Option<&[f64]>) -> Result<()> {
    if let Some(s) = scores {
        assert_eq!(s.len(), pc.len(), "score map must align with the cloud");
    }
    let mut out = String::with_capacity(pc.len() * 48);
    for (i, p) in pc.points.iter().enumerate() {
        match scores {
            Some(s) => out.push_str(&format!(
                "{:.8e} {:.8e} {:.8e} {:.8e}\n",
                p[0], p[1], p[2], s[i]
            )),
            None => out.push_str(&format!("{:.8e} {:.8e} {:.8e}\n", p[0], p[1], p[2])),
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Load a `.xyz` file; a fourth column comes back as a score map.
pub fn load_xyz(path: &Path) -> Result<(PointCloud, Option<Vec<f64>>)> {
    let text = fs::read_to_string(path)?;
    let mut points = Vec::new();
    let mut scores: Option<Vec<f64>> = None;
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        let fields: Vec<&str> = trimmed.split_whitespace().collect();
        if fields.len() != 3 && fields.len() != 4 {
            return Err(ShapeError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("expected 3 or 4 columns, got {}", fields.len()),
            });
        }
        let mut vals = [0.0; 4];
        for (i, f) in fields.iter().enumerate() {
            vals[i] = f.parse::<f64>().map_err(|e| ShapeError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                msg: format!("bad number `{f}`: {e}"),
            })?;
        }
        if fields.len() == 4 {
            scores.get_or_insert_with(Vec::new).push(vals[3]);
        } else if scores.is_some() {
            return Err(ShapeError::Malformed {
                path: path.to_path_buf(),
                line: lineno,
                msg: "mixed 3- and 4-column lines".into(),
            });
        }
        points.push([vals[0], vals[1], vals[2]]);
    }
    if points.is_empty() {
        return Err(ShapeError::EmptyFile {
            path: path.to_path_buf(),
        });
    }
    if let Some(s) = &scores {
        if s.len() != points.len() {
            return Err(ShapeError::Malformed {
                path: path.to_path_buf(),
                line: 1,
                msg: "mixed 3- and 4-column lines".into(),
            });
        }
    }
    Ok((PointCloud::new(points), scores))
}

// ── labeled datasets ─────────────────────────────────────────────────

/// Train/test splits of generated clouds plus the recipe that made them.
#[derive(Clone, Debug)]
pub struct LabeledDataset {
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub n_points: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl LabeledDataset {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}

/// Generation recipe. Defaults match the toolkit-wide defaults: 6 classes,
/// 500 train / 100 test per class, 256 points, jitter 0.06.
#[derive(Clone, Debug)]
pub struct DatasetSpec {
    pub kinds: Vec<ShapeKind>,
    pub per_class_train: usize,
    pub per_class_test: usize,
    pub n_points: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            kinds: ShapeKind::ALL.to_vec(),
            per_class_train: 500,
            per_class_test: 100,
            n_points: 256,
            jitter: 0.06,
            seed: 0,
        }
    }
}

/// Generate both splits. Each cloud draws from its own fork of the seed —
/// streams are keyed by (split, class, index), so the splits are disjoint by
/// construction and regeneration is bit-identical.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<LabeledDataset> {
    let root = Rng::new(spec.seed);
    let make = |split: u64, per_class: usize| -> Result<Vec<PointCloud>> {
        let mut out = Vec::with_capacity(per_class * spec.kinds.len());
        for (ci, kind) in spec.kinds.iter().enumerate() {
            for idx in 0..per_class {
                let stream = (split << 40) | ((ci as u64) << 20) | idx as u64;
                let mut rng = root.fork(stream);
                let mut pc = generate_shape(*kind, spec.n_points, &mut rng, spec.jitter)?;
                pc.label = Some(ci);
                out.push(pc);
            }
        }
        Ok(out)
    };
    Ok(LabeledDataset {
        train: make(1, spec.per_class_train)?,
        test: make(2, spec.per_class_test)?,
        class_names: spec.kinds.iter().map(|k| k.name().to_string()).collect(),
        n_points: spec.n_points,
        jitter: spec.jitter,
        seed: spec.seed,
    })
}

/// Write a dataset directory: `manifest.txt` plus `train/` and `test/`
/// subdirectories of `.xyz` files named `c<class>_<index>.xyz`.
pub fn save_dataset(dir: &Path, ds: &LabeledDataset) -> Result<()> {
    fs::create_dir_all(dir.join("train"))?;
    fs::create_dir_all(dir.join("test"))?;
    let mut manifest = String::new();
    manifest.push_str("kind=dataset\n");
    manifest.push_str(&format!("classes={}\n", ds.class_names.join(",")));
    manifest.push_str(&format!(
        "per_class_train={}\n",
        ds.train.len() / ds.classes().max(1)
    ));
    manifest.push_str(&format!(
        "per_class_test={}\n",
        ds.test.len() / ds.classes().max(1)
    ));
    manifest.push_str(&format!("points={}\n", ds.n_points));
    manifest.push_str(&format!("jitter={}\n", ds.jitter));
    manifest.push_str(&format!("seed={}\n", ds.seed));
    fs::write(dir.join("manifest.txt"), manifest)?;
    for (split, clouds) in [("train", &ds.train), ("test", &ds.test)] {
        let mut counters = vec![0usize; ds.classes()];
        for pc in clouds.iter() {
            let label = pc.label.expect("dataset clouds carry labels");
            let name = format!("c{label}_{:05}.xyz", counters[label]);
            counters[label] += 1;
            save_xyz(&dir.join(split).join(name), pc, None)?;
        }
    }
    Ok(())
}

/// Read a dataset directory written by [`save_dataset`].
pub fn load_dataset(dir: &Path) -> Result<LabeledDataset> {
    let manifest = parse_kv(&fs::read_to_string(dir.join("manifest.txt"))?);
    let get = |k: &str| -> Result<String> {
        manifest
            .iter()
            .find(|(key, _)| key == k)
            .map(|(_, v)| v.clone())
            .ok_or_else(|| ShapeError::MissingKey(k.to_string()))
    };
    let class_names: Vec<String> = get("classes")?.split(',').map(str::to_string).collect();
    let n_points: usize = get("points")?.parse().unwrap_or(0);
    let jitter: f64 = get("jitter")?.parse().unwrap_or(0.0);
    let seed: u64 = get("seed")?.parse().unwrap_or(0);

    let load_split = |split: &str| -> Result<Vec<PointCloud>> {
        let mut entries: Vec<PathBuf> = fs::read_dir(dir.join(split))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "xyz"))
            .collect();
        entries.sort();
        let mut out = Vec::with_capacity(entries.len());
        for path in entries {
            let stem = path.file_stem().unwrap_or_default().to_string_lossy();
            let label = stem
                .strip_prefix('c')
                .and_then(|s| s.split('_').next())
                .and_then(|s| s.parse::<usize>().ok());
            let (mut pc, _) = load_xyz(&path)?;
            pc.label = label;
            out.push(pc);
        }
        Ok(out)
    };
    Ok(LabeledDataset {
        train: load_split("train")?,
        test: load_split("test")?,
        class_names,
        n_points,
        jitter,
        seed,
    })
}

/// Parse `key=value` lines, ignoring blanks and `#` comments.
pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn norm(p: &[f64; 3]) -> f64 {
        (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
    }

    #[test]
    fn sphere_points_sit_on_unit_sphere() {
        let mut rng = Rng::new(1);
        let pc = generate_shape(ShapeKind::Sphere, 1000, &mut rng, 0.0).unwrap();
        for p in &pc.points {
            assert!((norm(p) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn normalization_invariants() {
        let mut rng = Rng::new(2);
        for kind in ShapeKind::ALL {
            let pc = generate_shape(kind, 300, &mut rng, 0.02).unwrap();
            let c = pc.centroid();
            assert!(norm(&c) < 1e-9, "{kind}: centroid {c:?}");
            let max = pc.points.iter().map(norm).fold(0.0, f64::max);
            assert!((max - 1.0).abs() < 1e-9, "{kind}: max norm {max}");
        }
    }

    #[test]
    fn normalization_is_idempotent_and_translation_invariant() {
        let mut rng = Rng::new(3);
        let pc = generate_shape(ShapeKind::Cube, 128, &mut rng, 0.01).unwrap();
        let again = normalize_unit_sphere(pc.clone()).unwrap();
        for (a, b) in pc.points.iter().zip(&again.points) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-12);
            }
        }
        let mut shifted = pc.clone();
        for p in &mut shifted.points {
            for v in p.iter_mut() {
                *v += 5.0;
            }
        }
        let back = normalize_unit_sphere(shifted).unwrap();
        for (a, b) in pc.points.iter().zip(&back.points) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn normalize_two_point_cloud() {
        let pc = PointCloud::new(vec![[0.0, 0.0, 0.0], [0.0, 0.0, 2.0]]);
        let out = normalize_unit_sphere(pc).unwrap();
        assert!((out.points[0][2] + 1.0).abs() < 1e-12);
        assert!((out.points[1][2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cloud_rejected() {
        let pc = PointCloud::new(vec![[1.0, 1.0, 1.0]; 5]);
        assert!(matches!(
            normalize_unit_sphere(pc),
            Err(ShapeError::DegenerateCloud)
        ));
    }

    #[test]
    fn cube_faces_are_area_uniform() {
        // Before normalization a cube face is identified by the coordinate
        // that sits at +-1; jitter 0 keeps that exact. Expect ~1/6 per face.
        let mut rng = Rng::new(4);
        let n = 600;
        let pc = sample_parts(
            n,
            &mut rng,
            &[(24.0, Part::Box3 { c: [0.0; 3], h: [1.0; 3] })],
        );
        let mut counts = [0usize; 6];
        for p in &pc.points {
            for d in 0..3 {
                if (p[d] - 1.0).abs() < 1e-12 {
                    counts[2 * d] += 1;
                } else if (p[d] + 1.0).abs() < 1e-12 {
                    counts[2 * d + 1] += 1;
                }
            }
        }
        assert_eq!(counts.iter().sum::<usize>(), n);
        for c in counts {
            let frac = c as f64 / n as f64;
            assert!((frac - 1.0 / 6.0).abs() < 0.05, "face fraction {frac}");
        }
    }

    #[test]
    fn pot_plant_parts_both_covered() {
        let mut rng = Rng::new(5);
        let pc = generate_shape(ShapeKind::PotPlant, 256, &mut rng, 0.01).unwrap();
        let ids = pc.part_ids.as_ref().unwrap();
        let pot = ids.iter().filter(|&&i| i == 0).count();
        let canopy = ids.iter().filter(|&&i| i == 1).count();
        assert_eq!(pot + canopy, 256);
        assert!(pot >= 51, "pot has {pot} points");
        assert!(canopy >= 51, "canopy has {canopy} points");
    }

    #[test]
    fn unknown_kind_and_bad_args_rejected() {
        assert!("dodecahedron".parse::<ShapeKind>().is_err());
        let mut rng = Rng::new(6);
        assert!(generate_shape(ShapeKind::Sphere, 4, &mut rng, 0.0).is_err());
        assert!(generate_shape(ShapeKind::Sphere, 64, &mut rng, -0.1).is_err());
    }

    #[test]
    fn xyz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(7);
        let pc = generate_shape(ShapeKind::Cone, 64, &mut rng, 0.01).unwrap();
        let scores: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();

        let bare = dir.path().join("bare.xyz");
        save_xyz(&bare, &pc, None).unwrap();
        let (loaded, s) = load_xyz(&bare).unwrap();
        assert!(s.is_none());
        for (a, b) in pc.points.iter().zip(&loaded.points) {
            for d in 0..3 {
                assert!((a[d] - b[d]).abs() < 1e-8);
            }
        }

        let scored = dir.path().join("scored.xyz");
        save_xyz(&scored, &pc, Some(&scores)).unwrap();
        let (_, s) = load_xyz(&scored).unwrap();
        let s = s.expect("4-column file carries scores");
        for (a, b) in scores.iter().zip(&s) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn malformed_and_empty_files_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("bad.xyz");
        fs::write(&bad, "1.0 2.0 3.0\n1.0 nope 3.0\n").unwrap();
        match load_xyz(&bad) {
            Err(ShapeError::Malformed { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected Malformed, got {other:?}"),
        }
        let empty = dir.path().join("empty.xyz");
        fs::write(&empty, "").unwrap();
        assert!(matches!(load_xyz(&empty), Err(ShapeError::EmptyFile { .. })));
    }

    #[test]
    fn dataset_regeneration_is_bit_identical() {
        let spec = DatasetSpec {
            per_class_train: 3,
            per_class_test: 2,
            n_points: 32,
            ..DatasetSpec::default()
        };
        let a = generate_dataset(&spec).unwrap();
        let b = generate_dataset(&spec).unwrap();
        for (x, y) in a.train.iter().zip(&b.train) {
            assert_eq!(x.label, y.label);
            for (p, q) in x.points.iter().zip(&y.points) {
                for d in 0..3 {
                    assert_eq!(p[d].to_bits(), q[d].to_bits());
                }
            }
        }
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = DatasetSpec {
            per_class_train: 2,
            per_class_test: 1,
            n_points: 16,
            ..DatasetSpec::default()
        };
        let ds = generate_dataset(&spec).unwrap();
        save_dataset(dir.path(), &ds).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded.class_names, ds.class_names);
        assert_eq!(loaded.train.len(), ds.train.len());
        assert_eq!(loaded.test.len(), ds.test.len());
        let labels: Vec<_> = loaded.train.iter().map(|p| p.label).collect();
        assert!(labels.iter().all(|l| l.is_some()));
    }

    #[test]
    fn classes_separable_by_radial_profile() {
        // Sanity oracle: a nearest-centroid rule over radial-distance
        // quantiles should recover labels on the simple kinds.
        let spec = DatasetSpec {
            kinds: vec![
                ShapeKind::Sphere,
                ShapeKind::Cube,
                ShapeKind::Cylinder,
                ShapeKind::Cone,
            ],
            per_class_train: 30,
            per_class_test: 20,
            n_points: 128,
            jitter: 0.06,
            seed: 9,
        };
        let ds = generate_dataset(&spec).unwrap();
        let descriptor = |pc: &PointCloud| -> Vec<f64> {
            let mut radii: Vec<f64> = pc.points.iter().map(norm).collect();
            radii.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (1..10)
                .map(|q| radii[(q * radii.len()) / 10])
                .collect()
        };
        let mut centroids = vec![vec![0.0; 9]; 4];
        let mut counts = vec![0usize; 4];
        for pc in &ds.train {
            let l = pc.label.unwrap();
            for (c, v) in centroids[l].iter_mut().zip(descriptor(pc)) {
                *c += v;
            }
            counts[l] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            for v in c.iter_mut() {
                *v /= *n as f64;
            }
        }
        let mut correct = 0;
        for pc in &ds.test {
            let d = descriptor(pc);
            let best = centroids
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&d).map(|(x, y)| (x - y).powi(2)).sum();
                    let db: f64 = b.iter().zip(&d).map(|(x, y)| (x - y).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap()
                .0;
            if best == pc.label.unwrap() {
                correct += 1;
            }
        }
        let acc = correct as f64 / ds.test.len() as f64;
        assert!(acc > 0.9, "nearest-centroid sanity accuracy {acc}");
    }
}
