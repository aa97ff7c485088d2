//! Point clouds, XYZ files, synthetic shape families and dataset
//! standardization.

use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::compute::Tensor;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: line {line}: {reason}")]
    Malformed {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("empty cloud")]
    EmptyCloud,
    #[error("non-finite coordinate in point {0}")]
    NonFinite(usize),
    #[error("degenerate axis {}: standard deviation is zero", axes_label(.0))]
    DegenerateAxis(Vec<char>),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("unknown shape kind {0:?} (expected sphere, box or torus)")]
    UnknownKind(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

fn axes_label(axes: &[char]) -> String {
    axes.iter().map(char::to_string).collect::<Vec<_>>().join(",")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> GeometryError + '_ {
    move |source| GeometryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// An unordered set of 3-D points. Storage order carries no meaning.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self, GeometryError> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud);
        }
        if let Some(i) = points.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(GeometryError::NonFinite(i));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// `N x 3` row-major tensor.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.points.iter().flat_map(|p| p.iter().copied()).collect();
        Tensor::matrix(self.points.len(), 3, data).expect("N x 3 layout")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self, GeometryError> {
        if t.cols() != 3 {
            return Err(GeometryError::InvalidArgument(format!(
                "expected N x 3 tensor, got {:?}",
                t.shape()
            )));
        }
        let points = t
            .data()
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect();
        Self::new(points)
    }

    /// Reorders points: output point `i` is input point `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        assert_eq!(perm.len(), self.points.len());
        Self {
            points: perm.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn translated(&self, by: [f64; 3]) -> Self {
        Self {
            points: self
                .points
                .iter()
                .map(|p| [p[0] + by[0], p[1] + by[1], p[2] + by[2]])
                .collect(),
        }
    }

    /// First `n` points (all when `n >= len`).
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            points: self.points[..n.min(self.points.len()).max(1)].to_vec(),
        }
    }

    pub fn mean(&self) -> [f64; 3] {
        let mut m = [0.0; 3];
        for p in &self.points {
            for a in 0..3 {
                m[a] += p[a];
            }
        }
        m.map(|v| v / self.points.len() as f64)
    }
}

/// Per-axis standardization statistics.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    pub fn identity() -> Self {
        Self {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn apply(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| std::array::from_fn(|a| (p[a] - self.mean[a]) / self.std[a]))
                .collect(),
        }
    }

    pub fn invert(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud {
            points: cloud
                .points
                .iter()
                .map(|p| std::array::from_fn(|a| p[a] * self.std[a] + self.mean[a]))
                .collect(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<(), GeometryError> {
        let text = format!(
            "mean {} {} {}\nstd {} {} {}\n",
            self.mean[0], self.mean[1], self.mean[2], self.std[0], self.std[1], self.std[2]
        );
        fs::write(path, text).map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, GeometryError> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let mut mean = None;
        let mut std = None;
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key = parts.next().unwrap_or_default();
            let vals = parse_triple(parts).map_err(|reason| GeometryError::Malformed {
                path: path.to_path_buf(),
                line: i + 1,
                reason,
            })?;
            match key {
                "mean" => mean = Some(vals),
                "std" => std = Some(vals),
                other => {
                    return Err(GeometryError::Malformed {
                        path: path.to_path_buf(),
                        line: i + 1,
                        reason: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        match (mean, std) {
            (Some(mean), Some(std)) if std.iter().all(|&s| s > 0.0) => Ok(Self { mean, std }),
            _ => Err(GeometryError::Malformed {
                path: path.to_path_buf(),
                line: 0,
                reason: "expected positive 'std' and a 'mean' line".into(),
            }),
        }
    }
}

/// Clouds with optional family labels and the standardization applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ShapeDataset {
    pub clouds: Vec<PointCloud>,
    pub labels: Option<Vec<String>>,
    pub norm: Option<NormStats>,
}

impl ShapeDataset {
    pub fn new(clouds: Vec<PointCloud>) -> Self {
        Self {
            clouds,
            labels: None,
            norm: None,
        }
    }

    pub fn with_labels(clouds: Vec<PointCloud>, labels: Vec<String>) -> Self {
        assert_eq!(clouds.len(), labels.len());
        Self {
            clouds,
            labels: Some(labels),
            norm: None,
        }
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn label(&self, i: usize) -> Option<&str> {
        self.labels.as_ref().map(|l| l[i].as_str())
    }
}

fn parse_triple<'a>(mut parts: impl Iterator<Item = &'a str>) -> Result<[f64; 3], String> {
    let mut out = [0.0; 3];
    for (a, slot) in out.iter_mut().enumerate() {
        let tok = parts
            .next()
            .ok_or_else(|| format!("expected 3 values, found {a}"))?;
        *slot = tok
            .parse::<f64>()
            .map_err(|_| format!("cannot parse {tok:?} as a number"))?;
        if !slot.is_finite() {
            return Err(format!("non-finite value {tok:?}"));
        }
    }
    if parts.next().is_some() {
        return Err("expected exactly 3 values".into());
    }
    Ok(out)
}

/// Reads an XYZ file: one `x y z` triple per line, `#` starts a comment
/// line, blank lines are skipped.
pub fn load_xyz(path: &Path) -> Result<PointCloud, GeometryError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_xyz(&text, path)
}

pub fn parse_xyz(text: &str, path: &Path) -> Result<PointCloud, GeometryError> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let p = parse_triple(line.split_whitespace()).map_err(|reason| GeometryError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        })?;
        points.push(p);
    }
    PointCloud::new(points)
}

/// Formats a cloud as XYZ text using the shortest exact decimal form of
/// each coordinate, so parsing it back reproduces the values bit for bit.
pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::with_capacity(cloud.len() * 48);
    for (i, p) in cloud.points.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        out.push_str(&format!("{} {} {}", p[0], p[1], p[2]));
    }
    out.push('\n');
    out
}

pub fn save_xyz(cloud: &PointCloud, path: &Path) -> Result<(), GeometryError> {
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(format_xyz(cloud).as_bytes()).map_err(io_err(path))
}

/// Synthetic shape families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ShapeKind {
    Sphere,
    Box,
    Torus,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Sphere, ShapeKind::Box, ShapeKind::Torus];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Box => "box",
            ShapeKind::Torus => "torus",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = GeometryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "sphere" => Ok(ShapeKind::Sphere),
            "box" => Ok(ShapeKind::Box),
            "torus" => Ok(ShapeKind::Torus),
            other => Err(GeometryError::UnknownKind(other.to_string())),
        }
    }
}

/// Torus radii (ring radius, tube radius).
pub const TORUS_RADII: (f64, f64) = (1.0, 0.35);

/// Samples `n` points uniformly on the surface of a unit-scale primitive
/// (unit sphere, cube `[-1, 1]^3`, torus with radii [`TORUS_RADII`]) and adds
/// isotropic Gaussian jitter. Deterministic in `seed`.
pub fn synth_shape(kind: ShapeKind, n: usize, jitter: f64, seed: u64) -> Result<PointCloud, GeometryError> {
    if n == 0 {
        return Err(GeometryError::InvalidArgument("n must be at least 1".into()));
    }
    if !(jitter >= 0.0 && jitter.is_finite()) {
        return Err(GeometryError::InvalidArgument(format!("jitter must be >= 0, got {jitter}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(n);
    for _ in 0..n {
        let mut p = match kind {
            ShapeKind::Sphere => sample_sphere(&mut rng),
            ShapeKind::Box => sample_cube(&mut rng),
            ShapeKind::Torus => sample_torus(&mut rng, TORUS_RADII.0, TORUS_RADII.1),
        };
        if jitter > 0.0 {
            for c in &mut p {
                let e: f64 = rng.sample(StandardNormal);
                *c += jitter * e;
            }
        }
        points.push(p);
    }
    PointCloud::new(points)
}

fn sample_sphere(rng: &mut impl Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = std::array::from_fn(|_| rng.sample(StandardNormal));
        let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if norm > 1e-12 {
            return v.map(|c| c / norm);
        }
    }
}

fn sample_cube(rng: &mut impl Rng) -> [f64; 3] {
    // All six faces have equal area.
    let face = rng.random_range(0..6usize);
    let axis = face / 2;
    let sign = if face % 2 == 0 { -1.0 } else { 1.0 };
    let mut p = [0.0; 3];
    for (a, c) in p.iter_mut().enumerate() {
        *c = if a == axis {
            sign
        } else {
            rng.random_range(-1.0..=1.0)
        };
    }
    p
}

fn sample_torus(rng: &mut impl Rng, ring: f64, tube: f64) -> [f64; 3] {
    // The area element is proportional to ring + tube * cos(v); rejection
    // sampling on v makes the surface density uniform.
    loop {
        let u = rng.random_range(0.0..std::f64::consts::TAU);
        let v = rng.random_range(0.0..std::f64::consts::TAU);
        let w = rng.random_range(0.0..1.0);
        if w <= (ring + tube * v.cos()) / (ring + tube) {
            let r = ring + tube * v.cos();
            return [r * u.cos(), r * u.sin(), tube * v.sin()];
        }
    }
}

/// Pooled per-axis mean and (population) std over every point of every
/// cloud, then applies them.
pub fn standardize(ds: &ShapeDataset) -> Result<(ShapeDataset, NormStats), GeometryError> {
    let stats = pooled_stats(ds)?;
    let clouds = ds.clouds.iter().map(|c| stats.apply(c)).collect();
    Ok((
        ShapeDataset {
            clouds,
            labels: ds.labels.clone(),
            norm: Some(stats),
        },
        stats,
    ))
}

pub fn pooled_stats(ds: &ShapeDataset) -> Result<NormStats, GeometryError> {
    if ds.clouds.is_empty() {
        return Err(GeometryError::EmptyDataset);
    }
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for c in &ds.clouds {
        for p in c.points() {
            for a in 0..3 {
                sum[a] += p[a];
            }
        }
        count += c.len();
    }
    let mean = sum.map(|s| s / count as f64);
    let mut ss = [0.0; 3];
    for c in &ds.clouds {
        for p in c.points() {
            for a in 0..3 {
                let d = p[a] - mean[a];
                ss[a] += d * d;
            }
        }
    }
    let std = ss.map(|s| (s / count as f64).sqrt());
    let degenerate: Vec<char> = (0..3)
        .filter(|&a| !(std[a] > 1e-12 * mean[a].abs().max(1.0)))
        .map(|a| ['x', 'y', 'z'][a])
        .collect();
    if !degenerate.is_empty() {
        return Err(GeometryError::DegenerateAxis(degenerate));
    }
    Ok(NormStats { mean, std })
}

pub const NORM_STATS_FILE: &str = "norm_stats.txt";

/// Writes `<root>/<family>/<id>.xyz` for every cloud (family from the
/// label, `shape` when unlabeled) plus the stats file when present.
pub fn save_dataset(ds: &ShapeDataset, root: &Path) -> Result<Vec<PathBuf>, GeometryError> {
    let mut counters: std::collections::BTreeMap<String, usize> = Default::default();
    let mut written = Vec::with_capacity(ds.len());
    for (i, cloud) in ds.clouds.iter().enumerate() {
        let family = ds.label(i).unwrap_or("shape").to_string();
        let dir = root.join(&family);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let id = counters.entry(family).or_default();
        let path = dir.join(format!("{:04}.xyz", *id));
        *id += 1;
        save_xyz(cloud, &path)?;
        written.push(path);
    }
    if let Some(stats) = &ds.norm {
        fs::create_dir_all(root).map_err(io_err(root))?;
        stats.save(&root.join(NORM_STATS_FILE))?;
    }
    Ok(written)
}

/// Lists `<root>/<family>/*.xyz` sorted by family then file name.
pub fn list_dataset(root: &Path) -> Result<Vec<(String, PathBuf)>, GeometryError> {
    let mut families: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    families.sort();
    let mut out = Vec::new();
    for dir in families {
        let family = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(io_err(&dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "xyz"))
            .collect();
        files.sort();
        out.extend(files.into_iter().map(|f| (family.clone(), f)));
    }
    Ok(out)
}

pub fn load_dataset(root: &Path) -> Result<ShapeDataset, GeometryError> {
    let files = list_dataset(root)?;
    if files.is_empty() {
        return Err(GeometryError::EmptyDataset);
    }
    let mut clouds = Vec::with_capacity(files.len());
    let mut labels = Vec::with_capacity(files.len());
    for (family, path) in files {
        clouds.push(load_xyz(&path)?);
        labels.push(family);
    }
    let stats_path = root.join(NORM_STATS_FILE);
    let norm = if stats_path.exists() {
        Some(NormStats::load(&stats_path)?)
    } else {
        None
    };
    Ok(ShapeDataset {
        clouds,
        labels: Some(labels),
        norm,
    })
}

/// Loads every `*.xyz` directly inside `dir` (sorted by name).
pub fn load_flat_dir(dir: &Path) -> Result<Vec<(PathBuf, PointCloud)>, GeometryError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(io_err(dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && p.extension().is_some_and(|x| x == "xyz"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| load_xyz(&p).map(|c| (p, c)))
        .collect()
}
