//! Point-set distances (Chamfer, exact EMD) and the set-level generative
//! metrics MMD, COV, 1-NNA and voxel JSD.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::PointCloud;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("empty {0} set")]
    EmptySet(&'static str),
    #[error("EMD needs equal sizes, got {left} and {right} points")]
    EmdSize { left: usize, right: usize },
    #[error("EMD needs equal cloud sizes: {set} cloud {index} has {found} points, expected {expected}")]
    UnequalClouds {
        set: &'static str,
        index: usize,
        found: usize,
        expected: usize,
    },
    #[error("1-NNA needs equal set sizes of at least 2, got {gen} and {reference}")]
    NnaSizes { gen: usize, reference: usize },
    #[error("no points to voxelize")]
    NoPoints,
    #[error("invalid voxel grid: {0}")]
    InvalidGrid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Cd,
    Emd,
}

impl DistanceKind {
    pub fn distance(self, a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
        match self {
            DistanceKind::Cd => chamfer(a, b),
            DistanceKind::Emd => emd(a, b),
        }
    }
}

fn sq_dist(p: &[f64; 3], q: &[f64; 3]) -> f64 {
    let dx = p[0] - q[0];
    let dy = p[1] - q[1];
    let dz = p[2] - q[2];
    dx * dx + dy * dy + dz * dz
}

fn mean_nearest(a: &[[f64; 3]], b: &[[f64; 3]]) -> f64 {
    let s: f64 = a
        .iter()
        .map(|p| b.iter().map(|q| sq_dist(p, q)).fold(f64::INFINITY, f64::min))
        .sum();
    s / a.len() as f64
}

/// Symmetrized mean nearest-neighbour squared distance.
pub fn chamfer(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    Ok(mean_nearest(a.points(), b.points()) + mean_nearest(b.points(), a.points()))
}

/// Minimum-cost perfect matching of a square cost matrix (row-major),
/// by shortest augmenting paths with dual potentials. Returns the column
/// assigned to each row.
pub fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(cost.len(), n * n, "cost matrix must be n x n");
    let inf = f64::INFINITY;
    // 1-based; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &cost[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![0; n];
    for j in 1..=n {
        rows[owner[j] - 1] = j - 1;
    }
    rows
}

/// Mean Euclidean distance under the optimal bijection.
pub fn emd(a: &PointCloud, b: &PointCloud) -> Result<f64, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    if a.len() != b.len() {
        return Err(MetricsError::EmdSize {
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len();
    let cost: Vec<f64> = a
        .points()
        .iter()
        .flat_map(|p| b.points().iter().map(move |q| sq_dist(p, q).sqrt()))
        .collect();
    let perm = assignment(&cost, n);
    Ok(perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum::<f64>() / n as f64)
}

/// Dense `rows x cols` distance matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct DistanceMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
    pub kind: DistanceKind,
}

impl DistanceMatrix {
    pub fn between(a: &[PointCloud], b: &[PointCloud], kind: DistanceKind) -> Result<Self, MetricsError> {
        let mut data = Vec::with_capacity(a.len() * b.len());
        for x in a {
            for y in b {
                data.push(kind.distance(x, y)?);
            }
        }
        Ok(Self {
            rows: a.len(),
            cols: b.len(),
            data,
            kind,
        })
    }

    /// Symmetric matrix of a set against itself; each pair is computed once.
    pub fn within(a: &[PointCloud], kind: DistanceKind) -> Result<Self, MetricsError> {
        let n = a.len();
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let d = kind.distance(&a[i], &a[j])?;
                data[i * n + j] = d;
                data[j * n + i] = d;
            }
        }
        Ok(Self {
            rows: n,
            cols: n,
            data,
            kind,
        })
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }
}

fn nonempty(gen: &[PointCloud], reference: &[PointCloud]) -> Result<(), MetricsError> {
    if gen.is_empty() {
        return Err(MetricsError::EmptySet("generated"));
    }
    if reference.is_empty() {
        return Err(MetricsError::EmptySet("reference"));
    }
    Ok(())
}

/// Mean over reference clouds of the distance to their nearest generated
/// cloud, from a `gen x ref` matrix.
pub fn mmd_from(cross: &DistanceMatrix) -> f64 {
    let s: f64 = (0..cross.cols)
        .map(|r| (0..cross.rows).map(|g| cross.at(g, r)).fold(f64::INFINITY, f64::min))
        .sum();
    s / cross.cols as f64
}

/// Percentage of reference clouds that are the nearest reference of some
/// generated cloud (first index on ties).
pub fn cov_from(cross: &DistanceMatrix) -> f64 {
    let mut hit = vec![false; cross.cols];
    for g in 0..cross.rows {
        let mut best = 0;
        for r in 1..cross.cols {
            if cross.at(g, r) < cross.at(g, best) {
                best = r;
            }
        }
        hit[best] = true;
    }
    100.0 * hit.iter().filter(|&&h| h).count() as f64 / cross.cols as f64
}

/// Leave-one-out 1-NN accuracy over the union, in percent. A sample whose
/// nearest distances to both sets tie, or whose nearest cross-set match is
/// at distance zero, is indistinguishable and scores one half.
pub fn one_nna_from(gg: &DistanceMatrix, rr: &DistanceMatrix, cross: &DistanceMatrix) -> f64 {
    let nearest = |n: usize, skip: usize, d: &dyn Fn(usize) -> f64| {
        (0..n).filter(|&k| k != skip).map(d).fold(f64::INFINITY, f64::min)
    };
    let score = |same: f64, other: f64| {
        if other == 0.0 || same == other {
            0.5
        } else if same < other {
            1.0
        } else {
            0.0
        }
    };
    let (ng, nr) = (gg.rows, rr.rows);
    let mut correct = 0.0;
    for i in 0..ng {
        let same = nearest(ng, i, &|k| gg.at(i, k));
        let other = nearest(nr, usize::MAX, &|k| cross.at(i, k));
        correct += score(same, other);
    }
    for j in 0..nr {
        let same = nearest(nr, j, &|k| rr.at(j, k));
        let other = nearest(ng, usize::MAX, &|k| cross.at(k, j));
        correct += score(same, other);
    }
    100.0 * correct / (ng + nr) as f64
}

pub fn mmd(gen: &[PointCloud], reference: &[PointCloud], kind: DistanceKind) -> Result<f64, MetricsError> {
    nonempty(gen, reference)?;
    Ok(mmd_from(&DistanceMatrix::between(gen, reference, kind)?))
}

pub fn cov(gen: &[PointCloud], reference: &[PointCloud], kind: DistanceKind) -> Result<f64, MetricsError> {
    nonempty(gen, reference)?;
    Ok(cov_from(&DistanceMatrix::between(gen, reference, kind)?))
}

fn nna_sizes(gen: &[PointCloud], reference: &[PointCloud]) -> Result<(), MetricsError> {
    if gen.len() != reference.len() || gen.len() < 2 {
        return Err(MetricsError::NnaSizes {
            gen: gen.len(),
            reference: reference.len(),
        });
    }
    Ok(())
}

pub fn one_nna(gen: &[PointCloud], reference: &[PointCloud], kind: DistanceKind) -> Result<f64, MetricsError> {
    nna_sizes(gen, reference)?;
    Ok(one_nna_from(
        &DistanceMatrix::within(gen, kind)?,
        &DistanceMatrix::within(reference, kind)?,
        &DistanceMatrix::between(gen, reference, kind)?,
    ))
}

/// Cubic voxel grid `[-bound, bound]^3` with `resolution` cells per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    pub resolution: usize,
    pub bound: f64,
}

impl Default for VoxelGrid {
    fn default() -> Self {
        Self {
            resolution: 28,
            bound: 3.0,
        }
    }
}

impl VoxelGrid {
    fn validate(&self) -> Result<(), MetricsError> {
        if self.resolution == 0 {
            return Err(MetricsError::InvalidGrid("resolution must be positive".into()));
        }
        if !(self.bound > 0.0 && self.bound.is_finite()) {
            return Err(MetricsError::InvalidGrid("bound must be positive".into()));
        }
        Ok(())
    }

    /// Cell of one coordinate, clamped to the boundary cells; the flag is
    /// set when clamping was needed.
    fn cell(&self, x: f64) -> (usize, bool) {
        let r = self.resolution;
        let f = (x + self.bound) / (2.0 * self.bound) * r as f64;
        if f < 0.0 || x < -self.bound {
            (0, true)
        } else if x > self.bound {
            (r - 1, true)
        } else {
            ((f as usize).min(r - 1), false)
        }
    }

    /// Occupancy counts of all points, plus the number of out-of-bounds points.
    pub fn histogram(&self, clouds: &[PointCloud]) -> (Vec<f64>, usize) {
        let r = self.resolution;
        let mut counts = vec![0.0; r * r * r];
        let mut clipped = 0;
        for c in clouds {
            for p in c.points() {
                let (i, a) = self.cell(p[0]);
                let (j, b) = self.cell(p[1]);
                let (k, d) = self.cell(p[2]);
                if a || b || d {
                    clipped += 1;
                }
                counts[(i * r + j) * r + k] += 1.0;
            }
        }
        (counts, clipped)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JsdResult {
    pub value: f64,
    /// Points outside the grid bounds, counted over both sets.
    pub clipped: usize,
}

fn kl_to_mixture(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / (0.5 * (a + b))).ln())
        .sum()
}

/// Jensen-Shannon divergence (nats) between the pooled voxel occupancy
/// distributions of two sets.
pub fn jsd(gen: &[PointCloud], reference: &[PointCloud], grid: &VoxelGrid) -> Result<JsdResult, MetricsError> {
    grid.validate()?;
    let (cg, kg) = grid.histogram(gen);
    let (cr, kr) = grid.histogram(reference);
    let (sg, sr): (f64, f64) = (cg.iter().sum(), cr.iter().sum());
    if sg == 0.0 || sr == 0.0 {
        return Err(MetricsError::NoPoints);
    }
    let pg: Vec<f64> = cg.iter().map(|c| c / sg).collect();
    let pr: Vec<f64> = cr.iter().map(|c| c / sr).collect();
    let value = 0.5 * kl_to_mixture(&pg, &pr) + 0.5 * kl_to_mixture(&pr, &pg);
    Ok(JsdResult {
        value: value.clamp(0.0, std::f64::consts::LN_2),
        clipped: kg + kr,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOptions {
    pub grid: VoxelGrid,
    /// Also compute the EMD-based metrics (cubic in the cloud size).
    pub emd: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            grid: VoxelGrid::default(),
            emd: true,
        }
    }
}

/// MMD, COV and 1-NNA for one distance kind.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KindScores {
    pub kind: DistanceKind,
    pub mmd: f64,
    pub cov: f64,
    /// `None` when the sets differ in size.
    pub nna: Option<f64>,
}

fn kind_scores(gen: &[PointCloud], reference: &[PointCloud], kind: DistanceKind) -> Result<KindScores, MetricsError> {
    let cross = DistanceMatrix::between(gen, reference, kind)?;
    let nna = if nna_sizes(gen, reference).is_ok() {
        Some(one_nna_from(
            &DistanceMatrix::within(gen, kind)?,
            &DistanceMatrix::within(reference, kind)?,
            &cross,
        ))
    } else {
        None
    };
    Ok(KindScores {
        kind,
        mmd: mmd_from(&cross),
        cov: cov_from(&cross),
        nna,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub n_gen: usize,
    pub n_ref: usize,
    pub jsd_grid: usize,
    pub jsd_bound: f64,
    pub jsd_clipped_points: usize,
    pub cd: String,
    pub emd: String,
    pub scaling: String,
}

/// Values as commonly tabulated: CD x 1e3, EMD x 1e2, JSD x 1e2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaledScores {
    pub mmd_cd: f64,
    pub mmd_emd: Option<f64>,
    pub cov_cd: f64,
    pub cov_emd: Option<f64>,
    pub nna_cd: Option<f64>,
    pub nna_emd: Option<f64>,
    pub jsd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mmd_cd: f64,
    pub mmd_emd: Option<f64>,
    pub cov_cd: f64,
    pub cov_emd: Option<f64>,
    pub nna_cd: Option<f64>,
    pub nna_emd: Option<f64>,
    pub jsd: f64,
    pub scaled: ScaledScores,
    pub meta: ReportMeta,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

fn check_equal_sizes(gen: &[PointCloud], reference: &[PointCloud]) -> Result<(), MetricsError> {
    let expected = gen[0].len();
    for (set, clouds) in [("generated", gen), ("reference", reference)] {
        if let Some(index) = clouds.iter().position(|c| c.len() != expected) {
            return Err(MetricsError::UnequalClouds {
                set,
                index,
                found: clouds[index].len(),
                expected,
            });
        }
    }
    Ok(())
}

/// Full battery. Each distance matrix is computed once per kind and shared
/// by MMD, COV and 1-NNA.
pub fn evaluate(gen: &[PointCloud], reference: &[PointCloud], opts: &EvalOptions) -> Result<MetricsReport, MetricsError> {
    nonempty(gen, reference)?;
    let cd = kind_scores(gen, reference, DistanceKind::Cd)?;
    let em = if opts.emd {
        check_equal_sizes(gen, reference)?;
        Some(kind_scores(gen, reference, DistanceKind::Emd)?)
    } else {
        None
    };
    let j = jsd(gen, reference, &opts.grid)?;
    let scaled = ScaledScores {
        mmd_cd: cd.mmd * 1e3,
        mmd_emd: em.as_ref().map(|e| e.mmd * 1e2),
        cov_cd: cd.cov,
        cov_emd: em.as_ref().map(|e| e.cov),
        nna_cd: cd.nna,
        nna_emd: em.as_ref().and_then(|e| e.nna),
        jsd: j.value * 1e2,
    };
    Ok(MetricsReport {
        mmd_cd: cd.mmd,
        mmd_emd: em.as_ref().map(|e| e.mmd),
        cov_cd: cd.cov,
        cov_emd: em.as_ref().map(|e| e.cov),
        nna_cd: cd.nna,
        nna_emd: em.as_ref().and_then(|e| e.nna),
        jsd: j.value,
        scaled,
        meta: ReportMeta {
            n_gen: gen.len(),
            n_ref: reference.len(),
            jsd_grid: opts.grid.resolution,
            jsd_bound: opts.grid.bound,
            jsd_clipped_points: j.clipped,
            cd: "mean squared nearest-neighbour distance, summed over both directions".into(),
            emd: "mean Euclidean distance under the optimal bijection".into(),
            scaling: "scaled: mmd_cd x1e3, mmd_emd x1e2, jsd x1e2; cov and nna in percent".into(),
        },
    })
}
