//! Evaluation metrics: Fitts index of difficulty, RMSE summaries, open-loop
//! interval statistics, phase-plane histograms and kernel density estimates,
//! and the k-nearest-neighbour Kullback–Leibler divergence estimator.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctrlmath::{lqr_gain, Matrix, Vector};
use crate::error::{Error, Result};
use crate::ident::FitResult;
use crate::io::{create_dir, fmt_f64, write_csv, write_text, write_trajectory_csv, Manifest};
use crate::kdtree::KdTree;
use crate::plant::design_model;
use crate::sim::Trajectory;

/// Open-loop intervals longer than this count towards the tail mass.
pub const OL_TAIL_THRESHOLD: f64 = 0.25;
pub const DEFAULT_OL_BIN: f64 = 0.01;
pub const DEFAULT_BINS: usize = 30;
/// Relative padding added around the data range of a grid.
pub const GRID_PAD: f64 = 0.05;
/// Distance used in place of a zero nearest-neighbour distance when every
/// neighbour coincides with the query.
const KNN_FLOOR: f64 = 1e-12;

/// Shannon formulation `log₂(D/W + 1)`, in bits.
pub fn fitts_id(distance: f64, width: f64) -> Result<f64> {
    if !(distance > 0.0 && width > 0.0 && distance.is_finite() && width.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "distance and width must be positive, got D = {distance}, W = {width}"
        )));
    }
    Ok((distance / width + 1.0).log2())
}

pub fn rmse(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "rmse",
            format!("{} vs {} samples", a.len(), b.len()),
        ));
    }
    if a.is_empty() {
        return Err(Error::InvalidParameter("RMSE of empty series".into()));
    }
    let ss: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((ss / a.len() as f64).sqrt())
}

/// Position and velocity RMSE between two aligned trajectories.
pub fn rmse_summary(sim: &Trajectory, data: &Trajectory) -> Result<(f64, f64)> {
    Ok((rmse(&sim.y, &data.y)?, rmse(&sim.v, &data.v)?))
}

/// Histogram and summary of the intervals between consecutive events.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OlStats {
    pub intervals: Vec<f64>,
    pub bin_width: f64,
    /// `counts[i]` covers `[i·bin_width, (i+1)·bin_width)`.
    pub counts: Vec<usize>,
    pub min: Option<f64>,
    pub median: Option<f64>,
    /// Fraction of intervals longer than [`OL_TAIL_THRESHOLD`].
    pub tail_mass: f64,
}

pub fn ol_intervals(events: &[f64]) -> Vec<f64> {
    events.windows(2).map(|p| p[1] - p[0]).collect()
}

/// Intervals are collected within each trajectory, never across runs.
pub fn ol_interval_stats(trajs: &[&Trajectory], bin_width: f64) -> Result<OlStats> {
    if !(bin_width > 0.0 && bin_width.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "bin width must be positive, got {bin_width}"
        )));
    }
    let mut intervals: Vec<f64> = trajs.iter().flat_map(|t| ol_intervals(&t.events)).collect();
    let mut counts = Vec::new();
    for &d in &intervals {
        let b = (d / bin_width + 1e-9).floor() as usize;
        if counts.len() <= b {
            counts.resize(b + 1, 0);
        }
        counts[b] += 1;
    }
    let tail = intervals.iter().filter(|&&d| d > OL_TAIL_THRESHOLD).count();
    let tail_mass = if intervals.is_empty() {
        0.0
    } else {
        tail as f64 / intervals.len() as f64
    };
    let mut sorted = intervals.clone();
    sorted.sort_by(f64::total_cmp);
    let median = match sorted.len() {
        0 => None,
        n if n % 2 == 1 => Some(sorted[n / 2]),
        n => Some(0.5 * (sorted[n / 2 - 1] + sorted[n / 2])),
    };
    let min = sorted.first().copied();
    intervals.shrink_to_fit();
    Ok(OlStats {
        intervals,
        bin_width,
        counts,
        min,
        median,
        tail_mass,
    })
}

/// Regular axis split into `n` equal cells.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Axis {
    pub fn width(&self) -> f64 {
        (self.max - self.min) / self.n as f64
    }

    pub fn center(&self, i: usize) -> f64 {
        self.min + (i as f64 + 0.5) * self.width()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n).map(|i| self.center(i)).collect()
    }

    /// Cell holding `x`; the upper edge belongs to the last cell.
    pub fn cell(&self, x: f64) -> Option<usize> {
        if !(x >= self.min && x <= self.max) {
            return None;
        }
        let i = ((x - self.min) / self.width()).floor() as usize;
        Some(i.min(self.n - 1))
    }

    /// Covers `[lo, hi]` widened by `pad·range + extra` on each side. A
    /// zero-width range is widened to unit half-width around the value.
    pub fn covering(lo: f64, hi: f64, n: usize, pad: f64, extra: f64) -> Self {
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        };
        let m = pad * (hi - lo) + extra;
        Self {
            min: lo - m,
            max: hi + m,
            n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    Counts,
    Density,
}

/// Values over a (position, velocity) grid, stored position-major:
/// `values[i * vel.n + j]` belongs to position cell `i`, velocity cell `j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub pos: Axis,
    pub vel: Axis,
    pub kind: GridKind,
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.vel.n + j]
    }

    pub fn total(&self) -> f64 {
        self.values.iter().sum()
    }

    /// Trapezoidal integral over the cell centres.
    pub fn integral(&self) -> f64 {
        let (nx, ny) = (self.pos.n, self.vel.n);
        let wt = |i: usize, n: usize| {
            if n > 1 && (i == 0 || i == n - 1) {
                0.5
            } else {
                1.0
            }
        };
        let mut s = 0.0;
        for i in 0..nx {
            for j in 0..ny {
                s += wt(i, nx) * wt(j, ny) * self.at(i, j);
            }
        }
        s * self.pos.width() * self.vel.width()
    }

    pub fn max(&self) -> f64 {
        self.values
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Flat `[y₀, v₀, y₁, v₁, …]` phase-plane samples of several trajectories.
pub fn phase_points(trajs: &[&Trajectory]) -> Vec<f64> {
    let mut out = Vec::with_capacity(trajs.iter().map(|t| 2 * t.len()).sum());
    for t in trajs {
        for (y, v) in t.y.iter().zip(&t.v) {
            out.push(*y);
            out.push(*v);
        }
    }
    out
}

fn extrema(points: &[f64], axis: usize) -> (f64, f64) {
    points
        .iter()
        .skip(axis)
        .step_by(2)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Phase-plane histogram over the padded data range.
pub fn histogram2d(trajs: &[&Trajectory], bins: usize) -> Result<DensityGrid> {
    histogram2d_points(&phase_points(trajs), bins)
}

pub fn histogram2d_points(points: &[f64], bins: usize) -> Result<DensityGrid> {
    if points.is_empty() || !points.len().is_multiple_of(2) {
        return Err(Error::InvalidParameter(
            "histogram needs a nonempty set of 2-D points".into(),
        ));
    }
    if bins == 0 {
        return Err(Error::InvalidParameter(
            "histogram needs at least one bin".into(),
        ));
    }
    let (x0, x1) = extrema(points, 0);
    let (y0, y1) = extrema(points, 1);
    let pos = Axis::covering(x0, x1, bins, GRID_PAD, 0.0);
    let vel = Axis::covering(y0, y1, bins, GRID_PAD, 0.0);
    let mut values = vec![0.0; bins * bins];
    for p in points.chunks(2) {
        if let (Some(i), Some(j)) = (pos.cell(p[0]), vel.cell(p[1])) {
            values[i * bins + j] += 1.0;
        }
    }
    Ok(DensityGrid {
        pos,
        vel,
        kind: GridKind::Counts,
        values,
    })
}

fn mean_std(points: &[f64], axis: usize) -> (f64, f64) {
    let n = (points.len() / 2) as f64;
    let mean = points.iter().skip(axis).step_by(2).sum::<f64>() / n;
    let var = points
        .iter()
        .skip(axis)
        .step_by(2)
        .map(|v| (v - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Per-axis Scott bandwidth `σ n^{−1/6}` for 2-D data.
pub fn scott_bandwidth(points: &[f64]) -> Result<(f64, f64)> {
    let n = points.len() / 2;
    if n < 2 {
        return Err(Error::InvalidParameter(
            "bandwidth needs at least two samples".into(),
        ));
    }
    let f = (n as f64).powf(-1.0 / 6.0);
    let (_, sx) = mean_std(points, 0);
    let (_, sy) = mean_std(points, 1);
    if sx <= 0.0 || sy <= 0.0 {
        return Err(Error::InvalidParameter(
            "a phase-plane axis has zero variance; pass an explicit bandwidth".into(),
        ));
    }
    Ok((sx * f, sy * f))
}

/// Grid for a KDE: data range padded by 5% plus three bandwidths so the
/// kernel tails fall inside.
pub fn kde_grid(points: &[f64], bins: usize, bandwidth: (f64, f64)) -> (Axis, Axis) {
    let (x0, x1) = extrema(points, 0);
    let (y0, y1) = extrema(points, 1);
    (
        Axis::covering(x0, x1, bins, GRID_PAD, 3.0 * bandwidth.0),
        Axis::covering(y0, y1, bins, GRID_PAD, 3.0 * bandwidth.1),
    )
}

/// Gaussian product-kernel density estimate evaluated at the cell centres of
/// `grid` (or of [`kde_grid`] with `bins` cells per axis when `grid` is `None`).
pub fn kde2d(
    points: &[f64],
    grid: Option<(Axis, Axis)>,
    bins: usize,
    bandwidth: Option<(f64, f64)>,
) -> Result<DensityGrid> {
    if points.len() < 4 || !points.len().is_multiple_of(2) {
        return Err(Error::InvalidParameter(
            "KDE needs at least two 2-D samples".into(),
        ));
    }
    let h = match bandwidth {
        Some((hx, hy)) if hx > 0.0 && hy > 0.0 => (hx, hy),
        Some(b) => {
            return Err(Error::InvalidParameter(format!(
                "bandwidth must be positive, got {b:?}"
            )))
        }
        None => scott_bandwidth(points)?,
    };
    let (pos, vel) = grid.unwrap_or_else(|| kde_grid(points, bins, h));
    let n = points.len() / 2;
    let kernel = |axis: &Axis, coord: usize, bw: f64| -> Vec<f64> {
        let norm = 1.0 / (bw * (2.0 * std::f64::consts::PI).sqrt());
        let mut k = Vec::with_capacity(axis.n * n);
        for i in 0..axis.n {
            let c = axis.center(i);
            k.extend(points.iter().skip(coord).step_by(2).map(|&x| {
                let z = (c - x) / bw;
                norm * (-0.5 * z * z).exp()
            }));
        }
        k
    };
    let kx = kernel(&pos, 0, h.0);
    let ky = kernel(&vel, 1, h.1);
    let mut values = vec![0.0; pos.n * vel.n];
    for i in 0..pos.n {
        let rx = &kx[i * n..(i + 1) * n];
        for j in 0..vel.n {
            let ry = &ky[j * n..(j + 1) * n];
            values[i * vel.n + j] = rx.iter().zip(ry).map(|(a, b)| a * b).sum::<f64>() / n as f64;
        }
    }
    Ok(DensityGrid {
        pos,
        vel,
        kind: GridKind::Density,
        values,
    })
}

/// Result of the k-NN divergence estimator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlEstimate {
    /// Estimator output, possibly slightly negative.
    pub raw: f64,
    /// `max(raw, 0)` for headline tables.
    pub value: f64,
    pub clamped: bool,
    /// Number of samples that had coincident neighbours which were skipped.
    pub duplicates: usize,
    /// Some sample had no neighbour at nonzero distance; the floor distance was used.
    pub degenerate: bool,
}

fn bit_key(p: &[f64]) -> Vec<u64> {
    p.iter().map(|v| v.to_bits()).collect()
}

/// k-NN estimate of `D(P‖Q)` in nats from flat samples of dimension `dim`:
/// `(d/n) Σ log(ν_k/ρ_k) + log(m/(n−1))`, with `ρ_k` the distance to the
/// k-th neighbour within P and `ν_k` to the k-th neighbour in Q. Coincident
/// points are skipped when searching neighbours and counted in `duplicates`.
pub fn kl_divergence(p: &[f64], q: &[f64], dim: usize, k: usize) -> Result<KlEstimate> {
    if dim == 0 || !p.len().is_multiple_of(dim) || !q.len().is_multiple_of(dim) {
        return Err(Error::dim(
            "kl_divergence",
            format!("buffers are not multiples of dimension {dim}"),
        ));
    }
    let n = p.len() / dim;
    let m = q.len() / dim;
    if k == 0 || n < k + 1 || m < k + 1 {
        return Err(Error::InvalidParameter(format!(
            "k-NN divergence needs more than k = {k} samples per set (have {n} and {m})"
        )));
    }
    if p.iter().chain(q).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("divergence samples"));
    }
    let tp = KdTree::new(p, dim);
    let tq = KdTree::new(q, dim);
    let terms: Vec<(f64, bool)> = p
        .par_chunks(dim)
        .map(|x| {
            let rho = tp.kth_distance(x, k);
            let nu = tq.kth_distance(x, k);
            let degenerate = rho.is_none() || nu.is_none();
            let rho = rho.unwrap_or(KNN_FLOOR).max(KNN_FLOOR);
            let nu = nu.unwrap_or(KNN_FLOOR).max(KNN_FLOOR);
            ((nu / rho).ln(), degenerate)
        })
        .collect();
    let sum: f64 = terms.iter().map(|t| t.0).sum();
    let degenerate = terms.iter().any(|t| t.1);
    let raw = dim as f64 / n as f64 * sum + (m as f64 / (n as f64 - 1.0)).ln();

    let mut seen = HashSet::with_capacity(n);
    let mut dup_p = HashSet::new();
    for x in p.chunks(dim) {
        let key = bit_key(x);
        if !seen.insert(key.clone()) {
            dup_p.insert(key);
        }
    }
    let in_q: HashSet<Vec<u64>> = q.chunks(dim).map(bit_key).collect();
    let duplicates = p
        .chunks(dim)
        .filter(|x| {
            let key = bit_key(x);
            dup_p.contains(&key) || in_q.contains(&key)
        })
        .count();

    Ok(KlEstimate {
        raw,
        value: raw.max(0.0),
        clamped: raw < 0.0,
        duplicates,
        degenerate,
    })
}

/// Per-axis affine map to zero mean and unit variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: [f64; 2],
    pub scale: [f64; 2],
}

impl Standardizer {
    /// Fitted on a 2-D cloud; an axis without spread keeps unit scale.
    pub fn fit(points: &[f64]) -> Self {
        let (mx, sx) = mean_std(points, 0);
        let (my, sy) = mean_std(points, 1);
        let s = |v: f64| if v > 0.0 && v.is_finite() { v } else { 1.0 };
        Self {
            mean: [mx, my],
            scale: [s(sx), s(sy)],
        }
    }

    pub fn apply(&self, points: &[f64]) -> Vec<f64> {
        points
            .chunks(2)
            .flat_map(|p| {
                [
                    (p[0] - self.mean[0]) / self.scale[0],
                    (p[1] - self.mean[1]) / self.scale[1],
                ]
            })
            .collect()
    }
}

/// Divergence of a simulated phase plane from the experimental one, both
/// standardized with the experimental cloud's statistics; k = 1.
pub fn kl_phase_plane(sim: &[&Trajectory], data: &[&Trajectory]) -> Result<KlEstimate> {
    let pd = phase_points(data);
    let ps = phase_points(sim);
    if pd.len() < 4 {
        return Err(Error::InvalidParameter(
            "experimental phase plane has fewer than two samples".into(),
        ));
    }
    let z = Standardizer::fit(&pd);
    kl_divergence(&z.apply(&pd), &z.apply(&ps), 2, 1)
}

/// Divergences of one condition: every ensemble run and the baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    pub participant: String,
    pub id_nominal: u8,
    pub distance_mm: f64,
    pub ic_kl_mean: f64,
    pub ic_kl_per_run: Vec<f64>,
    pub ic_kl_raw_per_run: Vec<f64>,
    pub baseline_kl: Option<f64>,
    pub baseline_kl_raw: Option<f64>,
    /// Human-readable notes on clamping or degenerate samples.
    pub flags: Vec<String>,
}

/// Identifies the condition a report belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionKey {
    pub participant: String,
    pub id_nominal: u8,
    pub distance_mm: f64,
}

pub fn kl_pipeline(
    ensemble: &[Trajectory],
    data: &[&Trajectory],
    baseline: Option<&Trajectory>,
    key: &ConditionKey,
) -> Result<KlReport> {
    if ensemble.is_empty() {
        return Err(Error::InvalidParameter(
            "KL pipeline needs at least one simulated run".into(),
        ));
    }
    let per_run: Vec<KlEstimate> = ensemble
        .par_iter()
        .map(|t| kl_phase_plane(&[t], data))
        .collect::<Result<_>>()?;
    let base = baseline.map(|b| kl_phase_plane(&[b], data)).transpose()?;
    let mut flags = Vec::new();
    let clamped = per_run.iter().filter(|e| e.clamped).count();
    if clamped > 0 {
        flags.push(format!("{clamped} negative run estimates clamped to 0"));
    }
    if per_run.iter().any(|e| e.degenerate) || base.is_some_and(|b| b.degenerate) {
        flags.push("degenerate neighbour distances replaced by floor".into());
    }
    let dups: usize = per_run.iter().map(|e| e.duplicates).sum();
    if dups > 0 {
        flags.push(format!("{dups} samples with coincident neighbours skipped"));
    }
    if base.is_some_and(|b| b.clamped) {
        flags.push("negative baseline estimate clamped to 0".into());
    }
    let values: Vec<f64> = per_run.iter().map(|e| e.value).collect();
    Ok(KlReport {
        participant: key.participant.clone(),
        id_nominal: key.id_nominal,
        distance_mm: key.distance_mm,
        ic_kl_mean: values.iter().sum::<f64>() / values.len() as f64,
        ic_kl_per_run: values,
        ic_kl_raw_per_run: per_run.iter().map(|e| e.raw).collect(),
        baseline_kl: base.map(|b| b.value),
        baseline_kl_raw: base.map(|b| b.raw),
        flags,
    })
}

/// One `{IC, 2ol}` pair of a divergence table cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KlCell {
    pub ic: f64,
    #[serde(rename = "2ol")]
    pub two_ol: Option<f64>,
}

/// Participant × condition table of divergences, keyed `"ID<n>"`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct KlTable {
    pub rows: BTreeMap<String, BTreeMap<String, KlCell>>,
}

impl KlTable {
    pub fn from_reports(reports: &[KlReport]) -> Self {
        let mut t = Self::default();
        for r in reports {
            t.rows.entry(r.participant.clone()).or_default().insert(
                format!("ID{}", r.id_nominal),
                KlCell {
                    ic: r.ic_kl_mean,
                    two_ol: r.baseline_kl,
                },
            );
        }
        t
    }

    pub fn get(&self, participant: &str, id: u8) -> Option<KlCell> {
        self.rows.get(participant)?.get(&format!("ID{id}")).copied()
    }
}

/// Index at which the pointer lands after the first movement that follows
/// sample `from`: the first sample after the speed peak where speed drops
/// below 5% of that peak or the velocity reverses (end of the primary
/// submovement on an overshoot).
pub fn landing_index(traj: &Trajectory, from: usize, to: usize) -> Option<usize> {
    let to = to.min(traj.len());
    if from >= to {
        return None;
    }
    let (peak_i, peak) = traj.v[from..to]
        .iter()
        .enumerate()
        .map(|(i, v)| (i + from, v.abs()))
        .fold((from, 0.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if peak <= 0.0 {
        return None;
    }
    let dir = traj.v[peak_i].signum();
    (peak_i..to).find(|&i| traj.v[i].abs() < 0.05 * peak || traj.v[i] * dir < 0.0)
}

/// Landing position of every movement that starts at a target change.
pub fn landing_positions(traj: &Trajectory, change_steps: &[usize]) -> Vec<f64> {
    change_steps
        .iter()
        .enumerate()
        .filter_map(|(i, &c)| {
            let end = change_steps.get(i + 1).copied().unwrap_or(traj.len());
            landing_index(traj, c, end).map(|k| traj.y[k])
        })
        .collect()
}

/// Unbiased sample variance; zero for fewer than two values or identical values.
pub fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    // Pairwise form: exactly zero when all values are bit-identical.
    let mut s = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = xs[i] - xs[j];
            s += d * d;
        }
    }
    s / (n as f64 * (n as f64 - 1.0))
}

/// A fitted slice together with the condition it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitRecord {
    pub participant: String,
    pub id_nominal: u8,
    pub distance_mm: f64,
    pub fit: FitResult,
}

/// One row of the parameter matrix: the LQR gain of the fitted weights,
/// the trigger threshold and the mismatch gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub k: [f64; 4],
    pub q: f64,
    pub a_p: f64,
    pub participant: String,
    pub id_nominal: u8,
    pub distance_mm: f64,
}

pub const PARAM_MATRIX_HEADER: [&str; 9] =
    ["k1", "k2", "k3", "k4", "q", "A_p", "participant", "ID", "D"];

pub fn param_row(rec: &FitRecord, nms_time_constant: f64) -> Result<ParamRow> {
    let p = &rec.fit.params;
    let model = design_model(nms_time_constant)?;
    let qc = Matrix::from_diagonal(&Vector::from_row_slice(&p.qc));
    let gain = lqr_gain(&model, &qc, &Matrix::from_element(1, 1, p.rc))?.k;
    Ok(ParamRow {
        k: [gain[(0, 0)], gain[(0, 1)], gain[(0, 2)], gain[(0, 3)]],
        q: p.q,
        a_p: p.mismatch_gain(),
        participant: rec.participant.clone(),
        id_nominal: rec.id_nominal,
        distance_mm: rec.distance_mm,
    })
}

pub fn write_param_matrix(path: &Path, rows: &[ParamRow]) -> Result<()> {
    write_csv(
        path,
        &PARAM_MATRIX_HEADER,
        rows.iter().map(|r| {
            let mut v: Vec<String> = r.k.iter().map(|&x| fmt_f64(x)).collect();
            v.push(fmt_f64(r.q));
            v.push(fmt_f64(r.a_p));
            v.push(r.participant.clone());
            v.push(r.id_nominal.to_string());
            v.push(fmt_f64(r.distance_mm));
            v
        }),
    )
}

/// Inputs of [`export_report`].
#[derive(Debug, Clone, Copy, Default)]
pub struct ExportBundle<'a> {
    pub fits: &'a [FitRecord],
    pub trajectories: &'a [(String, Trajectory)],
    pub reports: &'a [KlReport],
    pub nms_time_constant: f64,
}

/// Writes per-condition summaries, the divergence table, trajectory CSVs,
/// the parameter matrix and finally the manifest listing them. Returns the
/// written paths, manifest last.
pub fn export_report(
    bundle: &ExportBundle,
    out_dir: &Path,
    mut manifest: Manifest,
) -> Result<Vec<PathBuf>> {
    create_dir(out_dir)?;
    let mut written = Vec::new();
    for r in bundle.reports {
        let name = format!(
            "summary_{}_ID{}_D{}.json",
            r.participant, r.id_nominal, r.distance_mm
        );
        let path = out_dir.join(&name);
        write_text(&path, &serde_json::to_string_pretty(r)?)?;
        written.push(path);
    }
    if !bundle.reports.is_empty() {
        let path = out_dir.join("kl_table.json");
        write_text(
            &path,
            &serde_json::to_string_pretty(&KlTable::from_reports(bundle.reports))?,
        )?;
        written.push(path);
    }
    if !bundle.trajectories.is_empty() {
        let dir = out_dir.join("trajectories");
        create_dir(&dir)?;
        for (name, t) in bundle.trajectories {
            let path = dir.join(format!("{name}.csv"));
            write_trajectory_csv(&path, t)?;
            written.push(path);
        }
    }
    if !bundle.fits.is_empty() {
        let rows = bundle
            .fits
            .iter()
            .map(|f| param_row(f, bundle.nms_time_constant))
            .collect::<Result<Vec<_>>>()?;
        let path = out_dir.join("parameter_matrix.csv");
        write_param_matrix(&path, &rows)?;
        written.push(path);
    }
    manifest.files = written
        .iter()
        .map(|p| p.strip_prefix(out_dir).unwrap_or(p).display().to_string())
        .collect();
    written.push(manifest.write(out_dir)?);
    Ok(written)
}
