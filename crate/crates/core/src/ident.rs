//! Recording ingestion, kinematics, slicing, the fitting cost, bounded
//! generalized pattern search, per-slice parameter fits and model-bank
//! construction.

use std::path::Path;
use std::str::FromStr;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::rmse;
use crate::error::{Error, Result};
use crate::icore::{
    design_controller, IcParams, DOL_MIN_BOUNDS, P_BOUNDS, QC_BOUNDS, QO_BOUNDS, Q_BOUNDS,
};
use crate::io::{fmt_f64, write_csv};
use crate::plant::{build_plant, PlantSpec};
use crate::sim::{
    make_target, simulate_2ol_from, simulate_ic_from, ModelBank, Start, TargetSignal,
    TaskCondition, Trajectory,
};

/// Samples kept before the first and after the last target change of a slice.
pub const SLICE_MARGIN: usize = 10;
/// Slices used for optimisation (the last ones of a block) and evaluation (the first ones).
pub const SPLIT_SLICES: usize = 20;
pub const SG_WINDOW: usize = 21;
pub const SG_ORDER: usize = 3;
/// Relative deviation of a sampling interval from the median that still counts as uniform.
pub const MAX_JITTER: f64 = 0.01;
/// Search bounds for the second-order-lag baseline.
pub const OMEGA_BOUNDS: (f64, f64) = (0.5, 200.0);
pub const ZETA_BOUNDS: (f64, f64) = (0.05, 3.0);

/// CSV column names of a recording.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub time: String,
    pub target: String,
    pub pos: String,
    pub vel: Option<String>,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            time: "t".into(),
            target: "target".into(),
            pos: "y".into(),
            vel: None,
        }
    }
}

/// Length unit of the position-like columns.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Units {
    /// Millimetres if the target range is at least 2, metres if at most 1.
    #[default]
    Auto,
    Mm,
    M,
}

impl FromStr for Units {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(Units::Auto),
            "mm" => Ok(Units::Mm),
            "m" => Ok(Units::M),
            other => Err(Error::InvalidParameter(format!(
                "unknown unit {other:?}; use mm, m or auto"
            ))),
        }
    }
}

/// What ingestion found and changed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestReport {
    pub rows: usize,
    pub dt: f64,
    /// Largest relative deviation of a sampling interval from `dt`.
    pub max_jitter: f64,
    /// Intervals longer than 1.5 `dt`.
    pub gaps: usize,
    /// The series were interpolated onto a uniform grid.
    pub resampled: bool,
    /// Midpoint of the target range subtracted from target and position, metres.
    pub centre_offset: f64,
    pub units: Units,
}

/// Uniformly sampled pointing block in metres and seconds, with the target
/// centred on zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub dt: f64,
    pub t: Vec<f64>,
    pub target: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Option<Vec<f64>>,
    pub a: Option<Vec<f64>>,
    pub participant: String,
    pub condition: Option<TaskCondition>,
    pub report: IngestReport,
}

fn ingest_err(path: &Path, row: Option<usize>, msg: impl Into<String>) -> Error {
    Error::Ingest {
        path: path.display().to_string(),
        row,
        msg: msg.into(),
    }
}

fn median(xs: &[f64]) -> f64 {
    let mut s = xs.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// Reads a block CSV. Rows are numbered from 1 with the header as row 1.
pub fn load_recording(path: &Path, map: &ColumnMap, units: Units) -> Result<Recording> {
    let mut reader =
        csv::Reader::from_path(path).map_err(|e| ingest_err(path, None, e.to_string()))?;
    let header = reader
        .headers()
        .map_err(|e| ingest_err(path, Some(1), e.to_string()))?
        .clone();
    let col = |name: &str| {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| ingest_err(path, Some(1), format!("missing column {name:?}")))
    };
    let (ct, cw, cy) = (col(&map.time)?, col(&map.target)?, col(&map.pos)?);
    let cv = map.vel.as_deref().map(col).transpose()?;

    let (mut t, mut w, mut y, mut v) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, rec) in reader.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| ingest_err(path, Some(row), e.to_string()))?;
        let get = |c: usize| -> Result<f64> {
            let field = rec.get(c).unwrap_or("");
            let x: f64 = field.trim().parse().map_err(|_| {
                ingest_err(
                    path,
                    Some(row),
                    format!("cannot parse {field:?} in column {}", &header[c]),
                )
            })?;
            if !x.is_finite() {
                return Err(ingest_err(
                    path,
                    Some(row),
                    format!("non-finite value in column {}", &header[c]),
                ));
            }
            Ok(x)
        };
        let ti = get(ct)?;
        if let Some(&prev) = t.last() {
            if ti == prev {
                return Err(ingest_err(
                    path,
                    Some(row),
                    format!("duplicate timestamp {ti}"),
                ));
            }
            if ti < prev {
                return Err(ingest_err(
                    path,
                    Some(row),
                    format!("time goes backwards ({ti} after {prev})"),
                ));
            }
        }
        t.push(ti);
        w.push(get(cw)?);
        y.push(get(cy)?);
        if let Some(c) = cv {
            v.push(get(c)?);
        }
    }
    if t.len() < 3 {
        return Err(ingest_err(
            path,
            None,
            "recording needs at least three rows",
        ));
    }

    let (lo, hi) = w
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| {
            (a.min(x), b.max(x))
        });
    let units = match units {
        Units::Auto if hi - lo >= 2.0 => Units::Mm,
        Units::Auto if hi - lo > 0.0 && hi - lo <= 1.0 => Units::M,
        Units::Auto => {
            return Err(ingest_err(
                path,
                None,
                format!(
                    "cannot infer units from a target range of {}; pass mm or m",
                    hi - lo
                ),
            ))
        }
        u => u,
    };
    let scale = if units == Units::Mm { 1e-3 } else { 1.0 };
    let centre = 0.5 * (lo + hi) * scale;
    let shift = |xs: &mut Vec<f64>, c: f64| xs.iter_mut().for_each(|x| *x = *x * scale - c);
    shift(&mut w, centre);
    shift(&mut y, centre);
    shift(&mut v, 0.0);

    let diffs: Vec<f64> = t.windows(2).map(|p| p[1] - p[0]).collect();
    let dt = median(&diffs);
    let max_jitter = diffs
        .iter()
        .map(|d| (d - dt).abs() / dt)
        .fold(0.0, f64::max);
    let gaps = diffs.iter().filter(|&&d| d > 1.5 * dt).count();
    let rows = t.len();
    let t0 = t[0];
    let resampled = max_jitter > MAX_JITTER;
    let (t, w, y, v) = if resampled {
        let n = ((t[rows - 1] - t0) / dt + 1e-9).floor() as usize + 1;
        let grid: Vec<f64> = (0..n).map(|k| t0 + k as f64 * dt).collect();
        let v = if v.is_empty() {
            v
        } else {
            interp_linear(&t, &v, &grid)
        };
        (
            grid.clone(),
            interp_hold(&t, &w, &grid),
            interp_linear(&t, &y, &grid),
            v,
        )
    } else {
        (t, w, y, v)
    };
    let t = t.iter().map(|x| x - t0).collect();
    Ok(Recording {
        dt,
        t,
        target: w,
        y,
        v: if v.is_empty() { None } else { Some(v) },
        a: None,
        participant: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        condition: None,
        report: IngestReport {
            rows,
            dt,
            max_jitter,
            gaps,
            resampled,
            centre_offset: centre,
            units,
        },
    })
}

fn interp_linear(t: &[f64], x: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut j = 0;
    grid.iter()
        .map(|&g| {
            while j + 2 < t.len() && t[j + 1] < g {
                j += 1;
            }
            let s = ((g - t[j]) / (t[j + 1] - t[j])).clamp(0.0, 1.0);
            x[j] + s * (x[j + 1] - x[j])
        })
        .collect()
}

/// Previous-value interpolation, for piecewise-constant signals.
fn interp_hold(t: &[f64], x: &[f64], grid: &[f64]) -> Vec<f64> {
    let mut j = 0;
    grid.iter()
        .map(|&g| {
            while j + 1 < t.len() && t[j + 1] <= g + 1e-12 {
                j += 1;
            }
            x[j]
        })
        .collect()
}

/// Writes `t,target,y[,v]` in metres.
pub fn write_recording_csv(path: &Path, rec: &Recording) -> Result<()> {
    let mut header = vec!["t", "target", "y"];
    if rec.v.is_some() {
        header.push("v");
    }
    let rows = (0..rec.len()).map(|k| {
        let mut r = vec![fmt_f64(rec.t[k]), fmt_f64(rec.target[k]), fmt_f64(rec.y[k])];
        if let Some(v) = &rec.v {
            r.push(fmt_f64(v[k]));
        }
        r
    });
    write_csv(path, &header, rows)
}

impl Recording {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Sample indices at which the target takes a new value.
    pub fn change_indices(&self) -> Vec<usize> {
        (1..self.len())
            .filter(|&k| self.target[k] != self.target[k - 1])
            .collect()
    }

    /// Piecewise-constant target of samples `[start, end)`, time measured from `start`.
    pub fn target_signal(&self, start: usize, end: usize) -> Result<TargetSignal> {
        let end = end.min(self.len());
        let mut times = Vec::new();
        let mut levels = vec![self.target[start]];
        for k in (start + 1)..end {
            if self.target[k] != self.target[k - 1] {
                times.push((k - start) as f64 * self.dt);
                levels.push(self.target[k]);
            }
        }
        TargetSignal::new(times, levels)
    }

    /// Samples `[start, end)` as a trajectory; requires kinematics.
    pub fn trajectory(&self, start: usize, end: usize) -> Result<Trajectory> {
        let v = self.v.as_ref().ok_or_else(|| {
            Error::InvalidParameter("recording has no velocity; derive kinematics first".into())
        })?;
        let end = end.min(self.len());
        let a = self.a.clone().unwrap_or_else(|| vec![0.0; self.len()]);
        Ok(Trajectory {
            dt: self.dt,
            t: (0..end - start).map(|k| k as f64 * self.dt).collect(),
            w: self.target[start..end].to_vec(),
            y: self.y[start..end].to_vec(),
            v: v[start..end].to_vec(),
            a: a[start..end].to_vec(),
            u: vec![0.0; end - start],
            events: Vec::new(),
            controllers: Vec::new(),
        })
    }
}

/// Central differences with second-order one-sided ends.
pub fn central_difference(x: &[f64], dt: f64) -> Result<Vec<f64>> {
    let n = x.len();
    if n < 3 {
        return Err(Error::InvalidParameter(
            "differentiation needs at least three samples".into(),
        ));
    }
    let mut d = vec![0.0; n];
    for k in 1..n - 1 {
        d[k] = (x[k + 1] - x[k - 1]) / (2.0 * dt);
    }
    d[0] = (-3.0 * x[0] + 4.0 * x[1] - x[2]) / (2.0 * dt);
    d[n - 1] = (3.0 * x[n - 1] - 4.0 * x[n - 2] + x[n - 3]) / (2.0 * dt);
    Ok(d)
}

/// Least-squares polynomial smoother of odd `window` and degree `order`.
/// The first and last half-windows are evaluated from the polynomial fitted
/// to the first and last full window.
pub fn savitzky_golay(x: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    if window.is_multiple_of(2) || order >= window {
        return Err(Error::InvalidParameter(format!(
            "Savitzky–Golay needs an odd window larger than the order (window {window}, order {order})"
        )));
    }
    let n = x.len();
    if n < window {
        return Err(Error::InvalidParameter(format!(
            "series of {n} samples is shorter than the smoothing window {window}"
        )));
    }
    let m = window / 2;
    let j = DMatrix::from_fn(window, order + 1, |i, p| {
        (i as f64 - m as f64).powi(p as i32)
    });
    let jt = j.transpose();
    let gram_inv = (&jt * &j)
        .try_inverse()
        .ok_or_else(|| Error::Design("Savitzky–Golay normal equations are singular".into()))?;
    let h = &j * gram_inv * jt;
    let apply = |row: usize, offset: usize| {
        (0..window)
            .map(|c| h[(row, c)] * x[offset + c])
            .sum::<f64>()
    };
    let mut out = vec![0.0; n];
    for (k, o) in out.iter_mut().enumerate() {
        *o = if k < m {
            apply(k, 0)
        } else if k >= n - m {
            apply(k - (n - window), n - window)
        } else {
            apply(m, k - m)
        };
    }
    Ok(out)
}

/// Fills in velocity and acceleration where missing: central differences,
/// each optionally followed by Savitzky–Golay smoothing `(window, order)`.
pub fn derive_kinematics(rec: &Recording, smoothing: Option<(usize, usize)>) -> Result<Recording> {
    let diff = |x: &[f64]| -> Result<Vec<f64>> {
        let d = central_difference(x, rec.dt)?;
        match smoothing {
            Some((w, o)) => savitzky_golay(&d, w, o),
            None => Ok(d),
        }
    };
    let mut out = rec.clone();
    if out.v.is_none() {
        out.v = Some(diff(&rec.y)?);
    }
    if out.a.is_none() {
        out.a = Some(diff(out.v.as_ref().expect("set above"))?);
    }
    Ok(out)
}

/// Two consecutive trials with margins: `[start, end)` in samples.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Slice {
    pub id: usize,
    pub start: usize,
    pub end: usize,
    /// Target-change sample indices inside the slice (absolute).
    pub changes: Vec<usize>,
}

/// Slice `k` runs from `SLICE_MARGIN` samples before change `2k` to
/// `SLICE_MARGIN` samples after change `2k + 2` (or the end of the record).
pub fn slices_from_changes(changes: &[usize], n_samples: usize) -> Result<Vec<Slice>> {
    if changes.len() < 3 {
        return Err(Error::InvalidParameter(format!(
            "slicing needs at least three target changes, found {}",
            changes.len()
        )));
    }
    if changes[0] < SLICE_MARGIN {
        return Err(Error::InvalidParameter(format!(
            "first target change at sample {} leaves no {SLICE_MARGIN}-sample margin",
            changes[0]
        )));
    }
    Ok((0..changes.len() / 2)
        .map(|k| {
            let start = changes[2 * k] - SLICE_MARGIN;
            let end = changes
                .get(2 * k + 2)
                .map_or(n_samples, |&c| (c + SLICE_MARGIN).min(n_samples));
            Slice {
                id: k,
                start,
                end,
                changes: changes
                    .iter()
                    .copied()
                    .filter(|&c| c >= start && c < end)
                    .collect(),
            }
        })
        .collect())
}

pub fn slice_recording(rec: &Recording) -> Result<Vec<Slice>> {
    slices_from_changes(&rec.change_indices(), rec.len())
}

/// `(evaluation, optimisation)`: the first and the last [`SPLIT_SLICES`] slices.
pub fn split_slices(slices: &[Slice]) -> (Vec<Slice>, Vec<Slice>) {
    let k = SPLIT_SLICES.min(slices.len());
    (slices[..k].to_vec(), slices[slices.len() - k..].to_vec())
}

/// Everything a fit needs from one slice.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceData {
    pub slice_id: usize,
    pub data: Trajectory,
    pub target: TargetSignal,
    pub start_position: f64,
}

pub fn slice_data(rec: &Recording, slice: &Slice) -> Result<SliceData> {
    let data = rec.trajectory(slice.start, slice.end)?;
    Ok(SliceData {
        slice_id: slice.id,
        start_position: data.y[0],
        target: rec.target_signal(slice.start, slice.end)?,
        data,
    })
}

/// `cp·RMSE(position) + cv·RMSE(velocity)`.
pub fn cost_j(sim: &Trajectory, data: &Trajectory, cp: f64, cv: f64) -> Result<f64> {
    if sim.len() != data.len() {
        return Err(Error::dim(
            "cost_j",
            format!("{} simulated vs {} recorded samples", sim.len(), data.len()),
        ));
    }
    Ok(cp * rmse(&sim.y, &data.y)? + cv * rmse(&sim.v, &data.v)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsOptions {
    /// Initial mesh size in coordinates normalised to the unit box.
    pub initial_mesh: f64,
    /// Stop once the mesh is at or below this size.
    pub min_mesh: f64,
    pub max_evals: usize,
    pub expand: f64,
    pub contract: f64,
}

impl Default for GpsOptions {
    fn default() -> Self {
        Self {
            initial_mesh: 0.25,
            min_mesh: 1e-6,
            max_evals: 2000,
            expand: 2.0,
            contract: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub eval: usize,
    pub f: f64,
    pub best: f64,
    pub mesh: f64,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MeshSize,
    MaxEvaluations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GpsTrace {
    pub evaluations: usize,
    pub final_mesh: f64,
    pub stop: StopReason,
    #[serde(skip)]
    pub rows: Vec<TraceRow>,
}

/// Generalized pattern search over the `2d` coordinate directions in the box
/// `[lower, upper]`, normalised to the unit cube. Polling is opportunistic
/// and starts with the last successful direction; the mesh grows by
/// `expand` after a success and shrinks by `contract` after a failed poll.
/// Non-finite objective values count as +∞ except at `x0`.
pub fn pattern_search<F: FnMut(&[f64]) -> f64>(
    f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &GpsOptions,
) -> Result<(Vec<f64>, f64, GpsTrace)> {
    pattern_search_basis(f, x0, lower, upper, opts, None)
}

/// As [`pattern_search`], polling along `±` the columns of an orthonormal
/// `basis` of the normalised space instead of the coordinate directions.
pub fn pattern_search_basis<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    x0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &GpsOptions,
    basis: Option<&DMatrix<f64>>,
) -> Result<(Vec<f64>, f64, GpsTrace)> {
    let d = x0.len();
    if basis.is_some_and(|b| b.shape() != (d, d)) {
        return Err(Error::dim(
            "pattern_search",
            "basis must be square in the search dimension",
        ));
    }
    if lower.len() != d || upper.len() != d {
        return Err(Error::dim(
            "pattern_search",
            "bounds and start differ in length",
        ));
    }
    for i in 0..d {
        // An empty or NaN-bounded range contains nothing.
        if !(lower[i]..=upper[i]).contains(&x0[i]) {
            return Err(Error::InvalidParameter(format!(
                "start {} outside [{}, {}] in coordinate {i}",
                x0[i], lower[i], upper[i]
            )));
        }
    }
    if !(opts.initial_mesh > 0.0
        && opts.min_mesh > 0.0
        && opts.expand >= 1.0
        && opts.contract > 0.0
        && opts.contract < 1.0)
    {
        return Err(Error::InvalidParameter(
            "invalid pattern-search options".into(),
        ));
    }
    let span: Vec<f64> = (0..d).map(|i| upper[i] - lower[i]).collect();
    let to_x = |z: &[f64]| -> Vec<f64> { (0..d).map(|i| lower[i] + z[i] * span[i]).collect() };
    let mut z: Vec<f64> = (0..d)
        .map(|i| {
            if span[i] > 0.0 {
                (x0[i] - lower[i]) / span[i]
            } else {
                0.0
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut best = f(x0);
    if !best.is_finite() {
        return Err(Error::NonFinite("objective at the starting point"));
    }
    let mut mesh = opts.initial_mesh;
    rows.push(TraceRow {
        eval: 0,
        f: best,
        best,
        mesh,
        x: x0.to_vec(),
    });
    let dirs: Vec<Vec<f64>> = match basis {
        None => (0..d)
            .filter(|&i| span[i] > 0.0)
            .flat_map(|i| {
                let e: Vec<f64> = (0..d).map(|j| f64::from(u8::from(i == j))).collect();
                [e.clone(), e.iter().map(|v| -v).collect()]
            })
            .collect(),
        Some(b) => b
            .column_iter()
            .flat_map(|c| {
                [
                    c.iter().copied().collect::<Vec<f64>>(),
                    c.iter().map(|v| -v).collect(),
                ]
            })
            .collect(),
    };
    let mut first = 0;
    let mut evals = 1;
    let stop = loop {
        if mesh <= opts.min_mesh || dirs.is_empty() {
            break StopReason::MeshSize;
        }
        if evals >= opts.max_evals {
            break StopReason::MaxEvaluations;
        }
        let mut success = false;
        for j in 0..dirs.len() {
            if evals >= opts.max_evals {
                break;
            }
            let dir = &dirs[(first + j) % dirs.len()];
            let cand: Vec<f64> = (0..d)
                .map(|i| {
                    if span[i] > 0.0 {
                        (z[i] + dir[i] * mesh).clamp(0.0, 1.0)
                    } else {
                        z[i]
                    }
                })
                .collect();
            if cand == z {
                continue;
            }
            let x = to_x(&cand);
            let fx = f(&x);
            evals += 1;
            let improved = fx.is_finite() && fx < best;
            if improved {
                best = fx;
                z = cand;
            }
            rows.push(TraceRow {
                eval: evals - 1,
                f: fx,
                best,
                mesh,
                x,
            });
            if improved {
                first = (first + j) % dirs.len();
                success = true;
                break;
            }
        }
        mesh = if success {
            (mesh * opts.expand).min(1.0)
        } else {
            mesh * opts.contract
        };
    };
    Ok((
        to_x(&z),
        best,
        GpsTrace {
            evaluations: evals,
            final_mesh: mesh,
            stop,
            rows,
        },
    ))
}

/// Which parameters are optimised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamSet {
    /// `Qc1..Qc4, Qo, q, Δ_ol_min, p`.
    #[default]
    Full,
    /// `Qc1, Qc2, q, p` with `Qo = 10`, `Qc3 = Qc4 = 1`, `Δ_ol_min = 0.3 s`.
    Reduced,
}

impl FromStr for ParamSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ParamSet::Full),
            "reduced" => Ok(ParamSet::Reduced),
            other => Err(Error::InvalidParameter(format!(
                "unknown parameter set {other:?}; use full or reduced"
            ))),
        }
    }
}

impl ParamSet {
    pub fn names(self) -> &'static [&'static str] {
        match self {
            ParamSet::Full => &["qc1", "qc2", "qc3", "qc4", "qo", "q", "dol_min", "p"],
            ParamSet::Reduced => &["qc1", "qc2", "q", "p"],
        }
    }

    /// Applies the values this set keeps fixed.
    pub fn pin(self, p: &IcParams) -> IcParams {
        match self {
            ParamSet::Full => p.clone(),
            ParamSet::Reduced => IcParams {
                qo: 10.0,
                qc: [p.qc[0], p.qc[1], 1.0, 1.0],
                dol_min: 0.3,
                ..p.clone()
            },
        }
    }

    /// Search coordinates: base-10 logarithms for the weights, linear otherwise.
    pub fn encode(self, p: &IcParams) -> Vec<f64> {
        let l = f64::log10;
        match self {
            ParamSet::Full => vec![
                l(p.qc[0]),
                l(p.qc[1]),
                l(p.qc[2]),
                l(p.qc[3]),
                l(p.qo),
                p.q,
                p.dol_min,
                p.p,
            ],
            ParamSet::Reduced => vec![l(p.qc[0]), l(p.qc[1]), p.q, p.p],
        }
    }

    pub fn decode(self, x: &[f64], base: &IcParams) -> IcParams {
        let e = |v: f64| 10f64.powf(v);
        match self {
            ParamSet::Full => IcParams {
                qc: [e(x[0]), e(x[1]), e(x[2]), e(x[3])],
                qo: e(x[4]),
                q: x[5],
                dol_min: x[6],
                p: x[7],
                ..base.clone()
            },
            ParamSet::Reduced => IcParams {
                qc: [e(x[0]), e(x[1]), 1.0, 1.0],
                qo: 10.0,
                q: x[2],
                dol_min: 0.3,
                p: x[3],
                ..base.clone()
            },
        }
    }

    /// Natural-unit values of the optimised parameters.
    pub fn values(self, p: &IcParams) -> Vec<f64> {
        match self {
            ParamSet::Full => vec![
                p.qc[0], p.qc[1], p.qc[2], p.qc[3], p.qo, p.q, p.dol_min, p.p,
            ],
            ParamSet::Reduced => vec![p.qc[0], p.qc[1], p.q, p.p],
        }
    }

    pub fn bounds(self) -> (Vec<f64>, Vec<f64>) {
        let lg = |(a, b): (f64, f64)| (a.log10(), b.log10());
        let list = match self {
            ParamSet::Full => vec![
                lg(QC_BOUNDS),
                lg(QC_BOUNDS),
                lg(QC_BOUNDS),
                lg(QC_BOUNDS),
                lg(QO_BOUNDS),
                Q_BOUNDS,
                DOL_MIN_BOUNDS,
                P_BOUNDS,
            ],
            ParamSet::Reduced => vec![lg(QC_BOUNDS), lg(QC_BOUNDS), Q_BOUNDS, P_BOUNDS],
        };
        list.into_iter().unzip()
    }
}

/// Outcome of fitting one slice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub slice_id: usize,
    pub set: ParamSet,
    pub params: IcParams,
    pub cost: f64,
    pub trace: GpsTrace,
}

impl FitResult {
    /// Optimiser trace: `eval,f,best,mesh` and the optimised parameters in natural units.
    pub fn write_trace_csv(&self, path: &Path) -> Result<()> {
        let mut header = vec!["eval", "f", "best", "mesh"];
        header.extend_from_slice(self.set.names());
        let rows = self.trace.rows.iter().map(|r| {
            let p = self.set.decode(&r.x, &self.params);
            let mut row = vec![
                r.eval.to_string(),
                fmt_f64(r.f),
                fmt_f64(r.best),
                fmt_f64(r.mesh),
            ];
            row.extend(self.set.values(&p).into_iter().map(fmt_f64));
            row
        });
        write_csv(path, &header, rows)
    }
}

fn noise_free(spec: &PlantSpec) -> PlantSpec {
    PlantSpec {
        motor_noise: 0.0,
        sensor_noise: 0.0,
        ..spec.clone()
    }
}

/// Replays the slice's target schedule from rest at the recorded initial
/// position.
pub fn simulate_slice(
    sd: &SliceData,
    plant_spec: &PlantSpec,
    params: &IcParams,
) -> Result<Trajectory> {
    let plant = build_plant(PlantSpec {
        mismatch_p: params.p,
        ..noise_free(plant_spec)
    })?;
    let ctl = design_controller(params, &plant, sd.data.dt)?;
    simulate_ic_from(
        &ctl,
        plant.spec(),
        &sd.target,
        sd.data.len(),
        Start::At(sd.start_position),
        0,
    )
}

/// Cost of `params` on a slice; failed designs and diverging runs give +∞.
pub fn slice_cost(sd: &SliceData, plant_spec: &PlantSpec, params: &IcParams) -> f64 {
    match simulate_slice(sd, plant_spec, params) {
        Ok(sim)
            if sim
                .y
                .iter()
                .chain(&sim.v)
                .all(|x| x.is_finite() && x.abs() < 1e3) =>
        {
            cost_j(&sim, &sd.data, params.cp, params.cv).unwrap_or(f64::INFINITY)
        }
        _ => f64::INFINITY,
    }
}

pub fn fit_slice(
    sd: &SliceData,
    plant_spec: &PlantSpec,
    init: &IcParams,
    set: ParamSet,
    opts: &GpsOptions,
) -> Result<FitResult> {
    let base = set.pin(init);
    base.validate()?;
    if !base.within_bounds() {
        return Err(Error::InvalidParameter(
            "initial parameters lie outside the search bounds".into(),
        ));
    }
    let (lo, hi) = set.bounds();
    let x0 = set.encode(&base);
    let (x, cost, trace) = pattern_search(
        |x| slice_cost(sd, plant_spec, &set.decode(x, &base)),
        &x0,
        &lo,
        &hi,
        opts,
    )?;
    let params = set.decode(&x, &base);
    assert!(params.within_bounds(), "pattern search left the bounds");
    Ok(FitResult {
        slice_id: sd.slice_id,
        set,
        params,
        cost,
        trace,
    })
}

/// Initial mesh of a polishing restart relative to the first search.
const POLISH_MESH: f64 = 0.04;
/// Polishing stops after this many restarts without improvement.
const POLISH_PATIENCE: usize = 3;

/// Orthonormal basis from the QR factorisation of a Gaussian matrix.
fn random_rotation(d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    g.qr().q()
}

/// Multi-start settings for [`fit_slice_multistart`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiStart {
    /// Searches started in total: the initial point plus uniformly drawn ones.
    pub starts: usize,
    pub seed: u64,
    /// Extra searches restarted from the incumbent with the initial mesh.
    pub polish_rounds: usize,
}

impl Default for MultiStart {
    fn default() -> Self {
        Self {
            starts: 1,
            seed: 0,
            polish_rounds: 0,
        }
    }
}

/// Pattern search from the initial point and from `starts − 1` seeded
/// uniform points of the search box, followed by local restarts from the
/// best point, each polling along a freshly drawn orthonormal basis. The
/// trace concatenates all searches.
pub fn fit_slice_multistart(
    sd: &SliceData,
    plant_spec: &PlantSpec,
    init: &IcParams,
    set: ParamSet,
    opts: &GpsOptions,
    ms: &MultiStart,
) -> Result<FitResult> {
    let base = set.pin(init);
    base.validate()?;
    if !base.within_bounds() {
        return Err(Error::InvalidParameter(
            "initial parameters lie outside the search bounds".into(),
        ));
    }
    let (lo, hi) = set.bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(ms.seed);
    let mut starts = vec![set.encode(&base)];
    for _ in 1..ms.starts.max(1) {
        starts.push(
            lo.iter()
                .zip(&hi)
                .map(|(&a, &b)| rng.random_range(a..=b))
                .collect(),
        );
    }
    let objective = |x: &[f64]| slice_cost(sd, plant_spec, &set.decode(x, &base));
    let mut rows = Vec::new();
    let mut evaluations = 0;
    let mut best: Option<(Vec<f64>, f64, GpsTrace)> = None;
    let mut absorb = |run: (Vec<f64>, f64, GpsTrace),
                      best: &mut Option<(Vec<f64>, f64, GpsTrace)>| {
        for r in &run.2.rows {
            rows.push(TraceRow {
                eval: evaluations + r.eval,
                ..r.clone()
            });
        }
        evaluations += run.2.evaluations;
        let improved = best.as_ref().is_none_or(|b| run.1 < b.1);
        if improved {
            *best = Some(run);
        }
        improved
    };
    for x0 in &starts {
        if !objective(x0).is_finite() {
            continue;
        }
        let run = pattern_search(objective, x0, &lo, &hi, opts)?;
        absorb(run, &mut best);
    }
    let mut idle = 0;
    for _ in 0..ms.polish_rounds {
        let x0 = best
            .as_ref()
            .ok_or(Error::NonFinite("objective at every start"))?
            .0
            .clone();
        let basis = random_rotation(lo.len(), &mut rng);
        let polish = GpsOptions {
            initial_mesh: opts.initial_mesh * POLISH_MESH,
            ..opts.clone()
        };
        let run = pattern_search_basis(objective, &x0, &lo, &hi, &polish, Some(&basis))?;
        if absorb(run, &mut best) {
            idle = 0;
        } else {
            idle += 1;
            if idle >= POLISH_PATIENCE {
                break;
            }
        }
    }
    let (x, cost, trace) = best.ok_or(Error::NonFinite("objective at every start"))?;
    let params = set.decode(&x, &base);
    assert!(params.within_bounds(), "pattern search left the bounds");
    let mut rows_sorted = rows;
    let mut running = f64::INFINITY;
    for r in &mut rows_sorted {
        if r.f.is_finite() && r.f < running {
            running = r.f;
        }
        r.best = running;
    }
    Ok(FitResult {
        slice_id: sd.slice_id,
        set,
        params,
        cost,
        trace: GpsTrace {
            evaluations,
            final_mesh: trace.final_mesh,
            stop: trace.stop,
            rows: rows_sorted,
        },
    })
}

/// Independent fits of several slices, returned in slice order.
pub fn fit_slices(
    slices: &[SliceData],
    plant_spec: &PlantSpec,
    init: &IcParams,
    set: ParamSet,
    opts: &GpsOptions,
) -> Result<Vec<FitResult>> {
    let mut fits: Vec<FitResult> = slices
        .par_iter()
        .map(|sd| fit_slice(sd, plant_spec, init, set, opts))
        .collect::<Result<_>>()?;
    fits.sort_by_key(|f| f.slice_id);
    Ok(fits)
}

/// Ranked bank of the fitted controllers.
pub fn build_bank(fits: &[FitResult], dt: f64, nms_time_constant: f64) -> Result<ModelBank> {
    ModelBank::from_parts(
        fits.iter()
            .map(|f| (f.params.clone(), f.cost, f.slice_id))
            .collect(),
        dt,
        nms_time_constant,
    )
}

/// Fitted second-order-lag baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit2ol {
    pub omega: f64,
    pub zeta: f64,
    /// Mean cost over the slices.
    pub cost: f64,
    pub evaluations: usize,
}

/// Mean slice cost of the second-order lag with weights 0.5/0.5.
pub fn cost_2ol(slices: &[SliceData], omega: f64, zeta: f64) -> f64 {
    let mut total = 0.0;
    for sd in slices {
        let c = simulate_2ol_from(
            omega,
            zeta,
            &sd.target,
            sd.data.dt,
            sd.data.len(),
            Start::At(sd.start_position),
        )
        .and_then(|sim| cost_j(&sim, &sd.data, 0.5, 0.5));
        match c {
            Ok(c) if c.is_finite() => total += c,
            _ => return f64::INFINITY,
        }
    }
    total / slices.len() as f64
}

/// One `(ω, ζ)` for all slices, searched in `(log10 ω, ζ)`.
pub fn fit_2ol(slices: &[SliceData], init: (f64, f64), opts: &GpsOptions) -> Result<Fit2ol> {
    if slices.is_empty() {
        return Err(Error::InvalidParameter(
            "2ol fit needs at least one slice".into(),
        ));
    }
    let lo = [OMEGA_BOUNDS.0.log10(), ZETA_BOUNDS.0];
    let hi = [OMEGA_BOUNDS.1.log10(), ZETA_BOUNDS.1];
    let x0 = [init.0.log10(), init.1];
    let (x, cost, trace) = pattern_search(
        |x| cost_2ol(slices, 10f64.powf(x[0]), x[1]),
        &x0,
        &lo,
        &hi,
        opts,
    )?;
    Ok(Fit2ol {
        omega: 10f64.powf(x[0]),
        zeta: x[1],
        cost,
        evaluations: trace.evaluations,
    })
}

/// Synthetic block: a single controller tracks `n_changes` target changes
/// spaced `period` apart, starting `lead` seconds in. Velocity is stored.
#[allow(clippy::too_many_arguments)]
pub fn synthetic_recording(
    params: &IcParams,
    plant_spec: &PlantSpec,
    cond: &TaskCondition,
    n_changes: usize,
    lead: f64,
    period: f64,
    dt: f64,
    seed: u64,
) -> Result<Recording> {
    let target = make_target(
        cond,
        (0..n_changes).map(|i| lead + i as f64 * period).collect(),
    )?;
    let plant = build_plant(PlantSpec {
        mismatch_p: params.p,
        ..plant_spec.clone()
    })?;
    let ctl = design_controller(params, &plant, dt)?;
    let n = ((lead + n_changes as f64 * period) / dt).round() as usize;
    let sim = simulate_ic_from(&ctl, plant.spec(), &target, n, Start::AtTarget, seed)?;
    Ok(Recording {
        dt,
        t: sim.t,
        target: sim.w,
        y: sim.y,
        v: Some(sim.v),
        a: Some(sim.a),
        participant: "synthetic".into(),
        condition: Some(cond.clone()),
        report: IngestReport {
            rows: n,
            dt,
            max_jitter: 0.0,
            gaps: 0,
            resampled: false,
            centre_offset: 0.0,
            units: Units::M,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_three_column_csv() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("t,target,y\n");
        for k in 0..50 {
            let w = if k < 20 { -106.0 } else { 106.0 };
            text.push_str(&format!("{},{},{}\n", 1.0 + k as f64 * 0.002, w, 0.5 * w));
        }
        let p = write(dir.path(), "p10.csv", &text);
        let rec = load_recording(&p, &ColumnMap::default(), Units::Auto).unwrap();
        assert_eq!(rec.report.units, Units::Mm);
        assert!((rec.dt - 0.002).abs() < 1e-12);
        assert_eq!(rec.t[0], 0.0);
        let max = rec.target.iter().cloned().fold(0.0, f64::max);
        assert!((max - 0.106).abs() < 1e-12);
        assert!((rec.y[0] + 0.053).abs() < 1e-12);
        assert_eq!(rec.participant, "p10");
        assert!(rec.v.is_none());
        assert_eq!(rec.change_indices(), vec![20]);
    }

    #[test]
    fn ingest_errors_name_rows() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "dup.csv",
            "t,target,y\n0,0,0\n0.001,1,0\n0.001,1,0\n0.003,1,0\n",
        );
        let err = load_recording(&p, &ColumnMap::default(), Units::M).unwrap_err();
        assert!(matches!(err, Error::Ingest { row: Some(4), .. }), "{err}");
        assert!(err.to_string().contains("row 4"));
        let p = write(dir.path(), "cols.csv", "time,target,y\n0,0,0\n");
        let err = load_recording(&p, &ColumnMap::default(), Units::M).unwrap_err();
        assert!(err.to_string().contains("missing column \"t\""));
        let p = write(
            dir.path(),
            "back.csv",
            "t,target,y\n0,0,0\n0.002,0,0\n0.001,0,0\n",
        );
        assert!(load_recording(&p, &ColumnMap::default(), Units::M).is_err());
        let p = write(
            dir.path(),
            "amb.csv",
            "t,target,y\n0,0,0\n0.001,1.5,0\n0.002,1.5,0\n",
        );
        assert!(load_recording(&p, &ColumnMap::default(), Units::Auto).is_err());
    }

    #[test]
    fn jittered_time_is_resampled() {
        let dir = tempfile::tempdir().unwrap();
        let mut text = String::from("t,target,y\n");
        let mut t = 0.0;
        for k in 0..100 {
            text.push_str(&format!(
                "{t},{},{}\n",
                if k < 50 { 0.0 } else { 0.2 },
                0.3 * t
            ));
            t += if k % 2 == 0 { 0.001 } else { 0.00103 };
        }
        let p = write(dir.path(), "j.csv", &text);
        let rec = load_recording(&p, &ColumnMap::default(), Units::M).unwrap();
        assert!(rec.report.resampled && rec.report.max_jitter > 0.01);
        for k in 1..rec.len() {
            assert!((rec.t[k] - rec.t[k - 1] - rec.dt).abs() < 1e-12);
        }
        // Linear position is reproduced by linear interpolation.
        let expected = 0.3 * rec.t[10] - rec.report.centre_offset;
        assert!((rec.y[10] - expected).abs() < 1e-9);
    }

    fn rec_from(y: Vec<f64>, dt: f64) -> Recording {
        let n = y.len();
        Recording {
            dt,
            t: (0..n).map(|k| k as f64 * dt).collect(),
            target: vec![0.0; n],
            y,
            v: None,
            a: None,
            participant: String::new(),
            condition: None,
            report: IngestReport {
                rows: n,
                dt,
                max_jitter: 0.0,
                gaps: 0,
                resampled: false,
                centre_offset: 0.0,
                units: Units::M,
            },
        }
    }

    #[test]
    fn kinematics_oracles() {
        let dt = 1e-3;
        let ramp = rec_from((0..200).map(|k| 0.7 * k as f64 * dt).collect(), dt);
        let r = derive_kinematics(&ramp, Some((SG_WINDOW, SG_ORDER))).unwrap();
        assert!(r.v.as_ref().unwrap().iter().all(|v| (v - 0.7).abs() < 1e-9));
        assert!(r.a.as_ref().unwrap().iter().all(|a| a.abs() < 1e-6));

        let two_pi = 2.0 * std::f64::consts::PI;
        let sine = rec_from(
            (0..2000).map(|k| (two_pi * k as f64 * dt).sin()).collect(),
            dt,
        );
        for smoothing in [None, Some((SG_WINDOW, SG_ORDER))] {
            let s = derive_kinematics(&sine, smoothing).unwrap();
            let v = s.v.unwrap();
            for (k, vk) in v.iter().enumerate().take(2000 - SG_WINDOW).skip(SG_WINDOW) {
                let exact = two_pi * (two_pi * k as f64 * dt).cos();
                assert!(
                    (vk - exact).abs() <= 1e-3 * two_pi,
                    "k {k}: {vk} vs {exact}"
                );
            }
        }
        let flat =
            derive_kinematics(&rec_from(vec![0.3; 50], dt), Some((SG_WINDOW, SG_ORDER))).unwrap();
        assert!(flat.v.unwrap().iter().all(|v| v.abs() < 1e-12));
        assert!(
            derive_kinematics(&rec_from(vec![0.0; 10], dt), Some((SG_WINDOW, SG_ORDER))).is_err()
        );
    }

    #[test]
    fn savitzky_golay_preserves_cubics() {
        let x: Vec<f64> = (0..60)
            .map(|k| {
                let t = k as f64 * 0.1;
                1.0 - 2.0 * t + 0.5 * t * t - 0.1 * t * t * t
            })
            .collect();
        let s = savitzky_golay(&x, 21, 3).unwrap();
        for (a, b) in s.iter().zip(&x) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(savitzky_golay(&x, 20, 3).is_err());
    }

    #[test]
    fn slicing_counts_and_boundaries() {
        let changes: Vec<usize> = (0..80).map(|i| 100 + 1000 * i).collect();
        let slices = slices_from_changes(&changes, 100 + 80 * 1000).unwrap();
        assert_eq!(slices.len(), 40);
        for (k, s) in slices.iter().enumerate() {
            assert_eq!(s.start, changes[2 * k] - SLICE_MARGIN);
            assert_eq!(s.changes[0], changes[2 * k]);
        }
        // Adjacent slices overlap only in the margins.
        for w in slices.windows(2) {
            assert_eq!(w[0].end - w[1].start, 2 * SLICE_MARGIN);
        }
        let four = slices_from_changes(&[20, 40, 60, 80], 100).unwrap();
        assert_eq!(four.len(), 2);
        assert_eq!(four[1].end, 100);
        assert!(slices_from_changes(&[20, 40], 100).is_err());
        assert!(slices_from_changes(&[5, 40, 60], 100).is_err());
        let (eval, opt) = split_slices(&slices);
        assert_eq!(
            eval.iter().map(|s| s.id).collect::<Vec<_>>(),
            (0..20).collect::<Vec<_>>()
        );
        assert_eq!(
            opt.iter().map(|s| s.id).collect::<Vec<_>>(),
            (20..40).collect::<Vec<_>>()
        );
    }

    #[test]
    fn cost_examples() {
        let base = Trajectory {
            dt: 1e-3,
            t: vec![0.0; 4],
            w: vec![0.0; 4],
            y: vec![0.0, 0.1, 0.2, 0.3],
            v: vec![1.0, 1.0, 1.0, 1.0],
            a: vec![0.0; 4],
            u: vec![0.0; 4],
            events: vec![],
            controllers: vec![],
        };
        assert_eq!(cost_j(&base, &base, 0.5, 0.5).unwrap(), 0.0);
        let mut off = base.clone();
        off.y.iter_mut().for_each(|y| *y += 0.02);
        assert!((cost_j(&off, &base, 0.5, 0.5).unwrap() - 0.01).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let nd = Normal::new(0.0, 0.01).unwrap();
        let n = 10_000;
        let mut a = base.clone();
        a.y = vec![0.0; n];
        a.v = vec![0.0; n];
        let mut b = a.clone();
        b.y = (0..n).map(|_| nd.sample(&mut rng)).collect();
        let j = cost_j(&b, &a, 0.5, 0.5).unwrap();
        assert!((j / 0.005 - 1.0).abs() < 0.05);
        let mut short = base.clone();
        short.y.pop();
        short.v.pop();
        assert!(cost_j(&short, &base, 0.5, 0.5).is_err());
    }

    #[test]
    fn pattern_search_quadratic_and_bound() {
        let c = [0.3, -1.7, 2.2];
        let (x, f, trace) = pattern_search(
            |x| x.iter().zip(&c).map(|(a, b)| (a - b).powi(2)).sum(),
            &[0.0, 0.0, 0.0],
            &[-5.0; 3],
            &[5.0; 3],
            &GpsOptions::default(),
        )
        .unwrap();
        for i in 0..3 {
            assert!((x[i] - c[i]).abs() <= 1e-4, "{x:?}");
        }
        assert!(f < 1e-8);
        assert_eq!(trace.stop, StopReason::MeshSize);
        let (x, _, _) = pattern_search(
            |x| (x[0] - 3.0).powi(2),
            &[0.5],
            &[0.0],
            &[1.0],
            &GpsOptions::default(),
        )
        .unwrap();
        assert_eq!(x[0], 1.0);
        assert!(
            pattern_search(|_| f64::NAN, &[0.5], &[0.0], &[1.0], &GpsOptions::default()).is_err()
        );
        assert!(pattern_search(|x| x[0], &[2.0], &[0.0], &[1.0], &GpsOptions::default()).is_err());
    }

    #[test]
    fn pattern_search_rosenbrock() {
        let opts = GpsOptions {
            max_evals: 5000,
            ..Default::default()
        };
        let rosen = |x: &[f64]| (1.0 - x[0]).powi(2) + 100.0 * (x[1] - x[0] * x[0]).powi(2);
        let (_, f, trace) =
            pattern_search(rosen, &[-1.2, 1.0], &[-2.0, -2.0], &[2.0, 2.0], &opts).unwrap();
        assert!(f < 0.1, "f* = {f}");
        assert!(trace.evaluations <= 5000);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]
        #[test]
        fn pattern_search_is_monotone_and_feasible(c in prop::collection::vec(-3.0f64..3.0, 2),
                                                  x0 in prop::collection::vec(-1.0f64..1.0, 2)) {
            let (x, f, trace) = pattern_search(
                |x| (x[0] - c[0]).powi(2) + 3.0 * (x[1] - c[1]).abs(),
                &x0, &[-1.0, -1.0], &[1.0, 1.0], &GpsOptions::default()).unwrap();
            let f0 = trace.rows[0].f;
            prop_assert!(f <= f0);
            prop_assert!(x.iter().all(|v| (-1.0..=1.0).contains(v)));
            for w in trace.rows.windows(2) {
                prop_assert!(w[1].best <= w[0].best);
            }
        }
    }

    #[test]
    fn param_set_coding() {
        let p = IcParams {
            qc: [3.0, 0.2, 5.0, 7.0],
            qo: 40.0,
            q: 0.05,
            dol_min: 0.12,
            p: 1.1,
            ..Default::default()
        };
        let full = ParamSet::Full;
        let back = full.decode(&full.encode(&p), &p);
        for (a, b) in full.values(&back).iter().zip(full.values(&p)) {
            assert!((a - b).abs() <= 1e-12 * b.abs());
        }
        assert_eq!(full.names().len(), 8);
        let red = ParamSet::Reduced;
        assert_eq!(red.names().len(), 4);
        let pinned = red.decode(&red.encode(&p), &p);
        assert_eq!(
            (pinned.qo, pinned.qc[2], pinned.qc[3], pinned.dol_min),
            (10.0, 1.0, 1.0, 0.3)
        );
        let (lo, hi) = full.bounds();
        assert!(lo.iter().zip(&hi).all(|(a, b)| a < b));
        assert!(IcParams::default().within_bounds());
        let x0 = red.encode(&red.pin(&IcParams::default()));
        let (lo, hi) = red.bounds();
        assert!((0..4).all(|i| lo[i] <= x0[i] && x0[i] <= hi[i]));
    }

    fn fast() -> IcParams {
        IcParams {
            qc: [1e4, 1.0, 1.0, 1.0],
            q: 0.01,
            p: 0.9,
            ..IcParams::reduced_default()
        }
    }

    #[test]
    fn slice_cost_is_zero_on_own_data() {
        let cond = TaskCondition::new(212.0, 14.1, 4).unwrap();
        let rec = synthetic_recording(&fast(), &PlantSpec::default(), &cond, 4, 0.05, 1.0, 2e-3, 0)
            .unwrap();
        let slices = slice_recording(&rec).unwrap();
        assert_eq!(slices.len(), 2);
        let sd = slice_data(&rec, &slices[0]).unwrap();
        assert_eq!(sd.target.change_steps(rec.dt)[0], SLICE_MARGIN);
        let c = slice_cost(&sd, &PlantSpec::default(), &fast());
        assert!(c < 1e-9, "{c}");
        let worse = slice_cost(&sd, &PlantSpec::default(), &IcParams { p: 1.3, ..fast() });
        assert!(worse > 1e-4);
    }

    #[test]
    fn fits_are_deterministic_and_improve() {
        let cond = TaskCondition::new(212.0, 14.1, 4).unwrap();
        let rec = synthetic_recording(&fast(), &PlantSpec::default(), &cond, 3, 0.05, 0.6, 2e-3, 0)
            .unwrap();
        let slices = slice_recording(&rec).unwrap();
        let sd = slice_data(&rec, &slices[0]).unwrap();
        let opts = GpsOptions {
            max_evals: 60,
            ..Default::default()
        };
        let init = IcParams::reduced_default();
        let a = fit_slice(&sd, &PlantSpec::default(), &init, ParamSet::Reduced, &opts).unwrap();
        let b = fit_slice(&sd, &PlantSpec::default(), &init, ParamSet::Reduced, &opts).unwrap();
        assert_eq!(a, b);
        assert!(a.cost <= slice_cost(&sd, &PlantSpec::default(), &ParamSet::Reduced.pin(&init)));
        assert!(a.params.within_bounds());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("trace.csv");
        a.write_trace_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("eval,f,best,mesh,qc1,qc2,q,p\n"));
        assert_eq!(text.lines().count(), a.trace.evaluations + 1);
    }

    #[test]
    fn second_order_lag_fit_recovers_generator() {
        let cond = TaskCondition::new(212.0, 14.1, 4).unwrap();
        let target = make_target(&cond, vec![0.02, 1.02]).unwrap();
        let dt = 2e-3;
        let n = 1000;
        let sim = simulate_2ol_from(9.0, 0.7, &target, dt, n, Start::AtTarget).unwrap();
        let sd = SliceData {
            slice_id: 0,
            start_position: sim.y[0],
            target,
            data: sim,
        };
        let fit = fit_2ol(&[sd], (5.0, 1.0), &GpsOptions::default()).unwrap();
        assert!(
            (fit.omega - 9.0).abs() < 1e-3 && (fit.zeta - 0.7).abs() < 1e-3,
            "{fit:?}"
        );
    }

    #[test]
    fn bank_from_fits_is_ranked() {
        let mk = |id, cost| FitResult {
            slice_id: id,
            set: ParamSet::Reduced,
            params: IcParams::reduced_default(),
            cost,
            trace: GpsTrace {
                evaluations: 1,
                final_mesh: 0.0,
                stop: StopReason::MeshSize,
                rows: vec![],
            },
        };
        let fits = vec![mk(3, 0.5), mk(1, 0.2), mk(2, 0.2), mk(0, 0.9)];
        let bank = build_bank(&fits, 1e-3, 0.05).unwrap();
        let ids: Vec<usize> = bank.entries.iter().map(|e| e.slice_id).collect();
        assert_eq!(ids, vec![1, 2, 3, 0]);
    }
}
