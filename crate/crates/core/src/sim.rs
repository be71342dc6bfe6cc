//! Closed-loop simulation: target schedules, single-controller runs, the
//! randomly switching controller bank, seeded ensembles and the
//! second-order-lag baseline.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analysis::fitts_id;
use crate::ctrlmath::{discretize, Matrix, StateSpaceModel, Vector};
use crate::error::{Error, Result};
use crate::icore::{design_controller, ic_step, IcController, IcParams, IcRuntime};
use crate::plant::{build_plant, PlantSpec, POS, VEL};

/// Number of controllers kept per condition.
pub const BANK_SIZE: usize = 20;
/// Default simulation step when no recording dictates one.
pub const DEFAULT_DT: f64 = 1e-3;

/// One (distance, width) pair of the reciprocal pointing experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCondition {
    pub distance_mm: f64,
    pub width_mm: f64,
    pub id_nominal: u8,
    pub trial_count: usize,
}

impl TaskCondition {
    /// Builds a condition and checks that its index of difficulty is within
    /// 0.025 bits of one of the nominal levels.
    pub fn new(distance_mm: f64, width_mm: f64, trial_count: usize) -> Result<Self> {
        let id = fitts_id(distance_mm, width_mm)?;
        let nominal = id.round();
        if (id - nominal).abs() > 0.025 || !(1.0..=255.0).contains(&nominal) {
            return Err(Error::InvalidParameter(format!(
                "D = {distance_mm} mm, W = {width_mm} mm gives ID {id:.4}, not an integer level"
            )));
        }
        Ok(Self {
            distance_mm,
            width_mm,
            id_nominal: nominal as u8,
            trial_count,
        })
    }

    /// The eight conditions of the experiment, 80 analysed trials each.
    pub fn experiment() -> Vec<Self> {
        const PAIRS: [(f64, [f64; 4]); 2] = [
            (212.0, [0.83, 3.32, 14.1, 70.6]),
            (353.0, [1.38, 5.54, 23.5, 118.0]),
        ];
        PAIRS
            .iter()
            .flat_map(|(d, ws)| {
                ws.iter()
                    .map(move |w| Self::new(*d, *w, 80).expect("tabulated condition"))
            })
            .collect()
    }

    pub fn id(&self) -> f64 {
        fitts_id(self.distance_mm, self.width_mm).expect("validated at construction")
    }

    pub fn distance_m(&self) -> f64 {
        self.distance_mm * 1e-3
    }
}

/// Piecewise-constant target `w(t)`: `levels[0]` before the first change,
/// `levels[i + 1]` from `change_times[i]` on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetSignal {
    pub change_times: Vec<f64>,
    pub levels: Vec<f64>,
}

impl TargetSignal {
    pub fn new(change_times: Vec<f64>, levels: Vec<f64>) -> Result<Self> {
        if levels.len() != change_times.len() + 1 {
            return Err(Error::dim(
                "TargetSignal",
                format!("{} levels for {} changes", levels.len(), change_times.len()),
            ));
        }
        if change_times.windows(2).any(|p| p[1] <= p[0])
            || change_times.iter().any(|t| !t.is_finite())
        {
            return Err(Error::InvalidParameter(
                "change times must be finite and strictly increasing".into(),
            ));
        }
        if levels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("target levels"));
        }
        Ok(Self {
            change_times,
            levels,
        })
    }

    /// Evenly spaced changes: the first after `lead` seconds, then every `period`.
    pub fn periodic(
        cond: &TaskCondition,
        lead: f64,
        period: f64,
        n_changes: usize,
    ) -> Result<Self> {
        let times = (0..n_changes).map(|i| lead + i as f64 * period).collect();
        make_target(cond, times)
    }

    pub fn value_at(&self, t: f64) -> f64 {
        let idx = self.change_times.partition_point(|&c| c <= t);
        self.levels[idx]
    }

    /// Sample index at which each change takes effect on a grid of step `dt`.
    pub fn change_steps(&self, dt: f64) -> Vec<usize> {
        self.change_times
            .iter()
            .map(|&c| (c / dt - 1e-9).ceil().max(0.0) as usize)
            .collect()
    }

    /// Target sampled on the grid, consistent with [`Self::change_steps`].
    pub fn sample(&self, dt: f64, n: usize) -> Vec<f64> {
        let steps = self.change_steps(dt);
        let mut out = Vec::with_capacity(n);
        let mut seg = 0;
        for k in 0..n {
            while seg < steps.len() && steps[seg] <= k {
                seg += 1;
            }
            out.push(self.levels[seg]);
        }
        out
    }

    /// Time at which the last change has happened.
    pub fn last_change(&self) -> f64 {
        self.change_times.last().copied().unwrap_or(0.0)
    }
}

/// Alternating `∓D/2` target in centred coordinates (metres), starting on the
/// left so the first movement is to the right.
pub fn make_target(cond: &TaskCondition, change_times: Vec<f64>) -> Result<TargetSignal> {
    if change_times.is_empty() {
        return Err(Error::InvalidParameter(
            "target schedule has no changes".into(),
        ));
    }
    let half = cond.distance_m() / 2.0;
    let levels = (0..=change_times.len())
        .map(|i| if i % 2 == 0 { -half } else { half })
        .collect();
    TargetSignal::new(change_times, levels)
}

/// Uniformly sampled closed-loop record.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Trajectory {
    pub dt: f64,
    pub t: Vec<f64>,
    pub w: Vec<f64>,
    pub y: Vec<f64>,
    pub v: Vec<f64>,
    pub a: Vec<f64>,
    pub u: Vec<f64>,
    /// Event times, seconds.
    pub events: Vec<f64>,
    /// Bank index active in each target segment (empty for single runs).
    #[serde(default)]
    pub controllers: Vec<usize>,
}

impl Trajectory {
    fn with_capacity(dt: f64, n: usize) -> Self {
        let v = || Vec::with_capacity(n);
        Self {
            dt,
            t: v(),
            w: v(),
            y: v(),
            v: v(),
            a: v(),
            u: v(),
            events: Vec::new(),
            controllers: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Per-sample event flag.
    pub fn event_flags(&self) -> Vec<bool> {
        let mut flags = vec![false; self.len()];
        for &te in &self.events {
            let k = (te / self.dt).round() as usize;
            if k < flags.len() {
                flags[k] = true;
            }
        }
        flags
    }

    /// Samples `[start, end)` with time and events shifted to start at zero.
    pub fn window(&self, start: usize, end: usize) -> Trajectory {
        let end = end.min(self.len());
        let t0 = start as f64 * self.dt;
        let cut = |v: &Vec<f64>| v[start..end].to_vec();
        Trajectory {
            dt: self.dt,
            t: self.t[start..end].iter().map(|t| t - t0).collect(),
            w: cut(&self.w),
            y: cut(&self.y),
            v: cut(&self.v),
            a: cut(&self.a),
            u: cut(&self.u),
            events: self
                .events
                .iter()
                .filter(|&&te| te >= t0 - 1e-12 && te < end as f64 * self.dt - 1e-12)
                .map(|te| te - t0)
                .collect(),
            controllers: Vec::new(),
        }
    }
}

/// Where the simulated pointer starts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Start {
    /// At rest on the initial target level.
    AtTarget,
    /// At rest at the given position (metres).
    At(f64),
}

/// One entry of a model bank.
#[derive(Debug, Clone)]
pub struct BankEntry {
    pub params: IcParams,
    pub cost: f64,
    pub slice_id: usize,
    pub controller: IcController,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredEntry {
    params: IcParams,
    cost: f64,
    slice_id: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredBank {
    dt: f64,
    nms_time_constant: f64,
    /// True when fewer than the nominal number of controllers were available.
    short: bool,
    entries: Vec<StoredEntry>,
}

/// Ranked controllers for one condition; `entries[0]` is the best fit.
#[derive(Debug, Clone)]
pub struct ModelBank {
    pub entries: Vec<BankEntry>,
    pub dt: f64,
    pub nms_time_constant: f64,
    /// Fewer than [`BANK_SIZE`] controllers were available.
    pub short: bool,
}

impl ModelBank {
    /// Designs the controllers, sorts ascending by cost (ties by slice id)
    /// and keeps at most [`BANK_SIZE`].
    pub fn from_parts(
        parts: Vec<(IcParams, f64, usize)>,
        dt: f64,
        nms_time_constant: f64,
    ) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::InvalidParameter(
                "model bank needs at least one controller".into(),
            ));
        }
        let mut parts = parts;
        parts.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.2.cmp(&b.2)));
        parts.truncate(BANK_SIZE);
        let plant = build_plant(PlantSpec {
            nms_time_constant,
            ..Default::default()
        })?;
        let entries = parts
            .into_iter()
            .map(|(params, cost, slice_id)| {
                let controller = design_controller(&params, &plant, dt)?;
                Ok(BankEntry {
                    params,
                    cost,
                    slice_id,
                    controller,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let short = entries.len() < BANK_SIZE;
        Ok(Self {
            entries,
            dt,
            nms_time_constant,
            short,
        })
    }

    /// A bank holding `n` copies of one controller.
    pub fn uniform(params: &IcParams, n: usize, dt: f64, nms_time_constant: f64) -> Result<Self> {
        Self::from_parts(
            (0..n).map(|i| (params.clone(), 0.0, i)).collect(),
            dt,
            nms_time_constant,
        )
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn controllers(&self) -> Vec<&IcController> {
        self.entries.iter().map(|e| &e.controller).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        let stored = StoredBank {
            dt: self.dt,
            nms_time_constant: self.nms_time_constant,
            short: self.short,
            entries: self
                .entries
                .iter()
                .map(|e| StoredEntry {
                    params: e.params.clone(),
                    cost: e.cost,
                    slice_id: e.slice_id,
                })
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&stored)?)
    }

    /// Rebuilds a bank from [`Self::to_json`] output; controllers are
    /// redesigned from the stored parameters.
    pub fn from_json(s: &str) -> Result<Self> {
        let stored: StoredBank = serde_json::from_str(s)?;
        let parts = stored
            .entries
            .into_iter()
            .map(|e| (e.params, e.cost, e.slice_id))
            .collect();
        Self::from_parts(parts, stored.dt, stored.nms_time_constant)
    }
}

fn step_count(duration: f64, dt: f64) -> Result<usize> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive, got {dt}"
        )));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "duration must be positive, got {duration}"
        )));
    }
    Ok((duration / dt).round() as usize)
}

/// Shared loop for single and switching runs. `pick` is called at every
/// target change with the change index and returns the controller to use.
fn run_loop(
    ctls: &[&IcController],
    plant_spec: &PlantSpec,
    target: &TargetSignal,
    n_steps: usize,
    start: Start,
    seed: u64,
    mut pick: impl FnMut(usize) -> usize,
) -> Result<Trajectory> {
    let first = ctls
        .first()
        .ok_or_else(|| Error::InvalidParameter("no controller".into()))?;
    let dt = first.dt;
    if ctls.iter().any(|c| c.dt != dt) {
        return Err(Error::InvalidParameter(
            "controllers designed for different time steps".into(),
        ));
    }
    if ctls
        .iter()
        .any(|c| dt > c.params.dol_min && c.params.dol_min > 0.0)
    {
        return Err(Error::InvalidParameter(format!(
            "time step {dt} exceeds a controller's minimum open-loop interval"
        )));
    }
    let mut plant = build_plant(PlantSpec {
        mismatch_p: first.params.p,
        ..plant_spec.clone()
    })?;
    let noisy = plant_spec.motor_noise > 0.0 || plant_spec.sensor_noise > 0.0;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seed);
    noise_rng.set_stream(1);

    let w = target.sample(dt, n_steps);
    let x0 = match start {
        Start::AtTarget => w.first().copied().unwrap_or(target.levels[0]),
        Start::At(p) => p,
    };
    plant.reset_at_rest(x0);
    let mut active = 0usize;
    let mut rt = IcRuntime::new(
        ctls[active],
        plant.state(),
        w.first().copied().unwrap_or(x0),
    )?;
    let changes = target.change_steps(dt);
    let mut next_change = 0;
    let mut traj = Trajectory::with_capacity(dt, n_steps);

    for (k, &wk) in w.iter().enumerate() {
        while next_change < changes.len() && changes[next_change] <= k {
            let idx = pick(next_change);
            let ctl = ctls.get(idx).ok_or_else(|| {
                Error::InvalidParameter(format!("controller index {idx} out of range"))
            })?;
            if idx != active {
                active = idx;
                rt.adopt(ctl)?;
                plant.set_mismatch(ctl.params.p)?;
            }
            traj.controllers.push(idx);
            next_change += 1;
        }
        let ctl = ctls[active];
        let x = plant.state().clone();
        let rng = if noisy { Some(&mut noise_rng) } else { None };
        let out = ic_step(ctl, &mut rt, &mut plant, wk, rng)?;
        traj.t.push(k as f64 * dt);
        traj.w.push(wk);
        traj.y.push(x[POS]);
        traj.v.push(x[VEL]);
        traj.a.push((plant.true_model().a().row(VEL) * &x)[0]);
        traj.u.push(out.u);
    }
    traj.events = rt.events;
    Ok(traj)
}

/// Single-controller run over `duration` seconds on the controller's grid.
pub fn simulate_ic(
    ctl: &IcController,
    plant_spec: &PlantSpec,
    target: &TargetSignal,
    duration: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate_ic_from(
        ctl,
        plant_spec,
        target,
        step_count(duration, ctl.dt)?,
        Start::AtTarget,
        seed,
    )
}

/// As [`simulate_ic`] with an explicit sample count and start position.
pub fn simulate_ic_from(
    ctl: &IcController,
    plant_spec: &PlantSpec,
    target: &TargetSignal,
    n_steps: usize,
    start: Start,
    seed: u64,
) -> Result<Trajectory> {
    let mut traj = run_loop(&[ctl], plant_spec, target, n_steps, start, seed, |_| 0)?;
    traj.controllers.clear();
    Ok(traj)
}

/// Controller index sequence used by [`simulate_bank`]: the best controller
/// for the first trial, then a uniformly drawn one at every later change.
pub fn switching_sequence(bank_len: usize, n_changes: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_changes)
        .map(|i| {
            if i == 0 {
                0
            } else {
                rng.random_range(0..bank_len)
            }
        })
        .collect()
}

/// Switching simulation: observer, hold and plant state carry over when the
/// active controller changes.
pub fn simulate_bank(
    bank: &ModelBank,
    plant_spec: &PlantSpec,
    target: &TargetSignal,
    duration: f64,
    seed: u64,
) -> Result<Trajectory> {
    simulate_bank_from(
        bank,
        plant_spec,
        target,
        step_count(duration, bank.dt)?,
        Start::AtTarget,
        seed,
    )
}

pub fn simulate_bank_from(
    bank: &ModelBank,
    plant_spec: &PlantSpec,
    target: &TargetSignal,
    n_steps: usize,
    start: Start,
    seed: u64,
) -> Result<Trajectory> {
    if bank.is_empty() {
        return Err(Error::InvalidParameter("empty model bank".into()));
    }
    let seq = switching_sequence(bank.len(), target.change_times.len(), seed);
    run_loop(
        &bank.controllers(),
        plant_spec,
        target,
        n_steps,
        start,
        seed,
        |i| seq[i],
    )
}

/// Per-run seeds derived from a master seed.
pub fn derive_seeds(master: u64, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(master);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// `n_runs` independent switching simulations, run in parallel and returned
/// in run order.
pub fn run_ensemble(
    bank: &ModelBank,
    plant_spec: &PlantSpec,
    target: &TargetSignal,
    duration: f64,
    n_runs: usize,
    seed: u64,
) -> Result<Vec<Trajectory>> {
    if n_runs == 0 {
        return Err(Error::InvalidParameter(
            "ensemble needs at least one run".into(),
        ));
    }
    derive_seeds(seed, n_runs)
        .into_par_iter()
        .map(|s| simulate_bank(bank, plant_spec, target, duration, s))
        .collect()
}

/// Continuous second-order lag `ÿ = ω²(w − y) − 2ζω ẏ`, integrated exactly
/// under a piecewise-constant target. `u` records the commanded acceleration.
pub fn simulate_2ol(
    omega: f64,
    zeta: f64,
    target: &TargetSignal,
    dt: f64,
    duration: f64,
) -> Result<Trajectory> {
    simulate_2ol_from(
        omega,
        zeta,
        target,
        dt,
        step_count(duration, dt)?,
        Start::AtTarget,
    )
}

pub fn simulate_2ol_from(
    omega: f64,
    zeta: f64,
    target: &TargetSignal,
    dt: f64,
    n_steps: usize,
    start: Start,
) -> Result<Trajectory> {
    if !(omega > 0.0 && omega.is_finite() && zeta > 0.0 && zeta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "second-order lag needs ω > 0 and ζ > 0, got ω = {omega}, ζ = {zeta}"
        )));
    }
    let w2 = omega * omega;
    let sys = StateSpaceModel::new(
        Matrix::from_row_slice(2, 2, &[0.0, 1.0, -w2, -2.0 * zeta * omega]),
        Matrix::from_row_slice(2, 1, &[0.0, w2]),
        Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
    )?;
    let (ad, bd) = discretize(&sys, dt)?;
    let w = target.sample(dt, n_steps);
    let x0 = match start {
        Start::AtTarget => w.first().copied().unwrap_or(target.levels[0]),
        Start::At(p) => p,
    };
    let mut x = Vector::from_row_slice(&[x0, 0.0]);
    let mut traj = Trajectory::with_capacity(dt, n_steps);
    for (k, &wk) in w.iter().enumerate() {
        let acc = w2 * (wk - x[0]) - 2.0 * zeta * omega * x[1];
        traj.t.push(k as f64 * dt);
        traj.w.push(wk);
        traj.y.push(x[0]);
        traj.v.push(x[1]);
        traj.a.push(acc);
        traj.u.push(acc);
        x = &ad * &x + bd.column(0) * wk;
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cond212() -> TaskCondition {
        TaskCondition::new(212.0, 70.6, 80).unwrap()
    }

    fn fast_params() -> IcParams {
        IcParams {
            qc: [1e4, 1.0, 1.0, 1.0],
            p: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn experiment_conditions_have_nominal_ids() {
        let conds = TaskCondition::experiment();
        assert_eq!(conds.len(), 8);
        let ids: Vec<u8> = conds.iter().map(|c| c.id_nominal).collect();
        assert_eq!(ids, vec![8, 6, 4, 2, 8, 6, 4, 2]);
        assert!(TaskCondition::new(212.0, 50.0, 10).is_err());
    }

    #[test]
    fn target_levels_alternate() {
        let t = make_target(&cond212(), vec![0.5, 1.5]).unwrap();
        assert_eq!(t.levels, vec![-0.106, 0.106, -0.106]);
        assert_eq!(t.value_at(0.0), -0.106);
        assert_eq!(t.value_at(0.5), 0.106);
        assert_eq!(t.value_at(1.49), 0.106);
        assert_eq!(t.value_at(2.0), -0.106);
        let one = make_target(&cond212(), vec![0.2]).unwrap();
        let s = one.sample(0.1, 5);
        assert_eq!(s.iter().filter(|&&v| v > 0.0).count(), 3);
        assert!(make_target(&cond212(), vec![]).is_err());
        assert!(TargetSignal::new(vec![1.0, 1.0], vec![0.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn sample_agrees_with_change_steps() {
        let t = TargetSignal::periodic(&cond212(), 0.1, 0.7, 5).unwrap();
        let dt = 1e-3;
        let s = t.sample(dt, 4000);
        for &c in &t.change_steps(dt) {
            assert_ne!(s[c], s[c - 1]);
        }
    }

    #[test]
    fn rest_on_target_stays_quiet() {
        let spec = PlantSpec::default();
        let ctl =
            design_controller(&fast_params(), &build_plant(spec.clone()).unwrap(), 1e-3).unwrap();
        let target = TargetSignal::new(vec![], vec![0.05]).unwrap();
        let traj = simulate_ic(&ctl, &spec, &target, 2.0, 0).unwrap();
        assert!(traj.events.len() <= 1);
        assert!(traj.u.iter().all(|u| u.abs() < 1e-12));
        assert!(traj.y.iter().all(|y| (y - 0.05).abs() < 1e-15));
    }

    #[test]
    fn step_settles_and_is_reproducible() {
        let spec = PlantSpec::default();
        let ctl =
            design_controller(&fast_params(), &build_plant(spec.clone()).unwrap(), 1e-3).unwrap();
        let target = make_target(&cond212(), vec![0.1]).unwrap();
        let a = simulate_ic(&ctl, &spec, &target, 6.0, 9).unwrap();
        let b = simulate_ic(&ctl, &spec, &target, 6.0, 9).unwrap();
        assert_eq!(a, b);
        assert!((a.y.last().unwrap() - 0.106).abs() < 1e-6);
        assert!(!a.events.is_empty() && a.events.len() < 10);
        assert_eq!(a.len(), 6000);
    }

    #[test]
    fn identical_bank_matches_single_controller() {
        let spec = PlantSpec::default();
        let p = IcParams::default();
        let bank = ModelBank::uniform(&p, 20, 1e-3, 0.05).unwrap();
        let target = TargetSignal::periodic(&cond212(), 0.1, 0.8, 6).unwrap();
        let single = simulate_ic(&bank.entries[0].controller, &spec, &target, 5.0, 3).unwrap();
        let switched = simulate_bank(&bank, &spec, &target, 5.0, 3).unwrap();
        assert_eq!(single.y, switched.y);
        assert_eq!(single.events, switched.events);
        assert_eq!(switched.controllers.len(), 6);
        assert_eq!(switched.controllers[0], 0);
    }

    #[test]
    fn switching_sequence_is_seeded_and_roughly_uniform() {
        assert_eq!(switching_sequence(20, 50, 4), switching_sequence(20, 50, 4));
        assert_ne!(switching_sequence(20, 50, 4), switching_sequence(20, 50, 5));
        let mut counts = [0usize; 20];
        for s in derive_seeds(1, 200) {
            for i in switching_sequence(20, 11, s).into_iter().skip(1) {
                counts[i] += 1;
            }
        }
        let n: usize = counts.iter().sum();
        let e = n as f64 / 20.0;
        let chi2: f64 = counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum();
        // 99th percentile of χ² with 19 degrees of freedom.
        assert!(chi2 < 36.19, "chi2 {chi2}");
    }

    #[test]
    fn bank_sorts_and_roundtrips() {
        let mk = |q: f64| IcParams {
            q,
            ..Default::default()
        };
        let bank = ModelBank::from_parts(
            vec![(mk(0.03), 2.0, 0), (mk(0.02), 1.0, 5), (mk(0.04), 1.0, 3)],
            1e-3,
            0.05,
        )
        .unwrap();
        let order: Vec<usize> = bank.entries.iter().map(|e| e.slice_id).collect();
        assert_eq!(order, vec![3, 5, 0]);
        assert!(bank.short);
        let json = bank.to_json().unwrap();
        let back = ModelBank::from_json(&json).unwrap();
        assert_eq!(back.to_json().unwrap(), json);
        for (a, b) in bank.entries.iter().zip(&back.entries) {
            assert_eq!(a.params, b.params);
            assert_eq!(a.cost.to_bits(), b.cost.to_bits());
        }
        assert!(ModelBank::from_parts(vec![], 1e-3, 0.05).is_err());
    }

    #[test]
    fn second_order_lag_shapes() {
        let cond = cond212();
        let target = make_target(&cond, vec![0.5]).unwrap();
        let crit = simulate_2ol(10.0, 1.0, &target, 1e-3, 3.0).unwrap();
        let max = crit.y.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max <= 0.106 + 1e-12);
        assert!((crit.y.last().unwrap() - 0.106).abs() < 1e-6);
        let under = simulate_2ol(10.0, 0.5, &target, 1e-3, 3.0).unwrap();
        let peak = under.y.iter().cloned().fold(f64::MIN, f64::max);
        let overshoot = (peak - 0.106) / 0.212;
        let expected = (-std::f64::consts::PI * 0.5 / (1.0f64 - 0.25).sqrt()).exp();
        assert!(
            (overshoot - expected).abs() < 1e-3,
            "{overshoot} vs {expected}"
        );
        assert!(simulate_2ol(0.0, 1.0, &target, 1e-3, 1.0).is_err());
    }

    #[test]
    fn ensemble_is_reproducible() {
        let spec = PlantSpec::default();
        let parts = (0..5)
            .map(|i| {
                (
                    IcParams {
                        q: 0.01 + 0.01 * i as f64,
                        p: 0.85 + 0.05 * i as f64,
                        ..Default::default()
                    },
                    i as f64,
                    i,
                )
            })
            .collect();
        let bank = ModelBank::from_parts(parts, 1e-3, 0.05).unwrap();
        let target = TargetSignal::periodic(&cond212(), 0.1, 0.8, 6).unwrap();
        let a = run_ensemble(&bank, &spec, &target, 5.0, 8, 42).unwrap();
        let b = run_ensemble(&bank, &spec, &target, 5.0, 8, 42).unwrap();
        assert_eq!(a, b);
        let one = run_ensemble(&bank, &spec, &target, 5.0, 1, 42).unwrap();
        assert_eq!(
            one[0],
            simulate_bank(&bank, &spec, &target, 5.0, derive_seeds(42, 1)[0]).unwrap()
        );
        assert!(a.iter().any(|t| t.y != a[0].y));
    }
}
