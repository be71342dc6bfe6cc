//! The intermittent controller: observer, target folding, system-matched
//! hold, delay-compensating predictor and the event trigger.
//!
//! The controller is simulated on a fixed sample grid `dt`. The loop delay
//! `t_d` is realised as a measurement delay of `round(t_d / dt)` samples:
//! the observer reconstructs the delayed state and the predictor carries it
//! forward to the present before the hold is reset.

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::ctrlmath::{
    discretize, expm, lqr_gain, observer_gain, spectral_abscissa, steady_state, zoh_integral,
    Matrix, StateSpaceModel, Vector,
};
use crate::error::{Error, Result};
use crate::plant::{Plant, MISMATCH_BOUNDS, POS};

pub const QO_BOUNDS: (f64, f64) = (1e-5, 1e5);
pub const QC_BOUNDS: (f64, f64) = (1e-5, 1e5);
pub const Q_BOUNDS: (f64, f64) = (0.001, 1.0);
pub const DOL_MIN_BOUNDS: (f64, f64) = (0.03, 1.0);
pub const P_BOUNDS: (f64, f64) = MISMATCH_BOUNDS;

/// Relative slack used when converting durations to whole samples.
const STEP_EPS: f64 = 1e-9;

/// Identifiable parameters plus the constants that stay fixed during fitting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IcParams {
    /// Diagonal of the LQR state weight.
    pub qc: [f64; 4],
    /// Scalar observer design weight (expanded to `qo·I`).
    pub qo: f64,
    /// Position threshold of the event trigger, metres.
    pub q: f64,
    /// Minimum open-loop interval, seconds.
    pub dol_min: f64,
    /// Mismatch gain between intended and delivered mechanics input.
    pub p: f64,
    /// Loop delay compensated by the predictor, seconds.
    pub t_d: f64,
    /// LQR control weight.
    pub rc: f64,
    /// Sampling delay between an event and the state sample, seconds.
    pub ds: f64,
    /// Cost weight on the position RMSE.
    pub cp: f64,
    /// Cost weight on the velocity RMSE.
    pub cv: f64,
    /// Augment the observer with a constant input-disturbance state.
    #[serde(default)]
    pub disturbance_observer: bool,
}

impl Default for IcParams {
    /// The common starting point used for every fit.
    fn default() -> Self {
        Self {
            qc: [1.0; 4],
            qo: 10.0,
            q: 0.03,
            dol_min: 0.05,
            p: 0.9,
            t_d: 0.01,
            rc: 1.0,
            ds: 0.0,
            cp: 0.5,
            cv: 0.5,
            disturbance_observer: false,
        }
    }
}

impl IcParams {
    /// Starting point of the reduced search: `Qo`, `Qc3`, `Qc4` and the
    /// minimum open-loop interval are pinned.
    pub fn reduced_default() -> Self {
        Self {
            dol_min: 0.3,
            ..Self::default()
        }
    }

    pub fn mismatch_gain(&self) -> f64 {
        1.0 - self.p
    }

    /// Structural validity: what design and simulation need to work at all.
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str, v: f64| Err(Error::InvalidParameter(format!("{what} = {v}")));
        for (i, &v) in self.qc.iter().enumerate() {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("Qc[{i}]"), v);
            }
        }
        if !(self.qo > 0.0 && self.qo.is_finite()) {
            return bad("Qo", self.qo);
        }
        if !(self.q > 0.0 && self.q.is_finite()) {
            return bad("q", self.q);
        }
        if !(self.dol_min >= 0.0 && self.dol_min.is_finite()) {
            return bad("dol_min", self.dol_min);
        }
        if !(MISMATCH_BOUNDS.0..=MISMATCH_BOUNDS.1).contains(&self.p) {
            return bad("p", self.p);
        }
        if !(self.t_d >= 0.0 && self.t_d.is_finite()) {
            return bad("t_d", self.t_d);
        }
        if !(self.rc > 0.0 && self.rc.is_finite()) {
            return bad("Rc", self.rc);
        }
        if !(self.ds >= 0.0 && self.ds.is_finite()) {
            return bad("ds", self.ds);
        }
        if !(self.cp >= 0.0 && self.cv >= 0.0) {
            return Err(Error::InvalidParameter(
                "cost weights must be non-negative".into(),
            ));
        }
        Ok(())
    }

    /// Whether every optimised quantity lies inside the search bounds.
    pub fn within_bounds(&self) -> bool {
        let inside = |v: f64, (lo, hi): (f64, f64)| (lo..=hi).contains(&v);
        self.qc.iter().all(|&v| inside(v, QC_BOUNDS))
            && inside(self.qo, QO_BOUNDS)
            && inside(self.q, Q_BOUNDS)
            && inside(self.dol_min, DOL_MIN_BOUNDS)
            && inside(self.p, P_BOUNDS)
    }
}

/// How the hold is propagated between samples.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HoldMode {
    /// `Ad − Bd K`: the hold reproduces the sampled closed loop exactly, so a
    /// perfectly predicted hold never drifts from the plant.
    #[default]
    Matched,
    /// `e^{A_c dt}`: the continuous hold sampled on the grid.
    Exact,
}

/// Designed artefacts of one intermittent controller at a given sample time.
#[derive(Debug, Clone)]
pub struct IcController {
    pub params: IcParams,
    pub dt: f64,
    pub hold_mode: HoldMode,
    pub k: Matrix,
    /// Observer gain; 5 rows when the disturbance state is enabled.
    pub l: Matrix,
    pub a_c: Matrix,
    pub e_pp: Matrix,
    pub e_ph: Matrix,
    pub x_ss: Vector,
    pub u_ss: f64,
    /// Reference gain `u_ss + K x_ss`.
    pub r: f64,
    pub qt: Matrix,
    pub k_h: Matrix,
    /// Loop delay in samples.
    pub delay_steps: usize,
    pub ds_steps: usize,
    /// Largest open-loop duration in samples that is still refractory.
    pub refractory_steps: u64,
    ad: Matrix,
    bd: Vector,
    phi_h: Matrix,
    obs_ad: Matrix,
    obs_bd: Vector,
    obs_gl: Vector,
    obs_c: Matrix,
    ed_pp: Matrix,
    ed_ph: Matrix,
}

pub fn design_controller(params: &IcParams, plant: &Plant, dt: f64) -> Result<IcController> {
    design_controller_with(params, plant, dt, HoldMode::Matched)
}

pub fn design_controller_with(
    params: &IcParams,
    plant: &Plant,
    dt: f64,
    hold_mode: HoldMode,
) -> Result<IcController> {
    params.validate()?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "time step must be positive, got {dt}"
        )));
    }
    let model = plant.design_model();
    let n = model.n_states();
    if n != params.qc.len() {
        return Err(Error::dim(
            "design_controller",
            format!("plant has {n} states, Qc has 4"),
        ));
    }
    let qc = Matrix::from_diagonal(&Vector::from_row_slice(&params.qc));
    let rc = Matrix::from_element(1, 1, params.rc);
    let lqr = lqr_gain(model, &qc, &rc)?;
    let k = lqr.k;
    let a_c = model.a() - model.b() * &k;

    let mut c_hat = Matrix::zeros(1, n);
    c_hat[(0, POS)] = 1.0;
    let obs_model = if params.disturbance_observer {
        let mut a = Matrix::zeros(n + 1, n + 1);
        a.view_mut((0, 0), (n, n)).copy_from(model.a());
        a.view_mut((0, n), (n, 1)).copy_from(model.b());
        let mut b = Matrix::zeros(n + 1, 1);
        b.view_mut((0, 0), (n, 1)).copy_from(model.b());
        let mut c = Matrix::zeros(1, n + 1);
        c[(0, POS)] = 1.0;
        StateSpaceModel::new(a, b, c)?
    } else {
        StateSpaceModel::new(model.a().clone(), model.b().clone(), c_hat.clone())?
    };
    let l = observer_gain(
        &obs_model,
        obs_model.c(),
        params.qo,
        &Matrix::identity(1, 1),
    )?;

    let (x_ss, u_ss) = steady_state(model)?;
    let u_ss = u_ss[0];
    let r = u_ss + (&k * &x_ss)[0];

    let mut a_ph = Matrix::zeros(2 * n, 2 * n);
    a_ph.view_mut((0, 0), (n, n)).copy_from(model.a());
    a_ph.view_mut((0, n), (n, n))
        .copy_from(&(-(model.b() * &k)));
    a_ph.view_mut((n, n), (n, n)).copy_from(&a_c);
    let e = expm(&a_ph, params.t_d)?;
    let e_pp = e.view((0, 0), (n, n)).into_owned();
    let e_ph = e.view((0, n), (n, n)).into_owned();

    let mut qt = Matrix::zeros(n, n);
    qt[(POS, POS)] = 1.0 / (params.q * params.q);

    let (ad, bd) = discretize(model, dt)?;
    let bd = bd.column(0).into_owned();
    let phi_h = match hold_mode {
        HoldMode::Matched => &ad - &bd * &k,
        HoldMode::Exact => expm(&a_c, dt)?,
    };
    let (obs_ad, obs_bd) = discretize(&obs_model, dt)?;
    let obs_bd = obs_bd.column(0).into_owned();
    let obs_gl = (zoh_integral(obs_model.a(), dt)? * &l)
        .column(0)
        .into_owned();
    let err_dyn = &obs_ad - &obs_gl * obs_model.c();
    let rho = err_dyn
        .complex_eigenvalues()
        .iter()
        .map(|z| z.norm())
        .fold(0.0, f64::max);
    if rho >= 1.0 {
        return Err(Error::Design(format!(
            "sampled observer is unstable at dt = {dt} (spectral radius {rho:.4})"
        )));
    }

    let delay_steps = steps_of(params.t_d, dt);
    let mut m = Matrix::zeros(2 * n, 2 * n);
    m.view_mut((0, 0), (n, n)).copy_from(&ad);
    m.view_mut((0, n), (n, n)).copy_from(&(-(&bd * &k)));
    m.view_mut((n, n), (n, n)).copy_from(&phi_h);
    let mut md = Matrix::identity(2 * n, 2 * n);
    for _ in 0..delay_steps {
        md = &m * md;
    }
    let ed_pp = md.view((0, 0), (n, n)).into_owned();
    let ed_ph = md.view((0, n), (n, n)).into_owned();

    if spectral_abscissa(&a_c)? >= 0.0 {
        return Err(Error::Design("closed loop A − BK is not Hurwitz".into()));
    }

    Ok(IcController {
        params: params.clone(),
        dt,
        hold_mode,
        k,
        l,
        a_c,
        e_pp,
        e_ph,
        x_ss,
        u_ss,
        r,
        qt,
        k_h: Matrix::identity(n, n),
        delay_steps,
        ds_steps: steps_of(params.ds, dt),
        refractory_steps: (params.dol_min / dt + STEP_EPS).floor() as u64,
        ad,
        bd,
        phi_h,
        obs_ad,
        obs_bd,
        obs_gl,
        obs_c: obs_model.c().clone(),
        ed_pp,
        ed_ph,
    })
}

fn steps_of(duration: f64, dt: f64) -> usize {
    (duration / dt).round() as usize
}

impl IcController {
    pub fn n_states(&self) -> usize {
        self.k.ncols()
    }

    pub fn n_observer_states(&self) -> usize {
        self.l.nrows()
    }

    /// One-sample transition of the hold.
    pub fn hold_transition(&self) -> &Matrix {
        &self.phi_h
    }

    /// Sampled-data predictor partitions over `delay_steps` samples. They
    /// converge to `(e_pp, e_ph)` as `dt → 0`.
    pub fn sampled_predictor(&self) -> (&Matrix, &Matrix) {
        (&self.ed_pp, &self.ed_ph)
    }

    /// Sampled plant model the controller was designed against.
    pub fn sampled_model(&self) -> (&Matrix, &Vector) {
        (&self.ad, &self.bd)
    }

    /// Trigger quadratic form `eᵀ Qt e`.
    pub fn trigger_level(&self, e: &Vector) -> f64 {
        (e.transpose() * &self.qt * e)[0]
    }
}

/// `x_w = x̂ − x_ss w`, using the first `x_ss.len()` entries of `x_hat`.
pub fn form_xw(x_hat: &Vector, w: f64, x_ss: &Vector) -> Vector {
    x_hat.rows(0, x_ss.len()) - x_ss * w
}

/// Delay-compensated prediction `E_pp x_w + E_ph x_h` with the continuous
/// predictor partitions.
pub fn predict(ctl: &IcController, x_w: &Vector, x_h: &Vector) -> Vector {
    &ctl.e_pp * x_w + &ctl.e_ph * x_h
}

/// One sampled update of the observer from `x̂_k` to `x̂_{k+1}` given the
/// commanded input and the measured position over the sample.
///
/// The correction is integrated with the plant's own input integral, so an
/// observer started on the true state of an exactly modelled plant stays on it.
pub fn observer_step(ctl: &IcController, x_hat: &Vector, u: f64, y: f64) -> Result<Vector> {
    if !u.is_finite() || !y.is_finite() {
        return Err(Error::NonFinite("observer input"));
    }
    let innovation = y - (&ctl.obs_c * x_hat)[0];
    Ok(&ctl.obs_ad * x_hat + &ctl.obs_bd * u + &ctl.obs_gl * innovation)
}

/// Per-simulation mutable state of the intermittent loop.
#[derive(Debug, Clone)]
pub struct IcRuntime {
    /// Observer estimate of the delayed state `x(t − t_d)`.
    pub x_hat: Vector,
    pub x_w: Vector,
    pub x_h: Vector,
    /// Samples since the last event; `None` before the first one.
    pub tau_steps: Option<u64>,
    /// Event times, seconds.
    pub events: Vec<f64>,
    /// Time at which the most recent state sample was taken.
    pub last_sample_time: Option<f64>,
    /// Sample counter.
    pub step: u64,
    hold_history: VecDeque<Vector>,
    io_queue: VecDeque<(f64, f64)>,
    pending_sample: Option<usize>,
}

impl IcRuntime {
    /// Runtime for a plant resting in `plant_state` with target `w0`; the
    /// observer starts on the plant state and the hold on `x_w`.
    pub fn new(ctl: &IcController, plant_state: &Vector, w0: f64) -> Result<Self> {
        let n = ctl.n_states();
        if plant_state.len() != n {
            return Err(Error::dim(
                "IcRuntime::new",
                format!("expected {n} plant states"),
            ));
        }
        let mut x_hat = Vector::zeros(ctl.n_observer_states());
        x_hat.rows_mut(0, n).copy_from(plant_state);
        let x_w = form_xw(&x_hat, w0, &ctl.x_ss);
        let y0 = plant_state[POS];
        let u0 = ctl.u_ss * w0;
        Ok(Self {
            x_hat,
            x_h: x_w.clone(),
            hold_history: std::iter::repeat_n(x_w.clone(), ctl.delay_steps).collect(),
            x_w,
            tau_steps: None,
            events: Vec::new(),
            last_sample_time: None,
            step: 0,
            io_queue: std::iter::repeat_n((u0, y0), ctl.delay_steps).collect(),
            pending_sample: None,
        })
    }

    /// Open-loop time since the last event, seconds (infinite before any).
    pub fn tau(&self, dt: f64) -> f64 {
        self.tau_steps.map_or(f64::INFINITY, |s| s as f64 * dt)
    }

    /// Hold state `t_d` ago, which is what the delayed estimate is compared to.
    pub fn delayed_hold(&self) -> &Vector {
        self.hold_history.front().unwrap_or(&self.x_h)
    }

    /// Prepares the runtime to continue under a different controller. Buffers
    /// are resized when the loop delay differs; the observer layout must match.
    pub fn adopt(&mut self, ctl: &IcController) -> Result<()> {
        if self.x_hat.len() != ctl.n_observer_states() {
            return Err(Error::dim(
                "IcRuntime::adopt",
                "controllers in one simulation must share the observer layout".to_string(),
            ));
        }
        while self.hold_history.len() > ctl.delay_steps {
            self.hold_history.pop_front();
        }
        while self.hold_history.len() < ctl.delay_steps {
            let front = self.delayed_hold().clone();
            self.hold_history.push_front(front);
        }
        // Feeding the oldest pending samples keeps the estimate aligned with
        // the new delay; a longer delay replays the oldest known sample.
        while self.io_queue.len() > ctl.delay_steps {
            let (u, y) = self.io_queue.pop_front().expect("non-empty");
            self.x_hat = observer_step(ctl, &self.x_hat, u, y)?;
        }
        while self.io_queue.len() < ctl.delay_steps {
            let front = self
                .io_queue
                .front()
                .copied()
                .unwrap_or((0.0, (&ctl.obs_c * &self.x_hat)[0]));
            self.io_queue.push_front(front);
        }
        Ok(())
    }
}

/// Advances the hold one sample and counts open-loop time.
pub fn hold_step(ctl: &IcController, rt: &mut IcRuntime) {
    rt.hold_history.push_back(rt.x_h.clone());
    while rt.hold_history.len() > ctl.delay_steps {
        rt.hold_history.pop_front();
    }
    rt.x_h = &ctl.phi_h * &rt.x_h;
    rt.tau_steps = rt.tau_steps.map(|s| s + 1);
}

/// Event test: the quadratic error exceeds 1 and the refractory period is over.
pub fn trigger_check(ctl: &IcController, rt: &IcRuntime) -> bool {
    if rt.pending_sample.is_some() {
        return false;
    }
    if let Some(s) = rt.tau_steps {
        if s <= ctl.refractory_steps {
            return false;
        }
    }
    let e = rt.delayed_hold() - &rt.x_w;
    ctl.trigger_level(&e) > 1.0
}

/// Resets the hold to `K_h x_p` at a state sample taken at time `t`.
pub fn reset_hold(ctl: &IcController, rt: &mut IcRuntime, x_p: &Vector, t: f64) {
    rt.x_h = &ctl.k_h * x_p;
    rt.last_sample_time = Some(t);
}

/// Records an event at time `t` and restarts the open-loop clock.
fn log_event(rt: &mut IcRuntime, t: f64) {
    rt.events.push(t);
    rt.tau_steps = Some(0);
}

/// Hold-driven control `u = −K x_h + u_ss w`, minus the disturbance estimate
/// when the observer carries one.
pub fn control_output(ctl: &IcController, rt: &IcRuntime, w: f64) -> f64 {
    let mut u = -(&ctl.k * &rt.x_h)[0] + ctl.u_ss * w;
    if ctl.params.disturbance_observer {
        u -= rt.x_hat[ctl.n_states()];
    }
    u
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    /// Commanded control.
    pub u: f64,
    /// Measured position at the start of the step.
    pub y: f64,
    pub event: bool,
    /// `eᵀ Qt e` evaluated by the trigger this step.
    pub trigger_level: f64,
}

/// One sample of the closed intermittent loop: measure, fold in the target,
/// test the trigger, sample/predict/reset on an event, emit the hold control,
/// drive the plant and advance the observer and hold.
pub fn ic_step<R: Rng + ?Sized>(
    ctl: &IcController,
    rt: &mut IcRuntime,
    plant: &mut Plant,
    w: f64,
    mut rng: Option<&mut R>,
) -> Result<StepOutput> {
    let dt = ctl.dt;
    let t = rt.step as f64 * dt;
    let y = plant.measure(rng.as_deref_mut());
    rt.x_w = form_xw(&rt.x_hat, w, &ctl.x_ss);
    let level = ctl.trigger_level(&(rt.delayed_hold() - &rt.x_w));

    let mut event = false;
    let mut sample_now = false;
    match rt.pending_sample {
        Some(0) => sample_now = true,
        Some(r) => rt.pending_sample = Some(r - 1),
        None => {
            if trigger_check(ctl, rt) {
                event = true;
                log_event(rt, t);
                if ctl.ds_steps == 0 {
                    sample_now = true;
                } else {
                    rt.pending_sample = Some(ctl.ds_steps - 1);
                }
            }
        }
    }
    if sample_now {
        rt.pending_sample = None;
        let x_p = &ctl.ed_pp * &rt.x_w + &ctl.ed_ph * rt.delayed_hold();
        reset_hold(ctl, rt, &x_p, t);
    }

    let u = control_output(ctl, rt, w);
    plant.advance(u, dt, rng)?;

    rt.io_queue.push_back((u, y));
    while rt.io_queue.len() > ctl.delay_steps {
        let (uj, yj) = rt.io_queue.pop_front().expect("non-empty");
        rt.x_hat = observer_step(ctl, &rt.x_hat, uj, yj)?;
    }
    hold_step(ctl, rt);
    rt.step += 1;

    if !rt.x_hat.iter().all(|v| v.is_finite()) || !plant.state().iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("intermittent loop state"));
    }
    Ok(StepOutput {
        u,
        y,
        event,
        trigger_level: level,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{build_plant, PlantSpec};
    use rand_chacha::ChaCha8Rng;

    type NoRng = Option<&'static mut ChaCha8Rng>;

    fn plant(p: f64) -> Plant {
        build_plant(PlantSpec {
            mismatch_p: p,
            ..Default::default()
        })
        .unwrap()
    }

    fn params(t_d: f64) -> IcParams {
        IcParams {
            t_d,
            p: 1.0,
            ..Default::default()
        }
    }

    #[test]
    fn zero_delay_predictor_is_identity() {
        let c = design_controller(&params(0.0), &plant(1.0), 1e-3).unwrap();
        assert_eq!(c.e_pp, Matrix::identity(4, 4));
        assert_eq!(c.e_ph, Matrix::zeros(4, 4));
        let (dpp, dph) = c.sampled_predictor();
        assert_eq!(dpp, &Matrix::identity(4, 4));
        assert_eq!(dph, &Matrix::zeros(4, 4));
        let xw = Vector::from_row_slice(&[0.1, -0.2, 0.3, 0.05]);
        let xh = Vector::from_row_slice(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(predict(&c, &xw, &xh), xw);
    }

    #[test]
    fn default_design_is_stable_with_position_only_trigger() {
        let c = design_controller(&IcParams::default(), &plant(0.9), 1e-3).unwrap();
        assert!(spectral_abscissa(&c.a_c).unwrap() < 0.0);
        assert!((c.qt[(0, 0)] - 1.0 / 0.03f64.powi(2)).abs() < 1e-9);
        assert!((c.qt[(0, 0)] - 1111.111).abs() < 1e-3);
        let mut off = c.qt.clone();
        off[(0, 0)] = 0.0;
        assert_eq!(off.norm(), 0.0);
        assert_eq!(c.k_h, Matrix::identity(4, 4));
        assert_eq!(c.delay_steps, 10);
        assert_eq!(c.refractory_steps, 50);
        // Unit steady state on position with zero input for this plant.
        assert!((c.x_ss[0] - 1.0).abs() < 1e-12);
        assert!(c.u_ss.abs() < 1e-12);
        assert!((c.r - c.k[(0, 0)]).abs() < 1e-9);
    }

    #[test]
    fn predictor_linearity() {
        let c = design_controller(&params(0.01), &plant(1.0), 1e-3).unwrap();
        let x = Vector::from_row_slice(&[0.05, 0.3, -0.2, 0.1]);
        let lhs = predict(&c, &x, &x);
        let rhs = (&c.e_pp + &c.e_ph) * &x;
        assert!((lhs - rhs).norm() < 1e-14);
    }

    #[test]
    fn sampled_predictor_converges_to_continuous() {
        let mut errs = Vec::new();
        for dt in [1e-3, 5e-4] {
            let c = design_controller(&params(0.01), &plant(1.0), dt).unwrap();
            let (dpp, dph) = c.sampled_predictor();
            assert!((dpp - &c.e_pp).norm() < 1e-12, "plant part is exact");
            errs.push((dph - &c.e_ph).norm());
        }
        assert!(errs[0] < 1e-2 * c_norm_scale(), "{errs:?}");
        let ratio = errs[0] / errs[1];
        assert!(ratio > 1.8 && ratio < 2.2, "first order in dt: {ratio}");
    }

    fn c_norm_scale() -> f64 {
        let c = design_controller(&params(0.01), &plant(1.0), 1e-3).unwrap();
        c.e_ph.norm()
    }

    #[test]
    fn matched_hold_converges_to_exact_hold() {
        let mut errs = Vec::new();
        for dt in [1e-3, 1e-4] {
            let pl = plant(1.0);
            let m = design_controller_with(&params(0.0), &pl, dt, HoldMode::Matched).unwrap();
            let e = design_controller_with(&params(0.0), &pl, dt, HoldMode::Exact).unwrap();
            let exact = expm(&m.a_c, dt).unwrap();
            assert!((e.hold_transition() - &exact).norm() < 1e-14);
            errs.push((m.hold_transition() - exact).norm());
        }
        let ratio = errs[0] / errs[1];
        assert!(ratio > 80.0, "second order in dt: {errs:?}");
    }

    #[test]
    fn form_xw_examples() {
        let x_ss = Vector::from_row_slice(&[1.0, 0.0, 0.0, 0.0]);
        let xh = Vector::from_row_slice(&[0.2, 0.0, 0.0, 0.0]);
        let xw = form_xw(&xh, 0.212, &x_ss);
        assert!((xw[0] + 0.012).abs() < 1e-15);
        assert_eq!(form_xw(&xh, 0.0, &x_ss), xh);
        assert_eq!(form_xw(&(&x_ss * 0.3), 0.3, &x_ss).norm(), 0.0);
    }

    fn runtime_with_error(c: &IcController, pos_err: f64, tau: Option<u64>) -> IcRuntime {
        let mut rt = IcRuntime::new(c, &Vector::zeros(4), 0.0).unwrap();
        rt.x_h[0] = pos_err;
        rt.hold_history.iter_mut().for_each(|h| h[0] = pos_err);
        rt.tau_steps = tau;
        rt
    }

    #[test]
    fn trigger_examples() {
        let c = design_controller(&IcParams::default(), &plant(1.0), 1e-3).unwrap();
        assert!(trigger_check(&c, &runtime_with_error(&c, 0.05, Some(60))));
        assert!(!trigger_check(&c, &runtime_with_error(&c, 0.02, Some(60))));
        assert!(!trigger_check(&c, &runtime_with_error(&c, 10.0, Some(10))));
        // Refractory boundary: exactly dol_min is still refractory.
        assert!(!trigger_check(&c, &runtime_with_error(&c, 10.0, Some(50))));
        assert!(trigger_check(&c, &runtime_with_error(&c, 10.0, Some(51))));
        assert!(trigger_check(&c, &runtime_with_error(&c, 10.0, None)));
    }

    #[test]
    fn hold_decays_and_stays_at_zero() {
        let c = design_controller(&params(0.0), &plant(1.0), 1e-3).unwrap();
        let mut rt = IcRuntime::new(&c, &Vector::zeros(4), 0.0).unwrap();
        hold_step(&c, &mut rt);
        assert_eq!(rt.x_h.norm(), 0.0);
        rt.x_h = Vector::from_row_slice(&[0.1, 0.0, 0.0, 0.0]);
        let alpha = spectral_abscissa(&c.a_c).unwrap();
        let x0 = rt.x_h.norm();
        for _ in 0..30000 {
            hold_step(&c, &mut rt);
        }
        // Within a generous transient constant of the slowest mode.
        assert!(rt.x_h.norm() < 50.0 * x0 * (alpha * 30.0).exp());
        assert!(rt.x_h.norm() < 1e-3 * x0);
    }

    #[test]
    fn observer_consistent_and_convergent() {
        let mut pl = plant(1.0);
        let c = design_controller(&params(0.0), &pl, 1e-3).unwrap();
        pl.set_state(Vector::from_row_slice(&[0.05, 0.2, -0.3, 0.4]))
            .unwrap();
        let mut exact = pl.state().clone();
        let mut off = Vector::zeros(4);
        let mut errs = Vec::new();
        for k in 0..10000 {
            let u = (k as f64 * 0.01).sin();
            let y = pl.position();
            exact = observer_step(&c, &exact, u, y).unwrap();
            off = observer_step(&c, &off, u, y).unwrap();
            pl.advance(u, 1e-3, NoRng::None).unwrap();
            assert!((&exact - pl.state()).norm() <= 1e-9);
            errs.push((&off - pl.state()).norm());
        }
        assert!(errs[9999] < 1e-3 * errs[0], "{} {}", errs[0], errs[9999]);
        let zero = observer_step(&c, &Vector::zeros(4), 0.0, 0.0).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn control_output_is_lqr_law_when_hold_tracks_estimate() {
        let c = design_controller(&params(0.0), &plant(1.0), 1e-3).unwrap();
        let x = Vector::from_row_slice(&[0.01, 0.2, 0.1, -0.1]);
        let w = 0.106;
        let mut rt = IcRuntime::new(&c, &x, w).unwrap();
        let xw = form_xw(&x, w, &c.x_ss);
        rt.x_h = xw.clone();
        let u = control_output(&c, &rt, w);
        let lqr = -(&c.k * &x)[0] + c.r * w;
        assert!((u - lqr).abs() < 1e-12);
        let mut zero = IcRuntime::new(&c, &Vector::zeros(4), 0.0).unwrap();
        zero.x_h.fill(0.0);
        assert_eq!(control_output(&c, &zero, 0.0), 0.0);
    }

    #[test]
    fn reset_discontinuity_is_gain_times_jump() {
        let c = design_controller(&params(0.0), &plant(1.0), 1e-3).unwrap();
        let mut rt = IcRuntime::new(&c, &Vector::zeros(4), 0.0).unwrap();
        rt.x_h = Vector::from_row_slice(&[0.02, 0.1, 0.0, 0.0]);
        let before = control_output(&c, &rt, 0.0);
        let x_p = Vector::from_row_slice(&[-0.01, 0.0, 0.3, 0.0]);
        let jump = (&c.k * (&rt.x_h - &x_p))[0];
        reset_hold(&c, &mut rt, &x_p, 0.5);
        let after = control_output(&c, &rt, 0.0);
        assert!(((after - before) - jump).abs() < 1e-12);
        assert_eq!(rt.last_sample_time, Some(0.5));
    }

    #[test]
    fn step_response_goes_quiet_and_tracks() {
        let mut pl = plant(1.0);
        let p = IcParams {
            qc: [1e4, 1.0, 1.0, 1.0],
            ..params(0.01)
        };
        let c = design_controller(&p, &pl, 1e-3).unwrap();
        pl.reset_at_rest(-0.106);
        let mut rt = IcRuntime::new(&c, pl.state(), -0.106).unwrap();
        let mut events = Vec::new();
        for k in 0..5100 {
            let w = if k < 100 { -0.106 } else { 0.106 };
            let out = ic_step(&c, &mut rt, &mut pl, w, NoRng::None).unwrap();
            if out.event {
                events.push(k);
            }
            if k > 100 + c.delay_steps {
                let e_pos = out.trigger_level.sqrt() * c.params.q;
                assert!(e_pos < 1e-9, "k {k}: {e_pos}");
            }
        }
        assert_eq!(events, vec![100]);
        assert!((pl.position() - 0.106).abs() < 1e-6);
    }

    #[test]
    fn sampling_delay_postpones_reset() {
        let p = IcParams {
            ds: 0.005,
            ..params(0.0)
        };
        let mut pl = plant(1.0);
        let c = design_controller(&p, &pl, 1e-3).unwrap();
        assert_eq!(c.ds_steps, 5);
        let mut rt = IcRuntime::new(&c, pl.state(), 0.0).unwrap();
        let mut us = Vec::new();
        for _ in 0..20 {
            us.push(ic_step(&c, &mut rt, &mut pl, 0.1, NoRng::None).unwrap().u);
        }
        assert_eq!(rt.events, vec![0.0]);
        assert_eq!(rt.last_sample_time, Some(0.005));
        assert!(us[..5].iter().all(|u| *u == 0.0));
        assert!(us[5] != 0.0);
    }

    #[test]
    fn disturbance_observer_rejects_constant_bias() {
        let p = IcParams {
            disturbance_observer: true,
            q: 0.001,
            dol_min: 0.03,
            ..params(0.0)
        };
        let mut pl = build_plant(PlantSpec {
            mismatch_p: 0.8,
            ..Default::default()
        })
        .unwrap();
        let c = design_controller(&p, &pl, 1e-3).unwrap();
        assert_eq!(c.n_observer_states(), 5);
        let mut rt = IcRuntime::new(&c, pl.state(), 0.0).unwrap();
        for _ in 0..20000 {
            ic_step(&c, &mut rt, &mut pl, 0.1, NoRng::None).unwrap();
        }
        assert!((pl.position() - 0.1).abs() < 1e-3, "{}", pl.position());
    }

    #[test]
    fn invalid_params_rejected() {
        let pl = plant(1.0);
        for bad in [
            IcParams {
                q: 0.0,
                ..Default::default()
            },
            IcParams {
                qo: -1.0,
                ..Default::default()
            },
            IcParams {
                p: 3.0,
                ..Default::default()
            },
            IcParams {
                qc: [1.0, f64::NAN, 1.0, 1.0],
                ..Default::default()
            },
        ] {
            assert!(design_controller(&bad, &pl, 1e-3).is_err());
        }
        assert!(design_controller(&IcParams::default(), &pl, 0.0).is_err());
        assert!(IcParams::default().within_bounds());
        assert!(!IcParams {
            q: 2.0,
            ..Default::default()
        }
        .within_bounds());
    }
}
