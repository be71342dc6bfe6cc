//! Human + interface plant: a second-order neuromuscular lag driving
//! double-integrator arm/mouse mechanics, with an input mismatch gain `p`
//! between the neuromuscular output and the mechanics.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::ctrlmath::{discretize, series_connect, Matrix, StateSpaceModel, Vector};
use crate::error::{Error, Result};

pub const MISMATCH_BOUNDS: (f64, f64) = (0.1, 2.0);
pub const DEFAULT_NMS_TC: f64 = 0.05;

/// Index of pointer position in the plant state.
pub const POS: usize = 0;
/// Index of pointer velocity in the plant state.
pub const VEL: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub nms_time_constant: f64,
    /// Gain applied to the neuromuscular output before it reaches the mechanics.
    pub mismatch_p: f64,
    /// Standard deviation of additive motor noise on `u`.
    #[serde(default)]
    pub motor_noise: f64,
    /// Standard deviation of additive sensor noise on the measured position.
    #[serde(default)]
    pub sensor_noise: f64,
}

impl Default for PlantSpec {
    fn default() -> Self {
        Self {
            nms_time_constant: DEFAULT_NMS_TC,
            mismatch_p: 1.0,
            motor_noise: 0.0,
            sensor_noise: 0.0,
        }
    }
}

impl PlantSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.nms_time_constant > 0.0 && self.nms_time_constant.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "NMS time constant must be positive, got {}",
                self.nms_time_constant
            )));
        }
        check_mismatch(self.mismatch_p)?;
        for (name, s) in [("motor", self.motor_noise), ("sensor", self.sensor_noise)] {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{name} noise must be ≥ 0, got {s}"
                )));
            }
        }
        Ok(())
    }

    /// Mismatch gain as reported in results tables, `A_p = 1 − p`.
    pub fn mismatch_gain(&self) -> f64 {
        1.0 - self.mismatch_p
    }
}

fn check_mismatch(p: f64) -> Result<()> {
    let (lo, hi) = MISMATCH_BOUNDS;
    if !(lo..=hi).contains(&p) {
        return Err(Error::InvalidParameter(format!(
            "mismatch p = {p} outside [{lo}, {hi}]"
        )));
    }
    Ok(())
}

/// Realization of `1 / (tc s + 1)²` with unit DC gain.
pub fn build_nms(tc: f64) -> Result<StateSpaceModel> {
    if !(tc > 0.0 && tc.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "NMS time constant must be positive, got {tc}"
        )));
    }
    let r = 1.0 / tc;
    StateSpaceModel::new(
        Matrix::from_row_slice(2, 2, &[-r, r, 0.0, -r]),
        Matrix::from_row_slice(2, 1, &[0.0, r]),
        Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
    )
}

/// Arm/mouse mechanics as a double integrator with input gain `gain`.
pub fn build_mechanics(gain: f64) -> Result<StateSpaceModel> {
    StateSpaceModel::new(
        Matrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]),
        Matrix::from_row_slice(2, 1, &[0.0, gain]),
        Matrix::from_row_slice(1, 2, &[1.0, 0.0]),
    )
}

fn combined(tc: f64, p: f64) -> Result<StateSpaceModel> {
    series_connect(&build_nms(tc)?, &build_mechanics(p)?)
}

/// Nominal 4th-order design model (`p = 1`), state `[pos, vel, nms₁, nms₂]`.
pub fn design_model(tc: f64) -> Result<StateSpaceModel> {
    combined(tc, 1.0)
}

#[derive(Debug, Clone)]
struct StepCache {
    dt: f64,
    ad: Matrix,
    bd: Matrix,
}

/// Mutable plant simulator. The design model is what controllers see; the
/// true model carries the mismatch and is what gets integrated.
#[derive(Debug, Clone)]
pub struct Plant {
    spec: PlantSpec,
    design: StateSpaceModel,
    truth: StateSpaceModel,
    state: Vector,
    cache: Option<StepCache>,
}

pub fn build_plant(spec: PlantSpec) -> Result<Plant> {
    spec.validate()?;
    let design = design_model(spec.nms_time_constant)?;
    let truth = combined(spec.nms_time_constant, spec.mismatch_p)?;
    let n = design.n_states();
    Ok(Plant {
        spec,
        design,
        truth,
        state: Vector::zeros(n),
        cache: None,
    })
}

impl Plant {
    pub fn spec(&self) -> &PlantSpec {
        &self.spec
    }

    pub fn design_model(&self) -> &StateSpaceModel {
        &self.design
    }

    pub fn true_model(&self) -> &StateSpaceModel {
        &self.truth
    }

    pub fn state(&self) -> &Vector {
        &self.state
    }

    pub fn position(&self) -> f64 {
        self.state[POS]
    }

    pub fn velocity(&self) -> f64 {
        self.state[VEL]
    }

    /// Pointer acceleration for input `u` at the current state.
    pub fn acceleration(&self, u: f64) -> f64 {
        (self.truth.a().row(VEL) * &self.state)[0] + self.truth.b()[(VEL, 0)] * u
    }

    pub fn set_state(&mut self, x: Vector) -> Result<()> {
        if x.len() != self.state.len() {
            return Err(Error::dim(
                "Plant::set_state",
                format!("expected {} states", self.state.len()),
            ));
        }
        self.state = x;
        Ok(())
    }

    /// Places the pointer at rest at `position` with relaxed muscles.
    pub fn reset_at_rest(&mut self, position: f64) {
        self.state.fill(0.0);
        self.state[POS] = position;
    }

    /// Changes the mismatch gain of the true model; the state is kept.
    pub fn set_mismatch(&mut self, p: f64) -> Result<()> {
        check_mismatch(p)?;
        if p != self.spec.mismatch_p {
            self.spec.mismatch_p = p;
            self.truth = combined(self.spec.nms_time_constant, p)?;
            self.cache = None;
        }
        Ok(())
    }

    fn refresh_cache(&mut self, dt: f64) -> Result<()> {
        if self.cache.as_ref().is_none_or(|c| c.dt != dt) {
            let (ad, bd) = discretize(&self.truth, dt)?;
            self.cache = Some(StepCache { dt, ad, bd });
        }
        Ok(())
    }

    /// Position as seen by the sensor, with sensor noise when configured.
    pub fn measure<R: Rng + ?Sized>(&self, rng: Option<&mut R>) -> f64 {
        let mut y = self.position();
        if let Some(rng) = rng {
            if self.spec.sensor_noise > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                y += self.spec.sensor_noise * n;
            }
        }
        y
    }

    /// Advances one zero-order-hold step and returns the input that was
    /// actually applied (after motor noise).
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        u: f64,
        dt: f64,
        rng: Option<&mut R>,
    ) -> Result<f64> {
        if !u.is_finite() {
            return Err(Error::NonFinite("plant input"));
        }
        let mut u_applied = u;
        if let Some(rng) = rng {
            if self.spec.motor_noise > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                u_applied += self.spec.motor_noise * n;
            }
        }
        self.refresh_cache(dt)?;
        let c = self.cache.as_ref().expect("cache refreshed above");
        let next = &c.ad * &self.state + &c.bd * u_applied;
        self.state = next;
        Ok(u_applied)
    }

    /// One step: apply `u` over `dt`, then return the measured position and
    /// the new state.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        u: f64,
        dt: f64,
        mut rng: Option<&mut R>,
    ) -> Result<(f64, Vector)> {
        self.advance(u, dt, rng.as_deref_mut())?;
        Ok((self.measure(rng), self.state.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;

    type NoRng = Option<&'static mut ChaCha8Rng>;

    #[test]
    fn nms_matrices_at_default_time_constant() {
        let s = build_nms(0.05).unwrap();
        assert_eq!(
            s.a(),
            &Matrix::from_row_slice(2, 2, &[-20.0, 20.0, 0.0, -20.0])
        );
        assert_eq!(s.b(), &Matrix::from_row_slice(2, 1, &[0.0, 20.0]));
        assert_eq!(s.c(), &Matrix::from_row_slice(1, 2, &[1.0, 0.0]));
    }

    #[test]
    fn nms_unit_dc_gain() {
        for tc in [0.01, 0.05, 0.3, 2.0] {
            let s = build_nms(tc).unwrap();
            let g = -(s.c() * s.a().clone().try_inverse().unwrap() * s.b())[0];
            assert!((g - 1.0).abs() < 1e-12, "tc {tc}: {g}");
        }
        assert!(build_nms(0.0).is_err());
        assert!(build_nms(-1.0).is_err());
    }

    #[test]
    fn nms_step_settles() {
        let tc = 0.05;
        let s = build_nms(tc).unwrap();
        let dt = 1e-3;
        let (ad, bd) = discretize(&s, dt).unwrap();
        let mut x = Vector::zeros(2);
        let steps = (5.0 * tc / dt).round() as usize;
        for _ in 0..steps {
            x = &ad * &x + &bd * 1.0;
        }
        // (1 + 5) e^{-5} ≈ 4% remains for a double pole; a 2% band is reached by 6 tc.
        let y5 = x[0];
        assert!((y5 - (1.0 - 6.0 * (-5.0f64).exp())).abs() < 1e-9);
        for _ in 0..steps {
            x = &ad * &x + &bd * 1.0;
        }
        assert!((x[0] - 1.0).abs() < 0.02);
    }

    #[test]
    fn mismatch_applies_to_true_model_only() {
        let p1 = build_plant(PlantSpec::default()).unwrap();
        assert_eq!(p1.design_model(), p1.true_model());
        let spec = PlantSpec {
            mismatch_p: 0.9,
            ..Default::default()
        };
        assert!((spec.mismatch_gain() - 0.1).abs() < 1e-15);
        let p = build_plant(spec).unwrap();
        assert_eq!(p.design_model(), p1.design_model());
        // The mechanics input is the NMS output, which enters the velocity row.
        assert!((p.true_model().a()[(VEL, 2)] - 0.9).abs() < 1e-15);
        assert!((p.design_model().a()[(VEL, 2)] - 1.0).abs() < 1e-15);
        let mut diff = p.true_model().a() - p.design_model().a();
        diff[(VEL, 2)] = 0.0;
        assert_eq!(diff.norm(), 0.0);
        assert_eq!(p.true_model().b(), p.design_model().b());
    }

    #[test]
    fn rejects_out_of_range_spec() {
        for p in [0.05, 2.5, f64::NAN] {
            let spec = PlantSpec {
                mismatch_p: p,
                ..Default::default()
            };
            assert!(build_plant(spec).is_err());
        }
        let spec = PlantSpec {
            sensor_noise: -1.0,
            ..Default::default()
        };
        assert!(build_plant(spec).is_err());
    }

    #[test]
    fn equilibrium_at_rest() {
        let mut p = build_plant(PlantSpec::default()).unwrap();
        for _ in 0..100 {
            let (y, x) = p.step(0.0, 1e-3, None::<&mut ChaCha8Rng>).unwrap();
            assert_eq!(y, 0.0);
            assert_eq!(x.norm(), 0.0);
        }
        assert!(p.step(f64::NAN, 1e-3, NoRng::None).is_err());
    }

    /// Classical RK4 on the continuous model with a 1e-5 step.
    fn fine_reference(sys: &StateSpaceModel, u: f64, t_end: f64) -> Vector {
        let h = 1e-5;
        let f = |x: &Vector| sys.a() * x + sys.b().column(0) * u;
        let mut x = Vector::zeros(sys.n_states());
        let n = (t_end / h).round() as usize;
        for _ in 0..n {
            let k1 = f(&x);
            let k2 = f(&(&x + &k1 * (h / 2.0)));
            let k3 = f(&(&x + &k2 * (h / 2.0)));
            let k4 = f(&(&x + &k3 * h));
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        }
        x
    }

    #[test]
    fn constant_input_matches_fine_integration() {
        let mut p = build_plant(PlantSpec::default()).unwrap();
        for _ in 0..1000 {
            p.step(1.0, 1e-3, NoRng::None).unwrap();
        }
        let reference = fine_reference(p.true_model(), 1.0, 1.0);
        // Closed form for the position: t²/2 − 2 tc t + 3 tc² − tc e^{−t/tc}(t + 3 tc).
        let tc = 0.05f64;
        let t = 1.0f64;
        let exact =
            t * t / 2.0 - 2.0 * tc * t + 3.0 * tc * tc - tc * (-t / tc).exp() * (t + 3.0 * tc);
        assert!((p.position() - reference[0]).abs() < 1e-6);
        assert!(
            (p.position() - exact).abs() < 1e-9,
            "{} vs {exact}",
            p.position()
        );
    }

    #[test]
    fn half_mismatch_halves_acceleration() {
        let run = |m: f64| {
            let mut p = build_plant(PlantSpec {
                mismatch_p: m,
                ..Default::default()
            })
            .unwrap();
            for _ in 0..2000 {
                p.step(1.0, 1e-3, NoRng::None).unwrap();
            }
            p.acceleration(1.0)
        };
        let a1 = run(1.0);
        let a05 = run(0.5);
        assert!((a05 / a1 - 0.5).abs() < 1e-9);
    }

    #[test]
    fn linear_in_input() {
        let run = |scale: f64| {
            let mut p = build_plant(PlantSpec {
                mismatch_p: 0.8,
                ..Default::default()
            })
            .unwrap();
            let mut ys = Vec::new();
            for k in 0..500 {
                let u = scale * (k as f64 * 0.02).sin();
                ys.push(p.step(u, 1e-3, NoRng::None).unwrap().0);
            }
            ys
        };
        let a = run(1.0);
        let b = run(-3.5);
        for (x, y) in a.iter().zip(&b) {
            assert!((y + 3.5 * x).abs() <= 1e-10 * (1.0 + x.abs()));
        }
        assert_eq!(run(1.0), a, "noise-free runs are bit-reproducible");
    }

    #[test]
    fn set_mismatch_rebuilds_true_model() {
        let mut p = build_plant(PlantSpec::default()).unwrap();
        p.step(1.0, 1e-3, NoRng::None).unwrap();
        p.set_mismatch(1.5).unwrap();
        assert!((p.true_model().a()[(VEL, 2)] - 1.5).abs() < 1e-15);
        assert!(p.set_mismatch(3.0).is_err());
    }

    #[test]
    fn noise_is_seeded() {
        use rand::SeedableRng;
        let spec = PlantSpec {
            sensor_noise: 1e-3,
            motor_noise: 0.1,
            ..Default::default()
        };
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let mut p = build_plant(spec.clone()).unwrap();
            (0..50)
                .map(|_| p.step(0.5, 1e-3, Some(&mut rng)).unwrap().0)
                .collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(
            a.iter().any(|y| *y < 0.0),
            "sensor noise shows up at small displacements"
        );
    }
}
