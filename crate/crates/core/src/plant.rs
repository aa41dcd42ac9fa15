//! Analytic single-rod hydraulic actuator pushing against a linear spring.
//!
//! The simulator state is `(p_a, p_b, x_p, x_p_dot)`; forces and force rates
//! are derived outputs. Chamber pressures follow the continuity equations
//! with a linearised servo valve, the piston follows Newton's law against
//! spring and viscous friction. Uncertainty enters as `C1` on the velocity
//! term, `C2` on the valve term and a lumped disturbance current `d`.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum PlantError {
    #[error("invalid plant parameter: {0}")]
    InvalidParams(String),
    #[error("non-physical chamber volume (v_a = {v_a:e}, v_b = {v_b:e})")]
    NegativeVolume { v_a: f64, v_b: f64 },
    #[error("non-finite plant state")]
    NanState,
    #[error("simulation diverged; last valid state {last:?}")]
    Diverged { last: Box<PlantState> },
}

pub type Result<T> = std::result::Result<T, PlantError>;

/// Actuator and environment constants.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HydraulicParams {
    pub beta_e: f64,
    pub a_p: f64,
    pub alpha: f64,
    pub l_c: f64,
    pub p_s: f64,
    pub p_t: f64,
    pub q_n: f64,
    pub u_n: f64,
    pub dp_n: f64,
    pub k_spring: f64,
    pub m_piston: f64,
    pub b_viscous: f64,
    pub v_dead: f64,
    pub u_max: f64,
    /// Semi-implicit Euler substeps per `step` call.
    pub n_substeps: usize,
}

impl Default for HydraulicParams {
    fn default() -> Self {
        let a_p = 2e-4;
        let l_c = 0.08;
        Self {
            beta_e: 1.34e9,
            a_p,
            alpha: 0.609,
            l_c,
            p_s: 16e6,
            p_t: 0.0,
            q_n: 1.67e-4,
            u_n: 0.05,
            dp_n: 7e6,
            k_spring: 20_000.0,
            m_piston: 2.0,
            b_viscous: 300.0,
            // hose + manifold volume on each side
            v_dead: 20.0 * a_p * l_c,
            u_max: 0.1,
            n_substeps: 10,
        }
    }
}

impl HydraulicParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("beta_e", self.beta_e),
            ("a_p", self.a_p),
            ("alpha", self.alpha),
            ("l_c", self.l_c),
            ("p_s", self.p_s),
            ("q_n", self.q_n),
            ("u_n", self.u_n),
            ("dp_n", self.dp_n),
            ("k_spring", self.k_spring),
            ("m_piston", self.m_piston),
            ("v_dead", self.v_dead),
            ("u_max", self.u_max),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(PlantError::InvalidParams(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.p_t >= 0.0) || !(self.p_s > self.p_t) {
            return Err(PlantError::InvalidParams("need 0 <= p_t < p_s".into()));
        }
        if self.alpha > 1.0 {
            return Err(PlantError::InvalidParams("alpha must lie in (0, 1]".into()));
        }
        if !(self.b_viscous >= 0.0) {
            return Err(PlantError::InvalidParams("b_viscous must be non-negative".into()));
        }
        if self.n_substeps == 0 {
            return Err(PlantError::InvalidParams("n_substeps must be >= 1".into()));
        }
        Ok(())
    }

    pub fn chamber_volumes(&self, x_p: f64) -> (f64, f64) {
        (
            self.v_dead + self.a_p * x_p,
            self.v_dead + self.alpha * self.a_p * (self.l_c - x_p),
        )
    }

    pub fn hydraulic_force(&self, p_a: f64, p_b: f64) -> f64 {
        self.a_p * p_a - self.alpha * self.a_p * p_b
    }

    /// Rest state: piston at mid-stroke, rod-side pressure at `p_s / 2`, cap
    /// side pressure chosen so the hydraulic force balances the spring.
    pub fn rest_state(&self) -> PlantState {
        let x_p = 0.5 * self.l_c;
        let p_b = 0.5 * (self.p_s + self.p_t);
        let p_a = (self.k_spring * x_p + self.alpha * self.a_p * p_b) / self.a_p;
        PlantState::from_internal(self, p_a.clamp(self.p_t, self.p_s), p_b, x_p, 0.0)
    }

    /// `g` at mid-stroke with both chambers at `(p_s + p_t)/2` (u >= 0 branch).
    pub fn g_mid(&self) -> f64 {
        let p_mid = 0.5 * (self.p_s + self.p_t);
        let (v_a, v_b) = self.chamber_volumes(0.5 * self.l_c);
        g_branch(self, p_mid, p_mid, v_a, v_b, true)
    }
}

/// `K_v = q_n / (u_n * sqrt(dp_n / 2))`.
pub fn valve_gain(params: &HydraulicParams) -> f64 {
    params.q_n / (params.u_n * (params.dp_n / 2.0).sqrt())
}

fn sqrt0(x: f64) -> f64 {
    x.max(0.0).sqrt()
}

fn g_branch(p: &HydraulicParams, p_a: f64, p_b: f64, v_a: f64, v_b: f64, positive: bool) -> f64 {
    let kv = valve_gain(p);
    let (ra, rb) = if positive {
        (sqrt0(p.p_s - p_a), sqrt0(p_b - p.p_t))
    } else {
        (sqrt0(p_a - p.p_t), sqrt0(p.p_s - p_b))
    };
    p.beta_e * kv * p.a_p * (ra / v_a + p.alpha * rb / v_b)
}

/// Measured state `[f_h, f_h_dot, f_l, f_l_dot, p_a, p_b, x_p, x_p_dot]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub f_h: f64,
    pub f_h_dot: f64,
    pub f_l: f64,
    pub f_l_dot: f64,
    pub p_a: f64,
    pub p_b: f64,
    pub x_p: f64,
    pub x_p_dot: f64,
}

pub const STATE_DIM: usize = 8;
pub const STATE_NAMES: [&str; STATE_DIM] = ["f_h", "f_h_dot", "f_l", "f_l_dot", "p_a", "p_b", "x_p", "x_p_dot"];
/// Index of `f_l` in the state vector (the certificate's projection axis).
pub const F_L: usize = 2;

impl PlantState {
    pub fn from_internal(p: &HydraulicParams, p_a: f64, p_b: f64, x_p: f64, x_p_dot: f64) -> Self {
        Self {
            f_h: p.hydraulic_force(p_a, p_b),
            f_h_dot: 0.0,
            f_l: p.k_spring * x_p,
            f_l_dot: 0.0,
            p_a,
            p_b,
            x_p,
            x_p_dot,
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.f_h,
            self.f_h_dot,
            self.f_l,
            self.f_l_dot,
            self.p_a,
            self.p_b,
            self.x_p,
            self.x_p_dot,
        ]
    }

    pub fn from_array(a: &[f64; STATE_DIM]) -> Self {
        Self {
            f_h: a[0],
            f_h_dot: a[1],
            f_l: a[2],
            f_l_dot: a[3],
            p_a: a[4],
            p_b: a[5],
            x_p: a[6],
            x_p_dot: a[7],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Lumped disturbance `d` (valve-current units, A).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Disturbance {
    Constant { value: f64 },
    /// First-order low-passed white noise around `bias` with stationary
    /// standard deviation `std`.
    BandLimited { bias: f64, std: f64, cutoff_hz: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UncertaintyConfig {
    pub c1: f64,
    pub c2: f64,
    pub disturbance: Disturbance,
    pub noise_std: [f64; STATE_DIM],
}

impl Default for UncertaintyConfig {
    fn default() -> Self {
        Self {
            c1: 0.95,
            c2: 1.0,
            disturbance: Disturbance::Constant { value: 1e-4 },
            noise_std: [0.0; STATE_DIM],
        }
    }
}

impl UncertaintyConfig {
    /// The model the controller assumes: `C1 = C2 = 1`, `d = 0`, no noise.
    pub fn nominal() -> Self {
        Self {
            c1: 1.0,
            c2: 1.0,
            disturbance: Disturbance::Constant { value: 0.0 },
            noise_std: [0.0; STATE_DIM],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0) || !(self.c2 > 0.0) {
            return Err(PlantError::InvalidParams("C1 and C2 must be positive".into()));
        }
        if self.noise_std.iter().any(|s| !(*s >= 0.0)) {
            return Err(PlantError::InvalidParams("noise_std must be non-negative".into()));
        }
        if let Disturbance::BandLimited { std, cutoff_hz, .. } = self.disturbance {
            if !(std >= 0.0) || !(cutoff_hz > 0.0) {
                return Err(PlantError::InvalidParams("band-limited disturbance needs std >= 0 and cutoff > 0".into()));
            }
        }
        Ok(())
    }
}

/// Stateful realisation of a [`Disturbance`].
#[derive(Debug, Clone)]
pub struct DisturbanceProcess {
    source: Disturbance,
    filtered: f64,
    rng: ChaCha8Rng,
}

impl DisturbanceProcess {
    pub fn new(source: Disturbance, seed: u64) -> Self {
        Self {
            source,
            filtered: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn current(&self) -> f64 {
        match self.source {
            Disturbance::Constant { value } => value,
            Disturbance::BandLimited { bias, .. } => bias + self.filtered,
        }
    }

    pub fn advance(&mut self, dt: f64) {
        if let Disturbance::BandLimited { std, cutoff_hz, .. } = self.source {
            if std > 0.0 {
                let a = 1.0 - (-2.0 * std::f64::consts::PI * cutoff_hz * dt).exp();
                let sigma_w = std * ((2.0 - a) / a).sqrt();
                let w: f64 = Normal::new(0.0, sigma_w).expect("finite sigma").sample(&mut self.rng);
                self.filtered += a * (w - self.filtered);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceDynamics {
    pub h: f64,
    pub g: f64,
    pub f_h_dot: f64,
}

/// `h`, `g` and `f_h_dot = C1 h + C2 g u + g d` at the given state.
pub fn force_dynamics(
    state: &PlantState,
    u: f64,
    params: &HydraulicParams,
    unc: &UncertaintyConfig,
    d: f64,
) -> Result<ForceDynamics> {
    if !state.is_finite() || !u.is_finite() || !d.is_finite() {
        return Err(PlantError::NanState);
    }
    let (h, g) = h_and_g(params, state.p_a, state.p_b, state.x_p, state.x_p_dot, u >= 0.0)?;
    Ok(ForceDynamics {
        h,
        g,
        f_h_dot: unc.c1 * h + unc.c2 * g * u + g * d,
    })
}

/// Nominal-model `h` and the `g` branch selected by `positive_u`.
pub fn h_and_g(
    params: &HydraulicParams,
    p_a: f64,
    p_b: f64,
    x_p: f64,
    x_p_dot: f64,
    positive_u: bool,
) -> Result<(f64, f64)> {
    let (v_a, v_b) = params.chamber_volumes(x_p);
    if !(v_a > 0.0) || !(v_b > 0.0) {
        return Err(PlantError::NegativeVolume { v_a, v_b });
    }
    let a = params.a_p;
    let h = -params.beta_e * a * a * (1.0 / v_a + params.alpha * params.alpha / v_b) * x_p_dot;
    let g = g_branch(params, p_a, p_b, v_a, v_b, positive_u);
    Ok((h, g))
}

/// Advance the actuator by `dt` with valve current `u` and disturbance `d`.
/// The input is saturated to `±u_max`. Rates are backward differences over
/// `dt`.
pub fn step(
    state: &PlantState,
    u: f64,
    dt: f64,
    params: &HydraulicParams,
    unc: &UncertaintyConfig,
    d: f64,
) -> Result<PlantState> {
    if !(dt > 0.0) {
        return Err(PlantError::InvalidParams(format!("dt must be positive, got {dt}")));
    }
    if !state.is_finite() || !u.is_finite() || !d.is_finite() {
        return Err(PlantError::NanState);
    }
    let u = u.clamp(-params.u_max, params.u_max);
    let kv = valve_gain(params);
    let hs = dt / params.n_substeps as f64;
    let (mut p_a, mut p_b, mut x, mut xd) = (state.p_a, state.p_b, state.x_p, state.x_p_dot);
    let a = params.a_p;
    let al = params.alpha;
    for _ in 0..params.n_substeps {
        let (v_a, v_b) = params.chamber_volumes(x);
        if !(v_a > 0.0) || !(v_b > 0.0) {
            return Err(PlantError::NegativeVolume { v_a, v_b });
        }
        let (qa, qb) = if u >= 0.0 {
            (kv * sqrt0(params.p_s - p_a), kv * sqrt0(p_b - params.p_t))
        } else {
            (kv * sqrt0(p_a - params.p_t), kv * sqrt0(params.p_s - p_b))
        };
        let f_h = a * p_a - al * a * p_b;
        let acc = (f_h - params.k_spring * x - params.b_viscous * xd) / params.m_piston;
        // semi-implicit: velocity first, then position and pressures
        let mut xd2 = xd + hs * acc;
        let mut x2 = x + hs * xd2;
        if x2 < 0.0 {
            x2 = 0.0;
            xd2 = xd2.max(0.0);
        } else if x2 > params.l_c {
            x2 = params.l_c;
            xd2 = xd2.min(0.0);
        }
        let drive = unc.c2 * u + d;
        p_a += hs * params.beta_e / v_a * (qa * drive - unc.c1 * a * xd2);
        p_b += hs * params.beta_e / v_b * (unc.c1 * al * a * xd2 - qb * drive);
        p_a = p_a.clamp(params.p_t, params.p_s);
        p_b = p_b.clamp(params.p_t, params.p_s);
        x = x2;
        xd = xd2;
    }
    let f_h = params.hydraulic_force(p_a, p_b);
    let f_l = params.k_spring * x;
    let next = PlantState {
        f_h,
        f_h_dot: (f_h - state.f_h) / dt,
        f_l,
        f_l_dot: (f_l - state.f_l) / dt,
        p_a,
        p_b,
        x_p: x,
        x_p_dot: xd,
    };
    if !next.is_finite() {
        return Err(PlantError::Diverged {
            last: Box::new(*state),
        });
    }
    Ok(next)
}

/// Add seeded Gaussian noise per channel. Zero noise returns the state
/// exactly (no random draws are consumed for zero channels).
pub fn measure<R: Rng + ?Sized>(state: &PlantState, unc: &UncertaintyConfig, rng: &mut R) -> PlantState {
    let mut a = state.to_array();
    for (v, &s) in a.iter_mut().zip(&unc.noise_std) {
        if s > 0.0 {
            *v += Normal::new(0.0, s).expect("finite std").sample(rng);
        }
    }
    PlantState::from_array(&a)
}

/// A plant instance owning its true state, disturbance and sensor noise.
#[derive(Debug, Clone)]
pub struct Plant {
    pub params: HydraulicParams,
    pub unc: UncertaintyConfig,
    pub dt: f64,
    state: PlantState,
    disturbance: DisturbanceProcess,
    noise_rng: ChaCha8Rng,
}

impl Plant {
    pub fn new(params: HydraulicParams, unc: UncertaintyConfig, dt: f64, seed: u64) -> Result<Self> {
        params.validate()?;
        unc.validate()?;
        if !(dt > 0.0) {
            return Err(PlantError::InvalidParams("dt must be positive".into()));
        }
        Ok(Self {
            state: params.rest_state(),
            disturbance: DisturbanceProcess::new(unc.disturbance, seed ^ 0x000D_157B),
            noise_rng: ChaCha8Rng::seed_from_u64(seed),
            params,
            unc,
            dt,
        })
    }

    pub fn reset(&mut self) {
        self.state = self.params.rest_state();
    }

    pub fn set_state(&mut self, s: PlantState) {
        self.state = s;
    }

    pub fn state(&self) -> &PlantState {
        &self.state
    }

    pub fn measured(&mut self) -> PlantState {
        measure(&self.state, &self.unc, &mut self.noise_rng)
    }

    pub fn step(&mut self, u: f64) -> Result<PlantState> {
        let d = self.disturbance.current();
        let next = step(&self.state, u, self.dt, &self.params, &self.unc, d)?;
        self.disturbance.advance(self.dt);
        self.state = next;
        Ok(next)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn nominal() -> (HydraulicParams, UncertaintyConfig) {
        (HydraulicParams::default(), UncertaintyConfig::nominal())
    }

    #[test]
    fn valve_gain_table_values() {
        let p = HydraulicParams::default();
        let kv = valve_gain(&p);
        // 1.67e-4 / (0.05 * sqrt(3.5e6))
        let oracle = 1.67e-4 / (0.05 * 1_870.828_693_386_970_7);
        assert!((kv - oracle).abs() < 1e-15);
        assert!((kv - 1.785e-6).abs() < 1e-9);
        let doubled = valve_gain(&HydraulicParams { q_n: 2.0 * p.q_n, ..p });
        assert!((doubled - 2.0 * kv).abs() < 1e-18);
        let quartered = valve_gain(&HydraulicParams { dp_n: 4.0 * p.dp_n, ..p });
        assert!((quartered - 0.5 * kv).abs() < 1e-18);
    }

    #[test]
    fn zero_velocity_zero_input_gives_zero_rate() {
        let (p, unc) = nominal();
        let s = p.rest_state();
        let fd = force_dynamics(&s, 0.0, &p, &unc, 0.0).unwrap();
        assert_eq!(fd.f_h_dot, 0.0);
    }

    #[test]
    fn positive_velocity_gives_negative_h() {
        let (p, unc) = nominal();
        let s = PlantState { x_p_dot: 0.01, ..p.rest_state() };
        let fd = force_dynamics(&s, 0.0, &p, &unc, 0.0).unwrap();
        assert!(fd.h < 0.0 && fd.f_h_dot < 0.0);
    }

    #[test]
    fn mid_stroke_rate_matches_hand_arithmetic() {
        let (p, _) = nominal();
        let unc = UncertaintyConfig { c2: 0.8, ..UncertaintyConfig::nominal() };
        let s = PlantState::from_internal(&p, 8e6, 8e6, 0.04, 0.0);
        let fd = force_dynamics(&s, 0.05, &p, &unc, 0.0).unwrap();
        // spreadsheet: v_dead = 20 * 2e-4 * 0.08 = 3.2e-4
        let v_a = 3.2e-4 + 2e-4 * 0.04;
        let v_b = 3.2e-4 + 0.609 * 2e-4 * 0.04;
        let kv = 1.67e-4 / (0.05 * (3.5e6f64).sqrt());
        let root = (8e6f64).sqrt();
        let g = 1.34e9 * kv * 2e-4 * (root / v_a + 0.609 * root / v_b);
        let expected = 0.8 * g * 0.05;
        assert!((fd.f_h_dot - expected).abs() <= 1e-9 * expected.abs(), "{} vs {expected}", fd.f_h_dot);
    }

    #[test]
    fn branches_agree_only_when_symmetric() {
        let sym = HydraulicParams { alpha: 1.0, ..Default::default() };
        let s = PlantState::from_internal(&sym, 8e6, 8e6, 0.04, 0.0);
        let (_, gp) = h_and_g(&sym, s.p_a, s.p_b, s.x_p, 0.0, true).unwrap();
        let (_, gn) = h_and_g(&sym, s.p_a, s.p_b, s.x_p, 0.0, false).unwrap();
        assert!((gp - gn).abs() < 1e-9 * gp);
        let asym = HydraulicParams::default();
        let s = asym.rest_state();
        let (_, gp) = h_and_g(&asym, s.p_a, s.p_b, s.x_p, 0.0, true).unwrap();
        let (_, gn) = h_and_g(&asym, s.p_a, s.p_b, s.x_p, 0.0, false).unwrap();
        assert!((gp - gn).abs() > 1e-6 * gp);
        // u = 0 takes the positive branch
        let fd = force_dynamics(&s, 0.0, &asym, &UncertaintyConfig::nominal(), 0.0).unwrap();
        assert_eq!(fd.g, gp);
    }

    #[test]
    fn nominal_rate_is_g_u_at_rest() {
        let (p, unc) = nominal();
        let s = p.rest_state();
        for u in [-0.07, -0.01, 0.0, 0.02, 0.09] {
            let fd = force_dynamics(&s, u, &p, &unc, 0.0).unwrap();
            assert_eq!(fd.f_h_dot, fd.g * u);
        }
    }

    #[test]
    fn nan_state_rejected() {
        let (p, unc) = nominal();
        let s = PlantState { p_a: f64::NAN, ..p.rest_state() };
        assert!(matches!(force_dynamics(&s, 0.0, &p, &unc, 0.0), Err(PlantError::NanState)));
        assert!(step(&s, 0.0, 1e-3, &p, &unc, 0.0).is_err());
    }

    #[test]
    fn negative_volume_rejected() {
        let p = HydraulicParams::default();
        let s = PlantState { x_p: -10.0, ..p.rest_state() };
        assert!(matches!(
            force_dynamics(&s, 0.0, &p, &UncertaintyConfig::nominal(), 0.0),
            Err(PlantError::NegativeVolume { .. })
        ));
    }

    #[test]
    fn equilibrium_is_fixed_point() {
        let (p, unc) = nominal();
        let mut s = p.rest_state();
        let s0 = s;
        for _ in 0..100 {
            s = step(&s, 0.0, 1e-3, &p, &unc, 0.0).unwrap();
        }
        for (a, b) in s.to_array().iter().zip(s0.to_array()) {
            assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn constant_input_pushes_spring_and_matches_fine_reference() {
        let (p, unc) = nominal();
        let fine = HydraulicParams { n_substeps: 100, ..p };
        let mut s = p.rest_state();
        let mut r = p.rest_state();
        let mut prev = s;
        for k in 0..50 {
            s = step(&s, 0.02, 1e-3, &p, &unc, 0.0).unwrap();
            r = step(&r, 0.02, 1e-3, &fine, &unc, 0.0).unwrap();
            if k >= 1 {
                assert!(s.x_p > prev.x_p && s.f_l > prev.f_l, "step {k}");
            }
            assert!((s.f_l - r.f_l).abs() < 0.02 * (r.f_l - 800.0).abs().max(1.0), "step {k}: {} vs {}", s.f_l, r.f_l);
            prev = s;
        }
        assert!(s.f_l > 800.0);
    }

    #[test]
    fn saturation_is_transparent() {
        let (p, unc) = nominal();
        let mut a = p.rest_state();
        let mut b = a;
        for _ in 0..30 {
            a = step(&a, 0.5, 1e-3, &p, &unc, 0.0).unwrap();
            b = step(&b, p.u_max, 1e-3, &p, &unc, 0.0).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn state_stays_in_bounds_under_full_input() {
        let (p, unc) = nominal();
        let mut s = p.rest_state();
        for k in 0..3000 {
            let u = if (k / 500) % 2 == 0 { p.u_max } else { -p.u_max };
            s = step(&s, u, 1e-3, &p, &unc, 0.0).unwrap();
            assert!((0.0..=p.l_c).contains(&s.x_p));
            assert!((p.p_t..=p.p_s).contains(&s.p_a) && (p.p_t..=p.p_s).contains(&s.p_b));
            assert!((s.f_l - p.k_spring * s.x_p).abs() < 1e-9);
        }
    }

    #[test]
    fn free_response_energy_decays() {
        let (p, unc) = nominal();
        let r = p.rest_state();
        let mut s = PlantState::from_internal(&p, r.p_a, r.p_b, r.x_p + 0.002, 0.0);
        // equilibrium of the closed chambers from a long run
        let mut probe = s;
        for _ in 0..20_000 {
            probe = step(&probe, 0.0, 1e-3, &p, &unc, 0.0).unwrap();
        }
        let x_eq = probe.x_p;
        let energy = |s: &PlantState| 0.5 * p.m_piston * s.x_p_dot.powi(2) + 0.5 * p.k_spring * (s.x_p - x_eq).powi(2);
        let mut last = energy(&s);
        for _ in 0..20 {
            for _ in 0..100 {
                s = step(&s, 0.0, 1e-3, &p, &unc, 0.0).unwrap();
            }
            let e = energy(&s);
            assert!(e <= last + 1e-12, "{e} > {last}");
            last = e;
        }
    }

    #[test]
    fn measure_without_noise_is_identity() {
        let (p, unc) = nominal();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = p.rest_state();
        assert_eq!(measure(&s, &unc, &mut rng), s);
    }

    #[test]
    fn measurement_noise_statistics() {
        let p = HydraulicParams::default();
        let mut unc = UncertaintyConfig::nominal();
        unc.noise_std[F_L] = 2.0;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let s = p.rest_state();
        let n = 100_000;
        let (mut sum, mut sq) = (0.0, 0.0);
        for _ in 0..n {
            let m = measure(&s, &unc, &mut rng);
            assert_eq!(m.f_h, s.f_h);
            let d = m.f_l - s.f_l;
            sum += d;
            sq += d * d;
        }
        let mean = sum / n as f64;
        let sd = (sq / n as f64 - mean * mean).sqrt();
        assert!((sd - 2.0).abs() < 0.03 * 2.0, "{sd}");
    }

    #[test]
    fn seeded_plants_repeat() {
        let p = HydraulicParams::default();
        let unc = UncertaintyConfig {
            disturbance: Disturbance::BandLimited { bias: 0.0, std: 1e-4, cutoff_hz: 5.0 },
            noise_std: [1.0; STATE_DIM],
            ..Default::default()
        };
        let run = || {
            let mut pl = Plant::new(p, unc, 1e-3, 99).unwrap();
            (0..200).map(|k| {
                pl.step(0.01 * ((k as f64) * 0.05).sin()).unwrap();
                pl.measured().f_l
            }).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn band_limited_disturbance_has_target_std() {
        let mut d = DisturbanceProcess::new(Disturbance::BandLimited { bias: 1e-5, std: 2e-4, cutoff_hz: 10.0 }, 3);
        let vals: Vec<f64> = (0..200_000).map(|_| { d.advance(1e-3); d.current() }).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let sd = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((sd - 2e-4).abs() < 0.1 * 2e-4, "{sd}");
        assert!((mean - 1e-5).abs() < 3e-5);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = HydraulicParams { alpha: 1.5, ..Default::default() };
        assert!(p.validate().is_err());
        let p = HydraulicParams { p_t: 20e6, ..Default::default() };
        assert!(p.validate().is_err());
        assert!(UncertaintyConfig { c1: 0.0, ..Default::default() }.validate().is_err());
    }
}
