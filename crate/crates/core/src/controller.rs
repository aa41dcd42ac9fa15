//! Feedback-linearising force controller with a PI inner loop and the gain
//! correction hook driven by the policy.
//!
//! The law is `u = (f_r_dot + Kp e_h + Ki ∫e_h - h) / g` with `h`, `g` taken
//! from the nominal model (`C1 = C2 = 1`, `d = 0`) at the measured state.

use serde::{Deserialize, Serialize};

use crate::plant::{h_and_g, HydraulicParams, PlantState, STATE_DIM};

/// Bounds on the policy's gain corrections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GainBounds {
    pub dkp_min: f64,
    pub dkp_max: f64,
    pub dki_min: f64,
    pub dki_max: f64,
}

impl Default for GainBounds {
    fn default() -> Self {
        Self {
            dkp_min: 0.0,
            dkp_max: 75.0,
            dki_min: 0.0,
            dki_max: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlGains {
    pub kp: f64,
    pub ki: f64,
    pub dkp: f64,
    pub dki: f64,
    pub bounds: GainBounds,
}

impl FlGains {
    pub fn fixed(kp: f64, ki: f64) -> Self {
        Self {
            kp,
            ki,
            dkp: 0.0,
            dki: 0.0,
            bounds: GainBounds::default(),
        }
    }

    pub fn effective(&self) -> (f64, f64) {
        (self.kp + self.dkp, self.ki + self.dki)
    }

    /// Map an action in `[-1, 1]^2` affinely onto the correction bounds.
    pub fn apply_gain_action(&self, action: [f64; 2]) -> FlGains {
        let b = self.bounds;
        let map = |a: f64, lo: f64, hi: f64| {
            let a = if a.is_finite() { a.clamp(-1.0, 1.0) } else { -1.0 };
            (lo + 0.5 * (a + 1.0) * (hi - lo)).clamp(lo, hi)
        };
        FlGains {
            dkp: map(action[0], b.dkp_min, b.dkp_max),
            dki: map(action[1], b.dki_min, b.dki_max),
            ..*self
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ControllerConfig {
    /// `g_min` as a fraction of `|g|` at mid-stroke nominal pressures.
    pub g_min_fraction: f64,
    /// Integral gain used to size the anti-windup bound.
    pub ki_default: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            g_min_fraction: 1e-2,
            ki_default: 5.0,
        }
    }
}

impl ControllerConfig {
    pub fn g_min(&self, p: &HydraulicParams) -> f64 {
        self.g_min_fraction * p.g_mid().abs()
    }

    /// `|∫e| <= 2 u_max |g|_typ / Ki_default`.
    pub fn integral_bound(&self, p: &HydraulicParams) -> f64 {
        2.0 * p.u_max * p.g_mid().abs() / self.ki_default.abs().max(1e-9)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControllerState {
    pub integral: f64,
    pub prev_ref: f64,
    /// Inner-loop error `f_r - f_h`.
    pub e_h: f64,
    /// Task error `f_r - f_l`.
    pub e_l: f64,
    pub u_prev: f64,
    pub singular_events: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlOutput {
    pub u_nom: f64,
    pub singular: bool,
}

/// Pure FL law at a measured state vector for a given integral value.
/// Returns `None` when `|g| < g_min`.
#[allow(clippy::too_many_arguments)]
pub fn fl_law(
    x: &[f64; STATE_DIM],
    f_r: f64,
    f_r_dot: f64,
    kp: f64,
    ki: f64,
    integral: f64,
    params: &HydraulicParams,
    g_min: f64,
) -> Option<f64> {
    let s = PlantState::from_array(x);
    let num = f_r_dot + kp * (f_r - s.f_h) + ki * integral;
    let (h, g) = h_and_g(params, s.p_a, s.p_b, s.x_p, s.x_p_dot, true).ok()?;
    let mut g = g;
    let mut u = (num - h) / g;
    if u < 0.0 {
        let (_, gn) = h_and_g(params, s.p_a, s.p_b, s.x_p, s.x_p_dot, false).ok()?;
        g = gn;
        u = (num - h) / g;
    }
    if !(g.abs() >= g_min) || !u.is_finite() {
        return None;
    }
    Some(u)
}

/// One controller update at the 1 kHz rate. Updates both error channels and
/// the clamped integral, then evaluates the law.
#[allow(clippy::too_many_arguments)]
pub fn fl_control(
    state: &PlantState,
    f_r: f64,
    f_r_dot: f64,
    gains: &FlGains,
    cs: &mut ControllerState,
    params: &HydraulicParams,
    cfg: &ControllerConfig,
    dt: f64,
) -> FlOutput {
    cs.e_h = f_r - state.f_h;
    cs.e_l = f_r - state.f_l;
    let bound = cfg.integral_bound(params);
    cs.integral = (cs.integral + cs.e_h * dt).clamp(-bound, bound);
    cs.prev_ref = f_r;
    let (kp, ki) = gains.effective();
    match fl_law(&state.to_array(), f_r, f_r_dot, kp, ki, cs.integral, params, cfg.g_min(params)) {
        Some(u) => {
            cs.u_prev = u;
            FlOutput { u_nom: u, singular: false }
        }
        None => {
            cs.singular_events += 1;
            FlOutput {
                u_nom: cs.u_prev,
                singular: true,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{self, UncertaintyConfig};

    #[test]
    fn action_mapping_endpoints() {
        let g = FlGains::fixed(15.0, 5.0);
        let lo = g.apply_gain_action([-1.0, -1.0]);
        assert_eq!((lo.dkp, lo.dki), (0.0, 0.0));
        let hi = g.apply_gain_action([1.0, 1.0]);
        assert_eq!((hi.dkp, hi.dki), (75.0, 10.0));
        let mid = g.apply_gain_action([0.0, 0.0]);
        assert_eq!((mid.dkp, mid.dki), (37.5, 5.0));
        let out = g.apply_gain_action([7.0, f64::NAN]);
        assert_eq!((out.dkp, out.dki), (75.0, 0.0));
        assert_eq!(hi.effective(), (90.0, 15.0));
    }

    #[test]
    fn pure_cancellation_when_errors_vanish() {
        let p = HydraulicParams::default();
        let cfg = ControllerConfig::default();
        let mut s = p.rest_state();
        s.x_p_dot = 0.003;
        let mut cs = ControllerState::default();
        let out = fl_control(&s, s.f_h, 0.0, &FlGains::fixed(15.0, 5.0), &mut cs, &p, &cfg, 1e-3);
        let (h, g) = h_and_g(&p, s.p_a, s.p_b, s.x_p, s.x_p_dot, true).unwrap();
        assert!(-h / g > 0.0);
        assert!((out.u_nom - (-h / g)).abs() < 1e-15);
        assert_eq!(cs.integral, 0.0);
    }

    #[test]
    fn zero_corrections_equal_baseline() {
        let p = HydraulicParams::default();
        let s = p.rest_state();
        let base = fl_law(&s.to_array(), 900.0, 50.0, 15.0, 5.0, 0.2, &p, 0.0).unwrap();
        let g = FlGains::fixed(15.0, 5.0);
        let (kp, ki) = g.effective();
        assert_eq!(fl_law(&s.to_array(), 900.0, 50.0, kp, ki, 0.2, &p, 0.0).unwrap(), base);
    }

    #[test]
    fn singular_g_holds_previous_input() {
        let p = HydraulicParams::default();
        let cfg = ControllerConfig::default();
        // u > 0 branch: both roots vanish when p_a = p_s and p_b = p_t
        let s = PlantState::from_internal(&p, p.p_s, p.p_t, 0.04, 0.0);
        let mut cs = ControllerState {
            u_prev: 0.033,
            ..Default::default()
        };
        let out = fl_control(&s, s.f_h + 100.0, 0.0, &FlGains::fixed(15.0, 5.0), &mut cs, &p, &cfg, 1e-3);
        assert!(out.singular);
        assert_eq!(out.u_nom, 0.033);
        assert_eq!(cs.singular_events, 1);
    }

    #[test]
    fn integral_respects_anti_windup() {
        let p = HydraulicParams::default();
        let cfg = ControllerConfig {
            ki_default: 1e9,
            ..Default::default()
        };
        let bound = cfg.integral_bound(&p);
        let s = p.rest_state();
        let mut cs = ControllerState::default();
        for _ in 0..1000 {
            fl_control(&s, s.f_h + 1e6, 0.0, &FlGains::fixed(15.0, 5.0), &mut cs, &p, &cfg, 1e-3);
            assert!(cs.integral.abs() <= bound);
        }
        assert_eq!(cs.integral, bound);
    }

    /// Perfect model: no friction, C1 = C2 = 1, d = 0. The closed loop on
    /// `e_h` must follow `e' = -Kp e - Ki ∫e`. The law runs at 100 kHz here:
    /// the deviation is a sample-and-hold effect that shrinks linearly with
    /// dt (about 7% RMS at 1 kHz).
    #[test]
    fn perfect_model_error_follows_linear_ode() {
        let p = HydraulicParams {
            b_viscous: 0.0,
            n_substeps: 1,
            ..Default::default()
        };
        let unc = UncertaintyConfig::nominal();
        let cfg = ControllerConfig::default();
        let (kp, ki) = (15.0, 5.0);
        let dt = 1e-5;
        let mut s = p.rest_state();
        let mut cs = ControllerState::default();
        // constant reference step of 100 N: e(0) = 100, ∫e(0) = 0
        let f_r = s.f_h + 100.0;
        let (mut e, mut ie) = (100.0, 0.0);
        let mut sim_err = Vec::new();
        let mut ode_err = Vec::new();
        for _ in 0..200_000 {
            let out = fl_control(&s, f_r, 0.0, &FlGains::fixed(kp, ki), &mut cs, &p, &cfg, dt);
            s = plant::step(&s, out.u_nom, dt, &p, &unc, 0.0).unwrap();
            // independent fine-step integration of the linear ODE
            for _ in 0..10 {
                let h = dt / 10.0;
                let de = -kp * e - ki * ie;
                ie += h * e;
                e += h * de;
            }
            sim_err.push(f_r - s.f_h);
            ode_err.push(e);
        }
        let rms = |v: &[f64]| (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        let diff: Vec<f64> = sim_err.iter().zip(&ode_err).map(|(a, b)| a - b).collect();
        assert!(rms(&diff) <= 0.01 * rms(&ode_err), "{} vs {}", rms(&diff), rms(&ode_err));
    }

    #[test]
    fn fixed_high_gains_track_one_hertz() {
        let p = HydraulicParams::default();
        let unc = UncertaintyConfig::default();
        let cfg = ControllerConfig::default();
        let dt = 1e-3;
        let mut pl = plant::Plant::new(p, unc, dt, 0).unwrap();
        let mut cs = ControllerState::default();
        let f0 = pl.state().f_l;
        let mut se = 0.0;
        let mut n = 0;
        for k in 0..6000 {
            let t = k as f64 * dt;
            let w = 2.0 * std::f64::consts::PI;
            let (f_r, f_r_dot) = (f0 + 300.0 * (w * t).sin(), 300.0 * w * (w * t).cos());
            let s = pl.measured();
            let out = fl_control(&s, f_r, f_r_dot, &FlGains::fixed(90.0, 15.0), &mut cs, &p, &cfg, dt);
            let next = pl.step(out.u_nom).unwrap();
            if t >= 2.0 {
                let t1 = t + dt;
                let e = f0 + 300.0 * (w * t1).sin() - next.f_l;
                se += e * e;
                n += 1;
            }
        }
        let rmse = (se / n as f64).sqrt();
        assert!(rmse < 15.0, "{rmse}");
    }
}
