//! Interchangeable continuous-time dynamics backends `x_dot = f(x, u)` over
//! the 8-dimensional measured state, selected by name.
//!
//! Every backend is consistent with explicit Euler: `x_next = x + dt f(x, u)`.

use crate::error::{Error, Result};
use crate::plant::{self, HydraulicParams, PlantState, UncertaintyConfig, STATE_DIM};

pub type State = [f64; STATE_DIM];

pub trait Dynamics: Send + Sync {
    fn name(&self) -> &str;

    fn derivative(&self, x: &State, u: f64) -> Result<State>;

    fn step(&self, x: &State, u: f64, dt: f64) -> Result<State> {
        let f = self.derivative(x, u)?;
        let mut out = *x;
        for i in 0..STATE_DIM {
            out[i] += dt * f[i];
        }
        Ok(out)
    }
}

/// Exact one-step derivative of a plant configuration at a fixed `dt`: the
/// simulator is stepped once and the difference quotient returned. With the
/// true plant's parameters this is the derivative oracle.
#[derive(Debug, Clone)]
pub struct PlantDynamics {
    label: String,
    pub params: HydraulicParams,
    pub unc: UncertaintyConfig,
    pub disturbance: f64,
    pub dt: f64,
}

impl PlantDynamics {
    /// The true plant with a constant disturbance value.
    pub fn oracle(params: HydraulicParams, unc: UncertaintyConfig, dt: f64) -> Self {
        let disturbance = match unc.disturbance {
            plant::Disturbance::Constant { value } => value,
            plant::Disturbance::BandLimited { bias, .. } => bias,
        };
        Self {
            label: "plant".into(),
            params,
            unc,
            disturbance,
            dt,
        }
    }

    /// The textbook model: `C1 = C2 = 1`, `d = 0`, no friction.
    pub fn analytic(params: HydraulicParams, dt: f64) -> Self {
        Self {
            label: "analytic".into(),
            params: HydraulicParams {
                b_viscous: 0.0,
                ..params
            },
            unc: UncertaintyConfig::nominal(),
            disturbance: 0.0,
            dt,
        }
    }
}

impl Dynamics for PlantDynamics {
    fn name(&self) -> &str {
        &self.label
    }

    fn derivative(&self, x: &State, u: f64) -> Result<State> {
        let s = PlantState::from_array(x);
        let next = plant::step(&s, u, self.dt, &self.params, &self.unc, self.disturbance)?;
        let n = next.to_array();
        let mut f = [0.0; STATE_DIM];
        for i in 0..STATE_DIM {
            f[i] = (n[i] - x[i]) / self.dt;
        }
        Ok(f)
    }

    fn step(&self, x: &State, u: f64, dt: f64) -> Result<State> {
        if (dt - self.dt).abs() <= 1e-15 {
            let s = PlantState::from_array(x);
            return Ok(plant::step(&s, u, self.dt, &self.params, &self.unc, self.disturbance)?.to_array());
        }
        let f = self.derivative(x, u)?;
        let mut out = *x;
        for i in 0..STATE_DIM {
            out[i] += dt * f[i];
        }
        Ok(out)
    }
}

/// Registered backend names; `surrogate` requires trained weights.
pub const BACKENDS: [&str; 3] = ["plant", "analytic", "surrogate"];

/// Construct a backend by name.
pub fn build(
    name: &str,
    params: HydraulicParams,
    unc: UncertaintyConfig,
    dt: f64,
    surrogate: Option<&crate::surrogate::SurrogateModel>,
) -> Result<Box<dyn Dynamics>> {
    match name {
        "plant" => Ok(Box::new(PlantDynamics::oracle(params, unc, dt))),
        "analytic" => Ok(Box::new(PlantDynamics::analytic(params, dt))),
        "surrogate" => surrogate
            .cloned()
            .map(|s| Box::new(s) as Box<dyn Dynamics>)
            .ok_or(Error::Prerequisite {
                artifact: "surrogate weights".into(),
                command: "train-model",
            }),
        other => Err(Error::Config(format!("unknown dynamics backend `{other}` (known: {BACKENDS:?})"))),
    }
}
