//! Learned contraction metric, the per-step certificate and the scalar
//! minimal-correction QP filter.
//!
//! The metric lives in normalised state coordinates `z = (x - mean) / std`.
//! Every Jacobian is taken in the same coordinates; the input stays in amps
//! so the correction `du` is a valve current.

use nalgebra::{DMatrix, DVector, SMatrix};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{fl_control, fl_law, ControllerConfig, ControllerState, FlGains};
use crate::dynamics::{Dynamics, State};
use crate::error::{Error, Result};
use crate::nn::{jacobian_fd, AdamState, Grads, HiddenActivation, Mlp, OutputActivation, Tape, WeightsBundle};
use crate::plant::{HydraulicParams, Plant, PlantState, UncertaintyConfig, F_L, STATE_DIM};
use crate::reference::{Reference, ReferenceProgram};
use crate::surrogate::{Normalizer, DIVERGENCE_FACTOR};

pub const TRI: usize = STATE_DIM * (STATE_DIM + 1) / 2;

type Mat8 = SMatrix<f64, STATE_DIM, STATE_DIM>;

/// Row-major packed index of `L[i][j]`, `j <= i`.
fn tri_index(i: usize, j: usize) -> usize {
    i * (i + 1) / 2 + j
}

/// `M(z) = L(z) L(z)^T + eps I` with `L` read from the network output.
#[derive(Debug, Clone)]
pub struct MetricNet {
    pub net: Mlp,
    pub eps_spd: f64,
    /// Coordinates the metric was trained in.
    pub norm: Normalizer,
}

impl MetricNet {
    /// Random hidden layers; the output layer starts near `L = I`.
    pub fn new<R: Rng + ?Sized>(hidden_layers: usize, hidden_size: usize, eps_spd: f64, norm: Normalizer, rng: &mut R) -> Result<Self> {
        let mut sizes = vec![STATE_DIM];
        sizes.extend(std::iter::repeat_n(hidden_size, hidden_layers));
        sizes.push(TRI);
        let mut net = Mlp::new(&sizes, HiddenActivation::Relu, OutputActivation::Identity, rng)?;
        let last = net.num_layers() - 1;
        net.weights_mut(last).iter_mut().for_each(|w| *w *= 0.1);
        for i in 0..STATE_DIM {
            net.biases_mut(last)[tri_index(i, i)] = 1.0;
        }
        Ok(Self { net, eps_spd, norm })
    }

    /// All-zero weights: `M = eps I` everywhere.
    pub fn zeros(hidden_layers: usize, hidden_size: usize, eps_spd: f64, norm: Normalizer) -> Result<Self> {
        let mut sizes = vec![STATE_DIM];
        sizes.extend(std::iter::repeat_n(hidden_size, hidden_layers));
        sizes.push(TRI);
        let net = Mlp::zeros(&sizes, HiddenActivation::Relu, OutputActivation::Identity)?;
        Ok(Self { net, eps_spd, norm })
    }

    fn assemble(&self, out: &[f64]) -> Result<(Mat8, Mat8)> {
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("metric network produced a non-finite output".into()));
        }
        let mut l = Mat8::zeros();
        for i in 0..STATE_DIM {
            for j in 0..=i {
                l[(i, j)] = out[tri_index(i, j)];
            }
        }
        let m = l * l.transpose() + Mat8::identity() * self.eps_spd;
        Ok((m, l))
    }

    /// Metric at a normalised state.
    pub fn metric(&self, z: &State) -> Result<Mat8> {
        let out = self.net.forward(z)?;
        Ok(self.assemble(&out)?.0)
    }

    /// Metric plus what [`MetricNet::backward`] needs.
    pub fn metric_tape(&self, z: &State, tape: &mut Tape) -> Result<(Mat8, Mat8)> {
        self.net.forward_tape(z, tape)?;
        self.assemble(tape.output())
    }

    /// Accumulate parameter gradients for `dloss/dM = g` (any square matrix;
    /// entries are treated as independent).
    pub fn backward(&self, tape: &Tape, l: &Mat8, g: &Mat8, grads: &mut Grads) -> Result<()> {
        let dl = (g + g.transpose()) * l;
        let mut d_out = [0.0; TRI];
        for i in 0..STATE_DIM {
            for j in 0..=i {
                d_out[tri_index(i, j)] = dl[(i, j)];
            }
        }
        self.net.backward_accumulate(tape, &d_out, grads)?;
        Ok(())
    }

    pub fn to_bundle(&self) -> WeightsBundle {
        let mut b = WeightsBundle::new();
        b.push_net("metric", &self.net);
        b.push_scalar("eps_spd", self.eps_spd);
        self.norm.write_bundle(&mut b);
        b
    }

    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        let net = b.net("metric")?.clone();
        if net.input_dim() != STATE_DIM || net.output_dim() != TRI {
            return Err(Error::Data("metric network has the wrong shape".into()));
        }
        Ok(Self {
            net,
            eps_spd: b.scalar("eps_spd")?,
            norm: Normalizer::from_bundle(b)?,
        })
    }
}

/// Quantities of one certificate evaluation, in normalised coordinates.
#[derive(Debug, Clone)]
pub struct CertificateEval {
    pub m: DMatrix<f64>,
    pub m_dot: DMatrix<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub k: DVector<f64>,
    pub v: DVector<f64>,
    pub cert_value: f64,
    pub qp_a: f64,
    pub qp_b: f64,
    /// Unclamped QP solution.
    pub delta_u: f64,
    /// A finite-difference evaluation failed; the step counts as violated.
    pub failed: bool,
}

impl CertificateEval {
    pub fn satisfied(&self) -> bool {
        !self.failed && self.cert_value <= 0.0
    }

    fn failure(n: usize) -> Self {
        Self {
            m: DMatrix::zeros(n, n),
            m_dot: DMatrix::zeros(n, n),
            a: DMatrix::zeros(n, n),
            b: DVector::zeros(n),
            k: DVector::zeros(n),
            v: DVector::zeros(n),
            cert_value: 0.0,
            qp_a: 0.0,
            qp_b: 0.0,
            delta_u: 0.0,
            failed: true,
        }
    }
}

/// `v^T (M_dot + sym(M (A + B K)) + 2 lambda M) v` and the QP row
/// `a = 2 v^T M B`, `b = -cert`. `sym(X) = X + X^T`.
pub fn contraction_terms(
    m: &DMatrix<f64>,
    m_dot: &DMatrix<f64>,
    a: &DMatrix<f64>,
    b: &DVector<f64>,
    k: &DVector<f64>,
    v: &DVector<f64>,
    lambda: f64,
) -> (f64, f64, f64) {
    let acl = a + b * k.transpose();
    let mac = m * acl;
    let inner = m_dot + &mac + mac.transpose() + m * (2.0 * lambda);
    let cert = v.dot(&(inner * v));
    let qa = 2.0 * v.dot(&(m * b));
    (cert, qa, -cert)
}

/// Closed-form minimiser of `|du|` subject to `a du <= b`.
/// Returns `(du, infeasible)`.
pub fn solve_qp(a: f64, b: f64) -> (f64, bool) {
    if !(a.is_finite() && b.is_finite()) {
        return (0.0, true);
    }
    if b >= 0.0 {
        return (0.0, false);
    }
    if a == 0.0 {
        return (0.0, true);
    }
    let mut du = b / a;
    // b < 0, so scaling du up tightens a du towards the feasible side
    let mut tries = 0;
    while a * du > b && tries < 8 {
        du *= 1.0 + 4.0 * f64::EPSILON;
        tries += 1;
    }
    (du, a * du > b)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterOutcome {
    pub u_filtered: f64,
    /// Applied correction `u_filtered - clamp(u_nom)`.
    pub delta_u: f64,
    pub infeasible: bool,
}

/// Apply the QP correction and the actuator limit.
pub fn qp_filter(u_nom: f64, eval: &CertificateEval, u_max: f64) -> FilterOutcome {
    let base = u_nom.clamp(-u_max, u_max);
    if eval.failed {
        return FilterOutcome {
            u_filtered: base,
            delta_u: 0.0,
            infeasible: true,
        };
    }
    let (du, mut infeasible) = solve_qp(eval.qp_a, eval.qp_b);
    let u = (u_nom + du).clamp(-u_max, u_max);
    let applied = u - base;
    if !infeasible && eval.qp_a * (u - u_nom) > eval.qp_b {
        infeasible = true;
    }
    FilterOutcome {
        u_filtered: u,
        delta_u: applied,
        infeasible,
    }
}

/// Controller operating point for the feedback Jacobian `K`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlPoint {
    pub f_r: f64,
    pub f_r_dot: f64,
    pub kp: f64,
    pub ki: f64,
    pub integral: f64,
}

/// Everything needed to evaluate the certificate online.
pub struct Certifier<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub metric: &'a MetricNet,
    pub params: HydraulicParams,
    pub g_min: f64,
    pub lambda: f64,
    /// Finite-difference step in normalised coordinates.
    pub fd_step: f64,
}

/// Jacobians of the dynamics and the FL law in normalised coordinates.
pub struct Linearisation {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub k: DVector<f64>,
}

impl Certifier<'_> {
    fn norm(&self) -> &Normalizer {
        &self.metric.norm
    }

    pub fn linearise(&self, x: &State, u: f64, cp: &ControlPoint) -> Result<Linearisation> {
        let norm = self.norm();
        let z = norm.norm_state(x);
        let zdot = |zz: &[f64], uu: f64| -> Vec<f64> {
            let xx = norm.denorm_state(&to_state(zz));
            match self.dynamics.derivative(&xx, uu) {
                Ok(f) => (0..STATE_DIM).map(|i| f[i] / norm.in_std[i]).collect(),
                Err(_) => vec![f64::NAN; STATE_DIM],
            }
        };
        let a = jacobian_fd(|zz| zdot(zz, u), &z, self.fd_step)?;
        let hu = self.fd_step * norm.in_std[STATE_DIM];
        let bm = jacobian_fd(|uu| zdot(&z, uu[0]), &[u], hu)?;
        let law = |zz: &[f64]| -> Vec<f64> {
            let xx = norm.denorm_state(&to_state(zz));
            let u = fl_law(&xx, cp.f_r, cp.f_r_dot, cp.kp, cp.ki, cp.integral, &self.params, self.g_min);
            vec![u.unwrap_or(f64::NAN)]
        };
        let km = jacobian_fd(law, &z, self.fd_step)?;
        Ok(Linearisation {
            a,
            b: bm.column(0).into_owned(),
            k: km.row(0).transpose(),
        })
    }

    /// Certificate at `x` under input `u`, with `M_dot` from the step to
    /// `x_next` taken `dt` later. Non-finite evaluations yield a failed eval.
    pub fn evaluate(&self, x: &State, x_next: &State, u: f64, cp: &ControlPoint, dt: f64) -> CertificateEval {
        self.try_evaluate(x, x_next, u, cp, dt).unwrap_or_else(|_| CertificateEval::failure(STATE_DIM))
    }

    fn try_evaluate(&self, x: &State, x_next: &State, u: f64, cp: &ControlPoint, dt: f64) -> Result<CertificateEval> {
        let norm = self.norm();
        let lin = self.linearise(x, u, cp)?;
        let m = to_dmat(&self.metric.metric(&norm.norm_state(x))?);
        let mn = to_dmat(&self.metric.metric(&norm.norm_state(x_next))?);
        let m_dot = (mn - &m) / dt;
        let mut v = DVector::zeros(STATE_DIM);
        v[F_L] = (x[F_L] - cp.f_r) / norm.in_std[F_L];
        let (cert, qa, qb) = contraction_terms(&m, &m_dot, &lin.a, &lin.b, &lin.k, &v, self.lambda);
        if !(cert.is_finite() && qa.is_finite()) {
            return Err(Error::Divergence("non-finite certificate".into()));
        }
        let (du, _) = solve_qp(qa, qb);
        Ok(CertificateEval {
            m,
            m_dot,
            a: lin.a,
            b: lin.b,
            k: lin.k,
            v,
            cert_value: cert,
            qp_a: qa,
            qp_b: qb,
            delta_u: du,
            failed: false,
        })
    }

    /// Online use: `x_next` is predicted by the certificate dynamics.
    pub fn evaluate_online(&self, x: &State, u_nom: f64, cp: &ControlPoint, dt: f64) -> CertificateEval {
        match self.dynamics.step(x, u_nom, dt) {
            Ok(xn) if xn.iter().all(|v| v.is_finite()) => self.evaluate(x, &xn, u_nom, cp, dt),
            _ => CertificateEval::failure(STATE_DIM),
        }
    }
}

fn to_state(z: &[f64]) -> State {
    let mut s = [0.0; STATE_DIM];
    s.copy_from_slice(&z[..STATE_DIM]);
    s
}

fn to_dmat(m: &Mat8) -> DMatrix<f64> {
    DMatrix::from_iterator(STATE_DIM, STATE_DIM, m.iter().copied())
}

// ---- labelled trajectories --------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelConfig {
    /// Episodes with the known-stable gains.
    pub n_stable: usize,
    /// Episodes with randomised gains.
    pub n_unstable: usize,
    pub steps_per_episode: usize,
    pub stable_kp: f64,
    pub stable_ki: f64,
    pub kp_range: [f64; 2],
    pub ki_range: [f64; 2],
    pub reference: ReferenceProgram,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            n_stable: 12,
            n_unstable: 24,
            steps_per_episode: 1800,
            stable_kp: 90.0,
            stable_ki: 15.0,
            kp_range: [-40.0, 40.0],
            ki_range: [-5.0, 5.0],
            reference: ReferenceProgram::default(),
        }
    }
}

/// One closed-loop run on the plant, truncated at divergence.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledEpisode {
    /// `states.len() == inputs.len() + 1`.
    pub states: Vec<State>,
    pub inputs: Vec<f64>,
    pub points: Vec<ControlPoint>,
    pub kp: f64,
    pub ki: f64,
    pub stable: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct LabeledDataset {
    pub dt: f64,
    pub episodes: Vec<LabeledEpisode>,
}

impl LabeledDataset {
    pub fn counts(&self) -> (usize, usize) {
        let s = self.episodes.iter().filter(|e| e.stable).count();
        (s, self.episodes.len() - s)
    }
}

/// True when the task error left `DIVERGENCE_FACTOR` times the reference
/// amplitude or the state stopped being finite.
pub fn diverged(state: &PlantState, f_r: f64, amplitude: f64) -> bool {
    !state.is_finite() || (f_r - state.f_l).abs() > DIVERGENCE_FACTOR * amplitude.max(1.0)
}

/// Run stable and randomised-gain FL episodes on the plant and label each by
/// outcome.
pub fn generate_labeled_trajectories(
    cfg: &LabelConfig,
    params: &HydraulicParams,
    unc: &UncertaintyConfig,
    ctrl: &ControllerConfig,
    dt: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = LabeledDataset { dt, episodes: vec![] };
    for k in 0..cfg.n_stable + cfg.n_unstable {
        let (kp, ki) = if k < cfg.n_stable {
            (cfg.stable_kp, cfg.stable_ki)
        } else {
            (uniform(&mut rng, cfg.kp_range), uniform(&mut rng, cfg.ki_range))
        };
        let reference = cfg.reference.sample(&mut rng);
        let plant = Plant::new(*params, *unc, dt, rng.random())?;
        out.episodes.push(run_labeled(plant, reference.as_ref(), kp, ki, cfg.steps_per_episode, params, ctrl, dt));
    }
    Ok(out)
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] { rng.random_range(r[0]..r[1]) } else { r[0] }
}

#[allow(clippy::too_many_arguments)]
fn run_labeled(
    mut plant: Plant,
    reference: &dyn Reference,
    kp: f64,
    ki: f64,
    steps: usize,
    params: &HydraulicParams,
    ctrl: &ControllerConfig,
    dt: f64,
) -> LabeledEpisode {
    let gains = FlGains::fixed(kp, ki);
    let mut cs = ControllerState::default();
    let mut ep = LabeledEpisode {
        kp,
        ki,
        stable: true,
        ..Default::default()
    };
    let mut x = plant.measured();
    ep.states.push(x.to_array());
    for t in 0..steps {
        let (f_r, f_r_dot) = reference.eval(t as f64 * dt);
        let u = fl_control(&x, f_r, f_r_dot, &gains, &mut cs, params, ctrl, dt).u_nom.clamp(-params.u_max, params.u_max);
        let point = ControlPoint {
            f_r,
            f_r_dot,
            kp,
            ki,
            integral: cs.integral,
        };
        if plant.step(u).is_err() {
            ep.stable = false;
            break;
        }
        x = plant.measured();
        ep.inputs.push(u);
        ep.points.push(point);
        ep.states.push(x.to_array());
        if diverged(&x, f_r, reference.amplitude()) {
            ep.stable = false;
            break;
        }
    }
    ep
}

// ---- metric training ----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricTrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    /// Window length `H_m` (steps summed per window: `H_m + 1`).
    pub horizon: usize,
    pub w_l: f64,
    pub lambda_f: f64,
    pub lambda_tr: f64,
    pub lambda_logdet: f64,
    /// Contraction rate used in training and filtering.
    pub lambda_rate: f64,
    pub eps_spd: f64,
    pub fd_step: f64,
}

impl Default for MetricTrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 1024,
            hidden_layers: 2,
            hidden_size: 64,
            learning_rate: 1e-3,
            horizon: 10,
            w_l: 100.0,
            lambda_f: 1e-3,
            lambda_tr: 1e-3,
            lambda_logdet: 1e-3,
            lambda_rate: 0.1,
            eps_spd: 1e-6,
            fd_step: 1e-4,
        }
    }
}

impl MetricTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("batch_size", self.batch_size as f64),
            ("hidden_size", self.hidden_size as f64),
            ("learning_rate", self.learning_rate),
            ("eps_spd", self.eps_spd),
            ("fd_step", self.fd_step),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("metric.{k} must be positive, got {v}")));
            }
        }
        let nonneg = [
            ("w_l", self.w_l),
            ("lambda_f", self.lambda_f),
            ("lambda_tr", self.lambda_tr),
            ("lambda_logdet", self.lambda_logdet),
            ("lambda_rate", self.lambda_rate),
        ];
        for (k, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("metric.{k} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-step inputs of the compact certificate. With `v = v3 e_fl` only column
/// `F_L` of `A + B K` enters the quadratic form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CertSample {
    pub z: State,
    pub z_next: State,
    pub acl: State,
    pub v3: f64,
    pub dt: f64,
    pub stable: bool,
}

impl CertSample {
    /// Certificate value under `net`; equals [`Certifier::evaluate`] on
    /// the same inputs.
    pub fn cert(&self, net: &MetricNet, lambda: f64) -> Result<f64> {
        let m = net.metric(&self.z)?;
        let mn = net.metric(&self.z_next)?;
        Ok(self.cert_from(&m, &mn, lambda))
    }

    fn cert_from(&self, m: &Mat8, mn: &Mat8, lambda: f64) -> f64 {
        let row: f64 = (0..STATE_DIM).map(|j| m[(F_L, j)] * self.acl[j]).sum();
        self.v3 * self.v3 * ((mn[(F_L, F_L)] - m[(F_L, F_L)]) / self.dt + 2.0 * row + 2.0 * lambda * m[(F_L, F_L)])
    }
}

/// Linearise every logged step of every episode under the certificate
/// dynamics. Steps whose Jacobians fail are dropped; the count is returned.
pub fn certificate_samples(
    data: &LabeledDataset,
    dynamics: &dyn Dynamics,
    norm: &Normalizer,
    params: &HydraulicParams,
    g_min: f64,
    fd_step: f64,
) -> (Vec<Vec<CertSample>>, usize) {
    let probe = MetricNet {
        net: Mlp::zeros(&[STATE_DIM, TRI], HiddenActivation::Relu, OutputActivation::Identity).expect("static shape"),
        eps_spd: 1.0,
        norm: norm.clone(),
    };
    let cf = Certifier {
        dynamics,
        metric: &probe,
        params: *params,
        g_min,
        lambda: 0.0,
        fd_step,
    };
    let mut dropped = 0;
    let mut out = Vec::with_capacity(data.episodes.len());
    for ep in &data.episodes {
        let mut samples = Vec::with_capacity(ep.inputs.len());
        for t in 0..ep.inputs.len() {
            let x = &ep.states[t];
            let cp = &ep.points[t];
            match cf.linearise(x, ep.inputs[t], cp) {
                Ok(lin) => {
                    let acl = &lin.a + &lin.b * lin.k.transpose();
                    let col: State = std::array::from_fn(|j| acl[(j, F_L)]);
                    if col.iter().any(|v| !v.is_finite()) {
                        dropped += 1;
                        continue;
                    }
                    samples.push(CertSample {
                        z: norm.norm_state(x),
                        z_next: norm.norm_state(&ep.states[t + 1]),
                        acl: col,
                        v3: (x[F_L] - cp.f_r) / norm.in_std[F_L],
                        dt: data.dt,
                        stable: ep.stable,
                    });
                }
                Err(_) => dropped += 1,
            }
        }
        out.push(samples);
    }
    (out, dropped)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    /// Mean weighted contraction loss per window, per epoch.
    pub epoch_contraction: Vec<f64>,
    /// Mean total loss per window, per epoch.
    pub epoch_total: Vec<f64>,
    /// Mean total loss of every optimiser step, in order.
    pub batch_total: Vec<f64>,
    pub skipped_windows: usize,
}

struct Regulariser {
    value: f64,
    grad: Mat8,
}

fn regulariser(m: &Mat8, cfg: &MetricTrainingConfig) -> Option<Regulariser> {
    let fro = m.norm();
    let shifted = m + Mat8::identity() * cfg.eps_spd;
    let chol = shifted.cholesky()?;
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let inv = chol.inverse();
    let value = cfg.lambda_f * fro + cfg.lambda_tr * m.trace() - cfg.lambda_logdet * logdet;
    let mut grad = Mat8::identity() * cfg.lambda_tr - inv * cfg.lambda_logdet;
    if fro > 0.0 {
        grad += m * (cfg.lambda_f / fro);
    }
    Some(Regulariser { value, grad })
}

/// Loss and gradient of one window; `None` if anything is non-finite.
fn window_grad(
    net: &MetricNet,
    window: &[CertSample],
    cfg: &MetricTrainingConfig,
    grads: &mut Grads,
    tapes: &mut (Tape, Tape),
) -> Result<Option<(f64, f64)>> {
    let mut local = Grads::zeros_like(&net.net);
    let (mut c_sum, mut total) = (0.0, 0.0);
    for s in window {
        let (m, l) = net.metric_tape(&s.z, &mut tapes.0)?;
        let (mn, ln) = net.metric_tape(&s.z_next, &mut tapes.1)?;
        let cert = s.cert_from(&m, &mn, cfg.lambda_rate);
        let Some(reg) = regulariser(&m, cfg) else {
            return Ok(None);
        };
        let (c, dc) = if s.stable {
            if cert > 0.0 { (cert, 1.0) } else { (0.0, 0.0) }
        } else if cert < 0.0 {
            (-cert, -1.0)
        } else {
            (0.0, 0.0)
        };
        if !(cert.is_finite() && reg.value.is_finite()) {
            return Ok(None);
        }
        c_sum += cfg.w_l * c;
        total += cfg.w_l * c + reg.value;
        let mut g = reg.grad;
        if dc != 0.0 {
            let w = cfg.w_l * dc * s.v3 * s.v3;
            g[(F_L, F_L)] += w * (2.0 * cfg.lambda_rate - 1.0 / s.dt);
            for j in 0..STATE_DIM {
                g[(F_L, j)] += w * 2.0 * s.acl[j];
            }
            let mut gn = Mat8::zeros();
            gn[(F_L, F_L)] = w / s.dt;
            net.backward(&tapes.1, &ln, &gn, &mut local)?;
        }
        net.backward(&tapes.0, &l, &g, &mut local)?;
    }
    if local.first_non_finite_layer().is_some() {
        return Ok(None);
    }
    grads.add_assign(&local);
    Ok(Some((c_sum, total)))
}

/// Train the metric on windows of `horizon + 1` consecutive logged steps.
pub fn train_metric(
    samples: &[Vec<CertSample>],
    init: MetricNet,
    cfg: &MetricTrainingConfig,
    seed: u64,
) -> Result<(MetricNet, MetricReport)> {
    cfg.validate()?;
    let mut net = init;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = cfg.horizon + 1;
    let mut windows: Vec<(usize, usize)> = vec![];
    for (e, s) in samples.iter().enumerate() {
        if s.len() >= w {
            windows.extend((0..=s.len() - w).map(|t| (e, t)));
        }
    }
    let mut report = MetricReport::default();
    if windows.is_empty() {
        return Ok((net, report));
    }
    let mut opt = AdamState::new(&net.net, cfg.learning_rate);
    let mut grads = Grads::zeros_like(&net.net);
    let mut tapes = (Tape::default(), Tape::default());
    for _ in 0..cfg.epochs {
        windows.shuffle(&mut rng);
        let (mut c_acc, mut t_acc, mut n_acc) = (0.0, 0.0, 0usize);
        for batch in windows.chunks(cfg.batch_size) {
            grads.clear();
            let mut used = 0usize;
            let mut b_acc = 0.0;
            for &(e, t) in batch {
                match window_grad(&net, &samples[e][t..t + w], cfg, &mut grads, &mut tapes)? {
                    Some((c, tot)) => {
                        c_acc += c;
                        t_acc += tot;
                        b_acc += tot;
                        used += 1;
                    }
                    None => report.skipped_windows += 1,
                }
            }
            if used == 0 {
                continue;
            }
            n_acc += used;
            report.batch_total.push(b_acc / used as f64);
            grads.scale(1.0 / used as f64);
            if opt.step(&mut net.net, &grads).is_err() {
                report.skipped_windows += used;
            }
        }
        let n = n_acc.max(1) as f64;
        report.epoch_contraction.push(c_acc / n);
        report.epoch_total.push(t_acc / n);
    }
    Ok((net, report))
}

/// Fraction of stable- and unstable-labelled steps with `cert > 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Separation {
    pub stable_violated: f64,
    pub unstable_violated: f64,
    pub stable_steps: usize,
    pub unstable_steps: usize,
}

pub fn separation(net: &MetricNet, samples: &[Vec<CertSample>], lambda: f64) -> Result<Separation> {
    let (mut sv, mut sn, mut uv, mut un) = (0usize, 0usize, 0usize, 0usize);
    for s in samples.iter().flatten() {
        let c = s.cert(net, lambda)?;
        if s.stable {
            sn += 1;
            sv += (c > 0.0) as usize;
        } else {
            un += 1;
            uv += (c > 0.0) as usize;
        }
    }
    let frac = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Separation {
        stable_violated: frac(sv, sn),
        unstable_violated: frac(uv, un),
        stable_steps: sn,
        unstable_steps: un,
    })
}

// ---- validation metrics -------------------------------------------------

/// One filter evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FilterRecord {
    pub cert_pre: f64,
    pub cert_post: f64,
    pub delta_u: f64,
    pub failed: bool,
    pub infeasible: bool,
}

impl FilterRecord {
    /// The post-filter value is the certificate linearised in the input,
    /// `cert + a (u_filtered - u_nom)`; it equals `cert` when no correction
    /// was requested.
    pub fn from_eval(eval: &CertificateEval, out: &FilterOutcome, u_nom: f64) -> Self {
        let post = if eval.delta_u == 0.0 || out.u_filtered == u_nom {
            eval.cert_value
        } else {
            eval.cert_value + eval.qp_a * (out.u_filtered - u_nom)
        };
        Self {
            cert_pre: eval.cert_value,
            cert_post: post,
            delta_u: out.delta_u,
            failed: eval.failed,
            infeasible: out.infeasible,
        }
    }

    fn pre_violated(&self) -> bool {
        self.failed || self.cert_pre > 0.0
    }

    fn post_violated(&self) -> bool {
        self.failed || self.cert_post > 0.0
    }
}

/// γ1..γ5 in percent / certificate units.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Gammas {
    pub g1: f64,
    pub g2: f64,
    pub g3: f64,
    pub g4: f64,
    pub g5: f64,
}

pub fn gamma_metrics(log: &[FilterRecord], u_max: f64) -> Result<Gammas> {
    if log.is_empty() {
        return Err(Error::Data("empty filter log".into()));
    }
    let n = log.len() as f64;
    let pct = |c: usize| 100.0 * c as f64 / n;
    Ok(Gammas {
        g1: 100.0 * log.iter().map(|r| r.delta_u.abs()).sum::<f64>() / n / u_max,
        g2: pct(log.iter().filter(|r| r.pre_violated()).count()),
        g3: log.iter().map(|r| r.cert_pre).sum::<f64>() / n,
        g4: pct(log.iter().filter(|r| r.post_violated()).count()),
        g5: log.iter().map(|r| r.cert_post).sum::<f64>() / n,
    })
}

// ---- validation episodes ------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValidationConfig {
    pub steps: usize,
    /// Plant steps between filter evaluations; the correction is held.
    pub filter_period: usize,
    pub n_unstable: usize,
    pub stable_kp: f64,
    pub stable_ki: f64,
    pub kp_range: [f64; 2],
    pub ki_range: [f64; 2],
    /// Backend for the certificate Jacobians (`surrogate` or `analytic`).
    pub dynamics: String,
    pub reference: ReferenceProgram,
}

impl Default for ValidationConfig {
    fn default() -> Self {
        Self {
            steps: 30_000,
            filter_period: 10,
            n_unstable: 20,
            stable_kp: 90.0,
            stable_ki: 15.0,
            kp_range: [-40.0, 40.0],
            ki_range: [-5.0, 5.0],
            dynamics: "surrogate".into(),
            reference: ReferenceProgram::default(),
        }
    }
}

/// Per-step trace of a validation episode.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TraceRow {
    pub t: f64,
    pub f_r: f64,
    pub f_l: f64,
    pub u_nom: f64,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ValidationEpisode {
    pub kp: f64,
    pub ki: f64,
    pub diverged: bool,
    pub records: Vec<FilterRecord>,
    pub trace: Vec<TraceRow>,
}

/// Run the FL controller on the plant, optionally behind the filter.
/// Certificate quantities are logged at every filter evaluation either way;
/// without a filter the correction is computed but not applied.
#[allow(clippy::too_many_arguments)]
pub fn run_validation_episode(
    plant: &mut Plant,
    reference: &dyn Reference,
    kp: f64,
    ki: f64,
    certifier: &Certifier,
    apply: bool,
    cfg: &ValidationConfig,
    ctrl: &ControllerConfig,
    dt: f64,
) -> ValidationEpisode {
    let params = certifier.params;
    let gains = FlGains::fixed(kp, ki);
    let mut cs = ControllerState::default();
    let mut ep = ValidationEpisode {
        kp,
        ki,
        ..Default::default()
    };
    let period = cfg.filter_period.max(1);
    let mut held = 0.0;
    let mut x = plant.measured();
    for t in 0..cfg.steps {
        let time = t as f64 * dt;
        let (f_r, f_r_dot) = reference.eval(time);
        let u_nom = fl_control(&x, f_r, f_r_dot, &gains, &mut cs, &params, ctrl, dt).u_nom;
        if t % period == 0 {
            let cp = ControlPoint {
                f_r,
                f_r_dot,
                kp,
                ki,
                integral: cs.integral,
            };
            let eval = certifier.evaluate_online(&x.to_array(), u_nom, &cp, dt);
            let out = qp_filter(u_nom, &eval, params.u_max);
            if apply {
                ep.records.push(FilterRecord::from_eval(&eval, &out, u_nom));
                held = out.delta_u;
            } else {
                let none = FilterOutcome {
                    u_filtered: u_nom,
                    delta_u: 0.0,
                    infeasible: false,
                };
                ep.records.push(FilterRecord::from_eval(&eval, &none, u_nom));
            }
        }
        let base = u_nom.clamp(-params.u_max, params.u_max);
        let u = if apply { (base + held).clamp(-params.u_max, params.u_max) } else { base };
        ep.trace.push(TraceRow {
            t: time,
            f_r,
            f_l: x.f_l,
            u_nom,
            u,
        });
        if plant.step(u).is_err() {
            ep.diverged = true;
            break;
        }
        x = plant.measured();
        if diverged(&x, f_r, reference.amplitude()) {
            ep.diverged = true;
            break;
        }
    }
    ep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PlantDynamics;

    fn scalar(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn scalar_toy_systems() {
        let one = scalar(1.0);
        let zero = scalar(0.0);
        let b = DVector::zeros(1);
        let k = DVector::zeros(1);
        let v = DVector::from_element(1, 3.0);
        let (c, _, qb) = contraction_terms(&one, &zero, &scalar(-1.0), &b, &k, &v, 0.5);
        assert!((c + 9.0).abs() < 1e-12);
        assert_eq!(qb, -c);
        let (c, _, _) = contraction_terms(&one, &zero, &scalar(1.0), &b, &k, &v, 0.1);
        assert!((c - 9.0 * 2.2).abs() < 1e-12);
        let (c, qa, _) = contraction_terms(&one, &zero, &scalar(1.0), &b, &k, &DVector::zeros(1), 0.1);
        assert_eq!((c, qa), (0.0, 0.0));
    }

    #[test]
    fn qp_cases() {
        assert_eq!(solve_qp(3.0, 0.5), (0.0, false));
        let (du, inf) = solve_qp(2.0, -4.0);
        assert!(!inf && (du + 2.0).abs() < 1e-12 && 2.0 * du <= -4.0);
        assert_eq!(solve_qp(0.0, -1.0), (0.0, true));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10_000 {
            let a: f64 = rng.random_range(-5.0..5.0);
            let b: f64 = rng.random_range(-5.0..5.0);
            let (du, inf) = solve_qp(a, b);
            if !inf {
                assert!(a * du <= b, "{a} {b} {du}");
            }
        }
    }

    #[test]
    fn filter_clamps_and_flags() {
        let mut e = CertificateEval::failure(1);
        e.failed = false;
        e.qp_a = 1.0;
        e.qp_b = -0.5;
        let out = qp_filter(0.0, &e, 1.0);
        assert!((out.u_filtered + 0.5).abs() < 1e-12 && !out.infeasible);
        let out = qp_filter(-0.9, &e, 1.0);
        assert_eq!(out.u_filtered, -1.0);
        assert!(out.infeasible);
        e.qp_b = 0.2;
        let out = qp_filter(3.0, &e, 1.0);
        assert_eq!((out.u_filtered, out.delta_u), (1.0, 0.0));
    }

    #[test]
    fn zero_net_gives_eps_identity() {
        let net = MetricNet::zeros(2, 16, 1e-6, Normalizer::identity()).unwrap();
        let m = net.metric(&[0.3; STATE_DIM]).unwrap();
        assert_eq!(m, Mat8::identity() * 1e-6);
    }

    #[test]
    fn metric_is_spd_for_random_nets() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..10 {
            let mut net = MetricNet::new(2, 32, 1e-6, Normalizer::identity(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let last = net.net.num_layers() - 1;
            net.net.weights_mut(last).iter_mut().for_each(|w| *w *= 40.0);
            for _ in 0..100 {
                let z: State = std::array::from_fn(|_| rng.random_range(-3.0..3.0));
                let m = net.metric(&z).unwrap();
                assert_eq!(m, m.transpose());
                let ev = m.symmetric_eigenvalues();
                // eigen-solver backward error is a few ulps of the largest eigenvalue
                let tol = 64.0 * f64::EPSILON * ev.amax();
                assert!(ev.min() >= 1e-6 - tol, "{}", ev.min());
            }
        }
    }

    #[test]
    fn metric_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = MetricNet::new(1, 12, 1e-6, Normalizer::identity(), &mut rng).unwrap();
        let z: State = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let g: Mat8 = Mat8::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let loss = |n: &MetricNet| (n.metric(&z).unwrap().component_mul(&g)).sum();
        let mut tape = Tape::default();
        let (_, l) = net.metric_tape(&z, &mut tape).unwrap();
        let mut grads = Grads::zeros_like(&net.net);
        net.backward(&tape, &l, &g, &mut grads).unwrap();
        for layer in 0..net.net.num_layers() {
            for i in (0..net.net.weights(layer).len()).step_by(7) {
                let mut p = net.clone();
                p.net.weights_mut(layer)[i] += 1e-6;
                let mut m = net.clone();
                m.net.weights_mut(layer)[i] -= 1e-6;
                let fd = (loss(&p) - loss(&m)) / 2e-6;
                let an = grads.weights[layer][i];
                assert!((fd - an).abs() <= 1e-5 * (1.0 + an.abs()), "{layer} {i}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn regulariser_gradient_matches_finite_differences() {
        let cfg = MetricTrainingConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = Mat8::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let m = a * a.transpose() + Mat8::identity() * 0.2;
        let r = regulariser(&m, &cfg).unwrap();
        for (i, j) in [(0, 0), (2, 5), (7, 7), (4, 1)] {
            let mut mp = m;
            mp[(i, j)] += 1e-6;
            let mut mm = m;
            mm[(i, j)] -= 1e-6;
            // perturb symmetrically so Cholesky sees a symmetric matrix
            if i != j {
                mp[(j, i)] += 1e-6;
                mm[(j, i)] -= 1e-6;
            }
            let fd = (regulariser(&mp, &cfg).unwrap().value - regulariser(&mm, &cfg).unwrap().value) / 2e-6;
            let an = if i == j { r.grad[(i, j)] } else { r.grad[(i, j)] + r.grad[(j, i)] };
            assert!((fd - an).abs() < 1e-7, "{i}{j}: {fd} vs {an}");
        }
    }

    fn toy_samples(stable: bool, n: usize, rng: &mut ChaCha8Rng) -> Vec<CertSample> {
        (0..n)
            .map(|_| {
                let z: State = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let mut zn = z;
                zn[F_L] += rng.random_range(-0.01..0.01);
                CertSample {
                    z,
                    z_next: zn,
                    acl: std::array::from_fn(|j| if j == F_L { 5.0 } else { rng.random_range(-20.0..20.0) }),
                    v3: rng.random_range(-0.5..0.5),
                    dt: 1e-3,
                    stable,
                }
            })
            .collect()
    }

    #[test]
    fn stable_only_training_reduces_violation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = vec![toy_samples(true, 400, &mut rng), toy_samples(true, 400, &mut rng)];
        let cfg = MetricTrainingConfig {
            batch_size: 64,
            hidden_size: 16,
            ..Default::default()
        };
        let init = MetricNet::new(2, 16, 1e-6, Normalizer::identity(), &mut rng).unwrap();
        let before = separation(&init, &samples, cfg.lambda_rate).unwrap().stable_violated;
        let (net, rep) = train_metric(&samples, init, &cfg, 1).unwrap();
        assert_eq!(rep.epoch_contraction.len(), 3);
        for w in rep.epoch_contraction.windows(2) {
            assert!(w[1] <= w[0], "{:?}", rep.epoch_contraction);
        }
        let after = separation(&net, &samples, cfg.lambda_rate).unwrap().stable_violated;
        assert!(after < before, "{before} -> {after}");
    }

    #[test]
    fn pure_regularisation_stays_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let samples = vec![toy_samples(true, 300, &mut rng)];
        let cfg = MetricTrainingConfig {
            w_l: 0.0,
            epochs: 30,
            batch_size: 32,
            hidden_size: 16,
            learning_rate: 3e-3,
            ..Default::default()
        };
        let init = MetricNet::new(2, 16, 1e-6, Normalizer::identity(), &mut rng).unwrap();
        let (net, rep) = train_metric(&samples, init, &cfg, 1).unwrap();
        assert!(rep.epoch_contraction.iter().all(|&c| c == 0.0));
        assert!(rep.epoch_total.last().unwrap() < rep.epoch_total.first().unwrap());
        let m = net.metric(&samples[0][0].z).unwrap();
        let ev = m.symmetric_eigenvalues();
        assert!(ev.min() > 1e-3 && m.trace() < 20.0, "{ev}");
    }

    #[test]
    fn compact_certificate_matches_full_evaluation() {
        let p = HydraulicParams::default();
        let dt = 1e-3;
        let dynamics = PlantDynamics::analytic(p, dt);
        let mut norm = Normalizer::identity();
        let x0 = p.rest_state().to_array();
        for (i, v) in x0.iter().enumerate() {
            norm.in_mean[i] = *v;
            norm.in_std[i] = v.abs().max(1.0) * 0.1;
        }
        norm.in_std[STATE_DIM] = 5e-3;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = MetricNet::new(2, 16, 1e-6, norm.clone(), &mut rng).unwrap();
        let cf = Certifier {
            dynamics: &dynamics,
            metric: &net,
            params: p,
            g_min: 1e-2 * p.g_mid(),
            lambda: 0.1,
            fd_step: 1e-4,
        };
        let cp = ControlPoint {
            f_r: 900.0,
            f_r_dot: 100.0,
            kp: 30.0,
            ki: 2.0,
            integral: 0.1,
        };
        let u = 2e-3;
        let xn = dynamics.step(&x0, u, dt).unwrap();
        let full = cf.evaluate(&x0, &xn, u, &cp, dt);
        assert!(!full.failed);
        assert!(full.k[F_L].abs() < 1e-9, "FL law does not read f_l");
        let data = LabeledDataset {
            dt,
            episodes: vec![LabeledEpisode {
                states: vec![x0, xn],
                inputs: vec![u],
                points: vec![cp],
                kp: 30.0,
                ki: 2.0,
                stable: true,
            }],
        };
        let (s, dropped) = certificate_samples(&data, &dynamics, &norm, &p, cf.g_min, 1e-4);
        assert_eq!(dropped, 0);
        let c = s[0][0].cert(&net, 0.1).unwrap();
        assert!((c - full.cert_value).abs() <= 1e-9 * full.cert_value.abs().max(1.0), "{c} vs {}", full.cert_value);
    }

    #[test]
    fn gammas_of_quiet_log() {
        let log = vec![
            FilterRecord {
                cert_pre: -1.0,
                cert_post: -1.0,
                ..Default::default()
            };
            4
        ];
        let g = gamma_metrics(&log, 1.0).unwrap();
        assert_eq!((g.g1, g.g2, g.g4, g.g3), (0.0, 0.0, 0.0, -1.0));
        assert!(gamma_metrics(&[], 1.0).is_err());
    }

    #[test]
    fn labels_follow_outcome() {
        let p = HydraulicParams::default();
        let ctrl = ControllerConfig::default();
        let unc = UncertaintyConfig::default();
        let r = crate::reference::Sine {
            offset: 800.0,
            amplitude: 300.0,
            freq_hz: 1.0,
            phase: 0.0,
        };
        let ep = run_labeled(Plant::new(p, unc, 1e-3, 0).unwrap(), &r, 90.0, 15.0, 1500, &p, &ctrl, 1e-3);
        assert!(ep.stable);
        assert_eq!(ep.states.len(), 1501);
        let ep = run_labeled(Plant::new(p, unc, 1e-3, 0).unwrap(), &r, -40.0, -5.0, 1500, &p, &ctrl, 1e-3);
        assert!(!ep.stable);
        assert_eq!(ep.states.len(), ep.inputs.len() + 1);
        let empty = LabelConfig {
            n_stable: 0,
            n_unstable: 0,
            ..Default::default()
        };
        let d = generate_labeled_trajectories(&empty, &p, &unc, &ctrl, 1e-3, 0).unwrap();
        assert!(d.episodes.is_empty());
    }
}
