//! Closed-loop data collection, multi-step training of the MLP dynamics
//! surrogate and open-loop validation against the analytic model.

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::controller::{fl_control, ControllerConfig, ControllerState, FlGains};
use crate::dynamics::{Dynamics, State};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Grads, HiddenActivation, Mlp, OutputActivation, Tape, WeightsBundle};
use crate::plant::{HydraulicParams, Plant, UncertaintyConfig, STATE_DIM, STATE_NAMES};
use crate::reference::ReferenceProgram;

pub const IN_DIM: usize = STATE_DIM + 1;

/// Per-channel affine normalisation of `(x, u)` inputs and `x_dot` targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub in_mean: [f64; IN_DIM],
    pub in_std: [f64; IN_DIM],
    pub out_mean: [f64; STATE_DIM],
    pub out_std: [f64; STATE_DIM],
}

fn safe_std(var: f64, mean: f64) -> f64 {
    let sd = var.max(0.0).sqrt();
    if sd > 1e-9 * mean.abs().max(1e-12) && sd > 0.0 {
        sd
    } else {
        1.0
    }
}

impl Normalizer {
    pub fn identity() -> Self {
        Self {
            in_mean: [0.0; IN_DIM],
            in_std: [1.0; IN_DIM],
            out_mean: [0.0; STATE_DIM],
            out_std: [1.0; STATE_DIM],
        }
    }

    /// Statistics over all transitions of the given episodes.
    pub fn fit(episodes: &[Episode], dt: f64) -> Result<Self> {
        let mut n = 0usize;
        let mut s_in = [0.0; IN_DIM];
        let mut q_in = [0.0; IN_DIM];
        let mut s_out = [0.0; STATE_DIM];
        let mut q_out = [0.0; STATE_DIM];
        // two-pass for numerical stability
        for ep in episodes {
            for t in 0..ep.len() {
                let xi = ep.input_vec(t);
                let yo = ep.target(t, dt);
                for i in 0..IN_DIM {
                    s_in[i] += xi[i];
                }
                for i in 0..STATE_DIM {
                    s_out[i] += yo[i];
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(Error::Data("cannot fit a normalizer on an empty dataset".into()));
        }
        let nf = n as f64;
        let m_in = s_in.map(|v| v / nf);
        let m_out = s_out.map(|v| v / nf);
        for ep in episodes {
            for t in 0..ep.len() {
                let xi = ep.input_vec(t);
                let yo = ep.target(t, dt);
                for i in 0..IN_DIM {
                    q_in[i] += (xi[i] - m_in[i]).powi(2);
                }
                for i in 0..STATE_DIM {
                    q_out[i] += (yo[i] - m_out[i]).powi(2);
                }
            }
        }
        let mut in_std = [1.0; IN_DIM];
        let mut out_std = [1.0; STATE_DIM];
        for i in 0..IN_DIM {
            in_std[i] = safe_std(q_in[i] / nf, m_in[i]);
        }
        for i in 0..STATE_DIM {
            out_std[i] = safe_std(q_out[i] / nf, m_out[i]);
        }
        Ok(Self {
            in_mean: m_in,
            in_std,
            out_mean: m_out,
            out_std,
        })
    }

    pub fn norm_state(&self, x: &State) -> State {
        std::array::from_fn(|i| (x[i] - self.in_mean[i]) / self.in_std[i])
    }

    pub fn denorm_state(&self, z: &State) -> State {
        std::array::from_fn(|i| z[i] * self.in_std[i] + self.in_mean[i])
    }

    pub fn norm_input(&self, u: f64) -> f64 {
        (u - self.in_mean[STATE_DIM]) / self.in_std[STATE_DIM]
    }

    pub fn denorm_target(&self, y: &[f64]) -> State {
        std::array::from_fn(|i| y[i] * self.out_std[i] + self.out_mean[i])
    }

    pub fn norm_target(&self, d: &State) -> State {
        std::array::from_fn(|i| (d[i] - self.out_mean[i]) / self.out_std[i])
    }

    pub fn write_bundle(&self, b: &mut WeightsBundle) {
        b.push_vector("norm.in_mean", &self.in_mean);
        b.push_vector("norm.in_std", &self.in_std);
        b.push_vector("norm.out_mean", &self.out_mean);
        b.push_vector("norm.out_std", &self.out_std);
    }

    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        let arr = |name: &str, n: usize| -> Result<Vec<f64>> {
            let v = b.vector(name)?;
            if v.len() != n {
                return Err(Error::Data(format!("normalizer vector `{name}` has length {}", v.len())));
            }
            Ok(v.to_vec())
        };
        let norm = Self {
            in_mean: arr("norm.in_mean", IN_DIM)?.try_into().expect("checked length"),
            in_std: arr("norm.in_std", IN_DIM)?.try_into().expect("checked length"),
            out_mean: arr("norm.out_mean", STATE_DIM)?.try_into().expect("checked length"),
            out_std: arr("norm.out_std", STATE_DIM)?.try_into().expect("checked length"),
        };
        if norm.in_std.iter().chain(&norm.out_std).any(|s| !(*s > 0.0)) {
            return Err(Error::Data("normalizer std must be positive".into()));
        }
        Ok(norm)
    }
}

/// One closed-loop run: `states.len() == inputs.len() + 1`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Episode {
    pub states: Vec<State>,
    pub inputs: Vec<f64>,
}

impl Episode {
    /// Number of transitions.
    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_vec(&self, t: usize) -> [f64; IN_DIM] {
        let mut v = [0.0; IN_DIM];
        v[..STATE_DIM].copy_from_slice(&self.states[t]);
        v[STATE_DIM] = self.inputs[t];
        v
    }

    /// Euler-consistent derivative target `(x_{t+1} - x_t) / dt`.
    pub fn target(&self, t: usize, dt: f64) -> State {
        std::array::from_fn(|i| (self.states[t + 1][i] - self.states[t][i]) / dt)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrajectoryDataset {
    pub dt: f64,
    pub episodes: Vec<Episode>,
    /// Indices of collection episodes aborted on divergence.
    pub aborted: Vec<usize>,
}

impl TrajectoryDataset {
    pub fn transitions(&self) -> usize {
        self.episodes.iter().map(Episode::len).sum()
    }

    /// 80/20 split by whole episodes (first 80% train).
    pub fn split(&self, train_fraction: f64) -> (TrajectoryDataset, TrajectoryDataset) {
        let n = self.episodes.len();
        let n_train = ((n as f64) * train_fraction).round() as usize;
        let n_train = n_train.min(n);
        (
            TrajectoryDataset {
                dt: self.dt,
                episodes: self.episodes[..n_train].to_vec(),
                aborted: vec![],
            },
            TrajectoryDataset {
                dt: self.dt,
                episodes: self.episodes[n_train..].to_vec(),
                aborted: vec![],
            },
        )
    }

    /// Write `episode_NNN.csv` files plus `dataset.manifest` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (k, ep) in self.episodes.iter().enumerate() {
            let mut w = csv::Writer::from_path(dir.join(format!("episode_{k:03}.csv")))?;
            let mut header = vec!["step".to_string()];
            header.extend(STATE_NAMES.iter().map(|s| s.to_string()));
            header.push("u".into());
            w.write_record(&header)?;
            for t in 0..ep.states.len() {
                let mut rec = vec![t.to_string()];
                rec.extend(ep.states[t].iter().map(|v| v.to_string()));
                rec.push(ep.inputs.get(t).map(|v| v.to_string()).unwrap_or_default());
                w.write_record(&rec)?;
            }
            w.flush()?;
        }
        let mut m = String::new();
        let _ = writeln!(m, "format = contraq-dataset-v1");
        let _ = writeln!(m, "dt = {}", self.dt);
        let _ = writeln!(m, "episodes = {}", self.episodes.len());
        let lens: Vec<String> = self.episodes.iter().map(|e| e.len().to_string()).collect();
        let _ = writeln!(m, "lengths = {}", lens.join(","));
        let ab: Vec<String> = self.aborted.iter().map(|e| e.to_string()).collect();
        let _ = writeln!(m, "aborted = {}", ab.join(","));
        std::fs::write(dir.join("dataset.manifest"), m)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(dir.join("dataset.manifest")).map_err(|_| Error::Prerequisite {
            artifact: dir.join("dataset.manifest").display().to_string(),
            command: "collect",
        })?;
        let mut dt = None;
        let mut n = None;
        let mut aborted = vec![];
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let v = v.trim();
            match k.trim() {
                "dt" => dt = v.parse::<f64>().ok(),
                "episodes" => n = v.parse::<usize>().ok(),
                "aborted" if !v.is_empty() => {
                    aborted = v
                        .split(',')
                        .map(|s| s.parse::<usize>().map_err(|_| Error::Data(format!("bad aborted list `{v}`"))))
                        .collect::<Result<_>>()?
                }
                _ => {}
            }
        }
        let dt = dt.ok_or_else(|| Error::Data("manifest lacks dt".into()))?;
        let n = n.ok_or_else(|| Error::Data("manifest lacks episodes".into()))?;
        let mut episodes = Vec::with_capacity(n);
        for k in 0..n {
            let mut r = csv::Reader::from_path(dir.join(format!("episode_{k:03}.csv")))?;
            let mut ep = Episode::default();
            for rec in r.records() {
                let rec = rec?;
                let parse = |i: usize| -> Result<f64> {
                    rec.get(i)
                        .and_then(|s| s.parse::<f64>().ok())
                        .ok_or_else(|| Error::Data(format!("episode {k}: bad value in column {i}")))
                };
                let mut x = [0.0; STATE_DIM];
                for (i, xi) in x.iter_mut().enumerate() {
                    *xi = parse(i + 1)?;
                }
                ep.states.push(x);
                if rec.get(STATE_DIM + 1).is_some_and(|s| !s.is_empty()) {
                    ep.inputs.push(parse(STATE_DIM + 1)?);
                }
            }
            if ep.states.len() != ep.inputs.len() + 1 {
                return Err(Error::Data(format!("episode {k}: expected one more state than inputs")));
            }
            episodes.push(ep);
        }
        Ok(Self { dt, episodes, aborted })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CollectConfig {
    pub n_episodes: usize,
    pub steps_per_episode: usize,
    pub kp: f64,
    pub ki: f64,
    /// Standard deviation of white excitation added to the valve current.
    pub dither_std: f64,
    /// Unlogged steps at the reference offset before recording starts.
    pub settle_steps: usize,
    pub reference: ReferenceProgram,
}

impl Default for CollectConfig {
    fn default() -> Self {
        Self {
            n_episodes: 10,
            steps_per_episode: 1800,
            kp: 90.0,
            ki: 15.0,
            dither_std: 0.0,
            settle_steps: 500,
            reference: ReferenceProgram {
                kind: "sine_segments".into(),
                ..Default::default()
            },
        }
    }
}

/// Divergence threshold on the task error relative to the reference
/// amplitude.
pub const DIVERGENCE_FACTOR: f64 = 3.0;

/// Run `n_episodes` closed-loop episodes on the plant under the FL
/// controller and randomised references. Diverged episodes are dropped and
/// listed in `aborted`.
pub fn collect_dataset(
    cfg: &CollectConfig,
    params: &HydraulicParams,
    unc: &UncertaintyConfig,
    ctrl: &ControllerConfig,
    dt: f64,
    seed: u64,
) -> Result<TrajectoryDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = TrajectoryDataset {
        dt,
        episodes: vec![],
        aborted: vec![],
    };
    if cfg.n_episodes == 0 {
        return Ok(out);
    }
    probe_stability(cfg, params, unc, ctrl, dt)?;
    let gains = FlGains::fixed(cfg.kp, cfg.ki);
    let dither = if cfg.dither_std > 0.0 {
        Some(Normal::new(0.0, cfg.dither_std).map_err(|e| Error::Config(e.to_string()))?)
    } else {
        None
    };
    for k in 0..cfg.n_episodes {
        let reference = cfg.reference.sample(&mut rng);
        let mut plant = Plant::new(*params, *unc, dt, rng.random())?;
        let mut cs = ControllerState::default();
        let mut ep = Episode::default();
        let mut diverged = false;
        let offset = reference.eval(0.0).0;
        for _ in 0..cfg.settle_steps {
            let x = plant.measured();
            let u = fl_control(&x, offset, 0.0, &gains, &mut cs, params, ctrl, dt).u_nom;
            if plant.step(u.clamp(-params.u_max, params.u_max)).is_err() {
                diverged = true;
                break;
            }
        }
        let mut x = plant.measured();
        ep.states.push(x.to_array());
        for t in 0..cfg.steps_per_episode {
            if diverged {
                break;
            }
            let (f_r, f_r_dot) = reference.eval(t as f64 * dt);
            let out_u = fl_control(&x, f_r, f_r_dot, &gains, &mut cs, params, ctrl, dt).u_nom;
            let noise = dither.map(|d| d.sample(&mut rng)).unwrap_or(0.0);
            let u = (out_u + noise).clamp(-params.u_max, params.u_max);
            if plant.step(u).is_err() {
                diverged = true;
                break;
            }
            x = plant.measured();
            if (f_r - x.f_l).abs() > DIVERGENCE_FACTOR * reference.amplitude().max(1.0) {
                diverged = true;
                break;
            }
            ep.inputs.push(u);
            ep.states.push(x.to_array());
        }
        if diverged {
            out.aborted.push(k);
        } else {
            out.episodes.push(ep);
        }
    }
    Ok(out)
}

fn probe_stability(
    cfg: &CollectConfig,
    params: &HydraulicParams,
    unc: &UncertaintyConfig,
    ctrl: &ControllerConfig,
    dt: f64,
) -> Result<()> {
    let r = crate::reference::Sine {
        offset: cfg.reference.offset,
        amplitude: cfg.reference.amp_max,
        freq_hz: cfg.reference.freq_max,
        phase: 0.0,
    };
    let mut plant = Plant::new(*params, *unc, dt, 0)?;
    let mut cs = ControllerState::default();
    let gains = FlGains::fixed(cfg.kp, cfg.ki);
    for t in 0..cfg.steps_per_episode.max(1000) {
        let (f_r, f_r_dot) = crate::reference::Reference::eval(&r, t as f64 * dt);
        let x = *plant.state();
        let u = fl_control(&x, f_r, f_r_dot, &gains, &mut cs, params, ctrl, dt).u_nom;
        let ok = plant.step(u).is_ok() && (f_r - plant.state().f_l).abs() <= DIVERGENCE_FACTOR * r.amplitude;
        if !ok {
            return Err(Error::Config(format!(
                "collection gains Kp = {}, Ki = {} are not stable on the plant probe",
                cfg.kp, cfg.ki
            )));
        }
    }
    Ok(())
}

/// How the per-window prediction errors are reduced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WindowLoss {
    /// `|| sum_h delta_h ||^2`.
    SumThenSquare,
    /// `sum_h || delta_h ||^2`.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelTrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    pub learning_rate: f64,
    /// Number of predicted steps per window.
    pub horizon: usize,
    pub activation: String,
    pub loss: WindowLoss,
    /// Spacing between window start indices.
    pub window_stride: usize,
    pub grad_clip: f64,
    pub train_fraction: f64,
    /// Cosine-anneal the learning rate down to `learning_rate * lr_final_ratio`.
    pub lr_final_ratio: f64,
}

impl Default for ModelTrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            hidden_layers: 2,
            hidden_size: 32,
            learning_rate: 3e-3,
            horizon: 70,
            activation: "relu".into(),
            loss: WindowLoss::SumThenSquare,
            window_stride: 1,
            grad_clip: 1.0,
            train_fraction: 0.8,
            lr_final_ratio: 0.003,
        }
    }
}

impl ModelTrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.batch_size == 0 || self.hidden_size == 0 || self.window_stride == 0 {
            return Err(Error::Config("model training sizes must be positive".into()));
        }
        if self.activation != "relu" {
            return Err(Error::Config(format!("unsupported activation `{}`", self.activation)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Learned dynamics: `x_dot = denorm(net(norm(x), norm(u)))`.
#[derive(Debug, Clone)]
pub struct SurrogateModel {
    pub net: Mlp,
    pub norm: Normalizer,
    pub dt: f64,
}

impl SurrogateModel {
    /// Per-channel scale and offset of one Euler step in normalised state
    /// coordinates: `z_next = z + c + s * y`.
    fn step_coeffs(&self) -> (State, State) {
        let c = std::array::from_fn(|i| self.dt * self.norm.out_mean[i] / self.norm.in_std[i]);
        let s = std::array::from_fn(|i| self.dt * self.norm.out_std[i] / self.norm.in_std[i]);
        (c, s)
    }

    pub fn to_bundle(&self) -> WeightsBundle {
        let mut b = WeightsBundle::new();
        b.push_net("surrogate", &self.net);
        self.norm.write_bundle(&mut b);
        b.push_scalar("dt", self.dt);
        b
    }

    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        let net = b.net("surrogate")?.clone();
        if net.input_dim() != IN_DIM || net.output_dim() != STATE_DIM {
            return Err(Error::Data("surrogate network has the wrong shape".into()));
        }
        Ok(Self {
            net,
            norm: Normalizer::from_bundle(b)?,
            dt: b.scalar("dt")?,
        })
    }
}

impl Dynamics for SurrogateModel {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn derivative(&self, x: &State, u: f64) -> Result<State> {
        let z = self.norm.norm_state(x);
        let mut inp = [0.0; IN_DIM];
        inp[..STATE_DIM].copy_from_slice(&z);
        inp[STATE_DIM] = self.norm.norm_input(u);
        let y = self.net.forward(&inp)?;
        let f = self.norm.denorm_target(&y);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("surrogate produced a non-finite derivative".into()));
        }
        Ok(f)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    /// Mean window loss per epoch.
    pub epoch_loss: Vec<f64>,
}

struct NormEpisode {
    z: Vec<State>,
    u: Vec<f64>,
}

/// Train the surrogate with free-running multi-step rollouts and
/// teacher-forced inputs, backpropagating through the whole window.
pub fn train_model(data: &TrajectoryDataset, cfg: &ModelTrainingConfig, seed: u64) -> Result<(SurrogateModel, TrainReport)> {
    cfg.validate()?;
    let norm = Normalizer::fit(&data.episodes, data.dt)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sizes = vec![IN_DIM];
    sizes.extend(std::iter::repeat_n(cfg.hidden_size, cfg.hidden_layers));
    sizes.push(STATE_DIM);
    let mut net = Mlp::new(&sizes, HiddenActivation::Relu, OutputActivation::Identity, &mut rng)?;
    // small read-out so the initial free-running rollouts stay bounded
    let last = net.num_layers() - 1;
    net.weights_mut(last).iter_mut().for_each(|w| *w *= 0.1);
    let mut model = SurrogateModel { net, norm, dt: data.dt };
    let eps: Vec<NormEpisode> = data
        .episodes
        .iter()
        .map(|e| NormEpisode {
            z: e.states.iter().map(|x| model.norm.norm_state(x)).collect(),
            u: e.inputs.iter().map(|u| model.norm.norm_input(*u)).collect(),
        })
        .collect();
    let mut windows: Vec<(usize, usize)> = vec![];
    for (k, e) in eps.iter().enumerate() {
        let mut s = 0;
        while s + cfg.horizon <= e.u.len() {
            windows.push((k, s));
            s += cfg.window_stride;
        }
    }
    if windows.is_empty() {
        return Err(Error::Data(format!("no training window of {} steps fits the dataset", cfg.horizon)));
    }
    let mut adam = AdamState::new(&model.net, cfg.learning_rate);
    let mut report = TrainReport::default();
    let mut ws = WindowScratch::new(&model.net, cfg.horizon);
    let mut grads = Grads::zeros_like(&model.net);
    let steps_total = (cfg.epochs * windows.len().div_ceil(cfg.batch_size)).max(1);
    let mut step = 0usize;
    for _epoch in 0..cfg.epochs {
        windows.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in windows.chunks(cfg.batch_size) {
            adam.learning_rate = cosine_lr(cfg.learning_rate, cfg.lr_final_ratio, step, steps_total);
            step += 1;
            grads.clear();
            for (bi, &(k, s)) in batch.iter().enumerate() {
                let loss = window_loss_grad(&model, &eps[k], s, cfg.horizon, cfg.loss, &mut ws, Some(&mut grads))?;
                if !loss.is_finite() {
                    return Err(Error::Divergence(format!(
                        "non-finite surrogate loss in window {bi} of batch (episode {k}, start {s})"
                    )));
                }
                total += loss;
            }
            grads.scale(1.0 / batch.len() as f64);
            grads.clip_norm(cfg.grad_clip);
            adam.step(&mut model.net, &grads)?;
        }
        report.epoch_loss.push(total / windows.len() as f64);
    }
    Ok((model, report))
}

pub(crate) fn cosine_lr(lr0: f64, final_ratio: f64, step: usize, total: usize) -> f64 {
    let frac = step as f64 / total as f64;
    let lo = lr0 * final_ratio;
    lo + 0.5 * (lr0 - lo) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Mean window loss of a model over a dataset (no gradients).
pub fn evaluate_loss(model: &SurrogateModel, data: &TrajectoryDataset, horizon: usize, loss: WindowLoss, stride: usize) -> Result<f64> {
    let mut ws = WindowScratch::new(&model.net, horizon);
    let mut total = 0.0;
    let mut n = 0usize;
    for e in &data.episodes {
        let ne = NormEpisode {
            z: e.states.iter().map(|x| model.norm.norm_state(x)).collect(),
            u: e.inputs.iter().map(|u| model.norm.norm_input(*u)).collect(),
        };
        let mut s = 0;
        while s + horizon <= ne.u.len() {
            total += window_loss_grad(model, &ne, s, horizon, loss, &mut ws, None)?;
            n += 1;
            s += stride.max(1);
        }
    }
    if n == 0 {
        return Err(Error::Data("no window fits".into()));
    }
    Ok(total / n as f64)
}

struct WindowScratch {
    tapes: Vec<Tape>,
    zhat: Vec<State>,
}

impl WindowScratch {
    fn new(_net: &Mlp, horizon: usize) -> Self {
        Self {
            tapes: vec![Tape::default(); horizon],
            zhat: vec![[0.0; STATE_DIM]; horizon + 1],
        }
    }
}

fn window_loss_grad(
    model: &SurrogateModel,
    ep: &NormEpisode,
    s: usize,
    horizon: usize,
    kind: WindowLoss,
    ws: &mut WindowScratch,
    grads: Option<&mut Grads>,
) -> Result<f64> {
    let (c, sc) = model.step_coeffs();
    ws.zhat[0] = ep.z[s];
    let mut inp = [0.0; IN_DIM];
    let mut sum_delta = [0.0; STATE_DIM];
    let mut per_step = 0.0;
    for h in 0..horizon {
        inp[..STATE_DIM].copy_from_slice(&ws.zhat[h]);
        inp[STATE_DIM] = ep.u[s + h];
        model.net.forward_tape(&inp, &mut ws.tapes[h])?;
        let y = ws.tapes[h].output();
        let mut next = ws.zhat[h];
        for i in 0..STATE_DIM {
            next[i] += c[i] + sc[i] * y[i];
            let d = next[i] - ep.z[s + h + 1][i];
            sum_delta[i] += d;
            per_step += d * d;
        }
        ws.zhat[h + 1] = next;
    }
    let loss = match kind {
        WindowLoss::SumThenSquare => sum_delta.iter().map(|d| d * d).sum(),
        WindowLoss::PerStep => per_step,
    };
    let Some(grads) = grads else { return Ok(loss) };
    if !loss.is_finite() {
        return Ok(loss);
    }
    // g = dL/d zhat_{h+1}, accumulated backwards through the rollout
    let mut g = [0.0; STATE_DIM];
    let mut dy = [0.0; STATE_DIM];
    for h in (0..horizon).rev() {
        for i in 0..STATE_DIM {
            let direct = match kind {
                WindowLoss::SumThenSquare => 2.0 * sum_delta[i],
                WindowLoss::PerStep => 2.0 * (ws.zhat[h + 1][i] - ep.z[s + h + 1][i]),
            };
            g[i] += direct;
            dy[i] = sc[i] * g[i];
        }
        let d_in = model.net.backward_accumulate(&ws.tapes[h], &dy, grads)?;
        for i in 0..STATE_DIM {
            g[i] += d_in[i];
        }
    }
    Ok(loss)
}

/// Per-channel normalised RMSE of `horizon`-step open-loop rollouts with
/// recorded inputs. Errors are scaled by the normaliser's state std.
pub fn validate_model(
    model: &dyn Dynamics,
    norm: &Normalizer,
    heldout: &TrajectoryDataset,
    horizon: usize,
    stride: usize,
) -> Result<State> {
    let mut se = [0.0; STATE_DIM];
    let mut n = 0usize;
    for ep in &heldout.episodes {
        let mut s = 0;
        while s + horizon <= ep.len() {
            let mut x = ep.states[s];
            for h in 0..horizon {
                x = model.step(&x, ep.inputs[s + h], heldout.dt)?;
                let truth = &ep.states[s + h + 1];
                for i in 0..STATE_DIM {
                    let d = (x[i] - truth[i]) / norm.in_std[i];
                    se[i] += d * d;
                }
                n += 1;
            }
            s += stride.max(1);
        }
    }
    if n == 0 {
        return Err(Error::Data("held-out set has no complete window".into()));
    }
    Ok(se.map(|v| (v / n as f64).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::PlantDynamics;

    fn small_data(n: usize, steps: usize, seed: u64) -> TrajectoryDataset {
        let cfg = CollectConfig {
            n_episodes: n,
            steps_per_episode: steps,
            ..Default::default()
        };
        collect_dataset(
            &cfg,
            &HydraulicParams::default(),
            &UncertaintyConfig::default(),
            &ControllerConfig::default(),
            1e-3,
            seed,
        )
        .unwrap()
    }

    #[test]
    fn zero_episodes_give_empty_dataset() {
        let d = small_data(0, 100, 1);
        assert_eq!(d.transitions(), 0);
    }

    #[test]
    fn collection_is_deterministic_and_bounded() {
        let a = small_data(2, 300, 5);
        let b = small_data(2, 300, 5);
        assert_eq!(a, b);
        assert_eq!(a.transitions(), 600);
        for ep in &a.episodes {
            for x in &ep.states {
                assert!((x[2] - 800.0).abs() <= 400.0);
            }
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let d = small_data(1, 200, 2);
        let n = Normalizer::fit(&d.episodes, d.dt).unwrap();
        for x in &d.episodes[0].states {
            let back = n.denorm_state(&n.norm_state(x));
            for i in 0..STATE_DIM {
                assert!((back[i] - x[i]).abs() <= 1e-12 * x[i].abs().max(1.0));
            }
        }
        assert!(n.in_std.iter().chain(&n.out_std).all(|s| *s > 0.0));
    }

    #[test]
    fn dataset_csv_round_trip() {
        let d = small_data(2, 50, 3);
        let dir = tempfile::tempdir().unwrap();
        d.save(dir.path()).unwrap();
        let back = TrajectoryDataset::load(dir.path()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn horizon_one_losses_agree() {
        let d = small_data(1, 120, 4);
        let (m, _) = train_model(
            &d,
            &ModelTrainingConfig {
                epochs: 0,
                horizon: 1,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let a = evaluate_loss(&m, &d, 1, WindowLoss::SumThenSquare, 1).unwrap();
        let b = evaluate_loss(&m, &d, 1, WindowLoss::PerStep, 1).unwrap();
        assert!((a - b).abs() <= 1e-12 * a.abs());
    }

    #[test]
    fn window_gradient_matches_finite_differences() {
        let d = small_data(1, 60, 6);
        for kind in [WindowLoss::SumThenSquare, WindowLoss::PerStep] {
            let (m, _) = train_model(
                &d,
                &ModelTrainingConfig {
                    epochs: 0,
                    horizon: 5,
                    hidden_size: 6,
                    ..Default::default()
                },
                1,
            )
            .unwrap();
            let ne = NormEpisode {
                z: d.episodes[0].states.iter().map(|x| m.norm.norm_state(x)).collect(),
                u: d.episodes[0].inputs.iter().map(|u| m.norm.norm_input(*u)).collect(),
            };
            let mut ws = WindowScratch::new(&m.net, 5);
            let mut g = Grads::zeros_like(&m.net);
            window_loss_grad(&m, &ne, 10, 5, kind, &mut ws, Some(&mut g)).unwrap();
            let flat = g.flat();
            let mut probe = m.clone();
            let h = 1e-6;
            let mut idx = 0;
            for l in 0..m.net.num_layers() {
                for i in 0..m.net.weights(l).len() {
                    let w0 = probe.net.weights(l)[i];
                    probe.net.weights_mut(l)[i] = w0 + h;
                    let lp = window_loss_grad(&probe, &ne, 10, 5, kind, &mut ws, None).unwrap();
                    probe.net.weights_mut(l)[i] = w0 - h;
                    let lm = window_loss_grad(&probe, &ne, 10, 5, kind, &mut ws, None).unwrap();
                    probe.net.weights_mut(l)[i] = w0;
                    let fd = (lp - lm) / (2.0 * h);
                    let a = flat[idx];
                    assert!((a - fd).abs() <= 1e-4 * a.abs().max(fd.abs()).max(1e-6), "{kind:?} layer {l} w{i}: {a} vs {fd}");
                    idx += 1;
                }
                idx += m.net.biases(l).len();
            }
        }
    }

    #[test]
    fn linear_system_is_learned() {
        // x_dot = -x on every channel, u ignored, H = 1
        let dt = 1e-2;
        let mut eps = vec![];
        for k in 0..20 {
            let mut ep = Episode::default();
            let mut x = [0.0; STATE_DIM];
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = -2.0 + 4.0 * (((k * 7 + i * 3) % 20) as f64) / 19.0;
            }
            ep.states.push(x);
            for _ in 0..150 {
                let prev = *ep.states.last().unwrap();
                ep.inputs.push(0.0);
                ep.states.push(std::array::from_fn(|i| prev[i] * (1.0 - dt)));
            }
            eps.push(ep);
        }
        let data = TrajectoryDataset {
            dt,
            episodes: eps,
            aborted: vec![],
        };
        let (m, rep) = train_model(
            &data,
            &ModelTrainingConfig {
                epochs: 200,
                horizon: 1,
                batch_size: 64,
                learning_rate: 3e-3,
                ..Default::default()
            },
            3,
        )
        .unwrap();
        assert!(rep.epoch_loss.last().unwrap() * 10.0 < rep.epoch_loss[0]);
        let mut worst: f64 = 0.0;
        for ep in &data.episodes {
            for x in ep.states.iter().step_by(10) {
                let f = m.derivative(x, 0.0).unwrap();
                let scale = x.iter().map(|v| v.abs()).fold(0.0, f64::max).max(0.5);
                for i in 0..STATE_DIM {
                    worst = worst.max((f[i] + x[i]).abs() / scale);
                }
            }
        }
        assert!(worst < 0.05, "{worst}");
    }

    #[test]
    fn constant_data_predicts_zero_rate() {
        let x = HydraulicParams::default().rest_state().to_array();
        let ep = Episode {
            states: vec![x; 101],
            inputs: vec![0.0; 100],
        };
        let data = TrajectoryDataset {
            dt: 1e-3,
            episodes: vec![ep],
            aborted: vec![],
        };
        let (m, _) = train_model(
            &data,
            &ModelTrainingConfig {
                epochs: 300,
                horizon: 1,
                batch_size: 100,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let f = m.derivative(&x, 0.0).unwrap();
        // normalised rate is what the net sees; physical rates scale with std = 1
        assert!(f.iter().all(|v| v.abs() < 1e-2), "{f:?}");
    }

    #[test]
    fn oracle_validates_to_zero() {
        let d = small_data(1, 300, 8);
        let n = Normalizer::fit(&d.episodes, d.dt).unwrap();
        let oracle = PlantDynamics::oracle(HydraulicParams::default(), UncertaintyConfig::default(), 1e-3);
        let r = validate_model(&oracle, &n, &d, 70, 10).unwrap();
        assert!(r.iter().all(|v| *v <= 1e-6), "{r:?}");
    }

    #[test]
    fn empty_heldout_is_an_error() {
        let n = Normalizer::identity();
        let oracle = PlantDynamics::analytic(HydraulicParams::default(), 1e-3);
        assert!(validate_model(&oracle, &n, &TrajectoryDataset::default(), 5, 1).is_err());
    }
}
