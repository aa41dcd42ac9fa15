//! Soft actor-critic over PI gain corrections, run behind the contraction
//! filter on either the plant or the surrogate.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::certificate::{qp_filter, Certifier, ControlPoint, FilterRecord};
use crate::controller::{fl_control, ControllerConfig, ControllerState, FlGains};
use crate::dynamics::{Dynamics, State};
use crate::error::{Error, Result};
use crate::nn::{AdamState, Grads, HiddenActivation, Mlp, OutputActivation, ScalarAdam, Tape, WeightsBundle};
use crate::plant::{HydraulicParams, Plant, PlantState, UncertaintyConfig, F_L, STATE_DIM};
use crate::reference::{Reference, ReferenceProgram};
use crate::surrogate::{Normalizer, SurrogateModel};

pub const OBS_DIM: usize = STATE_DIM + 5;
pub const ACT_DIM: usize = 2;
/// Plant steps per policy step.
pub const SUBSTEPS: usize = 10;

const LOG_STD_MIN: f64 = -5.0;
const LOG_STD_MAX: f64 = 2.0;
const TANH_EPS: f64 = 1e-6;

pub type Observation = [f64; OBS_DIM];
pub type Action = [f64; ACT_DIM];

/// `[z (8), f_r, f_r_dot, e_l, previous action (2)]`, scaled with the
/// surrogate's state statistics.
pub fn observe(norm: &Normalizer, x: &State, f_r: f64, f_r_dot: f64, prev: Action) -> Observation {
    let z = norm.norm_state(x);
    let mut o = [0.0; OBS_DIM];
    o[..STATE_DIM].copy_from_slice(&z);
    o[STATE_DIM] = (f_r - norm.in_mean[F_L]) / norm.in_std[F_L];
    o[STATE_DIM + 1] = f_r_dot / norm.in_std[F_L + 1];
    o[STATE_DIM + 2] = (f_r - x[F_L]) / norm.in_std[F_L];
    o[STATE_DIM + 3..].copy_from_slice(&prev);
    o
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SacConfig {
    pub episodes: usize,
    pub steps_per_episode: usize,
    pub hidden_layers: usize,
    pub hidden_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    pub init_alpha: f64,
    pub alpha_lr: f64,
    pub gamma: f64,
    pub tau: f64,
    pub q1: f64,
    pub q2: f64,
    pub replay_capacity: usize,
    pub batch_size: usize,
    /// Transitions collected before the first update.
    pub warmup_steps: usize,
    /// Uniform random actions during warmup (fresh agents only).
    pub random_warmup: bool,
    pub updates_per_step: usize,
    pub target_entropy: f64,
    /// Added to the reward of the step on which the plant diverged.
    pub divergence_penalty: f64,
    /// Base gains the corrections are added to.
    pub base_kp: f64,
    pub base_ki: f64,
    pub filter: bool,
    pub reference: ReferenceProgram,
}

impl Default for SacConfig {
    fn default() -> Self {
        Self {
            episodes: 40,
            steps_per_episode: 1800,
            hidden_layers: 2,
            hidden_size: 32,
            actor_lr: 1e-3,
            critic_lr: 1e-3,
            init_alpha: 0.005,
            alpha_lr: 1e-3,
            gamma: 0.99,
            tau: 0.005,
            q1: 100.0,
            q2: 4000.0,
            replay_capacity: 200_000,
            batch_size: 256,
            warmup_steps: 1000,
            random_warmup: true,
            updates_per_step: 1,
            target_entropy: -(ACT_DIM as f64),
            divergence_penalty: -1000.0,
            base_kp: 15.0,
            base_ki: 5.0,
            filter: true,
            reference: ReferenceProgram::default(),
        }
    }
}

impl SacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::Config(format!("agent.gamma must lie in (0, 1), got {}", self.gamma)));
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::Config(format!("agent.tau must lie in (0, 1], got {}", self.tau)));
        }
        for (k, v) in [
            ("actor_lr", self.actor_lr),
            ("critic_lr", self.critic_lr),
            ("alpha_lr", self.alpha_lr),
            ("init_alpha", self.init_alpha),
            ("q1", self.q1),
            ("q2", self.q2),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("agent.{k} must be positive, got {v}")));
            }
        }
        if self.batch_size == 0 || self.replay_capacity < self.batch_size {
            return Err(Error::Config("agent.replay_capacity must be at least agent.batch_size > 0".into()));
        }
        Ok(())
    }
}

/// `r = -Q1 e^2 - Q2 e_dot^2` on normalised errors.
pub fn reward(e: f64, e_dot: f64, cfg: &SacConfig) -> f64 {
    -cfg.q1 * e * e - cfg.q2 * e_dot * e_dot
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub obs: Observation,
    pub action: Action,
    pub reward: f64,
    pub next: Observation,
    pub done: bool,
}

/// Fixed-capacity ring buffer.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    data: Vec<Transition>,
    capacity: usize,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            data: Vec::with_capacity(capacity.min(1 << 16)),
            capacity: capacity.max(1),
            head: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn push(&mut self, t: Transition) {
        if self.data.len() < self.capacity {
            self.data.push(t);
        } else {
            self.data[self.head] = t;
        }
        self.head = (self.head + 1) % self.capacity;
    }

    /// Distinct indices within one batch.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<&Transition> {
        let n = n.min(self.data.len());
        sample(rng, self.data.len(), n).into_iter().map(|i| &self.data[i]).collect()
    }
}

/// Actor, twin critics with targets and the log-temperature.
#[derive(Debug, Clone)]
pub struct SacAgent {
    /// Outputs `[mean (2), log_std (2)]`.
    pub actor: Mlp,
    pub critic1: Mlp,
    pub critic2: Mlp,
    pub target1: Mlp,
    pub target2: Mlp,
    pub log_alpha: f64,
    pub norm: Normalizer,
}

fn sizes(inp: usize, out: usize, cfg: &SacConfig) -> Vec<usize> {
    let mut s = vec![inp];
    s.extend(std::iter::repeat_n(cfg.hidden_size, cfg.hidden_layers));
    s.push(out);
    s
}

fn critic_input(o: &Observation, a: &Action) -> [f64; OBS_DIM + ACT_DIM] {
    let mut x = [0.0; OBS_DIM + ACT_DIM];
    x[..OBS_DIM].copy_from_slice(o);
    x[OBS_DIM..].copy_from_slice(a);
    x
}

/// A reparameterised sample with what the actor gradient needs.
struct PolicySample {
    action: Action,
    log_prob: f64,
    pre: Action,
    std: Action,
    noise: Action,
    clamped: [bool; ACT_DIM],
}

fn squash(out: &[f64], noise: Action) -> PolicySample {
    let mut s = PolicySample {
        action: [0.0; ACT_DIM],
        log_prob: 0.0,
        pre: [0.0; ACT_DIM],
        std: [0.0; ACT_DIM],
        noise,
        clamped: [false; ACT_DIM],
    };
    for i in 0..ACT_DIM {
        let raw = out[ACT_DIM + i];
        let ls = raw.clamp(LOG_STD_MIN, LOG_STD_MAX);
        s.clamped[i] = ls != raw;
        s.std[i] = ls.exp();
        s.pre[i] = out[i] + s.std[i] * noise[i];
        let t = s.pre[i].tanh();
        s.action[i] = t;
        s.log_prob += -0.5 * noise[i] * noise[i] - ls - 0.5 * (2.0 * std::f64::consts::PI).ln() - (1.0 - t * t + TANH_EPS).ln();
    }
    s
}

fn gaussian<R: Rng + ?Sized>(rng: &mut R) -> Action {
    std::array::from_fn(|_| StandardNormal.sample(rng))
}

impl SacAgent {
    pub fn new<R: Rng + ?Sized>(cfg: &SacConfig, norm: Normalizer, rng: &mut R) -> Result<Self> {
        let h = HiddenActivation::Relu;
        let id = OutputActivation::Identity;
        let mut actor = Mlp::new(&sizes(OBS_DIM, 2 * ACT_DIM, cfg), h, id, rng)?;
        let last = actor.num_layers() - 1;
        actor.weights_mut(last).iter_mut().for_each(|w| *w *= 0.1);
        let critic1 = Mlp::new(&sizes(OBS_DIM + ACT_DIM, 1, cfg), h, id, rng)?;
        let critic2 = Mlp::new(&sizes(OBS_DIM + ACT_DIM, 1, cfg), h, id, rng)?;
        Ok(Self {
            target1: critic1.clone(),
            target2: critic2.clone(),
            actor,
            critic1,
            critic2,
            log_alpha: cfg.init_alpha.ln(),
            norm,
        })
    }

    pub fn alpha(&self) -> f64 {
        self.log_alpha.exp()
    }

    /// Policy action in `[-1, 1]^2`. A non-finite network output yields
    /// `[-1, -1]` (no correction) and `true`.
    pub fn act<R: Rng + ?Sized>(&self, o: &Observation, stochastic: bool, rng: &mut R) -> (Action, bool) {
        let out = match self.actor.forward(o) {
            Ok(v) if v.iter().all(|x| x.is_finite()) => v,
            _ => return ([-1.0; ACT_DIM], true),
        };
        if stochastic {
            (squash(&out, gaussian(rng)).action, false)
        } else {
            (std::array::from_fn(|i| out[i].tanh()), false)
        }
    }

    fn min_target(&self, o: &Observation, a: &Action) -> Result<f64> {
        let x = critic_input(o, a);
        Ok(self.target1.forward(&x)?[0].min(self.target2.forward(&x)?[0]))
    }

    pub fn to_bundle(&self) -> WeightsBundle {
        let mut b = WeightsBundle::new();
        b.push_net("actor", &self.actor);
        b.push_net("critic1", &self.critic1);
        b.push_net("critic2", &self.critic2);
        b.push_net("target1", &self.target1);
        b.push_net("target2", &self.target2);
        b.push_scalar("log_alpha", self.log_alpha);
        self.norm.write_bundle(&mut b);
        b
    }

    pub fn from_bundle(b: &WeightsBundle) -> Result<Self> {
        let actor = b.net("actor")?.clone();
        if actor.input_dim() != OBS_DIM || actor.output_dim() != 2 * ACT_DIM {
            return Err(Error::Data("actor network has the wrong shape".into()));
        }
        Ok(Self {
            actor,
            critic1: b.net("critic1")?.clone(),
            critic2: b.net("critic2")?.clone(),
            target1: b.net("target1")?.clone(),
            target2: b.net("target2")?.clone(),
            log_alpha: b.scalar("log_alpha")?,
            norm: Normalizer::from_bundle(b)?,
        })
    }
}

/// Optimiser state travelling with an agent during training.
pub struct SacLearner {
    pub agent: SacAgent,
    actor_opt: AdamState,
    c1_opt: AdamState,
    c2_opt: AdamState,
    alpha_opt: ScalarAdam,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub entropy: f64,
    pub alpha: f64,
}

impl SacLearner {
    pub fn new(agent: SacAgent, cfg: &SacConfig) -> Self {
        Self {
            actor_opt: AdamState::new(&agent.actor, cfg.actor_lr),
            c1_opt: AdamState::new(&agent.critic1, cfg.critic_lr),
            c2_opt: AdamState::new(&agent.critic2, cfg.critic_lr),
            alpha_opt: ScalarAdam::new(cfg.alpha_lr),
            agent,
        }
    }

    /// One step on both critics, the actor and the temperature, then the
    /// target soft update. `Ok(None)` when the loss was non-finite and the
    /// step was skipped.
    pub fn update<R: Rng + ?Sized>(&mut self, buffer: &ReplayBuffer, cfg: &SacConfig, rng: &mut R) -> Result<Option<UpdateStats>> {
        if buffer.len() < cfg.batch_size {
            return Err(Error::Data(format!("replay buffer holds {} < batch {}", buffer.len(), cfg.batch_size)));
        }
        let batch = buffer.sample(cfg.batch_size, rng);
        let n = batch.len() as f64;
        let ag = &self.agent;
        let alpha = ag.alpha();

        // critics
        let mut g1 = Grads::zeros_like(&ag.critic1);
        let mut g2 = Grads::zeros_like(&ag.critic2);
        let mut tape = Tape::default();
        let mut critic_loss = 0.0;
        for tr in &batch {
            let target = if tr.done {
                tr.reward
            } else {
                let out = ag.actor.forward(&tr.next)?;
                let s = squash(&out, gaussian(rng));
                tr.reward + cfg.gamma * (ag.min_target(&tr.next, &s.action)? - alpha * s.log_prob)
            };
            let x = critic_input(&tr.obs, &tr.action);
            for (net, g) in [(&ag.critic1, &mut g1), (&ag.critic2, &mut g2)] {
                net.forward_tape(&x, &mut tape)?;
                let d = tape.output()[0] - target;
                critic_loss += d * d / n;
                net.backward_accumulate(&tape, &[2.0 * d / n], g)?;
            }
        }

        // actor and temperature against the current critics
        let mut ga = Grads::zeros_like(&ag.actor);
        let mut scratch = Grads::zeros_like(&ag.critic1);
        let mut atape = Tape::default();
        let (mut actor_loss, mut logp_sum) = (0.0, 0.0);
        for tr in &batch {
            ag.actor.forward_tape(&tr.obs, &mut atape)?;
            let s = squash(atape.output(), gaussian(rng));
            let x = critic_input(&tr.obs, &s.action);
            ag.critic1.forward_tape(&x, &mut tape)?;
            let q1 = tape.output()[0];
            let q2 = ag.critic2.forward(&x)?[0];
            let dq = if q1 <= q2 {
                ag.critic1.backward_accumulate(&tape, &[1.0], &mut scratch)?
            } else {
                ag.critic2.backward(&x, &[1.0])?.1
            };
            actor_loss += (alpha * s.log_prob - q1.min(q2)) / n;
            logp_sum += s.log_prob;
            let mut d_out = [0.0; 2 * ACT_DIM];
            for i in 0..ACT_DIM {
                let t = s.action[i];
                let one = 1.0 - t * t;
                let du = alpha * 2.0 * t * one / (one + TANH_EPS) - dq[OBS_DIM + i] * one;
                d_out[i] = du / n;
                d_out[ACT_DIM + i] = if s.clamped[i] { 0.0 } else { (du * s.std[i] * s.noise[i] - alpha) / n };
            }
            ag.actor.backward_accumulate(&atape, &d_out, &mut ga)?;
        }
        let mean_logp = logp_sum / n;
        let alpha_grad = -(mean_logp + cfg.target_entropy);
        if !(critic_loss.is_finite() && actor_loss.is_finite() && alpha_grad.is_finite()) {
            return Ok(None);
        }
        if [&g1, &g2, &ga].iter().any(|g| g.first_non_finite_layer().is_some()) {
            return Ok(None);
        }
        let ag = &mut self.agent;
        self.c1_opt.step(&mut ag.critic1, &g1)?;
        self.c2_opt.step(&mut ag.critic2, &g2)?;
        self.actor_opt.step(&mut ag.actor, &ga)?;
        self.alpha_opt.step(&mut ag.log_alpha, alpha_grad)?;
        ag.target1.soft_update_from(&ag.critic1, cfg.tau);
        ag.target2.soft_update_from(&ag.critic2, cfg.tau);
        Ok(Some(UpdateStats {
            critic_loss,
            actor_loss,
            entropy: -mean_logp,
            alpha: ag.alpha(),
        }))
    }
}

// ---- environments -------------------------------------------------------

/// Something the 1 kHz loop can drive: the plant or a learned model of it.
pub trait ForceEnv: Send {
    fn name(&self) -> &str;
    fn reset(&mut self, seed: u64) -> Result<PlantState>;
    /// Advance one 1 kHz step and return the measured state.
    fn step(&mut self, u: f64) -> Result<PlantState>;
}

pub struct PlantEnv {
    params: HydraulicParams,
    unc: UncertaintyConfig,
    dt: f64,
    plant: Plant,
}

impl PlantEnv {
    pub fn new(params: HydraulicParams, unc: UncertaintyConfig, dt: f64) -> Result<Self> {
        Ok(Self {
            plant: Plant::new(params, unc, dt, 0)?,
            params,
            unc,
            dt,
        })
    }
}

impl ForceEnv for PlantEnv {
    fn name(&self) -> &str {
        "plant"
    }

    fn reset(&mut self, seed: u64) -> Result<PlantState> {
        self.plant = Plant::new(self.params, self.unc, self.dt, seed)?;
        Ok(self.plant.measured())
    }

    fn step(&mut self, u: f64) -> Result<PlantState> {
        self.plant.step(u)?;
        Ok(self.plant.measured())
    }
}

/// The surrogate integrated with its own step; inputs are saturated like
/// the plant's.
pub struct SurrogateEnv {
    model: SurrogateModel,
    start: State,
    x: State,
    u_max: f64,
}

impl SurrogateEnv {
    pub fn new(model: SurrogateModel, params: &HydraulicParams) -> Self {
        let start = params.rest_state().to_array();
        Self {
            model,
            start,
            x: start,
            u_max: params.u_max,
        }
    }
}

impl ForceEnv for SurrogateEnv {
    fn name(&self) -> &str {
        "surrogate"
    }

    fn reset(&mut self, _seed: u64) -> Result<PlantState> {
        self.x = self.start;
        Ok(PlantState::from_array(&self.x))
    }

    fn step(&mut self, u: f64) -> Result<PlantState> {
        let u = u.clamp(-self.u_max, self.u_max);
        self.x = self.model.step(&self.x, u, self.model.dt)?;
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence("surrogate state became non-finite".into()));
        }
        Ok(PlantState::from_array(&self.x))
    }
}

/// Registered environment names.
pub const ENVIRONMENTS: [&str; 2] = ["plant", "surrogate"];

pub fn build_env(
    name: &str,
    params: HydraulicParams,
    unc: UncertaintyConfig,
    dt: f64,
    surrogate: Option<&SurrogateModel>,
) -> Result<Box<dyn ForceEnv>> {
    match name {
        "plant" => Ok(Box::new(PlantEnv::new(params, unc, dt)?)),
        "surrogate" => {
            let m = surrogate.ok_or(Error::Prerequisite {
                artifact: "surrogate weights".into(),
                command: "train-model",
            })?;
            Ok(Box::new(SurrogateEnv::new(m.clone(), &params)))
        }
        other => Err(Error::Config(format!("unknown environment `{other}` (known: {ENVIRONMENTS:?})"))),
    }
}

// ---- gain policies ------------------------------------------------------

/// Chooses the FL gains once per policy step.
pub trait GainPolicy {
    fn name(&self) -> &str;
    /// Action in `[-1, 1]^2`, or `None` to use the base gains unchanged.
    fn action(&mut self, o: &Observation) -> Option<Action>;
}

pub struct FixedGains;

impl GainPolicy for FixedGains {
    fn name(&self) -> &str {
        "fixed"
    }

    fn action(&mut self, _o: &Observation) -> Option<Action> {
        None
    }
}

/// Deterministic (mean) actions of a trained actor.
pub struct AgentPolicy<'a>(pub &'a SacAgent);

impl GainPolicy for AgentPolicy<'_> {
    fn name(&self) -> &str {
        "agent"
    }

    fn action(&mut self, o: &Observation) -> Option<Action> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        Some(self.0.act(o, false, &mut rng).0)
    }
}

// ---- the dual-rate loop -------------------------------------------------

/// Per-policy-step record.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepLog {
    pub t: f64,
    pub f_r: f64,
    pub f_l: f64,
    pub kp: f64,
    pub ki: f64,
    pub action: Action,
    pub reward: f64,
    pub u: f64,
    pub delta_u: f64,
    pub cert_pre: f64,
    pub cert_post: f64,
}

/// One 1 kHz row. `reward` is set on the last substep of a policy step and
/// `cert` on the substep where the filter was evaluated; NaN elsewhere.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TraceSample {
    pub t: f64,
    pub f_r: f64,
    pub x: PlantState,
    pub u_nom: f64,
    pub delta_u: f64,
    pub u: f64,
    pub kp: f64,
    pub ki: f64,
    pub reward: f64,
    pub cert: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EpisodeLog {
    pub steps: Vec<StepLog>,
    pub trace: Vec<TraceSample>,
    pub filter: Vec<FilterRecord>,
    pub ret: f64,
    pub diverged: bool,
}

impl EpisodeLog {
    pub fn mean_abs_du(&self) -> f64 {
        if self.filter.is_empty() {
            0.0
        } else {
            self.filter.iter().map(|r| r.delta_u.abs()).sum::<f64>() / self.filter.len() as f64
        }
    }
}

/// Shared pieces of the closed loop.
pub struct LoopSetup<'a> {
    pub params: HydraulicParams,
    pub ctrl: ControllerConfig,
    pub norm: &'a Normalizer,
    pub certifier: Option<&'a Certifier<'a>>,
    pub dt: f64,
    pub q1: f64,
    pub q2: f64,
    pub divergence_penalty: f64,
    pub base: FlGains,
}

/// What the loop asks for at every policy step.
pub enum Actor<'a, 'b> {
    Policy(&'b mut dyn GainPolicy),
    /// Training: stochastic actions, transitions pushed, updates run.
    Learn {
        learner: &'b mut SacLearner,
        buffer: &'b mut ReplayBuffer,
        cfg: &'a SacConfig,
        rng: &'b mut ChaCha8Rng,
        random_until: usize,
        updates: &'b mut usize,
    },
}

/// Run one episode of `policy_steps` policy steps, each spanning
/// [`SUBSTEPS`] plant steps. The filter correction is evaluated on the first
/// plant step of each policy step and held.
pub fn run_episode(
    env: &mut dyn ForceEnv,
    reference: &dyn Reference,
    policy_steps: usize,
    setup: &LoopSetup,
    mut actor: Actor,
    env_seed: u64,
) -> Result<EpisodeLog> {
    let p = setup.params;
    let dt = setup.dt;
    let mut log = EpisodeLog::default();
    let mut x = env.reset(env_seed)?;
    let mut cs = ControllerState::default();
    let mut prev: Action = [0.0; ACT_DIM];
    let sigma = setup.norm.in_std[F_L];
    let mut e_prev = (reference.eval(0.0).0 - x.f_l) / sigma;
    let amp = reference.amplitude();
    for k in 0..policy_steps {
        let t0 = (k * SUBSTEPS) as f64 * dt;
        let (fr0, frd0) = reference.eval(t0);
        let obs = observe(setup.norm, &x.to_array(), fr0, frd0, prev);
        let action = match &mut actor {
            Actor::Policy(pol) => pol.action(&obs),
            Actor::Learn {
                learner, rng, random_until, ..
            } => {
                if *random_until > 0 {
                    *random_until -= 1;
                    Some(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
                } else {
                    Some(learner.agent.act(&obs, true, *rng).0)
                }
            }
        };
        let gains = match action {
            Some(a) => setup.base.apply_gain_action(a),
            None => setup.base,
        };
        let (kp, ki) = gains.effective();
        let mut held = 0.0;
        let mut rec = FilterRecord::default();
        let mut u_last = 0.0;
        let mut diverged = false;
        let mut fr_last = fr0;
        for s in 0..SUBSTEPS {
            let t = t0 + s as f64 * dt;
            let (f_r, f_r_dot) = reference.eval(t);
            fr_last = f_r;
            let u_nom = fl_control(&x, f_r, f_r_dot, &gains, &mut cs, &p, &setup.ctrl, dt).u_nom;
            let mut cert = f64::NAN;
            if s == 0 {
                if let Some(cf) = setup.certifier {
                    let cp = ControlPoint {
                        f_r,
                        f_r_dot,
                        kp,
                        ki,
                        integral: cs.integral,
                    };
                    let eval = cf.evaluate_online(&x.to_array(), u_nom, &cp, dt);
                    let out = qp_filter(u_nom, &eval, p.u_max);
                    rec = FilterRecord::from_eval(&eval, &out, u_nom);
                    held = out.delta_u;
                    cert = rec.cert_pre;
                    log.filter.push(rec);
                }
            }
            let u = (u_nom.clamp(-p.u_max, p.u_max) + held).clamp(-p.u_max, p.u_max);
            u_last = u;
            log.trace.push(TraceSample {
                t,
                f_r,
                x,
                u_nom,
                delta_u: held,
                u,
                kp,
                ki,
                reward: f64::NAN,
                cert,
            });
            match env.step(u) {
                Ok(nx) => x = nx,
                Err(_) => {
                    diverged = true;
                    break;
                }
            }
            if crate::certificate::diverged(&x, f_r, amp) {
                diverged = true;
                break;
            }
        }
        let e = (fr_last - x.f_l) / sigma;
        let e = if e.is_finite() { e } else { 0.0 };
        let mut r = -setup.q1 * e * e - setup.q2 * (e - e_prev).powi(2);
        if diverged {
            r += setup.divergence_penalty;
        }
        e_prev = e;
        log.ret += r;
        if let Some(last) = log.trace.last_mut() {
            last.reward = r;
        }
        let a = action.unwrap_or([0.0; ACT_DIM]);
        log.steps.push(StepLog {
            t: t0,
            f_r: fr0,
            f_l: x.f_l,
            kp,
            ki,
            action: a,
            reward: r,
            u: u_last,
            delta_u: held,
            cert_pre: rec.cert_pre,
            cert_post: rec.cert_post,
        });
        if let Actor::Learn {
            learner,
            buffer,
            cfg,
            rng,
            updates,
            ..
        } = &mut actor
        {
            let t1 = ((k + 1) * SUBSTEPS) as f64 * dt;
            let (fr1, frd1) = reference.eval(t1);
            let next = if diverged { obs } else { observe(setup.norm, &x.to_array(), fr1, frd1, a) };
            buffer.push(Transition {
                obs,
                action: a,
                reward: r,
                next,
                done: diverged,
            });
            if buffer.len() >= cfg.warmup_steps.max(cfg.batch_size) {
                for _ in 0..cfg.updates_per_step {
                    learner.update(buffer, cfg, *rng)?;
                    **updates += 1;
                }
            }
        }
        prev = a;
        if diverged {
            log.diverged = true;
            break;
        }
    }
    Ok(log)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingCurve {
    pub returns: Vec<f64>,
    pub diverged: Vec<bool>,
    pub mean_abs_du: Vec<f64>,
    pub updates: usize,
}

/// Learner plus replay buffer, so fine-tuning can continue where
/// pretraining stopped (optimizer moments and stored transitions included).
pub struct OnlineTrainer {
    pub learner: SacLearner,
    pub buffer: ReplayBuffer,
}

impl OnlineTrainer {
    pub fn new(agent: SacAgent, cfg: &SacConfig) -> Self {
        Self {
            learner: SacLearner::new(agent, cfg),
            buffer: ReplayBuffer::new(cfg.replay_capacity),
        }
    }

    pub fn agent(&self) -> &SacAgent {
        &self.learner.agent
    }

    /// Run `cfg.episodes` training episodes on `env`. Every applied input
    /// passes through the filter when one is given. `fresh` enables the
    /// uniform-random warmup actions.
    #[allow(clippy::too_many_arguments)]
    pub fn train(
        &mut self,
        env: &mut dyn ForceEnv,
        cfg: &SacConfig,
        params: HydraulicParams,
        ctrl: ControllerConfig,
        certifier: Option<&Certifier>,
        fresh: bool,
        dt: f64,
        seed: u64,
    ) -> Result<TrainingCurve> {
        cfg.validate()?;
        let mut curve = TrainingCurve::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let norm = self.learner.agent.norm.clone();
        let mut random_until = if fresh && cfg.random_warmup { cfg.warmup_steps } else { 0 };
        let setup = LoopSetup {
            params,
            ctrl,
            norm: &norm,
            certifier: if cfg.filter { certifier } else { None },
            dt,
            q1: cfg.q1,
            q2: cfg.q2,
            divergence_penalty: cfg.divergence_penalty,
            base: FlGains::fixed(cfg.base_kp, cfg.base_ki),
        };
        for _ in 0..cfg.episodes {
            let reference = cfg.reference.sample(&mut rng);
            let env_seed = rng.random();
            let mut updates = 0;
            let mut ep_rng = ChaCha8Rng::seed_from_u64(rng.random());
            let log = run_episode(
                env,
                reference.as_ref(),
                cfg.steps_per_episode,
                &setup,
                Actor::Learn {
                    learner: &mut self.learner,
                    buffer: &mut self.buffer,
                    cfg,
                    rng: &mut ep_rng,
                    random_until,
                    updates: &mut updates,
                },
                env_seed,
            )?;
            random_until = random_until.saturating_sub(log.steps.len());
            curve.updates += updates;
            curve.returns.push(log.ret);
            curve.diverged.push(log.diverged);
            curve.mean_abs_du.push(log.mean_abs_du());
        }
        Ok(curve)
    }
}

/// Train an agent from scratch state (new optimizer, empty buffer) for
/// `cfg.episodes` episodes on `env`.
#[allow(clippy::too_many_arguments)]
pub fn train_online(
    env: &mut dyn ForceEnv,
    cfg: &SacConfig,
    params: HydraulicParams,
    ctrl: ControllerConfig,
    certifier: Option<&Certifier>,
    initial: SacAgent,
    fresh: bool,
    dt: f64,
    seed: u64,
) -> Result<(SacAgent, TrainingCurve)> {
    cfg.validate()?;
    if cfg.episodes == 0 {
        return Ok((initial, TrainingCurve::default()));
    }
    let mut trainer = OnlineTrainer::new(initial, cfg);
    let curve = trainer.train(env, cfg, params, ctrl, certifier, fresh, dt, seed)?;
    Ok((trainer.learner.agent, curve))
}
