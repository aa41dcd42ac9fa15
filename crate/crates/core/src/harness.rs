//! Experiment orchestration. Each command reads its upstream artifacts from
//! the output directory, writes its own stage directory and finishes with a
//! manifest of config hash, seed and artifact hashes.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::agent::{
    build_env, run_episode, Actor, OnlineTrainer, AgentPolicy, EpisodeLog, FixedGains, GainPolicy, LoopSetup, SacAgent,
    TrainingCurve, SUBSTEPS,
};
use crate::certificate::{
    certificate_samples, gamma_metrics, generate_labeled_trajectories, run_validation_episode, separation, train_metric,
    Certifier, FilterRecord, Gammas, MetricNet, MetricReport, Separation, TraceRow,
};
use crate::config::{hex, sub_seed, ExperimentConfig, CONTROLLERS};
use crate::controller::FlGains;
use crate::dynamics::{self, Dynamics, PlantDynamics, State};
use crate::error::{Error, Result};
use crate::nn::WeightsBundle;
use crate::plant::{Plant, STATE_NAMES};
use crate::plot::{LinePlot, Series};
use crate::reference::Sine;
use crate::surrogate::{collect_dataset, train_model as fit_surrogate, validate_model, SurrogateModel, TrainReport, TrajectoryDataset};

/// CLI command names in pipeline order.
pub const COMMANDS: [&str; 7] = [
    "collect",
    "train-model",
    "train-metric",
    "validate-filter",
    "train-agent",
    "evaluate",
    "replay",
];

/// Stride between rollout start indices when scoring the surrogate.
const RMSE_STRIDE: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    /// `(relative path, sha256)` sorted by path.
    pub artifacts: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "config_sha256 = {}", self.config_hash);
        let _ = writeln!(s, "seed = {}", self.seed);
        for (p, h) in &self.artifacts {
            let _ = writeln!(s, "artifact {p} = {h}");
        }
        s
    }
}

/// Run a command by name and return its manifest.
pub fn run(command: &str, cfg: &ExperimentConfig, out: &Path) -> Result<Manifest> {
    cfg.validate()?;
    match command {
        "collect" => collect(cfg, out).map(|r| r.0),
        "train-model" => train_model(cfg, out).map(|r| r.0),
        "train-metric" => train_metric_cmd(cfg, out).map(|r| r.0),
        "validate-filter" => validate_filter(cfg, out).map(|r| r.0),
        "train-agent" => train_agent(cfg, out).map(|r| r.0),
        "evaluate" => evaluate(cfg, out).map(|r| r.0),
        "replay" => replay(cfg, out).map(|r| r.0),
        other => Err(Error::Config(format!("unknown command `{other}` (known: {COMMANDS:?})"))),
    }
}

// ---- file helpers -------------------------------------------------------

fn stage(out: &Path, name: &str) -> Result<PathBuf> {
    let d = out.join(name);
    std::fs::create_dir_all(&d)?;
    Ok(d)
}

fn write_csv(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush()?;
    Ok(())
}

fn num(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        v.to_string()
    }
}

fn write_plot(path: &Path, plot: &LinePlot) -> Result<()> {
    std::fs::write(path, plot.to_svg())?;
    Ok(())
}

fn file_hash(path: &Path) -> Result<String> {
    Ok(hex(&Sha256::digest(std::fs::read(path)?)))
}

/// Hash every file under `dir` except the manifest and write `manifest.txt`.
fn finish(command: &str, cfg: &ExperimentConfig, dir: &Path) -> Result<Manifest> {
    let mut files = vec![];
    collect_files(dir, dir, &mut files)?;
    files.retain(|p| p != "manifest.txt");
    files.sort();
    let artifacts = files
        .into_iter()
        .map(|p| {
            let h = file_hash(&dir.join(&p))?;
            Ok((p, h))
        })
        .collect::<Result<Vec<_>>>()?;
    let m = Manifest {
        command: command.into(),
        config_hash: cfg.hash(),
        seed: cfg.seed,
        artifacts,
    };
    std::fs::write(dir.join("manifest.txt"), m.to_text())?;
    Ok(m)
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in std::fs::read_dir(dir)? {
        let p = entry?.path();
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("walk stays under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

fn read_bundle(path: &Path, command: &'static str) -> Result<WeightsBundle> {
    let text = std::fs::read_to_string(path).map_err(|_| Error::Prerequisite {
        artifact: path.display().to_string(),
        command,
    })?;
    Ok(WeightsBundle::from_text(&text)?)
}

pub fn load_surrogate(out: &Path) -> Result<SurrogateModel> {
    SurrogateModel::from_bundle(&read_bundle(&out.join("model/surrogate.weights"), "train-model")?)
}

pub fn load_metric(out: &Path) -> Result<MetricNet> {
    MetricNet::from_bundle(&read_bundle(&out.join("metric/metric.weights"), "train-metric")?)
}

/// `which` is `pretrained` or `finetuned`.
pub fn load_agent(out: &Path, which: &str) -> Result<SacAgent> {
    SacAgent::from_bundle(&read_bundle(&out.join(format!("agent/{which}.weights")), "train-agent")?)
}

fn certificate_backend(cfg: &ExperimentConfig, surrogate: &SurrogateModel) -> Result<Box<dyn Dynamics>> {
    dynamics::build(&cfg.validation.dynamics, cfg.plant, cfg.uncertainty, cfg.dt, Some(surrogate))
}

fn certifier<'a>(cfg: &ExperimentConfig, dynamics: &'a dyn Dynamics, metric: &'a MetricNet) -> Certifier<'a> {
    Certifier {
        dynamics,
        metric,
        params: cfg.plant,
        g_min: cfg.controller.g_min(&cfg.plant),
        lambda: cfg.metric.lambda_rate,
        fd_step: cfg.metric.fd_step,
    }
}

// ---- collect ------------------------------------------------------------

pub fn collect(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, TrajectoryDataset)> {
    let dir = stage(out, "collect")?;
    let data = collect_dataset(&cfg.collect, &cfg.plant, &cfg.uncertainty, &cfg.controller, cfg.dt, sub_seed(cfg.seed, "collect"))?;
    if cfg.collect.n_episodes > 0 && data.episodes.is_empty() {
        return Err(Error::Divergence("every collection episode diverged".into()));
    }
    data.save(&dir)?;
    write_csv(
        &dir.join("summary.csv"),
        &["episode", "transitions", "f_l_min", "f_l_max"],
        data.episodes.iter().enumerate().map(|(k, e)| {
            let fl = e.states.iter().map(|x| x[2]);
            let lo = fl.clone().fold(f64::INFINITY, f64::min);
            let hi = fl.fold(f64::NEG_INFINITY, f64::max);
            vec![k.to_string(), e.len().to_string(), num(lo), num(hi)]
        }),
    )?;
    Ok((finish("collect", cfg, &dir)?, data))
}

// ---- train-model --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSummary {
    pub report: TrainReport,
    /// Held-out normalised RMSE per state channel.
    pub surrogate_rmse: State,
    pub analytic_rmse: State,
}

pub fn train_model(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, ModelSummary)> {
    let data = TrajectoryDataset::load(&out.join("collect"))?;
    let dir = stage(out, "model")?;
    let (train, heldout) = data.split(cfg.model.train_fraction);
    let (model, report) = fit_surrogate(&train, &cfg.model, sub_seed(cfg.seed, "model"))?;
    std::fs::write(dir.join("surrogate.weights"), model.to_bundle().to_text())?;
    let surrogate_rmse = validate_model(&model, &model.norm, &heldout, cfg.model.horizon, RMSE_STRIDE)?;
    let analytic = PlantDynamics::analytic(cfg.plant, cfg.dt);
    let analytic_rmse = validate_model(&analytic, &model.norm, &heldout, cfg.model.horizon, RMSE_STRIDE)?;
    write_csv(
        &dir.join("loss.csv"),
        &["epoch", "train_loss"],
        report.epoch_loss.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), num(*l)]),
    )?;
    write_csv(
        &dir.join("rmse.csv"),
        &["channel", "surrogate", "analytic", "ratio"],
        (0..STATE_NAMES.len()).map(|i| {
            vec![
                STATE_NAMES[i].to_string(),
                num(surrogate_rmse[i]),
                num(analytic_rmse[i]),
                num(analytic_rmse[i] / surrogate_rmse[i]),
            ]
        }),
    )?;
    write_plot(
        &dir.join("loss.svg"),
        &LinePlot::new("Surrogate training loss", "epoch", "window loss").with(Series::new(
            "train",
            report.epoch_loss.iter().enumerate().map(|(i, l)| ((i + 1) as f64, *l)).collect(),
        )),
    )?;
    let summary = ModelSummary {
        report,
        surrogate_rmse,
        analytic_rmse,
    };
    Ok((finish("train-model", cfg, &dir)?, summary))
}

// ---- train-metric -------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricSummary {
    pub report: MetricReport,
    pub separation: Separation,
    /// Labelled episodes `(stable, unstable)`.
    pub counts: (usize, usize),
    pub dropped_samples: usize,
}

pub fn train_metric_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, MetricSummary)> {
    let surrogate = load_surrogate(out)?;
    let dir = stage(out, "metric")?;
    let labels = generate_labeled_trajectories(&cfg.labels, &cfg.plant, &cfg.uncertainty, &cfg.controller, cfg.dt, sub_seed(cfg.seed, "labels"))?;
    let backend = certificate_backend(cfg, &surrogate)?;
    let norm = surrogate.norm.clone();
    let (samples, dropped) = certificate_samples(
        &labels,
        backend.as_ref(),
        &norm,
        &cfg.plant,
        cfg.controller.g_min(&cfg.plant),
        cfg.metric.fd_step,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "metric-init"));
    let init = MetricNet::new(cfg.metric.hidden_layers, cfg.metric.hidden_size, cfg.metric.eps_spd, norm, &mut rng)?;
    let (net, report) = train_metric(&samples, init, &cfg.metric, sub_seed(cfg.seed, "metric"))?;
    let sep = separation(&net, &samples, cfg.metric.lambda_rate)?;
    std::fs::write(dir.join("metric.weights"), net.to_bundle().to_text())?;
    write_csv(
        &dir.join("loss.csv"),
        &["epoch", "contraction_loss", "total_loss"],
        report
            .epoch_contraction
            .iter()
            .zip(&report.epoch_total)
            .enumerate()
            .map(|(i, (c, t))| vec![(i + 1).to_string(), num(*c), num(*t)]),
    )?;
    write_csv(
        &dir.join("loss_steps.csv"),
        &["step", "total_loss"],
        report.batch_total.iter().enumerate().map(|(i, l)| vec![(i + 1).to_string(), num(*l)]),
    )?;
    write_csv(
        &dir.join("separation.csv"),
        &["label", "steps", "violated_pct"],
        [
            vec!["stable".into(), sep.stable_steps.to_string(), num(100.0 * sep.stable_violated)],
            vec!["unstable".into(), sep.unstable_steps.to_string(), num(100.0 * sep.unstable_violated)],
        ],
    )?;
    write_csv(
        &dir.join("labels.csv"),
        &["episode", "kp", "ki", "stable", "steps"],
        labels
            .episodes
            .iter()
            .enumerate()
            .map(|(k, e)| vec![k.to_string(), num(e.kp), num(e.ki), e.stable.to_string(), e.inputs.len().to_string()]),
    )?;
    write_plot(
        &dir.join("loss.svg"),
        &LinePlot::new("Metric training loss", "epoch", "loss")
            .with(Series::new(
                "contraction",
                report.epoch_contraction.iter().enumerate().map(|(i, l)| ((i + 1) as f64, *l)).collect(),
            ))
            .with(Series::new(
                "total",
                report.epoch_total.iter().enumerate().map(|(i, l)| ((i + 1) as f64, *l)).collect(),
            )),
    )?;
    let summary = MetricSummary {
        report,
        separation: sep,
        counts: labels.counts(),
        dropped_samples: dropped,
    };
    Ok((finish("train-metric", cfg, &dir)?, summary))
}

// ---- validate-filter ----------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct UnstableRun {
    pub kp: f64,
    pub ki: f64,
    pub diverged_unfiltered: bool,
    pub diverged_filtered: bool,
    /// Gammas of the filtered run.
    pub gammas: Gammas,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationSummary {
    pub stable: Gammas,
    pub stable_diverged: bool,
    /// Pooled over all filtered unstable runs.
    pub unstable: Gammas,
    pub runs: Vec<UnstableRun>,
}

fn gamma_row(name: &str, g: &Gammas) -> Vec<String> {
    vec![name.into(), num(g.g1), num(g.g2), num(g.g3), num(g.g4), num(g.g5)]
}

fn trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    write_csv(
        path,
        &["t", "f_r", "f_l", "u_nom", "u"],
        trace.iter().map(|r| vec![num(r.t), num(r.f_r), num(r.f_l), num(r.u_nom), num(r.u)]),
    )
}

fn tracking_plot(title: &str, runs: &[(&str, &[TraceRow])]) -> LinePlot {
    let mut p = LinePlot::new(title, "t (s)", "force (N)");
    if let Some((_, tr)) = runs.first() {
        p = p.with(Series::new("f_r", tr.iter().map(|r| (r.t, r.f_r)).collect()));
    }
    for (name, tr) in runs {
        p = p.with(Series::new(name, tr.iter().map(|r| (r.t, r.f_l)).collect()));
    }
    p
}

pub fn validate_filter(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, ValidationSummary)> {
    let surrogate = load_surrogate(out)?;
    let metric = load_metric(out)?;
    let dir = stage(out, "validate")?;
    let backend = certificate_backend(cfg, &surrogate)?;
    let cert = certifier(cfg, backend.as_ref(), &metric);
    let vc = &cfg.validation;
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "validate"));

    let reference = vc.reference.sample(&mut rng);
    let mut plant = Plant::new(cfg.plant, cfg.uncertainty, cfg.dt, rng.random())?;
    let stable = run_validation_episode(
        &mut plant,
        reference.as_ref(),
        vc.stable_kp,
        vc.stable_ki,
        &cert,
        true,
        vc,
        &cfg.controller,
        cfg.dt,
    );
    let stable_g = gamma_metrics(&stable.records, cfg.plant.u_max)?;
    trace_csv(&dir.join("trace_stable.csv"), &stable.trace)?;
    write_plot(
        &dir.join("trace_stable.svg"),
        &tracking_plot(&format!("Kp = {}, Ki = {} with filter", vc.stable_kp, vc.stable_ki), &[("filtered", &stable.trace)]),
    )?;

    let mut runs = vec![];
    let mut pooled: Vec<FilterRecord> = vec![];
    for i in 0..vc.n_unstable {
        let kp = uniform(&mut rng, vc.kp_range);
        let ki = uniform(&mut rng, vc.ki_range);
        let reference = vc.reference.sample(&mut rng);
        let plant_seed: u64 = rng.random();
        let mut p0 = Plant::new(cfg.plant, cfg.uncertainty, cfg.dt, plant_seed)?;
        let off = run_validation_episode(&mut p0, reference.as_ref(), kp, ki, &cert, false, vc, &cfg.controller, cfg.dt);
        let mut p1 = Plant::new(cfg.plant, cfg.uncertainty, cfg.dt, plant_seed)?;
        let on = run_validation_episode(&mut p1, reference.as_ref(), kp, ki, &cert, true, vc, &cfg.controller, cfg.dt);
        let g = gamma_metrics(&on.records, cfg.plant.u_max)?;
        pooled.extend_from_slice(&on.records);
        if i < 3 {
            trace_csv(&dir.join(format!("trace_unstable_{i:02}_unfiltered.csv")), &off.trace)?;
            trace_csv(&dir.join(format!("trace_unstable_{i:02}_filtered.csv")), &on.trace)?;
            write_plot(
                &dir.join(format!("trace_unstable_{i:02}.svg")),
                &tracking_plot(
                    &format!("Kp = {kp:.2}, Ki = {ki:.2}"),
                    &[("filtered", &on.trace), ("unfiltered", &off.trace)],
                ),
            )?;
        }
        runs.push(UnstableRun {
            kp,
            ki,
            diverged_unfiltered: off.diverged,
            diverged_filtered: on.diverged,
            gammas: g,
        });
    }
    let unstable_g = if pooled.is_empty() { Gammas::default() } else { gamma_metrics(&pooled, cfg.plant.u_max)? };
    write_csv(
        &dir.join("gammas.csv"),
        &["validation", "gamma1_pct", "gamma2_pct", "gamma3", "gamma4_pct", "gamma5"],
        [gamma_row("stable", &stable_g), gamma_row("unstable", &unstable_g)],
    )?;
    write_csv(
        &dir.join("episodes.csv"),
        &[
            "run",
            "kp",
            "ki",
            "diverged_unfiltered",
            "diverged_filtered",
            "gamma1_pct",
            "gamma2_pct",
            "gamma3",
            "gamma4_pct",
            "gamma5",
        ],
        runs.iter().enumerate().map(|(i, r)| {
            let mut row = vec![
                i.to_string(),
                num(r.kp),
                num(r.ki),
                r.diverged_unfiltered.to_string(),
                r.diverged_filtered.to_string(),
            ];
            row.extend(gamma_row("", &r.gammas).into_iter().skip(1));
            row
        }),
    )?;
    let summary = ValidationSummary {
        stable: stable_g,
        stable_diverged: stable.diverged,
        unstable: unstable_g,
        runs,
    };
    Ok((finish("validate-filter", cfg, &dir)?, summary))
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[1] > r[0] {
        rng.random_range(r[0]..r[1])
    } else {
        r[0]
    }
}

// ---- train-agent --------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSummary {
    pub pretrain: TrainingCurve,
    pub finetune: TrainingCurve,
}

fn curve_csv(path: &Path, c: &TrainingCurve) -> Result<()> {
    write_csv(
        path,
        &["episode", "return", "diverged", "mean_abs_du"],
        (0..c.returns.len()).map(|i| vec![(i + 1).to_string(), num(c.returns[i]), c.diverged[i].to_string(), num(c.mean_abs_du[i])]),
    )
}

fn curve_series(name: &str, c: &TrainingCurve, start: usize) -> Series {
    Series::new(name, c.returns.iter().enumerate().map(|(i, r)| ((start + i + 1) as f64, *r)).collect())
}

pub fn train_agent(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, AgentSummary)> {
    let surrogate = load_surrogate(out)?;
    let metric = if cfg.agent.filter { Some(load_metric(out)?) } else { None };
    let dir = stage(out, "agent")?;
    let backend = certificate_backend(cfg, &surrogate)?;
    let cert = metric.as_ref().map(|m| certifier(cfg, backend.as_ref(), m));

    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, "agent-init"));
    let fresh = SacAgent::new(&cfg.agent, surrogate.norm.clone(), &mut rng)?;
    // fine-tuning continues the same learner: optimizer moments and the
    // pretraining transitions carry over, so the first plant updates are
    // not taken by a cold optimizer on a near-empty buffer
    let mut trainer = OnlineTrainer::new(fresh, &cfg.agent);
    let mut env = build_env(&cfg.finetune.pretrain_env, cfg.plant, cfg.uncertainty, cfg.dt, Some(&surrogate))?;
    let pre_curve = trainer.train(
        env.as_mut(),
        &cfg.agent,
        cfg.plant,
        cfg.controller,
        cert.as_ref(),
        true,
        cfg.dt,
        sub_seed(cfg.seed, "pretrain"),
    )?;
    std::fs::write(dir.join("pretrained.weights"), trainer.agent().to_bundle().to_text())?;

    let ft_cfg = crate::agent::SacConfig {
        episodes: cfg.finetune.episodes,
        ..cfg.agent.clone()
    };
    let mut env = build_env(&cfg.finetune.env, cfg.plant, cfg.uncertainty, cfg.dt, Some(&surrogate))?;
    let ft_curve = trainer.train(
        env.as_mut(),
        &ft_cfg,
        cfg.plant,
        cfg.controller,
        cert.as_ref(),
        false,
        cfg.dt,
        sub_seed(cfg.seed, "finetune"),
    )?;
    let fine = trainer.learner.agent;
    std::fs::write(dir.join("finetuned.weights"), fine.to_bundle().to_text())?;
    curve_csv(&dir.join("pretrain_curve.csv"), &pre_curve)?;
    curve_csv(&dir.join("finetune_curve.csv"), &ft_curve)?;
    write_plot(
        &dir.join("returns.svg"),
        &LinePlot::new("Episode return", "episode", "return")
            .with(curve_series(&format!("pretrain ({})", cfg.finetune.pretrain_env), &pre_curve, 0))
            .with(curve_series(&format!("fine-tune ({})", cfg.finetune.env), &ft_curve, pre_curve.returns.len())),
    )?;
    let summary = AgentSummary {
        pretrain: pre_curve,
        finetune: ft_curve,
    };
    Ok((finish("train-agent", cfg, &dir)?, summary))
}

// ---- evaluate -----------------------------------------------------------

/// Force-tracking RMSE (N) per controller and frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct RmseReport {
    pub frequencies: Vec<f64>,
    pub controllers: Vec<String>,
    /// `rmse[c][f][seed]`; infinite when the run diverged.
    pub rmse: Vec<Vec<Vec<f64>>>,
}

impl RmseReport {
    pub fn mean(&self, c: usize, f: usize) -> f64 {
        let v = &self.rmse[c][f];
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    pub fn std(&self, c: usize, f: usize) -> f64 {
        let v = &self.rmse[c][f];
        let m = self.mean(c, f);
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
    }

    pub fn controller_index(&self, name: &str) -> Option<usize> {
        self.controllers.iter().position(|c| c == name)
    }

    pub fn frequency_index(&self, f: f64) -> Option<usize> {
        self.frequencies.iter().position(|x| (x - f).abs() < 1e-9)
    }
}

/// Agents loaded for evaluation and replay.
struct Lineup {
    pretrained: SacAgent,
    finetuned: SacAgent,
}

impl Lineup {
    fn load(out: &Path) -> Result<Self> {
        Ok(Self {
            pretrained: load_agent(out, "pretrained")?,
            finetuned: load_agent(out, "finetuned")?,
        })
    }

    /// Run one controller against a sine reference on the plant.
    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        name: &str,
        cfg: &ExperimentConfig,
        cert: Option<&Certifier>,
        sine: Sine,
        duration_s: f64,
        env_seed: u64,
    ) -> Result<EpisodeLog> {
        let (mut fixed, mut pre, mut fine) = (FixedGains, AgentPolicy(&self.pretrained), AgentPolicy(&self.finetuned));
        let (policy, base): (&mut dyn GainPolicy, FlGains) = match name {
            "fixed" => (&mut fixed, FlGains::fixed(cfg.validation.stable_kp, cfg.validation.stable_ki)),
            "pretrained" => (&mut pre, FlGains::fixed(cfg.agent.base_kp, cfg.agent.base_ki)),
            "finetuned" => (&mut fine, FlGains::fixed(cfg.agent.base_kp, cfg.agent.base_ki)),
            other => return Err(Error::Config(format!("unknown controller `{other}` (known: {CONTROLLERS:?})"))),
        };
        let norm = self.finetuned.norm.clone();
        let setup = LoopSetup {
            params: cfg.plant,
            ctrl: cfg.controller,
            norm: &norm,
            certifier: cert,
            dt: cfg.dt,
            q1: cfg.agent.q1,
            q2: cfg.agent.q2,
            divergence_penalty: cfg.agent.divergence_penalty,
            base,
        };
        let reference = cfg.agent.reference.ramped(Box::new(sine));
        let mut env = build_env("plant", cfg.plant, cfg.uncertainty, cfg.dt, None)?;
        let steps = (duration_s / (cfg.dt * SUBSTEPS as f64)).round() as usize;
        run_episode(env.as_mut(), reference.as_ref(), steps, &setup, Actor::Policy(policy), env_seed)
    }
}

/// RMSE of `f_r - f_l` over samples at or after `from_s`.
pub fn tracking_rmse(log: &EpisodeLog, from_s: f64) -> f64 {
    if log.diverged {
        return f64::INFINITY;
    }
    let tail: Vec<f64> = log.trace.iter().filter(|r| r.t >= from_s - 1e-12).map(|r| r.f_r - r.x.f_l).collect();
    if tail.is_empty() {
        return f64::NAN;
    }
    (tail.iter().map(|e| e * e).sum::<f64>() / tail.len() as f64).sqrt()
}

fn episode_csv(path: &Path, log: &EpisodeLog) -> Result<()> {
    write_csv(
        path,
        &[
            "t", "f_r", "f_h", "f_l", "p_a", "p_b", "x_p", "x_p_dot", "u_nom", "delta_u", "u", "Kp_eff", "Ki_eff", "reward",
            "cert_value",
        ],
        log.trace.iter().map(|r| {
            [
                r.t, r.f_r, r.x.f_h, r.x.f_l, r.x.p_a, r.x.p_b, r.x.x_p, r.x.x_p_dot, r.u_nom, r.delta_u, r.u, r.kp, r.ki,
                r.reward, r.cert,
            ]
            .into_iter()
            .map(num)
            .collect()
        }),
    )
}

fn gain_plot(title: &str, runs: &[(&str, &EpisodeLog)]) -> LinePlot {
    let mut p = LinePlot::new(title, "t (s)", "gain");
    for (name, log) in runs {
        p = p
            .with(Series::new(&format!("{name} Kp"), log.steps.iter().map(|s| (s.t, s.kp)).collect()))
            .with(Series::new(&format!("{name} Ki"), log.steps.iter().map(|s| (s.t, s.ki)).collect()));
    }
    p
}

fn force_plot(title: &str, runs: &[(&str, &EpisodeLog)]) -> LinePlot {
    let mut p = LinePlot::new(title, "t (s)", "force (N)");
    if let Some((_, log)) = runs.first() {
        p = p.with(Series::new("f_r", log.trace.iter().map(|r| (r.t, r.f_r)).collect()));
    }
    for (name, log) in runs {
        p = p.with(Series::new(name, log.trace.iter().map(|r| (r.t, r.x.f_l)).collect()));
    }
    p
}

pub fn evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, RmseReport)> {
    let lineup = Lineup::load(out)?;
    let surrogate = load_surrogate(out)?;
    let metric = if cfg.evaluate.filter { Some(load_metric(out)?) } else { None };
    let dir = stage(out, "evaluate")?;
    let backend = certificate_backend(cfg, &surrogate)?;
    let cert = metric.as_ref().map(|m| certifier(cfg, backend.as_ref(), m));
    let ev = &cfg.evaluate;
    let controllers: Vec<String> = CONTROLLERS.iter().map(|s| s.to_string()).collect();
    let mut report = RmseReport {
        frequencies: ev.frequencies.clone(),
        controllers: controllers.clone(),
        rmse: vec![vec![vec![]; ev.frequencies.len()]; controllers.len()],
    };
    let mut per_seed = vec![];
    for (fi, &freq) in ev.frequencies.iter().enumerate() {
        let mut first: Vec<(String, EpisodeLog)> = vec![];
        for s in 0..ev.seeds {
            // the same phase and plant noise for every controller
            let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(cfg.seed, &format!("evaluate/{freq}/{s}")));
            let sine = Sine {
                offset: ev.offset,
                amplitude: ev.amplitude,
                freq_hz: freq,
                phase: rng.random_range(0.0..std::f64::consts::TAU),
            };
            let env_seed: u64 = rng.random();
            for (ci, name) in controllers.iter().enumerate() {
                let log = lineup.run(name, cfg, cert.as_ref(), sine, ev.duration_s, env_seed)?;
                let r = tracking_rmse(&log, ev.transient_s);
                report.rmse[ci][fi].push(r);
                per_seed.push(vec![name.clone(), num(freq), s.to_string(), num(r), log.diverged.to_string()]);
                if s == 0 {
                    first.push((name.clone(), log));
                }
            }
        }
        for (name, log) in &first {
            write_csv(
                &dir.join(format!("trace_{name}_{freq}hz.csv")),
                &["t", "f_r", "f_l", "Kp_eff", "Ki_eff"],
                log.trace.iter().map(|r| vec![num(r.t), num(r.f_r), num(r.x.f_l), num(r.kp), num(r.ki)]),
            )?;
        }
        let runs: Vec<(&str, &EpisodeLog)> = first.iter().map(|(n, l)| (n.as_str(), l)).collect();
        write_plot(&dir.join(format!("force_{freq}hz.svg")), &force_plot(&format!("Force tracking at {freq} Hz"), &runs))?;
        write_plot(&dir.join(format!("gains_{freq}hz.svg")), &gain_plot(&format!("Effective gains at {freq} Hz"), &runs))?;
    }
    write_csv(
        &dir.join("rmse.csv"),
        &["controller", "freq_hz", "rmse_mean", "rmse_std", "diverged"],
        controllers.iter().enumerate().flat_map(|(ci, name)| {
            let report = &report;
            ev.frequencies.iter().enumerate().map(move |(fi, f)| {
                let div = report.rmse[ci][fi].iter().filter(|v| v.is_infinite()).count();
                vec![name.clone(), num(*f), num(report.mean(ci, fi)), num(report.std(ci, fi)), div.to_string()]
            })
        }),
    )?;
    write_csv(&dir.join("rmse_seeds.csv"), &["controller", "freq_hz", "seed", "rmse", "diverged"], per_seed)?;
    Ok((finish("evaluate", cfg, &dir)?, report))
}

// ---- replay -------------------------------------------------------------

pub fn replay(cfg: &ExperimentConfig, out: &Path) -> Result<(Manifest, Vec<(String, EpisodeLog)>)> {
    let lineup = Lineup::load(out)?;
    let surrogate = load_surrogate(out)?;
    let metric = if cfg.evaluate.filter { Some(load_metric(out)?) } else { None };
    let dir = stage(out, "replay")?;
    let backend = certificate_backend(cfg, &surrogate)?;
    let cert = metric.as_ref().map(|m| certifier(cfg, backend.as_ref(), m));
    let rc = &cfg.replay;
    let sine = Sine {
        offset: rc.offset,
        amplitude: rc.amplitude,
        freq_hz: rc.frequency,
        phase: 0.0,
    };
    let env_seed = sub_seed(cfg.seed, "replay");
    let mut logs = vec![];
    for name in &rc.controllers {
        let log = lineup.run(name, cfg, cert.as_ref(), sine, rc.duration_s, env_seed)?;
        episode_csv(&dir.join(format!("episode_{name}.csv")), &log)?;
        logs.push((name.clone(), log));
    }
    let runs: Vec<(&str, &EpisodeLog)> = logs.iter().map(|(n, l)| (n.as_str(), l)).collect();
    write_plot(&dir.join("force.svg"), &force_plot(&format!("Force tracking at {} Hz", rc.frequency), &runs))?;
    write_plot(&dir.join("gains.svg"), &gain_plot(&format!("Effective gains at {} Hz", rc.frequency), &runs))?;
    Ok((finish("replay", cfg, &dir)?, logs))
}
