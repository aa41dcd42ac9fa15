use contraq_core::agent::{build_env, train_online, OnlineTrainer, SacAgent, SacConfig};
use contraq_core::controller::ControllerConfig;
use contraq_core::plant::{HydraulicParams, UncertaintyConfig};
use contraq_core::surrogate::Normalizer;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small() -> SacConfig {
    SacConfig {
        episodes: 1,
        steps_per_episode: 60,
        hidden_size: 8,
        batch_size: 16,
        warmup_steps: 20,
        replay_capacity: 1000,
        filter: false,
        ..Default::default()
    }
}

fn norm() -> Normalizer {
    let mut n = Normalizer::identity();
    let x0 = HydraulicParams::default().rest_state().to_array();
    for (i, v) in x0.iter().enumerate() {
        n.in_mean[i] = *v;
        n.in_std[i] = v.abs().max(1.0);
    }
    n.in_std[2] = 200.0;
    n
}

#[test]
fn fine_tuning_continues_the_same_buffer_and_optimizer() {
    let p = HydraulicParams::default();
    let cfg = small();
    let agent = SacAgent::new(&cfg, norm(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    let mut trainer = OnlineTrainer::new(agent, &cfg);
    let mut env = build_env("plant", p, UncertaintyConfig::default(), 1e-3, None).unwrap();
    let c1 = trainer.train(env.as_mut(), &cfg, p, ControllerConfig::default(), None, true, 1e-3, 2).unwrap();
    let after_first = trainer.buffer.len();
    assert_eq!(after_first, 60);
    assert_eq!(c1.updates, 60 - 19);

    // second phase: no warmup wait, every step updates
    let c2 = trainer.train(env.as_mut(), &cfg, p, ControllerConfig::default(), None, false, 1e-3, 3).unwrap();
    assert_eq!(trainer.buffer.len(), 120);
    assert_eq!(c2.updates, 60);
}

#[test]
fn zero_episodes_leave_the_agent_untouched() {
    let p = HydraulicParams::default();
    let cfg = SacConfig { episodes: 0, ..small() };
    let agent = SacAgent::new(&cfg, norm(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let mut env = build_env("plant", p, UncertaintyConfig::default(), 1e-3, None).unwrap();
    let (out, curve) = train_online(env.as_mut(), &cfg, p, ControllerConfig::default(), None, agent.clone(), true, 1e-3, 5).unwrap();
    assert_eq!(out.to_bundle().to_text(), agent.to_bundle().to_text());
    assert!(curve.returns.is_empty() && curve.updates == 0);
}
