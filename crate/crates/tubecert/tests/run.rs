use tubecert::{run_training, RunConfig};
use tubecert_core::envs::EnvKind;

fn small(seed: u64, dir: &str) -> RunConfig {
    let mut c = RunConfig::for_env(EnvKind::Pendulum);
    c.seed = seed;
    c.epochs = 2;
    c.steps_per_epoch = 60;
    c.initial_steps = 1000;
    c.ensemble_size = 2;
    c.model_epochs = 2;
    c.policy_updates = 2;
    c.model_rollouts = 20;
    c.pretrain_epochs = 1;
    c.out_dir = std::env::temp_dir().join(format!("tubecert-run-{}-{dir}", std::process::id()));
    c
}

#[test]
fn identical_seeds_reproduce_the_run() {
    let a = run_training(&small(7, "a")).unwrap();
    let b = run_training(&small(7, "b")).unwrap();
    assert_eq!(a.config_hash, b.config_hash);
    assert_eq!(a.epochs.len(), 2);
    for (x, y) in a.steps.iter().zip(&b.steps) {
        assert_eq!((x.reward, x.mode, x.feasible), (y.reward, y.mode, y.feasible));
    }
    assert_eq!(
        a.epochs.iter().map(|e| e.episode_return).collect::<Vec<_>>(),
        b.epochs.iter().map(|e| e.episode_return).collect::<Vec<_>>()
    );
}

#[test]
fn certified_short_run_is_safe() {
    let m = run_training(&small(11, "safe")).unwrap();
    assert_eq!(m.total_violations(), 0);
    assert_eq!(m.steps.len(), 120);
    assert!(m.epochs.windows(2).all(|w| w[1].safe_set_area >= w[0].safe_set_area - 1e-12));
}
