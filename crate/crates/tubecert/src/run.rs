//! Initial data collection and the certified training loop.

use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use tubecert_core::certifier::{
    certify, fallback_action, soft_certify, CertificationMode, CertificationResult, Constraints,
    FeedbackPolicySequence, WarmStart,
};
use tubecert_core::data::{ReplayRing, Transition, TransitionDataset};
use tubecert_core::dynamics::{make_prior, Ensemble};
use tubecert_core::envs::{backup_policy, Controller, EnvSpec, Environment, DEFAULT_DISTURBANCE};
use tubecert_core::learner::{generate_model_rollouts, ActorCritic, UpdateMetrics};
use tubecert_core::safe_set::{estimate_safe_set, SafeSetEstimate, TerminalSetSelector};
use tubecert_core::tube::{captures, TubeBundle};
use tubecert_core::ellipsoid::Polytope;
use tubecert_core::Vector;

use crate::config::{ConfigError, RunConfig};
use crate::metrics::{
    EpochRecord, MetricsWriter, RunMetrics, StepRecord, CONFIG_FILE, CRASH_FILE, SUMMARY_FILE,
};

pub const ENSEMBLE_FILE: &str = "ensemble.json";
pub const POLICY_FILE: &str = "policy.json";

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Core(#[from] tubecert_core::Error),
    #[error("backup controller violated the constraints at collection step {step} (state {state:?})")]
    CollectionViolation { step: usize, state: Vec<f64> },
    #[error("run aborted at epoch {epoch}, step {t}: {reason}")]
    Aborted { epoch: usize, t: usize, reason: String },
}

/// Environment with the configured disturbance level.
pub fn env_spec(cfg: &RunConfig) -> EnvSpec {
    EnvSpec::new(cfg.env).with_disturbance_scale(DEFAULT_DISTURBANCE * cfg.disturbance_scale)
}

/// Runs `backup` for exactly `steps` transitions, resetting at episode end.
/// Any violation aborts the collection.
pub fn collect_initial(
    spec: &EnvSpec,
    backup: &mut dyn Controller,
    steps: usize,
    seed: u64,
) -> Result<TransitionDataset, RunError> {
    let mut env = Environment::new(spec.clone(), seed);
    let mut data = TransitionDataset::new(spec.n_x, spec.n_u);
    let mut x = env.reset();
    let mut episode = 0;
    for step in 0..steps {
        let u = spec.clip_action(&backup.act(&x));
        let out = env.step(&u)?;
        if out.violated {
            return Err(RunError::CollectionViolation {
                step,
                state: out.next_state.as_slice().to_vec(),
            });
        }
        let mut t = Transition::new(&x, &u, &out.next_state, out.reward);
        t.t = env.steps() - 1;
        t.episode = episode;
        data.push(t)?;
        if out.truncated {
            x = env.reset();
            episode += 1;
        } else {
            x = out.next_state;
        }
    }
    Ok(data)
}

/// Epoch-0 estimate: the hull of every feasible state collected by the
/// backup controller, which includes each episode's initial state.
pub fn initial_safe_set(spec: &EnvSpec, d0: &TransitionDataset) -> Result<SafeSetEstimate, RunError> {
    Ok(estimate_safe_set(d0, 0, spec.safe_set_coords, &spec.state_polytope)?)
}

/// Mean episode return of the backup controller.
pub fn backup_return(spec: &EnvSpec, seed: u64, episodes: usize) -> Result<f64, RunError> {
    let mut env = Environment::new(spec.clone(), seed);
    let mut backup = backup_policy(spec, seed);
    let mut total = 0.0;
    for _ in 0..episodes.max(1) {
        let mut x = env.reset();
        loop {
            let out = env.step(&backup.act(&x))?;
            total += out.reward;
            if out.terminated || out.truncated {
                break;
            }
            x = out.next_state;
        }
    }
    Ok(total / episodes.max(1) as f64)
}

/// Linear ramp of the exploration scale from 1 to 0 over the final
/// `fraction` of epochs.
pub fn exploration_scale(epoch: usize, epochs: usize, fraction: f64) -> f64 {
    let span = fraction * epochs as f64;
    if span <= 0.0 {
        return 1.0;
    }
    let start = epochs as f64 - span;
    if (epoch as f64) <= start {
        1.0
    } else {
        ((epochs as f64 - epoch as f64) / span).clamp(0.0, 1.0)
    }
}

struct Audit {
    bundle: TubeBundle,
    trajectory: Vec<Vector>,
}

#[derive(Default)]
struct CaptureTally {
    captured: usize,
    total: usize,
}

impl CaptureTally {
    fn finish(&mut self, audit: &Audit, coords: (usize, usize)) -> Result<(), RunError> {
        if audit.trajectory.len() < 2 {
            return Ok(());
        }
        let report = captures(&audit.bundle, &audit.trajectory, coords)?;
        for s in &report.steps[1..] {
            self.total += 1;
            self.captured += usize::from(s.captured());
        }
        Ok(())
    }

    fn rate(&self) -> f64 {
        if self.total == 0 {
            f64::NAN
        } else {
            self.captured as f64 / self.total as f64
        }
    }
}

#[derive(Serialize)]
struct CrashReport<'a> {
    config_hash: &'a str,
    epoch: usize,
    t: usize,
    error: String,
    state: Vec<f64>,
}

#[derive(Serialize)]
struct Summary<'a> {
    config_hash: &'a str,
    epochs: usize,
    total_violations: usize,
    final_return: Option<f64>,
    infeasibility_rate: f64,
}

/// Per-episode certification state.
struct Episode {
    plan: Option<FeedbackPolicySequence>,
    warm: Option<WarmStart>,
    infeasible_streak: usize,
    audits: Vec<Audit>,
}

impl Episode {
    fn new() -> Self {
        Self {
            plan: None,
            warm: None,
            infeasible_streak: 0,
            audits: Vec::new(),
        }
    }
}

struct Decision {
    action: Vector,
    mode: CertificationMode,
    feasible: bool,
    objective: f64,
    iterations: usize,
    certified: bool,
}

struct Certifier<'a> {
    cfg: &'a RunConfig,
    spec: &'a EnvSpec,
    certifier: tubecert_core::certifier::CertifierConfig,
    backup: Box<dyn Controller>,
}

impl Certifier<'_> {
    fn decide(
        &mut self,
        ensemble: &Ensemble,
        terminal: &Polytope,
        ep: &mut Episode,
        x: &Vector,
        u: &Vector,
    ) -> Result<Decision, tubecert_core::Error> {
        if !self.cfg.certify {
            return Ok(Decision {
                action: u.clone(),
                mode: CertificationMode::Uncertified,
                feasible: false,
                objective: 0.0,
                iterations: 0,
                certified: false,
            });
        }
        let cons = Constraints {
            state: &self.spec.state_polytope,
            action: &self.spec.action_polytope,
            terminal,
        };
        let members = ensemble.members();
        let res: CertificationResult = certify(members, x, u, &cons, &self.certifier, ep.warm.as_ref())?;
        ep.warm = Some(res.warm_start.shifted());
        let (objective, iterations) = (res.diagnostics.objective, res.diagnostics.iterations);
        if res.feasible {
            ep.infeasible_streak = 0;
            if let Some(bundle) = res.bundle.clone() {
                ep.audits.push(Audit {
                    bundle,
                    trajectory: vec![x.clone()],
                });
            }
            let plan = res.policy.expect("feasible results carry a plan");
            let (action, _) = plan.evaluate(0, x);
            ep.plan = Some(plan);
            return Ok(Decision {
                action,
                mode: CertificationMode::Hard,
                feasible: true,
                objective,
                iterations,
                certified: true,
            });
        }
        ep.infeasible_streak += 1;
        if ep.infeasible_streak >= self.certifier.infeasible_threshold {
            let soft = soft_certify(members, x, u, &cons, &self.certifier, ep.warm.as_ref())?;
            return Ok(Decision {
                action: soft.action,
                mode: CertificationMode::Soft,
                feasible: false,
                objective: soft.diagnostics.objective,
                iterations,
                certified: true,
            });
        }
        let (action, mode) = match ep.plan.take() {
            Some(prev) => {
                let (action, next) = fallback_action(&prev, x);
                ep.plan = Some(next);
                (action, CertificationMode::Fallback)
            }
            None => (self.spec.clip_action(&self.backup.act(x)), CertificationMode::Backup),
        };
        Ok(Decision {
            action,
            mode,
            feasible: false,
            objective,
            iterations,
            certified: true,
        })
    }
}

fn write_crash(dir: &Path, hash: &str, epoch: usize, t: usize, err: &dyn std::fmt::Display, x: &Vector) {
    let report = CrashReport {
        config_hash: hash,
        epoch,
        t,
        error: err.to_string(),
        state: x.as_slice().to_vec(),
    };
    if let Ok(text) = serde_json::to_string_pretty(&report) {
        let _ = std::fs::write(dir.join(CRASH_FILE), text);
    }
}

/// Full training run; artefacts go to `cfg.out_dir`.
pub fn run_training(cfg: &RunConfig) -> Result<RunMetrics, RunError> {
    cfg.validate()?;
    let hash = cfg.hash();
    let mut writer = MetricsWriter::create(&cfg.out_dir)?;
    writer.text(CONFIG_FILE, &format!("# config_hash = {hash}\n{}", cfg.to_toml_string()))?;

    let spec = env_spec(cfg);
    let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
    let collect_seed: u64 = seeds.random();
    let env_seed: u64 = seeds.random();
    let model_seed: u64 = seeds.random();
    let learner_seed: u64 = seeds.random();

    let mut backup = backup_policy(&spec, collect_seed);
    let d0 = collect_initial(&spec, backup.as_mut(), cfg.initial_steps, collect_seed)?;
    let mut data = d0.clone();

    let prior = cfg.use_prior.then(|| make_prior(cfg.env, cfg.prior_offset));
    let mut ensemble = Ensemble::new(cfg.ensemble_size, spec.n_x, spec.n_u, &cfg.model_hidden, prior, model_seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(learner_seed);
    let mut learner = ActorCritic::new(spec.n_x, spec.action_low.clone(), spec.action_high.clone(), cfg.learner(), &mut rng)?;
    learner.pretrain(&d0, cfg.pretrain_epochs, &mut rng)?;

    let coords = spec.safe_set_coords;
    let initial = initial_safe_set(&spec, &d0)?;
    let mut selector = TerminalSetSelector::new(initial, cfg.delay);
    writer.safe_sets(&selector.to_json()?)?;

    let capacity = cfg.model_rollouts * cfg.model_horizon * cfg.rollout_batches() * cfg.rollout_retain;
    let mut ring = ReplayRing::new(spec.n_x, spec.n_u, capacity.max(1));
    let reward_spec = spec.clone();
    let reward = move |x: &Vector, u: &Vector| reward_spec.reward(x, u);

    let mut cert = Certifier {
        cfg,
        certifier: cfg.certifier(spec.n_x, spec.n_u),
        spec: &spec,
        backup: backup_policy(&spec, env_seed ^ 0x5eed),
    };
    let mut env = Environment::new(spec.clone(), env_seed);
    let mut metrics = RunMetrics {
        config_hash: hash.clone(),
        ..RunMetrics::default()
    };
    let mut cumulative = 0;
    let mut episode_id = 0;
    let mut global_step = 0usize;
    let mut certify_calls = 0usize;
    let mut infeasible_calls = 0usize;

    for epoch in 1..=cfg.epochs {
        let histories = ensemble.train(&data.to_batch()?, &cfg.model_training(model_seed.wrapping_add(epoch as u64)))?;
        let holdout_nll = histories
            .iter()
            .map(|h| h.holdout.last().copied().unwrap_or(h.initial_holdout))
            .sum::<f64>()
            / histories.len() as f64;
        generate_model_rollouts(
            ensemble.members(),
            &learner.policy,
            &data,
            cfg.model_horizon,
            cfg.model_rollouts,
            &reward,
            &mut ring,
            &mut rng,
        )?;
        learner
            .policy
            .set_exploration(exploration_scale(epoch, cfg.epochs, cfg.anneal_fraction));

        selector.push(estimate_safe_set(&data, epoch, coords, &spec.state_polytope)?);
        writer.safe_sets(&selector.to_json()?)?;
        let terminal = selector.select(epoch).polytope.clone();
        let area = selector.history().last().map_or(0.0, |s| s.area());

        let mut x = env.reset();
        let mut ep = Episode::new();
        let mut ep_return = 0.0;
        let mut last_return = f64::NAN;
        let mut episodes = 0;
        let mut violations = 0;
        let (mut epoch_calls, mut epoch_infeasible) = (0usize, 0usize);
        let (mut fallback_steps, mut soft_steps) = (0, 0);
        let mut tally = CaptureTally::default();
        let mut last_update = UpdateMetrics {
            critic_loss: f64::NAN,
            actor_loss: f64::NAN,
            entropy: f64::NAN,
            updates: 0,
        };

        for step_in_epoch in 0..cfg.steps_per_epoch {
            if cfg.rollout_every > 0 && step_in_epoch > 0 && step_in_epoch % cfg.rollout_every == 0 {
                generate_model_rollouts(
                    ensemble.members(),
                    &learner.policy,
                    &data,
                    cfg.model_horizon,
                    cfg.model_rollouts,
                    &reward,
                    &mut ring,
                    &mut rng,
                )?;
            }
            let t = env.steps();
            let u = learner.policy.sample_action(&x, false, &mut rng);
            let start = Instant::now();
            let decision = match cert.decide(&ensemble, &terminal, &mut ep, &x, &u) {
                Ok(d) => d,
                Err(e) => {
                    write_crash(&cfg.out_dir, &hash, epoch, t, &e, &x);
                    writer.flush()?;
                    return Err(RunError::Aborted {
                        epoch,
                        t,
                        reason: e.to_string(),
                    });
                }
            };
            let solve_ms = start.elapsed().as_secs_f64() * 1e3;
            if decision.certified {
                epoch_calls += 1;
                epoch_infeasible += usize::from(!decision.feasible);
            }
            match decision.mode {
                CertificationMode::Fallback => fallback_steps += 1,
                CertificationMode::Soft => soft_steps += 1,
                _ => {}
            }
            let action = spec.clip_action(&decision.action);
            let out = env.step(&action)?;
            ep_return += out.reward;
            for a in &mut ep.audits {
                a.trajectory.push(out.next_state.clone());
            }
            let horizon = cfg.horizon;
            let (done, pending): (Vec<Audit>, Vec<Audit>) =
                ep.audits.drain(..).partition(|a| a.trajectory.len() == horizon + 1);
            ep.audits = pending;
            for a in &done {
                tally.finish(a, coords)?;
            }

            let mut rec = Transition::new(&x, &action, &out.next_state, out.reward);
            rec.feasible = decision.feasible;
            rec.done = out.violated;
            rec.t = t;
            rec.episode = episode_id;
            data.push(rec)?;

            let step = StepRecord {
                epoch,
                episode: episode_id,
                t,
                reward: out.reward,
                violated: out.violated,
                feasible: decision.feasible,
                mode: decision.mode,
                solve_ms,
                objective: decision.objective,
                iterations: decision.iterations,
            };
            writer.step(&step)?;
            metrics.steps.push(step);

            if out.violated {
                violations += 1;
                cumulative += 1;
            }
            global_step += 1;
            if global_step % cfg.update_every == 0 {
                last_update = learner.update(&data, &ring, cfg.policy_updates, &mut rng)?;
            }

            if out.terminated || out.truncated {
                for a in &ep.audits {
                    tally.finish(a, coords)?;
                }
                last_return = ep_return;
                episodes += 1;
                episode_id += 1;
                ep_return = 0.0;
                ep = Episode::new();
                x = env.reset();
            } else {
                x = out.next_state;
            }
        }
        if env.steps() > 0 {
            for a in &ep.audits {
                tally.finish(a, coords)?;
            }
            last_return = ep_return;
            episodes += 1;
            episode_id += 1;
        }
        certify_calls += epoch_calls;
        infeasible_calls += epoch_infeasible;
        let rec = EpochRecord {
            epoch,
            episode_return: last_return,
            episodes,
            violations,
            cumulative_violations: cumulative,
            infeasibility_rate: if epoch_calls == 0 {
                0.0
            } else {
                epoch_infeasible as f64 / epoch_calls as f64
            },
            safe_set_area: area,
            capture_rate: tally.rate(),
            fallback_steps,
            soft_steps,
            model_holdout_nll: holdout_nll,
            critic_loss: last_update.critic_loss,
            actor_loss: last_update.actor_loss,
        };
        writer.epoch(&rec)?;
        metrics.epochs.push(rec);
    }

    ensemble.save(&cfg.out_dir.join(ENSEMBLE_FILE))?;
    learner.save(&cfg.out_dir.join(POLICY_FILE))?;
    let summary = Summary {
        config_hash: &hash,
        epochs: cfg.epochs,
        total_violations: metrics.total_violations(),
        final_return: metrics.final_return(),
        infeasibility_rate: if certify_calls == 0 {
            0.0
        } else {
            infeasible_calls as f64 / certify_calls as f64
        },
    };
    writer.text(SUMMARY_FILE, &serde_json::to_string_pretty(&summary).expect("summary serialises"))?;
    writer.flush()?;
    Ok(metrics)
}
