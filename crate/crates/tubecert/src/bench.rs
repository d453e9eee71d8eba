//! Cold-start solve timing over horizon, hidden width and ensemble size.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tubecert_core::certifier::{certify, CertifierConfig, Constraints};
use tubecert_core::data::TransitionDataset;
use tubecert_core::dynamics::{make_prior, Ensemble, TrainConfig};
use tubecert_core::envs::{backup_policy, EnvSpec};
use tubecert_core::safe_set::SafeSetEstimate;
use tubecert_core::Vector;

use crate::config::RunConfig;
use crate::run::{collect_initial, env_spec, RunError};

pub const BENCH_COLUMNS: &str = "sweep,value,horizon,ensemble_size,hidden_width,trials,median_ms,mean_ms,feasible_rate";
const BENCH_DATA_STEPS: usize = 2000;
const BENCH_MODEL_EPOCHS: usize = 5;
const BENCH_CANDIDATE_FACTOR: usize = 50;
const BENCH_ACTIVE_SHIFT: f64 = 1e-3;
/// Candidate states are the `1/BENCH_BOUNDARY_FRACTION` of the data closest to the terminal-set boundary.
const BENCH_BOUNDARY_FRACTION: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub sweep: String,
    pub value: usize,
    pub horizon: usize,
    pub ensemble_size: usize,
    pub hidden_width: usize,
    pub trials: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub feasible_rate: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Least-squares slope and coefficient of determination of `y` on `x`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    (slope, r2)
}

/// Slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    linear_fit(&lx, &ly).0
}

struct Instance {
    x: Vector,
    u: Vector,
}

/// Random (state, proposal) pairs from the states of `data` nearest the
/// terminal-set boundary, preferring proposals the certifier has to correct at
/// the base horizon so the solver does real work.
fn pick_instances(
    data: &TransitionDataset,
    spec: &EnvSpec,
    ensemble: &Ensemble,
    cons: &Constraints<'_>,
    cfg: &CertifierConfig,
    trials: usize,
    seed: u64,
) -> Result<Vec<Instance>, RunError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbe4c);
    let mut states: Vec<Vector> = (0..data.len()).map(|i| data.get(i).state()).collect();
    states.sort_by(|a, b| cons.terminal.max_residual(b).total_cmp(&cons.terminal.max_residual(a)));
    states.truncate((states.len() / BENCH_BOUNDARY_FRACTION).max(1));
    let (mut active, mut passive) = (Vec::new(), Vec::new());
    for _ in 0..trials * BENCH_CANDIDATE_FACTOR {
        if active.len() == trials {
            break;
        }
        let x = states[rng.random_range(0..states.len())].clone();
        let u = Vector::from_fn(spec.n_u, |i, _| rng.random_range(spec.action_low[i]..=spec.action_high[i]));
        let r = certify(ensemble.members(), &x, &u, cons, cfg, None)?;
        if (&r.action - &u).norm() > BENCH_ACTIVE_SHIFT {
            active.push(Instance { x, u });
        } else {
            passive.push(Instance { x, u });
        }
    }
    let missing = trials - active.len();
    active.extend(passive.into_iter().take(missing));
    Ok(active)
}

/// Times `trials` cold-start solves per configuration. Each configuration
/// varies one of horizon, hidden width or ensemble size from the values in
/// `cfg`; members are briefly trained on backup-controller data.
pub fn bench_complexity(
    cfg: &RunConfig,
    horizons: &[usize],
    widths: &[usize],
    ensemble_sizes: &[usize],
    trials: usize,
) -> Result<Vec<BenchRow>, RunError> {
    cfg.validate()?;
    let spec = env_spec(cfg);
    let mut backup = backup_policy(&spec, cfg.seed);
    let data = collect_initial(&spec, backup.as_mut(), BENCH_DATA_STEPS.max(cfg.model_batch_size * 2), cfg.seed)?;
    let batch = data.to_batch()?;
    let terminal = SafeSetEstimate::from_states(data.feasible_states(), 0, spec.safe_set_coords, &spec.state_polytope)?
        .polytope;
    let cons = Constraints {
        state: &spec.state_polytope,
        action: &spec.action_polytope,
        terminal: &terminal,
    };
    let base_width = cfg.model_hidden[0];
    let prior = cfg.use_prior.then(|| make_prior(cfg.env, cfg.prior_offset));
    let train_cfg = TrainConfig {
        epochs: BENCH_MODEL_EPOCHS,
        batch_size: cfg.model_batch_size,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let ensemble_for = |size: usize, width: usize| -> Result<Ensemble, RunError> {
        let hidden = vec![width; cfg.model_hidden.len()];
        let mut e = Ensemble::new(size, spec.n_x, spec.n_u, &hidden, prior, cfg.seed)?;
        e.train(&batch, &train_cfg)?;
        Ok(e)
    };
    let certifier = |horizon: usize| {
        let mut c = cfg.certifier(spec.n_x, spec.n_u);
        c.horizon = horizon;
        c.warm_start = false;
        c
    };
    let base = ensemble_for(cfg.ensemble_size, base_width)?;
    let instances = pick_instances(&data, &spec, &base, &cons, &certifier(cfg.horizon), trials.max(1), cfg.seed)?;
    let time = |ensemble: &Ensemble, horizon: usize| -> Result<(Vec<f64>, usize), RunError> {
        let c = certifier(horizon);
        let mut times = Vec::with_capacity(instances.len());
        let mut feasible = 0;
        for inst in &instances {
            let start = Instant::now();
            let r = certify(ensemble.members(), &inst.x, &inst.u, &cons, &c, None)?;
            times.push(start.elapsed().as_secs_f64() * 1e3);
            feasible += usize::from(r.feasible);
        }
        Ok((times, feasible))
    };
    let row = |sweep: &str, value: usize, horizon: usize, size: usize, width: usize, times: &[f64], feasible: usize| BenchRow {
        sweep: sweep.to_string(),
        value,
        horizon,
        ensemble_size: size,
        hidden_width: width,
        trials: times.len(),
        median_ms: median(times),
        mean_ms: times.iter().sum::<f64>() / times.len() as f64,
        feasible_rate: feasible as f64 / times.len() as f64,
    };

    let mut rows = Vec::new();
    if !horizons.is_empty() {
        for &n in horizons {
            let (t, f) = time(&base, n)?;
            rows.push(row("horizon", n, n, cfg.ensemble_size, base_width, &t, f));
        }
    }
    for &w in widths {
        let e = ensemble_for(cfg.ensemble_size, w)?;
        let (t, f) = time(&e, cfg.horizon)?;
        rows.push(row("width", w, cfg.horizon, cfg.ensemble_size, w, &t, f));
    }
    for &m in ensemble_sizes {
        let e = ensemble_for(m, base_width)?;
        let (t, f) = time(&e, cfg.horizon)?;
        rows.push(row("ensemble", m, cfg.horizon, m, base_width, &t, f));
    }
    Ok(rows)
}

pub fn write_bench_csv(rows: &[BenchRow], path: &Path) -> std::io::Result<()> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{BENCH_COLUMNS}")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            r.sweep, r.value, r.horizon, r.ensemble_size, r.hidden_width, r.trials, r.median_ms, r.mean_ms, r.feasible_rate
        )?;
    }
    f.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fits_on_exact_data() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [3.0, 5.0, 7.0, 9.0];
        let (s, r2) = linear_fit(&x, &y);
        assert!((s - 2.0).abs() < 1e-12 && (r2 - 1.0).abs() < 1e-12);
        let cubic: Vec<f64> = x.iter().map(|v: &f64| 0.7 * v.powi(3)).collect();
        assert!((loglog_slope(&x, &cubic) - 3.0).abs() < 1e-12);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
