//! Per-step and per-epoch records and their incremental CSV/JSON persistence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tubecert_core::certifier::CertificationMode;

pub const STEPS_FILE: &str = "steps.csv";
pub const EPOCHS_FILE: &str = "epochs.csv";
pub const SAFE_SETS_FILE: &str = "safe_sets.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CRASH_FILE: &str = "crash.json";

pub const STEP_COLUMNS: &str = "epoch,episode,t,reward,violated,feasible,mode,solve_ms,objective,iterations";
pub const EPOCH_COLUMNS: &str = "epoch,episode_return,episodes,violations,cumulative_violations,infeasibility_rate,\
safe_set_area,capture_rate,fallback_steps,soft_steps,model_holdout_nll,critic_loss,actor_loss";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub episode: usize,
    pub t: usize,
    pub reward: f64,
    pub violated: bool,
    pub feasible: bool,
    pub mode: CertificationMode,
    pub solve_ms: f64,
    /// `‖u_t − v_0‖²` of the certify call (0 when certification is off).
    pub objective: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Return of the last episode that finished in this epoch.
    pub episode_return: f64,
    pub episodes: usize,
    pub violations: usize,
    pub cumulative_violations: usize,
    /// Share of certify calls that were infeasible.
    pub infeasibility_rate: f64,
    pub safe_set_area: f64,
    /// Share of audited planned steps whose realised state was captured;
    /// NaN when nothing was audited.
    pub capture_rate: f64,
    pub fallback_steps: usize,
    pub soft_steps: usize,
    pub model_holdout_nll: f64,
    pub critic_loss: f64,
    pub actor_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RunMetrics {
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn total_violations(&self) -> usize {
        self.epochs.last().map_or(0, |e| e.cumulative_violations)
    }

    pub fn final_return(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.episode_return)
    }
}

fn bool01(b: bool) -> u8 {
    u8::from(b)
}

/// Single writer for all run artefacts. Rows are flushed at every epoch end.
pub struct MetricsWriter {
    dir: PathBuf,
    steps: BufWriter<File>,
    epochs: BufWriter<File>,
}

impl MetricsWriter {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let mut steps = BufWriter::new(File::create(dir.join(STEPS_FILE))?);
        writeln!(steps, "{STEP_COLUMNS}")?;
        let mut epochs = BufWriter::new(File::create(dir.join(EPOCHS_FILE))?);
        writeln!(epochs, "{EPOCH_COLUMNS}")?;
        Ok(Self {
            dir: dir.to_path_buf(),
            steps,
            epochs,
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn step(&mut self, r: &StepRecord) -> std::io::Result<()> {
        writeln!(
            self.steps,
            "{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.episode,
            r.t,
            r.reward,
            bool01(r.violated),
            bool01(r.feasible),
            r.mode.as_str(),
            r.solve_ms,
            r.objective,
            r.iterations
        )
    }

    pub fn epoch(&mut self, r: &EpochRecord) -> std::io::Result<()> {
        writeln!(
            self.epochs,
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.episode_return,
            r.episodes,
            r.violations,
            r.cumulative_violations,
            r.infeasibility_rate,
            r.safe_set_area,
            r.capture_rate,
            r.fallback_steps,
            r.soft_steps,
            r.model_holdout_nll,
            r.critic_loss,
            r.actor_loss
        )?;
        self.flush()
    }

    pub fn flush(&mut self) -> std::io::Result<()> {
        self.steps.flush()?;
        self.epochs.flush()
    }

    /// Rewrites the whole history so the file is valid after every epoch.
    pub fn safe_sets(&self, json: &str) -> std::io::Result<()> {
        write_atomic(&self.dir.join(SAFE_SETS_FILE), json.as_bytes())
    }

    pub fn text(&self, name: &str, contents: &str) -> std::io::Result<()> {
        write_atomic(&self.dir.join(name), contents.as_bytes())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn writes_headers_and_rows() {
        let dir = std::env::temp_dir().join(format!("tubecert-metrics-{}", std::process::id()));
        let mut w = MetricsWriter::create(&dir).unwrap();
        w.step(&StepRecord {
            epoch: 1,
            episode: 0,
            t: 3,
            reward: -0.5,
            violated: false,
            feasible: true,
            mode: CertificationMode::Hard,
            solve_ms: 1.25,
            objective: 0.0,
            iterations: 1,
        })
        .unwrap();
        w.flush().unwrap();
        w.safe_sets("[]").unwrap();
        let steps = std::fs::read_to_string(dir.join(STEPS_FILE)).unwrap();
        let mut lines = steps.lines();
        assert_eq!(lines.next().unwrap(), STEP_COLUMNS);
        assert_eq!(lines.next().unwrap(), "1,0,3,-0.5,0,1,hard,1.25,0,1");
        let epochs = std::fs::read_to_string(dir.join(EPOCHS_FILE)).unwrap();
        assert_eq!(epochs.lines().next().unwrap().split(',').count(), 13);
        assert_eq!(std::fs::read_to_string(dir.join(SAFE_SETS_FILE)).unwrap(), "[]");
        std::fs::remove_dir_all(dir).unwrap();
    }
}
