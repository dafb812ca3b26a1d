use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{load_checkpoint, save_checkpoint};
use super::state::{check_dataset, StepStats, TrainConfig, TrainState};
use crate::error::Result;
use crate::model::ModelConfig;
use crate::teacher::PairDataset;
use crate::tensor::Scalar;

pub const METRICS_HEADER: &str = "iteration,loss,grad_norm,wallclock_seconds";

/// Append-only CSV of training metrics.
pub struct MetricsLog {
    out: BufWriter<File>,
    start: Instant,
}

impl MetricsLog {
    /// Opens `path` for appending, writing the header if the file is new.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = fs::metadata(path).map_or(true, |m| m.len() == 0);
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let mut out = BufWriter::new(file);
        if fresh {
            writeln!(out, "{METRICS_HEADER}")?;
        }
        Ok(MetricsLog {
            out,
            start: Instant::now(),
        })
    }

    pub fn record(&mut self, s: &StepStats) -> Result<()> {
        let secs = self.start.elapsed().as_secs_f64();
        writeln!(
            self.out,
            "{},{:.8e},{:.8e},{secs:.3}",
            s.iteration, s.loss, s.grad_norm
        )?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}

/// Runs optimizer steps until `state.iteration == until`, calling `observe`
/// after each one.
pub fn run_steps<T: Scalar>(
    state: &mut TrainState<T>,
    data: &PairDataset,
    cfg: &TrainConfig,
    until: u64,
    mut observe: impl FnMut(&TrainState<T>, &StepStats) -> Result<()>,
) -> Result<()> {
    check_dataset(data, state.config())?;
    cfg.validate()?;
    while state.iteration < until {
        let stats = state.step(data, cfg)?;
        observe(state, &stats)?;
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:08}.getc"))
}

/// Trains on the pairs file at `dataset` for `cfg.iterations` steps, writing
/// `metrics.csv`, periodic checkpoints and `final.getc` into `dir`. With
/// `resume`, training continues from that checkpoint.
pub fn train<T: Scalar>(
    dataset: &Path,
    config: &ModelConfig,
    cfg: &TrainConfig,
    dir: &Path,
    resume: Option<&Path>,
) -> Result<PathBuf> {
    cfg.validate()?;
    let data = PairDataset::load(dataset)?;
    check_dataset(&data, config)?;
    let mut state = match resume {
        Some(p) => load_checkpoint::<T>(p, config)?,
        None => TrainState::new(config.clone(), cfg, data.len())?,
    };
    if state.sampler.len() != data.len() {
        return Err(crate::Error::Config(format!(
            "checkpoint was trained on {} records, dataset has {}",
            state.sampler.len(),
            data.len()
        )));
    }
    fs::create_dir_all(dir)?;
    let mut log = MetricsLog::open(&dir.join("metrics.csv"))?;
    run_steps(&mut state, &data, cfg, cfg.iterations, |s, stats| {
        if stats.iteration % cfg.log_every == 0 || stats.iteration == cfg.iterations {
            log.record(stats)?;
        }
        if cfg.checkpoint_every > 0 && stats.iteration % cfg.checkpoint_every == 0 {
            log.flush()?;
            save_checkpoint(s, &checkpoint_path(dir, stats.iteration))?;
        }
        Ok(())
    })?;
    log.flush()?;
    let last = dir.join("final.getc");
    save_checkpoint(&state, &last)?;
    Ok(last)
}
