use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use super::config::RunConfig;
use crate::distill::{load_checkpoint, train};
use crate::error::{Error, Result};
use crate::eval::{
    class_accuracy, class_accuracy_with, generate_batched, nfe_report, sliced_wasserstein,
    throughput, throughput_with, write_grid, EvalReport, EVAL_BATCH,
};
use crate::model::{count_flops, count_params};
use crate::teacher::{
    generate_pairs, heun_sample, nfe_count, read_pairs_header, MixtureSpec, NoiseSchedule,
    PairDataset,
};
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

/// Distill a diffusion teacher into a one-step equilibrium transformer.
#[derive(Debug, Parser)]
#[command(name = "eqdistill", version)]
pub struct Cli {
    /// Run configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for data generation, initialization and sampling noise.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate teacher noise/image pairs.
    GenData {
        #[arg(long, default_value_t = 1000)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a student on the configured dataset.
    Train {
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Checkpoint directory; defaults to `paths.checkpoints`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an image grid and raw samples from a checkpoint.
    Sample {
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 64)]
        n: usize,
        /// Equilibrium iterations at inference.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        label: Option<usize>,
        /// Output prefix; `.pgm`/`.ppm` and `.f32` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint (or `teacher`) on held-out pairs.
    Eval {
        checkpoint: String,
        heldout: Option<PathBuf>,
        /// Equilibrium iterations at inference.
        #[arg(long)]
        k: Option<usize>,
        /// CSV report path; defaults to `paths.reports/eval.csv`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Process exit code for an error: 2 usage/config, 3 I/O, 4 numerics.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Dimension(_) | Error::Domain(_) => 2,
        Error::Io(_) | Error::Format(_) => 3,
        Error::Divergence { .. }
        | Error::Training(_)
        | Error::NonFinite(_)
        | Error::AdjointNotConverged { .. } => 4,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the exit code. Normal output goes to `out`, diagnostics to `err`.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return 2;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    let res = match cli.precision {
        Precision::F32 => execute::<f32>(&cli, out, err),
        Precision::F64 => execute::<f64>(&cli, out, err),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    match &cli.config {
        Some(p) => RunConfig::load(p),
        None => RunConfig::parse("", Path::new(".")),
    }
}

fn sha256_file(path: &Path) -> Result<String> {
    let mut r = BufReader::new(File::open(path)?);
    let mut h = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf)?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(format!("{:x}", h.finalize()))
}

fn execute<T: Scalar>(cli: &Cli, out: &mut dyn Write, err: &mut dyn Write) -> Result<()> {
    let mut cfg = load_config(cli)?;
    if let (Command::Train { .. }, Some(s)) = (&cli.command, cli.seed) {
        cfg.training.data_seed = s;
        cfg.training.init_seed = s;
    }
    writeln!(err, "# resolved configuration\n{}", cfg.resolved())?;
    match &cli.command {
        Command::GenData { count, out: path } => {
            gen_data(&cfg, *count, cli.seed.unwrap_or(0), path, out)
        }
        Command::Train { resume, out: dir } => {
            train_cmd::<T>(&cfg, resume.as_deref(), dir.as_deref(), out)
        }
        Command::Sample {
            checkpoint,
            n,
            k,
            label,
            out: prefix,
        } => {
            let seed = cli.seed.unwrap_or(cfg.eval.seed);
            sample::<T>(
                &cfg,
                checkpoint,
                *n,
                *k,
                *label,
                seed,
                prefix.as_deref(),
                out,
            )
        }
        Command::Eval {
            checkpoint,
            heldout,
            k,
            out: csv,
        } => {
            let seed = cli.seed.unwrap_or(cfg.eval.seed);
            eval_cmd::<T>(
                &cfg,
                checkpoint,
                heldout.as_deref(),
                *k,
                seed,
                csv.as_deref(),
                out,
            )
        }
    }
}

fn gen_data(
    cfg: &RunConfig,
    count: usize,
    seed: u64,
    path: &Path,
    out: &mut dyn Write,
) -> Result<()> {
    let spec = cfg.teacher.spec()?;
    if spec.dims != cfg.model.image() {
        return Err(Error::Config(format!(
            "teacher images are {:?} but the model expects {:?}",
            spec.dims.shape(),
            cfg.model.image().shape()
        )));
    }
    let conditional = cfg.model.is_conditional();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    generate_pairs(&spec, &cfg.teacher.schedule, count, seed, conditional, path)?;
    let per = nfe_count(cfg.teacher.schedule.n_steps) as u64;
    writeln!(out, "records: {count}")?;
    writeln!(out, "conditional: {conditional}")?;
    writeln!(
        out,
        "teacher NFE: {} ({per} per record)",
        count as u64 * per
    )?;
    writeln!(out, "sha256: {}", sha256_file(path)?)?;
    Ok(())
}

fn train_cmd<T: Scalar>(
    cfg: &RunConfig,
    resume: Option<&Path>,
    dir: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let dataset = cfg
        .paths
        .dataset
        .clone()
        .ok_or_else(|| Error::Config("[paths] dataset is not set".into()))?;
    let dir = dir.map_or_else(|| cfg.paths.checkpoints.clone(), Path::to_path_buf);
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.ini"), cfg.resolved())?;
    let last = train::<T>(&dataset, &cfg.model, &cfg.training, &dir, resume)?;
    let csv = fs::read_to_string(dir.join("metrics.csv"))?;
    if let Some(row) = csv.lines().last() {
        writeln!(out, "last metrics: {row}")?;
    }
    writeln!(out, "checkpoint: {}", last.display())?;
    Ok(())
}

fn unit_noise(n: usize, d: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect()
}

fn labels_for(
    model: &crate::model::ModelConfig,
    n: usize,
    label: Option<usize>,
) -> Result<Option<Vec<usize>>> {
    match (model.is_conditional(), label) {
        (false, None) => Ok(None),
        (false, Some(_)) => Err(Error::Contract(
            "--label given for an unconditional model".into(),
        )),
        (true, Some(y)) if y >= model.n_classes() => Err(Error::Contract(format!(
            "label {y} outside {} classes",
            model.n_classes()
        ))),
        (true, Some(y)) => Ok(Some(vec![y; n])),
        (true, None) => Ok(Some((0..n).map(|i| i % model.n_classes()).collect())),
    }
}

#[allow(clippy::too_many_arguments)]
fn sample<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &Path,
    n: usize,
    k: Option<usize>,
    label: Option<usize>,
    seed: u64,
    prefix: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    if n == 0 {
        return Err(Error::Contract("--n must be at least 1".into()));
    }
    let model = load_checkpoint::<T>(checkpoint, &cfg.model)?.ema_model();
    let k = k.unwrap_or_else(|| cfg.model.iterations());
    let dims = cfg.model.image();
    let labels = labels_for(&cfg.model, n, label)?;
    let noise = unit_noise(n, dims.numel(), seed);
    let images = generate_batched(&model, &noise, labels.as_deref(), k, EVAL_BATCH)?;
    let prefix = prefix.map_or_else(|| cfg.paths.reports.join("samples"), Path::to_path_buf);
    if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let ext = if dims.channels == 1 { "pgm" } else { "ppm" };
    let grid = prefix.with_extension(ext);
    let cols = (n as f64).sqrt().ceil() as usize;
    write_grid(&grid, &images, dims, cols)?;
    let raw = prefix.with_extension("f32");
    let mut w = BufWriter::new(File::create(&raw)?);
    for &v in &images {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    writeln!(
        out,
        "samples: {n} x {}x{}x{} at K = {k}",
        dims.height, dims.width, dims.channels
    )?;
    writeln!(
        out,
        "grid: {} sha256 {}",
        grid.display(),
        sha256_file(&grid)?
    )?;
    writeln!(out, "raw: {} sha256 {}", raw.display(), sha256_file(&raw)?)?;
    Ok(())
}

/// Runs the analytic teacher on unit noises; outputs are rounded to `f32`
/// exactly as stored in pairs files.
fn teacher_generate(
    spec: &MixtureSpec,
    schedule: &NoiseSchedule,
    noise: &[f32],
    labels: Option<&[usize]>,
) -> Result<Vec<f64>> {
    let d = spec.dim();
    let per_class: Option<Vec<MixtureSpec>> = match labels {
        Some(_) => Some(
            (0..spec.n_classes())
                .map(|c| spec.restrict_to_class(c))
                .collect::<Result<_>>()?,
        ),
        None => None,
    };
    let mut out = Vec::with_capacity(noise.len());
    for (i, e) in noise.chunks_exact(d).enumerate() {
        let e: Vec<f64> = e.iter().map(|&v| v as f64).collect();
        let s = match (&per_class, labels) {
            (Some(specs), Some(l)) => specs.get(l[i]).ok_or_else(|| {
                Error::Contract(format!("label {} outside the teacher's classes", l[i]))
            })?,
            _ => spec,
        };
        out.extend(
            heun_sample(&e, s, schedule)?
                .into_iter()
                .map(|v| v as f32 as f64),
        );
    }
    Ok(out)
}

fn eval_cmd<T: Scalar>(
    cfg: &RunConfig,
    checkpoint: &str,
    heldout: Option<&Path>,
    k: Option<usize>,
    seed: u64,
    csv: Option<&Path>,
    out: &mut dyn Write,
) -> Result<()> {
    let heldout = heldout
        .map(Path::to_path_buf)
        .or_else(|| cfg.paths.heldout.clone())
        .ok_or_else(|| {
            Error::Config("no held-out pairs given and [paths] heldout is not set".into())
        })?;
    let data = PairDataset::load(&heldout)?;
    if data.len() < 2 {
        return Err(Error::Contract(
            "held-out set needs at least two records".into(),
        ));
    }
    crate::distill::check_dataset(&data, &cfg.model)?;
    let k = k.unwrap_or_else(|| cfg.model.iterations());
    let spec = cfg.teacher.spec()?;
    let schedule = cfg.teacher.schedule;
    let dims = cfg.model.image();
    let d = dims.numel();
    let labels: Option<Vec<usize>> = data
        .labels
        .as_ref()
        .map(|l| l.iter().map(|&y| y as usize).collect());

    let is_teacher = checkpoint == "teacher";
    let student = if is_teacher {
        None
    } else {
        Some(load_checkpoint::<T>(Path::new(checkpoint), &cfg.model)?.ema_model())
    };
    let generate = |noise: &[f32], labels: Option<&[usize]>| -> Result<Vec<f64>> {
        match &student {
            Some(m) => generate_batched(m, noise, labels, k, EVAL_BATCH),
            None => teacher_generate(&spec, &schedule, noise, labels),
        }
    };

    let outputs = generate(&data.noises, labels.as_deref())?;
    let l1 = outputs
        .iter()
        .zip(&data.images)
        .map(|(a, &b)| (a - b as f64).abs())
        .sum::<f64>()
        / outputs.len() as f64;

    let half = data.len() / 2;
    let images: Vec<f64> = data.images.iter().map(|&v| v as f64).collect();
    let (a_out, b_img) = (&outputs[..half * d], &images[half * d..2 * half * d]);
    let p = cfg.eval.projections;
    let sw = sliced_wasserstein(a_out, b_img, d, p, seed)?;
    let floor = sliced_wasserstein(&images[..half * d], b_img, d, p, seed)?;

    let class_acc = if cfg.model.is_conditional() && cfg.eval.class_accuracy {
        Some(match &student {
            Some(m) => class_accuracy(m, &spec, cfg.eval.n_per_class, k, seed)?,
            None => class_accuracy_with(&spec, cfg.eval.n_per_class, seed, |noise, l| {
                teacher_generate(&spec, &schedule, noise, Some(l))
            })?,
        })
    } else {
        None
    };

    let samples_per_second = if !cfg.eval.throughput {
        0.0
    } else if let Some(m) = &student {
        throughput(m, k, cfg.eval.throughput_batch, cfg.eval.throughput_trials)?.samples_per_second
    } else {
        let b = cfg.eval.throughput_batch;
        let noise = unit_noise(b, d, seed);
        let l = labels_for(&cfg.model, b, None)?;
        throughput_with(b, cfg.eval.throughput_trials, || {
            generate(&noise, l.as_deref()).map(drop)
        })?
        .0
    };

    let count = match &cfg.paths.dataset {
        Some(p) if p.exists() => read_pairs_header(p)?.count,
        _ => data.len() as u64,
    };
    let (params, flops) = if is_teacher {
        (0, 0)
    } else {
        (count_params(&cfg.model), count_flops(&cfg.model, k))
    };
    let report = EvalReport {
        k,
        l1_fidelity: l1,
        sliced_wasserstein: sw,
        sliced_wasserstein_floor: floor,
        class_accuracy: class_acc,
        params,
        flops,
        nfe_table: nfe_report(count, schedule.n_steps, true),
        samples_per_second,
    };
    report.validate()?;
    write!(out, "{}", report.to_table())?;
    let csv = csv.map_or_else(|| cfg.paths.reports.join("eval.csv"), Path::to_path_buf);
    if let Some(dir) = csv.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(&csv, report.to_csv())?;
    writeln!(out, "report: {}", csv.display())?;
    Ok(())
}
