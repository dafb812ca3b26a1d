use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{ImageDims, Model};
use crate::teacher::nfe_count;
use crate::tensor::{Scalar, Tensor};

/// Progressive distillation: 12 halvings of 50k iterations each plus a 100k
/// iteration first stage, two teacher calls per sample.
pub fn progressive_distillation_nfe(batch: u64) -> u64 {
    2 * batch * (12 * 50_000 + 100_000)
}

/// Consistency distillation: one teacher call per sample per iteration.
pub fn consistency_distillation_nfe(batch: u64, iterations: u64) -> u64 {
    batch * iterations
}

/// Teacher calls to build an offline dataset of `count` pairs with `n_steps`
/// sampler steps.
pub fn offline_nfe(count: u64, n_steps: usize) -> u64 {
    count * nfe_count(n_steps) as u64
}

/// Named teacher-evaluation totals.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NfeTable {
    pub rows: Vec<(String, u64)>,
}

impl NfeTable {
    pub fn get(&self, name: &str) -> Option<u64> {
        self.rows.iter().find(|(n, _)| n == name).map(|&(_, v)| v)
    }
}

/// Offline cost of `count` pairs at `n_steps`; with `compare`, the reference
/// costs of progressive (batch 128) and consistency (batch 512, 800k
/// iterations) distillation.
pub fn nfe_report(count: u64, n_steps: usize, compare: bool) -> NfeTable {
    let mut rows = vec![("offline".to_string(), offline_nfe(count, n_steps))];
    if compare {
        rows.push((
            "progressive_distillation".into(),
            progressive_distillation_nfe(128),
        ));
        rows.push((
            "consistency_distillation".into(),
            consistency_distillation_nfe(512, 800_000),
        ));
    }
    NfeTable { rows }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Throughput {
    pub k: usize,
    pub batch: usize,
    /// Median over trials.
    pub samples_per_second: f64,
    pub trials: Vec<f64>,
}

/// Median of `batch / seconds` over `trials` timed calls of `run`, after one
/// untimed warm-up call.
pub fn throughput_with(
    batch: usize,
    trials: usize,
    mut run: impl FnMut() -> Result<()>,
) -> Result<(f64, Vec<f64>)> {
    if trials < 3 {
        return Err(Error::Contract(format!(
            "need at least 3 trials, got {trials}"
        )));
    }
    if batch == 0 {
        return Err(Error::Contract("batch must be at least 1".into()));
    }
    run()?;
    let mut rates = Vec::with_capacity(trials);
    for _ in 0..trials {
        let t0 = Instant::now();
        run()?;
        rates.push(batch as f64 / t0.elapsed().as_secs_f64().max(1e-12));
    }
    let mut sorted = rates.clone();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    Ok((median, rates))
}

/// Median samples/second of one-step generation with `k` equilibrium steps.
pub fn throughput<T: Scalar>(
    model: &Model<T>,
    k: usize,
    batch: usize,
    trials: usize,
) -> Result<Throughput> {
    let dims = model.config.image();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let data = (0..batch * dims.numel())
        .map(|_| T::of(rng.sample(StandardNormal)))
        .collect();
    let noise = Tensor::new(&[batch, dims.height, dims.width, dims.channels], data)?;
    let labels: Option<Vec<usize>> = model
        .config
        .is_conditional()
        .then(|| (0..batch).map(|i| i % model.config.n_classes()).collect());
    let (median, trials) = throughput_with(batch, trials, || {
        model.generate(&noise, labels.as_deref(), k).map(drop)
    })?;
    Ok(Throughput {
        k,
        batch,
        samples_per_second: median,
        trials,
    })
}

/// Everything `eval` reports for one checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub l1_fidelity: f64,
    pub sliced_wasserstein: f64,
    /// Sliced Wasserstein between two disjoint teacher sample sets.
    pub sliced_wasserstein_floor: f64,
    pub class_accuracy: Option<f64>,
    pub params: u64,
    pub flops: u64,
    pub nfe_table: NfeTable,
    pub samples_per_second: f64,
}

impl EvalReport {
    pub fn validate(&self) -> Result<()> {
        let scalars = [
            self.l1_fidelity,
            self.sliced_wasserstein,
            self.sliced_wasserstein_floor,
            self.samples_per_second,
        ];
        if scalars.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("evaluation report".into()));
        }
        if let Some(a) = self.class_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Contract(format!(
                    "class accuracy {a} outside [0, 1]"
                )));
            }
        }
        Ok(())
    }

    fn rows(&self) -> Vec<(String, String)> {
        let mut rows = vec![
            ("k".to_string(), self.k.to_string()),
            ("l1_fidelity".into(), format!("{:.6}", self.l1_fidelity)),
            (
                "sliced_wasserstein".into(),
                format!("{:.6}", self.sliced_wasserstein),
            ),
            (
                "sliced_wasserstein_floor".into(),
                format!("{:.6}", self.sliced_wasserstein_floor),
            ),
        ];
        if let Some(a) = self.class_accuracy {
            rows.push(("class_accuracy".into(), format!("{a:.4}")));
        }
        rows.push(("params".into(), self.params.to_string()));
        rows.push(("flops".into(), self.flops.to_string()));
        for (name, v) in &self.nfe_table.rows {
            rows.push((format!("nfe_{name}"), v.to_string()));
        }
        rows.push((
            "samples_per_second".into(),
            format!("{:.1}", self.samples_per_second),
        ));
        rows
    }

    /// Aligned two-column text table.
    pub fn to_table(&self) -> String {
        let rows = self.rows();
        let w = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let mut s = String::new();
        for (k, v) in rows {
            let _ = writeln!(s, "{k:<w$}  {v}");
        }
        s
    }

    /// `metric,value` rows with a header.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in self.rows() {
            let _ = writeln!(s, "{k},{v}");
        }
        s
    }
}

/// Encodes images (flattened `H*W*C` rows) as one binary PGM (one channel)
/// or PPM (three channels) grid with `cols` tiles per row and a one pixel
/// gap. Values in `[-1, 1]` map linearly onto `[0, 255]`.
pub fn encode_grid(images: &[f64], dims: ImageDims, cols: usize) -> Result<Vec<u8>> {
    let d = dims.numel();
    let magic = match dims.channels {
        1 => "P5",
        3 => "P6",
        c => {
            return Err(Error::Contract(format!(
                "grids need 1 or 3 channels, got {c}"
            )))
        }
    };
    if d == 0 || images.is_empty() || images.len() % d != 0 || cols == 0 {
        return Err(Error::Dimension(format!(
            "{} values do not form images of {d}",
            images.len()
        )));
    }
    let n = images.len() / d;
    let cols = cols.min(n);
    let rows = n.div_ceil(cols);
    let (h, w, c) = (dims.height, dims.width, dims.channels);
    let gh = rows * (h + 1) - 1;
    let gw = cols * (w + 1) - 1;
    let mut px = vec![0u8; gh * gw * c];
    for (i, img) in images.chunks_exact(d).enumerate() {
        let (oy, ox) = ((i / cols) * (h + 1), (i % cols) * (w + 1));
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let v = img[(y * w + x) * c + ch];
                    let level = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                    px[((oy + y) * gw + ox + x) * c + ch] = level;
                }
            }
        }
    }
    let mut out = format!("{magic}\n{gw} {gh}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

pub fn write_grid(path: &Path, images: &[f64], dims: ImageDims, cols: usize) -> Result<()> {
    let bytes = encode_grid(images, dims, cols)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(())
}
