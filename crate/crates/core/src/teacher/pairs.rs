use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::thread;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::mixture::{pick, MixtureSpec};
use super::sampler::{heun_sample, NoiseSchedule};
use crate::error::{Error, Result};
use crate::model::ImageDims;
use crate::tensor::{Scalar, Tensor};

pub const PAIRS_MAGIC: [u8; 4] = *b"GETP";
pub const PAIRS_VERSION: u32 = 1;
const HEADER_BYTES: usize = 4 + 4 + 8 + 12 + 1;
const CHUNK: usize = 2048;

/// Worker threads for generation: `EQDISTILL_THREADS` if set, otherwise the
/// available parallelism.
pub fn worker_count() -> usize {
    std::env::var("EQDISTILL_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| thread::available_parallelism().map_or(1, |n| n.get()))
}

/// One noise/image pair; the noise is the unit-variance draw.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub noise: Vec<f32>,
    pub image: Vec<f32>,
    pub label: Option<u32>,
}

/// The random stream that owns record `index` of a dataset.
pub fn record_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Prepared teacher: the full mixture, or one restricted mixture per class.
struct Teacher<'a> {
    spec: &'a MixtureSpec,
    schedule: &'a NoiseSchedule,
    classes: Option<(Vec<f64>, Vec<MixtureSpec>)>,
}

impl<'a> Teacher<'a> {
    fn new(spec: &'a MixtureSpec, schedule: &'a NoiseSchedule, conditional: bool) -> Result<Self> {
        spec.validate()?;
        schedule.validate()?;
        let classes = if conditional {
            let k = spec.n_classes();
            if k == 0 {
                return Err(Error::Contract(
                    "conditional generation needs a labelled mixture".into(),
                ));
            }
            let per_class = (0..k)
                .map(|c| spec.restrict_to_class(c))
                .collect::<Result<_>>()?;
            Some((spec.class_weights(), per_class))
        } else {
            None
        };
        Ok(Teacher {
            spec,
            schedule,
            classes,
        })
    }

    /// Label first (by class weight), then the noise, both from the record's
    /// own stream; the flow runs under the class-restricted mixture.
    fn record(&self, seed: u64, index: u64) -> Result<PairRecord> {
        let mut rng = record_rng(seed, index);
        let (label, spec) = match &self.classes {
            Some((weights, specs)) => {
                let c = pick(weights, rng.gen::<f64>());
                (Some(c as u32), &specs[c])
            }
            None => (None, self.spec),
        };
        let noise: Vec<f32> = (0..self.spec.dim())
            .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
            .collect();
        let e: Vec<f64> = noise.iter().map(|&v| v as f64).collect();
        let image = heun_sample(&e, spec, self.schedule)?
            .into_iter()
            .map(|v| v as f32)
            .collect();
        Ok(PairRecord {
            noise,
            image,
            label,
        })
    }

    fn range(&self, seed: u64, start: u64, end: u64, workers: usize) -> Result<Vec<PairRecord>> {
        let n = (end - start) as usize;
        let workers = workers.clamp(1, n.max(1));
        if workers == 1 {
            return (start..end).map(|i| self.record(seed, i)).collect();
        }
        let per = n.div_ceil(workers);
        thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|w| {
                    let lo = start + (w * per).min(n) as u64;
                    let hi = start + ((w + 1) * per).min(n) as u64;
                    s.spawn(move || {
                        (lo..hi)
                            .map(|i| self.record(seed, i))
                            .collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(n);
            for h in handles {
                out.extend(
                    h.join()
                        .map_err(|_| Error::Contract("generation worker panicked".into()))??,
                );
            }
            Ok(out)
        })
    }
}

/// Record `index` of the dataset determined by `(spec, schedule, seed)`.
pub fn generate_record(
    spec: &MixtureSpec,
    schedule: &NoiseSchedule,
    seed: u64,
    index: u64,
    conditional: bool,
) -> Result<PairRecord> {
    Teacher::new(spec, schedule, conditional)?.record(seed, index)
}

/// Records `[start, end)` generated in parallel; identical to serial output.
pub fn generate_range(
    spec: &MixtureSpec,
    schedule: &NoiseSchedule,
    seed: u64,
    start: u64,
    end: u64,
    conditional: bool,
    workers: usize,
) -> Result<Vec<PairRecord>> {
    if end < start {
        return Err(Error::Contract(format!("empty range {start}..{end}")));
    }
    Teacher::new(spec, schedule, conditional)?.range(seed, start, end, workers)
}

/// In-memory pairs dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    pub dims: ImageDims,
    pub noises: Vec<f32>,
    pub images: Vec<f32>,
    pub labels: Option<Vec<u32>>,
}

impl PairDataset {
    pub fn new(dims: ImageDims, conditional: bool) -> Self {
        PairDataset {
            dims,
            noises: Vec::new(),
            images: Vec::new(),
            labels: conditional.then(Vec::new),
        }
    }

    pub fn len(&self) -> usize {
        self.noises.len() / self.dims.numel().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.noises.is_empty()
    }

    pub fn is_conditional(&self) -> bool {
        self.labels.is_some()
    }

    pub fn push(&mut self, r: &PairRecord) -> Result<()> {
        let d = self.dims.numel();
        if r.noise.len() != d || r.image.len() != d {
            return Err(Error::Dimension(format!(
                "record with {} / {} values for {d} pixels",
                r.noise.len(),
                r.image.len()
            )));
        }
        match (&mut self.labels, r.label) {
            (Some(l), Some(y)) => l.push(y),
            (None, None) => {}
            _ => {
                return Err(Error::Contract(
                    "label presence must match the dataset".into(),
                ))
            }
        }
        self.noises.extend_from_slice(&r.noise);
        self.images.extend_from_slice(&r.image);
        Ok(())
    }

    pub fn noise(&self, i: usize) -> &[f32] {
        let d = self.dims.numel();
        &self.noises[i * d..(i + 1) * d]
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let d = self.dims.numel();
        &self.images[i * d..(i + 1) * d]
    }

    pub fn label(&self, i: usize) -> Option<usize> {
        self.labels.as_ref().map(|l| l[i] as usize)
    }

    pub fn record(&self, i: usize) -> PairRecord {
        PairRecord {
            noise: self.noise(i).to_vec(),
            image: self.image(i).to_vec(),
            label: self.labels.as_ref().map(|l| l[i]),
        }
    }

    /// Records `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> PairDataset {
        let d = self.dims.numel();
        PairDataset {
            dims: self.dims,
            noises: self.noises[start * d..end * d].to_vec(),
            images: self.images[start * d..end * d].to_vec(),
            labels: self.labels.as_ref().map(|l| l[start..end].to_vec()),
        }
    }

    /// Stacks the given records into `[B, H, W, C]` noise and image tensors.
    pub fn batch<T: Scalar>(
        &self,
        idx: &[usize],
    ) -> Result<(Tensor<T>, Tensor<T>, Option<Vec<usize>>)> {
        let shape = [
            idx.len(),
            self.dims.height,
            self.dims.width,
            self.dims.channels,
        ];
        let d = self.dims.numel();
        let gather = |src: &[f32]| -> Vec<T> {
            idx.iter()
                .flat_map(|&i| src[i * d..(i + 1) * d].iter().map(|&v| T::of(v as f64)))
                .collect()
        };
        let noise = Tensor::new(&shape, gather(&self.noises))?;
        let image = Tensor::new(&shape, gather(&self.images))?;
        let labels = self
            .labels
            .as_ref()
            .map(|l| idx.iter().map(|&i| l[i] as usize).collect());
        Ok((noise, image, labels))
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        write_header(w, self.dims, self.len() as u64, self.is_conditional())?;
        for i in 0..self.len() {
            write_record(w, &self.record(i))?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let PairsHeader {
            count,
            dims,
            conditional,
        } = read_header(r)?;
        let count =
            usize::try_from(count).map_err(|_| Error::Format("record count too large".into()))?;
        let d = dims.numel();
        let mut ds = PairDataset::new(dims, conditional);
        let hint = count.min(1 << 20) * d;
        ds.noises.reserve(hint);
        ds.images.reserve(hint);
        let mut buf = vec![0u8; d * 4];
        let read_f32s = |r: &mut dyn Read, buf: &mut Vec<u8>, out: &mut Vec<f32>| -> Result<()> {
            r.read_exact(buf)
                .map_err(|e| Error::Format(format!("truncated pairs file: {e}")))?;
            out.extend(
                buf.chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))),
            );
            Ok(())
        };
        for _ in 0..count {
            read_f32s(r, &mut buf, &mut ds.noises)?;
            read_f32s(r, &mut buf, &mut ds.images)?;
            if let Some(l) = &mut ds.labels {
                let mut b = [0u8; 4];
                r.read_exact(&mut b)
                    .map_err(|e| Error::Format(format!("truncated pairs file: {e}")))?;
                l.push(u32::from_le_bytes(b));
            }
        }
        Ok(ds)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

/// Fixed-size header of a pairs file.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairsHeader {
    pub count: u64,
    pub dims: ImageDims,
    pub conditional: bool,
}

pub fn read_header(r: &mut impl Read) -> Result<PairsHeader> {
    let mut head = [0u8; HEADER_BYTES];
    r.read_exact(&mut head)
        .map_err(|e| Error::Format(format!("pairs header: {e}")))?;
    if head[..4] != PAIRS_MAGIC {
        return Err(Error::Format("not a pairs file (bad magic)".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(head[o..o + 4].try_into().expect("4 bytes"));
    let version = u32_at(4);
    if version != PAIRS_VERSION {
        return Err(Error::Format(format!(
            "unsupported pairs version {version}"
        )));
    }
    let count = u64::from_le_bytes(head[8..16].try_into().expect("8 bytes"));
    let dims = ImageDims::new(
        u32_at(16) as usize,
        u32_at(20) as usize,
        u32_at(24) as usize,
    );
    let conditional = match head[28] {
        0 => false,
        1 => true,
        f => return Err(Error::Format(format!("bad conditional flag {f}"))),
    };
    Ok(PairsHeader {
        count,
        dims,
        conditional,
    })
}

/// Header of the pairs file at `path`, without reading the records.
pub fn read_pairs_header(path: &Path) -> Result<PairsHeader> {
    read_header(&mut BufReader::new(File::open(path)?))
}

fn write_header(w: &mut impl Write, dims: ImageDims, count: u64, conditional: bool) -> Result<()> {
    let dim32 = |v: usize| {
        u32::try_from(v)
            .map_err(|_| Error::Contract(format!("dimension {v} does not fit the header")))
    };
    w.write_all(&PAIRS_MAGIC)?;
    w.write_all(&PAIRS_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for v in [dims.height, dims.width, dims.channels] {
        w.write_all(&dim32(v)?.to_le_bytes())?;
    }
    w.write_all(&[conditional as u8])?;
    Ok(())
}

fn write_record(w: &mut impl Write, r: &PairRecord) -> Result<()> {
    let mut buf = Vec::with_capacity((r.noise.len() + r.image.len()) * 4 + 4);
    for &v in r.noise.iter().chain(&r.image) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(y) = r.label {
        buf.extend_from_slice(&y.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Generates `count` pairs and streams them to `path` in record order.
pub fn generate_pairs(
    spec: &MixtureSpec,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
    conditional: bool,
    path: &Path,
) -> Result<()> {
    if count == 0 {
        return Err(Error::Contract("count must be at least 1".into()));
    }
    let total = u64::try_from(count)
        .map_err(|_| Error::Contract(format!("count {count} does not fit the header")))?;
    let teacher = Teacher::new(spec, schedule, conditional)?;
    let workers = worker_count();
    let mut w = BufWriter::new(File::create(path)?);
    write_header(&mut w, spec.dims, total, conditional)?;
    let mut start = 0u64;
    while start < total {
        let end = (start + CHUNK as u64).min(total);
        for r in teacher.range(seed, start, end, workers)? {
            write_record(&mut w, &r)?;
        }
        start = end;
    }
    w.flush()?;
    Ok(())
}

/// Same records as [`generate_pairs`], kept in memory.
pub fn generate_dataset(
    spec: &MixtureSpec,
    schedule: &NoiseSchedule,
    count: usize,
    seed: u64,
    conditional: bool,
) -> Result<PairDataset> {
    let records = generate_range(
        spec,
        schedule,
        seed,
        0,
        count as u64,
        conditional,
        worker_count(),
    )?;
    let mut ds = PairDataset::new(spec.dims, conditional);
    for r in &records {
        ds.push(r)?;
    }
    Ok(ds)
}
