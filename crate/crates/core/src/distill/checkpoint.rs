use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::state::{EpochSampler, TrainState};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GETC";
pub const CHECKPOINT_VERSION: u32 = 1;

const PARAM: &str = "param/";
const MOMENT1: &str = "adam_m/";
const MOMENT2: &str = "adam_v/";
const EMA: &str = "ema/";

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn bytes(&mut self, b: &[u8]) -> Result<()> {
        self.0.write_all(b)?;
        Ok(())
    }

    fn u32(&mut self, v: u32) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn u64(&mut self, v: u64) -> Result<()> {
        self.bytes(&v.to_le_bytes())
    }

    fn text(&mut self, s: &str) -> Result<()> {
        let n = u32::try_from(s.len()).map_err(|_| Error::Format("string too long".into()))?;
        self.u32(n)?;
        self.bytes(s.as_bytes())
    }

    fn entry<T: Scalar>(&mut self, name: &str, t: &Tensor<T>) -> Result<()> {
        self.text(name)?;
        self.u32(t.rank() as u32)?;
        for &d in t.shape() {
            self.u64(d as u64)?;
        }
        let mut buf = Vec::with_capacity(t.numel() * T::BYTES);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
        self.bytes(&buf)
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn fill(&mut self, buf: &mut [u8]) -> Result<()> {
        self.0
            .read_exact(buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.fill(&mut b)?;
        Ok(b)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn len(&mut self, limit: u64, what: &str) -> Result<usize> {
        let n = self.u64()?;
        if n > limit {
            return Err(Error::Format(format!("implausible {what} length {n}")));
        }
        Ok(n as usize)
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        if n > 1 << 20 {
            return Err(Error::Format(format!("implausible string length {n}")));
        }
        let mut b = vec![0u8; n];
        self.fill(&mut b)?;
        String::from_utf8(b).map_err(|_| Error::Format("entry name is not UTF-8".into()))
    }

    /// One named tensor; the payload is decoded at `width` bytes per element
    /// and converted to `T`.
    fn entry<T: Scalar>(&mut self, width: usize) -> Result<(String, Tensor<T>)> {
        let name = self.text()?;
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("entry {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(self.len(1 << 32, "dimension")?);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| Error::Format(format!("entry {name} too large")))?;
        let mut buf = vec![0u8; numel * width];
        self.fill(&mut buf)?;
        let data: Vec<T> = if width == T::BYTES {
            buf.chunks_exact(width).map(T::read_le).collect()
        } else if width == 4 {
            buf.chunks_exact(4)
                .map(|b| T::of(f32::read_le(b) as f64))
                .collect()
        } else {
            buf.chunks_exact(8)
                .map(|b| T::of(f64::read_le(b)))
                .collect()
        };
        Ok((name, Tensor::new(&shape, data)?))
    }
}

/// Writes the full training state: weights, moments, EMA shadow and the
/// data-order stream. The payload width follows `T`.
pub fn write_checkpoint<T: Scalar>(state: &TrainState<T>, w: impl Write) -> Result<()> {
    let mut w = Writer(w);
    let cfg = state.config();
    w.bytes(&CHECKPOINT_MAGIC)?;
    w.u32(CHECKPOINT_VERSION)?;
    w.u64(cfg.hash())?;
    w.u64(state.iteration)?;
    w.u32(T::BYTES as u32)?;
    w.text(&cfg.describe())?;

    let s = &state.sampler;
    w.bytes(&s.rng.get_seed())?;
    w.u64(s.rng.get_stream())?;
    w.bytes(&s.rng.get_word_pos().to_le_bytes())?;
    w.u64(s.len as u64)?;
    w.u64(s.epoch)?;
    w.u64(s.cursor as u64)?;
    w.u64(s.order.len() as u64)?;
    let order: Vec<u8> = s.order.iter().flat_map(|v| v.to_le_bytes()).collect();
    w.bytes(&order)?;

    let params = &state.model.params;
    let groups: [(&str, &[Tensor<T>]); 4] = [
        (PARAM, params.tensors()),
        (MOMENT1, &state.adam_m),
        (MOMENT2, &state.adam_v),
        (EMA, state.ema.tensors()),
    ];
    w.u32((groups.len() * params.len()) as u32)?;
    for (prefix, tensors) in groups {
        for (name, t) in params.names().iter().zip(tensors) {
            w.entry(&format!("{prefix}{name}"), t)?;
        }
    }
    Ok(())
}

pub fn save_checkpoint<T: Scalar>(state: &TrainState<T>, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(state, &mut w)?;
    w.flush()?;
    Ok(())
}

/// Reads a checkpoint written for `config`; a different architecture is a
/// config error listing the differing settings.
pub fn read_checkpoint<T: Scalar>(r: impl Read, config: &ModelConfig) -> Result<TrainState<T>> {
    let mut r = Reader(r);
    if r.array::<4>()? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let hash = r.u64()?;
    let iteration = r.u64()?;
    let width = r.u32()? as usize;
    if width != 4 && width != 8 {
        return Err(Error::Format(format!("unknown element width {width}")));
    }
    let stored = r.text()?;
    if hash != config.hash() {
        return Err(Error::Config(format!(
            "checkpoint was trained for a different model:\n{}",
            config_diff(&stored, &config.describe())
        )));
    }
    config.validate()?;

    let seed = r.array::<32>()?;
    let stream = r.u64()?;
    let word_pos = u128::from_le_bytes(r.array()?);
    let len = r.len(u32::MAX as u64, "dataset")?;
    let epoch = r.u64()?;
    let cursor = r.len(u32::MAX as u64, "cursor")?;
    let n = r.len(u32::MAX as u64, "permutation")?;
    let mut raw = vec![0u8; n * 4];
    r.fill(&mut raw)?;
    let order: Vec<u32> = raw
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")))
        .collect();
    if (n != 0 && n != len) || cursor > n || order.iter().any(|&i| i as usize >= len) {
        return Err(Error::Format("inconsistent data-order state".into()));
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(word_pos);
    let sampler = EpochSampler {
        rng,
        len,
        epoch,
        cursor,
        order,
    };

    let mut params = ModelParams::<T>::zeros_like_config(config)?;
    let mut ema = params.clone();
    let mut adam_m: Vec<Tensor<T>> = params.tensors().to_vec();
    let mut adam_v = adam_m.clone();
    let count = r.u32()? as usize;
    if count != 4 * params.len() {
        return Err(Error::Format(format!(
            "expected {} entries, found {count}",
            4 * params.len()
        )));
    }
    let mut seen = vec![false; count];
    for _ in 0..count {
        let (name, t) = r.entry::<T>(width)?;
        let (group, key) = [PARAM, MOMENT1, MOMENT2, EMA]
            .iter()
            .enumerate()
            .find_map(|(g, p)| name.strip_prefix(p).map(|k| (g, k)))
            .ok_or_else(|| Error::Format(format!("unknown entry {name}")))?;
        let i = params
            .position(key)
            .map_err(|_| Error::Format(format!("unknown entry {name}")))?;
        if std::mem::replace(&mut seen[group * params.len() + i], true) {
            return Err(Error::Format(format!("duplicate entry {name}")));
        }
        if t.shape() != params.tensors()[i].shape() {
            return Err(Error::Format(format!(
                "entry {name} has shape {:?}",
                t.shape()
            )));
        }
        match group {
            0 => params.tensors_mut()[i] = t,
            1 => adam_m[i] = t,
            2 => adam_v[i] = t,
            _ => ema.tensors_mut()[i] = t,
        }
    }
    Ok(TrainState {
        iteration,
        model: Model {
            config: config.clone(),
            params,
        },
        adam_m,
        adam_v,
        ema,
        sampler,
    })
}

pub fn load_checkpoint<T: Scalar>(path: &Path, config: &ModelConfig) -> Result<TrainState<T>> {
    read_checkpoint(BufReader::new(File::open(path)?), config)
}

/// Lines of `key = value` text that differ between two config descriptions.
fn config_diff(stored: &str, expected: &str) -> String {
    let a: Vec<&str> = stored.lines().collect();
    let b: Vec<&str> = expected.lines().collect();
    let mut out = String::new();
    for l in a.iter().filter(|l| !b.contains(l)) {
        out.push_str(&format!("  checkpoint: {l}\n"));
    }
    for l in b.iter().filter(|l| !a.contains(l)) {
        out.push_str(&format!("  requested:  {l}\n"));
    }
    out
}
