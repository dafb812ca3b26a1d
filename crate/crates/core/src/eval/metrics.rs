use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::distill::check_dataset;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::teacher::{MixtureSpec, PairDataset};
use crate::tensor::{Scalar, Tensor};

/// Projection count used when none is given.
pub const DEFAULT_PROJECTIONS: usize = 128;
/// Batch size for inference passes.
pub const EVAL_BATCH: usize = 256;

/// Runs `model` on flattened unit noises (`dim` values each) in batches and
/// returns the flattened outputs.
pub fn generate_batched<T: Scalar>(
    model: &Model<T>,
    noises: &[f32],
    labels: Option<&[usize]>,
    k: usize,
    batch: usize,
) -> Result<Vec<f64>> {
    let dims = model.config.image();
    let d = dims.numel();
    if noises.len() % d != 0 {
        return Err(Error::Dimension(format!(
            "{} noise values for images of {d}",
            noises.len()
        )));
    }
    let n = noises.len() / d;
    if labels.is_some_and(|l| l.len() != n) {
        return Err(Error::Contract(format!(
            "{n} noises but {} labels",
            labels.map_or(0, |l| l.len())
        )));
    }
    let mut out = Vec::with_capacity(noises.len());
    let batch = batch.max(1);
    for start in (0..n).step_by(batch) {
        let end = (start + batch).min(n);
        let shape = [end - start, dims.height, dims.width, dims.channels];
        let data = noises[start * d..end * d]
            .iter()
            .map(|&v| T::of(v as f64))
            .collect();
        let x = Tensor::new(&shape, data)?;
        let y = model.generate(&x, labels.map(|l| &l[start..end]), k)?;
        out.extend(y.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Mean absolute difference between the model's outputs on the held-out
/// noises and the teacher's images.
pub fn l1_fidelity<T: Scalar>(model: &Model<T>, heldout: &PairDataset, k: usize) -> Result<f64> {
    check_dataset(heldout, &model.config)?;
    if heldout.is_empty() {
        return Err(Error::Contract("held-out set is empty".into()));
    }
    let labels: Option<Vec<usize>> = heldout
        .labels
        .as_ref()
        .map(|l| l.iter().map(|&y| y as usize).collect());
    let out = generate_batched(model, &heldout.noises, labels.as_deref(), k, EVAL_BATCH)?;
    let total: f64 = out
        .iter()
        .zip(&heldout.images)
        .map(|(a, &b)| (a - b as f64).abs())
        .sum();
    Ok(total / out.len() as f64)
}

/// `n` seeded unit vectors in `dim` dimensions.
pub fn projections(dim: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| loop {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 {
                break v.into_iter().map(|x| x / norm).collect();
            }
        })
        .collect()
}

/// 2-Wasserstein distance between two 1-D empirical distributions, by
/// integrating the squared gap between their quantile functions.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(
            "Wasserstein distance of an empty sample".into(),
        ));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    if a.len() == b.len() {
        let s: f64 = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum();
        return Ok((s / a.len() as f64).sqrt());
    }
    let (na, nb) = (a.len(), b.len());
    let (mut i, mut j) = (0usize, 0usize);
    let mut u = 0.0;
    let mut acc = 0.0;
    while i < na && j < nb {
        let next_a = (i + 1) as f64 / na as f64;
        let next_b = (j + 1) as f64 / nb as f64;
        let next = next_a.min(next_b);
        acc += (next - u) * (a[i] - b[j]) * (a[i] - b[j]);
        u = next;
        if next_a <= next {
            i += 1;
        }
        if next_b <= next {
            j += 1;
        }
    }
    Ok(acc.max(0.0).sqrt())
}

/// Mean over `n_proj` seeded directions of the 1-D 2-Wasserstein distance
/// between the projected sample sets. Samples are flattened rows of `dim`.
pub fn sliced_wasserstein(
    a: &[f64],
    b: &[f64],
    dim: usize,
    n_proj: usize,
    seed: u64,
) -> Result<f64> {
    if dim == 0 || n_proj == 0 {
        return Err(Error::Contract(
            "need a positive dimension and at least one projection".into(),
        ));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Contract(
            "sliced Wasserstein of an empty sample set".into(),
        ));
    }
    if a.len() % dim != 0 || b.len() % dim != 0 {
        return Err(Error::Dimension(format!(
            "sample sets of {} and {} values are not rows of {dim}",
            a.len(),
            b.len()
        )));
    }
    let project = |x: &[f64], p: &[f64]| -> Vec<f64> {
        x.chunks_exact(dim)
            .map(|r| r.iter().zip(p).map(|(u, v)| u * v).sum())
            .collect()
    };
    let mut total = 0.0;
    for p in projections(dim, n_proj, seed) {
        total += wasserstein_1d(&project(a, &p), &project(b, &p))?;
    }
    Ok(total / n_proj as f64)
}

/// Fraction of generated images whose nearest mixture mean carries the
/// requested label. `generate` maps unit noises and labels to images.
pub fn class_accuracy_with(
    spec: &MixtureSpec,
    n_per_class: usize,
    seed: u64,
    mut generate: impl FnMut(&[f32], &[usize]) -> Result<Vec<f64>>,
) -> Result<f64> {
    let classes = spec.n_classes();
    if classes == 0 {
        return Err(Error::Contract(
            "class accuracy needs a labelled mixture".into(),
        ));
    }
    if n_per_class == 0 {
        return Err(Error::Contract("need at least one sample per class".into()));
    }
    let d = spec.dim();
    let labels: Vec<usize> = (0..classes)
        .flat_map(|c| std::iter::repeat(c).take(n_per_class))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noises: Vec<f32> = (0..labels.len() * d)
        .map(|_| rng.sample::<f64, _>(StandardNormal) as f32)
        .collect();
    let images = generate(&noises, &labels)?;
    if images.len() != noises.len() {
        return Err(Error::Dimension(format!(
            "generator returned {} values, expected {}",
            images.len(),
            noises.len()
        )));
    }
    let hits = images
        .chunks_exact(d)
        .zip(&labels)
        .filter(|(x, &y)| spec.classify(x) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// [`class_accuracy_with`] for a conditional model.
pub fn class_accuracy<T: Scalar>(
    model: &Model<T>,
    spec: &MixtureSpec,
    n_per_class: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if !model.config.is_conditional() {
        return Err(Error::Contract(
            "class accuracy needs a conditional model".into(),
        ));
    }
    if spec.n_classes() > model.config.n_classes() {
        return Err(Error::Contract(format!(
            "mixture has {} classes, model {}",
            spec.n_classes(),
            model.config.n_classes()
        )));
    }
    if spec.dims != model.config.image() {
        return Err(Error::Config("mixture and model image sizes differ".into()));
    }
    class_accuracy_with(spec, n_per_class, seed, |noise, labels| {
        generate_batched(model, noise, Some(labels), k, EVAL_BATCH)
    })
}
