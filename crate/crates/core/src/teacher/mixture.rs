use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::ImageDims;

/// Isotropic Gaussian mixture over flattened images: the data distribution
/// whose denoiser is known in closed form.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub dims: ImageDims,
    pub weights: Vec<f64>,
    /// One flattened `H*W*C` mean per component.
    pub means: Vec<Vec<f64>>,
    /// Shared per-pixel standard deviation `s`.
    pub std: f64,
    /// Class of each component, when the mixture is labelled.
    pub labels: Option<Vec<usize>>,
}

/// Binary 8x8 template number `k` (mod 8), in `{-1, 1}`.
fn template8(k: usize, r: usize, c: usize) -> bool {
    match k % 8 {
        0 => r % 2 == 0,
        1 => c % 2 == 0,
        2 => (r + c) % 2 == 0,
        3 => c < 4,
        4 => r < 4,
        5 => r == c || r + c == 7,
        6 => r == 0 || r == 7 || c == 0 || c == 7,
        _ => (2..6).contains(&r) && (2..6).contains(&c),
    }
}

impl MixtureSpec {
    /// `k` equally weighted components with distinct binary templates
    /// (stripes, checkerboard, halves, diagonals, frame, square) on an
    /// `h x w x c` grid. Templates are drawn on an 8x8 lattice and scaled
    /// to the image; more than eight components repeat with a sign flip.
    pub fn templates(dims: ImageDims, k: usize, std: f64) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config(
                "a mixture needs at least one component".into(),
            ));
        }
        let means = (0..k)
            .map(|i| {
                let flip = (i / 8) % 2 == 1;
                let mut m = Vec::with_capacity(dims.numel());
                for r in 0..dims.height {
                    for c in 0..dims.width {
                        let on = template8(i, r * 8 / dims.height, c * 8 / dims.width) != flip;
                        let v = if on { 1.0 } else { -1.0 };
                        m.extend(std::iter::repeat(v).take(dims.channels));
                    }
                }
                m
            })
            .collect();
        let spec = MixtureSpec {
            dims,
            weights: vec![1.0 / k as f64; k],
            means,
            std,
            labels: None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The default teacher: 8x8x1, eight templates, `s = 0.1`.
    pub fn default_toy() -> Self {
        Self::templates(ImageDims::new(8, 8, 1), 8, 0.1).expect("valid default")
    }

    /// Assigns component `i` to class `i * classes / k`, so every class owns
    /// a contiguous group of components.
    pub fn with_grouped_labels(mut self, classes: usize) -> Result<Self> {
        let k = self.len();
        if classes == 0 || classes > k {
            return Err(Error::Config(format!(
                "cannot split {k} components into {classes} classes"
            )));
        }
        self.labels = Some((0..k).map(|i| i * classes / k).collect());
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dims.numel()
    }

    pub fn n_classes(&self) -> usize {
        self.labels
            .as_ref()
            .map_or(0, |l| l.iter().max().map_or(0, |&m| m + 1))
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.weights.is_empty() || self.weights.len() != self.means.len() {
            return Err(Error::Config(
                "weights and means must be non-empty and equally many".into(),
            ));
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("mixture weights must be non-negative".into()));
        }
        let total: f64 = self.weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "mixture weights sum to {total}, not 1"
            )));
        }
        if self
            .means
            .iter()
            .any(|m| m.len() != d || m.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::Config(format!(
                "every mean must hold {d} finite values"
            )));
        }
        if !(self.std > 0.0) || !self.std.is_finite() {
            return Err(Error::Config(format!(
                "mixture std must be positive, got {}",
                self.std
            )));
        }
        if let Some(l) = &self.labels {
            if l.len() != self.len() {
                return Err(Error::Config("one label per component is required".into()));
            }
        }
        Ok(())
    }

    /// Total weight of each class.
    pub fn class_weights(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.n_classes()];
        if let Some(l) = &self.labels {
            for (w, &c) in self.weights.iter().zip(l) {
                out[c] += w;
            }
        }
        out
    }

    /// The mixture restricted to the components of `class`, renormalized.
    pub fn restrict_to_class(&self, class: usize) -> Result<Self> {
        let labels = self
            .labels
            .as_ref()
            .ok_or_else(|| Error::Contract("mixture has no class labels".into()))?;
        let keep: Vec<usize> = (0..self.len()).filter(|&i| labels[i] == class).collect();
        let total: f64 = keep.iter().map(|&i| self.weights[i]).sum();
        if keep.is_empty() || total <= 0.0 {
            return Err(Error::Contract(format!(
                "class {class} has no components with weight"
            )));
        }
        Ok(MixtureSpec {
            dims: self.dims,
            weights: keep.iter().map(|&i| self.weights[i] / total).collect(),
            means: keep.iter().map(|&i| self.means[i].clone()).collect(),
            std: self.std,
            labels: Some(vec![class; keep.len()]),
        })
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::Dimension(format!(
                "state of length {} for a {}-pixel mixture",
                x.len(),
                self.dim()
            )));
        }
        Ok(())
    }

    /// Posterior component probabilities of `x` under the mixture blurred by
    /// noise `sigma`, via log-sum-exp.
    pub fn responsibilities(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        let var = self.std * self.std + sigma * sigma;
        let logits: Vec<f64> = self
            .weights
            .iter()
            .zip(&self.means)
            .map(|(&w, m)| {
                let d2: f64 = x.iter().zip(m).map(|(a, b)| (a - b) * (a - b)).sum();
                if w > 0.0 {
                    w.ln() - d2 / (2.0 * var)
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let tot: f64 = e.iter().sum();
        e.into_iter().map(|v| v / tot).collect()
    }

    /// Posterior mean `E[x0 | x]` at noise level `sigma`.
    pub fn denoise(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_len(x)?;
        if sigma < 0.0 || sigma.is_nan() {
            return Err(Error::Domain(format!(
                "noise level must be non-negative, got {sigma}"
            )));
        }
        if sigma == 0.0 {
            return Ok(x.to_vec());
        }
        let s2 = self.std * self.std;
        let t2 = sigma * sigma;
        let r = self.responsibilities(x, sigma);
        let mut out: Vec<f64> = x.iter().map(|&v| s2 * v / (s2 + t2)).collect();
        for (ri, m) in r.iter().zip(&self.means) {
            if *ri == 0.0 {
                continue;
            }
            let c = ri * t2 / (s2 + t2);
            for (o, &mv) in out.iter_mut().zip(m) {
                *o += c * mv;
            }
        }
        Ok(out)
    }

    /// `grad_x log p_sigma(x) = sum_i r_i (mu_i - x) / (s^2 + sigma^2)`.
    pub fn score(&self, x: &[f64], sigma: f64) -> Result<Vec<f64>> {
        self.check_len(x)?;
        let var = self.std * self.std + sigma * sigma;
        let r = self.responsibilities(x, sigma);
        let mut out = vec![0.0; x.len()];
        for (ri, m) in r.iter().zip(&self.means) {
            for ((o, &mv), &xv) in out.iter_mut().zip(m).zip(x) {
                *o += ri * (mv - xv) / var;
            }
        }
        Ok(out)
    }

    /// Index of the mean closest to `x` in Euclidean distance.
    pub fn nearest_component(&self, x: &[f64]) -> usize {
        let dist = |m: &Vec<f64>| m.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        self.means
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |best, (i, m)| {
                let d = dist(m);
                if d < best.1 {
                    (i, d)
                } else {
                    best
                }
            })
            .0
    }

    /// Class of the nearest component; the component index when
    /// unlabelled.
    pub fn classify(&self, x: &[f64]) -> usize {
        let i = self.nearest_component(x);
        self.labels.as_ref().map_or(i, |l| l[i])
    }

    /// Per-pixel mean `sum_i w_i mu_i`.
    pub fn mean(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in out.iter_mut().zip(m) {
                *o += w * v;
            }
        }
        out
    }

    /// Per-pixel variance `s^2 + sum_i w_i mu_i^2 - mean^2`.
    pub fn variance(&self) -> Vec<f64> {
        let mean = self.mean();
        let mut second = vec![self.std * self.std; self.dim()];
        for (w, m) in self.weights.iter().zip(&self.means) {
            for (o, v) in second.iter_mut().zip(m) {
                *o += w * v * v;
            }
        }
        second.iter().zip(&mean).map(|(s, m)| s - m * m).collect()
    }

    /// Direct draw: pick a component by weight, add isotropic noise.
    /// Returns the sample and its component.
    pub fn sample_direct<R: Rng>(&self, rng: &mut R) -> (Vec<f64>, usize) {
        let i = pick(&self.weights, rng.gen::<f64>());
        let x = self.means[i]
            .iter()
            .map(|&m| m + self.std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        (x, i)
    }

    /// Text form: a header line `H W C std`, then one line per component
    /// `weight label mean...` (label `-` when unlabelled). `#` starts a comment.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let d = self.dims;
        let _ = writeln!(s, "{} {} {} {:e}", d.height, d.width, d.channels, self.std);
        for (i, (w, m)) in self.weights.iter().zip(&self.means).enumerate() {
            let label = self
                .labels
                .as_ref()
                .map_or("-".to_string(), |l| l[i].to_string());
            let _ = write!(s, "{w:e} {label}");
            for v in m {
                let _ = write!(s, " {v:e}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty());
        let bad = |m: String| Error::Format(format!("mixture file: {m}"));
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| bad("empty".into()))?
            .split_whitespace()
            .collect();
        if header.len() != 4 {
            return Err(bad("header must be `H W C std`".into()));
        }
        let num = |s: &str| s.parse::<usize>().map_err(|e| bad(format!("{s}: {e}")));
        let dims = ImageDims::new(num(header[0])?, num(header[1])?, num(header[2])?);
        let std: f64 = header[3].parse().map_err(|e| bad(format!("std: {e}")))?;
        let (mut weights, mut means, mut labels) = (Vec::new(), Vec::new(), Vec::new());
        for line in lines {
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != dims.numel() + 2 {
                return Err(bad(format!(
                    "component line has {} fields, expected {}",
                    f.len(),
                    dims.numel() + 2
                )));
            }
            weights.push(
                f[0].parse::<f64>()
                    .map_err(|e| bad(format!("weight: {e}")))?,
            );
            labels.push(if f[1] == "-" { None } else { Some(num(f[1])?) });
            let m: Result<Vec<f64>> = f[2..]
                .iter()
                .map(|v| v.parse::<f64>().map_err(|e| bad(format!("mean: {e}"))))
                .collect();
            means.push(m?);
        }
        let labels = if labels.iter().all(Option::is_some) && !labels.is_empty() {
            Some(labels.into_iter().map(|l| l.expect("checked")).collect())
        } else if labels.iter().all(Option::is_none) {
            None
        } else {
            return Err(bad("either every component has a label or none does".into()));
        };
        let spec = MixtureSpec {
            dims,
            weights,
            means,
            std,
            labels,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Index `i` with `sum_{j<i} w_j <= u < sum_{j<=i} w_j`.
pub(crate) fn pick(weights: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}
