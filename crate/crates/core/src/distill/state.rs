use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::optim::{adamw_update, ema_update, l1_loss, AdamWConfig};
use crate::error::{Error, Result};
use crate::fixed_point::UnrollMode;
use crate::model::{Model, ModelConfig, ModelParams};
use crate::teacher::PairDataset;
use crate::tensor::{Graph, Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    /// Total optimizer steps.
    pub iterations: u64,
    pub ema_momentum: f64,
    /// Seeds the per-epoch permutations of the dataset.
    pub data_seed: u64,
    /// Seeds the parameter initialization.
    pub init_seed: u64,
    /// Unrolled equilibrium steps; `None` uses the model's own count.
    pub k: Option<usize>,
    pub unroll: UnrollMode,
    /// Checkpoint period in iterations; 0 writes only the final checkpoint.
    pub checkpoint_every: u64,
    /// Metrics row period in iterations.
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 128,
            iterations: 20_000,
            ema_momentum: 0.9999,
            data_seed: 0,
            init_seed: 0,
            k: None,
            unroll: UnrollMode::Plain,
            checkpoint_every: 5_000,
            log_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let o = &self.optimizer;
        if !(o.lr > 0.0 && o.lr.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                o.lr
            )));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config(format!(
                "betas must lie in [0, 1), got ({}, {})",
                o.beta1, o.beta2
            )));
        }
        if !(o.eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(Error::Config(
                "eps must be positive and weight decay non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "EMA momentum must lie in [0, 1], got {}",
                self.ema_momentum
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.k == Some(0) {
            return Err(Error::Config("K must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Seeded full-permutation epochs over `len` records. A batch may straddle
/// two epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochSampler {
    pub(crate) rng: ChaCha8Rng,
    pub(crate) len: usize,
    pub(crate) epoch: u64,
    pub(crate) cursor: usize,
    pub(crate) order: Vec<u32>,
}

impl EpochSampler {
    pub fn new(seed: u64, len: usize) -> Result<Self> {
        if len == 0 || len > u32::MAX as usize {
            return Err(Error::Config(format!(
                "cannot sample batches from {len} records"
            )));
        }
        Ok(EpochSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            len,
            epoch: 0,
            cursor: 0,
            order: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Permutations drawn so far, including the one in progress.
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order = (0..self.len as u32).collect();
                self.order.shuffle(&mut self.rng);
                self.epoch += 1;
                self.cursor = 0;
            }
            out.push(self.order[self.cursor] as usize);
            self.cursor += 1;
        }
        out
    }
}

/// Loss and global gradient norm of one optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    pub iteration: u64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState<T: Scalar> {
    pub iteration: u64,
    pub model: Model<T>,
    /// First and second moments, aligned with `model.params`.
    pub adam_m: Vec<Tensor<T>>,
    pub adam_v: Vec<Tensor<T>>,
    pub ema: ModelParams<T>,
    pub sampler: EpochSampler,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state: initialized weights, zero moments, EMA equal to the
    /// initialization.
    pub fn new(config: ModelConfig, cfg: &TrainConfig, dataset_len: usize) -> Result<Self> {
        cfg.validate()?;
        let model = Model::init(config, cfg.init_seed)?;
        let zeros: Vec<Tensor<T>> = model
            .params
            .tensors()
            .iter()
            .map(|t| Tensor::zeros(t.shape()))
            .collect();
        Ok(TrainState {
            iteration: 0,
            ema: model.params.clone(),
            adam_m: zeros.clone(),
            adam_v: zeros,
            model,
            sampler: EpochSampler::new(cfg.data_seed, dataset_len)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    /// The EMA weights as a model, which is what evaluation and sampling use.
    pub fn ema_model(&self) -> Model<T> {
        Model {
            config: self.model.config.clone(),
            params: self.ema.clone(),
        }
    }

    /// Sample a batch, run forward and backward, then AdamW and EMA.
    pub fn step(&mut self, data: &PairDataset, cfg: &TrainConfig) -> Result<StepStats> {
        let idx = self.sampler.next_batch(cfg.batch_size);
        let (noise, image, labels) = data.batch::<T>(&idx)?;
        let k = cfg.k.unwrap_or_else(|| self.model.config.iterations());
        let mut g = Graph::new();
        let vars = self.model.params.register(&mut g);
        let pred = self
            .model
            .forward(&mut g, &vars, &noise, labels.as_deref(), k, cfg.unroll)?;
        let target = g.constant(image);
        let loss = l1_loss(&mut g, pred, target)?;
        let loss_value = g.value(loss).item().as_f64();
        if !loss_value.is_finite() {
            return Err(Error::Divergence {
                iteration: self.iteration as usize,
                detail: format!("loss became {loss_value}"),
            });
        }
        g.backward(loss)?;

        let t = self.iteration + 1;
        let mut sq = 0.0;
        let params = &mut self.model.params;
        for i in 0..params.len() {
            if !params.is_learned(i) {
                continue;
            }
            let name = params.names()[i].clone();
            let shape = params.tensors()[i].shape().to_vec();
            let zero;
            let grad = match g.grad(vars.vars()[i]) {
                Some(gr) => gr,
                None => {
                    zero = Tensor::zeros(&shape);
                    &zero
                }
            };
            sq += grad
                .data()
                .iter()
                .map(|v| v.as_f64() * v.as_f64())
                .sum::<f64>();
            let p = &mut params.tensors_mut()[i];
            adamw_update(
                &name,
                p,
                grad,
                &mut self.adam_m[i],
                &mut self.adam_v[i],
                t,
                &cfg.optimizer,
            )?;
        }
        for (s, p) in self.ema.tensors_mut().iter_mut().zip(params.tensors()) {
            ema_update(s, p, cfg.ema_momentum)?;
        }
        self.iteration = t;
        Ok(StepStats {
            iteration: t,
            loss: loss_value,
            grad_norm: sq.sqrt(),
        })
    }
}

/// Config error unless the dataset fits the model: image dims, label
/// presence and label range.
pub fn check_dataset(data: &PairDataset, config: &ModelConfig) -> Result<()> {
    config.validate()?;
    if data.dims != config.image() {
        return Err(Error::Config(format!(
            "dataset images are {:?} but the model expects {:?}",
            data.dims.shape(),
            config.image().shape()
        )));
    }
    match (&data.labels, config.is_conditional()) {
        (Some(_), false) => Err(Error::Config(
            "labelled dataset given to an unconditional model".into(),
        )),
        (None, true) => Err(Error::Config(
            "conditional model needs a labelled dataset".into(),
        )),
        (Some(l), true) => match l.iter().find(|&&y| y as usize >= config.n_classes()) {
            Some(y) => Err(Error::Config(format!(
                "label {y} outside {} classes",
                config.n_classes()
            ))),
            None => Ok(()),
        },
        (None, false) => Ok(()),
    }
}
