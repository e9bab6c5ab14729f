use std::collections::HashMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Sharing, Vae, VaeArch, VaeModel};
use crate::nn::{Adam, AdamConfig};
use crate::synthgen::{sample_pair, FactorSpace, FactorTuple};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub beta: f64,
    pub steps: usize,
    /// Images per step. Ada-GVAE consumes `batch / 2` pairs.
    pub batch: usize,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Number of factors that differ inside a weak-supervision pair.
    pub k: usize,
    pub latent: usize,
    /// Encoder hidden widths; `None` picks the input kind's default.
    pub hidden: Option<Vec<usize>>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl TrainConfig {
    /// 30k steps with the 50k/400k warm-up ratio preserved.
    pub fn desk() -> Self {
        Self {
            beta: 1.0,
            steps: 30_000,
            batch: 64,
            warmup_steps: 3_750,
            adam: AdamConfig::default(),
            seed: 0,
            k: 1,
            latent: 10,
            hidden: None,
        }
    }

    pub fn paper() -> Self {
        Self {
            steps: 400_000,
            warmup_steps: 50_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("steps", self.steps),
            ("batch", self.batch),
            ("k", self.k),
            ("latent", self.latent),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid(format!("train.{name} must be positive")));
        }
        if !(self.beta > 0.0) {
            return Err(Error::invalid("train.beta must be positive"));
        }
        if self.warmup_steps > self.steps {
            return Err(Error::invalid(format!(
                "train.warmup_steps {} exceeds train.steps {}",
                self.warmup_steps, self.steps
            )));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid("train.adam.lr must be positive"));
        }
        Ok(())
    }

    /// Linear deterministic warm-up: `beta * min(1, step / warmup_steps)`.
    pub fn beta_at(&self, step: usize) -> f64 {
        if self.warmup_steps == 0 {
            self.beta
        } else {
            self.beta * (step as f64 / self.warmup_steps as f64).min(1.0)
        }
    }

    pub fn arch(&self, input_dim: usize, kind: super::InputKind) -> VaeArch {
        let arch = VaeArch::new(input_dim, kind).with_latent(self.latent);
        match &self.hidden {
            Some(h) => arch.with_hidden(h.clone()),
            None => arch,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    Beta,
    Ada,
}

impl std::str::FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "beta" => Ok(Objective::Beta),
            "ada" => Ok(Objective::Ada),
            other => Err(Error::invalid(format!("unknown objective `{other}` (beta|ada)"))),
        }
    }
}

/// Maps grid tuples to dataset rows so weak-supervision pairs can be drawn.
#[derive(Debug, Clone)]
pub struct PairSource {
    space: FactorSpace,
    rows: HashMap<usize, usize>,
}

impl PairSource {
    /// `tuples[i]` annotates dataset row `i`; the grid must be fully covered.
    pub fn new(space: FactorSpace, tuples: &[FactorTuple]) -> Result<Self> {
        let mut rows = HashMap::with_capacity(tuples.len());
        for (row, t) in tuples.iter().enumerate() {
            rows.insert(space.flat_index(t)?, row);
        }
        if rows.len() != space.grid_size() {
            return Err(Error::invalid(format!(
                "pair source covers {} of {} grid points",
                rows.len(),
                space.grid_size()
            )));
        }
        Ok(Self { space, rows })
    }

    pub fn space(&self) -> &FactorSpace {
        &self.space
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, k: usize) -> Result<(usize, usize)> {
        let pair = sample_pair(&self.space, rng, k)?;
        let row = |t: &FactorTuple| self.rows[&self.space.flat_index(t).expect("sampled inside grid")];
        Ok((row(&pair.first), row(&pair.second)))
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TrainData<'a> {
    Samples(ArrayView2<'a, f32>),
    Pairs {
        data: ArrayView2<'a, f32>,
        source: &'a PairSource,
    },
}

impl<'a> TrainData<'a> {
    fn data(&self) -> ArrayView2<'a, f32> {
        match *self {
            TrainData::Samples(d) => d,
            TrainData::Pairs { data, .. } => data,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Loss of every optimizer step.
    pub losses: Vec<f32>,
}

impl TrainLog {
    /// Mean loss over consecutive non-overlapping windows.
    pub fn window_means(&self, window: usize) -> Vec<f64> {
        self.losses
            .chunks_exact(window.max(1))
            .map(|w| w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64)
            .collect()
    }
}

fn noise(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f32> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Cycles through shuffled epochs of row indices.
struct Shuffler {
    order: Vec<usize>,
    cursor: usize,
}

impl Shuffler {
    fn new(n: usize) -> Self {
        Self {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next_batch(&mut self, rng: &mut ChaCha8Rng, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            let take = (size - out.len()).min(self.order.len() - self.cursor);
            out.extend_from_slice(&self.order[self.cursor..self.cursor + take]);
            self.cursor += take;
        }
        out
    }
}

/// Trains a fresh model from `config.seed`. One RNG stream drives
/// initialization, batch selection, pair sampling and reparameterization noise.
pub fn train(
    config: &TrainConfig,
    kind: super::InputKind,
    data: TrainData<'_>,
    objective: Objective,
) -> Result<(VaeModel, TrainLog)> {
    config.validate()?;
    let x = data.data();
    if x.nrows() == 0 {
        return Err(Error::invalid("empty training set"));
    }
    let arch = config.arch(x.ncols(), kind);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model: VaeModel = Vae::init(arch, config.beta, config.seed, &mut rng)?;
    let mut adam = Adam::for_params(config.adam, &model.params());
    let mut shuffler = Shuffler::new(x.nrows());
    let latent = model.latent();
    let mut log = TrainLog {
        losses: Vec::with_capacity(config.steps),
    };

    for step in 0..config.steps {
        let beta_eff = config.beta_at(step);
        let result = match (objective, data) {
            (Objective::Beta, _) => {
                let idx = shuffler.next_batch(&mut rng, config.batch);
                let batch = x.select(Axis(0), &idx);
                let eps = noise(&mut rng, idx.len(), latent);
                model.elbo_loss(batch.view(), beta_eff, eps.view())
            }
            (Objective::Ada, TrainData::Pairs { source, .. }) => {
                let pairs = (config.batch / 2).max(1);
                let mut first = Vec::with_capacity(pairs);
                let mut second = Vec::with_capacity(pairs);
                for _ in 0..pairs {
                    let (a, b) = source.sample(&mut rng, config.k)?;
                    first.push(a);
                    second.push(b);
                }
                let x1 = x.select(Axis(0), &first);
                let x2 = x.select(Axis(0), &second);
                let e1 = noise(&mut rng, pairs, latent);
                let e2 = noise(&mut rng, pairs, latent);
                model.adagvae_loss(x1.view(), x2.view(), beta_eff, e1.view(), e2.view(), Sharing::Adaptive)
            }
            (Objective::Ada, TrainData::Samples(_)) => {
                return Err(Error::invalid("Ada-GVAE training needs paired data"));
            }
        };
        let (loss, grads) = result.map_err(|e| match e {
            Error::Diverged { param_norm, .. } => Error::Diverged { step, param_norm },
            other => other,
        })?;
        adam.update(model.params_mut(), &grads.slices());
        log.losses.push(loss.total as f32);
    }
    if !model.is_finite() {
        return Err(Error::Diverged {
            step: config.steps,
            param_norm: model.param_norm(),
        });
    }
    Ok((model, log))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// beta-VAE finetuning of every parameter at the model's own beta, no
/// warm-up, fresh optimizer state.
pub fn finetune(model: &VaeModel, data: ArrayView2<'_, f32>, config: &FinetuneConfig) -> Result<(VaeModel, TrainLog)> {
    if data.ncols() != model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim(),
            actual: data.ncols(),
        });
    }
    if config.batch == 0 {
        return Err(Error::invalid("finetune.batch must be positive"));
    }
    let mut tuned = model.clone();
    let mut log = TrainLog::default();
    if config.epochs == 0 || data.nrows() == 0 {
        return Ok((tuned, log));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::for_params(config.adam, &tuned.params());
    let mut order: Vec<usize> = (0..data.nrows()).collect();
    let latent = tuned.latent();
    let mut step = 0;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(config.batch) {
            let batch = data.select(Axis(0), idx);
            let eps = noise(&mut rng, idx.len(), latent);
            let (loss, grads) = tuned
                .elbo_loss(batch.view(), tuned.beta, eps.view())
                .map_err(|e| match e {
                    Error::Diverged { param_norm, .. } => Error::Diverged { step, param_norm },
                    other => other,
                })?;
            adam.update(tuned.params_mut(), &grads.slices());
            log.losses.push(loss.total as f32);
            step += 1;
        }
    }
    Ok((tuned, log))
}
