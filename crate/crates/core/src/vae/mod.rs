//! MLP Gaussian VAE: beta-VAE and Ada-GVAE objectives, training, finetuning,
//! checkpoints and the seed x beta model ensemble.

mod checkpoint;
mod ensemble;
mod objective;
mod train;

use ndarray::{s, Array2, ArrayView2, Axis};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nn::{Activation, Mlp, Real};
use crate::{Error, Result};

pub use checkpoint::{load_model, save_model};
pub use ensemble::{EnsembleMember, ModelEnsemble, PROTOCOL_BETAS, PROTOCOL_SEEDS};
pub use objective::{shared_dims, symmetric_kl, LossBreakdown, Sharing, VaeGrads};
pub use train::{finetune, train, FinetuneConfig, Objective, PairSource, TrainConfig, TrainData, TrainLog};

/// Bounds applied to the encoder's log-variance output.
pub const LOGVAR_CLAMP: f64 = 20.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputKind {
    /// Real-valued feature vectors; Gaussian reconstruction `0.5 * |x - x_hat|^2`.
    Embedding,
    /// Pixels in `[0, 1]`; Bernoulli cross-entropy on decoder logits.
    Image,
}

impl std::fmt::Display for InputKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            InputKind::Embedding => "embedding",
            InputKind::Image => "image",
        })
    }
}

impl std::str::FromStr for InputKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(InputKind::Embedding),
            "image" => Ok(InputKind::Image),
            other => Err(Error::invalid(format!("unknown input kind `{other}`"))),
        }
    }
}

impl InputKind {
    /// Default encoder hidden widths (decoder mirrors them).
    pub fn default_hidden(self) -> Vec<usize> {
        match self {
            InputKind::Embedding => vec![512, 256],
            InputKind::Image => vec![1024, 512],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeArch {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
    pub input_kind: InputKind,
    pub activation: Activation,
}

impl VaeArch {
    pub fn new(input_dim: usize, input_kind: InputKind) -> Self {
        Self {
            input_dim,
            hidden: input_kind.default_hidden(),
            latent: 10,
            input_kind,
            activation: Activation::LeakyRelu(0.01),
        }
    }

    pub fn with_hidden(mut self, hidden: Vec<usize>) -> Self {
        self.hidden = hidden;
        self
    }

    pub fn with_latent(mut self, latent: usize) -> Self {
        self.latent = latent;
        self
    }

    fn check(&self) -> Result<()> {
        if self.input_dim == 0 || self.latent == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!("degenerate architecture {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vae<T> {
    pub encoder: Mlp<T>,
    pub decoder: Mlp<T>,
    pub arch: VaeArch,
    pub beta: f64,
    pub seed: u64,
}

/// Single-precision model used for training and checkpoints.
pub type VaeModel = Vae<f32>;

impl<T: Real> Vae<T> {
    pub fn init<R: Rng + ?Sized>(arch: VaeArch, beta: f64, seed: u64, rng: &mut R) -> Result<Self> {
        arch.check()?;
        let mut enc = vec![arch.input_dim];
        enc.extend(&arch.hidden);
        enc.push(2 * arch.latent);
        let mut dec = vec![arch.latent];
        dec.extend(arch.hidden.iter().rev());
        dec.push(arch.input_dim);
        let encoder = Mlp::init(&enc, arch.activation, rng);
        let decoder = Mlp::init(&dec, arch.activation, rng);
        Ok(Self {
            encoder,
            decoder,
            arch,
            beta,
            seed,
        })
    }

    pub fn latent(&self) -> usize {
        self.arch.latent
    }

    pub fn input_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// Parameter slices: encoder layers then decoder layers.
    pub fn params(&self) -> Vec<&[T]> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    pub fn param_norm(&self) -> f64 {
        self.params()
            .iter()
            .flat_map(|p| p.iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn split_posterior(&self, enc_out: &Array2<T>) -> (Array2<T>, Array2<T>) {
        let l = self.latent();
        let mu = enc_out.slice(s![.., ..l]).to_owned();
        let bound = T::of(LOGVAR_CLAMP);
        let logvar = enc_out.slice(s![.., l..]).mapv(|v| v.max(-bound).min(bound));
        (mu, logvar)
    }

    /// Posterior mean and variance for a batch.
    pub fn encode(&self, x: ArrayView2<T>) -> Result<(Array2<T>, Array2<T>)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        let (mu, logvar) = self.split_posterior(&self.encoder.forward(x));
        Ok((mu, logvar.mapv(Float::exp)))
    }

    /// Posterior means in `f64`, computed in chunks.
    pub fn encode_mean(&self, x: ArrayView2<T>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), self.latent()));
        for (chunk, mut dst) in x
            .axis_chunks_iter(Axis(0), 256)
            .zip(out.axis_chunks_iter_mut(Axis(0), 256))
        {
            let (mu, _) = self.encode(chunk)?;
            dst.assign(&mu.mapv(Real::f64));
        }
        Ok(out)
    }

    /// Decoder output: reconstruction for embeddings, Bernoulli means for images.
    pub fn decode(&self, z: ArrayView2<T>) -> Array2<T> {
        let out = self.decoder.forward(z);
        match self.arch.input_kind {
            InputKind::Embedding => out,
            InputKind::Image => out.mapv(|l| T::one() / (T::one() + (-l).exp())),
        }
    }
}

/// Per-dimension `KL(N(mu, exp(logvar)) || N(0, 1))`, log-variance clamped to `[-20, 20]`.
pub fn gauss_kl(mu: &[f64], logvar: &[f64]) -> Vec<f64> {
    mu.iter()
        .zip(logvar)
        .map(|(&m, &lv)| {
            let lv = lv.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
            0.5 * (m * m + lv.exp() - lv - 1.0)
        })
        .collect()
}
