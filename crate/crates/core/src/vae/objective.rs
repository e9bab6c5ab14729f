//! beta-VAE and Ada-GVAE losses with analytic gradients.
//!
//! Both objectives share one forward/backward routine. Ada-GVAE stacks the two
//! elements of each pair into a single batch (`x1` rows first, then `x2`),
//! replaces the posteriors on the dimensions inferred as shared by their
//! average, and backpropagates through that average. The choice of shared
//! dimensions is piecewise constant and carries no gradient.

use ndarray::{concatenate, s, Array2, ArrayView2, Axis, Zip};

use super::{InputKind, Vae, LOGVAR_CLAMP};
use crate::nn::{grad_slices, DenseGrad, Real};
use crate::{Error, Result};

/// How Ada-GVAE decides which latent dimensions a pair shares.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sharing {
    /// Threshold halfway between the smallest and largest divergence.
    Adaptive,
    /// The `k` most divergent dimensions are individual, the rest shared.
    KnownK(usize),
    /// Every dimension is shared.
    All,
}

/// Per-sample averages over the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VaeGrads<T> {
    pub encoder: Vec<DenseGrad<T>>,
    pub decoder: Vec<DenseGrad<T>>,
}

impl<T> VaeGrads<T> {
    /// Gradient slices aligned with [`Vae::params`].
    pub fn slices(&self) -> Vec<&[T]> {
        let mut g = grad_slices(&self.encoder);
        g.extend(grad_slices(&self.decoder));
        g
    }
}

/// `0.5 * (KL(q1 || q2) + KL(q2 || q1))` for univariate Gaussians given variances.
pub fn symmetric_kl(mu1: f64, var1: f64, mu2: f64, var2: f64) -> f64 {
    let d2 = (mu1 - mu2) * (mu1 - mu2);
    0.25 * ((var1 + d2) / var2 + (var2 + d2) / var1 - 2.0)
}

/// Marks the latent dimensions a pair shares, given per-dimension divergences.
///
/// With the adaptive rule, a dimension is shared when its divergence is below
/// `0.5 * (min + max)`. When every divergence is equal all dimensions are
/// shared except the first (the lowest-index argmax).
pub fn shared_dims(delta: &[f64], rule: Sharing) -> Vec<bool> {
    match rule {
        Sharing::All => vec![true; delta.len()],
        Sharing::Adaptive => {
            let min = delta.iter().copied().fold(f64::INFINITY, f64::min);
            let max = delta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            if min == max {
                (0..delta.len()).map(|j| j != 0).collect()
            } else {
                let tau = 0.5 * (min + max);
                delta.iter().map(|&d| d < tau).collect()
            }
        }
        Sharing::KnownK(k) => {
            let mut order: Vec<usize> = (0..delta.len()).collect();
            order.sort_by(|&a, &b| delta[b].total_cmp(&delta[a]).then(a.cmp(&b)));
            let mut shared = vec![true; delta.len()];
            for &j in order.iter().take(k) {
                shared[j] = false;
            }
            shared
        }
    }
}

impl<T: Real> Vae<T> {
    /// Negative ELBO with KL weight `beta_eff`, reparameterized with noise `eps`.
    pub fn elbo_loss(&self, x: ArrayView2<T>, beta_eff: f64, eps: ArrayView2<T>) -> Result<(LossBreakdown, VaeGrads<T>)> {
        self.objective(x, eps, beta_eff, None)
    }

    /// Ada-GVAE loss over pairs `(x1[i], x2[i])`; `eps1`/`eps2` are the
    /// reparameterization noise of each element.
    pub fn adagvae_loss<'a>(
        &self,
        x1: ArrayView2<'a, T>,
        x2: ArrayView2<'a, T>,
        beta_eff: f64,
        eps1: ArrayView2<'a, T>,
        eps2: ArrayView2<'a, T>,
        sharing: Sharing,
    ) -> Result<(LossBreakdown, VaeGrads<T>)> {
        if x1.dim() != x2.dim() || eps1.dim() != eps2.dim() {
            return Err(Error::invalid("pair halves must have equal shapes"));
        }
        let x = concatenate(Axis(0), &[x1, x2]).map_err(|e| Error::invalid(e.to_string()))?;
        let eps = concatenate(Axis(0), &[eps1, eps2]).map_err(|e| Error::invalid(e.to_string()))?;
        self.objective(x.view(), eps.view(), beta_eff, Some(sharing))
    }

    /// Shared-dimension masks the adaptive rule would pick for each pair.
    pub fn pair_sharing(&self, x1: ArrayView2<T>, x2: ArrayView2<T>, sharing: Sharing) -> Result<Vec<Vec<bool>>> {
        let (m1, v1) = self.encode(x1)?;
        let (m2, v2) = self.encode(x2)?;
        Ok((0..m1.nrows())
            .map(|i| {
                let delta: Vec<f64> = (0..self.latent())
                    .map(|j| symmetric_kl(m1[[i, j]].f64(), v1[[i, j]].f64(), m2[[i, j]].f64(), v2[[i, j]].f64()))
                    .collect();
                shared_dims(&delta, sharing)
            })
            .collect())
    }

    fn objective(
        &self,
        x: ArrayView2<T>,
        eps: ArrayView2<T>,
        beta_eff: f64,
        pairing: Option<Sharing>,
    ) -> Result<(LossBreakdown, VaeGrads<T>)> {
        let l = self.latent();
        let n = x.nrows();
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                actual: x.ncols(),
            });
        }
        if eps.dim() != (n, l) {
            return Err(Error::invalid(format!(
                "noise shape {:?} does not match batch ({n}, {l})",
                eps.dim()
            )));
        }
        if n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let (enc_out, enc_cache) = self.encoder.forward_cached(x);
        let bound = T::of(LOGVAR_CLAMP);
        let lv_raw = enc_out.slice(s![.., l..]);
        let clamped = lv_raw.mapv(|v| v < -bound || v > bound);
        let (own_mu, own_lv) = self.split_posterior(&enc_out);

        // Posterior actually used for sampling and KL.
        let (mut mu, mut lv) = (own_mu.clone(), own_lv.clone());
        let mut masks: Vec<Vec<bool>> = Vec::new();
        let half = n / 2;
        if let Some(rule) = pairing {
            debug_assert_eq!(n % 2, 0);
            for i in 0..half {
                let delta: Vec<f64> = (0..l)
                    .map(|j| {
                        symmetric_kl(
                            own_mu[[i, j]].f64(),
                            own_lv[[i, j]].f64().exp(),
                            own_mu[[i + half, j]].f64(),
                            own_lv[[i + half, j]].f64().exp(),
                        )
                    })
                    .collect();
                let shared = shared_dims(&delta, rule);
                for j in (0..l).filter(|&j| shared[j]) {
                    let m = (own_mu[[i, j]] + own_mu[[i + half, j]]) * T::of(0.5);
                    let v = (own_lv[[i, j]].exp() + own_lv[[i + half, j]].exp()) * T::of(0.5);
                    mu[[i, j]] = m;
                    mu[[i + half, j]] = m;
                    lv[[i, j]] = v.ln();
                    lv[[i + half, j]] = v.ln();
                }
                masks.push(shared);
            }
        }

        let std = lv.mapv(|v| (v * T::of(0.5)).exp());
        let z = &mu + &(&std * &eps);
        let (dec_out, dec_cache) = self.decoder.forward_cached(z.view());

        let inv_n = T::of(1.0 / n as f64);
        let (recon, d_out) = reconstruction(self.arch.input_kind, &dec_out, x, inv_n);
        let kl_sum: f64 = Zip::from(&mu)
            .and(&lv)
            .fold(0.0, |acc, &m, &v| acc + 0.5 * (m * m + v.exp() - v - T::one()).f64());
        let recon_mean = recon / n as f64;
        let kl_mean = kl_sum / n as f64;
        let total = recon_mean + beta_eff * kl_mean;
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: 0,
                param_norm: self.param_norm(),
            });
        }

        let (dec_grads, dz) = self.decoder.backward(&dec_cache, d_out, true);
        let dz = dz.expect("requested input gradient");
        let beta = T::of(beta_eff);
        let half_t = T::of(0.5);
        // gradients w.r.t. the posterior used for sampling
        let mut dmu = &dz + &mu.mapv(|m| beta * m * inv_n);
        let mut dlv = Array2::zeros((n, l));
        Zip::from(&mut dlv)
            .and(&dz)
            .and(&eps)
            .and(&std)
            .and(&lv)
            .for_each(|d, &g, &e, &s, &v| {
                *d = g * e * half_t * s + beta * half_t * (v.exp() - T::one()) * inv_n;
            });

        // route gradients of averaged dimensions back to both elements
        for (i, shared) in masks.iter().enumerate() {
            for j in (0..l).filter(|&j| shared[j]) {
                let gm = (dmu[[i, j]] + dmu[[i + half, j]]) * half_t;
                dmu[[i, j]] = gm;
                dmu[[i + half, j]] = gm;
                let gv = dlv[[i, j]] + dlv[[i + half, j]];
                let (v1, v2) = (own_lv[[i, j]].exp(), own_lv[[i + half, j]].exp());
                let w1 = v1 / (v1 + v2);
                dlv[[i, j]] = gv * w1;
                dlv[[i + half, j]] = gv * (T::one() - w1);
            }
        }
        Zip::from(&mut dlv).and(&clamped).for_each(|d, &c| {
            if c {
                *d = T::zero();
            }
        });
        let d_enc = concatenate(Axis(1), &[dmu.view(), dlv.view()]).expect("matching rows");
        let (enc_grads, _) = self.encoder.backward(&enc_cache, d_enc, false);

        Ok((
            LossBreakdown {
                total,
                recon: recon_mean,
                kl: kl_mean,
            },
            VaeGrads {
                encoder: enc_grads,
                decoder: dec_grads,
            },
        ))
    }
}

/// Summed reconstruction loss and its gradient w.r.t. the decoder output, scaled by `scale`.
fn reconstruction<T: Real>(kind: InputKind, out: &Array2<T>, x: ArrayView2<T>, scale: T) -> (f64, Array2<T>) {
    let mut grad = Array2::zeros(out.raw_dim());
    let mut total = 0.0;
    match kind {
        InputKind::Embedding => {
            for ((g, &o), &t) in grad.iter_mut().zip(out.iter()).zip(x.iter()) {
                let d = o - t;
                total += 0.5 * (d * d).f64();
                *g = d * scale;
            }
        }
        InputKind::Image => {
            // logits l: loss = softplus(l) - x l, d/dl = sigmoid(l) - x
            let out = out.as_standard_layout();
            let x = x.as_standard_layout();
            total = T::bernoulli_logits(
                out.as_slice().expect("standard layout"),
                x.as_slice().expect("standard layout"),
                scale,
                grad.as_slice_mut().expect("fresh array"),
            );
        }
    }
    (total, grad)
}
