//! Minimal dense-network machinery with hand-derived gradients.
//!
//! Layers store weights as `in x out` so a batch `X (B x in)` maps to
//! `X W + b`. Everything is generic over [`Real`] so gradient checks can run
//! in `f64` while training runs in `f32`.

use ndarray::{Array1, Array2, ArrayView2, Axis, NdFloat, Zip};
use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub trait Real: NdFloat + Default {
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
    /// `(softplus(l), sigmoid(l))`, the Bernoulli-logit loss pieces.
    fn softplus_sigmoid(l: Self) -> (Self, Self);

    /// Summed Bernoulli-logit loss `softplus(o) - t o`; writes
    /// `(sigmoid(o) - t) * scale` into `g`.
    fn bernoulli_logits(o: &[Self], t: &[Self], scale: Self, g: &mut [Self]) -> f64 {
        let mut total = 0.0;
        for ((g, &o), &t) in g.iter_mut().zip(o).zip(t) {
            let (softplus, sig) = Self::softplus_sigmoid(o);
            total += (softplus - t * o).f64();
            *g = (sig - t) * scale;
        }
        total
    }
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
    fn softplus_sigmoid(l: f32) -> (f32, f32) {
        fast::softplus_sigmoid(l)
    }
    fn bernoulli_logits(o: &[f32], t: &[f32], scale: f32, g: &mut [f32]) -> f64 {
        fast::bernoulli_logits(o, t, scale, g)
    }
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
    fn softplus_sigmoid(l: f64) -> (f64, f64) {
        let e = (-l.abs()).exp();
        let num = if l >= 0.0 { 1.0 } else { e };
        (l.max(0.0) + e.ln_1p(), num / (1.0 + e))
    }
}

/// Branch-free single-precision `exp` and `ln_1p` on restricted domains, so
/// per-pixel loops vectorize. Polynomials are the Cephes `expf`/`logf` ones.
pub mod fast {
    const MAGIC: f32 = 12_582_912.0; // 1.5 * 2^23: adding it rounds to an integer

    #[inline(always)]
    fn select(c: bool, a: f32, b: f32) -> f32 {
        if c {
            a
        } else {
            b
        }
    }

    /// `exp(x)` for `x <= 0`; flushes to zero below -87.
    #[inline(always)]
    pub fn exp_nonpositive(x: f32) -> f32 {
        let under = x < -87.0;
        let x = select(under, -87.0, x);
        let t = x * std::f32::consts::LOG2_E + MAGIC;
        let n = t - MAGIC;
        let k = t.to_bits() as i32 - MAGIC.to_bits() as i32;
        let r = x - n * 0.693_359_4 + n * 2.121_944_4e-4;
        let mut p = 1.987_569_1e-4f32;
        p = p * r + 1.398_199_9e-3;
        p = p * r + 8.333_452e-3;
        p = p * r + 4.166_579_6e-2;
        p = p * r + 1.666_666_5e-1;
        p = p * r + 5.000_000_1e-1;
        let y = p * r * r + r + 1.0;
        select(under, 0.0, y * f32::from_bits(((k + 127) << 23) as u32))
    }

    /// `ln(1 + e)` for `e` in `[0, 1]`.
    #[inline(always)]
    pub fn ln_1p_unit(e: f32) -> f32 {
        // 1 + e = m * 2^k with m in [sqrt(1/2), sqrt(2)); x = m - 1 without rounding 1 + e
        let high = e > std::f32::consts::SQRT_2 - 1.0;
        let x = select(high, (e - 1.0) * 0.5, e);
        let k = select(high, 1.0, 0.0);
        let z = x * x;
        let mut y = 7.037_683_6e-2f32;
        y = y * x - 1.151_461e-1;
        y = y * x + 1.167_699_9e-1;
        y = y * x - 1.242_014_1e-1;
        y = y * x + 1.424_932_3e-1;
        y = y * x - 1.666_805_8e-1;
        y = y * x + 2.000_071_4e-1;
        y = y * x - 2.499_999_4e-1;
        y = y * x + 3.333_333_1e-1;
        y = y * x * z;
        y -= 2.121_944_4e-4 * k;
        y -= 0.5 * z;
        x + y + 0.693_359_4 * k
    }

    /// `(softplus(l), sigmoid(l))`.
    #[inline(always)]
    pub fn softplus_sigmoid(l: f32) -> (f32, f32) {
        let e = exp_nonpositive(-l.abs());
        let softplus = select(l > 0.0, l, 0.0) + ln_1p_unit(e);
        (softplus, select(l >= 0.0, 1.0, e) / (1.0 + e))
    }

    #[inline(always)]
    fn bernoulli_body(o: &[f32], t: &[f32], scale: f32, g: &mut [f32]) -> f64 {
        const LANES: usize = 8;
        // f32 partial sums are flushed into f64 once per block
        const BLOCK: usize = 1024;
        let mut total = 0.0;
        for ((o, t), g) in o.chunks(BLOCK).zip(t.chunks(BLOCK)).zip(g.chunks_mut(BLOCK)) {
            let mut acc = [0.0f32; LANES];
            let body = o.len() / LANES * LANES;
            let lanes = o[..body].chunks_exact(LANES).zip(t[..body].chunks_exact(LANES));
            for ((o, t), g) in lanes.zip(g[..body].chunks_exact_mut(LANES)) {
                for i in 0..LANES {
                    let (softplus, sig) = softplus_sigmoid(o[i]);
                    acc[i] += softplus - t[i] * o[i];
                    g[i] = (sig - t[i]) * scale;
                }
            }
            for i in body..o.len() {
                let (softplus, sig) = softplus_sigmoid(o[i]);
                acc[0] += softplus - t[i] * o[i];
                g[i] = (sig - t[i]) * scale;
            }
            total += acc.iter().map(|&v| f64::from(v)).sum::<f64>();
        }
        total
    }

    #[cfg(target_arch = "x86_64")]
    #[target_feature(enable = "avx2,fma")]
    unsafe fn bernoulli_avx2(o: &[f32], t: &[f32], scale: f32, g: &mut [f32]) -> f64 {
        bernoulli_body(o, t, scale, g)
    }

    /// Summed `softplus(o) - t o` with gradient `(sigmoid(o) - t) * scale` written to `g`.
    pub fn bernoulli_logits(o: &[f32], t: &[f32], scale: f32, g: &mut [f32]) -> f64 {
        assert!(o.len() == t.len() && o.len() == g.len(), "slice lengths differ");
        #[cfg(target_arch = "x86_64")]
        if is_x86_feature_detected!("avx2") && is_x86_feature_detected!("fma") {
            // SAFETY: the required CPU features were detected at runtime.
            return unsafe { bernoulli_avx2(o, t, scale, g) };
        }
        bernoulli_body(o, t, scale, g)
    }
}

/// Hidden-layer nonlinearity. `Relu` is `LeakyRelu` with slope zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn slope(self) -> f64 {
        match self {
            Activation::Relu => 0.0,
            Activation::LeakyRelu(s) => s,
        }
    }

    fn apply<T: Real>(self, x: &mut Array2<T>) {
        let s = T::of(self.slope());
        x.mapv_inplace(|v| if v > T::zero() { v } else { v * s });
    }

    fn backprop<T: Real>(self, pre: &Array2<T>, grad: &mut Array2<T>) {
        let s = T::of(self.slope());
        Zip::from(grad).and(pre).for_each(|g, &p| {
            if p <= T::zero() {
                *g = *g * s;
            }
        });
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrad<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Dense<T> {
    /// Glorot-uniform weights, zero bias.
    pub fn init<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((inputs, outputs), || {
            T::of(rng.random_range(-limit..limit))
        });
        Self {
            weight,
            bias: Array1::zeros(outputs),
        }
    }

    pub fn inputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        y += &self.bias;
        y
    }

    /// Parameter gradients and, when requested, the gradient w.r.t. the input.
    pub fn backward(&self, x: ArrayView2<T>, dy: &Array2<T>, need_dx: bool) -> (DenseGrad<T>, Option<Array2<T>>) {
        let mut weight = x.t().dot(dy);
        if !weight.is_standard_layout() {
            weight = weight.as_standard_layout().into_owned();
        }
        let grad = DenseGrad {
            weight,
            bias: dy.sum_axis(Axis(0)),
        };
        let dx = need_dx.then(|| dy.dot(&self.weight.t()));
        (grad, dx)
    }
}

/// Layer inputs and hidden pre-activations recorded by a forward pass.
#[derive(Debug)]
pub struct MlpCache<T> {
    inputs: Vec<Array2<T>>,
    pre: Vec<Array2<T>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub layers: Vec<Dense<T>>,
    pub activation: Activation,
}

impl<T: Real> Mlp<T> {
    /// `sizes` lists every width including input and output.
    pub fn init<R: Rng + ?Sized>(sizes: &[usize], activation: Activation, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs an input and an output width");
        let layers = sizes.windows(2).map(|w| Dense::init(w[0], w[1], rng)).collect();
        Self { layers, activation }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].inputs()];
        s.extend(self.layers.iter().map(Dense::outputs));
        s
    }

    pub fn inputs(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn outputs(&self) -> usize {
        self.layers.last().expect("nonempty").outputs()
    }

    pub fn forward(&self, x: ArrayView2<T>) -> Array2<T> {
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            self.activation.apply(&mut h);
            h = layer.forward(h.view());
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<T>) -> (Array2<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len() - 1);
        inputs.push(x.to_owned());
        let mut h = self.layers[0].forward(x);
        for layer in &self.layers[1..] {
            pre.push(h.clone());
            self.activation.apply(&mut h);
            let out = layer.forward(h.view());
            inputs.push(h);
            h = out;
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(&self, cache: &MlpCache<T>, d_out: Array2<T>, need_dx: bool) -> (Vec<DenseGrad<T>>, Option<Array2<T>>) {
        let n = self.layers.len();
        let mut grads = Vec::with_capacity(n);
        let mut dy = d_out;
        for i in (0..n).rev() {
            let want_dx = i > 0 || need_dx;
            let (g, dx) = self.layers[i].backward(cache.inputs[i].view(), &dy, want_dx);
            grads.push(g);
            match dx {
                Some(mut dx) if i > 0 => {
                    self.activation.backprop(&cache.pre[i - 1], &mut dx);
                    dy = dx;
                }
                dx => {
                    grads.reverse();
                    return (grads, dx);
                }
            }
        }
        unreachable!("loop returns at the first layer")
    }

    /// Mutable parameter slices in a fixed order (per layer: weight, bias).
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weight.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn params(&self) -> Vec<&[T]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }
}

/// Gradient slices in the same order as [`Mlp::params_mut`].
pub fn grad_slices<T>(grads: &[DenseGrad<T>]) -> Vec<&[T]> {
    grads
        .iter()
        .flat_map(|g| {
            [
                g.weight.as_slice().expect("standard layout"),
                g.bias.as_slice().expect("standard layout"),
            ]
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig, shapes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_params(config: AdamConfig, params: &[&[T]]) -> Self {
        let shapes: Vec<usize> = params.iter().map(|p| p.len()).collect();
        Self::new(config, &shapes)
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn update(&mut self, params: Vec<&mut [T]>, grads: &[&[T]]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient count mismatch");
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
        let bc1 = 1.0 - c.beta1.powi(self.step);
        let bc2 = 1.0 - c.beta2.powi(self.step);
        // lr_t = lr * sqrt(1 - b2^t) / (1 - b1^t); eps scaled to match the uncorrected form
        let lr_t = T::of(c.lr * bc2.sqrt() / bc1);
        let eps = T::of(c.eps * bc2.sqrt());
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((p, &g), m), v) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + (T::one() - b1) * g;
                *v = b2 * *v + (T::one() - b2) * g * g;
                *p = *p - lr_t * *m / (Float::sqrt(*v) + eps);
            }
        }
    }
}
