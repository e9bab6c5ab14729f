//! Downstream classification over a model ensemble: encode with the latent
//! means, prune inactive dimensions on train statistics, then fit a GBT and an
//! MLP per model and aggregate test accuracy.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::metrics::{prune_inactive, PRUNE_THRESHOLD};
use crate::nn::{grad_slices, Activation, Adam, AdamConfig, Mlp};
use crate::stats::{mean, population_sd};
use crate::trees::{argmax, fit_gbt, GbtConfig};
use crate::vae::ModelEnsemble;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            lr: 1e-3,
            batch: 64,
            epochs: 100,
        }
    }
}

/// Softmax classifier on an MLP. The output layer starts at zero, so an
/// untrained classifier is uniform and predicts class 0.
pub fn mlp_classify(
    x_train: ArrayView2<f64>,
    y_train: &[usize],
    x_test: ArrayView2<f64>,
    y_test: &[usize],
    config: &MlpConfig,
    seed: u64,
) -> Result<f64> {
    check_xy(x_train, y_train)?;
    check_xy(x_test, y_test)?;
    if config.batch == 0 {
        return Err(Error::invalid("MLP batch must be positive"));
    }
    let classes = y_train.iter().chain(y_test).max().map_or(1, |m| m + 1);
    let mut sizes = vec![x_train.ncols()];
    sizes.extend(&config.hidden);
    sizes.push(classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net: Mlp<f32> = Mlp::init(&sizes, Activation::Relu, &mut rng);
    let last = net.layers.last_mut().expect("at least one layer");
    last.weight.fill(0.0);
    let mut adam = Adam::for_params(
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
        &net.params(),
    );
    let xtr = x_train.mapv(|v| v as f32);
    let mut order: Vec<usize> = (0..y_train.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch).enumerate() {
            let xb = xtr.select(Axis(0), chunk);
            let (logits, cache) = net.forward_cached(xb.view());
            let mut d = softmax(&logits);
            let scale = 1.0 / chunk.len() as f32;
            for (i, &row) in chunk.iter().enumerate() {
                d[[i, y_train[row]]] -= 1.0;
            }
            d.mapv_inplace(|v| v * scale);
            let (grads, _) = net.backward(&cache, d, false);
            let slices = grad_slices(&grads);
            if slices.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
                let norm = net.params().iter().flat_map(|p| p.iter()).map(|&v| f64::from(v).powi(2)).sum::<f64>();
                return Err(Error::Diverged {
                    step: epoch * order.len().div_ceil(config.batch) + b,
                    param_norm: norm.sqrt(),
                });
            }
            adam.update(net.params_mut(), &slices);
        }
    }
    let logits = net.forward(x_test.mapv(|v| v as f32).view());
    let correct = logits
        .rows()
        .into_iter()
        .zip(y_test)
        .filter(|(row, &y)| argmax(&row.iter().map(|&v| f64::from(v)).collect::<Vec<_>>()) == y)
        .count();
    Ok(correct as f64 / y_test.len() as f64)
}

fn softmax(logits: &Array2<f32>) -> Array2<f32> {
    let mut p = logits.clone();
    for mut row in p.rows_mut() {
        let m = row.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let s = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    p
}

fn check_xy(x: ArrayView2<f64>, y: &[usize]) -> Result<()> {
    if x.nrows() != y.len() || y.is_empty() {
        return Err(Error::invalid(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    Ok(())
}

/// Train/test features with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetData {
    pub x_train: Array2<f32>,
    pub y_train: Vec<usize>,
    pub x_test: Array2<f32>,
    pub y_test: Vec<usize>,
}

impl TargetData {
    pub fn validate(&self) -> Result<()> {
        check_xy(self.x_train.mapv(f64::from).view(), &self.y_train)?;
        check_xy(self.x_test.mapv(f64::from).view(), &self.y_test)?;
        if self.x_train.ncols() != self.x_test.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.x_train.ncols(),
                actual: self.x_test.ncols(),
            });
        }
        let seen: BTreeSet<usize> = self.y_train.iter().copied().collect();
        if let Some(c) = self.y_test.iter().find(|c| !seen.contains(c)) {
            return Err(Error::invalid(format!("class {c} appears in test but not in train")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub prune_threshold: f64,
    pub trees: GbtConfig,
    pub mlp: MlpConfig,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            prune_threshold: PRUNE_THRESHOLD,
            trees: GbtConfig::default(),
            mlp: MlpConfig::default(),
        }
    }
}

/// Accuracy over models. Per-model values are fractions; the mean and the
/// population SD are in percentage points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracySummary {
    pub per_model: Vec<f64>,
    pub mean_pct: f64,
    pub sd_pct: f64,
}

impl AccuracySummary {
    pub fn from_models(per_model: Vec<f64>) -> Self {
        let pct: Vec<f64> = per_model.iter().map(|a| 100.0 * a).collect();
        Self {
            mean_pct: mean(&pct),
            sd_pct: population_sd(&pct),
            per_model,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelResult {
    pub seed: u64,
    pub beta: f64,
    /// Latent dimensions surviving pruning.
    pub kept_dims: Vec<usize>,
    pub gbt: Option<f64>,
    pub mlp: Option<f64>,
    /// GBT importance over all latent dimensions (zero for pruned ones).
    pub importance: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub finetuned: bool,
    pub no_vae: bool,
    pub gbt: AccuracySummary,
    pub mlp: AccuracySummary,
    pub models: Vec<ModelResult>,
}

struct Scores {
    gbt: f64,
    mlp: f64,
    importance: Vec<f64>,
}

fn classify(xtr: ArrayView2<f64>, ytr: &[usize], xte: ArrayView2<f64>, yte: &[usize], settings: &EvalSettings, seed: u64) -> Result<Scores> {
    let gbt = fit_gbt(xtr, ytr, &GbtConfig { seed, ..settings.trees })?;
    Ok(Scores {
        gbt: gbt.accuracy(xte, yte)?,
        mlp: mlp_classify(xtr, ytr, xte, yte, &settings.mlp, seed)?,
        importance: gbt.importance(),
    })
}

fn summarize(models: Vec<ModelResult>, finetuned: bool, no_vae: bool) -> EvalReport {
    EvalReport {
        finetuned,
        no_vae,
        gbt: AccuracySummary::from_models(models.iter().filter_map(|m| m.gbt).collect()),
        mlp: AccuracySummary::from_models(models.iter().filter_map(|m| m.mlp).collect()),
        models,
    }
}

/// Runs the protocol for every ensemble member. `finetuned` is recorded in
/// the report; the caller passes the matching ensemble.
pub fn evaluate(ensemble: &ModelEnsemble, target: &TargetData, finetuned: bool, settings: &EvalSettings) -> Result<EvalReport> {
    target.validate()?;
    let train_rows: Vec<usize> = (0..target.y_train.len()).collect();
    let mut models = Vec::new();
    for m in &ensemble.members {
        let ztr = m.model.encode_mean(target.x_train.view())?;
        let zte = m.model.encode_mean(target.x_test.view())?;
        let latent = ztr.ncols();
        let mut result = ModelResult {
            seed: m.seed,
            beta: m.beta,
            kept_dims: Vec::new(),
            gbt: None,
            mlp: None,
            importance: vec![0.0; latent],
        };
        match prune_inactive(ztr.view(), &train_rows, settings.prune_threshold) {
            Err(e) => log::warn!("model seed {} beta {}: {e}; excluded", m.seed, m.beta),
            Ok((ptr, kept)) => {
                let pte = zte.select(Axis(1), &kept);
                let s = classify(ptr.view(), &target.y_train, pte.view(), &target.y_test, settings, m.seed)?;
                for (&j, &v) in kept.iter().zip(&s.importance) {
                    result.importance[j] = v;
                }
                result.kept_dims = kept;
                result.gbt = Some(s.gbt);
                result.mlp = Some(s.mlp);
            }
        }
        models.push(result);
    }
    Ok(summarize(models, finetuned, false))
}

/// The protocol on the raw features, once per classifier seed.
pub fn ablate_no_vae(target: &TargetData, seeds: &[u64], settings: &EvalSettings) -> Result<EvalReport> {
    target.validate()?;
    let xtr = target.x_train.mapv(f64::from);
    let xte = target.x_test.mapv(f64::from);
    let mut models = Vec::new();
    for &seed in seeds {
        let s = classify(xtr.view(), &target.y_train, xte.view(), &target.y_test, settings, seed)?;
        models.push(ModelResult {
            seed,
            beta: 0.0,
            kept_dims: (0..xtr.ncols()).collect(),
            gbt: Some(s.gbt),
            mlp: Some(s.mlp),
            importance: s.importance,
        });
    }
    Ok(summarize(models, false, true))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupImportance {
    pub label: String,
    pub mean: f64,
    pub sd: f64,
}

/// Sums each model's importance within dimension labels, then takes the mean
/// and population SD across models. `labels[m][j]` names dimension `j` of
/// model `m`.
pub fn grouped_importance(importance: &[Vec<f64>], labels: &[Vec<String>]) -> Result<Vec<GroupImportance>> {
    if importance.len() != labels.len() {
        return Err(Error::invalid(format!("{} importance vectors but {} label sets", importance.len(), labels.len())));
    }
    let names: BTreeSet<&str> = labels.iter().flatten().map(String::as_str).collect();
    let mut per_model: Vec<BTreeMap<&str, f64>> = Vec::new();
    for (imp, lab) in importance.iter().zip(labels) {
        if imp.len() != lab.len() {
            return Err(Error::DimensionMismatch {
                expected: lab.len(),
                actual: imp.len(),
            });
        }
        let mut groups: BTreeMap<&str, f64> = names.iter().map(|&n| (n, 0.0)).collect();
        for (v, l) in imp.iter().zip(lab) {
            *groups.get_mut(l.as_str()).expect("label collected above") += v;
        }
        per_model.push(groups);
    }
    Ok(names
        .into_iter()
        .map(|n| {
            let vals: Vec<f64> = per_model.iter().map(|g| g[n]).collect();
            GroupImportance {
                label: n.to_string(),
                mean: mean(&vals),
                sd: population_sd(&vals),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vae::{EnsembleMember, InputKind, Vae, VaeArch};
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn blobs(n: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<usize> = (0..n).map(|i| i % 2).collect();
        let x = Array2::from_shape_fn((n, 2), |(i, _)| {
            let c = if y[i] == 0 { -2.0 } else { 2.0 };
            c + 0.5 * rng.sample::<f64, _>(StandardNormal)
        });
        (x, y)
    }

    #[test]
    fn mlp_separates_blobs() {
        let (xtr, ytr) = blobs(200, 1);
        let (xte, yte) = blobs(200, 2);
        let c = MlpConfig { epochs: 20, ..Default::default() };
        let a = mlp_classify(xtr.view(), &ytr, xte.view(), &yte, &c, 0).unwrap();
        assert!(a >= 0.99, "{a}");
        assert_eq!(a, mlp_classify(xtr.view(), &ytr, xte.view(), &yte, &c, 0).unwrap());
        let untrained = MlpConfig { epochs: 0, ..Default::default() };
        let a0 = mlp_classify(xtr.view(), &ytr, xte.view(), &yte, &untrained, 0).unwrap();
        assert!((a0 - 0.5).abs() <= 0.05);
    }

    fn tiny_target(seed: u64) -> TargetData {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let x = Array2::from_shape_fn((n, 6), |(i, j)| (y[i] as f32) * if j < 2 { 1.0 } else { 0.0 } + 0.3 * rng.sample::<f32, _>(StandardNormal));
            (x, y)
        };
        let (x_train, y_train) = make(90, &mut rng);
        let (x_test, y_test) = make(45, &mut rng);
        TargetData { x_train, y_train, x_test, y_test }
    }

    fn small_settings() -> EvalSettings {
        EvalSettings {
            trees: GbtConfig { rounds: 10, ..Default::default() },
            mlp: MlpConfig { hidden: vec![8], epochs: 5, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn report_aggregates_population_sd_and_is_reproducible() {
        let members = (0..4)
            .map(|s| {
                let mut rng = ChaCha8Rng::seed_from_u64(s);
                let arch = VaeArch::new(6, InputKind::Embedding).with_hidden(vec![8]).with_latent(3);
                EnsembleMember { seed: s, beta: 1.0, model: Vae::init(arch, 1.0, s, &mut rng).unwrap() }
            })
            .collect();
        let e = ModelEnsemble::new(members).unwrap();
        let t = tiny_target(0);
        let r = evaluate(&e, &t, true, &small_settings()).unwrap();
        assert_eq!(r, evaluate(&e, &t, true, &small_settings()).unwrap());
        assert_eq!(r.models.len(), 4);
        let pct: Vec<f64> = r.gbt.per_model.iter().map(|a| a * 100.0).collect();
        let m = pct.iter().sum::<f64>() / 4.0;
        let sd = (pct.iter().map(|v| (v - m).powi(2)).sum::<f64>() / 4.0).sqrt();
        assert!((r.gbt.mean_pct - m).abs() < 1e-9 && (r.gbt.sd_pct - sd).abs() < 1e-9);
        let lo = pct.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = pct.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        assert!(lo <= r.gbt.mean_pct && r.gbt.mean_pct <= hi);
    }

    #[test]
    fn absent_train_class_is_rejected() {
        let mut t = tiny_target(1);
        t.y_test[0] = 7;
        assert!(ablate_no_vae(&t, &[0], &small_settings()).is_err());
    }

    #[test]
    fn raw_features_are_deterministic() {
        let t = tiny_target(2);
        let a = ablate_no_vae(&t, &[0, 1], &small_settings()).unwrap();
        assert_eq!(a, ablate_no_vae(&t, &[0, 1], &small_settings()).unwrap());
        assert!(a.no_vae && a.gbt.per_model.len() == 2);
    }

    #[test]
    fn grouping_sums_within_labels() {
        let lab = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
        let imp = vec![vec![0.5, 0.25, 0.25, 0.0], vec![0.1, 0.6, 0.3, 0.0]];
        let labels = vec![lab(&["Scale", "Shape", "Scale", "inactive"]), lab(&["Shape", "Scale", "Color", "inactive"])];
        let g = grouped_importance(&imp, &labels).unwrap();
        let get = |n: &str| g.iter().find(|x| x.label == n).unwrap().clone();
        assert!((get("Scale").mean - (0.75 + 0.6) / 2.0).abs() < 1e-12);
        assert!((get("Shape").sd - 0.075).abs() < 1e-12);
        assert!((g.iter().map(|x| x.mean).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn single_informative_dim_dominates_its_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 300;
        let x = Array2::from_shape_fn((n, 3), |(i, j)| if j == 1 { (i % 3) as f64 } else { rng.random_range(-1.0..1.0) });
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let imp = fit_gbt(x.view(), &y, &GbtConfig::default()).unwrap().importance();
        let labels = vec![vec!["Texture".to_string(), "Scale".into(), "Color".into()]];
        let g = grouped_importance(&[imp], &labels).unwrap();
        assert!(g.iter().find(|x| x.label == "Scale").unwrap().mean > 0.99);
    }
}
