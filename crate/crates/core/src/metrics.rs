//! Disentanglement scores of a representation against annotated factors.
//!
//! Mutual information is estimated by plugging in histogram counts after
//! discretizing each latent dimension into uniform-width bins. The association
//! matrix `A[k][j] = I(v_k; z_j) / H(v_k)` feeds MIG, OMES* and the dimension
//! labels; DCI uses GBT importances instead.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::stats::{entropy, population_sd};
use crate::synthgen::{FactorSpace, FactorTuple};
use crate::trees::{fit_gbt, GbtConfig};
use crate::{Error, Result};

pub const DEFAULT_BINS: usize = 20;
pub const PRUNE_THRESHOLD: f64 = 0.05;
pub const OMES_ALPHA: f64 = 0.5;
pub const INACTIVE: &str = "inactive";

/// Latent codes (`N x L`) with the factor values of each row (`N x K`).
#[derive(Debug, Clone, PartialEq)]
pub struct Representation {
    pub z: Array2<f64>,
    pub factors: Array2<usize>,
    pub factor_names: Vec<String>,
}

impl Representation {
    pub fn new(z: Array2<f64>, factors: Array2<usize>, factor_names: Vec<String>) -> Result<Self> {
        if z.nrows() == 0 {
            return Err(Error::invalid("representation has no rows"));
        }
        if z.nrows() != factors.nrows() {
            return Err(Error::invalid(format!(
                "{} latent rows but {} factor rows",
                z.nrows(),
                factors.nrows()
            )));
        }
        if factors.ncols() != factor_names.len() {
            return Err(Error::DimensionMismatch {
                expected: factor_names.len(),
                actual: factors.ncols(),
            });
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("representation contains non-finite values"));
        }
        Ok(Self { z, factors, factor_names })
    }

    pub fn from_tuples(z: Array2<f64>, space: &FactorSpace, tuples: &[FactorTuple]) -> Result<Self> {
        for t in tuples {
            space.validate(t)?;
        }
        let k = space.len();
        let factors = Array2::from_shape_fn((tuples.len(), k), |(i, j)| tuples[i].0[j]);
        Self::new(z, factors, space.names().into_iter().map(String::from).collect())
    }

    pub fn rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn dims(&self) -> usize {
        self.z.ncols()
    }

    pub fn factor_column(&self, k: usize) -> Vec<usize> {
        self.factors.column(k).to_vec()
    }

    pub fn select_rows(&self, rows: &[usize]) -> Self {
        Self {
            z: self.z.select(Axis(0), rows),
            factors: self.factors.select(Axis(0), rows),
            factor_names: self.factor_names.clone(),
        }
    }
}

/// Uniform-width bin codes between the column min and max. A constant column
/// maps to code 0.
pub fn discretize(column: ArrayView1<f64>, bins: usize) -> Vec<usize> {
    let (lo, hi) = column
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![0; column.len()];
    }
    column
        .iter()
        .map(|&v| (((v - lo) / (hi - lo) * bins as f64) as usize).min(bins - 1))
        .collect()
}

fn counts(codes: &[usize]) -> Vec<usize> {
    let mut c = vec![0; codes.iter().max().map_or(0, |m| m + 1)];
    for &v in codes {
        c[v] += 1;
    }
    c
}

pub fn code_entropy(codes: &[usize]) -> f64 {
    entropy(&counts(codes))
}

/// Plug-in mutual information in nats from the joint histogram.
pub fn mutual_information(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "code sequences must align");
    let (ca, cb) = (counts(a), counts(b));
    let mut joint = vec![0usize; ca.len() * cb.len()];
    for (&x, &y) in a.iter().zip(b) {
        joint[x * cb.len() + y] += 1;
    }
    let n = a.len() as f64;
    let mut mi = 0.0;
    for (i, &na) in ca.iter().enumerate() {
        for (j, &nb) in cb.iter().enumerate() {
            let c = joint[i * cb.len() + j];
            if c > 0 {
                let c = c as f64;
                mi += c / n * (c * n / (na as f64 * nb as f64)).ln();
            }
        }
    }
    mi.max(0.0)
}

/// Normalized mutual information between factors and latent dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssociationMatrix {
    /// Rows follow `factors`.
    pub values: Array2<f64>,
    /// Indices of the factors with positive entropy.
    pub factors: Vec<usize>,
    pub factor_names: Vec<String>,
}

impl AssociationMatrix {
    pub fn compute(rep: &Representation, bins: usize) -> Self {
        let codes: Vec<Vec<usize>> = rep.z.columns().into_iter().map(|c| discretize(c, bins)).collect();
        let mut factors = Vec::new();
        let mut rows = Vec::new();
        for k in 0..rep.factors.ncols() {
            let v = rep.factor_column(k);
            let h = code_entropy(&v);
            if h <= 0.0 {
                continue;
            }
            factors.push(k);
            rows.extend(codes.iter().map(|c| (mutual_information(&v, c) / h).max(0.0)));
        }
        let values = Array2::from_shape_vec((factors.len(), codes.len()), rows).expect("row-major fill");
        Self {
            factor_names: factors.iter().map(|&k| rep.factor_names[k].clone()).collect(),
            values,
            factors,
        }
    }
}

/// Per-factor normalized gap between the two most informative dimensions.
pub fn mig_terms(a: &AssociationMatrix) -> Result<Vec<f64>> {
    if a.values.ncols() < 2 {
        return Err(Error::invalid(format!("MIG needs at least 2 latent dimensions, got {}", a.values.ncols())));
    }
    Ok(a.values
        .rows()
        .into_iter()
        .map(|row| {
            let mut v = row.to_vec();
            v.sort_by(|x, y| y.total_cmp(x));
            v[0] - v[1]
        })
        .collect())
}

pub fn mig(a: &AssociationMatrix) -> Result<f64> {
    let terms = mig_terms(a)?;
    if terms.is_empty() {
        return Err(Error::invalid("no factor varies in this representation"));
    }
    Ok(terms.iter().sum::<f64>() / terms.len() as f64)
}

/// OMES* with weight `alpha` on modularity and `1 - alpha` on compactness.
pub fn omes(a: &Array2<f64>, alpha: f64) -> f64 {
    let (k, _) = a.dim();
    if k == 0 || a.iter().all(|&v| v == 0.0) {
        log::warn!("all-zero association matrix: OMES* is 0");
        return 0.0;
    }
    let col_sums = a.sum_axis(Axis(0));
    let mut total = 0.0;
    for row in a.rows() {
        let j = argmax(row.iter().copied());
        let top = row[j];
        let row_sum = row.sum();
        let compact = if row_sum > 0.0 { top / row_sum } else { 0.0 };
        let modular = if col_sums[j] > 0.0 { top / col_sums[j] } else { 0.0 };
        total += alpha * modular + (1.0 - alpha) * compact;
    }
    total / k as f64
}

fn argmax(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, v) in values.enumerate() {
        if v > best.1 {
            best = (i, v);
        }
    }
    best.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DciReport {
    pub score: f64,
    /// `L x K` importance of each dimension for each factor.
    pub importance: Array2<f64>,
    pub dim_disentanglement: Vec<f64>,
    pub dim_weight: Vec<f64>,
}

/// DCI disentanglement from an `L x K` importance matrix.
pub fn dci_from_importance(p: &Array2<f64>) -> DciReport {
    let (l, k) = p.dim();
    let total = p.sum();
    let mut d = vec![0.0; l];
    let mut w = vec![0.0; l];
    if total <= 0.0 {
        log::warn!("all-zero importance: DCI disentanglement is 0");
    } else {
        for (j, row) in p.rows().into_iter().enumerate() {
            let s = row.sum();
            w[j] = s / total;
            if s <= 0.0 {
                continue;
            }
            d[j] = if k < 2 {
                1.0
            } else {
                let h: f64 = row.iter().filter(|&&v| v > 0.0).map(|&v| -(v / s) * (v / s).ln()).sum();
                1.0 - h / (k as f64).ln()
            };
        }
    }
    DciReport {
        score: d.iter().zip(&w).map(|(a, b)| a * b).sum(),
        importance: p.clone(),
        dim_disentanglement: d,
        dim_weight: w,
    }
}

/// Fits one GBT per non-constant factor on all rows and scores the importance
/// matrix.
pub fn dci_d(rep: &Representation, config: &GbtConfig) -> Result<DciReport> {
    let mut cols = Vec::new();
    for k in 0..rep.factors.ncols() {
        let y = rep.factor_column(k);
        if y.iter().all(|&v| v == y[0]) {
            continue;
        }
        cols.push(fit_gbt(rep.z.view(), &y, config)?.importance());
    }
    let p = Array2::from_shape_fn((rep.dims(), cols.len()), |(j, k)| cols[k][j]);
    Ok(dci_from_importance(&p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorAccuracy {
    pub factor: String,
    /// `None` when the factor is constant in the training rows.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplicitnessReport {
    pub per_factor: Vec<FactorAccuracy>,
    /// Unweighted mean over the evaluated factors.
    pub all: Option<f64>,
}

/// GBT test accuracy per factor.
pub fn explicitness(rep: &Representation, train: &[usize], test: &[usize], config: &GbtConfig) -> Result<ExplicitnessReport> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::invalid("explicitness needs non-empty train and test rows"));
    }
    let (xtr, xte) = (rep.z.select(Axis(0), train), rep.z.select(Axis(0), test));
    let mut per_factor = Vec::new();
    for (k, name) in rep.factor_names.iter().enumerate() {
        let col = rep.factors.column(k);
        let ytr: Vec<usize> = train.iter().map(|&i| col[i]).collect();
        let yte: Vec<usize> = test.iter().map(|&i| col[i]).collect();
        let accuracy = if ytr.iter().all(|&v| v == ytr[0]) {
            log::info!("factor {name} is constant in the training rows; skipped");
            None
        } else {
            Some(fit_gbt(xtr.view(), &ytr, config)?.accuracy(xte.view(), &yte)?)
        };
        per_factor.push(FactorAccuracy {
            factor: name.clone(),
            accuracy,
        });
    }
    let acc: Vec<f64> = per_factor.iter().filter_map(|f| f.accuracy).collect();
    let all = (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64);
    Ok(ExplicitnessReport { per_factor, all })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DimensionLabel {
    pub label: String,
    /// Share of the dimension's association held by the labeled factor.
    pub confidence: f64,
}

/// Names each dimension after its most associated factor.
pub fn label_dimensions(a: &AssociationMatrix) -> Vec<DimensionLabel> {
    a.values
        .columns()
        .into_iter()
        .map(|col| {
            let s = col.sum();
            if s <= 0.0 {
                return DimensionLabel {
                    label: INACTIVE.into(),
                    confidence: 0.0,
                };
            }
            let k = argmax(col.iter().copied());
            DimensionLabel {
                label: a.factor_names[k].clone(),
                confidence: col[k] / s,
            }
        })
        .collect()
}

/// Keeps the columns whose population SD over `train` rows is at least
/// `threshold`. Returns the reduced matrix (all rows) and kept column indices.
pub fn prune_inactive(z: ArrayView2<f64>, train: &[usize], threshold: f64) -> Result<(Array2<f64>, Vec<usize>)> {
    if train.is_empty() {
        return Err(Error::invalid("pruning needs training rows"));
    }
    let kept: Vec<usize> = (0..z.ncols())
        .filter(|&j| {
            let col: Vec<f64> = train.iter().map(|&i| z[[i, j]]).collect();
            population_sd(&col) >= threshold
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::invalid(format!("every latent dimension has train SD below {threshold}")));
    }
    Ok((z.select(Axis(1), &kept), kept))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub bins: usize,
    pub omes_alpha: f64,
    pub trees: GbtConfig,
}

impl Default for MetricSettings {
    fn default() -> Self {
        Self {
            bins: DEFAULT_BINS,
            omes_alpha: OMES_ALPHA,
            trees: GbtConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorScore {
    pub factor: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisentanglementReport {
    pub mig: f64,
    pub dci_d: f64,
    /// OMES* (see [`omes`]).
    pub omes: f64,
    pub mig_per_factor: Vec<FactorScore>,
    pub dci_dim_disentanglement: Vec<f64>,
    pub dci_dim_weight: Vec<f64>,
    pub dimension_labels: Vec<DimensionLabel>,
    pub rows: usize,
}

pub fn evaluate(rep: &Representation, settings: &MetricSettings) -> Result<DisentanglementReport> {
    let a = AssociationMatrix::compute(rep, settings.bins);
    let terms = mig_terms(&a)?;
    let dci = dci_d(rep, &settings.trees)?;
    Ok(DisentanglementReport {
        mig: mig(&a)?,
        dci_d: dci.score,
        omes: omes(&a.values, settings.omes_alpha),
        mig_per_factor: a
            .factor_names
            .iter()
            .zip(terms)
            .map(|(f, v)| FactorScore { factor: f.clone(), value: v })
            .collect(),
        dci_dim_disentanglement: dci.dim_disentanglement,
        dci_dim_weight: dci.dim_weight,
        dimension_labels: label_dimensions(&a),
        rows: rep.rows(),
    })
}
