//! Gradient boosted decision trees for multiclass classification.
//!
//! Each round fits one least-squares regression tree per class to the softmax
//! residuals `y_k - p_k` and sets leaf values with Friedman's one-step Newton
//! update. Splits are exact: every feature is presorted once and every
//! boundary between distinct values is scored.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GbtConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    /// Recorded for provenance. Fitting uses no subsampling, so the seed does
    /// not change the model.
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            learning_rate: 0.1,
            max_depth: 3,
            seed: 0,
        }
    }
}

impl GbtConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        /// Decrease of the squared-error impurity, weighted by node size.
        gain: f64,
        left: usize,
        right: usize,
    },
}

/// Binary regression tree; `nodes[0]` is the root. Rows with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value } => return value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                    ..
                } => i = if row[feature] <= threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, left).max(walk(nodes, right)),
            }
        }
        walk(&self.nodes, 0)
    }

    /// Index of the leaf reached by `row`.
    pub fn leaf_of(&self, row: &[f64]) -> usize {
        let mut i = 0;
        while let Node::Split {
            feature,
            threshold,
            left,
            right,
            ..
        } = self.nodes[i]
        {
            i = if row[feature] <= threshold { left } else { right };
        }
        i
    }
}

/// Column-major copy of the design matrix with per-feature row orderings.
pub struct Presorted {
    columns: Vec<Vec<f64>>,
    order: Vec<Vec<u32>>,
}

impl Presorted {
    pub fn new(x: ArrayView2<f64>) -> Result<Self> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("feature matrix contains non-finite values"));
        }
        let columns: Vec<Vec<f64>> = x.columns().into_iter().map(|c| c.to_vec()).collect();
        let order = columns
            .iter()
            .map(|c| {
                let mut idx: Vec<u32> = (0..c.len() as u32).collect();
                idx.sort_by(|&a, &b| c[a as usize].total_cmp(&c[b as usize]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Ok(Self { columns, order })
    }

    pub fn rows(&self) -> usize {
        self.order.first().map_or(0, Vec::len)
    }

    pub fn features(&self) -> usize {
        self.columns.len()
    }
}

/// Midpoint that is guaranteed to separate `a < b`.
fn midpoint(a: f64, b: f64) -> f64 {
    let m = a + (b - a) / 2.0;
    if m >= b {
        a
    } else {
        m
    }
}

struct Grower<'a> {
    data: &'a Presorted,
    targets: &'a [f64],
    max_depth: usize,
    leaf_value: &'a dyn Fn(&[u32]) -> f64,
    go_left: Vec<bool>,
    nodes: Vec<Node>,
}

struct Candidate {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Within-node sum of squares below this fraction of the targets' energy is
/// treated as roundoff, so rows whose targets differ only in the last bits
/// are not split.
const PURE_TOLERANCE: f64 = 1e-14;

impl Grower<'_> {
    fn is_pure(&self, rows: &[u32]) -> bool {
        let t = |r: &u32| self.targets[*r as usize];
        let mean = rows.iter().map(t).sum::<f64>() / rows.len() as f64;
        let sse: f64 = rows.iter().map(|r| (t(r) - mean).powi(2)).sum();
        let energy: f64 = rows.iter().map(|r| t(r).powi(2)).sum();
        sse <= PURE_TOLERANCE * energy
    }

    fn best_split(&self, lists: &[Vec<u32>]) -> Option<Candidate> {
        let rows = &lists[0];
        let n = rows.len();
        let total: f64 = rows.iter().map(|&r| self.targets[r as usize]).sum();
        let parent = total * total / n as f64;
        let mut best: Option<Candidate> = None;
        for (feature, list) in lists.iter().enumerate() {
            let col = &self.data.columns[feature];
            let mut sum_left = 0.0;
            for w in 0..n - 1 {
                let row = list[w] as usize;
                sum_left += self.targets[row];
                let (v, next) = (col[row], col[list[w + 1] as usize]);
                if next <= v {
                    continue;
                }
                let nl = (w + 1) as f64;
                let sum_right = total - sum_left;
                let gain = sum_left * sum_left / nl + sum_right * sum_right / (n as f64 - nl) - parent;
                // strict comparison keeps the lexicographically first of equal-gain splits
                if best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        feature,
                        threshold: midpoint(v, next),
                        gain,
                    });
                }
            }
        }
        best
    }

    fn grow(&mut self, lists: Vec<Vec<u32>>, depth: usize) -> usize {
        let rows = &lists[0];
        let pure = self.is_pure(rows);
        let split = if depth >= self.max_depth || rows.len() < 2 || pure {
            None
        } else {
            self.best_split(&lists)
        };
        let Some(c) = split else {
            let value = (self.leaf_value)(rows);
            self.nodes.push(Node::Leaf { value });
            return self.nodes.len() - 1;
        };
        let col = &self.data.columns[c.feature];
        for &r in rows {
            self.go_left[r as usize] = col[r as usize] <= c.threshold;
        }
        let (mut left, mut right) = (Vec::with_capacity(lists.len()), Vec::with_capacity(lists.len()));
        for list in lists {
            let (l, r): (Vec<u32>, Vec<u32>) = list.into_iter().partition(|&r| self.go_left[r as usize]);
            left.push(l);
            right.push(r);
        }
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { value: 0.0 });
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        self.nodes[at] = Node::Split {
            feature: c.feature,
            threshold: c.threshold,
            gain: c.gain.max(0.0),
            left: l,
            right: r,
        };
        at
    }
}

/// Fits one least-squares regression tree to `targets`. `leaf_value` maps the
/// rows of a leaf to its output.
pub fn fit_tree(data: &Presorted, targets: &[f64], max_depth: usize, leaf_value: &dyn Fn(&[u32]) -> f64) -> Tree {
    assert_eq!(targets.len(), data.rows(), "one target per row");
    if data.rows() == 0 {
        return Tree {
            nodes: vec![Node::Leaf { value: 0.0 }],
        };
    }
    if data.features() == 0 {
        let rows: Vec<u32> = (0..targets.len() as u32).collect();
        return Tree {
            nodes: vec![Node::Leaf { value: leaf_value(&rows) }],
        };
    }
    let mut g = Grower {
        data,
        targets,
        max_depth,
        leaf_value,
        go_left: vec![false; data.rows()],
        nodes: Vec::new(),
    };
    g.grow(data.order.clone(), 0);
    Tree { nodes: g.nodes }
}

/// Mean of the targets in a leaf: the least-squares leaf value.
pub fn mean_leaf(targets: &[f64]) -> impl Fn(&[u32]) -> f64 + '_ {
    move |rows| rows.iter().map(|&r| targets[r as usize]).sum::<f64>() / rows.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub config: GbtConfig,
    pub n_features: usize,
    pub n_classes: usize,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
    /// Set when the training labels held a single class; the model then
    /// predicts that class for every row.
    pub constant: Option<usize>,
}

fn softmax_row(scores: &mut [f64]) {
    let m = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - m).exp();
        z += *s;
    }
    for s in scores.iter_mut() {
        *s /= z;
    }
}

/// Multiclass softmax boosting starting from all-zero scores.
pub fn fit_gbt(x: ArrayView2<f64>, y: &[usize], config: &GbtConfig) -> Result<GbtModel> {
    config.validate()?;
    let (n, d) = x.dim();
    if n == 0 || n != y.len() {
        return Err(Error::invalid(format!("{n} feature rows but {} labels", y.len())));
    }
    let n_classes = y.iter().max().map_or(0, |m| m + 1);
    let mut model = GbtModel {
        config: *config,
        n_features: d,
        n_classes,
        trees: Vec::new(),
        constant: None,
    };
    if y.iter().all(|&c| c == y[0]) {
        log::warn!("single-class labels: fitting a constant predictor for class {}", y[0]);
        model.constant = Some(y[0]);
        return Ok(model);
    }
    let data = Presorted::new(x)?;
    let k = n_classes as f64;
    let mut scores = vec![0.0; n * n_classes];
    let mut probs = vec![0.0; n * n_classes];
    let mut residual = vec![0.0; n];
    let rows: Vec<Vec<f64>> = x.rows().into_iter().map(|r| r.to_vec()).collect();
    for _ in 0..config.rounds {
        probs.copy_from_slice(&scores);
        probs.chunks_mut(n_classes).for_each(softmax_row);
        let mut round = Vec::with_capacity(n_classes);
        for class in 0..n_classes {
            for i in 0..n {
                residual[i] = f64::from(u8::from(y[i] == class)) - probs[i * n_classes + class];
            }
            let leaf = |leaf_rows: &[u32]| {
                let (mut num, mut den) = (0.0, 0.0);
                for &r in leaf_rows {
                    let g = residual[r as usize];
                    num += g;
                    den += g.abs() * (1.0 - g.abs());
                }
                if den.abs() < 1e-150 {
                    0.0
                } else {
                    (k - 1.0) / k * num / den
                }
            };
            let tree = fit_tree(&data, &residual, config.max_depth, &leaf);
            for (i, row) in rows.iter().enumerate() {
                scores[i * n_classes + class] += config.learning_rate * tree.predict_row(row);
            }
            round.push(tree);
        }
        model.trees.push(round);
    }
    Ok(model)
}

impl GbtModel {
    fn check(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.n_features {
            return Err(Error::DimensionMismatch {
                expected: self.n_features,
                actual: x.ncols(),
            });
        }
        Ok(())
    }

    /// Summed leaf scores of the first `rounds` rounds, row-major `n x classes`.
    pub fn scores_upto(&self, x: ArrayView2<f64>, rounds: usize) -> Result<Vec<f64>> {
        self.check(&x)?;
        let c = self.n_classes;
        let mut out = vec![0.0; x.nrows() * c];
        if let Some(k) = self.constant {
            for i in 0..x.nrows() {
                out[i * c + k] = 1.0;
            }
            return Ok(out);
        }
        for (i, row) in x.rows().into_iter().enumerate() {
            let row = row.to_vec();
            for round in self.trees.iter().take(rounds) {
                for (k, tree) in round.iter().enumerate() {
                    out[i * c + k] += self.config.learning_rate * tree.predict_row(&row);
                }
            }
        }
        Ok(out)
    }

    /// Class probabilities, row-major `n x classes`.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        let mut p = self.scores_upto(x, self.trees.len())?;
        if self.constant.is_none() {
            p.chunks_mut(self.n_classes).for_each(softmax_row);
        }
        Ok(p)
    }

    /// Argmax class per row; ties go to the lowest class index.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        let p = self.predict_proba(x)?;
        Ok(p.chunks(self.n_classes).map(argmax).collect())
    }

    pub fn accuracy(&self, x: ArrayView2<f64>, y: &[usize]) -> Result<f64> {
        let pred = self.predict(x)?;
        if pred.len() != y.len() {
            return Err(Error::invalid(format!("{} rows but {} labels", pred.len(), y.len())));
        }
        Ok(pred.iter().zip(y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64)
    }

    /// Per-feature impurity decrease summed over all trees, normalized to sum
    /// to 1. All zeros when the model has no splits.
    pub fn importance(&self) -> Vec<f64> {
        let mut imp = vec![0.0; self.n_features];
        for tree in self.trees.iter().flatten() {
            for node in &tree.nodes {
                if let Node::Split { feature, gain, .. } = *node {
                    imp[feature] += gain;
                }
            }
        }
        let total: f64 = imp.iter().sum();
        if total > 0.0 {
            imp.iter_mut().for_each(|v| *v /= total);
        }
        imp
    }
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sse(v: &[f64]) -> f64 {
        let m = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - m).powi(2)).sum()
    }

    // exhaustive scan: every feature, every midpoint between distinct values
    fn brute_best_gain(x: &Array2<f64>, t: &[f64], rows: &[usize]) -> Option<f64> {
        let parent: Vec<f64> = rows.iter().map(|&r| t[r]).collect();
        let mut best: Option<f64> = None;
        for f in 0..x.ncols() {
            let mut vals: Vec<f64> = rows.iter().map(|&r| x[[r, f]]).collect();
            vals.sort_by(f64::total_cmp);
            vals.dedup();
            for w in vals.windows(2) {
                let thr = (w[0] + w[1]) / 2.0;
                let (l, r): (Vec<f64>, Vec<f64>) = rows.iter().map(|&i| (x[[i, f]], t[i])).fold(
                    (vec![], vec![]),
                    |(mut l, mut r), (v, y)| {
                        if v <= thr {
                            l.push(y)
                        } else {
                            r.push(y)
                        }
                        (l, r)
                    },
                );
                let g = sse(&parent) - sse(&l) - sse(&r);
                if best.is_none_or(|b| g > b) {
                    best = Some(g);
                }
            }
        }
        best
    }

    fn random_instance(seed: u64, n: usize, d: usize) -> (Array2<f64>, Vec<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // coarse grid of values so ties occur
        let x = Array2::from_shape_simple_fn((n, d), || f64::from(rng.random_range(0..12u8)) * 0.5);
        let t = (0..n).map(|i| (x[[i, 0]] - 2.0).abs() + rng.random_range(-1.0..1.0)).collect();
        (x, t)
    }

    #[test]
    fn splits_match_exhaustive_search() {
        for seed in 0..20 {
            let n = 20 + 9 * seed as usize;
            let (x, t) = random_instance(seed, n, 4);
            let data = Presorted::new(x.view()).unwrap();
            let tree = fit_tree(&data, &t, 3, &mean_leaf(&t));
            // route every row and check each internal node against the oracle
            for (i, node) in tree.nodes.iter().enumerate() {
                let Node::Split { feature, threshold, gain, .. } = *node else { continue };
                let rows: Vec<usize> = (0..n)
                    .filter(|&r| {
                        let row = x.row(r).to_vec();
                        let mut j = 0;
                        while j != i {
                            match tree.nodes[j] {
                                Node::Split { feature, threshold, left, right, .. } => {
                                    j = if row[feature] <= threshold { left } else { right }
                                }
                                Node::Leaf { .. } => return false,
                            }
                        }
                        true
                    })
                    .collect();
                let best = brute_best_gain(&x, &t, &rows).unwrap();
                let parent: Vec<f64> = rows.iter().map(|&r| t[r]).collect();
                let left: Vec<f64> = rows.iter().filter(|&&r| x[[r, feature]] <= threshold).map(|&r| t[r]).collect();
                let right: Vec<f64> = rows.iter().filter(|&&r| x[[r, feature]] > threshold).map(|&r| t[r]).collect();
                let own = sse(&parent) - sse(&left) - sse(&right);
                assert!((own - best).abs() <= 1e-9 * (1.0 + best.abs()), "seed {seed} node {i}: {own} vs {best}");
                assert!((gain - own.max(0.0)).abs() <= 1e-9 * (1.0 + own.abs()));
            }
        }
    }

    #[test]
    fn equal_gain_ties_pick_first_feature() {
        // two identical columns: every split on column 1 ties with column 0
        let x = Array2::from_shape_fn((10, 2), |(i, _)| i as f64);
        let t: Vec<f64> = (0..10).map(|i| f64::from(u8::from(i >= 4))).collect();
        let data = Presorted::new(x.view()).unwrap();
        let tree = fit_tree(&data, &t, 1, &mean_leaf(&t));
        assert!(matches!(tree.nodes[0], Node::Split { feature: 0, threshold, .. } if threshold == 3.5));
    }

    #[test]
    fn one_dimensional_threshold() {
        let x = Array2::from_shape_fn((40, 1), |(i, _)| if i < 20 { -1.0 - i as f64 * 0.1 } else { 1.0 + i as f64 * 0.1 });
        let y: Vec<usize> = (0..40).map(|i| usize::from(i >= 20)).collect();
        let m = fit_gbt(x.view(), &y, &GbtConfig::default()).unwrap();
        assert_eq!(m.accuracy(x.view(), &y).unwrap(), 1.0);
        assert!(m.trees.iter().flatten().all(|t| t.depth() <= 3));
        assert_eq!(m.trees.len(), 100);
    }

    #[test]
    fn xor_is_learned() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array2::from_shape_simple_fn((200, 2), || {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        });
        let y: Vec<usize> = x.rows().into_iter().map(|r| usize::from((r[0] > 0.0) != (r[1] > 0.0))).collect();
        let m = fit_gbt(x.view(), &y, &GbtConfig::default()).unwrap();
        assert_eq!(m.accuracy(x.view(), &y).unwrap(), 1.0);
    }

    #[test]
    fn zero_rounds_is_uniform() {
        let x = Array2::from_shape_fn((9, 2), |(i, j)| (i * 3 + j) as f64);
        let y: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let m = fit_gbt(x.view(), &y, &GbtConfig { rounds: 0, ..Default::default() }).unwrap();
        let p = m.predict_proba(x.view()).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-12));
        assert_eq!(m.predict(x.view()).unwrap(), vec![0; 9]);
        assert_eq!(m.importance(), vec![0.0, 0.0]);
    }

    #[test]
    fn probabilities_sum_to_one_and_loss_decreases() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array2::from_shape_simple_fn((150, 3), || rng.random_range(-1.0..1.0));
        let y: Vec<usize> = x.rows().into_iter().map(|r| ((r[0] + r[1] * r[2] + 1.0) * 1.5f64).clamp(0.0, 3.99) as usize).collect();
        let m = fit_gbt(x.view(), &y, &GbtConfig { rounds: 40, ..Default::default() }).unwrap();
        for row in m.predict_proba(x.view()).unwrap().chunks(m.n_classes) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let mut last = f64::INFINITY;
        for r in 0..=40 {
            let mut s = m.scores_upto(x.view(), r).unwrap();
            s.chunks_mut(m.n_classes).for_each(softmax_row);
            let loss = -y.iter().enumerate().map(|(i, &c)| s[i * m.n_classes + c].ln()).sum::<f64>() / y.len() as f64;
            assert!(loss <= last + 1e-12, "round {r}: {loss} > {last}");
            last = loss;
        }
    }

    #[test]
    fn importance_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut x = Array2::from_shape_simple_fn((120, 4), || rng.random_range(-1.0..1.0));
        let y: Vec<usize> = x.column(0).iter().map(|&v| usize::from(v > 0.1)).collect();
        let m = fit_gbt(x.view(), &y, &GbtConfig::default()).unwrap();
        let imp = m.importance();
        assert!((imp.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(imp[0] >= 0.99, "{imp:?}");

        // a duplicate of column 0 shares its importance
        let col0 = x.column(0).to_owned();
        x.column_mut(3).assign(&col0);
        let imp = fit_gbt(x.view(), &y, &GbtConfig::default()).unwrap().importance();
        assert!(imp[0] + imp[3] >= 0.99, "{imp:?}");
    }

    #[test]
    fn single_class_is_constant_and_dims_checked() {
        let x = Array2::<f64>::zeros((5, 2));
        let m = fit_gbt(x.view(), &[2; 5], &GbtConfig::default()).unwrap();
        assert_eq!(m.constant, Some(2));
        assert_eq!(m.predict(x.view()).unwrap(), vec![2; 5]);
        assert!(m.predict(Array2::<f64>::zeros((1, 3)).view()).is_err());
        assert!(fit_gbt(x.view(), &[0, 1], &GbtConfig::default()).is_err());
    }

    #[test]
    fn deterministic() {
        let (x, t) = random_instance(3, 80, 3);
        let y: Vec<usize> = t.iter().map(|&v| usize::from(v > 1.0)).collect();
        let a = fit_gbt(x.view(), &y, &GbtConfig { rounds: 10, ..Default::default() }).unwrap();
        let b = fit_gbt(x.view(), &y, &GbtConfig { rounds: 10, ..Default::default() }).unwrap();
        assert_eq!(a, b);
    }
}
