//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run a subset with `cargo test --test acceptance -- 1 4 7`. The process
//! fails only when a deterministic criterion (4 to 7) fails; the statistical
//! and experimental ones (1, 2, 3, 8) are reported.

use std::collections::HashSet;
use std::time::Instant;

use disentlab::analysis::{openset, solidity};
use disentlab::downstream::{evaluate as downstream_eval, EvalSettings, MlpConfig, TargetData};
use disentlab::metrics::{
    dci_from_importance, evaluate, explicitness, label_dimensions, mig, mutual_information, omes, prune_inactive,
    AssociationMatrix, MetricSettings, Representation,
};
use disentlab::nn::{Activation, AdamConfig};
use disentlab::stats::pearson;
use disentlab::synthgen::{dataset_preset, enumerate, DatasetScale, FactorSpace, FactorTuple, SHAPE};
use disentlab::tensorio::{decode, encode, read_tensor, write_tensor, Tensor};
use disentlab::trees::{fit_gbt, fit_tree, mean_leaf, GbtConfig, Node, Presorted};
use disentlab::vae::{
    finetune, gauss_kl, train, FinetuneConfig, InputKind, ModelEnsemble, Objective, PairSource, Sharing, TrainConfig,
    TrainData, Vae, VaeArch, VaeModel, PROTOCOL_BETAS, PROTOCOL_SEEDS,
};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::statistics::Statistics;

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

/// Encoder widths for the image VAEs of criteria 2, 3 and 8.
const IMAGE_HIDDEN: [usize; 1] = [16];
const SEEDS: [u64; 3] = [0, 1, 2];

struct Check {
    name: String,
    pass: bool,
    detail: String,
}

fn check(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Check {
    Check {
        name: name.into(),
        pass,
        detail: detail.into(),
    }
}

struct Outcome {
    checks: Vec<Check>,
}

impl Outcome {
    fn pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }
}

fn verdict(p: bool) -> &'static str {
    if p {
        "PASS"
    } else {
        "FAIL"
    }
}

fn normal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || StandardNormal.sample(rng))
}

// ---------------------------------------------------------------- 1

fn random_tuples(space: &FactorSpace, n: usize, rng: &mut ChaCha8Rng) -> Array2<usize> {
    let cards = space.cardinalities();
    Array2::from_shape_fn((n, cards.len()), |(_, k)| rng.random_range(0..cards[k]))
}

fn criterion_1() -> Outcome {
    let settings = MetricSettings::default();
    let mut checks = Vec::new();

    let (space, _) = dataset_preset(DatasetScale::Desk, &["PosX", "PosY"]).unwrap();
    let tuples: Vec<FactorTuple> = (0..space.grid_size()).map(|i| space.tuple_at(i).unwrap()).collect();
    let z = Array2::from_shape_fn((tuples.len(), space.len()), |(i, k)| tuples[i][k] as f64);
    let perfect = evaluate(&Representation::from_tuples(z, &space, &tuples).unwrap(), &settings).unwrap();
    for (name, v) in [("MIG", perfect.mig), ("OMES*", perfect.omes), ("DCI-D", perfect.dci_d)] {
        checks.push(check(format!("perfect {name} >= 0.95"), v >= 0.95, format!("{v:.4} on {} rows", tuples.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let paper = FactorSpace::texture_dsprites(40);
    let n = 5000;
    let factors = random_tuples(&paper, n, &mut rng);
    let names: Vec<String> = paper.names().iter().map(|s| s.to_string()).collect();
    let noise = Representation::new(normal(n, 10, &mut rng), factors, names.clone()).unwrap();
    let scores = evaluate(&noise, &settings).unwrap();
    for (name, v) in [("MIG", scores.mig), ("OMES*", scores.omes), ("DCI-D", scores.dci_d)] {
        checks.push(check(format!("noise {name} <= 0.1"), v <= 0.1, format!("{v:.4}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (train_rows, test_rows) = order.split_at(n / 2);
    let x = explicitness(&noise, train_rows, test_rows, &settings.trees).unwrap();
    let random_row = [20.00, 14.28, 33.33, 16.66, 2.5, 3.12, 3.12];
    for ((f, want), name) in x.per_factor.iter().zip(random_row).zip(&names) {
        let got = 100.0 * f.accuracy.unwrap();
        checks.push(check(format!("chance {name} {want:.2} +- 2"), (got - want).abs() <= 2.0, format!("{got:.2}")));
    }
    Outcome { checks }
}

// ---------------------------------------------------------------- 2, 3, 8

struct DeskData {
    space: FactorSpace,
    tuples: Vec<FactorTuple>,
    x: Array2<f32>,
}

fn desk_images(freeze: &[&str]) -> DeskData {
    let (space, spec) = dataset_preset(DatasetScale::Desk, freeze).unwrap();
    let (tuples, images): (Vec<_>, Vec<_>) = enumerate(&space, &spec, usize::MAX).unwrap().unzip();
    let d = images[0].data.len();
    let mut x = Array2::zeros((images.len(), d));
    for (mut row, im) in x.rows_mut().into_iter().zip(&images) {
        row.as_slice_mut().unwrap().copy_from_slice(&im.data);
    }
    DeskData { space, tuples, x }
}

fn desk_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        beta: 1.0,
        hidden: Some(IMAGE_HIDDEN.to_vec()),
        ..TrainConfig::desk()
    }
}

fn model_mig(model: &VaeModel, data: &DeskData) -> f64 {
    let z = model.encode_mean(data.x.view()).unwrap();
    let rep = Representation::from_tuples(z, &data.space, &data.tuples).unwrap();
    mig(&AssociationMatrix::compute(&rep, MetricSettings::default().bins)).unwrap()
}

struct Trained {
    seed: u64,
    ada: VaeModel,
    ada_mig: f64,
}

fn criterion_2(source: &DeskData) -> (Outcome, Vec<Trained>) {
    let start = Instant::now();
    let pairs = PairSource::new(source.space.clone(), &source.tuples).unwrap();
    let mut checks = Vec::new();
    let mut wins = 0;
    let mut trained = Vec::new();
    for seed in SEEDS {
        let config = desk_config(seed);
        let t = Instant::now();
        let (beta, _) = train(&config, InputKind::Image, TrainData::Samples(source.x.view()), Objective::Beta).unwrap();
        let beta_secs = t.elapsed().as_secs_f64();
        let t = Instant::now();
        let data = TrainData::Pairs {
            data: source.x.view(),
            source: &pairs,
        };
        let (ada, _) = train(&config, InputKind::Image, data, Objective::Ada).unwrap();
        let ada_secs = t.elapsed().as_secs_f64();
        let (mb, ma) = (model_mig(&beta, source), model_mig(&ada, source));
        let gap = ma - mb;
        wins += usize::from(gap >= 0.05);
        checks.push(check(
            format!("seed {seed}: Ada-GVAE MIG - beta-VAE MIG >= 0.05"),
            gap >= 0.05,
            format!("Ada {ma:.4} ({ada_secs:.0}s), beta {mb:.4} ({beta_secs:.0}s), gap {gap:+.4}"),
        ));
        trained.push(Trained { seed, ada, ada_mig: ma });
    }
    let mut out = vec![check("gap >= 0.05 in at least 2 of 3 seeds", wins >= 2, format!("{wins} of 3"))];
    out.append(&mut checks);
    let secs = start.elapsed().as_secs_f64();
    out.push(check("runtime < 20 min", secs < 1200.0, format!("{secs:.0}s")));
    (Outcome { checks: out }, trained)
}

fn criterion_3(source: &DeskData, trained: &[Trained]) -> Outcome {
    let start = Instant::now();
    let target = desk_images(&["PosX=10", "PosY=22"]);
    let mut checks = Vec::new();
    for t in trained {
        let config = FinetuneConfig {
            seed: t.seed,
            ..FinetuneConfig::default()
        };
        let (tuned, _) = finetune(&t.ada, target.x.view(), &config).unwrap();
        let after = model_mig(&tuned, source);
        let drift = (after - t.ada_mig).abs();
        checks.push(check(
            format!("seed {}: |MIG after - MIG before| <= 0.15", t.seed),
            drift <= 0.15,
            format!("{:.4} -> {after:.4}", t.ada_mig),
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    checks.push(check("runtime < 10 min", secs < 600.0, format!("{secs:.0}s")));
    Outcome { checks }
}

/// Classes are the shapes; one shape is held out, so it can only be mistaken
/// for a class that differs from it in Shape alone.
fn criterion_8(source: &DeskData, trained: &[Trained]) -> Outcome {
    let holdout = 2;
    let settings = EvalSettings::default();
    let mut hits = 0;
    let mut checks = Vec::new();
    for t in trained {
        let z = t.ada.encode_mean(source.x.view()).unwrap();
        let rep = Representation::from_tuples(z.clone(), &source.space, &source.tuples).unwrap();
        let labels = label_dimensions(&AssociationMatrix::compute(&rep, MetricSettings::default().bins));
        let shape: Vec<usize> = source.tuples.iter().map(|t| t[SHAPE]).collect();
        let known: Vec<usize> = (0..shape.len()).filter(|&i| shape[i] != holdout).collect();
        let anomalies: Vec<usize> = (0..shape.len()).filter(|&i| shape[i] == holdout).collect();
        let known_z = z.select(Axis(0), &known);
        let local: Vec<usize> = (0..known.len()).collect();
        let (pruned, kept) = prune_inactive(known_z.view(), &local, settings.prune_threshold).unwrap();
        let anomaly_z = z.select(Axis(0), &anomalies).select(Axis(1), &kept);
        let kept_labels: Vec<_> = kept.iter().map(|&j| labels[j].clone()).collect();
        let y: Vec<usize> = known.iter().map(|&i| shape[i]).collect();
        let report = openset(pruned.view(), &y, anomaly_z.view(), &kept_labels, &settings.trees).unwrap();
        let top = &report.ranking[0];
        let ok = top.label == "Shape";
        hits += usize::from(ok);
        checks.push(check(
            format!("seed {}: top distance dimension is Shape", t.seed),
            ok,
            format!(
                "predicted class {}, top dim {} labeled {} at {:.3}, next {}",
                report.predicted_class,
                kept[top.dimension],
                top.label,
                top.distance,
                report.ranking.get(1).map_or("-".to_string(), |r| format!("{} at {:.3}", r.label, r.distance))
            ),
        ));
    }
    let mut out = vec![check("Shape on top in at least 2 of 3 seeds", hits >= 2, format!("{hits} of 3"))];
    out.append(&mut checks);
    Outcome { checks: out }
}

// ---------------------------------------------------------------- 4

fn toy_vae(kind: InputKind, seed: u64) -> Vae<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let arch = VaeArch {
        input_dim: 5,
        hidden: vec![4, 3],
        latent: 3,
        input_kind: kind,
        activation: Activation::LeakyRelu(0.01),
    };
    Vae::init(arch, 1.0, seed, &mut rng).unwrap()
}

fn fd_error(model: &Vae<f64>, loss: impl Fn(&Vae<f64>) -> (f64, Vec<f64>)) -> f64 {
    let (_, analytic) = loss(model);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let at = |delta: f64| {
            let mut m = model.clone();
            let mut idx = k;
            for p in m.params_mut() {
                if idx < p.len() {
                    p[idx] += delta;
                    break;
                }
                idx -= p.len();
            }
            loss(&m).0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-3));
    }
    worst
}

fn criterion_4() -> Outcome {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(44);

    let mut worst: f64 = 0.0;
    for kind in [InputKind::Embedding, InputKind::Image] {
        let model = toy_vae(kind, 5);
        let x = match kind {
            InputKind::Embedding => normal(6, 5, &mut rng),
            InputKind::Image => Array2::from_shape_simple_fn((6, 5), || rng.random_range(0.0..1.0)),
        };
        let eps = normal(6, 3, &mut rng);
        worst = worst.max(fd_error(&model, |m| {
            let (l, g) = m.elbo_loss(x.view(), 1.3, eps.view()).unwrap();
            (l.total, g.slices().concat())
        }));
    }
    for rule in [Sharing::Adaptive, Sharing::KnownK(1), Sharing::All] {
        let model = toy_vae(InputKind::Image, 6);
        let x1 = Array2::from_shape_simple_fn((4, 5), || rng.random_range(0.0..1.0));
        let x2 = Array2::from_shape_simple_fn((4, 5), || rng.random_range(0.0..1.0));
        let (e1, e2) = (normal(4, 3, &mut rng), normal(4, 3, &mut rng));
        worst = worst.max(fd_error(&model, |m| {
            let (l, g) = m.adagvae_loss(x1.view(), x2.view(), 0.9, e1.view(), e2.view(), rule).unwrap();
            (l.total, g.slices().concat())
        }));
    }
    checks.push(check("VAE gradients vs central differences < 1e-4", worst < 1e-4, format!("max relative error {worst:.2e}")));

    // composite Simpson over +-12 sd of q(z) [ln q(z) - ln p(z)]
    let mut kl_err: f64 = 0.0;
    for _ in 0..25 {
        let mu: f64 = rng.random_range(-2.5..2.5);
        let lv: f64 = rng.random_range(-4.0..2.5);
        let sd = (0.5 * lv).exp();
        let (a, b, n) = (mu - 12.0 * sd, mu + 12.0 * sd, 20_000);
        let h = (b - a) / n as f64;
        let ln2pi = (2.0 * std::f64::consts::PI).ln();
        let f = |z: f64| {
            let lq = -0.5 * ((z - mu) / sd).powi(2) - sd.ln() - 0.5 * ln2pi;
            let lp = -0.5 * z * z - 0.5 * ln2pi;
            lq.exp() * (lq - lp)
        };
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
        let quad = (f(a) + f(b) + inner) * h / 3.0;
        kl_err = kl_err.max((gauss_kl(&[mu], &[lv])[0] - quad).abs());
    }
    checks.push(check("gauss_kl vs quadrature <= 1e-6", kl_err <= 1e-6, format!("max abs error {kl_err:.2e}")));

    let mut mi_err: f64 = 0.0;
    for _ in 0..20 {
        let (ra, rb) = (rng.random_range(2..9), rng.random_range(2..9));
        let n = rng.random_range(50..2000);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..ra)).collect();
        let b: Vec<usize> = a.iter().map(|&v| if rng.random_bool(0.6) { v % rb } else { rng.random_range(0..rb) }).collect();
        let mut joint = vec![vec![0usize; rb]; ra];
        for (&x, &y) in a.iter().zip(&b) {
            joint[x][y] += 1;
        }
        let nf = n as f64;
        let mut oracle = 0.0;
        for i in 0..ra {
            for j in 0..rb {
                let c = joint[i][j] as f64;
                if c > 0.0 {
                    let pi = joint[i].iter().sum::<usize>() as f64 / nf;
                    let pj = joint.iter().map(|r| r[j]).sum::<usize>() as f64 / nf;
                    oracle += c / nf * (c / nf / (pi * pj)).ln();
                }
            }
        }
        mi_err = mi_err.max((mutual_information(&a, &b) - oracle).abs());
    }
    checks.push(check("MI vs joint-histogram sum <= 1e-12", mi_err <= 1e-12, format!("max abs error {mi_err:.2e}")));

    let mut r_err: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.random_range(3..300);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.3 * v + rng.random_range(-4.0..4.0)).collect();
        let oracle = x.iter().copied().covariance(y.iter().copied()) / (x.iter().std_dev() * y.iter().std_dev());
        r_err = r_err.max((pearson(&x, &y).unwrap() - oracle).abs());
    }
    checks.push(check("Pearson vs covariance / (sd sd) <= 1e-12", r_err <= 1e-12, format!("max abs error {r_err:.2e}")));

    let mut dci_err: f64 = 0.0;
    let mut omes_err: f64 = 0.0;
    for _ in 0..20 {
        let (l, k) = (rng.random_range(2..12), rng.random_range(2..8));
        let p = Array2::from_shape_simple_fn((l, k), || rng.random_range(0.0..1.0));
        let total = p.sum();
        let mut oracle = 0.0;
        for row in p.rows() {
            let s = row.sum();
            let h: f64 = row.iter().map(|&v: &f64| v / s).map(|q: f64| -q * q.log(k as f64)).sum();
            oracle += s / total * (1.0 - h);
        }
        dci_err = dci_err.max((dci_from_importance(&p).score - oracle).abs());

        let a = Array2::from_shape_simple_fn((k, l), || rng.random_range(0.0..1.0));
        let alpha = rng.random_range(0.0..1.0);
        let mut oracle = 0.0;
        for row in a.rows() {
            let (j, top) = row.iter().enumerate().fold((0, -1.0), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
            oracle += alpha * top / a.column(j).sum() + (1.0 - alpha) * top / row.sum();
        }
        omes_err = omes_err.max((omes(&a, alpha) - oracle / k as f64).abs());
    }
    checks.push(check("DCI-D formula <= 1e-12", dci_err <= 1e-12, format!("max abs error {dci_err:.2e}")));
    checks.push(check("OMES* formula <= 1e-12", omes_err <= 1e-12, format!("max abs error {omes_err:.2e}")));
    Outcome { checks }
}

// ---------------------------------------------------------------- 5

fn train_accuracy(x: &Array2<f64>, y: &[usize]) -> f64 {
    fit_gbt(x.view(), y, &GbtConfig::default()).unwrap().accuracy(x.view(), y).unwrap()
}

/// Best single split by scoring every boundary between distinct values.
fn exhaustive_split(x: &Array2<f64>, t: &[f64]) -> (usize, f64, f64) {
    let sse = |idx: &[usize]| {
        let m = idx.iter().map(|&i| t[i]).sum::<f64>() / idx.len() as f64;
        idx.iter().map(|&i| (t[i] - m).powi(2)).sum::<f64>()
    };
    let all: Vec<usize> = (0..t.len()).collect();
    let parent = sse(&all);
    let mut best = (0, f64::NAN, f64::NEG_INFINITY);
    for f in 0..x.ncols() {
        let mut values: Vec<f64> = x.column(f).to_vec();
        values.sort_by(f64::total_cmp);
        values.dedup();
        for w in values.windows(2) {
            let thr = 0.5 * (w[0] + w[1]);
            let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| x[[i, f]] <= thr);
            let gain = parent - sse(&l) - sse(&r);
            if gain > best.2 + 1e-12 {
                best = (f, thr, gain);
            }
        }
    }
    best
}

fn criterion_5() -> Outcome {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(55);

    let x = Array2::from_shape_simple_fn((300, 1), || rng.random_range(-1.0..1.0));
    let y: Vec<usize> = x.column(0).iter().map(|&v| usize::from(v > 0.27)).collect();
    let acc = train_accuracy(&x, &y);
    checks.push(check("1-D threshold training accuracy 100%", acc == 1.0, format!("{:.2}%", 100.0 * acc)));

    let x = Array2::from_shape_simple_fn((400, 2), || rng.random_range(-1.0..1.0));
    let y: Vec<usize> = x.rows().into_iter().map(|r| usize::from((r[0] > 0.0) != (r[1] > 0.0))).collect();
    let acc = train_accuracy(&x, &y);
    checks.push(check("2-D XOR training accuracy 100%", acc == 1.0, format!("{:.2}%", 100.0 * acc)));

    let mut mismatches = 0;
    for trial in 0..30 {
        let n = rng.random_range(5..=200);
        let d = rng.random_range(1..5);
        let x = Array2::from_shape_simple_fn((n, d), || (rng.random_range(0..40) as f64) / 4.0);
        let t: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let tree = fit_tree(&Presorted::new(x.view()).unwrap(), &t, 1, &mean_leaf(&t));
        let (f, thr, gain) = exhaustive_split(&x, &t);
        let same = match tree.nodes[0] {
            Node::Split { feature, threshold, gain: g, .. } => {
                feature == f && (threshold - thr).abs() < 1e-12 && (g - gain).abs() <= 1e-9 * gain.abs().max(1.0)
            }
            Node::Leaf { .. } => !gain.is_finite() || gain <= 1e-12,
        };
        if !same {
            mismatches += 1;
            eprintln!("trial {trial}: tree {:?} vs exhaustive ({f}, {thr}, {gain})", tree.nodes[0]);
        }
    }
    checks.push(check("greedy root split = exhaustive search (30 instances)", mismatches == 0, format!("{mismatches} mismatches")));

    let x = Array2::from_shape_simple_fn((500, 6), || rng.random_range(-1.0..1.0));
    let y: Vec<usize> = x.rows().into_iter().map(|r| usize::from(r[0] + 0.5 * r[1] - r[2] * r[3] > 0.1)).collect();
    let imp = fit_gbt(x.view(), &y, &GbtConfig::default()).unwrap().importance();
    let sum: f64 = imp.iter().sum();
    checks.push(check("importance sums to 1 +- 1e-9", (sum - 1.0).abs() <= 1e-9, format!("{sum:.12}")));

    let x = Array2::from_shape_simple_fn((500, 5), || rng.random_range(-1.0..1.0));
    let y: Vec<usize> = x.column(3).iter().map(|&v| usize::from(v > -0.2)).collect();
    let imp = fit_gbt(x.view(), &y, &GbtConfig::default()).unwrap().importance();
    checks.push(check("single informative feature importance >= 0.99", imp[3] >= 0.99, format!("{:.4}", imp[3])));
    Outcome { checks }
}

// ---------------------------------------------------------------- 6

fn toy_target(rng: &mut ChaCha8Rng) -> (Array2<f32>, TargetData) {
    let centers = normal(3, 8, rng) * 3.0;
    let sample = |n: usize, rng: &mut ChaCha8Rng| {
        let y: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let x = Array2::from_shape_fn((n, 8), |(i, j)| { let e: f64 = StandardNormal.sample(rng); (centers[[y[i], j]] + e) as f32 });
        (x, y)
    };
    let (x_train, y_train) = sample(120, rng);
    let (x_test, y_test) = sample(60, rng);
    (
        x_train.clone(),
        TargetData {
            x_train,
            y_train,
            x_test,
            y_test,
        },
    )
}

fn small_train() -> TrainConfig {
    TrainConfig {
        steps: 60,
        warmup_steps: 20,
        batch: 16,
        latent: 4,
        hidden: Some(vec![8]),
        adam: AdamConfig {
            lr: 1e-3,
            ..Default::default()
        },
        ..TrainConfig::desk()
    }
}

fn criterion_6() -> Outcome {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(66);

    let config = disentlab::config::PipelineConfig::default();
    let (x, target) = toy_target(&mut rng);
    let (ensemble, _) = ModelEnsemble::train(
        &small_train(),
        &config.train.seeds,
        &config.train.betas,
        InputKind::Embedding,
        TrainData::Samples(x.view()),
        Objective::Beta,
    )
    .unwrap();
    let want: HashSet<(u64, u64)> = (0..10).flat_map(|s| [1.0f64, 2.0].map(|b| (s, b.to_bits()))).collect();
    let have: HashSet<(u64, u64)> = ensemble.members.iter().map(|m| (m.seed, m.beta.to_bits())).collect();
    let ok = ensemble.len() == 20 && have == want && ensemble.is_protocol() && PROTOCOL_SEEDS.len() * PROTOCOL_BETAS.len() == 20;
    checks.push(check("default ensemble = 10 seeds x beta {1, 2}", ok, format!("{} members", ensemble.len())));

    // columns with SD exactly 0, 0.049, 0.0501, 1 and a constant offset
    let sds = [0.0, 0.049, 0.0501, 1.0, 0.03];
    let n = 40;
    let z = Array2::from_shape_fn((n, sds.len()), |(i, j)| 5.0 + if i % 2 == 0 { sds[j] } else { -sds[j] });
    let rows: Vec<usize> = (0..n).collect();
    let (_, kept) = prune_inactive(z.view(), &rows, 0.05).unwrap();
    checks.push(check("pruning keeps exactly the columns with train SD >= 0.05", kept == vec![2, 3], format!("kept {kept:?}")));

    let settings = EvalSettings {
        mlp: MlpConfig {
            hidden: vec![16],
            epochs: 20,
            ..MlpConfig::default()
        },
        ..EvalSettings::default()
    };
    let report = downstream_eval(&ensemble, &target, false, &settings).unwrap();
    let mut summary_ok = report.models.len() == 20;
    let mut detail = String::new();
    for (name, s) in [("GBT", &report.gbt), ("MLP", &report.mlp)] {
        let pct: Vec<f64> = s.per_model.iter().map(|a| 100.0 * a).collect();
        let m = pct.iter().sum::<f64>() / pct.len() as f64;
        let sd = (pct.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / pct.len() as f64).sqrt();
        summary_ok &= s.per_model.len() == 20 && (s.mean_pct - m).abs() < 1e-9 && (s.sd_pct - sd).abs() < 1e-9;
        detail += &format!("{name} {:.2} +- {:.2} over {}; ", s.mean_pct, s.sd_pct, s.per_model.len());
    }
    checks.push(check("accuracy = mean and population SD over 20 models", summary_ok, detail.trim_end_matches("; ")));

    let rerun = |x: &Array2<f32>| {
        let (m, log) = train(&small_train(), InputKind::Embedding, TrainData::Samples(x.view()), Objective::Beta).unwrap();
        let bits: Vec<u32> = m.params().concat().iter().map(|v| v.to_bits()).collect();
        (bits, log.losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>())
    };
    let same_model = rerun(&x) == rerun(&x);
    let r2 = downstream_eval(&ensemble, &target, false, &settings).unwrap();
    let same_eval = serde_json::to_string(&report).unwrap() == serde_json::to_string(&r2).unwrap();
    checks.push(check(
        "reference-mode reruns are bit-identical",
        same_model && same_eval,
        format!("training {same_model}, evaluation {same_eval}"),
    ));
    Outcome { checks }
}

// ---------------------------------------------------------------- 7

type Pt = (i64, i64);

/// Hull area by brute force: an edge belongs to the hull when no point lies
/// strictly to its right and no point lies strictly inside it.
fn brute_hull_area2(points: &[Pt]) -> i64 {
    let cross = |o: Pt, a: Pt, b: Pt| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut twice = 0;
    for &a in points {
        for &b in points {
            if a == b {
                continue;
            }
            let outer = points.iter().all(|&p| cross(a, b, p) >= 0);
            let inside = |p: Pt| {
                p != a && p != b && cross(a, b, p) == 0 && (p.0 - a.0) * (p.0 - b.0) <= 0 && (p.1 - a.1) * (p.1 - b.1) <= 0
            };
            if outer && !points.iter().any(|&p| inside(p)) {
                twice += a.0 * b.1 - b.0 * a.1;
            }
        }
    }
    twice
}

fn criterion_7() -> Outcome {
    let mut checks = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(77);

    // the convex unions of pixel squares are the filled rectangles
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let (h, w) = (rng.random_range(1..64), rng.random_range(1..64));
        let (y0, x0) = (rng.random_range(0..h), rng.random_range(0..w));
        let (y1, x1) = (rng.random_range(y0..h), rng.random_range(x0..w));
        let mask: Vec<bool> = (0..h * w).map(|i| (y0..=y1).contains(&(i / w)) && (x0..=x1).contains(&(i % w))).collect();
        worst = worst.max((solidity(&mask, h, w).unwrap() - 1.0).abs());
    }
    checks.push(check("convex mask solidity = 1 +- 1e-6 (200 masks)", worst <= 1e-6, format!("max deviation {worst:.2e}")));

    let (h, w) = (21, 25);
    let plus = |y: usize, x: usize| (7..14).contains(&y) && (2..23).contains(&x) || (3..18).contains(&y) && (9..15).contains(&x);
    let mask: Vec<bool> = (0..h * w).map(|i| plus(i / w, i % w)).collect();
    let mut corners: Vec<Pt> = Vec::new();
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        let (y, x) = ((i / w) as i64, (i % w) as i64);
        corners.extend([(x, y), (x + 1, y), (x, y + 1), (x + 1, y + 1)]);
    }
    corners.sort_unstable();
    corners.dedup();
    let area = mask.iter().filter(|&&m| m).count() as f64;
    let oracle = 2.0 * area / brute_hull_area2(&corners) as f64;
    let got = solidity(&mask, h, w).unwrap();
    checks.push(check("plus-shape solidity vs brute-force hull <= 1e-9", (got - oracle).abs() <= 1e-9, format!("{got:.12} vs {oracle:.12}")));

    let dir = tempfile::tempdir().unwrap();
    let mut exact = 0;
    for i in 0..100 {
        let rank = rng.random_range(0..5);
        let shape: Vec<usize> = (0..rank).map(|_| rng.random_range(0..7)).collect();
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| loop {
                let v = f32::from_bits(rng.random());
                if v.is_finite() {
                    break v;
                }
            })
            .collect();
        let t = Tensor::new(shape.clone(), data).unwrap();
        let bytes = encode(&t).unwrap();
        let path = dir.path().join(format!("t{i}.dtns"));
        write_tensor(&path, &t).unwrap();
        let back = decode(&bytes).unwrap();
        let file = read_tensor(&path).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        let header_ok = &bytes[..8] == b"DTNS\x01\x01\x00\x00" && bytes.len() == 12 + 8 * rank + 4 * n;
        if header_ok && back.shape() == shape && file.shape() == shape && bits(&back) == bits(&t) && bits(&file) == bits(&t) {
            exact += 1;
        }
    }
    checks.push(check("DTNS round trip bit-exact over 100 random tensors", exact == 100, format!("{exact} of 100")));
    Outcome { checks }
}

// ---------------------------------------------------------------- driver

fn main() {
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| args.is_empty() || args.contains(&n);
    let mut results: Vec<(usize, &str, Outcome, f64)> = Vec::new();
    let mut run = |n: usize, name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let out = f();
        let secs = t.elapsed().as_secs_f64();
        println!("criterion {n}: {} ({secs:.1}s) {name}", verdict(out.pass()));
        for c in &out.checks {
            println!("    [{}] {}: {}", verdict(c.pass), c.name, c.detail);
        }
        results.push((n, name, out, secs));
    };

    if wanted(1) {
        run(1, "metric oracles", &mut criterion_1);
    }
    if [2, 3, 8].iter().any(|&n| wanted(n)) {
        let source = desk_images(&["PosX", "PosY"]);
        let mut trained = Vec::new();
        run(2, "weak supervision beats unsupervised", &mut || {
            let (out, t) = criterion_2(&source);
            trained = t;
            out
        });
        if wanted(3) {
            run(3, "disentanglement persists under finetuning", &mut || criterion_3(&source, &trained));
        }
        if wanted(8) {
            run(8, "open-set distance ranks Shape first", &mut || criterion_8(&source, &trained));
        }
    }
    if wanted(4) {
        run(4, "numerical correctness", &mut criterion_4);
    }
    if wanted(5) {
        run(5, "trees", &mut criterion_5);
    }
    if wanted(6) {
        run(6, "protocol fidelity", &mut criterion_6);
    }
    if wanted(7) {
        run(7, "geometry and tensor files", &mut criterion_7);
    }

    println!();
    for (n, name, out, _) in &results {
        println!("criterion {n}: {} {name}", verdict(out.pass()));
    }
    let broken: Vec<usize> = results.iter().filter(|(n, _, o, _)| (4..=7).contains(n) && !o.pass()).map(|r| r.0).collect();
    if !broken.is_empty() {
        eprintln!("deterministic criteria failed: {broken:?}");
        std::process::exit(1);
    }
}
