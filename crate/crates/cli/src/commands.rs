use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use disentlab::analysis::{correlate, dimension_for, export_scatter, handcrafted, openset, read_scatter, scatter_svg, HandcraftedFeatures};
use disentlab::config::{PipelineConfig, Provenance};
use disentlab::downstream::{ablate_no_vae, evaluate as evaluate_downstream, grouped_importance};
use disentlab::metrics::{evaluate as evaluate_disent, explicitness, label_dimensions, prune_inactive, AssociationMatrix, DimensionLabel};
use disentlab::synthgen::{dataset_preset, enumerate, foreground_mask};
use disentlab::tensorio::{load_png, pad_and_resize, read_tensor, DatasetManifest, ManifestRow, Split, Tensor};
use disentlab::vae::{finetune as finetune_model, load_model, EnsembleMember, FinetuneConfig, ModelEnsemble, Objective, PairSource, TrainData, VaeModel};
use ndarray::{Array2, Axis};
use serde::Serialize;

use crate::dataset::Dataset;
use crate::report::{self, DisentEntry, DisentResult, DownstreamResult, OpenSetResult};
use crate::{Command, Failure, YesNo};

const PROVENANCE_FILE: &str = "provenance.json";

fn invalid(msg: impl Into<String>) -> Failure {
    Failure::Validation(msg.into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

pub fn run(command: Command, config: &PipelineConfig) -> Result<(), Failure> {
    let prov = Provenance::of(config);
    let data = |p: PathBuf| config.data_path(&p);
    let data_opt = |p: Option<PathBuf>| p.map(|p| config.data_path(&p));
    match command {
        Command::Generate { out, label } => generate(config, &data(out), label.as_deref(), &prov),
        Command::Ingest {
            images,
            features,
            labels,
            masks,
            out,
        } => ingest(config, data_opt(images), data_opt(features), &data(labels), data_opt(masks), &data(out), &prov),
        Command::TrainSource { data: d, out } => train_source(config, &data(d), &data(out), &prov),
        Command::Finetune { ensemble, target, out } => finetune(config, &data(ensemble), &data(target), &data(out), &prov),
        Command::EvalDisent {
            model,
            ensemble,
            raw,
            source,
            out,
        } => eval_disent(config, data_opt(model), data_opt(ensemble), raw, &data(source), &out, &prov),
        Command::EvalDownstream {
            ensemble,
            target,
            finetuned,
            no_vae,
            source,
            out,
        } => eval_downstream(config, data_opt(ensemble), &data(target), finetuned == YesNo::Yes, no_vae, data_opt(source), &out, &prov),
        Command::Correlate {
            model,
            data: d,
            images,
            source,
            out,
        } => correlate_cmd(config, &data(model), &data(d), data_opt(images), data_opt(source), &out, &prov),
        Command::Openset {
            model,
            data: d,
            holdout,
            source,
            out,
        } => openset_cmd(config, &data(model), &data(d), &holdout, data_opt(source), &out, &prov),
        Command::Scatter {
            model,
            data: d,
            dims,
            source,
            color_by,
            out,
            svg,
        } => scatter(config, &data(model), &data(d), &dims, data_opt(source), color_by.as_deref(), &out, svg.as_deref(), &prov),
        Command::Report { inputs, out } => render_reports(&inputs, out.as_deref()),
    }
}

/// Train/test assignment with the given test share; a zero share marks every row train.
fn assign_split(manifest: DatasetManifest, test_fraction: f64, seed: u64) -> Result<DatasetManifest, Failure> {
    if test_fraction == 0.0 {
        let mut m = manifest;
        for r in m.rows.iter_mut().filter(|r| r.split.is_none()) {
            r.split = Some(Split::Train);
        }
        return Ok(m);
    }
    Ok(manifest.split(1.0 - test_fraction, seed)?)
}

fn generate(config: &PipelineConfig, out: &Path, label: Option<&str>, prov: &Provenance) -> Result<(), Failure> {
    let g = &config.generate;
    let freeze: Vec<&str> = g.freeze.iter().map(String::as_str).collect();
    let (space, spec) = dataset_preset(g.scale, &freeze)?;
    let label_k = label.map(|l| space.index_of(l)).transpose()?;
    let names: Vec<String> = space.names().into_iter().map(String::from).collect();
    let side = spec.image_side;
    log::info!("rendering {} images at {side} px", space.grid_size().min(g.budget));
    let mut data = Vec::new();
    let mut masks = Vec::new();
    let mut manifest = DatasetManifest::new(names.clone());
    for (i, (t, image)) in enumerate(&space, &spec, g.budget)?.enumerate() {
        masks.extend(foreground_mask(&image).into_iter().map(|b| if b { 1.0f32 } else { 0.0 }));
        data.extend_from_slice(&image.data);
        let mut row = ManifestRow::new(format!("img{i:06}"), i);
        row.mask_row = Some(i);
        // stratify on the label factor, or on a single group when unlabeled
        row.class_label = Some(label_k.map_or_else(|| "all".to_string(), |k| format!("{}{}", names[k].to_lowercase(), t[k])));
        row.factors = t.0;
        manifest.rows.push(row);
    }
    let n = manifest.len();
    let mut manifest = assign_split(manifest, g.test_fraction, g.seed)?;
    if label_k.is_none() {
        for r in &mut manifest.rows {
            r.class_label = None;
        }
    }
    let ds = Dataset {
        dir: out.to_path_buf(),
        tensor: Tensor::new(vec![n, side, side, 3], data)?,
        masks: Some(Tensor::new(vec![n, side, side], masks)?),
        manifest,
        space: Some(space),
    };
    ds.save()?;
    write_json(&out.join(PROVENANCE_FILE), prov)?;
    log::info!("wrote {n} rows to {}", out.display());
    Ok(())
}

fn binary_mask(image: &disentlab::tensorio::Image) -> Vec<f32> {
    image
        .data
        .chunks_exact(image.channels)
        .map(|px| if px[0] > 0.5 { 1.0 } else { 0.0 })
        .collect()
}

fn ingest(
    config: &PipelineConfig,
    images: Option<PathBuf>,
    features: Option<PathBuf>,
    labels: &Path,
    masks: Option<PathBuf>,
    out: &Path,
    prov: &Provenance,
) -> Result<(), Failure> {
    let input = DatasetManifest::read(labels)?;
    if input.is_empty() {
        return Err(invalid(format!("{} lists no rows", labels.display())));
    }
    let side = config.ingest.image_side;
    let (tensor, mask_tensor) = match (images, features) {
        (Some(dir), _) => {
            let mut data = Vec::new();
            let mut mask_data = Vec::new();
            for r in &input.rows {
                let image = pad_and_resize(&load_png(dir.join(&r.id))?, side)?;
                data.extend_from_slice(&image.data);
                if let Some(mdir) = &masks {
                    mask_data.extend(binary_mask(&pad_and_resize(&load_png(mdir.join(&r.id))?, side)?));
                }
            }
            let n = input.len();
            let masks = if masks.is_some() { Some(Tensor::new(vec![n, side, side], mask_data)?) } else { None };
            (Tensor::new(vec![n, side, side, 3], data)?, masks)
        }
        (None, Some(path)) => {
            let t = read_tensor(&path)?;
            input.validate(Some(t.rows()))?;
            let rows: Vec<&[f32]> = input.rows.iter().map(|r| t.row(r.tensor_row)).collect();
            (Tensor::stack(&t.shape()[1..], &rows)?, None)
        }
        (None, None) => return Err(invalid("ingest needs --images or --features")),
    };
    let mut manifest = input;
    for (i, r) in manifest.rows.iter_mut().enumerate() {
        r.tensor_row = i;
        r.mask_row = mask_tensor.as_ref().map(|_| i);
    }
    let manifest = assign_split(manifest, config.ingest.test_fraction, config.ingest.seed)?;
    let n = manifest.len();
    Dataset {
        dir: out.to_path_buf(),
        tensor,
        manifest,
        masks: mask_tensor,
        space: None,
    }
    .save()?;
    write_json(&out.join(PROVENANCE_FILE), prov)?;
    log::info!("wrote {n} rows to {}", out.display());
    Ok(())
}

#[derive(Serialize)]
struct MemberLog<'a> {
    seed: u64,
    beta: f64,
    losses: &'a [f32],
}

fn train_source(config: &PipelineConfig, data: &Path, out: &Path, prov: &Provenance) -> Result<(), Failure> {
    let ds = Dataset::load(data)?;
    let x = ds.matrix(&ds.all_rows());
    let t = &config.train;
    let pairs;
    let train_data = match t.objective {
        Objective::Beta => TrainData::Samples(x.view()),
        Objective::Ada => {
            pairs = PairSource::new(ds.factor_space()?, &ds.tuples())?;
            TrainData::Pairs {
                data: x.view(),
                source: &pairs,
            }
        }
    };
    log::info!("{} models on {} rows of {} features", t.seeds.len() * t.betas.len(), x.nrows(), x.ncols());
    let (ensemble, logs) = ModelEnsemble::train(&t.member(0, 1.0), &t.seeds, &t.betas, ds.kind(), train_data, t.objective)?;
    ensemble.save(out)?;
    let entries: Vec<MemberLog> = ensemble
        .members
        .iter()
        .zip(&logs)
        .map(|(m, l)| MemberLog {
            seed: m.seed,
            beta: m.beta,
            losses: &l.losses,
        })
        .collect();
    write_json(&out.join("train_log.json"), &entries)?;
    write_json(&out.join(PROVENANCE_FILE), prov)
}

fn finetune(config: &PipelineConfig, ensemble: &Path, target: &Path, out: &Path, prov: &Provenance) -> Result<(), Failure> {
    let source = ModelEnsemble::load(ensemble)?;
    let ds = Dataset::load(target)?;
    let x = ds.matrix(&ds.split_rows(Split::Train));
    let mut members = Vec::new();
    for m in &source.members {
        log::info!("finetuning seed {} beta {}", m.seed, m.beta);
        let cfg = FinetuneConfig {
            seed: config.finetune.seed.wrapping_add(m.seed),
            ..config.finetune.clone()
        };
        let (model, _) = finetune_model(&m.model, x.view(), &cfg)?;
        members.push(EnsembleMember {
            seed: m.seed,
            beta: m.beta,
            model,
        });
    }
    ModelEnsemble::new(members)?.save(out)?;
    write_json(&out.join(PROVENANCE_FILE), prov)
}

/// Dimension labels of `model` on a factor-annotated dataset.
fn labels_for(model: &VaeModel, ds: &Dataset, bins: usize) -> Result<Vec<DimensionLabel>, Failure> {
    let rows = ds.all_rows();
    let z = model.encode_mean(ds.matrix(&rows).view())?;
    let rep = ds.representation(z, &rows)?;
    Ok(label_dimensions(&AssociationMatrix::compute(&rep, bins)))
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = values.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn eval_disent(
    config: &PipelineConfig,
    model: Option<PathBuf>,
    ensemble: Option<PathBuf>,
    raw: bool,
    source: &Path,
    out: &Path,
    prov: &Provenance,
) -> Result<(), Failure> {
    let ds = Dataset::load(source)?;
    let rows = ds.all_rows();
    let x = ds.matrix(&rows);
    let train = ds.manifest.split_indices(Split::Train);
    let test = ds.manifest.split_indices(Split::Test);
    let has_split = !train.is_empty() && !test.is_empty();
    let trees = &config.eval.trees;
    let mut entries = Vec::new();
    if raw {
        if !has_split {
            return Err(invalid(format!("{} has no train/test split for explicitness", source.display())));
        }
        let rep = ds.representation(x.mapv(f64::from), &rows)?;
        entries.push(DisentEntry {
            seed: None,
            beta: None,
            scores: None,
            explicitness: Some(explicitness(&rep, &train, &test, trees)?),
        });
    } else {
        let members = match (model, ensemble) {
            (Some(p), _) => {
                let m = load_model(&p)?;
                vec![EnsembleMember {
                    seed: m.seed,
                    beta: m.beta,
                    model: m,
                }]
            }
            (None, Some(p)) => ModelEnsemble::load(&p)?.members,
            (None, None) => return Err(invalid("eval-disent needs --model, --ensemble or --raw")),
        };
        for m in &members {
            log::info!("scoring seed {} beta {}", m.seed, m.beta);
            let rep = ds.representation(m.model.encode_mean(x.view())?, &rows)?;
            let scores = evaluate_disent(&rep, &config.eval.metrics())?;
            let expl = if has_split { Some(explicitness(&rep, &train, &test, trees)?) } else { None };
            entries.push(DisentEntry {
                seed: Some(m.seed),
                beta: Some(m.beta),
                scores: Some(scores),
                explicitness: expl,
            });
        }
    }
    let scored = || entries.iter().filter_map(|e| e.scores.as_ref());
    let result = DisentResult {
        mean_mig: mean_of(scored().map(|s| s.mig)),
        mean_dci_d: mean_of(scored().map(|s| s.dci_d)),
        mean_omes: mean_of(scored().map(|s| s.omes)),
        entries,
    };
    report::write(out, "eval-disent", prov, result)
}

#[allow(clippy::too_many_arguments)]
fn eval_downstream(
    config: &PipelineConfig,
    ensemble: Option<PathBuf>,
    target: &Path,
    finetuned: bool,
    no_vae: bool,
    source: Option<PathBuf>,
    out: &Path,
    prov: &Provenance,
) -> Result<(), Failure> {
    let ds = Dataset::load(target)?;
    let (classes, td) = ds.target()?;
    let settings = config.eval.downstream();
    let result = if no_vae {
        DownstreamResult {
            classes,
            report: ablate_no_vae(&td, &config.train.seeds, &settings)?,
            grouped_importance: None,
        }
    } else {
        let path = ensemble.ok_or_else(|| invalid("eval-downstream needs --ensemble unless --no-vae"))?;
        let ens = ModelEnsemble::load(&path)?;
        let report = evaluate_downstream(&ens, &td, finetuned, &settings)?;
        let grouped = match source {
            None => None,
            Some(src) => {
                let sds = Dataset::load(&src)?;
                let labels = ens
                    .members
                    .iter()
                    .map(|m| Ok(labels_for(&m.model, &sds, config.eval.bins)?.into_iter().map(|l| l.label).collect()))
                    .collect::<Result<Vec<Vec<String>>, Failure>>()?;
                let importance: Vec<Vec<f64>> = report.models.iter().map(|m| m.importance.clone()).collect();
                Some(grouped_importance(&importance, &labels)?)
            }
        };
        DownstreamResult {
            classes,
            report,
            grouped_importance: grouped,
        }
    };
    report::write(out, "eval-downstream", prov, result)
}

fn correlate_cmd(
    config: &PipelineConfig,
    model: &Path,
    data: &Path,
    images: Option<PathBuf>,
    source: Option<PathBuf>,
    out: &Path,
    prov: &Provenance,
) -> Result<(), Failure> {
    let model = load_model(model)?;
    let ds = Dataset::load(data)?;
    let src = source.map(|p| Dataset::load(&p)).transpose()?;
    let labels = labels_for(&model, src.as_ref().unwrap_or(&ds), config.eval.bins)?;
    let img = images.map(|p| Dataset::load(&p)).transpose()?;
    let img = img.as_ref().unwrap_or(&ds);
    let by_id: HashMap<&str, usize> = img.manifest.rows.iter().enumerate().map(|(i, r)| (r.id.as_str(), i)).collect();
    let rows = ds.all_rows();
    let features = rows
        .iter()
        .map(|&i| {
            let id = &ds.manifest.rows[i].id;
            let k = *by_id
                .get(id.as_str())
                .ok_or_else(|| invalid(format!("id `{id}` missing from {}", img.dir.display())))?;
            let image = img.image(k)?;
            let mask = img.mask(k, &image)?;
            Ok(handcrafted(&image, &mask)?)
        })
        .collect::<Result<Vec<HandcraftedFeatures>, Failure>>()?;
    let z = model.encode_mean(ds.matrix(&rows).view())?;
    report::write(out, "correlate", prov, correlate(&features, z.view(), &labels)?)
}

fn openset_cmd(config: &PipelineConfig, model: &Path, data: &Path, holdout: &str, source: Option<PathBuf>, out: &Path, prov: &Provenance) -> Result<(), Failure> {
    let model = load_model(model)?;
    let ds = Dataset::load(data)?;
    let src = source.map(|p| Dataset::load(&p)).transpose()?;
    let labels = labels_for(&model, src.as_ref().unwrap_or(&ds), config.eval.bins)?;
    let (classes, ids) = ds.classes()?;
    let h = classes
        .iter()
        .position(|c| c == holdout)
        .ok_or_else(|| invalid(format!("unknown class `{holdout}`; classes are {}", classes.join(", "))))?;
    let remaining: Vec<String> = classes.iter().enumerate().filter(|&(k, _)| k != h).map(|(_, c)| c.clone()).collect();
    let remap = |k: usize| if k > h { k - 1 } else { k };
    let train: Vec<usize> = ds.split_rows(Split::Train).into_iter().filter(|&i| ids[i] != h).collect();
    let anomaly: Vec<usize> = ds.all_rows().into_iter().filter(|&i| ids[i] == h).collect();
    if train.is_empty() {
        return Err(invalid("no training rows outside the held-out class"));
    }
    let ztr = model.encode_mean(ds.matrix(&train).view())?;
    let za = model.encode_mean(ds.matrix(&anomaly).view())?;
    let all: Vec<usize> = (0..train.len()).collect();
    let (ptr, kept) = prune_inactive(ztr.view(), &all, config.eval.prune_threshold)?;
    let pa = za.select(Axis(1), &kept);
    let kept_labels: Vec<DimensionLabel> = kept.iter().map(|&j| labels[j].clone()).collect();
    let ytr: Vec<usize> = train.iter().map(|&i| remap(ids[i])).collect();
    let rep = openset(ptr.view(), &ytr, pa.view(), &kept_labels, &config.eval.trees)?;
    let result = OpenSetResult {
        holdout: holdout.to_string(),
        predicted: remaining[rep.predicted_class].clone(),
        kept_dims: kept,
        report: rep,
    };
    report::write(out, "openset", prov, result)
}

/// A dimension index or the label of the most confident matching dimension.
fn resolve_dim(token: &str, labels: &[DimensionLabel]) -> Result<usize, Failure> {
    let token = token.trim();
    let j = match token.parse::<usize>() {
        Ok(j) => j,
        Err(_) => dimension_for(labels, token).ok_or_else(|| {
            let have: Vec<&str> = labels.iter().map(|l| l.label.as_str()).collect();
            invalid(format!("no dimension labeled `{token}`; labels are {}", have.join(", ")))
        })?,
    };
    if j >= labels.len() {
        return Err(invalid(format!("dimension {j} out of range for {} dimensions", labels.len())));
    }
    Ok(j)
}

#[allow(clippy::too_many_arguments)]
fn scatter(
    config: &PipelineConfig,
    model: &Path,
    data: &Path,
    dims: &str,
    source: Option<PathBuf>,
    color_by: Option<&str>,
    out: &Path,
    svg: Option<&Path>,
    prov: &Provenance,
) -> Result<(), Failure> {
    let model = load_model(model)?;
    let ds = Dataset::load(data)?;
    let src = source.map(|p| Dataset::load(&p)).transpose()?;
    let labels = labels_for(&model, src.as_ref().unwrap_or(&ds), config.eval.bins)?;
    let tokens: Vec<&str> = dims.split(',').collect();
    if tokens.len() != 2 {
        return Err(invalid(format!("--dims takes two entries, got `{dims}`")));
    }
    let (a, b) = (resolve_dim(tokens[0], &labels)?, resolve_dim(tokens[1], &labels)?);
    let classes: Vec<String> = match color_by {
        Some(f) => {
            let names = &ds.manifest.factor_names;
            let k = names
                .iter()
                .position(|n| n.eq_ignore_ascii_case(f))
                .ok_or_else(|| invalid(format!("no factor `{f}` in {}", data.display())))?;
            ds.manifest.rows.iter().map(|r| format!("{}{}", names[k].to_lowercase(), r.factors[k])).collect()
        }
        None => ds
            .manifest
            .rows
            .iter()
            .map(|r| r.class_label.clone().ok_or_else(|| invalid(format!("id `{}` has no class_label; use --color-by", r.id))))
            .collect::<Result<_, _>>()?,
    };
    let z: Array2<f64> = model.encode_mean(ds.matrix(&ds.all_rows()).view())?;
    let table = export_scatter(z.view(), &classes, (a, b), (&labels[a].label, &labels[b].label))?;
    let text = format!("# config {}\n{table}", prov.config_hash);
    fs::write(out, &text).map_err(|e| Failure::Runtime(format!("{}: {e}", out.display())))?;
    if let Some(p) = svg {
        fs::write(p, scatter_svg(&read_scatter(&text)?)).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display())))?;
    }
    Ok(())
}

fn render_reports(inputs: &[PathBuf], out: Option<&Path>) -> Result<(), Failure> {
    let mut md = String::from("# Results\n\n");
    for p in inputs {
        let text = fs::read_to_string(p).map_err(|e| invalid(format!("{}: {e}", p.display())))?;
        md.push_str(&report::render(p, &text)?);
        md.push('\n');
    }
    match out {
        Some(p) => fs::write(p, md).map_err(|e| Failure::Runtime(format!("{}: {e}", p.display()))),
        None => {
            print!("{md}");
            Ok(())
        }
    }
}
