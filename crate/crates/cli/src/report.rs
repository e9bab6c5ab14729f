//! Report envelopes and their markdown rendering.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use disentlab::analysis::{Correlation, OpenSetReport};
use disentlab::config::Provenance;
use disentlab::downstream::{EvalReport, GroupImportance};
use disentlab::metrics::{DisentanglementReport, ExplicitnessReport};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::Failure;

#[derive(Debug, Serialize, Deserialize)]
pub struct Envelope<T> {
    pub kind: String,
    pub provenance: Provenance,
    pub result: T,
}

pub fn write<T: Serialize>(path: &Path, kind: &str, provenance: &Provenance, result: T) -> Result<(), Failure> {
    let env = Envelope {
        kind: kind.to_string(),
        provenance: provenance.clone(),
        result,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(&env).map_err(|e| Failure::Runtime(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    log::info!("wrote {}", path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisentEntry {
    pub seed: Option<u64>,
    pub beta: Option<f64>,
    pub scores: Option<DisentanglementReport>,
    pub explicitness: Option<ExplicitnessReport>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisentResult {
    pub entries: Vec<DisentEntry>,
    pub mean_mig: Option<f64>,
    pub mean_dci_d: Option<f64>,
    pub mean_omes: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DownstreamResult {
    pub classes: Vec<String>,
    pub report: EvalReport,
    pub grouped_importance: Option<Vec<GroupImportance>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OpenSetResult {
    pub holdout: String,
    pub predicted: String,
    pub kept_dims: Vec<usize>,
    pub report: OpenSetReport,
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn opt(v: Option<f64>, f: fn(f64) -> String) -> String {
    v.map_or_else(|| "n/a".to_string(), f)
}

fn disent(r: &DisentResult, out: &mut String) {
    let _ = writeln!(out, "| model | MIG | DCI-D | OMES* | explicitness |\n|---|---|---|---|---|");
    for e in &r.entries {
        let name = match (e.seed, e.beta) {
            (Some(s), Some(b)) => format!("seed {s}, beta {b}"),
            _ => "features".to_string(),
        };
        let s = e.scores.as_ref();
        let _ = writeln!(
            out,
            "| {name} | {} | {} | {} | {} |",
            opt(s.map(|s| s.mig), pct),
            opt(s.map(|s| s.dci_d), pct),
            opt(s.map(|s| s.omes), pct),
            opt(e.explicitness.as_ref().and_then(|x| x.all), pct),
        );
    }
    if r.entries.len() > 1 {
        let _ = writeln!(out, "| mean | {} | {} | {} | |", opt(r.mean_mig, pct), opt(r.mean_dci_d, pct), opt(r.mean_omes, pct));
    }
    if let Some(x) = r.entries.first().and_then(|e| e.explicitness.as_ref()) {
        let _ = writeln!(out, "\nExplicitness per factor (first entry):\n");
        for f in &x.per_factor {
            let _ = writeln!(out, "- {}: {}", f.factor, opt(f.accuracy, pct));
        }
    }
}

fn downstream(r: &DownstreamResult, out: &mut String) {
    let e = &r.report;
    let mode = if e.no_vae {
        "raw features"
    } else if e.finetuned {
        "finetuned"
    } else {
        "source only"
    };
    let _ = writeln!(out, "Input: {mode}, {} models, classes: {}\n", e.models.len(), r.classes.join(", "));
    let _ = writeln!(out, "| classifier | accuracy (%) |\n|---|---|");
    let _ = writeln!(out, "| GBT | {:.2} ± {:.2} |", e.gbt.mean_pct, e.gbt.sd_pct);
    let _ = writeln!(out, "| MLP | {:.2} ± {:.2} |", e.mlp.mean_pct, e.mlp.sd_pct);
    if let Some(g) = &r.grouped_importance {
        let _ = writeln!(out, "\n| factor | importance |\n|---|---|");
        for x in g {
            let _ = writeln!(out, "| {} | {:.3} ± {:.3} |", x.label, x.mean, x.sd);
        }
    }
}

fn correlations(r: &[Correlation], out: &mut String) {
    let _ = writeln!(out, "| feature | factor | dimension | r |\n|---|---|---|---|");
    for c in r {
        let dim = c.dimension.map_or_else(|| "none".to_string(), |d| d.to_string());
        let _ = writeln!(out, "| {} | {} | {dim} | {} |", c.feature, c.factor, opt(c.r, |v| format!("{v:.3}")));
    }
}

fn openset(r: &OpenSetResult, out: &mut String) {
    let _ = writeln!(out, "Held-out `{}` is predicted as `{}`.\n", r.holdout, r.predicted);
    let _ = writeln!(out, "| rank | dimension | label | distance |\n|---|---|---|---|");
    for (i, d) in r.report.ranking.iter().enumerate() {
        let _ = writeln!(out, "| {} | {} | {} | {:.3} |", i + 1, r.kept_dims[d.dimension], d.label, d.distance);
    }
}

/// Markdown for one report file; unknown kinds are listed by name only.
pub fn render(path: &Path, text: &str) -> Result<String, Failure> {
    let bad = |e: serde_json::Error| Failure::Validation(format!("{}: {e}", path.display()));
    let env: Envelope<Value> = serde_json::from_str(text).map_err(bad)?;
    let mut out = format!("## {} ({})\n\nconfig {}\n\n", env.kind, path.display(), &env.provenance.config_hash[..12]);
    match env.kind.as_str() {
        "eval-disent" => disent(&serde_json::from_value(env.result).map_err(bad)?, &mut out),
        "eval-downstream" => downstream(&serde_json::from_value(env.result).map_err(bad)?, &mut out),
        "correlate" => correlations(&serde_json::from_value::<Vec<Correlation>>(env.result).map_err(bad)?, &mut out),
        "openset" => openset(&serde_json::from_value(env.result).map_err(bad)?, &mut out),
        other => {
            let _ = writeln!(out, "(no table for `{other}`)");
        }
    }
    Ok(out)
}
