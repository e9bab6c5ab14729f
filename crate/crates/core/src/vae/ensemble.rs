use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{load_model, save_model, train, InputKind, Objective, TrainConfig, TrainData, TrainLog, VaeModel};
use crate::{Error, Result};

/// Seeds of the reference protocol: 10 seeds x beta in {1, 2}.
pub const PROTOCOL_SEEDS: [u64; 10] = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
pub const PROTOCOL_BETAS: [f64; 2] = [1.0, 2.0];

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleMember {
    pub seed: u64,
    pub beta: f64,
    pub model: VaeModel,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelEnsemble {
    pub members: Vec<EnsembleMember>,
}

#[derive(Serialize, Deserialize)]
struct Index {
    members: Vec<IndexEntry>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    seed: u64,
    beta: f64,
    dir: String,
}

fn member_dir(seed: u64, beta: f64) -> String {
    format!("seed{seed}_beta{beta}")
}

impl ModelEnsemble {
    pub fn new(members: Vec<EnsembleMember>) -> Result<Self> {
        let e = Self { members };
        e.validate()?;
        Ok(e)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// `(seed, beta)` pairs must be unique.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for m in &self.members {
            if !seen.insert((m.seed, m.beta.to_bits())) {
                return Err(Error::invalid(format!(
                    "duplicate ensemble member seed {} beta {}",
                    m.seed, m.beta
                )));
            }
        }
        Ok(())
    }

    /// True when the members are exactly the 10 protocol seeds crossed with beta in {1, 2}.
    pub fn is_protocol(&self) -> bool {
        let want: HashSet<(u64, u64)> = PROTOCOL_SEEDS
            .iter()
            .flat_map(|&s| PROTOCOL_BETAS.iter().map(move |b| (s, b.to_bits())))
            .collect();
        let have: HashSet<(u64, u64)> = self.members.iter().map(|m| (m.seed, m.beta.to_bits())).collect();
        self.members.len() == want.len() && have == want
    }

    /// Trains one model per `(seed, beta)` in seed-major order.
    pub fn train(
        base: &TrainConfig,
        seeds: &[u64],
        betas: &[f64],
        kind: InputKind,
        data: TrainData<'_>,
        objective: Objective,
    ) -> Result<(Self, Vec<TrainLog>)> {
        let mut members = Vec::new();
        let mut logs = Vec::new();
        for &seed in seeds {
            for &beta in betas {
                let config = TrainConfig {
                    seed,
                    beta,
                    ..base.clone()
                };
                log::info!("training seed {seed} beta {beta}");
                let (model, log) = train(&config, kind, data, objective)?;
                members.push(EnsembleMember { seed, beta, model });
                logs.push(log);
            }
        }
        Ok((Self::new(members)?, logs))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut index = Index { members: Vec::new() };
        for m in &self.members {
            let sub = member_dir(m.seed, m.beta);
            save_model(&m.model, dir.join(&sub))?;
            index.members.push(IndexEntry {
                seed: m.seed,
                beta: m.beta,
                dir: sub,
            });
        }
        let path = dir.join("ensemble.json");
        fs::write(&path, serde_json::to_string_pretty(&index)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("ensemble.json");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let index: Index = serde_json::from_str(&text)?;
        let members = index
            .members
            .into_iter()
            .map(|e| {
                Ok(EnsembleMember {
                    seed: e.seed,
                    beta: e.beta,
                    model: load_model(dir.join(e.dir))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(members)
    }
}
