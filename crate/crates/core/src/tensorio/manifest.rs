use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub id: String,
    pub tensor_row: usize,
    pub class_label: Option<String>,
    pub split: Option<Split>,
    pub mask_row: Option<usize>,
    /// One value per entry of [`DatasetManifest::factor_names`].
    pub factors: Vec<usize>,
}

impl ManifestRow {
    pub fn new(id: impl Into<String>, tensor_row: usize) -> Self {
        Self {
            id: id.into(),
            tensor_row,
            class_label: None,
            split: None,
            mask_row: None,
            factors: Vec::new(),
        }
    }
}

/// CSV manifest describing the rows of a companion tensor file.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetManifest {
    pub factor_names: Vec<String>,
    pub rows: Vec<ManifestRow>,
}

const FIXED: [&str; 5] = ["id", "tensor_row", "class_label", "split", "mask_row"];

fn parse_opt<T: std::str::FromStr>(field: Option<&str>, col: &str, line: usize) -> Result<Option<T>> {
    match field.map(str::trim) {
        None | Some("") => Ok(None),
        Some(s) => s
            .parse()
            .map(Some)
            .map_err(|_| Error::invalid(format!("row {line}: bad `{col}` value `{s}`"))),
    }
}

impl DatasetManifest {
    pub fn new(factor_names: Vec<String>) -> Self {
        Self {
            factor_names,
            rows: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn validate(&self, tensor_rows: Option<usize>) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::invalid(format!("duplicate id `{}`", r.id)));
            }
            if let Some(n) = tensor_rows {
                if r.tensor_row >= n {
                    return Err(Error::invalid(format!(
                        "id `{}`: tensor_row {} beyond tensor of {n} rows",
                        r.id, r.tensor_row
                    )));
                }
            }
            if r.factors.len() != self.factor_names.len() {
                return Err(Error::invalid(format!(
                    "id `{}`: {} factor values for {} factor columns",
                    r.id,
                    r.factors.len(),
                    self.factor_names.len()
                )));
            }
        }
        Ok(())
    }

    pub fn from_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let col = |name: &str| headers.iter().position(|h| h == name);
        let id_col = col("id").ok_or_else(|| Error::invalid("manifest lacks `id` column"))?;
        let row_col = col("tensor_row").ok_or_else(|| Error::invalid("manifest lacks `tensor_row` column"))?;
        let (label_col, split_col, mask_col) = (col("class_label"), col("split"), col("mask_row"));
        let mut factor_cols = Vec::new();
        let mut factor_names = Vec::new();
        for (i, h) in headers.iter().enumerate() {
            if let Some(name) = h.strip_prefix("factor_") {
                factor_cols.push(i);
                factor_names.push(name.to_string());
            } else if !FIXED.contains(&h) {
                return Err(Error::invalid(format!("unknown manifest column `{h}`")));
            }
        }
        let mut rows = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let get = |c: Option<usize>| c.and_then(|c| rec.get(c));
            let tensor_row = parse_opt(get(Some(row_col)), "tensor_row", line)?
                .ok_or_else(|| Error::invalid(format!("row {line}: empty tensor_row")))?;
            let factors = factor_cols
                .iter()
                .zip(&factor_names)
                .map(|(&c, name)| {
                    parse_opt(rec.get(c), name, line)?.ok_or_else(|| {
                        Error::invalid(format!("row {line}: factor `{name}` missing"))
                    })
                })
                .collect::<Result<Vec<usize>>>()?;
            rows.push(ManifestRow {
                id: get(Some(id_col)).unwrap_or_default().to_string(),
                tensor_row,
                class_label: get(label_col).filter(|s| !s.is_empty()).map(str::to_string),
                split: parse_opt(get(split_col), "split", line)?,
                mask_row: parse_opt(get(mask_col), "mask_row", line)?,
                factors,
            });
        }
        let m = Self { factor_names, rows };
        m.validate(None)?;
        Ok(m)
    }

    pub fn to_writer<W: std::io::Write>(&self, writer: W) -> Result<()> {
        self.validate(None)?;
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = FIXED.iter().map(|s| s.to_string()).collect();
        header.extend(self.factor_names.iter().map(|n| format!("factor_{n}")));
        wtr.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.id.clone(),
                r.tensor_row.to_string(),
                r.class_label.clone().unwrap_or_default(),
                r.split.map(|s| s.to_string()).unwrap_or_default(),
                r.mask_row.map(|m| m.to_string()).unwrap_or_default(),
            ];
            rec.extend(r.factors.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("<manifest>", e))?;
        Ok(())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::from_reader(std::io::BufReader::new(f))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.to_writer(std::io::BufWriter::new(f))
    }

    /// Sorted distinct class labels.
    pub fn classes(&self) -> Vec<String> {
        let set: std::collections::BTreeSet<&str> =
            self.rows.iter().filter_map(|r| r.class_label.as_deref()).collect();
        set.into_iter().map(str::to_string).collect()
    }

    /// Indices of rows in the given split.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.rows.len()).filter(|&i| self.rows[i].split == Some(split)).collect()
    }

    /// Per-class stratified train/test assignment of every row that has no
    /// split yet. Rows with an existing split are left untouched.
    pub fn split(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::invalid(format!("split fraction {fraction} outside (0, 1)")));
        }
        let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.rows.iter().enumerate() {
            let label = r
                .class_label
                .as_deref()
                .ok_or_else(|| Error::invalid(format!("id `{}` has no class_label", r.id)))?;
            if r.split.is_none() {
                by_class.entry(label).or_default().push(i);
            }
        }
        let mut out = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (label, mut idx) in by_class {
            if idx.len() < 2 {
                return Err(Error::invalid(format!(
                    "class `{label}` has {} unsplit item(s); need at least 2",
                    idx.len()
                )));
            }
            idx.shuffle(&mut rng);
            let n_train = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len() - 1);
            for (j, &i) in idx.iter().enumerate() {
                out.rows[i].split = Some(if j < n_train { Split::Train } else { Split::Test });
            }
        }
        Ok(out)
    }
}
