//! Dataset directories: `data.dtns` (one row per sample), `manifest.csv`,
//! optionally `masks.dtns` and `space.json`.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use disentlab::downstream::TargetData;
use disentlab::metrics::Representation;
use disentlab::synthgen::{foreground_mask, FactorSpace, FactorTuple};
use disentlab::tensorio::{read_tensor, write_tensor, DatasetManifest, Image, Split, Tensor};
use disentlab::vae::InputKind;
use disentlab::{Error, Result};
use ndarray::{Array2, Axis};

pub const DATA_FILE: &str = "data.dtns";
pub const MASK_FILE: &str = "masks.dtns";
pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPACE_FILE: &str = "space.json";

#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub tensor: Tensor,
    pub manifest: DatasetManifest,
    pub masks: Option<Tensor>,
    pub space: Option<FactorSpace>,
}

fn invalid(msg: String) -> Error {
    Error::Invalid(msg)
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Io {
                path: dir.to_path_buf(),
                source: std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
            });
        }
        let tensor = read_tensor(dir.join(DATA_FILE))?;
        let manifest = DatasetManifest::read(dir.join(MANIFEST_FILE))?;
        manifest.validate(Some(tensor.rows()))?;
        let mask_path = dir.join(MASK_FILE);
        let masks = if mask_path.exists() { Some(read_tensor(&mask_path)?) } else { None };
        if let Some(m) = &masks {
            if let Some(r) = manifest.rows.iter().find(|r| r.mask_row.is_some_and(|k| k >= m.rows())) {
                return Err(invalid(format!("id `{}`: mask_row beyond {} masks", r.id, m.rows())));
            }
        }
        let space_path = dir.join(SPACE_FILE);
        let space = if space_path.exists() {
            let text = fs::read_to_string(&space_path).map_err(|e| Error::Io { path: space_path.clone(), source: e })?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            tensor,
            manifest,
            masks,
            space,
        })
    }

    pub fn save(&self) -> Result<()> {
        let dir = &self.dir;
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
        self.manifest.validate(Some(self.tensor.rows()))?;
        write_tensor(dir.join(DATA_FILE), &self.tensor)?;
        self.manifest.write(dir.join(MANIFEST_FILE))?;
        if let Some(m) = &self.masks {
            write_tensor(dir.join(MASK_FILE), m)?;
        }
        if let Some(s) = &self.space {
            let path = dir.join(SPACE_FILE);
            fs::write(&path, serde_json::to_string_pretty(s)?).map_err(|e| Error::Io { path, source: e })?;
        }
        Ok(())
    }

    /// Rank-4 `[N, H, W, C]` tensors hold images; anything else is a feature matrix.
    pub fn kind(&self) -> InputKind {
        if self.tensor.shape().len() == 4 {
            InputKind::Image
        } else {
            InputKind::Embedding
        }
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    /// Feature rows for the given manifest rows, in that order.
    pub fn matrix(&self, rows: &[usize]) -> Array2<f32> {
        let n = self.tensor.row_len();
        let mut out = Array2::zeros((rows.len(), n));
        for (mut dst, &i) in out.axis_iter_mut(Axis(0)).zip(rows) {
            let src = self.tensor.row(self.manifest.rows[i].tensor_row);
            dst.as_slice_mut().expect("fresh array").copy_from_slice(src);
        }
        out
    }

    pub fn all_rows(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// Manifest rows of a split; every row when the manifest has no split column.
    pub fn split_rows(&self, split: Split) -> Vec<usize> {
        if self.manifest.rows.iter().all(|r| r.split.is_none()) {
            return self.all_rows();
        }
        self.manifest.split_indices(split)
    }

    pub fn image(&self, i: usize) -> Result<Image> {
        let shape = self.tensor.shape();
        if shape.len() != 4 {
            return Err(invalid(format!("{} holds features of shape {shape:?}, not images", self.dir.display())));
        }
        let row = self.tensor.row(self.manifest.rows[i].tensor_row).to_vec();
        Image::from_data(shape[1], shape[2], shape[3], row)
    }

    /// Stored mask when present, otherwise the image foreground.
    pub fn mask(&self, i: usize, image: &Image) -> Result<Vec<bool>> {
        match (&self.masks, self.manifest.rows[i].mask_row) {
            (Some(m), Some(k)) => {
                let row = m.row(k);
                if row.len() != image.height * image.width {
                    return Err(Error::DimensionMismatch {
                        expected: image.height * image.width,
                        actual: row.len(),
                    });
                }
                Ok(row.iter().map(|&v| v > 0.5).collect())
            }
            _ => Ok(foreground_mask(image)),
        }
    }

    /// Stored factor space, or one inferred from the factor columns: a
    /// factor seen with a single value is frozen at it.
    pub fn factor_space(&self) -> Result<FactorSpace> {
        if let Some(s) = &self.space {
            return Ok(s.clone());
        }
        let names = &self.manifest.factor_names;
        if names.is_empty() {
            return Err(invalid(format!("{} has no factor columns", self.dir.display())));
        }
        let mut space = FactorSpace::new(names.iter().enumerate().map(|(k, n)| {
            let max = self.manifest.rows.iter().map(|r| r.factors[k]).max().unwrap_or(0);
            (n.clone(), max + 1)
        }))?;
        for (k, n) in names.iter().enumerate() {
            let values: BTreeSet<usize> = self.manifest.rows.iter().map(|r| r.factors[k]).collect();
            if values.len() == 1 {
                space = space.freeze(n, *values.iter().next().expect("one value"))?;
            }
        }
        Ok(space)
    }

    pub fn tuples(&self) -> Vec<FactorTuple> {
        self.manifest.rows.iter().map(|r| FactorTuple(r.factors.clone())).collect()
    }

    /// Pairs codes of the given rows with their factor values.
    pub fn representation(&self, z: Array2<f64>, rows: &[usize]) -> Result<Representation> {
        if self.manifest.factor_names.is_empty() {
            return Err(invalid(format!("{} has no factor columns", self.dir.display())));
        }
        let k = self.manifest.factor_names.len();
        let factors = Array2::from_shape_fn((rows.len(), k), |(i, j)| self.manifest.rows[rows[i]].factors[j]);
        Representation::new(z, factors, self.manifest.factor_names.clone())
    }

    /// Sorted class names and the class index of every row.
    pub fn classes(&self) -> Result<(Vec<String>, Vec<usize>)> {
        let classes = self.manifest.classes();
        let ids = self
            .manifest
            .rows
            .iter()
            .map(|r| {
                let label = r
                    .class_label
                    .as_deref()
                    .ok_or_else(|| invalid(format!("id `{}` has no class_label", r.id)))?;
                Ok(classes.iter().position(|c| c == label).expect("collected from rows"))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((classes, ids))
    }

    /// Labeled train/test features from the manifest split.
    pub fn target(&self) -> Result<(Vec<String>, TargetData)> {
        let (classes, ids) = self.classes()?;
        let train = self.manifest.split_indices(Split::Train);
        let test = self.manifest.split_indices(Split::Test);
        if train.is_empty() || test.is_empty() {
            return Err(invalid(format!("{} needs both train and test rows", self.dir.display())));
        }
        let pick = |rows: &[usize]| rows.iter().map(|&i| ids[i]).collect::<Vec<_>>();
        Ok((
            classes,
            TargetData {
                x_train: self.matrix(&train),
                y_train: pick(&train),
                x_test: self.matrix(&test),
                y_test: pick(&test),
            },
        ))
    }
}
