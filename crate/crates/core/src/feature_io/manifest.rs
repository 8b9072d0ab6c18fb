use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{fuse_target, read_bundle, write_bundle, FeatureBundle, Label, LayerSelection};
use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// Bundle path relative to the manifest's directory.
    pub path: String,
    /// Anomaly category (`normal`, `local`, `component`, `global`, or a
    /// dataset-specific defect name).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    pub class_id: String,
    pub train: Vec<ManifestEntry>,
    pub test: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub classes: Vec<ClassSplit>,
}

impl DatasetManifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_slice(&fs::read(path)?)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// A bundle with its fused reconstruction target.
#[derive(Clone, Debug)]
pub struct Sample {
    pub bundle: FeatureBundle,
    pub kind: String,
    pub target: Mat,
}

impl Sample {
    pub fn new(bundle: FeatureBundle, kind: Option<String>, layers: &LayerSelection) -> Result<Self> {
        let target = fuse_target(&bundle, layers)?;
        let kind = kind.unwrap_or_else(|| match bundle.label {
            Label::Normal => "normal".to_string(),
            Label::Anomalous => "anomalous".to_string(),
        });
        Ok(Self {
            bundle,
            kind,
            target,
        })
    }

    pub fn is_normal(&self) -> bool {
        self.bundle.label == Label::Normal
    }
}

#[derive(Clone, Debug)]
pub struct ClassData {
    pub class_id: String,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// All samples of a manifest, loaded and validated.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub seed: u64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub classes: Vec<ClassData>,
}

impl Dataset {
    pub fn load(manifest_path: impl AsRef<Path>, layers: &LayerSelection) -> Result<Self> {
        let manifest_path = manifest_path.as_ref();
        let manifest = DatasetManifest::load(manifest_path)?;
        let root = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut classes = Vec::with_capacity(manifest.classes.len());
        for split in &manifest.classes {
            let load = |entries: &[ManifestEntry]| -> Result<Vec<(FeatureBundle, Option<String>)>> {
                entries
                    .iter()
                    .map(|e| Ok((read_bundle(root.join(&e.path))?, e.kind.clone())))
                    .collect()
            };
            classes.push((split.class_id.clone(), load(&split.train)?, load(&split.test)?));
        }
        Self::from_bundles(manifest.seed, classes, layers)
    }

    /// Build from in-memory bundles grouped as `(class_id, train, test)`.
    #[allow(clippy::type_complexity)]
    pub fn from_bundles(
        seed: u64,
        classes: Vec<(String, Vec<(FeatureBundle, Option<String>)>, Vec<(FeatureBundle, Option<String>)>)>,
        layers: &LayerSelection,
    ) -> Result<Self> {
        let mut shape: Option<(usize, usize, usize)> = None;
        let mut out = Vec::with_capacity(classes.len());
        for (class_id, train, test) in classes {
            let mut convert = |items: Vec<(FeatureBundle, Option<String>)>,
                               train_split: bool|
             -> Result<Vec<Sample>> {
                items
                    .into_iter()
                    .map(|(b, kind)| {
                        b.validate()?;
                        let s = (b.grid_h, b.grid_w, b.dim);
                        match shape {
                            None => shape = Some(s),
                            Some(expected) if expected != s => {
                                return Err(Error::DimMismatch(format!(
                                    "{}: grid/dim {:?} differs from {:?}",
                                    b.sample_id, s, expected
                                )))
                            }
                            _ => {}
                        }
                        if b.class_id != class_id {
                            return Err(Error::InvalidBundle(format!(
                                "{} listed under class {class_id} but carries {}",
                                b.sample_id, b.class_id
                            )));
                        }
                        if train_split && b.label != Label::Normal {
                            return Err(Error::AnomalousTrainingSample(b.sample_id.clone()));
                        }
                        Sample::new(b, kind, layers)
                    })
                    .collect()
            };
            let train = convert(train, true)?;
            let test = convert(test, false)?;
            out.push(ClassData {
                class_id,
                train,
                test,
            });
        }
        let (grid_h, grid_w, dim) =
            shape.ok_or_else(|| Error::Config("dataset contains no bundles".into()))?;
        Ok(Self {
            seed,
            grid_h,
            grid_w,
            dim,
            classes: out,
        })
    }

    pub fn class(&self, class_id: &str) -> Option<&ClassData> {
        self.classes.iter().find(|c| c.class_id == class_id)
    }

    pub fn class_ids(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.class_id.clone()).collect()
    }

    /// Training samples of all classes in manifest order.
    pub fn train_samples(&self) -> Vec<&Sample> {
        self.classes.iter().flat_map(|c| c.train.iter()).collect()
    }

    pub fn num_patches(&self) -> usize {
        self.grid_h * self.grid_w
    }

    /// Write every bundle under `dir` and a `manifest.json` that lists them.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let mut manifest = DatasetManifest {
            seed: self.seed,
            classes: Vec::with_capacity(self.classes.len()),
        };
        for class in &self.classes {
            let write_split = |samples: &[Sample], split: &str| -> Result<Vec<ManifestEntry>> {
                samples
                    .iter()
                    .map(|s| {
                        let rel = format!("{}/{}/{}.amoe", class.class_id, split, s.bundle.sample_id);
                        write_bundle(&s.bundle, dir.join(&rel))?;
                        Ok(ManifestEntry {
                            path: rel,
                            kind: Some(s.kind.clone()),
                        })
                    })
                    .collect()
            };
            let train = write_split(&class.train, "train")?;
            let test = write_split(&class.test, "test")?;
            manifest.classes.push(ClassSplit {
                class_id: class.class_id.clone(),
                train,
                test,
            });
        }
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }
}
