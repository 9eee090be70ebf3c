//! On-disk dataset manifests: one JSON file per dataset, image paths relative to it.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetModality {
    T2i,
    I2i,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: String,
    /// Identity as labeled by the source dataset.
    pub identity: u64,
    pub camera: u32,
    pub split: Split,
    #[serde(default)]
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestMeta {
    pub name: String,
    pub modality: DatasetModality,
    /// `[height, width]`
    pub image_size: [usize; 2],
    /// Datasets declaring the same namespace share raw identity ids: equal ids are the same person.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity_namespace: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub meta: ManifestMeta,
    pub entries: Vec<ManifestEntry>,
    /// Directory the manifest was loaded from; image paths resolve against it.
    #[serde(skip)]
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        manifest.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate()?;
        Ok(manifest)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.image_path)
    }

    pub fn entries_in(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Raw ids of the identities with training images.
    pub fn train_identities(&self) -> BTreeSet<u64> {
        self.entries_in(Split::Train).map(|e| e.identity).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let name = &self.meta.name;
        for e in &self.entries {
            match self.meta.modality {
                DatasetModality::T2i if e.split == Split::Train && e.captions.is_empty() => {
                    return Err(Error::Data(format!(
                        "{name}: T2I training image {} has no caption",
                        e.image_path
                    )));
                }
                DatasetModality::I2i if !e.captions.is_empty() => {
                    return Err(Error::Data(format!(
                        "{name}: I2I image {} carries captions",
                        e.image_path
                    )));
                }
                _ => {}
            }
        }
        let train: BTreeSet<&str> = self
            .entries_in(Split::Train)
            .map(|e| e.image_path.as_str())
            .collect();
        if let Some(e) = self
            .entries
            .iter()
            .find(|e| e.split != Split::Train && train.contains(e.image_path.as_str()))
        {
            return Err(Error::Data(format!(
                "{name}: image {} is in both train and test splits",
                e.image_path
            )));
        }
        Ok(())
    }
}

/// Errors if any training image of one manifest is a test image of any manifest.
pub fn check_no_leakage(manifests: &[&DatasetManifest]) -> Result<()> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for m in manifests {
        for e in &m.entries {
            let p = m.resolve(e);
            if e.split == Split::Train {
                train.insert(p);
            } else {
                test.insert(p);
            }
        }
    }
    if let Some(p) = train.intersection(&test).next() {
        return Err(Error::Data(format!(
            "image {} leaks between train and test",
            p.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(path: &str, id: u64, split: Split, captions: &[&str]) -> ManifestEntry {
        ManifestEntry {
            image_path: path.into(),
            identity: id,
            camera: 0,
            split,
            captions: captions.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn manifest(modality: DatasetModality, entries: Vec<ManifestEntry>) -> DatasetManifest {
        DatasetManifest {
            meta: ManifestMeta {
                name: "m".into(),
                modality,
                image_size: [64, 32],
                identity_namespace: None,
            },
            entries,
            root: PathBuf::new(),
        }
    }

    #[test]
    fn t2i_train_requires_captions() {
        let m = manifest(
            DatasetModality::T2i,
            vec![entry("a.png", 0, Split::Train, &[])],
        );
        assert!(matches!(m.validate(), Err(Error::Data(_))));
        let ok = manifest(
            DatasetModality::T2i,
            vec![entry("a.png", 0, Split::Train, &["x"])],
        );
        assert!(ok.validate().is_ok());
    }

    #[test]
    fn i2i_rejects_captions() {
        let m = manifest(
            DatasetModality::I2i,
            vec![entry("a.png", 0, Split::Query, &["x"])],
        );
        assert!(m.validate().is_err());
    }

    #[test]
    fn train_test_overlap_is_rejected() {
        let m = manifest(
            DatasetModality::I2i,
            vec![
                entry("a.png", 0, Split::Train, &[]),
                entry("a.png", 0, Split::Gallery, &[]),
            ],
        );
        assert!(m.validate().is_err());
    }

    #[test]
    fn unknown_fields_are_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        std::fs::write(
            &p,
            r#"{"meta":{"name":"x","modality":"i2i","image_size":[64,32]},"entries":[],"extra":1}"#,
        )
        .unwrap();
        assert!(DatasetManifest::load(&p).is_err());
    }

    #[test]
    fn leakage_across_manifests_is_detected() {
        let a = manifest(
            DatasetModality::I2i,
            vec![entry("x.png", 0, Split::Train, &[])],
        );
        let b = manifest(
            DatasetModality::I2i,
            vec![entry("x.png", 0, Split::Query, &[])],
        );
        assert!(check_no_leakage(&[&a, &b]).is_err());
        let c = manifest(
            DatasetModality::I2i,
            vec![entry("y.png", 0, Split::Query, &[])],
        );
        assert!(check_no_leakage(&[&a, &c]).is_ok());
    }
}
