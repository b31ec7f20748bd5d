//! Encoder bundles: one checkpoint per encoder plus `manifest.json`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::model::{MtlModel, TaskHead};
use crate::encoder::{load_checkpoint, save_checkpoint, EncoderParams};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const FORMAT: &str = "mtl-encoder-bundle";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    /// `shared` or `private:<task>`.
    pub role: String,
    /// Checkpoint path relative to the manifest's directory.
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// Shared first, then private encoders in task order.
    pub encoders: Vec<ManifestEntry>,
    pub tasks: Vec<TaskHead>,
    #[serde(default)]
    pub word_vectors: Option<String>,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub config_hash: Option<String>,
}

/// Provenance recorded alongside exported encoders.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BundleMeta {
    pub word_vectors: Option<String>,
    pub seed: Option<u64>,
    pub config_hash: Option<String>,
}

pub fn private_role(task: &str) -> String {
    format!("private:{task}")
}

/// Writes `shared.json`, `private-<task>.json` for every task, and the
/// manifest into `dir`.
pub fn export_encoders(model: &MtlModel, dir: &Path, meta: &BundleMeta) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut encoders = vec![ManifestEntry {
        role: "shared".into(),
        file: "shared.json".into(),
    }];
    save_checkpoint(&dir.join("shared.json"), &model.shared)?;
    for (t, p) in model.tasks.iter().zip(&model.private) {
        let file = format!("private-{}.json", t.name);
        save_checkpoint(&dir.join(&file), p)?;
        encoders.push(ManifestEntry {
            role: private_role(&t.name),
            file,
        });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        version: 1,
        input_dim: model.shared.input_dim(),
        hidden_dim: model.shared.hidden_dim(),
        encoders,
        tasks: model.tasks.clone(),
        word_vectors: meta.word_vectors.clone(),
        seed: meta.seed,
        config_hash: meta.config_hash.clone(),
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// A manifest with its encoders loaded.
#[derive(Clone, Debug)]
pub struct EncoderBundle {
    pub manifest: Manifest,
    pub dir: PathBuf,
    pub encoders: Vec<(String, EncoderParams)>,
}

impl EncoderBundle {
    /// Accepts the manifest file or the directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let (dir, file) = if path.is_dir() {
            (path.to_path_buf(), path.join(MANIFEST_FILE))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != FORMAT || manifest.version != 1 {
            return Err(Error::Format(format!("{}: not an encoder bundle manifest", file.display())));
        }
        if manifest.encoders.first().map(|e| e.role.as_str()) != Some("shared") {
            return Err(Error::Format("manifest must list the shared encoder first".into()));
        }
        let mut encoders = Vec::with_capacity(manifest.encoders.len());
        for entry in &manifest.encoders {
            let p = load_checkpoint(&dir.join(&entry.file))?;
            if p.input_dim() != manifest.input_dim || p.hidden_dim() != manifest.hidden_dim {
                return Err(Error::Format(format!("{} disagrees with the manifest dimensions", entry.file)));
            }
            encoders.push((entry.role.clone(), p));
        }
        Ok(Self { manifest, dir, encoders })
    }

    pub fn get(&self, role: &str) -> Option<&EncoderParams> {
        self.encoders.iter().find(|(r, _)| r == role).map(|(_, p)| p)
    }

    pub fn roles(&self) -> Vec<&str> {
        self.encoders.iter().map(|(r, _)| r.as_str()).collect()
    }

    /// Word-vector path from the manifest, resolved against the bundle
    /// directory when relative.
    pub fn word_vectors_path(&self) -> Option<PathBuf> {
        self.manifest.word_vectors.as_ref().map(|p| {
            let p = Path::new(p);
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                self.dir.join(p)
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multitask::config::ModelConfig;
    use crate::multitask::model::TaskKind;
    use crate::rng::SeedStreams;

    #[test]
    fn two_tasks_give_three_checkpoints() {
        let heads: Vec<TaskHead> = ["a", "b"]
            .iter()
            .map(|n| TaskHead {
                name: n.to_string(),
                kind: TaskKind::Single,
                num_classes: 2,
            })
            .collect();
        let mc = ModelConfig {
            hidden_dim: 3,
            classifier_hidden: 0,
        };
        let model = MtlModel::init(&heads, 4, &mc, &SeedStreams::new(2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = export_encoders(&model, dir.path(), &BundleMeta::default()).unwrap();
        assert_eq!(m.encoders.len(), 3);
        let files: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(files.len(), 4);
        let b = EncoderBundle::load(dir.path()).unwrap();
        assert_eq!(b.roles(), vec!["shared", "private:a", "private:b"]);
        assert_eq!(b.get("shared").unwrap(), &model.shared);
        assert_eq!(b.get("private:b").unwrap(), &model.private[1]);
        assert_eq!(b.manifest, m);
    }
}
