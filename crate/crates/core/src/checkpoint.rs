//! Versioned JSON checkpoints: network spec, every tensor with its mask, and
//! free-form training metadata.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::engine::MaskedModel;
use crate::error::{Error, Result};

pub const FORMAT: &str = "lightkd-checkpoint";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Full-train cross-entropy recorded after reference training.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference_loss: Option<f64>,
    /// Per-epoch validation accuracy of the training run that produced the model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub validation_accuracy: Vec<f64>,
    #[serde(default)]
    pub epochs: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub model: MaskedModel,
    #[serde(default)]
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn new(model: MaskedModel, meta: CheckpointMeta) -> Self {
        Checkpoint {
            format: FORMAT.into(),
            version: VERSION,
            model,
            meta,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Checkpoint = serde_json::from_str(text)?;
        if raw.format != FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", raw.format)));
        }
        if raw.version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported version {} (expected {VERSION})",
                raw.version
            )));
        }
        let model = MaskedModel::from_parts(raw.model.spec, raw.model.params, raw.model.seed)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(Checkpoint { model, ..raw })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, self.to_json().as_bytes())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Writes `bytes` to a sibling temporary file and renames it over `path`.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidArgument(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{LayerKind, LayerSpec, NetworkSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let spec = NetworkSpec::new(
            "ck",
            3,
            vec![
                LayerSpec::conv(1, 2, (3, 1), (4, 1)),
                LayerSpec::fc(8, 6),
                LayerSpec::recurrent(LayerKind::Mgu, 2, 3, 3),
                LayerSpec::fc(3, 3),
            ],
        );
        let mut model = MaskedModel::new(spec, 11).unwrap();
        model.params[1][0].mask.as_mut().unwrap()[4] = false;
        let ck = Checkpoint::new(
            model.clone(),
            CheckpointMeta {
                reference_loss: Some(0.1 + 0.2),
                validation_accuracy: vec![0.25, 1.0 / 3.0],
                epochs: 2,
                note: None,
            },
        );
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert!(back.model.bit_identical(&model));
        assert_eq!(back.meta, ck.meta);
        assert_eq!(back.to_json(), ck.to_json());
    }

    #[test]
    fn corrupt_shapes_are_rejected() {
        let model = MaskedModel::new(NetworkSpec::new("x", 2, vec![LayerSpec::fc(3, 2)]), 1).unwrap();
        let mut ck = Checkpoint::new(model, CheckpointMeta::default());
        ck.model.params[0][0].values.pop();
        assert!(Checkpoint::from_json(&ck.to_json()).is_err());
        let mut ck2 = ck.clone();
        ck2.version = 99;
        assert!(Checkpoint::from_json(&ck2.to_json()).is_err());
    }
}
