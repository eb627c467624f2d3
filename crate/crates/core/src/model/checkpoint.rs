//! JSON checkpoints. Values are written as f64 with shortest round-trip
//! formatting, so save → load reproduces every parameter bit for bit.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelError, ParamId, SequenceLabeler, Vocab};
use crate::data::LabelScheme;
use crate::numerics::Tensor;
use crate::Scalar;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedParam {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: ModelConfig,
    pub scheme: LabelScheme,
    /// Known tokens in id order; the unknown token is implicit at id 0.
    pub vocab: Vec<String>,
    pub params: Vec<NamedParam>,
}

impl Checkpoint {
    pub fn from_model<T: Scalar>(model: &SequenceLabeler<T>) -> Self {
        let params = model
            .param_ids()
            .iter()
            .zip(model.params())
            .map(|(id, p)| NamedParam {
                name: id.name().to_owned(),
                shape: p.shape().to_vec(),
                values: p.values().iter().map(|v| v.as_f64()).collect(),
            })
            .collect();
        Self {
            format_version: CHECKPOINT_FORMAT_VERSION,
            config: model.config().clone(),
            scheme: model.scheme().clone(),
            vocab: model.vocab().known_tokens().to_vec(),
            params,
        }
    }

    pub fn into_model<T: Scalar>(self) -> Result<SequenceLabeler<T>, ModelError> {
        if self.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(ModelError::Checkpoint(format!(
                "unsupported format version {}",
                self.format_version
            )));
        }
        let ids = ParamId::for_head(self.config.head);
        let mut tensors = Vec::with_capacity(ids.len());
        for id in ids {
            let p = self
                .params
                .iter()
                .find(|p| p.name == id.name())
                .ok_or_else(|| ModelError::Checkpoint(format!("missing parameter {}", id.name())))?;
            let values = p.values.iter().map(|&v| T::of(v)).collect();
            let t = Tensor::new(p.shape.clone(), values)
                .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", p.name)))?;
            tensors.push(t);
        }
        SequenceLabeler::from_parts(self.config, self.scheme, Vocab::from_tokens(self.vocab), tensors)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }
}

pub fn save_checkpoint<T: Scalar>(model: &SequenceLabeler<T>, path: &Path) -> Result<(), ModelError> {
    let io = |source| ModelError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    fs::write(path, Checkpoint::from_model(model).to_json()).map_err(io)
}

pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<SequenceLabeler<T>, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let ckpt: Checkpoint =
        serde_json::from_str(&text).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.into_model()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::toy_model;
    use crate::model::HeadKind;

    #[test]
    fn round_trip_is_bitwise() {
        for head in [HeadKind::Softmax, HeadKind::Crf] {
            let (m, s) = toy_model(head, 0.3, 8);
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("m.json");
            save_checkpoint(&m, &path).unwrap();
            let back: SequenceLabeler<f64> = load_checkpoint(&path).unwrap();
            assert_eq!(back, m);
            assert_eq!(back.encode(&s, true, 5), m.encode(&s, true, 5));
        }
    }

    #[test]
    fn rejects_bad_files() {
        let (m, _) = toy_model(HeadKind::Crf, 0.0, 8);
        let mut c = Checkpoint::from_model(&m);
        c.params.pop();
        assert!(c.into_model::<f64>().is_err());
        let mut c = Checkpoint::from_model(&m);
        c.params[0].shape = vec![1, 1];
        assert!(c.into_model::<f64>().is_err());
        let mut c = Checkpoint::from_model(&m);
        c.format_version = 99;
        assert!(c.into_model::<f64>().is_err());
    }
}
