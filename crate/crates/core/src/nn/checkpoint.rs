use std::path::Path;

use crate::container::{decode_tensors, encode_tensors, read_file, write_atomic, TensorRecord};
use crate::error::{Error, Result};
use crate::nn::{Model, ParamKind};

pub const CHECKPOINT_MAGIC: &[u8] = b"DCMODEL";

/// Parameter values read back from a `DCMODEL` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: Vec<(String, ParamKind, Vec<usize>, Vec<f64>)>,
    /// Free-form provenance JSON; empty when the writer supplied none.
    pub provenance: String,
}

impl Checkpoint {
    pub fn from_model(model: &Model, provenance: &str) -> Self {
        Self {
            params: model
                .params()
                .iter()
                .map(|p| (p.path.clone(), p.kind, p.tensor.shape().to_vec(), p.tensor.values().to_vec()))
                .collect(),
            provenance: provenance.to_string(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let records: Vec<TensorRecord> = self
            .params
            .iter()
            .map(|(path, kind, dims, values)| TensorRecord {
                path: path.clone(),
                kind: kind.code(),
                dims: dims.clone(),
                values: values.clone(),
            })
            .collect();
        encode_tensors(CHECKPOINT_MAGIC, &records, &self.provenance)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (records, provenance) = decode_tensors(CHECKPOINT_MAGIC, bytes)?;
        let params = records
            .into_iter()
            .map(|r| {
                let kind = ParamKind::from_code(r.kind)
                    .ok_or_else(|| Error::Format(format!("unknown parameter kind byte {}", r.kind)))?;
                Ok((r.path, kind, r.dims, r.values))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { params, provenance })
    }

    /// Copies the stored values into `model`; paths, kinds and shapes must
    /// match the model exactly.
    pub fn apply_to(&self, model: &mut Model) -> Result<()> {
        if self.params.len() != model.params().len() {
            return Err(Error::Consistency(format!(
                "checkpoint has {} parameters, model has {}",
                self.params.len(),
                model.params().len()
            )));
        }
        for ((path, kind, dims, _), p) in self.params.iter().zip(model.params()) {
            if *path != p.path || *kind != p.kind || dims.as_slice() != p.tensor.shape() {
                return Err(Error::Consistency(format!(
                    "checkpoint entry {path} {dims:?} does not match model parameter {} {:?}",
                    p.path,
                    p.tensor.shape()
                )));
            }
        }
        let values: Vec<Vec<f64>> = self.params.iter().map(|(_, _, _, v)| v.clone()).collect();
        model.load_flat_values(&values)
    }
}

pub fn write_checkpoint(model: &Model, path: &Path, provenance: &str) -> Result<()> {
    write_atomic(path, &Checkpoint::from_model(model, provenance).to_bytes()?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&read_file(path)?)
}
