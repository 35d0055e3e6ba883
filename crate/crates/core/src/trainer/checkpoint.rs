use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Tensor, TensorData};
use crate::error::{Error, Result};

use super::model::{Decoder, Encoder, ToySegmenter};
use super::train::TrainConfig;

const MAGIC: &[u8; 4] = b"OWCK";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub class_ids: Vec<i32>,
    pub encoder_seed: u64,
    pub encoder_filters: usize,
    pub config: Option<TrainConfig>,
}

/// Layout: magic, u32 version, u64 header length, JSON header, then the
/// decoder as an OWT1 f64 tensor of shape (K, F + 1) with the bias last.
pub fn write_checkpoint(path: &Path, model: &ToySegmenter, config: Option<&TrainConfig>) -> Result<()> {
    let d = &model.decoder;
    let header = CheckpointHeader {
        class_ids: (1..=d.n_classes as i32).collect(),
        encoder_seed: model.encoder.seed(),
        encoder_filters: model.encoder.n_filters(),
        config: config.cloned(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut payload = Vec::with_capacity(d.n_classes * (d.dim + 1));
    for k in 0..d.n_classes {
        payload.extend_from_slice(&d.weights[k * d.dim..(k + 1) * d.dim]);
        payload.push(d.bias[k]);
    }
    let tensor = Tensor::from_f64(vec![d.n_classes, d.dim + 1], payload)?;
    let mut bytes = Vec::new();
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&tensor.to_bytes());
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<(ToySegmenter, CheckpointHeader)> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(Error::Format("not a model checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let end = 16usize.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| Error::Format("truncated header".into()))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..end])?;
    let tensor = Tensor::from_bytes(&bytes[end..])?;
    let (k, cols) = match tensor.shape() {
        [k, cols] if *cols >= 1 => (*k, *cols),
        s => return Err(Error::Format(format!("unexpected decoder shape {s:?}"))),
    };
    let TensorData::F64(values) = tensor.data() else {
        return Err(Error::Format("decoder must be f64".into()));
    };
    let encoder = Encoder::new(header.encoder_seed, header.encoder_filters);
    let dim = cols - 1;
    if dim != encoder.feature_dim() || k != header.class_ids.len() {
        return Err(Error::Format("decoder shape disagrees with header".into()));
    }
    let mut weights = Vec::with_capacity(k * dim);
    let mut bias = Vec::with_capacity(k);
    for row in values.chunks(cols) {
        weights.extend_from_slice(&row[..dim]);
        bias.push(row[dim]);
    }
    let decoder = Decoder { n_classes: k, dim, weights, bias };
    Ok((ToySegmenter { encoder, decoder }, header))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.owck");
        let model = ToySegmenter::new(Encoder::new(4, 5), 3, 8);
        let cfg = TrainConfig::default();
        write_checkpoint(&path, &model, Some(&cfg)).unwrap();
        let (back, header) = read_checkpoint(&path).unwrap();
        assert_eq!(back, model);
        assert_eq!(header.class_ids, vec![1, 2, 3]);
        assert_eq!(header.config, Some(cfg));
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad");
        fs::write(&path, b"nope").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format(_))));
        assert!(matches!(read_checkpoint(&dir.path().join("missing")), Err(Error::NotFound(_))));
    }
}
