//! Weight file: magic, format version, a JSON header with the configuration
//! and tensor directory, then little-endian tensor data in directory order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

use super::{ModelConfig, ModelWeights};

pub const WEIGHTS_MAGIC: &[u8; 8] = b"LNMTWGT\0";
pub const WEIGHTS_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    dtype: DType,
    tensors: Vec<Entry>,
    target_maps: BTreeMap<String, Vec<u32>>,
}

pub fn save_weights<F: Float>(path: &Path, w: &ModelWeights<F>) -> Result<()> {
    let header = Header {
        config: w.config.clone(),
        dtype: F::DTYPE,
        tensors: w.params().iter().map(|(k, t)| Entry { name: k.clone(), shape: t.shape().to_vec() }).collect(),
        target_maps: w.target_maps().clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::format("weight header", e.to_string()))?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(WEIGHTS_MAGIC).map_err(io)?;
    out.write_all(&WEIGHTS_VERSION.to_le_bytes()).map_err(io)?;
    out.write_all(&(json.len() as u64).to_le_bytes()).map_err(io)?;
    out.write_all(&json).map_err(io)?;
    let mut buf = Vec::new();
    for t in w.params().values() {
        buf.clear();
        for &x in t.data() {
            x.to_le(&mut buf);
        }
        out.write_all(&buf).map_err(io)?;
    }
    out.flush().map_err(io)
}

fn read_values<G: Float, F: Float>(bytes: &[u8]) -> Vec<F> {
    let size = std::mem::size_of::<G>();
    bytes.chunks_exact(size).map(|c| F::of(G::from_le(c).as_f64())).collect()
}

/// Load a weight file, converting to `F` if it was stored in the other
/// precision.
pub fn load_weights<F: Float>(path: &Path) -> Result<ModelWeights<F>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(Error::format("weight file", "bad magic number"));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(io)?;
    let version = u32::from_le_bytes(v);
    if version != WEIGHTS_VERSION {
        return Err(Error::format("weight file", format!("unsupported version {version}")));
    }
    let mut n = [0u8; 8];
    r.read_exact(&mut n).map_err(io)?;
    let mut json = vec![0u8; u64::from_le_bytes(n) as usize];
    r.read_exact(&mut json).map_err(io)?;
    let header: Header = serde_json::from_slice(&json).map_err(|e| Error::format("weight header", e.to_string()))?;
    let elem = match header.dtype {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut params = BTreeMap::new();
    for e in header.tensors {
        let numel: usize = e.shape.iter().product();
        let mut bytes = vec![0u8; numel * elem];
        r.read_exact(&mut bytes).map_err(io)?;
        let data = match header.dtype {
            DType::F32 => read_values::<f32, F>(&bytes),
            DType::F64 => read_values::<f64, F>(&bytes),
        };
        params.insert(e.name, Arc::new(Tensor::new(e.shape, data)?));
    }
    let w = ModelWeights::from_parts(header.config, params, header.target_maps);
    w.check()?;
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    #[test]
    fn round_trip_and_precision_change() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        let w = ModelWeights::<f32>::build(&ModelConfig::toy(1, 2, 10), 3).unwrap();
        save_weights(&path, &w).unwrap();
        let back: ModelWeights<f32> = load_weights(&path).unwrap();
        assert_eq!(back, w);
        let wide: ModelWeights<f64> = load_weights(&path).unwrap();
        assert_eq!(wide.cast::<f32>(), w);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        std::fs::write(&path, b"not a model file").unwrap();
        assert!(load_weights::<f32>(&path).is_err());
    }
}
