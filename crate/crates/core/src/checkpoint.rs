//! Model checkpoint: a JSON header (config, tensor names/shapes/offsets)
//! followed by raw little-endian f32 payloads. Codebook words persist as
//! `word_0..word_{K-1}`; optional standardization stats as `norm.mean` /
//! `norm.std`.

use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::data::ChannelStats;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::{Autoencoder, ModelConfig};
use crate::pipeline::TrainedModel;
use crate::quantizer::Codebook;
use crate::tensor::{Real, Tensor};

const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the payload that follows the header.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct CkptConfig {
    model: ModelConfig,
    in_channels: usize,
    joints: usize,
    k: usize,
    patch_len: usize,
    fps: f32,
    loss: LossConfig,
    standardized: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: CkptConfig,
    tensors: Vec<TensorEntry>,
}

pub fn save<F: Real>(trained: &TrainedModel<F>, path: impl AsRef<Path>) -> Result<()> {
    let mut entries = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    let mut push_tensor = |name: String, t: Tensor<f32>| {
        entries.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len() as u64,
        });
        for &v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    };

    for (name, tensor) in trained.model.params().iter() {
        push_tensor(name.to_string(), tensor.cast::<f32>());
    }
    for (i, word) in trained.codebook.words().iter().enumerate() {
        push_tensor(format!("word_{i}"), word.cast::<f32>());
    }
    if let Some(stats) = &trained.stats {
        push_tensor(
            "norm.mean".into(),
            Tensor::new(vec![stats.mean.len()], stats.mean.clone())?,
        );
        push_tensor(
            "norm.std".into(),
            Tensor::new(vec![stats.std.len()], stats.std.clone())?,
        );
    }

    let header = Header {
        version: CKPT_VERSION,
        config: CkptConfig {
            model: trained.model.cfg.clone(),
            in_channels: trained.model.in_channels,
            joints: trained.model.joints,
            k: trained.k,
            patch_len: trained.patch_len,
            fps: trained.fps,
            loss: trained.loss.clone(),
            standardized: trained.stats.is_some(),
        },
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut w = std::io::BufWriter::new(std::fs::File::create(path.as_ref())?);
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    w.write_all(&payload)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TrainedModel<f32>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path)?;
    let file_len = file.metadata()?.len();
    let mut r = std::io::BufReader::new(file);
    let mut len_buf = [0u8; 8];
    r.read_exact(&mut len_buf).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        detail: "missing header length".into(),
    })?;
    let header_len = u64::from_le_bytes(len_buf);
    if header_len.saturating_add(8) > file_len {
        return Err(Error::Truncated {
            path: path.display().to_string(),
            detail: format!("header length {header_len} exceeds file size {file_len}"),
        });
    }
    let header_len = header_len as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes).map_err(|_| Error::Truncated {
        path: path.display().to_string(),
        detail: "header shorter than declared".into(),
    })?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header json: {e}")))?;
    if header.version != CKPT_VERSION {
        return Err(Error::Version {
            path: path.display().to_string(),
            found: header.version,
            expected: CKPT_VERSION,
        });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor<f32>> {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 4;
        if end > payload.len() {
            return Err(Error::Truncated {
                path: path.display().to_string(),
                detail: format!("tensor '{}' extends past payload", entry.name),
            });
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::new(entry.shape.clone(), data)
    };

    let cfg = header.config;
    // Structure from the config, values overwritten from the archive.
    let mut rng = ChaCha20Rng::seed_from_u64(0);
    let mut model =
        Autoencoder::<f32>::new(cfg.model.clone(), cfg.in_channels, cfg.joints, &mut rng)?;

    let find = |name: &str| -> Result<&TensorEntry> {
        header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("tensor '{name}' missing from archive")))
    };

    for i in 0..model.params().len() {
        let name = model.params().name(i).to_string();
        let tensor = read_tensor(find(&name)?)?;
        if tensor.shape() != model.params().get(i).shape() {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has shape {:?}, expected {:?}",
                tensor.shape(),
                model.params().get(i).shape()
            )));
        }
        *model.params_mut().get_mut(i) = tensor;
    }

    let words: Vec<Tensor<f32>> = (0..cfg.k)
        .map(|i| read_tensor(find(&format!("word_{i}"))?))
        .collect::<Result<_>>()?;
    let codebook = Codebook::from_words(words)?;
    if codebook.patch_len() != cfg.patch_len {
        return Err(Error::Checkpoint(
            "codebook patch length disagrees with config".into(),
        ));
    }

    let stats = if cfg.standardized {
        Some(ChannelStats {
            mean: read_tensor(find("norm.mean")?)?.data().to_vec(),
            std: read_tensor(find("norm.std")?)?.data().to_vec(),
        })
    } else {
        None
    };

    Ok(TrainedModel {
        model,
        codebook,
        patch_len: cfg.patch_len,
        k: cfg.k,
        loss: cfg.loss,
        fps: cfg.fps,
        stats,
    })
}
