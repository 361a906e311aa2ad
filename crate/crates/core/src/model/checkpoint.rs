//! Self-describing checkpoint container.
//!
//! Layout: 8-byte magic, u32 format version, u32 header length, JSON header
//! (token layout version, dtype, model config, prompt layout, tensor names
//! and shapes in order), then the raw little-endian f32 tensor bytes in
//! header order.

use std::io::{Read, Write};
use std::path::Path;

use super::{ModelConfig, ParamLayout, Transformer};
use crate::prompt::PromptLayout;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"CFEQCKPT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct Header {
    layout_version: String,
    dtype: String,
    config: ModelConfig,
    prompt_layout: PromptLayout,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct TensorHeader {
    name: String,
    shape: Vec<usize>,
}

/// A loaded checkpoint: the model plus the prompt layout it was trained on.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Transformer<f32>,
    pub prompt_layout: PromptLayout,
}

pub fn save_checkpoint(
    path: &Path,
    model: &Transformer<f32>,
    prompt_layout: &PromptLayout,
) -> Result<()> {
    let header = Header {
        layout_version: crate::prompt::LAYOUT_VERSION.to_string(),
        dtype: "f32le".to_string(),
        config: *model.config(),
        prompt_layout: *prompt_layout,
        tensors: model
            .layout()
            .tensors
            .iter()
            .map(|t| TensorHeader { name: t.name.clone(), shape: t.shape() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&FORMAT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u32).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for &v in model.params() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let mut word = [0u8; 4];
    file.read_exact(&mut word)?;
    let version = u32::from_le_bytes(word);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    file.read_exact(&mut word)?;
    let header_len = u32::from_le_bytes(word) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.layout_version != crate::prompt::LAYOUT_VERSION {
        return Err(Error::Layout(format!(
            "checkpoint token layout {} != supported {}",
            header.layout_version,
            crate::prompt::LAYOUT_VERSION
        )));
    }
    if header.dtype != "f32le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    let layout = ParamLayout::build(&header.config);
    let declared: Vec<(String, Vec<usize>)> =
        header.tensors.iter().map(|t| (t.name.clone(), t.shape.clone())).collect();
    let expected: Vec<(String, Vec<usize>)> =
        layout.tensors.iter().map(|t| (t.name.clone(), t.shape())).collect();
    if declared != expected {
        return Err(Error::Checkpoint("tensor manifest does not match config".into()));
    }
    let mut params = vec![0f32; layout.total];
    let mut buf = vec![0u8; layout.total * 4];
    file.read_exact(&mut buf)?;
    for (i, chunk) in buf.chunks_exact(4).enumerate() {
        params[i] = f32::from_le_bytes(chunk.try_into().expect("chunk size"));
    }
    let model = Transformer::from_params(header.config, params)?;
    Ok(Checkpoint { model, prompt_layout: header.prompt_layout })
}
