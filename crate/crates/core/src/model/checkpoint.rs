//! Versioned checkpoint files.
//!
//! Layout: the 8-byte magic `AFFGENLM`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header describing the config,
//! vocabulary and tensor sizes, then every parameter as little-endian `f64`
//! in declaration order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::transformer::{Params, ReferenceLm, ReferenceLmConfig};
use super::LanguageModel;
use crate::error::{Error, Result};
use crate::vocab::TokenizerVocabulary;

const MAGIC: &[u8; 8] = b"AFFGENLM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ReferenceLmConfig,
    vocabulary: TokenizerVocabulary,
    tensor_sizes: Vec<usize>,
}

pub fn save_checkpoint(model: &ReferenceLm, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ReferenceLm> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

pub(crate) fn to_bytes(model: &ReferenceLm) -> Result<Vec<u8>> {
    let tensors = model.params.tensors();
    let header = Header {
        config: *model.config(),
        vocabulary: model.vocabulary().clone(),
        tensor_sizes: tensors.iter().map(|t| t.len()).collect(),
    };
    let header = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + header.len() + 8 * model.num_parameters());
    out.write_all(MAGIC).expect("vec write");
    out.write_all(&CHECKPOINT_VERSION.to_le_bytes()).expect("vec write");
    out.write_all(&(header.len() as u64).to_le_bytes()).expect("vec write");
    out.write_all(&header).expect("vec write");
    for t in tensors {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

pub(crate) fn from_bytes(mut bytes: &[u8]) -> Result<ReferenceLm> {
    let truncated = |_| Error::Checkpoint("file is truncated".into());
    let mut magic = [0u8; 8];
    bytes.read_exact(&mut magic).map_err(truncated)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let mut word = [0u8; 4];
    bytes.read_exact(&mut word).map_err(truncated)?;
    let version = u32::from_le_bytes(word);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let mut long = [0u8; 8];
    bytes.read_exact(&mut long).map_err(truncated)?;
    let header_len = u64::from_le_bytes(long) as usize;
    if bytes.len() < header_len {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let (header, mut payload) = bytes.split_at(header_len);
    let header: Header = serde_json::from_slice(header).map_err(|e| Error::Checkpoint(e.to_string()))?;
    header.config.validate()?;
    if header.vocabulary.len() != header.config.vocab_size {
        return Err(Error::Checkpoint("vocabulary size does not match config".into()));
    }
    let mut params = Params::zeros(&header.config);
    {
        let mut tensors = params.tensors_mut();
        let sizes: Vec<usize> = tensors.iter().map(|t| t.len()).collect();
        if sizes != header.tensor_sizes {
            return Err(Error::Checkpoint("tensor layout does not match config".into()));
        }
        for t in tensors.iter_mut() {
            for x in t.iter_mut() {
                payload.read_exact(&mut long).map_err(truncated)?;
                *x = f64::from_le_bytes(long);
            }
        }
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", payload.len())));
    }
    Ok(ReferenceLm::from_parts(header.config, params, header.vocabulary))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::transformer::tests::tiny_model;

    #[test]
    fn save_load_forward_is_bit_identical() {
        let m = tiny_model(4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.model_id(), m.model_id());
        let h = m.prefill(&[1, 2, 3], &m.empty_history()).unwrap();
        let hb = back.prefill(&[1, 2, 3], &back.empty_history()).unwrap();
        let a = m.forward(5, &h).unwrap();
        let b = back.forward(5, &hb).unwrap();
        assert_eq!(
            a.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            b.logits.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_eq!(to_bytes(&back).unwrap(), std::fs::read(&path).unwrap());
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = to_bytes(&tiny_model(4)).unwrap();
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).unwrap_err().to_string().contains("magic"));
        let mut newer = bytes;
        newer[8] = 99;
        assert!(from_bytes(&newer).unwrap_err().to_string().contains("version"));
    }
}
