//! Binary model checkpoints.
//!
//! Layout: the 8 magic bytes `RASSOCK1`, a little-endian u64 giving the
//! length of a JSON header, the header, then every tensor's f64 values in
//! little-endian order. The header records the architecture, vocabulary,
//! configuration and the name and length of each tensor.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::{Mode, TaskFormat};
use crate::model::{ModelConfig, ModelParams, TrainedModel};
use crate::vocab::Vocab;

const MAGIC: &[u8; 8] = b"RASSOCK1";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocab,
    mode: Mode,
    format: TaskFormat,
    trained_epochs: usize,
    max_decode_len: usize,
    tensors: Vec<(String, usize)>,
}

pub fn write_model<W: Write>(mut out: W, model: &TrainedModel) -> Result<()> {
    let tensors = model.params.tensors();
    let header = Header {
        config: model.params.config.clone(),
        vocab: model.vocab.clone(),
        mode: model.mode,
        format: model.format,
        trained_epochs: model.trained_epochs,
        max_decode_len: model.max_decode_len,
        tensors: tensors.iter().map(|(n, v)| (n.to_string(), v.len())).collect(),
    };
    let json = serde_json::to_vec(&header)?;
    out.write_all(MAGIC)?;
    out.write_all(&(json.len() as u64).to_le_bytes())?;
    out.write_all(&json)?;
    let mut buf = Vec::new();
    for (_, values) in &tensors {
        for v in *values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    out.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(mut input: R) -> Result<TrainedModel> {
    let bad = |what: &str| Error::Data(format!("not a model checkpoint: {what}"));
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
    if &magic != MAGIC {
        return Err(bad("wrong magic bytes"));
    }
    let mut len = [0u8; 8];
    input.read_exact(&mut len).map_err(|_| bad("truncated"))?;
    let len = usize::try_from(u64::from_le_bytes(len)).map_err(|_| bad("header too large"))?;
    if len > 1 << 26 {
        return Err(bad("header too large"));
    }
    let mut json = vec![0u8; len];
    input.read_exact(&mut json).map_err(|_| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(&json)?;
    if header.vocab.len() != header.config.vocab_size {
        return Err(Error::Data(format!(
            "checkpoint vocabulary has {} tokens but the model expects {}",
            header.vocab.len(),
            header.config.vocab_size
        )));
    }

    let mut params = ModelParams::zeros(&header.config);
    let expected: Vec<(String, usize)> = params.tensors().iter().map(|(n, v)| (n.to_string(), v.len())).collect();
    if expected != header.tensors {
        return Err(bad("tensor layout does not match the architecture"));
    }
    let mut word = [0u8; 8];
    for t in params.tensors_mut() {
        for v in t.iter_mut() {
            input.read_exact(&mut word).map_err(|_| bad("truncated tensor data"))?;
            *v = f64::from_le_bytes(word);
        }
    }
    if input.read(&mut word)? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok(TrainedModel {
        vocab: header.vocab,
        params,
        mode: header.mode,
        format: header.format,
        trained_epochs: header.trained_epochs,
        max_decode_len: header.max_decode_len,
    })
}

pub fn save_model(path: &Path, model: &TrainedModel) -> Result<()> {
    let mut buf = Vec::new();
    write_model(&mut buf, model)?;
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    read_model(std::io::BufReader::new(fs::File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> TrainedModel {
        let vocab = Vocab::new(["what", "is", "red", "blue"]);
        let cfg = ModelConfig {
            tie_embeddings: true,
            ..ModelConfig::new(vocab.len())
        };
        let mut m = TrainedModel::untrained(vocab, ModelParams::init(&cfg, 3), Mode::RationaleToLabel, TaskFormat::Nli);
        m.trained_epochs = 7;
        m.params.output_bias[2] = -0.0;
        m.params.embedding[[1, 1]] = 1.0 / 3.0;
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        let back = read_model(&buf[..]).unwrap();
        assert_eq!(back, m);
        for ((_, a), (_, b)) in m.params.tensors().iter().zip(back.params.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let mut again = Vec::new();
        write_model(&mut again, &back).unwrap();
        assert_eq!(buf, again);
    }

    #[test]
    fn damaged_files_are_rejected() {
        let mut buf = Vec::new();
        write_model(&mut buf, &model()).unwrap();
        assert!(matches!(read_model(&buf[..buf.len() - 3]), Err(Error::Data(_))));
        let mut longer = buf.clone();
        longer.push(0);
        assert!(matches!(read_model(&longer[..]), Err(Error::Data(_))));
        let mut wrong = buf.clone();
        wrong[0] = b'X';
        assert!(matches!(read_model(&wrong[..]), Err(Error::Data(_))));
        assert!(read_model(&b"RASSOCK1"[..]).is_err());
    }
}
