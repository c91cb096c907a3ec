//! Versioned binary model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "GLNS" (4 bytes)
//! u32      format version (currently 1)
//! u32      architecture tag: 0 = bow-mlp, 1 = text-cnn
//! u32...   architecture config integers
//!            bow-mlp:  input-size, hidden-0, hidden-1
//!            text-cnn: sequence-length, vocabulary-size, embedding-dim,
//!                      filter-count, filter-width
//! u32      parameter tensor count
//! per tensor: u32 rank, u32 x rank extents, f64 x numel raw values
//! ```
//!
//! The vocabulary travels in a sidecar file at `<path>.vocab` (newline-
//! delimited words), since the model format itself stores only numbers.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::text::Vocabulary;

use super::{Architecture, BowMlpConfig, TextCnnConfig, TrainedModel};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GLNS";

pub fn vocab_path(model_path: &Path) -> PathBuf {
    let mut os = model_path.as_os_str().to_owned();
    os.push(".vocab");
    PathBuf::from(os)
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|source| Error::Io {
        path: path.to_owned(),
        source,
    })?;
    let mut w = BufWriter::new(file);
    let io_err = |source| Error::Io {
        path: path.to_owned(),
        source,
    };

    w.write_all(MAGIC).map_err(io_err)?;
    write_u32(&mut w, FORMAT_VERSION).map_err(io_err)?;
    let (tag, config_ints) = match &model.arch {
        Architecture::BowMlp(c) => (0, vec![c.input_size, c.hidden_sizes[0], c.hidden_sizes[1]]),
        Architecture::TextCnn(c) => (
            1,
            vec![
                c.sequence_length,
                c.vocabulary_size,
                c.embedding_dim,
                c.filter_count,
                c.filter_width,
            ],
        ),
    };
    write_u32(&mut w, tag).map_err(io_err)?;
    for v in config_ints {
        write_u32(&mut w, v as u32).map_err(io_err)?;
    }
    write_u32(&mut w, model.params.len() as u32).map_err(io_err)?;
    for p in &model.params {
        write_u32(&mut w, p.rank() as u32).map_err(io_err)?;
        for &e in p.shape() {
            write_u32(&mut w, e as u32).map_err(io_err)?;
        }
        for &v in p.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;

    model.vocab.save(&vocab_path(path))
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let file = File::open(path).map_err(|source| Error::UnreadableFile {
        path: path.to_owned(),
        source,
    })?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, path)?;
    if &magic != MAGIC {
        return Err(Error::CorruptModel(format!(
            "bad magic {magic:?}, not a model file"
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }

    let arch = match read_u32(&mut r, path)? {
        0 => {
            let input_size = read_u32(&mut r, path)? as usize;
            let h0 = read_u32(&mut r, path)? as usize;
            let h1 = read_u32(&mut r, path)? as usize;
            Architecture::BowMlp(BowMlpConfig {
                input_size,
                hidden_sizes: vec![h0, h1],
            })
        }
        1 => {
            let sequence_length = read_u32(&mut r, path)? as usize;
            let vocabulary_size = read_u32(&mut r, path)? as usize;
            let embedding_dim = read_u32(&mut r, path)? as usize;
            let filter_count = read_u32(&mut r, path)? as usize;
            let filter_width = read_u32(&mut r, path)? as usize;
            Architecture::TextCnn(TextCnnConfig {
                sequence_length,
                vocabulary_size,
                embedding_dim,
                filter_count,
                filter_width,
            })
        }
        tag => {
            return Err(Error::CorruptModel(format!(
                "unknown architecture tag {tag}"
            )))
        }
    };
    arch.validate()
        .map_err(|e| Error::CorruptModel(format!("invalid stored config: {e}")))?;

    let expected_shapes = arch.param_shapes();
    let count = read_u32(&mut r, path)? as usize;
    if count != expected_shapes.len() {
        return Err(Error::CorruptModel(format!(
            "{count} parameter tensors, expected {}",
            expected_shapes.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for expected in &expected_shapes {
        let rank = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        if &shape != expected {
            return Err(Error::CorruptModel(format!(
                "parameter shape {shape:?} does not match architecture (expected {expected:?})"
            )));
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        let mut buf = [0u8; 8];
        for v in &mut data {
            read_exact(&mut r, &mut buf, path)?;
            *v = f64::from_le_bytes(buf);
        }
        let tensor = Tensor::new(shape, data)?;
        if !tensor.all_finite() {
            return Err(Error::CorruptModel("non-finite parameter values".into()));
        }
        params.push(Arc::new(tensor));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)
        .map_err(|source| Error::UnreadableFile {
            path: path.to_owned(),
            source,
        })?
        != 0
    {
        return Err(Error::CorruptModel(
            "trailing bytes after parameters".into(),
        ));
    }

    let vocab = Vocabulary::load(&vocab_path(path))?;
    let expected_vocab = match &arch {
        Architecture::BowMlp(c) => c.input_size,
        Architecture::TextCnn(c) => c.vocabulary_size,
    };
    if vocab.len() != expected_vocab {
        return Err(Error::CorruptModel(format!(
            "vocabulary has {} entries, model expects {expected_vocab}",
            vocab.len()
        )));
    }

    Ok(TrainedModel {
        arch,
        params,
        vocab,
        metadata: None,
    })
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, path)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], path: &Path) -> Result<()> {
    r.read_exact(buf).map_err(|source| {
        if source.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::CorruptModel("truncated file".into())
        } else {
            Error::UnreadableFile {
                path: path.to_owned(),
                source,
            }
        }
    })
}
