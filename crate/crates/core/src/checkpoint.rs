//! Model checkpoint container.
//!
//! Layout: magic `HHCKPT\0`, u32 LE format version, a length-prefixed
//! UTF-8 metadata string (JSON by convention), then every tensor the model
//! visits, in visit order: name, dimensions, and raw f64 little-endian
//! values. Non-trainable buffers (batch-norm statistics) are included, so
//! a loaded model is bit-for-bit the one that was saved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::Module;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"HHCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint at byte {offset}: {what}")]
    Malformed { offset: u64, what: String },
    #[error("checkpoint is missing tensor for {0}")]
    MissingTensor(String),
    #[error("checkpoint tensor {found} does not match model tensor {expected}")]
    TensorNameMismatch { expected: String, found: String },
    #[error("tensor {name}: checkpoint shape {found:?} does not match model shape {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has {0} extra tensors beyond the model's parameters")]
    ExtraTensors(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Serializes metadata and every visited tensor to `path`.
pub fn save_checkpoint(
    path: &Path,
    meta: &str,
    model: &mut dyn Module,
) -> Result<(), CheckpointError> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.visit("", &mut |name, param| {
        tensors.push((
            name.to_string(),
            param.value.shape().to_vec(),
            param.value.iter().copied().collect(),
        ));
    });
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let meta_bytes = meta.as_bytes();
    w.write_all(&(meta_bytes.len() as u64).to_le_bytes())?;
    w.write_all(meta_bytes)?;
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, shape, data) in tensors {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u32).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for dim in &shape {
            w.write_all(&(*dim as u64).to_le_bytes())?;
        }
        for v in data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Restores every tensor into `model` and returns the metadata string.
/// The model must visit exactly the saved tensors, in the saved order.
pub fn load_checkpoint(path: &Path, model: &mut dyn Module) -> Result<String, CheckpointError> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    let meta = r.header()?;
    let count = r.u64("tensor count")? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    r.expect_eof()?;
    let mut cursor = 0usize;
    let mut failure: Option<CheckpointError> = None;
    model.visit("", &mut |name, param| {
        if failure.is_some() {
            return;
        }
        let Some((saved_name, shape, data)) = tensors.get(cursor) else {
            failure = Some(CheckpointError::MissingTensor(name.to_string()));
            return;
        };
        if saved_name != name {
            failure = Some(CheckpointError::TensorNameMismatch {
                expected: name.to_string(),
                found: saved_name.clone(),
            });
            return;
        }
        if shape.as_slice() != param.value.shape() {
            failure = Some(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: param.value.shape().to_vec(),
                found: shape.clone(),
            });
            return;
        }
        for (slot, v) in param.value.iter_mut().zip(data) {
            *slot = *v;
        }
        cursor += 1;
    });
    if let Some(err) = failure {
        return Err(err);
    }
    if cursor < tensors.len() {
        return Err(CheckpointError::ExtraTensors(tensors.len() - cursor));
    }
    Ok(meta)
}

/// Reads only the metadata string, without touching any tensor.
pub fn read_checkpoint_meta(path: &Path) -> Result<String, CheckpointError> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.header()
}

struct Reader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Reader<R> {
    fn new(inner: R) -> Self {
        Reader { inner, offset: 0 }
    }

    fn header(&mut self) -> Result<String, CheckpointError> {
        let mut magic = [0u8; 7];
        self.exact(&mut magic, "magic")?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = self.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadVersion(version));
        }
        let len = self.u64("metadata length")? as usize;
        let mut buf = vec![0u8; len];
        let at = self.offset;
        self.exact(&mut buf, "metadata")?;
        String::from_utf8(buf).map_err(|_| CheckpointError::Malformed {
            offset: at,
            what: "metadata is not valid UTF-8".into(),
        })
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>), CheckpointError> {
        let name_len = self.u32("tensor name length")? as usize;
        let mut name = vec![0u8; name_len];
        let at = self.offset;
        self.exact(&mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| CheckpointError::Malformed {
            offset: at,
            what: "tensor name is not valid UTF-8".into(),
        })?;
        let ndim = self.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u64("tensor dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        let mut b = [0u8; 8];
        for _ in 0..numel {
            self.exact(&mut b, "tensor values")?;
            data.push(f64::from_le_bytes(b));
        }
        Ok((name, shape, data))
    }

    fn expect_eof(&mut self) -> Result<(), CheckpointError> {
        let mut probe = [0u8; 1];
        match self.inner.read(&mut probe)? {
            0 => Ok(()),
            _ => Err(CheckpointError::Malformed {
                offset: self.offset,
                what: "trailing bytes after final tensor".into(),
            }),
        }
    }

    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<(), CheckpointError> {
        let at = self.offset;
        match self.inner.read_exact(buf) {
            Ok(()) => {
                self.offset += buf.len() as u64;
                Ok(())
            }
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
                Err(CheckpointError::Malformed {
                    offset: at,
                    what: format!("unexpected end of file while reading {what}"),
                })
            }
            Err(e) => Err(e.into()),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }
}
