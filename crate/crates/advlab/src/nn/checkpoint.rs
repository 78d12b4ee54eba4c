//! Binary checkpoint format.
//!
//! Layout: the magic bytes `ADVL`, a little-endian u32 format version,
//! a length-prefixed UTF-8 blob of `key=value` lines describing the
//! model spec, then one record per parameter and buffer: name length
//! (u32), name bytes, rank (u32), dims (u32 each), and the payload as
//! little-endian f32. Records run to end of file; parameters come
//! first, buffers after, both in [`Model::parameters`] order.
//!
//! Loading rebuilds the model from the spec blob and overwrites its
//! state from the records, so a checkpoint is self-describing. Loaded
//! models start in eval mode.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::nn::{
    build_autoencoder, build_classifier, AutoencoderSpec, ClassifierSpec, Model, ModelError,
    ModelKind, ModelSpec,
};
use crate::tensor::Scalar;

pub const MAGIC: [u8; 4] = *b"ADVL";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint: magic bytes {got:?} do not match {MAGIC:?}")]
    BadMagic { got: [u8; 4] },
    #[error("unsupported checkpoint version {got}, this build reads {VERSION}")]
    UnsupportedVersion { got: u32 },
    #[error("corrupt spec header: {detail}")]
    CorruptSpec { detail: String },
    #[error("checkpoint ends mid-{reading}")]
    Truncated { reading: &'static str },
    #[error("corrupt record: {detail}")]
    BadRecord { detail: String },
    #[error("record {name:?}: {detail}")]
    ParameterMismatch { name: String, detail: String },
    #[error("checkpoint is missing {name:?}")]
    MissingParameter { name: String },
    #[error("checkpoint holds {got} weights, expected {expected}")]
    SpecMismatch { expected: ModelKind, got: ModelKind },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn join(values: &[usize]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

fn spec_blob(spec: &ModelSpec) -> String {
    match spec {
        ModelSpec::Classifier(s) => format!(
            "kind=classifier\nblock_channels={}\nhidden_dims={}\nnum_classes={}\ndropout_rate={}\n",
            join(&s.block_channels),
            join(&s.hidden_dims),
            s.num_classes,
            s.dropout_rate,
        ),
        ModelSpec::Autoencoder(s) => format!(
            "kind=autoencoder\nconv_channels={}\nlatent_dim={}\nnoise_std={}\n",
            join(&s.conv_channels),
            s.latent_dim,
            s.noise_std,
        ),
    }
}

fn corrupt(detail: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptSpec {
        detail: detail.into(),
    }
}

fn parse_list<const N: usize>(raw: &str, key: &str) -> Result<[usize; N], CheckpointError> {
    let parts: Vec<usize> = raw
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| corrupt(format!("{key}: {e}")))?;
    parts
        .try_into()
        .map_err(|_| corrupt(format!("{key} wants {N} entries, got {raw:?}")))
}

fn parse_spec(blob: &str) -> Result<ModelSpec, CheckpointError> {
    let mut fields: HashMap<&str, &str> = HashMap::new();
    for line in blob.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| corrupt(format!("line {line:?} is not key=value")))?;
        fields.insert(k.trim(), v.trim());
    }
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| corrupt(format!("missing key {key:?}")))
    };
    let num = |key: &str| -> Result<usize, CheckpointError> {
        get(key)?.parse().map_err(|e| corrupt(format!("{key}: {e}")))
    };
    let real = |key: &str| -> Result<f64, CheckpointError> {
        get(key)?.parse().map_err(|e| corrupt(format!("{key}: {e}")))
    };
    match get("kind")? {
        "classifier" => Ok(ModelSpec::Classifier(ClassifierSpec {
            block_channels: parse_list(get("block_channels")?, "block_channels")?,
            hidden_dims: parse_list(get("hidden_dims")?, "hidden_dims")?,
            num_classes: num("num_classes")?,
            dropout_rate: real("dropout_rate")?,
        })),
        "autoencoder" => Ok(ModelSpec::Autoencoder(AutoencoderSpec {
            conv_channels: parse_list(get("conv_channels")?, "conv_channels")?,
            latent_dim: num("latent_dim")?,
            noise_std: real("noise_std")?,
        })),
        other => Err(corrupt(format!("unknown kind {other:?}"))),
    }
}

pub fn save_checkpoint<S: Scalar>(
    model: &Model<S>,
    path: impl AsRef<Path>,
) -> Result<(), CheckpointError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    let blob = spec_blob(model.spec());
    w.write_all(&(blob.len() as u32).to_le_bytes())?;
    w.write_all(blob.as_bytes())?;
    for (name, tensor) in model.parameters().into_iter().chain(model.buffers()) {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        let shape = tensor.shape();
        w.write_all(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for v in tensor.to_vec() {
            w.write_all(&(v.to_f64() as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact(
    r: &mut impl Read,
    buf: &mut [u8],
    reading: &'static str,
) -> Result<(), CheckpointError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            CheckpointError::Truncated { reading }
        } else {
            CheckpointError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read, reading: &'static str) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, reading)?;
    Ok(u32::from_le_bytes(buf))
}

/// Try to read a record's name length; `None` cleanly at end of file.
fn next_record_len(r: &mut impl Read) -> Result<Option<u32>, CheckpointError> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            return if filled == 0 {
                Ok(None)
            } else {
                Err(CheckpointError::Truncated {
                    reading: "record name length",
                })
            };
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

pub fn load_checkpoint<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>, CheckpointError> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(CheckpointError::BadMagic { got: magic });
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { got: version });
    }
    let blob_len = read_u32(&mut r, "spec length")? as usize;
    if blob_len > 1 << 20 {
        return Err(corrupt(format!("implausible spec length {blob_len}")));
    }
    let mut blob = vec![0u8; blob_len];
    read_exact(&mut r, &mut blob, "spec blob")?;
    let blob = String::from_utf8(blob).map_err(|e| corrupt(e.to_string()))?;
    let spec = parse_spec(&blob)?;

    // seed is irrelevant here: every weight is overwritten below
    let model: Model<S> = match &spec {
        ModelSpec::Classifier(s) => build_classifier(s, 0)?,
        ModelSpec::Autoencoder(s) => build_autoencoder(s, 0)?,
    };

    let mut seen: Vec<String> = Vec::new();
    while let Some(name_len) = next_record_len(&mut r)? {
        if name_len as usize > 1 << 16 {
            return Err(CheckpointError::BadRecord {
                detail: format!("implausible name length {name_len}"),
            });
        }
        let mut name = vec![0u8; name_len as usize];
        read_exact(&mut r, &mut name, "record name")?;
        let name = String::from_utf8(name).map_err(|e| CheckpointError::BadRecord {
            detail: e.to_string(),
        })?;
        let rank = read_u32(&mut r, "record rank")? as usize;
        if rank > 8 {
            return Err(CheckpointError::BadRecord {
                detail: format!("{name}: implausible rank {rank}"),
            });
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(read_u32(&mut r, "record dims")? as usize);
        }
        let count: usize = dims.iter().try_fold(1usize, |acc, &d| {
            acc.checked_mul(d)
        })
        .ok_or_else(|| CheckpointError::BadRecord {
            detail: format!("{name}: dims {dims:?} overflow"),
        })?;
        let mut payload = vec![0u8; count * 4];
        read_exact(&mut r, &mut payload, "record payload")?;
        let data: Vec<S> = payload
            .chunks_exact(4)
            .map(|c| S::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        model
            .set_named(&name, data, &dims)
            .map_err(|detail| CheckpointError::ParameterMismatch {
                name: name.clone(),
                detail,
            })?;
        seen.push(name);
    }

    for (name, _) in model.parameters().into_iter().chain(model.buffers()) {
        if !seen.contains(&name) {
            return Err(CheckpointError::MissingParameter { name });
        }
    }

    model.set_eval();
    Ok(model)
}

/// Load and insist the checkpoint holds a classifier.
pub fn load_classifier<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>, CheckpointError> {
    let model = load_checkpoint(path)?;
    if model.kind() != ModelKind::Classifier {
        return Err(CheckpointError::SpecMismatch {
            expected: ModelKind::Classifier,
            got: model.kind(),
        });
    }
    Ok(model)
}

/// Load and insist the checkpoint holds an autoencoder.
pub fn load_autoencoder<S: Scalar>(path: impl AsRef<Path>) -> Result<Model<S>, CheckpointError> {
    let model = load_checkpoint(path)?;
    if model.kind() != ModelKind::Autoencoder {
        return Err(CheckpointError::SpecMismatch {
            expected: ModelKind::Autoencoder,
            got: model.kind(),
        });
    }
    Ok(model)
}
