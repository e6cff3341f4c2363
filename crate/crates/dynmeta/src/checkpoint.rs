//! Model checkpoints.
//!
//! Layout: magic "MLCK", little-endian u32 version (1), u32 parameter count;
//! then per parameter a u16 name length, the UTF-8 name, one dtype byte
//! (1 = f32, 2 = f64), one ndim byte, little-endian u32 extents, and the raw
//! little-endian payload. Save→load→save is bit-exact.
//!
//! Architecture and provenance ride along as a reserved final parameter
//! named `__meta` whose f32 payload holds the UTF-8 bytes of `key=value`
//! lines; the loader strips and parses it so evaluation can run without the
//! original config file.

use crate::error::{Error, Result};
use crate::meta::{Architecture, Backbone, Provenance, TrainedModel};
use crate::scalar::Scalar;
use crate::tensor::{ParamGroup, ParamRole, Tensor};
use std::fs;
use std::path::Path;

const MAGIC: &[u8; 4] = b"MLCK";
const VERSION: u32 = 1;
const META_NAME: &str = "__meta";

fn push_param<E: Scalar>(buf: &mut Vec<u8>, name: &str, tensor: &Tensor<E>) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(E::DTYPE_TAG);
    buf.push(tensor.dims().len() as u8);
    for &d in tensor.dims() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes_vec());
    }
}

/// Serialize a trained model.
pub fn checkpoint_bytes<E: Scalar>(model: &TrainedModel<E>) -> Vec<u8> {
    let head_params = model.static_head.iter().flat_map(|h| h.iter());
    let body_params = model.backbone.body().iter();
    let count = model.backbone.body().len()
        + model.static_head.as_ref().map_or(0, |h| h.len())
        + 1; // __meta

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, tensor) in body_params {
        push_param(&mut buf, &format!("body.{name}"), tensor);
    }
    for (name, tensor) in head_params {
        push_param(&mut buf, &format!("head.{name}"), tensor);
    }

    let meta = format!(
        "arch={}\nmode={}\nseed={}\nconfig_hash={:016x}\nhas_head={}\n",
        model.backbone.arch().describe(),
        model.provenance.mode,
        model.provenance.seed,
        model.provenance.config_hash,
        u8::from(model.static_head.is_some()),
    );
    let meta_tensor =
        Tensor::<f32>::from_vec(&[meta.len()], meta.bytes().map(|b| b as f32).collect())
            .expect("meta is nonempty");
    push_param(&mut buf, META_NAME, &meta_tensor);
    buf
}

pub fn save_checkpoint<E: Scalar>(model: &TrainedModel<E>, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_bytes(model)).map_err(|e| Error::io(path, e))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {} bytes at offset {}, file holds {}",
                n,
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
}

struct RawParam {
    name: String,
    dtype: u8,
    dims: Vec<usize>,
    payload: Vec<u8>,
}

fn read_params(bytes: &[u8]) -> Result<Vec<RawParam>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
        let dtype = cur.u8()?;
        let width = match dtype {
            1 => 4,
            2 => 8,
            other => {
                return Err(Error::Checkpoint(format!(
                    "unknown dtype tag {other} for '{name}'"
                )))
            }
        };
        let ndim = cur.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let payload = cur.take(numel * width)?.to_vec();
        params.push(RawParam {
            name,
            dtype,
            dims,
            payload,
        });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last parameter",
            bytes.len() - cur.pos
        )));
    }
    Ok(params)
}

fn decode_tensor<E: Scalar>(raw: &RawParam) -> Result<Tensor<E>> {
    if raw.dtype != E::DTYPE_TAG {
        return Err(Error::Checkpoint(format!(
            "parameter '{}' has dtype tag {}, expected {}",
            raw.name,
            raw.dtype,
            E::DTYPE_TAG
        )));
    }
    let data = raw
        .payload
        .chunks_exact(E::BYTE_WIDTH)
        .map(E::from_le_slice)
        .collect();
    Tensor::from_vec(&raw.dims, data)
}

/// Restore a model, including architecture and provenance, from a file
/// written by [`save_checkpoint`] with the same element type.
pub fn load_checkpoint<E: Scalar>(path: &Path) -> Result<TrainedModel<E>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    load_checkpoint_bytes(&bytes)
}

pub fn load_checkpoint_bytes<E: Scalar>(bytes: &[u8]) -> Result<TrainedModel<E>> {
    let raws = read_params(bytes)?;

    let meta_raw = raws
        .iter()
        .find(|r| r.name == META_NAME)
        .ok_or_else(|| Error::Checkpoint("missing __meta parameter".into()))?;
    if meta_raw.dtype != 1 {
        return Err(Error::Checkpoint("__meta must be f32".into()));
    }
    let meta_bytes: Vec<u8> = meta_raw
        .payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as u8)
        .collect();
    let meta_text = String::from_utf8(meta_bytes)
        .map_err(|_| Error::Checkpoint("__meta is not UTF-8".into()))?;
    let meta_get = |key: &str| -> Result<&str> {
        meta_text
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}=")))
            .ok_or_else(|| Error::Checkpoint(format!("__meta lacks '{key}'")))
    };

    let arch = Architecture::parse(meta_get("arch")?)?;
    let seed: u64 = meta_get("seed")?
        .parse()
        .map_err(|_| Error::Checkpoint("bad seed in __meta".into()))?;
    let config_hash = u64::from_str_radix(meta_get("config_hash")?, 16)
        .map_err(|_| Error::Checkpoint("bad config_hash in __meta".into()))?;
    let mode = meta_get("mode")?.to_string();
    let has_head = meta_get("has_head")? == "1";

    let mut body = ParamGroup::new(ParamRole::Body);
    let mut head = ParamGroup::new(ParamRole::Head);
    for raw in &raws {
        if raw.name == META_NAME {
            continue;
        }
        if let Some(name) = raw.name.strip_prefix("body.") {
            body.push(name, decode_tensor::<E>(raw)?)?;
        } else if let Some(name) = raw.name.strip_prefix("head.") {
            head.push(name, decode_tensor::<E>(raw)?)?;
        } else {
            return Err(Error::Checkpoint(format!(
                "parameter '{}' belongs to neither body nor head",
                raw.name
            )));
        }
    }
    if has_head != !head.is_empty() {
        return Err(Error::Checkpoint(
            "head presence disagrees with __meta".into(),
        ));
    }

    Ok(TrainedModel {
        backbone: Backbone::from_parts(arch, body)?,
        static_head: (!head.is_empty()).then_some(head),
        provenance: Provenance {
            seed,
            config_hash,
            mode,
        },
    })
}
