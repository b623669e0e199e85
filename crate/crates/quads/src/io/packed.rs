//! The packed model container.
//!
//! One file carries a whole model: quantized tensors as a centroid table
//! plus a bit-packed index stream, exempt tensors as raw fp32. The layout
//! is little-endian throughout and bit-exact by construction, so an
//! implementation in any language can read and write it.
//!
//! ```text
//! "QDSM"                magic, 4 bytes
//! version               u16, currently 1
//! meta_len              u32
//! meta                  UTF-8 key=value lines describing the architecture
//! tensor_count          u32
//! per tensor:
//!   id_len u16, id bytes
//!   kind   u8            0 dense weight, 1 conv kernel, 2 bias, 3 head weight
//!   ndim   u8, dims u32 each
//!   storage u8           0 fp32, 1 codebook
//!   fp32:     values f32-LE, row-major
//!   codebook: bit_length u8
//!             centroids f32-LE, 2^bit_length entries
//!             indices   ceil(count * bit_length / 8) bytes,
//!                       LSB-first within each byte, weights in row-major order
//! crc32                 u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{crc32, io_err, IoError};
use crate::model::{skeleton, Activation, ConvSpec, EncoderConfig, LayerKind, ModelGraph, Role};
use crate::quant::{LayerCodebook, QuantizedModel};

pub const MAGIC: [u8; 4] = *b"QDSM";
pub const VERSION: u16 = 1;

/// Packs `b`-bit indices LSB-first; `ceil(n*b/8)` bytes.
pub fn pack_indices(indices: &[u32], bit_length: u8) -> Vec<u8> {
    let b = bit_length as usize;
    let mut out = vec![0u8; (indices.len() * b).div_ceil(8)];
    for (j, &v) in indices.iter().enumerate() {
        let base = j * b;
        for i in 0..b {
            if v >> i & 1 == 1 {
                out[(base + i) / 8] |= 1 << ((base + i) % 8);
            }
        }
    }
    out
}

pub fn unpack_indices(bytes: &[u8], bit_length: u8, count: usize) -> Vec<u32> {
    let b = bit_length as usize;
    let mut out = Vec::with_capacity(count);
    for j in 0..count {
        let base = j * b;
        let mut v = 0u32;
        for i in 0..b {
            if bytes[(base + i) / 8] >> ((base + i) % 8) & 1 == 1 {
                v |= 1 << i;
            }
        }
        out.push(v);
    }
    out
}

fn kind_tag(name: &str, kind: Option<LayerKind>) -> u8 {
    if name.ends_with(".bias") {
        2
    } else if name.starts_with("head.") {
        3
    } else if matches!(kind, Some(LayerKind::Conv1d { .. })) {
        1
    } else {
        0
    }
}

fn meta_text(model: &ModelGraph, labels: Option<&[String]>) -> String {
    let cfg = &model.config;
    let conv = cfg
        .conv_layers
        .iter()
        .map(|c| format!("{}:{}:{}", c.kernel, c.out_channels, c.stride))
        .collect::<Vec<_>>()
        .join(",");
    let ff = cfg
        .ff_layers
        .iter()
        .map(|w| w.to_string())
        .collect::<Vec<_>>()
        .join(",");
    let mut s = String::new();
    s.push_str(&format!(
        "role={}\n",
        match model.role {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    ));
    s.push_str(&format!("n_mels={}\n", cfg.n_mels));
    s.push_str(&format!("conv={conv}\n"));
    s.push_str(&format!("ff={ff}\n"));
    s.push_str(&format!("latent_dim={}\n", cfg.latent_dim));
    s.push_str(&format!(
        "activation={}\n",
        match cfg.activation {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
        }
    ));
    s.push_str(&format!("n_classes={}\n", model.n_classes().unwrap_or(0)));
    if let Some(labels) = labels {
        s.push_str(&format!("labels={}\n", labels.join("|")));
    }
    s
}

/// `(architecture, role, n_classes, labels)` recovered from the header.
type ParsedMeta = (EncoderConfig, Role, usize, Option<Vec<String>>);

fn parse_meta(text: &str, offset: usize) -> Result<ParsedMeta, IoError> {
    let mut map = BTreeMap::new();
    for line in text.lines() {
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| IoError::Malformed {
            offset,
            what: format!("meta line without '=': {line:?}"),
        })?;
        map.insert(k.to_string(), v.to_string());
    }
    let get = |k: &str| {
        map.get(k).cloned().ok_or_else(|| IoError::Malformed {
            offset,
            what: format!("meta key {k:?} missing"),
        })
    };
    let bad = |k: &str, v: &str| IoError::Malformed {
        offset,
        what: format!("meta key {k:?} has invalid value {v:?}"),
    };
    let role = match get("role")?.as_str() {
        "teacher" => Role::Teacher,
        "student" => Role::Student,
        other => return Err(bad("role", other)),
    };
    let n_mels: usize = get("n_mels")?.parse().map_err(|_| bad("n_mels", ""))?;
    let conv_text = get("conv")?;
    let mut conv_layers = Vec::new();
    if !conv_text.is_empty() {
        for part in conv_text.split(',') {
            let fields: Vec<&str> = part.split(':').collect();
            if fields.len() != 3 {
                return Err(bad("conv", part));
            }
            conv_layers.push(ConvSpec {
                kernel: fields[0].parse().map_err(|_| bad("conv", part))?,
                out_channels: fields[1].parse().map_err(|_| bad("conv", part))?,
                stride: fields[2].parse().map_err(|_| bad("conv", part))?,
            });
        }
    }
    let ff_text = get("ff")?;
    let ff_layers = if ff_text.is_empty() {
        vec![]
    } else {
        ff_text
            .split(',')
            .map(|w| w.parse().map_err(|_| bad("ff", w)))
            .collect::<Result<Vec<usize>, _>>()?
    };
    let latent_dim: usize = get("latent_dim")?
        .parse()
        .map_err(|_| bad("latent_dim", ""))?;
    let activation = match get("activation")?.as_str() {
        "gelu" => Activation::Gelu,
        "relu" => Activation::Relu,
        other => return Err(bad("activation", other)),
    };
    let n_classes: usize = get("n_classes")?
        .parse()
        .map_err(|_| bad("n_classes", ""))?;
    let labels = map
        .get("labels")
        .map(|v| v.split('|').map(str::to_string).collect());
    Ok((
        EncoderConfig {
            n_mels,
            conv_layers,
            ff_layers,
            latent_dim,
            activation,
        },
        role,
        n_classes,
        labels,
    ))
}

/// Serializes a quantized model (or, with an empty codebook map, a plain
/// full-precision checkpoint).
pub fn save_packed(
    model: &QuantizedModel,
    labels: Option<&[String]>,
    path: &Path,
) -> Result<(), IoError> {
    let bytes = encode(model, labels);
    fs::write(path, bytes).map_err(io_err(path))
}

pub fn encode(model: &QuantizedModel, labels: Option<&[String]>) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = meta_text(&model.base, labels);
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta.as_bytes());

    let params: Vec<(&crate::model::Param, Option<LayerKind>)> = model
        .base
        .layers
        .iter()
        .flat_map(|l| [(&l.weight, Some(l.kind)), (&l.bias, Some(l.kind))])
        .chain(
            model
                .base
                .head
                .iter()
                .flat_map(|h| [(&h.weight, None), (&h.bias, None)]),
        )
        .collect();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());

    for (p, kind) in params {
        buf.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(kind_tag(&p.name, kind));
        buf.push(p.shape.len() as u8);
        for &d in &p.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match model.codebooks.get(&p.name) {
            Some(cb) => {
                buf.push(1);
                buf.push(cb.bit_length);
                for &c in &cb.centroids {
                    buf.extend_from_slice(&c.to_le_bytes());
                }
                buf.extend_from_slice(&pack_indices(&cb.indices, cb.bit_length));
            }
            None => {
                buf.push(0);
                for &v in &p.data {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
    }
    let crc = crc32(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

/// Exact byte size `encode` will produce: header + per-tensor metadata +
/// `4 * 2^b + ceil(P * b / 8)` per codebook tensor + `4 * P` per fp32
/// tensor + 4 CRC bytes.
pub fn packed_size_bytes(model: &QuantizedModel, labels: Option<&[String]>) -> usize {
    let meta = meta_text(&model.base, labels);
    let mut size = 4 + 2 + 4 + meta.len() + 4;
    for p in model.base.named_params() {
        size += 2 + p.name.len() + 1 + 1 + 4 * p.shape.len() + 1;
        size += match model.codebooks.get(&p.name) {
            Some(cb) => {
                1 + 4 * cb.centroids.len() + (p.data.len() * cb.bit_length as usize).div_ceil(8)
            }
            None => 4 * p.data.len(),
        };
    }
    size + 4
}

pub fn load_packed(path: &Path) -> Result<(QuantizedModel, Option<Vec<String>>), IoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    /// Exclusive parse limit; the trailing CRC lives beyond it.
    limit: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.pos + n > self.limit {
            return Err(IoError::Truncated {
                offset: self.limit,
                needed: self.pos + n - self.limit,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, IoError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, IoError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(QuantizedModel, Option<Vec<String>>), IoError> {
    // the file must at least close with its checksum
    if bytes.len() < 14 {
        return Err(IoError::Truncated {
            offset: bytes.len(),
            needed: 14 - bytes.len(),
        });
    }
    let crc_offset = bytes.len() - 4;
    let mut r = Reader {
        bytes,
        pos: 0,
        limit: crc_offset,
    };
    let magic: [u8; 4] = r.take(4)?.try_into().unwrap();
    if magic != MAGIC {
        return Err(IoError::BadMagic { got: magic });
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(IoError::BadVersion {
            got: version,
            expected: VERSION,
        });
    }
    let meta_len = r.u32()? as usize;
    let meta_offset = r.pos;
    let meta_bytes = r.take(meta_len)?;
    let meta = std::str::from_utf8(meta_bytes).map_err(|_| IoError::Malformed {
        offset: meta_offset,
        what: "meta block is not UTF-8".into(),
    })?;
    let (cfg, role, n_classes, labels) = parse_meta(meta, meta_offset)?;

    let mut model = skeleton(&cfg, n_classes, role);
    let mut codebooks = BTreeMap::new();
    let tensor_count = r.u32()? as usize;
    let expected: usize = model.named_params().count();
    if tensor_count != expected {
        return Err(IoError::Malformed {
            offset: r.pos - 4,
            what: format!("file holds {tensor_count} tensors, architecture needs {expected}"),
        });
    }
    for _ in 0..tensor_count {
        let id_offset = r.pos;
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| IoError::Malformed {
                offset: id_offset,
                what: "tensor id is not UTF-8".into(),
            })?
            .to_string();
        let _kind = r.u8()?;
        let ndim = r.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let storage = r.u8()?;
        let param = model.param_mut(&id).ok_or_else(|| IoError::Malformed {
            offset: id_offset,
            what: format!("tensor {id:?} not part of the declared architecture"),
        })?;
        // validate against the declared architecture before sizing any reads
        if param.shape != shape {
            return Err(IoError::Malformed {
                offset: id_offset,
                what: format!(
                    "tensor {id:?} shape {shape:?} does not match architecture {:?}",
                    param.shape
                ),
            });
        }
        let count: usize = param.shape.iter().product();
        match storage {
            0 => {
                let mut data = Vec::with_capacity(count);
                for _ in 0..count {
                    data.push(r.f32()?);
                }
                param.data = data;
            }
            1 => {
                let bit_length = r.u8()?;
                if !(1..=16).contains(&bit_length) {
                    return Err(IoError::Malformed {
                        offset: r.pos - 1,
                        what: format!("bit length {bit_length} out of range"),
                    });
                }
                let k = 1usize << bit_length;
                let mut centroids = Vec::with_capacity(k);
                for _ in 0..k {
                    centroids.push(r.f32()?);
                }
                let packed_len = (count * bit_length as usize).div_ceil(8);
                let packed = r.take(packed_len)?;
                let indices = unpack_indices(packed, bit_length, count);
                if let Some(&bad) = indices.iter().find(|&&i| i as usize >= k) {
                    return Err(IoError::Malformed {
                        offset: r.pos - packed_len,
                        what: format!("index {bad} addresses no centroid (k = {k})"),
                    });
                }
                let cb = LayerCodebook {
                    bit_length,
                    centroids,
                    indices,
                };
                param.data = cb.reconstruct_values();
                codebooks.insert(id, cb);
            }
            other => {
                return Err(IoError::Malformed {
                    offset: r.pos - 1,
                    what: format!("unknown storage tag {other}"),
                });
            }
        }
    }
    if r.pos != crc_offset {
        return Err(IoError::Malformed {
            offset: r.pos,
            what: format!("{} unexpected trailing bytes", crc_offset - r.pos),
        });
    }
    // structure parsed cleanly; now the payload must checksum
    let stored = u32::from_le_bytes(bytes[crc_offset..].try_into().unwrap());
    let computed = crc32(&bytes[..crc_offset]);
    if stored != computed {
        return Err(IoError::CrcMismatch {
            offset: crc_offset,
            stored,
            computed,
        });
    }
    Ok((
        QuantizedModel {
            base: model,
            codebooks,
        },
        labels,
    ))
}

/// Full-precision checkpoint: the same container with every tensor at
/// storage tag fp32.
pub fn save_checkpoint(
    model: &ModelGraph,
    labels: Option<&[String]>,
    path: &Path,
) -> Result<(), IoError> {
    let q = QuantizedModel {
        base: model.clone(),
        codebooks: BTreeMap::new(),
    };
    save_packed(&q, labels, path)
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelGraph, Option<Vec<String>>), IoError> {
    let (q, labels) = load_packed(path)?;
    Ok((q.materialize(), labels))
}
