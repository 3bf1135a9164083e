//! EENW weight files.
//!
//! Little-endian layout:
//!
//! ```text
//! "EENW" | version u32 = 1 | config_len u32 | config JSON (UTF-8)
//! tensor_count u32 | tensor*
//! tensor := name_len u16 | name | ndim u8 | dims u32 × ndim | f32 × ∏dims
//! ```
//!
//! Tensors are named `stage{s}.block{b}.weight|bias` and
//! `exit{n}.weight|bias`, 1-based. Conv weights have dims
//! `[out, in, k, k]`, biases `[out]`.

use std::collections::BTreeMap;

use crate::error::{FormatError, Result};
use crate::model::{ModelConfig, MultiExitNet};
use crate::tensor::ConvParams;

const MAGIC: &[u8; 4] = b"EENW";
const VERSION: u32 = 1;

fn layer_names(config: &ModelConfig) -> Vec<(String, (usize, usize, usize))> {
    let mut names = Vec::new();
    for s in 0..config.num_exits {
        for b in 0..config.blocks_per_stage {
            names.push((
                format!("stage{}.block{}", s + 1, b + 1),
                config.block_shape(s, b),
            ));
        }
    }
    for n in 0..config.num_exits {
        names.push((format!("exit{}", n + 1), config.head_shape()));
    }
    names
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f32]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dims.len() as u8);
    for d in dims {
        buf.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

pub(crate) fn save(net: &MultiExitNet) -> Vec<u8> {
    let config = net.config();
    let json = serde_json::to_string(config).expect("model config serializes");
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(json.as_bytes());

    let layers: Vec<&ConvParams> = net
        .stages()
        .iter()
        .flatten()
        .chain(net.exit_heads())
        .collect();
    buf.extend_from_slice(&(2 * layers.len() as u32).to_le_bytes());
    for ((name, _), p) in layer_names(config).iter().zip(layers) {
        let k = p.kernel();
        write_tensor(
            &mut buf,
            &format!("{name}.weight"),
            &[p.out_channels(), p.in_channels(), k, k],
            p.weight(),
        );
        write_tensor(
            &mut buf,
            &format!("{name}.bias"),
            &[p.out_channels()],
            p.bias(),
        );
    }
    buf
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], FormatError> {
        if self.buf.len() - self.pos < n {
            return Err(FormatError::Truncated {
                what: what.to_string(),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, FormatError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u16(&mut self, what: &str) -> Result<u16, FormatError> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u8(&mut self, what: &str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }
}

struct RawTensor {
    dims: Vec<usize>,
    values: Vec<f32>,
}

pub(crate) fn load(bytes: &[u8]) -> Result<MultiExitNet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(FormatError::BadMagic {
            expected: "EENW".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        }
        .into());
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(FormatError::UnsupportedVersion {
            format: "EENW",
            version,
        }
        .into());
    }
    let config_len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(config_len, "config")?)
        .map_err(|e| FormatError::BadConfig(e.to_string()))?;
    config
        .validate()
        .map_err(|e| FormatError::BadConfig(e.to_string()))?;

    let count = r.u32("tensor count")? as usize;
    let mut tensors = BTreeMap::new();
    for i in 0..count {
        let ctx = format!("tensor #{i}");
        let name_len = r.u16(&ctx)? as usize;
        let name = std::str::from_utf8(r.take(name_len, &ctx)?)
            .map_err(|_| FormatError::Other(format!("{ctx}: name is not UTF-8")))?
            .to_string();
        let ndim = r.u8(&name)? as usize;
        let dims: Vec<usize> = (0..ndim)
            .map(|_| r.u32(&name).map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let n: usize = dims.iter().product();
        let payload = r.take(
            n.checked_mul(4)
                .ok_or_else(|| tensor_err(&name, "size overflow"))?,
            &name,
        )?;
        let values: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(tensor_err(&name, "non-finite value").into());
        }
        if tensors
            .insert(name.clone(), RawTensor { dims, values })
            .is_some()
        {
            return Err(tensor_err(&name, "duplicate tensor").into());
        }
    }
    if r.pos != bytes.len() {
        return Err(FormatError::Other(format!("{} trailing bytes", bytes.len() - r.pos)).into());
    }

    let mut layers = Vec::new();
    for (name, (inp, out, k)) in layer_names(&config) {
        let wname = format!("{name}.weight");
        let bname = format!("{name}.bias");
        let w = tensors
            .remove(&wname)
            .ok_or_else(|| tensor_err(&wname, "missing"))?;
        let b = tensors
            .remove(&bname)
            .ok_or_else(|| tensor_err(&bname, "missing"))?;
        if w.dims != [out, inp, k, k] {
            return Err(tensor_err(
                &wname,
                &format!("dims {:?}, expected {:?}", w.dims, [out, inp, k, k]),
            )
            .into());
        }
        if b.dims != [out] {
            return Err(
                tensor_err(&bname, &format!("dims {:?}, expected {:?}", b.dims, [out])).into(),
            );
        }
        layers.push(ConvParams::new(out, inp, k, w.values, b.values)?);
    }
    if let Some(name) = tensors.keys().next() {
        return Err(tensor_err(name, "unexpected tensor").into());
    }

    let heads = layers.split_off(config.num_exits * config.blocks_per_stage);
    let mut it = layers.into_iter();
    let stages = (0..config.num_exits)
        .map(|_| it.by_ref().take(config.blocks_per_stage).collect())
        .collect();
    MultiExitNet::new(config, stages, heads)
}

fn tensor_err(name: &str, reason: &str) -> FormatError {
    FormatError::Tensor {
        tensor: name.to_string(),
        reason: reason.to_string(),
    }
}

impl MultiExitNet {
    /// Serializes to the EENW format.
    pub fn to_eenw(&self) -> Vec<u8> {
        save(self)
    }

    pub fn from_eenw(bytes: &[u8]) -> Result<Self> {
        load(bytes)
    }
}
