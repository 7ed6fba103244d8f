//! Binary checkpoint format.
//!
//! ```text
//! "MMCK" | u32 version (=1) | u32 tensor count
//! per tensor: u16 name len | name (UTF-8) | u8 dtype (0=f32, 1=f64) | u8 ndim
//!             | ndim x u32 dims | little-endian values
//! u32 json len | model spec as UTF-8 JSON
//! ```
//!
//! Parameters come first in model order, followed by the running mean and
//! variance of every batch-norm layer (stored as f64).

use std::fs;
use std::path::Path;

use super::model::{ModelSpec, TwoStreamModel};
use crate::error::{Error, Result};
use crate::tensor::{BatchNormState, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"MMCK";
pub const VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 1;

fn put_tensor_header(buf: &mut Vec<u8>, name: &str, dtype: u8, shape: &[usize]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.push(dtype);
    buf.push(shape.len() as u8);
    for &d in shape {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

fn put_values<T: Real>(buf: &mut Vec<u8>, values: &[T]) {
    for v in values {
        match T::DTYPE {
            DTYPE_F32 => buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            _ => buf.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
}

/// Serializes a model to checkpoint bytes.
pub fn encode<T: Real>(model: &TwoStreamModel<T>) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let count = model.params().len() + 2 * model.bn_states().len();
    buf.extend_from_slice(&(count as u32).to_le_bytes());
    for (name, t) in model.param_names().iter().zip(model.params()) {
        put_tensor_header(&mut buf, name, T::DTYPE, t.shape());
        put_values(&mut buf, t.data());
    }
    for (name, st) in model.bn_names().iter().zip(model.bn_states()) {
        for (suffix, values) in [
            ("running_mean", &st.running_mean),
            ("running_var", &st.running_var),
        ] {
            put_tensor_header(
                &mut buf,
                &format!("{name}.{suffix}"),
                DTYPE_F64,
                &[values.len()],
            );
            put_values(&mut buf, values);
        }
    }
    let json = serde_json::to_vec(model.spec()).map_err(|e| Error::config(e.to_string()))?;
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            message: message.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("truncated while reading {what}")));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2, what)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4, what)?.try_into().expect("4 bytes"),
        ))
    }

    fn tensor(&mut self) -> Result<(String, u8, Vec<usize>, Vec<f64>)> {
        let len = self.u16("name length")? as usize;
        let start = self.pos;
        let name = std::str::from_utf8(self.take(len, "tensor name")?)
            .map_err(|_| Error::Format {
                offset: start,
                message: "tensor name is not UTF-8".into(),
            })?
            .to_owned();
        let dtype = self.u8("dtype")?;
        let width = match dtype {
            DTYPE_F32 => 4,
            DTYPE_F64 => 8,
            other => return Err(self.err(format!("unknown dtype code {other}"))),
        };
        let ndim = self.u8("ndim")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32("dimension")? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = self.take(numel * width, &format!("values of {name}"))?;
        let values = if width == 4 {
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")) as f64)
                .collect()
        } else {
            raw.chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect()
        };
        Ok((name, dtype, shape, values))
    }
}

/// Parses checkpoint bytes. Parameter dtype must match `T`.
pub fn decode<T: Real>(bytes: &[u8]) -> Result<TwoStreamModel<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: "bad magic, not a checkpoint".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let count = r.u32("tensor count")? as usize;
    let mut params = Vec::new();
    let mut stats: Vec<(String, Vec<f64>)> = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let (name, dtype, shape, values) = r.tensor()?;
        if name.ends_with(".running_mean") || name.ends_with(".running_var") {
            stats.push((name, values));
            continue;
        }
        if dtype != T::DTYPE {
            return Err(Error::Format {
                offset: at,
                message: format!("{name}: dtype {dtype} does not match requested precision"),
            });
        }
        let t =
            Tensor::new(&shape, values.into_iter().map(T::from_f64).collect()).map_err(|e| {
                Error::Format {
                    offset: at,
                    message: e.to_string(),
                }
            })?;
        params.push((name, t));
    }
    let json_len = r.u32("config length")? as usize;
    let at = r.pos;
    let spec: ModelSpec =
        serde_json::from_slice(r.take(json_len, "config")?).map_err(|e| Error::Format {
            offset: at,
            message: format!("config: {e}"),
        })?;
    if r.pos != bytes.len() {
        return Err(r.err("trailing bytes after config"));
    }
    if !stats.len().is_multiple_of(2) {
        return Err(r.err("unpaired batch-norm statistics"));
    }
    let mut bn = Vec::new();
    for pair in stats.chunks_exact(2) {
        let (mean_name, mean) = &pair[0];
        let (var_name, var) = &pair[1];
        let base = mean_name.trim_end_matches(".running_mean");
        if var_name.trim_end_matches(".running_var") != base || mean.len() != var.len() {
            return Err(r.err(format!("mismatched statistics {mean_name} / {var_name}")));
        }
        bn.push((
            base.to_owned(),
            BatchNormState {
                running_mean: mean.clone(),
                running_var: var.clone(),
            },
        ));
    }
    TwoStreamModel::from_parts(spec, params, bn)
}

pub fn save_checkpoint<T: Real>(model: &TwoStreamModel<T>, path: &Path) -> Result<()> {
    let bytes = encode(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<TwoStreamModel<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::BranchConfig;

    fn tiny() -> TwoStreamModel<f32> {
        TwoStreamModel::new(&BranchConfig::with_width(2, 8), 3, 5).unwrap()
    }

    #[test]
    fn encode_decode_encode_is_identical() {
        let bytes = encode(&tiny()).unwrap();
        let again = encode(&decode::<f32>(&bytes).unwrap()).unwrap();
        assert_eq!(bytes, again);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode(&tiny()).unwrap();
        bytes[0] = b'X';
        match decode::<f32>(&bytes) {
            Err(Error::Format { offset: 0, .. }) => {}
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode(&tiny()).unwrap();
        let cut = &bytes[..bytes.len() / 2];
        match decode::<f32>(cut) {
            Err(Error::Format { offset, message }) => {
                assert!(offset <= cut.len());
                assert!(message.contains("truncated"), "{message}");
            }
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn precision_mismatch_is_rejected() {
        let bytes = encode(&tiny()).unwrap();
        assert!(matches!(decode::<f64>(&bytes), Err(Error::Format { .. })));
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&tiny()).unwrap();
        assert_eq!(&bytes[..4], b"MMCK");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let m = tiny();
        let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        assert_eq!(count, m.params().len() + 2 * m.bn_states().len());
        let name_len = u16::from_le_bytes(bytes[12..14].try_into().unwrap()) as usize;
        assert_eq!(&bytes[14..14 + name_len], b"fundus.stem.conv");
    }
}
