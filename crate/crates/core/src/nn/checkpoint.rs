//! Binary checkpoints for networks and optimizer state.
//!
//! Network layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "RPFQNET\0"
//! version  u32      1
//! dtype    u8       4 (f32) or 8 (f64)
//! arch     5 × u32  ego_inputs, vehicle_inputs, conv_filters, hidden, actions
//! layers   u32      12
//! per layer: name_len u16, name (utf-8), rows u32, cols u32
//! data     Σ rows·cols values of `dtype` bytes, layers in declaration order
//! ```
//!
//! Adam layout: magic "RPFADAM\0", version u32, dtype u8, step_count u64,
//! beta1 f64, beta2 f64, epsilon f64, len u64, then `len` first moments and
//! `len` second moments.

use std::path::Path;

use super::{AdamState, Architecture, Layer, NetworkParams, Scalar};
use crate::error::{Error, Result};

pub const NETWORK_MAGIC: &[u8; 8] = b"RPFQNET\0";
pub const ADAM_MAGIC: &[u8; 8] = b"RPFADAM\0";
pub const FORMAT_VERSION: u32 = 1;

/// Refuse layer widths that would make decoding allocate absurd buffers.
const MAX_WIDTH: u32 = 1 << 16;

pub fn encode_network<T: Scalar>(params: &NetworkParams<T>) -> Vec<u8> {
    let arch = params.architecture();
    let mut out = Vec::with_capacity(64 + params.len() * T::DTYPE as usize);
    out.extend_from_slice(NETWORK_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE);
    for dim in [
        arch.ego_inputs,
        arch.vehicle_inputs,
        arch.conv_filters,
        arch.hidden,
        arch.actions,
    ] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    out.extend_from_slice(&(Layer::ALL.len() as u32).to_le_bytes());
    for layer in Layer::ALL {
        let span = params.span(layer);
        let name = layer.name().as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(span.rows as u32).to_le_bytes());
        out.extend_from_slice(&(span.cols as u32).to_le_bytes());
    }
    for &x in params.as_slice() {
        x.write_le(&mut out);
    }
    out
}

pub fn decode_network<T: Scalar>(bytes: &[u8]) -> Result<NetworkParams<T>> {
    const WHAT: &str = "network checkpoint";
    let mut r = Reader::new(bytes, WHAT);
    r.expect_magic(NETWORK_MAGIC)?;
    r.expect_version()?;
    r.expect_dtype(T::DTYPE)?;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        let v = r.u32()?;
        if v == 0 || v > MAX_WIDTH {
            return Err(Error::format(WHAT, format!("layer width {v} out of range")));
        }
        *d = v as usize;
    }
    let arch = Architecture {
        ego_inputs: dims[0],
        vehicle_inputs: dims[1],
        conv_filters: dims[2],
        hidden: dims[3],
        actions: dims[4],
    };
    let count = r.u32()?;
    if count as usize != Layer::ALL.len() {
        return Err(Error::format(WHAT, format!("expected 12 layers, found {count}")));
    }
    for layer in Layer::ALL {
        let name_len = r.u16()? as usize;
        let name = r.take(name_len)?;
        if name != layer.name().as_bytes() {
            return Err(Error::format(
                WHAT,
                format!("expected layer {}, found {:?}", layer.name(), String::from_utf8_lossy(name)),
            ));
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if (rows, cols) != arch.shape(layer) {
            return Err(Error::format(
                WHAT,
                format!("layer {} has shape {rows}x{cols}, architecture implies {:?}", layer.name(), arch.shape(layer)),
            ));
        }
    }
    let n = arch.parameter_count();
    let data = r.scalars::<T>(n)?;
    r.finish()?;
    NetworkParams::from_raw(arch, data)
}

pub fn encode_adam<T: Scalar>(state: &AdamState<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 2 * state.len() * T::DTYPE as usize);
    out.extend_from_slice(ADAM_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE);
    out.extend_from_slice(&state.step_count.to_le_bytes());
    for h in [state.beta1, state.beta2, state.epsilon] {
        out.extend_from_slice(&h.to_le_bytes());
    }
    out.extend_from_slice(&(state.len() as u64).to_le_bytes());
    for &x in state.first_moment.iter().chain(&state.second_moment) {
        x.write_le(&mut out);
    }
    out
}

pub fn decode_adam<T: Scalar>(bytes: &[u8]) -> Result<AdamState<T>> {
    const WHAT: &str = "optimizer checkpoint";
    let mut r = Reader::new(bytes, WHAT);
    r.expect_magic(ADAM_MAGIC)?;
    r.expect_version()?;
    r.expect_dtype(T::DTYPE)?;
    let step_count = r.u64()?;
    let beta1 = r.f64()?;
    let beta2 = r.f64()?;
    let epsilon = r.f64()?;
    let len = r.u64()?;
    let remaining = r.remaining() as u64;
    if len.checked_mul(2 * T::DTYPE as u64) != Some(remaining) {
        return Err(Error::format(WHAT, format!("{len} moments do not match {remaining} payload bytes")));
    }
    let len = len as usize;
    let first_moment = r.scalars::<T>(len)?;
    let second_moment = r.scalars::<T>(len)?;
    r.finish()?;
    Ok(AdamState {
        first_moment,
        second_moment,
        step_count,
        beta1,
        beta2,
        epsilon,
    })
}

pub fn save_network<T: Scalar>(params: &NetworkParams<T>, path: &Path) -> Result<()> {
    write_file(path, &encode_network(params))
}

pub fn load_network<T: Scalar>(path: &Path) -> Result<NetworkParams<T>> {
    decode_network(&read_file(path)?)
}

pub fn save_adam<T: Scalar>(state: &AdamState<T>, path: &Path) -> Result<()> {
    write_file(path, &encode_adam(state))
}

pub fn load_adam<T: Scalar>(path: &Path) -> Result<AdamState<T>> {
    decode_adam(&read_file(path)?)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Bounds-checked little-endian cursor.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8], what: &'static str) -> Self {
        Reader { bytes, pos: 0, what }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::format(
                self.what,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>> {
        let width = T::DTYPE as usize;
        let bytes = self.take(n.checked_mul(width).ok_or_else(|| Error::format(self.what, "length overflow"))?)?;
        Ok(bytes.chunks_exact(width).map(T::read_le).collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 8]) -> Result<()> {
        if self.take(8)? != magic {
            return Err(Error::format(self.what, "bad magic"));
        }
        Ok(())
    }

    pub(crate) fn expect_version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(self.what, format!("unsupported version {v}")));
        }
        Ok(())
    }

    fn expect_dtype(&mut self, dtype: u8) -> Result<()> {
        let d = self.u8()?;
        if d != dtype {
            return Err(Error::format(self.what, format!("element width {d}, expected {dtype}")));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.remaining() != 0 {
            return Err(Error::format(self.what, format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}
