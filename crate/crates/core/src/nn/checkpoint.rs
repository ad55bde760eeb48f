//! Portable network container.
//!
//! All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes   "DFFLNET1"
//! version      u32       1
//! input_dim    u32
//! embed_dim    u32
//! activation   u8        0 = silu
//! n_hidden     u32
//! widths       u32 x n_hidden
//! n_segments   u32
//!   name_len   u16
//!   name       utf-8 bytes
//!   offset     u64
//!   ndim       u32
//!   dims       u64 x ndim
//! n_values     u64
//! values       f64 x n_values
//! ```

use std::io::{Read, Write};

use super::mlp::{Activation, Mlp, MlpSpec};
use super::params::{ParamVector, Segment};
use crate::error::{Error, Result};

pub const NET_MAGIC: &[u8; 8] = b"DFFLNET1";
pub const NET_VERSION: u32 = 1;

pub(crate) fn io_err(e: std::io::Error) -> Error {
    Error::Checkpoint(e.to_string())
}

pub(crate) fn put_u8(w: &mut impl Write, v: u8) -> Result<()> {
    w.write_all(&[v]).map_err(io_err)
}
pub(crate) fn put_u16(w: &mut impl Write, v: u16) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}
pub(crate) fn put_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}
pub(crate) fn put_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes()).map_err(io_err)
}
pub(crate) fn put_f64s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    put_u64(w, vals.len() as u64)?;
    let mut buf = Vec::with_capacity(vals.len() * 8);
    for v in vals {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

pub(crate) fn get_bytes<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(b)
}
pub(crate) fn get_u8(r: &mut impl Read) -> Result<u8> {
    Ok(get_bytes::<1>(r)?[0])
}
pub(crate) fn get_u16(r: &mut impl Read) -> Result<u16> {
    Ok(u16::from_le_bytes(get_bytes(r)?))
}
pub(crate) fn get_u32(r: &mut impl Read) -> Result<u32> {
    Ok(u32::from_le_bytes(get_bytes(r)?))
}
pub(crate) fn get_u64(r: &mut impl Read) -> Result<u64> {
    Ok(u64::from_le_bytes(get_bytes(r)?))
}
pub(crate) fn get_f64s(r: &mut impl Read, limit: usize) -> Result<Vec<f64>> {
    let n = get_u64(r)? as usize;
    if n > limit {
        return Err(Error::Checkpoint(format!(
            "value count {n} exceeds limit {limit}"
        )));
    }
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf).map_err(io_err)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

const MAX_VALUES: usize = 1 << 32;

pub fn write_net(w: &mut impl Write, net: &Mlp) -> Result<()> {
    let spec = net.spec();
    w.write_all(NET_MAGIC).map_err(io_err)?;
    put_u32(w, NET_VERSION)?;
    put_u32(w, spec.input_dim as u32)?;
    put_u32(w, spec.time_embed_dim as u32)?;
    put_u8(
        w,
        match spec.activation {
            Activation::Silu => 0,
        },
    )?;
    put_u32(w, spec.hidden_widths.len() as u32)?;
    for &h in &spec.hidden_widths {
        put_u32(w, h as u32)?;
    }
    let params = net.params();
    put_u32(w, params.layout().len() as u32)?;
    for seg in params.layout() {
        let name = seg.name.as_bytes();
        put_u16(w, name.len() as u16)?;
        w.write_all(name).map_err(io_err)?;
        put_u64(w, seg.offset as u64)?;
        put_u32(w, seg.shape.len() as u32)?;
        for &d in &seg.shape {
            put_u64(w, d as u64)?;
        }
    }
    put_f64s(w, params.values())
}

pub fn read_net(r: &mut impl Read) -> Result<Mlp> {
    let magic: [u8; 8] = get_bytes(r)?;
    if &magic != NET_MAGIC {
        return Err(Error::Checkpoint("bad network magic".into()));
    }
    let version = get_u32(r)?;
    if version != NET_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported network version {version}"
        )));
    }
    let input_dim = get_u32(r)? as usize;
    let time_embed_dim = get_u32(r)? as usize;
    let activation = match get_u8(r)? {
        0 => Activation::Silu,
        other => {
            return Err(Error::Checkpoint(format!(
                "unknown activation code {other}"
            )))
        }
    };
    let n_hidden = get_u32(r)? as usize;
    if n_hidden > 1024 {
        return Err(Error::Checkpoint("implausible hidden layer count".into()));
    }
    let hidden_widths = (0..n_hidden)
        .map(|_| get_u32(r).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    let n_seg = get_u32(r)? as usize;
    if n_seg > 4096 {
        return Err(Error::Checkpoint("implausible segment count".into()));
    }
    let mut layout = Vec::with_capacity(n_seg);
    for _ in 0..n_seg {
        let len = get_u16(r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let offset = get_u64(r)? as usize;
        let ndim = get_u32(r)? as usize;
        if ndim > 8 {
            return Err(Error::Checkpoint("implausible tensor rank".into()));
        }
        let shape = (0..ndim)
            .map(|_| get_u64(r).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        layout.push(Segment {
            name,
            offset,
            shape,
        });
    }
    let values = get_f64s(r, MAX_VALUES)?;
    let spec = MlpSpec {
        input_dim,
        hidden_widths,
        activation,
        time_embed_dim,
    };
    let params = ParamVector::from_parts(values, layout)?;
    Mlp::from_params(spec, params).map_err(|e| Error::Checkpoint(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut net = Mlp::new(MlpSpec::new(3, vec![5, 4], 6), 9).unwrap();
        net.params_mut().get_mut("out.bias")[1] = -0.123456789;
        let mut buf = Vec::new();
        write_net(&mut buf, &net).unwrap();
        let back = read_net(&mut buf.as_slice()).unwrap();
        assert_eq!(back, net);
    }

    #[test]
    fn header_layout_is_stable() {
        let net = Mlp::new(MlpSpec::new(2, vec![3], 2), 1).unwrap();
        let mut buf = Vec::new();
        write_net(&mut buf, &net).unwrap();
        assert_eq!(&buf[..8], b"DFFLNET1");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(buf[12..16].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(buf[16..20].try_into().unwrap()), 2);
        assert_eq!(buf[20], 0);
        let n = net.params().len();
        let tail = &buf[buf.len() - 8 * n - 8..buf.len() - 8 * n];
        assert_eq!(u64::from_le_bytes(tail.try_into().unwrap()), n as u64);
    }

    #[test]
    fn truncated_input_is_an_error() {
        let net = Mlp::new(MlpSpec::new(2, vec![3], 2), 1).unwrap();
        let mut buf = Vec::new();
        write_net(&mut buf, &net).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_net(&mut buf.as_slice()).is_err());
        assert!(read_net(&mut &b"garbage!"[..]).is_err());
    }
}
