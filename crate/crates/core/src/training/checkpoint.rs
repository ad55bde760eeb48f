//! Training checkpoint: a sequence of tagged sections, little-endian.
//!
//! ```text
//! magic        8 bytes   "DFFLCKPT"
//! version      u32       1
//! n_sections   u32
//!   tag        4 bytes
//!   length     u64       payload bytes
//!   payload
//! ```
//!
//! Sections, in this order:
//!
//! * `CONF` resolved training configuration as `key = value` text (utf-8)
//! * `ITER` u64 completed iterations
//! * `MODL` schedule kind u8 (0 constant: f64 g; 1 nodes: u64 count + f64
//!   times, u64 count + f64 values), then f64 horizon
//! * `DRFT`, `SCOR` field: kind u8 (0 zero: u32 dim; 1 linear: u32 dim, u64
//!   count + f64 row-major matrix; 2 network: a network container)
//! * `EMA_` u64 count + f64 averaged parameters (drift then score)
//! * `ADAM` u64 step, u64 count + f64 first moments, u64 count + f64 second moments

use std::io::{Cursor, Read, Write};
use std::path::Path;

use super::optim::AdamState;
use super::train::TrainConfig;
use crate::config::Config;
use crate::dynamics::DiffusionSchedule;
use crate::error::{Error, Result};
use crate::field::Field;
use crate::model::Model;
use crate::nn::checkpoint::{
    get_bytes, get_f64s, get_u32, get_u64, get_u8, io_err, put_f64s, put_u32, put_u64, put_u8,
};
use crate::nn::checkpoint::{read_net, write_net};

pub const CKPT_MAGIC: &[u8; 8] = b"DFFLCKPT";
pub const CKPT_VERSION: u32 = 1;
const MAX_VALUES: usize = 1 << 32;

/// Everything needed to resume training or to evaluate the model.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub iteration: u64,
    pub model: Model,
    pub ema: Vec<f64>,
    pub adam: AdamState,
}

impl TrainState {
    /// The model carrying the averaged parameters.
    pub fn ema_model(&self) -> Model {
        let mut m = self.model.clone();
        m.set_params_flat(&self.ema)
            .expect("EMA matches model size");
        m
    }
}

pub fn write_field(w: &mut impl Write, field: &Field) -> Result<()> {
    match field {
        Field::Zero { dim } => {
            put_u8(w, 0)?;
            put_u32(w, *dim as u32)
        }
        Field::Linear { dim, matrix } => {
            put_u8(w, 1)?;
            put_u32(w, *dim as u32)?;
            put_f64s(w, matrix)
        }
        Field::Net(net) => {
            put_u8(w, 2)?;
            write_net(w, net)
        }
        Field::OuScore(_) => Err(Error::Checkpoint(
            "analytic OU score fields are not persisted".into(),
        )),
    }
}

pub fn read_field(r: &mut impl Read) -> Result<Field> {
    match get_u8(r)? {
        0 => Ok(Field::zero(get_u32(r)? as usize)),
        1 => {
            let dim = get_u32(r)? as usize;
            let m = get_f64s(r, MAX_VALUES)?;
            Field::linear(dim, m).map_err(|e| Error::Checkpoint(e.to_string()))
        }
        2 => Ok(Field::Net(read_net(r)?)),
        k => Err(Error::Checkpoint(format!("unknown field kind {k}"))),
    }
}

fn write_model_section(w: &mut impl Write, model: &Model) -> Result<()> {
    match &model.schedule {
        DiffusionSchedule::Constant(g) => {
            put_u8(w, 0)?;
            w.write_all(&g.to_le_bytes()).map_err(io_err)?;
        }
        DiffusionSchedule::Nodes { times, values } => {
            put_u8(w, 1)?;
            put_f64s(w, times)?;
            put_f64s(w, values)?;
        }
    }
    w.write_all(&model.horizon.to_le_bytes()).map_err(io_err)
}

fn read_f64(r: &mut impl Read) -> Result<f64> {
    Ok(f64::from_le_bytes(get_bytes(r)?))
}

fn section(
    w: &mut impl Write,
    tag: &[u8; 4],
    body: impl FnOnce(&mut Vec<u8>) -> Result<()>,
) -> Result<()> {
    let mut buf = Vec::new();
    body(&mut buf)?;
    w.write_all(tag).map_err(io_err)?;
    put_u64(w, buf.len() as u64)?;
    w.write_all(&buf).map_err(io_err)
}

pub fn encode_train_state(w: &mut impl Write, st: &TrainState) -> Result<()> {
    w.write_all(CKPT_MAGIC).map_err(io_err)?;
    put_u32(w, CKPT_VERSION)?;
    put_u32(w, 7)?;
    section(w, b"CONF", |b| {
        b.extend_from_slice(st.config.to_config().render().as_bytes());
        Ok(())
    })?;
    section(w, b"ITER", |b| put_u64(b, st.iteration))?;
    section(w, b"MODL", |b| write_model_section(b, &st.model))?;
    section(w, b"DRFT", |b| write_field(b, &st.model.drift))?;
    section(w, b"SCOR", |b| write_field(b, &st.model.score))?;
    section(w, b"EMA_", |b| put_f64s(b, &st.ema))?;
    section(w, b"ADAM", |b| {
        put_u64(b, st.adam.t)?;
        put_f64s(b, &st.adam.m)?;
        put_f64s(b, &st.adam.v)
    })
}

pub fn decode_train_state(r: &mut impl Read) -> Result<TrainState> {
    let magic: [u8; 8] = get_bytes(r)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad checkpoint magic".into()));
    }
    let version = get_u32(r)?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let n = get_u32(r)?;
    let mut sections: Vec<([u8; 4], Vec<u8>)> = Vec::new();
    for _ in 0..n {
        let tag: [u8; 4] = get_bytes(r)?;
        let len = get_u64(r)? as usize;
        if len > MAX_VALUES {
            return Err(Error::Checkpoint("implausible section length".into()));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf).map_err(io_err)?;
        sections.push((tag, buf));
    }
    let find = |tag: &[u8; 4]| -> Result<Cursor<&[u8]>> {
        sections
            .iter()
            .find(|(t, _)| t == tag)
            .map(|(_, b)| Cursor::new(b.as_slice()))
            .ok_or_else(|| {
                Error::Checkpoint(format!("missing section {}", String::from_utf8_lossy(tag)))
            })
    };
    let conf_text = std::str::from_utf8(find(b"CONF")?.into_inner())
        .map_err(|_| Error::Checkpoint("configuration is not utf-8".into()))?
        .to_string();
    let config = TrainConfig::from_config(&Config::parse(&conf_text)?)
        .map_err(|e| Error::Checkpoint(format!("stored configuration: {e}")))?;
    let iteration = get_u64(&mut find(b"ITER")?)?;
    let mut m = find(b"MODL")?;
    let schedule = match get_u8(&mut m)? {
        0 => DiffusionSchedule::Constant(read_f64(&mut m)?),
        1 => DiffusionSchedule::Nodes {
            times: get_f64s(&mut m, MAX_VALUES)?,
            values: get_f64s(&mut m, MAX_VALUES)?,
        },
        k => return Err(Error::Checkpoint(format!("unknown schedule kind {k}"))),
    };
    let horizon = read_f64(&mut m)?;
    let drift = read_field(&mut find(b"DRFT")?)?;
    let score = read_field(&mut find(b"SCOR")?)?;
    let model = Model::new(drift, score, schedule, horizon)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let ema = get_f64s(&mut find(b"EMA_")?, MAX_VALUES)?;
    let mut a = find(b"ADAM")?;
    let t = get_u64(&mut a)?;
    let adam = AdamState {
        t,
        m: get_f64s(&mut a, MAX_VALUES)?,
        v: get_f64s(&mut a, MAX_VALUES)?,
    };
    let np = model.num_params();
    if ema.len() != np || adam.m.len() != np || adam.v.len() != np {
        return Err(Error::Checkpoint(
            "optimizer state does not match model size".into(),
        ));
    }
    Ok(TrainState {
        config,
        iteration,
        model,
        ema,
        adam,
    })
}

/// Writes atomically through a sibling temporary file.
pub fn write_train_state(path: &Path, st: &TrainState) -> Result<()> {
    let mut buf = Vec::new();
    encode_train_state(&mut buf, st)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &buf).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_train_state(path: &Path) -> Result<TrainState> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_train_state(&mut bytes.as_slice())
}
