//! On-disk formats. All integers and reals are little-endian.
//!
//! Sample and observation files share one header:
//!
//! | offset | size | field                                   |
//! |--------|------|-----------------------------------------|
//! | 0      | 4    | magic `DFEM`                            |
//! | 4      | 4    | u32 format version                      |
//! | 8      | 4    | u32 `n` (rows)                          |
//! | 12     | 4    | u32 `d` (row width; `dim(y)` for obs)   |
//! | 16     | 32   | config fingerprint (SHA-256)            |
//! | 48     | 1    | content: 0 samples, 1 observations      |
//!
//! Samples follow as `n·d` f32 values, row-major. Each observation is `d`
//! f32 values of `y` followed by a descriptor block: a one-byte kind tag and
//! its payload (dense `u32 rows, u32 cols, rows·cols f64`; mask `u32 len`
//! then the packed bits; blur `f64 sigma, u32 height, u32 width`).
//!
//! Checkpoints start with magic `DFCK`, the u32 version, the fingerprint and
//! a u32 iteration index. Then comes a length-prefixed JSON block with the
//! architecture, conditioning mode, channel, schedule and loss weighting, the
//! f64 sampler start mean, the parameter tensors as f32, an optional EMA
//! block and an optional block of f64 Adam moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::Fingerprint;
use super::CliError;
use crate::channels::{CorruptionChannel, MatrixDescriptor, Observation};
use crate::diffusion::{Architecture, ConditioningMode, DenoiserModel, LossWeighting, NoiseSchedule};
use crate::numerics::{ParamStore, Tensor};

pub const DATA_MAGIC: &[u8; 4] = b"DFEM";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";
pub const FORMAT_VERSION: u32 = 1;

const CONTENT_SAMPLES: u8 = 0;
const CONTENT_OBSERVATIONS: u8 = 1;
const TAG_DENSE: u8 = 0;
const TAG_MASK: u8 = 1;
const TAG_BLUR: u8 = 2;

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    what: &'static str,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8], what: &'static str) -> Self {
        Self { buf, pos: 0, what }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| CliError::Format(format!("{}: truncated at byte {}", self.what, self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CliError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| self.overflow())?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect())
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, CliError> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.overflow())?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn overflow(&self) -> CliError {
        CliError::Format(format!("{}: length overflow", self.what))
    }

    fn finish(self) -> Result<(), CliError> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(CliError::Format(format!(
                "{}: {} trailing bytes",
                self.what,
                self.buf.len() - self.pos
            )))
        }
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<(), CliError> {
    let v = u32::try_from(v).map_err(|_| CliError::Format(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_f32s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&(*x as f32).to_le_bytes());
    }
}

fn put_f64s(out: &mut Vec<u8>, v: &[f64]) {
    for x in v {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Checks the fingerprint unless the caller allows a mismatch.
pub fn check_fingerprint(
    what: &str,
    found: &Fingerprint,
    expected: &Fingerprint,
    allow_mismatch: bool,
) -> Result<(), CliError> {
    if found == expected {
        return Ok(());
    }
    if allow_mismatch {
        log::warn!("{what}: config fingerprint mismatch ignored");
        return Ok(());
    }
    Err(CliError::Fingerprint(what.to_string()))
}

fn header(n: usize, d: usize, fp: &Fingerprint, content: u8) -> Result<Vec<u8>, CliError> {
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_u32(&mut out, n)?;
    put_u32(&mut out, d)?;
    out.extend_from_slice(fp);
    out.push(content);
    Ok(out)
}

fn read_header(r: &mut Reader<'_>, content: u8) -> Result<(usize, usize, Fingerprint), CliError> {
    if r.take(4)? != DATA_MAGIC {
        return Err(CliError::Format(format!("{}: bad magic", r.what)));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CliError::Format(format!("{}: unsupported version {version}", r.what)));
    }
    let n = r.u32()? as usize;
    let d = r.u32()? as usize;
    let fp: Fingerprint = r.take(32)?.try_into().expect("32 bytes");
    let found = r.u8()?;
    if found != content {
        return Err(CliError::Format(format!(
            "{}: content tag {found}, expected {content}",
            r.what
        )));
    }
    Ok((n, d, fp))
}

pub fn encode_samples(x: &Tensor, fp: &Fingerprint) -> Result<Vec<u8>, CliError> {
    let (n, d) = x.dims2("samples")?;
    let mut out = header(n, d, fp, CONTENT_SAMPLES)?;
    put_f32s(&mut out, x.data());
    Ok(out)
}

pub fn decode_samples(bytes: &[u8]) -> Result<(Tensor, Fingerprint), CliError> {
    let mut r = Reader::new(bytes, "sample file");
    let (n, d, fp) = read_header(&mut r, CONTENT_SAMPLES)?;
    let data = r.f32s(n * d)?;
    r.finish()?;
    Ok((Tensor::new(vec![n, d], data)?, fp))
}

pub fn encode_observations(obs: &[Observation], fp: &Fingerprint) -> Result<Vec<u8>, CliError> {
    let d = obs.first().map_or(0, |o| o.y.len());
    let mut out = header(obs.len(), d, fp, CONTENT_OBSERVATIONS)?;
    for o in obs {
        if o.y.len() != d {
            return Err(CliError::Format("observations have different widths".into()));
        }
        put_f32s(&mut out, &o.y);
        match &o.a {
            MatrixDescriptor::Dense(t) => {
                out.push(TAG_DENSE);
                let (r, c) = t.dims2("descriptor")?;
                put_u32(&mut out, r)?;
                put_u32(&mut out, c)?;
                put_f64s(&mut out, t.data());
            }
            MatrixDescriptor::Mask(bits) => {
                out.push(TAG_MASK);
                put_u32(&mut out, bits.len())?;
                out.extend_from_slice(&MatrixDescriptor::mask_to_bytes(bits));
            }
            MatrixDescriptor::Blur {
                sigma,
                height,
                width,
            } => {
                out.push(TAG_BLUR);
                put_f64s(&mut out, &[*sigma]);
                put_u32(&mut out, *height)?;
                put_u32(&mut out, *width)?;
            }
        }
    }
    Ok(out)
}

pub fn decode_observations(bytes: &[u8]) -> Result<(Vec<Observation>, Fingerprint), CliError> {
    let mut r = Reader::new(bytes, "observation file");
    let (n, d, fp) = read_header(&mut r, CONTENT_OBSERVATIONS)?;
    let mut obs = Vec::with_capacity(n.min(1 << 20));
    for _ in 0..n {
        let y = r.f32s(d)?;
        let a = match r.u8()? {
            TAG_DENSE => {
                let rows = r.u32()? as usize;
                let cols = r.u32()? as usize;
                MatrixDescriptor::Dense(Tensor::new(vec![rows, cols], r.f64s(rows * cols)?)?)
            }
            TAG_MASK => {
                let len = r.u32()? as usize;
                let raw = r.take(len.div_ceil(8))?;
                MatrixDescriptor::Mask(MatrixDescriptor::mask_from_bytes(raw, len)?)
            }
            TAG_BLUR => {
                let sigma = r.f64s(1)?[0];
                let height = r.u32()? as usize;
                let width = r.u32()? as usize;
                MatrixDescriptor::Blur {
                    sigma,
                    height,
                    width,
                }
            }
            t => return Err(CliError::Format(format!("observation file: unknown descriptor tag {t}"))),
        };
        obs.push(Observation { y, a });
    }
    r.finish()?;
    Ok((obs, fp))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    arch: Architecture,
    mode: ConditioningMode,
    channel: Option<CorruptionChannel>,
    schedule: NoiseSchedule,
    weighting: LossWeighting,
}

/// A model snapshot after EM iteration `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub k: usize,
    pub fingerprint: Fingerprint,
    pub model: DenoiserModel,
    pub schedule: NoiseSchedule,
    pub weighting: LossWeighting,
    /// Where the reverse process starts for the next E-step.
    pub init_mean: Vec<f64>,
}

fn put_params(out: &mut Vec<u8>, ps: &ParamStore) -> Result<(), CliError> {
    put_u32(out, ps.len())?;
    for (name, t) in ps.iter() {
        put_u32(out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(out, t.shape().len())?;
        for &e in t.shape() {
            put_u32(out, e)?;
        }
        put_f32s(out, t.data());
    }
    Ok(())
}

fn read_params(r: &mut Reader<'_>) -> Result<ParamStore, CliError> {
    let count = r.u32()? as usize;
    let mut ps = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CliError::Format("checkpoint: parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u32().map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &b| a.checked_mul(b)).ok_or_else(|| r.overflow())?;
        let data = r.f32s(numel)?;
        ps.insert(name, Tensor::new(shape, data)?);
    }
    Ok(ps)
}

impl Checkpoint {
    /// Serializes the checkpoint. With `optimizer_state` the Adam moments
    /// and step counter are stored at full precision.
    pub fn encode(&self, optimizer_state: bool) -> Result<Vec<u8>, CliError> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.fingerprint);
        put_u32(&mut out, self.k)?;
        let meta = serde_json::to_vec(&CheckpointMeta {
            arch: self.model.arch.clone(),
            mode: self.model.mode,
            channel: self.model.channel.clone(),
            schedule: self.schedule,
            weighting: self.weighting,
        })
        .map_err(|e| CliError::Format(e.to_string()))?;
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, self.init_mean.len())?;
        put_f64s(&mut out, &self.init_mean);
        put_params(&mut out, &self.model.params)?;
        match &self.model.ema {
            Some(ema) => {
                out.push(1);
                put_params(&mut out, ema)?;
            }
            None => out.push(0),
        }
        if optimizer_state {
            out.push(1);
            out.extend_from_slice(&self.model.params.step().to_le_bytes());
            for (_, p) in self.model.params.iter_params() {
                put_f64s(&mut out, p.m.data());
                put_f64s(&mut out, p.v.data());
            }
        } else {
            out.push(0);
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader::new(bytes, "checkpoint");
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(CliError::Format("checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(CliError::Format(format!("checkpoint: unsupported version {version}")));
        }
        let fingerprint: Fingerprint = r.take(32)?.try_into().expect("32 bytes");
        let k = r.u32()? as usize;
        let len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(len)?)
            .map_err(|e| CliError::Format(format!("checkpoint metadata: {e}")))?;
        let mlen = r.u32()? as usize;
        let init_mean = r.f64s(mlen)?;
        let mut params = read_params(&mut r)?;
        let ema = match r.u8()? {
            0 => None,
            1 => Some(read_params(&mut r)?),
            t => return Err(CliError::Format(format!("checkpoint: bad EMA flag {t}"))),
        };
        match r.u8()? {
            0 => {}
            1 => {
                let step = r.u64()?;
                let shapes: Vec<(String, Vec<usize>)> = params
                    .iter()
                    .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
                    .collect();
                for (name, shape) in shapes {
                    let numel = shape.iter().product();
                    let m = Tensor::new(shape.clone(), r.f64s(numel)?)?;
                    let v = Tensor::new(shape, r.f64s(numel)?)?;
                    params.set_moments(&name, m, v)?;
                }
                params.set_step(step);
            }
            t => return Err(CliError::Format(format!("checkpoint: bad optimizer flag {t}"))),
        }
        r.finish()?;
        let mut model = DenoiserModel::init(
            meta.arch,
            meta.mode,
            meta.channel,
            &mut crate::rng::stream(0, "checkpoint/shape", &[]),
        )?;
        if model.params.len() != params.len()
            || model.params.iter().zip(params.iter()).any(|(a, b)| a.0 != b.0 || a.1.shape() != b.1.shape())
        {
            return Err(CliError::Format(
                "checkpoint: parameters do not match the stored architecture".into(),
            ));
        }
        model.params = params;
        model.ema = ema;
        Ok(Self {
            k,
            fingerprint,
            model,
            schedule: meta.schedule,
            weighting: meta.weighting,
            init_mean,
        })
    }

    pub fn save(&self, path: &Path, optimizer_state: bool) -> Result<(), CliError> {
        write_atomic(path, &self.encode(optimizer_state)?)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        Self::decode(&fs::read(path).map_err(|e| CliError::io(path, e))?)
    }
}

pub fn save_samples(path: &Path, x: &Tensor, fp: &Fingerprint) -> Result<(), CliError> {
    write_atomic(path, &encode_samples(x, fp)?)
}

pub fn load_samples(path: &Path) -> Result<(Tensor, Fingerprint), CliError> {
    decode_samples(&fs::read(path).map_err(|e| CliError::io(path, e))?)
}

pub fn save_observations(path: &Path, obs: &[Observation], fp: &Fingerprint) -> Result<(), CliError> {
    write_atomic(path, &encode_observations(obs, fp)?)
}

pub fn load_observations(path: &Path) -> Result<(Vec<Observation>, Fingerprint), CliError> {
    decode_observations(&fs::read(path).map_err(|e| CliError::io(path, e))?)
}
