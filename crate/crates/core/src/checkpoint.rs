//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "TCVA" | version u32 | header length u64 | JSON header
//! array count u32 | arrays... | SHA-256 of everything before it (32 bytes)
//! array: name length u32 | name | precision tag u8 | rank u32 | dims u64... | values
//! ```
//!
//! The scaler is stored as three `f64` arrays named `scaler.min`,
//! `scaler.max` and `scaler.offset`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tcvae_numerics::{Precision, Real, Tensor};

use crate::dataio::{Scaler, Stamp, WindowBatch};
use crate::error::{io_err, CoreError, Result};
use crate::eval::Forecaster;
use crate::latent::Draw;
use crate::model::{ModelConfig, Tcvae};
use crate::train::{EpochRecord, FitReport, TrainConfig};

pub const MAGIC: &[u8; 4] = b"TCVA";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const SCALER_ARRAYS: [&str; 3] = ["scaler.min", "scaler.max", "scaler.offset"];

/// A model in either precision.
#[derive(Clone, Debug)]
pub enum AnyModel {
    F32(Tcvae<f32>),
    F64(Tcvae<f64>),
}

impl AnyModel {
    pub fn new(config: ModelConfig, precision: Precision) -> Result<Self> {
        Ok(match precision {
            Precision::F32 => AnyModel::F32(Tcvae::new(config)?),
            Precision::F64 => AnyModel::F64(Tcvae::new(config)?),
        })
    }

    pub fn precision(&self) -> Precision {
        match self {
            AnyModel::F32(_) => Precision::F32,
            AnyModel::F64(_) => Precision::F64,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::F32(m) => m.config(),
            AnyModel::F64(m) => m.config(),
        }
    }

    pub fn scaler(&self) -> Option<&Scaler> {
        match self {
            AnyModel::F32(m) => m.scaler.as_ref(),
            AnyModel::F64(m) => m.scaler.as_ref(),
        }
    }

    pub fn set_scaler(&mut self, scaler: Scaler) {
        match self {
            AnyModel::F32(m) => m.scaler = Some(scaler),
            AnyModel::F64(m) => m.scaler = Some(scaler),
        }
    }

    pub fn fit(
        &mut self,
        train: &WindowBatch,
        val: Option<&WindowBatch>,
        cfg: &TrainConfig,
        on_epoch: impl FnMut(&EpochRecord),
    ) -> Result<FitReport> {
        match self {
            AnyModel::F32(m) => m.fit(train, val, cfg, on_epoch),
            AnyModel::F64(m) => m.fit(train, val, cfg, on_epoch),
        }
    }

    pub fn predict(&self, windows: &WindowBatch, draw: Draw) -> Result<Tensor<f64>> {
        match self {
            AnyModel::F32(m) => m.predict(windows, draw),
            AnyModel::F64(m) => m.predict(windows, draw),
        }
    }

    /// Raw-unit forecast `[h, d_y]` for one raw window; see [`Tcvae::forecast`].
    pub fn forecast(&self, window: &Tensor<f64>, input_stamps: &[Stamp], target_stamps: &[Stamp], draw: Draw) -> Result<Tensor<f64>> {
        match self {
            AnyModel::F32(m) => m.forecast(window, input_stamps, target_stamps, draw),
            AnyModel::F64(m) => m.forecast(window, input_stamps, target_stamps, draw),
        }
    }

    /// The same model with its parameters cast to `precision`.
    pub fn with_precision(self, precision: Precision) -> Result<Self> {
        fn cast<T: Real, U: Real>(m: &Tcvae<T>) -> Result<Tcvae<U>> {
            let mut out = Tcvae::<U>::new(m.config().clone())?;
            for (id, p) in m.params.iter() {
                out.params.set_value(id, p.value.cast())?;
            }
            out.scaler = m.scaler.clone();
            Ok(out)
        }
        Ok(match (self, precision) {
            (m @ AnyModel::F32(_), Precision::F32) | (m @ AnyModel::F64(_), Precision::F64) => m,
            (AnyModel::F32(m), Precision::F64) => AnyModel::F64(cast(&m)?),
            (AnyModel::F64(m), Precision::F32) => AnyModel::F32(cast(&m)?),
        })
    }

    /// Parameter values widened to `f64`, by name, for comparisons.
    pub fn parameter_values(&self) -> Vec<(String, Vec<f64>)> {
        fn collect<T: Real>(m: &Tcvae<T>) -> Vec<(String, Vec<f64>)> {
            m.params.iter().map(|(_, p)| (p.name.clone(), p.value.to_f64_vec())).collect()
        }
        match self {
            AnyModel::F32(m) => collect(m),
            AnyModel::F64(m) => collect(m),
        }
    }
}

impl Forecaster for AnyModel {
    fn forecast_windows(&self, windows: &WindowBatch, seed: u64) -> Result<Tensor<f64>> {
        self.predict(windows, Draw::Sample(seed))
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    precision: String,
    model: ModelConfig,
    train: Option<TrainConfig>,
    run: Option<serde_json::Value>,
}

/// Everything persisted in one checkpoint file.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: AnyModel,
    pub train: Option<TrainConfig>,
    /// Free-form settings of the run that produced the model.
    pub run: Option<serde_json::Value>,
}

fn put_array<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(precision_tag(T::PRECISION));
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(out);
    }
}

fn precision_tag(p: Precision) -> u8 {
    match p {
        Precision::F32 => 0,
        Precision::F64 => 1,
    }
}

fn tag_precision(tag: u8) -> Result<Precision> {
    match tag {
        0 => Ok(Precision::F32),
        1 => Ok(Precision::F64),
        other => Err(CoreError::Checkpoint(format!("unknown precision tag {other}"))),
    }
}

/// Serialises a checkpoint to bytes.
pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = Header {
        precision: ck.model.precision().as_str().to_string(),
        model: ck.model.config().clone(),
        train: ck.train.clone(),
        run: ck.run.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);

    fn arrays<T: Real>(m: &Tcvae<T>, out: &mut Vec<u8>) {
        let scaler = m.scaler.as_ref();
        let count = m.params.len() + if scaler.is_some() { SCALER_ARRAYS.len() } else { 0 };
        out.extend_from_slice(&(count as u32).to_le_bytes());
        for (_, p) in m.params.iter() {
            put_array(out, &p.name, &p.value);
        }
        if let Some(s) = scaler {
            for (name, v) in SCALER_ARRAYS.iter().zip([&s.min, &s.max, &s.offset]) {
                let t = Tensor::new(&[v.len()], v.clone()).expect("vector shape");
                put_array(out, name, &t);
            }
        }
    }
    match &ck.model {
        AnyModel::F32(m) => arrays(m, &mut out),
        AnyModel::F64(m) => arrays(m, &mut out),
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CoreError::Checkpoint("unexpected end of data".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CoreError::Checkpoint("length overflows".into()))
    }
}

struct RawArray<'a> {
    name: String,
    precision: Precision,
    shape: Vec<usize>,
    bytes: &'a [u8],
}

impl RawArray<'_> {
    fn tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.precision != T::PRECISION {
            return Err(CoreError::Checkpoint(format!(
                "array `{}` is {} but {} was expected",
                self.name,
                self.precision,
                T::PRECISION
            )));
        }
        let w = T::PRECISION.byte_width();
        let data = self.bytes.chunks_exact(w).map(T::read_le).collect();
        Ok(Tensor::new(&self.shape, data)?)
    }
}

fn read_array<'a>(r: &mut Reader<'a>) -> Result<RawArray<'a>> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?)
        .map_err(|_| CoreError::Checkpoint("array name is not utf-8".into()))?
        .to_string();
    let precision = tag_precision(r.u8()?)?;
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .and_then(|n| n.checked_mul(precision.byte_width()))
        .ok_or_else(|| CoreError::Checkpoint(format!("array `{name}` is too large")))?;
    let bytes = r.take(count)?;
    Ok(RawArray {
        name,
        precision,
        shape,
        bytes,
    })
}

/// Parses bytes produced by [`encode`].
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CoreError::Checkpoint("not a checkpoint (bad magic bytes)".into()));
    }
    let mut r = Reader { buf: bytes, pos: MAGIC.len() };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(CoreError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    if bytes.len() < r.pos + DIGEST_LEN {
        return Err(CoreError::Checkpoint("unexpected end of data".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(CoreError::Checksum);
    }
    let mut r = Reader { buf: body, pos: r.pos };
    let json_len = r.len()?;
    let header: Header =
        serde_json::from_slice(r.take(json_len)?).map_err(|e| CoreError::Checkpoint(format!("header: {e}")))?;
    let precision: Precision = header.precision.parse()?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        arrays.push(read_array(&mut r)?);
    }
    if r.pos != body.len() {
        return Err(CoreError::Checkpoint("trailing bytes after the array table".into()));
    }
    let model = match precision {
        Precision::F32 => AnyModel::F32(restore(header.model, &arrays)?),
        Precision::F64 => AnyModel::F64(restore(header.model, &arrays)?),
    };
    Ok(Checkpoint {
        model,
        train: header.train,
        run: header.run,
    })
}

fn restore<T: Real>(config: ModelConfig, arrays: &[RawArray<'_>]) -> Result<Tcvae<T>> {
    let mut model = Tcvae::<T>::new(config)?;
    let mut scaler = [None, None, None];
    let mut seen = vec![false; model.params.len()];
    for a in arrays {
        if let Some(slot) = SCALER_ARRAYS.iter().position(|&n| n == a.name) {
            scaler[slot] = Some(a.tensor::<f64>()?.into_data());
            continue;
        }
        let id = model
            .params
            .id(&a.name)
            .map_err(|_| CoreError::Checkpoint(format!("unknown parameter `{}`", a.name)))?;
        model.params.set_value(id, a.tensor::<T>()?)?;
        seen[id.index()] = true;
    }
    if let Some(i) = seen.iter().position(|s| !s) {
        let missing = model.params.iter().nth(i).map(|(_, p)| p.name.clone()).unwrap_or_default();
        return Err(CoreError::Checkpoint(format!("parameter `{missing}` is missing")));
    }
    model.scaler = match scaler {
        [Some(min), Some(max), Some(offset)] => Some(Scaler { min, max, offset }),
        [None, None, None] => None,
        _ => return Err(CoreError::Checkpoint("incomplete scaler".into())),
    };
    Ok(model)
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(ck)?).map_err(io_err(path))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    decode(&bytes)
}
