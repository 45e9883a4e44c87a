//! Binary checkpoint format.
//!
//! `b"MLTM"`, `u16` version, then fields in declaration order of
//! [`Checkpoint`], every integer as `u64` and every real as `f64`, all
//! little-endian, followed by a CRC32 of everything before it. The config
//! snapshot is stored as its `key=value` text, length-prefixed.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{Activation, AdamState, Checkpoint, EncoderPair, Layer, Mlp, TrainConfig};
use crate::metric::InteractionMatrix;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MLTM";
pub const FORMAT_VERSION: u16 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }

    fn len(&mut self, v: usize) {
        self.u64(v as u64);
    }

    fn f64s<'a>(&mut self, vs: impl IntoIterator<Item = &'a f64>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn mlp(&mut self, mlp: &Mlp) {
        self.len(mlp.layers().len());
        for l in mlp.layers() {
            self.len(l.output_dim());
            self.len(l.input_dim());
            self.u64(l.activation.tag() as u64);
            self.f64s(l.weight.iter());
            self.f64s(l.bias.iter());
        }
    }

    fn adam(&mut self, s: &AdamState) {
        self.u64(s.step);
        self.len(s.len());
        self.f64s(&s.m);
        self.f64s(&s.v);
    }
}

pub(crate) fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.mlp(&ckpt.encoders.theta);
    w.mlp(&ckpt.encoders.phi);
    let m = ckpt.interaction.view();
    w.len(m.nrows());
    w.f64s(m.iter());
    w.adam(&ckpt.encoder_moments);
    w.adam(&ckpt.interaction_moments);
    w.u64(ckpt.epoch);
    let config = ckpt.config.render();
    w.len(config.len());
    w.0.extend_from_slice(config.as_bytes());
    let crc = crc32fast::hash(&w.0);
    w.0.extend_from_slice(&crc.to_le_bytes());
    w.0
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let end = end.ok_or(Error::CorruptChecksum)?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::CorruptChecksum)
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::CorruptChecksum)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }

    fn mlp(&mut self) -> Result<Mlp> {
        let n = self.len()?;
        let mut layers = Vec::with_capacity(n.min(64));
        for _ in 0..n {
            let out = self.len()?;
            let inp = self.len()?;
            let tag = self.u64()?;
            let activation = u8::try_from(tag)
                .ok()
                .and_then(Activation::from_tag)
                .ok_or(Error::CorruptChecksum)?;
            let size = out.checked_mul(inp).ok_or(Error::CorruptChecksum)?;
            let weight = Array2::from_shape_vec((out, inp), self.f64s(size)?).expect("sized");
            let bias = Array1::from(self.f64s(out)?);
            layers.push(Layer { weight, bias, activation });
        }
        Mlp::new(layers)
    }

    fn adam(&mut self) -> Result<AdamState> {
        let step = self.u64()?;
        let n = self.len()?;
        Ok(AdamState { step, m: self.f64s(n)?, v: self.f64s(n)? })
    }
}

pub(crate) fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() >= 4 && &bytes[..4] != MAGIC {
        return Err(Error::Format {
            path: Default::default(),
            reason: "missing MLTM magic".into(),
        });
    }
    if bytes.len() < 10 {
        return Err(Error::CorruptChecksum);
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: FORMAT_VERSION });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(tail.try_into().expect("4 bytes")) {
        return Err(Error::CorruptChecksum);
    }
    let mut r = Reader { bytes: body, pos: 6 };
    let theta = r.mlp()?;
    let phi = r.mlp()?;
    let d = r.len()?;
    let m = Array2::from_shape_vec((d, d), r.f64s(d.checked_mul(d).ok_or(Error::CorruptChecksum)?)?)
        .expect("sized");
    let encoder_moments = r.adam()?;
    let interaction_moments = r.adam()?;
    let epoch = r.u64()?;
    let n = r.len()?;
    let text = std::str::from_utf8(r.take(n)?).map_err(|_| Error::CorruptChecksum)?;
    let config = TrainConfig::parse_text(text)?;
    if r.pos != body.len() {
        return Err(Error::CorruptChecksum);
    }
    Ok(Checkpoint {
        encoders: EncoderPair::new(theta, phi)?,
        interaction: InteractionMatrix::from_trusted(m),
        encoder_moments,
        interaction_moments,
        epoch,
        config,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format { path: path.to_path_buf(), reason },
        other => other,
    })
}
