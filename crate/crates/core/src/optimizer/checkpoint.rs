use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::{EpochRecord, TrainState};
use crate::error::{Error, Result};
use crate::imaging::{Image, Patch};
use crate::losses::LossBreakdown;

const MAGIC: &[u8; 4] = b"MVP1";
const EXTENSION: &[u8; 4] = b"EXT1";

/// Serialized training state.
///
/// Layout, all little-endian: `MVP1`, `u32` height, width, channels, the patch as
/// `f32`, epoch `u64`, last total loss `f64`, Adam first and second moments as `f32`.
/// An `EXT1` block follows with the scheduler counters, the RNG position, the
/// config digest, the best patch and the loss history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub state: TrainState,
    pub config_digest: [u8; 32],
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::invalid(format!(
                "checkpoint truncated at byte {} (needed {n} more)",
                self.pos
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn u128(&mut self) -> Result<u128> {
        Ok(u128::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::invalid("checkpoint size overflow"))?)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect())
    }
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

impl Checkpoint {
    pub fn from_state(state: &TrainState, config_digest: [u8; 32]) -> Self {
        Self {
            state: state.clone(),
            config_digest,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let s = &self.state;
        let side = s.patch.side();
        let mut out = Vec::with_capacity(64 + 16 * s.adam_m.len());
        out.extend_from_slice(MAGIC);
        for d in [side, side, Image::CHANNELS] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        put_f32s(&mut out, s.patch.as_slice());
        out.extend_from_slice(&s.epoch.to_le_bytes());
        out.extend_from_slice(&s.last_total.to_le_bytes());
        put_f32s(&mut out, &s.adam_m);
        put_f32s(&mut out, &s.adam_v);

        out.extend_from_slice(EXTENSION);
        out.extend_from_slice(&s.lr_current.to_le_bytes());
        out.extend_from_slice(&s.best_total.to_le_bytes());
        out.extend_from_slice(&s.epochs_since_improvement.to_le_bytes());
        out.extend_from_slice(&s.decays.to_le_bytes());
        out.extend_from_slice(&s.adam_t.to_le_bytes());
        out.extend_from_slice(&s.rng.get_seed());
        out.extend_from_slice(&s.rng.get_stream().to_le_bytes());
        out.extend_from_slice(&s.rng.get_word_pos().to_le_bytes());
        out.extend_from_slice(&self.config_digest);
        put_f32s(&mut out, s.best_patch.as_slice());
        out.extend_from_slice(&(s.history.len() as u64).to_le_bytes());
        for r in &s.history {
            out.extend_from_slice(&r.epoch.to_le_bytes());
            for v in [r.lr, r.loss.obj, r.loss.css, r.loss.tv, r.loss.nps, r.loss.total] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::invalid("not a checkpoint (bad magic)"));
        }
        let (h, w, c) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if h != w || c != Image::CHANNELS || h == 0 {
            return Err(Error::invalid(format!("unsupported checkpoint dims {h}x{w}x{c}")));
        }
        let n = h * w * c;
        let patch = Patch::new(h, r.f32s(n)?)?;
        let epoch = r.u64()?;
        let last_total = r.f64()?;
        let adam_m = r.f32s(n)?;
        let adam_v = r.f32s(n)?;
        if r.take(4)? != EXTENSION {
            return Err(Error::invalid("checkpoint lacks the extension block"));
        }
        let lr_current = r.f64()?;
        let best_total = r.f64()?;
        let epochs_since_improvement = r.u64()?;
        let decays = r.u32()?;
        let adam_t = r.u64()?;
        let mut rng = ChaCha8Rng::from_seed(r.array()?);
        rng.set_stream(r.u64()?);
        rng.set_word_pos(r.u128()?);
        let config_digest = r.array()?;
        let best_patch = Patch::new(h, r.f32s(n)?)?;
        let records = r.u64()? as usize;
        let mut history = Vec::with_capacity(records.min(1 << 20));
        for _ in 0..records {
            let epoch = r.u64()?;
            let lr = r.f64()?;
            let loss = LossBreakdown {
                obj: r.f64()?,
                css: r.f64()?,
                tv: r.f64()?,
                nps: r.f64()?,
                total: r.f64()?,
            };
            history.push(EpochRecord { epoch, lr, loss });
        }
        if r.pos != bytes.len() {
            return Err(Error::invalid(format!(
                "{} trailing bytes after checkpoint",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            state: TrainState {
                patch,
                epoch,
                lr_current,
                best_total,
                epochs_since_improvement,
                decays,
                last_total,
                adam_t,
                adam_m,
                adam_v,
                rng,
                best_patch,
                history,
            },
            config_digest,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
