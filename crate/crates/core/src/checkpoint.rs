//! Binary checkpoint: weights, batch-norm statistics and momentum buffers.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    "FGRNCKPT1"
//! version  u32
//! digest   32 bytes, SHA-256 of the config JSON
//! epoch    u64, completed epochs
//! 3 × section (params, stats, momentum):
//!     count u64
//!     count × { name_len u32, name, rank u32, rank × u64 extents, f64 values }
//! ```

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainState;
use std::io::Write;
use std::path::Path;

pub const MAGIC: &[u8; 9] = b"FGRNCKPT1";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub digest: [u8; 32],
    pub epoch: u64,
    pub params: Vec<NamedArray>,
    pub stats: Vec<NamedArray>,
    pub momentum: Vec<NamedArray>,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

impl Checkpoint {
    pub fn capture(state: &TrainState, cfg: &TrainConfig) -> Self {
        let params: Vec<NamedArray> = state
            .model
            .named_params()
            .into_iter()
            .map(|(name, t)| NamedArray {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect();
        let stats = state
            .model
            .named_stats()
            .into_iter()
            .map(|(name, v)| NamedArray {
                name,
                shape: vec![v.len()],
                values: v.to_vec(),
            })
            .collect();
        let momentum = params
            .iter()
            .zip(&state.momentum)
            .map(|(p, m)| NamedArray {
                name: p.name.clone(),
                shape: m.shape().to_vec(),
                values: m.data().to_vec(),
            })
            .collect();
        Self {
            version: VERSION,
            digest: cfg.digest(),
            epoch: state.epoch,
            params,
            stats,
            momentum,
        }
    }

    /// Rebuilds the training state for `cfg`. A digest that differs from
    /// `cfg`'s is an error unless `allow_mismatch`; names and shapes must
    /// match the model `cfg` describes either way.
    pub fn restore(&self, cfg: &TrainConfig, allow_mismatch: bool) -> Result<TrainState> {
        if self.digest != cfg.digest() && !allow_mismatch {
            return Err(Error::DigestMismatch {
                expected: hex(&cfg.digest()),
                found: hex(&self.digest),
            });
        }
        let mut state = TrainState::new(cfg)?;
        let names: Vec<String> = state.model.named_params().into_iter().map(|(n, _)| n).collect();
        let stat_names: Vec<String> = state.model.named_stats().into_iter().map(|(n, _)| n).collect();
        check_names("params", &self.params, &names)?;
        check_names("stats", &self.stats, &stat_names)?;
        check_names("momentum", &self.momentum, &names)?;
        for (p, a) in state.model.params_mut().into_iter().zip(&self.params) {
            fill(p, a)?;
        }
        for (m, a) in state.momentum.iter_mut().zip(&self.momentum) {
            fill(m, a)?;
        }
        for (s, a) in state.model.stats_mut().into_iter().zip(&self.stats) {
            if a.values.len() != s.len() {
                return Err(Error::Checkpoint {
                    msg: format!("{} has {} values, model expects {}", a.name, a.values.len(), s.len()),
                    offset: 0,
                });
            }
            s.copy_from_slice(&a.values);
        }
        state.epoch = self.epoch;
        Ok(state)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        for section in [&self.params, &self.stats, &self.momentum] {
            out.extend_from_slice(&(section.len() as u64).to_le_bytes());
            for a in section {
                out.extend_from_slice(&(a.name.len() as u32).to_le_bytes());
                out.extend_from_slice(a.name.as_bytes());
                out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
                for &d in &a.shape {
                    out.extend_from_slice(&(d as u64).to_le_bytes());
                }
                for v in &a.values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::Checkpoint {
                msg: "bad magic".into(),
                offset: 0,
            });
        }
        let at = r.pos;
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::Checkpoint {
                msg: format!("unsupported version {version}"),
                offset: at,
            });
        }
        let digest: [u8; 32] = r.take(32, "digest")?.try_into().expect("32 bytes");
        let epoch = r.u64("epoch")?;
        let params = r.section()?;
        let stats = r.section()?;
        let momentum = r.section()?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint {
                msg: format!("{} trailing bytes", bytes.len() - r.pos),
                offset: r.pos,
            });
        }
        Ok(Self {
            version,
            digest,
            epoch,
            params,
            stats,
            momentum,
        })
    }

    /// Writes through a temporary sibling and renames, so a failed save never
    /// leaves a partial file at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let result = (|| {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes())?;
            f.sync_all()?;
            std::fs::rename(&tmp, path)
        })();
        if result.is_err() {
            let _ = std::fs::remove_file(&tmp);
        }
        Ok(result?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

fn check_names(section: &str, found: &[NamedArray], expected: &[String]) -> Result<()> {
    if found.len() != expected.len() {
        return Err(Error::Checkpoint {
            msg: format!("{section}: {} arrays, model expects {}", found.len(), expected.len()),
            offset: 0,
        });
    }
    for (a, e) in found.iter().zip(expected) {
        if &a.name != e {
            return Err(Error::Checkpoint {
                msg: format!("{section}: found `{}` where model expects `{e}`", a.name),
                offset: 0,
            });
        }
    }
    Ok(())
}

fn fill(t: &mut Tensor, a: &NamedArray) -> Result<()> {
    if t.shape() != a.shape.as_slice() {
        return Err(Error::Checkpoint {
            msg: format!("{} has shape {:?}, model expects {:?}", a.name, a.shape, t.shape()),
            offset: 0,
        });
    }
    *t = Tensor::from_parts(a.shape.clone(), a.values.clone());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Checkpoint {
                msg: format!("truncated while reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
                offset: self.pos,
            }),
        }
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    /// Length field guarded against sizes the remaining input cannot hold.
    fn len(&mut self, what: &str, unit: usize) -> Result<usize> {
        let at = self.pos;
        let n = self.u64(what)?;
        let left = (self.bytes.len() - self.pos) as u64;
        if n.saturating_mul(unit as u64) > left {
            return Err(Error::Checkpoint {
                msg: format!("{what} {n} exceeds the remaining {left} bytes"),
                offset: at,
            });
        }
        Ok(n as usize)
    }

    fn section(&mut self) -> Result<Vec<NamedArray>> {
        let count = self.len("array count", 8)?;
        (0..count).map(|_| self.array()).collect()
    }

    fn array(&mut self) -> Result<NamedArray> {
        let at = self.pos;
        let name_len = self.u32("name length")? as usize;
        let name = std::str::from_utf8(self.take(name_len, "name")?)
            .map_err(|_| Error::Checkpoint {
                msg: "name is not UTF-8".into(),
                offset: at + 4,
            })?
            .to_string();
        let rank = self.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(self.len("extent", 0)?);
        }
        let at = self.pos;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or(Error::Checkpoint {
            msg: format!("{name}: extents {shape:?} overflow"),
            offset: at,
        })?;
        let raw = self.take(numel.checked_mul(8).unwrap_or(usize::MAX), &name)?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        Ok(NamedArray { name, shape, values })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        TrainConfig {
            widths: vec![4, 4],
            parts: 2,
            gaussian_hidden: 3,
            num_classes: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_byte_identical() {
        let cfg = small();
        let mut state = TrainState::new(&cfg).unwrap();
        state.epoch = 7;
        state.momentum[0] = Tensor::full(state.momentum[0].shape(), 0.25);
        let bytes = Checkpoint::capture(&state, &cfg).to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        let restored = back.restore(&cfg, false).unwrap();
        assert_eq!(restored.epoch, 7);
        assert_eq!(restored.model, state.model);
        assert_eq!(Checkpoint::capture(&restored, &cfg).to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let cfg = small();
        let bytes = Checkpoint::capture(&TrainState::new(&cfg).unwrap(), &cfg).to_bytes();
        assert_eq!(&bytes[..9], b"FGRNCKPT1");
        assert_eq!(u32::from_le_bytes(bytes[9..13].try_into().unwrap()), VERSION);
        assert_eq!(&bytes[13..45], &cfg.digest());
        assert_eq!(u64::from_le_bytes(bytes[45..53].try_into().unwrap()), 0);
    }

    #[test]
    fn bad_magic_and_truncation_report_offsets() {
        let cfg = small();
        let bytes = Checkpoint::capture(&TrainState::new(&cfg).unwrap(), &cfg).to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        match Checkpoint::from_bytes(&bad).unwrap_err() {
            Error::Checkpoint { offset, msg } => assert_eq!((offset, msg.as_str()), (0, "bad magic")),
            e => panic!("{e}"),
        }
        for cut in [5, 20, 60, bytes.len() / 2, bytes.len() - 1] {
            match Checkpoint::from_bytes(&bytes[..cut]).unwrap_err() {
                Error::Checkpoint { offset, msg } => {
                    assert!(offset <= cut, "{cut}: {offset}");
                    assert!(msg.contains("truncated") || msg.contains("exceeds"), "{msg}");
                }
                e => panic!("{e}"),
            }
        }
    }

    #[test]
    fn digest_mismatch_needs_override() {
        let cfg = small();
        let ck = Checkpoint::capture(&TrainState::new(&cfg).unwrap(), &cfg);
        let other = TrainConfig { lr: 0.5, ..cfg.clone() };
        assert!(matches!(ck.restore(&other, false), Err(Error::DigestMismatch { .. })));
        assert!(ck.restore(&other, true).is_ok());
    }

    #[test]
    fn shape_mismatch_is_rejected_even_with_override() {
        let cfg = small();
        let ck = Checkpoint::capture(&TrainState::new(&cfg).unwrap(), &cfg);
        let wider = TrainConfig { widths: vec![4, 6], ..cfg };
        assert!(matches!(ck.restore(&wider, true), Err(Error::Checkpoint { .. })));
    }

    #[test]
    fn save_leaves_no_temporary() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let ck = Checkpoint::capture(&TrainState::new(&cfg).unwrap(), &cfg);
        let path = dir.path().join("final.ckpt");
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        let names: Vec<_> = std::fs::read_dir(dir.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
        assert_eq!(names, vec![std::ffi::OsString::from("final.ckpt")]);
        assert!(ck.save(&dir.path().join("missing/x.ckpt")).is_err());
    }
}
