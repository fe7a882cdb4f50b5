//! Training state and the UGGC checkpoint file.
//!
//! ```text
//! "UGGC" | version u32
//! config block: u32 byte length, UTF-8 `key = value` lines
//! meta block:   u32 byte length, UTF-8 `key = value` lines
//! epoch u64 | step u64 | num_classes u64 | adam_t u64
//! history: u64 count, then 12 f64 per step
//!          (ce, tri, kl_cs R N T, routing R N T, balance R N T, total)
//! matrices: u32 count, then per matrix
//!          u32 name length, name, u32 rows, u32 cols, f64 values
//! ```
//!
//! Adam moments are stored as `adam.m/<name>` and `adam.v/<name>`. All
//! numbers are little-endian.

use std::fmt::Write as _;
use std::path::Path;

use super::losses::LossBreakdown;
use super::model::Model;
use super::train::{Adam, TrainSet};
use super::TrainConfig;
use crate::config::RunConfig;
use crate::dataio::Dataset;
use crate::error::{Error, Result};
use crate::lock::{write_atomic, LockGuard};
use crate::numerics::{Matrix, ParamStore};

pub const MAGIC: [u8; 4] = *b"UGGC";
pub const VERSION: u32 = 1;
const HISTORY_WIDTH: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Free-form provenance lines (config hash, run id, ...).
    pub meta: Vec<(String, String)>,
    pub num_classes: usize,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps; also keys every per-step random stream.
    pub step: u64,
    pub params: ParamStore,
    pub adam: Adam,
    pub history: Vec<LossBreakdown>,
}

impl Checkpoint {
    /// Fresh state: initialized parameters, zero moments, no history.
    pub fn initial(cfg: &TrainConfig, ds: &Dataset) -> Result<Self> {
        cfg.validate()?;
        if (ds.n, ds.d) != (cfg.n, cfg.d) {
            return Err(Error::Config(format!(
                "dataset has n = {}, D = {}; config has n = {}, D = {}",
                ds.n, ds.d, cfg.n, cfg.d
            )));
        }
        let num_classes = TrainSet::new(ds).num_classes();
        let model = Model::new(cfg, num_classes)?;
        let params = model.init_params(cfg.seed);
        let adam = Adam::new(&params);
        Ok(Self {
            config: cfg.clone(),
            meta: Vec::new(),
            num_classes,
            epoch: 0,
            step: 0,
            params,
            adam,
            history: Vec::new(),
        })
    }

    pub fn model(&self) -> Result<Model> {
        Model::new(&self.config, self.num_classes)
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: &str, value: impl Into<String>) {
        let value = value.into();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        let mut snapshot = RunConfig {
            train: self.config.clone(),
            ..RunConfig::default()
        };
        snapshot.data.d = self.config.d;
        snapshot.data.n = self.config.n;
        let text = snapshot.render_model();
        put_block(&mut b, &text);
        let mut meta = String::new();
        for (k, v) in &self.meta {
            let _ = writeln!(meta, "{k} = {v}");
        }
        put_block(&mut b, &meta);
        for v in [
            self.epoch as u64,
            self.step,
            self.num_classes as u64,
            self.adam.t,
            self.history.len() as u64,
        ] {
            b.extend_from_slice(&v.to_le_bytes());
        }
        for h in &self.history {
            for v in history_row(h) {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        let count = 3 * self.params.len() as u32;
        b.extend_from_slice(&count.to_le_bytes());
        for (prefix, mats) in [
            ("", self.params.iter().map(|(_, m)| m).collect::<Vec<_>>()),
            ("adam.m/", self.adam.m.iter().collect()),
            ("adam.v/", self.adam.v.iter().collect()),
        ] {
            for (i, m) in mats.into_iter().enumerate() {
                let name = format!("{prefix}{}", self.params.name(i));
                b.extend_from_slice(&(name.len() as u32).to_le_bytes());
                b.extend_from_slice(name.as_bytes());
                b.extend_from_slice(&(m.rows() as u32).to_le_bytes());
                b.extend_from_slice(&(m.cols() as u32).to_le_bytes());
                for &v in m.data() {
                    b.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        b
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, at: 0, path };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("4 bytes");
        if magic != MAGIC {
            return Err(Error::BadMagic {
                path: path.into(),
                expected: MAGIC,
                found: magic,
            });
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                path: path.into(),
                expected: VERSION,
                found: version,
            });
        }
        let config_text = r.block()?;
        let config = RunConfig::from_text(&config_text)
            .map_err(|e| r.malformed(format!("config block: {e}")))?
            .train;
        let meta_text = r.block()?;
        let meta = meta_text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                l.split_once(" = ")
                    .map(|(k, v)| (k.to_string(), v.to_string()))
                    .ok_or_else(|| r.malformed(format!("meta line `{l}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        let epoch = r.u64()? as usize;
        let step = r.u64()?;
        let num_classes = r.u64()? as usize;
        let adam_t = r.u64()?;
        let hist_len = r.u64()?;
        let hist_bytes = hist_len
            .checked_mul((HISTORY_WIDTH * 8) as u64)
            .ok_or_else(|| r.malformed("history length overflows".into()))?;
        r.need(hist_bytes)?;
        let mut history = Vec::with_capacity(hist_len as usize);
        for _ in 0..hist_len {
            let mut row = [0.0; HISTORY_WIDTH];
            for v in &mut row {
                *v = r.f64()?;
            }
            history.push(from_history_row(&row));
        }
        let count = r.u32()? as usize;
        if count % 3 != 0 {
            return Err(r.malformed(format!("{count} matrices is not params + two moments")));
        }
        let mut mats = Vec::with_capacity(count);
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| r.malformed("matrix name is not UTF-8".into()))?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = (rows as u64) * (cols as u64);
            r.need(n * 8)?;
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            mats.push((name, Matrix::from_vec(rows, cols, data)?));
        }
        if r.at != bytes.len() {
            return Err(r.malformed(format!("{} trailing bytes", bytes.len() - r.at)));
        }
        let np = count / 3;
        let mut params = ParamStore::new();
        for (name, m) in &mats[..np] {
            params.insert(name.clone(), m.clone());
        }
        let mut adam = Adam::new(&params);
        adam.t = adam_t;
        for (i, (name, m)) in mats[np..].iter().enumerate() {
            let (slot, base) = if i < np {
                ("adam.m/", i)
            } else {
                ("adam.v/", i - np)
            };
            let expected = format!("{slot}{}", params.name(base));
            if *name != expected || m.shape() != params.value(base).shape() {
                return Err(r.malformed(format!("expected moment `{expected}`, found `{name}`")));
            }
            if i < np {
                adam.m[base] = m.clone();
            } else {
                adam.v[base] = m.clone();
            }
        }
        let ck = Self {
            config,
            meta,
            num_classes,
            epoch,
            step,
            params,
            adam,
            history,
        };
        let expected = ck
            .model()
            .map_err(|e| r.malformed(e.to_string()))?
            .init_params(0);
        let layout_ok = expected.len() == ck.params.len()
            && expected
                .iter()
                .zip(ck.params.iter())
                .all(|((a, x), (b, y))| a == b && x.shape() == y.shape());
        if !layout_ok {
            return Err(r.malformed("parameter layout does not match the config".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.encode();
        let _lock = LockGuard::for_file(path)?;
        write_atomic(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    /// Loss history as CSV: `step,ce,tri,kl_cs,lr_loss,le_loss,total`.
    pub fn loss_csv(&self) -> String {
        let mut out = String::from("step,ce,tri,kl_cs,lr_loss,le_loss,total\n");
        for (i, h) in self.history.iter().enumerate() {
            let r = h.row();
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{}",
                r[0], r[1], r[2], r[3], r[4], r[5]
            );
        }
        out
    }
}

fn history_row(h: &LossBreakdown) -> [f64; HISTORY_WIDTH] {
    let mut r = [0.0; HISTORY_WIDTH];
    r[0] = h.ce;
    r[1] = h.tri;
    r[2..5].copy_from_slice(&h.kl_cs);
    r[5..8].copy_from_slice(&h.routing);
    r[8..11].copy_from_slice(&h.balance);
    r[11] = h.total;
    r
}

fn from_history_row(r: &[f64; HISTORY_WIDTH]) -> LossBreakdown {
    LossBreakdown {
        ce: r[0],
        tri: r[1],
        kl_cs: [r[2], r[3], r[4]],
        routing: [r[5], r[6], r[7]],
        balance: [r[8], r[9], r[10]],
        total: r[11],
    }
}

fn put_block(b: &mut Vec<u8>, text: &str) {
    b.extend_from_slice(&(text.len() as u32).to_le_bytes());
    b.extend_from_slice(text.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn need(&self, n: u64) -> Result<()> {
        let have = (self.bytes.len() - self.at) as u64;
        if n > have {
            return Err(Error::Truncated {
                path: self.path.into(),
                needed: self.at as u64 + n,
                actual: self.bytes.len() as u64,
            });
        }
        Ok(())
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        self.need(n as u64)?;
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn block(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let raw = self.take(len)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.malformed("block is not UTF-8".into()))
    }

    fn malformed(&self, reason: String) -> Error {
        Error::Malformed {
            path: self.path.into(),
            reason,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate, SyntheticSpec};
    use crate::exec::Exec;
    use crate::objective::{fit, resume, Variant};

    fn toy() -> Dataset {
        generate(&SyntheticSpec {
            num_identities: 4,
            instances_per_identity: 4,
            d: 5,
            n: 4,
            test_fraction: 0.0,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            d: 5,
            n: 4,
            p: 2,
            k: 2,
            epochs: 2,
            experts: 2,
            variant: Variant::E,
            knn: Some(2),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let mut ck = fit(&cfg(), &toy(), Exec::default()).unwrap();
        ck.set_meta("config_hash", "00ff");
        let back = Checkpoint::decode(&ck.encode(), Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.meta("config_hash"), Some("00ff"));
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let ds = toy();
        let full = fit(&cfg(), &ds, Exec::default()).unwrap();
        let mut ck = Checkpoint::initial(&cfg(), &ds).unwrap();
        crate::objective::train::train_until(&mut ck, &ds, 1, Exec::default()).unwrap();
        let reloaded = Checkpoint::decode(&ck.encode(), Path::new("mem")).unwrap();
        let done = resume(reloaded, &ds, None, Exec::default()).unwrap();
        assert_eq!(done.history, full.history);
        assert_eq!(done.params, full.params);
    }

    #[test]
    fn corrupt_inputs_fail_with_named_errors() {
        let bytes = Checkpoint::initial(&cfg(), &toy()).unwrap().encode();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            Checkpoint::decode(&bad, Path::new("x")),
            Err(Error::BadMagic { .. })
        ));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::decode(&bad, Path::new("x")),
            Err(Error::VersionMismatch { found: 9, .. })
        ));
        for cut in [3, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                Checkpoint::decode(&bytes[..cut], Path::new("x")),
                Err(Error::Truncated { .. })
            ));
        }
    }

    #[test]
    fn loss_csv_layout() {
        let ck = fit(&cfg(), &toy(), Exec::default()).unwrap();
        let csv = ck.loss_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next(),
            Some("step,ce,tri,kl_cs,lr_loss,le_loss,total")
        );
        assert_eq!(lines.count(), ck.history.len());
    }
}
