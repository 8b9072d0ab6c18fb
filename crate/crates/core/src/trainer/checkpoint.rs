//! Checkpoint file: magic `AMOC`, u16 version, u32 metadata length, JSON
//! metadata with a tensor manifest, `f64` little-endian payload and a
//! trailing CRC32 over everything before it.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, TrainConfig, Trainer};
use crate::component_kb::{ClassKb, ComponentKb};
use crate::eir::{ClubPair, EirConfig, EirEstimator};
use crate::error::{Error, Result};
use crate::experts::ExpertSet;
use crate::feature_io::Dataset;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::router::Router;
use crate::scoring_eval::ScoreStats;
use crate::tensor::Mat;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AMOC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// Offset into the payload in elements.
    offset: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RngState {
    seed: String,
    stream: u64,
    word_pos: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerState {
    config: AdamConfig,
    step: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    config: TrainConfig,
    iteration: u64,
    dim: usize,
    grid_h: usize,
    grid_w: usize,
    rng: RngState,
    router: Router,
    experts: ExpertSet,
    eir_config: EirConfig,
    eir_pairs: Vec<ClubPair>,
    optimizer: OptimizerState,
    eir_optimizer: OptimizerState,
    kb: BTreeMap<String, ClassKb>,
    score_stats: Option<ScoreStats>,
    tensors: Vec<TensorEntry>,
}

struct PayloadWriter {
    entries: Vec<TensorEntry>,
    data: Vec<f64>,
}

impl PayloadWriter {
    fn push(&mut self, name: String, m: &Mat) {
        self.entries.push(TensorEntry {
            name,
            rows: m.nrows(),
            cols: m.ncols(),
            offset: self.data.len(),
        });
        self.data.extend(m.iter());
    }

    fn push_store(&mut self, prefix: &str, store: &ParamStore) {
        for (_, name, m) in store.iter() {
            self.push(format!("{prefix}/{name}"), m);
        }
    }

    fn push_moments(&mut self, prefix: &str, store: &ParamStore, opt: &Adam) {
        for (id, name, _) in store.iter() {
            self.push(format!("{prefix}_m/{name}"), &opt.first[id.0]);
            self.push(format!("{prefix}_v/{name}"), &opt.second[id.0]);
        }
    }
}

struct PayloadReader {
    tensors: BTreeMap<String, Mat>,
}

impl PayloadReader {
    fn take(&mut self, name: &str) -> Result<Mat> {
        self.tensors
            .remove(name)
            .ok_or_else(|| Error::ShapeMismatch(format!("checkpoint lacks tensor {name:?}")))
    }

    /// Rebuild a store whose tensors carry `prefix/`, in manifest order.
    fn take_store(&mut self, prefix: &str, order: &[String]) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        let p = format!("{prefix}/");
        for name in order.iter().filter_map(|n| n.strip_prefix(&p)) {
            let m = self.take(&format!("{p}{name}"))?;
            store.add(name, m);
        }
        Ok(store)
    }

    fn take_moments(&mut self, prefix: &str, store: &ParamStore, config: AdamConfig, step: u64) -> Result<Adam> {
        let mut opt = Adam::new(config, store);
        opt.step = step;
        for (id, name, value) in store.iter() {
            for (slot, kind) in [(&mut opt.first[id.0], "m"), (&mut opt.second[id.0], "v")] {
                let m = self.take(&format!("{prefix}_{kind}/{name}"))?;
                if m.dim() != value.dim() {
                    return Err(Error::ShapeMismatch(format!("moment {name} is {:?}, parameter {:?}", m.dim(), value.dim())));
                }
                *slot = m;
            }
        }
        Ok(opt)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::ShapeMismatch(format!("malformed rng seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (i, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(&s[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
    }
    Ok(out)
}

impl Trainer {
    pub fn to_checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let m = &self.model;
        let mut w = PayloadWriter {
            entries: Vec::new(),
            data: Vec::new(),
        };
        w.push_store("param", &m.store);
        w.push_moments("adam", &m.store, &self.optimizer);
        w.push_store("club", &m.eir.store);
        w.push_moments("club", &m.eir.store, &m.eir.optimizer);
        for (class, kb) in &m.kb.classes {
            w.push(format!("kb/{class}"), &kb.centroids);
        }
        let meta = Metadata {
            config: self.config.clone(),
            iteration: self.iteration,
            dim: m.dim,
            grid_h: m.grid_h,
            grid_w: m.grid_w,
            rng: RngState {
                seed: hex(&self.rng.get_seed()),
                stream: self.rng.get_stream(),
                word_pos: self.rng.get_word_pos().to_string(),
            },
            router: m.router.clone(),
            experts: m.experts.clone(),
            eir_config: m.eir.config,
            eir_pairs: m.eir.pairs.clone(),
            optimizer: OptimizerState {
                config: self.optimizer.config,
                step: self.optimizer.step,
            },
            eir_optimizer: OptimizerState {
                config: m.eir.optimizer.config,
                step: m.eir.optimizer.step,
            },
            kb: m.kb.classes.clone(),
            score_stats: self.score_stats.clone(),
            tensors: w.entries,
        };
        let json = serde_json::to_vec(&meta)?;
        let mut out = Vec::with_capacity(14 + json.len() + 8 * w.data.len());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for v in &w.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let need = |n: usize| {
            if bytes.len() < n {
                Err(Error::Truncated {
                    needed: n,
                    found: bytes.len(),
                })
            } else {
                Ok(())
            }
        };
        need(4)?;
        let magic: [u8; 4] = bytes[..4].try_into().expect("4 bytes");
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        need(14)?;
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let json_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
        let json_end = 10 + json_len;
        need(json_end + 4)?;
        let meta: Metadata = serde_json::from_slice(&bytes[10..json_end])?;
        let payload = &body[json_end..];
        let total: usize = meta.tensors.iter().map(|t| t.rows * t.cols).sum();
        if payload.len() != 8 * total {
            return Err(Error::Truncated {
                needed: 8 * total,
                found: payload.len(),
            });
        }
        let mut tensors = BTreeMap::new();
        let mut order = Vec::with_capacity(meta.tensors.len());
        for t in &meta.tensors {
            let n = t.rows * t.cols;
            let end = t.offset + n;
            if end > total {
                return Err(Error::ShapeMismatch(format!("tensor {} overruns the payload", t.name)));
            }
            let values: Vec<f64> = payload[8 * t.offset..8 * end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let m = Mat::from_shape_vec((t.rows, t.cols), values).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
            tensors.insert(t.name.clone(), m);
            order.push(t.name.clone());
        }
        let mut r = PayloadReader { tensors };

        let store = r.take_store("param", &order)?;
        let optimizer = r.take_moments("adam", &store, meta.optimizer.config, meta.optimizer.step)?;
        let club_store = r.take_store("club", &order)?;
        let club_opt = r.take_moments("club", &club_store, meta.eir_optimizer.config, meta.eir_optimizer.step)?;
        let mut kb = ComponentKb::default();
        for (class, mut entry) in meta.kb {
            entry.centroids = r.take(&format!("kb/{class}"))?;
            if entry.centroids.ncols() != meta.dim {
                return Err(Error::ShapeMismatch(format!(
                    "knowledge base of class {class} has {} dims, model {}",
                    entry.centroids.ncols(),
                    meta.dim
                )));
            }
            kb.classes.insert(class, entry);
        }
        if let Some(name) = r.tensors.keys().next() {
            return Err(Error::ShapeMismatch(format!("unexpected tensor {name:?}")));
        }
        let gate = store.get(meta.router.gate);
        if gate.dim() != (meta.router.n_experts, meta.dim) {
            return Err(Error::ShapeMismatch(format!("router gate is {:?}", gate.dim())));
        }

        let mut rng = ChaCha8Rng::from_seed(unhex(&meta.rng.seed)?);
        rng.set_stream(meta.rng.stream);
        let word_pos: u128 = meta
            .rng
            .word_pos
            .parse()
            .map_err(|_| Error::ShapeMismatch(format!("malformed rng position {:?}", meta.rng.word_pos)))?;
        rng.set_word_pos(word_pos);

        Ok(Trainer {
            config: meta.config,
            model: Model {
                store,
                router: meta.router,
                experts: meta.experts,
                kb,
                eir: EirEstimator {
                    config: meta.eir_config,
                    pairs: meta.eir_pairs,
                    store: club_store,
                    optimizer: club_opt,
                },
                dim: meta.dim,
                grid_h: meta.grid_h,
                grid_w: meta.grid_w,
            },
            optimizer,
            iteration: meta.iteration,
            rng,
            score_stats: meta.score_stats,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint_bytes(&std::fs::read(path)?)
    }

    /// Fail with [`Error::ShapeMismatch`] unless `data` has this model's grid and width.
    pub fn ensure_compatible(&self, data: &Dataset) -> Result<()> {
        let m = &self.model;
        if (data.dim, data.grid_h, data.grid_w) != (m.dim, m.grid_h, m.grid_w) {
            return Err(Error::ShapeMismatch(format!(
                "data is {}x{}x{}, checkpoint {}x{}x{}",
                data.grid_h, data.grid_w, data.dim, m.grid_h, m.grid_w, m.dim
            )));
        }
        for c in &data.classes {
            m.kb.get(&c.class_id)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::experts::ExpertConfig;
    use crate::component_kb::KbConfig;
    use crate::feature_io::synth::{gen_synthetic, SyntheticSpec};

    fn setup(dim: usize) -> (Dataset, Trainer) {
        let data = gen_synthetic(&SyntheticSpec {
            n_classes: 2,
            train_per_class: 10,
            test_per_class: 4,
            grid_h: 8,
            grid_w: 8,
            dim,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            iterations: 4,
            batch_size: 4,
            experts: ExpertConfig {
                n_patch: 2,
                n_component: 2,
                n_global: 2,
                ..Default::default()
            },
            kb: KbConfig {
                clusters: 4,
                ..Default::default()
            },
            ..Default::default()
        };
        let t = Trainer::new(cfg, &data).unwrap();
        (data, t)
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (data, mut t) = setup(16);
        let pool = t.prepare_train(&data).unwrap();
        t.step(&pool).unwrap();
        t.step(&pool).unwrap();
        let bytes = t.to_checkpoint_bytes().unwrap();
        let straight: Vec<_> = (0..2).map(|_| t.step(&pool).unwrap()).collect();
        let mut resumed = Trainer::from_checkpoint_bytes(&bytes).unwrap();
        let pool2 = resumed.prepare_train(&data).unwrap();
        let replay: Vec<_> = (0..2).map(|_| resumed.step(&pool2).unwrap()).collect();
        assert_eq!(straight, replay);
        assert_eq!(t.model.store, resumed.model.store);
        assert_eq!(resumed.to_checkpoint_bytes().unwrap(), t.to_checkpoint_bytes().unwrap());
    }

    #[test]
    fn flipped_payload_byte_fails_checksum() {
        let (_, t) = setup(16);
        let mut bytes = t.to_checkpoint_bytes().unwrap();
        let i = bytes.len() - 100;
        bytes[i] ^= 0x40;
        assert!(matches!(Trainer::from_checkpoint_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn header_errors() {
        let (_, t) = setup(16);
        let bytes = t.to_checkpoint_bytes().unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Trainer::from_checkpoint_bytes(&bad), Err(Error::BadMagic { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(Trainer::from_checkpoint_bytes(&bad), Err(Error::VersionMismatch { found: 9, .. })));
        assert!(matches!(Trainer::from_checkpoint_bytes(&bytes[..3]), Err(Error::Truncated { .. })));
    }

    #[test]
    fn mismatched_width_is_a_shape_error() {
        let (_, t) = setup(16);
        let (other, _) = setup(8);
        let loaded = Trainer::from_checkpoint_bytes(&t.to_checkpoint_bytes().unwrap()).unwrap();
        assert!(matches!(loaded.ensure_compatible(&other), Err(Error::ShapeMismatch(_))));
    }
}
