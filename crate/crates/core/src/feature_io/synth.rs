//! Deterministic synthetic feature bundles with anomalies at three levels.
//!
//! Each class owns a rank-`r` affine feature manifold and a fixed layout: a
//! background region plus a few equally sized "parts" at class-specific
//! positions. Every region has its own latent centre, so K-means over normal
//! patches recovers the regions. Anomalies:
//!
//! * `local`: a square block of patches is replaced by off-manifold noise;
//! * `component`: one part takes the latent identity of another class's part
//!   (still on this class's manifold, but a component that never occurs);
//! * `global`: two parts trade places; every patch stays individually valid.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{FeatureBundle, Label, LayerSelection};
use crate::error::{Error, Result};
use crate::feature_io::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnomalyKind {
    Local,
    Component,
    Global,
}

impl AnomalyKind {
    pub const ALL: [AnomalyKind; 3] = [AnomalyKind::Local, AnomalyKind::Component, AnomalyKind::Global];

    pub fn as_str(&self) -> &'static str {
        match self {
            AnomalyKind::Local => "local",
            AnomalyKind::Component => "component",
            AnomalyKind::Global => "global",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnomalyMix {
    pub local: f64,
    pub component: f64,
    pub global: f64,
}

impl Default for AnomalyMix {
    fn default() -> Self {
        Self {
            local: 1.0 / 3.0,
            component: 1.0 / 3.0,
            global: 1.0 / 3.0,
        }
    }
}

impl AnomalyMix {
    fn weights(&self) -> [f64; 3] {
        [self.local, self.component, self.global]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Fraction of each class's test split that is anomalous.
    pub test_anomaly_fraction: f64,
    pub grid_h: usize,
    pub grid_w: usize,
    pub dim: usize,
    pub manifold_rank: usize,
    pub anomaly_mix: AnomalyMix,
    /// Per-dimension standard deviation of isotropic feature noise.
    pub noise_std: f64,
    /// Number of extra encoder layers stored in each bundle's layer stack.
    pub extra_layers: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_classes: 3,
            train_per_class: 200,
            test_per_class: 60,
            test_anomaly_fraction: 0.5,
            grid_h: 14,
            grid_w: 14,
            dim: 32,
            manifold_rank: 4,
            anomaly_mix: AnomalyMix::default(),
            noise_std: 0.02,
            extra_layers: 0,
            seed: 0,
        }
    }
}

const NUM_PARTS: usize = 3;
const CENTER_SCALE: f64 = 1.5;
const MIN_CENTER_GAP: f64 = 1.5;
const REGION_JITTER: f64 = 0.15;
const PATCH_JITTER: f64 = 0.1;
const OFFSET_SCALE: f64 = 0.3;

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let m = self.anomaly_mix.weights();
        if m.iter().any(|w| !(w.is_finite() && *w >= 0.0)) || (m.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!("anomaly_mix {m:?} must be non-negative and sum to 1")));
        }
        if self.manifold_rank == 0 || self.manifold_rank >= self.dim {
            return Err(Error::Config(format!(
                "manifold_rank {} must satisfy 0 < rank < dim {}",
                self.manifold_rank, self.dim
            )));
        }
        if self.n_classes == 0 {
            return Err(Error::Config("n_classes must be positive".into()));
        }
        if self.grid_h < 6 || self.grid_w < 6 {
            return Err(Error::Config("grid must be at least 6x6 to hold the part layout".into()));
        }
        if !(0.0..=1.0).contains(&self.test_anomaly_fraction) {
            return Err(Error::Config("test_anomaly_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::Config("noise_std must be finite and non-negative".into()));
        }
        if self.train_per_class == 0 {
            return Err(Error::Config("train_per_class must be positive".into()));
        }
        Ok(())
    }

    fn part_size(&self) -> (usize, usize) {
        ((self.grid_h / 4).max(2), (self.grid_w / 4).max(2))
    }
}

struct ClassModel {
    class_id: String,
    /// `D×r`, orthonormal columns.
    basis: Vec<Vec<f64>>,
    offset: Vec<f64>,
    cls_offset: Vec<f64>,
    /// Latent centre of the background (index 0) and of each part.
    centers: Vec<Vec<f64>>,
    /// Top-left corner of each part.
    slots: Vec<(usize, usize)>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * normal(rng)).collect()
}

fn orthonormal_basis(rng: &mut ChaCha8Rng, dim: usize, rank: usize) -> Vec<Vec<f64>> {
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    while cols.len() < rank {
        let mut v = gaussian_vec(rng, dim, 1.0);
        for c in &cols {
            let p: f64 = v.iter().zip(c).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(c).for_each(|(a, b)| *a -= p * b);
        }
        let n = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            cols.push(v);
        }
    }
    cols
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl ClassModel {
    fn new(spec: &SyntheticSpec, index: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        let basis = orthonormal_basis(rng, spec.dim, spec.manifold_rank);
        let offset = gaussian_vec(rng, spec.dim, OFFSET_SCALE);
        let cls_offset = gaussian_vec(rng, spec.dim, 1.0);
        let mut centers: Vec<Vec<f64>> = Vec::with_capacity(NUM_PARTS + 1);
        let mut attempts = 0;
        while centers.len() < NUM_PARTS + 1 {
            let c = gaussian_vec(rng, spec.manifold_rank, CENTER_SCALE);
            attempts += 1;
            if attempts > 10_000 || centers.iter().all(|o| dist(o, &c) >= MIN_CENTER_GAP) {
                centers.push(c);
            }
        }
        let (ph, pw) = spec.part_size();
        let mut slots: Vec<(usize, usize)> = Vec::with_capacity(NUM_PARTS);
        let mut tries = 0;
        while slots.len() < NUM_PARTS {
            tries += 1;
            if tries > 100_000 {
                return Err(Error::Config("cannot place parts on the grid".into()));
            }
            let y = rng.gen_range(0..=spec.grid_h - ph);
            let x = rng.gen_range(0..=spec.grid_w - pw);
            // Parts never touch so that swapping two of them is a clean move.
            let clear = slots.iter().all(|&(sy, sx)| {
                y + ph < sy || sy + ph < y || x + pw < sx || sx + pw < x
            });
            if clear {
                slots.push((y, x));
            }
        }
        Ok(Self {
            class_id: format!("class{index}"),
            basis,
            offset,
            cls_offset,
            centers,
            slots,
        })
    }

    fn region_of(&self, spec: &SyntheticSpec, y: usize, x: usize) -> usize {
        let (ph, pw) = spec.part_size();
        for (p, &(sy, sx)) in self.slots.iter().enumerate() {
            if y >= sy && y < sy + ph && x >= sx && x < sx + pw {
                return p + 1;
            }
        }
        0
    }

    fn embed(&self, latent: &[f64]) -> Vec<f64> {
        let mut out = self.offset.clone();
        for (z, col) in latent.iter().zip(&self.basis) {
            out.iter_mut().zip(col).for_each(|(o, c)| *o += z * c);
        }
        out
    }

    fn part_cells(&self, spec: &SyntheticSpec, part: usize) -> Vec<usize> {
        let (ph, pw) = spec.part_size();
        let (sy, sx) = self.slots[part];
        let mut cells = Vec::with_capacity(ph * pw);
        for y in sy..sy + ph {
            for x in sx..sx + pw {
                cells.push(y * spec.grid_w + x);
            }
        }
        cells
    }
}

fn sample_latents(spec: &SyntheticSpec, model: &ClassModel, centers: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let jitter: Vec<Vec<f64>> = (0..centers.len())
        .map(|_| gaussian_vec(rng, spec.manifold_rank, REGION_JITTER))
        .collect();
    let mut latents = Vec::with_capacity(spec.grid_h * spec.grid_w);
    for y in 0..spec.grid_h {
        for x in 0..spec.grid_w {
            let r = model.region_of(spec, y, x);
            let z: Vec<f64> = centers[r]
                .iter()
                .zip(&jitter[r])
                .map(|(c, j)| c + j + PATCH_JITTER * normal(rng))
                .collect();
            latents.push(z);
        }
    }
    latents
}

fn finish_bundle(
    spec: &SyntheticSpec,
    model: &ClassModel,
    sample_id: String,
    clean: Vec<Vec<f64>>,
    mask: Option<Vec<u8>>,
    rng: &mut ChaCha8Rng,
) -> FeatureBundle {
    let n = clean.len();
    let layer = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        clean
            .iter()
            .flat_map(|row| row.iter().map(|v| (*v + spec.noise_std * normal(rng)) as f32).collect::<Vec<_>>())
            .collect()
    };
    let patch_embeddings = layer(rng);
    let layer_stack: Vec<Vec<f32>> = (0..spec.extra_layers).map(|_| layer(rng)).collect();
    let mut cls = model.cls_offset.clone();
    for i in 0..n {
        for (d, c) in cls.iter_mut().enumerate() {
            *c += patch_embeddings[i * spec.dim + d] as f64 / n as f64;
        }
    }
    let label = if mask.is_some() { Label::Anomalous } else { Label::Normal };
    FeatureBundle {
        sample_id,
        class_id: model.class_id.clone(),
        grid_h: spec.grid_h,
        grid_w: spec.grid_w,
        dim: spec.dim,
        patch_embeddings,
        cls_embedding: cls.into_iter().map(|v| v as f32).collect(),
        layer_stack,
        label,
        pixel_mask: mask,
    }
}

fn anomaly_counts(spec: &SyntheticSpec, n_anomalous: usize) -> [usize; 3] {
    let w = spec.anomaly_mix.weights();
    let raw: Vec<f64> = w.iter().map(|f| f * n_anomalous as f64).collect();
    let mut counts = [0usize; 3];
    for (c, r) in counts.iter_mut().zip(&raw) {
        *c = r.floor() as usize;
    }
    let mut rest = n_anomalous - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..3).collect();
    // Largest remainder; ties resolved by the fixed kind order.
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal)
    });
    for k in order {
        if rest == 0 {
            break;
        }
        if w[k] > 0.0 {
            counts[k] += 1;
            rest -= 1;
        }
    }
    counts
}

/// Generate a complete in-memory dataset. Identical specs give identical bundles.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let models = (0..spec.n_classes)
        .map(|c| ClassModel::new(spec, c, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut classes = Vec::with_capacity(models.len());
    for (ci, model) in models.iter().enumerate() {
        let normal_features = |rng: &mut ChaCha8Rng, centers: &[Vec<f64>]| -> Vec<Vec<f64>> {
            sample_latents(spec, model, centers, rng)
                .iter()
                .map(|z| model.embed(z))
                .collect()
        };
        let mut train = Vec::with_capacity(spec.train_per_class);
        for i in 0..spec.train_per_class {
            let clean = normal_features(&mut rng, &model.centers);
            let id = format!("{}-train-{i:04}", model.class_id);
            train.push((finish_bundle(spec, model, id, clean, None, &mut rng), Some("normal".to_string())));
        }

        let n_anom = (spec.test_per_class as f64 * spec.test_anomaly_fraction).round() as usize;
        let counts = anomaly_counts(spec, n_anom);
        let mut plan: Vec<Option<AnomalyKind>> = vec![None; spec.test_per_class - n_anom];
        for (kind, &count) in AnomalyKind::ALL.iter().zip(&counts) {
            plan.extend(std::iter::repeat(Some(*kind)).take(count));
        }
        plan.shuffle(&mut rng);

        let mut test = Vec::with_capacity(plan.len());
        for (i, kind) in plan.into_iter().enumerate() {
            let id = format!("{}-test-{i:04}", model.class_id);
            let n = spec.grid_h * spec.grid_w;
            let (clean, mask) = match kind {
                None => (normal_features(&mut rng, &model.centers), None),
                Some(AnomalyKind::Local) => {
                    let mut clean = normal_features(&mut rng, &model.centers);
                    let bs = (spec.grid_h.min(spec.grid_w) / 4).max(2);
                    let y0 = rng.gen_range(0..=spec.grid_h - bs);
                    let x0 = rng.gen_range(0..=spec.grid_w - bs);
                    let scale = feature_spread(&clean);
                    let mut mask = vec![0u8; n];
                    for y in y0..y0 + bs {
                        for x in x0..x0 + bs {
                            let cell = y * spec.grid_w + x;
                            clean[cell] = model
                                .offset
                                .iter()
                                .map(|o| o + scale * normal(&mut rng))
                                .collect();
                            mask[cell] = 1;
                        }
                    }
                    (clean, Some(mask))
                }
                Some(AnomalyKind::Component) => {
                    let part = rng.gen_range(0..NUM_PARTS);
                    let donor_center = if models.len() > 1 {
                        let mut other = rng.gen_range(0..models.len() - 1);
                        if other >= ci {
                            other += 1;
                        }
                        models[other].centers[1 + rng.gen_range(0..NUM_PARTS)].clone()
                    } else {
                        gaussian_vec(&mut rng, spec.manifold_rank, CENTER_SCALE)
                    };
                    let mut centers = model.centers.clone();
                    centers[part + 1] = donor_center;
                    let clean = normal_features(&mut rng, &centers);
                    let mut mask = vec![0u8; n];
                    for cell in model.part_cells(spec, part) {
                        mask[cell] = 1;
                    }
                    (clean, Some(mask))
                }
                Some(AnomalyKind::Global) => {
                    let mut clean = normal_features(&mut rng, &model.centers);
                    let a = rng.gen_range(0..NUM_PARTS);
                    let mut b = rng.gen_range(0..NUM_PARTS - 1);
                    if b >= a {
                        b += 1;
                    }
                    let (ca, cb) = (model.part_cells(spec, a), model.part_cells(spec, b));
                    let mut mask = vec![0u8; n];
                    for (&x, &y) in ca.iter().zip(&cb) {
                        clean.swap(x, y);
                        mask[x] = 1;
                        mask[y] = 1;
                    }
                    (clean, Some(mask))
                }
            };
            let kind_name = kind.map_or("normal", |k| k.as_str()).to_string();
            test.push((finish_bundle(spec, model, id, clean, mask, &mut rng), Some(kind_name)));
        }
        classes.push((model.class_id.clone(), train, test));
    }
    Dataset::from_bundles(spec.seed, classes, &LayerSelection::All)
}

/// Per-dimension standard deviation of a set of feature rows.
fn feature_spread(rows: &[Vec<f64>]) -> f64 {
    let n = rows.len() as f64;
    let d = rows[0].len();
    let mut var = 0.0;
    for j in 0..d {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / n;
        var += rows.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n;
    }
    (var / d as f64).sqrt()
}
