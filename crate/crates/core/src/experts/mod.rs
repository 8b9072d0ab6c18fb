//! The three expert families, input corruption, and reconstruction losses
//! and score maps.
//!
//! * patch experts: residual linear-attention decoders scored by per-patch
//!   cosine distance;
//! * component experts: MLP autoencoders over pooled component embeddings,
//!   scored by per-component cosine distance;
//! * global experts: convolutional autoencoders over the feature grid, scored
//!   by per-patch squared Euclidean distance.

mod component;
mod global;
mod patch;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::component_kb::{scatter_component_scores, ComponentMasks, PooledComponents};
use crate::error::{Error, Result};
use crate::nn::Bind;
use crate::params::ParamStore;
use crate::tensor::{feature_map, linear_attention_forward, Graph, Mat, Var};

pub use component::ComponentExpert;
pub use global::GlobalExpert;
pub use patch::{PatchExpert, ATTENTION_EPS};

/// Norm floor for cosine distances.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpertGroup {
    Patch,
    Component,
    Global,
}

impl ExpertGroup {
    pub const ALL: [ExpertGroup; 3] = [ExpertGroup::Patch, ExpertGroup::Component, ExpertGroup::Global];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ExpertGroup::Patch => "patch",
            ExpertGroup::Component => "component",
            ExpertGroup::Global => "global",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptionConfig {
    /// Noise standard deviation relative to the feature standard deviation.
    pub noise_std: f64,
    pub dropout_p: f64,
    pub enabled_at_inference: bool,
}

impl Default for CorruptionConfig {
    fn default() -> Self {
        Self {
            noise_std: 0.1,
            dropout_p: 0.2,
            enabled_at_inference: false,
        }
    }
}

impl CorruptionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0, 1]", self.dropout_p)));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::Config(format!("noise_std {} must be finite and ≥ 0", self.noise_std)));
        }
        Ok(())
    }
}

/// Standard deviation over every element of `m`.
pub fn global_std(m: &Mat) -> f64 {
    let n = m.len() as f64;
    let mean = m.sum() / n;
    (m.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Gaussian noise followed by inverted dropout.
pub fn corrupt<R: Rng + ?Sized>(target: &Mat, cfg: &CorruptionConfig, rng: &mut R) -> Mat {
    let p = cfg.dropout_p;
    if p >= 1.0 {
        return Mat::zeros(target.raw_dim());
    }
    let sigma = cfg.noise_std * global_std(target);
    let keep_scale = 1.0 / (1.0 - p);
    target.mapv(|v| {
        let noisy = if sigma > 0.0 {
            let z: f64 = StandardNormal.sample(rng);
            v + sigma * z
        } else {
            v
        };
        if p > 0.0 {
            if rng.gen::<f64>() < p {
                0.0
            } else {
                noisy * keep_scale
            }
        } else {
            noisy
        }
    })
}

/// Linear attention with the `elu(x)+1` feature map applied to queries and keys.
pub fn linear_attention(q: &Mat, k: &Mat, v: &Mat) -> Mat {
    let segments = [0..q.nrows()];
    linear_attention_forward(&feature_map(q), &feature_map(k), v, &segments, ATTENTION_EPS)
}

fn row_cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt().max(COSINE_EPS);
    let nb = b.dot(&b).sqrt().max(COSINE_EPS);
    a.dot(&b) / (na * nb)
}

/// `1 − cos` per row.
pub fn cosine_distances(target: &Mat, recon: &Mat) -> Vec<f64> {
    target
        .rows()
        .into_iter()
        .zip(recon.rows())
        .map(|(a, b)| 1.0 - row_cosine(a, b))
        .collect()
}

pub fn patch_score(target: &Mat, recon: &Mat) -> Vec<f64> {
    cosine_distances(target, recon)
}

pub fn patch_loss(target: &Mat, recon: &Mat) -> f64 {
    let d = cosine_distances(target, recon);
    d.iter().sum::<f64>() / d.len() as f64
}

pub fn component_scores(embeddings: &Mat, recon: &Mat) -> Result<Vec<f64>> {
    if embeddings.nrows() == 0 {
        return Err(Error::EmptyComponents);
    }
    Ok(cosine_distances(embeddings, recon))
}

pub fn component_loss(embeddings: &Mat, recon: &Mat) -> Result<f64> {
    let s = component_scores(embeddings, recon)?;
    Ok(s.iter().sum::<f64>() / s.len() as f64)
}

/// Squared Euclidean distance over channels at every patch.
pub fn global_score(target: &Mat, recon: &Mat) -> Vec<f64> {
    target
        .rows()
        .into_iter()
        .zip(recon.rows())
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
        .collect()
}

/// Mean squared error over all elements.
pub fn global_loss(target: &Mat, recon: &Mat) -> f64 {
    global_score(target, recon).iter().sum::<f64>() / target.len() as f64
}

/// Graph version of [`cosine_distances`], `m×1`.
pub fn cosine_distance_graph(g: &mut Graph, target: Var, recon: Var) -> Var {
    let c = g.row_cosine(target, recon, COSINE_EPS);
    let neg = g.scale(c, -1.0);
    g.add_scalar(neg, 1.0)
}

/// Graph version of [`global_score`], `m×1`.
pub fn squared_distance_graph(g: &mut Graph, target: Var, recon: Var) -> Var {
    let d = g.sub(target, recon);
    let sq = g.square(d);
    g.sum_cols(sq)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExpertConfig {
    pub n_patch: usize,
    pub n_component: usize,
    pub n_global: usize,
    pub patch_depth: usize,
    /// Feed-forward width of patch experts; `0` means `D`.
    pub patch_hidden: usize,
    /// Component autoencoder bottleneck; `0` means `max(1, D/8)`.
    pub component_bottleneck: usize,
    /// Global autoencoder bottleneck channels; `0` means `max(1, D/4)`.
    pub global_bottleneck: usize,
    pub global_downsamples: usize,
}

impl Default for ExpertConfig {
    fn default() -> Self {
        Self {
            n_patch: 6,
            n_component: 6,
            n_global: 6,
            patch_depth: 2,
            patch_hidden: 0,
            component_bottleneck: 0,
            global_bottleneck: 0,
            global_downsamples: 2,
        }
    }
}

impl ExpertConfig {
    pub fn total(&self) -> usize {
        self.n_patch + self.n_component + self.n_global
    }

    pub fn groups(&self) -> Vec<ExpertGroup> {
        std::iter::repeat(ExpertGroup::Patch)
            .take(self.n_patch)
            .chain(std::iter::repeat(ExpertGroup::Component).take(self.n_component))
            .chain(std::iter::repeat(ExpertGroup::Global).take(self.n_global))
            .collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum Expert {
    Patch(PatchExpert),
    Component(ComponentExpert),
    Global(GlobalExpert),
}

impl Expert {
    pub fn group(&self) -> ExpertGroup {
        match self {
            Expert::Patch(_) => ExpertGroup::Patch,
            Expert::Component(_) => ExpertGroup::Component,
            Expert::Global(_) => ExpertGroup::Global,
        }
    }
}

/// Everything an expert needs about one sample.
#[derive(Clone, Debug)]
pub struct ExpertInput<'a> {
    pub target: &'a Mat,
    pub masks: &'a ComponentMasks,
    pub pooled: &'a PooledComponents,
}

/// Output of one expert on one sample at inference.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertMap {
    /// Per-patch anomaly scores, row-major over the grid.
    pub map: Vec<f64>,
    pub loss: f64,
    pub representation: Vec<f64>,
}

/// Graph nodes produced by running one expert over a stacked batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchOutput {
    /// Reconstruction loss per sample, `B×1`.
    pub loss: Var,
    /// Sample-level representation, `B×D`.
    pub representation: Var,
}

/// Stacked inputs for one expert over a batch. Row ranges mark samples.
pub struct BatchInput {
    /// Expert input rows: corrupted or clean targets for patch experts,
    /// pooled components for component experts, clean targets for global ones.
    pub input: Mat,
    /// Reconstruction target rows aligned with `input`.
    pub target: Mat,
    pub segments: Arc<[Range<usize>]>,
}

impl Expert {
    pub fn forward_batch(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &BatchInput,
        mode: Bind,
    ) -> BatchOutput {
        let x = g.constant(batch.input.clone());
        let t = if batch.input == batch.target {
            x
        } else {
            g.constant(batch.target.clone())
        };
        let segs = batch.segments.clone();
        match self {
            Expert::Patch(e) => {
                let recon = e.forward(g, store, x, &segs, mode);
                let d = cosine_distance_graph(g, t, recon);
                BatchOutput {
                    loss: g.segment_mean(d, segs.clone()),
                    representation: g.segment_mean(recon, segs),
                }
            }
            Expert::Component(e) => {
                let recon = e.forward(g, store, x, mode);
                let d = cosine_distance_graph(g, t, recon);
                BatchOutput {
                    loss: g.segment_mean(d, segs.clone()),
                    representation: g.segment_mean(recon, segs),
                }
            }
            Expert::Global(e) => {
                let recon = e.forward(g, store, x, segs.len(), mode);
                let d = squared_distance_graph(g, t, recon);
                let per_patch = g.segment_mean(d, segs.clone());
                BatchOutput {
                    loss: g.scale(per_patch, 1.0 / e.dim as f64),
                    representation: g.segment_mean(recon, segs),
                }
            }
        }
    }

    /// Score map, loss and representation for a single clean sample.
    pub fn infer(&self, store: &ParamStore, sample: &ExpertInput<'_>) -> Result<ExpertMap> {
        let mut g = Graph::new();
        let n = sample.target.nrows();
        match self {
            Expert::Patch(e) => {
                let x = g.constant(sample.target.clone());
                let segs: Arc<[Range<usize>]> = vec![0..n].into();
                let recon = e.forward(&mut g, store, x, &segs, Bind::Frozen);
                let r = g.value(recon);
                let map = patch_score(sample.target, r);
                Ok(ExpertMap {
                    loss: map.iter().sum::<f64>() / n as f64,
                    representation: mean_row(r),
                    map,
                })
            }
            Expert::Component(e) => {
                let emb = &sample.pooled.embeddings;
                let x = g.constant(emb.clone());
                let recon = e.forward(&mut g, store, x, Bind::Frozen);
                let r = g.value(recon);
                let scores = component_scores(emb, r)?;
                let by_id: BTreeMap<usize, f64> = sample.pooled.ids.iter().copied().zip(scores.iter().copied()).collect();
                let map = scatter_component_scores(&by_id, sample.masks)?;
                Ok(ExpertMap {
                    loss: scores.iter().sum::<f64>() / scores.len() as f64,
                    representation: mean_row(r),
                    map,
                })
            }
            Expert::Global(e) => {
                let x = g.constant(sample.target.clone());
                let recon = e.forward(&mut g, store, x, 1, Bind::Frozen);
                let r = g.value(recon);
                let map = global_score(sample.target, r);
                Ok(ExpertMap {
                    loss: global_loss(sample.target, r),
                    representation: mean_row(r),
                    map,
                })
            }
        }
    }
}

fn mean_row(m: &Mat) -> Vec<f64> {
    (m.sum_axis(ndarray::Axis(0)) / m.nrows() as f64).to_vec()
}

/// All experts, ordered patch, component, global.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExpertSet {
    pub experts: Vec<Expert>,
    pub config: ExpertConfig,
}

impl ExpertSet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: ExpertConfig,
        dim: usize,
        grid_h: usize,
        grid_w: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if config.total() == 0 {
            return Err(Error::Config("at least one expert is required".into()));
        }
        let hidden = if config.patch_hidden == 0 { dim } else { config.patch_hidden };
        let bottleneck = if config.component_bottleneck == 0 {
            (dim / 8).max(1)
        } else {
            config.component_bottleneck
        };
        let gbottleneck = if config.global_bottleneck == 0 {
            (dim / 4).max(1)
        } else {
            config.global_bottleneck
        };
        let mut experts = Vec::with_capacity(config.total());
        for i in 0..config.n_patch {
            experts.push(Expert::Patch(PatchExpert::new(
                store,
                &format!("patch{i}"),
                dim,
                config.patch_depth,
                hidden,
                rng,
            )));
        }
        for i in 0..config.n_component {
            experts.push(Expert::Component(ComponentExpert::new(
                store,
                &format!("component{i}"),
                dim,
                bottleneck,
                rng,
            )?));
        }
        for i in 0..config.n_global {
            experts.push(Expert::Global(GlobalExpert::new(
                store,
                &format!("global{i}"),
                dim,
                grid_h,
                grid_w,
                config.global_downsamples,
                gbottleneck,
                rng,
            )?));
        }
        Ok(Self { experts, config })
    }

    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    pub fn groups(&self) -> Vec<ExpertGroup> {
        self.experts.iter().map(Expert::group).collect()
    }

    /// Expert indices belonging to `group`.
    pub fn members(&self, group: ExpertGroup) -> Vec<usize> {
        (0..self.experts.len())
            .filter(|&i| self.experts[i].group() == group)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::component_kb::masked_avg_pool;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn randn(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
        Mat::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
    }

    #[test]
    fn corruption_identity_and_full_drop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = randn(&mut rng, 5, 4);
        let id = CorruptionConfig {
            noise_std: 0.0,
            dropout_p: 0.0,
            enabled_at_inference: false,
        };
        assert_eq!(corrupt(&x, &id, &mut rng), x);
        let drop_all = CorruptionConfig { dropout_p: 1.0, ..id };
        assert!(corrupt(&x, &drop_all, &mut rng).iter().all(|&v| v == 0.0));
        assert!(CorruptionConfig { dropout_p: 1.5, ..id }.validate().is_err());
    }

    #[test]
    fn single_key_attention_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (randn(&mut rng, 1, 3), randn(&mut rng, 1, 3), randn(&mut rng, 1, 3));
        let out = linear_attention(&q, &k, &v);
        for (a, b) in out.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-5 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn identical_keys_average_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let q = randn(&mut rng, 6, 4);
        let key = randn(&mut rng, 1, 4);
        let k = Mat::from_shape_fn((6, 4), |(_, j)| key[[0, j]]);
        let v = randn(&mut rng, 6, 2);
        let mean = v.mean_axis(ndarray::Axis(0)).unwrap();
        let out = linear_attention(&q, &k, &v);
        for row in out.rows() {
            for (a, b) in row.iter().zip(mean.iter()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn untrained_patch_expert_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let e = PatchExpert::new(&mut store, "p", 8, 2, 8, &mut rng);
        let x = randn(&mut rng, 12, 8);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let segs: Arc<[Range<usize>]> = vec![0..12].into();
        let y = e.forward(&mut g, &store, xv, &segs, Bind::Frozen);
        assert_eq!(g.value(y), &x);
        let mut g2 = Graph::new();
        let xv = g2.constant(x.clone());
        let y2 = e.forward(&mut g2, &store, xv, &segs, Bind::Frozen);
        assert_eq!(g.value(y), g2.value(y2));
    }

    #[test]
    fn cosine_loss_trivial_cases() {
        let t = Mat::from_shape_vec((2, 2), vec![1.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(patch_loss(&t, &t), 0.0);
        assert!(patch_score(&t, &t).iter().all(|&s| s == 0.0));
        let orth = Mat::from_shape_vec((2, 2), vec![0.0, 3.0, -1.0, 0.0]).unwrap();
        assert_eq!(patch_loss(&t, &orth), 1.0);
        assert_eq!(patch_loss(&t, &(-&t)), 2.0);
        assert_eq!(component_loss(&t, &t).unwrap(), 0.0);
        assert_eq!(component_loss(&t, &orth).unwrap(), 1.0);
        assert_eq!(component_loss(&t, &(-&t)).unwrap(), 2.0);
        assert!(matches!(
            component_loss(&Mat::zeros((0, 2)), &Mat::zeros((0, 2))),
            Err(Error::EmptyComponents)
        ));
        // Positively colinear rows are a perfect reconstruction.
        assert!(patch_loss(&t, &(&t * 3.5)).abs() < 1e-15);
    }

    #[test]
    fn global_score_constant_offset() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = randn(&mut rng, 9, 5);
        assert_eq!(global_loss(&t, &t), 0.0);
        let c = 0.5;
        let s = global_score(&t, &(&t + c));
        for v in s {
            assert!((v - 5.0 * c * c).abs() < 1e-12);
        }
    }

    #[test]
    fn global_expert_preserves_grid_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let e = GlobalExpert::new(&mut store, "g", 8, 5, 7, 2, 2, &mut rng).unwrap();
        let x = randn(&mut rng, 2 * 35, 8);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = e.forward(&mut g, &store, xv, 2, Bind::Frozen);
        assert_eq!(g.value(y).dim(), (70, 8));
        assert!(GlobalExpert::new(&mut store, "h", 8, 1, 1, 2, 2, &mut rng).is_err());
    }

    #[test]
    fn batch_and_single_inference_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cfg = ExpertConfig {
            n_patch: 1,
            n_component: 1,
            n_global: 1,
            ..Default::default()
        };
        let set = ExpertSet::new(&mut store, cfg, 8, 3, 3, &mut rng).unwrap();
        // Move the zero-initialized projections off zero.
        for id in store.ids().collect::<Vec<_>>() {
            store.get_mut(id).mapv_inplace(|v| v + 0.05);
        }
        let target = randn(&mut rng, 9, 8);
        let masks = ComponentMasks {
            assignment: vec![0, 0, 1, 1, 2, 2, 0, 1, 2],
            components: 3,
        };
        let pooled = masked_avg_pool(&target, &masks);
        let input = ExpertInput {
            target: &target,
            masks: &masks,
            pooled: &pooled,
        };
        for e in &set.experts {
            let single = e.infer(&store, &input).unwrap();
            let (rows_in, rows_t) = match e {
                Expert::Component(_) => (pooled.embeddings.clone(), pooled.embeddings.clone()),
                _ => (target.clone(), target.clone()),
            };
            let n = rows_in.nrows();
            let batch = BatchInput {
                input: rows_in,
                target: rows_t,
                segments: vec![0..n].into(),
            };
            let mut g = Graph::new();
            let out = e.forward_batch(&mut g, &store, &batch, Bind::Frozen);
            assert!((g.value(out.loss)[[0, 0]] - single.loss).abs() < 1e-12);
            for (a, b) in g.value(out.representation).iter().zip(&single.representation) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
