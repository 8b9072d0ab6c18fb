//! Model assembly, the total training objective, optimization, score
//! statistics, checkpoints and gradient checking.

mod checkpoint;
mod gradcheck;

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use ndarray::{s, Axis};
use rand::seq::index::sample as sample_indices;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component_kb::{assign_masks, masked_avg_pool, ComponentKb, ComponentMasks, KbConfig, PooledComponents};
use crate::eir::{EirConfig, EirEstimator};
use crate::error::{Error, Result};
use crate::experts::{
    corrupt, BatchInput, CorruptionConfig, ExpertConfig, ExpertGroup, ExpertInput, ExpertSet,
};
use crate::feature_io::{Dataset, Sample};
use crate::nn::Bind;
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamId, ParamStore};
use crate::router::{default_capacity, esb_loss_graph, selection_mask, BatchRoutingStats, EsbBreakdown, EsbWeights, Router};
use crate::scoring_eval::{aggregate, AggregateConfig, AnomalyResult, GroupMaps, ScoreStats, ScoreStatsBuilder};
use crate::tensor::{Graph, Mat, Var};

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{gradcheck, GradcheckConfig, GradcheckReport, TensorCheck};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub lambda_esb: f64,
    pub lambda_eir: f64,
    pub top_k: usize,
    /// Pick the best expert of each group before filling the remaining slots.
    pub group_constrained: bool,
    /// Treat gates as constants in the weighted reconstruction term.
    pub freeze_gates: bool,
    pub capacity_factor: f64,
    /// Normal training samples per class used for score statistics; `0` means all.
    pub stats_samples: usize,
    pub optimizer: AdamConfig,
    pub experts: ExpertConfig,
    pub corruption: CorruptionConfig,
    pub eir: EirConfig,
    pub kb: KbConfig,
    pub esb: EsbWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 50_000,
            batch_size: 16,
            seed: 0,
            lambda_esb: 0.01,
            lambda_eir: 1e-4,
            top_k: 3,
            group_constrained: false,
            freeze_gates: false,
            capacity_factor: 1.25,
            stats_samples: 0,
            optimizer: AdamConfig::default(),
            experts: ExpertConfig::default(),
            corruption: CorruptionConfig::default(),
            eir: EirConfig::default(),
            kb: KbConfig::default(),
            esb: EsbWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        for (name, v) in [("lambda_esb", self.lambda_esb), ("lambda_eir", self.lambda_eir)] {
            if !(v.is_finite() && v >= 0.0) {
                return bad(format!("{name} {v} must be finite and ≥ 0"));
            }
        }
        if self.top_k == 0 || self.top_k > self.experts.total() {
            return bad(format!("top_k {} must lie in [1, {}]", self.top_k, self.experts.total()));
        }
        if !(self.capacity_factor.is_finite() && self.capacity_factor > 0.0) {
            return bad(format!("capacity_factor {} must be positive", self.capacity_factor));
        }
        if self.kb.clusters == 0 {
            return bad("kb.clusters must be positive".into());
        }
        self.optimizer.validate()?;
        self.corruption.validate()
    }
}

/// A sample with everything the model needs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample_id: String,
    pub class_id: String,
    pub kind: String,
    pub normal: bool,
    pub target: Mat,
    pub cls: Vec<f64>,
    pub masks: ComponentMasks,
    pub pooled: PooledComponents,
    pub pixel_mask: Option<Vec<bool>>,
}

impl PreparedSample {
    pub fn input(&self) -> ExpertInput<'_> {
        ExpertInput {
            target: &self.target,
            masks: &self.masks,
            pooled: &self.pooled,
        }
    }
}

/// Router, experts, component knowledge base and independence estimators.
#[derive(Clone, Debug)]
pub struct Model {
    pub store: ParamStore,
    pub router: Router,
    pub experts: ExpertSet,
    pub kb: ComponentKb,
    pub eir: EirEstimator,
    pub dim: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Model {
    pub fn new(config: &TrainConfig, dim: usize, grid_h: usize, grid_w: usize, kb: ComponentKb, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let experts = ExpertSet::new(&mut store, config.experts, dim, grid_h, grid_w, rng)?;
        let groups = experts.groups();
        let router = Router::new(
            &mut store,
            dim,
            groups.iter().map(|g| g.index()).collect(),
            config.top_k,
            config.group_constrained,
            rng,
        )?;
        let eir = EirEstimator::new(&groups, dim, config.eir, rng)?;
        Ok(Self {
            store,
            router,
            experts,
            kb,
            eir,
            dim,
            grid_h,
            grid_w,
        })
    }

    pub fn prepare(&self, sample: &Sample) -> Result<PreparedSample> {
        let b = &sample.bundle;
        if b.dim != self.dim || b.grid_h != self.grid_h || b.grid_w != self.grid_w {
            return Err(Error::ShapeMismatch(format!(
                "sample {} is {}x{}x{}, model expects {}x{}x{}",
                b.sample_id, b.grid_h, b.grid_w, b.dim, self.grid_h, self.grid_w, self.dim
            )));
        }
        let masks = assign_masks(&sample.target, &self.kb, &b.class_id)?;
        let pooled = masked_avg_pool(&sample.target, &masks);
        Ok(PreparedSample {
            sample_id: b.sample_id.clone(),
            class_id: b.class_id.clone(),
            kind: sample.kind.clone(),
            normal: sample.is_normal(),
            target: sample.target.clone(),
            cls: b.cls_vector(),
            masks,
            pooled,
            pixel_mask: b.pixel_mask.as_ref().map(|m| m.iter().map(|&v| v != 0).collect()),
        })
    }

    /// Route one sample and compute the group maps of its activated experts.
    ///
    /// Within a group, the maps of activated experts are averaged with their
    /// gates as weights.
    pub fn infer(&self, sample: &PreparedSample) -> Result<GroupMaps> {
        let decision = self.router.route(&self.store, &sample.cls)?;
        let mut sums: [Option<Vec<f64>>; 3] = [None, None, None];
        let mut mass = [0.0; 3];
        for &j in &decision.topk_indices {
            let e = &self.experts.experts[j];
            let out = e.infer(&self.store, &sample.input())?;
            let g = e.group().index();
            let w = decision.gates[j];
            mass[g] += w;
            let acc = sums[g].get_or_insert_with(|| vec![0.0; out.map.len()]);
            for (a, v) in acc.iter_mut().zip(&out.map) {
                *a += w * v;
            }
        }
        for g in 0..3 {
            if let Some(m) = &mut sums[g] {
                if mass[g] > 0.0 {
                    m.iter_mut().for_each(|v| *v /= mass[g]);
                }
            }
        }
        Ok(GroupMaps {
            maps: sums,
            gate_mass: mass,
            gates: decision.gates,
        })
    }

    /// Uniform mean of every expert map of `group`, ignoring routing.
    fn forced_group_map(&self, sample: &PreparedSample, group: ExpertGroup) -> Result<Option<Vec<f64>>> {
        let members = self.experts.members(group);
        if members.is_empty() {
            return Ok(None);
        }
        let mut acc = vec![0.0; sample.target.nrows()];
        for &j in &members {
            let out = self.experts.experts[j].infer(&self.store, &sample.input())?;
            for (a, v) in acc.iter_mut().zip(&out.map) {
                *a += v / members.len() as f64;
            }
        }
        Ok(Some(acc))
    }

    /// Per-class statistics of the group maps on normal training samples.
    ///
    /// Only maps of groups the router activated contribute; a group never
    /// activated for a class falls back to the uniform mean of its experts.
    pub fn score_stats(&self, samples: &[&PreparedSample]) -> Result<ScoreStats> {
        let mut b = ScoreStatsBuilder::default();
        let all: Vec<GroupMaps> = samples.par_iter().map(|s| self.infer(s)).collect::<Result<_>>()?;
        for (s, parts) in samples.iter().zip(all) {
            for g in ExpertGroup::ALL {
                if let Some(m) = &parts.maps[g.index()] {
                    b.push_map(&s.class_id, g, m);
                }
            }
        }
        let mut classes: Vec<&str> = samples.iter().map(|s| s.class_id.as_str()).collect();
        classes.sort_unstable();
        classes.dedup();
        for class in classes {
            for g in ExpertGroup::ALL {
                if b.has(class, g) {
                    continue;
                }
                let members: Vec<&&PreparedSample> = samples.iter().filter(|s| s.class_id == class).collect();
                let maps: Vec<Option<Vec<f64>>> =
                    members.par_iter().map(|s| self.forced_group_map(s, g)).collect::<Result<_>>()?;
                for m in maps.iter().flatten() {
                    b.push_map(class, g, m);
                }
            }
        }
        Ok(b.finish())
    }

    pub fn score(&self, sample: &PreparedSample, stats: &ScoreStats, cfg: &AggregateConfig) -> Result<AnomalyResult> {
        let parts = self.infer(sample)?;
        aggregate(&parts, stats.class(&sample.class_id), cfg)
    }
}

/// Fit the component knowledge base from the normal training samples.
pub fn fit_knowledge_base(data: &Dataset, cfg: KbConfig, seed: u64) -> Result<ComponentKb> {
    let mut kb = ComponentKb::default();
    for (i, class) in data.classes.iter().enumerate() {
        let targets: Vec<&Mat> = class.train.iter().map(|s| &s.target).collect();
        kb.fit_class(&class.class_id, &targets, cfg, seed.wrapping_add(i as u64))?;
    }
    Ok(kb)
}

/// Randomness consumed by one training step, drawn up front.
#[derive(Clone, Debug)]
pub struct StepPlan {
    /// Indices into the training pool.
    pub batch: Vec<usize>,
    /// Corrupted target of every batch element.
    pub corrupted: Vec<Mat>,
    /// One permutation per estimator pair.
    pub perms: Vec<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub total: f64,
    pub reconstruction: f64,
    pub esb: EsbBreakdown,
    pub eir: f64,
    /// Batch-mean gate per expert.
    pub importance: Vec<f64>,
    /// Number of batch samples routed to each expert.
    pub counts: Vec<usize>,
    /// Batch-mean gate mass per group (patch, component, global).
    pub group_gate_mass: [f64; 3],
}

/// One expert's graph over the batch with its per-sample loss (`B×1`) and
/// representation (`B×D`) nodes.
pub(crate) struct ExpertPass {
    pub graph: Graph,
    pub loss: Var,
    pub rep: Var,
}

/// Forward state of one training step. The head graph holds routing and the
/// loss terms; each expert has its own graph so experts can run in parallel.
pub(crate) struct Forward {
    pub head: Graph,
    pub passes: Vec<ExpertPass>,
    pub logits: Var,
    pub gates_var: Var,
    pub gates: Mat,
    pub stats: BatchRoutingStats,
}

/// Head-graph nodes of the total objective.
pub(crate) struct Objective {
    pub total: Var,
    pub reconstruction: Var,
    pub esb_breakdown: EsbBreakdown,
    pub eir: Option<Var>,
    pub loss_matrix: Var,
    pub reps: Vec<Var>,
}

fn segments_for(sizes: impl Iterator<Item = usize>) -> Arc<[Range<usize>]> {
    let mut off = 0;
    sizes
        .map(|n| {
            let r = off..off + n;
            off += n;
            r
        })
        .collect::<Vec<_>>()
        .into()
}

fn stack(mats: &[&Mat]) -> Mat {
    let views: Vec<_> = mats.iter().map(|m| m.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("uniform widths")
}

impl Model {
    /// Route the batch and run every expert on it.
    pub(crate) fn forward(&self, data: &[PreparedSample], plan: &StepPlan, config: &TrainConfig) -> Result<Forward> {
        let batch: Vec<&PreparedSample> = plan.batch.iter().map(|&i| &data[i]).collect();
        if let Some(s) = batch.iter().find(|s| !s.normal) {
            return Err(Error::AnomalousTrainingSample(s.sample_id.clone()));
        }
        let b = batch.len();
        let n_exp = self.experts.len();

        let mut head = Graph::new();
        let cls = Mat::from_shape_fn((b, self.dim), |(i, d)| batch[i].cls[d]);
        let cls = head.constant(cls);
        let w = head.param(&self.store, self.router.gate);
        let logits = head.matmul_bt(cls, w);
        let selections: Vec<Vec<usize>> = head
            .value(logits)
            .rows()
            .into_iter()
            .map(|r| self.router.select(r.as_slice().expect("contiguous")))
            .collect();
        let mask = selection_mask(&selections, n_exp);
        let gates_var = head.masked_softmax(logits, Arc::new(mask.clone()));
        let gates = head.value(gates_var).clone();

        let patch_segments = segments_for(batch.iter().map(|s| s.target.nrows()));
        let comp_segments = segments_for(batch.iter().map(|s| s.pooled.embeddings.nrows()));
        let clean = stack(&batch.iter().map(|s| &s.target).collect::<Vec<_>>());
        let pooled = stack(&batch.iter().map(|s| &s.pooled.embeddings).collect::<Vec<_>>());
        let corrupted = stack(&plan.corrupted.iter().collect::<Vec<_>>());

        let passes = self
            .experts
            .experts
            .par_iter()
            .map(|e| {
                let input = match e.group() {
                    ExpertGroup::Patch => BatchInput {
                        input: corrupted.clone(),
                        target: clean.clone(),
                        segments: patch_segments.clone(),
                    },
                    ExpertGroup::Component => BatchInput {
                        input: pooled.clone(),
                        target: pooled.clone(),
                        segments: comp_segments.clone(),
                    },
                    ExpertGroup::Global => BatchInput {
                        input: clean.clone(),
                        target: clean.clone(),
                        segments: patch_segments.clone(),
                    },
                };
                let mut graph = Graph::new();
                let out = e.forward_batch(&mut graph, &self.store, &input, Bind::Train);
                ExpertPass {
                    graph,
                    loss: out.loss,
                    rep: out.representation,
                }
            })
            .collect();

        let capacity = default_capacity(b, self.router.top_k, n_exp, config.capacity_factor);
        let stats = batch_stats(&gates, &selections, capacity);
        Ok(Forward {
            head,
            passes,
            logits,
            gates_var,
            gates,
            stats,
        })
    }

    /// Detached representation of every expert, one `B×D` matrix each.
    pub(crate) fn representations(fwd: &Forward) -> Vec<Mat> {
        fwd.passes.iter().map(|p| p.graph.value(p.rep).clone()).collect()
    }

    /// Assemble the total objective on the head graph from the expert outputs.
    pub(crate) fn objective(&self, fwd: &mut Forward, plan: &StepPlan, config: &TrainConfig) -> Result<Objective> {
        let g = &mut fwd.head;
        let b = fwd.gates.nrows();
        let losses: Vec<_> = fwd.passes.iter().map(|p| p.graph.value(p.loss).view()).collect();
        let loss_matrix = ndarray::concatenate(Axis(1), &losses).map_err(|e| Error::ShapeMismatch(e.to_string()))?;
        let loss_matrix = g.input(loss_matrix);
        let reps: Vec<Var> = fwd.passes.iter().map(|p| g.input(p.graph.value(p.rep).clone())).collect();

        let weights = if config.freeze_gates {
            g.constant(fwd.gates.clone())
        } else {
            fwd.gates_var
        };
        let weighted = g.mul(weights, loss_matrix);
        let summed = g.sum(weighted);
        let reconstruction = g.scale(summed, 1.0 / b as f64);

        let (esb, esb_breakdown) = esb_loss_graph(g, fwd.logits, fwd.gates_var, &fwd.stats, config.esb);
        let esb = g.scale(esb, config.lambda_esb);
        let mut total = g.add(reconstruction, esb);
        let eir = self.eir.loss(g, &reps, &plan.perms);
        if let Some(e) = eir {
            let we = g.scale(e, config.lambda_eir);
            total = g.add(total, we);
        }
        Ok(Objective {
            total,
            reconstruction,
            esb_breakdown,
            eir,
            loss_matrix,
            reps,
        })
    }

    /// Gradient of the total objective for every trainable parameter: router
    /// first, then each expert in order.
    pub(crate) fn gradients(&self, fwd: &Forward, obj: &Objective) -> Vec<(ParamId, Mat)> {
        let head = fwd.head.backward_scalar(obj.total);
        let mut grads = head.params(&fwd.head);
        let d_loss = head.wrt(obj.loss_matrix).cloned();
        let expert_grads: Vec<Vec<(ParamId, Mat)>> = fwd
            .passes
            .par_iter()
            .enumerate()
            .map(|(j, p)| {
                let mut seeds = Vec::with_capacity(2);
                if let Some(d) = &d_loss {
                    seeds.push((p.loss, d.slice(s![.., j..j + 1]).to_owned()));
                }
                if let Some(d) = head.wrt(obj.reps[j]) {
                    seeds.push((p.rep, d.clone()));
                }
                p.graph.backward(&seeds).params(&p.graph)
            })
            .collect();
        grads.extend(expert_grads.into_iter().flatten());
        grads
    }
}

fn batch_stats(gates: &Mat, selections: &[Vec<usize>], capacity: usize) -> BatchRoutingStats {
    let b = gates.nrows();
    let n = gates.ncols();
    let mut counts = vec![0usize; n];
    for sel in selections {
        for &j in sel {
            counts[j] += 1;
        }
    }
    BatchRoutingStats {
        importance: gates.sum_axis(Axis(0)).mapv(|v| v / b as f64).to_vec(),
        counts,
        batch: b,
        capacity,
    }
}

/// Training state: model, optimizer, iteration counter and RNG.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub optimizer: Adam,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    pub score_stats: Option<ScoreStats>,
}

impl Trainer {
    /// Fit the knowledge base and initialize a fresh model for `data`.
    pub fn new(config: TrainConfig, data: &Dataset) -> Result<Self> {
        config.validate()?;
        let kb = fit_knowledge_base(data, config.kb, config.seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let model = Model::new(&config, data.dim, data.grid_h, data.grid_w, kb, &mut rng)?;
        let optimizer = Adam::new(config.optimizer, &model.store);
        Ok(Self {
            config,
            model,
            optimizer,
            iteration: 0,
            rng,
            score_stats: None,
        })
    }

    pub fn prepare_train(&self, data: &Dataset) -> Result<Vec<PreparedSample>> {
        data.train_samples().into_iter().map(|s| self.model.prepare(s)).collect()
    }

    pub fn prepare_test(&self, data: &Dataset) -> Result<Vec<PreparedSample>> {
        data.classes
            .iter()
            .flat_map(|c| c.test.iter())
            .map(|s| self.model.prepare(s))
            .collect()
    }

    /// Draw the batch, corruption and estimator permutations for the next step.
    pub fn plan_step(&mut self, pool: usize) -> Result<StepPlan> {
        let b = self.config.batch_size;
        if pool < b {
            return Err(Error::Config(format!("training pool of {pool} samples is smaller than batch_size {b}")));
        }
        let batch = sample_indices(&mut self.rng, pool, b).into_vec();
        Ok(StepPlan {
            batch,
            corrupted: Vec::new(),
            perms: self.model.eir.draw_permutations(b, &mut self.rng),
        })
    }

    /// One estimator update followed by one optimizer step on the total loss.
    pub fn step(&mut self, data: &[PreparedSample]) -> Result<StepMetrics> {
        let mut plan = self.plan_step(data.len())?;
        plan.corrupted = plan
            .batch
            .iter()
            .map(|&i| corrupt(&data[i].target, &self.config.corruption, &mut self.rng))
            .collect();

        let mut fwd = self.model.forward(data, &plan, &self.config)?;
        self.model.eir.update(&Model::representations(&fwd));
        let obj = self.model.objective(&mut fwd, &plan, &self.config)?;

        let g = &fwd.head;
        let total_value = g.scalar(obj.total);
        let metrics = StepMetrics {
            iteration: self.iteration,
            total: total_value,
            reconstruction: g.scalar(obj.reconstruction),
            esb: obj.esb_breakdown,
            eir: obj.eir.map_or(0.0, |e| g.scalar(e)),
            importance: fwd.stats.importance.clone(),
            counts: fwd.stats.counts.clone(),
            group_gate_mass: group_mass(&fwd.gates, &self.model.experts.groups()),
        };
        if !total_value.is_finite() {
            return Err(Error::NonFinite {
                iteration: self.iteration as usize,
                detail: format!(
                    "reconstruction {} esb {:?} eir {}",
                    metrics.reconstruction, metrics.esb, metrics.eir
                ),
            });
        }
        let grads = self.model.gradients(&fwd, &obj);
        self.optimizer.update(&mut self.model.store, &grads);
        self.iteration += 1;
        Ok(metrics)
    }

    /// Run until `config.iterations` steps have been taken in total.
    pub fn train(&mut self, data: &[PreparedSample], mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut out = Vec::new();
        while (self.iteration as usize) < self.config.iterations {
            let m = self.step(data)?;
            on_step(&m);
            out.push(m);
        }
        Ok(out)
    }

    /// Compute and store per-class score statistics from normal training samples.
    pub fn finalize_stats(&mut self, data: &[PreparedSample]) -> Result<&ScoreStats> {
        let mut per_class: BTreeMap<&str, usize> = BTreeMap::new();
        let cap = self.config.stats_samples;
        let chosen: Vec<&PreparedSample> = data
            .iter()
            .filter(|s| s.normal)
            .filter(|s| {
                let c = per_class.entry(s.class_id.as_str()).or_default();
                *c += 1;
                cap == 0 || *c <= cap
            })
            .collect();
        let stats = self.model.score_stats(&chosen)?;
        Ok(self.score_stats.insert(stats))
    }

    pub fn score(&self, sample: &PreparedSample, cfg: &AggregateConfig) -> Result<AnomalyResult> {
        let empty = ScoreStats::default();
        let stats = self.score_stats.as_ref().unwrap_or(&empty);
        self.model.score(sample, stats, cfg)
    }
}

fn group_mass(gates: &Mat, groups: &[ExpertGroup]) -> [f64; 3] {
    let b = gates.nrows() as f64;
    let mut m = [0.0; 3];
    for row in gates.rows() {
        for (j, &v) in row.iter().enumerate() {
            m[groups[j].index()] += v / b;
        }
    }
    m
}
