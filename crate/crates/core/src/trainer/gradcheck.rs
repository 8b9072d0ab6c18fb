use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Model, PreparedSample, StepPlan, TrainConfig};
use crate::component_kb::{assign_masks, masked_avg_pool, ComponentKb, KbConfig};
use crate::error::{Error, Result};
use crate::experts::{corrupt, ExpertConfig};
use crate::params::ParamStore;
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub dim: usize,
    pub grid: usize,
    pub experts_per_group: usize,
    /// `0` means all experts.
    pub top_k: usize,
    pub batch: usize,
    pub seed: u64,
    /// Central-difference step.
    pub step: f64,
    pub tolerance: f64,
    /// Standard deviation of the noise added to every parameter before checking.
    pub perturb: f64,
    pub lambda_esb: f64,
    pub lambda_eir: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            dim: 8,
            grid: 2,
            experts_per_group: 1,
            top_k: 3,
            batch: 4,
            seed: 0,
            step: 1e-5,
            tolerance: 1e-4,
            perturb: 0.1,
            lambda_esb: 0.01,
            lambda_eir: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub elements: usize,
    /// `‖a − n‖ / max(‖a‖, ‖n‖, floor)`.
    pub rel_err: f64,
    pub max_abs_err: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
    pub loss: f64,
    pub eir_pairs: usize,
}

/// Norm floor for the relative error of tensors with a vanishing gradient.
const NORM_FLOOR: f64 = 1e-8;

/// Compare reverse-mode gradients of the total loss with central differences
/// on a tiny randomly initialized model.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if cfg.batch < 2 || cfg.experts_per_group == 0 || cfg.dim < 2 {
        return Err(Error::Config("gradcheck needs batch ≥ 2, dim ≥ 2 and one expert per group".into()));
    }
    let n_exp = 3 * cfg.experts_per_group;
    let top_k = if cfg.top_k == 0 { n_exp } else { cfg.top_k };
    let config = TrainConfig {
        batch_size: cfg.batch,
        seed: cfg.seed,
        lambda_esb: cfg.lambda_esb,
        lambda_eir: cfg.lambda_eir,
        top_k,
        experts: ExpertConfig {
            n_patch: cfg.experts_per_group,
            n_component: cfg.experts_per_group,
            n_global: cfg.experts_per_group,
            component_bottleneck: (cfg.dim / 8).max(1),
            global_bottleneck: (cfg.dim / 4).max(1),
            ..Default::default()
        },
        kb: KbConfig {
            clusters: 2,
            ..Default::default()
        },
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.grid * cfg.grid;
    let targets: Vec<Mat> = (0..cfg.batch)
        .map(|_| Mat::from_shape_fn((n, cfg.dim), |_| StandardNormal.sample(&mut rng)))
        .collect();
    let mut kb = ComponentKb::default();
    kb.fit_class("c", &targets.iter().collect::<Vec<_>>(), config.kb, cfg.seed)?;
    let data: Vec<PreparedSample> = targets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let masks = assign_masks(t, &kb, "c")?;
            let pooled = masked_avg_pool(t, &masks);
            Ok(PreparedSample {
                sample_id: format!("s{i}"),
                class_id: "c".into(),
                kind: "good".into(),
                normal: true,
                target: t.clone(),
                cls: (0..cfg.dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
                masks,
                pooled,
                pixel_mask: None,
            })
        })
        .collect::<Result<_>>()?;

    let mut model = Model::new(&config, cfg.dim, cfg.grid, cfg.grid, kb, &mut rng)?;
    for id in model.store.ids().collect::<Vec<_>>() {
        model.store.get_mut(id).mapv_inplace(|v| {
            let z: f64 = StandardNormal.sample(&mut rng);
            v + cfg.perturb * z
        });
    }
    let plan = StepPlan {
        batch: (0..cfg.batch).collect(),
        corrupted: data.iter().map(|s| corrupt(&s.target, &config.corruption, &mut rng)).collect(),
        perms: model.eir.draw_permutations(cfg.batch, &mut rng),
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let m = Model {
            store: store.clone(),
            ..model.clone()
        };
        let mut fwd = m.forward(&data, &plan, &config)?;
        let obj = m.objective(&mut fwd, &plan, &config)?;
        Ok(fwd.head.scalar(obj.total))
    };
    let (loss, analytic) = {
        let mut fwd = model.forward(&data, &plan, &config)?;
        let obj = model.objective(&mut fwd, &plan, &config)?;
        (fwd.head.scalar(obj.total), model.gradients(&fwd, &obj))
    };

    let mut store = model.store.clone();
    let mut tensors = Vec::new();
    for (id, a) in analytic {
        let mut numeric = Mat::zeros(a.raw_dim());
        for r in 0..a.nrows() {
            for c in 0..a.ncols() {
                let orig = store.get(id)[[r, c]];
                store.get_mut(id)[[r, c]] = orig + cfg.step;
                let up = eval(&store)?;
                store.get_mut(id)[[r, c]] = orig - cfg.step;
                let down = eval(&store)?;
                store.get_mut(id)[[r, c]] = orig;
                numeric[[r, c]] = (up - down) / (2.0 * cfg.step);
            }
        }
        let diff = &a - &numeric;
        let norm = |m: &Mat| m.iter().map(|v| v * v).sum::<f64>().sqrt();
        let (na, nn, nd) = (norm(&a), norm(&numeric), norm(&diff));
        tensors.push(TensorCheck {
            name: store.name(id).to_string(),
            elements: a.len(),
            rel_err: nd / na.max(nn).max(NORM_FLOOR),
            max_abs_err: diff.iter().fold(0.0, |m, v| m.max(v.abs())),
            grad_norm: na,
        });
    }
    let max_rel_err = tensors.iter().fold(0.0, |m: f64, t| m.max(t.rel_err));
    Ok(GradcheckReport {
        passed: max_rel_err < cfg.tolerance && loss.is_finite(),
        max_rel_err,
        tolerance: cfg.tolerance,
        loss,
        eir_pairs: model.eir.pairs.len(),
        tensors,
    })
}
