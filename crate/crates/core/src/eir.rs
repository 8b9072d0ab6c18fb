//! Expert-independence regularization via a contrastive upper bound on
//! mutual information (CLUB).
//!
//! For a pair of experts `(j, k)` a variational network `q(z_k | z_j)` with a
//! diagonal Gaussian output is fit to the current representations. The bound
//! is the mean log-likelihood of matched pairs minus that of shuffled pairs.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertGroup;
use crate::nn::{Bind, Linear};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::{Graph, Mat, Var};

/// Symmetric clamp on the predicted log-variance.
pub const LOGVAR_CLAMP: f64 = 10.0;

/// Variational conditional `q(y | x) = N(mu(x), diag(exp(logvar(x))))`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClubNet {
    mu_hidden: Linear,
    mu_out: Linear,
    logvar_hidden: Linear,
    logvar_out: Linear,
    pub dim: usize,
}

impl ClubNet {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, dim: usize, hidden: usize, rng: &mut R) -> Self {
        Self {
            mu_hidden: Linear::new(store, &format!("{name}.mu_hidden"), dim, hidden, rng),
            mu_out: Linear::new(store, &format!("{name}.mu_out"), hidden, dim, rng),
            logvar_hidden: Linear::new(store, &format!("{name}.logvar_hidden"), dim, hidden, rng),
            logvar_out: Linear::new(store, &format!("{name}.logvar_out"), hidden, dim, rng),
            dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Bind) -> (Var, Var) {
        let h = self.mu_hidden.forward(g, store, x, mode);
        let h = g.gelu(h);
        let mu = self.mu_out.forward(g, store, h, mode);
        let h = self.logvar_hidden.forward(g, store, x, mode);
        let h = g.gelu(h);
        let lv = self.logvar_out.forward(g, store, h, mode);
        let lv = g.clamp(lv, -LOGVAR_CLAMP, LOGVAR_CLAMP);
        (mu, lv)
    }

    /// Per-row `log q(y | x)`, `m×1`.
    pub fn loglik(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var, mode: Bind) -> Var {
        let (mu, lv) = self.forward(g, store, x, mode);
        g.gaussian_loglik(y, mu, lv)
    }

    /// CLUB estimate with negatives formed by pairing `x_i` with `y_perm[i]`.
    pub fn estimate(&self, g: &mut Graph, store: &ParamStore, x: Var, y: Var, perm: &[usize], mode: Bind) -> Var {
        let pos = self.loglik(g, store, x, y, mode);
        let pos = g.mean(pos);
        let index: Vec<Option<usize>> = perm.iter().map(|&p| Some(p)).collect();
        let shuffled = g.gather_rows(y, index.into());
        let neg = self.loglik(g, store, x, shuffled, mode);
        let neg = g.mean(neg);
        g.sub(pos, neg)
    }

    pub fn estimate_value(&self, store: &ParamStore, x: &Mat, y: &Mat, perm: &[usize]) -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let e = self.estimate(&mut g, store, xv, yv, perm, Bind::Frozen);
        g.scalar(e)
    }

    /// One maximum-likelihood step on matched pairs. Returns the negative
    /// mean log-likelihood before the update.
    pub fn fit_step(&self, store: &mut ParamStore, opt: &mut Adam, x: &Mat, y: &Mat) -> f64 {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let ll = self.loglik(&mut g, store, xv, yv, Bind::Train);
        let m = g.mean(ll);
        let loss = g.scale(m, -1.0);
        let grads = g.backward_scalar(loss).params(&g);
        opt.update(store, &grads);
        g.scalar(loss)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EirConfig {
    /// Hidden width of the estimator networks; `0` means `D`.
    pub hidden: usize,
    pub lr: f64,
    /// Estimator updates per training step.
    pub updates_per_step: usize,
}

impl Default for EirConfig {
    fn default() -> Self {
        Self {
            hidden: 0,
            lr: 1e-3,
            updates_per_step: 1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClubPair {
    pub j: usize,
    pub k: usize,
    pub net: ClubNet,
}

/// One estimator per unordered expert pair inside each group.
#[derive(Clone, Debug)]
pub struct EirEstimator {
    pub config: EirConfig,
    pub pairs: Vec<ClubPair>,
    pub store: ParamStore,
    pub optimizer: Adam,
}

impl EirEstimator {
    pub fn new<R: Rng + ?Sized>(groups: &[ExpertGroup], dim: usize, config: EirConfig, rng: &mut R) -> Result<Self> {
        if !(config.lr.is_finite() && config.lr >= 0.0) {
            return Err(Error::Config(format!("estimator lr {} must be finite and ≥ 0", config.lr)));
        }
        let hidden = if config.hidden == 0 { dim } else { config.hidden };
        let mut store = ParamStore::new();
        let mut pairs = Vec::new();
        for j in 0..groups.len() {
            for k in j + 1..groups.len() {
                if groups[j] == groups[k] {
                    let net = ClubNet::new(&mut store, &format!("club{j}_{k}"), dim, hidden, rng);
                    pairs.push(ClubPair { j, k, net });
                }
            }
        }
        let optimizer = Adam::new(AdamConfig::plain(config.lr), &store);
        Ok(Self {
            config,
            pairs,
            store,
            optimizer,
        })
    }

    /// Fit every estimator on detached representations, one `B×D` matrix per expert.
    pub fn update(&mut self, reps: &[Mat]) {
        for _ in 0..self.config.updates_per_step {
            let mut grads = Vec::new();
            for p in &self.pairs {
                let mut g = Graph::new();
                let x = g.constant(reps[p.j].clone());
                let y = g.constant(reps[p.k].clone());
                let ll = p.net.loglik(&mut g, &self.store, x, y, Bind::Train);
                let m = g.mean(ll);
                let loss = g.scale(m, -1.0);
                grads.extend(g.backward_scalar(loss).params(&g));
            }
            if !grads.is_empty() {
                self.optimizer.update(&mut self.store, &grads);
            }
        }
    }

    /// One random permutation of `batch` rows per pair.
    pub fn draw_permutations<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
        self.pairs
            .iter()
            .map(|_| {
                let mut p: Vec<usize> = (0..batch).collect();
                p.shuffle(rng);
                p
            })
            .collect()
    }

    /// Sum of pairwise estimates, each clipped below at zero, with the
    /// estimators held fixed. `None` when there are no pairs.
    pub fn loss(&self, g: &mut Graph, reps: &[Var], perms: &[Vec<usize>]) -> Option<Var> {
        let mut total: Option<Var> = None;
        for (p, perm) in self.pairs.iter().zip(perms) {
            let e = p.net.estimate(g, &self.store, reps[p.j], reps[p.k], perm, Bind::Frozen);
            let e = g.clamp(e, 0.0, f64::INFINITY);
            total = Some(match total {
                Some(t) => g.add(t, e),
                None => e,
            });
        }
        total
    }

    pub fn loss_value(&self, reps: &[Mat], perms: &[Vec<usize>]) -> f64 {
        self.pairs
            .iter()
            .zip(perms)
            .map(|(p, perm)| p.net.estimate_value(&self.store, &reps[p.j], &reps[p.k], perm).max(0.0))
            .sum()
    }
}

/// Closed-form mutual information of a bivariate Gaussian per dimension,
/// summed over `dims` independent coordinates.
pub fn gaussian_mi(rho: f64, dims: usize) -> f64 {
    -0.5 * (1.0 - rho * rho).ln() * dims as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn loglik_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let net = ClubNet::new(&mut store, "c", 3, 4, &mut rng);
        let x = Mat::from_shape_fn((5, 3), |_| StandardNormal.sample(&mut rng));
        let y = Mat::from_shape_fn((5, 3), |_| StandardNormal.sample(&mut rng));
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let yv = g.constant(y.clone());
        let (mu, lv) = net.forward(&mut g, &store, xv, Bind::Frozen);
        let ll = net.loglik(&mut g, &store, xv, yv, Bind::Frozen);
        let (mu, lv, ll) = (g.value(mu), g.value(lv), g.value(ll));
        for i in 0..5 {
            let mut expected = 0.0;
            for d in 0..3 {
                let var = lv[[i, d]].exp();
                expected += -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (y[[i, d]] - mu[[i, d]]).powi(2) / var);
            }
            assert!((ll[[i, 0]] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_permutation_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let net = ClubNet::new(&mut store, "c", 2, 3, &mut rng);
        let x = Mat::from_shape_fn((4, 2), |_| StandardNormal.sample(&mut rng));
        let y = Mat::from_shape_fn((4, 2), |_| StandardNormal.sample(&mut rng));
        assert_eq!(net.estimate_value(&store, &x, &y, &[0, 1, 2, 3]), 0.0);
    }

    #[test]
    fn pairs_stay_within_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let groups = [
            ExpertGroup::Patch,
            ExpertGroup::Patch,
            ExpertGroup::Component,
            ExpertGroup::Global,
            ExpertGroup::Global,
            ExpertGroup::Global,
        ];
        let est = EirEstimator::new(&groups, 4, EirConfig::default(), &mut rng).unwrap();
        let pairs: Vec<(usize, usize)> = est.pairs.iter().map(|p| (p.j, p.k)).collect();
        assert_eq!(pairs, vec![(0, 1), (3, 4), (3, 5), (4, 5)]);
    }

    #[test]
    fn fitting_raises_likelihood_on_dependent_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let net = ClubNet::new(&mut store, "c", 2, 8, &mut rng);
        let mut opt = Adam::new(AdamConfig::plain(1e-2), &store);
        let x = Mat::from_shape_fn((256, 2), |_| StandardNormal.sample(&mut rng));
        let y = &x * 0.9 + Mat::from_shape_fn((256, 2), |_| { let z: f64 = StandardNormal.sample(&mut rng); 0.3 * z });
        let first = net.fit_step(&mut store, &mut opt, &x, &y);
        let mut last = first;
        for _ in 0..300 {
            last = net.fit_step(&mut store, &mut opt, &x, &y);
        }
        assert!(last < first - 1.0, "{first} → {last}");
        let mut perm: Vec<usize> = (0..256).collect();
        perm.shuffle(&mut rng);
        assert!(net.estimate_value(&store, &x, &y, &perm) > 0.5);
    }

    #[test]
    fn pair_estimates_are_clipped_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let groups = [ExpertGroup::Patch; 4];
        let est = EirEstimator::new(&groups, 3, EirConfig::default(), &mut rng).unwrap();
        for _ in 0..20 {
            let reps: Vec<Mat> = (0..4).map(|_| Mat::from_shape_fn((6, 3), |_| StandardNormal.sample(&mut rng))).collect();
            let perms = est.draw_permutations(6, &mut rng);
            let raw: Vec<f64> = est
                .pairs
                .iter()
                .zip(&perms)
                .map(|(p, perm)| p.net.estimate_value(&est.store, &reps[p.j], &reps[p.k], perm))
                .collect();
            let expected: f64 = raw.iter().map(|e| e.max(0.0)).sum();
            let value = est.loss_value(&reps, &perms);
            assert_eq!(value, expected);
            let mut g = Graph::new();
            let vars: Vec<Var> = reps.iter().map(|r| g.constant(r.clone())).collect();
            let l = est.loss(&mut g, &vars, &perms).unwrap();
            assert!((g.scalar(l) - value).abs() < 1e-12);
            assert!(value >= 0.0);
        }
    }

    #[test]
    fn closed_form_mi() {
        assert_eq!(gaussian_mi(0.0, 4), 0.0);
        assert!((gaussian_mi(0.9, 1) - 0.830_366).abs() < 1e-5);
    }
}
