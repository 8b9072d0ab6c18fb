//! Per-class component knowledge base: K-means centroids over normal patch
//! features, nearest-centroid component masks and masked average pooling.

use std::collections::BTreeMap;

use ndarray::Axis;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KMeansParams {
    pub clusters: usize,
    pub max_iter: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansParams {
    fn default() -> Self {
        Self {
            clusters: 8,
            max_iter: 100,
            tol: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansFit {
    pub centroids: Mat,
    /// Sum of squared distances to the final centroids.
    pub inertia: f64,
    pub iterations: usize,
    /// Assignment inertia at the start of every Lloyd iteration, then the final value.
    pub inertia_trace: Vec<f64>,
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per row (ties to the lowest index) and its squared distance.
pub fn nearest_centroids(points: &Mat, centroids: &Mat) -> (Vec<usize>, Vec<f64>) {
    let mut labels = Vec::with_capacity(points.nrows());
    let mut dists = Vec::with_capacity(points.nrows());
    let points = points.as_standard_layout();
    let centroids = centroids.as_standard_layout();
    let d = points.ncols().max(1);
    let cs = centroids.as_slice().expect("standard layout");
    for p in points.as_slice().expect("standard layout").chunks_exact(d) {
        let mut best = (0usize, f64::INFINITY);
        for (k, c) in cs.chunks_exact(d).enumerate() {
            let d: f64 = p.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        labels.push(best.0);
        dists.push(best.1);
    }
    (labels, dists)
}

fn kmeans_plus_plus(points: &Mat, k: usize, rng: &mut ChaCha8Rng) -> Mat {
    let m = points.nrows();
    let mut centroids = Mat::zeros((k, points.ncols()));
    let first = rng.gen_range(0..m);
    centroids.row_mut(0).assign(&points.row(first));
    let mut d2: Vec<f64> = points.rows().into_iter().map(|p| sq_dist(p, points.row(first))).collect();
    for c in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = m - 1;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 && target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            // Guard against landing on a zero-weight tail through rounding.
            if d2[chosen] == 0.0 {
                chosen = d2
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
            }
            chosen
        } else {
            rng.gen_range(0..m)
        };
        centroids.row_mut(c).assign(&points.row(pick));
        for (i, p) in points.rows().into_iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.row(c)));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
pub fn kmeans_fit(points: &Mat, params: KMeansParams) -> Result<KMeansFit> {
    let (m, k) = (points.nrows(), params.clusters);
    if k == 0 || m < k {
        return Err(Error::TooFewPoints {
            points: m,
            clusters: k,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut trace = Vec::new();
    let mut iterations = 0;
    for _ in 0..params.max_iter {
        iterations += 1;
        let (labels, dists) = nearest_centroids(points, &centroids);
        trace.push(dists.iter().sum());
        let mut sums = Mat::zeros(centroids.raw_dim());
        let mut counts = vec![0usize; k];
        for (p, &l) in points.rows().into_iter().zip(&labels) {
            let mut row = sums.row_mut(l);
            row += &p;
            counts[l] += 1;
        }
        let mut next = centroids.clone();
        let mut taken: Vec<usize> = Vec::new();
        for c in 0..k {
            if counts[c] > 0 {
                next.row_mut(c).assign(&(&sums.row(c) / counts[c] as f64));
            } else {
                // Re-seed an empty cluster at the farthest point not yet used.
                let far = dists
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| !taken.contains(i))
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                taken.push(far);
                next.row_mut(c).assign(&points.row(far));
            }
        }
        let shift = centroids
            .rows()
            .into_iter()
            .zip(next.rows())
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        if shift < params.tol {
            break;
        }
    }
    let (_, dists) = nearest_centroids(points, &centroids);
    let inertia = dists.iter().sum();
    trace.push(inertia);
    Ok(KMeansFit {
        centroids,
        inertia,
        iterations,
        inertia_trace: trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassKb {
    /// `K_c×D` centroids.
    #[serde(skip)]
    pub centroids: Mat,
    pub inertia: f64,
    pub iterations: usize,
}

/// Component knowledge base keyed by class id.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComponentKb {
    pub classes: BTreeMap<String, ClassKb>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbConfig {
    pub clusters: usize,
    pub max_points: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KbConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            max_points: 100_000,
            max_iter: 100,
            tol: 1e-6,
        }
    }
}

impl ComponentKb {
    /// Fit one class from its normal training targets (each `N×D`).
    pub fn fit_class(&mut self, class_id: &str, targets: &[&Mat], cfg: KbConfig, seed: u64) -> Result<&ClassKb> {
        let total: usize = targets.iter().map(|t| t.nrows()).sum();
        let dim = targets.first().map_or(0, |t| t.ncols());
        let views: Vec<_> = targets.iter().map(|t| t.view()).collect();
        let all = if views.is_empty() {
            Mat::zeros((0, dim))
        } else {
            ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch(e.to_string()))?
        };
        let points = if total > cfg.max_points {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6b62_7375_6273_616d);
            let mut idx = sample(&mut rng, total, cfg.max_points).into_vec();
            idx.sort_unstable();
            all.select(Axis(0), &idx)
        } else {
            all
        };
        let fit = kmeans_fit(
            &points,
            KMeansParams {
                clusters: cfg.clusters,
                max_iter: cfg.max_iter,
                tol: cfg.tol,
                seed,
            },
        )?;
        self.classes.insert(
            class_id.to_string(),
            ClassKb {
                centroids: fit.centroids,
                inertia: fit.inertia,
                iterations: fit.iterations,
            },
        );
        Ok(&self.classes[class_id])
    }

    pub fn get(&self, class_id: &str) -> Result<&ClassKb> {
        self.classes
            .get(class_id)
            .ok_or_else(|| Error::UnknownClass(class_id.to_string()))
    }
}

/// Component id of every patch.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentMasks {
    pub assignment: Vec<usize>,
    pub components: usize,
}

impl ComponentMasks {
    pub fn cells(&self, component: usize) -> Vec<usize> {
        (0..self.assignment.len())
            .filter(|&i| self.assignment[i] == component)
            .collect()
    }
}

pub fn assign_masks(target: &Mat, kb: &ComponentKb, class_id: &str) -> Result<ComponentMasks> {
    let class = kb.get(class_id)?;
    if class.centroids.ncols() != target.ncols() {
        return Err(Error::DimMismatch(format!(
            "features have {} dims, knowledge base {}",
            target.ncols(),
            class.centroids.ncols()
        )));
    }
    let (assignment, _) = nearest_centroids(target, &class.centroids);
    Ok(ComponentMasks {
        assignment,
        components: class.centroids.nrows(),
    })
}

/// Mean embedding of every non-empty component.
#[derive(Clone, Debug, PartialEq)]
pub struct PooledComponents {
    /// Component ids in ascending order.
    pub ids: Vec<usize>,
    /// One row per entry of `ids`.
    pub embeddings: Mat,
}

pub fn masked_avg_pool(target: &Mat, masks: &ComponentMasks) -> PooledComponents {
    let mut sums = Mat::zeros((masks.components, target.ncols()));
    let mut counts = vec![0usize; masks.components];
    for (row, &c) in target.rows().into_iter().zip(&masks.assignment) {
        let mut s = sums.row_mut(c);
        s += &row;
        counts[c] += 1;
    }
    let ids: Vec<usize> = (0..masks.components).filter(|&c| counts[c] > 0).collect();
    let mut embeddings = Mat::zeros((ids.len(), target.ncols()));
    for (r, &c) in ids.iter().enumerate() {
        embeddings.row_mut(r).assign(&(&sums.row(c) / counts[c] as f64));
    }
    PooledComponents { ids, embeddings }
}

/// Paint every patch with the score of its component.
pub fn scatter_component_scores(scores: &BTreeMap<usize, f64>, masks: &ComponentMasks) -> Result<Vec<f64>> {
    masks
        .assignment
        .iter()
        .map(|c| scores.get(c).copied().ok_or(Error::MissingScore(*c)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn kb_with(centroids: Mat) -> ComponentKb {
        let mut kb = ComponentKb::default();
        kb.classes.insert(
            "c".into(),
            ClassKb {
                centroids,
                inertia: 0.0,
                iterations: 0,
            },
        );
        kb
    }

    #[test]
    fn identical_points_single_cluster() {
        let pts = Mat::from_shape_fn((10, 3), |(_, j)| j as f64 + 0.5);
        let fit = kmeans_fit(&pts, KMeansParams { clusters: 1, ..Default::default() }).unwrap();
        assert_eq!(fit.inertia, 0.0);
        assert_eq!(fit.centroids.row(0).to_vec(), vec![0.5, 1.5, 2.5]);
    }

    #[test]
    fn one_cluster_per_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = Mat::from_shape_fn((7, 2), |_| StandardNormal.sample(&mut rng));
        let fit = kmeans_fit(&pts, KMeansParams { clusters: 7, ..Default::default() }).unwrap();
        assert_eq!(fit.inertia, 0.0);
    }

    #[test]
    fn too_few_points() {
        let pts = Mat::zeros((2, 2));
        assert!(matches!(
            kmeans_fit(&pts, KMeansParams { clusters: 3, ..Default::default() }),
            Err(Error::TooFewPoints { points: 2, clusters: 3 })
        ));
    }

    #[test]
    fn inertia_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = Mat::from_shape_fn((300, 4), |_| StandardNormal.sample(&mut rng));
        for seed in 0..5 {
            let fit = kmeans_fit(&pts, KMeansParams { clusters: 6, seed, ..Default::default() }).unwrap();
            for w in fit.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.inertia_trace);
            }
        }
    }

    #[test]
    fn patches_at_centroids_map_to_themselves() {
        let c = Mat::from_shape_vec((3, 2), vec![0.0, 0.0, 5.0, 0.0, 0.0, 5.0]).unwrap();
        let kb = kb_with(c.clone());
        let masks = assign_masks(&c, &kb, "c").unwrap();
        assert_eq!(masks.assignment, vec![0, 1, 2]);
        assert!(matches!(assign_masks(&c, &kb, "other"), Err(Error::UnknownClass(_))));
    }

    #[test]
    fn single_centroid_takes_everything() {
        let kb = kb_with(Mat::zeros((1, 2)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = Mat::from_shape_fn((9, 2), |_| StandardNormal.sample(&mut rng));
        assert!(assign_masks(&t, &kb, "c").unwrap().assignment.iter().all(|&a| a == 0));
    }

    #[test]
    fn assignment_ties_go_low() {
        let kb = kb_with(Mat::from_shape_vec((2, 1), vec![-1.0, 1.0]).unwrap());
        let t = Mat::zeros((1, 1));
        assert_eq!(assign_masks(&t, &kb, "c").unwrap().assignment, vec![0]);
    }

    #[test]
    fn pooling_cases() {
        let t = Mat::from_elem((4, 3), 2.5);
        let masks = ComponentMasks {
            assignment: vec![0, 1, 1, 3],
            components: 4,
        };
        let pooled = masked_avg_pool(&t, &masks);
        assert_eq!(pooled.ids, vec![0, 1, 3]);
        assert!(pooled.embeddings.iter().all(|&v| v == 2.5));

        let t = Mat::from_shape_vec((3, 2), vec![1.0, 2.0, 3.0, 6.0, -1.0, 0.5]).unwrap();
        let masks = ComponentMasks {
            assignment: vec![0, 0, 1],
            components: 2,
        };
        let pooled = masked_avg_pool(&t, &masks);
        assert_eq!(pooled.embeddings.row(0).to_vec(), vec![2.0, 4.0]);
        assert_eq!(pooled.embeddings.row(1).to_vec(), vec![-1.0, 0.5]);
    }

    #[test]
    fn scatter_cases() {
        let masks = ComponentMasks {
            assignment: vec![0, 0, 0],
            components: 1,
        };
        let s = BTreeMap::from([(0, 0.7)]);
        assert_eq!(scatter_component_scores(&s, &masks).unwrap(), vec![0.7; 3]);

        let masks = ComponentMasks {
            assignment: vec![1, 0, 1, 0],
            components: 2,
        };
        let s = BTreeMap::from([(0, 0.0), (1, 1.0)]);
        assert_eq!(scatter_component_scores(&s, &masks).unwrap(), vec![1.0, 0.0, 1.0, 0.0]);

        let missing = BTreeMap::from([(0, 0.0)]);
        assert!(matches!(scatter_component_scores(&missing, &masks), Err(Error::MissingScore(1))));
    }
}
