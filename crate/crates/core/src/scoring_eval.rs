//! Score-map aggregation, rank-based AUROC and evaluation reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::ExpertGroup;

/// Standard deviations at or below this are not used for standardization.
pub const STD_FLOOR: f64 = 1e-12;

/// Per-group score maps of one sample before aggregation.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupMaps {
    /// Indexed by [`ExpertGroup::index`]; `None` when no expert of the group was activated.
    pub maps: [Option<Vec<f64>>; 3],
    /// Sum of the gates of the activated experts of each group.
    pub gate_mass: [f64; 3],
    /// Full gate vector over all experts.
    pub gates: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupStat {
    pub mean: f64,
    pub std: f64,
    pub count: u64,
}

/// Per-class, per-group statistics of map values on normal training samples.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ScoreStats {
    pub classes: BTreeMap<String, [Option<GroupStat>; 3]>,
}

impl ScoreStats {
    pub fn class(&self, class_id: &str) -> Option<&[Option<GroupStat>; 3]> {
        self.classes.get(class_id)
    }
}

/// Streaming mean/variance accumulator.
#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn finish(self) -> Option<GroupStat> {
        (self.n > 0).then(|| GroupStat {
            mean: self.mean,
            std: (self.m2 / self.n as f64).sqrt(),
            count: self.n,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct ScoreStatsBuilder {
    acc: BTreeMap<String, [Welford; 3]>,
}

impl ScoreStatsBuilder {
    pub fn push_map(&mut self, class_id: &str, group: ExpertGroup, map: &[f64]) {
        let entry = self.acc.entry(class_id.to_string()).or_default();
        for &v in map {
            entry[group.index()].push(v);
        }
    }

    pub fn has(&self, class_id: &str, group: ExpertGroup) -> bool {
        self.acc.get(class_id).is_some_and(|a| a[group.index()].n > 0)
    }

    pub fn finish(self) -> ScoreStats {
        ScoreStats {
            classes: self
                .acc
                .into_iter()
                .map(|(k, a)| (k, [a[0].finish(), a[1].finish(), a[2].finish()]))
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    /// Weight each group by its gate mass, renormalized over present groups.
    Gate,
    Uniform,
    /// Per-patch maximum over present groups.
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageStat {
    Max,
    /// Mean of the top `top_fraction` of map values.
    Top,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregateConfig {
    pub standardize: bool,
    pub weighting: Weighting,
    pub image_stat: ImageStat,
    pub top_fraction: f64,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            standardize: true,
            weighting: Weighting::Gate,
            image_stat: ImageStat::Top,
            top_fraction: 0.01,
        }
    }
}

impl AggregateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.top_fraction > 0.0 && self.top_fraction <= 1.0) {
            return Err(Error::Config(format!("top_fraction {} outside (0, 1]", self.top_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyResult {
    /// Raw group maps, indexed by [`ExpertGroup::index`].
    pub group_maps: [Option<Vec<f64>>; 3],
    pub gates: Vec<f64>,
    pub gate_mass: [f64; 3],
    /// Weight given to each group in the aggregate.
    pub weights: [f64; 3],
    pub map: Vec<f64>,
    pub image_score: f64,
}

/// Mean of the `ceil(q·n)` largest values, or the maximum.
pub fn image_statistic(map: &[f64], stat: ImageStat, top_fraction: f64) -> f64 {
    match stat {
        ImageStat::Max => map.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ImageStat::Top => {
            let mut v = map.to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            let n = ((top_fraction * v.len() as f64).ceil() as usize).clamp(1, v.len().max(1));
            v[..n].iter().sum::<f64>() / n as f64
        }
    }
}

/// Combine group maps into one map and an image score.
pub fn aggregate(parts: &GroupMaps, stats: Option<&[Option<GroupStat>; 3]>, cfg: &AggregateConfig) -> Result<AnomalyResult> {
    let present: Vec<usize> = (0..3).filter(|&g| parts.maps[g].is_some()).collect();
    let Some(&first) = present.first() else {
        return Err(Error::NoMaps);
    };
    let len = parts.maps[first].as_ref().map_or(0, Vec::len);
    let mut standardized: [Option<Vec<f64>>; 3] = [None, None, None];
    for &g in &present {
        let raw = parts.maps[g].as_ref().expect("present");
        if raw.len() != len {
            return Err(Error::ShapeMismatch(format!("group maps of length {} and {len}", raw.len())));
        }
        let stat = stats.and_then(|s| s[g]).filter(|s| cfg.standardize && s.std > STD_FLOOR);
        standardized[g] = Some(match stat {
            Some(s) => raw.iter().map(|v| (v - s.mean) / s.std).collect(),
            None => raw.clone(),
        });
    }
    let mut weights = [0.0; 3];
    let uniform = 1.0 / present.len() as f64;
    match cfg.weighting {
        Weighting::Gate => {
            let mass: f64 = present.iter().map(|&g| parts.gate_mass[g]).sum();
            for &g in &present {
                weights[g] = if mass > 0.0 { parts.gate_mass[g] / mass } else { uniform };
            }
        }
        Weighting::Uniform | Weighting::Max => {
            for &g in &present {
                weights[g] = uniform;
            }
        }
    }
    let map: Vec<f64> = (0..len)
        .map(|i| {
            let vals = present.iter().map(|&g| (g, standardized[g].as_ref().expect("present")[i]));
            match cfg.weighting {
                Weighting::Max => vals.map(|(_, v)| v).fold(f64::NEG_INFINITY, f64::max),
                _ => vals.map(|(g, v)| weights[g] * v).sum(),
            }
        })
        .collect();
    let image_score = image_statistic(&map, cfg.image_stat, cfg.top_fraction);
    Ok(AnomalyResult {
        group_maps: parts.maps.clone(),
        gates: parts.gates.clone(),
        gate_mass: parts.gate_mass,
        weights,
        map,
        image_score,
    })
}

/// Rank-based AUROC with average ranks for ties. `labels[i]` is true for positives.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j share their average.
        let avg = (i + 1 + j) as f64 / 2.0;
        let tied_pos = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum += avg * tied_pos as f64;
        i = j;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos as f64 * neg as f64))
}

/// One scored test sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredSample {
    pub sample_id: String,
    pub class_id: String,
    pub kind: String,
    pub normal: bool,
    pub result: AnomalyResult,
    /// Ground-truth patch mask; `None` when unavailable.
    pub mask: Option<Vec<bool>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: String,
    pub n_normal: usize,
    pub n_anomalous: usize,
    pub image_auroc: Option<f64>,
    pub pixel_auroc: Option<f64>,
    /// Image AUROC of normals against each anomaly kind.
    pub per_kind: BTreeMap<String, f64>,
    /// Mean gate mass per group (patch, component, global).
    pub gate_mass: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub classes: Vec<ClassReport>,
    pub mean_image_auroc: Option<f64>,
    pub mean_pixel_auroc: Option<f64>,
    /// Per-kind image AUROC averaged over classes.
    pub per_kind: BTreeMap<String, f64>,
    pub gate_mass: [f64; 3],
    /// Mean gate of every expert over all test samples.
    pub expert_usage: Vec<f64>,
}

fn mean(v: &[f64]) -> Option<f64> {
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn class_report(class_id: &str, samples: &[&ScoredSample]) -> Result<ClassReport> {
    let labels: Vec<bool> = samples.iter().map(|s| !s.normal).collect();
    let scores: Vec<f64> = samples.iter().map(|s| s.result.image_score).collect();
    let n_anomalous = labels.iter().filter(|&&l| l).count();
    let image_auroc = match auroc(&scores, &labels) {
        Ok(a) => Some(a),
        Err(Error::SingleClass) => {
            log::warn!("class {class_id}: test split lacks one label, image AUROC omitted");
            None
        }
        Err(e) => return Err(e),
    };

    let missing_mask = samples.iter().any(|s| !s.normal && s.mask.is_none());
    let pixel_auroc = if missing_mask {
        log::warn!("class {class_id}: anomalous sample without mask, pixel AUROC omitted");
        None
    } else {
        let mut ps = Vec::new();
        let mut pl = Vec::new();
        for s in samples {
            ps.extend_from_slice(&s.result.map);
            match &s.mask {
                Some(m) => {
                    if m.len() != s.result.map.len() {
                        return Err(Error::ShapeMismatch(format!(
                            "sample {}: mask of {} cells for a map of {}",
                            s.sample_id,
                            m.len(),
                            s.result.map.len()
                        )));
                    }
                    pl.extend_from_slice(m);
                }
                None => pl.extend(std::iter::repeat(false).take(s.result.map.len())),
            }
        }
        match auroc(&ps, &pl) {
            Ok(a) => Some(a),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        }
    };

    let mut per_kind = BTreeMap::new();
    let kinds: std::collections::BTreeSet<&str> =
        samples.iter().filter(|s| !s.normal).map(|s| s.kind.as_str()).collect();
    for kind in kinds {
        let subset: Vec<&&ScoredSample> = samples.iter().filter(|s| s.normal || s.kind == kind).collect();
        let sc: Vec<f64> = subset.iter().map(|s| s.result.image_score).collect();
        let lb: Vec<bool> = subset.iter().map(|s| !s.normal).collect();
        if let Ok(a) = auroc(&sc, &lb) {
            per_kind.insert(kind.to_string(), a);
        }
    }

    let mut gate_mass = [0.0; 3];
    for s in samples {
        for (g, w) in gate_mass.iter_mut().zip(s.result.gate_mass) {
            *g += w / samples.len() as f64;
        }
    }
    Ok(ClassReport {
        class_id: class_id.to_string(),
        n_normal: samples.len() - n_anomalous,
        n_anomalous,
        image_auroc,
        pixel_auroc,
        per_kind,
        gate_mass,
    })
}

/// Build the evaluation report. Samples are grouped by class in order of first appearance.
pub fn build_report(samples: &[ScoredSample], group_of_expert: &[ExpertGroup]) -> Result<EvalReport> {
    let mut order: Vec<&str> = Vec::new();
    for s in samples {
        if !order.contains(&s.class_id.as_str()) {
            order.push(&s.class_id);
        }
    }
    let mut classes = Vec::new();
    for c in order {
        let subset: Vec<&ScoredSample> = samples.iter().filter(|s| s.class_id == c).collect();
        classes.push(class_report(c, &subset)?);
    }
    let image: Vec<f64> = classes.iter().filter_map(|c| c.image_auroc).collect();
    let pixel: Vec<f64> = classes.iter().filter_map(|c| c.pixel_auroc).collect();
    let mut by_kind: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in &classes {
        for (k, v) in &c.per_kind {
            by_kind.entry(k.clone()).or_default().push(*v);
        }
    }
    let n_exp = group_of_expert.len();
    let mut usage = vec![0.0; n_exp];
    let mut gate_mass = [0.0; 3];
    for s in samples {
        for (j, g) in s.result.gates.iter().enumerate().take(n_exp) {
            usage[j] += g / samples.len() as f64;
            gate_mass[group_of_expert[j].index()] += g / samples.len() as f64;
        }
    }
    Ok(EvalReport {
        classes,
        mean_image_auroc: mean(&image),
        mean_pixel_auroc: mean(&pixel),
        per_kind: by_kind
            .into_iter()
            .map(|(k, v)| (k, mean(&v).expect("non-empty")))
            .collect(),
        gate_mass,
        expert_usage: usage,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"))
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned plain-text table.
    pub fn to_table(&self) -> String {
        let kinds: Vec<&String> = self.per_kind.keys().collect();
        let mut header = vec!["class".to_string(), "image".into(), "pixel".into()];
        header.extend(kinds.iter().map(|k| k.to_string()));
        header.extend(["g_patch".into(), "g_comp".into(), "g_global".into()]);
        let mut rows = vec![header];
        for c in &self.classes {
            let mut r = vec![c.class_id.clone(), fmt_opt(c.image_auroc), fmt_opt(c.pixel_auroc)];
            r.extend(kinds.iter().map(|k| fmt_opt(c.per_kind.get(*k).copied())));
            r.extend(c.gate_mass.iter().map(|g| format!("{g:.3}")));
            rows.push(r);
        }
        let mut r = vec!["mean".to_string(), fmt_opt(self.mean_image_auroc), fmt_opt(self.mean_pixel_auroc)];
        r.extend(kinds.iter().map(|k| fmt_opt(self.per_kind.get(*k).copied())));
        r.extend(self.gate_mass.iter().map(|g| format!("{g:.3}")));
        rows.push(r);
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in rows {
            let line: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(i, cell)| {
                    if i == 0 {
                        format!("{cell:<w$}", w = widths[i])
                    } else {
                        format!("{cell:>w$}", w = widths[i])
                    }
                })
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
        }
        out
    }
}

/// Write a map as an 8-bit binary PGM, min-max scaled.
pub fn write_pgm(path: impl AsRef<Path>, map: &[f64], h: usize, w: usize) -> Result<()> {
    if map.len() != h * w {
        return Err(Error::ShapeMismatch(format!("map of {} values for a {h}x{w} grid", map.len())));
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(map.iter().map(|v| (((v - lo) / span) * 255.0).round().clamp(0.0, 255.0) as u8));
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(scores: &[f64], labels: &[bool]) -> f64 {
        let mut num = 0.0;
        let (mut p, mut n) = (0usize, 0usize);
        for (i, &li) in labels.iter().enumerate() {
            if li {
                p += 1;
            } else {
                n += 1;
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if !lj {
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / (p as f64 * n as f64)
    }

    #[test]
    fn auroc_trivial_cases() {
        assert_eq!(auroc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]).unwrap(), 0.0);
        assert_eq!(auroc(&[1.0; 5], &[false, true, false, true, true]).unwrap(), 0.5);
        assert!(matches!(auroc(&[1.0, 2.0], &[true, true]), Err(Error::SingleClass)));
        assert!(auroc(&[1.0], &[true, false]).is_err());
    }

    proptest! {
        #[test]
        fn auroc_matches_pair_count(v in prop::collection::vec((0u8..6, any::<bool>()), 2..60)) {
            let scores: Vec<f64> = v.iter().map(|(s, _)| *s as f64).collect();
            let labels: Vec<bool> = v.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            prop_assert_eq!(auroc(&scores, &labels).unwrap(), brute(&scores, &labels));
        }

        #[test]
        fn auroc_invariant_to_monotone_maps(v in prop::collection::vec((-3.0f64..3.0, any::<bool>()), 2..40)) {
            let scores: Vec<f64> = v.iter().map(|(s, _)| *s).collect();
            let labels: Vec<bool> = v.iter().map(|(_, l)| *l).collect();
            prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
            let a = auroc(&scores, &labels).unwrap();
            let e: Vec<f64> = scores.iter().map(|s| s.exp()).collect();
            let af: Vec<f64> = scores.iter().map(|s| 2.0 * s + 1.0).collect();
            prop_assert_eq!(auroc(&e, &labels).unwrap(), a);
            prop_assert_eq!(auroc(&af, &labels).unwrap(), a);
            let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
            let distinct = {
                let mut s = scores.clone();
                s.sort_by(f64::total_cmp);
                s.windows(2).all(|w| w[0] != w[1])
            };
            if distinct {
                prop_assert!((a + auroc(&neg, &labels).unwrap() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn aggregate_matches_direct_sum(
            maps in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 6), 3),
            mass in prop::collection::vec(0.01f64..1.0, 3),
            present in prop::collection::vec(any::<bool>(), 3),
            scale in 0.1f64..10.0,
        ) {
            prop_assume!(present.iter().any(|&p| p));
            let stats = [
                Some(GroupStat { mean: 0.3, std: 2.0, count: 1 }),
                Some(GroupStat { mean: -1.0, std: 0.5, count: 1 }),
                None,
            ];
            let mk = |c: f64| GroupMaps {
                maps: [0, 1, 2].map(|g| present[g].then(|| maps[g].clone())),
                gate_mass: [mass[0] * c, mass[1] * c, mass[2] * c],
                gates: vec![],
            };
            let cfg = AggregateConfig::default();
            let r = aggregate(&mk(1.0), Some(&stats), &cfg).unwrap();
            let total: f64 = (0..3).filter(|&g| present[g]).map(|g| mass[g]).sum();
            for i in 0..6 {
                let mut expect = 0.0;
                for g in (0..3).filter(|&g| present[g]) {
                    let s = match stats[g] { Some(s) => (maps[g][i] - s.mean) / s.std, None => maps[g][i] };
                    expect += mass[g] / total * s;
                }
                prop_assert!((r.map[i] - expect).abs() < 1e-12);
            }
            let scaled = aggregate(&mk(scale), Some(&stats), &cfg).unwrap();
            for (a, b) in r.map.iter().zip(&scaled.map) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn aggregate_trivial_cases() {
        let m = vec![1.0, 3.0, 5.0, 7.0];
        let stat = GroupStat { mean: 1.0, std: 2.0, count: 4 };
        let single = GroupMaps {
            maps: [None, Some(m.clone()), None],
            gate_mass: [0.0, 0.3, 0.0],
            gates: vec![],
        };
        let r = aggregate(&single, Some(&[None, Some(stat), None]), &AggregateConfig::default()).unwrap();
        assert_eq!(r.map, vec![0.0, 1.0, 2.0, 3.0]);
        let same = GroupMaps {
            maps: [Some(m.clone()), Some(m.clone()), None],
            gate_mass: [0.9, 0.1, 0.0],
            gates: vec![],
        };
        let raw = AggregateConfig {
            standardize: false,
            ..Default::default()
        };
        let r = aggregate(&same, None, &raw).unwrap();
        for (a, b) in r.map.iter().zip(&m) {
            assert!((a - b).abs() < 1e-12);
        }
        let none = GroupMaps {
            maps: [None, None, None],
            gate_mass: [0.0; 3],
            gates: vec![],
        };
        assert!(matches!(aggregate(&none, None, &raw), Err(Error::NoMaps)));
        let max = AggregateConfig {
            weighting: Weighting::Max,
            ..raw
        };
        let two = GroupMaps {
            maps: [Some(vec![1.0, 0.0]), None, Some(vec![0.0, 2.0])],
            gate_mass: [0.5, 0.0, 0.5],
            gates: vec![],
        };
        assert_eq!(aggregate(&two, None, &max).unwrap().map, vec![1.0, 2.0]);
    }

    #[test]
    fn image_statistic_cases() {
        let m: Vec<f64> = (0..200).map(f64::from).collect();
        assert_eq!(image_statistic(&m, ImageStat::Max, 0.01), 199.0);
        assert_eq!(image_statistic(&m, ImageStat::Top, 0.01), 198.5);
        assert_eq!(image_statistic(&[4.0], ImageStat::Top, 0.01), 4.0);
    }

    #[test]
    fn welford_matches_two_pass() {
        let mut b = ScoreStatsBuilder::default();
        let v = [1.0, 2.0, 4.0, 8.0];
        b.push_map("c", ExpertGroup::Global, &v);
        let s = b.finish();
        let st = s.class("c").unwrap()[2].unwrap();
        let mean = 3.75;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!((st.mean - mean).abs() < 1e-12);
        assert!((st.std - var.sqrt()).abs() < 1e-12);
        assert!(s.class("c").unwrap()[0].is_none());
    }

    fn sample(class: &str, kind: &str, normal: bool, score: f64, map: Vec<f64>, mask: Option<Vec<bool>>) -> ScoredSample {
        ScoredSample {
            sample_id: format!("{class}-{kind}-{score}"),
            class_id: class.into(),
            kind: kind.into(),
            normal,
            result: AnomalyResult {
                group_maps: [Some(map.clone()), None, None],
                gates: vec![1.0, 0.0],
                gate_mass: [1.0, 0.0, 0.0],
                weights: [1.0, 0.0, 0.0],
                map,
                image_score: score,
            },
            mask,
        }
    }

    #[test]
    fn report_from_perfect_scores() {
        let s = vec![
            sample("a", "good", true, 0.1, vec![0.0, 0.0], None),
            sample("a", "local", false, 0.9, vec![0.0, 1.0], Some(vec![false, true])),
            sample("a", "global", false, 0.8, vec![1.0, 0.0], Some(vec![true, false])),
        ];
        let r = build_report(&s, &[ExpertGroup::Patch, ExpertGroup::Global]).unwrap();
        let c = &r.classes[0];
        assert_eq!(c.image_auroc, Some(1.0));
        assert_eq!(c.pixel_auroc, Some(1.0));
        assert_eq!(c.per_kind["local"], 1.0);
        assert_eq!(r.expert_usage, vec![1.0, 0.0]);
        assert_eq!(r.gate_mass, [1.0, 0.0, 0.0]);
        let table = r.to_table();
        assert!(table.lines().count() == 3);
        assert_eq!(r.to_json().unwrap(), r.to_json().unwrap());
    }

    #[test]
    fn pgm_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.pgm");
        write_pgm(&p, &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0], 2, 3).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 51, 102, 153, 204, 255]);
    }
}
