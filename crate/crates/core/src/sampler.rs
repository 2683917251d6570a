//! Property-driven batch sampling: cluster weights C^(−3)·√R·N normalized
//! over nonempty clusters, realized as an alias table for O(1) draws.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::curation::{ClusterKey, ClusterStats};
use crate::record::ProteinRecord;
use crate::rng::SeededRng;

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("no nonempty clusters to sample from")]
    EmptyCorpus,
    #[error("cluster (confidence {confidence}, coverage {coverage}/4) drawn but absent from the record index")]
    EmptyCluster { confidence: u8, coverage: u8 },
}

/// Exponents of the cluster weight C^a · R^b · N. Defaults follow the
/// sampling rule (a = −3, b = 1/2); overridable for ablation runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingParams {
    pub confidence_exponent: f64,
    pub coverage_power: f64,
}

impl Default for SamplingParams {
    fn default() -> SamplingParams {
        SamplingParams { confidence_exponent: -3.0, coverage_power: 0.5 }
    }
}

impl SamplingParams {
    /// Unnormalized weight of one cluster.
    pub fn weight(&self, key: ClusterKey, count: u64) -> f64 {
        f64::from(key.confidence).powf(self.confidence_exponent)
            * key.coverage.fraction().powf(self.coverage_power)
            * count as f64
    }
}

/// Normalized per-cluster probabilities plus the alias table realizing them.
/// Immutable after build; safe to share across workers, each of which owns
/// its own [`SeededRng`].
#[derive(Debug, Clone)]
pub struct SamplingDistribution {
    keys: Vec<ClusterKey>,
    probabilities: Vec<f64>,
    alias: AliasTable,
    params: SamplingParams,
    source_total: u64,
}

impl SamplingDistribution {
    /// Clusters in key order, paired with their probabilities.
    pub fn entries(&self) -> impl Iterator<Item = (ClusterKey, f64)> + '_ {
        self.keys.iter().copied().zip(self.probabilities.iter().copied())
    }

    /// Probability of one cluster; zero when it was empty at build time.
    pub fn probability(&self, key: &ClusterKey) -> f64 {
        self.keys
            .iter()
            .position(|k| k == key)
            .map_or(0.0, |i| self.probabilities[i])
    }

    pub fn params(&self) -> SamplingParams {
        self.params
    }

    /// Record count of the stats snapshot this distribution was built from.
    pub fn source_total(&self) -> u64 {
        self.source_total
    }
}

/// Builds the sampling distribution over all nonempty clusters:
/// P_u = w_u / Σ_v w_v with w_u = C_u^a · R_u^b · N_u.
pub fn build_distribution(
    stats: &ClusterStats,
    params: SamplingParams,
) -> Result<SamplingDistribution, SamplerError> {
    let mut keys = Vec::new();
    let mut weights = Vec::new();
    for (key, count) in stats.nonempty() {
        keys.push(key);
        weights.push(params.weight(key, count));
    }
    if keys.is_empty() {
        return Err(SamplerError::EmptyCorpus);
    }
    let sum: f64 = weights.iter().sum();
    let probabilities: Vec<f64> = weights.iter().map(|w| w / sum).collect();
    let alias = AliasTable::build(&probabilities);
    Ok(SamplingDistribution {
        keys,
        probabilities,
        alias,
        params,
        source_total: stats.total(),
    })
}

/// Draws one cluster with probability P_u: a single uniform drives both the
/// column choice and the coin flip against the column's stored probability.
pub fn draw_cluster(dist: &SamplingDistribution, rng: &mut SeededRng) -> ClusterKey {
    dist.keys[dist.alias.draw(rng)]
}

/// Walker/Vose alias table: column i keeps probability `prob[i]`, overflow
/// diverts to `alias[i]`.
#[derive(Debug, Clone)]
struct AliasTable {
    prob: Vec<f64>,
    alias: Vec<u32>,
}

impl AliasTable {
    fn build(p: &[f64]) -> AliasTable {
        let n = p.len();
        let mut prob = vec![0.0; n];
        let mut alias = vec![0u32; n];
        let mut scaled: Vec<f64> = p.iter().map(|&x| x * n as f64).collect();
        let mut small: Vec<usize> = (0..n).filter(|&i| scaled[i] < 1.0).collect();
        let mut large: Vec<usize> = (0..n).filter(|&i| scaled[i] >= 1.0).collect();
        while let (Some(s), Some(l)) = (small.pop(), large.pop()) {
            prob[s] = scaled[s];
            alias[s] = l as u32;
            scaled[l] = (scaled[l] + scaled[s]) - 1.0;
            if scaled[l] < 1.0 {
                small.push(l);
            } else {
                large.push(l);
            }
        }
        // Leftovers are 1 up to rounding; they keep their own column.
        for i in small.into_iter().chain(large) {
            prob[i] = 1.0;
            alias[i] = i as u32;
        }
        AliasTable { prob, alias }
    }

    fn draw(&self, rng: &mut SeededRng) -> usize {
        let u = rng.uniform_f64() * self.prob.len() as f64;
        let column = (u as usize).min(self.prob.len() - 1);
        if u - (column as f64) < self.prob[column] {
            column
        } else {
            self.alias[column] as usize
        }
    }
}

/// Record ids grouped by cluster, in input order within each cluster.
#[derive(Debug, Clone, Default)]
pub struct ClusterIndex {
    ids: BTreeMap<ClusterKey, Vec<usize>>,
}

impl ClusterIndex {
    pub fn build(records: &[ProteinRecord]) -> ClusterIndex {
        let mut ids: BTreeMap<ClusterKey, Vec<usize>> = BTreeMap::new();
        for (i, record) in records.iter().enumerate() {
            ids.entry(ClusterKey::of(record)).or_default().push(i);
        }
        ClusterIndex { ids }
    }

    pub fn ids(&self, key: &ClusterKey) -> Option<&[usize]> {
        self.ids.get(key).map(Vec::as_slice)
    }

    /// Cluster statistics implied by the index (counts of the id lists).
    pub fn stats(&self) -> ClusterStats {
        let mut stats = ClusterStats::new();
        for (key, list) in &self.ids {
            for _ in list {
                stats.observe(*key);
            }
        }
        stats
    }
}

/// Draws `k` record ids with replacement: cluster by the property-driven
/// distribution, record uniformly within the cluster.
pub fn sample_batch(
    dist: &SamplingDistribution,
    index: &ClusterIndex,
    rng: &mut SeededRng,
    k: usize,
) -> Result<Vec<usize>, SamplerError> {
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let key = draw_cluster(dist, rng);
        let ids = index.ids(&key).filter(|l| !l.is_empty()).ok_or(SamplerError::EmptyCluster {
            confidence: key.confidence,
            coverage: key.coverage.quarters(),
        })?;
        out.push(ids[rng.index(ids.len())]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::CoverageLevel;
    use num::rational::BigRational;
    use num::{BigInt, One, ToPrimitive, Zero};

    fn key(confidence: u8, quarters: u8) -> ClusterKey {
        ClusterKey::new(confidence, CoverageLevel::from_present_count(quarters).unwrap())
    }

    fn stats_of(clusters: &[(u8, u8, u64)]) -> ClusterStats {
        let mut stats = ClusterStats::new();
        for &(c, q, n) in clusters {
            for _ in 0..n {
                stats.observe(key(c, q));
            }
        }
        stats
    }

    fn build(clusters: &[(u8, u8, u64)]) -> SamplingDistribution {
        build_distribution(&stats_of(clusters), SamplingParams::default()).unwrap()
    }

    /// Exact-rational probability for clusters whose coverage is 1/4 or 4/4,
    /// where √R is rational (1/2 and 1): weight = N / (C³·denom).
    fn rational_probability(clusters: &[(u8, u8, u64)], which: usize) -> f64 {
        let weight = |(c, q, n): (u8, u8, u64)| -> BigRational {
            assert!(q == 1 || q == 4, "rational oracle needs √R rational");
            let sqrt_r = if q == 1 {
                BigRational::new(BigInt::from(1), BigInt::from(2))
            } else {
                BigRational::one()
            };
            BigRational::new(BigInt::from(n), BigInt::from(u64::from(c).pow(3))) * sqrt_r
        };
        let total: BigRational = clusters.iter().map(|&c| weight(c)).fold(BigRational::zero(), |a, b| a + b);
        (weight(clusters[which]) / total).to_f64().unwrap()
    }

    #[test]
    fn single_cluster_probability_one() {
        let dist = build(&[(2, 3, 17)]);
        assert_eq!(dist.probability(&key(2, 3)), 1.0);
        assert_eq!(dist.entries().count(), 1);
    }

    #[test]
    fn size_proportionality_same_quality() {
        // Identical per-record weight ⇒ P reduces to N/ΣN. Equal (C, R)
        // pairs share one key in ClusterStats, so neutral exponents realize
        // the equal-weight setup across distinct keys.
        let params = SamplingParams { confidence_exponent: 0.0, coverage_power: 0.0 };
        let dist = build_distribution(&stats_of(&[(1, 4, 1), (2, 3, 2)]), params).unwrap();
        assert!((dist.probability(&key(1, 4)) - 1.0 / 3.0).abs() < 1e-15);
        assert!((dist.probability(&key(2, 3)) - 2.0 / 3.0).abs() < 1e-15);
        // With default params the cluster weight itself is linear in N.
        let p = SamplingParams::default();
        assert_eq!(p.weight(key(1, 4), 2), 2.0 * p.weight(key(1, 4), 1));
    }

    #[test]
    fn confidence_cubed_example_matches_rational_oracle() {
        let clusters = [(1, 4, 10), (3, 4, 10)];
        let dist = build(&clusters);
        let p0 = rational_probability(&clusters, 0);
        let p1 = rational_probability(&clusters, 1);
        // Weights 10 and 10/27 → P = (27/28, 1/28).
        assert!((p0 - 27.0 / 28.0).abs() < 1e-15);
        assert!((dist.probability(&key(1, 4)) - p0).abs() < 1e-12);
        assert!((dist.probability(&key(3, 4)) - p1).abs() < 1e-12);
    }

    #[test]
    fn coverage_root_example() {
        let dist = build(&[(2, 3, 50), (2, 4, 50)]);
        let s = 0.75f64.sqrt();
        let expected = s / (s + 1.0);
        assert!((dist.probability(&key(2, 3)) - expected).abs() < 1e-12);
        assert!((expected - 0.46410).abs() < 1e-5);
    }

    #[test]
    fn probabilities_sum_to_one() {
        let dist = build(&[(1, 1, 3), (2, 2, 11), (3, 3, 7), (4, 4, 100), (5, 2, 9)]);
        let sum: f64 = dist.entries().map(|(_, p)| p).sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn monotonic_in_confidence_coverage_and_size() {
        // Fixed R, N: P strictly decreasing in C.
        let dist = build(&[(1, 4, 10), (2, 4, 10), (3, 4, 10)]);
        let ps: Vec<f64> = (1..=3).map(|c| dist.probability(&key(c, 4))).collect();
        assert!(ps[0] > ps[1] && ps[1] > ps[2]);
        // Fixed C, N: strictly increasing in R.
        let dist = build(&[(2, 1, 10), (2, 2, 10), (2, 3, 10), (2, 4, 10)]);
        let ps: Vec<f64> = (1..=4).map(|q| dist.probability(&key(2, q))).collect();
        assert!(ps.windows(2).all(|w| w[0] < w[1]));
        // Fixed C, R: linear in N (doubling N doubles the weight).
        let dist = build(&[(2, 4, 10), (3, 4, 10)]);
        let base = dist.probability(&key(2, 4)) / dist.probability(&key(3, 4));
        let dist2 = build(&[(2, 4, 20), (3, 4, 10)]);
        let doubled = dist2.probability(&key(2, 4)) / dist2.probability(&key(3, 4));
        assert!((doubled - 2.0 * base).abs() < 1e-12);
    }

    #[test]
    fn normalization_invariant_under_common_scaling() {
        let base = build(&[(1, 3, 5), (2, 4, 9), (3, 2, 4)]);
        let scaled = build(&[(1, 3, 35), (2, 4, 63), (3, 2, 28)]);
        for (key, p) in base.entries() {
            assert!((scaled.probability(&key) - p).abs() < 1e-15);
        }
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = build_distribution(&ClusterStats::new(), SamplingParams::default()).unwrap_err();
        assert_eq!(err, SamplerError::EmptyCorpus);
    }

    #[test]
    fn degenerate_draw_always_returns_the_cluster() {
        let dist = build(&[(3, 3, 8)]);
        let mut rng = SeededRng::new(11);
        for _ in 0..100 {
            assert_eq!(draw_cluster(&dist, &mut rng), key(3, 3));
        }
    }

    #[test]
    fn draw_frequencies_track_probabilities() {
        let dist = build(&[(1, 4, 100), (2, 3, 300), (3, 4, 600)]);
        let mut rng = SeededRng::new(42);
        let mut counts: std::collections::BTreeMap<ClusterKey, u64> = Default::default();
        let draws = 100_000;
        for _ in 0..draws {
            *counts.entry(draw_cluster(&dist, &mut rng)).or_insert(0) += 1;
        }
        for (key, p) in dist.entries() {
            let freq = *counts.get(&key).unwrap_or(&0) as f64 / draws as f64;
            assert!((freq - p).abs() < 0.01, "cluster {key:?}: {freq} vs {p}");
        }
    }

    fn tiny_records() -> Vec<crate::record::ProteinRecord> {
        // Three records in two clusters: (C=1, R=1/4) ×2 and (C=2, R=4/4) ×1.
        let mk = |name: &str, confidence: u8, present: usize| {
            let mut props: [Option<String>; 4] = Default::default();
            for slot in props.iter_mut().take(present) {
                *slot = Some("Text.".to_owned());
            }
            crate::record::ProteinRecord::new(name, "ACDEF", props, confidence, true).unwrap()
        };
        vec![mk("A", 1, 1), mk("B", 1, 1), mk("C", 2, 4)]
    }

    #[test]
    fn batch_from_singleton_cluster_returns_that_record() {
        let records = vec![tiny_records().remove(2)];
        let index = ClusterIndex::build(&records);
        let dist = build_distribution(&index.stats(), SamplingParams::default()).unwrap();
        let mut rng = SeededRng::new(1);
        assert_eq!(sample_batch(&dist, &index, &mut rng, 1).unwrap(), vec![0]);
    }

    #[test]
    fn batch_is_deterministic_per_seed() {
        let records = tiny_records();
        let index = ClusterIndex::build(&records);
        let dist = build_distribution(&index.stats(), SamplingParams::default()).unwrap();
        let a = sample_batch(&dist, &index, &mut SeededRng::new(9), 64).unwrap();
        let b = sample_batch(&dist, &index, &mut SeededRng::new(9), 64).unwrap();
        let c = sample_batch(&dist, &index, &mut SeededRng::new(10), 64).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn inconsistent_index_reports_empty_cluster() {
        let records = tiny_records();
        let index = ClusterIndex::build(&records[..1]);
        let dist = build_distribution(&ClusterIndex::build(&records).stats(), SamplingParams::default()).unwrap();
        let mut rng = SeededRng::new(3);
        let mut saw_error = false;
        for _ in 0..200 {
            if sample_batch(&dist, &index, &mut rng, 1).is_err() {
                saw_error = true;
                break;
            }
        }
        assert!(saw_error, "missing cluster never surfaced as EmptyCluster");
    }

    #[test]
    fn per_record_marginal_is_cluster_probability_over_size() {
        let records = tiny_records();
        let index = ClusterIndex::build(&records);
        let dist = build_distribution(&index.stats(), SamplingParams::default()).unwrap();
        let mut rng = SeededRng::new(77);
        let draws = 100_000;
        let mut counts = [0u64; 3];
        for id in sample_batch(&dist, &index, &mut rng, draws).unwrap() {
            counts[id] += 1;
        }
        let p_low = dist.probability(&key(1, 1));
        for &count in &counts[..2] {
            let freq = count as f64 / draws as f64;
            assert!((freq - p_low / 2.0).abs() < 0.01);
        }
    }

    #[test]
    fn ablation_exponents_change_the_ranking() {
        let stats = stats_of(&[(1, 4, 10), (3, 4, 1000)]);
        let default = build_distribution(&stats, SamplingParams::default()).unwrap();
        let flat = build_distribution(
            &stats,
            SamplingParams { confidence_exponent: 0.0, coverage_power: 0.0 },
        )
        .unwrap();
        // Default weighting favors the high-confidence cluster despite its
        // size; a flat exponent reduces to size proportionality.
        assert!(default.probability(&key(1, 4)) > 0.2);
        assert!((flat.probability(&key(1, 4)) - 10.0 / 1010.0).abs() < 1e-12);
    }
}
