//! Bag-of-visual-words quantization and late fusion of classifier scores.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FeatureError {
    #[error("need at least {k} distinct rows, found {found}")]
    TooFewDistinct { k: usize, found: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("non-finite value in descriptors")]
    NonFinite,
    #[error("channel order violated: expected {expected}, got {got}")]
    ChannelOrder { expected: Channel, got: Channel },
    #[error("missing channel {0}")]
    MissingChannel(Channel),
    #[error("unexpected extra channel {0}")]
    ExtraChannel(Channel),
    #[error("unknown channel tag {0:?}")]
    UnknownChannel(String),
    #[error("score matrix is empty")]
    EmptyScores,
    #[error("ragged score matrix: row {row} has {got} entries, expected {expected}")]
    Ragged { row: usize, expected: usize, got: usize },
}

/// Descriptor channels of a dense-trajectory extractor, in concatenation order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    Trajectory,
    Hog,
    Hof,
    MbhX,
    MbhY,
}

impl Channel {
    pub const ALL: [Channel; 5] = [Channel::Trajectory, Channel::Hog, Channel::Hof, Channel::MbhX, Channel::MbhY];

    pub fn tag(self) -> &'static str {
        match self {
            Channel::Trajectory => "traj",
            Channel::Hog => "hog",
            Channel::Hof => "hof",
            Channel::MbhX => "mbhx",
            Channel::MbhY => "mbhy",
        }
    }

    /// Descriptor length produced by the standard extractor.
    pub fn standard_dim(self) -> usize {
        match self {
            Channel::Trajectory => 28,
            Channel::Hog | Channel::MbhX | Channel::MbhY => 96,
            Channel::Hof => 108,
        }
    }
}

impl fmt::Display for Channel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Channel {
    type Err = FeatureError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Channel::ALL
            .into_iter()
            .find(|c| c.tag() == s)
            .ok_or_else(|| FeatureError::UnknownChannel(s.to_string()))
    }
}

/// Descriptors of one channel extracted from one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub clip_id: String,
    pub channel: Channel,
    pub dim: usize,
    pub rows: Vec<Vec<f64>>,
}

/// Classifier outputs for one clip: one row per classifier, one column per category.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub clip_id: String,
    pub rows: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub centroids: Vec<Vec<f64>>,
    pub dim: usize,
    pub channel: Option<Channel>,
    pub seed: u64,
    pub iterations: usize,
    /// Sum of squared distances after each assignment step.
    pub sse_log: Vec<f64>,
}

impl Codebook {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }

    pub fn final_sse(&self) -> f64 {
        self.sse_log.last().copied().unwrap_or(0.0)
    }

    /// Index of the nearest centroid; ties go to the lower index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        nearest(&self.centroids, v)
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(centroids: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_rows(rows: &[Vec<f64>], dim: usize) -> Result<(), FeatureError> {
    for r in rows {
        if r.len() != dim {
            return Err(FeatureError::DimMismatch { expected: dim, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
    }
    Ok(())
}

/// Lloyd's k-means with seeded initialization from distinct input rows.
///
/// Stops when assignments no longer change or after `max_iter` assignment
/// steps. A cluster left empty by an update is moved onto the point that is
/// currently farthest from its own centroid.
pub fn kmeans_fit(rows: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<Codebook, FeatureError> {
    if k == 0 {
        return Err(FeatureError::ZeroK);
    }
    let dim = rows.first().map_or(0, Vec::len);
    check_rows(rows, dim)?;

    // first occurrence of each distinct row, in input order
    let mut seen = HashSet::new();
    let distinct: Vec<usize> = (0..rows.len())
        .filter(|&i| seen.insert(rows[i].iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
        .collect();
    if distinct.len() < k {
        return Err(FeatureError::TooFewDistinct { k, found: distinct.len() });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<Vec<f64>> = sample(&mut rng, distinct.len(), k)
        .into_iter()
        .map(|i| rows[distinct[i]].clone())
        .collect();

    let mut assignment: Vec<usize> = vec![usize::MAX; rows.len()];
    let mut dists = vec![0.0; rows.len()];
    let mut sse_log = Vec::new();
    let mut iterations = 0;

    let mut converged = false;
    while iterations < max_iter.max(1) {
        iterations += 1;
        let mut changed = false;
        for (i, r) in rows.iter().enumerate() {
            let (j, d) = nearest(&centroids, r);
            if assignment[i] != j {
                assignment[i] = j;
                changed = true;
            }
            dists[i] = d;
        }
        sse_log.push(dists.iter().sum());
        if !changed {
            converged = true;
            break;
        }

        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (r, &j) in rows.iter().zip(&assignment) {
            counts[j] += 1;
            for (s, v) in sums[j].iter_mut().zip(r) {
                *s += v;
            }
        }
        for j in 0..k {
            if counts[j] > 0 {
                let n = counts[j] as f64;
                centroids[j] = sums[j].iter().map(|s| s / n).collect();
            }
        }
        let mut taken = HashSet::new();
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let far = (0..rows.len())
                .filter(|i| !taken.contains(i))
                .map(|i| (i, sq_dist(&rows[i], &centroids[assignment[i]])))
                .fold((0, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            taken.insert(far.0);
            centroids[j] = rows[far.0].clone();
        }
    }
    if !converged {
        // score the centroids actually returned
        sse_log.push(rows.iter().map(|r| nearest(&centroids, r).1).sum());
    }

    Ok(Codebook {
        centroids,
        dim,
        channel: None,
        seed,
        iterations,
        sse_log,
    })
}

/// Histogram of nearest-centroid assignments, L1-normalized when `normalize`.
///
/// An empty descriptor set yields the zero vector.
pub fn quantize(codebook: &Codebook, descriptors: &[Vec<f64>], normalize: bool) -> Result<Vec<f64>, FeatureError> {
    check_rows(descriptors, codebook.dim)?;
    let mut hist = vec![0.0; codebook.k()];
    for d in descriptors {
        hist[codebook.nearest(d).0] += 1.0;
    }
    if normalize && !descriptors.is_empty() {
        let n = descriptors.len() as f64;
        hist.iter_mut().for_each(|h| *h /= n);
    }
    Ok(hist)
}

/// Concatenates per-channel histograms in the standard five-channel order.
pub fn concat_histograms(parts: &[(Channel, Vec<f64>)]) -> Result<Vec<f64>, FeatureError> {
    concat_channels(&Channel::ALL, parts)
}

/// Concatenates histograms that must arrive exactly in `order`.
pub fn concat_channels(order: &[Channel], parts: &[(Channel, Vec<f64>)]) -> Result<Vec<f64>, FeatureError> {
    for (i, &expected) in order.iter().enumerate() {
        match parts.get(i) {
            None => return Err(FeatureError::MissingChannel(expected)),
            Some(&(got, _)) if got != expected => {
                return Err(if parts.iter().any(|(c, _)| *c == expected) {
                    FeatureError::ChannelOrder { expected, got }
                } else {
                    FeatureError::MissingChannel(expected)
                })
            }
            Some(_) => {}
        }
    }
    if let Some(&(extra, _)) = parts.get(order.len()) {
        return Err(FeatureError::ExtraChannel(extra));
    }
    Ok(parts.iter().flat_map(|(_, h)| h.iter().copied()).collect())
}

/// Column-wise arithmetic mean over classifiers.
pub fn late_fuse(scores: &ScoreMatrix) -> Result<Vec<f64>, FeatureError> {
    let first = scores.rows.first().ok_or(FeatureError::EmptyScores)?;
    let n_cat = first.len();
    if n_cat == 0 {
        return Err(FeatureError::EmptyScores);
    }
    let mut sum = vec![0.0; n_cat];
    for (row, r) in scores.rows.iter().enumerate() {
        if r.len() != n_cat {
            return Err(FeatureError::Ragged { row, expected: n_cat, got: r.len() });
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(FeatureError::NonFinite);
        }
        for (s, v) in sum.iter_mut().zip(r) {
            *s += v;
        }
    }
    let n = scores.rows.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn book(centroids: Vec<Vec<f64>>) -> Codebook {
        let dim = centroids[0].len();
        Codebook { centroids, dim, channel: None, seed: 0, iterations: 0, sse_log: vec![] }
    }

    #[test]
    fn k_points_k_clusters_is_exact() {
        let rows = vec![vec![0.0, 1.0], vec![3.0, -1.0], vec![7.5, 2.0], vec![-4.0, 0.5]];
        let cb = kmeans_fit(&rows, 4, 3, 10).unwrap();
        assert_eq!(cb.final_sse(), 0.0);
        let mut got = cb.centroids.clone();
        let mut want = rows.clone();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn too_few_distinct_rows() {
        let rows = vec![vec![1.0], vec![1.0], vec![2.0]];
        assert_eq!(kmeans_fit(&rows, 3, 0, 5), Err(FeatureError::TooFewDistinct { k: 3, found: 2 }));
        assert_eq!(kmeans_fit(&rows, 0, 0, 5), Err(FeatureError::ZeroK));
    }

    #[test]
    fn kmeans_deterministic_and_monotone() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let rows: Vec<Vec<f64>> = (0..300).map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let a = kmeans_fit(&rows, 8, 9, 100).unwrap();
        let b = kmeans_fit(&rows, 8, 9, 100).unwrap();
        assert_eq!(a, b);
        for w in a.sse_log.windows(2) {
            assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", a.sse_log);
        }
        for i in 0..a.k() {
            for j in i + 1..a.k() {
                assert_ne!(a.centroids[i], a.centroids[j]);
            }
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // some seeds start two centroids inside the tight group, emptying one
        let rows: Vec<Vec<f64>> = vec![
            vec![0.0], vec![0.1], vec![0.2], vec![10.0], vec![10.1], vec![50.0],
        ];
        for seed in 0..50 {
            let cb = kmeans_fit(&rows, 3, seed, 50).unwrap();
            let hist = quantize(&cb, &rows, false).unwrap();
            assert!(hist.iter().all(|&h| h > 0.0), "seed {seed}: {hist:?}");
        }
    }

    #[test]
    fn quantize_one_hot_and_halves() {
        let cb = book((0..10).map(|i| vec![i as f64, 0.0]).collect());
        let h = quantize(&cb, &[vec![7.0, 0.0]], true).unwrap();
        let mut want = vec![0.0; 10];
        want[7] = 1.0;
        assert_eq!(h, want);

        let cb2 = book(vec![vec![0.0], vec![1.0]]);
        let h = quantize(&cb2, &[vec![0.1], vec![0.9], vec![-1.0], vec![2.0]], true).unwrap();
        assert_eq!(h, vec![0.5, 0.5]);
        let raw = quantize(&cb2, &[vec![0.1], vec![0.9], vec![-1.0]], false).unwrap();
        assert_eq!(raw, vec![2.0, 1.0]);
        // equidistant goes to the lower index
        assert_eq!(quantize(&cb2, &[vec![0.5]], false).unwrap(), vec![1.0, 0.0]);
    }

    #[test]
    fn quantize_errors_and_empty() {
        let cb = book(vec![vec![0.0, 0.0], vec![1.0, 1.0]]);
        assert_eq!(quantize(&cb, &[], true).unwrap(), vec![0.0, 0.0]);
        assert_eq!(quantize(&cb, &[vec![1.0]], true), Err(FeatureError::DimMismatch { expected: 2, got: 1 }));
    }

    #[test]
    fn concat_order_contract() {
        let parts: Vec<(Channel, Vec<f64>)> = Channel::ALL.iter().map(|&c| (c, vec![c as usize as f64; 3])).collect();
        let v = concat_histograms(&parts).unwrap();
        assert_eq!(v.len(), 15);
        assert_eq!(&v[6..9], &[2.0, 2.0, 2.0]);

        let two = concat_channels(&[Channel::Trajectory, Channel::Hog], &[(Channel::Trajectory, vec![1.0, 2.0]), (Channel::Hog, vec![3.0, 4.0])]).unwrap();
        assert_eq!(two, vec![1.0, 2.0, 3.0, 4.0]);

        let mut swapped = parts.clone();
        swapped.swap(1, 2);
        assert_eq!(concat_histograms(&swapped), Err(FeatureError::ChannelOrder { expected: Channel::Hog, got: Channel::Hof }));
        assert_eq!(concat_histograms(&parts[..4]), Err(FeatureError::MissingChannel(Channel::MbhY)));
        let mut gap = parts.clone();
        gap.remove(0);
        assert_eq!(concat_histograms(&gap), Err(FeatureError::MissingChannel(Channel::Trajectory)));
    }

    #[test]
    fn channel_tags_round_trip() {
        for c in Channel::ALL {
            assert_eq!(c.tag().parse::<Channel>().unwrap(), c);
        }
        assert!("sift".parse::<Channel>().is_err());
        assert_eq!(Channel::Hof.standard_dim(), 108);
    }

    #[test]
    fn late_fuse_means() {
        let one = ScoreMatrix { clip_id: "c".into(), rows: vec![vec![0.2, -1.0, 3.0]] };
        assert_eq!(late_fuse(&one).unwrap(), vec![0.2, -1.0, 3.0]);
        let col = ScoreMatrix { clip_id: "c".into(), rows: vec![vec![0.0], vec![1.0], vec![0.5]] };
        assert_eq!(late_fuse(&col).unwrap(), vec![0.5]);
        let ragged = ScoreMatrix { clip_id: "c".into(), rows: vec![vec![0.0, 1.0], vec![1.0]] };
        assert_eq!(late_fuse(&ragged), Err(FeatureError::Ragged { row: 1, expected: 2, got: 1 }));
        assert_eq!(late_fuse(&ScoreMatrix { clip_id: "c".into(), rows: vec![] }), Err(FeatureError::EmptyScores));
    }

    proptest! {
        #[test]
        fn quantize_is_permutation_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cb = book((0..5).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect());
            let mut d: Vec<Vec<f64>> = (0..30).map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)]).collect();
            let a = quantize(&cb, &d, true).unwrap();
            d.shuffle(&mut rng);
            let b = quantize(&cb, &d, true).unwrap();
            prop_assert_eq!(&a, &b);
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn late_fuse_commutes_with_row_permutation(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut rows: Vec<Vec<f64>> = (0..6).map(|_| (0..4).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let a = late_fuse(&ScoreMatrix { clip_id: "x".into(), rows: rows.clone() }).unwrap();
            rows.shuffle(&mut rng);
            let b = late_fuse(&ScoreMatrix { clip_id: "x".into(), rows }).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
