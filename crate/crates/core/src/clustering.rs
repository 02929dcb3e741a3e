//! K-means, silhouette values and target class-count selection.

use crate::error::{GlcError, Result};
use crate::numeric::{l2_norm, l2_normalize_rows, pair_distance, squared_euclidean, Matrix, Metric, RngState};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
    /// Independent k-means++ restarts; the lowest final inertia wins.
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 100,
            tol: 1e-6,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub centroids: Matrix,
    pub assignments: Vec<usize>,
    /// Sum of squared Euclidean distances to the assigned centroid.
    pub inertia: f64,
    /// Inertia after every assignment step, then the final value.
    pub inertia_history: Vec<f64>,
}

fn nearest(point: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.row_iter().enumerate() {
        let d = squared_euclidean(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn plus_plus_seeds(x: &Matrix, k: usize, rng: &mut RngState) -> Matrix {
    let n = x.rows();
    let mut chosen = vec![rng.below(n)];
    let mut d2: Vec<f64> = x.row_iter().map(|r| squared_euclidean(r, x.row(chosen[0]))).collect();
    while chosen.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &d) in d2.iter().enumerate() {
                acc += d;
                if acc > target && d > 0.0 {
                    pick = Some(i);
                    break;
                }
            }
            // rounding can leave `target` just above the running sum
            pick.unwrap_or_else(|| d2.iter().rposition(|&d| d > 0.0).unwrap())
        } else {
            // every point already coincides with a seed
            rng.below(n)
        };
        chosen.push(next);
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(squared_euclidean(x.row(i), x.row(next)));
        }
    }
    x.select_rows(&chosen)
}

fn assign(x: &Matrix, centroids: &Matrix) -> (Vec<usize>, Vec<f64>) {
    par::map_range(x.rows(), |i| nearest(x.row(i), centroids))
        .into_iter()
        .unzip()
}

fn update_centroids(x: &Matrix, assignments: &[usize], dists: &[f64], centroids: &mut Matrix) {
    let k = centroids.rows();
    let d = x.cols();
    let mut sums = Matrix::zeros(k, d);
    let mut counts = vec![0usize; k];
    for (i, &a) in assignments.iter().enumerate() {
        counts[a] += 1;
        for (s, v) in sums.row_mut(a).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    let mut taken = vec![false; x.rows()];
    for (c, &count) in counts.iter().enumerate() {
        if count > 0 {
            let n = count as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s / n;
            }
        } else {
            // empty: re-seed at the point farthest from its own centroid
            let far = (0..x.rows())
                .filter(|&i| !taken[i])
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                .expect("k <= n leaves a free point");
            taken[far] = true;
            centroids.row_mut(c).copy_from_slice(x.row(far));
        }
    }
}

fn lloyd(x: &Matrix, k: usize, rng: &mut RngState, cfg: &KMeansConfig) -> KMeansResult {
    let mut centroids = plus_plus_seeds(x, k, rng);
    let (mut assignments, mut dists) = assign(x, &centroids);
    let mut inertia: f64 = dists.iter().sum();
    let mut history = vec![inertia];
    for _ in 0..cfg.max_iters {
        update_centroids(x, &assignments, &dists, &mut centroids);
        let (next, next_d) = assign(x, &centroids);
        let next_inertia: f64 = next_d.iter().sum();
        let changed = next != assignments;
        let improvement = inertia - next_inertia;
        assignments = next;
        dists = next_d;
        inertia = next_inertia;
        history.push(inertia);
        if !changed || improvement < cfg.tol {
            break;
        }
    }
    // Report centroids that are the exact means of the final partition.
    update_centroids(x, &assignments, &dists, &mut centroids);
    let final_d: Vec<f64> = assignments
        .iter()
        .enumerate()
        .map(|(i, &a)| squared_euclidean(x.row(i), centroids.row(a)))
        .collect();
    let final_inertia: f64 = final_d.iter().sum();
    if final_inertia <= inertia {
        inertia = final_inertia;
        history.push(inertia);
    }
    KMeansResult {
        centroids,
        assignments,
        inertia,
        inertia_history: history,
    }
}

/// Lloyd's algorithm with k-means++ seeding. Runs on `x` as given.
pub fn kmeans(x: &Matrix, k: usize, rng: &mut RngState, cfg: &KMeansConfig) -> Result<KMeansResult> {
    if k == 0 {
        return Err(GlcError::InvalidArgument("k-means needs k >= 1".into()));
    }
    if k > x.rows() {
        return Err(GlcError::InvalidArgument(format!(
            "k = {k} exceeds the {} available points",
            x.rows()
        )));
    }
    if !x.is_finite() {
        return Err(GlcError::NonFinite("k-means input".into()));
    }
    let mut best: Option<KMeansResult> = None;
    for _ in 0..cfg.restarts.max(1) {
        let run = lloyd(x, k, rng, cfg);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}

/// Per-sample silhouette values. Members of singleton clusters score 0.
pub fn silhouette_values(x: &Matrix, assignments: &[usize], metric: Metric) -> Result<Vec<f64>> {
    let n = x.rows();
    if assignments.len() != n {
        return Err(GlcError::Shape(format!("{} assignments for {n} rows", assignments.len())));
    }
    let k = assignments.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    for &a in assignments {
        sizes[a] += 1;
    }
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(GlcError::InvalidArgument("silhouette needs at least two non-empty clusters".into()));
    }
    let norms: Vec<f64> = x.row_iter().map(l2_norm).collect();
    if metric == Metric::Cosine {
        if let Some(r) = norms.iter().position(|&v| v == 0.0) {
            return Err(GlcError::ZeroNorm(format!("row {r} under cosine distance")));
        }
    }
    Ok(par::map_range(n, |i| {
        let own = assignments[i];
        if sizes[own] == 1 {
            return 0.0;
        }
        let mut sums = vec![0.0; k];
        let xi = x.row(i);
        for j in 0..n {
            if j != i {
                sums[assignments[j]] += pair_distance(xi, x.row(j), norms[i], norms[j], metric);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            ((b - a) / denom).clamp(-1.0, 1.0)
        } else {
            0.0
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassCountEstimate {
    pub chosen: usize,
    /// `(candidate, mean silhouette)` in ascending candidate order.
    pub candidate_scores: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimateConfig {
    pub metric: Metric,
    /// Cluster L2-normalized rows (the default) or raw rows.
    pub normalize: bool,
    pub kmeans: KMeansConfig,
}

impl Default for EstimateConfig {
    fn default() -> Self {
        Self {
            metric: Metric::Cosine,
            normalize: true,
            kmeans: KMeansConfig::default(),
        }
    }
}

/// `round(x)` with halves going up.
fn round_half_up(num: usize, den: usize) -> usize {
    (2 * num + den) / (2 * den)
}

/// Candidate counts `C/3, C/2, C, 2C, 3C` rounded half-up, clamped to
/// `[2, n]`, deduplicated and sorted.
pub fn candidate_counts(num_source_classes: usize, n: usize) -> Vec<usize> {
    let c = num_source_classes;
    let mut out: Vec<usize> = [round_half_up(c, 3), round_half_up(c, 2), c, 2 * c, 3 * c]
        .into_iter()
        .map(|v| v.max(2).min(n))
        .collect();
    out.sort_unstable();
    out.dedup();
    out
}

/// Picks the candidate cluster count with the highest mean silhouette; ties
/// go to the smaller count. Each candidate clusters with its own stream
/// derived from `rng`'s seed, so the parallel and sequential runs agree.
pub fn estimate_class_count(
    x: &Matrix,
    num_source_classes: usize,
    rng: &RngState,
    cfg: &EstimateConfig,
) -> Result<ClassCountEstimate> {
    let n = x.rows();
    if n < 2 {
        return Err(GlcError::InvalidArgument("class-count estimation needs at least 2 samples".into()));
    }
    if num_source_classes == 0 {
        return Err(GlcError::InvalidArgument("source class count must be positive".into()));
    }
    let data = if cfg.normalize { l2_normalize_rows(x)? } else { x.clone() };
    let candidates = candidate_counts(num_source_classes, n);
    let scored: Vec<Result<(usize, f64)>> = par::map_range(candidates.len(), |i| {
        let k = candidates[i];
        let mut stream = rng.derive(&[k as u64]);
        let km = kmeans(&data, k, &mut stream, &cfg.kmeans)?;
        let s = silhouette_values(&data, &km.assignments, cfg.metric)?;
        Ok((k, s.iter().sum::<f64>() / n as f64))
    });
    let candidate_scores = scored.into_iter().collect::<Result<Vec<_>>>()?;
    let mut chosen = candidate_scores[0];
    for &cand in &candidate_scores[1..] {
        if cand.1 > chosen.1 {
            chosen = cand;
        }
    }
    Ok(ClassCountEstimate {
        chosen: chosen.0,
        candidate_scores,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[[f64; 2]]) -> Matrix {
        Matrix::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// O(N²) silhouette straight from the definition.
    fn silhouette_oracle(x: &Matrix, a: &[usize], metric: Metric) -> Vec<f64> {
        let n = x.rows();
        let dist = |i: usize, j: usize| -> f64 {
            let (p, q) = (x.row(i), x.row(j));
            match metric {
                Metric::Euclidean => p.iter().zip(q).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt(),
                Metric::Cosine => {
                    let d: f64 = p.iter().zip(q).map(|(u, v)| u * v).sum();
                    let np: f64 = p.iter().map(|u| u * u).sum::<f64>().sqrt();
                    let nq: f64 = q.iter().map(|u| u * u).sum::<f64>().sqrt();
                    1.0 - d / (np * nq)
                }
            }
        };
        (0..n)
            .map(|i| {
                let own: Vec<usize> = (0..n).filter(|&j| a[j] == a[i] && j != i).collect();
                if own.is_empty() {
                    return 0.0;
                }
                let ai = own.iter().map(|&j| dist(i, j)).sum::<f64>() / own.len() as f64;
                let mut bi = f64::INFINITY;
                for c in a.iter().copied().collect::<std::collections::BTreeSet<_>>() {
                    if c == a[i] {
                        continue;
                    }
                    let members: Vec<usize> = (0..n).filter(|&j| a[j] == c).collect();
                    bi = bi.min(members.iter().map(|&j| dist(i, j)).sum::<f64>() / members.len() as f64);
                }
                (bi - ai) / ai.max(bi)
            })
            .collect()
    }

    #[test]
    fn k1_centroid_is_the_column_mean() {
        let mut rng = RngState::new(5);
        let x = Matrix::from_vec(7, 3, (0..21).map(|_| rng.normal()).collect()).unwrap();
        let r = kmeans(&x, 1, &mut rng, &KMeansConfig::default()).unwrap();
        assert_eq!(r.centroids.row(0), x.column_means().as_slice());
        assert!(r.assignments.iter().all(|&a| a == 0));
    }

    #[test]
    fn four_point_fixture_matches_brute_force() {
        let x = pts(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]);
        // brute force over every 2-partition
        let inertia_of = |labels: &[usize]| -> f64 {
            (0..2)
                .map(|c| {
                    let idx: Vec<usize> = (0..4).filter(|&i| labels[i] == c).collect();
                    if idx.is_empty() {
                        return f64::INFINITY;
                    }
                    let m = x.select_rows(&idx).column_means();
                    idx.iter().map(|&i| squared_euclidean(x.row(i), &m)).sum::<f64>()
                })
                .sum()
        };
        let best = (0..16u32)
            .map(|mask| (0..4).map(|i| ((mask >> i) & 1) as usize).collect::<Vec<_>>())
            .min_by(|a, b| inertia_of(a).total_cmp(&inertia_of(b)))
            .unwrap();
        for seed in 0..10 {
            let r = kmeans(&x, 2, &mut RngState::new(seed), &KMeansConfig::default()).unwrap();
            let same = |i: usize, j: usize| r.assignments[i] == r.assignments[j];
            assert!(same(0, 1) && same(2, 3) && !same(0, 2));
            assert_eq!(best[0] == best[1], same(0, 1));
            assert!((r.inertia - inertia_of(&best)).abs() < 1e-12);
            let mut cents: Vec<Vec<f64>> = r.centroids.row_iter().map(<[f64]>::to_vec).collect();
            cents.sort_by(|a, b| a[0].total_cmp(&b[0]));
            assert_eq!(cents, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
        }
    }

    #[test]
    fn identical_rows_have_zero_inertia() {
        let x = Matrix::filled(6, 3, 1.5);
        let r = kmeans(&x, 2, &mut RngState::new(0), &KMeansConfig::default()).unwrap();
        assert_eq!(r.inertia, 0.0);
        assert!(r.assignments.iter().all(|&a| a < 2));
    }

    #[test]
    fn k_larger_than_n_fails() {
        let x = Matrix::zeros(2, 2);
        assert!(kmeans(&x, 3, &mut RngState::new(0), &KMeansConfig::default()).is_err());
    }

    #[test]
    fn inertia_never_increases() {
        for seed in 0..20 {
            let mut rng = RngState::new(seed);
            let x = Matrix::from_vec(60, 4, (0..240).map(|_| rng.normal()).collect()).unwrap();
            let r = kmeans(&x, 5, &mut rng, &KMeansConfig::default()).unwrap();
            for w in r.inertia_history.windows(2) {
                assert!(w[1] <= w[0], "{:?}", r.inertia_history);
            }
        }
    }

    #[test]
    fn silhouette_hand_example() {
        let x = Matrix::from_vec(4, 1, vec![0.0, 0.1, 10.0, 10.1]).unwrap();
        let s = silhouette_values(&x, &[0, 0, 1, 1], Metric::Euclidean).unwrap();
        assert!((s[0] - 0.990_049_751_243_781_1).abs() < 1e-12);
    }

    #[test]
    fn singleton_scores_zero_and_one_cluster_fails() {
        let x = Matrix::from_vec(3, 1, vec![0.0, 0.1, 5.0]).unwrap();
        let s = silhouette_values(&x, &[0, 0, 1], Metric::Euclidean).unwrap();
        assert_eq!(s[2], 0.0);
        assert!(silhouette_values(&x, &[1, 1, 1], Metric::Euclidean).is_err());
    }

    #[test]
    fn silhouette_matches_oracle_and_relabeling() {
        for seed in 0..10 {
            let mut rng = RngState::new(seed);
            let n = 30 + rng.below(40);
            let k = 2 + rng.below(4);
            let x = Matrix::from_vec(n, 3, (0..n * 3).map(|_| rng.normal()).collect()).unwrap();
            let mut a: Vec<usize> = (0..n).map(|i| i % k).collect();
            rng.shuffle(&mut a);
            for metric in [Metric::Cosine, Metric::Euclidean] {
                let got = silhouette_values(&x, &a, metric).unwrap();
                let want = silhouette_oracle(&x, &a, metric);
                for (g, w) in got.iter().zip(&want) {
                    assert!((g - w).abs() < 1e-9);
                    assert!((-1.0..=1.0).contains(g));
                }
                let permuted: Vec<usize> = a.iter().map(|&c| (c + 1) % k).collect();
                assert_eq!(silhouette_values(&x, &permuted, metric).unwrap(), got);
            }
        }
    }

    #[test]
    fn candidate_list_for_six_classes() {
        assert_eq!(candidate_counts(6, 1000), vec![2, 3, 6, 12, 18]);
        assert_eq!(candidate_counts(10, 1000), vec![3, 5, 10, 20, 30]);
        assert_eq!(candidate_counts(3, 1000), vec![2, 3, 6, 9]);
        assert_eq!(candidate_counts(6, 10), vec![2, 3, 6, 10]);
    }

    fn blobs(count: usize, per: usize, seed: u64) -> Matrix {
        // unit centers at least 0.6 apart, per-axis noise 8·sqrt(d) times smaller
        let d = 16;
        let mut rng = RngState::new(seed);
        let mut centers: Vec<Vec<f64>> = Vec::new();
        while centers.len() < count {
            let c: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            let c = crate::numeric::l2_normalize(&c).unwrap();
            if centers.iter().all(|o| squared_euclidean(o, &c).sqrt() > 0.6) {
                centers.push(c);
            }
        }
        let sigma = 0.6 / 8.0 / (d as f64).sqrt();
        let mut rows = Vec::new();
        for c in &centers {
            for _ in 0..per {
                rows.push(c.iter().map(|v| 5.0 * (v + sigma * rng.normal())).collect());
            }
        }
        Matrix::from_rows(&rows).unwrap()
    }

    #[test]
    fn estimate_picks_true_count() {
        let x = blobs(12, 15, 3);
        let e = estimate_class_count(&x, 6, &RngState::new(1), &EstimateConfig::default()).unwrap();
        assert_eq!(e.chosen, 12, "{:?}", e.candidate_scores);
        let x = blobs(6, 15, 4);
        let e = estimate_class_count(&x, 6, &RngState::new(1), &EstimateConfig::default()).unwrap();
        assert_eq!(e.chosen, 6, "{:?}", e.candidate_scores);
        let again = estimate_class_count(&x, 6, &RngState::new(1), &EstimateConfig::default()).unwrap();
        assert_eq!(again, e);
        assert!(estimate_class_count(&Matrix::zeros(1, 2), 6, &RngState::new(0), &EstimateConfig::default()).is_err());
    }
}
