//! k-means scenario clustering, k selection by silhouette and cluster
//! validity indices.
//!
//! Distances are Euclidean and every tie resolves to the lowest index.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub n_restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            max_iter: 300,
            n_restarts: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub seed: u64,
}

impl ClusterModel {
    pub fn dim(&self) -> usize {
        self.centroids.first().map_or(0, Vec::len)
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &a in &self.assignments {
            sizes[a] += 1;
        }
        sizes
    }
}

/// JSON has no infinity: infinite indices are written as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClusterQuality {
    pub silhouette: f64,
    #[serde(deserialize_with = "null_as_infinity")]
    pub calinski_harabasz: f64,
    #[serde(deserialize_with = "null_as_infinity")]
    pub davies_bouldin: f64,
}

fn null_as_infinity<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

pub fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    squared_distance(a, b).sqrt()
}

/// Index and squared distance of the nearest centroid.
fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.iter().enumerate() {
        let d = squared_distance(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn check_matrix(matrix: &[Vec<f64>]) -> Result<usize> {
    let dim = matrix.first().map_or(0, Vec::len);
    if let Some(row) = matrix.iter().find(|r| r.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: row.len(),
        });
    }
    Ok(dim)
}

fn kmeans_plus_plus(matrix: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = matrix.len();
    let mut centroids = vec![matrix[rng.gen_range(0..n)].clone()];
    let mut d2: Vec<f64> = matrix.iter().map(|p| squared_distance(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = None;
            for (i, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    chosen = Some(i);
                    if target < d {
                        break;
                    }
                    target -= d;
                }
            }
            chosen.expect("positive total has a positive entry")
        } else {
            rng.gen_range(0..n)
        };
        let c = matrix[pick].clone();
        for (p, d) in matrix.iter().zip(d2.iter_mut()) {
            *d = d.min(squared_distance(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

fn means(matrix: &[Vec<f64>], assignments: &[usize], k: usize, dim: usize) -> (Vec<Vec<f64>>, Vec<usize>) {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &a) in matrix.iter().zip(assignments) {
        counts[a] += 1;
        for (s, v) in sums[a].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        if c > 0 {
            s.iter_mut().for_each(|v| *v /= c as f64);
        }
    }
    (sums, counts)
}

struct LloydRun {
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    inertia: f64,
    /// Inertia after each assignment step.
    trace: Vec<f64>,
}

fn lloyd(matrix: &[Vec<f64>], mut centroids: Vec<Vec<f64>>, max_iter: usize) -> LloydRun {
    let k = centroids.len();
    let dim = matrix[0].len();
    let mut assignments: Vec<usize> = Vec::new();
    let mut trace = Vec::new();
    for _ in 0..max_iter.max(1) {
        let (next, inertia): (Vec<usize>, f64) = {
            let pairs: Vec<(usize, f64)> = matrix.iter().map(|p| nearest(p, &centroids)).collect();
            let inertia = pairs.iter().map(|p| p.1).sum();
            (pairs.into_iter().map(|p| p.0).collect(), inertia)
        };
        trace.push(inertia);
        let converged = next == assignments;
        assignments = next;
        if converged {
            break;
        }
        let (mut updated, mut counts) = means(matrix, &assignments, k, dim);
        // Reseed each empty cluster at the point farthest from its centroid.
        for j in 0..k {
            if counts[j] > 0 {
                continue;
            }
            let mut far = (0, -1.0);
            for (i, p) in matrix.iter().enumerate() {
                if counts[assignments[i]] <= 1 {
                    continue;
                }
                let d = squared_distance(p, &updated[assignments[i]]);
                if d > far.1 {
                    far = (i, d);
                }
            }
            if far.1 < 0.0 {
                continue;
            }
            let i = far.0;
            counts[assignments[i]] -= 1;
            assignments[i] = j;
            counts[j] = 1;
            let (recomputed, _) = means(matrix, &assignments, k, dim);
            updated = recomputed;
        }
        centroids = updated;
    }
    // Leave assignments consistent with the final centroids even when the
    // iteration budget ran out.
    let pairs: Vec<(usize, f64)> = matrix.iter().map(|p| nearest(p, &centroids)).collect();
    let inertia = pairs.iter().map(|p| p.1).sum();
    LloydRun {
        centroids,
        assignments: pairs.into_iter().map(|p| p.0).collect(),
        inertia,
        trace,
    }
}

/// One sweep of single-point transfers: moves a point whenever doing so
/// lowers the total inertia, accounting for both centroid shifts. Returns
/// whether any point moved. Escapes Lloyd fixed points that differ from a
/// better partition by one point.
fn hartigan_sweep(matrix: &[Vec<f64>], assignments: &mut [usize], k: usize) -> bool {
    let dim = matrix[0].len();
    let (mut centroids, mut counts) = means(matrix, assignments, k, dim);
    let mut moved = false;
    for (i, p) in matrix.iter().enumerate() {
        let a = assignments[i];
        if counts[a] <= 1 {
            continue;
        }
        let na = counts[a] as f64;
        let removal = na / (na - 1.0) * squared_distance(p, &centroids[a]);
        let mut best: Option<(usize, f64)> = None;
        for b in (0..k).filter(|&b| b != a) {
            let nb = counts[b] as f64;
            let addition = nb / (nb + 1.0) * squared_distance(p, &centroids[b]);
            if best.is_none_or(|(_, v)| addition < v) {
                best = Some((b, addition));
            }
        }
        let Some((b, addition)) = best else { continue };
        if addition >= removal * (1.0 - 1e-12) {
            continue;
        }
        let nb = counts[b] as f64;
        for d in 0..dim {
            centroids[a][d] = (na * centroids[a][d] - p[d]) / (na - 1.0);
            centroids[b][d] = (nb * centroids[b][d] + p[d]) / (nb + 1.0);
        }
        counts[a] -= 1;
        counts[b] += 1;
        assignments[i] = b;
        moved = true;
    }
    moved
}

/// Lloyd iterations alternated with transfer sweeps until neither changes
/// the partition. Inertia never increases along the way.
fn refine(matrix: &[Vec<f64>], seeds: Vec<Vec<f64>>, max_iter: usize) -> LloydRun {
    let k = seeds.len();
    let dim = matrix[0].len();
    let mut run = lloyd(matrix, seeds, max_iter);
    for _ in 0..max_iter.max(1) {
        let mut assignments = run.assignments.clone();
        if !hartigan_sweep(matrix, &mut assignments, k) {
            break;
        }
        let (centroids, _) = means(matrix, &assignments, k, dim);
        let next = lloyd(matrix, centroids, max_iter);
        if next.inertia >= run.inertia {
            break;
        }
        let mut trace = std::mem::take(&mut run.trace);
        trace.extend(&next.trace);
        run = LloydRun { trace, ..next };
    }
    run
}

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Lloyd's algorithm refined by single-point transfers, from k-means++
/// seeds; best of `n_restarts` by inertia
/// (ties go to the earliest restart). Each restart draws from its own
/// stream of the seeded generator, so results do not depend on scheduling.
pub fn kmeans_fit(matrix: &[Vec<f64>], k: usize, seed: u64, config: &KMeansConfig) -> Result<ClusterModel> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if matrix.len() < k {
        return Err(Error::TooFew {
            what: "rows for k-means",
            needed: k,
            got: matrix.len(),
        });
    }
    check_matrix(matrix)?;
    let runs: Vec<LloydRun> = (0..config.n_restarts.max(1))
        .into_par_iter()
        .map(|r| {
            let mut rng = restart_rng(seed, r);
            let seeds = kmeans_plus_plus(matrix, k, &mut rng);
            let run = refine(matrix, seeds, config.max_iter);
            debug_assert!(
                run.trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12) + 1e-12),
                "inertia increased: {:?}",
                run.trace
            );
            run
        })
        .collect();
    let best = runs
        .into_iter()
        .reduce(|best, run| if run.inertia < best.inertia { run } else { best })
        .expect("at least one restart");
    Ok(ClusterModel {
        k,
        centroids: best.centroids,
        assignments: best.assignments,
        inertia: best.inertia,
        seed,
    })
}

/// Per-iteration inertia of a single seeded run, for diagnostics.
pub fn lloyd_trace(matrix: &[Vec<f64>], k: usize, seed: u64, max_iter: usize) -> Result<Vec<f64>> {
    if matrix.len() < k || k == 0 {
        return Err(Error::TooFew {
            what: "rows for k-means",
            needed: k.max(1),
            got: matrix.len(),
        });
    }
    let mut rng = restart_rng(seed, 0);
    let seeds = kmeans_plus_plus(matrix, k, &mut rng);
    Ok(refine(matrix, seeds, max_iter).trace)
}

/// Groups row indices by label, in label order.
fn groups(assignments: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut g: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &a) in assignments.iter().enumerate() {
        g.entry(a).or_default().push(i);
    }
    g
}

fn check_labels(matrix: &[Vec<f64>], assignments: &[usize]) -> Result<()> {
    if matrix.len() != assignments.len() {
        return Err(Error::DimensionMismatch {
            expected: matrix.len(),
            got: assignments.len(),
        });
    }
    check_matrix(matrix).map(|_| ())
}

/// Mean silhouette. Points in singleton clusters score 0, as do points
/// with `a = b = 0`.
pub fn silhouette_score(matrix: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    check_labels(matrix, assignments)?;
    let groups = groups(assignments);
    if groups.len() < 2 {
        return Err(Error::TooFew {
            what: "distinct clusters for silhouette",
            needed: 2,
            got: groups.len(),
        });
    }
    let total: f64 = (0..matrix.len())
        .into_par_iter()
        .map(|i| {
            let own = assignments[i];
            if groups[&own].len() == 1 {
                return 0.0;
            }
            let mut a = 0.0;
            let mut b = f64::INFINITY;
            for (&label, members) in &groups {
                let sum: f64 = members.iter().map(|&j| distance(&matrix[i], &matrix[j])).sum();
                if label == own {
                    a = sum / (members.len() - 1) as f64;
                } else {
                    b = b.min(sum / members.len() as f64);
                }
            }
            let denom = a.max(b);
            if denom == 0.0 {
                0.0
            } else {
                (b - a) / denom
            }
        })
        .collect::<Vec<f64>>()
        .into_iter()
        .sum();
    Ok(total / matrix.len() as f64)
}

fn centroids_of(matrix: &[Vec<f64>], groups: &BTreeMap<usize, Vec<usize>>) -> Vec<Vec<f64>> {
    let dim = matrix[0].len();
    groups
        .values()
        .map(|members| {
            let mut c = vec![0.0; dim];
            for &i in members {
                for (cv, v) in c.iter_mut().zip(&matrix[i]) {
                    *cv += v;
                }
            }
            c.iter_mut().for_each(|v| *v /= members.len() as f64);
            c
        })
        .collect()
}

/// Between/within dispersion ratio scaled by `(N - k) / (k - 1)`. Infinite
/// when every cluster has zero spread.
pub fn calinski_harabasz(matrix: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    check_labels(matrix, assignments)?;
    let groups = groups(assignments);
    let (n, k) = (matrix.len(), groups.len());
    if k < 2 || k >= n {
        return Err(Error::InvalidArgument(format!(
            "Calinski-Harabasz needs 2 <= k < N, got k = {k}, N = {n}"
        )));
    }
    let centroids = centroids_of(matrix, &groups);
    let dim = matrix[0].len();
    let mut overall = vec![0.0; dim];
    for p in matrix {
        for (o, v) in overall.iter_mut().zip(p) {
            *o += v / n as f64;
        }
    }
    let mut between = 0.0;
    let mut within = 0.0;
    for (members, c) in groups.values().zip(&centroids) {
        between += members.len() as f64 * squared_distance(c, &overall);
        within += members.iter().map(|&i| squared_distance(&matrix[i], c)).sum::<f64>();
    }
    if within == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(between * (n - k) as f64 / (within * (k - 1) as f64))
}

/// Mean over clusters of the worst `(s_i + s_j) / d(c_i, c_j)`, with `s` the
/// mean distance to the own centroid. Coincident centroids give infinity.
pub fn davies_bouldin(matrix: &[Vec<f64>], assignments: &[usize]) -> Result<f64> {
    check_labels(matrix, assignments)?;
    let groups = groups(assignments);
    let k = groups.len();
    if k < 2 {
        return Err(Error::TooFew {
            what: "distinct clusters for Davies-Bouldin",
            needed: 2,
            got: k,
        });
    }
    let centroids = centroids_of(matrix, &groups);
    let spread: Vec<f64> = groups
        .values()
        .zip(&centroids)
        .map(|(m, c)| m.iter().map(|&i| distance(&matrix[i], c)).sum::<f64>() / m.len() as f64)
        .collect();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let d = distance(&centroids[i], &centroids[j]);
            let ratio = if d == 0.0 {
                f64::INFINITY
            } else {
                (spread[i] + spread[j]) / d
            };
            worst = worst.max(ratio);
        }
        total += worst;
    }
    Ok(total / k as f64)
}

pub fn cluster_quality(matrix: &[Vec<f64>], assignments: &[usize]) -> Result<ClusterQuality> {
    Ok(ClusterQuality {
        silhouette: silhouette_score(matrix, assignments)?,
        calinski_harabasz: calinski_harabasz(matrix, assignments)?,
        davies_bouldin: davies_bouldin(matrix, assignments)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSelection {
    pub best_k: usize,
    /// `(k, silhouette)` for every k tried.
    pub curve: Vec<(usize, f64)>,
}

/// Fits k-means for every k in range and keeps the silhouette maximizer
/// (ties go to the smaller k).
pub fn select_k(
    matrix: &[Vec<f64>],
    k_min: usize,
    k_max: usize,
    seed: u64,
    config: &KMeansConfig,
) -> Result<KSelection> {
    if !(2 <= k_min && k_min <= k_max && k_max < matrix.len()) {
        return Err(Error::InvalidArgument(format!(
            "k range {k_min}..={k_max} invalid for {} rows (need 2 <= k_min <= k_max <= rows - 1)",
            matrix.len()
        )));
    }
    let mut curve = Vec::with_capacity(k_max - k_min + 1);
    for k in k_min..=k_max {
        let model = kmeans_fit(matrix, k, seed, config)?;
        curve.push((k, silhouette_score(matrix, &model.assignments)?));
    }
    let best_k = curve
        .iter()
        .fold(None, |best: Option<(usize, f64)>, &(k, s)| match best {
            Some((_, bs)) if bs >= s => best,
            _ => Some((k, s)),
        })
        .expect("non-empty range")
        .0;
    Ok(KSelection { best_k, curve })
}

/// Nearest centroid for an already-normalized feature vector.
pub fn assign_nearest(model: &ClusterModel, normalized: &[f64]) -> Result<usize> {
    if normalized.len() != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: normalized.len(),
        });
    }
    Ok(nearest(normalized, &model.centroids).0)
}

/// Counts of (label, cluster) pairs: `table[label][cluster]`.
pub fn contingency_table(labels: &[usize], assignments: &[usize]) -> Vec<Vec<usize>> {
    let rows = labels.iter().max().map_or(0, |m| m + 1);
    let cols = assignments.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0; cols]; rows];
    for (&l, &a) in labels.iter().zip(assignments) {
        table[l][a] += 1;
    }
    table
}

/// Fraction of points belonging to the majority label of their cluster.
pub fn purity(labels: &[usize], assignments: &[usize]) -> f64 {
    if labels.is_empty() {
        return 1.0;
    }
    let table = contingency_table(labels, assignments);
    let cols = table.first().map_or(0, Vec::len);
    let majority: usize = (0..cols)
        .map(|c| table.iter().map(|row| row[c]).max().unwrap_or(0))
        .sum();
    majority as f64 / labels.len() as f64
}
