//! Group formation by k-means over user features, group-level rating
//! aggregation, and a 2-D PCA projection for plotting the clusters.

use std::collections::BTreeMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataio::{FeatureMatrix, RatingsTable};
use crate::error::{Error, Result};
use crate::numerics::{dot, Matrix};

/// User → group labels with the centroids that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAssignment {
    labels: Vec<usize>,
    centroids: Matrix,
    objective: f64,
    /// Objective after every centroid update, in order.
    objective_trace: Vec<f64>,
    iterations: usize,
    converged: bool,
}

impl GroupAssignment {
    /// Builds an assignment from explicit labels; centroids are the member
    /// means of `features`.
    pub fn from_labels(features: &FeatureMatrix, labels: Vec<usize>, k: usize) -> Result<Self> {
        if labels.len() != features.entity_count() {
            return Err(Error::shape("GroupAssignment::from_labels", labels.len(), features.entity_count()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index {
                what: "group labels",
                index: bad,
                len: k,
            });
        }
        let centroids = centroid_means(features, &labels, k);
        let objective = objective(features, &labels, &centroids);
        Ok(Self {
            labels,
            centroids,
            objective,
            objective_trace: vec![objective],
            iterations: 0,
            converged: true,
        })
    }

    pub fn k(&self) -> usize {
        self.centroids.rows()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, entity: usize) -> usize {
        self.labels[entity]
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn objective(&self) -> f64 {
        self.objective
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    /// Member lists, one per group, in ascending entity order.
    pub fn members(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.k()];
        for (u, &g) in self.labels.iter().enumerate() {
            out[g].push(u);
        }
        out
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn centroid_means(features: &FeatureMatrix, labels: &[usize], k: usize) -> Matrix {
    let dim = features.dim();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (u, &g) in labels.iter().enumerate() {
        counts[g] += 1;
        sums.row_mut(g).iter_mut().zip(features.row(u)).for_each(|(s, x)| *s += x);
    }
    for (g, &n) in counts.iter().enumerate() {
        if n > 0 {
            sums.row_mut(g).iter_mut().for_each(|s| *s /= n as f64);
        }
    }
    sums
}

fn objective(features: &FeatureMatrix, labels: &[usize], centroids: &Matrix) -> f64 {
    labels
        .iter()
        .enumerate()
        .map(|(u, &g)| sq_dist(features.row(u), centroids.row(g)))
        .sum()
}

fn nearest(x: &[f64], centroids: &Matrix, current: Option<usize>) -> usize {
    let mut best = current.unwrap_or(0);
    let mut best_d = sq_dist(x, centroids.row(best));
    for g in 0..centroids.rows() {
        let d = sq_dist(x, centroids.row(g));
        // strict improvement only, so ties keep the current label
        if d < best_d {
            best = g;
            best_d = d;
        }
    }
    best
}

fn kmeans_pp_seeds(features: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = features.entity_count();
    let mut seeds = vec![rng.random_range(0..n)];
    let mut d2: Vec<f64> = (0..n).map(|u| sq_dist(features.row(u), features.row(seeds[0]))).collect();
    while seeds.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut pick = n - 1;
            for (u, &d) in d2.iter().enumerate() {
                if d > 0.0 {
                    if target < d {
                        pick = u;
                        break;
                    }
                    target -= d;
                }
            }
            // floating-point leftovers must not select an already-chosen point
            while d2[pick] == 0.0 {
                pick -= 1;
            }
            pick
        } else {
            // every remaining point coincides with a seed
            let free: Vec<usize> = (0..n).filter(|u| !seeds.contains(u)).collect();
            free[rng.random_range(0..free.len())]
        };
        seeds.push(next);
        for (u, d) in d2.iter_mut().enumerate() {
            *d = d.min(sq_dist(features.row(u), features.row(next)));
        }
    }
    seeds
}

/// Lloyd's algorithm from k-means++ seeds.
///
/// Stops when an assignment pass changes no label or after `max_iter`
/// centroid updates. A cluster that empties is re-seeded with the point
/// farthest from its own centroid.
pub fn kmeans(features: &FeatureMatrix, k: usize, seed: u64, max_iter: usize) -> Result<GroupAssignment> {
    let n = features.entity_count();
    if k == 0 || max_iter == 0 {
        return Err(Error::Config(format!("kmeans needs k ≥ 1 and max_iter ≥ 1 (k={k}, max_iter={max_iter})")));
    }
    if k > n {
        return Err(Error::Config(format!("kmeans: k={k} exceeds entity count {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeds = kmeans_pp_seeds(features, k, &mut rng);
    let mut centroids = Matrix::zeros(k, features.dim());
    for (g, &u) in seeds.iter().enumerate() {
        centroids.row_mut(g).copy_from_slice(features.row(u));
    }
    let mut labels: Vec<usize> = (0..n).map(|u| nearest(features.row(u), &centroids, None)).collect();

    let mut trace: Vec<f64> = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    loop {
        centroids = centroid_means(features, &labels, k);
        reseed_empty(features, &mut labels, &mut centroids);
        let obj = objective(features, &labels, &centroids);
        if let Some(&prev) = trace.last() {
            if obj > prev + 1e-9 * (1.0 + prev.abs()) {
                return Err(Error::Invariant(format!(
                    "kmeans objective increased from {prev} to {obj} at iteration {iterations}"
                )));
            }
        }
        trace.push(obj);
        iterations += 1;

        let next: Vec<usize> = (0..n)
            .map(|u| nearest(features.row(u), &centroids, Some(labels[u])))
            .collect();
        if next == labels {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        labels = next;
    }

    Ok(GroupAssignment {
        objective: *trace.last().expect("at least one update"),
        labels,
        centroids,
        objective_trace: trace,
        iterations,
        converged,
    })
}

fn reseed_empty(features: &FeatureMatrix, labels: &mut [usize], centroids: &mut Matrix) {
    let k = centroids.rows();
    loop {
        let mut counts = vec![0usize; k];
        labels.iter().for_each(|&g| counts[g] += 1);
        let Some(empty) = counts.iter().position(|&c| c == 0) else {
            return;
        };
        let farthest = (0..labels.len())
            .filter(|&u| counts[labels[u]] > 1)
            .map(|u| (u, sq_dist(features.row(u), centroids.row(labels[u]))))
            .fold(None, |best: Option<(usize, f64)>, (u, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((u, d)),
            });
        let Some((u, _)) = farthest else { return };
        let old = labels[u];
        labels[u] = empty;
        centroids.row_mut(empty).copy_from_slice(features.row(u));
        let members: Vec<usize> = (0..labels.len()).filter(|&v| labels[v] == old).collect();
        let row = centroids.row_mut(old);
        row.iter_mut().for_each(|c| *c = 0.0);
        for &v in &members {
            row.iter_mut().zip(features.row(v)).for_each(|(c, x)| *c += x);
        }
        row.iter_mut().for_each(|c| *c /= members.len() as f64);
    }
}

/// A group-level observed rating `r_{g,i}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRating {
    pub group: usize,
    pub item: usize,
    pub rating: f64,
    /// Number of members whose ratings were averaged.
    pub contributors: usize,
}

/// Group-item-rating tuples sorted by `(group, item)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupRatingsTable {
    tuples: Vec<GroupRating>,
    n_groups: usize,
    scale: (f64, f64),
}

impl GroupRatingsTable {
    pub fn tuples(&self) -> &[GroupRating] {
        &self.tuples
    }

    pub fn len(&self) -> usize {
        self.tuples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tuples.is_empty()
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn scale(&self) -> (f64, f64) {
        self.scale
    }

    /// Tuples of one group (contiguous thanks to the sort order).
    pub fn group(&self, g: usize) -> &[GroupRating] {
        let start = self.tuples.partition_point(|t| t.group < g);
        let end = self.tuples.partition_point(|t| t.group <= g);
        &self.tuples[start..end]
    }
}

/// Average-strategy aggregation: `r_{g,i}` is the mean rating of the
/// members of `g` who rated `i` in `table`.
pub fn aggregate_group_ratings(table: &RatingsTable, assignment: &GroupAssignment) -> Result<GroupRatingsTable> {
    if assignment.labels().len() != table.n_users() {
        return Err(Error::shape(
            "aggregate_group_ratings",
            format!("{} labelled users", assignment.labels().len()),
            format!("{} users in table", table.n_users()),
        ));
    }
    let mut acc: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for r in table.ratings() {
        acc.entry((assignment.label(r.user), r.item)).or_default().push(r.value);
    }
    let tuples = acc
        .into_iter()
        .map(|((group, item), mut values)| {
            // summation order independent of member order
            values.sort_by(f64::total_cmp);
            GroupRating {
                group,
                item,
                rating: values.iter().sum::<f64>() / values.len() as f64,
                contributors: values.len(),
            }
        })
        .collect();
    Ok(GroupRatingsTable {
        tuples,
        n_groups: assignment.k(),
        scale: table.scale(),
    })
}

/// Projects each entity onto the top two principal components of the
/// mean-centered features. Each axis is signed so that its largest-magnitude
/// loading is positive.
pub fn project_2d(features: &FeatureMatrix) -> Result<Vec<[f64; 2]>> {
    let n = features.entity_count();
    let d = features.dim();
    if d < 2 {
        return Err(Error::Domain(format!("projection needs dim ≥ 2, got {d}")));
    }
    if n < 2 {
        return Err(Error::Domain(format!("projection needs at least 2 entities, got {n}")));
    }
    let mut mean = vec![0.0; d];
    for u in 0..n {
        mean.iter_mut().zip(features.row(u)).for_each(|(m, x)| *m += x);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Matrix::zeros(n, d);
    for u in 0..n {
        centered
            .row_mut(u)
            .iter_mut()
            .zip(features.row(u).iter().zip(&mean))
            .for_each(|(c, (x, m))| *c = x - m);
    }
    let total: f64 = centered.as_slice().iter().map(|v| v * v).sum();
    if total == 0.0 {
        return Ok(vec![[0.0, 0.0]; n]);
    }

    let axes = top_principal_axes(&centered, 2);
    Ok((0..n)
        .map(|u| {
            let row = centered.row(u);
            [dot(row, &axes[0]), dot(row, &axes[1])]
        })
        .collect())
}

/// `y = Xᵀ(X v)`.
fn gram_apply(x: &Matrix, v: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; x.cols()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let s = dot(row, v);
        if s != 0.0 {
            out.iter_mut().zip(row).for_each(|(o, a)| *o += s * a);
        }
    }
    out
}

fn orthonormalize(block: &mut [Vec<f64>]) {
    let d = block[0].len();
    for j in 0..block.len() {
        for attempt in 0..=d {
            for i in 0..j {
                let (head, tail) = block.split_at_mut(j);
                let p = dot(&head[i], &tail[0]);
                tail[0].iter_mut().zip(&head[i]).for_each(|(v, q)| *v -= p * q);
            }
            let norm = dot(&block[j], &block[j]).sqrt();
            if norm > 1e-12 {
                block[j].iter_mut().for_each(|v| *v /= norm);
                break;
            }
            // rank-deficient direction: restart from a unit vector
            let mut e = vec![0.0; d];
            e[(j + attempt) % d] = 1.0;
            block[j] = e;
        }
    }
}

/// Cyclic Jacobi eigendecomposition of a small symmetric matrix given
/// row-major. Returns eigenvalues and column eigenvectors (as rows of the
/// returned vectors), sorted by descending eigenvalue.
pub(crate) fn symmetric_eigen(a: &[f64], n: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
    let mut a = a.to_vec();
    let mut v = vec![0.0; n * n];
    for k in 0..n {
        v[k * n + k] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum();
        if off <= 1e-30 * scale.max(1e-300) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order.iter().map(|&i| (0..n).map(|k| v[k * n + i]).collect()).collect();
    (values, vectors)
}

/// Block subspace iteration with Rayleigh–Ritz for the leading
/// eigenvectors of `XᵀX`.
fn top_principal_axes(x: &Matrix, count: usize) -> Vec<Vec<f64>> {
    let d = x.cols();
    let block_size = d.min(x.rows()).max(count).min(d).clamp(count, count + 6);
    let block_size = block_size.min(d);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut block: Vec<Vec<f64>> = (0..block_size)
        .map(|_| (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();
    orthonormalize(&mut block);

    let mut prev: Vec<f64> = vec![f64::NAN; count];
    for _ in 0..5000 {
        let applied: Vec<Vec<f64>> = block.iter().map(|q| gram_apply(x, q)).collect();
        // Rayleigh–Ritz on the current block
        let b = block.len();
        let mut t = vec![0.0; b * b];
        for i in 0..b {
            for j in 0..b {
                t[i * b + j] = dot(&block[i], &applied[j]);
            }
        }
        for i in 0..b {
            for j in i + 1..b {
                let s = 0.5 * (t[i * b + j] + t[j * b + i]);
                t[i * b + j] = s;
                t[j * b + i] = s;
            }
        }
        let (values, vectors) = symmetric_eigen(&t, b);
        let rotate = |src: &[Vec<f64>]| -> Vec<Vec<f64>> {
            vectors
                .iter()
                .map(|w| {
                    let mut out = vec![0.0; d];
                    for (coef, q) in w.iter().zip(src) {
                        out.iter_mut().zip(q).for_each(|(o, qv)| *o += coef * qv);
                    }
                    out
                })
                .collect()
        };
        let ritz = rotate(&block);
        let ritz_applied = rotate(&applied);
        let top = values[0].abs().max(1e-300);
        let residual_ok = (0..count).all(|j| {
            let r: f64 = ritz_applied[j]
                .iter()
                .zip(&ritz[j])
                .map(|(a, q)| (a - values[j] * q).powi(2))
                .sum::<f64>()
                .sqrt();
            r <= 1e-10 * top
        });
        let stable = (0..count).all(|j| (values[j] - prev[j]).abs() <= 1e-14 * top);
        prev = values[..count].to_vec();
        if residual_ok || stable {
            return ritz.into_iter().take(count).map(sign_normalized).collect();
        }
        block = ritz_applied;
        orthonormalize(&mut block);
    }
    let mut block = block;
    orthonormalize(&mut block);
    block.into_iter().take(count).map(sign_normalized).collect()
}

fn sign_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let pivot = v
        .iter()
        .copied()
        .enumerate()
        .fold((0, 0.0f64), |(bi, bv), (i, x)| if x.abs() > bv.abs() + 1e-12 { (i, x) } else { (bi, bv) });
    if pivot.1 < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    v
}

/// Writes `user_id,group,x,y` rows.
pub fn write_projection_csv(
    mut out: impl Write,
    user_ids: impl Fn(usize) -> String,
    assignment: &GroupAssignment,
    coords: &[[f64; 2]],
) -> Result<()> {
    writeln!(out, "user_id,group,x,y")?;
    for (u, c) in coords.iter().enumerate() {
        writeln!(out, "{},{},{},{}", user_ids(u), assignment.label(u), c[0], c[1])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use crate::dataio::Rating;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn features(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::new(Matrix::from_rows(rows).unwrap()).unwrap()
    }

    fn random_features(seed: u64, n: usize, d: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        features(&rows)
    }

    #[test]
    fn k_equal_one_gives_global_mean() {
        let f = random_features(1, 12, 3);
        let a = kmeans(&f, 1, 0, 50).unwrap();
        assert!(a.labels().iter().all(|&l| l == 0));
        let mut total = 0.0;
        for c in 0..3 {
            let mean = (0..12).map(|u| f.row(u)[c]).sum::<f64>() / 12.0;
            assert_abs_diff_eq!(a.centroids().get(0, c), mean, epsilon = 1e-12);
            total += (0..12).map(|u| (f.row(u)[c] - mean).powi(2)).sum::<f64>();
        }
        assert_abs_diff_eq!(a.objective(), total, epsilon = 1e-12);
    }

    #[test]
    fn k_equal_n_separates_every_point() {
        let f = random_features(2, 7, 2);
        let a = kmeans(&f, 7, 3, 50).unwrap();
        let mut labels = a.labels().to_vec();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 7);
        assert_abs_diff_eq!(a.objective(), 0.0, epsilon = 1e-20);
    }

    #[test]
    fn config_errors() {
        let f = random_features(3, 4, 2);
        assert!(matches!(kmeans(&f, 5, 0, 10), Err(Error::Config(_))));
        assert!(matches!(kmeans(&f, 0, 0, 10), Err(Error::Config(_))));
        assert!(matches!(kmeans(&f, 2, 0, 0), Err(Error::Config(_))));
    }

    #[test]
    fn duplicate_points_do_not_break_seeding() {
        let f = features(&[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0], vec![0.0, 0.0]]);
        let a = kmeans(&f, 3, 0, 20).unwrap();
        assert_eq!(a.members().iter().filter(|m| !m.is_empty()).count(), 3);
        assert!(a.objective() < 1e-12);
    }

    #[test]
    fn centroids_are_member_means() {
        let f = random_features(4, 60, 5);
        let a = kmeans(&f, 6, 11, 100).unwrap();
        let means = centroid_means(&f, a.labels(), 6);
        for (x, y) in means.as_slice().iter().zip(a.centroids().as_slice()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(a.objective(), objective(&f, a.labels(), a.centroids()), epsilon = 1e-9);
    }

    fn rating(user: usize, item: usize, value: f64) -> Rating {
        Rating {
            user,
            item,
            value,
            timestamp: None,
        }
    }

    fn table(ratings: Vec<Rating>, n_users: usize, n_items: usize) -> RatingsTable {
        RatingsTable::from_ratings(
            ratings,
            (0..n_users).map(|u| format!("u{u}")).collect(),
            (0..n_items).map(|i| format!("i{i}")).collect(),
            (1.0, 5.0),
        )
        .unwrap()
    }

    #[test]
    fn aggregation_examples() {
        let t = table(
            vec![rating(0, 0, 5.0), rating(1, 0, 3.0), rating(2, 1, 2.0), rating(2, 0, 4.0)],
            3,
            3,
        );
        let f = random_features(5, 3, 2);
        let a = GroupAssignment::from_labels(&f, vec![0, 0, 1], 2).unwrap();
        let g = aggregate_group_ratings(&t, &a).unwrap();
        assert_eq!(
            g.tuples(),
            &[
                GroupRating { group: 0, item: 0, rating: 4.0, contributors: 2 },
                GroupRating { group: 1, item: 0, rating: 4.0, contributors: 1 },
                GroupRating { group: 1, item: 1, rating: 2.0, contributors: 1 },
            ]
        );
        // item 2 unrated: no tuple; singleton group 1 mirrors user 2
        assert!(g.tuples().iter().all(|t| t.item != 2));
        assert_eq!(g.group(1).len(), 2);
    }

    #[test]
    fn aggregation_requires_full_coverage() {
        let t = table(vec![rating(0, 0, 5.0)], 2, 1);
        let f = random_features(5, 1, 2);
        let a = GroupAssignment::from_labels(&f, vec![0], 1).unwrap();
        assert!(aggregate_group_ratings(&t, &a).is_err());
    }

    #[test]
    fn projection_of_axis_aligned_data_is_identity_up_to_sign() {
        let rows = vec![vec![3.0, 0.5], vec![-3.0, -0.5], vec![1.0, -1.5], vec![-1.0, 1.5]];
        // centered, with sums of squares 20 and 5 and no cross term
        let cross: f64 = rows.iter().map(|r| r[0] * r[1]).sum();
        assert_eq!(cross, 0.0);
        let p = project_2d(&features(&rows)).unwrap();
        for (r, c) in rows.iter().zip(&p) {
            assert_abs_diff_eq!(c[0].abs(), r[0].abs(), epsilon = 1e-10);
            assert_abs_diff_eq!(c[1].abs(), r[1].abs(), epsilon = 1e-10);
        }
    }

    #[test]
    fn projection_of_identical_points_is_origin() {
        let p = project_2d(&features(&vec![vec![1.0, 2.0, 3.0]; 4])).unwrap();
        assert!(p.iter().all(|c| *c == [0.0, 0.0]));
    }

    #[test]
    fn projection_degenerate_inputs() {
        assert!(project_2d(&features(&[vec![1.0, 2.0]])).is_err());
        assert!(project_2d(&features(&[vec![1.0], vec![2.0]])).is_err());
    }

    #[test]
    fn jacobi_diagonalizes() {
        let a = [4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0];
        let (vals, vecs) = symmetric_eigen(&a, 3);
        for (lambda, v) in vals.iter().zip(&vecs) {
            for r in 0..3 {
                let av: f64 = (0..3).map(|c| a[r * 3 + c] * v[c]).sum();
                assert_abs_diff_eq!(av, lambda * v[r], epsilon = 1e-12);
            }
        }
        assert!(vals[0] >= vals[1] && vals[1] >= vals[2]);
    }

    #[test]
    fn projection_matches_svd_reconstruction_error() {
        for seed in 0..10 {
            let f = random_features(100 + seed, 5, 4);
            let p = project_2d(&f).unwrap();
            let mut x = nalgebra::DMatrix::<f64>::zeros(5, 4);
            for c in 0..4 {
                let mean = (0..5).map(|u| f.row(u)[c]).sum::<f64>() / 5.0;
                for u in 0..5 {
                    x[(u, c)] = f.row(u)[c] - mean;
                }
            }
            let sv = x.clone().svd(false, false).singular_values;
            let mut sv: Vec<f64> = sv.iter().copied().collect();
            sv.sort_by(|a, b| b.total_cmp(a));
            let optimal_residual: f64 = sv[2..].iter().map(|s| s * s).sum();
            let total: f64 = x.iter().map(|v| v * v).sum();
            let captured: f64 = p.iter().map(|c| c[0] * c[0] + c[1] * c[1]).sum();
            assert_abs_diff_eq!(total - captured, optimal_residual, epsilon = 1e-9);
            let first: f64 = p.iter().map(|c| c[0] * c[0]).sum();
            assert_abs_diff_eq!(first, sv[0] * sv[0], epsilon = 1e-9);
        }
    }

    proptest! {
        #[test]
        fn kmeans_is_deterministic_and_monotone(seed in 0u64..200, n in 3usize..40, k in 1usize..5) {
            let k = k.min(n);
            let f = random_features(seed, n, 3);
            let a = kmeans(&f, k, seed, 100).unwrap();
            let b = kmeans(&f, k, seed, 100).unwrap();
            prop_assert_eq!(a.labels(), b.labels());
            for w in a.objective_trace().windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-12);
            }
        }

        #[test]
        fn aggregation_is_bounded_and_order_free(seed in 0u64..300) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n_users = 8;
            let mut ratings: Vec<Rating> = Vec::new();
            for u in 0..n_users {
                for i in 0..5 {
                    if rng.random_bool(0.6) {
                        ratings.push(rating(u, i, rng.random_range(1.0..5.0)));
                    }
                }
            }
            let labels: Vec<usize> = (0..n_users).map(|_| rng.random_range(0..3)).collect();
            let f = random_features(seed, n_users, 2);
            let a = GroupAssignment::from_labels(&f, labels.clone(), 3).unwrap();
            let forward = aggregate_group_ratings(&table(ratings.clone(), n_users, 5), &a).unwrap();
            ratings.reverse();
            let backward = aggregate_group_ratings(&table(ratings.clone(), n_users, 5), &a).unwrap();
            prop_assert_eq!(&forward, &backward);
            for t in forward.tuples() {
                let vals: Vec<f64> = ratings.iter().filter(|r| labels[r.user] == t.group && r.item == t.item).map(|r| r.value).collect();
                let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lo <= t.rating && t.rating <= hi);
                prop_assert_eq!(vals.len(), t.contributors);
            }
        }
    }
}
