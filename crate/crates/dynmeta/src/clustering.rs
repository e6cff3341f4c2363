//! Cluster assigners for task construction: DBSCAN for heterogeneous tasks,
//! K-means for homogeneous ablations and zero-shot scoring, plus pseudo-label
//! derivation with small-cluster dropout.

use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

/// Marker for points assigned to no cluster.
pub const NOISE: i64 = -1;

/// n points of d real coordinates, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl PointSet {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<PointSet> {
        if data.len() != n * d {
            return Err(Error::Shape(format!(
                "{} values for {}x{} point set",
                data.len(),
                n,
                d
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("point coordinates".into()));
        }
        Ok(PointSet { n, d, data })
    }

    pub fn empty(d: usize) -> PointSet {
        PointSet {
            n: 0,
            d,
            data: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d.max(1))
    }

    /// Scale every point to unit Euclidean norm (zero vectors left alone).
    pub fn unit_normalized(&self) -> PointSet {
        let mut out = self.clone();
        for i in 0..self.n {
            let row = &mut out.data[i * self.d..(i + 1) * self.d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                for v in row.iter_mut() {
                    *v /= norm;
                }
            }
        }
        out
    }

    pub fn squared_dist(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (self.point(i), self.point(j));
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
    }
}

/// Per-point cluster labels; ids are contiguous from 0, noise is [`NOISE`].
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterAssignment {
    pub labels: Vec<i64>,
    pub num_clusters: usize,
    /// Set for DBSCAN output only.
    pub core_flags: Option<Vec<bool>>,
}

impl ClusterAssignment {
    pub fn cluster_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0usize; self.num_clusters];
        for &l in &self.labels {
            if l >= 0 {
                sizes[l as usize] += 1;
            }
        }
        sizes
    }

    pub fn noise_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l == NOISE).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbscanParams {
    pub eps: f64,
    pub min_samples: usize,
}

impl DbscanParams {
    pub fn new(eps: f64, min_samples: usize) -> Result<DbscanParams> {
        if !(eps > 0.0) {
            return Err(Error::Argument(format!("eps must be > 0, got {eps}")));
        }
        if min_samples == 0 {
            return Err(Error::Argument("min_samples must be >= 1".into()));
        }
        Ok(DbscanParams { eps, min_samples })
    }
}

/// Euclidean DBSCAN.
///
/// A point is core iff its closed eps-ball holds at least `min_samples`
/// points (itself included). Clusters are connected components of core
/// points under mutual eps-reachability; non-core points within eps of a
/// core point join the cluster of their lowest-index core neighbor; the rest
/// are noise. Cluster ids are assigned by ascending minimum member index, so
/// the labeling is canonical.
pub fn dbscan(points: &PointSet, params: &DbscanParams) -> ClusterAssignment {
    let n = points.len();
    if n == 0 {
        return ClusterAssignment {
            labels: Vec::new(),
            num_clusters: 0,
            core_flags: Some(Vec::new()),
        };
    }
    let eps2 = params.eps * params.eps;

    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in (i + 1)..n {
            if points.squared_dist(i, j) <= eps2 {
                neighbors[i].push(j);
                neighbors[j].push(i);
            }
        }
    }
    let core: Vec<bool> = (0..n)
        .map(|i| neighbors[i].len() + 1 >= params.min_samples)
        .collect();

    // Components of the core subgraph, discovered in index order so raw
    // component ids already ascend with the minimum core index.
    let mut comp = vec![usize::MAX; n];
    let mut next = 0usize;
    let mut stack = Vec::new();
    for i in 0..n {
        if !core[i] || comp[i] != usize::MAX {
            continue;
        }
        comp[i] = next;
        stack.push(i);
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && comp[q] == usize::MAX {
                    comp[q] = next;
                    stack.push(q);
                }
            }
        }
        next += 1;
    }

    let mut labels = vec![NOISE; n];
    for i in 0..n {
        if core[i] {
            labels[i] = comp[i] as i64;
        } else if let Some(&c) = neighbors[i].iter().find(|&&q| core[q]) {
            // neighbors are stored ascending, so this is the lowest-index core
            labels[i] = comp[c] as i64;
        }
    }

    // Canonicalize: order clusters by their minimum member index (borders
    // included), then re-densify.
    let mut min_member = vec![usize::MAX; next];
    for (i, &l) in labels.iter().enumerate() {
        if l >= 0 {
            let c = l as usize;
            if i < min_member[c] {
                min_member[c] = i;
            }
        }
    }
    let mut order: Vec<usize> = (0..next).collect();
    order.sort_by_key(|&c| min_member[c]);
    let mut remap = vec![0i64; next];
    for (new_id, &old) in order.iter().enumerate() {
        remap[old] = new_id as i64;
    }
    for l in labels.iter_mut() {
        if *l >= 0 {
            *l = remap[*l as usize];
        }
    }

    ClusterAssignment {
        labels,
        num_clusters: next,
        core_flags: Some(core),
    }
}

/// Lloyd's K-means with seeded initialization from k distinct data points.
/// An emptied cluster is re-seeded to the point farthest from its assigned
/// centroid. Returns the assignment and the centroids.
pub fn kmeans(
    points: &PointSet,
    k: usize,
    max_iters: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(ClusterAssignment, PointSet)> {
    let n = points.len();
    let d = points.dim();
    if n == 0 {
        return Err(Error::Argument("kmeans needs at least one point".into()));
    }
    if k == 0 || k > n {
        return Err(Error::Argument(format!(
            "k must be in 1..={n}, got {k}"
        )));
    }

    let mut centroids: Vec<Vec<f64>> = sample(rng, n, k)
        .into_iter()
        .map(|i| points.point(i).to_vec())
        .collect();
    // sentinel so the first assignment pass always counts as a change
    let mut assign = vec![usize::MAX; n];

    let dist2 = |p: &[f64], c: &[f64]| -> f64 {
        p.iter().zip(c).map(|(x, y)| (x - y) * (x - y)).sum()
    };

    for _ in 0..max_iters {
        // assignment step; ties break to the lowest centroid index
        let mut changed = false;
        for i in 0..n {
            let p = points.point(i);
            let mut best = 0usize;
            let mut best_d = dist2(p, &centroids[0]);
            for (c, cen) in centroids.iter().enumerate().skip(1) {
                let dd = dist2(p, cen);
                if dd < best_d {
                    best_d = dd;
                    best = c;
                }
            }
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        // update step
        let mut counts = vec![0usize; k];
        let mut sums = vec![vec![0.0f64; d]; k];
        for i in 0..n {
            counts[assign[i]] += 1;
            for (s, &x) in sums[assign[i]].iter_mut().zip(points.point(i)) {
                *s += x;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for (cc, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cc = s / counts[c] as f64;
                }
            }
        }

        // re-seed any emptied cluster to the point farthest from its centroid
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far = 0usize;
            let mut far_d = -1.0;
            for i in 0..n {
                if counts[assign[i]] <= 1 {
                    continue; // do not orphan another cluster
                }
                let dd = dist2(points.point(i), &centroids[assign[i]]);
                if dd > far_d {
                    far_d = dd;
                    far = i;
                }
            }
            counts[assign[far]] -= 1;
            counts[c] += 1;
            centroids[c] = points.point(far).to_vec();
            assign[far] = c;
        }
    }

    let labels = assign.iter().map(|&a| a as i64).collect();
    let centroid_data = centroids.into_iter().flatten().collect();
    Ok((
        ClusterAssignment {
            labels,
            num_clusters: k,
            core_flags: None,
        },
        PointSet::new(k, d, centroid_data)?,
    ))
}

/// Result of [`make_pseudo_labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabels {
    /// Class index per kept point, contiguous from 0.
    pub labels: Vec<usize>,
    /// Original indices of the kept points.
    pub kept: Vec<usize>,
    pub num_classes: usize,
}

/// Turn a cluster assignment into training targets. Noise points are never
/// kept; with `drop_small`, clusters below `min_size` members are excluded
/// too. Surviving cluster ids are re-densified preserving ascending order.
pub fn make_pseudo_labels(
    assignment: &ClusterAssignment,
    drop_small: bool,
    min_size: usize,
) -> PseudoLabels {
    let sizes = assignment.cluster_sizes();
    let surviving: Vec<bool> = sizes
        .iter()
        .map(|&s| s > 0 && (!drop_small || s >= min_size))
        .collect();
    let mut remap = vec![usize::MAX; sizes.len()];
    let mut next = 0usize;
    for (c, &ok) in surviving.iter().enumerate() {
        if ok {
            remap[c] = next;
            next += 1;
        }
    }
    let mut labels = Vec::new();
    let mut kept = Vec::new();
    for (i, &l) in assignment.labels.iter().enumerate() {
        if l >= 0 && surviving[l as usize] {
            kept.push(i);
            labels.push(remap[l as usize]);
        }
    }
    PseudoLabels {
        labels,
        kept,
        num_classes: next,
    }
}
