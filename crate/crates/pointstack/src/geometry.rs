//! Point-set kernels: farthest-point sampling, k-nearest-neighbor grouping,
//! geometric affine normalization, and permutation utilities.
//!
//! Everything here is deterministic. Sampling starts from the point farthest
//! from the centroid and all ties break toward the lowest index, so a fixed
//! cloud always yields the same keypoints and groups.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{DenseMatrix, NodeId, Parameter, Scalar, Tape};

/// Spread guard in the geometric affine module.
pub const GEOMETRIC_AFFINE_EPSILON: f64 = 1e-5;

/// An unordered set of 3-D points with optional per-point part labels and an
/// optional instance-level class label.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
    pub point_labels: Option<Vec<u32>>,
    pub class_label: Option<u32>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidArgument("point cloud must not be empty".into()));
        }
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(
                "point cloud contains non-finite coordinates".into(),
            ));
        }
        Ok(PointCloud {
            points,
            point_labels: None,
            class_label: None,
        })
    }

    pub fn with_class(mut self, class: u32) -> Self {
        self.class_label = Some(class);
        self
    }

    pub fn with_point_labels(mut self, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels for {} points",
                labels.len(),
                self.points.len()
            )));
        }
        self.point_labels = Some(labels);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        false // construction guarantees at least one point
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn centroid(&self) -> [f64; 3] {
        let mut c = [0.0; 3];
        for p in &self.points {
            for (ci, &pi) in c.iter_mut().zip(p) {
                *ci += pi;
            }
        }
        let n = self.points.len() as f64;
        [c[0] / n, c[1] / n, c[2] / n]
    }

    /// Coordinates as an `N x 3` matrix in the requested precision.
    pub fn coords_matrix<S: Scalar>(&self) -> DenseMatrix<S> {
        let mut m = DenseMatrix::zeros(self.points.len(), 3);
        for (r, p) in self.points.iter().enumerate() {
            for (c, &v) in p.iter().enumerate() {
                m.set(r, c, S::from_f64(v));
            }
        }
        m
    }

    /// Reordered copy: row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &Permutation) -> Result<Self> {
        if perm.len() != self.points.len() {
            return Err(Error::InvalidArgument(format!(
                "permutation of length {} applied to {} points",
                perm.len(),
                self.points.len()
            )));
        }
        let points = perm.indices().iter().map(|&i| self.points[i]).collect();
        let point_labels = self
            .point_labels
            .as_ref()
            .map(|l| perm.indices().iter().map(|&i| l[i]).collect());
        Ok(PointCloud {
            points,
            point_labels,
            class_label: self.class_label,
        })
    }

    /// Apply the same offset to every point; labels untouched.
    pub fn translated(&self, offset: [f64; 3]) -> Self {
        let points = self
            .points
            .iter()
            .map(|p| [p[0] + offset[0], p[1] + offset[1], p[2] + offset[2]])
            .collect();
        PointCloud {
            points,
            point_labels: self.point_labels.clone(),
            class_label: self.class_label,
        }
    }

    /// Rotate every point about the z (up) axis; labels untouched.
    pub fn rotated_z(&self, angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        let points = self
            .points
            .iter()
            .map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]])
            .collect();
        PointCloud {
            points,
            point_labels: self.point_labels.clone(),
            class_label: self.class_label,
        }
    }
}

/// A bijection over `0..n`, stored as an index vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    indices: Vec<usize>,
}

impl Permutation {
    pub fn new(indices: Vec<usize>) -> Result<Self> {
        let n = indices.len();
        let mut seen = vec![false; n];
        for &i in &indices {
            if i >= n || seen[i] {
                return Err(Error::InvalidArgument(
                    "permutation indices must be a bijection over 0..n".into(),
                ));
            }
            seen[i] = true;
        }
        Ok(Permutation { indices })
    }

    pub fn identity(n: usize) -> Self {
        Permutation {
            indices: (0..n).collect(),
        }
    }

    /// Fisher-Yates shuffle of the identity.
    pub fn random<R: Rng>(n: usize, rng: &mut R) -> Self {
        let mut indices: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            indices.swap(i, j);
        }
        Permutation { indices }
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0usize; self.indices.len()];
        for (i, &p) in self.indices.iter().enumerate() {
            inv[p] = i;
        }
        Permutation { indices: inv }
    }

    /// Dense 0/1 matrix `P` with `P[i][perm[i]] = 1`, so `P * F` reorders the
    /// rows of `F` exactly like [`apply_permutation`].
    pub fn to_matrix<S: Scalar>(&self) -> DenseMatrix<S> {
        let n = self.indices.len();
        let mut m = DenseMatrix::zeros(n, n);
        for (i, &p) in self.indices.iter().enumerate() {
            m.set(i, p, S::one());
        }
        m
    }
}

/// Keypoints plus the indices of their k nearest parent points.
#[derive(Clone, Debug)]
pub struct NeighborhoodGroups {
    pub keypoint_indices: Vec<usize>,
    neighbor_indices: Vec<usize>,
    k: usize,
}

impl NeighborhoodGroups {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn group(&self, i: usize) -> &[usize] {
        &self.neighbor_indices[i * self.k..(i + 1) * self.k]
    }

    pub fn groups(&self) -> usize {
        self.keypoint_indices.len()
    }

    /// All neighbor indices, group by group; the gather order for grouped
    /// feature matrices.
    pub fn flat_neighbor_indices(&self) -> &[usize] {
        &self.neighbor_indices
    }
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Greedy max-min keypoint selection.
///
/// The first keypoint is the point farthest from the centroid; each next
/// keypoint maximizes the minimum distance to the chosen set. Ties break
/// toward the lowest index, so the selection is deterministic.
pub fn farthest_point_sample(cloud: &PointCloud, s: usize) -> Result<Vec<usize>> {
    let points = cloud.points();
    let n = points.len();
    if s == 0 || s > n {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {s} keypoints from {n} points"
        )));
    }
    let centroid = cloud.centroid();
    let mut best = 0;
    let mut best_d = dist2(points[0], centroid);
    for (i, &p) in points.iter().enumerate().skip(1) {
        let d = dist2(p, centroid);
        if d > best_d {
            best_d = d;
            best = i;
        }
    }

    let mut selected = Vec::with_capacity(s);
    selected.push(best);
    let mut min_d: Vec<f64> = points.iter().map(|&p| dist2(p, points[best])).collect();
    while selected.len() < s {
        let mut next = 0;
        let mut next_d = f64::NEG_INFINITY;
        for (i, &d) in min_d.iter().enumerate() {
            if d > next_d {
                next_d = d;
                next = i;
            }
        }
        selected.push(next);
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist2(points[i], points[next]);
            if nd < *d {
                *d = nd;
            }
        }
    }
    Ok(selected)
}

/// The `k` nearest points to `query`, as `(index, squared distance)` sorted
/// ascending by `(distance, index)`.
pub fn k_nearest(points: &[[f64; 3]], query: [f64; 3], k: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| (i, dist2(p, query)))
        .collect();
    all.sort_unstable_by(|a, b| {
        a.1.partial_cmp(&b.1)
            .expect("finite distances")
            .then(a.0.cmp(&b.0))
    });
    all.truncate(k);
    all
}

/// Group the `k` nearest parent points around each keypoint.
///
/// Keypoints are given as indices into the parent set, so each keypoint
/// groups itself at distance zero. Distance ties break toward the lowest
/// parent index.
pub fn knn_group(
    parent: &PointCloud,
    keypoint_indices: &[usize],
    k: usize,
) -> Result<NeighborhoodGroups> {
    let n = parent.len();
    if k == 0 || k > n {
        return Err(Error::InvalidArgument(format!(
            "cannot group {k} neighbors from {n} points"
        )));
    }
    if let Some(&bad) = keypoint_indices.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidArgument(format!(
            "keypoint index {bad} out of range for {n} points"
        )));
    }
    let mut neighbor_indices = Vec::with_capacity(keypoint_indices.len() * k);
    for &kp in keypoint_indices {
        let near = k_nearest(parent.points(), parent.points()[kp], k);
        neighbor_indices.extend(near.into_iter().map(|(i, _)| i));
    }
    Ok(NeighborhoodGroups {
        keypoint_indices: keypoint_indices.to_vec(),
        neighbor_indices,
        k,
    })
}

/// Normalize grouped features by their keypoint-centered offsets and spread,
/// then rescale per channel:
/// `alpha * (f - f_keypoint) / (sigma + eps) + beta`, where `sigma` is the
/// population standard deviation of all offsets in the group tensor.
///
/// `grouped` is `(S*k) x C` (k consecutive rows per keypoint) and
/// `keypoints` is `S x C`.
pub fn geometric_affine<S: Scalar>(
    tape: &mut Tape<S>,
    grouped: NodeId,
    keypoints: NodeId,
    alpha: &Parameter<S>,
    beta: &Parameter<S>,
    k: usize,
) -> Result<NodeId> {
    let (gn, gc) = tape.value(grouped).shape();
    let (kn, kc) = tape.value(keypoints).shape();
    if gc != kc || gn != kn * k {
        return Err(Error::InvalidArgument(format!(
            "geometric_affine: grouped {gn}x{gc} does not match {kn} keypoints x {k} neighbors"
        )));
    }
    if alpha.cols() != gc || beta.cols() != gc {
        return Err(Error::InvalidArgument(format!(
            "geometric_affine: alpha/beta width {} does not match {gc} channels",
            alpha.cols()
        )));
    }
    let expanded = tape.repeat_interleave_rows(keypoints, k)?;
    let offsets = tape.sub(grouped, expanded)?;
    let normalized = tape.normalize_global_std(offsets, S::from_f64(GEOMETRIC_AFFINE_EPSILON));
    tape.channel_affine(normalized, alpha, beta)
}

/// Row `i` of the result is row `perm[i]` of `m`; exact copies, so composing
/// with the inverse permutation reproduces the input bit for bit.
pub fn apply_permutation<S: Scalar>(
    m: &DenseMatrix<S>,
    perm: &Permutation,
) -> Result<DenseMatrix<S>> {
    if perm.len() != m.rows() {
        return Err(Error::InvalidArgument(format!(
            "permutation of length {} applied to {} rows",
            perm.len(),
            m.rows()
        )));
    }
    let mut out = DenseMatrix::zeros(m.rows(), m.cols());
    for (i, &p) in perm.indices().iter().enumerate() {
        out.row_mut(i).copy_from_slice(m.row(p));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn line_cloud(xs: &[f64]) -> PointCloud {
        PointCloud::new(xs.iter().map(|&x| [x, 0.0, 0.0]).collect()).unwrap()
    }

    #[test]
    fn fps_picks_extremes_on_a_line() {
        // centroid of {0, 1, 10} is 3.67; 10 is farthest, then 0.
        let cloud = line_cloud(&[0.0, 1.0, 10.0]);
        let sel = farthest_point_sample(&cloud, 2).unwrap();
        assert_eq!(sel, vec![2, 0]);
    }

    #[test]
    fn fps_with_s_equal_n_is_a_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<[f64; 3]> = (0..17)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(points).unwrap();
        let sel = farthest_point_sample(&cloud, 17).unwrap();
        let mut sorted = sel.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..17).collect::<Vec<_>>());
    }

    #[test]
    fn fps_rejects_oversampling() {
        let cloud = line_cloud(&[0.0, 1.0]);
        assert!(farthest_point_sample(&cloud, 3).is_err());
    }

    /// Exhaustive max-min oracle over all size-4 subsets.
    #[test]
    fn fps_square_corners_beat_center() {
        let pts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
            [0.5, 0.5, 0.0],
        ];
        let cloud = PointCloud::new(pts.clone()).unwrap();
        let sel = farthest_point_sample(&cloud, 4).unwrap();
        let mut sel_sorted = sel.clone();
        sel_sorted.sort_unstable();

        // Brute force: the subset maximizing the minimum pairwise distance.
        let mut best_subset = vec![];
        let mut best_score = f64::NEG_INFINITY;
        for a in 0..5 {
            for b in a + 1..5 {
                for c in b + 1..5 {
                    for d in c + 1..5 {
                        let subset = [a, b, c, d];
                        let mut min_d = f64::INFINITY;
                        for i in 0..4 {
                            for j in i + 1..4 {
                                min_d = min_d.min(dist2(pts[subset[i]], pts[subset[j]]));
                            }
                        }
                        if min_d > best_score {
                            best_score = min_d;
                            best_subset = subset.to_vec();
                        }
                    }
                }
            }
        }
        assert_eq!(sel_sorted, best_subset, "expected the four corners");
        assert_eq!(sel_sorted, vec![0, 1, 2, 3]);
    }

    /// Greedy invariant: at each step the chosen point's min distance to the
    /// prefix is at least that of every other remaining point.
    #[test]
    fn fps_greedy_invariant_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let n = rng.gen_range(4..64);
            let points: Vec<[f64; 3]> = (0..n)
                .map(|_| {
                    [
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                        rng.gen_range(-1.0..1.0),
                    ]
                })
                .collect();
            let cloud = PointCloud::new(points.clone()).unwrap();
            let s = rng.gen_range(2..=n);
            let sel = farthest_point_sample(&cloud, s).unwrap();
            for step in 1..sel.len() {
                let prefix = &sel[..step];
                let min_to_prefix = |i: usize| {
                    prefix
                        .iter()
                        .map(|&p| dist2(points[i], points[p]))
                        .fold(f64::INFINITY, f64::min)
                };
                let chosen = min_to_prefix(sel[step]);
                for i in 0..n {
                    if !prefix.contains(&i) {
                        assert!(
                            chosen >= min_to_prefix(i) - 1e-12,
                            "step {step}: {i} was farther than the chosen point"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn knn_groups_self_at_k1() {
        let cloud = line_cloud(&[0.0, 1.0, 10.0]);
        let groups = knn_group(&cloud, &[0, 1, 2], 1).unwrap();
        assert_eq!(groups.group(0), &[0]);
        assert_eq!(groups.group(1), &[1]);
        assert_eq!(groups.group(2), &[2]);
    }

    #[test]
    fn knn_sorts_by_distance_then_index() {
        let cloud = line_cloud(&[0.0, 1.0, 10.0]);
        let groups = knn_group(&cloud, &[1], 2).unwrap();
        assert_eq!(groups.group(0), &[1, 0]);
    }

    #[test]
    fn knn_tie_breaks_toward_lower_index() {
        // Points at 0, 2, and the keypoint at 1: both ends are distance 1.
        let cloud = line_cloud(&[0.0, 1.0, 2.0]);
        let groups = knn_group(&cloud, &[1], 2).unwrap();
        assert_eq!(groups.group(0), &[1, 0], "lower index wins the tie");

        let groups3 = knn_group(&cloud, &[1], 3).unwrap();
        assert_eq!(groups3.group(0), &[1, 0, 2]);
    }

    #[test]
    fn knn_rejects_oversized_k() {
        let cloud = line_cloud(&[0.0, 1.0]);
        assert!(knn_group(&cloud, &[0], 3).is_err());
    }

    #[test]
    fn knn_rows_have_nondecreasing_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let points: Vec<[f64; 3]> = (0..40)
            .map(|_| {
                [
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ]
            })
            .collect();
        let cloud = PointCloud::new(points.clone()).unwrap();
        let groups = knn_group(&cloud, &[3, 17, 31], 8).unwrap();
        for g in 0..groups.groups() {
            let kp = points[groups.keypoint_indices[g]];
            let ds: Vec<f64> = groups.group(g).iter().map(|&i| dist2(points[i], kp)).collect();
            for w in ds.windows(2) {
                assert!(w[0] <= w[1]);
            }
        }
    }

    #[test]
    fn permutation_identity_and_involution() {
        let m = DenseMatrix::from_rows(&[vec![1.0f64, 2.0], vec![3.0, 4.0]]).unwrap();
        let id = Permutation::identity(2);
        assert_eq!(apply_permutation(&m, &id).unwrap(), m);

        let swap = Permutation::new(vec![1, 0]).unwrap();
        let once = apply_permutation(&m, &swap).unwrap();
        let twice = apply_permutation(&once, &swap).unwrap();
        assert_eq!(twice, m);
    }

    #[test]
    fn permutation_inverse_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = Permutation::random(12, &mut rng);
        let m = DenseMatrix::<f64>::randn(12, 5, 1.0, &mut rng);
        let forward = apply_permutation(&m, &p).unwrap();
        let back = apply_permutation(&forward, &p.inverse()).unwrap();
        assert_eq!(back, m, "bit-exact round trip");

        // P^T P = I exactly for the dense representation.
        let pm = p.to_matrix::<f64>();
        let ptp = pm.transpose().matmul(&pm).unwrap();
        assert_eq!(ptp, DenseMatrix::identity(12));
    }

    #[test]
    fn permutation_rejects_non_bijections() {
        assert!(Permutation::new(vec![0, 0, 1]).is_err());
        assert!(Permutation::new(vec![0, 3]).is_err());
    }

    #[test]
    fn geometric_affine_collapses_to_beta_on_equal_features() {
        let mut tape = Tape::<f64>::new();
        let feats = tape.input(DenseMatrix::filled(4, 3, 2.5));
        let kp = tape.input(DenseMatrix::filled(2, 3, 2.5));
        let alpha = Parameter::new(DenseMatrix::filled(1, 3, 1.0));
        let beta = Parameter::new(DenseMatrix::from_rows(&[vec![7.0, 8.0, 9.0]]).unwrap());
        let out = geometric_affine(&mut tape, feats, kp, &alpha, &beta, 2).unwrap();
        let v = tape.value(out);
        for r in 0..4 {
            assert_eq!(v.row(r), &[7.0, 8.0, 9.0]);
        }
    }

    #[test]
    fn geometric_affine_normalizes_symmetric_offsets() {
        let d = 0.37;
        let mut tape = Tape::<f64>::new();
        let feats = tape.input(DenseMatrix::from_rows(&[vec![-d], vec![d]]).unwrap());
        let kp = tape.input(DenseMatrix::zeros(1, 1));
        let alpha = Parameter::new(DenseMatrix::filled(1, 1, 1.0));
        let beta = Parameter::new(DenseMatrix::zeros(1, 1));
        let out = geometric_affine(&mut tape, feats, kp, &alpha, &beta, 2).unwrap();
        let v = tape.value(out);
        assert!((v.get(0, 0) + 1.0).abs() < 1e-4, "got {}", v.get(0, 0));
        assert!((v.get(1, 0) - 1.0).abs() < 1e-4);
    }

    #[test]
    fn geometric_affine_zero_alpha_gives_beta() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut tape = Tape::<f64>::new();
        let f = tape.input(DenseMatrix::randn(6, 2, 1.0, &mut rng));
        let kp = tape.input(DenseMatrix::randn(3, 2, 1.0, &mut rng));
        let alpha = Parameter::new(DenseMatrix::zeros(1, 2));
        let beta = Parameter::new(DenseMatrix::filled(1, 2, 4.0));
        let out = geometric_affine(&mut tape, f, kp, &alpha, &beta, 2).unwrap();
        for &v in tape.value(out).data() {
            assert_eq!(v, 4.0);
        }
    }

    #[test]
    fn geometric_affine_unit_spread() {
        // With alpha=1, beta=0 the offsets come out with global std 1.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut tape = Tape::<f64>::new();
        let f = tape.input(DenseMatrix::randn(24, 4, 3.0, &mut rng));
        let kp = tape.input(DenseMatrix::randn(6, 4, 3.0, &mut rng));
        let alpha = Parameter::new(DenseMatrix::filled(1, 4, 1.0));
        let beta = Parameter::new(DenseMatrix::zeros(1, 4));
        let out = geometric_affine(&mut tape, f, kp, &alpha, &beta, 4).unwrap();
        let v = tape.value(out);
        let n = v.data().len() as f64;
        let mean: f64 = v.data().iter().sum::<f64>() / n;
        let var: f64 = v.data().iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n;
        assert!((var.sqrt() - 1.0).abs() < 1e-3, "std was {}", var.sqrt());
    }
}
