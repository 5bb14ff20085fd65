//! Per-voxel streamline-cluster connectivity features.
//!
//! A voxel's feature vector has one entry per streamline cluster. It starts
//! out binary (does the cluster pass through the voxel?), empty voxels then
//! inherit the clusters of their neighbors, and every remaining zero entry is
//! replaced by an unnormalized Gaussian of the distance to the nearest voxel
//! of that cluster.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::voxelgrid::{distance_field, Connectivity, Mask, VoxelGrid};

/// For each of K streamline clusters, the grid voxels it passes through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterIntersectionMap {
    grid: VoxelGrid,
    clusters: Vec<Vec<usize>>,
}

impl ClusterIntersectionMap {
    /// Each cluster's indices are sorted and deduplicated. Empty clusters are
    /// allowed.
    pub fn new(grid: VoxelGrid, mut clusters: Vec<Vec<usize>>) -> Result<Self> {
        if clusters.is_empty() {
            return Err(Error::Config("cluster map needs at least one cluster".into()));
        }
        for c in &mut clusters {
            c.sort_unstable();
            c.dedup();
            if let Some(&last) = c.last() {
                if last >= grid.len() {
                    return Err(Error::IndexOutOfRange { index: last, len: grid.len() });
                }
            }
        }
        Ok(Self { grid, clusters })
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    /// Number of clusters K.
    pub fn k(&self) -> usize {
        self.clusters.len()
    }

    pub fn cluster(&self, j: usize) -> &[usize] {
        &self.clusters[j]
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    /// Indices of clusters with no intersecting voxels.
    pub fn empty_clusters(&self) -> Vec<usize> {
        (0..self.k()).filter(|&j| self.clusters[j].is_empty()).collect()
    }

    /// Grid-sized inverse index: the clusters passing through each voxel.
    fn clusters_per_voxel(&self) -> Vec<Vec<u32>> {
        let mut inv = vec![Vec::new(); self.grid.len()];
        for (j, c) in self.clusters.iter().enumerate() {
            for &v in c {
                inv[v].push(j as u32);
            }
        }
        inv
    }
}

/// Kernel width and dilation adjacency.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothingConfig {
    pub sigma: f64,
    pub connectivity: Connectivity,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { sigma: 1.0, connectivity: Connectivity::TwentySix }
    }
}

impl SmoothingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Unnormalized Gaussian `exp(-d^2 / (2 sigma^2))`; equals 1 at d = 0.
pub fn gaussian(d: f64, sigma: f64) -> f64 {
    (-(d * d) / (2.0 * sigma * sigma)).exp()
}

/// Per-voxel feature vectors over a mask, voxel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    mask: Mask,
    k: usize,
    values: Vec<f64>,
}

impl FeatureField {
    pub fn new(mask: Mask, k: usize, values: Vec<f64>) -> Result<Self> {
        if k == 0 {
            return Err(Error::Shape("feature length K must be >= 1".into()));
        }
        if values.len() != mask.len() * k {
            return Err(Error::Shape(format!(
                "expected {} values for {} voxels x K={}, got {}",
                mask.len() * k,
                mask.len(),
                k,
                values.len()
            )));
        }
        Ok(Self { mask, k, values })
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Feature vector of the voxel at mask position `pos`.
    pub fn vector(&self, pos: usize) -> &[f64] {
        &self.values[pos * self.k..(pos + 1) * self.k]
    }

    pub fn vectors(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.k)
    }

    /// Mask positions whose vector is entirely zero.
    pub fn zero_vectors(&self) -> Vec<usize> {
        self.vectors()
            .enumerate()
            .filter(|(_, v)| v.iter().all(|&x| x == 0.0))
            .map(|(i, _)| i)
            .collect()
    }

    /// Smallest entry over all vectors.
    pub fn min_value(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Binary stage: entry (i, j) is 1 iff cluster j passes through voxel i.
pub fn intersection_features(clusters: &ClusterIntersectionMap, mask: &Mask) -> Result<FeatureField> {
    clusters.grid().check_same(mask.grid())?;
    let k = clusters.k();
    let lookup = mask.lookup_table();
    let mut values = vec![0.0; mask.len() * k];
    for (j, c) in clusters.clusters().iter().enumerate() {
        for &v in c {
            let pos = lookup[v];
            if pos != crate::voxelgrid::NOT_IN_MASK {
                values[pos as usize * k + j] = 1.0;
            }
        }
    }
    FeatureField::new(mask.clone(), k, values)
}

/// Fills empty voxels with the clusters that intersect any of their
/// neighbors. Non-empty voxels are returned untouched.
pub fn dilate_clusters(
    field: &FeatureField,
    clusters: &ClusterIntersectionMap,
    mask: &Mask,
    connectivity: Connectivity,
) -> FeatureField {
    let k = field.k();
    let grid = mask.grid();
    let per_voxel = clusters.clusters_per_voxel();
    let mut out = field.clone();
    for (pos, &v) in mask.voxels().iter().enumerate() {
        if field.vector(pos).iter().any(|&x| x != 0.0) {
            continue;
        }
        let row = &mut out.values[pos * k..(pos + 1) * k];
        for nb in grid.neighbor_indices(v, connectivity) {
            for &j in &per_voxel[nb] {
                row[j as usize] = 1.0;
            }
        }
    }
    out
}

/// Smoothed field plus the clusters that could not contribute.
#[derive(Debug, Clone)]
pub struct SmoothedFeatures {
    pub field: FeatureField,
    /// Clusters with no intersecting voxels; their entries stay 0.
    pub empty_clusters: Vec<usize>,
}

/// Replaces every zero entry (i, j) with `G(d_ij)`, where `d_ij` is the
/// distance from voxel i to the nearest voxel of cluster j's original
/// intersection set.
pub fn smooth_clusters(
    field: &FeatureField,
    clusters: &ClusterIntersectionMap,
    mask: &Mask,
    cfg: &SmoothingConfig,
) -> Result<SmoothedFeatures> {
    cfg.validate()?;
    clusters.grid().check_same(mask.grid())?;
    if field.k() != clusters.k() || field.len() != mask.len() {
        return Err(Error::Shape(format!(
            "field is {}x{}, clusters/mask are {}x{}",
            field.len(),
            field.k(),
            mask.len(),
            clusters.k()
        )));
    }
    let k = field.k();
    let empty_clusters = clusters.empty_clusters();

    // One column of kernel values per nonempty cluster; computed in parallel,
    // collected in cluster order.
    let columns: Vec<Option<Vec<f64>>> = (0..k)
        .into_par_iter()
        .map(|j| {
            let target = clusters.cluster(j);
            if target.is_empty() {
                return Ok(None);
            }
            let df = distance_field(mask, target)?;
            Ok(Some(df.values.iter().map(|&d| gaussian(d, cfg.sigma)).collect()))
        })
        .collect::<Result<_>>()?;

    let mut out = field.clone();
    for (j, col) in columns.iter().enumerate() {
        let Some(col) = col else { continue };
        for (pos, &g) in col.iter().enumerate() {
            let entry = &mut out.values[pos * k + j];
            if *entry == 0.0 {
                *entry = g;
            }
        }
    }
    if !empty_clusters.is_empty() {
        log::warn!("clusters without intersecting voxels: {empty_clusters:?}");
    }
    Ok(SmoothedFeatures { field: out, empty_clusters })
}

/// Intersection, dilation and smoothing in sequence.
pub fn extract_features(
    clusters: &ClusterIntersectionMap,
    mask: &Mask,
    cfg: &SmoothingConfig,
) -> Result<SmoothedFeatures> {
    cfg.validate()?;
    let binary = intersection_features(clusters, mask)?;
    let dilated = dilate_clusters(&binary, clusters, mask, cfg.connectivity);
    smooth_clusters(&dilated, clusters, mask, cfg)
}

/// K x K matrix whose row r is the base vector rotated left by r.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedInput {
    k: usize,
    data: Vec<f64>,
}

impl AugmentedInput {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.k..(r + 1) * self.k]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }
}

pub fn augment(vector: &[f64]) -> AugmentedInput {
    let k = vector.len();
    let mut data = vec![0.0; k * k];
    augment_into(vector, &mut data);
    AugmentedInput { k, data }
}

/// Writes the augmented matrix for `vector` into `out` (row-major, K*K).
pub fn augment_into(vector: &[f64], out: &mut [f64]) {
    let k = vector.len();
    assert_eq!(out.len(), k * k, "augmentation buffer must hold K*K values");
    for (r, row) in out.chunks_exact_mut(k.max(1)).enumerate() {
        row[..k - r].copy_from_slice(&vector[r..]);
        row[k - r..].copy_from_slice(&vector[..r]);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (VoxelGrid, Mask) {
        let g = VoxelGrid::with_dims([5, 5, 5]).unwrap();
        (g, Mask::full(g))
    }

    #[test]
    fn binary_stage() {
        let (g, mask) = setup();
        let i0 = g.linear_index([2, 2, 2]).unwrap();
        let i1 = g.linear_index([0, 0, 0]).unwrap();
        let mut clusters = vec![Vec::new(); 6];
        clusters[3].push(i0);
        clusters[1].push(i1);
        clusters[4].push(i1);
        let map = ClusterIntersectionMap::new(g, clusters).unwrap();
        let f = intersection_features(&map, &mask).unwrap();
        assert_eq!(f.vector(i0), &[0.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        assert_eq!(f.vector(i1), &[0.0, 1.0, 0.0, 0.0, 1.0, 0.0]);
        assert!(f.vector(g.linear_index([4, 4, 4]).unwrap()).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn grid_mismatch_is_error() {
        let (g, _) = setup();
        let other = Mask::full(VoxelGrid::with_dims([4, 5, 5]).unwrap());
        let map = ClusterIntersectionMap::new(g, vec![vec![0]]).unwrap();
        assert!(matches!(intersection_features(&map, &other), Err(Error::GridMismatch(..))));
    }

    #[test]
    fn dilation_rules() {
        let (g, mask) = setup();
        let center = g.linear_index([2, 2, 2]).unwrap();
        let diag = g.linear_index([3, 3, 3]).unwrap();
        let far = g.linear_index([0, 0, 4]).unwrap();
        let busy = g.linear_index([1, 1, 1]).unwrap();
        let mut clusters = vec![Vec::new(); 10];
        clusters[7].push(diag);
        clusters[2].push(busy);
        clusters[9].push(g.linear_index([0, 1, 1]).unwrap());
        let map = ClusterIntersectionMap::new(g, clusters).unwrap();
        let binary = intersection_features(&map, &mask).unwrap();
        let dilated = dilate_clusters(&binary, &map, &mask, Connectivity::TwentySix);

        // empty voxel with a corner neighbor in cluster 7
        assert_eq!(dilated.vector(center)[7], 1.0);
        // no intersecting neighbors
        assert!(dilated.vector(far).iter().all(|&x| x == 0.0));
        // non-empty voxel adjacent to cluster 9 stays as is
        assert_eq!(dilated.vector(busy), binary.vector(busy));
        assert_eq!(dilated.vector(busy)[9], 0.0);

        // 6-connectivity does not reach the corner neighbor
        let six = dilate_clusters(&binary, &map, &mask, Connectivity::Six);
        assert_eq!(six.vector(center)[7], 0.0);

        let twice = dilate_clusters(&dilated, &map, &mask, Connectivity::TwentySix);
        assert_eq!(twice, dilated);
    }

    #[test]
    fn kernel_values() {
        assert!((gaussian(1.0, 1.0) - 0.6065306597126334).abs() < 1e-12);
        assert!((gaussian(3.0, 1.0) - 0.011108996538242306).abs() < 1e-12);
        assert_eq!(gaussian(0.0, 1.0), 1.0);
    }

    #[test]
    fn smoothing_uses_original_sets() {
        let g = VoxelGrid::with_dims([7, 1, 1]).unwrap();
        let mask = Mask::full(g);
        let map = ClusterIntersectionMap::new(g, vec![vec![0]]).unwrap();
        let out = extract_features(&map, &mask, &SmoothingConfig::default()).unwrap();
        // voxel 1 dilated to 1.0; the rest decay from voxel 0, not voxel 1
        let col: Vec<f64> = out.field.vectors().map(|v| v[0]).collect();
        assert_eq!(col[0], 1.0);
        assert_eq!(col[1], 1.0);
        assert_eq!(col[2], gaussian(2.0, 1.0));
        assert_eq!(col[6], gaussian(6.0, 1.0));
        assert!(out.empty_clusters.is_empty());
    }

    #[test]
    fn smoothing_twice_is_noop() {
        let (g, mask) = setup();
        let map = ClusterIntersectionMap::new(g, vec![vec![0], vec![60, 61], vec![124]]).unwrap();
        let cfg = SmoothingConfig::default();
        let once = extract_features(&map, &mask, &cfg).unwrap().field;
        let twice = smooth_clusters(&once, &map, &mask, &cfg).unwrap().field;
        assert_eq!(once, twice);
        assert!(once.min_value() > 0.0);
    }

    #[test]
    fn empty_cluster_reported() {
        let (g, mask) = setup();
        let map = ClusterIntersectionMap::new(g, vec![vec![0], vec![]]).unwrap();
        let out = extract_features(&map, &mask, &SmoothingConfig::default()).unwrap();
        assert_eq!(out.empty_clusters, vec![1]);
        assert!(out.field.vectors().all(|v| v[1] == 0.0 && v[0] > 0.0));
        assert!(out.field.zero_vectors().is_empty());
    }

    #[test]
    fn single_cluster_covering_mask() {
        let (g, mask) = setup();
        let map = ClusterIntersectionMap::new(g, vec![mask.voxels().to_vec()]).unwrap();
        let out = extract_features(&map, &mask, &SmoothingConfig::default()).unwrap();
        assert!(out.field.vectors().all(|v| v == [1.0]));
    }

    #[test]
    fn bad_sigma_rejected() {
        let (g, mask) = setup();
        let map = ClusterIntersectionMap::new(g, vec![vec![0]]).unwrap();
        let cfg = SmoothingConfig { sigma: 0.0, ..Default::default() };
        assert!(extract_features(&map, &mask, &cfg).is_err());
    }

    #[test]
    fn augmentation_rows() {
        let m = augment(&[1.0, 2.0, 3.0]);
        assert_eq!(m.row(0), &[1.0, 2.0, 3.0]);
        assert_eq!(m.row(1), &[2.0, 3.0, 1.0]);
        assert_eq!(m.row(2), &[3.0, 1.0, 2.0]);
        assert!(augment(&[0.5; 4]).as_slice().iter().all(|&x| x == 0.5));
        assert_eq!(augment(&vec![0.1; 150]).as_slice().len(), 150 * 150);
    }
}
