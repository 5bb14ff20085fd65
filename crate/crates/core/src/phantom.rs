//! Synthetic subjects with known parcellations: an ellipsoidal structure
//! split into connected regions, each traversed by its own subset of
//! streamline clusters, with optional tracking noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ClusterIntersectionMap;
use crate::train::init_centroids;
use crate::voxelgrid::{connected_components, Connectivity, Mask, VoxelGrid, NOT_IN_MASK};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Ellipsoid semi-axes in voxels, centered in the grid.
    pub semi_axes: [f64; 3],
    pub regions: usize,
    pub groups: usize,
    pub k: usize,
    /// Minimum streamlines per cluster; every voxel a cluster covers seeds at
    /// least one.
    pub streamlines_per_cluster: usize,
    /// Fraction of a region's clusters that also traverse one adjacent region.
    pub overlap_fraction: f64,
    pub spurious_probability: f64,
    /// Standard deviation of per-vertex streamline displacement, in voxels.
    pub jitter_std: f64,
    pub dropout_probability: f64,
    pub subjects: usize,
    /// Subjects `0..train_subjects` form the training split.
    pub train_subjects: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            dims: [24, 20, 16],
            spacing: [1.25; 3],
            semi_axes: [10.0, 8.0, 6.5],
            regions: 9,
            groups: 3,
            k: 24,
            streamlines_per_cluster: 400,
            overlap_fraction: 0.35,
            spurious_probability: 0.005,
            jitter_std: 0.2,
            dropout_probability: 0.0,
            subjects: 20,
            train_subjects: 16,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.regions < 2 {
            return bad(format!("regions must be >= 2, got {}", self.regions));
        }
        if self.k < self.regions {
            return bad(format!("k must be >= regions (k={}, regions={})", self.k, self.regions));
        }
        if self.groups == 0 || self.groups > self.regions {
            return bad(format!("groups must be in [1, regions], got {}", self.groups));
        }
        for (name, p) in [
            ("spurious_probability", self.spurious_probability),
            ("dropout_probability", self.dropout_probability),
            ("overlap_fraction", self.overlap_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must be in [0, 1], got {p}"));
            }
        }
        if !(self.jitter_std >= 0.0 && self.jitter_std.is_finite()) {
            return bad(format!("jitter_std must be >= 0, got {}", self.jitter_std));
        }
        if self.semi_axes.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return bad("semi_axes must be > 0".into());
        }
        if self.subjects == 0 || self.train_subjects > self.subjects {
            return bad(format!(
                "need subjects >= 1 and train_subjects <= subjects (got {} and {})",
                self.subjects, self.train_subjects
            ));
        }
        VoxelGrid::new(self.dims, self.spacing)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    pub index: usize,
    pub mask: Mask,
    pub clusters: ClusterIntersectionMap,
    /// Ground-truth region per mask voxel.
    pub regions: Vec<u32>,
    /// Coarse group per mask voxel.
    pub groups: Vec<u32>,
    /// Coarse group of each region.
    pub region_groups: Vec<u32>,
    pub seed: u64,
}

/// Shared anatomy of a cohort: mask, regions, groups and cluster wiring.
#[derive(Debug, Clone, PartialEq)]
pub struct PhantomLayout {
    pub mask: Mask,
    pub regions: Vec<u32>,
    pub region_groups: Vec<u32>,
    /// Regions traversed by each cluster; the first is the owner.
    pub cluster_regions: Vec<Vec<u32>>,
    pub directions: Vec<[f64; 3]>,
}

impl PhantomLayout {
    /// Clusters whose streamlines traverse `region`.
    pub fn signature(&self, region: u32) -> Vec<usize> {
        (0..self.cluster_regions.len()).filter(|&j| self.cluster_regions[j].contains(&region)).collect()
    }
}

/// splitmix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn subject_seed(seed: u64, index: usize) -> u64 {
    mix64(seed ^ index as u64)
}

fn ellipsoid_mask(cfg: &PhantomConfig) -> Result<Mask> {
    let grid = VoxelGrid::new(cfg.dims, cfg.spacing)?;
    let center: Vec<f64> = cfg.dims.iter().map(|&d| (d as f64 - 1.0) / 2.0).collect();
    let mut voxels = Vec::new();
    for i in 0..grid.len() {
        let c = grid.coord(i)?;
        let r: f64 = (0..3).map(|a| ((c[a] as f64 - center[a]) / cfg.semi_axes[a]).powi(2)).sum();
        if r <= 1.0 {
            voxels.push(i);
        }
    }
    Mask::new(grid, voxels)
}

/// Moves every fragment that is not the largest component of its region to
/// the neighboring region it touches most, until all regions are connected.
fn make_regions_connected(mask: &Mask, labels: &mut [u32], n: usize) -> Result<()> {
    let lookup = mask.lookup_table();
    let grid = mask.grid();
    for _ in 0..64 {
        let mut changed = false;
        for r in 0..n as u32 {
            let mut comps = connected_components(mask, labels, r, Connectivity::Six)?;
            if comps.len() <= 1 {
                continue;
            }
            comps.sort_by_key(|c| std::cmp::Reverse(c.len()));
            for frag in &comps[1..] {
                let mut votes = vec![0usize; n];
                for &v in frag {
                    for nb in grid.neighbor_indices(v, Connectivity::Six) {
                        let p = lookup[nb];
                        if p != NOT_IN_MASK && labels[p as usize] != r {
                            votes[labels[p as usize] as usize] += 1;
                        }
                    }
                }
                let target = (0..n).max_by_key(|&t| (votes[t], std::cmp::Reverse(t))).expect("n >= 1");
                if votes[target] == 0 {
                    continue;
                }
                for &v in frag {
                    labels[lookup[v] as usize] = target as u32;
                }
                changed = true;
            }
        }
        if !changed {
            return Ok(());
        }
    }
    Err(Error::Config("could not make phantom regions connected".into()))
}

/// Builds the subject-independent part of a cohort.
pub fn layout(cfg: &PhantomConfig) -> Result<PhantomLayout> {
    cfg.validate()?;
    let mask = ellipsoid_mask(cfg)?;
    if mask.len() < cfg.regions {
        return Err(Error::Config(format!("ellipsoid has {} voxels for {} regions", mask.len(), cfg.regions)));
    }
    let grid = *mask.grid();
    let coords: Vec<Vec<f64>> = mask
        .voxels()
        .iter()
        .map(|&v| grid.coord(v).map(|c| c.iter().map(|&x| x as f64).collect()))
        .collect::<Result<_>>()?;
    let km = init_centroids(&coords, cfg.regions, mix64(cfg.seed ^ 0x7265_6769_6f6e), 1)?;

    // relabel so region ids increase with centroid x, then y, then z
    let mut order: Vec<usize> = (0..cfg.regions).collect();
    order.sort_by(|&a, &b| {
        let (ca, cb) = (&km.centroids[a], &km.centroids[b]);
        ca.iter().zip(cb).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut rank = vec![0u32; cfg.regions];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new as u32;
    }
    let mut regions: Vec<u32> = km.assignments.iter().map(|&a| rank[a]).collect();
    make_regions_connected(&mask, &mut regions, cfg.regions)?;
    let sizes = crate::train::cluster_sizes(&regions.iter().map(|&r| r as usize).collect::<Vec<_>>(), cfg.regions);
    if sizes.contains(&0) {
        return Err(Error::Config("a phantom region ended up empty".into()));
    }

    let region_groups = group_runs(cfg.regions, cfg.groups);

    let adjacency = region_adjacency(&mask, &regions, cfg.regions);
    let mut rng = ChaCha8Rng::seed_from_u64(mix64(cfg.seed ^ 0x7769_7265));
    let mut cluster_regions: Vec<Vec<u32>> = (0..cfg.k).map(|j| vec![(j % cfg.regions) as u32]).collect();
    for (r, adj) in adjacency.iter().enumerate() {
        let own: Vec<usize> = (r..cfg.k).step_by(cfg.regions).collect();
        let shared = ((cfg.overlap_fraction * own.len() as f64).floor() as usize).min(own.len() - 1);
        let Some(partner) = (0..cfg.regions).filter(|&o| o != r).max_by_key(|&o| (adj[o], std::cmp::Reverse(o))) else {
            continue;
        };
        if adj[partner] == 0 {
            continue;
        }
        for &j in own.iter().skip(1).take(shared) {
            cluster_regions[j].push(partner as u32);
        }
    }
    let directions = (0..cfg.k).map(|_| random_unit(&mut rng)).collect();
    Ok(PhantomLayout { mask, regions, region_groups, cluster_regions, directions })
}

/// Contiguous runs of regions (ordered along x) per group. An exact split
/// moves one region from the last group to the first so groups differ in
/// size: 9 regions in 3 groups gives 4/3/2.
fn group_runs(regions: usize, groups: usize) -> Vec<u32> {
    let mut sizes: Vec<usize> = (0..groups).map(|g| regions / groups + usize::from(g < regions % groups)).collect();
    if groups > 1 && regions.is_multiple_of(groups) && sizes[groups - 1] > 1 {
        sizes[0] += 1;
        sizes[groups - 1] -= 1;
    }
    sizes.iter().enumerate().flat_map(|(g, &n)| std::iter::repeat_n(g as u32, n)).collect()
}

fn region_adjacency(mask: &Mask, regions: &[u32], n: usize) -> Vec<Vec<usize>> {
    let lookup = mask.lookup_table();
    let mut adj = vec![vec![0usize; n]; n];
    for (pos, &v) in mask.voxels().iter().enumerate() {
        let r = regions[pos] as usize;
        for nb in mask.grid().neighbor_indices(v, Connectivity::Six) {
            let p = lookup[nb];
            if p != NOT_IN_MASK {
                let o = regions[p as usize] as usize;
                if o != r {
                    adj[r][o] += 1;
                }
            }
        }
    }
    adj
}

fn random_unit(rng: &mut ChaCha8Rng) -> [f64; 3] {
    loop {
        let v: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        if n > 1e-6 {
            return [v[0] / n, v[1] / n, v[2] / n];
        }
    }
}

/// Voxels whose cells a polyline passes through, by exact grid traversal of
/// each segment. Points are in continuous voxel coordinates (voxel `x`
/// spans `[x, x+1)`); cells outside the grid are dropped. Returns ascending
/// linear indices.
pub fn rasterize_streamline(points: &[[f64; 3]], grid: &VoxelGrid) -> Vec<usize> {
    let mut out = Vec::new();
    match points {
        [] => {}
        [p] => push_cell(floor3(*p), grid, &mut out),
        _ => {
            for seg in points.windows(2) {
                traverse_segment(seg[0], seg[1], grid, &mut out);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    out
}

fn floor3(p: [f64; 3]) -> [i64; 3] {
    [p[0].floor() as i64, p[1].floor() as i64, p[2].floor() as i64]
}

fn push_cell(c: [i64; 3], grid: &VoxelGrid, out: &mut Vec<usize>) {
    if grid.in_bounds(c) {
        out.push(grid.linear_index([c[0] as usize, c[1] as usize, c[2] as usize]).expect("in bounds"));
    }
}

fn traverse_segment(a: [f64; 3], b: [f64; 3], grid: &VoxelGrid, out: &mut Vec<usize>) {
    let mut cell = floor3(a);
    let end = floor3(b);
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for i in 0..3 {
        let d = b[i] - a[i];
        if d > 0.0 {
            step[i] = 1;
            t_max[i] = (cell[i] as f64 + 1.0 - a[i]) / d;
            t_delta[i] = 1.0 / d;
        } else if d < 0.0 {
            step[i] = -1;
            t_max[i] = (cell[i] as f64 - a[i]) / d;
            t_delta[i] = -1.0 / d;
        }
    }
    push_cell(cell, grid, out);
    let budget = (0..3).map(|i| (end[i] - cell[i]).unsigned_abs()).sum::<u64>() + 3;
    for _ in 0..budget {
        let axis = (0..3).min_by(|&x, &y| t_max[x].total_cmp(&t_max[y])).expect("three axes");
        if t_max[axis] > 1.0 || cell == end {
            break;
        }
        cell[axis] += step[axis];
        t_max[axis] += t_delta[axis];
        push_cell(cell, grid, out);
    }
    push_cell(end, grid, out);
}

/// Parameter of the last point along `p + t·d` (searching from 0 outward in
/// the sign of `dir`) whose traversal stays inside `inside` cells.
fn run_length(p: [f64; 3], d: [f64; 3], grid: &VoxelGrid, inside: &dyn Fn(usize) -> bool) -> f64 {
    let mut cell = floor3(p);
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    let mut step = [0i64; 3];
    for i in 0..3 {
        if d[i] > 0.0 {
            step[i] = 1;
            t_max[i] = (cell[i] as f64 + 1.0 - p[i]) / d[i];
            t_delta[i] = 1.0 / d[i];
        } else if d[i] < 0.0 {
            step[i] = -1;
            t_max[i] = (cell[i] as f64 - p[i]) / d[i];
            t_delta[i] = -1.0 / d[i];
        }
    }
    loop {
        let axis = (0..3).min_by(|&x, &y| t_max[x].total_cmp(&t_max[y])).expect("three axes");
        let t = t_max[axis];
        if !t.is_finite() {
            return 0.0;
        }
        cell[axis] += step[axis];
        let next_inside = grid.in_bounds(cell)
            && inside(grid.linear_index([cell[0] as usize, cell[1] as usize, cell[2] as usize]).expect("in bounds"));
        if !next_inside {
            // stop a little short of the boundary so rasterization stays inside
            return (t - 1e-6).max(0.0);
        }
        t_max[axis] += t_delta[axis];
    }
}

/// Straight streamline through `seed` along `dir`, clipped to the cells
/// accepted by `inside`. When jittered, it is subdivided at unit spacing and
/// the interior vertices are displaced.
fn streamline(seed: [f64; 3], dir: [f64; 3], grid: &VoxelGrid, inside: &dyn Fn(usize) -> bool, jitter: Option<(&Normal<f64>, &mut ChaCha8Rng)>) -> Vec<[f64; 3]> {
    let fwd = run_length(seed, dir, grid, inside);
    let back = run_length(seed, [-dir[0], -dir[1], -dir[2]], grid, inside);
    let at = |t: f64| [seed[0] + t * dir[0], seed[1] + t * dir[1], seed[2] + t * dir[2]];
    match jitter {
        None => vec![at(-back), seed, at(fwd)],
        Some((normal, rng)) => {
            let len = fwd + back;
            let n = (len.ceil() as usize).max(1);
            (0..=n)
                .map(|i| {
                    let p = at(-back + len * i as f64 / n as f64);
                    // the clipped ends mark where the fiber leaves the region
                    if i == 0 || i == n {
                        return p;
                    }
                    [p[0] + normal.sample(rng), p[1] + normal.sample(rng), p[2] + normal.sample(rng)]
                })
                .collect()
        }
    }
}

fn generate_subject(cfg: &PhantomConfig, lay: &PhantomLayout, index: usize) -> Result<PhantomSubject> {
    let seed = subject_seed(cfg.seed, index);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = lay.mask.grid();
    let lookup = lay.mask.lookup_table();
    let normal = Normal::new(0.0, cfg.jitter_std.max(f64::MIN_POSITIVE)).map_err(|e| Error::Config(e.to_string()))?;

    let mut clusters = Vec::with_capacity(cfg.k);
    for (j, covered) in lay.cluster_regions.iter().enumerate() {
        let dropped = cfg.dropout_probability > 0.0 && rng.random::<f64>() < cfg.dropout_probability;
        let seeds: Vec<usize> = lay
            .mask
            .voxels()
            .iter()
            .zip(&lay.regions)
            .filter(|(_, r)| covered.contains(r))
            .map(|(&v, _)| v)
            .collect();
        let inside = |v: usize| {
            let p = lookup[v];
            p != NOT_IN_MASK && covered.contains(&lay.regions[p as usize])
        };
        let mut set = Vec::new();
        let total = cfg.streamlines_per_cluster.max(seeds.len());
        for s in 0..total {
            let v = if s < seeds.len() { seeds[s] } else { seeds[rng.random_range(0..seeds.len())] };
            let c = grid.coord(v)?;
            let p = [
                c[0] as f64 + rng.random::<f64>(),
                c[1] as f64 + rng.random::<f64>(),
                c[2] as f64 + rng.random::<f64>(),
            ];
            let jitter = (cfg.jitter_std > 0.0).then_some((&normal, &mut rng));
            let line = streamline(p, lay.directions[j], grid, &inside, jitter);
            set.extend(rasterize_streamline(&line, grid).into_iter().filter(|&v| lookup[v] != NOT_IN_MASK));
        }
        if cfg.spurious_probability > 0.0 {
            for &v in lay.mask.voxels() {
                if rng.random::<f64>() < cfg.spurious_probability {
                    set.push(v);
                }
            }
        }
        if dropped {
            set.clear();
        }
        clusters.push(set);
    }
    let clusters = ClusterIntersectionMap::new(*grid, clusters)?;
    let groups = lay.regions.iter().map(|&r| lay.region_groups[r as usize]).collect();
    Ok(PhantomSubject {
        id: format!("sub-{index:03}"),
        index,
        mask: lay.mask.clone(),
        clusters,
        regions: lay.regions.clone(),
        groups,
        region_groups: lay.region_groups.clone(),
        seed,
    })
}

/// Generates `cfg.subjects` subjects sharing one layout; deterministic in the
/// config.
pub fn generate_cohort(cfg: &PhantomConfig) -> Result<Vec<PhantomSubject>> {
    let lay = layout(cfg)?;
    (0..cfg.subjects).into_par_iter().map(|i| generate_subject(cfg, &lay, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> PhantomConfig {
        PhantomConfig { subjects: 2, train_subjects: 1, ..Default::default() }
    }

    #[test]
    fn rasterize_axis_aligned() {
        let g = VoxelGrid::with_dims([5, 2, 2]).unwrap();
        assert_eq!(rasterize_streamline(&[[0.5, 0.5, 0.5], [3.5, 0.5, 0.5]], &g), vec![0, 1, 2, 3]);
        assert_eq!(rasterize_streamline(&[[1.2, 1.3, 0.1], [1.8, 1.9, 0.7]], &g), vec![6]);
        assert_eq!(rasterize_streamline(&[[-3.0, 0.5, 0.5], [0.5, 0.5, 0.5]], &g), vec![0]);
    }

    #[test]
    fn validation() {
        assert!(PhantomConfig::default().validate().is_ok());
        let e = PhantomConfig { k: 5, ..Default::default() }.validate().unwrap_err();
        assert!(e.to_string().contains("k must be >= regions"));
        assert!(PhantomConfig { jitter_std: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn default_layout_shape() {
        let lay = layout(&PhantomConfig::default()).unwrap();
        assert!(lay.mask.len() > 1500, "{}", lay.mask.len());
        let counts = crate::train::cluster_sizes(&lay.region_groups.iter().map(|&g| g as usize).collect::<Vec<_>>(), 3);
        assert_eq!(counts, vec![4, 3, 2]);
        for r in 0..9 {
            let comps = connected_components(&lay.mask, &lay.regions, r, Connectivity::Six).unwrap();
            assert_eq!(comps.len(), 1, "region {r}");
        }
    }

    #[test]
    fn zero_noise_subjects_identical_and_separable() {
        let cfg = PhantomConfig { spurious_probability: 0.0, jitter_std: 0.0, dropout_probability: 0.0, ..small() };
        let c = generate_cohort(&cfg).unwrap();
        assert_eq!(c[0].clusters, c[1].clusters);
        let lay = layout(&cfg).unwrap();
        let field = crate::features::intersection_features(&c[0].clusters, &c[0].mask).unwrap();
        for (pos, &r) in c[0].regions.iter().enumerate() {
            let sig: Vec<usize> = (0..cfg.k).filter(|&j| field.vector(pos)[j] == 1.0).collect();
            assert_eq!(sig, lay.signature(r), "voxel {pos}");
        }
        let sigs: Vec<Vec<usize>> = (0..9).map(|r| lay.signature(r)).collect();
        for a in 0..9 {
            for b in a + 1..9 {
                assert_ne!(sigs[a], sigs[b]);
            }
        }
    }

    #[test]
    fn seeds_drive_output() {
        let a = generate_cohort(&small()).unwrap();
        let b = generate_cohort(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate_cohort(&PhantomConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a[0].clusters, c[0].clusters);
        assert_ne!(a[0].clusters, a[1].clusters);
    }
}
