//! Voxel index arithmetic, masks, exact Euclidean distance fields and
//! connected components.
//!
//! Linear indices are x-fastest: `x + nx * (y + ny * z)`. All distances are
//! measured between voxel centers in index units; the grid spacing is carried
//! as metadata only.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Neighborhood used for adjacency queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Connectivity {
    /// Face neighbors only.
    Six,
    /// Face, edge and corner neighbors.
    TwentySix,
}

impl TryFrom<u8> for Connectivity {
    type Error = Error;

    fn try_from(value: u8) -> Result<Self> {
        match value {
            6 => Ok(Connectivity::Six),
            26 => Ok(Connectivity::TwentySix),
            other => Err(Error::Config(format!(
                "connectivity must be 6 or 26, got {other}"
            ))),
        }
    }
}

impl From<Connectivity> for u8 {
    fn from(c: Connectivity) -> u8 {
        match c {
            Connectivity::Six => 6,
            Connectivity::TwentySix => 26,
        }
    }
}

impl fmt::Display for Connectivity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", u8::from(*self))
    }
}

impl Connectivity {
    /// Offsets of the neighborhood, excluding the origin.
    pub fn offsets(self) -> &'static [[i64; 3]] {
        match self {
            Connectivity::Six => &OFFSETS_6,
            Connectivity::TwentySix => &OFFSETS_26,
        }
    }
}

const OFFSETS_6: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

const OFFSETS_26: [[i64; 3]; 26] = {
    let mut out = [[0i64; 3]; 26];
    let mut n = 0;
    let mut dz = -1;
    while dz <= 1 {
        let mut dy = -1;
        while dy <= 1 {
            let mut dx = -1;
            while dx <= 1 {
                if !(dx == 0 && dy == 0 && dz == 0) {
                    out[n] = [dx, dy, dz];
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
};

/// A regular 3D voxel grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VoxelGrid {
    dims: [usize; 3],
    spacing: [f64; 3],
}

impl VoxelGrid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidGrid(format!("dimensions must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidGrid(format!("spacing must be positive, got {spacing:?}")));
        }
        if dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)).is_none() {
            return Err(Error::InvalidGrid(format!("grid {dims:?} overflows usize")));
        }
        Ok(Self { dims, spacing })
    }

    /// Isotropic unit-spacing grid.
    pub fn with_dims(dims: [usize; 3]) -> Result<Self> {
        Self::new(dims, [1.0; 3])
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.spacing
    }

    /// Total number of voxels.
    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn in_bounds(&self, coord: [i64; 3]) -> bool {
        coord
            .iter()
            .zip(self.dims)
            .all(|(&c, d)| c >= 0 && (c as u64) < d as u64)
    }

    pub fn linear_index(&self, coord: [usize; 3]) -> Result<usize> {
        let [x, y, z] = coord;
        let [nx, ny, nz] = self.dims;
        if x >= nx || y >= ny || z >= nz {
            return Err(Error::OutOfRange {
                coord: [x as i64, y as i64, z as i64],
                dims: self.dims,
            });
        }
        Ok(x + nx * (y + ny * z))
    }

    pub fn coord(&self, index: usize) -> Result<[usize; 3]> {
        if index >= self.len() {
            return Err(Error::IndexOutOfRange { index, len: self.len() });
        }
        let [nx, ny, _] = self.dims;
        Ok([index % nx, (index / nx) % ny, index / (nx * ny)])
    }

    /// In-bounds neighbors of `coord`, excluding `coord` itself.
    pub fn neighbors(&self, coord: [usize; 3], connectivity: Connectivity) -> Result<Vec<[usize; 3]>> {
        self.linear_index(coord)?;
        let base = [coord[0] as i64, coord[1] as i64, coord[2] as i64];
        Ok(connectivity
            .offsets()
            .iter()
            .map(|o| [base[0] + o[0], base[1] + o[1], base[2] + o[2]])
            .filter(|c| self.in_bounds(*c))
            .map(|c| [c[0] as usize, c[1] as usize, c[2] as usize])
            .collect())
    }

    /// Linear indices of the in-bounds neighbors of the voxel at `index`.
    pub(crate) fn neighbor_indices(&self, index: usize, connectivity: Connectivity) -> impl Iterator<Item = usize> + '_ {
        let [nx, ny, _] = self.dims;
        let base = [(index % nx) as i64, ((index / nx) % ny) as i64, (index / (nx * ny)) as i64];
        connectivity.offsets().iter().filter_map(move |o| {
            let c = [base[0] + o[0], base[1] + o[1], base[2] + o[2]];
            self.in_bounds(c)
                .then(|| c[0] as usize + nx * (c[1] as usize + ny * c[2] as usize))
        })
    }

    pub(crate) fn check_same(&self, other: &VoxelGrid) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch(self.dims, other.dims));
        }
        Ok(())
    }
}

/// Sentinel in [`Mask::lookup_table`] for voxels outside the mask.
pub const NOT_IN_MASK: u32 = u32::MAX;

/// The set of in-structure voxels, stored as sorted unique linear indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mask {
    grid: VoxelGrid,
    voxels: Vec<usize>,
}

impl Mask {
    /// Builds a mask from arbitrary indices; they are sorted and deduplicated.
    pub fn new(grid: VoxelGrid, mut voxels: Vec<usize>) -> Result<Self> {
        voxels.sort_unstable();
        voxels.dedup();
        if let Some(&last) = voxels.last() {
            if last >= grid.len() {
                return Err(Error::IndexOutOfRange { index: last, len: grid.len() });
            }
        }
        if voxels.len() >= NOT_IN_MASK as usize {
            return Err(Error::InvalidGrid("mask too large".into()));
        }
        Ok(Self { grid, voxels })
    }

    /// Mask containing every voxel of the grid.
    pub fn full(grid: VoxelGrid) -> Self {
        let voxels = (0..grid.len()).collect();
        Self { grid, voxels }
    }

    pub fn grid(&self) -> &VoxelGrid {
        &self.grid
    }

    pub fn voxels(&self) -> &[usize] {
        &self.voxels
    }

    pub fn len(&self) -> usize {
        self.voxels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.voxels.is_empty()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.voxels.binary_search(&index).is_ok()
    }

    /// Position of a linear index within the mask ordering.
    pub fn position(&self, index: usize) -> Option<usize> {
        self.voxels.binary_search(&index).ok()
    }

    /// Grid-sized table mapping linear index to mask position, or
    /// [`NOT_IN_MASK`].
    pub fn lookup_table(&self) -> Vec<u32> {
        let mut table = vec![NOT_IN_MASK; self.grid.len()];
        for (pos, &v) in self.voxels.iter().enumerate() {
            table[v] = pos as u32;
        }
        table
    }
}

/// Per-voxel distance (index units) to the nearest voxel of a target set,
/// aligned with the mask ordering.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceField {
    pub values: Vec<f64>,
}

impl DistanceField {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Exact Euclidean distance from every mask voxel to the nearest target voxel.
///
/// Targets may lie outside the mask; they still act as sources. Uses the
/// separable lower-envelope squared distance transform over the full grid, so
/// the squared distances are exact integers before the final square root.
pub fn distance_field(mask: &Mask, target: &[usize]) -> Result<DistanceField> {
    let sq = squared_distance_grid(mask.grid(), target)?;
    Ok(DistanceField {
        values: mask.voxels().iter().map(|&v| sq[v].sqrt()).collect(),
    })
}

/// Squared distance to the nearest target for every voxel of the grid.
pub fn squared_distance_grid(grid: &VoxelGrid, target: &[usize]) -> Result<Vec<f64>> {
    if target.is_empty() {
        return Err(Error::EmptyTarget);
    }
    let len = grid.len();
    let mut field = vec![f64::INFINITY; len];
    for &t in target {
        if t >= len {
            return Err(Error::IndexOutOfRange { index: t, len });
        }
        field[t] = 0.0;
    }

    let [nx, ny, nz] = grid.dims();
    let longest = nx.max(ny).max(nz);
    let mut scratch = EnvelopeScratch::new(longest);
    let mut line = vec![0.0; longest];
    let mut out = vec![0.0; longest];

    // x lines
    for z in 0..nz {
        for y in 0..ny {
            let start = nx * (y + ny * z);
            line[..nx].copy_from_slice(&field[start..start + nx]);
            scratch.transform(&line[..nx], &mut out[..nx]);
            field[start..start + nx].copy_from_slice(&out[..nx]);
        }
    }
    // y lines
    for z in 0..nz {
        for x in 0..nx {
            for y in 0..ny {
                line[y] = field[x + nx * (y + ny * z)];
            }
            scratch.transform(&line[..ny], &mut out[..ny]);
            for y in 0..ny {
                field[x + nx * (y + ny * z)] = out[y];
            }
        }
    }
    // z lines
    for y in 0..ny {
        for x in 0..nx {
            for z in 0..nz {
                line[z] = field[x + nx * (y + ny * z)];
            }
            scratch.transform(&line[..nz], &mut out[..nz]);
            for z in 0..nz {
                field[x + nx * (y + ny * z)] = out[z];
            }
        }
    }
    Ok(field)
}

struct EnvelopeScratch {
    sites: Vec<usize>,
    bounds: Vec<f64>,
}

impl EnvelopeScratch {
    fn new(n: usize) -> Self {
        Self { sites: vec![0; n], bounds: vec![0.0; n + 1] }
    }

    /// One-dimensional squared distance transform of a sampled function
    /// (lower envelope of parabolas rooted at the finite samples).
    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        let n = f.len();
        let v = &mut self.sites;
        let z = &mut self.bounds;
        let mut k: isize = -1;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            let qf = q as f64;
            let mut s;
            loop {
                if k < 0 {
                    s = f64::NEG_INFINITY;
                    break;
                }
                let p = v[k as usize];
                let pf = p as f64;
                s = ((f[q] + qf * qf) - (f[p] + pf * pf)) / (2.0 * (qf - pf));
                if s <= z[k as usize] {
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            v[k as usize] = q;
            z[k as usize] = s;
            z[k as usize + 1] = f64::INFINITY;
        }
        if k < 0 {
            out.fill(f64::INFINITY);
            return;
        }
        let mut j = 0;
        for (q, o) in out.iter_mut().enumerate() {
            let qf = q as f64;
            while z[j + 1] < qf {
                j += 1;
            }
            let d = qf - v[j] as f64;
            *o = d * d + f[v[j]];
        }
    }
}

/// Maximal connected sets of mask voxels carrying `label`.
///
/// `labels` is aligned with the mask ordering. Each component is returned as
/// sorted linear indices; components are ordered by their smallest index.
pub fn connected_components(
    mask: &Mask,
    labels: &[u32],
    label: u32,
    connectivity: Connectivity,
) -> Result<Vec<Vec<usize>>> {
    if labels.len() != mask.len() {
        return Err(Error::Shape(format!(
            "label field has {} entries, mask has {}",
            labels.len(),
            mask.len()
        )));
    }
    let grid = mask.grid();
    let lookup = mask.lookup_table();
    let mut visited = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut queue = VecDeque::new();

    for (pos, &l) in labels.iter().enumerate() {
        if l != label || visited[pos] {
            continue;
        }
        visited[pos] = true;
        queue.push_back(mask.voxels()[pos]);
        let mut component = Vec::new();
        while let Some(v) = queue.pop_front() {
            component.push(v);
            for nb in grid.neighbor_indices(v, connectivity) {
                let p = lookup[nb];
                if p != NOT_IN_MASK && !visited[p as usize] && labels[p as usize] == label {
                    visited[p as usize] = true;
                    queue.push_back(nb);
                }
            }
        }
        component.sort_unstable();
        components.push(component);
    }
    Ok(components)
}
