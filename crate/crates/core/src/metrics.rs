//! Parcellation quality metrics: spatial continuity, parcel size coherence,
//! Dice overlap (pairwise, cross-subject, group heatmap vs reference atlas),
//! and ground-truth agreement via Hungarian matching and ARI.

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::Parcellation;
use crate::voxelgrid::{connected_components, Connectivity, Mask, VoxelGrid};

/// Per-parcel spatial continuity of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Continuity {
    /// Largest-component fraction per label; `None` for unused labels.
    pub per_parcel: Vec<Option<f64>>,
    /// Mean over nonempty parcels.
    pub mean: f64,
    pub empty_parcels: Vec<u32>,
}

pub fn spatial_continuity(parcellation: &Parcellation, connectivity: Connectivity) -> Result<Continuity> {
    let sizes = parcellation.sizes();
    let mut per_parcel = Vec::with_capacity(sizes.len());
    let mut empty = Vec::new();
    for (label, &size) in sizes.iter().enumerate() {
        if size == 0 {
            empty.push(label as u32);
            per_parcel.push(None);
            continue;
        }
        let comps = connected_components(&parcellation.mask, &parcellation.labels, label as u32, connectivity)?;
        let largest = comps.iter().map(Vec::len).max().unwrap_or(0);
        per_parcel.push(Some(largest as f64 / size as f64));
    }
    let present: Vec<f64> = per_parcel.iter().flatten().copied().collect();
    let mean = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(Continuity { per_parcel, mean, empty_parcels: empty })
}

/// Population standard deviation of parcel sizes as fractions of the mask;
/// unused labels count as size 0.
pub fn parcel_size_coherence(parcellation: &Parcellation) -> f64 {
    let sizes = parcellation.sizes();
    let n = sizes.len() as u128;
    let total = parcellation.mask.len() as f64;
    if n == 0 || total == 0.0 {
        return 0.0;
    }
    // n^2 * variance of the raw sizes, exact in integers
    let sum: u128 = sizes.iter().map(|&s| s as u128).sum();
    let sum_sq: u128 = sizes.iter().map(|&s| (s as u128) * (s as u128)).sum();
    let scaled = n * sum_sq - sum * sum;
    (scaled as f64).sqrt() / (n as f64 * total)
}

/// Size of the intersection of two ascending index lists.
fn intersection_len(a: &[usize], b: &[usize]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

fn dice_sorted(a: &[usize], b: &[usize]) -> f64 {
    if a.is_empty() && b.is_empty() {
        log::warn!("Dice of two empty sets taken as 0");
        return 0.0;
    }
    2.0 * intersection_len(a, b) as f64 / (a.len() + b.len()) as f64
}

/// `2|A∩B| / (|A|+|B|)`; two empty sets give 0.
pub fn dice(a: &Mask, b: &Mask) -> Result<f64> {
    check_grid(a.grid(), b.grid())?;
    Ok(dice_sorted(a.voxels(), b.voxels()))
}

fn check_grid(a: &VoxelGrid, b: &VoxelGrid) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::GridMismatch(a.dims(), b.dims()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSubjectDice {
    /// Mean Dice over all unordered subject pairs, per label; `None` when the
    /// label is empty in every subject.
    pub per_parcel: Vec<Option<f64>>,
    pub average: f64,
    pub excluded: Vec<u32>,
}

/// Per-label mean Dice over all subject pairs. Subjects must share a grid and
/// label space.
pub fn cross_subject_dice(parcellations: &[Parcellation]) -> Result<CrossSubjectDice> {
    if parcellations.len() < 2 {
        return Err(Error::InsufficientData(format!("cross-subject Dice needs 2 subjects, got {}", parcellations.len())));
    }
    let n = common_label_count(parcellations)?;
    let parcels: Vec<Vec<Vec<usize>>> = parcellations.iter().map(|p| (0..n as u32).map(|l| p.parcel(l)).collect()).collect();
    let pairs: Vec<(usize, usize)> = (0..parcels.len()).flat_map(|a| (a + 1..parcels.len()).map(move |b| (a, b))).collect();

    let mut per_parcel = Vec::with_capacity(n);
    let mut excluded = Vec::new();
    for label in 0..n {
        if parcels.iter().all(|s| s[label].is_empty()) {
            excluded.push(label as u32);
            per_parcel.push(None);
            continue;
        }
        let values: Vec<f64> = pairs.par_iter().map(|&(a, b)| dice_sorted(&parcels[a][label], &parcels[b][label])).collect();
        per_parcel.push(Some(values.iter().sum::<f64>() / values.len() as f64));
    }
    let present: Vec<f64> = per_parcel.iter().flatten().copied().collect();
    let average = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(CrossSubjectDice { per_parcel, average, excluded })
}

fn common_label_count(parcellations: &[Parcellation]) -> Result<usize> {
    let first = &parcellations[0];
    for p in &parcellations[1..] {
        check_grid(first.mask.grid(), p.mask.grid())?;
        if p.n_parcels != first.n_parcels {
            return Err(Error::Shape(format!(
                "subject {} has {} parcels, subject {} has {}",
                p.subject_id, p.n_parcels, first.subject_id, first.n_parcels
            )));
        }
    }
    Ok(first.n_parcels)
}

/// Number of subjects assigning each grid voxel to one label.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupHeatmap {
    pub grid: VoxelGrid,
    pub label: u32,
    /// Grid-sized, linear-index order.
    pub counts: Vec<u32>,
    pub subjects: u32,
}

impl GroupHeatmap {
    /// Half the subject count, rounded down.
    pub fn default_threshold(&self) -> u32 {
        self.subjects / 2
    }

    /// Voxels counted by strictly more than `threshold` subjects.
    pub fn binarize(&self, threshold: u32) -> Mask {
        let voxels = self.counts.iter().enumerate().filter(|(_, &c)| c > threshold).map(|(i, _)| i).collect();
        Mask::new(self.grid, voxels).expect("indices come from the grid")
    }
}

pub fn group_heatmap(parcellations: &[Parcellation], label: u32) -> Result<GroupHeatmap> {
    let first = parcellations.first().ok_or_else(|| Error::InsufficientData("no subjects".into()))?;
    let grid = *first.mask.grid();
    let mut counts = vec![0u32; grid.len()];
    for p in parcellations {
        check_grid(&grid, p.mask.grid())?;
        for (&v, &l) in p.mask.voxels().iter().zip(&p.labels) {
            if l == label {
                counts[v] += 1;
            }
        }
    }
    Ok(GroupHeatmap { grid, label, counts, subjects: parcellations.len() as u32 })
}

/// Reference subdivision of a structure into `n_groups` labeled groups.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceAtlas {
    pub mask: Mask,
    /// Aligned with the mask ordering; each `< n_groups`.
    pub labels: Vec<u32>,
    pub n_groups: usize,
}

impl ReferenceAtlas {
    pub fn new(mask: Mask, labels: Vec<u32>, n_groups: usize) -> Result<Self> {
        if labels.len() != mask.len() {
            return Err(Error::Shape(format!("{} atlas labels for {} voxels", labels.len(), mask.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_groups) {
            return Err(Error::Shape(format!("atlas label {bad} outside [0, {n_groups})")));
        }
        Ok(Self { mask, labels, n_groups })
    }

    pub fn group(&self, g: u32) -> Vec<usize> {
        self.mask.voxels().iter().zip(&self.labels).filter(|(_, &l)| l == g).map(|(&v, _)| v).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtlasDice {
    /// Best-matching group per parcel; `None` for empty parcels.
    pub assignment: Vec<Option<u32>>,
    /// Dice of each parcel with its assigned group.
    pub parcel_dice: Vec<f64>,
    /// Dice of the union of the parcels assigned to each group.
    pub group_dice: Vec<f64>,
    pub mean_group_dice: f64,
}

impl AtlasDice {
    /// True when every group received at least one parcel.
    pub fn covers_all_groups(&self) -> bool {
        let mut hit = vec![false; self.group_dice.len()];
        for g in self.assignment.iter().flatten() {
            hit[*g as usize] = true;
        }
        hit.into_iter().all(|h| h)
    }
}

/// Assigns each parcel to the reference group of maximal Dice (many-to-one,
/// ties to the lower group), then scores the per-group unions.
pub fn atlas_dice(parcels: &[Mask], atlas: &ReferenceAtlas) -> Result<AtlasDice> {
    for p in parcels {
        check_grid(p.grid(), atlas.mask.grid())?;
    }
    let groups: Vec<Vec<usize>> = (0..atlas.n_groups as u32).map(|g| atlas.group(g)).collect();
    let mut assignment = Vec::with_capacity(parcels.len());
    let mut parcel_dice = Vec::with_capacity(parcels.len());
    for p in parcels {
        if p.is_empty() {
            assignment.push(None);
            parcel_dice.push(0.0);
            continue;
        }
        let mut best = (0u32, f64::NEG_INFINITY);
        for (g, members) in groups.iter().enumerate() {
            let d = dice_sorted(p.voxels(), members);
            if d > best.1 {
                best = (g as u32, d);
            }
        }
        assignment.push(Some(best.0));
        parcel_dice.push(best.1);
    }
    let group_dice: Vec<f64> = groups
        .iter()
        .enumerate()
        .map(|(g, members)| {
            let mut union: Vec<usize> = parcels
                .iter()
                .zip(&assignment)
                .filter(|(_, a)| **a == Some(g as u32))
                .flat_map(|(p, _)| p.voxels().iter().copied())
                .collect();
            union.sort_unstable();
            union.dedup();
            dice_sorted(&union, members)
        })
        .collect();
    let mean_group_dice = if group_dice.is_empty() { 0.0 } else { group_dice.iter().sum::<f64>() / group_dice.len() as f64 };
    Ok(AtlasDice { assignment, parcel_dice, group_dice, mean_group_dice })
}

/// `table[a][b]` = number of items labeled `a` in the first labeling and `b`
/// in the second.
pub fn contingency(a: &[u32], n_a: usize, b: &[u32], n_b: usize) -> Result<Vec<Vec<u64>>> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("labelings have lengths {} and {}", a.len(), b.len())));
    }
    let mut table = vec![vec![0u64; n_b]; n_a];
    for (&x, &y) in a.iter().zip(b) {
        if x as usize >= n_a || y as usize >= n_b {
            return Err(Error::Shape(format!("label pair ({x}, {y}) outside {n_a}x{n_b}")));
        }
        table[x as usize][y as usize] += 1;
    }
    Ok(table)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matching {
    /// Column matched to each row; `None` when the row was paired with padding.
    pub row_to_col: Vec<Option<usize>>,
    pub total: u64,
}

/// One-to-one assignment maximizing total overlap. The smaller side is padded
/// with zeros.
pub fn hungarian_match(overlap: &[Vec<u64>]) -> Result<Matching> {
    let rows = overlap.len();
    let cols = overlap.first().map_or(0, Vec::len);
    if overlap.iter().any(|r| r.len() != cols) {
        return Err(Error::Shape("ragged overlap matrix".into()));
    }
    if rows == 0 || cols == 0 {
        return Ok(Matching { row_to_col: vec![None; rows], total: 0 });
    }
    let n = rows.max(cols);
    let mut weights = Matrix::new(n, n, 0i64);
    for (r, row) in overlap.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            weights[(r, c)] = i64::try_from(v).map_err(|_| Error::Shape("overlap too large".into()))?;
        }
    }
    let (_, assignment) = kuhn_munkres(&weights);
    let row_to_col: Vec<Option<usize>> = assignment[..rows].iter().map(|&c| (c < cols).then_some(c)).collect();
    let total = row_to_col.iter().enumerate().filter_map(|(r, c)| c.map(|c| overlap[r][c])).sum();
    Ok(Matching { row_to_col, total })
}

fn choose2(n: u64) -> f64 {
    (n as f64) * (n as f64 - 1.0) / 2.0
}

/// Adjusted Rand index from the contingency table. Degenerate cases where the
/// expected and maximal index coincide (e.g. both labelings a single cluster)
/// give 1.
pub fn adjusted_rand_index(a: &[u32], b: &[u32]) -> Result<f64> {
    let n_a = a.iter().max().map_or(0, |&m| m as usize + 1);
    let n_b = b.iter().max().map_or(0, |&m| m as usize + 1);
    let table = contingency(a, n_a, b, n_b)?;
    let index: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let row_sum: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let col_sum: f64 = (0..n_b).map(|c| choose2(table.iter().map(|r| r[c]).sum())).sum();
    let total = choose2(a.len() as u64);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = row_sum * col_sum / total;
    let max = 0.5 * (row_sum + col_sum);
    if max == expected {
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

/// Dice of each ground-truth region with the predicted parcel matched to it
/// one-to-one by maximal overlap; unmatched regions score 0.
pub fn matched_region_dice(predicted: &[u32], n_predicted: usize, truth: &[u32], n_truth: usize) -> Result<Vec<f64>> {
    let table = contingency(truth, n_truth, predicted, n_predicted)?;
    let matching = hungarian_match(&table)?;
    let truth_sizes: Vec<u64> = table.iter().map(|r| r.iter().sum()).collect();
    let pred_sizes: Vec<u64> = (0..n_predicted).map(|c| table.iter().map(|r| r[c]).sum()).collect();
    Ok(matching
        .row_to_col
        .iter()
        .enumerate()
        .map(|(r, c)| match c {
            Some(c) if truth_sizes[r] + pred_sizes[*c] > 0 => 2.0 * table[r][*c] as f64 / (truth_sizes[r] + pred_sizes[*c]) as f64,
            _ => 0.0,
        })
        .collect())
}

/// Per-voxel ground truth for one subject, aligned with its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub labels: Vec<u32>,
    pub n_regions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectMetrics {
    pub subject_id: String,
    pub sc: f64,
    pub sc_per_parcel: Vec<Option<f64>>,
    pub psc: f64,
    pub parcel_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub matched_region_dice: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_parcels: usize,
    pub connectivity: Connectivity,
    pub subjects: Vec<SubjectMetrics>,
    pub mean_sc: f64,
    pub mean_psc: f64,
    pub parcel_dice: Vec<Option<f64>>,
    pub average_dice: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_ari: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_matched_region_dice: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub heatmap_threshold: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub atlas: Option<AtlasDice>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub connectivity: Connectivity,
    /// Heatmap binarization threshold; `None` uses half the subject count.
    pub heatmap_threshold: Option<u32>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { connectivity: Connectivity::Six, heatmap_threshold: None }
    }
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Computes every metric for a set of subjects parcellated by one model.
/// `truth` must align with `parcellations`; cross-subject Dice needs at least
/// two subjects and is left empty otherwise.
pub fn evaluate(
    parcellations: &[Parcellation],
    truth: Option<&[GroundTruth]>,
    atlas: Option<&ReferenceAtlas>,
    cfg: &EvalConfig,
) -> Result<MetricReport> {
    if parcellations.is_empty() {
        return Err(Error::InsufficientData("no parcellations to evaluate".into()));
    }
    let n_parcels = common_label_count(parcellations)?;
    if let Some(t) = truth {
        if t.len() != parcellations.len() {
            return Err(Error::Shape(format!("{} ground truths for {} subjects", t.len(), parcellations.len())));
        }
    }

    let subjects = parcellations
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let sc = spatial_continuity(p, cfg.connectivity)?;
            let (ari, matched) = match truth {
                Some(t) => {
                    let gt = &t[i];
                    (
                        Some(adjusted_rand_index(&p.labels, &gt.labels)?),
                        Some(matched_region_dice(&p.labels, p.n_parcels, &gt.labels, gt.n_regions)?),
                    )
                }
                None => (None, None),
            };
            Ok(SubjectMetrics {
                subject_id: p.subject_id.clone(),
                sc: sc.mean,
                sc_per_parcel: sc.per_parcel,
                psc: parcel_size_coherence(p),
                parcel_sizes: p.sizes(),
                ari,
                matched_region_dice: matched,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (parcel_dice, average_dice) = if parcellations.len() >= 2 {
        let d = cross_subject_dice(parcellations)?;
        (d.per_parcel, d.average)
    } else {
        (vec![None; n_parcels], 0.0)
    };

    let (heatmap_threshold, atlas) = match atlas {
        Some(a) => {
            let heatmaps = (0..n_parcels as u32).map(|l| group_heatmap(parcellations, l)).collect::<Result<Vec<_>>>()?;
            let t = cfg.heatmap_threshold.unwrap_or_else(|| heatmaps[0].default_threshold());
            let sets: Vec<Mask> = heatmaps.iter().map(|h| h.binarize(t)).collect();
            (Some(t), Some(atlas_dice(&sets, a)?))
        }
        None => (None, None),
    };

    Ok(MetricReport {
        n_parcels,
        connectivity: cfg.connectivity,
        mean_sc: mean(subjects.iter().map(|s| s.sc)),
        mean_psc: mean(subjects.iter().map(|s| s.psc)),
        mean_ari: truth.map(|_| mean(subjects.iter().filter_map(|s| s.ari))),
        mean_matched_region_dice: truth.map(|_| mean(subjects.iter().flat_map(|s| s.matched_region_dice.iter().flatten().copied()))),
        subjects,
        parcel_dice,
        average_dice,
        heatmap_threshold,
        atlas,
    })
}

impl MetricReport {
    /// Summary table: SC, PSC, Avg, then one Dice column per parcel.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["SC".to_string(), "PSC".into(), "Avg".into()];
        header.extend((1..=self.n_parcels).map(|p| format!("p{p}")));
        w.write_record(&header).map_err(csv_err)?;
        let mut row = vec![self.mean_sc.to_string(), self.mean_psc.to_string(), self.average_dice.to_string()];
        row.extend(self.parcel_dice.iter().map(|d| d.map_or(String::new(), |v| v.to_string())));
        w.write_record(&row).map_err(csv_err)?;
        w.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}
