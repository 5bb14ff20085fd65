//! On-disk formats: subject and cohort JSON, AMYF feature files with a JSON
//! sidecar, AMYM model files, parcellation and report JSON.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{ClusterIntersectionMap, FeatureField, SmoothingConfig};
use crate::metrics::MetricReport;
use crate::net::{ArrayShape, Network, NetworkConfig, NetworkParams};
use crate::phantom::{PhantomConfig, PhantomSubject};
use crate::train::{DeepClusterModel, EpochLog, Parcellation, TrainConfig};
use crate::voxelgrid::{Connectivity, Mask, VoxelGrid};

pub const FEATURE_MAGIC: &[u8; 4] = b"AMYF";
pub const MODEL_MAGIC: &[u8; 4] = b"AMYM";
pub const FORMAT_VERSION: u32 = 1;

/// Seed and configuration hash carried by every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    pub config_hash: String,
}

/// Pretty JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::from(e).in_file(path))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::from(e).in_file(path))?;
    serde_json::from_str(&text).map_err(|e| Error::from(e).in_file(path))
}

fn grid_mask(dims: [usize; 3], spacing: [f64; 3], voxels: Vec<usize>) -> Result<Mask> {
    let grid = VoxelGrid::new(dims, spacing)?;
    if voxels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Format("mask indices must be strictly ascending".into()));
    }
    Mask::new(grid, voxels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One phantom subject with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectFile {
    pub id: String,
    pub index: usize,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Ascending linear indices.
    pub mask: Vec<usize>,
    /// Linear indices each streamline cluster passes through.
    pub clusters: Vec<Vec<usize>>,
    /// Ground-truth region per mask voxel.
    pub regions: Vec<u32>,
    pub groups: Vec<u32>,
    pub region_groups: Vec<u32>,
    pub subject_seed: u64,
    pub config: PhantomConfig,
    pub provenance: Provenance,
}

impl SubjectFile {
    pub fn new(subject: &PhantomSubject, config: &PhantomConfig, provenance: Provenance) -> Self {
        let grid = subject.mask.grid();
        Self {
            id: subject.id.clone(),
            index: subject.index,
            dims: grid.dims(),
            spacing: grid.spacing(),
            mask: subject.mask.voxels().to_vec(),
            clusters: subject.clusters.clusters().to_vec(),
            regions: subject.regions.clone(),
            groups: subject.groups.clone(),
            region_groups: subject.region_groups.clone(),
            subject_seed: subject.seed,
            config: config.clone(),
            provenance,
        }
    }

    pub fn into_subject(self) -> Result<PhantomSubject> {
        let mask = grid_mask(self.dims, self.spacing, self.mask)?;
        let clusters = ClusterIntersectionMap::new(*mask.grid(), self.clusters)?;
        if self.regions.len() != mask.len() || self.groups.len() != mask.len() {
            return Err(Error::Format(format!(
                "regions/groups have {}/{} entries for {} mask voxels",
                self.regions.len(),
                self.groups.len(),
                mask.len()
            )));
        }
        Ok(PhantomSubject {
            id: self.id,
            index: self.index,
            mask,
            clusters,
            regions: self.regions,
            groups: self.groups,
            region_groups: self.region_groups,
            seed: self.subject_seed,
        })
    }
}

pub fn read_subject(path: &Path) -> Result<PhantomSubject> {
    read_json::<SubjectFile>(path)?.into_subject().map_err(|e| e.in_file(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Subject file name, relative to the manifest.
    pub file: String,
    pub split: Split,
}

/// Cohort index; the train/test split is read from here only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortManifest {
    pub subjects: Vec<ManifestEntry>,
    pub config: PhantomConfig,
    pub provenance: Provenance,
}

impl CohortManifest {
    pub fn ids(&self, split: Split) -> Vec<&str> {
        self.subjects.iter().filter(|e| e.split == split).map(|e| e.id.as_str()).collect()
    }
}

/// Metadata written next to an AMYF file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureSidecar {
    pub subject_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub mask: Vec<usize>,
    pub k: usize,
    pub sigma: f64,
    pub connectivity: Connectivity,
    /// Clusters that intersected no mask voxel.
    pub empty_clusters: Vec<usize>,
    /// Positive values that would round to zero in 32 bits and were stored
    /// as the smallest positive subnormal instead.
    pub clamped_values: usize,
    pub provenance: Provenance,
}

impl FeatureSidecar {
    pub fn smoothing(&self) -> SmoothingConfig {
        SmoothingConfig { sigma: self.sigma, connectivity: self.connectivity }
    }
}

/// `sub-000.amyf` -> `sub-000.amyf.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// AMYF bytes for a field and the number of clamped values.
pub fn encode_features(field: &FeatureField) -> Result<(Vec<u8>, usize)> {
    let count = |n: usize, what: &str| u32::try_from(n).map_err(|_| Error::Format(format!("{what} {n} exceeds u32")));
    let mut out = Vec::with_capacity(16 + field.values().len() * 4);
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&count(field.len(), "voxel count")?.to_le_bytes());
    out.extend_from_slice(&count(field.k(), "K")?.to_le_bytes());
    let mut clamped = 0;
    for &v in field.values() {
        let mut x = v as f32;
        if v > 0.0 && x == 0.0 {
            x = f32::from_bits(1);
            clamped += 1;
        }
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok((out, clamped))
}

/// Parses AMYF bytes into (voxel count, K, values).
pub fn decode_features(bytes: &[u8]) -> Result<(usize, usize, Vec<f64>)> {
    if bytes.len() < 16 || &bytes[..4] != FEATURE_MAGIC {
        return Err(Error::Format("not an AMYF feature file".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let version = word(4);
    if version != FORMAT_VERSION as usize {
        return Err(Error::Format(format!("unsupported AMYF version {version}")));
    }
    let (v, k) = (word(8), word(12));
    let expected = v.checked_mul(k).and_then(|n| n.checked_mul(4)).and_then(|n| n.checked_add(16));
    if expected != Some(bytes.len()) {
        return Err(Error::Format(format!("AMYF size {} does not match {v} voxels x K={k}", bytes.len())));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    Ok((v, k, values))
}

/// Writes `path` and its sidecar. The sidecar's `clamped_values` is filled in.
pub fn write_features(path: &Path, field: &FeatureField, mut sidecar: FeatureSidecar) -> Result<FeatureSidecar> {
    let (bytes, clamped) = encode_features(field)?;
    sidecar.clamped_values = clamped;
    fs::write(path, bytes).map_err(|e| Error::from(e).in_file(path))?;
    write_json(&sidecar_path(path), &sidecar)?;
    Ok(sidecar)
}

pub fn read_features(path: &Path) -> Result<(FeatureField, FeatureSidecar)> {
    let side_path = sidecar_path(path);
    let sidecar: FeatureSidecar = read_json(&side_path)?;
    let bytes = fs::read(path).map_err(|e| Error::from(e).in_file(path))?;
    let (v, k, values) = decode_features(&bytes).map_err(|e| e.in_file(path))?;
    if v != sidecar.mask.len() || k != sidecar.k {
        return Err(Error::Format(format!(
            "header says {v} voxels x K={k}, sidecar says {} x K={}",
            sidecar.mask.len(),
            sidecar.k
        ))
        .in_file(path));
    }
    let mask = grid_mask(sidecar.dims, sidecar.spacing, sidecar.mask.clone()).map_err(|e| e.in_file(&side_path))?;
    let field = FeatureField::new(mask, k, values).map_err(|e| e.in_file(path))?;
    Ok((field, sidecar))
}

/// JSON header of a model; the weights live in the AMYM file it names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub model_id: String,
    /// Weights file name, relative to the header.
    pub weights: String,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub n_params: usize,
    pub arrays: Vec<ArrayShape>,
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<u64>,
    pub train_subjects: Vec<String>,
    pub logs: Vec<EpochLog>,
    pub provenance: Provenance,
}

pub fn encode_weights(params: &NetworkParams) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + params.data.len() * 8);
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for &w in &params.data {
        out.extend_from_slice(&w.to_le_bytes());
    }
    out
}

pub fn decode_weights(bytes: &[u8], n_params: usize) -> Result<NetworkParams> {
    if bytes.len() < 8 || &bytes[..4] != MODEL_MAGIC {
        return Err(Error::Format("not an AMYM weights file".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported AMYM version {version}")));
    }
    if bytes.len() - 8 != n_params * 8 {
        return Err(Error::Format(format!("weights hold {} bytes, expected {} parameters", bytes.len() - 8, n_params)));
    }
    let data = bytes[8..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(NetworkParams { data })
}

/// Writes `<stem>.json` and `<stem>.amym` into `dir`; returns the header path.
pub fn write_model(dir: &Path, stem: &str, model: &DeepClusterModel, mut header: ModelHeader) -> Result<PathBuf> {
    let weights = format!("{stem}.amym");
    let weights_path = dir.join(&weights);
    fs::write(&weights_path, encode_weights(&model.params)).map_err(|e| Error::from(e).in_file(&weights_path))?;
    let net = Network::new(model.network.clone())?;
    header.weights = weights;
    header.network = model.network.clone();
    header.train = model.train.clone();
    header.n_params = net.n_params();
    header.arrays = net.shapes().to_vec();
    header.centroids = model.centroids.clone();
    header.counts = model.counts.clone();
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &header)?;
    Ok(path)
}

pub fn read_model(path: &Path) -> Result<(DeepClusterModel, ModelHeader)> {
    let header: ModelHeader = read_json(path)?;
    let net = Network::new(header.network.clone()).map_err(|e| e.in_file(path))?;
    if net.n_params() != header.n_params || net.shapes() != header.arrays.as_slice() {
        return Err(Error::Format("array layout does not match the network config".into()).in_file(path));
    }
    if header.centroids.len() != header.train.n_parcels
        || header.counts.len() != header.centroids.len()
        || header.centroids.iter().any(|c| c.len() != header.network.latent_dim)
    {
        return Err(Error::Format("centroids do not match n_parcels x latent_dim".into()).in_file(path));
    }
    let weights_path = path.parent().unwrap_or(Path::new(".")).join(&header.weights);
    let bytes = fs::read(&weights_path).map_err(|e| Error::from(e).in_file(&weights_path))?;
    let params = decode_weights(&bytes, net.n_params()).map_err(|e| e.in_file(&weights_path))?;
    let model = DeepClusterModel {
        network: header.network.clone(),
        params,
        centroids: header.centroids.clone(),
        counts: header.counts.clone(),
        train: header.train.clone(),
    };
    Ok((model, header))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParcellationFile {
    pub subject_id: String,
    pub model_id: String,
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub mask: Vec<usize>,
    pub labels: Vec<u32>,
    pub n_parcels: usize,
    pub provenance: Provenance,
}

impl ParcellationFile {
    pub fn new(p: &Parcellation, provenance: Provenance) -> Self {
        let grid = p.mask.grid();
        Self {
            subject_id: p.subject_id.clone(),
            model_id: p.model_id.clone(),
            dims: grid.dims(),
            spacing: grid.spacing(),
            mask: p.mask.voxels().to_vec(),
            labels: p.labels.clone(),
            n_parcels: p.n_parcels,
            provenance,
        }
    }

    pub fn into_parcellation(self) -> Result<Parcellation> {
        let mask = grid_mask(self.dims, self.spacing, self.mask)?;
        Parcellation::new(mask, self.labels, self.n_parcels, self.subject_id, self.model_id)
    }
}

pub fn read_parcellation(path: &Path) -> Result<Parcellation> {
    read_json::<ParcellationFile>(path)?.into_parcellation().map_err(|e| e.in_file(path))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    #[serde(flatten)]
    pub report: MetricReport,
    pub provenance: Provenance,
}
