//! Run configuration: one JSON document covering every stage, partial files
//! merged over the defaults, and command-line overrides.

use std::path::Path;

use amyparc::features::SmoothingConfig;
use amyparc::metrics::EvalConfig;
use amyparc::net::NetworkConfig;
use amyparc::phantom::PhantomConfig;
use amyparc::train::TrainConfig;
use amyparc::voxelgrid::Connectivity;
use amyparc::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds the phantom cohort and training; the per-section seeds are
    /// overwritten with it.
    pub seed: u64,
    pub phantom: PhantomConfig,
    pub smoothing: SmoothingConfig,
    /// `k` always follows the feature length.
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    /// Sized for the default phantom on a desktop machine.
    fn default() -> Self {
        let phantom = PhantomConfig::default();
        Self {
            seed: 0,
            network: NetworkConfig {
                k: phantom.k,
                latent_dim: 10,
                layers_per_block: 2,
                growth_rate: 4,
                transition_channels: vec![8, 12],
                kernel_size: 3,
            },
            train: TrainConfig {
                pretrain_batch_size: Some(16),
                pretrain_epochs: 4,
                joint_epochs: 2,
                pretrain_lr: 3e-3,
                ..TrainConfig::default()
            },
            phantom,
            smoothing: SmoothingConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

impl RunConfig {
    /// Parses a (possibly partial) JSON document; absent keys keep their
    /// defaults, unknown keys are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let patch: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if !patch.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let mut value = serde_json::to_value(Self::default())?;
        merge(&mut value, patch);
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(e.to_string()).in_file(path))?;
        Self::from_json(&text).map_err(|e| e.in_file(path))
    }

    /// Propagates the run seed and the feature length.
    pub fn resolved(mut self) -> Self {
        self.phantom.seed = self.seed;
        self.train.seed = self.seed;
        self.network.k = self.phantom.k;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.smoothing.validate()?;
        self.network.validate()?;
        self.train.validate()
    }

    /// SHA-256 of the compact JSON form with every seed zeroed, so runs that
    /// differ only in seed share a hash.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.phantom.seed = 0;
        c.train.seed = 0;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Command-line values that take precedence over the configuration file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub sigma: Option<f64>,
    pub k: Option<usize>,
    pub n: Option<usize>,
    pub lambda: Option<f64>,
    pub batch: Option<usize>,
    pub guard_fraction: Option<f64>,
    pub no_guard: bool,
    /// Dilation adjacency and the continuity metric's adjacency.
    pub connectivity: Option<Connectivity>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.sigma {
            cfg.smoothing.sigma = v;
        }
        if let Some(v) = self.k {
            cfg.phantom.k = v;
        }
        if let Some(v) = self.n {
            cfg.train.n_parcels = v;
        }
        if let Some(v) = self.lambda {
            cfg.train.lambda = v;
        }
        if let Some(v) = self.batch {
            cfg.train.batch_size = v;
        }
        if let Some(v) = self.guard_fraction {
            cfg.train.small_cluster_fraction = v;
        }
        if self.no_guard {
            cfg.train.guard = false;
        }
        if let Some(c) = self.connectivity {
            cfg.smoothing.connectivity = c;
            cfg.eval.connectivity = c;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_section_defaults() {
        let cfg = RunConfig::from_json(r#"{"train": {"lambda": 0.5}, "seed": 3}"#).unwrap();
        let d = RunConfig::default();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.train.lambda, 0.5);
        assert_eq!(cfg.train.pretrain_epochs, d.train.pretrain_epochs);
        assert_eq!(cfg.network, d.network);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"trian": {}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json(r#"{"train": {"lamda": 1}}"#), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("[1]"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_json("{"), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_seed_only() {
        let a = RunConfig::default().resolved();
        let mut b = a.clone();
        b.seed = 9;
        assert_eq!(a.hash(), b.resolved().hash());
        let mut c = a.clone();
        c.train.lambda = 1.0;
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn overrides_apply() {
        let mut cfg = RunConfig::default();
        let o = Overrides { k: Some(30), no_guard: true, connectivity: Some(Connectivity::Six), ..Default::default() };
        o.apply(&mut cfg);
        let cfg = cfg.resolved();
        assert_eq!(cfg.network.k, 30);
        assert!(!cfg.train.guard);
        assert_eq!(cfg.smoothing.connectivity, Connectivity::Six);
        assert_eq!(cfg.eval.connectivity, Connectivity::Six);
    }

    #[test]
    fn default_validates() {
        RunConfig::default().resolved().validate().unwrap();
    }
}
