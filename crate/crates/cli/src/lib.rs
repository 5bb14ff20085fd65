//! Stages behind the `amyparc` binary: phantom generation, feature
//! extraction, training, parcellation, evaluation and the full pipeline.

pub mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use amyparc::features::extract_features;
use amyparc::io::{
    read_features, read_json, read_model, read_parcellation, read_subject, write_features, write_json, write_model,
    CohortManifest, FeatureSidecar, ManifestEntry, ModelHeader, ParcellationFile, Provenance, ReportFile, Split,
    SubjectFile,
};
use amyparc::metrics::{evaluate, GroundTruth, ReferenceAtlas};
use amyparc::phantom::generate_cohort;
use amyparc::train::{parcellate, train, Parcellation};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Overrides, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] amyparc::Error),
    #[error("{0}")]
    Usage(String),
    #[error("{stage} stage failed: {source}")]
    Stage { stage: &'static str, source: Box<CliError> },
}

impl CliError {
    /// 2 for invalid configuration or usage, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        fn config(e: &amyparc::Error) -> bool {
            match e {
                amyparc::Error::Config(_) => true,
                amyparc::Error::InFile { source, .. } => config(source),
                _ => false,
            }
        }
        match self {
            CliError::Core(e) if config(e) => 2,
            CliError::Core(_) => 1,
            CliError::Usage(_) => 2,
            CliError::Stage { source, .. } => source.exit_code(),
        }
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

/// Validated configuration plus output settings shared by every stage.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub config_hash: String,
    pub quiet: bool,
}

impl Context {
    pub fn new(config: RunConfig, quiet: bool) -> Result<Self> {
        let config = config.resolved();
        config.validate()?;
        let config_hash = config.hash();
        Ok(Self { config, config_hash, quiet })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { seed: self.config.seed, config_hash: self.config_hash.clone() }
    }

    fn model_id(&self) -> String {
        format!("{}-s{}", &self.config_hash[..12], self.config.seed)
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            println!("{}", msg.as_ref());
        }
    }
}

/// Runs `f` on a pool of `threads` workers, or on the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        None => Ok(f()),
        Some(0) => Err(CliError::Usage("--threads must be >= 1".into())),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build()
                .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
            Ok(pool.install(f))
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| amyparc::Error::from(e).in_file(dir))?;
    Ok(())
}

fn require_inputs(paths: &[PathBuf], what: &str) -> Result<()> {
    if paths.is_empty() {
        return Err(CliError::Usage(format!("no {what} given")));
    }
    Ok(())
}

pub const MANIFEST_FILE: &str = "cohort.json";
pub const ATLAS_FILE: &str = "atlas.json";

/// Writes one JSON file per phantom subject, the coarse-group atlas and the
/// cohort manifest into `out`. Returns the manifest path.
pub fn cmd_gen(ctx: &Context, out: &Path) -> Result<PathBuf> {
    create_dir(out)?;
    let cfg = &ctx.config.phantom;
    let cohort = generate_cohort(cfg)?;
    let prov = ctx.provenance();
    let mut entries = Vec::with_capacity(cohort.len());
    for s in &cohort {
        let file = format!("{}.json", s.id);
        write_json(&out.join(&file), &SubjectFile::new(s, cfg, prov.clone()))?;
        let split = if s.index < cfg.train_subjects { Split::Train } else { Split::Test };
        entries.push(ManifestEntry { id: s.id.clone(), file, split });
    }
    if let Some(first) = cohort.first() {
        let atlas = Parcellation::new(
            first.mask.clone(),
            first.groups.clone(),
            cfg.groups,
            "atlas".into(),
            "phantom-groups".into(),
        )?;
        write_json(&out.join(ATLAS_FILE), &ParcellationFile::new(&atlas, prov.clone()))?;
    }
    let manifest = CohortManifest { subjects: entries, config: cfg.clone(), provenance: prov };
    let path = out.join(MANIFEST_FILE);
    write_json(&path, &manifest)?;
    ctx.progress(format!("gen: {} subjects -> {}", cohort.len(), out.display()));
    Ok(path)
}

/// Feature file path for a subject id inside `dir`.
pub fn feature_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.amyf"))
}

/// Extracts features for each subject file; subjects run in parallel and
/// each output depends only on its input.
pub fn cmd_features(ctx: &Context, subjects: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    require_inputs(subjects, "subject files")?;
    create_dir(out)?;
    let smoothing = ctx.config.smoothing;
    let prov = ctx.provenance();
    let written: Vec<(PathBuf, FeatureSidecar)> = subjects
        .par_iter()
        .map(|path| -> amyparc::Result<_> {
            let s = read_subject(path)?;
            let extracted = extract_features(&s.clusters, &s.mask, &smoothing).map_err(|e| e.in_file(path))?;
            let grid = s.mask.grid();
            let sidecar = FeatureSidecar {
                subject_id: s.id.clone(),
                dims: grid.dims(),
                spacing: grid.spacing(),
                mask: s.mask.voxels().to_vec(),
                k: extracted.field.k(),
                sigma: smoothing.sigma,
                connectivity: smoothing.connectivity,
                empty_clusters: extracted.empty_clusters,
                clamped_values: 0,
                provenance: prov.clone(),
            };
            let target = feature_path(out, &s.id);
            let sidecar = write_features(&target, &extracted.field, sidecar)?;
            Ok((target, sidecar))
        })
        .collect::<amyparc::Result<_>>()?;
    for (path, side) in &written {
        if !side.empty_clusters.is_empty() {
            log::warn!("{}: clusters {:?} miss the mask", path.display(), side.empty_clusters);
        }
    }
    ctx.progress(format!("features: {} files -> {}", written.len(), out.display()));
    Ok(written.into_iter().map(|(p, _)| p).collect())
}

pub const MODEL_STEM: &str = "model";

/// Trains on the pooled voxels of every feature file; writes
/// `model.json` + `model.amym` into `out` and returns the header path.
pub fn cmd_train(ctx: &Context, features: &[PathBuf], out: &Path) -> Result<PathBuf> {
    require_inputs(features, "feature files")?;
    create_dir(out)?;
    let fields = features
        .iter()
        .map(|p| read_features(p))
        .collect::<amyparc::Result<Vec<_>>>()?;
    let k = fields[0].0.k();
    if let Some((i, _)) = fields.iter().enumerate().find(|(_, (f, _))| f.k() != k) {
        return Err(amyparc::Error::Shape(format!("K differs between training files (K={k} vs {})", fields[i].0.k()))
            .in_file(&features[i])
            .into());
    }
    let mut network = ctx.config.network.clone();
    if network.k != k {
        log::warn!("network K set to the feature length {k}");
        network.k = k;
    }
    let dataset: Vec<&[f64]> = fields.iter().flat_map(|(f, _)| f.vectors()).collect();
    let outcome = train(&network, &dataset, &ctx.config.train)?;
    let header = ModelHeader {
        model_id: ctx.model_id(),
        weights: String::new(),
        network: network.clone(),
        train: ctx.config.train.clone(),
        n_params: 0,
        arrays: Vec::new(),
        centroids: Vec::new(),
        counts: Vec::new(),
        train_subjects: fields.iter().map(|(_, s)| s.subject_id.clone()).collect(),
        logs: outcome.logs,
        provenance: ctx.provenance(),
    };
    let path = write_model(out, MODEL_STEM, &outcome.model, header)?;
    let mut sizes = vec![0usize; outcome.model.centroids.len()];
    for &a in &outcome.assignments {
        sizes[a] += 1;
    }
    ctx.progress(format!("train: {} voxels, cluster sizes {sizes:?} -> {}", dataset.len(), path.display()));
    Ok(path)
}

pub fn parcellation_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(format!("{id}.parc.json"))
}

pub fn cmd_parcellate(ctx: &Context, model: &Path, features: &[PathBuf], out: &Path) -> Result<Vec<PathBuf>> {
    require_inputs(features, "feature files")?;
    create_dir(out)?;
    let (model, header) = read_model(model)?;
    let prov = ctx.provenance();
    let mut paths = Vec::with_capacity(features.len());
    for path in features {
        let (field, sidecar) = read_features(path)?;
        let p = parcellate(&model, &field, &sidecar.subject_id, &header.model_id).map_err(|e| e.in_file(path))?;
        let target = parcellation_path(out, &sidecar.subject_id);
        write_json(&target, &ParcellationFile::new(&p, prov.clone()))?;
        paths.push(target);
    }
    ctx.progress(format!("parcellate: {} subjects -> {}", paths.len(), out.display()));
    Ok(paths)
}

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";

/// Scores parcellations; `truth` are subject files matched by id, `atlas` a
/// parcellation-format label field whose `n_parcels` is the group count.
pub fn cmd_eval(ctx: &Context, parcellations: &[PathBuf], truth: &[PathBuf], atlas: Option<&Path>, out: &Path) -> Result<ReportFile> {
    require_inputs(parcellations, "parcellation files")?;
    create_dir(out)?;
    let parcs = parcellations
        .iter()
        .map(|p| read_parcellation(p))
        .collect::<amyparc::Result<Vec<_>>>()?;
    let truth = if truth.is_empty() {
        None
    } else {
        let subjects = truth.iter().map(|p| read_subject(p)).collect::<amyparc::Result<Vec<_>>>()?;
        let matched = parcs
            .iter()
            .map(|p| {
                let s = subjects
                    .iter()
                    .find(|s| s.id == p.subject_id)
                    .ok_or_else(|| CliError::Usage(format!("no ground truth for subject {}", p.subject_id)))?;
                if s.mask != p.mask {
                    return Err(amyparc::Error::Shape(format!("ground-truth mask of {} differs", s.id)).into());
                }
                Ok(GroundTruth { labels: s.regions.clone(), n_regions: s.region_groups.len() })
            })
            .collect::<Result<Vec<_>>>()?;
        Some(matched)
    };
    let atlas = match atlas {
        Some(path) => {
            let a = read_parcellation(path)?;
            Some(ReferenceAtlas::new(a.mask, a.labels, a.n_parcels).map_err(|e| e.in_file(path))?)
        }
        None => None,
    };
    let report = evaluate(&parcs, truth.as_deref(), atlas.as_ref(), &ctx.config.eval)?;
    let file = ReportFile { report, provenance: ctx.provenance() };
    write_json(&out.join(REPORT_JSON), &file)?;
    let csv_path = out.join(REPORT_CSV);
    let csv = fs::File::create(&csv_path).map_err(|e| amyparc::Error::from(e).in_file(&csv_path))?;
    file.report.write_csv(csv).map_err(|e| e.in_file(&csv_path))?;
    let r = &file.report;
    let mut line = format!("eval: SC {:.4} PSC {:.4} avg Dice {:.4}", r.mean_sc, r.mean_psc, r.average_dice);
    if let Some(ari) = r.mean_ari {
        line += &format!(" ARI {ari:.4}");
    }
    if let Some(a) = &r.atlas {
        line += &format!(" atlas Dice {:.4}", a.mean_group_dice);
    }
    ctx.progress(line);
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTime {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Versions {
    pub amyparc: String,
    pub cli: String,
    pub file_format: u32,
}

/// Written as `provenance.json` by the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub config_hash: String,
    pub seed: u64,
    pub config: RunConfig,
    pub versions: Versions,
    pub stages: Vec<StageTime>,
    pub train_subjects: Vec<String>,
    pub test_subjects: Vec<String>,
}

pub const PROVENANCE_FILE: &str = "provenance.json";

/// Output layout of a pipeline run.
#[derive(Debug, Clone)]
pub struct PipelineDirs {
    pub subjects: PathBuf,
    pub features: PathBuf,
    pub model: PathBuf,
    pub parcellations: PathBuf,
    pub report: PathBuf,
}

impl PipelineDirs {
    pub fn new(out: &Path) -> Self {
        Self {
            subjects: out.join("subjects"),
            features: out.join("features"),
            model: out.join("model"),
            parcellations: out.join("parcellations"),
            report: out.join("report"),
        }
    }
}

fn timed<T>(stages: &mut Vec<StageTime>, stage: &'static str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let value = f().map_err(|e| CliError::Stage { stage, source: Box::new(e) })?;
    stages.push(StageTime { stage: stage.into(), seconds: start.elapsed().as_secs_f64() });
    Ok(value)
}

/// gen -> features -> train (train split) -> parcellate and eval (test split).
/// With `skip_gen` the subject files already in `out/subjects` are reused.
pub fn cmd_pipeline(ctx: &Context, out: &Path, skip_gen: bool) -> Result<PipelineManifest> {
    let dirs = PipelineDirs::new(out);
    let mut stages = Vec::new();
    let manifest_path = dirs.subjects.join(MANIFEST_FILE);
    if !skip_gen {
        timed(&mut stages, "gen", || cmd_gen(ctx, &dirs.subjects))?;
    }
    let manifest: CohortManifest = read_json(&manifest_path).map_err(|e| CliError::Stage { stage: "gen", source: Box::new(e.into()) })?;
    let split = |s: Split| -> Vec<&ManifestEntry> { manifest.subjects.iter().filter(|e| e.split == s).collect() };
    let (train_set, test_set) = (split(Split::Train), split(Split::Test));
    if train_set.is_empty() || test_set.is_empty() {
        return Err(CliError::Usage("the cohort manifest needs both train and test subjects".into()));
    }
    let subject_files: Vec<PathBuf> = manifest.subjects.iter().map(|e| dirs.subjects.join(&e.file)).collect();
    timed(&mut stages, "features", || cmd_features(ctx, &subject_files, &dirs.features))?;
    let features_of = |set: &[&ManifestEntry]| -> Vec<PathBuf> { set.iter().map(|e| feature_path(&dirs.features, &e.id)).collect() };
    let model = timed(&mut stages, "train", || cmd_train(ctx, &features_of(&train_set), &dirs.model))?;
    let parcs = timed(&mut stages, "parcellate", || cmd_parcellate(ctx, &model, &features_of(&test_set), &dirs.parcellations))?;
    let truth: Vec<PathBuf> = test_set.iter().map(|e| dirs.subjects.join(&e.file)).collect();
    let atlas = dirs.subjects.join(ATLAS_FILE);
    let atlas = atlas.exists().then_some(atlas);
    timed(&mut stages, "eval", || cmd_eval(ctx, &parcs, &truth, atlas.as_deref(), &dirs.report))?;

    let record = PipelineManifest {
        config_hash: ctx.config_hash.clone(),
        seed: ctx.config.seed,
        config: ctx.config.clone(),
        versions: Versions {
            amyparc: amyparc::VERSION.into(),
            cli: env!("CARGO_PKG_VERSION").into(),
            file_format: amyparc::io::FORMAT_VERSION,
        },
        stages,
        train_subjects: train_set.iter().map(|e| e.id.clone()).collect(),
        test_subjects: test_set.iter().map(|e| e.id.clone()).collect(),
    };
    write_json(&out.join(PROVENANCE_FILE), &record)?;
    Ok(record)
}
