//! Acceptance suite: one pass/fail line per criterion, nonzero exit if any
//! criterion fails. Each criterion also has a wall-clock budget.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use amyparc::features::{augment, extract_features, SmoothingConfig};
use amyparc::io::{read_json, CohortManifest, ReportFile, Split};
use amyparc::metrics::{
    adjusted_rand_index, dice, hungarian_match, parcel_size_coherence, spatial_continuity,
};
use amyparc::net::{Network, NetworkConfig, NetworkParams};
use amyparc::phantom::{generate_cohort, PhantomConfig};
use amyparc::train::{
    cluster_sizes, init_centroids, joint_train, pretrain, DeepClusterModel, OptimizerKind, Parcellation, TrainConfig,
};
use amyparc::voxelgrid::{distance_field, Connectivity, Mask, VoxelGrid};
use amyparc_cli::{
    cmd_eval, cmd_features, cmd_gen, cmd_parcellate, cmd_pipeline, feature_path, with_threads, Context, PipelineDirs,
    RunConfig, ATLAS_FILE, MANIFEST_FILE, REPORT_JSON,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;

/// Artifacts shared between criteria.
struct Shared {
    root: tempfile::TempDir,
    pipeline_run: Option<PathBuf>,
}

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e2s<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn quiet_ctx(config: RunConfig) -> Context {
    Context::new(config, true).expect("valid config")
}

// 1
fn feature_invariants(_: &mut Shared) -> Check {
    let mut vectors = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    for c in 0..5 {
        let cfg = PhantomConfig {
            seed: rng.random(),
            subjects: 4,
            train_subjects: 3,
            spurious_probability: rng.random_range(0.0..0.02),
            jitter_std: rng.random_range(0.0..0.4),
            ..Default::default()
        };
        for s in generate_cohort(&cfg).map_err(e2s)? {
            let out = extract_features(&s.clusters, &s.mask, &SmoothingConfig::default()).map_err(e2s)?;
            ensure(out.empty_clusters.is_empty(), format!("cohort {c} {}: empty clusters {:?}", s.id, out.empty_clusters))?;
            let f = out.field;
            for (i, v) in f.vectors().enumerate() {
                ensure(v.iter().all(|&x| x > 0.0 && x <= 1.0), format!("cohort {c} {} voxel {i}: entry outside (0,1]", s.id))?;
                ensure(v.iter().any(|&x| x != 0.0), format!("cohort {c} {} voxel {i}: zero vector", s.id))?;
                vectors += 1;
            }
        }
    }
    Ok(format!("{vectors} vectors over 5 cohorts"))
}

// 2
fn distance_oracle(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let dims = [rng.random_range(1..12), rng.random_range(1..12), rng.random_range(1..12)];
        let grid = VoxelGrid::with_dims(dims).map_err(e2s)?;
        let n = grid.len();
        let p_mask = rng.random_range(0.1..1.0);
        let p_target = rng.random_range(0.01..0.3);
        let mut voxels: Vec<usize> = (0..n).filter(|_| rng.random_bool(p_mask)).collect();
        if voxels.is_empty() {
            voxels.push(rng.random_range(0..n));
        }
        let mut target: Vec<usize> = (0..n).filter(|_| rng.random_bool(p_target)).collect();
        if target.is_empty() {
            target.push(rng.random_range(0..n));
        }
        let mask = Mask::new(grid, voxels).map_err(e2s)?;
        let field = distance_field(&mask, &target).map_err(e2s)?;
        let coord = |i: usize| [i % dims[0], (i / dims[0]) % dims[1], i / (dims[0] * dims[1])];
        for (pos, &v) in mask.voxels().iter().enumerate() {
            let a = coord(v);
            let brute = target
                .iter()
                .map(|&t| {
                    let b = coord(t);
                    (0..3).map(|d| (a[d] as f64 - b[d] as f64).powi(2)).sum::<f64>().sqrt()
                })
                .fold(f64::INFINITY, f64::min);
            let err = (field.values[pos] - brute).abs();
            worst = worst.max(err);
            ensure(err <= 1e-9, format!("case {case} voxel {v}: {} vs brute force {brute}", field.values[pos]))?;
        }
    }
    Ok(format!("100 instances, max abs error {worst:.1e}"))
}

// 3
/// Central difference of the training loss along one parameter, accumulated
/// element-wise from the reconstructions and latents so the two rounded
/// totals never cancel.
#[allow(clippy::too_many_arguments)]
fn loss_difference(net: &Network, p: &NetworkParams, idx: usize, eps: f64, xs: &[Vec<f64>], cents: &[Vec<f64>], assign: &[usize], lambda: f64) -> f64 {
    let mut plus = p.clone();
    plus.data[idx] += eps;
    let mut minus = p.clone();
    minus.data[idx] -= eps;
    let b = xs.len() as f64;
    let mut diff = 0.0;
    for (x, &a) in xs.iter().zip(assign) {
        let zp = net.encode(&plus, x).unwrap();
        let zm = net.encode(&minus, x).unwrap();
        let yp = net.decode(&plus, &zp).unwrap();
        let ym = net.decode(&minus, &zm).unwrap();
        let rec: f64 = yp.iter().zip(&ym).zip(x).map(|((u, v), t)| (u - v) * (u + v - 2.0 * t)).sum();
        diff += rec / x.len() as f64 / b;
        if lambda != 0.0 {
            let m = &cents[a];
            let cen: f64 = zp.iter().zip(&zm).zip(m).map(|((u, v), c)| (u - v) * (u + v - 2.0 * c)).sum();
            diff += lambda / 2.0 * cen / b;
        }
    }
    diff / (2.0 * eps)
}

fn gradient_check(_: &mut Shared) -> Check {
    let cfg = NetworkConfig { k: 16, latent_dim: 10, layers_per_block: 2, growth_rate: 3, transition_channels: vec![4, 6], kernel_size: 3 };
    let net = Network::new(cfg).map_err(e2s)?;
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let p = net.init_params(5);
    let xs: Vec<Vec<f64>> = (0..3).map(|_| augment(&(0..16).map(|_| rng.random_range(0.01..1.0)).collect::<Vec<f64>>()).into_vec()).collect();
    let refs: Vec<&[f64]> = xs.iter().map(|x| x.as_slice()).collect();
    let cents: Vec<Vec<f64>> = (0..2).map(|_| (0..10).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let assign = [1, 0, 1];
    let checked: Vec<usize> = (0..300).map(|_| rng.random_range(0..net.n_params())).collect();
    let mut worst: f64 = 0.0;
    let mut refined = 0;
    for lambda in [0.0, 3.3e-5, 10.0] {
        let g = net.loss_and_gradients(&p, &refs, &cents, &assign, lambda).map_err(e2s)?;
        for &idx in &checked {
            // Richardson extrapolation over (h, h/2) cancels the O(h^2)
            // truncation term. A step that straddles a ReLU kink is not a
            // derivative estimate, so walk down a ladder of steps until two
            // neighbours agree; too small a step drowns in round-off.
            let richardson = |h: f64| {
                let full = loss_difference(&net, &p, idx, h, &xs, &cents, &assign, lambda);
                let half = loss_difference(&net, &p, idx, h / 2.0, &xs, &cents, &assign, lambda);
                (4.0 * half - full) / 3.0
            };
            let ladder: Vec<f64> = [1e-3, 1e-4, 1e-5, 1e-6].iter().map(|&h| richardson(h)).collect();
            let gap = |i: usize| (ladder[i] - ladder[i + 1]).abs();
            let best = (0..ladder.len() - 1)
                .find(|&i| gap(i) <= 1e-7 * ladder[i + 1].abs() + 1e-12)
                .unwrap_or_else(|| (0..ladder.len() - 1).min_by(|&i, &j| gap(i).total_cmp(&gap(j))).unwrap());
            if best > 0 {
                refined += 1;
            }
            let numeric = ladder[best + 1];
            let a = g.params[idx];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-7);
            worst = worst.max(rel);
            ensure(rel < 1e-6, format!("lambda {lambda} param {idx}: analytic {a:e} vs numeric {numeric:e} (rel {rel:.2e})"))?;
        }
    }
    Ok(format!("3 x 300 parameters, max relative error {worst:.2e}, {refined} needed a finer step"))
}

// 4
fn pretraining_descent(_: &mut Shared) -> Check {
    let k = 16;
    let net = Network::new(NetworkConfig { k, latent_dim: 10, layers_per_block: 3, growth_rate: 8, transition_channels: vec![16, 24], kernel_size: 3 }).map_err(e2s)?;
    // circular Gaussian bumps at eight positions
    let data: Vec<Vec<f64>> = (0..8)
        .map(|s| {
            (0..k)
                .map(|j| {
                    let d = (j as f64 - 2.0 * s as f64).rem_euclid(k as f64);
                    let d = d.min(k as f64 - d);
                    0.1 + 0.8 * (-d * d / 4.5).exp()
                })
                .collect()
        })
        .collect();
    let refs: Vec<&[f64]> = data.iter().map(|v| v.as_slice()).collect();
    let cfg = TrainConfig { batch_size: 8, pretrain_epochs: 500, pretrain_lr: 3e-3, optimizer: OptimizerKind::Adam, ..Default::default() };
    let (params, logs) = pretrain(&net, net.init_params(0), &refs, &cfg).map_err(e2s)?;
    let inputs: Vec<Vec<f64>> = data.iter().map(|v| augment(v).into_vec()).collect();
    let mut mse = 0.0;
    for x in &inputs {
        let y = net.decode(&params, &net.encode(&params, x).unwrap()).unwrap();
        mse += y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64 / inputs.len() as f64;
    }
    let first = logs.iter().position(|l| l.loss.reconstruction < 1e-3);
    ensure(mse < 1e-3, format!("MSE after 500 epochs {mse:.3e}"))?;
    Ok(format!("MSE {:.3e} -> {mse:.3e}, first below 1e-3 at epoch {}", logs[0].loss.reconstruction, first.map_or(-1, |e| e as i64 + 1)))
}

// 5
fn guard_behavior(_: &mut Shared) -> Check {
    let cfg = TrainConfig::default();
    let t = cfg.guard_threshold(3096);
    ensure(cfg.batch_size == 3096 && cfg.small_cluster_fraction == 1.0 / 80.0, "default batch/fraction")?;
    ensure(38.0 < t && 39.0 >= t, format!("threshold {t}"))?;
    // replace at 38, keep at 39
    let mut batch = vec![0usize; 3096 - 38 - 39];
    batch.extend(std::iter::repeat_n(1, 38));
    batch.extend(std::iter::repeat_n(2, 39));
    let mut st = amyparc::train::KMeansState { centroids: vec![vec![0.0], vec![5.0], vec![9.0]], assignments: vec![], counts: vec![10; 3] };
    let g = amyparc::train::adaptive_guard(&mut st, &batch, 3096, 1.0 / 80.0);
    ensure(g.replaced == vec![1] && st.centroids[1] == vec![4.5] && st.centroids[2] == vec![9.0], format!("guard at 38/39: {g:?}"))?;

    // Paired runs on a small phantom: shared pretraining and k-means start,
    // then joint training with a strong centroid pull, guard on vs off.
    let mut lines = Vec::new();
    let mut psc_wins = 0;
    for seed in 0..5u64 {
        let pc = PhantomConfig {
            dims: [16, 14, 12],
            semi_axes: [6.5, 5.5, 4.5],
            k: 18,
            streamlines_per_cluster: 200,
            subjects: 2,
            train_subjects: 2,
            seed,
            ..Default::default()
        };
        let cohort = generate_cohort(&pc).map_err(e2s)?;
        let feats: Vec<_> = cohort.iter().map(|s| extract_features(&s.clusters, &s.mask, &SmoothingConfig::default()).unwrap().field).collect();
        let data: Vec<&[f64]> = feats.iter().flat_map(|f| f.vectors()).collect();
        let netcfg = NetworkConfig { k: 18, latent_dim: 10, layers_per_block: 2, growth_rate: 4, transition_channels: vec![8, 12], kernel_size: 3 };
        let net = Network::new(netcfg.clone()).map_err(e2s)?;
        let base = TrainConfig {
            seed,
            batch_size: 328,
            pretrain_batch_size: Some(16),
            pretrain_epochs: 30,
            pretrain_lr: 3e-3,
            joint_epochs: 10,
            joint_lr: 3e-3,
            lambda: 0.1,
            ..Default::default()
        };
        let (params, _) = pretrain(&net, net.init_params(seed), &data, &base).map_err(e2s)?;
        let z = net.encode_vectors(&params, &data).map_err(e2s)?;
        let km = init_centroids(&z, 9, seed, 10).map_err(e2s)?;
        let mut psc = [0.0; 2];
        let mut mins = [0usize; 2];
        for (i, guard) in [true, false].into_iter().enumerate() {
            let cfg = TrainConfig { guard, ..base.clone() };
            let j = joint_train(&net, params.clone(), &data, km.clone(), &cfg).map_err(e2s)?;
            let model = DeepClusterModel { network: netcfg.clone(), params: j.params, centroids: j.kmeans.centroids, counts: j.kmeans.counts, train: cfg };
            let parcs: Vec<Parcellation> = cohort
                .iter()
                .zip(&feats)
                .map(|(s, f)| amyparc::train::parcellate(&model, f, &s.id, "m").unwrap())
                .collect();
            psc[i] = parcs.iter().map(parcel_size_coherence).sum::<f64>() / parcs.len() as f64;
            mins[i] = *cluster_sizes(&j.kmeans.assignments, 9).iter().min().unwrap();
        }
        ensure(mins[0] > 0, format!("seed {seed}: guard-on run ended with an empty parcel"))?;
        if psc[0] <= psc[1] {
            psc_wins += 1;
        }
        lines.push(format!("s{seed} on {:.3}/off {:.3} (min {}/{})", psc[0], psc[1], mins[0], mins[1]));
    }
    ensure(psc_wins >= 4, format!("guard-on PSC <= guard-off on {psc_wins}/5 seeds: {}", lines.join(", ")))?;
    Ok(format!("threshold {t}; PSC on<=off {psc_wins}/5; {}", lines.join(", ")))
}

// 6
fn end_to_end(shared: &mut Shared) -> Check {
    let out = shared.root.path().join("run-a");
    let ctx = quiet_ctx(RunConfig::default());
    let record = cmd_pipeline(&ctx, &out, false).map_err(e2s)?;
    shared.pipeline_run = Some(out.clone());
    let report: ReportFile = read_json(&PipelineDirs::new(&out).report.join(REPORT_JSON)).map_err(e2s)?;
    let r = &report.report;
    ensure(record.train_subjects.len() == 16 && record.test_subjects.len() == 4, "split is not 16/4")?;
    let ari = r.mean_ari.ok_or("no ARI in report")?;
    let mdice = r.mean_matched_region_dice.ok_or("no matched Dice in report")?;
    let summary = format!("held-out ARI {ari:.3}, SC {:.3}, matched Dice {mdice:.3}", r.mean_sc);
    ensure(ari >= 0.8 && r.mean_sc >= 0.9 && mdice >= 0.8, summary.clone())?;
    let secs: f64 = record.stages.iter().map(|s| s.seconds).sum();
    Ok(format!("{summary}, stages {secs:.0} s on {} threads", rayon::current_num_threads()))
}

// 7
fn coarse_groups(shared: &mut Shared) -> Check {
    let run = shared.pipeline_run.clone().ok_or("needs the end-to-end artifacts")?;
    let dirs = PipelineDirs::new(&run);
    let mut config = RunConfig::default();
    config.phantom.jitter_std = 0.0;
    config.phantom.spurious_probability = 0.0;
    config.phantom.dropout_probability = 0.0;
    let ctx = quiet_ctx(config);
    let out = shared.root.path().join("zero-noise");
    let subjects = out.join("subjects");
    cmd_gen(&ctx, &subjects).map_err(e2s)?;
    let manifest: CohortManifest = read_json(&subjects.join(MANIFEST_FILE)).map_err(e2s)?;
    let noisy: CohortManifest = read_json(&dirs.subjects.join(MANIFEST_FILE)).map_err(e2s)?;
    let test: Vec<_> = manifest.subjects.iter().filter(|e| e.split == Split::Test).collect();
    let files: Vec<PathBuf> = test.iter().map(|e| subjects.join(&e.file)).collect();
    for (e, f) in test.iter().zip(&files) {
        let clean = amyparc::io::read_subject(f).map_err(e2s)?;
        let entry = noisy.subjects.iter().find(|n| n.id == e.id).ok_or("subject missing from the noisy cohort")?;
        let noisy = amyparc::io::read_subject(&dirs.subjects.join(&entry.file)).map_err(e2s)?;
        ensure(clean.mask == noisy.mask && clean.regions == noisy.regions, "zero-noise cohort has a different layout")?;
    }
    let feats = cmd_features(&ctx, &files, &out.join("features")).map_err(e2s)?;
    let parcs = cmd_parcellate(&ctx, &dirs.model.join("model.json"), &feats, &out.join("parcellations")).map_err(e2s)?;
    let report = cmd_eval(&ctx, &parcs, &files, Some(&subjects.join(ATLAS_FILE)), &out.join("report")).map_err(e2s)?;
    let atlas = report.report.atlas.ok_or("no atlas comparison in report")?;
    let n = report.report.n_parcels;
    ensure(atlas.assignment.len() == n && atlas.assignment.iter().all(|g| g.is_some()), format!("not every parcel assigned: {:?}", atlas.assignment))?;
    ensure(atlas.covers_all_groups(), format!("assignment {:?} leaves a group empty", atlas.assignment))?;
    let groups: Vec<u32> = atlas.assignment.iter().map(|g| g.unwrap()).collect();
    ensure(atlas.mean_group_dice >= 0.9, format!("merged-group Dice {:.3} ({:?})", atlas.mean_group_dice, atlas.group_dice))?;
    Ok(format!("merged-group Dice {:.3}, {n} parcels -> groups {groups:?}", atlas.mean_group_dice))
}

// 8
fn pair_counting_ari(a: &[u32], b: &[u32]) -> f64 {
    let (mut ss, mut sd, mut ds, mut dd) = (0f64, 0f64, 0f64, 0f64);
    for i in 0..a.len() {
        for j in i + 1..a.len() {
            match (a[i] == a[j], b[i] == b[j]) {
                (true, true) => ss += 1.0,
                (true, false) => sd += 1.0,
                (false, true) => ds += 1.0,
                (false, false) => dd += 1.0,
            }
        }
    }
    let den = (ss + sd) * (sd + dd) + (ss + ds) * (ds + dd);
    if den == 0.0 {
        1.0
    } else {
        2.0 * (ss * dd - sd * ds) / den
    }
}

fn best_assignment(w: &[Vec<u64>]) -> u64 {
    // every injective map from the smaller side into the larger
    fn go(w: &[Vec<u64>], row: usize, used: &mut Vec<bool>, transposed: bool) -> u64 {
        let rows = if transposed { w[0].len() } else { w.len() };
        if row == rows {
            return 0;
        }
        let cols = if transposed { w.len() } else { w[0].len() };
        let mut best = 0;
        for c in 0..cols {
            if !used[c] {
                used[c] = true;
                let v = if transposed { w[c][row] } else { w[row][c] };
                best = best.max(v + go(w, row + 1, used, transposed));
                used[c] = false;
            }
        }
        best
    }
    let transposed = w.len() > w[0].len();
    let cols = if transposed { w.len() } else { w[0].len() };
    go(w, 0, &mut vec![false; cols], transposed)
}

fn metric_oracles(_: &mut Shared) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let grid = VoxelGrid::with_dims([5, 4, 3]).map_err(e2s)?;
    for case in 0..50 {
        let pick = |rng: &mut ChaCha8Rng, p: f64| -> Vec<usize> { (0..grid.len()).filter(|_| rng.random_bool(p)).collect() };
        let (a, b) = (pick(&mut rng, 0.4), pick(&mut rng, 0.4));
        let (sa, sb): (HashSet<_>, HashSet<_>) = (a.iter().collect(), b.iter().collect());
        let want = if sa.is_empty() && sb.is_empty() { 0.0 } else { 2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64 };
        let got = dice(&Mask::new(grid, a).unwrap(), &Mask::new(grid, b).unwrap()).map_err(e2s)?;
        ensure((got - want).abs() < 1e-12, format!("dice case {case}: {got} vs {want}"))?;
    }
    for case in 0..50 {
        let n = rng.random_range(2..40);
        let (ka, kb) = (rng.random_range(1..6), rng.random_range(1..6));
        let a: Vec<u32> = (0..n).map(|_| rng.random_range(0..ka)).collect();
        let b: Vec<u32> = (0..n).map(|_| rng.random_range(0..kb)).collect();
        let got = adjusted_rand_index(&a, &b).map_err(e2s)?;
        let want = pair_counting_ari(&a, &b);
        ensure((got - want).abs() < 1e-9, format!("ARI case {case}: {got} vs {want}"))?;
    }
    for case in 0..50 {
        let (r, c) = (rng.random_range(1..7), rng.random_range(1..7));
        let w: Vec<Vec<u64>> = (0..r).map(|_| (0..c).map(|_| rng.random_range(0..50)).collect()).collect();
        let m = hungarian_match(&w).map_err(e2s)?;
        let want = best_assignment(&w);
        let realized: u64 = m.row_to_col.iter().enumerate().filter_map(|(i, c)| c.map(|c| w[i][c])).sum();
        let cols: Vec<usize> = m.row_to_col.iter().flatten().copied().collect();
        ensure(cols.len() == cols.iter().collect::<HashSet<_>>().len(), format!("Hungarian case {case}: column reused"))?;
        ensure(m.total == want && realized == want, format!("Hungarian case {case}: {} (realized {realized}) vs {want}", m.total))?;
    }
    // SC = 1 on connected parcels, PSC = 0 on equal partitions
    let grid = VoxelGrid::with_dims([6, 4, 2]).map_err(e2s)?;
    let mask = Mask::full(grid);
    let labels: Vec<u32> = mask.voxels().iter().map(|&v| (v % 6 / 2) as u32).collect();
    let p = Parcellation::new(mask, labels, 3, "s".into(), "m".into()).map_err(e2s)?;
    for conn in [Connectivity::Six, Connectivity::TwentySix] {
        let sc = spatial_continuity(&p, conn).map_err(e2s)?;
        ensure(sc.mean == 1.0, format!("SC {} on connected slabs", sc.mean))?;
    }
    let psc = parcel_size_coherence(&p);
    ensure(psc == 0.0, format!("PSC {psc} on an equal partition"))?;
    Ok("50 Dice, 50 ARI, 50 Hungarian instances; SC 1, PSC 0".into())
}

// 9
fn files_equal(a: &Path, b: &Path) -> Result<(), String> {
    let (x, y) = (fs::read(a).map_err(e2s)?, fs::read(b).map_err(e2s)?);
    ensure(x == y, format!("{} and {} differ", a.display(), b.display()))
}

fn determinism(shared: &mut Shared) -> Check {
    let first = shared.pipeline_run.clone().ok_or("needs the end-to-end artifacts")?;
    let second = shared.root.path().join("run-b");
    let ctx = quiet_ctx(RunConfig::default());
    cmd_pipeline(&ctx, &second, false).map_err(e2s)?;
    let (a, b) = (PipelineDirs::new(&first), PipelineDirs::new(&second));
    files_equal(&a.report.join(REPORT_JSON), &b.report.join(REPORT_JSON))?;
    files_equal(&a.report.join("report.csv"), &b.report.join("report.csv"))?;
    files_equal(&a.model.join("model.amym"), &b.model.join("model.amym"))?;

    // pure stages across thread counts
    let manifest: CohortManifest = read_json(&a.subjects.join(MANIFEST_FILE)).map_err(e2s)?;
    let subjects: Vec<PathBuf> = manifest.subjects.iter().map(|e| a.subjects.join(&e.file)).collect();
    let test: Vec<_> = manifest.subjects.iter().filter(|e| e.split == Split::Test).collect();
    let truth: Vec<PathBuf> = test.iter().map(|e| a.subjects.join(&e.file)).collect();
    let parcs: Vec<PathBuf> = test.iter().map(|e| amyparc_cli::parcellation_path(&a.parcellations, &e.id)).collect();
    let mut outs = Vec::new();
    for threads in [1, 8] {
        let dir = shared.root.path().join(format!("threads-{threads}"));
        with_threads(Some(threads), || -> Result<(), String> {
            cmd_features(&ctx, &subjects, &dir.join("features")).map_err(e2s)?;
            cmd_eval(&ctx, &parcs, &truth, Some(&a.subjects.join(ATLAS_FILE)), &dir.join("report")).map_err(e2s)?;
            Ok(())
        })
        .map_err(e2s)??;
        outs.push(dir);
    }
    for e in &manifest.subjects {
        files_equal(&feature_path(&outs[0].join("features"), &e.id), &feature_path(&outs[1].join("features"), &e.id))?;
    }
    files_equal(&outs[0].join("report").join(REPORT_JSON), &outs[1].join("report").join(REPORT_JSON))?;
    Ok(format!("reports, CSV and weights byte-identical across reruns; {} feature files and the report identical at 1 vs 8 threads", subjects.len()))
}

type Criterion = (&'static str, fn(&mut Shared) -> Check, u64);

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 feature invariants", feature_invariants, 10),
        ("2 distance-field oracle", distance_oracle, 10),
        ("3 gradient check", gradient_check, 60),
        ("4 pretraining descent", pretraining_descent, 60),
        ("5 adaptive guard", guard_behavior, 300),
        ("6 end-to-end recovery", end_to_end, 300),
        ("7 coarse-group atlas", coarse_groups, 60),
        ("8 metric oracles", metric_oracles, 30),
        ("9 determinism", determinism, 600),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut shared = Shared { root: tempfile::tempdir().expect("temp dir"), pipeline_run: None };
    let mut failed = 0;
    for (name, check, budget) in criteria {
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = check(&mut shared);
        let elapsed = start.elapsed();
        let result = result.and_then(|d| {
            if elapsed > Duration::from_secs(budget) {
                Err(format!("{d}; took {:.1} s, budget {budget} s", elapsed.as_secs_f64()))
            } else {
                Ok(d)
            }
        });
        match result {
            Ok(d) => println!("PASS criterion {name}: {d} ({:.1} s)", elapsed.as_secs_f64()),
            Err(d) => {
                failed += 1;
                println!("FAIL criterion {name}: {d} ({:.1} s)", elapsed.as_secs_f64());
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
