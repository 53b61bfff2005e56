//! Configuration-driven experiment pipeline.
//!
//! Four stages — train, attack, regions, audit — each read the resolved
//! config plus prior artifacts from the output directory and append to the
//! run manifest. The whole pipeline is a pure function of (config, data
//! files); wall-clock timings go to a separate sidecar so the manifest and
//! tables are byte-reproducible.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attacks::{
    self, AdversarialSet, AttackConfig, AttackKind, AttackTarget,
};
use crate::data::{load_mnist_dir, Dataset, ImageVec, Split};
use crate::ensemble::{
    load_ensemble, member_error_rates, save_ensemble, train_ensemble, Ensemble,
};
use crate::error::{Error, Result};
use crate::nn::{batch_from_pixels, Architecture, Optimizer, TrainConfig};
use crate::regions::{
    build_rectangle, choose_b, compute_intervals, evaluate, BaseMode, RegionReport,
};
use crate::report::{self, Table};

/// Selects the clean image attacked by the experiment.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CleanImageSelector {
    pub split: Split,
    /// Exact dataset index; must be classified correctly by every member.
    #[serde(default)]
    pub index: Option<usize>,
    /// First image with this label that every member classifies correctly.
    #[serde(default)]
    pub label: Option<u8>,
}

/// One attack family in the roster, with optional overrides on the per-kind
/// defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackPlan {
    pub kind: AttackKind,
    /// Target classes; `None` means every class other than the true one.
    #[serde(default)]
    pub targets: Option<Vec<u8>>,
    #[serde(default)]
    pub count: Option<usize>,
    #[serde(default)]
    pub epsilon: Option<f64>,
    #[serde(default)]
    pub iterations: Option<usize>,
    #[serde(default)]
    pub cw_binary_search_steps: Option<usize>,
    #[serde(default)]
    pub cw_learning_rate: Option<f64>,
}

impl AttackPlan {
    pub fn of(kind: AttackKind) -> Self {
        Self {
            kind,
            targets: None,
            count: None,
            epsilon: None,
            iterations: None,
            cw_binary_search_steps: None,
            cw_learning_rate: None,
        }
    }

    pub fn materialize(&self, seed: u64) -> AttackConfig {
        let mut cfg = AttackConfig::new(self.kind).with_seed(seed);
        if let Some(c) = self.count {
            cfg.count = c;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(i) = self.iterations {
            cfg.iterations = i;
        }
        if let Some(s) = self.cw_binary_search_steps {
            cfg.cw.binary_search_steps = s;
        }
        if let Some(lr) = self.cw_learning_rate {
            cfg.cw.learning_rate = lr;
        }
        cfg
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub architecture: Architecture,
    pub seeds: Vec<u64>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub data_dir: PathBuf,
    pub clean_image: CleanImageSelector,
    pub attacks: Vec<AttackPlan>,
    /// L2 acceptance bound; `None` = adaptive per set.
    #[serde(default)]
    pub delta: Option<f64>,
    /// Interval-size threshold for choosing b.
    pub tau: f64,
    pub theta_high: f64,
    pub theta_low: f64,
    pub n_samples: usize,
    pub attack_seed: u64,
    pub sample_seed: u64,
    #[serde(default)]
    pub base_mode: BaseMode,
    /// Minimum examples wanted per set; smaller sets are flagged, not fatal.
    pub min_count: usize,
    /// Additional rectangles per set at these fractions of the perturbed
    /// pixel count, besides the tau rule.
    #[serde(default)]
    pub b_sweep: Vec<f64>,
    /// Train on only the first N images (scaled-down runs); `None` uses the
    /// full training split.
    #[serde(default)]
    pub train_subset: Option<usize>,
}

impl ExperimentConfig {
    /// The paper-scale MNIST CNN experiment: ten seeds, full attack roster
    /// against a digit-1 test image.
    pub fn lenet_default(data_dir: PathBuf) -> Self {
        Self {
            architecture: Architecture::Lenet,
            seeds: (1..=10).collect(),
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            data_dir,
            clean_image: CleanImageSelector { split: Split::Test, index: None, label: Some(1) },
            attacks: AttackKind::ALL.iter().map(|&k| AttackPlan::of(k)).collect(),
            delta: None,
            tau: 0.036,
            theta_high: 0.8,
            theta_low: 0.05,
            n_samples: 1000,
            attack_seed: 1001,
            sample_seed: 2002,
            base_mode: BaseMode::Median,
            min_count: 80,
            b_sweep: vec![0.25, 0.5],
            train_subset: None,
        }
    }

    /// The five-seed MLP variant.
    pub fn mlp_default(data_dir: PathBuf) -> Self {
        Self {
            architecture: Architecture::Mlp,
            seeds: (1..=5).collect(),
            ..Self::lenet_default(data_dir)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.len() < 2 {
            return Err(Error::InvalidConfig("ensemble needs at least 2 seeds".into()));
        }
        for th in [self.theta_high, self.theta_low] {
            if !(0.0..=1.0).contains(&th) {
                return Err(Error::InvalidConfig("thresholds must lie in [0,1]".into()));
            }
        }
        if self.clean_image.index.is_none() && self.clean_image.label.is_none() {
            return Err(Error::InvalidConfig("clean_image needs an index or a label".into()));
        }
        if self.n_samples == 0 {
            return Err(Error::InvalidConfig("n_samples must be >= 1".into()));
        }
        Ok(())
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            seed,
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            optimizer: Optimizer::default(),
            double_precision: false,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        let digest = Sha256::digest(&bytes);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Paths of everything a run produced. Wall-clock timings live in a separate
/// `timings.json` so reruns with identical inputs yield identical manifests.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    #[serde(default)]
    pub ensemble_manifest: Option<PathBuf>,
    #[serde(default)]
    pub baseline_tables: Vec<PathBuf>,
    #[serde(default)]
    pub attack_sets: Vec<PathBuf>,
    #[serde(default)]
    pub attack_shortfalls: Vec<String>,
    #[serde(default)]
    pub transfer_tables: Vec<PathBuf>,
    #[serde(default)]
    pub region_files: Vec<PathBuf>,
    #[serde(default)]
    pub region_tables: Vec<PathBuf>,
    #[serde(default)]
    pub sample_files: Vec<PathBuf>,
    #[serde(default)]
    pub skipped_sets: Vec<String>,
    #[serde(default)]
    pub audit_files: Vec<PathBuf>,
    #[serde(default)]
    pub timings_path: Option<PathBuf>,
}

impl RunManifest {
    pub fn path(out: &Path) -> PathBuf {
        out.join("manifest.json")
    }

    pub fn load_or_new(out: &Path, config_hash: &str) -> Result<Self> {
        let p = Self::path(out);
        if p.exists() {
            let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let m: RunManifest = serde_json::from_slice(&bytes)?;
            if m.config_hash != config_hash {
                return Err(Error::InvalidConfig(format!(
                    "output dir {} belongs to a different config (hash {} != {})",
                    out.display(),
                    m.config_hash,
                    config_hash
                )));
            }
            Ok(m)
        } else {
            Ok(RunManifest { config_hash: config_hash.to_string(), ..Default::default() })
        }
    }

    pub fn save(&self, out: &Path) -> Result<()> {
        let p = Self::path(out);
        std::fs::write(&p, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&p, e))
    }

    /// Every referenced artifact must exist.
    pub fn check_artifacts(&self, out: &Path) -> Result<()> {
        let mut all: Vec<&PathBuf> = Vec::new();
        all.extend(self.ensemble_manifest.iter());
        all.extend(self.baseline_tables.iter());
        all.extend(self.attack_sets.iter());
        all.extend(self.transfer_tables.iter());
        all.extend(self.region_files.iter());
        all.extend(self.region_tables.iter());
        all.extend(self.sample_files.iter());
        all.extend(self.audit_files.iter());
        all.extend(self.timings_path.iter());
        for p in all {
            let full = out.join(p);
            if !full.exists() {
                return Err(Error::MissingArtifact(full.display().to_string()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Timings {
    pub stages: Vec<(String, f64)>,
}

fn record_timing(out: &Path, stage: &str, secs: f64) -> Result<PathBuf> {
    let p = out.join("timings.json");
    let mut t: Timings = if p.exists() {
        serde_json::from_slice(&std::fs::read(&p).map_err(|e| Error::io(&p, e))?)?
    } else {
        Timings::default()
    };
    t.stages.retain(|(s, _)| s != stage);
    t.stages.push((stage.to_string(), secs));
    std::fs::write(&p, serde_json::to_vec_pretty(&t)?).map_err(|e| Error::io(&p, e))?;
    Ok(PathBuf::from("timings.json"))
}

fn prepare_out(cfg: &ExperimentConfig, out: &Path) -> Result<String> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    cfg.validate()?;
    cfg.save(&out.join("resolved_config.json"))?;
    cfg.hash()
}

/// Stage 1: train the seed-varied ensemble and emit the baseline table.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let hash = prepare_out(cfg, out)?;
    let mut manifest = RunManifest::load_or_new(out, &hash)?;
    let (mut train_ds, test_ds) = load_mnist_dir(&cfg.data_dir)?;
    if let Some(n) = cfg.train_subset {
        train_ds.images.truncate(n);
    }
    let ens = train_ensemble(
        cfg.architecture,
        &train_ds,
        Some(&test_ds),
        &cfg.seeds,
        &cfg.train_config(0),
    )?;
    let models_dir = out.join("models");
    save_ensemble(&ens, &models_dir)?;
    let errors: Vec<f64> = ens.models().iter().map(|m| m.test_error.unwrap_or(f64::NAN)).collect();
    let table = report::baseline_table(cfg.architecture.name(), &errors);
    let paths = table.save(out, "baseline")?;
    manifest.ensemble_manifest = Some(PathBuf::from("models/ensemble.json"));
    manifest.baseline_tables = relativize(&paths, out);
    manifest.timings_path = Some(record_timing(out, "train", t0.elapsed().as_secs_f64())?);
    manifest.save(out)?;
    manifest.check_artifacts(out)?;
    Ok(())
}

fn relativize(paths: &[PathBuf], out: &Path) -> Vec<PathBuf> {
    paths
        .iter()
        .map(|p| p.strip_prefix(out).map(Path::to_path_buf).unwrap_or_else(|_| p.clone()))
        .collect()
}

fn load_run_ensemble(out: &Path) -> Result<Ensemble> {
    let manifest_path = out.join("models/ensemble.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact(format!(
            "{} (run `train` first)",
            manifest_path.display()
        )));
    }
    load_ensemble(&manifest_path)
}

/// Resolve the configured clean image against the ensemble: it must be
/// classified correctly by every member.
pub fn pick_clean_image(cfg: &ExperimentConfig, ens: &Ensemble) -> Result<ImageVec> {
    let (train_ds, test_ds) = load_mnist_dir(&cfg.data_dir)?;
    let ds: &Dataset = match cfg.clean_image.split {
        Split::Train => &train_ds,
        Split::Test => &test_ds,
    };
    let all_correct = |im: &ImageVec| {
        let label = im.label;
        ens.models().iter().all(|m| Some(m.predict(im)) == label)
    };
    if let Some(idx) = cfg.clean_image.index {
        let im = ds
            .images
            .get(idx)
            .ok_or_else(|| Error::InvalidConfig(format!("image index {idx} out of range")))?;
        if !all_correct(im) {
            return Err(Error::InvalidConfig(format!(
                "image {idx} is not classified correctly by every member"
            )));
        }
        return Ok(im.clone());
    }
    let label = cfg.clean_image.label.expect("validated");
    ds.images
        .iter()
        .find(|im| im.label == Some(label) && all_correct(im))
        .cloned()
        .ok_or_else(|| {
            Error::InvalidConfig(format!("no image with label {label} that all members classify"))
        })
}

/// Per-model misclassification rates over a set's examples.
fn set_transfer_rates(ens: &Ensemble, set: &AdversarialSet) -> Result<Vec<f64>> {
    let dim = set.clean.dim();
    let batch = batch_from_pixels(set.examples.iter().map(|e| e.pixels.as_slice()), dim)?;
    let mut rates = Vec::with_capacity(ens.len());
    for m in ens.models() {
        let preds = m.net.predict_batch(&batch)?;
        let wrong = preds.iter().filter(|&&p| p != set.clean_label).count();
        rates.push(wrong as f64 / set.len() as f64);
    }
    Ok(rates)
}

/// Stage 2: generate the adversarial sets and the transfer matrix.
pub fn cmd_attack(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let hash = prepare_out(cfg, out)?;
    let mut manifest = RunManifest::load_or_new(out, &hash)?;
    let ens = load_run_ensemble(out)?;
    let clean = pick_clean_image(cfg, &ens)?;
    let clean_label = clean.label.expect("dataset images are labeled");
    let target = ens.target();
    let target_id = format!("M1_seed{}", target.seed);

    let sets_dir = out.join("attacks");
    std::fs::create_dir_all(&sets_dir).map_err(|e| Error::io(&sets_dir, e))?;
    let mut set_paths = Vec::new();
    let mut shortfalls = Vec::new();
    let mut transfer_rows: Vec<(String, Vec<f64>)> = Vec::new();

    for plan in &cfg.attacks {
        let base = plan.materialize(cfg.attack_seed);
        let targets: Vec<u8> = match &plan.targets {
            Some(ts) => ts.clone(),
            None => (0..10).filter(|&t| t != clean_label).collect(),
        };
        // one untargeted pool per kind, shared across target classes
        let untargeted_cfg = AttackConfig {
            target: AttackTarget::Untargeted,
            seed: base.seed ^ 0x9e37_79b9,
            delta: cfg.delta,
            ..base
        };
        let untargeted_sets =
            attacks::run_attack_all_classes(target, &clean, &untargeted_cfg).unwrap_or_default();
        for &t in &targets {
            if t == clean_label {
                continue;
            }
            let untargeted_pixels: Vec<Vec<f32>> = untargeted_sets
                .iter()
                .filter(|s| s.class_t == t)
                .flat_map(|s| s.examples.iter().map(|e| e.pixels.clone()))
                .collect();
            let set = attacks::generate_set_merged(
                target,
                &clean,
                plan.kind,
                t,
                cfg.delta,
                cfg.min_count,
                &base,
                &target_id,
                untargeted_pixels,
            );
            let set = match set {
                Ok(s) => s,
                Err(Error::EmptySet(_)) => continue,
                Err(e) => return Err(e),
            };
            if let Some(want) = set.shortfall_of {
                shortfalls.push(format!("{}: {} of {}", set_label(&set), set.len(), want));
            }
            let rates = set_transfer_rates(&ens, &set)?;
            transfer_rows.push((set_label(&set), rates));
            let file = sets_dir.join(format!("{}_{}.advs", kind_slug(plan.kind), t));
            attacks::save_set(&set, &file)?;
            set_paths.push(PathBuf::from("attacks").join(file.file_name().unwrap()));
        }
    }

    let table = report::transfer_table(&transfer_rows, ens.len());
    let paths = table.save(out, "transfer")?;
    manifest.attack_sets = set_paths;
    manifest.attack_shortfalls = shortfalls;
    manifest.transfer_tables = relativize(&paths, out);
    manifest.timings_path = Some(record_timing(out, "attack", t0.elapsed().as_secs_f64())?);
    manifest.save(out)?;
    manifest.check_artifacts(out)?;
    Ok(())
}

pub fn set_label(set: &AdversarialSet) -> String {
    format!(
        "{} {}d {}->{}",
        set.kind.label(),
        set.perturbed_pixel_union(),
        set.clean_label,
        set.class_t
    )
}

fn kind_slug(kind: AttackKind) -> String {
    kind.label().to_ascii_lowercase().replace(' ', "_")
}

/// Stage 3: build hyper-rectangles from the stored sets, sample and evaluate
/// them, and emit the region tables.
pub fn cmd_regions(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let hash = prepare_out(cfg, out)?;
    let mut manifest = RunManifest::load_or_new(out, &hash)?;
    if manifest.attack_sets.is_empty() {
        return Err(Error::MissingArtifact("no attack sets (run `attack` first)".into()));
    }
    let ens = load_run_ensemble(out)?;
    let regions_dir = out.join("regions");
    let samples_dir = regions_dir.join("samples");
    std::fs::create_dir_all(&samples_dir).map_err(|e| Error::io(&samples_dir, e))?;

    let mut reports: Vec<RegionReport> = Vec::new();
    let mut region_files = Vec::new();
    let mut sample_files = Vec::new();
    let mut skipped = Vec::new();

    for rel in &manifest.attack_sets {
        let set = attacks::load_set(&out.join(rel))?;
        if set.len() < 2 {
            skipped.push(format!("{}: {} examples is too few for intervals", set_label(&set), set.len()));
            continue;
        }
        let intervals = compute_intervals(&set)?;
        let m = intervals.len();
        let mut bs = vec![choose_b(&intervals, cfg.tau)?];
        for &frac in &cfg.b_sweep {
            let b = ((m as f64 * frac).round() as usize).clamp(1, m);
            bs.push(b);
        }
        bs.sort_unstable();
        bs.dedup();
        for b in bs {
            let rect = build_rectangle(&set, &intervals, b, cfg.base_mode)?;
            let rep = evaluate(
                &rect,
                &ens,
                cfg.n_samples,
                cfg.sample_seed,
                &set.clean,
                set.l2_stats(),
                set.delta,
                cfg.theta_high,
                cfg.theta_low,
            )?;
            let stem = format!("{}_{}_{}", kind_slug(set.kind), set.class_t, b);
            let detail_path = regions_dir.join(format!("{stem}.json"));
            #[derive(Serialize)]
            struct RegionDetail<'a> {
                rectangle: &'a crate::regions::HyperRectangle,
                report: &'a RegionReport,
            }
            std::fs::write(
                &detail_path,
                serde_json::to_vec_pretty(&RegionDetail { rectangle: &rect, report: &rep })?,
            )
            .map_err(|e| Error::io(&detail_path, e))?;
            region_files.push(PathBuf::from("regions").join(format!("{stem}.json")));

            // a small reloadable sample of each region's images
            let sample_imgs: Vec<ImageVec> = crate::regions::sample(&rect, 16, cfg.sample_seed)
                .into_iter()
                .map(|mut im| {
                    im.label = Some(set.clean_label);
                    im
                })
                .collect();
            let img_path = samples_dir.join(format!("{stem}-images-idx3-ubyte"));
            let lbl_path = samples_dir.join(format!("{stem}-labels-idx1-ubyte"));
            crate::data::write_idx(&img_path, &lbl_path, &sample_imgs, 28, 28)?;
            sample_files.push(PathBuf::from("regions/samples").join(img_path.file_name().unwrap()));
            sample_files.push(PathBuf::from("regions/samples").join(lbl_path.file_name().unwrap()));

            reports.push(rep);
        }
    }

    let rate_table = report::region_rate_table(&reports, ens.len());
    let l2_table = report::region_l2_table(&reports);
    let mut table_paths = rate_table.save(out, "regions_rates")?;
    table_paths.extend(l2_table.save(out, "regions_l2")?);
    let reports_json = out.join("regions/reports.json");
    std::fs::write(&reports_json, serde_json::to_vec_pretty(&reports)?)
        .map_err(|e| Error::io(&reports_json, e))?;
    region_files.push(PathBuf::from("regions/reports.json"));

    manifest.region_files = region_files;
    manifest.region_tables = relativize(&table_paths, out);
    manifest.sample_files = sample_files;
    manifest.skipped_sets = skipped;
    manifest.timings_path = Some(record_timing(out, "regions", t0.elapsed().as_secs_f64())?);
    manifest.save(out)?;
    manifest.check_artifacts(out)?;
    Ok(())
}

/// Audit artifact: clean-data disagreement against per-region disagreement
/// and the alert strategy's coverage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AuditReport {
    pub clean_disagreement: f64,
    pub member_test_errors: Vec<f64>,
    /// Union bound: disagreement can never exceed the summed member errors.
    pub union_bound: f64,
    pub regions: Vec<RegionAudit>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionAudit {
    pub label: String,
    pub region_type: crate::regions::RegionType,
    pub disagreement: f64,
    /// Fraction of samples answered correctly or alerted on.
    pub alert_coverage: f64,
    pub alert_rate: f64,
}

/// Stage 4: measure ensemble disagreement on clean data versus inside each
/// region, plus the accuracy of the alert-on-disagreement strategy.
pub fn cmd_audit(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    let t0 = Instant::now();
    let hash = prepare_out(cfg, out)?;
    let mut manifest = RunManifest::load_or_new(out, &hash)?;
    let ens = load_run_ensemble(out)?;
    let (_, test_ds) = load_mnist_dir(&cfg.data_dir)?;
    let clean_disagreement = ens.disagreement_rate(&test_ds.images)?;
    let member_test_errors = member_error_rates(&ens, &test_ds)?;
    let union_bound: f64 = member_test_errors.iter().sum();

    let mut regions = Vec::new();
    for rel in &manifest.region_files {
        if !rel.extension().is_some_and(|e| e == "json") || rel.ends_with("reports.json") {
            continue;
        }
        #[derive(Deserialize)]
        struct RegionDetail {
            rectangle: crate::regions::HyperRectangle,
            report: RegionReport,
        }
        let detail: RegionDetail =
            serde_json::from_slice(&std::fs::read(out.join(rel)).map_err(|e| Error::io(rel, e))?)?;
        let samples = crate::regions::sample(&detail.rectangle, cfg.n_samples, cfg.sample_seed);
        let clean_label = detail.rectangle.clean_label;
        let mut disagreements = 0usize;
        let mut covered = 0usize;
        let mut alerts = 0usize;
        let dim = detail.rectangle.dim();
        let batch = batch_from_pixels(samples.iter().map(|s| s.pixels.as_slice()), dim)?;
        let all_preds: Vec<Vec<u8>> = ens
            .models()
            .iter()
            .map(|m| m.net.predict_batch(&batch))
            .collect::<Result<_>>()?;
        for i in 0..samples.len() {
            let first = all_preds[0][i];
            let unanimous = all_preds.iter().all(|p| p[i] == first);
            if !unanimous {
                disagreements += 1;
                alerts += 1;
                covered += 1; // alert counts as covered
            } else if first == clean_label {
                covered += 1;
            }
        }
        let n = samples.len() as f64;
        regions.push(RegionAudit {
            label: detail.report.label.clone(),
            region_type: detail.report.region_type,
            disagreement: disagreements as f64 / n,
            alert_coverage: covered as f64 / n,
            alert_rate: alerts as f64 / n,
        });
    }

    let audit = AuditReport { clean_disagreement, member_test_errors, union_bound, regions };
    let audit_path = out.join("audit.json");
    std::fs::write(&audit_path, serde_json::to_vec_pretty(&audit)?)
        .map_err(|e| Error::io(&audit_path, e))?;

    let mut table = Table::new(
        "disagreement audit",
        ["region", "type", "disagreement", "alert_coverage"]
            .iter()
            .map(|s| s.to_string())
            .collect(),
    );
    table.push_row(vec![
        "clean test set".into(),
        "-".into(),
        report::fmt_rate(audit.clean_disagreement),
        "-".into(),
    ]);
    for r in &audit.regions {
        table.push_row(vec![
            r.label.clone(),
            r.region_type.label().to_string(),
            report::fmt_rate(r.disagreement),
            report::fmt_rate(r.alert_coverage),
        ]);
    }
    let mut paths = table.save(out, "audit")?;
    paths.push(audit_path);
    manifest.audit_files = relativize(&paths, out);
    manifest.timings_path = Some(record_timing(out, "audit", t0.elapsed().as_secs_f64())?);
    manifest.save(out)?;
    manifest.check_artifacts(out)?;
    Ok(())
}

/// Stage 5: one Markdown summary stitched from the stage tables.
pub fn cmd_report(cfg: &ExperimentConfig, out: &Path) -> Result<PathBuf> {
    let hash = prepare_out(cfg, out)?;
    let manifest = RunManifest::load_or_new(out, &hash)?;
    let mut doc = String::from("# Experiment report\n\n");
    doc.push_str(&format!("config hash: `{}`\n\n", manifest.config_hash));
    for rel in manifest
        .baseline_tables
        .iter()
        .chain(manifest.transfer_tables.iter())
        .chain(manifest.region_tables.iter())
        .chain(manifest.audit_files.iter())
    {
        if rel.extension().is_some_and(|e| e == "md") {
            let body = std::fs::read_to_string(out.join(rel)).map_err(|e| Error::io(rel, e))?;
            doc.push_str(&body);
            doc.push('\n');
        }
    }
    if !manifest.attack_shortfalls.is_empty() {
        doc.push_str("### Attack shortfalls\n\n");
        for s in &manifest.attack_shortfalls {
            doc.push_str(&format!("- {s}\n"));
        }
        doc.push('\n');
    }
    if !manifest.skipped_sets.is_empty() {
        doc.push_str("### Skipped sets\n\n");
        for s in &manifest.skipped_sets {
            doc.push_str(&format!("- {s}\n"));
        }
        doc.push('\n');
    }
    let path = out.join("report.md");
    std::fs::write(&path, doc).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Run every stage in order.
pub fn run_all(cfg: &ExperimentConfig, out: &Path) -> Result<()> {
    cmd_train(cfg, out)?;
    cmd_attack(cfg, out)?;
    cmd_regions(cfg, out)?;
    cmd_audit(cfg, out)?;
    cmd_report(cfg, out)?;
    Ok(())
}
