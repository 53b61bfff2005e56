//! Seed-varied model ensembles and disagreement measurements.
//!
//! An ensemble is a set of models with identical architecture trained from
//! different initial seeds. The first model is the designated attack target.
//! An input on which any two members disagree lies in an uncertainty region;
//! the alert classifier refuses to answer there.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ImageVec};
use crate::error::{Error, Result};
use crate::nn::{error_rate, train, Architecture, Model, TrainConfig};

/// Ordered set of identically structured models; `models[0]` is the attack
/// target.
#[derive(Debug, Clone)]
pub struct Ensemble {
    models: Vec<Model>,
}

impl Ensemble {
    /// Wrap pre-trained models. All members must share one architecture and
    /// carry pairwise distinct seeds.
    pub fn new(models: Vec<Model>) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::InvalidConfig("ensemble needs at least 2 models".into()));
        }
        let arch = models[0].arch;
        if models.iter().any(|m| m.arch != arch) {
            return Err(Error::InvalidConfig("ensemble members must share one architecture".into()));
        }
        let mut seeds: Vec<u64> = models.iter().map(|m| m.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != models.len() {
            return Err(Error::InvalidConfig("ensemble seeds must be pairwise distinct".into()));
        }
        Ok(Self { models })
    }

    pub fn models(&self) -> &[Model] {
        &self.models
    }

    pub fn target(&self) -> &Model {
        &self.models[0]
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn arch(&self) -> Architecture {
        self.models[0].arch
    }

    pub fn seeds(&self) -> Vec<u64> {
        self.models.iter().map(|m| m.seed).collect()
    }

    /// Per-member labels for one image.
    pub fn labels(&self, image: &ImageVec) -> Vec<u8> {
        self.models.iter().map(|m| m.predict(image)).collect()
    }

    /// True iff two members assign different labels (the defining predicate
    /// of an uncertainty-region point).
    pub fn in_uncertainty_region(&self, image: &ImageVec) -> bool {
        let first = self.models[0].predict(image);
        self.models[1..].iter().any(|m| m.predict(image) != first)
    }

    /// Fraction of images on which at least two members disagree.
    pub fn disagreement_rate(&self, images: &[ImageVec]) -> Result<f64> {
        if images.is_empty() {
            return Err(Error::InvalidConfig("disagreement over empty image list".into()));
        }
        let disagreements: usize = images
            .par_chunks(256)
            .map(|chunk| chunk.iter().filter(|im| self.in_uncertainty_region(im)).count())
            .sum();
        Ok(disagreements as f64 / images.len() as f64)
    }

    /// Unanimous label or an alert with the per-member labels attached.
    pub fn classify_with_alert(&self, image: &ImageVec) -> EnsembleDecision {
        let labels = self.labels(image);
        let unanimous = labels.iter().all(|&l| l == labels[0]);
        EnsembleDecision {
            verdict: if unanimous {
                Verdict::Unanimous(labels[0])
            } else {
                Verdict::Alert
            },
            member_labels: labels,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Unanimous(u8),
    Alert,
}

/// Outcome of the alert-based robust classifier for one image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnsembleDecision {
    pub member_labels: Vec<u8>,
    pub verdict: Verdict,
}

impl EnsembleDecision {
    pub fn is_alert(&self) -> bool {
        self.verdict == Verdict::Alert
    }
}

/// Train one model per seed, in parallel; each training is single-threaded
/// and deterministic, so the ensemble is reproducible regardless of
/// scheduling.
pub fn train_ensemble(
    arch: Architecture,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    seeds: &[u64],
    base_cfg: &TrainConfig,
) -> Result<Ensemble> {
    if seeds.len() < 2 {
        return Err(Error::InvalidConfig("need at least 2 seeds".into()));
    }
    {
        let mut sorted = seeds.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != seeds.len() {
            return Err(Error::InvalidConfig("duplicate seed in ensemble seed list".into()));
        }
    }
    let results: Vec<Result<Model>> = seeds
        .par_iter()
        .map(|&seed| {
            let cfg = TrainConfig { seed, ..*base_cfg };
            train(arch, train_data, test_data, &cfg).map(|(m, _)| m)
        })
        .collect();
    let mut models = Vec::with_capacity(seeds.len());
    for r in results {
        models.push(r?);
    }
    Ensemble::new(models)
}

/// Baseline misclassification rates of every member over a dataset.
pub fn member_error_rates(ens: &Ensemble, data: &Dataset) -> Result<Vec<f64>> {
    ens.models.iter().map(|m| error_rate(&m.net, data)).collect()
}

/// Manifest tying an ensemble to its on-disk model files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleManifest {
    pub architecture: Architecture,
    pub seeds: Vec<u64>,
    pub model_paths: Vec<PathBuf>,
    pub test_errors: Vec<Option<f64>>,
}

impl EnsembleManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Persist every member under `dir` and write the manifest there.
pub fn save_ensemble(ens: &Ensemble, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut model_paths = Vec::new();
    for (i, m) in ens.models().iter().enumerate() {
        let name = format!("model_{:02}_seed{}.advm", i + 1, m.seed);
        crate::nn::io::save_model(m, &dir.join(&name))?;
        // manifest-relative so the whole directory stays relocatable
        model_paths.push(PathBuf::from(name));
    }
    let manifest = EnsembleManifest {
        architecture: ens.arch(),
        seeds: ens.seeds(),
        model_paths,
        test_errors: ens.models().iter().map(|m| m.test_error).collect(),
    };
    let path = dir.join("ensemble.json");
    manifest.save(&path)?;
    Ok(path)
}

pub fn load_ensemble(manifest_path: &Path) -> Result<Ensemble> {
    let manifest = EnsembleManifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut models = Vec::new();
    for p in &manifest.model_paths {
        // paths may be absolute, manifest-relative, or cwd-relative
        let candidate = if p.is_absolute() { p.clone() } else { base.join(p) };
        let resolved = if candidate.exists() { candidate } else { p.clone() };
        models.push(crate::nn::io::load_model(&resolved)?);
    }
    Ensemble::new(models)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Network;

    fn model_with_seed(seed: u64) -> Model {
        Model {
            arch: Architecture::Mlp,
            net: Network::<f32>::init(Architecture::Mlp.layer_specs(), seed).unwrap(),
            seed,
            cfg: TrainConfig::with_seed(seed),
            train_error: None,
            test_error: None,
        }
    }

    fn some_image() -> ImageVec {
        let mut rng = crate::rng::SplitMix64::new(5);
        ImageVec::new((0..784).map(|_| rng.next_f64() as f32).collect())
    }

    #[test]
    fn duplicated_model_never_disagrees_with_itself() {
        // same parameters under two seed labels
        let a = model_with_seed(1);
        let mut b = a.clone();
        b.seed = 2;
        let ens = Ensemble::new(vec![a, b]).unwrap();
        for k in 0..10 {
            let mut img = some_image();
            img.pixels[0] = k as f32 / 10.0;
            assert!(!ens.in_uncertainty_region(&img));
        }
        assert_eq!(ens.disagreement_rate(&[some_image()]).unwrap(), 0.0);
    }

    #[test]
    fn disagreeing_members_trigger_uncertainty_and_alert() {
        let ens = Ensemble::new(vec![model_with_seed(1), model_with_seed(2)]).unwrap();
        // scan for an input where the two random nets disagree
        let mut rng = crate::rng::SplitMix64::new(9);
        let mut found = false;
        for _ in 0..200 {
            let img = ImageVec::new((0..784).map(|_| rng.next_f64() as f32).collect());
            let labels = ens.labels(&img);
            if labels[0] != labels[1] {
                assert!(ens.in_uncertainty_region(&img));
                let d = ens.classify_with_alert(&img);
                assert!(d.is_alert());
                assert_eq!(d.member_labels, labels);
                found = true;
                break;
            }
        }
        assert!(found, "no disagreeing input found in 200 draws");
    }

    #[test]
    fn unanimous_decision_carries_the_label() {
        let a = model_with_seed(1);
        let mut b = a.clone();
        b.seed = 7;
        let ens = Ensemble::new(vec![a, b]).unwrap();
        let img = some_image();
        let d = ens.classify_with_alert(&img);
        assert!(!d.is_alert());
        match d.verdict {
            Verdict::Unanimous(l) => assert_eq!(l, d.member_labels[0]),
            Verdict::Alert => unreachable!(),
        }
    }

    #[test]
    fn alert_rate_equals_disagreement_rate() {
        let ens = Ensemble::new(vec![model_with_seed(1), model_with_seed(2)]).unwrap();
        let mut rng = crate::rng::SplitMix64::new(31);
        let images: Vec<ImageVec> = (0..64)
            .map(|_| ImageVec::new((0..784).map(|_| rng.next_f64() as f32).collect()))
            .collect();
        let alert_rate = images
            .iter()
            .filter(|im| ens.classify_with_alert(im).is_alert())
            .count() as f64
            / images.len() as f64;
        assert_eq!(alert_rate, ens.disagreement_rate(&images).unwrap());
    }

    #[test]
    fn construction_rejects_bad_ensembles() {
        assert!(Ensemble::new(vec![model_with_seed(1)]).is_err());
        assert!(Ensemble::new(vec![model_with_seed(1), model_with_seed(1)]).is_err());
        let mut other_arch = model_with_seed(2);
        other_arch.arch = Architecture::Lenet;
        other_arch.net = Network::<f32>::init(Architecture::Lenet.layer_specs(), 2).unwrap();
        assert!(Ensemble::new(vec![model_with_seed(1), other_arch]).is_err());
    }

    #[test]
    fn duplicate_training_seeds_are_rejected() {
        let ds = Dataset {
            images: vec![ImageVec::with_label(vec![0.0; 784], 0); 4],
            split: crate::data::Split::Train,
        };
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        assert!(train_ensemble(Architecture::Mlp, &ds, None, &[3, 3], &cfg).is_err());
        assert!(train_ensemble(Architecture::Mlp, &ds, None, &[3], &cfg).is_err());
    }
}
