//! Adversarial example generation.
//!
//! Six attack families populate per-(attack, class) adversarial sets against
//! a target model: the single-step fast gradient sign method, basic iterative
//! attacks under L1/L2/Linf budgets, momentum-accelerated iteration, the
//! probability-descent NewtonFool attack, a decision-based pointwise
//! L0-minimizer, and the Carlini-Wagner L2 optimization attack.
//!
//! One attack run produces many examples: trials differ by a small random
//! start box around the clean image, a step-size grid, and per-trial seeds,
//! all derived from the config seed and recorded in provenance.

mod cw2;
mod iterative;
mod newtonfool;
mod pointwise;

pub use cw2::cw2;
pub use iterative::{bim, fgsm, mi, BimNorm};
pub use newtonfool::{newtonfool, newtonfool_with_trace};
pub use pointwise::pointwise;

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{l2_distance, ImageVec, PIXEL_EPS};
use crate::error::{Error, Result};
use crate::nn::{softmax_rows, Model, Network};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttackKind {
    Pw,
    Cw2,
    Nf,
    Fgsm,
    BimL1,
    BimL2,
    BimLinf,
    Mi,
}

impl AttackKind {
    pub const ALL: [AttackKind; 8] = [
        AttackKind::Pw,
        AttackKind::Cw2,
        AttackKind::Nf,
        AttackKind::Fgsm,
        AttackKind::BimL1,
        AttackKind::BimL2,
        AttackKind::BimLinf,
        AttackKind::Mi,
    ];

    pub fn label(&self) -> &'static str {
        match self {
            AttackKind::Pw => "PW",
            AttackKind::Cw2 => "CW2",
            AttackKind::Nf => "NF",
            AttackKind::Fgsm => "FGSM",
            AttackKind::BimL1 => "BIM L1",
            AttackKind::BimL2 => "BIM L2",
            AttackKind::BimLinf => "BIM Linf",
            AttackKind::Mi => "MI",
        }
    }
}

impl std::str::FromStr for AttackKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace([' ', '-', '_'], "").as_str() {
            "pw" | "pointwise" => Ok(AttackKind::Pw),
            "cw2" | "cw" => Ok(AttackKind::Cw2),
            "nf" | "newtonfool" => Ok(AttackKind::Nf),
            "fgsm" => Ok(AttackKind::Fgsm),
            "biml1" => Ok(AttackKind::BimL1),
            "biml2" => Ok(AttackKind::BimL2),
            "bimlinf" => Ok(AttackKind::BimLinf),
            "mi" => Ok(AttackKind::Mi),
            other => Err(Error::InvalidConfig(format!("unknown attack kind {other:?}"))),
        }
    }
}

/// Attack goal: flip to anything, or force a specific class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackTarget {
    Untargeted,
    Class(u8),
}

/// Carlini-Wagner specific knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CwParams {
    pub initial_const: f64,
    pub binary_search_steps: usize,
    pub kappa: f64,
    pub learning_rate: f64,
}

impl Default for CwParams {
    fn default() -> Self {
        Self {
            initial_const: 1e-2,
            binary_search_steps: 9,
            kappa: 0.0,
            learning_rate: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// Perturbation budget (norm radius) for the gradient-sign family; the
    /// salt-and-pepper ceiling for PW; unused by NF/CW2.
    pub epsilon: f64,
    pub iterations: usize,
    /// Number of trials (random start x step grid x seed).
    pub count: usize,
    pub seed: u64,
    /// L2 acceptance bound; `None` selects 1.2x the largest observed
    /// perturbation, capped at 28.
    pub delta: Option<f64>,
    pub target: AttackTarget,
    /// Half-width of the uniform random-start box around the clean image.
    pub random_start_radius: f64,
    /// Explicit per-iteration step; `None` means `min(2.5*eps/iters, eps)`.
    pub step_size: Option<f64>,
    /// Momentum decay for MI (1.0 = full accumulation, 0.0 degenerates to
    /// BIM Linf).
    pub mi_decay: f64,
    /// NewtonFool step scale.
    pub nf_eta: f64,
    pub cw: CwParams,
}

impl AttackConfig {
    /// Per-kind defaults on the MNIST [0,1]^784 scale.
    pub fn new(kind: AttackKind) -> Self {
        let (epsilon, iterations) = match kind {
            AttackKind::Fgsm => (0.25, 1),
            AttackKind::BimLinf => (0.15, 10),
            AttackKind::BimL2 => (3.0, 10),
            AttackKind::BimL1 => (14.0, 10),
            AttackKind::Mi => (0.2, 10),
            AttackKind::Nf => (0.0, 60),
            AttackKind::Cw2 => (0.0, 1000),
            AttackKind::Pw => (1.0, 10),
        };
        Self {
            kind,
            epsilon,
            iterations,
            count: 120,
            seed: 0,
            delta: None,
            target: AttackTarget::Untargeted,
            random_start_radius: 0.01,
            step_size: None,
            mi_decay: 1.0,
            nf_eta: 0.01,
            cw: CwParams::default(),
        }
    }

    pub fn with_target(mut self, t: u8) -> Self {
        self.target = AttackTarget::Class(t);
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.count < 1 {
            return Err(Error::InvalidConfig("attack count must be >= 1".into()));
        }
        if let Some(d) = self.delta {
            if !(d >= 0.0) {
                return Err(Error::InvalidConfig("delta must be >= 0".into()));
            }
        }
        Ok(())
    }

    /// Step-size grid factor for a trial.
    pub(crate) fn grid_factor(trial: usize) -> f64 {
        const FACTORS: [f64; 6] = [1.0, 0.75, 1.25, 0.5, 1.5, 2.0];
        FACTORS[trial % FACTORS.len()]
    }

    pub(crate) fn effective_step(&self, epsilon: f64) -> f64 {
        self.step_size
            .unwrap_or_else(|| (2.5 * epsilon / self.iterations.max(1) as f64).min(epsilon))
    }
}

/// The set I_k(t): adversarial examples from attack `kind` that the target
/// model classifies as `class_t`.
#[derive(Debug, Clone)]
pub struct AdversarialSet {
    pub clean: ImageVec,
    pub clean_label: u8,
    pub target_model: String,
    pub kind: AttackKind,
    pub class_t: u8,
    pub examples: Vec<ImageVec>,
    /// Per-example L2 distance to the clean image, in `examples` order.
    pub l2: Vec<f64>,
    /// Effective L2 acceptance bound used to build the set.
    pub delta: f64,
    pub config: AttackConfig,
    /// Requested minimum count when the set came up short.
    pub shortfall_of: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct L2Stats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl AdversarialSet {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn l2_stats(&self) -> Option<L2Stats> {
        if self.l2.is_empty() {
            return None;
        }
        let min = self.l2.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = self.l2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mean = self.l2.iter().sum::<f64>() / self.l2.len() as f64;
        Some(L2Stats { min, max, mean })
    }

    /// Pixels perturbed in at least one example (the "d" count).
    pub fn perturbed_pixel_union(&self) -> usize {
        let dim = self.clean.dim();
        let mut touched = vec![false; dim];
        for ex in &self.examples {
            for (i, (&a, &b)) in ex.pixels.iter().zip(&self.clean.pixels).enumerate() {
                if (a - b).abs() > PIXEL_EPS {
                    touched[i] = true;
                }
            }
        }
        touched.iter().filter(|&&t| t).count()
    }

    /// Check the set membership invariants against the target model.
    pub fn validate(&self, target: &Model) -> Result<()> {
        for (i, ex) in self.examples.iter().enumerate() {
            if !ex.in_unit_box() {
                return Err(Error::InvalidConfig(format!("example {i} outside [0,1]^h")));
            }
            let pred = target.predict(ex);
            if pred != self.class_t {
                return Err(Error::InvalidConfig(format!(
                    "example {i} predicted {pred}, set is for class {}",
                    self.class_t
                )));
            }
            if self.class_t == self.clean_label {
                return Err(Error::InvalidConfig("set class equals the true class".into()));
            }
            if self.l2[i] > self.delta + 1e-9 {
                return Err(Error::InvalidConfig(format!(
                    "example {i} L2 {} exceeds delta {}",
                    self.l2[i], self.delta
                )));
            }
        }
        Ok(())
    }
}

/// Raw per-trial outputs before set assembly.
pub(crate) struct Candidates {
    pub pixels: Vec<Vec<f32>>,
}

/// Assemble per-class adversarial sets from raw candidates: keep in-box
/// misclassified results, drop bitwise duplicates, apply the delta filter,
/// and bucket by the label the target assigns.
pub(crate) fn bucket_candidates(
    model: &Model,
    clean: &ImageVec,
    clean_label: u8,
    cfg: &AttackConfig,
    target_model: &str,
    candidates: Candidates,
) -> Vec<AdversarialSet> {
    let mut by_class: Vec<Vec<(Vec<f32>, f64)>> = vec![Vec::new(); 10];
    let mut seen: HashSet<Vec<u32>> = HashSet::new();
    for pixels in candidates.pixels {
        debug_assert!(pixels.iter().all(|&p| (0.0..=1.0).contains(&p)));
        let bits: Vec<u32> = pixels.iter().map(|p| p.to_bits()).collect();
        if !seen.insert(bits) {
            continue;
        }
        let pred = model.predict_pixels(&pixels);
        if pred == clean_label {
            continue;
        }
        if let AttackTarget::Class(t) = cfg.target {
            if pred != t {
                continue;
            }
        }
        let d = l2_distance(&pixels, &clean.pixels);
        if d <= PIXEL_EPS as f64 {
            continue;
        }
        by_class[pred as usize].push((pixels, d));
    }

    let mut sets = Vec::new();
    for (t, bucket) in by_class.into_iter().enumerate() {
        if bucket.is_empty() {
            continue;
        }
        let max_l2 = bucket.iter().map(|(_, d)| *d).fold(0.0f64, f64::max);
        let delta = cfg.delta.unwrap_or_else(|| (1.2 * max_l2).min(28.0));
        let mut examples = Vec::new();
        let mut l2 = Vec::new();
        for (pixels, d) in bucket {
            if d <= delta {
                examples.push(ImageVec::new(pixels));
                l2.push(d);
            }
        }
        if examples.is_empty() {
            continue;
        }
        sets.push(AdversarialSet {
            clean: clean.clone(),
            clean_label,
            target_model: target_model.to_string(),
            kind: cfg.kind,
            class_t: t as u8,
            examples,
            l2,
            delta,
            config: *cfg,
            shortfall_of: None,
        });
    }
    sets
}

pub(crate) fn single_class_set(
    model: &Model,
    clean: &ImageVec,
    clean_label: u8,
    cfg: &AttackConfig,
    target_model: &str,
    candidates: Candidates,
) -> Result<AdversarialSet> {
    let wanted = match cfg.target {
        AttackTarget::Class(t) => t,
        AttackTarget::Untargeted => {
            // largest bucket wins; ties break toward the lowest class
            let sets = bucket_candidates(model, clean, clean_label, cfg, target_model, candidates);
            return sets
                .into_iter()
                .max_by_key(|s| s.len())
                .ok_or_else(|| Error::EmptySet(format!("{} untargeted", cfg.kind.label())));
        }
    };
    let sets = bucket_candidates(model, clean, clean_label, cfg, target_model, candidates);
    sets.into_iter()
        .find(|s| s.class_t == wanted)
        .ok_or_else(|| Error::EmptySet(format!("{} -> {}", cfg.kind.label(), wanted)))
}

/// Run one attack kind with an explicit target. Dispatch helper used by
/// [`generate_set`] and the pipeline.
pub fn run_attack(model: &Model, clean: &ImageVec, cfg: &AttackConfig) -> Result<AdversarialSet> {
    cfg.validate()?;
    match cfg.kind {
        AttackKind::Fgsm => fgsm(model, clean, cfg),
        AttackKind::BimL1 => bim(model, clean, cfg, BimNorm::L1),
        AttackKind::BimL2 => bim(model, clean, cfg, BimNorm::L2),
        AttackKind::BimLinf => bim(model, clean, cfg, BimNorm::Linf),
        AttackKind::Mi => mi(model, clean, cfg),
        AttackKind::Nf => newtonfool(model, clean, cfg),
        AttackKind::Pw => pointwise(model, clean, cfg),
        AttackKind::Cw2 => cw2(model, clean, cfg),
    }
}

/// Build I_k(t) by merging a targeted run toward `t` with an untargeted run,
/// keeping only examples the target model classifies as `t`, deduplicating,
/// and enforcing the delta bound. A shortfall below `min_count` is recorded,
/// not fatal.
pub fn generate_set(
    model: &Model,
    clean: &ImageVec,
    kind: AttackKind,
    t: u8,
    delta: Option<f64>,
    min_count: usize,
    base: &AttackConfig,
    target_model: &str,
) -> Result<AdversarialSet> {
    let untargeted_cfg = AttackConfig {
        kind,
        delta,
        target: AttackTarget::Untargeted,
        seed: base.seed ^ 0x9e37_79b9,
        ..*base
    };
    let untargeted_pixels: Vec<Vec<f32>> = run_attack_all_classes(model, clean, &untargeted_cfg)
        .unwrap_or_default()
        .into_iter()
        .filter(|s| s.class_t == t)
        .flat_map(|s| s.examples.into_iter().map(|im| im.pixels))
        .collect();
    generate_set_merged(
        model,
        clean,
        kind,
        t,
        delta,
        min_count,
        base,
        target_model,
        untargeted_pixels,
    )
}

/// [`generate_set`] with a precomputed untargeted candidate pool, so one
/// untargeted run can serve every target class.
#[allow(clippy::too_many_arguments)]
pub fn generate_set_merged(
    model: &Model,
    clean: &ImageVec,
    kind: AttackKind,
    t: u8,
    delta: Option<f64>,
    min_count: usize,
    base: &AttackConfig,
    target_model: &str,
    untargeted_pixels: Vec<Vec<f32>>,
) -> Result<AdversarialSet> {
    let clean_label = expect_correct(model, clean)?;
    if t == clean_label {
        return Err(Error::InvalidConfig(format!(
            "target class {t} equals the true class"
        )));
    }
    let targeted_cfg = AttackConfig {
        kind,
        delta,
        target: AttackTarget::Class(t),
        ..*base
    };
    let mut merged = Candidates { pixels: Vec::new() };
    if let Ok(set) = run_attack(model, clean, &targeted_cfg) {
        merged
            .pixels
            .extend(set.examples.into_iter().map(|im| im.pixels));
    }
    merged.pixels.extend(untargeted_pixels);
    // a shortfall (including a fully empty set) is flagged, not fatal
    let mut set = match single_class_set(model, clean, clean_label, &targeted_cfg, target_model, merged)
    {
        Ok(s) => s,
        Err(Error::EmptySet(_)) => AdversarialSet {
            clean: clean.clone(),
            clean_label,
            target_model: target_model.to_string(),
            kind,
            class_t: t,
            examples: Vec::new(),
            l2: Vec::new(),
            delta: delta.unwrap_or(0.0),
            config: targeted_cfg,
            shortfall_of: None,
        },
        Err(e) => return Err(e),
    };
    if set.len() < min_count {
        set.shortfall_of = Some(min_count);
    }
    Ok(set)
}

/// Run one untargeted attack and report every nonempty I_k(t) bucket.
pub fn run_attack_all_classes(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
) -> Result<Vec<AdversarialSet>> {
    cfg.validate()?;
    let clean_label = expect_correct(model, clean)?;
    let candidates = match cfg.kind {
        AttackKind::Fgsm => iterative::fgsm_candidates(model, clean, cfg)?,
        AttackKind::BimL1 => iterative::bim_candidates(model, clean, cfg, BimNorm::L1)?,
        AttackKind::BimL2 => iterative::bim_candidates(model, clean, cfg, BimNorm::L2)?,
        AttackKind::BimLinf => iterative::bim_candidates(model, clean, cfg, BimNorm::Linf)?,
        AttackKind::Mi => iterative::mi_candidates(model, clean, cfg)?,
        AttackKind::Nf => newtonfool::nf_candidates(model, clean, cfg)?.0,
        AttackKind::Pw => pointwise::pw_candidates(model, clean, cfg)?,
        AttackKind::Cw2 => cw2::cw2_candidates(model, clean, cfg)?,
    };
    Ok(bucket_candidates(model, clean, clean_label, cfg, "", candidates))
}

/// Attacks require a correctly classified starting image.
pub(crate) fn expect_correct(model: &Model, clean: &ImageVec) -> Result<u8> {
    let label = clean
        .label
        .ok_or_else(|| Error::InvalidConfig("clean image has no label".into()))?;
    let pred = model.predict(clean);
    if pred != label {
        return Err(Error::InvalidConfig(format!(
            "clean image already misclassified ({pred} != {label})"
        )));
    }
    Ok(label)
}

// ---- shared gradient helpers (trial rows evolve independently) ----

/// Per-row gradient of the cross-entropy toward `labels` (ascending this
/// reduces the labelled class's probability).
pub(crate) fn ce_grad_rows(net: &Network<f32>, x: &Tensor<f32>, labels: &[u8]) -> Tensor<f32> {
    net.input_gradient_batch(x, labels).expect("attack batch shapes are constructed")
}

/// Row-wise softmax probabilities plus hard labels.
pub(crate) fn probs_and_preds(net: &Network<f32>, x: &Tensor<f32>) -> (Tensor<f32>, Vec<u8>) {
    let logits = net.forward_logits(x).expect("attack batch shapes are constructed");
    let preds = crate::nn::argmax_rows(&logits);
    let mut probs = logits;
    softmax_rows(&mut probs);
    (probs, preds)
}

/// Gradient of the softmax probability of `class_for_row` wrt the input,
/// per row: d p_c / dz_j = p_c (delta_cj - p_j), then backprop.
pub(crate) fn prob_grad_rows(
    net: &Network<f32>,
    x: &Tensor<f32>,
    class_for_row: &[u8],
) -> (Vec<f64>, Tensor<f32>) {
    let cache = net.forward_cached(x).expect("attack batch shapes are constructed");
    let classes = net.n_classes();
    let mut probs = cache.logits().clone();
    softmax_rows(&mut probs);
    let mut p_c = Vec::with_capacity(class_for_row.len());
    let mut dlogits = probs.clone();
    for ((drow, prow), &c) in dlogits
        .data_mut()
        .chunks_mut(classes)
        .zip(probs.data().chunks(classes))
        .zip(class_for_row)
    {
        let pc = prow[c as usize];
        p_c.push(pc as f64);
        for (j, d) in drow.iter_mut().enumerate() {
            let indicator = if j == c as usize { 1.0 } else { 0.0 };
            *d = pc * (indicator - prow[j]);
        }
    }
    let (_, dx) = net.backward(&cache, &dlogits);
    (p_c, dx)
}

/// Build the trial-start batch: trial 0 starts at the clean image, later
/// trials jitter inside a small L-inf box.
pub(crate) fn trial_starts(clean: &ImageVec, cfg: &AttackConfig, trials: usize) -> Tensor<f32> {
    let dim = clean.dim();
    let mut data = Vec::with_capacity(trials * dim);
    for trial in 0..trials {
        if trial == 0 || cfg.random_start_radius == 0.0 {
            data.extend_from_slice(&clean.pixels);
        } else {
            let mut rng = SplitMix64::derive(cfg.seed, &[kind_tag(cfg.kind), trial as u64]);
            for &p in &clean.pixels {
                let jitter = rng.uniform(-cfg.random_start_radius, cfg.random_start_radius);
                data.push((p as f64 + jitter).clamp(0.0, 1.0) as f32);
            }
        }
    }
    Tensor::from_vec(&[trials, dim], data).expect("sized above")
}

pub(crate) fn kind_tag(kind: AttackKind) -> u64 {
    match kind {
        AttackKind::Pw => 1,
        AttackKind::Cw2 => 2,
        AttackKind::Nf => 3,
        AttackKind::Fgsm => 4,
        AttackKind::BimL1 => 5,
        AttackKind::BimL2 => 6,
        AttackKind::BimLinf => 7,
        AttackKind::Mi => 8,
    }
}

// ---- norms and ball projections on the perturbation ----

pub(crate) fn l1_norm(v: &[f32]) -> f64 {
    v.iter().map(|x| x.abs() as f64).sum()
}

pub(crate) fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt()
}

/// Project delta onto the L2 ball of radius eps.
pub(crate) fn project_l2(delta: &mut [f32], eps: f64) {
    let n = l2_norm(delta);
    if n > eps && n > 0.0 {
        let scale = (eps / n) as f32;
        for d in delta {
            *d *= scale;
        }
    }
}

/// Project delta onto the L1 ball of radius eps (simplex projection on the
/// absolute values, Duchi et al. 2008).
pub(crate) fn project_l1(delta: &mut [f32], eps: f64) {
    let total = l1_norm(delta);
    if total <= eps {
        return;
    }
    let mut mags: Vec<f64> = delta.iter().map(|d| d.abs() as f64).collect();
    mags.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    for (k, &m) in mags.iter().enumerate() {
        cumsum += m;
        let candidate = (cumsum - eps) / (k + 1) as f64;
        if m > candidate {
            theta = candidate;
        } else {
            break;
        }
    }
    for d in delta.iter_mut() {
        let mag = (d.abs() as f64 - theta).max(0.0);
        *d = d.signum() * mag as f32;
    }
}

/// Clamp delta into [-eps, eps] per pixel.
pub(crate) fn project_linf(delta: &mut [f32], eps: f64) {
    let e = eps as f32;
    for d in delta {
        *d = d.clamp(-e, e);
    }
}

/// Per-attack wrappers live in the submodules; files are serialized here.
///
/// Layout: u32-LE header length, JSON header, then `count * dim` f32-LE
/// pixels (examples in order).
#[derive(Debug, Serialize, Deserialize)]
struct SetHeader {
    version: u32,
    kind: AttackKind,
    class_t: u8,
    clean_label: u8,
    clean_source: Option<crate::data::SourceId>,
    target_model: String,
    dim: usize,
    count: usize,
    l2: Vec<f64>,
    delta: f64,
    config: AttackConfig,
    shortfall_of: Option<usize>,
}

pub fn save_set(set: &AdversarialSet, path: &Path) -> Result<()> {
    let header = SetHeader {
        version: 1,
        kind: set.kind,
        class_t: set.class_t,
        clean_label: set.clean_label,
        clean_source: set.clean.source,
        target_model: set.target_model.clone(),
        dim: set.clean.dim(),
        count: set.len(),
        l2: set.l2.clone(),
        delta: set.delta,
        config: set.config,
        shortfall_of: set.shortfall_of,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(4 + header_bytes.len() + (set.len() + 1) * set.clean.dim() * 4);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for &p in &set.clean.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    for ex in &set.examples {
        for &p in &ex.pixels {
            out.extend_from_slice(&p.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn load_set(path: &Path) -> Result<AdversarialSet> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < 4 {
        return Err(Error::Truncated { path: path.into(), needed: 4, got: bytes.len() });
    }
    let hlen = u32::from_le_bytes(bytes[0..4].try_into().unwrap()) as usize;
    if bytes.len() < 4 + hlen {
        return Err(Error::Truncated { path: path.into(), needed: 4 + hlen, got: bytes.len() });
    }
    let header: SetHeader = serde_json::from_slice(&bytes[4..4 + hlen])?;
    let need = 4 + hlen + (header.count + 1) * header.dim * 4;
    if bytes.len() < need {
        return Err(Error::Truncated { path: path.into(), needed: need, got: bytes.len() });
    }
    let mut offset = 4 + hlen;
    let read_row = |offset: &mut usize| -> Vec<f32> {
        let row: Vec<f32> = bytes[*offset..*offset + header.dim * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        *offset += header.dim * 4;
        row
    };
    let mut clean = ImageVec::with_label(read_row(&mut offset), header.clean_label);
    clean.source = header.clean_source;
    let examples: Vec<ImageVec> = (0..header.count)
        .map(|_| ImageVec::new(read_row(&mut offset)))
        .collect();
    Ok(AdversarialSet {
        clean,
        clean_label: header.clean_label,
        target_model: header.target_model,
        kind: header.kind,
        class_t: header.class_t,
        examples,
        l2: header.l2,
        delta: header.delta,
        config: header.config,
        shortfall_of: header.shortfall_of,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn l1_projection_matches_duchi_properties() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..50 {
            let mut v: Vec<f32> = (0..20).map(|_| (rng.normal() * 2.0) as f32).collect();
            let orig = v.clone();
            let eps = 3.0;
            project_l1(&mut v, eps);
            let after = l1_norm(&v);
            assert!(after <= eps + 1e-4, "norm {after}");
            // signs never flip and magnitudes never grow
            for (a, b) in v.iter().zip(&orig) {
                assert!(a.abs() <= b.abs() + 1e-6);
                assert!(*a == 0.0 || a.signum() == b.signum());
            }
        }
        // already inside the ball: untouched
        let mut v = vec![0.5f32, -0.25, 0.1];
        let orig = v.clone();
        project_l1(&mut v, 2.0);
        assert_eq!(v, orig);
    }

    #[test]
    fn l2_projection_caps_norm() {
        let mut v = vec![3.0f32, 4.0];
        project_l2(&mut v, 1.0);
        assert!((l2_norm(&v) - 1.0).abs() < 1e-6);
        assert!((v[0] - 0.6).abs() < 1e-6 && (v[1] - 0.8).abs() < 1e-6);
    }

    #[test]
    fn set_round_trips_bit_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.advs");
        let clean = ImageVec::with_label(vec![0.25f32; 16], 1);
        let examples = vec![
            ImageVec::new(vec![0.5f32; 16]),
            ImageVec::new(vec![0.75f32; 16]),
        ];
        let l2: Vec<f64> = examples.iter().map(|e| e.l2_to(&clean)).collect();
        let set = AdversarialSet {
            clean: clean.clone(),
            clean_label: 1,
            target_model: "m1".into(),
            kind: AttackKind::Fgsm,
            class_t: 2,
            examples,
            l2,
            delta: 6.0,
            config: AttackConfig::new(AttackKind::Fgsm),
            shortfall_of: Some(80),
        };
        save_set(&set, &path).unwrap();
        let loaded = load_set(&path).unwrap();
        assert_eq!(loaded.clean.pixels, clean.pixels);
        assert_eq!(loaded.class_t, 2);
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.l2, set.l2);
        assert_eq!(loaded.shortfall_of, Some(80));
        for (a, b) in loaded.examples.iter().zip(&set.examples) {
            assert_eq!(a.pixels, b.pixels);
        }
    }
}
