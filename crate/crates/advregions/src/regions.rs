//! Hyper-rectangles spanned by adversarial sets.
//!
//! For every pixel an attack perturbed, the interval between the smallest and
//! largest value that pixel takes across the set defines one side of a
//! candidate box. Ranking intervals by size and keeping the `b` largest gives
//! a low-dimensional hyper-rectangle containing (infinitely many) candidate
//! adversarial images; sampling it and scoring every ensemble member sorts
//! each rectangle into one of three region types.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{AdversarialSet, AttackKind, L2Stats};
use crate::data::{l2_distance, ImageVec, PIXEL_EPS};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::nn::batch_from_pixels;
use crate::rng::SplitMix64;

/// One ranked side of a hyper-rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PixelInterval {
    pub index: usize,
    pub lo: f32,
    pub hi: f32,
}

impl PixelInterval {
    pub fn size(&self) -> f64 {
        (self.hi - self.lo) as f64
    }
}

/// What non-selected perturbed pixels are fixed to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseMode {
    /// Per-pixel median of the adversarial set (keeps the box on the attack
    /// manifold).
    Median,
    /// The clean image's value.
    Clean,
}

impl Default for BaseMode {
    fn default() -> Self {
        BaseMode::Median
    }
}

/// R_k(t): the `b` largest intervals plus fixed values for every other pixel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HyperRectangle {
    /// Selected intervals in rank order (sizes non-increasing).
    pub intervals: Vec<PixelInterval>,
    /// Fixed values for all non-selected pixels (full image length; selected
    /// entries are ignored by the sampler).
    pub base: Vec<f32>,
    pub kind: AttackKind,
    pub class_t: u8,
    pub clean_label: u8,
    pub target_model: String,
    pub base_mode: BaseMode,
    /// Smallest selected interval size s_(b).
    pub smallest_size: f64,
}

impl HyperRectangle {
    pub fn b(&self) -> usize {
        self.intervals.len()
    }

    pub fn dim(&self) -> usize {
        self.base.len()
    }

    /// Row label in the table convention, e.g. `CW2 280d 1->2`.
    pub fn label(&self) -> String {
        format!("{} {}d {}->{}", self.kind.label(), self.b(), self.clean_label, self.class_t)
    }

    pub fn contains(&self, image: &ImageVec) -> bool {
        if image.dim() != self.dim() {
            return false;
        }
        let mut selected = vec![None; self.dim()];
        for iv in &self.intervals {
            selected[iv.index] = Some(*iv);
        }
        image.pixels.iter().enumerate().all(|(i, &p)| match selected[i] {
            Some(iv) => p >= iv.lo - PIXEL_EPS && p <= iv.hi + PIXEL_EPS,
            None => (p - self.base[i]).abs() <= PIXEL_EPS,
        })
    }
}

/// Per-pixel [min, max] intervals over the adversarial set, one per perturbed
/// pixel, ranked by size descending with ties toward the lower pixel index.
/// Pointwise sets span the full [0,1] on every perturbed pixel.
pub fn compute_intervals(set: &AdversarialSet) -> Result<Vec<PixelInterval>> {
    if set.is_empty() {
        return Err(Error::EmptySet("interval construction".into()));
    }
    let clean = &set.clean;
    let dim = clean.dim();
    let mut intervals = Vec::new();
    for i in 0..dim {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        let mut perturbed = false;
        for ex in &set.examples {
            let v = ex.pixels[i];
            lo = lo.min(v);
            hi = hi.max(v);
            if (v - clean.pixels[i]).abs() > PIXEL_EPS {
                perturbed = true;
            }
        }
        if !perturbed {
            continue;
        }
        if set.kind == AttackKind::Pw {
            // measured sizes are all close to 1; use the full pixel range
            intervals.push(PixelInterval { index: i, lo: 0.0, hi: 1.0 });
        } else {
            intervals.push(PixelInterval { index: i, lo, hi });
        }
    }
    intervals.sort_by(|a, b| {
        b.size()
            .partial_cmp(&a.size())
            .unwrap()
            .then(a.index.cmp(&b.index))
    });
    Ok(intervals)
}

/// Largest `b` with s_(b) >= tau; 1 if no interval qualifies.
pub fn choose_b(intervals: &[PixelInterval], tau: f64) -> Result<usize> {
    if intervals.is_empty() {
        return Err(Error::EmptySet("choose_b over no intervals".into()));
    }
    let b = intervals.iter().take_while(|iv| iv.size() >= tau).count();
    Ok(b.max(1))
}

/// Span R_k(t) from the top-`b` ranked intervals. Non-selected pixels are
/// fixed at `base_mode` values.
pub fn build_rectangle(
    set: &AdversarialSet,
    intervals: &[PixelInterval],
    b: usize,
    base_mode: BaseMode,
) -> Result<HyperRectangle> {
    let m = intervals.len();
    if b < 1 || b > m {
        return Err(Error::RankOutOfRange { b, m });
    }
    let selected = &intervals[..b];
    let mut base = set.clean.pixels.clone();
    if base_mode == BaseMode::Median {
        let mut chosen = vec![false; base.len()];
        for iv in selected {
            chosen[iv.index] = true;
        }
        // median over the set for perturbed-but-not-selected pixels
        for iv in &intervals[b..] {
            if chosen[iv.index] {
                continue;
            }
            let mut vals: Vec<f32> = set.examples.iter().map(|ex| ex.pixels[iv.index]).collect();
            vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let mid = vals.len() / 2;
            base[iv.index] = if vals.len() % 2 == 1 {
                vals[mid]
            } else {
                (vals[mid - 1] + vals[mid]) / 2.0
            };
        }
    }
    Ok(HyperRectangle {
        intervals: selected.to_vec(),
        base,
        kind: set.kind,
        class_t: set.class_t,
        clean_label: set.clean_label,
        target_model: set.target_model.clone(),
        base_mode,
        smallest_size: selected.last().unwrap().size(),
    })
}

/// Draw `n` images: selected coordinates independently uniform in [lo, hi],
/// everything else fixed at the base values.
pub fn sample(rect: &HyperRectangle, n: usize, seed: u64) -> Vec<ImageVec> {
    let mut rng = SplitMix64::derive(seed, &[0xb0c5]);
    (0..n)
        .map(|_| {
            let mut pixels = rect.base.clone();
            for iv in &rect.intervals {
                pixels[iv.index] = rng.uniform(iv.lo as f64, iv.hi as f64) as f32;
            }
            ImageVec::new(pixels)
        })
        .collect()
}

/// Region taxonomy from per-member misclassification rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegionType {
    /// Target misclassifies, some other member is clean.
    Type1,
    /// Target is clean, some other member misclassifies.
    Type2,
    /// Every member misclassifies: a transferable adversarial region.
    Type3,
    Unclassified,
}

impl RegionType {
    pub fn label(&self) -> &'static str {
        match self {
            RegionType::Type1 => "TYPE1",
            RegionType::Type2 => "TYPE2",
            RegionType::Type3 => "TYPE3",
            RegionType::Unclassified => "UNCLASSIFIED",
        }
    }
}

/// Classify per-member misclassification rates; `rates[0]` belongs to the
/// attack target model.
pub fn classify_region(rates: &[f64], theta_high: f64, theta_low: f64) -> RegionType {
    let target = rates[0];
    let others = &rates[1..];
    if rates.iter().all(|&r| r >= theta_high) {
        return RegionType::Type3;
    }
    if target >= theta_high && others.iter().any(|&r| r <= theta_low) {
        return RegionType::Type1;
    }
    if target <= theta_low && others.iter().any(|&r| r >= theta_high) {
        return RegionType::Type2;
    }
    RegionType::Unclassified
}

/// Evaluation record for one hyper-rectangle (one table row).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RegionReport {
    pub label: String,
    pub kind: AttackKind,
    pub clean_label: u8,
    pub class_t: u8,
    pub b: usize,
    pub smallest_size: f64,
    /// Per-member fraction of samples classified != clean label.
    pub rates: Vec<f64>,
    pub sample_l2_min: f64,
    pub sample_l2_max: f64,
    pub sample_l2_mean: f64,
    pub attack_l2_min: Option<f64>,
    pub attack_l2_max: Option<f64>,
    pub attack_l2_mean: Option<f64>,
    pub region_type: RegionType,
    pub theta_high: f64,
    pub theta_low: f64,
    pub n_samples: usize,
    pub sample_seed: u64,
    /// The attack set's L2 acceptance bound.
    pub delta: f64,
    /// How many samples stayed inside the delta ball around the clean image.
    pub samples_within_delta: usize,
}

/// Score every ensemble member over `n` fresh samples of the rectangle.
pub fn evaluate(
    rect: &HyperRectangle,
    ens: &Ensemble,
    n: usize,
    seed: u64,
    clean: &ImageVec,
    attack_l2: Option<L2Stats>,
    delta: f64,
    theta_high: f64,
    theta_low: f64,
) -> Result<RegionReport> {
    if n == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let samples = sample(rect, n, seed);
    let clean_label = rect.clean_label;
    let dim = rect.dim();
    let batch = batch_from_pixels(samples.iter().map(|s| s.pixels.as_slice()), dim)?;
    let rates: Vec<f64> = ens
        .models()
        .par_iter()
        .map(|m| {
            let preds = m.net.predict_batch(&batch).expect("shape checked");
            preds.iter().filter(|&&p| p != clean_label).count() as f64 / n as f64
        })
        .collect();
    let l2: Vec<f64> = samples.iter().map(|s| l2_distance(&s.pixels, &clean.pixels)).collect();
    let l2_min = l2.iter().cloned().fold(f64::INFINITY, f64::min);
    let l2_max = l2.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let l2_mean = l2.iter().sum::<f64>() / n as f64;
    let within = l2.iter().filter(|&&d| d <= delta + 1e-9).count();
    let region_type = classify_region(&rates, theta_high, theta_low);
    Ok(RegionReport {
        label: rect.label(),
        kind: rect.kind,
        clean_label,
        class_t: rect.class_t,
        b: rect.b(),
        smallest_size: rect.smallest_size,
        rates,
        sample_l2_min: l2_min,
        sample_l2_max: l2_max,
        sample_l2_mean: l2_mean,
        attack_l2_min: attack_l2.map(|s| s.min),
        attack_l2_max: attack_l2.map(|s| s.max),
        attack_l2_mean: attack_l2.map(|s| s.mean),
        region_type,
        theta_high,
        theta_low,
        n_samples: n,
        sample_seed: seed,
        delta,
        samples_within_delta: within,
    })
}

/// Volume of the L2 ball of radius `delta` in `h` dimensions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallVolume {
    /// Natural log of the volume; always finite for valid inputs.
    pub log_volume: f64,
    /// Direct value; `None` when it overflows f64.
    pub volume: Option<f64>,
}

/// `pi^(h/2) / Gamma(1 + h/2) * delta^h`, evaluated in log space for
/// stability. The direct value uses the dimension recurrence
/// `V_h = V_{h-2} * 2*pi*delta^2 / h` to stay exact in low dimensions.
pub fn ball_volume(h: usize, delta: f64) -> Result<BallVolume> {
    if h < 1 {
        return Err(Error::InvalidConfig("ball dimension must be >= 1".into()));
    }
    if !(delta > 0.0) {
        return Err(Error::InvalidConfig("ball radius must be > 0".into()));
    }
    let hf = h as f64;
    let log_volume = 0.5 * hf * std::f64::consts::PI.ln() + hf * delta.ln() - ln_gamma_half(h + 2);

    // direct recurrence: V_1 = 2 delta, V_2 = pi delta^2
    let mut v = if h % 2 == 1 { 2.0 * delta } else { std::f64::consts::PI * delta * delta };
    let mut k = if h % 2 == 1 { 1 } else { 2 };
    while k < h && v.is_finite() && v > 0.0 {
        k += 2;
        v *= 2.0 * std::f64::consts::PI * delta * delta / k as f64;
    }
    let volume = if v.is_finite() { Some(v) } else { None };
    Ok(BallVolume { log_volume, volume })
}

/// ln Gamma(n/2) for integer n >= 1, by recurrence from Gamma(1/2) = sqrt(pi)
/// and Gamma(1) = 1.
fn ln_gamma_half(n: usize) -> f64 {
    let mut acc = if n % 2 == 1 { 0.5 * std::f64::consts::PI.ln() } else { 0.0 };
    let mut k = if n % 2 == 1 { 1 } else { 2 };
    // Gamma(x+1) = x Gamma(x): multiply x = k/2 while climbing to n/2
    while k < n {
        acc += (k as f64 / 2.0).ln();
        k += 2;
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attacks::AttackConfig;

    fn set_from_rows(clean: Vec<f32>, rows: Vec<Vec<f32>>, kind: AttackKind) -> AdversarialSet {
        let clean_img = ImageVec::with_label(clean, 1);
        let l2: Vec<f64> = rows.iter().map(|r| l2_distance(r, &clean_img.pixels)).collect();
        AdversarialSet {
            clean: clean_img,
            clean_label: 1,
            target_model: "m1".into(),
            kind,
            class_t: 2,
            examples: rows.into_iter().map(ImageVec::new).collect(),
            l2,
            delta: 28.0,
            config: AttackConfig::new(kind),
            shortfall_of: None,
        }
    }

    #[test]
    fn interval_from_min_max() {
        // pixel 0: values {0.2, 0.5, 0.4} around clean 0.3 -> [0.2, 0.5]
        // pixel 1: always equals clean -> excluded
        let set = set_from_rows(
            vec![0.3, 0.7],
            vec![vec![0.2, 0.7], vec![0.5, 0.7], vec![0.4, 0.7]],
            AttackKind::Cw2,
        );
        let intervals = compute_intervals(&set).unwrap();
        assert_eq!(intervals.len(), 1);
        assert_eq!(intervals[0].index, 0);
        assert!((intervals[0].lo - 0.2).abs() < 1e-7);
        assert!((intervals[0].hi - 0.5).abs() < 1e-7);
        assert!((intervals[0].size() - 0.3).abs() < 1e-6);
    }

    #[test]
    fn pw_intervals_span_unit_range() {
        let set = set_from_rows(
            vec![0.3, 0.7],
            vec![vec![1.0, 0.7], vec![0.0, 0.7]],
            AttackKind::Pw,
        );
        let intervals = compute_intervals(&set).unwrap();
        assert_eq!(intervals.len(), 1);
        assert_eq!((intervals[0].lo, intervals[0].hi), (0.0, 1.0));
    }

    #[test]
    fn ranking_is_sorted_with_index_ties() {
        let set = set_from_rows(
            vec![0.5, 0.5, 0.5],
            vec![vec![0.1, 0.6, 0.2], vec![0.9, 0.4, 0.6]],
            AttackKind::Cw2,
        );
        let intervals = compute_intervals(&set).unwrap();
        let sizes: Vec<f64> = intervals.iter().map(|iv| iv.size()).collect();
        assert!(sizes.windows(2).all(|w| w[0] >= w[1]));
        assert_eq!(intervals[0].index, 0); // size 0.8
        assert_eq!(intervals[1].index, 2); // size 0.4
        assert_eq!(intervals[2].index, 1); // size 0.2
    }

    #[test]
    fn choose_b_rule() {
        let ivs = vec![
            PixelInterval { index: 0, lo: 0.0, hi: 0.5 },
            PixelInterval { index: 1, lo: 0.0, hi: 0.4 },
            PixelInterval { index: 2, lo: 0.0, hi: 0.01 },
        ];
        assert_eq!(choose_b(&ivs, 0.05).unwrap(), 2);
        assert_eq!(choose_b(&ivs, 0.0).unwrap(), 3);
        // nothing qualifies -> b = 1
        assert_eq!(choose_b(&ivs, 0.9).unwrap(), 1);
        assert!(choose_b(&[], 0.1).is_err());
    }

    #[test]
    fn rectangle_selects_top_b_and_median_base() {
        let set = set_from_rows(
            vec![0.5, 0.5, 0.5],
            vec![
                vec![0.1, 0.6, 0.2],
                vec![0.9, 0.4, 0.6],
                vec![0.5, 0.5, 0.4],
            ],
            AttackKind::Cw2,
        );
        let intervals = compute_intervals(&set).unwrap();
        let rect = build_rectangle(&set, &intervals, 1, BaseMode::Median).unwrap();
        assert_eq!(rect.b(), 1);
        assert_eq!(rect.intervals[0].index, 0);
        // pixel 2 is perturbed but unselected: median of {0.2, 0.6, 0.4} = 0.4
        assert!((rect.base[2] - 0.4).abs() < 1e-7);
        // pixel 1 unselected: median of {0.6, 0.4, 0.5} = 0.5
        assert!((rect.base[1] - 0.5).abs() < 1e-7);
        let rect_clean = build_rectangle(&set, &intervals, 1, BaseMode::Clean).unwrap();
        assert_eq!(rect_clean.base[2], 0.5);
        // b = m selects everything
        let all = build_rectangle(&set, &intervals, intervals.len(), BaseMode::Median).unwrap();
        assert_eq!(all.b(), 3);
        assert!(build_rectangle(&set, &intervals, 4, BaseMode::Median).is_err());
        assert!(build_rectangle(&set, &intervals, 0, BaseMode::Median).is_err());
    }

    #[test]
    fn samples_stay_inside_the_rectangle() {
        let set = set_from_rows(
            vec![0.5; 4],
            vec![vec![0.1, 0.5, 0.2, 0.5], vec![0.9, 0.5, 0.6, 0.5]],
            AttackKind::Cw2,
        );
        let intervals = compute_intervals(&set).unwrap();
        let rect = build_rectangle(&set, &intervals, 2, BaseMode::Median).unwrap();
        let samples = sample(&rect, 500, 11);
        for s in &samples {
            assert!(rect.contains(s));
            assert!(s.in_unit_box());
        }
        // zero-width intervals collapse to identical images
        let degenerate = set_from_rows(
            vec![0.5, 0.5],
            vec![vec![0.25, 0.5], vec![0.25, 0.5]],
            AttackKind::Cw2,
        );
        let ivs = compute_intervals(&degenerate).unwrap();
        let r = build_rectangle(&degenerate, &ivs, 1, BaseMode::Median).unwrap();
        let ss = sample(&r, 5, 3);
        for s in &ss {
            assert_eq!(s.pixels, ss[0].pixels);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let set = set_from_rows(
            vec![0.5; 3],
            vec![vec![0.1, 0.2, 0.5], vec![0.9, 0.8, 0.5]],
            AttackKind::Cw2,
        );
        let intervals = compute_intervals(&set).unwrap();
        let rect = build_rectangle(&set, &intervals, 2, BaseMode::Median).unwrap();
        let a = sample(&rect, 20, 7);
        let b = sample(&rect, 20, 7);
        let c = sample(&rect, 20, 8);
        assert_eq!(
            a.iter().map(|s| s.pixels.clone()).collect::<Vec<_>>(),
            b.iter().map(|s| s.pixels.clone()).collect::<Vec<_>>()
        );
        assert!(a.iter().zip(&c).any(|(x, y)| x.pixels != y.pixels));
    }

    #[test]
    fn classify_region_matches_reference_patterns() {
        let th = 0.8;
        let tl = 0.05;
        let t1 = [0.929, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(classify_region(&t1, th, tl), RegionType::Type1);
        let t2 = [0.0, 0.0, 0.0, 0.001, 0.004, 0.925, 1.0, 0.58, 0.991, 1.0];
        assert_eq!(classify_region(&t2, th, tl), RegionType::Type2);
        let t3 = [0.826, 0.81, 0.824, 0.812, 0.832, 0.811, 0.825, 0.813, 0.801, 0.828];
        assert_eq!(classify_region(&t3, th, tl), RegionType::Type3);
        let mixed = [0.5, 0.5, 0.5];
        assert_eq!(classify_region(&mixed, th, tl), RegionType::Unclassified);
    }

    #[test]
    fn classify_region_monotone_in_theta_high() {
        let rates = [0.85, 0.82, 0.9];
        for th in [0.5, 0.8, 0.85, 0.91] {
            let r = classify_region(&rates, th, 0.05);
            if r == RegionType::Unclassified {
                // raising theta_high further never resurrects TYPE3
                assert_ne!(classify_region(&rates, th + 0.05, 0.05), RegionType::Type3);
            }
        }
    }

    #[test]
    fn ball_volume_low_dimensions() {
        assert_eq!(ball_volume(1, 1.0).unwrap().volume, Some(2.0));
        assert_eq!(ball_volume(2, 1.0).unwrap().volume, Some(std::f64::consts::PI));
        assert_eq!(ball_volume(1, 0.5).unwrap().volume, Some(1.0));
        let v3 = ball_volume(3, 0.5).unwrap().volume.unwrap();
        let expected = 4.0 / 3.0 * std::f64::consts::PI * 0.125;
        assert!((v3 - expected).abs() < 1e-12, "{v3} vs {expected}");
        assert!(ball_volume(0, 1.0).is_err());
        assert!(ball_volume(3, 0.0).is_err());
    }

    #[test]
    fn ball_volume_log_matches_direct_and_decreases() {
        for h in 1..=30 {
            let bv = ball_volume(h, 0.5).unwrap();
            let direct = bv.volume.unwrap();
            assert!((bv.log_volume - direct.ln()).abs() < 1e-10, "h={h}");
        }
        // strictly decreasing in h at delta = 0.5, up to h = 784 in log space
        let mut prev = f64::INFINITY;
        for h in 1..=784 {
            let bv = ball_volume(h, 0.5).unwrap();
            assert!(bv.log_volume < prev, "h={h}");
            prev = bv.log_volume;
        }
    }

    #[test]
    fn ball_volume_overflow_is_signaled() {
        // huge radius in high dimension: direct value overflows, log persists
        let bv = ball_volume(400, 100.0).unwrap();
        assert!(bv.volume.is_none());
        assert!(bv.log_volume.is_finite());
    }
}
