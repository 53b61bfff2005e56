//! Pointwise attack: decision-based L0 minimization.
//!
//! Each trial finds a misclassified salt-and-pepper corruption of the clean
//! image, then greedily restores pixels to their clean values while the
//! result stays misclassified, repeating passes until no single remaining
//! pixel can be restored. The fixpoint makes every emitted example locally
//! L0-minimal: restoring any one of its perturbed pixels returns the
//! prediction to the true class.

use rayon::prelude::*;

use super::{expect_correct, single_class_set, AdversarialSet, AttackConfig, Candidates};
use crate::data::{ImageVec, PIXEL_EPS};
use crate::error::Result;
use crate::nn::{batch_from_pixels, Model};
use crate::rng::SplitMix64;

const SALT_FRACTIONS: usize = 12;
const SALT_REPEATS: usize = 6;
const RESTORE_CHUNK: usize = 32;

fn salt_pepper_start(
    model: &Model,
    clean: &ImageVec,
    clean_label: u8,
    ceiling: f64,
    rng: &mut SplitMix64,
) -> Option<Vec<f32>> {
    let dim = clean.dim();
    let max_q = ceiling.clamp(0.05, 1.0);
    let mut rows: Vec<Vec<f32>> = Vec::with_capacity(SALT_FRACTIONS * SALT_REPEATS);
    for fi in 0..SALT_FRACTIONS {
        let q = 0.02 + (max_q - 0.02) * (fi as f64 / (SALT_FRACTIONS - 1) as f64);
        for _ in 0..SALT_REPEATS {
            let mut noisy = clean.pixels.clone();
            for v in noisy.iter_mut() {
                if rng.next_f64() < q {
                    *v = if rng.next_f64() < 0.5 { 0.0 } else { 1.0 };
                }
            }
            rows.push(noisy);
        }
    }
    let x = batch_from_pixels(rows.iter().map(|r| r.as_slice()), dim).ok()?;
    let preds = model.net.predict_batch(&x).ok()?;
    preds
        .iter()
        .position(|&p| p != clean_label)
        .map(|i| rows.swap_remove(i))
}

/// Greedy restoration to a local L0 minimum; `None` if the pass budget runs
/// out before reaching the fixpoint.
fn minimize_l0(
    model: &Model,
    clean: &ImageVec,
    clean_label: u8,
    mut x: Vec<f32>,
    rng: &mut SplitMix64,
) -> Option<Vec<f32>> {
    let dim = clean.dim();
    for _pass in 0..200 {
        let mut perturbed: Vec<usize> = (0..dim)
            .filter(|&i| (x[i] - clean.pixels[i]).abs() > PIXEL_EPS)
            .collect();
        if perturbed.is_empty() {
            return None;
        }
        rng.shuffle(&mut perturbed);
        let mut restored_any = false;
        let mut cursor = 0;
        while cursor < perturbed.len() {
            let chunk: Vec<usize> = perturbed[cursor..(cursor + RESTORE_CHUNK).min(perturbed.len())]
                .to_vec();
            let rows: Vec<Vec<f32>> = chunk
                .iter()
                .map(|&i| {
                    let mut c = x.clone();
                    c[i] = clean.pixels[i];
                    c
                })
                .collect();
            let batch = batch_from_pixels(rows.iter().map(|r| r.as_slice()), dim).ok()?;
            let preds = model.net.predict_batch(&batch).ok()?;
            match preds.iter().position(|&p| p != clean_label) {
                Some(hit) => {
                    x = rows[hit].clone();
                    restored_any = true;
                    // evaluations after the applied restoration are stale
                    cursor += hit + 1;
                }
                None => cursor += chunk.len(),
            }
        }
        if !restored_any {
            return Some(x);
        }
    }
    None
}

pub(crate) fn pw_candidates(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
) -> Result<Candidates> {
    let clean_label = expect_correct(model, clean)?;
    let trials: Vec<usize> = (0..cfg.count).collect();
    let pixels: Vec<Vec<f32>> = trials
        .par_iter()
        .filter_map(|&trial| {
            let mut rng = SplitMix64::derive(cfg.seed, &[super::kind_tag(cfg.kind), trial as u64]);
            let start = salt_pepper_start(model, clean, clean_label, cfg.epsilon, &mut rng)?;
            minimize_l0(model, clean, clean_label, start, &mut rng)
        })
        .collect();
    Ok(Candidates { pixels })
}

/// Decision-based pointwise attack, minimizing the number of changed pixels.
pub fn pointwise(model: &Model, clean: &ImageVec, cfg: &AttackConfig) -> Result<AdversarialSet> {
    let label = expect_correct(model, clean)?;
    let candidates = pw_candidates(model, clean, cfg)?;
    single_class_set(model, clean, label, cfg, "", candidates)
}
