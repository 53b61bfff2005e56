//! The gradient-sign family: FGSM, basic iterative attacks under three norm
//! budgets, and momentum iteration. All trials of one run evolve together as
//! a batch; rows are independent, so batching changes throughput only.

use super::{
    ce_grad_rows, expect_correct, l1_norm, project_l1, project_l2, project_linf, single_class_set,
    trial_starts, AdversarialSet, AttackConfig, AttackTarget, Candidates,
};
use crate::data::ImageVec;
use crate::error::Result;
use crate::nn::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BimNorm {
    L1,
    L2,
    Linf,
}

/// Direction sign and per-row loss label for the configured goal: ascend the
/// true-class cross-entropy when untargeted, descend the target-class
/// cross-entropy when targeted.
fn goal(cfg: &AttackConfig, clean_label: u8) -> (f32, u8) {
    match cfg.target {
        AttackTarget::Untargeted => (1.0, clean_label),
        AttackTarget::Class(t) => (-1.0, t),
    }
}

fn run_iterations(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
    norm: BimNorm,
    momentum_decay: Option<f64>,
    iterations: usize,
) -> Result<Candidates> {
    let clean_label = expect_correct(model, clean)?;
    if cfg.epsilon <= 0.0 {
        // a zero budget cannot move the image; nothing to emit
        return Ok(Candidates { pixels: Vec::new() });
    }
    let trials = cfg.count;
    let dim = clean.dim();
    let (dir, loss_label) = goal(cfg, clean_label);
    let labels = vec![loss_label; trials];

    let eps: Vec<f64> = (0..trials)
        .map(|j| cfg.epsilon * AttackConfig::grid_factor(j))
        .collect();
    let step: Vec<f64> = eps.iter().map(|&e| cfg.effective_step(e)).collect();

    let mut x = trial_starts(clean, cfg, trials);
    // starts must already satisfy the budget
    for (row, &e) in x.data_mut().chunks_mut(dim).zip(&eps) {
        project_onto(row, &clean.pixels, norm, e);
    }

    let mut momentum: Option<Vec<f32>> = momentum_decay.map(|_| vec![0.0f32; trials * dim]);

    for _ in 0..iterations {
        let grad = ce_grad_rows(&model.net, &x, &labels);
        for j in 0..trials {
            let row = &mut x.data_mut()[j * dim..(j + 1) * dim];
            let g = &grad.data()[j * dim..(j + 1) * dim];
            let alpha = step[j] as f32;
            match (norm, &mut momentum) {
                (BimNorm::Linf, Some(acc)) => {
                    let decay = momentum_decay.unwrap() as f32;
                    let gl1 = l1_norm(g).max(1e-12) as f32;
                    let acc_row = &mut acc[j * dim..(j + 1) * dim];
                    for (a, &gv) in acc_row.iter_mut().zip(g) {
                        *a = decay * *a + dir * gv / gl1;
                    }
                    for (v, a) in row.iter_mut().zip(acc_row.iter()) {
                        *v += alpha * a.signum();
                    }
                }
                (BimNorm::Linf, None) => {
                    for (v, &gv) in row.iter_mut().zip(g) {
                        *v += alpha * dir * gv.signum();
                    }
                }
                (BimNorm::L2, _) => {
                    let n = super::l2_norm(g).max(1e-12) as f32;
                    for (v, &gv) in row.iter_mut().zip(g) {
                        *v += alpha * dir * gv / n;
                    }
                }
                (BimNorm::L1, _) => {
                    let n = l1_norm(g).max(1e-12) as f32;
                    for (v, &gv) in row.iter_mut().zip(g) {
                        *v += alpha * dir * gv / n;
                    }
                }
            }
            project_onto(row, &clean.pixels, norm, eps[j]);
        }
    }

    let pixels = x.data().chunks(dim).map(|r| r.to_vec()).collect();
    Ok(Candidates { pixels })
}

/// Project the row onto the norm ball of radius `eps` around the clean image,
/// then clip into [0,1]. Clipping moves each pixel toward its clean value, so
/// it never re-inflates the norm.
fn project_onto(row: &mut [f32], clean: &[f32], norm: BimNorm, eps: f64) {
    let mut delta: Vec<f32> = row.iter().zip(clean).map(|(a, b)| a - b).collect();
    match norm {
        BimNorm::Linf => project_linf(&mut delta, eps),
        BimNorm::L2 => project_l2(&mut delta, eps),
        BimNorm::L1 => project_l1(&mut delta, eps),
    }
    for ((v, &c), &d) in row.iter_mut().zip(clean).zip(&delta) {
        *v = (c + d).clamp(0.0, 1.0);
    }
}

pub(crate) fn fgsm_candidates(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
) -> Result<Candidates> {
    // single signed step; the Linf clamp makes it the 1-iteration special
    // case of BIM Linf
    let cfg1 = AttackConfig { iterations: 1, step_size: None, ..*cfg };
    run_iterations(model, clean, &cfg1, BimNorm::Linf, None, 1)
}

pub(crate) fn bim_candidates(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
    norm: BimNorm,
) -> Result<Candidates> {
    run_iterations(model, clean, cfg, norm, None, cfg.iterations)
}

pub(crate) fn mi_candidates(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
) -> Result<Candidates> {
    run_iterations(model, clean, cfg, BimNorm::Linf, Some(cfg.mi_decay), cfg.iterations)
}

/// Fast gradient sign method: one signed gradient step per trial, diversified
/// over a step-size grid and tiny random starts; only misclassified results
/// are kept.
pub fn fgsm(model: &Model, clean: &ImageVec, cfg: &AttackConfig) -> Result<AdversarialSet> {
    let label = expect_correct(model, clean)?;
    let candidates = fgsm_candidates(model, clean, cfg)?;
    single_class_set(model, clean, label, cfg, "", candidates)
}

/// Basic iterative method: repeated normalized gradient steps with
/// per-iteration clipping to [0,1] and projection onto the chosen norm ball.
pub fn bim(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
    norm: BimNorm,
) -> Result<AdversarialSet> {
    let label = expect_correct(model, clean)?;
    let candidates = bim_candidates(model, clean, cfg, norm)?;
    single_class_set(model, clean, label, cfg, "", candidates)
}

/// Momentum iterative attack: BIM Linf with an accumulated L1-normalized
/// gradient; the step follows the sign of the accumulator.
pub fn mi(model: &Model, clean: &ImageVec, cfg: &AttackConfig) -> Result<AdversarialSet> {
    let label = expect_correct(model, clean)?;
    let candidates = mi_candidates(model, clean, cfg)?;
    single_class_set(model, clean, label, cfg, "", candidates)
}
