//! NewtonFool: iterative descent of the true-class softmax probability with
//! an adaptively scaled step.
//!
//! Per iteration the perturbation is
//! `min(eta * ||W||_2 * ||g||_2, p_c - 1/C) * g / ||g||_2^2` against the
//! gradient `g` of the true-class probability; a trial stops at its first
//! label flip. Trials that never flip within the iteration budget are
//! dropped.

use super::{
    expect_correct, prob_grad_rows, probs_and_preds, single_class_set, trial_starts,
    AdversarialSet, AttackConfig, Candidates,
};
use crate::data::ImageVec;
use crate::error::Result;
use crate::nn::Model;

pub(crate) fn nf_candidates(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
) -> Result<(Candidates, Vec<Vec<f64>>)> {
    let clean_label = expect_correct(model, clean)?;
    let trials = cfg.count;
    let dim = clean.dim();
    let classes = model.net.n_classes() as f64;
    let labels = vec![clean_label; trials];
    let w_norm = super::l2_norm(&clean.pixels);

    let mut x = trial_starts(clean, cfg, trials);
    let mut done: Vec<Option<Vec<f32>>> = vec![None; trials];
    let mut traces: Vec<Vec<f64>> = vec![Vec::new(); trials];

    for _ in 0..cfg.iterations {
        if done.iter().all(Option::is_some) {
            break;
        }
        let (_, preds) = probs_and_preds(&model.net, &x);
        for j in 0..trials {
            if done[j].is_none() && preds[j] != clean_label {
                done[j] = Some(x.data()[j * dim..(j + 1) * dim].to_vec());
            }
        }
        let (p_c, grad) = prob_grad_rows(&model.net, &x, &labels);
        for j in 0..trials {
            if done[j].is_some() {
                continue;
            }
            traces[j].push(p_c[j]);
            let g = &grad.data()[j * dim..(j + 1) * dim];
            let g_norm = super::l2_norm(g);
            if g_norm < 1e-12 {
                continue;
            }
            let magnitude = (cfg.nf_eta * w_norm * g_norm).min(p_c[j] - 1.0 / classes);
            if magnitude <= 0.0 {
                continue;
            }
            let scale = (magnitude / (g_norm * g_norm)) as f32;
            let row = &mut x.data_mut()[j * dim..(j + 1) * dim];
            for (v, &gv) in row.iter_mut().zip(g) {
                *v = (*v - scale * gv).clamp(0.0, 1.0);
            }
        }
    }
    // pick up flips that happened on the last step
    let (_, preds) = probs_and_preds(&model.net, &x);
    for j in 0..trials {
        if done[j].is_none() && preds[j] != clean_label {
            done[j] = Some(x.data()[j * dim..(j + 1) * dim].to_vec());
        }
    }

    let pixels = done.into_iter().flatten().collect();
    Ok((Candidates { pixels }, traces))
}

/// NewtonFool is untargeted by construction; a configured target class acts
/// as a filter on where the flips land.
pub fn newtonfool(model: &Model, clean: &ImageVec, cfg: &AttackConfig) -> Result<AdversarialSet> {
    let label = expect_correct(model, clean)?;
    let (candidates, _) = nf_candidates(model, clean, cfg)?;
    single_class_set(model, clean, label, cfg, "", candidates)
}

/// As [`newtonfool`], also returning each trial's true-class probability
/// trace (one entry per iteration while the trial was still unflipped).
pub fn newtonfool_with_trace(
    model: &Model,
    clean: &ImageVec,
    cfg: &AttackConfig,
) -> Result<(AdversarialSet, Vec<Vec<f64>>)> {
    let label = expect_correct(model, clean)?;
    let (candidates, traces) = nf_candidates(model, clean, cfg)?;
    let set = single_class_set(model, clean, label, cfg, "", candidates)?;
    Ok((set, traces))
}
