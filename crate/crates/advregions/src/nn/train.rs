//! Deterministic single-threaded training.
//!
//! One seed drives both parameter initialization and the per-epoch data
//! shuffle, so retraining with an identical (architecture, data, config)
//! triple is bit-identical. Concurrency happens across models, never inside
//! one.

use serde::{Deserialize, Serialize};

use super::{batch_from_pixels, softmax_rows, Architecture, Model, Network};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Adam { beta1: f64, beta2: f64, eps: f64 },
    Sgd,
}

impl Default for Optimizer {
    fn default() -> Self {
        Optimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
    /// Training precision tag; the training path itself runs in f32.
    #[serde(default)]
    pub double_precision: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            epochs: 10,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::default(),
            double_precision: false,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning rate must be > 0".into()));
        }
        Ok(())
    }
}

/// Final losses/errors recorded by [`train`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStats {
    pub final_train_loss: f64,
    pub train_error: f64,
    pub test_error: Option<f64>,
}

struct AdamState<F: Real> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

fn optimizer_step<F: Real>(
    net: &mut Network<F>,
    grads: &[Tensor<F>],
    cfg: &TrainConfig,
    state: &mut Option<AdamState<F>>,
) {
    let lr = F::from_f64(cfg.learning_rate);
    match cfg.optimizer {
        Optimizer::Sgd => {
            for (p, g) in net.params_mut().iter_mut().zip(grads) {
                for (pv, &gv) in p.data_mut().iter_mut().zip(g.data()) {
                    *pv = pv.sub(lr.mul(gv));
                }
            }
        }
        Optimizer::Adam { beta1, beta2, eps } => {
            let st = state.get_or_insert_with(|| AdamState {
                m: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
                v: net.params().iter().map(|p| Tensor::zeros(p.shape())).collect(),
                t: 0,
            });
            st.t += 1;
            let b1 = F::from_f64(beta1);
            let b2 = F::from_f64(beta2);
            let eps = F::from_f64(eps);
            let corr1 = F::from_f64(1.0 - beta1.powi(st.t as i32));
            let corr2 = F::from_f64(1.0 - beta2.powi(st.t as i32));
            for ((p, g), (m, v)) in net
                .params_mut()
                .iter_mut()
                .zip(grads)
                .zip(st.m.iter_mut().zip(st.v.iter_mut()))
            {
                for (((pv, &gv), mv), vv) in p
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .zip(m.data_mut().iter_mut())
                    .zip(v.data_mut().iter_mut())
                {
                    *mv = b1.mul(*mv).add(F::ONE.sub(b1).mul(gv));
                    *vv = b2.mul(*vv).add(F::ONE.sub(b2).mul(gv.mul(gv)));
                    let mhat = mv.div(corr1);
                    let vhat = vv.div(corr2);
                    *pv = pv.sub(lr.mul(mhat).div(vhat.sqrt().add(eps)));
                }
            }
        }
    }
}

/// One optimization pass over a pre-built batch. Returns the mean
/// cross-entropy loss.
fn train_batch<F: Real>(
    net: &mut Network<F>,
    x: &Tensor<F>,
    labels: &[u8],
    cfg: &TrainConfig,
    state: &mut Option<AdamState<F>>,
) -> Result<f64> {
    let batch = labels.len();
    let cache = net.forward_cached(x)?;
    let classes = net.n_classes();
    let mut probs = cache.logits().clone();
    softmax_rows(&mut probs);
    let mut loss = 0.0f64;
    let scale = F::from_f64(1.0 / batch as f64);
    let mut dlogits = probs;
    for (row, &label) in dlogits.data_mut().chunks_mut(classes).zip(labels) {
        loss -= row[label as usize].to_f64().max(1e-300).ln();
        row[label as usize] = row[label as usize].sub(F::ONE);
        for v in row.iter_mut() {
            *v = v.mul(scale);
        }
    }
    loss /= batch as f64;
    let (grads, _) = net.backward(&cache, &dlogits);
    optimizer_step(net, &grads, cfg, state);
    Ok(loss)
}

/// Train a model of `arch` on `train_data`. Deterministic in
/// (arch, data, cfg); reports divergence with the epoch it happened in.
pub fn train(
    arch: Architecture,
    train_data: &Dataset,
    test_data: Option<&Dataset>,
    cfg: &TrainConfig,
) -> Result<(Model, TrainStats)> {
    cfg.validate()?;
    if train_data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let mut net = Network::<f32>::init(arch.layer_specs(), cfg.seed)?;
    let mut state = None;
    let mut indices: Vec<usize> = (0..train_data.len()).collect();
    let mut last_loss = f64::NAN;
    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = SplitMix64::derive(cfg.seed, &[0x5f17, epoch as u64]);
        shuffle_rng.shuffle(&mut indices);
        for chunk in indices.chunks(cfg.batch_size) {
            let x = batch_from_pixels(
                chunk.iter().map(|&i| train_data.images[i].pixels.as_slice()),
                arch.input_dim(),
            )?;
            let labels: Vec<u8> = chunk
                .iter()
                .map(|&i| train_data.images[i].label.unwrap_or(0))
                .collect();
            last_loss = train_batch(&mut net, &x, &labels, cfg, &mut state)?;
            if !last_loss.is_finite() {
                return Err(Error::Diverged { epoch });
            }
        }
    }
    let train_error = error_rate(&net, train_data)?;
    let test_error = match test_data {
        Some(ds) => Some(error_rate(&net, ds)?),
        None => None,
    };
    let model = Model {
        arch,
        net,
        seed: cfg.seed,
        cfg: *cfg,
        train_error: Some(train_error),
        test_error,
    };
    let stats = TrainStats { final_train_loss: last_loss, train_error, test_error };
    Ok((model, stats))
}

/// Misclassification rate of `net` over a labeled dataset.
pub fn error_rate<F: Real>(net: &Network<F>, data: &Dataset) -> Result<f64> {
    use rayon::prelude::*;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty evaluation set".into()));
    }
    let dim = net.input_dim();
    let chunks: Vec<&[crate::data::ImageVec]> = data.images.chunks(256).collect();
    let errors: usize = chunks
        .par_iter()
        .map(|chunk| {
            let mut data_block = Vec::with_capacity(chunk.len() * dim);
            for im in chunk.iter() {
                for &p in &im.pixels {
                    data_block.push(F::from_f64(p as f64));
                }
            }
            let x = Tensor::from_vec(&[chunk.len(), dim], data_block).expect("sized above");
            let preds = net.predict_batch(&x).expect("shape checked");
            preds
                .iter()
                .zip(chunk.iter())
                .filter(|(p, im)| Some(**p) != im.label)
                .count()
        })
        .sum();
    Ok(errors as f64 / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{ImageVec, Split};

    fn tiny_blob_dataset(n_per_class: usize) -> Dataset {
        // Two well-separated synthetic classes in 784-dim space.
        let mut rng = SplitMix64::new(99);
        let mut images = Vec::new();
        for i in 0..n_per_class * 2 {
            let class = (i % 2) as u8;
            let center = if class == 0 { 0.2 } else { 0.8 };
            let pixels: Vec<f32> = (0..784)
                .map(|_| (center + 0.05 * rng.normal()).clamp(0.0, 1.0) as f32)
                .collect();
            images.push(ImageVec::with_label(pixels, class));
        }
        Dataset { images, split: Split::Train }
    }

    #[test]
    fn memorizes_a_tiny_set() {
        let data = tiny_blob_dataset(5);
        let cfg = TrainConfig {
            seed: 1,
            epochs: 40,
            batch_size: 4,
            learning_rate: 1e-3,
            ..Default::default()
        };
        let (model, stats) = train(Architecture::Mlp, &data, None, &cfg).unwrap();
        assert_eq!(stats.train_error, 0.0);
        assert_eq!(model.train_error, Some(0.0));
    }

    #[test]
    fn retraining_is_bit_identical() {
        let data = tiny_blob_dataset(4);
        let cfg = TrainConfig { seed: 3, epochs: 2, batch_size: 4, ..Default::default() };
        let (a, _) = train(Architecture::Mlp, &data, None, &cfg).unwrap();
        let (b, _) = train(Architecture::Mlp, &data, None, &cfg).unwrap();
        for (pa, pb) in a.net.params().iter().zip(b.net.params()) {
            assert_eq!(pa.data(), pb.data());
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { epochs: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { learning_rate: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
