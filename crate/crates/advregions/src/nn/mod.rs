//! Network engine: architectures, seeded initialization, forward inference,
//! and reverse-mode gradients with respect to parameters and inputs.

mod layers;
mod train;

pub mod io;

pub use layers::{LayerAux, LayerSpec};
pub use train::{error_rate, train, Optimizer, TrainConfig, TrainStats};

use serde::{Deserialize, Serialize};

use crate::data::ImageVec;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{Real, Tensor};

/// Network family used in the experiments. Layer layouts are fixed per kind:
/// the MLP is 784 -> 512 -> 512 -> 512 -> 10 with ReLU, the LeNet variant has
/// two 5x5 convolutions with 2x2 max pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Lenet,
}

impl Architecture {
    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        match self {
            Architecture::Mlp => vec![
                LayerSpec::Dense { inputs: 784, outputs: 512 },
                LayerSpec::Relu { dim: 512 },
                LayerSpec::Dense { inputs: 512, outputs: 512 },
                LayerSpec::Relu { dim: 512 },
                LayerSpec::Dense { inputs: 512, outputs: 512 },
                LayerSpec::Relu { dim: 512 },
                LayerSpec::Dense { inputs: 512, outputs: 10 },
            ],
            Architecture::Lenet => vec![
                LayerSpec::Conv2d { in_ch: 1, out_ch: 10, kernel: 5, in_h: 28, in_w: 28 },
                LayerSpec::MaxPool2d { ch: 10, in_h: 24, in_w: 24, size: 2 },
                LayerSpec::Relu { dim: 10 * 12 * 12 },
                LayerSpec::Conv2d { in_ch: 10, out_ch: 20, kernel: 5, in_h: 12, in_w: 12 },
                LayerSpec::MaxPool2d { ch: 20, in_h: 8, in_w: 8, size: 2 },
                LayerSpec::Relu { dim: 20 * 4 * 4 },
                LayerSpec::Dense { inputs: 320, outputs: 50 },
                LayerSpec::Relu { dim: 50 },
                LayerSpec::Dense { inputs: 50, outputs: 10 },
            ],
        }
    }

    pub fn input_dim(&self) -> usize {
        784
    }

    pub fn name(&self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::Lenet => "lenet",
        }
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mlp" => Ok(Architecture::Mlp),
            "lenet" | "cnn" => Ok(Architecture::Lenet),
            other => Err(Error::InvalidConfig(format!("unknown architecture {other:?}"))),
        }
    }
}

/// A feed-forward stack with parameters. The softmax head is applied by
/// [`Network::forward_probs`]; logits are exposed separately for attack
/// objectives that need them.
#[derive(Debug, Clone)]
pub struct Network<F: Real = f32> {
    specs: Vec<LayerSpec>,
    params: Vec<Tensor<F>>,
    /// params[param_offsets[i]..param_offsets[i+1]] belong to layer i.
    param_offsets: Vec<usize>,
}

/// Forward-pass state kept for backpropagation.
pub struct Cache<F: Real> {
    /// acts[0] is the input batch; acts[i+1] is layer i's output.
    acts: Vec<Tensor<F>>,
    aux: Vec<LayerAux<F>>,
    batch: usize,
}

impl<F: Real> Cache<F> {
    pub fn logits(&self) -> &Tensor<F> {
        self.acts.last().expect("cache has at least the input")
    }
}

impl<F: Real> Network<F> {
    /// Build a network with all-zero parameters.
    pub fn zeros(specs: Vec<LayerSpec>) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::InvalidConfig("empty layer stack".into()));
        }
        for s in &specs {
            s.validate()?;
        }
        for pair in specs.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "layer chain broken: {:?} outputs {}, {:?} expects {}",
                    pair[0],
                    pair[0].out_dim(),
                    pair[1],
                    pair[1].in_dim()
                )));
            }
        }
        let mut params = Vec::new();
        let mut param_offsets = vec![0];
        for s in &specs {
            for shape in s.param_shapes() {
                params.push(Tensor::zeros(&shape));
            }
            param_offsets.push(params.len());
        }
        Ok(Self { specs, params, param_offsets })
    }

    /// He-normal initialization: weights drawn from N(0, 2/fan_in), biases
    /// zero. The draw order is fixed (layer by layer, row-major), so a seed
    /// pins every parameter.
    pub fn init(specs: Vec<LayerSpec>, seed: u64) -> Result<Self> {
        let mut net = Self::zeros(specs)?;
        let mut rng = SplitMix64::derive(seed, &[0x1417]);
        for (i, spec) in net.specs.iter().enumerate() {
            let fan_in = spec.fan_in();
            if fan_in == 0 {
                continue;
            }
            let std = (2.0 / fan_in as f64).sqrt();
            let start = net.param_offsets[i];
            // weights first, bias second; bias stays zero
            for v in net.params[start].data_mut() {
                *v = F::from_f64(rng.normal() * std);
            }
        }
        Ok(net)
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor<F>>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (old, new) in self.params.iter().zip(&params) {
            if old.shape() != new.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter shape {:?} != {:?}",
                    new.shape(),
                    old.shape()
                )));
            }
        }
        self.params = params;
        Ok(())
    }

    fn layer_params(&self, i: usize) -> &[Tensor<F>] {
        &self.params[self.param_offsets[i]..self.param_offsets[i + 1]]
    }

    pub fn input_dim(&self) -> usize {
        self.specs[0].in_dim()
    }

    pub fn n_classes(&self) -> usize {
        self.specs.last().unwrap().out_dim()
    }

    fn check_batch(&self, x: &Tensor<F>) -> Result<usize> {
        if x.shape().len() != 2 || x.shape()[1] != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "batch shape {:?} does not match input dim {}",
                x.shape(),
                self.input_dim()
            )));
        }
        Ok(x.shape()[0])
    }

    /// Forward pass retaining per-layer activations for backpropagation.
    pub fn forward_cached(&self, x: &Tensor<F>) -> Result<Cache<F>> {
        let batch = self.check_batch(x)?;
        let mut acts = Vec::with_capacity(self.specs.len() + 1);
        let mut aux = Vec::with_capacity(self.specs.len());
        acts.push(x.clone());
        for (i, spec) in self.specs.iter().enumerate() {
            let (y, a) = spec.forward(acts.last().unwrap(), self.layer_params(i), batch);
            acts.push(y);
            aux.push(a);
        }
        Ok(Cache { acts, aux, batch })
    }

    pub fn forward_logits(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let batch = self.check_batch(x)?;
        let mut cur = x.clone();
        for (i, spec) in self.specs.iter().enumerate() {
            let (y, _) = spec.forward(&cur, self.layer_params(i), batch);
            cur = y;
        }
        Ok(cur)
    }

    /// Row-wise softmax probabilities.
    pub fn forward_probs(&self, x: &Tensor<F>) -> Result<Tensor<F>> {
        let mut logits = self.forward_logits(x)?;
        softmax_rows(&mut logits);
        Ok(logits)
    }

    /// Backpropagate `dlogits` through the stack.
    /// Returns (gradient wrt every parameter tensor, gradient wrt input).
    pub fn backward(&self, cache: &Cache<F>, dlogits: &Tensor<F>) -> (Vec<Tensor<F>>, Tensor<F>) {
        let mut dparams: Vec<Tensor<F>> =
            self.params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        let mut grad = dlogits.clone();
        for i in (0..self.specs.len()).rev() {
            let (dx, dp) = self.specs[i].backward(
                &grad,
                &cache.acts[i],
                self.layer_params(i),
                &cache.aux[i],
                cache.batch,
            );
            for (j, g) in dp.into_iter().enumerate() {
                dparams[self.param_offsets[i] + j] = g;
            }
            grad = dx;
        }
        (dparams, grad)
    }

    /// Argmax labels for a batch; ties resolve to the lowest class index.
    pub fn predict_batch(&self, x: &Tensor<F>) -> Result<Vec<u8>> {
        let logits = self.forward_logits(x)?;
        Ok(argmax_rows(&logits))
    }

    /// Per-sample cross-entropy input gradients for a batch of (image, label)
    /// rows: d/dx of -ln softmax(x)[label].
    pub fn input_gradient_batch(&self, x: &Tensor<F>, labels: &[u8]) -> Result<Tensor<F>> {
        let cache = self.forward_cached(x)?;
        let c = self.n_classes();
        let mut dlogits = cache.logits().clone();
        softmax_rows(&mut dlogits);
        for (row, &label) in dlogits.data_mut().chunks_mut(c).zip(labels) {
            row[label as usize] = row[label as usize].sub(F::ONE);
        }
        Ok(self.backward(&cache, &dlogits).1)
    }
}

/// In-place row-wise softmax with max subtraction.
pub fn softmax_rows<F: Real>(t: &mut Tensor<F>) {
    let cols = *t.shape().last().expect("nonempty shape");
    for row in t.data_mut().chunks_mut(cols) {
        let mut max = row[0];
        for &v in row.iter() {
            max = max.max(v);
        }
        let mut sum = F::ZERO;
        for v in row.iter_mut() {
            *v = v.sub(max).exp();
            sum = sum.add(*v);
        }
        for v in row.iter_mut() {
            *v = v.div(sum);
        }
    }
}

/// Row-wise argmax; ties break toward the lowest index.
pub fn argmax_rows<F: Real>(t: &Tensor<F>) -> Vec<u8> {
    let cols = *t.shape().last().expect("nonempty shape");
    t.data()
        .chunks(cols)
        .map(|row| {
            let mut best = 0usize;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best as u8
        })
        .collect()
}

/// A trained classifier: architecture, parameters, and provenance.
#[derive(Debug, Clone)]
pub struct Model {
    pub arch: Architecture,
    pub net: Network<f32>,
    pub seed: u64,
    pub cfg: TrainConfig,
    pub train_error: Option<f64>,
    pub test_error: Option<f64>,
}

impl Model {
    /// Deterministic initial parameters for (arch, seed).
    pub fn init_params(arch: Architecture, seed: u64) -> Result<Vec<Tensor<f32>>> {
        Ok(Network::<f32>::init(arch.layer_specs(), seed)?.params().to_vec())
    }

    pub fn batch_from_images(&self, images: &[&ImageVec]) -> Result<Tensor<f32>> {
        batch_from_pixels(images.iter().map(|im| im.pixels.as_slice()), self.net.input_dim())
    }

    /// Class-probability rows for a batch.
    pub fn forward(&self, batch: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.net.forward_probs(batch)
    }

    /// Hard label for one image; argmax ties resolve to the lowest class.
    pub fn predict(&self, image: &ImageVec) -> u8 {
        let x = batch_from_pixels(std::iter::once(image.pixels.as_slice()), self.net.input_dim())
            .expect("image dim matches architecture");
        self.net.predict_batch(&x).expect("shape checked")[0]
    }

    pub fn predict_pixels(&self, pixels: &[f32]) -> u8 {
        let x = batch_from_pixels(std::iter::once(pixels), self.net.input_dim())
            .expect("image dim matches architecture");
        self.net.predict_batch(&x).expect("shape checked")[0]
    }

    /// Gradient of the cross-entropy loss toward `label` with respect to the
    /// input pixels; same shape as the image.
    pub fn input_gradient(&self, image: &ImageVec, label: u8) -> Result<Tensor<f32>> {
        let x = batch_from_pixels(std::iter::once(image.pixels.as_slice()), self.net.input_dim())?;
        self.net.input_gradient_batch(&x, &[label])
    }
}

/// Stack pixel slices into a `[B, dim]` batch tensor.
pub fn batch_from_pixels<'a, I>(rows: I, dim: usize) -> Result<Tensor<f32>>
where
    I: Iterator<Item = &'a [f32]>,
{
    let mut data = Vec::new();
    let mut count = 0;
    for row in rows {
        if row.len() != dim {
            return Err(Error::ShapeMismatch(format!(
                "image dim {} does not match network input {}",
                row.len(),
                dim
            )));
        }
        data.extend_from_slice(row);
        count += 1;
    }
    Tensor::from_vec(&[count, dim], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_net_gives_uniform_probabilities() {
        let net = Network::<f64>::zeros(vec![LayerSpec::Dense { inputs: 4, outputs: 10 }]).unwrap();
        let x = Tensor::from_vec(&[1, 4], vec![0.3, 0.1, 0.9, 0.5]).unwrap();
        let p = net.forward_probs(&x).unwrap();
        for &v in p.data() {
            assert!((v - 0.1).abs() < 1e-12);
        }
        // uniform tie resolves to class 0
        assert_eq!(net.predict_batch(&x).unwrap(), vec![0]);
    }

    #[test]
    fn hand_built_two_class_softmax() {
        // weights [[1,0],[0,1]], input (2,0): probs = (e^2, 1)/(e^2+1)
        let mut net =
            Network::<f64>::zeros(vec![LayerSpec::Dense { inputs: 2, outputs: 2 }]).unwrap();
        net.params_mut()[0] = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::from_vec(&[1, 2], vec![2.0, 0.0]).unwrap();
        let p = net.forward_probs(&x).unwrap();
        let e2 = 2.0f64.exp();
        assert!((p.data()[0] - e2 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p.data()[1] - 1.0 / (e2 + 1.0)).abs() < 1e-12);
        assert!((p.data()[0] - 0.8808).abs() < 1e-4);
        assert!((p.data()[1] - 0.1192).abs() < 1e-4);
        assert_eq!(net.predict_batch(&x).unwrap(), vec![0]);
    }

    #[test]
    fn init_is_deterministic_and_seed_sensitive() {
        let a = Model::init_params(Architecture::Mlp, 7).unwrap();
        let b = Model::init_params(Architecture::Mlp, 7).unwrap();
        assert_eq!(a, b);
        let c = Model::init_params(Architecture::Mlp, 8).unwrap();
        assert!(a.iter().zip(&c).any(|(x, y)| x != y));
    }

    #[test]
    fn init_std_tracks_he_target() {
        for arch in [Architecture::Mlp, Architecture::Lenet] {
            let net = Network::<f32>::init(arch.layer_specs(), 5).unwrap();
            for (i, spec) in net.specs().iter().enumerate() {
                let fan_in = spec.fan_in();
                if fan_in == 0 {
                    continue;
                }
                let w = &net.params()[net.param_offsets[i]];
                let n = w.len() as f64;
                let mean = w.data().iter().map(|v| *v as f64).sum::<f64>() / n;
                let var = w.data().iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>()
                    / (n - 1.0);
                let target = (2.0 / fan_in as f64).sqrt();
                let ratio = var.sqrt() / target;
                assert!(
                    (0.8..=1.2).contains(&ratio),
                    "{arch:?} layer {i}: sd ratio {ratio}"
                );
            }
        }
    }

    #[test]
    fn zero_model_zero_image_has_zero_input_gradient() {
        let net = Network::<f64>::zeros(vec![LayerSpec::Dense { inputs: 3, outputs: 10 }]).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
        let g = net.input_gradient_batch(&x, &[0]).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn predict_invariant_under_logit_rescaling() {
        let mut net =
            Network::<f64>::init(vec![LayerSpec::Dense { inputs: 5, outputs: 10 }], 3).unwrap();
        let x = Tensor::from_vec(&[1, 5], vec![0.2, 0.4, 0.6, 0.8, 1.0]).unwrap();
        let before = net.predict_batch(&x).unwrap();
        for p in net.params_mut() {
            for v in p.data_mut() {
                *v *= 3.5;
            }
        }
        assert_eq!(before, net.predict_batch(&x).unwrap());
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Network::<f32>::zeros(vec![LayerSpec::Dense { inputs: 4, outputs: 2 }]).unwrap();
        let x = Tensor::from_vec(&[1, 3], vec![0.0; 3]).unwrap();
        assert!(net.forward_probs(&x).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut t = Tensor::from_vec(&[2, 3], vec![1.0f64, 2.0, 3.0, -5.0, 0.0, 5.0]).unwrap();
        softmax_rows(&mut t);
        for row in t.data().chunks(3) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}
