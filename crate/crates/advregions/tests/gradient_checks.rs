//! Finite-difference verification of the engine's reverse-mode gradients.
//!
//! Central differences in f64 with step 1e-5 against randomized small
//! networks. Points too close to a ReLU or max-pool kink are skipped (the
//! quadratic error model of central differences does not hold across a kink),
//! with new seeds drawn until the required number of smooth cases is checked.

use advregions::nn::{softmax_rows, LayerSpec, Network};
use advregions::rng::SplitMix64;
use advregions::tensor::Tensor;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;
/// Pre-activation margin below which a point counts as kink-adjacent.
const KINK_MARGIN: f64 = 1e-3;

fn random_net(seed: u64) -> (Network<f64>, usize) {
    let mut rng = SplitMix64::derive(seed, &[77]);
    let specs = if seed % 2 == 0 {
        // dense stack with 1-2 hidden layers
        let inputs = 4 + rng.next_below(6);
        let hidden = 3 + rng.next_below(5);
        let mut specs = vec![
            LayerSpec::Dense { inputs, outputs: hidden },
            LayerSpec::Relu { dim: hidden },
        ];
        if rng.next_below(2) == 1 {
            specs.push(LayerSpec::Dense { inputs: hidden, outputs: hidden });
            specs.push(LayerSpec::Relu { dim: hidden });
        }
        specs.push(LayerSpec::Dense { inputs: hidden, outputs: 3 });
        specs
    } else {
        // tiny conv stack on a 6x6 image
        vec![
            LayerSpec::Conv2d { in_ch: 1, out_ch: 2, kernel: 3, in_h: 6, in_w: 6 },
            LayerSpec::MaxPool2d { ch: 2, in_h: 4, in_w: 4, size: 2 },
            LayerSpec::Relu { dim: 2 * 2 * 2 },
            LayerSpec::Dense { inputs: 8, outputs: 3 },
        ]
    };
    let input_dim = specs[0].in_dim();
    (Network::<f64>::init(specs, seed).unwrap(), input_dim)
}

fn ce_loss(net: &Network<f64>, x: &Tensor<f64>, label: usize) -> f64 {
    let mut p = net.forward_logits(x).unwrap();
    softmax_rows(&mut p);
    -p.data()[label].ln()
}

/// True when every ReLU input and every pool-window runner-up gap clears the
/// margin, i.e. the loss is locally twice differentiable at `x`.
fn smooth_at(net: &Network<f64>, x: &Tensor<f64>) -> bool {
    let mut cur = x.clone();
    for (i, spec) in net.specs().iter().enumerate() {
        match *spec {
            LayerSpec::Relu { .. } => {
                if cur.data().iter().any(|v| v.abs() < KINK_MARGIN) {
                    return false;
                }
            }
            LayerSpec::MaxPool2d { ch, in_h, in_w, size } => {
                let (oh, ow) = (in_h / size, in_w / size);
                for c in 0..ch {
                    for oi in 0..oh {
                        for oj in 0..ow {
                            let mut vals: Vec<f64> = Vec::with_capacity(size * size);
                            for di in 0..size {
                                for dj in 0..size {
                                    vals.push(
                                        cur.data()
                                            [c * in_h * in_w + (oi * size + di) * in_w + oj * size + dj],
                                    );
                                }
                            }
                            vals.sort_by(|a, b| b.partial_cmp(a).unwrap());
                            if vals[0] - vals[1] < KINK_MARGIN {
                                return false;
                            }
                        }
                    }
                }
            }
            _ => {}
        }
        let start = net
            .specs()
            .iter()
            .take(i)
            .map(|s| s.param_shapes().len())
            .sum::<usize>();
        let n = spec.param_shapes().len();
        let (y, _) = spec.forward(&cur, &net.params()[start..start + n], 1);
        cur = y;
    }
    true
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f64, f64::max);
    let scale = a
        .iter()
        .chain(b)
        .map(|v| v.abs())
        .fold(0.0f64, f64::max)
        .max(1e-10);
    diff / scale
}

#[test]
fn gradients_match_central_finite_differences() {
    let mut checked = 0;
    let mut seed = 0u64;
    while checked < 20 {
        seed += 1;
        let (net, input_dim) = random_net(seed);
        let mut rng = SplitMix64::derive(seed, &[991]);
        let x = Tensor::from_vec(
            &[1, input_dim],
            (0..input_dim).map(|_| rng.next_f64()).collect(),
        )
        .unwrap();
        let label = rng.next_below(3);
        if !smooth_at(&net, &x) {
            continue;
        }

        // analytic gradients
        let cache = net.forward_cached(&x).unwrap();
        let mut dlogits = cache.logits().clone();
        softmax_rows(&mut dlogits);
        dlogits.data_mut()[label] -= 1.0;
        let (dparams, dx) = net.backward(&cache, &dlogits);

        // input gradient vs finite differences
        let mut fd_input = vec![0.0; input_dim];
        let mut ok = true;
        for i in 0..input_dim {
            let mut xp = x.clone();
            xp.data_mut()[i] += STEP;
            let mut xm = x.clone();
            xm.data_mut()[i] -= STEP;
            if !smooth_at(&net, &xp) || !smooth_at(&net, &xm) {
                ok = false;
                break;
            }
            fd_input[i] = (ce_loss(&net, &xp, label) - ce_loss(&net, &xm, label)) / (2.0 * STEP);
        }
        if !ok {
            continue;
        }
        let e = rel_err(dx.data(), &fd_input);
        assert!(e <= REL_TOL, "seed {seed}: input gradient rel err {e}");

        // parameter gradients vs finite differences
        for (pi, analytic) in dparams.iter().enumerate() {
            let mut fd = vec![0.0; analytic.len()];
            for j in 0..analytic.len() {
                let mut np = net.clone();
                np.params_mut()[pi].data_mut()[j] += STEP;
                let lp = ce_loss(&np, &x, label);
                let mut nm = net.clone();
                nm.params_mut()[pi].data_mut()[j] -= STEP;
                let lm = ce_loss(&nm, &x, label);
                fd[j] = (lp - lm) / (2.0 * STEP);
            }
            let e = rel_err(analytic.data(), &fd);
            assert!(e <= REL_TOL, "seed {seed}: param {pi} gradient rel err {e}");
        }
        checked += 1;
    }
    assert_eq!(checked, 20);
}

#[test]
fn linear_softmax_input_gradient_matches_closed_form() {
    // For logits z = W x + b, d(-ln p_label)/dx = W^T (p - onehot(label)).
    let mut net = Network::<f64>::init(vec![LayerSpec::Dense { inputs: 6, outputs: 4 }], 9).unwrap();
    let mut rng = SplitMix64::new(4);
    for v in net.params_mut()[1].data_mut() {
        *v = rng.normal() * 0.3;
    }
    let x = Tensor::from_vec(&[1, 6], (0..6).map(|_| rng.next_f64()).collect()).unwrap();
    let label = 2usize;

    let mut p = net.forward_logits(&x).unwrap();
    softmax_rows(&mut p);
    let w = net.params()[0].clone(); // [4, 6]
    let mut expected = vec![0.0; 6];
    for o in 0..4 {
        let coeff = p.data()[o] - if o == label { 1.0 } else { 0.0 };
        for i in 0..6 {
            expected[i] += coeff * w.data()[o * 6 + i];
        }
    }
    let g = net.input_gradient_batch(&x, &[label as u8]).unwrap();
    for (a, b) in g.data().iter().zip(&expected) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
}
