//! Finite-difference gradient checks (f64, step 1e-4, 1e-4 relative).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use structprune::arch::NetworkSpec;
use structprune::layers::*;
use structprune::network::Network;
use structprune::Tensor;

const STEP: f64 = 1e-4;
const REL: f64 = 1e-4;
// below this both sides count as zero (FD round-off is ~1e-12 here)
const ABS_FLOOR: f64 = 1e-9;
const INSTANCES: u64 = 100;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| normal(rng))
}

fn close(analytic: f64, numeric: f64, rel: f64) -> bool {
    let d = (analytic - numeric).abs();
    d <= ABS_FLOOR || d <= rel * analytic.abs().max(numeric.abs())
}

/// Central difference of `loss` with respect to every entry of `params`,
/// compared with `grad`.
fn check(what: &str, params: &mut [f64], grad: &[f64], rel: f64, mut loss: impl FnMut(&[f64]) -> f64) {
    assert_eq!(params.len(), grad.len(), "{what}: gradient length");
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + STEP;
        let up = loss(params);
        params[i] = orig - STEP;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * STEP);
        assert!(close(grad[i], numeric, rel), "{what}[{i}]: analytic {} vs numeric {numeric}", grad[i]);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn conv_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout, k) = (rng.gen_range(1..4), rng.gen_range(1..4), rng.gen_range(1..4));
        let (stride, pad) = (rng.gen_range(1..3), rng.gen_range(0..2));
        let (h, w) = (rng.gen_range(k..k + 4), rng.gen_range(k..k + 4));
        let n = rng.gen_range(1..3);
        let mut layer = ConvLayer::<f64>::he_init(cin, cout, k, stride, pad, &mut rng).unwrap();
        for b in layer.biases_mut() {
            *b = normal(&mut rng);
        }
        for o in 0..cout {
            for i in 0..cin {
                if rng.gen_bool(0.3) {
                    layer.prune_connection(o, i);
                }
            }
        }
        let x = random_tensor(vec![n, cin, h, w], &mut rng);
        let y = conv_forward(&x, &layer).unwrap();
        let r = random_tensor(y.shape().to_vec(), &mut rng);
        let (gx, gk, gb) = conv_backward(&x, &layer, &r).unwrap();

        let mut xd = x.data().to_vec();
        check("conv input", &mut xd, gx.data(), REL, |p| {
            let xt = Tensor::new(x.shape().to_vec(), p.to_vec()).unwrap();
            dot(conv_forward(&xt, &layer).unwrap().data(), r.data())
        });
        for o in 0..cout {
            for i in 0..cin {
                let g = &gk.data()[(o * cin + i) * k * k..(o * cin + i + 1) * k * k];
                if !layer.connectivity().get(o, i) {
                    assert!(g.iter().all(|&v| v == 0.0), "pruned kernel ({o},{i}) got gradient");
                    continue;
                }
                let mut kd = layer.kernel(o, i).to_vec();
                let mut probe = layer.clone();
                check("conv kernel", &mut kd, g, REL, |p| {
                    probe.kernel_mut(o, i).copy_from_slice(p);
                    dot(conv_forward(&x, &probe).unwrap().data(), r.data())
                });
            }
        }
        let mut bd = layer.biases().to_vec();
        let mut probe = layer.clone();
        check("conv bias", &mut bd, &gb, REL, |p| {
            probe.biases_mut().copy_from_slice(p);
            dot(conv_forward(&x, &probe).unwrap().data(), r.data())
        });
    }
}

pub fn dense_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (inp, out, n) = (rng.gen_range(1..21), rng.gen_range(1..11), rng.gen_range(1..4));
        let mut layer = DenseLayer::<f64>::he_init(inp, out, &mut rng);
        for b in layer.biases_mut() {
            *b = normal(&mut rng);
        }
        let x = random_tensor(vec![n, inp], &mut rng);
        let r = random_tensor(vec![n, out], &mut rng);
        let (gx, gw, gb) = dense_backward(&x, &layer, &r).unwrap();
        let f = |l: &DenseLayer<f64>, x: &Tensor<f64>| dot(dense_forward(x, l).unwrap().data(), r.data());

        let mut xd = x.data().to_vec();
        check("dense input", &mut xd, gx.data(), REL, |p| f(&layer, &Tensor::new(vec![n, inp], p.to_vec()).unwrap()));
        let mut wd = layer.weights().data().to_vec();
        let mut probe = layer.clone();
        check("dense weights", &mut wd, gw.data(), REL, |p| {
            probe.weights_mut().data_mut().copy_from_slice(p);
            f(&probe, &x)
        });
        let mut bd = layer.biases().to_vec();
        let mut probe = layer.clone();
        check("dense bias", &mut bd, &gb, REL, |p| {
            probe.biases_mut().copy_from_slice(p);
            f(&probe, &x)
        });
    }
}

pub fn batchnorm_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let (n, c) = (rng.gen_range(2..5), rng.gen_range(1..4));
        let shape = if rng.gen_bool(0.5) {
            vec![n, c, rng.gen_range(1..4), rng.gen_range(1..4)]
        } else {
            vec![n, c]
        };
        let mut bn = BatchNorm::<f64>::new(c);
        for g in bn.gamma_mut() {
            *g = 0.5 + rng.gen::<f64>();
        }
        for b in bn.beta_mut() {
            *b = normal(&mut rng);
        }
        let x = random_tensor(shape.clone(), &mut rng);
        let (y, cache) = batchnorm_forward(&x, &mut bn.clone(), Mode::Train).unwrap();
        let r = random_tensor(y.shape().to_vec(), &mut rng);
        let (gx, gg, gbeta) = batchnorm_backward(&cache.unwrap(), &r).unwrap();
        let f = |p: &BatchNorm<f64>, x: &Tensor<f64>| {
            let (y, _) = batchnorm_forward(x, &mut p.clone(), Mode::Train).unwrap();
            dot(y.data(), r.data())
        };

        let mut xd = x.data().to_vec();
        check("bn input", &mut xd, gx.data(), REL, |p| f(&bn, &Tensor::new(shape.clone(), p.to_vec()).unwrap()));
        let mut gd = bn.gamma().to_vec();
        let mut probe = bn.clone();
        check("bn gamma", &mut gd, &gg, REL, |p| {
            probe.gamma_mut().copy_from_slice(p);
            f(&probe, &x)
        });
        let mut bd = bn.beta().to_vec();
        let mut probe = bn.clone();
        check("bn beta", &mut bd, &gbeta, REL, |p| {
            probe.beta_mut().copy_from_slice(p);
            f(&probe, &x)
        });
    }
}

/// Distinct values at least 0.01 apart, so a 1e-4 step never changes an
/// argmax or crosses a ReLU kink.
fn separated(len: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f64> = (0..len).map(|i| (i as f64 - (len / 2) as f64) * 0.01 + 0.005).collect();
    v.shuffle(rng);
    v
}

pub fn maxpool_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(3000 + seed);
        let (window, stride) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let shape = vec![rng.gen_range(1..3), rng.gen_range(1..3), rng.gen_range(window..window + 5), rng.gen_range(window..window + 5)];
        let x = Tensor::new(shape.clone(), separated(shape.iter().product(), &mut rng)).unwrap();
        let (y, idx) = maxpool_forward(&x, window, stride).unwrap();
        let r = random_tensor(y.shape().to_vec(), &mut rng);
        let gx = maxpool_backward(&idx, &r).unwrap();
        let mut xd = x.data().to_vec();
        check("maxpool input", &mut xd, gx.data(), REL, |p| {
            let xt = Tensor::new(shape.clone(), p.to_vec()).unwrap();
            dot(maxpool_forward(&xt, window, stride).unwrap().0.data(), r.data())
        });
    }
}

pub fn relu_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let len = rng.gen_range(1..40);
        let x = Tensor::new(vec![len], separated(len, &mut rng)).unwrap();
        let r = random_tensor(vec![len], &mut rng);
        let mut act = x.clone();
        relu(&mut act);
        let mut g = r.clone();
        relu_backward(&act, &mut g);
        let mut xd = x.data().to_vec();
        check("relu input", &mut xd, g.data(), REL, |p| {
            let mut t = Tensor::new(vec![len], p.to_vec()).unwrap();
            relu(&mut t);
            dot(t.data(), r.data())
        });
    }
}

pub fn softmax_xent_gradients_match_finite_differences() {
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(5000 + seed);
        let (n, c) = (rng.gen_range(1..5), rng.gen_range(2..11));
        let logits = random_tensor(vec![n, c], &mut rng).data().iter().map(|v| 3.0 * v).collect::<Vec<_>>();
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
        let t = Tensor::new(vec![n, c], logits.clone()).unwrap();
        let (_, g) = softmax_xent_batch(&t, &labels).unwrap();
        let mut ld = logits.clone();
        check("softmax logits", &mut ld, g.data(), 1e-6, |p| {
            softmax_xent_batch(&Tensor::new(vec![n, c], p.to_vec()).unwrap(), &labels).unwrap().0
        });
    }
}

/// Whole-network backward, including pooling and the BN inside conv blocks,
/// on a sample of parameters. Unlike the single layers, random activations
/// here can sit within 1e-4 of a ReLU or max-pool kink; a mismatch that
/// vanishes at step 1e-6 is counted as such a crossing, and those must stay rare.
pub fn network_gradients_match_finite_differences() {
    let spec = NetworkSpec::parse("2x3C3-MP2-3x4C3-5-4", [2, 8, 8]).unwrap();
    let (mut checked, mut kinks) = (0, 0);
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(6000 + seed);
        let mut net = Network::<f64>::initialize(&spec, seed).unwrap();
        net.conv_mut(2).unwrap().conv_mut().prune_connection(1, 0);
        let x = random_tensor(vec![3, 2, 8, 8], &mut rng);
        let labels: Vec<usize> = (0..3).map(|_| rng.gen_range(0..4)).collect();
        let loss_of = |n: &Network<f64>| {
            let (logits, _) = n.clone().forward_train(&x).unwrap();
            softmax_xent_batch(&logits, &labels).unwrap().0
        };
        let (logits, tape) = net.clone().forward_train(&x).unwrap();
        let (_, gl) = softmax_xent_batch(&logits, &labels).unwrap();
        let grads = net.backward(&tape, gl).unwrap();
        let flat: Vec<f64> = grads.slices().concat();
        let total = flat.len();
        for _ in 0..40 {
            let j = rng.gen_range(0..total);
            let probe = |delta: f64| {
                let mut n = net.clone();
                let mut at = 0;
                n.visit_params_mut(|p| {
                    if (at..at + p.len()).contains(&j) {
                        p[j - at] += delta;
                    }
                    at += p.len();
                });
                loss_of(&n)
            };
            let fd = |h: f64| (probe(h) - probe(-h)) / (2.0 * h);
            checked += 1;
            let numeric = fd(STEP);
            if close(flat[j], numeric, REL) {
                continue;
            }
            let fine = fd(1e-6);
            assert!(close(flat[j], fine, REL), "seed {seed} param {j}: analytic {} vs numeric {numeric} / {fine}", flat[j]);
            kinks += 1;
        }
    }
    assert!(kinks * 50 <= checked, "{kinks} of {checked} checks hit a kink");
}
