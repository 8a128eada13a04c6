use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use structprune::layers::*;
use structprune::Tensor;

/// Direct 7-loop convolution with zero padding; returns the output and the
/// sum of absolute terms per output element (the scale for rounding error).
fn naive_conv(x: &Tensor<f64>, layer: &ConvLayer<f64>) -> (Vec<f64>, Vec<f64>, u64) {
    let &[n, c, h, w] = x.shape() else { panic!("rank") };
    let (k, s, p, m) = (layer.kernel_size(), layer.stride(), layer.pad() as isize, layer.out_maps());
    let ho = (h + 2 * p as usize - k) / s + 1;
    let wo = (w + 2 * p as usize - k) / s + 1;
    let mut out = vec![0.0; n * m * ho * wo];
    let mut scale = vec![0.0; n * m * ho * wo];
    let mut macs = 0;
    for b in 0..n {
        for o in 0..m {
            for y in 0..ho {
                for xx in 0..wo {
                    let at = ((b * m + o) * ho + y) * wo + xx;
                    let mut acc = layer.biases()[o];
                    let mut abs = acc.abs();
                    for i in 0..c {
                        if !layer.connectivity().get(o, i) {
                            continue;
                        }
                        let ker = layer.kernel(o, i);
                        for dy in 0..k {
                            for dx in 0..k {
                                macs += 1;
                                let (iy, ix) = ((y * s + dy) as isize - p, (xx * s + dx) as isize - p);
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let t = ker[dy * k + dx] * x.data()[((b * c + i) * h + iy as usize) * w + ix as usize];
                                acc += t;
                                abs += t.abs();
                            }
                        }
                    }
                    out[at] = acc;
                    scale[at] = abs;
                }
            }
        }
    }
    (out, scale, macs)
}

/// Masked convolution against the naive loops on `geometries` random cases,
/// including random connectivity; also checks the MAC counter.
pub fn masked_conv_matches_naive_oracle(geometries: u64) {
    for seed in 0..geometries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (cin, cout, k) = (rng.gen_range(1..6), rng.gen_range(1..6), [1, 3, 5][rng.gen_range(0..3)]);
        let (stride, pad) = (rng.gen_range(1..4), rng.gen_range(0..k / 2 + 2));
        let (h, w) = (rng.gen_range(k.max(1)..k + 9), rng.gen_range(k.max(1)..k + 9));
        let n = rng.gen_range(1..3);
        let mut layer = ConvLayer::<f64>::he_init(cin, cout, k, stride, pad, &mut rng).unwrap();
        for b in layer.biases_mut() {
            *b = StandardNormal.sample(&mut rng);
        }
        let density: f64 = rng.gen();
        for o in 0..cout {
            for i in 0..cin {
                if !rng.gen_bool(density) {
                    layer.prune_connection(o, i);
                }
            }
        }
        let x = Tensor::from_fn(vec![n, cin, h, w], |_| StandardNormal.sample(&mut rng));
        let counter = MacCounter::new();
        let y = conv_forward_counted(&x, &layer, &counter).unwrap();
        let (expect, scale, _) = naive_conv(&x, &layer);
        assert_eq!(y.data().len(), expect.len(), "seed {seed}: output size");
        for (j, ((a, b), s)) in y.data().iter().zip(&expect).zip(&scale).enumerate() {
            assert!((a - b).abs() <= 1e-12 * s.max(f64::MIN_POSITIVE), "seed {seed} [{j}]: {a} vs {b}");
        }
        let (ho, wo) = (y.shape()[2], y.shape()[3]);
        let expected_macs = (n * layer.active_connections() * ho * wo * k * k) as u64;
        assert_eq!(counter.get(), expected_macs, "seed {seed}: MACs");
    }
}
