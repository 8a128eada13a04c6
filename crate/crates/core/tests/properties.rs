//! Naive-loop convolution oracle and property checks on architectures,
//! pooling, checkpoints and mask bookkeeping.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use structprune::arch::{LayerSpec, NetworkSpec, Padding};
use structprune::layers::*;
use structprune::network::{ConvRange, Network};
use structprune::pruning::{round_half_up, sample_mask, Granularity, MaskRequest};
use structprune::Tensor;

#[test]
fn masked_conv_matches_naive_oracle() {
    common::convcheck::masked_conv_matches_naive_oracle(500);
}

fn layer_specs() -> impl Strategy<Value = (Vec<LayerSpec>, usize)> {
    let conv = (1usize..9, prop::sample::select(vec![1usize, 3, 5])).prop_map(|(maps, k)| LayerSpec::Conv { maps, k });
    let block = prop::collection::vec(conv, 1..4);
    (prop::collection::vec((block, any::<bool>()), 1..4), prop::option::of(1usize..20), 2usize..11)
        .prop_map(|(blocks, fc, classes)| {
            let mut layers = Vec::new();
            let mut pools = 0;
            for (b, pool) in blocks {
                layers.extend(b);
                if pool {
                    layers.push(LayerSpec::MaxPool { window: 2, stride: 2 });
                    pools += 1;
                }
            }
            if let Some(units) = fc {
                layers.push(LayerSpec::Fc { units });
            }
            layers.push(LayerSpec::Softmax { classes });
            (layers, pools)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn architecture_renders_and_parses_back((layers, _) in layer_specs(), maps in 1usize..4) {
        let spec = NetworkSpec::from_layers([maps, 16, 16], Padding::Same, layers).unwrap();
        let text = spec.render();
        let again = NetworkSpec::parse_with_padding(&text, [maps, 16, 16], Padding::Same).unwrap();
        prop_assert_eq!(&again, &spec);
        prop_assert_eq!(again.render(), text);
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly((layers, _) in layer_specs(), seed in 0u64..1000, prune in prop::collection::vec((0usize..8, 0usize..8), 0..6)) {
        let spec = NetworkSpec::from_layers([2, 8, 8], Padding::Same, layers).unwrap();
        let mut net = Network::<f32>::initialize(&spec, seed).unwrap();
        if net.conv_count() > 0 {
            let conv = net.conv_mut(1).unwrap().conv_mut();
            for (o, i) in prune {
                if o < conv.out_maps() && i < conv.in_maps() {
                    conv.prune_connection(o, i);
                }
            }
        }
        let bytes = net.to_bytes().unwrap();
        let back = Network::<f32>::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        prop_assert_eq!(&back, &net);
        let wide = Network::<f64>::initialize(&spec, seed).unwrap();
        let b64 = wide.to_bytes().unwrap();
        prop_assert_eq!(Network::<f64>::from_bytes(&b64).unwrap(), wide);
        prop_assert!(Network::<f32>::from_bytes(&b64).is_err());
    }

    /// Integer-valued gradients make the sums exact in floating point.
    #[test]
    fn pooling_conserves_gradient(seed in 0u64..10_000, window in 1usize..4, stride in 1usize..4, h in 3usize..10, w in 3usize..10) {
        prop_assume!(window <= h && window <= w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // few distinct values so ties are common
        let x = Tensor::from_fn(vec![2, 2, h, w], |_| rng.gen_range(0..4) as f64);
        let (y, idx) = maxpool_forward(&x, window, stride).unwrap();
        let g = Tensor::from_fn(y.shape().to_vec(), |_| rng.gen_range(-50..50) as f64);
        let gx = maxpool_backward(&idx, &g).unwrap();
        prop_assert_eq!(gx.sum(), g.sum());
        for (o, &src) in idx.indices().iter().enumerate() {
            prop_assert_eq!(x.data()[src], y.data()[o]);
        }
    }

    #[test]
    fn sampled_counts_follow_the_requested_ratio(seed in 0u64..10_000, r2 in 0.0f64..=1.0, r3 in 0.0f64..=1.0, kernel in any::<bool>()) {
        let spec = NetworkSpec::parse("3x6C3-MP2-2x8C3-10", [1, 12, 12]).unwrap();
        let net = Network::<f32>::initialize(&spec, 1).unwrap();
        let g = if kernel { Granularity::Kernel } else { Granularity::FeatureMap };
        let req = MaskRequest::per_layer(g, vec![r2, r3, r3, r2], ConvRange::new(2, 5).unwrap()).unwrap().allow_orphans(true);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mask = match sample_mask(&net, &req, &mut rng) {
            Ok(m) => m,
            // pruning every map of a layer is refused
            Err(_) => { prop_assert!(!kernel && [r2, r3].iter().any(|&r| round_half_up(r * 8.0) == 8 || round_half_up(r * 6.0) == 6)); return Ok(()); }
        };
        mask.validate(&net).unwrap();
        for (l, ratio) in mask.layers.iter().zip(&req.ratios) {
            let m = l.candidates as f64;
            prop_assert!((l.pruned() as f64 - ratio * m).abs() <= 0.5 + 1e-9, "{} of {} at {}", l.pruned(), m, ratio);
        }
    }
}
