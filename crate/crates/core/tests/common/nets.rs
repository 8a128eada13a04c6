//! Small random networks, teacher-labelled data, and the pruning oracles
//! that need them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use structprune::arch::{NetworkSpec, Padding};
use structprune::data::Dataset;
use structprune::network::{ConvRange, Network};
use structprune::pruning::*;
use structprune::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random small net with perturbed biases and batch-norm statistics so that
/// pruned maps carry non-trivial constants.
pub fn random_net(seed: u64) -> Network<f64> {
    let mut r = rng(seed);
    let w: Vec<usize> = (0..3).map(|_| r.gen_range(2..6)).collect();
    let fc = r.gen_range(3..7);
    let arch = if r.gen_bool(0.5) {
        format!("{}C3-{}C3-MP2-{}C3-{fc}FC-4", w[0], w[1], w[2])
    } else {
        format!("{}C3-{}C3-{}C3-4", w[0], w[1], w[2])
    };
    let spec = NetworkSpec::parse_with_padding(&arch, [2, 8, 8], Padding::Same).unwrap();
    let mut net = Network::initialize(&spec, seed).unwrap();
    let z = Normal::<f64>::new(0.0, 0.5).unwrap();
    for c in 1..=3 {
        let b = net.conv_mut(c).unwrap();
        for v in b.conv_mut().biases_mut() {
            *v = z.sample(&mut r);
        }
        for v in b.bn_mut().beta_mut() {
            *v = z.sample(&mut r);
        }
        for v in b.bn_mut().gamma_mut() {
            *v = 1.0 + z.sample(&mut r);
        }
        for v in b.bn_mut().running_mean_mut() {
            *v = z.sample(&mut r);
        }
        for v in b.bn_mut().running_var_mut() {
            *v = 0.5 + z.sample(&mut r).abs();
        }
    }
    net
}

pub fn random_batch(seed: u64, n: usize, shape: [usize; 3]) -> Tensor<f64> {
    let mut r = rng(seed);
    Tensor::from_fn(vec![n, shape[0], shape[1], shape[2]], |_| r.gen_range(-1.0..1.0))
}

/// Labels from a different random network, so MCRs spread out.
pub fn labelled(net: &Network<f64>, n: usize, seed: u64) -> Dataset<f64> {
    let x = random_batch(seed, n, net.spec().input_shape());
    let teacher = Network::<f64>::initialize(net.spec(), seed ^ 0xabc).unwrap();
    let labels = teacher.predict(&x).unwrap();
    Dataset::new(x, labels, net.spec().classes()).unwrap()
}

/// Evaluates `pairs` random masks per granularity through the overlay and on
/// the physically pruned copy; returns the first disagreement.
pub fn overlay_matches_apply(pairs: u64) -> Result<(), String> {
    for seed in 0..pairs {
        let net = random_net(seed);
        let val = labelled(&net, 60, seed);
        let mut r = rng(seed);
        for g in [Granularity::FeatureMap, Granularity::Kernel] {
            let ratio = r.gen_range(0.1..0.7);
            let req = MaskRequest::uniform(g, ratio, ConvRange::new(2, 3).unwrap()).allow_orphans(true);
            let mask = sample_mask(&net, &req, &mut r).map_err(|e| e.to_string())?;
            let pruned = apply_mask(&net, &mask).map_err(|e| e.to_string())?;
            let overlay = evaluate_mask(&net, &mask, &val).map_err(|e| e.to_string())?;
            let physical = pruned.evaluate(&val).map_err(|e| e.to_string())?;
            if overlay != physical {
                return Err(format!("seed {seed} {g}: overlay {overlay:?} vs applied {physical:?}"));
            }
        }
    }
    Ok(())
}

/// Tiny net whose Conv2 has 2 x 4 = 8 connections: returns the exhaustive
/// minimum over all C(8,4) = 70 half-masks, their count, and what best-of-N
/// with `candidates` draws returns.
pub fn exhaustive_half_of_eight(candidates: usize, dedup: bool) -> (f64, usize, f64) {
    let spec = NetworkSpec::parse_with_padding("2C3-4C3-3", [1, 6, 6], Padding::Same).unwrap();
    let net = Network::<f64>::initialize(&spec, 21).unwrap();
    let val = labelled(&net, 80, 4);
    let range = ConvRange::single(2).unwrap();
    let mut best = f64::INFINITY;
    let mut count = 0;
    for bits in 0u32..256 {
        if bits.count_ones() != 4 {
            continue;
        }
        count += 1;
        let kernels: Vec<(usize, usize)> = (0..8).filter(|b| bits >> b & 1 == 1).map(|b| (b % 2, b / 2)).collect();
        let m = PruningMask {
            granularity: Granularity::Kernel,
            layer_range: range,
            ratio: Some(0.5),
            layers: vec![LayerMask { conv: 2, ratio: 0.5, candidates: 8, maps: vec![], kernels }],
            seed: None,
            candidate: None,
            allow_orphans: true,
        };
        best = best.min(evaluate_mask(&net, &m, &val).unwrap().mcr);
    }
    let req = MaskRequest::uniform(Granularity::Kernel, 0.5, range).allow_orphans(true);
    let opts = SelectOptions { candidates, seed: 1, dedup, ..Default::default() };
    let sel = select_best_of_n(&net, &val, &req, &opts).unwrap();
    (best, count, sel.mcr())
}

pub const CNN_SMALL: &str = "2x128C3-MP2-2x128C3-MP2-2x256C3-256FC-10Softmax";
pub const TABLE_CONN: [usize; 5] = [11392, 7921, 7921, 15931, 32041];
pub const TABLE_PRUNED: [usize; 5] = [3034, 2078, 2078, 4209, 8539];

/// CNN_small thinned to 128-89-89-89-179-179 maps and then kernel-pruned to
/// the published per-layer counts; returns (original, pruned).
pub fn table_networks() -> (Network<f32>, Network<f32>) {
    let small = NetworkSpec::parse(CNN_SMALL, [3, 32, 32]).unwrap();
    let net = Network::<f32>::initialize(&small, 0).unwrap();
    let range = ConvRange::new(2, 6).unwrap();
    let fm = MaskRequest::per_layer(
        Granularity::FeatureMap,
        vec![39.0 / 128.0, 39.0 / 128.0, 39.0 / 128.0, 77.0 / 256.0, 77.0 / 256.0],
        range,
    )
    .unwrap();
    let thin = apply_mask(&net, &sample_mask(&net, &fm, &mut rng(0)).unwrap()).unwrap();
    let ratios = TABLE_PRUNED.iter().zip(&TABLE_CONN).map(|(&p, &c)| p as f64 / c as f64).collect();
    let km = MaskRequest::per_layer(Granularity::Kernel, ratios, range).unwrap();
    let after = apply_mask(&thin, &sample_mask(&thin, &km, &mut rng(1)).unwrap()).unwrap();
    (net, after)
}
