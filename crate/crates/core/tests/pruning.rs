mod common;

use common::nets::{exhaustive_half_of_eight, labelled, random_batch, random_net, rng, table_networks};
use rand::Rng;

use structprune::arch::{NetworkSpec, Padding};
use structprune::data::Dataset;
use structprune::layers::MacCounter;
use structprune::network::{ConvRange, Network};
use structprune::pruning::*;

#[test]
fn thin_network_equals_overlay_bit_for_bit() {
    for seed in 0..100 {
        let net = random_net(seed);
        let mut r = rng(1000 + seed);
        let ratio = r.gen_range(0.0..0.7);
        let range = if r.gen_bool(0.5) { ConvRange::all(&net) } else { ConvRange::new(2, 3).unwrap() };
        let req = MaskRequest::uniform(Granularity::FeatureMap, ratio, range);
        let mask = match sample_mask(&net, &req, &mut r) {
            Ok(m) if m.layers.iter().all(|l| l.maps.len() < l.candidates) => m,
            _ => continue,
        };
        let thin = apply_feature_map_mask(&net, &mask).unwrap();
        let x = random_batch(seed, 3, [2, 8, 8]);
        let ov = mask.to_overlay().prepare(&net).unwrap();
        let a = thin.forward(&x).unwrap();
        let b = net.forward_with(&x, Some(&ov), None).unwrap();
        assert_eq!(a.data(), b.data(), "seed {seed}");
        for c in range.iter() {
            let lm = mask.layer(c).unwrap();
            assert_eq!(thin.conv(c).unwrap().conv().out_maps(), lm.candidates - lm.maps.len());
        }
    }
}

#[test]
fn kernel_mask_equals_overlay_and_drops_exact_macs() {
    for seed in 0..50 {
        let net = random_net(seed);
        let mut r = rng(2000 + seed);
        let req = MaskRequest::uniform(Granularity::Kernel, r.gen_range(0.0..0.6), ConvRange::all(&net)).allow_orphans(true);
        let mask = sample_mask(&net, &req, &mut r).unwrap();
        let pruned = apply_kernel_mask(&net, &mask).unwrap();
        let x = random_batch(seed, 2, [2, 8, 8]);
        let ov = mask.to_overlay().prepare(&net).unwrap();
        let (ca, cb) = (MacCounter::new(), MacCounter::new());
        let a = pruned.forward_with(&x, None, Some(&ca)).unwrap();
        let b = net.forward_with(&x, Some(&ov), Some(&cb)).unwrap();
        assert_eq!(a.data(), b.data());
        let full = MacCounter::new();
        net.forward_with(&x, None, Some(&full)).unwrap();
        let mut delta = 0u64;
        for l in &mask.layers {
            let (h, w) = net.conv_output_hw(l.conv).unwrap();
            delta += (l.kernels.len() * h * w * 9) as u64;
        }
        assert_eq!(full.get() - ca.get(), 2 * delta);
        assert_eq!(ca.get(), cb.get());
        assert_eq!(ca.get(), 2 * pruned.count_macs(ConvRange::all(&pruned)).unwrap());
    }
}

#[test]
fn empty_masks_change_nothing() {
    let net = random_net(3);
    let range = ConvRange::all(&net);
    for g in [Granularity::FeatureMap, Granularity::Kernel] {
        let m = sample_mask(&net, &MaskRequest::uniform(g, 0.0, range), &mut rng(0)).unwrap();
        assert!(m.is_empty());
        assert_eq!(apply_mask(&net, &m).unwrap(), net);
        let val = labelled(&net, 40, 9);
        assert_eq!(evaluate_mask(&net, &m, &val).unwrap(), net.evaluate(&val).unwrap());
    }
}

#[test]
fn overlay_mcr_matches_physical_copy() {
    for seed in 0..20 {
        let net = random_net(seed);
        let val = labelled(&net, 60, seed);
        let mut r = rng(seed);
        for g in [Granularity::FeatureMap, Granularity::Kernel] {
            let req = MaskRequest::uniform(g, 0.4, ConvRange::new(2, 3).unwrap());
            let mask = sample_mask(&net, &req, &mut r).unwrap();
            let pruned = apply_mask(&net, &mask).unwrap();
            assert_eq!(evaluate_mask(&net, &mask, &val).unwrap(), pruned.evaluate(&val).unwrap());
        }
    }
}

#[test]
fn all_maps_of_a_layer_gives_chance_level() {
    let spec = NetworkSpec::parse_with_padding("3C3-4C3-10", [1, 6, 6], Padding::Same).unwrap();
    let net = Network::<f64>::initialize(&spec, 2).unwrap();
    let x = random_batch(5, 100, [1, 6, 6]);
    let val = Dataset::new(x, (0..100).map(|i| i % 10).collect(), 10).unwrap();
    let req = MaskRequest::uniform(Granularity::FeatureMap, 1.0, ConvRange::single(2).unwrap());
    let mask = sample_mask(&net, &req, &mut rng(0)).unwrap();
    assert_eq!(mask.pruned(), 4);
    assert_eq!(evaluate_mask(&net, &mask, &val).unwrap().mcr, 90.0);
    assert!(apply_feature_map_mask(&net, &mask).is_err());
}

#[test]
fn orphaned_map_outputs_its_bias_constant() {
    let spec = NetworkSpec::parse_with_padding("3C3-4C3-2", [1, 5, 5], Padding::Same).unwrap();
    let mut net = Network::<f64>::initialize(&spec, 8).unwrap();
    net.conv_mut(2).unwrap().conv_mut().biases_mut()[1] = 0.7;
    let mask = PruningMask {
        granularity: Granularity::Kernel,
        layer_range: ConvRange::single(2).unwrap(),
        ratio: None,
        layers: vec![LayerMask {
            conv: 2,
            ratio: 0.25,
            candidates: 12,
            maps: vec![],
            kernels: vec![(0, 1), (1, 1), (2, 1)],
        }],
        seed: None,
        candidate: None,
        allow_orphans: false,
    };
    assert!(apply_kernel_mask(&net, &mask).is_err());
    let pruned = apply_kernel_mask(&net, &PruningMask { allow_orphans: true, ..mask }).unwrap();
    let x = random_batch(1, 2, [1, 5, 5]);
    let act = pruned.forward_segment(&x, 0..2, None, None).unwrap();
    let bn = pruned.conv(2).unwrap().bn();
    let expect = ((0.7 - bn.running_mean()[1]) / (bn.running_var()[1] + bn.epsilon()).sqrt() * bn.gamma()[1] + bn.beta()[1])
        .max(0.0);
    for s in 0..2 {
        for v in &act.outer_slice(s)[25..50] {
            assert!((v - expect).abs() < 1e-12);
        }
    }
}

#[test]
fn best_of_n_matches_exhaustive_search() {
    let (best, count, sel) = exhaustive_half_of_eight(2000, false);
    assert_eq!(count, 70);
    assert_eq!(sel, best);
    // 70 distinct draws cover the whole space
    let (best, _, dedup) = exhaustive_half_of_eight(70, true);
    assert_eq!(dedup, best);
}

#[test]
fn selection_is_min_and_thread_count_invariant() {
    let net = random_net(7);
    let val = labelled(&net, 120, 7);
    let req = MaskRequest::uniform(Granularity::Kernel, 0.5, ConvRange::new(2, 3).unwrap());
    let base = SelectOptions { candidates: 24, seed: 5, ..Default::default() };
    let one = select_best_of_n(&net, &val, &req, &SelectOptions { workers: Some(1), ..base.clone() }).unwrap();
    let four = select_best_of_n(&net, &val, &req, &SelectOptions { workers: Some(4), ..base.clone() }).unwrap();
    let uncached = select_best_of_n(&net, &val, &req, &SelectOptions { prefix_cache_limit: 0, ..base.clone() }).unwrap();
    assert_eq!(one, four);
    assert_eq!(one, uncached);
    let min = one.all_mcrs.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(one.mcr(), min);
    assert_eq!(one.all_mcrs.iter().position(|&m| m == min), Some(one.index));
    assert_eq!(one.mask.candidate, Some(one.index));
    let masks = generate_candidates(&net, &req, &base).unwrap();
    assert_eq!(masks[one.index], one.mask);
    assert_eq!(evaluate_mask(&net, &one.mask, &val).unwrap().mcr, one.mcr());

    let single = select_best_of_n(&net, &val, &req, &SelectOptions { candidates: 1, ..base.clone() }).unwrap();
    assert_eq!(single.mask, masks[0]);
    assert!(select_best_of_n(&net, &val, &req, &SelectOptions { candidates: 0, ..base }).is_err());
}

#[test]
fn weight_sum_matches_sort_oracle_and_ignores_scale() {
    for seed in 0..30 {
        let mut net = random_net(seed);
        let ratio = rng(seed).gen_range(0.0..1.0);
        let range = ConvRange::all(&net);
        let mask = weight_sum_select(&net, ratio, range).unwrap();
        for c in range.iter() {
            let conv = net.conv(c).unwrap().conv();
            let per_map = conv.kernels().len() / conv.out_maps();
            let mut scored: Vec<(f64, usize)> = conv
                .kernels()
                .data()
                .chunks(per_map)
                .map(|k| k.iter().map(|v| v.abs()).sum())
                .zip(0..)
                .collect();
            scored.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let n = (ratio * conv.out_maps() as f64 + 0.5).floor() as usize;
            let mut expect: Vec<usize> = scored[..n].iter().map(|s| s.1).collect();
            expect.sort();
            assert_eq!(mask.layer(c).unwrap().maps, expect);
        }
        let c = 1 + seed as usize % 3;
        let factor = 0.01 + 10.0 * rng(seed + 99).gen::<f64>();
        let layer = net.conv_mut(c).unwrap().conv_mut();
        let (o, i) = (layer.out_maps(), layer.in_maps());
        for a in 0..o {
            for b in 0..i {
                layer.kernel_mut(a, b).iter_mut().for_each(|v| *v *= factor);
            }
        }
        assert_eq!(weight_sum_select(&net, ratio, range).unwrap(), mask);
    }
}

#[test]
fn weight_sum_hand_cases() {
    let spec = NetworkSpec::parse_with_padding("2C1-3C1-2", [1, 2, 2], Padding::Same).unwrap();
    let mut net = Network::<f64>::initialize(&spec, 0).unwrap();
    let layer = net.conv_mut(2).unwrap().conv_mut();
    for (o, s) in [5.0, 2.0, 7.0].into_iter().enumerate() {
        layer.kernel_mut(o, 0)[0] = s / 2.0;
        layer.kernel_mut(o, 1)[0] = -s / 2.0;
    }
    let m = weight_sum_select(&net, 1.0 / 3.0, ConvRange::single(2).unwrap()).unwrap();
    assert_eq!(m.layers[0].maps, vec![1]);
    net.conv_mut(2).unwrap().conv_mut().kernel_mut(2, 0)[0] = 0.0;
    net.conv_mut(2).unwrap().conv_mut().kernel_mut(2, 1)[0] = 0.0;
    let m = weight_sum_select(&net, 1.0 / 3.0, ConvRange::single(2).unwrap()).unwrap();
    assert_eq!(m.layers[0].maps, vec![2]);
}

#[test]
fn candidate_counts() {
    let small = NetworkSpec::parse("2x128C3-MP2-2x128C3-MP2-2x256C3-256FC-10Softmax", [3, 32, 32]).unwrap();
    let net = Network::<f32>::initialize(&small, 0).unwrap();
    let range = ConvRange::new(2, 6).unwrap();
    assert_eq!(enumerate_candidates(&net, Granularity::Kernel, range).unwrap(), 147_456);
    assert_eq!(enumerate_candidates(&net, Granularity::FeatureMap, range).unwrap(), 896);
    let mnist = NetworkSpec::parse_with_padding("1x6(C5)-6x16(C5)-16x120(C5)-84-10", [1, 28, 28], Padding::Valid).unwrap();
    let m = Network::<f32>::initialize(&mnist, 0).unwrap();
    assert_eq!(enumerate_candidates(&m, Granularity::Kernel, ConvRange::single(2).unwrap()).unwrap(), 96);
}

/// Per-layer fmap counts 39/128 and 77/256, then kernel counts of the
/// published table, applied to the full-size network.
#[test]
fn table_accounting_on_the_cifar_network() {
    let (net, after) = table_networks();
    let range = ConvRange::new(2, 6).unwrap();
    let expected_spec =
        NetworkSpec::parse("(128C3-89C3)-MP-(89C3-89C3)-MP-(179C3-179C3)-256FC-10Softmax", [3, 32, 32]).unwrap();
    assert_eq!(after.spec(), &expected_spec);
    let thin = Network::<f32>::initialize(after.spec(), 0).unwrap();
    assert_eq!(enumerate_candidates(&thin, Granularity::Kernel, range).unwrap(), 75_206);
    let rep = pruning_report(&net, &after, range).unwrap();
    let got: Vec<(usize, usize)> = rep.layers.iter().map(|l| (l.kernel_conn, l.pruned_kernels)).collect();
    assert_eq!(got, vec![(11392, 3034), (7921, 2078), (7921, 2078), (15931, 4209), (32041, 8539)]);
    let shown: Vec<String> = rep.layers.iter().map(|l| format!("{:.1}", truncate_tenth(l.kernel_prune_pct))).collect();
    assert_eq!(shown, vec!["26.6", "26.2", "26.2", "26.4", "26.6"]);
    let fmap: Vec<String> = rep.layers.iter().map(|l| format!("{:.1}", l.fmap_pruned_pct)).collect();
    assert_eq!(fmap, vec!["30.5", "30.5", "30.5", "30.1", "30.1"]);
    // grid reduction 1 - out_a*in_a / (out_b*in_b), checked as exact fractions
    let grid: Vec<f64> = rep.layers.iter().map(|l| l.grid_pruned_pct).collect();
    let exact = [1.0 - 11392.0 / 16384.0, 1.0 - 7921.0 / 16384.0, 1.0 - 7921.0 / 16384.0, 1.0 - 15931.0 / 32768.0, 1.0 - 32041.0 / 65536.0];
    for (g, e) in grid.iter().zip(exact) {
        assert!((g - 100.0 * e).abs() < 1e-9, "{g} vs {e}");
    }
    let shown: Vec<String> = grid.iter().map(|g| format!("{g:.1}")).collect();
    assert_eq!(shown, vec!["30.5", "51.7", "51.7", "51.4", "51.1"]);
    // independent arithmetic: 9 * (75206 - 19938) of 9 * 147456 weights remain
    assert_eq!(rep.weights_before, 9 * 147_456);
    assert_eq!(rep.weights_after, 9 * (75_206 - 19_938));
    assert!((rep.weight_prune_pct - 100.0 * (1.0 - 55_268.0 / 147_456.0)).abs() < 1e-9);
    let table = rep.to_table();
    assert!(table.contains("C2 (128x89)"), "{table}");
    assert!(PruneReport::to_json(&rep).unwrap().contains("\"pruned_kernels\": 3034"));
}

#[test]
fn report_counts_match_tensor_scans() {
    for seed in 0..25 {
        let net = random_net(seed);
        let mut r = rng(seed + 500);
        let range = ConvRange::new(2, 3).unwrap();
        let fm = MaskRequest::uniform(Granularity::FeatureMap, r.gen_range(0.0..0.5), range);
        let thin = apply_mask(&net, &sample_mask(&net, &fm, &mut r).unwrap()).unwrap();
        let km = MaskRequest::uniform(Granularity::Kernel, r.gen_range(0.0..0.5), range).allow_orphans(true);
        let after = apply_mask(&thin, &sample_mask(&thin, &km, &mut r).unwrap()).unwrap();
        let rep = pruning_report(&net, &after, range).unwrap();
        for l in &rep.layers {
            let conv = after.conv(l.conv).unwrap().conv();
            let kk = 9;
            let nonzero = conv.kernels().data().chunks(kk).filter(|k| k.iter().any(|v| *v != 0.0)).count();
            let zero = conv.kernels().data().chunks(kk).count() - nonzero;
            assert_eq!(l.active_after, nonzero);
            assert_eq!(l.pruned_kernels, zero);
            assert_eq!(l.weights_after, (nonzero * kk) as u64);
            let before = net.conv(l.conv).unwrap().conv();
            assert_eq!(l.out_maps_after, conv.out_maps());
            assert_eq!(l.weights_before, (before.kernels().len()) as u64);
        }
        assert!(pruning_report(&net, &net, range).unwrap().is_identity());
    }
}

#[test]
fn combined_with_zero_ratios_is_identity() {
    let net = random_net(4);
    let data = labelled(&net, 30, 1);
    let (out, rep, log) = combined_prune(&net, 0.0, 0.0, &data, &data, &PruneConfig::default()).unwrap();
    assert_eq!(out, net);
    assert!(rep.is_identity());
    assert_eq!(rep.weight_prune_pct, 0.0);
    assert!(log.records.is_empty());
}

#[test]
fn iterative_steps_reach_the_same_counts() {
    let net = random_net(11);
    let data = labelled(&net, 40, 2);
    let req = MaskRequest::uniform(Granularity::Kernel, 0.5, ConvRange::new(2, 3).unwrap());
    let cfg = PruneConfig {
        steps: 3,
        select: SelectOptions { candidates: 4, ..Default::default() },
        retrain: structprune::trainer::TrainConfig { epochs: 0, ..Default::default() },
        ..Default::default()
    };
    let staged = prune_stage(&net, &req, &data, &data, &cfg, "kernel").unwrap();
    let once = prune_stage(&net, &req, &data, &data, &PruneConfig { steps: 1, ..cfg }, "kernel").unwrap();
    assert_eq!(staged.masks.len(), 3);
    for c in 2..=3 {
        assert_eq!(
            staged.net.conv(c).unwrap().conv().active_connections(),
            once.net.conv(c).unwrap().conv().active_connections()
        );
    }
}
