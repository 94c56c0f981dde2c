use std::collections::BTreeMap;

use proptest::prelude::*;

use bsmamba::hierarchy::{
    histogram_score, luma, semantic_map, semantic_ranges, sort_plan_from_keys, Instance, InstanceMaskSet,
};
use bsmamba::losses::{total_loss, LossWeights};
use bsmamba::metrics::{psnr, ssim};
use bsmamba::model::{Model, ModelConfig};
use bsmamba::nn::ParamStore;
use bsmamba::pipeline::augment::Augment;
use bsmamba::pipeline::checkpoint;
use bsmamba::pipeline::config::TrainConfig;
use bsmamba::pipeline::pgm::{self, Pgm};
use bsmamba::ssm::{random_weights, selective_scan, selective_scan_oracle};
use bsmamba::tensor::fft::{fft2, irfft2_plane, rfft2_plane};
use bsmamba::tensor::{Graph, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn keys(max: usize) -> impl Strategy<Value = Vec<f64>> {
    // few distinct levels on half the cases so ties are common
    (1..max, any::<bool>()).prop_flat_map(|(n, coarse)| {
        let level = if coarse { 0u32..4 } else { 0u32..1_000_000 };
        prop::collection::vec(level.prop_map(|v| v as f64 / 1e6), n)
    })
}

fn unit_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, n)
}

/// Naive broadcasting add over right-aligned shapes.
fn broadcast_add(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
    let (sa, sb) = (a.shape(), b.shape());
    let nd = sa.len().max(sb.len());
    let pad = |s: &[usize]| -> Vec<usize> { std::iter::repeat_n(1, nd - s.len()).chain(s.iter().copied()).collect() };
    let (pa, pb) = (pad(sa), pad(sb));
    let out: Vec<usize> = pa.iter().zip(&pb).map(|(x, y)| *x.max(y)).collect();
    let flat = |idx: &[usize], s: &[usize]| {
        idx.iter()
            .zip(s)
            .fold(0, |acc, (i, d)| acc * d + if *d == 1 { 0 } else { *i })
    };
    Tensor::from_fn(&out, |mut k| {
        let mut idx = vec![0; nd];
        for d in (0..nd).rev() {
            idx[d] = k % out[d];
            k /= out[d];
        }
        a.data()[flat(&idx, &pa)] + b.data()[flat(&idx, &pb)]
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sort_plan_round_trips(k in keys(300)) {
        let plan = sort_plan_from_keys(&k).unwrap();
        let sorted = plan.apply(&k);
        prop_assert!(sorted.windows(2).all(|w| w[0] <= w[1]));
        prop_assert_eq!(plan.undo(&sorted), k.clone());
        let idx: Vec<usize> = (0..k.len()).collect();
        prop_assert_eq!(plan.apply(&plan.undo(&idx)), idx);
        for (pos, &src) in plan.forward_index().iter().enumerate() {
            prop_assert_eq!(plan.inverse_index()[src], pos);
        }
        // equal keys keep raster order
        for w in plan.forward_index().windows(2) {
            if k[w[0]] == k[w[1]] {
                prop_assert!(w[0] < w[1]);
            }
        }
    }

    #[test]
    fn constant_keys_give_identity(n in 1usize..500, v in 0.0f64..1.0) {
        prop_assert!(sort_plan_from_keys(&vec![v; n]).unwrap().is_identity());
    }

    #[test]
    fn semantic_ranges_tile_unit_interval(n in 0usize..40) {
        let r = semantic_ranges(n);
        prop_assert_eq!(r.len(), n + 1);
        prop_assert_eq!(r[0].0, 0.0);
        prop_assert_eq!(r[n].1, 1.0);
        for (i, w) in r.windows(2).enumerate() {
            prop_assert_eq!(w[0].1, w[1].0, "gap after range {}", i);
        }
    }

    #[test]
    fn semantic_values_stay_in_their_range(
        (h, w, masks, scores) in (1usize..8, 1usize..8, 1usize..4).prop_flat_map(|(h, w, n)| {
            (Just(h), Just(w), prop::collection::vec(unit_vec(h * w), n), unit_vec(n))
        })
    ) {
        let n = masks.len();
        let inst: Vec<Instance> = masks
            .iter()
            .zip(&scores)
            .enumerate()
            .map(|(i, (m, &s))| Instance { id: i as u32 + 1, score: s, mask: m.clone() })
            .collect();
        let set = InstanceMaskSet::new(h, w, inst).unwrap();
        let map = semantic_map(&set).unwrap();
        let d = (n + 1) as f64;
        for (p, &v) in map.values().iter().enumerate() {
            prop_assert!((0.0..=1.0).contains(&v));
            let covered = masks.iter().any(|m| m[p] > 0.0);
            if !covered {
                prop_assert_eq!(v, 0.5 / d);
            } else {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
                let top = order.iter().rposition(|&i| masks[i][p] > 0.0).unwrap();
                let lo = (top + 1) as f64 / d;
                prop_assert!(v >= lo - 1e-15 && v <= lo + 1.0 / d + 1e-15, "pixel {} value {}", p, v);
            }
        }
    }

    #[test]
    fn histogram_score_is_monotone_in_luma(vals in unit_vec(3 * 36)) {
        let img = Tensor::new(&[3, 6, 6], vals).unwrap();
        let y = luma(&img).unwrap();
        let s = histogram_score(&img, 256).unwrap();
        for i in 0..36 {
            for j in 0..36 {
                if y[i] < y[j] {
                    prop_assert!(s.values()[i] <= s.values()[j]);
                }
            }
        }
        prop_assert!(s.values().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn broadcast_add_matches_naive(
        (a, b) in (1usize..4, 1usize..4, 1usize..5, 0usize..4).prop_flat_map(|(x, y, z, mode)| {
            let bs = match mode { 0 => vec![z], 1 => vec![y, 1], 2 => vec![x, 1, z], _ => vec![x, y, z] };
            let nb: usize = bs.iter().product();
            (prop::collection::vec(-1.0f64..1.0, x * y * z).prop_map(move |v| Tensor::new(&[x, y, z], v).unwrap()),
             prop::collection::vec(-1.0f64..1.0, nb).prop_map(move |v| Tensor::new(&bs, v).unwrap()))
        })
    ) {
        let g = Graph::new();
        let got = g.constant(a.clone()).add(&g.constant(b.clone())).unwrap().value();
        let want = broadcast_add(&a, &b);
        prop_assert_eq!(got.data(), want.data());
    }

    #[test]
    fn fft_round_trip_and_parseval(logh in 1u32..5, logw in 1u32..5, seed in any::<u64>()) {
        let (h, w) = (1usize << logh, 1usize << logw);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..h * w).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
        let (mut re, mut im) = (x.clone(), vec![0.0; h * w]);
        fft2(&mut re, &mut im, h, w, false);
        let e: f64 = x.iter().map(|v| v * v).sum();
        let s: f64 = re.iter().zip(&im).map(|(a, b)| a * a + b * b).sum::<f64>() / (h * w) as f64;
        prop_assert!((e - s).abs() < 1e-9);
        let (hr, hi) = rfft2_plane(&x, h, w);
        for (a, b) in irfft2_plane(&hr, &hi, h, w).iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn scan_matches_oracle(b in 1usize..3, l in 1usize..64, c in 1usize..4, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = random_weights::<f64, _>(&mut rng, c, n);
        let x = Tensor::from_fn(&[b, l, c], |_| rand::Rng::random_range(&mut rng, -2.0..2.0));
        let d = selective_scan(&x, &w).unwrap().max_abs_diff(&selective_scan_oracle(&x, &w).unwrap());
        prop_assert!(d <= 1e-10, "diff {}", d);
    }

    #[test]
    fn augment_keeps_pairs_aligned(seed in any::<u64>(), h in 16usize..24, w in 16usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = Augment::draw(&mut rng, h, w, 16).unwrap();
        let img = Tensor::<f64>::from_fn(&[3, h, w], |i| i as f64);
        let out = a.tensor(&img).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let (sy, sx) = a.source(y, x);
                prop_assert_eq!(out.at(&[1, y, x]), img.at(&[1, sy, sx]));
            }
        }
    }

    #[test]
    fn weighted_loss_is_linear(l1 in 0.0f64..2.0, l2 in 0.0f64..2.0, l3 in 0.0f64..2.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || Tensor::<f64>::from_fn(&[1, 3, 16, 16], |_| rand::Rng::random_range(&mut rng, 0.0..1.0));
        let (p, t) = (img(), img());
        let g = Graph::new();
        let w = LossWeights::from_array([l1, l2, l3]).unwrap();
        let parts = total_loss(g.constant(p), g.constant(t), &w, None).unwrap();
        let expect = l1 * parts.l1.value().item() + l2 * parts.ssim_loss.value().item() + l3 * parts.edge.value().item();
        prop_assert!((parts.total.value().item() - expect).abs() < 1e-12);
    }

    #[test]
    fn metrics_are_symmetric(a in unit_vec(3 * 16 * 16), b in unit_vec(3 * 16 * 16)) {
        let (a, b) = (Tensor::new(&[3, 16, 16], a).unwrap(), Tensor::new(&[3, 16, 16], b).unwrap());
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pgm_round_trips(w in 1usize..20, h in 1usize..20, maxval in 1u16..=65535, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..w * h).map(|_| rand::Rng::random_range(&mut rng, 0..=maxval)).collect();
        let img = Pgm::new(w, h, maxval, data).unwrap();
        let back = pgm::decode(&pgm::encode(&img), std::path::Path::new("mem")).unwrap();
        prop_assert_eq!(back, img);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn checkpoint_round_trips_and_detects_corruption(seed in any::<u64>(), flip in any::<prop::sample::Index>()) {
        let cfg = ModelConfig { channels: 8, denet_width: 8, ..ModelConfig::default() };
        let model = Model::new(cfg.clone()).unwrap();
        let params: ParamStore<f64> = model.init(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = checkpoint::encode(&cfg, &params).unwrap();
        let (cfg2, p2) = checkpoint::decode::<f64>(&bytes).unwrap();
        prop_assert_eq!(cfg2, cfg);
        prop_assert!(p2 == params);
        let mut bad = bytes.clone();
        let i = flip.index(bad.len());
        bad[i] ^= 0x40;
        prop_assert!(checkpoint::decode::<f64>(&bad).is_err());
    }

    #[test]
    fn config_text_round_trips(lr in 1e-6f64..1e-1, iters in 1usize..10_000, seed in any::<u64>(), comp in 0usize..5) {
        let mut cfg = TrainConfig { learning_rate: lr, iterations: iters, seed, ..TrainConfig::default() };
        cfg.model.composition = bsmamba::backbone::Composition::ALL[comp];
        prop_assert_eq!(TrainConfig::from_text(&cfg.to_text()).unwrap(), cfg);
    }
}

#[test]
fn soft_masks_override_labels() {
    let soft = BTreeMap::from([(2u32, vec![0.25; 4])]);
    let set = InstanceMaskSet::from_labels(2, 2, &[1, 0, 2, 1], &[(1, 0.9), (2, 0.5)], &soft).unwrap();
    assert_eq!(set.instances()[0].mask, vec![1.0, 0.0, 0.0, 1.0]);
    assert_eq!(set.instances()[1].mask, vec![0.25; 4]);
}
