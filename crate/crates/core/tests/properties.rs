use proptest::prelude::*;
use refinery::filter::{
    build_partition, detect_by_register, detect_fixed_pattern, detect_global_proxy,
    detect_hijackee_abs, detect_hijackee_rel, hijack_scores,
};
use refinery::image::Image;
use refinery::io::{decode_atrc, decode_fmap, encode_atrc, encode_fmap};
use refinery::numerics::{cosine, softmax_rows, Rng, Tensor};
use refinery::vit::{
    forward, inject_register_bias, make_register_layout, AttentionTrace, FeatureMap, ModelState,
    ViTConfig,
};

const CASES: u32 = 256;

fn tensor(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
    let mut rng = Rng::new(seed);
    Tensor::new(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.normal()).collect(),
    )
    .unwrap()
}

fn fmap(rows: usize, cols: usize, dim: usize, seed: u64) -> FeatureMap<f64> {
    FeatureMap::new(rows, cols, tensor(rows * cols, dim, seed)).unwrap()
}

fn random_trace(
    layers: usize,
    heads: usize,
    t: usize,
    temp: f64,
    seed: u64,
) -> AttentionTrace<f64> {
    let mut rng = Rng::new(seed);
    let ls = (0..layers)
        .map(|_| {
            (0..heads)
                .map(|_| {
                    let logits = Tensor::new(
                        vec![t, t],
                        (0..t * t).map(|_| temp * rng.normal()).collect(),
                    )
                    .unwrap();
                    softmax_rows(&logits).unwrap()
                })
                .collect()
        })
        .collect();
    AttentionTrace::new(ls).unwrap()
}

fn is_subset(a: &[usize], b: &[usize]) -> bool {
    a.iter().all(|i| b.contains(i))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    #[test]
    fn forward_attention_rows_are_stochastic(seed in any::<u64>(), heads in 1usize..3, depth in 1usize..3, side in 1usize..4) {
        let cfg = ViTConfig { img_size: 4 * side, patch_size: 4, dim: 8, heads, depth, ..ViTConfig::default() };
        let mut rng = Rng::new(seed);
        let model = ModelState::<f64>::init(&cfg, &mut rng).unwrap();
        let img = Image::new(cfg.img_size, cfg.img_size, 3, (0..cfg.img_size * cfg.img_size * 3).map(|_| rng.normal()).collect()).unwrap();
        let (_, trace) = forward(&model, &img, true).unwrap();
        let trace = trace.unwrap();
        for l in 0..trace.num_layers() {
            for h in 0..trace.heads() {
                let m = trace.matrix(l, h);
                for i in 0..m.rows() {
                    let s: f64 = m.row(i).iter().sum();
                    prop_assert!((s - 1.0).abs() <= 1e-12, "row sum {}", s);
                    prop_assert!(m.row(i).iter().all(|&v| v >= 0.0));
                }
            }
        }
    }

    #[test]
    fn hijack_mass_equals_query_count(seed in any::<u64>(), t in 2usize..24, layers in 1usize..4, heads in 1usize..4, temp in 0.1f64..8.0) {
        let trace = random_trace(layers, heads, t, temp, seed);
        let mut rng = Rng::new(seed ^ 0x5eed);
        let q = 1 + rng.below(t);
        let queries = rng.sample_indices(t, q);
        let all: Vec<usize> = (0..t).collect();
        let h = hijack_scores(&trace, &queries, &all).unwrap();
        prop_assert!((h.total() - q as f64).abs() <= 1e-6, "mass {} vs {}", h.total(), q);
    }

    #[test]
    fn cosine_ignores_positive_scale(seed in any::<u64>(), d in 1usize..16, a in 1e-3f64..1e3, b in 1e-3f64..1e3) {
        let x = tensor(2, d, seed);
        let (u, v) = (x.row(0).to_vec(), x.row(1).to_vec());
        let su: Vec<f64> = u.iter().map(|e| a * e).collect();
        let sv: Vec<f64> = v.iter().map(|e| b * e).collect();
        prop_assert!((cosine(&u, &v) - cosine(&su, &sv)).abs() <= 1e-12);
    }

    #[test]
    fn detectors_ignore_token_scale(seed in any::<u64>(), side in 2usize..5, tau in 0.1f64..1.0, s in 0.01f64..100.0) {
        let dim = 4;
        let z = fmap(side, side, dim, seed);
        let mut rng = Rng::new(seed ^ 1);
        let r = fmap(side, side, dim, rng.next_seed());
        let scaled = FeatureMap::new(side, side, z.tokens().scale(s)).unwrap();
        prop_assert_eq!(detect_fixed_pattern(&z, &r, tau).unwrap(), detect_fixed_pattern(&scaled, &r, tau).unwrap());
        let regs = tensor(3, dim, rng.next_seed());
        prop_assert_eq!(detect_by_register(&z, &regs, None, tau).unwrap(), detect_by_register(&scaled, &regs, None, tau).unwrap());
    }

    #[test]
    fn similarity_rules_shrink_as_thresholds_rise(seed in any::<u64>(), side in 2usize..5, lo in 0.05f64..0.9, gap in 0.0f64..0.5) {
        let hi = (lo + gap).min(1.0);
        let dim = 3;
        let z = fmap(side, side, dim, seed);
        let r = fmap(side, side, dim, seed.wrapping_add(1));
        prop_assert!(is_subset(&detect_fixed_pattern(&z, &r, hi).unwrap(), &detect_fixed_pattern(&z, &r, lo).unwrap()));
        let cat = fmap(side, 2 * side, dim, seed.wrapping_add(2));
        let (src, rf) = refinery::filter::composite_regions(side, refinery::image::Axis::Horizontal);
        let g_lo = detect_global_proxy(&cat, &r, &src, &rf, lo, 0.9).unwrap();
        let g_hi = detect_global_proxy(&cat, &r, &src, &rf, hi, 0.9).unwrap();
        prop_assert!(is_subset(&g_hi, &g_lo));
        let regs = tensor(2, dim, seed.wrapping_add(3));
        prop_assert!(is_subset(&detect_by_register(&z, &regs, None, hi).unwrap(), &detect_by_register(&z, &regs, None, lo).unwrap()));
    }

    #[test]
    fn hijackee_rules_grow_as_thresholds_rise(seed in any::<u64>(), t in 2usize..20, lo in -3.0f64..3.0, gap in 0.0f64..3.0) {
        let trace = random_trace(2, 2, t, 2.0, seed);
        let all: Vec<usize> = (0..t).collect();
        let h = hijack_scores(&trace, &all, &all).unwrap();
        prop_assert!(is_subset(&detect_hijackee_rel(&h, lo), &detect_hijackee_rel(&h, lo + gap)));
        let (a, b) = (lo.abs(), lo.abs() + gap);
        prop_assert!(is_subset(&detect_hijackee_abs(&h, a), &detect_hijackee_abs(&h, b)));
    }

    #[test]
    fn partition_is_exact(total in 1usize..80, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let pick = |rng: &mut Rng| { let k = rng.below(total + 1); rng.sample_indices(total, k) };
        let (fp, gp, ah, reg) = (pick(&mut rng), pick(&mut rng), pick(&mut rng), pick(&mut rng));
        let p = build_partition(&fp, &gp, &ah, &reg, total).unwrap();
        let mut all: Vec<usize> = p.spurious.iter().chain(&p.regular).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..total).collect::<Vec<_>>());
        prop_assert!(p.spurious.iter().all(|i| !p.regular.contains(i)));
        for i in 0..total {
            let flagged = fp.contains(&i) || gp.contains(&i) || ah.contains(&i) || reg.contains(&i);
            prop_assert_eq!(flagged, p.spurious.contains(&i));
        }
        prop_assert!((p.ratio() - p.spurious.len() as f64 / total as f64).abs() == 0.0);
    }

    #[test]
    fn ring_width_is_the_least_cover(h in 1usize..200, w in 1usize..200, r in 0.05f64..64.0) {
        let l = make_register_layout(h, w, r).unwrap();
        let m = h.min(w) as f64;
        prop_assert!(l.n_reg as f64 * r >= m);
        prop_assert!(l.n_reg == 0 || (l.n_reg - 1) as f64 * r < m);
        prop_assert_eq!(l.padded_rows, h + 2 * l.n_reg);
        prop_assert_eq!(l.padded_cols, w + 2 * l.n_reg);
        prop_assert_eq!(l.image_indices.len() + l.register_indices.len(), l.padded_rows * l.padded_cols);
    }

    #[test]
    fn injected_center_is_bit_exact(gh in 1usize..5, gw in 1usize..5, p in 1usize..4, r in 0.5f64..8.0, seed in any::<u64>()) {
        let layout = make_register_layout(gh, gw, r).unwrap();
        let mut rng = Rng::new(seed);
        let (hh, ww) = (gh * p, gw * p);
        let img = Image::new(hh, ww, 3, (0..hh * ww * 3).map(|_| rng.normal()).collect()).unwrap();
        let out = inject_register_bias(&img, &layout, p, &mut rng).unwrap();
        let pad = layout.n_reg * p;
        let center = out.window(pad, pad, hh, ww).unwrap();
        prop_assert!(center.data().iter().zip(img.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn binary_formats_round_trip(rows in 1usize..6, cols in 1usize..6, dim in 1usize..9, seed in any::<u64>()) {
        let fm = fmap(rows, cols, dim, seed);
        let back = decode_fmap(&encode_fmap(&fm).unwrap()).unwrap();
        prop_assert_eq!(back.tokens().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), fm.tokens().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        let trace = random_trace(1 + (seed % 2) as usize, 2, rows * cols, 1.0, seed);
        prop_assert_eq!(decode_atrc(&encode_atrc(&trace).unwrap()).unwrap(), trace);
    }
}
