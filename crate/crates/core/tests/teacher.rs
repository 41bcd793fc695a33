use refinery::filter::hijack_scores;
use refinery::image::Normalization;
use refinery::numerics::{cosine, Rng};
use refinery::synth::{gen_corpus, make_spurious_teacher, TeacherSpec};
use refinery::vit::{forward, ViTConfig};

fn images(n: usize, size: usize, seed: u64) -> Vec<refinery::Image64> {
    let norm = Normalization::default();
    gen_corpus(n, size, &mut Rng::new(seed))
        .unwrap()
        .iter()
        .map(|s| s.normalized(&norm))
        .collect()
}

#[test]
fn planted_positions_agree_across_images() {
    let cfg = ViTConfig::default();
    let t = make_spurious_teacher::<f64>(&cfg, &TeacherSpec::default(), &mut Rng::new(7)).unwrap();
    let maps: Vec<_> = images(16, cfg.img_size, 3)
        .iter()
        .map(|im| forward(&t.model, im, false).unwrap().0)
        .collect();
    let mut sum = 0.0;
    let mut pairs = 0;
    for &p in &t.plan.fp {
        for a in 0..maps.len() {
            for b in a + 1..maps.len() {
                sum += cosine(maps[a].token(p), maps[b].token(p));
                pairs += 1;
            }
        }
    }
    let mean = sum / pairs as f64;
    assert!(
        mean >= 0.95,
        "mean cross-image cosine over planted positions {mean}"
    );
}

#[test]
fn starved_keys_fall_two_sigma_below_the_mean() {
    let cfg = ViTConfig::default();
    let spec = TeacherSpec {
        fp_fraction: 0.0,
        ah_fraction: 0.0625,
        ..Default::default()
    };
    let t = make_spurious_teacher::<f64>(&cfg, &spec, &mut Rng::new(9)).unwrap();
    assert!(!t.plan.ah.is_empty());
    for im in images(8, cfg.img_size, 4) {
        let (z, trace) = forward(&t.model, &im, true).unwrap();
        let all: Vec<usize> = (0..z.len()).collect();
        let h = hijack_scores(&trace.unwrap(), &all, &all).unwrap();
        let cut = h.mean - 2.0 * h.std;
        for (j, s) in h.iter().filter(|(j, _)| t.plan.ah.contains(j)) {
            assert!(s < cut, "key {j}: h = {s}, cutoff {cut}");
        }
    }
}
