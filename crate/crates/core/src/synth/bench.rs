//! Seeded planted benchmarks and detector scoring against their truth.

use serde::{Deserialize, Serialize};

use super::plant::{plant_attention, plant_feature_maps, PlantSpec, PlantTruth, PlantedMaps};
use crate::error::Result;
use crate::filter::{
    detect_by_register, detect_fixed_pattern, detect_global_proxy, detect_hijackee_abs,
    detect_hijackee_rel, hijack_scores, Thresholds,
};
use crate::numerics::Rng;
use crate::vit::AttentionTrace;

/// Grid side of the default benchmarks.
pub const BENCH_SIDE: usize = 6;
pub const BENCH_LAYERS: usize = 2;
pub const BENCH_HEADS: usize = 2;

/// Detector names in scoring order.
pub const DETECTORS: [&str; 5] = ["fp", "gp", "ah_abs", "ah_rel", "reg"];

#[derive(Clone, Debug)]
pub struct Benchmark {
    pub spec: PlantSpec,
    pub maps: PlantedMaps,
    /// Attention over the source grid.
    pub trace: AttentionTrace<f64>,
}

impl Benchmark {
    /// Planted truth including the dead attention columns.
    pub fn truth(&self) -> PlantTruth {
        PlantTruth {
            ah: self.spec.ah.clone(),
            ..self.maps.truth.clone()
        }
    }
}

pub fn planted_benchmark(side: usize, rng: &mut Rng) -> Result<Benchmark> {
    let spec = PlantSpec::random(side, rng);
    let maps = plant_feature_maps(&spec, rng)?;
    let (trace, _) = plant_attention(&spec, BENCH_LAYERS, BENCH_HEADS, rng)?;
    Ok(Benchmark { spec, maps, trace })
}

/// Benchmark `k` of the suite rooted at `seed`.
pub fn benchmark_suite(n: usize, seed: u64) -> Result<Vec<Benchmark>> {
    let root = Rng::new(seed);
    (0..n)
        .map(|k| planted_benchmark(BENCH_SIDE, &mut root.split(k as u64)))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectorScore {
    pub detector: String,
    pub true_pos: usize,
    pub false_pos: usize,
    pub false_neg: usize,
    pub precision: f64,
    pub recall: f64,
}

impl DetectorScore {
    /// Precision is 1 with no predictions and recall is 1 with no truth, so
    /// an empty prediction for an empty truth scores perfectly.
    pub fn of(detector: &str, predicted: &[usize], truth: &[usize]) -> Self {
        let tp = predicted.iter().filter(|i| truth.contains(i)).count();
        let fp = predicted.len() - tp;
        let fn_ = truth.iter().filter(|i| !predicted.contains(i)).count();
        let ratio = |a: usize, b: usize| {
            if a + b == 0 {
                1.0
            } else {
                a as f64 / (a + b) as f64
            }
        };
        Self {
            detector: detector.into(),
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_,
            precision: ratio(tp, fp),
            recall: ratio(tp, fn_),
        }
    }

    pub fn merge(scores: &[DetectorScore], detector: &str) -> Self {
        let pick = scores.iter().filter(|s| s.detector == detector);
        let (tp, fp, fn_) = pick.fold((0, 0, 0), |(a, b, c), s| {
            (a + s.true_pos, b + s.false_pos, c + s.false_neg)
        });
        let ratio = |a: usize, b: usize| {
            if a + b == 0 {
                1.0
            } else {
                a as f64 / (a + b) as f64
            }
        };
        Self {
            detector: detector.into(),
            true_pos: tp,
            false_pos: fp,
            false_neg: fn_,
            precision: ratio(tp, fp),
            recall: ratio(tp, fn_),
        }
    }

    pub fn exact(&self) -> bool {
        self.false_pos == 0 && self.false_neg == 0
    }
}

/// Runs every detector on planted maps and a source-grid trace.
pub fn detector_predictions(
    maps: &PlantedMaps,
    trace: &AttentionTrace<f64>,
    thresholds: &Thresholds,
) -> Result<Vec<(&'static str, Vec<usize>)>> {
    let n = maps.z_s.len();
    let mut local = vec![usize::MAX; maps.z_cat.len()];
    for (k, &i) in maps.src_region.iter().enumerate() {
        local[i] = k;
    }
    let to_local = |v: Vec<usize>| {
        let mut v: Vec<usize> = v.into_iter().map(|i| local[i]).collect();
        v.sort_unstable();
        v
    };
    let fp = detect_fixed_pattern(&maps.z_s, &maps.z_ref, thresholds.tau_fp)?;
    let gp = to_local(detect_global_proxy(
        &maps.z_cat,
        &maps.z_ref,
        &maps.src_region,
        &maps.ref_region,
        thresholds.tau_gp,
        thresholds.tau_fp,
    )?);
    let all: Vec<usize> = (0..n).collect();
    let h = hijack_scores(trace, &all, &all)?;
    let ah_abs = detect_hijackee_abs(&h, thresholds.tau_ah_abs);
    let ah_rel = detect_hijackee_rel(&h, thresholds.tau_ah_rel);
    let reg = to_local(detect_by_register(
        &maps.z_cat,
        &maps.registers,
        Some(&maps.src_region),
        thresholds.tau_reg,
    )?);
    Ok(vec![
        ("fp", fp),
        ("gp", gp),
        ("ah_abs", ah_abs),
        ("ah_rel", ah_rel),
        ("reg", reg),
    ])
}

pub fn score_benchmark(
    maps: &PlantedMaps,
    trace: &AttentionTrace<f64>,
    truth: &PlantTruth,
    thresholds: &Thresholds,
) -> Result<Vec<DetectorScore>> {
    let preds = detector_predictions(maps, trace, thresholds)?;
    Ok(preds
        .iter()
        .map(|(name, p)| {
            let t = match *name {
                "fp" => &truth.fp,
                "gp" => &truth.gp,
                "reg" => &truth.reg,
                _ => &truth.ah,
            };
            DetectorScore::of(name, p, t)
        })
        .collect())
}
