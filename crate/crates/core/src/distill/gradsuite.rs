//! Finite-difference suite over the distillation losses and the full
//! adapter objective on randomly drawn toy configurations.

use serde::{Deserialize, Serialize};

use super::config::{CropConfig, LossWeights, RefineConfig};
use super::losses::{loss_regular, loss_spurious, loss_uniformity};
use super::train::objective;
use crate::error::{Error, Result};
use crate::filter::Thresholds;
use crate::image::Image;
use crate::numerics::{grad_check_many, rel_err, Rng, Tape, Tensor, Var};
use crate::vit::{AdapterConfig, ModelState, ViTConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradSuiteConfig {
    pub seed: u64,
    pub configs: usize,
    pub step: f64,
    pub tol: f64,
    /// Adapter coordinates probed per configuration in the end-to-end case.
    pub probes: usize,
}

impl Default for GradSuiteConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            configs: 20,
            step: 1e-5,
            tol: 1e-4,
            probes: 12,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub config: usize,
    pub target: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradSuiteReport {
    pub config: GradSuiteConfig,
    pub cases: Vec<GradCase>,
    pub max_rel_err: f64,
    pub passed: bool,
}

pub const SUITE_TARGETS: [&str; 5] = ["l_regu", "l_spu", "l_uni", "total", "objective"];

/// Token-level toy problem: student crop and register tokens as the
/// differentiated inputs against fixed teacher tokens.
struct LossCase {
    z_roi: Tensor<f64>,
    z_reg: Tensor<f64>,
    z_crop: Tensor<f64>,
    regular: Vec<usize>,
    spurious: Vec<usize>,
    weights: LossWeights,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| std * rng.normal()).collect()).expect("shape")
}

fn loss_case(rng: &mut Rng) -> LossCase {
    let n = 4 + rng.below(9);
    let d = 3 + rng.below(6);
    let r = 1 + rng.below(4);
    let mut idx: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut idx);
    let cut = 1 + rng.below(n - 1);
    let mut regular = idx[..cut].to_vec();
    let mut spurious = idx[cut..].to_vec();
    regular.sort_unstable();
    spurious.sort_unstable();
    LossCase {
        z_roi: normal_tensor(&[n, d], 1.0, rng),
        z_reg: normal_tensor(&[r, d], 1.0, rng),
        z_crop: normal_tensor(&[n, d], 1.0, rng),
        regular,
        spurious,
        weights: LossWeights {
            lambda_spu: rng.uniform_in(0.1, 1.0),
            lambda_uni: rng.uniform_in(0.1, 1.0),
            tau_nce: rng.uniform_in(0.1, 1.0),
            tau_uni: rng.uniform_in(0.2, 1.0),
        },
    }
}

fn required<V>(v: Option<V>, set: &str) -> Result<V> {
    v.ok_or_else(|| Error::invalid(format!("{set} set is empty")))
}

fn loss_value(tape: &mut Tape<f64>, c: &LossCase, target: &str, roi: Var, reg: Var) -> Result<Var> {
    let crop = tape.constant(c.z_crop.clone());
    let w = &c.weights;
    match target {
        "l_regu" => required(
            loss_regular(tape, roi, crop, &c.regular, w.tau_nce)?,
            "regular",
        ),
        "l_spu" => Ok(required(
            loss_spurious(tape, reg, crop, &c.spurious, w.tau_nce)?,
            "spurious",
        )?
        .0),
        "l_uni" => loss_uniformity(tape, roi, reg, w.tau_uni),
        "total" => {
            let a = required(
                loss_regular(tape, roi, crop, &c.regular, w.tau_nce)?,
                "regular",
            )?;
            let (b, _) = required(
                loss_spurious(tape, reg, crop, &c.spurious, w.tau_nce)?,
                "spurious",
            )?;
            let u = loss_uniformity(tape, roi, reg, w.tau_uni)?;
            let b = tape.scale(b, w.lambda_spu);
            let u = tape.scale(u, w.lambda_uni);
            let ab = tape.add(a, b)?;
            tape.add(ab, u)
        }
        other => Err(Error::invalid(format!("unknown loss target `{other}`"))),
    }
}

/// Tiny teacher/student pair and batch for the end-to-end case.
fn objective_case(
    rng: &mut Rng,
) -> Result<(
    ModelState<f64>,
    ModelState<f64>,
    Vec<Image<f64>>,
    Vec<Image<f64>>,
    RefineConfig,
)> {
    let heads = 1 + rng.below(2);
    let vc = ViTConfig {
        img_size: 8,
        patch_size: 2,
        dim: 8,
        depth: 1,
        heads,
        register_factor: 2.0,
        ..ViTConfig::default()
    };
    let teacher = ModelState::init(&vc, rng)?;
    let mut student = teacher.with_adapters(
        &AdapterConfig {
            rank: 2,
            alpha: 2.0,
            init_std: 0.1,
        },
        rng,
    )?;
    for t in student.adapter_tensors_mut() {
        for v in t.data_mut() {
            *v = 0.1 * rng.normal();
        }
    }
    let image = |rng: &mut Rng| Image::new(8, 8, 3, (0..8 * 8 * 3).map(|_| rng.normal()).collect());
    let batch = vec![image(rng)?, image(rng)?];
    let refs = vec![image(rng)?, image(rng)?];
    let cfg = RefineConfig {
        thresholds: Thresholds {
            tau_fp_gp: rng.uniform_in(0.99, 0.9999),
            ..Thresholds::default()
        },
        weights: LossWeights {
            lambda_spu: rng.uniform_in(0.1, 1.0),
            lambda_uni: rng.uniform_in(0.1, 1.0),
            tau_nce: rng.uniform_in(0.2, 1.0),
            tau_uni: rng.uniform_in(0.2, 1.0),
        },
        crops: CropConfig {
            n: 1,
            ..CropConfig::default()
        },
        ..RefineConfig::default()
    };
    Ok((teacher, student, batch, refs, cfg))
}

fn objective_check(rng: &mut Rng, probes: usize, step: f64) -> Result<(f64, usize)> {
    let (teacher, student, batch, refs, cfg) = objective_case(rng)?;
    let fixed = rng.split(0);
    let base = objective(&student, &teacher, &batch, &refs, &cfg, false, &fixed)?;
    let sizes: Vec<usize> = student.adapter_tensors().iter().map(|t| t.len()).collect();
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let t = rng.below(sizes.len());
        let e = rng.below(sizes[t]);
        let eval = |delta: f64| -> Result<f64> {
            let mut s = student.clone();
            s.adapter_tensors_mut()[t].data_mut()[e] += delta;
            Ok(objective(&s, &teacher, &batch, &refs, &cfg, false, &fixed)?.total)
        };
        let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
        worst = worst.max(rel_err(base.grads[t].data()[e], numeric));
    }
    Ok((worst, probes))
}

/// Runs every target on `configs` random toy problems.
pub fn run_grad_suite(cfg: &GradSuiteConfig) -> Result<GradSuiteReport> {
    if cfg.configs == 0 || !(cfg.step > 0.0) || !(cfg.tol > 0.0) {
        return Err(Error::invalid(
            "gradient suite needs configs >= 1 and positive step and tolerance",
        ));
    }
    let root = Rng::new(cfg.seed);
    let mut cases = Vec::new();
    for k in 0..cfg.configs {
        let mut rng = root.split(k as u64);
        let lc = loss_case(&mut rng);
        for target in &SUITE_TARGETS[..4] {
            let rep = grad_check_many(
                |tape, v| loss_value(tape, &lc, target, v[0], v[1]),
                &[lc.z_roi.clone(), lc.z_reg.clone()],
                cfg.step,
                None,
            )?;
            cases.push(GradCase {
                config: k,
                target: target.to_string(),
                max_rel_err: rep.max_rel_err,
                checked: rep.checked,
                passed: rep.max_rel_err < cfg.tol,
            });
        }
        let (err, checked) = objective_check(&mut rng.split(1), cfg.probes, cfg.step)?;
        cases.push(GradCase {
            config: k,
            target: SUITE_TARGETS[4].into(),
            max_rel_err: err,
            checked,
            passed: err < cfg.tol,
        });
    }
    let max_rel_err = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
    let passed = cases.iter().all(|c| c.passed);
    Ok(GradSuiteReport {
        config: cfg.clone(),
        cases,
        max_rel_err,
        passed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        let r = run_grad_suite(&GradSuiteConfig {
            configs: 2,
            probes: 4,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(r.cases.len(), 2 * SUITE_TARGETS.len());
        assert!(r.passed, "{:?}", r.cases);
    }
}
