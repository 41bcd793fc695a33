use std::ffi::OsString;
use std::path::{Path, PathBuf};

use refinery::distill::{checkpoint_path, refine_until, run_grad_suite, RefineState, RunOutput};
use refinery::filter::{
    build_partition, composite_regions, detect_by_register, detect_fixed_pattern,
    detect_global_proxy, detect_hijackee_abs, detect_hijackee_rel, hijack_scores, Thresholds,
};
use refinery::image::{Axis, Image};
use refinery::io::{
    load_image, load_json, load_model, model_checkpoint, read_atrc, read_fmap, save_csv,
    save_heatmap, save_image, save_json, write_atrc, write_checkpoint, write_fmap,
};
use refinery::numerics::{Rng, Tensor};
use refinery::pca::{pca, PCA_TOL};
use refinery::stats::{corpus_stats, mean_ratio, stats_table, STATS_HEADER};
use refinery::synth::{
    benchmark_suite, gen_corpus, make_spurious_teacher, score_benchmark, DetectorScore, PlantTruth,
    PlantedMaps, DETECTORS, GRAIN,
};
use refinery::vit::{
    forward as vit_forward, forward_grid, inject_register_bias, make_register_layout,
    split_regions, FeatureMap, ModelState, RegisterLayout,
};
use refinery::Error;
use serde_json::json;

use crate::config::Config;
use crate::AhRule;

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Fail {
    pub code: u8,
    pub message: String,
}

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERICAL: u8 = 3;
pub const EXIT_IO: u8 = 4;

impl Fail {
    pub fn validation(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_VALIDATION,
            message: message.into(),
        }
    }

    pub fn io(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_IO,
            message: message.into(),
        }
    }
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::NonFinite(_) => EXIT_NUMERICAL,
            Error::Io { .. } | Error::Format { .. } | Error::UnsupportedFormat { .. } => EXIT_IO,
            _ => EXIT_VALIDATION,
        };
        Self {
            code,
            message: e.to_string(),
        }
    }
}

type Res<T = ()> = Result<T, Fail>;

/// `path` with `suffix` appended to its final component.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s: OsString = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn create_dir(dir: &Path) -> Res {
    std::fs::create_dir_all(dir).map_err(|e| Fail::io(format!("{}: {e}", dir.display())))
}

fn sorted_entries(dir: &Path, keep: impl Fn(&Path) -> bool) -> Res<Vec<PathBuf>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Fail::io(format!("{}: {e}", dir.display())))?;
    let mut out = Vec::new();
    for entry in rd {
        let p = entry
            .map_err(|e| Fail::io(format!("{}: {e}", dir.display())))?
            .path();
        if keep(&p) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn load_corpus(dir: &Path, cfg: &Config) -> Res<Vec<(String, Image<f64>)>> {
    let files = sorted_entries(dir, |p| p.extension().is_some_and(|e| e == "ppm"))?;
    if files.is_empty() {
        return Err(Fail::validation(format!(
            "no .ppm images in {}",
            dir.display()
        )));
    }
    files
        .iter()
        .map(|p| Ok((stem(p), load_image(p, &cfg.refine.normalization)?)))
        .collect()
}

pub fn synth_gen(n: usize, size: usize, seed: u64, out: &Path) -> Res {
    let corpus = gen_corpus(n, size, &mut Rng::new(seed))?;
    create_dir(out)?;
    let mut files = Vec::with_capacity(n);
    for (i, s) in corpus.iter().enumerate() {
        let name = format!("{i:04}-{}.ppm", s.generator.name());
        save_image(&out.join(&name), &s.pixels)?;
        files.push(json!({ "file": name, "generator": s.generator.name(), "seed": s.seed }));
    }
    save_json(
        &out.join("manifest.json"),
        &json!({ "n": n, "size": size, "seed": seed, "grain": GRAIN, "images": files }),
    )?;
    println!("wrote {n} images to {}", out.display());
    Ok(())
}

pub fn init_teacher(cfg: &Config, seed: u64, out: &Path, plain: bool) -> Res {
    let mut rng = Rng::new(seed);
    let (model, extra) = if plain {
        (
            ModelState::<f64>::init(&cfg.model, &mut rng)?,
            json!({ "seed": seed, "plan": null }),
        )
    } else {
        let t = make_spurious_teacher::<f64>(&cfg.model, &cfg.teacher, &mut rng)?;
        (t.model, json!({ "seed": seed, "plan": t.plan }))
    };
    write_checkpoint(out, &model_checkpoint(&model, extra, Vec::new())?)?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn forward(
    cfg: &Config,
    ckpt: &Path,
    image: &Path,
    out: &Path,
    capture: bool,
    seed: Option<u64>,
) -> Res {
    let model = load_model(ckpt)?;
    let img = load_image(image, &cfg.refine.normalization)?;
    let mut outputs = vec![with_suffix(out, ".ufmp")];
    let trace = match seed {
        None => {
            let (fm, trace) = vit_forward(&model, &img, capture)?;
            write_fmap(&outputs[0], &fm)?;
            trace
        }
        Some(s) => {
            let p = model.config.patch_size;
            let layout = make_register_layout(
                img.height() / p,
                img.width() / p,
                model.config.register_factor,
            )?;
            let padded = inject_register_bias(&img, &layout, p, &mut Rng::new(s))?;
            let (grid_map, trace) = forward_grid(&model, &padded, &layout.token_grid(), capture)?;
            let (z, reg) = split_regions(&grid_map, &layout)?;
            write_fmap(&outputs[0], &z)?;
            let reg_map = FeatureMap::new(1, reg.rows(), reg)?;
            for (suffix, fm) in [(".reg.ufmp", &reg_map), (".grid.ufmp", &grid_map)] {
                let p = with_suffix(out, suffix);
                write_fmap(&p, fm)?;
                outputs.push(p);
            }
            let p = with_suffix(out, ".layout.json");
            save_json(&p, &layout)?;
            outputs.push(p);
            trace
        }
    };
    if let Some(t) = trace {
        let p = with_suffix(out, ".uatr");
        write_atrc(&p, &t)?;
        outputs.push(p);
    }
    let meta = json!({
        "command": "forward",
        "ckpt": ckpt,
        "image": image,
        "seed": seed,
        "normalization": cfg.refine.normalization,
        "outputs": outputs,
    });
    save_json(&with_suffix(out, ".json"), &meta)?;
    println!("wrote {} files under {}", outputs.len() + 1, out.display());
    Ok(())
}

pub struct DetectInputs<'a> {
    pub fmap: &'a Path,
    pub ref_fmap: &'a Path,
    pub cat_fmap: Option<&'a Path>,
    pub atrc: Option<&'a Path>,
    pub layout: Option<&'a Path>,
    pub registers: Option<&'a Path>,
    pub thresholds: Option<&'a Path>,
    pub ah_rule: AhRule,
}

pub fn detect(cfg: &Config, inp: DetectInputs, out: &Path) -> Res {
    let th: Thresholds = match inp.thresholds {
        Some(p) => load_json(p)?,
        None => cfg.refine.thresholds.clone(),
    };
    th.validate()?;
    let z = read_fmap(inp.fmap)?;
    let z_ref = read_fmap(inp.ref_fmap)?;
    let n = z.len();
    let fp = detect_fixed_pattern(&z, &z_ref, th.tau_fp)?;

    let gp = match inp.cat_fmap {
        None => Vec::new(),
        Some(p) => {
            let cat = read_fmap(p)?;
            if z.rows() != z.cols() || cat.rows() != z.rows() || cat.cols() != 2 * z.cols() {
                return Err(Fail::validation(format!(
                    "composite must be a horizontal {}x{} map for a square {}x{} source, got {}x{}",
                    z.rows(),
                    2 * z.cols(),
                    z.rows(),
                    z.cols(),
                    cat.rows(),
                    cat.cols()
                )));
            }
            let (src, rf) = composite_regions(z.rows(), Axis::Horizontal);
            let found = detect_global_proxy(&cat, &z_ref, &src, &rf, th.tau_gp, th.tau_fp)?;
            found
                .iter()
                .map(|i| src.iter().position(|s| s == i).expect("source index"))
                .collect()
        }
    };

    let ah = match inp.atrc {
        None => Vec::new(),
        Some(p) => {
            let trace = read_atrc(p)?;
            let (queries, keys): (Vec<usize>, Vec<usize>) = match inp.layout {
                Some(lp) => {
                    let layout: RegisterLayout = load_json(lp)?;
                    if layout.image_indices.len() != n {
                        return Err(Fail::validation(format!(
                            "layout holds {} image tokens, feature map {n}",
                            layout.image_indices.len()
                        )));
                    }
                    ((0..layout.total()).collect(), layout.image_indices)
                }
                None => ((0..n).collect(), (0..n).collect()),
            };
            let h = hijack_scores(&trace, &queries, &keys)?;
            let found = match inp.ah_rule {
                AhRule::Abs => detect_hijackee_abs(&h, th.tau_ah_abs),
                AhRule::Rel => detect_hijackee_rel(&h, th.tau_ah_rel),
            };
            found
                .iter()
                .map(|j| keys.iter().position(|k| k == j).expect("key index"))
                .collect()
        }
    };

    let reg = match inp.registers {
        None => Vec::new(),
        Some(p) => detect_by_register(&z, read_fmap(p)?.tokens(), None, th.tau_reg)?,
    };
    let part = build_partition(&fp, &gp, &ah, &reg, n)?;
    save_json(out, &part.report([z.rows(), z.cols()], &th))?;
    println!(
        "{} of {n} tokens spurious (fp {}, gp {}, ah {}, reg {})",
        part.spurious.len(),
        part.fp.len(),
        part.gp.len(),
        part.ah.len(),
        part.reg.len()
    );
    Ok(())
}

pub fn stats(cfg: &Config, corpus: &Path, ckpt: &Path, seed: u64, out: &Path) -> Res {
    let model = load_model(ckpt)?;
    let images = load_corpus(corpus, cfg)?;
    let rows = corpus_stats(&model, &images, &cfg.refine.thresholds, seed)?;
    save_csv(out, &STATS_HEADER, &stats_table(&rows))?;
    let mean = mean_ratio(&rows);
    let meta = json!({
        "command": "stats",
        "corpus": corpus,
        "ckpt": ckpt,
        "seed": seed,
        "images": rows.len(),
        "mean_ratio": mean,
        "thresholds": cfg.refine.thresholds,
        "normalization": cfg.refine.normalization,
    });
    save_json(&with_suffix(out, ".json"), &meta)?;
    println!("mean spurious ratio {mean} over {} images", rows.len());
    Ok(())
}

fn latest_checkpoint(dir: &Path, epochs: usize) -> Option<PathBuf> {
    (1..=epochs)
        .rev()
        .map(|e| checkpoint_path(dir, e))
        .find(|p| p.is_file())
}

pub fn train(
    cfg: &Config,
    corpus: &Path,
    teacher: &Path,
    seed: u64,
    out: &Path,
    resume: bool,
) -> Res {
    let mut cfg = cfg.clone();
    cfg.refine.seed = seed;
    let rc = &cfg.refine;
    let teacher = load_model(teacher)?;
    let images: Vec<Image<f64>> = load_corpus(corpus, &cfg)?
        .into_iter()
        .map(|(_, im)| im)
        .collect();
    create_dir(out)?;
    let state = match latest_checkpoint(out, rc.epochs).filter(|_| resume) {
        Some(p) => {
            let (state, saved) = RefineState::load(&p)?;
            if &saved != rc {
                return Err(Fail::validation(format!(
                    "{} was trained with a different config",
                    p.display()
                )));
            }
            log::info!(
                "resuming from {} (epoch {}, step {})",
                p.display(),
                state.epoch,
                state.step
            );
            state
        }
        None => {
            if resume {
                log::warn!("no checkpoint in {}; starting fresh", out.display());
            }
            RefineState::new(&teacher, rc)?
        }
    };
    save_json(&out.join("config.json"), &cfg)?;
    let run = RunOutput {
        dir: Some(out.to_path_buf()),
        log: Some(out.join("log.jsonl")),
    };
    let (state, log) = refine_until(&teacher, &images, rc, state, rc.epochs, &run)?;
    match log.last() {
        Some(r) => println!(
            "epoch {} step {}: total loss {:.6}",
            state.epoch, state.step, r.total
        ),
        None => println!("nothing to do: {} epochs already complete", state.epoch),
    }
    Ok(())
}

pub fn plant_suite(n: usize, seed: u64, out: &Path) -> Res {
    let suite = benchmark_suite(n, seed)?;
    create_dir(out)?;
    for (k, b) in suite.iter().enumerate() {
        let dir = out.join(format!("bench-{k:03}"));
        create_dir(&dir)?;
        write_fmap(&dir.join("src.ufmp"), &b.maps.z_s)?;
        write_fmap(&dir.join("ref.ufmp"), &b.maps.z_ref)?;
        write_fmap(&dir.join("cat.ufmp"), &b.maps.z_cat)?;
        write_fmap(
            &dir.join("reg.ufmp"),
            &FeatureMap::new(1, b.maps.registers.rows(), b.maps.registers.clone())?,
        )?;
        write_atrc(&dir.join("attn.uatr"), &b.trace)?;
        save_json(&dir.join("truth.json"), &b.truth())?;
        save_json(&dir.join("spec.json"), &b.spec)?;
    }
    save_json(&out.join("manifest.json"), &json!({ "n": n, "seed": seed }))?;
    println!("wrote {n} planted benchmarks to {}", out.display());
    Ok(())
}

pub fn eval_planted(cfg: &Config, suite: &Path, out: &Path) -> Res {
    let th = &cfg.refine.thresholds;
    let dirs = sorted_entries(suite, |p| p.is_dir() && stem(p).starts_with("bench-"))?;
    if dirs.is_empty() {
        return Err(Fail::validation(format!(
            "no bench-* directories in {}",
            suite.display()
        )));
    }
    let mut per_bench = Vec::with_capacity(dirs.len());
    let mut all = Vec::new();
    for dir in &dirs {
        let z_s = read_fmap(&dir.join("src.ufmp"))?;
        if z_s.rows() != z_s.cols() {
            return Err(Fail::validation(format!(
                "{}: planted grids are square",
                dir.display()
            )));
        }
        let (src_region, ref_region) = composite_regions(z_s.rows(), Axis::Horizontal);
        let truth: PlantTruth = load_json(&dir.join("truth.json"))?;
        let maps = PlantedMaps {
            z_ref: read_fmap(&dir.join("ref.ufmp"))?,
            z_cat: read_fmap(&dir.join("cat.ufmp"))?,
            registers: read_fmap(&dir.join("reg.ufmp"))?.tokens().clone(),
            z_s,
            src_region,
            ref_region,
            truth: truth.clone(),
        };
        let trace = read_atrc(&dir.join("attn.uatr"))?;
        let scores = score_benchmark(&maps, &trace, &truth, th)?;
        all.extend(scores.iter().cloned());
        per_bench.push(json!({ "benchmark": stem(dir), "scores": scores }));
    }
    let summary: Vec<DetectorScore> = DETECTORS
        .iter()
        .map(|d| DetectorScore::merge(&all, d))
        .collect();
    let exact = summary.iter().all(DetectorScore::exact);
    for s in &summary {
        println!(
            "{:<7} precision {:.4} recall {:.4}",
            s.detector, s.precision, s.recall
        );
    }
    save_json(
        out,
        &json!({ "thresholds": th, "benchmarks": per_bench.len(), "summary": summary, "exact": exact, "per_benchmark": per_bench }),
    )?;
    Ok(())
}

pub fn viz_pca(fmap: &Path, layout: Option<&Path>, scatter: &Path, heat: &Path) -> Res {
    let fm = read_fmap(fmap)?;
    let registers: Vec<bool> = match layout {
        None => vec![false; fm.len()],
        Some(p) => {
            let l: RegisterLayout = load_json(p)?;
            if (l.padded_rows, l.padded_cols) != (fm.rows(), fm.cols()) {
                return Err(Fail::validation(format!(
                    "layout is {}x{}, feature map {}x{}",
                    l.padded_rows,
                    l.padded_cols,
                    fm.rows(),
                    fm.cols()
                )));
            }
            let mut m = vec![false; fm.len()];
            for &i in &l.register_indices {
                m[i] = true;
            }
            m
        }
    };
    let k = fm.dim().min(2);
    let p = pca(fm.tokens(), k)?;
    let coord = |i: usize, c: usize| p.projections[i].get(c).copied().unwrap_or(0.0);
    let rows: Vec<Vec<String>> = (0..fm.len())
        .map(|i| {
            vec![
                i.to_string(),
                (i / fm.cols()).to_string(),
                (i % fm.cols()).to_string(),
                if registers[i] { "register" } else { "image" }.to_string(),
                format!("{}", coord(i, 0)),
                format!("{}", coord(i, 1)),
            ]
        })
        .collect();
    save_csv(
        scatter,
        &["index", "row", "col", "region", "pc1", "pc2"],
        &rows,
    )?;
    let pc1 = Tensor::new(
        vec![fm.rows(), fm.cols()],
        (0..fm.len()).map(|i| coord(i, 0)).collect(),
    )?;
    save_heatmap(heat, &pc1, 8)?;
    let meta = json!({
        "command": "viz-pca",
        "fmap": fmap,
        "layout": layout,
        "tolerance": PCA_TOL,
        "eigenvalues": p.eigenvalues,
        "components": p.components,
    });
    save_json(&with_suffix(scatter, ".json"), &meta)?;
    println!("eigenvalues {:?}", p.eigenvalues);
    Ok(())
}

pub fn gradcheck(cfg: &Config, seed: u64, out: Option<&Path>) -> Res {
    let mut gc = cfg.gradcheck.clone();
    gc.seed = seed;
    let report = run_grad_suite(&gc)?;
    for target in refinery::distill::SUITE_TARGETS {
        let worst = report
            .cases
            .iter()
            .filter(|c| c.target == target)
            .map(|c| c.max_rel_err)
            .fold(0.0, f64::max);
        println!("{target:<10} max rel err {worst:.3e}");
    }
    if let Some(p) = out {
        save_json(p, &report)?;
    }
    if report.passed {
        println!("gradient check passed over {} configurations", gc.configs);
        Ok(())
    } else {
        Err(Fail {
            code: EXIT_NUMERICAL,
            message: format!(
                "gradient check failed: max rel err {:.3e} >= {:.1e}",
                report.max_rel_err, gc.tol
            ),
        })
    }
}
