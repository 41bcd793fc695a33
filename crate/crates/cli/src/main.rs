//! `token-refinery`: command-line driver for spurious-token detection and
//! register distillation on toy Vision Transformers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::Fail;

pub const THREADS_ENV: &str = "TOKEN_REFINERY_THREADS";

#[derive(Parser, Debug)]
#[command(
    name = "token-refinery",
    version,
    about = "Spurious-token detection and register distillation for toy ViTs"
)]
struct Cli {
    /// JSON config document; missing sections and fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum AhRule {
    Abs,
    Rel,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a procedural image corpus as PPM files.
    SynthGen {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a model checkpoint: the planted-spurious teacher, or a plain
    /// random init with `--plain`.
    InitTeacher {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        plain: bool,
    },
    /// Export final-layer tokens (and attention) of one image.
    Forward {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        capture_attn: bool,
        /// Run on the register-padded grid; needs `--seed` for the ring noise.
        #[arg(long, requires = "seed")]
        registers: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the detectors on exported maps and write a partition.
    Detect {
        #[arg(long)]
        fmap: PathBuf,
        #[arg(long)]
        ref_fmap: PathBuf,
        /// Horizontal composite (source half on the left) for the GP rule.
        #[arg(long)]
        cat_fmap: Option<PathBuf>,
        #[arg(long)]
        atrc: Option<PathBuf>,
        /// Register layout of a padded-grid trace; keys are then the image tokens.
        #[arg(long)]
        layout: Option<PathBuf>,
        /// Register tokens as a feature map.
        #[arg(long)]
        registers: Option<PathBuf>,
        /// Thresholds JSON; overrides the config's.
        #[arg(long)]
        thresholds: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "abs")]
        ah_rule: AhRule,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-image spurious-token counts and ratios over a corpus.
    Stats {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Distill the teacher into an adapter student.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the newest epoch checkpoint in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Write a suite of seeded planted benchmarks.
    PlantSuite {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Precision and recall of every detector over a planted suite.
    EvalPlanted {
        #[arg(long)]
        suite: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Two-component PCA of tokens: scatter CSV and a heatmap of PC1.
    VizPca {
        #[arg(long)]
        fmap: PathBuf,
        #[arg(long)]
        layout: Option<PathBuf>,
        /// `scatter.csv,heat.ppm`
        #[arg(long, value_delimiter = ',', required = true)]
        out: Vec<PathBuf>,
    },
    /// Finite-difference suite over the losses and the full objective.
    Gradcheck {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn init_threads() -> Result<(), Fail> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Fail::validation(format!(
            "{THREADS_ENV} must be a positive integer, got `{v}`"
        ))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Fail::validation(format!("thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Fail> {
    init_threads()?;
    let cfg = config::load(cli.config.as_deref())?;
    use Command::*;
    match cli.command {
        SynthGen { n, size, seed, out } => commands::synth_gen(n, size, seed, &out),
        InitTeacher { seed, out, plain } => commands::init_teacher(&cfg, seed, &out, plain),
        Forward {
            ckpt,
            image,
            out,
            capture_attn,
            registers,
            seed,
        } => commands::forward(
            &cfg,
            &ckpt,
            &image,
            &out,
            capture_attn,
            registers.then_some(seed).flatten(),
        ),
        Detect {
            fmap,
            ref_fmap,
            cat_fmap,
            atrc,
            layout,
            registers,
            thresholds,
            ah_rule,
            out,
        } => commands::detect(
            &cfg,
            commands::DetectInputs {
                fmap: &fmap,
                ref_fmap: &ref_fmap,
                cat_fmap: cat_fmap.as_deref(),
                atrc: atrc.as_deref(),
                layout: layout.as_deref(),
                registers: registers.as_deref(),
                thresholds: thresholds.as_deref(),
                ah_rule,
            },
            &out,
        ),
        Stats {
            corpus,
            ckpt,
            seed,
            out,
        } => commands::stats(&cfg, &corpus, &ckpt, seed, &out),
        Train {
            corpus,
            teacher,
            seed,
            out,
            resume,
        } => commands::train(&cfg, &corpus, &teacher, seed, &out, resume),
        PlantSuite { n, seed, out } => commands::plant_suite(n, seed, &out),
        EvalPlanted { suite, out } => commands::eval_planted(&cfg, &suite, &out),
        VizPca { fmap, layout, out } => match out.as_slice() {
            [scatter, heat] => commands::viz_pca(&fmap, layout.as_deref(), scatter, heat),
            _ => Err(Fail::validation(
                "--out takes two comma-separated paths: scatter.csv,heat.ppm",
            )),
        },
        Gradcheck { seed, out } => commands::gradcheck(&cfg, seed, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
