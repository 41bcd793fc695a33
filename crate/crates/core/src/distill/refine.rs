use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::config::RefineConfig;
use super::train::{train_step, LossReport};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::io::{
    model_checkpoint, model_from_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    JsonlWriter,
};
use crate::numerics::{Rng, Tensor};
use crate::vit::ModelState;

/// Student weights and optimizer state at an epoch boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineState {
    pub student: ModelState<f64>,
    pub opt: Adam<f64>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    epoch: usize,
    step: u64,
    adam_t: u64,
    config: RefineConfig,
}

impl RefineState {
    /// Fresh student: the teacher plus newly initialized adapters.
    pub fn new(teacher: &ModelState<f64>, cfg: &RefineConfig) -> Result<Self> {
        let mut rng = Rng::new(cfg.seed).split(0);
        let student = teacher
            .without_adapters()
            .with_adapters(&cfg.adapter, &mut rng)?;
        let shapes: Vec<Vec<usize>> = student
            .adapter_tensors()
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let opt = Adam::new(cfg.optim.clone(), &shape_refs);
        Ok(Self {
            student,
            opt,
            epoch: 0,
            step: 0,
        })
    }

    pub fn to_checkpoint(&self, cfg: &RefineConfig) -> Result<Checkpoint> {
        let header = serde_json::to_value(StateHeader {
            epoch: self.epoch,
            step: self.step,
            adam_t: self.opt.t,
            config: cfg.clone(),
        })?;
        let mut extra: Vec<(String, Tensor<f64>)> = Vec::new();
        for (k, m) in self.opt.m.iter().enumerate() {
            extra.push((format!("adam.m.{k}"), m.clone()));
        }
        for (k, v) in self.opt.v.iter().enumerate() {
            extra.push((format!("adam.v.{k}"), v.clone()));
        }
        model_checkpoint(&self.student, header, extra)
    }

    /// Restores a state written by [`RefineState::to_checkpoint`] along with
    /// the configuration it was trained under.
    pub fn from_checkpoint(ck: Checkpoint) -> Result<(Self, RefineConfig)> {
        let (student, extra, rest) = model_from_checkpoint(ck)?;
        let h: StateHeader = serde_json::from_value(extra)
            .map_err(|e| Error::invalid(format!("checkpoint carries no training state: {e}")))?;
        let n = student.adapter_tensors().len();
        if n == 0 {
            return Err(Error::invalid("training checkpoint has no adapters"));
        }
        let mut m = vec![None; n];
        let mut v = vec![None; n];
        for (name, t) in rest {
            let (slot, k) = match name.strip_prefix("adam.m.") {
                Some(k) => (&mut m, k),
                None => match name.strip_prefix("adam.v.") {
                    Some(k) => (&mut v, k),
                    None => {
                        return Err(Error::invalid(format!(
                            "unexpected tensor '{name}' in training checkpoint"
                        )))
                    }
                },
            };
            let k: usize = k
                .parse()
                .map_err(|_| Error::invalid(format!("bad moment name '{name}'")))?;
            if k >= n {
                return Err(Error::invalid(format!(
                    "moment '{name}' beyond {n} adapter tensors"
                )));
            }
            slot[k] = Some(t);
        }
        let collect = |xs: Vec<Option<Tensor<f64>>>| -> Result<Vec<Tensor<f64>>> {
            xs.into_iter()
                .enumerate()
                .map(|(k, t)| {
                    t.ok_or_else(|| Error::invalid(format!("missing optimizer moment {k}")))
                })
                .collect()
        };
        let opt = Adam {
            config: h.config.optim.clone(),
            m: collect(m)?,
            v: collect(v)?,
            t: h.adam_t,
        };
        for (p, mm) in student.adapter_tensors().iter().zip(&opt.m) {
            if p.shape() != mm.shape() {
                return Err(Error::shape(
                    "from_checkpoint",
                    format!("moment {:?} for adapter {:?}", mm.shape(), p.shape()),
                ));
            }
        }
        Ok((
            Self {
                student,
                opt,
                epoch: h.epoch,
                step: h.step,
            },
            h.config,
        ))
    }

    pub fn load(path: &Path) -> Result<(Self, RefineConfig)> {
        Self::from_checkpoint(read_checkpoint(path)?)
    }
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    n.div_ceil(batch.max(1))
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch-{epoch}.trck"))
}

/// Where a run writes its artifacts.
#[derive(Clone, Debug, Default)]
pub struct RunOutput {
    /// Per-epoch checkpoints go here.
    pub dir: Option<PathBuf>,
    /// Appends one JSON line per step.
    pub log: Option<PathBuf>,
}

/// References for a batch: distinct corpus images outside the batch when
/// possible.
fn pick_references(n: usize, batch: &[usize], rng: &mut Rng) -> Vec<usize> {
    let pool: Vec<usize> = (0..n).filter(|i| !batch.contains(i)).collect();
    if pool.is_empty() {
        log::warn!("corpus too small for distinct references; images serve as their own reference");
        return batch.to_vec();
    }
    if pool.len() >= batch.len() {
        rng.sample_indices(pool.len(), batch.len())
            .into_iter()
            .map(|k| pool[k])
            .collect()
    } else {
        (0..batch.len())
            .map(|_| pool[rng.below(pool.len())])
            .collect()
    }
}

/// Trains until `until_epoch` epochs are complete (capped at
/// `cfg.epochs`). Every quantity is derived from `cfg.seed`, the epoch and
/// the step, so resuming from a checkpoint reproduces an uninterrupted run.
pub fn refine_until(
    teacher: &ModelState<f64>,
    corpus: &[Image<f64>],
    cfg: &RefineConfig,
    mut state: RefineState,
    until_epoch: usize,
    out: &RunOutput,
) -> Result<(RefineState, Vec<LossReport>)> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let n = corpus.len();
    let per_epoch = steps_per_epoch(n, cfg.batch_size);
    let total = (per_epoch * cfg.epochs) as f64;
    let warm = cfg.register_warmup * total;
    let root = Rng::new(cfg.seed);
    let mut log = match &out.log {
        Some(p) if state.step > 0 => Some(JsonlWriter::append(p)?),
        Some(p) => Some(JsonlWriter::create(p)?),
        None => None,
    };
    if let Some(d) = &out.dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut reports = Vec::new();
    while state.epoch < until_epoch.min(cfg.epochs) {
        let mut order: Vec<usize> = (0..n).collect();
        root.split(1).split(state.epoch as u64).shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let step = state.step;
            let mut ref_rng = root.split(3).split(step);
            let refs = pick_references(n, chunk, &mut ref_rng);
            let batch: Vec<Image<f64>> = chunk.iter().map(|&i| corpus[i].clone()).collect();
            let references: Vec<Image<f64>> = refs.iter().map(|&i| corpus[i].clone()).collect();
            let use_registers = step as f64 >= warm;
            let step_rng = root.split(2).split(step);
            let report = train_step(
                &mut state.student,
                teacher,
                &batch,
                &references,
                cfg,
                &mut state.opt,
                use_registers,
                step,
                &step_rng,
            )?;
            log::info!(
                "epoch {} step {step}: total {:.5} (regu {:.5}, spu {:.5}, uni {:.5})",
                state.epoch,
                report.total,
                report.l_regu,
                report.l_spu,
                report.l_uni
            );
            if let Some(w) = log.as_mut() {
                w.write(&report)?;
            }
            reports.push(report);
            state.step += 1;
        }
        state.epoch += 1;
        if let Some(d) = &out.dir {
            write_checkpoint(&checkpoint_path(d, state.epoch), &state.to_checkpoint(cfg)?)?;
        }
    }
    Ok((state, reports))
}

/// Full run from scratch.
pub fn refine(
    teacher: &ModelState<f64>,
    corpus: &[Image<f64>],
    cfg: &RefineConfig,
    out: &RunOutput,
) -> Result<(RefineState, Vec<LossReport>)> {
    let state = RefineState::new(teacher, cfg)?;
    refine_until(teacher, corpus, cfg, state, cfg.epochs, out)
}
