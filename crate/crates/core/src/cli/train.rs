//! Mini-batch SGD over the combined objective.
//!
//! Every random draw comes from a stream keyed by (seed, purpose, epoch,
//! step, slot), and per-sample gradients are summed in batch order, so a run
//! is a pure function of config, seed and data whatever the thread count.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::config::RunConfig;
use super::infer::{evaluate, EvalReport};
use crate::data::{read_ptsseg, rng_for, sample_block, split_blocks, stream_seed, whole_block, Block, Manifest, Mode, Scene};
use crate::error::{Error, Result};
use crate::gradcore::{Graph, Matrix};
use crate::losses::{instance_loss, semantic_loss, total_loss, LossReport};
use crate::model::{forward, init_params, BoundParams, ModelParams};
use crate::selfpred::{build_joint_labels, one_hot, pair_groups, self_prediction_loss_skipping, stratified_split};

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_SAMPLE: u64 = 3;
const TAG_SPLIT: u64 = 4;

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub train: Vec<Scene>,
    pub val: Vec<Scene>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = Manifest::load(dir)?;
        let read = |names: &[String]| -> Result<Vec<Scene>> {
            names.iter().map(|n| read_ptsseg(&dir.join(n))).collect()
        };
        let train = read(&manifest.train)?;
        let val = read(&manifest.val)?;
        for s in train.iter().chain(&val) {
            if s.class_names != manifest.class_names {
                return Err(Error::Data("scene class table differs from the manifest".into()));
            }
        }
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
            train,
            val,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.class_names.len()
    }
}

/// Training blocks of every scene, in scene order.
pub fn training_blocks(scenes: &[Scene], cfg: &RunConfig) -> Result<Vec<(usize, Block)>> {
    let mut out = Vec::new();
    for (k, s) in scenes.iter().enumerate() {
        let blocks = match cfg.mode {
            Mode::Scene => split_blocks(s, cfg.block_size)?,
            Mode::Shape => vec![whole_block(s)],
        };
        out.extend(blocks.into_iter().map(|b| (k, b)));
    }
    Ok(out)
}

/// Validation scores recorded in the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValScores {
    pub miou: f64,
    pub mwcov: f64,
    pub mprec: f64,
    pub mrec: f64,
}

impl From<&EvalReport> for ValScores {
    fn from(r: &EvalReport) -> Self {
        ValScores {
            miou: r.semantic.miou,
            mwcov: r.instance.mwcov,
            mprec: r.instance.mprec,
            mrec: r.instance.mrec,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's samples.
    pub losses: LossReport,
    pub skipped_pairs: usize,
    pub val: Option<ValScores>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<EpochRow>,
}

impl TrainLog {
    pub fn to_tsv(&self) -> String {
        let mut s = String::from(
            "epoch\tlr\tl_var\tl_dist\tl_reg\tl_ins\tl_sem\tl_sp\ttotal\tskipped_pairs\tval_mIoU\tval_mWCov\tval_mPrec\tval_mRec\n",
        );
        for r in &self.rows {
            let l = &r.losses;
            let _ = write!(
                s,
                "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                r.epoch, r.lr, l.l_var, l.l_dist, l.l_reg, l.l_ins, l.l_sem, l.l_sp, l.total, r.skipped_pairs
            );
            match r.val {
                Some(v) => {
                    let _ = writeln!(s, "\t{:.6}\t{:.6}\t{:.6}\t{:.6}", v.miou, v.mwcov, v.mprec, v.mrec);
                }
                None => s.push_str("\t-\t-\t-\t-\n"),
            }
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub log: TrainLog,
}

struct SampleResult {
    grads: Vec<Matrix>,
    report: LossReport,
    skipped: usize,
}

/// Whether the self-prediction branch is built at all.
pub fn uses_selfpred(cfg: &RunConfig, no_selfpred: bool) -> bool {
    !no_selfpred && cfg.beta > 0.0
}

fn sample_step(
    params: &ModelParams,
    cfg: &RunConfig,
    scene: &Scene,
    block: &Block,
    num_classes: usize,
    use_sp: bool,
    key: [u64; 3],
) -> Result<SampleResult> {
    let mut rng = rng_for(cfg.seed, &[TAG_SAMPLE, key[0], key[1], key[2]]);
    let sample = sample_block(scene, block, cfg.points_per_block, cfg.mode, &mut rng)?;
    let mut g = Graph::new();
    let bound = BoundParams::bind(&mut g, params, true);
    let x = g.constant(sample.features);
    let fb = forward(&mut g, params, &bound, x, use_sp)?;
    let ins = instance_loss(&mut g, fb.f_ins, &sample.ins, &cfg.instance_loss())?;
    let l_sem = semantic_loss(&mut g, fb.sem_logits, &one_hot(&sample.sem, num_classes)?)?;

    let (l_sp, skipped) = match fb.f_joint {
        Some(f_joint) if use_sp => {
            let mut rng = rng_for(cfg.seed, &[TAG_SPLIT, key[0], key[1], key[2]]);
            let labels = build_joint_labels(&sample.sem, &sample.ins, num_classes)?;
            let mut assignment = stratified_split(&sample.ins, cfg.groups, cfg.split_mode(), &mut rng)?;
            assignment.pairing = pair_groups(cfg.groups, &mut rng)?;
            self_prediction_loss_skipping(&mut g, f_joint, &labels, &assignment, &cfg.selfpred(), &mut rng)?
        }
        _ => (None, 0),
    };
    let total = match l_sp {
        Some(sp) => total_loss(&mut g, ins.l_ins, l_sem, sp, cfg.beta)?,
        None => g.add(ins.l_ins, l_sem)?,
    };
    let report = LossReport::read(&g, &ins, l_sem, l_sp, total, cfg.beta);
    if !report.total.is_finite() {
        return Err(Error::Data(format!(
            "non-finite loss at epoch {} step {} slot {}",
            key[0], key[1], key[2]
        )));
    }
    let mut grads = g.backward(total)?;
    let grads = params.names().map(|n| grads.take(bound.var(n))).collect();
    Ok(SampleResult {
        grads,
        report,
        skipped,
    })
}

/// Trains from scratch. The validation split is scored every
/// `cfg.val_every` epochs and after the last one.
pub fn train(cfg: &RunConfig, data: &Dataset, no_selfpred: bool) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.manifest.mode != cfg.mode {
        return Err(Error::Config(format!(
            "config mode `{}` does not match dataset mode `{}`",
            cfg.mode.as_str(),
            data.manifest.mode.as_str()
        )));
    }
    if data.train.is_empty() {
        return Err(Error::Data(format!("{}: no training scenes", data.dir.display())));
    }
    let num_classes = data.num_classes();
    let arch = cfg.arch(num_classes);
    let mut params = init_params(stream_seed(cfg.seed, &[TAG_INIT]), &arch)?;
    params.seed = cfg.seed;
    let blocks = training_blocks(&data.train, cfg)?;
    let use_sp = uses_selfpred(cfg, no_selfpred);
    let names: Vec<String> = params.names().map(String::from).collect();
    let mut velocity: Vec<Matrix> = names.iter().map(|n| params.get(n).unwrap().map(|_| 0.0)).collect();
    let mut log = TrainLog::default();
    info!(
        "training on {} blocks from {} scenes, {} parameters, self-prediction {}",
        blocks.len(),
        data.train.len(),
        params.num_scalars(),
        if use_sp { "on" } else { "off" }
    );

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut order: Vec<usize> = (0..blocks.len()).collect();
        order.shuffle(&mut rng_for(cfg.seed, &[TAG_SHUFFLE, epoch as u64]));
        let mut epoch_report = LossReport::default();
        let mut skipped = 0;
        for (step, batch) in order.chunks(cfg.batch).enumerate() {
            let results: Vec<Result<SampleResult>> = batch
                .par_iter()
                .enumerate()
                .map(|(slot, &b)| {
                    let (scene, block) = &blocks[b];
                    sample_step(
                        &params,
                        cfg,
                        &data.train[*scene],
                        block,
                        num_classes,
                        use_sp,
                        [epoch as u64, step as u64, slot as u64],
                    )
                })
                .collect();
            let mut sum: Option<Vec<Matrix>> = None;
            for r in results {
                let r = r?;
                epoch_report.accumulate(&r.report);
                skipped += r.skipped;
                match &mut sum {
                    None => sum = Some(r.grads),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(&r.grads) {
                            a.add_assign(g);
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for ((name, grad), v) in names.iter().zip(sum.unwrap()).zip(velocity.iter_mut()) {
                let p = params.get_mut(name).unwrap();
                if cfg.momentum > 0.0 {
                    v.scale_assign(cfg.momentum);
                    v.add_assign(&grad.map(|x| x * scale));
                    p.add_assign(&v.map(|x| -lr * x));
                } else {
                    p.add_assign(&grad.map(|x| -lr * scale * x));
                }
            }
            debug!("epoch {epoch} step {step} done");
        }
        let losses = epoch_report.scaled(1.0 / blocks.len() as f64);
        let validate = cfg.val_every > 0
            && !data.val.is_empty()
            && ((epoch + 1) % cfg.val_every == 0 || epoch + 1 == cfg.epochs);
        let val = if validate {
            Some(ValScores::from(&evaluate(&params, &data.val, cfg)?))
        } else {
            None
        };
        info!(
            "epoch {:>3}  lr {:.5}  l_ins {:.4}  l_sem {:.4}  l_sp {:.4}  total {:.4}{}",
            epoch + 1,
            lr,
            losses.l_ins,
            losses.l_sem,
            losses.l_sp,
            losses.total,
            val.map_or(String::new(), |v| format!("  val mIoU {:.3} mWCov {:.3}", v.miou, v.mwcov))
        );
        log.rows.push(EpochRow {
            epoch: epoch + 1,
            lr,
            losses,
            skipped_pairs: skipped,
            val,
        });
    }
    Ok(TrainOutcome { params, log })
}
