//! Scene-level inference and evaluation.

use rayon::prelude::*;

use super::config::RunConfig;
use crate::cluster::{mean_shift, merge_blocks, BlockPrediction, SceneLabels};
use crate::data::{block_all_points, split_blocks_strided, whole_block, Mode, PointCloudSample, Predictions, Scene};
use crate::gradcore::Matrix;
use crate::error::{Error, Result};
use crate::metrics::{report_text, ConfusionMatrix, InstanceAccumulator, InstanceReport, InstanceSet, SemanticReport};
use crate::model::{infer, ModelParams};

/// Inference windows: half-overlapping blocks in scene mode so that
/// instances cut by one window are seen whole by a neighbour and can be
/// merged, the whole object in shape mode.
pub fn inference_blocks(scene: &Scene, cfg: &RunConfig) -> Result<Vec<crate::data::Block>> {
    match cfg.mode {
        Mode::Scene => split_blocks_strided(scene, cfg.block_size, cfg.block_size / 2.0),
        Mode::Shape => Ok(vec![whole_block(scene)]),
    }
}

/// Forward pass, mean-shift and semantic argmax for every block, then
/// BlockMerging into scene ids. `with_selfpred_head` only changes whether
/// the discarded joint embedding is computed.
pub fn predict_scene_with(
    params: &ModelParams,
    scene: &Scene,
    cfg: &RunConfig,
    with_selfpred_head: bool,
) -> Result<SceneLabels> {
    if params.arch.input_width != cfg.mode.feature_width() {
        return Err(Error::Config(format!(
            "checkpoint expects {} input features but {} mode provides {}",
            params.arch.input_width,
            cfg.mode.as_str(),
            cfg.mode.feature_width()
        )));
    }
    if scene.num_classes() > params.arch.num_classes {
        return Err(Error::Data(format!(
            "scene has {} classes but the checkpoint predicts {}",
            scene.num_classes(),
            params.arch.num_classes
        )));
    }
    segment_scene(scene, cfg, |sample| {
        let out = infer(params, &sample.features, with_selfpred_head)?;
        let sem = out.sem_pred();
        Ok((out.f_ins, sem))
    })
}

/// Runs `head` on every inference block to get per-point instance
/// embeddings and semantic labels, clusters the embeddings with mean-shift
/// and merges the blocks into scene labels.
pub fn segment_scene<F>(scene: &Scene, cfg: &RunConfig, head: F) -> Result<SceneLabels>
where
    F: Fn(&PointCloudSample) -> Result<(Matrix, Vec<usize>)> + Sync,
{
    let blocks = inference_blocks(scene, cfg)?;
    let ms = cfg.mean_shift();
    let preds: Vec<BlockPrediction> = blocks
        .par_iter()
        .map(|b| -> Result<BlockPrediction> {
            let sample = block_all_points(scene, b, cfg.mode)?;
            let (emb, sem) = head(&sample)?;
            let clusters = mean_shift(&emb, &ms)?;
            Ok(BlockPrediction {
                points: sample.points,
                center: b.center(),
                local_ins: clusters.labels,
                sem,
            })
        })
        .collect::<Result<_>>()?;
    merge_blocks(&scene.coords, &preds, &cfg.merge())
}

pub fn predict_scene(params: &ModelParams, scene: &Scene, cfg: &RunConfig) -> Result<SceneLabels> {
    predict_scene_with(params, scene, cfg, false)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub semantic: SemanticReport,
    pub instance: InstanceReport,
    pub text: String,
}

/// Scores scene-level predictions against ground truth, accumulated over
/// scenes in order.
pub fn score<'a>(
    pairs: impl IntoIterator<Item = (&'a Scene, &'a SceneLabels)>,
    class_names: &[String],
) -> Result<EvalReport> {
    let mut cm = ConfusionMatrix::new(class_names.len());
    let mut acc = InstanceAccumulator::new(0.5)?;
    for (scene, pred) in pairs {
        if pred.sem.len() != scene.len() {
            return Err(Error::Data(format!(
                "prediction has {} points, ground truth {}",
                pred.sem.len(),
                scene.len()
            )));
        }
        if let Some(&c) = pred.sem.iter().find(|&&c| c >= class_names.len()) {
            return Err(Error::Data(format!("predicted class {c} is out of range")));
        }
        cm.add(&pred.sem, &scene.sem)?;
        acc.add_scene(&InstanceSet::new(&pred.ins, &pred.sem)?, &InstanceSet::new(&scene.ins, &scene.sem)?)?;
    }
    let semantic = cm.report();
    let instance = acc.report();
    let text = report_text(&semantic, &instance, class_names);
    Ok(EvalReport {
        semantic,
        instance,
        text,
    })
}

pub fn evaluate(params: &ModelParams, scenes: &[Scene], cfg: &RunConfig) -> Result<EvalReport> {
    let names = match scenes.first() {
        Some(s) => s.class_names.clone(),
        None => return Err(Error::Data("no scenes to evaluate".into())),
    };
    let preds: Vec<SceneLabels> = scenes
        .iter()
        .map(|s| predict_scene(params, s, cfg))
        .collect::<Result<_>>()?;
    score(scenes.iter().zip(&preds), &names)
}

/// Ground truth scored against itself.
pub fn evaluate_oracle(scenes: &[Scene]) -> Result<EvalReport> {
    let names = match scenes.first() {
        Some(s) => s.class_names.clone(),
        None => return Err(Error::Data("no scenes to evaluate".into())),
    };
    let preds: Vec<SceneLabels> = scenes
        .iter()
        .map(|s| SceneLabels {
            sem: s.sem.clone(),
            ins: s.ins.clone(),
        })
        .collect();
    score(scenes.iter().zip(&preds), &names)
}

pub fn labels_from_predictions(p: &Predictions) -> SceneLabels {
    SceneLabels {
        sem: p.sem.clone(),
        ins: p.ins.clone(),
    }
}
