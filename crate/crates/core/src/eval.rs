//! Split-level evaluation: scores from every evaluated clip are pooled into
//! one ranking before computing metrics.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::dataset::{clip_end_frames, sample_clip, ClipOptions, ClipSample, SceneRecord};
use crate::error::{Error, Result};
use crate::metrics::{average_precision, pr_curve, Confusion, PrPoint};
use crate::model::{ForwardOptions, ImportanceModel};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectPrediction {
    /// `<scene>:<end frame>`.
    pub clip_id: String,
    pub scene_id: String,
    pub t_end: usize,
    pub track_id: u32,
    pub score: f64,
    pub label: bool,
    /// Lane gate coefficient, absent when the gate is disabled.
    pub p_c: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap: f64,
    pub f1: f64,
    pub acc: f64,
    pub threshold: f64,
    pub num_clips: usize,
    pub pr_curve: Vec<PrPoint>,
    pub per_object: Vec<ObjectPrediction>,
}

pub fn clip_id(scene_id: &str, t_end: usize) -> String {
    format!("{scene_id}:{t_end}")
}

/// Every clip ending on the evaluation cadence of each scene.
pub fn collect_clips(scenes: &[SceneRecord], cfg: &ModelConfig, stride: usize) -> Result<Vec<ClipSample>> {
    let opts = ClipOptions::from(cfg);
    let mut clips = Vec::new();
    for scene in scenes {
        for t_end in clip_end_frames(scene, cfg.clip_len, stride) {
            clips.push(sample_clip(scene, t_end, &opts)?);
        }
    }
    Ok(clips)
}

/// Scores and gate coefficients of every object, evaluation gate.
pub fn predict_clips(model: &ImportanceModel, clips: &[ClipSample]) -> Result<Vec<ObjectPrediction>> {
    let mut out = Vec::new();
    for clip in clips {
        let trace = model.forward_trace(clip, &ForwardOptions::eval())?;
        let scores = trace.scores.to_vec()?;
        let gates = trace.gate_coefficients()?;
        for (i, &score) in scores.iter().enumerate() {
            out.push(ObjectPrediction {
                clip_id: clip_id(&clip.scene_id, clip.t_end),
                scene_id: clip.scene_id.clone(),
                t_end: clip.t_end,
                track_id: clip.track_ids[i],
                score,
                label: clip.labels[i],
                p_c: gates.as_ref().map(|g| g[i]),
            });
        }
    }
    Ok(out)
}

/// Pools predictions into a report. Rows are put in `(scene, frame, track)`
/// order first, so the report does not depend on clip order.
pub fn report_from_predictions(mut preds: Vec<ObjectPrediction>, threshold: f64) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::Input("no objects to evaluate".into()));
    }
    preds.sort_by(|a, b| (&a.scene_id, a.t_end, a.track_id).cmp(&(&b.scene_id, b.t_end, b.track_id)));
    let scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    let labels: Vec<bool> = preds.iter().map(|p| p.label).collect();
    let confusion = Confusion::at(&scores, &labels, threshold)?;
    let mut clips: Vec<&str> = preds.iter().map(|p| p.clip_id.as_str()).collect();
    clips.dedup();
    Ok(EvalReport {
        ap: average_precision(&scores, &labels)?,
        f1: confusion.f1(),
        acc: confusion.accuracy(),
        threshold,
        num_clips: clips.len(),
        pr_curve: pr_curve(&scores, &labels)?,
        per_object: preds,
    })
}

pub fn evaluate_clips(model: &ImportanceModel, clips: &[ClipSample], threshold: f64) -> Result<EvalReport> {
    report_from_predictions(predict_clips(model, clips)?, threshold)
}

/// Evaluates `scenes` at clip ends spaced `stride` frames apart.
pub fn evaluate(model: &ImportanceModel, scenes: &[SceneRecord], stride: usize, threshold: f64) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::Input("empty evaluation split".into()));
    }
    let clips = collect_clips(scenes, model.config(), stride)?;
    evaluate_clips(model, &clips, threshold)
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `threshold, recall, precision` rows.
    pub fn write_pr_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.pr_curve {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn write_predictions_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for p in &self.per_object {
            w.serialize(p)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}
