//! Cross-modal trial scoring, ROC/EER computation, and the cross-language
//! evaluation report.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::loss::OPL_NORM_EPS;
use crate::model::RfopParams;
use crate::scalar::Scalar;
use crate::store::{FeatureStore, Modality};
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const TRIALS_HEADER: &str = "face_sample_id,voice_sample_id,label";
pub const SCORES_HEADER: &str = "score,label";
pub const REPORT_HEADER: &str = "train_lang,test_lang,eer";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrialLabel {
    Same,
    Different,
}

/// One verification item: does this face and this voice share an identity?
#[derive(Debug, Clone)]
pub struct Trial<S> {
    pub face_sample_id: String,
    pub voice_sample_id: String,
    pub label: TrialLabel,
    pub score: Option<S>,
}

impl<S> Trial<S> {
    pub fn new(face_sample_id: String, voice_sample_id: String, label: TrialLabel) -> Self {
        Trial {
            face_sample_id,
            voice_sample_id,
            label,
            score: None,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RocPoint<S> {
    pub threshold: S,
    /// Fraction of different-identity trials with score >= threshold.
    pub far: S,
    /// Fraction of same-identity trials with score < threshold.
    pub frr: S,
}

#[derive(Debug, Clone, Copy)]
pub struct EerResult<S> {
    pub eer_percent: S,
    pub threshold: S,
}

// ── Scoring ─────────────────────────────────────────────────────────────

/// Scores every trial with the cosine similarity of the l2-normalized
/// latent embeddings produced by the trained projections.
pub fn score_trials<S: Scalar>(
    params: &RfopParams<S>,
    store: &FeatureStore,
    trials: &mut [Trial<S>],
) -> Result<()> {
    let mut face_ids: Vec<String> = Vec::new();
    let mut voice_ids: Vec<String> = Vec::new();
    let mut face_index: HashMap<String, usize> = HashMap::new();
    let mut voice_index: HashMap<String, usize> = HashMap::new();
    for trial in trials.iter() {
        let f = store.record(&trial.face_sample_id)?;
        if f.modality != Modality::Face {
            return Err(Error::ModalityMismatch {
                id: f.sample_id.clone(),
                expected: "face",
                actual: f.modality.as_str(),
            });
        }
        let v = store.record(&trial.voice_sample_id)?;
        if v.modality != Modality::Voice {
            return Err(Error::ModalityMismatch {
                id: v.sample_id.clone(),
                expected: "voice",
                actual: v.modality.as_str(),
            });
        }
        if f.dim != params.face_dim() || v.dim != params.voice_dim() {
            return Err(Error::InvalidArgument(format!(
                "sample dims ({}, {}) do not match model dims ({}, {})",
                f.dim,
                v.dim,
                params.face_dim(),
                params.voice_dim()
            )));
        }
        face_index
            .entry(trial.face_sample_id.clone())
            .or_insert_with(|| {
                face_ids.push(trial.face_sample_id.clone());
                face_ids.len() - 1
            });
        voice_index
            .entry(trial.voice_sample_id.clone())
            .or_insert_with(|| {
                voice_ids.push(trial.voice_sample_id.clone());
                voice_ids.len() - 1
            });
    }
    if trials.is_empty() {
        return Ok(());
    }

    let face_latent = project_rows(params, store, &face_ids, Modality::Face)?;
    let voice_latent = project_rows(params, store, &voice_ids, Modality::Voice)?;
    let d = params.latent_dim();

    for trial in trials.iter_mut() {
        let fi = face_index[trial.face_sample_id.as_str()];
        let vi = voice_index[trial.voice_sample_id.as_str()];
        let f = &face_latent[fi * d..(fi + 1) * d];
        let v = &voice_latent[vi * d..(vi + 1) * d];
        let dot: S = f.iter().zip(v).map(|(&a, &b)| a * b).sum();
        trial.score = Some(dot);
    }
    Ok(())
}

/// Projects the given samples into the latent space and l2-normalizes the
/// rows, reusing the tape ops so inference math matches training math.
fn project_rows<S: Scalar>(
    params: &RfopParams<S>,
    store: &FeatureStore,
    ids: &[String],
    modality: Modality,
) -> Result<Vec<S>> {
    let dim = match modality {
        Modality::Face => params.face_dim(),
        Modality::Voice => params.voice_dim(),
    };
    let mut data = Vec::with_capacity(ids.len() * dim);
    for id in ids {
        data.extend(store.feature_as::<S>(id)?);
    }
    let feats = Tensor::from_vec(vec![ids.len(), dim], data)?;

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let leaf = tape.leaf(&feats);
    let latent = match modality {
        Modality::Face => {
            let wf_t = tape.transpose(vars.w_face)?;
            let x = tape.matmul(leaf, wf_t)?;
            tape.add_bias(x, vars.b_face)?
        }
        Modality::Voice => {
            let wv_t = tape.transpose(vars.w_voice)?;
            let x = tape.matmul(leaf, wv_t)?;
            tape.add_bias(x, vars.b_voice)?
        }
    };
    let normalized = tape.l2_normalize(latent, S::from_f64(OPL_NORM_EPS))?;
    Ok(tape.value(normalized).to_vec())
}

// ── ROC and EER ─────────────────────────────────────────────────────────

fn split_scores<S: Scalar>(trials: &[Trial<S>]) -> Result<(Vec<S>, Vec<S>)> {
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for t in trials {
        let score = t.score.ok_or_else(|| {
            Error::InvalidArgument(format!(
                "trial ({}, {}) has no score",
                t.face_sample_id, t.voice_sample_id
            ))
        })?;
        if !score.is_finite() {
            return Err(Error::NonFinite(format!(
                "score of trial ({}, {})",
                t.face_sample_id, t.voice_sample_id
            )));
        }
        match t.label {
            TrialLabel::Same => same.push(score),
            TrialLabel::Different => diff.push(score),
        }
    }
    if same.is_empty() || diff.is_empty() {
        return Err(Error::InvalidArgument(
            "EER needs at least one same-identity and one different-identity trial".into(),
        ));
    }
    Ok((same, diff))
}

/// FAR/FRR at every distinct score threshold, bracketed by -inf/+inf
/// sentinels. FAR is nonincreasing and FRR nondecreasing in the threshold.
pub fn roc_curve<S: Scalar>(trials: &[Trial<S>]) -> Result<Vec<RocPoint<S>>> {
    let (same, diff) = split_scores(trials)?;
    roc_from_scores(&same, &diff)
}

pub(crate) fn roc_from_scores<S: Scalar>(same: &[S], diff: &[S]) -> Result<Vec<RocPoint<S>>> {
    let mut thresholds: Vec<S> = same.iter().chain(diff.iter()).copied().collect();
    thresholds.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    thresholds.dedup();
    thresholds.insert(0, S::neg_infinity());
    thresholds.push(S::infinity());

    let n_same = S::from_f64(same.len() as f64);
    let n_diff = S::from_f64(diff.len() as f64);
    let points = thresholds
        .into_iter()
        .map(|t| {
            let accepted_diff = diff.iter().filter(|&&s| s >= t).count();
            let rejected_same = same.iter().filter(|&&s| s < t).count();
            RocPoint {
                threshold: t,
                far: S::from_f64(accepted_diff as f64) / n_diff,
                frr: S::from_f64(rejected_same as f64) / n_same,
            }
        })
        .collect();
    Ok(points)
}

/// The equal error rate as a percentage, with the threshold it occurs at.
///
/// `far - frr` is nonincreasing along the swept thresholds, from +1 at
/// -inf to -1 at +inf. An exact zero is returned directly; otherwise both
/// rates are interpolated linearly to the sign change.
pub fn compute_eer<S: Scalar>(trials: &[Trial<S>]) -> Result<EerResult<S>> {
    let (same, diff) = split_scores(trials)?;
    eer_from_scores(&same, &diff)
}

pub(crate) fn eer_from_scores<S: Scalar>(same: &[S], diff: &[S]) -> Result<EerResult<S>> {
    let points = roc_from_scores(same, diff)?;
    let hundred = S::from_f64(100.0);
    for pair in points.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        let d_lo = lo.far - lo.frr;
        let d_hi = hi.far - hi.frr;
        if d_lo == S::zero() {
            return Ok(EerResult {
                eer_percent: hundred * lo.far,
                threshold: lo.threshold,
            });
        }
        if d_lo > S::zero() && d_hi < S::zero() {
            let alpha = d_lo / (d_lo - d_hi);
            let rate = lo.far + alpha * (hi.far - lo.far);
            let threshold = if !lo.threshold.is_finite() {
                hi.threshold
            } else if !hi.threshold.is_finite() {
                lo.threshold
            } else {
                lo.threshold + alpha * (hi.threshold - lo.threshold)
            };
            return Ok(EerResult {
                eer_percent: hundred * rate,
                threshold,
            });
        }
    }
    // far - frr is nonincreasing from +1 to -1, so the sweep always finds
    // an exact zero or a sign change.
    unreachable!("no EER crossing found in a monotone far-frr sweep")
}

/// Arithmetic mean of the four train/test language cells.
pub fn overall_score<S: Scalar>(cells: &[S; 4]) -> S {
    let four = S::from_f64(4.0);
    (cells[0] + cells[1] + cells[2] + cells[3]) / four
}

/// One-decimal percentage, the reporting precision of EER tables.
pub fn format_eer<S: Scalar>(eer_percent: S) -> String {
    format!("{:.1}", eer_percent.into_f64())
}

// ── Cross-language report ───────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct EvalCell<S> {
    pub train_lang: String,
    pub test_lang: String,
    pub eer_percent: S,
}

#[derive(Debug, Clone)]
pub struct EvalMatrix<S> {
    pub cells: Vec<EvalCell<S>>,
    pub overall: S,
}

impl<S: Scalar> EvalMatrix<S> {
    /// CSV rows `train_lang,test_lang,eer` plus a final `overall,,<mean>`.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{REPORT_HEADER}");
        for cell in &self.cells {
            let _ = writeln!(
                out,
                "{},{},{}",
                cell.train_lang,
                cell.test_lang,
                format_eer(cell.eer_percent)
            );
        }
        let _ = writeln!(out, "overall,,{}", format_eer(self.overall));
        out
    }
}

/// Evaluates each trained model against each per-language trial set and
/// fills the train-language x test-language EER matrix.
pub fn cross_config_report<S: Scalar>(
    runs: &[(String, &RfopParams<S>)],
    splits: &[(String, &FeatureStore, &[Trial<S>])],
) -> Result<EvalMatrix<S>> {
    if runs.is_empty() || splits.is_empty() {
        return Err(Error::InvalidArgument(
            "cross_config_report needs at least one run and one split".into(),
        ));
    }
    let mut cells = Vec::new();
    let mut total = S::zero();
    for (train_lang, params) in runs {
        for (test_lang, store, trials) in splits {
            let mut scored: Vec<Trial<S>> = trials.to_vec();
            score_trials(params, store, &mut scored)?;
            let eer = compute_eer(&scored)?;
            total += eer.eer_percent;
            cells.push(EvalCell {
                train_lang: train_lang.clone(),
                test_lang: test_lang.clone(),
                eer_percent: eer.eer_percent,
            });
        }
    }
    let overall = total / S::from_f64(cells.len() as f64);
    Ok(EvalMatrix { cells, overall })
}

// ── External file formats ───────────────────────────────────────────────

/// Trials CSV: `face_sample_id,voice_sample_id,label`, label 1 = same.
pub fn read_trials<S: Scalar>(path: &Path) -> Result<Vec<Trial<S>>> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let malformed = |line: usize, msg: String| Error::Malformed {
        path: name.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == TRIALS_HEADER => {}
        Some((_, h)) => {
            return Err(malformed(
                1,
                format!("expected header `{TRIALS_HEADER}`, got `{h}`"),
            ))
        }
        None => return Err(malformed(1, "empty trials file".into())),
    }
    let mut trials = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(malformed(
                idx + 1,
                format!("expected 3 fields, got {}", fields.len()),
            ));
        }
        let label = match fields[2] {
            "1" => TrialLabel::Same,
            "0" => TrialLabel::Different,
            other => return Err(malformed(idx + 1, format!("label must be 0 or 1, got `{other}`"))),
        };
        trials.push(Trial::new(
            fields[0].to_string(),
            fields[1].to_string(),
            label,
        ));
    }
    Ok(trials)
}

pub fn write_trials<S: Scalar>(trials: &[Trial<S>], path: &Path) -> Result<()> {
    let mut out = String::new();
    let _ = writeln!(out, "{TRIALS_HEADER}");
    for t in trials {
        let label = match t.label {
            TrialLabel::Same => 1,
            TrialLabel::Different => 0,
        };
        let _ = writeln!(out, "{},{},{}", t.face_sample_id, t.voice_sample_id, label);
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Scores CSV: `score,label` with label 1 = same. Returns (same, diff).
pub fn read_scores(path: &Path) -> Result<(Vec<f64>, Vec<f64>)> {
    let name = path.display().to_string();
    let text = std::fs::read_to_string(path)?;
    let malformed = |line: usize, msg: String| Error::Malformed {
        path: name.clone(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == SCORES_HEADER => {}
        Some((_, h)) => {
            return Err(malformed(
                1,
                format!("expected header `{SCORES_HEADER}`, got `{h}`"),
            ))
        }
        None => return Err(malformed(1, "empty scores file".into())),
    }
    let mut same = Vec::new();
    let mut diff = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 {
            return Err(malformed(
                idx + 1,
                format!("expected 2 fields, got {}", fields.len()),
            ));
        }
        let score: f64 = fields[0]
            .parse()
            .map_err(|_| malformed(idx + 1, format!("bad score `{}`", fields[0])))?;
        if !score.is_finite() {
            return Err(malformed(idx + 1, "score must be finite".into()));
        }
        match fields[1] {
            "1" => same.push(score),
            "0" => diff.push(score),
            other => return Err(malformed(idx + 1, format!("label must be 0 or 1, got `{other}`"))),
        }
    }
    Ok((same, diff))
}

/// EER over bare score lists, the entry point for the standalone command.
pub fn eer_of_scores(same: &[f64], diff: &[f64]) -> Result<EerResult<f64>> {
    if same.is_empty() || diff.is_empty() {
        return Err(Error::InvalidArgument(
            "EER needs at least one same-identity and one different-identity score".into(),
        ));
    }
    eer_from_scores(same, diff)
}
