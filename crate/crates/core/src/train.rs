//! Epoch-driven training and evaluation loops.
//!
//! Batch order is reshuffled every epoch from a dedicated generator stream,
//! so a run is fully reproducible from `(corpus seed, model seed, settings)`.
//! Each epoch reports sample-weighted mean losses plus greedy BLEU-4 on the
//! validation split; a non-finite loss aborts the run with the log rows
//! emitted so far intact.

use crate::error::Result;
use crate::metrics::{self, ScoreReport};
use crate::model::{assemble_batch, LossBreakdown, SampleFeatures, SignModel, StreamFlags};
use crate::optim::AdamW;
use crate::rng::Stream;
use crate::synth::Sample;

/// Generator stream ids `SHUFFLE_STREAM_BASE + epoch` drive batch order.
pub const SHUFFLE_STREAM_BASE: u64 = 40_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings { epochs: 30, batch_size: 16, lr: 5e-4, weight_decay: 0.01 }
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_trans: f64,
    pub l_vt: f64,
    pub l_sm: f64,
    pub l_total: f64,
    pub valid_bleu4: f64,
}

/// Run the frozen encoders over a slice of raw samples.
pub fn precompute_features(model: &SignModel, samples: &[Sample]) -> Result<Vec<SampleFeatures>> {
    samples
        .iter()
        .map(|s| model.encode_sample(&s.video, &s.landmarks))
        .collect()
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = Stream::new(seed, SHUFFLE_STREAM_BASE + epoch as u64);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.index(i + 1);
        idx.swap(i, j);
    }
    idx
}

/// Greedy-decode every sample and score BLEU-4 against the references.
pub fn greedy_bleu4(
    model: &SignModel,
    feats: &[SampleFeatures],
    references: &[String],
    flags: &StreamFlags,
) -> Result<f64> {
    let mut hyps = Vec::with_capacity(feats.len());
    for f in feats {
        hyps.push(model.translate_to_sentence(f, flags)?);
    }
    metrics::bleu(&hyps, references, 4)
}

/// Train `model` in place. `sink` receives each epoch's log row as soon as
/// it exists (so partial logs survive a divergence abort); the full log is
/// also returned on success.
pub fn train_model(
    model: &mut SignModel,
    train_feats: &[SampleFeatures],
    train_refs: &[String],
    valid_feats: &[SampleFeatures],
    valid_refs: &[String],
    flags: &StreamFlags,
    settings: &TrainSettings,
    shuffle_seed: u64,
    mut sink: Option<&mut dyn FnMut(&EpochLog) -> Result<()>>,
) -> Result<Vec<EpochLog>> {
    flags.validate()?;
    if settings.batch_size == 0 || settings.epochs == 0 {
        return Err(crate::error::Error::config(format!(
            "epochs and batch_size must be positive, got {} / {}",
            settings.epochs, settings.batch_size
        )));
    }
    if train_feats.len() != train_refs.len() || valid_feats.len() != valid_refs.len() {
        return Err(crate::error::Error::contract(
            "feature and reference counts differ".to_string(),
        ));
    }
    let mut opt = AdamW::new(settings.lr, settings.weight_decay);
    let mut log = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        let order = shuffled_indices(train_feats.len(), shuffle_seed, epoch);
        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for chunk in order.chunks(settings.batch_size) {
            let feats: Vec<SampleFeatures> =
                chunk.iter().map(|&i| train_feats[i].clone()).collect();
            let refs: Vec<String> = chunk.iter().map(|&i| train_refs[i].clone()).collect();
            let batch = assemble_batch(model, &feats, &refs)?;
            let losses = model.train_step(&batch, flags, &mut opt)?;
            let w = chunk.len() as f64;
            sums[0] += losses.l_trans * w;
            sums[1] += losses.l_vt * w;
            sums[2] += losses.l_sm * w;
            sums[3] += losses.l_total * w;
            seen += chunk.len();
        }
        let n = seen as f64;
        let row = EpochLog {
            epoch,
            l_trans: sums[0] / n,
            l_vt: sums[1] / n,
            l_sm: sums[2] / n,
            l_total: sums[3] / n,
            valid_bleu4: if valid_feats.is_empty() {
                0.0
            } else {
                greedy_bleu4(model, valid_feats, valid_refs, flags)?
            },
        };
        if let Some(s) = sink.as_deref_mut() {
            s(&row)?;
        }
        log.push(row);
    }
    Ok(log)
}

/// Losses plus corpus metrics on a held-out split.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub losses: LossBreakdown,
    pub scores: ScoreReport,
    pub hypotheses: Vec<String>,
}

/// Evaluate without touching parameters: sample-weighted mean losses over
/// fixed-order batches, plus greedy translations scored against references.
pub fn evaluate(
    model: &SignModel,
    feats: &[SampleFeatures],
    references: &[String],
    flags: &StreamFlags,
    batch_size: usize,
) -> Result<EvalReport> {
    flags.validate()?;
    if feats.is_empty() || feats.len() != references.len() {
        return Err(crate::error::Error::contract(format!(
            "evaluation needs matched non-empty inputs, got {} / {}",
            feats.len(),
            references.len()
        )));
    }
    let bs = batch_size.max(1);
    let mut sums = [0.0f64; 4];
    for start in (0..feats.len()).step_by(bs) {
        let end = (start + bs).min(feats.len());
        let batch = assemble_batch(model, &feats[start..end], &references[start..end])?;
        let losses = model.eval_batch(&batch, flags)?;
        let w = (end - start) as f64;
        sums[0] += losses.l_trans * w;
        sums[1] += losses.l_vt * w;
        sums[2] += losses.l_sm * w;
        sums[3] += losses.l_total * w;
    }
    let n = feats.len() as f64;
    let mut hypotheses = Vec::with_capacity(feats.len());
    for f in feats {
        hypotheses.push(model.translate_to_sentence(f, flags)?);
    }
    let scores = metrics::score_corpus(&hypotheses, references)?;
    Ok(EvalReport {
        losses: LossBreakdown {
            l_trans: sums[0] / n,
            l_vt: sums[1] / n,
            l_sm: sums[2] / n,
            l_total: sums[3] / n,
        },
        scores,
        hypotheses,
    })
}

// ── tests ────────────────────────────────────────────────────────────────────
