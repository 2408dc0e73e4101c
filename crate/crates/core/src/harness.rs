//! Run orchestration behind the command-line interface: flat-file run
//! configuration, corpus generation, training, evaluation, the stream /
//! alignment ablation sweep, and the 2-D embedding export.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::io;
use crate::model::{HyperParams, SignModel, StreamFlags};
use crate::pca;
use crate::synth::{self, Corpus, SyntheticConfig};
use crate::train::{self, EvalReport, TrainSettings};

// ── run configuration ────────────────────────────────────────────────────────

/// Everything a run needs, parsed from a flat `key=value` file. Every key
/// is optional; missing keys keep their defaults and unknown keys are
/// rejected by name.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub hp: HyperParams,
    pub synth: SyntheticConfig,
    pub train: TrainSettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            hp: HyperParams::default(),
            synth: SyntheticConfig::default(),
            train: TrainSettings::default(),
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, raw: &str) -> Result<T> {
    raw.parse()
        .map_err(|_| Error::config(format!("config key {key}: cannot parse {raw:?}")))
}

/// Parse a run configuration, starting from defaults.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let kv = io::parse_kv(text)?;
    let mut cfg = RunConfig::default();
    for (k, v) in &kv {
        match k.as_str() {
            "seed" => cfg.seed = num(k, v)?,
            "d_model" => cfg.hp.d_model = num(k, v)?,
            "n_heads" => cfg.hp.n_heads = num(k, v)?,
            "prompt_len" => cfg.hp.prompt_len = num(k, v)?,
            "tau" => cfg.hp.tau = num(k, v)?,
            "alpha" => cfg.hp.alpha = num(k, v)?,
            "beta" => cfg.hp.beta = num(k, v)?,
            "lora_rank" => cfg.hp.lora_rank = num(k, v)?,
            "lora_scale" => cfg.hp.lora_scale = num(k, v)?,
            "kernel_width" => cfg.hp.kernel_width = num(k, v)?,
            "base_res" => cfg.hp.base_res = num(k, v)?,
            "mouth_h" => cfg.hp.mouth_h = num(k, v)?,
            "mouth_w" => cfg.hp.mouth_w = num(k, v)?,
            "margin" => cfg.hp.margin = num(k, v)?,
            "max_len" => cfg.hp.max_len = num(k, v)?,
            "lr" => cfg.train.lr = num(k, v)?,
            "weight_decay" => cfg.train.weight_decay = num(k, v)?,
            "epochs" => cfg.train.epochs = num(k, v)?,
            "batch_size" => cfg.train.batch_size = num(k, v)?,
            "n_signs" => cfg.synth.n_signs = num(k, v)?,
            "n_pairs" => cfg.synth.n_pairs = num(k, v)?,
            "frames_per_sign" => cfg.synth.frames_per_sign = num(k, v)?,
            "sent_min" => cfg.synth.sent_min = num(k, v)?,
            "sent_max" => cfg.synth.sent_max = num(k, v)?,
            "frame_h" => cfg.synth.frame_h = num(k, v)?,
            "frame_w" => cfg.synth.frame_w = num(k, v)?,
            "frame_c" => {
                cfg.synth.frame_c = num(k, v)?;
                cfg.hp.frame_c = cfg.synth.frame_c;
            }
            "noise_sigma" => cfg.synth.noise_sigma = num(k, v)?,
            "train_size" => cfg.synth.train_size = num(k, v)?,
            "valid_size" => cfg.synth.valid_size = num(k, v)?,
            "test_size" => cfg.synth.test_size = num(k, v)?,
            "test_pair_bias" => cfg.synth.test_pair_bias = num(k, v)?,
            _ => return Err(Error::config(format!("unknown config key {k:?}"))),
        }
    }
    cfg.synth.validate()?;
    Ok(cfg)
}

/// Read an optional config file and apply an optional seed override.
pub fn load_run_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => parse_run_config(&fs::read_to_string(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

// ── shared helpers ───────────────────────────────────────────────────────────

/// Refuse to clobber an existing file unless `force` is set.
fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::contract(format!(
            "{} already exists (pass --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn sentences(samples: &[synth::Sample]) -> Vec<String> {
    samples.iter().map(|s| s.sentence.clone()).collect()
}

fn init_model(cfg: &RunConfig, corpus: &Corpus) -> Result<SignModel> {
    if cfg.hp.frame_c != corpus.config.frame_c {
        return Err(Error::config(format!(
            "config frame_c {} does not match corpus frame_c {}",
            cfg.hp.frame_c, corpus.config.frame_c
        )));
    }
    let vocab = synth::full_vocabulary(&corpus.config);
    SignModel::init(cfg.seed, cfg.hp.clone(), vocab)
}

// ── commands ─────────────────────────────────────────────────────────────────

/// `generate`: synthesize a corpus and write it under `out`.
pub fn cmd_generate(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    let corpus = synth::generate_corpus(&cfg.synth, cfg.seed)?;
    io::write_corpus(out, &corpus, force)?;
    Ok(format!(
        "wrote corpus to {}: {} train / {} valid / {} test samples, {} signs ({} ambiguous pairs)",
        out.display(),
        corpus.train.len(),
        corpus.valid.len(),
        corpus.test.len(),
        cfg.synth.n_signs,
        cfg.synth.n_pairs,
    ))
}

/// `train`: fit a model on a stored corpus; writes `train_log.tsv` and
/// `model.ckpt` under `out`. The log is flushed row by row so a divergence
/// abort still leaves every completed epoch on disk.
pub fn cmd_train(cfg: &RunConfig, corpus_dir: &Path, out: &Path, force: bool) -> Result<String> {
    let corpus = io::read_corpus(corpus_dir)?;
    let mut model = init_model(cfg, &corpus)?;
    fs::create_dir_all(out)?;
    let log_path = out.join("train_log.tsv");
    let ckpt_path = out.join("model.ckpt");
    guard(&log_path, force)?;
    guard(&ckpt_path, force)?;

    let train_feats = train::precompute_features(&model, &corpus.train)?;
    let valid_feats = train::precompute_features(&model, &corpus.valid)?;
    let train_refs = sentences(&corpus.train);
    let valid_refs = sentences(&corpus.valid);

    let mut log_file = fs::File::create(&log_path)?;
    writeln!(log_file, "epoch\tl_trans\tl_vt\tl_sm\tl_total\tvalid_bleu4")?;
    let mut sink = |row: &train::EpochLog| -> Result<()> {
        writeln!(
            log_file,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            row.epoch, row.l_trans, row.l_vt, row.l_sm, row.l_total, row.valid_bleu4
        )?;
        log_file.flush()?;
        Ok(())
    };
    let flags = StreamFlags::full();
    let log = train::train_model(
        &mut model,
        &train_feats,
        &train_refs,
        &valid_feats,
        &valid_refs,
        &flags,
        &cfg.train,
        cfg.seed,
        Some(&mut sink),
    )?;
    io::write_checkpoint(&ckpt_path, &model)?;
    let last = log.last().expect("at least one epoch");
    Ok(format!(
        "trained {} epochs on {} samples; final l_total {:.4}, valid BLEU-4 {:.4}; wrote {} and {}",
        log.len(),
        corpus.train.len(),
        last.l_total,
        last.valid_bleu4,
        log_path.display(),
        ckpt_path.display(),
    ))
}

fn write_eval_files(
    out: &Path,
    corpus: &Corpus,
    report: &EvalReport,
    force: bool,
) -> Result<(std::path::PathBuf, std::path::PathBuf)> {
    fs::create_dir_all(out)?;
    let eval_path = out.join("eval.tsv");
    let hyp_path = out.join("hypotheses.tsv");
    guard(&eval_path, force)?;
    guard(&hyp_path, force)?;
    let mut text = String::from("metric\tvalue\n");
    for (name, value) in [
        ("bleu1", report.scores.bleu1),
        ("bleu2", report.scores.bleu2),
        ("bleu3", report.scores.bleu3),
        ("bleu4", report.scores.bleu4),
        ("rouge_l", report.scores.rouge_l),
        ("l_trans", report.losses.l_trans),
        ("l_vt", report.losses.l_vt),
        ("l_sm", report.losses.l_sm),
        ("l_total", report.losses.l_total),
    ] {
        writeln!(text, "{name}\t{value:.6}").expect("string write");
    }
    writeln!(text, "pairs\t{}", report.scores.pairs).expect("string write");
    fs::write(&eval_path, text)?;

    let mut hyps = String::from("id\treference\thypothesis\n");
    for (sample, hyp) in corpus.test.iter().zip(&report.hypotheses) {
        writeln!(hyps, "{}\t{}\t{}", sample.id, sample.sentence, hyp).expect("string write");
    }
    fs::write(&hyp_path, hyps)?;
    Ok((eval_path, hyp_path))
}

/// `eval`: score a checkpoint on a stored corpus's test split; writes
/// `eval.tsv` (metrics and losses) and `hypotheses.tsv` under `out`.
pub fn cmd_eval(
    ckpt: &Path,
    corpus_dir: &Path,
    out: &Path,
    batch_size: usize,
    force: bool,
) -> Result<String> {
    let model = io::read_checkpoint(ckpt)?;
    let corpus = io::read_corpus(corpus_dir)?;
    let feats = train::precompute_features(&model, &corpus.test)?;
    let refs = sentences(&corpus.test);
    let report = train::evaluate(&model, &feats, &refs, &StreamFlags::full(), batch_size)?;
    let (eval_path, hyp_path) = write_eval_files(out, &corpus, &report, force)?;
    Ok(format!(
        "evaluated {} test samples: BLEU-4 {:.4}, ROUGE-L {:.4}; wrote {} and {}",
        corpus.test.len(),
        report.scores.bleu4,
        report.scores.rouge_l,
        eval_path.display(),
        hyp_path.display(),
    ))
}

// ── ablation ─────────────────────────────────────────────────────────────────

/// One trained-and-scored ablation variant.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: &'static str,
    pub flags: StreamFlags,
    pub eval: EvalReport,
}

/// The sweep order: single streams first, then the fused model, then each
/// alignment loss switched in.
pub fn ablation_variants() -> [(&'static str, StreamFlags); 6] {
    let f = |spatial, mouth, align_vt, align_sm| StreamFlags { spatial, mouth, align_vt, align_sm };
    [
        ("gesture_only", f(true, false, false, false)),
        ("mouthing_only", f(false, true, false, false)),
        ("gesture+mouthing", f(true, true, false, false)),
        ("gesture+text_align", f(true, false, true, false)),
        ("gesture+mouthing+text_align", f(true, true, true, false)),
        ("full", f(true, true, true, true)),
    ]
}

/// Train and score every variant on one corpus. All variants share the
/// same parameter initialization (same seed) and the same precomputed
/// frozen-encoder features, so rows differ only in which streams and
/// alignment losses are active.
pub fn run_ablation(cfg: &RunConfig, corpus: &Corpus) -> Result<Vec<AblationRow>> {
    let reference = init_model(cfg, corpus)?;
    let train_feats = train::precompute_features(&reference, &corpus.train)?;
    let test_feats = train::precompute_features(&reference, &corpus.test)?;
    let train_refs = sentences(&corpus.train);
    let test_refs = sentences(&corpus.test);

    let mut rows = Vec::with_capacity(6);
    for (label, flags) in ablation_variants() {
        let mut model = init_model(cfg, corpus)?;
        train::train_model(
            &mut model,
            &train_feats,
            &train_refs,
            &[],
            &[],
            &flags,
            &cfg.train,
            cfg.seed,
            None,
        )?;
        let eval = train::evaluate(&model, &test_feats, &test_refs, &flags, cfg.train.batch_size)?;
        rows.push(AblationRow { label, flags, eval });
    }
    Ok(rows)
}

fn flag_bit(b: bool) -> u8 {
    u8::from(b)
}

/// `ablate`: generate a corpus in memory, run the sweep, and write
/// `ablation.tsv` under `out`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, force: bool) -> Result<String> {
    let corpus = synth::generate_corpus(&cfg.synth, cfg.seed)?;
    let rows = run_ablation(cfg, &corpus)?;
    fs::create_dir_all(out)?;
    let path = out.join("ablation.tsv");
    guard(&path, force)?;
    let mut text = String::from(
        "variant\tgesture\tmouthing\ttext_align\tstream_align\tbleu1\tbleu2\tbleu3\tbleu4\trouge_l\tl_trans\tl_total\n",
    );
    for row in &rows {
        writeln!(
            text,
            "{}\t{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            row.label,
            flag_bit(row.flags.spatial),
            flag_bit(row.flags.mouth),
            flag_bit(row.flags.align_vt),
            flag_bit(row.flags.align_sm),
            row.eval.scores.bleu1,
            row.eval.scores.bleu2,
            row.eval.scores.bleu3,
            row.eval.scores.bleu4,
            row.eval.scores.rouge_l,
            row.eval.losses.l_trans,
            row.eval.losses.l_total,
        )
        .expect("string write");
    }
    fs::write(&path, text)?;
    let full = rows.last().expect("six variants");
    let solo = &rows[0];
    Ok(format!(
        "ablation over {} variants complete: full BLEU-4 {:.4} vs gesture-only {:.4}; wrote {}",
        rows.len(),
        full.eval.scores.bleu4,
        solo.eval.scores.bleu4,
        path.display(),
    ))
}

// ── embedding export ─────────────────────────────────────────────────────────

/// `export-emb`: project per-frame fused embeddings of the test split onto
/// their two principal directions and write one labeled row per frame.
pub fn cmd_export_embeddings(
    ckpt: &Path,
    corpus_dir: &Path,
    out_file: &Path,
    force: bool,
) -> Result<String> {
    let model = io::read_checkpoint(ckpt)?;
    let corpus = io::read_corpus(corpus_dir)?;
    guard(out_file, force)?;
    let flags = StreamFlags::full();
    let d = model.hp.d_model;

    let mut rows: Vec<f64> = Vec::new();
    let mut labels: Vec<String> = Vec::new();
    for sample in &corpus.test {
        let feats = model.encode_sample(&sample.video, &sample.landmarks)?;
        let (values, t) = model.fused_rows(&feats, &flags)?;
        for frame in 0..t {
            let sign_idx = synth::aligned_sign_index(&corpus.config, frame);
            let sign = *sample.signs.get(sign_idx).ok_or_else(|| {
                Error::contract(format!(
                    "frame {frame} of sample {} maps past its {} signs",
                    sample.id,
                    sample.signs.len()
                ))
            })?;
            rows.extend_from_slice(&values[frame * d..(frame + 1) * d]);
            labels.push(synth::sign_token(sign));
        }
    }
    let distinct: std::collections::BTreeSet<&str> =
        labels.iter().map(|tok| tok.as_str()).collect();
    if distinct.len() < 3 {
        return Err(Error::degenerate(format!(
            "embedding export needs at least 3 distinct sign tokens, found {}",
            distinct.len()
        )));
    }
    let n = labels.len();
    let fitted = pca::fit_pca2(&rows, n, d)?;
    let mut text = String::from("token\tx\ty\n");
    for (i, token) in labels.iter().enumerate() {
        let (x, y) = fitted.project(&rows[i * d..(i + 1) * d])?;
        writeln!(text, "{token}\t{x:.6}\t{y:.6}").expect("string write");
    }
    if let Some(parent) = out_file.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(out_file, text)?;
    Ok(format!(
        "exported {n} frame embeddings over {} sign tokens (explained variance {:.3} + {:.3}) to {}",
        distinct.len(),
        fitted.explained[0],
        fitted.explained[1],
        out_file.display(),
    ))
}

// ── tests ────────────────────────────────────────────────────────────────────
