//! On-disk formats.
//!
//! * `.video` — binary: four `u32` little-endian header fields
//!   `(t, h, w, c)` followed by `t·h·w·c` row-major `f64` little-endian
//!   values.
//! * `.lmk` — text: one line per frame holding 136 comma-separated reals
//!   (68 landmarks × x,y); `#` lines are comments.
//! * corpus directory — `train/`, `valid/`, `test/` each holding per-sample
//!   `.video`/`.lmk` pairs plus a `targets.tsv` (header `id<TAB>sentence`),
//!   and a top-level `corpus.meta` echoing the generator configuration.
//! * `.ckpt` — binary checkpoint: magic, version, seed, a key=value echo of
//!   the hyperparameters, the vocabulary token list, then every named
//!   tensor with its shape and raw `f64` bytes. Round-trips bit-exactly.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::encoders::{FrameSequence, LandmarkStream, N_LANDMARKS};
use crate::error::{Error, Result};
use crate::model::{HyperParams, SignModel};
use crate::synth::{Corpus, Sample, SyntheticConfig};

const CKPT_MAGIC: &[u8; 8] = b"SGNFCKP1";
const CKPT_VERSION: u32 = 1;

// ── primitive readers/writers ────────────────────────────────────────────────

fn write_u32(w: &mut impl Write, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_u64(w: &mut impl Write, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64s(w: &mut impl Write, vals: &[f64]) -> Result<()> {
    for v in vals {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes)?;
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn read_str(r: &mut impl Read) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 20 {
        return Err(Error::format(format!("unreasonable string length {len}")));
    }
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    String::from_utf8(bytes).map_err(|e| Error::format(format!("invalid utf-8: {e}")))
}

// ── key=value blocks ─────────────────────────────────────────────────────────

/// Parse `key=value` lines; `#` lines and blanks are skipped; order is
/// preserved; duplicate keys error.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out: Vec<(String, String)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            Error::format(format!("line {}: expected key=value, got {line:?}", lineno + 1))
        })?;
        let key = k.trim().to_string();
        if out.iter().any(|(existing, _)| *existing == key) {
            return Err(Error::format(format!("duplicate key {key}")));
        }
        out.push((key, v.trim().to_string()));
    }
    Ok(out)
}

fn kv_get<'a>(kv: &'a [(String, String)], key: &str) -> Result<&'a str> {
    kv.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::format(format!("missing key {key}")))
}

fn parse_num<T: std::str::FromStr>(kv: &[(String, String)], key: &str) -> Result<T> {
    let raw = kv_get(kv, key)?;
    raw.parse().map_err(|_| Error::format(format!("key {key}: cannot parse {raw:?}")))
}

// ── video container ──────────────────────────────────────────────────────────

pub fn write_video(path: &Path, video: &FrameSequence) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for dim in [video.t, video.h, video.w, video.c] {
        write_u32(&mut w, dim as u32)?;
    }
    write_f64s(&mut w, video.data())?;
    w.flush()?;
    Ok(())
}

pub fn read_video(path: &Path) -> Result<FrameSequence> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let t = read_u32(&mut r)? as usize;
    let h = read_u32(&mut r)? as usize;
    let w = read_u32(&mut r)? as usize;
    let c = read_u32(&mut r)? as usize;
    let numel = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| Error::format("video header overflows".to_string()))?;
    if numel > 1 << 30 {
        return Err(Error::format(format!("video of {numel} values is implausibly large")));
    }
    let data = read_f64s(&mut r, numel)?;
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::format("trailing bytes after video payload".to_string()));
    }
    FrameSequence::new(t, h, w, c, data)
}

// ── landmark container ───────────────────────────────────────────────────────

pub fn write_landmarks(path: &Path, lmk: &LandmarkStream) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "# {} landmarks per frame as x,y pairs; one frame per line", N_LANDMARKS)?;
    for f in 0..lmk.t {
        let line =
            lmk.frame(f).iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",");
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_landmarks(path: &Path) -> Result<LandmarkStream> {
    let r = BufReader::new(fs::File::open(path)?);
    let mut data = Vec::new();
    let mut frames = 0usize;
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let vals: Vec<f64> = line
            .split(',')
            .map(|tok| {
                tok.trim().parse::<f64>().map_err(|_| {
                    Error::format(format!("line {}: bad number {tok:?}", lineno + 1))
                })
            })
            .collect::<Result<_>>()?;
        if vals.len() != N_LANDMARKS * 2 {
            return Err(Error::format(format!(
                "line {}: expected {} values, got {}",
                lineno + 1,
                N_LANDMARKS * 2,
                vals.len()
            )));
        }
        data.extend(vals);
        frames += 1;
    }
    LandmarkStream::new(frames, data)
}

// ── corpus directory ─────────────────────────────────────────────────────────

fn config_kv(cfg: &SyntheticConfig) -> Vec<(String, String)> {
    vec![
        ("n_signs".into(), cfg.n_signs.to_string()),
        ("n_pairs".into(), cfg.n_pairs.to_string()),
        ("frames_per_sign".into(), cfg.frames_per_sign.to_string()),
        ("sent_min".into(), cfg.sent_min.to_string()),
        ("sent_max".into(), cfg.sent_max.to_string()),
        ("frame_h".into(), cfg.frame_h.to_string()),
        ("frame_w".into(), cfg.frame_w.to_string()),
        ("frame_c".into(), cfg.frame_c.to_string()),
        ("noise_sigma".into(), cfg.noise_sigma.to_string()),
        ("train_size".into(), cfg.train_size.to_string()),
        ("valid_size".into(), cfg.valid_size.to_string()),
        ("test_size".into(), cfg.test_size.to_string()),
        ("test_pair_bias".into(), cfg.test_pair_bias.to_string()),
    ]
}

fn config_from_kv(kv: &[(String, String)]) -> Result<SyntheticConfig> {
    Ok(SyntheticConfig {
        n_signs: parse_num(kv, "n_signs")?,
        n_pairs: parse_num(kv, "n_pairs")?,
        frames_per_sign: parse_num(kv, "frames_per_sign")?,
        sent_min: parse_num(kv, "sent_min")?,
        sent_max: parse_num(kv, "sent_max")?,
        frame_h: parse_num(kv, "frame_h")?,
        frame_w: parse_num(kv, "frame_w")?,
        frame_c: parse_num(kv, "frame_c")?,
        noise_sigma: parse_num(kv, "noise_sigma")?,
        train_size: parse_num(kv, "train_size")?,
        valid_size: parse_num(kv, "valid_size")?,
        test_size: parse_num(kv, "test_size")?,
        test_pair_bias: parse_num(kv, "test_pair_bias")?,
    })
}

fn write_split(dir: &Path, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tsv = BufWriter::new(fs::File::create(dir.join("targets.tsv"))?);
    writeln!(tsv, "id\tsentence")?;
    for s in samples {
        writeln!(tsv, "{}\t{}", s.id, s.sentence)?;
        write_video(&dir.join(format!("{}.video", s.id)), &s.video)?;
        write_landmarks(&dir.join(format!("{}.lmk", s.id)), &s.landmarks)?;
    }
    tsv.flush()?;
    Ok(())
}

fn read_split(dir: &Path, cfg: &SyntheticConfig) -> Result<Vec<Sample>> {
    let tsv = fs::read_to_string(dir.join("targets.tsv"))?;
    let mut lines = tsv.lines();
    match lines.next() {
        Some("id\tsentence") => {}
        other => {
            return Err(Error::format(format!(
                "targets.tsv must start with its header, got {other:?}"
            )))
        }
    }
    let mut samples = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, sentence) = line
            .split_once('\t')
            .ok_or_else(|| Error::format(format!("bad targets line {line:?}")))?;
        let video = read_video(&dir.join(format!("{id}.video")))?;
        let landmarks = read_landmarks(&dir.join(format!("{id}.lmk")))?;
        let signs: Vec<usize> = sentence
            .split_whitespace()
            .map(|tok| {
                tok.strip_prefix("sign")
                    .and_then(|digits| digits.parse::<usize>().ok())
                    .filter(|&s| s < cfg.n_signs)
                    .ok_or_else(|| Error::format(format!("unknown sign token {tok:?}")))
            })
            .collect::<Result<_>>()?;
        let contains_pair_sign = signs.iter().any(|&s| crate::synth::is_pair_sign(cfg, s));
        samples.push(Sample {
            id: id.to_string(),
            signs,
            sentence: sentence.to_string(),
            video,
            landmarks,
            contains_pair_sign,
        });
    }
    Ok(samples)
}

/// Write a corpus directory. Refuses to touch an existing directory unless
/// `force` is set (then it is removed first).
pub fn write_corpus(dir: &Path, corpus: &Corpus, force: bool) -> Result<()> {
    if dir.exists() {
        if !force {
            return Err(Error::contract(format!(
                "{} already exists; pass --force to overwrite",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir)?;
    }
    fs::create_dir_all(dir)?;
    let mut meta = BufWriter::new(fs::File::create(dir.join("corpus.meta"))?);
    writeln!(meta, "# synthetic sign corpus")?;
    writeln!(meta, "format_version=1")?;
    writeln!(meta, "seed={}", corpus.seed)?;
    writeln!(
        meta,
        "prng=chacha8 keyed by seed; sample streams: train 10000+i, valid 20000+i, test 30000+i"
    )?;
    for (k, v) in config_kv(&corpus.config) {
        writeln!(meta, "{k}={v}")?;
    }
    meta.flush()?;
    write_split(&dir.join("train"), &corpus.train)?;
    write_split(&dir.join("valid"), &corpus.valid)?;
    write_split(&dir.join("test"), &corpus.test)?;
    Ok(())
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let meta = fs::read_to_string(dir.join("corpus.meta"))?;
    let kv = parse_kv(&meta)?;
    let version: u32 = parse_num(&kv, "format_version")?;
    if version != 1 {
        return Err(Error::format(format!("unsupported corpus format_version {version}")));
    }
    let seed: u64 = parse_num(&kv, "seed")?;
    let config = config_from_kv(&kv)?;
    config.validate()?;
    Ok(Corpus {
        train: read_split(&dir.join("train"), &config)?,
        valid: read_split(&dir.join("valid"), &config)?,
        test: read_split(&dir.join("test"), &config)?,
        config,
        seed,
    })
}

// ── checkpoints ──────────────────────────────────────────────────────────────

fn hyperparams_kv(hp: &HyperParams) -> Vec<(String, String)> {
    vec![
        ("d_model".into(), hp.d_model.to_string()),
        ("n_heads".into(), hp.n_heads.to_string()),
        ("prompt_len".into(), hp.prompt_len.to_string()),
        ("tau".into(), hp.tau.to_string()),
        ("alpha".into(), hp.alpha.to_string()),
        ("beta".into(), hp.beta.to_string()),
        ("lora_rank".into(), hp.lora_rank.to_string()),
        ("lora_scale".into(), hp.lora_scale.to_string()),
        ("kernel_width".into(), hp.kernel_width.to_string()),
        ("base_res".into(), hp.base_res.to_string()),
        ("mouth_h".into(), hp.mouth_h.to_string()),
        ("mouth_w".into(), hp.mouth_w.to_string()),
        ("frame_c".into(), hp.frame_c.to_string()),
        ("margin".into(), hp.margin.to_string()),
        ("max_len".into(), hp.max_len.to_string()),
    ]
}

fn hyperparams_from_kv(kv: &[(String, String)]) -> Result<HyperParams> {
    Ok(HyperParams {
        d_model: parse_num(kv, "d_model")?,
        n_heads: parse_num(kv, "n_heads")?,
        prompt_len: parse_num(kv, "prompt_len")?,
        tau: parse_num(kv, "tau")?,
        alpha: parse_num(kv, "alpha")?,
        beta: parse_num(kv, "beta")?,
        lora_rank: parse_num(kv, "lora_rank")?,
        lora_scale: parse_num(kv, "lora_scale")?,
        kernel_width: parse_num(kv, "kernel_width")?,
        base_res: parse_num(kv, "base_res")?,
        mouth_h: parse_num(kv, "mouth_h")?,
        mouth_w: parse_num(kv, "mouth_w")?,
        frame_c: parse_num(kv, "frame_c")?,
        margin: parse_num(kv, "margin")?,
        max_len: parse_num(kv, "max_len")?,
    })
}

pub fn write_checkpoint(path: &Path, model: &SignModel) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    write_u32(&mut w, CKPT_VERSION)?;
    write_u64(&mut w, model.seed)?;
    let hp_text = hyperparams_kv(&model.hp)
        .into_iter()
        .map(|(k, v)| format!("{k}={v}"))
        .collect::<Vec<_>>()
        .join("\n");
    write_str(&mut w, &hp_text)?;
    let tokens = model.vocab.tokens();
    write_u32(&mut w, tokens.len() as u32)?;
    for tok in tokens {
        write_str(&mut w, tok)?;
    }
    let named = model.named_tensors();
    write_u32(&mut w, named.len() as u32)?;
    for (name, tensor) in named {
        write_str(&mut w, &name)?;
        w.write_all(&[tensor.requires_grad as u8])?;
        write_u32(&mut w, tensor.shape().len() as u32)?;
        for &d in tensor.shape() {
            write_u32(&mut w, d as u32)?;
        }
        write_f64s(&mut w, tensor.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<SignModel> {
    let mut r = BufReader::new(fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::format("not a checkpoint file (bad magic)".to_string()));
    }
    let version = read_u32(&mut r)?;
    if version != CKPT_VERSION {
        return Err(Error::format(format!("unsupported checkpoint version {version}")));
    }
    let seed = read_u64(&mut r)?;
    let hp = hyperparams_from_kv(&parse_kv(&read_str(&mut r)?)?)?;
    let n_tokens = read_u32(&mut r)? as usize;
    let tokens: Vec<String> = (0..n_tokens).map(|_| read_str(&mut r)).collect::<Result<_>>()?;
    let vocab = crate::decoder::Vocabulary::from_tokens(tokens)?;

    let mut model = SignModel::init(seed, hp, vocab)?;
    let n_tensors = read_u32(&mut r)? as usize;
    let expected = model.named_tensors().len();
    if n_tensors != expected {
        return Err(Error::format(format!(
            "checkpoint has {n_tensors} tensors, model expects {expected}"
        )));
    }
    for _ in 0..n_tensors {
        let name = read_str(&mut r)?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let rank = read_u32(&mut r)? as usize;
        let shape: Vec<usize> =
            (0..rank).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<_>>()?;
        let numel: usize = shape.iter().product();
        let data = read_f64s(&mut r, numel)?;
        let stored_grad = flag[0] != 0;
        let current_grad = model
            .named_tensors()
            .into_iter()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t.requires_grad);
        if current_grad != Some(stored_grad) {
            return Err(Error::format(format!(
                "tensor {name}: trainability flag mismatch (stored {stored_grad})"
            )));
        }
        model.set_tensor_data(&name, &shape, data)?;
    }
    Ok(model)
}

/// Convenience: tensor checksum equality between two models.
pub fn models_identical(a: &SignModel, b: &SignModel) -> bool {
    a.checksums() == b.checksums()
}

// ── tests ────────────────────────────────────────────────────────────────────
