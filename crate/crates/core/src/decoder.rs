//! Toy autoregressive decoder with low-rank adapters.
//!
//! One pre-norm-free transformer block: causal multi-head self-attention,
//! cross-attention over a learned prompt concatenated with the visual memory,
//! and a ReLU feed-forward layer, each wrapped in a residual connection.
//! Low-rank adapters (`W·x + s·B·A·x`) sit on the self-attention query/value
//! maps and both feed-forward maps. Those four base maps are frozen at their
//! random init — only their adapters move — while everything else trains
//! directly.
//!
//! Token ids 0..=3 are reserved: `<pad>`, `<bos>`, `<eos>`, `<unk>`.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, Var};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;

// ── vocabulary ───────────────────────────────────────────────────────────────

/// Whitespace-token vocabulary with four reserved ids. Content tokens are
/// numbered in order of first appearance, so the mapping is a pure function
/// of the sentence list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_sentences<S: AsRef<str>>(sentences: &[S]) -> Vocabulary {
        let mut tokens: Vec<String> =
            ["<pad>", "<bos>", "<eos>", "<unk>"].iter().map(|s| s.to_string()).collect();
        let mut index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        for sent in sentences {
            for tok in sent.as_ref().split_whitespace() {
                if !index.contains_key(tok) {
                    index.insert(tok.to_string(), tokens.len());
                    tokens.push(tok.to_string());
                }
            }
        }
        Vocabulary { tokens, index }
    }

    /// Rebuild from an explicit token list (checkpoint restore). The first
    /// four entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Vocabulary> {
        let reserved = ["<pad>", "<bos>", "<eos>", "<unk>"];
        if tokens.len() < 4 || tokens[..4] != reserved.map(String::from) {
            return Err(Error::format(
                "vocabulary must start with <pad>, <bos>, <eos>, <unk>".to_string(),
            ));
        }
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() {
            return Err(Error::format("vocabulary contains duplicate tokens".to_string()));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the reserved tokens are always present
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Id for a token; unseen tokens map to `<unk>`.
    pub fn id(&self, token: &str) -> usize {
        *self.index.get(token).unwrap_or(&UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Content ids for a sentence (no specials added).
    pub fn encode(&self, sentence: &str) -> Vec<usize> {
        sentence.split_whitespace().map(|t| self.id(t)).collect()
    }

    /// Join content tokens back into a sentence, skipping all reserved ids.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&id| id > UNK || id == UNK)
            .filter(|&&id| id != PAD && id != BOS && id != EOS)
            .map(|&id| self.tokens[id].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

// ── positional encoding ──────────────────────────────────────────────────────

/// Fixed sinusoidal position table `[n, d]`:
/// `pe[p, 2i] = sin(p / 10000^{2i/d})`, `pe[p, 2i+1] = cos(p / 10000^{2i/d})`.
pub fn sinusoidal_positions(n: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; n * d];
    for p in 0..n {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = p as f64 / rate;
            pe[p * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

// ── parameters ───────────────────────────────────────────────────────────────

/// Trainable decoder parameters (one block).
#[derive(Debug, Clone)]
pub struct DecoderParams {
    pub d: usize,
    pub n_heads: usize,
    pub prompt_len: usize,
    pub vocab_size: usize,
    pub tok_embed: Tensor, // [V, d]
    pub prompt: Tensor,    // [P, d]
    pub self_q: Tensor,    // [d, d], bias-free
    pub self_k: Tensor,
    pub self_v: Tensor,
    pub self_o: Tensor,
    pub cross_q: Tensor,
    pub cross_k: Tensor,
    pub cross_v: Tensor,
    pub cross_o: Tensor,
    pub ffn_w1: Tensor, // [d, 4d]
    pub ffn_b1: Tensor, // [1, 4d]
    pub ffn_w2: Tensor, // [4d, d]
    pub ffn_b2: Tensor, // [1, d]
    pub out_w: Tensor,  // [d, V]
    pub out_b: Tensor,  // [1, V]
}

impl DecoderParams {
    pub fn init(
        stream: &mut Stream,
        d: usize,
        n_heads: usize,
        prompt_len: usize,
        vocab_size: usize,
    ) -> Result<DecoderParams> {
        if n_heads == 0 || d % n_heads != 0 {
            return Err(Error::config(format!(
                "model width {d} must divide evenly into {n_heads} heads"
            )));
        }
        if vocab_size <= UNK {
            return Err(Error::config(format!(
                "vocabulary must include the reserved tokens, got size {vocab_size}"
            )));
        }
        let sd = (d as f64).sqrt().recip();
        let sh = (4.0 * d as f64).sqrt().recip();
        Ok(DecoderParams {
            d,
            n_heads,
            prompt_len,
            vocab_size,
            tok_embed: Tensor::randn(stream, &[vocab_size, d], sd).trainable(),
            prompt: Tensor::randn(stream, &[prompt_len, d], sd).trainable(),
            // Adapter-carrying maps stay frozen; their low-rank deltas train.
            self_q: Tensor::randn(stream, &[d, d], sd),
            self_k: Tensor::randn(stream, &[d, d], sd).trainable(),
            self_v: Tensor::randn(stream, &[d, d], sd),
            self_o: Tensor::randn(stream, &[d, d], sd).trainable(),
            cross_q: Tensor::randn(stream, &[d, d], sd).trainable(),
            cross_k: Tensor::randn(stream, &[d, d], sd).trainable(),
            cross_v: Tensor::randn(stream, &[d, d], sd).trainable(),
            cross_o: Tensor::randn(stream, &[d, d], sd).trainable(),
            ffn_w1: Tensor::randn(stream, &[d, 4 * d], sd),
            ffn_b1: Tensor::zeros(&[1, 4 * d]).trainable(),
            ffn_w2: Tensor::randn(stream, &[4 * d, d], sh),
            ffn_b2: Tensor::zeros(&[1, d]).trainable(),
            out_w: Tensor::randn(stream, &[d, vocab_size], sd).trainable(),
            out_b: Tensor::zeros(&[1, vocab_size]).trainable(),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("decoder.tok_embed".into(), &self.tok_embed),
            ("decoder.prompt".into(), &self.prompt),
            ("decoder.self.q".into(), &self.self_q),
            ("decoder.self.k".into(), &self.self_k),
            ("decoder.self.v".into(), &self.self_v),
            ("decoder.self.o".into(), &self.self_o),
            ("decoder.cross.q".into(), &self.cross_q),
            ("decoder.cross.k".into(), &self.cross_k),
            ("decoder.cross.v".into(), &self.cross_v),
            ("decoder.cross.o".into(), &self.cross_o),
            ("decoder.ffn.w1".into(), &self.ffn_w1),
            ("decoder.ffn.b1".into(), &self.ffn_b1),
            ("decoder.ffn.w2".into(), &self.ffn_w2),
            ("decoder.ffn.b2".into(), &self.ffn_b2),
            ("decoder.out.w".into(), &self.out_w),
            ("decoder.out.b".into(), &self.out_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("decoder.tok_embed".into(), &mut self.tok_embed),
            ("decoder.prompt".into(), &mut self.prompt),
            ("decoder.self.q".into(), &mut self.self_q),
            ("decoder.self.k".into(), &mut self.self_k),
            ("decoder.self.v".into(), &mut self.self_v),
            ("decoder.self.o".into(), &mut self.self_o),
            ("decoder.cross.q".into(), &mut self.cross_q),
            ("decoder.cross.k".into(), &mut self.cross_k),
            ("decoder.cross.v".into(), &mut self.cross_v),
            ("decoder.cross.o".into(), &mut self.cross_o),
            ("decoder.ffn.w1".into(), &mut self.ffn_w1),
            ("decoder.ffn.b1".into(), &mut self.ffn_b1),
            ("decoder.ffn.w2".into(), &mut self.ffn_w2),
            ("decoder.ffn.b2".into(), &mut self.ffn_b2),
            ("decoder.out.w".into(), &mut self.out_w),
            ("decoder.out.b".into(), &mut self.out_b),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> DecoderVars {
        DecoderVars {
            d: self.d,
            n_heads: self.n_heads,
            prompt_len: self.prompt_len,
            vocab_size: self.vocab_size,
            tok_embed: tape.leaf(&self.tok_embed),
            prompt: tape.leaf(&self.prompt),
            self_q: tape.leaf(&self.self_q),
            self_k: tape.leaf(&self.self_k),
            self_v: tape.leaf(&self.self_v),
            self_o: tape.leaf(&self.self_o),
            cross_q: tape.leaf(&self.cross_q),
            cross_k: tape.leaf(&self.cross_k),
            cross_v: tape.leaf(&self.cross_v),
            cross_o: tape.leaf(&self.cross_o),
            ffn_w1: tape.leaf(&self.ffn_w1),
            ffn_b1: tape.leaf(&self.ffn_b1),
            ffn_w2: tape.leaf(&self.ffn_w2),
            ffn_b2: tape.leaf(&self.ffn_b2),
            out_w: tape.leaf(&self.out_w),
            out_b: tape.leaf(&self.out_b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderVars {
    pub d: usize,
    pub n_heads: usize,
    pub prompt_len: usize,
    pub vocab_size: usize,
    pub tok_embed: Var,
    pub prompt: Var,
    pub self_q: Var,
    pub self_k: Var,
    pub self_v: Var,
    pub self_o: Var,
    pub cross_q: Var,
    pub cross_k: Var,
    pub cross_v: Var,
    pub cross_o: Var,
    pub ffn_w1: Var,
    pub ffn_b1: Var,
    pub ffn_w2: Var,
    pub ffn_b2: Var,
    pub out_w: Var,
    pub out_b: Var,
}

// ── low-rank adapters ────────────────────────────────────────────────────────

/// One adapter: `delta(x) = s · (x · Aᵀ) · Bᵀ` added to a frozen base map.
/// `a` is `[r, d_in]` (random init), `b` is `[d_out, r]` (zero init), so
/// the delta is exactly zero until training moves `b`.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub rank: usize,
    pub a: Tensor, // [r, d_in]
    pub b: Tensor, // [d_out, r]
}

impl LoraAdapter {
    pub fn init(stream: &mut Stream, d_in: usize, d_out: usize, rank: usize) -> LoraAdapter {
        let std = (d_in as f64).sqrt().recip();
        LoraAdapter {
            rank,
            a: Tensor::randn(stream, &[rank, d_in], std).trainable(),
            b: Tensor::zeros(&[d_out, rank]).trainable(),
        }
    }
}

/// The four adapters: self-attention query & value, and both feed-forward
/// maps. `scale` multiplies every delta.
#[derive(Debug, Clone)]
pub struct LoraSet {
    pub scale: f64,
    pub q: LoraAdapter,
    pub v: LoraAdapter,
    pub ffn1: LoraAdapter,
    pub ffn2: LoraAdapter,
}

impl LoraSet {
    pub fn init(stream: &mut Stream, d: usize, rank: usize, scale: f64) -> Result<LoraSet> {
        if rank == 0 {
            return Err(Error::config("adapter rank must be at least 1".to_string()));
        }
        Ok(LoraSet {
            scale,
            q: LoraAdapter::init(stream, d, d, rank),
            v: LoraAdapter::init(stream, d, d, rank),
            ffn1: LoraAdapter::init(stream, d, 4 * d, rank),
            ffn2: LoraAdapter::init(stream, 4 * d, d, rank),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("lora.self_q.a".into(), &self.q.a),
            ("lora.self_q.b".into(), &self.q.b),
            ("lora.self_v.a".into(), &self.v.a),
            ("lora.self_v.b".into(), &self.v.b),
            ("lora.ffn1.a".into(), &self.ffn1.a),
            ("lora.ffn1.b".into(), &self.ffn1.b),
            ("lora.ffn2.a".into(), &self.ffn2.a),
            ("lora.ffn2.b".into(), &self.ffn2.b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("lora.self_q.a".into(), &mut self.q.a),
            ("lora.self_q.b".into(), &mut self.q.b),
            ("lora.self_v.a".into(), &mut self.v.a),
            ("lora.self_v.b".into(), &mut self.v.b),
            ("lora.ffn1.a".into(), &mut self.ffn1.a),
            ("lora.ffn1.b".into(), &mut self.ffn1.b),
            ("lora.ffn2.a".into(), &mut self.ffn2.a),
            ("lora.ffn2.b".into(), &mut self.ffn2.b),
        ]
    }

    pub fn bind(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            scale: self.scale,
            q_a: tape.leaf(&self.q.a),
            q_b: tape.leaf(&self.q.b),
            v_a: tape.leaf(&self.v.a),
            v_b: tape.leaf(&self.v.b),
            f1_a: tape.leaf(&self.ffn1.a),
            f1_b: tape.leaf(&self.ffn1.b),
            f2_a: tape.leaf(&self.ffn2.a),
            f2_b: tape.leaf(&self.ffn2.b),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub scale: f64,
    pub q_a: Var,
    pub q_b: Var,
    pub v_a: Var,
    pub v_b: Var,
    pub f1_a: Var,
    pub f1_b: Var,
    pub f2_a: Var,
    pub f2_b: Var,
}

/// `x · w` plus, when an adapter is given, `s · (x · aᵀ) · bᵀ`.
pub fn linear_adapted(
    tape: &mut Tape,
    x: Var,
    w: Var,
    adapter: Option<(Var, Var, f64)>,
) -> Result<Var> {
    let base = tape.matmul(x, w)?;
    match adapter {
        None => Ok(base),
        Some((a, b, scale)) => {
            let at = tape.transpose(a)?;
            let xa = tape.matmul(x, at)?;
            let bt = tape.transpose(b)?;
            let xb = tape.matmul(xa, bt)?;
            let delta = tape.scale(xb, scale)?;
            tape.add(base, delta)
        }
    }
}

// ── attention ────────────────────────────────────────────────────────────────

/// Keep-mask for causal self-attention over `n` positions: row `i` may
/// attend to columns `0..=i`.
pub fn causal_mask(n: usize) -> Vec<bool> {
    let mut m = vec![false; n * n];
    for i in 0..n {
        for j in 0..=i {
            m[i * n + j] = true;
        }
    }
    m
}

/// Scaled dot-product attention with `n_heads` heads over pre-projected
/// `q [tq, d]`, `k [tk, d]`, `v [tk, d]`; `mask` is a `[tq*tk]` keep-mask
/// shared across heads.
pub fn multi_head_attention(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    n_heads: usize,
    mask: Option<&[bool]>,
) -> Result<Var> {
    let d = tape.shape(q)[1];
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::config(format!("width {d} incompatible with {n_heads} heads")));
    }
    let dh = d / n_heads;
    let scale = (dh as f64).sqrt().recip();
    let mut heads: Option<Var> = None;
    for h in 0..n_heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scaled = tape.scale(scores, scale)?;
        let probs = tape.softmax_rows(scaled, mask)?;
        let ctx = tape.matmul(probs, vh)?;
        heads = Some(match heads {
            None => ctx,
            Some(acc) => tape.concat_cols(acc, ctx)?,
        });
    }
    Ok(heads.expect("n_heads >= 1"))
}

// ── decoder forward ──────────────────────────────────────────────────────────

/// Next-token logits `[n, V]` for a `<bos>`-led prefix, attending over the
/// learned prompt rows followed by the visual memory `[m, d]`.
/// `mem_valid[j] = false` marks padded memory rows (never attended).
pub fn decode_logits(
    tape: &mut Tape,
    p: &DecoderVars,
    lora: Option<&LoraVars>,
    prefix: &[usize],
    memory: Var,
    mem_valid: Option<&[bool]>,
) -> Result<Var> {
    if prefix.is_empty() || prefix[0] != BOS {
        return Err(Error::contract(format!(
            "decoder prefix must start with <bos> (id {BOS}), got {:?}",
            prefix.first()
        )));
    }
    if let Some(&bad) = prefix.iter().find(|&&id| id >= p.vocab_size) {
        return Err(Error::contract(format!(
            "token id {bad} outside vocabulary of size {}",
            p.vocab_size
        )));
    }
    let mem_shape = tape.shape(memory).to_vec();
    if mem_shape.len() != 2 || mem_shape[1] != p.d {
        return Err(Error::shape(
            "decode_logits",
            format!("memory must be [m, {}], got {:?}", p.d, mem_shape),
        ));
    }
    let m = mem_shape[0];
    if let Some(valid) = mem_valid {
        if valid.len() != m {
            return Err(Error::shape(
                "decode_logits",
                format!("memory validity has {} entries for {m} rows", valid.len()),
            ));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::degenerate("memory has no valid rows".to_string()));
        }
    }
    let n = prefix.len();

    // Token embeddings + fixed positions.
    let emb = tape.embed_rows(p.tok_embed, prefix)?;
    let pe = tape.constant(&[n, p.d], sinusoidal_positions(n, p.d))?;
    let mut x = tape.add(emb, pe)?;

    // Causal self-attention (adapters on q and v).
    let self_mask = causal_mask(n);
    let q_ad = lora.map(|l| (l.q_a, l.q_b, l.scale));
    let v_ad = lora.map(|l| (l.v_a, l.v_b, l.scale));
    let q = linear_adapted(tape, x, p.self_q, q_ad)?;
    let k = tape.matmul(x, p.self_k)?;
    let v = linear_adapted(tape, x, p.self_v, v_ad)?;
    let ctx = multi_head_attention(tape, q, k, v, p.n_heads, Some(&self_mask))?;
    let ctx = tape.matmul(ctx, p.self_o)?;
    x = tape.add(x, ctx)?;

    // Cross-attention over [prompt ; memory + positions].
    let mem_pe = tape.constant(&[m, p.d], sinusoidal_positions(m, p.d))?;
    let mem_pos = tape.add(memory, mem_pe)?;
    let mem_full = tape.concat_rows(&[p.prompt, mem_pos])?;
    let total = p.prompt_len + m;
    let cross_mask: Option<Vec<bool>> = mem_valid.map(|valid| {
        let mut row = vec![true; total];
        for (j, &ok) in valid.iter().enumerate() {
            row[p.prompt_len + j] = ok;
        }
        let mut full = Vec::with_capacity(n * total);
        for _ in 0..n {
            full.extend_from_slice(&row);
        }
        full
    });
    let q = tape.matmul(x, p.cross_q)?;
    let k = tape.matmul(mem_full, p.cross_k)?;
    let v = tape.matmul(mem_full, p.cross_v)?;
    let ctx = multi_head_attention(tape, q, k, v, p.n_heads, cross_mask.as_deref())?;
    let ctx = tape.matmul(ctx, p.cross_o)?;
    x = tape.add(x, ctx)?;

    // Feed-forward (adapters on both maps).
    let f1_ad = lora.map(|l| (l.f1_a, l.f1_b, l.scale));
    let f2_ad = lora.map(|l| (l.f2_a, l.f2_b, l.scale));
    let h = linear_adapted(tape, x, p.ffn_w1, f1_ad)?;
    let h = tape.add_bias(h, p.ffn_b1)?;
    let h = tape.relu(h)?;
    let y = linear_adapted(tape, h, p.ffn_w2, f2_ad)?;
    let y = tape.add_bias(y, p.ffn_b2)?;
    x = tape.add(x, y)?;

    // Untied output projection.
    let logits = tape.matmul(x, p.out_w)?;
    tape.add_bias(logits, p.out_b)
}

/// Mean cross-entropy over non-`<pad>` targets. `targets[i]` is the token
/// that should follow `prefix[..=i]`; returns the scalar loss and the number
/// of positions it averages over.
pub fn translation_loss(tape: &mut Tape, logits: Var, targets: &[usize]) -> Result<(Var, usize)> {
    let shape = tape.shape(logits).to_vec();
    if shape[0] != targets.len() {
        return Err(Error::shape(
            "translation_loss",
            format!("{} logit rows vs {} targets", shape[0], targets.len()),
        ));
    }
    let active: Vec<bool> = targets.iter().map(|&t| t != PAD).collect();
    let count = active.iter().filter(|&&a| a).count();
    let sum = tape.cross_entropy_sum(logits, targets, &active)?;
    let mean = tape.scale(sum, 1.0 / count as f64)?;
    Ok((mean, count))
}

/// Greedy decoding driven by a caller-supplied step function.
///
/// `step(prefix)` returns next-token logits (length = vocab size) for the
/// current `<bos>`-led prefix. `<pad>` and `<bos>` are never emitted; ties
/// break toward the lowest id. Generation stops at `<eos>` or after
/// `max_len` tokens; the returned sequence excludes `<bos>`.
pub fn greedy_decode(
    step: &mut dyn FnMut(&[usize]) -> Result<Vec<f64>>,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    for _ in 0..max_len {
        let logits = step(&prefix)?;
        if logits.len() <= UNK {
            return Err(Error::contract(format!(
                "step function returned {} logits; vocabulary must include reserved ids",
                logits.len()
            )));
        }
        let mut best = EOS; // lowest allowed id
        for id in 0..logits.len() {
            if id == PAD || id == BOS {
                continue;
            }
            if logits[id] > logits[best] {
                best = id;
            }
        }
        prefix.push(best);
        out.push(best);
        if best == EOS {
            break;
        }
    }
    Ok(out)
}

// ── tests ────────────────────────────────────────────────────────────────────
