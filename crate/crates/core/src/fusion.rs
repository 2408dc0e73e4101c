//! Gated fusion of the spatial and mouthing streams, plus the contrastive
//! alignment loss.
//!
//! The wide spatial features are first projected down to the model width,
//! then blended with the mouth features through a per-frame, per-channel
//! sigmoid gate:
//!
//! ```text
//! g       = sigmoid(MLP([Z_s' ; Z_m]))
//! Z_fused = g ⊙ Z_s' + (1 - g) ⊙ Z_m
//! ```
//!
//! A width-5 temporal convolution then mixes neighboring frames, and pooled
//! global embeddings feed two InfoNCE losses: visual-vs-text and
//! spatial-vs-mouthing.

use crate::encoders::{FeatureSequence, StreamTag};
use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, Var};

// ── parameter bundle ─────────────────────────────────────────────────────────

/// Trainable fusion-side parameters. The gate MLP has one hidden layer of
/// width `d` (tanh) and a sigmoid output; the pooling projections map the
/// per-stream time means into the shared `d`-dim contrastive space.
#[derive(Debug, Clone)]
pub struct FusionParams {
    pub d: usize,
    pub kernel_width: usize,
    /// InfoNCE temperature.
    pub tau: f64,
    pub proj_w: Tensor,      // [2d, d]
    pub proj_b: Tensor,      // [1, d]
    pub gate_w1: Tensor,     // [2d, d]
    pub gate_b1: Tensor,     // [1, d]
    pub gate_w2: Tensor,     // [d, d]
    pub gate_b2: Tensor,     // [1, d]
    pub conv_kernels: Tensor, // [d, d, k]
    pub pool_s_w: Tensor,    // [d, d]
    pub pool_s_b: Tensor,    // [1, d]
    pub pool_m_w: Tensor,    // [d, d]
    pub pool_m_b: Tensor,    // [1, d]
}

impl FusionParams {
    pub fn init(stream: &mut Stream, d: usize, kernel_width: usize, tau: f64) -> Result<FusionParams> {
        if kernel_width % 2 == 0 {
            return Err(Error::config(format!(
                "temporal kernel width must be odd, got {kernel_width}"
            )));
        }
        if tau <= 0.0 {
            return Err(Error::config(format!("temperature must be positive, got {tau}")));
        }
        let wide = (2.0 * d as f64).sqrt().recip();
        let narrow = (d as f64).sqrt().recip();
        let conv_std = ((d * kernel_width) as f64).sqrt().recip();
        Ok(FusionParams {
            d,
            kernel_width,
            tau,
            proj_w: Tensor::randn(stream, &[2 * d, d], wide).trainable(),
            proj_b: Tensor::zeros(&[1, d]).trainable(),
            gate_w1: Tensor::randn(stream, &[2 * d, d], wide).trainable(),
            gate_b1: Tensor::zeros(&[1, d]).trainable(),
            gate_w2: Tensor::randn(stream, &[d, d], narrow).trainable(),
            gate_b2: Tensor::zeros(&[1, d]).trainable(),
            conv_kernels: Tensor::randn(stream, &[d, d, kernel_width], conv_std).trainable(),
            pool_s_w: Tensor::randn(stream, &[d, d], narrow).trainable(),
            pool_s_b: Tensor::zeros(&[1, d]).trainable(),
            pool_m_w: Tensor::randn(stream, &[d, d], narrow).trainable(),
            pool_m_b: Tensor::zeros(&[1, d]).trainable(),
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("fusion.proj.w".into(), &self.proj_w),
            ("fusion.proj.b".into(), &self.proj_b),
            ("fusion.gate.w1".into(), &self.gate_w1),
            ("fusion.gate.b1".into(), &self.gate_b1),
            ("fusion.gate.w2".into(), &self.gate_w2),
            ("fusion.gate.b2".into(), &self.gate_b2),
            ("fusion.conv.kernels".into(), &self.conv_kernels),
            ("fusion.pool_s.w".into(), &self.pool_s_w),
            ("fusion.pool_s.b".into(), &self.pool_s_b),
            ("fusion.pool_m.w".into(), &self.pool_m_w),
            ("fusion.pool_m.b".into(), &self.pool_m_b),
        ]
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        vec![
            ("fusion.proj.w".into(), &mut self.proj_w),
            ("fusion.proj.b".into(), &mut self.proj_b),
            ("fusion.gate.w1".into(), &mut self.gate_w1),
            ("fusion.gate.b1".into(), &mut self.gate_b1),
            ("fusion.gate.w2".into(), &mut self.gate_w2),
            ("fusion.gate.b2".into(), &mut self.gate_b2),
            ("fusion.conv.kernels".into(), &mut self.conv_kernels),
            ("fusion.pool_s.w".into(), &mut self.pool_s_w),
            ("fusion.pool_s.b".into(), &mut self.pool_s_b),
            ("fusion.pool_m.w".into(), &mut self.pool_m_w),
            ("fusion.pool_m.b".into(), &mut self.pool_m_b),
        ]
    }

    /// Register every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> FusionVars {
        FusionVars {
            proj_w: tape.leaf(&self.proj_w),
            proj_b: tape.leaf(&self.proj_b),
            gate_w1: tape.leaf(&self.gate_w1),
            gate_b1: tape.leaf(&self.gate_b1),
            gate_w2: tape.leaf(&self.gate_w2),
            gate_b2: tape.leaf(&self.gate_b2),
            conv_kernels: tape.leaf(&self.conv_kernels),
            pool_s_w: tape.leaf(&self.pool_s_w),
            pool_s_b: tape.leaf(&self.pool_s_b),
            pool_m_w: tape.leaf(&self.pool_m_w),
            pool_m_b: tape.leaf(&self.pool_m_b),
        }
    }
}

/// Tape handles for one forward pass over [`FusionParams`].
#[derive(Debug, Clone, Copy)]
pub struct FusionVars {
    pub proj_w: Var,
    pub proj_b: Var,
    pub gate_w1: Var,
    pub gate_b1: Var,
    pub gate_w2: Var,
    pub gate_b2: Var,
    pub conv_kernels: Var,
    pub pool_s_w: Var,
    pub pool_s_b: Var,
    pub pool_m_w: Var,
    pub pool_m_b: Var,
}

/// How the gate is produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Sigmoid MLP over the concatenated streams.
    Learned,
    /// `g ≡ 1`: the fused stream is exactly the projected spatial stream.
    ForceSpatial,
    /// `g ≡ 0`: the fused stream is exactly the mouth stream.
    ForceMouth,
}

/// Per-frame, per-channel gate values in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct GateVector {
    pub t: usize,
    pub d: usize,
    pub values: Vec<f64>,
}

/// A pooled global embedding with its provenance.
#[derive(Debug, Clone)]
pub struct GlobalEmbedding {
    pub d: usize,
    pub values: Vec<f64>,
    pub tag: StreamTag,
}

// ── tape-level operations ────────────────────────────────────────────────────

/// Project the wide spatial stream `[t, 2d] -> [t, d]`.
pub fn project_spatial(tape: &mut Tape, p: &FusionVars, zs: Var) -> Result<Var> {
    let prod = tape.matmul(zs, p.proj_w)?;
    tape.add_bias(prod, p.proj_b)
}

/// Gate MLP: `sigmoid(W2 · tanh(W1 · [zsp ; zm] + b1) + b2)`, shape `[t, d]`.
pub fn gate_values(tape: &mut Tape, p: &FusionVars, zsp: Var, zm: Var) -> Result<Var> {
    let joint = tape.concat_cols(zsp, zm)?;
    let h = tape.matmul(joint, p.gate_w1)?;
    let h = tape.add_bias(h, p.gate_b1)?;
    let h = tape.tanh(h)?;
    let o = tape.matmul(h, p.gate_w2)?;
    let o = tape.add_bias(o, p.gate_b2)?;
    tape.sigmoid(o)
}

/// Blend the streams: `fused = g ⊙ zsp + (1 - g) ⊙ zm`.
///
/// Returns `(fused, gate)`. In the forced modes the bypassed stream does not
/// enter the graph at all, so the identities `g ≡ 1 ⇒ fused ≡ zsp` and
/// `g ≡ 0 ⇒ fused ≡ zm` hold bitwise.
pub fn gated_fuse(
    tape: &mut Tape,
    p: &FusionVars,
    zsp: Var,
    zm: Var,
    mode: GateMode,
) -> Result<(Var, Var)> {
    let shape = tape.shape(zsp).to_vec();
    if shape != tape.shape(zm) {
        return Err(Error::shape(
            "gated_fuse",
            format!("stream shapes differ: {:?} vs {:?}", shape, tape.shape(zm)),
        ));
    }
    let n: usize = shape.iter().product();
    match mode {
        GateMode::ForceSpatial => {
            let ones = tape.constant(&shape, vec![1.0; n])?;
            Ok((zsp, ones))
        }
        GateMode::ForceMouth => {
            let zeros = tape.constant(&shape, vec![0.0; n])?;
            Ok((zm, zeros))
        }
        GateMode::Learned => {
            let g = gate_values(tape, p, zsp, zm)?;
            let ones = tape.constant(&shape, vec![1.0; n])?;
            let inv = tape.sub(ones, g)?;
            let a = tape.mul(g, zsp)?;
            let b = tape.mul(inv, zm)?;
            let fused = tape.add(a, b)?;
            Ok((fused, g))
        }
    }
}

/// Temporal mixing: transpose to `[d, t]`, convolve with the `[d, d, k]`
/// kernel bank (same-size zero padding), transpose back. Invalid time steps
/// (batch padding) neither contribute taps nor receive output.
pub fn temporal_project(
    tape: &mut Tape,
    p: &FusionVars,
    fused: Var,
    valid: Option<&[bool]>,
) -> Result<Var> {
    let xt = tape.transpose(fused)?;
    let conv = tape.conv1d(xt, p.conv_kernels, valid)?;
    tape.transpose(conv)
}

/// Mean over valid time steps, then an optional linear projection:
/// `[t, d_in] -> [1, d_out]`.
pub fn pool_global(
    tape: &mut Tape,
    x: Var,
    valid: Option<&[bool]>,
    projection: Option<(Var, Var)>,
) -> Result<Var> {
    let mean = tape.mean_pool_rows(x, valid)?;
    match projection {
        None => Ok(mean),
        Some((w, b)) => {
            let prod = tape.matmul(mean, w)?;
            tape.add_bias(prod, b)
        }
    }
}

/// InfoNCE over cosine similarities at temperature `tau`:
///
/// ```text
/// L = -(1/N) Σ_i log( exp(sim(a_i, p_i)/τ) / Σ_j exp(sim(a_i, p_j)/τ) )
/// ```
///
/// Anchors and positives are `[n, d]` with matched rows as the positive
/// pairs. Zero-norm rows error (see [`Tape::normalize_rows`]); `tau <= 0` is
/// a configuration error.
pub fn infonce(tape: &mut Tape, anchors: Var, positives: Var, tau: f64) -> Result<Var> {
    if tau <= 0.0 {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let sa = tape.shape(anchors).to_vec();
    let sp = tape.shape(positives).to_vec();
    if sa != sp {
        return Err(Error::shape(
            "infonce",
            format!("anchors {sa:?} vs positives {sp:?}"),
        ));
    }
    let n = sa[0];
    let an = tape.normalize_rows(anchors)?;
    let pn = tape.normalize_rows(positives)?;
    let pt = tape.transpose(pn)?;
    let sim = tape.matmul(an, pt)?;
    let logits = tape.scale(sim, 1.0 / tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let ce = tape.cross_entropy_sum(logits, &diag, &vec![true; n])?;
    tape.scale(ce, 1.0 / n as f64)
}

// ── value-level wrappers ─────────────────────────────────────────────────────

/// InfoNCE on plain vectors (no gradients); rows of `anchors[i]` pair with
/// `positives[i]`.
pub fn infonce_value(anchors: &[Vec<f64>], positives: &[Vec<f64>], tau: f64) -> Result<f64> {
    if anchors.is_empty() || anchors.len() != positives.len() {
        return Err(Error::contract(format!(
            "need matched non-empty sets, got {} anchors / {} positives",
            anchors.len(),
            positives.len()
        )));
    }
    let d = anchors[0].len();
    let mut tape = Tape::new();
    let flat = |rows: &[Vec<f64>]| rows.iter().flatten().copied().collect::<Vec<f64>>();
    let a = tape.constant(&[anchors.len(), d], flat(anchors))?;
    let p = tape.constant(&[positives.len(), d], flat(positives))?;
    let loss = infonce(&mut tape, a, p, tau)?;
    Ok(tape.value(loss)[0])
}

/// Value-level gated fusion for callers outside the training loop.
pub fn gated_fuse_value(
    params: &FusionParams,
    zsp: &FeatureSequence,
    zm: &FeatureSequence,
    mode: GateMode,
) -> Result<(FeatureSequence, GateVector)> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let a = tape.constant(&[zsp.t, zsp.d], zsp.values().to_vec())?;
    let b = tape.constant(&[zm.t, zm.d], zm.values().to_vec())?;
    let (fused, gate) = gated_fuse(&mut tape, &p, a, b, mode)?;
    let fused_seq =
        FeatureSequence::new(zsp.t, zsp.d, tape.value(fused).to_vec(), StreamTag::Fused)?;
    let gate_vec = GateVector { t: zsp.t, d: zsp.d, values: tape.value(gate).to_vec() };
    Ok((fused_seq, gate_vec))
}

/// Value-level spatial projection.
pub fn project_spatial_value(params: &FusionParams, zs: &FeatureSequence) -> Result<FeatureSequence> {
    if zs.d != 2 * params.d {
        return Err(Error::shape(
            "project_spatial",
            format!("expected width {} (2d), got {}", 2 * params.d, zs.d),
        ));
    }
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(&[zs.t, zs.d], zs.values().to_vec())?;
    let y = project_spatial(&mut tape, &p, x)?;
    FeatureSequence::new(zs.t, params.d, tape.value(y).to_vec(), StreamTag::SpatialProjected)
}

/// Value-level temporal projection.
pub fn temporal_project_value(params: &FusionParams, fused: &FeatureSequence) -> Result<FeatureSequence> {
    let mut tape = Tape::new();
    let p = params.bind(&mut tape);
    let x = tape.constant(&[fused.t, fused.d], fused.values().to_vec())?;
    let y = temporal_project(&mut tape, &p, x, None)?;
    FeatureSequence::new(fused.t, params.d, tape.value(y).to_vec(), StreamTag::Temporal)
}

/// Value-level global pooling with an optional projection.
pub fn pool_global_value(
    feats: &FeatureSequence,
    projection: Option<(&Tensor, &Tensor)>,
    tag: StreamTag,
) -> Result<GlobalEmbedding> {
    let mut tape = Tape::new();
    let x = tape.constant(&[feats.t, feats.d], feats.values().to_vec())?;
    let proj = match projection {
        None => None,
        Some((w, b)) => Some((tape.leaf(w), tape.leaf(b))),
    };
    let y = pool_global(&mut tape, x, None, proj)?;
    let values = tape.value(y).to_vec();
    let d = values.len();
    Ok(GlobalEmbedding { d, values, tag })
}

// ── tests ────────────────────────────────────────────────────────────────────
