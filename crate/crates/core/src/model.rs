//! End-to-end model: frozen frame/mouth encoders, trainable fusion, the
//! adapted decoder, and the joint loss
//!
//! ```text
//! L_total = L_trans + α · L_vt + β · L_sm
//! ```
//!
//! where `L_trans` is mean next-token cross-entropy, `L_vt` aligns pooled
//! visual embeddings with pooled text embeddings, and `L_sm` aligns the
//! pooled spatial stream with the pooled mouthing stream. Optional loss
//! terms are *omitted from the graph* when disabled or zero-weighted, so a
//! disabled term can never perturb gradients.

use std::collections::HashMap;

use crate::decoder::{self, DecoderParams, LoraSet, Vocabulary, BOS, EOS, PAD};
use crate::encoders::{self, FeatureSequence, FrameSequence, LandmarkStream, StubEncoder};
use crate::error::{Error, Result};
use crate::fusion::{self, FusionParams, GateMode};
use crate::optim::AdamW;
use crate::rng::Stream;
use crate::tensor::{Tape, Tensor, Var};

// ── configuration ────────────────────────────────────────────────────────────

/// Model-side hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperParams {
    pub d_model: usize,
    pub n_heads: usize,
    pub prompt_len: usize,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Weight of the visual-text alignment loss.
    pub alpha: f64,
    /// Weight of the spatial-mouthing alignment loss.
    pub beta: f64,
    pub lora_rank: usize,
    pub lora_scale: f64,
    /// Temporal convolution width (odd).
    pub kernel_width: usize,
    /// Square working resolution of the frame encoder's base view.
    pub base_res: usize,
    pub mouth_h: usize,
    pub mouth_w: usize,
    pub frame_c: usize,
    /// Mouth crop margin as a fraction of the landmark box's larger side.
    pub margin: f64,
    /// Maximum generated tokens during greedy decoding.
    pub max_len: usize,
}

impl Default for HyperParams {
    fn default() -> HyperParams {
        HyperParams {
            d_model: 32,
            n_heads: 2,
            prompt_len: 4,
            tau: 0.1,
            alpha: 1.0,
            beta: 0.2,
            lora_rank: 4,
            lora_scale: 1.0,
            kernel_width: 5,
            base_res: 16,
            mouth_h: 16,
            mouth_w: 24,
            frame_c: 3,
            margin: 0.1,
            max_len: 12,
        }
    }
}

/// Which streams and loss terms participate in a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamFlags {
    pub spatial: bool,
    pub mouth: bool,
    /// Include `α · L_vt` in the total loss.
    pub align_vt: bool,
    /// Include `β · L_sm` in the total loss.
    pub align_sm: bool,
}

impl StreamFlags {
    pub fn full() -> StreamFlags {
        StreamFlags { spatial: true, mouth: true, align_vt: true, align_sm: true }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.spatial && !self.mouth {
            return Err(Error::config("at least one input stream must be enabled".to_string()));
        }
        Ok(())
    }

    /// Forced when only one stream is live; learned when both are.
    pub fn gate_mode(&self) -> GateMode {
        match (self.spatial, self.mouth) {
            (true, true) => GateMode::Learned,
            (true, false) => GateMode::ForceSpatial,
            _ => GateMode::ForceMouth,
        }
    }
}

// ── model ────────────────────────────────────────────────────────────────────

/// Per-sample frozen-encoder outputs: the wide spatial sequence `[t, 2d]`
/// and the mouth sequence `[t, d]`.
#[derive(Debug, Clone)]
pub struct SampleFeatures {
    pub spatial: FeatureSequence,
    pub mouth: FeatureSequence,
}

#[derive(Debug, Clone)]
pub struct SignModel {
    pub hp: HyperParams,
    pub seed: u64,
    pub vocab: Vocabulary,
    pub spatial_enc: StubEncoder,
    pub mouth_enc: StubEncoder,
    pub fusion: FusionParams,
    pub decoder: DecoderParams,
    pub lora: LoraSet,
}

impl SignModel {
    /// Deterministic init: every parameter group draws from its own fixed
    /// generator stream of `seed`, so groups are independent of each other's
    /// sizes and two models with the same seed and shapes are identical.
    pub fn init(seed: u64, hp: HyperParams, vocab: Vocabulary) -> Result<SignModel> {
        let spatial_enc = StubEncoder::new(
            &mut Stream::new(seed, 1),
            hp.base_res,
            hp.base_res,
            hp.frame_c,
            hp.d_model,
        );
        let mouth_enc = StubEncoder::new(
            &mut Stream::new(seed, 2),
            hp.mouth_h,
            hp.mouth_w,
            hp.frame_c,
            hp.d_model,
        );
        let fusion =
            FusionParams::init(&mut Stream::new(seed, 3), hp.d_model, hp.kernel_width, hp.tau)?;
        let decoder = DecoderParams::init(
            &mut Stream::new(seed, 4),
            hp.d_model,
            hp.n_heads,
            hp.prompt_len,
            vocab.len(),
        )?;
        let lora = LoraSet::init(&mut Stream::new(seed, 5), hp.d_model, hp.lora_rank, hp.lora_scale)?;
        Ok(SignModel { hp, seed, vocab, spatial_enc, mouth_enc, fusion, decoder, lora })
    }

    /// All tensors by name, including the frozen encoder stubs.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("spatial_stub.w".to_string(), self.spatial_enc.weights()),
            ("mouth_stub.w".to_string(), self.mouth_enc.weights()),
        ];
        out.extend(self.fusion.named());
        out.extend(self.decoder.named());
        out.extend(self.lora.named());
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        out.extend(self.fusion.named_mut());
        out.extend(self.decoder.named_mut());
        out.extend(self.lora.named_mut());
        out
    }

    /// FNV checksums of every tensor, for drift detection.
    pub fn checksums(&self) -> Vec<(String, u64)> {
        self.named_tensors().into_iter().map(|(n, t)| (n, t.checksum())).collect()
    }

    /// Overwrite one tensor's values from external storage (checkpoint
    /// restore). Shapes must match the freshly initialized model.
    pub fn set_tensor_data(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        let check = |want: &[usize]| -> Result<()> {
            if want != shape {
                return Err(Error::shape(
                    "set_tensor_data",
                    format!("{name}: stored {shape:?} vs model {want:?}"),
                ));
            }
            Ok(())
        };
        match name {
            "spatial_stub.w" => {
                check(self.spatial_enc.weights().shape())?;
                self.spatial_enc = StubEncoder::from_weights(
                    self.hp.base_res,
                    self.hp.base_res,
                    self.hp.frame_c,
                    Tensor::from_vec(shape, data)?,
                )?;
                Ok(())
            }
            "mouth_stub.w" => {
                check(self.mouth_enc.weights().shape())?;
                self.mouth_enc = StubEncoder::from_weights(
                    self.hp.mouth_h,
                    self.hp.mouth_w,
                    self.hp.frame_c,
                    Tensor::from_vec(shape, data)?,
                )?;
                Ok(())
            }
            _ => {
                for (n, t) in self.named_tensors_mut() {
                    if n == name {
                        if t.shape() != shape {
                            return Err(Error::shape(
                                "set_tensor_data",
                                format!("{name}: stored {shape:?} vs model {:?}", t.shape()),
                            ));
                        }
                        t.data_mut().copy_from_slice(&data);
                        return Ok(());
                    }
                }
                Err(Error::format(format!("unknown tensor {name} in checkpoint")))
            }
        }
    }

    /// Run both frozen encoders on one raw sample.
    pub fn encode_sample(
        &self,
        video: &FrameSequence,
        landmarks: &LandmarkStream,
    ) -> Result<SampleFeatures> {
        let spatial = encoders::encode_spatial_sequence(video, &self.spatial_enc)?;
        let clip = encoders::crop_mouth_region(
            video,
            landmarks,
            self.hp.margin,
            self.hp.mouth_h,
            self.hp.mouth_w,
        )?;
        let mouth = encoders::encode_mouth_sequence(&clip, &self.mouth_enc)?;
        Ok(SampleFeatures { spatial, mouth })
    }

    pub fn bind(&self, tape: &mut Tape) -> ModelVars {
        ModelVars {
            fusion: self.fusion.bind(tape),
            decoder: self.decoder.bind(tape),
            lora: self.lora.bind(tape),
        }
    }
}

/// Tape handles for one forward pass over all trainable groups.
#[derive(Debug, Clone, Copy)]
pub struct ModelVars {
    pub fusion: fusion::FusionVars,
    pub decoder: decoder::DecoderVars,
    pub lora: decoder::LoraVars,
}

impl ModelVars {
    /// `(name, var)` pairs matching [`SignModel::named_tensors`] minus the
    /// encoder stubs (which never enter the tape).
    pub fn named(&self) -> Vec<(String, Var)> {
        let f = &self.fusion;
        let d = &self.decoder;
        let l = &self.lora;
        vec![
            ("fusion.proj.w".into(), f.proj_w),
            ("fusion.proj.b".into(), f.proj_b),
            ("fusion.gate.w1".into(), f.gate_w1),
            ("fusion.gate.b1".into(), f.gate_b1),
            ("fusion.gate.w2".into(), f.gate_w2),
            ("fusion.gate.b2".into(), f.gate_b2),
            ("fusion.conv.kernels".into(), f.conv_kernels),
            ("fusion.pool_s.w".into(), f.pool_s_w),
            ("fusion.pool_s.b".into(), f.pool_s_b),
            ("fusion.pool_m.w".into(), f.pool_m_w),
            ("fusion.pool_m.b".into(), f.pool_m_b),
            ("decoder.tok_embed".into(), d.tok_embed),
            ("decoder.prompt".into(), d.prompt),
            ("decoder.self.q".into(), d.self_q),
            ("decoder.self.k".into(), d.self_k),
            ("decoder.self.v".into(), d.self_v),
            ("decoder.self.o".into(), d.self_o),
            ("decoder.cross.q".into(), d.cross_q),
            ("decoder.cross.k".into(), d.cross_k),
            ("decoder.cross.v".into(), d.cross_v),
            ("decoder.cross.o".into(), d.cross_o),
            ("decoder.ffn.w1".into(), d.ffn_w1),
            ("decoder.ffn.b1".into(), d.ffn_b1),
            ("decoder.ffn.w2".into(), d.ffn_w2),
            ("decoder.ffn.b2".into(), d.ffn_b2),
            ("decoder.out.w".into(), d.out_w),
            ("decoder.out.b".into(), d.out_b),
            ("lora.self_q.a".into(), l.q_a),
            ("lora.self_q.b".into(), l.q_b),
            ("lora.self_v.a".into(), l.v_a),
            ("lora.self_v.b".into(), l.v_b),
            ("lora.ffn1.a".into(), l.f1_a),
            ("lora.ffn1.b".into(), l.f1_b),
            ("lora.ffn2.a".into(), l.f2_a),
            ("lora.ffn2.b".into(), l.f2_b),
        ]
    }
}

// ── batching ─────────────────────────────────────────────────────────────────

/// One padded training sample inside a [`Batch`].
#[derive(Debug, Clone)]
pub struct BatchSample {
    /// `[t_max, 2d]`, padded by repeating the final frame row.
    pub spatial: Vec<f64>,
    /// `[t_max, d]`, padded the same way.
    pub mouth: Vec<f64>,
    /// `valid[t]` marks real (unpadded) frames.
    pub valid: Vec<bool>,
    /// `<bos>`-led decoder input, `<pad>`-padded to `n_max`.
    pub prefix: Vec<usize>,
    /// Next-token targets ending in `<eos>`, `<pad>`-padded to `n_max`.
    pub targets: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Batch {
    pub t_max: usize,
    pub n_max: usize,
    pub samples: Vec<BatchSample>,
}

/// Pad features and sentences to a rectangular batch. Frame padding repeats
/// the last real row and is masked out of every pooled or attended
/// computation, so padded and unpadded losses agree exactly.
pub fn assemble_batch(
    model: &SignModel,
    feats: &[SampleFeatures],
    sentences: &[String],
) -> Result<Batch> {
    if feats.is_empty() || feats.len() != sentences.len() {
        return Err(Error::contract(format!(
            "batch needs matched non-empty inputs, got {} feature sets / {} sentences",
            feats.len(),
            sentences.len()
        )));
    }
    let d = model.hp.d_model;
    for f in feats {
        if f.spatial.t != f.mouth.t {
            return Err(Error::contract(format!(
                "stream lengths differ: {} spatial vs {} mouth frames",
                f.spatial.t, f.mouth.t
            )));
        }
        if f.spatial.d != 2 * d || f.mouth.d != d {
            return Err(Error::shape(
                "assemble_batch",
                format!(
                    "expected widths {}/{} for spatial/mouth, got {}/{}",
                    2 * d,
                    d,
                    f.spatial.d,
                    f.mouth.d
                ),
            ));
        }
    }
    let t_max = feats.iter().map(|f| f.spatial.t).max().unwrap();
    let encoded: Vec<Vec<usize>> = sentences.iter().map(|s| model.vocab.encode(s)).collect();
    if let Some(i) = encoded.iter().position(|ids| ids.is_empty()) {
        return Err(Error::contract(format!("sentence {i} has no tokens")));
    }
    let n_max = encoded.iter().map(|ids| ids.len() + 1).max().unwrap();

    let mut samples = Vec::with_capacity(feats.len());
    for (f, ids) in feats.iter().zip(&encoded) {
        let t = f.spatial.t;
        let pad_rows = |seq: &FeatureSequence| -> Vec<f64> {
            let mut out = seq.values().to_vec();
            let last = seq.row(t - 1).to_vec();
            for _ in t..t_max {
                out.extend_from_slice(&last);
            }
            out
        };
        let mut valid = vec![true; t];
        valid.resize(t_max, false);

        let mut prefix = Vec::with_capacity(n_max);
        prefix.push(BOS);
        prefix.extend_from_slice(ids);
        prefix.resize(n_max, PAD);

        let mut targets = ids.clone();
        targets.push(EOS);
        targets.resize(n_max, PAD);

        samples.push(BatchSample {
            spatial: pad_rows(&f.spatial),
            mouth: pad_rows(&f.mouth),
            valid,
            prefix,
            targets,
        });
    }
    Ok(Batch { t_max, n_max, samples })
}

// ── forward pass ─────────────────────────────────────────────────────────────

/// Tape handles for the loss terms of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    pub l_trans: Var,
    /// Visual-text alignment; always built for diagnostics.
    pub l_vt: Var,
    /// Spatial-mouthing alignment; only defined when both streams are live.
    pub l_sm: Option<Var>,
    pub l_total: Var,
}

/// Loss values reported per step/epoch. `l_sm` is 0.0 when undefined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_trans: f64,
    pub l_vt: f64,
    pub l_sm: f64,
    pub l_total: f64,
}

impl SignModel {
    /// Project the raw spatial stream (`[t, 2d]`) down to model width when
    /// the stream is present. The projected stream feeds both the fused
    /// path and the spatial-side pooled embedding, so the stream-alignment
    /// loss shapes the same projection the translator reads through.
    fn projected_spatial(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        zs_wide: Option<Var>,
    ) -> Result<Option<Var>> {
        match zs_wide {
            Some(zs) => Ok(Some(fusion::project_spatial(tape, &vars.fusion, zs)?)),
            None => Ok(None),
        }
    }

    /// Fused stream `[t, d]` for one sample, honoring the stream flags.
    /// `zsp` is the already-projected spatial stream.
    fn fused_stream(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        flags: &StreamFlags,
        zsp: Option<Var>,
        zm: Option<Var>,
    ) -> Result<Var> {
        match flags.gate_mode() {
            GateMode::Learned => {
                let zsp = zsp.expect("spatial stream enabled");
                let zm = zm.expect("mouth stream enabled");
                let (fused, _) = fusion::gated_fuse(tape, &vars.fusion, zsp, zm, GateMode::Learned)?;
                Ok(fused)
            }
            GateMode::ForceSpatial => Ok(zsp.expect("spatial stream enabled")),
            GateMode::ForceMouth => Ok(zm.expect("mouth stream enabled")),
        }
    }

    /// Build the joint loss over a padded batch.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        batch: &Batch,
        flags: &StreamFlags,
    ) -> Result<ForwardOutput> {
        flags.validate()?;
        if batch.samples.is_empty() {
            return Err(Error::contract("empty batch".to_string()));
        }
        let d = self.hp.d_model;
        let t = batch.t_max;
        let both = flags.spatial && flags.mouth;

        let mut ce_sum: Option<Var> = None;
        let mut total_targets = 0usize;
        let mut zv_rows = Vec::new();
        let mut zt_rows = Vec::new();
        let mut zs_rows = Vec::new();
        let mut zm_rows = Vec::new();

        for sample in &batch.samples {
            let zs_wide = if flags.spatial {
                Some(tape.constant(&[t, 2 * d], sample.spatial.clone())?)
            } else {
                None
            };
            let zm = if flags.mouth {
                Some(tape.constant(&[t, d], sample.mouth.clone())?)
            } else {
                None
            };
            let zsp = self.projected_spatial(tape, vars, zs_wide)?;
            let fused = self.fused_stream(tape, vars, flags, zsp, zm)?;
            let zconv = fusion::temporal_project(tape, &vars.fusion, fused, Some(&sample.valid))?;

            // Global visual embedding for the visual-text alignment.
            let z_v = fusion::pool_global(tape, zconv, Some(&sample.valid), None)?;
            zv_rows.push(z_v);

            // Translation loss over non-padding targets.
            let logits = decoder::decode_logits(
                tape,
                &vars.decoder,
                Some(&vars.lora),
                &sample.prefix,
                zconv,
                Some(&sample.valid),
            )?;
            let active: Vec<bool> = sample.targets.iter().map(|&id| id != PAD).collect();
            total_targets += active.iter().filter(|&&a| a).count();
            let ce = tape.cross_entropy_sum(logits, &sample.targets, &active)?;
            ce_sum = Some(match ce_sum {
                None => ce,
                Some(acc) => tape.add(acc, ce)?,
            });

            // Text embedding: mean of target-token embeddings (incl. <eos>).
            let content: Vec<usize> =
                sample.targets.iter().copied().filter(|&id| id != PAD).collect();
            let temb = tape.embed_rows(vars.decoder.tok_embed, &content)?;
            let z_t = tape.mean_pool_rows(temb, None)?;
            zt_rows.push(z_t);

            // Per-stream global embeddings for the spatial-mouthing
            // alignment. The spatial side pools the *projected* stream, so
            // this loss trains the shared spatial projection (and the two
            // pooling heads), never the frozen encoders behind the
            // precomputed features.
            if both {
                let z_s = fusion::pool_global(
                    tape,
                    zsp.unwrap(),
                    Some(&sample.valid),
                    Some((vars.fusion.pool_s_w, vars.fusion.pool_s_b)),
                )?;
                let z_m = fusion::pool_global(
                    tape,
                    zm.unwrap(),
                    Some(&sample.valid),
                    Some((vars.fusion.pool_m_w, vars.fusion.pool_m_b)),
                )?;
                zs_rows.push(z_s);
                zm_rows.push(z_m);
            }
        }

        let l_trans = tape.scale(ce_sum.expect("non-empty batch"), 1.0 / total_targets as f64)?;
        let zv = tape.concat_rows(&zv_rows)?;
        let zt = tape.concat_rows(&zt_rows)?;
        let l_vt = fusion::infonce(tape, zv, zt, self.hp.tau)?;
        let l_sm = if both {
            let zs = tape.concat_rows(&zs_rows)?;
            let zmr = tape.concat_rows(&zm_rows)?;
            Some(fusion::infonce(tape, zs, zmr, self.hp.tau)?)
        } else {
            None
        };

        let mut l_total = l_trans;
        if flags.align_vt && self.hp.alpha != 0.0 {
            let term = tape.scale(l_vt, self.hp.alpha)?;
            l_total = tape.add(l_total, term)?;
        }
        if let Some(lsm) = l_sm {
            if flags.align_sm && self.hp.beta != 0.0 {
                let term = tape.scale(lsm, self.hp.beta)?;
                l_total = tape.add(l_total, term)?;
            }
        }
        Ok(ForwardOutput { l_trans, l_vt, l_sm, l_total })
    }

    /// Read loss values off the tape and verify finiteness and
    /// `L_total = L_trans + α·L_vt + β·L_sm` (over included terms).
    pub fn breakdown(
        &self,
        tape: &Tape,
        out: &ForwardOutput,
        flags: &StreamFlags,
    ) -> Result<LossBreakdown> {
        let l_trans = tape.value(out.l_trans)[0];
        let l_vt = tape.value(out.l_vt)[0];
        let l_sm = out.l_sm.map(|v| tape.value(v)[0]).unwrap_or(0.0);
        let l_total = tape.value(out.l_total)[0];
        for (name, v) in
            [("l_trans", l_trans), ("l_vt", l_vt), ("l_sm", l_sm), ("l_total", l_total)]
        {
            if !v.is_finite() {
                return Err(Error::NonFinite { component: name.to_string() });
            }
        }
        let mut expect = l_trans;
        if flags.align_vt && self.hp.alpha != 0.0 {
            expect += self.hp.alpha * l_vt;
        }
        if out.l_sm.is_some() && flags.align_sm && self.hp.beta != 0.0 {
            expect += self.hp.beta * l_sm;
        }
        if (l_total - expect).abs() > 1e-12 {
            return Err(Error::contract(format!(
                "loss terms do not add up: total {l_total} vs {expect}"
            )));
        }
        Ok(LossBreakdown { l_trans, l_vt, l_sm, l_total })
    }

    /// One optimization step; returns the pre-update loss values.
    pub fn train_step(
        &mut self,
        batch: &Batch,
        flags: &StreamFlags,
        opt: &mut AdamW,
    ) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward_batch(&mut tape, &vars, batch, flags)?;
        let losses = self.breakdown(&tape, &out, flags)?;
        tape.backward(out.l_total)?;

        let mut grads: HashMap<String, Vec<f64>> = HashMap::new();
        for (name, var) in vars.named() {
            if let Some(g) = tape.grad(var) {
                grads.insert(name, g.to_vec());
            }
        }
        drop(tape);
        for (name, tensor) in self.named_tensors_mut() {
            if !tensor.requires_grad {
                continue;
            }
            if let Some(g) = grads.get(&name) {
                opt.update(&name, tensor, g)?;
            }
        }
        Ok(losses)
    }

    /// Loss values without touching parameters.
    pub fn eval_batch(&self, batch: &Batch, flags: &StreamFlags) -> Result<LossBreakdown> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let out = self.forward_batch(&mut tape, &vars, batch, flags)?;
        self.breakdown(&tape, &out, flags)
    }

    /// Fuse and temporally project one sample's features into the decoder
    /// memory `[t', d]`, returned as plain values (`t'` rows). The result
    /// does not depend on any decoding prefix, so callers can compute it
    /// once and reuse it across greedy steps.
    pub fn encode_memory(
        &self,
        feats: &SampleFeatures,
        flags: &StreamFlags,
    ) -> Result<(Vec<f64>, usize)> {
        flags.validate()?;
        if feats.spatial.t != feats.mouth.t {
            return Err(Error::contract(format!(
                "stream lengths differ: {} spatial vs {} mouth frames",
                feats.spatial.t, feats.mouth.t
            )));
        }
        let d = self.hp.d_model;
        let t = feats.spatial.t;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let zs_wide = if flags.spatial {
            Some(tape.constant(&[t, 2 * d], feats.spatial.values().to_vec())?)
        } else {
            None
        };
        let zm = if flags.mouth {
            Some(tape.constant(&[t, d], feats.mouth.values().to_vec())?)
        } else {
            None
        };
        let zsp = self.projected_spatial(&mut tape, &vars, zs_wide)?;
        let fused = self.fused_stream(&mut tape, &vars, flags, zsp, zm)?;
        let zconv = fusion::temporal_project(&mut tape, &vars.fusion, fused, None)?;
        let rows = tape.shape(zconv)[0];
        Ok((tape.value(zconv).to_vec(), rows))
    }

    /// Per-frame fused embeddings `[t, d]` for one sample, before the
    /// temporal projection shortens the sequence. Each row stays aligned
    /// with its source frame, which makes these the right values to label
    /// by sign and export.
    pub fn fused_rows(
        &self,
        feats: &SampleFeatures,
        flags: &StreamFlags,
    ) -> Result<(Vec<f64>, usize)> {
        flags.validate()?;
        if feats.spatial.t != feats.mouth.t {
            return Err(Error::contract(format!(
                "stream lengths differ: {} spatial vs {} mouth frames",
                feats.spatial.t, feats.mouth.t
            )));
        }
        let d = self.hp.d_model;
        let t = feats.spatial.t;
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let zs_wide = if flags.spatial {
            Some(tape.constant(&[t, 2 * d], feats.spatial.values().to_vec())?)
        } else {
            None
        };
        let zm = if flags.mouth {
            Some(tape.constant(&[t, d], feats.mouth.values().to_vec())?)
        } else {
            None
        };
        let zsp = self.projected_spatial(&mut tape, &vars, zs_wide)?;
        let fused = self.fused_stream(&mut tape, &vars, flags, zsp, zm)?;
        Ok((tape.value(fused).to_vec(), t))
    }

    /// Greedy decoding over a precomputed memory (`[t', d]` values).
    pub fn translate_with_memory(&self, memory: &[f64], rows: usize) -> Result<Vec<usize>> {
        let d = self.hp.d_model;
        decoder::greedy_decode(
            &mut |prefix| {
                let mut tape = Tape::new();
                let vars = self.bind(&mut tape);
                let mem = tape.constant(&[rows, d], memory.to_vec())?;
                let logits = decoder::decode_logits(
                    &mut tape,
                    &vars.decoder,
                    Some(&vars.lora),
                    prefix,
                    mem,
                    None,
                )?;
                let v = self.vocab.len();
                let all = tape.value(logits);
                Ok(all[(prefix.len() - 1) * v..prefix.len() * v].to_vec())
            },
            self.hp.max_len,
        )
    }

    /// Greedy translation of one unpadded sample into token ids
    /// (excluding `<bos>`; includes `<eos>` when produced).
    pub fn translate(&self, feats: &SampleFeatures, flags: &StreamFlags) -> Result<Vec<usize>> {
        let (memory, rows) = self.encode_memory(feats, flags)?;
        self.translate_with_memory(&memory, rows)
    }

    /// Greedy translation rendered as a sentence (reserved tokens dropped).
    pub fn translate_to_sentence(
        &self,
        feats: &SampleFeatures,
        flags: &StreamFlags,
    ) -> Result<String> {
        let ids = self.translate(feats, flags)?;
        Ok(self.vocab.decode(&ids))
    }
}

// ── tests ────────────────────────────────────────────────────────────────────
