//! Dual-stream visual front end.
//!
//! Two frozen "stub" encoders stand in for large pretrained backbones: each is
//! a fixed random linear projection of a bilinearly resized, flattened frame.
//! The spatial stream sees the whole frame at two scales (the base resolution
//! plus four half-size patches of the doubled resolution, pooled and
//! concatenated), the mouthing stream sees a landmark-guided crop of the mouth
//! region. Both produce one feature row per frame; nothing here carries
//! gradients.

use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::tensor::Tensor;

/// Landmarks per frame in the face annotation scheme used throughout.
pub const N_LANDMARKS: usize = 68;
/// Index range of the mouth landmarks within the 68-point layout.
pub const MOUTH_START: usize = 48;
pub const MOUTH_END: usize = 68; // exclusive

// ── containers ───────────────────────────────────────────────────────────────

/// A video: `t` frames of `h x w x c` intensities, row-major `(y, x, channel)`.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f64>,
    pub frame_rate: Option<f64>,
}

impl FrameSequence {
    pub fn new(t: usize, h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<FrameSequence> {
        if data.len() != t * h * w * c {
            return Err(Error::shape(
                "FrameSequence::new",
                format!("{t}x{h}x{w}x{c} wants {} values, got {}", t * h * w * c, data.len()),
            ));
        }
        Ok(FrameSequence { t, h, w, c, data, frame_rate: None })
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.h * self.w * self.c;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn frame_mut(&mut self, i: usize) -> &mut [f64] {
        let n = self.h * self.w * self.c;
        &mut self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Per-frame 68-point landmarks, pixel units, stored `(x, y)` interleaved.
#[derive(Debug, Clone)]
pub struct LandmarkStream {
    pub t: usize,
    data: Vec<f64>, // t * 68 * 2
}

impl LandmarkStream {
    pub fn new(t: usize, data: Vec<f64>) -> Result<LandmarkStream> {
        if data.len() != t * N_LANDMARKS * 2 {
            return Err(Error::shape(
                "LandmarkStream::new",
                format!("{t} frames want {} values, got {}", t * N_LANDMARKS * 2, data.len()),
            ));
        }
        Ok(LandmarkStream { t, data })
    }

    pub fn point(&self, frame: usize, i: usize) -> (f64, f64) {
        let base = (frame * N_LANDMARKS + i) * 2;
        (self.data[base], self.data[base + 1])
    }

    pub fn frame(&self, i: usize) -> &[f64] {
        let n = N_LANDMARKS * 2;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Mouth crops resampled to a fixed `h x w`, plus the source box per frame
/// (`x0, y0, x1, y1` in pixel-center coordinates, post clamping).
#[derive(Debug, Clone)]
pub struct MouthClip {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    data: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

impl MouthClip {
    pub fn frame(&self, i: usize) -> &[f64] {
        let n = self.h * self.w * self.c;
        &self.data[i * n..(i + 1) * n]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }
}

/// Which stage of the pipeline a feature matrix came from. The width column
/// is relative to the model width `d`: the raw spatial stream is twice as
/// wide as everything else because of its two-scale concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamTag {
    /// Raw two-scale spatial features, width `2d`.
    SpatialWide,
    /// Spatial features after the learned projection to `d`.
    SpatialProjected,
    /// Mouth-crop features, width `d`.
    Mouth,
    /// Gated fusion of the two streams, width `d`.
    Fused,
    /// After temporal convolution, width `d`.
    Temporal,
}

/// `t x d` feature rows tagged with their provenance in the pipeline.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    pub t: usize,
    pub d: usize,
    values: Vec<f64>,
    pub tag: StreamTag,
}

impl FeatureSequence {
    pub fn new(t: usize, d: usize, values: Vec<f64>, tag: StreamTag) -> Result<FeatureSequence> {
        if values.len() != t * d {
            return Err(Error::shape(
                "FeatureSequence::new",
                format!("{t}x{d} wants {} values, got {}", t * d, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { component: "feature sequence".into() });
        }
        Ok(FeatureSequence { t, d, values, tag })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.d..(i + 1) * self.d]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

// ── bilinear resampling ──────────────────────────────────────────────────────

/// Bilinear resize with half-pixel sample centers and edge clamping.
/// Same-size resize is an exact copy.
pub fn bilinear_resize(
    src: &[f64],
    h: usize,
    w: usize,
    c: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), h * w * c);
    if h == out_h && w == out_w {
        return src.to_vec();
    }
    let mut out = vec![0.0; out_h * out_w * c];
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = sy - y0 as f64;
        for ox in 0..out_w {
            let sx =
                ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = sx - x0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out[(oy * out_w + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

// ── stub encoders ────────────────────────────────────────────────────────────

/// Frozen random linear projection of a resized, flattened frame.
///
/// Weights are drawn once from a seeded stream and never trained; the
/// checksum of `weights` is the invariant that proves it.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    pub in_h: usize,
    pub in_w: usize,
    pub c: usize,
    pub d_model: usize,
    weights: Tensor, // [in_h*in_w*c, d_model], requires_grad stays false
}

impl StubEncoder {
    pub fn new(stream: &mut Stream, in_h: usize, in_w: usize, c: usize, d_model: usize) -> StubEncoder {
        let in_dim = in_h * in_w * c;
        let std = 1.0 / (in_dim as f64).sqrt();
        StubEncoder { in_h, in_w, c, d_model, weights: Tensor::randn(stream, &[in_dim, d_model], std) }
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    /// Restore an encoder from checkpointed weights.
    pub fn from_weights(in_h: usize, in_w: usize, c: usize, weights: Tensor) -> Result<StubEncoder> {
        let shape = weights.shape().to_vec();
        if shape.len() != 2 || shape[0] != in_h * in_w * c {
            return Err(Error::shape(
                "StubEncoder::from_weights",
                format!("weights {shape:?} vs input {in_h}x{in_w}x{c}"),
            ));
        }
        Ok(StubEncoder { in_h, in_w, c, d_model: shape[1], weights })
    }

    /// Encode one frame: resize to the stub's input geometry, flatten,
    /// project. The projection accumulates input indices in ascending order;
    /// oracles reproducing it must do the same.
    pub fn encode(&self, frame: &[f64], h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
        if c != self.c {
            return Err(Error::shape(
                "StubEncoder::encode",
                format!("channel count {c} vs encoder channels {}", self.c),
            ));
        }
        if frame.len() != h * w * c {
            return Err(Error::shape(
                "StubEncoder::encode",
                format!("frame length {} vs {h}x{w}x{c}", frame.len()),
            ));
        }
        let resized = bilinear_resize(frame, h, w, c, self.in_h, self.in_w);
        let d = self.d_model;
        let wv = self.weights.data();
        let mut out = vec![0.0; d];
        for (i, &v) in resized.iter().enumerate() {
            if v == 0.0 {
                continue;
            }
            let row = &wv[i * d..i * d + d];
            for j in 0..d {
                out[j] += v * row[j];
            }
        }
        Ok(out)
    }
}

// ── spatial stream: two-scale encoding ───────────────────────────────────────

/// Encode one frame at two scales and concatenate:
/// `[ f(base) ‖ mean(f(p1), f(p2), f(p3), f(p4)) ]`, where the `p_i` are the
/// four non-overlapping quadrants (top-left, top-right, bottom-left,
/// bottom-right) of the frame resized to twice the stub's base resolution.
/// Output width is `2 * d_model`.
pub fn s2_encode_frame(
    frame: &[f64],
    h: usize,
    w: usize,
    c: usize,
    enc: &StubEncoder,
) -> Result<Vec<f64>> {
    if enc.in_h != enc.in_w {
        return Err(Error::config(format!(
            "two-scale encoding needs a square stub, got {}x{}",
            enc.in_h, enc.in_w
        )));
    }
    let r = enc.in_h;
    let d = enc.d_model;

    let base = enc.encode(frame, h, w, c)?;

    let doubled = bilinear_resize(frame, h, w, c, 2 * r, 2 * r);
    let mut pooled = vec![0.0; d];
    for quadrant in 0..4 {
        let qy = (quadrant / 2) * r;
        let qx = (quadrant % 2) * r;
        let mut patch = vec![0.0; r * r * c];
        for y in 0..r {
            for x in 0..r {
                for ch in 0..c {
                    patch[(y * r + x) * c + ch] = doubled[((qy + y) * 2 * r + qx + x) * c + ch];
                }
            }
        }
        let e = enc.encode(&patch, r, r, c)?;
        for j in 0..d {
            pooled[j] += e[j];
        }
    }
    for p in pooled.iter_mut() {
        *p /= 4.0;
    }

    let mut out = base;
    out.extend_from_slice(&pooled);
    Ok(out)
}

/// Full-frame stream: one `2 * d_model` row per frame.
pub fn encode_spatial_sequence(video: &FrameSequence, enc: &StubEncoder) -> Result<FeatureSequence> {
    if video.t == 0 {
        return Err(Error::degenerate("cannot encode an empty video"));
    }
    let d = 2 * enc.d_model;
    let mut values = Vec::with_capacity(video.t * d);
    for i in 0..video.t {
        values.extend(s2_encode_frame(video.frame(i), video.h, video.w, video.c, enc)?);
    }
    FeatureSequence::new(video.t, d, values, StreamTag::SpatialWide)
}

// ── mouthing stream: crop + encode ───────────────────────────────────────────

/// Crop the mouth region of each frame, guided by landmarks 48..67.
///
/// The box is the landmark bounding box expanded on every side by
/// `margin * max(box_width, box_height)`, clamped to the image, then
/// bilinearly resampled to `out_h x out_w` (box corners map to sample-grid
/// corners). A zero-area box falls back to the previous frame's box; a
/// zero-area box on the first frame is an error.
pub fn crop_mouth_region(
    video: &FrameSequence,
    landmarks: &LandmarkStream,
    margin: f64,
    out_h: usize,
    out_w: usize,
) -> Result<MouthClip> {
    if video.t != landmarks.t {
        return Err(Error::contract(format!(
            "video has {} frames but landmarks have {}",
            video.t, landmarks.t
        )));
    }
    if margin < 0.0 {
        return Err(Error::config(format!("crop margin must be non-negative, got {margin}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("crop output size must be positive"));
    }

    let mut boxes: Vec<[f64; 4]> = Vec::with_capacity(video.t);
    for f in 0..video.t {
        match mouth_box(landmarks, f, margin, video.w, video.h) {
            Some(b) => boxes.push(b),
            None => match boxes.last() {
                Some(prev) => boxes.push(*prev),
                None => {
                    return Err(Error::degenerate(
                        "zero-area mouth box on the first frame; no previous box to fall back on",
                    ))
                }
            },
        }
    }

    let n = out_h * out_w * video.c;
    let mut data = Vec::with_capacity(video.t * n);
    for f in 0..video.t {
        data.extend(sample_box(video.frame(f), video.h, video.w, video.c, &boxes[f], out_h, out_w));
    }

    Ok(MouthClip { t: video.t, h: out_h, w: out_w, c: video.c, data, boxes })
}

/// Expanded, clamped mouth box for one frame, or `None` if degenerate.
fn mouth_box(landmarks: &LandmarkStream, frame: usize, margin: f64, w: usize, h: usize) -> Option<[f64; 4]> {
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for i in MOUTH_START..MOUTH_END {
        let (x, y) = landmarks.point(frame, i);
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    let bw = x1 - x0;
    let bh = y1 - y0;
    if bw <= 0.0 || bh <= 0.0 {
        return None;
    }
    let pad = margin * bw.max(bh);
    let bx0 = (x0 - pad).clamp(0.0, (w - 1) as f64);
    let by0 = (y0 - pad).clamp(0.0, (h - 1) as f64);
    let bx1 = (x1 + pad).clamp(0.0, (w - 1) as f64);
    let by1 = (y1 + pad).clamp(0.0, (h - 1) as f64);
    Some([bx0, by0, bx1, by1])
}

/// Bilinearly sample an `out_h x out_w` grid spanning the box (inclusive
/// corners) from one frame.
fn sample_box(
    frame: &[f64],
    h: usize,
    w: usize,
    c: usize,
    bbox: &[f64; 4],
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let [x0, y0, x1, y1] = *bbox;
    let mut out = vec![0.0; out_h * out_w * c];
    for oy in 0..out_h {
        let sy = if out_h > 1 { y0 + (y1 - y0) * oy as f64 / (out_h - 1) as f64 } else { (y0 + y1) * 0.5 };
        let sy = sy.clamp(0.0, (h - 1) as f64);
        let iy0 = sy.floor() as usize;
        let iy1 = (iy0 + 1).min(h - 1);
        let fy = sy - iy0 as f64;
        for ox in 0..out_w {
            let sx = if out_w > 1 { x0 + (x1 - x0) * ox as f64 / (out_w - 1) as f64 } else { (x0 + x1) * 0.5 };
            let sx = sx.clamp(0.0, (w - 1) as f64);
            let ix0 = sx.floor() as usize;
            let ix1 = (ix0 + 1).min(w - 1);
            let fx = sx - ix0 as f64;
            for ch in 0..c {
                let p = |y: usize, x: usize| frame[(y * w + x) * c + ch];
                let top = p(iy0, ix0) * (1.0 - fx) + p(iy0, ix1) * fx;
                let bot = p(iy1, ix0) * (1.0 - fx) + p(iy1, ix1) * fx;
                out[(oy * out_w + ox) * c + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

/// Mouth stream: one `d_model` row per cropped frame.
pub fn encode_mouth_sequence(clip: &MouthClip, enc: &StubEncoder) -> Result<FeatureSequence> {
    if clip.t == 0 {
        return Err(Error::degenerate("cannot encode an empty clip"));
    }
    let mut values = Vec::with_capacity(clip.t * enc.d_model);
    for i in 0..clip.t {
        values.extend(enc.encode(clip.frame(i), clip.h, clip.w, clip.c)?);
    }
    FeatureSequence::new(clip.t, enc.d_model, values, StreamTag::Mouth)
}

// ── tests ────────────────────────────────────────────────────────────────────
