//! Synthetic ambiguous-sign corpus.
//!
//! Each sign renders as a fixed scene: a static face disc, a mouth patch
//! carrying a phase-coded sinusoidal grating, and a moving gesture blob on a
//! grid in the lower half of the frame. The first `2 · n_pairs` signs form
//! ambiguous pairs: both members of a pair share one gesture template
//! (identical blob cell and motion), so the body channel cannot tell them
//! apart — only the mouth grating's phase can, and pair members sit a half
//! turn apart in phase. All remaining signs get unique gesture cells *and*
//! unique mouth phases, but those phases crowd together on the circle.
//!
//! Two jitters shape which stream can read the mouth. The whole mouth
//! (grating and mouth landmarks together) shifts by a per-occurrence random
//! offset, so a full-frame view meets the grating at an unpredictable
//! position and its phase washes out under a linear encoder; the
//! landmark-guided crop tracks the shift and cancels it. Per-landmark
//! jitter then shakes the crop window by a fraction of a pixel, adding
//! phase noise that confuses the crowded non-pair phases but not the
//! half-turn-separated pairs. Net effect: the mouth stream separates pairs
//! well and everything else poorly, which is what the stream ablations
//! measure.
//!
//! All randomness derives from one seed: sample `i` of each split owns a
//! dedicated generator stream, so a sample's content is independent of the
//! split sizes around it.

use crate::decoder::Vocabulary;
use crate::encoders::{FrameSequence, LandmarkStream, MOUTH_END, MOUTH_START, N_LANDMARKS};
use crate::error::{Error, Result};
use crate::rng::Stream;

// ── scene constants (fractions of frame size unless stated) ──────────────────

/// Face disc center and radius.
const FACE_CX: f64 = 0.5;
const FACE_CY: f64 = 0.3;
const FACE_R: f64 = 0.22;
const FACE_LEVEL: f64 = 0.5;

/// Clean mouth ellipse: center and half-axes.
const MOUTH_CX: f64 = 0.5;
const MOUTH_CY: f64 = 0.36;
const MOUTH_HW: f64 = 0.14;
const MOUTH_HH: f64 = 0.07;

/// The grating is rendered over the clean landmark box padded by this
/// fraction of its larger side — comfortably more than the crop margin, so
/// a jittered crop window still lands on pure grating.
pub const RENDER_MARGIN: f64 = 0.35;

/// Grating amplitude around the 0.5 base level.
const GRATING_AMP: f64 = 0.22;
/// Grating frequency in cycles across the render rect, per axis.
const GRATING_KU: f64 = 3.0;
const GRATING_KV: f64 = 1.0;
/// Phase advance per frame within a sign (mouth animation).
const ANIM_RATE: f64 = 0.4;

/// Gesture blob grid (columns × rows), peak level, radius, motion.
const BLOB_COLS: usize = 6;
const BLOB_ROWS: usize = 3;
const BLOB_X0: f64 = 0.12;
const BLOB_DX: f64 = 0.15;
const BLOB_Y0: f64 = 0.56;
const BLOB_DY: f64 = 0.14;
const BLOB_AMP: f64 = 0.85;
const BLOB_R: f64 = 0.05;
/// Blob drift per frame (pixels) along the gesture's direction.
const BLOB_STEP: f64 = 0.8;

/// Pixel noise standard deviation per unit of `noise_sigma`.
const PIXEL_NOISE_PER_SIGMA: f64 = 0.02;

/// Std (pixels per unit of `noise_sigma`) of the per-occurrence offset that
/// moves the rendered mouth — grating and mouth landmarks together. At the
/// default `noise_sigma` this is ±2 px, more than a full grating cycle of
/// positional uncertainty for any fixed-position observer, while the
/// landmark-tracking crop follows it exactly.
pub const MOUTH_POS_JITTER_PER_SIGMA: f64 = 4.0;

// ── configuration ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub n_signs: usize,
    /// Number of ambiguous pairs; signs `0..2·n_pairs` are pair members.
    pub n_pairs: usize,
    pub frames_per_sign: usize,
    pub sent_min: usize,
    pub sent_max: usize,
    pub frame_h: usize,
    pub frame_w: usize,
    pub frame_c: usize,
    /// Landmark jitter std in pixels; also scales pixel and blob jitter.
    pub noise_sigma: f64,
    pub train_size: usize,
    pub valid_size: usize,
    pub test_size: usize,
    /// Sampling weight of pair signs in the test split (others weigh 1).
    pub test_pair_bias: f64,
}

impl Default for SyntheticConfig {
    fn default() -> SyntheticConfig {
        SyntheticConfig {
            n_signs: 24,
            n_pairs: 6,
            frames_per_sign: 4,
            sent_min: 3,
            sent_max: 6,
            frame_h: 32,
            frame_w: 32,
            frame_c: 3,
            noise_sigma: 0.5,
            train_size: 600,
            valid_size: 100,
            test_size: 100,
            test_pair_bias: 3.0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_signs < 2 * self.n_pairs || self.n_pairs == 0 {
            return Err(Error::config(format!(
                "{} signs cannot host {} pairs",
                self.n_signs, self.n_pairs
            )));
        }
        let classes = self.n_signs - self.n_pairs;
        if classes > BLOB_COLS * BLOB_ROWS {
            return Err(Error::config(format!(
                "{classes} gesture classes exceed the {} grid cells",
                BLOB_COLS * BLOB_ROWS
            )));
        }
        if self.sent_min == 0 || self.sent_min > self.sent_max {
            return Err(Error::config(format!(
                "bad sentence length bounds [{}, {}]",
                self.sent_min, self.sent_max
            )));
        }
        if self.frames_per_sign == 0 {
            return Err(Error::config("frames_per_sign must be positive".to_string()));
        }
        if self.frame_h < 16 || self.frame_w < 16 || self.frame_c == 0 {
            return Err(Error::config(format!(
                "frame {}x{}x{} too small to render the scene",
                self.frame_h, self.frame_w, self.frame_c
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::config(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if self.train_size == 0 || self.valid_size == 0 || self.test_size == 0 {
            return Err(Error::config("every split needs at least one sample".to_string()));
        }
        Ok(())
    }
}

// ── sign structure ───────────────────────────────────────────────────────────

/// Is this sign a member of an ambiguous pair?
pub fn is_pair_sign(cfg: &SyntheticConfig, sign: usize) -> bool {
    sign < 2 * cfg.n_pairs
}

/// The other member of a pair, if any.
pub fn pair_partner(cfg: &SyntheticConfig, sign: usize) -> Option<usize> {
    if is_pair_sign(cfg, sign) {
        Some(sign ^ 1)
    } else {
        None
    }
}

/// Gesture template index. Pair members share their pair's template; the
/// remaining signs each own one.
pub fn gesture_class(cfg: &SyntheticConfig, sign: usize) -> usize {
    if is_pair_sign(cfg, sign) {
        sign / 2
    } else {
        cfg.n_pairs + (sign - 2 * cfg.n_pairs)
    }
}

/// Mouth grating phase. Even pair members and non-pair signs sit on the
/// uniform circle `2πs/n`; the odd pair member sits a half turn (plus a
/// half step, to keep all phases distinct) from its partner.
pub fn mouth_phase(cfg: &SyntheticConfig, sign: usize) -> f64 {
    let n = cfg.n_signs as f64;
    let tau = 2.0 * std::f64::consts::PI;
    if is_pair_sign(cfg, sign) && sign % 2 == 1 {
        tau * (sign - 1) as f64 / n + std::f64::consts::PI + std::f64::consts::PI / n
    } else {
        tau * sign as f64 / n
    }
}

/// Token text for a sign id.
pub fn sign_token(sign: usize) -> String {
    format!("sign{sign:02}")
}

/// The full vocabulary (reserved tokens + every sign token, in id order) —
/// a pure function of the config, independent of any corpus draw.
pub fn full_vocabulary(cfg: &SyntheticConfig) -> Vocabulary {
    let all = (0..cfg.n_signs).map(sign_token).collect::<Vec<_>>().join(" ");
    Vocabulary::from_sentences(&[all])
}

// ── geometry ─────────────────────────────────────────────────────────────────

/// Clean (jitter-free) mouth landmark bounding box `[x0, y0, x1, y1]`.
pub fn clean_mouth_box(cfg: &SyntheticConfig) -> [f64; 4] {
    let (w, h) = (cfg.frame_w as f64, cfg.frame_h as f64);
    let (cx, cy) = (MOUTH_CX * w, MOUTH_CY * h);
    let (hw, hh) = (MOUTH_HW * w, MOUTH_HH * h);
    [cx - hw, cy - hh, cx + hw, cy + hh]
}

/// The rectangle the grating is rendered into: the clean box padded by
/// [`RENDER_MARGIN`] of its larger side.
pub fn mouth_render_rect(cfg: &SyntheticConfig) -> [f64; 4] {
    let [x0, y0, x1, y1] = clean_mouth_box(cfg);
    let pad = RENDER_MARGIN * (x1 - x0).max(y1 - y0);
    [x0 - pad, y0 - pad, x1 + pad, y1 + pad]
}

/// Clean positions of all 68 landmarks: mouth points on the mouth ellipse,
/// the rest on a circle just inside the face disc.
pub fn clean_landmarks(cfg: &SyntheticConfig) -> Vec<(f64, f64)> {
    let (w, h) = (cfg.frame_w as f64, cfg.frame_h as f64);
    let tau = 2.0 * std::f64::consts::PI;
    (0..N_LANDMARKS)
        .map(|j| {
            if (MOUTH_START..MOUTH_END).contains(&j) {
                let th = tau * (j - MOUTH_START) as f64 / (MOUTH_END - MOUTH_START) as f64;
                (MOUTH_CX * w + MOUTH_HW * w * th.cos(), MOUTH_CY * h + MOUTH_HH * h * th.sin())
            } else {
                let th = tau * j as f64 / (N_LANDMARKS - (MOUTH_END - MOUTH_START)) as f64;
                (
                    FACE_CX * w + 0.95 * FACE_R * h * th.cos(),
                    FACE_CY * h + 0.95 * FACE_R * h * th.sin(),
                )
            }
        })
        .collect()
}

fn blob_center(cfg: &SyntheticConfig, gesture: usize, frame_in_sign: usize) -> (f64, f64) {
    let (w, h) = (cfg.frame_w as f64, cfg.frame_h as f64);
    let col = gesture % BLOB_COLS;
    let row = gesture / BLOB_COLS;
    let bx = (BLOB_X0 + BLOB_DX * col as f64) * w;
    let by = (BLOB_Y0 + BLOB_DY * row as f64) * h;
    let classes = (cfg.n_signs - cfg.n_pairs) as f64;
    let dir = 2.0 * std::f64::consts::PI * gesture as f64 / classes;
    let centered = frame_in_sign as f64 - (cfg.frames_per_sign as f64 - 1.0) / 2.0;
    (bx + BLOB_STEP * centered * dir.cos(), by + BLOB_STEP * centered * dir.sin())
}

// ── rendering ────────────────────────────────────────────────────────────────

/// Render one frame of a sign. `blob_jitter` is the per-occurrence hand
/// offset and `mouth_offset` the per-occurrence mouth shift (grating and
/// mouth landmarks move together); `rng` supplies landmark jitter then
/// pixel noise (in that fixed order). Returns
/// `(pixels [h·w·c], landmarks [68·2])`.
pub fn render_sign_frame(
    cfg: &SyntheticConfig,
    sign: usize,
    frame_in_sign: usize,
    blob_jitter: (f64, f64),
    mouth_offset: (f64, f64),
    rng: &mut Stream,
) -> (Vec<f64>, Vec<f64>) {
    let (w, h, c) = (cfg.frame_w, cfg.frame_h, cfg.frame_c);
    let (wf, hf) = (w as f64, h as f64);
    let base_rect = mouth_render_rect(cfg);
    let rect = [
        base_rect[0] + mouth_offset.0,
        base_rect[1] + mouth_offset.1,
        base_rect[2] + mouth_offset.0,
        base_rect[3] + mouth_offset.1,
    ];
    let phase = mouth_phase(cfg, sign) + ANIM_RATE * frame_in_sign as f64;
    let gesture = gesture_class(cfg, sign);
    let (bx0, by0) = blob_center(cfg, gesture, frame_in_sign);
    let (bx, by) = (bx0 + blob_jitter.0, by0 + blob_jitter.1);
    let (fcx, fcy, fr) = (FACE_CX * wf, FACE_CY * hf, FACE_R * hf);
    let blob_r = BLOB_R * hf;
    let tau = 2.0 * std::f64::consts::PI;

    // Landmarks first (fixed draw order keeps generation reproducible).
    // Mouth points ride the mouth offset; the rest of the face stays put.
    let mut landmarks = Vec::with_capacity(N_LANDMARKS * 2);
    for (j, (x, y)) in clean_landmarks(cfg).into_iter().enumerate() {
        let (ox, oy) = if (MOUTH_START..MOUTH_END).contains(&j) {
            mouth_offset
        } else {
            (0.0, 0.0)
        };
        landmarks.push(x + ox + rng.normal(cfg.noise_sigma));
        landmarks.push(y + oy + rng.normal(cfg.noise_sigma));
    }

    let mut pixels = vec![0.0; h * w * c];
    let noise_std = PIXEL_NOISE_PER_SIGMA * cfg.noise_sigma;
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64, y as f64);
            let in_rect = xf >= rect[0] && xf <= rect[2] && yf >= rect[1] && yf <= rect[3];
            let base = if in_rect {
                let u = (xf - rect[0]) / (rect[2] - rect[0]);
                let v = (yf - rect[1]) / (rect[3] - rect[1]);
                0.5 + GRATING_AMP * (tau * (GRATING_KU * u + GRATING_KV * v) + phase).sin()
            } else {
                let d2 = (xf - fcx).powi(2) + (yf - fcy).powi(2);
                if d2 <= fr * fr {
                    FACE_LEVEL
                } else {
                    0.0
                }
            };
            let bd2 = (xf - bx).powi(2) + (yf - by).powi(2);
            let val = base + BLOB_AMP * (-bd2 / (2.0 * blob_r * blob_r)).exp();
            for ch in 0..c {
                let noisy = val + rng.normal(noise_std);
                pixels[(y * w + x) * c + ch] = noisy.clamp(0.0, 1.0);
            }
        }
    }
    (pixels, landmarks)
}

/// Render a whole sign sequence into a video and its landmark track.
pub fn render_sentence(
    cfg: &SyntheticConfig,
    signs: &[usize],
    rng: &mut Stream,
) -> Result<(FrameSequence, LandmarkStream)> {
    if signs.is_empty() {
        return Err(Error::contract("cannot render an empty sign sequence".to_string()));
    }
    if let Some(&bad) = signs.iter().find(|&&s| s >= cfg.n_signs) {
        return Err(Error::contract(format!("sign id {bad} out of range")));
    }
    let t = signs.len() * cfg.frames_per_sign;
    let mut pixels = Vec::with_capacity(t * cfg.frame_h * cfg.frame_w * cfg.frame_c);
    let mut marks = Vec::with_capacity(t * N_LANDMARKS * 2);
    let mouth_std = MOUTH_POS_JITTER_PER_SIGMA * cfg.noise_sigma;
    for &sign in signs {
        let jitter = (rng.normal(cfg.noise_sigma), rng.normal(cfg.noise_sigma));
        let mouth_offset = (rng.normal(mouth_std), rng.normal(mouth_std));
        for f in 0..cfg.frames_per_sign {
            let (px, lm) = render_sign_frame(cfg, sign, f, jitter, mouth_offset, rng);
            pixels.extend(px);
            marks.extend(lm);
        }
    }
    Ok((
        FrameSequence::new(t, cfg.frame_h, cfg.frame_w, cfg.frame_c, pixels)?,
        LandmarkStream::new(t, marks)?,
    ))
}

/// The sign a frame index belongs to, given the fixed frames-per-sign
/// alignment.
pub fn aligned_sign_index(cfg: &SyntheticConfig, frame: usize) -> usize {
    frame / cfg.frames_per_sign
}

// ── corpus ───────────────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub signs: Vec<usize>,
    pub sentence: String,
    pub video: FrameSequence,
    pub landmarks: LandmarkStream,
    /// True when any sign in the sentence belongs to an ambiguous pair.
    pub contains_pair_sign: bool,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub config: SyntheticConfig,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generator-stream offsets per split; sample `i` uses `offset + i`, so its
/// bytes never depend on how many other samples exist.
const TRAIN_STREAM_BASE: u64 = 10_000;
const VALID_STREAM_BASE: u64 = 20_000;
const TEST_STREAM_BASE: u64 = 30_000;

fn draw_sign(cfg: &SyntheticConfig, rng: &mut Stream, pair_biased: bool) -> usize {
    if !pair_biased {
        return rng.index(cfg.n_signs);
    }
    let weights: Vec<f64> = (0..cfg.n_signs)
        .map(|s| if is_pair_sign(cfg, s) { cfg.test_pair_bias } else { 1.0 })
        .collect();
    rng.weighted(&weights)
}

/// Generate one sample on its own generator stream.
pub fn generate_sample(
    cfg: &SyntheticConfig,
    seed: u64,
    stream: u64,
    id: String,
    pair_biased: bool,
) -> Result<Sample> {
    let mut rng = Stream::new(seed, stream);
    let len = cfg.sent_min + rng.index(cfg.sent_max - cfg.sent_min + 1);
    let signs: Vec<usize> = (0..len).map(|_| draw_sign(cfg, &mut rng, pair_biased)).collect();
    let (video, landmarks) = render_sentence(cfg, &signs, &mut rng)?;
    let sentence = signs.iter().map(|&s| sign_token(s)).collect::<Vec<_>>().join(" ");
    let contains_pair_sign = signs.iter().any(|&s| is_pair_sign(cfg, s));
    Ok(Sample { id, signs, sentence, video, landmarks, contains_pair_sign })
}

/// Generate the three splits. Train and valid sample signs uniformly; the
/// test split is pair-heavy (each pair sign weighted `test_pair_bias`).
pub fn generate_corpus(cfg: &SyntheticConfig, seed: u64) -> Result<Corpus> {
    cfg.validate()?;
    let make = |base: u64, count: usize, prefix: &str, biased: bool| -> Result<Vec<Sample>> {
        (0..count)
            .map(|i| {
                generate_sample(cfg, seed, base + i as u64, format!("{prefix}{i:04}"), biased)
            })
            .collect()
    };
    Ok(Corpus {
        config: cfg.clone(),
        seed,
        train: make(TRAIN_STREAM_BASE, cfg.train_size, "train", false)?,
        valid: make(VALID_STREAM_BASE, cfg.valid_size, "valid", false)?,
        test: make(TEST_STREAM_BASE, cfg.test_size, "test", true)?,
    })
}

// ── tests ────────────────────────────────────────────────────────────────────
