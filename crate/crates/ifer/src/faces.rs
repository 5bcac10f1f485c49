//! Procedural toy-face corpus: renderer, 7-class expression labels, sampler.
//!
//! Faces are drawn from signed-distance shapes (ellipse head, eyes, brows,
//! mouth band) with analytic anti-aliasing, so rendering is deterministic
//! f64 math. Expression labels are a total decision tree over the mouth,
//! eye and brow parameters; the jitter seed never affects the label.

use ndarray::IxDyn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IferError, Result};
use crate::tape::Arr;

pub const IMG_SIZE: usize = 64;
pub const NUM_CLASSES: usize = 7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ExpressionLabel {
    Neutral,
    Happy,
    Sad,
    Surprise,
    Fear,
    Disgust,
    Anger,
}

impl ExpressionLabel {
    pub const ALL: [ExpressionLabel; 7] = [
        ExpressionLabel::Neutral,
        ExpressionLabel::Happy,
        ExpressionLabel::Sad,
        ExpressionLabel::Surprise,
        ExpressionLabel::Fear,
        ExpressionLabel::Disgust,
        ExpressionLabel::Anger,
    ];

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&l| l == self).unwrap()
    }

    pub fn from_index(i: usize) -> Result<Self> {
        Self::ALL
            .get(i)
            .copied()
            .ok_or_else(|| IferError::Validation(format!("class index {i} out of range 0..7")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ExpressionLabel::Neutral => "neutral",
            ExpressionLabel::Happy => "happy",
            ExpressionLabel::Sad => "sad",
            ExpressionLabel::Surprise => "surprise",
            ExpressionLabel::Fear => "fear",
            ExpressionLabel::Disgust => "disgust",
            ExpressionLabel::Anger => "anger",
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FaceParams {
    /// Face ellipse centre in normalized [0,1] image coordinates.
    pub center: (f64, f64),
    /// Face ellipse half-axes (x, y), normalized.
    pub axes: (f64, f64),
    /// Skin RGB, each in [0.35, 0.95].
    pub skin: (f64, f64, f64),
    /// 0 = closed, 1 = wide open.
    pub eye_openness: f64,
    /// -1 = inner ends pulled down (frown), +1 = raised.
    pub brow_angle: f64,
    /// -1 = strong frown, +1 = strong smile.
    pub mouth_curve: f64,
    /// 0 = closed line, 1 = wide open.
    pub mouth_open: f64,
    /// Drives class-preserving color/position jitter only.
    pub jitter_seed: u64,
}

impl FaceParams {
    pub fn validate(&self) -> Result<()> {
        let checks: [(&str, f64, f64, f64); 10] = [
            ("center.x", self.center.0, 0.35, 0.65),
            ("center.y", self.center.1, 0.38, 0.62),
            ("axes.x", self.axes.0, 0.20, 0.40),
            ("axes.y", self.axes.1, 0.26, 0.46),
            ("skin.r", self.skin.0, 0.35, 0.95),
            ("skin.g", self.skin.1, 0.35, 0.95),
            ("skin.b", self.skin.2, 0.35, 0.95),
            ("eye_openness", self.eye_openness, 0.0, 1.0),
            ("mouth_open", self.mouth_open, 0.0, 1.0),
            ("mouth_curve", self.mouth_curve, -1.0, 1.0),
        ];
        for (name, v, lo, hi) in checks {
            if !(lo..=hi).contains(&v) || !v.is_finite() {
                return Err(IferError::Validation(format!(
                    "face parameter {name}={v} outside [{lo}, {hi}]"
                )));
            }
        }
        if !(-1.0..=1.0).contains(&self.brow_angle) {
            return Err(IferError::Validation(format!(
                "face parameter brow_angle={} outside [-1, 1]",
                self.brow_angle
            )));
        }
        Ok(())
    }
}

/// Total decision tree over the expressive parameters; the jitter seed and
/// geometry/skin jitter are excluded, so the label is jitter-invariant.
pub fn expression_label(p: &FaceParams) -> ExpressionLabel {
    if p.mouth_open > 0.6 {
        if p.eye_openness > 0.6 {
            ExpressionLabel::Surprise
        } else {
            ExpressionLabel::Fear
        }
    } else if p.mouth_curve > 0.4 {
        ExpressionLabel::Happy
    } else if p.mouth_curve < -0.4 {
        if p.brow_angle < -0.4 {
            ExpressionLabel::Anger
        } else {
            ExpressionLabel::Sad
        }
    } else if p.brow_angle < -0.4 {
        ExpressionLabel::Disgust
    } else {
        ExpressionLabel::Neutral
    }
}

fn smooth_cov(d: f64, px: f64) -> f64 {
    // coverage from a signed distance, ~1 inside, 0 outside, px-wide ramp
    (0.5 - d / px).clamp(0.0, 1.0)
}

fn ellipse_sdf(x: f64, y: f64, cx: f64, cy: f64, rx: f64, ry: f64) -> f64 {
    // scaled-radius approximation, adequate at 64x64
    let v = (((x - cx) / rx).powi(2) + ((y - cy) / ry).powi(2)).sqrt();
    (v - 1.0) * rx.min(ry)
}

fn segment_sdf(x: f64, y: f64, ax: f64, ay: f64, bx: f64, by: f64, r: f64) -> f64 {
    let (px, py) = (x - ax, y - ay);
    let (dx, dy) = (bx - ax, by - ay);
    let t = ((px * dx + py * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let (ex, ey) = (px - t * dx, py - t * dy);
    (ex * ex + ey * ey).sqrt() - r
}

struct Jitter {
    bg: (f64, f64, f64),
    eye_dx: f64,
    mouth_dy: f64,
    skin_mul: f64,
}

fn jitter_for(p: &FaceParams) -> Jitter {
    let mut rng = ChaCha8Rng::seed_from_u64(p.jitter_seed);
    Jitter {
        bg: (
            rng.gen_range(0.08..0.25),
            rng.gen_range(0.08..0.25),
            rng.gen_range(0.10..0.30),
        ),
        eye_dx: rng.gen_range(-0.01..0.01),
        mouth_dy: rng.gen_range(-0.01..0.01),
        skin_mul: rng.gen_range(0.92..1.08),
    }
}

/// Rasterize a face to `[3, 64, 64]` with values in [0,1].
pub fn render_face(p: &FaceParams) -> Result<Arr> {
    p.validate()?;
    let j = jitter_for(p);
    let n = IMG_SIZE;
    let px = 1.0 / n as f64;
    let (cx, cy) = p.center;
    let (rx, ry) = p.axes;
    let skin = (
        (p.skin.0 * j.skin_mul).clamp(0.0, 1.0),
        (p.skin.1 * j.skin_mul).clamp(0.0, 1.0),
        (p.skin.2 * j.skin_mul).clamp(0.0, 1.0),
    );

    // derived geometry
    let eye_y = cy - 0.32 * ry;
    let eye_dx = 0.42 * rx + j.eye_dx;
    let eye_rx = 0.16 * rx;
    let eye_ry = (0.02 + 0.13 * p.eye_openness) * ry;
    let brow_y = eye_y - 0.28 * ry;
    let brow_half = 0.20 * rx;
    let brow_tilt = 0.10 * ry * p.brow_angle;
    let mouth_y = cy + 0.48 * ry + j.mouth_dy;
    let mouth_half = 0.40 * rx;
    let mouth_thick = 0.018 + 0.075 * p.mouth_open;
    let curve_amp = 0.16 * ry * p.mouth_curve;

    let mut img = Arr::zeros(IxDyn(&[3, n, n]));
    for row in 0..n {
        for col in 0..n {
            let x = (col as f64 + 0.5) * px;
            let y = (row as f64 + 0.5) * px;
            let mut rgb = j.bg;

            let face = smooth_cov(ellipse_sdf(x, y, cx, cy, rx, ry), px);
            rgb = mix(rgb, skin, face);

            // eyes: white with pupil
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                let white = smooth_cov(ellipse_sdf(x, y, ex, eye_y, eye_rx, eye_ry), px);
                rgb = mix(rgb, (0.95, 0.95, 0.95), white);
                let pup = smooth_cov(
                    ellipse_sdf(x, y, ex, eye_y, 0.35 * eye_rx, (0.8 * eye_ry).max(0.004)),
                    px,
                );
                rgb = mix(rgb, (0.05, 0.05, 0.08), pup);
            }

            // brows: tilted segments, inner end moves opposite the angle sign
            for side in [-1.0, 1.0] {
                let ex = cx + side * eye_dx;
                let inner = ex - side * brow_half;
                let outer = ex + side * brow_half;
                let d = segment_sdf(
                    x,
                    y,
                    inner,
                    brow_y + brow_tilt,
                    outer,
                    brow_y - brow_tilt,
                    0.012,
                );
                rgb = mix(rgb, (0.10, 0.07, 0.05), smooth_cov(d, px));
            }

            // mouth: curved band
            let t = ((x - cx) / mouth_half).clamp(-1.5, 1.5);
            if t.abs() <= 1.0 {
                let my = mouth_y - curve_amp * (1.0 - t * t) + curve_amp * 0.5;
                let d = (y - my).abs() - mouth_thick * (1.0 - 0.55 * t * t);
                rgb = mix(rgb, (0.55, 0.15, 0.18), smooth_cov(d, px));
            }

            img[[0, row, col]] = rgb.0;
            img[[1, row, col]] = rgb.1;
            img[[2, row, col]] = rgb.2;
        }
    }
    Ok(img)
}

fn mix(a: (f64, f64, f64), b: (f64, f64, f64), t: f64) -> (f64, f64, f64) {
    (
        a.0 + (b.0 - a.0) * t,
        a.1 + (b.1 - a.1) * t,
        a.2 + (b.2 - a.2) * t,
    )
}

/// Axis-aligned face bounding box in pixels: (row0, row1, col0, col1), exclusive end.
pub fn face_bbox(p: &FaceParams) -> (usize, usize, usize, usize) {
    let n = IMG_SIZE as f64;
    let r0 = ((p.center.1 - p.axes.1) * n).floor().max(0.0) as usize;
    let r1 = (((p.center.1 + p.axes.1) * n).ceil() as usize).min(IMG_SIZE);
    let c0 = ((p.center.0 - p.axes.0) * n).floor().max(0.0) as usize;
    let c1 = (((p.center.0 + p.axes.0) * n).ceil() as usize).min(IMG_SIZE);
    (r0, r1, c0, c1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(IferError::Validation(format!("unknown split '{s}'"))),
        }
    }
}

/// Class-conditional parameter ranges, kept a margin of 0.2 away from every
/// label boundary so classes stay decisively separated.
fn sample_class_params(class: ExpressionLabel, rng: &mut ChaCha8Rng, jitter_seed: u64) -> FaceParams {
    let (mc, mo, eo, ba) = match class {
        ExpressionLabel::Neutral => (
            rng.gen_range(-0.2..0.2),
            rng.gen_range(0.0..0.35),
            rng.gen_range(0.30..0.70),
            rng.gen_range(-0.2..0.8),
        ),
        ExpressionLabel::Happy => (
            rng.gen_range(0.6..1.0),
            rng.gen_range(0.0..0.35),
            rng.gen_range(0.25..0.75),
            rng.gen_range(-0.2..0.8),
        ),
        ExpressionLabel::Sad => (
            rng.gen_range(-1.0..-0.6),
            rng.gen_range(0.0..0.35),
            rng.gen_range(0.20..0.55),
            rng.gen_range(-0.2..0.5),
        ),
        ExpressionLabel::Surprise => (
            rng.gen_range(-0.2..0.2),
            rng.gen_range(0.8..1.0),
            rng.gen_range(0.8..1.0),
            rng.gen_range(0.1..0.9),
        ),
        ExpressionLabel::Fear => (
            rng.gen_range(-0.3..0.1),
            rng.gen_range(0.8..1.0),
            rng.gen_range(0.15..0.40),
            rng.gen_range(-0.2..0.4),
        ),
        ExpressionLabel::Disgust => (
            rng.gen_range(-0.2..0.2),
            rng.gen_range(0.0..0.35),
            rng.gen_range(0.20..0.55),
            rng.gen_range(-1.0..-0.6),
        ),
        ExpressionLabel::Anger => (
            rng.gen_range(-1.0..-0.6),
            rng.gen_range(0.0..0.35),
            rng.gen_range(0.30..0.80),
            rng.gen_range(-1.0..-0.6),
        ),
    };
    FaceParams {
        center: (rng.gen_range(0.44..0.56), rng.gen_range(0.46..0.54)),
        axes: (rng.gen_range(0.26..0.34), rng.gen_range(0.32..0.42)),
        skin: (
            rng.gen_range(0.55..0.92),
            rng.gen_range(0.45..0.80),
            rng.gen_range(0.38..0.70),
        ),
        eye_openness: eo,
        brow_angle: ba,
        mouth_curve: mc,
        mouth_open: mo,
        jitter_seed,
    }
}

/// Class-balanced parameter draws; splits use disjoint per-sample seed lanes
/// (`jitter_seed = i*4 + split`), so no FaceParams can repeat across splits.
pub fn sample_params(n: usize, seed: u64, split: Split) -> Result<Vec<FaceParams>> {
    if n < 1 {
        return Err(IferError::Validation("dataset size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let class = ExpressionLabel::ALL[i % NUM_CLASSES];
        let lane = i as u64 * 4 + split.index();
        let mut rng = ChaCha8Rng::seed_from_u64(
            seed ^ lane.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        out.push(sample_class_params(class, &mut rng, lane));
    }
    Ok(out)
}

pub struct Sample {
    pub image: Arr,
    pub label: ExpressionLabel,
    pub params: FaceParams,
}

pub fn sample_dataset(n: usize, seed: u64, split: Split) -> Result<Vec<Sample>> {
    sample_params(n, seed, split)?
        .into_iter()
        .map(|p| {
            let image = render_face(&p)?;
            let label = expression_label(&p);
            Ok(Sample {
                image,
                label,
                params: p,
            })
        })
        .collect()
}
