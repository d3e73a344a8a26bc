//! Synthetic moving-shape video clips, label remapping and training-time
//! augmentation.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::infer::resize_bilinear;
use crate::rng;
use crate::tensor::Map3;

/// Label value excluded from every loss and from confusion counts.
pub const IGNORE: u8 = 255;

/// Per-pixel additive noise on generated frames.
pub const NOISE_SIGMA: f64 = 0.08;

/// An RGB frame with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pixels: Map3,
}

impl Frame {
    pub fn new(pixels: Map3) -> Result<Self> {
        if pixels.channels() != 3 {
            return Err(Error::Validation(format!(
                "frame must have 3 channels, got {}",
                pixels.channels()
            )));
        }
        if pixels.height() == 0 || pixels.width() == 0 {
            return Err(Error::Validation("frame has zero extent".into()));
        }
        if let Some(v) = pixels
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Validation(format!(
                "frame value {v} outside [0, 1]"
            )));
        }
        Ok(Self { pixels })
    }

    pub fn pixels(&self) -> &Map3 {
        &self.pixels
    }

    pub fn into_pixels(self) -> Map3 {
        self.pixels
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn hflip(&self) -> Frame {
        Frame {
            pixels: self.pixels.hflip(),
        }
    }
}

/// Integer class map; `IGNORE` marks pixels without a target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: u8,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, num_classes: u8, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::Validation(format!(
                "label buffer has {} entries for a {height}x{width} map",
                labels.len()
            )));
        }
        if num_classes == 0 || num_classes == IGNORE {
            return Err(Error::Validation(format!(
                "num_classes {num_classes} out of range"
            )));
        }
        if let Some(v) = labels.iter().find(|&&v| v >= num_classes && v != IGNORE) {
            return Err(Error::Validation(format!(
                "label {v} outside 0..{num_classes} and not {IGNORE}"
            )));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, num_classes: u8, value: u8) -> Self {
        Self {
            height,
            width,
            num_classes,
            labels: vec![value; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> u8 {
        self.num_classes
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn hflip(&self) -> LabelMap {
        let mut out = self.clone();
        for row in out.labels.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub clip_id: String,
    pub frames: Vec<Frame>,
    /// Present iff the clip is labeled.
    pub labels: Option<Vec<LabelMap>>,
}

impl Clip {
    pub fn is_labeled(&self) -> bool {
        self.labels.is_some()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipDataset {
    pub labeled: Vec<Clip>,
    pub unlabeled: Vec<Clip>,
    pub num_classes: u8,
    pub seed: u64,
}

impl ClipDataset {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Validation("dataset needs at least 2 classes".into()));
        }
        for clip in &self.labeled {
            let labels = clip.labels.as_ref().ok_or_else(|| {
                Error::Validation(format!("labeled clip {} has no labels", clip.clip_id))
            })?;
            if labels.len() != clip.frames.len() {
                return Err(Error::Validation(format!(
                    "clip {} has {} frames but {} label maps",
                    clip.clip_id,
                    clip.frames.len(),
                    labels.len()
                )));
            }
            for (f, l) in clip.frames.iter().zip(labels) {
                if f.height() != l.height() || f.width() != l.width() {
                    return Err(Error::Validation(format!(
                        "clip {}: frame/label size mismatch",
                        clip.clip_id
                    )));
                }
            }
        }
        if let Some(c) = self.unlabeled.iter().find(|c| c.labels.is_some()) {
            return Err(Error::Validation(format!(
                "unlabeled clip {} carries labels",
                c.clip_id
            )));
        }
        Ok(())
    }
}

/// Geometry of one synthetic clip family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipSpec {
    pub num_classes: u8,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipSpec {
    fn validate(&self) -> Result<()> {
        if !(2..=16).contains(&self.num_classes) {
            return Err(Error::Parameter(format!(
                "num_classes {} not in [2, 16]",
                self.num_classes
            )));
        }
        if self.height < 16 || self.width < 16 {
            return Err(Error::Parameter(format!(
                "frame size {}x{} below 16x16",
                self.height, self.width
            )));
        }
        if self.frames_per_clip == 0 {
            return Err(Error::Parameter("frames_per_clip must be positive".into()));
        }
        Ok(())
    }
}

pub fn generate_dataset(
    num_classes: u8,
    num_clips: usize,
    frames_per_clip: usize,
    height: usize,
    width: usize,
    labeled_fraction: f64,
    seed: u64,
) -> Result<ClipDataset> {
    let spec = ClipSpec {
        num_classes,
        frames_per_clip,
        height,
        width,
    };
    spec.validate()?;
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::Parameter(format!(
            "labeled_fraction {labeled_fraction} not in (0, 1]"
        )));
    }
    if num_clips == 0 {
        return Err(Error::Parameter("num_clips must be positive".into()));
    }
    let num_labeled = ((labeled_fraction * num_clips as f64).ceil() as usize).min(num_clips);
    let palette = class_palette(num_classes, seed);
    let mut labeled = Vec::with_capacity(num_labeled);
    let mut unlabeled = Vec::with_capacity(num_clips - num_labeled);
    for index in 0..num_clips {
        let clip = render_clip(&spec, &palette, seed, index as u64, index < num_labeled);
        if clip.is_labeled() {
            labeled.push(clip);
        } else {
            unlabeled.push(clip);
        }
    }
    Ok(ClipDataset {
        labeled,
        unlabeled,
        num_classes,
        seed,
    })
}

/// Labeled clips drawn from the same appearance model as
/// `generate_dataset(.., seed)` but from a disjoint clip index range.
pub fn generate_heldout(spec: ClipSpec, num_clips: usize, seed: u64) -> Result<Vec<Clip>> {
    spec.validate()?;
    let palette = class_palette(spec.num_classes, seed);
    Ok((0..num_clips)
        .map(|i| {
            let mut clip = render_clip(&spec, &palette, seed, HELDOUT_OFFSET + i as u64, true);
            clip.clip_id = format!("heldout_{i:04}");
            clip
        })
        .collect())
}

const HELDOUT_OFFSET: u64 = 1 << 32;

const BASE_COLORS: [[f64; 3]; 16] = [
    [0.50, 0.50, 0.50],
    [0.68, 0.38, 0.38],
    [0.38, 0.64, 0.42],
    [0.42, 0.42, 0.70],
    [0.68, 0.64, 0.36],
    [0.62, 0.40, 0.64],
    [0.36, 0.64, 0.66],
    [0.74, 0.52, 0.32],
    [0.30, 0.46, 0.36],
    [0.56, 0.30, 0.48],
    [0.62, 0.62, 0.62],
    [0.34, 0.34, 0.34],
    [0.46, 0.58, 0.30],
    [0.30, 0.50, 0.62],
    [0.70, 0.46, 0.56],
    [0.54, 0.44, 0.30],
];

struct ClassLook {
    color: [f64; 3],
    /// Texture wave vector (cycles per pixel) and amplitude.
    freq: (f64, f64),
    amplitude: f64,
}

fn class_palette(num_classes: u8, seed: u64) -> Vec<ClassLook> {
    let mut r = rng::stream(seed, "palette", 0);
    (0..num_classes as usize)
        .map(|c| {
            let mut color = BASE_COLORS[c];
            for v in color.iter_mut() {
                *v += r.gen_range(-0.04..0.04);
            }
            let angle: f64 = r.gen_range(0.0..std::f64::consts::PI);
            let period: f64 = r.gen_range(3.0..9.0);
            ClassLook {
                color,
                freq: (angle.cos() / period, angle.sin() / period),
                amplitude: if c == 0 { 0.03 } else { 0.07 },
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy)]
enum ShapeKind {
    Circle { radius: f64 },
    Rect { half_h: f64, half_w: f64 },
    Triangle { size: f64 },
    Band { half_h: f64 },
}

struct MovingShape {
    class: u8,
    kind: ShapeKind,
    origin: (f64, f64),
    velocity: (f64, f64),
}

/// Position on `[lo, hi]` after constant-velocity motion with reflection.
fn reflect(start: f64, velocity: f64, t: f64, lo: f64, hi: f64) -> f64 {
    let span = hi - lo;
    if span <= 0.0 {
        return lo;
    }
    let u = (start - lo + velocity * t).rem_euclid(2.0 * span);
    lo + if u > span { 2.0 * span - u } else { u }
}

impl MovingShape {
    fn extent(&self) -> (f64, f64) {
        match self.kind {
            ShapeKind::Circle { radius } => (radius, radius),
            ShapeKind::Rect { half_h, half_w } => (half_h, half_w),
            ShapeKind::Triangle { size } => (size * 0.5, size * 0.5),
            ShapeKind::Band { half_h } => (half_h, 0.0),
        }
    }

    fn center(&self, t: usize, height: usize, width: usize) -> (f64, f64) {
        let (ey, ex) = self.extent();
        let cy = reflect(
            self.origin.0,
            self.velocity.0,
            t as f64,
            ey,
            height as f64 - ey,
        );
        let cx = reflect(self.origin.1, self.velocity.1, t as f64, ex, width as f64 - ex);
        (cy, cx)
    }

    fn contains(&self, center: (f64, f64), y: f64, x: f64) -> bool {
        let dy = y - center.0;
        let dx = x - center.1;
        match self.kind {
            ShapeKind::Circle { radius } => dy * dy + dx * dx <= radius * radius,
            ShapeKind::Rect { half_h, half_w } => dy.abs() <= half_h && dx.abs() <= half_w,
            ShapeKind::Triangle { size } => {
                // apex up, base at dy = size/2
                let half = size * 0.5;
                if dy < -half || dy > half {
                    return false;
                }
                let frac = (dy + half) / size;
                dx.abs() <= frac * half
            }
            ShapeKind::Band { half_h } => dy.abs() <= half_h,
        }
    }
}

fn render_clip(spec: &ClipSpec, palette: &[ClassLook], seed: u64, index: u64, labeled: bool) -> Clip {
    let mut r = rng::stream(seed, "clip", index);
    let (h, w) = (spec.height, spec.width);
    let scale = (h.min(w) as f64) / 64.0;

    let gain: f64 = r.gen_range(0.75..1.25);
    let mut tint = [0.0; 3];
    for t in tint.iter_mut() {
        *t = r.gen_range(-0.08..0.08);
    }
    let grad_dir: f64 = r.gen_range(0.0..std::f64::consts::TAU);
    let phase: f64 = r.gen_range(0.0..std::f64::consts::TAU);

    let shapes: Vec<MovingShape> = (1..spec.num_classes)
        .map(|class| {
            let kind = match (class - 1) % 4 {
                0 => ShapeKind::Circle {
                    radius: r.gen_range(6.0..12.0) * scale,
                },
                1 => ShapeKind::Rect {
                    half_h: r.gen_range(5.0..12.0) * scale,
                    half_w: r.gen_range(5.0..12.0) * scale,
                },
                2 => ShapeKind::Triangle {
                    size: r.gen_range(14.0..26.0) * scale,
                },
                _ => ShapeKind::Band {
                    half_h: r.gen_range(3.0..5.0) * scale,
                },
            };
            let origin = (r.gen_range(0.0..h as f64), r.gen_range(0.0..w as f64));
            let velocity = (r.gen_range(-1.5..1.5), r.gen_range(-1.5..1.5));
            MovingShape {
                class,
                kind,
                origin,
                velocity,
            }
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames_per_clip);
    let mut labels = Vec::with_capacity(spec.frames_per_clip);
    let mut lab = vec![0u8; h * w];
    for t in 0..spec.frames_per_clip {
        lab.iter_mut().for_each(|v| *v = 0);
        for shape in &shapes {
            let c = shape.center(t, h, w);
            for y in 0..h {
                for x in 0..w {
                    if shape.contains(c, y as f64 + 0.5, x as f64 + 0.5) {
                        lab[y * w + x] = shape.class;
                    }
                }
            }
        }
        let mut px = Map3::zeros(3, h, w);
        for y in 0..h {
            for x in 0..w {
                let class = lab[y * w + x] as usize;
                let look = &palette[class];
                let (fy, fx) = look.freq;
                let wave = (std::f64::consts::TAU * (fy * y as f64 + fx * x as f64) + phase).sin();
                let ramp = if class == 0 {
                    0.08 * ((grad_dir.cos() * x as f64 + grad_dir.sin() * y as f64)
                        / (h.max(w) as f64)
                        - 0.5)
                } else {
                    0.0
                };
                for ch in 0..3 {
                    let noise: f64 = r.sample(StandardNormal);
                    let v = (look.color[ch] + look.amplitude * wave + ramp) * gain
                        + tint[ch]
                        + NOISE_SIGMA * noise;
                    // stored frames are single precision on disk
                    px.set(ch, y, x, v.clamp(0.0, 1.0) as f32 as f64);
                }
            }
        }
        frames.push(Frame { pixels: px });
        labels.push(LabelMap {
            height: h,
            width: w,
            num_classes: spec.num_classes,
            labels: lab.clone(),
        });
    }

    Clip {
        clip_id: format!("clip_{index:04}"),
        frames,
        labels: labeled.then_some(labels),
    }
}

/// Rewrites class ids through `table`; `IGNORE` always maps to itself.
pub fn remap_labels(
    map: &LabelMap,
    table: &BTreeMap<u8, u8>,
    num_classes: u8,
) -> Result<LabelMap> {
    let labels = map
        .labels
        .iter()
        .map(|&v| {
            if v == IGNORE {
                Ok(IGNORE)
            } else {
                table.get(&v).copied().ok_or(Error::Mapping(v))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    LabelMap::new(map.height, map.width, num_classes, labels)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub crop_height: usize,
    pub crop_width: usize,
    pub ratio_range: (f64, f64),
    pub flip_prob: f64,
    pub jitter: bool,
    pub jitter_scale: (f64, f64),
    pub jitter_shift: (f64, f64),
    /// Overrides the sampled resize ratio.
    pub force_ratio: Option<f64>,
    /// Overrides the sampled flip decision.
    pub force_flip: Option<bool>,
}

impl AugmentConfig {
    pub fn with_crop(crop_height: usize, crop_width: usize) -> Self {
        Self {
            crop_height,
            crop_width,
            ratio_range: (0.5, 2.0),
            flip_prob: 0.5,
            jitter: true,
            jitter_scale: (0.9, 1.1),
            jitter_shift: (-0.05, 0.05),
            force_ratio: None,
            force_flip: None,
        }
    }

    /// A configuration whose output equals its input for a frame of the
    /// given size.
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            jitter: false,
            force_ratio: Some(1.0),
            force_flip: Some(false),
            ..Self::with_crop(height, width)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub frame: Frame,
    pub label: Option<LabelMap>,
    /// False on padded pixels.
    pub valid: Vec<bool>,
}

fn resize_nearest(map: &LabelMap, out_h: usize, out_w: usize) -> LabelMap {
    let sy = map.height as f64 / out_h as f64;
    let sx = map.width as f64 / out_w as f64;
    let mut labels = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let src_y = (((y as f64 + 0.5) * sy) as usize).min(map.height - 1);
        for x in 0..out_w {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(map.width - 1);
            labels.push(map.labels[src_y * map.width + src_x]);
        }
    }
    LabelMap {
        height: out_h,
        width: out_w,
        num_classes: map.num_classes,
        labels,
    }
}

/// Random resize, crop (with padding), horizontal flip and color jitter.
/// Geometry is shared between frame and label; jitter touches the frame only.
pub fn augment<R: Rng + ?Sized>(
    frame: &Frame,
    label: Option<&LabelMap>,
    cfg: &AugmentConfig,
    rng: &mut R,
) -> Result<Augmented> {
    let (h, w) = (frame.height(), frame.width());
    if let Some(l) = label {
        if l.height != h || l.width != w {
            return Err(Error::Validation("frame/label size mismatch".into()));
        }
    }
    if cfg.crop_height == 0 || cfg.crop_width == 0 {
        return Err(Error::Parameter("crop size must be positive".into()));
    }

    let ratio = match cfg.force_ratio {
        Some(r) => r,
        None => rng.gen_range(cfg.ratio_range.0..=cfg.ratio_range.1),
    };
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::Parameter(format!("resize ratio {ratio} invalid")));
    }
    let rh = ((h as f64 * ratio).round() as usize).max(1);
    let rw = ((w as f64 * ratio).round() as usize).max(1);
    let resized = resize_bilinear(frame.pixels(), rh, rw);
    let resized_label = label.map(|l| resize_nearest(l, rh, rw));

    let (ch, cw) = (cfg.crop_height, cfg.crop_width);
    let off_y = if rh > ch { rng.gen_range(0..=rh - ch) } else { 0 };
    let off_x = if rw > cw { rng.gen_range(0..=rw - cw) } else { 0 };

    let mut pixels = Map3::zeros(3, ch, cw);
    let mut labels = resized_label
        .as_ref()
        .map(|l| LabelMap::filled(ch, cw, l.num_classes, IGNORE));
    let mut valid = vec![false; ch * cw];
    for y in 0..ch.min(rh - off_y) {
        for x in 0..cw.min(rw - off_x) {
            let (sy, sx) = (y + off_y, x + off_x);
            for c in 0..3 {
                pixels.set(c, y, x, resized.get(c, sy, sx));
            }
            if let (Some(out), Some(src)) = (labels.as_mut(), resized_label.as_ref()) {
                out.labels[y * cw + x] = src.labels[sy * rw + sx];
            }
            valid[y * cw + x] = true;
        }
    }

    let flip = match cfg.force_flip {
        Some(f) => f,
        None => rng.gen_bool(cfg.flip_prob.clamp(0.0, 1.0)),
    };
    if flip {
        pixels = pixels.hflip();
        labels = labels.map(|l| l.hflip());
        for row in valid.chunks_mut(cw) {
            row.reverse();
        }
    }

    if cfg.jitter {
        for c in 0..3 {
            let scale = rng.gen_range(cfg.jitter_scale.0..=cfg.jitter_scale.1);
            let shift = rng.gen_range(cfg.jitter_shift.0..=cfg.jitter_shift.1);
            for (v, ok) in pixels.channel_mut(c).iter_mut().zip(&valid) {
                if *ok {
                    *v = (scale * *v + shift).clamp(0.0, 1.0);
                }
            }
        }
    }

    Ok(Augmented {
        frame: Frame { pixels },
        label: labels,
        valid,
    })
}
