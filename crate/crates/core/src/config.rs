//! Run configuration: line-oriented `key = value` text with `#` comments.
//! Unknown or repeated keys are errors.

use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::infer::DEFAULT_SCALES;
use crate::tinynet::AdamWConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorSource {
    Labeled,
    LabeledAndReliable,
}

impl AnchorSource {
    fn as_str(self) -> &'static str {
        match self {
            AnchorSource::Labeled => "labeled",
            AnchorSource::LabeledAndReliable => "labeled+reliable",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub num_classes: u8,
    pub num_clips: usize,
    pub frames_per_clip: usize,
    pub height: usize,
    pub width: usize,
    pub labeled_fraction: f64,
    pub eval_clips: usize,
    pub eval_frames: usize,
    /// Load the training set from here instead of generating it.
    pub data_dir: Option<PathBuf>,

    pub teacher_width: usize,
    pub student_width: usize,
    pub embed_dim: usize,

    pub optim: AdamWConfig,

    pub teacher_iters: u64,
    pub student_iters: u64,
    pub finetune_iters: u64,
    /// Frames per stream per iteration (labeled, and unlabeled in fine-tuning).
    pub batch_size: usize,

    pub crop: usize,
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub flip_prob: f64,
    pub jitter: bool,

    pub lambda_u: f64,
    pub lambda_c: f64,

    pub temperature: f64,
    pub anchors_per_class: usize,
    pub negatives_per_anchor: usize,
    pub min_prob: f64,
    pub top_k_exclusion: usize,
    pub per_class_cap: usize,
    pub anchor_source: AnchorSource,

    /// Drop fraction at the start and end of fine-tuning (linear in between).
    pub drop_start: f64,
    pub drop_end: f64,

    pub tta_scales: Vec<f64>,
    pub tta_flip: bool,

    pub vc_windows: Vec<usize>,

    pub seed: u64,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            num_clips: 40,
            frames_per_clip: 10,
            height: 64,
            width: 64,
            labeled_fraction: 0.1,
            eval_clips: 8,
            eval_frames: 16,
            data_dir: None,
            teacher_width: 32,
            student_width: 16,
            embed_dim: 8,
            optim: AdamWConfig::default(),
            teacher_iters: 2000,
            student_iters: 2000,
            finetune_iters: 2000,
            batch_size: 2,
            crop: 32,
            ratio_min: 0.5,
            ratio_max: 2.0,
            flip_prob: 0.5,
            jitter: true,
            lambda_u: 1.0,
            lambda_c: 0.1,
            temperature: 0.5,
            anchors_per_class: 16,
            negatives_per_anchor: 32,
            min_prob: 0.3,
            top_k_exclusion: 3,
            per_class_cap: 64,
            anchor_source: AnchorSource::Labeled,
            drop_start: 0.2,
            drop_end: 0.1,
            tta_scales: DEFAULT_SCALES.to_vec(),
            tta_flip: true,
            vc_windows: vec![8, 16],
            seed: 0,
            out: PathBuf::from("runs/default"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>()
        .map_err(|e| Error::Config(format!("{key} = {v}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key} = {v}: expected true or false"))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| parse_num(key, s))
        .collect()
}

/// Accepts plain numbers and `a/b` ratios.
fn parse_scale(key: &str, v: &str) -> Result<f64> {
    match v.split_once('/') {
        Some((a, b)) => Ok(parse_num::<f64>(key, a.trim())? / parse_num::<f64>(key, b.trim())?),
        None => parse_num(key, v),
    }
}

fn join<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = std::collections::BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key `{key}`", lineno + 1)));
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data.num_classes" => self.num_classes = parse_num(key, v)?,
            "data.num_clips" => self.num_clips = parse_num(key, v)?,
            "data.frames_per_clip" => self.frames_per_clip = parse_num(key, v)?,
            "data.height" => self.height = parse_num(key, v)?,
            "data.width" => self.width = parse_num(key, v)?,
            "data.labeled_fraction" => self.labeled_fraction = parse_num(key, v)?,
            "data.eval_clips" => self.eval_clips = parse_num(key, v)?,
            "data.eval_frames" => self.eval_frames = parse_num(key, v)?,
            "data.dir" => self.data_dir = (!v.is_empty()).then(|| PathBuf::from(v)),
            "model.teacher_width" => self.teacher_width = parse_num(key, v)?,
            "model.student_width" => self.student_width = parse_num(key, v)?,
            "model.embed_dim" => self.embed_dim = parse_num(key, v)?,
            "optim.lr" => self.optim.lr = parse_num(key, v)?,
            "optim.beta1" => self.optim.beta1 = parse_num(key, v)?,
            "optim.beta2" => self.optim.beta2 = parse_num(key, v)?,
            "optim.eps" => self.optim.eps = parse_num(key, v)?,
            "optim.weight_decay" => self.optim.weight_decay = parse_num(key, v)?,
            "optim.warmup_steps" => self.optim.warmup_steps = parse_num(key, v)?,
            "train.teacher_iters" => self.teacher_iters = parse_num(key, v)?,
            "train.student_iters" => self.student_iters = parse_num(key, v)?,
            "train.finetune_iters" => self.finetune_iters = parse_num(key, v)?,
            "train.batch_size" => self.batch_size = parse_num(key, v)?,
            "augment.crop" => self.crop = parse_num(key, v)?,
            "augment.ratio_min" => self.ratio_min = parse_num(key, v)?,
            "augment.ratio_max" => self.ratio_max = parse_num(key, v)?,
            "augment.flip_prob" => self.flip_prob = parse_num(key, v)?,
            "augment.jitter" => self.jitter = parse_bool(key, v)?,
            "loss.lambda_u" => self.lambda_u = parse_num(key, v)?,
            "loss.lambda_c" => self.lambda_c = parse_num(key, v)?,
            "contrastive.temperature" => self.temperature = parse_num(key, v)?,
            "contrastive.anchors_per_class" => self.anchors_per_class = parse_num(key, v)?,
            "contrastive.negatives_per_anchor" => self.negatives_per_anchor = parse_num(key, v)?,
            "contrastive.min_prob" => self.min_prob = parse_num(key, v)?,
            "contrastive.top_k_exclusion" => self.top_k_exclusion = parse_num(key, v)?,
            "contrastive.per_class_cap" => self.per_class_cap = parse_num(key, v)?,
            "contrastive.anchor_source" => {
                self.anchor_source = match v {
                    "labeled" => AnchorSource::Labeled,
                    "labeled+reliable" => AnchorSource::LabeledAndReliable,
                    _ => {
                        return Err(Error::Config(format!(
                            "{key} = {v}: expected labeled or labeled+reliable"
                        )))
                    }
                }
            }
            "pseudo.drop_start" => self.drop_start = parse_num(key, v)?,
            "pseudo.drop_end" => self.drop_end = parse_num(key, v)?,
            "tta.scales" => {
                self.tta_scales = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_scale(key, s))
                    .collect::<Result<_>>()?
            }
            "tta.flip" => self.tta_flip = parse_bool(key, v)?,
            "eval.vc" => self.vc_windows = parse_list(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if !(2..=16).contains(&self.num_classes) {
            return fail(format!("data.num_classes {} not in [2, 16]", self.num_classes));
        }
        if self.height < 16 || self.width < 16 {
            return fail("data.height and data.width must be at least 16".into());
        }
        if self.num_clips == 0 || self.frames_per_clip == 0 {
            return fail("data.num_clips and data.frames_per_clip must be positive".into());
        }
        if !(self.labeled_fraction > 0.0 && self.labeled_fraction <= 1.0) {
            return fail(format!("data.labeled_fraction {} not in (0, 1]", self.labeled_fraction));
        }
        if self.teacher_width == 0 || self.student_width == 0 || self.embed_dim == 0 {
            return fail("model widths and embed_dim must be positive".into());
        }
        let o = &self.optim;
        if !(o.lr > 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0 && o.weight_decay >= 0.0) {
            return fail("optimizer hyperparameters out of range".into());
        }
        if self.batch_size == 0 || self.crop == 0 {
            return fail("train.batch_size and augment.crop must be positive".into());
        }
        if !(self.ratio_min > 0.0 && self.ratio_min <= self.ratio_max) {
            return fail("augment ratio range invalid".into());
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return fail("augment.flip_prob not in [0, 1]".into());
        }
        if !(self.lambda_u >= 0.0 && self.lambda_c >= 0.0) {
            return fail("loss weights must be nonnegative".into());
        }
        if !(self.temperature > 0.0) {
            return fail("contrastive.temperature must be positive".into());
        }
        if self.anchors_per_class == 0 {
            return fail("contrastive.anchors_per_class must be positive".into());
        }
        if !(0.0..1.0).contains(&self.min_prob) {
            return fail("contrastive.min_prob not in [0, 1)".into());
        }
        if self.top_k_exclusion >= self.num_classes as usize {
            return fail("contrastive.top_k_exclusion must be below the class count".into());
        }
        for d in [self.drop_start, self.drop_end] {
            if !(d > 0.0 && d < 1.0) {
                return fail(format!("drop fraction {d} not in (0, 1)"));
            }
        }
        if self.tta_scales.is_empty() || self.tta_scales.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return fail("tta.scales must be a nonempty list of positive values".into());
        }
        if self.vc_windows.iter().any(|n| *n == 0) {
            return fail("eval.vc windows must be positive".into());
        }
        Ok(())
    }

    /// Canonical `key = value` text; parses back to an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("data.num_classes", self.num_classes.to_string());
        kv("data.num_clips", self.num_clips.to_string());
        kv("data.frames_per_clip", self.frames_per_clip.to_string());
        kv("data.height", self.height.to_string());
        kv("data.width", self.width.to_string());
        kv("data.labeled_fraction", self.labeled_fraction.to_string());
        kv("data.eval_clips", self.eval_clips.to_string());
        kv("data.eval_frames", self.eval_frames.to_string());
        kv(
            "data.dir",
            self.data_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("model.teacher_width", self.teacher_width.to_string());
        kv("model.student_width", self.student_width.to_string());
        kv("model.embed_dim", self.embed_dim.to_string());
        kv("optim.lr", self.optim.lr.to_string());
        kv("optim.beta1", self.optim.beta1.to_string());
        kv("optim.beta2", self.optim.beta2.to_string());
        kv("optim.eps", self.optim.eps.to_string());
        kv("optim.weight_decay", self.optim.weight_decay.to_string());
        kv("optim.warmup_steps", self.optim.warmup_steps.to_string());
        kv("train.teacher_iters", self.teacher_iters.to_string());
        kv("train.student_iters", self.student_iters.to_string());
        kv("train.finetune_iters", self.finetune_iters.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("augment.crop", self.crop.to_string());
        kv("augment.ratio_min", self.ratio_min.to_string());
        kv("augment.ratio_max", self.ratio_max.to_string());
        kv("augment.flip_prob", self.flip_prob.to_string());
        kv("augment.jitter", self.jitter.to_string());
        kv("loss.lambda_u", self.lambda_u.to_string());
        kv("loss.lambda_c", self.lambda_c.to_string());
        kv("contrastive.temperature", self.temperature.to_string());
        kv("contrastive.anchors_per_class", self.anchors_per_class.to_string());
        kv("contrastive.negatives_per_anchor", self.negatives_per_anchor.to_string());
        kv("contrastive.min_prob", self.min_prob.to_string());
        kv("contrastive.top_k_exclusion", self.top_k_exclusion.to_string());
        kv("contrastive.per_class_cap", self.per_class_cap.to_string());
        kv("contrastive.anchor_source", self.anchor_source.as_str().to_string());
        kv("pseudo.drop_start", self.drop_start.to_string());
        kv("pseudo.drop_end", self.drop_end.to_string());
        kv("tta.scales", join(&self.tta_scales));
        kv("tta.flip", self.tta_flip.to_string());
        kv("eval.vc", join(&self.vc_windows));
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        s
    }

    /// FNV-1a over the canonical text, excluding filesystem locations.
    pub fn hash(&self) -> u32 {
        let mut h: u32 = 0x811c_9dc5;
        for line in self.to_text().lines() {
            if line.starts_with("out ") || line.starts_with("data.dir ") {
                continue;
            }
            for b in line.bytes().chain(std::iter::once(b'\n')) {
                h ^= u32::from(b);
                h = h.wrapping_mul(0x0100_0193);
            }
        }
        h
    }

    /// Drop fraction for fine-tuning iteration `iter`, linear from
    /// `drop_start` to `drop_end`.
    pub fn drop_fraction_at(&self, iter: u64) -> f64 {
        let span = self.finetune_iters.saturating_sub(1).max(1) as f64;
        let t = (iter as f64 / span).min(1.0);
        self.drop_start + (self.drop_end - self.drop_start) * t
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let back = RunConfig::parse(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn parse_overrides_and_comments() {
        let cfg = RunConfig::parse(
            "# desk run\nseed = 3  # trailing\noptim.lr = 1e-5\ntta.scales = 512/896, 1.0\ncontrastive.anchor_source = labeled+reliable\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optim.lr, 1e-5);
        assert_eq!(cfg.tta_scales, vec![512.0 / 896.0, 1.0]);
        assert_eq!(cfg.anchor_source, AnchorSource::LabeledAndReliable);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn hash_ignores_paths() {
        let mut a = RunConfig::default();
        let h = a.hash();
        a.out = "elsewhere".into();
        a.data_dir = Some("d".into());
        assert_eq!(a.hash(), h);
        a.seed = 9;
        assert_ne!(a.hash(), h);
    }

    #[test]
    fn bad_input_rejected() {
        assert!(matches!(RunConfig::parse("nope = 1"), Err(Error::Config(_))));
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("seed 1").is_err());
        assert!(RunConfig::parse("loss.lambda_c = -1").is_err());
        assert!(RunConfig::parse("contrastive.top_k_exclusion = 5").is_err());
        assert!(RunConfig::parse("tta.flip = maybe").is_err());
    }

    #[test]
    fn drop_schedule_is_linear() {
        let cfg = RunConfig {
            finetune_iters: 11,
            ..RunConfig::default()
        };
        assert_eq!(cfg.drop_fraction_at(0), 0.2);
        assert!((cfg.drop_fraction_at(5) - 0.15).abs() < 1e-15);
        assert!((cfg.drop_fraction_at(10) - 0.1).abs() < 1e-15);
    }
}
