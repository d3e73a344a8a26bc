//! The three training stages (supervised teacher and student, offline
//! pseudo labels from their TTA ensemble, semi-supervised fine-tuning of the
//! student), dataset persistence, and held-out evaluation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use rand::Rng;

use crate::config::{AnchorSource as AnchorMode, RunConfig};
use crate::error::{Error, Result};
use crate::formats::{self, Checkpoint};
use crate::infer::{ensemble, tta_predict, ProbMap, TtaConfig};
use crate::losses::{
    build_contrastive_batch, contrastive_loss, scatter_embedding_grads, supervised_ce, total_loss,
    unsupervised_ce, LossReport,
};
use crate::metrics::{self, MetricReport, Predictions};
use crate::pseudolab::{
    assign_negatives, entropy_map, make_pseudo_labels, quantile_threshold, sample_anchors,
    select_negatives, threshold_gamma, AnchorSource, ClassRefs, EntropyMap, NegativeSource,
    PseudoLabelMap,
};
use crate::rng::{self, StreamRng};
use crate::synthdata::{
    augment, generate_dataset, generate_heldout, AugmentConfig, Augmented, Clip, ClipDataset,
    ClipSpec, Frame, LabelMap,
};
use crate::tensor::Map3;
use crate::tinynet::{
    adamw_step, backward, forward, init_params, softmax_map, ForwardTrace, OptimizerState, ParamSet,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }

    pub fn width(self, cfg: &RunConfig) -> usize {
        match self {
            Role::Teacher => cfg.teacher_width,
            Role::Student => cfg.student_width,
        }
    }

    fn iters(self, cfg: &RunConfig) -> u64 {
        match self {
            Role::Teacher => cfg.teacher_iters,
            Role::Student => cfg.student_iters,
        }
    }

    fn index(self) -> u64 {
        match self {
            Role::Teacher => 0,
            Role::Student => 1,
        }
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "teacher" => Ok(Role::Teacher),
            "student" => Ok(Role::Student),
            _ => Err(Error::Config(format!("unknown role `{s}` (teacher|student)"))),
        }
    }
}

/// A checkpoint and the per-iteration loss trace that produced it.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub log: Vec<LossReport>,
}

impl TrainOutcome {
    pub fn log_text(&self, first_iter: u64) -> String {
        let mut s = String::new();
        for (i, r) in self.log.iter().enumerate() {
            let _ = writeln!(s, "{}", r.log_line(first_iter + i as u64));
        }
        s
    }
}

pub fn augment_config(cfg: &RunConfig) -> AugmentConfig {
    AugmentConfig {
        ratio_range: (cfg.ratio_min, cfg.ratio_max),
        flip_prob: cfg.flip_prob,
        jitter: cfg.jitter,
        ..AugmentConfig::with_crop(cfg.crop, cfg.crop)
    }
}

pub fn tta_config(cfg: &RunConfig) -> TtaConfig {
    TtaConfig {
        scales: cfg.tta_scales.clone(),
        flip: cfg.tta_flip,
        base: None,
    }
}

fn clip_spec(cfg: &RunConfig, frames: usize) -> ClipSpec {
    ClipSpec {
        num_classes: cfg.num_classes,
        frames_per_clip: frames,
        height: cfg.height,
        width: cfg.width,
    }
}

/// The training set: read from `data_dir` when set, generated otherwise.
pub fn load_training_data(cfg: &RunConfig) -> Result<ClipDataset> {
    let data = match &cfg.data_dir {
        Some(dir) => load_dataset(dir, cfg.num_classes, cfg.seed)?,
        None => generate_dataset(
            cfg.num_classes,
            cfg.num_clips,
            cfg.frames_per_clip,
            cfg.height,
            cfg.width,
            cfg.labeled_fraction,
            cfg.seed,
        )?,
    };
    data.validate()?;
    Ok(data)
}

/// Evaluation clips: `<data_dir>/heldout` when present, generated otherwise.
pub fn heldout_clips(cfg: &RunConfig) -> Result<Vec<Clip>> {
    if let Some(dir) = &cfg.data_dir {
        let sub = dir.join("heldout");
        if sub.join("manifest.txt").exists() {
            return Ok(load_dataset(&sub, cfg.num_classes, cfg.seed)?.labeled);
        }
    }
    generate_heldout(clip_spec(cfg, cfg.eval_frames), cfg.eval_clips, cfg.seed)
}

fn clip_dir(root: &Path, clip_id: &str) -> PathBuf {
    root.join("clips").join(clip_id)
}

fn write_clips(dir: &Path, clips: &[&Clip], manifest: &mut String) -> Result<()> {
    for clip in clips {
        let cd = clip_dir(dir, &clip.clip_id);
        for (k, frame) in clip.frames.iter().enumerate() {
            formats::write_file(
                &cd.join(format!("frame_{k}.fimg")),
                &formats::encode_fimg(frame.pixels())?,
            )?;
        }
        if let Some(labels) = &clip.labels {
            for (k, l) in labels.iter().enumerate() {
                formats::write_file(&cd.join(format!("frame_{k}.lmap")), &formats::encode_lmap(l)?)?;
            }
        }
        let kind = if clip.is_labeled() { "labeled" } else { "unlabeled" };
        let _ = writeln!(manifest, "{} {kind} {}", clip.clip_id, clip.frames.len());
    }
    Ok(())
}

/// Writes `manifest.txt` and `clips/<id>/frame_<k>.{fimg,lmap}`.
pub fn save_dataset(dir: &Path, data: &ClipDataset) -> Result<()> {
    let mut manifest = String::new();
    let clips: Vec<&Clip> = data.labeled.iter().chain(&data.unlabeled).collect();
    write_clips(dir, &clips, &mut manifest)?;
    formats::write_file(&dir.join("manifest.txt"), manifest.as_bytes())
}

/// Writes held-out clips as an all-labeled dataset directory.
pub fn save_clips(dir: &Path, clips: &[Clip]) -> Result<()> {
    let mut manifest = String::new();
    let refs: Vec<&Clip> = clips.iter().collect();
    write_clips(dir, &refs, &mut manifest)?;
    formats::write_file(&dir.join("manifest.txt"), manifest.as_bytes())
}

pub fn load_dataset(dir: &Path, num_classes: u8, seed: u64) -> Result<ClipDataset> {
    let manifest = fs::read_to_string(dir.join("manifest.txt")).map_err(|e| {
        Error::Pipeline(format!("cannot read {}: {e}", dir.join("manifest.txt").display()))
    })?;
    let mut labeled = Vec::new();
    let mut unlabeled = Vec::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, kind, n] = fields[..] else {
            return Err(Error::Format(format!("manifest line `{line}`")));
        };
        let n: usize = n
            .parse()
            .map_err(|e| Error::Format(format!("manifest line `{line}`: {e}")))?;
        let is_labeled = match kind {
            "labeled" => true,
            "unlabeled" => false,
            _ => return Err(Error::Format(format!("manifest line `{line}`"))),
        };
        let cd = clip_dir(dir, id);
        let read = |name: String| -> Result<Vec<u8>> {
            let p = cd.join(&name);
            fs::read(&p).map_err(|e| Error::Pipeline(format!("missing frame {}: {e}", p.display())))
        };
        let frames = (0..n)
            .map(|k| Frame::new(formats::decode_fimg(&read(format!("frame_{k}.fimg"))?)?))
            .collect::<Result<Vec<_>>>()?;
        let labels = if is_labeled {
            let maps = (0..n)
                .map(|k| formats::decode_lmap(&read(format!("frame_{k}.lmap"))?))
                .collect::<Result<Vec<_>>>()?;
            if let Some(l) = maps.iter().find(|l| l.num_classes() != num_classes) {
                return Err(Error::Config(format!(
                    "clip {id} has {} classes, config says {num_classes}",
                    l.num_classes()
                )));
            }
            Some(maps)
        } else {
            None
        };
        let clip = Clip {
            clip_id: id.to_string(),
            frames,
            labels,
        };
        if is_labeled {
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

fn labeled_pool(data: &ClipDataset) -> Vec<(&Frame, &LabelMap)> {
    data.labeled
        .iter()
        .filter_map(|c| c.labels.as_ref().map(|l| c.frames.iter().zip(l)))
        .flatten()
        .collect()
}

fn sample_labeled(
    pool: &[(&Frame, &LabelMap)],
    batch: usize,
    aug: &AugmentConfig,
    rng: &mut StreamRng,
) -> Result<Vec<Augmented>> {
    (0..batch)
        .map(|_| {
            let (f, l) = pool[rng.gen_range(0..pool.len())];
            augment(f, Some(l), aug, rng)
        })
        .collect()
}

/// One iteration's frames. Labeled entries carry ground truth; unlabeled
/// entries carry their offline pseudo labels (augmented alongside the frame).
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub labeled: Vec<Augmented>,
    pub unlabeled: Vec<Augmented>,
    /// Threshold the offline pseudo labels were cut at.
    pub pseudo_gamma: f64,
}

impl TrainBatch {
    fn frames(&self) -> impl Iterator<Item = &Augmented> {
        self.labeled.iter().chain(&self.unlabeled)
    }
}

/// Forward pass over labeled then unlabeled frames.
pub fn forward_batch(params: &ParamSet, batch: &TrainBatch) -> Result<Vec<ForwardTrace>> {
    batch.frames().map(|a| forward(params, &a.frame)).collect()
}

/// Anchors and negatives for one iteration, as pixel references into the
/// batch (labeled frames first).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePlan {
    pub refs: Vec<ClassRefs>,
    pub gamma: f64,
    pub n_reliable: usize,
    pub n_unreliable: usize,
}

fn label_of(a: &Augmented) -> Result<&LabelMap> {
    a.label
        .as_ref()
        .ok_or_else(|| Error::Internal("training frame without a label map".into()))
}

/// Re-splits the unlabeled frames into reliable and unreliable pixels from
/// current probabilities at `drop_fraction`, then samples anchors and
/// negatives.
pub fn plan_contrastive(
    cfg: &RunConfig,
    batch: &TrainBatch,
    traces: &[ForwardTrace],
    drop_fraction: f64,
    rng: &mut StreamRng,
) -> Result<ContrastivePlan> {
    let nl = batch.labeled.len();
    let c = cfg.num_classes as usize;
    let probs: Vec<ProbMap> = traces
        .iter()
        .map(|t| ProbMap::from_softmax(softmax_map(&t.logits)))
        .collect();
    let entropies = probs[nl..]
        .iter()
        .map(entropy_map)
        .collect::<Result<Vec<EntropyMap>>>()?;
    let valid_entropies: Vec<f64> = entropies
        .iter()
        .zip(&batch.unlabeled)
        .flat_map(|(e, a)| {
            e.values()
                .iter()
                .zip(&a.valid)
                .filter(|(_, v)| **v)
                .map(|(x, _)| *x)
        })
        .collect();
    let gamma = quantile_threshold(&valid_entropies, drop_fraction)?;
    let online = probs[nl..]
        .iter()
        .zip(&entropies)
        .map(|(p, e)| make_pseudo_labels(p, e, gamma))
        .collect::<Result<Vec<PseudoLabelMap>>>()?;
    let (mut n_reliable, mut n_unreliable) = (0, 0);
    for (o, a) in online.iter().zip(&batch.unlabeled) {
        for (p, v) in a.valid.iter().enumerate() {
            if *v {
                if o.is_reliable(p) {
                    n_reliable += 1;
                } else {
                    n_unreliable += 1;
                }
            }
        }
    }
    let sources: Vec<NegativeSource> = online
        .iter()
        .zip(&probs[nl..])
        .zip(&batch.unlabeled)
        .map(|((o, p), a)| NegativeSource {
            probs: p,
            pseudo: o,
            valid: Some(&a.valid),
        })
        .collect();
    let mut negatives = select_negatives(&sources, c, cfg.top_k_exclusion, cfg.per_class_cap, rng)?;
    for pool in &mut negatives.per_class {
        for r in pool.iter_mut() {
            r.frame += nl;
        }
    }
    let anchor_frames = match cfg.anchor_source {
        AnchorMode::Labeled => nl,
        AnchorMode::LabeledAndReliable => traces.len(),
    };
    let anchor_sources = batch
        .frames()
        .zip(traces)
        .zip(&probs)
        .take(anchor_frames)
        .map(|((a, t), p)| {
            Ok(AnchorSource {
                embeddings: &t.embeddings,
                labels: label_of(a)?,
                probs: p,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let anchors = sample_anchors(&anchor_sources, c, cfg.anchors_per_class, cfg.min_prob, rng)?;
    let refs = assign_negatives(&anchors, &negatives, cfg.negatives_per_anchor, rng);
    Ok(ContrastivePlan {
        refs,
        gamma,
        n_reliable,
        n_unreliable,
    })
}

/// `L = L_s + λ_u L_u + λ_c L_c` on a batch and its parameter gradient.
/// Terms with zero weight are not backpropagated.
pub fn objective(
    cfg: &RunConfig,
    params: &ParamSet,
    batch: &TrainBatch,
    traces: &[ForwardTrace],
    plan: Option<&ContrastivePlan>,
) -> Result<(LossReport, ParamSet)> {
    let nl = batch.labeled.len();
    if traces.len() != nl + batch.unlabeled.len() {
        return Err(Error::Internal("trace count does not match batch".into()));
    }
    let logits: Vec<&Map3> = traces.iter().map(|t| &t.logits).collect();
    let labels = batch.labeled.iter().map(label_of).collect::<Result<Vec<_>>>()?;
    let ls = supervised_ce(&logits[..nl], &labels)?;

    let pseudo = batch
        .unlabeled
        .iter()
        .map(|a| {
            Ok(PseudoLabelMap {
                labels: label_of(a)?.clone(),
                threshold: batch.pseudo_gamma,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let pseudo_refs: Vec<&PseudoLabelMap> = pseudo.iter().collect();
    let lu = (!pseudo.is_empty())
        .then(|| unsupervised_ce(&logits[nl..], &pseudo_refs))
        .transpose()?;

    let mut lc = 0.0;
    let mut demb: Option<Vec<Map3>> = None;
    if let Some(plan) = plan.filter(|_| cfg.lambda_c > 0.0) {
        let views: Vec<&Map3> = traces.iter().map(|t| &t.embeddings).collect();
        let (cb, kept) = build_contrastive_batch(&plan.refs, &views, cfg.temperature)?;
        if !cb.classes.is_empty() {
            let (value, g) = contrastive_loss(&cb)?;
            lc = value;
            demb = Some(scatter_embedding_grads(&kept, &g, &views)?);
        }
    }

    let mut report = total_loss(
        ls.loss,
        lu.as_ref().map_or(0.0, |u| u.loss),
        lc,
        cfg.lambda_u,
        cfg.lambda_c,
    )?;
    report.n_labeled = ls.pixels;
    if let Some(plan) = plan {
        report.gamma = plan.gamma;
        report.n_reliable = plan.n_reliable;
        report.n_unreliable = plan.n_unreliable;
    }

    let mut grads = params.zeros_like();
    for (i, trace) in traces.iter().enumerate() {
        let de = demb.as_ref().map(|maps| {
            let mut m = maps[i].clone();
            m.data_mut().iter_mut().for_each(|v| *v *= cfg.lambda_c);
            m
        });
        let dl = if i < nl {
            ls.grads[i].clone()
        } else if cfg.lambda_u > 0.0 {
            let mut g = lu.as_ref().expect("unlabeled loss computed").grads[i - nl].clone();
            g.data_mut().iter_mut().for_each(|v| *v *= cfg.lambda_u);
            g
        } else if de.is_some() {
            Map3::zeros(trace.logits.channels(), trace.logits.height(), trace.logits.width())
        } else {
            continue;
        };
        grads.accumulate(&backward(params, trace, &dl, de.as_ref())?);
    }
    Ok((report, grads))
}

fn check_model(cfg: &RunConfig, params: &ParamSet) -> Result<()> {
    if params.num_classes() != cfg.num_classes as usize || params.embed_dim() != cfg.embed_dim {
        return Err(Error::Config(format!(
            "checkpoint has {} classes and embed_dim {}, config says {} and {}",
            params.num_classes(),
            params.embed_dim(),
            cfg.num_classes,
            cfg.embed_dim
        )));
    }
    Ok(())
}

fn resume(cfg: &RunConfig, ckpt: &Checkpoint) -> Result<(ParamSet, OptimizerState)> {
    if ckpt.config_hash != cfg.hash() {
        return Err(Error::Pipeline(format!(
            "checkpoint config hash {:08x} does not match {:08x}",
            ckpt.config_hash,
            cfg.hash()
        )));
    }
    check_model(cfg, &ckpt.params)?;
    Ok((ckpt.params.clone(), ckpt.optimizer(cfg.optim)))
}

fn supervised_loop(
    cfg: &RunConfig,
    data: &ClipDataset,
    params: &mut ParamSet,
    opt: &mut OptimizerState,
    iters: u64,
    rng: &mut StreamRng,
) -> Result<Vec<LossReport>> {
    let pool = labeled_pool(data);
    if pool.is_empty() {
        return Err(Error::Config("no labeled frames to train on".into()));
    }
    let aug = augment_config(cfg);
    let mut log = Vec::with_capacity(iters as usize);
    for _ in 0..iters {
        let batch = TrainBatch {
            labeled: sample_labeled(&pool, cfg.batch_size, &aug, rng)?,
            unlabeled: Vec::new(),
            pseudo_gamma: f64::NAN,
        };
        let traces = forward_batch(params, &batch)?;
        let (report, grads) = objective(cfg, params, &batch, &traces, None)?;
        adamw_step(params, &grads, opt)?;
        log.push(report);
    }
    Ok(log)
}

/// Trains the teacher or the student from initialization on labeled frames.
pub fn stage_supervised(cfg: &RunConfig, data: &ClipDataset, role: Role) -> Result<TrainOutcome> {
    if labeled_pool(data).is_empty() {
        return Err(Error::Config("no labeled frames to train on".into()));
    }
    let mut params = init_params(
        role.width(cfg),
        cfg.num_classes as usize,
        cfg.embed_dim,
        rng::sub_seed(cfg.seed, "init", role.index()),
    );
    let mut opt = OptimizerState::new(&params, cfg.optim);
    let mut r = rng::stream(cfg.seed, "stage-a", role.index());
    let iters = role.iters(cfg);
    let log = supervised_loop(cfg, data, &mut params, &mut opt, iters, &mut r)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg.hash(), &params, Some(&opt), iters),
        log,
    })
}

const LABELED_STREAM_C: &str = "stage-c-labeled";

/// Continues supervised training from a checkpoint, drawing labeled batches
/// from the same stream fine-tuning uses.
pub fn continue_supervised(
    cfg: &RunConfig,
    data: &ClipDataset,
    ckpt: &Checkpoint,
    iters: u64,
) -> Result<TrainOutcome> {
    let (mut params, mut opt) = resume(cfg, ckpt)?;
    let mut r = rng::stream(cfg.seed, LABELED_STREAM_C, 0);
    let log = supervised_loop(cfg, data, &mut params, &mut opt, iters, &mut r)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(cfg.hash(), &params, Some(&opt), ckpt.iteration + iters),
        log,
    })
}

pub type FrameKey = (String, usize);

/// Offline pseudo labels for every unlabeled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoSet {
    pub gamma: f64,
    pub drop_fraction: f64,
    pub labels: BTreeMap<FrameKey, PseudoLabelMap>,
    pub entropies: BTreeMap<FrameKey, EntropyMap>,
    pub probs: BTreeMap<FrameKey, ProbMap>,
}

/// TTA with teacher and student, uniform ensemble, then one entropy
/// threshold over the whole unlabeled set.
pub fn stage_pseudolabel(
    cfg: &RunConfig,
    data: &ClipDataset,
    teacher: &Checkpoint,
    student: &Checkpoint,
) -> Result<PseudoSet> {
    check_model(cfg, &teacher.params)?;
    check_model(cfg, &student.params)?;
    let tta = tta_config(cfg);
    let mut probs = BTreeMap::new();
    let mut entropies = BTreeMap::new();
    for clip in &data.unlabeled {
        for (k, frame) in clip.frames.iter().enumerate() {
            let pt = tta_predict(&teacher.params, frame, &tta)?;
            let ps = tta_predict(&student.params, frame, &tta)?;
            let fused = ensemble(&[&pt, &ps], None)?;
            entropies.insert((clip.clip_id.clone(), k), entropy_map(&fused)?);
            probs.insert((clip.clip_id.clone(), k), fused);
        }
    }
    let drop_fraction = cfg.drop_start;
    let mut labels = BTreeMap::new();
    let gamma = if entropies.is_empty() {
        f64::NAN
    } else {
        let maps: Vec<&EntropyMap> = entropies.values().collect();
        let gamma = threshold_gamma(&maps, drop_fraction)?;
        for (key, p) in &probs {
            labels.insert(key.clone(), make_pseudo_labels(p, &entropies[key], gamma)?);
        }
        gamma
    };
    Ok(PseudoSet {
        gamma,
        drop_fraction,
        labels,
        entropies,
        probs,
    })
}

/// Writes `<clip>/frame_<k>.{lmap,fmap,pmap}` and `gamma.txt`.
pub fn save_pseudo(dir: &Path, set: &PseudoSet) -> Result<()> {
    for ((clip, k), l) in &set.labels {
        let base = dir.join(clip);
        formats::write_file(&base.join(format!("frame_{k}.lmap")), &formats::encode_lmap(&l.labels)?)?;
        if let Some(e) = set.entropies.get(&(clip.clone(), *k)) {
            formats::write_file(&base.join(format!("frame_{k}.fmap")), &formats::encode_fmap(e)?)?;
        }
        if let Some(p) = set.probs.get(&(clip.clone(), *k)) {
            formats::write_file(&base.join(format!("frame_{k}.pmap")), &formats::encode_pmap(p.map())?)?;
        }
    }
    let text = format!(
        "# scope drop_fraction gamma\nall {} {}\n",
        set.drop_fraction, set.gamma
    );
    formats::write_file(&dir.join("gamma.txt"), text.as_bytes())
}

/// Reads pseudo labels for every unlabeled frame of `data`. Entropy and
/// probability maps are not needed for training and are left empty.
pub fn load_pseudo(dir: &Path, data: &ClipDataset) -> Result<PseudoSet> {
    let text = fs::read_to_string(dir.join("gamma.txt"))
        .map_err(|e| Error::Pipeline(format!("cannot read {}: {e}", dir.join("gamma.txt").display())))?;
    let line = text
        .lines()
        .find(|l| l.starts_with("all "))
        .ok_or_else(|| Error::Format("gamma.txt has no `all` line".into()))?;
    let fields: Vec<&str> = line.split_whitespace().collect();
    let parse = |i: usize| -> Result<f64> {
        fields
            .get(i)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("gamma.txt line `{line}`")))
    };
    let (drop_fraction, gamma) = (parse(1)?, parse(2)?);
    let mut labels = BTreeMap::new();
    for clip in &data.unlabeled {
        for k in 0..clip.frames.len() {
            let path = dir.join(&clip.clip_id).join(format!("frame_{k}.lmap"));
            let map = formats::read_lmap(&path).map_err(|e| {
                Error::Pipeline(format!("missing pseudo labels {}: {e}", path.display()))
            })?;
            labels.insert(
                (clip.clip_id.clone(), k),
                PseudoLabelMap {
                    labels: map,
                    threshold: gamma,
                },
            );
        }
    }
    Ok(PseudoSet {
        gamma,
        drop_fraction,
        labels,
        entropies: BTreeMap::new(),
        probs: BTreeMap::new(),
    })
}

/// Fine-tunes the student on labeled and pseudo-labeled frames with the
/// full objective. The teacher takes no part.
pub fn stage_finetune(
    cfg: &RunConfig,
    data: &ClipDataset,
    student: &Checkpoint,
    pseudo: &PseudoSet,
) -> Result<TrainOutcome> {
    let (mut params, mut opt) = resume(cfg, student)?;
    let pool = labeled_pool(data);
    if pool.is_empty() {
        return Err(Error::Config("no labeled frames to train on".into()));
    }
    let mut unl_pool = Vec::new();
    for clip in &data.unlabeled {
        for (k, frame) in clip.frames.iter().enumerate() {
            let p = pseudo.labels.get(&(clip.clip_id.clone(), k)).ok_or_else(|| {
                Error::Pipeline(format!("no pseudo labels for {} frame {k}", clip.clip_id))
            })?;
            unl_pool.push((frame, p));
        }
    }
    let aug = augment_config(cfg);
    let mut lab_rng = rng::stream(cfg.seed, LABELED_STREAM_C, 0);
    let mut unl_rng = rng::stream(cfg.seed, "stage-c-unlabeled", 0);
    let mut sel_rng = rng::stream(cfg.seed, "stage-c-contrastive", 0);
    let mut log = Vec::with_capacity(cfg.finetune_iters as usize);
    for it in 0..cfg.finetune_iters {
        let labeled = sample_labeled(&pool, cfg.batch_size, &aug, &mut lab_rng)?;
        let unlabeled = if unl_pool.is_empty() {
            Vec::new()
        } else {
            (0..cfg.batch_size)
                .map(|_| {
                    let (f, p) = unl_pool[unl_rng.gen_range(0..unl_pool.len())];
                    augment(f, Some(&p.labels), &aug, &mut unl_rng)
                })
                .collect::<Result<Vec<_>>>()?
        };
        let batch = TrainBatch {
            labeled,
            unlabeled,
            pseudo_gamma: pseudo.gamma,
        };
        let traces = forward_batch(&params, &batch)?;
        let plan = if cfg.lambda_c > 0.0 && !batch.unlabeled.is_empty() {
            Some(plan_contrastive(
                cfg,
                &batch,
                &traces,
                cfg.drop_fraction_at(it),
                &mut sel_rng,
            )?)
        } else {
            None
        };
        let (report, grads) = objective(cfg, &params, &batch, &traces, plan.as_ref())?;
        adamw_step(&mut params, &grads, &mut opt)?;
        log.push(report);
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint::new(
            cfg.hash(),
            &params,
            Some(&opt),
            student.iteration + cfg.finetune_iters,
        ),
        log,
    })
}

/// TTA probabilities for every frame of every clip, keyed like predictions.
pub fn predict_probs(params: &ParamSet, clips: &[Clip], tta: &TtaConfig) -> Result<BTreeMap<FrameKey, ProbMap>> {
    let mut out = BTreeMap::new();
    for clip in clips {
        for (k, frame) in clip.frames.iter().enumerate() {
            out.insert((clip.clip_id.clone(), k), tta_predict(params, frame, tta)?);
        }
    }
    Ok(out)
}

pub fn argmax_predictions(probs: &BTreeMap<FrameKey, ProbMap>) -> Predictions {
    probs.iter().map(|(k, p)| (k.clone(), p.argmax())).collect()
}

/// Accuracy of pseudo labels against ground truth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PseudoQuality {
    /// Accuracy on pixels the entropy filter kept.
    pub retained_accuracy: f64,
    /// Accuracy of the unfiltered argmax over every pixel.
    pub argmax_accuracy: f64,
    pub retained_fraction: f64,
}

pub fn pseudo_quality(set: &PseudoSet, truth: &BTreeMap<FrameKey, &LabelMap>) -> Result<PseudoQuality> {
    let (mut kept, mut kept_ok, mut all, mut all_ok) = (0u64, 0u64, 0u64, 0u64);
    for (key, probs) in &set.probs {
        let gt = truth
            .get(key)
            .ok_or_else(|| Error::Evaluation(format!("no ground truth for {} frame {}", key.0, key.1)))?;
        let arg = probs.argmax();
        let pl = &set.labels[key];
        for (p, &g) in gt.labels().iter().enumerate() {
            all += 1;
            all_ok += u64::from(arg.labels()[p] == g);
            if pl.is_reliable(p) {
                kept += 1;
                kept_ok += u64::from(pl.labels.labels()[p] == g);
            }
        }
    }
    if all == 0 || kept == 0 {
        return Err(Error::UndefinedMetric("no pseudo-labeled pixels".into()));
    }
    Ok(PseudoQuality {
        retained_accuracy: kept_ok as f64 / kept as f64,
        argmax_accuracy: all_ok as f64 / all as f64,
        retained_fraction: kept as f64 / all as f64,
    })
}

/// Everything `run_all` measured.
#[derive(Debug, Clone)]
pub struct RunSummary {
    /// `(model, report)` for student-sup, student-semi, teacher, ensemble.
    pub reports: Vec<(String, MetricReport)>,
    pub pseudo_quality: Option<PseudoQuality>,
    pub gamma: f64,
}

impl RunSummary {
    pub fn report(&self, model: &str) -> Option<&MetricReport> {
        self.reports.iter().find(|(m, _)| m == model).map(|(_, r)| r)
    }

    /// `model,miou,weighted_iou,vc<n>...`
    pub fn comparison_csv(&self, vc_windows: &[usize]) -> String {
        let mut s = String::from("model,miou,weighted_iou");
        for n in vc_windows {
            let _ = write!(s, ",vc{n}");
        }
        s.push('\n');
        for (model, r) in &self.reports {
            let _ = write!(s, "{model},{},{}", r.miou, r.weighted_iou);
            for n in vc_windows {
                let _ = write!(s, ",{}", metrics::fmt_opt(r.vc(*n)));
            }
            s.push('\n');
        }
        s
    }
}

/// Ground truth for the unlabeled clips of a generated training set.
fn unlabeled_truth(cfg: &RunConfig) -> Result<Option<ClipDataset>> {
    if cfg.data_dir.is_some() {
        return Ok(None);
    }
    generate_dataset(
        cfg.num_classes,
        cfg.num_clips,
        cfg.frames_per_clip,
        cfg.height,
        cfg.width,
        1.0,
        cfg.seed,
    )
    .map(Some)
}

/// Stages A, B and C, then held-out evaluation of both students, the
/// teacher and the teacher + fine-tuned student ensemble. Writes every
/// artifact under `cfg.out`.
pub fn run_all(cfg: &RunConfig) -> Result<RunSummary> {
    cfg.validate()?;
    let out = &cfg.out;
    fs::create_dir_all(out)?;
    formats::write_file(&out.join("config.txt"), cfg.to_text().as_bytes())?;
    let data = load_training_data(cfg)?;

    info!("stage A: teacher ({} iterations)", cfg.teacher_iters);
    let teacher = stage_supervised(cfg, &data, Role::Teacher)?;
    teacher.checkpoint.save(&out.join("teacher.ckpt"))?;
    formats::write_file(&out.join("logs/teacher.log"), teacher.log_text(0).as_bytes())?;

    info!("stage A: student ({} iterations)", cfg.student_iters);
    let student = stage_supervised(cfg, &data, Role::Student)?;
    student.checkpoint.save(&out.join("student_sup.ckpt"))?;
    formats::write_file(&out.join("logs/student.log"), student.log_text(0).as_bytes())?;

    info!("stage B: pseudo labels");
    let pseudo = stage_pseudolabel(cfg, &data, &teacher.checkpoint, &student.checkpoint)?;
    save_pseudo(&out.join("pseudo"), &pseudo)?;

    info!("stage C: fine-tuning ({} iterations)", cfg.finetune_iters);
    let semi = stage_finetune(cfg, &data, &student.checkpoint, &pseudo)?;
    semi.checkpoint.save(&out.join("student_semi.ckpt"))?;
    formats::write_file(
        &out.join("logs/finetune.log"),
        semi.log_text(student.checkpoint.iteration).as_bytes(),
    )?;

    info!("evaluating");
    let heldout = heldout_clips(cfg)?;
    let tta = tta_config(cfg);
    let p_sup = predict_probs(&student.checkpoint.params, &heldout, &tta)?;
    let p_semi = predict_probs(&semi.checkpoint.params, &heldout, &tta)?;
    let p_teacher = predict_probs(&teacher.checkpoint.params, &heldout, &tta)?;
    let mut p_ens = BTreeMap::new();
    for (k, t) in &p_teacher {
        p_ens.insert(k.clone(), ensemble(&[t, &p_semi[k]], None)?);
    }
    let mut reports = Vec::new();
    for (name, probs) in [
        ("student_sup", &p_sup),
        ("student_semi", &p_semi),
        ("teacher", &p_teacher),
        ("ensemble", &p_ens),
    ] {
        let report = metrics::evaluate(&heldout, &argmax_predictions(probs), &cfg.vc_windows)?;
        formats::write_file(&out.join(format!("metrics/{name}.csv")), report.to_csv().as_bytes())?;
        reports.push((name.to_string(), report));
    }

    let pseudo_quality = match unlabeled_truth(cfg)? {
        Some(twin) if !pseudo.labels.is_empty() => {
            let mut truth = BTreeMap::new();
            for clip in &twin.labeled {
                if let Some(labels) = &clip.labels {
                    for (k, l) in labels.iter().enumerate() {
                        truth.insert((clip.clip_id.clone(), k), l);
                    }
                }
            }
            let q = pseudo_quality(&pseudo, &truth)?;
            let text = format!(
                "metric,value\nretained_accuracy,{}\nargmax_accuracy,{}\nretained_fraction,{}\n",
                q.retained_accuracy, q.argmax_accuracy, q.retained_fraction
            );
            formats::write_file(&out.join("pseudo_quality.csv"), text.as_bytes())?;
            Some(q)
        }
        _ => None,
    };

    let summary = RunSummary {
        reports,
        pseudo_quality,
        gamma: pseudo.gamma,
    };
    formats::write_file(
        &out.join("comparison.csv"),
        summary.comparison_csv(&cfg.vc_windows).as_bytes(),
    )?;
    Ok(summary)
}
