//! Supervised and pseudo-label cross-entropy, the pixel contrastive loss,
//! their weighted sum, and routing of contrastive gradients back onto
//! per-frame embedding maps.

use crate::error::{Error, Result};
use crate::pseudolab::{ClassRefs, PseudoLabelMap};
use crate::synthdata::{LabelMap, IGNORE};
use crate::tensor::Map3;
use crate::tinynet::EMBED_EPS;

#[derive(Debug, Clone)]
pub struct CeOutput {
    pub loss: f64,
    /// One gradient map per input image, shaped like its logits.
    pub grads: Vec<Map3>,
    /// Pixels that contributed a target.
    pub pixels: usize,
}

fn cross_entropy(logits: &[&Map3], targets: &[&LabelMap]) -> Result<CeOutput> {
    if logits.len() != targets.len() {
        return Err(Error::Validation(format!(
            "{} logit maps for {} label maps",
            logits.len(),
            targets.len()
        )));
    }
    let batch = logits.len();
    let mut loss = 0.0;
    let mut pixels = 0;
    let mut grads = Vec::with_capacity(batch);
    for (lg, tg) in logits.iter().zip(targets) {
        let (c, h, w) = lg.dims();
        if (tg.height(), tg.width()) != (h, w) {
            return Err(Error::Validation("logit/label size mismatch".into()));
        }
        let mut grad = Map3::zeros(c, h, w);
        let contributing = tg.labels().iter().filter(|&&l| l != IGNORE).count();
        if contributing == 0 {
            grads.push(grad);
            continue;
        }
        let scale = 1.0 / (contributing as f64 * batch as f64);
        let mut buf = vec![0.0; c];
        let mut image_loss = 0.0;
        for (p, &l) in tg.labels().iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            let y = l as usize;
            if y >= c {
                return Err(Error::Validation(format!("label {y} with {c} logits")));
            }
            lg.pixel_into(p, &mut buf);
            let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = buf.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            image_loss += lse - buf[y];
            for (k, v) in buf.iter().enumerate() {
                let prob = (v - m).exp() / z;
                let target = if k == y { 1.0 } else { 0.0 };
                grad.channel_mut(k)[p] = (prob - target) * scale;
            }
        }
        loss += image_loss / contributing as f64;
        pixels += contributing;
        grads.push(grad);
    }
    if batch > 0 {
        loss /= batch as f64;
    }
    Ok(CeOutput {
        loss,
        grads,
        pixels,
    })
}

/// Mean over images of the per-image mean cross-entropy on non-ignored pixels.
pub fn supervised_ce(logits: &[&Map3], labels: &[&LabelMap]) -> Result<CeOutput> {
    cross_entropy(logits, labels)
}

/// Cross-entropy against entropy-filtered pseudo labels; ignored pixels
/// contribute neither loss nor gradient.
pub fn unsupervised_ce(logits: &[&Map3], pseudo: &[&PseudoLabelMap]) -> Result<CeOutput> {
    let targets: Vec<&LabelMap> = pseudo.iter().map(|p| &p.labels).collect();
    cross_entropy(logits, &targets)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassTerm {
    /// `M × d`
    pub anchors: Vec<Vec<f64>>,
    pub prototype: Vec<f64>,
    /// `M × N × d`
    pub negatives: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub classes: Vec<ClassTerm>,
    pub temperature: f64,
}

/// Gradients shaped like the corresponding `ContrastiveBatch` fields.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrads {
    pub anchors: Vec<Vec<Vec<f64>>>,
    pub prototypes: Vec<Vec<f64>>,
    pub negatives: Vec<Vec<Vec<Vec<f64>>>>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(out: &mut [f64], k: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += k * v;
    }
}

/// InfoNCE over anchors: each anchor is pulled toward its class prototype
/// and pushed from its negatives, with similarities scaled by `1/τ`.
///
/// ```text
/// L_c = -1/(C'·M) Σ_c Σ_i log( e^{<z,z+>/τ} / (e^{<z,z+>/τ} + Σ_j e^{<z,z-_j>/τ}) )
/// ```
pub fn contrastive_loss(batch: &ContrastiveBatch) -> Result<(f64, ContrastiveGrads)> {
    let tau = batch.temperature;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Parameter(format!("temperature {tau} must be positive")));
    }
    let total_anchors: usize = batch.classes.iter().map(|c| c.anchors.len()).sum();
    let mut grads = ContrastiveGrads {
        anchors: Vec::with_capacity(batch.classes.len()),
        prototypes: Vec::with_capacity(batch.classes.len()),
        negatives: Vec::with_capacity(batch.classes.len()),
    };
    if total_anchors == 0 {
        for term in &batch.classes {
            grads.anchors.push(Vec::new());
            grads.prototypes.push(vec![0.0; term.prototype.len()]);
            grads.negatives.push(Vec::new());
        }
        return Ok((0.0, grads));
    }
    let norm = 1.0 / total_anchors as f64;
    let mut loss = 0.0;
    for term in &batch.classes {
        if term.negatives.len() != term.anchors.len() {
            return Err(Error::Validation("one negative list per anchor required".into()));
        }
        let d = term.prototype.len();
        let mut g_proto = vec![0.0; d];
        let mut g_anchors = Vec::with_capacity(term.anchors.len());
        let mut g_negs = Vec::with_capacity(term.anchors.len());
        for (a, negs) in term.anchors.iter().zip(&term.negatives) {
            let s_pos = dot(a, &term.prototype) / tau;
            let s_neg: Vec<f64> = negs.iter().map(|n| dot(a, n) / tau).collect();
            let m = s_neg.iter().copied().fold(s_pos, f64::max);
            let z = (s_pos - m).exp() + s_neg.iter().map(|s| (s - m).exp()).sum::<f64>();
            loss += m + z.ln() - s_pos;

            // d loss / d s_pos = q_pos - 1, d loss / d s_j = q_j
            let q_pos = (s_pos - m).exp() / z;
            let mut ga = vec![0.0; d];
            axpy(&mut ga, (q_pos - 1.0) * norm / tau, &term.prototype);
            axpy(&mut g_proto, (q_pos - 1.0) * norm / tau, a);
            let mut gn = Vec::with_capacity(negs.len());
            for (n, s) in negs.iter().zip(&s_neg) {
                let q = (s - m).exp() / z;
                axpy(&mut ga, q * norm / tau, n);
                gn.push(a.iter().map(|v| q * norm / tau * v).collect());
            }
            g_anchors.push(ga);
            g_negs.push(gn);
        }
        grads.anchors.push(g_anchors);
        grads.prototypes.push(g_proto);
        grads.negatives.push(g_negs);
    }
    Ok((loss * norm, grads))
}

/// The weighted objective and its bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub supervised: f64,
    pub unsupervised: f64,
    pub contrastive: f64,
    pub lambda_u: f64,
    pub lambda_c: f64,
    /// Threshold used for the online reliable/unreliable split (NaN if none).
    pub gamma: f64,
    pub n_labeled: usize,
    pub n_reliable: usize,
    pub n_unreliable: usize,
}

/// `L = L_s + λ_u L_u + λ_c L_c`.
pub fn total_loss(
    supervised: f64,
    unsupervised: f64,
    contrastive: f64,
    lambda_u: f64,
    lambda_c: f64,
) -> Result<LossReport> {
    if !(lambda_u >= 0.0 && lambda_c >= 0.0) {
        return Err(Error::Parameter(format!(
            "loss weights must be nonnegative (λ_u={lambda_u}, λ_c={lambda_c})"
        )));
    }
    Ok(LossReport {
        total: supervised + lambda_u * unsupervised + lambda_c * contrastive,
        supervised,
        unsupervised,
        contrastive,
        lambda_u,
        lambda_c,
        gamma: f64::NAN,
        n_labeled: 0,
        n_reliable: 0,
        n_unreliable: 0,
    })
}

impl LossReport {
    /// `iter L Ls Lu Lc gamma_t n_reliable n_unreliable`
    pub fn log_line(&self, iter: u64) -> String {
        format!(
            "{iter} {} {} {} {} {} {} {}",
            self.total,
            self.supervised,
            self.unsupervised,
            self.contrastive,
            self.gamma,
            self.n_reliable,
            self.n_unreliable
        )
    }

    /// Inverse of [`LossReport::log_line`]. Loss weights and the labeled
    /// pixel count are not part of the line and come back as defaults.
    pub fn parse_log_line(line: &str) -> Result<(u64, LossReport)> {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::Format(format!("expected 8 fields in `{line}`")));
        }
        let f = |i: usize| -> Result<f64> {
            fields[i]
                .parse::<f64>()
                .map_err(|e| Error::Format(format!("field {i} of `{line}`: {e}")))
        };
        let u = |i: usize| -> Result<usize> {
            fields[i]
                .parse::<usize>()
                .map_err(|e| Error::Format(format!("field {i} of `{line}`: {e}")))
        };
        let iter = fields[0]
            .parse::<u64>()
            .map_err(|e| Error::Format(format!("iteration in `{line}`: {e}")))?;
        Ok((
            iter,
            LossReport {
                total: f(1)?,
                supervised: f(2)?,
                unsupervised: f(3)?,
                contrastive: f(4)?,
                lambda_u: 0.0,
                lambda_c: 0.0,
                gamma: f(5)?,
                n_labeled: 0,
                n_reliable: u(6)?,
                n_unreliable: u(7)?,
            },
        ))
    }
}

fn embedding_at(embeddings: &[&Map3], frame: usize, pixel: usize) -> Result<Vec<f64>> {
    let map = embeddings
        .get(frame)
        .ok_or_else(|| Error::Internal(format!("reference to missing frame {frame}")))?;
    if pixel >= map.plane_len() {
        return Err(Error::Internal(format!(
            "reference to pixel {pixel} outside frame {frame}"
        )));
    }
    Ok(map.pixel(pixel))
}

/// Unnormalized mean of the anchor embeddings of one class.
fn anchor_mean(refs: &ClassRefs, embeddings: &[&Map3]) -> Result<Vec<f64>> {
    let d = embeddings.first().map_or(0, |m| m.channels());
    let mut mean = vec![0.0; d];
    for r in &refs.anchors {
        axpy(&mut mean, 1.0, &embedding_at(embeddings, r.frame, r.pixel)?);
    }
    let inv = 1.0 / refs.anchors.len().max(1) as f64;
    mean.iter_mut().for_each(|v| *v *= inv);
    Ok(mean)
}

/// Gathers embedding vectors for the referenced pixels. Prototypes are the
/// normalized anchor means; classes whose mean vanishes are dropped.
pub fn build_contrastive_batch(
    refs: &[ClassRefs],
    embeddings: &[&Map3],
    temperature: f64,
) -> Result<(ContrastiveBatch, Vec<ClassRefs>)> {
    let mut classes = Vec::with_capacity(refs.len());
    let mut kept = Vec::with_capacity(refs.len());
    for r in refs {
        let mean = anchor_mean(r, embeddings)?;
        let n = dot(&mean, &mean).sqrt();
        if n <= EMBED_EPS {
            continue;
        }
        let prototype = mean.iter().map(|v| v / n).collect();
        let anchors = r
            .anchors
            .iter()
            .map(|a| embedding_at(embeddings, a.frame, a.pixel))
            .collect::<Result<Vec<_>>>()?;
        let negatives = r
            .negatives
            .iter()
            .map(|list| {
                list.iter()
                    .map(|n| embedding_at(embeddings, n.frame, n.pixel))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        classes.push(ClassTerm {
            anchors,
            prototype,
            negatives,
        });
        kept.push(r.clone());
    }
    Ok((
        ContrastiveBatch {
            classes,
            temperature,
        },
        kept,
    ))
}

/// Routes contrastive gradients onto per-frame `d × H × W` maps. The
/// prototype gradient flows back through the normalized mean to every
/// anchor of its class.
pub fn scatter_embedding_grads(
    refs: &[ClassRefs],
    grads: &ContrastiveGrads,
    embeddings: &[&Map3],
) -> Result<Vec<Map3>> {
    if grads.anchors.len() != refs.len() {
        return Err(Error::Internal(format!(
            "{} gradient classes for {} reference classes",
            grads.anchors.len(),
            refs.len()
        )));
    }
    let mut out: Vec<Map3> = embeddings
        .iter()
        .map(|m| Map3::zeros(m.channels(), m.height(), m.width()))
        .collect();
    let mut add = |frame: usize, pixel: usize, g: &[f64]| -> Result<()> {
        let map = out
            .get_mut(frame)
            .ok_or_else(|| Error::Internal(format!("reference to missing frame {frame}")))?;
        if pixel >= map.plane_len() {
            return Err(Error::Internal(format!(
                "reference to pixel {pixel} outside frame {frame}"
            )));
        }
        let n = map.plane_len();
        for (k, v) in g.iter().enumerate() {
            map.data_mut()[k * n + pixel] += v;
        }
        Ok(())
    };
    for (ci, r) in refs.iter().enumerate() {
        let mean = anchor_mean(r, embeddings)?;
        let n = dot(&mean, &mean).sqrt();
        let proto: Vec<f64> = mean.iter().map(|v| v / n).collect();
        let gp = &grads.prototypes[ci];
        // d(m/|m|)/dm applied to gp, then d m / d anchor = 1/M
        let pg = dot(&proto, gp);
        let inv_m = 1.0 / r.anchors.len() as f64;
        let through: Vec<f64> = gp
            .iter()
            .zip(&proto)
            .map(|(g, p)| (g - p * pg) / n * inv_m)
            .collect();
        for (ai, a) in r.anchors.iter().enumerate() {
            add(a.frame, a.pixel, &grads.anchors[ci][ai])?;
            add(a.frame, a.pixel, &through)?;
            for (ni, neg) in r.negatives[ai].iter().enumerate() {
                add(neg.frame, neg.pixel, &grads.negatives[ci][ai][ni])?;
            }
        }
    }
    Ok(out)
}
