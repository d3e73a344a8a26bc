//! Entropy-filtered pseudo labels, the reliable/unreliable split, and
//! sampling of contrastive anchors and negatives.

use rand::Rng;

use crate::error::{Error, Result};
use crate::infer::ProbMap;
use crate::synthdata::{LabelMap, IGNORE};
use crate::tensor::Map3;
use crate::tinynet::EMBED_EPS;

/// Per-pixel prediction entropy in nats.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropyMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl EntropyMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::Validation(format!(
                "{} entropy values for a {height}x{width} map",
                values.len()
            )));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn hflip(&self) -> EntropyMap {
        let mut out = self.clone();
        for row in out.values.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelMap {
    pub labels: LabelMap,
    /// The threshold γ the map was cut at.
    pub threshold: f64,
}

impl PseudoLabelMap {
    pub fn is_reliable(&self, pixel: usize) -> bool {
        self.labels.labels()[pixel] != IGNORE
    }
}

/// `H(p) = -Σ p log p` per pixel, with `0 log 0 = 0`.
pub fn entropy_map(probs: &ProbMap) -> Result<EntropyMap> {
    let map = probs.map();
    let (c, h, w) = map.dims();
    let mut values = vec![0.0; h * w];
    let mut sums = vec![0.0; h * w];
    for k in 0..c {
        for ((e, s), &p) in values.iter_mut().zip(sums.iter_mut()).zip(map.channel(k)) {
            *s += p;
            if p > 0.0 {
                *e -= p * p.ln();
            }
        }
    }
    if let Some((i, s)) = sums.iter().enumerate().find(|(_, s)| (*s - 1.0).abs() > 1e-6) {
        return Err(Error::Validation(format!(
            "pixel {i} probabilities sum to {s}"
        )));
    }
    // rounding can push a one-hot entropy to -0.0 or a uniform one past ln C
    let cap = (c as f64).ln();
    values.iter_mut().for_each(|v| *v = v.clamp(0.0, cap));
    EntropyMap::new(h, w, values)
}

/// The `(1 - drop_fraction)` empirical quantile of `values`, linearly
/// interpolated between order statistics.
pub fn quantile_threshold(values: &[f64], drop_fraction: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Parameter("threshold over zero pixels".into()));
    }
    if !(drop_fraction > 0.0 && drop_fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "drop_fraction {drop_fraction} not in (0, 1)"
        )));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let pos = (1.0 - drop_fraction) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = pos - lo as f64;
    Ok(if frac == 0.0 {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    })
}

/// γ over every pixel of a batch of entropy maps, gathered in map order.
pub fn threshold_gamma(maps: &[&EntropyMap], drop_fraction: f64) -> Result<f64> {
    let all: Vec<f64> = maps.iter().flat_map(|m| m.values.iter().copied()).collect();
    quantile_threshold(&all, drop_fraction)
}

/// Argmax label where entropy < γ, `IGNORE` elsewhere.
pub fn make_pseudo_labels(probs: &ProbMap, entropies: &EntropyMap, gamma: f64) -> Result<PseudoLabelMap> {
    if probs.height() != entropies.height || probs.width() != entropies.width {
        return Err(Error::Validation("probability/entropy size mismatch".into()));
    }
    let argmax = probs.argmax();
    let labels = argmax
        .labels()
        .iter()
        .zip(&entropies.values)
        .map(|(&l, &e)| if e < gamma { l } else { IGNORE })
        .collect();
    Ok(PseudoLabelMap {
        labels: LabelMap::new(
            entropies.height,
            entropies.width,
            probs.num_classes() as u8,
            labels,
        )?,
        threshold: gamma,
    })
}

/// A pixel in a batch: frame slot and flat row-major index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PixelRef {
    pub frame: usize,
    pub pixel: usize,
}

/// Uniform sample of `m` of `0..n` without replacement (partial Fisher–Yates).
pub fn sample_indices<R: Rng + ?Sized>(n: usize, m: usize, rng: &mut R) -> Vec<usize> {
    let m = m.min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(m);
    idx
}

/// Rank of `class` in descending probability order, lower index first on ties.
fn class_rank(probs: &[f64], class: usize) -> usize {
    let pc = probs[class];
    probs
        .iter()
        .enumerate()
        .filter(|&(k, &pk)| pk > pc || (pk == pc && k < class))
        .count()
}

/// One frame's worth of input to negative selection.
pub struct NegativeSource<'a> {
    pub probs: &'a ProbMap,
    pub pseudo: &'a PseudoLabelMap,
    /// Pixels marked false (padding) are never candidates.
    pub valid: Option<&'a [bool]>,
}

/// For each class, unreliable pixels that may serve as its negatives.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct NegativeCandidateSet {
    pub per_class: Vec<Vec<PixelRef>>,
}

impl NegativeCandidateSet {
    pub fn is_empty(&self) -> bool {
        self.per_class.iter().all(|v| v.is_empty())
    }
}

/// Collects, per class `c`, up to `per_class_cap` unreliable pixels whose
/// `top_k_exclusion` most probable classes do not include `c`.
pub fn select_negatives<R: Rng + ?Sized>(
    sources: &[NegativeSource<'_>],
    num_classes: usize,
    top_k_exclusion: usize,
    per_class_cap: usize,
    rng: &mut R,
) -> Result<NegativeCandidateSet> {
    if top_k_exclusion >= num_classes {
        return Err(Error::Parameter(format!(
            "top_k_exclusion {top_k_exclusion} must be below {num_classes} classes"
        )));
    }
    let mut pools: Vec<Vec<PixelRef>> = vec![Vec::new(); num_classes];
    let mut buf = vec![0.0; num_classes];
    for (f, src) in sources.iter().enumerate() {
        if src.probs.num_classes() != num_classes {
            return Err(Error::Validation("class count mismatch in negatives".into()));
        }
        let n = src.probs.height() * src.probs.width();
        for p in 0..n {
            if src.pseudo.is_reliable(p) || src.valid.is_some_and(|v| !v[p]) {
                continue;
            }
            src.probs.map().pixel_into(p, &mut buf);
            for (c, pool) in pools.iter_mut().enumerate() {
                if class_rank(&buf, c) >= top_k_exclusion {
                    pool.push(PixelRef { frame: f, pixel: p });
                }
            }
        }
    }
    let per_class = pools
        .into_iter()
        .map(|pool| {
            sample_indices(pool.len(), per_class_cap, rng)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        })
        .collect();
    Ok(NegativeCandidateSet { per_class })
}

/// One frame's worth of input to anchor sampling.
pub struct AnchorSource<'a> {
    pub embeddings: &'a Map3,
    pub labels: &'a LabelMap,
    pub probs: &'a ProbMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassAnchors {
    pub class: u8,
    /// Exactly `per_class` entries; pixels repeat when fewer qualify.
    pub anchors: Vec<PixelRef>,
    /// Unit-norm mean of the anchor embeddings.
    pub prototype: Vec<f64>,
}

/// Samples `per_class` anchors for every class with a qualifying pixel
/// (label `c`, `p(c) > min_prob`, nonzero embedding) and forms its prototype.
pub fn sample_anchors<R: Rng + ?Sized>(
    sources: &[AnchorSource<'_>],
    num_classes: usize,
    per_class: usize,
    min_prob: f64,
    rng: &mut R,
) -> Result<Vec<ClassAnchors>> {
    if per_class == 0 {
        return Err(Error::Parameter("anchors per class must be at least 1".into()));
    }
    let mut pools: Vec<Vec<PixelRef>> = vec![Vec::new(); num_classes];
    for (f, src) in sources.iter().enumerate() {
        let d = src.embeddings.channels();
        let emb = src.embeddings;
        for (p, &label) in src.labels.labels().iter().enumerate() {
            if label == IGNORE || label as usize >= num_classes {
                continue;
            }
            let c = label as usize;
            if src.probs.map().channel(c)[p] <= min_prob {
                continue;
            }
            if (0..d).all(|k| emb.channel(k)[p] == 0.0) {
                continue;
            }
            pools[c].push(PixelRef { frame: f, pixel: p });
        }
    }
    let mut out = Vec::new();
    for (c, pool) in pools.iter().enumerate() {
        if pool.is_empty() {
            continue;
        }
        let picked: Vec<PixelRef> = if pool.len() >= per_class {
            sample_indices(pool.len(), per_class, rng)
                .into_iter()
                .map(|i| pool[i])
                .collect()
        } else {
            let order = sample_indices(pool.len(), pool.len(), rng);
            (0..per_class).map(|k| pool[order[k % order.len()]]).collect()
        };
        let d = sources[0].embeddings.channels();
        let mut mean = vec![0.0; d];
        for r in &picked {
            let emb = sources[r.frame].embeddings;
            for (k, m) in mean.iter_mut().enumerate() {
                *m += emb.channel(k)[r.pixel];
            }
        }
        mean.iter_mut().for_each(|m| *m /= per_class as f64);
        let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm <= EMBED_EPS {
            continue;
        }
        mean.iter_mut().for_each(|m| *m /= norm);
        out.push(ClassAnchors {
            class: c as u8,
            anchors: picked,
            prototype: mean,
        });
    }
    Ok(out)
}

/// Anchors and per-anchor negatives for one class, as pixel references.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassRefs {
    pub class: u8,
    pub anchors: Vec<PixelRef>,
    /// `anchors.len()` lists, each of the same length.
    pub negatives: Vec<Vec<PixelRef>>,
}

/// Draws `per_anchor` negatives (with replacement) for every anchor from its
/// class's candidate pool. Classes without candidates get empty lists.
pub fn assign_negatives<R: Rng + ?Sized>(
    anchors: &[ClassAnchors],
    candidates: &NegativeCandidateSet,
    per_anchor: usize,
    rng: &mut R,
) -> Vec<ClassRefs> {
    anchors
        .iter()
        .map(|a| {
            let pool = candidates
                .per_class
                .get(a.class as usize)
                .map(Vec::as_slice)
                .unwrap_or(&[]);
            let negatives = a
                .anchors
                .iter()
                .map(|_| {
                    if pool.is_empty() {
                        Vec::new()
                    } else {
                        (0..per_anchor)
                            .map(|_| pool[rng.gen_range(0..pool.len())])
                            .collect()
                    }
                })
                .collect();
            ClassRefs {
                class: a.class,
                anchors: a.anchors.clone(),
                negatives,
            }
        })
        .collect()
}
