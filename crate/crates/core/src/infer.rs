//! Test-time augmentation (multi-scale plus horizontal flip) and
//! probability-level model ensembling.

use crate::error::{Error, Result};
use crate::synthdata::{Frame, LabelMap};
use crate::tensor::Map3;
use crate::tinynet::{self, ParamSet};

/// The eight inference scales used at full resolution (896 px base).
pub const DEFAULT_SCALES: [f64; 8] = [
    512.0 / 896.0,
    640.0 / 896.0,
    768.0 / 896.0,
    896.0 / 896.0,
    1024.0 / 896.0,
    1152.0 / 896.0,
    1280.0 / 896.0,
    1408.0 / 896.0,
];

/// Per-pixel sums further than this from 1 are renormalized after fusion.
const RENORM_TOL: f64 = 1e-12;

/// Per-pixel class probabilities (`C × H × W`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    probs: Map3,
}

impl ProbMap {
    /// Validates that entries lie in `[0, 1]` and each pixel sums to 1
    /// within `1e-5`.
    pub fn new(probs: Map3) -> Result<Self> {
        let (c, h, w) = probs.dims();
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::Validation("empty probability map".into()));
        }
        if probs
            .data()
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::Validation("probability outside [0, 1]".into()));
        }
        for (p, s) in pixel_sums(&probs).iter().enumerate() {
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::Validation(format!(
                    "pixel {p} probabilities sum to {s}"
                )));
            }
        }
        Ok(Self { probs })
    }

    pub(crate) fn from_softmax(probs: Map3) -> Self {
        Self { probs }
    }

    pub fn map(&self) -> &Map3 {
        &self.probs
    }

    pub fn into_map(self) -> Map3 {
        self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.channels()
    }

    pub fn height(&self) -> usize {
        self.probs.height()
    }

    pub fn width(&self) -> usize {
        self.probs.width()
    }

    pub fn pixel(&self, p: usize) -> Vec<f64> {
        self.probs.pixel(p)
    }

    /// Most probable class per pixel, lowest index on ties.
    pub fn argmax(&self) -> LabelMap {
        let (c, h, w) = self.probs.dims();
        let labels = (0..h * w)
            .map(|p| {
                let mut best = 0;
                let mut best_v = self.probs.channel(0)[p];
                for k in 1..c {
                    let v = self.probs.channel(k)[p];
                    if v > best_v {
                        best = k;
                        best_v = v;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(h, w, c as u8, labels).expect("argmax labels are in range")
    }

    pub fn hflip(&self) -> ProbMap {
        ProbMap {
            probs: self.probs.hflip(),
        }
    }
}

fn pixel_sums(map: &Map3) -> Vec<f64> {
    let mut sums = vec![0.0; map.plane_len()];
    for c in 0..map.channels() {
        for (s, v) in sums.iter_mut().zip(map.channel(c)) {
            *s += v;
        }
    }
    sums
}

fn renormalize(map: &mut Map3) {
    let sums = pixel_sums(map);
    let n = map.plane_len();
    for c in 0..map.channels() {
        let plane = &mut map.data_mut()[c * n..(c + 1) * n];
        for (v, s) in plane.iter_mut().zip(&sums) {
            if (s - 1.0).abs() > RENORM_TOL && *s > 0.0 {
                *v /= s;
            }
        }
    }
}

/// Bilinear resize with half-pixel centers:
/// `src = (i + 0.5) * (in / out) - 0.5`, clamped to the border.
pub fn resize_bilinear(map: &Map3, out_h: usize, out_w: usize) -> Map3 {
    assert!(out_h > 0 && out_w > 0, "resize target must be positive");
    let (c, h, w) = map.dims();
    if (h, w) == (out_h, out_w) {
        return map.clone();
    }
    let taps = |len_in: usize, len_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = len_in as f64 / len_out as f64;
        (0..len_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (len_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(len_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let ys = taps(h, out_h);
    let xs = taps(w, out_w);
    let mut out = Map3::zeros(c, out_h, out_w);
    for ch in 0..c {
        let src = map.channel(ch);
        let dst = out.channel_mut(ch);
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = r0[x0] * (1.0 - fx) + r0[x1] * fx;
                let bottom = r1[x0] * (1.0 - fx) + r1[x1] * fx;
                dst[oy * out_w + ox] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    out
}

/// Anything that maps a frame to per-pixel class probabilities.
pub trait SegModel {
    fn num_classes(&self) -> usize;
    fn predict_map(&self, input: &Map3) -> Result<ProbMap>;

    fn predict(&self, frame: &Frame) -> Result<ProbMap> {
        self.predict_map(frame.pixels())
    }
}

impl SegModel for ParamSet {
    fn num_classes(&self) -> usize {
        ParamSet::num_classes(self)
    }

    fn predict_map(&self, input: &Map3) -> Result<ProbMap> {
        let trace = tinynet::forward_map(self, input)?;
        Ok(ProbMap::from_softmax(tinynet::softmax_map(&trace.logits)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtaConfig {
    pub scales: Vec<f64>,
    pub flip: bool,
    /// Output size; the input frame's size when unset.
    pub base: Option<(usize, usize)>,
}

impl Default for TtaConfig {
    fn default() -> Self {
        Self {
            scales: DEFAULT_SCALES.to_vec(),
            flip: true,
            base: None,
        }
    }
}

impl TtaConfig {
    pub fn single_scale() -> Self {
        Self {
            scales: vec![1.0],
            flip: false,
            base: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return Err(Error::Parameter("TTA needs at least one scale".into()));
        }
        if let Some(s) = self.scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(Error::Parameter(format!("TTA scale {s} must be positive")));
        }
        if matches!(self.base, Some((0, _)) | Some((_, 0))) {
            return Err(Error::Parameter("TTA base size must be positive".into()));
        }
        Ok(())
    }
}

/// Floor of `scale * len`, at least one pixel.
pub fn scaled_len(len: usize, scale: f64) -> usize {
    ((scale * len as f64).floor() as usize).max(1)
}

/// Averages model probabilities over every configured scale and (optionally)
/// its mirrored copy, each resized back to the base size.
pub fn tta_predict<M: SegModel + ?Sized>(model: &M, frame: &Frame, cfg: &TtaConfig) -> Result<ProbMap> {
    cfg.validate()?;
    let (h, w) = (frame.height(), frame.width());
    let (bh, bw) = cfg.base.unwrap_or((h, w));
    let mut acc: Option<Map3> = None;
    let mut runs = 0usize;
    let mut add = |m: Map3| {
        let m = resize_bilinear(&m, bh, bw);
        runs += 1;
        match acc.as_mut() {
            None => acc = Some(m),
            Some(a) => a
                .data_mut()
                .iter_mut()
                .zip(m.data())
                .for_each(|(x, y)| *x += y),
        }
    };
    for &s in &cfg.scales {
        let input = resize_bilinear(frame.pixels(), scaled_len(h, s), scaled_len(w, s));
        add(model.predict_map(&input)?.into_map());
        if cfg.flip {
            let flipped = model.predict_map(&input.hflip())?;
            add(flipped.into_map().hflip());
        }
    }
    let mut fused = acc.expect("at least one scale");
    if runs > 1 {
        let inv = runs as f64;
        fused.data_mut().iter_mut().for_each(|v| *v /= inv);
        renormalize(&mut fused);
    }
    Ok(ProbMap { probs: fused })
}

/// Weighted mean of member maps (uniform by default), renormalized per pixel.
pub fn ensemble(maps: &[&ProbMap], weights: Option<&[f64]>) -> Result<ProbMap> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Validation("ensemble of zero maps".into()))?;
    if let Some(m) = maps.iter().find(|m| !m.probs.same_shape(&first.probs)) {
        return Err(Error::Validation(format!(
            "ensemble shape mismatch: {:?} vs {:?}",
            m.probs.dims(),
            first.probs.dims()
        )));
    }
    let uniform = vec![1.0; maps.len()];
    let weights = weights.unwrap_or(&uniform);
    if weights.len() != maps.len() {
        return Err(Error::Validation(format!(
            "{} weights for {} maps",
            weights.len(),
            maps.len()
        )));
    }
    if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::Validation("ensemble weights must be nonnegative".into()));
    }
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return Err(Error::Validation("ensemble weights are all zero".into()));
    }
    let (c, h, w) = first.probs.dims();
    let mut out = Map3::zeros(c, h, w);
    for (m, wt) in maps.iter().zip(weights) {
        let k = wt / total;
        for (o, v) in out.data_mut().iter_mut().zip(m.probs.data()) {
            *o += k * v;
        }
    }
    renormalize(&mut out);
    Ok(ProbMap { probs: out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tinynet::init_params;
    use rand::Rng;

    fn random_probs(c: usize, h: usize, w: usize, seed: u64) -> ProbMap {
        let mut r = crate::rng::stream(seed, "probs", 0);
        let logits = Map3::from_vec(c, h, w, (0..c * h * w).map(|_| r.gen_range(-3.0..3.0)).collect());
        ProbMap::new(tinynet::softmax_map(&logits)).unwrap()
    }

    #[test]
    fn resize_identity_and_constant() {
        let p = random_probs(3, 5, 7, 1);
        assert_eq!(resize_bilinear(p.map(), 5, 7), *p.map());
        let one = Map3::from_vec(2, 1, 1, vec![0.25, 0.75]);
        let big = resize_bilinear(&one, 4, 6);
        assert!(big.channel(0).iter().all(|v| *v == 0.25));
        assert!(big.channel(1).iter().all(|v| *v == 0.75));
    }

    #[test]
    fn resize_two_by_two_half_pixel() {
        let m = Map3::from_vec(1, 2, 2, vec![0.0, 1.0, 2.0, 3.0]);
        let out = resize_bilinear(&m, 4, 4);
        // source coords for 2 -> 4: -0.25 (clamped to 0), 0.25, 0.75, 1.25 (clamped to 1)
        let coord = [0.0, 0.25, 0.75, 1.0];
        for y in 0..4 {
            for x in 0..4 {
                let v = 2.0 * coord[y] + coord[x];
                assert!((out.get(0, y, x) - v).abs() < 1e-15);
            }
        }
        assert_eq!(out.get(0, 1, 1), 0.75);
    }

    #[test]
    fn hflip_involution() {
        let p = random_probs(3, 4, 5, 2);
        assert_eq!(p.hflip().hflip(), p);
        let m = Map3::from_vec(1, 1, 2, vec![1.0, 2.0]);
        assert_eq!(m.hflip().data(), &[2.0, 1.0]);
        let col = random_probs(2, 3, 1, 3);
        assert_eq!(col.hflip(), col);
    }

    fn frame(seed: u64, h: usize, w: usize) -> Frame {
        let mut r = crate::rng::stream(seed, "frame", 0);
        Frame::new(Map3::from_vec(3, h, w, (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect())).unwrap()
    }

    #[test]
    fn single_scale_no_flip_is_direct() {
        let model = init_params(4, 3, 2, 5);
        let f = frame(1, 9, 8);
        let direct = model.predict(&f).unwrap();
        let tta = tta_predict(&model, &f, &TtaConfig::single_scale()).unwrap();
        assert_eq!(direct, tta);
    }

    #[test]
    fn constant_frame_is_scale_invariant_in_the_interior() {
        // zero padding is the only spatial signal, so pixels away from the
        // border see the same constant field at every scale
        let model = init_params(4, 3, 2, 6);
        let f = Frame::new(Map3::filled(3, 16, 16, 0.4)).unwrap();
        let single = model.predict(&f).unwrap();
        let cfg = TtaConfig {
            scales: vec![1.0, 1.5, 2.0],
            flip: true,
            base: None,
        };
        let tta = tta_predict(&model, &f, &cfg).unwrap();
        for y in 3..13 {
            for x in 3..13 {
                for c in 0..3 {
                    let a = single.map().get(c, y, x);
                    let b = tta.map().get(c, y, x);
                    assert!((a - b).abs() < 1e-12, "{a} vs {b}");
                }
            }
        }
    }

    /// Mirrors every 3x3 kernel left-right onto itself.
    fn symmetrize(model: &mut ParamSet) {
        for name in ["conv1.w", "conv2.w"] {
            let p = model.get_mut(name).unwrap();
            for k in p.data.chunks_mut(9) {
                for row in k.chunks_mut(3) {
                    let avg = 0.5 * (row[0] + row[2]);
                    row[0] = avg;
                    row[2] = avg;
                }
            }
        }
    }

    #[test]
    fn flip_on_symmetric_input_and_model() {
        let mut model = init_params(4, 3, 2, 7);
        symmetrize(&mut model);
        let base = frame(2, 6, 8);
        let mut px = base.pixels().clone();
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..4 {
                    let v = px.get(c, y, x);
                    px.set(c, y, 7 - x, v);
                }
            }
        }
        let f = Frame::new(px).unwrap();
        let plain = model.predict(&f).unwrap();
        let cfg = TtaConfig {
            scales: vec![1.0],
            flip: true,
            base: None,
        };
        let fused = tta_predict(&model, &f, &cfg).unwrap();
        for (a, b) in plain.map().data().iter().zip(fused.map().data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn tta_output_is_valid_probmap() {
        let model = init_params(4, 5, 2, 8);
        let f = frame(3, 20, 17);
        let out = tta_predict(&model, &f, &TtaConfig::default()).unwrap();
        assert_eq!((out.height(), out.width()), (20, 17));
        ProbMap::new(out.into_map()).unwrap();
        assert!(tta_predict(&model, &f, &TtaConfig { scales: vec![], flip: false, base: None }).is_err());
    }

    #[test]
    fn ensemble_identities() {
        let a = random_probs(4, 5, 5, 10);
        let b = random_probs(4, 5, 5, 11);
        assert_eq!(ensemble(&[&a, &a], None).unwrap(), a);
        assert_eq!(ensemble(&[&a, &b], Some(&[1.0, 0.0])).unwrap(), a);
        let avg = ensemble(&[&a, &b], None).unwrap();
        for k in 0..a.map().data().len() {
            let oracle = 0.5 * (a.map().data()[k] + b.map().data()[k]);
            assert!((avg.map().data()[k] - oracle).abs() < 1e-12);
        }
        let swapped = ensemble(&[&b, &a], None).unwrap();
        for (x, y) in avg.map().data().iter().zip(swapped.map().data()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(ensemble(&[&a, &a], None).unwrap().argmax(), a.argmax());
    }

    #[test]
    fn ensemble_errors() {
        let a = random_probs(4, 5, 5, 10);
        let b = random_probs(4, 5, 6, 11);
        assert!(matches!(ensemble(&[&a, &b], None), Err(Error::Validation(_))));
        assert!(ensemble(&[&a, &a], Some(&[0.0, 0.0])).is_err());
        assert!(ensemble(&[&a, &a], Some(&[-1.0, 2.0])).is_err());
        assert!(ensemble(&[], None).is_err());
    }

    #[test]
    fn probmap_validation() {
        assert!(ProbMap::new(Map3::from_vec(2, 1, 1, vec![0.5, 0.6])).is_err());
        assert!(ProbMap::new(Map3::from_vec(2, 1, 1, vec![1.5, -0.5])).is_err());
        assert!(ProbMap::new(Map3::from_vec(2, 1, 1, vec![0.5, 0.5])).is_ok());
    }
}
