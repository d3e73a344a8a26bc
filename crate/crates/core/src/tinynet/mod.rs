//! A two-layer convolutional segmenter with a classifier head and a pixel
//! embedding head, hand-written backward pass, and an AdamW optimizer.

mod adamw;
pub mod conv;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::synthdata::Frame;
use crate::tensor::Map3;

pub use adamw::{adamw_step, AdamWConfig, OptimizerState};

/// Guard on the embedding norm; raw projections with a smaller norm are
/// divided by this instead.
pub const EMBED_EPS: f64 = 1e-12;

pub const PARAM_NAMES: [&str; 8] = [
    "conv1.w", "conv1.b", "conv2.w", "conv2.b", "cls.w", "cls.b", "proj.w", "proj.b",
];

const CONV1_W: usize = 0;
const CONV1_B: usize = 1;
const CONV2_W: usize = 2;
const CONV2_B: usize = 3;
const CLS_W: usize = 4;
const CLS_B: usize = 5;
const PROJ_W: usize = 6;
const PROJ_B: usize = 7;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    fn zeros(name: &str, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.to_string(),
            shape,
            data: vec![0.0; n],
        }
    }
}

/// Every trainable array of the model, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    params: Vec<Param>,
}

fn expected_shapes(width: usize, num_classes: usize, embed_dim: usize) -> [Vec<usize>; 8] {
    [
        vec![width, 3, 3, 3],
        vec![width],
        vec![width, width, 3, 3],
        vec![width],
        vec![num_classes, width, 1, 1],
        vec![num_classes],
        vec![embed_dim, width, 1, 1],
        vec![embed_dim],
    ]
}

impl ParamSet {
    pub fn zeros(width: usize, num_classes: usize, embed_dim: usize) -> Self {
        let params = PARAM_NAMES
            .iter()
            .zip(expected_shapes(width, num_classes, embed_dim))
            .map(|(name, shape)| Param::zeros(name, shape))
            .collect();
        Self { params }
    }

    /// Assembles a set from named arrays, checking names, order and shapes.
    pub fn from_params(params: Vec<Param>) -> Result<Self> {
        if params.len() != PARAM_NAMES.len() {
            return Err(Error::Model(format!(
                "expected {} parameter arrays, got {}",
                PARAM_NAMES.len(),
                params.len()
            )));
        }
        for (p, name) in params.iter().zip(PARAM_NAMES) {
            if p.name != name {
                return Err(Error::Model(format!(
                    "expected parameter `{name}`, found `{}`",
                    p.name
                )));
            }
            if p.shape.iter().product::<usize>() != p.data.len() {
                return Err(Error::Model(format!("`{name}` payload does not match its shape")));
            }
        }
        let width = params[CONV1_B].shape[0];
        let num_classes = params[CLS_B].shape[0];
        let embed_dim = params[PROJ_B].shape[0];
        for (p, shape) in params
            .iter()
            .zip(expected_shapes(width, num_classes, embed_dim))
        {
            if p.shape != shape {
                return Err(Error::Model(format!(
                    "`{}` has shape {:?}, expected {:?}",
                    p.name, p.shape, shape
                )));
            }
        }
        Ok(Self { params })
    }

    pub fn width(&self) -> usize {
        self.params[CONV1_B].data.len()
    }

    pub fn num_classes(&self) -> usize {
        self.params[CLS_B].data.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.params[PROJ_B].data.len()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.width(), self.num_classes(), self.embed_dim())
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.params
            .iter()
            .zip(&other.params)
            .all(|(a, b)| a.shape == b.shape)
    }

    /// `self += other`, element-wise.
    pub fn accumulate(&mut self, other: &ParamSet) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    /// Flat view over every scalar, in parameter order.
    pub fn flat(&self) -> Vec<f64> {
        self.params.iter().flat_map(|p| p.data.iter().copied()).collect()
    }

    /// Mutable access to the scalar at flat index `k`.
    pub fn flat_mut(&mut self, mut k: usize) -> &mut f64 {
        for p in &mut self.params {
            if k < p.data.len() {
                return &mut p.data[k];
            }
            k -= p.data.len();
        }
        panic!("flat index out of range");
    }

    /// Rounds every entry to single precision, as stored in checkpoints.
    pub fn quantize_f32(&mut self) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
    }
}

/// He-scaled uniform weights (bound `sqrt(6 / fan_in)`), zero biases.
pub fn init_params(width: usize, num_classes: usize, embed_dim: usize, seed: u64) -> ParamSet {
    assert!(width >= 1, "width must be at least 1");
    let mut set = ParamSet::zeros(width, num_classes, embed_dim);
    let mut r = rng::stream(seed, "init", width as u64);
    for idx in [CONV1_W, CONV2_W, CLS_W, PROJ_W] {
        let p = &mut set.params[idx];
        let fan_in: usize = p.shape[1..].iter().product();
        let bound = (6.0 / fan_in as f64).sqrt();
        for v in &mut p.data {
            *v = r.gen_range(-bound..bound);
        }
    }
    set
}

/// Cached activations of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Map3,
    pub hidden1: Map3,
    pub hidden2: Map3,
    pub logits: Map3,
    pub raw_embeddings: Map3,
    pub embeddings: Map3,
    /// Per-pixel norm of the raw projection.
    pub norms: Vec<f64>,
}

pub fn forward(params: &ParamSet, frame: &Frame) -> Result<ForwardTrace> {
    forward_map(params, frame.pixels())
}

/// Forward pass on an arbitrary 3-channel map.
pub fn forward_map(params: &ParamSet, input: &Map3) -> Result<ForwardTrace> {
    if input.channels() != 3 {
        return Err(Error::Model(format!(
            "input has {} channels, expected 3",
            input.channels()
        )));
    }
    if input.height() == 0 || input.width() == 0 {
        return Err(Error::Model("empty input".into()));
    }
    let p = &params.params;
    let mut hidden1 = conv::conv3x3(input, &p[CONV1_W].data, &p[CONV1_B].data);
    conv::relu_in_place(&mut hidden1);
    let mut hidden2 = conv::conv3x3(&hidden1, &p[CONV2_W].data, &p[CONV2_B].data);
    conv::relu_in_place(&mut hidden2);
    let logits = conv::conv1x1(&hidden2, &p[CLS_W].data, &p[CLS_B].data);
    let raw = conv::conv1x1(&hidden2, &p[PROJ_W].data, &p[PROJ_B].data);

    let (d, h, w) = raw.dims();
    let n = h * w;
    let mut norms = vec![0.0; n];
    for c in 0..d {
        for (acc, v) in norms.iter_mut().zip(raw.channel(c)) {
            *acc += v * v;
        }
    }
    norms.iter_mut().for_each(|v| *v = v.sqrt());
    let mut embeddings = raw.clone();
    for c in 0..d {
        for (e, nrm) in embeddings.channel_mut(c).iter_mut().zip(&norms) {
            *e /= nrm.max(EMBED_EPS);
        }
    }
    Ok(ForwardTrace {
        input: input.clone(),
        hidden1,
        hidden2,
        logits,
        raw_embeddings: raw,
        embeddings,
        norms,
    })
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// Per-pixel softmax over the channel axis.
pub fn softmax_map(logits: &Map3) -> Map3 {
    let (c, h, w) = logits.dims();
    let n = h * w;
    let mut out = Map3::zeros(c, h, w);
    let mut buf = vec![0.0; c];
    for p in 0..n {
        logits.pixel_into(p, &mut buf);
        let probs = softmax(&buf);
        out.set_pixel(p, &probs);
    }
    out
}

/// Gradient of the loss with respect to every parameter, given upstream
/// gradients on logits and (optionally) on normalized embeddings.
pub fn backward(
    params: &ParamSet,
    trace: &ForwardTrace,
    dlogits: &Map3,
    dembeddings: Option<&Map3>,
) -> Result<ParamSet> {
    if !dlogits.same_shape(&trace.logits) {
        return Err(Error::Model(format!(
            "logit gradient shape {:?} does not match {:?}",
            dlogits.dims(),
            trace.logits.dims()
        )));
    }
    if let Some(de) = dembeddings {
        if !de.same_shape(&trace.embeddings) {
            return Err(Error::Model(format!(
                "embedding gradient shape {:?} does not match {:?}",
                de.dims(),
                trace.embeddings.dims()
            )));
        }
    }
    let p = &params.params;
    let mut grads = params.zeros_like();
    let (w1, rest) = grads.params.split_at_mut(CONV2_W);
    let (w2, rest) = rest.split_at_mut(CLS_W - CONV2_W);
    let (cls, proj) = rest.split_at_mut(PROJ_W - CLS_W);

    let mut dh2 = Map3::zeros(
        trace.hidden2.channels(),
        trace.hidden2.height(),
        trace.hidden2.width(),
    );
    {
        let (cw, cb) = cls.split_at_mut(1);
        conv::conv1x1_backward(
            &trace.hidden2,
            &p[CLS_W].data,
            dlogits,
            &mut cw[0].data,
            &mut cb[0].data,
            &mut dh2,
        );
    }
    if let Some(de) = dembeddings {
        let draw = normalize_backward(&trace.raw_embeddings, &trace.embeddings, &trace.norms, de);
        let (pw, pb) = proj.split_at_mut(1);
        conv::conv1x1_backward(
            &trace.hidden2,
            &p[PROJ_W].data,
            &draw,
            &mut pw[0].data,
            &mut pb[0].data,
            &mut dh2,
        );
    }
    conv::relu_mask(&mut dh2, &trace.hidden2);
    let mut dh1 = {
        let (c2w, c2b) = w2.split_at_mut(1);
        conv::conv3x3_backward(
            &trace.hidden1,
            &p[CONV2_W].data,
            &dh2,
            &mut c2w[0].data,
            &mut c2b[0].data,
            true,
        )
        .expect("input gradient requested")
    };
    conv::relu_mask(&mut dh1, &trace.hidden1);
    let (c1w, c1b) = w1.split_at_mut(1);
    conv::conv3x3_backward(
        &trace.input,
        &p[CONV1_W].data,
        &dh1,
        &mut c1w[0].data,
        &mut c1b[0].data,
        false,
    );
    Ok(grads)
}

/// Backpropagates through `e = r / max(|r|, eps)` per pixel.
fn normalize_backward(raw: &Map3, emb: &Map3, norms: &[f64], demb: &Map3) -> Map3 {
    let (d, h, w) = raw.dims();
    let n = h * w;
    let mut out = Map3::zeros(d, h, w);
    let mut dot = vec![0.0; n];
    for c in 0..d {
        for ((acc, e), g) in dot.iter_mut().zip(emb.channel(c)).zip(demb.channel(c)) {
            *acc += e * g;
        }
    }
    for c in 0..d {
        let e = emb.channel(c);
        let g = demb.channel(c);
        let o = out.channel_mut(c);
        for p in 0..n {
            o[p] = if norms[p] > EMBED_EPS {
                (g[p] - e[p] * dot[p]) / norms[p]
            } else {
                g[p] / EMBED_EPS
            };
        }
    }
    out
}
