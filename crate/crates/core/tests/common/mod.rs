#![allow(dead_code)]

use rand::Rng;

use semiseg::config::RunConfig;
use semiseg::pipeline::{forward_batch, objective, plan_contrastive, ContrastivePlan, TrainBatch};
use semiseg::rng;
use semiseg::synthdata::{Augmented, Frame, LabelMap, IGNORE};
use semiseg::tensor::Map3;
use semiseg::tinynet::{init_params, ForwardTrace, ParamSet};

/// One fixed batch, model and contrastive selection for gradient checks.
pub struct GradInstance {
    pub cfg: RunConfig,
    pub params: ParamSet,
    pub batch: TrainBatch,
    pub plan: ContrastivePlan,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Term {
    Supervised,
    Unsupervised,
    Contrastive,
    Composite,
}

pub const TERMS: [Term; 4] = [Term::Supervised, Term::Unsupervised, Term::Contrastive, Term::Composite];

fn random_frame(r: &mut impl Rng, h: usize, w: usize, classes: u8, ignore: f64) -> Augmented {
    let px: Vec<f64> = (0..3 * h * w).map(|_| r.gen_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..h * w)
        .map(|_| if r.gen_bool(ignore) { IGNORE } else { r.gen_range(0..classes) })
        .collect();
    Augmented {
        frame: Frame::new(Map3::from_vec(3, h, w, px)).unwrap(),
        label: Some(LabelMap::new(h, w, classes, labels).unwrap()),
        valid: vec![true; h * w],
    }
}

/// `C = 4`, `d = 5`, width 4, two labeled and two unlabeled `6 × 6` frames.
pub fn grad_instance(seed: u64) -> GradInstance {
    let cfg = RunConfig {
        num_classes: 4,
        embed_dim: 5,
        teacher_width: 4,
        student_width: 4,
        anchors_per_class: 4,
        negatives_per_anchor: 3,
        min_prob: 0.1,
        top_k_exclusion: 1,
        ..RunConfig::default()
    };
    let mut r = rng::stream(seed, "grad-instance", 0);
    let mut params = init_params(4, 4, 5, seed);
    for p in params.params_mut() {
        if p.name.ends_with(".b") {
            p.data.iter_mut().for_each(|v| *v = r.gen_range(-0.1..0.1));
        }
    }
    let batch = TrainBatch {
        labeled: (0..2).map(|_| random_frame(&mut r, 6, 6, 4, 0.1)).collect(),
        unlabeled: (0..2).map(|_| random_frame(&mut r, 6, 6, 4, 0.3)).collect(),
        pseudo_gamma: 0.5,
    };
    let traces = forward_batch(&params, &batch).unwrap();
    let plan = plan_contrastive(&cfg, &batch, &traces, 0.5, &mut r).unwrap();
    GradInstance { cfg, params, batch, plan }
}

fn weighted(cfg: &RunConfig, lambda_u: f64, lambda_c: f64) -> RunConfig {
    RunConfig {
        lambda_u,
        lambda_c,
        ..cfg.clone()
    }
}

impl GradInstance {
    fn eval(&self, params: &ParamSet, lambda_u: f64, lambda_c: f64) -> (semiseg::losses::LossReport, ParamSet) {
        let cfg = weighted(&self.cfg, lambda_u, lambda_c);
        let traces = forward_batch(params, &self.batch).unwrap();
        objective(&cfg, params, &self.batch, &traces, Some(&self.plan)).unwrap()
    }

    /// Scalar value of a term at `params`.
    pub fn value(&self, params: &ParamSet, term: Term) -> f64 {
        let (rep, _) = self.eval(params, self.cfg.lambda_u, self.cfg.lambda_c);
        match term {
            Term::Supervised => rep.supervised,
            Term::Unsupervised => rep.unsupervised,
            Term::Contrastive => rep.contrastive,
            Term::Composite => rep.total,
        }
    }

    /// Analytic gradient of a term, flattened.
    pub fn gradient(&self, term: Term) -> Vec<f64> {
        let base = self.eval(&self.params, 0.0, 0.0).1.flat();
        let diff = |g: ParamSet| -> Vec<f64> { g.flat().iter().zip(&base).map(|(a, b)| a - b).collect() };
        match term {
            Term::Supervised => base,
            Term::Unsupervised => diff(self.eval(&self.params, 1.0, 0.0).1),
            Term::Contrastive => diff(self.eval(&self.params, 0.0, 1.0).1),
            Term::Composite => self.eval(&self.params, self.cfg.lambda_u, self.cfg.lambda_c).1.flat(),
        }
    }

    fn relu_pattern(&self, params: &ParamSet) -> Vec<bool> {
        let traces: Vec<ForwardTrace> = forward_batch(params, &self.batch).unwrap();
        traces
            .iter()
            .flat_map(|t| t.hidden1.data().iter().chain(t.hidden2.data()).map(|v| *v > 0.0).collect::<Vec<_>>())
            .collect()
    }
}

/// Worst relative error over all parameters, plus the number of parameters
/// skipped because a ReLU switched state inside `±h`.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub worst: f64,
    pub checked: usize,
    pub skipped: usize,
}

/// `|a − n| / max(|a|, |n|, floor)`
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

pub fn check_gradient(inst: &GradInstance, term: Term, h: f64, floor: f64) -> GradCheck {
    let g = inst.gradient(term);
    let base = inst.relu_pattern(&inst.params);
    let mut out = GradCheck {
        worst: 0.0,
        checked: 0,
        skipped: 0,
    };
    for (k, &a) in g.iter().enumerate() {
        let mut plus = inst.params.clone();
        *plus.flat_mut(k) += h;
        let mut minus = inst.params.clone();
        *minus.flat_mut(k) -= h;
        if inst.relu_pattern(&plus) != base || inst.relu_pattern(&minus) != base {
            out.skipped += 1;
            continue;
        }
        let n = (inst.value(&plus, term) - inst.value(&minus, term)) / (2.0 * h);
        out.worst = out.worst.max(relative_error(a, n, floor));
        out.checked += 1;
    }
    out
}
