mod common;

use std::fs;
use std::path::Path;

use semiseg::config::RunConfig;
use semiseg::formats::Checkpoint;
use semiseg::pipeline::{
    continue_supervised, forward_batch, load_training_data, objective, run_all, stage_finetune,
    stage_pseudolabel, stage_supervised, Role, TrainBatch,
};
use semiseg::synthdata::{LabelMap, IGNORE};

use common::{check_gradient, grad_instance, Term, TERMS};

fn tiny_config(out: &Path) -> RunConfig {
    RunConfig {
        num_classes: 3,
        num_clips: 6,
        frames_per_clip: 3,
        height: 16,
        width: 16,
        labeled_fraction: 0.34,
        eval_clips: 2,
        eval_frames: 3,
        teacher_width: 4,
        student_width: 3,
        embed_dim: 4,
        teacher_iters: 6,
        student_iters: 5,
        finetune_iters: 7,
        crop: 12,
        anchors_per_class: 4,
        negatives_per_anchor: 3,
        top_k_exclusion: 1,
        min_prob: 0.2,
        tta_scales: vec![0.75, 1.0],
        vc_windows: vec![2, 3],
        out: out.to_path_buf(),
        ..RunConfig::default()
    }
}

fn bits(v: &[semiseg::losses::LossReport]) -> Vec<(u64, u64)> {
    v.iter().map(|r| (r.total.to_bits(), r.supervised.to_bits())).collect()
}

#[test]
fn zero_weights_reduce_finetuning_to_supervised_continuation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        lambda_u: 0.0,
        lambda_c: 0.0,
        ..tiny_config(dir.path())
    };
    let data = load_training_data(&cfg).unwrap();
    let teacher = stage_supervised(&cfg, &data, Role::Teacher).unwrap();
    let student = stage_supervised(&cfg, &data, Role::Student).unwrap();
    let pseudo = stage_pseudolabel(&cfg, &data, &teacher.checkpoint, &student.checkpoint).unwrap();
    let semi = stage_finetune(&cfg, &data, &student.checkpoint, &pseudo).unwrap();
    let cont = continue_supervised(&cfg, &data, &student.checkpoint, cfg.finetune_iters).unwrap();
    assert_eq!(bits(&semi.log), bits(&cont.log));
    assert_eq!(semi.checkpoint.encode().unwrap(), cont.checkpoint.encode().unwrap());
}

#[test]
fn empty_unlabeled_set_degenerates_to_supervised_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let mut data = load_training_data(&cfg).unwrap();
    let teacher = stage_supervised(&cfg, &data, Role::Teacher).unwrap();
    let student = stage_supervised(&cfg, &data, Role::Student).unwrap();
    data.unlabeled.clear();
    let pseudo = stage_pseudolabel(&cfg, &data, &teacher.checkpoint, &student.checkpoint).unwrap();
    assert!(pseudo.labels.is_empty());
    let semi = stage_finetune(&cfg, &data, &student.checkpoint, &pseudo).unwrap();
    let cont = continue_supervised(&cfg, &data, &student.checkpoint, cfg.finetune_iters).unwrap();
    assert_eq!(bits(&semi.log), bits(&cont.log));
    assert_eq!(semi.checkpoint.params, cont.checkpoint.params);
}

#[test]
fn ignored_pseudo_labels_leave_gradients_unchanged() {
    let inst = grad_instance(3);
    let cfg = RunConfig {
        lambda_u: 1.0,
        lambda_c: 0.0,
        ..inst.cfg.clone()
    };
    let mut batch = TrainBatch {
        labeled: inst.batch.labeled.clone(),
        unlabeled: inst.batch.unlabeled.clone(),
        pseudo_gamma: inst.batch.pseudo_gamma,
    };
    for a in &mut batch.unlabeled {
        a.label = Some(LabelMap::filled(6, 6, 4, IGNORE));
    }
    let traces = forward_batch(&inst.params, &batch).unwrap();
    let (rep, with) = objective(&cfg, &inst.params, &batch, &traces, Some(&inst.plan)).unwrap();
    assert_eq!(rep.unsupervised, 0.0);

    let labeled_only = TrainBatch {
        labeled: inst.batch.labeled.clone(),
        unlabeled: Vec::new(),
        pseudo_gamma: f64::NAN,
    };
    let traces = forward_batch(&inst.params, &labeled_only).unwrap();
    let (_, without) = objective(&cfg, &inst.params, &labeled_only, &traces, None).unwrap();
    assert_eq!(with.flat(), without.flat());
}

#[test]
fn full_chain_gradient_matches_finite_differences() {
    for seed in 0..3 {
        let inst = grad_instance(seed);
        assert!(!inst.plan.refs.is_empty());
        for term in TERMS {
            let c = check_gradient(&inst, term, 1e-5, 1e-8);
            assert!(c.checked > 200, "{term:?}: only {} parameters checked", c.checked);
            assert!(c.worst < 1e-5, "seed {seed} {term:?}: relative error {}", c.worst);
        }
    }
}

#[test]
fn contrastive_weight_scales_its_gradient() {
    let inst = grad_instance(5);
    let g1 = inst.gradient(Term::Contrastive);
    let base = inst.gradient(Term::Supervised);
    let cfg = RunConfig {
        lambda_u: 0.0,
        lambda_c: 2.0,
        ..inst.cfg.clone()
    };
    let traces = forward_batch(&inst.params, &inst.batch).unwrap();
    let (_, g2) = objective(&cfg, &inst.params, &inst.batch, &traces, Some(&inst.plan)).unwrap();
    for ((a, b), s) in g2.flat().iter().zip(&g1).zip(&base) {
        assert!((a - s - 2.0 * b).abs() < 1e-12);
    }
}

fn files_under(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                let mut bytes = fs::read(&p).unwrap();
                if rel == "config.txt" {
                    // the output directory is the one line allowed to differ
                    let text = String::from_utf8(bytes).unwrap();
                    bytes = text.lines().filter(|l| !l.starts_with("out ")).collect::<Vec<_>>().join("\n").into_bytes();
                }
                out.push((rel, bytes));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn run_all_is_deterministic_and_complete() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let sa = run_all(&tiny_config(a.path())).unwrap();
    run_all(&tiny_config(b.path())).unwrap();
    let fa = files_under(a.path());
    assert_eq!(fa, files_under(b.path()));
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    for expected in [
        "config.txt",
        "teacher.ckpt",
        "student_sup.ckpt",
        "student_semi.ckpt",
        "comparison.csv",
        "pseudo_quality.csv",
        "pseudo/gamma.txt",
        "metrics/ensemble.csv",
        "logs/finetune.log",
    ] {
        assert!(names.contains(&expected), "missing {expected}");
    }
    let csv = fs::read_to_string(a.path().join("comparison.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows[0], "model,miou,weighted_iou,vc2,vc3");
    assert_eq!(rows.len(), 5);
    for model in ["student_sup", "student_semi", "teacher", "ensemble"] {
        assert!(sa.report(model).is_some());
        assert_eq!(rows.iter().filter(|r| r.starts_with(&format!("{model},"))).count(), 1);
    }
}

#[test]
fn checkpoints_round_trip_and_resume_counts_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = load_training_data(&cfg).unwrap();
    let student = stage_supervised(&cfg, &data, Role::Student).unwrap();
    let path = dir.path().join("s.ckpt");
    student.checkpoint.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.encode().unwrap(), fs::read(&path).unwrap());
    assert_eq!(loaded, student.checkpoint);
    let cont = continue_supervised(&cfg, &data, &loaded, 3).unwrap();
    assert_eq!(cont.checkpoint.iteration, cfg.student_iters + 3);
}
