use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use semiseg::formats;
use semiseg::infer::{ensemble, ProbMap};
use semiseg::losses::{contrastive_loss, supervised_ce, total_loss, ClassTerm, ContrastiveBatch};
use semiseg::metrics::{accumulate_confusion, miou, video_consistency, weighted_iou, ConfusionMatrix};
use semiseg::pseudolab::{
    entropy_map, make_pseudo_labels, select_negatives, EntropyMap, NegativeSource,
};
use semiseg::synthdata::{augment, generate_dataset, remap_labels, AugmentConfig, Frame, LabelMap, IGNORE};
use semiseg::tensor::Map3;
use semiseg::tinynet::{softmax, softmax_map};

fn logits_strategy(c: usize, n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-6.0f64..6.0, c * n)
}

fn probs_from(c: usize, h: usize, w: usize, logits: Vec<f64>) -> ProbMap {
    ProbMap::new(softmax_map(&Map3::from_vec(c, h, w, logits))).unwrap()
}

fn labels_strategy(c: u8, n: usize) -> impl Strategy<Value = Vec<u8>> {
    prop::collection::vec(prop_oneof![8 => 0..c, 1 => Just(IGNORE)], n)
}

fn rank_of(p: &[f64], class: usize) -> usize {
    (0..p.len())
        .filter(|&k| p[k] > p[class] || (p[k] == p[class] && k < class))
        .count()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(v in prop::collection::vec(-50.0f64..50.0, 1..9), shift in -100.0f64..100.0) {
        let p = softmax(&v);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        for (a, b) in p.iter().zip(softmax(&shifted)) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn entropy_bounded_and_permutation_invariant(c in 2usize..6, logits in logits_strategy(5, 12), rot in 0usize..5) {
        let logits = logits[..c * 12].to_vec();
        let p = probs_from(c, 3, 4, logits.clone());
        let e = entropy_map(&p).unwrap();
        let cap = (c as f64).ln();
        prop_assert!(e.values().iter().all(|v| *v >= 0.0 && *v <= cap));
        // rotate the class axis
        let rot = rot % c;
        let mut permuted = vec![0.0; logits.len()];
        for k in 0..c {
            let dst = (k + rot) % c;
            permuted[dst * 12..(dst + 1) * 12].copy_from_slice(&logits[k * 12..(k + 1) * 12]);
        }
        let ep = entropy_map(&probs_from(c, 3, 4, permuted)).unwrap();
        for (a, b) in e.values().iter().zip(ep.values()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pseudo_labels_follow_threshold(logits in logits_strategy(4, 20), g1 in 0.0f64..1.4, g2 in 0.0f64..1.4) {
        let p = probs_from(4, 4, 5, logits);
        let e = entropy_map(&p).unwrap();
        let arg = p.argmax();
        let (lo, hi) = if g1 < g2 { (g1, g2) } else { (g2, g1) };
        let high = make_pseudo_labels(&p, &e, hi).unwrap();
        let low = make_pseudo_labels(&p, &e, lo).unwrap();
        for (i, &h) in e.values().iter().enumerate() {
            let l = high.labels.labels()[i];
            prop_assert_eq!(l == IGNORE, h >= hi);
            if l != IGNORE {
                prop_assert_eq!(l, arg.labels()[i]);
            }
            // lowering the threshold never un-ignores a pixel
            if l == IGNORE {
                prop_assert_eq!(low.labels.labels()[i], IGNORE);
            }
        }
    }

    #[test]
    fn negatives_stay_outside_top_k(logits in logits_strategy(5, 16), k in 0usize..5, gamma in 0.0f64..1.7, seed in any::<u64>()) {
        let p = probs_from(5, 4, 4, logits);
        let e = entropy_map(&p).unwrap();
        let pl = make_pseudo_labels(&p, &e, gamma).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let set = select_negatives(&[NegativeSource { probs: &p, pseudo: &pl, valid: None }], 5, k, 64, &mut rng).unwrap();
        for (c, pool) in set.per_class.iter().enumerate() {
            for r in pool {
                prop_assert!(!pl.is_reliable(r.pixel));
                prop_assert!(rank_of(&p.pixel(r.pixel), c) >= k);
            }
        }
    }

    #[test]
    fn ce_gradient_rows_sum_to_zero(logits in logits_strategy(3, 9), labels in labels_strategy(3, 9)) {
        let lg = Map3::from_vec(3, 3, 3, logits);
        let lm = LabelMap::new(3, 3, 3, labels).unwrap();
        let out = supervised_ce(&[&lg], &[&lm]).unwrap();
        prop_assert!(out.loss >= 0.0);
        for p in 0..9 {
            let s: f64 = out.grads[0].pixel(p).iter().sum();
            prop_assert!(s.abs() < 1e-15);
        }
    }

    #[test]
    fn doubling_lambda_c_doubles_contrastive_share(ls in 0.0f64..5.0, lu in 0.0f64..5.0, lc in 0.0f64..5.0, lam_u in 0.0f64..2.0, lam_c in 0.0f64..2.0) {
        let a = total_loss(ls, lu, lc, lam_u, lam_c).unwrap();
        let b = total_loss(ls, lu, lc, lam_u, 2.0 * lam_c).unwrap();
        let share_a = lam_c * lc;
        let share_b = 2.0 * lam_c * lc;
        prop_assert_eq!(share_b, 2.0 * share_a);
        prop_assert!((a.total - (ls + lam_u * lu + share_a)).abs() <= 1e-12);
        prop_assert!((b.total - (ls + lam_u * lu + share_b)).abs() <= 1e-12);
    }

    #[test]
    fn contrastive_is_nonnegative(raw in prop::collection::vec(-1.0f64..1.0, 3 * 7), tau in 0.05f64..2.0) {
        let unit = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.iter().map(|x| x / n).collect::<Vec<f64>>()
        };
        let vecs: Vec<Vec<f64>> = raw.chunks(3).map(unit).collect();
        let batch = ContrastiveBatch {
            classes: vec![ClassTerm {
                anchors: vec![vecs[0].clone(), vecs[1].clone()],
                prototype: vecs[2].clone(),
                negatives: vec![vec![vecs[3].clone(), vecs[4].clone()], vec![vecs[5].clone(), vecs[6].clone()]],
            }],
            temperature: tau,
        };
        let (l, _) = contrastive_loss(&batch).unwrap();
        prop_assert!(l >= 0.0);
    }

    #[test]
    fn fusion_is_permutation_invariant_and_valid(a in logits_strategy(3, 6), b in logits_strategy(3, 6), c in logits_strategy(3, 6)) {
        let (pa, pb, pc) = (probs_from(3, 2, 3, a), probs_from(3, 2, 3, b), probs_from(3, 2, 3, c));
        let abc = ensemble(&[&pa, &pb, &pc], None).unwrap();
        let cab = ensemble(&[&pc, &pa, &pb], None).unwrap();
        for (x, y) in abc.map().data().iter().zip(cab.map().data()) {
            prop_assert!((x - y).abs() < 1e-15);
        }
        prop_assert!(ProbMap::new(abc.map().clone()).is_ok());
        let self_pair = ensemble(&[&pa, &pa], None).unwrap();
        prop_assert_eq!(self_pair.argmax(), pa.argmax());
    }

    #[test]
    fn metrics_bounded_and_permutation_invariant(gt in labels_strategy(4, 32), pred in prop::collection::vec(0u8..4, 32), perm_seed in 0usize..24) {
        let g = LabelMap::new(4, 8, 4, gt.clone()).unwrap();
        let p = LabelMap::new(4, 8, 4, pred.clone()).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        accumulate_confusion(&g, &p, &mut cm).unwrap();
        if cm.total() == 0 {
            return Ok(());
        }
        let (m, _) = miou(&cm).unwrap();
        let w = weighted_iou(&cm).unwrap();
        prop_assert!((0.0..=1.0).contains(&m) && (0.0..=1.0).contains(&w));

        // permutation number `perm_seed` of 0..4
        let mut perm: Vec<u8> = (0..4).collect();
        let mut k = perm_seed;
        for i in (1..4).rev() {
            perm.swap(i, k % (i + 1));
            k /= i + 1;
        }
        let map = |v: &[u8]| v.iter().map(|&x| if x == IGNORE { x } else { perm[x as usize] }).collect::<Vec<u8>>();
        let mut cm2 = ConfusionMatrix::new(4);
        accumulate_confusion(
            &LabelMap::new(4, 8, 4, map(&gt)).unwrap(),
            &LabelMap::new(4, 8, 4, map(&pred)).unwrap(),
            &mut cm2,
        ).unwrap();
        prop_assert!((miou(&cm2).unwrap().0 - m).abs() < 1e-12);
        prop_assert!((weighted_iou(&cm2).unwrap() - w).abs() < 1e-12);
    }

    #[test]
    fn confusion_is_additive(a in labels_strategy(3, 16), b in labels_strategy(3, 16), pa in prop::collection::vec(0u8..3, 16), pb in prop::collection::vec(0u8..3, 16)) {
        let lm = |v: Vec<u8>| LabelMap::new(4, 4, 3, v).unwrap();
        let (ga, gb, qa, qb) = (lm(a), lm(b), lm(pa), lm(pb));
        let mut joint = ConfusionMatrix::new(3);
        accumulate_confusion(&ga, &qa, &mut joint).unwrap();
        accumulate_confusion(&gb, &qb, &mut joint).unwrap();
        let mut x = ConfusionMatrix::new(3);
        accumulate_confusion(&ga, &qa, &mut x).unwrap();
        let mut y = ConfusionMatrix::new(3);
        accumulate_confusion(&gb, &qb, &mut y).unwrap();
        x.merge(&y);
        prop_assert_eq!(x, joint);
    }

    #[test]
    fn vc1_is_pixel_accuracy(gt in labels_strategy(3, 12), pred in prop::collection::vec(0u8..3, 12)) {
        let g = LabelMap::new(3, 4, 3, gt.clone()).unwrap();
        let p = LabelMap::new(3, 4, 3, pred.clone()).unwrap();
        let counted: Vec<(u8, u8)> = gt.iter().zip(&pred).filter(|(g, _)| **g != IGNORE).map(|(g, p)| (*g, *p)).collect();
        let vc = video_consistency(&[g], &[p], 1).unwrap();
        if counted.is_empty() {
            prop_assert_eq!(vc, None);
        } else {
            let acc = counted.iter().filter(|(g, p)| g == p).count() as f64 / counted.len() as f64;
            prop_assert!((vc.unwrap() - acc).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_remap_is_identity(labels in labels_strategy(5, 20)) {
        let m = LabelMap::new(4, 5, 5, labels).unwrap();
        let table: BTreeMap<u8, u8> = (0..5).map(|c| (c, c)).collect();
        let once = remap_labels(&m, &table, 5).unwrap();
        prop_assert_eq!(&remap_labels(&once, &table, 5).unwrap(), &m);
    }

    #[test]
    fn augment_keeps_labels_and_geometry(seed in any::<u64>(), crop in 8usize..24) {
        // a frame whose red channel encodes the label exactly
        let (h, w) = (16, 20);
        let labels: Vec<u8> = (0..h * w).map(|i| ((i / w) / 4 + (i % w) / 5) as u8 % 4).collect();
        let mut px = Map3::zeros(3, h, w);
        for (i, l) in labels.iter().enumerate() {
            px.channel_mut(0)[i] = *l as f64 / 4.0;
        }
        let frame = Frame::new(px).unwrap();
        let lm = LabelMap::new(h, w, 4, labels).unwrap();
        let cfg = AugmentConfig { jitter: false, ratio_range: (1.0, 2.0), ..AugmentConfig::with_crop(crop, crop) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = augment(&frame, Some(&lm), &cfg, &mut rng).unwrap();
        let label = out.label.unwrap();
        prop_assert_eq!((label.height(), label.width()), (crop, crop));
        for (i, &l) in label.labels().iter().enumerate() {
            prop_assert!(l < 4 || l == IGNORE);
            prop_assert_eq!(l == IGNORE, !out.valid[i]);
        }
        // at unit ratio every valid pixel's red value still encodes its label
        let unit = AugmentConfig { force_ratio: Some(1.0), ..cfg };
        let out = augment(&frame, Some(&lm), &unit, &mut rng).unwrap();
        let label = out.label.unwrap();
        let red = out.frame.pixels().channel(0);
        for (i, &l) in label.labels().iter().enumerate() {
            if out.valid[i] {
                prop_assert!((red[i] - l as f64 / 4.0).abs() < 1e-12);
            } else {
                prop_assert_eq!(l, IGNORE);
                prop_assert_eq!(red[i], 0.0);
            }
        }
    }

    #[test]
    fn format_round_trips(c in 1usize..4, h in 1usize..6, w in 1usize..6, seed in any::<u64>()) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let specials = [0.0f32, -0.0, f32::MAX, f32::MIN_POSITIVE, 1e-45, 1.0];
        let vals: Vec<f64> = (0..c * h * w)
            .map(|i| if i % 3 == 0 { specials[i % specials.len()] as f64 } else { rng.gen::<f32>() as f64 })
            .collect();
        let bytes = formats::encode_pmap(&Map3::from_vec(c, h, w, vals.clone())).unwrap();
        prop_assert_eq!(formats::encode_pmap(&formats::decode_pmap(&bytes).unwrap()).unwrap(), bytes);
        let fm = EntropyMap::new(h, w, vals[..h * w].to_vec()).unwrap();
        let bytes = formats::encode_fmap(&fm).unwrap();
        prop_assert_eq!(formats::encode_fmap(&formats::decode_fmap(&bytes).unwrap()).unwrap(), bytes);
        let labels: Vec<u8> = (0..h * w).map(|_| if rng.gen_bool(0.3) { IGNORE } else { rng.gen_range(0..5) }).collect();
        let lm = LabelMap::new(h, w, 5, labels).unwrap();
        let bytes = formats::encode_lmap(&lm).unwrap();
        prop_assert_eq!(formats::decode_lmap(&bytes).unwrap(), lm);
    }
}

#[test]
fn dataset_generation_is_pure() {
    let a = generate_dataset(4, 3, 2, 16, 16, 0.34, 11).unwrap();
    let b = generate_dataset(4, 3, 2, 16, 16, 0.34, 11).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, generate_dataset(4, 3, 2, 16, 16, 0.34, 12).unwrap());
}
