use super::*;
use crate::autodiff::finite_difference_check;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const LN2: f64 = std::f64::consts::LN_2;

fn unit_rows(rows: usize, dim: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let mut data: Vec<f64> = (0..rows * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    for row in data.chunks_mut(dim) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    Tensor::new(vec![rows, dim], data).unwrap()
}

fn full_queue(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> ContextQueue {
    let mut q = ContextQueue::new(n, dim).unwrap();
    let ids: Vec<usize> = (0..n).map(|i| 100 + i).collect();
    q.push(&unit_rows(n, dim, rng), &ids).unwrap();
    q
}

#[test]
fn centering_example() {
    let out = center_and_normalize(&Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap()).unwrap();
    let h = 1.0 / 2f64.sqrt();
    assert!(out.max_abs_diff(&Tensor::from_rows(&[vec![h, -h], vec![-h, h]]).unwrap()) < 1e-15);
    assert!(center_and_normalize(&Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()).is_err());
}

#[test]
fn centered_unit_rows_are_fixed_points() {
    let h = 1.0 / 2f64.sqrt();
    let x = Tensor::from_rows(&[vec![h, -h], vec![-h, h]]).unwrap();
    assert!(center_and_normalize(&x).unwrap().max_abs_diff(&x) < 1e-15);
}

#[test]
fn identical_rows_are_flagged() {
    let before = degenerate_rows();
    let out = center_and_normalize(&Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap()).unwrap();
    assert_eq!(degenerate_rows() - before, 2);
    for r in 0..2 {
        assert!(out.row(r).iter().map(|x| x * x).sum::<f64>().sqrt() <= 1.0);
    }
}

#[test]
fn similarity_examples() {
    let d = similarity_from_dots(&[0.0, 3f64.ln()], 1.0).unwrap();
    assert!((d.weights[0] - 0.25).abs() < 1e-15 && (d.weights[1] - 0.75).abs() < 1e-15);
    let u = similarity_from_dots(&[0.3; 8], 0.1).unwrap();
    assert!(u.weights.iter().all(|w| (w - 0.125).abs() < 1e-15));
    assert!(similarity_from_dots(&[], 0.1).is_err());
    assert!(similarity_from_dots(&[1.0], 0.0).is_err());
    let q = ContextQueue::new(4, 3).unwrap();
    assert!(similarity_distribution(&[1.0, 0.0, 0.0], &q, 0.1).is_err());
}

#[test]
fn sharper_temperature_concentrates_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..50 {
        let dots: Vec<f64> = (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let sharp = similarity_from_dots(&dots, 0.1).unwrap();
        let soft = similarity_from_dots(&dots, 1.0).unwrap();
        let max = |w: &[f64]| w.iter().copied().fold(0.0, f64::max);
        assert!(max(&sharp.weights) > max(&soft.weights));
    }
}

#[test]
fn kl_examples() {
    let t = similarity_from_dots(&[0.2, -0.4, 0.9], 0.5).unwrap();
    assert_eq!(kl_loss(&t, &t).unwrap(), 0.0);
    let t = SimilarityDistribution {
        weights: vec![1.0, 0.0],
        tau: 1.0,
        normalized: true,
    };
    let s = SimilarityDistribution {
        weights: vec![0.5, 0.5],
        tau: 1.0,
        normalized: true,
    };
    assert!((kl_loss(&t, &s).unwrap() - LN2).abs() < 1e-15);
    let zero = SimilarityDistribution {
        weights: vec![0.0, 1.0],
        tau: 1.0,
        normalized: true,
    };
    assert!(matches!(kl_loss(&s, &zero), Err(Error::LogDomain(_))));
}

#[test]
fn kl_gradient_wrt_student_logits_is_s_minus_t() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let logits: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = similarity_from_dots(&(0..6).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>(), 1.0).unwrap();
        let s = similarity_from_dots(&logits, 1.0).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut up = logits.clone();
            let mut down = logits.clone();
            up[i] += h;
            down[i] -= h;
            let fd = (kl_loss(&t, &similarity_from_dots(&up, 1.0).unwrap()).unwrap()
                - kl_loss(&t, &similarity_from_dots(&down, 1.0).unwrap()).unwrap())
                / (2.0 * h);
            assert!((fd - (s.weights[i] - t.weights[i])).abs() < 1e-8);
        }
    }
}

#[test]
fn mining_examples() {
    assert!(mine_topk(&[0.3, 0.2], 0).unwrap().indices.is_empty());
    let r = mine_topk(&[0.9, 0.1, 0.5], 2).unwrap();
    assert_eq!(r.indices, vec![0, 2]);
    assert_eq!(r.scores, vec![0.9, 0.5]);
    assert!(mine_topk(&[0.9, 0.1], 3).is_err());
    assert_eq!(mine_topk(&[0.5, 0.7, 0.5, 0.5], 3).unwrap().indices, vec![1, 0, 2]);
    let r = mine_topk_where(&[0.9, 0.1, 0.5], 5, |i| i != 0).unwrap();
    assert_eq!(r.indices, vec![2, 1]);
}

#[test]
fn mining_matches_full_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..200 {
        let n = rng.gen_range(1..40);
        // coarse values force ties
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..6) as f64 / 5.0).collect();
        let k = rng.gen_range(0..=n);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(mine_topk(&scores, k).unwrap().indices, order[..k]);
    }
}

#[test]
fn enhancement_examples() {
    let e = enhance_target(&[0.0, 0.0], &[0], 1.0, false).unwrap();
    assert!((e.values[0] - std::f64::consts::E / 2.0).abs() < 1e-15);
    assert!((e.values[1] - 0.5).abs() < 1e-15);
    assert!(e.values.iter().sum::<f64>() > 1.0);

    let dots = [0.3, 1.0, -0.2];
    let plain = similarity_from_dots(&dots, 0.05).unwrap();
    let e = enhance_target(&dots, &[1], 0.05, false).unwrap();
    assert_eq!(e.values, plain.weights);
    let none = enhance_target(&dots, &[], 0.05, false).unwrap();
    assert_eq!(none.values, plain.weights);

    let r = enhance_target(&[0.1, 0.4, -0.3, 0.2], &[0, 2], 0.05, true).unwrap();
    assert!((r.values.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(enhance_target(&[0.1], &[3], 0.05, false).is_err());
}

fn logit_grad(t: &EnhancedTargetDistribution, logits: &[f64], i: usize) -> f64 {
    let h = 1e-6;
    let eval = |delta: f64| {
        let mut l = logits.to_vec();
        l[i] += delta;
        enhanced_loss(t, &similarity_from_dots(&l, 1.0).unwrap()).unwrap()
    };
    (eval(h) - eval(-h)) / (2.0 * h)
}

#[test]
fn single_enhanced_positive_is_pulled_harder() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..50 {
        let target_dots: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pos = mine_topk(&target_dots, 1).unwrap().indices;
        let plain = enhance_target(&target_dots, &[], 0.5, false).unwrap();
        let boosted = enhance_target(&target_dots, &pos, 0.5, false).unwrap();
        assert!(logit_grad(&boosted, &logits, pos[0]) < logit_grad(&plain, &logits, pos[0]));
    }
}

/// With an unnormalized target the logit gradient is `S s_i - t_i`, where
/// `S` is the target mass, so enhancing several positives lowers the
/// gradient at positive `i` by `Δ_i - s_i ΣΔ`.
#[test]
fn enhanced_gradient_shift_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..50 {
        let target_dots: Vec<f64> = (0..8).map(|_| rng.gen_range(-0.9..0.9)).collect();
        let logits: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let pos = mine_topk(&target_dots, 3).unwrap().indices;
        let plain = enhance_target(&target_dots, &[], 0.5, false).unwrap();
        let boosted = enhance_target(&target_dots, &pos, 0.5, false).unwrap();
        let s = similarity_from_dots(&logits, 1.0).unwrap().weights;
        let delta: Vec<f64> = boosted.values.iter().zip(&plain.values).map(|(a, b)| a - b).collect();
        let total: f64 = delta.iter().sum();
        for &i in &pos {
            let shift = logit_grad(&boosted, &logits, i) - logit_grad(&plain, &logits, i);
            let want = s[i] * total - delta[i];
            assert!((shift - want).abs() < 1e-6, "{shift} vs {want}");
        }
    }
}

#[test]
fn empty_enhancement_reduces_to_kl() {
    let t = enhance_target(&[0.2, 0.5, -0.1], &[], 0.05, false).unwrap();
    let tp = similarity_from_dots(&[0.2, 0.5, -0.1], 0.05).unwrap();
    let s = similarity_from_dots(&[0.1, 0.0, 0.3], 0.1).unwrap();
    assert_eq!(enhanced_loss(&t, &s).unwrap(), kl_loss(&tp, &s).unwrap());
}

#[test]
fn queue_fifo_and_renormalization() {
    let mut q = ContextQueue::new(3, 2).unwrap();
    for i in 0..4 {
        q.push(&Tensor::from_rows(&[vec![i as f64 + 1.0, 1.0]]).unwrap(), &[i]).unwrap();
    }
    assert_eq!(q.ids_in_order(), vec![1, 2, 3]);
    for i in 0..3 {
        let e = q.entry(i);
        assert!((e[0] * e[0] + e[1] * e[1] - 1.0).abs() < 1e-12);
        assert!((e[0] / e[1] - (i as f64 + 2.0)).abs() < 1e-12);
    }
    assert!(q.push(&Tensor::zeros(&[1, 3]), &[0]).is_err());
    assert!(q.push(&Tensor::zeros(&[2, 2]), &[0]).is_err());

    let back = ContextQueue::from_parts(3, &q.snapshot().unwrap(), &q.ids_in_order()).unwrap();
    assert_eq!(back.snapshot().unwrap(), q.snapshot().unwrap());
    assert_eq!(back.ids_in_order(), q.ids_in_order());
}

fn loss_settings(k: usize) -> LossSettings {
    LossSettings {
        tau: 0.1,
        tau_prime: 0.05,
        k,
        renormalize: false,
        mining_side: MiningSide::Target,
    }
}

#[test]
fn batch_loss_matches_per_sample_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let q = full_queue(20, 5, &mut rng);
    let p = unit_rows(4, 5, &mut rng);
    let z = unit_rows(4, 5, &mut rng);
    let ids = [0, 1, 2, 3];
    for (stage, k) in [(Stage::One, 0), (Stage::Two, 3)] {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let out = batch_loss(&mut g, pv, &z, &ids, &q, stage, &loss_settings(k)).unwrap();
        let mut want = 0.0;
        for b in 0..4 {
            let s = similarity_distribution(p.row(b), &q, 0.1).unwrap();
            let dots = queue_dots(z.row(b), &q).unwrap();
            want += match stage {
                Stage::One => kl_loss(&similarity_from_dots(&dots, 0.05).unwrap(), &s).unwrap(),
                Stage::Two => {
                    let pos = mine_topk(&dots, k).unwrap();
                    enhanced_loss(&enhance_target(&dots, &pos.indices, 0.05, false).unwrap(), &s).unwrap()
                }
            } / 4.0;
        }
        let got = g.value(out.loss).item();
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{stage:?}: {got} vs {want}");
    }
}

#[test]
fn batch_loss_with_k_zero_is_stage_one_exactly() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let q = full_queue(32, 6, &mut rng);
    let p = unit_rows(5, 6, &mut rng);
    let z = unit_rows(5, 6, &mut rng);
    let run = |stage| {
        let mut g = Graph::new();
        let pv = g.constant(p.clone());
        let l = batch_loss(&mut g, pv, &z, &[0, 1, 2, 3, 4], &q, stage, &loss_settings(0)).unwrap().loss;
        g.value(l).item()
    };
    assert_eq!(run(Stage::One).to_bits(), run(Stage::Two).to_bits());
}

#[test]
fn self_entries_are_never_mined() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut q = ContextQueue::new(6, 3).unwrap();
    let z = unit_rows(2, 3, &mut rng);
    // the queue holds both samples' own embeddings plus random others
    q.push(&z, &[7, 8]).unwrap();
    q.push(&unit_rows(4, 3, &mut rng), &[1, 2, 3, 4]).unwrap();
    let mut g = Graph::new();
    let pv = g.constant(z.clone());
    let before = call_counts();
    let out = batch_loss(&mut g, pv, &z, &[7, 8], &q, Stage::Two, &loss_settings(5)).unwrap();
    assert_eq!(out.mean_mined, 5.0);
    assert_eq!(call_counts().mine_topk - before.mine_topk, 2);
    // K larger than the non-self entries mines fewer
    let mut g = Graph::new();
    let pv = g.constant(z.clone());
    let out = batch_loss(&mut g, pv, &z, &[7, 8], &q, Stage::Two, &loss_settings(6)).unwrap();
    assert_eq!(out.mean_mined, 5.0);
}

#[test]
fn stage_one_never_mines() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let q = full_queue(10, 4, &mut rng);
    let z = unit_rows(3, 4, &mut rng);
    let before = call_counts();
    let mut g = Graph::new();
    let pv = g.constant(z.clone());
    batch_loss(&mut g, pv, &z, &[0, 1, 2], &q, Stage::One, &loss_settings(4)).unwrap();
    assert_eq!(call_counts(), before);
}

#[test]
fn partial_queue_is_rejected() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut q = ContextQueue::new(10, 4).unwrap();
    q.push(&unit_rows(3, 4, &mut rng), &[0, 1, 2]).unwrap();
    let z = unit_rows(3, 4, &mut rng);
    let mut g = Graph::new();
    let pv = g.constant(z.clone());
    assert!(batch_loss(&mut g, pv, &z, &[0, 1, 2], &q, Stage::One, &loss_settings(0)).is_err());
}

#[test]
fn batch_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let q = full_queue(12, 4, &mut rng);
    let z = unit_rows(3, 4, &mut rng);
    let raw = unit_rows(3, 4, &mut rng);
    for (stage, renormalize) in [(Stage::One, false), (Stage::Two, false), (Stage::Two, true)] {
        let settings = LossSettings {
            renormalize,
            ..loss_settings(3)
        };
        let err = finite_difference_check(
            |g, vars| {
                let p = center_and_normalize_var(g, vars[0])?;
                Ok(batch_loss(g, p, &z, &[0, 1, 2], &q, stage, &settings)?.loss)
            },
            std::slice::from_ref(&raw),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{stage:?}: {err}");
    }
}

proptest! {
    #[test]
    fn similarity_is_shift_invariant(dots in proptest::collection::vec(-1.0f64..1.0, 1..32), shift in -5.0f64..5.0) {
        let a = similarity_from_dots(&dots, 0.1).unwrap();
        let shifted: Vec<f64> = dots.iter().map(|d| d + shift).collect();
        let b = similarity_from_dots(&shifted, 0.1).unwrap();
        prop_assert!((a.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for (x, y) in a.weights.iter().zip(&b.weights) {
            prop_assert!(*x > 0.0);
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn mining_is_invariant_to_monotone_transforms(scores in proptest::collection::vec(-1.0f64..1.0, 1..32), k in 0usize..32) {
        let k = k.min(scores.len());
        let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 2.0).collect();
        prop_assert_eq!(mine_topk(&scores, k).unwrap().indices, mine_topk(&warped, k).unwrap().indices);
    }

    #[test]
    fn kl_is_non_negative(a in proptest::collection::vec(-2.0f64..2.0, 2..16), seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b: Vec<f64> = a.iter().map(|_| rng.gen_range(-2.0..2.0)).collect();
        let t = similarity_from_dots(&a, 1.0).unwrap();
        let s = similarity_from_dots(&b, 1.0).unwrap();
        prop_assert!(kl_loss(&t, &s).unwrap() >= -1e-12);
    }

    #[test]
    fn enhancement_touches_only_positives(dots in proptest::collection::vec(-1.0f64..1.0, 2..32), k in 0usize..32) {
        let k = k.min(dots.len());
        let pos = mine_topk(&dots, k).unwrap().indices;
        let e = enhance_target(&dots, &pos, 0.05, false).unwrap();
        let plain = similarity_from_dots(&dots, 0.05).unwrap();
        for i in 0..dots.len() {
            if !pos.contains(&i) {
                prop_assert_eq!(e.values[i], plain.weights[i]);
            } else {
                prop_assert!(e.values[i] >= plain.weights[i]);
            }
        }
        let r = enhance_target(&dots, &pos, 0.05, true).unwrap();
        let s = similarity_from_dots(&dots.iter().map(|d| d * 0.5).collect::<Vec<_>>(), 0.1).unwrap();
        prop_assert!(enhanced_loss(&r, &s).unwrap() >= -1e-12);
    }

    #[test]
    fn queue_holds_trailing_entries(batches in proptest::collection::vec(1usize..6, 1..12), cap in 1usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(batches.len() as u64);
        let mut q = ContextQueue::new(cap, 3).unwrap();
        let mut replay: Vec<(usize, Vec<f64>)> = Vec::new();
        let mut next = 0;
        for b in batches {
            let rows = unit_rows(b, 3, &mut rng);
            let ids: Vec<usize> = (next..next + b).collect();
            next += b;
            q.push(&rows, &ids).unwrap();
            for (i, id) in ids.iter().enumerate() {
                replay.push((*id, rows.row(i).to_vec()));
            }
            let tail = &replay[replay.len().saturating_sub(cap)..];
            prop_assert_eq!(q.len(), tail.len());
            for (i, (id, row)) in tail.iter().enumerate() {
                prop_assert_eq!(q.id(i), *id);
                for (a, b) in q.entry(i).iter().zip(row) {
                    prop_assert!((a - b).abs() < 1e-15);
                }
            }
        }
    }
}
