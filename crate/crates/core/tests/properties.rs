use anchorfocus::benchgen::{filter_pairs, perturb_bbox, FilterThresholds, GalleryEntry, PerturbMode, Subset};
use anchorfocus::eval::{instance_recall_at_k, rank_gallery, recall_at_k, QueryRanking};
use anchorfocus::fusion::modulated_cross_attention;
use anchorfocus::geometry::BBox;
use anchorfocus::numerics::Tensor;
use proptest::prelude::*;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1.0f64..1.0, cols), rows)
}

fn tensor(rows: &[Vec<f64>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

fn thresholds() -> impl Strategy<Value = FilterThresholds> {
    (0usize..4, 2usize..8).prop_map(|(s, valid)| FilterThresholds {
        valid,
        ..Subset::ALL[s].thresholds()
    })
}

/// A few tight clusters so that central and near-duplicate images both occur.
fn clustered() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (matrix(3, 5), 2usize..30, 0.02f64..0.6, any::<u64>()).prop_map(|(centers, n, spread, seed)| {
        let mut s = seed;
        let mut next = || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        };
        (0..n).map(|i| centers[i % 3].iter().map(|c| c + spread * next()).collect()).collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn filtering_survivors_again_keeps_every_pair(f in clustered(), t in thresholds()) {
        let pairs = filter_pairs(&f, &t).unwrap();
        let mut survivors: Vec<usize> = pairs.iter().flat_map(|&(i, j)| [i, j]).collect();
        survivors.sort_unstable();
        survivors.dedup();
        let sub: Vec<Vec<f64>> = survivors.iter().map(|&i| f[i].clone()).collect();
        let again: Vec<(usize, usize)> = filter_pairs(&sub, &t).unwrap().into_iter().map(|(i, j)| (survivors[i], survivors[j])).collect();
        if sub.len() >= t.valid {
            prop_assert_eq!(again, pairs);
        } else {
            prop_assert!(again.is_empty());
        }
    }

    #[test]
    fn filter_pairs_are_ordered_distinct_and_symmetric(f in clustered(), t in thresholds()) {
        let pairs = filter_pairs(&f, &t).unwrap();
        prop_assert!(pairs.windows(2).all(|w| w[0] < w[1]));
        for &(i, j) in &pairs {
            prop_assert!(i != j);
            prop_assert!(pairs.binary_search(&(j, i)).is_ok());
        }
    }

    #[test]
    fn ranking_is_the_stable_descending_argsort(g in 1usize..21, d in 1usize..5, vals in prop::collection::vec(-2i32..=2, 105)) {
        let gallery: Vec<Vec<f64>> = (0..g).map(|i| (0..d).map(|c| vals[i * d + c] as f64).collect()).collect();
        let q: Vec<f64> = (0..d).map(|c| vals[100 + c] as f64).collect();
        let order = rank_gallery(&q, &gallery).unwrap();
        let score = |i: usize| gallery[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        let mut oracle: Vec<usize> = (0..g).collect();
        oracle.sort_by(|&a, &b| score(b).partial_cmp(&score(a)).unwrap().then(a.cmp(&b)));
        prop_assert_eq!(order, oracle);
    }

    #[test]
    fn recall_ordering_holds_for_any_ranking(n in 2usize..12, inst in prop::collection::vec(0u32..4, 12), perms in prop::collection::vec(any::<u64>(), 6)) {
        let gallery: Vec<GalleryEntry> = (0..n)
            .map(|i| GalleryEntry { image_id: i as u32, instance_id: inst[i], category_id: 0, is_target: true })
            .collect();
        let rankings: Vec<QueryRanking> = perms
            .iter()
            .enumerate()
            .map(|(k, &seed)| {
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by_key(|&i| (seed.rotate_left(i as u32 * 7) ^ i as u64).wrapping_mul(0x9e3779b97f4a7c15));
                let target = k % n;
                QueryRanking { target_image_id: target as u32, instance_id: inst[target], order }
            })
            .collect();
        let r1 = recall_at_k(&rankings, &gallery, 1).unwrap();
        let r5 = recall_at_k(&rankings, &gallery, 5.min(n)).unwrap();
        let rid1 = instance_recall_at_k(&rankings, &gallery, 1).unwrap();
        prop_assert!(r1 <= r5);
        prop_assert!(r1 <= rid1);
        prop_assert_eq!(recall_at_k(&rankings, &gallery, n).unwrap(), 1.0);
    }

    #[test]
    fn masked_mass_grows_with_the_bias(q in matrix(3, 4), kv in matrix(6, 4), bits in prop::collection::vec(any::<bool>(), 6)) {
        let mut mask: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        mask[0] = 1.0;
        mask[5] = 0.0;
        let mass = |beta: f64| {
            let (_, w) = modulated_cross_attention(&tensor(&q), &tensor(&kv), &mask, beta).unwrap();
            (0..3).map(|r| (0..6).filter(|&c| mask[c] == 1.0).map(|c| w.get(r, c)).sum::<f64>()).sum::<f64>()
        };
        let masses: Vec<f64> = [0.0, 1.0, 2.0, 4.0, 8.0].into_iter().map(mass).collect();
        prop_assert!(masses.windows(2).all(|w| w[1] > w[0]), "{:?}", masses);
    }

    #[test]
    fn attention_ignores_joint_key_permutation(q in matrix(2, 3), kv in matrix(5, 3), bits in prop::collection::vec(any::<bool>(), 5), shift in 1usize..5, beta in 0.0f64..10.0) {
        let mask: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let perm: Vec<usize> = (0..5).map(|i| (i + shift) % 5).collect();
        let kv_p: Vec<Vec<f64>> = perm.iter().map(|&i| kv[i].clone()).collect();
        let mask_p: Vec<f64> = perm.iter().map(|&i| mask[i]).collect();
        let (out, w) = modulated_cross_attention(&tensor(&q), &tensor(&kv), &mask, beta).unwrap();
        let (out_p, w_p) = modulated_cross_attention(&tensor(&q), &tensor(&kv_p), &mask_p, beta).unwrap();
        prop_assert!(out.max_abs_diff(&out_p) < 1e-12);
        for r in 0..2 {
            for (j, &i) in perm.iter().enumerate() {
                prop_assert!((w.get(r, i) - w_p.get(r, j)).abs() < 1e-12);
            }
            prop_assert!((w.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn perturbed_boxes_stay_in_frame(x0 in 0.0f64..0.5, y0 in 0.0f64..0.5, w in 0.2f64..0.5, h in 0.2f64..0.5, iou in 0.5f64..1.0, seed in any::<u64>(), shift in any::<bool>()) {
        let b = BBox::new(x0, y0, x0 + w, y0 + h).unwrap();
        let mode = if shift { PerturbMode::ScaleShift } else { PerturbMode::Scale };
        match perturb_bbox(&b, mode, iou, seed) {
            Ok(p) => {
                let [a0, b0, a1, b1] = p.to_array();
                prop_assert!(0.0 <= a0 && a0 < a1 && a1 <= 1.0 && 0.0 <= b0 && b0 < b1 && b1 <= 1.0);
                prop_assert!((b.iou(&p) - iou).abs() <= 0.02);
            }
            // A shifted box near the frame edge may have nowhere to go.
            Err(e) => prop_assert!(shift, "scale mode failed: {}", e),
        }
    }
}

#[test]
fn perturbation_hits_the_target_iou_over_100_seeds() {
    let b = BBox::new(0.3, 0.25, 0.7, 0.75).unwrap();
    for mode in [PerturbMode::Scale, PerturbMode::ScaleShift] {
        for target in [0.9, 0.8, 0.6, 0.5] {
            for seed in 0..100 {
                let p = perturb_bbox(&b, mode, target, seed).unwrap();
                let iou = b.iou(&p);
                assert!((iou - target).abs() <= 0.02, "{mode} target {target} seed {seed}: IoU {iou}");
            }
        }
    }
}
