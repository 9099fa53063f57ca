mod common;

use cdr_core::dataset::{filter_min_counts, generate_synthetic, Direction, SyntheticConfig};
use cdr_core::eval::*;
use cdr_core::pipeline::{evaluate_model, prepare_split, pretrain_backbones, train_model, Method, SplitSettings};
use cdr_core::pretrain::{BprHyper, EmbeddingTable};
use cdr_core::{adapter::AdapterHyper, baseline::MappingHyper};
use common::*;
use ndarray::{array, Array2};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[test]
fn metrics_match_naive_full_sort() {
    let out = metric_oracle(500, 77);
    assert_eq!(out.mismatches, 0, "{} of {} instances differ", out.mismatches, out.instances);
}

#[test]
fn metric_examples() {
    assert_eq!((hr_at_k(1, 10).unwrap(), ndcg_at_k(1, 10).unwrap(), mrr(1).unwrap()), (1.0, 1.0, 1.0));
    assert_eq!((ndcg_at_k(3, 10).unwrap(), mrr(3).unwrap()), (0.5, 1.0 / 3.0));
    assert_eq!((hr_at_k(11, 10).unwrap(), ndcg_at_k(11, 10).unwrap(), mrr(11).unwrap()), (0.0, 0.0, 1.0 / 11.0));
    assert!(hr_at_k(1, 0).is_err());
    assert!(mrr(0).is_err());
}

fn random_table(items: usize, d: usize, rng: &mut ChaCha8Rng) -> EmbeddingTable {
    let it = Array2::from_shape_simple_fn((items, d), || rng.sample::<f32, _>(StandardNormal));
    EmbeddingTable::new("t", Array2::zeros((1, d)), it).unwrap()
}

#[test]
fn random_vectors_give_uniform_ranks() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let table = random_table(1000, 8, &mut rng);
    let trials = 2000;
    let (mut sum, mut hits10, mut hits20) = (0.0, 0.0, 0.0);
    for _ in 0..trials {
        let u: Vec<f64> = (0..8).map(|_| rng.sample(StandardNormal)).collect();
        let pos = rng.gen_range(0..1000);
        let negs: Vec<usize> = (0..1000).filter(|&j| j != pos).collect();
        let r = positive_rank(&u, &table, pos, &negs).unwrap();
        sum += r as f64;
        hits10 += hr_at_k(r, 10).unwrap();
        hits20 += hr_at_k(r, 20).unwrap();
    }
    let mean = sum / trials as f64;
    assert!((mean - 500.5).abs() < 0.05 * 500.5, "mean rank {mean}");
    let (h10, h20) = (hits10 / trials as f64, hits20 / trials as f64);
    assert!((h10 - 0.01).abs() < 0.007, "hr@10 {h10}");
    assert!((h20 - 0.02).abs() < 0.01, "hr@20 {h20}");
}

#[test]
fn ties_follow_item_order() {
    let t = EmbeddingTable::new("t", Array2::zeros((1, 2)), Array2::zeros((6, 2))).unwrap();
    let u = [1.0, 1.0];
    assert_eq!(positive_rank(&u, &t, 3, &[0, 1, 2, 4, 5]).unwrap(), 4);
    assert_eq!(rank_candidates(&u, &t, &[5, 3, 0], 3).unwrap(), vec![0, 3, 5]);
    assert!(matches!(rank_candidates(&u, &t, &[5, 3], 3), Err(cdr_core::Error::CandidateCount { .. })));
}

proptest! {
    #[test]
    fn aggregates_are_means_and_ordered(ranks in prop::collection::vec(1usize..40, 1..60)) {
        let ks = [1, 5, 10, 20];
        let m = RankingMetrics::from_ranks(&ranks, &ks).unwrap();
        let n = ranks.len() as f64;
        for &k in &ks {
            let hr = ranks.iter().map(|&r| hr_at_k(r, k).unwrap()).sum::<f64>() / n;
            let nd = ranks.iter().map(|&r| ndcg_at_k(r, k).unwrap()).sum::<f64>() / n;
            prop_assert!((m.hr_at(k) - hr).abs() < 1e-12);
            prop_assert!((m.ndcg_at(k) - nd).abs() < 1e-12);
            prop_assert!(m.ndcg_at(k) <= m.hr_at(k) + 1e-15);
            prop_assert!((0.0..=1.0).contains(&m.hr_at(k)));
        }
        for w in ks.windows(2) {
            prop_assert!(m.hr_at(w[0]) <= m.hr_at(w[1]));
        }
        let mrr_direct = ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n;
        prop_assert!((m.mrr - mrr_direct).abs() < 1e-12);
        prop_assert_eq!(m.n_users, ranks.len());
        // with the cutoff at the candidate count every hit counts
        let all = RankingMetrics::from_ranks(&ranks, &[40]).unwrap();
        prop_assert!(all.mrr <= all.hr_at(40));
    }

    #[test]
    fn kl_of_a_set_with_itself_is_zero(seed in 0u64..500, rows in 2usize..30, cols in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = gaussian(rows, cols, &mut rng);
        prop_assert_eq!(kl_disentanglement(a.view(), a.view()).unwrap().kl_divergence, 0.0);
    }

    #[test]
    fn distance_is_nonnegative_and_zero_on_itself(seed in 0u64..500, rows in 1usize..20) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (gaussian(rows, 3, &mut rng), gaussian(rows, 3, &mut rng));
        prop_assert!(avg_latent_distance(a.view(), b.view()).unwrap() >= 0.0);
        prop_assert_eq!(avg_latent_distance(a.view(), a.view()).unwrap(), 0.0);
    }
}

#[test]
fn kl_and_distance_examples() {
    let a = array![[0.0], [2.0], [-2.0], [0.0]];
    let b = &a + 2.0;
    // unit... variance 2 in both sets, mean gap 2: 2 * (4 / (2 * 2)) / 2 = 1
    let kl = kl_disentanglement(a.view(), b.view()).unwrap().kl_divergence;
    assert!((kl - 1.0).abs() < 1e-12, "{kl}");
    let shifted = &a + 1.0;
    assert!((avg_latent_distance(a.view(), shifted.view()).unwrap() - 1.0).abs() < 1e-15);
    assert!(avg_latent_distance(a.view(), array![[1.0, 2.0]].view()).is_err());
    let constant = array![[1.0, 0.0], [1.0, 1.0]];
    assert!(kl_disentanglement(constant.view(), constant.view()).unwrap().floored_dims > 0);
}

/// Scoring with the generator's own latents ranks every held-out positive
/// above all non-positives.
#[test]
fn oracle_transfer_reaches_the_upper_bound() {
    let cfg = SyntheticConfig { items_per_domain: 1200, ..Default::default() };
    let (ds, truth) = generate_synthetic(&cfg, 1).unwrap();
    let x = filter_min_counts(&ds[0], 1, 1).unwrap();
    let y = filter_min_counts(&ds[1], 1, 1).unwrap();
    let split = prepare_split(&x, &y, &SplitSettings::default(), 1).unwrap();
    let latent_table = |d: &cdr_core::dataset::InteractionDataset, k: usize| {
        let lat = &truth.domains[k];
        let items: Vec<f32> = d
            .item_ids()
            .iter()
            .flat_map(|id| lat.item_latents[lat.item_ids.iter().position(|i| i == id).unwrap()].iter().map(|&v| v as f32))
            .collect();
        let dim = lat.item_latents[0].len();
        EmbeddingTable::new(d.domain_id(), Array2::zeros((1, dim)), Array2::from_shape_vec((d.num_items(), dim), items).unwrap()).unwrap()
    };
    let (tx, ty) = (latent_table(&x, 0), latent_table(&y, 1));
    let report = evaluate_cold_start(&split, (&tx, &ty), &[10, 20], Cohort::Test, |dir, r| {
        let target = if dir == Direction::XToY { 1 } else { 0 };
        Ok(truth.domains[target].user_latent(&r.user_id).unwrap().to_vec())
    })
    .unwrap();
    assert!(report.macro_avg.hr_at(10) >= 0.9, "{:?}", report.macro_avg);
    let random = evaluate_cold_start(&split, (&tx, &ty), &[10], Cohort::Test, |_, r| {
        let mut rng = ChaCha8Rng::seed_from_u64(r.source_user as u64);
        Ok((0..tx.dim()).map(|_| rng.sample(StandardNormal)).collect())
    })
    .unwrap();
    assert!(random.macro_avg.hr_at(10) < 0.1);
}

#[test]
fn evaluation_is_read_only_and_thread_count_invariant() {
    let cfg = SyntheticConfig { users_per_domain: 300, items_per_domain: 1100, ..Default::default() };
    let (ds, _) = generate_synthetic(&cfg, 2).unwrap();
    let split = prepare_split(&ds[0], &ds[1], &SplitSettings::default(), 2).unwrap();
    let bpr = BprHyper { dim: 8, epochs: 3, ..Default::default() };
    let (tx, ty) = pretrain_backbones(&ds[0], &ds[1], &split, &bpr, 2).unwrap();
    let ah = AdapterHyper { max_epochs: 2, ..Default::default() };
    let mh = MappingHyper { max_epochs: 2, ..Default::default() };
    for method in Method::ALL {
        let (model, _) = train_model(method, (&tx, &ty), &split, &ah, &mh, 2).unwrap();
        let before = (format!("{model:?}"), serde_json::to_string(&split).unwrap(), tx.content_hash(), ty.content_hash());
        let run = |threads| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| evaluate_model(&model, (&tx, &ty), &split, &[10, 20], Cohort::Test).unwrap())
        };
        let (one, four) = (run(1), run(4));
        assert_eq!(one, four);
        let after = (format!("{model:?}"), serde_json::to_string(&split).unwrap(), tx.content_hash(), ty.content_hash());
        assert_eq!(before, after);
    }
}
