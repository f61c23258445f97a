use nblend::defense::{
    gumbel_top_m, logits, privacy_ratio_audit, select, subset_distribution, top_m, SamplerMode,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn utilities(max_len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0f64..=0.0, 2..=max_len)
}

fn inclusion(dist: &std::collections::BTreeMap<Vec<usize>, f64>, i: usize) -> f64 {
    dist.iter().filter(|(s, _)| s.contains(&i)).map(|(_, p)| p).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn distributions_are_normalized(u in utilities(6), m in 1usize..=3, eps in 0.0f64..20.0) {
        let m = m.min(u.len());
        for mode in [SamplerMode::Gumbel, SamplerMode::ExactEm] {
            let total: f64 = subset_distribution(&u, m, eps, 2.0, mode).unwrap().values().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn single_draw_modes_coincide(u in utilities(6), eps in 0.0f64..20.0) {
        let g = subset_distribution(&u, 1, eps, 2.0, SamplerMode::Gumbel).unwrap();
        let e = subset_distribution(&u, 1, eps, 2.0, SamplerMode::ExactEm).unwrap();
        for (s, p) in &g {
            prop_assert!((p - e[s]).abs() < 1e-12);
        }
    }

    #[test]
    fn higher_utility_is_included_more_often(u in utilities(6), m in 1usize..=3, eps in 0.1f64..20.0) {
        let m = m.min(u.len());
        for mode in [SamplerMode::Gumbel, SamplerMode::ExactEm] {
            let d = subset_distribution(&u, m, eps, 2.0, mode).unwrap();
            for i in 0..u.len() {
                for j in 0..u.len() {
                    if u[i] > u[j] {
                        prop_assert!(inclusion(&d, i) >= inclusion(&d, j) - 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn exact_mechanism_respects_epsilon(
        u in utilities(6),
        m in 1usize..=3,
        k in 0usize..6,
        replacement in -2.0f64..=0.0,
        eps in 0.01f64..8.0,
    ) {
        let m = m.min(u.len());
        let k = k % u.len();
        let ratio = privacy_ratio_audit(&u, (k, replacement), m, eps, 2.0, SamplerMode::ExactEm).unwrap();
        prop_assert!(ratio <= eps + 1e-9, "ratio {} > eps {}", ratio, eps);
    }

    #[test]
    fn sampled_sets_are_sorted_and_distinct(u in utilities(8), m in 1usize..=4, seed in any::<u64>()) {
        let m = m.min(u.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for mode in [SamplerMode::Gumbel, SamplerMode::ExactEm] {
            let s = select(&u, m, 1.0, 2.0, mode, &mut rng).unwrap();
            prop_assert_eq!(s.len(), m);
            prop_assert!(s.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(s.iter().all(|&i| i < u.len()));
        }
    }
}

#[test]
fn zero_epsilon_is_uniform() {
    let u = [-0.1, -1.9, -0.7, -1.2, -0.3];
    for mode in [SamplerMode::Gumbel, SamplerMode::ExactEm] {
        let d = subset_distribution(&u, 2, 0.0, 2.0, mode).unwrap();
        assert_eq!(d.len(), 10);
        assert!(d.values().all(|p| (p - 0.1).abs() < 1e-12));
    }
}

#[test]
fn infinite_epsilon_is_deterministic_top_m() {
    let u = [-0.1, -1.9, -0.7, -1.2, -0.3];
    let best = top_m(&u, 2).unwrap();
    assert_eq!(best, vec![0, 4]);
    for mode in [SamplerMode::Gumbel, SamplerMode::ExactEm] {
        let d = subset_distribution(&u, 2, f64::INFINITY, 2.0, mode).unwrap();
        assert_eq!(d[&best], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert_eq!(select(&u, 2, f64::INFINITY, 2.0, mode, &mut rng).unwrap(), best);
    }
}

#[test]
fn growing_epsilon_concentrates_on_the_best_set() {
    let u = [-0.1, -1.9, -0.7, -1.2, -0.3];
    let best = top_m(&u, 2).unwrap();
    let mut last = 0.0;
    for eps in [0.0, 0.5, 2.0, 8.0, 32.0, 128.0] {
        let p = subset_distribution(&u, 2, eps, 2.0, SamplerMode::ExactEm).unwrap()[&best];
        assert!(p > last, "eps {eps}: {p} <= {last}");
        last = p;
    }
    assert!(last > 0.99);
}

#[test]
fn gumbel_frequencies_track_the_marginal() {
    let u = [-0.1, -1.9, -0.7, -1.2];
    let oracle = subset_distribution(&u, 2, 4.0, 2.0, SamplerMode::Gumbel).unwrap();
    let phi = logits(&u, 4.0, 2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let draws = 100_000;
    let mut counts = std::collections::BTreeMap::<Vec<usize>, usize>::new();
    for _ in 0..draws {
        *counts
            .entry(gumbel_top_m(&phi, 2, &mut rng).unwrap())
            .or_default() += 1;
    }
    let tv: f64 = 0.5
        * oracle
            .iter()
            .map(|(s, p)| (*counts.get(s).unwrap_or(&0) as f64 / draws as f64 - p).abs())
            .sum::<f64>();
    assert!(tv < 0.01, "total variation {tv}");
}
