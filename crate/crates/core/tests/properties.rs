use cvp_core::expansion::compositions;
use cvp_core::fragmentation::{split_mean_fluct, MultiJet};
use cvp_core::jet::Jet;
use cvp_core::lagrangian::LagrangianModel;
use cvp_core::linops::delta_ell;
use cvp_core::measure::DiscreteMeasure;
use cvp_core::mixing::{haar_unitary, mixing_functional};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn plane_measure() -> DiscreteMeasure {
    DiscreteMeasure::new(vec![vec![0.3, -0.2], vec![-0.1, 0.4], vec![0.5, 0.5]], vec![1.0, 0.7, 0.4]).unwrap()
}

fn jet_strategy(points: usize, dim: usize) -> impl Strategy<Value = Jet> {
    prop::collection::vec(-1.0f64..1.0, points * (1 + dim)).prop_map(move |d| Jet::from_flat(dim, d).unwrap())
}

fn binomial(n: usize, k: usize) -> usize {
    (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn delta_ell_is_symmetric_under_permutations(
        jets in prop::collection::vec(jet_strategy(3, 2), 4),
        order in 2usize..=4,
        shift in 0usize..4,
    ) {
        let lag = LagrangianModel::named("example52_regularized").unwrap();
        let rho = plane_measure();
        let refs: Vec<&Jet> = jets.iter().take(order).collect();
        let mut permuted = refs.clone();
        permuted.rotate_left(shift % order);
        permuted.swap(0, order - 1);
        let a = delta_ell(order, &refs, &rho, &lag, 0.3).unwrap();
        let b = delta_ell(order, &permuted, &rho, &lag, 0.3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn delta_ell_is_linear_in_each_slot(
        jets in prop::collection::vec(jet_strategy(3, 2), 4),
        extra in jet_strategy(3, 2),
        order in 1usize..=3,
        slot in 0usize..3,
        alpha in -2.0f64..2.0,
        beta in -2.0f64..2.0,
    ) {
        let lag = LagrangianModel::named("example52_regularized").unwrap();
        let rho = plane_measure();
        let slot = slot % order;
        let base: Vec<Jet> = jets.into_iter().take(order).collect();
        let combo = base[slot].scaled(alpha).add(&extra.scaled(beta)).unwrap();
        let with = |j: &Jet| {
            let refs: Vec<&Jet> = (0..order).map(|k| if k == slot { j } else { &base[k] }).collect();
            delta_ell(order, &refs, &rho, &lag, 0.0).unwrap()
        };
        let lhs = with(&combo);
        let first = with(&base[slot]);
        let second = with(&extra);
        for i in 0..rho.len() {
            let rhs = alpha * first[i] + beta * second[i];
            prop_assert!((lhs[i] - rhs).abs() <= 1e-10 * (1.0 + rhs.abs()));
        }
    }

    #[test]
    fn mean_and_fluctuation_reassemble(
        subsystems in 1usize..5,
        data in prop::collection::vec(-1.0f64..1.0, 5 * 2 * 3),
    ) {
        let jets: Vec<Jet> = (0..subsystems)
            .map(|a| Jet::from_flat(2, data[a * 6..a * 6 + 6].to_vec()).unwrap())
            .collect();
        let mj = MultiJet::new(jets).unwrap();
        let (mean, fluct) = split_mean_fluct(&mj);
        let replicated = MultiJet::replicated(&mean, subsystems);
        let back = replicated.add(&fluct).unwrap();
        for a in 0..subsystems {
            prop_assert!(back.jet(a).sub(mj.jet(a)).unwrap().max_abs() <= 1e-14);
        }
        let (fluct_mean, _) = split_mean_fluct(&fluct);
        prop_assert!(fluct_mean.max_abs() <= 1e-15);
        let round = MultiJet::from_flat(subsystems, &mj.flatten()).unwrap();
        prop_assert_eq!(round, mj);
    }

    #[test]
    fn composition_counts_are_binomial(p in 1usize..9, parts in 1usize..9) {
        prop_assume!(parts <= p);
        let all = compositions(p, parts).unwrap();
        prop_assert_eq!(all.len(), binomial(p - 1, parts - 1));
        prop_assert!(all.iter().all(|q| q.len() == parts && q.iter().sum::<usize>() == p && q.iter().all(|x| *x >= 1)));
        prop_assert!(all.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn push_forward_without_weight_change_keeps_volume(
        weights in prop::collection::vec(0.1f64..3.0, 3),
        shifts in prop::collection::vec(-0.05f64..0.05, 6),
    ) {
        let rho = DiscreteMeasure::new(vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 1.0]], weights).unwrap();
        let shift: Vec<Vec<f64>> = shifts.chunks(2).map(|c| c.to_vec()).collect();
        let pushed = rho.push_forward(&[0.0; 3], &shift).unwrap();
        prop_assert!((pushed.total_volume() - rho.total_volume()).abs() <= 1e-14);
    }

    #[test]
    fn jet_json_round_trip(jet in jet_strategy(4, 3)) {
        prop_assert_eq!(Jet::from_json(&jet.to_json()).unwrap(), jet);
    }

    #[test]
    fn mixing_functional_is_bounded_below(seed in any::<u64>(), subsystems in 2usize..5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = haar_unitary(subsystems, &mut rng);
        prop_assert!(mixing_functional(&u).unwrap() >= subsystems as f64 - 1e-10);
    }
}
