mod common;

use proptest::prelude::*;

use sincadapt::nnet::BnMode;
use sincadapt::optim::{Adam, ParamGroup};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn frozen_groups_never_move(seed in 0u64..1000, steps in 1usize..5, mask in any::<u16>()) {
        let mut m = common::gradcheck_model(seed);
        let base = m.clone();
        let frames = common::random_frames(seed, 3, 3200);
        let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
        let labels = [0, 1, 2];
        let groups: Vec<ParamGroup> = m
            .groups()
            .into_iter()
            .filter(|g| g.kind.is_trainable())
            .enumerate()
            .map(|(i, g)| ParamGroup { frozen: mask & (1 << (i % 16)) != 0, ..ParamGroup::new(g.name, 0.01) })
            .collect();
        let mut adam = Adam::default();
        for _ in 0..steps {
            let (_, grads, _) = m.loss_and_grad(&refs, &labels, BnMode::Eval, |_| true).unwrap();
            adam.step(&mut m, &grads, &groups).unwrap();
        }
        for g in &groups {
            let same = m.group_values(&g.name).unwrap() == base.group_values(&g.name).unwrap();
            if g.frozen {
                prop_assert!(same, "frozen {} moved", g.name);
                prop_assert!(!adam.state.moments.contains_key(&g.name));
            } else {
                prop_assert!(!same, "{} did not move", g.name);
            }
        }
        for g in m.groups().into_iter().filter(|g| !g.kind.is_trainable()) {
            prop_assert_eq!(m.group_values(&g.name).unwrap(), base.group_values(&g.name).unwrap());
        }
    }

    #[test]
    fn equal_inputs_give_identical_trajectories(seed in 0u64..1000) {
        let frames = common::random_frames(seed, 3, 3200);
        let refs: Vec<&[f64]> = frames.iter().map(|f| f.as_slice()).collect();
        let run = || {
            let mut m = common::gradcheck_model(seed);
            let groups: Vec<ParamGroup> = m
                .groups()
                .into_iter()
                .filter(|g| g.kind.is_trainable())
                .map(|g| ParamGroup::new(g.name, 0.005))
                .collect();
            let mut adam = Adam::default();
            for _ in 0..3 {
                let (_, grads, _) = m.loss_and_grad(&refs, &[3, 2, 1], BnMode::Frozen, |_| true).unwrap();
                adam.step(&mut m, &grads, &groups).unwrap();
            }
            (m, adam.state)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        prop_assert_eq!(a, b);
        prop_assert_eq!(sa, sb);
    }
}
