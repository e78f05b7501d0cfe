use proptest::prelude::*;

use dpn::diffcore::{softmax, Graph};
use dpn::envs::{generate, step, Action, EnvConfig, Observation};
use dpn::model::{Distance, DpnModel, ModelConfig};
use dpn::planner::{classify_selections, plan, Anchor, BranchingMode, Pattern, PlanTrace, RecordingNoise, ReplayNoise};
use dpn::rng::stream_rng;
use dpn::trainer::n_step_returns;

fn action() -> impl Strategy<Value = Action> {
    (0usize..4).prop_map(|i| Action::from_index(i).unwrap())
}

fn env() -> impl Strategy<Value = EnvConfig> {
    prop_oneof![
        (6usize..=12, 1usize..=2).prop_map(|(size, goals)| EnvConfig {
            size,
            goals,
            ..EnvConfig::gridworld()
        }),
        Just(EnvConfig::push()),
    ]
}

fn mode() -> impl Strategy<Value = BranchingMode> {
    prop_oneof![Just(BranchingMode::All), Just(BranchingMode::Current), Just(BranchingMode::Reset)]
}

fn anchor() -> impl Strategy<Value = Anchor> {
    (0usize..3).prop_map(|i| Anchor::from_index(i).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_respect_their_limits(cfg in env(), seed in 0u64..10_000, actions in prop::collection::vec(action(), 1..120)) {
        let mut s = generate(&cfg, seed).unwrap();
        let boxes = s.boxes.len();
        let mut consumed = 0;
        for a in actions {
            let out = step(&s, a, &cfg).unwrap();
            prop_assert!(out.state.goals.is_subset(&s.goals));
            consumed += s.goals.len() - out.state.goals.len();
            prop_assert_eq!(out.state.boxes.len() + if cfg.boxes > 0 { consumed } else { 0 }, boxes);
            prop_assert!(out.state.steps_taken <= cfg.step_limit);
            prop_assert!(s.in_bounds(out.state.agent));
            s = out.state;
            if out.done {
                prop_assert!(step(&s, a, &cfg).is_err());
                break;
            }
        }
    }

    #[test]
    fn observation_encodes_every_entity(cfg in env(), seed in 0u64..10_000) {
        let s = generate(&cfg, seed).unwrap();
        let d = Observation::encode(&s).decode();
        prop_assert_eq!(d.agent, Some(s.agent));
        prop_assert_eq!(&d.goals, &s.goals);
        prop_assert_eq!(&d.obstacles, &s.obstacles);
        prop_assert_eq!(&d.boxes, &s.boxes);
    }

    #[test]
    fn generation_is_a_function_of_the_seed(cfg in env(), seed in any::<u64>()) {
        prop_assert_eq!(generate(&cfg, seed).unwrap(), generate(&cfg, seed).unwrap());
    }

    #[test]
    fn plans_replay_and_round_trip(seed in 0u64..1000, horizon in 1usize..5, mode in mode(), z in prop::collection::vec(-1.0f64..1.0, 5)) {
        let mut cfg = ModelConfig::new(4, 4);
        cfg.conv_channels = 2;
        cfg.conv_layers = 1;
        cfg.z_dim = 5;
        cfg.h_outer = 4;
        cfg.h_inner = 4;
        let model = DpnModel::new(cfg);
        let params = model.init_params(&mut stream_rng(seed, 0));
        let mut rng = stream_rng(seed, 1);

        let mut g = Graph::inference(&params);
        let z0 = g.vector(z.clone());
        let mut rec = RecordingNoise::new(&mut rng);
        let first = plan(&mut g, &model, z0, horizon, mode, Distance::L1, &mut rec).unwrap();
        let draws = rec.draws;

        let mut g2 = Graph::inference(&params);
        let z0 = g2.vector(z);
        let mut replay = ReplayNoise::new(&draws);
        let second = plan(&mut g2, &model, z0, horizon, mode, Distance::L1, &mut replay).unwrap();
        prop_assert!(replay.exhausted());
        prop_assert_eq!(&first.trace, &second.trace);

        let line = first.trace.to_line().unwrap();
        prop_assert_eq!(PlanTrace::from_line(&line).unwrap(), first.trace);
    }

    #[test]
    fn pattern_depends_only_on_later_selections(first in anchor(), rest in prop::collection::vec(anchor(), 1..6)) {
        let mut sel = vec![first];
        sel.extend(&rest);
        let p = classify_selections(&sel).unwrap();
        let expected = if rest.iter().all(|a| *a == Anchor::Root) {
            Pattern::BreadthFirst
        } else if rest.iter().all(|a| *a == Anchor::Current) {
            Pattern::DepthFirst
        } else {
            Pattern::Mixed
        };
        prop_assert_eq!(p, expected);
    }

    #[test]
    fn n_step_returns_match_a_forward_sum(rewards in prop::collection::vec(-1.0f64..1.0, 1..12), done_mask in any::<u16>(), bootstrap in -2.0f64..2.0, gamma in 0.5f64..1.0) {
        let dones: Vec<bool> = (0..rewards.len()).map(|i| done_mask >> i & 1 == 1).collect();
        let got = n_step_returns(&rewards, &dones, bootstrap, gamma);
        for t in 0..rewards.len() {
            let mut acc = 0.0;
            let mut discount = 1.0;
            let mut cut = false;
            for k in t..rewards.len() {
                acc += discount * rewards[k];
                discount *= gamma;
                if dones[k] {
                    cut = true;
                    break;
                }
            }
            if !cut {
                acc += discount * bootstrap;
            }
            prop_assert!((got[t] - acc).abs() < 1e-9, "t={} {} vs {}", t, got[t], acc);
        }
    }

    #[test]
    fn softmax_is_a_distribution(x in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let p = softmax(&x);
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|v| *v >= 0.0));
    }
}
