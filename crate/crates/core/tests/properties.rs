use cldc::action_repr::{adapt_structure, decode, EncoderDecoder, ReprConfig};
use cldc::baselines::Reservoir;
use cldc::envs::{self, ActionSpace, Family, GridConfig, TaskSpec};
use cldc::metrics::{continual_return, forgetting, forward_transfer, PerfMatrix};
use cldc::rng;
use proptest::prelude::*;

fn task(family: Family, w: usize, h: usize, k: usize) -> TaskSpec {
    TaskSpec {
        index: 1,
        family,
        grid: GridConfig::new(w, h, family),
        space: ActionSpace::prefix(family.catalog(), k).unwrap(),
        train_steps: 0,
    }
}

fn family() -> impl Strategy<Value = Family> {
    prop_oneof![Just(Family::Oriented), Just(Family::Omni)]
}

/// Plays `choices` (wrapped onto the active actions) and returns the visited
/// states and the raw return.
fn play(t: &TaskSpec, seed: u64, choices: &[usize]) -> (Vec<envs::GridState>, f64) {
    let (mut s, _) = envs::env_reset(t, seed).unwrap();
    let acts: Vec<usize> = t.space.indices().collect();
    let mut trace = vec![s];
    let mut ret = 0.0;
    for c in choices.iter().cycle() {
        if s.done {
            break;
        }
        let out = envs::env_step(&s, acts[c % acts.len()], t).unwrap();
        ret += out.reward;
        s = out.state;
        trace.push(s);
    }
    (trace, ret)
}

fn matrix(n: usize, flat: &[f64]) -> PerfMatrix {
    PerfMatrix::from_rows(flat.chunks(n).take(n + 1).map(|r| r.to_vec()).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn episodes_are_deterministic_and_returns_bounded(
        fam in family(),
        w in 3usize..7,
        h in 3usize..7,
        size in 0usize..3,
        seed in any::<u64>(),
        choices in prop::collection::vec(0usize..9, 1..40),
    ) {
        let t = task(fam, w, h, fam.sizes()[size]);
        let (a, ra) = play(&t, seed, &choices);
        let (b, rb) = play(&t, seed, &choices);
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(ra.to_bits(), rb.to_bits());
        prop_assert!((0.0..=1.0).contains(&ra));
        for s in &a {
            prop_assert!(s.pos.0 >= 0 && (s.pos.0 as usize) < w && s.pos.1 >= 0 && (s.pos.1 as usize) < h);
            prop_assert!(s.t <= t.grid.max_steps);
        }
    }

    #[test]
    fn inactive_actions_are_rejected(fam in family(), seed in any::<u64>()) {
        let t = task(fam, 4, 4, fam.sizes()[0]);
        let (s, _) = envs::env_reset(&t, seed).unwrap();
        for a in 0..fam.catalog().len() {
            prop_assert_eq!(envs::env_step(&s, a, &t).is_ok(), t.space.contains(a));
        }
    }

    #[test]
    fn metrics_stay_in_range_and_match_resummation(
        n in 1usize..6,
        flat in prop::collection::vec(0.0f64..=1.0, 42),
    ) {
        let p = matrix(n, &flat);
        let r = continual_return(&p, n).unwrap();
        let oracle: f64 = flat[n * n..n * n + n].iter().sum::<f64>() / n as f64;
        prop_assert!((r - oracle).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&r));
        for m in [forgetting(&p).unwrap(), forward_transfer(&p).unwrap()] {
            for (_, v) in &m.per_task {
                prop_assert!((-1.0..=1.0).contains(v));
            }
            if let Some(mean) = m.mean {
                prop_assert!((-1.0..=1.0).contains(&mean));
            }
        }
        prop_assert_eq!(forgetting(&p).unwrap(), forgetting(&p).unwrap());
    }

    #[test]
    fn no_learning_means_no_forgetting_or_transfer(
        n in 1usize..6,
        row in prop::collection::vec(0.0f64..=1.0, 5),
    ) {
        let p = PerfMatrix::from_rows(vec![row[..n].to_vec(); n + 1]).unwrap();
        prop_assert!(forgetting(&p).unwrap().per_task.iter().all(|(_, v)| *v == 0.0));
        prop_assert!(forward_transfer(&p).unwrap().per_task.iter().all(|(_, v)| *v == 0.0));
    }

    #[test]
    fn decoded_distributions_are_valid(
        seed in any::<u64>(),
        e in prop::collection::vec(-3.0f64..3.0, 6),
        mask_bits in 1u8..128,
    ) {
        let cfg = ReprConfig { dim: 6, encoder_hidden: vec![4], ..ReprConfig::default() };
        let t = task(Family::Oriented, 3, 3, 7);
        let mut r = rng::substream(seed, "prop", 0);
        let mut state = EncoderDecoder::new(t.obs_len(), 7, &cfg, &mut r);
        adapt_structure(&mut state, &t.space, &mut r).unwrap();
        let active: Vec<bool> = (0..7).map(|i| mask_bits >> i & 1 == 1).collect();
        let p = decode(&state, &e, &active).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (pi, a) in p.iter().zip(&active) {
            if *a { prop_assert!(*pi > 0.0) } else { prop_assert_eq!(*pi, 0.0) }
        }
    }

    #[test]
    fn reservoir_keeps_a_bounded_subset_of_the_stream(
        capacity in 1usize..20,
        n in 0usize..100,
        seed in any::<u64>(),
    ) {
        let mut r = rng::substream(seed, "reservoir", 0);
        let mut res = Reservoir::new(capacity);
        for i in 0..n {
            res.insert(i, &mut r);
        }
        prop_assert_eq!(res.items.len(), n.min(capacity));
        let mut items = res.items.clone();
        items.sort_unstable();
        items.dedup();
        prop_assert_eq!(items.len(), n.min(capacity));
        prop_assert!(items.iter().all(|&i| i < n));
    }
}

#[test]
fn shared_actions_behave_identically_across_tasks() {
    for fam in [Family::Oriented, Family::Omni] {
        let small = task(fam, 4, 4, fam.sizes()[0]);
        let large = task(fam, 4, 4, fam.sizes()[2]);
        for x in 0..4 {
            for y in 0..4 {
                for dir in envs::Dir::ALL {
                    let s = envs::GridState { pos: (x, y), dir, goal: (3, 3), t: 0, done: false };
                    for a in small.space.indices() {
                        let a_out = envs::env_step(&s, a, &small).unwrap();
                        let b_out = envs::env_step(&s, a, &large).unwrap();
                        assert_eq!(a_out.state, b_out.state);
                        assert_eq!(a_out.reward, b_out.reward);
                    }
                }
            }
        }
    }
}
