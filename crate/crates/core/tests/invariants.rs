//! Model-level invariants over random graphs, parameters and prefixes.

use proptest::prelude::*;

use mbsr::autograd::{Tape, Tensor};
use mbsr::context::context_attend;
use mbsr::encoder::relation_attention;
use mbsr::params::{Checkpoint, ModelParams};
use mbsr::scope::Scope;
use mbsr::sessions::{augment_prefixes, IndexedSession};
use mbsr::train::train;
use mbsr::{Execution, GlobalGraph, Model, ModelConfig, NextBehavior, Task, WeightTransform};

const N_ITEMS: usize = 8;

fn behaviors(nb: usize) -> Vec<String> {
    (0..nb).map(|b| format!("b{b}")).collect()
}

fn corpus(nb: usize) -> impl Strategy<Value = Vec<IndexedSession>> {
    prop::collection::vec(prop::collection::vec((0..N_ITEMS, 0..nb), 2..7), 1..8).prop_map(|ss| {
        ss.into_iter()
            .enumerate()
            .map(|(i, events)| IndexedSession { session_id: i.to_string(), events })
            .collect()
    })
}

fn graph(sessions: &[IndexedSession], nb: usize) -> GlobalGraph {
    GlobalGraph::build(sessions, N_ITEMS, &behaviors(nb), 12, Execution::Sequential).unwrap()
}

fn model(nb: usize, d: usize, seed: u64, std: f64, f: impl FnOnce(&mut ModelConfig)) -> Model {
    let mut config = ModelConfig { d, seed, init_std: std, ..Default::default() };
    f(&mut config);
    Model::new(config, N_ITEMS, nb).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn relation_attention_is_a_distribution(
        sessions in corpus(2), seed in 0u64..1000, std in 0.05f64..2.0, raw in any::<bool>(),
    ) {
        let g = graph(&sessions, 2);
        let m = model(2, 4, seed, std, |_| {});
        let transform = if raw { WeightTransform::Raw } else { WeightTransform::Log1p };
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, m.params(), false);
        let h = s.param(m.params().layout().item_emb);
        let mut found = Vec::new();
        for (r, ids) in m.params().layout().layers[0].relations.iter().enumerate() {
            if let Some(a) = relation_attention(&mut s, ids, g.relation(r), h, transform).unwrap() {
                found.push((r, a.weights));
            }
        }
        for (r, w) in found {
            let alpha = tape.value(w).data();
            for seg in g.relation(r).offsets.windows(2).filter(|w| w[0] < w[1]) {
                let part = &alpha[seg[0]..seg[1]];
                prop_assert!(part.iter().all(|&a| a > 0.0));
                prop_assert!((part.iter().sum::<f64>() - 1.0).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn context_output_stays_in_neighbor_hull(
        seed in 0u64..1000,
        neighbors in prop::collection::vec(prop::collection::vec(0..N_ITEMS, 0..5), 1..5),
        hg in prop::collection::vec(-3.0f64..3.0, N_ITEMS * 3),
        c in prop::collection::vec(-1.0f64..1.0, 12),
    ) {
        let params = ModelParams::init(
            mbsr::params::Dims { n_items: N_ITEMS, n_behaviors: 2, d: 3, layers: 1, max_len: 8 }, 0.5, seed,
        ).unwrap();
        let (w_l, w_g) = (params.layout().w_l, params.layout().w_g);
        let hg = Tensor::new(N_ITEMS, 3, hg).unwrap();
        let len = neighbors.len();
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &params, false);
        let cv = s.tape.constant(Tensor::new(len, 3, c[..len * 3].to_vec()).unwrap());
        let hv = s.tape.constant(hg.clone());
        let out = context_attend(&mut s, w_l, w_g, cv, &neighbors, hv).unwrap();
        let out = tape.value(out);
        for (t, ns) in neighbors.iter().enumerate() {
            for k in 0..3 {
                let v = out.get(t, k);
                if ns.is_empty() {
                    prop_assert_eq!(v, 0.0);
                } else {
                    let lo = ns.iter().map(|&j| hg.get(j, k)).fold(f64::INFINITY, f64::min);
                    let hi = ns.iter().map(|&j| hg.get(j, k)).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn predictions_are_distributions(
        sessions in corpus(3), seed in 0u64..1000, std in 0.05f64..3.0, layers in 0usize..3,
        beta in prop_oneof![Just(0.0), 0.01f64..1.0], given in prop::option::of(0usize..3),
    ) {
        let g = graph(&sessions, 3);
        let m = model(3, 4, seed, std, |c| { c.layers = layers; c.beta = beta; });
        let hg = m.global_representations(&g).unwrap();
        let next = given.map_or(NextBehavior::Predicted, NextBehavior::Given);
        for s in &sessions {
            let p = m.predict(&g, &hg, &s.events[..s.events.len() - 1], next).unwrap();
            for dist in [&p.item_scores, &p.behavior_scores] {
                prop_assert!(dist.iter().all(|&x| x >= 0.0));
                prop_assert!((dist.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
            if let Some(b) = given {
                prop_assert_eq!(p.chosen_behavior, b);
            }
        }
    }

    #[test]
    fn task_heads_agree_given_the_true_behavior(sessions in corpus(2), seed in 0u64..1000) {
        let g = graph(&sessions, 2);
        let t2 = model(2, 4, seed, 0.5, |c| c.task = Task::Task2);
        let mut cfg1 = t2.config().clone();
        cfg1.task = Task::Task1;
        let t1 = Model::from_parts(cfg1, t2.params().clone()).unwrap();
        let hg = t2.global_representations(&g).unwrap();
        for s in &sessions {
            let (prefix, next) = s.events.split_at(s.events.len() - 1);
            let given = NextBehavior::Given(next[0].1);
            let a = t1.predict(&g, &hg, prefix, given).unwrap();
            let b = t2.predict(&g, &hg, prefix, given).unwrap();
            prop_assert_eq!(a.item_logits, b.item_logits);
        }
    }
}

#[test]
fn checkpoint_file_reproduces_predictions() {
    let sessions = vec![
        IndexedSession { session_id: "a".into(), events: vec![(0, 0), (3, 0), (5, 1), (2, 0)] },
        IndexedSession { session_id: "b".into(), events: vec![(5, 0), (0, 1), (7, 0)] },
    ];
    let g = graph(&sessions, 2);
    let m = model(2, 6, 9, 0.4, |c| c.layers = 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    m.to_checkpoint().write(&path).unwrap();
    let back = Model::from_checkpoint(Checkpoint::read(&path).unwrap()).unwrap();
    assert_eq!(back.params(), m.params());
    let (ha, hb) = (m.global_representations(&g).unwrap(), back.global_representations(&g).unwrap());
    let prefix = &sessions[0].events[..3];
    assert_eq!(
        m.predict(&g, &ha, prefix, NextBehavior::Predicted).unwrap(),
        back.predict(&g, &hb, prefix, NextBehavior::Predicted).unwrap()
    );
}

#[test]
fn training_is_identical_across_execution_modes() {
    let sessions: Vec<IndexedSession> = (0..12)
        .map(|i| IndexedSession {
            session_id: i.to_string(),
            events: (0..5).map(|t| ((i * 3 + t * 5) % N_ITEMS, usize::from(t == 4))).collect(),
        })
        .collect();
    let g = graph(&sessions, 2);
    let examples = augment_prefixes(&sessions, 8);
    let (valid, train_set) = examples.split_at(8);
    let run = |execution| {
        let config = ModelConfig { d: 6, epochs: 2, batch_size: 7, lr: 0.01, seed: 4, execution, ..Default::default() };
        train(train_set, valid, &g, &config, |_| {}).unwrap()
    };
    let (a, b) = (run(Execution::Sequential), run(Execution::Parallel));
    assert_eq!(a.model.params(), b.model.params());
    assert_eq!(a.log, b.log);
    assert_eq!(a.best_epoch, b.best_epoch);
}
