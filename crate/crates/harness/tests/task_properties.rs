use nirvana_harness::tasks::{gen_task, Alphabet, Task, TaskKind, TaskSpec, BOS, SEP};
use proptest::prelude::*;

/// Recovers the supervised positions and their answers from the token stream
/// alone: a query is any token after the last separator whose answer is the
/// token that followed its first occurrence.
fn parse(kind: TaskKind, tokens: &[usize]) -> Vec<(usize, usize)> {
    let sep = tokens.iter().rposition(|t| *t == SEP).expect("separator");
    match kind {
        TaskKind::Copy => (sep..tokens.len() - 1).map(|p| (p, tokens[p - sep + 1])).collect(),
        TaskKind::AssocRecall | TaskKind::SNiahToy => (sep + 1..tokens.len())
            .step_by(2)
            .map(|p| {
                let first = tokens.iter().position(|t| *t == tokens[p]).expect("present");
                (p, tokens[first + 1])
            })
            .collect(),
    }
}

fn supervised(t: &Task) -> Vec<(usize, usize)> {
    (0..t.tokens.len()).filter(|p| t.answer_mask[*p]).map(|p| (p, t.answers[p])).collect()
}

fn spec_strategy() -> impl Strategy<Value = TaskSpec> {
    (
        prop_oneof![Just(TaskKind::AssocRecall), Just(TaskKind::SNiahToy), Just(TaskKind::Copy)],
        0usize..60,
        1usize..6,
        0.0f64..5.0,
        any::<u64>(),
    )
        .prop_map(|(kind, extra, n_pairs, filler_entropy, seed)| TaskSpec {
            kind,
            vocab: 32,
            seq_len: 4 * n_pairs + 2 + extra,
            n_pairs,
            filler_entropy,
            seed,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn answers_round_trip_through_an_independent_parser(spec in spec_strategy()) {
        let t = gen_task(&spec).unwrap();
        prop_assert_eq!(t.tokens.len(), spec.seq_len - usize::from(spec.kind == TaskKind::Copy && spec.seq_len % 2 == 1));
        prop_assert_eq!(t.tokens[0], BOS);
        prop_assert_eq!(parse(spec.kind, &t.tokens), supervised(&t));
        prop_assert!(t.tokens.iter().all(|x| *x < spec.vocab));
    }

    #[test]
    fn queries_follow_their_evidence(spec in spec_strategy()) {
        let t = gen_task(&spec).unwrap();
        for (p, _) in supervised(&t) {
            if spec.kind != TaskKind::Copy {
                let first = t.tokens.iter().position(|x| *x == t.tokens[p]).unwrap();
                prop_assert!(first + 1 < p);
            }
            prop_assert!(t.answer_mask[p]);
        }
    }

    #[test]
    fn filler_never_uses_key_or_value_tokens(spec in spec_strategy()) {
        prop_assume!(spec.kind != TaskKind::Copy);
        let a = Alphabet::for_spec(&spec).unwrap();
        let t = gen_task(&spec).unwrap();
        let keys = t.tokens.iter().filter(|x| (a.keys.0..a.keys.1).contains(*x)).count();
        let values = t.tokens.iter().filter(|x| (a.values.0..a.values.1).contains(*x)).count();
        let expected = match spec.kind {
            TaskKind::AssocRecall => 2 * spec.n_pairs,
            _ => 2,
        };
        prop_assert_eq!(keys, expected);
        prop_assert_eq!(values, expected);
    }
}

#[test]
fn same_seed_same_bytes() {
    for kind in [TaskKind::AssocRecall, TaskKind::SNiahToy, TaskKind::Copy] {
        let spec = TaskSpec {
            kind,
            seed: 77,
            ..TaskSpec::default()
        };
        let a = serde_json::to_vec(&gen_task(&spec).unwrap()).unwrap();
        let b = serde_json::to_vec(&gen_task(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = gen_task(&TaskSpec { seed: 78, ..spec }).unwrap();
        assert_ne!(serde_json::to_vec(&other).unwrap(), a);
    }
}

#[test]
fn reference_recall_layout() {
    let t = gen_task(&TaskSpec::default()).unwrap();
    assert_eq!(t.tokens.len(), 128);
    assert_eq!(t.n_supervised(), 8);
    let sep = t.tokens.iter().position(|x| *x == SEP).unwrap();
    assert_eq!(sep, 128 - 17);
}

#[test]
fn zero_entropy_filler_is_constant() {
    let spec = TaskSpec {
        filler_entropy: 0.0,
        ..TaskSpec::default()
    };
    let t = gen_task(&spec).unwrap();
    let a = Alphabet::for_spec(&spec).unwrap();
    assert_eq!(a.filler.1 - a.filler.0, 1);
    assert!(t.tokens[17..111].iter().all(|x| *x == a.filler.0));
}
