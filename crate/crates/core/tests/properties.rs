mod common;

use finemem_core::memory::{MemoryState, WhitespaceCounter};
use finemem_core::ops::{parse_manager_output, render_operations, Operation};
use finemem_core::retrieval::{tokenize, Bm25Params, RetrievalIndex};
use finemem_core::reward::{
    chunk_step_reward, compression_reward, compute_eara, compute_nec, global_reward,
    grpo_advantages, EvidenceRecord,
};
use proptest::prelude::*;

use common::{EventLogMemory, VOCABULARY};

fn operation() -> impl Strategy<Value = Operation> {
    let content = prop_oneof![
        1 => Just(" ".to_string()),
        9 => "[a-z]{1,6}( [a-z]{1,6}){0,3}",
    ];
    prop_oneof![
        4 => content.clone().prop_map(|content| Operation::Insert { content }),
        2 => (0u64..12, content).prop_map(|(id, content)| Operation::Update { id, content }),
        2 => (0u64..12).prop_map(|id| Operation::Delete { id }),
        1 => Just(Operation::Skip),
    ]
}

fn op_sets() -> impl Strategy<Value = Vec<Vec<Operation>>> {
    prop::collection::vec(prop::collection::vec(operation(), 0..5), 1..10)
}

fn replay(sets: &[Vec<Operation>]) -> MemoryState {
    let mut state = MemoryState::new();
    for (t, ops) in sets.iter().enumerate() {
        state.apply_operation_set(ops, t).unwrap();
    }
    state
}

/// Evidence with non-empty retrieval sets over `steps` steps.
fn evidence(steps: usize) -> impl Strategy<Value = Vec<EvidenceRecord>> {
    let record = (0.0f64..=1.0, prop::collection::vec(0u64..40, 1..8));
    prop::collection::vec(record, 1..50).prop_map(move |rows| {
        rows.into_iter()
            .enumerate()
            .map(|(j, (score, ids))| EvidenceRecord {
                question_index: j,
                score,
                origin_steps: ids.iter().map(|&id| (id as usize * 13 + 5) % steps).collect(),
                retrieved_item_ids: ids,
            })
            .collect()
    })
}

fn instance() -> impl Strategy<Value = (usize, Vec<EvidenceRecord>)> {
    (1usize..=32).prop_flat_map(|steps| (Just(steps), evidence(steps)))
}

fn mean_score(records: &[EvidenceRecord]) -> f64 {
    records.iter().map(|r| r.score).sum::<f64>() / records.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn memory_matches_event_log(sets in op_sets()) {
        let state = replay(&sets);
        let mut oracle = EventLogMemory::default();
        for (t, ops) in sets.iter().enumerate() {
            for op in ops {
                oracle.apply(op, t);
            }
        }
        let want: Vec<_> = oracle.fold().into_values().collect();
        let got: Vec<_> = state.items().cloned().collect();
        prop_assert_eq!(got, want);
        for (id, step) in oracle.origin_map() {
            prop_assert_eq!(state.origin_step(id).unwrap(), step);
        }
        prop_assert_eq!(state.next_id(), oracle.next_id());
        prop_assert_eq!(state.step_count(), sets.len());
    }

    #[test]
    fn replay_is_deterministic(sets in op_sets()) {
        prop_assert_eq!(replay(&sets).serialize_state(), replay(&sets).serialize_state());
    }

    #[test]
    fn ids_are_never_reused(sets in op_sets()) {
        let mut state = MemoryState::new();
        let mut issued = Vec::new();
        for (t, ops) in sets.iter().enumerate() {
            let report = state.apply_operation_set(ops, t).unwrap();
            for outcome in &report.outcomes {
                if let finemem_core::memory::OpOutcome::Inserted { id } = outcome {
                    issued.push(*id);
                }
            }
        }
        prop_assert!(issued.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn skip_only_step_is_neutral(sets in op_sets()) {
        let mut state = replay(&sets);
        let before: Vec<_> = state.items().cloned().collect();
        let next = state.next_id();
        state.apply_operation_set(&[Operation::Skip], sets.len()).unwrap();
        prop_assert_eq!(state.items().cloned().collect::<Vec<_>>(), before);
        prop_assert_eq!(state.next_id(), next);
        prop_assert_eq!(state.step_count(), sets.len() + 1);
    }

    #[test]
    fn state_serialization_round_trips(sets in op_sets()) {
        let state = replay(&sets);
        let text = state.serialize_state();
        let back = MemoryState::deserialize_state(&text).unwrap();
        prop_assert_eq!(back.serialize_state(), text);
        prop_assert_eq!(back.memory_length(&WhitespaceCounter), state.memory_length(&WhitespaceCounter));
    }

    #[test]
    fn parsing_is_total(text in "\\PC{0,80}") {
        let set = parse_manager_output(&text);
        let ratio = set.validity_ratio();
        prop_assert!((0.0..=1.0).contains(&ratio));
    }

    #[test]
    fn parsing_is_total_on_json_like_input(text in r#"\[?(\{("op"|"id"|"content"|"x"):("insert"|"UPDATE"|"delete"|1|null|"a"|""),?\},?){0,4}\]?"#) {
        let set = parse_manager_output(&text);
        prop_assert!((0.0..=1.0).contains(&set.validity_ratio()));
    }

    #[test]
    fn rendered_operations_parse_back(ops in prop::collection::vec(operation(), 1..6)) {
        let ops: Vec<_> = ops
            .into_iter()
            .filter(|op| !matches!(op, Operation::Skip) && op.content().is_none_or(|c| !c.trim().is_empty()))
            .collect();
        prop_assume!(!ops.is_empty());
        let set = parse_manager_output(&render_operations(&ops));
        prop_assert_eq!(set.parsed(), ops);
        prop_assert_eq!(set.validity_ratio(), 1.0);
    }

    #[test]
    fn appending_invalid_never_raises_validity(ops in prop::collection::vec(operation(), 0..6)) {
        let mut values: Vec<serde_json::Value> = ops
            .iter()
            .filter(|op| !matches!(op, Operation::Skip))
            .map(|op| serde_json::to_value(op).unwrap())
            .collect();
        let before = parse_manager_output(&serde_json::Value::Array(values.clone()).to_string()).validity_ratio();
        values.push(serde_json::json!({"op": "merge"}));
        let after = parse_manager_output(&serde_json::Value::Array(values).to_string()).validity_ratio();
        prop_assert!(after <= before);
    }

    #[test]
    fn eara_conserves((steps, records) in instance(), beta in prop::sample::select(vec![0.0, 0.25, 0.3, 0.5, 1.0])) {
        let r_global = mean_score(&records);
        let nec = compute_nec(&records, steps).unwrap();
        let eara = compute_eara(&nec, r_global, beta).unwrap();
        prop_assert!((eara.iter().sum::<f64>() - r_global).abs() <= 1e-9);
        let cap = (r_global / steps as f64).max(1.0);
        prop_assert!(eara.iter().all(|&r| (0.0..=cap).contains(&r)));
    }

    #[test]
    fn nec_sums_to_mean_score((steps, records) in instance()) {
        let nec = compute_nec(&records, steps).unwrap();
        prop_assert!((nec.iter().sum::<f64>() - mean_score(&records)).abs() <= 1e-9);
        let oracle = common::nec_oracle(&records, steps);
        for (a, b) in nec.iter().zip(&oracle) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn eara_is_affine_in_beta((steps, records) in instance(), beta in 0.0f64..=1.0) {
        let r_global = mean_score(&records);
        let nec = compute_nec(&records, steps).unwrap();
        let eara = compute_eara(&nec, r_global, beta).unwrap();
        let uniform = r_global / steps as f64;
        for (r, n) in eara.iter().zip(&nec) {
            prop_assert!((r - ((1.0 - beta) * uniform + beta * n)).abs() <= 1e-15);
        }
    }

    #[test]
    fn advantages_are_centered_and_shift_free(
        rewards in prop::collection::vec(0.0f64..2.0, 2..16),
        shift in -5.0f64..5.0,
    ) {
        let eps = 1e-8;
        let adv = grpo_advantages(&rewards, eps).unwrap();
        let g = rewards.len() as f64;
        prop_assert!((adv.iter().sum::<f64>() / g).abs() <= eps * g + 1e-12);
        let shifted: Vec<f64> = rewards.iter().map(|r| r + shift).collect();
        let moved = grpo_advantages(&shifted, eps).unwrap();
        for (a, b) in adv.iter().zip(&moved) {
            prop_assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn component_rewards_stay_in_unit_interval(
        scores in prop::collection::vec(0.0f64..=1.0, 1..20),
        mem in 0usize..5000,
        input in 1usize..5000,
    ) {
        prop_assert!((0.0..=1.0).contains(&chunk_step_reward(&scores).unwrap()));
        prop_assert!((0.0..=1.0).contains(&global_reward(&scores).unwrap()));
        prop_assert!((0.0..=1.0).contains(&compression_reward(mem, input).unwrap()));
    }

    #[test]
    fn top_k_matches_full_scan(
        docs in prop::collection::vec(prop::collection::vec(prop::sample::select(VOCABULARY.to_vec()), 1..10), 1..60),
        query in prop::collection::vec(prop::sample::select(VOCABULARY.to_vec()), 1..4),
        k in 1usize..10,
    ) {
        let texts: Vec<String> = docs.iter().map(|d| d.join(" ")).collect();
        let index = RetrievalIndex::build(texts.iter().enumerate().map(|(i, t)| (i as u64 * 3, t.as_str())), Bm25Params::default());
        let query = query.join(" ");
        let terms = tokenize(&query);
        let mut scan: Vec<(u64, f64)> = (0..texts.len() as u64)
            .map(|i| (i * 3, index.bm25_score(&terms, i * 3).unwrap()))
            .inspect(|&(_, s)| assert!(s >= 0.0))
            .filter(|&(_, s)| s > 0.0)
            .collect();
        scan.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        scan.truncate(k);
        let got: Vec<(u64, f64)> = index.retrieve_top_k(&query, k).hits.iter().map(|h| (h.key, h.score)).collect();
        prop_assert_eq!(got, scan);
    }
}
