use std::collections::BTreeMap;

use nncluster::fixtures::{distribute_edges, gid_of, WORKED_EXAMPLE_EDGES};
use nncluster::message::Msg;
use nncluster::oracle::oracle_resolve;
use nncluster::resolve::{extract_merge_groups, resolve, FlagWindows, ResolveInput, ResolveOutput};
use nncluster::{DirectedGraphView, DualTieBreak, Runtime, Schedule};
use proptest::prelude::*;

fn run(
    inputs: &[ResolveInput],
    schedule: Schedule,
    tie: DualTieBreak,
) -> nncluster::Result<Vec<ResolveOutput>> {
    let mut rt = Runtime::<Msg>::new(inputs.len())
        .with_schedule(schedule)
        .with_checking(true);
    let g = rt.world();
    let lens: Vec<usize> = inputs.iter().map(|i| i.store_len).collect();
    let win = FlagWindows::allocate(&mut rt, &g, &lens);
    resolve(&mut rt, &g, win, inputs, tie, true)
}

fn kept(inputs: &[ResolveInput], outputs: &[ResolveOutput]) -> Vec<(u64, u64)> {
    let mut k: Vec<(u64, u64)> = inputs
        .iter()
        .zip(outputs)
        .flat_map(|(i, o)| nncluster::resolve::kept_edges(i, o))
        .collect();
    k.sort_unstable();
    k
}

/// Outdegree <= 1 and only 2-cycles: an acyclic forest, then some roots
/// point back at one of their in-neighbours.
fn graph_strategy() -> impl Strategy<Value = (usize, Vec<(u64, u64)>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            Just(n),
            proptest::collection::vec(proptest::option::weighted(0.8, any::<prop::sample::Index>()), n),
            proptest::collection::vec(any::<bool>(), n),
        )
            .prop_map(|(n, parents, close)| {
                let mut out: BTreeMap<u64, u64> = BTreeMap::new();
                for (v, parent) in parents.iter().enumerate().skip(1) {
                    if let Some(ix) = parent {
                        out.insert(v as u64, ix.index(v) as u64);
                    }
                }
                for r in 0..n as u64 {
                    if close[r as usize] && !out.contains_key(&r) {
                        if let Some((&u, _)) = out.iter().find(|&(_, &t)| t == r) {
                            out.insert(r, u);
                        }
                    }
                }
                (n, out.into_iter().collect())
            })
    })
}

fn schedule_strategy() -> impl Strategy<Value = Schedule> {
    prop_oneof![
        Just(Schedule::Sequential),
        Just(Schedule::Reverse),
        any::<u64>().prop_map(Schedule::Shuffled),
        Just(Schedule::Parallel),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn matches_sequential_rendition(
        (n, edges) in graph_strategy(),
        workers in 1usize..6,
        placement in any::<u64>(),
        schedule in schedule_strategy(),
    ) {
        let owner: Vec<usize> = (0..n)
            .map(|v| ((placement.rotate_left(v as u32 * 7) ^ v as u64) % workers as u64) as usize)
            .collect();
        let inputs = distribute_edges(&edges, &owner, workers);
        let outputs = run(&inputs, schedule, DualTieBreak::LowerGid).unwrap();

        let (expect, iterations) = oracle_resolve(&edges.iter().copied().collect());
        let got = kept(&inputs, &outputs);
        prop_assert_eq!(&got, &expect);

        // post-state: a union of stars with leaf origins and no duals
        let view = DirectedGraphView::from_edges(got.iter().copied()).unwrap();
        prop_assert!(view.dual_links().is_empty());
        for (s, t) in view.edges() {
            prop_assert!(view.is_leaf(s));
            prop_assert!(view.available().contains(&t));
        }
        extract_merge_groups(&inputs, &outputs).unwrap();

        let longest = DirectedGraphView::from_edges(edges.iter().copied()).unwrap().longest_path();
        for o in &outputs {
            let c = o.counters;
            prop_assert_eq!(c.n_iterations, iterations);
            prop_assert!(c.n_iterations as usize <= 1 + longest);
            prop_assert_eq!(c.n_barrier, 3 * c.n_iterations + 2);
            prop_assert_eq!(c.n_allreduce, c.n_iterations);
        }
    }

    #[test]
    fn layouts_agree_on_the_partition(
        (n, edges) in graph_strategy(),
        seed in any::<u64>(),
    ) {
        let one = distribute_edges(&edges, &vec![0; n], 1);
        let reference = extract_merge_groups(&one, &run(&one, Schedule::Sequential, DualTieBreak::LowerGid).unwrap()).unwrap();
        let owner: Vec<usize> = (0..n).map(|v| ((seed >> (v % 60)) & 3) as usize).collect();
        let four = distribute_edges(&edges, &owner, 4);
        let p = extract_merge_groups(&four, &run(&four, Schedule::Shuffled(seed), DualTieBreak::LowerGid).unwrap()).unwrap();
        prop_assert_eq!(p, reference);
    }
}

fn worked_edges() -> Vec<(u64, u64)> {
    WORKED_EXAMPLE_EDGES
        .iter()
        .map(|&(s, t)| (gid_of(s), gid_of(t)))
        .collect()
}

#[test]
fn worked_example_on_sampled_layouts_of_four_workers() {
    let edges = worked_edges();
    // layouts of twelve vertices over four workers, sampled with a stride
    let mut seen: Vec<nncluster::Partition> = Vec::new();
    for code in (0u32..1 << 24).step_by(65_537) {
        let owner: Vec<usize> = (0..12).map(|v| ((code >> (2 * v)) & 3) as usize).collect();
        let inputs = distribute_edges(&edges, &owner, 4);
        let outputs = run(&inputs, Schedule::Shuffled(code as u64), DualTieBreak::LowerGid).unwrap();
        let mut trace: Vec<_> = outputs
            .iter()
            .flat_map(|o| o.trace.iter().filter(|e| !e.finalized).copied())
            .collect();
        trace.sort_unstable();
        let removed: Vec<(u8, u32, u64, u64)> = trace
            .iter()
            .map(|e| (e.stage, e.iteration, e.origin, e.target))
            .collect();
        assert_eq!(
            removed,
            vec![
                (1, 1, gid_of('F'), gid_of('C')),
                (1, 1, gid_of('I'), gid_of('H')),
                (1, 2, gid_of('D'), gid_of('E')),
                (2, 3, gid_of('H'), gid_of('E')),
            ]
        );
        let sums: Vec<u64> = outputs.iter().map(|o| o.counters.n_barrier).collect();
        assert!(sums.iter().all(|&b| b == 11));
        let p = extract_merge_groups(&inputs, &outputs).unwrap();
        if !seen.contains(&p) {
            seen.push(p);
        }
    }
    assert_eq!(seen.len(), 1);
}

#[test]
fn isolated_dual_across_workers_follows_lower_rank() {
    // u = gid 5 on worker 0, v = gid 2 on worker 1
    let mut owner = vec![1; 6];
    owner[5] = 0;
    let inputs = distribute_edges(&[(5, 2), (2, 5)], &owner, 2);
    let outputs = run(&inputs, Schedule::Reverse, DualTieBreak::LowerRank).unwrap();
    // worker 0 removes u -> v; v -> u stays, rooted at u
    assert_eq!(kept(&inputs, &outputs), vec![(2, 5)]);
    let p = extract_merge_groups(&inputs, &outputs).unwrap();
    assert_eq!(p.groups[0].root, 5);
}

#[test]
fn rma_counts_only_cross_worker_traffic() {
    let edges = worked_edges();
    let local = distribute_edges(&edges, &[0; 12], 1);
    let out = run(&local, Schedule::Sequential, DualTieBreak::LowerGid).unwrap();
    assert_eq!(out[0].counters.n_rma_put + out[0].counters.n_rma_get, 0);

    let owner: Vec<usize> = (0..12).map(|v| v % 3).collect();
    let spread = distribute_edges(&edges, &owner, 3);
    let out = run(&spread, Schedule::Sequential, DualTieBreak::LowerGid).unwrap();
    assert!(out.iter().map(|o| o.counters.n_rma_put).sum::<u64>() > 0);
}
