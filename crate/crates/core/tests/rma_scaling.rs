use nncluster::engine::{Cluster, EngineOptions};
use nncluster::Domain;

fn ops_and_boundary(workers: usize) -> (u64, u64, u64) {
    let d = Domain::unit_cube(16).unwrap();
    let mut c = Cluster::sampled(d, workers, 20, 11, EngineOptions::default()).unwrap();
    let g = c.find_groups().unwrap();
    let boundary: u64 = c.stores().iter().map(|s| s.n_remote() as u64).sum();
    let ops: u64 = g.counters.iter().map(|c| c.n_rma_put + c.n_rma_get).sum();
    let iterations = g.counters.iter().map(|c| c.n_iterations).max().unwrap_or(0);
    (ops, boundary, iterations)
}

#[test]
fn rma_traffic_follows_boundary_smalls() {
    let (ops, boundary, _) = ops_and_boundary(1);
    assert_eq!((ops, boundary), (0, 0));
    let mut ratios = Vec::new();
    for workers in [2, 4, 8, 16] {
        let (ops, boundary, iterations) = ops_and_boundary(workers);
        // at most three epochs of flag traffic per iteration plus stage 2, per cross edge
        assert!(ops <= (3 * iterations + 2) * boundary, "{workers}: {ops} ops for {boundary}");
        ratios.push(ops as f64 / boundary as f64);
    }
    // ops per boundary small must not climb with the worker count
    assert!(ratios.iter().all(|&r| r <= 1.1 * ratios[0]), "{ratios:?}");
}
