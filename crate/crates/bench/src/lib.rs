//! Shared fixtures for the criterion benchmarks.

use std::collections::BTreeMap;

use cloudsched_core::datacenter::{DatacenterState, PhysicalMachine, PmId, VmId};
use cloudsched_core::gnn::{build_state_graph, StateGraph};
use cloudsched_core::workload::{generate_synthetic, WorkloadRequest};

/// State graph for `pms` reference PMs, half of them carrying one VM,
/// plus `pending` synthetic requests.
pub fn sample_graph(pms: usize, pending: usize) -> StateGraph {
    let mut state = DatacenterState::new(pms, &PhysicalMachine::reference()).expect("valid PM count");
    for i in (0..pms).step_by(2) {
        let id = 10_000 + i as u32;
        state
            .submit(WorkloadRequest { id, cpu_frequency: 2000, cores: 8, ram: 8, duration: 4, arrival: 0 })
            .expect("fresh id");
        state.place(VmId(id), PmId(i)).expect("empty PM has room");
    }
    let requests =
        if pending == 0 { Vec::new() } else { generate_synthetic(pending, 24, 1).expect("positive count").requests };
    let prices: BTreeMap<String, f64> = (0..pms).map(|i| (format!("loc-{i}"), 0.1 + 0.01 * i as f64)).collect();
    build_state_graph(&state.snapshot(), &requests, &prices)
}
