//! Acceptance suite. Runs without the libtest harness so every criterion
//! prints exactly one PASS/FAIL line; the process exits non-zero if any fail.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use cloudsched_core::datacenter::{DatacenterState, PhysicalMachine, PmId, PmSnapshot, VmId};
use cloudsched_core::energy::{pm_power, PowerModel};
use cloudsched_core::gnn::{build_state_graph, gradient_check, GnnModel, TrainConfig, TrainSample};
use cloudsched_core::scheduler::{
    collect_training_data, train_scorer, ConsolidationConfig, Policy, PolicyKind, Scheduler,
};
use cloudsched_core::sim::{compute_qos, run, SimConfig, SimResult, WorkloadSpec};
use cloudsched_core::workload::WorkloadRequest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EVAL_SEEDS: std::ops::Range<u64> = 0..10;
const TRAINING_SCENARIO_SEED: u64 = 1000;
const TRAINING_SEED: u64 = 7;
const TRAINING_EPISODES: usize = 10;
const COUNTER_CLUSTERS: usize = 2;
/// Consolidation threshold used by both learned policies in the comparison.
const COMPARISON_THRESHOLD: f64 = 0.4;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

struct Trained {
    counter: Arc<GnnModel>,
    hunter: Arc<GnnModel>,
    counter_trace: Vec<f64>,
}

fn train_models() -> Trained {
    let samples = collect_training_data(&SimConfig::seeded(TRAINING_SCENARIO_SEED), TRAINING_EPISODES, TRAINING_SEED)
        .expect("training data");
    let config = TrainConfig { seed: TRAINING_SEED, ..TrainConfig::default() };
    let (counter, counter_trace) =
        train_scorer(PolicyKind::Counter, &samples, &config, COUNTER_CLUSTERS).expect("counter training");
    let (hunter, _) = train_scorer(PolicyKind::Hunter, &samples, &config, 1).expect("hunter training");
    Trained { counter: Arc::new(counter), hunter: Arc::new(hunter), counter_trace }
}

fn config_for(policy: PolicyKind, seed: u64, models: &Trained, threshold: f64) -> SimConfig {
    let preloaded_model = match policy {
        PolicyKind::Counter => Some(models.counter.clone()),
        PolicyKind::Hunter => Some(models.hunter.clone()),
        _ => None,
    };
    SimConfig {
        policy,
        preloaded_model,
        consolidation: ConsolidationConfig { threshold, ..ConsolidationConfig::default() },
        ..SimConfig::seeded(seed)
    }
}

struct PolicyRuns {
    results: BTreeMap<PolicyKind, Vec<SimResult>>,
}

impl PolicyRuns {
    fn metric(&self, policy: PolicyKind, f: impl Fn(&SimResult) -> f64) -> f64 {
        median(&self.results[&policy].iter().map(f).collect::<Vec<_>>())
    }
}

fn run_policies(models: &Trained, threshold: f64) -> PolicyRuns {
    let mut results = BTreeMap::new();
    for policy in [PolicyKind::FirstFit, PolicyKind::Counter, PolicyKind::Hunter] {
        let runs =
            EVAL_SEEDS.map(|seed| run(&config_for(policy, seed, models, threshold)).expect("simulation")).collect();
        results.insert(policy, runs);
    }
    PolicyRuns { results }
}

fn energy_direction(runs: &PolicyRuns) -> Outcome {
    let energy = |p| runs.metric(p, |r| r.totals.total);
    let (counter, hunter, first_fit) =
        (energy(PolicyKind::Counter), energy(PolicyKind::Hunter), energy(PolicyKind::FirstFit));
    let reduction = 1.0 - counter / first_fit;
    outcome(
        counter <= hunter && counter <= first_fit && reduction >= 0.05,
        format!(
            "median kWh counter {counter:.3}, hunter {hunter:.3}, first_fit {first_fit:.3}; reduction vs first_fit {:.2}%",
            100.0 * reduction
        ),
    )
}

fn utilisation_direction(runs: &PolicyRuns) -> Outcome {
    let util = |p| runs.metric(p, |r| compute_qos(r).max_pm_utilisation);
    let active = |p| runs.metric(p, |r| compute_qos(r).mean_active_pm_count);
    let (cu, hu) = (util(PolicyKind::Counter), util(PolicyKind::Hunter));
    let (ca, ha) = (active(PolicyKind::Counter), active(PolicyKind::Hunter));
    outcome(
        cu >= hu && ca <= ha,
        format!(
            "median max util counter {cu:.4} vs hunter {hu:.4}; median active PMs counter {ca:.3} vs hunter {ha:.3}"
        ),
    )
}

fn closure_and_conservation(runs: &PolicyRuns) -> Outcome {
    let mut worst_closure: f64 = 0.0;
    let mut worst_conservation: f64 = 0.0;
    let mut checked = 0usize;
    for result in runs.results.values().flatten() {
        let mut processor = 0.0;
        let mut cooling = 0.0;
        let mut extra = 0.0;
        let mut total = 0.0;
        for hour in &result.hours {
            for e in hour.per_pm.iter().chain(std::iter::once(&hour.energy)) {
                let parts = e.processor + e.cooling + e.extra;
                if parts > 0.0 {
                    worst_closure = worst_closure.max((e.total - parts).abs() / parts);
                }
                checked += 1;
            }
            processor += hour.energy.processor;
            cooling += hour.energy.cooling;
            extra += hour.energy.extra;
            total += hour.energy.total;
        }
        let t = &result.totals;
        for (run_total, summed) in [(t.processor, processor), (t.cooling, cooling), (t.extra, extra), (t.total, total)]
        {
            if summed > 0.0 {
                worst_conservation = worst_conservation.max((run_total - summed).abs() / summed);
            }
        }
        if t.total > 0.0 {
            worst_closure = worst_closure.max((t.total - (t.processor + t.cooling + t.extra)).abs() / t.total);
        }
    }
    outcome(
        worst_closure <= 1e-9 && worst_conservation <= 1e-9,
        format!("{checked} breakdowns; worst closure {worst_closure:.2e}, worst conservation {worst_conservation:.2e}"),
    )
}

fn power_endpoints() -> Outcome {
    let model = PowerModel::default();
    let idle = pm_power(0.0, true, &model).unwrap();
    let peak = pm_power(1.0, true, &model).unwrap();
    let off = pm_power(0.7, false, &model).unwrap();
    outcome(idle == 100.0 && peak == 200.0 && off == 0.0, format!("u=0 -> {idle} W, u=1 -> {peak} W, off -> {off} W"))
}

fn random_snapshot(rng: &mut ChaCha8Rng, pms: usize) -> Vec<PmSnapshot> {
    let mut state = DatacenterState::new(pms, &PhysicalMachine::reference()).unwrap();
    for id in 0..rng.gen_range(0..3 * pms as u32) {
        let request = random_request(rng, id, 0);
        state.submit(request).unwrap();
        let pm = PmId(rng.gen_range(0..pms));
        if state.place(VmId(id), pm).is_err() {
            state.delete(VmId(id)).unwrap();
        }
    }
    state.snapshot()
}

fn random_request(rng: &mut ChaCha8Rng, id: u32, arrival: u32) -> WorkloadRequest {
    WorkloadRequest {
        id,
        cpu_frequency: rng.gen_range(1600..=3400),
        cores: [1, 2, 4, 8][rng.gen_range(0..4)],
        ram: [1, 2, 4, 8, 16][rng.gen_range(0..5)],
        duration: rng.gen_range(1..=48),
        arrival,
    }
}

fn random_prices(rng: &mut ChaCha8Rng, pms: usize) -> BTreeMap<String, f64> {
    (0..pms).map(|i| (format!("loc-{i}"), rng.gen_range(0.05..0.15))).collect()
}

fn gradient_fidelity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = [0.0f64; 2];
    let instances = 20;
    for i in 0..instances {
        let pms = rng.gen_range(1..6);
        let snapshot = random_snapshot(&mut rng, pms);
        let request = WorkloadRequest { cpu_frequency: 2000, ..random_request(&mut rng, 99, 0) };
        let graph = build_state_graph(&snapshot, &[request], &random_prices(&mut rng, pms));
        let sample =
            TrainSample { pm_node: rng.gen_range(0..pms), vm_node: pms, label: rng.gen_range(0.0..0.3), graph };
        for (slot, model) in [GnnModel::default_gcn(i), GnnModel::default_gated(i)].iter().enumerate() {
            let err = gradient_check(model, &sample, 1e-5).unwrap();
            worst[slot] = worst[slot].max(err);
        }
    }
    outcome(
        worst[0] < 1e-4 && worst[1] < 1e-4,
        format!("{instances} instances per model; worst relative error gcn {:.2e}, gated {:.2e}", worst[0], worst[1]),
    )
}

/// Exhaustive search over every assignment of VMs to PMs at their arrival
/// hour, scored with an independent restatement of the power model.
fn brute_force_optimum(pm_count: usize, horizon: u32, requests: &[WorkloadRequest]) -> Option<f64> {
    let template = PhysicalMachine::reference();
    let combos = pm_count.pow(requests.len() as u32);
    let mut best: Option<f64> = None;
    'combo: for code in 0..combos {
        let mut choice = Vec::with_capacity(requests.len());
        let mut c = code;
        for _ in requests {
            choice.push(c % pm_count);
            c /= pm_count;
        }
        if requests.iter().any(|r| r.cpu_frequency > template.max_frequency) {
            continue;
        }
        let mut kwh = 0.0;
        for t in 0..horizon {
            let mut cores = vec![0u32; pm_count];
            let mut ram = vec![0u32; pm_count];
            for (r, &pm) in requests.iter().zip(&choice) {
                if r.arrival <= t && t < r.arrival + r.duration {
                    cores[pm] += r.cores;
                    ram[pm] += r.ram;
                }
            }
            for pm in 0..pm_count {
                if cores[pm] > template.cores || ram[pm] > template.ram {
                    continue 'combo;
                }
                if cores[pm] > 0 {
                    let u = f64::from(cores[pm]) / f64::from(template.cores);
                    kwh += (100.0 + 100.0 * u) / 1000.0 * 1.35;
                }
            }
        }
        best = Some(best.map_or(kwh, |b: f64| b.min(kwh)));
    }
    best
}

fn tiny_requests() -> Vec<WorkloadRequest> {
    let r =
        |id, cores, ram, duration, arrival| WorkloadRequest { id, cpu_frequency: 2000, cores, ram, duration, arrival };
    vec![r(0, 20, 8, 2, 0), r(1, 16, 8, 1, 0), r(2, 10, 4, 1, 1)]
}

fn tiny_config(policy: PolicyKind, requests: Vec<WorkloadRequest>, models: &Trained) -> SimConfig {
    SimConfig {
        pm_count: 2,
        vm_count: requests.len(),
        horizon: 3,
        workload: WorkloadSpec::Inline { requests },
        ..config_for(policy, 1, models, ConsolidationConfig::default().threshold)
    }
}

fn brute_force_oracle(models: &Trained) -> Outcome {
    let requests = tiny_requests();
    let optimum = brute_force_optimum(2, 3, &requests).expect("tiny scenario is feasible");
    let energy = |policy| {
        let result = run(&tiny_config(policy, requests.clone(), models)).unwrap();
        (result.totals.total, result.placed)
    };
    let (best_fit, bf_placed) = energy(PolicyKind::BestFitEnergy);
    let (counter, c_placed) = energy(PolicyKind::Counter);
    outcome(
        bf_placed == 3 && c_placed == 3 && best_fit <= 1.10 * optimum && counter <= 1.15 * optimum,
        format!("optimum {optimum:.6} kWh; best_fit_energy {best_fit:.6}, counter {counter:.6}"),
    )
}

fn capacity_safety(models: &Trained) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut violations = 0usize;
    let mut inconsistencies = 0usize;
    let mut operations = 0usize;
    let sequences = 1000;
    for seq in 0..sequences {
        let pms = rng.gen_range(1..5);
        let mut state = DatacenterState::new(pms, &PhysicalMachine::reference()).unwrap();
        let kind = PolicyKind::ALL[seq % PolicyKind::ALL.len()];
        let policy = match kind {
            PolicyKind::Counter => Policy::learned(kind, models.counter.clone()),
            PolicyKind::Hunter => Policy::learned(kind, models.hunter.clone()),
            _ => Policy::heuristic(kind, seq as u64),
        };
        let mut scheduler = Scheduler::new(policy, PowerModel::default()).unwrap();
        let mut next_id = 0u32;
        let mut pending = Vec::new();
        for hour in 0..rng.gen_range(1..8u32) {
            state.clock = hour;
            state.remove_finished();
            for _ in 0..rng.gen_range(0..6) {
                let request = random_request(&mut rng, next_id, hour);
                next_id += 1;
                state.submit(request).unwrap();
                pending.push(request);
            }
            let prices = random_prices(&mut rng, pms);
            let decision = scheduler.schedule(&state.snapshot(), &pending, &prices).unwrap();
            for &(vm, pm) in &decision.assignments {
                operations += 1;
                if state.place(vm, pm).is_err() {
                    violations += 1;
                }
            }
            pending.retain(|r| decision.deferred.contains(&VmId(r.id)));
            for (vm, dst) in scheduler.consolidate(&state, &prices).unwrap() {
                operations += 1;
                if state.migrate(vm, dst).is_err() {
                    violations += 1;
                }
            }
            // Random manager operations, which may legitimately be refused.
            for _ in 0..rng.gen_range(0..4) {
                operations += 1;
                let vm = VmId(rng.gen_range(0..next_id.max(1)));
                let pm = PmId(rng.gen_range(0..pms));
                let before = state.clone();
                let accepted = match rng.gen_range(0..3) {
                    0 => state.migrate(vm, pm).is_ok(),
                    1 => state.pause(vm).is_ok(),
                    _ => state.place(vm, pm).is_ok(),
                };
                if !accepted && state != before {
                    inconsistencies += 1;
                }
            }
            if state.check_invariants().is_err() {
                inconsistencies += 1;
            }
        }
    }
    outcome(
        violations == 0 && inconsistencies == 0,
        format!("{sequences} sequences, {operations} operations; {violations} capacity violations, {inconsistencies} inconsistencies"),
    )
}

fn loss_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l:e}\n"));
    }
    out
}

fn determinism(models: &Trained) -> Outcome {
    let mut identical = true;
    for policy in PolicyKind::ALL {
        let config = config_for(policy, 3, models, ConsolidationConfig::default().threshold);
        let a = run(&config).unwrap().to_json().unwrap();
        let b = run(&config).unwrap().to_json().unwrap();
        identical &= a == b;
    }
    let retrained = train_models();
    let same_trace = loss_csv(&retrained.counter_trace) == loss_csv(&models.counter_trace);
    let same_weights = retrained.counter == models.counter && retrained.hunter == models.hunter;
    outcome(
        identical && same_trace && same_weights,
        format!("SimResult JSON identical for all policies: {identical}; loss trace identical: {same_trace}; weights identical: {same_weights}"),
    )
}

/// Lowest-id PM with room, checked field by field.
fn reference_first_fit(snapshot: &[PmSnapshot], pending: &[WorkloadRequest]) -> (Vec<(VmId, PmId)>, Vec<VmId>) {
    let mut free: Vec<(u32, u32)> = snapshot.iter().map(|p| (p.free_cores, p.free_ram)).collect();
    let mut order = pending.to_vec();
    order.sort_by_key(|r| (r.arrival, r.id));
    let (mut placed, mut deferred) = (Vec::new(), Vec::new());
    for r in order {
        let slot = (0..snapshot.len())
            .find(|&i| free[i].0 >= r.cores && free[i].1 >= r.ram && snapshot[i].max_frequency >= r.cpu_frequency);
        match slot {
            Some(i) => {
                free[i].0 -= r.cores;
                free[i].1 -= r.ram;
                placed.push((VmId(r.id), snapshot[i].pm));
            }
            None => deferred.push(VmId(r.id)),
        }
    }
    (placed, deferred)
}

fn first_fit_reference() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let scenarios = 100;
    let mut mismatches = 0;
    let mut assignments = 0;
    for _ in 0..scenarios {
        let pms = rng.gen_range(1..9);
        let snapshot = random_snapshot(&mut rng, pms);
        let pending: Vec<_> = (0..rng.gen_range(0..25))
            .map(|i| {
                let arrival = rng.gen_range(0..3);
                random_request(&mut rng, 100 + i, arrival)
            })
            .collect();
        let mut scheduler = Scheduler::new(Policy::heuristic(PolicyKind::FirstFit, 0), PowerModel::default()).unwrap();
        let decision = scheduler.schedule(&snapshot, &pending, &BTreeMap::new()).unwrap();
        let (placed, deferred) = reference_first_fit(&snapshot, &pending);
        assignments += placed.len();
        if decision.assignments != placed || decision.deferred != deferred || !decision.migrations.is_empty() {
            mismatches += 1;
        }
    }
    outcome(
        mismatches == 0,
        format!("{scenarios} scenarios, {assignments} reference assignments, {mismatches} mismatches"),
    )
}

type Check<'a> = Box<dyn Fn() -> Outcome + 'a>;

fn main() {
    let start = Instant::now();
    let models = train_models();
    let runs = run_policies(&models, COMPARISON_THRESHOLD);
    let default_runs = run_policies(&models, ConsolidationConfig::default().threshold);

    let criteria: Vec<(&str, Check<'_>)> = vec![
        ("directional energy", Box::new(|| energy_direction(&runs))),
        ("directional utilisation", Box::new(|| utilisation_direction(&runs))),
        ("energy closure and conservation", Box::new(|| closure_and_conservation(&runs))),
        ("power model endpoints", Box::new(power_endpoints)),
        ("gradient fidelity", Box::new(gradient_fidelity)),
        ("brute-force placement oracle", Box::new(|| brute_force_oracle(&models))),
        ("capacity safety", Box::new(|| capacity_safety(&models))),
        ("determinism", Box::new(|| determinism(&models))),
        ("first_fit reference equivalence", Box::new(first_fit_reference)),
    ];

    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let result = check();
        if !result.pass {
            failed += 1;
        }
        println!("{} criterion {}: {name}: {}", if result.pass { "PASS" } else { "FAIL" }, i + 1, result.detail);
    }
    let info = energy_direction(&default_runs);
    println!(
        "INFO learned policies at the default consolidation threshold {}: {}",
        ConsolidationConfig::default().threshold,
        info.detail
    );
    println!("acceptance finished in {:.1?}", start.elapsed());
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
