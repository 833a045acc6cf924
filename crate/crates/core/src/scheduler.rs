//! Placement policies: map a resource snapshot and pending requests to a
//! schedule, and (for the learned policies) propose consolidation moves.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datacenter::{feasible, DatacenterState, PmId, PmSnapshot, VmId};
use crate::energy::{pm_power, PowerModel};
use crate::error::{Error, Result};
use crate::gnn::{build_state_graph, partition_graph, score_placements, train, GnnModel, TrainConfig, TrainSample};
use crate::sim::{PriceSource, SimConfig, WorkloadSpec};
use crate::workload::WorkloadRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyKind {
    FirstFit,
    BestFitEnergy,
    Random,
    /// Cluster-GCN scorer.
    Counter,
    /// Gated recurrent graph scorer.
    Hunter,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] =
        [PolicyKind::FirstFit, PolicyKind::BestFitEnergy, PolicyKind::Random, PolicyKind::Counter, PolicyKind::Hunter];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::FirstFit => "first_fit",
            PolicyKind::BestFitEnergy => "best_fit_energy",
            PolicyKind::Random => "random",
            PolicyKind::Counter => "counter",
            PolicyKind::Hunter => "hunter",
        }
    }

    pub fn is_learned(self) -> bool {
        matches!(self, PolicyKind::Counter | PolicyKind::Hunter)
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown policy `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsolidationConfig {
    /// PMs below this core utilisation are candidates for emptying.
    pub threshold: f64,
    /// Maximum number of PMs emptied per step.
    pub max_pms_per_step: usize,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        Self { threshold: 0.25, max_pms_per_step: 1 }
    }
}

#[derive(Debug, Clone)]
pub struct Policy {
    pub kind: PolicyKind,
    pub model: Option<Arc<GnnModel>>,
    pub rng_seed: u64,
    pub consolidation: ConsolidationConfig,
}

impl Policy {
    pub fn heuristic(kind: PolicyKind, rng_seed: u64) -> Self {
        Self { kind, model: None, rng_seed, consolidation: ConsolidationConfig::default() }
    }

    pub fn learned(kind: PolicyKind, model: Arc<GnnModel>) -> Self {
        Self { kind, model: Some(model), rng_seed: 0, consolidation: ConsolidationConfig::default() }
    }

    fn model(&self) -> Result<&GnnModel> {
        self.model.as_deref().ok_or_else(|| Error::Config(format!("policy {} requires a trained model", self.kind)))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.is_learned() {
            let model = self.model()?;
            let expected = if self.kind == PolicyKind::Counter { "gcn" } else { "gated" };
            if model.kind() != expected {
                return Err(Error::Config(format!(
                    "policy {} needs a {expected} model, got {}",
                    self.kind,
                    model.kind()
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScheduleDecision {
    /// Applied in order against the originating state.
    pub assignments: Vec<(VmId, PmId)>,
    pub deferred: Vec<VmId>,
    pub migrations: Vec<(VmId, PmId)>,
    /// Per-VM model scores, filled only for learned policies.
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub scores: BTreeMap<VmId, BTreeMap<PmId, f64>>,
}

/// Energy (kWh, including cooling and extra overheads) that `entry` draws
/// over `hours` more once `request` is added, counting the idle draw of a
/// PM that has to boot.
pub fn incremental_energy(
    entry: &PmSnapshot,
    request: &WorkloadRequest,
    model: &PowerModel,
    hours: f64,
) -> Result<f64> {
    let cores = f64::from(entry.cores);
    let before_util = f64::from(entry.cores - entry.free_cores) / cores;
    let after_util = f64::from(entry.cores - entry.free_cores + request.cores) / cores;
    let before = pm_power(before_util, entry.powered_on, model)?;
    let after = pm_power(after_util.min(1.0), true, model)?;
    Ok((after - before) * hours / 1000.0 * model.overhead_factor())
}

/// Index of the smallest score, ties (within 1e-12) going to the earliest entry.
fn argmin<T: Copy>(scored: impl IntoIterator<Item = (T, f64)>) -> Option<T> {
    let mut best: Option<(T, f64)> = None;
    for (item, score) in scored {
        match best {
            Some((_, s)) if score >= s - 1e-12 => {}
            _ => best = Some((item, score)),
        }
    }
    best.map(|(item, _)| item)
}

/// Callback seeing the working snapshot just before each assignment.
pub type AssignmentObserver<'a> = dyn FnMut(&[PmSnapshot], &WorkloadRequest, PmId) + 'a;

pub struct Scheduler {
    policy: Policy,
    power: PowerModel,
    rng: ChaCha8Rng,
}

impl Scheduler {
    pub fn new(policy: Policy, power: PowerModel) -> Result<Self> {
        policy.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(policy.rng_seed);
        Ok(Self { policy, power, rng })
    }

    pub fn policy(&self) -> &Policy {
        &self.policy
    }

    pub fn schedule(
        &mut self,
        snapshot: &[PmSnapshot],
        pending: &[WorkloadRequest],
        price_now: &BTreeMap<String, f64>,
    ) -> Result<ScheduleDecision> {
        self.schedule_observed(snapshot, pending, price_now, &mut |_, _, _| {})
    }

    /// Assigns pending requests in `(arrival, id)` order against a working
    /// copy of `snapshot` that is updated after every assignment.
    pub fn schedule_observed(
        &mut self,
        snapshot: &[PmSnapshot],
        pending: &[WorkloadRequest],
        price_now: &BTreeMap<String, f64>,
        observer: &mut AssignmentObserver<'_>,
    ) -> Result<ScheduleDecision> {
        let mut working = snapshot.to_vec();
        let mut order: Vec<&WorkloadRequest> = pending.iter().collect();
        order.sort_by_key(|r| (r.arrival, r.id));

        let mut decision = ScheduleDecision::default();
        for request in order {
            let vm = VmId(request.id);
            match self.choose(&working, request, price_now, &mut decision.scores)? {
                Some(pm) => {
                    observer(&working, request, pm);
                    working[pm.0].reserve(request);
                    decision.assignments.push((vm, pm));
                }
                None => decision.deferred.push(vm),
            }
        }
        Ok(decision)
    }

    fn choose(
        &mut self,
        working: &[PmSnapshot],
        request: &WorkloadRequest,
        price_now: &BTreeMap<String, f64>,
        scores: &mut BTreeMap<VmId, BTreeMap<PmId, f64>>,
    ) -> Result<Option<PmId>> {
        let candidates: Vec<&PmSnapshot> = working.iter().filter(|e| feasible(e, request)).collect();
        if candidates.is_empty() {
            return Ok(None);
        }
        let choice = match self.policy.kind {
            PolicyKind::FirstFit => Some(candidates[0].pm),
            PolicyKind::Random => Some(candidates[self.rng.gen_range(0..candidates.len())].pm),
            PolicyKind::BestFitEnergy => {
                let mut scored = Vec::with_capacity(candidates.len());
                for e in &candidates {
                    scored.push((e.pm, incremental_energy(e, request, &self.power, 1.0)?));
                }
                // Tightest fit first among equal-energy PMs, then lowest id.
                scored.sort_by_key(|&(pm, _)| (working[pm.0].free_cores - request.cores, pm));
                argmin(scored)
            }
            PolicyKind::Counter | PolicyKind::Hunter => {
                let map = self.model_scores(working, request, price_now)?;
                let choice = argmin(map.iter().map(|(&pm, &s)| (pm, s)));
                scores.insert(VmId(request.id), map);
                choice
            }
        };
        Ok(choice)
    }

    /// Model scores for every feasible PM, keyed by PM id.
    pub fn model_scores(
        &self,
        working: &[PmSnapshot],
        request: &WorkloadRequest,
        price_now: &BTreeMap<String, f64>,
    ) -> Result<BTreeMap<PmId, f64>> {
        let model = self.policy.model()?;
        let graph = build_state_graph(working, std::slice::from_ref(request), price_now);
        score_placements(model, &graph, working.len())
    }

    /// Migration moves emptying at most `max_pms_per_step` lightly loaded
    /// PMs. Heuristic policies never consolidate.
    pub fn consolidate(&self, state: &DatacenterState, price_now: &BTreeMap<String, f64>) -> Result<Vec<(VmId, PmId)>> {
        if !self.policy.kind.is_learned() {
            return Ok(Vec::new());
        }
        let config = self.policy.consolidation;
        let mut working = state.snapshot();
        let mut sources: Vec<&PmSnapshot> =
            working.iter().filter(|e| e.powered_on && e.utilisation < config.threshold).collect();
        sources.sort_by(|a, b| a.utilisation.total_cmp(&b.utilisation).then(a.pm.cmp(&b.pm)));
        let sources: Vec<PmId> = sources.into_iter().map(|e| e.pm).collect();

        let mut moves = Vec::new();
        let mut emptied = 0;
        for src in sources {
            if emptied >= config.max_pms_per_step {
                break;
            }
            if !working[src.0].powered_on {
                continue;
            }
            let vms: Vec<VmId> = state.vms_on(src).collect();
            let mut trial = working.clone();
            let mut planned = Vec::with_capacity(vms.len());
            for &vm in &vms {
                let request = state.vm(vm)?.request;
                let scores = self.model_scores(&trial, &request, price_now)?;
                let allowed = scores.into_iter().filter(|(pm, _)| *pm != src && trial[pm.0].powered_on);
                match argmin(allowed) {
                    Some(dst) => {
                        trial[dst.0].reserve(&request);
                        planned.push((vm, dst));
                    }
                    None => break,
                }
            }
            if planned.len() != vms.len() || planned.is_empty() {
                continue;
            }
            let reclaimed = self.power.idle_power / 1000.0;
            let saving = reclaimed - self.power.migration_penalty * planned.len() as f64;
            if saving <= 0.0 {
                continue;
            }
            for &(vm, _) in &planned {
                trial[src.0].release(&state.vm(vm)?.request);
            }
            working = trial;
            moves.extend(planned);
            emptied += 1;
        }
        Ok(moves)
    }
}

/// Runs `episodes` simulations of `scenario` under the best_fit_energy
/// teacher, reseeding workload and prices per episode, and records one
/// sample per assignment. The label is the incremental total energy of the
/// chosen PM over the next hour, boot included.
pub fn collect_training_data(scenario: &SimConfig, episodes: usize, seed: u64) -> Result<Vec<TrainSample>> {
    if episodes == 0 {
        return Err(Error::Domain("need at least one training episode".into()));
    }
    let mut seeds = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::new();
    for _ in 0..episodes {
        let episode_seed: u64 = seeds.gen();
        let mut config = SimConfig {
            policy: PolicyKind::BestFitEnergy,
            model: None,
            preloaded_model: None,
            log_scores: false,
            seed: episode_seed,
            ..scenario.clone()
        };
        match &mut config.workload {
            WorkloadSpec::Synthetic { seed } | WorkloadSpec::TraceDir { seed, .. } => *seed = episode_seed,
            WorkloadSpec::File { .. } | WorkloadSpec::Inline { .. } => {}
        }
        if let PriceSource::Synthetic { seed } = &mut config.prices {
            *seed = episode_seed;
        }
        let power = config.power;
        let mut failure = None;
        crate::sim::run_observed(&config, &mut |working, request, pm, price_now| {
            if failure.is_some() {
                return;
            }
            match incremental_energy(&working[pm.0], request, &power, 1.0) {
                Ok(label) => samples.push(TrainSample {
                    graph: build_state_graph(working, std::slice::from_ref(request), price_now),
                    vm_node: working.len(),
                    pm_node: pm.0,
                    label,
                }),
                Err(e) => failure = Some(e),
            }
        })?;
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(samples)
}

/// Fits a fresh scorer for a learned policy: a GCN trained on cluster
/// mini-batches (`clusters` per graph) for counter, a gated network trained
/// on whole graphs for hunter. Returns the model and its loss trace.
pub fn train_scorer(
    kind: PolicyKind,
    samples: &[TrainSample],
    config: &TrainConfig,
    clusters: usize,
) -> Result<(GnnModel, Vec<f64>)> {
    let (mut model, k) = match kind {
        PolicyKind::Counter => (GnnModel::default_gcn(config.seed), clusters),
        PolicyKind::Hunter => (GnnModel::default_gated(config.seed), 1),
        other => return Err(Error::Config(format!("policy {other} has no model to train"))),
    };
    let partitions = samples
        .iter()
        .map(|s| partition_graph(&s.graph, k.clamp(1, s.graph.len()), config.seed))
        .collect::<Result<Vec<_>>>()?;
    let trace = train(&mut model, samples, &partitions, config)?;
    Ok((model, trace))
}
