//! Hourly simulation loop, QoS reporting and policy comparison.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datacenter::{DatacenterState, PhysicalMachine, PmId, PmSnapshot, VmId};
use crate::energy::{
    energy_report_csv, generate_price_series, load_price_series, step_energy, EnergyBreakdown, EnergyReportRow,
    PowerModel, PriceSeries,
};
use crate::error::{Error, Result};
use crate::gnn::GnnModel;
use crate::scheduler::{ConsolidationConfig, Policy, PolicyKind, Scheduler};
use crate::workload::{
    derive_request, generate_synthetic, parse_trace_file, WorkloadRequest, WorkloadSet, WorkloadSource,
};

/// Hardware of every PM; power figures come from the power model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PmTemplate {
    pub cores: u32,
    pub max_frequency: u32,
    pub min_frequency: u32,
    pub ram: u32,
}

impl Default for PmTemplate {
    fn default() -> Self {
        let r = PhysicalMachine::reference();
        Self { cores: r.cores, max_frequency: r.max_frequency, min_frequency: r.min_frequency, ram: r.ram }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PriceSource {
    Synthetic { seed: u64 },
    File { path: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WorkloadSpec {
    Synthetic {
        seed: u64,
    },
    /// One trace file per VM; arrivals are drawn uniformly with `seed`.
    TraceDir {
        path: PathBuf,
        seed: u64,
    },
    /// A workload JSON file as written by `WorkloadSet::to_json`.
    File {
        path: PathBuf,
    },
    Inline {
        requests: Vec<WorkloadRequest>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub pm_count: usize,
    pub pm_template: PmTemplate,
    pub vm_count: usize,
    pub horizon: u32,
    pub power: PowerModel,
    pub prices: PriceSource,
    pub workload: WorkloadSpec,
    pub policy: PolicyKind,
    /// Checkpoint for the learned policies.
    pub model: Option<PathBuf>,
    pub consolidation: ConsolidationConfig,
    pub seed: u64,
    pub log_scores: bool,
    /// Takes precedence over `model` when set.
    #[serde(skip)]
    pub preloaded_model: Option<Arc<GnnModel>>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            pm_count: 8,
            pm_template: PmTemplate::default(),
            vm_count: 60,
            horizon: 120,
            power: PowerModel::default(),
            prices: PriceSource::Synthetic { seed: 0 },
            workload: WorkloadSpec::Synthetic { seed: 0 },
            policy: PolicyKind::FirstFit,
            model: None,
            consolidation: ConsolidationConfig::default(),
            seed: 0,
            log_scores: false,
            preloaded_model: None,
        }
    }
}

impl SimConfig {
    /// Reference scenario with workload, prices and policy RNG all seeded from `seed`.
    pub fn seeded(seed: u64) -> Self {
        Self {
            prices: PriceSource::Synthetic { seed },
            workload: WorkloadSpec::Synthetic { seed },
            seed,
            ..Self::default()
        }
    }

    pub fn physical_machine(&self) -> PhysicalMachine {
        PhysicalMachine {
            cores: self.pm_template.cores,
            max_frequency: self.pm_template.max_frequency,
            min_frequency: self.pm_template.min_frequency,
            ram: self.pm_template.ram,
            peak_power: self.power.peak_power,
            idle_power: self.power.idle_power,
            ..PhysicalMachine::reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(Error::Config("horizon must be at least 1 hour".into()));
        }
        if self.pm_count == 0 {
            return Err(Error::Config("pm_count must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.consolidation.threshold) {
            return Err(Error::Config("consolidation threshold must lie in [0, 1]".into()));
        }
        self.power.validate()?;
        self.physical_machine().validate()
    }

    pub fn load_workload(&self) -> Result<Vec<WorkloadRequest>> {
        let mut requests = match &self.workload {
            WorkloadSpec::Synthetic { .. } if self.vm_count == 0 => Vec::new(),
            WorkloadSpec::Synthetic { seed } => generate_synthetic(self.vm_count, self.horizon, *seed)?.requests,
            WorkloadSpec::File { path } => {
                WorkloadSet::from_json(&fs::read(path)?, WorkloadSource::Synthetic)?.requests
            }
            WorkloadSpec::Inline { requests } => {
                for r in requests {
                    r.validate()?;
                }
                WorkloadSet::new(requests.clone(), WorkloadSource::Synthetic, None).requests
            }
            WorkloadSpec::TraceDir { path, seed } => load_trace_dir(path, self.vm_count, self.horizon, *seed)?.requests,
        };
        requests.truncate(self.vm_count);
        let mut seen = std::collections::BTreeSet::new();
        for r in &requests {
            if r.arrival >= self.horizon {
                return Err(Error::Config(format!("vm-{} arrives at hour {} beyond the horizon", r.id, r.arrival)));
            }
            if !seen.insert(r.id) {
                return Err(Error::Config(format!("duplicate request id {}", r.id)));
            }
        }
        Ok(requests)
    }

    pub fn load_prices(&self) -> Result<PriceSeries> {
        let locations: Vec<String> = (0..self.pm_count).map(|i| format!("loc-{i}")).collect();
        let series = match &self.prices {
            PriceSource::Synthetic { seed } => generate_price_series(&locations, self.horizon, *seed)?,
            PriceSource::File { path } => load_price_series(&fs::read(path)?)?,
        };
        series.check_coverage(locations.iter().map(String::as_str), self.horizon)?;
        Ok(series)
    }

    pub fn load_model(&self) -> Result<Option<Arc<GnnModel>>> {
        if !self.policy.is_learned() {
            return Ok(None);
        }
        if let Some(model) = &self.preloaded_model {
            return Ok(Some(Arc::clone(model)));
        }
        let path = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Config(format!("policy {} needs a model checkpoint", self.policy)))?;
        let checkpoint = serde_json::from_slice(&fs::read(path)?)?;
        Ok(Some(Arc::new(GnnModel::from_checkpoint(&checkpoint)?)))
    }

    /// Equal apart from the policy and its model.
    fn same_scenario(&self, other: &SimConfig) -> bool {
        let strip = |c: &SimConfig| SimConfig {
            policy: PolicyKind::FirstFit,
            model: None,
            preloaded_model: None,
            log_scores: false,
            ..c.clone()
        };
        strip(self) == strip(other)
    }
}

/// Files in `dir`, sorted by name, one VM each.
pub fn load_trace_dir(dir: &std::path::Path, limit: usize, horizon: u32, seed: u64) -> Result<WorkloadSet> {
    let mut paths: Vec<PathBuf> =
        fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
    paths.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut requests = Vec::new();
    for (id, path) in paths.iter().take(limit).enumerate() {
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("vm");
        let trace = parse_trace_file(name, &fs::read(path)?)?;
        let arrival = rng.gen_range(0..horizon.max(1));
        requests.push(derive_request(&trace, id as u32, arrival)?);
    }
    Ok(WorkloadSet::new(requests, WorkloadSource::Trace, Some(seed)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HourRecord {
    pub hour: u32,
    /// Indexed by PM.
    pub utilisation: Vec<f64>,
    pub powered_on: Vec<bool>,
    pub prices: Vec<f64>,
    pub per_pm: Vec<EnergyBreakdown>,
    pub energy: EnergyBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub hour: u32,
    pub policy: PolicyKind,
    pub assignments: Vec<(VmId, PmId)>,
    pub deferred: Vec<VmId>,
    pub migrations: Vec<(VmId, PmId)>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub scores: Option<BTreeMap<VmId, BTreeMap<PmId, f64>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub policy: PolicyKind,
    pub locations: Vec<String>,
    pub vm_count: usize,
    pub hours: Vec<HourRecord>,
    pub totals: EnergyBreakdown,
    pub events: Vec<DecisionRecord>,
    /// Hours each VM spent waiting, for VMs deferred at least once.
    pub deferred_hours: BTreeMap<VmId, u32>,
    pub placed: usize,
    pub deferred_at_horizon: usize,
    pub migrations: usize,
}

impl SimResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn energy_rows(&self) -> Vec<EnergyReportRow> {
        self.hours
            .iter()
            .flat_map(|h| {
                h.per_pm.iter().enumerate().map(move |(i, e)| EnergyReportRow {
                    hour: h.hour,
                    pm: PmId(i),
                    location: self.locations[i].clone(),
                    energy: *e,
                    price: h.prices[i],
                })
            })
            .collect()
    }

    pub fn energy_csv(&self) -> String {
        energy_report_csv(&self.energy_rows())
    }

    /// `hour,pm,utilisation,powered_on` for plotting.
    pub fn utilisation_csv(&self) -> String {
        let mut out = String::from("hour,pm,utilisation,powered_on\n");
        for h in &self.hours {
            for (i, u) in h.utilisation.iter().enumerate() {
                let _ = writeln!(out, "{},pm-{i},{u:.6},{}", h.hour, u8::from(h.powered_on[i]));
            }
        }
        out
    }

    pub fn decision_log_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Sees every assignment with the working snapshot it was chosen against
/// and the prices of that hour.
pub type StepObserver<'a> = dyn FnMut(&[PmSnapshot], &WorkloadRequest, PmId, &BTreeMap<String, f64>) + 'a;

pub fn run(config: &SimConfig) -> Result<SimResult> {
    run_observed(config, &mut |_, _, _, _| {})
}

pub fn run_observed(config: &SimConfig, observer: &mut StepObserver<'_>) -> Result<SimResult> {
    config.validate()?;
    let requests = config.load_workload()?;
    let prices = config.load_prices()?;
    let model = config.load_model()?;
    let policy = Policy { kind: config.policy, model, rng_seed: config.seed, consolidation: config.consolidation };
    let mut scheduler = Scheduler::new(policy, config.power)?;
    let mut state = DatacenterState::new(config.pm_count, &config.physical_machine())?;
    let locations: Vec<String> = state.pms.iter().map(|p| p.location.clone()).collect();

    let mut arrivals: BTreeMap<u32, Vec<WorkloadRequest>> = BTreeMap::new();
    for r in &requests {
        arrivals.entry(r.arrival).or_default().push(*r);
    }

    let mut waiting: Vec<WorkloadRequest> = Vec::new();
    let mut hours = Vec::with_capacity(config.horizon as usize);
    let mut events = Vec::with_capacity(config.horizon as usize);
    let mut deferred_hours = BTreeMap::new();
    let mut totals = EnergyBreakdown::default();
    let mut migrations = 0;

    for t in 0..config.horizon {
        state.clock = t;
        state.remove_finished();

        for r in arrivals.remove(&t).unwrap_or_default() {
            state.submit(r)?;
            waiting.push(r);
        }
        waiting.sort_by_key(|r| (r.arrival, r.id));

        let snapshot = state.snapshot();
        let mut price_now = BTreeMap::new();
        for loc in &locations {
            price_now.insert(loc.clone(), prices.price(loc, t)?);
        }

        let mut decision = scheduler
            .schedule_observed(&snapshot, &waiting, &price_now, &mut |w, r, pm| observer(w, r, pm, &price_now))?;
        for &(vm, pm) in &decision.assignments {
            state.place(vm, pm)?;
        }
        waiting.retain(|r| decision.deferred.contains(&VmId(r.id)));
        for &vm in &decision.deferred {
            *deferred_hours.entry(vm).or_insert(0) += 1;
        }

        decision.migrations = scheduler.consolidate(&state, &price_now)?;
        for &(vm, dst) in &decision.migrations {
            state.migrate(vm, dst)?;
        }
        migrations += decision.migrations.len();

        let destinations: Vec<PmId> = decision.migrations.iter().map(|&(_, pm)| pm).collect();
        let step = step_energy(&state, &config.power, &destinations, 1.0)?;
        let hour_prices: Vec<f64> = locations.iter().map(|l| price_now[l]).collect();
        let per_pm: Vec<EnergyBreakdown> =
            step.per_pm.iter().zip(&hour_prices).map(|(e, p)| EnergyBreakdown { cost: e.total * p, ..*e }).collect();
        let energy: EnergyBreakdown = per_pm.iter().sum();
        totals.accumulate(&energy);

        hours.push(HourRecord {
            hour: t,
            utilisation: snapshot_utilisation(&state),
            powered_on: state.powered_on.clone(),
            prices: hour_prices,
            per_pm,
            energy,
        });
        events.push(DecisionRecord {
            hour: t,
            policy: config.policy,
            assignments: decision.assignments,
            deferred: decision.deferred,
            migrations: decision.migrations,
            scores: config.log_scores.then_some(decision.scores),
        });
    }
    state.stop_all();

    let placed = state.vms.values().filter(|v| v.start_hour.is_some()).count();
    Ok(SimResult {
        policy: config.policy,
        locations,
        vm_count: requests.len(),
        hours,
        totals,
        events,
        deferred_hours,
        placed,
        deferred_at_horizon: waiting.len(),
        migrations,
    })
}

fn snapshot_utilisation(state: &DatacenterState) -> Vec<f64> {
    state.pms.iter().map(|p| state.utilisation(p.id)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoSReport {
    pub policy: PolicyKind,
    pub max_pm_utilisation: f64,
    pub mean_active_pm_count: f64,
    pub total_energy: f64,
    pub total_cost: f64,
    pub placed: usize,
    pub deferred: usize,
    pub migrations: usize,
}

pub fn compute_qos(result: &SimResult) -> QoSReport {
    let max_pm_utilisation = result.hours.iter().flat_map(|h| h.utilisation.iter().copied()).fold(0.0, f64::max);
    let active: usize = result.hours.iter().map(|h| h.powered_on.iter().filter(|&&on| on).count()).sum();
    let mean_active_pm_count = if result.hours.is_empty() { 0.0 } else { active as f64 / result.hours.len() as f64 };
    QoSReport {
        policy: result.policy,
        max_pm_utilisation,
        mean_active_pm_count,
        total_energy: result.totals.total,
        total_cost: result.totals.cost,
        placed: result.placed,
        deferred: result.deferred_at_horizon,
        migrations: result.migrations,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyDelta {
    pub policy: PolicyKind,
    pub baseline: PolicyKind,
    /// `100 (policy - baseline) / baseline`.
    pub energy_pct: f64,
    pub cost_pct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonTable {
    pub rows: Vec<QoSReport>,
    pub deltas: Vec<PolicyDelta>,
}

pub const COMPARISON_HEADER: &str = "policy,max_util,mean_active_pms,total_kwh,total_cost,placed,deferred,migrations";

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{COMPARISON_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{},{},{}",
                r.policy,
                r.max_pm_utilisation,
                r.mean_active_pm_count,
                r.total_energy,
                r.total_cost,
                r.placed,
                r.deferred,
                r.migrations
            );
        }
        out
    }

    pub fn deltas_csv(&self) -> String {
        let mut out = String::from("policy,baseline,energy_delta_pct,cost_delta_pct\n");
        for d in &self.deltas {
            let _ = writeln!(out, "{},{},{:.4},{:.4}", d.policy, d.baseline, d.energy_pct, d.cost_pct);
        }
        out
    }
}

fn pct(value: f64, baseline: f64) -> f64 {
    if baseline == 0.0 {
        0.0
    } else {
        100.0 * (value - baseline) / baseline
    }
}

/// Runs every config (concurrently) and tabulates their QoS. The configs
/// must describe the same scenario and differ only in policy and model.
pub fn compare(configs: &[SimConfig]) -> Result<ComparisonTable> {
    if let Some(first) = configs.first() {
        if let Some(bad) = configs.iter().find(|c| !first.same_scenario(c)) {
            return Err(Error::Config(format!(
                "config for {} differs from {} beyond the policy",
                bad.policy, first.policy
            )));
        }
    }
    let results: Vec<Result<SimResult>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs.iter().map(|c| scope.spawn(move || run(c))).collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let rows: Vec<QoSReport> = results.into_iter().map(|r| r.map(|r| compute_qos(&r))).collect::<Result<_>>()?;
    let mut deltas = Vec::new();
    for (i, a) in rows.iter().enumerate() {
        for b in &rows[i + 1..] {
            deltas.push(PolicyDelta {
                policy: a.policy,
                baseline: b.policy,
                energy_pct: pct(a.total_energy, b.total_energy),
                cost_pct: pct(a.total_cost, b.total_cost),
            });
        }
    }
    Ok(ComparisonTable { rows, deltas })
}
