use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use cloudsched_core::scheduler::{collect_training_data, train_scorer, PolicyKind};
use cloudsched_core::sim::{compare, compute_qos, load_trace_dir, run, PriceSource, SimConfig, WorkloadSpec};
use cloudsched_core::workload::generate_synthetic;
use cloudsched_core::Error;

use crate::config::{CliConfig, Verbosity};
use crate::output::write_atomic;
use crate::{Cli, Command, CompareArgs, GenWorkloadArgs, SimulateArgs, TrainArgs};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_IO: u8 = 3;
pub const EXIT_DIVERGENCE: u8 = 4;

/// Maps the first recognisable cause in the chain to a documented exit code.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Io(_) => EXIT_IO,
                Error::Divergence { .. } => EXIT_DIVERGENCE,
                _ => EXIT_CONFIG,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_CONFIG
}

struct Session {
    config: CliConfig,
    policy: Option<PolicyKind>,
}

impl Session {
    fn out(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn say(&self, message: impl AsRef<str>) {
        if self.config.verbosity != Verbosity::Quiet {
            eprintln!("{}", message.as_ref());
        }
    }

    fn detail(&self, message: impl AsRef<str>) {
        if self.config.verbosity == Verbosity::Verbose {
            eprintln!("{}", message.as_ref());
        }
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> anyhow::Result<PathBuf> {
        let path = self.out(name);
        write_atomic(&path, contents.as_ref())?;
        self.detail(format!("wrote {}", path.display()));
        Ok(path)
    }
}

pub fn dispatch(cli: Cli) -> anyhow::Result<()> {
    let mut config = match &cli.config {
        Some(path) => CliConfig::load(path)?,
        None => CliConfig::default(),
    };
    if let Some(out) = cli.out.clone() {
        config.out = out;
    }
    if let Some(seed) = cli.seed {
        config.set_seed(seed);
    }
    if let Some(policy) = cli.policy {
        config.sim.policy = policy;
    }
    if cli.log_scores {
        config.sim.log_scores = true;
    }
    if cli.quiet {
        config.verbosity = Verbosity::Quiet;
    } else if cli.verbose {
        config.verbosity = Verbosity::Verbose;
    }
    let ctx = Session { config, policy: cli.policy };

    match cli.command {
        Command::GenWorkload(args) => gen_workload(&ctx, args),
        Command::Train(args) => train(&ctx, args),
        Command::Simulate(args) => simulate(&ctx, args),
        Command::Compare(args) => compare_policies(&ctx, args, cli.seed),
    }
}

fn gen_workload(ctx: &Session, args: GenWorkloadArgs) -> anyhow::Result<()> {
    let sim = &ctx.config.sim;
    let count = args.count.unwrap_or(sim.vm_count);
    let horizon = args.horizon.unwrap_or(sim.horizon);
    let seed = match sim.workload {
        WorkloadSpec::Synthetic { seed } | WorkloadSpec::TraceDir { seed, .. } => seed,
        _ => sim.seed,
    };
    let set = match &args.trace_dir {
        Some(dir) => {
            if count == 0 || horizon == 0 {
                return Err(Error::Domain("--count and --horizon must be at least 1".into()).into());
            }
            load_trace_dir(dir, count, horizon, seed)
                .with_context(|| format!("reading traces from {}", dir.display()))?
        }
        None => generate_synthetic(count, horizon, seed)?,
    };
    let path = ctx.write("workload.json", set.to_json()?)?;
    ctx.say(format!("{} requests written to {}", set.len(), path.display()));
    Ok(())
}

fn loss_csv(trace: &[f64]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for (epoch, loss) in trace.iter().enumerate() {
        let _ = writeln!(out, "{epoch},{loss}");
    }
    out
}

fn train(ctx: &Session, args: TrainArgs) -> anyhow::Result<()> {
    let policy = ctx.policy.unwrap_or(if ctx.config.sim.policy.is_learned() {
        ctx.config.sim.policy
    } else {
        PolicyKind::Counter
    });
    if !policy.is_learned() {
        bail!(Error::Config(format!("train needs --policy counter or hunter, not {policy}")));
    }
    let mut section = ctx.config.train.clone();
    if let Some(v) = args.episodes {
        section.episodes = v;
    }
    if let Some(v) = args.epochs {
        section.epochs = v;
    }
    if let Some(v) = args.lr {
        section.learning_rate = v;
    }
    if let Some(v) = args.clusters {
        section.clusters = v;
    }
    if let Some(v) = args.batch_clusters {
        section.batch_clusters = v;
    }
    if !(section.learning_rate.is_finite() && section.learning_rate >= 0.0) {
        bail!(Error::Config(format!("learning rate {} must be a non-negative number", section.learning_rate)));
    }
    if section.clusters == 0 || section.batch_clusters == 0 {
        bail!(Error::Config("clusters and batch_clusters must be at least 1".into()));
    }

    let samples = collect_training_data(&ctx.config.sim, section.episodes, section.seed)?;
    ctx.say(format!("collected {} samples from {} episodes", samples.len(), section.episodes));
    let (model, trace) = train_scorer(policy, &samples, &section.optimiser(), section.clusters)?;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        ctx.say(format!("{policy}: mean loss {first:.4e} -> {last:.4e} over {} epochs", trace.len()));
    }
    let checkpoint = serde_json::to_string_pretty(&model.to_checkpoint())?;
    let model_path = ctx.write(&format!("model-{policy}.json"), checkpoint)?;
    ctx.write(&format!("loss-{policy}.csv"), loss_csv(&trace))?;
    ctx.say(format!("checkpoint written to {}", model_path.display()));
    Ok(())
}

fn apply_inputs(sim: &mut SimConfig, workload: Option<&Path>, prices: Option<&Path>) {
    if let Some(path) = workload {
        sim.workload = WorkloadSpec::File { path: path.to_path_buf() };
    }
    if let Some(path) = prices {
        sim.prices = PriceSource::File { path: path.to_path_buf() };
    }
}

fn simulate(ctx: &Session, args: SimulateArgs) -> anyhow::Result<()> {
    let mut sim = ctx.config.sim.clone();
    apply_inputs(&mut sim, args.workload.as_deref(), args.prices.as_deref());
    if let Some(model) = args.model {
        sim.model = Some(model);
    }
    let result = run(&sim)?;
    let qos = compute_qos(&result);
    ctx.write("result.json", result.to_json()?)?;
    ctx.write("qos.json", serde_json::to_string_pretty(&qos)?)?;
    ctx.write("energy.csv", result.energy_csv())?;
    ctx.write("utilisation.csv", result.utilisation_csv())?;
    ctx.write("decisions.jsonl", result.decision_log_jsonl()?)?;
    ctx.say(format!(
        "{}: {:.3} kWh, cost {:.4}, max utilisation {:.4}, mean active PMs {:.3}, placed {}, deferred {}, migrations {}",
        qos.policy,
        qos.total_energy,
        qos.total_cost,
        qos.max_pm_utilisation,
        qos.mean_active_pm_count,
        qos.placed,
        qos.deferred,
        qos.migrations
    ));
    Ok(())
}

fn compare_policies(ctx: &Session, args: CompareArgs, seed_override: Option<u64>) -> anyhow::Result<()> {
    let configs: Vec<SimConfig> = if args.configs.is_empty() {
        let policies = if args.policies.is_empty() { vec![ctx.config.sim.policy] } else { args.policies.clone() };
        policies
            .into_iter()
            .map(|policy| {
                let mut sim = SimConfig { policy, ..ctx.config.sim.clone() };
                apply_inputs(&mut sim, args.workload.as_deref(), args.prices.as_deref());
                match policy {
                    PolicyKind::Counter if args.counter_model.is_some() => sim.model = args.counter_model.clone(),
                    PolicyKind::Hunter if args.hunter_model.is_some() => sim.model = args.hunter_model.clone(),
                    _ => {}
                }
                sim
            })
            .collect()
    } else {
        let mut loaded = Vec::with_capacity(args.configs.len());
        for path in &args.configs {
            let mut file = CliConfig::load(path)?;
            if let Some(seed) = seed_override {
                file.set_seed(seed);
            }
            apply_inputs(&mut file.sim, args.workload.as_deref(), args.prices.as_deref());
            loaded.push(file.sim);
        }
        loaded
    };
    let table = compare(&configs)?;
    ctx.write("comparison.csv", table.to_csv())?;
    ctx.write("comparison-deltas.csv", table.deltas_csv())?;
    if ctx.config.verbosity != Verbosity::Quiet {
        print!("{}", table.to_csv());
    }
    Ok(())
}
