//! Hourly data-centre simulator with pluggable VM placement policies.
//!
//! The crate is organised along the life of a request: [`workload`] produces
//! requests, [`datacenter`] holds PMs and VMs, [`energy`] turns state into
//! kWh and cost, [`gnn`] holds the graph models, [`scheduler`] maps
//! requests to PMs and [`sim`] drives the hourly loop.

pub mod datacenter;
pub mod energy;
pub mod error;
pub mod gnn;
pub mod scheduler;
pub mod sim;
pub mod workload;

pub use datacenter::{DatacenterState, PhysicalMachine, PmId, VmId};
pub use energy::{EnergyBreakdown, PowerModel, PriceSeries};
pub use error::{Error, Result};
pub use gnn::GnnModel;
pub use scheduler::{Policy, PolicyKind, ScheduleDecision, Scheduler};
pub use sim::{compare, compute_qos, run, ComparisonTable, QoSReport, SimConfig, SimResult};
pub use workload::{WorkloadRequest, WorkloadSet};
