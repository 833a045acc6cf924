//! Data-centre inventory and the manager's lifecycle actions.
//!
//! Mutating operations validate everything before touching the state, so a
//! returned error always leaves the state exactly as it was.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Resource, Result};
use crate::workload::WorkloadRequest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PmId(pub usize);

impl fmt::Display for PmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "pm-{}", self.0)
    }
}

impl FromStr for PmId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        s.strip_prefix("pm-")
            .and_then(|n| n.parse().ok())
            .map(PmId)
            .ok_or_else(|| Error::NotFound(format!("malformed PM id `{s}`")))
    }
}

impl Serialize for PmId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for PmId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VmId(pub u32);

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm-{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicalMachine {
    pub id: PmId,
    /// Price-zone key.
    pub location: String,
    pub cores: u32,
    /// MHz.
    pub max_frequency: u32,
    /// MHz.
    pub min_frequency: u32,
    /// GiB.
    pub ram: u32,
    /// Watts.
    pub peak_power: f64,
    /// Watts.
    pub idle_power: f64,
}

impl PhysicalMachine {
    /// Server from the reference configuration: 32 cores at 1600–3400 MHz,
    /// 64 GiB, 100 W idle and 200 W peak.
    pub fn reference() -> Self {
        Self {
            id: PmId(0),
            location: "loc-0".into(),
            cores: 32,
            max_frequency: 3400,
            min_frequency: 1600,
            ram: 64,
            peak_power: 200.0,
            idle_power: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.idle_power > 0.0 && self.idle_power <= self.peak_power) {
            return Err(Error::Domain(format!(
                "need 0 < idle_power <= peak_power, got {} / {}",
                self.idle_power, self.peak_power
            )));
        }
        if self.min_frequency > self.max_frequency {
            return Err(Error::Domain("min_frequency exceeds max_frequency".into()));
        }
        if self.cores == 0 || self.ram == 0 {
            return Err(Error::Domain("PM needs at least one core and 1 GiB".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VmState {
    Pending,
    Running,
    Paused,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualMachine {
    pub id: VmId,
    pub request: WorkloadRequest,
    pub state: VmState,
    pub placed_on: Option<PmId>,
    pub start_hour: Option<u32>,
    pub migrations: u32,
}

/// Free resources of one PM at the time the snapshot was taken.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmSnapshot {
    pub pm: PmId,
    pub location: String,
    pub cores: u32,
    pub ram: u32,
    pub free_cores: u32,
    pub free_ram: u32,
    pub max_frequency: u32,
    pub powered_on: bool,
    pub utilisation: f64,
}

impl PmSnapshot {
    /// Books `request` against this entry, as a scheduler does on its working copy.
    pub fn reserve(&mut self, request: &WorkloadRequest) {
        debug_assert!(feasible(self, request));
        self.free_cores -= request.cores;
        self.free_ram -= request.ram;
        self.powered_on = true;
        self.utilisation = f64::from(self.cores - self.free_cores) / f64::from(self.cores);
    }

    /// Inverse of [`PmSnapshot::reserve`]; powers the entry off when it empties.
    pub fn release(&mut self, request: &WorkloadRequest) {
        self.free_cores += request.cores;
        self.free_ram += request.ram;
        self.utilisation = f64::from(self.cores - self.free_cores) / f64::from(self.cores);
        if self.free_cores == self.cores && self.free_ram == self.ram {
            self.powered_on = false;
        }
    }
}

pub type ResourceSnapshot = Vec<PmSnapshot>;

/// Whether `request` fits on the PM described by `entry` (all bounds inclusive).
pub fn feasible(entry: &PmSnapshot, request: &WorkloadRequest) -> bool {
    first_shortfall(entry, request).is_none()
}

fn first_shortfall(entry: &PmSnapshot, request: &WorkloadRequest) -> Option<Resource> {
    if entry.free_cores < request.cores {
        Some(Resource::Cores)
    } else if entry.free_ram < request.ram {
        Some(Resource::Ram)
    } else if entry.max_frequency < request.cpu_frequency {
        Some(Resource::Frequency)
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatacenterState {
    pub clock: u32,
    pub pms: Vec<PhysicalMachine>,
    pub powered_on: Vec<bool>,
    pub vms: BTreeMap<VmId, VirtualMachine>,
    pub placements: BTreeMap<VmId, PmId>,
}

impl DatacenterState {
    /// `pm_count` copies of `template` named `pm-i` at location `loc-i`, all powered off.
    pub fn new(pm_count: usize, template: &PhysicalMachine) -> Result<Self> {
        if pm_count == 0 {
            return Err(Error::Domain("datacenter needs at least one PM".into()));
        }
        template.validate()?;
        let pms = (0..pm_count)
            .map(|i| PhysicalMachine { id: PmId(i), location: format!("loc-{i}"), ..template.clone() })
            .collect();
        Ok(Self { clock: 0, pms, powered_on: vec![false; pm_count], vms: BTreeMap::new(), placements: BTreeMap::new() })
    }

    pub fn pm(&self, id: PmId) -> Result<&PhysicalMachine> {
        self.pms.get(id.0).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    pub fn vm(&self, id: VmId) -> Result<&VirtualMachine> {
        self.vms.get(&id).ok_or_else(|| Error::NotFound(id.to_string()))
    }

    /// Registers a request as a pending VM whose id is the request id.
    pub fn submit(&mut self, request: WorkloadRequest) -> Result<VmId> {
        request.validate()?;
        let id = VmId(request.id);
        if self.vms.contains_key(&id) {
            return Err(Error::Domain(format!("{id} already submitted")));
        }
        self.vms.insert(
            id,
            VirtualMachine { id, request, state: VmState::Pending, placed_on: None, start_hour: None, migrations: 0 },
        );
        Ok(id)
    }

    /// Cores and GiB currently reserved on `pm`.
    pub fn used(&self, pm: PmId) -> (u32, u32) {
        self.placements.iter().filter(|(_, &p)| p == pm).fold((0, 0), |(c, r), (vm, _)| {
            let req = &self.vms[vm].request;
            (c + req.cores, r + req.ram)
        })
    }

    pub fn vms_on(&self, pm: PmId) -> impl Iterator<Item = VmId> + '_ {
        self.placements.iter().filter(move |(_, &p)| p == pm).map(|(&vm, _)| vm)
    }

    pub fn utilisation(&self, pm: PmId) -> f64 {
        let (cores, _) = self.used(pm);
        f64::from(cores) / f64::from(self.pms[pm.0].cores)
    }

    pub fn powered_on_count(&self) -> usize {
        self.powered_on.iter().filter(|&&on| on).count()
    }

    pub fn snapshot(&self) -> ResourceSnapshot {
        self.pms
            .iter()
            .map(|pm| {
                let (cores, ram) = self.used(pm.id);
                PmSnapshot {
                    pm: pm.id,
                    location: pm.location.clone(),
                    cores: pm.cores,
                    ram: pm.ram,
                    free_cores: pm.cores - cores,
                    free_ram: pm.ram - ram,
                    max_frequency: pm.max_frequency,
                    powered_on: self.powered_on[pm.id.0],
                    utilisation: f64::from(cores) / f64::from(pm.cores),
                }
            })
            .collect()
    }

    fn entry(&self, pm: PmId) -> Result<PmSnapshot> {
        let machine = self.pm(pm)?;
        let (cores, ram) = self.used(pm);
        Ok(PmSnapshot {
            pm,
            location: machine.location.clone(),
            cores: machine.cores,
            ram: machine.ram,
            free_cores: machine.cores - cores,
            free_ram: machine.ram - ram,
            max_frequency: machine.max_frequency,
            powered_on: self.powered_on[pm.0],
            utilisation: f64::from(cores) / f64::from(machine.cores),
        })
    }

    fn check_fits(&self, vm: VmId, pm: PmId) -> Result<()> {
        let entry = self.entry(pm)?;
        let request = &self.vm(vm)?.request;
        match first_shortfall(&entry, request) {
            None => Ok(()),
            Some(resource) => Err(Error::Capacity { pm: pm.to_string(), vm: vm.to_string(), resource }),
        }
    }

    /// Starts (or resumes) `vm` on `pm`, booting the PM if needed.
    pub fn place(&mut self, vm: VmId, pm: PmId) -> Result<()> {
        let state = self.vm(vm)?.state;
        if !matches!(state, VmState::Pending | VmState::Paused) {
            return Err(Error::Domain(format!("{vm} is {state:?}, expected pending or paused")));
        }
        self.check_fits(vm, pm)?;

        let clock = self.clock;
        let v = self.vms.get_mut(&vm).expect("checked above");
        v.state = VmState::Running;
        v.placed_on = Some(pm);
        v.start_hour.get_or_insert(clock);
        self.placements.insert(vm, pm);
        self.powered_on[pm.0] = true;
        Ok(())
    }

    /// Moves a running VM to `dst`, powering the source off if it empties.
    pub fn migrate(&mut self, vm: VmId, dst: PmId) -> Result<()> {
        let v = self.vm(vm)?;
        if v.state != VmState::Running {
            return Err(Error::Domain(format!("{vm} is not running")));
        }
        let src = v.placed_on.expect("running VMs are placed");
        self.pm(dst)?;
        if src == dst {
            return Err(Error::NoOp { vm: vm.to_string(), pm: dst.to_string() });
        }
        self.check_fits(vm, dst)?;

        let v = self.vms.get_mut(&vm).expect("checked above");
        v.placed_on = Some(dst);
        v.migrations += 1;
        self.placements.insert(vm, dst);
        self.powered_on[dst.0] = true;
        self.power_off_if_empty(src);
        Ok(())
    }

    /// Suspends a running VM, releasing its reservation.
    pub fn pause(&mut self, vm: VmId) -> Result<()> {
        if self.vm(vm)?.state != VmState::Running {
            return Err(Error::Domain(format!("{vm} is not running")));
        }
        let pm = self.unplace(vm);
        self.vms.get_mut(&vm).expect("checked above").state = VmState::Paused;
        self.power_off_if_empty(pm);
        Ok(())
    }

    /// Removes a VM from the inventory entirely.
    pub fn delete(&mut self, vm: VmId) -> Result<()> {
        let state = self.vm(vm)?.state;
        if state == VmState::Running {
            let pm = self.unplace(vm);
            self.power_off_if_empty(pm);
        }
        self.vms.remove(&vm);
        Ok(())
    }

    /// Marks every running VM whose duration has elapsed as finished, unplaces
    /// it and powers off PMs that are left empty. Returns the finished ids.
    pub fn remove_finished(&mut self) -> Vec<VmId> {
        let clock = self.clock;
        let done: Vec<VmId> = self
            .vms
            .values()
            .filter(|v| v.state == VmState::Running)
            .filter(|v| {
                let start = v.start_hour.expect("running VMs have started");
                clock >= start + v.request.duration
            })
            .map(|v| v.id)
            .collect();
        for &vm in &done {
            let pm = self.unplace(vm);
            self.vms.get_mut(&vm).expect("listed above").state = VmState::Finished;
            self.power_off_if_empty(pm);
        }
        done
    }

    /// Stops every running VM regardless of remaining duration.
    pub fn stop_all(&mut self) -> Vec<VmId> {
        let running: Vec<VmId> = self.placements.keys().copied().collect();
        for &vm in &running {
            let pm = self.unplace(vm);
            self.vms.get_mut(&vm).expect("placed VMs exist").state = VmState::Finished;
            self.power_off_if_empty(pm);
        }
        running
    }

    fn unplace(&mut self, vm: VmId) -> PmId {
        let pm = self.placements.remove(&vm).expect("VM is placed");
        self.vms.get_mut(&vm).expect("VM exists").placed_on = None;
        pm
    }

    fn power_off_if_empty(&mut self, pm: PmId) {
        if !self.placements.values().any(|&p| p == pm) {
            self.powered_on[pm.0] = false;
        }
    }

    /// Checks capacity, placement consistency and power discipline.
    pub fn check_invariants(&self) -> Result<()> {
        for pm in &self.pms {
            let (cores, ram) = self.used(pm.id);
            if cores > pm.cores || ram > pm.ram {
                return Err(Error::Domain(format!("{} over capacity", pm.id)));
            }
            let hosts = self.placements.values().any(|&p| p == pm.id);
            if hosts != self.powered_on[pm.id.0] {
                return Err(Error::Domain(format!("{} power flag disagrees with placements", pm.id)));
            }
        }
        for (vm, pm) in &self.placements {
            let v = self.vm(*vm)?;
            if v.placed_on != Some(*pm) || v.state != VmState::Running {
                return Err(Error::Domain(format!("{vm} placement map disagrees with VM record")));
            }
        }
        for v in self.vms.values() {
            let mapped = self.placements.get(&v.id).copied();
            if v.placed_on != mapped || (v.state == VmState::Running) != mapped.is_some() {
                return Err(Error::Domain(format!("{} record disagrees with placement map", v.id)));
            }
        }
        Ok(())
    }

    /// JSON dump `{clock, pms, vms, placements}` with stable key order.
    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Dump<'a> {
            clock: u32,
            pms: Vec<PmDump<'a>>,
            vms: Vec<&'a VirtualMachine>,
            placements: &'a BTreeMap<VmId, PmId>,
        }
        #[derive(Serialize)]
        struct PmDump<'a> {
            #[serde(flatten)]
            pm: &'a PhysicalMachine,
            powered_on: bool,
        }
        let dump = Dump {
            clock: self.clock,
            pms: self.pms.iter().map(|pm| PmDump { pm, powered_on: self.powered_on[pm.id.0] }).collect(),
            vms: self.vms.values().collect(),
            placements: &self.placements,
        };
        Ok(serde_json::to_string_pretty(&dump)?)
    }
}
