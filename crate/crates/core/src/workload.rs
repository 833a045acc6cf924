//! Workload requests: Bitbrains trace ingestion and the synthetic generator.
//!
//! A request is a static reservation (frequency, cores, RAM, duration) that
//! arrives at a given simulation hour. Traces are reduced to a request by
//! taking the peak provisioned values over the whole series.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MIN_FREQUENCY_MHZ: u32 = 1600;
pub const MAX_FREQUENCY_MHZ: u32 = 3400;
pub const MIN_DURATION_HOURS: u32 = 1;
pub const MAX_DURATION_HOURS: u32 = 48;
/// Largest PM configuration a trace-derived request is clamped to.
pub const MAX_REQUEST_CORES: u32 = 32;
pub const MAX_REQUEST_RAM_GIB: u32 = 64;

const SYNTHETIC_CORES: [u32; 4] = [1, 2, 4, 8];
const SYNTHETIC_RAM_GIB: [u32; 5] = [1, 2, 4, 8, 16];
const KIB_PER_GIB: f64 = 1024.0 * 1024.0;
const MS_PER_HOUR: u64 = 3_600_000;

/// One cloud-user demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct WorkloadRequest {
    pub id: u32,
    /// MHz required per core.
    pub cpu_frequency: u32,
    pub cores: u32,
    /// GiB.
    pub ram: u32,
    /// Whole hours.
    pub duration: u32,
    /// Simulation hour at which the request is submitted.
    pub arrival: u32,
}

impl WorkloadRequest {
    pub fn validate(&self) -> Result<()> {
        if self.cores == 0 {
            return Err(Error::Domain(format!("request {} has zero cores", self.id)));
        }
        if self.ram == 0 {
            return Err(Error::Domain(format!("request {} has zero ram", self.id)));
        }
        if self.duration == 0 {
            return Err(Error::Domain(format!("request {} has zero duration", self.id)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WorkloadSource {
    Synthetic,
    Trace,
}

/// Requests sorted by `(arrival, id)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkloadSet {
    pub requests: Vec<WorkloadRequest>,
    pub source: WorkloadSource,
    pub seed: Option<u64>,
}

impl WorkloadSet {
    pub fn new(mut requests: Vec<WorkloadRequest>, source: WorkloadSource, seed: Option<u64>) -> Self {
        requests.sort_by_key(|r| (r.arrival, r.id));
        Self { requests, source, seed }
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Serializes the requests as a JSON array of request objects.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.requests)?)
    }

    /// Parses a JSON array of request objects written by [`WorkloadSet::to_json`].
    pub fn from_json(content: &[u8], source: WorkloadSource) -> Result<Self> {
        let requests: Vec<WorkloadRequest> = serde_json::from_slice(content)?;
        for r in &requests {
            r.validate()?;
        }
        Ok(Self::new(requests, source, None))
    }
}

/// One row of a Bitbrains trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceSample {
    pub timestamp_ms: u64,
    pub cores: u32,
    /// MHz.
    pub provisioned_capacity: f64,
    /// MHz, never above `provisioned_capacity`.
    pub cpu_usage: f64,
    /// KiB, as stored in the trace.
    pub provisioned_memory: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmTrace {
    pub vm_name: String,
    pub samples: Vec<TraceSample>,
    /// Rows whose usage exceeded provisioned capacity and were clamped.
    pub clamped_samples: usize,
}

#[derive(Debug, Clone, Copy)]
enum Column {
    Timestamp,
    Cores,
    Capacity,
    Usage,
    Memory,
}

impl Column {
    const REQUIRED: [Column; 5] = [Column::Timestamp, Column::Cores, Column::Capacity, Column::Usage, Column::Memory];

    fn header(self) -> &'static str {
        match self {
            Column::Timestamp => "Timestamp [ms]",
            Column::Cores => "CPU cores",
            Column::Capacity => "CPU capacity provisioned [MHZ]",
            Column::Usage => "CPU usage [MHZ]",
            Column::Memory => "Memory capacity provisioned [KB]",
        }
    }

    fn matches(self, normalized: &str) -> bool {
        match self {
            Column::Timestamp => normalized == "timestamp [ms]" || normalized == "timestamp",
            _ => normalized == normalize_header(self.header()),
        }
    }
}

fn normalize_header(cell: &str) -> String {
    cell.split_whitespace().collect::<Vec<_>>().join(" ").to_ascii_lowercase()
}

/// Parses one Bitbrains per-VM file (semicolon separated, one header line).
///
/// Unused columns (disk, network, usage percentages) are accepted and
/// ignored. Rows with `cpu_usage > provisioned_capacity` are clamped and
/// counted in [`VmTrace::clamped_samples`].
pub fn parse_trace_file(vm_name: &str, content: &[u8]) -> Result<VmTrace> {
    let text = std::str::from_utf8(content).map_err(|e| Error::Format(format!("trace {vm_name} is not UTF-8: {e}")))?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| Error::Format(format!("trace {vm_name} is empty")))?;

    let names: Vec<String> = header.split(';').map(normalize_header).collect();
    let mut index = [0usize; 5];
    for (slot, column) in index.iter_mut().zip(Column::REQUIRED) {
        *slot = names
            .iter()
            .position(|n| column.matches(n))
            .ok_or_else(|| Error::Format(format!("missing column `{}`", column.header())))?;
    }
    let width = names.len();

    let mut samples = Vec::new();
    let mut clamped_samples = 0;
    for (i, line) in lines {
        let line_no = i as u64 + 1;
        let cells: Vec<&str> = line.split(';').map(str::trim).collect();
        if cells.len() < width {
            return Err(Error::Row {
                line: line_no,
                message: format!("expected {width} cells, found {}", cells.len()),
            });
        }
        let number = |column: usize| -> Result<f64> {
            let cell = cells[index[column]];
            match cell.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Row {
                    line: line_no,
                    message: format!("non-numeric value `{cell}` in `{}`", Column::REQUIRED[column].header()),
                }),
            }
        };
        let timestamp = number(0)?;
        let cores = number(1)?;
        let capacity = number(2)?;
        let mut usage = number(3)?;
        let memory = number(4)?;
        if timestamp < 0.0 || cores < 0.0 || cores.fract() != 0.0 || capacity < 0.0 || usage < 0.0 || memory < 0.0 {
            return Err(Error::Row { line: line_no, message: "negative or fractional value".into() });
        }
        let timestamp_ms = timestamp as u64;
        if let Some(prev) = samples.last().map(|s: &TraceSample| s.timestamp_ms) {
            if timestamp_ms <= prev {
                return Err(Error::Row {
                    line: line_no,
                    message: format!("timestamp {timestamp_ms} not after {prev}"),
                });
            }
        }
        if usage > capacity {
            usage = capacity;
            clamped_samples += 1;
        }
        samples.push(TraceSample {
            timestamp_ms,
            cores: cores as u32,
            provisioned_capacity: capacity,
            cpu_usage: usage,
            provisioned_memory: memory,
        });
    }

    Ok(VmTrace { vm_name: vm_name.to_owned(), samples, clamped_samples })
}

impl VmTrace {
    /// Writes the trace back in the Bitbrains layout, restricted to the
    /// columns this crate reads.
    pub fn to_bitbrains_string(&self) -> String {
        let mut out = Column::REQUIRED.map(Column::header).join(";\t");
        out.push('\n');
        for s in &self.samples {
            let _ = writeln!(
                out,
                "{};\t{};\t{};\t{};\t{}",
                s.timestamp_ms, s.cores, s.provisioned_capacity, s.cpu_usage, s.provisioned_memory
            );
        }
        out
    }
}

/// Reduces a trace to a static reservation using peak provisioned values.
pub fn derive_request(trace: &VmTrace, id: u32, arrival: u32) -> Result<WorkloadRequest> {
    let (first, last) = match (trace.samples.first(), trace.samples.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::Domain(format!("trace {} has no samples", trace.vm_name))),
    };

    let cores = trace.samples.iter().map(|s| s.cores).max().unwrap_or(1);
    let per_core = trace
        .samples
        .iter()
        .filter(|s| s.cores > 0)
        .map(|s| s.provisioned_capacity / f64::from(s.cores))
        .fold(0.0_f64, f64::max);
    let memory_kib = trace.samples.iter().map(|s| s.provisioned_memory).fold(0.0_f64, f64::max);

    let span_ms = last.timestamp_ms - first.timestamp_ms;
    let hours = span_ms.div_ceil(MS_PER_HOUR);
    let duration = hours.clamp(u64::from(MIN_DURATION_HOURS), u64::from(MAX_DURATION_HOURS)) as u32;

    let cpu_frequency = (per_core.round() as u32).clamp(MIN_FREQUENCY_MHZ, MAX_FREQUENCY_MHZ);
    let ram = ((memory_kib / KIB_PER_GIB).ceil() as u32).clamp(1, MAX_REQUEST_RAM_GIB);

    Ok(WorkloadRequest { id, cpu_frequency, cores: cores.clamp(1, MAX_REQUEST_CORES), ram, duration, arrival })
}

/// Draws `count` requests with uniform arrivals over `[0, horizon - 1]`.
pub fn generate_synthetic(count: usize, horizon: u32, seed: u64) -> Result<WorkloadSet> {
    if count == 0 {
        return Err(Error::Domain("workload count must be at least 1".into()));
    }
    if horizon == 0 {
        return Err(Error::Domain("horizon must be at least 1 hour".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let requests = (0..count as u32)
        .map(|id| WorkloadRequest {
            id,
            arrival: rng.gen_range(0..horizon),
            duration: rng.gen_range(MIN_DURATION_HOURS..=MAX_DURATION_HOURS),
            cores: SYNTHETIC_CORES[rng.gen_range(0..SYNTHETIC_CORES.len())],
            cpu_frequency: rng.gen_range(MIN_FREQUENCY_MHZ..=MAX_FREQUENCY_MHZ),
            ram: SYNTHETIC_RAM_GIB[rng.gen_range(0..SYNTHETIC_RAM_GIB.len())],
        })
        .collect();
    Ok(WorkloadSet::new(requests, WorkloadSource::Synthetic, Some(seed)))
}
