//! Power model, energy decomposition and electricity cost accounting.
//!
//! Total energy is split into processor, cooling and extra (switches,
//! lighting, migrations). Cooling and extra are proportional to processor
//! energy; migrations add a fixed penalty billed to the destination PM.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datacenter::{DatacenterState, PmId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PowerModel {
    /// Watts drawn by a powered-on PM with nothing allocated.
    pub idle_power: f64,
    /// Watts at full core allocation.
    pub peak_power: f64,
    /// Cooling energy per unit of processor energy.
    pub cooling_coefficient: f64,
    /// Switches and lighting energy per unit of processor energy.
    pub extra_coefficient: f64,
    /// kWh charged per VM migration.
    pub migration_penalty: f64,
}

impl Default for PowerModel {
    fn default() -> Self {
        Self {
            idle_power: 100.0,
            peak_power: 200.0,
            cooling_coefficient: 0.3,
            extra_coefficient: 0.05,
            migration_penalty: 0.01,
        }
    }
}

impl PowerModel {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.idle_power,
            self.peak_power,
            self.cooling_coefficient,
            self.extra_coefficient,
            self.migration_penalty,
        ]
        .iter()
        .all(|v| v.is_finite() && *v >= 0.0);
        if !finite {
            return Err(Error::Domain("power model values must be finite and non-negative".into()));
        }
        if self.idle_power > self.peak_power {
            return Err(Error::Domain("idle_power exceeds peak_power".into()));
        }
        Ok(())
    }

    /// Multiplier turning processor energy into total energy.
    pub fn overhead_factor(&self) -> f64 {
        1.0 + self.cooling_coefficient + self.extra_coefficient
    }
}

/// Instantaneous draw in watts, linear in utilisation between idle and peak.
pub fn pm_power(utilisation: f64, powered_on: bool, model: &PowerModel) -> Result<f64> {
    if !(0.0..=1.0).contains(&utilisation) {
        return Err(Error::Domain(format!("utilisation {utilisation} outside [0, 1]")));
    }
    if !powered_on {
        return Ok(0.0);
    }
    Ok(model.idle_power + (model.peak_power - model.idle_power) * utilisation)
}

/// Energy in kWh split by consumer, plus the cost once priced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub processor: f64,
    pub cooling: f64,
    pub extra: f64,
    pub total: f64,
    pub cost: f64,
}

impl EnergyBreakdown {
    pub fn new(processor: f64, cooling: f64, extra: f64) -> Self {
        Self { processor, cooling, extra, total: processor + cooling + extra, cost: 0.0 }
    }

    /// Component-wise sum; the total is recomputed from the summed parts.
    pub fn accumulate(&mut self, other: &EnergyBreakdown) {
        self.processor += other.processor;
        self.cooling += other.cooling;
        self.extra += other.extra;
        self.total = self.processor + self.cooling + self.extra;
        self.cost += other.cost;
    }

    /// Relative residual of `total - (processor + cooling + extra)`.
    pub fn closure_error(&self) -> f64 {
        let parts = self.processor + self.cooling + self.extra;
        (self.total - parts).abs() / parts.abs().max(f64::MIN_POSITIVE)
    }
}

impl<'a> std::iter::Sum<&'a EnergyBreakdown> for EnergyBreakdown {
    fn sum<I: Iterator<Item = &'a EnergyBreakdown>>(iter: I) -> Self {
        iter.fold(EnergyBreakdown::default(), |mut acc, e| {
            acc.accumulate(e);
            acc
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepEnergy {
    /// Indexed by PM.
    pub per_pm: Vec<EnergyBreakdown>,
    pub total: EnergyBreakdown,
}

/// Energy drawn over `dt` hours by the frozen `state`.
///
/// `migration_destinations` holds one entry per migration executed this
/// step; each adds the migration penalty to the destination PM's extra term.
pub fn step_energy(
    state: &DatacenterState,
    model: &PowerModel,
    migration_destinations: &[PmId],
    dt: f64,
) -> Result<StepEnergy> {
    if dt.is_nan() || dt <= 0.0 {
        return Err(Error::Domain(format!("step length {dt} must be positive")));
    }
    if let Some(bad) = migration_destinations.iter().find(|d| d.0 >= state.pms.len()) {
        return Err(Error::NotFound(bad.to_string()));
    }
    let mut per_pm = Vec::with_capacity(state.pms.len());
    for pm in &state.pms {
        let watts = pm_power(state.utilisation(pm.id), state.powered_on[pm.id.0], model)?;
        let processor = watts * dt / 1000.0;
        let migrations = migration_destinations.iter().filter(|&&d| d == pm.id).count();
        per_pm.push(EnergyBreakdown::new(
            processor,
            model.cooling_coefficient * processor,
            model.extra_coefficient * processor + model.migration_penalty * migrations as f64,
        ));
    }
    let total = per_pm.iter().sum();
    Ok(StepEnergy { per_pm, total })
}

/// Energy of one PM over one billing hour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PmHourEnergy {
    pub hour: u32,
    pub pm: PmId,
    pub location: String,
    pub energy: EnergyBreakdown,
}

/// Hourly per-location electricity prices in currency units per kWh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub prices: BTreeMap<String, Vec<f64>>,
    pub horizon: u32,
}

impl PriceSeries {
    pub fn new(prices: BTreeMap<String, Vec<f64>>, horizon: u32) -> Result<Self> {
        for (location, series) in &prices {
            if series.len() < horizon as usize {
                return Err(Error::Coverage { location: location.clone(), hour: series.len() as u32 });
            }
            if let Some(p) = series.iter().find(|p| !(p.is_finite() && **p >= 0.0)) {
                return Err(Error::Domain(format!("negative or non-finite price {p} at {location}")));
            }
        }
        Ok(Self { prices, horizon })
    }

    pub fn price(&self, location: &str, hour: u32) -> Result<f64> {
        self.prices
            .get(location)
            .and_then(|s| s.get(hour as usize))
            .copied()
            .ok_or_else(|| Error::Coverage { location: location.to_owned(), hour })
    }

    /// Fails with the first uncovered `(location, hour)` pair.
    pub fn check_coverage<'a>(&self, locations: impl IntoIterator<Item = &'a str>, horizon: u32) -> Result<()> {
        for location in locations {
            for hour in 0..horizon {
                self.price(location, hour)?;
            }
        }
        Ok(())
    }

    /// CSV with header `hour,<loc>...`, one row per hour.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("hour");
        for loc in self.prices.keys() {
            out.push(',');
            out.push_str(loc);
        }
        out.push('\n');
        for hour in 0..self.horizon as usize {
            let _ = write!(out, "{hour}");
            for series in self.prices.values() {
                let _ = write!(out, ",{}", series[hour]);
            }
            out.push('\n');
        }
        out
    }
}

/// Σ over rows of `total × price(location, hour)`.
pub fn energy_cost(rows: &[PmHourEnergy], prices: &PriceSeries) -> Result<f64> {
    rows.iter().try_fold(0.0, |acc, row| Ok(acc + row.energy.total * prices.price(&row.location, row.hour)?))
}

/// Diurnal synthetic prices: `0.10 + 0.04 sin(2π (h + phase) / 24)` plus
/// ±0.01 uniform noise, floored at 0.01, with a random phase per location.
pub fn generate_price_series<S: AsRef<str>>(locations: &[S], horizon: u32, seed: u64) -> Result<PriceSeries> {
    if horizon == 0 {
        return Err(Error::Domain("price horizon must be at least 1 hour".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut prices = BTreeMap::new();
    for location in locations {
        let phase: f64 = rng.gen_range(0.0..24.0);
        let series = (0..horizon)
            .map(|h| {
                let base = 0.10 + 0.04 * (2.0 * PI * (f64::from(h) + phase) / 24.0).sin();
                let noise: f64 = rng.gen_range(-0.01..=0.01);
                (base + noise).max(0.01)
            })
            .collect();
        prices.insert(location.as_ref().to_owned(), series);
    }
    PriceSeries::new(prices, horizon)
}

/// Parses the `hour,<loc>...` CSV format.
pub fn load_price_series(content: &[u8]) -> Result<PriceSeries> {
    let mut reader = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(content);
    let header = reader.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
    if header.get(0) != Some("hour") || header.len() < 2 {
        return Err(Error::Format("price header must be `hour,<location>,...`".into()));
    }
    let locations: Vec<String> = header.iter().skip(1).map(str::to_owned).collect();
    let mut series: Vec<Vec<f64>> = vec![Vec::new(); locations.len()];

    for (expected_hour, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Format(e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != header.len() {
            return Err(Error::Row {
                line,
                message: format!("expected {} cells, found {}", header.len(), record.len()),
            });
        }
        let hour: u32 =
            record[0].parse().map_err(|_| Error::Row { line, message: format!("bad hour `{}`", &record[0]) })?;
        if hour as usize != expected_hour {
            return Err(Error::Row { line, message: format!("missing hour {expected_hour} (found {hour})") });
        }
        for (i, cell) in record.iter().skip(1).enumerate() {
            let price: f64 = cell.parse().map_err(|_| Error::Row { line, message: format!("bad price `{cell}`") })?;
            if !(price.is_finite() && price >= 0.0) {
                return Err(Error::Row { line, message: format!("negative price {price} for {}", locations[i]) });
            }
            series[i].push(price);
        }
    }
    let horizon = series.first().map_or(0, Vec::len) as u32;
    if horizon == 0 {
        return Err(Error::Format("price series has no rows".into()));
    }
    PriceSeries::new(locations.into_iter().zip(series).collect(), horizon)
}

/// One line of the hourly per-PM energy report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReportRow {
    pub hour: u32,
    pub pm: PmId,
    pub location: String,
    pub energy: EnergyBreakdown,
    pub price: f64,
}

pub const ENERGY_REPORT_HEADER: &str = "hour,pm,location,processor_kwh,cooling_kwh,extra_kwh,total_kwh,price,cost";

pub fn energy_report_csv(rows: &[EnergyReportRow]) -> String {
    let mut out = String::from(ENERGY_REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let e = &r.energy;
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.hour, r.pm, r.location, e.processor, e.cooling, e.extra, e.total, r.price, e.cost
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacenter::{PhysicalMachine, VmId};
    use crate::workload::WorkloadRequest;
    use approx::assert_relative_eq;

    fn state_with(placements: &[(u32, usize)]) -> DatacenterState {
        let mut state = DatacenterState::new(2, &PhysicalMachine::reference()).unwrap();
        for (i, &(cores, pm)) in placements.iter().enumerate() {
            let id = i as u32;
            state.submit(WorkloadRequest { id, cpu_frequency: 2000, cores, ram: 1, duration: 10, arrival: 0 }).unwrap();
            state.place(VmId(id), PmId(pm)).unwrap();
        }
        state
    }

    #[test]
    fn power_endpoints() {
        let m = PowerModel::default();
        assert_eq!(pm_power(0.0, true, &m).unwrap(), 100.0);
        assert_eq!(pm_power(1.0, true, &m).unwrap(), 200.0);
        assert_eq!(pm_power(0.5, true, &m).unwrap(), 150.0);
        assert_eq!(pm_power(0.7, false, &m).unwrap(), 0.0);
        assert!(matches!(pm_power(1.2, true, &m), Err(Error::Domain(_))));
        assert!(matches!(pm_power(-0.1, false, &m), Err(Error::Domain(_))));
    }

    #[test]
    fn idle_hour_breakdown() {
        // A PM is on but idle only transiently in the live system; force it here.
        let mut state = state_with(&[]);
        state.powered_on[0] = true;
        let e = step_energy(&state, &PowerModel::default(), &[], 1.0).unwrap();
        assert_relative_eq!(e.total.processor, 0.1, max_relative = 1e-12);
        assert_relative_eq!(e.total.cooling, 0.03, max_relative = 1e-12);
        assert_relative_eq!(e.total.extra, 0.005, max_relative = 1e-12);
        assert_relative_eq!(e.total.total, 0.135, max_relative = 1e-12);
    }

    #[test]
    fn all_off_is_zero_except_penalty() {
        let state = state_with(&[]);
        let e = step_energy(&state, &PowerModel::default(), &[], 1.0).unwrap();
        assert_eq!(e.total, EnergyBreakdown::default());
        let e = step_energy(&state, &PowerModel::default(), &[PmId(0), PmId(1)], 1.0).unwrap();
        assert_relative_eq!(e.total.extra, 0.02, max_relative = 1e-12);
        assert_relative_eq!(e.total.total, 0.02, max_relative = 1e-12);
        assert_eq!(e.total.processor, 0.0);
        assert!(step_energy(&state, &PowerModel::default(), &[], 0.0).is_err());
    }

    #[test]
    fn cost_arithmetic() {
        let prices =
            PriceSeries::new([("a".to_string(), vec![0.10]), ("b".to_string(), vec![0.20])].into(), 1).unwrap();
        let row = |loc: &str, kwh: f64| PmHourEnergy {
            hour: 0,
            pm: PmId(0),
            location: loc.into(),
            energy: EnergyBreakdown::new(kwh, 0.0, 0.0),
        };
        assert_relative_eq!(energy_cost(&[row("a", 0.1)], &prices).unwrap(), 0.01, max_relative = 1e-12);
        assert_eq!(energy_cost(&[row("a", 0.0)], &prices).unwrap(), 0.0);
        let a = energy_cost(&[row("a", 0.3)], &prices).unwrap();
        let b = energy_cost(&[row("b", 0.3)], &prices).unwrap();
        assert_eq!(b, 2.0 * a);
        match energy_cost(&[row("c", 1.0)], &prices) {
            Err(Error::Coverage { location, hour }) => assert_eq!((location.as_str(), hour), ("c", 0)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn synthetic_prices() {
        let locs = ["loc-0", "loc-1"];
        let s = generate_price_series(&locs, 24, 3).unwrap();
        assert_eq!(s.prices.values().map(Vec::len).sum::<usize>(), 48);
        assert_eq!(s, generate_price_series(&locs, 24, 3).unwrap());
        let wide = generate_price_series(&locs, 500, 9).unwrap();
        assert!(wide.prices.values().flatten().all(|p| (0.01..=0.15).contains(p)));
    }

    #[test]
    fn loads_price_csv() {
        let s = load_price_series(b"hour,loc-0,loc-1\n0,0.1,0.2\n1,0.11,0.21\n2,0.12,0.22\n").unwrap();
        assert_eq!(s.horizon, 3);
        assert_eq!(s.price("loc-1", 2).unwrap(), 0.22);
        assert_eq!(load_price_series(s.to_csv().as_bytes()).unwrap(), s);
    }

    #[test]
    fn rejects_bad_price_csv() {
        assert!(matches!(load_price_series(b"hour,a\n0,0.1\n1,-0.2\n"), Err(Error::Row { line: 3, .. })));
        match load_price_series(b"hour,a\n0,0.1\n1,0.1\n3,0.1\n") {
            Err(Error::Row { line, message }) => {
                assert_eq!(line, 4);
                assert!(message.contains("missing hour 2"), "{message}");
            }
            other => panic!("{other:?}"),
        }
        assert!(matches!(load_price_series(b"hour,a,b\n0,0.1\n"), Err(Error::Row { line: 2, .. })));
    }

    #[test]
    fn report_formatting() {
        let rows = [EnergyReportRow {
            hour: 0,
            pm: PmId(1),
            location: "loc-1".into(),
            energy: EnergyBreakdown { cost: 0.0135, ..EnergyBreakdown::new(0.1, 0.03, 0.005) },
            price: 0.1,
        }];
        assert_eq!(
            energy_report_csv(&rows),
            format!("{ENERGY_REPORT_HEADER}\n0,pm-1,loc-1,0.100000,0.030000,0.005000,0.135000,0.100000,0.013500\n")
        );
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn placements() -> impl Strategy<Value = Vec<(u32, usize)>> {
            prop::collection::vec((1u32..12, 0usize..2), 0..6).prop_filter("fits", |p| {
                (0..2).all(|pm| p.iter().filter(|x| x.1 == pm).map(|x| x.0).sum::<u32>() <= 32)
            })
        }

        proptest! {
            #[test]
            fn additivity_and_closure(p in placements(), migrations in prop::collection::vec(0usize..2, 0..3)) {
                let state = state_with(&p);
                let dsts: Vec<PmId> = migrations.into_iter().map(PmId).collect();
                let m = PowerModel::default();
                let two = step_energy(&state, &m, &[], 2.0).unwrap();
                let one = step_energy(&state, &m, &[], 1.0).unwrap();
                prop_assert!((two.total.total - 2.0 * one.total.total).abs() <= 1e-9 * two.total.total.max(1e-12));
                let with = step_energy(&state, &m, &dsts, 1.0).unwrap();
                for e in with.per_pm.iter().chain([&with.total]) {
                    prop_assert!(e.closure_error() <= 1e-9);
                    prop_assert!(e.processor >= 0.0 && e.cooling >= 0.0 && e.extra >= 0.0);
                }
                let on = state.powered_on_count() as f64;
                prop_assert!(with.total.processor >= on * 0.1 - 1e-12);
            }

            #[test]
            fn monotone_in_utilisation(a in 0.0f64..=1.0, b in 0.0f64..=1.0) {
                let m = PowerModel::default();
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                prop_assert!(pm_power(lo, true, &m).unwrap() <= pm_power(hi, true, &m).unwrap());
            }

            #[test]
            fn cost_scales_linearly(kwh in prop::collection::vec(0.0f64..5.0, 1..10), c in 0.0f64..10.0, seed in any::<u64>()) {
                let prices = generate_price_series(&["x"], kwh.len() as u32, seed).unwrap();
                let scaled = PriceSeries::new(
                    prices.prices.iter().map(|(k, v)| (k.clone(), v.iter().map(|p| p * c).collect())).collect(),
                    prices.horizon,
                ).unwrap();
                let rows: Vec<_> = kwh.iter().enumerate().map(|(h, &e)| PmHourEnergy {
                    hour: h as u32, pm: PmId(0), location: "x".into(), energy: EnergyBreakdown::new(e, 0.0, 0.0),
                }).collect();
                let base = energy_cost(&rows, &prices).unwrap();
                let s = energy_cost(&rows, &scaled).unwrap();
                prop_assert!((s - c * base).abs() <= 1e-9 * (c * base).abs().max(1e-12));
            }
        }
    }
}
