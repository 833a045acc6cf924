use std::collections::BTreeMap;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::datacenter::{feasible, PmId, PmSnapshot, VmId};
use crate::error::{Error, Result};
use crate::workload::{
    WorkloadRequest, MAX_DURATION_HOURS, MAX_FREQUENCY_MHZ, MAX_REQUEST_CORES, MAX_REQUEST_RAM_GIB, MIN_FREQUENCY_MHZ,
};

/// Row-major dense matrix of `f64`.
pub type DenseMatrix = Array2<f64>;

pub const FEATURE_DIM: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NodeKind {
    Pm(PmId),
    Vm(VmId),
}

impl NodeKind {
    pub fn is_vm(&self) -> bool {
        matches!(self, NodeKind::Vm(_))
    }
}

/// Featured graph over PM and pending-VM nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct StateGraph {
    pub nodes: Vec<NodeKind>,
    pub features: DenseMatrix,
    /// Symmetric 0/1 with zero diagonal.
    pub adjacency: DenseMatrix,
}

impl StateGraph {
    pub fn new(nodes: Vec<NodeKind>, features: DenseMatrix, adjacency: DenseMatrix) -> Result<Self> {
        let n = nodes.len();
        if features.nrows() != n || adjacency.dim() != (n, n) {
            return Err(Error::Shape(format!(
                "{n} nodes but features {:?} and adjacency {:?}",
                features.dim(),
                adjacency.dim()
            )));
        }
        check_adjacency(&adjacency)?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain("non-finite node feature".into()));
        }
        Ok(Self { nodes, features, adjacency })
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Undirected edges `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.len();
        (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).filter(|&(i, j)| self.adjacency[[i, j]] != 0.0).collect()
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency.row(node).iter().filter(|&&v| v != 0.0).count()
    }

    pub fn neighbours(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.adjacency
            .row(node)
            .into_iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(j, _)| j)
            .collect::<Vec<_>>()
            .into_iter()
    }

    /// Subgraph induced by `keep` (ascending node indices), keeping only
    /// edges whose endpoints both survive.
    pub fn induced(&self, keep: &[usize]) -> StateGraph {
        StateGraph {
            nodes: keep.iter().map(|&i| self.nodes[i]).collect(),
            features: self.features.select(Axis(0), keep),
            adjacency: self.adjacency.select(Axis(0), keep).select(Axis(1), keep),
        }
    }

    pub fn position(&self, kind: NodeKind) -> Option<usize> {
        self.nodes.iter().position(|&k| k == kind)
    }
}

fn check_adjacency(a: &DenseMatrix) -> Result<()> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::Shape(format!("adjacency is {:?}, expected square", a.dim())));
    }
    for i in 0..n {
        if a[[i, i]] != 0.0 {
            return Err(Error::Domain(format!("adjacency has a self loop at {i}")));
        }
        for j in 0..i {
            if a[[i, j]] != a[[j, i]] {
                return Err(Error::Domain(format!("adjacency asymmetric at ({i}, {j})")));
            }
            if a[[i, j]] != 0.0 && a[[i, j]] != 1.0 {
                return Err(Error::Domain(format!("adjacency entry ({i}, {j}) is not 0/1")));
            }
        }
    }
    Ok(())
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(adjacency: &DenseMatrix) -> Result<DenseMatrix> {
    check_adjacency(adjacency)?;
    let n = adjacency.nrows();
    let with_loops = adjacency + &Array2::<f64>::eye(n);
    let inv_sqrt: Vec<f64> = with_loops.sum_axis(Axis(1)).iter().map(|d| 1.0 / d.sqrt()).collect();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| with_loops[[i, j]] * (inv_sqrt[i] * inv_sqrt[j])))
}

/// Builds the scheduler's view of the data centre.
///
/// PM rows: `[free_core_frac, free_ram_frac, utilisation, powered_on, price]`
/// where price is min-max scaled across locations at this hour. VM rows:
/// `[cores/32, ram/64, (freq-1600)/1800, duration/48, 0]`. PMs form a
/// clique; each VM is joined to every PM it fits on.
pub fn build_state_graph(
    snapshot: &[PmSnapshot],
    pending: &[WorkloadRequest],
    price_now: &BTreeMap<String, f64>,
) -> StateGraph {
    let n = snapshot.len() + pending.len();
    let mut nodes = Vec::with_capacity(n);
    let mut features = Array2::zeros((n, FEATURE_DIM));
    let mut adjacency = Array2::zeros((n, n));

    let lo = price_now.values().copied().fold(f64::INFINITY, f64::min);
    let hi = price_now.values().copied().fold(f64::NEG_INFINITY, f64::max);
    let scale_price = |p: f64| if hi > lo { (p - lo) / (hi - lo) } else { 0.0 };

    for (i, pm) in snapshot.iter().enumerate() {
        nodes.push(NodeKind::Pm(pm.pm));
        let price = price_now.get(&pm.location).copied().map_or(0.0, scale_price);
        let row = [
            f64::from(pm.free_cores) / f64::from(pm.cores),
            f64::from(pm.free_ram) / f64::from(pm.ram),
            pm.utilisation,
            if pm.powered_on { 1.0 } else { 0.0 },
            price,
        ];
        features.row_mut(i).assign(&ndarray::arr1(&row));
        for j in 0..i {
            adjacency[[i, j]] = 1.0;
            adjacency[[j, i]] = 1.0;
        }
    }

    let base = snapshot.len();
    for (k, req) in pending.iter().enumerate() {
        let i = base + k;
        nodes.push(NodeKind::Vm(VmId(req.id)));
        let row = [
            f64::from(req.cores) / f64::from(MAX_REQUEST_CORES),
            f64::from(req.ram) / f64::from(MAX_REQUEST_RAM_GIB),
            (f64::from(req.cpu_frequency) - f64::from(MIN_FREQUENCY_MHZ))
                / f64::from(MAX_FREQUENCY_MHZ - MIN_FREQUENCY_MHZ),
            f64::from(req.duration) / f64::from(MAX_DURATION_HOURS),
            0.0,
        ];
        features.row_mut(i).assign(&ndarray::arr1(&row));
        for (j, pm) in snapshot.iter().enumerate() {
            if feasible(pm, req) {
                adjacency[[i, j]] = 1.0;
                adjacency[[j, i]] = 1.0;
            }
        }
    }

    StateGraph { nodes, features, adjacency }
}
