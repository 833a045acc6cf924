//! Cluster-GCN style training, finite-difference gradient checks and
//! placement scoring.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{DenseMatrix, NodeKind, StateGraph};
use super::model::{GatedModel, GnnModel};
use super::partition::ClusterPartition;
use crate::datacenter::PmId;
use crate::error::{Error, Result};

/// One supervised example: the realised energy cost (kWh) of placing the VM
/// at `vm_node` on the PM at `pm_node`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub graph: StateGraph,
    pub vm_node: usize,
    pub pm_node: usize,
    pub label: f64,
}

impl TrainSample {
    pub fn validate(&self) -> Result<()> {
        if self.vm_node >= self.graph.len() || self.pm_node >= self.graph.len() {
            return Err(Error::Domain("sample node index out of range".into()));
        }
        if !(self.label.is_finite() && self.label >= 0.0) {
            return Err(Error::Domain(format!("sample label {} is not a non-negative number", self.label)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Clusters per mini-batch, counting those holding the scored pair.
    pub batch_clusters: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { epochs: 200, learning_rate: 0.01, batch_clusters: 1, seed: 0 }
    }
}

/// Nodes of the mini-batch for one sample: the clusters holding the scored
/// VM and PM, topped up with random other clusters to `batch_clusters`.
fn batch_nodes(
    sample: &TrainSample,
    partition: &ClusterPartition,
    batch_clusters: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut clusters = vec![partition.cluster_of[sample.vm_node]];
    let pm_cluster = partition.cluster_of[sample.pm_node];
    if pm_cluster != clusters[0] {
        clusters.push(pm_cluster);
    }
    if clusters.len() < batch_clusters {
        let mut others: Vec<usize> = (0..partition.k).filter(|c| !clusters.contains(c)).collect();
        others.shuffle(rng);
        clusters.extend(others.into_iter().take(batch_clusters - clusters.len()));
    }
    partition.members_of(&clusters)
}

/// Plain SGD on squared error, one sample per step, visiting samples in a
/// seeded order each epoch. Each step runs forward and backward on the
/// sample's mini-batch subgraph. Returns the mean loss per epoch.
pub fn train(
    model: &mut GnnModel,
    dataset: &[TrainSample],
    partitions: &[ClusterPartition],
    config: &TrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::Domain("training set is empty".into()));
    }
    if partitions.len() != dataset.len() {
        return Err(Error::Shape(format!("{} partitions for {} samples", partitions.len(), dataset.len())));
    }
    for (sample, part) in dataset.iter().zip(partitions) {
        sample.validate()?;
        if part.cluster_of.len() != sample.graph.len() {
            return Err(Error::Shape("partition does not cover its sample graph".into()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let sample = &dataset[i];
            let keep = batch_nodes(sample, &partitions[i], config.batch_clusters, &mut rng);
            let sub = sample.graph.induced(&keep);
            let vm = keep.binary_search(&sample.vm_node).expect("batch holds the VM");
            let pm = keep.binary_search(&sample.pm_node).expect("batch holds the PM");
            let (loss, grads) = model.loss_and_gradient(&sub, vm, pm, sample.label)?;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, loss });
            }
            total += loss;
            for (param, grad) in model.parameters_mut().into_iter().zip(&grads) {
                param.scaled_add(-config.learning_rate, grad);
            }
        }
        let mean = total / dataset.len() as f64;
        if !mean.is_finite() {
            return Err(Error::Divergence { epoch, loss: mean });
        }
        trace.push(mean);
    }
    Ok(trace)
}

/// Largest relative disagreement between the analytic gradient and central
/// differences with step `epsilon`, over every parameter entry.
pub fn gradient_check(model: &GnnModel, sample: &TrainSample, epsilon: f64) -> Result<f64> {
    let (_, analytic) = model.loss_and_gradient(&sample.graph, sample.vm_node, sample.pm_node, sample.label)?;
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    let shapes: Vec<usize> = model.parameters().iter().map(|(_, p)| p.len()).collect();
    for (t, &len) in shapes.iter().enumerate() {
        for e in 0..len {
            let original = model.parameters()[t].1.as_slice().expect("standard layout")[e];
            let mut loss_at = |value: f64| -> Result<f64> {
                probe.parameters_mut()[t].as_slice_mut().expect("standard layout")[e] = value;
                let (loss, _) = probe.loss_and_gradient(&sample.graph, sample.vm_node, sample.pm_node, sample.label)?;
                Ok(loss)
            };
            let plus = loss_at(original + epsilon)?;
            let minus = loss_at(original - epsilon)?;
            loss_at(original)?;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let exact = analytic[t].as_slice().expect("standard layout")[e];
            let err = (exact - numeric).abs() / (exact.abs() + numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Embeddings from a GCN-kind model, optionally restricted to the union of
/// `clusters` under `partition` (edges to other clusters are dropped).
/// Returns the embedding rows and the original node index of each row.
pub fn gcn_forward(
    model: &GnnModel,
    graph: &StateGraph,
    restrict_to: Option<(&ClusterPartition, &[usize])>,
) -> Result<(DenseMatrix, Vec<usize>)> {
    let keep: Vec<usize> = match restrict_to {
        Some((partition, clusters)) => {
            if partition.cluster_of.len() != graph.len() {
                return Err(Error::Shape("partition does not cover the graph".into()));
            }
            partition.members_of(clusters)
        }
        None => (0..graph.len()).collect(),
    };
    let sub = graph.induced(&keep);
    Ok((model.embed(&sub)?, keep))
}

pub fn gated_forward(model: &GatedModel, graph: &StateGraph) -> Result<DenseMatrix> {
    GnnModel::Gated(model.clone()).embed(graph)
}

/// Predicted cost of placing the VM at `vm_node` on each PM it is connected to.
pub fn score_placements(model: &GnnModel, graph: &StateGraph, vm_node: usize) -> Result<BTreeMap<PmId, f64>> {
    match graph.nodes.get(vm_node) {
        Some(NodeKind::Vm(_)) => {}
        _ => return Err(Error::Domain(format!("node {vm_node} is not a VM"))),
    }
    let pms: Vec<(usize, PmId)> = graph
        .neighbours(vm_node)
        .filter_map(|j| match graph.nodes[j] {
            NodeKind::Pm(id) => Some((j, id)),
            NodeKind::Vm(_) => None,
        })
        .collect();
    if pms.is_empty() {
        return Ok(BTreeMap::new());
    }
    let embeddings = model.embed(graph)?;
    Ok(pms.into_iter().map(|(j, id)| (id, model.score(&embeddings, vm_node, j))).collect())
}
