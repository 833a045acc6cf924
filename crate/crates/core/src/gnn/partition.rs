//! Greedy balanced edge-cut clustering used to form Cluster-GCN mini-batches.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::StateGraph;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterPartition {
    /// Cluster id per node.
    pub cluster_of: Vec<usize>,
    pub k: usize,
}

impl ClusterPartition {
    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.cluster_of.iter().enumerate().filter(|(_, &c)| c == cluster).map(|(i, _)| i).collect()
    }

    /// Nodes of all listed clusters, ascending.
    pub fn members_of(&self, clusters: &[usize]) -> Vec<usize> {
        self.cluster_of.iter().enumerate().filter(|(_, c)| clusters.contains(c)).map(|(i, _)| i).collect()
    }

    pub fn cut_edges(&self, graph: &StateGraph) -> usize {
        graph.edges().into_iter().filter(|&(i, j)| self.cluster_of[i] != self.cluster_of[j]).count()
    }
}

/// Splits `graph` into `k` non-empty clusters of at most `⌈n/k⌉` nodes.
///
/// Seeds are the highest-degree nodes, skipping neighbours of earlier seeds
/// while non-adjacent candidates remain. Equal-degree candidates are taken in
/// index order unless the tie group straddles the k-th slot, in which case
/// the group is shuffled with `seed`. Remaining nodes are then assigned one
/// at a time: the node with the most edges into a single open cluster goes
/// to that cluster, ties preferring the smaller and then lower-id cluster.
pub fn partition_graph(graph: &StateGraph, k: usize, seed: u64) -> Result<ClusterPartition> {
    let n = graph.len();
    if k == 0 || k > n {
        return Err(Error::Domain(format!("cluster count {k} outside [1, {n}]")));
    }
    let capacity = n.div_ceil(k);
    let degree: Vec<usize> = (0..n).map(|i| graph.degree(i)).collect();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (std::cmp::Reverse(degree[i]), i));
    let boundary = degree[order[k - 1]];
    let tie_start = order.iter().position(|&i| degree[i] == boundary).unwrap();
    let tie_end = order.iter().rposition(|&i| degree[i] == boundary).unwrap() + 1;
    if tie_end > k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order[tie_start..tie_end].shuffle(&mut rng);
    }

    let mut seeds: Vec<usize> = Vec::with_capacity(k);
    for &candidate in &order {
        if seeds.len() == k {
            break;
        }
        if !seeds.iter().any(|&s| graph.adjacency[[s, candidate]] != 0.0) {
            seeds.push(candidate);
        }
    }
    for &candidate in &order {
        if seeds.len() == k {
            break;
        }
        if !seeds.contains(&candidate) {
            seeds.push(candidate);
        }
    }
    seeds.sort_unstable();

    const UNASSIGNED: usize = usize::MAX;
    let mut cluster_of = vec![UNASSIGNED; n];
    let mut sizes = vec![1usize; k];
    for (c, &s) in seeds.iter().enumerate() {
        cluster_of[s] = c;
    }

    for _ in k..n {
        // (edges into cluster, node, cluster) maximising edges, then
        // lowest node, then smallest cluster, then lowest cluster id.
        let mut best: Option<(usize, usize, usize)> = None;
        for node in (0..n).filter(|&i| cluster_of[i] == UNASSIGNED) {
            let mut links = vec![0usize; k];
            for j in graph.neighbours(node) {
                if cluster_of[j] != UNASSIGNED {
                    links[cluster_of[j]] += 1;
                }
            }
            let target = (0..k)
                .filter(|&c| sizes[c] < capacity)
                .min_by_key(|&c| (std::cmp::Reverse(links[c]), sizes[c], c))
                .expect("total capacity covers every node");
            let better = match best {
                None => true,
                Some((edges, _, _)) => links[target] > edges,
            };
            if better {
                best = Some((links[target], node, target));
            }
        }
        let (_, node, cluster) = best.expect("an unassigned node remains");
        cluster_of[node] = cluster;
        sizes[cluster] += 1;
    }

    Ok(ClusterPartition { cluster_of, k })
}
