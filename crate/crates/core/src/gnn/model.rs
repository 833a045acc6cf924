//! GCN and gated recurrent graph models with hand-written backpropagation.
//!
//! Both models share the same scoring head: the embeddings of a VM node and
//! a PM node are concatenated and mapped to a scalar by an affine readout.
//! Parameters are exposed as an ordered list of matrices (biases are 1×d)
//! so the optimiser, the gradient check and checkpoints treat both models
//! uniformly.

use ndarray::{concatenate, s, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::graph::{normalize_adjacency, DenseMatrix, StateGraph, FEATURE_DIM};
use crate::error::{Error, Result};

fn glorot(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> DenseMatrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_simple_fn((fan_in, fan_out), || rng.gen_range(-limit..=limit))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn row_vector(d: usize) -> DenseMatrix {
    Array2::zeros((1, d))
}

/// Affine head scoring a `(vm ⊕ pm)` embedding pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Readout {
    /// `2h × 1`.
    pub weight: DenseMatrix,
    /// `1 × 1`.
    pub bias: DenseMatrix,
}

impl Readout {
    fn new(rng: &mut impl Rng, embedding: usize) -> Self {
        Self { weight: glorot(rng, 2 * embedding, 1), bias: row_vector(1) }
    }

    fn score(&self, vm: ArrayView1<f64>, pm: ArrayView1<f64>) -> f64 {
        let h = vm.len();
        vm.dot(&self.weight.slice(s![..h, 0])) + pm.dot(&self.weight.slice(s![h.., 0])) + self.bias[[0, 0]]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GcnLayer {
    pub weight: DenseMatrix,
    pub bias: DenseMatrix,
}

/// Stack of `H' = act(Â H W + b)` layers, ReLU on hidden layers and
/// identity on the last.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnModel {
    pub layers: Vec<GcnLayer>,
    pub readout: Readout,
}

struct GcnTrace {
    /// `Â H_ℓ` per layer.
    aggregated: Vec<DenseMatrix>,
    /// Pre-activations per layer.
    pre: Vec<DenseMatrix>,
    output: DenseMatrix,
}

impl GcnModel {
    /// Layer widths `dims[0] → dims[1] → …`, Glorot-initialised, zero biases.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Shape(format!("need at least two non-zero widths, got {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| GcnLayer { weight: glorot(&mut rng, w[0], w[1]), bias: row_vector(w[1]) })
            .collect();
        let readout = Readout::new(&mut rng, *dims.last().unwrap());
        Ok(Self { layers, readout })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims: Vec<usize> = self.layers.iter().map(|l| l.weight.nrows()).collect();
        dims.push(self.embedding_dim());
        dims
    }

    pub fn embedding_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.weight.ncols())
    }

    fn check(&self, features: &DenseMatrix) -> Result<()> {
        let expected = self.layers[0].weight.nrows();
        if features.ncols() != expected {
            return Err(Error::Shape(format!(
                "features have {} columns, first layer expects {expected}",
                features.ncols()
            )));
        }
        for (i, pair) in self.layers.windows(2).enumerate() {
            if pair[0].weight.ncols() != pair[1].weight.nrows() {
                return Err(Error::Shape(format!("layers {i} and {} do not chain", i + 1)));
            }
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.bias.dim() != (1, l.weight.ncols()) {
                return Err(Error::Shape(format!("bias of layer {i} has shape {:?}", l.bias.dim())));
            }
        }
        if self.readout.weight.dim() != (2 * self.embedding_dim(), 1) {
            return Err(Error::Shape("readout does not match embedding width".into()));
        }
        Ok(())
    }

    fn run(&self, a_hat: &DenseMatrix, features: &DenseMatrix) -> Result<GcnTrace> {
        self.check(features)?;
        let last = self.layers.len() - 1;
        let mut h = features.clone();
        let mut aggregated = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let agg = a_hat.dot(&h);
            let z = agg.dot(&layer.weight) + &layer.bias;
            h = if i == last { z.clone() } else { z.mapv(|v| v.max(0.0)) };
            aggregated.push(agg);
            pre.push(z);
        }
        Ok(GcnTrace { aggregated, pre, output: h })
    }

    /// Gradients for every layer (weight, bias) given `d_output`.
    fn backward(&self, a_hat: &DenseMatrix, trace: &GcnTrace, d_output: DenseMatrix) -> Vec<DenseMatrix> {
        let last = self.layers.len() - 1;
        let mut grads = vec![Array2::zeros((0, 0)); 2 * self.layers.len()];
        let mut d_h = d_output;
        for i in (0..self.layers.len()).rev() {
            let d_z = if i == last { d_h } else { d_h * &trace.pre[i].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 }) };
            grads[2 * i] = trace.aggregated[i].t().dot(&d_z);
            grads[2 * i + 1] = d_z.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_h = a_hat.t().dot(&d_z.dot(&self.layers[i].weight.t()));
        }
        grads
    }
}

/// GRU-style gated message passing: `K` rounds of
/// `h ← GRU(h, Σ_u Â[v][u] W_msg h_u)` with weights shared across rounds.
#[derive(Debug, Clone, PartialEq)]
pub struct GatedModel {
    pub hidden: usize,
    pub steps: usize,
    pub message: DenseMatrix,
    pub update_input: DenseMatrix,
    pub update_hidden: DenseMatrix,
    pub update_bias: DenseMatrix,
    pub reset_input: DenseMatrix,
    pub reset_hidden: DenseMatrix,
    pub reset_bias: DenseMatrix,
    pub candidate_input: DenseMatrix,
    pub candidate_hidden: DenseMatrix,
    pub candidate_bias: DenseMatrix,
    pub readout: Readout,
}

struct GatedStep {
    h: DenseMatrix,
    aggregated: DenseMatrix,
    message: DenseMatrix,
    update: DenseMatrix,
    reset: DenseMatrix,
    reset_h: DenseMatrix,
    candidate: DenseMatrix,
}

struct GatedTrace {
    steps: Vec<GatedStep>,
    output: DenseMatrix,
}

impl GatedModel {
    pub fn new(hidden: usize, steps: usize, seed: u64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Domain("gated model needs at least one propagation step".into()));
        }
        if hidden < FEATURE_DIM {
            return Err(Error::Shape(format!("hidden width {hidden} below feature width {FEATURE_DIM}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut square = || glorot(&mut rng, hidden, hidden);
        let message = square();
        let update_input = square();
        let update_hidden = square();
        let reset_input = square();
        let reset_hidden = square();
        let candidate_input = square();
        let candidate_hidden = square();
        Ok(Self {
            hidden,
            steps,
            message,
            update_input,
            update_hidden,
            update_bias: row_vector(hidden),
            reset_input,
            reset_hidden,
            reset_bias: row_vector(hidden),
            candidate_input,
            candidate_hidden,
            candidate_bias: row_vector(hidden),
            readout: Readout::new(&mut rng, hidden),
        })
    }

    fn check(&self, features: &DenseMatrix) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Domain("gated model needs at least one propagation step".into()));
        }
        if features.ncols() > self.hidden {
            return Err(Error::Shape(format!(
                "features have {} columns, hidden width is {}",
                features.ncols(),
                self.hidden
            )));
        }
        let h = self.hidden;
        let squares = [
            &self.message,
            &self.update_input,
            &self.update_hidden,
            &self.reset_input,
            &self.reset_hidden,
            &self.candidate_input,
            &self.candidate_hidden,
        ];
        let biases = [&self.update_bias, &self.reset_bias, &self.candidate_bias];
        if squares.iter().any(|m| m.dim() != (h, h)) || biases.iter().any(|b| b.dim() != (1, h)) {
            return Err(Error::Shape("gate matrices do not match hidden width".into()));
        }
        if self.readout.weight.dim() != (2 * h, 1) {
            return Err(Error::Shape("readout does not match hidden width".into()));
        }
        Ok(())
    }

    fn run(&self, a_hat: &DenseMatrix, features: &DenseMatrix) -> Result<GatedTrace> {
        self.check(features)?;
        let n = features.nrows();
        let mut h = Array2::zeros((n, self.hidden));
        h.slice_mut(s![.., ..features.ncols()]).assign(features);

        let mut steps = Vec::with_capacity(self.steps);
        for _ in 0..self.steps {
            let aggregated = a_hat.dot(&h);
            let message = aggregated.dot(&self.message);
            let update =
                (message.dot(&self.update_input) + h.dot(&self.update_hidden) + &self.update_bias).mapv(sigmoid);
            let reset = (message.dot(&self.reset_input) + h.dot(&self.reset_hidden) + &self.reset_bias).mapv(sigmoid);
            let reset_h = &reset * &h;
            let candidate =
                (message.dot(&self.candidate_input) + reset_h.dot(&self.candidate_hidden) + &self.candidate_bias)
                    .mapv(f64::tanh);
            let next = (1.0 - &update) * &h + &update * &candidate;
            steps.push(GatedStep { h, aggregated, message, update, reset, reset_h, candidate });
            h = next;
        }
        Ok(GatedTrace { steps, output: h })
    }

    /// Backpropagation through the `K` rounds; returns gradients in
    /// [`GatedModel`] parameter order, excluding the readout.
    fn backward(&self, a_hat: &DenseMatrix, trace: &GatedTrace, d_output: DenseMatrix) -> Vec<DenseMatrix> {
        let zero = || Array2::<f64>::zeros((self.hidden, self.hidden));
        let (mut g_msg, mut g_ui, mut g_uh, mut g_ri, mut g_rh, mut g_ci, mut g_ch) =
            (zero(), zero(), zero(), zero(), zero(), zero(), zero());
        let mut g_ub = row_vector(self.hidden);
        let mut g_rb = row_vector(self.hidden);
        let mut g_cb = row_vector(self.hidden);

        let mut d_next = d_output;
        for st in trace.steps.iter().rev() {
            let d_update = &d_next * &(&st.candidate - &st.h);
            let d_candidate = &d_next * &st.update;
            let mut d_h = &d_next * &(1.0 - &st.update);

            let d_cand_pre = d_candidate * &st.candidate.mapv(|c| 1.0 - c * c);
            g_ci += &st.message.t().dot(&d_cand_pre);
            g_ch += &st.reset_h.t().dot(&d_cand_pre);
            g_cb += &d_cand_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            let mut d_message = d_cand_pre.dot(&self.candidate_input.t());
            let d_reset_h = d_cand_pre.dot(&self.candidate_hidden.t());
            let d_reset = &d_reset_h * &st.h;
            d_h += &(&d_reset_h * &st.reset);

            let d_update_pre = d_update * &st.update.mapv(|z| z * (1.0 - z));
            g_ui += &st.message.t().dot(&d_update_pre);
            g_uh += &st.h.t().dot(&d_update_pre);
            g_ub += &d_update_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_message += &d_update_pre.dot(&self.update_input.t());
            d_h += &d_update_pre.dot(&self.update_hidden.t());

            let d_reset_pre = d_reset * &st.reset.mapv(|r| r * (1.0 - r));
            g_ri += &st.message.t().dot(&d_reset_pre);
            g_rh += &st.h.t().dot(&d_reset_pre);
            g_rb += &d_reset_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
            d_message += &d_reset_pre.dot(&self.reset_input.t());
            d_h += &d_reset_pre.dot(&self.reset_hidden.t());

            g_msg += &st.aggregated.t().dot(&d_message);
            d_h += &a_hat.t().dot(&d_message.dot(&self.message.t()));

            d_next = d_h;
        }
        vec![g_msg, g_ui, g_uh, g_ub, g_ri, g_rh, g_rb, g_ci, g_ch, g_cb]
    }
}

/// Loss, gradient w.r.t. the embeddings and the readout gradients.
fn head_gradient(
    readout: &Readout,
    output: &DenseMatrix,
    vm: usize,
    pm: usize,
    label: f64,
) -> (f64, DenseMatrix, [DenseMatrix; 2]) {
    let h = output.ncols();
    let residual = readout.score(output.row(vm), output.row(pm)) - label;
    let d_score = 2.0 * residual;

    let pair = concatenate(Axis(0), &[output.row(vm), output.row(pm)]).expect("rows share width");
    let d_weight = (pair * d_score).insert_axis(Axis(1));
    let d_bias = Array2::from_elem((1, 1), d_score);

    let mut d_output = Array2::zeros(output.dim());
    d_output.row_mut(vm).scaled_add(d_score, &readout.weight.slice(s![..h, 0]));
    d_output.row_mut(pm).scaled_add(d_score, &readout.weight.slice(s![h.., 0]));
    (residual * residual, d_output, [d_weight, d_bias])
}

/// A trainable graph scorer.
#[derive(Debug, Clone, PartialEq)]
#[allow(clippy::large_enum_variant)]
pub enum GnnModel {
    Gcn(GcnModel),
    Gated(GatedModel),
}

impl From<GcnModel> for GnnModel {
    fn from(m: GcnModel) -> Self {
        GnnModel::Gcn(m)
    }
}

impl From<GatedModel> for GnnModel {
    fn from(m: GatedModel) -> Self {
        GnnModel::Gated(m)
    }
}

impl GnnModel {
    /// 2 GCN layers 5→16→16 and a 32→1 head.
    pub fn default_gcn(seed: u64) -> Self {
        GcnModel::new(&[FEATURE_DIM, 16, 16], seed).expect("static dims are valid").into()
    }

    /// Hidden width 16, two propagation rounds.
    pub fn default_gated(seed: u64) -> Self {
        GatedModel::new(16, 2, seed).expect("static dims are valid").into()
    }

    pub fn kind(&self) -> &'static str {
        match self {
            GnnModel::Gcn(_) => "gcn",
            GnnModel::Gated(_) => "gated",
        }
    }

    pub fn readout(&self) -> &Readout {
        match self {
            GnnModel::Gcn(m) => &m.readout,
            GnnModel::Gated(m) => &m.readout,
        }
    }

    /// Node embeddings for the whole graph.
    pub fn embed(&self, graph: &StateGraph) -> Result<DenseMatrix> {
        let a_hat = normalize_adjacency(&graph.adjacency)?;
        match self {
            GnnModel::Gcn(m) => Ok(m.run(&a_hat, &graph.features)?.output),
            GnnModel::Gated(m) => Ok(m.run(&a_hat, &graph.features)?.output),
        }
    }

    pub fn score(&self, embeddings: &DenseMatrix, vm: usize, pm: usize) -> f64 {
        self.readout().score(embeddings.row(vm), embeddings.row(pm))
    }

    /// Squared error of the `(vm, pm)` score against `label` and its
    /// gradient w.r.t. every parameter, in [`GnnModel::parameters`] order.
    pub fn loss_and_gradient(
        &self,
        graph: &StateGraph,
        vm: usize,
        pm: usize,
        label: f64,
    ) -> Result<(f64, Vec<DenseMatrix>)> {
        if vm >= graph.len() || pm >= graph.len() {
            return Err(Error::Shape(format!("node index out of range for {} nodes", graph.len())));
        }
        let a_hat = normalize_adjacency(&graph.adjacency)?;
        let (loss, grads) = match self {
            GnnModel::Gcn(m) => {
                let trace = m.run(&a_hat, &graph.features)?;
                let (loss, d_output, head) = head_gradient(&m.readout, &trace.output, vm, pm, label);
                let mut grads = m.backward(&a_hat, &trace, d_output);
                grads.extend(head);
                (loss, grads)
            }
            GnnModel::Gated(m) => {
                let trace = m.run(&a_hat, &graph.features)?;
                let (loss, d_output, head) = head_gradient(&m.readout, &trace.output, vm, pm, label);
                let mut grads = m.backward(&a_hat, &trace, d_output);
                grads.extend(head);
                (loss, grads)
            }
        };
        Ok((loss, grads))
    }

    /// Parameters in checkpoint order.
    pub fn parameters(&self) -> Vec<(String, &DenseMatrix)> {
        match self {
            GnnModel::Gcn(m) => {
                let mut out = Vec::new();
                for (i, l) in m.layers.iter().enumerate() {
                    out.push((format!("layer{i}.weight"), &l.weight));
                    out.push((format!("layer{i}.bias"), &l.bias));
                }
                out.push(("readout.weight".into(), &m.readout.weight));
                out.push(("readout.bias".into(), &m.readout.bias));
                out
            }
            GnnModel::Gated(m) => vec![
                ("message".into(), &m.message),
                ("update.input".into(), &m.update_input),
                ("update.hidden".into(), &m.update_hidden),
                ("update.bias".into(), &m.update_bias),
                ("reset.input".into(), &m.reset_input),
                ("reset.hidden".into(), &m.reset_hidden),
                ("reset.bias".into(), &m.reset_bias),
                ("candidate.input".into(), &m.candidate_input),
                ("candidate.hidden".into(), &m.candidate_hidden),
                ("candidate.bias".into(), &m.candidate_bias),
                ("readout.weight".into(), &m.readout.weight),
                ("readout.bias".into(), &m.readout.bias),
            ],
        }
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut DenseMatrix> {
        match self {
            GnnModel::Gcn(m) => {
                let mut out: Vec<&mut DenseMatrix> = Vec::new();
                for l in &mut m.layers {
                    out.push(&mut l.weight);
                    out.push(&mut l.bias);
                }
                out.push(&mut m.readout.weight);
                out.push(&mut m.readout.bias);
                out
            }
            GnnModel::Gated(m) => vec![
                &mut m.message,
                &mut m.update_input,
                &mut m.update_hidden,
                &mut m.update_bias,
                &mut m.reset_input,
                &mut m.reset_hidden,
                &mut m.reset_bias,
                &mut m.candidate_input,
                &mut m.candidate_hidden,
                &mut m.candidate_bias,
                &mut m.readout.weight,
                &mut m.readout.bias,
            ],
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|(_, p)| p.len()).sum()
    }

    /// Sets every parameter to zero.
    pub fn zeroed(mut self) -> Self {
        for p in self.parameters_mut() {
            p.fill(0.0);
        }
        self
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let dims = match self {
            GnnModel::Gcn(m) => CheckpointDims::Gcn { layers: m.dims() },
            GnnModel::Gated(m) => CheckpointDims::Gated { hidden: m.hidden, steps: m.steps },
        };
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA_VERSION,
            kind: self.kind().into(),
            dims,
            parameters: self
                .parameters()
                .into_iter()
                .map(|(name, p)| CheckpointTensor {
                    name,
                    shape: [p.nrows(), p.ncols()],
                    values: p.iter().copied().collect(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.schema_version != CHECKPOINT_SCHEMA_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint schema {}", ck.schema_version)));
        }
        let mut model: GnnModel = match (&ck.dims, ck.kind.as_str()) {
            (CheckpointDims::Gcn { layers }, "gcn") => GcnModel::new(layers, 0)?.into(),
            (CheckpointDims::Gated { hidden, steps }, "gated") => GatedModel::new(*hidden, *steps, 0)?.into(),
            _ => return Err(Error::Format(format!("checkpoint kind `{}` does not match its dims", ck.kind))),
        };
        let slots = model.parameters_mut();
        if slots.len() != ck.parameters.len() {
            return Err(Error::Format(format!(
                "expected {} parameter arrays, found {}",
                slots.len(),
                ck.parameters.len()
            )));
        }
        for (slot, tensor) in slots.into_iter().zip(&ck.parameters) {
            let [r, c] = tensor.shape;
            if slot.dim() != (r, c) || tensor.values.len() != r * c {
                return Err(Error::Format(format!("parameter `{}` has the wrong shape", tensor.name)));
            }
            *slot = Array2::from_shape_vec((r, c), tensor.values.clone()).map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(model)
    }
}

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

/// Serialized model. Parameter arrays are row-major, in the order of
/// [`GnnModel::parameters`]:
///
/// * gcn: `layer{i}.weight`, `layer{i}.bias` for each layer, then
///   `readout.weight`, `readout.bias`;
/// * gated: `message`, `update.{input,hidden,bias}`,
///   `reset.{input,hidden,bias}`, `candidate.{input,hidden,bias}`,
///   `readout.weight`, `readout.bias`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub kind: String,
    pub dims: CheckpointDims,
    pub parameters: Vec<CheckpointTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CheckpointDims {
    Gcn { layers: Vec<usize> },
    Gated { hidden: usize, steps: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: [usize; 2],
    pub values: Vec<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datacenter::{PmId, VmId};
    use crate::gnn::graph::NodeKind;
    use ndarray::array;

    fn single_node(features: DenseMatrix) -> StateGraph {
        StateGraph::new(vec![NodeKind::Pm(PmId(0))], features, array![[0.0]]).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_embeddings() {
        let model = GnnModel::default_gcn(3).zeroed();
        let g = StateGraph::new(
            vec![NodeKind::Pm(PmId(0)), NodeKind::Vm(VmId(0))],
            array![[0.3, 0.1, 0.2, 1.0, 0.5], [0.1, 0.2, 0.3, 0.4, 0.0]],
            array![[0.0, 1.0], [1.0, 0.0]],
        )
        .unwrap();
        assert!(model.embed(&g).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_layer_on_single_node() {
        let mut m = GcnModel::new(&[5, 5], 0).unwrap();
        m.layers[0].weight = Array2::eye(5);
        let x = array![[0.3, 0.1, 0.2, 1.0, 0.5]];
        let out = GnnModel::Gcn(m).embed(&single_node(x.clone())).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let m = GnnModel::Gcn(GcnModel::new(&[4, 3], 0).unwrap());
        assert!(matches!(m.embed(&single_node(array![[1.0, 2.0, 3.0, 4.0, 5.0]])), Err(Error::Shape(_))));
    }

    #[test]
    fn gated_zero_weights_halve_state() {
        let model = GnnModel::Gated(GatedModel::new(5, 1, 0).unwrap()).zeroed();
        let x = array![[0.3, 0.1, 0.2, 1.0, 0.5]];
        let out = model.embed(&single_node(x.clone())).unwrap();
        assert_eq!(out, x * 0.5);
    }

    #[test]
    fn gated_rejects_zero_steps() {
        assert!(matches!(GatedModel::new(16, 0, 0), Err(Error::Domain(_))));
        let mut m = GatedModel::new(16, 1, 0).unwrap();
        m.steps = 0;
        assert!(matches!(GnnModel::Gated(m).embed(&single_node(array![[0.0; 5]])), Err(Error::Domain(_))));
    }

    /// Independent single-node GRU recurrence (Â = [[1]]), written with plain loops.
    fn hand_gru(m: &GatedModel, x: &[f64]) -> Vec<f64> {
        let h_dim = m.hidden;
        let mut h = vec![0.0; h_dim];
        h[..x.len()].copy_from_slice(x);
        let matvec = |v: &[f64], w: &DenseMatrix| -> Vec<f64> {
            (0..h_dim).map(|j| (0..h_dim).map(|i| v[i] * w[[i, j]]).sum()).collect()
        };
        for _ in 0..m.steps {
            let msg = matvec(&h, &m.message);
            let mi_z = matvec(&msg, &m.update_input);
            let hh_z = matvec(&h, &m.update_hidden);
            let mi_r = matvec(&msg, &m.reset_input);
            let hh_r = matvec(&h, &m.reset_hidden);
            let z: Vec<f64> = (0..h_dim).map(|j| sigmoid(mi_z[j] + hh_z[j] + m.update_bias[[0, j]])).collect();
            let r: Vec<f64> = (0..h_dim).map(|j| sigmoid(mi_r[j] + hh_r[j] + m.reset_bias[[0, j]])).collect();
            let rh: Vec<f64> = (0..h_dim).map(|j| r[j] * h[j]).collect();
            let mi_c = matvec(&msg, &m.candidate_input);
            let hh_c = matvec(&rh, &m.candidate_hidden);
            let c: Vec<f64> = (0..h_dim).map(|j| (mi_c[j] + hh_c[j] + m.candidate_bias[[0, j]]).tanh()).collect();
            h = (0..h_dim).map(|j| (1.0 - z[j]) * h[j] + z[j] * c[j]).collect();
        }
        h
    }

    #[test]
    fn gated_isolated_node_matches_hand_recurrence() {
        for steps in 1..=3 {
            let mut m = GatedModel::new(8, steps, 17 + steps as u64).unwrap();
            m.update_bias.fill(0.2);
            m.candidate_bias.fill(-0.1);
            let x = [0.3, 0.7, 0.2, 1.0, 0.5];
            let expected = hand_gru(&m, &x);
            let out = GnnModel::Gated(m).embed(&single_node(array![[0.3, 0.7, 0.2, 1.0, 0.5]])).unwrap();
            for (a, b) in out.row(0).iter().zip(&expected) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for model in [GnnModel::default_gcn(5), GnnModel::default_gated(6)] {
            let json = serde_json::to_string(&model.to_checkpoint()).unwrap();
            let back = GnnModel::from_checkpoint(&serde_json::from_str(&json).unwrap()).unwrap();
            assert_eq!(back, model);
        }
    }

    #[test]
    fn checkpoint_rejects_mismatch() {
        let mut ck = GnnModel::default_gcn(1).to_checkpoint();
        ck.parameters.pop();
        assert!(GnnModel::from_checkpoint(&ck).is_err());
        let mut ck = GnnModel::default_gcn(1).to_checkpoint();
        ck.kind = "gated".into();
        assert!(GnnModel::from_checkpoint(&ck).is_err());
    }
}
