//! The defensive relation prediction network.
//!
//! Three sub-networks: a feature extraction module over input vectors, an
//! attribute embedding module over class prototypes, and a relation head that
//! scores how well an input matches each class. The two embeddings are joined
//! by concatenation (or elementwise product for the ablation) and the head
//! ends in a single scalar output unit per class. Hidden layers use ReLU;
//! module outputs are linear.
//!
//! Scores become class probabilities through a temperature softmax, and the
//! training loss is the negative log-likelihood of the true class.

mod checkpoint;

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

pub use checkpoint::{load_checkpoint, save_checkpoint};

/// Identifier of a class; prototype files key rows by it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClassId(pub u32);

impl std::fmt::Display for ClassId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// How the input embedding and the prototype embedding are combined before
/// the relation head. `Product` exists for the ablation that replaces
/// concatenation with an elementwise product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Concat,
    Product,
}

/// Architecture and temperature of a relation network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetConfig {
    /// Input vector length d_x.
    pub input_dim: usize,
    /// Prototype vector length q.
    pub prototype_dim: usize,
    /// Hidden widths of the feature extraction module (may be empty).
    pub feature_hidden: Vec<usize>,
    /// Hidden width of the attribute embedding module.
    pub attr_hidden: usize,
    /// Output width of both embedding modules.
    pub embed_dim: usize,
    /// Hidden width of the relation head.
    pub relation_hidden: usize,
    /// Softmax temperature γ.
    pub temperature: f64,
    pub combine: Combine,
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = [
            self.input_dim,
            self.prototype_dim,
            self.attr_hidden,
            self.embed_dim,
            self.relation_hidden,
        ];
        if widths.iter().any(|&w| w == 0) || self.feature_hidden.iter().any(|&w| w == 0) {
            return Err(Error::invalid("all layer widths must be ≥ 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::invalid(format!(
                "temperature must be a positive real, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    /// Width of the relation head input.
    pub fn relation_input_dim(&self) -> usize {
        match self.combine {
            Combine::Concat => 2 * self.embed_dim,
            Combine::Product => self.embed_dim,
        }
    }
}

/// One fully-connected layer: weight `[in×out]` plus bias `[out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Parameter bundle for the three sub-networks.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationNet {
    pub config: NetConfig,
    pub feature_layers: Vec<Dense>,
    pub attr_layers: Vec<Dense>,
    pub relation_layers: Vec<Dense>,
}

/// Class prototypes, one row per class, in a fixed class order.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    class_ids: Vec<ClassId>,
    matrix: Tensor,
}

impl PrototypeSet {
    pub fn new(class_ids: Vec<ClassId>, matrix: Tensor) -> Result<Self> {
        if matrix.rank() != 2 || matrix.shape()[0] != class_ids.len() {
            return Err(Error::invalid(format!(
                "prototype matrix shape {:?} does not match {} class ids",
                matrix.shape(),
                class_ids.len()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for id in &class_ids {
            if !seen.insert(*id) {
                return Err(Error::invalid(format!("duplicate class id {id}")));
            }
        }
        Ok(PrototypeSet { class_ids, matrix })
    }

    pub fn len(&self) -> usize {
        self.class_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_ids.is_empty()
    }

    /// Prototype vector length q.
    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }

    pub fn class_ids(&self) -> &[ClassId] {
        &self.class_ids
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }

    /// Row index of a class id.
    pub fn index_of(&self, id: ClassId) -> Option<usize> {
        self.class_ids.iter().position(|c| *c == id)
    }

    /// Prototype of a class id.
    pub fn prototype_of(&self, id: ClassId) -> Option<Tensor> {
        self.index_of(id)
            .map(|i| Tensor::from_vec(self.row(i).to_vec()).expect("stored prototypes are finite"))
    }

    /// Subset with the given row indices, keeping order.
    pub fn subset(&self, rows: &[usize]) -> Result<PrototypeSet> {
        let ids = rows.iter().map(|&i| self.class_ids[i]).collect();
        let mut data = Vec::with_capacity(rows.len() * self.dim());
        for &i in rows {
            data.extend_from_slice(self.row(i));
        }
        PrototypeSet::new(ids, Tensor::matrix(rows.len(), self.dim(), data)?)
    }

    /// Concatenation of two sets; errors if any class id appears in both.
    pub fn union(a: &PrototypeSet, b: &PrototypeSet) -> Result<PrototypeSet> {
        if a.dim() != b.dim() {
            return Err(Error::ShapeMismatch {
                op: "prototype union",
                lhs: a.matrix.shape().to_vec(),
                rhs: b.matrix.shape().to_vec(),
            });
        }
        for id in &b.class_ids {
            if a.class_ids.contains(id) {
                return Err(Error::invalid(format!(
                    "overlapping class id {id} in prototype union"
                )));
            }
        }
        let mut ids = a.class_ids.clone();
        ids.extend_from_slice(&b.class_ids);
        let rows = ids.len();
        let mut data = a.matrix.data().to_vec();
        data.extend_from_slice(b.matrix.data());
        PrototypeSet::new(ids, Tensor::matrix(rows, a.dim(), data)?)
    }

    /// Replacement set with the same ids but a new matrix of equal shape.
    pub fn with_matrix(&self, matrix: Tensor) -> Result<PrototypeSet> {
        self.matrix.same_shape(&matrix, "prototype replacement")?;
        PrototypeSet::new(self.class_ids.clone(), matrix)
    }
}

/// Node ids of every parameter leaf of a network bound into one graph, in the
/// canonical flat order (feature, attribute, relation; weight before bias).
#[derive(Debug)]
pub struct BoundParams {
    pub feature: Vec<(NodeId, NodeId)>,
    pub attr: Vec<(NodeId, NodeId)>,
    pub relation: Vec<(NodeId, NodeId)>,
}

impl BoundParams {
    /// All parameter node ids in the canonical flat order.
    pub fn all(&self) -> Vec<NodeId> {
        self.feature
            .iter()
            .chain(&self.attr)
            .chain(&self.relation)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

impl RelationNet {
    /// Glorot-uniform weights, zero biases; deterministic per seed.
    ///
    /// Weights are drawn uniform in ±√(6/(fan_in+fan_out)). Draw order is the
    /// canonical parameter order, so equal seeds give bitwise-equal networks.
    pub fn init_params(config: &NetConfig, seed: u64) -> Result<RelationNet> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layer = |inp: usize, out: usize| -> Result<Dense> {
            let bound = (6.0 / (inp + out) as f64).sqrt();
            let data = (0..inp * out)
                .map(|_| rng.random::<f64>() * 2.0 * bound - bound)
                .collect();
            Ok(Dense {
                weight: Tensor::matrix(inp, out, data)?,
                bias: Tensor::zeros(vec![out]),
            })
        };

        let mut feature_layers = Vec::new();
        let mut prev = config.input_dim;
        for &w in &config.feature_hidden {
            feature_layers.push(layer(prev, w)?);
            prev = w;
        }
        feature_layers.push(layer(prev, config.embed_dim)?);

        let attr_layers = vec![
            layer(config.prototype_dim, config.attr_hidden)?,
            layer(config.attr_hidden, config.embed_dim)?,
        ];

        let relation_layers = vec![
            layer(config.relation_input_dim(), config.relation_hidden)?,
            layer(config.relation_hidden, 1)?,
        ];

        Ok(RelationNet {
            config: config.clone(),
            feature_layers,
            attr_layers,
            relation_layers,
        })
    }

    /// Immutable views of all parameters in the canonical flat order.
    pub fn param_tensors(&self) -> Vec<&Tensor> {
        self.feature_layers
            .iter()
            .chain(&self.attr_layers)
            .chain(&self.relation_layers)
            .flat_map(|d| [&d.weight, &d.bias])
            .collect()
    }

    /// Mutable views of all parameters in the canonical flat order.
    pub fn param_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.feature_layers
            .iter_mut()
            .chain(self.attr_layers.iter_mut())
            .chain(self.relation_layers.iter_mut())
            .flat_map(|d| [&mut d.weight, &mut d.bias])
            .collect()
    }

    /// Positions of the attribute embedding module's parameters within the
    /// canonical flat order (used to scope weight decay).
    pub fn attr_param_indices(&self) -> std::ops::Range<usize> {
        let start = 2 * self.feature_layers.len();
        start..start + 2 * self.attr_layers.len()
    }

    /// Insert every parameter as a leaf of `graph`.
    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        let mut bind_layers = |layers: &[Dense], graph: &mut Graph| {
            layers
                .iter()
                .map(|d| (graph.leaf(d.weight.clone()), graph.leaf(d.bias.clone())))
                .collect::<Vec<_>>()
        };
        BoundParams {
            feature: bind_layers(&self.feature_layers, graph),
            attr: bind_layers(&self.attr_layers, graph),
            relation: bind_layers(&self.relation_layers, graph),
        }
    }

    fn mlp(
        graph: &mut Graph,
        layers: &[(NodeId, NodeId)],
        input: NodeId,
        hidden_relu: bool,
    ) -> Result<NodeId> {
        let mut h = input;
        for (i, &(w, b)) in layers.iter().enumerate() {
            h = graph.matmul(h, w)?;
            h = graph.add_bias(h, b)?;
            if hidden_relu && i + 1 < layers.len() {
                h = graph.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Relation scores of a batch against every prototype:
    /// inputs `[B×d_x]` and prototypes `[N×q]` give scores `[B×N]`.
    ///
    /// Row i holds the scores of sample i in prototype order; everything is
    /// differentiable with respect to parameters, inputs, and prototypes.
    pub fn scores_node(
        &self,
        graph: &mut Graph,
        params: &BoundParams,
        inputs: NodeId,
        protos: NodeId,
    ) -> Result<NodeId> {
        let batch = graph.value(inputs).shape().to_vec();
        let pshape = graph.value(protos).shape().to_vec();
        if batch.len() != 2 || batch[1] != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "relation scores (inputs)",
                lhs: batch,
                rhs: vec![0, self.config.input_dim],
            });
        }
        if pshape.len() != 2 || pshape[1] != self.config.prototype_dim {
            return Err(Error::ShapeMismatch {
                op: "relation scores (prototypes)",
                lhs: pshape,
                rhs: vec![0, self.config.prototype_dim],
            });
        }
        let (b, n) = (batch[0], pshape[0]);

        let x_emb = Self::mlp(graph, &params.feature, inputs, true)?;
        let p_emb = Self::mlp(graph, &params.attr, protos, true)?;

        // Pair every sample with every prototype: row i·N + j is (sample i, class j).
        let x_rep = graph.repeat_rows(x_emb, n)?;
        let p_til = graph.tile_rows(p_emb, b)?;
        let joined = match self.config.combine {
            Combine::Concat => graph.concat(x_rep, p_til)?,
            Combine::Product => graph.mul(x_rep, p_til)?,
        };
        let out = Self::mlp(graph, &params.relation, joined, true)?;
        graph.reshape(out, vec![b, n])
    }

    /// Per-sample cross-entropy node `[B]` of a labeled batch at temperature
    /// `gamma`. `labels[i]` is the prototype row index of sample i's true
    /// class.
    pub fn ce_per_sample_node(
        &self,
        graph: &mut Graph,
        params: &BoundParams,
        inputs: NodeId,
        protos: NodeId,
        labels: &[usize],
        gamma: f64,
    ) -> Result<NodeId> {
        if !(gamma > 0.0) {
            return Err(Error::invalid(format!(
                "temperature must be positive, got {gamma}"
            )));
        }
        let n = graph.value(protos).shape()[0];
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::invalid(format!(
                "label index {bad} out of range for {n} prototypes"
            )));
        }
        let scores = self.scores_node(graph, params, inputs, protos)?;
        self.ce_per_sample_from_scores(graph, scores, labels, gamma)
    }

    /// Mean cross-entropy loss node of a labeled batch at temperature `gamma`.
    pub fn ce_loss_node(
        &self,
        graph: &mut Graph,
        params: &BoundParams,
        inputs: NodeId,
        protos: NodeId,
        labels: &[usize],
        gamma: f64,
    ) -> Result<NodeId> {
        let per_sample = self.ce_per_sample_node(graph, params, inputs, protos, labels, gamma)?;
        graph.mean(per_sample)
    }

    fn ce_per_sample_from_scores(
        &self,
        graph: &mut Graph,
        scores: NodeId,
        labels: &[usize],
        gamma: f64,
    ) -> Result<NodeId> {
        let scaled = graph.scale(scores, 1.0 / gamma)?;
        let lse = graph.row_logsumexp(scaled)?;
        let picked = graph.select_per_row(scaled, labels.to_vec())?;
        graph.sub(lse, picked)
    }

    /// Mean cross-entropy from a precomputed `[B×N]` score node.
    pub fn ce_from_scores(
        &self,
        graph: &mut Graph,
        scores: NodeId,
        labels: &[usize],
        gamma: f64,
    ) -> Result<NodeId> {
        let per_sample = self.ce_per_sample_from_scores(graph, scores, labels, gamma)?;
        graph.mean(per_sample)
    }
}

/// Relation scores of one input against every prototype, in prototype order.
pub fn relation_scores(net: &RelationNet, x: &Tensor, protos: &PrototypeSet) -> Result<Tensor> {
    check_input(net, x)?;
    let mut graph = Graph::new();
    let params = net.bind(&mut graph);
    let x_node = graph.leaf(Tensor::matrix(1, x.len(), x.data().to_vec())?);
    let p_node = graph.leaf(protos.matrix().clone());
    let scores = net.scores_node(&mut graph, &params, x_node, p_node)?;
    Tensor::from_vec(graph.value(scores).data().to_vec())
}

fn check_input(net: &RelationNet, x: &Tensor) -> Result<()> {
    if x.rank() != 1 || x.len() != net.config.input_dim {
        return Err(Error::ShapeMismatch {
            op: "relation network input",
            lhs: x.shape().to_vec(),
            rhs: vec![net.config.input_dim],
        });
    }
    Ok(())
}

/// Temperature softmax over a score vector: `p_j = exp(r_j/γ) / Σ exp(r_k/γ)`,
/// computed with max-subtraction so any finite scores are safe.
pub fn class_probabilities(scores: &Tensor, gamma: f64) -> Result<Tensor> {
    if !(gamma > 0.0) || !gamma.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be a positive real, got {gamma}"
        )));
    }
    if scores.rank() != 1 || scores.is_empty() {
        return Err(Error::invalid(
            "class_probabilities expects a nonempty rank-1 score tensor",
        ));
    }
    let scaled: Vec<f64> = scores.data().iter().map(|&r| r / gamma).collect();
    let max = scaled.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = scaled.iter().map(|&s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Tensor::from_vec(exps.iter().map(|&e| e / total).collect())
}

/// Negative log-likelihood of the true class under the relation softmax.
/// `label_index` is the row of the true class within `protos`.
pub fn ce_loss(
    net: &RelationNet,
    x: &Tensor,
    label_index: usize,
    protos: &PrototypeSet,
    gamma: f64,
) -> Result<f64> {
    check_input(net, x)?;
    if label_index >= protos.len() {
        return Err(Error::invalid(format!(
            "label index {label_index} out of range for {} prototypes",
            protos.len()
        )));
    }
    let mut graph = Graph::new();
    let params = net.bind(&mut graph);
    let x_node = graph.leaf(Tensor::matrix(1, x.len(), x.data().to_vec())?);
    let p_node = graph.leaf(protos.matrix().clone());
    let loss = net.ce_loss_node(&mut graph, &params, x_node, p_node, &[label_index], gamma)?;
    graph.value(loss).item()
}

fn argmax_class(probs: &Tensor, ids: &[ClassId]) -> ClassId {
    let mut best = 0;
    for j in 1..ids.len() {
        let p = probs.data()[j];
        let pb = probs.data()[best];
        if p > pb || (p == pb && ids[j] < ids[best]) {
            best = j;
        }
    }
    ids[best]
}

/// Standard zero-shot prediction: the most probable unseen class.
/// Ties break toward the lowest class id.
pub fn predict_standard(
    net: &RelationNet,
    x: &Tensor,
    unseen_protos: &PrototypeSet,
) -> Result<ClassId> {
    if unseen_protos.is_empty() {
        return Err(Error::invalid("prediction over an empty prototype set"));
    }
    let scores = relation_scores(net, x, unseen_protos)?;
    let probs = class_probabilities(&scores, net.config.temperature)?;
    Ok(argmax_class(&probs, unseen_protos.class_ids()))
}

/// Generalized zero-shot prediction: the most probable class over the union
/// of seen and unseen classes. Errors on overlapping class ids.
pub fn predict_generalized(
    net: &RelationNet,
    x: &Tensor,
    seen_protos: &PrototypeSet,
    unseen_protos: &PrototypeSet,
) -> Result<ClassId> {
    if seen_protos.is_empty() || unseen_protos.is_empty() {
        return Err(Error::invalid("prediction over an empty prototype set"));
    }
    let union = PrototypeSet::union(seen_protos, unseen_protos)?;
    let scores = relation_scores(net, x, &union)?;
    let probs = class_probabilities(&scores, net.config.temperature)?;
    Ok(argmax_class(&probs, union.class_ids()))
}

#[cfg(test)]
mod tests;
