//! Model zoo: graph-attention temporal model, LSTM-only baseline, and a
//! logistic baseline on flattened windows.
//!
//! The graph model runs attention over the production graph to get a well
//! embedding, broadcasts it onto every timestep of the sample window, and
//! feeds the augmented sequence to an LSTM with a sigmoid head. Forward
//! passes are free functions over tape variables so the same code path
//! serves training, inference, and finite-difference verification.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, VarId};
use crate::error::{Error, Result};
use crate::graph::ProductionGraph;
use crate::rng::{derive_seed, SplitMix64};

/// Nonlinearity applied to aggregated neighborhood messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Elu,
    Identity,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: VarId) -> Result<VarId> {
        match self {
            Activation::Tanh => tape.tanh(x),
            Activation::Elu => tape.elu(x),
            Activation::Identity => Ok(x),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Elu => "elu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    TemporalGat,
    LstmOnly,
    Logistic,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::TemporalGat => "temporal_gat",
            ModelKind::LstmOnly => "lstm",
            ModelKind::Logistic => "logistic",
        }
    }

    pub fn parse(s: &str) -> Result<ModelKind> {
        match s {
            "temporal_gat" => Ok(ModelKind::TemporalGat),
            "lstm" => Ok(ModelKind::LstmOnly),
            "logistic" => Ok(ModelKind::Logistic),
            other => Err(Error::Config(format!(
                "unknown model kind {other:?} (expected temporal_gat, lstm, or logistic)"
            ))),
        }
    }

    pub fn uses_graph(self) -> bool {
        matches!(self, ModelKind::TemporalGat)
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Per-head attention output width.
    pub gat_dim: usize,
    pub gat_layers: usize,
    pub gat_heads: usize,
    /// Negative-side slope of the attention score nonlinearity.
    pub leaky_slope: f64,
    pub gat_activation: Activation,
    pub lstm_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            gat_dim: 16,
            gat_layers: 1,
            gat_heads: 1,
            leaky_slope: 0.2,
            gat_activation: Activation::Tanh,
            lstm_hidden: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("gat_dim", self.gat_dim),
            ("gat_layers", self.gat_layers),
            ("gat_heads", self.gat_heads),
            ("lstm_hidden", self.lstm_hidden),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) {
            return Err(Error::Config(format!(
                "leaky_slope {} outside (0, 1)",
                self.leaky_slope
            )));
        }
        Ok(())
    }
}

/// Ordered, uniquely named parameter tensors. Order is creation order and
/// fixes both the seeded-init draw sequence and the checkpoint layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
}

impl ParamSet {
    fn push(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(self.entries.iter().all(|(n, _)| n != name), "duplicate param {name}");
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn n_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Zero every tensor (testing aid: sigmoid head then outputs 0.5).
    pub fn zero_all(&mut self) {
        for (_, t) in &mut self.entries {
            for v in t.data_mut() {
                *v = 0.0;
            }
        }
    }
}

/// Keeps parameter initialization independent of other consumers of the
/// run seed.
const INIT_SALT: u64 = 0x696e6974;

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub cfg: ModelConfig,
    /// Feature dimension F of window rows and node features.
    pub input_dim: usize,
    /// Window length r.
    pub window: usize,
    pub params: ParamSet,
}

fn xavier(rng: &mut SplitMix64, rows: usize, cols: usize, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.range_f64(-bound, bound)).collect();
    Tensor::from_vec(rows, cols, data).expect("xavier dims are positive")
}

impl Model {
    /// Seeded construction; identical arguments give bit-identical
    /// parameters.
    pub fn new(
        kind: ModelKind,
        cfg: ModelConfig,
        input_dim: usize,
        window: usize,
        seed: u64,
    ) -> Result<Model> {
        cfg.validate()?;
        if input_dim == 0 || window == 0 {
            return Err(Error::Config(format!(
                "model needs positive dims, got input_dim {input_dim}, window {window}"
            )));
        }
        let mut rng = SplitMix64::new(derive_seed(seed, INIT_SALT));
        let mut params = ParamSet::default();
        let mut model = Model { kind, cfg, input_dim, window, params: ParamSet::default() };

        match kind {
            ModelKind::TemporalGat => {
                let mut d_in = input_dim;
                for layer in 0..model.cfg.gat_layers {
                    for head in 0..model.cfg.gat_heads {
                        let w = xavier(&mut rng, d_in, model.cfg.gat_dim, d_in, model.cfg.gat_dim);
                        params.push(&format!("gat.layer{layer}.head{head}.w"), w);
                        let a = xavier(&mut rng, 2 * model.cfg.gat_dim, 1, 2 * model.cfg.gat_dim, 1);
                        params.push(&format!("gat.layer{layer}.head{head}.a"), a);
                    }
                    d_in = model.cfg.gat_heads * model.cfg.gat_dim;
                }
                init_lstm_head(&mut rng, &mut params, model.lstm_input_dim(), model.cfg.lstm_hidden);
            }
            ModelKind::LstmOnly => {
                init_lstm_head(&mut rng, &mut params, input_dim, model.cfg.lstm_hidden);
            }
            ModelKind::Logistic => {
                // convex objective: zero start is deterministic and unbiased
                params.push("logistic.w", Tensor::zeros(window, input_dim));
                params.push("logistic.b", Tensor::zeros(1, 1));
            }
        }
        model.params = params;
        Ok(model)
    }

    /// Width of the graph embedding appended to each window row.
    pub fn gat_output_dim(&self) -> usize {
        match self.kind {
            ModelKind::TemporalGat => self.cfg.gat_heads * self.cfg.gat_dim,
            _ => 0,
        }
    }

    /// Width of the rows the LSTM consumes.
    pub fn lstm_input_dim(&self) -> usize {
        self.input_dim + self.gat_output_dim()
    }

    /// Register every parameter on the tape so gradients flow to them.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> Result<BoundModel<'m>> {
        let mut vars = Vec::with_capacity(self.params.entries().len());
        for (_, tensor) in self.params.entries() {
            vars.push(tape.input(tensor.clone())?);
        }
        Ok(BoundModel { model: self, vars })
    }
}

/// Gate order inside the fused LSTM matrices: input, forget, candidate,
/// output. Forget bias starts at 1 so early training does not erase state.
fn init_lstm_head(rng: &mut SplitMix64, params: &mut ParamSet, d_in: usize, hidden: usize) {
    params.push("lstm.w_x", xavier(rng, d_in, 4 * hidden, d_in, hidden));
    params.push("lstm.w_h", xavier(rng, hidden, 4 * hidden, hidden, hidden));
    let mut bias = Tensor::zeros(1, 4 * hidden);
    for j in hidden..2 * hidden {
        bias.set(0, j, 1.0);
    }
    params.push("lstm.bias", bias);
    params.push("head.w", xavier(rng, hidden, 1, hidden, 1));
    params.push("head.b", Tensor::zeros(1, 1));
}

/// A model whose parameters live on a tape as gradient-bearing inputs.
pub struct BoundModel<'m> {
    pub model: &'m Model,
    vars: Vec<VarId>,
}

impl<'m> BoundModel<'m> {
    pub fn var(&self, name: &str) -> VarId {
        let pos = self
            .model
            .params
            .entries()
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[pos]
    }

    /// (name, tape var) pairs in parameter order, for gradient collection.
    pub fn param_vars(&self) -> impl Iterator<Item = (&str, VarId)> + '_ {
        self.model.params.entries().iter().map(|(n, _)| n.as_str()).zip(self.vars.iter().copied())
    }

    /// Run the attention stack over the whole graph; returns the
    /// n_nodes x gat_output_dim embedding matrix.
    pub fn node_embeddings(
        &self,
        tape: &mut Tape,
        graph: &ProductionGraph,
        node_feats: &Tensor,
    ) -> Result<VarId> {
        if self.model.kind != ModelKind::TemporalGat {
            return Err(Error::Config(format!(
                "{} model has no graph component",
                self.model.kind
            )));
        }
        if node_feats.cols() != self.model.input_dim || node_feats.rows() != graph.n_nodes() {
            return Err(Error::Shape {
                op: "node_embeddings".into(),
                lhs: vec![graph.n_nodes(), self.model.input_dim],
                rhs: vec![node_feats.rows(), node_feats.cols()],
            });
        }
        let cfg = &self.model.cfg;
        let mut z = tape.input(node_feats.clone())?;
        for layer in 0..cfg.gat_layers {
            let mut heads = Vec::with_capacity(cfg.gat_heads);
            for head in 0..cfg.gat_heads {
                let w = self.var(&format!("gat.layer{layer}.head{head}.w"));
                let a = self.var(&format!("gat.layer{layer}.head{head}.a"));
                let (out, _alpha) =
                    gat_head_forward(tape, graph, z, w, a, cfg.leaky_slope, cfg.gat_activation)?;
                heads.push(out);
            }
            z = if heads.len() == 1 { heads[0] } else { tape.concat(&heads, 1)? };
        }
        Ok(z)
    }

    /// Probability for one window. Graph models need `well_ctx` =
    /// (node-embedding matrix from [`Self::node_embeddings`], node row of
    /// the sample's well); the baselines reject it.
    pub fn predict(
        &self,
        tape: &mut Tape,
        x: &Tensor,
        well_ctx: Option<(VarId, usize)>,
    ) -> Result<VarId> {
        if x.rows() != self.model.window || x.cols() != self.model.input_dim {
            return Err(Error::Shape {
                op: "predict".into(),
                lhs: vec![self.model.window, self.model.input_dim],
                rhs: vec![x.rows(), x.cols()],
            });
        }
        let x_var = tape.input(x.clone())?;
        self.predict_var(tape, x_var, well_ctx)
    }

    /// As [`Self::predict`] but over an existing tape variable.
    pub fn predict_var(
        &self,
        tape: &mut Tape,
        x: VarId,
        well_ctx: Option<(VarId, usize)>,
    ) -> Result<VarId> {
        match (self.model.kind, well_ctx) {
            (ModelKind::Logistic, None) => {
                logistic_forward(tape, x, self.var("logistic.w"), self.var("logistic.b"))
            }
            (ModelKind::LstmOnly, None) => {
                let h = lstm_forward(
                    tape,
                    x,
                    self.var("lstm.w_x"),
                    self.var("lstm.w_h"),
                    self.var("lstm.bias"),
                    self.model.cfg.lstm_hidden,
                )?;
                sigmoid_head(tape, h, self.var("head.w"), self.var("head.b"))
            }
            (ModelKind::TemporalGat, Some((embeddings, node_row))) => {
                let z_well = tape.gather_rows(embeddings, &[node_row])?;
                let z_rep = tape.repeat_rows(z_well, self.model.window)?;
                let aug = tape.concat(&[x, z_rep], 1)?;
                let h = lstm_forward(
                    tape,
                    aug,
                    self.var("lstm.w_x"),
                    self.var("lstm.w_h"),
                    self.var("lstm.bias"),
                    self.model.cfg.lstm_hidden,
                )?;
                sigmoid_head(tape, h, self.var("head.w"), self.var("head.b"))
            }
            (ModelKind::TemporalGat, None) => Err(Error::Config(
                "graph model prediction needs node embeddings and a well row".into(),
            )),
            (kind, Some(_)) => Err(Error::Config(format!(
                "{kind} model takes no graph context"
            ))),
        }
    }
}

/// One attention head: score every directed edge with
/// LeakyReLU(a . [W z_dst, W z_src]), softmax the scores per destination,
/// and aggregate alpha-weighted transformed sources into each destination.
/// Returns the activated per-node output and the per-edge alphas.
pub fn gat_head_forward(
    tape: &mut Tape,
    graph: &ProductionGraph,
    feats: VarId,
    w: VarId,
    a: VarId,
    leaky_slope: f64,
    activation: Activation,
) -> Result<(VarId, VarId)> {
    let n = graph.n_nodes();
    let mut has_in_edge = vec![false; n];
    let mut srcs = Vec::with_capacity(graph.edges.len());
    let mut dsts = Vec::with_capacity(graph.edges.len());
    for e in &graph.edges {
        srcs.push(e.src);
        dsts.push(e.dst);
        has_in_edge[e.dst] = true;
    }
    if let Some(orphan) = has_in_edge.iter().position(|&ok| !ok) {
        return Err(Error::Topology(format!(
            "node {:?} has no incoming edges; attention cannot normalize",
            graph.nodes[orphan].id
        )));
    }
    let zw = tape.matmul(feats, w)?;
    let z_dst = tape.gather_rows(zw, &dsts)?;
    let z_src = tape.gather_rows(zw, &srcs)?;
    let pair = tape.concat(&[z_dst, z_src], 1)?;
    let raw = tape.matmul(pair, a)?;
    let scores = tape.leaky_relu(raw, leaky_slope)?;
    let alpha = tape.segment_softmax(scores, &dsts)?;
    let weighted = tape.scale_rows(z_src, alpha)?;
    let agg = tape.segment_sum(weighted, &dsts, n)?;
    let out = activation.apply(tape, agg)?;
    Ok((out, alpha))
}

/// Standard LSTM over the rows of `inputs`, zero-initialized state;
/// returns the final hidden state (1 x hidden). Gate pre-activations are
/// computed fused: [i f g o] = x W_x + h W_h + bias.
pub fn lstm_forward(
    tape: &mut Tape,
    inputs: VarId,
    w_x: VarId,
    w_h: VarId,
    bias: VarId,
    hidden: usize,
) -> Result<VarId> {
    let [steps, d_in] = tape.value(inputs).shape();
    let got = tape.value(w_x).shape();
    if got != [d_in, 4 * hidden] {
        return Err(Error::Shape {
            op: "lstm_forward w_x".into(),
            lhs: vec![d_in, 4 * hidden],
            rhs: got.to_vec(),
        });
    }
    let mut h = tape.input(Tensor::zeros(1, hidden))?;
    let mut c = tape.input(Tensor::zeros(1, hidden))?;
    for t in 0..steps {
        let x_t = tape.slice_rows(inputs, t, 1)?;
        let from_x = tape.matmul(x_t, w_x)?;
        let from_h = tape.matmul(h, w_h)?;
        let partial = tape.add(from_x, from_h)?;
        let gates = tape.add(partial, bias)?;
        let i_pre = tape.slice_cols(gates, 0, hidden)?;
        let f_pre = tape.slice_cols(gates, hidden, hidden)?;
        let g_pre = tape.slice_cols(gates, 2 * hidden, hidden)?;
        let o_pre = tape.slice_cols(gates, 3 * hidden, hidden)?;
        let i = tape.sigmoid(i_pre)?;
        let f = tape.sigmoid(f_pre)?;
        let g = tape.tanh(g_pre)?;
        let o = tape.sigmoid(o_pre)?;
        let kept = tape.mul(f, c)?;
        let written = tape.mul(i, g)?;
        c = tape.add(kept, written)?;
        let c_squashed = tape.tanh(c)?;
        h = tape.mul(o, c_squashed)?;
    }
    Ok(h)
}

/// sigmoid(h w + b) for a 1 x hidden state.
pub fn sigmoid_head(tape: &mut Tape, h: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let z = tape.matmul(h, w)?;
    let logit = tape.add(z, b)?;
    tape.sigmoid(logit)
}

/// sigmoid(<w, X> + b) with w shaped like the window, equivalent to a
/// linear map over the flattened window.
pub fn logistic_forward(tape: &mut Tape, x: VarId, w: VarId, b: VarId) -> Result<VarId> {
    let prod = tape.mul(x, w)?;
    let s = tape.sum(prod)?;
    let logit = tape.add(s, b)?;
    tape.sigmoid(logit)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::graph::{build_graph, Edge, EdgeKind, GraphConfig, Node, NodeKind};
    use crate::ingest::Topology;

    fn topo(wells: &[&str]) -> Topology {
        Topology {
            well_facility: wells.iter().map(|w| (w.to_string(), "F".to_string())).collect(),
            facility_field: [("F".to_string(), "FIELD".to_string())].into_iter().collect(),
        }
    }

    fn rnd_tensor(rng: &mut SplitMix64, rows: usize, cols: usize) -> Tensor {
        let data = (0..rows * cols).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig { gat_dim: 3, lstm_hidden: 4, ..ModelConfig::default() }
    }

    #[test]
    fn self_edge_only_node_is_tanh_of_own_transform() {
        // upward-only hierarchy: a well's sole in-edge is its self loop
        let t = topo(&["W1", "W2"]);
        let cfg = GraphConfig { directed_hierarchy: true, peer_edges: false };
        let graph = build_graph(&t, &cfg).unwrap();
        let model = Model::new(
            ModelKind::TemporalGat,
            ModelConfig { gat_dim: 3, ..ModelConfig::default() },
            4,
            5,
            11,
        )
        .unwrap();
        let mut rng = SplitMix64::new(99);
        let feats = rnd_tensor(&mut rng, graph.n_nodes(), 4);
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let z = bound.node_embeddings(&mut tape, &graph, &feats).unwrap();
        let w = model.params.get("gat.layer0.head0.w").unwrap();
        let row = graph.index_of("W1").unwrap();
        for j in 0..3 {
            let mut expect = 0.0;
            for k in 0..4 {
                expect += feats.get(row, k) * w.get(k, j);
            }
            let got = tape.value(z).get(row, j);
            assert!((got - expect.tanh()).abs() < 1e-12, "col {j}: {got} vs {}", expect.tanh());
        }
    }

    #[test]
    fn identical_neighbors_split_attention_evenly() {
        // B's in-edges: A -> B and the self loop; A and B share features
        let nodes = vec![
            Node { id: "A".into(), kind: NodeKind::Well },
            Node { id: "B".into(), kind: NodeKind::Well },
        ];
        let edges = vec![
            Edge { src: 0, dst: 1, kind: EdgeKind::Peer },
            Edge { src: 0, dst: 0, kind: EdgeKind::SelfLoop },
            Edge { src: 1, dst: 1, kind: EdgeKind::SelfLoop },
        ];
        let graph = ProductionGraph::from_parts(nodes, edges).unwrap();
        let mut rng = SplitMix64::new(5);
        let one_row = rnd_tensor(&mut rng, 1, 4);
        let mut data = one_row.row_slice(0).to_vec();
        data.extend_from_slice(one_row.row_slice(0));
        let feats = Tensor::from_vec(2, 4, data).unwrap();

        let mut tape = Tape::new();
        let f = tape.input(feats).unwrap();
        let w = tape.input(rnd_tensor(&mut rng, 4, 3)).unwrap();
        let a = tape.input(rnd_tensor(&mut rng, 6, 1)).unwrap();
        let (_, alpha) =
            gat_head_forward(&mut tape, &graph, f, w, a, 0.2, Activation::Tanh).unwrap();
        let alpha = tape.value(alpha);
        // edges 0 and 2 point at B
        assert!((alpha.get(0, 0) - 0.5).abs() < 1e-12);
        assert!((alpha.get(2, 0) - 0.5).abs() < 1e-12);
        assert!((alpha.get(1, 0) - 1.0).abs() < 1e-12, "A has only its self edge");
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let t = topo(&["W1", "W2", "W3", "W4", "W5"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        assert_eq!(graph.n_nodes(), 7);
        let mut rng = SplitMix64::new(31);
        let feats = rnd_tensor(&mut rng, 7, 5);
        let mut tape = Tape::new();
        let f = tape.input(feats).unwrap();
        let w = tape.input(rnd_tensor(&mut rng, 5, 4)).unwrap();
        let a = tape.input(rnd_tensor(&mut rng, 8, 1)).unwrap();
        let (_, alpha) =
            gat_head_forward(&mut tape, &graph, f, w, a, 0.2, Activation::Tanh).unwrap();
        let alpha = tape.value(alpha);
        let mut per_node = vec![0.0; graph.n_nodes()];
        for (e, edge) in graph.edges.iter().enumerate() {
            per_node[edge.dst] += alpha.get(e, 0);
        }
        for (i, s) in per_node.iter().enumerate() {
            assert!((s - 1.0).abs() < 1e-12, "node {i}: alpha sum {s}");
        }
    }

    #[test]
    fn zero_parameters_predict_one_half() {
        let t = topo(&["W1"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let x = Tensor::full(5, 4, 0.7);
        let feats = Tensor::full(graph.n_nodes(), 4, 0.3);
        for kind in [ModelKind::TemporalGat, ModelKind::LstmOnly, ModelKind::Logistic] {
            let mut model = Model::new(kind, tiny_cfg(), 4, 5, 3).unwrap();
            model.params.zero_all();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let ctx = if kind.uses_graph() {
                let z = bound.node_embeddings(&mut tape, &graph, &feats).unwrap();
                Some((z, graph.index_of("W1").unwrap()))
            } else {
                None
            };
            let y = bound.predict(&mut tape, &x, ctx).unwrap();
            assert_eq!(tape.value(y).item().unwrap(), 0.5, "{kind}");
        }
    }

    #[test]
    fn predictions_stay_strictly_inside_unit_interval() {
        let t = topo(&["W1", "W2"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let mut rng = SplitMix64::new(8);
        for seed in 0..5 {
            let model = Model::new(ModelKind::TemporalGat, tiny_cfg(), 6, 4, seed).unwrap();
            let x = rnd_tensor(&mut rng, 4, 6);
            let feats = rnd_tensor(&mut rng, graph.n_nodes(), 6);
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let z = bound.node_embeddings(&mut tape, &graph, &feats).unwrap();
            let y = bound
                .predict(&mut tape, &x, Some((z, graph.index_of("W2").unwrap())))
                .unwrap();
            let p = tape.value(y).item().unwrap();
            assert!(p > 0.0 && p < 1.0, "seed {seed}: {p}");
        }
    }

    #[test]
    fn lstm_zero_input_is_a_fixed_point() {
        // zero input and zero candidate bias keep c at 0 regardless of the
        // other weights, so h stays exactly 0
        let model = Model::new(ModelKind::LstmOnly, tiny_cfg(), 3, 6, 17).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        let x = tape.input(Tensor::zeros(6, 3)).unwrap();
        let h = lstm_forward(
            &mut tape,
            x,
            bound.var("lstm.w_x"),
            bound.var("lstm.w_h"),
            bound.var("lstm.bias"),
            4,
        )
        .unwrap();
        assert_eq!(tape.value(h).data(), &[0.0; 4]);
    }

    #[test]
    fn single_step_lstm_matches_hand_computed_cell() {
        let hidden = 2;
        let d_in = 2;
        // explicit small weights; gate order i, f, g, o
        let w_x = Tensor::from_vec(
            d_in,
            4 * hidden,
            vec![
                0.1, -0.2, 0.3, 0.0, -0.1, 0.2, 0.4, -0.3, //
                0.2, 0.1, -0.4, 0.5, 0.3, -0.2, 0.1, 0.2,
            ],
        )
        .unwrap();
        let w_h = Tensor::zeros(hidden, 4 * hidden); // h0 = 0 makes this inert
        let bias = Tensor::from_vec(
            1,
            4 * hidden,
            vec![0.05, -0.05, 1.0, 1.0, 0.1, -0.1, 0.0, 0.2],
        )
        .unwrap();
        let x = Tensor::from_vec(1, d_in, vec![0.6, -0.8]).unwrap();

        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let wxv = tape.input(w_x.clone()).unwrap();
        let whv = tape.input(w_h).unwrap();
        let bv = tape.input(bias.clone()).unwrap();
        let h = lstm_forward(&mut tape, xv, wxv, whv, bv, hidden).unwrap();

        let sigmoid = |v: f64| 1.0 / (1.0 + (-v).exp());
        for j in 0..hidden {
            let pre = |gate: usize| {
                let col = gate * hidden + j;
                x.get(0, 0) * w_x.get(0, col) + x.get(0, 1) * w_x.get(1, col) + bias.get(0, col)
            };
            let i = sigmoid(pre(0));
            let f = sigmoid(pre(1));
            let g = pre(2).tanh();
            let o = sigmoid(pre(3));
            let c = f * 0.0 + i * g;
            let expect = o * c.tanh();
            let got = tape.value(h).get(0, j);
            assert!((got - expect).abs() < 1e-12, "unit {j}: {got} vs {expect}");
        }
    }

    #[test]
    fn longer_constant_input_keeps_evolving_state() {
        let model = Model::new(ModelKind::LstmOnly, tiny_cfg(), 3, 2, 23).unwrap();
        let run = |steps: usize| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let x = tape.input(Tensor::full(steps, 3, 0.5)).unwrap();
            let h = lstm_forward(
                &mut tape,
                x,
                bound.var("lstm.w_x"),
                bound.var("lstm.w_h"),
                bound.var("lstm.bias"),
                4,
            )
            .unwrap();
            tape.value(h).clone()
        };
        assert_ne!(run(1), run(2), "state saturated after one step");
    }

    #[test]
    fn lstm_only_equals_graph_model_with_degenerate_embedding() {
        // zeroed attention params give z_well = tanh(0) = 0; rows of w_x
        // that would read the embedding see only zeros, so copying the
        // baseline's weights into the top rows reproduces it exactly
        let baseline = Model::new(ModelKind::LstmOnly, tiny_cfg(), 3, 4, 41).unwrap();
        let mut gat = Model::new(ModelKind::TemporalGat, tiny_cfg(), 3, 4, 42).unwrap();
        for (name, tensor) in gat.params.entries_mut() {
            if name.starts_with("gat.") {
                for v in tensor.data_mut() {
                    *v = 0.0;
                }
            }
        }
        let hidden = 4;
        let d_gat = gat.gat_output_dim();
        let mut w_x = Tensor::zeros(3 + d_gat, 4 * hidden);
        let base_wx = baseline.params.get("lstm.w_x").unwrap();
        for r in 0..3 {
            for c in 0..4 * hidden {
                w_x.set(r, c, base_wx.get(r, c));
            }
        }
        *gat.params.get_mut("lstm.w_x").unwrap() = w_x;
        for name in ["lstm.w_h", "lstm.bias", "head.w", "head.b"] {
            *gat.params.get_mut(name).unwrap() = baseline.params.get(name).unwrap().clone();
        }

        let t = topo(&["W1"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let mut rng = SplitMix64::new(7);
        let x = rnd_tensor(&mut rng, 4, 3);
        let feats = rnd_tensor(&mut rng, graph.n_nodes(), 3);

        let mut tape_a = Tape::new();
        let bound_a = baseline.bind(&mut tape_a).unwrap();
        let ya = bound_a.predict(&mut tape_a, &x, None).unwrap();

        let mut tape_b = Tape::new();
        let bound_b = gat.bind(&mut tape_b).unwrap();
        let z = bound_b.node_embeddings(&mut tape_b, &graph, &feats).unwrap();
        let yb = bound_b
            .predict(&mut tape_b, &x, Some((z, graph.index_of("W1").unwrap())))
            .unwrap();

        assert_eq!(tape_a.value(ya).item().unwrap(), tape_b.value(yb).item().unwrap());
    }

    #[test]
    fn peer_edges_control_sibling_influence() {
        let t = topo(&["W1", "W2", "W3"]);
        let isolated = GraphConfig { directed_hierarchy: true, peer_edges: false };
        let peered = GraphConfig { directed_hierarchy: true, peer_edges: true };
        let model = Model::new(
            ModelKind::TemporalGat,
            ModelConfig { gat_dim: 3, ..ModelConfig::default() },
            4,
            5,
            13,
        )
        .unwrap();
        let mut rng = SplitMix64::new(3);
        let base = rnd_tensor(&mut rng, 5, 4);
        let mut perturbed = base.clone();
        let sibling_row = 1; // W2 in node order
        for c in 0..4 {
            perturbed.set(sibling_row, c, perturbed.get(sibling_row, c) + 2.5);
        }

        let embed = |cfg: &GraphConfig, feats: &Tensor| {
            let graph = build_graph(&t, cfg).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let z = bound.node_embeddings(&mut tape, &graph, feats).unwrap();
            let row = graph.index_of("W1").unwrap();
            tape.value(z).row_slice(row).to_vec()
        };

        assert_eq!(embed(&isolated, &base), embed(&isolated, &perturbed));
        assert_ne!(embed(&peered, &base), embed(&peered, &perturbed));
    }

    #[test]
    fn same_seed_gives_bit_identical_forward() {
        let t = topo(&["W1", "W2"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let mut rng = SplitMix64::new(777);
        let x = rnd_tensor(&mut rng, 4, 5);
        let feats = rnd_tensor(&mut rng, graph.n_nodes(), 5);
        let run = || {
            let model = Model::new(ModelKind::TemporalGat, tiny_cfg(), 5, 4, 2024).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let z = bound.node_embeddings(&mut tape, &graph, &feats).unwrap();
            let y = bound
                .predict(&mut tape, &x, Some((z, graph.index_of("W1").unwrap())))
                .unwrap();
            tape.value(y).item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn full_model_gradient_check() {
        let t = topo(&["W1", "W2"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let n = graph.n_nodes();
        let (f, r, d_g, hidden) = (3, 2, 2, 2);
        let mut rng = SplitMix64::new(4242);
        let inputs = vec![
            rnd_tensor(&mut rng, n, f),           // node features
            rnd_tensor(&mut rng, r, f),           // window
            rnd_tensor(&mut rng, f, d_g),         // gat W
            rnd_tensor(&mut rng, 2 * d_g, 1),     // gat a
            rnd_tensor(&mut rng, f + d_g, 4 * hidden), // lstm w_x
            rnd_tensor(&mut rng, hidden, 4 * hidden),  // lstm w_h
            rnd_tensor(&mut rng, 1, 4 * hidden),  // lstm bias
            rnd_tensor(&mut rng, hidden, 1),      // head w
            rnd_tensor(&mut rng, 1, 1),           // head b
        ];
        let well_row = graph.index_of("W1").unwrap();
        let err = grad_check(
            |tape, ids| {
                let (z, _) = gat_head_forward(
                    tape,
                    &graph,
                    ids[0],
                    ids[2],
                    ids[3],
                    0.2,
                    Activation::Tanh,
                )?;
                let z_well = tape.gather_rows(z, &[well_row])?;
                let z_rep = tape.repeat_rows(z_well, r)?;
                let aug = tape.concat(&[ids[1], z_rep], 1)?;
                let h = lstm_forward(tape, aug, ids[4], ids[5], ids[6], hidden)?;
                sigmoid_head(tape, h, ids[7], ids[8])
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "full-model grad check: max rel err {err:.3e}");
    }

    #[test]
    fn logistic_symmetry_under_duplicate_columns() {
        let mut model = Model::new(ModelKind::Logistic, tiny_cfg(), 3, 2, 0).unwrap();
        // symmetric init: columns 0 and 2 of w identical
        let w = Tensor::from_vec(2, 3, vec![0.4, -0.7, 0.4, 0.1, 0.9, 0.1]).unwrap();
        *model.params.get_mut("logistic.w").unwrap() = w;
        let x = Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let swapped = Tensor::from_vec(2, 3, vec![3.0, 2.0, 1.0, 6.0, 5.0, 4.0]).unwrap();
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape).unwrap();
            let y = bound.predict(&mut tape, x, None).unwrap();
            tape.value(y).item().unwrap()
        };
        assert_eq!(run(&x), run(&swapped));
    }

    #[test]
    fn shape_and_context_misuse_is_rejected() {
        let t = topo(&["W1"]);
        let graph = build_graph(&t, &GraphConfig::default()).unwrap();
        let model = Model::new(ModelKind::TemporalGat, tiny_cfg(), 4, 5, 1).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).unwrap();
        // wrong window shape
        assert!(bound.predict(&mut tape, &Tensor::zeros(3, 4), None).is_err());
        // graph model without context
        assert!(bound.predict(&mut tape, &Tensor::zeros(5, 4), None).is_err());
        // wrong node-feature width
        assert!(bound.node_embeddings(&mut tape, &graph, &Tensor::zeros(3, 7)).is_err());

        let baseline = Model::new(ModelKind::LstmOnly, tiny_cfg(), 4, 5, 1).unwrap();
        let mut tape2 = Tape::new();
        let bb = baseline.bind(&mut tape2).unwrap();
        let fake_z = tape2.input(Tensor::zeros(3, 3)).unwrap();
        assert!(bb.predict(&mut tape2, &Tensor::zeros(5, 4), Some((fake_z, 0))).is_err());
    }
}
