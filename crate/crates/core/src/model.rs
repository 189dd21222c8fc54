//! The full network: per-view fusion, a stack of aggregator units over the
//! `V*T` vertex grid, and a classification head on the pooled features.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{attend, KeyScope};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::fusion::{FusionDims, FusionMode, FusionParams, ViewTokens};
use crate::graph::{GcnLayer, ViewTemporalGraph};
use crate::params::{Bound, Linear, ParamStore};
use crate::rng::{self, Rng64};
use crate::scan::{DirectionalScan, ScanDims, ScanMode, ScanOrder};
use crate::tensor::Tensor;

/// What mixes information across vertices between fusion and the head.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    Linear,
    Attention,
    Ssm,
    GcnRule,
    GcnRuleKnn,
    AttentionGraph,
    Mvgmn,
}

impl Aggregator {
    pub const ALL: [Aggregator; 7] = [
        Aggregator::Linear,
        Aggregator::Attention,
        Aggregator::Ssm,
        Aggregator::GcnRule,
        Aggregator::GcnRuleKnn,
        Aggregator::AttentionGraph,
        Aggregator::Mvgmn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::Linear => "linear",
            Aggregator::Attention => "attention",
            Aggregator::Ssm => "ssm",
            Aggregator::GcnRule => "gcn_rule",
            Aggregator::GcnRuleKnn => "gcn_rule_knn",
            Aggregator::AttentionGraph => "attention_graph",
            Aggregator::Mvgmn => "mvgmn",
        }
    }

    pub fn uses_graph(self) -> bool {
        matches!(
            self,
            Aggregator::GcnRule | Aggregator::GcnRuleKnn | Aggregator::AttentionGraph | Aggregator::Mvgmn
        )
    }

    pub fn uses_knn(self) -> bool {
        matches!(
            self,
            Aggregator::GcnRuleKnn | Aggregator::AttentionGraph | Aggregator::Mvgmn
        )
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Aggregator::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Aggregator::ALL.iter().map(|a| a.name()).collect();
            Error::config(format!(
                "unknown aggregator {s:?} (expected one of {})",
                names.join(", ")
            ))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub views: usize,
    pub steps: usize,
    pub d_model: usize,
    pub d_rgb: usize,
    pub d_sk: usize,
    pub d_key: usize,
    pub d_state: usize,
    pub n_blocks: usize,
    pub scan_mode: ScanMode,
    pub aggregator: Aggregator,
    pub knn_k: usize,
    pub fusion_mode: FusionMode,
    pub n_classes: usize,
    pub gcn_layers_per_block: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            views: 3,
            steps: 8,
            d_model: 32,
            d_rgb: 32,
            d_sk: 24,
            d_key: 32,
            d_state: 8,
            n_blocks: 4,
            scan_mode: ScanMode::ViewTime,
            aggregator: Aggregator::Mvgmn,
            knn_k: 3,
            fusion_mode: FusionMode::CrossAttention,
            n_classes: 10,
            gcn_layers_per_block: 1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.views == 0 || self.steps == 0 {
            return Err(Error::config("views and steps must be at least 1"));
        }
        if [self.d_model, self.d_rgb, self.d_sk, self.d_key, self.d_state].contains(&0) {
            return Err(Error::config("model widths must be positive"));
        }
        block_schedule(self.n_blocks, self.scan_mode)?;
        if self.knn_k < 1 {
            return Err(Error::config("model.knn_k must be at least 1"));
        }
        if self.aggregator.uses_knn() && self.knn_k >= self.views * self.steps {
            return Err(Error::config(format!(
                "model.knn_k = {} needs at least {} vertices, the grid has {}",
                self.knn_k,
                self.knn_k + 1,
                self.views * self.steps
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::config("model.n_classes must be at least 2"));
        }
        if self.gcn_layers_per_block == 0 {
            return Err(Error::config("model.gcn_layers_per_block must be at least 1"));
        }
        Ok(())
    }

    pub fn vertices(&self) -> usize {
        self.views * self.steps
    }
}

/// Directional scan order of each unit; every unit pairs a scan with a GCN
/// stage in the full model.
///
/// Two blocks run `[ViewForward, TimeForward]` under `ViewTime`; 4, 8 and 12
/// blocks repeat the mode's full bidirectional cycle.
pub fn block_schedule(n_blocks: usize, mode: ScanMode) -> Result<Vec<ScanOrder>> {
    if ![2, 4, 8, 12].contains(&n_blocks) {
        return Err(Error::config(format!(
            "model.n_blocks must be one of 2, 4, 8, 12, got {n_blocks}"
        )));
    }
    if n_blocks == 2 && mode == ScanMode::ViewTime {
        return Ok(vec![ScanOrder::ViewForward, ScanOrder::TimeForward]);
    }
    Ok(mode.directions().iter().copied().cycle().take(n_blocks).collect())
}

/// `X + softmax(X W_q (X W_k)ᵀ / √D) X W_v W_o` over all vertices.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut Rng64) -> Self {
        let mut lin = |part: &str| Linear::new(store, &format!("{name}.{part}"), d, d, false, rng);
        Self {
            w_q: lin("q"),
            w_k: lin("k"),
            w_v: lin("v"),
            w_o: lin("o"),
        }
    }

    fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let q = self.w_q.forward(tape, p, x)?;
        let k = self.w_k.forward(tape, p, x)?;
        let v = self.w_v.forward(tape, p, x)?;
        let a = attend(tape, q, k, v, KeyScope::All)?;
        let o = self.w_o.forward(tape, p, a)?;
        tape.add(x, o)
    }
}

/// A linear map followed by graph convolutions.
#[derive(Clone, Debug)]
pub struct GraphStage {
    pub lin: Linear,
    pub gcn: Vec<GcnLayer>,
}

impl GraphStage {
    fn new(store: &mut ParamStore, name: &str, d: usize, layers: usize, rng: &mut Rng64) -> Self {
        let lin = Linear::new(store, &format!("{name}.lin"), d, d, true, rng);
        let gcn = gcn_stack(store, name, d, layers, rng);
        Self { lin, gcn }
    }
}

fn gcn_stack(store: &mut ParamStore, name: &str, d: usize, layers: usize, rng: &mut Rng64) -> Vec<GcnLayer> {
    (0..layers)
        .map(|l| GcnLayer::new(store, &format!("{name}.gcn{l}"), d, d, rng))
        .collect()
}

#[derive(Clone, Debug)]
pub enum Unit {
    Linear(Linear),
    Attention(SelfAttention),
    Scan(DirectionalScan),
    Graph(GraphStage),
    AttentionGraph(SelfAttention, GraphStage),
    ScanGraph(DirectionalScan, Vec<GcnLayer>),
}

pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    fusion: FusionParams,
    units: Vec<Unit>,
    head: Linear,
    /// Normalized rule-edge operator, for aggregators with graph stages.
    rule_operator: Option<Tensor>,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng::seeded(seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let fusion = FusionParams::new(
            &mut store,
            config.fusion_mode,
            FusionDims {
                d_rgb: config.d_rgb,
                d_sk: config.d_sk,
                d_key: config.d_key,
                d_model: d,
            },
            &mut rng,
        )?;
        let dims = ScanDims::new(d, config.d_state);
        dims.validate()?;
        let schedule = block_schedule(config.n_blocks, config.scan_mode)?;
        let layers = config.gcn_layers_per_block;
        let units = schedule
            .iter()
            .enumerate()
            .map(|(i, &order)| {
                let name = format!("unit{i}");
                let r = &mut rng;
                let s = &mut store;
                match config.aggregator {
                    Aggregator::Linear => Unit::Linear(Linear::new(s, &format!("{name}.lin"), d, d, true, r)),
                    Aggregator::Attention => Unit::Attention(SelfAttention::new(s, &format!("{name}.attn"), d, r)),
                    Aggregator::Ssm => Unit::Scan(DirectionalScan::new(s, &format!("{name}.scan"), order, dims, r)),
                    Aggregator::GcnRule | Aggregator::GcnRuleKnn => {
                        Unit::Graph(GraphStage::new(s, &name, d, layers, r))
                    }
                    Aggregator::AttentionGraph => {
                        let attn = SelfAttention::new(s, &format!("{name}.attn"), d, r);
                        Unit::AttentionGraph(attn, GraphStage::new(s, &name, d, layers, r))
                    }
                    Aggregator::Mvgmn => {
                        let scan = DirectionalScan::new(s, &format!("{name}.scan"), order, dims, r);
                        Unit::ScanGraph(scan, gcn_stack(s, &name, d, layers, r))
                    }
                }
            })
            .collect();
        let head = Linear::new(&mut store, "head", 2 * d, config.n_classes, true, &mut rng);
        let rule_operator = if config.aggregator.uses_graph() {
            Some(ViewTemporalGraph::build(config.views, config.steps, None)?.normalized())
        } else {
            None
        };
        Ok(Self {
            config,
            store,
            fusion,
            units,
            head,
            rule_operator,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must match.
    pub fn from_parts(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::input(format!(
                "checkpoint holds {} tensors, the configured model has {}",
                params.len(),
                model.store.len()
            )));
        }
        for (name, value) in params {
            model.store.set(&name, value)?;
        }
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn units(&self) -> &[Unit] {
        &self.units
    }

    /// Total trainable scalars across fusion, aggregator and head.
    pub fn count_parameters(&self) -> usize {
        self.store.scalar_count()
    }

    /// Fused canonical grid `P₀: [V*T, D]`.
    pub fn fuse(&self, tape: &mut Tape, p: &Bound, views: &[ViewTokens]) -> Result<Var> {
        if views.len() != self.config.views {
            return Err(Error::config(format!(
                "model expects {} views, sample has {}",
                self.config.views,
                views.len()
            )));
        }
        let mut rows = Vec::with_capacity(views.len());
        for view in views {
            if view.frames() != self.config.steps {
                return Err(Error::config(format!(
                    "model expects {} frames per view, sample has {}",
                    self.config.steps,
                    view.frames()
                )));
            }
            rows.push(self.fusion.forward(tape, p, view)?);
        }
        tape.concat_rows(&rows)
    }

    fn graph(
        &self,
        tape: &Tape,
        x: Var,
        knn: bool,
        record: &mut Option<&mut Vec<ViewTemporalGraph>>,
    ) -> Result<Tensor> {
        let (views, steps) = (self.config.views, self.config.steps);
        if !knn && record.is_none() {
            return Ok(self
                .rule_operator
                .clone()
                .expect("graph aggregators build the rule operator"));
        }
        let g = ViewTemporalGraph::build(views, steps, knn.then(|| (tape.value(x), self.config.knn_k)))?;
        let op = g.normalized();
        if let Some(graphs) = record {
            graphs.push(g);
        }
        Ok(op)
    }

    fn gcn(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mut x: Var,
        layers: &[GcnLayer],
        knn: bool,
        record: &mut Option<&mut Vec<ViewTemporalGraph>>,
    ) -> Result<Var> {
        for layer in layers {
            let op = self.graph(tape, x, knn, record)?;
            x = layer.forward(tape, p, x, &op)?;
        }
        Ok(x)
    }

    /// Runs the aggregator units over a canonical `[V*T, D]` grid.
    pub fn aggregate(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        self.aggregate_recording(tape, p, x, None)
    }

    /// Like [`Model::aggregate`], also collecting every graph a GCN layer
    /// propagates over, in execution order.
    fn aggregate_recording(
        &self,
        tape: &mut Tape,
        p: &Bound,
        mut x: Var,
        mut record: Option<&mut Vec<ViewTemporalGraph>>,
    ) -> Result<Var> {
        let shape = tape.shape(x);
        if shape != [self.config.vertices(), self.config.d_model] {
            return Err(Error::config(format!(
                "aggregator expects a [{}, {}] grid, got {shape:?}",
                self.config.vertices(),
                self.config.d_model
            )));
        }
        let knn = self.config.aggregator.uses_knn();
        let (views, steps) = (self.config.views, self.config.steps);
        for unit in &self.units {
            x = match unit {
                Unit::Linear(lin) => {
                    let y = lin.forward(tape, p, x)?;
                    tape.relu(y)
                }
                Unit::Attention(attn) => attn.forward(tape, p, x)?,
                Unit::Scan(scan) => scan.forward(tape, p, x, views, steps)?,
                Unit::Graph(stage) => {
                    let y = stage.lin.forward(tape, p, x)?;
                    self.gcn(tape, p, y, &stage.gcn, knn, &mut record)?
                }
                Unit::AttentionGraph(attn, stage) => {
                    let y = attn.forward(tape, p, x)?;
                    let y = stage.lin.forward(tape, p, y)?;
                    self.gcn(tape, p, y, &stage.gcn, knn, &mut record)?
                }
                Unit::ScanGraph(scan, layers) => {
                    let y = scan.forward(tape, p, x, views, steps)?;
                    self.gcn(tape, p, y, layers, knn, &mut record)?
                }
            };
        }
        Ok(x)
    }

    /// Logits `[1, C]` from `concat(GAP(X_final), GAP(P₀))`.
    pub fn head(&self, tape: &mut Tape, p: &Bound, x_final: Var, p0: Var) -> Result<Var> {
        let gx = tape.mean_rows(x_final)?;
        let gp = tape.mean_rows(p0)?;
        let both = tape.concat_cols(&[gx, gp])?;
        self.head.forward(tape, p, both)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, views: &[ViewTokens]) -> Result<Var> {
        let p0 = self.fuse(tape, p, views)?;
        let x = self.aggregate(tape, p, p0)?;
        self.head(tape, p, x, p0)
    }

    /// Graphs built while classifying `views`, one per GCN layer in
    /// execution order; KNN edges reflect that layer's input features.
    pub fn block_graphs(&self, views: &[ViewTokens]) -> Result<Vec<ViewTemporalGraph>> {
        if !self.config.aggregator.uses_graph() {
            return Err(Error::config(format!(
                "aggregator {} has no graph stages",
                self.config.aggregator
            )));
        }
        let mut tape = Tape::inference();
        let p = self.store.bind(&mut tape);
        let p0 = self.fuse(&mut tape, &p, views)?;
        let mut graphs = Vec::new();
        self.aggregate_recording(&mut tape, &p, p0, Some(&mut graphs))?;
        Ok(graphs)
    }

    /// Inference logits, `[n_classes]`.
    pub fn logits(&self, views: &[ViewTokens]) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let p = self.store.bind(&mut tape);
        let out = self.forward(&mut tape, &p, views)?;
        tape.value(out).clone().reshape(&[self.config.n_classes])
    }

    /// Cross-entropy loss of one sample and its gradient for every parameter.
    pub fn loss_and_grads(&self, views: &[ViewTokens], label: usize) -> Result<(f64, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let p = self.store.bind(&mut tape);
        let logits = self.forward(&mut tape, &p, views)?;
        let loss = tape.cross_entropy(logits, label)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let out = p
            .vars()
            .iter()
            .zip(self.store.values())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((value, out))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_gradients;
    use crate::rng::seeded;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut Rng64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn toy_config(aggregator: Aggregator) -> ModelConfig {
        ModelConfig {
            views: 2,
            steps: 2,
            d_model: 8,
            d_rgb: 6,
            d_sk: 5,
            d_key: 4,
            d_state: 3,
            n_blocks: 4,
            knn_k: 1,
            n_classes: 3,
            aggregator,
            ..ModelConfig::default()
        }
    }

    fn sample(cfg: &ModelConfig, np: usize, rng: &mut Rng64) -> Vec<ViewTokens> {
        (0..cfg.views)
            .map(|_| ViewTokens {
                patches: random(&[cfg.steps * np, cfg.d_rgb], rng),
                skeleton: random(&[cfg.steps, cfg.d_sk], rng),
                n_patches: np,
            })
            .collect()
    }

    #[test]
    fn schedules() {
        use ScanOrder::*;
        assert_eq!(
            block_schedule(2, ScanMode::ViewTime).unwrap(),
            vec![ViewForward, TimeForward]
        );
        assert_eq!(
            block_schedule(4, ScanMode::ViewTime).unwrap(),
            vec![ViewForward, ViewBackward, TimeForward, TimeBackward]
        );
        let eight = block_schedule(8, ScanMode::ViewTime).unwrap();
        assert_eq!(eight.len(), 8);
        assert_eq!(eight[4..], eight[..4]);
        assert_eq!(block_schedule(12, ScanMode::ViewTime).unwrap().len(), 12);
        assert_eq!(
            block_schedule(4, ScanMode::TimePrioritized).unwrap(),
            vec![TimeForward, TimeBackward, TimeForward, TimeBackward]
        );
        assert!(matches!(block_schedule(3, ScanMode::ViewTime), Err(Error::Config(_))));
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::default().validate().is_ok());
        let bad = ModelConfig {
            knn_k: 0,
            ..ModelConfig::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig {
            n_classes: 1,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = ModelConfig {
            knn_k: 24,
            ..ModelConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!("transformer".parse::<Aggregator>().is_err());
        for a in Aggregator::ALL {
            assert_eq!(a.name().parse::<Aggregator>().unwrap(), a);
        }
    }

    #[test]
    fn logits_shape_and_determinism() {
        let mut rng = seeded(1);
        for agg in Aggregator::ALL {
            let cfg = toy_config(agg);
            let model = Model::new(cfg.clone(), 5).unwrap();
            let s = sample(&cfg, 3, &mut rng);
            let a = model.logits(&s).unwrap();
            assert_eq!(a.shape(), &[3]);
            assert!(a.all_finite());
            let b = Model::new(cfg, 5).unwrap().logits(&s).unwrap();
            assert_eq!(a.data(), b.data(), "{agg}");
        }
    }

    #[test]
    fn wrong_grid_is_config_error() {
        let cfg = toy_config(Aggregator::Mvgmn);
        let model = Model::new(cfg.clone(), 0).unwrap();
        let mut rng = seeded(2);
        let mut s = sample(&cfg, 2, &mut rng);
        s.pop();
        assert!(matches!(model.logits(&s), Err(Error::Config(_))));
    }

    #[test]
    fn linear_aggregator_does_not_mix_vertices() {
        let cfg = toy_config(Aggregator::Linear);
        let model = Model::new(cfg.clone(), 0).unwrap();
        let mut rng = seeded(3);
        let x = random(&[4, 8], &mut rng);
        let run = |x: &Tensor| {
            let mut tape = Tape::inference();
            let p = model.store().bind(&mut tape);
            let v = tape.constant(x.clone());
            let y = model.aggregate(&mut tape, &p, v).unwrap();
            tape.value(y).clone()
        };
        let base = run(&x);
        let mut changed = x.clone();
        changed.data_mut()[2 * 8..3 * 8].iter_mut().for_each(|v| *v += 1.5);
        let after = run(&changed);
        for i in [0, 1, 3] {
            assert_eq!(base.row(i), after.row(i));
        }
    }

    #[test]
    fn pooling_head_ignores_vertex_order() {
        let cfg = toy_config(Aggregator::Mvgmn);
        let model = Model::new(cfg, 0).unwrap();
        let mut rng = seeded(4);
        let x = random(&[4, 8], &mut rng);
        let p0 = random(&[4, 8], &mut rng);
        let run = |idx: &[usize]| {
            let mut tape = Tape::inference();
            let p = model.store().bind(&mut tape);
            let xv = tape.constant(crate::tensor::gather_rows(&x, idx).unwrap());
            let pv = tape.constant(crate::tensor::gather_rows(&p0, idx).unwrap());
            let out = model.head(&mut tape, &p, xv, pv).unwrap();
            tape.value(out).clone()
        };
        assert!(run(&[0, 1, 2, 3]).max_abs_diff(&run(&[2, 0, 3, 1])) < 1e-12);
    }

    #[test]
    fn parameter_ladder() {
        let base = ModelConfig::default();
        let count = |a| {
            Model::new(
                ModelConfig {
                    aggregator: a,
                    ..base.clone()
                },
                0,
            )
            .unwrap()
            .count_parameters()
        };
        let linear = count(Aggregator::Linear);
        let gcn = count(Aggregator::GcnRule);
        let gcn_knn = count(Aggregator::GcnRuleKnn);
        let ssm = count(Aggregator::Ssm);
        let mvgmn = count(Aggregator::Mvgmn);
        let attn = count(Aggregator::Attention);
        let attn_graph = count(Aggregator::AttentionGraph);
        assert!(linear < gcn);
        assert_eq!(gcn, gcn_knn);
        assert!(gcn < ssm && gcn < mvgmn);
        assert!(gcn < attn && attn < attn_graph);
        let d = base.d_model;
        assert_eq!(mvgmn - ssm, base.n_blocks * base.gcn_layers_per_block * d * d);
    }

    #[test]
    fn block_graphs_follow_features() {
        let cfg = ModelConfig {
            views: 2,
            steps: 3,
            knn_k: 2,
            ..toy_config(Aggregator::Mvgmn)
        };
        let model = Model::new(cfg.clone(), 1).unwrap();
        let s = sample(&cfg, 2, &mut seeded(7));
        let graphs = model.block_graphs(&s).unwrap();
        assert_eq!(graphs.len(), 4);
        for g in &graphs {
            assert_eq!(g.n_vertices, 6);
            assert_eq!(g.rule_time_edges.len() + g.rule_view_edges.len(), 2 * 3 + 3);
            assert_eq!(g.knn_edges.len(), 12);
        }
        let rule = Model::new(
            ModelConfig {
                aggregator: Aggregator::GcnRule,
                ..cfg.clone()
            },
            1,
        )
        .unwrap();
        assert!(rule.block_graphs(&s).unwrap().iter().all(|g| g.knn_edges.is_empty()));
        let ssm = Model::new(
            ModelConfig {
                aggregator: Aggregator::Ssm,
                ..cfg
            },
            1,
        )
        .unwrap();
        assert!(matches!(ssm.block_graphs(&s), Err(Error::Config(_))));
    }

    #[test]
    fn view_and_time_modes_differ() {
        let mut rng = seeded(6);
        let cfg = ModelConfig {
            views: 2,
            steps: 3,
            knn_k: 2,
            ..toy_config(Aggregator::Ssm)
        };
        let s = sample(&cfg, 2, &mut rng);
        let view = Model::new(
            ModelConfig {
                scan_mode: ScanMode::ViewPrioritized,
                ..cfg.clone()
            },
            9,
        )
        .unwrap();
        let time = Model::new(
            ModelConfig {
                scan_mode: ScanMode::TimePrioritized,
                ..cfg
            },
            9,
        )
        .unwrap();
        assert!(view.logits(&s).unwrap().max_abs_diff(&time.logits(&s).unwrap()) > 1e-9);
    }

    #[test]
    fn end_to_end_gradients() {
        let cfg = toy_config(Aggregator::Mvgmn);
        let model = Model::new(cfg.clone(), 11).unwrap();
        let mut rng = seeded(12);
        let s = sample(&cfg, 2, &mut rng);
        let report = check_gradients(
            |tape, vars| {
                let p = Bound::from_vars(vars.to_vec());
                let logits = model.forward(tape, &p, &s)?;
                tape.cross_entropy(logits, 1)
            },
            model.store().values(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-4, "{report:?}");

        let (loss, grads) = model.loss_and_grads(&s, 1).unwrap();
        assert!(loss.is_finite());
        assert_eq!(grads.len(), model.store().len());
    }
}
