//! The spatial-temporal transformer network.
//!
//! Activations inside the network are `[M, N, d_G]`: time, node, channel.

pub mod layers;
pub mod oracle;
pub mod params;

use std::fmt;
use std::str::FromStr;

pub use layers::{
    attention_layer, gated_fusion, linear, position_wise_ffn, self_attention,
    spatial_temporal_embed,
};
pub use oracle::message_passing_oracle;
pub use params::{
    AttentionHead, AttentionLayer, BlockParams, Ffn, Gate, HeadParams, Linear, ModelParams,
    SpatialParams, TemporalParams,
};

use crate::autodiff::{kink_aware_check, GradCheckReport, Graph, Mask, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{chebyshev_graph_conv, TrafficGraph};

/// Gap between forecast and target used by [`Sttn::gradient_check`].
pub const GRADCHECK_OFFSET: f64 = 0.01;
/// Finite-difference step that balances truncation, ReLU kinks and roundoff.
pub const GRADCHECK_STEP: f64 = 1e-5;

/// Which spatial branches are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialMode {
    /// Chebyshev branch, attention branch and the gate between them.
    Full,
    /// Chebyshev branch only.
    FixedOnly,
}

impl FromStr for SpatialMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(SpatialMode::Full),
            "fixed_only" => Ok(SpatialMode::FixedOnly),
            _ => Err(Error::Config(format!(
                "spatial_mode must be `full` or `fixed_only`, got `{s}`"
            ))),
        }
    }
}

impl fmt::Display for SpatialMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpatialMode::Full => "full",
            SpatialMode::FixedOnly => "fixed_only",
        })
    }
}

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Input window length M.
    pub window: usize,
    /// Number of predicted steps T.
    pub horizon: usize,
    pub d_g: usize,
    pub n_blocks: usize,
    pub heads_spatial: usize,
    pub heads_temporal: usize,
    pub layers_spatial: usize,
    pub layers_temporal: usize,
    pub cheb_order: usize,
    pub spatial_embedding: bool,
    pub temporal_embedding: bool,
    pub spatial_mode: SpatialMode,
    /// Restrict spatial attention to each node and its `k` strongest neighbours.
    pub local_mask: Option<usize>,
    /// Feed the sum of every block's last step to the head instead of only the last block's.
    pub skip_connections: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 12,
            horizon: 9,
            d_g: 64,
            n_blocks: 1,
            heads_spatial: 1,
            heads_temporal: 1,
            layers_spatial: 2,
            layers_temporal: 2,
            cheb_order: 3,
            spatial_embedding: true,
            temporal_embedding: true,
            spatial_mode: SpatialMode::Full,
            local_mask: None,
            skip_connections: false,
        }
    }
}

impl ModelConfig {
    pub fn d_ff(&self) -> usize {
        2 * self.d_g
    }

    pub fn c_p(&self) -> usize {
        4 * self.d_g
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("window", self.window),
            ("horizon", self.horizon),
            ("d_g", self.d_g),
            ("n_blocks", self.n_blocks),
            ("heads_spatial", self.heads_spatial),
            ("heads_temporal", self.heads_temporal),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (name, heads) in [("heads_spatial", self.heads_spatial), ("heads_temporal", self.heads_temporal)] {
            if !self.d_g.is_multiple_of(heads) {
                return Err(Error::Config(format!(
                    "d_g = {} is not divisible by {name} = {heads}",
                    self.d_g
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transformer {
    Spatial,
    Temporal,
}

impl fmt::Display for Transformer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Transformer::Spatial => "spatial",
            Transformer::Temporal => "temporal",
        })
    }
}

/// Attention weights of one head in one layer.
///
/// `weights` is `[M, N, N]` for spatial attention (one matrix per time step)
/// and `[N, M, M]` for temporal attention (one matrix per node).
#[derive(Clone, Debug)]
pub struct AttentionRecord {
    pub block: usize,
    pub transformer: Transformer,
    pub layer: usize,
    pub head: usize,
    pub weights: Tensor,
}

/// Graph-dependent constants of one forward computation.
pub struct GraphInputs {
    pub basis: Vec<Var>,
    pub mask: Option<Mask>,
}

type Trace<'a> = Option<&'a mut Vec<AttentionRecord>>;

fn record(
    g: &Graph,
    trace: &mut Trace<'_>,
    block: usize,
    transformer: Transformer,
    layer: usize,
    weights: &[Var],
) {
    if let Some(out) = trace.as_deref_mut() {
        for (head, &w) in weights.iter().enumerate() {
            out.push(AttentionRecord {
                block,
                transformer,
                layer,
                head,
                weights: g.value(w).clone(),
            });
        }
    }
}

/// Embedding, fixed Chebyshev branch, attention branch and gated fusion.
pub fn spatial_transformer(
    g: &mut Graph,
    x: Var,
    inputs: &GraphInputs,
    p: &SpatialParams<Var>,
    block: usize,
    mut trace: Trace<'_>,
) -> Result<Var> {
    let embedded = spatial_temporal_embed(g, x, p.d_spatial, p.d_temporal, &p.embed_proj)?;
    let fixed = chebyshev_graph_conv(g, embedded, &inputs.basis, p.theta)?;
    let Some(gate) = &p.gate else {
        return Ok(fixed);
    };
    let mut z = embedded;
    for (l, layer) in p.layers.iter().enumerate() {
        let (out, weights) = attention_layer(g, z, layer, inputs.mask.as_ref())?;
        record(g, &mut trace, block, Transformer::Spatial, l, &weights);
        z = out;
    }
    gated_fusion(g, z, fixed, gate)
}

/// Temporal embedding, then per-node bidirectional attention layers.
pub fn temporal_transformer(
    g: &mut Graph,
    x: Var,
    p: &TemporalParams<Var>,
    block: usize,
    mut trace: Trace<'_>,
) -> Result<Var> {
    let embedded = spatial_temporal_embed(g, x, None, p.d_temporal, &p.embed_proj)?;
    let mut z = g.permute(embedded, &[1, 0, 2])?;
    for (l, layer) in p.layers.iter().enumerate() {
        let (out, weights) = attention_layer(g, z, layer, None)?;
        record(g, &mut trace, block, Transformer::Temporal, l, &weights);
        z = out;
    }
    g.permute(z, &[1, 0, 2])
}

/// `X_T = X + S(X)`, output `T(X_T) + X_T`.
pub fn st_block(
    g: &mut Graph,
    x: Var,
    inputs: &GraphInputs,
    p: &BlockParams<Var>,
    block: usize,
    mut trace: Trace<'_>,
) -> Result<Var> {
    let ys = spatial_transformer(g, x, inputs, &p.spatial, block, trace.as_deref_mut())?;
    let xt = g.add(x, ys)?;
    let yt = temporal_transformer(g, xt, &p.temporal, block, trace)?;
    g.add(yt, xt)
}

/// Shared per-node `d_G -> c_p -> T` map with a ReLU in between.
pub fn prediction_head(g: &mut Graph, x_last: Var, p: &HeadParams<Var>) -> Result<Var> {
    let h = linear(g, x_last, &p.hidden)?;
    let h = g.relu(h)?;
    linear(g, h, &p.out)
}

fn last_step(g: &mut Graph, x: Var) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let last = g.slice(x, 0, s[0] - 1, 1)?;
    g.reshape(last, &s[1..])
}

/// Full network: `[M, N]` normalised window to `[N, T]` normalised forecast.
pub fn sttn_forward(
    g: &mut Graph,
    window: Var,
    inputs: &GraphInputs,
    params: &ModelParams<Var>,
    cfg: &ModelConfig,
    mut trace: Trace<'_>,
) -> Result<Var> {
    let ws = g.shape(window).to_vec();
    let n = inputs
        .basis
        .first()
        .map(|&b| g.shape(b)[0])
        .ok_or_else(|| Error::Config("empty Chebyshev basis".into()))?;
    if ws != [cfg.window, n] {
        return Err(Error::Config(format!(
            "window of shape {ws:?} does not match the model's M = {} and N = {n}",
            cfg.window
        )));
    }
    let x = g.reshape(window, &[cfg.window, n, 1])?;
    let mut x = linear(g, x, &params.input_lift)?;
    let mut skip: Option<Var> = None;
    for (b, block) in params.blocks.iter().enumerate() {
        x = st_block(g, x, inputs, block, b, trace.as_deref_mut())?;
        if cfg.skip_connections {
            let last = last_step(g, x)?;
            skip = Some(match skip {
                None => last,
                Some(s) => g.add(s, last)?,
            });
        }
    }
    let features = match skip {
        Some(s) => s,
        None => last_step(g, x)?,
    };
    prediction_head(g, features, &params.head)
}

/// Adds every tensor of `params` to `g`, as trainable leaves or constants.
pub fn bind_params(g: &mut Graph, params: &ModelParams, trainable: bool) -> ModelParams<Var> {
    params.map(|_, t| g.leaf(t.clone(), trainable))
}

/// A configured network on a fixed road graph.
#[derive(Clone, Debug)]
pub struct Sttn {
    config: ModelConfig,
    graph: TrafficGraph,
    mask: Option<Mask>,
}

impl Sttn {
    pub fn new(config: ModelConfig, graph: TrafficGraph) -> Result<Self> {
        config.validate()?;
        if graph.cheb_order() != config.cheb_order {
            return Err(Error::Config(format!(
                "graph was built with Chebyshev order {}, config asks for {}",
                graph.cheb_order(),
                config.cheb_order
            )));
        }
        let mask = config.local_mask.map(|k| graph.local_mask(k));
        Ok(Sttn {
            config,
            graph,
            mask,
        })
    }

    /// Replaces the spatial attention mask.
    pub fn with_mask(mut self, mask: Option<Mask>) -> Self {
        self.mask = mask;
        self
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &TrafficGraph {
        &self.graph
    }

    pub fn n_nodes(&self) -> usize {
        self.graph.n_nodes()
    }

    pub fn init_params(&self, seed: u64) -> Result<ModelParams> {
        ModelParams::init(&self.config, self.graph.adjacency(), seed)
    }

    pub fn graph_inputs(&self, g: &mut Graph) -> GraphInputs {
        GraphInputs {
            basis: self.graph.cheb_basis().iter().map(|t| g.constant(t.clone())).collect(),
            mask: self.mask.clone(),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        window: Var,
        params: &ModelParams<Var>,
        trace: Trace<'_>,
    ) -> Result<Var> {
        let inputs = self.graph_inputs(g);
        sttn_forward(g, window, &inputs, params, &self.config, trace)
    }

    /// Normalised `[N, T]` forecast for one normalised `[M, N]` window.
    pub fn predict(&self, params: &ModelParams, window: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = bind_params(&mut g, params, false);
        let w = g.constant(window.clone());
        let y = self.forward(&mut g, w, &p, None)?;
        Ok(g.value(y).clone())
    }

    /// Forecast plus every attention matrix computed on the way.
    pub fn predict_traced(
        &self,
        params: &ModelParams,
        window: &Tensor,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let mut g = Graph::new();
        let p = bind_params(&mut g, params, false);
        let w = g.constant(window.clone());
        let mut records = Vec::new();
        let y = self.forward(&mut g, w, &p, Some(&mut records))?;
        Ok((g.value(y).clone(), records))
    }

    /// Central-difference check of every parameter against reverse mode.
    ///
    /// The objective is the MAE against a target sitting `GRADCHECK_OFFSET`
    /// below the current forecast, so every residual keeps one sign and no
    /// gradient vanishes through the absolute value. Entries that straddle a
    /// ReLU kink are re-differenced with smaller steps.
    pub fn gradient_check(
        &self,
        params: &ModelParams,
        window: &Tensor,
        step: f64,
    ) -> Result<GradCheckReport> {
        let target = self.predict(params, window)?.map(|v| v - GRADCHECK_OFFSET);
        let named = params.named_owned();
        kink_aware_check(
            |g, vars| {
                let p = params.with_leaves(vars)?;
                let w = g.constant(window.clone());
                let y = self.forward(g, w, &p, None)?;
                let t = g.constant(target.clone());
                let d = g.sub(y, t)?;
                let a = g.abs(d)?;
                g.mean(a)
            },
            &named,
            step,
        )
    }
}
