//! Learnable weights, generic over the leaf type so one structure serves for
//! stored tensors, graph variables and shape skeletons.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelConfig, SpatialMode};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

// Generates `try_map`, `for_each` and `for_each_mut` for a parameter struct.
// Field kinds: `leaf` (P), `opt_leaf` (Option<P>), `node`, `opt_node`, `vec_node`.
macro_rules! param_tree {
    ($name:ident { $($kind:ident $field:ident),* $(,)? }) => {
        impl<P> $name<P> {
            pub fn try_map<Q, E>(
                &self,
                path: &str,
                f: &mut dyn FnMut(&str, &P) -> Result<Q, E>,
            ) -> Result<$name<Q>, E> {
                Ok($name {
                    $($field: param_tree!(@map $kind, &self.$field, &join(path, stringify!($field)), f)?,)*
                })
            }

            pub fn for_each(&self, path: &str, f: &mut dyn FnMut(&str, &P)) {
                $(param_tree!(@each $kind, &self.$field, &join(path, stringify!($field)), f);)*
            }

            pub fn for_each_mut(&mut self, path: &str, f: &mut dyn FnMut(&str, &mut P)) {
                $(param_tree!(@each_mut $kind, &mut self.$field, &join(path, stringify!($field)), f);)*
            }
        }
    };

    (@map leaf, $x:expr, $p:expr, $f:ident) => { $f($p, $x) };
    (@map opt_leaf, $x:expr, $p:expr, $f:ident) => { $x.as_ref().map(|v| $f($p, v)).transpose() };
    (@map node, $x:expr, $p:expr, $f:ident) => { $x.try_map($p, $f) };
    (@map opt_node, $x:expr, $p:expr, $f:ident) => { $x.as_ref().map(|v| v.try_map($p, $f)).transpose() };
    (@map vec_node, $x:expr, $p:expr, $f:ident) => {
        $x.iter()
            .enumerate()
            .map(|(i, v)| v.try_map(&join($p, &i.to_string()), $f))
            .collect::<Result<Vec<_>, E>>()
    };

    (@each leaf, $x:expr, $p:expr, $f:ident) => { $f($p, $x) };
    (@each opt_leaf, $x:expr, $p:expr, $f:ident) => { if let Some(v) = $x { $f($p, v) } };
    (@each node, $x:expr, $p:expr, $f:ident) => { $x.for_each($p, $f) };
    (@each opt_node, $x:expr, $p:expr, $f:ident) => { if let Some(v) = $x { v.for_each($p, $f) } };
    (@each vec_node, $x:expr, $p:expr, $f:ident) => {
        for (i, v) in $x.iter().enumerate() {
            v.for_each(&join($p, &i.to_string()), $f);
        }
    };

    (@each_mut leaf, $x:expr, $p:expr, $f:ident) => { $f($p, $x) };
    (@each_mut opt_leaf, $x:expr, $p:expr, $f:ident) => { if let Some(v) = $x { $f($p, v) } };
    (@each_mut node, $x:expr, $p:expr, $f:ident) => { $x.for_each_mut($p, $f) };
    (@each_mut opt_node, $x:expr, $p:expr, $f:ident) => { if let Some(v) = $x { v.for_each_mut($p, $f) } };
    (@each_mut vec_node, $x:expr, $p:expr, $f:ident) => {
        for (i, v) in $x.iter_mut().enumerate() {
            v.for_each_mut(&join($p, &i.to_string()), $f);
        }
    };
}

/// Shared per-row affine map `x W + b`; `weight` is `[in, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<P> {
    pub weight: P,
    pub bias: P,
}
param_tree!(Linear { leaf weight, leaf bias });

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionHead<P> {
    /// `[d_G, d_A]`
    pub w_q: P,
    /// `[d_G, d_A]`
    pub w_k: P,
    /// `[d_G, d_G]`
    pub w_v: P,
}
param_tree!(AttentionHead { leaf w_q, leaf w_k, leaf w_v });

/// `ReLU(ReLU(x W0) W1) W2`, no biases.
#[derive(Clone, Debug, PartialEq)]
pub struct Ffn<P> {
    pub w0: P,
    pub w1: P,
    pub w2: P,
}
param_tree!(Ffn { leaf w0, leaf w1, leaf w2 });

/// One attention, residual, feed-forward, residual unit.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<P> {
    pub heads: Vec<AttentionHead<P>>,
    /// `[n_heads * d_G, d_G]`; absent for a single head.
    pub head_merge: Option<P>,
    pub ffn: Ffn<P>,
}

param_tree!(AttentionLayer { vec_node heads, opt_leaf head_merge, node ffn });

#[derive(Clone, Debug, PartialEq)]
pub struct Gate<P> {
    pub fs: Linear<P>,
    pub fg: Linear<P>,
}
param_tree!(Gate { node fs, node fg });

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialParams<P> {
    /// `[N, N]`, starts as the adjacency.
    pub d_spatial: Option<P>,
    /// `[M, M]`, starts as the identity.
    pub d_temporal: Option<P>,
    pub embed_proj: Linear<P>,
    /// `[K+1, d_G, d_G]`
    pub theta: P,
    /// Empty when the dynamical branch is disabled.
    pub layers: Vec<AttentionLayer<P>>,
    pub gate: Option<Gate<P>>,
}
param_tree!(SpatialParams {
    opt_leaf d_spatial,
    opt_leaf d_temporal,
    node embed_proj,
    leaf theta,
    vec_node layers,
    opt_node gate,
});

#[derive(Clone, Debug, PartialEq)]
pub struct TemporalParams<P> {
    pub d_temporal: Option<P>,
    pub embed_proj: Linear<P>,
    pub layers: Vec<AttentionLayer<P>>,
}
param_tree!(TemporalParams { opt_leaf d_temporal, node embed_proj, vec_node layers });

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<P> {
    pub spatial: SpatialParams<P>,
    pub temporal: TemporalParams<P>,
}
param_tree!(BlockParams { node spatial, node temporal });

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<P> {
    pub hidden: Linear<P>,
    pub out: Linear<P>,
}
param_tree!(HeadParams { node hidden, node out });

/// Every learnable weight of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<P = Tensor> {
    pub input_lift: Linear<P>,
    pub blocks: Vec<BlockParams<P>>,
    pub head: HeadParams<P>,
}
param_tree!(ModelParams { node input_lift, vec_node blocks, node head });

impl<P> ModelParams<P> {
    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each("", &mut |name, _| out.push(name.to_string()));
        out
    }

    /// Same structure with leaves taken from `leaves` in traversal order.
    pub fn with_leaves<Q: Clone>(&self, leaves: &[Q]) -> Result<ModelParams<Q>> {
        let mut it = leaves.iter();
        let out = self.try_map("", &mut |name, _| {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Contract(format!("no leaf supplied for {name}")))
        })?;
        if it.next().is_some() {
            return Err(Error::Contract("more leaves than parameters".into()));
        }
        Ok(out)
    }

    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each("", &mut |_, _| n += 1);
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn map<Q>(&self, mut f: impl FnMut(&str, &P) -> Q) -> ModelParams<Q> {
        self.try_map::<Q, std::convert::Infallible>("", &mut |n, p| Ok(f(n, p)))
            .unwrap_or_else(|e| match e {})
    }
}

impl ModelParams<Vec<usize>> {
    /// Shape skeleton for a configuration on an `n_nodes` graph.
    pub fn shapes(cfg: &ModelConfig, n_nodes: usize) -> ModelParams<Vec<usize>> {
        let d = cfg.d_g;
        let m = cfg.window;
        let linear = |i: usize, o: usize| Linear {
            weight: vec![i, o],
            bias: vec![o],
        };
        let layer = |heads: usize| AttentionLayer {
            heads: (0..heads)
                .map(|_| AttentionHead {
                    w_q: vec![d, d / heads],
                    w_k: vec![d, d / heads],
                    w_v: vec![d, d],
                })
                .collect(),
            head_merge: (heads > 1).then(|| vec![heads * d, d]),
            ffn: Ffn {
                w0: vec![d, cfg.d_ff()],
                w1: vec![cfg.d_ff(), cfg.d_ff()],
                w2: vec![cfg.d_ff(), d],
            },
        };
        let dynamic = cfg.spatial_mode == SpatialMode::Full;
        let spatial_in = d
            + if cfg.spatial_embedding { n_nodes } else { 0 }
            + if cfg.temporal_embedding { m } else { 0 };
        let temporal_in = d + if cfg.temporal_embedding { m } else { 0 };
        let blocks = (0..cfg.n_blocks)
            .map(|_| BlockParams {
                spatial: SpatialParams {
                    d_spatial: cfg.spatial_embedding.then(|| vec![n_nodes, n_nodes]),
                    d_temporal: cfg.temporal_embedding.then(|| vec![m, m]),
                    embed_proj: linear(spatial_in, d),
                    theta: vec![cfg.cheb_order + 1, d, d],
                    layers: if dynamic {
                        (0..cfg.layers_spatial).map(|_| layer(cfg.heads_spatial)).collect()
                    } else {
                        Vec::new()
                    },
                    gate: dynamic.then(|| Gate {
                        fs: linear(d, 1),
                        fg: linear(d, 1),
                    }),
                },
                temporal: TemporalParams {
                    d_temporal: cfg.temporal_embedding.then(|| vec![m, m]),
                    embed_proj: linear(temporal_in, d),
                    layers: (0..cfg.layers_temporal).map(|_| layer(cfg.heads_temporal)).collect(),
                },
            })
            .collect();
        ModelParams {
            input_lift: linear(1, d),
            blocks,
            head: HeadParams {
                hidden: linear(d, cfg.c_p()),
                out: linear(cfg.c_p(), cfg.horizon),
            },
        }
    }
}

impl ModelParams<Tensor> {
    /// Seeded initialisation: weights uniform in `±sqrt(1/fan_in)`, biases
    /// zero, spatial dictionaries set to `adjacency`, temporal ones to `I_M`.
    pub fn init(cfg: &ModelConfig, adjacency: &Tensor, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let n = adjacency.shape()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::shapes(cfg, n).try_map("", &mut |name, shape| {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            Ok(match leaf {
                "bias" => Tensor::zeros(shape),
                "d_spatial" => adjacency.clone(),
                "d_temporal" => Tensor::eye(shape[0]),
                _ => {
                    let fan_in = shape.iter().product::<usize>() / shape[shape.len() - 1];
                    let bound = (1.0 / fan_in as f64).sqrt();
                    let data = (0..shape.iter().product::<usize>())
                        .map(|_| rng.random_range(-bound..=bound))
                        .collect();
                    Tensor::new(shape, data)?
                }
            })
        })
    }

    pub fn num_scalars(&self) -> usize {
        let mut total = 0;
        self.for_each("", &mut |_, t| total += t.len());
        total
    }

    /// Checks every tensor against the skeleton for `cfg` on `n_nodes` nodes.
    pub fn check_shapes(&self, cfg: &ModelConfig, n_nodes: usize) -> Result<()> {
        let expected = ModelParams::shapes(cfg, n_nodes).named_owned();
        let actual = self.map(|_, t| t.shape().to_vec()).named_owned();
        if expected.len() != actual.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                actual.len()
            )));
        }
        for ((name, want), (got_name, got)) in expected.iter().zip(&actual) {
            if name != got_name || want != got {
                return Err(Error::Config(format!(
                    "parameter {got_name} has shape {got:?}, expected {name} with shape {want:?}"
                )));
            }
        }
        Ok(())
    }
}

impl<P: Clone> ModelParams<P> {
    pub fn named_owned(&self) -> Vec<(String, P)> {
        let mut out = Vec::new();
        self.for_each("", &mut |name, p| out.push((name.to_string(), p.clone())));
        out
    }
}
