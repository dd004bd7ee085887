//! The joint map-entity encoder: per-feature embeddings compressed by an MLP,
//! parcel-over-segment shape attention with a distance/direction bias, and a
//! stack of heterogeneous graph transformer layers.
//!
//! Weights use the row-vector convention: a layer maps `x` (1 x in) to
//! `x W` with `W` of shape in x out.

mod embedding;
mod inputs;

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{EdgeIndex, Mat, Tape, Var};
use crate::error::{Error, Result};
use crate::graph::Relation;
use crate::model::EntityType;

pub use embedding::EmbeddingTable;
pub use inputs::{angle_bucket, quantile_cuts, EntityInputs, FeatureColumn, GraphInputs, GraphView};

/// Trainable parameters keyed by canonical name.
pub type Params = BTreeMap<String, Mat>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Width of each per-feature embedding.
    pub feature_dim: usize,
    pub n_dist_buckets: usize,
    pub n_angle_buckets: usize,
    pub dist_emb_dim: usize,
    pub angle_emb_dim: usize,
    /// Embed raw features; when false every entity gets a free learned vector.
    pub raw_features: bool,
    pub shape_attention: bool,
    /// Distance and direction bias inside shape attention.
    pub geo_bias: bool,
    /// Let graph attention pass messages along segment-parcel edges.
    pub cross_entity: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            layers: 2,
            heads: 8,
            dropout: 0.2,
            feature_dim: 16,
            n_dist_buckets: 20,
            n_angle_buckets: 36,
            dist_emb_dim: 16,
            angle_emb_dim: 16,
            raw_features: true,
            shape_attention: true,
            geo_bias: true,
            cross_entity: true,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("dim", self.dim),
            ("heads", self.heads),
            ("feature_dim", self.feature_dim),
            ("n_dist_buckets", self.n_dist_buckets),
            ("n_angle_buckets", self.n_angle_buckets),
            ("dist_emb_dim", self.dist_emb_dim),
            ("angle_emb_dim", self.angle_emb_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("encoder.{name} must be at least 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("encoder.dropout must be in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Weight,
    Bias,
    Table,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: (usize, usize),
    pub kind: ParamKind,
}

fn spec(name: String, shape: (usize, usize), kind: ParamKind) -> ParamSpec {
    ParamSpec { name, shape, kind }
}

fn input_width(config: &EncoderConfig, inputs: &EntityInputs) -> usize {
    if config.raw_features {
        inputs.columns.len() * config.feature_dim
    } else {
        config.dim
    }
}

/// Every encoder parameter for `config` on a graph, in canonical order.
pub fn param_specs(config: &EncoderConfig, inputs: &GraphInputs) -> Vec<ParamSpec> {
    use ParamKind::*;
    let d = config.dim;
    let mut out = Vec::new();
    for e in [&inputs.segments, &inputs.parcels] {
        let t = e.entity.as_str();
        if config.raw_features {
            for (name, col) in e.names.iter().zip(&e.columns) {
                let rows = match col {
                    FeatureColumn::Categorical { cardinality, .. } => *cardinality,
                    FeatureColumn::Continuous { .. } => 1,
                };
                out.push(spec(format!("jfe.{t}.emb.{name}"), (rows, config.feature_dim), Table));
            }
            let w = input_width(config, e);
            out.push(spec(format!("jfe.{t}.mlp.w1"), (w, d), Weight));
            out.push(spec(format!("jfe.{t}.mlp.b1"), (1, d), Bias));
            out.push(spec(format!("jfe.{t}.mlp.w2"), (d, d), Weight));
            out.push(spec(format!("jfe.{t}.mlp.b2"), (1, d), Bias));
        } else {
            out.push(spec(format!("jfe.{t}.free"), (e.n, d), Table));
        }
    }
    if config.shape_attention {
        for w in ["w_a1", "w_a2", "w_a3"] {
            out.push(spec(format!("psa.{w}"), (d, d), Weight));
        }
        if config.geo_bias {
            out.push(spec("psa.dist_emb".into(), (config.n_dist_buckets, config.dist_emb_dim), Table));
            out.push(spec("psa.angle_emb".into(), (config.n_angle_buckets, config.angle_emb_dim), Table));
            out.push(spec("psa.w_l".into(), (config.dist_emb_dim, 1), Weight));
            out.push(spec("psa.w_d".into(), (config.angle_emb_dim, 1), Weight));
        }
    }
    for l in 0..config.layers {
        for t in ["segment", "parcel"] {
            out.push(spec(format!("hgt.{l}.node.{t}"), (d, d), Weight));
        }
        for r in Relation::ALL {
            out.push(spec(format!("hgt.{l}.edge.{}", r.name()), (d, d), Weight));
        }
        for h in 0..config.heads {
            for m in ["q", "k", "v"] {
                out.push(spec(format!("hgt.{l}.head.{h}.{m}"), (d, d), Weight));
            }
        }
    }
    out
}

/// Uniform in `±1/sqrt(fan_in)` for weights (fan-in = rows), `±1/sqrt(width)`
/// for lookup tables, zeros for biases.
pub fn init_from_specs(specs: &[ParamSpec], rng: &mut ChaCha8Rng) -> Params {
    specs
        .iter()
        .map(|s| {
            let (r, c) = s.shape;
            let bound = match s.kind {
                ParamKind::Bias => 0.0,
                ParamKind::Weight => 1.0 / (r.max(1) as f64).sqrt(),
                ParamKind::Table => 1.0 / (c.max(1) as f64).sqrt(),
            };
            let m = if bound == 0.0 {
                Mat::zeros((r, c))
            } else {
                Mat::from_shape_fn((r, c), |_| rng.gen_range(-bound..bound))
            };
            (s.name.clone(), m)
        })
        .collect()
}

pub fn init_params(config: &EncoderConfig, inputs: &GraphInputs, rng: &mut ChaCha8Rng) -> Params {
    init_from_specs(&param_specs(config, inputs), rng)
}

/// Checks that `params` has exactly the names and shapes `specs` requires.
pub fn check_params(specs: &[ParamSpec], params: &Params) -> Result<()> {
    for s in specs {
        match params.get(&s.name) {
            None => return Err(Error::Validation(format!("missing parameter `{}`", s.name))),
            Some(m) if m.dim() != s.shape => {
                return Err(Error::Validation(format!(
                    "parameter `{}` has shape {:?}, expected {:?}",
                    s.name,
                    m.dim(),
                    s.shape
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = params.keys().find(|k| !specs.iter().any(|s| &s.name == *k)) {
        return Err(Error::Validation(format!("unexpected parameter `{extra}`")));
    }
    Ok(())
}

/// Inverted dropout driven by its own rng; inactive when the rng is absent or p = 0.
pub struct Dropout {
    p: f64,
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { p: 0.0, rng: None }
    }

    pub fn new(p: f64, rng: ChaCha8Rng) -> Self {
        Self { p, rng: Some(rng) }
    }

    pub fn apply(&mut self, tape: &mut Tape, v: Var) -> Var {
        let Some(rng) = self.rng.as_mut().filter(|_| self.p > 0.0) else { return v };
        let keep = 1.0 / (1.0 - self.p);
        let p = self.p;
        let mask = Mat::from_shape_fn(tape.value(v).dim(), |_| if rng.gen::<f64>() < p { 0.0 } else { keep });
        tape.mul_const(v, mask)
    }
}

/// Tape handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// Concatenated per-feature embeddings (after masking) that feed the MLP.
    pub input_s: Var,
    pub input_r: Var,
    /// Compressed raw-feature embeddings.
    pub xt_s: Var,
    pub xt_r: Var,
    /// Parcel vectors after shape attention.
    pub x_r: Var,
    pub h_s: Var,
    pub h_r: Var,
    /// Shape-attention weights, one per assigned pair in `GraphInputs` order.
    pub psa_attention: Option<Var>,
    /// Graph-attention weights per layer and head, over incoming edges grouped by target.
    pub hgt_attention: Vec<Var>,
}

/// Typed incoming-edge lists for graph attention; every group shares one
/// relation projection and one neighbor entity type.
struct EdgeGroup {
    relation: Relation,
    neighbor: EntityType,
    targets: Vec<usize>,
    neighbors: Rc<Vec<usize>>,
    weights: Rc<Vec<f64>>,
}

pub struct Encoder<'a> {
    pub config: &'a EncoderConfig,
    pub params: &'a Params,
    pub inputs: &'a GraphInputs,
}

impl<'a> Encoder<'a> {
    pub fn new(config: &'a EncoderConfig, params: &'a Params, inputs: &'a GraphInputs) -> Result<Self> {
        config.validate()?;
        if config.raw_features {
            for e in [&inputs.segments, &inputs.parcels] {
                if e.columns.is_empty() {
                    return Err(Error::Config(format!(
                        "{} entities have no raw features; disable encoder.raw_features",
                        e.entity.as_str()
                    )));
                }
            }
        }
        check_params(&param_specs(config, inputs), params)?;
        Ok(Self { config, params, inputs })
    }

    fn p(&self, tape: &mut Tape, name: &str) -> Var {
        tape.param(name, &self.params[name])
    }

    /// Concatenated per-feature embeddings, with masked dimensions zeroed.
    pub fn embed_inputs(&self, tape: &mut Tape, feats: &EntityInputs, mask: Option<&Vec<f64>>) -> Var {
        let t = feats.entity.as_str();
        let x = if self.config.raw_features {
            let parts: Vec<Var> = feats
                .names
                .iter()
                .zip(&feats.columns)
                .map(|(name, col)| {
                    let table = self.p(tape, &format!("jfe.{t}.emb.{name}"));
                    match col {
                        FeatureColumn::Categorical { codes, .. } => tape.gather(table, codes.clone()),
                        FeatureColumn::Continuous { values } => {
                            let v = tape.constant(values.clone());
                            tape.matmul(v, table)
                        }
                    }
                })
                .collect();
            tape.concat_cols(&parts)
        } else {
            self.p(tape, &format!("jfe.{t}.free"))
        };
        match mask {
            Some(m) => tape.scale_cols(x, Rc::new(m.clone())),
            None => x,
        }
    }

    /// Two-layer MLP compressing the embedding input to width `dim`.
    pub fn compress(&self, tape: &mut Tape, entity: EntityType, x: Var, drop: &mut Dropout) -> Var {
        if !self.config.raw_features {
            return x;
        }
        let t = entity.as_str();
        let [w1, b1, w2, b2] = ["w1", "b1", "w2", "b2"].map(|n| self.p(tape, &format!("jfe.{t}.mlp.{n}")));
        let z = tape.matmul(x, w1);
        let z = tape.add_row(z, b1);
        let hidden = tape.elu(z);
        let hidden = drop.apply(tape, hidden);
        let out = tape.matmul(hidden, w2);
        tape.add_row(out, b2)
    }

    /// Parcel vectors enhanced by attention over their assigned segments.
    /// Returns the attention weights alongside when the module is enabled.
    pub fn shape_attention(&self, tape: &mut Tape, xt_s: Var, xt_r: Var, drop: &mut Dropout) -> (Var, Option<Var>) {
        if !self.config.shape_attention || self.inputs.sr_parcel.is_empty() {
            return (xt_r, None);
        }
        let inp = self.inputs;
        let n_r = inp.n_parcels();
        let [w1, w2, w3] = ["w_a1", "w_a2", "w_a3"].map(|n| self.p(tape, &format!("psa.{n}")));
        let q = tape.matmul(xt_r, w1);
        let q = tape.gather(q, inp.sr_parcel.clone());
        let k = tape.gather(xt_s, inp.sr_segment.clone());
        let mut score = tape.row_dot(q, k);
        if self.config.geo_bias {
            let [de, ae, wl, wd] = ["dist_emb", "angle_emb", "w_l", "w_d"].map(|n| self.p(tape, &format!("psa.{n}")));
            let l = tape.gather(de, inp.dist_bucket.clone());
            let l = tape.matmul(l, wl);
            let d = tape.gather(ae, inp.angle_bucket.clone());
            let d = tape.matmul(d, wd);
            score = tape.add(score, l);
            score = tape.add(score, d);
        }
        let score = tape.scale(score, 1.0 / (self.config.dim as f64).sqrt());
        let att = tape.segment_softmax(score, inp.sr_parcel.clone(), n_r);
        let att_used = drop.apply(tape, att);
        let v = tape.matmul(xt_s, w2);
        let v = tape.gather(v, inp.sr_segment.clone());
        let msg = tape.mul_col(v, att_used);
        let a = tape.scatter_add(msg, inp.sr_parcel.clone(), n_r);
        let a = tape.matmul(a, w3);
        (tape.add(a, xt_r), Some(att))
    }

    fn edge_groups(&self, view: &GraphView) -> Vec<EdgeGroup> {
        let n_s = self.inputs.n_segments();
        let mut groups = Vec::new();
        for r in Relation::SEGMENT_VIEWS.into_iter().chain(Relation::PARCEL_VIEWS) {
            let edges = view.edges(r);
            if edges.is_empty() {
                continue;
            }
            let entity = r.entity().unwrap();
            let offset = if entity == EntityType::Segment { 0 } else { n_s };
            groups.push(EdgeGroup {
                relation: r,
                neighbor: entity,
                targets: edges.iter().map(|e| e.src + offset).collect(),
                neighbors: Rc::new(edges.iter().map(|e| e.dst).collect()),
                weights: Rc::new(edges.iter().map(|e| e.weight).collect()),
            });
        }
        let sr = view.edges(Relation::SR);
        if self.config.cross_entity && !sr.is_empty() {
            groups.push(EdgeGroup {
                relation: Relation::SR,
                neighbor: EntityType::Parcel,
                targets: sr.iter().map(|e| e.src).collect(),
                neighbors: Rc::new(sr.iter().map(|e| e.dst).collect()),
                weights: Rc::new(sr.iter().map(|e| e.weight).collect()),
            });
            groups.push(EdgeGroup {
                relation: Relation::SR,
                neighbor: EntityType::Segment,
                targets: sr.iter().map(|e| e.dst + n_s).collect(),
                neighbors: Rc::new(sr.iter().map(|e| e.src).collect()),
                weights: Rc::new(sr.iter().map(|e| e.weight).collect()),
            });
        }
        groups
    }

    /// One graph-attention layer over all entities. An edge `(i, j, w)` carries
    /// the `w`-scaled message of `j` into `i`; attention normalizes jointly over
    /// every incoming edge of every relation, and head outputs are averaged.
    pub fn hgt_layer(&self, tape: &mut Tape, layer: usize, x_s: Var, x_r: Var, view: &GraphView, drop: &mut Dropout) -> (Var, Var) {
        let groups = self.edge_groups(view);
        self.hgt_layer_with(tape, layer, x_s, x_r, &groups, drop, &mut Vec::new())
    }

    fn hgt_layer_with(
        &self,
        tape: &mut Tape,
        layer: usize,
        x_s: Var,
        x_r: Var,
        groups: &[EdgeGroup],
        drop: &mut Dropout,
        attention: &mut Vec<Var>,
    ) -> (Var, Var) {
        let n_s = self.inputs.n_segments();
        let n = n_s + self.inputs.n_parcels();
        let ws = self.p(tape, &format!("hgt.{layer}.node.segment"));
        let wr = self.p(tape, &format!("hgt.{layer}.node.parcel"));
        let f_s = tape.matmul(x_s, ws);
        let f_r = tape.matmul(x_r, wr);
        let f = tape.concat_rows(&[f_s, f_r]);
        if groups.is_empty() {
            return (f_s, f_r);
        }
        let transformed: Vec<Var> = groups
            .iter()
            .map(|g| {
                let w = self.p(tape, &format!("hgt.{layer}.edge.{}", g.relation.name()));
                let src = if g.neighbor == EntityType::Segment { f_s } else { f_r };
                tape.matmul(src, w)
            })
            .collect();
        let stacked = tape.concat_rows(&transformed);
        let mut edges = EdgeIndex::default();
        let mut offset = 0;
        for (g, &t) in groups.iter().zip(&transformed) {
            edges.targets.extend(g.targets.iter().copied());
            edges.neighbors.extend(g.neighbors.iter().map(|&j| j + offset));
            edges.coef.extend(g.weights.iter().copied());
            offset += tape.value(t).nrows();
        }
        let targets = Rc::new(edges.targets.clone());
        let edges = Rc::new(edges);
        let inv_sqrt_d = 1.0 / (self.config.dim as f64).sqrt();
        let mut total: Option<Var> = None;
        for h in 0..self.config.heads {
            let [wq, wk, wv] = ["q", "k", "v"].map(|m| self.p(tape, &format!("hgt.{layer}.head.{h}.{m}")));
            // q.(t W_k) = (q W_k^T).t, and sum_j a_j (t_j W_v) = (sum_j a_j t_j) W_v.
            let q = tape.matmul(f, wq);
            let wk_t = tape.transpose(wk);
            let qk = tape.matmul(q, wk_t);
            let score = tape.edge_dot(qk, stacked, edges.clone(), inv_sqrt_d);
            let att = tape.segment_softmax(score, targets.clone(), n);
            attention.push(att);
            let att = drop.apply(tape, att);
            let agg = tape.edge_aggregate(att, stacked, edges.clone(), n);
            let agg = tape.matmul(agg, wv);
            total = Some(match total {
                None => agg,
                Some(acc) => tape.add(acc, agg),
            });
        }
        let mean = tape.scale(total.unwrap(), 1.0 / self.config.heads as f64);
        let h = tape.add(mean, f);
        (tape.slice_rows(h, 0, n_s), tape.slice_rows(h, n_s, n))
    }

    /// Full forward pass over one view of the graph.
    pub fn forward(&self, tape: &mut Tape, view: &GraphView, drop: &mut Dropout) -> Encoded {
        let input_s = self.embed_inputs(tape, &self.inputs.segments, view.mask(EntityType::Segment));
        let input_r = self.embed_inputs(tape, &self.inputs.parcels, view.mask(EntityType::Parcel));
        let xt_s = self.compress(tape, EntityType::Segment, input_s, drop);
        let xt_r = self.compress(tape, EntityType::Parcel, input_r, drop);
        let (x_r, psa_attention) = self.shape_attention(tape, xt_s, xt_r, drop);
        let mut hgt_attention = Vec::new();
        let (h_s, h_r) = self.graph_layers_traced(tape, xt_s, x_r, view, drop, &mut hgt_attention);
        Encoded { input_s, input_r, xt_s, xt_r, x_r, h_s, h_r, psa_attention, hgt_attention }
    }

    /// Runs the graph-attention stack from joint feature encodings.
    pub fn graph_layers(&self, tape: &mut Tape, x_s: Var, x_r: Var, view: &GraphView, drop: &mut Dropout) -> (Var, Var) {
        self.graph_layers_traced(tape, x_s, x_r, view, drop, &mut Vec::new())
    }

    fn graph_layers_traced(
        &self,
        tape: &mut Tape,
        x_s: Var,
        x_r: Var,
        view: &GraphView,
        drop: &mut Dropout,
        attention: &mut Vec<Var>,
    ) -> (Var, Var) {
        let groups = self.edge_groups(view);
        let (mut h_s, mut h_r) = (x_s, x_r);
        for l in 0..self.config.layers {
            (h_s, h_r) = self.hgt_layer_with(tape, l, h_s, h_r, &groups, drop, attention);
        }
        (h_s, h_r)
    }

    /// Target node (segments first, then parcels) of every attention entry in `Encoded::hgt_attention`.
    pub fn attention_targets(&self, view: &GraphView) -> Vec<usize> {
        self.edge_groups(view).iter().flat_map(|g| g.targets.iter().copied()).collect()
    }

    /// Evaluation-mode embeddings for the un-augmented graph.
    pub fn encode(&self, view: &GraphView) -> EmbeddingTable {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, view, &mut Dropout::off());
        EmbeddingTable { segments: tape.value(out.h_s).clone(), parcels: tape.value(out.h_r).clone() }
    }
}

#[cfg(test)]
mod tests;
