//! Adaptive augmentation and the four pretraining objectives: intra-entity
//! contrast for segments and for parcels, segment-parcel discrimination, and
//! parcel-city discrimination.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape, Var};
use crate::encoder::{Dropout, Encoder, EntityInputs, GraphView, ParamKind, ParamSpec};
use crate::error::{Error, Result};
use crate::graph::{HomeGraph, Relation, WeightedEdgeList};
use crate::model::EntityType;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewProbs {
    pub p_e: f64,
    pub p_n: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationConfig {
    pub p_tau: f64,
    pub view1: ViewProbs,
    pub view2: ViewProbs,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self { p_tau: 0.7, view1: ViewProbs { p_e: 0.3, p_n: 0.4 }, view2: ViewProbs { p_e: 0.4, p_n: 0.3 } }
    }
}

impl AugmentationConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("p_tau", self.p_tau),
            ("view1.p_e", self.view1.p_e),
            ("view1.p_n", self.view1.p_n),
            ("view2.p_e", self.view2.p_e),
            ("view2.p_n", self.view2.p_n),
        ];
        for (name, p) in all {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augmentation.{name} must be in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub lambda_ss: f64,
    pub lambda_rr: f64,
    pub lambda_sr: f64,
    pub lambda_c: f64,
    pub tau: f64,
    /// Pass corrupted parcels through the graph layers as well as shape attention.
    pub fake_through_hgt: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_ss: 0.25, lambda_rr: 0.25, lambda_sr: 0.25, lambda_c: 0.25, tau: 0.4, fake_through_hgt: false }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, l) in [("lambda_ss", self.lambda_ss), ("lambda_rr", self.lambda_rr), ("lambda_sr", self.lambda_sr), ("lambda_c", self.lambda_c)]
        {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::Config(format!("loss.{name} must be a finite non-negative number, got {l}")));
            }
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("loss.tau must be positive, got {}", self.tau)));
        }
        Ok(())
    }

    pub fn lambdas(&self) -> [f64; 4] {
        [self.lambda_ss, self.lambda_rr, self.lambda_sr, self.lambda_c]
    }
}

/// Removal probability of an edge of normalized weight `w`.
pub fn edge_removal_prob(w: f64, p_e: f64, p_tau: f64) -> f64 {
    ((1.0 - w) * p_e).min(p_tau)
}

pub fn edge_removal_probs(edges: &WeightedEdgeList, p_e: f64, p_tau: f64) -> Vec<f64> {
    edges.edges.iter().map(|e| edge_removal_prob(e.weight, p_e, p_tau)).collect()
}

/// Degree-weighted magnitude per embedding-input dimension, min-max normalized.
/// All-equal scores normalize to ones.
pub fn feature_importance(x: &Mat, degree: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; x.ncols()];
    for (row, &d) in x.rows().into_iter().zip(degree) {
        for (ck, v) in c.iter_mut().zip(row) {
            *ck += v.abs() * d;
        }
    }
    let lo = c.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = c.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![1.0; c.len()];
    }
    c.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

pub fn feature_mask_probs(c: &[f64], p_n: f64, p_tau: f64) -> Vec<f64> {
    c.iter().map(|&ck| ((1.0 - ck) * p_n).min(p_tau)).collect()
}

/// Per-dimension importance for both entity types.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureImportance {
    pub segment: Vec<f64>,
    pub parcel: Vec<f64>,
}

impl FeatureImportance {
    /// Scores from the current embedding inputs of the encoder.
    pub fn compute(encoder: &Encoder<'_>, graph: &HomeGraph) -> Self {
        let mut tape = Tape::new();
        let xs = encoder.embed_inputs(&mut tape, &encoder.inputs.segments, None);
        let xr = encoder.embed_inputs(&mut tape, &encoder.inputs.parcels, None);
        Self {
            segment: feature_importance(tape.value(xs), &graph.intra_in_degree(EntityType::Segment)),
            parcel: feature_importance(tape.value(xr), &graph.intra_in_degree(EntityType::Parcel)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedView {
    pub view: GraphView,
    pub seed: u64,
    /// `(relation, src, dst)` of every dropped edge.
    pub removed: Vec<(Relation, usize, usize)>,
}

/// Drops intra-entity edges and masks embedding-input dimensions with their
/// adaptive probabilities. Segment-parcel edges are never touched.
pub fn augment(graph: &HomeGraph, importance: &FeatureImportance, probs: ViewProbs, p_tau: f64, seed: u64) -> AugmentedView {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut view = GraphView::of(graph);
    let mut removed = Vec::new();
    for r in Relation::SEGMENT_VIEWS.into_iter().chain(Relation::PARCEL_VIEWS) {
        let list = &mut view.relations[r.index()];
        let probs_e = edge_removal_probs(list, probs.p_e, p_tau);
        let mut keep = Vec::with_capacity(list.edges.len());
        for (e, p) in list.edges.iter().zip(probs_e) {
            if rng.gen::<f64>() < p {
                removed.push((r, e.src, e.dst));
            } else {
                keep.push(*e);
            }
        }
        list.edges = keep;
    }
    let mut mask = |c: &[f64]| -> Vec<f64> {
        feature_mask_probs(c, probs.p_n, p_tau).into_iter().map(|p| if rng.gen::<f64>() < p { 0.0 } else { 1.0 }).collect()
    };
    view.segment_mask = Some(mask(&importance.segment));
    view.parcel_mask = Some(mask(&importance.parcel));
    AugmentedView { view, seed, removed }
}

/// Projection head and discriminator parameters.
pub fn objective_param_specs(dim: usize) -> Vec<ParamSpec> {
    ["proj.w1", "proj.w2", "disc.w_d", "disc.w_c"]
        .into_iter()
        .map(|n| ParamSpec { name: n.into(), shape: (dim, dim), kind: ParamKind::Weight })
        .collect()
}

/// Two-layer projection `ELU(h W1) W2`, shared by both views and both entity types.
pub fn project(tape: &mut Tape, h: Var, w1: Var, w2: Var) -> Var {
    let z = tape.matmul(h, w1);
    let z = tape.elu(z);
    tape.matmul(z, w2)
}

/// NT-Xent with cosine similarity, inter-view and intra-view negatives,
/// averaged over anchors and over both view orderings.
pub fn nt_xent(tape: &mut Tape, q1: Var, q2: Var, tau: f64) -> Var {
    let n = tape.value(q1).nrows();
    let z1 = tape.l2_normalize_rows(q1);
    let z2 = tape.l2_normalize_rows(q2);
    let mut self_mask = Mat::zeros((n, n));
    for i in 0..n {
        self_mask[[i, i]] = f64::NEG_INFINITY;
    }
    let z2t = tape.transpose(z2);
    let s12 = tape.matmul(z1, z2t);
    let s12 = tape.scale(s12, 1.0 / tau);
    let s21 = tape.transpose(s12);
    let pos = tape.diag(s12);
    let mut halves = Vec::with_capacity(2);
    for (a, cross) in [(z1, s12), (z2, s21)] {
        let at = tape.transpose(a);
        let within = tape.matmul(a, at);
        let within = tape.scale(within, 1.0 / tau);
        let within = tape.add_const(within, &self_mask);
        let all = tape.concat_cols(&[cross, within]);
        let lse = tape.logsumexp_rows(all);
        let per_anchor = tape.sub(lse, pos);
        halves.push(tape.mean_all(per_anchor));
    }
    let sum = tape.add(halves[0], halves[1]);
    tape.scale(sum, 0.5)
}

/// For each parcel, one other parcel drawn uniformly; empty with fewer than two parcels.
pub fn sample_negative_parcels(n_parcels: usize, rng: &mut impl Rng) -> Vec<usize> {
    if n_parcels < 2 {
        return Vec::new();
    }
    (0..n_parcels)
        .map(|r| {
            let j = rng.gen_range(0..n_parcels - 1);
            if j >= r {
                j + 1
            } else {
                j
            }
        })
        .collect()
}

/// `-(mean log sigmoid(pos) + mean log sigmoid(-neg))`, dropping a term with no pairs.
fn discriminator_loss(tape: &mut Tape, pos: Option<Var>, neg: Option<Var>) -> Var {
    let mut terms = Vec::new();
    if let Some(p) = pos {
        let l = tape.log_sigmoid(p);
        terms.push(tape.mean_all(l));
    }
    if let Some(n) = neg {
        let flipped = tape.scale(n, -1.0);
        let l = tape.log_sigmoid(flipped);
        terms.push(tape.mean_all(l));
    }
    let total = match terms.as_slice() {
        [] => return tape.constant(Mat::zeros((1, 1))),
        [a] => *a,
        [a, b] => tape.add(*a, *b),
        _ => unreachable!(),
    };
    tape.scale(total, -1.0)
}

fn bilinear_scores(tape: &mut Tape, a: Var, a_idx: Vec<usize>, w: Var, b: Var, b_idx: Vec<usize>) -> Option<Var> {
    if a_idx.is_empty() {
        return None;
    }
    let aw = tape.matmul(a, w);
    let aw = tape.gather(aw, a_idx.into());
    let bb = tape.gather(b, b_idx.into());
    Some(tape.row_dot(aw, bb))
}

/// Parcels score their own segments as positives and the segments of
/// `negatives[r]` as negatives under `sigmoid(h_r W h_s)`.
pub fn segment_parcel_loss(tape: &mut Tape, h_s: Var, h_r: Var, w_d: Var, segments_of: &[Vec<usize>], negatives: &[usize]) -> Var {
    let (mut pr, mut ps) = (Vec::new(), Vec::new());
    for (r, segs) in segments_of.iter().enumerate() {
        for &s in segs {
            pr.push(r);
            ps.push(s);
        }
    }
    let (mut nr, mut ns) = (Vec::new(), Vec::new());
    for (r, &other) in negatives.iter().enumerate() {
        for &s in &segments_of[other] {
            nr.push(r);
            ns.push(s);
        }
    }
    let pos = bilinear_scores(tape, h_r, pr, w_d, h_s, ps);
    let neg = bilinear_scores(tape, h_r, nr, w_d, h_s, ns);
    discriminator_loss(tape, pos, neg)
}

/// Rows of the segment features shuffled; returns the permutation with them.
pub fn corrupt_segment_features(segments: &EntityInputs, rng: &mut impl Rng) -> (EntityInputs, Vec<usize>) {
    let mut perm: Vec<usize> = (0..segments.n).collect();
    perm.shuffle(rng);
    (segments.permuted(&perm), perm)
}

/// Real parcels against the mean-pooled city vector as positives, fake parcels as negatives.
pub fn city_loss(tape: &mut Tape, h_r: Var, h_fake: Var, w_c: Var) -> Result<Var> {
    let n = tape.value(h_r).nrows();
    if n == 0 {
        return Err(Error::Validation("city objective needs at least one parcel".into()));
    }
    let city = tape.mean_rows(h_r);
    let city_t = tape.transpose(city);
    let cw = tape.matmul(w_c, city_t);
    let real = tape.matmul(h_r, cw);
    let fake = tape.matmul(h_fake, cw);
    Ok(discriminator_loss(tape, Some(real), Some(fake)))
}

/// All randomness consumed by one evaluation of the fused objective.
#[derive(Clone, Debug)]
pub struct StepSample {
    pub views: [AugmentedView; 2],
    pub negative_parcels: Vec<usize>,
    pub corruption: Vec<usize>,
    pub dropout_seed: u64,
}

impl StepSample {
    pub fn draw(encoder: &Encoder<'_>, graph: &HomeGraph, aug: &AugmentationConfig, rng: &mut ChaCha8Rng) -> Self {
        let importance = FeatureImportance::compute(encoder, graph);
        let v1 = augment(graph, &importance, aug.view1, aug.p_tau, rng.gen());
        let v2 = augment(graph, &importance, aug.view2, aug.p_tau, rng.gen());
        let negative_parcels = sample_negative_parcels(graph.n_parcels(), rng);
        let (_, corruption) = corrupt_segment_features(&encoder.inputs.segments, rng);
        Self { views: [v1, v2], negative_parcels, corruption, dropout_seed: rng.gen() }
    }
}

/// Component losses on the tape; a component whose weight is zero is skipped.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub ss: Option<Var>,
    pub rr: Option<Var>,
    pub sr: Option<Var>,
    pub c: Option<Var>,
    pub total: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    pub ss: Option<f64>,
    pub rr: Option<f64>,
    pub sr: Option<f64>,
    pub c: Option<f64>,
    pub total: f64,
}

impl LossVars {
    pub fn values(&self, tape: &Tape) -> LossValues {
        let v = |x: Option<Var>| x.map(|x| tape.scalar(x));
        LossValues { ss: v(self.ss), rr: v(self.rr), sr: v(self.sr), c: v(self.c), total: tape.scalar(self.total) }
    }
}

impl LossValues {
    /// Name of the first non-finite component, in logging order.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        let named = [("l_ss", self.ss), ("l_rr", self.rr), ("l_sr", self.sr), ("l_c", self.c), ("total", Some(self.total))];
        named.into_iter().find(|(_, v)| v.is_some_and(|v| !v.is_finite())).map(|(n, _)| n)
    }
}

/// Weighted sum of the four objectives for a fixed draw of randomness.
/// Augmented views feed the intra-entity terms; the clean view feeds the others.
pub fn fused_loss(
    tape: &mut Tape,
    encoder: &Encoder<'_>,
    objective_params: &crate::encoder::Params,
    graph: &HomeGraph,
    sample: &StepSample,
    loss: &LossConfig,
) -> Result<LossVars> {
    let p = encoder.config.dropout;
    let mut stream = 0u64;
    let mut dropout = || {
        stream += 1;
        Dropout::new(p, ChaCha8Rng::seed_from_u64(sample.dropout_seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)))
    };
    let param = |tape: &mut Tape, name: &str| tape.param(name, &objective_params[name]);
    let mut weighted: Vec<Var> = Vec::new();
    let (mut ss, mut rr, mut sr, mut c) = (None, None, None, None);

    if loss.lambda_ss > 0.0 || loss.lambda_rr > 0.0 {
        let a = encoder.forward(tape, &sample.views[0].view, &mut dropout());
        let b = encoder.forward(tape, &sample.views[1].view, &mut dropout());
        let (w1, w2) = (param(tape, "proj.w1"), param(tape, "proj.w2"));
        if loss.lambda_ss > 0.0 {
            let q1 = project(tape, a.h_s, w1, w2);
            let q2 = project(tape, b.h_s, w1, w2);
            let l = nt_xent(tape, q1, q2, loss.tau);
            weighted.push(tape.scale(l, loss.lambda_ss));
            ss = Some(l);
        }
        if loss.lambda_rr > 0.0 {
            let q1 = project(tape, a.h_r, w1, w2);
            let q2 = project(tape, b.h_r, w1, w2);
            let l = nt_xent(tape, q1, q2, loss.tau);
            weighted.push(tape.scale(l, loss.lambda_rr));
            rr = Some(l);
        }
    }
    if loss.lambda_sr > 0.0 || loss.lambda_c > 0.0 {
        let clean = GraphView::of(graph);
        let out = encoder.forward(tape, &clean, &mut dropout());
        if loss.lambda_sr > 0.0 {
            let w_d = param(tape, "disc.w_d");
            let l = segment_parcel_loss(tape, out.h_s, out.h_r, w_d, &graph.segments_of(), &sample.negative_parcels);
            weighted.push(tape.scale(l, loss.lambda_sr));
            sr = Some(l);
        }
        if loss.lambda_c > 0.0 {
            let mut drop = dropout();
            let fake_inputs = encoder.inputs.segments.permuted(&sample.corruption);
            let input = encoder.embed_inputs(tape, &fake_inputs, None);
            let xt_fake = encoder.compress(tape, EntityType::Segment, input, &mut drop);
            let (x_fake, _) = encoder.shape_attention(tape, xt_fake, out.xt_r, &mut drop);
            let h_fake = if loss.fake_through_hgt {
                encoder.graph_layers(tape, xt_fake, x_fake, &clean, &mut drop).1
            } else {
                x_fake
            };
            let w_c = param(tape, "disc.w_c");
            let l = city_loss(tape, out.h_r, h_fake, w_c)?;
            weighted.push(tape.scale(l, loss.lambda_c));
            c = Some(l);
        }
    }
    let total = match weighted.split_first() {
        None => tape.constant(Mat::zeros((1, 1))),
        Some((first, rest)) => rest.iter().fold(*first, |acc, &v| tape.add(acc, v)),
    };
    Ok(LossVars { ss, rr, sr, c, total })
}
