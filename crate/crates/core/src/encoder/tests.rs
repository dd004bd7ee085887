use super::*;
use crate::graph::{assemble_home_graph, Edge, GraphConfig, HomeGraph, WeightedEdgeList};
use crate::synth::{generate_synthetic_city, SynthSpec};
use rand::SeedableRng;

fn city(w: usize, h: usize) -> HomeGraph {
    let spec = SynthSpec { grid_w: w, grid_h: h, n_pois: 60, n_trajectories: 40, ..Default::default() };
    assemble_home_graph(&generate_synthetic_city(&spec).unwrap(), &GraphConfig::default()).unwrap()
}

fn small_config(dim: usize) -> EncoderConfig {
    EncoderConfig {
        dim,
        heads: 2,
        feature_dim: 3,
        n_dist_buckets: 3,
        n_angle_buckets: 4,
        dist_emb_dim: 2,
        angle_emb_dim: 2,
        ..Default::default()
    }
}

fn setup(graph: &HomeGraph, cfg: &EncoderConfig, seed: u64) -> (GraphInputs, Params) {
    let inputs = GraphInputs::new(graph, cfg).unwrap();
    let params = init_params(cfg, &inputs, &mut ChaCha8Rng::seed_from_u64(seed));
    (inputs, params)
}

fn no_features(entity: EntityType, n: usize) -> EntityInputs {
    EntityInputs { entity, n, names: vec![], columns: vec![] }
}

/// Inputs without raw features, for hand-set free embeddings. Pairs are
/// `(parcel, segment, distance bucket, angle bucket)`.
fn bare_inputs(n_s: usize, n_r: usize, pairs: &[(usize, usize, usize, usize)]) -> GraphInputs {
    GraphInputs {
        segments: no_features(EntityType::Segment, n_s),
        parcels: no_features(EntityType::Parcel, n_r),
        sr_parcel: Rc::new(pairs.iter().map(|p| p.0).collect()),
        sr_segment: Rc::new(pairs.iter().map(|p| p.1).collect()),
        dist_bucket: Rc::new(pairs.iter().map(|p| p.2).collect()),
        angle_bucket: Rc::new(pairs.iter().map(|p| p.3).collect()),
        dist_cuts: vec![],
    }
}

fn empty_view() -> GraphView {
    GraphView { relations: Relation::ALL.iter().map(|&r| WeightedEdgeList::empty(r)).collect(), segment_mask: None, parcel_mask: None }
}

fn m(r: usize, c: usize, v: &[f64]) -> Mat {
    Mat::from_shape_vec((r, c), v.to_vec()).unwrap()
}

#[test]
fn output_shapes_on_small_city() {
    let g = city(2, 2);
    let cfg = small_config(16);
    let (inputs, params) = setup(&g, &cfg, 0);
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let t = enc.encode(&GraphView::of(&g));
    assert_eq!(t.segments.dim(), (g.n_segments(), 16));
    assert_eq!(t.parcels.dim(), (g.n_parcels(), 16));
    assert!(t.is_finite());
}

#[test]
fn zero_mlp_weights_give_zero_outputs() {
    let g = city(2, 2);
    let cfg = small_config(8);
    let (inputs, mut params) = setup(&g, &cfg, 1);
    for (name, p) in params.iter_mut() {
        if name.contains(".mlp.") {
            p.fill(0.0);
        }
    }
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &GraphView::of(&g), &mut Dropout::off());
    assert!(tape.value(out.xt_s).iter().all(|&v| v == 0.0));
    assert!(tape.value(out.xt_r).iter().all(|&v| v == 0.0));
}

#[test]
fn identical_raw_features_give_identical_rows() {
    let mut g = city(2, 2);
    let row = g.segment_features.row(0).to_owned();
    g.segment_features.row_mut(3).assign(&row);
    let cfg = small_config(8);
    let (inputs, params) = setup(&g, &cfg, 2);
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &GraphView::of(&g), &mut Dropout::off());
    let xt = tape.value(out.xt_s);
    assert_eq!(xt.row(0), xt.row(3));
}

fn psa_config() -> EncoderConfig {
    EncoderConfig {
        dim: 2,
        layers: 0,
        heads: 1,
        dropout: 0.0,
        n_dist_buckets: 2,
        n_angle_buckets: 2,
        dist_emb_dim: 1,
        angle_emb_dim: 1,
        raw_features: false,
        ..Default::default()
    }
}

fn psa_params() -> Params {
    let mut p = Params::new();
    p.insert("jfe.segment.free".into(), m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    p.insert("jfe.parcel.free".into(), m(2, 2, &[1.0, 1.0, 0.3, -0.7]));
    p.insert("psa.w_a1".into(), m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    p.insert("psa.w_a2".into(), m(2, 2, &[2.0, 0.0, 0.0, 3.0]));
    p.insert("psa.w_a3".into(), m(2, 2, &[1.0, 0.0, 0.0, 1.0]));
    p.insert("psa.dist_emb".into(), m(2, 1, &[0.5, -0.5]));
    p.insert("psa.angle_emb".into(), m(2, 1, &[0.0, 0.0]));
    p.insert("psa.w_l".into(), m(1, 1, &[2.0]));
    p.insert("psa.w_d".into(), m(1, 1, &[1.0]));
    p
}

#[test]
fn shape_attention_two_segment_hand_evaluation() {
    // parcel 0 owns segments 0 (distance bucket 0) and 1 (bucket 1); parcel 1 owns none
    let inputs = bare_inputs(2, 2, &[(0, 0, 0, 0), (0, 1, 1, 0)]);
    let cfg = psa_config();
    let params = psa_params();
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &empty_view(), &mut Dropout::off());

    // alpha_0 = (x_r.x_s0 + 0.5*2)/sqrt2 = sqrt2 ; alpha_1 = (1 - 1)/sqrt2 = 0
    let a0 = 2f64.sqrt().exp() / (2f64.sqrt().exp() + 1.0);
    let a1 = 1.0 / (2f64.sqrt().exp() + 1.0);
    let att = tape.value(out.psa_attention.unwrap());
    assert!((att[[0, 0]] - a0).abs() < 1e-12);
    assert!((att[[1, 0]] - a1).abs() < 1e-12);
    let x_r = tape.value(out.x_r);
    assert!((x_r[[0, 0]] - (2.0 * a0 + 1.0)).abs() < 1e-12);
    assert!((x_r[[0, 1]] - (3.0 * a1 + 1.0)).abs() < 1e-12);
    // parcel without segments keeps its input
    assert_eq!(x_r.row(1).to_vec(), vec![0.3, -0.7]);
    // segments pass through
    assert_eq!(tape.value(out.h_s), &params["jfe.segment.free"]);
}

#[test]
fn shape_attention_singleton_and_zero_output_matrix() {
    let inputs = bare_inputs(2, 2, &[(0, 0, 0, 1), (1, 1, 1, 0)]);
    let cfg = psa_config();
    let mut params = psa_params();
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &empty_view(), &mut Dropout::off());
    assert!(tape.value(out.psa_attention.unwrap()).iter().all(|&a| a == 1.0));

    params.insert("psa.w_a3".into(), Mat::zeros((2, 2)));
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &empty_view(), &mut Dropout::off());
    assert_eq!(tape.value(out.x_r), &params["jfe.parcel.free"]);
}

#[test]
fn shape_attention_invariant_to_per_parcel_shift() {
    // both segments share the angle bucket, so shifting that embedding adds a constant to each score
    let inputs = bare_inputs(3, 1, &[(0, 0, 0, 1), (0, 1, 1, 1), (0, 2, 0, 1)]);
    let cfg = psa_config();
    let mut params = psa_params();
    params.insert("jfe.segment.free".into(), m(3, 2, &[1.0, 0.0, 0.0, 1.0, -0.4, 0.9]));
    params.insert("jfe.parcel.free".into(), m(1, 2, &[0.2, 0.8]));
    let att = |params: &Params| {
        let enc = Encoder::new(&cfg, params, &inputs).unwrap();
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, &empty_view(), &mut Dropout::off());
        tape.value(out.psa_attention.unwrap()).clone()
    };
    let before = att(&params);
    assert!((before.sum() - 1.0).abs() < 1e-12);
    params.insert("psa.angle_emb".into(), m(2, 1, &[0.0, 7.5]));
    let after = att(&params);
    for (a, b) in before.iter().zip(after.iter()) {
        assert!((a - b).abs() < 1e-6);
    }
}

/// Straight-loop graph attention used as the reference for a single layer.
/// `edges` lists `(relation, target, neighbor, weight)` in global node ids.
fn naive_layer(
    x: &[Vec<f64>],
    n_s: usize,
    edges: &[(Relation, usize, usize, f64)],
    params: &Params,
    heads: usize,
) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let vec_mat = |v: &[f64], w: &Mat| -> Vec<f64> { (0..d).map(|c| (0..d).map(|r| v[r] * w[[r, c]]).sum()).collect() };
    let f: Vec<Vec<f64>> = x
        .iter()
        .enumerate()
        .map(|(i, xi)| vec_mat(xi, &params[if i < n_s { "hgt.0.node.segment" } else { "hgt.0.node.parcel" }]))
        .collect();
    let mut out = f.clone();
    for (i, out_i) in out.iter_mut().enumerate() {
        let inc: Vec<_> = edges.iter().filter(|e| e.1 == i).collect();
        if inc.is_empty() {
            continue;
        }
        let mut acc = vec![0.0; d];
        for h in 0..heads {
            let q = vec_mat(&f[i], &params[&format!("hgt.0.head.{h}.q")]);
            let mut scores = Vec::new();
            let mut values = Vec::new();
            for &&(r, _, j, w) in &inc {
                let fe: Vec<f64> = vec_mat(&f[j], &params[&format!("hgt.0.edge.{}", r.name())]).iter().map(|v| v * w).collect();
                let k = vec_mat(&fe, &params[&format!("hgt.0.head.{h}.k")]);
                values.push(vec_mat(&fe, &params[&format!("hgt.0.head.{h}.v")]));
                scores.push(q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt());
            }
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - max).exp()).sum();
            for (s, v) in scores.iter().zip(&values) {
                let a = (s - max).exp() / z;
                for c in 0..d {
                    acc[c] += a * v[c] / heads as f64;
                }
            }
        }
        for c in 0..d {
            out_i[c] += acc[c];
        }
    }
    out
}

fn hgt_config(dim: usize, heads: usize) -> EncoderConfig {
    EncoderConfig { dim, layers: 1, heads, dropout: 0.0, raw_features: false, shape_attention: false, ..Default::default() }
}

fn rows(mat: &Mat) -> Vec<Vec<f64>> {
    mat.rows().into_iter().map(|r| r.to_vec()).collect()
}

fn run_layer(cfg: &EncoderConfig, params: &Params, inputs: &GraphInputs, view: &GraphView) -> (Mat, Mat) {
    let enc = Encoder::new(cfg, params, inputs).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, view, &mut Dropout::off());
    (tape.value(out.h_s).clone(), tape.value(out.h_r).clone())
}

#[test]
fn hgt_three_node_matches_reference() {
    for heads in [1, 3] {
        // two segments, one parcel; segment 1 sits on the parcel
        let inputs = bare_inputs(2, 1, &[(0, 1, 0, 0)]);
        let cfg = hgt_config(2, heads);
        let params = init_params(&cfg, &inputs, &mut ChaCha8Rng::seed_from_u64(7 + heads as u64));
        let mut view = empty_view();
        view.relations[Relation::SGeo.index()] =
            WeightedEdgeList::new(Relation::SGeo, vec![Edge { src: 0, dst: 1, weight: 0.5 }, Edge { src: 1, dst: 0, weight: 0.5 }]);
        view.relations[Relation::SMob.index()] = WeightedEdgeList::new(Relation::SMob, vec![Edge { src: 0, dst: 1, weight: 1.0 }]);
        view.relations[Relation::SR.index()] = WeightedEdgeList::new(Relation::SR, vec![Edge { src: 1, dst: 0, weight: 1.0 }]);
        let (h_s, h_r) = run_layer(&cfg, &params, &inputs, &view);

        let x: Vec<Vec<f64>> = rows(&params["jfe.segment.free"]).into_iter().chain(rows(&params["jfe.parcel.free"])).collect();
        let edges = [
            (Relation::SGeo, 0, 1, 0.5),
            (Relation::SGeo, 1, 0, 0.5),
            (Relation::SMob, 0, 1, 1.0),
            (Relation::SR, 1, 2, 1.0),
            (Relation::SR, 2, 1, 1.0),
        ];
        let expect = naive_layer(&x, 2, &edges, &params, heads);
        let got: Vec<Vec<f64>> = rows(&h_s).into_iter().chain(rows(&h_r)).collect();
        for (g, e) in got.iter().flatten().zip(expect.iter().flatten()) {
            assert!((g - e).abs() < 1e-12, "{got:?} vs {expect:?}");
        }
    }
}

#[test]
fn hgt_on_city_matches_reference() {
    let g = city(2, 2);
    let inputs = bare_inputs(g.n_segments(), g.n_parcels(), &[]);
    let cfg = hgt_config(4, 2);
    let params = init_params(&cfg, &inputs, &mut ChaCha8Rng::seed_from_u64(3));
    let view = GraphView::of(&g);
    let (h_s, h_r) = run_layer(&cfg, &params, &inputs, &view);
    let n_s = g.n_segments();
    let mut edges = Vec::new();
    for r in Relation::ALL {
        for e in view.edges(r) {
            match r.entity() {
                Some(EntityType::Segment) => edges.push((r, e.src, e.dst, e.weight)),
                Some(EntityType::Parcel) => edges.push((r, e.src + n_s, e.dst + n_s, e.weight)),
                None => {
                    edges.push((r, e.src, e.dst + n_s, e.weight));
                    edges.push((r, e.dst + n_s, e.src, e.weight));
                }
            }
        }
    }
    let x: Vec<Vec<f64>> = rows(&params["jfe.segment.free"]).into_iter().chain(rows(&params["jfe.parcel.free"])).collect();
    let expect = naive_layer(&x, n_s, &edges, &params, 2);
    let got: Vec<Vec<f64>> = rows(&h_s).into_iter().chain(rows(&h_r)).collect();
    for (g, e) in got.iter().flatten().zip(expect.iter().flatten()) {
        assert!((g - e).abs() < 1e-10);
    }
}

#[test]
fn hgt_attention_rows_sum_to_one() {
    let g = city(3, 2);
    let cfg = small_config(8);
    let (inputs, params) = setup(&g, &cfg, 4);
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut tape = Tape::new();
    let view = GraphView::of(&g);
    let out = enc.forward(&mut tape, &view, &mut Dropout::off());
    let targets = enc.attention_targets(&view);
    let n = g.n_segments() + g.n_parcels();
    assert_eq!(out.hgt_attention.len(), cfg.layers * cfg.heads);
    for &att in &out.hgt_attention {
        let v = tape.value(att);
        let mut sums = vec![0.0; n];
        for (e, &t) in targets.iter().enumerate() {
            sums[t] += v[[e, 0]];
        }
        assert!(sums.iter().all(|&s| s == 0.0 || (s - 1.0).abs() < 1e-6));
    }
    let att = tape.value(out.psa_attention.unwrap());
    let mut per_parcel = vec![0.0; g.n_parcels()];
    for (k, &p) in inputs.sr_parcel.iter().enumerate() {
        per_parcel[p] += att[[k, 0]];
    }
    assert!(per_parcel.iter().all(|s| (s - 1.0).abs() < 1e-6 || *s == 0.0));
}

#[test]
fn no_edges_gives_node_projection() {
    let inputs = bare_inputs(3, 2, &[]);
    let cfg = hgt_config(3, 2);
    let params = init_params(&cfg, &inputs, &mut ChaCha8Rng::seed_from_u64(5));
    let (h_s, h_r) = run_layer(&cfg, &params, &inputs, &empty_view());
    assert_eq!(h_s, params["jfe.segment.free"].dot(&params["hgt.0.node.segment"]));
    assert_eq!(h_r, params["jfe.parcel.free"].dot(&params["hgt.0.node.parcel"]));
}

#[test]
fn zero_value_paths_leave_residual_only() {
    let g = city(2, 2);
    let cfg = small_config(6);
    let (inputs, mut params) = setup(&g, &cfg, 6);
    for (name, p) in params.iter_mut() {
        if name.ends_with(".v") {
            p.fill(0.0);
        }
    }
    let one_layer = EncoderConfig { layers: 1, ..cfg.clone() };
    assert!(Encoder::new(&one_layer, &params, &inputs).is_err(), "layer count mismatch must be rejected");
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &GraphView::of(&g), &mut Dropout::off());
    let mut h_s = tape.value(out.xt_s).clone();
    let mut h_r = tape.value(out.x_r).clone();
    for l in 0..cfg.layers {
        h_s = h_s.dot(&params[&format!("hgt.{l}.node.segment")]);
        h_r = h_r.dot(&params[&format!("hgt.{l}.node.parcel")]);
    }
    assert_eq!(tape.value(out.h_s), &h_s);
    assert_eq!(tape.value(out.h_r), &h_r);
}

#[test]
fn zero_layers_returns_joint_feature_encoding() {
    let g = city(2, 2);
    let cfg = EncoderConfig { layers: 0, ..small_config(8) };
    let (inputs, params) = setup(&g, &cfg, 8);
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &GraphView::of(&g), &mut Dropout::off());
    assert_eq!(tape.value(out.h_s), tape.value(out.xt_s));
    assert_eq!(tape.value(out.h_r), tape.value(out.x_r));
    assert!(!params.keys().any(|k| k.starts_with("hgt.")));
}

#[test]
fn evaluation_mode_is_deterministic_and_dropout_is_seeded() {
    let g = city(2, 2);
    let cfg = small_config(8);
    let (inputs, params) = setup(&g, &cfg, 9);
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let view = GraphView::of(&g);
    assert_eq!(enc.encode(&view), enc.encode(&view));
    let train = |seed| {
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, &view, &mut Dropout::new(0.5, ChaCha8Rng::seed_from_u64(seed)));
        tape.value(out.h_s).clone()
    };
    assert_eq!(train(1), train(1));
    assert_ne!(train(1), train(2));
}

#[test]
fn permuting_segments_permutes_embeddings() {
    let g = city(3, 3);
    let cfg = small_config(8);
    let (inputs, params) = setup(&g, &cfg, 10);
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let base = enc.encode(&GraphView::of(&g));

    let n_s = g.n_segments();
    let mut perm: Vec<usize> = (0..n_s).collect();
    perm.reverse();
    perm.swap(0, 5);
    // new id of old segment `perm[i]` is `i`
    let mut new_id = vec![0; n_s];
    for (i, &p) in perm.iter().enumerate() {
        new_id[p] = i;
    }
    let mut p_inputs = inputs.clone();
    p_inputs.segments = inputs.segments.permuted(&perm);
    p_inputs.sr_segment = Rc::new(inputs.sr_segment.iter().map(|&s| new_id[s]).collect());
    let mut view = GraphView::of(&g);
    for r in Relation::ALL {
        let edges: Vec<Edge> = view.edges(r).iter().map(|e| match r.entity() {
            Some(EntityType::Segment) => Edge { src: new_id[e.src], dst: new_id[e.dst], weight: e.weight },
            Some(EntityType::Parcel) => *e,
            None => Edge { src: new_id[e.src], ..*e },
        }).collect();
        view.relations[r.index()] = WeightedEdgeList::new(r, edges);
    }
    let enc2 = Encoder::new(&cfg, &params, &p_inputs).unwrap();
    let permuted = enc2.encode(&view);
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in permuted.segments.row(i).iter().zip(base.segments.row(p)) {
            assert!((a - b).abs() < 1e-10);
        }
    }
    for (a, b) in permuted.parcels.iter().zip(base.parcels.iter()) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn feature_mask_zeroes_input_dimensions() {
    let g = city(2, 2);
    let cfg = small_config(4);
    let (inputs, params) = setup(&g, &cfg, 11);
    let enc = Encoder::new(&cfg, &params, &inputs).unwrap();
    let mut view = GraphView::of(&g);
    let width = inputs.segments.columns.len() * cfg.feature_dim;
    let mut mask = vec![1.0; width];
    mask[0] = 0.0;
    mask[width - 1] = 0.0;
    view.segment_mask = Some(mask);
    let mut tape = Tape::new();
    let out = enc.forward(&mut tape, &view, &mut Dropout::off());
    let x = tape.value(out.input_s);
    assert!(x.column(0).iter().all(|&v| v == 0.0));
    assert!(x.column(width - 1).iter().all(|&v| v == 0.0));
    assert!((1..width - 1).any(|k| x.column(k).iter().any(|&v| v != 0.0)));
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let g = city(2, 2);
    let cfg = small_config(4);
    let (inputs, params) = setup(&g, &cfg, 12);
    let view = GraphView::of(&g);
    let weights_s = Mat::from_shape_fn((g.n_segments(), 4), |(i, k)| ((i * 7 + k * 3) % 5) as f64 - 2.0);
    let weights_r = Mat::from_shape_fn((g.n_parcels(), 4), |(i, k)| ((i * 5 + k) % 3) as f64 - 1.0);
    let objective = |params: &Params, grads: bool| -> (f64, Option<Params>) {
        let enc = Encoder::new(&cfg, params, &inputs).unwrap();
        let mut tape = Tape::new();
        let out = enc.forward(&mut tape, &view, &mut Dropout::new(0.2, ChaCha8Rng::seed_from_u64(0)));
        let a = tape.mul_const(out.h_s, weights_s.clone());
        let b = tape.mul_const(out.h_r, weights_r.clone());
        let (a, b) = (tape.sum_all(a), tape.sum_all(b));
        let total = tape.add(a, b);
        let gr = grads.then(|| tape.backward(total).by_param(&tape).map(|(n, g)| (n.to_string(), g)).collect());
        (tape.scalar(total), gr)
    };
    let (_, analytic) = objective(&params, true);
    let analytic = analytic.unwrap();
    assert_eq!(analytic.len(), params.len());
    let h = 1e-6;
    for (name, p) in &params {
        // probe a few entries per group
        for idx in [0, p.len() / 2, p.len() - 1] {
            let (r, c) = (idx / p.ncols(), idx % p.ncols());
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[[r, c]] += h;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[[r, c]] -= h;
            let num = (objective(&plus, false).0 - objective(&minus, false).0) / (2.0 * h);
            let ana = analytic[name][[r, c]];
            let err = (num - ana).abs() / (1e-6 + num.abs().max(ana.abs()));
            assert!(err < 1e-4 || (num - ana).abs() < 1e-7, "{name}[{r},{c}]: numeric {num} analytic {ana}");
        }
    }
}
