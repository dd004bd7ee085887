use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::assign::{parcel_of_segments, segments_of_parcels};
use super::*;
use crate::error::{Error, Result};
use crate::model::{chronological_split, EntityType, FeatureSchema, MapBundle};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    /// Additive constant in the inverse-distance weights, meters.
    pub epsilon: f64,
    /// Parcel distance threshold in meters; `None` uses twice the median nearest-neighbor spacing.
    pub epsilon_r: Option<f64>,
    /// Neighbors kept per entity in the function views.
    pub top_k: usize,
    /// Raw segment features withheld from the encoder (label leakage guard).
    pub drop_segment_features: Vec<String>,
    pub drop_parcel_features: Vec<String>,
    /// Build the mobility views from the training split only, keeping the
    /// held-out trajectories unseen by pretraining.
    pub mobility_train_only: bool,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            epsilon: 1.0,
            epsilon_r: None,
            top_k: 10,
            drop_segment_features: vec!["category".into()],
            drop_parcel_features: vec!["function".into()],
            mobility_train_only: true,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("graph.epsilon must be positive".into()));
        }
        if let Some(r) = self.epsilon_r {
            if !(r > 0.0) {
                return Err(Error::Config("graph.epsilon_r must be positive".into()));
            }
        }
        if self.top_k == 0 {
            return Err(Error::Config("graph.top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewGraph {
    pub entity_type: EntityType,
    pub n: usize,
    /// Geographic, function and mobility views, in that order.
    pub views: [WeightedEdgeList; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct HomeGraph {
    pub segment_graph: MultiViewGraph,
    pub parcel_graph: MultiViewGraph,
    pub assignment: WeightedEdgeList,
    pub segment_features: Array2<f64>,
    pub parcel_features: Array2<f64>,
    pub segment_schema: Vec<FeatureSchema>,
    pub parcel_schema: Vec<FeatureSchema>,
    /// One record per SR pair, sorted by `(parcel_id, segment_id)`.
    pub sr_geometry: Vec<SrGeometry>,
    /// Config echo with `epsilon_r` resolved.
    pub config: GraphConfig,
}

impl HomeGraph {
    pub fn n_segments(&self) -> usize {
        self.segment_graph.n
    }

    pub fn n_parcels(&self) -> usize {
        self.parcel_graph.n
    }

    pub fn relation(&self, r: Relation) -> &WeightedEdgeList {
        match r {
            Relation::SGeo => &self.segment_graph.views[0],
            Relation::SFun => &self.segment_graph.views[1],
            Relation::SMob => &self.segment_graph.views[2],
            Relation::RGeo => &self.parcel_graph.views[0],
            Relation::RFun => &self.parcel_graph.views[1],
            Relation::RMob => &self.parcel_graph.views[2],
            Relation::SR => &self.assignment,
        }
    }

    pub fn relation_mut(&mut self, r: Relation) -> &mut WeightedEdgeList {
        match r {
            Relation::SGeo => &mut self.segment_graph.views[0],
            Relation::SFun => &mut self.segment_graph.views[1],
            Relation::SMob => &mut self.segment_graph.views[2],
            Relation::RGeo => &mut self.parcel_graph.views[0],
            Relation::RFun => &mut self.parcel_graph.views[1],
            Relation::RMob => &mut self.parcel_graph.views[2],
            Relation::SR => &mut self.assignment,
        }
    }

    pub fn parcel_of(&self) -> Vec<usize> {
        parcel_of_segments(&self.assignment, self.n_segments())
    }

    pub fn segments_of(&self) -> Vec<Vec<usize>> {
        segments_of_parcels(&self.assignment, self.n_parcels())
    }

    /// Unweighted in-degree summed over the three intra-entity views of `entity`.
    pub fn intra_in_degree(&self, entity: EntityType) -> Vec<f64> {
        let n = match entity {
            EntityType::Segment => self.n_segments(),
            EntityType::Parcel => self.n_parcels(),
        };
        let mut deg = vec![0.0; n];
        for r in Relation::views_of(entity) {
            for e in &self.relation(r).edges {
                deg[e.dst] += 1.0;
            }
        }
        deg
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Assembly(m));
        for r in Relation::ALL {
            let list = self.relation(r);
            if list.relation != r {
                return fail(format!("relation slot {r} holds {}", list.relation));
            }
            let (ns, nd) = match r.entity() {
                Some(EntityType::Segment) => (self.n_segments(), self.n_segments()),
                Some(EntityType::Parcel) => (self.n_parcels(), self.n_parcels()),
                None => (self.n_segments(), self.n_parcels()),
            };
            for w in list.edges.windows(2) {
                if (w[0].src, w[0].dst) >= (w[1].src, w[1].dst) {
                    return fail(format!("{r}: edges unsorted or duplicated"));
                }
            }
            for e in &list.edges {
                if e.src >= ns || e.dst >= nd {
                    return fail(format!("{r}: edge ({}, {}) out of range", e.src, e.dst));
                }
                if !(0.0..=1.0).contains(&e.weight) {
                    return fail(format!("{r}: weight {} outside [0, 1]", e.weight));
                }
            }
            if matches!(r, Relation::SMob | Relation::RMob) {
                for (i, s) in list.out_weight_sums(ns).iter().enumerate() {
                    if *s != 0.0 && (s - 1.0).abs() > 1e-9 {
                        return fail(format!("{r}: row {i} sums to {s}"));
                    }
                }
            }
        }
        let mut out_deg = vec![0usize; self.n_segments()];
        for e in &self.assignment.edges {
            if e.weight != 1.0 {
                return fail("sr: weights must be 1".into());
            }
            out_deg[e.src] += 1;
        }
        if let Some(s) = out_deg.iter().position(|&d| d != 1) {
            return fail(format!("sr: segment {s} has {} assigned parcels", out_deg[s]));
        }
        if self.sr_geometry.len() != self.assignment.len() {
            return fail("sr geometry does not cover the assignment".into());
        }
        if self.segment_features.dim() != (self.n_segments(), self.segment_schema.len())
            || self.parcel_features.dim() != (self.n_parcels(), self.parcel_schema.len())
        {
            return fail("feature matrix shape disagrees with schema".into());
        }
        Ok(())
    }

    /// SHA-256 over the canonical serialized node, edge and geometry tables.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for (_, text) in self.tables() {
            h.update(text.as_bytes());
        }
        hex::encode(h.finalize())
    }

    fn tables(&self) -> Vec<(String, String)> {
        let mut out = vec![
            ("nodes_segments.csv".to_string(), node_table(&self.segment_features, &self.segment_schema)),
            ("nodes_parcels.csv".to_string(), node_table(&self.parcel_features, &self.parcel_schema)),
        ];
        for r in Relation::ALL {
            let mut s = String::from("src,dst,weight\n");
            for e in &self.relation(r).edges {
                s.push_str(&format!("{},{},{}\n", e.src, e.dst, e.weight));
            }
            out.push((format!("edges_{}.csv", r.name()), s));
        }
        let mut s = String::from("parcel_id,segment_id,distance_m,angle_rad\n");
        for g in &self.sr_geometry {
            s.push_str(&format!("{},{},{},{}\n", g.parcel_id, g.segment_id, g.distance_m, g.angle_rad));
        }
        out.push(("sr_geometry.csv".to_string(), s));
        out
    }
}

fn node_table(x: &Array2<f64>, schema: &[FeatureSchema]) -> String {
    let mut s = String::from("id");
    for f in schema {
        s.push(',');
        s.push_str(&f.name);
    }
    s.push('\n');
    for (i, row) in x.rows().into_iter().enumerate() {
        s.push_str(&i.to_string());
        for v in row {
            s.push(',');
            s.push_str(&v.to_string());
        }
        s.push('\n');
    }
    s
}

fn feature_matrix(rows: Vec<Vec<f64>>, schema: &[FeatureSchema], keep: &[usize]) -> (Array2<f64>, Vec<FeatureSchema>) {
    let n = rows.len();
    let data: Vec<f64> = rows.iter().flat_map(|r| keep.iter().map(move |&k| r[k])).collect();
    let x = Array2::from_shape_vec((n, keep.len()), data).expect("consistent feature rows");
    (x, keep.iter().map(|&k| schema[k].clone()).collect())
}

fn kept_columns(schema: &[FeatureSchema], drop: &[String], what: &str) -> Result<Vec<usize>> {
    for d in drop {
        if !schema.iter().any(|f| &f.name == d) {
            return Err(Error::Config(format!("unknown {what} feature `{d}` in drop list")));
        }
    }
    Ok((0..schema.len()).filter(|&k| !drop.contains(&schema[k].name)).collect())
}

/// Builds every view, the assignment and the feature matrices for `bundle`.
pub fn assemble_home_graph(bundle: &MapBundle, config: &GraphConfig) -> Result<HomeGraph> {
    config.validate()?;
    bundle.validate()?;
    if bundle.segments.is_empty() {
        return Err(Error::Assembly("bundle has no segments".into()));
    }
    let mut config = config.clone();
    let epsilon_r = *config.epsilon_r.get_or_insert_with(|| default_epsilon_r(&bundle.parcels));

    let topology = segment_topology(&bundle.segments);
    let s_geo = build_segment_geo(&bundle.segments, &topology, config.epsilon);
    let r_geo = build_parcel_geo(&bundle.parcels, config.epsilon, epsilon_r);
    let s_fun = build_function_graph(&compute_tfidf(EntityType::Segment, bundle), config.top_k);
    let r_fun = build_function_graph(&compute_tfidf(EntityType::Parcel, bundle), config.top_k);
    let (sr, sr_geometry) = assign_segments_to_parcels(&bundle.segments, &bundle.parcels)?;
    let parcel_of = parcel_of_segments(&sr, bundle.segments.len());
    let trajectories = if config.mobility_train_only {
        &bundle.trajectories[chronological_split(bundle.trajectories.len())[0].clone()]
    } else {
        &bundle.trajectories[..]
    };
    let s_mob = build_segment_mobility(trajectories);
    let r_mob = build_parcel_mobility(trajectories, &parcel_of);

    let seg_keep = kept_columns(&bundle.segment_schema, &config.drop_segment_features, "segment")?;
    let parcel_keep = kept_columns(&bundle.parcel_schema, &config.drop_parcel_features, "parcel")?;
    let (segment_features, segment_schema) =
        feature_matrix(bundle.segments.iter().map(|s| s.raw_features.clone()).collect(), &bundle.segment_schema, &seg_keep);
    let (parcel_features, parcel_schema) =
        feature_matrix(bundle.parcels.iter().map(|r| r.raw_features.clone()).collect(), &bundle.parcel_schema, &parcel_keep);

    let graph = HomeGraph {
        segment_graph: MultiViewGraph { entity_type: EntityType::Segment, n: bundle.segments.len(), views: [s_geo, s_fun, s_mob] },
        parcel_graph: MultiViewGraph { entity_type: EntityType::Parcel, n: bundle.parcels.len(), views: [r_geo, r_fun, r_mob] },
        assignment: sr,
        segment_features,
        parcel_features,
        segment_schema,
        parcel_schema,
        sr_geometry,
        config,
    };
    graph.validate()?;
    Ok(graph)
}

#[derive(Debug, Serialize, Deserialize)]
struct GraphMeta {
    n_segments: usize,
    n_parcels: usize,
    edge_counts: std::collections::BTreeMap<String, usize>,
    segment_schema: Vec<FeatureSchema>,
    parcel_schema: Vec<FeatureSchema>,
    config: GraphConfig,
    content_hash: String,
}

pub fn save_home_graph(graph: &HomeGraph, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (name, text) in graph.tables() {
        let p = dir.join(name);
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    let meta = GraphMeta {
        n_segments: graph.n_segments(),
        n_parcels: graph.n_parcels(),
        edge_counts: Relation::ALL.iter().map(|r| (r.name().to_string(), graph.relation(*r).len())).collect(),
        segment_schema: graph.segment_schema.clone(),
        parcel_schema: graph.parcel_schema.clone(),
        config: graph.config.clone(),
        content_hash: graph.content_hash(),
    };
    let p = dir.join("meta.json");
    fs::write(&p, serde_json::to_string_pretty(&meta).expect("meta serializes")).map_err(|e| Error::io(&p, e))
}

fn read(dir: &Path, name: &str) -> Result<String> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(Error::MissingFile(p));
    }
    fs::read_to_string(&p).map_err(|e| Error::io(&p, e))
}

fn parse_rows(text: &str, file: &str, cols: usize) -> Result<Vec<Vec<String>>> {
    text.lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let f: Vec<String> = l.split(',').map(String::from).collect();
            if f.len() != cols {
                return Err(Error::parse(file, format!("expected {cols} columns in `{l}`")));
            }
            Ok(f)
        })
        .collect()
}

fn num<T: std::str::FromStr>(s: &str, file: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e| Error::parse(file, format!("`{s}`: {e}")))
}

fn read_nodes(dir: &Path, file: &str, n: usize, schema: &[FeatureSchema]) -> Result<Array2<f64>> {
    let rows = parse_rows(&read(dir, file)?, file, schema.len() + 1)?;
    if rows.len() != n {
        return Err(Error::parse(file, format!("expected {n} rows, found {}", rows.len())));
    }
    let mut x = Array2::zeros((n, schema.len()));
    for (i, r) in rows.iter().enumerate() {
        for k in 0..schema.len() {
            x[[i, k]] = num(&r[k + 1], file)?;
        }
    }
    Ok(x)
}

/// Reloads a graph written by [`save_home_graph`], verifying its content hash.
pub fn load_home_graph(dir: &Path) -> Result<HomeGraph> {
    let meta: GraphMeta = serde_json::from_str(&read(dir, "meta.json")?).map_err(|e| Error::parse("meta.json", e))?;
    let segment_features = read_nodes(dir, "nodes_segments.csv", meta.n_segments, &meta.segment_schema)?;
    let parcel_features = read_nodes(dir, "nodes_parcels.csv", meta.n_parcels, &meta.parcel_schema)?;
    let mut lists = Vec::new();
    for r in Relation::ALL {
        let file = format!("edges_{}.csv", r.name());
        let edges = parse_rows(&read(dir, &file)?, &file, 3)?
            .iter()
            .map(|f| Ok(Edge { src: num(&f[0], &file)?, dst: num(&f[1], &file)?, weight: num(&f[2], &file)? }))
            .collect::<Result<Vec<_>>>()?;
        lists.push(WeightedEdgeList { relation: r, edges });
    }
    let file = "sr_geometry.csv";
    let sr_geometry = parse_rows(&read(dir, file)?, file, 4)?
        .iter()
        .map(|f| {
            Ok(SrGeometry {
                parcel_id: num(&f[0], file)?,
                segment_id: num(&f[1], file)?,
                distance_m: num(&f[2], file)?,
                angle_rad: num(&f[3], file)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut it = lists.into_iter();
    let mut next = || it.next().unwrap();
    let graph = HomeGraph {
        segment_graph: MultiViewGraph { entity_type: EntityType::Segment, n: meta.n_segments, views: [next(), next(), next()] },
        parcel_graph: MultiViewGraph { entity_type: EntityType::Parcel, n: meta.n_parcels, views: [next(), next(), next()] },
        assignment: next(),
        segment_features,
        parcel_features,
        segment_schema: meta.segment_schema,
        parcel_schema: meta.parcel_schema,
        sr_geometry,
        config: meta.config,
    };
    graph.validate()?;
    let hash = graph.content_hash();
    if hash != meta.content_hash {
        return Err(Error::Validation(format!("graph content hash mismatch: meta {} vs files {hash}", meta.content_hash)));
    }
    Ok(graph)
}
