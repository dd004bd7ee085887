//! Intra-entity views, the segment-parcel assignment, and the assembled
//! heterogeneous map-entity graph.

mod assign;
mod function;
mod geo;
mod home;
mod mobility;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use assign::{assign_segments_to_parcels, parcel_of_segments, segments_of_parcels, SrGeometry};
pub use function::{build_function_graph, compute_tfidf, match_pois, tfidf_from_documents, TfidfTable};
pub use geo::{build_parcel_geo, build_segment_geo, default_epsilon_r, segment_topology};
pub use home::{assemble_home_graph, load_home_graph, save_home_graph, GraphConfig, HomeGraph, MultiViewGraph};
pub use mobility::{build_parcel_mobility, build_segment_mobility, parcel_sequence, transfer_probabilities};

use crate::model::EntityType;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Relation {
    SGeo,
    SFun,
    SMob,
    RGeo,
    RFun,
    RMob,
    /// Segment to its nearest parcel; the back connection is implied.
    SR,
}

impl Relation {
    pub const ALL: [Relation; 7] =
        [Relation::SGeo, Relation::SFun, Relation::SMob, Relation::RGeo, Relation::RFun, Relation::RMob, Relation::SR];
    pub const SEGMENT_VIEWS: [Relation; 3] = [Relation::SGeo, Relation::SFun, Relation::SMob];
    pub const PARCEL_VIEWS: [Relation; 3] = [Relation::RGeo, Relation::RFun, Relation::RMob];

    pub fn name(self) -> &'static str {
        match self {
            Relation::SGeo => "s_geo",
            Relation::SFun => "s_fun",
            Relation::SMob => "s_mob",
            Relation::RGeo => "r_geo",
            Relation::RFun => "r_fun",
            Relation::RMob => "r_mob",
            Relation::SR => "sr",
        }
    }

    pub fn index(self) -> usize {
        Relation::ALL.iter().position(|&r| r == self).unwrap()
    }

    /// Entity type of the endpoints of an intra-entity relation.
    pub fn entity(self) -> Option<EntityType> {
        match self {
            Relation::SGeo | Relation::SFun | Relation::SMob => Some(EntityType::Segment),
            Relation::RGeo | Relation::RFun | Relation::RMob => Some(EntityType::Parcel),
            Relation::SR => None,
        }
    }

    pub fn views_of(entity: EntityType) -> [Relation; 3] {
        match entity {
            EntityType::Segment => Self::SEGMENT_VIEWS,
            EntityType::Parcel => Self::PARCEL_VIEWS,
        }
    }
}

impl fmt::Display for Relation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Relation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Relation::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| format!("unknown relation `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub src: usize,
    pub dst: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightedEdgeList {
    pub relation: Relation,
    /// Sorted by `(src, dst)`, no duplicates.
    pub edges: Vec<Edge>,
}

impl WeightedEdgeList {
    pub fn new(relation: Relation, mut edges: Vec<Edge>) -> Self {
        edges.sort_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));
        edges.dedup_by(|a, b| a.src == b.src && a.dst == b.dst);
        Self { relation, edges }
    }

    pub fn empty(relation: Relation) -> Self {
        Self { relation, edges: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }

    pub fn weight(&self, src: usize, dst: usize) -> Option<f64> {
        self.edges
            .binary_search_by(|e| (e.src, e.dst).cmp(&(src, dst)))
            .ok()
            .map(|i| self.edges[i].weight)
    }

    /// Sum of outgoing weights per source node.
    pub fn out_weight_sums(&self, n: usize) -> Vec<f64> {
        let mut sums = vec![0.0; n];
        for e in &self.edges {
            sums[e.src] += e.weight;
        }
        sums
    }
}

/// Min-max normalization over present edges. A single edge, or edges that all
/// share one weight, normalize to 1.0.
pub fn min_max_normalize(edges: &mut [Edge]) {
    let (lo, hi) = edges.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), e| (lo.min(e.weight), hi.max(e.weight)));
    if edges.is_empty() {
        return;
    }
    if hi == lo {
        edges.iter_mut().for_each(|e| e.weight = 1.0);
        return;
    }
    for e in edges.iter_mut() {
        e.weight = (e.weight - lo) / (hi - lo);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_normalization() {
        let mut one = vec![Edge { src: 0, dst: 1, weight: 0.3 }];
        min_max_normalize(&mut one);
        assert_eq!(one[0].weight, 1.0);
        let mut same = vec![Edge { src: 0, dst: 1, weight: 0.3 }, Edge { src: 1, dst: 0, weight: 0.3 }];
        min_max_normalize(&mut same);
        assert!(same.iter().all(|e| e.weight == 1.0));
    }

    #[test]
    fn relation_names_round_trip() {
        for r in Relation::ALL {
            assert_eq!(r.name().parse::<Relation>().unwrap(), r);
            assert_eq!(Relation::ALL[r.index()], r);
        }
    }
}
