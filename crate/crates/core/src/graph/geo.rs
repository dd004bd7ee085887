use std::collections::BTreeMap;

use super::{min_max_normalize, Edge, Relation, WeightedEdgeList};
use crate::model::{LandParcel, RoadSegment};

/// Directed pairs of distinct segments whose polylines share an end point.
pub fn segment_topology(segments: &[RoadSegment]) -> Vec<(usize, usize)> {
    let mut at: BTreeMap<(u64, u64), Vec<usize>> = BTreeMap::new();
    for s in segments {
        let (a, b) = (s.polyline[0], *s.polyline.last().unwrap());
        at.entry((a.x.to_bits(), a.y.to_bits())).or_default().push(s.id);
        if a != b {
            at.entry((b.x.to_bits(), b.y.to_bits())).or_default().push(s.id);
        }
    }
    let mut pairs: Vec<(usize, usize)> = at
        .values()
        .flat_map(|ids| ids.iter().flat_map(move |&i| ids.iter().filter(move |&&j| j != i).map(move |&j| (i, j))))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    pairs
}

/// Connected segments weighted by inverse midpoint distance, then min-max normalized.
pub fn build_segment_geo(segments: &[RoadSegment], topology: &[(usize, usize)], epsilon: f64) -> WeightedEdgeList {
    let mut edges: Vec<Edge> = topology
        .iter()
        .filter(|(i, j)| i != j)
        .map(|&(i, j)| Edge { src: i, dst: j, weight: 1.0 / (segments[i].midpoint.dist(segments[j].midpoint) + epsilon) })
        .collect();
    edges.sort_by(|a, b| (a.src, a.dst).cmp(&(b.src, b.dst)));
    edges.dedup_by(|a, b| a.src == b.src && a.dst == b.dst);
    min_max_normalize(&mut edges);
    WeightedEdgeList::new(Relation::SGeo, edges)
}

/// Parcel pairs with centroid distance at most `epsilon_r`, in both directions.
pub fn build_parcel_geo(parcels: &[LandParcel], epsilon: f64, epsilon_r: f64) -> WeightedEdgeList {
    let mut edges = Vec::new();
    for a in parcels {
        for b in parcels {
            if a.id == b.id {
                continue;
            }
            let d = a.centroid.dist(b.centroid);
            if d <= epsilon_r {
                edges.push(Edge { src: a.id, dst: b.id, weight: 1.0 / (d + epsilon) });
            }
        }
    }
    min_max_normalize(&mut edges);
    WeightedEdgeList::new(Relation::RGeo, edges)
}

/// Twice the median nearest-neighbor centroid distance.
pub fn default_epsilon_r(parcels: &[LandParcel]) -> f64 {
    if parcels.len() < 2 {
        return 1.0;
    }
    let mut nn: Vec<f64> = parcels
        .iter()
        .map(|a| {
            parcels
                .iter()
                .filter(|b| b.id != a.id)
                .map(|b| a.centroid.dist(b.centroid))
                .fold(f64::INFINITY, f64::min)
        })
        .collect();
    nn.sort_by(f64::total_cmp);
    let m = nn.len();
    let median = if m % 2 == 1 { nn[m / 2] } else { (nn[m / 2 - 1] + nn[m / 2]) / 2.0 };
    2.0 * median
}
