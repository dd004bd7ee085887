use serde::{Deserialize, Serialize};

use super::{Edge, Relation, WeightedEdgeList};
use crate::error::{Error, Result};
use crate::geometry::{direction_angle, point_boundary_distance, point_polyline_distance};
use crate::model::{nearest_by, LandParcel, RoadSegment};

/// Geometry of one assigned (parcel, segment) pair, used by the shape-attention bias.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SrGeometry {
    pub parcel_id: usize,
    pub segment_id: usize,
    /// Distance from the parcel centroid to the segment polyline, meters.
    pub distance_m: f64,
    /// Angle of the vector from segment midpoint to parcel centroid, in `[0, 2π)`.
    pub angle_rad: f64,
}

/// Links each segment to the parcel whose boundary is nearest to the segment
/// midpoint (ties to the lowest parcel id). Edges run segment -> parcel with weight 1.
pub fn assign_segments_to_parcels(
    segments: &[RoadSegment],
    parcels: &[LandParcel],
) -> Result<(WeightedEdgeList, Vec<SrGeometry>)> {
    if parcels.is_empty() {
        return Err(Error::Validation("cannot assign segments: no parcels".into()));
    }
    let mut edges = Vec::with_capacity(segments.len());
    let mut geometry = Vec::with_capacity(segments.len());
    for s in segments {
        let p = nearest_by(parcels.len(), |i| point_boundary_distance(s.midpoint, &parcels[i].polygon)).unwrap();
        let parcel = &parcels[p];
        edges.push(Edge { src: s.id, dst: p, weight: 1.0 });
        geometry.push(SrGeometry {
            parcel_id: p,
            segment_id: s.id,
            distance_m: point_polyline_distance(parcel.centroid, &s.polyline),
            angle_rad: direction_angle(s.midpoint, parcel.centroid),
        });
    }
    geometry.sort_by_key(|g| (g.parcel_id, g.segment_id));
    Ok((WeightedEdgeList::new(Relation::SR, edges), geometry))
}

/// Parcel of every segment, from an SR edge list.
pub fn parcel_of_segments(sr: &WeightedEdgeList, n_segments: usize) -> Vec<usize> {
    let mut out = vec![usize::MAX; n_segments];
    for e in &sr.edges {
        out[e.src] = e.dst;
    }
    out
}

/// Segments assigned to every parcel, ascending.
pub fn segments_of_parcels(sr: &WeightedEdgeList, n_parcels: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); n_parcels];
    for e in &sr.edges {
        out[e.dst].push(e.src);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{arc_length_midpoint, polygon_centroid, Point};
    use crate::synth::{generate_synthetic_city, SynthSpec};
    use std::f64::consts::PI;

    fn square(id: usize, x0: f64, y0: f64, side: f64) -> LandParcel {
        let polygon = vec![
            Point::new(x0, y0),
            Point::new(x0 + side, y0),
            Point::new(x0 + side, y0 + side),
            Point::new(x0, y0 + side),
            Point::new(x0, y0),
        ];
        LandParcel { id, centroid: polygon_centroid(&polygon), polygon, raw_features: vec![] }
    }

    fn seg(id: usize, a: Point, b: Point) -> RoadSegment {
        let polyline = vec![a, b];
        RoadSegment { id, midpoint: arc_length_midpoint(&polyline), polyline, raw_features: vec![] }
    }

    #[test]
    fn midpoint_on_boundary_and_east_angle() {
        let parcels = vec![square(0, 0.0, 0.0, 10.0), square(1, 30.0, 0.0, 10.0)];
        // vertical segment on the east edge of parcel 0
        let segs = vec![seg(0, Point::new(10.0, 0.0), Point::new(10.0, 10.0))];
        let (sr, geo) = assign_segments_to_parcels(&segs, &parcels).unwrap();
        assert_eq!(sr.edges[0].dst, 0);
        assert_eq!(geo[0].distance_m, 5.0);
        assert!((geo[0].angle_rad - PI).abs() < 1e-12);
        assert!(assign_segments_to_parcels(&segs, &[]).is_err());
    }

    #[test]
    fn grid_assignment_matches_brute_force() {
        let b = generate_synthetic_city(&SynthSpec { grid_w: 2, grid_h: 2, n_pois: 0, n_trajectories: 0, ..Default::default() })
            .unwrap();
        let (sr, _) = assign_segments_to_parcels(&b.segments, &b.parcels).unwrap();
        let parcel_of = parcel_of_segments(&sr, b.segments.len());
        for s in &b.segments {
            let d: Vec<f64> = b.parcels.iter().map(|r| point_boundary_distance(s.midpoint, &r.polygon)).collect();
            let min = d.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = d.iter().position(|&x| (x - min).abs() <= 1e-9 * min.max(1.0)).unwrap();
            assert_eq!(parcel_of[s.id], expect);
            // boundary segments map to a cell they border
            let c = b.parcels[expect].centroid;
            assert!(s.midpoint.dist(c) <= 50.0 + 1e-9);
        }
        assert_eq!(sr.len(), b.segments.len());
        assert!(segments_of_parcels(&sr, 4).iter().all(|v| !v.is_empty()));
    }
}
