//! Raw map entities and the bundle that aggregates one city.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{point_polyline_distance, polygon_area, Point};

/// Column order of segment raw features.
pub const SEGMENT_FEATURES: [&str; 6] = ["category", "length_m", "lanes", "max_speed", "lon", "lat"];
/// Column order of parcel raw features.
pub const PARCEL_FEATURES: [&str; 7] =
    ["function", "cbd_flag", "n_buildings", "avg_floors", "area_m2", "lon", "lat"];

pub const SEGMENT_CATEGORY_VOCAB: &str = "segment.category";
pub const PARCEL_FUNCTION_VOCAB: &str = "parcel.function";
pub const POI_CATEGORY_VOCAB: &str = "poi.category";
/// Reserved label for values not present in a vocabulary. Always the last entry.
pub const OTHER_LABEL: &str = "other";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: usize,
    pub polyline: Vec<Point>,
    pub midpoint: Point,
    pub raw_features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandParcel {
    pub id: usize,
    /// Closed ring: the first point is repeated at the end.
    pub polygon: Vec<Point>,
    pub centroid: Point,
    pub raw_features: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Poi {
    pub id: usize,
    pub location: Point,
    pub category: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SegmentTrajectory {
    pub id: usize,
    pub segment_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKind {
    Categorical { cardinality: usize },
    Continuous { min: f64, max: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub name: String,
    pub kind: FeatureKind,
}

impl FeatureSchema {
    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, FeatureKind::Categorical { .. })
    }
}

/// Label lists per categorical feature, keyed like `segment.category`.
pub type Vocab = BTreeMap<String, Vec<String>>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntityType {
    Segment,
    Parcel,
}

impl EntityType {
    pub fn as_str(self) -> &'static str {
        match self {
            EntityType::Segment => "segment",
            EntityType::Parcel => "parcel",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapBundle {
    pub segments: Vec<RoadSegment>,
    pub parcels: Vec<LandParcel>,
    pub pois: Vec<Poi>,
    pub trajectories: Vec<SegmentTrajectory>,
    pub segment_schema: Vec<FeatureSchema>,
    pub parcel_schema: Vec<FeatureSchema>,
    pub vocab: Vocab,
}

impl MapBundle {
    pub fn poi_vocab_size(&self) -> usize {
        self.vocab.get(POI_CATEGORY_VOCAB).map_or(0, Vec::len)
    }

    /// Checks every structural invariant of the bundle.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.segments.iter().enumerate() {
            if s.id != i {
                return Err(Error::Validation(format!("segment ids not dense: position {i} has id {}", s.id)));
            }
            if s.polyline.len() < 2 {
                return Err(Error::Validation(format!("segment {i} polyline has fewer than 2 points")));
            }
            if s.raw_features.len() != self.segment_schema.len() {
                return Err(Error::Validation(format!("segment {i} has {} features", s.raw_features.len())));
            }
            check_codes(&s.raw_features, &self.segment_schema, "segment", i)?;
        }
        for (i, r) in self.parcels.iter().enumerate() {
            if r.id != i {
                return Err(Error::Validation(format!("parcel ids not dense: position {i} has id {}", r.id)));
            }
            if r.polygon.len() < 4 || r.polygon.first() != r.polygon.last() {
                return Err(Error::Validation(format!("parcel {i} polygon ring is not closed")));
            }
            if polygon_area(&r.polygon) <= 0.0 {
                return Err(Error::Validation(format!("parcel {i} has zero area")));
            }
            if r.raw_features.len() != self.parcel_schema.len() {
                return Err(Error::Validation(format!("parcel {i} has {} features", r.raw_features.len())));
            }
            check_codes(&r.raw_features, &self.parcel_schema, "parcel", i)?;
        }
        let vocab = self.poi_vocab_size();
        for (i, p) in self.pois.iter().enumerate() {
            if p.id != i {
                return Err(Error::Validation(format!("poi ids not dense: position {i} has id {}", p.id)));
            }
            if p.category >= vocab {
                return Err(Error::Validation(format!("poi {i} category {} outside vocabulary", p.category)));
            }
        }
        let mut offenders = Vec::new();
        for t in &self.trajectories {
            for &s in &t.segment_ids {
                if s >= self.segments.len() {
                    offenders.push(format!("trajectory {} -> segment {s}", t.id));
                }
            }
        }
        if !offenders.is_empty() {
            return Err(Error::Validation(format!("dangling trajectory segment ids: {}", offenders.join(", "))));
        }
        let mut seen = HashSet::new();
        for t in &self.trajectories {
            if !seen.insert(t.id) {
                return Err(Error::Validation(format!("duplicate trajectory id {}", t.id)));
            }
        }
        Ok(())
    }
}

fn check_codes(values: &[f64], schema: &[FeatureSchema], what: &str, id: usize) -> Result<()> {
    for (v, f) in values.iter().zip(schema) {
        if !v.is_finite() {
            return Err(Error::Validation(format!("{what} {id} feature {} is not finite", f.name)));
        }
        if let FeatureKind::Categorical { cardinality } = f.kind {
            if v.fract() != 0.0 || *v < 0.0 || *v as usize >= cardinality {
                return Err(Error::Validation(format!(
                    "{what} {id} feature {} code {v} outside 0..{cardinality}",
                    f.name
                )));
            }
        }
    }
    Ok(())
}

/// Builds a schema for `names`, treating the listed names as categorical with the given
/// cardinalities and every other column as continuous with its observed range.
/// Chronological train/validation/test split of `n` trajectories at 6:2:2.
/// Trajectory order in the bundle is taken as time order.
pub fn chronological_split(n: usize) -> [std::ops::Range<usize>; 3] {
    let a = n * 6 / 10;
    let b = n * 8 / 10;
    [0..a, a..b, b..n]
}

pub fn infer_schema(names: &[&str], rows: &[Vec<f64>], categorical: &[(&str, usize)]) -> Vec<FeatureSchema> {
    names
        .iter()
        .enumerate()
        .map(|(k, &name)| {
            let kind = match categorical.iter().find(|(n, _)| *n == name) {
                Some(&(_, cardinality)) => FeatureKind::Categorical { cardinality },
                None => {
                    let (min, max) = rows.iter().map(|r| r[k]).fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                        (lo.min(v), hi.max(v))
                    });
                    if rows.is_empty() {
                        FeatureKind::Continuous { min: 0.0, max: 0.0 }
                    } else {
                        FeatureKind::Continuous { min, max }
                    }
                }
            };
            FeatureSchema { name: name.to_string(), kind }
        })
        .collect()
}

/// Id of the segment nearest to `point`; ties go to the lowest id.
pub fn snap_point_to_segment(point: Point, segments: &[RoadSegment]) -> Result<usize> {
    nearest_by(segments.len(), |i| point_polyline_distance(point, &segments[i].polyline))
        .ok_or_else(|| Error::Validation("cannot snap to an empty segment set".into()))
}

/// Relative tolerance under which two distances are treated as a tie.
pub(crate) const TIE_TOLERANCE: f64 = 1e-9;

/// Index minimizing `dist`, resolving near-ties (within [`TIE_TOLERANCE`]) to the lowest index.
pub(crate) fn nearest_by(n: usize, mut dist: impl FnMut(usize) -> f64) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for i in 0..n {
        let d = dist(i);
        match best {
            Some((_, bd)) if d >= bd - TIE_TOLERANCE * bd.abs().max(1.0) => {}
            _ => best = Some((i, d)),
        }
    }
    best.map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::arc_length_midpoint;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seg(id: usize, a: (f64, f64), b: (f64, f64)) -> RoadSegment {
        let polyline = vec![Point::new(a.0, a.1), Point::new(b.0, b.1)];
        RoadSegment { id, midpoint: arc_length_midpoint(&polyline), polyline, raw_features: vec![] }
    }

    #[test]
    fn snap_to_midpoint_and_tie_rule() {
        let segs: Vec<_> = (0..10)
            .map(|i| {
                let x = i as f64 * 10.0;
                seg(i, (x, 0.0), (x, 5.0))
            })
            .collect();
        assert_eq!(snap_point_to_segment(segs[4].midpoint, &segs).unwrap(), 4);
        // equidistant between the segments at x=30 and x=70 only when the others are removed
        let pair = vec![seg(3, (30.0, 0.0), (30.0, 5.0)), seg(7, (70.0, 0.0), (70.0, 5.0))];
        let pair: Vec<_> = pair.into_iter().enumerate().map(|(i, mut s)| {
            s.id = i;
            s
        }).collect();
        assert_eq!(snap_point_to_segment(Point::new(50.0, 2.0), &pair).unwrap(), 0);
        assert!(snap_point_to_segment(Point::new(0.0, 0.0), &[]).is_err());
    }

    #[test]
    fn snap_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let segs: Vec<_> = (0..25)
            .map(|i| {
                let a = (rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0));
                let b = (rng.gen_range(0.0..500.0), rng.gen_range(0.0..500.0));
                seg(i, a, b)
            })
            .collect();
        for _ in 0..100 {
            let p = Point::new(rng.gen_range(-50.0..550.0), rng.gen_range(-50.0..550.0));
            let dists: Vec<f64> = segs
                .iter()
                .map(|s| crate::geometry::point_segment_distance(p, s.polyline[0], s.polyline[1]))
                .collect();
            let min = dists.iter().cloned().fold(f64::INFINITY, f64::min);
            let expect = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(snap_point_to_segment(p, &segs).unwrap(), expect);
        }
    }
}
