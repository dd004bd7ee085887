//! Seeded grid-city generator with planted parcel function classes.
//!
//! Parcels are the cell interiors of a `grid_w x grid_h` street grid. Function
//! classes form contiguous Voronoi zones; class drives parcel building stock,
//! POI category mix, road categories and trajectory routing.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{arc_length_midpoint, polygon_area, polygon_centroid, polyline_length, Point};
use crate::model::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub grid_w: usize,
    pub grid_h: usize,
    pub cell_size_m: f64,
    pub n_pois: usize,
    pub n_trajectories: usize,
    pub n_function_classes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self { grid_w: 8, grid_h: 8, cell_size_m: 100.0, n_pois: 1200, n_trajectories: 600, n_function_classes: 5, seed: 0 }
    }
}

pub const ROAD_CATEGORIES: [&str; 4] = ["arterial", "collector", "local", "service"];
/// Every fourth grid line (and the outer ring) carries arterial roads.
const ARTERIAL_EVERY: usize = 4;
/// Parcel polygons are inset from the street centerlines by this fraction of a cell.
const ROAD_INSET: f64 = 0.05;
/// Probability that a POI is drawn from its parcel's preferred category block.
const POI_AFFINITY: f64 = 0.7;
/// Routing weight for a step that keeps a walk inside its home function class.
const SAME_ZONE_WEIGHT: f64 = 4.0;

pub fn segment_count(grid_w: usize, grid_h: usize) -> usize {
    grid_h * (grid_w + 1) + grid_w * (grid_h + 1)
}

pub fn poi_vocab_len(n_classes: usize) -> usize {
    (4 * n_classes).max(8)
}

/// Planted function class of every parcel, in parcel id order.
pub fn planted_classes(bundle: &MapBundle) -> Vec<usize> {
    bundle.parcels.iter().map(|r| r.raw_features[0] as usize).collect()
}

pub fn generate_synthetic_city(spec: &SynthSpec) -> Result<MapBundle> {
    let (w, h) = (spec.grid_w, spec.grid_h);
    if w < 2 || h < 2 {
        return Err(Error::Validation(format!("synthetic grid must be at least 2x2, got {w}x{h}")));
    }
    if !(spec.cell_size_m > 0.0) || spec.n_function_classes == 0 {
        return Err(Error::Validation("cell_size_m must be positive and n_function_classes >= 1".into()));
    }
    let c = spec.cell_size_m;
    let n_classes = spec.n_function_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // zones
    let n_parcels = w * h;
    let mut cells: Vec<usize> = (0..n_parcels).collect();
    cells.shuffle(&mut rng);
    let seeds: Vec<(f64, f64)> = (0..n_classes)
        .map(|k| {
            let cell = cells[k % n_parcels];
            ((cell % w) as f64 + rng.gen_range(-0.3..0.3), (cell / w) as f64 + rng.gen_range(-0.3..0.3))
        })
        .collect();
    let class_of: Vec<usize> = (0..n_parcels)
        .map(|p| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            (0..n_classes)
                .min_by(|&a, &b| {
                    let da = (x - seeds[a].0).powi(2) + (y - seeds[a].1).powi(2);
                    let db = (x - seeds[b].0).powi(2) + (y - seeds[b].1).powi(2);
                    da.total_cmp(&db).then(a.cmp(&b))
                })
                .unwrap()
        })
        .collect();

    // per-class building stock
    let stock: Vec<(f64, f64)> = (0..n_classes).map(|_| (rng.gen_range(3.0..40.0), rng.gen_range(1.0..20.0))).collect();

    let center = Point::new(w as f64 * c / 2.0, h as f64 * c / 2.0);
    let cbd_radius = 0.25 * (w.min(h) as f64) * c;
    let inset = ROAD_INSET * c;
    let parcels: Vec<LandParcel> = (0..n_parcels)
        .map(|id| {
            let (i, j) = ((id % w) as f64, (id / w) as f64);
            let (x0, y0, x1, y1) = (i * c + inset, j * c + inset, (i + 1.0) * c - inset, (j + 1.0) * c - inset);
            let polygon = vec![
                Point::new(x0, y0),
                Point::new(x1, y0),
                Point::new(x1, y1),
                Point::new(x0, y1),
                Point::new(x0, y0),
            ];
            let centroid = polygon_centroid(&polygon);
            let class = class_of[id];
            let (bmean, fmean) = stock[class];
            let n_buildings = (bmean * rng.gen_range(0.7..1.3)).round();
            let avg_floors = (fmean * rng.gen_range(0.8..1.2) * 10.0).round() / 10.0;
            let cbd = if centroid.dist(center) <= cbd_radius { 1.0 } else { 0.0 };
            let raw_features =
                vec![class as f64, cbd, n_buildings, avg_floors, polygon_area(&polygon), centroid.x, centroid.y];
            LandParcel { id, polygon, centroid, raw_features }
        })
        .collect();

    // segments: horizontal rows first, then vertical columns
    let mut ends: Vec<((usize, usize), (usize, usize))> = Vec::with_capacity(segment_count(w, h));
    for j in 0..=h {
        for i in 0..w {
            ends.push(((i, j), (i + 1, j)));
        }
    }
    for i in 0..=w {
        for j in 0..h {
            ends.push(((i, j), (i, j + 1)));
        }
    }
    // lowest-id adjacent parcel gives the zone of a segment
    let zone_of: Vec<usize> = ends
        .iter()
        .map(|&((i0, j0), (i1, _))| {
            let mut adj = Vec::new();
            if i1 > i0 {
                if j0 > 0 {
                    adj.push((j0 - 1) * w + i0);
                }
                if j0 < h {
                    adj.push(j0 * w + i0);
                }
            } else {
                if i0 > 0 {
                    adj.push(j0 * w + i0 - 1);
                }
                if i0 < w {
                    adj.push(j0 * w + i0);
                }
            }
            class_of[*adj.iter().min().unwrap()]
        })
        .collect();
    let segments: Vec<RoadSegment> = ends
        .iter()
        .enumerate()
        .map(|(id, &((i0, j0), (i1, j1)))| {
            let polyline = vec![Point::new(i0 as f64 * c, j0 as f64 * c), Point::new(i1 as f64 * c, j1 as f64 * c)];
            let line_index = if i1 > i0 { j0 } else { i0 };
            let on_arterial = line_index % ARTERIAL_EVERY == 0 || line_index == if i1 > i0 { h } else { w };
            let category = if on_arterial {
                0
            } else if rng.gen_bool(0.75) {
                1 + zone_of[id] % 3
            } else {
                rng.gen_range(1..4)
            };
            let (base_lanes, base_speed) = [(4.0, 80.0), (3.0, 60.0), (2.0, 40.0), (1.0, 20.0)][category];
            let lanes = base_lanes + if rng.gen_bool(0.2) { 1.0 } else { 0.0 };
            let max_speed = base_speed + rng.gen_range(-1i32..=1) as f64 * 5.0;
            let midpoint = arc_length_midpoint(&polyline);
            let raw_features =
                vec![category as f64, polyline_length(&polyline), lanes, max_speed, midpoint.x, midpoint.y];
            RoadSegment { id, polyline, midpoint, raw_features }
        })
        .collect();

    // POIs
    let vocab_len = poi_vocab_len(n_classes);
    let pois: Vec<Poi> = (0..spec.n_pois)
        .map(|id| {
            let parcel = &parcels[rng.gen_range(0..n_parcels)];
            let (lo, hi) = (parcel.polygon[0], parcel.polygon[2]);
            let location = Point::new(rng.gen_range(lo.x..hi.x), rng.gen_range(lo.y..hi.y));
            let class = class_of[parcel.id];
            let category = if rng.gen_bool(POI_AFFINITY) {
                let block: Vec<usize> = (0..vocab_len).filter(|k| k % n_classes == class).collect();
                *block.choose(&mut rng).unwrap()
            } else {
                rng.gen_range(0..vocab_len)
            };
            Poi { id, location, category }
        })
        .collect();

    // trajectories: class-biased random walks over shared intersections
    let mut at_node: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (id, &(a, b)) in ends.iter().enumerate() {
        at_node.entry(a).or_default().push(id);
        at_node.entry(b).or_default().push(id);
    }
    let neighbors: Vec<Vec<usize>> = ends
        .iter()
        .enumerate()
        .map(|(id, &(a, b))| {
            let mut n: Vec<usize> = at_node[&a].iter().chain(&at_node[&b]).copied().filter(|&o| o != id).collect();
            n.sort_unstable();
            n.dedup();
            n
        })
        .collect();
    let trajectories: Vec<SegmentTrajectory> = (0..spec.n_trajectories)
        .map(|id| {
            let start = rng.gen_range(0..segments.len());
            let home = zone_of[start];
            let len = rng.gen_range(4..=12);
            let mut path = vec![start];
            while path.len() < len {
                let cur = *path.last().unwrap();
                let prev = if path.len() >= 2 { Some(path[path.len() - 2]) } else { None };
                let options: Vec<usize> = neighbors[cur].iter().copied().filter(|&n| Some(n) != prev).collect();
                let weights: Vec<f64> =
                    options.iter().map(|&n| if zone_of[n] == home { SAME_ZONE_WEIGHT } else { 1.0 }).collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.gen_range(0.0..total);
                let mut next = *options.last().unwrap();
                for (&o, &wt) in options.iter().zip(&weights) {
                    if u < wt {
                        next = o;
                        break;
                    }
                    u -= wt;
                }
                path.push(next);
            }
            SegmentTrajectory { id, segment_ids: path }
        })
        .collect();

    let mut vocab = Vocab::new();
    vocab.insert(
        SEGMENT_CATEGORY_VOCAB.into(),
        ROAD_CATEGORIES.iter().map(|s| s.to_string()).chain([OTHER_LABEL.to_string()]).collect(),
    );
    vocab.insert(
        PARCEL_FUNCTION_VOCAB.into(),
        (0..n_classes).map(|k| format!("function_{k}")).chain([OTHER_LABEL.to_string()]).collect(),
    );
    vocab.insert(
        POI_CATEGORY_VOCAB.into(),
        (0..vocab_len).map(|k| format!("poi_{k}")).chain([OTHER_LABEL.to_string()]).collect(),
    );

    let seg_feats: Vec<Vec<f64>> = segments.iter().map(|s| s.raw_features.clone()).collect();
    let parcel_feats: Vec<Vec<f64>> = parcels.iter().map(|r| r.raw_features.clone()).collect();
    let bundle = MapBundle {
        segment_schema: infer_schema(&SEGMENT_FEATURES, &seg_feats, &[("category", vocab[SEGMENT_CATEGORY_VOCAB].len())]),
        parcel_schema: infer_schema(
            &PARCEL_FEATURES,
            &parcel_feats,
            &[("function", vocab[PARCEL_FUNCTION_VOCAB].len()), ("cbd_flag", 2)],
        ),
        segments,
        parcels,
        pois,
        trajectories,
        vocab,
    };
    bundle.validate()?;
    Ok(bundle)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::point_in_polygon;

    #[test]
    fn two_by_two_counts() {
        let b = generate_synthetic_city(&SynthSpec {
            grid_w: 2,
            grid_h: 2,
            cell_size_m: 100.0,
            n_pois: 0,
            n_trajectories: 0,
            n_function_classes: 1,
            seed: 0,
        })
        .unwrap();
        assert_eq!(b.parcels.len(), 4);
        assert_eq!(b.segments.len(), 2 * 3 + 2 * 3);
        assert_eq!(b.segments.len(), segment_count(2, 2));
    }

    #[test]
    fn degenerate_grid_rejected() {
        let spec = SynthSpec { grid_w: 1, grid_h: 1, ..SynthSpec::default() };
        assert!(generate_synthetic_city(&spec).is_err());
    }

    #[test]
    fn deterministic_for_seed() {
        let spec = SynthSpec { grid_w: 4, grid_h: 3, seed: 9, ..SynthSpec::default() };
        let a = serde_json::to_vec(&generate_synthetic_city(&spec).unwrap()).unwrap();
        let b = serde_json::to_vec(&generate_synthetic_city(&spec).unwrap()).unwrap();
        assert_eq!(a, b);
        let other = serde_json::to_vec(&generate_synthetic_city(&SynthSpec { seed: 10, ..spec }).unwrap()).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn parcels_are_axis_aligned_rectangles_and_pois_inside() {
        let b = generate_synthetic_city(&SynthSpec { grid_w: 5, grid_h: 4, ..SynthSpec::default() }).unwrap();
        for r in &b.parcels {
            assert_eq!(r.polygon.len(), 5);
            for w in r.polygon.windows(2) {
                assert!(w[0].x == w[1].x || w[0].y == w[1].y, "edge not axis-aligned");
            }
        }
        for p in &b.pois {
            assert!(b.parcels.iter().any(|r| point_in_polygon(p.location, &r.polygon)));
        }
        for t in &b.trajectories {
            assert!(t.segment_ids.len() >= 4);
        }
    }

    #[test]
    fn midpoints_are_arc_length_centers() {
        let b = generate_synthetic_city(&SynthSpec { grid_w: 3, grid_h: 3, ..SynthSpec::default() }).unwrap();
        for s in &b.segments {
            let (a, z) = (s.polyline[0], s.polyline[1]);
            assert_eq!(s.midpoint, Point::new((a.x + z.x) / 2.0, (a.y + z.y) / 2.0));
        }
    }

    /// Class-conditioned POI histograms must carry far more dependence than chance.
    #[test]
    fn poi_categories_depend_on_planted_class() {
        let spec = SynthSpec { grid_w: 8, grid_h: 8, n_pois: 2000, n_function_classes: 5, seed: 3, ..SynthSpec::default() };
        let b = generate_synthetic_city(&spec).unwrap();
        let classes = planted_classes(&b);
        let v = b.poi_vocab_size();
        let c = spec.n_function_classes;
        let mut table = vec![vec![0.0f64; v]; c];
        for p in &b.pois {
            let parcel = b.parcels.iter().find(|r| point_in_polygon(p.location, &r.polygon)).unwrap();
            table[classes[parcel.id]][p.category] += 1.0;
        }
        let n: f64 = table.iter().flatten().sum();
        let row: Vec<f64> = table.iter().map(|r| r.iter().sum()).collect();
        let col: Vec<f64> = (0..v).map(|k| table.iter().map(|r| r[k]).sum()).collect();
        let mut chi2 = 0.0;
        let mut df = 0usize;
        for i in 0..c {
            for k in 0..v {
                let e = row[i] * col[k] / n;
                if e > 0.0 {
                    chi2 += (table[i][k] - e).powi(2) / e;
                }
            }
        }
        let nonempty_rows = row.iter().filter(|&&r| r > 0.0).count();
        let nonempty_cols = col.iter().filter(|&&x| x > 0.0).count();
        df += (nonempty_rows - 1) * (nonempty_cols - 1);
        // independence gives chi2 ~ df with sd sqrt(2 df)
        let baseline = df as f64 + 5.0 * (2.0 * df as f64).sqrt();
        assert!(chi2 > baseline, "chi2 {chi2} vs baseline {baseline}");
    }
}
