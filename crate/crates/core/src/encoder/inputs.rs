use std::f64::consts::TAU;
use std::rc::Rc;

use ndarray::Array2;

use crate::autodiff::Mat;
use crate::error::{Error, Result};
use crate::graph::{Edge, HomeGraph, Relation, WeightedEdgeList};
use crate::model::{EntityType, FeatureKind, FeatureSchema};

use super::EncoderConfig;

#[derive(Clone, Debug)]
pub enum FeatureColumn {
    Categorical { codes: Rc<Vec<usize>>, cardinality: usize },
    /// Standardized values as an `n x 1` column.
    Continuous { values: Mat },
}

/// Raw features of one entity type in the form the embedding layer consumes.
#[derive(Clone, Debug)]
pub struct EntityInputs {
    pub entity: EntityType,
    pub n: usize,
    pub names: Vec<String>,
    pub columns: Vec<FeatureColumn>,
}

impl EntityInputs {
    pub fn new(entity: EntityType, features: &Array2<f64>, schema: &[FeatureSchema]) -> Result<Self> {
        let n = features.nrows();
        if features.ncols() != schema.len() {
            return Err(Error::Validation(format!(
                "{} feature matrix has {} columns, schema lists {}",
                entity.as_str(),
                features.ncols(),
                schema.len()
            )));
        }
        let mut columns = Vec::with_capacity(schema.len());
        for (k, f) in schema.iter().enumerate() {
            let col = features.column(k);
            match f.kind {
                FeatureKind::Categorical { cardinality } => {
                    let mut codes = Vec::with_capacity(n);
                    for (i, &v) in col.iter().enumerate() {
                        if v < 0.0 || v.fract() != 0.0 || v as usize >= cardinality {
                            return Err(Error::Validation(format!(
                                "{} {i}: feature `{}` value {v} outside vocabulary of size {cardinality}",
                                entity.as_str(),
                                f.name
                            )));
                        }
                        codes.push(v as usize);
                    }
                    columns.push(FeatureColumn::Categorical { codes: Rc::new(codes), cardinality });
                }
                FeatureKind::Continuous { .. } => {
                    let mean = if n == 0 { 0.0 } else { col.sum() / n as f64 };
                    let var = if n == 0 { 0.0 } else { col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64 };
                    let std = if var > 0.0 { var.sqrt() } else { 1.0 };
                    let values = Mat::from_shape_fn((n, 1), |(i, _)| (col[i] - mean) / std);
                    columns.push(FeatureColumn::Continuous { values });
                }
            }
        }
        Ok(Self { entity, n, names: schema.iter().map(|f| f.name.clone()).collect(), columns })
    }

    /// Same features with rows reordered so that row `i` holds old row `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let columns = self
            .columns
            .iter()
            .map(|c| match c {
                FeatureColumn::Categorical { codes, cardinality } => FeatureColumn::Categorical {
                    codes: Rc::new(perm.iter().map(|&p| codes[p]).collect()),
                    cardinality: *cardinality,
                },
                FeatureColumn::Continuous { values } => {
                    FeatureColumn::Continuous { values: values.select(ndarray::Axis(0), perm) }
                }
            })
            .collect();
        Self { columns, ..self.clone() }
    }
}

/// Graph-derived inputs shared by every forward pass over one graph.
#[derive(Clone, Debug)]
pub struct GraphInputs {
    pub segments: EntityInputs,
    pub parcels: EntityInputs,
    /// Assigned (parcel, segment) pairs in `sr_geometry` order.
    pub sr_parcel: Rc<Vec<usize>>,
    pub sr_segment: Rc<Vec<usize>>,
    pub dist_bucket: Rc<Vec<usize>>,
    pub angle_bucket: Rc<Vec<usize>>,
    /// Upper-exclusive distance cut points between buckets.
    pub dist_cuts: Vec<f64>,
}

impl GraphInputs {
    pub fn new(graph: &HomeGraph, config: &EncoderConfig) -> Result<Self> {
        let segments = EntityInputs::new(EntityType::Segment, &graph.segment_features, &graph.segment_schema)?;
        let parcels = EntityInputs::new(EntityType::Parcel, &graph.parcel_features, &graph.parcel_schema)?;
        let dists: Vec<f64> = graph.sr_geometry.iter().map(|g| g.distance_m).collect();
        let dist_cuts = quantile_cuts(&dists, config.n_dist_buckets);
        let dist_bucket = dists.iter().map(|&d| dist_cuts.partition_point(|&c| c <= d)).collect();
        let angle_bucket =
            graph.sr_geometry.iter().map(|g| angle_bucket(g.angle_rad, config.n_angle_buckets)).collect();
        Ok(Self {
            segments,
            parcels,
            sr_parcel: Rc::new(graph.sr_geometry.iter().map(|g| g.parcel_id).collect()),
            sr_segment: Rc::new(graph.sr_geometry.iter().map(|g| g.segment_id).collect()),
            dist_bucket: Rc::new(dist_bucket),
            angle_bucket: Rc::new(angle_bucket),
            dist_cuts,
        })
    }

    pub fn n_segments(&self) -> usize {
        self.segments.n
    }

    pub fn n_parcels(&self) -> usize {
        self.parcels.n
    }

    pub fn entity(&self, e: EntityType) -> &EntityInputs {
        match e {
            EntityType::Segment => &self.segments,
            EntityType::Parcel => &self.parcels,
        }
    }
}

/// `n_buckets - 1` cut points at evenly spaced quantiles of `values`.
pub fn quantile_cuts(values: &[f64], n_buckets: usize) -> Vec<f64> {
    if values.is_empty() || n_buckets <= 1 {
        return Vec::new();
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    (1..n_buckets).map(|b| sorted[(b * sorted.len() / n_buckets).min(sorted.len() - 1)]).collect()
}

pub fn angle_bucket(angle: f64, n_buckets: usize) -> usize {
    let a = angle.rem_euclid(TAU);
    ((a / TAU * n_buckets as f64) as usize).min(n_buckets - 1)
}

/// Edge structure and feature masks seen by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphView {
    /// Indexed by `Relation::index`.
    pub relations: Vec<WeightedEdgeList>,
    /// Kept (1) or masked (0) flag per embedding-input dimension; `None` keeps all.
    pub segment_mask: Option<Vec<f64>>,
    pub parcel_mask: Option<Vec<f64>>,
}

impl GraphView {
    pub fn of(graph: &HomeGraph) -> Self {
        Self {
            relations: Relation::ALL.iter().map(|&r| graph.relation(r).clone()).collect(),
            segment_mask: None,
            parcel_mask: None,
        }
    }

    pub fn edges(&self, r: Relation) -> &[Edge] {
        &self.relations[r.index()].edges
    }

    pub fn mask(&self, e: EntityType) -> Option<&Vec<f64>> {
        match e {
            EntityType::Segment => self.segment_mask.as_ref(),
            EntityType::Parcel => self.parcel_mask.as_ref(),
        }
    }
}
