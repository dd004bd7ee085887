//! Frozen-embedding probes: entity classification, flow and OD regression,
//! and segment/parcel cluster consistency.

mod classify;
mod cluster;
mod regress;
mod targets;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classify::{macro_f1, majority_label, micro_f1, ClassifierConfig, SoftmaxClassifier};
pub use cluster::{adjusted_rand, cluster_consistency, kmeans, nmi, KMeans, KMeansConfig};
pub use regress::{mae_rmse, Bilinear, BilinearConfig, Ridge};
pub use targets::{derive_flow_and_od, FlowTargets};

use crate::autodiff::Mat;
use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::graph::{assign_segments_to_parcels, parcel_of_segments};
use crate::model::{chronological_split, EntityType, MapBundle};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ClassifySegments,
    ClassifyParcels,
    FlowSegments,
    FlowParcels,
    OdSegments,
    OdParcels,
    ClusterConsistency,
}

impl TaskKind {
    pub const ALL: [TaskKind; 7] = [
        TaskKind::ClassifySegments,
        TaskKind::ClassifyParcels,
        TaskKind::FlowSegments,
        TaskKind::FlowParcels,
        TaskKind::OdSegments,
        TaskKind::OdParcels,
        TaskKind::ClusterConsistency,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskKind::ClassifySegments => "classify_segments",
            TaskKind::ClassifyParcels => "classify_parcels",
            TaskKind::FlowSegments => "flow_segments",
            TaskKind::FlowParcels => "flow_parcels",
            TaskKind::OdSegments => "od_segments",
            TaskKind::OdParcels => "od_parcels",
            TaskKind::ClusterConsistency => "cluster_consistency",
        }
    }

    pub fn entity(self) -> Option<EntityType> {
        match self {
            TaskKind::ClassifySegments | TaskKind::FlowSegments | TaskKind::OdSegments => Some(EntityType::Segment),
            TaskKind::ClassifyParcels | TaskKind::FlowParcels | TaskKind::OdParcels => Some(EntityType::Parcel),
            TaskKind::ClusterConsistency => None,
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}; expected one of {}", TaskKind::ALL.map(|t| t.name()).join(", "))))
    }
}

/// Raw feature column holding the classification label of each entity type.
pub fn label_feature(entity: EntityType) -> &'static str {
    match entity {
        EntityType::Segment => "category",
        EntityType::Parcel => "function",
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub tasks: Vec<TaskKind>,
    pub folds: usize,
    pub seed: u64,
    pub ridge_lambda: f64,
    pub classifier: ClassifierConfig,
    pub bilinear: BilinearConfig,
    pub kmeans: KMeansConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            tasks: TaskKind::ALL.to_vec(),
            folds: 5,
            seed: 0,
            ridge_lambda: 1.0,
            classifier: ClassifierConfig::default(),
            bilinear: BilinearConfig::default(),
            kmeans: KMeansConfig::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("eval.{m}")));
        if self.tasks.is_empty() {
            return bad("tasks must not be empty");
        }
        if self.folds < 2 {
            return bad("folds must be at least 2");
        }
        if !(self.ridge_lambda >= 0.0) {
            return bad("ridge_lambda must be non-negative");
        }
        if self.classifier.steps == 0 || !(self.classifier.learning_rate > 0.0) || !(self.classifier.l2 >= 0.0) {
            return bad("classifier needs steps > 0, learning_rate > 0 and l2 >= 0");
        }
        if self.bilinear.steps == 0 || !(self.bilinear.learning_rate > 0.0) {
            return bad("bilinear needs steps > 0 and learning_rate > 0");
        }
        if self.kmeans.k < 2 || self.kmeans.restarts == 0 || self.kmeans.max_iter == 0 {
            return bad("kmeans needs k >= 2, restarts >= 1 and max_iter >= 1");
        }
        Ok(())
    }
}

/// Seeded shuffled partition of `0..n` into `k` near-equal test folds.
pub fn kfold(n: usize, k: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if k < 2 || n < k {
        return Err(Error::Eval(format!("{k}-fold split needs k >= 2 and at least k items, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k).map(|f| idx[f * n / k..(f + 1) * n / k].to_vec()).collect())
}

fn complement(n: usize, test: &[usize]) -> Vec<usize> {
    let mut keep = vec![true; n];
    test.iter().for_each(|&i| keep[i] = false);
    (0..n).filter(|&i| keep[i]).collect()
}

fn take_rows(x: &Mat, idx: &[usize]) -> Mat {
    x.select(ndarray::Axis(0), idx)
}

pub type Metrics = BTreeMap<String, f64>;

fn mean_metrics(folds: &[Metrics]) -> Metrics {
    let mut out = Metrics::new();
    for m in folds {
        for (k, v) in m {
            *out.entry(k.clone()).or_default() += v / folds.len() as f64;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: TaskKind,
    pub mean: Metrics,
    pub folds: Vec<Metrics>,
}

/// Cross-validated softmax-regression probe. Fold metrics carry `mi_f1`,
/// `ma_f1` and the train-fold majority-class baseline `majority_mi_f1`.
pub fn classify(x: &Mat, labels: &[usize], folds: usize, seed: u64, cfg: &ClassifierConfig) -> Result<TaskReport> {
    if labels.len() != x.nrows() {
        return Err(Error::Eval("label count differs from embedding rows".into()));
    }
    if labels.iter().all(|&c| c == labels[0]) {
        return Err(Error::Eval("classification needs at least two classes".into()));
    }
    let n_classes = labels.iter().max().unwrap() + 1;
    let fold_metrics: Vec<Metrics> = kfold(x.nrows(), folds, seed)?
        .into_par_iter()
        .map(|test| {
            let train = complement(x.nrows(), &test);
            let y_train: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let y_test: Vec<usize> = test.iter().map(|&i| labels[i]).collect();
            let clf = SoftmaxClassifier::fit(&take_rows(x, &train), &y_train, n_classes, cfg);
            let pred = clf.predict(&take_rows(x, &test));
            let majority = vec![majority_label(&y_train); y_test.len()];
            Metrics::from([
                ("mi_f1".into(), micro_f1(&y_test, &pred)),
                ("ma_f1".into(), macro_f1(&y_test, &pred)),
                ("majority_mi_f1".into(), micro_f1(&y_test, &majority)),
            ])
        })
        .collect();
    Ok(TaskReport { task: TaskKind::ClassifyParcels, mean: mean_metrics(&fold_metrics), folds: fold_metrics })
}

/// Cross-validated ridge regression of inflow and outflow; MAE and RMSE are
/// averaged over the two directions.
pub fn predict_flow(x: &Mat, targets: &FlowTargets, folds: usize, seed: u64, lambda: f64) -> Result<TaskReport> {
    let fold_metrics: Vec<Metrics> = kfold(x.nrows(), folds, seed)?
        .into_par_iter()
        .map(|test| -> Result<Metrics> {
            let train = complement(x.nrows(), &test);
            let (xtr, xte) = (take_rows(x, &train), take_rows(x, &test));
            let mut mae = 0.0;
            let mut rmse = 0.0;
            for y in [&targets.inflow, &targets.outflow] {
                let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
                let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
                let (a, r) = mae_rmse(&yte, &Ridge::fit(&xtr, &ytr, lambda)?.predict(&xte));
                mae += a / 2.0;
                rmse += r / 2.0;
            }
            Ok(Metrics::from([("mae".into(), mae), ("rmse".into(), rmse)]))
        })
        .collect::<Result<_>>()?;
    Ok(TaskReport { task: TaskKind::FlowParcels, mean: mean_metrics(&fold_metrics), folds: fold_metrics })
}

/// Cross-validated bilinear OD regression over all ordered entity pairs.
pub fn predict_od(x: &Mat, od: &Mat, folds: usize, seed: u64, cfg: &BilinearConfig) -> Result<TaskReport> {
    let n = x.nrows();
    if od.sum() == 0.0 {
        return Err(Error::Eval("OD matrix is empty".into()));
    }
    let fold_metrics: Vec<Metrics> = kfold(n * n, folds, seed)?
        .into_par_iter()
        .map(|test| {
            let mut mask = Mat::ones((n, n));
            test.iter().for_each(|&p| mask[[p / n, p % n]] = 0.0);
            let scores = Bilinear::fit(x, od, &mask, cfg).scores(x);
            let truth: Vec<f64> = test.iter().map(|&p| od[[p / n, p % n]]).collect();
            let pred: Vec<f64> = test.iter().map(|&p| scores[[p / n, p % n]]).collect();
            let (mae, rmse) = mae_rmse(&truth, &pred);
            Metrics::from([("mae".into(), mae), ("rmse".into(), rmse)])
        })
        .collect();
    Ok(TaskReport { task: TaskKind::OdParcels, mean: mean_metrics(&fold_metrics), folds: fold_metrics })
}

/// Integer labels of an entity type's label column.
pub fn entity_labels(bundle: &MapBundle, entity: EntityType) -> Result<Vec<usize>> {
    let name = label_feature(entity);
    let (schema, rows): (_, Vec<&Vec<f64>>) = match entity {
        EntityType::Segment => (&bundle.segment_schema, bundle.segments.iter().map(|s| &s.raw_features).collect()),
        EntityType::Parcel => (&bundle.parcel_schema, bundle.parcels.iter().map(|r| &r.raw_features).collect()),
    };
    let col = schema
        .iter()
        .position(|f| f.name == name)
        .ok_or_else(|| Error::Validation(format!("{} schema has no label column {name:?}", entity.as_str())))?;
    rows.iter()
        .map(|r| {
            let v = r[col];
            if v >= 0.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Validation(format!("label {v} in column {name:?} is not a category code")))
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: EvalConfig,
    pub tasks: Vec<TaskReport>,
}

impl EvalReport {
    pub fn task(&self, kind: TaskKind) -> Option<&TaskReport> {
        self.tasks.iter().find(|t| t.task == kind)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One line per task with its mean metrics.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<22} metrics\n", "task");
        for t in &self.tasks {
            let cells: Vec<String> = t.mean.iter().map(|(k, v)| format!("{k}={v:.4}")).collect();
            out.push_str(&format!("{:<22} {}\n", t.task.name(), cells.join("  ")));
        }
        out
    }
}

/// Runs every configured task on frozen embeddings. Flow and OD targets come
/// from the chronological test split of the bundle's trajectories.
pub fn evaluate(table: &EmbeddingTable, bundle: &MapBundle, cfg: &EvalConfig) -> Result<EvalReport> {
    cfg.validate()?;
    if table.segments.nrows() != bundle.segments.len() || table.parcels.nrows() != bundle.parcels.len() {
        return Err(Error::Validation(format!(
            "embedding table has {}/{} segment/parcel rows, bundle has {}/{}",
            table.segments.nrows(),
            table.parcels.nrows(),
            bundle.segments.len(),
            bundle.parcels.len()
        )));
    }
    let (sr, _) = assign_segments_to_parcels(&bundle.segments, &bundle.parcels)?;
    let parcel_of = parcel_of_segments(&sr, bundle.segments.len());
    let test_split = &bundle.trajectories[chronological_split(bundle.trajectories.len())[2].clone()];
    let emb = |e: EntityType| match e {
        EntityType::Segment => &table.segments,
        EntityType::Parcel => &table.parcels,
    };
    let mut tasks = Vec::new();
    for &task in &cfg.tasks {
        let mut report = match task {
            TaskKind::ClassifySegments | TaskKind::ClassifyParcels => {
                let e = task.entity().unwrap();
                classify(emb(e), &entity_labels(bundle, e)?, cfg.folds, cfg.seed, &cfg.classifier)?
            }
            TaskKind::FlowSegments | TaskKind::FlowParcels | TaskKind::OdSegments | TaskKind::OdParcels => {
                if test_split.is_empty() {
                    return Err(Error::Eval(format!("{task} needs trajectories in the test split")));
                }
                let e = task.entity().unwrap();
                let t = derive_flow_and_od(test_split, &parcel_of, e, emb(e).nrows());
                if matches!(task, TaskKind::FlowSegments | TaskKind::FlowParcels) {
                    predict_flow(emb(e), &t, cfg.folds, cfg.seed, cfg.ridge_lambda)?
                } else {
                    predict_od(emb(e), &t.od, cfg.folds, cfg.seed, &cfg.bilinear)?
                }
            }
            TaskKind::ClusterConsistency => {
                let (n, a) = cluster_consistency(&table.segments, &table.parcels, &parcel_of, &cfg.kmeans, cfg.seed)?;
                TaskReport { task, mean: Metrics::from([("nmi".into(), n), ("ars".into(), a)]), folds: Vec::new() }
            }
        };
        report.task = task;
        tasks.push(report);
    }
    Ok(EvalReport { config: cfg.clone(), tasks })
}
