//! Run configuration, ablation variants and the file-level pipeline stages.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingTable;
use crate::error::{Error, Result};
use crate::eval::{evaluate, label_feature, EvalConfig, EvalReport, TaskKind};
use crate::graph::{assemble_home_graph, load_home_graph, save_home_graph, GraphConfig, HomeGraph};
use crate::io::{load_bundle, save_bundle};
use crate::model::{EntityType, MapBundle};
use crate::synth::{generate_synthetic_city, SynthSpec};
use crate::trainer::{export_embeddings, metrics_csv, Checkpoint, TrainConfig, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub variants: Vec<Ablation>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self { variants: Ablation::ALL.to_vec() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// When set, replaces the seeds of the synth, train and eval sections.
    pub seed: Option<u64>,
    pub out_dir: PathBuf,
    pub synth: SynthSpec,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub ablate: AblateConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: None,
            out_dir: PathBuf::from("out"),
            synth: SynthSpec::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            ablate: AblateConfig::default(),
        }
    }
}

fn set_path(root: &mut toml::Value, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut cur = root;
    for p in &parts[..parts.len() - 1] {
        let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("override {key:?}: {p:?} is not a table")))?;
        cur = table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = cur.as_table_mut().ok_or_else(|| Error::Config(format!("override {key:?} does not address a table field")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap(),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies dotted `key=value` overrides, e.g. `train.encoder.dim=32`.
    /// Unknown keys are rejected by the same schema as the config file.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut root = toml::Value::try_from(self).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let o = o.as_ref();
            let (key, value) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut root, key.trim(), parse_value(value.trim()))?;
        }
        root.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    /// Copy with the global seed pushed into every stage section.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        if let Some(s) = c.seed {
            c.synth.seed = s;
            c.train.seed = s;
            c.eval.seed = s;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.graph.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.synth.grid_w == 0 || self.synth.grid_h == 0 {
            return Err(Error::Config("synth grid must be at least 1x1".into()));
        }
        for task in &self.eval.tasks {
            let (entity, dropped) = match task {
                TaskKind::ClassifySegments => (EntityType::Segment, &self.graph.drop_segment_features),
                TaskKind::ClassifyParcels => (EntityType::Parcel, &self.graph.drop_parcel_features),
                _ => continue,
            };
            if !dropped.iter().any(|f| f == label_feature(entity)) {
                return Err(Error::Config(format!(
                    "{task} uses {:?} as its label, so graph config must drop it from the {} features",
                    label_feature(entity),
                    entity.as_str()
                )));
            }
        }
        for (i, a) in self.ablate.variants.iter().enumerate() {
            if self.ablate.variants[..i].contains(a) {
                return Err(Error::Config(format!("ablation variant {a} listed twice")));
            }
            a.apply(&self.train)?;
        }
        Ok(())
    }
}

/// One component switched off relative to the full model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Free per-entity embeddings instead of raw feature encoding.
    NoRfe,
    /// Parcels skip shape attention and use their own compressed features.
    NoPsa,
    /// Shape attention without the distance and angle bias.
    NoBias,
    /// Zero graph-attention layers.
    NoHgt,
    NoIntra,
    NoInter,
    NoFeatureAug,
    NoEdgeAug,
}

impl Ablation {
    pub const ALL: [Ablation; 8] = [
        Ablation::NoRfe,
        Ablation::NoPsa,
        Ablation::NoBias,
        Ablation::NoHgt,
        Ablation::NoIntra,
        Ablation::NoInter,
        Ablation::NoFeatureAug,
        Ablation::NoEdgeAug,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::NoRfe => "no_rfe",
            Ablation::NoPsa => "no_psa",
            Ablation::NoBias => "no_bias",
            Ablation::NoHgt => "no_hgt",
            Ablation::NoIntra => "no_intra",
            Ablation::NoInter => "no_inter",
            Ablation::NoFeatureAug => "no_feature_aug",
            Ablation::NoEdgeAug => "no_edge_aug",
        }
    }

    /// Applies the toggle to `base`. A toggle whose component is already
    /// off, or that would leave no training signal, is a conflict.
    pub fn apply(self, base: &TrainConfig) -> Result<TrainConfig> {
        let mut c = base.clone();
        let conflict = |why: &str| Err(Error::Config(format!("ablation {self} conflicts with the base config: {why}")));
        match self {
            Ablation::NoRfe => {
                if !c.encoder.raw_features {
                    return conflict("raw feature encoding already off");
                }
                c.encoder.raw_features = false;
            }
            Ablation::NoPsa => {
                if !c.encoder.shape_attention {
                    return conflict("shape attention already off");
                }
                c.encoder.shape_attention = false;
            }
            Ablation::NoBias => {
                if !c.encoder.shape_attention {
                    return conflict("the bias lives inside shape attention, which is off");
                }
                if !c.encoder.geo_bias {
                    return conflict("bias already off");
                }
                c.encoder.geo_bias = false;
            }
            Ablation::NoHgt => {
                if c.encoder.layers == 0 {
                    return conflict("graph attention already has zero layers");
                }
                c.encoder.layers = 0;
            }
            Ablation::NoIntra => {
                if c.loss.lambda_ss == 0.0 && c.loss.lambda_rr == 0.0 {
                    return conflict("intra-entity losses already off");
                }
                c.loss.lambda_ss = 0.0;
                c.loss.lambda_rr = 0.0;
            }
            Ablation::NoInter => {
                if c.loss.lambda_sr == 0.0 && c.loss.lambda_c == 0.0 {
                    return conflict("inter-entity losses already off");
                }
                c.loss.lambda_sr = 0.0;
                c.loss.lambda_c = 0.0;
            }
            Ablation::NoFeatureAug => {
                if c.augmentation.view1.p_n == 0.0 && c.augmentation.view2.p_n == 0.0 {
                    return conflict("feature masking already off");
                }
                c.augmentation.view1.p_n = 0.0;
                c.augmentation.view2.p_n = 0.0;
            }
            Ablation::NoEdgeAug => {
                if c.augmentation.view1.p_e == 0.0 && c.augmentation.view2.p_e == 0.0 {
                    return conflict("edge dropping already off");
                }
                c.augmentation.view1.p_e = 0.0;
                c.augmentation.view2.p_e = 0.0;
            }
        }
        if c.loss.lambdas().iter().all(|&l| l == 0.0) {
            return conflict("every loss weight would be zero");
        }
        Ok(c)
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL.into_iter().find(|a| a.name() == s).ok_or_else(|| Error::Config(format!("unknown ablation {s:?}")))
    }
}

/// Applies several toggles in order; conflicts between them are errors.
pub fn apply_ablations(base: &TrainConfig, toggles: &[Ablation]) -> Result<TrainConfig> {
    toggles.iter().try_fold(base.clone(), |c, a| a.apply(&c))
}

/// A model that only learns one entity type: the other type's contrastive
/// loss and both inter-entity losses are off, SR message passing is dropped,
/// and parcels do not attend over segment features.
pub fn single_entity_config(base: &TrainConfig, entity: EntityType) -> TrainConfig {
    let mut c = base.clone();
    c.loss.lambda_sr = 0.0;
    c.loss.lambda_c = 0.0;
    match entity {
        EntityType::Segment => c.loss.lambda_rr = 0.0,
        EntityType::Parcel => c.loss.lambda_ss = 0.0,
    }
    c.encoder.cross_entity = false;
    c.encoder.shape_attention = false;
    c
}

/// Artifact locations under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn bundle(&self) -> PathBuf {
        self.root.join("bundle")
    }
    pub fn graph(&self) -> PathBuf {
        self.root.join("graph")
    }
    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain")
    }
    pub fn checkpoint(&self) -> PathBuf {
        self.pretrain().join("checkpoint.json")
    }
    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.csv")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes the config echo next to a stage's outputs.
pub fn echo_config(cfg: &PipelineConfig, dir: &Path) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("config.toml"), &cfg.to_toml())
}

pub fn stage_synth(cfg: &PipelineConfig, out: &Path) -> Result<MapBundle> {
    let bundle = generate_synthetic_city(&cfg.synth)?;
    save_bundle(&bundle, out)?;
    echo_config(cfg, out)?;
    Ok(bundle)
}

pub fn stage_build_graph(cfg: &PipelineConfig, bundle_dir: &Path, out: &Path) -> Result<HomeGraph> {
    let bundle = load_bundle(bundle_dir)?;
    let graph = assemble_home_graph(&bundle, &cfg.graph)?;
    save_home_graph(&graph, out)?;
    echo_config(cfg, out)?;
    Ok(graph)
}

/// Trains on the graph in `graph_dir`, optionally continuing from `resume`.
/// Writes `checkpoint.json`, `metrics.csv` and periodic
/// `checkpoint_epoch_<k>.json` files into `out`.
pub fn stage_pretrain(cfg: &PipelineConfig, graph_dir: &Path, out: &Path, resume: Option<&Path>) -> Result<Checkpoint> {
    let graph = load_home_graph(graph_dir)?;
    create_dir(out)?;
    let mut trainer = match resume {
        Some(p) => {
            let mut t = Trainer::resume(&graph, &Checkpoint::load(p)?)?;
            t.set_epochs(cfg.train.epochs);
            t
        }
        None => Trainer::new(&graph, &cfg.train)?,
    };
    let every = cfg.train.checkpoint_every;
    trainer.run(|t, e| {
        if every > 0 && e.epoch % every == 0 {
            t.checkpoint().save(&out.join(format!("checkpoint_epoch_{}.json", e.epoch)))?;
        }
        Ok(())
    })?;
    let ckpt = trainer.checkpoint();
    ckpt.save(&out.join("checkpoint.json"))?;
    write(&out.join("metrics.csv"), &metrics_csv(&ckpt.history))?;
    echo_config(cfg, out)?;
    Ok(ckpt)
}

pub fn stage_export(checkpoint: &Path, graph_dir: &Path, out_csv: &Path) -> Result<EmbeddingTable> {
    let graph = load_home_graph(graph_dir)?;
    let table = export_embeddings(&Checkpoint::load(checkpoint)?, &graph)?;
    if let Some(dir) = out_csv.parent() {
        create_dir(dir)?;
    }
    table.save_csv(out_csv)?;
    Ok(table)
}

fn write_report(dir: &Path, json: &str, table: &str) -> Result<()> {
    create_dir(dir)?;
    write(&dir.join("report.json"), json)?;
    write(&dir.join("report.txt"), table)
}

pub fn stage_evaluate(cfg: &PipelineConfig, embeddings: &Path, bundle_dir: &Path, out: &Path) -> Result<EvalReport> {
    let table = EmbeddingTable::load_csv(embeddings)?;
    let bundle = load_bundle(bundle_dir)?;
    let report = evaluate(&table, &bundle, &cfg.eval)?;
    write_report(out, &report.to_json(), &report.to_table())?;
    echo_config(cfg, out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub train: TrainConfig,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    /// Probe settings shared by every row; each row carries its own train config.
    pub eval: EvalConfig,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// One row per variant; columns are `task.metric` means.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<String> = Vec::new();
        for r in &self.rows {
            for t in &r.report.tasks {
                for k in t.mean.keys() {
                    let c = format!("{}.{k}", t.task);
                    if !cols.contains(&c) {
                        cols.push(c);
                    }
                }
            }
        }
        let mut out = format!("{:<16}", "variant");
        for c in &cols {
            out.push_str(&format!(" {c:>28}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!("{:<16}", r.variant));
            for c in &cols {
                let (task, metric) = c.split_once('.').unwrap();
                let v = r.report.tasks.iter().find(|t| t.task.name() == task).and_then(|t| t.mean.get(metric));
                match v {
                    Some(v) => out.push_str(&format!(" {v:>28.4}")),
                    None => out.push_str(&format!(" {:>28}", "-")),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Pretrains and evaluates the full model and every configured variant on
/// the same graph and seed.
pub fn run_ablation(cfg: &PipelineConfig, graph: &HomeGraph, bundle: &MapBundle) -> Result<AblationReport> {
    let mut runs: Vec<(String, TrainConfig)> = vec![("full".into(), cfg.train.clone())];
    for a in &cfg.ablate.variants {
        runs.push((a.name().into(), a.apply(&cfg.train)?));
    }
    let rows = runs
        .into_par_iter()
        .map(|(variant, train)| -> Result<AblationRow> {
            let mut t = Trainer::new(graph, &train)?;
            t.run(|_, _| Ok(()))?;
            let report = evaluate(&t.embeddings()?, bundle, &cfg.eval)?;
            Ok(AblationRow { variant, train, report })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(AblationReport { eval: cfg.eval.clone(), rows })
}

pub fn stage_ablate(cfg: &PipelineConfig, graph_dir: &Path, bundle_dir: &Path, out: &Path) -> Result<AblationReport> {
    let graph = load_home_graph(graph_dir)?;
    let bundle = load_bundle(bundle_dir)?;
    let report = run_ablation(cfg, &graph, &bundle)?;
    let json = serde_json::to_string_pretty(&report).expect("report serializes");
    write_report(out, &json, &report.to_table())?;
    echo_config(cfg, out)?;
    Ok(report)
}

/// synth, build-graph, pretrain, export and evaluate under one output root.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<EvalReport> {
    let l = Layout::new(&cfg.out_dir);
    stage_synth(cfg, &l.bundle())?;
    stage_build_graph(cfg, &l.bundle(), &l.graph())?;
    stage_pretrain(cfg, &l.graph(), &l.pretrain(), None)?;
    stage_export(&l.checkpoint(), &l.graph(), &l.embeddings())?;
    stage_evaluate(cfg, &l.embeddings(), &l.bundle(), &l.eval())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_reach_nested_fields_and_reject_unknown_keys() {
        let c = PipelineConfig::default()
            .with_overrides(&["train.encoder.dim=32", "train.learning_rate=0.5", "eval.tasks=[\"od_parcels\"]", "out_dir=runs/a"])
            .unwrap();
        assert_eq!(c.train.encoder.dim, 32);
        assert_eq!(c.train.learning_rate, 0.5);
        assert_eq!(c.eval.tasks, vec![TaskKind::OdParcels]);
        assert_eq!(c.out_dir, PathBuf::from("runs/a"));
        assert!(PipelineConfig::default().with_overrides(&["train.encoder.nope=1"]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["train.epochs"]).is_err());
        assert!(PipelineConfig::default().with_overrides(&["train.epochs=\"many\""]).is_err());
    }

    #[test]
    fn toml_round_trip_and_unknown_section() {
        let c = PipelineConfig { seed: Some(7), ..Default::default() };
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        assert!(PipelineConfig::from_toml("[trian]\nepochs = 3\n").is_err());
        let r = c.resolved();
        assert_eq!((r.synth.seed, r.train.seed, r.eval.seed), (7, 7, 7));
    }

    #[test]
    fn label_columns_must_be_withheld() {
        let mut c = PipelineConfig::default();
        c.validate().unwrap();
        c.graph.drop_parcel_features.clear();
        assert!(c.validate().is_err());
        c.eval.tasks = vec![TaskKind::FlowParcels];
        c.validate().unwrap();
    }

    #[test]
    fn each_toggle_flips_one_documented_flag() {
        let base = TrainConfig::default();
        let bias = Ablation::NoBias.apply(&base).unwrap();
        assert!(!bias.encoder.geo_bias && bias.encoder.shape_attention);
        assert_eq!(Ablation::NoHgt.apply(&base).unwrap().encoder.layers, 0);
        assert!(!Ablation::NoRfe.apply(&base).unwrap().encoder.raw_features);
        let l = Ablation::NoInter.apply(&base).unwrap().loss;
        assert_eq!((l.lambda_sr, l.lambda_c, l.lambda_ss), (0.0, 0.0, 0.25));
        let a = Ablation::NoEdgeAug.apply(&base).unwrap().augmentation;
        assert_eq!((a.view1.p_e, a.view2.p_e, a.view1.p_n), (0.0, 0.0, 0.4));
        for v in Ablation::ALL {
            assert_eq!(v.name().parse::<Ablation>().unwrap(), v);
            assert_ne!(v.apply(&base).unwrap(), base);
        }
    }

    #[test]
    fn conflicting_toggles_are_rejected() {
        let base = TrainConfig::default();
        assert!(apply_ablations(&base, &[Ablation::NoPsa, Ablation::NoBias]).is_err());
        assert!(apply_ablations(&base, &[Ablation::NoIntra, Ablation::NoInter]).is_err());
        assert!(apply_ablations(&base, &[Ablation::NoHgt, Ablation::NoHgt]).is_err());
        assert!(apply_ablations(&base, &[Ablation::NoBias, Ablation::NoEdgeAug]).is_ok());
        let mut c = PipelineConfig::default();
        c.ablate.variants = vec![Ablation::NoPsa, Ablation::NoPsa];
        assert!(c.validate().is_err());
    }

    #[test]
    fn single_entity_variants_drop_cross_terms() {
        let s = single_entity_config(&TrainConfig::default(), EntityType::Segment);
        assert_eq!(s.loss.lambdas(), [0.25, 0.0, 0.0, 0.0]);
        assert!(!s.encoder.cross_entity && !s.encoder.shape_attention);
        let r = single_entity_config(&TrainConfig::default(), EntityType::Parcel);
        assert_eq!(r.loss.lambdas(), [0.0, 0.25, 0.0, 0.0]);
    }
}
