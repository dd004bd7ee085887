//! Full-graph pretraining with Adam, checkpoints, metrics and embedding export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::Zip;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Mat, Tape};
use crate::encoder::{
    check_params, init_from_specs, param_specs, EmbeddingTable, Encoder, EncoderConfig, GraphInputs, GraphView, Params,
};
use crate::error::{Error, Result};
use crate::graph::HomeGraph;
use crate::ssl::{fused_loss, objective_param_specs, AugmentationConfig, LossConfig, LossValues, StepSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationConfig,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            epochs: 1000,
            seed: 0,
            checkpoint_every: 0,
            encoder: EncoderConfig::default(),
            augmentation: AugmentationConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!("train.learning_rate must be finite and non-negative, got {}", self.learning_rate)));
        }
        self.encoder.validate()?;
        self.augmentation.validate()?;
        self.loss.validate()
    }
}

/// Row-major matrix for checkpoint files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoredMat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl From<&Mat> for StoredMat {
    fn from(m: &Mat) -> Self {
        Self { rows: m.nrows(), cols: m.ncols(), data: m.iter().copied().collect() }
    }
}

impl StoredMat {
    fn to_mat(&self, name: &str) -> Result<Mat> {
        Mat::from_shape_vec((self.rows, self.cols), self.data.clone())
            .map_err(|e| Error::Validation(format!("checkpoint matrix `{name}`: {e}")))
    }
}

fn store(p: &Params) -> BTreeMap<String, StoredMat> {
    p.iter().map(|(k, v)| (k.clone(), v.into())).collect()
}

fn restore(p: &BTreeMap<String, StoredMat>) -> Result<Params> {
    p.iter().map(|(k, v)| Ok((k.clone(), v.to_mat(k)?))).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Params,
    pub v: Params,
}

impl Adam {
    pub fn new() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: Params::new(), v: Params::new() }
    }

    /// One update of every parameter in `groups`; names missing from `grads` get a zero gradient.
    pub fn step(&mut self, groups: &mut [&mut Params], grads: &Params, lr: f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in groups.iter_mut().flat_map(|g| g.iter_mut()) {
            let m = self.m.entry(name.clone()).or_insert_with(|| Mat::zeros(p.dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Mat::zeros(p.dim()));
            let zero;
            let g = match grads.get(name) {
                Some(g) => g,
                None => {
                    zero = Mat::zeros(p.dim());
                    &zero
                }
            };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            Zip::from(&mut **p).and(m).and(v).and(g).for_each(|p, m, v, &gi| {
                *m = b1 * *m + (1.0 - b1) * gi;
                *v = b2 * *v + (1.0 - b2) * gi * gi;
                *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
            });
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: BTreeMap<String, StoredMat>,
    pub v: BTreeMap<String, StoredMat>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub losses: LossValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub graph_hash: String,
    /// Epochs completed so far; the rng stream of epoch `e` is derived from `(seed, e)`.
    pub epoch: usize,
    pub encoder_params: BTreeMap<String, StoredMat>,
    pub objective_params: BTreeMap<String, StoredMat>,
    pub optimizer: AdamState,
    pub history: Vec<EpochLosses>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let text = serde_json::to_string(self).map_err(|e| Error::parse(path.display().to_string(), e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path.display().to_string(), e))
    }

    pub fn encoder_params(&self) -> Result<Params> {
        restore(&self.encoder_params)
    }
}

/// splitmix64 finalizer over the seed and epoch.
fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut z = seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Trainer<'g> {
    graph: &'g HomeGraph,
    inputs: GraphInputs,
    config: TrainConfig,
    encoder_params: Params,
    objective_params: Params,
    adam: Adam,
    epoch: usize,
    history: Vec<EpochLosses>,
}

impl<'g> Trainer<'g> {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(graph: &'g HomeGraph, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let inputs = GraphInputs::new(graph, &config.encoder)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let encoder_params = init_from_specs(&param_specs(&config.encoder, &inputs), &mut rng);
        let objective_params = init_from_specs(&objective_param_specs(config.encoder.dim), &mut rng);
        Encoder::new(&config.encoder, &encoder_params, &inputs)?;
        Ok(Self {
            graph,
            inputs,
            config: config.clone(),
            encoder_params,
            objective_params,
            adam: Adam::new(),
            epoch: 0,
            history: Vec::new(),
        })
    }

    /// Continues from a checkpoint taken on the same graph.
    pub fn resume(graph: &'g HomeGraph, ckpt: &Checkpoint) -> Result<Self> {
        ckpt.config.validate()?;
        check_graph(ckpt, graph)?;
        let inputs = GraphInputs::new(graph, &ckpt.config.encoder)?;
        let encoder_params = restore(&ckpt.encoder_params)?;
        let objective_params = restore(&ckpt.objective_params)?;
        check_params(&param_specs(&ckpt.config.encoder, &inputs), &encoder_params)?;
        check_params(&objective_param_specs(ckpt.config.encoder.dim), &objective_params)?;
        let adam = Adam {
            t: ckpt.optimizer.t,
            m: restore(&ckpt.optimizer.m)?,
            v: restore(&ckpt.optimizer.v)?,
            ..Adam::new()
        };
        Ok(Self {
            graph,
            inputs,
            config: ckpt.config.clone(),
            encoder_params,
            objective_params,
            adam,
            epoch: ckpt.epoch,
            history: ckpt.history.clone(),
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochLosses] {
        &self.history
    }

    pub fn encoder_params(&self) -> &Params {
        &self.encoder_params
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// Overrides the epoch budget, for example when extending a resumed run.
    pub fn set_epochs(&mut self, epochs: usize) {
        self.config.epochs = epochs;
    }

    fn sample_for_epoch(&self, epoch: usize) -> Result<StepSample> {
        let enc = Encoder::new(&self.config.encoder, &self.encoder_params, &self.inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(epoch_seed(self.config.seed, epoch));
        Ok(StepSample::draw(&enc, self.graph, &self.config.augmentation, &mut rng))
    }

    /// Loss values and gradients of every parameter for a fixed draw of randomness.
    fn loss_and_grads(&self, sample: &StepSample, encoder_params: &Params, objective_params: &Params) -> Result<(LossValues, Params)> {
        let enc = Encoder::new(&self.config.encoder, encoder_params, &self.inputs)?;
        let mut tape = Tape::new();
        let vars = fused_loss(&mut tape, &enc, objective_params, self.graph, sample, &self.config.loss)?;
        let grads = tape.backward(vars.total);
        let grads = grads.by_param(&tape).map(|(n, g)| (n.to_string(), g)).collect();
        Ok((vars.values(&tape), grads))
    }

    fn loss_only(&self, sample: &StepSample, encoder_params: &Params, objective_params: &Params) -> Result<f64> {
        let enc = Encoder::new(&self.config.encoder, encoder_params, &self.inputs)?;
        let mut tape = Tape::new();
        let vars = fused_loss(&mut tape, &enc, objective_params, self.graph, sample, &self.config.loss)?;
        Ok(tape.scalar(vars.total))
    }

    /// One optimizer step on freshly sampled views.
    pub fn step(&mut self) -> Result<EpochLosses> {
        let epoch = self.epoch + 1;
        let sample = self.sample_for_epoch(epoch)?;
        let (losses, grads) = self.loss_and_grads(&sample, &self.encoder_params, &self.objective_params)?;
        if let Some(component) = losses.first_non_finite() {
            return Err(Error::NonFinite { component: component.into(), epoch });
        }
        let lr = self.config.learning_rate;
        self.adam.step(&mut [&mut self.encoder_params, &mut self.objective_params], &grads, lr);
        self.epoch = epoch;
        let record = EpochLosses { epoch, losses };
        self.history.push(record);
        Ok(record)
    }

    /// Steps until `config.epochs`, calling `on_epoch` after each one.
    pub fn run(&mut self, mut on_epoch: impl FnMut(&Self, &EpochLosses) -> Result<()>) -> Result<()> {
        while self.epoch < self.config.epochs {
            let rec = self.step()?;
            on_epoch(self, &rec)?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            graph_hash: self.graph.content_hash(),
            epoch: self.epoch,
            encoder_params: store(&self.encoder_params),
            objective_params: store(&self.objective_params),
            optimizer: AdamState { t: self.adam.t, m: store(&self.adam.m), v: store(&self.adam.v) },
            history: self.history.clone(),
        }
    }

    /// Evaluation-mode embeddings of the un-augmented graph.
    pub fn embeddings(&self) -> Result<EmbeddingTable> {
        let enc = Encoder::new(&self.config.encoder, &self.encoder_params, &self.inputs)?;
        Ok(enc.encode(&GraphView::of(self.graph)))
    }

    /// Central finite differences against analytic gradients of the fused loss
    /// for the randomness of the next epoch. `max_entries` caps probes per group.
    pub fn grad_check(&self, step: f64, max_entries: Option<usize>) -> Result<GradCheckReport> {
        let sample = self.sample_for_epoch(self.epoch + 1)?;
        let (_, grads) = self.loss_and_grads(&sample, &self.encoder_params, &self.objective_params)?;
        let mut groups = Vec::new();
        for objective in [false, true] {
            let source = if objective { &self.objective_params } else { &self.encoder_params };
            for (name, p) in source {
                let n = max_entries.map_or(p.len(), |m| m.min(p.len()));
                let stride = (p.len() / n.max(1)).max(1);
                let mut worst = GroupCheck { name: name.clone(), entries: 0, max_rel_err: 0.0, max_abs_grad: 0.0 };
                for idx in (0..p.len()).step_by(stride).take(n) {
                    let (r, c) = (idx / p.ncols(), idx % p.ncols());
                    let eval = |delta: f64| -> Result<f64> {
                        let (mut ep, mut op) = (self.encoder_params.clone(), self.objective_params.clone());
                        let target = if objective { &mut op } else { &mut ep };
                        target.get_mut(name).unwrap()[[r, c]] += delta;
                        self.loss_only(&sample, &ep, &op)
                    };
                    let numeric = (eval(step)? - eval(-step)?) / (2.0 * step);
                    let analytic = grads.get(name).map_or(0.0, |g| g[[r, c]]);
                    worst.entries += 1;
                    worst.max_rel_err = worst.max_rel_err.max(relative_error(analytic, numeric));
                    worst.max_abs_grad = worst.max_abs_grad.max(analytic.abs()).max(numeric.abs());
                }
                groups.push(worst);
            }
        }
        let max_rel_err = groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max);
        Ok(GradCheckReport { groups, max_rel_err })
    }
}

/// `|a - n| / max(|a|, |n|, 1e-6)`; the floor keeps vanishing gradients from
/// amplifying rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupCheck {
    pub name: String,
    pub entries: usize,
    pub max_rel_err: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupCheck>,
    pub max_rel_err: f64,
}

fn check_graph(ckpt: &Checkpoint, graph: &HomeGraph) -> Result<()> {
    let hash = graph.content_hash();
    if ckpt.graph_hash != hash {
        return Err(Error::Validation(format!(
            "checkpoint was trained on graph {} but the given graph hashes to {hash}",
            ckpt.graph_hash
        )));
    }
    Ok(())
}

/// Trains from scratch for `config.epochs` epochs.
pub fn pretrain(graph: &HomeGraph, config: &TrainConfig) -> Result<Checkpoint> {
    let mut t = Trainer::new(graph, config)?;
    t.run(|_, _| Ok(()))?;
    Ok(t.checkpoint())
}

/// Evaluation-mode embeddings from a checkpoint.
pub fn export_embeddings(ckpt: &Checkpoint, graph: &HomeGraph) -> Result<EmbeddingTable> {
    check_graph(ckpt, graph)?;
    let inputs = GraphInputs::new(graph, &ckpt.config.encoder)?;
    let params = ckpt.encoder_params()?;
    let enc = Encoder::new(&ckpt.config.encoder, &params, &inputs)?;
    Ok(enc.encode(&GraphView::of(graph)))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// `epoch,l_ss,l_rr,l_sr,l_c,total`; skipped components are left blank.
pub fn metrics_csv(history: &[EpochLosses]) -> String {
    let mut out = String::from("epoch,l_ss,l_rr,l_sr,l_c,total\n");
    for h in history {
        let l = &h.losses;
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            h.epoch,
            fmt_opt(l.ss),
            fmt_opt(l.rr),
            fmt_opt(l.sr),
            fmt_opt(l.c),
            l.total
        ));
    }
    out
}
