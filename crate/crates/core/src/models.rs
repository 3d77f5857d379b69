//! The three classifiers: distance-weighted kNN over quadrant chi-square
//! features, a feed-forward network and a 1D CNN over raw payload bytes,
//! plus the model artifact file.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;

use crate::corpus::ContentHash;
use crate::features::{self, FeatureVector};
use crate::nn::io::{read_network_from, ByteReader};
use crate::nn::{self, LayerSpec, Network, Optimizer, OptimizerKind, Tensor};
use crate::packetize::{Dataset, FIXED_LEN};
use crate::rng;
use crate::{Error, Label, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub label: Label,
    /// Probability-like score for the compressed class, in `[0, 1]`.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Knn,
    Mlp,
    Cnn,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Knn => "knn",
            ModelKind::Mlp => "mlp",
            ModelKind::Cnn => "cnn",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "knn" => Ok(ModelKind::Knn),
            "mlp" => Ok(ModelKind::Mlp),
            "cnn" => Ok(ModelKind::Cnn),
            _ => Err(format!("unknown model {s:?} (expected knn, mlp or cnn)")),
        }
    }
}

// ---------------------------------------------------------------------------
// k-nearest neighbors

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Weighting {
    /// Each neighbor votes with weight `1 / distance`.
    InverseDistance,
    Uniform,
}

pub const DEFAULT_K: usize = 9;

#[derive(Debug, Clone, PartialEq)]
pub struct KnnModel {
    pub k: usize,
    pub weighting: Weighting,
    /// Label assigned when the compressed share is exactly 0.5.
    pub tie_label: Label,
    points: Vec<[f64; 4]>,
    labels: Vec<Label>,
}

impl KnnModel {
    pub fn new(k: usize, weighting: Weighting, training: &[FeatureVector]) -> Result<KnnModel> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be positive".into()));
        }
        let mut points = Vec::with_capacity(training.len());
        let mut labels = Vec::with_capacity(training.len());
        for fv in training {
            let label = fv.label.ok_or_else(|| {
                Error::InvalidParameter("training vectors must be labeled".into())
            })?;
            points.push(FeatureVector::new(fv.chi, None)?.chi);
            labels.push(label);
        }
        if k > points.len() {
            return Err(Error::KTooLarge { k, n: points.len() });
        }
        Ok(KnnModel {
            k,
            weighting,
            tie_label: Label::Encrypted,
            points,
            labels,
        })
    }

    pub fn fit(dataset: &Dataset, k: usize, weighting: Weighting) -> Result<KnnModel> {
        KnnModel::new(k, weighting, &features::featurize(dataset)?)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn training_set(&self) -> impl Iterator<Item = ([f64; 4], Label)> + '_ {
        self.points.iter().copied().zip(self.labels.iter().copied())
    }

    /// Votes among the `k` nearest training points (Euclidean; ties broken
    /// by training index). A neighbor at distance zero outvotes all others.
    pub fn predict(&self, query: &FeatureVector) -> Result<Prediction> {
        if self.k > self.points.len() {
            return Err(Error::KTooLarge {
                k: self.k,
                n: self.points.len(),
            });
        }
        let mut dist: Vec<(f64, usize)> = self
            .points
            .iter()
            .enumerate()
            .map(|(i, p)| (euclidean(p, &query.chi), i))
            .collect();
        let order = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if self.k < dist.len() {
            dist.select_nth_unstable_by(self.k - 1, order);
            dist.truncate(self.k);
        }
        dist.sort_unstable_by(order);

        let exact = dist.iter().take_while(|(d, _)| *d == 0.0).count();
        let (mut compressed, mut total) = (0.0, 0.0);
        if exact > 0 {
            for &(_, i) in &dist[..exact] {
                total += 1.0;
                if self.labels[i] == Label::Compressed {
                    compressed += 1.0;
                }
            }
        } else {
            for &(d, i) in &dist {
                let w = match self.weighting {
                    Weighting::InverseDistance => 1.0 / d,
                    Weighting::Uniform => 1.0,
                };
                total += w;
                if self.labels[i] == Label::Compressed {
                    compressed += w;
                }
            }
        }
        let score = compressed / total;
        Ok(Prediction {
            label: label_for(score, self.tie_label),
            score,
        })
    }
}

pub fn euclidean(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn label_for(score: f64, tie: Label) -> Label {
    if score > 0.5 {
        Label::Compressed
    } else if score < 0.5 {
        Label::Encrypted
    } else {
        tie
    }
}

// ---------------------------------------------------------------------------
// Networks

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Architecture {
    /// dense(256) relu, dense(128) relu, dense(128) relu, dense(1) sigmoid.
    Mlp,
    /// conv(64, 16) relu, maxpool(2), conv(32, 16) relu, maxpool(2),
    /// flatten, dense(1) sigmoid.
    Cnn,
}

impl Architecture {
    pub fn input_shape(self) -> Vec<usize> {
        match self {
            Architecture::Mlp => vec![FIXED_LEN],
            Architecture::Cnn => vec![1, FIXED_LEN],
        }
    }

    pub fn layers(self) -> Vec<LayerSpec> {
        match self {
            Architecture::Mlp => vec![
                LayerSpec::Dense { units: 256 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 128 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 128 },
                LayerSpec::Relu,
                LayerSpec::Dense { units: 1 },
                LayerSpec::Sigmoid,
            ],
            Architecture::Cnn => vec![
                LayerSpec::Conv1d {
                    filters: 64,
                    kernel_size: 16,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { pool_size: 2 },
                LayerSpec::Conv1d {
                    filters: 32,
                    kernel_size: 16,
                },
                LayerSpec::Relu,
                LayerSpec::MaxPool1d { pool_size: 2 },
                LayerSpec::Flatten,
                LayerSpec::Dense { units: 1 },
                LayerSpec::Sigmoid,
            ],
        }
    }

    pub fn kind(self) -> ModelKind {
        match self {
            Architecture::Mlp => ModelKind::Mlp,
            Architecture::Cnn => ModelKind::Cnn,
        }
    }
}

/// Payload bytes scaled to `[0, 1]`, shaped for `arch`.
pub fn encode_input(arch: Architecture, payload: &[u8]) -> Result<Tensor> {
    if payload.len() != FIXED_LEN {
        return Err(Error::Shape {
            layer: 0,
            reason: format!(
                "network input must be {FIXED_LEN} bytes, got {}",
                payload.len()
            ),
        });
    }
    Tensor::new(
        arch.input_shape(),
        payload.iter().map(|&b| b as f64 / 255.0).collect(),
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetModel {
    pub arch: Architecture,
    pub network: Network,
}

impl NetModel {
    pub fn init(arch: Architecture, seed: u64) -> Result<NetModel> {
        Ok(NetModel {
            arch,
            network: Network::build(
                &arch.input_shape(),
                &arch.layers(),
                rng::sub_seed(seed, "init"),
            )?,
        })
    }

    fn from_network(arch: Architecture, network: Network) -> Result<NetModel> {
        let specs: Vec<LayerSpec> = network.layers().iter().map(|l| l.spec()).collect();
        if network.input_shape() != arch.input_shape().as_slice() || specs != arch.layers() {
            return Err(Error::InvalidParameter(format!(
                "network does not match the {} architecture",
                arch.kind().name()
            )));
        }
        Ok(NetModel { arch, network })
    }

    pub fn predict(&self, payload: &[u8]) -> Result<Prediction> {
        let out = self.network.forward(&encode_input(self.arch, payload)?)?;
        let score = out.data()[0].clamp(0.0, 1.0);
        Ok(Prediction {
            label: label_for(score, Label::Encrypted),
            score,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
}

impl TrainConfig {
    pub fn mlp(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 60,
            batch_size: 5,
            optimizer: OptimizerKind::adam(),
            seed,
        }
    }

    pub fn cnn(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 80,
            batch_size: 50,
            optimizer: OptimizerKind::adam(),
            seed,
        }
    }

    pub fn for_arch(arch: Architecture, seed: u64) -> TrainConfig {
        match arch {
            Architecture::Mlp => TrainConfig::mlp(seed),
            Architecture::Cnn => TrainConfig::cnn(seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean loss over the epoch's examples, measured before each update.
    pub loss: f64,
    /// Fraction of examples classified correctly before each update.
    pub accuracy: f64,
}

/// Mini-batch training on binary cross-entropy. Per-example gradients are
/// computed in parallel and summed in batch order, so results do not depend
/// on thread count. The final batch of an epoch may be short.
pub fn train_network(
    arch: Architecture,
    dataset: &Dataset,
    config: &TrainConfig,
) -> Result<(NetModel, Vec<EpochLog>)> {
    train_network_observed(arch, dataset, config, |_, _| {})
}

/// `train_network` with a hook called after every epoch with that epoch's
/// log entry and the current weights.
pub fn train_network_observed(
    arch: Architecture,
    dataset: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &NetModel),
) -> Result<(NetModel, Vec<EpochLog>)> {
    dataset.check_fixed()?;
    dataset.require_both_classes()?;
    if config.batch_size == 0 {
        return Err(Error::InvalidParameter(
            "batch size must be positive".into(),
        ));
    }
    let mut model = NetModel::init(arch, config.seed)?;
    let inputs: Vec<Tensor> = dataset
        .samples
        .iter()
        .map(|s| encode_input(arch, &s.payload))
        .collect::<Result<_>>()?;
    let targets: Vec<f64> = dataset
        .samples
        .iter()
        .map(|s| s.label.bit() as f64)
        .collect();
    let mut optimizer = Optimizer::new(config.optimizer)?;
    let mut order: Vec<usize> = (0..inputs.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng::stage_rng(
            config.seed,
            &format!("train.epoch.{epoch}"),
        ));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(config.batch_size) {
            let net = &model.network;
            let results: Vec<(f64, f64, Vec<Tensor>)> = batch
                .par_iter()
                .map(|&i| net.bce_gradients(&inputs[i], targets[i]))
                .collect::<Result<_>>()?;
            let mut sum: Vec<Tensor> = results[0].2.clone();
            for (_, _, grads) in &results[1..] {
                for (acc, g) in sum.iter_mut().zip(grads) {
                    for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for t in &mut sum {
                for v in t.data_mut() {
                    *v *= scale;
                }
            }
            for (&i, (loss, p, _)) in batch.iter().zip(&results) {
                loss_sum += loss;
                if (*p > 0.5) == (targets[i] == 1.0) {
                    correct += 1;
                }
            }
            optimizer.step(&mut model.network.params_mut(), &sum)?;
        }
        let entry = EpochLog {
            epoch,
            loss: loss_sum / inputs.len() as f64,
            accuracy: correct as f64 / inputs.len() as f64,
        };
        on_epoch(&entry, &model);
        log.push(entry);
    }
    Ok((model, log))
}

pub fn train_mlp(dataset: &Dataset, config: &TrainConfig) -> Result<(NetModel, Vec<EpochLog>)> {
    train_network(Architecture::Mlp, dataset, config)
}

pub fn train_cnn(dataset: &Dataset, config: &TrainConfig) -> Result<(NetModel, Vec<EpochLog>)> {
    train_network(Architecture::Cnn, dataset, config)
}

// ---------------------------------------------------------------------------
// Shared inference and artifacts

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Knn(KnnModel),
    Net(NetModel),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Knn(_) => ModelKind::Knn,
            Model::Net(n) => n.arch.kind(),
        }
    }

    /// Networks need exactly 1024 bytes; kNN takes any payload of 4 or more
    /// bytes through its quadrant features.
    pub fn predict(&self, payload: &[u8]) -> Result<Prediction> {
        match self {
            Model::Knn(m) => m.predict(&FeatureVector::new(
                features::quadrant_chi_square(payload)?,
                None,
            )?),
            Model::Net(n) => n.predict(payload),
        }
    }

    pub fn predict_all(&self, payloads: &[&[u8]]) -> Result<Vec<Prediction>> {
        payloads.par_iter().map(|p| self.predict(p)).collect()
    }
}

/// Everything needed to fit one model kind; training seeds are supplied per
/// call so cross-validation folds can derive their own.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub k: usize,
    pub weighting: Weighting,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> ModelConfig {
        let defaults = match kind {
            ModelKind::Cnn => TrainConfig::cnn(0),
            _ => TrainConfig::mlp(0),
        };
        ModelConfig {
            kind,
            k: DEFAULT_K,
            weighting: Weighting::InverseDistance,
            epochs: defaults.epochs,
            batch_size: defaults.batch_size,
            optimizer: defaults.optimizer,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            seed,
        }
    }

    pub fn fit(&self, dataset: &Dataset, seed: u64) -> Result<(Model, Vec<EpochLog>)> {
        match self.kind {
            ModelKind::Knn => Ok((
                Model::Knn(KnnModel::fit(dataset, self.k, self.weighting)?),
                Vec::new(),
            )),
            ModelKind::Mlp => {
                train_mlp(dataset, &self.train_config(seed)).map(|(m, l)| (Model::Net(m), l))
            }
            ModelKind::Cnn => {
                train_cnn(dataset, &self.train_config(seed)).map(|(m, l)| (Model::Net(m), l))
            }
        }
    }

    pub fn hyperparameters(&self) -> BTreeMap<String, String> {
        let mut map = BTreeMap::new();
        map.insert("model".to_string(), self.kind.name().to_string());
        match self.kind {
            ModelKind::Knn => {
                map.insert("k".to_string(), self.k.to_string());
                let w = match self.weighting {
                    Weighting::InverseDistance => "inverse_distance",
                    Weighting::Uniform => "uniform",
                };
                map.insert("weighting".to_string(), w.to_string());
            }
            _ => {
                map.insert("epochs".to_string(), self.epochs.to_string());
                map.insert("batch_size".to_string(), self.batch_size.to_string());
                map.insert(
                    "learning_rate".to_string(),
                    self.optimizer.learning_rate().to_string(),
                );
            }
        }
        map
    }
}

pub fn predict(model: &Model, sample: &crate::packetize::Sample) -> Result<Prediction> {
    model.predict(&sample.payload)
}

/// Prediction report: `index,score,label` per sample.
pub fn write_predictions_csv<W: Write>(
    mut out: W,
    rows: &[(usize, Prediction)],
) -> std::io::Result<()> {
    writeln!(out, "index,score,label")?;
    for (i, p) in rows {
        writeln!(out, "{i},{},{}", p.score, p.label.bit())?;
    }
    out.flush()
}

pub const ARTIFACT_MAGIC: &[u8; 4] = b"PAMF";
pub const ARTIFACT_VERSION: u32 = 1;

/// A trained model plus the provenance needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub model: Model,
    pub hyperparameters: BTreeMap<String, String>,
    pub seed: u64,
    pub manifest: Option<ContentHash>,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut ByteReader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| r.error("string is not utf-8"))
}

impl ModelArtifact {
    /// `PAMF`, u32 version, u8 kind, u64 seed, u8 manifest flag (+32 bytes),
    /// u32 hyperparameter count with length-prefixed key/value strings, then
    /// the body: a `PANN` weight file for networks, or for kNN `k`,
    /// weighting, tie label, row count and rows of four `f64` plus a label
    /// byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(ARTIFACT_MAGIC);
        out.extend_from_slice(&ARTIFACT_VERSION.to_le_bytes());
        out.push(match self.model.kind() {
            ModelKind::Knn => 1,
            ModelKind::Mlp => 2,
            ModelKind::Cnn => 3,
        });
        out.extend_from_slice(&self.seed.to_le_bytes());
        match &self.manifest {
            Some(h) => {
                out.push(1);
                out.extend_from_slice(&h.0);
            }
            None => out.push(0),
        }
        out.extend_from_slice(&(self.hyperparameters.len() as u32).to_le_bytes());
        for (k, v) in &self.hyperparameters {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        match &self.model {
            Model::Net(n) => nn::write_network(&n.network, &mut out),
            Model::Knn(m) => {
                out.extend_from_slice(&(m.k as u32).to_le_bytes());
                out.push(match m.weighting {
                    Weighting::InverseDistance => 0,
                    Weighting::Uniform => 1,
                });
                out.push(m.tie_label.bit());
                out.extend_from_slice(&(m.points.len() as u32).to_le_bytes());
                for (p, l) in m.points.iter().zip(&m.labels) {
                    for v in p {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                    out.push(l.bit());
                }
            }
        }
        out
    }

    pub fn from_bytes(data: &[u8]) -> Result<ModelArtifact> {
        let mut r = ByteReader::new(data);
        if r.take(4).ok() != Some(&ARTIFACT_MAGIC[..]) {
            return Err(Error::ModelFormat {
                offset: 0,
                reason: "bad magic".into(),
            });
        }
        let version = r.u32()?;
        if version != ARTIFACT_VERSION {
            return Err(r.error(format!("unsupported artifact version {version}")));
        }
        let kind_at = r.offset();
        let kind = match r.u8()? {
            1 => ModelKind::Knn,
            2 => ModelKind::Mlp,
            3 => ModelKind::Cnn,
            k => {
                return Err(Error::ModelFormat {
                    offset: kind_at,
                    reason: format!("unknown model kind {k}"),
                })
            }
        };
        let seed = r.u64()?;
        let manifest = match r.u8()? {
            0 => None,
            1 => Some(ContentHash(r.take(32)?.try_into().unwrap())),
            f => return Err(r.error(format!("bad manifest flag {f}"))),
        };
        let count = r.u32()? as usize;
        let mut hyperparameters = BTreeMap::new();
        for _ in 0..count {
            let k = get_str(&mut r)?;
            let v = get_str(&mut r)?;
            hyperparameters.insert(k, v);
        }
        let model = match kind {
            ModelKind::Knn => {
                let k = r.u32()? as usize;
                let weighting = match r.u8()? {
                    0 => Weighting::InverseDistance,
                    1 => Weighting::Uniform,
                    w => return Err(r.error(format!("bad weighting {w}"))),
                };
                let tie_label = Label::from_bit(r.u8()?).ok_or_else(|| r.error("bad tie label"))?;
                let n = r.u32()? as usize;
                if r.remaining() / 33 < n {
                    return Err(r.error(format!("truncated: {n} kNN rows declared")));
                }
                let mut rows = Vec::with_capacity(n);
                for _ in 0..n {
                    let mut chi = [0.0; 4];
                    for c in &mut chi {
                        *c = r.f64()?;
                    }
                    let label = Label::from_bit(r.u8()?).ok_or_else(|| r.error("bad row label"))?;
                    rows.push(
                        FeatureVector::new(chi, Some(label)).map_err(|e| r.error(e.to_string()))?,
                    );
                }
                let mut m =
                    KnnModel::new(k, weighting, &rows).map_err(|e| r.error(e.to_string()))?;
                m.tie_label = tie_label;
                Model::Knn(m)
            }
            ModelKind::Mlp | ModelKind::Cnn => {
                let arch = if kind == ModelKind::Mlp {
                    Architecture::Mlp
                } else {
                    Architecture::Cnn
                };
                let net = read_network_from(&mut r)?;
                Model::Net(NetModel::from_network(arch, net).map_err(|e| r.error(e.to_string()))?)
            }
        };
        if r.remaining() != 0 {
            return Err(r.error("trailing bytes"));
        }
        Ok(ModelArtifact {
            model,
            hyperparameters,
            seed,
            manifest,
        })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<ModelArtifact> {
        let data = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        ModelArtifact::from_bytes(&data)
    }
}
