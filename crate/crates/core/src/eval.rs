//! Cross-validation protocols, confusion metrics and report emission.
//!
//! The positive class is compressed (label 1) throughout.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::{index, SliceRandom};

use crate::corpus::ContentHash;
use crate::features::EntropyStats;
use crate::models::{Model, ModelConfig, ModelKind};
use crate::packetize::Dataset;
use crate::rng;
use crate::{Error, Label, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Ten independent draws of a fixed per-class train/test subsample.
    PaperSubsample,
    StratifiedKfold,
}

impl Protocol {
    pub fn name(self) -> &'static str {
        match self {
            Protocol::PaperSubsample => "paper_subsample",
            Protocol::StratifiedKfold => "stratified_kfold",
        }
    }
}

impl std::str::FromStr for Protocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "paper" | "paper_subsample" => Ok(Protocol::PaperSubsample),
            "stratified" | "stratified_kfold" => Ok(Protocol::StratifiedKfold),
            _ => Err(format!(
                "unknown protocol {s:?} (expected paper or stratified)"
            )),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FoldPlan {
    pub protocol: Protocol,
    pub folds: usize,
    /// Per-class sizes, used by the subsample protocol only.
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl FoldPlan {
    pub fn paper(seed: u64) -> FoldPlan {
        FoldPlan {
            protocol: Protocol::PaperSubsample,
            folds: 10,
            train_per_class: 3000,
            test_per_class: 700,
            seed,
        }
    }

    pub fn stratified(seed: u64) -> FoldPlan {
        FoldPlan {
            protocol: Protocol::StratifiedKfold,
            ..FoldPlan::paper(seed)
        }
    }

    pub fn new(protocol: Protocol, seed: u64) -> FoldPlan {
        match protocol {
            Protocol::PaperSubsample => FoldPlan::paper(seed),
            Protocol::StratifiedKfold => FoldPlan::stratified(seed),
        }
    }
}

/// Indices into the dataset, each list ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub index: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per-class index lists in canonical order (origin, then payload), so fold
/// membership does not depend on row order.
fn canonical_classes(dataset: &Dataset) -> [Vec<usize>; 2] {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by(|&a, &b| {
        let (sa, sb) = (&dataset.samples[a], &dataset.samples[b]);
        sa.origin
            .cmp(&sb.origin)
            .then_with(|| sa.payload.cmp(&sb.payload))
            .then(a.cmp(&b))
    });
    let mut classes = [Vec::new(), Vec::new()];
    for i in order {
        classes[dataset.samples[i].label.bit() as usize].push(i);
    }
    classes
}

pub fn make_folds(dataset: &Dataset, plan: &FoldPlan) -> Result<Vec<Fold>> {
    if plan.folds < 2 {
        return Err(Error::InvalidParameter(
            "at least two folds are required".into(),
        ));
    }
    let classes = canonical_classes(dataset);
    let folds = match plan.protocol {
        Protocol::PaperSubsample => {
            let needed = plan.train_per_class + plan.test_per_class;
            if plan.train_per_class == 0 || plan.test_per_class == 0 {
                return Err(Error::InvalidParameter(
                    "subsample sizes must be positive".into(),
                ));
            }
            for class in &classes {
                if class.len() < needed {
                    return Err(Error::InsufficientSamples {
                        needed,
                        have: class.len(),
                    });
                }
            }
            (0..plan.folds)
                .map(|f| {
                    let mut train = Vec::new();
                    let mut test = Vec::new();
                    for (bit, class) in classes.iter().enumerate() {
                        let mut r = rng::stage_rng(plan.seed, &format!("folds.paper.{f}.{bit}"));
                        let picks = index::sample(&mut r, class.len(), needed).into_vec();
                        train.extend(picks[..plan.train_per_class].iter().map(|&k| class[k]));
                        test.extend(picks[plan.train_per_class..].iter().map(|&k| class[k]));
                    }
                    train.sort_unstable();
                    test.sort_unstable();
                    Fold {
                        index: f,
                        train,
                        test,
                    }
                })
                .collect::<Vec<_>>()
        }
        Protocol::StratifiedKfold => {
            for class in &classes {
                if class.len() < plan.folds {
                    return Err(Error::InsufficientSamples {
                        needed: plan.folds,
                        have: class.len(),
                    });
                }
            }
            let mut member = vec![0usize; dataset.len()];
            let mut next = 0usize;
            for (bit, class) in classes.iter().enumerate() {
                let mut shuffled = class.clone();
                shuffled.shuffle(&mut rng::stage_rng(
                    plan.seed,
                    &format!("folds.stratified.{bit}"),
                ));
                for i in shuffled {
                    member[i] = next % plan.folds;
                    next += 1;
                }
            }
            (0..plan.folds)
                .map(|f| {
                    let (test, train) = (0..dataset.len()).partition(|&i| member[i] == f);
                    Fold {
                        index: f,
                        train,
                        test,
                    }
                })
                .collect()
        }
    };
    Ok(folds)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn record(&mut self, truth: Label, predicted: Label) {
        match (truth, predicted) {
            (Label::Compressed, Label::Compressed) => self.tp += 1,
            (Label::Encrypted, Label::Compressed) => self.fp += 1,
            (Label::Encrypted, Label::Encrypted) => self.tn += 1,
            (Label::Compressed, Label::Encrypted) => self.fn_ += 1,
        }
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Confusion {
        let mut c = Confusion::default();
        for (t, p) in pairs {
            c.record(t, p);
        }
        c
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn correct(&self) -> usize {
        self.tp + self.tn
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.correct(), self.total())
    }

    /// Encrypted samples labeled compressed, as a fraction of encrypted.
    pub fn encrypted_error(&self) -> f64 {
        ratio(self.fp, self.fp + self.tn)
    }

    /// Compressed samples labeled encrypted, as a fraction of compressed.
    pub fn compressed_error(&self) -> f64 {
        ratio(self.fn_, self.fn_ + self.tp)
    }

    pub fn add(&mut self, other: &Confusion) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldResult {
    pub fold: usize,
    pub train_size: usize,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub model: Option<ModelKind>,
    pub protocol: Protocol,
    pub folds: Vec<FoldResult>,
}

impl Metrics {
    /// Confusion counts pooled over all folds.
    pub fn pooled(&self) -> Confusion {
        let mut c = Confusion::default();
        for f in &self.folds {
            c.add(&f.confusion);
        }
        c
    }

    pub fn accuracy(&self) -> f64 {
        self.pooled().accuracy()
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.folds
            .iter()
            .map(|f| f.confusion.accuracy())
            .sum::<f64>()
            / self.folds.len().max(1) as f64
    }

    /// Sample standard deviation of per-fold accuracy.
    pub fn std_accuracy(&self) -> f64 {
        let n = self.folds.len();
        if n < 2 {
            return 0.0;
        }
        let m = self.mean_accuracy();
        (self
            .folds
            .iter()
            .map(|f| (f.confusion.accuracy() - m).powi(2))
            .sum::<f64>()
            / (n - 1) as f64)
            .sqrt()
    }
}

/// Runs `train` on each fold's training split and scores the returned model
/// on the test split. Folds run in order; errors carry the fold index.
pub fn evaluate<F>(dataset: &Dataset, plan: &FoldPlan, mut train: F) -> Result<Metrics>
where
    F: FnMut(&Dataset, usize) -> Result<Model>,
{
    let folds = make_folds(dataset, plan)?;
    let mut results = Vec::with_capacity(folds.len());
    let mut kind = None;
    for fold in &folds {
        let annotate = |e: Error| Error::Fold {
            fold: fold.index,
            source: Box::new(e),
        };
        let model = train(&dataset.subset(&fold.train), fold.index).map_err(annotate)?;
        kind = Some(model.kind());
        let payloads: Vec<&[u8]> = fold
            .test
            .iter()
            .map(|&i| dataset.samples[i].payload.as_slice())
            .collect();
        let predictions = model.predict_all(&payloads).map_err(annotate)?;
        let confusion = Confusion::from_pairs(
            fold.test
                .iter()
                .zip(&predictions)
                .map(|(&i, p)| (dataset.samples[i].label, p.label)),
        );
        results.push(FoldResult {
            fold: fold.index,
            train_size: fold.train.len(),
            confusion,
        });
    }
    Ok(Metrics {
        model: kind,
        protocol: plan.protocol,
        folds: results,
    })
}

/// Fresh model per fold, trained with a seed derived from the plan seed and
/// the fold index.
pub fn evaluate_model(dataset: &Dataset, plan: &FoldPlan, config: &ModelConfig) -> Result<Metrics> {
    evaluate(dataset, plan, |train, fold| {
        config
            .fit(
                train,
                rng::sub_seed(plan.seed, &format!("fold.{fold}.train")),
            )
            .map(|(m, _)| m)
    })
}

/// One-sided binomial test: P(X >= successes) for X ~ Bin(trials, 1/2).
pub fn binomial_p_value(successes: usize, trials: usize) -> f64 {
    if successes == 0 {
        return 1.0;
    }
    if successes > trials {
        return 0.0;
    }
    let ln_half = -(2f64.ln()) * trials as f64;
    // log C(trials, i), built incrementally.
    let mut log_c = 0.0;
    let mut terms = Vec::with_capacity(trials - successes + 1);
    for i in 0..=trials {
        if i > 0 {
            log_c += ((trials - i + 1) as f64).ln() - (i as f64).ln();
        }
        if i >= successes {
            terms.push(log_c + ln_half);
        }
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
        .exp()
        .min(1.0)
}

/// Best accuracy achievable by always answering one label.
pub fn constant_baseline(labels: impl IntoIterator<Item = Label>) -> f64 {
    let (mut c, mut n) = (0usize, 0usize);
    for l in labels {
        n += 1;
        if l == Label::Compressed {
            c += 1;
        }
    }
    ratio(c.max(n - c), n)
}

pub fn percent(x: f64) -> String {
    format!("{:.1}%", x * 100.0)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Report {
    pub summary: String,
    pub folds_csv: String,
}

pub fn report(
    metrics: &Metrics,
    manifest: Option<&ContentHash>,
    entropy: Option<&EntropyStats>,
) -> Report {
    let pooled = metrics.pooled();
    let mut s = String::new();
    let model = metrics.model.map(|m| m.name()).unwrap_or("none");
    let _ = writeln!(s, "model: {model}");
    let _ = writeln!(s, "protocol: {}", metrics.protocol.name());
    let _ = writeln!(s, "folds: {}", metrics.folds.len());
    if let Some(h) = manifest {
        let _ = writeln!(s, "manifest: {h}");
    }
    let _ = writeln!(s, "accuracy: {}", percent(pooled.accuracy()));
    let _ = writeln!(
        s,
        "fold accuracy: {} +/- {}",
        percent(metrics.mean_accuracy()),
        percent(metrics.std_accuracy())
    );
    let _ = writeln!(
        s,
        "confusion (positive = compressed): tp {} fp {} tn {} fn {}",
        pooled.tp, pooled.fp, pooled.tn, pooled.fn_
    );
    let _ = writeln!(
        s,
        "encrypted misclassified: {}",
        percent(pooled.encrypted_error())
    );
    let _ = writeln!(
        s,
        "compressed misclassified: {}",
        percent(pooled.compressed_error())
    );
    let compressed = pooled.tp + pooled.fn_;
    let _ = writeln!(
        s,
        "constant baseline: {}",
        percent(ratio(
            compressed.max(pooled.total() - compressed),
            pooled.total()
        ))
    );
    let _ = writeln!(
        s,
        "binomial p (vs chance): {:.3e}",
        binomial_p_value(pooled.correct(), pooled.total())
    );
    if let Some(e) = entropy {
        s.push_str(&entropy_section(e));
    }

    let mut csv = String::from("fold,train,test,tp,fp,tn,fn,accuracy\n");
    for f in &metrics.folds {
        let c = &f.confusion;
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{},{}",
            f.fold,
            f.train_size,
            c.total(),
            c.tp,
            c.fp,
            c.tn,
            c.fn_,
            c.accuracy()
        );
    }
    Report {
        summary: s,
        folds_csv: csv,
    }
}

pub fn entropy_section(e: &EntropyStats) -> String {
    let mut s = String::from("\n[entropy]\n");
    let _ = writeln!(
        s,
        "compressed: n {} mean {:.4} std {:.4}",
        e.compressed.count, e.compressed.mean, e.compressed.std
    );
    let _ = writeln!(
        s,
        "encrypted: n {} mean {:.4} std {:.4}",
        e.encrypted.count, e.encrypted.mean, e.encrypted.std
    );
    let _ = writeln!(s, "ratio compressed/encrypted: {:.4}", e.ratio());
    let _ = writeln!(s, "mean gap / pooled std: {:.4}", e.standardized_gap());
    s
}

impl Report {
    /// Writes `summary.txt` and `folds.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let summary = dir.join("summary.txt");
        std::fs::write(&summary, &self.summary).map_err(|e| Error::io(&summary, e))?;
        let folds = dir.join("folds.csv");
        std::fs::write(&folds, &self.folds_csv).map_err(|e| Error::io(&folds, e))
    }
}
