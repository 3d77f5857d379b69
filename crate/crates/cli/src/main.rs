//! `compdetect`: generate labeled packet datasets, train and evaluate
//! compressed-versus-encrypted classifiers, and triage packet captures.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use compdetect::capture::{self, Verdict, DEFAULT_SIGNIFICANCE};
use compdetect::corpus::{self, Codec, CodecKind, Manifest, ManifestRecord};
use compdetect::eval::{self, FoldPlan, Protocol};
use compdetect::features;
use compdetect::models::{Model, ModelArtifact, ModelConfig, ModelKind, Prediction, Weighting};
use compdetect::packetize::{self, Dataset, DatasetMeta, PacketMode, Stream, FIXED_LEN};
use compdetect::synth::{self, CorpusConfig};

#[derive(Parser)]
#[command(
    name = "compdetect",
    version,
    about = "Compressed versus encrypted packet classification"
)]
struct Cli {
    /// TOML file with default settings; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run seed. Every randomized stage derives its generator from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic source corpus of mixed file types.
    SynthCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        files: usize,
        #[arg(long, default_value_t = 1024)]
        min_size: usize,
        #[arg(long, default_value_t = 256 * 1024)]
        max_size: usize,
    },
    /// Compress or encrypt every corpus file and write payloads plus a manifest.
    Generate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        codecs: CodecArgs,
    },
    /// Split manifest payloads into packet samples and write a balanced CSV.
    Packetize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        mode: Option<PacketMode>,
        #[arg(long)]
        out: PathBuf,
        /// Keep the class imbalance instead of trimming the majority class.
        #[arg(long)]
        no_balance: bool,
    },
    /// Extract TCP payloads from a pcap and triage them.
    Ingest {
        #[arg(long)]
        pcap: PathBuf,
        /// Triage report CSV.
        #[arg(long)]
        out: PathBuf,
        /// Also write opaque payloads, cut into 1024-byte samples, as a dataset
        /// CSV with this label.
        #[arg(long, requires = "label")]
        dataset: Option<PathBuf>,
        #[arg(long, value_parser = parse_label)]
        label: Option<compdetect::Label>,
        #[arg(long)]
        significance: Option<f64>,
    },
    /// Quadrant chi-square features for every row of a dataset CSV.
    Featurize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model on a dataset CSV.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Cross-validate a model kind and write summary.txt and folds.csv.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        protocol: Option<Protocol>,
        #[arg(long)]
        folds: Option<usize>,
        #[arg(long)]
        train_per_class: Option<usize>,
        #[arg(long)]
        test_per_class: Option<usize>,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Classify a dataset CSV or the opaque payloads of a pcap.
    Predict {
        /// Model artifact written by `train`.
        #[arg(long = "model-file")]
        model_file: PathBuf,
        /// A dataset CSV, or a capture ending in `.pcap`.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        significance: Option<f64>,
    },
    /// Per-class Shannon entropy of a dataset CSV, or of a manifest
    /// packetized in the given mode and balanced.
    EntropyReport {
        #[arg(long, conflicts_with = "manifest")]
        data: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        mode: Option<PacketMode>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct CodecArgs {
    /// Comma-separated codec names; must include at least one compression and
    /// one encryption codec.
    #[arg(long, value_delimiter = ',')]
    codecs: Vec<String>,
    /// `<name>=<template>`; `{in}`, `{out}`, `{key}` and `{iv}` are
    /// substituted. Templates using `{key}` are encryption codecs.
    #[arg(long = "external-codec")]
    external_codec: Vec<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long)]
    model: Option<ModelKind>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// `inverse` or `uniform` neighbor weighting.
    #[arg(long)]
    weighting: Option<String>,
}

/// Defaults loaded from `--config`.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    seed: Option<u64>,
    mode: Option<String>,
    model: Option<String>,
    protocol: Option<String>,
    epochs: Option<usize>,
    batch: Option<usize>,
    k: Option<usize>,
    weighting: Option<String>,
    codecs: Option<Vec<String>>,
    external_codecs: Option<BTreeMap<String, String>>,
    significance: Option<f64>,
}

fn parse_label(s: &str) -> std::result::Result<compdetect::Label, String> {
    match s {
        "0" | "encrypted" => Ok(compdetect::Label::Encrypted),
        "1" | "compressed" => Ok(compdetect::Label::Compressed),
        _ => Err(format!(
            "label must be compressed, encrypted, 1 or 0, got {s:?}"
        )),
    }
}

fn parse_flag<T: std::str::FromStr<Err = String>>(
    name: &str,
    value: Option<&String>,
) -> Result<Option<T>> {
    value
        .map(|v| v.parse::<T>().map_err(|e| anyhow!("config {name}: {e}")))
        .transpose()
}

/// Effective settings of one command, written into every sidecar and hashed.
struct Settings(BTreeMap<String, String>);

impl Settings {
    fn new(command: &str) -> Settings {
        let mut map = BTreeMap::new();
        map.insert("command".to_string(), command.to_string());
        Settings(map)
    }

    fn set(&mut self, key: &str, value: impl ToString) {
        self.0.insert(key.to_string(), value.to_string());
    }

    fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.0 {
            h.update(format!("{k}={v}\n").as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes `<path>.meta` with the settings, their hash and `extra`.
    fn sidecar(&self, path: &Path, extra: &DatasetMeta) -> Result<()> {
        let mut meta = extra.clone();
        for (k, v) in &self.0 {
            meta.insert(k, v);
        }
        meta.insert("config_hash", self.hash());
        let mut name = path.as_os_str().to_owned();
        name.push(".meta");
        let side = PathBuf::from(name);
        std::fs::write(&side, meta.to_text()).with_context(|| format!("writing {}", side.display()))
    }
}

struct Ctx {
    seed: Option<u64>,
    config: RunConfig,
}

impl Ctx {
    fn require_seed(&self, command: &str) -> Result<u64> {
        self.seed
            .or(self.config.seed)
            .ok_or_else(|| anyhow!("{command}: --seed is required (or set `seed` in --config)"))
    }

    fn mode(&self, flag: Option<PacketMode>) -> Result<PacketMode> {
        Ok(flag
            .or(parse_flag::<PacketMode>("mode", self.config.mode.as_ref())?)
            .unwrap_or(PacketMode::Fixed1024))
    }

    fn significance(&self, flag: Option<f64>) -> f64 {
        flag.or(self.config.significance)
            .unwrap_or(DEFAULT_SIGNIFICANCE)
    }

    fn model_config(&self, args: &ModelArgs) -> Result<ModelConfig> {
        let kind = args
            .model
            .or(parse_flag::<ModelKind>(
                "model",
                self.config.model.as_ref(),
            )?)
            .ok_or_else(|| anyhow!("--model is required (knn, mlp or cnn)"))?;
        let mut cfg = ModelConfig::new(kind);
        if let Some(e) = args.epochs.or(self.config.epochs) {
            cfg.epochs = e;
        }
        if let Some(b) = args.batch.or(self.config.batch) {
            cfg.batch_size = b;
        }
        if let Some(k) = args.k.or(self.config.k) {
            cfg.k = k;
        }
        if let Some(w) = args.weighting.as_ref().or(self.config.weighting.as_ref()) {
            cfg.weighting = match w.as_str() {
                "inverse" | "inverse_distance" | "distance" => Weighting::InverseDistance,
                "uniform" => Weighting::Uniform,
                other => bail!("unknown weighting {other:?} (expected inverse or uniform)"),
            };
        }
        Ok(cfg)
    }

    fn codecs(&self, args: &CodecArgs) -> Result<(Vec<Codec>, Vec<Codec>)> {
        let mut external: BTreeMap<String, String> =
            self.config.external_codecs.clone().unwrap_or_default();
        for spec in &args.external_codec {
            let (name, template) = spec.split_once('=').ok_or_else(|| {
                anyhow!("--external-codec expects <name>=<template>, got {spec:?}")
            })?;
            external.insert(name.to_string(), template.to_string());
        }
        let names: Vec<String> = if !args.codecs.is_empty() {
            args.codecs.clone()
        } else if let Some(c) = &self.config.codecs {
            c.clone()
        } else {
            let mut n = vec!["deflate".to_string(), "aes256ctr".to_string()];
            n.extend(external.keys().cloned());
            n
        };
        let (mut comp, mut enc) = (Vec::new(), Vec::new());
        for name in names {
            let codec = match (Codec::builtin(&name), external.get(&name)) {
                (Some(c), _) => c,
                (None, Some(t)) => Codec::external(&name, t)?,
                (None, None) => bail!(
                    "unknown codec {name:?}; define it with --external-codec {name}=<template>"
                ),
            };
            match codec.kind() {
                CodecKind::Compression => comp.push(codec),
                CodecKind::Encryption => enc.push(codec),
            }
        }
        Ok((comp, enc))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn read_dataset(path: &Path) -> Result<Dataset> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut ds = packetize::read_csv(BufReader::new(f))
        .with_context(|| format!("reading {}", path.display()))?;
    // Recover provenance from the sidecar when present.
    let mut side = path.as_os_str().to_owned();
    side.push(".meta");
    if let Ok(text) = std::fs::read_to_string(PathBuf::from(side)) {
        let meta = DatasetMeta::parse(&text)?;
        if let Some(m) = meta.get("manifest") {
            ds.manifest = m.parse().ok();
        }
        if let Some(s) = meta.get("seed").and_then(|s| s.parse().ok()) {
            ds.seed = s;
        }
    }
    Ok(ds)
}

fn load_manifest(path: &Path) -> Result<(Manifest, PathBuf)> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let manifest =
        Manifest::read(BufReader::new(f)).with_context(|| format!("reading {}", path.display()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((manifest, dir))
}

fn manifest_dataset(path: &Path, mode: PacketMode, seed: u64) -> Result<Dataset> {
    let (manifest, dir) = load_manifest(path)?;
    let payloads = manifest.load_payloads(&dir)?;
    let streams: Vec<Stream<'_>> = manifest
        .records
        .iter()
        .zip(&payloads)
        .map(|(r, p)| Stream {
            file: r.content_hash,
            label: r.label,
            payload: p,
        })
        .collect();
    let mut ds = packetize::assemble_streams(&streams, mode, seed)?;
    ds.manifest = Some(manifest.digest());
    Ok(ds)
}

fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    let ctx = Ctx {
        seed: cli.seed,
        config,
    };

    match cli.command {
        Command::SynthCorpus {
            out,
            files,
            min_size,
            max_size,
        } => {
            let seed = ctx.require_seed("synth-corpus")?;
            let cfg = CorpusConfig {
                files,
                min_size,
                max_size,
                ..CorpusConfig::default()
            };
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for f in synth::generate_corpus(&cfg, seed)? {
                let path = out.join(&f.path);
                std::fs::write(&path, f.content())
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            eprintln!("wrote {files} files to {}", out.display());
        }

        Command::Generate {
            corpus,
            out,
            codecs,
        } => {
            let seed = ctx.require_seed("generate")?;
            let (comp, enc) = ctx.codecs(&codecs)?;
            let files = corpus::load_dir(&corpus)?;
            let partition = corpus::partition_corpus(&files, &comp, &enc, seed)?;
            let encoded = corpus::encode_all(&partition.assignments(seed)?)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut manifest = Manifest {
                seed,
                records: Vec::new(),
            };
            for (i, e) in encoded.iter().enumerate() {
                let name = format!("payload_{i:05}.bin");
                let path = out.join(&name);
                std::fs::write(&path, &e.payload)
                    .with_context(|| format!("writing {}", path.display()))?;
                manifest.records.push(ManifestRecord::of(e, Some(name)));
            }
            let path = out.join("manifest.txt");
            manifest.write(create(&path)?)?;
            let mut s = Settings::new("generate");
            s.set("seed", seed);
            s.set(
                "codecs",
                comp.iter()
                    .chain(&enc)
                    .map(|c| c.name())
                    .collect::<Vec<_>>()
                    .join(","),
            );
            let mut extra = DatasetMeta::default();
            extra.insert("files", files.len());
            extra.insert("manifest", manifest.digest());
            s.sidecar(&path, &extra)?;
            eprintln!("encoded {} files into {}", encoded.len(), out.display());
        }

        Command::Packetize {
            manifest,
            mode,
            out,
            no_balance,
        } => {
            let seed = ctx.require_seed("packetize")?;
            let mode = ctx.mode(mode)?;
            if mode != PacketMode::Fixed1024 {
                bail!("packetize: CSV output needs --mode fixed1024; use entropy-report --manifest for variable mode");
            }
            let mut ds = manifest_dataset(&manifest, mode, seed)?;
            if !no_balance {
                ds = packetize::balance(&ds, seed)?;
            }
            let mut w = create(&out)?;
            packetize::write_csv(&ds, &mut w)?;
            w.flush()?;
            let mut s = Settings::new("packetize");
            s.set("seed", seed);
            s.set("mode", mode.name());
            s.set("balance", !no_balance);
            s.sidecar(&out, &DatasetMeta::describe(&ds))?;
            let c = ds.class_counts();
            eprintln!(
                "{} samples ({} compressed, {} encrypted)",
                ds.len(),
                c.compressed,
                c.encrypted
            );
        }

        Command::Ingest {
            pcap,
            out,
            dataset,
            label,
            significance,
        } => {
            let significance = ctx.significance(significance);
            let cap = capture::read_pcap(&pcap)?;
            let mut rows = Vec::new();
            let mut samples = Vec::new();
            let file = corpus::ContentHash::of(pcap.display().to_string().as_bytes());
            for (i, p) in cap.packets.iter().enumerate() {
                let t = capture::triage(&p.tcp_payload, significance)?;
                if t.verdict == Verdict::Opaque {
                    if let Some(label) = label {
                        for chunk in p.tcp_payload.chunks_exact(FIXED_LEN) {
                            let n = samples.len() as u64;
                            samples.push(packetize::Sample::new(chunk.to_vec(), label, file, n));
                        }
                    }
                }
                rows.push((i, t, p.tcp_payload.len()));
            }
            let mut w = create(&out)?;
            capture::write_triage_csv(&mut w, &rows)?;
            let mut s = Settings::new("ingest");
            s.set("significance", significance);
            let mut extra = DatasetMeta::default();
            extra.insert("packets", cap.packets.len());
            extra.insert("skipped", cap.skipped.total());
            s.sidecar(&out, &extra)?;
            if let Some(path) = dataset {
                let ds = Dataset::new(samples, PacketMode::Fixed1024, 0);
                let mut w = create(&path)?;
                packetize::write_csv(&ds, &mut w)?;
                w.flush()?;
                s.sidecar(&path, &DatasetMeta::describe(&ds))?;
            }
            eprintln!(
                "{} TCP payloads, {} records skipped",
                cap.packets.len(),
                cap.skipped.total()
            );
        }

        Command::Featurize { input, out } => {
            let ds = read_dataset(&input)?;
            let rows = features::featurize(&ds)?;
            features::write_feature_csv(create(&out)?, &rows)?;
            let mut extra = DatasetMeta::default();
            extra.insert("rows", rows.len());
            Settings::new("featurize").sidecar(&out, &extra)?;
        }

        Command::Train { data, out, model } => {
            let seed = ctx.require_seed("train")?;
            let cfg = ctx.model_config(&model)?;
            let ds = read_dataset(&data)?;
            let (trained, log) = cfg.fit(&ds, seed)?;
            let artifact = ModelArtifact {
                model: trained,
                hyperparameters: cfg.hyperparameters(),
                seed,
                manifest: ds.manifest,
            };
            artifact.save(&out)?;
            let mut s = Settings::new("train");
            s.set("seed", seed);
            for (k, v) in cfg.hyperparameters() {
                s.set(&k, v);
            }
            let mut extra = DatasetMeta::default();
            extra.insert("samples", ds.len());
            for l in &log {
                extra.insert(
                    &format!("epoch.{:03}", l.epoch),
                    format!("loss {} accuracy {}", l.loss, l.accuracy),
                );
                eprintln!(
                    "epoch {:3}  loss {:.5}  accuracy {:.4}",
                    l.epoch + 1,
                    l.loss,
                    l.accuracy
                );
            }
            s.sidecar(&out, &extra)?;
        }

        Command::Evaluate {
            data,
            out,
            protocol,
            folds,
            train_per_class,
            test_per_class,
            model,
        } => {
            let seed = ctx.require_seed("evaluate")?;
            let cfg = ctx.model_config(&model)?;
            let protocol = protocol
                .or(parse_flag::<Protocol>(
                    "protocol",
                    ctx.config.protocol.as_ref(),
                )?)
                .unwrap_or(Protocol::PaperSubsample);
            let mut plan = FoldPlan::new(protocol, seed);
            if let Some(f) = folds {
                plan.folds = f;
            }
            if let Some(n) = train_per_class {
                plan.train_per_class = n;
            }
            if let Some(n) = test_per_class {
                plan.test_per_class = n;
            }
            let ds = read_dataset(&data)?;
            let metrics = eval::evaluate_model(&ds, &plan, &cfg)?;
            let entropy = features::entropy_study(&ds).ok();
            let report = eval::report(&metrics, ds.manifest.as_ref(), entropy.as_ref());
            report.write(&out)?;
            let mut s = Settings::new("evaluate");
            s.set("seed", seed);
            s.set("protocol", protocol.name());
            s.set("folds", plan.folds);
            if protocol == Protocol::PaperSubsample {
                s.set("train_per_class", plan.train_per_class);
                s.set("test_per_class", plan.test_per_class);
            }
            for (k, v) in cfg.hyperparameters() {
                s.set(&k, v);
            }
            s.sidecar(&out.join("summary.txt"), &DatasetMeta::default())?;
            print!("{}", report.summary);
        }

        Command::Predict {
            model_file,
            input,
            out,
            significance,
        } => {
            let artifact = ModelArtifact::load(&model_file)?;
            let model = &artifact.model;
            let is_pcap = input
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("pcap") || e.eq_ignore_ascii_case("cap"));
            let mut w = create(&out)?;
            let mut s = Settings::new("predict");
            s.set("model", model.kind().name());
            if is_pcap {
                let significance = ctx.significance(significance);
                s.set("significance", significance);
                let cap = capture::read_pcap(&input)?;
                writeln!(w, "index,verdict,chi_square,length,score,label")?;
                for (i, p) in cap.packets.iter().enumerate() {
                    let t = capture::triage(&p.tcp_payload, significance)?;
                    let (score, label) = match classify_opaque(model, &t, &p.tcp_payload)? {
                        Some(pred) => (pred.score.to_string(), pred.label.bit().to_string()),
                        None => (String::new(), String::new()),
                    };
                    writeln!(
                        w,
                        "{i},{},{},{},{score},{label}",
                        t.verdict.name(),
                        t.chi_square,
                        p.tcp_payload.len()
                    )?;
                }
            } else {
                let ds = read_dataset(&input)?;
                let payloads: Vec<&[u8]> =
                    ds.samples.iter().map(|s| s.payload.as_slice()).collect();
                let preds = model.predict_all(&payloads)?;
                let rows: Vec<(usize, Prediction)> = preds.into_iter().enumerate().collect();
                compdetect::models::write_predictions_csv(&mut w, &rows)?;
            }
            w.flush()?;
            s.sidecar(&out, &DatasetMeta::default())?;
        }

        Command::EntropyReport {
            data,
            manifest,
            mode,
            out,
        } => {
            let ds = match (data, manifest) {
                (Some(d), _) => read_dataset(&d)?,
                (None, Some(m)) => {
                    let seed = ctx.require_seed("entropy-report")?;
                    packetize::balance(&manifest_dataset(&m, ctx.mode(mode)?, seed)?, seed)?
                }
                (None, None) => bail!("entropy-report needs --data or --manifest"),
            };
            let stats = features::entropy_study(&ds)?;
            let text = eval::entropy_section(&stats);
            match out {
                Some(path) => {
                    std::fs::write(&path, &text)
                        .with_context(|| format!("writing {}", path.display()))?;
                    let mut s = Settings::new("entropy-report");
                    s.set("mode", ds.mode.name());
                    s.set("seed", ds.seed);
                    s.sidecar(&path, &DatasetMeta::describe(&ds))?;
                }
                None => print!("{text}"),
            }
        }
    }
    Ok(())
}

/// Networks see the first 1024 bytes of longer payloads; shorter payloads
/// are left unclassified. kNN accepts any opaque payload of 4 or more bytes.
fn classify_opaque(
    model: &Model,
    triage: &capture::TriageResult,
    payload: &[u8],
) -> Result<Option<Prediction>> {
    if triage.verdict != Verdict::Opaque {
        return Ok(None);
    }
    let input = match model {
        Model::Knn(_) if payload.len() >= 4 => payload,
        Model::Net(_) if payload.len() >= FIXED_LEN => &payload[..FIXED_LEN],
        _ => return Ok(None),
    };
    Ok(Some(model.predict(input)?))
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
