//! End-to-end acceptance checks. Runs without the libtest harness so every
//! criterion prints exactly one PASS/FAIL line. Pass criterion numbers as
//! arguments to run a subset, e.g. `cargo test --test acceptance -- 3 5`.

mod gradcheck;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;
use std::panic::{self, AssertUnwindSafe};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use compdetect::capture::{parse_pcap, pcap_bytes, CapturedPacket, Endpoint};
use compdetect::corpus::{
    self, encode_all, partition_corpus, Codec, ContentHash, Manifest, ManifestRecord,
};
use compdetect::eval::{
    binomial_p_value, constant_baseline, evaluate_model, make_folds, report, Confusion, FoldPlan,
    Protocol,
};
use compdetect::features::{
    chi_square, entropy_study, quadrant_bounds, quadrant_chi_square, FeatureVector,
};
use compdetect::models::{
    train_network_observed, Architecture, KnnModel, Model, ModelArtifact, ModelConfig, ModelKind,
    NetModel, TrainConfig, Weighting,
};
use compdetect::nn::{write_network, Network, Tensor, Trace};
use compdetect::packetize::{
    assemble, balance, read_csv, write_csv, Dataset, PacketMode, Sample, FIXED_LEN,
};
use compdetect::rng::stage_rng;
use compdetect::synth::{generate_corpus, toy_separable, CorpusConfig};
use compdetect::Label;
use rand::Rng;

const SEED: u64 = 20_240_517;

/// Desk-scale corpus: enough 1024-byte packets for a 3000 + 700 per class
/// subsample after balancing.
const DESK_FILES: usize = 400;
const DESK_MAX_SIZE: usize = 256 * 1024;
const DESK_TRAIN_PER_CLASS: usize = 3000;
const DESK_TEST_PER_CLASS: usize = 700;
/// Carved out of the training split to pick the network checkpoint.
const DESK_VALIDATION_PER_CLASS: usize = 300;
const DESK_MLP_EPOCHS: usize = 30;
const DESK_CNN_EPOCHS: usize = 12;

type Check = fn() -> Result<String, String>;

fn main() {
    let only: Vec<usize> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let criteria: [(usize, &str, Check); 10] = [
        (1, "chi-square oracle", chi_square_oracle),
        (2, "gradient verification", gradient_verification),
        (3, "cnn shape chain", shape_chain),
        (4, "knn oracle", knn_oracle),
        (5, "dataset format", dataset_format),
        (6, "pcap round trip", pcap_round_trip),
        (7, "entropy claim", entropy_claim),
        (8, "desk-scale classification", desk_classification),
        (9, "determinism", determinism),
        (10, "toy separability", toy_separability),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name} ({secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {id:>2} {name} ({secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criterion(s) failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(elapsed: Duration, budget: Duration, what: &str) -> Result<(), String> {
    ensure(elapsed < budget, || {
        format!(
            "{what} took {:.1}s, budget {:.0}s",
            elapsed.as_secs_f64(),
            budget.as_secs_f64()
        )
    })
}

// ---------------------------------------------------------------------------
// 1. Chi-square against a brute-force rational recount.

/// Counts each byte value with a separate pass and forms
/// `sum (256 O - n)^2 / (256 n)` exactly in i128 before one division.
fn chi_square_oracle_value(bytes: &[u8]) -> f64 {
    let n = bytes.len() as i128;
    let mut num: i128 = 0;
    for v in 0..=255u8 {
        let o = bytes.iter().filter(|&&b| b == v).count() as i128;
        let d = 256 * o - n;
        num += d * d;
    }
    num as f64 / (256 * n) as f64
}

fn chi_square_oracle() -> Result<String, String> {
    let start = Instant::now();
    let mut rng = stage_rng(SEED, "acceptance.chi");
    let mut worst = 0.0f64;
    for trial in 0..1000 {
        let len = rng.gen_range(4..=4096);
        // Mix of uniform, skewed and near-constant payloads.
        let payload: Vec<u8> = match trial % 3 {
            0 => (0..len).map(|_| rng.gen()).collect(),
            1 => (0..len)
                .map(|_| (rng.gen::<u8>() % 17).wrapping_mul(3))
                .collect(),
            _ => (0..len)
                .map(|_| if rng.gen_bool(0.9) { 0x41 } else { rng.gen() })
                .collect(),
        };
        let got = chi_square(&payload).map_err(|e| e.to_string())?;
        let want = chi_square_oracle_value(&payload);
        let quads = quadrant_chi_square(&payload).map_err(|e| e.to_string())?;
        let q = len / 4;
        let slices = [
            &payload[..q],
            &payload[q..2 * q],
            &payload[2 * q..3 * q],
            &payload[3 * q..],
        ];
        ensure(
            quadrant_bounds(len)
                .iter()
                .zip(&slices)
                .all(|(r, s)| r.len() == s.len()),
            || format!("quadrant bounds differ for length {len}"),
        )?;
        for (value, oracle) in std::iter::once((got, want)).chain(
            quads
                .iter()
                .zip(&slices)
                .map(|(&v, s)| (v, chi_square_oracle_value(s))),
        ) {
            let rel = if oracle == 0.0 {
                value.abs()
            } else {
                ((value - oracle) / oracle).abs()
            };
            worst = worst.max(rel);
            ensure(rel < 1e-12, || {
                format!("trial {trial} length {len}: {value} vs {oracle}")
            })?;
        }
    }
    within(start.elapsed(), Duration::from_secs(10), "oracle run")?;
    Ok(format!(
        "1000 payloads plus quadrants, worst relative error {worst:.1e}"
    ))
}

// ---------------------------------------------------------------------------
// 2. Gradients.

fn gradient_verification() -> Result<String, String> {
    let start = Instant::now();
    let mut parts = Vec::new();
    let mut worst = 0.0f64;
    let mut kinks = 0;
    for (name, s) in gradcheck::layer_kinds() {
        worst = worst.max(s.worst);
        kinks += s.kinks;
        parts.push(format!("{name} {:.1e}", s.worst));
    }
    for arch in [Architecture::Mlp, Architecture::Cnn] {
        let s = gradcheck::full_graph(arch);
        worst = worst.max(s.worst);
        kinks += s.kinks;
        parts.push(format!("{} {:.1e}", arch.kind().name(), s.worst));
    }
    within(start.elapsed(), Duration::from_secs(120), "gradient checks")?;
    Ok(format!(
        "{} seeds each, worst {worst:.1e} [{}], {kinks} coordinates on a frozen branch",
        gradcheck::SEEDS,
        parts.join(", ")
    ))
}

// ---------------------------------------------------------------------------
// 3. Shape chain.

fn shape_chain() -> Result<String, String> {
    let arch = Architecture::Cnn;
    let net =
        Network::build(&arch.input_shape(), &arch.layers(), SEED).map_err(|e| e.to_string())?;
    let x = Tensor::new(vec![1, FIXED_LEN], vec![0.5; FIXED_LEN]).unwrap();
    let mut trace = Trace::new();
    net.forward_traced(&x, &mut trace)
        .map_err(|e| e.to_string())?;
    let shapes = trace.shapes();
    let want: Vec<Vec<usize>> = vec![
        vec![1, 1024],
        vec![64, 1009],
        vec![64, 1009],
        vec![64, 504],
        vec![32, 489],
        vec![32, 489],
        vec![32, 244],
        vec![7808],
        vec![1],
        vec![1],
    ];
    ensure(shapes == want, || format!("traced {shapes:?}"))?;
    ensure(net.shape_chain() == want, || {
        format!("static chain {:?}", net.shape_chain())
    })?;
    Ok("1024 -> 1009 -> 504 -> 489 -> 244 -> 7808 -> 1".into())
}

// ---------------------------------------------------------------------------
// 4. kNN against an exhaustive implementation.

/// Full sort of every training point by (distance, index), then the vote.
fn knn_naive(
    points: &[FeatureVector],
    query: &[f64; 4],
    k: usize,
    weighting: Weighting,
) -> (Label, f64) {
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let d2: f64 = (0..4)
                .map(|j| (p.chi[j] - query[j]) * (p.chi[j] - query[j]))
                .sum();
            (d2.sqrt(), i)
        })
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    let nearest = &all[..k];
    let zero: Vec<_> = nearest.iter().filter(|(d, _)| *d == 0.0).collect();
    let (mut compressed, mut total) = (0.0, 0.0);
    if !zero.is_empty() {
        for (_, i) in zero {
            total += 1.0;
            if points[*i].label == Some(Label::Compressed) {
                compressed += 1.0;
            }
        }
    } else {
        for &(d, i) in nearest {
            let w = match weighting {
                Weighting::InverseDistance => 1.0 / d,
                Weighting::Uniform => 1.0,
            };
            total += w;
            if points[i].label == Some(Label::Compressed) {
                compressed += w;
            }
        }
    }
    let score = compressed / total;
    let label = if score > 0.5 {
        Label::Compressed
    } else {
        Label::Encrypted
    };
    (label, score)
}

fn knn_oracle() -> Result<String, String> {
    let mut rng = stage_rng(SEED, "acceptance.knn");
    let mut zero_hits = 0;
    for config in 0..200 {
        let n = rng.gen_range(1..=60);
        // Coarse integer grid so distance ties and exact matches happen.
        let grid: f64 = if config % 2 == 0 { 4.0 } else { 1000.0 };
        let coord = |rng: &mut rand_chacha::ChaCha8Rng| rng.gen_range(0.0..grid).floor();
        let points: Vec<FeatureVector> = (0..n)
            .map(|_| {
                let chi = [
                    coord(&mut rng),
                    coord(&mut rng),
                    coord(&mut rng),
                    coord(&mut rng),
                ];
                let label = if rng.gen_bool(0.5) {
                    Label::Compressed
                } else {
                    Label::Encrypted
                };
                FeatureVector::new(chi, Some(label)).unwrap()
            })
            .collect();
        let k = rng.gen_range(1..=n);
        let weighting = if rng.gen_bool(0.7) {
            Weighting::InverseDistance
        } else {
            Weighting::Uniform
        };
        let query = if rng.gen_bool(0.25) {
            zero_hits += 1;
            points[rng.gen_range(0..n)].chi
        } else {
            [
                coord(&mut rng),
                coord(&mut rng),
                coord(&mut rng),
                coord(&mut rng),
            ]
        };
        let model = KnnModel::new(k, weighting, &points).map_err(|e| e.to_string())?;
        let got = model
            .predict(&FeatureVector::new(query, None).unwrap())
            .map_err(|e| e.to_string())?;
        let (label, score) = knn_naive(&points, &query, k, weighting);
        ensure(
            got.label == label && got.score.to_bits() == score.to_bits(),
            || {
                format!("config {config} (n {n}, k {k}, {weighting:?}): {got:?} vs ({label:?}, {score})")
            },
        )?;
    }
    Ok(format!(
        "200 configurations match exactly ({zero_hits} exact-match queries)"
    ))
}

// ---------------------------------------------------------------------------
// 5. Dataset CSV.

fn dataset_format() -> Result<String, String> {
    let mut rng = stage_rng(SEED, "acceptance.csv");
    let samples: Vec<Sample> = (0..8783 + 8398)
        .map(|i| {
            let label = if i < 8783 {
                Label::Compressed
            } else {
                Label::Encrypted
            };
            let payload: Vec<u8> = (0..FIXED_LEN).map(|_| rng.gen()).collect();
            Sample::new(payload, label, ContentHash([(i % 251) as u8; 32]), i as u64)
        })
        .collect();
    let unbalanced = Dataset::new(samples, PacketMode::Fixed1024, SEED);
    let balanced = balance(&unbalanced, SEED).map_err(|e| e.to_string())?;
    let counts = balanced.class_counts();
    ensure(
        counts.compressed == 8398 && counts.encrypted == 8398,
        || format!("balanced to {counts:?}"),
    )?;

    let mut bytes = Vec::new();
    write_csv(&balanced, &mut bytes).map_err(|e| e.to_string())?;
    let bad_rows = bytes
        .split(|&b| b == b'\n')
        .filter(|row| !row.is_empty())
        .filter(|row| row.split(|&b| b == b',').count() != FIXED_LEN + 1)
        .count();
    ensure(bad_rows == 0, || {
        format!("{bad_rows} rows without 1025 fields")
    })?;
    let back = read_csv(&bytes[..]).map_err(|e| e.to_string())?;
    ensure(back.len() == balanced.len(), || {
        format!("read {} of {} rows", back.len(), balanced.len())
    })?;
    ensure(
        back.samples
            .iter()
            .zip(&balanced.samples)
            .all(|(a, b)| a.payload == b.payload && a.label == b.label),
        || "payloads or labels changed".into(),
    )?;
    let mut again = Vec::new();
    write_csv(&back, &mut again).map_err(|e| e.to_string())?;
    ensure(again == bytes, || "rewritten CSV differs".into())?;
    Ok(format!(
        "8783/8398 -> 8398/8398, {} rows x 1025 fields round trip",
        balanced.len()
    ))
}

// ---------------------------------------------------------------------------
// 6. Pcap.

fn random_packets(rng: &mut impl Rng) -> Vec<CapturedPacket> {
    let n = rng.gen_range(0..40);
    (0..n)
        .map(|i| {
            let endpoint = |rng: &mut dyn rand::RngCore| Endpoint {
                addr: Ipv4Addr::from(rng.next_u32()),
                port: (rng.next_u32() & 0xffff) as u16,
            };
            let len = match rng.gen_range(0..10) {
                0 => 0,
                1 => rng.gen_range(1500..=compdetect::capture::MAX_TCP_PAYLOAD),
                _ => rng.gen_range(1..1500),
            };
            let mut p = CapturedPacket::new(
                endpoint(&mut *rng),
                endpoint(&mut *rng),
                (0..len).map(|_| rng.gen()).collect(),
            );
            p.ts_sec = i as u32;
            p.seq = rng.gen();
            p
        })
        .collect()
}

/// Ethernet/IPv4 capture: a UDP datagram then a TCP segment carrying "hello".
fn udp_tcp_fixture() -> Vec<u8> {
    let mut f = Vec::new();
    f.extend_from_slice(&0xa1b2_c3d4u32.to_le_bytes());
    f.extend_from_slice(&2u16.to_le_bytes());
    f.extend_from_slice(&4u16.to_le_bytes());
    f.extend_from_slice(&[0; 8]);
    f.extend_from_slice(&65535u32.to_le_bytes());
    f.extend_from_slice(&1u32.to_le_bytes());
    let eth = [0x02, 0, 0, 0, 0, 0x02, 0x02, 0, 0, 0, 0, 0x01, 0x08, 0x00];
    let ipv4 = |proto: u8, body: usize| {
        let total = (20 + body) as u16;
        let mut h = vec![0x45, 0];
        h.extend_from_slice(&total.to_be_bytes());
        h.extend_from_slice(&[0, 0, 0x40, 0, 64, proto, 0, 0, 10, 0, 0, 1, 10, 0, 0, 2]);
        h
    };
    let udp: Vec<u8> = [&[0x13, 0x88, 0x00, 0x35, 0x00, 0x0c, 0, 0][..], b"ping"].concat();
    let tcp: Vec<u8> = [
        &[
            0x9c, 0x40, 0x01, 0xbb, 0, 0, 0, 1, 0, 0, 0, 0, 0x50, 0x18, 0xff, 0xff, 0, 0, 0, 0,
        ][..],
        b"hello",
    ]
    .concat();
    for (i, (proto, body)) in [(17u8, udp), (6u8, tcp)].into_iter().enumerate() {
        let frame = [&eth[..], &ipv4(proto, body.len()), &body].concat();
        f.extend_from_slice(&(i as u32).to_le_bytes());
        f.extend_from_slice(&0u32.to_le_bytes());
        f.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        f.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        f.extend_from_slice(&frame);
    }
    f
}

fn pcap_round_trip() -> Result<String, String> {
    let mut rng = stage_rng(SEED, "acceptance.pcap");
    let mut total = 0;
    for list in 0..100 {
        let packets = random_packets(&mut rng);
        let bytes = pcap_bytes(&packets).map_err(|e| e.to_string())?;
        let back = parse_pcap(&bytes).map_err(|e| format!("list {list}: {e}"))?;
        ensure(back.packets.len() == packets.len(), || {
            format!(
                "list {list}: {} of {} packets",
                back.packets.len(),
                packets.len()
            )
        })?;
        for (i, (a, b)) in packets.iter().zip(&back.packets).enumerate() {
            ensure(
                a.tcp_payload == b.tcp_payload
                    && a.src == b.src
                    && a.dst == b.dst
                    && a.ts_sec == b.ts_sec,
                || format!("list {list} packet {i} differs"),
            )?;
        }
        total += packets.len();
    }
    let fixture = parse_pcap(&udp_tcp_fixture()).map_err(|e| e.to_string())?;
    ensure(fixture.packets.len() == 1, || {
        format!("fixture gave {} payloads", fixture.packets.len())
    })?;
    ensure(fixture.packets[0].tcp_payload == b"hello", || {
        "fixture payload differs".into()
    })?;
    ensure(fixture.skipped.non_tcp == 1, || {
        format!("fixture skips {:?}", fixture.skipped)
    })?;
    Ok(format!(
        "100 lists ({total} packets) preserved; fixture yields one TCP payload"
    ))
}

// ---------------------------------------------------------------------------
// Desk-scale data shared by 7 and 8.

struct Desk {
    encoded: Vec<corpus::EncodedFile>,
    generated_in: Duration,
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let config = CorpusConfig {
            files: DESK_FILES,
            max_size: DESK_MAX_SIZE,
            ..Default::default()
        };
        let files = generate_corpus(&config, SEED).expect("corpus");
        let part = partition_corpus(&files, &[Codec::Deflate], &[Codec::Aes256Ctr], SEED)
            .expect("partition");
        let encoded = encode_all(&part.assignments(SEED).expect("assignments")).expect("encode");
        Desk {
            encoded,
            generated_in: start.elapsed(),
        }
    })
}

fn desk_dataset(mode: PacketMode) -> Result<Dataset, String> {
    let d = desk();
    balance(
        &assemble(&d.encoded, mode, SEED).map_err(|e| e.to_string())?,
        SEED,
    )
    .map_err(|e| e.to_string())
}

// ---------------------------------------------------------------------------
// 7. Entropy.

fn entropy_claim() -> Result<String, String> {
    let start = Instant::now();
    let ds = desk_dataset(PacketMode::Variable)?;
    let e = entropy_study(&ds).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed() + desk().generated_in;
    let detail = format!(
        "{DESK_FILES} files, {} balanced samples: compressed {:.4}±{:.4}, encrypted {:.4}±{:.4}, \
         gap {:.3} pooled std (limit 0.1), ratio {:.4}",
        ds.len(),
        e.compressed.mean,
        e.compressed.std,
        e.encrypted.mean,
        e.encrypted.std,
        e.standardized_gap(),
        e.ratio()
    );
    ensure(ds.len() >= 4000, || {
        format!("only {} samples; {detail}", ds.len())
    })?;
    ensure(e.standardized_gap() < 0.1, || detail.clone())?;
    ensure((0.97..=1.0).contains(&e.ratio()), || detail.clone())?;
    within(elapsed, Duration::from_secs(300), "generation and study")?;
    Ok(detail)
}

// ---------------------------------------------------------------------------
// 8. Classification.

struct Scored {
    accuracy: f64,
    correct: usize,
    trials: usize,
    elapsed: Duration,
}

fn score(model: &Model, test: &Dataset, start: Instant) -> Result<Scored, String> {
    let payloads: Vec<&[u8]> = test.samples.iter().map(|s| s.payload.as_slice()).collect();
    let predictions = model.predict_all(&payloads).map_err(|e| e.to_string())?;
    let confusion = Confusion::from_pairs(
        test.samples
            .iter()
            .zip(&predictions)
            .map(|(s, p)| (s.label, p.label)),
    );
    Ok(Scored {
        accuracy: confusion.accuracy(),
        correct: confusion.correct(),
        trials: confusion.total(),
        elapsed: start.elapsed(),
    })
}

/// Splits `train` into fitting and validation parts, `per_class` validation
/// samples of each label.
fn carve_validation(train: &Dataset, per_class: usize) -> (Dataset, Dataset) {
    let mut rng = stage_rng(SEED, "acceptance.validation");
    let mut fit = Vec::new();
    let mut val = Vec::new();
    for label in [Label::Encrypted, Label::Compressed] {
        let mut idx: Vec<usize> = (0..train.len())
            .filter(|&i| train.samples[i].label == label)
            .collect();
        rand::seq::SliceRandom::shuffle(&mut idx[..], &mut rng);
        val.extend_from_slice(&idx[..per_class]);
        fit.extend_from_slice(&idx[per_class..]);
    }
    fit.sort_unstable();
    val.sort_unstable();
    (train.subset(&fit), train.subset(&val))
}

fn accuracy_on(model: &NetModel, data: &Dataset) -> f64 {
    let correct = data
        .samples
        .iter()
        .filter(|s| {
            model
                .predict(&s.payload)
                .map(|p| p.label == s.label)
                .unwrap_or(false)
        })
        .count();
    correct as f64 / data.len() as f64
}

/// Trains for `epochs` and keeps the weights of the epoch with the best
/// validation accuracy (earliest on ties).
fn fit_with_checkpoint(
    arch: Architecture,
    fit: &Dataset,
    val: &Dataset,
    epochs: usize,
) -> Result<(NetModel, usize, f64), String> {
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::for_arch(arch, SEED)
    };
    let mut best: Option<(NetModel, usize, f64)> = None;
    train_network_observed(arch, fit, &cfg, |log, model| {
        let acc = accuracy_on(model, val);
        if best.as_ref().is_none_or(|b| acc > b.2) {
            best = Some((model.clone(), log.epoch + 1, acc));
        }
    })
    .map_err(|e| e.to_string())?;
    best.ok_or_else(|| "no epochs run".to_string())
}

fn desk_classification() -> Result<String, String> {
    let ds = desk_dataset(PacketMode::Fixed1024)?;
    let mut plan = FoldPlan::paper(SEED);
    plan.train_per_class = DESK_TRAIN_PER_CLASS;
    plan.test_per_class = DESK_TEST_PER_CLASS;
    let folds = make_folds(&ds, &plan).map_err(|e| e.to_string())?;
    let train = ds.subset(&folds[0].train);
    let test = ds.subset(&folds[0].test);
    let baseline = constant_baseline(test.samples.iter().map(|s| s.label));

    // kNN is cheap, so it is pooled over every fold; elapsed is the slowest fold.
    let mut knn = Scored {
        accuracy: 0.0,
        correct: 0,
        trials: 0,
        elapsed: Duration::ZERO,
    };
    for fold in &folds {
        let start = Instant::now();
        let model = Model::Knn(
            KnnModel::fit(&ds.subset(&fold.train), 9, Weighting::InverseDistance)
                .map_err(|e| e.to_string())?,
        );
        let s = score(&model, &ds.subset(&fold.test), start)?;
        knn.correct += s.correct;
        knn.trials += s.trials;
        knn.elapsed = knn.elapsed.max(s.elapsed);
    }
    knn.accuracy = knn.correct as f64 / knn.trials as f64;

    let (fit, val) = carve_validation(&train, DESK_VALIDATION_PER_CLASS);
    let net = |arch: Architecture, epochs: usize| -> Result<(Scored, usize), String> {
        let start = Instant::now();
        let (model, epoch, _) = fit_with_checkpoint(arch, &fit, &val, epochs)?;
        Ok((score(&Model::Net(model), &test, start)?, epoch))
    };
    let (mlp, mlp_epoch) = net(Architecture::Mlp, DESK_MLP_EPOCHS)?;
    let (cnn, cnn_epoch) = net(Architecture::Cnn, DESK_CNN_EPOCHS)?;
    let cnn_p = binomial_p_value(cnn.correct, cnn.trials);

    let detail = format!(
        "{} samples, train {} (networks {} + {} validation), test {}: \
         knn {:.1}% over {} folds (slowest {:.0}s), \
         mlp {:.1}% (epoch {mlp_epoch}/{DESK_MLP_EPOCHS}, {:.0}s), \
         cnn {:.1}% (epoch {cnn_epoch}/{DESK_CNN_EPOCHS}, {:.0}s, p {:.1e}), baseline {:.1}%",
        ds.len(),
        train.len(),
        fit.len(),
        val.len(),
        test.len(),
        100.0 * knn.accuracy,
        folds.len(),
        knn.elapsed.as_secs_f64(),
        100.0 * mlp.accuracy,
        mlp.elapsed.as_secs_f64(),
        100.0 * cnn.accuracy,
        cnn.elapsed.as_secs_f64(),
        cnn_p,
        100.0 * baseline
    );
    let mut problems = Vec::new();
    if knn.accuracy < 0.55 {
        problems.push("knn below 55%");
    }
    if !(cnn.accuracy > 0.5 && cnn_p < 0.01) {
        problems.push("cnn not significantly above chance");
    }
    if cnn.accuracy <= mlp.accuracy {
        problems.push("cnn does not beat mlp");
    }
    if [&knn, &mlp, &cnn].iter().any(|s| s.accuracy <= baseline) {
        problems.push("a model does not beat the constant baseline");
    }
    if knn.elapsed >= Duration::from_secs(60) {
        problems.push("knn over 1 min");
    }
    if mlp.elapsed >= Duration::from_secs(15 * 60) {
        problems.push("mlp over 15 min");
    }
    if cnn.elapsed >= Duration::from_secs(30 * 60) {
        problems.push("cnn over 30 min");
    }
    if problems.is_empty() {
        Ok(detail)
    } else {
        Err(format!("{}; {detail}", problems.join(", ")))
    }
}

// ---------------------------------------------------------------------------
// 9. Determinism.

struct Artifacts {
    manifest: String,
    csv: Vec<u8>,
    weights: Vec<u8>,
    model_file: Vec<u8>,
    summary: String,
    folds_csv: String,
}

fn pipeline(seed: u64) -> Result<Artifacts, String> {
    let e = |e: compdetect::Error| e.to_string();
    let config = CorpusConfig {
        files: 12,
        max_size: 24 * 1024,
        ..Default::default()
    };
    let files = generate_corpus(&config, seed).map_err(e)?;
    let part = partition_corpus(&files, &[Codec::Deflate], &[Codec::Aes256Ctr], seed).map_err(e)?;
    let encoded = encode_all(&part.assignments(seed).map_err(e)?).map_err(e)?;
    let manifest = Manifest {
        seed,
        records: encoded
            .iter()
            .map(|f| ManifestRecord::of(f, None))
            .collect(),
    };
    let ds = balance(
        &assemble(&encoded, PacketMode::Fixed1024, seed).map_err(e)?,
        seed,
    )
    .map_err(e)?;
    let mut csv = Vec::new();
    write_csv(&ds, &mut csv).map_err(e)?;

    let cfg = TrainConfig {
        epochs: 2,
        ..TrainConfig::mlp(seed)
    };
    let (net, _) = train_network_observed(Architecture::Mlp, &ds, &cfg, |_, _| {}).map_err(e)?;
    let mut weights = Vec::new();
    write_network(&net.network, &mut weights);
    let artifact = ModelArtifact {
        model: Model::Net(net),
        hyperparameters: BTreeMap::from([("epochs".to_string(), "2".to_string())]),
        seed,
        manifest: Some(manifest.digest()),
    };

    let plan = FoldPlan::new(Protocol::StratifiedKfold, seed);
    let metrics = evaluate_model(&ds, &plan, &ModelConfig::new(ModelKind::Knn)).map_err(e)?;
    let entropy = entropy_study(&ds).map_err(e)?;
    let rep = report(&metrics, Some(&manifest.digest()), Some(&entropy));
    Ok(Artifacts {
        manifest: manifest.to_text(),
        csv,
        weights,
        model_file: artifact.to_bytes(),
        summary: rep.summary,
        folds_csv: rep.folds_csv,
    })
}

fn determinism() -> Result<String, String> {
    let a = pipeline(SEED)?;
    let b = pipeline(SEED)?;
    let c = pipeline(SEED + 1)?;
    ensure(a.manifest == b.manifest, || "manifests differ".into())?;
    ensure(a.csv == b.csv, || "dataset CSVs differ".into())?;
    ensure(a.weights == b.weights, || "weight files differ".into())?;
    ensure(a.model_file == b.model_file, || {
        "model artifacts differ".into()
    })?;
    ensure(a.summary == b.summary && a.folds_csv == b.folds_csv, || {
        "reports differ".into()
    })?;
    ensure(a.csv != c.csv, || {
        "a different seed gave the same dataset".into()
    })?;
    Ok(format!(
        "identical manifest, {} byte CSV, {} byte weights, reports; other seed differs",
        a.csv.len(),
        a.weights.len()
    ))
}

// ---------------------------------------------------------------------------
// 10. Toy separability.

/// First epoch (1-based) after which every training sample is classified
/// correctly, if any.
fn epochs_to_separate(
    arch: Architecture,
    ds: &Dataset,
    epochs: usize,
) -> Result<Option<usize>, String> {
    let cfg = TrainConfig {
        epochs,
        ..TrainConfig::for_arch(arch, SEED)
    };
    let mut first = None;
    train_network_observed(arch, ds, &cfg, |log, model: &NetModel| {
        if first.is_none()
            && ds
                .samples
                .iter()
                .all(|s| model.predict(&s.payload).unwrap().label == s.label)
        {
            first = Some(log.epoch + 1);
        }
    })
    .map_err(|e| e.to_string())?;
    Ok(first)
}

fn toy_separability() -> Result<String, String> {
    let ds = toy_separable(50, SEED);
    let mlp = epochs_to_separate(Architecture::Mlp, &ds, 50)?;
    let cnn = epochs_to_separate(Architecture::Cnn, &ds, 30)?;
    let show = |e: Option<usize>| e.map_or("never".to_string(), |e| format!("epoch {e}"));
    let detail = format!(
        "mlp 100% at {} (budget 50), cnn 100% at {} (budget 30)",
        show(mlp),
        show(cnn)
    );
    ensure(mlp.is_some() && cnn.is_some(), || detail.clone())?;

    // Swapping the labels swaps what the trained network says.
    let mut flipped = ds.clone();
    for s in &mut flipped.samples {
        s.label = s.label.flipped();
    }
    let flipped_epochs = epochs_to_separate(Architecture::Mlp, &flipped, 50)?;
    ensure(flipped_epochs.is_some(), || {
        format!("label-flipped toy set not separated; {detail}")
    })?;
    Ok(format!("{detail}; label-flipped set also separated"))
}
