//! Acceptance criteria, one PASS/FAIL line each. Runs without the libtest
//! harness so the lines always reach the console.

use std::cell::RefCell;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use qrs_core::convnet::{
    self, backward, batch_loss, forward, ConvNetConfig, Example, FoldModel, Mode, ModelParams, Subject, DEPTHS,
};
use qrs_core::eval::{
    cross_validate, evaluate_model_on_record, f1, Database, EvalOptions, ModelSet, Path as Route, Scores,
};
use qrs_core::gru::{self, repair_corpus, train_gru, GruConfig, GruParams, SeqExample};
use qrs_core::postprocess::{advanced, moderate, salt_pepper};
use qrs_core::postprocess::{paint, postprocess, AdvancedConfig, Level, QrsNode};
use qrs_core::preprocess::{prepare_segments, WindowConfig, DEFAULT_LABEL_HALF_WIDTH};
use qrs_core::synth::{gen_corpus, CorruptionSpec, SynthRecord, SynthSpec};
use qrs_core::train::TrainConfig;
use qrs_core::wfdb::{
    decode_16, decode_212, encode_16, encode_212, encode_annotations, format_header, parse_annotations, parse_header,
    Annotation,
};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

// ---------------------------------------------------------------- 1

/// Bit-level reference for the three rule levels, written without nodes.
struct Reference {
    filled: Vec<bool>,
    moderate: Vec<usize>,
    advanced: Vec<usize>,
}

fn reference(bits: &[bool], signal: &[f64], cfg: &AdvancedConfig) -> Reference {
    let n = bits.len();
    let mut filled = bits.to_vec();
    for i in 0..n {
        if bits[i] {
            continue;
        }
        let left = (0..i).rev().find(|&j| bits[j]);
        let right = (i + 1..n).find(|&j| bits[j]);
        if let (Some(l), Some(r)) = (left, right) {
            if r - l - 1 <= 3 {
                filled[i] = true;
            }
        }
    }
    let mut runs = Vec::new();
    let mut i = 0;
    while i < n {
        if filled[i] {
            let s = i;
            while i < n && filled[i] {
                i += 1;
            }
            runs.push((s, i - s));
        } else {
            i += 1;
        }
    }
    let confident: Vec<(usize, usize)> = runs.into_iter().filter(|&(_, len)| len >= 6).collect();
    let d: Vec<f64> = signal.windows(2).map(|w| w[1] - w[0]).collect();
    let support = |start: usize, len: usize| -> usize {
        let q = start + len / 2;
        let lo = q.saturating_sub(cfg.context_half_width).min(d.len());
        let hi = (q + cfg.context_half_width).min(d.len());
        let mut top = 0.0f64;
        for v in &d[lo..hi] {
            if v.abs() > top {
                top = v.abs();
            }
        }
        (start..start + len).filter(|&k| k < d.len() && d[k].abs() > cfg.support_factor * top).count()
    };
    let mut kept: Vec<usize> = Vec::new();
    for &(s, len) in &confident {
        let q = s + len / 2;
        let sup = support(s, len);
        if cfg.strict && sup == 0 {
            continue;
        }
        let close = kept.last().is_some_and(|&c| q - c < cfg.min_rr);
        if close && sup == 0 {
            continue;
        }
        kept.push(q);
    }
    Reference { filled, moderate: confident.iter().map(|&(s, l)| s + l / 2).collect(), advanced: kept }
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let d = [0.1, -0.2, 1.0, 0.05, -0.3, 0.2, -0.9, 0.1, 0.0, 0.26, -0.1, 0.6, -0.05, 0.1, 0.2, -0.15, 0.0, 0.3];
    let mut signal = vec![0.0];
    for v in d {
        signal.push(signal.last().unwrap() + v);
    }
    let configs = [
        AdvancedConfig::default(),
        AdvancedConfig { strict: true, ..Default::default() },
        AdvancedConfig { min_rr: 8, context_half_width: 3, ..Default::default() },
        AdvancedConfig { min_rr: 8, context_half_width: 3, strict: true, ..Default::default() },
    ];
    let n = 18;
    let q = |nodes: &[QrsNode]| nodes.iter().map(|x| x.q_loc).collect::<Vec<_>>();
    for mask in 0u32..1 << n {
        let bits: Vec<bool> = (0..n).map(|i| mask >> i & 1 == 1).collect();
        let salt = postprocess(&bits, &signal, Level::Salt, &configs[0]).map_err(|e| e.to_string())?;
        let modr = postprocess(&bits, &signal, Level::Moderate, &configs[0]).map_err(|e| e.to_string())?;
        let r0 = reference(&bits, &signal, &configs[0]);
        check(paint(&salt, n) == r0.filled, || format!("salt-and-pepper differs for {mask:018b}"))?;
        check(q(&modr) == r0.moderate, || format!("moderate differs for {mask:018b}"))?;
        for cfg in &configs {
            let adv = postprocess(&bits, &signal, Level::Advanced, cfg).map_err(|e| e.to_string())?;
            let r = reference(&bits, &signal, cfg);
            check(q(&adv) == r.advanced, || format!("advanced differs for {mask:018b} with {cfg:?}"))?;
        }
    }
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(60), || format!("took {elapsed:?}"))?;
    Ok(format!("2^18 streams x 4 filter configs identical, {:.1} s", elapsed.as_secs_f64()))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let node = QrsNode::new;
    let merged = salt_pepper(&[node(2, 3), node(8, 2)]).map_err(|e| e.to_string())?;
    check(merged == vec![node(2, 8)], || format!("gap 3 should merge: {merged:?}"))?;
    let apart = salt_pepper(&[node(2, 3), node(9, 2)]).map_err(|e| e.to_string())?;
    check(apart.len() == 2, || format!("gap 4 should not merge: {apart:?}"))?;
    let two = salt_pepper(&[node(2, 3), node(7, 2)]).map_err(|e| e.to_string())?;
    check(two == vec![node(2, 7)] && two[0].q_loc == 5, || format!("gap 2 example: {two:?}"))?;

    let kept = moderate(&[node(0, 7), node(20, 5), node(40, 6)]);
    check(kept == vec![node(0, 7), node(40, 6)], || format!("confidence cut: {kept:?}"))?;

    // Nodes with q_loc 50 and 50 + distance over a flat derivative.
    let flat = vec![0.0; 200];
    let cfg = AdvancedConfig::default();
    let pair = |dist: usize| [node(47, 6), node(47 + dist, 6)];
    check(advanced(&pair(19), &flat, &cfg).len() == 1, || "distance 19 should drop the right node".into())?;
    check(advanced(&pair(20), &flat, &cfg).len() == 2, || "distance 20 should keep both".into())?;
    check(advanced(&[node(47, 6), node(62, 6)], &flat, &cfg).len() == 1, || "q 50/65 with no support".into())?;
    check(advanced(&[node(47, 6), node(77, 6)], &flat, &cfg).len() == 2, || "q 50/80".into())?;

    // Support factor: exactly a quarter of the context max is not enough.
    let mut d = vec![0.0; 200];
    d[40] = 1.0;
    d[63] = 0.25;
    check(advanced(&pair(15), &d, &cfg).len() == 1, || "|d| = 0.25 max must not count".into())?;
    d[63] = 0.2501;
    check(advanced(&pair(15), &d, &cfg).len() == 2, || "|d| > 0.25 max must count".into())?;
    d[64] = 0.3;
    check(advanced(&pair(15), &d, &cfg).len() == 2, || "support 2 keeps the node".into())?;
    Ok("gap 3/4, confidence 5/6, distance 19/20, support 0.25/0.2501 all as specified".into())
}

// ---------------------------------------------------------------- 3

const FD_SAMPLES: usize = 500;

fn fd_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= 1e-3 * analytic.abs().max(numeric.abs()) + 1e-8
}

fn cnn_fd(depth: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ModelParams::init(&ConvNetConfig::with_depth(depth), seed).map_err(|e| e.to_string())?;
    let xs: Vec<Vec<f64>> = (0..3).map(|_| (0..300).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
    let ys: Vec<Vec<bool>> = (0..3).map(|_| (0..300).map(|_| rng.random_bool(0.2)).collect()).collect();
    let batch: Vec<Example> =
        xs.iter().zip(&ys).map(|(x, y)| Example { values: x, labels: y, valid_len: 300 }).collect();
    let grad = backward(&params, &batch).map_err(|e| e.to_string())?.grad;
    let mut flat = params.trainable();
    let h = 1e-6;
    for idx in sample(&mut rng, flat.len(), FD_SAMPLES) {
        let orig = flat[idx];
        flat[idx] = orig + h;
        params.set_trainable(&flat);
        let up = batch_loss(&params, &batch).map_err(|e| e.to_string())?;
        flat[idx] = orig - h;
        params.set_trainable(&flat);
        let down = batch_loss(&params, &batch).map_err(|e| e.to_string())?;
        flat[idx] = orig;
        params.set_trainable(&flat);
        let numeric = (up - down) / (2.0 * h);
        check(fd_close(grad[idx], numeric), || {
            format!("CNN depth {depth} parameter {idx}: analytic {} vs numeric {numeric}", grad[idx])
        })?;
    }
    Ok(flat.len())
}

fn gru_fd(layers: usize, seed: u64) -> Result<usize, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = GruConfig { hidden_layers: layers, ..Default::default() };
    let mut params = GruParams::init(&cfg, seed).map_err(|e| e.to_string())?;
    let inputs: Vec<Vec<bool>> = (0..3).map(|_| (0..60).map(|_| rng.random_bool(0.3)).collect()).collect();
    let targets: Vec<Vec<bool>> = (0..3).map(|_| (0..60).map(|_| rng.random_bool(0.3)).collect()).collect();
    let batch: Vec<SeqExample> = inputs.iter().zip(&targets).map(|(i, t)| SeqExample { input: i, target: t }).collect();
    let (_, grad) = gru::backward(&params, &batch).map_err(|e| e.to_string())?;
    let mut flat = params.flat();
    let h = 1e-6;
    for idx in sample(&mut rng, flat.len(), FD_SAMPLES) {
        let orig = flat[idx];
        flat[idx] = orig + h;
        params.set_flat(&flat).map_err(|e| e.to_string())?;
        let up = gru::batch_loss(&params, &batch).map_err(|e| e.to_string())?;
        flat[idx] = orig - h;
        params.set_flat(&flat).map_err(|e| e.to_string())?;
        let down = gru::batch_loss(&params, &batch).map_err(|e| e.to_string())?;
        flat[idx] = orig;
        params.set_flat(&flat).map_err(|e| e.to_string())?;
        let numeric = (up - down) / (2.0 * h);
        check(fd_close(grad[idx], numeric), || {
            format!("GRU {layers} layer(s) parameter {idx}: analytic {} vs numeric {numeric}", grad[idx])
        })?;
    }
    Ok(flat.len())
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let c2 = cnn_fd(2, 1)?;
    let c4 = cnn_fd(4, 2)?;
    let g1 = gru_fd(1, 3)?;
    let g2 = gru_fd(2, 4)?;
    let elapsed = start.elapsed();
    check(elapsed < Duration::from_secs(300), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "{FD_SAMPLES} sampled parameters each of CNN d2 ({c2}), CNN d4 ({c4}), GRU 1L ({g1}), GRU 2L ({g2}) within 1e-3, {:.1} s",
        elapsed.as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let input: Vec<f64> = (0..300).map(|i| (i as f64 * 0.05).sin()).collect();
    for depth in DEPTHS {
        let params = ModelParams::init(&ConvNetConfig::with_depth(depth), depth as u64).map_err(|e| e.to_string())?;
        for mode in [Mode::Train, Mode::Infer] {
            let out = forward(&params, &input, mode).map_err(|e| e.to_string())?;
            check(out.len() == 300, || format!("depth {depth}: output length {}", out.len()))?;
        }
    }
    Ok(format!("depths {DEPTHS:?} map 300 samples to 300 outputs"))
}

// ---------------------------------------------------------------- 5, 6

struct Trained {
    corpus: Vec<SynthRecord>,
    folds: Vec<FoldModel>,
}

fn train_desk_scale() -> Result<Trained, String> {
    let corpus = gen_corpus("sub", 20, &SynthSpec { seed: 2024, ..Default::default() }).map_err(|e| e.to_string())?;
    let window = WindowConfig::default();
    let subjects = corpus
        .iter()
        .map(|r| {
            let segments = prepare_segments(&r.record, DEFAULT_LABEL_HALF_WIDTH, &window)?;
            Ok(Subject { id: r.record.name.clone(), segments })
        })
        .collect::<qrs_core::Result<Vec<_>>>()
        .map_err(|e| e.to_string())?;
    let cfg = TrainConfig { seed: 2024, ..TrainConfig::cnn() };
    let folds = convnet::train(&subjects, &cfg, &ConvNetConfig::default()).map_err(|e| e.to_string())?;
    Ok(Trained { corpus, folds })
}

fn criterion_5(shared: &RefCell<Option<Trained>>) -> Outcome {
    let start = Instant::now();
    let trained = train_desk_scale()?;
    let opts = EvalOptions::default();
    let mut f1s = Vec::new();
    for fold in &trained.folds {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for r in trained.corpus.iter().filter(|r| fold.held_out.contains(&r.record.name)) {
            let rep = evaluate_model_on_record(&fold.params, &r.record, Route::Advanced, None, &opts)
                .map_err(|e| e.to_string())?;
            tp += rep.counts.tp;
            fp += rep.counts.fp;
            fn_ += rep.counts.fn_;
        }
        f1s.push(Scores::from_counts(tp, fp, fn_).f1);
    }
    let mean = f1s.iter().sum::<f64>() / f1s.len() as f64;
    let elapsed = start.elapsed();
    let epochs: Vec<usize> = trained.folds.iter().map(|f| f.history.len()).collect();
    *shared.borrow_mut() = Some(trained);
    check(mean >= 0.95, || format!("mean held-out F1 {mean:.4} ({f1s:?})"))?;
    check(elapsed < Duration::from_secs(900), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "5-fold depth-2 held-out advanced F1 {mean:.4} (folds {}), epochs {epochs:?}, {:.0} s",
        f1s.iter().map(|f| format!("{f:.4}")).collect::<Vec<_>>().join(" "),
        elapsed.as_secs_f64()
    ))
}

fn criterion_6(shared: &RefCell<Option<Trained>>) -> Outcome {
    let start = Instant::now();
    let guard = shared.borrow();
    let trained = guard.as_ref().ok_or("no trained CNN models (criterion 5 did not finish training)")?;
    let window = WindowConfig::default();
    let records: Vec<_> = trained.corpus.iter().map(|r| r.record.clone()).collect();
    let corruption = CorruptionSpec { seed: 77, ..Default::default() };
    let pairs = repair_corpus(&trained.folds[0].params, &records, &window, DEFAULT_LABEL_HALF_WIDTH, &corruption)
        .map_err(|e| e.to_string())?;
    let model = train_gru(&pairs, &GruConfig::default(), &TrainConfig { seed: 77, ..TrainConfig::gru() })
        .map_err(|e| e.to_string())?;

    let held = gen_corpus("held", 10, &SynthSpec { seed: 4048, ..Default::default() }).map_err(|e| e.to_string())?;
    let db = Database { name: "held-out".into(), records: held.into_iter().map(|r| r.record).collect() };
    let sets = [ModelSet { depth: 2, models: trained.folds.iter().map(|f| f.params.clone()).collect() }];
    let opts = EvalOptions::default();
    let score = |route| {
        cross_validate(&sets, std::slice::from_ref(&db), route, Some(&model.params), &opts)
            .map(|r| r.rows[0].mean_f1)
            .map_err(|e| e.to_string())
    };
    let (adv, gru_f1, salt) = (score(Route::Advanced)?, score(Route::Gru)?, score(Route::Salt)?);
    check(gru_f1 >= adv - 0.03, || format!("GRU F1 {gru_f1:.4} vs advanced {adv:.4}"))?;
    Ok(format!(
        "held-out F1: GRU+salt {gru_f1:.4}, advanced {adv:.4}, salt only {salt:.4}; GRU {} epochs, {:.0} s",
        model.history.len(),
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let v = f1(0.8, 0.6);
    check((v - 0.6857).abs() <= 1e-4, || format!("f1(0.8, 0.6) = {v}"))?;
    for i in 0..=100 {
        for j in 0..=100 {
            let (p, s) = (i as f64 / 100.0, j as f64 / 100.0);
            let v = f1(p, s);
            check(v == f1(s, p), || format!("asymmetric at ({p}, {s})"))?;
            check((0.0..=1.0).contains(&v), || format!("out of range at ({p}, {s})"))?;
            if p > 0.0 && s > 0.0 {
                let harmonic = 2.0 / (1.0 / p + 1.0 / s);
                check((v - harmonic).abs() <= 1e-12, || format!("({p}, {s}): {v} vs {harmonic}"))?;
                let (lo, hi) = (p.min(s), p.max(s));
                check(v <= 2.0 * lo / (1.0 + lo / hi) + 1e-12, || format!("bound fails at ({p}, {s})"))?;
            } else {
                check(v == 0.0, || format!("({p}, {s}) should be 0"))?;
            }
        }
    }
    Ok(format!("f1(0.8, 0.6) = {v:.6}; 101x101 grid matches the harmonic mean"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let dec = |b: &[u8], n| decode_212(b, n).map_err(|e| e.to_string());
    check(dec(&[0x00, 0x00, 0x00], 2)? == vec![0, 0], || "all-zero group".into())?;
    check(dec(&[0x01, 0x08, 0x00], 1)? == vec![-2047], || "single packed sample".into())?;
    let pair = dec(&[0xE8, 0x3F, 0x01], 2)?;
    check(pair == vec![-24, 769], || format!("packed pair decoded as {pair:?}"))?;
    let d16 = |b: &[u8]| decode_16(b).map_err(|e| e.to_string());
    check(d16(&[0xFF, 0xFF])? == vec![-1], || "0xFFFF".into())?;
    check(d16(&[0x00, 0x80])? == vec![-32768], || "0x8000".into())?;
    check(d16(&[0x34, 0x12])? == vec![4660], || "0x1234".into())?;
    check(decode_16(&[1, 2, 3]).is_err() && decode_212(&[1, 2], 2).is_err(), || "truncation accepted".into())?;

    let anns = parse_annotations(&[0xC8, 0x04, 0x00, 0x00]).map_err(|e| e.to_string())?;
    check(anns == vec![Annotation::new(200, 'N')], || format!("annotation example: {anns:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..200 {
        let n = rng.random_range(0..400usize);
        let samples: Vec<i32> = (0..n).map(|_| rng.random_range(-2048..2048)).collect();
        let packed = encode_212(&samples);
        check(encode_212(&dec(&packed, n)?) == packed, || "212 bytes do not round-trip".into())?;
        check(dec(&packed, n)? == samples, || "212 samples do not round-trip".into())?;
        let wide = encode_16(&samples);
        check(d16(&wide)? == samples && encode_16(&d16(&wide)?) == wide, || "16 does not round-trip".into())?;

        let mut idx = 0usize;
        let beats: Vec<Annotation> = (0..rng.random_range(0..40))
            .map(|_| {
                idx += rng.random_range(1..3000);
                Annotation::new(idx, ['N', 'V', 'A', '/', '+', 'x'][rng.random_range(0..6)])
            })
            .collect();
        let bytes = encode_annotations(&beats).map_err(|e| e.to_string())?;
        let back = parse_annotations(&bytes).map_err(|e| e.to_string())?;
        check(back == beats, || "annotations do not round-trip".into())?;
        check(encode_annotations(&back).map_err(|e| e.to_string())? == bytes, || "annotation bytes differ".into())?;
        for cut in 0..bytes.len() {
            let res = catch_unwind(|| parse_annotations(&bytes[..cut]));
            check(matches!(res, Ok(Err(_))), || format!("truncation at {cut} of {} not rejected", bytes.len()))?;
        }
        let noise: Vec<u8> = (0..rng.random_range(0..64)).map(|_| rng.random()).collect();
        check(catch_unwind(|| parse_annotations(&noise)).is_ok(), || "random bytes crashed the parser".into())?;
        check(catch_unwind(|| decode_212(&noise, noise.len())).is_ok(), || "random bytes crashed 212".into())?;
    }

    let text = "100 2 360 650000\n100.dat 212 200 11 1024 995 -22131 0 MLII\n100.dat 212 200 11 1024 1011 20052 0 V5\n";
    let header = parse_header(text).map_err(|e| e.to_string())?;
    check(header.sampling_hz == 360.0 && header.n_signals == 2 && header.n_samples == 650000, || {
        format!("header fields: {header:?}")
    })?;
    let again = parse_header(&format_header(&header)).map_err(|e| e.to_string())?;
    check(again == header, || "header does not round-trip".into())?;
    check(parse_header("100 2\n").is_err(), || "short header line accepted".into())?;
    for cut in 0..text.len() {
        check(catch_unwind(|| parse_header(&text[..cut])).is_ok(), || format!("header cut at {cut} crashed"))?;
    }
    Ok("worked byte examples decode as computed; 200 random 212/16/annotation fixtures round-trip; truncations rejected".into())
}

// ---------------------------------------------------------------- 9, 10

fn qrs(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_qrs")).args(args).output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("qrs {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}

/// Trains and evaluates everything once into `root`.
fn pipeline_run(root: &Path, data: &Path, test: &Path) -> Result<(), String> {
    let (cnn, gru, rep, adv, grid) =
        (root.join("cnn"), root.join("gru"), root.join("rep"), root.join("adv"), root.join("grid"));
    qrs(&["train-cnn", "--data", s(data), "--out", s(&cnn), "--seed", "5", "--max-epochs", "2"])?;
    qrs(&["train-gru", "--data", s(data), "--cnn", s(&cnn), "--out", s(&gru), "--seed", "5", "--max-epochs", "2"])?;
    let gru_model = gru.join("gru.json");
    qrs(&[
        "evaluate",
        "--models",
        s(&cnn),
        "--data",
        s(test),
        "--out",
        s(&rep),
        "--path",
        "gru",
        "--gru",
        s(&gru_model),
    ])?;
    qrs(&["evaluate", "--models", s(&cnn), "--data", s(test), "--out", s(&adv), "--path", "advanced"])?;
    qrs(&[
        "sweep-gru-grid",
        "--data",
        s(data),
        "--cnn",
        s(&cnn),
        "--eval-data",
        s(test),
        "--out",
        s(&grid),
        "--layers",
        "1",
        "--seq-lens",
        "2",
        "--max-epochs",
        "1",
        "--hidden-size",
        "8",
    ])
}

fn criterion_9(tmp: &Path) -> Outcome {
    let (data, test) = (tmp.join("data"), tmp.join("test"));
    qrs(&["synth", "--out", s(&data), "--subjects", "5", "--duration-s", "20", "--seed", "1"])?;
    qrs(&["synth", "--out", s(&test), "--subjects", "2", "--duration-s", "20", "--seed", "2"])?;
    let (a, b) = (tmp.join("run_a"), tmp.join("run_b"));
    pipeline_run(&a, &data, &test)?;
    pipeline_run(&b, &data, &test)?;
    let mut files = vec!["gru/gru_history.csv".to_string(), "gru/gru.f32".into()];
    for k in 0..5 {
        files.push(format!("cnn/fold{k}_history.csv"));
        files.push(format!("cnn/fold{k}.f32"));
    }
    for dir in ["rep", "adv"] {
        files.push(format!("{dir}/report.csv"));
        files.push(format!("{dir}/report.json"));
    }
    files.push("grid/grid.csv".into());
    for f in &files {
        let x = fs::read(a.join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.join(f)).map_err(|e| format!("{f}: {e}"))?;
        check(x == y, || format!("{f} differs between reruns"))?;
    }
    Ok(format!("{} metrics and model files byte-identical across reruns", files.len()))
}

fn criterion_10(tmp: &Path) -> Outcome {
    let (data, test, cnn) = (tmp.join("data"), tmp.join("test"), tmp.join("run_a/cnn"));
    if !cnn.join("fold0.json").exists() {
        qrs(&["synth", "--out", s(&data), "--subjects", "5", "--duration-s", "20", "--seed", "1"])?;
        qrs(&["synth", "--out", s(&test), "--subjects", "2", "--duration-s", "20", "--seed", "2"])?;
        qrs(&["train-cnn", "--data", s(&data), "--out", s(&cnn), "--max-epochs", "2"])?;
    }
    let out = tmp.join("grid_full");
    let start = Instant::now();
    qrs(&[
        "sweep-gru-grid",
        "--data",
        s(&data),
        "--cnn",
        s(&cnn),
        "--eval-data",
        s(&test),
        "--out",
        s(&out),
        "--max-epochs",
        "3",
        "--hidden-size",
        "8",
    ])?;
    let csv = fs::read_to_string(out.join("grid.csv")).map_err(|e| e.to_string())?;
    let mut lines = csv.lines();
    check(lines.next() == Some("layers,seq_len_s,dataset,mean_f1,std_f1"), || format!("header: {csv}"))?;
    let mut cells = Vec::new();
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        check(f.len() == 5, || format!("malformed row '{line}'"))?;
        let layers: usize = f[0].parse().map_err(|_| format!("layers in '{line}'"))?;
        let seq: usize = f[1].parse().map_err(|_| format!("seq_len_s in '{line}'"))?;
        let mean: f64 = f[3].parse().map_err(|_| format!("mean in '{line}'"))?;
        let std: f64 = f[4].parse().map_err(|_| format!("std in '{line}'"))?;
        check(f[2] == "test" && (0.0..=1.0).contains(&mean) && std >= 0.0, || format!("bad values '{line}'"))?;
        cells.push((layers, seq));
    }
    let expected: Vec<(usize, usize)> = (1..=2).flat_map(|l| (1..=5).map(move |q| (l, q))).collect();
    check(cells == expected, || format!("grid cells {cells:?}"))?;
    Ok(format!("2x5 grid table with {} rows, {:.0} s", cells.len(), start.elapsed().as_secs_f64()))
}

fn main() {
    let tmp = tempfile::tempdir().expect("temp dir");
    let shared = RefCell::new(None);
    let criteria: Vec<Criterion> = vec![
        ("post-processing oracle equivalence", Box::new(criterion_1)),
        ("threshold boundaries", Box::new(criterion_2)),
        ("gradient correctness", Box::new(criterion_3)),
        ("no-subsampling output length", Box::new(criterion_4)),
        ("desk-scale end-to-end F1", Box::new(|| criterion_5(&shared))),
        ("learned post-processing parity", Box::new(|| criterion_6(&shared))),
        ("F1 formula", Box::new(criterion_7)),
        ("parser fidelity", Box::new(criterion_8)),
        ("determinism", Box::new(|| criterion_9(tmp.path()))),
        ("GRU grid harness", Box::new(|| criterion_10(tmp.path()))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
