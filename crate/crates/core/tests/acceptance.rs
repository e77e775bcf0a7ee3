//! Criteria 1-8. Prints one PASS/FAIL line per criterion and exits non-zero
//! when any fails.

mod common;

use std::time::{Duration, Instant};

use common::{linear_cam_reference, linear_head, op_checks, randomized_linear, run_op, R, CASES, GRAD_TOL};
use rand::{Rng, SeedableRng};
use timnet::cam::{compute_cam, occlusion_trial};
use timnet::datagen::{Corpus, CorpusConfig, PAD_ID};
use timnet::downstream::{DownstreamConfig, DownstreamModel, Task};
use timnet::encoders::{TextEncoder, TextEncoderConfig};
use timnet::harness::run::{run_finetune, run_pretrain};
use timnet::harness::sweep::{cell_seed, run_cell, SweepRow};
use timnet::harness::{load_splits, RunConfig, Splits, TaskKind};
use timnet::layers::Mode;
use timnet::matcher::{build_pairs, match_probabilities, PairedData, TimNet, TimNetConfig};
use timnet::metrics::MetricReport;
use timnet::seed;
use timnet::tensor::{ParamStore, Tape, Tensor};
use timnet::weights::WeightFile;

const SEEDS: [u64; 3] = [0, 1, 2];
const ORACLE_TOL: f64 = 1e-12;
const LN2_TOL: f64 = 1e-6;
const PAD_TOL: f64 = 1e-6;
const CAM_TOL: f64 = 1e-10;
const MATCH_AUROC: f64 = 0.80;
const MATCH_ACC: f64 = 0.70;
const TRANSFER_MARGIN: f64 = 0.03;
const MULTILABEL_MARGIN: f64 = 0.02;
const CAM_WIN_RATE: f64 = 0.70;
const CAM_IMAGES: usize = 100;
const CAM_AREA: f64 = 0.10;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let o = f();
    let took = t0.elapsed();
    let in_budget = budget.is_none_or(|b| took <= b);
    let pass = o.pass && in_budget;
    let budget = budget.map_or(String::new(), |b| format!(" / budget {}s", b.as_secs()));
    println!(
        "criterion {n} {}: {name}: {} ({:.1}s{budget})",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        took.as_secs_f64()
    );
    pass
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn gradient_suite() -> Outcome {
    let mut worst = (0.0f64, "");
    let ops = op_checks();
    for op in &ops {
        let e = run_op(op, CASES);
        if e > worst.0 || worst.1.is_empty() {
            worst = (e, op.name);
        }
    }
    Outcome {
        pass: worst.0 < GRAD_TOL,
        detail: format!("{} ops x {CASES} cases, worst rel err {:.2e} ({}) < {GRAD_TOL:e}", ops.len(), worst.0, worst.1),
    }
}

fn oracle_suite() -> Outcome {
    let conv = common::conv_oracle_worst();
    let (auroc, ap) = common::ranking_oracle_worst();
    let adam = common::adam_oracle_worst();
    Outcome {
        pass: [conv, auroc, ap, adam].iter().all(|&e| e < ORACLE_TOL),
        detail: format!("conv {conv:.1e}, auroc {auroc:.1e}, ap {ap:.1e}, adam {adam:.1e} < {ORACLE_TOL:e}"),
    }
}

fn bits<T: Copy + Into<f64>>(v: &[T]) -> Vec<u64> {
    v.iter().map(|&x| x.into().to_bits()).collect()
}

fn store_bits(store: &ParamStore<f32>) -> Vec<u32> {
    store.iter().flat_map(|p| p.tensor.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()).collect()
}

/// Small end-to-end run: pretrain, then fine-tune from the matcher.
fn tiny_run() -> (Vec<u8>, Vec<u8>, MetricReport) {
    let cfg = RunConfig::from_json(
        r#"{ "seed": 5,
             "text": { "d_tok": 8, "layers": 1, "ffn_dim": 8, "conv_channels": 8, "d_emb": 8 },
             "image": { "base_width": 4, "stages": 2, "feature_channels": 8, "d_emb": 8 },
             "heads": { "match_hidden": 4, "head_channels": 8, "hidden": 4 },
             "pretrain": { "epochs": 2, "batch_size": 8 },
             "finetune": { "epochs": 2, "batch_size": 8 },
             "data": { "sizes": { "pretrain": 32, "val": 16, "labeled": 32, "test": 16 } } }"#,
    )
    .unwrap();
    let splits = load_splits(&cfg).unwrap();
    let pre = run_pretrain::<f32>(&cfg, &splits).unwrap();
    let file = WeightFile::from_store(&pre.net.store);
    let ft = run_finetune::<f32>(&cfg, &splits, Some(&file), 0.5, 9).unwrap();
    let down = WeightFile::from_store(&ft.model.store);
    (file.encode().unwrap(), down.encode().unwrap(), ft.test)
}

fn exact_invariants() -> Outcome {
    let mut checks: Vec<(&str, bool)> = Vec::new();
    let corpus = Corpus::generate(8, 1, &CorpusConfig::default()).unwrap();
    let data = PairedData::<f32>::from_corpus(&corpus, &corpus.vocabulary(), 32);
    let net = TimNet::<f32>::new(&TimNetConfig::default(), 2).unwrap();
    let pairs = build_pairs(8, 1.0, 3).unwrap();
    let (x, ids, targets) = data.batch(&pairs).unwrap();

    let mut t = Tape::new();
    let xv = t.leaf(&x);
    let logits = net.match_forward(&mut t, &ids, xv, Mode::Train).unwrap();
    let probs = match_probabilities(t.value(logits));
    let loss = t.cross_entropy(logits, &targets).unwrap();
    let ln2 = (f64::from(t.value(loss)[0]) - std::f64::consts::LN_2).abs() < LN2_TOL;
    let down = DownstreamModel::<f32>::new(&DownstreamConfig::default(), 4);
    let p = down.predict(&[&corpus.items[0].tensor::<f32>()], 1).unwrap();
    checks.push(("zero-init ln2 and p=0.5", ln2 && probs.iter().all(|&q| q == 0.5) && p == [0.5]));

    let mut a = Tape::new();
    let xv = a.leaf(&x);
    let fused = net.match_forward(&mut a, &ids, xv, Mode::Eval).unwrap();
    let mut m = Tape::new();
    let xv = m.leaf(&x);
    let vt = net.text.forward(&net.store, &mut m, &ids, Mode::Eval).unwrap();
    let vi = net.image.forward(&net.store, &mut m, xv, Mode::Eval).unwrap();
    let d = m.abs_diff(vi, vt).unwrap();
    let manual = net.head.forward(&net.store, &mut m, d).unwrap();
    checks.push(("composition bit-exact", bits(a.value(fused)) == bits(m.value(manual))));
    let d2 = m.abs_diff(vt, vi).unwrap();
    checks.push(("|a-b| symmetry bit-exact", bits(m.value(d)) == bits(m.value(d2))));

    checks.push(("pad invariance", pad_gap() < PAD_TOL));

    let mut rng = R::seed_from_u64(6);
    let mut cam_worst = 0.0f64;
    for (task, k) in [(Task::Binary, 2), (Task::Multilabel, 3)] {
        let model = randomized_linear(&linear_head(task), 7);
        for _ in 0..5 {
            let img = Tensor::new(&[1, 16, 16], (0..256).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap();
            for class in 0..k {
                let got = compute_cam(&model, &img, class).unwrap();
                let want = linear_cam_reference(&model, &img, class);
                for (u, v) in got.values.iter().zip(&want.values) {
                    cam_worst = cam_worst.max((u - v).abs());
                }
            }
        }
    }
    checks.push(("CAM linear-head reduction", cam_worst < CAM_TOL));

    let file = WeightFile::from_store(&net.store);
    let bytes = file.encode().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("net.timw");
    file.save(&path).unwrap();
    let back = WeightFile::load(&path).unwrap();
    let mut restored = TimNet::<f32>::new(&TimNetConfig::default(), 99).unwrap();
    back.apply(&mut restored.store, |_| true, true).unwrap();
    let same_bytes = std::fs::read(&path).unwrap() == bytes && back.encode().unwrap() == bytes;
    checks.push(("save/load byte-identical", same_bytes && store_bits(&restored.store) == store_bits(&net.store)));

    let (m1, d1, r1) = tiny_run();
    let (m2, d2, r2) = tiny_run();
    checks.push(("same-seed runs bit-identical", m1 == m2 && d1 == d2 && r1.csv_cells() == r2.csv_cells()));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0).collect();
    Outcome {
        pass: failed.is_empty(),
        detail: if failed.is_empty() {
            format!("{} checks hold (pad gap {:.1e}, cam gap {cam_worst:.1e})", checks.len(), pad_gap())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    }
}

/// Largest embedding change when a sentence padded to 32 is re-padded to 48
/// with shared weights.
fn pad_gap() -> f64 {
    let cfg = |max_len| TextEncoderConfig {
        vocab_size: 40,
        max_len,
        ..TextEncoderConfig::default()
    };
    let mut long_store = ParamStore::<f64>::new();
    let long = TextEncoder::new(&mut long_store, &cfg(48), &mut seed::rng(&[11]));
    let mut short_store = ParamStore::<f64>::new();
    let short = TextEncoder::new(&mut short_store, &cfg(32), &mut seed::rng(&[12]));
    for p in long_store.iter() {
        let value = if p.name.ends_with("position_embedding") {
            let w = p.tensor.shape()[1];
            Tensor::new(&[32, w], p.tensor.data()[..32 * w].to_vec()).unwrap()
        } else {
            p.tensor.clone()
        };
        short_store.assign(&p.name, &value).unwrap();
    }
    let mut rng = R::seed_from_u64(13);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.random_range(1..=32);
        let sentence: Vec<usize> = (0..n).map(|_| rng.random_range(2..40)).collect();
        let pad = |len: usize| {
            let mut v = sentence.clone();
            v.resize(len, PAD_ID);
            v
        };
        let a = long.encode(&long_store, &pad(48)).unwrap();
        let b = short.encode(&short_store, &pad(32)).unwrap();
        worst = a.iter().zip(&b).fold(worst, |w, (x, y)| w.max((x - y).abs()));
    }
    worst
}

/// One replicate per seed: default corpus sizes and schedule.
struct Replicate {
    config: RunConfig,
    splits: Splits,
    matcher: WeightFile,
    val: MetricReport,
}

fn matching(reps: &mut Vec<Replicate>) -> Outcome {
    for &s in &SEEDS {
        let config = RunConfig { seed: s, ..RunConfig::default() };
        let splits = load_splits(&config).unwrap();
        let pre = run_pretrain::<f32>(&config, &splits).unwrap();
        reps.push(Replicate {
            matcher: WeightFile::from_store(&pre.net.store),
            val: pre.val,
            config,
            splits,
        });
    }
    let auroc: Vec<f64> = reps.iter().map(|r| r.val.auroc.unwrap()).collect();
    let acc: Vec<f64> = reps.iter().map(|r| r.val.acc.unwrap()).collect();
    let (ma, mc) = (mean(&auroc), mean(&acc));
    Outcome {
        pass: ma >= MATCH_AUROC && mc >= MATCH_ACC,
        detail: format!(
            "{} train / {} held-out items, mean auroc {ma:.4} (>= {MATCH_AUROC}), mean acc {mc:.4} (>= {MATCH_ACC}); per seed auroc {auroc:.4?}",
            reps[0].splits.pretrain.len(),
            reps[0].splits.val.len()
        ),
    }
}

fn cell(rep: &Replicate, task: TaskKind, init: &str, fraction: f64) -> SweepRow {
    let config = RunConfig { task, ..rep.config.clone() };
    run_cell::<f32>(&config, &rep.splits, Some(&rep.matcher), init, fraction, rep.config.seed).unwrap()
}

fn metric_mean(rows: &[SweepRow], f: fn(&MetricReport) -> Option<f64>) -> f64 {
    mean(&rows.iter().map(|r| f(&r.report).unwrap()).collect::<Vec<_>>())
}

fn transfer(reps: &[Replicate], kept: &mut Option<SweepRow>) -> Outcome {
    let arm = |init: &str, fraction: f64| -> Vec<SweepRow> { reps.iter().map(|r| cell(r, TaskKind::Binary, init, fraction)).collect() };
    let pre = arm("pretrained", 0.05);
    let s05 = arm("scratch", 0.05);
    let s50 = arm("scratch", 0.5);
    let acc = |r: &MetricReport| r.acc;
    let (p, a, b) = (metric_mean(&pre, acc), metric_mean(&s05, acc), metric_mean(&s50, acc));
    *kept = Some(pre[0].clone());
    Outcome {
        pass: p >= a + TRANSFER_MARGIN && p >= b,
        detail: format!(
            "{} labeled: pretrained@0.05 acc {p:.4} vs scratch@0.05 {a:.4} (+{:.4}, need +{TRANSFER_MARGIN}) and scratch@0.50 {b:.4}; label reduction {:.2}",
            reps[0].splits.labeled.len(),
            p - a,
            (0.5 - 0.05) / 0.5
        ),
    }
}

fn multilabel(reps: &[Replicate]) -> Outcome {
    let arm = |init: &str| -> Vec<SweepRow> { reps.iter().map(|r| cell(r, TaskKind::Multilabel, init, 0.10)).collect() };
    let auroc = |r: &MetricReport| r.auroc;
    let (p, s) = (metric_mean(&arm("pretrained"), auroc), metric_mean(&arm("scratch"), auroc));
    Outcome {
        pass: p - s >= MULTILABEL_MARGIN,
        detail: format!("fraction 0.10 macro auroc pretrained {p:.4} vs scratch {s:.4} (margin {:.4}, need {MULTILABEL_MARGIN})", p - s),
    }
}

fn cam_occlusion(rep: &Replicate) -> Outcome {
    let c = &rep.config;
    let s = cell_seed(c.seed, 0.05, c.seed, "pretrained");
    let model = run_finetune::<f32>(c, &rep.splits, Some(&rep.matcher), 0.05, s).unwrap().model;
    let mut rng = seed::rng(&[c.seed, seed::label("occlusion")]);
    let abnormal: Vec<_> = rep.splits.test.items.iter().filter(|i| i.binary_label() == Some(1)).take(CAM_IMAGES).collect();
    let mut wins = 0;
    for item in &abnormal {
        let (cam_drop, rand_drop) = occlusion_trial(&model, &item.tensor::<f32>(), 1, CAM_AREA, &mut rng).unwrap();
        wins += usize::from(cam_drop > rand_drop);
    }
    let rate = wins as f64 / abnormal.len() as f64;
    Outcome {
        pass: abnormal.len() == CAM_IMAGES && rate >= CAM_WIN_RATE,
        detail: format!("top-10% occlusion beats random in {wins}/{} abnormal images (need {CAM_WIN_RATE})", abnormal.len()),
    }
}

fn determinism(reps: &[Replicate], row: Option<&SweepRow>) -> Outcome {
    let Some(row) = row else {
        return Outcome {
            pass: false,
            detail: "no sweep row to re-run".into(),
        };
    };
    let again = cell(&reps[0], TaskKind::Binary, &row.init, row.fraction);
    let cells = |r: &SweepRow| -> Vec<u64> {
        let m = &r.report;
        [m.acc, m.auroc, m.f1, m.precision, m.recall, m.ap].iter().map(|v| v.map_or(u64::MAX, f64::to_bits)).collect()
    };
    Outcome {
        pass: again.record() == row.record() && cells(&again) == cells(row),
        detail: format!("re-ran {}@{} seed {}: {}", row.init, row.fraction, row.seed, again.record().join(",")),
    }
}

fn main() {
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let mut results = vec![
        report(1, "gradient suite", minutes(2), gradient_suite),
        report(2, "oracle suite", minutes(2), oracle_suite),
        report(3, "exact invariants", None, exact_invariants),
    ];
    let mut reps = Vec::new();
    results.push(report(4, "matching task", minutes(10), || matching(&mut reps)));
    let mut kept = None;
    results.push(report(5, "transfer benefit", minutes(20), || transfer(&reps, &mut kept)));
    results.push(report(6, "multi-label task", minutes(15), || multilabel(&reps)));
    results.push(report(7, "cam occlusion", minutes(5), || cam_occlusion(&reps[0])));
    results.push(report(8, "sweep determinism", None, || determinism(&reps, kept.as_ref())));
    let passed = results.iter().filter(|&&p| p).count();
    println!("acceptance: {passed}/{} criteria pass", results.len());
    if passed != results.len() {
        std::process::exit(1);
    }
}
