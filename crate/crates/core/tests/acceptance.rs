//! Acceptance run. Prints one `PASS`/`FAIL` line per criterion and exits
//! non-zero when any criterion fails.
//!
//! `VLTB_ACCEPTANCE=1,2,10` restricts the run to the listed criteria.

#[path = "common/grad_suite.rs"]
mod grad_suite;
#[path = "common/oracle_suite.rs"]
mod oracle_suite;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use vltb::config::ExperimentConfig;
use vltb::datagen::{gen_scene, generate_sample, invert_shift, render, scene_seed, DatasetConfig, DomainStyle, SampleRecord, Split};
use vltb::experiment::{
    self as exp, corrupt_rows, dg_value, finetune_and_eval, pretrain_compare, pretrain_encoder, seeded, severity_curve, Datasets, RunKey,
    FULL_FINETUNE,
};
use vltb::finetune::TrainConfig;
use vltb::lemma1::{agreement_rate, build_world, encoder_agreement, sweep, sweep_csv, world_decoder};
use vltb::metrics::{dg_mean, report_csv, rpd, ReportRow};
use vltb::nets::{Checkpoint, FreezeDirection, FreezeSpec};
use vltb::pretrain::{pooled_embeddings, PretrainConfig, PretrainMode};

fn configs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    let path = configs_dir().join(name);
    ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

/// Encoders and fine-tuned models already trained, keyed by the resolved
/// configs that produced them, so criteria sharing a run train it once.
#[derive(Default)]
struct Cache {
    data: Vec<(DatasetConfig, Datasets)>,
    encoders: Vec<(DatasetConfig, PretrainConfig, Checkpoint)>,
    models: Vec<(DatasetConfig, PretrainConfig, TrainConfig, Checkpoint, Vec<ReportRow>)>,
}

impl Cache {
    fn data(&mut self, cfg: &DatasetConfig) -> Datasets {
        if let Some((_, d)) = self.data.iter().find(|(c, _)| c == cfg) {
            return d.clone();
        }
        let d = Datasets::generate(cfg).unwrap();
        self.data.push((cfg.clone(), d.clone()));
        d
    }

    fn encoder(&mut self, cfg: &ExperimentConfig, seed: u64, mode: PretrainMode) -> Checkpoint {
        let dc = cfg.data_for(seed);
        let pc = seeded(cfg, seed).pretrain_for(seed, mode);
        if let Some((_, _, ck)) = self.encoders.iter().find(|(d, p, _)| *d == dc && *p == pc) {
            return ck.clone();
        }
        let data = self.data(&dc);
        let ck = pretrain_encoder(cfg, seed, mode, &data, None).unwrap();
        self.encoders.push((dc, pc, ck.clone()));
        ck
    }

    /// Fine-tuned model and its metric rows; the run id of cached rows is
    /// rewritten to `key.run_id`.
    fn model(&mut self, cfg: &ExperimentConfig, key: &RunKey, mode: PretrainMode, freeze: FreezeSpec) -> (Checkpoint, Vec<ReportRow>) {
        let dc = cfg.data_for(key.seed);
        let pc = seeded(cfg, key.seed).pretrain_for(key.seed, mode);
        let tc = cfg.finetune_for(key.seed, freeze);
        if let Some((.., ck, rows)) = self.models.iter().find(|(d, p, t, ..)| *d == dc && *p == pc && *t == tc) {
            let rows = rows.iter().map(|r| ReportRow { run_id: key.run_id.clone(), ..r.clone() }).collect();
            return (ck.clone(), rows);
        }
        let init = self.encoder(cfg, key.seed, mode);
        let data = self.data(&dc);
        let (model, _, rows) = finetune_and_eval(cfg, key, freeze, &init, &data, None).unwrap();
        self.models.push((dc, pc, tc, model.clone(), rows.clone()));
        (model, rows)
    }
}

fn key(run_id: &str, seed: u64, mode: PretrainMode, cfg: &ExperimentConfig) -> RunKey {
    RunKey {
        run_id: run_id.into(),
        seed,
        init_mode: mode.name().into(),
        task: cfg.finetune.task,
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn run_cases(cases: &[(&'static str, fn())]) -> Vec<&'static str> {
    cases.iter().filter(|(_, f)| catch_unwind(AssertUnwindSafe(f)).is_err()).map(|c| c.0).collect()
}

fn criterion_1() -> Verdict {
    let cases = [
        (80.8, [58.0, 69.1, 58.6], 76.6),
        (85.0, [66.0, 77.2, 73.3], 84.9),
        (75.0, [66.3, 54.1, 64.9], 82.4),
    ];
    let mut ok = true;
    let mut got = Vec::new();
    for (src, tgt, want) in cases {
        let v = rpd(src, &tgt).unwrap();
        ok &= (v - want).abs() <= 0.05;
        got.push(format!("{v:.3}"));
    }
    verdict(ok, format!("rPD = {} (expected 76.6, 84.9, 82.4 ± 0.05)", got.join(", ")))
}

fn criterion_2() -> Verdict {
    let v = dg_mean(&[65.3, 58.3, 66.0, 62.6]).unwrap();
    // the exact mean 63.05 sits on the tolerance boundary; allow float rounding
    verdict((v - 63.1).abs() <= 0.05 + 1e-9, format!("DG mean = {v:.4} (expected 63.1 ± 0.05)"))
}

fn criterion_3() -> Verdict {
    let cfg = load("lemma1.ini");
    let s = &cfg.sweep;
    let mut worst = f64::INFINITY;
    let mut ok = true;
    let mut cells = 0;
    for seed in [cfg.data.seed, 1, 2, 3, 4] {
        for row in sweep(&s.lemma_p, &[0.0], s.lemma_n, seed).unwrap() {
            ok &= row.rate >= row.p;
            worst = worst.min(row.rate - row.p);
            cells += 1;
        }
        // the decoder-agnostic claim: any deterministic decoder, here a coarse hash of the embedding
        for &p in &s.lemma_p {
            let w = build_world(s.lemma_n, p, 0.0, seed).unwrap();
            let r = agreement_rate(&w, |e: &[f64]| (e.iter().sum::<f64>() * 1e3).round() as i64 % 7);
            ok &= r.rate >= p;
            worst = worst.min(r.rate - p);
            ok &= agreement_rate(&w, world_decoder(&w)).rate >= p;
            cells += 1;
        }
    }
    verdict(ok, format!("{cells} (p, seed, decoder) cells at n = {}; min(rate − p) = {worst:.4}", s.lemma_n))
}

fn criterion_4() -> Verdict {
    let failed = run_cases(grad_suite::CASES);
    verdict(
        failed.is_empty(),
        format!("{} groups of primitives and losses, 100 instances each; failing: {:?}", grad_suite::CASES.len(), failed),
    )
}

fn criterion_5() -> Verdict {
    let failed = run_cases(oracle_suite::CASES);
    verdict(failed.is_empty(), format!("Hungarian 1000 trials, mAP50 500 trials; failing: {failed:?}"))
}

fn criterion_10() -> Verdict {
    let cfg = DatasetConfig::default();
    let domains: Vec<u32> = cfg.target_domains();
    let styles: Vec<DomainStyle> = domains.iter().map(|&d| DomainStyle::for_domain(d, cfg.seed)).collect();
    let scenes = 10_000 / (1 + domains.len());
    let mut samples = 0;
    let mut worst: f64 = 0.0;
    let mut semantic_ok = true;
    for i in 0..scenes as u64 {
        let scene = gen_scene(scene_seed(&cfg, Split::Val, i), &cfg);
        let base = render(&scene, &DomainStyle::identity(), cfg.image_size);
        samples += 1;
        for style in &styles {
            let shifted = render(&scene, style, cfg.image_size);
            semantic_ok &= shifted.mask == base.mask && shifted.boxes == base.boxes;
            let back = invert_shift(&shifted.image.data, style);
            worst = back.iter().zip(&base.image.data).map(|(a, b)| (a - b).abs()).fold(worst, f64::max);
            samples += 1;
        }
        // the stored 8-bit records share labels too
        if i % 50 == 0 {
            let a = generate_sample(&cfg, Split::Val, i, 0);
            for &d in &domains {
                let b = generate_sample(&cfg, Split::Val, i, d);
                semantic_ok &= a.mask == b.mask && a.boxes == b.boxes;
            }
        }
    }
    verdict(
        semantic_ok && worst < 1e-9,
        format!("{samples} samples; masks/boxes style-independent: {semantic_ok}; max |invert∘apply − id| = {worst:.2e}"),
    )
}

fn dg(rows: &[ReportRow]) -> f64 {
    dg_value(rows).expect("run has target domains")
}

fn criterion_6(cache: &mut Cache) -> Verdict {
    let cfg = load("pretrain_compare.ini");
    let mut per_mode: BTreeMap<&'static str, Vec<f64>> = BTreeMap::new();
    for &seed in &cfg.sweep.seeds {
        for &mode in &cfg.sweep.init_modes {
            let k = key(&format!("compare-{}", mode.name()), seed, mode, &cfg);
            let (_, rows) = cache.model(&cfg, &k, mode, FULL_FINETUNE);
            let v = dg(&rows);
            per_mode.entry(mode.name()).or_default().push(v);
            eprintln!("  pre-training comparison: seed {seed} {:<15} DG mean {v:.2}", mode.name());
        }
    }
    let med = |m: PretrainMode| median(&mut per_mode.get(m.name()).cloned().unwrap_or_default());
    let (vl, sup, rnd) = (med(PretrainMode::VlContrastive), med(PretrainMode::SupervisedCls), med(PretrainMode::RandomInit));
    verdict(
        vl - rnd >= 5.0 && vl >= sup,
        format!("median DG mean over {} seeds: vl {vl:.2}, supervised {sup:.2}, random {rnd:.2} (vl − random = {:+.2})", cfg.sweep.seeds.len(), vl - rnd),
    )
}

fn criterion_7(cache: &mut Cache) -> Verdict {
    let cfg = load("freeze_sweep.ini");
    let depth = cfg.finetune.vit.depth;
    let mode = cfg.pretrain.mode;
    let mut wins = 0;
    let mut notes = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let full = FreezeSpec {
            k: 0,
            direction: FreezeDirection::EarlyToDeep,
        };
        let (_, rows) = cache.model(&cfg, &key(&exp::freeze_run_id(full), seed, mode, &cfg), mode, full);
        let full_dg = dg(&rows);
        let mut frozen = Vec::new();
        for &k in cfg.sweep.freeze_ks.iter().filter(|&&k| k + 2 >= depth && k > 0) {
            let spec = FreezeSpec {
                k,
                direction: FreezeDirection::EarlyToDeep,
            };
            let (_, rows) = cache.model(&cfg, &key(&exp::freeze_run_id(spec), seed, mode, &cfg), mode, spec);
            frozen.push((k, dg(&rows)));
        }
        let win = !frozen.is_empty() && frozen.iter().all(|&(_, v)| full_dg >= v);
        wins += usize::from(win);
        let fs: Vec<String> = frozen.iter().map(|(k, v)| format!("k{k} {v:.1}")).collect();
        notes.push(format!("seed {seed}: full {full_dg:.1} vs {}", fs.join(", ")));
    }
    let needed = 2.min(cfg.sweep.seeds.len());
    verdict(wins >= needed, format!("full fine-tune best in {wins}/{} seeds ({})", cfg.sweep.seeds.len(), notes.join("; ")))
}

fn criterion_8(cache: &mut Cache) -> Verdict {
    let cfg = load("corruption.ini");
    let seed = cfg.sweep.seeds[0];
    let mode = cfg.pretrain.mode;
    let k = key("corrupt", seed, mode, &cfg);
    let (model, _) = cache.model(&cfg, &k, mode, FULL_FINETUNE);
    let data = cache.data(&cfg.data_for(seed));
    let rows = corrupt_rows(&seeded(&cfg, seed), &k, &model, &data.val).unwrap();
    let curve = severity_curve(&rows).unwrap();
    let rises: Vec<f64> = curve.windows(2).map(|w| w[1] - w[0]).filter(|&d| d > 0.0).collect();
    let pass = rises.is_empty() || (rises.len() == 1 && rises[0] <= 0.5);
    let c: Vec<String> = curve.iter().map(|v| format!("{v:.2}")).collect();
    verdict(pass, format!("mean mIoU over {} corruption types, severity 1→5: {}", cfg.eval.corruptions.len(), c.join(", ")))
}

fn criterion_9(cache: &mut Cache) -> Verdict {
    let mut checks: Vec<(String, bool)> = Vec::new();

    let smoke = load("smoke.ini");
    let csv = |rows: Vec<ReportRow>| report_csv(&rows);
    let twice = |f: &dyn Fn() -> String| f() == f();
    checks.push(("smoke pretrain-compare".into(), twice(&|| csv(pretrain_compare(&smoke, None).unwrap()))));
    checks.push((
        "smoke freeze-sweep".into(),
        twice(&|| csv(exp::freeze_sweep(&smoke, FreezeDirection::EarlyToDeep, None).unwrap())),
    ));
    let corrupt_once = || {
        let c = seeded(&smoke, smoke.data.seed);
        let data = Datasets::generate(&c.data).unwrap();
        let k = key("corrupt", c.data.seed, c.pretrain.mode, &c);
        let init = pretrain_encoder(&c, c.data.seed, c.pretrain.mode, &data, None).unwrap();
        let (model, _, rows) = finetune_and_eval(&c, &k, FULL_FINETUNE, &init, &data, None).unwrap();
        csv(rows) + &csv(corrupt_rows(&c, &k, &model, &data.val).unwrap())
    };
    checks.push(("smoke single run + corruptions".into(), twice(&corrupt_once)));
    for name in ["lemma1.ini", "smoke.ini"] {
        let c = load(name);
        let s = &c.sweep;
        checks.push((
            format!("{name} lemma sweep"),
            twice(&|| sweep_csv(&sweep(&s.lemma_p, &s.lemma_noise, s.lemma_n, c.data.seed).unwrap())),
        ));
    }

    // full-size run: fine-tune again from the cached encoder and compare with the cached metrics
    let cfg = load("pretrain_compare.ini");
    let seed = cfg.sweep.seeds[0];
    let mode = PretrainMode::VlContrastive;
    let k = key(&format!("compare-{}", mode.name()), seed, mode, &cfg);
    let (_, cached) = cache.model(&cfg, &k, mode, FULL_FINETUNE);
    let init = cache.encoder(&cfg, seed, mode);
    let fresh_data = Datasets::generate(&cfg.data_for(seed)).unwrap();
    let same_data = fresh_data == cache.data(&cfg.data_for(seed));
    let (_, _, rows) = finetune_and_eval(&cfg, &k, FULL_FINETUNE, &init, &fresh_data, None).unwrap();
    checks.push(("pretrain_compare.ini seed-0 data".into(), same_data));
    checks.push(("pretrain_compare.ini seed-0 fine-tune metrics".into(), csv(rows) == csv(cached)));

    let failed: Vec<&str> = checks.iter().filter(|c| !c.1).map(|c| c.0.as_str()).collect();
    verdict(failed.is_empty(), format!("{} byte-comparisons of metrics CSVs; differing: {failed:?}", checks.len()))
}

fn cross_style_cosine(params: &vltb::nets::ParamSet, cfg: &ExperimentConfig, val: &[SampleRecord]) -> f64 {
    let by_key: BTreeMap<(u64, u32), &SampleRecord> = val.iter().map(|r| ((r.id, r.domain), r)).collect();
    let mut total = 0.0;
    let mut n = 0.0;
    for r in val.iter().filter(|r| r.domain != 0) {
        let src = by_key[&(r.id, 0)].image.to_f64();
        let tgt = r.image.to_f64();
        let e = pooled_embeddings(params, &cfg.pretrain.vit, &[&src, &tgt]).unwrap();
        let j = e.shape()[1];
        total += (0..j).map(|i| e.data()[i] * e.data()[j + i]).sum::<f64>();
        n += 1.0;
    }
    total / n
}

/// Alignment and cross-domain agreement of the contrastive encoders trained
/// for the comparison, against their shared initialization.
fn mechanism(cache: &mut Cache) -> Vec<(String, Verdict)> {
    let cfg = load("pretrain_compare.ini");
    let mut gains = Vec::new();
    let mut bridge = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let vl = cache.encoder(&cfg, seed, PretrainMode::VlContrastive);
        let init = cache.encoder(&cfg, seed, PretrainMode::RandomInit);
        let data = cache.data(&cfg.data_for(seed));
        gains.push(cross_style_cosine(&vl.params, &cfg, &data.val) - cross_style_cosine(&init.params, &cfg, &data.val));
        let source: Vec<&SampleRecord> = data.val.iter().filter(|r| r.domain == 0).collect();
        let labels: Vec<usize> = source.iter().map(|r| r.dominant_class()).collect();
        let src: Vec<_> = source.iter().map(|r| r.image.to_f64()).collect();
        let mut rates = [0.0; 2];
        for d in cfg.data.target_domains() {
            let tgt: Vec<_> = source
                .iter()
                .map(|s| data.val.iter().find(|r| r.id == s.id && r.domain == d).unwrap().image.to_f64())
                .collect();
            for (i, ck) in [&vl, &init].into_iter().enumerate() {
                rates[i] += encoder_agreement(&ck.params, &cfg.pretrain.vit, &src, &tgt, &labels).unwrap().rate / cfg.data.k_targets as f64;
            }
        }
        bridge.push(rates);
    }
    let mean_gain = gains.iter().sum::<f64>() / gains.len() as f64;
    let g: Vec<String> = gains.iter().map(|v| format!("{v:+.3}")).collect();
    let b: Vec<String> = bridge.iter().map(|r| format!("{:.3} vs {:.3}", r[0], r[1])).collect();
    vec![
        (
            "cross-style cosine gain".into(),
            verdict(mean_gain >= 0.2, format!("mean {mean_gain:+.3} over seeds ({})", g.join(", "))),
        ),
        (
            "cross-domain agreement, contrastive vs random init".into(),
            verdict(bridge.iter().all(|r| r[0] > r[1]), b.join("; ")),
        ),
    ]
}

fn main() -> ExitCode {
    let only: Option<Vec<u32>> = std::env::var("VLTB_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |id: u32| only.as_ref().map_or(true, |o| o.contains(&id));
    let mut cache = Cache::default();
    let mut results: Vec<(u32, &str, Verdict, f64, Option<f64>)> = Vec::new();

    type Job = (u32, &'static str, Option<f64>, Box<dyn Fn(&mut Cache) -> Verdict>);
    let jobs: Vec<Job> = vec![
        (1, "rPD arithmetic", Some(1.0), Box::new(|_| criterion_1())),
        (2, "DG-mean arithmetic", Some(1.0), Box::new(|_| criterion_2())),
        (3, "agreement rate ≥ p in the idealized world", Some(10.0), Box::new(|_| criterion_3())),
        (4, "gradient suite", Some(60.0), Box::new(|_| criterion_4())),
        (5, "oracle equivalence", Some(60.0), Box::new(|_| criterion_5())),
        (10, "bijective shifts, style-independent labels", Some(30.0), Box::new(|_| criterion_10())),
        (6, "pre-training comparison", Some(1800.0), Box::new(criterion_6)),
        (7, "full fine-tune vs deep freezing", None, Box::new(criterion_7)),
        (8, "corruption severity trend", None, Box::new(criterion_8)),
        (9, "determinism of checked-in configs", None, Box::new(criterion_9)),
    ];
    for (id, name, budget, job) in &jobs {
        if !wanted(*id) {
            continue;
        }
        let start = Instant::now();
        let v = job(&mut cache);
        let secs = start.elapsed().as_secs_f64();
        println!(
            "[{}] criterion {id}: {name}: {} ({secs:.1}s{})",
            if v.pass && budget.map_or(true, |b| secs < b) { "PASS" } else { "FAIL" },
            v.detail,
            budget.map_or(String::new(), |b| format!(", budget {b:.0}s"))
        );
        results.push((*id, name, v, secs, *budget));
    }
    if wanted(6) {
        for (name, v) in mechanism(&mut cache) {
            println!("[{}] supplementary: {name}: {}", if v.pass { "PASS" } else { "note" }, v.detail);
        }
    }
    let failed: Vec<u32> = results
        .iter()
        .filter(|(_, _, v, secs, budget)| !v.pass || budget.is_some_and(|b| *secs >= b))
        .map(|r| r.0)
        .collect();
    println!("acceptance: {} of {} criteria passed", results.len() - failed.len(), results.len());
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        println!("failed criteria: {failed:?}");
        ExitCode::FAILURE
    }
}
