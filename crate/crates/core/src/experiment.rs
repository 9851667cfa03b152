//! Experiment orchestration: datasets, pre-training, fine-tuning, evaluation
//! and the multi-run suites, plus the run-directory layout they share.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::augment::{corrupt, CorruptionSpec, CorruptionType};
use crate::config::ExperimentConfig;
use crate::datagen::{export_dataset, generate_split, import_dataset, DatasetConfig, SampleRecord, Split, NUM_CLASSES, SOURCE_DOMAIN};
use crate::error::{Error, Result};
use crate::finetune::{evaluate_det, evaluate_seg, finetune_run, write_history, DetModel, HistoryRow, SegModel, Task, TrainConfig};
use crate::metrics::{dg_mean, miou, parse_report_csv, report_csv, rpd, ReportRow, REPORT_HEADER};
use crate::nets::{Checkpoint, FreezeDirection, FreezeSpec};
use crate::numerics::mix_seed;
use crate::pretrain::{run_pretrain, write_log, PretrainMode};

pub const CONFIG_FILE: &str = "config.ini";
pub const ENV_FILE: &str = "env.txt";
pub const DATA_DIR: &str = "data";
pub const ENCODER_FILE: &str = "encoder.ckpt";
pub const MODEL_FILE: &str = "model.ckpt";
pub const PRETRAIN_LOG_FILE: &str = "pretrain_log.csv";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CORRUPT_FILE: &str = "corrupt.csv";
pub const LEMMA_FILE: &str = "lemma1.csv";
pub const SUMMARY_HEADER: &str = "run_id,init_mode,task,domain,metric,n,median,min,max";

/// Domain used for the aggregate rows of a metrics file.
pub const TARGETS: &str = "targets";

pub const FULL_FINETUNE: FreezeSpec = FreezeSpec {
    k: 0,
    direction: FreezeDirection::EarlyToDeep,
};

pub fn domain_name(domain: u32) -> String {
    if domain == SOURCE_DOMAIN {
        "source".into()
    } else {
        format!("target{domain}")
    }
}

fn split_dir(root: &Path, split: Split) -> PathBuf {
    root.join(DATA_DIR).join(split.name())
}

/// The three splits of one seed's world.
#[derive(Clone, Debug, PartialEq)]
pub struct Datasets {
    pub pretrain: Vec<SampleRecord>,
    pub train: Vec<SampleRecord>,
    pub val: Vec<SampleRecord>,
}

impl Datasets {
    pub fn generate(cfg: &DatasetConfig) -> Result<Self> {
        Ok(Datasets {
            pretrain: generate_split(cfg, Split::Pretrain)?,
            train: generate_split(cfg, Split::Train)?,
            val: generate_split(cfg, Split::Val)?,
        })
    }

    pub fn export(&self, root: &Path) -> Result<()> {
        export_dataset(&self.pretrain, &split_dir(root, Split::Pretrain))?;
        export_dataset(&self.train, &split_dir(root, Split::Train))?;
        export_dataset(&self.val, &split_dir(root, Split::Val))
    }
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<SampleRecord>> {
    import_dataset(&split_dir(root, split))
}

/// Store the resolved config and an environment fingerprint in `dir`.
pub fn write_run_metadata(dir: &Path, cfg: &ExperimentConfig) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_text(&dir.join(CONFIG_FILE), &cfg.write())?;
    let env = format!(
        "package {} {}\ntarget {}-{}\nfloat f64\nthreads 1\n",
        env!("CARGO_PKG_NAME"),
        env!("CARGO_PKG_VERSION"),
        std::env::consts::ARCH,
        std::env::consts::OS
    );
    write_text(&dir.join(ENV_FILE), &env)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Config with every per-run seed set to `seed`.
pub fn seeded(cfg: &ExperimentConfig, seed: u64) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.data.seed = seed;
    c.pretrain.seed = seed;
    c.finetune.seed = seed;
    c
}

/// Per-domain metric in percent.
pub fn evaluate_model(cfg: &ExperimentConfig, model: &Checkpoint, val: &[SampleRecord]) -> Result<BTreeMap<u32, f64>> {
    let tc = &cfg.finetune;
    model.check_encoder(&tc.vit)?;
    let values = match tc.task {
        Task::Segmentation => {
            let m = SegModel {
                params: &model.params,
                vit: &tc.vit,
                decoder: &tc.decoder,
            };
            let mode = cfg.eval.infer_mode(tc.crop)?;
            evaluate_seg(&m, val, &mode, NUM_CLASSES)?
                .into_iter()
                .map(|(d, cm)| Ok((d, 100.0 * miou(&cm)?.1)))
                .collect::<Result<BTreeMap<_, _>>>()?
        }
        Task::Detection => {
            let m = DetModel {
                params: &model.params,
                vit: &tc.vit,
                decoder: &tc.decoder,
            };
            evaluate_det(&m, val, NUM_CLASSES)?.into_iter().map(|(d, v)| (d, 100.0 * v)).collect()
        }
    };
    if let Some((d, v)) = values.iter().find(|(_, v)| !(0.0..=100.0).contains(*v)) {
        return Err(Error::Invariant(format!("{} metric {v} outside [0, 100]", domain_name(*d))));
    }
    Ok(values)
}

/// Identity columns shared by every row of one run.
#[derive(Clone, Debug)]
pub struct RunKey {
    pub run_id: String,
    pub seed: u64,
    pub init_mode: String,
    pub task: Task,
}

impl RunKey {
    pub fn row(&self, domain: &str, metric: &str, value: f64) -> ReportRow {
        ReportRow {
            run_id: self.run_id.clone(),
            seed: self.seed,
            init_mode: self.init_mode.clone(),
            task: self.task.name().into(),
            domain: domain.into(),
            metric: metric.into(),
            value,
        }
    }
}

/// One row per domain plus the DG mean and rPD over the target domains.
pub fn metric_rows(key: &RunKey, per_domain: &BTreeMap<u32, f64>) -> Result<Vec<ReportRow>> {
    let metric = key.task.metric();
    let mut rows: Vec<ReportRow> = per_domain.iter().map(|(&d, &v)| key.row(&domain_name(d), metric, v)).collect();
    let targets: Vec<f64> = per_domain.iter().filter(|(&d, _)| d != SOURCE_DOMAIN).map(|(_, &v)| v).collect();
    if !targets.is_empty() {
        rows.push(key.row(TARGETS, "dg_mean", dg_mean(&targets)?));
        if let Some(&src) = per_domain.get(&SOURCE_DOMAIN) {
            if src > 0.0 {
                rows.push(key.row(TARGETS, "rpd", rpd(src, &targets)?));
            }
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn sort_rows(rows: &mut [ReportRow]) {
    rows.sort_by(|a, b| {
        (&a.run_id, &a.domain, a.seed, &a.metric, &a.init_mode, &a.task).cmp(&(&b.run_id, &b.domain, b.seed, &b.metric, &b.init_mode, &b.task))
    });
}

pub fn dg_value(rows: &[ReportRow]) -> Option<f64> {
    rows.iter().find(|r| r.domain == TARGETS && r.metric == "dg_mean").map(|r| r.value)
}

/// Corruption suite on the source validation scenes: one row per type and
/// severity, with the domain column reading `<type>/<severity>`.
pub fn corrupt_rows(cfg: &ExperimentConfig, key: &RunKey, model: &Checkpoint, val: &[SampleRecord]) -> Result<Vec<ReportRow>> {
    let source: Vec<&SampleRecord> = val.iter().filter(|r| r.domain == SOURCE_DOMAIN).take(cfg.eval.corrupt_samples).collect();
    if source.is_empty() {
        return Err(Error::invalid("corruption suite needs source-domain validation scenes"));
    }
    let mut rows = Vec::new();
    for name in &cfg.eval.corruptions {
        let kind = CorruptionType::parse(name)?;
        for severity in 1..=5u8 {
            let spec = CorruptionSpec::new(kind, severity)?;
            let shifted = source
                .iter()
                .map(|r| {
                    let img = corrupt(&r.image.to_f64(), spec, mix_seed(key.seed, r.id))?;
                    Ok(SampleRecord {
                        image: img.to_u8(),
                        ..(*r).clone()
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let values = evaluate_model(cfg, model, &shifted)?;
            rows.push(key.row(&format!("{}/{severity}", kind.name()), key.task.metric(), values[&SOURCE_DOMAIN]));
        }
    }
    sort_rows(&mut rows);
    Ok(rows)
}

/// Mean over corruption types at each severity 1..=5.
pub fn severity_curve(rows: &[ReportRow]) -> Result<[f64; 5]> {
    let mut sum = [0.0; 5];
    let mut count = [0usize; 5];
    for r in rows {
        let (_, sev) = r
            .domain
            .rsplit_once('/')
            .ok_or_else(|| Error::invalid(format!("not a corruption row: {:?}", r.domain)))?;
        let s: usize = sev.parse().map_err(|_| Error::invalid(format!("bad severity in {:?}", r.domain)))?;
        if !(1..=5).contains(&s) {
            return Err(Error::invalid(format!("bad severity in {:?}", r.domain)));
        }
        sum[s - 1] += r.value;
        count[s - 1] += 1;
    }
    if count.iter().any(|&c| c == 0) {
        return Err(Error::invalid("corruption rows do not cover severities 1..=5"));
    }
    let mut out = [0.0; 5];
    for i in 0..5 {
        out[i] = sum[i] / count[i] as f64;
    }
    Ok(out)
}

/// Pre-train one encoder for `seed`.
pub fn pretrain_encoder(cfg: &ExperimentConfig, seed: u64, mode: PretrainMode, data: &Datasets, dir: Option<&Path>) -> Result<Checkpoint> {
    let pc = seeded(cfg, seed).pretrain_for(seed, mode);
    let (ck, log) = run_pretrain(&pc, &data.pretrain)?;
    if let Some(dir) = dir {
        let mut c = seeded(cfg, seed);
        c.pretrain.mode = mode;
        write_run_metadata(dir, &c)?;
        ck.save(&dir.join(ENCODER_FILE))?;
        write_log(&dir.join(PRETRAIN_LOG_FILE), &log)?;
    }
    Ok(ck)
}

/// Fine-tune from `init` and evaluate on every validation domain.
pub fn finetune_and_eval(
    cfg: &ExperimentConfig,
    key: &RunKey,
    freeze: FreezeSpec,
    init: &Checkpoint,
    data: &Datasets,
    dir: Option<&Path>,
) -> Result<(Checkpoint, Vec<HistoryRow>, Vec<ReportRow>)> {
    let tc: TrainConfig = cfg.finetune_for(key.seed, freeze);
    let (model, history) = finetune_run(&tc, init, &data.train)?;
    let mut run_cfg = seeded(cfg, key.seed);
    run_cfg.finetune.freeze = freeze;
    let rows = metric_rows(key, &evaluate_model(&run_cfg, &model, &data.val)?)?;
    if let Some(dir) = dir {
        write_run_metadata(dir, &run_cfg)?;
        write_history(&dir.join(HISTORY_FILE), &history)?;
        write_text(&dir.join(METRICS_FILE), &report_csv(&rows))?;
    }
    Ok((model, history, rows))
}

fn sub_dir(out: Option<&Path>, name: &str) -> Option<PathBuf> {
    out.map(|o| o.join("runs").join(name))
}

/// DG mean for every init mode in `[sweep] init_modes`, for every seed.
pub fn pretrain_compare(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let data = Datasets::generate(&cfg.data_for(seed))?;
        for &mode in &cfg.sweep.init_modes {
            let init = pretrain_encoder(cfg, seed, mode, &data, None)?;
            let key = RunKey {
                run_id: format!("compare-{}", mode.name()),
                seed,
                init_mode: mode.name().into(),
                task: cfg.finetune.task,
            };
            let dir = sub_dir(out, &format!("{}-seed{seed}", key.run_id));
            rows.extend(finetune_and_eval(cfg, &key, FULL_FINETUNE, &init, &data, dir.as_deref())?.2);
        }
    }
    finish_suite(cfg, rows, out)
}

pub fn freeze_run_id(spec: FreezeSpec) -> String {
    format!("freeze-{}-k{}", spec.direction.name(), spec.k)
}

/// One fine-tune per `k` in `[sweep] freeze_ks` from the given encoder.
pub fn freeze_sweep_seed(cfg: &ExperimentConfig, seed: u64, direction: FreezeDirection, init: &Checkpoint, data: &Datasets, out: Option<&Path>) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &k in &cfg.sweep.freeze_ks {
        let spec = FreezeSpec { k, direction };
        let key = RunKey {
            run_id: freeze_run_id(spec),
            seed,
            init_mode: cfg.pretrain.mode.name().into(),
            task: cfg.finetune.task,
        };
        let dir = sub_dir(out, &format!("{}-seed{seed}", key.run_id));
        rows.extend(finetune_and_eval(cfg, &key, spec, init, data, dir.as_deref())?.2);
    }
    Ok(rows)
}

pub fn freeze_sweep(cfg: &ExperimentConfig, direction: FreezeDirection, out: Option<&Path>) -> Result<Vec<ReportRow>> {
    let mut rows = Vec::new();
    for &seed in &cfg.sweep.seeds {
        let data = Datasets::generate(&cfg.data_for(seed))?;
        let init = pretrain_encoder(cfg, seed, cfg.pretrain.mode, &data, None)?;
        rows.extend(freeze_sweep_seed(cfg, seed, direction, &init, &data, out)?);
    }
    finish_suite(cfg, rows, out)
}

fn finish_suite(cfg: &ExperimentConfig, mut rows: Vec<ReportRow>, out: Option<&Path>) -> Result<Vec<ReportRow>> {
    sort_rows(&mut rows);
    if let Some(dir) = out {
        write_run_metadata(dir, cfg)?;
        write_text(&dir.join(METRICS_FILE), &report_csv(&rows))?;
    }
    Ok(rows)
}

/// Rows of every run directory, sorted by (experiment, domain, seed).
pub fn collect_rows(run_dirs: &[PathBuf]) -> Result<Vec<ReportRow>> {
    if run_dirs.is_empty() {
        return Err(Error::invalid("report needs at least one run directory"));
    }
    let mut rows = Vec::new();
    for dir in run_dirs {
        let path = dir.join(METRICS_FILE);
        if !path.exists() {
            return Err(Error::MissingArtifact(path));
        }
        for file in [METRICS_FILE, CORRUPT_FILE] {
            let path = dir.join(file);
            if !path.exists() {
                continue;
            }
            let parsed = parse_report_csv(&read_text(&path)?).map_err(|e| Error::Format {
                file: path.clone(),
                offset: 0,
                msg: e.to_string(),
            })?;
            rows.extend(parsed);
        }
    }
    sort_rows(&mut rows);
    for w in rows.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        if (&a.run_id, &a.domain, a.seed, &a.metric) == (&b.run_id, &b.domain, b.seed, &b.metric) {
            return Err(Error::Invariant(format!(
                "duplicate row for run {} seed {} domain {} metric {}",
                a.run_id, a.seed, a.domain, a.metric
            )));
        }
    }
    Ok(rows)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Median and range over seeds for every (run, init, task, domain, metric).
pub fn summarize(rows: &[ReportRow]) -> String {
    let mut groups: BTreeMap<(&str, &str, &str, &str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((&r.run_id, &r.init_mode, &r.task, &r.domain, &r.metric))
            .or_default()
            .push(r.value);
    }
    let mut s = format!("{SUMMARY_HEADER}\n");
    for ((run, init, task, domain, metric), mut v) in groups {
        v.sort_by(f64::total_cmp);
        let _ = writeln!(
            s,
            "{run},{init},{task},{domain},{metric},{},{:.6},{:.6},{:.6}",
            v.len(),
            median(&v),
            v[0],
            v[v.len() - 1]
        );
    }
    s
}

/// Aggregated rows (same layout as a metrics file) and the seed summary.
pub fn report(run_dirs: &[PathBuf]) -> Result<(String, String)> {
    let rows = collect_rows(run_dirs)?;
    Ok((report_csv(&rows), summarize(&rows)))
}

pub const REPORT_FILE: &str = "report.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Write `report.csv` and `summary.csv` under `out`.
pub fn write_report(run_dirs: &[PathBuf], out: &Path) -> Result<()> {
    let (rows, summary) = report(run_dirs)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_text(&out.join(REPORT_FILE), &rows)?;
    write_text(&out.join(SUMMARY_FILE), &summary)
}

/// Median DG mean per run id.
pub fn median_dg(rows: &[ReportRow]) -> BTreeMap<String, f64> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.domain == TARGETS && r.metric == "dg_mean") {
        by.entry(r.run_id.clone()).or_default().push(r.value);
    }
    by.into_iter()
        .map(|(k, mut v)| {
            v.sort_by(f64::total_cmp);
            (k, median(&v))
        })
        .collect()
}

pub fn header_ok(text: &str) -> bool {
    text.lines().next() == Some(REPORT_HEADER)
}
