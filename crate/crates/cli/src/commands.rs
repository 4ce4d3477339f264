use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use cortexmorph::metrics::{icc_2_1, pearson_r, r_squared_with, RSquaredKind, RatingsTable};
use cortexmorph::optim::{register_iterative, RegistrationResult};
use cortexmorph::par;
use cortexmorph::phantom::{generate_cohort, make_phantom, PhantomSpec};
use cortexmorph::regressor::{
    infer_velocity, load_checkpoint, oracle_thickness, save_checkpoint, select_checkpoint,
    train_amortized, Checkpoint, UnetModel, ValidationSet,
};
use cortexmorph::thickness::ThicknessReport;
use cortexmorph::volume::io::{store_field, store_labels, store_volume};
use cortexmorph::ScalarVolume;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{
    load_subject, read_rows, write_rows, Manifest, ManifestRow, ResultRow, Subject,
};

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::from_io(dir, e))
}

fn write_file(path: &Path, contents: &str) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::from_io(path, e))
}

fn print_global(report: &ThicknessReport) {
    let g = &report.global;
    println!(
        "global mean_mm={:.4} std_mm={:.4} count={}",
        g.mean_mm, g.std_mm, g.count
    );
}

pub enum PhantomKindArg {
    Slab,
    Shell,
}

pub struct PhantomArgs {
    pub out: PathBuf,
    pub subjects: usize,
    pub dims: [usize; 3],
    pub kind: PhantomKindArg,
    pub thickness: f64,
    pub wm_extent: f64,
    pub levels: Vec<f64>,
}

pub fn phantom(cfg: &PipelineConfig, a: &PhantomArgs) -> CliResult<()> {
    if a.subjects == 0 {
        return Err(CliError::Input("--subjects must be >= 1".into()));
    }
    let specs: Vec<PhantomSpec> = (0..a.subjects)
        .map(|s| {
            let extent = a.wm_extent + 0.5 * (s % 4) as f64;
            match a.kind {
                PhantomKindArg::Slab => PhantomSpec::slab(a.dims, extent, a.thickness),
                PhantomKindArg::Shell => PhantomSpec::shell(a.dims, extent, a.thickness),
            }
        })
        .collect();
    let cohort = generate_cohort(&specs, &a.levels, cfg.seed)?;
    create_dir(&a.out)?;
    let mut rows = Vec::with_capacity(cohort.len());
    let mut level = BTreeMap::new();
    for e in &cohort {
        let l = level.entry(e.subject).or_insert(0usize);
        let stem = format!("s{:03}_l{:02}", e.subject, l);
        *l += 1;
        let name = |suffix: &str| PathBuf::from(format!("{stem}_{suffix}.mvol"));
        let row = ManifestRow {
            subject: e.subject,
            atrophy_mm: e.atrophy_mm,
            wm: name("wm"),
            wmgm: name("wmgm"),
            labels: Some(name("labels")),
            true_thickness_mm: Some(e.instance.true_thickness_mm),
        };
        store_volume(&e.instance.wm, a.out.join(&row.wm))?;
        store_volume(&e.instance.wmgm, a.out.join(&row.wmgm))?;
        store_labels(
            &e.instance.parcellation,
            a.out.join(row.labels.as_ref().unwrap()),
        )?;
        rows.push(row);
    }
    let manifest = a.out.join("manifest.csv");
    write_rows(&manifest, &rows)?;
    println!("wrote {} instances to {}", rows.len(), manifest.display());
    Ok(())
}

/// Where a registration input comes from.
pub enum Inputs {
    Pair {
        wm: PathBuf,
        wmgm: PathBuf,
        labels: Option<PathBuf>,
    },
    Manifest(PathBuf),
}

fn write_single(
    cfg: &PipelineConfig,
    s: &Subject,
    r: &RegistrationResult,
    out: &Path,
) -> CliResult<()> {
    let report = r.thickness_report(&s.wm, &s.wmgm, &s.labels, cfg.thresholds)?;
    create_dir(out)?;
    store_field(&r.velocity, out.join("velocity.mvol"))?;
    store_field(&r.phi, out.join("phi.mvol"))?;
    store_field(&r.phi_neg, out.join("phi_neg.mvol"))?;
    write_file(&out.join("thickness.csv"), &report.to_csv())?;
    write_file(&out.join("thickness.json"), &report.to_json())?;
    print_global(&report);
    Ok(())
}

/// Runs `estimate` on one pair or on every manifest row (concurrently, in
/// manifest order).
fn run_estimator<F>(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    out: Option<&Path>,
    estimate: F,
) -> CliResult<()>
where
    F: Fn(&ScalarVolume, &ScalarVolume) -> cortexmorph::Result<RegistrationResult> + Sync + Send,
{
    match inputs {
        Inputs::Pair { wm, wmgm, labels } => {
            let s = load_subject(wm, wmgm, labels.as_deref())?;
            let r = estimate(&s.wm, &s.wmgm)?;
            let out = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| cfg.paths.output_dir.clone());
            write_single(cfg, &s, &r, &out)
        }
        Inputs::Manifest(path) => {
            let m = Manifest::read(path)?;
            let rows: Vec<CliResult<ResultRow>> = par::map_indexed(m.rows.len(), |i| {
                let row = &m.rows[i];
                let s = m.load(row)?;
                let r = estimate(&s.wm, &s.wmgm)?;
                let report = r.thickness_report(&s.wm, &s.wmgm, &s.labels, cfg.thresholds)?;
                Ok(ResultRow {
                    subject: row.subject,
                    atrophy_mm: row.atrophy_mm,
                    true_thickness_mm: row.true_thickness_mm,
                    mean_thickness_mm: report.global.mean_mm,
                    std_mm: report.global.std_mm,
                    count: report.global.count,
                    final_loss: r.loss.total,
                    iterations: r.iterations,
                })
            });
            let rows = rows.into_iter().collect::<CliResult<Vec<_>>>()?;
            let out = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| cfg.paths.output_dir.join("results.csv"));
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                create_dir(dir)?;
            }
            write_rows(&out, &rows)?;
            println!("wrote {} results to {}", rows.len(), out.display());
            Ok(())
        }
    }
}

pub fn register(cfg: &PipelineConfig, inputs: &Inputs, out: Option<&Path>) -> CliResult<()> {
    let it = cfg.iterative();
    run_estimator(cfg, inputs, out, |wm, wmgm| {
        register_iterative(wm, wmgm, &it)
    })
}

pub fn thickness(
    cfg: &PipelineConfig,
    checkpoint: &Path,
    inputs: &Inputs,
    out: Option<&Path>,
) -> CliResult<()> {
    let cp = read_checkpoint(checkpoint)?;
    run_estimator(cfg, inputs, out, |wm, wmgm| {
        infer_velocity(&cp.model, wm, wmgm, &cfg.loss)
    })
}

fn read_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    if !path.is_file() {
        return Err(CliError::MissingFile(path.to_path_buf()));
    }
    Ok(load_checkpoint(path)?)
}

fn load_pairs(path: &Path) -> CliResult<Vec<(ScalarVolume, ScalarVolume)>> {
    let m = Manifest::read(path)?;
    m.rows
        .iter()
        .map(|row| m.load(row).map(|s| (s.wm, s.wmgm)))
        .collect()
}

#[derive(Serialize)]
struct EpochRow {
    epoch: usize,
    train_loss: Option<f64>,
    validation_loss: Option<f64>,
    metric: Option<f64>,
}

pub fn train(
    cfg: &PipelineConfig,
    manifest: &Path,
    validation: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    let tc = cfg.training();
    let pairs = load_pairs(manifest)?;
    let validation = match validation {
        Some(p) => {
            let pairs = load_pairs(p)?;
            let oracle = if pairs.len() >= 2 {
                Some(oracle_thickness(&pairs, &cfg.iterative())?)
            } else {
                eprintln!("note: fewer than 2 validation subjects; agreement metric disabled");
                None
            };
            Some(ValidationSet {
                pairs,
                oracle_thickness: oracle,
            })
        }
        None => None,
    };
    let checkpoints = train_amortized(&pairs, validation.as_ref(), &tc)?;

    let out = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| cfg.paths.output_dir.clone());
    let dir = out.join("checkpoints");
    create_dir(&dir)?;
    for c in &checkpoints {
        save_checkpoint(dir.join(format!("epoch_{:04}.mckp", c.epoch)), c)?;
    }
    let log: Vec<EpochRow> = checkpoints
        .iter()
        .map(|c| EpochRow {
            epoch: c.epoch,
            train_loss: c.train_loss,
            validation_loss: c.validation_loss,
            metric: c.metric,
        })
        .collect();
    write_rows(&out.join("training.csv"), &log)?;

    let best = match select_checkpoint(&checkpoints) {
        Ok(i) => i,
        Err(_) => fallback_choice(&checkpoints),
    };
    let chosen = &checkpoints[best];
    save_checkpoint(out.join("best.mckp"), chosen)?;
    match chosen.metric {
        Some(m) => println!("selected epoch {} (icc {m:.4})", chosen.epoch),
        None => println!("selected epoch {} (no agreement metric)", chosen.epoch),
    }
    Ok(())
}

/// Without agreement scores: lowest validation loss, otherwise the last
/// checkpoint.
fn fallback_choice(checkpoints: &[Checkpoint]) -> usize {
    let mut best: Option<(usize, f64)> = None;
    for (i, c) in checkpoints.iter().enumerate() {
        if let Some(v) = c.validation_loss.filter(|v| v.is_finite()) {
            if best.is_none_or(|(_, b)| v <= b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i).unwrap_or(checkpoints.len() - 1)
}

#[derive(Debug, Serialize, PartialEq)]
pub struct MetricEntry {
    pub metric: &'static str,
    pub value: Option<f64>,
    pub n: usize,
    pub k: usize,
}

fn key(r: &ResultRow) -> (usize, u64) {
    (r.subject, r.atrophy_mm.to_bits())
}

/// Measured atrophy of every follow-up as (induced, measured), by subject.
fn atrophy_pairs(rows: &[ResultRow]) -> CliResult<BTreeMap<usize, Vec<(f64, f64)>>> {
    let mut baseline = BTreeMap::new();
    for r in rows.iter().filter(|r| r.atrophy_mm == 0.0) {
        if baseline.insert(r.subject, r.mean_thickness_mm).is_some() {
            return Err(CliError::Input(format!(
                "subject {} has two baselines",
                r.subject
            )));
        }
    }
    let mut out: BTreeMap<usize, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.atrophy_mm > 0.0) {
        let b = baseline.get(&r.subject).ok_or_else(|| {
            CliError::Input(format!(
                "subject {} has no baseline (atrophy 0) row",
                r.subject
            ))
        })?;
        out.entry(r.subject)
            .or_default()
            .push((r.atrophy_mm, b - r.mean_thickness_mm));
    }
    for v in out.values_mut() {
        v.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    Ok(out)
}

fn scored(
    metric: &'static str,
    value: cortexmorph::Result<f64>,
    n: usize,
    k: usize,
) -> MetricEntry {
    let value = match value {
        Ok(v) => Some(v),
        Err(e) => {
            eprintln!("note: {metric} unavailable: {e}");
            None
        }
    };
    MetricEntry {
        metric,
        value,
        n,
        k,
    }
}

pub fn evaluate(
    results: &[ResultRow],
    reference: Option<&[ResultRow]>,
    mode: RSquaredKind,
) -> CliResult<Vec<MetricEntry>> {
    if results.is_empty() {
        return Err(CliError::Input("results table is empty".into()));
    }
    let mut report = Vec::new();

    let by_subject = atrophy_pairs(results)?;
    let (induced, measured): (Vec<f64>, Vec<f64>) = by_subject.values().flatten().copied().unzip();
    if !induced.is_empty() {
        let n = induced.len();
        report.push(scored(
            "r_squared",
            r_squared_with(&induced, &measured, mode),
            n,
            2,
        ));
        report.push(scored("pearson", pearson_r(&induced, &measured), n, 2));
        let steps: Vec<bool> = by_subject
            .values()
            .flat_map(|v| v.windows(2).map(|w| w[1].1 >= w[0].1).collect::<Vec<_>>())
            .collect();
        if !steps.is_empty() {
            let up = steps.iter().filter(|&&b| b).count();
            report.push(MetricEntry {
                metric: "monotone_fraction",
                value: Some(up as f64 / steps.len() as f64),
                n: steps.len(),
                k: 1,
            });
        }
    }

    let (measured, other): (Vec<f64>, Vec<f64>) = match reference {
        Some(reference) => {
            let index: BTreeMap<_, f64> = reference
                .iter()
                .map(|r| (key(r), r.mean_thickness_mm))
                .collect();
            let mut pairs = Vec::with_capacity(results.len());
            for r in results {
                let v = index.get(&key(r)).ok_or_else(|| {
                    CliError::Input(format!(
                        "reference has no row for subject {} atrophy {}",
                        r.subject, r.atrophy_mm
                    ))
                })?;
                pairs.push((r.mean_thickness_mm, *v));
            }
            pairs.into_iter().unzip()
        }
        None => results
            .iter()
            .filter_map(|r| r.true_thickness_mm.map(|t| (r.mean_thickness_mm, t)))
            .unzip(),
    };
    if !measured.is_empty() {
        let n = measured.len();
        let icc = RatingsTable::from_columns(&[measured, other]).and_then(|t| icc_2_1(&t));
        report.push(scored("icc", icc, n, 2));
    }
    Ok(report)
}

pub fn eval(
    results: &Path,
    reference: Option<&Path>,
    mode: RSquaredKind,
    out: Option<&Path>,
) -> CliResult<()> {
    let rows: Vec<ResultRow> = read_rows(results)?;
    let reference = reference.map(read_rows::<ResultRow>).transpose()?;
    let report = evaluate(&rows, reference.as_deref(), mode)?;
    let json = serde_json::to_string_pretty(&report).expect("metric entries serialize");
    match out {
        Some(p) => write_file(p, &(json + "\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct BenchReport {
    dims: [usize; 3],
    iterative_seconds: f64,
    amortized_seconds: f64,
    speedup: f64,
    iterations: usize,
}

pub fn bench(
    cfg: &PipelineConfig,
    size: usize,
    checkpoint: Option<&Path>,
    out: Option<&Path>,
) -> CliResult<()> {
    if size < 8 {
        return Err(CliError::Input("--size must be at least 8".into()));
    }
    let dims = [size; 3];
    let spec = PhantomSpec {
        jitter_seed: Some(cfg.seed),
        ..PhantomSpec::slab(dims, 0.375 * size as f64, 3.0)
    };
    let inst = make_phantom(&spec)?;
    let model = match checkpoint {
        Some(p) => read_checkpoint(p)?.model,
        None => UnetModel::new(cfg.training().model, cfg.seed)?,
    };

    let t0 = Instant::now();
    let it = register_iterative(&inst.wm, &inst.wmgm, &cfg.iterative())?;
    let iterative_seconds = t0.elapsed().as_secs_f64();
    let t1 = Instant::now();
    infer_velocity(&model, &inst.wm, &inst.wmgm, &cfg.loss)?;
    let amortized_seconds = t1.elapsed().as_secs_f64();

    let report = BenchReport {
        dims,
        iterative_seconds,
        amortized_seconds,
        speedup: iterative_seconds / amortized_seconds,
        iterations: it.iterations,
    };
    let json = serde_json::to_string_pretty(&report).expect("bench report serializes");
    match out {
        Some(p) => write_file(p, &(json + "\n")),
        None => {
            println!("{json}");
            Ok(())
        }
    }
}
