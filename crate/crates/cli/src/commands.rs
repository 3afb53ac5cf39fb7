//! The five verbs.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::{Path, PathBuf};
use std::time::Instant;

use equireg_core::data::{Dataset, DatasetSpec};
use equireg_core::metrics::MetricReport;
use equireg_core::samplers::{Algorithm, Counters};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::ExperimentConfig;
use crate::container::{load_tensors, save_tensors};
use crate::error::{HarnessError, IoContext, Result};
use crate::experiment::{run_seed, Cell, Context, SeedRun};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn tensor_digest(tensors: &[equireg_core::Tensor]) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        for d in t.shape() {
            h.update((*d as u64).to_le_bytes());
        }
        for v in t.data() {
            h.update(v.to_le_bytes());
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v)?).at(path)
}

fn pool(threads: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| HarnessError::Schema(format!("thread pool: {e}")))
}

/// Sidecar describing a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: DatasetSpec,
    pub seed: u64,
    pub count: usize,
    pub shape: Vec<usize>,
    pub sha256: String,
}

/// Writes `<stem>.json` and `<stem>.eqt`.
pub fn save_dataset(dir: &Path, stem: &str, ds: &Dataset) -> Result<PathBuf> {
    let manifest = DatasetManifest {
        spec: ds.spec.clone(),
        seed: ds.seed,
        count: ds.len(),
        shape: ds.sample_shape().to_vec(),
        sha256: tensor_digest(&ds.items),
    };
    save_tensors(&dir.join(format!("{stem}.eqt")), &ds.items)?;
    let path = dir.join(format!("{stem}.json"));
    write_json(&path, &manifest)?;
    Ok(path)
}

/// Loads a dataset from its manifest; without the tensor file the items are
/// regenerated from the spec and seed. Either way the digest must match.
pub fn load_dataset(manifest: &Path) -> Result<Dataset> {
    let text = std::fs::read_to_string(manifest).at(manifest)?;
    let m: DatasetManifest = serde_json::from_str(&text)?;
    let bin = manifest.with_extension("eqt");
    let items = if bin.exists() {
        load_tensors(&bin)?
    } else {
        Dataset::generate(m.spec.clone(), m.seed)?.items
    };
    if items.len() != m.count || tensor_digest(&items) != m.sha256 {
        return Err(HarnessError::Container(format!("{} does not match its manifest", bin.display())));
    }
    Ok(Dataset {
        spec: m.spec,
        seed: m.seed,
        items,
    })
}

pub fn cmd_gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let dir = out.join("data");
    let train = Dataset::generate(cfg.dataset.clone(), cfg.data_seed)?;
    let mut test_spec = cfg.dataset.clone();
    match &mut test_spec {
        DatasetSpec::GmmPoints { n, .. } | DatasetSpec::RingManifold { n, .. } | DatasetSpec::SymShapesGrid { n, .. } => *n = cfg.test.n,
    }
    let test = Dataset::generate(test_spec, cfg.test.seed)?;
    Ok(vec![save_dataset(&dir, "train", &train)?, save_dataset(&dir, "test", &test)?])
}

pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>> {
    let ctx = Context::build(cfg)?;
    let dir = out.join("checkpoints");
    let mut written = ctx.save_checkpoints(&dir)?;
    if let Some(ae) = &ctx.autoencoder {
        let p = dir.join("autoencoder-report.json");
        write_json(&p, &ae.report)?;
        written.push(p);
    }
    Ok(written)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub version: String,
    pub manifest_hash: String,
}

impl Manifest {
    pub fn new(cfg: &ExperimentConfig) -> Self {
        let canonical = cfg.canonical();
        let seeds = cfg.seeds.clone();
        let payload = format!("{canonical}\n{seeds:?}\n{VERSION}");
        Manifest {
            config: serde_json::from_str(&canonical).expect("canonical config is JSON"),
            seeds,
            version: VERSION.into(),
            manifest_hash: sha256_hex(payload.as_bytes()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub metrics: MetricReport,
    pub counters: Counters,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub manifest_hash: String,
    pub seeds: Vec<SeedSummary>,
    pub mean: MetricReport,
    pub samples_sha256: String,
    /// Digest of this report with this field empty.
    pub report_hash: String,
}

fn mean_opt(v: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let xs: Vec<f64> = v.collect::<Option<Vec<_>>>()?;
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

fn mean_report(rs: &[MetricReport]) -> MetricReport {
    let n = rs.len().max(1) as f64;
    MetricReport {
        psnr: rs.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rs.iter().map(|r| r.ssim).sum::<f64>() / n,
        sw2: mean_opt(rs.iter().map(|r| r.sw2)),
        intra_dist: mean_opt(rs.iter().map(|r| r.intra_dist)),
        pixel_std: mean_opt(rs.iter().map(|r| r.pixel_std)),
    }
}

pub fn cmd_run(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<RunReport> {
    let ctx = Context::from_checkpoints(cfg, &out.join("checkpoints"))?;
    let runs: Vec<SeedRun> = pool(threads)?.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&s| run_seed(&ctx, &Cell::default(), s, true))
            .collect::<Result<Vec<_>>>()
    })?;
    let dir = out.join("run");
    let samples: Vec<_> = runs.iter().flat_map(|r| r.samples.iter().cloned()).collect();
    let measurements: Vec<_> = runs.iter().flat_map(|r| r.measurements.iter().cloned()).collect();
    save_tensors(&dir.join("samples.eqt"), &samples)?;
    save_tensors(&dir.join("measurements.eqt"), &measurements)?;
    let trace_path = dir.join("trace.csv");
    let mut w = csv::Writer::from_writer(File::create(&trace_path).at(&trace_path)?);
    for r in &runs {
        for row in &r.trace {
            w.serialize(row)?;
        }
    }
    w.flush().at(&trace_path)?;

    let manifest = Manifest::new(cfg);
    write_json(&dir.join("manifest.json"), &manifest)?;
    let mut report = RunReport {
        name: cfg.name.clone(),
        manifest_hash: manifest.manifest_hash,
        seeds: runs
            .iter()
            .map(|r| SeedSummary {
                seed: r.seed,
                metrics: r.metrics,
                counters: r.counters,
            })
            .collect(),
        mean: mean_report(&runs.iter().map(|r| r.metrics).collect::<Vec<_>>()),
        samples_sha256: tensor_digest(&samples),
        report_hash: String::new(),
    };
    report.report_hash = sha256_hex(serde_json::to_string(&report)?.as_bytes());
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// One CSV row per sweep cell and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub period: usize,
    pub steps: usize,
    pub mask_size: Option<usize>,
    pub k_meas: usize,
    pub k_equi: usize,
    pub seed: u64,
    pub psnr: f64,
    pub ssim: f64,
    pub sw2: Option<f64>,
    pub intra_dist: Option<f64>,
    pub pixel_std: Option<f64>,
    pub score_evals: usize,
    pub guidance_grads: usize,
    pub regularizer_grads: usize,
    pub regularized_steps: usize,
    pub inner_steps: usize,
    pub runtime_s: f64,
}

fn axis<T: Clone>(v: &[T]) -> Vec<Option<T>> {
    if v.is_empty() {
        vec![None]
    } else {
        v.iter().cloned().map(Some).collect()
    }
}

/// Cartesian product of the sweep axes in a fixed order.
pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let s = &cfg.sweep;
    let mut out = Vec::new();
    for algorithm in axis(&s.algorithm) {
        for lambda in axis(&s.lambda) {
            for period in axis(&s.period) {
                for steps in axis(&s.steps) {
                    for mask_size in axis(&s.mask_size) {
                        for k_split in axis(&s.k_split) {
                            out.push(Cell {
                                algorithm,
                                lambda,
                                period,
                                steps,
                                mask_size,
                                k_split,
                            });
                        }
                    }
                }
            }
        }
    }
    out
}

/// Runs every cell for every seed on an existing context.
pub fn sweep_context(ctx: &Context, threads: usize) -> Result<Vec<SweepRow>> {
    let cfg = &ctx.config;
    let jobs: Vec<(usize, Cell, u64)> = cells(cfg)
        .into_iter()
        .enumerate()
        .flat_map(|(i, c)| cfg.seeds.iter().map(move |&s| (i, c.clone(), s)))
        .collect();
    pool(threads)?.install(|| {
        jobs.par_iter()
            .map(|(i, cell, seed)| {
                let start = Instant::now();
                let r = run_seed(ctx, cell, *seed, false)?;
                let (sc, op) = cell.apply(&cfg.sampler, &cfg.operator);
                let mask_size = match op {
                    equireg_core::measure::OperatorSpec::BoxInpaint { size, .. } => Some(size),
                    _ => None,
                };
                Ok(SweepRow {
                    cell: *i,
                    algorithm: sc.algorithm,
                    lambda: sc.equi.lambda,
                    period: sc.equi.period,
                    steps: sc.steps,
                    mask_size,
                    k_meas: sc.k_meas,
                    k_equi: sc.k_equi,
                    seed: *seed,
                    psnr: r.metrics.psnr,
                    ssim: r.metrics.ssim,
                    sw2: r.metrics.sw2,
                    intra_dist: r.metrics.intra_dist,
                    pixel_std: r.metrics.pixel_std,
                    score_evals: r.counters.score_evals,
                    guidance_grads: r.counters.guidance_grads,
                    regularizer_grads: r.counters.regularizer_grads,
                    regularized_steps: r.counters.regularized_steps,
                    inner_steps: r.counters.inner_steps,
                    runtime_s: start.elapsed().as_secs_f64(),
                })
            })
            .collect()
    })
}

pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).at(dir)?;
    }
    let mut w = csv::Writer::from_writer(File::create(path).at(path)?);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().at(path)
}

pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path, threads: usize) -> Result<Vec<SweepRow>> {
    let ctx = Context::from_checkpoints(cfg, &out.join("checkpoints"))?;
    let rows = sweep_context(&ctx, threads)?;
    let dir = out.join("sweep");
    write_rows(&dir.join("sweep.csv"), &rows)?;
    write_json(&dir.join("manifest.json"), &Manifest::new(cfg))?;
    Ok(rows)
}

/// Mean and population standard deviation over seeds of one sweep cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell: usize,
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub period: usize,
    pub steps: usize,
    pub mask_size: Option<usize>,
    pub k_meas: usize,
    pub k_equi: usize,
    pub seeds: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    pub sw2_mean: Option<f64>,
    pub intra_dist_mean: Option<f64>,
    pub pixel_std_mean: Option<f64>,
    pub regularizer_grads: usize,
    pub guidance_grads: usize,
    pub runtime_s: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len().max(1) as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt())
}

pub fn summarize(rows: &[SweepRow]) -> Vec<CellSummary> {
    let mut groups: BTreeMap<usize, Vec<&SweepRow>> = BTreeMap::new();
    for r in rows {
        groups.entry(r.cell).or_default().push(r);
    }
    groups
        .into_values()
        .map(|g| {
            let f = g[0];
            let (psnr_mean, psnr_std) = mean_std(&g.iter().map(|r| r.psnr).collect::<Vec<_>>());
            let (ssim_mean, ssim_std) = mean_std(&g.iter().map(|r| r.ssim).collect::<Vec<_>>());
            CellSummary {
                cell: f.cell,
                algorithm: f.algorithm,
                lambda: f.lambda,
                period: f.period,
                steps: f.steps,
                mask_size: f.mask_size,
                k_meas: f.k_meas,
                k_equi: f.k_equi,
                seeds: g.len(),
                psnr_mean,
                psnr_std,
                ssim_mean,
                ssim_std,
                sw2_mean: mean_opt(g.iter().map(|r| r.sw2)),
                intra_dist_mean: mean_opt(g.iter().map(|r| r.intra_dist)),
                pixel_std_mean: mean_opt(g.iter().map(|r| r.pixel_std)),
                regularizer_grads: g.iter().map(|r| r.regularizer_grads).sum(),
                guidance_grads: g.iter().map(|r| r.guidance_grads).sum(),
                runtime_s: g.iter().map(|r| r.runtime_s).sum(),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub run: Option<RunReport>,
    pub cells: Vec<CellSummary>,
}

/// Aggregates whatever `run` and `sweep` left in `dir`.
pub fn cmd_report(dir: &Path) -> Result<Summary> {
    let run_path = dir.join("run").join("report.json");
    let sweep_path = dir.join("sweep").join("sweep.csv");
    if !run_path.exists() && !sweep_path.exists() {
        return Err(HarnessError::MissingCheckpoint(run_path));
    }
    let run = if run_path.exists() {
        Some(serde_json::from_str(&std::fs::read_to_string(&run_path).at(&run_path)?)?)
    } else {
        None
    };
    let cells = if sweep_path.exists() {
        let mut r = csv::Reader::from_path(&sweep_path)?;
        let rows = r.deserialize().collect::<std::result::Result<Vec<SweepRow>, _>>()?;
        summarize(&rows)
    } else {
        Vec::new()
    };
    let out = dir.join("report");
    write_rows(&out.join("summary.csv"), &cells)?;
    let summary = Summary { run, cells };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
