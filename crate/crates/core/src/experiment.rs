//! Seeded experiment grids, summary statistics and diagnostic tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{self, Db};
use crate::mixture::{derive_seed, load_scene, SceneManifest, SourceKind};
use crate::separation::{separate_signal, Method, SeparationConfig};
use crate::signal::{write_report, RunReport, TimeSignal};
use crate::stft::{window_len_from_ms, StftEngine, WindowKind};

/// Window lengths of the reference STFT grid.
pub const GRID_WINDOW_LENGTHS_MS: [f64; 6] = [64.0, 128.0, 256.0, 512.0, 768.0, 1024.0];

/// Shift divisors of the reference STFT grid.
pub const GRID_SHIFT_DIVISORS: [usize; 4] = [16, 8, 4, 2];

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "BSSKIT_THREADS";

/// Worker count from [`THREADS_ENV`], if set to a positive integer.
pub fn threads_from_env() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs `f` on a dedicated pool with `threads` workers (rayon's default
/// when `None`).
pub fn with_pool<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn default_filter_len() -> usize {
    eval::DEFAULT_FILTER_LEN
}

fn default_bases() -> usize {
    2
}

/// JSON experiment description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub methods: Vec<Method>,
    pub windows: Vec<WindowKind>,
    pub window_lengths_ms: Vec<f64>,
    pub shift_divisors: Vec<usize>,
    /// NMF bases per source kind; kinds not listed use `default_bases`.
    #[serde(default)]
    pub bases: BTreeMap<SourceKind, usize>,
    #[serde(default = "default_bases")]
    pub default_bases: usize,
    pub iterations: usize,
    pub seeds: Vec<u64>,
    /// Scene manifest; relative paths resolve against the config file.
    pub scenes: PathBuf,
    pub output_dir: PathBuf,
    #[serde(default = "default_filter_len")]
    pub filter_len: usize,
    #[serde(default)]
    pub ref_channel: usize,
}

impl ExperimentConfig {
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut config: ExperimentConfig = serde_json::from_str(&fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if config.scenes.is_relative() {
            config.scenes = base.join(&config.scenes);
        }
        if config.output_dir.is_relative() {
            config.output_dir = base.join(&config.output_dir);
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("methods", self.methods.is_empty()),
            ("windows", self.windows.is_empty()),
            ("window_lengths_ms", self.window_lengths_ms.is_empty()),
            ("shift_divisors", self.shift_divisors.is_empty()),
            ("seeds", self.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::invalid(format!("`{name}` must not be empty")));
        }
        if self.window_lengths_ms.iter().any(|&ms| !(ms > 0.0)) {
            return Err(Error::invalid("window lengths must be positive"));
        }
        if self.shift_divisors.contains(&0) {
            return Err(Error::invalid("shift divisors must be positive"));
        }
        Ok(())
    }

    pub fn bases_for(&self, kind: SourceKind) -> usize {
        self.bases.get(&kind).copied().unwrap_or(self.default_bases)
    }
}

/// One point of the experiment grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub index: usize,
    pub scene: usize,
    pub method: Method,
    pub window: WindowKind,
    pub window_len_ms: f64,
    pub shift_divisor: usize,
    pub trial: usize,
    /// NMF initialization seed, derived from the trial seed and the scene.
    pub seed: u64,
}

impl Cell {
    pub fn name(&self, scene_name: &str) -> String {
        format!(
            "{scene_name}_{}_{}_{}ms_div{}_t{}",
            self.method, self.window, self.window_len_ms, self.shift_divisor, self.trial
        )
    }
}

/// Cells in scene, method, window, length, divisor, trial order.
pub fn enumerate_cells(config: &ExperimentConfig, n_scenes: usize) -> Vec<Cell> {
    let mut cells = Vec::new();
    for scene in 0..n_scenes {
        for &method in &config.methods {
            for &window in &config.windows {
                for &window_len_ms in &config.window_lengths_ms {
                    for &shift_divisor in &config.shift_divisors {
                        for (trial, &base) in config.seeds.iter().enumerate() {
                            cells.push(Cell {
                                index: cells.len(),
                                scene,
                                method,
                                window,
                                window_len_ms,
                                shift_divisor,
                                trial,
                                seed: derive_seed(base, scene as u64),
                            });
                        }
                    }
                }
            }
        }
    }
    cells
}

/// Inputs of one separation run with ground truth.
#[derive(Debug, Clone)]
pub struct EvalScene {
    pub name: String,
    pub kind: SourceKind,
    pub mixture: TimeSignal<f64>,
    pub images: Vec<Vec<f64>>,
}

/// Separates and scores one cell. Failures come back as a report carrying
/// the error.
pub fn run_cell(cell: &Cell, scene: &EvalScene, config: &ExperimentConfig) -> RunReport {
    let started = Instant::now();
    let attempt = || -> Result<RunReport> {
        let rate = scene.mixture.sample_rate();
        let q = window_len_from_ms(cell.window_len_ms, rate);
        if !q.is_multiple_of(cell.shift_divisor) {
            return Err(Error::invalid(format!(
                "window of {q} samples is not divisible by {}",
                cell.shift_divisor
            )));
        }
        let engine = StftEngine::<f64>::new(cell.window, q, q / cell.shift_divisor)?;
        let sep = SeparationConfig {
            method: cell.method,
            iterations: config.iterations,
            n_bases: config.bases_for(scene.kind),
            seed: cell.seed,
            ref_channel: config.ref_channel,
            sample_rate: rate,
            track_inconsistency: true,
        };
        let (estimates, out) = separate_signal(&scene.mixture, &engine, &sep)?;
        let mut report = out.report;
        if report.error.is_none() {
            let scores = eval::evaluate(
                estimates.channels(),
                &scene.images,
                scene.mixture.channel(config.ref_channel),
                config.filter_len,
            )?;
            report = report.with_scores(scores);
        }
        Ok(report)
    };
    let mut report = attempt().unwrap_or_else(|err| {
        log::warn!("cell {} failed: {err}", cell.index);
        RunReport::builder()
            .method(cell.method.name())
            .window(cell.window.name(), cell.window_len_ms, cell.shift_divisor)
            .seed(cell.seed)
            .error(err.to_string())
            .build()
            .expect("method and seed are set")
    });
    report.wall_time_s = started.elapsed().as_secs_f64();
    report
}

/// Loads every scene of a manifest.
pub fn load_scenes(manifest_path: impl AsRef<Path>) -> Result<Vec<EvalScene>> {
    let path = manifest_path.as_ref();
    let manifest = SceneManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new(""));
    manifest
        .scenes
        .iter()
        .map(|entry| {
            let (mixture, images) = load_scene(entry, base)?;
            Ok(EvalScene {
                name: entry.name.clone(),
                kind: entry.spec.kind,
                mixture,
                images,
            })
        })
        .collect()
}

/// Per-cell reports in grid order.
#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub cells: Vec<Cell>,
    pub reports: Vec<RunReport>,
    pub summary: Vec<SummaryRow>,
}

/// Runs the grid on `threads` workers, writes one report per cell under
/// `output_dir/reports` and the summary to `output_dir/summary.csv`.
pub fn run_experiment(config: &ExperimentConfig, threads: Option<usize>) -> Result<ExperimentResult> {
    config.validate()?;
    let scenes = load_scenes(&config.scenes)?;
    if scenes.is_empty() {
        return Err(Error::invalid("scene manifest lists no scenes"));
    }
    let cells = enumerate_cells(config, scenes.len());
    log::info!("running {} cells", cells.len());
    let reports: Vec<RunReport> = with_pool(threads, || {
        cells
            .par_iter()
            .map(|cell| run_cell(cell, &scenes[cell.scene], config))
            .collect()
    })?;

    let report_dir = config.output_dir.join("reports");
    fs::create_dir_all(&report_dir)?;
    for (cell, report) in cells.iter().zip(&reports) {
        write_report(report_dir.join(cell.name(&scenes[cell.scene].name) + ".json"), report)?;
    }
    let summary = summarize(&cells, &reports);
    fs::write(config.output_dir.join("summary.csv"), summary_csv(&summary)?)?;
    Ok(ExperimentResult {
        cells,
        reports,
        summary,
    })
}

/// Lower quartile, median and upper quartile by linear interpolation between
/// order statistics; NaN for an empty sample.
pub fn quartiles(values: &[f64]) -> [f64; 3] {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return [f64::NAN; 3];
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let at = |p: f64| {
        let pos = p * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let frac = pos - lo as f64;
        let (a, b) = (v[lo], v[hi]);
        if lo == hi || a == b || frac == 0.0 {
            a
        } else if a.is_infinite() || b.is_infinite() {
            if frac < 0.5 { a } else { b }
        } else {
            a + (b - a) * frac
        }
    };
    [at(0.25), at(0.5), at(0.75)]
}

/// Box statistics of one condition over scenes and trials.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: String,
    pub window: String,
    pub window_len_ms: f64,
    pub shift_divisor: usize,
    pub runs: usize,
    pub failed: usize,
    pub delta_sdr: [f64; 3],
    pub delta_sir: [f64; 3],
    pub final_inconsistency: [f64; 3],
}

fn db_sample(v: Option<Db>) -> f64 {
    v.map_or(f64::NAN, |d| d.as_f64())
}

/// Groups reports by (method, window, length, divisor) in first-seen order.
pub fn summarize(cells: &[Cell], reports: &[RunReport]) -> Vec<SummaryRow> {
    let mut order: Vec<(Method, WindowKind, u64, usize)> = Vec::new();
    let mut groups: BTreeMap<usize, Vec<&RunReport>> = BTreeMap::new();
    for (cell, report) in cells.iter().zip(reports) {
        let key = (cell.method, cell.window, cell.window_len_ms.to_bits(), cell.shift_divisor);
        let slot = order.iter().position(|k| *k == key).unwrap_or_else(|| {
            order.push(key);
            order.len() - 1
        });
        groups.entry(slot).or_default().push(report);
    }
    groups
        .into_iter()
        .map(|(slot, reports)| {
            let (method, window, len_bits, shift_divisor) = order[slot];
            let ok: Vec<&&RunReport> = reports.iter().filter(|r| r.error.is_none()).collect();
            let sdr: Vec<f64> = ok.iter().map(|r| db_sample(r.delta_sdr_mean)).collect();
            let sir: Vec<f64> = ok.iter().map(|r| db_sample(r.delta_sir_mean)).collect();
            let inc: Vec<f64> = ok
                .iter()
                .map(|r| r.inconsistency.last().copied().unwrap_or(f64::NAN))
                .collect();
            SummaryRow {
                method: method.name().to_string(),
                window: window.name().to_string(),
                window_len_ms: f64::from_bits(len_bits),
                shift_divisor,
                runs: reports.len(),
                failed: reports.len() - ok.len(),
                delta_sdr: quartiles(&sdr),
                delta_sir: quartiles(&sir),
                final_inconsistency: quartiles(&inc),
            }
        })
        .collect()
}

fn fmt_num(v: f64) -> String {
    if v.is_nan() {
        "undefined".into()
    } else if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

pub fn summary_csv(rows: &[SummaryRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "method",
        "window",
        "window_len_ms",
        "shift_divisor",
        "runs",
        "failed",
        "delta_sdr_q1",
        "delta_sdr_median",
        "delta_sdr_q3",
        "delta_sir_q1",
        "delta_sir_median",
        "delta_sir_q3",
        "inconsistency_q1",
        "inconsistency_median",
        "inconsistency_q3",
    ])?;
    for r in rows {
        let mut rec = vec![
            r.method.clone(),
            r.window.clone(),
            fmt_num(r.window_len_ms),
            r.shift_divisor.to_string(),
            r.runs.to_string(),
            r.failed.to_string(),
        ];
        rec.extend(r.delta_sdr.iter().chain(&r.delta_sir).chain(&r.final_inconsistency).map(|&v| fmt_num(v)));
        w.write_record(&rec)?;
    }
    into_string(w)
}

fn into_string(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Format(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Curve {
    Nll,
    Inconsistency,
}

impl Curve {
    pub fn name(self) -> &'static str {
        match self {
            Curve::Nll => "nll",
            Curve::Inconsistency => "inconsistency",
        }
    }
}

/// Plot-ready table: `iter` followed by one column per report. A single
/// report gets the curve name as header, several get their labels (repeated
/// labels are numbered). Shorter histories leave trailing cells empty.
pub fn curves_csv(reports: &[(String, RunReport)], curve: Curve) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("no reports"));
    }
    let series: Vec<&[f64]> = reports
        .iter()
        .map(|(_, r)| match curve {
            Curve::Nll => r.nll.as_slice(),
            Curve::Inconsistency => r.inconsistency.as_slice(),
        })
        .collect();
    let mut header = vec!["iter".to_string()];
    if reports.len() == 1 {
        header.push(curve.name().to_string());
    } else {
        let mut seen: BTreeMap<&str, usize> = BTreeMap::new();
        for (label, _) in reports {
            let count = seen.entry(label.as_str()).or_insert(0);
            *count += 1;
            header.push(if *count == 1 { label.clone() } else { format!("{label}#{count}") });
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    let rows = series.iter().map(|s| s.len()).max().unwrap_or(0);
    for it in 0..rows {
        let mut rec = vec![it.to_string()];
        rec.extend(series.iter().map(|s| s.get(it).map_or(String::new(), |&v| fmt_num(v))));
        w.write_record(&rec)?;
    }
    into_string(w)
}

/// Symmetric uncertainty between real and imaginary STFT parts of `signal`
/// for every window, length and divisor combination.
pub fn suc_table(
    signal: &[f64],
    sample_rate: u32,
    windows: &[WindowKind],
    lengths_ms: &[f64],
    divisors: &[usize],
    bins: usize,
) -> Result<Vec<(WindowKind, f64, usize, f64)>> {
    let mut grid = Vec::new();
    for &w in windows {
        for &ms in lengths_ms {
            for &d in divisors {
                grid.push((w, ms, d));
            }
        }
    }
    grid.par_iter()
        .map(|&(w, ms, d)| {
            let q = window_len_from_ms(ms, sample_rate);
            if !q.is_multiple_of(d) {
                return Err(Error::invalid(format!("window of {q} samples is not divisible by {d}")));
            }
            let engine = StftEngine::<f64>::new(w, q, q / d)?;
            let spec = engine.forward(signal);
            let c = eval::suc_real_imag(spec.data().view(), q, bins)?;
            Ok((w, ms, d, c))
        })
        .collect()
}

pub fn suc_csv(rows: &[(WindowKind, f64, usize, f64)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["window", "window_len_ms", "shift_divisor", "suc"])?;
    for &(kind, ms, d, c) in rows {
        w.write_record([kind.name().to_string(), fmt_num(ms), d.to_string(), fmt_num(c)])?;
    }
    into_string(w)
}
