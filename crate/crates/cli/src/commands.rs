use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use hyperfscil::data::{self, EmbeddingDataset, Manifest};
use hyperfscil::metrics::{self, display, RunReport};
use hyperfscil::protocol::run_full_stream;
use serde::{Deserialize, Serialize};

use crate::config::{self, RunConfig};
use crate::error::{CliError, CliResult};
use crate::{AblateArgs, GenDataArgs, HeatmapArgs, ReportArgs, RunArgs};

pub const CONFIG_ECHO: &str = "config.json";
pub const REPORT_FILE: &str = "report.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const ABLATION_CSV: &str = "ablation.csv";
pub const ABLATION_JSON: &str = "ablation.json";
pub const CURVATURE_CSV: &str = "curvature.csv";
pub const CURVATURE_JSON: &str = "curvature.json";

fn write_file(path: &Path, contents: &[u8]) -> CliResult<()> {
    std::fs::write(path, contents).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_json<T: Serialize>(v: &T) -> Vec<u8> {
    let mut s = serde_json::to_vec_pretty(v).expect("serializable");
    s.push(b'\n');
    s
}

fn out_line(stdout: &mut dyn Write, line: &str) -> CliResult<()> {
    writeln!(stdout, "{line}")?;
    Ok(())
}

pub fn gen_data(
    args: &GenDataArgs,
    env_seed: Option<&str>,
    stdout: &mut dyn Write,
) -> CliResult<()> {
    let seed = config::seed_fallback(args.seed, env_seed)?.unwrap_or(0);
    let ds = config::synthetic_dataset(&args.preset, seed)?;
    std::fs::create_dir_all(&args.out)?;
    data::write_bundle(&ds, &args.out)?;
    let m = Manifest::of(&ds);
    out_line(
        stdout,
        &format!(
            "wrote {}: {} classes, d_img {}, d_txt {}, M {}, {} sessions, {}-shot, {} images, seed {}",
            args.out.display(),
            m.class_names.len(),
            m.d_img,
            m.d_txt,
            m.m,
            m.sessions.len(),
            m.k_shot,
            ds.images.len(),
            m.seed
        ),
    )
}

/// Runs the full stream for a resolved config.
pub fn run_config(cfg: &RunConfig) -> CliResult<RunReport> {
    let ds = cfg.load_dataset()?;
    run_on(&ds, cfg)
}

fn run_on(ds: &EmbeddingDataset, cfg: &RunConfig) -> CliResult<RunReport> {
    Ok(run_full_stream(ds, &cfg.train_config()?)?)
}

pub fn metrics_csv(report: &RunReport) -> String {
    let mut s = String::from("session,accuracy,trainable_params,lr_final\n");
    for r in &report.sessions {
        writeln!(
            s,
            "{},{},{},{}",
            r.session, r.accuracy, r.trainable_params, r.lr_final
        )
        .unwrap();
    }
    s
}

/// Writes the config echo, report, metrics table and per-session heatmaps.
pub fn write_run(dir: &Path, cfg: &RunConfig, report: &RunReport) -> CliResult<()> {
    std::fs::create_dir_all(dir)?;
    write_file(&dir.join(CONFIG_ECHO), &to_json(cfg))?;
    write_file(&dir.join(REPORT_FILE), &to_json(report))?;
    write_file(&dir.join(METRICS_FILE), metrics_csv(report).as_bytes())?;
    for (i, h) in report.heatmaps.iter().enumerate() {
        write_file(
            &dir.join(format!("heatmap_s{i}.csv")),
            h.to_csv().as_bytes(),
        )?;
    }
    Ok(())
}

pub fn run(args: &RunArgs, env_seed: Option<&str>, stdout: &mut dyn Write) -> CliResult<RunReport> {
    let cfg = config::resolve(
        args.config.config.as_deref(),
        &args.config.overrides(),
        env_seed,
    )?;
    let dir = cfg
        .out
        .clone()
        .ok_or_else(|| CliError::Config("run needs an output directory (--out)".into()))?;
    let report = run_config(&cfg)?;
    write_run(&dir, &cfg, &report)?;
    for r in &report.sessions {
        out_line(
            stdout,
            &format!(
                "session {}: acc {} (zero-shot {}), {} classes, {} trainable",
                r.session,
                display(r.accuracy),
                display(r.zero_shot_accuracy),
                r.classes_seen,
                r.trainable_params
            ),
        )?;
    }
    out_line(
        stdout,
        &format!(
            "{} ssp={} hyp={}: Avg {} PD {} final {}",
            report.sim_mode,
            report.ssp,
            report.hyp,
            display(report.avg),
            display(report.pd),
            display(report.final_accuracy())
        ),
    )?;
    Ok(report)
}

/// Mean and sample standard deviation; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Table rows in order: name, ssp, hyp.
pub const ABLATION_ROWS: [(&str, bool, bool); 4] = [
    ("Base", false, false),
    ("w/o SSP", false, true),
    ("w/o Hyp", true, false),
    ("Ours", true, true),
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub hyp: bool,
    pub ssp: bool,
    pub seeds: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub final_accuracy: f64,
    pub final_std: f64,
    pub avg: f64,
    pub pd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvatureColumn {
    pub c: f64,
    pub sim_mode: String,
    pub seeds: Vec<u64>,
    pub final_accuracy: f64,
    pub avg: f64,
    pub pd: f64,
}

/// Runs `f` for every seed on its own thread; results come back in seed order.
fn per_seed<T, F>(seeds: &[u64], f: F) -> CliResult<Vec<T>>
where
    T: Send,
    F: Fn(u64) -> CliResult<T> + Sync,
{
    std::thread::scope(|s| {
        let f = &f;
        let handles: Vec<_> = seeds.iter().map(|&seed| s.spawn(move || f(seed))).collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}

/// Dataset for a seed: the shared bundle, or synthetic data generated with that seed.
fn dataset_for(
    cfg: &RunConfig,
    shared: Option<&EmbeddingDataset>,
    seed: u64,
) -> CliResult<EmbeddingDataset> {
    match shared {
        Some(ds) => Ok(ds.clone()),
        None => config::synthetic_dataset(&cfg.preset, seed),
    }
}

fn shared_dataset(cfg: &RunConfig) -> CliResult<Option<EmbeddingDataset>> {
    cfg.dataset
        .as_ref()
        .map(|p| Ok(data::load_bundle(p)?))
        .transpose()
}

/// Runs each `(ssp, hyp, c)` variant on every seed. All variants of a seed
/// share one dataset.
fn variant_grid(
    cfg: &RunConfig,
    seeds: &[u64],
    variants: &[(bool, bool, f64)],
) -> CliResult<Vec<Vec<RunReport>>> {
    let shared = shared_dataset(cfg)?;
    let by_seed = per_seed(seeds, |seed| {
        let ds = dataset_for(cfg, shared.as_ref(), seed)?;
        variants
            .iter()
            .map(|&(ssp, hyp, c)| {
                let v = RunConfig {
                    ssp,
                    hyp,
                    c,
                    seed,
                    ..cfg.clone()
                };
                v.validate()?;
                run_on(&ds, &v)
            })
            .collect::<CliResult<Vec<_>>>()
    })?;
    // transpose to variant-major
    Ok((0..variants.len())
        .map(|i| by_seed.iter().map(|runs| runs[i].clone()).collect())
        .collect())
}

fn seeds_or_default(seeds: &[u64], cfg: &RunConfig) -> Vec<u64> {
    if seeds.is_empty() {
        vec![cfg.seed]
    } else {
        seeds.to_vec()
    }
}

pub fn ablation_table(cfg: &RunConfig, seeds: &[u64]) -> CliResult<Vec<AblationRow>> {
    let variants: Vec<_> = ABLATION_ROWS
        .iter()
        .map(|&(_, ssp, hyp)| (ssp, hyp, cfg.c))
        .collect();
    let grid = variant_grid(cfg, seeds, &variants)?;
    Ok(ABLATION_ROWS
        .iter()
        .zip(grid)
        .map(|(&(name, ssp, hyp), runs)| {
            let finals: Vec<f64> = runs.iter().map(RunReport::final_accuracy).collect();
            let (final_accuracy, final_std) = mean_std(&finals);
            AblationRow {
                name: name.into(),
                hyp,
                ssp,
                seeds: seeds.to_vec(),
                final_accuracy,
                final_std,
                avg: mean_std(&runs.iter().map(|r| r.avg).collect::<Vec<_>>()).0,
                pd: mean_std(&runs.iter().map(|r| r.pd).collect::<Vec<_>>()).0,
                final_accuracies: finals,
            }
        })
        .collect())
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("name,hyp,ssp,final_accuracy,final_std,avg,pd\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{},{}",
            r.name, r.hyp, r.ssp, r.final_accuracy, r.final_std, r.avg, r.pd
        )
        .unwrap();
    }
    s
}

/// Ssp and hyp stay on; c = 0 runs the cosine path.
pub fn curvature_sweep(
    cfg: &RunConfig,
    seeds: &[u64],
    cs: &[f64],
) -> CliResult<Vec<CurvatureColumn>> {
    let variants: Vec<_> = cs.iter().map(|&c| (true, true, c)).collect();
    let grid = variant_grid(cfg, seeds, &variants)?;
    Ok(cs
        .iter()
        .zip(grid)
        .map(|(&c, runs)| CurvatureColumn {
            c,
            sim_mode: runs[0].sim_mode.clone(),
            seeds: seeds.to_vec(),
            final_accuracy: mean_std(
                &runs
                    .iter()
                    .map(RunReport::final_accuracy)
                    .collect::<Vec<_>>(),
            )
            .0,
            avg: mean_std(&runs.iter().map(|r| r.avg).collect::<Vec<_>>()).0,
            pd: mean_std(&runs.iter().map(|r| r.pd).collect::<Vec<_>>()).0,
        })
        .collect())
}

pub fn curvature_csv(cols: &[CurvatureColumn]) -> String {
    let mut s = String::from("metric");
    for c in cols {
        write!(s, ",c={}", c.c).unwrap();
    }
    s.push('\n');
    type Cell = fn(&CurvatureColumn) -> String;
    let rows: [(&str, Cell); 4] = [
        ("final_accuracy", |c| c.final_accuracy.to_string()),
        ("avg", |c| c.avg.to_string()),
        ("pd", |c| c.pd.to_string()),
        ("sim_mode", |c| c.sim_mode.clone()),
    ];
    for (name, get) in rows {
        s.push_str(name);
        for c in cols {
            s.push(',');
            s.push_str(&get(c));
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq)]
pub enum Ablation {
    Table(Vec<AblationRow>),
    Sweep(Vec<CurvatureColumn>),
}

pub fn ablate(
    args: &AblateArgs,
    env_seed: Option<&str>,
    stdout: &mut dyn Write,
) -> CliResult<Ablation> {
    let cfg = config::resolve(
        args.config.config.as_deref(),
        &args.config.overrides(),
        env_seed,
    )?;
    let seeds = seeds_or_default(&args.seeds, &cfg);
    if let Some(dir) = &cfg.out {
        std::fs::create_dir_all(dir)?;
        write_file(&dir.join(CONFIG_ECHO), &to_json(&cfg))?;
    }
    if !args.sweep_c.is_empty() {
        let cols = curvature_sweep(&cfg, &seeds, &args.sweep_c)?;
        let csv = curvature_csv(&cols);
        if let Some(dir) = &cfg.out {
            write_file(&dir.join(CURVATURE_CSV), csv.as_bytes())?;
            write_file(&dir.join(CURVATURE_JSON), &to_json(&cols))?;
        }
        stdout.write_all(csv.as_bytes())?;
        return Ok(Ablation::Sweep(cols));
    }
    let rows = ablation_table(&cfg, &seeds)?;
    if let Some(dir) = &cfg.out {
        write_file(&dir.join(ABLATION_CSV), ablation_csv(&rows).as_bytes())?;
        write_file(&dir.join(ABLATION_JSON), &to_json(&rows))?;
    }
    for r in &rows {
        out_line(
            stdout,
            &format!(
                "{:<8} hyp={:<5} ssp={:<5} final {} ± {}  Avg {}  PD {}",
                r.name,
                r.hyp,
                r.ssp,
                display(r.final_accuracy),
                display(r.final_std),
                display(r.avg),
                display(r.pd)
            ),
        )?;
    }
    Ok(Ablation::Table(rows))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub source: String,
    pub accuracies: Vec<f64>,
    pub avg: f64,
    pub pd: f64,
    pub final_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub entries: Vec<ReportEntry>,
    pub avg: Stat,
    pub pd: Stat,
    pub final_accuracy: Stat,
}

pub fn parse_row(raw: &str) -> CliResult<Vec<f64>> {
    let vals: Vec<f64> = raw
        .split(|ch: char| ch == ',' || ch.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| {
            t.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| CliError::Config(format!("bad accuracy {t:?} in row {raw:?}")))
        })
        .collect::<CliResult<_>>()?;
    if vals.is_empty() {
        return Err(CliError::Config(format!("empty accuracy row {raw:?}")));
    }
    Ok(vals)
}

fn entry(source: String, accuracies: Vec<f64>) -> CliResult<ReportEntry> {
    let agg = metrics::aggregate(&accuracies)?;
    Ok(ReportEntry {
        source,
        final_accuracy: *accuracies.last().expect("aggregate rejects empty rows"),
        accuracies,
        avg: agg.avg,
        pd: agg.pd,
    })
}

pub fn load_report(path: &Path) -> CliResult<RunReport> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let report: RunReport = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("{}: malformed report: {e}", path.display())))?;
    report
        .check_aggregates()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    Ok(report)
}

/// Aggregates report files and bare rows into per-entry Avg/PD plus mean ± std.
pub fn summarize(reports: &[&Path], rows: &[Vec<f64>]) -> CliResult<ReportSummary> {
    let mut entries = Vec::new();
    for p in reports {
        entries.push(entry(p.display().to_string(), load_report(p)?.accuracies)?);
    }
    for (i, r) in rows.iter().enumerate() {
        entries.push(entry(format!("row{i}"), r.clone())?);
    }
    if entries.is_empty() {
        return Err(CliError::Config(
            "report needs at least one report file or --row".into(),
        ));
    }
    let stat = |f: fn(&ReportEntry) -> f64| {
        let (mean, std) = mean_std(&entries.iter().map(f).collect::<Vec<_>>());
        Stat { mean, std }
    };
    Ok(ReportSummary {
        avg: stat(|e| e.avg),
        pd: stat(|e| e.pd),
        final_accuracy: stat(|e| e.final_accuracy),
        entries,
    })
}

pub fn report(args: &ReportArgs, stdout: &mut dyn Write) -> CliResult<ReportSummary> {
    let rows = args
        .rows
        .iter()
        .map(|r| parse_row(r))
        .collect::<CliResult<Vec<_>>>()?;
    let paths: Vec<&Path> = args.reports.iter().map(|p| p.as_path()).collect();
    let summary = summarize(&paths, &rows)?;
    for e in &summary.entries {
        out_line(
            stdout,
            &format!(
                "{}: sessions {} Avg {} PD {} final {}",
                e.source,
                e.accuracies.len(),
                display(e.avg),
                display(e.pd),
                display(e.final_accuracy)
            ),
        )?;
    }
    out_line(
        stdout,
        &format!(
            "mean over {}: Avg {:.2} ± {:.2}  PD {:.2} ± {:.2}  final {:.2} ± {:.2}",
            summary.entries.len(),
            summary.avg.mean,
            summary.avg.std,
            summary.pd.mean,
            summary.pd.std,
            summary.final_accuracy.mean,
            summary.final_accuracy.std
        ),
    )?;
    if let Some(path) = &args.json {
        write_file(path, &to_json(&summary))?;
    }
    Ok(summary)
}

pub fn heatmap(args: &HeatmapArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let report = load_report(&args.report)?;
    let n = report.heatmaps.len();
    let idx = match args.session {
        Some(s) if s < n => s,
        Some(s) => {
            return Err(CliError::Config(format!(
                "session {s} out of range (report has {n})"
            )))
        }
        None if n > 0 => n - 1,
        None => return Err(CliError::Data("report has no heatmaps".into())),
    };
    let h = &report.heatmaps[idx];
    match &args.out {
        Some(path) => {
            write_file(path, h.to_csv().as_bytes())?;
            out_line(
                stdout,
                &format!(
                    "session {idx}: {} classes, diagonal {:.4}, off-diagonal {:.4}",
                    h.classes.len(),
                    h.diagonal_mean(),
                    h.off_diagonal_mean()
                ),
            )
        }
        None => {
            stdout.write_all(h.to_csv().as_bytes())?;
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_cases() {
        assert_eq!(mean_std(&[3.0]), (3.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rows_parse_with_commas_or_spaces() {
        assert_eq!(parse_row("1, 2.5 3").unwrap(), vec![1.0, 2.5, 3.0]);
        assert!(parse_row("").is_err());
        assert!(parse_row("1,x").is_err());
        assert!(parse_row("1,NaN").is_err());
    }

    #[test]
    fn bare_rows_summarize() {
        let row = parse_row("96.0, 95.9, 94.5, 94.2, 94.2, 93.7, 92.8, 92.7, 92.5").unwrap();
        let s = summarize(&[], &[row]).unwrap();
        assert!((s.pd.mean - 3.5).abs() < 1e-9);
        assert_eq!(s.pd.std, 0.0);
        assert!(summarize(&[], &[]).is_err());
    }

    #[test]
    fn curvature_table_shape() {
        let col = |c: f64, mode: &str| CurvatureColumn {
            c,
            sim_mode: mode.into(),
            seeds: vec![0],
            final_accuracy: 50.0,
            avg: 60.0,
            pd: 10.0,
        };
        let csv = curvature_csv(&[col(0.0, "cosine"), col(0.5, "hyperbolic")]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,c=0,c=0.5");
        assert_eq!(lines[4], "sim_mode,cosine,hyperbolic");
    }
}
