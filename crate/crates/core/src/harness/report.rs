//! Experiment execution, per-run artifacts, summaries and text tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::harness::config::ExperimentConfig;
use crate::harness::metrics::{hypervolume_2d, igd, mean_std};
use crate::optimizers::{run, RunConfig, RunResult};
use crate::problems::{true_front, Problem};
use crate::ObjectiveVector;

/// Reference point for two-objective hypervolume.
pub const HV_REFERENCE: [f64; 2] = [11.0, 11.0];

/// Environment variable naming the output root.
pub const RESULTS_ENV: &str = "GEO_RESULTS_DIR";

const NOISE_SEED_MIX: u64 = 0x9e37_79b9_7f4a_7c15;

pub const SUMMARY_HEADER: &str = "digest,algorithm,problem,d,budget,repeats,metric,mean,std";

/// One aggregated metric of one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub digest: String,
    pub algorithm: String,
    pub problem: String,
    pub dim: usize,
    pub budget: u64,
    /// Completed runs the statistics cover.
    pub repeats: usize,
    pub metric: String,
    pub mean: f64,
    pub std: f64,
}

impl SummaryRow {
    fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.digest,
            self.algorithm,
            self.problem,
            self.dim,
            self.budget,
            self.repeats,
            self.metric,
            self.mean,
            self.std
        )
    }

    fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("summary row has {} fields: `{line}`", f.len())));
        }
        let bad = |what: &str| Error::Format(format!("summary {what} in `{line}`"));
        Ok(Self {
            digest: f[0].to_string(),
            algorithm: f[1].to_string(),
            problem: f[2].to_string(),
            dim: f[3].parse().map_err(|_| bad("d"))?,
            budget: f[4].parse().map_err(|_| bad("budget"))?,
            repeats: f[5].parse().map_err(|_| bad("repeats"))?,
            metric: f[6].to_string(),
            mean: f[7].parse().map_err(|_| bad("mean"))?,
            std: f[8].parse().map_err(|_| bad("std"))?,
        })
    }
}

/// Final metrics of one completed run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunMetrics {
    pub seed: u64,
    /// `(name, value)`: `final_best`, or `hypervolume` and `igd`.
    pub values: Vec<(String, f64)>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunResult>,
    pub metrics: Vec<RunMetrics>,
    /// `(seed, error message)` of runs that did not complete.
    pub failures: Vec<(u64, String)>,
}

impl ExperimentOutcome {
    /// True when some repeats failed and the summary covers fewer runs.
    pub fn flagged(&self) -> bool {
        !self.failures.is_empty()
    }
}

/// Output root from the environment, `./results` by default.
pub fn results_root() -> PathBuf {
    std::env::var_os(RESULTS_ENV).map_or_else(|| PathBuf::from("results"), PathBuf::from)
}

/// The problem instance a run of `cfg` with `seed` evaluates.
pub fn build_problem(cfg: &ExperimentConfig, seed: u64) -> Result<Problem> {
    Problem::new(cfg.problem, cfg.dim)?.with_noise(cfg.noise_std, seed ^ NOISE_SEED_MIX)
}

/// Metrics of a finished run.
pub fn run_metrics(cfg: &ExperimentConfig, result: &RunResult) -> Result<RunMetrics> {
    let values = if cfg.problem.objectives() == 1 {
        let best = result
            .final_best()
            .ok_or_else(|| Error::InvalidArgument("run finished without evaluations".into()))?;
        vec![("final_best".to_string(), best)]
    } else {
        let (hv, d) = front_metrics(cfg, &result.final_front)?;
        vec![("hypervolume".to_string(), hv), ("igd".to_string(), d)]
    };
    Ok(RunMetrics {
        seed: result.seed,
        values,
    })
}

fn front_metrics(cfg: &ExperimentConfig, front: &[ObjectiveVector]) -> Result<(f64, f64)> {
    let truth = true_front(cfg.problem, cfg.igd_points)?;
    let hv = hypervolume_2d(front, HV_REFERENCE)?.value;
    let d = if front.is_empty() {
        f64::INFINITY
    } else {
        igd(front, &truth)?
    };
    Ok((hv, d))
}

/// Runs every repeat, writes artifacts under `root/<output name>` and
/// returns the summary. Failed repeats are recorded, not fatal.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<ExperimentOutcome> {
    run_experiment_with(cfg, root, run)
}

fn run_experiment_with<F>(cfg: &ExperimentConfig, root: &Path, runner: F) -> Result<ExperimentOutcome>
where
    F: Fn(&RunConfig, &mut Problem) -> Result<RunResult>,
{
    cfg.validate()?;
    let dir = root.join(cfg.output_name());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    let mut runs = Vec::new();
    let mut metrics = Vec::new();
    let mut failures = Vec::new();
    for r in 0..cfg.repeats as u64 {
        let seed = cfg.run.seed.wrapping_add(r);
        let mut run_cfg = cfg.run.clone();
        run_cfg.seed = seed;
        let outcome = build_problem(cfg, seed)
            .and_then(|mut p| runner(&run_cfg, &mut p))
            .and_then(|res| run_metrics(cfg, &res).map(|m| (res, m)));
        match outcome {
            Ok((res, m)) => {
                write_run_artifacts(cfg, &res, &dir)?;
                log::info!("{} seed {seed}: {:?}", cfg.output_name(), m.values);
                runs.push(res);
                metrics.push(m);
            }
            Err(e) => {
                log::warn!("{} seed {seed} failed: {e}", cfg.output_name());
                failures.push((seed, e.to_string()));
            }
        }
    }
    let summary = summarize(cfg, &metrics);
    let mut text = format!("{SUMMARY_HEADER}\n");
    for row in &summary {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    fs::write(dir.join("summary.csv"), text)?;
    let failure_path = dir.join("failures.csv");
    if failures.is_empty() {
        if failure_path.exists() {
            fs::remove_file(&failure_path)?;
        }
    } else {
        let mut text = String::from("seed,error\n");
        for (seed, msg) in &failures {
            let _ = writeln!(text, "{seed},\"{}\"", msg.replace('"', "'"));
        }
        fs::write(&failure_path, text)?;
    }
    Ok(ExperimentOutcome {
        dir,
        summary,
        runs,
        metrics,
        failures,
    })
}

fn summarize(cfg: &ExperimentConfig, metrics: &[RunMetrics]) -> Vec<SummaryRow> {
    let names: Vec<&str> = if cfg.problem.objectives() == 1 {
        vec!["final_best"]
    } else {
        vec!["hypervolume", "igd"]
    };
    names
        .into_iter()
        .map(|name| {
            let vals: Vec<f64> = metrics
                .iter()
                .filter_map(|m| m.values.iter().find(|v| v.0 == name).map(|v| v.1))
                .collect();
            let (mean, std) = mean_std(&vals);
            SummaryRow {
                digest: cfg.digest(),
                algorithm: cfg.algorithm().to_string(),
                problem: cfg.problem.to_string(),
                dim: cfg.dim,
                budget: cfg.budget(),
                repeats: vals.len(),
                metric: name.to_string(),
                mean,
                std,
            }
        })
        .collect()
}

fn write_run_artifacts(cfg: &ExperimentConfig, res: &RunResult, dir: &Path) -> Result<()> {
    let seed = res.seed;
    if cfg.problem.objectives() == 1 {
        let mut text = String::from("calls,best_f\n");
        for (c, f) in &res.best_trace {
            let _ = writeln!(text, "{c},{f}");
        }
        fs::write(dir.join(format!("run_{seed}_trace.csv")), text)?;
        let points: Vec<(f64, f64)> = res.best_trace.iter().map(|&(c, f)| (c as f64, f)).collect();
        let svg = line_plot(
            &format!("{} {} d={} seed {seed}", cfg.algorithm(), cfg.problem, cfg.dim),
            "function calls",
            "best objective",
            &points,
        );
        fs::write(dir.join(format!("run_{seed}.svg")), svg)?;
    } else {
        let mut text = String::from("calls,hv,igd\n");
        for (i, snap) in res.front_trace.iter().enumerate() {
            let front = if i + 1 == res.front_trace.len() && snap.calls == res.calls {
                &res.final_front
            } else {
                &snap.front
            };
            let (hv, d) = front_metrics(cfg, front)?;
            let _ = writeln!(text, "{},{hv},{d}", snap.calls);
        }
        fs::write(dir.join(format!("run_{seed}_trace.csv")), text)?;
        let n = cfg.problem.objectives();
        let header: Vec<String> = (1..=n).map(|i| format!("f{i}")).collect();
        let mut text = header.join(",") + "\n";
        let mut front = res.final_front.clone();
        front.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        for f in &front {
            let row: Vec<String> = f.iter().map(|v| v.to_string()).collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(dir.join(format!("run_{seed}_front.csv")), text)?;
        let truth = true_front(cfg.problem, 200)?;
        let svg = scatter_plot(
            &format!("{} {} d={} seed {seed}", cfg.algorithm(), cfg.problem, cfg.dim),
            &front,
            &truth,
        );
        fs::write(dir.join(format!("run_{seed}.svg")), svg)?;
    }
    Ok(())
}

/// Runs `cfg` once per value of `key`, each in its own output directory.
pub fn sweep(cfg: &ExperimentConfig, key: &str, values: &[String], root: &Path) -> Result<Vec<ExperimentOutcome>> {
    let mut grid = Vec::with_capacity(values.len());
    for v in values {
        let mut c = cfg.clone();
        c.set(key, v)?;
        if let Some(base) = &cfg.output {
            c.output = Some(format!("{base}_{key}{v}"));
        }
        c.validate()?;
        grid.push(c);
    }
    grid.iter().map(|c| run_experiment(c, root)).collect()
}

/// Reads every `summary.csv` below `dir`, sorted by path.
pub fn read_summaries(dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut files = Vec::new();
    collect_summaries(dir, &mut files)?;
    files.sort();
    let mut rows = Vec::new();
    for f in files {
        let text = fs::read_to_string(&f)?;
        let mut lines = text.lines();
        if lines.next() != Some(SUMMARY_HEADER) {
            return Err(Error::Format(format!("{} lacks the summary header", f.display())));
        }
        for line in lines.filter(|l| !l.trim().is_empty()) {
            rows.push(SummaryRow::from_csv(line)?);
        }
    }
    Ok(rows)
}

fn collect_summaries(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        if path.is_dir() {
            collect_summaries(&path, out)?;
        } else if path.file_name().is_some_and(|n| n == "summary.csv") {
            out.push(path);
        }
    }
    Ok(())
}

/// `mean ± std` grids, one per (problem, metric): rows are configurations,
/// columns are dimensions.
pub fn table(dir: &Path) -> Result<String> {
    let rows = read_summaries(dir)?;
    if rows.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no summary.csv under {}",
            dir.display()
        )));
    }
    type Grid = BTreeMap<String, BTreeMap<usize, String>>;
    let mut grids: BTreeMap<(String, String), Grid> = BTreeMap::new();
    for r in &rows {
        let grid = grids.entry((r.problem.clone(), r.metric.clone())).or_default();
        let mut label = r.algorithm.clone();
        if grid.get(&label).is_some_and(|cells| cells.contains_key(&r.dim)) {
            label = format!("{} [{}]", r.algorithm, &r.digest[..r.digest.len().min(8)]);
        }
        grid.entry(label).or_default().insert(r.dim, cell(r.mean, r.std));
    }
    let mut out = String::new();
    for ((problem, metric), grid) in &grids {
        let mut dims: Vec<usize> = grid.values().flat_map(|c| c.keys().copied()).collect();
        dims.sort_unstable();
        dims.dedup();
        let label_w = grid.keys().map(|k| k.chars().count()).max().unwrap_or(0).max(9);
        let col_w = grid
            .values()
            .flat_map(|c| c.values().map(|s| s.chars().count()))
            .max()
            .unwrap_or(0)
            .max(8);
        let _ = writeln!(out, "{problem} / {metric}");
        let _ = write!(out, "{:<label_w$}", "algorithm");
        for d in &dims {
            let _ = write!(out, "  {:>col_w$}", format!("d={d}"));
        }
        out.push('\n');
        for (label, cells) in grid {
            let _ = write!(out, "{label:<label_w$}");
            for d in &dims {
                let _ = write!(out, "  {:>col_w$}", cells.get(d).map_or("-", String::as_str));
            }
            out.push('\n');
        }
        out.push('\n');
    }
    Ok(out)
}

/// Table cell text.
pub fn cell(mean: f64, std: f64) -> String {
    format!("{mean:.4} ± {std:.4}")
}

const W: f64 = 640.0;
const H: f64 = 420.0;
const MARGIN: f64 = 60.0;

fn svg_frame(title: &str, xlabel: &str, ylabel: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"14\">{}</text>\n\
         <line x1=\"{MARGIN}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{MARGIN}\" y1=\"{MARGIN}\" x2=\"{MARGIN}\" y2=\"{}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n\
         <text x=\"16\" y=\"{}\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{}</text>\n",
        W / 2.0,
        escape(title),
        H - MARGIN,
        W - MARGIN,
        H - MARGIN,
        H - MARGIN,
        W / 2.0,
        H - 16.0,
        escape(xlabel),
        H / 2.0,
        H / 2.0,
        escape(ylabel),
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

struct Axis {
    lo: f64,
    hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite()) {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            return Self { lo: 0.0, hi: 1.0 };
        }
        if hi - lo < 1e-12 {
            hi = lo + 1.0;
        }
        Self { lo, hi }
    }

    fn map(&self, v: f64, from: f64, to: f64) -> f64 {
        from + (v - self.lo) / (self.hi - self.lo) * (to - from)
    }
}

fn tick_labels(x: &Axis, y: &Axis, ylabel: impl Fn(f64) -> String) -> String {
    let mut s = String::new();
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let xv = x.lo + t * (x.hi - x.lo);
        let yv = y.lo + t * (y.hi - y.lo);
        let px = MARGIN + t * (W - 2.0 * MARGIN);
        let py = H - MARGIN - t * (H - 2.0 * MARGIN);
        let _ = writeln!(
            s,
            "<text x=\"{px:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>",
            H - MARGIN + 16.0,
            short(xv)
        );
        let _ = writeln!(
            s,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>",
            MARGIN - 4.0,
            py + 4.0,
            ylabel(yv)
        );
    }
    s
}

fn short(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.1e}")
    } else {
        format!("{v:.2}")
    }
}

/// Best-so-far against calls with a log10 y axis.
pub fn line_plot(title: &str, xlabel: &str, ylabel: &str, points: &[(f64, f64)]) -> String {
    let floor = 1e-12;
    let logged: Vec<(f64, f64)> = points.iter().map(|&(x, y)| (x, y.max(floor).log10())).collect();
    let x = Axis::fit(logged.iter().map(|p| p.0));
    let y = Axis::fit(logged.iter().map(|p| p.1));
    let mut s = svg_frame(title, xlabel, &format!("{ylabel} (log10)"));
    s.push_str(&tick_labels(&x, &y, |v| format!("1e{v:.1}")));
    let mut path = String::new();
    let mut prev: Option<f64> = None;
    for &(px, py) in &logged {
        let sx = x.map(px, MARGIN, W - MARGIN);
        let sy = y.map(py, H - MARGIN, MARGIN);
        if let Some(last_y) = prev {
            let _ = write!(path, " L{sx:.2},{last_y:.2}");
        }
        let _ = write!(path, "{}{sx:.2},{sy:.2}", if prev.is_none() { "M" } else { " L" });
        prev = Some(sy);
    }
    let _ = writeln!(
        s,
        "<path d=\"{path}\" fill=\"none\" stroke=\"steelblue\" stroke-width=\"1.5\"/>"
    );
    s.push_str("</svg>\n");
    s
}

/// Obtained front (dots) over the analytic front (grey).
pub fn scatter_plot(title: &str, front: &[ObjectiveVector], truth: &[ObjectiveVector]) -> String {
    let all = || front.iter().chain(truth);
    let x = Axis::fit(all().map(|p| p[0]));
    let y = Axis::fit(all().map(|p| p[1]));
    let mut s = svg_frame(title, "f1", "f2");
    s.push_str(&tick_labels(&x, &y, short));
    for p in truth {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"1\" fill=\"#bbbbbb\"/>",
            x.map(p[0], MARGIN, W - MARGIN),
            y.map(p[1], H - MARGIN, MARGIN)
        );
    }
    for p in front {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"crimson\"/>",
            x.map(p[0], MARGIN, W - MARGIN),
            y.map(p[1], H - MARGIN, MARGIN)
        );
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizers::Algorithm;
    use crate::problems::ProblemKind;

    fn quick(algorithm: Algorithm, problem: ProblemKind, dim: usize) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(algorithm, problem, dim, 300);
        cfg.run.ga.population = 20;
        cfg.run.snapshot_every = 100;
        cfg.igd_points = 50;
        cfg
    }

    #[test]
    fn summary_row_csv_round_trip() {
        let row = SummaryRow {
            digest: "00ff".into(),
            algorithm: "ga".into(),
            problem: "sphere".into(),
            dim: 4,
            budget: 100,
            repeats: 3,
            metric: "final_best".into(),
            mean: 0.1 + 0.2,
            std: 1e-300,
        };
        assert_eq!(SummaryRow::from_csv(&row.to_csv()).unwrap(), row);
        assert!(SummaryRow::from_csv("a,b").is_err());
    }

    #[test]
    fn single_repeat_has_zero_std() {
        let tmp = tempfile::tempdir().unwrap();
        let out = run_experiment(&quick(Algorithm::Ga, ProblemKind::Sphere, 3), tmp.path()).unwrap();
        assert_eq!(out.summary.len(), 1);
        assert_eq!(out.summary[0].std, 0.0);
        assert_eq!(out.summary[0].repeats, 1);
        for f in ["config.txt", "summary.csv", "run_0_trace.csv", "run_0.svg"] {
            assert!(out.dir.join(f).exists(), "{f}");
        }
    }

    #[test]
    fn multi_objective_artifacts() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = quick(Algorithm::Ga, ProblemKind::Zdt1, 4);
        cfg.repeats = 2;
        let out = run_experiment(&cfg, tmp.path()).unwrap();
        let metrics: Vec<&str> = out.summary.iter().map(|r| r.metric.as_str()).collect();
        assert_eq!(metrics, ["hypervolume", "igd"]);
        let front = fs::read_to_string(out.dir.join("run_1_front.csv")).unwrap();
        assert!(front.starts_with("f1,f2\n"));
        let trace = fs::read_to_string(out.dir.join("run_1_trace.csv")).unwrap();
        let last: Vec<f64> = trace
            .lines()
            .last()
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(last[0], 300.0);
        assert_eq!(last[1], out.metrics[1].values[0].1);
        assert!(out.summary[0].mean > 0.0 && out.summary[0].mean < 121.0);
    }

    #[test]
    fn failed_repeats_are_flagged() {
        let tmp = tempfile::tempdir().unwrap();
        let mut cfg = quick(Algorithm::Ga, ProblemKind::Sphere, 3);
        cfg.repeats = 3;
        let odd_fails = |c: &RunConfig, p: &mut Problem| {
            if c.seed % 2 == 1 {
                Err(Error::InvalidArgument("injected".into()))
            } else {
                run(c, p)
            }
        };
        let out = run_experiment_with(&cfg, tmp.path(), odd_fails).unwrap();
        assert!(out.flagged());
        assert_eq!(out.failures, vec![(1, "invalid argument: injected".to_string())]);
        assert_eq!(out.summary[0].repeats, 2);
        let (mean, _) = mean_std(&[out.metrics[0].values[0].1, out.metrics[1].values[0].1]);
        assert_eq!(out.summary[0].mean, mean);
        assert!(out.dir.join("failures.csv").exists());
        let again = run_experiment(&cfg, tmp.path()).unwrap();
        assert!(!again.flagged());
        assert!(!again.dir.join("failures.csv").exists());
    }

    #[test]
    fn table_lists_every_summary() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = quick(Algorithm::Ga, ProblemKind::Sphere, 2);
        let values: Vec<String> = ["2", "3"].iter().map(|s| s.to_string()).collect();
        let outs = sweep(&cfg, "dim", &values, tmp.path()).unwrap();
        let text = table(tmp.path()).unwrap();
        assert!(text.starts_with("sphere / final_best\n"));
        assert!(text.contains("d=2") && text.contains("d=3"));
        for o in &outs {
            assert!(text.contains(&cell(o.summary[0].mean, o.summary[0].std)));
        }
        assert!(table(&tmp.path().join("run_0.svg")).is_err());
    }

    #[test]
    fn svg_is_well_formed_text() {
        let s = line_plot("t <1>", "x", "y", &[(1.0, 10.0), (5.0, 0.1), (9.0, 0.0)]);
        assert!(s.starts_with("<svg") && s.trim_end().ends_with("</svg>"));
        assert!(s.contains("t &lt;1&gt;"));
        assert!(!s.contains("NaN") && !s.contains("inf"));
        let f = scatter_plot("f", &[vec![0.0, 1.0]], &[vec![0.5, 0.5]]);
        assert_eq!(f.matches("<circle").count(), 2);
    }
}
