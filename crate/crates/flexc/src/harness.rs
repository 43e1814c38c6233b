//! Corpus runner and reporting: runs the rewrite + map pipeline over a
//! directory of kernel files against an architecture profile and produces
//! compilation-rate tables, rule-frequency tables, and timing data.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rayon::prelude::*;
use thiserror::Error;

use crate::arch::CgraSpec;
use crate::dfg::{cost, parse_dfg, Dfg, UNSUPPORTED_PENALTY};
use crate::egraph::{eqsat_rewrite, SaturationLimits, StopReason};
use crate::greedy::greedy_rewrite;
use crate::hybrid::{hybrid_rewrite, HybridReport};
use crate::mapper;
use crate::rules::RewriteRule;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Strategy {
    None,
    Greedy,
    Eqsat,
    Hybrid,
}

impl Strategy {
    pub const ALL: [Strategy; 4] =
        [Strategy::None, Strategy::Greedy, Strategy::Eqsat, Strategy::Hybrid];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::Greedy => "greedy",
            Strategy::Eqsat => "eqsat",
            Strategy::Hybrid => "hybrid",
        }
    }

    pub fn from_name(s: &str) -> Option<Strategy> {
        Strategy::ALL.into_iter().find(|x| x.name() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Outcome {
    SupportedNatively,
    RewrittenGreedy,
    RewrittenEqsat,
    FailedRewrite,
    FailedMapping,
    Timeout,
    ParseFailure,
}

impl Outcome {
    pub fn name(self) -> &'static str {
        match self {
            Outcome::SupportedNatively => "supported_natively",
            Outcome::RewrittenGreedy => "rewritten_greedy",
            Outcome::RewrittenEqsat => "rewritten_eqsat",
            Outcome::FailedRewrite => "failed_rewrite",
            Outcome::FailedMapping => "failed_mapping",
            Outcome::Timeout => "timeout",
            Outcome::ParseFailure => "parse_failure",
        }
    }

    pub fn compiled(self) -> bool {
        matches!(
            self,
            Outcome::SupportedNatively | Outcome::RewrittenGreedy | Outcome::RewrittenEqsat
        )
    }
}

/// Per-phase wall time in seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct PhaseTimes {
    pub greedy: f64,
    pub saturation: f64,
    pub mapping: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelResult {
    pub kernel: String,
    pub strategy: Strategy,
    pub arch: String,
    pub outcome: Outcome,
    pub cost_before: u64,
    pub cost_after: u64,
    pub ii: Option<u32>,
    pub wall_time: f64,
    pub phases: PhaseTimes,
    pub rules_applied: BTreeMap<String, u64>,
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("corpus directory {0} contains no kernel files")]
    EmptyCorpus(PathBuf),
    #[error("cannot read corpus directory {0}: {1}")]
    Io(PathBuf, std::io::Error),
}

fn trace_counts(trace: &[String]) -> BTreeMap<String, u64> {
    let mut counts = BTreeMap::new();
    for name in trace {
        *counts.entry(name.clone()).or_insert(0) += 1;
    }
    counts
}

/// Run one kernel under one strategy.  Every failure mode becomes a row;
/// this function does not error.
pub fn run_kernel(
    name: &str,
    text: &str,
    spec: &CgraSpec,
    strategy: Strategy,
    rules: &[RewriteRule],
    limits: &SaturationLimits,
    map_budget: Duration,
) -> KernelResult {
    let start = Instant::now();
    let mut result = KernelResult {
        kernel: name.to_string(),
        strategy,
        arch: spec.name.clone(),
        outcome: Outcome::ParseFailure,
        cost_before: 0,
        cost_after: 0,
        ii: None,
        wall_time: 0.0,
        phases: PhaseTimes::default(),
        rules_applied: BTreeMap::new(),
    };
    let Ok(d) = parse_dfg(text) else {
        result.wall_time = start.elapsed().as_secs_f64();
        return result;
    };
    let ops = spec.supported_ops();
    result.cost_before = cost(&d, &ops);

    let mut timed_out = false;
    let rewritten: Dfg = match strategy {
        Strategy::None => d.clone(),
        Strategy::Greedy => {
            let t = Instant::now();
            let (out, trace) = greedy_rewrite(&d, rules, &ops);
            result.phases.greedy = t.elapsed().as_secs_f64();
            result.rules_applied = trace_counts(&trace);
            out
        }
        Strategy::Eqsat => {
            let t = Instant::now();
            match eqsat_rewrite(&d, rules, &ops, limits) {
                Ok((out, report, _)) => {
                    result.phases.saturation = t.elapsed().as_secs_f64();
                    result.rules_applied = report.rule_application_counts.clone();
                    timed_out = report.stop_reason == StopReason::Timeout;
                    out
                }
                Err(_) => {
                    result.phases.saturation = t.elapsed().as_secs_f64();
                    d.clone()
                }
            }
        }
        Strategy::Hybrid => {
            let t = Instant::now();
            match hybrid_rewrite(&d, rules, &ops, limits) {
                Ok((out, _, report)) => {
                    match report {
                        HybridReport::GreedyTrace(trace) => {
                            result.phases.greedy = t.elapsed().as_secs_f64();
                            result.rules_applied = trace_counts(&trace);
                        }
                        HybridReport::Saturation(rep) => {
                            result.phases.saturation = t.elapsed().as_secs_f64();
                            result.rules_applied = rep.rule_application_counts.clone();
                            timed_out = rep.stop_reason == StopReason::Timeout;
                        }
                    }
                    out
                }
                Err(_) => {
                    result.phases.saturation = t.elapsed().as_secs_f64();
                    d.clone()
                }
            }
        }
    };

    result.cost_after = cost(&rewritten, &ops);
    if result.cost_after >= UNSUPPORTED_PENALTY {
        result.outcome = if timed_out {
            Outcome::Timeout
        } else {
            Outcome::FailedRewrite
        };
        result.wall_time = start.elapsed().as_secs_f64();
        return result;
    }

    let strategy_outcome = if result.cost_before < UNSUPPORTED_PENALTY
        && result.rules_applied.values().sum::<u64>() == 0
    {
        Outcome::SupportedNatively
    } else {
        match strategy {
            Strategy::None => Outcome::SupportedNatively,
            Strategy::Greedy => Outcome::RewrittenGreedy,
            Strategy::Eqsat => Outcome::RewrittenEqsat,
            Strategy::Hybrid => {
                // Distinguish which arm won by rerunning the cheap check.
                let (g, _) = greedy_rewrite(&d, rules, &ops);
                if cost(&g, &ops) < UNSUPPORTED_PENALTY {
                    Outcome::RewrittenGreedy
                } else {
                    Outcome::RewrittenEqsat
                }
            }
        }
    };

    let t = Instant::now();
    let mapped = mapper::compile(&rewritten, spec, map_budget);
    result.phases.mapping = t.elapsed().as_secs_f64();
    match mapped {
        Ok(m) => {
            result.ii = Some(m.ii);
            result.outcome = strategy_outcome;
        }
        Err(_) => {
            result.outcome = Outcome::FailedMapping;
        }
    }
    result.wall_time = start.elapsed().as_secs_f64();
    result
}

fn thread_cap(requested: usize) -> usize {
    let cap = std::env::var("FLEXC_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    match cap {
        Some(c) => requested.clamp(1, c),
        None => requested.max(1),
    }
}

/// Run every kernel file in `dir` under one strategy.  Files are processed
/// by a worker pool; results are sorted so the output is independent of
/// scheduling order.
pub fn run_corpus(
    dir: &Path,
    spec: &CgraSpec,
    strategy: Strategy,
    rules: &[RewriteRule],
    limits: &SaturationLimits,
    parallelism: usize,
) -> Result<Vec<KernelResult>, HarnessError> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::Io(dir.to_path_buf(), e))?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file() && p.extension().map(|x| x == "dfg").unwrap_or(false))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(HarnessError::EmptyCorpus(dir.to_path_buf()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(thread_cap(parallelism))
        .build()
        .expect("thread pool");
    let mut results: Vec<KernelResult> = pool.install(|| {
        files
            .par_iter()
            .map(|path| {
                let name = path
                    .file_name()
                    .map(|x| x.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let text = std::fs::read_to_string(path).unwrap_or_default();
                run_kernel(
                    &name,
                    &text,
                    spec,
                    strategy,
                    rules,
                    limits,
                    Duration::from_secs(10),
                )
            })
            .collect()
    });
    results.sort_by(|a, b| (&a.arch, &a.kernel, a.strategy).cmp(&(&b.arch, &b.kernel, b.strategy)));
    Ok(results)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub arch: String,
    pub strategy: Strategy,
    pub total: usize,
    pub compiled: usize,
}

impl RateRow {
    pub fn rate(&self) -> f64 {
        self.compiled as f64 / self.total as f64
    }
}

/// Upper bounds of the wall-time histogram buckets, in seconds.
pub const TIME_BUCKETS: [f64; 6] = [0.001, 0.01, 0.1, 1.0, 10.0, f64::INFINITY];

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub rates: Vec<RateRow>,
    /// Aggregated rule applications across all results.
    pub rule_counts: BTreeMap<String, u64>,
    /// Count of kernels per TIME_BUCKETS bucket.
    pub time_histogram: [usize; 6],
    /// Sorted per-kernel wall times, for the time CDF.
    pub wall_times: Vec<f64>,
    /// Compiled-count ratios between strategies, aggregated over arches,
    /// e.g. ("hybrid/none", 2.0).
    pub ratios: Vec<(String, f64)>,
}

impl Report {
    pub fn top_rules(&self, k: usize) -> Vec<(String, u64)> {
        let mut v: Vec<(String, u64)> = self
            .rule_counts
            .iter()
            .map(|(n, &c)| (n.clone(), c))
            .collect();
        v.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        v.truncate(k);
        v
    }

    pub fn rate_for(&self, arch: &str, strategy: Strategy) -> Option<f64> {
        self.rates
            .iter()
            .find(|r| r.arch == arch && r.strategy == strategy)
            .map(|r| r.rate())
    }
}

/// Aggregate results (possibly spanning several arches and strategies)
/// into rate tables, rule frequencies, and timing distributions.
pub fn summarize(results: &[KernelResult]) -> Report {
    assert!(!results.is_empty(), "summarize requires at least one result");
    let mut groups: BTreeMap<(String, Strategy), (usize, usize)> = BTreeMap::new();
    let mut rule_counts: BTreeMap<String, u64> = BTreeMap::new();
    let mut histogram = [0usize; 6];
    let mut wall_times = Vec::new();
    let mut per_strategy: BTreeMap<Strategy, usize> = BTreeMap::new();
    for r in results {
        let g = groups.entry((r.arch.clone(), r.strategy)).or_insert((0, 0));
        g.0 += 1;
        let compiled = r.outcome.compiled() && r.ii.is_some();
        if compiled {
            g.1 += 1;
            *per_strategy.entry(r.strategy).or_insert(0) += 1;
        }
        for (name, &c) in &r.rules_applied {
            *rule_counts.entry(name.clone()).or_insert(0) += c;
        }
        let bucket = TIME_BUCKETS
            .iter()
            .position(|&ub| r.wall_time <= ub)
            .unwrap_or(TIME_BUCKETS.len() - 1);
        histogram[bucket] += 1;
        wall_times.push(r.wall_time);
    }
    wall_times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let rates = groups
        .into_iter()
        .map(|((arch, strategy), (total, compiled))| RateRow {
            arch,
            strategy,
            total,
            compiled,
        })
        .collect();
    let mut ratios = Vec::new();
    for (num, den) in [
        (Strategy::Hybrid, Strategy::None),
        (Strategy::Hybrid, Strategy::Greedy),
        (Strategy::Greedy, Strategy::None),
    ] {
        if let (Some(&n), Some(&d)) = (per_strategy.get(&num), per_strategy.get(&den)) {
            if d > 0 {
                ratios.push((format!("{}/{}", num.name(), den.name()), n as f64 / d as f64));
            }
        }
    }
    Report {
        rates,
        rule_counts,
        time_histogram: histogram,
        wall_times,
        ratios,
    }
}

/// Per-kernel results as CSV.  Schema is stable; timing columns come last
/// so non-timing content can be compared byte-for-byte across runs.
pub fn results_csv(results: &[KernelResult]) -> String {
    let mut s = String::from(
        "kernel,strategy,arch,outcome,cost_before,cost_after,ii,rules_applied,wall_time,greedy_time,saturation_time,mapping_time\n",
    );
    for r in results {
        let rules: Vec<String> = r
            .rules_applied
            .iter()
            .map(|(n, c)| format!("{n}:{c}"))
            .collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6}",
            r.kernel,
            r.strategy.name(),
            r.arch,
            r.outcome.name(),
            r.cost_before,
            r.cost_after,
            r.ii.map(|x| x.to_string()).unwrap_or_default(),
            rules.join(";"),
            r.wall_time,
            r.phases.greedy,
            r.phases.saturation,
            r.phases.mapping,
        );
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Markdown,
    PlotData,
}

/// Render a report in one of the supported formats.
pub fn emit(report: &Report, format: EmitFormat) -> String {
    match format {
        EmitFormat::Csv => {
            let mut s = String::from("arch,strategy,total,compiled,rate\n");
            for r in &report.rates {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{:.4}",
                    r.arch,
                    r.strategy.name(),
                    r.total,
                    r.compiled,
                    r.rate()
                );
            }
            s
        }
        EmitFormat::Markdown => {
            let mut s = String::from("## Compilation rates\n\n");
            s.push_str("| arch | strategy | compiled | total | rate |\n");
            s.push_str("|---|---|---|---|---|\n");
            for r in &report.rates {
                let _ = writeln!(
                    s,
                    "| {} | {} | {} | {} | {:.2} |",
                    r.arch,
                    r.strategy.name(),
                    r.compiled,
                    r.total,
                    r.rate()
                );
            }
            s.push_str("\n## Most applied rules\n\n| rule | applications |\n|---|---|\n");
            for (name, count) in report.top_rules(4) {
                let _ = writeln!(s, "| {name} | {count} |");
            }
            if !report.ratios.is_empty() {
                s.push_str("\n## Strategy ratios\n\n");
                for (name, v) in &report.ratios {
                    let _ = writeln!(s, "- {name}: {v:.2}x");
                }
            }
            s
        }
        EmitFormat::PlotData => {
            let mut s = String::new();
            for r in &report.rates {
                let _ = writeln!(
                    s,
                    "rate {}/{} {:.4}",
                    r.arch,
                    r.strategy.name(),
                    r.rate()
                );
            }
            let n = report.wall_times.len() as f64;
            for (i, t) in report.wall_times.iter().enumerate() {
                let _ = writeln!(s, "cdf {t:.6} {:.4}", (i + 1) as f64 / n);
            }
            s
        }
    }
}
