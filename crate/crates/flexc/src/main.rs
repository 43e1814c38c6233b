//! Command-line front end: rewrite kernels, compile them onto architecture
//! profiles, benchmark a corpus, estimate performance ceilings, and explain
//! individual rewrites.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use flexc::arch::{builtin_arch, parse_arch, CgraSpec, BUILTIN_ARCH_NAMES};
use flexc::ceiling::{
    ceiling_estimate, enumerate_programs, supp_fraction, CompilerUnderTest, ProgramSpace,
    RewriterKind, SpaceMode,
};
use flexc::dfg::{cost, parse_dfg, serialize_dfg, Dfg, OpKind, UNSUPPORTED_PENALTY};
use flexc::egraph::{egraph_init, eqsat_rewrite, run_saturation, SaturationLimits};
use flexc::greedy::greedy_rewrite;
use flexc::harness::{
    emit, results_csv, run_corpus, summarize, EmitFormat, KernelResult, Strategy,
};
use flexc::hybrid::{hybrid_rewrite, HybridReport};
use flexc::mapper::{compile as map_compile, estimate_cycles, rec_mii, res_mii, verify_mapping};
use flexc::rules::{parse_ruleset_file, rules_for, RewriteRule, RulesetKind};

#[derive(Parser)]
#[command(
    name = "flexc",
    about = "Dataflow rewriting compiler for heterogeneous CGRAs",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ArchArgs {
    /// Path to an architecture profile (JSON).
    #[arg(long, conflicts_with = "arch_builtin")]
    arch: Option<PathBuf>,
    /// Name of a built-in profile: cca, maeri, revamp, sc_cgra.
    #[arg(long)]
    arch_builtin: Option<String>,
}

impl ArchArgs {
    fn load(&self) -> Result<CgraSpec> {
        match (&self.arch, &self.arch_builtin) {
            (Some(path), None) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                Ok(parse_arch(&text)?)
            }
            (None, Some(name)) => {
                builtin_arch(name).map_err(|e| anyhow!("unknown builtin profile {name}: {e}"))
            }
            _ => bail!("exactly one of --arch or --arch-builtin is required"),
        }
    }
}

#[derive(Args)]
struct RuleArgs {
    /// Comma-separated rulesets: int,fp,bool,stochastic.
    #[arg(long, default_value = "int,fp,bool")]
    rulesets: String,
    /// Path to a custom ruleset file (overrides --rulesets).
    #[arg(long)]
    rules_file: Option<PathBuf>,
}

impl RuleArgs {
    fn load(&self) -> Result<Vec<RewriteRule>> {
        if let Some(path) = &self.rules_file {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            return Ok(parse_ruleset_file(&text)?);
        }
        let mut kinds = Vec::new();
        for part in self.rulesets.split(',').filter(|s| !s.is_empty()) {
            let kind = RulesetKind::from_name(part)
                .ok_or_else(|| anyhow!("unknown ruleset {part} (int, fp, bool, stochastic)"))?;
            kinds.push(kind);
        }
        Ok(rules_for(&kinds))
    }
}

#[derive(Args)]
struct LimitArgs {
    /// Saturation iteration limit.
    #[arg(long, default_value_t = 10)]
    iter_limit: usize,
    /// Saturation e-node limit.
    #[arg(long, default_value_t = 100_000)]
    node_limit: usize,
    /// Saturation wall-clock limit in seconds.
    #[arg(long, default_value_t = 300)]
    timeout: u64,
}

impl LimitArgs {
    fn limits(&self) -> SaturationLimits {
        SaturationLimits {
            iter_limit: self.iter_limit,
            node_limit: self.node_limit,
            wall_clock_limit: Duration::from_secs(self.timeout),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Rewrite a kernel until the target architecture supports it.
    Rewrite {
        /// Kernel file.
        #[arg(long)]
        dfg: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
        /// Rewriting strategy: none, greedy, eqsat, hybrid.
        #[arg(long, default_value = "hybrid")]
        strategy: String,
        #[command(flatten)]
        rules: RuleArgs,
        #[command(flatten)]
        limits: LimitArgs,
        /// Print the final e-graph (eqsat/hybrid only).
        #[arg(long)]
        dump_egraph: bool,
        /// Exit nonzero when the kernel still has unsupported operations.
        #[arg(long)]
        strict: bool,
    },
    /// Rewrite and then place-and-schedule a kernel.
    Compile {
        #[arg(long)]
        dfg: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
        #[arg(long, default_value = "hybrid")]
        strategy: String,
        #[command(flatten)]
        rules: RuleArgs,
        #[command(flatten)]
        limits: LimitArgs,
        /// Write the mapping as JSON to this path.
        #[arg(long)]
        mapping_out: Option<PathBuf>,
        /// Loop iteration count for the cycle estimate.
        #[arg(long, default_value_t = 100)]
        iterations: u64,
        #[arg(long)]
        strict: bool,
    },
    /// Run a corpus of kernels against one or more profiles.
    Bench {
        /// Directory of .dfg kernel files.
        #[arg(long)]
        corpus: PathBuf,
        /// Comma-separated builtin profiles, or "all".
        #[arg(long, default_value = "all")]
        arch_builtin: String,
        /// Comma-separated strategies, or "all".
        #[arg(long, default_value = "all")]
        strategies: String,
        #[command(flatten)]
        rules: RuleArgs,
        #[command(flatten)]
        limits: LimitArgs,
        /// Output directory for CSV/markdown/plot files.
        #[arg(long, default_value = "bench-out")]
        out_dir: PathBuf,
        /// Worker threads (also capped by FLEXC_THREADS).
        #[arg(long, default_value_t = 4)]
        parallelism: usize,
        #[arg(long)]
        strict: bool,
    },
    /// Estimate how often heuristic strategies match the exhaustive one.
    Ceiling {
        /// File listing op kinds for the program grammar (names separated
        /// by whitespace or commas; # starts a comment).
        #[arg(long)]
        grammar: PathBuf,
        /// Maximum operation nodes per program.
        #[arg(long, default_value_t = 3)]
        max_ops: usize,
        /// Number of grammar inputs.
        #[arg(long, default_value_t = 2)]
        num_inputs: usize,
        /// Sample this many programs instead of enumerating.
        #[arg(long)]
        sample: Option<usize>,
        /// Random seed for sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        rules: RuleArgs,
    },
    /// Show the rewrite trace and e-graph statistics for one kernel.
    Explain {
        #[arg(long)]
        dfg: PathBuf,
        #[command(flatten)]
        arch: ArchArgs,
        #[command(flatten)]
        rules: RuleArgs,
        #[command(flatten)]
        limits: LimitArgs,
    },
}

fn load_dfg(path: &PathBuf) -> Result<Dfg> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_dfg(&text).map_err(|e| anyhow!("parsing {}: {e}", path.display()))
}

struct RewriteOutput {
    dfg: Dfg,
    strategy_used: String,
    trace: Vec<String>,
}

fn run_rewrite(
    d: &Dfg,
    strategy: &str,
    rules: &[RewriteRule],
    spec: &CgraSpec,
    lim: &SaturationLimits,
    dump_egraph: bool,
) -> Result<RewriteOutput> {
    let ops = spec.supported_ops();
    match strategy {
        "none" => Ok(RewriteOutput {
            dfg: d.clone(),
            strategy_used: "none".into(),
            trace: Vec::new(),
        }),
        "greedy" => {
            let (out, trace) = greedy_rewrite(d, rules, &ops);
            Ok(RewriteOutput {
                dfg: out,
                strategy_used: "greedy".into(),
                trace,
            })
        }
        "eqsat" => {
            if dump_egraph {
                let mut g = egraph_init(d);
                let report = run_saturation(&mut g, rules, lim);
                eprintln!(
                    "e-graph: {} classes, {} nodes, stopped: {}",
                    g.class_count(),
                    g.node_count(),
                    report.stop_reason.name()
                );
                eprintln!("{}", g.dump());
            }
            let (out, report, _) = eqsat_rewrite(d, rules, &ops, lim)?;
            Ok(RewriteOutput {
                dfg: out,
                strategy_used: "eqsat".into(),
                trace: report
                    .rule_application_counts
                    .iter()
                    .map(|(n, c)| format!("{n} x{c}"))
                    .collect(),
            })
        }
        "hybrid" => {
            let (out, used, report) = hybrid_rewrite(d, rules, &ops, lim)?;
            let trace = match report {
                HybridReport::GreedyTrace(t) => t,
                HybridReport::Saturation(rep) => rep
                    .rule_application_counts
                    .iter()
                    .map(|(n, c)| format!("{n} x{c}"))
                    .collect(),
            };
            Ok(RewriteOutput {
                dfg: out,
                strategy_used: used.name().into(),
                trace,
            })
        }
        other => bail!("unknown strategy {other} (none, greedy, eqsat, hybrid)"),
    }
}

fn mapping_json(m: &flexc::mapper::Mapping, d: &Dfg) -> serde_json::Value {
    let placement: Vec<serde_json::Value> = m
        .placement
        .iter()
        .map(|(&node, &(pe, t))| {
            serde_json::json!({
                "node": d.node(node).name,
                "pe": pe,
                "slot": t,
            })
        })
        .collect();
    let routes: Vec<serde_json::Value> = m
        .routes
        .iter()
        .map(|(&(p, c), hops)| {
            serde_json::json!({
                "producer": d.node(p).name,
                "consumer": d.node(c).name,
                "hops": hops.iter().map(|&(pe, t)| serde_json::json!([pe, t])).collect::<Vec<_>>(),
            })
        })
        .collect();
    serde_json::json!({
        "ii": m.ii,
        "schedule_length": m.schedule_length(),
        "placement": placement,
        "routes": routes,
    })
}

fn real_main() -> Result<bool> {
    let cli = Cli::parse();
    match cli.command {
        Command::Rewrite {
            dfg,
            arch,
            strategy,
            rules,
            limits,
            dump_egraph,
            strict,
        } => {
            let d = load_dfg(&dfg)?;
            let spec = arch.load()?;
            let rules = rules.load()?;
            let out = run_rewrite(&d, &strategy, &rules, &spec, &limits.limits(), dump_egraph)?;
            let ops = spec.supported_ops();
            let after = cost(&out.dfg, &ops);
            println!("{}", serialize_dfg(&out.dfg));
            eprintln!(
                "strategy: {}  cost: {} -> {}  supported: {}",
                out.strategy_used,
                cost(&d, &ops),
                after,
                after < UNSUPPORTED_PENALTY
            );
            for line in &out.trace {
                eprintln!("  applied: {line}");
            }
            Ok(!strict || after < UNSUPPORTED_PENALTY)
        }
        Command::Compile {
            dfg,
            arch,
            strategy,
            rules,
            limits,
            mapping_out,
            iterations,
            strict,
        } => {
            let d = load_dfg(&dfg)?;
            let spec = arch.load()?;
            let rules = rules.load()?;
            let out = run_rewrite(&d, &strategy, &rules, &spec, &limits.limits(), false)?;
            let ops = spec.supported_ops();
            if cost(&out.dfg, &ops) >= UNSUPPORTED_PENALTY {
                eprintln!("rewrite failed: unsupported operations remain");
                return Ok(!strict);
            }
            match map_compile(&out.dfg, &spec, Duration::from_secs(10)) {
                Ok(m) => {
                    let violations = verify_mapping(&out.dfg, &spec, &m);
                    if !violations.is_empty() {
                        bail!("internal error: mapping failed verification: {violations:?}");
                    }
                    println!(
                        "ii: {}  res_mii: {}  rec_mii: {}  schedule_length: {}  cycles({iterations} iters): {}",
                        m.ii,
                        res_mii(&out.dfg, &spec).map(|x| x.to_string()).unwrap_or_else(|_| "-".into()),
                        rec_mii(&out.dfg),
                        m.schedule_length(),
                        estimate_cycles(&m, iterations),
                    );
                    if let Some(path) = mapping_out {
                        let json = mapping_json(&m, &out.dfg);
                        std::fs::write(&path, serde_json::to_string_pretty(&json)?)
                            .with_context(|| format!("writing {}", path.display()))?;
                    }
                    Ok(true)
                }
                Err(e) => {
                    eprintln!("mapping failed: {e}");
                    Ok(!strict)
                }
            }
        }
        Command::Bench {
            corpus,
            arch_builtin,
            strategies,
            rules,
            limits,
            out_dir,
            parallelism,
            strict,
        } => {
            let arch_names: Vec<&str> = if arch_builtin == "all" {
                BUILTIN_ARCH_NAMES.to_vec()
            } else {
                arch_builtin.split(',').filter(|s| !s.is_empty()).collect()
            };
            let strategy_list: Vec<Strategy> = if strategies == "all" {
                Strategy::ALL.to_vec()
            } else {
                strategies
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        Strategy::from_name(s)
                            .ok_or_else(|| anyhow!("unknown strategy {s}"))
                    })
                    .collect::<Result<_>>()?
            };
            let rules = rules.load()?;
            let lim = limits.limits();
            let mut all_results: Vec<KernelResult> = Vec::new();
            for name in &arch_names {
                let spec = builtin_arch(name)
                    .map_err(|e| anyhow!("unknown builtin profile {name}: {e}"))?;
                for &strategy in &strategy_list {
                    let results =
                        run_corpus(&corpus, &spec, strategy, &rules, &lim, parallelism)?;
                    all_results.extend(results);
                }
            }
            all_results.sort_by(|a, b| {
                (&a.arch, &a.kernel, a.strategy).cmp(&(&b.arch, &b.kernel, b.strategy))
            });
            let report = summarize(&all_results);
            std::fs::create_dir_all(&out_dir)
                .with_context(|| format!("creating {}", out_dir.display()))?;
            std::fs::write(out_dir.join("results.csv"), results_csv(&all_results))?;
            std::fs::write(out_dir.join("summary.csv"), emit(&report, EmitFormat::Csv))?;
            std::fs::write(out_dir.join("summary.md"), emit(&report, EmitFormat::Markdown))?;
            std::fs::write(out_dir.join("plot.txt"), emit(&report, EmitFormat::PlotData))?;
            print!("{}", emit(&report, EmitFormat::Markdown));
            let any_failure = all_results.iter().any(|r| !r.outcome.compiled());
            Ok(!strict || !any_failure)
        }
        Command::Ceiling {
            grammar,
            max_ops,
            num_inputs,
            sample,
            seed,
            arch,
            rules,
        } => {
            let text = std::fs::read_to_string(&grammar)
                .with_context(|| format!("reading {}", grammar.display()))?;
            let mut ops = Vec::new();
            for token in text
                .lines()
                .map(|l| l.split('#').next().unwrap_or(""))
                .flat_map(|l| l.split([',', ' ', '\t']))
                .filter(|s| !s.is_empty())
            {
                let kind = OpKind::from_symbol(token)
                    .ok_or_else(|| anyhow!("unknown op kind {token} in grammar"))?;
                ops.push(kind);
            }
            let spec = arch.load()?;
            let rules = rules.load()?;
            let space = ProgramSpace {
                ops,
                max_ops,
                num_inputs,
                mode: match sample {
                    Some(count) => SpaceMode::Sample { count, seed },
                    None => SpaceMode::Enumerate,
                },
            };
            let programs = enumerate_programs(&space)?;
            eprintln!("programs: {}", programs.len());
            println!("strategy,supp_fraction,ceiling,included,excluded");
            for rewriter in [
                RewriterKind::None,
                RewriterKind::Greedy,
                RewriterKind::Eqsat,
                RewriterKind::Hybrid,
            ] {
                let cut = CompilerUnderTest::heuristic(rewriter);
                let frac = supp_fraction(&programs, &rules, &cut, &spec)?;
                let rep = ceiling_estimate(&programs, &rules, &cut, &spec)?;
                let name = match rewriter {
                    RewriterKind::None => "none",
                    RewriterKind::Greedy => "greedy",
                    RewriterKind::Eqsat => "eqsat",
                    RewriterKind::Hybrid => "hybrid",
                    RewriterKind::Optimal => "optimal",
                };
                println!(
                    "{name},{frac:.4},{:.4},{},{}",
                    rep.probability, rep.included, rep.excluded
                );
            }
            Ok(true)
        }
        Command::Explain {
            dfg,
            arch,
            rules,
            limits,
        } => {
            let d = load_dfg(&dfg)?;
            let spec = arch.load()?;
            let rules = rules.load()?;
            let ops = spec.supported_ops();
            let lim = limits.limits();
            println!("kernel: {} nodes, cost {}", d.nodes.len(), cost(&d, &ops));
            let (greedy_out, trace) = greedy_rewrite(&d, &rules, &ops);
            println!(
                "greedy: cost {} after {} steps",
                cost(&greedy_out, &ops),
                trace.len()
            );
            for step in &trace {
                println!("  {step}");
            }
            let mut g = egraph_init(&d);
            let report = run_saturation(&mut g, &rules, &lim);
            println!(
                "saturation: {} iterations, {} classes, {} nodes, stopped: {}",
                report.iterations_run,
                g.class_count(),
                g.node_count(),
                report.stop_reason.name()
            );
            let mut applied: Vec<(&String, &u64)> =
                report.rule_application_counts.iter().collect();
            applied.sort_by(|a, b| b.1.cmp(a.1).then(a.0.cmp(b.0)));
            for (name, count) in applied {
                println!("  {name}: {count}");
            }
            let (out, _, ex) = eqsat_rewrite(&d, &rules, &ops, &lim)?;
            println!(
                "extraction: tree cost {}, dag cost {}, supported: {}",
                ex.tree_cost,
                ex.dag_cost,
                cost(&out, &ops) < UNSUPPORTED_PENALTY
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    match real_main() {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
