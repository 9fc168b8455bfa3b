//! Command-line front end: model validation, network inspection,
//! training, gradient checking and variance benchmarking.

mod checkpoint;
mod model_file;
mod netjson;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context, Result};
use bpq_core::estimators::{BaselineKind, EstimatorConfig, Family, NodeEstimator, SignalSource};
use bpq_core::model::NodeId;
use bpq_core::network::{
    build_percost_network, inline_root_copies, merge_networks, reduce_to_tree, ReduceStrategy,
};
use bpq_core::oracle;
use bpq_core::rng::RngContext;
use bpq_core::sample::ancestral_sample_with;
use bpq_core::train::{self, CriticMode, MetricsRecord, QKind, TrainConfig};
use bpq_core::{BpqNetwork, ValidatedScg};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value as Json};

#[derive(Parser)]
#[command(
    name = "bpq",
    version,
    about = "Cost-propagation networks and gradient estimators for stochastic computation graphs"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
    /// Pretty-print JSON outputs.
    #[arg(long, global = true)]
    pretty: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parse and validate a model file; print a structural summary.
    Validate(ValidateArgs),
    /// Build the cost-propagation network and emit it as JSON plus DOT.
    BuildNet(BuildNetArgs),
    /// Run the training loop, streaming metrics as JSON lines.
    Train(TrainArgs),
    /// Compare estimator means against the exact gradient oracle.
    GradCheck(GradCheckArgs),
    /// Measure per-family estimator variance and bias over paired seeds.
    VarianceBench(VarianceBenchArgs),
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Shortest,
    Chain,
}

#[derive(Args)]
struct BuildNetArgs {
    #[arg(long)]
    model: PathBuf,
    /// Reduce the merged network to a spanning tree with this strategy.
    #[arg(long, value_enum)]
    reduce: Option<StrategyArg>,
    /// Remove Q-nodes that merely copy root costs.
    #[arg(long)]
    inline_costs: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum CriticArg {
    Lambda,
    Replay,
    Oracle,
    None,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    iters: usize,
    #[arg(long, default_value_t = 0.1)]
    alpha_q: f64,
    #[arg(long, default_value_t = 0.05)]
    alpha_theta: f64,
    #[arg(long, default_value_t = 0.9)]
    lambda: f64,
    #[arg(long, default_value_t = 1.0)]
    gamma: f64,
    /// Estimator override, `node=family[:key=val,...]`; repeatable.
    /// `default=...` sets the fallback family.
    #[arg(long = "estimator")]
    estimators: Vec<String>,
    /// Replay buffer capacity; enables the replay critic.
    #[arg(long)]
    replay: Option<usize>,
    /// Fresh child draws per replay update.
    #[arg(long, default_value_t = 4)]
    resamples: usize,
    #[arg(long, value_enum)]
    critic: Option<CriticArg>,
    /// Critic kind: tabular | linear | mlp:H[,H...]. Defaults to
    /// tabular, falling back to linear on continuous scopes.
    #[arg(long)]
    q_kind: Option<String>,
    /// Slow-tracking rate for target critics.
    #[arg(long)]
    target_track: Option<f64>,
    /// Critic-only iterations before parameter steps begin.
    #[arg(long, default_value_t = 500)]
    warmup: usize,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    /// Write metrics JSON lines here instead of standard output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the final parameters and critics here.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Resume parameters and critics from an earlier checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Reduce the network before training.
    #[arg(long, value_enum)]
    reduce: Option<StrategyArg>,
    /// Inline root-copy Q-nodes before training.
    #[arg(long)]
    inline_costs: bool,
}

#[derive(Args)]
struct GradCheckArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seed: u64,
    /// Monte Carlo sample count when exact enumeration is unavailable.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    #[arg(long = "estimator")]
    estimators: Vec<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VarianceBenchArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 4_000)]
    samples: usize,
    /// Samples used to prefit running-mean baselines.
    #[arg(long, default_value_t = 1_000)]
    prefit: usize,
    /// Families to benchmark, e.g. `reinforce,baseline_cv:c=mean`.
    #[arg(long, default_value = "reinforce,baseline_cv")]
    families: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Validate(args) => {
            let (scg, _) = load_model(&args.model)?;
            emit(
                &netjson::model_summary_json(&scg),
                cli.pretty,
                args.out.as_deref(),
            )
        }
        Cmd::BuildNet(args) => {
            let (scg, _) = load_model(&args.model)?;
            let net = assemble_network(&scg, args.reduce, args.inline_costs)?;
            emit(
                &netjson::network_json(&net),
                cli.pretty,
                args.out.as_deref(),
            )
        }
        Cmd::Train(args) => cmd_train(args, cli.pretty),
        Cmd::GradCheck(args) => cmd_grad_check(args, cli.pretty),
        Cmd::VarianceBench(args) => cmd_variance_bench(args, cli.pretty),
    }
}

fn load_model(path: &PathBuf) -> Result<(ValidatedScg, Option<EstimatorConfig>)> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read model file {}", path.display()))?;
    let parsed = model_file::parse_model_str(&text)?;
    let scg = parsed.model.validate()?;
    Ok((scg, parsed.estimators))
}

fn assemble_network(
    scg: &ValidatedScg,
    reduce: Option<StrategyArg>,
    inline_costs: bool,
) -> Result<BpqNetwork> {
    if scg.costs().is_empty() {
        bail!("model declares no costs");
    }
    let nets: Vec<BpqNetwork> = scg
        .costs()
        .keys()
        .map(|f| build_percost_network(scg, f))
        .collect::<Result<_, _>>()?;
    let mut net = merge_networks(scg, &nets);
    if let Some(strategy) = reduce {
        let strategy = match strategy {
            StrategyArg::Shortest => ReduceStrategy::ShortestPath,
            StrategyArg::Chain => ReduceStrategy::Chain,
        };
        net = reduce_to_tree(&net, strategy);
    }
    if inline_costs {
        net = inline_root_copies(scg, &net);
    }
    net.check().map_err(|e| anyhow!("network invariant: {e}"))?;
    Ok(net)
}

fn estimator_config(
    from_model: Option<EstimatorConfig>,
    overrides: &[String],
) -> Result<EstimatorConfig> {
    let mut config = from_model.unwrap_or_default();
    for flag in overrides {
        let (node, est) = model_file::parse_estimator_flag(flag)?;
        match node {
            None => config.default = est,
            Some(n) => {
                config.nodes.insert(NodeId::from(n.as_str()), est);
            }
        }
    }
    Ok(config)
}

fn parse_q_kind(s: &str) -> Result<QKind> {
    if s == "tabular" {
        Ok(QKind::Tabular)
    } else if s == "linear" {
        Ok(QKind::Linear)
    } else if let Some(rest) = s.strip_prefix("mlp:") {
        let sizes: Vec<usize> = rest
            .split(',')
            .map(|p| p.parse::<usize>().context("mlp sizes must be integers"))
            .collect::<Result<_>>()?;
        if sizes.is_empty() {
            bail!("mlp needs at least one hidden size");
        }
        Ok(QKind::Mlp(sizes))
    } else {
        bail!("unknown q-kind `{s}` (tabular | linear | mlp:H[,H...])")
    }
}

fn metrics_json(m: &MetricsRecord) -> Json {
    let mut obj = json!({
        "iteration": m.iteration,
        "total_cost": m.total_cost,
        "td_abs": m.td_abs,
        "grad_norms": m.grad_norms,
    });
    if let Some(j) = m.exact_cost {
        obj["exact_cost"] = json!(j);
    }
    obj
}

fn cmd_train(args: TrainArgs, pretty: bool) -> Result<()> {
    let (scg, model_estimators) = load_model(&args.model)?;
    let net = assemble_network(&scg, args.reduce, args.inline_costs)?;
    let estimators = estimator_config(model_estimators, &args.estimators)?;
    let mut qs = match &args.q_kind {
        Some(s) => train::init_qs(&scg, &net, &parse_q_kind(s)?, args.seed)?,
        None => train::init_qs(&scg, &net, &QKind::Tabular, args.seed)
            .or_else(|_| train::init_qs(&scg, &net, &QKind::Linear, args.seed))?,
    };
    let mut scg = scg;
    if let Some(path) = &args.resume {
        let text = fs::read_to_string(path)
            .with_context(|| format!("cannot read checkpoint {}", path.display()))?;
        let (params, saved_qs) = checkpoint::load_checkpoint(&scg, &text)?;
        let mut model = scg.model().clone();
        model.params = params;
        scg = model.validate()?;
        for (key, q) in saved_qs {
            qs.insert(key, q);
        }
    }

    let enumerable = oracle::exact_expected_cost(&scg, scg.params()).is_ok();
    let critic = match (args.critic, args.replay) {
        (Some(CriticArg::Replay), cap) | (None, cap @ Some(_)) => CriticMode::Replay {
            capacity: cap.unwrap_or(1000),
            resamples: args.resamples,
            updates_per_iter: 1,
        },
        (Some(CriticArg::Oracle), _) => {
            if !enumerable {
                bail!("the oracle critic needs an enumerable model");
            }
            CriticMode::OracleExact
        }
        (Some(CriticArg::None), _) => CriticMode::None,
        (Some(CriticArg::Lambda), _) | (None, None) => CriticMode::LambdaReturn,
    };
    let config = TrainConfig {
        iterations: args.iters,
        alpha_q: args.alpha_q,
        alpha_theta: args.alpha_theta,
        lambda: args.lambda,
        gamma: args.gamma,
        estimators,
        critic,
        target_track: args.target_track,
        seed: args.seed,
        warmup: args.warmup,
        log_every: args.log_every,
        eval_exact_every: if enumerable {
            Some(args.log_every)
        } else {
            None
        },
    };

    let mut sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(
            fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
        ),
        None => Box::new(std::io::stdout()),
    };
    let mut io_error: Option<std::io::Error> = None;
    let params = train::train(&scg, &net, &mut qs, &config, &mut |m| {
        let line = render(&metrics_json(m), pretty);
        if let Err(e) = writeln!(sink, "{line}") {
            io_error.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing metrics");
    }
    if let Some(path) = &args.checkpoint {
        let doc = checkpoint::checkpoint_json(&params, &qs);
        fs::write(path, render(&doc, pretty) + "\n")
            .with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn cmd_grad_check(args: GradCheckArgs, pretty: bool) -> Result<()> {
    let (scg, model_estimators) = load_model(&args.model)?;
    let net = assemble_network(&scg, None, false)?;
    let config = estimator_config(model_estimators, &args.estimators)?;
    let enumerable = oracle::exact_expected_cost(&scg, scg.params()).is_ok();

    // With an enumerable model the critics hold exact values, so
    // learned-signal estimators are checkable against the oracle.
    // Continuous scopes fall back to zero-initialized linear critics.
    let mut qs = train::init_qs(&scg, &net, &QKind::Tabular, args.seed)
        .or_else(|_| train::init_qs(&scg, &net, &QKind::Linear, args.seed))?;
    if enumerable {
        train::refresh_qs_from_oracle(&scg, &net, &mut qs, scg.params())?;
    }
    let plan = config.sample_plan(&scg);
    let plain_plan = scg
        .stochastic_nodes()
        .all(|n| matches!(plan.get(n), bpq_core::sample::NodePlan::Plain));

    let (mode, estimate) = if enumerable && plain_plan {
        let g = oracle::expected_estimator_grad(&scg, scg.params(), &plan, |tr| {
            let s = bpq_core::estimators::build_surrogate(
                &scg,
                tr,
                &net,
                &qs,
                scg.params(),
                &config,
                &BTreeMap::new(),
            )
            .map_err(|e| oracle::OracleError::Invalid(format!("{e}")))?;
            Ok(s.objective)
        })?;
        ("exact", g)
    } else {
        let base = RngContext::new(args.seed);
        let mut acc: BTreeMap<String, Vec<f64>> = scg
            .params()
            .iter()
            .map(|(k, v)| (k.clone(), vec![0.0; v.len()]))
            .collect();
        for i in 0..args.samples {
            let mut tr = ancestral_sample_with(&scg, scg.params(), &base.at_step(i as u64), &plan)?;
            let s = bpq_core::estimators::build_surrogate(
                &scg,
                &mut tr,
                &net,
                &qs,
                scg.params(),
                &config,
                &BTreeMap::new(),
            )?;
            let g = tr.tape.backward_scalar(s.objective);
            for (name, v) in g {
                if let Some(slot) = acc.get_mut(&name) {
                    for (a, b) in slot.iter_mut().zip(&v) {
                        *a += b / args.samples as f64;
                    }
                }
            }
        }
        ("monte_carlo", acc)
    };

    let reference = if enumerable {
        oracle::exact_grad(&scg, scg.params())?
    } else {
        // finite differences over a common-random-number estimate
        let base = RngContext::new(args.seed ^ 0x9e37_79b9);
        let plain = bpq_core::SamplePlan::plain();
        let j_mc = |p: &bpq_core::ParamStore| -> Result<f64, oracle::OracleError> {
            let mut total = 0.0;
            for i in 0..args.samples {
                let tr = ancestral_sample_with(&scg, p, &base.at_step(i as u64), &plain)
                    .map_err(|e| oracle::OracleError::Invalid(format!("{e}")))?;
                total += tr.total_cost;
            }
            Ok(total / args.samples as f64)
        };
        oracle::finite_diff(j_mc, scg.params(), 1e-4)?
    };

    let mut rows = Vec::new();
    let mut max_diff = 0.0f64;
    for (name, est) in &estimate {
        for (i, e) in est.iter().enumerate() {
            let oracle_v = reference[name][i];
            let diff = (e - oracle_v).abs();
            max_diff = max_diff.max(diff);
            rows.push(json!({
                "param": name,
                "coord": i,
                "estimate": e,
                "oracle": oracle_v,
                "abs_diff": diff,
            }));
        }
    }
    let doc = json!({
        "mode": mode,
        "rows": rows,
        "max_abs_diff": max_diff,
    });
    emit(&doc, pretty, args.out.as_deref())
}

fn cmd_variance_bench(args: VarianceBenchArgs, pretty: bool) -> Result<()> {
    let (scg, model_estimators) = load_model(&args.model)?;
    let net = assemble_network(&scg, None, false)?;
    let enumerable = oracle::exact_expected_cost(&scg, scg.params()).is_ok();
    let base_config = estimator_config(model_estimators, &[])?;

    let mut qs = train::init_qs(&scg, &net, &QKind::Tabular, args.seed)
        .or_else(|_| train::init_qs(&scg, &net, &QKind::Linear, args.seed))?;
    if enumerable {
        train::refresh_qs_from_oracle(&scg, &net, &mut qs, scg.params())?;
    }

    let exact = if enumerable {
        Some(oracle::exact_grad(&scg, scg.params())?)
    } else {
        None
    };

    let mut families = Vec::new();
    for part in args.families.split(',').filter(|p| !p.is_empty()) {
        let (_, est) = model_file::parse_estimator_flag(&format!("default={part}"))?;
        families.push((part.to_string(), est));
    }

    let mut rows = Vec::new();
    for (fname, est) in &families {
        let mut config = base_config.clone();
        config.default = NodeEstimator {
            family: est.family.clone(),
            signal: SignalSource::ActualReturn,
        };
        config.nodes.clear();
        let plan = config.sample_plan(&scg);

        // Prefit running means for baseline families.
        let mut running_means: BTreeMap<NodeId, f64> = BTreeMap::new();
        if matches!(est.family, Family::BaselineCv(BaselineKind::RunningMean)) {
            let base = RngContext::new(args.seed ^ 0x5bd1_e995);
            let mut counts: BTreeMap<NodeId, u64> = BTreeMap::new();
            for i in 0..args.prefit {
                let tr = ancestral_sample_with(&scg, scg.params(), &base.at_step(i as u64), &plan)?;
                for n in scg.stochastic_nodes() {
                    let signal = tr.downstream_cost(&scg, n);
                    let c = counts.entry(n.clone()).or_insert(0);
                    *c += 1;
                    let m = running_means.entry(n.clone()).or_insert(0.0);
                    *m += (signal - *m) / *c as f64;
                }
            }
        }

        let base = RngContext::new(args.seed);
        let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        let mut sqs: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for i in 0..args.samples {
            let mut tr = ancestral_sample_with(&scg, scg.params(), &base.at_step(i as u64), &plan)?;
            let s = bpq_core::estimators::build_surrogate(
                &scg,
                &mut tr,
                &net,
                &qs,
                scg.params(),
                &config,
                &running_means,
            )?;
            let g = tr.tape.backward_scalar(s.objective);
            for (name, v) in g {
                let sum = sums
                    .entry(name.clone())
                    .or_insert_with(|| vec![0.0; v.len()]);
                let sq = sqs.entry(name).or_insert_with(|| vec![0.0; v.len()]);
                for ((a, b), x) in sum.iter_mut().zip(sq.iter_mut()).zip(&v) {
                    *a += x;
                    *b += x * x;
                }
            }
        }
        for (name, sum) in &sums {
            let n = args.samples as f64;
            let sq = &sqs[name];
            let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
            let var: Vec<f64> = sq
                .iter()
                .zip(&mean)
                .map(|(s, m)| (s / n - m * m).max(0.0))
                .collect();
            let bias: Option<Vec<f64>> = exact
                .as_ref()
                .map(|ex| mean.iter().zip(&ex[name]).map(|(m, e)| m - e).collect());
            let mut row = json!({
                "family": fname,
                "param": name,
                "mean": mean,
                "variance": var,
                "total_variance": var.iter().sum::<f64>(),
            });
            if let Some(bias) = bias {
                row["bias"] = json!(bias);
            }
            rows.push(row);
        }
    }
    let doc = json!({
        "samples": args.samples,
        "rows": rows,
    });
    emit(&doc, pretty, args.out.as_deref())
}

fn render(doc: &Json, pretty: bool) -> String {
    if pretty {
        serde_json::to_string_pretty(doc).expect("serializable")
    } else {
        serde_json::to_string(doc).expect("serializable")
    }
}

fn emit(doc: &Json, pretty: bool, out: Option<&std::path::Path>) -> Result<()> {
    let text = render(doc, pretty) + "\n";
    match out {
        Some(path) => {
            fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))?
        }
        None => print!("{text}"),
    }
    Ok(())
}
