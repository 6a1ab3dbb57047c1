//! Command implementations behind the `mgformer` binary.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use mgformer::attention::{dense_oracle, masked_linear_attention, AttentionInputs, MaskMode};
use mgformer::cache::{load_prepared, prepare, PreparedData};
use mgformer::checkpoint::{self, Checkpoint, CheckpointMeta};
use mgformer::config::RunConfig;
use mgformer::evaluation::{evaluate, EvalReport};
use mgformer::graph_data::{bucket_items, write_synthetic_tsv, BlockSpec, DegreeSource, Split};
use mgformer::io_util::write_atomic;
use mgformer::kernel_features::{build_simrf_map, FeatureMapKind};
use mgformer::training::{train, Model, ModelParams, TrainOutcome};
use mgformer::{Error, ErrorClass, Result};

#[derive(Debug, Parser)]
#[command(
    name = "mgformer",
    version,
    about = "Masked linear graph-attention recommender"
)]
pub struct Cli {
    /// Print reports as JSON.
    #[arg(long, global = true)]
    pub json: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Load, split and factorize a dataset into the graph cache.
    Prepare(PrepareArgs),
    /// Train a model and write its checkpoint and log.
    Train(RunArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Train and evaluate the ablation variants.
    Ablate(RunArgs),
    /// Compare linear and dense attention and time both.
    BenchOracle(BenchArgs),
}

/// Config file plus per-field overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// JSON config file; flags below override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sets the split, init, feature-map and SVD seeds at once.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub mask_mode: Option<MaskMode>,
    #[arg(long)]
    pub feature_map: Option<FeatureMapKind>,
    #[arg(long, value_parser = parse_degree_source)]
    pub degree_source: Option<DegreeSource>,
}

fn parse_degree_source(s: &str) -> std::result::Result<DegreeSource, String> {
    match s {
        "full" => Ok(DegreeSource::Full),
        "train" => Ok(DegreeSource::Train),
        _ => Err(format!("expected `full` or `train`, got `{s}`")),
    }
}

impl RunArgs {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.split_seed = s;
            cfg.init_seed = s;
            cfg.simrf_seed = s;
            cfg.svd_seed = s;
        }
        macro_rules! set {
            ($($field:ident),*) => {$(
                if let Some(v) = &self.$field {
                    cfg.$field = v.clone();
                }
            )*};
        }
        set!(
            k,
            dataset,
            out_dir,
            d,
            lambda,
            lr,
            batch_size,
            epochs,
            patience,
            mask_mode,
            feature_map,
            degree_source
        );
        if let Some(c) = &self.cache {
            cfg.cache = Some(c.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct PrepareArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Generate a synthetic dataset at the dataset path first (`blocks`).
    #[arg(long)]
    pub synthetic: Option<String>,
    #[arg(long, default_value_t = 200)]
    pub synthetic_users: usize,
    #[arg(long, default_value_t = 200)]
    pub synthetic_items: usize,
    #[arg(long, default_value_t = 2)]
    pub synthetic_blocks: usize,
    #[arg(long, default_value_t = 20)]
    pub synthetic_per_user: usize,
    #[arg(long, default_value_t = 7)]
    pub synthetic_seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Config whose dataset and cache paths replace the checkpoint's.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub cache: Option<PathBuf>,
    #[arg(long)]
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Args)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Token width.
    #[arg(long, default_value_t = 32)]
    pub m: usize,
    /// Largest linear-path size as a power of two.
    #[arg(long, default_value_t = 15)]
    pub linear_max_exp: u32,
    /// Largest dense-path size as a power of two.
    #[arg(long, default_value_t = 12)]
    pub dense_max_exp: u32,
    /// Timing repetitions; the fastest is kept.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Skip the timing sweeps.
    #[arg(long)]
    pub no_timing: bool,
    #[arg(long, hide = true)]
    pub inject_mask_corruption: bool,
}

/// Exit code for a library error.
pub fn exit_code(e: &Error) -> i32 {
    match e.class() {
        ErrorClass::Validation => 1,
        ErrorClass::Numerical => 2,
        ErrorClass::Io => 3,
    }
}

fn emit<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    if json {
        println!("{}", serde_json::to_string_pretty(value)?);
    } else {
        print!("{}", text());
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => cmd_prepare(&a, cli.json),
        Command::Train(a) => cmd_train(&a.resolve()?, cli.json),
        Command::Eval(a) => cmd_eval(&a, cli.json),
        Command::Ablate(a) => cmd_ablate(&a.resolve()?, cli.json),
        Command::BenchOracle(a) => cmd_bench_oracle(&a, cli.json),
    }
}

#[derive(Debug, Serialize)]
pub struct PrepareSummary {
    pub cache: PathBuf,
    pub cache_hit: bool,
    pub users: usize,
    pub items: usize,
    pub edges: usize,
    pub train: usize,
    pub valid: usize,
    pub test: usize,
    pub rank: usize,
}

pub fn cmd_prepare(args: &PrepareArgs, json: bool) -> Result<()> {
    let cfg = args.run.resolve()?;
    if let Some(kind) = &args.synthetic {
        if kind != "blocks" {
            return Err(Error::InvalidArgument(format!(
                "unknown synthetic dataset `{kind}`"
            )));
        }
        let spec = BlockSpec {
            users: args.synthetic_users,
            items: args.synthetic_items,
            blocks: args.synthetic_blocks,
            per_user: args.synthetic_per_user,
            seed: args.synthetic_seed,
        };
        write_synthetic_tsv(&spec, &cfg.dataset)?;
    }
    let (data, hit) = prepare(&cfg)?;
    let [train, valid, test] = data.graph.split_sizes();
    let summary = PrepareSummary {
        cache: cfg.cache_path(),
        cache_hit: hit,
        users: data.graph.num_users,
        items: data.graph.num_items,
        edges: data.graph.edges.len(),
        train,
        valid,
        test,
        rank: data.encodings.rank(),
    };
    emit(json, &summary, || {
        format!(
            "{} {}: {} users, {} items, {} edges (train {}, valid {}, test {}), rank {}\n",
            if hit { "cache hit" } else { "wrote" },
            summary.cache.display(),
            summary.users,
            summary.items,
            summary.edges,
            summary.train,
            summary.valid,
            summary.test,
            summary.rank
        )
    })
}

/// Test-split report with popularity buckets.
pub fn test_report(
    model: &Model,
    params: &ModelParams,
    data: &PreparedData,
    cfg: &RunConfig,
) -> Result<EvalReport> {
    let [q1, q2] = cfg.popularity_quantiles;
    let buckets = bucket_items(&data.graph, (q1, q2))?;
    let reps = model.representations(params)?;
    evaluate(&reps, &data.graph, Some(&buckets), Split::Test, cfg.k)
}

/// Trains on the prepared cache and evaluates the result on the test split.
pub fn train_and_report(
    cfg: &RunConfig,
) -> Result<(PreparedData, TrainOutcome, Option<EvalReport>)> {
    let data = load_prepared(cfg)?;
    let outcome = train(&data.graph, Some(&data.encodings), cfg)?;
    let report = if outcome.aborted.is_none() {
        Some(test_report(&outcome.model, &outcome.params, &data, cfg)?)
    } else {
        None
    };
    Ok((data, outcome, report))
}

pub fn training_log_lines(outcome: &TrainOutcome) -> Result<String> {
    let mut s = String::new();
    for rec in &outcome.log {
        s.push_str(&serde_json::to_string(rec)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn cmd_train(cfg: &RunConfig, json: bool) -> Result<()> {
    let (_, outcome, report) = train_and_report(cfg)?;
    let ck = Checkpoint {
        params: outcome.params.clone(),
        map: outcome.model.map.clone(),
        meta: CheckpointMeta {
            config: cfg.clone(),
            report: report.clone(),
            best_epoch: outcome.best_epoch,
            aborted: outcome.aborted.clone(),
        },
    };
    checkpoint::save(&cfg.checkpoint_path(), &ck)?;
    write_atomic(&cfg.log_path(), training_log_lines(&outcome)?.as_bytes())?;
    if let Some(reason) = outcome.aborted {
        return Err(Error::Numerical(format!(
            "training diverged ({reason}); last good parameters saved to {}",
            cfg.checkpoint_path().display()
        )));
    }
    let report = report.expect("present when not aborted");
    emit(json, &report, || {
        format!(
            "best epoch {} of {}; checkpoint {}\n{}",
            outcome.best_epoch,
            outcome.log.len(),
            cfg.checkpoint_path().display(),
            report.to_table()
        )
    })
}

pub fn cmd_eval(args: &EvalArgs, json: bool) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let mut cfg = ck.meta.config.clone();
    if let Some(p) = &args.config {
        let other = RunConfig::load(p)?;
        cfg.dataset = other.dataset;
        cfg.cache = other.cache;
    }
    if let Some(d) = &args.dataset {
        cfg.dataset = d.clone();
    }
    if let Some(c) = &args.cache {
        cfg.cache = Some(c.clone());
    }
    if let Some(k) = args.k {
        cfg.k = k;
    }
    cfg.validate()?;
    let data = load_prepared(&cfg)?;
    let mut model = Model::new(&data.graph, Some(&data.encodings), &cfg)?;
    if ck.map.dim != model.map.dim {
        return Err(Error::Shape {
            op: "eval",
            expected: format!("feature map of width {}", model.map.dim),
            actual: ck.map.dim.to_string(),
        });
    }
    model.map = ck.map.clone();
    let report = test_report(&model, &ck.params, &data, &cfg)?;
    emit(json, &report, || report.to_table())
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub recall: f64,
    pub ndcg: f64,
    pub best_epoch: usize,
}

/// The six ablation variants, each a small edit of the base config.
pub fn ablation_variants(base: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let with = |f: &dyn Fn(&mut RunConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    vec![
        ("default", base.clone()),
        (
            "no_structural_encodings",
            with(&|c| c.structural_encodings = false),
        ),
        ("no_degree_mask", with(&|c| c.mask_mode = MaskMode::AllOnes)),
        (
            "adjacency_mask",
            with(&|c| c.mask_mode = MaskMode::Adjacency),
        ),
        ("elu1", with(&|c| c.feature_map = FeatureMapKind::Elu1)),
        (
            "focused",
            with(&|c| c.feature_map = FeatureMapKind::Focused),
        ),
    ]
}

pub fn cmd_ablate(cfg: &RunConfig, json: bool) -> Result<()> {
    let mut rows = Vec::new();
    for (name, variant) in ablation_variants(cfg) {
        log::info!("ablation variant {name}");
        let (_, outcome, report) = train_and_report(&variant)?;
        let Some(report) = report else {
            return Err(Error::Numerical(format!(
                "variant {name} diverged: {}",
                outcome.aborted.unwrap_or_default()
            )));
        };
        rows.push(AblationRow {
            variant: name.to_string(),
            recall: report.recall,
            ndcg: report.ndcg,
            best_epoch: outcome.best_epoch,
        });
    }
    emit(json, &rows, || {
        let mut s = format!(
            "{:<24} {:>10} {:>10} {:>6}\n",
            "variant",
            format!("recall@{}", cfg.k),
            format!("ndcg@{}", cfg.k),
            "epoch"
        );
        for r in &rows {
            let _ = writeln!(
                s,
                "{:<24} {:>10.4} {:>10.4} {:>6}",
                r.variant, r.recall, r.ndcg, r.best_epoch
            );
        }
        s
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct Timing {
    pub n: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Equivalence {
    pub n: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub m: usize,
    pub tolerance: f64,
    pub equivalence: Vec<Equivalence>,
    pub linear: Vec<Timing>,
    pub dense: Vec<Timing>,
    pub linear_slope: Option<f64>,
    pub dense_slope: Option<f64>,
    pub passed: bool,
}

pub const BENCH_TOLERANCE: f64 = 1e-6;

struct BenchInstance {
    x: Array2<f64>,
    w_q: Array2<f64>,
    w_k: Array2<f64>,
    z: Array1<f64>,
}

impl BenchInstance {
    fn new(n: usize, m: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut u = |s: f64| (rng.random::<f64>() * 2.0 - 1.0) * s;
        let x = Array2::from_shape_fn((n, m), |_| u(1.0));
        let w_q = Array2::eye(m) + Array2::from_shape_fn((m, m), |_| u(0.1));
        let w_k = Array2::eye(m) + Array2::from_shape_fn((m, m), |_| u(0.1));
        let z = Array1::from_shape_fn(n, |_| 0.5 + u(0.45));
        Self { x, w_q, w_k, z }
    }

    fn inputs(&self) -> AttentionInputs<'_> {
        AttentionInputs {
            x: self.x.view(),
            w_q: self.w_q.view(),
            w_k: self.w_k.view(),
            degree_z: self.z.view(),
            mask_mode: MaskMode::SineDegree,
        }
    }
}

/// Least-squares slope of `log t` against `log n`.
pub fn log_log_slope(points: &[Timing]) -> Option<f64> {
    if points.len() < 2 {
        return None;
    }
    let xs: Vec<f64> = points.iter().map(|p| (p.n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.seconds.max(1e-12).ln()).collect();
    let k = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / k;
    let my = ys.iter().sum::<f64>() / k;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    Some(sxy / sxx)
}

fn fastest(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok(best)
}

pub fn bench_oracle(args: &BenchArgs) -> Result<BenchReport> {
    let m = args.m;
    let map = build_simrf_map(m, args.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);

    let mut equivalence = Vec::new();
    for n in [256, 512, 1024] {
        let inst = BenchInstance::new(n, m, &mut rng);
        let linear = masked_linear_attention(&inst.inputs(), &map)?.h;
        let mut z_ref = inst.z.clone();
        if args.inject_mask_corruption {
            // Move one token's centrality far from its true value.
            z_ref[0] = if z_ref[0] < 0.5 { 0.99 } else { 0.01 };
        }
        let mut reference = inst.inputs();
        reference.degree_z = z_ref.view();
        let dense = dense_oracle(&reference, &map, false)?.h;
        let err = linear
            .iter()
            .zip(dense.iter())
            .map(|(a, b)| (a - b).abs() / b.abs().max(f64::MIN_POSITIVE))
            .fold(0.0, f64::max);
        equivalence.push(Equivalence {
            n,
            max_rel_error: err,
        });
    }
    let passed = equivalence
        .iter()
        .all(|e| e.max_rel_error <= BENCH_TOLERANCE);

    let mut linear = Vec::new();
    let mut dense = Vec::new();
    if !args.no_timing {
        for e in 10..=args.linear_max_exp {
            let inst = BenchInstance::new(1 << e, m, &mut rng);
            let seconds = fastest(args.reps, || {
                masked_linear_attention(&inst.inputs(), &map).map(|_| ())
            })?;
            linear.push(Timing { n: 1 << e, seconds });
        }
        for e in 8..=args.dense_max_exp {
            let inst = BenchInstance::new(1 << e, m, &mut rng);
            let seconds = fastest(args.reps.min(3), || {
                dense_oracle(&inst.inputs(), &map, false).map(|_| ())
            })?;
            dense.push(Timing { n: 1 << e, seconds });
        }
    }
    Ok(BenchReport {
        m,
        tolerance: BENCH_TOLERANCE,
        linear_slope: log_log_slope(&linear),
        dense_slope: log_log_slope(&dense),
        equivalence,
        linear,
        dense,
        passed,
    })
}

pub fn cmd_bench_oracle(args: &BenchArgs, json: bool) -> Result<()> {
    let report = bench_oracle(args)?;
    emit(json, &report, || {
        let mut s = String::from("equivalence (linear vs dense, sine mask)\n");
        for e in &report.equivalence {
            let _ = writeln!(s, "  n={:<6} max rel error {:.3e}", e.n, e.max_rel_error);
        }
        for (name, pts, slope) in [
            ("linear", &report.linear, report.linear_slope),
            ("dense", &report.dense, report.dense_slope),
        ] {
            if pts.is_empty() {
                continue;
            }
            let _ = writeln!(s, "{name} timing");
            for p in pts {
                let _ = writeln!(s, "  n={:<6} {:.6} s", p.n, p.seconds);
            }
            if let Some(sl) = slope {
                let _ = writeln!(s, "  log-log slope {sl:.3}");
            }
        }
        s
    })?;
    if !report.passed {
        let worst = report
            .equivalence
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max);
        return Err(Error::Numerical(format!(
            "linear and dense attention disagree: max relative error {worst:.3e} > {BENCH_TOLERANCE:e}"
        )));
    }
    Ok(())
}
