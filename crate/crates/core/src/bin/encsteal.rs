use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use encsteal::attack::{steal, AttackConfig, Metric, Variant};
use encsteal::contrastive::{pretrain, Algo, PretrainConfig};
use encsteal::dataio::synth::{write_suite, SuiteSizes};
use encsteal::dataio::{known_dataset, resolve_dataset, sample_surrogate, AugmentationSpec, ImageSet, Split};
use encsteal::defense::{build_defense, train_defender_surrogate, DefenseConfig};
use encsteal::downstream::{accuracy, extract_features, train_classifier, ClassifierConfig, EvalReport, TaskResult};
use encsteal::eaas::{serve, EaasService, EmbeddingApi, HttpClient, ServiceConfig};
use encsteal::encoder::{load_checkpoint, save_checkpoint, FeatureExtractor};
use encsteal::pipeline::{emit_plots, run_pipeline, ExperimentManifest, PlotKind, SweepAxis, SweepConfig, SweepValue, DATA_ROOT_ENV};
use encsteal::{Error, Result};

#[derive(Parser)]
#[command(name = "encsteal", version, about = "Encoder-as-a-service stealing experiments")]
struct Cli {
    /// Dataset store (falls back to the ENCSTEAL_DATA_ROOT environment variable).
    #[arg(long, global = true)]
    data_root: Option<PathBuf>,
    /// Force reproducible, sequential execution.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic datasets to the data root.
    Synth(SynthArgs),
    /// Contrastively pre-train a target encoder.
    Pretrain(PretrainArgs),
    /// Serve an encoder over HTTP.
    Serve(ServeArgs),
    /// Steal an encoder through the API.
    Steal(StealArgs),
    /// Downstream accuracy of an encoder.
    Eval(EvalArgs),
    /// Print or compare reports.
    Report(ReportArgs),
    /// Run a manifest, optionally overriding its sweep.
    Sweep(SweepArgs),
    /// Plot sweep reports.
    Plot(PlotArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4000)]
    objects_train: usize,
    #[arg(long, default_value_t = 2000)]
    scenes: usize,
    /// Train images for each downstream family.
    #[arg(long, default_value_t = 2000)]
    train: usize,
    #[arg(long, default_value_t = 1000)]
    test: usize,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value = "SynthObjects")]
    dataset: String,
    /// Use only the first N training images.
    #[arg(long)]
    size: Option<usize>,
    /// TOML file with a full pre-training config; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    algo: Option<Algo>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    aug: Option<AugmentationSpec>,
    /// MoCo momentum coefficient.
    #[arg(long)]
    momentum: Option<f64>,
    /// MoCo dictionary size.
    #[arg(long)]
    queue: Option<usize>,
    #[arg(long, default_value = "target.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct ServiceArgs {
    #[arg(long, default_value = "none")]
    defense: DefenseConfig,
    /// Dollars per 1,000 queries.
    #[arg(long, default_value_t = 3.2)]
    price: f64,
    /// Defender data for the poisoning surrogate.
    #[arg(long, default_value = "SynthObjects")]
    defender_dataset: String,
    #[arg(long, default_value_t = 500)]
    defender_size: usize,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[command(flatten)]
    service: ServiceArgs,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    /// `name` or `name:cap`; repeatable. Defaults to `attacker` and `downstream`.
    #[arg(long = "account")]
    accounts: Vec<String>,
}

#[derive(Args)]
struct StealArgs {
    /// Service URL; without it, `--target` is served in-process.
    #[arg(long, conflicts_with = "target")]
    api: Option<String>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[command(flatten)]
    service: ServiceArgs,
    #[arg(long, default_value = "attacker")]
    account: String,
    #[arg(long, default_value = "SynthScenes")]
    surrogate: String,
    #[arg(long, default_value_t = 500)]
    surrogate_size: usize,
    #[arg(long, default_value_t = Variant::StolenEncoder)]
    variant: Variant,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    metric: Option<Metric>,
    #[arg(long)]
    aug: Option<AugmentationSpec>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long, default_value = "stolen.ckpt")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Encoder evaluated directly.
    #[arg(long)]
    encoder: Option<PathBuf>,
    /// Target encoder checkpoint, served in-process for the TA side.
    #[arg(long, conflicts_with = "api")]
    target: Option<PathBuf>,
    /// Service URL for the TA side.
    #[arg(long)]
    api: Option<String>,
    #[arg(long, default_value = "downstream")]
    account: String,
    #[command(flatten)]
    service: ServiceArgs,
    /// Downstream dataset; repeatable.
    #[arg(long, required = true)]
    downstream: Vec<String>,
    #[arg(long)]
    train_size: Option<usize>,
    #[arg(long)]
    test_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Train for the full-length 500-epoch schedule.
    #[arg(long)]
    full: bool,
    #[arg(long, default_value = "eval")]
    label: String,
    #[arg(long, default_value = "report.json")]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Two single-encoder reports: the first supplies TA, the second SA.
    #[arg(long, num_args = 2, value_names = ["TARGET", "STOLEN"])]
    compare: Option<Vec<PathBuf>>,
    /// Reports to print.
    files: Vec<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Replaces the manifest's sweep axis.
    #[arg(long, requires = "values")]
    axis: Option<String>,
    /// Comma-separated sweep values.
    #[arg(long, value_delimiter = ',')]
    values: Vec<String>,
}

#[derive(Args)]
struct PlotArgs {
    /// `lambda_sweep`, `size_sweep` or `defense_sweep`.
    #[arg(long)]
    kind: PlotKind,
    /// Report JSON files or directories of them.
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    #[arg(long, default_value = "plots")]
    out: PathBuf,
    #[arg(long, default_value = "sweep")]
    stem: String,
}

struct Ctx {
    data_root: Option<PathBuf>,
    deterministic: bool,
    seed: u64,
}

impl Ctx {
    fn dataset(&self, name: &str, split: Split, count: Option<usize>) -> Result<ImageSet> {
        resolve_dataset(name, split, self.data_root.as_deref(), count, self.seed)
    }

    fn surrogate_split(name: &str) -> Split {
        match known_dataset(name) {
            Some(info) if info.unlabeled > 0 => Split::Unlabeled,
            _ => Split::Train,
        }
    }

    fn service(&self, checkpoint: &Path, args: &ServiceArgs) -> Result<Arc<EaasService>> {
        let target = load_checkpoint(checkpoint)?;
        args.defense.validate(target.feature_dim)?;
        let surrogate = if args.defense.needs_surrogate() {
            let pool = self.dataset(&args.defender_dataset, Split::Train, None)?;
            let data = sample_surrogate(&pool, args.defender_size.min(pool.len()), self.seed ^ 0xdefe)?;
            info!("training defender surrogate on {} images", data.len());
            Some(Arc::new(train_defender_surrogate(&data, &target, &AttackConfig::default())?))
        } else {
            None
        };
        let defense = build_defense(&args.defense, surrogate)?;
        let cfg = ServiceConfig {
            price_per_1000: args.price,
            accounts: Vec::new(),
        };
        Ok(Arc::new(EaasService::new(target, defense, cfg)))
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let ctx = Ctx {
        data_root: cli.data_root.or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)),
        deterministic: cli.deterministic,
        seed: cli.seed,
    };
    let res = match cli.command {
        Command::Synth(a) => cmd_synth(&ctx, a),
        Command::Pretrain(a) => cmd_pretrain(&ctx, a),
        Command::Serve(a) => cmd_serve(&ctx, a),
        Command::Steal(a) => cmd_steal(&ctx, a),
        Command::Eval(a) => cmd_eval(&ctx, a),
        Command::Report(a) => cmd_report(a),
        Command::Sweep(a) => cmd_sweep(&ctx, a),
        Command::Plot(a) => cmd_plot(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn cmd_synth(ctx: &Ctx, a: SynthArgs) -> Result<()> {
    let root = ctx
        .data_root
        .as_deref()
        .ok_or_else(|| Error::config(format!("synth needs --data-root or {DATA_ROOT_ENV}")))?;
    let sizes = SuiteSizes {
        objects_train: a.objects_train,
        objects_test: a.test,
        scenes: a.scenes,
        digits_train: a.train,
        digits_test: a.test,
        signs_train: a.train,
        signs_test: a.test,
    };
    write_suite(root, &sizes, ctx.seed)?;
    println!("wrote synthetic datasets to {}", root.display());
    Ok(())
}

fn cmd_pretrain(ctx: &Ctx, a: PretrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e.to_string()))?;
            toml::from_str(&text).map_err(|e| Error::load(path, e.to_string()))?
        }
        None => PretrainConfig {
            seed: ctx.seed,
            ..Default::default()
        },
    };
    if let Some(v) = a.algo {
        cfg.algo = v;
    }
    if let Some(v) = a.arch {
        cfg.arch = v;
    }
    if let Some(v) = a.feature_dim {
        cfg.feature_dim = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if a.tau.is_some() {
        cfg.temperature = a.tau;
    }
    if let Some(v) = a.aug {
        cfg.augmentation = v;
    }
    if let Some(v) = a.momentum {
        cfg.momentum = v;
    }
    if let Some(v) = a.queue {
        cfg.queue_size = v;
    }
    let data = ctx.dataset(&a.dataset, Split::Train, a.size)?;
    info!("pre-training {} ({}) on {} images of {}", cfg.arch, cfg.algo, data.len(), data.name);
    let outcome = pretrain(&data, &cfg)?;
    save_checkpoint(&outcome.encoder, &a.out)?;
    outcome.write_log(&a.out.with_extension("loss.csv"))?;
    println!(
        "saved {} (final loss {:.4})",
        a.out.display(),
        outcome.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn parse_account(spec: &str) -> Result<(String, Option<u64>)> {
    match spec.split_once(':') {
        None => Ok((spec.to_string(), None)),
        Some((name, cap)) => {
            let cap = cap
                .parse()
                .map_err(|_| Error::config(format!("bad budget cap in account `{spec}`")))?;
            Ok((name.to_string(), Some(cap)))
        }
    }
}

fn cmd_serve(ctx: &Ctx, a: ServeArgs) -> Result<()> {
    let service = ctx.service(&a.checkpoint, &a.service)?;
    let accounts = if a.accounts.is_empty() {
        vec!["attacker".to_string(), "downstream".to_string()]
    } else {
        a.accounts.clone()
    };
    for spec in &accounts {
        let (name, cap) = parse_account(spec)?;
        service.open_account(&name, cap)?;
    }
    let handle = serve(service, &a.addr, a.workers)?;
    println!("serving on {} (defense {})", handle.url(), a.service.defense);
    handle.join();
    Ok(())
}

fn cmd_steal(ctx: &Ctx, a: StealArgs) -> Result<()> {
    let mut cfg = AttackConfig {
        variant: a.variant,
        seed: ctx.seed,
        ..Default::default()
    };
    if let Some(v) = a.lambda {
        cfg.lambda = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    if let Some(v) = a.batch {
        cfg.batch_size = v;
    }
    if let Some(v) = a.metric {
        cfg.metric = v;
    }
    if let Some(v) = a.aug {
        cfg.augmentation = v;
    }
    if let Some(v) = a.arch {
        cfg.stolen_arch = v;
    }
    let pool = ctx.dataset(&a.surrogate, Ctx::surrogate_split(&a.surrogate), None)?;
    let surrogate = sample_surrogate(&pool, a.surrogate_size, ctx.seed)?;
    let api: Box<dyn EmbeddingApi> = match (&a.api, &a.target) {
        (Some(url), _) => Box::new(HttpClient::new(url, &a.account)),
        (None, Some(path)) => {
            let service = ctx.service(path, &a.service)?;
            service.open_account(&a.account, None)?;
            Box::new(service.client(&a.account))
        }
        (None, None) => return Err(Error::config("steal needs --api or --target")),
    };
    let outcome = steal(api.as_ref(), &surrogate, &cfg)?;
    let dir = a.out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let stem = a.out.file_stem().and_then(|s| s.to_str()).unwrap_or("stolen");
    outcome.write_artifacts(dir, stem)?;
    let outcome = outcome.ensure_complete()?;
    save_checkpoint(&outcome.encoder, &a.out)?;
    println!(
        "saved {} after {} epochs, {} queries{}",
        a.out.display(),
        outcome.completed_epochs,
        outcome.queries,
        outcome.ledger.map(|l| format!(" ({l})")).unwrap_or_default()
    );
    Ok(())
}

/// Accuracy of a classifier trained and tested on `source` features.
fn downstream_accuracy(source: &dyn FeatureExtractor, train: &ImageSet, test: &ImageSet, cfg: &ClassifierConfig) -> Result<f64> {
    let labels = train
        .labels
        .as_ref()
        .ok_or_else(|| Error::precondition(format!("{} has no labels", train.name)))?;
    let classes = train
        .num_classes
        .ok_or_else(|| Error::precondition(format!("{} has no class count", train.name)))?;
    let features = extract_features(source, train)?;
    let clf = train_classifier(features.vectors.view(), labels, classes, cfg)?;
    let test_features = extract_features(source, test)?;
    let test_labels = test
        .labels
        .as_ref()
        .ok_or_else(|| Error::precondition(format!("{} test split has no labels", test.name)))?;
    accuracy(&clf.params, test_features.vectors.view(), test_labels)
}

fn cmd_eval(ctx: &Ctx, a: EvalArgs) -> Result<()> {
    let mut cfg = if a.full {
        ClassifierConfig::reference()
    } else {
        ClassifierConfig::default()
    };
    cfg.seed = ctx.seed;
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    let encoder = a.encoder.as_deref().map(load_checkpoint).transpose()?;
    let target_api: Option<Box<dyn EmbeddingApi>> = match (&a.api, &a.target) {
        (Some(url), _) => Some(Box::new(HttpClient::new(url, &a.account))),
        (None, Some(path)) => {
            let service = ctx.service(path, &a.service)?;
            service.open_account(&a.account, None)?;
            Some(Box::new(service.client(&a.account)))
        }
        (None, None) => None,
    };
    if encoder.is_none() && target_api.is_none() {
        return Err(Error::config("eval needs --encoder, --target or --api"));
    }
    let before = target_api.as_ref().map(|api| api.ledger()).transpose()?;
    let mut tasks = Vec::new();
    let mut price = 3.2;
    for name in &a.downstream {
        let train = ctx.dataset(name, Split::Train, a.train_size)?;
        let test = ctx.dataset(name, Split::Test, a.test_size)?;
        let ta = match &target_api {
            Some(api) => {
                price = api.info()?.price_per_1000;
                Some(downstream_accuracy(&ApiExtractor(api.as_ref()), &train, &test, &cfg)?)
            }
            None => None,
        };
        let sa = match &encoder {
            Some(enc) => Some(downstream_accuracy(enc, &train, &test, &cfg)?),
            None => None,
        };
        // A single-encoder report carries its accuracy in both columns.
        let (ta, sa) = match (ta, sa) {
            (Some(t), Some(s)) => (t, s),
            (Some(t), None) => (t, t),
            (None, Some(s)) => (s, s),
            (None, None) => unreachable!("checked above"),
        };
        let queries = if target_api.is_some() { (train.len() + test.len()) as u64 } else { 0 };
        println!("{name}: TA {:.4} SA {:.4}", ta, sa);
        tasks.push(TaskResult::new(name, ta, sa, queries, test.len()));
    }
    if let (Some(api), Some(before)) = (&target_api, before) {
        let after = api.ledger()?;
        info!("downstream extraction billed {} queries", after.query_count - before.query_count);
    }
    let mut report = EvalReport::new(&a.label, &a.service.defense.to_string(), tasks, 0, price);
    report.encoder_digest = encoder.as_ref().map(|e| e.checksum());
    report.config_digests = vec![("downstream".into(), cfg.digest())];
    write_report(&report, &a.out)?;
    println!("wrote {}", a.out.display());
    Ok(())
}

/// Adapts any [`EmbeddingApi`] to the extractor interface.
struct ApiExtractor<'a>(&'a dyn EmbeddingApi);

impl FeatureExtractor for ApiExtractor<'_> {
    fn extract(&self, images: ndarray::ArrayView4<'_, f64>) -> Result<encsteal::encoder::FeatureBatch> {
        self.0.embed_all(images)
    }
}

fn write_report(report: &EvalReport, out: &Path) -> Result<()> {
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir)?;
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    report.write(dir, stem)
}

fn print_table(reports: &[EvalReport]) {
    println!(
        "{:<28} {:<16} {:<14} {:<14} {:>7} {:>7} {:>7} {:>9}",
        "label", "variant", "defense", "task", "TA", "SA", "SA/TA", "#queries"
    );
    for r in reports {
        for t in &r.tasks {
            println!(
                "{:<28} {:<16} {:<14} {:<14} {:>7.2} {:>7.2} {:>7} {:>9}",
                r.label,
                r.variant.as_deref().unwrap_or("-"),
                r.defense,
                t.task,
                100.0 * t.ta,
                100.0 * t.sa,
                t.ratio_percent.map(|p| format!("{p}%")).unwrap_or_else(|| "undef".into()),
                r.queries_attack
            );
        }
    }
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    if let Some(pair) = &a.compare {
        let target = EvalReport::load(&pair[0])?;
        let stolen = EvalReport::load(&pair[1])?;
        let mut tasks = Vec::new();
        for t in &target.tasks {
            let s = stolen
                .task(&t.task)
                .ok_or_else(|| Error::config(format!("`{}` is missing task {}", pair[1].display(), t.task)))?;
            tasks.push(TaskResult::new(&t.task, t.ta, s.sa, t.queries_downstream, t.test_size));
        }
        let price = if target.queries_attack > 0 {
            1000.0 * target.cost_dollars / target.queries_attack as f64
        } else {
            3.2
        };
        let mut cmp = EvalReport::new(&format!("{}-vs-{}", target.label, stolen.label), &target.defense, tasks, stolen.queries_attack, price);
        cmp.variant = stolen.variant.clone();
        cmp.encoder_digest = stolen.encoder_digest.clone();
        print_table(std::slice::from_ref(&cmp));
        if let Some(out) = &a.out {
            write_report(&cmp, out)?;
        }
        return Ok(());
    }
    if a.files.is_empty() {
        return Err(Error::config("report needs --compare or report files"));
    }
    let reports = a.files.iter().map(|p| EvalReport::load(p)).collect::<Result<Vec<_>>>()?;
    print_table(&reports);
    Ok(())
}

fn cmd_sweep(ctx: &Ctx, a: SweepArgs) -> Result<()> {
    let mut m = ExperimentManifest::load(&a.manifest)?;
    if let Some(dir) = a.output_dir {
        m.output_dir = dir;
    }
    if ctx.deterministic {
        m.deterministic = true;
    }
    if m.data.root.is_none() {
        m.data.root = ctx.data_root.clone();
    }
    if let Some(axis) = a.axis {
        let axis: SweepAxis = serde_json::from_value(serde_json::Value::String(axis.clone()))
            .map_err(|_| Error::config(format!("unknown sweep axis `{axis}`")))?;
        let values = a
            .values
            .iter()
            .map(|v| {
                let v = v.trim();
                v.parse::<i64>()
                    .map(SweepValue::Int)
                    .or_else(|_| v.parse::<f64>().map(SweepValue::Num))
                    .unwrap_or_else(|_| SweepValue::Text(v.to_string()))
            })
            .collect();
        m.sweep = Some(SweepConfig { axis, values });
    }
    m.validate()?;
    let out = run_pipeline(&m)?;
    print_table(&out.reports);
    println!("comparison table: {}", out.comparison_csv.display());
    for p in &out.plots {
        match (&p.svg, &p.notice) {
            (Some(svg), _) => println!("plot: {} (data {})", svg.display(), p.csv.display()),
            (None, Some(n)) => warn!("{n}"),
            (None, None) => println!("sweep data: {}", p.csv.display()),
        }
    }
    Ok(())
}

fn collect_reports(paths: &[PathBuf]) -> Result<Vec<EvalReport>> {
    let mut files = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut inner: Vec<PathBuf> = std::fs::read_dir(p)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| f.extension().is_some_and(|x| x == "json"))
                .collect();
            inner.sort();
            files.extend(inner);
        } else {
            files.push(p.clone());
        }
    }
    files.iter().map(|f| EvalReport::load(f)).collect()
}

fn cmd_plot(a: PlotArgs) -> Result<()> {
    let reports = collect_reports(&a.reports)?;
    let out = emit_plots(&reports, a.kind, &a.out, &a.stem)?;
    println!("data: {}", out.csv.display());
    match (out.svg, out.notice) {
        (Some(svg), _) => println!("plot: {}", svg.display()),
        (None, Some(n)) => println!("{n}"),
        (None, None) => {}
    }
    Ok(())
}
