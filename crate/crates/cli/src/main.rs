//! `caap` — experiment CLI: synthetic data generation, policy search,
//! regulated training, baselines, evaluation, the NoAug sweep and report
//! auditing.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use caap_core::data::{self, Dataset, SyntheticParams};
use caap_core::info_region;
use caap_core::metrics;
use caap_core::pipeline::report::{self, RunReport};
use caap_core::pipeline::{self, PolicySource, RunConfig, TrainOptions};
use caap_core::regulation::RegulationState;
use caap_core::{Backbone, PolicyNetwork};

#[derive(Parser)]
#[command(name = "caap", version, about = "Class-adaptive augmentation policy engine")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic class-dependent-bias testbed.
    GenData(GenDataArgs),
    /// Run the policy-search phase and store its artifacts.
    Search(SearchArgs),
    /// Train the task model under searched policies (paired with NOAUG).
    Train(TrainArgs),
    /// Train a baseline: no augmentation or uniform random policies.
    Baseline(BaselineArgs),
    /// Evaluate a checkpoint on a dataset; optionally pair for bias metrics.
    Eval(EvalArgs),
    /// Sweep fixed global NoAug percentages with a trained policy network.
    SweepNoaug(SweepArgs),
    /// Audit a run directory: recompute metrics from stored predictions.
    Report(ReportArgs),
}

/// RunConfig fields as flags; `--config` loads a TOML file first and the
/// flags override individual values.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed (required; every random choice derives from it).
    #[arg(long)]
    seed: u64,
    /// Start from paper-scale defaults (batch 128, 50 epochs, 10 folds).
    #[arg(long)]
    paper_scale: bool,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    n_ops: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    policy_lr: Option<f64>,
    #[arg(long)]
    freq_sea: Option<usize>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    filter_len: Option<usize>,
    #[arg(long)]
    thres: Option<f64>,
    #[arg(long)]
    region_stride: Option<usize>,
    /// Disable the difficult-loss term (ablation).
    #[arg(long)]
    no_diff_loss: bool,
    /// Disable information-region protection (ablation).
    #[arg(long)]
    no_info_region: bool,
    /// Disable the class-balanced sampler (ablation).
    #[arg(long)]
    no_balance_sampler: bool,
    /// Disable class-dependent regulation (ablation).
    #[arg(long)]
    no_regulation: bool,
    /// Add the scaling transform to the registry.
    #[arg(long)]
    enable_scaling: bool,
    /// Drop the 1/|TS| prefactor of the mixed embedding (sensitivity check).
    #[arg(long)]
    drop_mixed_prefactor: bool,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    fold_index: Option<usize>,
}

impl ConfigArgs {
    fn build(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading config {}", path.display()))?;
                let mut cfg: RunConfig = toml::from_str(&text).context("parsing config")?;
                cfg.seed = self.seed;
                cfg
            }
            None if self.paper_scale => RunConfig::paper(self.seed),
            None => RunConfig::desk(self.seed),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value {
                    $field = v;
                }
            };
        }
        set!(cfg.arch, self.arch.clone());
        set!(cfg.epochs, self.epochs);
        set!(cfg.batch_size, self.batch_size);
        set!(cfg.lr, self.lr);
        set!(cfg.weight_decay, self.weight_decay);
        set!(cfg.search.temperature, self.temperature);
        set!(cfg.search.n_ops, self.n_ops);
        set!(cfg.search.delta, self.delta);
        set!(cfg.search.policy_lr, self.policy_lr);
        set!(cfg.search.freq_sea, self.freq_sea);
        set!(cfg.alpha, self.alpha);
        set!(cfg.region.filter_len, self.filter_len);
        set!(cfg.region.thres, self.thres);
        set!(cfg.region.stride, self.region_stride);
        set!(cfg.folds, self.folds);
        set!(cfg.fold_index, self.fold_index);
        if self.no_diff_loss {
            cfg.use_diff_loss = false;
        }
        if self.no_info_region {
            cfg.use_info_region = false;
        }
        if self.no_balance_sampler {
            cfg.use_balance_sampler = false;
        }
        if self.no_regulation {
            cfg.use_regulation = false;
        }
        if self.enable_scaling {
            cfg.enable_scaling_transform = true;
        }
        if self.drop_mixed_prefactor {
            cfg.drop_mixed_prefactor = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    seed: u64,
    /// Output directory (writes data.bin, data.csv, data.meta.toml).
    #[arg(long)]
    out: PathBuf,
    /// Samples per class, e.g. 300,300,300.
    #[arg(long, value_delimiter = ',', default_values_t = [300usize, 300, 300])]
    per_class: Vec<usize>,
    /// Skip the CSV copy (binary + meta only).
    #[arg(long)]
    no_csv: bool,
}

#[derive(Args)]
struct SearchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Dataset file (.bin, or .csv with sidecar meta).
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// Directory produced by `caap search`.
    #[arg(long)]
    search_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct BaselineArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    /// noaug | uniform
    #[arg(long)]
    method: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Backbone checkpoint.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Predictions of the paired no-augmentation run (enables bias metrics).
    #[arg(long)]
    baseline_preds: Option<PathBuf>,
    /// Write per-sample saliency dumps for the first N samples.
    #[arg(long, default_value_t = 0)]
    dump_saliency: usize,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    search_dir: PathBuf,
    /// NoAug percentages, e.g. 0,10,20,...,100.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0f64, 10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0])]
    percentages: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run_dir: PathBuf,
}

fn load_dataset(path: &Path) -> anyhow::Result<Dataset> {
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let ds = match ext {
        "bin" => data::ingest_binary(path, "dataset")?,
        "csv" => {
            let spec = data::read_meta(&data::meta_path(path))
                .with_context(|| format!("sidecar meta for {}", path.display()))?;
            data::ingest_csv(path, &spec)?
        }
        other => bail!("unsupported dataset extension '{other}' (use .bin or .csv)"),
    };
    Ok(ds)
}

fn write_regulation_csv(path: &Path, reg: &RegulationState) -> anyhow::Result<()> {
    let mut text = String::from("class,search_recall,w_noaug\n");
    for (c, (r, w)) in reg.class_recall.iter().zip(&reg.w_noaug).enumerate() {
        let _ = writeln!(text, "{c},{r},{w}");
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn read_regulation_csv(path: &Path, alpha: f64) -> anyhow::Result<RegulationState> {
    let text = std::fs::read_to_string(path)?;
    let mut recall = Vec::new();
    let mut w = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            bail!("bad regulation row '{line}'");
        }
        recall.push(cols[1].parse::<f64>()?);
        w.push(cols[2].parse::<f64>()?);
    }
    Ok(RegulationState {
        alpha,
        class_recall: recall,
        w_noaug: w,
    })
}

fn cmd_gen_data(args: &GenDataArgs) -> anyhow::Result<()> {
    let ds = data::generate_synthetic(
        &SyntheticParams {
            per_class: args.per_class.clone(),
        },
        args.seed,
    )?;
    std::fs::create_dir_all(&args.out)?;
    data::export_binary(&ds, &args.out.join("data.bin"))?;
    if !args.no_csv {
        data::export_csv(&ds, &args.out.join("data.csv"))?;
    } else {
        data::write_meta(&ds.spec, &args.out.join("data.meta.toml"))?;
    }
    let oracle = data::centroid_oracle_accuracy(&ds);
    println!(
        "generated {} samples ({} classes) at {}; centroid-oracle accuracy {:.3}",
        ds.len(),
        ds.spec.num_classes,
        args.out.display(),
        oracle
    );
    Ok(())
}

fn cmd_search(args: &SearchArgs) -> anyhow::Result<()> {
    let cfg = args.config.build()?;
    let ds = load_dataset(&args.data)?;
    let (train, _test) = pipeline::fold_split(&cfg, &ds)?;
    let out = pipeline::search_phase(&cfg, &train)?;
    std::fs::create_dir_all(&args.out)?;
    out.policy_net.save(&args.out.join("policy.ckpt"))?;
    out.model.save(&args.out.join("search_model.ckpt"))?;
    write_regulation_csv(&args.out.join("regulation.csv"), &out.regulation)?;
    let mut log = String::from("epoch,train_loss\n");
    for (e, l) in out.epoch_losses.iter().enumerate() {
        let _ = writeln!(log, "{e},{l}");
    }
    std::fs::write(args.out.join("search_log.csv"), log)?;
    let mut passes = String::from("pass,policy_loss,difficult,similar\n");
    for (k, (l, d, s)) in out.policy_pass_losses.iter().enumerate() {
        let _ = writeln!(passes, "{k},{l},{d},{s}");
    }
    std::fs::write(args.out.join("policy_passes.csv"), passes)?;
    std::fs::write(args.out.join("config.toml"), toml::to_string_pretty(&cfg)?)?;
    println!(
        "search done: {} epochs, {} policy passes; per-class w_noaug {:?}",
        cfg.epochs,
        out.policy_pass_losses.len(),
        out.regulation.w_noaug
    );
    Ok(())
}

fn cmd_train(args: &TrainArgs) -> anyhow::Result<()> {
    let cfg = args.config.build()?;
    let ds = load_dataset(&args.data)?;
    let (train, test) = pipeline::fold_split(&cfg, &ds)?;
    let policy_net = PolicyNetwork::load(&args.search_dir.join("policy.ckpt"))?;
    let regulation = read_regulation_csv(&args.search_dir.join("regulation.csv"), cfg.alpha)?;
    let opts = TrainOptions {
        source: PolicySource::Network(&policy_net),
        regulation: cfg.use_regulation.then_some(&regulation),
        global_noaug_q: None,
        collect_policies: true,
    };
    let paired = pipeline::paired_run(&cfg, &train, &test, &opts)?;
    let ts = cfg.transform_set();
    let names: Vec<&'static str> = ts.iter().map(|t| t.name()).collect();
    let summary = report::write_run_report(
        &args.out,
        &RunReport {
            config: &cfg,
            dataset_name: &ds.spec.name,
            num_classes: ds.spec.num_classes,
            epoch_losses: &paired.outcome.epoch_losses,
            noaug_epoch_losses: &paired.noaug_losses,
            preds_aug: &paired.preds,
            preds_noaug: &paired.preds_noaug,
            regulation: cfg.use_regulation.then_some(&regulation),
            policies: &paired.outcome.policies,
            transform_names: &names,
        },
    )?;
    paired.outcome.model.save(&args.out.join("model.ckpt"))?;
    println!(
        "train done: accuracy {:.4} (noaug {:.4}), macro recall {:.4}, swise gain {:+.4}",
        summary.accuracy, summary.noaug_accuracy, summary.macro_recall, summary.swise.gain
    );
    Ok(())
}

fn cmd_baseline(args: &BaselineArgs) -> anyhow::Result<()> {
    let cfg = args.config.build()?;
    let ds = load_dataset(&args.data)?;
    let (train, test) = pipeline::fold_split(&cfg, &ds)?;
    let (outcome, preds, noaug_losses, preds_noaug) = match args.method.as_str() {
        "noaug" => {
            let outcome = pipeline::train_phase(&cfg, &train, &TrainOptions::noaug())?;
            let preds = pipeline::evaluate(&outcome.model, &test)?;
            let losses = outcome.epoch_losses.clone();
            (outcome, preds.clone(), losses, preds)
        }
        "uniform" => {
            let opts = TrainOptions {
                source: PolicySource::UniformRandom,
                regulation: None,
                global_noaug_q: None,
                collect_policies: false,
            };
            let paired = pipeline::paired_run(&cfg, &train, &test, &opts)?;
            (
                paired.outcome,
                paired.preds,
                paired.noaug_losses,
                paired.preds_noaug,
            )
        }
        other => bail!("unknown baseline method '{other}' (use noaug or uniform)"),
    };
    let ts = cfg.transform_set();
    let names: Vec<&'static str> = ts.iter().map(|t| t.name()).collect();
    let summary = report::write_run_report(
        &args.out,
        &RunReport {
            config: &cfg,
            dataset_name: &ds.spec.name,
            num_classes: ds.spec.num_classes,
            epoch_losses: &outcome.epoch_losses,
            noaug_epoch_losses: &noaug_losses,
            preds_aug: &preds,
            preds_noaug: &preds_noaug,
            regulation: None,
            policies: &outcome.policies,
            transform_names: &names,
        },
    )?;
    outcome.model.save(&args.out.join("model.ckpt"))?;
    println!(
        "baseline {} done: accuracy {:.4}, macro recall {:.4}",
        args.method, summary.accuracy, summary.macro_recall
    );
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> anyhow::Result<()> {
    let model = Backbone::load(&args.model)?;
    let ds = load_dataset(&args.data)?;
    let preds = pipeline::evaluate(&model, &ds)?;
    std::fs::create_dir_all(&args.out)?;
    report::write_predictions(&args.out.join("preds.csv"), &preds)?;
    let accuracy = metrics::accuracy(&preds)?;
    let macro_recall = metrics::macro_recall(&preds, ds.spec.num_classes);
    let mut summary = format!("accuracy={accuracy}\nmacro_recall={macro_recall}\n");
    if let Some(base) = &args.baseline_preds {
        let noaug = report::read_predictions(base)?;
        let bc = metrics::bias_confusion(&noaug, &preds, ds.spec.num_classes)?;
        let sw = metrics::swise_macro(&bc);
        let _ = writeln!(summary, "macro_swise_improve={}", sw.improve);
        let _ = writeln!(summary, "macro_swise_bias={}", sw.bias);
        let _ = writeln!(summary, "macro_swise_gain={}", sw.gain);
    }
    std::fs::write(args.out.join("eval_summary.txt"), &summary)?;
    print!("{summary}");
    if args.dump_saliency > 0 {
        let dump_dir = args.out.join("saliency");
        std::fs::create_dir_all(&dump_dir)?;
        let count = args.dump_saliency.min(ds.len());
        for i in 0..count {
            let slc = info_region::saliency(&model, &ds.signals[i], ds.labels[i])?;
            let regions = info_region::region_scores(
                &slc,
                &caap_core::RegionConfig {
                    filter_len: caap_core::RegionConfig::default().filter_len.min(ds.spec.length),
                    ..Default::default()
                },
            )?;
            let ctx_rng = &mut caap_core::RngStream::new(0, ds.ids[i], 0, caap_core::transforms::slots::REGION_SELECT).rng();
            let region = info_region::select_region(&regions, 60.0, ctx_rng)?;
            report::write_saliency_dump(
                &dump_dir.join(format!("sample_{}.csv", ds.ids[i])),
                &slc,
                &region,
            )?;
        }
        println!("wrote {count} saliency dumps to {}", dump_dir.display());
    }
    Ok(())
}

fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<()> {
    let cfg = args.config.build()?;
    let ds = load_dataset(&args.data)?;
    let (train, test) = pipeline::fold_split(&cfg, &ds)?;
    let policy_net = PolicyNetwork::load(&args.search_dir.join("policy.ckpt"))?;
    let sweep = pipeline::sweep_noaug(&cfg, &train, &test, &policy_net, &args.percentages)?;
    report::write_sweep_report(&args.out, &sweep, ds.spec.num_classes)?;
    println!(
        "sweep done over {:?}: argmax-q accuracy {}, argmax-q gain {}",
        args.percentages, sweep.argmax_q_accuracy, sweep.argmax_q_gain
    );
    Ok(())
}

fn cmd_report(args: &ReportArgs) -> anyhow::Result<()> {
    report::audit_run_dir(&args.run_dir)?;
    println!("report audit passed: metrics.csv matches its prediction lists");
    Ok(())
}

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::GenData(args) => cmd_gen_data(args),
        Cmd::Search(args) => cmd_search(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Baseline(args) => cmd_baseline(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::SweepNoaug(args) => cmd_sweep(args),
        Cmd::Report(args) => cmd_report(args),
    }
}
