//! Batch front end for the event-amplified forecasting pipeline: synthetic
//! data generation, per-ticker forecaster training, amplifier-head training,
//! evaluation reports, and the desk-scale comparison grid.
//!
//! All commands operate on a single output directory that holds the data
//! files and every derived artifact; a lock file keeps concurrent runs out.
//! Exit codes: 0 success, 2 usage/config error, 3 data error, 4 numerical
//! abort.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use evamp::evalkit::{emit_report, label_eval_rows, price_eval_rows, PriceSeries, ReportRow};
use evamp::forecasters::{ForecasterConfig, ForecasterKind, TrainConfig};
use evamp::indicators::{load_label_file, LabelProvider};
use evamp::labels::{decode_label, encode_labels, parse_tokens, render_tokens, QuantConfig};
use evamp::market::{
    ingest_events, ingest_prices, load_cap_buckets, synth_market, write_events_jsonl,
    write_prices_csv, AlignedSeries, CapThresholds, EventRecord, ScenarioConfig,
};
use evamp::pipeline::{
    prepare_samples, split_events, train_forecaster_bank, AnyHead, ForecasterBank, HeadKind,
};
use evamp::times::{infer_amplifier, train_amplifier, EventSample, ForecastBundle, HeadTrainConfig};
use evamp::{PipelineError, Result};

#[derive(Parser)]
#[command(name = "evamp", version, about = "event-amplified price forecasting pipeline")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic market (prices CSV + events JSONL) into the output dir.
    Gen(CommonArgs),
    /// Train one forecaster per ticker on the prices in the output dir.
    TrainTs(CommonArgs),
    /// Train an amplifier head against the frozen forecaster bank.
    TrainHead(CommonArgs),
    /// Evaluate baseline and head predictions on the held-out events.
    Eval(CommonArgs),
    /// Batch access to the label codec.
    Labels(LabelsArgs),
    /// Run the full {model} x {head} x {provider} comparison grid.
    PaperGrid(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// Key-value config file (scenario format for `gen`, experiment format otherwise).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory holding data files and artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Base random seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Forecaster kind: dlinear or patchtst; overrides the config file.
    #[arg(long)]
    model: Option<String>,
    /// Amplifier head: times, timel, or sentievent; overrides the config file.
    #[arg(long)]
    head: Option<String>,
    /// Label provider: oracle, noisy-t5-like, noisy:<flip>,<sigma>, or file:<path>.
    #[arg(long)]
    provider: Option<String>,
}

#[derive(Args)]
struct LabelsArgs {
    /// encode: prices + events -> labels.jsonl; decode: labels.jsonl -> decoded.jsonl
    #[arg(value_parser = ["encode", "decode"])]
    direction: String,
    #[command(flatten)]
    common: CommonArgs,
}

/// Experiment settings merged from the config file and command-line flags;
/// flags win.
struct Experiment {
    model: ForecasterKind,
    head: HeadKind,
    provider: String,
    seed: u64,
    fc_lr: f64,
    fc_epochs: usize,
    head_lr: Option<f64>,
    head_epochs: Option<usize>,
    head_batch: Option<usize>,
}

impl Default for Experiment {
    fn default() -> Self {
        Self {
            model: ForecasterKind::DLinear,
            head: HeadKind::Times,
            provider: "oracle".into(),
            seed: 1,
            fc_lr: 1e-4,
            fc_epochs: 60,
            head_lr: None,
            head_epochs: None,
            head_batch: None,
        }
    }
}

impl Experiment {
    fn parse(text: &str) -> Result<Self> {
        let mut exp = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                PipelineError::Config(format!("config line {}: expected key=value", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: String| PipelineError::Config(format!("config line {}: {e}", i + 1));
            match key {
                "model" => exp.model = ForecasterKind::parse(value)?,
                "head" => exp.head = HeadKind::parse(value)?,
                "provider" => exp.provider = value.to_string(),
                "seed" => exp.seed = value.parse().map_err(|e| bad(format!("{e}")))?,
                "fc_lr" => exp.fc_lr = value.parse().map_err(|e| bad(format!("{e}")))?,
                "fc_epochs" => exp.fc_epochs = value.parse().map_err(|e| bad(format!("{e}")))?,
                "head_lr" => exp.head_lr = Some(value.parse().map_err(|e| bad(format!("{e}")))?),
                "head_epochs" => {
                    exp.head_epochs = Some(value.parse().map_err(|e| bad(format!("{e}")))?)
                }
                "head_batch" => {
                    exp.head_batch = Some(value.parse().map_err(|e| bad(format!("{e}")))?)
                }
                other => return Err(bad(format!("unknown key '{other}'"))),
            }
        }
        Ok(exp)
    }

    fn from_args(args: &CommonArgs) -> Result<Self> {
        let mut exp = match &args.config {
            Some(path) => {
                require_file(path)?;
                Self::parse(&std::fs::read_to_string(path)?)?
            }
            None => Self::default(),
        };
        if let Some(s) = args.seed {
            exp.seed = s;
        }
        if let Some(m) = &args.model {
            exp.model = ForecasterKind::parse(m)?;
        }
        if let Some(h) = &args.head {
            exp.head = HeadKind::parse(h)?;
        }
        if let Some(p) = &args.provider {
            exp.provider = p.clone();
        }
        Ok(exp)
    }

    fn head_train_cfg(&self) -> HeadTrainConfig {
        let mut cfg = self.head.default_train_cfg(self.seed);
        if let Some(lr) = self.head_lr {
            cfg.lr = lr;
        }
        if let Some(e) = self.head_epochs {
            cfg.epochs = e;
        }
        if let Some(b) = self.head_batch {
            cfg.batch = b;
        }
        cfg
    }

    fn label_provider(&self, qcfg: &QuantConfig) -> Result<LabelProvider> {
        match self.provider.strip_prefix("file:") {
            Some(path) => load_label_file(Path::new(path), qcfg),
            None => LabelProvider::parse(&self.provider, self.seed),
        }
    }
}

/// Exclusive ownership of the output directory for the lifetime of a command.
struct DirLock {
    path: PathBuf,
}

impl DirLock {
    fn acquire(out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out)?;
        let path = out.join(".lock");
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(PipelineError::Config(
                format!("{} is locked by another run (stale {}?)", out.display(), path.display()),
            )),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Referenced paths must exist up front; a missing one is a configuration
/// mistake, not a data error.
fn require_file(path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(PipelineError::Config(format!("missing file {}", path.display())));
    }
    Ok(())
}

fn require_dir(path: &Path) -> Result<()> {
    if !path.is_dir() {
        return Err(PipelineError::Config(format!("missing directory {}", path.display())));
    }
    Ok(())
}

fn load_market(
    out: &Path,
    qcfg: &QuantConfig,
) -> Result<(BTreeMap<String, AlignedSeries>, Vec<EventRecord>)> {
    require_file(&out.join("prices.csv"))?;
    require_file(&out.join("events.jsonl"))?;
    let series = ingest_prices(&out.join("prices.csv"))?;
    let (events, rejections) = ingest_events(&out.join("events.jsonl"), &series, qcfg)?;
    for r in &rejections {
        eprintln!("warning: events.jsonl line {}: {}", r.line, r.reason);
    }
    Ok((series, events))
}

fn bank_dir(out: &Path, kind: ForecasterKind) -> PathBuf {
    out.join("forecasters").join(kind.as_str())
}

fn head_path(out: &Path, kind: HeadKind) -> PathBuf {
    out.join("heads").join(format!("{}.head", kind.as_str()))
}

fn cmd_gen(args: &CommonArgs) -> Result<()> {
    let scen = match &args.config {
        Some(path) => {
            require_file(path)?;
            ScenarioConfig::parse(&std::fs::read_to_string(path)?)?
        }
        None => ScenarioConfig::default(),
    };
    scen.validate()?;
    let seed = args.seed.unwrap_or(1);
    let _lock = DirLock::acquire(&args.out)?;
    let (series, events) = synth_market(&scen, seed)?;
    write_prices_csv(&series, &args.out.join("prices.csv"))?;
    write_events_jsonl(&events, &args.out.join("events.jsonl"))?;
    println!(
        "generated {} tickers x {} days, {} events -> {}",
        series.len(),
        series.values().next().map_or(0, |s| s.len()),
        events.len(),
        args.out.display()
    );
    Ok(())
}

fn cmd_train_ts(args: &CommonArgs) -> Result<()> {
    let exp = Experiment::from_args(args)?;
    let _lock = DirLock::acquire(&args.out)?;
    let (series, _) = load_market(&args.out, &QuantConfig::default())?;
    let tcfg = TrainConfig {
        lr: exp.fc_lr,
        epochs: exp.fc_epochs,
        seed: exp.seed,
        ..Default::default()
    };
    let bank = train_forecaster_bank(exp.model, ForecasterConfig::default(), &series, &tcfg)?;
    let dir = bank_dir(&args.out, exp.model);
    bank.save(&dir)?;
    let mut csv = String::from("ticker,epoch,loss\n");
    for (ticker, curve) in &bank.curves {
        for (epoch, loss) in curve.iter().enumerate() {
            csv.push_str(&format!("{ticker},{epoch},{loss}\n"));
        }
    }
    std::fs::write(dir.join("loss.csv"), csv)?;
    println!("trained {} {} forecasters -> {}", bank.models.len(), exp.model.as_str(), dir.display());
    Ok(())
}

fn cmd_train_head(args: &CommonArgs) -> Result<()> {
    let exp = Experiment::from_args(args)?;
    let qcfg = QuantConfig::default();
    let _lock = DirLock::acquire(&args.out)?;
    let (series, events) = load_market(&args.out, &qcfg)?;
    require_dir(&bank_dir(&args.out, exp.model))?;
    let bank = ForecasterBank::load(&bank_dir(&args.out, exp.model))?;
    let provider = exp.label_provider(&qcfg)?;
    let split = split_events(&events, exp.seed);
    let train_s = prepare_samples(&bank, &series, &split.train, Some(&provider), &qcfg)?;
    let val_s = prepare_samples(&bank, &series, &split.val, Some(&provider), &qcfg)?;

    let tickers: Vec<String> = series.keys().cloned().collect();
    let mut store = ndcore::ParamStore::new();
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(exp.seed);
    let head = AnyHead::init(exp.head, &tickers, &mut store, &mut rng)?;
    let outcome = train_amplifier(head.model(), &mut store, &train_s, Some(&val_s), &exp.head_train_cfg())?;

    std::fs::create_dir_all(args.out.join("heads"))?;
    let path = head_path(&args.out, exp.head);
    head.save(&store, &path)?;
    let mut csv = String::from("epoch,train_loss,val_loss\n");
    for (epoch, loss) in outcome.curve.iter().enumerate() {
        let val = outcome.val_curve.get(epoch).map_or("NA".into(), |v| format!("{v}"));
        csv.push_str(&format!("{epoch},{loss},{val}\n"));
    }
    std::fs::write(args.out.join("heads").join(format!("{}.loss.csv", exp.head.as_str())), csv)?;
    println!(
        "trained {} head on {} events (kept epoch {}) -> {}",
        exp.head.as_str(),
        train_s.len(),
        outcome.best_epoch,
        path.display()
    );
    Ok(())
}

/// Bundles plus the sample metadata needed for grouped breakdowns.
fn test_bundles(
    head: &AnyHead,
    store: &ndcore::ParamStore,
    samples: &[EventSample],
) -> Result<Vec<ForecastBundle>> {
    samples.iter().map(|s| infer_amplifier(head.model(), store, s)).collect()
}

fn cmd_eval(args: &CommonArgs) -> Result<()> {
    let exp = Experiment::from_args(args)?;
    let qcfg = QuantConfig::default();
    let _lock = DirLock::acquire(&args.out)?;
    let (series, events) = load_market(&args.out, &qcfg)?;
    require_dir(&bank_dir(&args.out, exp.model))?;
    let bank = ForecasterBank::load(&bank_dir(&args.out, exp.model))?;
    require_file(&head_path(&args.out, exp.head))?;
    let (head, store) = AnyHead::load(&head_path(&args.out, exp.head))?;
    let provider = exp.label_provider(&qcfg)?;
    let split = split_events(&events, exp.seed);
    let test_s = prepare_samples(&bank, &series, &split.test, Some(&provider), &qcfg)?;
    let bundles = test_bundles(&head, &store, &test_s)?;

    let baseline_name = format!("baseline-{}", exp.model.as_str());
    let head_name = format!("{}-{}", head.kind().as_str(), exp.model.as_str());
    let mut rows: Vec<ReportRow> = Vec::new();
    rows.extend(price_eval_rows(&baseline_name, "all", &bundles, PriceSeries::Baseline));
    rows.extend(price_eval_rows(&head_name, "all", &bundles, PriceSeries::Updated));

    // per-cap-bucket breakdown when market-cap metadata is available
    let caps_path = args.out.join("caps.csv");
    if caps_path.is_file() {
        let caps = load_cap_buckets(&caps_path, &CapThresholds::default())?;
        let mut by_bucket: BTreeMap<&'static str, Vec<ForecastBundle>> = BTreeMap::new();
        for (sample, bundle) in test_s.iter().zip(&bundles) {
            if let Some(bucket) = caps.get(&sample.ticker) {
                by_bucket.entry(bucket.as_str()).or_default().push(bundle.clone());
            }
        }
        for (bucket, group) in &by_bucket {
            rows.extend(price_eval_rows(&baseline_name, bucket, group, PriceSeries::Baseline));
            rows.extend(price_eval_rows(&head_name, bucket, group, PriceSeries::Updated));
        }
    }

    // provider label quality against the gold labels on the same events
    let gold_s = prepare_samples(&bank, &series, &split.test, Some(&LabelProvider::Oracle), &qcfg)?;
    let pred: Vec<_> = test_s.iter().flat_map(|s| s.labels.iter().cloned()).collect();
    let gold: Vec<_> = gold_s.iter().flat_map(|s| s.labels.iter().cloned()).collect();
    rows.extend(label_eval_rows(&exp.provider, &pred, &gold)?);

    let report_dir = args.out.join("report");
    emit_report(&rows, &report_dir)?;
    println!("evaluated {} held-out events -> {}", test_s.len(), report_dir.display());
    Ok(())
}

fn cmd_labels(args: &LabelsArgs) -> Result<()> {
    let qcfg = QuantConfig::default();
    let out = &args.common.out;
    let _lock = DirLock::acquire(out)?;
    if args.direction == "encode" {
        let (_, events) = load_market(out, &qcfg)?;
        let mut lines = String::new();
        let mut skipped = 0usize;
        for e in &events {
            let Some(realized) = &e.realized_prices else {
                skipped += 1;
                continue;
            };
            let seq = encode_labels(realized, &qcfg)?;
            let row = serde_json::json!({
                "ticker": e.ticker,
                "date": e.date.format("%Y-%m-%d").to_string(),
                "labels": render_tokens(&seq),
            });
            lines.push_str(&row.to_string());
            lines.push('\n');
        }
        if skipped > 0 {
            eprintln!("warning: skipped {skipped} events without {} realized days", qcfg.horizon);
        }
        std::fs::write(out.join("labels.jsonl"), &lines)?;
        println!("encoded labels -> {}", out.join("labels.jsonl").display());
    } else {
        let content = std::fs::read_to_string(out.join("labels.jsonl"))?;
        let mut lines = String::new();
        for (i, raw) in content.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(raw)
                .map_err(|e| PipelineError::Data(format!("labels.jsonl line {}: {e}", i + 1)))?;
            let tokens = v["labels"].as_str().ok_or_else(|| {
                PipelineError::Data(format!("labels.jsonl line {}: missing labels", i + 1))
            })?;
            let seq = parse_tokens(tokens, &qcfg)
                .map_err(|e| PipelineError::Data(format!("labels.jsonl line {}: {e}", i + 1)))?;
            let changes: Vec<f64> = seq.expanded.iter().map(|l| decode_label(l, &qcfg)).collect();
            let row = serde_json::json!({
                "ticker": v["ticker"],
                "date": v["date"],
                "changes": changes,
            });
            lines.push_str(&row.to_string());
            lines.push('\n');
        }
        std::fs::write(out.join("decoded.jsonl"), &lines)?;
        println!("decoded labels -> {}", out.join("decoded.jsonl").display());
    }
    Ok(())
}

fn grid_mae(bundles: &[ForecastBundle], which: PriceSeries) -> Result<(f64, f64)> {
    let m = evamp::evalkit::price_metrics(bundles, which)?;
    Ok((m.rmse, m.mae))
}

fn cmd_paper_grid(args: &CommonArgs) -> Result<()> {
    let exp = Experiment::from_args(args)?;
    let seed = exp.seed;
    let qcfg = QuantConfig::default();
    let _lock = DirLock::acquire(&args.out)?;

    let (series, events) = synth_market(&ScenarioConfig::default(), seed)?;
    write_prices_csv(&series, &args.out.join("prices.csv"))?;
    write_events_jsonl(&events, &args.out.join("events.jsonl"))?;
    let tickers: Vec<String> = series.keys().cloned().collect();
    let split = split_events(&events, seed);

    let mut csv = String::from(
        "model,head,provider,events,baseline_rmse,baseline_mae,updated_rmse,updated_mae,mae_improvement_pct\n",
    );
    for model in [ForecasterKind::DLinear, ForecasterKind::PatchTst] {
        // the transformer is an order of magnitude slower per epoch; the
        // grid is a smoke-scale comparison, not a leaderboard
        let fc_epochs = match model {
            ForecasterKind::DLinear => exp.fc_epochs,
            ForecasterKind::PatchTst => exp.fc_epochs.min(15),
        };
        let tcfg = TrainConfig { lr: exp.fc_lr, epochs: fc_epochs, seed, ..Default::default() };
        eprintln!("training {} bank ({} epochs)...", model.as_str(), fc_epochs);
        let bank = train_forecaster_bank(model, ForecasterConfig::default(), &series, &tcfg)?;
        bank.save(&bank_dir(&args.out, model))?;
        for head_kind in [HeadKind::Times, HeadKind::Timel, HeadKind::Sentievent] {
            for provider_name in ["oracle", "noisy-t5-like"] {
                let provider = LabelProvider::parse(provider_name, seed)?;
                let train_s = prepare_samples(&bank, &series, &split.train, Some(&provider), &qcfg)?;
                let val_s = prepare_samples(&bank, &series, &split.val, Some(&provider), &qcfg)?;
                let test_s = prepare_samples(&bank, &series, &split.test, Some(&provider), &qcfg)?;

                let mut store = ndcore::ParamStore::new();
                let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
                let head = AnyHead::init(head_kind, &tickers, &mut store, &mut rng)?;
                eprintln!("training {} x {} x {provider_name}...", model.as_str(), head_kind.as_str());
                train_amplifier(
                    head.model(),
                    &mut store,
                    &train_s,
                    Some(&val_s),
                    &head_kind.default_train_cfg(seed),
                )?;
                let bundles = test_bundles(&head, &store, &test_s)?;
                let (brmse, bmae) = grid_mae(&bundles, PriceSeries::Baseline)?;
                let (urmse, umae) = grid_mae(&bundles, PriceSeries::Updated)?;
                csv.push_str(&format!(
                    "{},{},{provider_name},{},{brmse:.6},{bmae:.6},{urmse:.6},{umae:.6},{:.2}\n",
                    model.as_str(),
                    head_kind.as_str(),
                    bundles.len(),
                    100.0 * (bmae - umae) / bmae,
                ));
            }
        }
    }
    let path = args.out.join("grid.csv");
    std::fs::write(&path, csv)?;
    println!("comparison grid -> {}", path.display());
    Ok(())
}

fn exit_code_of(e: &PipelineError) -> u8 {
    match e {
        PipelineError::Config(_) => 2,
        PipelineError::Data(_) | PipelineError::Label(_) | PipelineError::Io(_) => 3,
        PipelineError::Numerical(_) | PipelineError::Nd(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Gen(args) => cmd_gen(args),
        Cmd::TrainTs(args) => cmd_train_ts(args),
        Cmd::TrainHead(args) => cmd_train_head(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Labels(args) => cmd_labels(args),
        Cmd::PaperGrid(args) => cmd_paper_grid(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}
