use std::fs;
use std::path::{Path, PathBuf};

use anyhow::anyhow;
use chrono::NaiveDate;
use serde_json::{json, Value};

use meant::dataset::{
    build_dataset as build, encode_graph_blob, load_dataset, load_tweets_jsonl, render_macd_graph, save_dataset,
    write_ppm, Dataset, DatasetError, LabelMode,
};
use meant::indicators::{compute_macd, load_prices_csv, IndicatorError};
use meant::model::Meant;
use meant::tensor::TensorError;
use meant::training::{
    ablation_table, evaluate, grad_suite, load_checkpoint, run_ablation, save_checkpoint, train as fit,
    GradSuiteConfig, TrainData, TrainError, Variant,
};

use crate::config::{check_compat, sorted_json, RunConfig};
use crate::Failure;

type Result<T> = std::result::Result<T, Failure>;

fn invalid(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Invalid(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn dataset_failure(e: DatasetError) -> Failure {
    match e {
        DatasetError::Io(_) | DatasetError::Indicator(IndicatorError::Io(_)) => runtime(e),
        _ => invalid(e),
    }
}

fn indicator_failure(e: IndicatorError) -> Failure {
    match e {
        IndicatorError::Io(_) | IndicatorError::Numeric(_) => runtime(e),
        _ => invalid(e),
    }
}

fn train_failure(e: TrainError) -> Failure {
    match e {
        TrainError::Contract(_)
        | TrainError::Mismatch(_)
        | TrainError::UnknownVariant { .. }
        | TrainError::Checkpoint(_)
        | TrainError::Json(_)
        | TrainError::Tensor(TensorError::Contract(_) | TensorError::Dimension(_)) => invalid(e),
        _ => runtime(e),
    }
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| runtime(anyhow!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| runtime(anyhow!("{}: {e}", path.display())))
}

fn json_text(value: &impl serde::Serialize) -> Result<String> {
    sorted_json(value).map_err(runtime)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = RunConfig::load_or_default(path).map_err(Failure::Invalid)?;
    cfg.validate().map_err(Failure::Invalid)?;
    Ok(cfg)
}

pub fn build_dataset(
    prices: &Path,
    tweets: &Path,
    out: &Path,
    lag: Option<usize>,
    label_mode: Option<LabelMode>,
    config: Option<&Path>,
) -> Result<()> {
    let mut cfg = RunConfig::load_or_default(config).map_err(Failure::Invalid)?.data.build;
    if let Some(lag) = lag {
        cfg.lag = lag;
    }
    if let Some(mode) = label_mode {
        cfg.label_mode = mode;
    }
    cfg.validate().map_err(invalid)?;
    let series = load_prices_csv(prices).map_err(|e| indicator_failure(e).context(prices))?;
    let records = load_tweets_jsonl(tweets).map_err(|e| dataset_failure(e).context(tweets))?;
    log::info!("{} price series, {} tweets", series.len(), records.len());
    let (ds, stats) = build(&series, &records, &cfg).map_err(dataset_failure)?;
    save_dataset(&ds, out).map_err(dataset_failure)?;
    let split_sizes = match ds.splits() {
        Ok(s) => json!({"train": s.train.len(), "val": s.val.len(), "test": s.test.len()}),
        Err(_) => Value::Null,
    };
    let summary = json!({
        "windows": ds.len(),
        "label_counts": {"0": stats.label_counts[0], "1": stats.label_counts[1]},
        "candidates": stats.candidates,
        "discarded_no_signal": stats.discarded_no_signal,
        "discarded_sparse_tweets": stats.discarded_sparse_tweets,
        "tweets_off_calendar": stats.tweets_off_calendar,
        "skipped_tickers": stats.skipped_tickers,
        "warnings": stats.warnings,
        "splits": split_sizes,
    });
    let text = json_text(&summary)?;
    write(&out.join("summary.json"), &text)?;
    print!("{text}");
    Ok(())
}

trait Context {
    fn context(self, path: &Path) -> Failure;
}

impl Context for Failure {
    fn context(self, path: &Path) -> Failure {
        match self {
            Failure::Invalid(e) => Failure::Invalid(e.context(path.display().to_string())),
            Failure::Runtime(e) => Failure::Runtime(e.context(path.display().to_string())),
        }
    }
}

fn open_dataset(dir: &Path) -> Result<Dataset> {
    if !dir.join("manifest.json").is_file() {
        return Err(invalid(anyhow!(
            "{} is not a dataset directory (no manifest.json)",
            dir.display()
        )));
    }
    load_dataset(dir).map_err(|e| dataset_failure(e).context(dir))
}

fn resolve(flag: Option<PathBuf>, from_config: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    flag.or_else(|| from_config.clone())
        .ok_or_else(|| invalid(anyhow!("no {what} given (flag or config)")))
}

pub fn train(config: Option<&Path>, data: Option<PathBuf>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    let data_dir = resolve(data, &cfg.data.dataset, "dataset directory")?;
    let out = out.unwrap_or_else(|| cfg.output.dir.clone());
    cfg.data.dataset = Some(data_dir.clone());
    cfg.output.dir = out.clone();

    let ds = open_dataset(&data_dir)?;
    check_compat(&cfg.model, ds.manifest()).map_err(Failure::Invalid)?;
    let splits = ds.splits().map_err(dataset_failure)?;
    let model = Meant::new(cfg.model.clone()).map_err(invalid)?;
    create_dir(&out)?;
    let echoed = json_text(&cfg)?;
    write(&out.join("config.json"), &echoed)?;
    print!("{echoed}");
    log::info!(
        "training {} parameters on {} windows, validating on {}",
        model.num_params(),
        splits.train.len(),
        splits.val.len()
    );

    let stats = &ds.manifest().normalization;
    let data = TrainData {
        train: &splits.train,
        val: &splits.val,
        stats,
    };
    let outcome = match fit(model, data, &cfg.train, Some(&out)) {
        Ok(o) => o,
        Err(TrainError::Diverged {
            epoch,
            batch,
            loss,
            last_good,
        }) => {
            let path = out.join("last_good.ckpt");
            save_checkpoint(&last_good, &path).map_err(runtime)?;
            return Err(runtime(anyhow!(
                "training diverged at epoch {epoch}, batch {batch} (loss {loss}); last good model in {}",
                path.display()
            )));
        }
        Err(e) => return Err(train_failure(e)),
    };
    let report = evaluate(&outcome.best, &splits.val, stats, cfg.train.batch_size).map_err(train_failure)?;
    write(
        &out.join("metrics.json"),
        json_text(&json!({"split": "val", "report": report}))?,
    )?;
    write(&out.join("confusion.csv"), report.confusion_csv())?;
    println!(
        "best epoch {} of {}: val accuracy {:.4}, macro F1 {:.4}{}",
        outcome.best_epoch,
        outcome.log.len(),
        report.accuracy,
        report.macro_f1,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}

pub fn eval(checkpoint: &Path, data: &Path, split: &str, out: Option<PathBuf>, batch_size: usize) -> Result<()> {
    if batch_size == 0 {
        return Err(invalid(anyhow!("batch size must be >= 1")));
    }
    let model = load_checkpoint(checkpoint).map_err(|e| train_failure(e).context(checkpoint))?;
    let ds = open_dataset(data)?;
    check_compat(model.config(), ds.manifest()).map_err(Failure::Invalid)?;
    let splits = ds.splits().map_err(dataset_failure)?;
    let windows = match split {
        "train" => &splits.train,
        "val" => &splits.val,
        _ => &splits.test,
    };
    let report = evaluate(&model, windows, &ds.manifest().normalization, batch_size).map_err(train_failure)?;
    let out = out.unwrap_or_else(|| checkpoint.parent().map(Path::to_path_buf).unwrap_or_default());
    create_dir(&out)?;
    let text = json_text(&json!({"split": split, "report": report}))?;
    write(&out.join("metrics.json"), &text)?;
    write(&out.join("confusion.csv"), report.confusion_csv())?;
    print!("{text}");
    Ok(())
}

pub fn ablate(config: Option<&Path>, data: Option<PathBuf>, variants: &str, out: Option<PathBuf>) -> Result<()> {
    let variants = Variant::parse_list(variants).map_err(train_failure)?;
    let mut cfg = load_config(config)?;
    let data_dir = resolve(data, &cfg.data.dataset, "dataset directory")?;
    let out = out.unwrap_or_else(|| cfg.output.dir.clone());
    cfg.data.dataset = Some(data_dir.clone());
    cfg.output.dir = out.clone();
    for v in &variants {
        v.apply(&cfg.model)
            .validate()
            .map_err(|e| invalid(anyhow!("variant {v}: {e}")))?;
    }

    let ds = open_dataset(&data_dir)?;
    check_compat(&cfg.model, ds.manifest()).map_err(Failure::Invalid)?;
    let splits = ds.splits().map_err(dataset_failure)?;
    create_dir(&out)?;
    write(&out.join("config.json"), json_text(&cfg)?)?;
    let data = TrainData {
        train: &splits.train,
        val: &splits.val,
        stats: &ds.manifest().normalization,
    };
    let rows = run_ablation(&cfg.model, &cfg.train, data, &splits.test, &variants).map_err(train_failure)?;
    let table = ablation_table(&rows);
    write(&out.join("ablation.json"), json_text(&rows)?)?;
    write(&out.join("ablation.txt"), &table)?;
    print!("{table}");
    Ok(())
}

pub fn gradcheck(config: Option<&Path>) -> Result<()> {
    let cfg: GradSuiteConfig = match config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))?;
            serde_json::from_str(&text).map_err(|e| invalid(anyhow!("{}: {e}", path.display())))?
        }
        None => GradSuiteConfig::default(),
    };
    if !(cfg.step > 0.0 && cfg.tolerance > 0.0) {
        return Err(invalid(anyhow!("step and tolerance must be positive")));
    }
    let cases = grad_suite(&cfg).map_err(train_failure)?;
    let mut failed = 0;
    for c in &cases {
        let status = if c.passed { "PASS" } else { "FAIL" };
        print!(
            "{status} {:<28} max rel err {:.3e} over {} coords",
            c.name, c.max_relative_error, c.coordinates
        );
        if let (false, Some((p, i, a, n))) = (c.passed, &c.worst) {
            print!(" (worst {p}[{i}]: analytic {a:.6e}, numeric {n:.6e})");
        }
        println!();
        failed += usize::from(!c.passed);
    }
    println!("{} of {} gradient checks passed", cases.len() - failed, cases.len());
    if failed > 0 {
        return Err(runtime(anyhow!(
            "{failed} gradient checks above tolerance {:e}",
            cfg.tolerance
        )));
    }
    Ok(())
}

pub fn render_graphs(prices: &Path, ticker: &str, out: &Path, days: &[NaiveDate], config: Option<&Path>) -> Result<()> {
    let build = RunConfig::load_or_default(config).map_err(Failure::Invalid)?.data.build;
    build.graph.validate().map_err(invalid)?;
    let all = load_prices_csv(prices).map_err(|e| indicator_failure(e).context(prices))?;
    let series = all
        .iter()
        .find(|s| s.ticker() == ticker)
        .ok_or_else(|| invalid(anyhow!("ticker {ticker} not in {}", prices.display())))?;
    let ind = compute_macd(series, &build.macd).map_err(indicator_failure)?;
    let wanted: Vec<NaiveDate> = if days.is_empty() {
        ind.dates.last().copied().into_iter().collect()
    } else {
        days.to_vec()
    };
    create_dir(out)?;
    for day in wanted {
        let idx = ind
            .dates
            .binary_search(&day)
            .map_err(|_| invalid(anyhow!("{day} is not a trading day of {ticker}")))?;
        let img = render_macd_graph(&ind, idx, &build.graph).map_err(invalid)?;
        let stem = format!("{ticker}_{day}");
        write(&out.join(format!("{stem}.bin")), encode_graph_blob(&img))?;
        write(&out.join(format!("{stem}.ppm")), write_ppm(&img))?;
        println!("{}", out.join(format!("{stem}.ppm")).display());
    }
    Ok(())
}
