use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use chrono::NaiveDate;
use serde_json::{json, Value};

use meant::dataset::{save_dataset, SplitFractions};
use meant::indicators::{write_prices_csv, PriceSeries};
use meant::model::ModelConfig;
use meant::synthetic::{separable_dataset, sinusoid_prices, synthetic_tweets, weekdays, SeparableSpec, SinusoidSpec};

fn meant(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meant"))
        .args(args)
        .env("MEANT_LOG", "error")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_inputs(dir: &Path, series: &[PriceSeries], tweets_per_day: usize) {
    let mut csv = Vec::new();
    write_prices_csv(series, &mut csv).unwrap();
    fs::write(dir.join("prices.csv"), csv).unwrap();
    let mut lines = String::new();
    for (i, s) in series.iter().enumerate() {
        for t in synthetic_tweets(s, tweets_per_day, 7 + i as u64) {
            lines.push_str(&json!({"ticker": t.ticker, "date": t.date.to_string(), "text": t.text}).to_string());
            lines.push('\n');
        }
    }
    fs::write(dir.join("tweets.jsonl"), lines).unwrap();
}

fn small_build_config(dir: &Path) -> String {
    let path = dir.join("build.json");
    let cfg = json!({"data": {"build": {"graph": {"width": 32, "height": 32}, "seq_len": 24}}});
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn build(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let cfg = small_build_config(dir);
    let prices = dir.join("prices.csv");
    let tweets = dir.join("tweets.jsonl");
    let out = dir.join(out);
    let mut args = vec![
        "build-dataset",
        "--prices",
        p(&prices),
        "--tweets",
        p(&tweets),
        "--out",
        p(&out),
    ];
    args.extend(["--config", &cfg]);
    args.extend(extra);
    meant(&args)
}

#[test]
fn build_dataset_crossover_reports_both_classes() {
    let dir = tempfile::tempdir().unwrap();
    let series: Vec<_> = [("AAA", 0.0), ("BBB", 1.3)]
        .iter()
        .map(|(t, phase)| {
            sinusoid_prices(
                t,
                &SinusoidSpec {
                    phase: *phase,
                    ..SinusoidSpec::default()
                },
            )
        })
        .collect();
    write_inputs(dir.path(), &series, 2);
    let out = build(dir.path(), "ds", &["--label-mode", "crossover"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(summary["label_counts"]["0"].as_u64().unwrap() > 0);
    assert!(summary["label_counts"]["1"].as_u64().unwrap() > 0);
    assert!(dir.path().join("ds/manifest.json").exists());

    let again = build(dir.path(), "ds2", &["--label-mode", "crossover"]);
    assert_eq!(code(&again), 0);
    for f in ["manifest.json", "windows.jsonl", "vocab.json", "summary.json"] {
        assert_eq!(
            fs::read(dir.path().join("ds").join(f)).unwrap(),
            fs::read(dir.path().join("ds2").join(f)).unwrap(),
            "{f}"
        );
    }

    let lag10 = build(dir.path(), "ds10", &["--lag", "10"]);
    assert_eq!(code(&lag10), 0, "{}", stderr(&lag10));
    let manifest: Value = serde_json::from_slice(&fs::read(dir.path().join("ds10/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["lag"], 10);
    let first = fs::read_to_string(dir.path().join("ds10/windows.jsonl")).unwrap();
    let w: Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
    assert_eq!(w["macd"].as_array().unwrap().len(), 10);
}

#[test]
fn stocknet_band_days_are_discarded() {
    let dir = tempfile::tempdir().unwrap();
    let n = 80;
    let dates = weekdays(NaiveDate::from_ymd_opt(2023, 1, 2).unwrap(), n);
    let closes: Vec<f64> = (0..n).map(|i| 100.0 * 1.004f64.powi(i as i32)).collect();
    let series = vec![PriceSeries::new("FLAT", dates, closes).unwrap()];
    write_inputs(dir.path(), &series, 1);
    let out = build(dir.path(), "ds", &["--label-mode", "stocknet"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(summary["windows"], 0);
    assert!(summary["candidates"].as_u64().unwrap() > 0);
    assert_eq!(summary["discarded_no_signal"], summary["candidates"]);
}

#[test]
fn unparseable_rows_name_their_line() {
    let dir = tempfile::tempdir().unwrap();
    let series = vec![sinusoid_prices("AAA", &SinusoidSpec::default())];
    write_inputs(dir.path(), &series, 1);
    let mut csv = fs::read_to_string(dir.path().join("prices.csv")).unwrap();
    csv.push_str("AAA,2099-01-01,not-a-number\n");
    fs::write(dir.path().join("prices.csv"), csv).unwrap();
    let out = build(dir.path(), "ds", &[]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 302"), "{}", stderr(&out));

    write_inputs(dir.path(), &series, 1);
    let mut tweets = fs::read_to_string(dir.path().join("tweets.jsonl")).unwrap();
    tweets.insert_str(0, "{\"ticker\": \"AAA\"}\n");
    fs::write(dir.path().join("tweets.jsonl"), tweets).unwrap();
    let out = build(dir.path(), "ds", &[]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("line 1"), "{}", stderr(&out));
}

fn toy_model() -> ModelConfig {
    ModelConfig {
        image: [3, 32, 32],
        patch: 8,
        ..ModelConfig::toy()
    }
}

fn separable_fixture(dir: &Path) -> String {
    let spec = SeparableSpec {
        image: [3, 32, 32],
        ..SeparableSpec::default()
    };
    let ds = separable_dataset(160, &spec, 11, SplitFractions::default()).unwrap();
    let path = dir.join("data");
    save_dataset(&ds, &path).unwrap();
    path.to_str().unwrap().to_string()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> String {
    let path = dir.join(name);
    fs::write(&path, cfg.to_string()).unwrap();
    path.to_str().unwrap().to_string()
}

fn toy_run_config(epochs: usize) -> Value {
    json!({
        "model": serde_json::to_value(toy_model()).unwrap(),
        "train": {"epochs": epochs, "patience": epochs, "schedule": {"eta_max": 1e-2}},
    })
}

#[test]
fn train_then_eval_on_the_separable_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let data = separable_fixture(dir.path());
    let cfg = write_config(dir.path(), "run.json", &toy_run_config(40));
    let run = dir.path().join("run");
    let out = meant(&["train", "--config", &cfg, "--data", &data, "--out", p(&run)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));

    let metrics: Value = serde_json::from_slice(&fs::read(run.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["report"]["accuracy"].as_f64().unwrap() >= 0.95, "{metrics}");
    assert_eq!(
        fs::read_to_string(run.join("train_log.jsonl")).unwrap().lines().count(),
        40
    );

    let echoed = run.join("config.json");
    let rerun = dir.path().join("rerun");
    let out = meant(&["train", "--config", p(&echoed), "--out", p(&rerun)]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert_eq!(
        fs::read(run.join("train_log.jsonl")).unwrap(),
        fs::read(rerun.join("train_log.jsonl")).unwrap()
    );

    let ckpt = run.join("best.ckpt");
    let mut outputs = Vec::new();
    for name in ["eval1", "eval2"] {
        let o = dir.path().join(name);
        let out = meant(&[
            "eval",
            "--checkpoint",
            p(&ckpt),
            "--data",
            &data,
            "--split",
            "test",
            "--out",
            p(&o),
        ]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
        outputs.push((
            fs::read(o.join("metrics.json")).unwrap(),
            fs::read(o.join("confusion.csv")).unwrap(),
        ));
    }
    assert_eq!(outputs[0], outputs[1]);
    assert!(String::from_utf8_lossy(&outputs[0].1).starts_with("true\\pred,0,1\n"));
}

#[test]
fn invalid_configs_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = separable_fixture(dir.path());
    let mut cfg = toy_run_config(1);
    cfg["model"]["fusion"]["modalities"] = json!({"text": false, "image": false, "price": false});
    let path = write_config(dir.path(), "none.json", &cfg);
    let out = meant(&[
        "train",
        "--config",
        &path,
        "--data",
        &data,
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("modality"), "{}", stderr(&out));

    let path = write_config(dir.path(), "typo.json", &json!({"train": {"epoch": 3}}));
    let out = meant(&["train", "--config", &path, "--data", &data]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));

    let path = write_config(dir.path(), "big.json", &json!({}));
    let out = meant(&[
        "train",
        "--config",
        &path,
        "--data",
        &data,
        "--out",
        p(&dir.path().join("y")),
    ]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("does not fit"), "{}", stderr(&out));
    assert!(!dir.path().join("y").exists());

    let out = meant(&["train", "--data", p(&dir.path().join("missing"))]);
    assert_eq!(code(&out), 1);
    assert!(stderr(&out).contains("manifest.json"), "{}", stderr(&out));
}

#[test]
fn ablate_reports_each_variant() {
    let dir = tempfile::tempdir().unwrap();
    let data = separable_fixture(dir.path());
    let cfg = write_config(dir.path(), "run.json", &toy_run_config(1));
    let out_dir = dir.path().join("abl");
    let out = meant(&[
        "ablate",
        "--config",
        &cfg,
        "--data",
        &data,
        "--variants",
        "full,text+price,price-only,lag1",
        "--out",
        p(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let rows: Value = serde_json::from_slice(&fs::read(out_dir.join("ablation.json")).unwrap()).unwrap();
    let counts: Vec<u64> = rows
        .as_array()
        .unwrap()
        .iter()
        .map(|r| r["num_params"].as_u64().unwrap())
        .collect();
    assert!(counts[0] > counts[1] && counts[1] > counts[2], "{counts:?}");
    assert_eq!(rows[3]["variant"], "lag1");
    assert_eq!(String::from_utf8_lossy(&out.stdout).lines().count(), 5);

    let out = meant(&["ablate", "--config", &cfg, "--data", &data, "--variants", "full,nope"]);
    assert_eq!(code(&out), 1);
    let err = stderr(&out);
    assert!(err.contains("nope") && err.contains("seqproj"), "{err}");
}

#[test]
fn gradcheck_passes_at_default_settings() {
    let out = meant(&["gradcheck"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.lines().filter(|l| l.starts_with("PASS")).count() >= 34, "{text}");
    assert!(!text.contains("FAIL"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "g.json", &json!({"tolerance": 1e-30}));
    let out = meant(&["gradcheck", "--config", &cfg]);
    assert_eq!(code(&out), 2);
}

#[test]
fn render_graphs_flat_prices_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let n = 40;
    let dates = weekdays(NaiveDate::from_ymd_opt(2023, 1, 2).unwrap(), n);
    let flat = PriceSeries::new("FLAT", dates.clone(), vec![50.0; n]).unwrap();
    write_inputs(dir.path(), &[flat], 1);
    let cfg = small_build_config(dir.path());
    let prices = dir.path().join("prices.csv");
    let day = dates[n - 1].to_string();
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = meant(&[
            "render-graphs",
            "--prices",
            p(&prices),
            "--ticker",
            "FLAT",
            "--out",
            p(&out),
            "--days",
            &day,
            "--config",
            &cfg,
        ]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        out
    };
    let a = run("g1");
    let b = run("g2");
    let name = format!("FLAT_{day}");
    for ext in ["bin", "ppm"] {
        assert_eq!(
            fs::read(a.join(format!("{name}.{ext}"))).unwrap(),
            fs::read(b.join(format!("{name}.{ext}"))).unwrap()
        );
    }

    let ppm = fs::read(a.join(format!("{name}.ppm"))).unwrap();
    let header = b"P6\n32 32\n255\n";
    assert_eq!(&ppm[..header.len()], header);
    let pixels = &ppm[header.len()..];
    let inked: Vec<usize> = (0..32 * 32)
        .filter(|i| pixels[3 * i..3 * i + 3] != [255, 255, 255])
        .map(|i| i / 32)
        .collect();
    assert!(!inked.is_empty());
    assert!(inked.iter().all(|&r| r == inked[0]), "ink on rows {inked:?}");

    let out = meant(&[
        "render-graphs",
        "--prices",
        p(&prices),
        "--ticker",
        "NOPE",
        "--out",
        p(&a),
    ]);
    assert_eq!(code(&out), 1);
}
