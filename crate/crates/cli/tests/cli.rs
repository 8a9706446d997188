use otcr_cli::config::{BenchSpec, DataSource, EvalSplit, SweepParam, SweepSpec, SyntheticParams};
use otcr_cli::run::{cmd_ablate, cmd_bench, cmd_eval, cmd_sweep, cmd_train};
use otcr_cli::RunConfig;

fn small(out: Option<&std::path::Path>) -> RunConfig {
    let mut cfg = RunConfig {
        seeds: vec![3, 4],
        data: DataSource::Synthetic(SyntheticParams {
            n: 300,
            d: 4,
            ..SyntheticParams::default()
        }),
        out_dir: out.map(|p| p.to_path_buf()),
        ..RunConfig::default()
    };
    cfg.model.max_epochs = 6;
    cfg.model.batch_size = 64;
    cfg
}

#[test]
fn eval_reproduces_training_scores() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Some(dir.path()));
    let report = cmd_train(&cfg).unwrap();
    assert!(dir.path().join("report.json").exists());
    for row in &report.rows {
        let ck = row.checkpoint.as_ref().unwrap();
        let out = cmd_eval(&cfg, std::path::Path::new(ck)).unwrap();
        assert_eq!(out.seed, row.seed);
        let (a, b) = (out.report.pehe_sqrt.unwrap(), row.out_of_sample.pehe_sqrt.unwrap());
        assert!((a - b).abs() <= 1e-10, "{a} vs {b}");

        let train_cfg = RunConfig {
            eval_split: EvalSplit::Train,
            ..cfg.clone()
        };
        let within = cmd_eval(&train_cfg, std::path::Path::new(ck)).unwrap();
        assert!((within.report.pehe_sqrt.unwrap() - row.within.pehe_sqrt.unwrap()).abs() <= 1e-10);
    }
}

#[test]
fn damaged_checkpoints_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small(Some(dir.path()));
    let report = cmd_train(&RunConfig {
        seeds: vec![3],
        ..cfg.clone()
    })
    .unwrap();
    let ck = std::path::PathBuf::from(report.rows[0].checkpoint.as_ref().unwrap());
    let text = std::fs::read_to_string(&ck).unwrap();

    let truncated = dir.path().join("truncated.json");
    std::fs::write(&truncated, &text[..text.len() / 2]).unwrap();
    assert_eq!(cmd_eval(&cfg, &truncated).unwrap_err().kind(), "checkpoint");

    let mut doc: serde_json::Value = serde_json::from_str(&text).unwrap();
    doc["config"]["lambda"] = serde_json::json!(123.0);
    let tampered = dir.path().join("tampered.json");
    std::fs::write(&tampered, doc.to_string()).unwrap();
    let err = cmd_eval(&cfg, &tampered).unwrap_err();
    assert_eq!(err.kind(), "checkpoint");
    assert_eq!(err.to_json()["error"]["kind"], "checkpoint");

    let wider = RunConfig {
        data: DataSource::Synthetic(SyntheticParams {
            n: 300,
            d: 5,
            ..SyntheticParams::default()
        }),
        ..cfg.clone()
    };
    assert_eq!(cmd_eval(&wider, &ck).unwrap_err().kind(), "dimension");
}

#[test]
fn ablation_covers_all_variants() {
    let report = cmd_ablate(&small(None)).unwrap();
    assert_eq!(report.rows.len(), 8);
    let mut variants: Vec<&str> = report.rows.iter().map(|r| r.variant.as_str()).collect();
    variants.dedup();
    assert_eq!(variants, ["baseline", "lpr", "isp", "pcr"]);
    assert_eq!(report.comparisons.len(), 3);
    for c in &report.comparisons {
        assert_eq!(c.baseline, "baseline");
        assert_eq!(c.seeds, 2);
        let deltas: Vec<f64> = report
            .rows
            .iter()
            .filter(|r| r.variant == c.variant)
            .map(|r| {
                let b = report.rows.iter().find(|b| b.variant == "baseline" && b.seed == r.seed).unwrap();
                r.out_of_sample.pehe_sqrt.unwrap() - b.out_of_sample.pehe_sqrt.unwrap()
            })
            .collect();
        assert!((c.mean_delta - deltas.iter().sum::<f64>() / 2.0).abs() < 1e-12);
    }
}

#[test]
fn sweep_csv_has_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig {
        sweep: Some(SweepSpec {
            param: SweepParam::Kappa,
            values: vec![0.3, 0.7, 1.0],
            metrics: vec!["pehe_sqrt".into(), "auuc".into()],
        }),
        ..small(Some(dir.path()))
    };
    let (report, csv) = cmd_sweep(&cfg).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "param,value,seed,metric,score");
    assert_eq!(lines.len(), 1 + 3 * 2 * 2);
    assert!(lines[1..].iter().all(|l| l.starts_with("kappa,") && l.split(',').count() == 5));
    assert_eq!(std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap(), csv);
    assert_eq!(report.rows.len(), 6);
    let agg_values: Vec<Option<f64>> = report
        .aggregates
        .iter()
        .filter(|a| a.metric == "pehe_sqrt" && a.split == "out_of_sample")
        .map(|a| a.sweep_value)
        .collect();
    assert_eq!(agg_values, [Some(0.3), Some(0.7), Some(1.0)]);
}

#[test]
fn bench_writes_every_repeat() {
    let cfg = RunConfig {
        bench: Some(BenchSpec {
            n: vec![32, 8],
            d: vec![2, 3],
            repeats: 3,
            kappa: 0.5,
        }),
        ..small(None)
    };
    let (report, csv) = cmd_bench(&cfg).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 2 * 3);
    assert_eq!(report.bench.len(), 4);
    assert_eq!(report.bench.iter().map(|c| c.n).collect::<Vec<_>>(), [8, 32, 8, 32]);
    for c in &report.bench {
        assert!(c.ci99.0 <= c.mean_seconds && c.mean_seconds <= c.ci99.1);
    }
    assert_eq!(report.bench_monotone.len(), 2);
}

#[test]
fn invalid_configs_name_their_field() {
    let err = RunConfig::from_json(r#"{"kappa": 1.5}"#).unwrap_err();
    assert_eq!(err.kind(), "config");
    assert_eq!(err.to_json()["error"]["field"], "kappa");
    let err = RunConfig::from_json(r#"{"lambda_grid": [0.1], "sweep": {"param": "lambda", "values": [1]}}"#).unwrap_err();
    assert_eq!(err.to_json()["error"]["field"], "sweep.param");
    let err = RunConfig::from_json(r#"{"use_isp": false, "sweep": {"param": "proportion", "values": [0.5]}}"#).unwrap_err();
    assert_eq!(err.to_json()["error"]["field"], "sweep.param");
}
