use otcr::datagen::{
    generate_synthetic, load_csv, read_metadata, regenerate, split, write_csv, write_metadata, SplitSpec, Standardizer,
    SyntheticSpec,
};
use otcr::metrics::evaluate;
use proptest::prelude::*;

fn spec(n: usize, gamma: f64, seed: u64) -> SyntheticSpec {
    SyntheticSpec { n, d: 4, gamma, nonlinearity: 1.0, sigma: 0.5, seed }
}

#[test]
fn csv_round_trip_preserves_values() {
    let ds = generate_synthetic(&spec(200, 1.0, 3)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_csv(&ds, &path).unwrap();
    let (back, census) = load_csv(&path).unwrap();
    assert_eq!(census.rows, 200);
    assert_eq!(back.t, ds.t);
    assert!(back.x.max_abs_diff(&ds.x) < 1e-12);
    for (a, b) in back.yf.iter().zip(&ds.yf) {
        assert!((a - b).abs() < 1e-12);
    }
    let (ta, tb) = (back.tau_true().unwrap(), ds.tau_true().unwrap());
    assert!(ta.iter().zip(&tb).all(|(a, b)| (a - b).abs() < 1e-12));
}

#[test]
fn metadata_file_regenerates_dataset() {
    let ds = generate_synthetic(&spec(120, 2.0, 8)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    let meta_path = write_metadata(&ds.metadata.clone().unwrap(), &csv).unwrap();
    let meta = read_metadata(&meta_path).unwrap();
    let again = regenerate(&meta).unwrap();
    assert_eq!(again.x, ds.x);
    assert_eq!(again.yf, ds.yf);
    assert_eq!(again.t, ds.t);
}

#[test]
fn missing_truth_columns_flag_pehe() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bare.csv");
    std::fs::write(&path, "t,yf,x0,x1\n1,2.0,0.1,0.2\n0,1.0,0.3,0.4\n1,2.5,0.5,0.6\n").unwrap();
    let (ds, _) = load_csv(&path).unwrap();
    let rep = evaluate(&ds, &[0.0; 3], &[1.0; 3]).unwrap();
    assert!(rep.pehe_sqrt.is_none());
    assert!(rep.unavailable.iter().any(|k| k == "pehe_sqrt"));
}

#[test]
fn standardizer_centres_and_scales() {
    let ds = generate_synthetic(&spec(300, 0.0, 1)).unwrap();
    let x = ds.x.add_scalar(4.0).scaled(3.0);
    let z = Standardizer::fit(&x).apply(&x);
    for j in 0..z.cols() {
        let col = z.column(j);
        let m = col.iter().sum::<f64>() / col.len() as f64;
        let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / col.len() as f64;
        assert!(m.abs() < 1e-12);
        assert!((v - 1.0).abs() < 1e-9);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn splits_partition_and_stratify(n in 40usize..400, gamma in 0.0f64..3.0, seed in 0u64..1000) {
        let ds = generate_synthetic(&spec(n, gamma, seed)).unwrap();
        let sp = split(&ds, &SplitSpec::standard(seed)).unwrap();
        let mut all: Vec<usize> = sp.train.iter().chain(&sp.val).chain(&sp.test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let global = ds.treated_count() as f64 / n as f64;
        for part in [&sp.train, &sp.val, &sp.test] {
            let treated = part.iter().filter(|&&i| ds.t[i] == 1).count() as f64;
            let frac = treated / part.len() as f64;
            prop_assert!((frac - global).abs() <= 1.0 / part.len() as f64 + 1e-12);
        }
        prop_assert_eq!(split(&ds, &SplitSpec::standard(seed)).unwrap(), sp);
    }

    #[test]
    fn factuals_follow_treatment(seed in 0u64..1000) {
        let ds = generate_synthetic(&SyntheticSpec { sigma: 0.0, ..spec(60, 1.5, seed) }).unwrap();
        let (mu0, mu1) = (ds.mu0.as_ref().unwrap(), ds.mu1.as_ref().unwrap());
        for i in 0..ds.n() {
            let want = if ds.t[i] == 1 { mu1[i] } else { mu0[i] };
            prop_assert_eq!(ds.yf[i], want);
        }
    }
}
