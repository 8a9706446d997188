//! Synthetic benchmark generation, CSV ingestion and stratified splits.
//!
//! CSV schema (header required): `x0,...,x{d-1},t,yf[,ycf][,mu0,mu1]`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{dim_mismatch, Error, Result};
use crate::matstat::{dot, Matrix, SeededRng};

/// Generator identifier recorded in metadata.
pub const GENERATOR: &str = "gaussian-logistic-quadratic/v1";
/// Sampling attempts before an empty treatment group becomes an error.
pub const MAX_ATTEMPTS: u32 = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n: usize,
    pub d: usize,
    /// Selection-bias strength γ in `e(x) = sigmoid(γ·⟨w, x⟩)`.
    pub gamma: f64,
    /// Weight of the quadratic interaction terms in both outcome surfaces.
    #[serde(default = "default_nonlinearity")]
    pub nonlinearity: f64,
    /// Outcome noise standard deviation σ.
    pub sigma: f64,
    pub seed: u64,
}

fn default_nonlinearity() -> f64 {
    1.0
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Error::InvalidConfig {
            field: field.into(),
            reason: reason.into(),
        };
        if self.n < 20 {
            return Err(bad("n", "must be at least 20"));
        }
        if self.d < 2 {
            return Err(bad("d", "must be at least 2"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(bad("gamma", "must be finite and non-negative"));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(bad("sigma", "must be finite and non-negative"));
        }
        if !self.nonlinearity.is_finite() {
            return Err(bad("nonlinearity", "must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub generator: String,
    pub rng: String,
    pub spec: SyntheticSpec,
    /// Sampling attempt that produced both groups (0-based).
    pub attempt: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CausalDataset {
    pub x: Matrix,
    pub t: Vec<u8>,
    pub yf: Vec<f64>,
    pub ycf: Option<Vec<f64>>,
    pub mu0: Option<Vec<f64>>,
    pub mu1: Option<Vec<f64>>,
    pub metadata: Option<DatasetMetadata>,
}

impl CausalDataset {
    pub fn new(x: Matrix, t: Vec<u8>, yf: Vec<f64>, ycf: Option<Vec<f64>>, mu: Option<(Vec<f64>, Vec<f64>)>) -> Result<Self> {
        let (mu0, mu1) = match mu {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let ds = Self {
            x,
            t,
            yf,
            ycf,
            mu0,
            mu1,
            metadata: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.rows();
        let check = |name: &'static str, len: usize| {
            if len != n {
                Err(dim_mismatch(name, n, len))
            } else {
                Ok(())
            }
        };
        check("dataset t", self.t.len())?;
        check("dataset yf", self.yf.len())?;
        if let Some(v) = &self.ycf {
            check("dataset ycf", v.len())?;
        }
        if let Some(v) = &self.mu0 {
            check("dataset mu0", v.len())?;
        }
        if let Some(v) = &self.mu1 {
            check("dataset mu1", v.len())?;
        }
        if self.mu0.is_some() != self.mu1.is_some() {
            return Err(Error::InvalidConfig {
                field: "mu0/mu1".into(),
                reason: "must be given together".into(),
            });
        }
        if let Some(bad) = self.t.iter().find(|&&t| t > 1) {
            return Err(Error::InvalidConfig {
                field: "t".into(),
                reason: format!("treatment value {bad} is not 0 or 1"),
            });
        }
        for g in [0u8, 1] {
            if !self.t.contains(&g) {
                return Err(Error::EmptyGroup { group: g });
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn d(&self) -> usize {
        self.x.cols()
    }

    pub fn treated_count(&self) -> usize {
        self.t.iter().filter(|&&t| t == 1).count()
    }

    /// True effect per unit: `mu1 - mu0` when available, else from the noisy
    /// counterfactual column, else `None`.
    pub fn tau_true(&self) -> Option<Vec<f64>> {
        if let (Some(m0), Some(m1)) = (&self.mu0, &self.mu1) {
            return Some(m1.iter().zip(m0).map(|(a, b)| a - b).collect());
        }
        self.ycf.as_ref().map(|ycf| {
            (0..self.n())
                .map(|i| if self.t[i] == 1 { self.yf[i] - ycf[i] } else { ycf[i] - self.yf[i] })
                .collect()
        })
    }

    /// Outcome the unit would have had under the other treatment, when known.
    pub fn counterfactual(&self) -> Option<&[f64]> {
        self.ycf.as_deref()
    }

    /// Rows `idx`, in that order. Empty groups are allowed here.
    pub fn subset(&self, idx: &[usize]) -> CausalDataset {
        let pick = |v: &Vec<f64>| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        CausalDataset {
            x: self.x.select_rows(idx),
            t: idx.iter().map(|&i| self.t[i]).collect(),
            yf: pick(&self.yf),
            ycf: self.ycf.as_ref().map(pick),
            mu0: self.mu0.as_ref().map(pick),
            mu1: self.mu1.as_ref().map(pick),
            metadata: self.metadata.clone(),
        }
    }
}

/// Sample a dataset. Parameters of the outcome and propensity surfaces come
/// from one seeded stream, units from another, so the surfaces stay fixed
/// across retries.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<CausalDataset> {
    spec.validate()?;
    for attempt in 0..MAX_ATTEMPTS {
        let ds = sample(spec, attempt);
        if ds.t.contains(&0) && ds.t.contains(&1) {
            return Ok(ds);
        }
    }
    let n1 = sample(spec, MAX_ATTEMPTS - 1).treated_count();
    Err(Error::EmptyGroup {
        group: if n1 == 0 { 1 } else { 0 },
    })
}

/// Rebuild a dataset from its embedded metadata.
pub fn regenerate(meta: &DatasetMetadata) -> Result<CausalDataset> {
    if meta.generator != GENERATOR {
        return Err(Error::InvalidConfig {
            field: "generator".into(),
            reason: format!("unknown generator `{}`", meta.generator),
        });
    }
    meta.spec.validate()?;
    Ok(sample(&meta.spec, meta.attempt))
}

struct Surfaces {
    w: Vec<f64>,
    beta0: Vec<f64>,
    beta_tau: Vec<f64>,
    q0: (Vec<f64>, Vec<f64>),
    q_tau: (Vec<f64>, Vec<f64>),
}

fn unit_vector(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = dot(&v, &v).sqrt();
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

fn surfaces(spec: &SyntheticSpec) -> Surfaces {
    let mut rng = SeededRng::derive(spec.seed, 1);
    let d = spec.d;
    let scale = 1.0 / (d as f64).sqrt();
    let w = unit_vector(&mut rng, d);
    let beta0 = (0..d).map(|_| rng.normal() * scale).collect();
    let beta_tau = (0..d).map(|_| rng.normal() * scale).collect();
    let q0 = (unit_vector(&mut rng, d), unit_vector(&mut rng, d));
    let q_tau = (unit_vector(&mut rng, d), unit_vector(&mut rng, d));
    Surfaces {
        w,
        beta0,
        beta_tau,
        q0,
        q_tau,
    }
}

fn sample(spec: &SyntheticSpec, attempt: u32) -> CausalDataset {
    let s = surfaces(spec);
    let mut rng = SeededRng::derive(spec.seed, 2 + attempt as u64);
    let (n, d) = (spec.n, spec.d);
    let x = rng.normal_matrix(n, d);
    let mut t = Vec::with_capacity(n);
    let mut mu0 = Vec::with_capacity(n);
    let mut mu1 = Vec::with_capacity(n);
    for i in 0..n {
        let xi = x.row(i);
        let logit = spec.gamma * dot(&s.w, xi);
        let e = 1.0 / (1.0 + (-logit).exp());
        t.push(rng.bernoulli(e) as u8);
        let m0 = dot(&s.beta0, xi) + spec.nonlinearity * dot(&s.q0.0, xi) * dot(&s.q0.1, xi);
        let tau = 1.0 + dot(&s.beta_tau, xi) + spec.nonlinearity * dot(&s.q_tau.0, xi) * dot(&s.q_tau.1, xi);
        mu0.push(m0);
        mu1.push(m0 + tau);
    }
    let mut yf = Vec::with_capacity(n);
    let mut ycf = Vec::with_capacity(n);
    for i in 0..n {
        let (f, cf) = if t[i] == 1 { (mu1[i], mu0[i]) } else { (mu0[i], mu1[i]) };
        yf.push(f + spec.sigma * rng.normal());
        ycf.push(cf + spec.sigma * rng.normal());
    }
    CausalDataset {
        x,
        t,
        yf,
        ycf: Some(ycf),
        mu0: Some(mu0),
        mu1: Some(mu1),
        metadata: Some(DatasetMetadata {
            generator: GENERATOR.into(),
            rng: SeededRng::ALGORITHM.into(),
            spec: *spec,
            attempt,
        }),
    }
}

/// Column layout found in a CSV file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvCensus {
    pub rows: usize,
    pub covariates: usize,
    pub has_ycf: bool,
    pub has_mu: bool,
    pub columns: Vec<String>,
}

pub fn load_csv(path: impl AsRef<Path>) -> Result<(CausalDataset, CsvCensus)> {
    let file = std::fs::File::open(path.as_ref())?;
    read_csv(file)
}

pub fn read_csv<R: std::io::Read>(reader: R) -> Result<(CausalDataset, CsvCensus)> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let pos: HashMap<&str, usize> = headers.iter().enumerate().map(|(i, h)| (h.as_str(), i)).collect();
    let missing = |name: &str| Error::Parse {
        row: 0,
        column: name.into(),
        message: "missing mandatory column".into(),
    };
    let mut xcols = Vec::new();
    while let Some(&c) = pos.get(format!("x{}", xcols.len()).as_str()) {
        xcols.push(c);
    }
    if xcols.is_empty() {
        return Err(missing("x0"));
    }
    let tcol = *pos.get("t").ok_or_else(|| missing("t"))?;
    let yfcol = *pos.get("yf").ok_or_else(|| missing("yf"))?;
    let ycfcol = pos.get("ycf").copied();
    let mucols = match (pos.get("mu0"), pos.get("mu1")) {
        (Some(&a), Some(&b)) => Some((a, b)),
        (None, None) => None,
        (Some(_), None) => return Err(missing("mu1")),
        (None, Some(_)) => return Err(missing("mu0")),
    };
    for h in &headers {
        let known = h == "t" || h == "yf" || h == "ycf" || h == "mu0" || h == "mu1" || xcols.iter().any(|&c| &headers[c] == h);
        if !known {
            return Err(Error::Parse {
                row: 0,
                column: h.clone(),
                message: "unexpected column".into(),
            });
        }
    }

    let d = xcols.len();
    let mut xs = Vec::new();
    let (mut t, mut yf, mut ycf, mut mu0, mut mu1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let num = |c: usize| -> Result<f64> {
            let cell = rec.get(c).unwrap_or("");
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                row,
                column: headers[c].clone(),
                message: format!("`{cell}` is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    row,
                    column: headers[c].clone(),
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        for &c in &xcols {
            xs.push(num(c)?);
        }
        let tv = num(tcol)?;
        if tv != 0.0 && tv != 1.0 {
            return Err(Error::Parse {
                row,
                column: "t".into(),
                message: format!("treatment {tv} is not 0 or 1"),
            });
        }
        t.push(tv as u8);
        yf.push(num(yfcol)?);
        if let Some(c) = ycfcol {
            ycf.push(num(c)?);
        }
        if let Some((a, b)) = mucols {
            mu0.push(num(a)?);
            mu1.push(num(b)?);
        }
    }
    let n = t.len();
    let x = Matrix::from_vec(n, d, xs)?;
    let census = CsvCensus {
        rows: n,
        covariates: d,
        has_ycf: ycfcol.is_some(),
        has_mu: mucols.is_some(),
        columns: headers,
    };
    let ds = CausalDataset::new(
        x,
        t,
        yf,
        ycfcol.map(|_| ycf),
        mucols.map(|_| (mu0, mu1)),
    )?;
    Ok((ds, census))
}

/// Write in the documented schema. Floats use the shortest representation that
/// parses back to the same value.
pub fn write_csv(ds: &CausalDataset, path: impl AsRef<Path>) -> Result<()> {
    let file = std::fs::File::create(path.as_ref())?;
    write_csv_to(ds, file)
}

pub fn write_csv_to<W: std::io::Write>(ds: &CausalDataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = (0..ds.d()).map(|j| format!("x{j}")).collect();
    header.push("t".into());
    header.push("yf".into());
    if ds.ycf.is_some() {
        header.push("ycf".into());
    }
    if ds.mu0.is_some() {
        header.push("mu0".into());
        header.push("mu1".into());
    }
    w.write_record(&header)?;
    for i in 0..ds.n() {
        let mut rec: Vec<String> = ds.x.row(i).iter().map(|v| v.to_string()).collect();
        rec.push(ds.t[i].to_string());
        rec.push(ds.yf[i].to_string());
        if let Some(v) = &ds.ycf {
            rec.push(v[i].to_string());
        }
        if let (Some(a), Some(b)) = (&ds.mu0, &ds.mu1) {
            rec.push(a[i].to_string());
            rec.push(b[i].to_string());
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Write `meta` as the JSON sidecar `<csv path>.meta.json`.
pub fn write_metadata(meta: &DatasetMetadata, csv_path: impl AsRef<Path>) -> Result<std::path::PathBuf> {
    let mut p = csv_path.as_ref().as_os_str().to_owned();
    p.push(".meta.json");
    let p = std::path::PathBuf::from(p);
    std::fs::write(&p, serde_json::to_string_pretty(meta)?)?;
    Ok(p)
}

pub fn read_metadata(path: impl AsRef<Path>) -> Result<DatasetMetadata> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub ratios: [f64; 3],
    pub stratify_by_treatment: bool,
    pub seed: u64,
}

impl SplitSpec {
    /// 0.7 / 0.15 / 0.15, stratified.
    pub fn standard(seed: u64) -> Self {
        Self {
            ratios: [0.7, 0.15, 0.15],
            stratify_by_treatment: true,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Disjoint, exhaustive train/val/test indices, each sorted ascending.
pub fn split(ds: &CausalDataset, spec: &SplitSpec) -> Result<Split> {
    let r = spec.ratios;
    if r.iter().any(|v| !(*v > 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig {
            field: "ratios".into(),
            reason: format!("{r:?} must be positive and sum to 1"),
        });
    }
    let mut rng = SeededRng::derive(spec.seed, 7);
    let groups: Vec<Vec<usize>> = if spec.stratify_by_treatment {
        (0..=1u8).map(|g| (0..ds.n()).filter(|&i| ds.t[i] == g).collect()).collect()
    } else {
        vec![(0..ds.n()).collect()]
    };
    let mut out = Split {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    for mut g in groups {
        let len = g.len();
        rng.shuffle(&mut g);
        let n_train = (r[0] * len as f64).round() as usize;
        let n_val = ((r[1] * len as f64).round() as usize).min(len - n_train.min(len));
        let n_train = n_train.min(len);
        if spec.stratify_by_treatment && (n_train == 0 || n_val == 0 || len - n_train - n_val == 0) {
            return Err(Error::StratificationInfeasible {
                reason: format!("a treatment group of {len} units cannot cover three splits"),
            });
        }
        out.train.extend_from_slice(&g[..n_train]);
        out.val.extend_from_slice(&g[n_train..n_train + n_val]);
        out.test.extend_from_slice(&g[n_train + n_val..]);
    }
    for (name, s) in [("train", &out.train), ("val", &out.val), ("test", &out.test)] {
        if s.is_empty() {
            return Err(Error::EmptySplit { split: name });
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();
    out.test.sort_unstable();
    Ok(out)
}

/// Per-column affine standardisation fitted on one set of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Matrix) -> Self {
        let n = x.rows().max(1) as f64;
        let mean: Vec<f64> = x.col_sums().into_iter().map(|s| s / n).collect();
        let mut var = vec![0.0; x.cols()];
        for i in 0..x.rows() {
            for (j, v) in x.row(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2) / n;
            }
        }
        let scale = var.into_iter().map(|v| if v > 0.0 { v.sqrt() } else { 1.0 }).collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        Matrix::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }
}
