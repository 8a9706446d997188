//! Run configuration: one flat JSON object.
//!
//! Model keys are the fields of [`PcrConfig`] except `seed`; the remaining
//! keys are listed in [`RUN_KEYS`]. Unknown keys are rejected.

use std::path::PathBuf;

use otcr::datagen::SyntheticSpec;
use otcr::estimator::PcrConfig;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub const RUN_KEYS: &[&str] = &["seeds", "data", "out_dir", "lambda_grid", "eval_split", "sweep", "bench"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticParams {
    pub n: usize,
    pub d: usize,
    pub gamma: f64,
    pub nonlinearity: f64,
    pub sigma: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        Self {
            n: 2000,
            d: 10,
            gamma: 3.0,
            nonlinearity: 1.0,
            sigma: 0.5,
        }
    }
}

impl SyntheticParams {
    pub fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n: self.n,
            d: self.d,
            gamma: self.gamma,
            nonlinearity: self.nonlinearity,
            sigma: self.sigma,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    /// Generated afresh for every seed.
    Synthetic(SyntheticParams),
    /// One file shared by all seeds; only the split and model seeds vary.
    Csv { path: PathBuf },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticParams::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalSplit {
    Train,
    Val,
    #[default]
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Lambda,
    Kappa,
    Proportion,
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Lambda => "lambda",
            SweepParam::Kappa => "kappa",
            SweepParam::Proportion => "proportion",
        }
    }

    pub fn apply(self, cfg: &mut PcrConfig, value: f64) {
        match self {
            SweepParam::Lambda => cfg.lambda = value,
            SweepParam::Kappa => cfg.kappa = value,
            SweepParam::Proportion => cfg.proportion = value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub param: SweepParam,
    pub values: Vec<f64>,
    #[serde(default = "default_sweep_metrics")]
    pub metrics: Vec<String>,
}

fn default_sweep_metrics() -> Vec<String> {
    ["pehe_sqrt", "ate_err", "auuc"].map(String::from).to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    /// Total batch sizes; each problem has ⌊N/2⌋ control and ⌈N/2⌉ treated points.
    pub n: Vec<usize>,
    pub d: Vec<usize>,
    pub repeats: usize,
    pub kappa: f64,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            n: vec![16, 64, 256, 512],
            d: vec![8],
            repeats: 20,
            kappa: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Model settings; `seed` is replaced per run.
    pub model: PcrConfig,
    pub seeds: Vec<u64>,
    pub data: DataSource,
    pub out_dir: Option<PathBuf>,
    /// When set, λ is chosen per seed by best validation AUUC over this grid.
    pub lambda_grid: Option<Vec<f64>>,
    pub eval_split: EvalSplit,
    pub sweep: Option<SweepSpec>,
    pub bench: Option<BenchSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: PcrConfig::default(),
            seeds: vec![0],
            data: DataSource::default(),
            out_dir: None,
            lambda_grid: None,
            eval_split: EvalSplit::default(),
            sweep: None,
            bench: None,
        }
    }
}

fn model_keys() -> Vec<String> {
    match serde_json::to_value(PcrConfig::default()) {
        Ok(Value::Object(m)) => m.keys().filter(|k| *k != "seed").cloned().collect(),
        _ => unreachable!("PcrConfig serializes to an object"),
    }
}

fn field<T: for<'de> Deserialize<'de>>(key: &str, v: Value) -> Result<T> {
    serde_json::from_value(v).map_err(|e| CliError::config(key, e.to_string()))
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| CliError::config("<document>", e.to_string()))?;
        Self::from_value(v)
    }

    pub fn from_value(v: Value) -> Result<Self> {
        let Value::Object(obj) = v else {
            return Err(CliError::config("<document>", "expected a JSON object"));
        };
        let known = model_keys();
        let mut model = Map::new();
        let mut cfg = RunConfig::default();
        for (k, val) in obj {
            if known.contains(&k) {
                model.insert(k, val);
                continue;
            }
            match k.as_str() {
                "seeds" => cfg.seeds = field(&k, val)?,
                "data" => cfg.data = field(&k, val)?,
                "out_dir" => cfg.out_dir = field(&k, val)?,
                "lambda_grid" => cfg.lambda_grid = field(&k, val)?,
                "eval_split" => cfg.eval_split = field(&k, val)?,
                "sweep" => cfg.sweep = field(&k, val)?,
                "bench" => cfg.bench = field(&k, val)?,
                "seed" => return Err(CliError::config("seed", "use `seeds` (a list) instead")),
                _ => return Err(CliError::config(&k, "unknown key")),
            }
        }
        cfg.model = serde_json::from_value(Value::Object(model)).map_err(|e| CliError::config("<model>", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full echo with every default materialised.
    pub fn to_value(&self) -> Value {
        let mut obj = match serde_json::to_value(&self.model) {
            Ok(Value::Object(m)) => m,
            _ => unreachable!("PcrConfig serializes to an object"),
        };
        obj.remove("seed");
        let put = |obj: &mut Map<String, Value>, k: &str, v: Value| {
            obj.insert(k.to_string(), v);
        };
        put(&mut obj, "seeds", serde_json::json!(self.seeds));
        put(&mut obj, "data", serde_json::to_value(&self.data).expect("serializable"));
        put(&mut obj, "out_dir", serde_json::json!(self.out_dir));
        put(&mut obj, "lambda_grid", serde_json::json!(self.lambda_grid));
        put(&mut obj, "eval_split", serde_json::to_value(self.eval_split).expect("serializable"));
        put(&mut obj, "sweep", serde_json::to_value(&self.sweep).expect("serializable"));
        put(&mut obj, "bench", serde_json::to_value(&self.bench).expect("serializable"));
        Value::Object(obj)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.seeds.is_empty() {
            return Err(CliError::config("seeds", "must not be empty"));
        }
        if let DataSource::Synthetic(p) = &self.data {
            p.spec(0).validate()?;
        }
        if let Some(g) = &self.lambda_grid {
            if g.is_empty() {
                return Err(CliError::config("lambda_grid", "must not be empty"));
            }
            if g.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
                return Err(CliError::config("lambda_grid", "values must be finite and non-negative"));
            }
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(CliError::config("sweep.values", "grid must not be empty"));
            }
            if s.metrics.is_empty() {
                return Err(CliError::config("sweep.metrics", "must not be empty"));
            }
            for m in &s.metrics {
                if !crate::report::METRICS.contains(&m.as_str()) {
                    return Err(CliError::config("sweep.metrics", format!("unknown metric `{m}`")));
                }
            }
            match s.param {
                SweepParam::Lambda if self.lambda_grid.is_some() => {
                    return Err(CliError::config("sweep.param", "a lambda sweep cannot be combined with lambda_grid"));
                }
                SweepParam::Kappa if !self.model.use_lpr => {
                    return Err(CliError::config("sweep.param", "a kappa sweep needs use_lpr = true"));
                }
                SweepParam::Proportion if !self.model.use_isp => {
                    return Err(CliError::config("sweep.param", "a proportion sweep needs use_isp = true"));
                }
                _ => {}
            }
            for &v in &s.values {
                let mut m = self.model.clone();
                s.param.apply(&mut m, v);
                m.validate()?;
            }
        }
        if let Some(b) = &self.bench {
            if b.n.is_empty() || b.n.iter().any(|&n| n < 4) {
                return Err(CliError::config("bench.n", "needs batch sizes of at least 4"));
            }
            if b.d.is_empty() || b.d.contains(&0) {
                return Err(CliError::config("bench.d", "needs positive dimensions"));
            }
            if b.repeats < 2 {
                return Err(CliError::config("bench.repeats", "must be at least 2"));
            }
            if !(0.0..=1.0).contains(&b.kappa) {
                return Err(CliError::config("bench.kappa", "is outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Model config for one seed.
    pub fn model_for(&self, seed: u64) -> PcrConfig {
        PcrConfig {
            seed,
            ..self.model.clone()
        }
    }
}

/// Set top-level `key` to `raw`, read as JSON when it parses and as a
/// string otherwise.
pub fn apply_override(doc: &mut Value, key: &str, raw: &str) -> Result<()> {
    let Value::Object(obj) = doc else {
        return Err(CliError::config("<document>", "expected a JSON object"));
    };
    let v = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    obj.insert(key.to_string(), v);
    Ok(())
}
