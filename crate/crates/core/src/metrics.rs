//! Treatment-effect and regression metrics.
//!
//! Unavailable metrics are `None` and listed by name in
//! [`EvalReport::unavailable`]; they are never reported as zero.

use serde::{Deserialize, Serialize};

use crate::datagen::CausalDataset;
use crate::error::{dim_mismatch, Error, Result};
use crate::estimator::{pcr_discrepancy, PcrConfig, PcrModel};

fn same_len(op: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(dim_mismatch(op, a, b));
    }
    Ok(())
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// `√(mean (τ̂ - τ)²)`.
pub fn pehe(tau_hat: &[f64], tau: &[f64]) -> Result<f64> {
    same_len("pehe", tau_hat.len(), tau.len())?;
    Ok(mean(tau_hat.iter().zip(tau).map(|(a, b)| (a - b).powi(2))).unwrap_or(0.0).sqrt())
}

/// `|mean(τ̂) - mean(τ)|`.
pub fn ate_err(tau_hat: &[f64], tau: &[f64]) -> Result<f64> {
    same_len("ate_err", tau_hat.len(), tau.len())?;
    let (a, b) = (mean(tau_hat.iter().copied()), mean(tau.iter().copied()));
    Ok(match (a, b) {
        (Some(a), Some(b)) => (a - b).abs(),
        _ => 0.0,
    })
}

/// ATE error restricted to treated units; `None` without treated units.
pub fn att_err(tau_hat: &[f64], tau: &[f64], t: &[u8]) -> Result<Option<f64>> {
    same_len("att_err", tau_hat.len(), tau.len())?;
    same_len("att_err", tau_hat.len(), t.len())?;
    let treated = || (0..t.len()).filter(|&i| t[i] == 1);
    let a = mean(treated().map(|i| tau_hat[i]));
    let b = mean(treated().map(|i| tau[i]));
    Ok(a.zip(b).map(|(a, b)| (a - b).abs()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpliftCurve {
    /// `(k/n, uplift(k))` for k = 0..=n.
    pub points: Vec<(f64, f64)>,
    /// Prefixes that lacked one of the groups and so contributed zero.
    pub one_sided_prefixes: usize,
}

/// Cumulative uplift curve: units sorted by τ̂ descending (ties by index),
/// `uplift(k) = (ȳ_treated - ȳ_control)` over the first k units, times `k/n`.
pub fn uplift_curve(tau_hat: &[f64], t: &[u8], yf: &[f64]) -> Result<UpliftCurve> {
    same_len("uplift_curve", tau_hat.len(), t.len())?;
    same_len("uplift_curve", tau_hat.len(), yf.len())?;
    let n = tau_hat.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| tau_hat[b].total_cmp(&tau_hat[a]).then(a.cmp(&b)));
    let mut points = Vec::with_capacity(n + 1);
    points.push((0.0, 0.0));
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    let mut one_sided = 0;
    for (k, &i) in order.iter().enumerate() {
        if t[i] == 1 {
            s1 += yf[i];
            n1 += 1;
        } else {
            s0 += yf[i];
            n0 += 1;
        }
        let frac = (k + 1) as f64 / n as f64;
        let u = if n1 > 0 && n0 > 0 {
            (s1 / n1 as f64 - s0 / n0 as f64) * frac
        } else {
            one_sided += 1;
            0.0
        };
        points.push((frac, u));
    }
    Ok(UpliftCurve {
        points,
        one_sided_prefixes: one_sided,
    })
}

/// Area under the uplift curve minus the straight line to its endpoint.
/// `None` unless both groups are present.
pub fn auuc(tau_hat: &[f64], t: &[u8], yf: &[f64]) -> Result<Option<f64>> {
    let curve = uplift_curve(tau_hat, t, yf)?;
    if !(t.contains(&0) && t.contains(&1)) {
        return Ok(None);
    }
    let area: f64 = curve
        .points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0)
        .sum();
    let end = curve.points.last().map_or(0.0, |p| p.1);
    Ok(Some(area - end / 2.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Regression {
    pub rmse: f64,
    /// `None` when the target has zero variance or fewer than two values.
    pub r2: Option<f64>,
}

pub fn regression_metrics(y_hat: &[f64], y: &[f64]) -> Result<Regression> {
    same_len("regression_metrics", y_hat.len(), y.len())?;
    let sse: f64 = y_hat.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum();
    let n = y.len();
    let rmse = if n > 0 { (sse / n as f64).sqrt() } else { 0.0 };
    let r2 = mean(y.iter().copied()).and_then(|m| {
        let sst: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
        (n >= 2 && sst > 0.0).then(|| 1.0 - sse / sst)
    });
    Ok(Regression { rmse, r2 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub pehe_sqrt: Option<f64>,
    pub pehe_sq: Option<f64>,
    pub ate_err: Option<f64>,
    pub att_err: Option<f64>,
    pub auuc: Option<f64>,
    pub rmse_f: Option<f64>,
    pub rmse_cf: Option<f64>,
    pub r2_f: Option<f64>,
    pub r2_cf: Option<f64>,
    pub unavailable: Vec<String>,
}

impl EvalReport {
    /// Named values, in report order.
    pub fn fields(&self) -> Vec<(&'static str, Option<f64>)> {
        vec![
            ("pehe_sqrt", self.pehe_sqrt),
            ("pehe_sq", self.pehe_sq),
            ("ate_err", self.ate_err),
            ("att_err", self.att_err),
            ("auuc", self.auuc),
            ("rmse_f", self.rmse_f),
            ("rmse_cf", self.rmse_cf),
            ("r2_f", self.r2_f),
            ("r2_cf", self.r2_cf),
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.fields().into_iter().find(|(k, _)| *k == name).and_then(|(_, v)| v)
    }
}

/// Full metric suite for per-unit predictions on `ds`: `y0_hat`, `y1_hat` are
/// the two predicted potential outcomes.
pub fn evaluate(ds: &CausalDataset, y0_hat: &[f64], y1_hat: &[f64]) -> Result<EvalReport> {
    let n = ds.n();
    same_len("evaluate", n, y0_hat.len())?;
    same_len("evaluate", n, y1_hat.len())?;
    let tau_hat: Vec<f64> = y1_hat.iter().zip(y0_hat).map(|(a, b)| a - b).collect();
    let yf_hat: Vec<f64> = (0..n).map(|i| if ds.t[i] == 1 { y1_hat[i] } else { y0_hat[i] }).collect();
    let ycf_hat: Vec<f64> = (0..n).map(|i| if ds.t[i] == 1 { y0_hat[i] } else { y1_hat[i] }).collect();

    let mut rep = EvalReport {
        n,
        pehe_sqrt: None,
        pehe_sq: None,
        ate_err: None,
        att_err: None,
        auuc: auuc(&tau_hat, &ds.t, &ds.yf)?,
        rmse_f: None,
        rmse_cf: None,
        r2_f: None,
        r2_cf: None,
        unavailable: Vec::new(),
    };
    if let Some(tau) = ds.tau_true() {
        let p = pehe(&tau_hat, &tau)?;
        rep.pehe_sqrt = Some(p);
        rep.pehe_sq = Some(p * p);
        rep.ate_err = Some(ate_err(&tau_hat, &tau)?);
        rep.att_err = att_err(&tau_hat, &tau, &ds.t)?;
    }
    let f = regression_metrics(&yf_hat, &ds.yf)?;
    rep.rmse_f = Some(f.rmse);
    rep.r2_f = f.r2;
    if let Some(ycf) = &ds.ycf {
        let cf = regression_metrics(&ycf_hat, ycf)?;
        rep.rmse_cf = Some(cf.rmse);
        rep.r2_cf = cf.r2;
    }
    rep.unavailable = rep
        .fields()
        .into_iter()
        .filter(|(_, v)| v.is_none())
        .map(|(k, _)| k.to_string())
        .collect();
    Ok(rep)
}

/// Empirical ingredients of the PEHE bound. Diagnostic only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    /// Factual MSE of `φ₁` on treated units.
    pub eps_f_t1: f64,
    /// Factual MSE of `φ₀` on control units.
    pub eps_f_t0: f64,
    /// Discrepancy between group representations under `cfg`.
    pub discrepancy: f64,
    pub pehe_sq: f64,
}

pub fn bound_report(model: &PcrModel, ds: &CausalDataset, cfg: &PcrConfig) -> Result<BoundReport> {
    let tau = ds.tau_true().ok_or(Error::Unavailable { what: "counterfactual truth".into() })?;
    let r = model.represent(&ds.x)?;
    let (y0, y1) = model.predict_outcomes(&ds.x)?;
    let idx0: Vec<usize> = (0..ds.n()).filter(|&i| ds.t[i] == 0).collect();
    let idx1: Vec<usize> = (0..ds.n()).filter(|&i| ds.t[i] == 1).collect();
    let mse = |idx: &[usize], yh: &[f64]| mean(idx.iter().map(|&i| (yh[i] - ds.yf[i]).powi(2))).unwrap_or(0.0);
    let discrepancy = pcr_discrepancy(&r.select_rows(&idx0), &r.select_rows(&idx1), cfg, None)?.value;
    let tau_hat: Vec<f64> = y1.iter().zip(&y0).map(|(a, b)| a - b).collect();
    let p = pehe(&tau_hat, &tau)?;
    Ok(BoundReport {
        eps_f_t1: mse(&idx1, &y1),
        eps_f_t0: mse(&idx0, &y0),
        discrepancy,
        pehe_sq: p * p,
    })
}
