//! Two-head outcome model trained with factual loss plus a transport
//! discrepancy between group representations.
//!
//! A shared trunk ψ maps covariates to representations; heads φ₀, φ₁ predict
//! the potential outcomes. Per minibatch the loss is
//!
//! ```text
//! L = Σ_{t_i=1} (φ₁(ψ(x_i)) - y_i)² + Σ_{t_i=0} (φ₀(ψ(x_i)) - y_i)² + λ·Disc
//! ```
//!
//! where `Disc` is the fused Gromov-Wasserstein objective between the control
//! (rows) and treated (columns) representation clouds, computed after an
//! optional rank-k projection. The plan π and projector U are re-solved every
//! step and held fixed when differentiating.
//!
//! With `λ = 0` no transport problem is solved and training reduces to TARNet.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::CausalDataset;
use crate::error::{dim_mismatch, Error, Result};
use crate::isp::{fit_projector, Projector};
use crate::matstat::{pairwise_sq_dist, Matrix, SeededRng};
use crate::metrics::auuc;
use crate::neural::{adam_step, Activation, AdamState, EarlyStopper, Mlp};
use crate::ot_entropic::{sinkhorn, SinkhornConfig};
use crate::ot_exact::MassVector;
use crate::ot_fgw::{cost_sensitivity, fgw_objective, fgw_solve, FgwProblem};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiscrepancySolver {
    #[default]
    FrankWolfe,
    /// Entropic plan; only valid when the effective κ is 1.
    Sinkhorn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcrConfig {
    /// Discrepancy weight λ ≥ 0.
    pub lambda: f64,
    /// Wasserstein share κ of the fused discrepancy.
    pub kappa: f64,
    /// Kept fraction P of representation dimensions.
    pub proportion: f64,
    /// When false, κ is forced to 1.
    pub use_lpr: bool,
    /// When false, P is forced to 1 and no projection is fitted.
    pub use_isp: bool,
    pub isp_centered: bool,
    pub batch_size: usize,
    pub seed: u64,
    pub max_epochs: usize,
    pub patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub repr_hidden: Vec<usize>,
    pub head_hidden: Vec<usize>,
    pub activation: Activation,
    pub fgw_max_iters: usize,
    pub fgw_tol: f64,
    pub solver: DiscrepancySolver,
    pub sinkhorn_epsilon_ratio: f64,
    pub sinkhorn_max_iters: usize,
}

impl Default for PcrConfig {
    fn default() -> Self {
        Self {
            lambda: 1.0,
            kappa: 0.5,
            proportion: 0.5,
            use_lpr: true,
            use_isp: true,
            isp_centered: false,
            batch_size: 128,
            seed: 0,
            max_epochs: 400,
            patience: 30,
            lr: 1e-3,
            weight_decay: 1e-4,
            repr_hidden: vec![16, 16],
            head_hidden: vec![32, 32],
            activation: Activation::Elu,
            fgw_max_iters: 100,
            fgw_tol: 1e-7,
            solver: DiscrepancySolver::FrankWolfe,
            sinkhorn_epsilon_ratio: 0.1,
            sinkhorn_max_iters: 1000,
        }
    }
}

fn invalid(field: &str, reason: impl Into<String>) -> Error {
    Error::InvalidConfig {
        field: field.into(),
        reason: reason.into(),
    }
}

impl PcrConfig {
    /// λ = 0: shared trunk, two heads, no discrepancy.
    pub fn tarnet() -> Self {
        Self {
            lambda: 0.0,
            ..Self::default()
        }
    }

    pub fn effective_kappa(&self) -> f64 {
        if self.use_lpr {
            self.kappa
        } else {
            1.0
        }
    }

    pub fn effective_proportion(&self) -> f64 {
        if self.use_isp {
            self.proportion
        } else {
            1.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(invalid("lambda", format!("{} must be finite and non-negative", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.kappa) {
            return Err(invalid("kappa", format!("{} is outside [0, 1]", self.kappa)));
        }
        if !(self.proportion > 0.0 && self.proportion <= 1.0) {
            return Err(invalid("proportion", format!("{} is outside (0, 1]", self.proportion)));
        }
        if self.batch_size == 0 {
            return Err(invalid("batch_size", "must be positive"));
        }
        if self.max_epochs == 0 {
            return Err(invalid("max_epochs", "must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(invalid("lr", "must be positive"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(invalid("weight_decay", "must be non-negative"));
        }
        if self.repr_hidden.is_empty() || self.repr_hidden.contains(&0) {
            return Err(invalid("repr_hidden", "needs at least one positive width"));
        }
        if self.head_hidden.contains(&0) {
            return Err(invalid("head_hidden", "widths must be positive"));
        }
        if self.fgw_max_iters == 0 {
            return Err(invalid("fgw_max_iters", "must be positive"));
        }
        if !(self.fgw_tol > 0.0) {
            return Err(invalid("fgw_tol", "must be positive"));
        }
        if self.solver == DiscrepancySolver::Sinkhorn {
            if self.effective_kappa() != 1.0 {
                return Err(invalid("solver", "sinkhorn requires kappa = 1 or use_lpr = false"));
            }
            if !(self.sinkhorn_epsilon_ratio > 0.0) {
                return Err(invalid("sinkhorn_epsilon_ratio", "must be positive"));
            }
            if self.sinkhorn_max_iters == 0 {
                return Err(invalid("sinkhorn_max_iters", "must be positive"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding, hex.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(&json))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// One minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalBatch {
    pub x: Matrix,
    pub t: Vec<u8>,
    pub y: Vec<f64>,
}

impl EmpiricalBatch {
    pub fn new(x: Matrix, t: Vec<u8>, y: Vec<f64>) -> Result<Self> {
        if t.len() != x.rows() || y.len() != x.rows() {
            return Err(dim_mismatch("EmpiricalBatch", x.rows(), format!("t {}, y {}", t.len(), y.len())));
        }
        Ok(Self { x, t, y })
    }

    pub fn from_dataset(ds: &CausalDataset, idx: &[usize]) -> Self {
        Self {
            x: ds.x.select_rows(idx),
            t: idx.iter().map(|&i| ds.t[i]).collect(),
            y: idx.iter().map(|&i| ds.yf[i]).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    /// Row indices of `(control, treated)` units.
    pub fn groups(&self) -> (Vec<usize>, Vec<usize>) {
        let c = (0..self.len()).filter(|&i| self.t[i] == 0).collect();
        let t = (0..self.len()).filter(|&i| self.t[i] == 1).collect();
        (c, t)
    }
}

/// Transport state of one step: the plan and projector that are treated as
/// constants when differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenTransport {
    /// n₀×n₁, control rows and treated columns.
    pub plan: Matrix,
    pub projector: Option<Projector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub factual: f64,
    pub discrepancy: f64,
    pub lambda: f64,
    /// Set when a group has fewer than two units or λ = 0.
    pub discrepancy_skipped: bool,
    /// A group with no units in the batch.
    pub missing_group: Option<u8>,
    pub solver_iterations: usize,
    pub solver_converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub psi: Vec<f64>,
    pub phi0: Vec<f64>,
    pub phi1: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub loss: LossBreakdown,
    pub grads: Gradients,
    pub transport: Option<FrozenTransport>,
}

/// Discrepancy between two representation clouds, with its gradient.
#[derive(Debug, Clone)]
pub struct DiscrepancyOutcome {
    pub value: f64,
    pub plan: Matrix,
    pub projector: Option<Projector>,
    pub problem: FgwProblem,
    /// ∂value/∂R₀ and ∂value/∂R₁ at fixed plan and projector.
    pub grad_r0: Matrix,
    pub grad_r1: Matrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Fused discrepancy between control `r0` and treated `r1` representations.
/// With `frozen`, its plan and projector are reused instead of re-solved.
pub fn pcr_discrepancy(r0: &Matrix, r1: &Matrix, cfg: &PcrConfig, frozen: Option<&FrozenTransport>) -> Result<DiscrepancyOutcome> {
    let (n0, n1) = (r0.rows(), r1.rows());
    if n0 < 2 || n1 < 2 {
        return Err(Error::EmptyGroup {
            group: if n0 < 2 { 0 } else { 1 },
        });
    }
    let kappa = cfg.effective_kappa();
    let p = cfg.effective_proportion();
    let projector = match frozen {
        Some(f) => f.projector.clone(),
        None if p < 1.0 => Some(fit_projector(&r0.vstack(r1)?, p, cfg.isp_centered)?),
        None => None,
    };
    let (z0, z1) = match &projector {
        Some(u) => (u.project(r0)?, u.project(r1)?),
        None => (r0.clone(), r1.clone()),
    };
    let problem = FgwProblem::new(
        pairwise_sq_dist(&z0, &z1)?,
        pairwise_sq_dist(&z0, &z0)?,
        pairwise_sq_dist(&z1, &z1)?,
        MassVector::uniform(n0),
        MassVector::uniform(n1),
        kappa,
    )?;
    let (plan, iterations, converged) = match frozen {
        Some(f) => {
            if f.plan.shape() != (n0, n1) {
                return Err(dim_mismatch("frozen plan", format!("{n0}x{n1}"), format!("{:?}", f.plan.shape())));
            }
            (f.plan.clone(), 0, true)
        }
        None => match cfg.solver {
            DiscrepancySolver::FrankWolfe => {
                let r = fgw_solve(&problem, cfg.fgw_max_iters, cfg.fgw_tol)?;
                (r.plan.plan, r.plan.iterations, r.plan.converged)
            }
            DiscrepancySolver::Sinkhorn => {
                let mut sc = SinkhornConfig::relative(&problem.cross, cfg.sinkhorn_epsilon_ratio);
                sc.max_iters = cfg.sinkhorn_max_iters;
                let r = sinkhorn(&problem.cross, &problem.a, &problem.b, &sc)?;
                (r.plan, r.iterations, r.converged)
            }
        },
    };
    let value = fgw_objective(&problem, &plan);
    if !value.is_finite() {
        return Err(Error::NonFiniteLoss {
            component: "discrepancy",
        });
    }

    let sens = cost_sensitivity(&problem, &plan);
    let mut gz0 = Matrix::zeros(n0, z0.cols());
    let mut gz1 = Matrix::zeros(n1, z1.cols());
    // D[i][j] = ‖z0_i − z1_j‖²
    accumulate_cross(&sens.d_cross, &z0, &z1, &mut gz0, &mut gz1);
    // C[i][k] = ‖z_i − z_k‖², both (i,k) and (k,i) entries depend on z_i.
    accumulate_within(&sens.d_source, &z0, &mut gz0);
    accumulate_within(&sens.d_target, &z1, &mut gz1);
    let (grad_r0, grad_r1) = match &projector {
        Some(u) => (u.backproject(&gz0)?, u.backproject(&gz1)?),
        None => (gz0, gz1),
    };
    Ok(DiscrepancyOutcome {
        value,
        plan,
        projector,
        problem,
        grad_r0,
        grad_r1,
        iterations,
        converged,
    })
}

fn accumulate_cross(g: &Matrix, z0: &Matrix, z1: &Matrix, gz0: &mut Matrix, gz1: &mut Matrix) {
    let (n0, n1) = g.shape();
    let k = z0.cols();
    for i in 0..n0 {
        for j in 0..n1 {
            let w = 2.0 * g[(i, j)];
            if w == 0.0 {
                continue;
            }
            for c in 0..k {
                let diff = w * (z0[(i, c)] - z1[(j, c)]);
                gz0[(i, c)] += diff;
                gz1[(j, c)] -= diff;
            }
        }
    }
}

fn accumulate_within(s: &Matrix, z: &Matrix, gz: &mut Matrix) {
    let n = s.rows();
    let k = z.cols();
    for i in 0..n {
        for l in 0..n {
            let w = 2.0 * (s[(i, l)] + s[(l, i)]);
            if w == 0.0 || i == l {
                continue;
            }
            for c in 0..k {
                gz[(i, c)] += w * (z[(i, c)] - z[(l, c)]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub factual: f64,
    pub discrepancy: f64,
    pub val_auuc: Option<f64>,
    pub skipped_discrepancy_batches: usize,
    pub unconverged_solves: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcrModel {
    pub config: PcrConfig,
    pub psi: Mlp,
    pub phi0: Mlp,
    pub phi1: Mlp,
    pub opt_psi: AdamState,
    pub opt_phi0: AdamState,
    pub opt_phi1: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl PcrModel {
    /// Fresh model for `input_dim` covariates, initialised from the config seed.
    pub fn new(cfg: &PcrConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        if input_dim == 0 {
            return Err(invalid("input_dim", "must be positive"));
        }
        let mut rng = SeededRng::derive(cfg.seed, 100);
        let mut trunk = vec![input_dim];
        trunk.extend(&cfg.repr_hidden);
        let rdim = *trunk.last().unwrap();
        let mut head = vec![rdim];
        head.extend(&cfg.head_hidden);
        head.push(1);
        let psi = Mlp::new(&trunk, cfg.activation, true, &mut rng)?;
        let phi0 = Mlp::new(&head, cfg.activation, false, &mut rng)?;
        let phi1 = Mlp::new(&head, cfg.activation, false, &mut rng)?;
        Ok(Self::from_nets(cfg.clone(), psi, phi0, phi1))
    }

    fn from_nets(config: PcrConfig, psi: Mlp, phi0: Mlp, phi1: Mlp) -> Self {
        let opt = |n: &Mlp| AdamState::new(n.params().len(), config.lr, config.weight_decay);
        Self {
            opt_psi: opt(&psi),
            opt_phi0: opt(&phi0),
            opt_phi1: opt(&phi1),
            config,
            psi,
            phi0,
            phi1,
            history: Vec::new(),
            best_epoch: None,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.psi.input_dim()
    }

    /// Representations ψ(X).
    pub fn represent(&self, x: &Matrix) -> Result<Matrix> {
        self.psi.predict(x)
    }

    /// Predicted potential outcomes `(ŷ₀, ŷ₁)` per row.
    pub fn predict_outcomes(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let r = self.psi.predict(x)?;
        Ok((self.phi0.predict(&r)?.into_vec(), self.phi1.predict(&r)?.into_vec()))
    }

    /// τ̂(x) = φ₁(ψ(x)) − φ₀(ψ(x)).
    pub fn predict_cate(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (y0, y1) = self.predict_outcomes(x)?;
        Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
    }

    /// Factual sum of squared errors and its gradients; discrepancy omitted.
    pub fn factual_loss(&self, batch: &EmpiricalBatch) -> Result<(f64, Gradients, Option<u8>)> {
        let e = self.evaluate_inner(batch, None, false)?;
        Ok((e.loss.factual, e.grads, e.loss.missing_group))
    }

    /// Loss and gradients for `batch`. With `frozen`, its plan and projector
    /// replace the per-step solve.
    pub fn evaluate_batch(&self, batch: &EmpiricalBatch, frozen: Option<&FrozenTransport>) -> Result<BatchEvaluation> {
        self.evaluate_inner(batch, frozen, true)
    }

    fn evaluate_inner(&self, batch: &EmpiricalBatch, frozen: Option<&FrozenTransport>, with_disc: bool) -> Result<BatchEvaluation> {
        if batch.x.cols() != self.input_dim() {
            return Err(dim_mismatch("evaluate_batch", self.input_dim(), batch.x.cols()));
        }
        let (r, tape) = self.psi.forward(&batch.x)?;
        let (idx0, idx1) = batch.groups();
        let mut d_r = Matrix::zeros(r.rows(), r.cols());
        let mut factual = 0.0;
        let mut missing_group = None;
        let mut head_grads = [vec![0.0; self.phi0.params().len()], vec![0.0; self.phi1.params().len()]];
        let mut group_reps = [Matrix::zeros(0, r.cols()), Matrix::zeros(0, r.cols())];
        for (g, idx) in [(0u8, &idx0), (1u8, &idx1)] {
            if idx.is_empty() {
                missing_group = Some(g);
                continue;
            }
            let head = if g == 0 { &self.phi0 } else { &self.phi1 };
            let rg = r.select_rows(idx);
            let (yh, htape) = head.forward(&rg)?;
            let mut dy = Matrix::zeros(idx.len(), 1);
            for (k, &i) in idx.iter().enumerate() {
                let e = yh[(k, 0)] - batch.y[i];
                factual += e * e;
                dy[(k, 0)] = 2.0 * e;
            }
            let (gh, drg) = head.backward(&htape, &dy)?;
            head_grads[g as usize] = gh;
            for (k, &i) in idx.iter().enumerate() {
                for (dst, src) in d_r.row_mut(i).iter_mut().zip(drg.row(k)) {
                    *dst += src;
                }
            }
            group_reps[g as usize] = rg;
        }
        if !factual.is_finite() {
            return Err(Error::NonFiniteLoss { component: "factual" });
        }

        let lambda = self.config.lambda;
        let mut loss = LossBreakdown {
            total: factual,
            factual,
            discrepancy: 0.0,
            lambda,
            discrepancy_skipped: true,
            missing_group,
            solver_iterations: 0,
            solver_converged: true,
        };
        let mut transport = None;
        if with_disc && lambda > 0.0 && idx0.len() >= 2 && idx1.len() >= 2 {
            let out = pcr_discrepancy(&group_reps[0], &group_reps[1], &self.config, frozen)?;
            for (idx, g) in [(&idx0, &out.grad_r0), (&idx1, &out.grad_r1)] {
                for (k, &i) in idx.iter().enumerate() {
                    for (dst, src) in d_r.row_mut(i).iter_mut().zip(g.row(k)) {
                        *dst += lambda * src;
                    }
                }
            }
            loss.discrepancy = out.value;
            loss.total = factual + lambda * out.value;
            loss.discrepancy_skipped = false;
            loss.solver_iterations = out.iterations;
            loss.solver_converged = out.converged;
            transport = Some(FrozenTransport {
                plan: out.plan,
                projector: out.projector,
            });
        }
        let (gpsi, _) = self.psi.backward(&tape, &d_r)?;
        let [phi0, phi1] = head_grads;
        Ok(BatchEvaluation {
            loss,
            grads: Gradients { psi: gpsi, phi0, phi1 },
            transport,
        })
    }

    /// One optimisation step on `batch`.
    pub fn pcr_step(&mut self, batch: &EmpiricalBatch) -> Result<LossBreakdown> {
        let e = self.evaluate_batch(batch, None)?;
        adam_step(&mut self.psi, &e.grads.psi, &mut self.opt_psi).map_err(|err| prefix_block(err, "psi"))?;
        adam_step(&mut self.phi0, &e.grads.phi0, &mut self.opt_phi0).map_err(|err| prefix_block(err, "phi0"))?;
        adam_step(&mut self.phi1, &e.grads.phi1, &mut self.opt_phi1).map_err(|err| prefix_block(err, "phi1"))?;
        Ok(e.loss)
    }

    /// Discrepancy between the groups of a whole dataset under this model.
    pub fn dataset_discrepancy(&self, x: &Matrix, t: &[u8]) -> Result<f64> {
        let r = self.represent(x)?;
        let idx0: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 0).collect();
        let idx1: Vec<usize> = (0..t.len()).filter(|&i| t[i] == 1).collect();
        Ok(pcr_discrepancy(&r.select_rows(&idx0), &r.select_rows(&idx1), &self.config, None)?.value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            best_epoch: self.best_epoch,
            psi: self.psi.clone(),
            phi0: self.phi0.clone(),
            phi1: self.phi1.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_string(&self.checkpoint())?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_checkpoint_json(&text)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(text).map_err(|e| Error::Checkpoint(format!("unreadable: {e}")))?;
        ck.into_model()
    }
}

fn prefix_block(err: Error, net: &str) -> Error {
    match err {
        Error::NonFiniteGradient { block } => Error::NonFiniteGradient {
            block: format!("{net}.{block}"),
        },
        e => e,
    }
}

pub const CHECKPOINT_FORMAT: &str = "otcr-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: format tag, version, config with its hash, and the three
/// networks.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: PcrConfig,
    pub best_epoch: Option<usize>,
    pub psi: Mlp,
    pub phi0: Mlp,
    pub phi1: Mlp,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<PcrModel> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format `{}`", self.format)));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", self.version)));
        }
        if self.config.hash() != self.config_hash {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        self.config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
        let rebuild = |m: &Mlp| {
            Mlp::from_params(m.layer_dims(), m.activation(), m.activates_output(), m.params().to_vec())
                .map_err(|e| Error::Checkpoint(e.to_string()))
        };
        let (psi, phi0, phi1) = (rebuild(&self.psi)?, rebuild(&self.phi0)?, rebuild(&self.phi1)?);
        if phi0.input_dim() != psi.output_dim() || phi1.input_dim() != psi.output_dim() || phi0.output_dim() != 1 || phi1.output_dim() != 1 {
            return Err(Error::Checkpoint("network shapes are inconsistent".into()));
        }
        let mut model = PcrModel::from_nets(self.config, psi, phi0, phi1);
        model.best_epoch = self.best_epoch;
        Ok(model)
    }
}

/// Validation AUUC of a CATE predictor; NaN when unavailable.
fn validation_auuc(tau_hat: &[f64], val: &CausalDataset) -> Result<Option<f64>> {
    auuc(tau_hat, &val.t, &val.yf)
}

/// Shared epoch loop: shuffled minibatches, per-epoch validation AUUC, early
/// stopping, best-epoch snapshot.
fn run_epochs<M: Clone>(
    model: &mut M,
    cfg: &PcrConfig,
    train: &CausalDataset,
    val: &CausalDataset,
    mut step: impl FnMut(&mut M, &EmpiricalBatch) -> Result<LossBreakdown>,
    cate: impl Fn(&M, &Matrix) -> Result<Vec<f64>>,
) -> Result<(Vec<EpochRecord>, Option<usize>)> {
    if train.n() == 0 {
        return Err(Error::EmptySplit { split: "train" });
    }
    if val.n() == 0 {
        return Err(Error::EmptySplit { split: "val" });
    }
    let mut rng = SeededRng::derive(cfg.seed, 101);
    let mut stopper = EarlyStopper::new("val_auuc", cfg.patience, true);
    let mut best = model.clone();
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.n()).collect();
    for epoch in 0..cfg.max_epochs {
        rng.shuffle(&mut order);
        let mut rec = EpochRecord {
            epoch,
            loss: 0.0,
            factual: 0.0,
            discrepancy: 0.0,
            val_auuc: None,
            skipped_discrepancy_batches: 0,
            unconverged_solves: 0,
        };
        let mut batches = 0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = EmpiricalBatch::from_dataset(train, chunk);
            let l = step(model, &batch)?;
            rec.loss += l.total;
            rec.factual += l.factual;
            rec.discrepancy += l.discrepancy;
            rec.skipped_discrepancy_batches += l.discrepancy_skipped as usize;
            rec.unconverged_solves += (!l.solver_converged) as usize;
            batches += 1;
        }
        let b = batches as f64;
        rec.loss /= b;
        rec.factual /= b;
        rec.discrepancy /= b;
        rec.val_auuc = validation_auuc(&cate(model, &val.x)?, val)?;
        let decision = stopper.observe(epoch, rec.val_auuc.unwrap_or(f64::NAN));
        history.push(rec);
        if decision.improved {
            best = model.clone();
        }
        if decision.stop {
            break;
        }
    }
    let best_epoch = stopper.best_metric.map(|_| stopper.best_epoch);
    if best_epoch.is_some() {
        *model = best;
    }
    Ok((history, best_epoch))
}

/// Train on `train`, select the epoch by validation AUUC on `val`.
pub fn train(cfg: &PcrConfig, train: &CausalDataset, val: &CausalDataset) -> Result<PcrModel> {
    let mut model = PcrModel::new(cfg, train.d())?;
    if val.d() != train.d() {
        return Err(dim_mismatch("train/val covariates", train.d(), val.d()));
    }
    let (history, best_epoch) = run_epochs(&mut model, cfg, train, val, |m, b| m.pcr_step(b), |m, x| m.predict_cate(x))?;
    model.history = history;
    model.best_epoch = best_epoch;
    Ok(model)
}

/// Result of a validation-driven λ search.
#[derive(Debug, Clone)]
pub struct LambdaSelection {
    pub lambda: f64,
    pub model: PcrModel,
    /// `(λ, best validation AUUC)` per grid point.
    pub scores: Vec<(f64, Option<f64>)>,
}

/// Train once per λ in `grid` and keep the model with the highest best-epoch
/// validation AUUC (first wins ties).
pub fn select_lambda(cfg: &PcrConfig, grid: &[f64], train_ds: &CausalDataset, val: &CausalDataset) -> Result<LambdaSelection> {
    if grid.is_empty() {
        return Err(invalid("lambda_grid", "must not be empty"));
    }
    let mut best: Option<(f64, f64, PcrModel)> = None;
    let mut scores = Vec::with_capacity(grid.len());
    for &lambda in grid {
        let c = PcrConfig { lambda, ..cfg.clone() };
        let m = train(&c, train_ds, val)?;
        let score = m.best_epoch.and_then(|e| m.history[e].val_auuc);
        scores.push((lambda, score));
        let s = score.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, bs, _)| s > *bs) {
            best = Some((lambda, s, m));
        }
    }
    let (lambda, _, model) = best.expect("grid is non-empty");
    Ok(LambdaSelection { lambda, model, scores })
}

/// One network on `[x, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SLearner {
    pub net: Mlp,
    opt: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

fn with_treatment(x: &Matrix, t: impl Fn(usize) -> f64) -> Matrix {
    let (n, d) = x.shape();
    Matrix::from_fn(n, d + 1, |i, j| if j < d { x[(i, j)] } else { t(i) })
}

fn regression_step(net: &mut Mlp, opt: &mut AdamState, x: &Matrix, y: &[f64]) -> Result<f64> {
    let (yh, tape) = net.forward(x)?;
    let mut dy = Matrix::zeros(y.len(), 1);
    let mut sse = 0.0;
    for (i, &yi) in y.iter().enumerate() {
        let e = yh[(i, 0)] - yi;
        sse += e * e;
        dy[(i, 0)] = 2.0 * e;
    }
    if !sse.is_finite() {
        return Err(Error::NonFiniteLoss { component: "factual" });
    }
    let (g, _) = net.backward(&tape, &dy)?;
    adam_step(net, &g, opt)?;
    Ok(sse)
}

fn baseline_dims(cfg: &PcrConfig, input: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(&cfg.repr_hidden);
    dims.extend(&cfg.head_hidden);
    dims.push(1);
    dims
}

fn factual_only(sse: f64) -> LossBreakdown {
    LossBreakdown {
        total: sse,
        factual: sse,
        discrepancy: 0.0,
        lambda: 0.0,
        discrepancy_skipped: true,
        missing_group: None,
        solver_iterations: 0,
        solver_converged: true,
    }
}

impl SLearner {
    pub fn new(cfg: &PcrConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::derive(cfg.seed, 100);
        let net = Mlp::new(&baseline_dims(cfg, input_dim + 1), cfg.activation, false, &mut rng)?;
        let opt = AdamState::new(net.params().len(), cfg.lr, cfg.weight_decay);
        Ok(Self {
            net,
            opt,
            history: Vec::new(),
            best_epoch: None,
        })
    }

    pub fn predict_cate(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (y0, y1) = self.predict_outcomes(x)?;
        Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
    }

    pub fn predict_outcomes(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        let y1 = self.net.predict(&with_treatment(x, |_| 1.0))?.into_vec();
        let y0 = self.net.predict(&with_treatment(x, |_| 0.0))?.into_vec();
        Ok((y0, y1))
    }
}

pub fn s_learner(cfg: &PcrConfig, train: &CausalDataset, val: &CausalDataset) -> Result<SLearner> {
    let mut model = SLearner::new(cfg, train.d())?;
    let (history, best) = run_epochs(
        &mut model,
        cfg,
        train,
        val,
        |m, b| {
            let xt = with_treatment(&b.x, |i| b.t[i] as f64);
            regression_step(&mut m.net, &mut m.opt, &xt, &b.y).map(factual_only)
        },
        |m, x| m.predict_cate(x),
    )?;
    model.history = history;
    model.best_epoch = best;
    Ok(model)
}

/// Independent regressors per treatment group.
#[derive(Debug, Clone, PartialEq)]
pub struct TLearner {
    pub net0: Mlp,
    pub net1: Mlp,
    opt0: AdamState,
    opt1: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
}

impl TLearner {
    pub fn new(cfg: &PcrConfig, input_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let mut rng = SeededRng::derive(cfg.seed, 100);
        let dims = baseline_dims(cfg, input_dim);
        let net0 = Mlp::new(&dims, cfg.activation, false, &mut rng)?;
        let net1 = Mlp::new(&dims, cfg.activation, false, &mut rng)?;
        let opt = |n: &Mlp| AdamState::new(n.params().len(), cfg.lr, cfg.weight_decay);
        Ok(Self {
            opt0: opt(&net0),
            opt1: opt(&net1),
            net0,
            net1,
            history: Vec::new(),
            best_epoch: None,
        })
    }

    pub fn predict_outcomes(&self, x: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((self.net0.predict(x)?.into_vec(), self.net1.predict(x)?.into_vec()))
    }

    pub fn predict_cate(&self, x: &Matrix) -> Result<Vec<f64>> {
        let (y0, y1) = self.predict_outcomes(x)?;
        Ok(y1.iter().zip(&y0).map(|(a, b)| a - b).collect())
    }
}

pub fn t_learner(cfg: &PcrConfig, train: &CausalDataset, val: &CausalDataset) -> Result<TLearner> {
    for g in [0u8, 1] {
        if !train.t.contains(&g) {
            return Err(Error::UntrainedHead { group: g });
        }
    }
    let mut model = TLearner::new(cfg, train.d())?;
    let (history, best) = run_epochs(
        &mut model,
        cfg,
        train,
        val,
        |m, b| {
            let (i0, i1) = b.groups();
            let mut sse = 0.0;
            if !i0.is_empty() {
                let y: Vec<f64> = i0.iter().map(|&i| b.y[i]).collect();
                sse += regression_step(&mut m.net0, &mut m.opt0, &b.x.select_rows(&i0), &y)?;
            }
            if !i1.is_empty() {
                let y: Vec<f64> = i1.iter().map(|&i| b.y[i]).collect();
                sse += regression_step(&mut m.net1, &mut m.opt1, &b.x.select_rows(&i1), &y)?;
            }
            Ok(factual_only(sse))
        },
        |m, x| m.predict_cate(x),
    )?;
    model.history = history;
    model.best_epoch = best;
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnnEstimate {
    pub tau_hat: Vec<f64>,
    /// Imputed counterfactual outcome per unit.
    pub imputed: Vec<f64>,
    /// k actually used per group `(for control units, for treated units)`.
    pub k_used: (usize, usize),
    /// Set when k exceeded an opposite group's size.
    pub clamped: bool,
}

/// Impute each unit's counterfactual as the mean outcome of its k nearest
/// opposite-group units (squared Euclidean, ties by index).
pub fn knn_cate(k: usize, ds: &CausalDataset) -> Result<KnnEstimate> {
    if k == 0 {
        return Err(invalid("k", "must be positive"));
    }
    let idx0: Vec<usize> = (0..ds.n()).filter(|&i| ds.t[i] == 0).collect();
    let idx1: Vec<usize> = (0..ds.n()).filter(|&i| ds.t[i] == 1).collect();
    if idx0.is_empty() {
        return Err(Error::EmptyGroup { group: 0 });
    }
    if idx1.is_empty() {
        return Err(Error::EmptyGroup { group: 1 });
    }
    let k_for_control = k.min(idx1.len());
    let k_for_treated = k.min(idx0.len());
    let d = pairwise_sq_dist(&ds.x, &ds.x)?;
    let mut tau_hat = vec![0.0; ds.n()];
    let mut imputed = vec![0.0; ds.n()];
    let mut cand = Vec::new();
    for i in 0..ds.n() {
        let (pool, kk) = if ds.t[i] == 1 { (&idx0, k_for_treated) } else { (&idx1, k_for_control) };
        cand.clear();
        cand.extend(pool.iter().copied());
        cand.sort_by(|&a, &b| d[(i, a)].total_cmp(&d[(i, b)]).then(a.cmp(&b)));
        let m = cand[..kk].iter().map(|&j| ds.yf[j]).sum::<f64>() / kk as f64;
        imputed[i] = m;
        tau_hat[i] = if ds.t[i] == 1 { ds.yf[i] - m } else { m - ds.yf[i] };
    }
    Ok(KnnEstimate {
        tau_hat,
        imputed,
        k_used: (k_for_control, k_for_treated),
        clamped: k_for_control < k || k_for_treated < k,
    })
}
