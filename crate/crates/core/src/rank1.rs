//! Gated rank-1 edits of a projection matrix.
//!
//! An edit maps a target-input `i*` to a target-output `o*`. The closed-form
//! weight update `Ŵ = W + Λ (C⁻¹ i*)ᵀ` is equivalent, for every input `e`, to
//! the reformulated pass `h = W e⊥ + o*·sim(i*, e)/‖i*‖²`; the gated pass
//! replaces the linear ratio with a logistic gate so that only encodings
//! aligned with `i*` receive the edit.

use std::sync::Arc;

use crate::error::{ensure, Result};
#[cfg(test)]
use crate::error::Error;
use crate::metric::{ConceptBasis, MetricSpace};
use crate::{Matrix, Vector};

/// Decay of the online target-input estimate.
pub const EMA_DECAY: f64 = 0.99;

/// Logistic gate bias and temperature.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GateParams {
    pub beta: f64,
    pub tau: f64,
}

impl GateParams {
    /// Bias and temperature used while training.
    pub const TRAINING: GateParams = GateParams { beta: 0.75, tau: 0.1 };

    pub fn new(beta: f64, tau: f64) -> Result<Self> {
        ensure(tau > 0.0 && tau.is_finite(), || format!("gate temperature must be positive, got {tau}"))?;
        ensure(!beta.is_nan(), || "gate bias is NaN".into())?;
        Ok(Self { beta, tau })
    }
}

/// Numerically stable logistic function.
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let z = x.exp();
        z / (1.0 + z)
    }
}

/// `σ((ratio − β)/τ)`.
pub fn gate_value(ratio: f64, g: GateParams) -> f64 {
    logistic((ratio - g.beta) / g.tau)
}

/// Closed-form rank-1 update `Ŵ = W + Λ (C⁻¹ i*)ᵀ`, with
/// `Λ = (o* − W i*) / (i*ᵀ (C⁻¹)ᵀ i*)`.
pub fn rome_closed_form(w: &Matrix, i_star: &Vector, o_star: &Vector, m: &MetricSpace) -> Result<Matrix> {
    ensure(w.ncols() == m.dim(), || format!("weight has {} columns, metric dimension is {}", w.ncols(), m.dim()))?;
    ensure(o_star.len() == w.nrows(), || format!("target-output has length {}, weight has {} rows", o_star.len(), w.nrows()))?;
    let energy = m.energy(i_star)?;
    let lambda = (o_star - w * i_star) / energy;
    let covector = m.apply(i_star)?;
    let mut out = w.clone();
    out.ger(1.0, &lambda, &covector, 1.0);
    Ok(out)
}

/// One step of `i* := 0.99 i* + 0.01 e_concept`.
pub fn ema_update(i_star: &Vector, e_concept: &Vector) -> Vector {
    i_star * EMA_DECAY + e_concept * (1.0 - EMA_DECAY)
}

/// A single concept's edit of one projection.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptEdit {
    pub i_star: Vector,
    pub o_star: Vector,
    /// `false` for key-locked (frozen) target-outputs.
    pub trainable: bool,
    pub beta: f64,
}

impl ConceptEdit {
    pub fn new(i_star: Vector, o_star: Vector, trainable: bool, beta: f64) -> Self {
        Self {
            i_star,
            o_star,
            trainable,
            beta,
        }
    }
}

/// How attached edits enter the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Linear ratio: the exact equivalent of the closed-form update.
    Linear,
    /// Logistic gate on the ratio.
    Sigmoid,
}

/// A base projection `W` plus concept edits sharing one metric.
#[derive(Debug, Clone)]
pub struct EditedProjection {
    w: Matrix,
    edits: Vec<ConceptEdit>,
    metric: Arc<MetricSpace>,
    tau: f64,
}

impl EditedProjection {
    pub fn new(w: Matrix, metric: Arc<MetricSpace>) -> Result<Self> {
        ensure(w.ncols() == metric.dim(), || {
            format!("projection has {} columns, metric dimension is {}", w.ncols(), metric.dim())
        })?;
        Ok(Self {
            w,
            edits: Vec::new(),
            metric,
            tau: GateParams::TRAINING.tau,
        })
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn metric(&self) -> &Arc<MetricSpace> {
        &self.metric
    }

    pub fn edits(&self) -> &[ConceptEdit] {
        &self.edits
    }

    pub fn edits_mut(&mut self) -> &mut [ConceptEdit] {
        &mut self.edits
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    /// Shared gate temperature.
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn set_tau(&mut self, tau: f64) -> Result<()> {
        GateParams::new(0.0, tau)?;
        self.tau = tau;
        Ok(())
    }

    pub fn push_edit(&mut self, edit: ConceptEdit) -> Result<()> {
        ensure(edit.i_star.len() == self.in_dim(), || {
            format!("target-input has length {}, projection input is {}", edit.i_star.len(), self.in_dim())
        })?;
        ensure(edit.o_star.len() == self.out_dim(), || {
            format!("target-output has length {}, projection output is {}", edit.o_star.len(), self.out_dim())
        })?;
        self.edits.push(edit);
        Ok(())
    }

    pub fn clear_edits(&mut self) {
        self.edits.clear();
    }

    fn gate(&self, edit: &ConceptEdit) -> GateParams {
        GateParams {
            beta: edit.beta,
            tau: self.tau,
        }
    }

    fn single_edit(&self) -> Result<&ConceptEdit> {
        ensure(self.edits.len() == 1, || format!("expected exactly one edit, found {}", self.edits.len()))?;
        Ok(&self.edits[0])
    }

    fn check_input(&self, e: &Vector) -> Result<()> {
        ensure(e.len() == self.in_dim(), || format!("input has length {}, projection expects {}", e.len(), self.in_dim()))
    }

    /// `W e`, ignoring any edits.
    pub fn forward_base(&self, e: &Vector) -> Result<Vector> {
        self.check_input(e)?;
        Ok(&self.w * e)
    }

    /// `h = W e⊥ + o*·sim(i*, e)/‖i*‖²` for the single attached edit.
    pub fn forward_ungated(&self, e: &Vector) -> Result<Vector> {
        self.check_input(e)?;
        let edit = self.single_edit()?;
        let ratio = self.metric.sim(&edit.i_star, e)? / self.metric.energy(&edit.i_star)?;
        let e_perp = self.metric.project_orthogonal_single(e, &edit.i_star)?;
        Ok(&self.w * e_perp + &edit.o_star * ratio)
    }

    /// `h = W e⊥ + o*·σ((sim(i*, e)/‖i*‖² − β)/τ)` for the single attached edit.
    pub fn forward_gated_single(&self, e: &Vector) -> Result<Vector> {
        self.check_input(e)?;
        let edit = self.single_edit()?;
        let ratio = self.metric.sim(&edit.i_star, e)? / self.metric.energy(&edit.i_star)?;
        let e_perp = self.metric.project_orthogonal_single(e, &edit.i_star)?;
        Ok(&self.w * e_perp + &edit.o_star * gate_value(ratio, self.gate(edit)))
    }

    /// `h = W e⊥J + Σ_j o*_j·σ((sim(i*_j, e)/‖i*_j‖² − β_j)/τ)`.
    pub fn forward_gated_multi(&self, basis: &ConceptBasis, e: &Vector) -> Result<Vector> {
        self.check_input(e)?;
        self.check_basis(basis)?;
        let e_perp = self.metric.project_orthogonal_multi(e, basis)?;
        let mut h = &self.w * e_perp;
        for edit in &self.edits {
            let ratio = self.metric.sim(&edit.i_star, e)? / self.metric.energy(&edit.i_star)?;
            h.axpy(gate_value(ratio, self.gate(edit)), &edit.o_star, 1.0);
        }
        Ok(h)
    }

    /// Per-edit similarity ratios `sim(i*_j, e)/‖i*_j‖²`.
    pub fn ratios(&self, e: &Vector) -> Result<Vec<f64>> {
        self.check_input(e)?;
        self.edits
            .iter()
            .map(|edit| Ok(self.metric.sim(&edit.i_star, e)? / self.metric.energy(&edit.i_star)?))
            .collect()
    }

    fn check_basis(&self, basis: &ConceptBasis) -> Result<()> {
        basis.check_metric(&self.metric)?;
        let targets: Vec<Vector> = self.edits.iter().map(|e| e.i_star.clone()).collect();
        ensure(!targets.is_empty(), || "multi-concept pass needs at least one edit".into())?;
        ensure(basis.kept().len() + basis.dropped().len() == targets.len(), || {
            format!(
                "basis was built from {} target-inputs, projection has {} edits",
                basis.kept().len() + basis.dropped().len(),
                targets.len()
            )
        })?;
        // Each retained direction must reproduce its target's metric coordinates.
        for (slot, &j) in basis.kept().iter().enumerate() {
            let t = self.metric.to_metric_coords(&targets[j])?;
            let coef = basis.u_tilde()[slot].dot(&t);
            let residual = basis.u_tilde()[..=slot]
                .iter()
                .fold(t.clone(), |acc, u| acc - u * u.dot(&t));
            ensure(coef > 0.0 && residual.norm() <= 1e-6 * t.norm(), || {
                format!("basis direction {slot} does not match edit {j}")
            })?;
        }
        Ok(())
    }

    /// Precomputes the covectors for repeated row-wise evaluation.
    pub fn prepare(&self, mode: PassMode<'_>) -> Result<PreparedProjection> {
        let mut null_dirs = Vec::new();
        let mut gates = Vec::new();
        let gate_mode = match mode {
            PassMode::Base => GateMode::Linear,
            PassMode::Ungated => GateMode::Linear,
            PassMode::Gated(_) => GateMode::Sigmoid,
        };
        match mode {
            PassMode::Base => {}
            PassMode::Ungated | PassMode::Gated(None) => {
                let edit = self.single_edit()?;
                let energy = self.metric.energy(&edit.i_star)?;
                let covector = self.metric.apply(&edit.i_star)? / energy;
                null_dirs.push(NullDirection {
                    covector: covector.clone(),
                    image: &self.w * &edit.i_star,
                });
                gates.push(PreparedGate {
                    covector,
                    o_star: edit.o_star.clone(),
                    beta: edit.beta,
                });
            }
            PassMode::Gated(Some(basis)) => {
                self.check_basis(basis)?;
                for u in basis.u() {
                    null_dirs.push(NullDirection {
                        covector: self.metric.apply(u)?,
                        image: &self.w * u,
                    });
                }
                for edit in &self.edits {
                    let energy = self.metric.energy(&edit.i_star)?;
                    gates.push(PreparedGate {
                        covector: self.metric.apply(&edit.i_star)? / energy,
                        o_star: edit.o_star.clone(),
                        beta: edit.beta,
                    });
                }
            }
        }
        Ok(PreparedProjection {
            w: self.w.clone(),
            null_dirs,
            gates,
            tau: self.tau,
            mode: gate_mode,
        })
    }
}

/// Which forward pass an edited projection runs.
#[derive(Debug, Clone, Copy)]
pub enum PassMode<'a> {
    /// `W e`; edits ignored.
    Base,
    /// Linear-ratio pass for a single edit.
    Ungated,
    /// Logistic-gated pass: single edit when no basis is given, the
    /// multi-concept pass over the basis otherwise.
    Gated(Option<&'a ConceptBasis>),
}

#[derive(Debug, Clone)]
struct NullDirection {
    covector: Vector,
    image: Vector,
}

#[derive(Debug, Clone)]
struct PreparedGate {
    covector: Vector,
    o_star: Vector,
    beta: f64,
}

/// Row-wise evaluator in the form
/// `h = W e − Σ_k (W d_k)(c_kᵀ e) + Σ_j o*_j φ(r_j)`, with `r_j = g_jᵀ e`.
#[derive(Debug, Clone)]
pub struct PreparedProjection {
    w: Matrix,
    null_dirs: Vec<NullDirection>,
    gates: Vec<PreparedGate>,
    tau: f64,
    mode: GateMode,
}

/// Forward output of one row plus the values its backward pass needs.
#[derive(Debug, Clone)]
pub struct RowOutput {
    pub h: Vector,
    pub ratios: Vec<f64>,
    pub gates: Vec<f64>,
}

impl PreparedProjection {
    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn edit_count(&self) -> usize {
        self.gates.len()
    }

    fn phi(&self, ratio: f64, beta: f64) -> (f64, f64) {
        match self.mode {
            GateMode::Linear => (ratio, 1.0),
            GateMode::Sigmoid => {
                let s = logistic((ratio - beta) / self.tau);
                (s, s * (1.0 - s) / self.tau)
            }
        }
    }

    pub fn forward_row(&self, e: &Vector) -> RowOutput {
        let mut h = &self.w * e;
        for d in &self.null_dirs {
            h.axpy(-d.covector.dot(e), &d.image, 1.0);
        }
        let mut ratios = Vec::with_capacity(self.gates.len());
        let mut gates = Vec::with_capacity(self.gates.len());
        for g in &self.gates {
            let r = g.covector.dot(e);
            let (value, _) = self.phi(r, g.beta);
            h.axpy(value, &g.o_star, 1.0);
            ratios.push(r);
            gates.push(value);
        }
        RowOutput { h, ratios, gates }
    }

    /// Applies the pass to every row of `rows` (one encoding per row).
    pub fn forward_rows(&self, rows: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(rows.nrows(), self.out_dim());
        for m in 0..rows.nrows() {
            let e = rows.row(m).transpose();
            out.set_row(m, &self.forward_row(&e).h.transpose());
        }
        out
    }

    /// Gradients of a scalar loss given `dL/dh` for one row: returns
    /// `dL/de` and `dL/do*_j` for each edit.
    pub fn backward_row(&self, e: &Vector, dh: &Vector) -> (Vector, Vec<Vector>) {
        let mut de = self.w.tr_mul(dh);
        for d in &self.null_dirs {
            de.axpy(-d.image.dot(dh), &d.covector, 1.0);
        }
        let mut d_o = Vec::with_capacity(self.gates.len());
        for g in &self.gates {
            let r = g.covector.dot(e);
            let (value, slope) = self.phi(r, g.beta);
            de.axpy(slope * g.o_star.dot(dh), &g.covector, 1.0);
            d_o.push(dh * value);
        }
        (de, d_o)
    }
}

impl std::fmt::Display for GateMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            GateMode::Linear => "linear",
            GateMode::Sigmoid => "sigmoid",
        })
    }
}
