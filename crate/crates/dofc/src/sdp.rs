//! Solver-agnostic linear-matrix-inequality pencils and the conic backend.
//!
//! A problem is a set of scalar decision variables `x`, a linear objective,
//! and pencils `F(x) = F_0 + Σ_k x_k F_k` constrained to `F(x) ⪯ -ε I`.
//! The backend maps each pencil to a positive-semidefinite triangle cone of
//! the interior-point solver (a nonnegative-orthant row when the pencil is
//! 1×1) and adds box bounds on the variables for numerical safety.
//!
//! The solver works in `f64`; generic-scalar callers convert their data
//! before assembly.

use crate::matgraph::max_eig_sym;
use crate::{Error, Matrix, Result};
use clarabel::algebra::CscMatrix;
use clarabel::solver::{
    DefaultSettings, DefaultSolver, IPSolver, NonnegativeConeT, PSDTriangleConeT, SolverStatus,
    SupportedConeT, ZeroConeT,
};
use serde::{Deserialize, Serialize};
use std::ops::Range;

/// Hard box bound `|x_k| ≤ BOX_LIMIT` applied to every variable.
pub const BOX_LIMIT: f64 = 1e6;

/// Named, contiguous groups of scalar decision variables.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct VariableLayout {
    groups: Vec<(String, usize, usize)>, // name, offset, len
    total: usize,
}

impl VariableLayout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Append a group and return its index range.
    pub fn add(&mut self, name: &str, len: usize) -> Range<usize> {
        let offset = self.total;
        self.groups.push((name.to_string(), offset, len));
        self.total += len;
        offset..offset + len
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn range(&self, name: &str) -> Result<Range<usize>> {
        self.groups
            .iter()
            .find(|(n, _, _)| n == name)
            .map(|(_, o, l)| *o..*o + *l)
            .ok_or_else(|| Error::Invalid(format!("unknown variable group `{name}`")))
    }

    /// Slice the values of one group out of a full solution vector.
    pub fn slice<'a>(&self, name: &str, x: &'a [f64]) -> Result<&'a [f64]> {
        let r = self.range(name)?;
        Ok(&x[r])
    }

    pub fn group_names(&self) -> impl Iterator<Item = &str> {
        self.groups.iter().map(|(n, _, _)| n.as_str())
    }
}

/// Number of free scalars in a symmetric `m × m` matrix.
pub fn sym_count(m: usize) -> usize {
    m * (m + 1) / 2
}

/// `k`-th symmetric basis matrix, upper triangle enumerated column-major:
/// for off-diagonal index pairs the matrix has a one at both `(i, j)` and
/// `(j, i)`, so `Σ_k P[(i_k, j_k)] E_k` reconstructs any symmetric `P`.
pub fn sym_basis(m: usize, k: usize) -> Matrix {
    let (i, j) = sym_indices(m, k);
    let mut e = Matrix::zeros(m, m);
    e[(i, j)] = 1.0;
    e[(j, i)] = 1.0;
    e
}

/// Packed index of entry `(i, j)` with `i ≤ j` (inverse of [`sym_indices`]).
pub fn sym_index_of(m: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < m);
    let _ = m;
    j * (j + 1) / 2 + i
}

/// Index pair `(i, j)` with `i ≤ j` of the `k`-th packed symmetric entry.
pub fn sym_indices(m: usize, k: usize) -> (usize, usize) {
    let mut idx = 0;
    for j in 0..m {
        for i in 0..=j {
            if idx == k {
                return (i, j);
            }
            idx += 1;
        }
    }
    panic!("symmetric index {k} out of range for dimension {m}");
}

/// Pack the upper triangle of a symmetric matrix, column-major.
pub fn sym_pack(p: &Matrix) -> Vec<f64> {
    let m = p.nrows();
    let mut out = Vec::with_capacity(sym_count(m));
    for j in 0..m {
        for i in 0..=j {
            out.push(p[(i, j)]);
        }
    }
    out
}

/// Inverse of [`sym_pack`].
pub fn sym_unpack(vals: &[f64], m: usize) -> Result<Matrix> {
    if vals.len() != sym_count(m) {
        return Err(Error::Dimension(format!(
            "expected {} packed entries for a {m}×{m} symmetric matrix, got {}",
            sym_count(m),
            vals.len()
        )));
    }
    let mut p = Matrix::zeros(m, m);
    let mut k = 0;
    for j in 0..m {
        for i in 0..=j {
            p[(i, j)] = vals[k];
            p[(j, i)] = vals[k];
            k += 1;
        }
    }
    Ok(p)
}

/// One matrix inequality `F_0 + Σ_k x_k F_k ⪯ -eps·I`, coefficients stored
/// sparsely by variable index.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Pencil {
    pub name: String,
    pub dim: usize,
    pub f0: Matrix,
    pub coeffs: Vec<(usize, Matrix)>,
    pub eps: f64,
}

impl Pencil {
    /// Create a pencil, symmetrizing inputs and rejecting gross asymmetry.
    pub fn new(name: &str, f0: Matrix, coeffs: Vec<(usize, Matrix)>, eps: f64) -> Result<Self> {
        let dim = f0.nrows();
        let f0 = symmetrize(name, f0)?;
        let coeffs = coeffs
            .into_iter()
            .map(|(k, m)| {
                if m.nrows() != dim || m.ncols() != dim {
                    return Err(Error::Dimension(format!(
                        "pencil `{name}`: coefficient of x[{k}] is {}×{} but the pencil is {dim}×{dim}",
                        m.nrows(),
                        m.ncols()
                    )));
                }
                Ok((k, symmetrize(name, m)?))
            })
            .collect::<Result<Vec<_>>>()?;
        if !eps.is_finite() || eps < 0.0 {
            return Err(Error::Invalid(format!("pencil `{name}`: eps must be finite and ≥ 0")));
        }
        Ok(Self { name: name.to_string(), dim, f0, coeffs, eps })
    }

    /// Evaluate `F_0 + Σ_k x_k F_k` (without the `-eps·I` shift).
    pub fn evaluate(&self, x: &[f64]) -> Result<Matrix> {
        let mut out = self.f0.clone();
        for (k, f) in &self.coeffs {
            let xk = *x
                .get(*k)
                .ok_or_else(|| Error::Dimension(format!("pencil `{}` references x[{k}]", self.name)))?;
            out += f * xk;
        }
        Ok(out)
    }

    /// Largest eigenvalue of `F(x) + eps·I`; feasibility means this is ≤ 0.
    pub fn violation(&self, x: &[f64]) -> Result<f64> {
        let f = self.evaluate(x)?;
        Ok(max_eig_sym(&f)? + self.eps)
    }
}

fn symmetrize(name: &str, m: Matrix) -> Result<Matrix> {
    if m.nrows() != m.ncols() {
        return Err(Error::Dimension(format!("pencil `{name}`: matrix is not square")));
    }
    let asym = (&m - m.transpose()).norm();
    let tol = 1e-8 * m.norm().max(1.0);
    if asym > tol {
        return Err(Error::NotSymmetric { asym, tol });
    }
    Ok((&m + m.transpose()) * 0.5)
}

/// One scalar linear equality `Σ terms_k x_k = rhs`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EqualityRow {
    pub terms: Vec<(usize, f64)>,
    pub rhs: f64,
}

impl EqualityRow {
    pub fn residual(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|(k, c)| c * x[*k]).sum::<f64>() - self.rhs
    }
}

/// A complete LMI feasibility/optimization problem.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LmiProblem {
    pub layout: VariableLayout,
    /// Linear objective coefficients, one per scalar variable (all zero for a
    /// pure feasibility problem).
    pub objective: Vec<f64>,
    pub pencils: Vec<Pencil>,
    /// Linear equality constraints (zero-cone rows).
    #[serde(default)]
    pub equalities: Vec<EqualityRow>,
}

impl LmiProblem {
    pub fn new(layout: VariableLayout) -> Self {
        let n = layout.total();
        Self { layout, objective: vec![0.0; n], pencils: Vec::new(), equalities: Vec::new() }
    }

    pub fn n_vars(&self) -> usize {
        self.layout.total()
    }

    pub fn add_pencil(&mut self, p: Pencil) {
        self.pencils.push(p);
    }

    /// Largest constraint violation over all pencils (≤ 0 means feasible).
    pub fn worst_violation(&self, x: &[f64]) -> Result<f64> {
        let mut worst = f64::NEG_INFINITY;
        for p in &self.pencils {
            worst = worst.max(p.violation(x)?);
        }
        Ok(worst)
    }

    /// Serialize to a self-contained JSON document.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let p: LmiProblem = serde_json::from_str(text)?;
        if p.objective.len() != p.layout.total() {
            return Err(Error::Parse("objective length does not match variable layout".into()));
        }
        Ok(p)
    }
}

/// Outcome classification of a solve.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    /// Converged to the required accuracy.
    Optimal,
    /// Reduced-accuracy convergence; the certificate check still applies.
    Feasible,
    Infeasible,
    NumericalFailure,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Solution {
    pub status: SolveStatus,
    pub x: Vec<f64>,
    pub objective: f64,
    /// Largest pencil violation at the returned point (≤ 0 is feasible).
    pub worst_violation: f64,
    pub iterations: u32,
}

/// Scaled upper-triangle vectorization used by the PSD triangle cone:
/// upper triangle column-major, off-diagonal entries multiplied by √2.
fn svec(m: &Matrix) -> Vec<f64> {
    let n = m.nrows();
    let r = 2f64.sqrt();
    let mut out = Vec::with_capacity(sym_count(n));
    for j in 0..n {
        for i in 0..=j {
            out.push(if i == j { m[(i, j)] } else { r * m[(i, j)] });
        }
    }
    out
}

/// Solve the problem with the interior-point conic solver.
///
/// Set `DOFC_SOLVER_VERBOSE=1` to stream solver iterations to stdout.
pub fn solve(problem: &LmiProblem) -> Result<Solution> {
    let nv = problem.n_vars();
    if nv == 0 {
        return Err(Error::Invalid("LMI problem has no variables".into()));
    }
    if problem.objective.len() != nv {
        return Err(Error::Dimension("objective length does not match variable count".into()));
    }

    // Row layout: equality (zero-cone) rows, then one cone block per pencil,
    // then 2·nv box rows.
    let mut cones: Vec<SupportedConeT<f64>> = Vec::new();
    let mut nrows = 0usize;
    let neq = problem.equalities.len();
    if neq > 0 {
        cones.push(ZeroConeT(neq));
        nrows = neq;
    }
    let mut offsets = Vec::with_capacity(problem.pencils.len());
    for p in &problem.pencils {
        offsets.push(nrows);
        let rows = sym_count(p.dim);
        cones.push(if p.dim == 1 {
            NonnegativeConeT(1)
        } else {
            PSDTriangleConeT(p.dim)
        });
        nrows += rows;
    }
    let box_offset = nrows;
    cones.push(NonnegativeConeT(2 * nv));
    nrows += 2 * nv;

    // b = rhs per equality row; svec(-F_0 - eps·I) per pencil; BOX_LIMIT on
    // the box rows.
    let mut b = vec![0.0; nrows];
    for (row, eq) in problem.equalities.iter().enumerate() {
        b[row] = eq.rhs;
    }
    for (p, off) in problem.pencils.iter().zip(&offsets) {
        let shifted = -&p.f0 - Matrix::identity(p.dim, p.dim) * p.eps;
        b[*off..*off + sym_count(p.dim)].copy_from_slice(&svec(&shifted));
    }
    for r in &mut b[box_offset..] {
        *r = BOX_LIMIT;
    }

    // Column k of A holds svec(F_k) per pencil plus the two box rows
    // (BOX_LIMIT - x_k ≥ 0 and BOX_LIMIT + x_k ≥ 0).
    let mut colptr = Vec::with_capacity(nv + 1);
    let mut rowval = Vec::new();
    let mut nzval = Vec::new();
    // Gather per-variable contributions first.
    let mut per_var: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nv];
    for (row, eq) in problem.equalities.iter().enumerate() {
        for (k, c) in &eq.terms {
            if *k >= nv {
                return Err(Error::Dimension(format!(
                    "equality row {row} references variable {k} but the problem has {nv}"
                )));
            }
            if *c != 0.0 {
                per_var[*k].push((row, *c));
            }
        }
    }
    for (p, off) in problem.pencils.iter().zip(&offsets) {
        for (k, f) in &p.coeffs {
            if *k >= nv {
                return Err(Error::Dimension(format!(
                    "pencil `{}` references variable {k} but the problem has {nv}",
                    p.name
                )));
            }
            for (row, v) in svec(f).into_iter().enumerate() {
                if v != 0.0 {
                    per_var[*k].push((off + row, v));
                }
            }
        }
    }
    colptr.push(0);
    for (k, entries) in per_var.iter_mut().enumerate() {
        entries.sort_by_key(|(r, _)| *r);
        // Merge duplicate rows (e.g. repeated variables in one equality).
        let mut merged: Vec<(usize, f64)> = Vec::with_capacity(entries.len());
        for (r, v) in entries.iter() {
            match merged.last_mut() {
                Some((lr, lv)) if lr == r => *lv += v,
                _ => merged.push((*r, *v)),
            }
        }
        for (r, v) in merged {
            rowval.push(r);
            nzval.push(v);
        }
        rowval.push(box_offset + k);
        nzval.push(1.0);
        rowval.push(box_offset + nv + k);
        nzval.push(-1.0);
        colptr.push(rowval.len());
    }

    let a = CscMatrix::new(nrows, nv, colptr, rowval, nzval);
    let p_mat = CscMatrix::<f64>::zeros((nv, nv));
    let mut settings = DefaultSettings::default();
    settings.verbose = std::env::var("DOFC_SOLVER_VERBOSE").map(|v| v == "1").unwrap_or(false);
    settings.max_iter = 200;
    let mut solver = DefaultSolver::new(&p_mat, &problem.objective, &a, &b, &cones, settings)
        .map_err(|e| Error::SolverFailure(format!("solver setup: {e:?}")))?;
    solver.solve();

    let status = match solver.solution.status {
        SolverStatus::Solved => SolveStatus::Optimal,
        SolverStatus::AlmostSolved => SolveStatus::Feasible,
        SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
            SolveStatus::Infeasible
        }
        other => {
            return Err(Error::SolverFailure(format!("solver terminated with status {other:?}")))
        }
    };
    if status == SolveStatus::Infeasible {
        return Ok(Solution {
            status,
            x: vec![f64::NAN; nv],
            objective: f64::NAN,
            worst_violation: f64::INFINITY,
            iterations: solver.solution.iterations,
        });
    }

    let x = solver.solution.x.clone();
    let eq_resid = problem
        .equalities
        .iter()
        .map(|eq| eq.residual(&x).abs())
        .fold(0.0f64, f64::max);
    let worst = problem.worst_violation(&x)?.max(eq_resid);
    // Independent a-posteriori certificate: the point must actually satisfy
    // every pencil with at least half of its margin remaining, and every
    // equality to solver accuracy.
    let certified = problem.pencils.iter().try_fold(true, |ok, p| -> Result<bool> {
        Ok(ok && p.violation(&x)? <= p.eps.max(1e-12) / 2.0)
    })? && eq_resid <= 1e-6 * x.iter().map(|v| v.abs()).fold(1.0f64, f64::max);
    let status = if certified { status } else { SolveStatus::NumericalFailure };
    let objective = problem.objective.iter().zip(&x).map(|(c, v)| c * v).sum();
    Ok(Solution { status, x, objective, worst_violation: worst, iterations: solver.solution.iterations })
}
