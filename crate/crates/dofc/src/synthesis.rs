//! LMI assembly and solution for the consensus controller design, controller
//! recovery, and algebraic certification.
//!
//! Two inequality forms are supported:
//! - `Theorem1`: the non-fragile design with norm-bounded controller
//!   perturbations (five S-procedure multipliers),
//! - `Corollary1`: the certain-controller variant (single multiplier).
//!
//! The decision variables are the shared plant Lyapunov block `p̄_s`, the
//! per-agent controller Lyapunov blocks `P_ci`, the changed variables
//! `w_i = P_ci A_ci`, `z_i = P_ci B_ci`, `f_i = p̄_s B_i C_ci`,
//! `k_i = p̄_s B_i D_ci`, the multipliers `τ_j`, the attenuation `ρ²`, and
//! the scaled robustness variables `γ̂_i`; the objective is `ρ² + Σ γ̂_i`.
//!
//! Because `f_i` and `k_i` are free matrices, the pseudo-inverse recovery of
//! `C_ci`/`D_ci` can be inexact when `B_i` has fewer columns than rows. A
//! second solve with `p̄_s`/`P_ci` frozen (which makes the inequality linear
//! in the controller parameters themselves) restores an exact certificate
//! for the recovered controller; the first-stage objective is reported as
//! the design optimum.

use crate::matgraph::{block_scale, eye, kron, max_eig_sym, min_eig_sym, pinv, spectral_abscissa, spectral_norm};
use crate::model::{AgentController, ControllerRealization, DesignWeights, MultiAgentSystem, PerturbationBounds};
use crate::reduction::{build_a_phi, build_reduced, ReducedSystem};
use crate::sdp::{self, sym_basis, sym_count, sym_pack, sym_unpack, LmiProblem, Pencil, Solution, SolveStatus, VariableLayout};
use crate::{Error, Matrix, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Which matrix inequality to assemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SynthesisMode {
    /// Non-fragile design: controller-parameter perturbations admitted.
    Theorem1,
    /// Certain controller, no perturbation terms.
    Corollary1,
}

/// Numerical knobs for the assembly and solve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthesisOptions {
    /// Strictness shift `ε`: the grand pencil is required `⪯ -ε I`.
    pub margin: f64,
    /// Positivity floor for `P`, the multipliers, `ρ²` and `γ̂`.
    pub pd_margin: f64,
    /// Use `‖C_r‖²` instead of the literal `‖C_r‖` in the perturbation
    /// bound block (the algebraically tight variant).
    pub conservative_norm_squared: bool,
    /// Re-solve with the Lyapunov blocks frozen when pseudo-inverse
    /// recovery leaves a residual, so the returned controller carries an
    /// exact certificate.
    pub refine: bool,
    /// Relative recovery residual above which refinement triggers.
    pub refine_threshold: f64,
    /// Solve the range-coupled formulation (`p̄_s B_i = M B_i X_i`) so the
    /// controller gains invert exactly from the certified point.
    pub structured: bool,
    /// Evaluation budget for the aligner direction search, per bound scale.
    pub direction_evals: usize,
    /// Bisection steps when the stated perturbation bounds admit no
    /// recoverable certificate and the bound scale must shrink.
    pub scale_bisection_steps: usize,
    /// Smallest admissible perturbation-bound scale during continuation.
    pub min_bound_scale: f64,
    /// Follow a successful range-coupled certificate with a second solve
    /// that minimizes an absolute-value envelope over the controller
    /// variables at no objective cost. Without it the solver is free to
    /// return needlessly large gains (often at the variable box), which
    /// certify fine but produce a stiff, practically unsimulatable loop.
    pub shrink_gains: bool,
}

impl Default for SynthesisOptions {
    fn default() -> Self {
        Self {
            margin: 1e-5,
            pd_margin: 1e-6,
            conservative_norm_squared: false,
            refine: true,
            refine_threshold: 1e-9,
            structured: true,
            direction_evals: 120,
            scale_bisection_steps: 5,
            min_bound_scale: 0.05,
            shrink_gains: true,
        }
    }
}

/// Full problem data for one synthesis run.
#[derive(Debug, Clone)]
pub struct SynthesisProblem {
    pub mas: MultiAgentSystem<f64>,
    pub reduced: ReducedSystem<f64>,
    pub weights: DesignWeights<f64>,
    pub bounds: PerturbationBounds<f64>,
    /// Aggregated nonlinearity bound matrix `Ĥ` (block-diagonal, `N-1`
    /// blocks of `v_i` rows over the reduced state).
    pub h_hat: Matrix,
    /// Row counts `v_i` of the `Ĥ` blocks / `Γ̂` identity blocks.
    pub gamma_blocks: Vec<usize>,
    /// Controller order (0 gives a static output-feedback design).
    pub n_c: usize,
    pub options: SynthesisOptions,
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    m: usize,
    q: usize,
    n_agents: usize,
    n_c: usize,
    /// Reduced plant state dimension `n(N-1)`.
    s: usize,
    /// Stacked controller state dimension `n_c N`.
    c: usize,
    /// Stacked input dimension `m N`.
    nm: usize,
    /// Rows of `Ĥ` / dimension of the `Γ̂` block.
    gdim: usize,
}

impl SynthesisProblem {
    pub fn new(
        mas: MultiAgentSystem<f64>,
        weights: DesignWeights<f64>,
        bounds: PerturbationBounds<f64>,
        h_hat: Matrix,
        gamma_blocks: Vec<usize>,
        n_c: usize,
        options: SynthesisOptions,
    ) -> Result<Self> {
        let reduced = build_reduced(&mas)?;
        bounds.validate()?;
        let n = mas.state_dim();
        let n_agents = mas.n_agents();
        let s = n * (n_agents - 1);
        if gamma_blocks.len() != n_agents - 1 {
            return Err(Error::Dimension(format!(
                "expected {} aggregated bound blocks, got {}",
                n_agents - 1,
                gamma_blocks.len()
            )));
        }
        let gdim: usize = gamma_blocks.iter().sum();
        if h_hat.nrows() != gdim || h_hat.ncols() != s {
            return Err(Error::Dimension(format!(
                "aggregated bound matrix must be {gdim}×{s}, got {}×{}",
                h_hat.nrows(),
                h_hat.ncols()
            )));
        }
        // Block-diagonality of Ĥ: block i spans rows Σ v_j (j<i) and
        // columns i·n .. (i+1)·n.
        let mut r0 = 0;
        for (i, v) in gamma_blocks.iter().enumerate() {
            for r in 0..*v {
                for col in 0..s {
                    if (col < i * n || col >= (i + 1) * n) && h_hat[(r0 + r, col)] != 0.0 {
                        return Err(Error::Invalid(format!(
                            "aggregated bound matrix is not block-diagonal at ({}, {col})",
                            r0 + r
                        )));
                    }
                }
            }
            r0 += v;
        }
        let dim_r: usize = weights.r.iter().map(|b| b.nrows()).sum();
        let dim_q: usize = weights.q.iter().map(|b| b.nrows()).sum();
        if dim_r != s || dim_q != n_c * n_agents {
            return Err(Error::Dimension(format!(
                "weights cover {dim_r}+{dim_q} states, expected {s}+{}",
                n_c * n_agents
            )));
        }
        Ok(Self { mas, reduced, weights, bounds, h_hat, gamma_blocks, n_c, options })
    }

    fn dims(&self) -> Dims {
        let n = self.mas.state_dim();
        let n_agents = self.mas.n_agents();
        Dims {
            n,
            m: self.mas.input_dim(),
            q: self.mas.output_dim(),
            n_agents,
            n_c: self.n_c,
            s: n * (n_agents - 1),
            c: self.n_c * n_agents,
            nm: self.mas.input_dim() * n_agents,
            gdim: self.gamma_blocks.iter().sum(),
        }
    }
}

/// Where a perturbation/nonlinearity channel enters the closed loop, which
/// determines its column block `P·(carrier)` in the grand pencil.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColKind {
    /// Through the plant input: carrier `[L̂_n B; 0]`.
    InputGain,
    /// Through the controller state equation: carrier `[0; I]`.
    CtrlState,
    /// Through the plant state equation: carrier `[I; 0]`.
    PlantState,
}

/// Which δ bound (scaled by `‖C_r‖` where applicable) a multiplier absorbs.
#[derive(Debug, Clone, Copy, PartialEq)]
enum DeltaKind {
    /// `‖C_r‖ δ² I` on the reduced plant states.
    Plant(f64),
    /// `δ² I` on the controller states.
    Ctrl(f64),
    /// The nonlinearity channel: no δ block, carries the `Ĥ` column.
    None,
}

#[derive(Debug, Clone, Copy)]
struct Channel {
    dim: usize,
    kind: ColKind,
    delta: DeltaKind,
}

fn channels(problem: &SynthesisProblem, mode: SynthesisMode) -> Vec<Channel> {
    let d = problem.dims();
    let b = &problem.bounds;
    match (mode, problem.n_c) {
        (SynthesisMode::Corollary1, _) => {
            vec![Channel { dim: d.s, kind: ColKind::PlantState, delta: DeltaKind::None }]
        }
        (SynthesisMode::Theorem1, 0) => vec![
            Channel { dim: d.nm, kind: ColKind::InputGain, delta: DeltaKind::Plant(b.delta_dc) },
            Channel { dim: d.s, kind: ColKind::PlantState, delta: DeltaKind::None },
        ],
        (SynthesisMode::Theorem1, _) => vec![
            Channel { dim: d.nm, kind: ColKind::InputGain, delta: DeltaKind::Ctrl(b.delta_cc) },
            Channel { dim: d.nm, kind: ColKind::InputGain, delta: DeltaKind::Plant(b.delta_dc) },
            Channel { dim: d.c, kind: ColKind::CtrlState, delta: DeltaKind::Ctrl(b.delta_ac) },
            Channel { dim: d.c, kind: ColKind::CtrlState, delta: DeltaKind::Plant(b.delta_bc) },
            Channel { dim: d.s, kind: ColKind::PlantState, delta: DeltaKind::None },
        ],
    }
}

/// Human-readable multiplier names matching the channel order.
pub fn tau_roles(mode: SynthesisMode, n_c: usize) -> Vec<String> {
    match (mode, n_c) {
        (SynthesisMode::Corollary1, _) => vec!["tau1".into()],
        (SynthesisMode::Theorem1, 0) => vec!["tau2".into(), "tau5".into()],
        (SynthesisMode::Theorem1, _) => {
            (1..=5).map(|j| format!("tau{j}")).collect()
        }
    }
}

fn add_block(m: &mut Matrix, r0: usize, c0: usize, blk: &Matrix) {
    for i in 0..blk.nrows() {
        for j in 0..blk.ncols() {
            m[(r0 + i, c0 + j)] += blk[(i, j)];
        }
    }
}

/// Add `blk` at `(r0, c0)` and its transpose at `(c0, r0)`.
fn add_sym(m: &mut Matrix, r0: usize, c0: usize, blk: &Matrix) {
    add_block(m, r0, c0, blk);
    let t = blk.transpose();
    add_block(m, c0, r0, &t);
}

fn entry(rows: usize, cols: usize, a: usize, b: usize) -> usize {
    debug_assert!(a < rows && b < cols);
    let _ = rows;
    a * cols + b
}

/// Structured view of one stage-one decision point; used to pack oracle test
/// points and to interpret solutions.
#[derive(Debug, Clone)]
pub struct StructuredPoint {
    pub p_s: Matrix,
    pub p_c: Vec<Matrix>,
    pub w: Vec<Matrix>,
    pub z: Vec<Matrix>,
    pub f: Vec<Matrix>,
    pub k: Vec<Matrix>,
    pub tau: Vec<f64>,
    pub rho_sq: f64,
    pub gamma_hat: Vec<f64>,
}

/// Pack a structured point into the scalar variable vector of a stage-one
/// layout produced by [`build_theorem1`] / [`build_corollary1`].
pub fn pack_point(layout: &VariableLayout, pt: &StructuredPoint) -> Result<Vec<f64>> {
    let mut x = vec![0.0; layout.total()];
    let pr = layout.range("p_s")?;
    x[pr].copy_from_slice(&sym_pack(&pt.p_s));
    let pc = layout.range("p_c")?;
    let per = if pt.p_c.is_empty() { 0 } else { sym_count(pt.p_c[0].nrows()) };
    for (i, b) in pt.p_c.iter().enumerate() {
        x[pc.start + i * per..pc.start + (i + 1) * per].copy_from_slice(&sym_pack(b));
    }
    for (name, mats) in [("w", &pt.w), ("z", &pt.z), ("f", &pt.f), ("k", &pt.k)] {
        let r = layout.range(name)?;
        let mut o = r.start;
        for m in mats.iter() {
            for a in 0..m.nrows() {
                for b in 0..m.ncols() {
                    x[o + entry(m.nrows(), m.ncols(), a, b)] = m[(a, b)];
                }
            }
            o += m.nrows() * m.ncols();
        }
    }
    let tr = layout.range("tau")?;
    x[tr].copy_from_slice(&pt.tau);
    x[layout.range("rho2")?.start] = pt.rho_sq;
    let gr = layout.range("gamma")?;
    x[gr].copy_from_slice(&pt.gamma_hat);
    Ok(x)
}

/// Frozen Lyapunov data for the controller-synthesis form.
#[derive(Clone, Copy)]
struct FixedP<'a> {
    p_s: &'a Matrix,
    p_c: &'a [Matrix],
}

/// Which variables are free in the assembled pencil.
#[derive(Clone, Copy)]
enum AssembleForm<'a> {
    /// Lyapunov blocks and changed controller variables all free. With
    /// `structured`, the controller variables are range-coupled through the
    /// aligner `M` (`p̄_s B_i = M B_i X_i`, `f_i = M B_i f̃_i`) so the gains
    /// invert exactly; `aligner = None` means `M = I`.
    Free { structured: bool, aligner: Option<&'a Matrix> },
    /// Lyapunov blocks frozen; the controller parameters are the variables.
    FrozenP(FixedP<'a>),
    /// Controller frozen; Lyapunov blocks and multipliers are the variables
    /// (the analysis form certifying a given controller).
    FrozenK(&'a ControllerRealization<f64>),
}

fn assemble(
    problem: &SynthesisProblem,
    mode: SynthesisMode,
    form: AssembleForm<'_>,
) -> Result<LmiProblem> {
    let (fixed, structured, aligner, fixed_k) = match form {
        AssembleForm::Free { structured, aligner } => (None, structured, aligner, None),
        AssembleForm::FrozenP(fp) => (Some(fp), false, None, None),
        AssembleForm::FrozenK(k) => (None, false, None, Some(k)),
    };
    // Aligned input columns M·B_i for the range-coupled variant.
    let aligned_b: Vec<Matrix> = problem
        .mas
        .agents
        .iter()
        .map(|ag| match aligner {
            Some(m) => m * &ag.b,
            None => ag.b.clone(),
        })
        .collect();
    let d = problem.dims();
    let chans = channels(problem, mode);
    let d_cl = d.s + d.c;
    // Grand pencil block structure: closed-loop state, disturbance, one block
    // per channel, aggregated-bound block.
    let mut block_dims = vec![d_cl, d_cl];
    block_dims.extend(chans.iter().map(|ch| ch.dim));
    block_dims.push(d.gdim);
    let mut off = Vec::with_capacity(block_dims.len());
    let mut total = 0;
    for b in &block_dims {
        off.push(total);
        total += b;
    }
    let chan_off = &off[2..2 + chans.len()];
    let gamma_off = off[off.len() - 1];

    // Variable layout.
    let stage2 = fixed.is_some();
    let mut layout = VariableLayout::new();
    if stage2 {
        layout.add("a_c", d.n_agents * d.n_c * d.n_c);
        layout.add("b_c", d.n_agents * d.n_c * d.q);
        layout.add("c_c", d.n_agents * d.m * d.n_c);
        layout.add("d_c", d.n_agents * d.m * d.q);
    } else {
        layout.add("p_s", sym_count(d.n));
        layout.add("p_c", d.n_agents * sym_count(d.n_c));
        if fixed_k.is_none() {
        layout.add("w", d.n_agents * d.n_c * d.n_c);
        layout.add("z", d.n_agents * d.n_c * d.q);
        if structured {
            // Structured-recovery variant: f_i = B_i f̃_i, k_i = B_i k̃_i,
            // with X_i tied to p̄_s by the range equality p̄_s B_i = B_i X_i
            // so the controller gains invert exactly.
            layout.add("f", d.n_agents * d.m * d.n_c);
            layout.add("k", d.n_agents * d.m * d.q);
            layout.add("x_b", d.n_agents * d.m * d.m);
        } else {
            layout.add("f", d.n_agents * d.n * d.n_c);
            layout.add("k", d.n_agents * d.n * d.q);
        }
        }
    }
    layout.add("tau", chans.len());
    layout.add("rho2", 1);
    layout.add("gamma", d.n_agents - 1);

    let c_r = &problem.reduced.c_r;
    let g = &problem.reduced.l_hat_n * &problem.mas.global_b; // s × Nm
    let cnorm = {
        let nrm = spectral_norm(c_r)?;
        if problem.options.conservative_norm_squared {
            nrm * nrm
        } else {
            nrm
        }
    };
    let q_tilde = problem.weights.q_tilde();
    if q_tilde.nrows() != d_cl {
        return Err(Error::Dimension("weight matrix does not match closed-loop dimension".into()));
    }

    let mut f0 = Matrix::zeros(total, total);
    add_block(&mut f0, off[0], off[0], &q_tilde);
    let mut coeffs: BTreeMap<usize, Matrix> = BTreeMap::new();
    fn coeff_entry(map: &mut BTreeMap<usize, Matrix>, k: usize, total: usize) -> &mut Matrix {
        map.entry(k).or_insert_with(|| Matrix::zeros(total, total))
    }
    macro_rules! cf {
        ($k:expr) => {
            coeff_entry(&mut coeffs, $k, total)
        };
    }

    // Carrier column for a channel under a given Lyapunov (sub)structure.
    let carrier = |kind: ColKind| -> Matrix {
        match kind {
            ColKind::InputGain => {
                let mut m = Matrix::zeros(d_cl, d.nm);
                m.view_mut((0, 0), (d.s, d.nm)).copy_from(&g);
                m
            }
            ColKind::CtrlState => {
                let mut m = Matrix::zeros(d_cl, d.c);
                m.view_mut((d.s, 0), (d.c, d.c)).copy_from(&eye(d.c));
                m
            }
            ColKind::PlantState => {
                let mut m = Matrix::zeros(d_cl, d.s);
                m.view_mut((0, 0), (d.s, d.s)).copy_from(&eye(d.s));
                m
            }
        }
    };

    // ----- Lyapunov variables or frozen Lyapunov constants -----
    match &fixed {
        None => {
            let pr = layout.range("p_s")?;
            for (idx, k) in pr.enumerate() {
                let e = sym_basis(d.n, idx);
                let m = cf!(k);
                // Φ(1,1): A_rᵀP_s + P_sA_r with P_s = I ⊗ E.
                let sym_part = problem.mas.agents[0].a_bar.transpose() * &e
                    + &e * &problem.mas.agents[0].a_bar;
                add_block(m, off[0], off[0], &kron(&eye(d.n_agents - 1), &sym_part)?);
                // Column P at block (1,2) and channel columns.
                let p_s_lift = kron(&eye(d.n_agents - 1), &e)?;
                let mut p_e = Matrix::zeros(d_cl, d_cl);
                p_e.view_mut((0, 0), (d.s, d.s)).copy_from(&p_s_lift);
                add_sym(m, off[0], off[1], &p_e);
                for (ch, co) in chans.iter().zip(chan_off) {
                    match ch.kind {
                        ColKind::InputGain => {
                            let mut col = Matrix::zeros(d_cl, d.nm);
                            col.view_mut((0, 0), (d.s, d.nm)).copy_from(&(&p_s_lift * &g));
                            add_sym(m, off[0], *co, &col);
                        }
                        ColKind::PlantState => {
                            let mut col = Matrix::zeros(d_cl, d.s);
                            col.view_mut((0, 0), (d.s, d.s)).copy_from(&p_s_lift);
                            add_sym(m, off[0], *co, &col);
                        }
                        ColKind::CtrlState => {}
                    }
                }
                if let Some(kc) = fixed_k {
                    // Frozen controller: the changed variables f_i = p̄_sB_iC_ci
                    // and k_i = p̄_sB_iD_ci become linear in the p̄_s entries.
                    let mut fb = Vec::with_capacity(d.n_agents);
                    let mut kb = Vec::with_capacity(d.n_agents);
                    for i in 0..d.n_agents {
                        let b_i = &problem.mas.agents[i].b;
                        fb.push(&e * b_i * &kc.agents[i].c_c);
                        kb.push(&e * b_i * &kc.agents[i].d_c);
                    }
                    let pi_c = block_scale(&problem.reduced.l_hat, &fb)?;
                    add_sym(m, off[0], off[0] + d.s, &pi_c);
                    let pi_d = block_scale(&problem.reduced.l_hat, &kb)?;
                    let m11 = &pi_d * c_r;
                    add_block(m, off[0], off[0], &(&m11 + m11.transpose()));
                }
            }
            let pcr = layout.range("p_c")?;
            let per = sym_count(d.n_c);
            for i in 0..d.n_agents {
                for idx in 0..per {
                    let k = pcr.start + i * per + idx;
                    let e = sym_basis(d.n_c, idx);
                    let m = cf!(k);
                    add_sym(m, off[0] + d.s + i * d.n_c, off[1] + d.s + i * d.n_c, &e);
                    for (ch, co) in chans.iter().zip(chan_off) {
                        if ch.kind == ColKind::CtrlState {
                            add_sym(m, off[0] + d.s + i * d.n_c, *co + i * d.n_c, &e);
                        }
                    }
                    if let Some(kc) = fixed_k {
                        // W = P_ci A_ci and Z = P_ci B_ci, linear in P_ci.
                        let w = &e * &kc.agents[i].a_c;
                        add_block(
                            m,
                            off[0] + d.s + i * d.n_c,
                            off[0] + d.s + i * d.n_c,
                            &(&w + w.transpose()),
                        );
                        let z = &e * &kc.agents[i].b_c;
                        let mut z_lift = Matrix::zeros(d.c, d.n_agents * d.q);
                        z_lift.view_mut((i * d.n_c, i * d.q), (d.n_c, d.q)).copy_from(&z);
                        let m12 = c_r.transpose() * z_lift.transpose();
                        add_sym(m, off[0], off[0] + d.s, &m12);
                    }
                }
            }
        }
        Some(fp) => {
            let p_s_lift = kron(&eye(d.n_agents - 1), fp.p_s)?;
            let mut p = Matrix::zeros(d_cl, d_cl);
            p.view_mut((0, 0), (d.s, d.s)).copy_from(&p_s_lift);
            for (i, b) in fp.p_c.iter().enumerate() {
                p.view_mut((d.s + i * d.n_c, d.s + i * d.n_c), (d.n_c, d.n_c)).copy_from(b);
            }
            // Constant Φ(1,1) part and all P-carried columns move to F_0.
            let sym_part = problem.reduced.a_r.transpose() * &p_s_lift + &p_s_lift * &problem.reduced.a_r;
            add_block(&mut f0, off[0], off[0], &sym_part);
            add_sym(&mut f0, off[0], off[1], &p);
            for (ch, co) in chans.iter().zip(chan_off) {
                let col = &p * carrier(ch.kind);
                add_sym(&mut f0, off[0], *co, &col);
            }
        }
    }

    // ----- Controller-parameter variables -----
    // Generators map each scalar decision to its effective changed-variable
    // matrix: identity basis matrices in stage one, `P`-premultiplied basis
    // matrices in stage two.
    let (w_name, z_name, f_name, k_name) = if stage2 { ("a_c", "b_c", "c_c", "d_c") } else { ("w", "z", "f", "k") };
    let (w_rows, w_cols) = (d.n_c, d.n_c);
    let (z_rows, z_cols) = (d.n_c, d.q);
    let slim = stage2 || structured;
    let (f_rows, f_cols) = if slim { (d.m, d.n_c) } else { (d.n, d.n_c) };
    let (k_rows, k_cols) = if slim { (d.m, d.q) } else { (d.n, d.q) };

    let gen_w = |i: usize, e: &Matrix| -> Matrix {
        match &fixed {
            None => e.clone(),
            Some(fp) => &fp.p_c[i] * e,
        }
    };
    let gen_fk = |i: usize, e: &Matrix| -> Matrix {
        match &fixed {
            None if structured => &aligned_b[i] * e,
            None => e.clone(),
            Some(fp) => fp.p_s * &problem.mas.agents[i].b * e,
        }
    };

    // W + Wᵀ on the controller diagonal of Φ.
    if fixed_k.is_none() {
    let wr = layout.range(w_name)?;
    for i in 0..d.n_agents {
        for a in 0..w_rows {
            for b in 0..w_cols {
                let k = wr.start + i * w_rows * w_cols + entry(w_rows, w_cols, a, b);
                let mut e = Matrix::zeros(d.n_c, d.n_c);
                e[(a, b)] = 1.0;
                let w = gen_w(i, &e);
                let m = cf!(k);
                let sym_w = &w + w.transpose();
                add_block(m, off[0] + d.s + i * d.n_c, off[0] + d.s + i * d.n_c, &sym_w);
            }
        }
    }
    // C_rᵀ Zᵀ in Φ(1,2).
    let zr = layout.range(z_name)?;
    for i in 0..d.n_agents {
        for a in 0..z_rows {
            for b in 0..z_cols {
                let k = zr.start + i * z_rows * z_cols + entry(z_rows, z_cols, a, b);
                let mut e = Matrix::zeros(d.n_c, d.q);
                e[(a, b)] = 1.0;
                let z = gen_w(i, &e); // P_ci e in stage two, e otherwise
                let mut z_lift = Matrix::zeros(d.c, d.n_agents * d.q);
                z_lift.view_mut((i * d.n_c, i * d.q), (d.n_c, d.q)).copy_from(&z);
                let m12 = c_r.transpose() * z_lift.transpose();
                let m = cf!(k);
                add_sym(m, off[0], off[0] + d.s, &m12);
            }
        }
    }
    // Π_C in Φ(1,2): block column i scaled by the reduced Laplacian column.
    let fr = layout.range(f_name)?;
    for i in 0..d.n_agents {
        for a in 0..f_rows {
            for b in 0..f_cols {
                let k = fr.start + i * f_rows * f_cols + entry(f_rows, f_cols, a, b);
                let mut e = Matrix::zeros(f_rows, f_cols);
                e[(a, b)] = 1.0;
                let f = gen_fk(i, &e); // n × n_c in both stages
                let mut blocks = vec![Matrix::zeros(d.n, d.n_c); d.n_agents];
                blocks[i] = f;
                let pi_c = block_scale(&problem.reduced.l_hat, &blocks)?;
                let m = cf!(k);
                add_sym(m, off[0], off[0] + d.s, &pi_c);
            }
        }
    }
    // Π_D C_r + (·)ᵀ in Φ(1,1).
    let kr = layout.range(k_name)?;
    for i in 0..d.n_agents {
        for a in 0..k_rows {
            for b in 0..k_cols {
                let k = kr.start + i * k_rows * k_cols + entry(k_rows, k_cols, a, b);
                let mut e = Matrix::zeros(k_rows, k_cols);
                e[(a, b)] = 1.0;
                let kd = gen_fk(i, &e); // n × q
                let mut blocks = vec![Matrix::zeros(d.n, d.q); d.n_agents];
                blocks[i] = kd;
                let pi_d = block_scale(&problem.reduced.l_hat, &blocks)?;
                let m11 = &pi_d * c_r;
                let sym11 = &m11 + m11.transpose();
                let m = cf!(k);
                add_block(m, off[0], off[0], &sym11);
            }
        }
    }
    }

    // Range-coupling equalities `p̄_s B_i = B_i X_i` (structured recovery):
    // scalar row per entry of the n×m product, linear in the packed `p̄_s`
    // entries and in `X_i`.
    let mut equalities = Vec::new();
    if structured && !stage2 {
        let pr = layout.range("p_s")?;
        let xr = layout.range("x_b")?;
        for i in 0..d.n_agents {
            let b_i = &problem.mas.agents[i].b;
            let mb_i = &aligned_b[i];
            for r in 0..d.n {
                for c in 0..d.m {
                    let mut terms = Vec::new();
                    for j in 0..d.n {
                        if b_i[(j, c)] != 0.0 {
                            let k = pr.start + sdp::sym_index_of(d.n, r.min(j), r.max(j));
                            terms.push((k, b_i[(j, c)]));
                        }
                    }
                    for t in 0..d.m {
                        if mb_i[(r, t)] != 0.0 {
                            let k = xr.start + i * d.m * d.m + entry(d.m, d.m, t, c);
                            terms.push((k, -mb_i[(r, t)]));
                        }
                    }
                    if !terms.is_empty() {
                        equalities.push(sdp::EqualityRow { terms, rhs: 0.0 });
                    }
                }
            }
        }
    }

    // ----- Multipliers -----
    let tr = layout.range("tau")?;
    for (j, (ch, co)) in chans.iter().zip(chan_off).enumerate() {
        let k = tr.start + j;
        let m = cf!(k);
        add_block(m, *co, *co, &(-eye::<f64>(ch.dim)));
        match ch.delta {
            DeltaKind::Plant(delta) => {
                let blk = eye::<f64>(d.s) * (cnorm * delta * delta);
                add_block(m, off[0], off[0], &blk);
            }
            DeltaKind::Ctrl(delta) => {
                let blk = eye::<f64>(d.c) * (delta * delta);
                add_block(m, off[0] + d.s, off[0] + d.s, &blk);
            }
            DeltaKind::None => {
                // The nonlinearity multiplier also scales the Ĥ column to
                // the aggregated-bound block.
                let mut col = Matrix::zeros(d_cl, d.gdim);
                col.view_mut((0, 0), (d.s, d.gdim)).copy_from(&problem.h_hat.transpose());
                add_sym(m, off[0], gamma_off, &col);
            }
        }
    }
    // ρ² and γ̂.
    {
        let k = layout.range("rho2")?.start;
        let m = cf!(k);
        add_block(m, off[1], off[1], &(-eye::<f64>(d_cl)));
    }
    let gr = layout.range("gamma")?;
    let mut v_off = 0;
    for (i, v) in problem.gamma_blocks.iter().enumerate() {
        let k = gr.start + i;
        let m = cf!(k);
        add_block(m, gamma_off + v_off, gamma_off + v_off, &(-eye::<f64>(*v)));
        v_off += v;
    }

    // ----- Assemble problem -----
    let mut prob = LmiProblem::new(layout);
    prob.add_pencil(Pencil::new(
        "grand",
        f0,
        coeffs.iter().map(|(k, m)| (*k, m.clone())).collect(),
        problem.options.margin,
    )?);

    // P ≻ 0 side pencil (stage one only; stage two has P fixed and certified).
    if !stage2 {
        let mut pd_coeffs = Vec::new();
        let pr = prob.layout.range("p_s")?;
        for (idx, k) in pr.enumerate() {
            let e = sym_basis(d.n, idx);
            let mut p_e = Matrix::zeros(d_cl, d_cl);
            p_e.view_mut((0, 0), (d.s, d.s)).copy_from(&kron(&eye(d.n_agents - 1), &e)?);
            pd_coeffs.push((k, -p_e));
        }
        let pcr = prob.layout.range("p_c")?;
        let per = sym_count(d.n_c);
        for i in 0..d.n_agents {
            for idx in 0..per {
                let k = pcr.start + i * per + idx;
                let mut p_e = Matrix::zeros(d_cl, d_cl);
                add_block(&mut p_e, d.s + i * d.n_c, d.s + i * d.n_c, &(-sym_basis(d.n_c, idx)));
                pd_coeffs.push((k, p_e));
            }
        }
        prob.add_pencil(Pencil::new(
            "p_pd",
            Matrix::zeros(d_cl, d_cl),
            pd_coeffs,
            problem.options.pd_margin,
        )?);
    }
    // Positivity of multipliers, ρ², γ̂.
    let mut scalar_pos = Vec::new();
    scalar_pos.extend(prob.layout.range("tau")?);
    scalar_pos.push(prob.layout.range("rho2")?.start);
    scalar_pos.extend(prob.layout.range("gamma")?);
    for k in scalar_pos {
        prob.add_pencil(Pencil::new(
            &format!("pos_{k}"),
            Matrix::zeros(1, 1),
            vec![(k, Matrix::from_element(1, 1, -1.0))],
            problem.options.pd_margin,
        )?);
    }

    prob.equalities = equalities;

    // Objective: ρ² + Σ γ̂_i.
    prob.objective[prob.layout.range("rho2")?.start] = 1.0;
    for k in prob.layout.range("gamma")? {
        prob.objective[k] = 1.0;
    }
    Ok(prob)
}

/// Build the non-fragile (perturbation-tolerant) inequality.
pub fn build_theorem1(problem: &SynthesisProblem) -> Result<LmiProblem> {
    assemble(problem, SynthesisMode::Theorem1, AssembleForm::Free { structured: false, aligner: None })
}

/// Build the certain-controller inequality.
pub fn build_corollary1(problem: &SynthesisProblem) -> Result<LmiProblem> {
    assemble(problem, SynthesisMode::Corollary1, AssembleForm::Free { structured: false, aligner: None })
}

/// Recovered-controller data plus Lyapunov certificate, serializable for the
/// CLI artifact files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthesisResult {
    pub mode: SynthesisMode,
    pub controller: ControllerRealization<f64>,
    /// Lyapunov blocks of the controller certificate.
    pub p_s_bar: Matrix,
    pub p_c: Vec<Matrix>,
    /// Multiplier values of the controller certificate, matching
    /// [`tau_roles`].
    pub tau: Vec<f64>,
    pub tau_roles: Vec<String>,
    pub rho_sq: f64,
    pub rho: f64,
    pub gamma_hat: Vec<f64>,
    pub robustness_degrees: Vec<f64>,
    /// Free-variable optimum `ρ² + Σ γ̂_i` (the design objective).
    pub objective: f64,
    /// Objective value at the certified point (usually exceeds `objective`:
    /// implementability of the gains costs performance).
    pub certified_objective: f64,
    /// Perturbation-bound scale at which the controller certificate holds;
    /// 1 when the stated bounds are certified in full.
    pub certified_bound_scale: f64,
    /// Aligner `M` of the range coupling `p̄_s B_i = M B_i X_i` used by the
    /// certificate, when the range-coupled form produced it.
    pub aligner: Option<Matrix>,
    /// Max eigenvalue of the certificate pencil at `solution_x`.
    pub lmi_residual: f64,
    /// Max eigenvalue of the free-variable design pencil at its optimum.
    pub design_lmi_residual: f64,
    /// Smallest eigenvalue of the design solve's shared Lyapunov block.
    pub design_p_min_eig: f64,
    /// Formulation the certified point and `solution_x` belong to.
    pub certificate_form: CertificateForm,
    pub status: SolveStatus,
    /// Raw solver point in the layout of the certificate-form LMI;
    /// lets verification re-evaluate the pencil without re-solving.
    pub solution_x: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Recover the controller from a stage-one solution. For the range-coupled
/// layout (with the `X_i` variables) the gains invert exactly through
/// `X_i`; otherwise the pseudo-inverse formulas are used and per-agent
/// relative residuals `(r_C, r_D)` of the back-substitution are recorded.
pub fn recover_controllers(
    problem: &SynthesisProblem,
    layout: &VariableLayout,
    x: &[f64],
) -> Result<(ControllerRealization<f64>, Matrix, Vec<Matrix>)> {
    recover_controllers_aligned(problem, layout, x, None)
}

/// [`recover_controllers`] with an explicit range-coupling aligner `M`.
fn recover_controllers_aligned(
    problem: &SynthesisProblem,
    layout: &VariableLayout,
    x: &[f64],
    aligner: Option<&Matrix>,
) -> Result<(ControllerRealization<f64>, Matrix, Vec<Matrix>)> {
    let d = problem.dims();
    let structured = layout.range("x_b").is_ok();
    let p_s = sym_unpack(layout.slice("p_s", x)?, d.n)?;
    let min_p = if d.n > 0 { min_eig_sym(&p_s)? } else { 0.0 };
    if d.n > 0 && min_p <= 0.0 {
        return Err(Error::NotPositiveDefinite(format!(
            "shared plant Lyapunov block has minimum eigenvalue {min_p:e}"
        )));
    }
    let per = sym_count(d.n_c);
    let pc_vals = layout.slice("p_c", x)?;
    let mut p_c = Vec::with_capacity(d.n_agents);
    for i in 0..d.n_agents {
        let b = sym_unpack(&pc_vals[i * per..(i + 1) * per], d.n_c)?;
        if d.n_c > 0 {
            let me = min_eig_sym(&b)?;
            if me <= 0.0 {
                return Err(Error::NotPositiveDefinite(format!(
                    "controller Lyapunov block {i} has minimum eigenvalue {me:e}"
                )));
            }
        }
        p_c.push(b);
    }
    let unpack_group = |name: &str, rows: usize, cols: usize| -> Result<Vec<Matrix>> {
        let vals = layout.slice(name, x)?;
        let sz = rows * cols;
        Ok((0..d.n_agents)
            .map(|i| {
                Matrix::from_fn(rows, cols, |a, b| vals[i * sz + entry(rows, cols, a, b)])
            })
            .collect())
    };
    let w = unpack_group("w", d.n_c, d.n_c)?;
    let z = unpack_group("z", d.n_c, d.q)?;
    let f_rows = if structured { d.m } else { d.n };
    let f = unpack_group("f", f_rows, d.n_c)?;
    let k = unpack_group("k", f_rows, d.q)?;
    let x_b = if structured { unpack_group("x_b", d.m, d.m)? } else { Vec::new() };

    let p_s_inv = pinv(&p_s)?;
    let mut agents = Vec::with_capacity(d.n_agents);
    let mut residuals = Vec::with_capacity(d.n_agents);
    for i in 0..d.n_agents {
        let b_i = &problem.mas.agents[i].b;
        let pc_inv = if d.n_c == 0 { Matrix::zeros(0, 0) } else { pinv(&p_c[i])? };
        let a_c = &pc_inv * &w[i];
        let b_c = &pc_inv * &z[i];
        // Effective f_i / k_i as they appear in the solved pencil.
        let (f_eff, k_eff, c_c, d_c) = if structured {
            let mb_i = match aligner {
                Some(m) => m * b_i,
                None => b_i.clone(),
            };
            let x_inv = pinv(&x_b[i])?;
            (&mb_i * &f[i], &mb_i * &k[i], &x_inv * &f[i], &x_inv * &k[i])
        } else {
            let b_dag = pinv(b_i)?;
            let c_c = &b_dag * &p_s_inv * &f[i];
            let d_c = &b_dag * &p_s_inv * &k[i];
            (f[i].clone(), k[i].clone(), c_c, d_c)
        };
        let f_back = &p_s * b_i * &c_c;
        let k_back = &p_s * b_i * &d_c;
        let r_c = (&f_back - &f_eff).norm() / f_eff.norm().max(1e-12);
        let r_d = (&k_back - &k_eff).norm() / k_eff.norm().max(1e-12);
        residuals.push((r_c, r_d));
        agents.push(AgentController { a_c, b_c, c_c, d_c });
    }
    let ctrl = ControllerRealization {
        order: d.n_c,
        agents,
        recovery_residuals: residuals,
        robustness_degrees: Vec::new(),
    };
    Ok((ctrl, p_s, p_c))
}

/// Read the controller directly from a frozen-Lyapunov solution, where the
/// decision variables are the controller parameters themselves.
fn extract_refined_controller(
    problem: &SynthesisProblem,
    layout: &VariableLayout,
    x: &[f64],
) -> Result<ControllerRealization<f64>> {
    let d = problem.dims();
    let group = |name: &str, rows: usize, cols: usize| -> Result<Vec<Matrix>> {
        let vals = layout.slice(name, x)?;
        let sz = rows * cols;
        Ok((0..d.n_agents)
            .map(|i| Matrix::from_fn(rows, cols, |a, b| vals[i * sz + entry(rows, cols, a, b)]))
            .collect())
    };
    let a_c = group("a_c", d.n_c, d.n_c)?;
    let b_c = group("b_c", d.n_c, d.q)?;
    let c_c = group("c_c", d.m, d.n_c)?;
    let d_cm = group("d_c", d.m, d.q)?;
    let agents = (0..d.n_agents)
        .map(|i| AgentController {
            a_c: a_c[i].clone(),
            b_c: b_c[i].clone(),
            c_c: c_c[i].clone(),
            d_c: d_cm[i].clone(),
        })
        .collect();
    Ok(ControllerRealization {
        order: d.n_c,
        agents,
        recovery_residuals: vec![(0.0, 0.0); d.n_agents],
        robustness_degrees: Vec::new(),
    })
}

/// Robustness degree per perturbation channel: `sqrt(tau_nl / gamma_hat_i)`,
/// where `tau_nl` is the nonlinearity-channel multiplier.
pub fn robustness_degrees(gamma_hat: &[f64], tau_nl: f64) -> Result<Vec<f64>> {
    if tau_nl <= 0.0 {
        return Err(Error::Invalid(format!(
            "nonlinearity multiplier must be positive, got {tau_nl}"
        )));
    }
    gamma_hat
        .iter()
        .map(|g| {
            if *g <= 0.0 {
                Err(Error::Invalid(format!(
                    "scaled robustness variable must be positive, got {g}"
                )))
            } else {
                Ok((tau_nl / g).sqrt())
            }
        })
        .collect()
}

/// Which formulation the stored certificate point belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CertificateForm {
    /// Range-coupled layout: controller recovery is exact by construction.
    Structured,
    /// Free-variable layout: pseudo-inverse recovery may carry residuals.
    Literal,
    /// Re-solve with the Lyapunov blocks frozen at the free-variable solution.
    FrozenP,
    /// Analysis re-certification: Lyapunov blocks and multipliers re-solved
    /// for the recovered controller held fixed.
    FrozenK,
}

/// Copy of the problem with perturbation bounds scaled by `scale`.
fn scaled_problem(problem: &SynthesisProblem, scale: f64) -> SynthesisProblem {
    let mut p = problem.clone();
    p.bounds.delta_ac *= scale;
    p.bounds.delta_bc *= scale;
    p.bounds.delta_cc *= scale;
    p.bounds.delta_dc *= scale;
    p
}

/// Aligner whose input columns are `D`: `M(D) B_i = D · (Q_bᵀ B_i)` where
/// `Q_b` is an orthonormal basis of `span(B_1)`. The identity part keeps the
/// map invertible away from `span(B_1)`.
fn direction_aligner(q_b: &Matrix, d: &Matrix) -> Matrix {
    let n = q_b.nrows();
    eye::<f64>(n) - q_b * q_b.transpose() + d * q_b.transpose()
}

/// Smallest slack `α` with the grand pencil relaxed to `F(x) − αI ⪯ −εI`;
/// `None` when the solver fails or the relaxation itself is infeasible.
fn structured_slack(problem: &SynthesisProblem, mode: SynthesisMode, m: &Matrix) -> Option<f64> {
    let mut lmi =
        assemble(problem, mode, AssembleForm::Free { structured: true, aligner: Some(m) }).ok()?;
    let nv = lmi.layout.total();
    lmi.layout.add("slack", 1);
    let dim = lmi.pencils[0].dim;
    lmi.pencils[0].coeffs.push((nv, -eye::<f64>(dim)));
    let mut obj = vec![0.0; nv + 1];
    obj[nv] = 1.0;
    lmi.objective = obj;
    match sdp::solve(&lmi) {
        Ok(s) if matches!(s.status, SolveStatus::Optimal | SolveStatus::Feasible) => Some(s.x[nv]),
        _ => None,
    }
}

/// Compass search over the aligned input directions `D` (entries of an
/// `n × m` matrix, column-normalized) minimizing the structured slack.
/// Stops as soon as a strictly feasible direction is found.
fn search_direction(
    problem: &SynthesisProblem,
    mode: SynthesisMode,
    q_b: &Matrix,
    seeds: &[Matrix],
    budget: usize,
) -> (f64, Matrix) {
    let normalize = |d: &Matrix| -> Matrix {
        let mut out = d.clone();
        for c in 0..out.ncols() {
            let nrm = out.column(c).norm();
            if nrm > 1e-12 {
                out.column_mut(c).scale_mut(1.0 / nrm);
            }
        }
        out
    };
    let mut best = (f64::INFINITY, normalize(&seeds[0]));
    let mut evals = 0usize;
    for seed in seeds {
        let mut d = normalize(seed);
        let mut a = match structured_slack(problem, mode, &direction_aligner(q_b, &d)) {
            Some(a) => a,
            None => f64::INFINITY,
        };
        evals += 1;
        let mut step = 0.5;
        while step > 0.02 && evals < budget && a > -1e-6 {
            let mut improved = false;
            'sweep: for r in 0..d.nrows() {
                for c in 0..d.ncols() {
                    for sgn in [1.0, -1.0] {
                        let mut cand = d.clone();
                        cand[(r, c)] += sgn * step;
                        let cand = normalize(&cand);
                        let ac = structured_slack(problem, mode, &direction_aligner(q_b, &cand))
                            .unwrap_or(f64::INFINITY);
                        evals += 1;
                        if ac < a {
                            a = ac;
                            d = cand;
                            improved = true;
                        }
                        if a < -1e-6 || evals >= budget {
                            break 'sweep;
                        }
                    }
                }
            }
            if !improved {
                step *= 0.5;
            }
        }
        if a < best.0 {
            best = (a, d);
        }
        if best.0 < -1e-6 {
            break;
        }
    }
    best
}

/// A certified range-coupled solution.
struct StructuredOutcome {
    scale: f64,
    aligner: Matrix,
    lmi: LmiProblem,
    sol: Solution,
}

/// Find a strictly feasible range-coupled certificate, shrinking the
/// perturbation bounds by bisection when the stated bounds admit none.
fn certify_structured(
    problem: &SynthesisProblem,
    mode: SynthesisMode,
    design_p_s: &Matrix,
    warnings: &mut Vec<String>,
) -> Option<StructuredOutcome> {
    use rand::{Rng, SeedableRng};
    let d = problem.dims();
    let b1 = &problem.mas.agents[0].b;
    let q_b = b1.clone().qr().q().columns(0, d.m).clone_owned();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed);
    let mut seeds = vec![q_b.clone(), design_p_s * &q_b];
    for _ in 0..4 {
        seeds.push(Matrix::from_fn(d.n, d.m, |_, _| rng.gen_range(-1.0..1.0)));
    }
    let budget = problem.options.direction_evals;
    let has_bounds = mode == SynthesisMode::Theorem1
        && (problem.bounds.delta_ac > 0.0
            || problem.bounds.delta_bc > 0.0
            || problem.bounds.delta_cc > 0.0
            || problem.bounds.delta_dc > 0.0);

    let solve_at = |scale: f64, dir: &Matrix| -> Option<(Matrix, LmiProblem, Solution)> {
        let prob = scaled_problem(problem, scale);
        let m = direction_aligner(&q_b, dir);
        let lmi = assemble(&prob, mode, AssembleForm::Free { structured: true, aligner: Some(&m) })
            .ok()?;
        match sdp::solve(&lmi) {
            Ok(s) if matches!(s.status, SolveStatus::Optimal | SolveStatus::Feasible) => {
                Some((m, lmi, s))
            }
            _ => None,
        }
    };

    // Ascending bound-scale ladder with warm-started directions: cheap at
    // small scales, and each feasible direction seeds the next rung.
    let ladder: &[f64] =
        if has_bounds { &[0.25, 0.5, 0.75, 1.0] } else { &[1.0] };
    let mut feasible: Option<(f64, Matrix)> = None;
    let mut infeasible_scale: Option<f64> = None;
    for &scale in ladder {
        let prob = scaled_problem(problem, scale);
        let local_seeds: Vec<Matrix> = match &feasible {
            Some((_, dir)) => vec![dir.clone()],
            None => seeds.clone(),
        };
        let (alpha, dir) = search_direction(&prob, mode, &q_b, &local_seeds, budget);
        if alpha < -1e-6 {
            feasible = Some((scale, dir));
        } else {
            infeasible_scale = Some(scale);
            break;
        }
    }
    if feasible.is_none() {
        warnings.push(
            "no recoverable certificate found at any perturbation-bound scale; \
             falling back to pseudo-inverse recovery"
                .into(),
        );
        return None;
    }
    // Bisect between the last feasible and first infeasible scale.
    if let Some(hi0) = infeasible_scale {
        let (mut lo, mut dir) = feasible.clone().unwrap();
        let mut hi = hi0;
        for _ in 0..problem.options.scale_bisection_steps {
            let mid = 0.5 * (lo + hi);
            let prob = scaled_problem(problem, mid);
            let (alpha, d_mid) = search_direction(&prob, mode, &q_b, &[dir.clone()], budget / 2);
            if alpha < -1e-6 {
                lo = mid;
                dir = d_mid;
            } else {
                hi = mid;
            }
        }
        feasible = Some((lo, dir));
        warnings.push(format!(
            "the stated perturbation bounds admit no recoverable certificate; \
             controller certified at bound scale {lo:.3}"
        ));
    }
    let (scale, dir) = feasible.unwrap();
    if scale < problem.options.min_bound_scale {
        warnings.push(format!(
            "certified bound scale {scale:.3} below the configured floor \
             {:.3}; falling back to pseudo-inverse recovery",
            problem.options.min_bound_scale
        ));
        return None;
    }
    match solve_at(scale, &dir) {
        Some((m, lmi, sol)) => Some(StructuredOutcome { scale, aligner: m, lmi, sol }),
        None => {
            warnings.push(
                "range-coupled certificate solve failed after a feasible slack point; \
                 falling back to pseudo-inverse recovery"
                    .into(),
            );
            None
        }
    }
}

/// Re-solve a feasible range-coupled certificate minimizing an absolute-value
/// envelope over the controller variables, subject to the already-achieved
/// objective `ρ² + Σγ̂` (with 1% headroom). The Lyapunov blocks — and, for
/// single-input plants, the range-coupling scalars `X_i` — are kept at half
/// their incumbent margins, so shrinking the envelope shrinks the physical
/// gains `P_c⁻¹W`, `X⁻¹f̃` instead of letting their denominators collapse.
/// Returns `None` when the incumbent is too close to singular or the solve
/// does not succeed; the incumbent certificate stays in force then.
fn shrink_gains(
    problem: &SynthesisProblem,
    mode: SynthesisMode,
    aligner: &Matrix,
    incumbent: &Solution,
) -> Result<Option<Solution>> {
    let d = problem.dims();
    let mut lmi = assemble(
        problem,
        mode,
        AssembleForm::Free { structured: true, aligner: Some(aligner) },
    )?;
    let nv = lmi.layout.total();

    // Lyapunov floors at half the incumbent margins; the incumbent itself
    // stays feasible by construction.
    let p_s = sym_unpack(lmi.layout.slice("p_s", &incumbent.x)?, d.n)?;
    let floor_s = 0.5 * min_eig_sym(&p_s)?;
    if floor_s <= 0.0 {
        return Ok(None);
    }
    let r = lmi.layout.range("p_s")?;
    let coeffs: Vec<(usize, Matrix)> =
        (0..r.len()).map(|k| (r.start + k, -sym_basis(d.n, k))).collect();
    lmi.add_pencil(Pencil::new("shrink_ps_floor", Matrix::zeros(d.n, d.n), coeffs, floor_s)?);
    if d.n_c > 0 {
        let pcr = lmi.layout.range("p_c")?;
        let per = sym_count(d.n_c);
        for i in 0..d.n_agents {
            let blk = sym_unpack(
                &incumbent.x[pcr.start + i * per..pcr.start + (i + 1) * per],
                d.n_c,
            )?;
            let fl = 0.5 * min_eig_sym(&blk)?;
            if fl <= 0.0 {
                return Ok(None);
            }
            let coeffs: Vec<(usize, Matrix)> = (0..per)
                .map(|k| (pcr.start + i * per + k, -sym_basis(d.n_c, k)))
                .collect();
            lmi.add_pencil(Pencil::new(
                &format!("shrink_pc_floor_{i}"),
                Matrix::zeros(d.n_c, d.n_c),
                coeffs,
                fl,
            )?);
        }
    }
    // Single-input coupling scalars keep their sign and half magnitude.
    if d.m == 1 {
        if let Ok(xr) = lmi.layout.range("x_b") {
            for k in xr {
                let v = incumbent.x[k];
                if v.abs() < 1e-9 {
                    return Ok(None);
                }
                lmi.add_pencil(Pencil::new(
                    &format!("shrink_xb_{k}"),
                    Matrix::zeros(1, 1),
                    vec![(k, Matrix::from_element(1, 1, -v.signum()))],
                    0.5 * v.abs(),
                )?);
            }
        }
    }

    // Envelope |x_k| ≤ t_k over the controller variable groups.
    let one = || Matrix::from_element(1, 1, 1.0);
    let neg = || Matrix::from_element(1, 1, -1.0);
    let mut idxs: Vec<usize> = Vec::new();
    for g in ["w", "z", "f", "k"] {
        idxs.extend(lmi.layout.range(g)?);
    }
    let env = lmi.layout.add("env", idxs.len());
    for (j, &k) in idxs.iter().enumerate() {
        let t = env.start + j;
        lmi.add_pencil(Pencil::new(
            &format!("env_hi_{k}"),
            Matrix::zeros(1, 1),
            vec![(k, one()), (t, neg())],
            0.0,
        )?);
        lmi.add_pencil(Pencil::new(
            &format!("env_lo_{k}"),
            Matrix::zeros(1, 1),
            vec![(k, neg()), (t, neg())],
            0.0,
        )?);
    }

    // Keep the achieved objective (1% headroom for solver tolerance).
    let rho_idx = lmi.layout.range("rho2")?.start;
    let mut terms = vec![(rho_idx, one())];
    for g in lmi.layout.range("gamma")? {
        terms.push((g, one()));
    }
    let budget = incumbent.objective.abs() * 1.01 + 1e-6;
    lmi.add_pencil(Pencil::new(
        "objective_budget",
        Matrix::from_element(1, 1, -budget),
        terms,
        0.0,
    )?);

    let mut obj = vec![0.0; lmi.layout.total()];
    for t in env {
        obj[t] = 1.0;
    }
    lmi.objective = obj;

    match sdp::solve(&lmi) {
        Ok(mut s) if matches!(s.status, SolveStatus::Optimal | SolveStatus::Feasible) => {
            s.x.truncate(nv);
            // Report the design objective at the shrunk point, not the
            // envelope value.
            s.objective = s.x[rho_idx]
                + lmi.layout.range("gamma")?.map(|g| s.x[g]).sum::<f64>();
            Ok(Some(s))
        }
        _ => Ok(None),
    }
}

/// Solve the design problem end to end. A free-variable solve fixes the
/// design objective; a range-coupled solve (with an aligner direction
/// search, and bound-scale continuation when needed) produces a controller
/// whose certificate is exact. If no range-coupled certificate exists, the
/// pseudo-inverse recovery with an optional frozen-Lyapunov repair is used
/// and flagged.
pub fn synthesize(problem: &SynthesisProblem, mode: SynthesisMode) -> Result<SynthesisResult> {
    // Free-variable (design) solve: feasibility gate and objective value.
    let lit = assemble(problem, mode, AssembleForm::Free { structured: false, aligner: None })?;
    let sol_lit = sdp::solve(&lit)?;
    match sol_lit.status {
        SolveStatus::Infeasible => {
            return Err(Error::Infeasible(Some(format!("{mode:?} design problem"))))
        }
        SolveStatus::NumericalFailure => {
            return Err(Error::SolverFailure(
                "solver returned a point violating the pencil margins".into(),
            ))
        }
        SolveStatus::Optimal | SolveStatus::Feasible => {}
    }
    let objective = sol_lit.objective;
    let design_lmi_residual =
        lit.pencils[0].evaluate(&sol_lit.x).and_then(|m| max_eig_sym(&m))?;
    let design_p_s = sym_unpack(lit.layout.slice("p_s", &sol_lit.x)?, problem.dims().n)?;
    let design_p_min_eig = min_eig_sym(&design_p_s)?;
    let mut warnings = Vec::new();

    // Range-coupled certificate with exact gain recovery.
    let outcome = if problem.options.structured {
        certify_structured(problem, mode, &design_p_s, &mut warnings)
    } else {
        None
    };

    let (mut form, scale, aligner, lmi, mut sol) = match outcome {
        Some(o) => (CertificateForm::Structured, o.scale, Some(o.aligner), o.lmi, o.sol),
        None => (CertificateForm::Literal, 1.0, None, lit, sol_lit),
    };
    let cert_problem = scaled_problem(problem, scale);
    if form == CertificateForm::Structured && problem.options.shrink_gains {
        if let Some(m) = aligner.as_ref() {
            match shrink_gains(&cert_problem, mode, m, &sol) {
                Ok(Some(s2)) => sol = s2,
                Ok(None) => warnings.push(
                    "gain-envelope shrink did not produce a certificate; keeping the incumbent"
                        .into(),
                ),
                Err(e) => warnings.push(format!("gain-envelope shrink failed: {e}")),
            }
        }
    }
    let (mut ctrl, p_s, p_c) =
        recover_controllers_aligned(&cert_problem, &lmi.layout, &sol.x, aligner.as_ref())?;
    let max_resid = ctrl
        .recovery_residuals
        .iter()
        .map(|(a, b)| a.max(*b))
        .fold(0.0f64, f64::max);
    if max_resid > 1e-6 {
        warnings.push(format!(
            "recovery residual {max_resid:.3e} exceeds 1e-6; the recovered controller \
             deviates from the solved point"
        ));
    }
    let mut tau = lmi.layout.slice("tau", &sol.x)?.to_vec();
    let mut rho_sq = sol.x[lmi.layout.range("rho2")?.start];
    let mut gamma_hat = lmi.layout.slice("gamma", &sol.x)?.to_vec();
    let mut certified_objective = sol.objective;
    let mut lmi_residual = lmi.pencils[0].evaluate(&sol.x).and_then(|m| max_eig_sym(&m))?;
    let mut solution_x = sol.x.clone();
    let mut status = sol.status;

    // Frozen-Lyapunov repair of an inexact pseudo-inverse recovery.
    if form == CertificateForm::Literal
        && problem.options.refine
        && max_resid > problem.options.refine_threshold
    {
        let lmi2 = assemble(problem, mode, AssembleForm::FrozenP(FixedP { p_s: &p_s, p_c: &p_c }))?;
        match sdp::solve(&lmi2) {
            Ok(sol2) if matches!(sol2.status, SolveStatus::Optimal | SolveStatus::Feasible) => {
                ctrl = extract_refined_controller(problem, &lmi2.layout, &sol2.x)?;
                tau = lmi2.layout.slice("tau", &sol2.x)?.to_vec();
                rho_sq = sol2.x[lmi2.layout.range("rho2")?.start];
                gamma_hat = lmi2.layout.slice("gamma", &sol2.x)?.to_vec();
                lmi_residual =
                    lmi2.pencils[0].evaluate(&sol2.x).and_then(|m| max_eig_sym(&m))?;
                certified_objective = sol2.objective;
                solution_x = sol2.x;
                status = sol2.status;
                form = CertificateForm::FrozenP;
            }
            other => {
                let why = match other {
                    Ok(s) => format!("status {:?}", s.status),
                    Err(e) => format!("{e}"),
                };
                warnings.push(format!(
                    "frozen-Lyapunov refinement did not converge ({why}); returning the \
                     pseudo-inverse recovery with its residuals"
                ));
            }
        }
    }

    let tau_nl = *tau.last().ok_or_else(|| Error::Invalid("no multipliers".into()))?;
    let degrees = robustness_degrees(&gamma_hat, tau_nl)?;
    ctrl.robustness_degrees = degrees.clone();

    Ok(SynthesisResult {
        mode,
        controller: ctrl,
        p_s_bar: p_s,
        p_c,
        tau_roles: tau_roles(mode, problem.n_c),
        tau,
        rho_sq,
        rho: rho_sq.max(0.0).sqrt(),
        gamma_hat,
        robustness_degrees: degrees,
        objective,
        certified_objective,
        certified_bound_scale: scale,
        aligner,
        lmi_residual,
        design_lmi_residual,
        design_p_min_eig,
        certificate_form: form,
        status,
        solution_x,
        warnings,
    })
}

/// Full Lyapunov matrix `P = diag(I ⊗ p̄_s, P_c1, …, P_cN)`.
pub fn full_p(problem: &SynthesisProblem, p_s: &Matrix, p_c: &[Matrix]) -> Result<Matrix> {
    let d = problem.dims();
    let mut p = Matrix::zeros(d.s + d.c, d.s + d.c);
    p.view_mut((0, 0), (d.s, d.s)).copy_from(&kron(&eye(d.n_agents - 1), p_s)?);
    for (i, b) in p_c.iter().enumerate() {
        p.view_mut((d.s + i * d.n_c, d.s + i * d.n_c), (d.n_c, d.n_c)).copy_from(b);
    }
    Ok(p)
}

/// Algebraic certification report for a synthesis result.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerificationReport {
    /// Max eigenvalue of the solved grand pencil at the certified point.
    pub grand_max_eig: f64,
    /// Spectral abscissa of the nominal closed-loop matrix (must be < 0).
    pub spectral_abscissa: f64,
    /// Max eigenvalue of `A_ΦᵀP + PA_Φ + Q̃` with the recovered controller.
    pub lyapunov_max_eig: f64,
    /// Max eigenvalue of the pre-linearization block matrix rebuilt from the
    /// recovered controller (non-fragile mode only).
    pub omega_max_eig: Option<f64>,
    /// Relative mismatch between that matrix and the Schur-eliminated
    /// grand pencil (non-fragile mode only).
    pub schur_residual: Option<f64>,
    pub passed: bool,
    pub notes: Vec<String>,
}

/// Rebuild the pre-Schur block matrix of the dissipation condition from the
/// recovered controller and the certified multipliers.
fn build_omega(problem: &SynthesisProblem, result: &SynthesisResult) -> Result<Matrix> {
    let d = problem.dims();
    let chans = channels(problem, result.mode);
    let d_cl = d.s + d.c;
    let mut dims = vec![d_cl, d_cl];
    dims.extend(chans.iter().map(|c| c.dim));
    let mut off = Vec::new();
    let mut total = 0;
    for b in &dims {
        off.push(total);
        total += b;
    }
    let p = full_p(problem, &result.p_s_bar, &result.p_c)?;
    let a_phi = build_a_phi(&problem.reduced, &result.controller, &problem.mas)?;
    let cnorm = {
        let nrm = spectral_norm(&problem.reduced.c_r)?;
        if problem.options.conservative_norm_squared {
            nrm * nrm
        } else {
            nrm
        }
    };
    let mut omega = Matrix::zeros(total, total);
    // (1,1): A_ΦᵀP + PA_Φ + Q̃ + Δ + τ² ĤᵀΓ̂⁻¹Ĥ (using Γ = Γ̂/τ).
    let mut blk11 = a_phi.transpose() * &p + &p * &a_phi + problem.weights.q_tilde();
    let tau_nl = *result.tau.last().unwrap();
    for (ch, t) in chans.iter().zip(&result.tau) {
        match ch.delta {
            DeltaKind::Plant(delta) => {
                for i in 0..d.s {
                    blk11[(i, i)] += t * cnorm * delta * delta;
                }
            }
            DeltaKind::Ctrl(delta) => {
                for i in 0..d.c {
                    blk11[(d.s + i, d.s + i)] += t * delta * delta;
                }
            }
            DeltaKind::None => {}
        }
    }
    let mut gamma_inv = Matrix::zeros(d.gdim, d.gdim);
    let mut v_off = 0;
    for (g, v) in result.gamma_hat.iter().zip(&problem.gamma_blocks) {
        for i in 0..*v {
            gamma_inv[(v_off + i, v_off + i)] = 1.0 / g;
        }
        v_off += v;
    }
    let h_term = problem.h_hat.transpose() * &gamma_inv * &problem.h_hat * (tau_nl * tau_nl);
    add_block(&mut blk11, 0, 0, &h_term);
    add_block(&mut omega, 0, 0, &blk11);
    // Columns and diagonal blocks.
    let carrier_mat = |kind: ColKind| -> Matrix {
        match kind {
            ColKind::InputGain => {
                let g = &problem.reduced.l_hat_n * &problem.mas.global_b;
                let mut m = Matrix::zeros(d_cl, d.nm);
                m.view_mut((0, 0), (d.s, d.nm)).copy_from(&g);
                m
            }
            ColKind::CtrlState => {
                let mut m = Matrix::zeros(d_cl, d.c);
                m.view_mut((d.s, 0), (d.c, d.c)).copy_from(&eye(d.c));
                m
            }
            ColKind::PlantState => {
                let mut m = Matrix::zeros(d_cl, d.s);
                m.view_mut((0, 0), (d.s, d.s)).copy_from(&eye(d.s));
                m
            }
        }
    };
    add_sym(&mut omega, off[0], off[1], &p);
    for i in 0..d_cl {
        omega[(off[1] + i, off[1] + i)] -= result.rho_sq;
    }
    for ((ch, co), t) in chans.iter().zip(&off[2..]).enumerate().map(|(j, p)| (p, result.tau[j])) {
        let col = &p * carrier_mat(ch.kind);
        add_sym(&mut omega, off[0], *co, &col);
        for i in 0..ch.dim {
            omega[(*co + i, *co + i)] -= t;
        }
    }
    Ok(omega)
}

/// Certify a synthesis result: pencil residual, Hurwitz check, Lyapunov
/// inequality, and (non-fragile mode) the Schur cross-check against the
/// pre-linearization form.
pub fn verify_synthesis(
    problem: &SynthesisProblem,
    result: &SynthesisResult,
) -> Result<VerificationReport> {
    let mut notes = Vec::new();
    // Re-evaluate the grand pencil at the stored point, in the formulation
    // (and at the bound scale) the certificate was produced under.
    let cert_problem = scaled_problem(problem, result.certified_bound_scale);
    if result.certified_bound_scale < 1.0 {
        notes.push(format!(
            "certificate holds at perturbation-bound scale {:.3}, not the stated bounds",
            result.certified_bound_scale
        ));
    }
    let problem = &cert_problem;
    let lmi = match result.certificate_form {
        CertificateForm::FrozenP => assemble(
            problem,
            result.mode,
            AssembleForm::FrozenP(FixedP { p_s: &result.p_s_bar, p_c: &result.p_c }),
        )?,
        CertificateForm::FrozenK => {
            assemble(problem, result.mode, AssembleForm::FrozenK(&result.controller))?
        }
        CertificateForm::Structured => assemble(
            problem,
            result.mode,
            AssembleForm::Free { structured: true, aligner: result.aligner.as_ref() },
        )?,
        CertificateForm::Literal => {
            assemble(problem, result.mode, AssembleForm::Free { structured: false, aligner: None })?
        }
    };
    let grand_eval = lmi.pencils[0].evaluate(&result.solution_x)?;
    let grand_max_eig = max_eig_sym(&grand_eval)?;

    let a_phi = build_a_phi(&problem.reduced, &result.controller, &problem.mas)?;
    let abscissa = spectral_abscissa(&a_phi)?;
    let p = full_p(problem, &result.p_s_bar, &result.p_c)?;
    let lyap = a_phi.transpose() * &p + &p * &a_phi + problem.weights.q_tilde();
    let lyapunov_max_eig = max_eig_sym(&lyap)?;

    let (omega_max_eig, schur_residual) = if result.mode == SynthesisMode::Theorem1 {
        let omega = build_omega(problem, result)?;
        let omega_max = max_eig_sym(&omega)?;
        // Schur-eliminate the aggregated-bound block of the evaluated grand
        // pencil: the only off-diagonal entry in that block row is the
        // τ·Ĥ column against the closed-loop states.
        let keep = omega.nrows();
        let gdim = problem.dims().gdim;
        let mut schur = grand_eval.view((0, 0), (keep, keep)).clone_owned();
        let col = grand_eval.view((0, keep), (keep, gdim)).clone_owned();
        let gam = grand_eval.view((keep, keep), (gdim, gdim)).clone_owned();
        let corr = &col * pinv(&(-gam))? * col.transpose();
        add_block(&mut schur, 0, 0, &corr);
        // The grand pencil is Ω after elimination, up to the ε shift on the
        // eliminated rows; compare against the rebuilt Ω.
        let resid = (&schur - &omega).norm() / omega.norm().max(1.0);
        (Some(omega_max), Some(resid))
    } else {
        notes.push("pre-linearization cross-checks skipped: certain-controller mode has no perturbation block".into());
        (None, None)
    };

    let mut passed = grand_max_eig <= -problem.options.margin / 2.0
        && abscissa < 0.0
        && lyapunov_max_eig <= 1e-7;
    if let Some(om) = omega_max_eig {
        passed = passed && om < 0.0;
    }
    if let Some(sr) = schur_residual {
        // The ε shift itself perturbs the comparison at the margin scale.
        passed = passed && sr <= 1e-7 + problem.options.margin;
    }
    if grand_max_eig > -problem.options.margin / 2.0 {
        notes.push(format!(
            "grand pencil max eigenvalue {grand_max_eig:e} above -ε/2 = {:e}",
            -problem.options.margin / 2.0
        ));
    }
    if !result.warnings.is_empty() {
        notes.extend(result.warnings.iter().cloned());
    }
    Ok(VerificationReport {
        grand_max_eig,
        spectral_abscissa: abscissa,
        lyapunov_max_eig,
        omega_max_eig,
        schur_residual,
        passed,
        notes,
    })
}
