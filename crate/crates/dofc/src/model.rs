//! Agent dynamics, nonlinearity bounds, controller structure, perturbation
//! bounds and the global system assembly.

use crate::matgraph::{self, all_finite, kron, NetworkGraph};
use crate::{s, to_f64, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Per-agent nonlinearity `h_i(t, x_i)`.
///
/// Built-ins cover the common cases; `Custom` takes an arbitrary callable.
/// Every variant must vanish at `x = 0`.
#[derive(Clone)]
pub enum Nonlinearity<T: Scalar> {
    /// `h ≡ 0`.
    None,
    /// Sinusoidal gravity-style term: `h[target] = -amplitude * sin(x[angle])`.
    SinGravity {
        amplitude: T,
        angle_index: usize,
        target_index: usize,
    },
    Custom(Arc<dyn Fn(T, &DVector<T>) -> DVector<T> + Send + Sync>),
}

impl<T: Scalar> std::fmt::Debug for Nonlinearity<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Nonlinearity::None => write!(f, "None"),
            Nonlinearity::SinGravity { amplitude, angle_index, target_index } => write!(
                f,
                "SinGravity(amplitude={:?}, angle_index={angle_index}, target_index={target_index})",
                amplitude
            ),
            Nonlinearity::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl<T: Scalar> Nonlinearity<T> {
    pub fn eval(&self, t: T, x: &DVector<T>) -> DVector<T> {
        match self {
            Nonlinearity::None => DVector::zeros(x.len()),
            Nonlinearity::SinGravity { amplitude, angle_index, target_index } => {
                let mut h = DVector::zeros(x.len());
                h[*target_index] = -*amplitude * x[*angle_index].sin();
                h
            }
            Nonlinearity::Custom(f) => f(t, x),
        }
    }
}

/// One agent's dynamics and nonlinearity bound data.
#[derive(Debug, Clone)]
pub struct AgentModel<T: Scalar> {
    pub a_bar: DMatrix<T>,
    pub b: DMatrix<T>,
    pub c_bar: DMatrix<T>,
    pub h_bar: DMatrix<T>,
    pub alpha_bar: T,
    pub nonlinearity: Nonlinearity<T>,
}

impl<T: Scalar> AgentModel<T> {
    pub fn new(
        a_bar: DMatrix<T>,
        b: DMatrix<T>,
        c_bar: DMatrix<T>,
        h_bar: DMatrix<T>,
        alpha_bar: T,
        nonlinearity: Nonlinearity<T>,
    ) -> Result<Self> {
        let n = a_bar.nrows();
        if a_bar.ncols() != n {
            return Err(Error::Dimension("state matrix must be square".into()));
        }
        if b.nrows() != n {
            return Err(Error::Dimension("input matrix row count must equal state dimension".into()));
        }
        if c_bar.ncols() != n {
            return Err(Error::Dimension("output matrix column count must equal state dimension".into()));
        }
        if h_bar.ncols() != n {
            return Err(Error::Dimension("bound matrix column count must equal state dimension".into()));
        }
        for m in [&a_bar, &b, &c_bar, &h_bar] {
            if !all_finite(m) {
                return Err(Error::Invalid("agent matrix has non-finite entries".into()));
            }
        }
        if alpha_bar <= T::zero() {
            return Err(Error::Invalid("alpha_bar must be positive".into()));
        }
        let h0 = nonlinearity.eval(T::zero(), &DVector::zeros(n));
        if to_f64(h0.norm()) != 0.0 {
            return Err(Error::Invalid("nonlinearity must vanish at x = 0".into()));
        }
        Ok(Self { a_bar, b, c_bar, h_bar, alpha_bar, nonlinearity })
    }

    pub fn state_dim(&self) -> usize {
        self.a_bar.nrows()
    }
    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }
    pub fn output_dim(&self) -> usize {
        self.c_bar.nrows()
    }
}

/// Whole-network plant: shared state/output matrices lifted to global scale,
/// block-diagonal input matrix.
#[derive(Debug, Clone)]
pub struct MultiAgentSystem<T: Scalar> {
    pub agents: Vec<AgentModel<T>>,
    pub graph: NetworkGraph<T>,
    pub global_a: DMatrix<T>,
    pub global_b: DMatrix<T>,
    pub global_c: DMatrix<T>,
    /// Rank-test advisories collected at assembly time (not errors).
    pub warnings: Vec<String>,
}

impl<T: Scalar> MultiAgentSystem<T> {
    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }
    pub fn state_dim(&self) -> usize {
        self.agents[0].state_dim()
    }
    pub fn input_dim(&self) -> usize {
        self.agents[0].input_dim()
    }
    pub fn output_dim(&self) -> usize {
        self.agents[0].output_dim()
    }
}

/// Build the global plant from per-agent models and a graph.
///
/// All agents must share the state and output matrices; only the input
/// matrix may differ. Controllability/observability rank failures are
/// reported as warnings, not errors.
pub fn assemble_global<T: Scalar>(
    agents: Vec<AgentModel<T>>,
    graph: NetworkGraph<T>,
) -> Result<MultiAgentSystem<T>> {
    let n_agents = agents.len();
    if n_agents == 0 {
        return Err(Error::Invalid("at least one agent required".into()));
    }
    if graph.n_agents != n_agents {
        return Err(Error::Dimension(format!(
            "graph has {} nodes but {} agents given",
            graph.n_agents, n_agents
        )));
    }
    let n = agents[0].state_dim();
    let m = agents[0].input_dim();
    let q = agents[0].output_dim();
    for (i, a) in agents.iter().enumerate() {
        if a.state_dim() != n || a.input_dim() != m || a.output_dim() != q {
            return Err(Error::Dimension(format!("agent {i} dimensions differ from agent 0")));
        }
        if a.a_bar != agents[0].a_bar || a.c_bar != agents[0].c_bar {
            return Err(Error::Invalid(format!(
                "agent {i} must share the state and output matrices with agent 0"
            )));
        }
    }
    let mut warnings = Vec::new();
    for (i, a) in agents.iter().enumerate() {
        if !controllable(&a.a_bar, &a.b)? {
            warnings.push(format!("agent {i}: (A, B) controllability rank test failed"));
        }
        if !observable(&a.a_bar, &a.c_bar)? {
            warnings.push(format!("agent {i}: (A, C) observability rank test failed"));
        }
    }
    let i_n = DMatrix::identity(n_agents, n_agents);
    let global_a = kron(&i_n, &agents[0].a_bar)?;
    let global_c = kron(&i_n, &agents[0].c_bar)?;
    let mut global_b = DMatrix::zeros(n_agents * n, n_agents * m);
    for (i, a) in agents.iter().enumerate() {
        global_b.view_mut((i * n, i * m), (n, m)).copy_from(&a.b);
    }
    Ok(MultiAgentSystem { agents, graph, global_a, global_b, global_c, warnings })
}

fn controllable<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<bool> {
    let n = a.nrows();
    let mut cols = b.clone();
    let mut stack = b.clone();
    for _ in 1..n {
        cols = a * cols;
        stack = DMatrix::from_columns(
            &stack.column_iter().chain(cols.column_iter()).map(|c| c.into_owned()).collect::<Vec<_>>(),
        );
    }
    Ok(matgraph::rank(&stack, 1e-9)? == n)
}

fn observable<T: Scalar>(a: &DMatrix<T>, c: &DMatrix<T>) -> Result<bool> {
    controllable(&a.transpose(), &c.transpose())
}

/// Aggregated nonlinearity bound data.
#[derive(Debug, Clone)]
pub struct NonlinearityBound<T: Scalar> {
    /// Per-block matrices `H_i` entering the aggregated bound.
    pub per_agent_h: Vec<DMatrix<T>>,
    /// Multipliers `γ_li > 0`.
    pub gamma: Vec<T>,
    /// Lower-level multipliers `γ̄_li = ᾱ_i⁻²`.
    pub gamma_bar: Vec<T>,
    /// Block-diagonal aggregation of the `H_i`.
    pub aggregated_h_hat: DMatrix<T>,
}

impl<T: Scalar> NonlinearityBound<T> {
    pub fn new(per_agent_h: Vec<DMatrix<T>>, gamma: Vec<T>, gamma_bar: Vec<T>) -> Result<Self> {
        if gamma.iter().any(|g| *g <= T::zero()) {
            return Err(Error::Invalid("gamma multipliers must be positive".into()));
        }
        let rows: usize = per_agent_h.iter().map(|h| h.nrows()).sum();
        let cols: usize = per_agent_h.iter().map(|h| h.ncols()).sum();
        let mut h_hat = DMatrix::zeros(rows, cols);
        let (mut r, mut c) = (0, 0);
        for h in &per_agent_h {
            h_hat.view_mut((r, c), (h.nrows(), h.ncols())).copy_from(h);
            r += h.nrows();
            c += h.ncols();
        }
        Ok(Self { per_agent_h, gamma, gamma_bar, aggregated_h_hat: h_hat })
    }
}

/// Evaluate the aggregation sufficient condition
/// `λ_max(H̄ᵀH̄) · min γ̄_li ≤ max γ_li · min λ_min(H_iᵀH_i)`.
pub fn check_aggregation_condition<T: Scalar>(
    bound: &NonlinearityBound<T>,
    h_bar_stack: &DMatrix<T>,
) -> Result<bool> {
    let lhs_eig = matgraph::max_eig_sym(&(h_bar_stack.transpose() * h_bar_stack))?;
    let min_gamma_bar = bound
        .gamma_bar
        .iter()
        .copied()
        .fold(s::<T>(f64::INFINITY), |m, g| if g < m { g } else { m });
    let max_gamma = bound
        .gamma
        .iter()
        .copied()
        .fold(s::<T>(f64::NEG_INFINITY), |m, g| if g > m { g } else { m });
    let mut min_eig = s::<T>(f64::INFINITY);
    for h in &bound.per_agent_h {
        let e = matgraph::min_eig_sym(&(h.transpose() * h))?;
        if e < min_eig {
            min_eig = e;
        }
    }
    Ok(lhs_eig * min_gamma_bar <= max_gamma * min_eig)
}

/// One agent's controller blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentController<T: Scalar> {
    pub a_c: DMatrix<T>,
    pub b_c: DMatrix<T>,
    pub c_c: DMatrix<T>,
    pub d_c: DMatrix<T>,
}

/// Decentralized dynamic output-feedback controller: per-agent blocks of the
/// implied global block-diagonal realization, plus recovery diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRealization<T: Scalar> {
    pub order: usize,
    pub agents: Vec<AgentController<T>>,
    /// Relative residuals of the pseudo-inverse recovery, per agent:
    /// `(residual for C_c, residual for D_c)`.
    pub recovery_residuals: Vec<(T, T)>,
    /// Certified tolerable nonlinearity gains, one per reduced block.
    pub robustness_degrees: Vec<T>,
}

impl<T: Scalar> ControllerRealization<T> {
    /// All-zero controller of a given order (useful as a neutral element).
    pub fn zero(n_agents: usize, order: usize, m: usize, q: usize) -> Self {
        let blk = AgentController {
            a_c: DMatrix::zeros(order, order),
            b_c: DMatrix::zeros(order, q),
            c_c: DMatrix::zeros(m, order),
            d_c: DMatrix::zeros(m, q),
        };
        Self {
            order,
            agents: vec![blk; n_agents],
            recovery_residuals: vec![(T::zero(), T::zero()); n_agents],
            robustness_degrees: Vec::new(),
        }
    }

    pub fn n_agents(&self) -> usize {
        self.agents.len()
    }

    /// Global block-diagonal matrices `(A_c, B_c, C_c, D_c)`.
    pub fn global_blocks(&self) -> (DMatrix<T>, DMatrix<T>, DMatrix<T>, DMatrix<T>) {
        let n_agents = self.agents.len();
        let nc = self.order;
        let q = self.agents[0].b_c.ncols();
        let m = self.agents[0].c_c.nrows();
        let mut a = DMatrix::zeros(n_agents * nc, n_agents * nc);
        let mut b = DMatrix::zeros(n_agents * nc, n_agents * q);
        let mut c = DMatrix::zeros(n_agents * m, n_agents * nc);
        let mut d = DMatrix::zeros(n_agents * m, n_agents * q);
        for (i, blk) in self.agents.iter().enumerate() {
            a.view_mut((i * nc, i * nc), (nc, nc)).copy_from(&blk.a_c);
            b.view_mut((i * nc, i * q), (nc, q)).copy_from(&blk.b_c);
            c.view_mut((i * m, i * nc), (m, nc)).copy_from(&blk.c_c);
            d.view_mut((i * m, i * q), (m, q)).copy_from(&blk.d_c);
        }
        (a, b, c, d)
    }
}

/// Norm bounds on the controller implementation perturbations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBounds<T: Scalar> {
    pub delta_ac: T,
    pub delta_bc: T,
    pub delta_cc: T,
    pub delta_dc: T,
}

impl<T: Scalar> PerturbationBounds<T> {
    pub fn zero() -> Self {
        Self { delta_ac: T::zero(), delta_bc: T::zero(), delta_cc: T::zero(), delta_dc: T::zero() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("delta_ac", self.delta_ac),
            ("delta_bc", self.delta_bc),
            ("delta_cc", self.delta_cc),
            ("delta_dc", self.delta_dc),
        ] {
            if v < T::zero() || !to_f64(v).is_finite() {
                return Err(Error::Invalid(format!("{name} must be a nonnegative finite number")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.delta_ac == T::zero()
            && self.delta_bc == T::zero()
            && self.delta_cc == T::zero()
            && self.delta_dc == T::zero()
    }
}

/// Synthesis weighting matrices: `N-1` state blocks and `N` controller blocks,
/// each symmetric positive definite.
#[derive(Debug, Clone)]
pub struct DesignWeights<T: Scalar> {
    pub r: Vec<DMatrix<T>>,
    pub q: Vec<DMatrix<T>>,
}

impl<T: Scalar> DesignWeights<T> {
    pub fn new(r: Vec<DMatrix<T>>, q: Vec<DMatrix<T>>) -> Result<Self> {
        for (name, blocks) in [("r", &r), ("q", &q)] {
            for (i, b) in blocks.iter().enumerate() {
                if b.nrows() != b.ncols() {
                    return Err(Error::Dimension(format!("weight {name}[{i}] must be square")));
                }
                if !b.is_empty() {
                    let min_eig = matgraph::min_eig_sym(b)?;
                    if min_eig <= T::zero() {
                        return Err(Error::NotPositiveDefinite(format!(
                            "weight {name}[{i}] has minimum eigenvalue {:?}",
                            min_eig
                        )));
                    }
                }
            }
        }
        Ok(Self { r, q })
    }

    /// Scalar-times-identity shorthand.
    pub fn uniform(
        r_scale: T,
        q_scale: T,
        n: usize,
        n_c: usize,
        n_agents: usize,
    ) -> Result<Self> {
        if r_scale <= T::zero() || q_scale <= T::zero() {
            return Err(Error::Invalid("weight scales must be positive".into()));
        }
        let r = vec![DMatrix::identity(n, n) * r_scale; n_agents - 1];
        let q = vec![DMatrix::identity(n_c, n_c) * q_scale; n_agents];
        Self::new(r, q)
    }

    /// Block-diagonal `Q̃ = diag(R, Q)`.
    pub fn q_tilde(&self) -> DMatrix<T> {
        let dim_r: usize = self.r.iter().map(|b| b.nrows()).sum();
        let dim_q: usize = self.q.iter().map(|b| b.nrows()).sum();
        let mut out = DMatrix::zeros(dim_r + dim_q, dim_r + dim_q);
        let mut o = 0;
        for b in self.r.iter().chain(self.q.iter()) {
            out.view_mut((o, o), (b.nrows(), b.nrows())).copy_from(b);
            o += b.nrows();
        }
        out
    }
}

/// Result of sampling-based verification of the quadratic nonlinearity bound.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReport<T> {
    pub samples_checked: usize,
    pub violations: usize,
    /// Largest observed `hᵀh / (ᾱ² xᵀH̄ᵀH̄x)`; ≤ 1 when the bound holds.
    pub max_violation_ratio: T,
}

/// Check `hᵀh ≤ ᾱ² xᵀH̄ᵀH̄x` on the given samples.
pub fn check_quadratic_bound<T: Scalar>(
    agent: &AgentModel<T>,
    samples: &[(T, DVector<T>)],
) -> Result<BoundReport<T>> {
    let hth = agent.h_bar.transpose() * &agent.h_bar;
    let alpha2 = agent.alpha_bar * agent.alpha_bar;
    let mut violations = 0usize;
    let mut max_ratio = T::zero();
    for (t, x) in samples {
        if !x.iter().all(|v| to_f64(*v).is_finite()) {
            return Err(Error::Invalid("sample state has non-finite entries".into()));
        }
        let h = agent.nonlinearity.eval(*t, x);
        let num = h.dot(&h);
        let den = alpha2 * x.dot(&(&hth * x));
        let ratio = if to_f64(den) > 0.0 {
            num / den
        } else if to_f64(num) <= f64::EPSILON {
            T::zero()
        } else {
            s(f64::INFINITY)
        };
        if ratio > max_ratio {
            max_ratio = ratio;
        }
        if to_f64(ratio) > 1.0 + 1e-12 {
            violations += 1;
        }
    }
    Ok(BoundReport { samples_checked: samples.len(), violations, max_violation_ratio: max_ratio })
}

/// Seeded uniform samples `(t, x)` in `[-range, range]^n`, `t` in `[0, 1]`.
pub fn sample_states<T: Scalar>(
    n: usize,
    count: usize,
    range: f64,
    seed: u64,
) -> Vec<(T, DVector<T>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let t = s(rng.gen_range(0.0..1.0));
            let x = DVector::from_fn(n, |_, _| s(rng.gen_range(-range..range)));
            (t, x)
        })
        .collect()
}
