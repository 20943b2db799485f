//! Run-configuration schema for the command-line pipeline: system
//! description, design mode, solver knobs and simulation setup, all in one
//! JSON document. Unknown fields are rejected to catch typos before any
//! computation starts.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::matgraph::{eye, NetworkGraph};
use crate::model::{
    assemble_global, AgentModel, DesignWeights, MultiAgentSystem, Nonlinearity, PerturbationBounds,
};
use crate::sim::{DisturbanceKind, DisturbanceSpec, InitialStates, Integrator, SimConfig};
use crate::synthesis::{SynthesisMode, SynthesisOptions, SynthesisProblem};
use crate::{Error, Matrix, Result};

/// Design mode selector; `Static` is the certain-controller design with a
/// zero-order (static output feedback) controller.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    Theorem1,
    Corollary1,
    Static,
}

impl RunMode {
    pub fn synthesis_mode(self) -> SynthesisMode {
        match self {
            RunMode::Theorem1 => SynthesisMode::Theorem1,
            RunMode::Corollary1 | RunMode::Static => SynthesisMode::Corollary1,
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "theorem1" => Ok(RunMode::Theorem1),
            "corollary1" => Ok(RunMode::Corollary1),
            "static" => Ok(RunMode::Static),
            other => Err(Error::Invalid(format!(
                "unknown mode {other:?}; expected theorem1, corollary1 or static"
            ))),
        }
    }
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    if rows.is_empty() {
        return Err(Error::Invalid(format!("{what}: empty matrix")));
    }
    let cols = rows[0].len();
    if cols == 0 || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Invalid(format!("{what}: ragged or empty rows")));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(Matrix::from_row_slice(rows.len(), cols, &flat))
}

/// Nonlinearity selector per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case", tag = "kind")]
pub enum NonlinearityConfig {
    None,
    SinGravity { amplitude: f64, angle_index: usize, target_index: usize },
}

impl NonlinearityConfig {
    fn build(&self) -> Nonlinearity<f64> {
        match self {
            NonlinearityConfig::None => Nonlinearity::None,
            NonlinearityConfig::SinGravity { amplitude, angle_index, target_index } => {
                Nonlinearity::SinGravity {
                    amplitude: *amplitude,
                    angle_index: *angle_index,
                    target_index: *target_index,
                }
            }
        }
    }
}

/// State/controller weighting; `uniform` scales identity blocks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "kebab-case")]
pub struct WeightsConfig {
    pub r_scale: f64,
    pub q_scale: f64,
}

/// Perturbation norm bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsConfig {
    pub delta_ac: f64,
    pub delta_bc: f64,
    pub delta_cc: f64,
    pub delta_dc: f64,
}

impl BoundsConfig {
    fn build(&self) -> PerturbationBounds<f64> {
        PerturbationBounds {
            delta_ac: self.delta_ac,
            delta_bc: self.delta_bc,
            delta_cc: self.delta_cc,
            delta_dc: self.delta_dc,
        }
    }
}

/// The plant network: shared `Ā`/`C̄`, per-agent `B_i`, adjacency, and the
/// nonlinearity bound data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct SystemConfig {
    pub a: Vec<Vec<f64>>,
    /// One input matrix per agent; a single entry is shared by all agents.
    pub b: Vec<Vec<Vec<f64>>>,
    pub c: Vec<Vec<f64>>,
    pub adjacency: Vec<Vec<f64>>,
    /// Per-agent nonlinearity gain bound; a single entry is shared.
    pub alpha_bar: Vec<f64>,
    /// Per-agent bound selector rows; a single entry is shared.
    pub h_bar: Vec<Vec<Vec<f64>>>,
    /// Per-agent nonlinearity; a single entry is shared.
    pub nonlinearity: Vec<NonlinearityConfig>,
    pub n_c: usize,
    pub weights: WeightsConfig,
    pub bounds: BoundsConfig,
    /// Aggregated bound matrix over the reduced state; defaults to identity.
    #[serde(default)]
    pub h_hat: Option<Vec<Vec<f64>>>,
    /// Aggregated multiplier block sizes; defaults to `n` per reduced agent.
    #[serde(default)]
    pub gamma_blocks: Option<Vec<usize>>,
}

fn pick<T: Clone>(list: &[T], i: usize, what: &str) -> Result<T> {
    match list.len() {
        1 => Ok(list[0].clone()),
        l if i < l => Ok(list[i].clone()),
        _ => Err(Error::Invalid(format!("{what}: expected 1 or n_agents entries"))),
    }
}

impl SystemConfig {
    pub fn build_system(&self) -> Result<MultiAgentSystem<f64>> {
        let adjacency = matrix_from_rows(&self.adjacency, "adjacency")?;
        let n_agents = adjacency.nrows();
        let a = matrix_from_rows(&self.a, "a")?;
        let c = matrix_from_rows(&self.c, "c")?;
        let mut agents = Vec::with_capacity(n_agents);
        for i in 0..n_agents {
            let b = matrix_from_rows(&pick(&self.b, i, "b")?, "b")?;
            let h = matrix_from_rows(&pick(&self.h_bar, i, "h_bar")?, "h_bar")?;
            let alpha = pick(&self.alpha_bar, i, "alpha_bar")?;
            let nl = pick(&self.nonlinearity, i, "nonlinearity")?;
            agents.push(AgentModel::new(a.clone(), b, c.clone(), h, alpha, nl.build())?);
        }
        let lap = crate::matgraph::laplacian(&adjacency)?;
        if !crate::matgraph::spectral_connectivity(&lap) {
            return Err(Error::Infeasible(Some(
                "graph not connected: the consensus reduction needs a spanning tree".into(),
            )));
        }
        let graph = NetworkGraph::from_adjacency(adjacency)?;
        assemble_global(agents, graph)
    }

    pub fn build_problem(
        &self,
        mode: RunMode,
        options: SynthesisOptions,
    ) -> Result<SynthesisProblem> {
        let mas = self.build_system()?;
        let n = mas.state_dim();
        let n_agents = mas.n_agents();
        let s = n * (n_agents - 1);
        let n_c = match mode {
            RunMode::Static => 0,
            _ => self.n_c,
        };
        let weights = DesignWeights::uniform(
            self.weights.r_scale,
            self.weights.q_scale,
            n,
            n_c,
            n_agents,
        )?;
        let h_hat = match &self.h_hat {
            Some(rows) => matrix_from_rows(rows, "h_hat")?,
            None => eye(s),
        };
        let gamma_blocks =
            self.gamma_blocks.clone().unwrap_or_else(|| vec![n; n_agents - 1]);
        SynthesisProblem::new(mas, weights, self.bounds.build(), h_hat, gamma_blocks, n_c, options)
    }
}

/// Simulation section of the run configuration; expands to a [`SimConfig`]
/// with the run seed and mode-dependent perturbation signals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case", default)]
pub struct SimSection {
    pub horizon: f64,
    pub dt: f64,
    pub disturbance: bool,
    pub disturbance_variance: f64,
    /// Apply the sinusoidal controller-gain perturbations (non-fragile mode
    /// only; certain-controller runs ignore this).
    pub perturbations: bool,
    pub identical_init: bool,
    pub init_amplitude: f64,
    pub integrator: Integrator,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            horizon: 20.0,
            // The certified non-fragile loop is moderately stiff; this step
            // keeps explicit RK4 well inside its stability region.
            dt: 1e-4,
            disturbance: true,
            disturbance_variance: 1.0,
            perturbations: true,
            identical_init: false,
            init_amplitude: 1.0,
            integrator: Integrator::Rk4,
        }
    }
}

impl SimSection {
    pub fn build(
        &self,
        mode: RunMode,
        system: &SystemConfig,
        seed: u64,
        n_agents: usize,
        q: usize,
        m: usize,
    ) -> SimConfig {
        let disturbance = if self.disturbance {
            DisturbanceSpec {
                kind: DisturbanceKind::GaussianWhite,
                variance: self.disturbance_variance,
                channels: None,
            }
        } else {
            DisturbanceSpec::none()
        };
        let n_c = match mode {
            RunMode::Static => 0,
            _ => system.n_c,
        };
        let perturbations = if self.perturbations && mode == RunMode::Theorem1 {
            Some(crate::sim::demo_perturbations(
                n_agents,
                n_c,
                q,
                m,
                system.bounds.build(),
            ))
        } else {
            None
        };
        SimConfig {
            horizon: self.horizon,
            dt: self.dt,
            initial_states: InitialStates::SeededUniform {
                amplitude: self.init_amplitude,
                identical: self.identical_init,
            },
            disturbance,
            perturbations,
            seed,
            integrator: self.integrator,
        }
    }
}

/// One complete run: system, mode, solver knobs, simulation setup, output
/// location and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "snake_case")]
pub struct RunConfig {
    pub system: SystemConfig,
    pub mode: RunMode,
    #[serde(default)]
    pub solver: SynthesisOptions,
    #[serde(default)]
    pub sim: SimSection,
    #[serde(default)]
    pub out_dir: Option<String>,
    #[serde(default)]
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Invalid(format!("config schema: {e}")))
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// The bundled manipulator example as a config document.
    pub fn bundled_demo(mode: RunMode) -> Self {
        let rows = |m: &Matrix| -> Vec<Vec<f64>> {
            (0..m.nrows()).map(|r| (0..m.ncols()).map(|c| m[(r, c)]).collect()).collect()
        };
        let b = crate::demo::manipulator_bounds();
        RunConfig {
            system: SystemConfig {
                a: rows(&crate::demo::manipulator_a()),
                b: vec![rows(&crate::demo::manipulator_b())],
                c: rows(&crate::demo::manipulator_c()),
                adjacency: rows(&crate::demo::manipulator_adjacency()),
                alpha_bar: vec![crate::demo::MANIPULATOR_ALPHA],
                h_bar: vec![rows(&crate::demo::manipulator_h_bar())],
                nonlinearity: vec![NonlinearityConfig::SinGravity {
                    amplitude: crate::demo::MANIPULATOR_ALPHA,
                    angle_index: 2,
                    target_index: 3,
                }],
                n_c: crate::demo::MANIPULATOR_NC,
                weights: WeightsConfig { r_scale: 1.0, q_scale: 2.0 },
                bounds: BoundsConfig {
                    delta_ac: b.delta_ac,
                    delta_bc: b.delta_bc,
                    delta_cc: b.delta_cc,
                    delta_dc: b.delta_dc,
                },
                h_hat: None,
                gamma_blocks: None,
            },
            mode,
            solver: SynthesisOptions::default(),
            sim: SimSection::default(),
            out_dir: None,
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_config_round_trips_and_builds() {
        let cfg = RunConfig::bundled_demo(RunMode::Theorem1);
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, cfg);
        let problem = back.system.build_problem(back.mode, back.solver.clone()).unwrap();
        assert_eq!(problem.n_c, 2);
        assert_eq!(problem.mas.n_agents(), 3);
        // The bundled reduced Laplacian data matches the direct construction.
        let mas = crate::demo::manipulator_system().unwrap();
        assert_eq!(problem.mas.graph.laplacian, mas.graph.laplacian);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let cfg = RunConfig::bundled_demo(RunMode::Corollary1);
        let mut v: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        v["definitely_a_typo"] = serde_json::json!(1);
        let err = RunConfig::from_json(&v.to_string()).unwrap_err();
        assert!(format!("{err}").contains("schema"));
        // Nested typo.
        let mut v2: serde_json::Value = serde_json::to_value(&cfg).unwrap();
        v2["sim"]["horizzon"] = serde_json::json!(10.0);
        assert!(RunConfig::from_json(&v2.to_string()).is_err());
    }

    #[test]
    fn static_mode_builds_a_zero_order_problem() {
        let cfg = RunConfig::bundled_demo(RunMode::Static);
        let problem = cfg.system.build_problem(cfg.mode, cfg.solver.clone()).unwrap();
        assert_eq!(problem.n_c, 0);
        assert_eq!(cfg.mode.synthesis_mode(), SynthesisMode::Corollary1);
    }

    #[test]
    fn disconnected_graph_is_rejected_with_a_diagnostic() {
        let mut cfg = RunConfig::bundled_demo(RunMode::Corollary1);
        cfg.system.adjacency = vec![
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
        ];
        let err = cfg.system.build_system().unwrap_err();
        assert!(format!("{err}").to_lowercase().contains("connect"), "{err}");
    }

    #[test]
    fn sim_section_honours_mode_and_flags() {
        let cfg = RunConfig::bundled_demo(RunMode::Theorem1);
        let sc = cfg.sim.build(RunMode::Theorem1, &cfg.system, 5, 3, 2, 1);
        assert!(sc.perturbations.is_some());
        assert_eq!(sc.seed, 5);
        let sc2 = cfg.sim.build(RunMode::Corollary1, &cfg.system, 5, 3, 2, 1);
        assert!(sc2.perturbations.is_none());
        let mut quiet = cfg.sim.clone();
        quiet.disturbance = false;
        let sc3 = quiet.build(RunMode::Theorem1, &cfg.system, 5, 3, 2, 1);
        assert_eq!(sc3.disturbance, DisturbanceSpec::none());
    }
}
