//! Bundled example: three single-link flexible-joint manipulators on a
//! directed cycle, with second-order output-feedback controllers.

use crate::matgraph::NetworkGraph;
use crate::model::{
    assemble_global, AgentModel, DesignWeights, MultiAgentSystem, Nonlinearity, PerturbationBounds,
};
use crate::{Matrix, Result};

/// Plant matrix of one manipulator (states: motor angle, motor velocity,
/// link angle, link velocity).
pub fn manipulator_a() -> Matrix {
    Matrix::from_row_slice(
        4,
        4,
        &[
            0.0, 1.0, 0.0, 0.0, //
            -48.6, -1.25, 48.6, 0.0, //
            0.0, 0.0, 0.0, 1.0, //
            19.5, 0.0, -19.5, 0.0,
        ],
    )
}

/// Input matrix (torque through the motor velocity channel).
pub fn manipulator_b() -> Matrix {
    Matrix::from_row_slice(4, 1, &[0.0, 21.6, 0.0, 0.0])
}

/// Output matrix: only the motor states are measured.
pub fn manipulator_c() -> Matrix {
    Matrix::from_row_slice(2, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0])
}

/// Gravity-torque bound amplitude.
pub const MANIPULATOR_ALPHA: f64 = 3.33;

/// Bound selector matrix: the nonlinearity depends on the link angle only.
pub fn manipulator_h_bar() -> Matrix {
    Matrix::from_row_slice(1, 4, &[0.0, 0.0, 1.0, 0.0])
}

/// Adjacency of the directed three-cycle (1 senses 2, 2 senses 3, 3 senses 1).
pub fn manipulator_adjacency() -> Matrix {
    Matrix::from_row_slice(3, 3, &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0])
}

/// One manipulator agent with the sinusoidal gravity nonlinearity.
pub fn manipulator_agent() -> Result<AgentModel<f64>> {
    AgentModel::new(
        manipulator_a(),
        manipulator_b(),
        manipulator_c(),
        manipulator_h_bar(),
        MANIPULATOR_ALPHA,
        Nonlinearity::SinGravity { amplitude: MANIPULATOR_ALPHA, angle_index: 2, target_index: 3 },
    )
}

/// The full three-manipulator network.
pub fn manipulator_system() -> Result<MultiAgentSystem<f64>> {
    let graph = NetworkGraph::from_adjacency(manipulator_adjacency())?;
    let agents = vec![manipulator_agent()?, manipulator_agent()?, manipulator_agent()?];
    assemble_global(agents, graph)
}

/// Controller order used throughout the example.
pub const MANIPULATOR_NC: usize = 2;

/// Perturbation norm bounds for the non-fragile design.
pub fn manipulator_bounds() -> PerturbationBounds<f64> {
    PerturbationBounds { delta_ac: 0.5, delta_bc: 0.2, delta_cc: 0.2, delta_dc: 0.2 }
}

/// Weighting matrices: unit weight on the reduced states, double weight on
/// the controller states.
pub fn manipulator_weights() -> Result<DesignWeights<f64>> {
    DesignWeights::uniform(1.0, 2.0, 4, MANIPULATOR_NC, 3)
}

/// Identity aggregated bound matrix over the reduced state.
pub fn manipulator_h_hat() -> Matrix {
    Matrix::identity(8, 8)
}

/// Block sizes `v_i` of the aggregated bound multiplier.
pub fn manipulator_gamma_blocks() -> Vec<usize> {
    vec![4, 4]
}

/// Complete synthesis problem for the bundled example.
pub fn manipulator_problem(
    options: crate::synthesis::SynthesisOptions,
) -> Result<crate::synthesis::SynthesisProblem> {
    crate::synthesis::SynthesisProblem::new(
        manipulator_system()?,
        manipulator_weights()?,
        manipulator_bounds(),
        manipulator_h_hat(),
        manipulator_gamma_blocks(),
        MANIPULATOR_NC,
        options,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_plant_entries() {
        assert_eq!(manipulator_a()[(1, 0)], -48.6);
        assert_eq!(manipulator_b()[(1, 0)], 21.6);
    }

    #[test]
    fn bundled_laplacian_matches_cycle() {
        let g = NetworkGraph::from_adjacency(manipulator_adjacency()).unwrap();
        let expected =
            Matrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, 0.0, 1.0, -1.0, -1.0, 0.0, 1.0]);
        assert_eq!(g.laplacian, expected);
    }
}
