//! Consensus-to-stabilization transformation: reduced coordinates
//! `x_r = L̂_n x`, the reduced plant matrices, the nominal/uncertain split of
//! the closed loop, and the commutation identities the reduction relies on.

use crate::matgraph::{eye, kron, pinv, spectral_connectivity};
use crate::model::{ControllerRealization, MultiAgentSystem, PerturbationBounds};
use crate::{s, to_f64, Error, Result, Scalar};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Laplacian-reduced plant data.
#[derive(Debug, Clone)]
pub struct ReducedSystem<T: Scalar> {
    /// `A_r = I_{N-1} ⊗ Ā`.
    pub a_r: DMatrix<T>,
    /// `C_r = C L_n L̂_n†`.
    pub c_r: DMatrix<T>,
    /// `L̂_n = L̂ ⊗ I_n`.
    pub l_hat_n: DMatrix<T>,
    /// `L_n = L ⊗ I_n`.
    pub l_n: DMatrix<T>,
    /// `L_q = L ⊗ I_q`.
    pub l_q: DMatrix<T>,
    /// Reduced Laplacian `L̂`.
    pub l_hat: DMatrix<T>,
}

/// Build the reduced system and verify the defining identity
/// `C_r L̂_n x = C L_n x` on random vectors before returning.
pub fn build_reduced<T: Scalar>(mas: &MultiAgentSystem<T>) -> Result<ReducedSystem<T>> {
    if !spectral_connectivity(&mas.graph.laplacian) {
        return Err(Error::Disconnected);
    }
    let n = mas.state_dim();
    let q = mas.output_dim();
    let n_agents = mas.n_agents();
    let l_hat = mas.graph.reduced_laplacian.clone();
    let a_r = kron(&eye(n_agents - 1), &mas.agents[0].a_bar)?;
    let l_hat_n = kron(&l_hat, &eye(n))?;
    let l_n = kron(&mas.graph.laplacian, &eye(n))?;
    let l_q = kron(&mas.graph.laplacian, &eye(q))?;
    // Kronecker structure of the lift: L̂_n† = L̂† ⊗ I_n.
    let l_hat_dagger_n = kron(&pinv(&l_hat)?, &eye(n))?;
    let c_r = &mas.global_c * &l_n * &l_hat_dagger_n;

    // Executable form of the defining identity, on 16 seeded random vectors.
    let mut rng = ChaCha8Rng::seed_from_u64(0x1dee);
    let scale = to_f64((&mas.global_c * &l_n).norm()).max(1.0);
    for _ in 0..16 {
        let x: DVector<T> = DVector::from_fn(n_agents * n, |_, _| s(rng.gen_range(-1.0..1.0)));
        let lhs = &c_r * (&l_hat_n * &x);
        let rhs = &mas.global_c * (&l_n * &x);
        let resid = to_f64((lhs - rhs).norm()) / scale;
        if resid > 1e-8 {
            return Err(Error::Invalid(format!(
                "reduced output identity C_r L̂_n x = C L_n x failed: residual {resid:e}"
            )));
        }
    }
    Ok(ReducedSystem { a_r, c_r, l_hat_n, l_n, l_q, l_hat })
}

/// Residual of the first commutation identity `L_q C = C L_n`
/// (relative Frobenius norm; zero in exact arithmetic).
pub fn verify_lemma1<T: Scalar>(mas: &MultiAgentSystem<T>) -> Result<T> {
    let n = mas.state_dim();
    let q = mas.output_dim();
    let l_q = kron(&mas.graph.laplacian, &eye(q))?;
    let l_n = kron(&mas.graph.laplacian, &eye(n))?;
    let lhs = &l_q * &mas.global_c;
    let rhs = &mas.global_c * &l_n;
    relative_residual(&lhs, &rhs)
}

/// Residual of the second commutation identity `L_n A = A L_n`.
pub fn verify_lemma2<T: Scalar>(mas: &MultiAgentSystem<T>) -> Result<T> {
    let n = mas.state_dim();
    let l_n = kron(&mas.graph.laplacian, &eye(n))?;
    let lhs = &l_n * &mas.global_a;
    let rhs = &mas.global_a * &l_n;
    relative_residual(&lhs, &rhs)
}

fn relative_residual<T: Scalar>(lhs: &DMatrix<T>, rhs: &DMatrix<T>) -> Result<T> {
    let scale = to_f64(rhs.norm()).max(1.0);
    Ok(s(to_f64((lhs - rhs).norm()) / scale))
}

/// Nominal closed-loop matrix in reduced coordinates:
///
/// ```text
/// A_Φ = [ A_r + L̂_n B D_c C_r   L̂_n B C_c ]
///       [ B_c C_r                A_c       ]
/// ```
pub fn build_a_phi<T: Scalar>(
    reduced: &ReducedSystem<T>,
    ctrl: &ControllerRealization<T>,
    mas: &MultiAgentSystem<T>,
) -> Result<DMatrix<T>> {
    let n_agents = mas.n_agents();
    if ctrl.n_agents() != n_agents {
        return Err(Error::Dimension("controller agent count differs from plant".into()));
    }
    let nc = ctrl.order;
    let m = mas.input_dim();
    let q = mas.output_dim();
    for (i, blk) in ctrl.agents.iter().enumerate() {
        if blk.c_c.nrows() != m || blk.b_c.ncols() != q || blk.a_c.nrows() != nc {
            return Err(Error::Dimension(format!("controller block {i} has inconsistent dimensions")));
        }
    }
    let s1 = reduced.a_r.nrows();
    let s2 = n_agents * nc;
    let (a_c, b_c, c_c, d_c) = ctrl.global_blocks();
    let lb = &reduced.l_hat_n * &mas.global_b;
    let mut out = DMatrix::zeros(s1 + s2, s1 + s2);
    out.view_mut((0, 0), (s1, s1))
        .copy_from(&(&reduced.a_r + &lb * &d_c * &reduced.c_r));
    out.view_mut((0, s1), (s1, s2)).copy_from(&(&lb * &c_c));
    out.view_mut((s1, 0), (s2, s1)).copy_from(&(&b_c * &reduced.c_r));
    out.view_mut((s1, s1), (s2, s2)).copy_from(&a_c);
    Ok(out)
}

/// The uncertain part of the closed loop is never formed explicitly; only the
/// data entering its norm bound is needed.
#[derive(Debug, Clone)]
pub struct ClosedLoopSplit<T: Scalar> {
    pub a_phi: DMatrix<T>,
    /// Spectral norm of `C_r` entering the uncertainty bound.
    pub c_r_norm: T,
    pub bounds: PerturbationBounds<T>,
}

pub fn build_split<T: Scalar>(
    reduced: &ReducedSystem<T>,
    ctrl: &ControllerRealization<T>,
    mas: &MultiAgentSystem<T>,
    bounds: PerturbationBounds<T>,
) -> Result<ClosedLoopSplit<T>> {
    Ok(ClosedLoopSplit {
        a_phi: build_a_phi(reduced, ctrl, mas)?,
        c_r_norm: crate::matgraph::spectral_norm(&reduced.c_r)?,
        bounds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matgraph::NetworkGraph;
    use crate::model::{assemble_global, AgentModel, Nonlinearity};
    use crate::Matrix;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    fn random_mas(seed: u64, n_agents: usize, n: usize, m: usize, q: usize) -> MultiAgentSystem<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a_bar = Matrix::from_fn(n, n, |_, _| rng.gen_range(-1.0..1.0));
        let c_bar = Matrix::from_fn(q, n, |_, _| rng.gen_range(-1.0..1.0));
        let agents: Vec<_> = (0..n_agents)
            .map(|_| {
                let b = Matrix::from_fn(n, m, |_, _| rng.gen_range(-1.0..1.0));
                AgentModel::new(
                    a_bar.clone(),
                    b,
                    c_bar.clone(),
                    Matrix::zeros(1, n),
                    1.0,
                    Nonlinearity::None,
                )
                .unwrap()
            })
            .collect();
        // Ring topology keeps the graph connected for any N.
        let mut adj = Matrix::zeros(n_agents, n_agents);
        if n_agents > 1 {
            for i in 0..n_agents {
                adj[(i, (i + 1) % n_agents)] = 1.0;
            }
        }
        let graph = NetworkGraph::from_adjacency(adj).unwrap();
        assemble_global(agents, graph).unwrap()
    }

    #[test]
    fn reduced_dims_manipulator() {
        let mas = crate::demo::manipulator_system().unwrap();
        let red = build_reduced(&mas).unwrap();
        assert_eq!(red.c_r.shape(), (6, 8));
        assert_eq!(red.a_r.shape(), (8, 8));
        assert_eq!(red.l_q.shape(), (6, 6));
        assert_eq!(red.l_q, kron(&mas.graph.laplacian, &eye(2)).unwrap());
    }

    #[test]
    fn identity_output_two_agents() {
        // With C̄ = I the reduced output map satisfies C_r L̂_n = L_n.
        let n = 3;
        let agents: Vec<_> = (0..2)
            .map(|_| {
                AgentModel::new(
                    Matrix::identity(n, n) * -1.0,
                    Matrix::from_element(n, 1, 1.0),
                    Matrix::identity(n, n),
                    Matrix::zeros(1, n),
                    1.0,
                    Nonlinearity::None,
                )
                .unwrap()
            })
            .collect();
        let graph = NetworkGraph::from_adjacency(mat(&[&[0., 1.], &[1., 0.]])).unwrap();
        let mas = assemble_global(agents, graph).unwrap();
        let red = build_reduced(&mas).unwrap();
        let lhs = &red.c_r * &red.l_hat_n;
        assert!((lhs - &red.l_n).norm() < 1e-12);
    }

    #[test]
    fn lemma_residuals_manipulator_zero() {
        let mas = crate::demo::manipulator_system().unwrap();
        assert!(verify_lemma1(&mas).unwrap() <= 1e-12);
        assert!(verify_lemma2(&mas).unwrap() <= 1e-12);
    }

    #[test]
    fn lemma_residuals_random_instances() {
        for seed in 0..20 {
            let mas = random_mas(seed, 4, 5, 2, 3);
            assert!(verify_lemma1(&mas).unwrap() <= 1e-12);
            assert!(verify_lemma2(&mas).unwrap() <= 1e-12);
        }
    }

    #[test]
    fn lemma_residuals_trivial_cases() {
        // Single agent: L = 0, both identities are 0 = 0.
        let mas = random_mas(3, 1, 3, 1, 2);
        assert_eq!(verify_lemma1(&mas).unwrap(), 0.0);
        assert_eq!(verify_lemma2(&mas).unwrap(), 0.0);
    }

    #[test]
    fn consensus_subspace_is_kernel_of_l_hat_n() {
        let mas = random_mas(11, 4, 3, 1, 2);
        let red = build_reduced(&mas).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Consensus vectors are annihilated...
        let v = nalgebra::DVector::from_fn(3, |_, _| rng.gen_range(-1.0..1.0));
        let ones = nalgebra::DVector::from_element(4, 1.0);
        let x = kron(&Matrix::from_column_slice(4, 1, ones.as_slice()), &Matrix::from_column_slice(3, 1, v.as_slice())).unwrap();
        let x = nalgebra::DVector::from_column_slice(x.as_slice());
        assert!((&red.l_hat_n * &x).norm() < 1e-12);
        // ...and generic vectors are not.
        for _ in 0..8 {
            let y = nalgebra::DVector::from_fn(12, |_, _| rng.gen_range(-1.0..1.0));
            assert!((&red.l_hat_n * &y).norm() > 1e-6);
        }
    }

    #[test]
    fn zero_controller_a_phi_block_diagonal() {
        let mas = crate::demo::manipulator_system().unwrap();
        let red = build_reduced(&mas).unwrap();
        let ctrl = ControllerRealization::zero(3, 1, 1, 2);
        let a_phi = build_a_phi(&red, &ctrl, &mas).unwrap();
        assert_eq!(a_phi.view((0, 0), (8, 8)).clone_owned(), red.a_r);
        assert!(a_phi.view((0, 8), (8, 3)).iter().all(|x| *x == 0.0));
        assert!(a_phi.view((8, 0), (3, 8)).iter().all(|x| *x == 0.0));
        assert!(a_phi.view((8, 8), (3, 3)).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn a_phi_matches_change_of_basis_oracle() {
        // Brute-force: assemble the unreduced nominal closed loop of the
        // lifted system, then transform with T = [L̂_n 0; 0 I] and its
        // pseudo-inverse lift; spectra must agree on the reduced part.
        let mas = random_mas(21, 2, 2, 1, 2);
        let red = build_reduced(&mas).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let nc = 2;
        let mut ctrl = ControllerRealization::zero(2, nc, 1, 2);
        for blk in &mut ctrl.agents {
            blk.a_c = Matrix::from_fn(nc, nc, |_, _| rng.gen_range(-1.0..0.0));
            blk.b_c = Matrix::from_fn(nc, 2, |_, _| rng.gen_range(-0.5..0.5));
            blk.c_c = Matrix::from_fn(1, nc, |_, _| rng.gen_range(-0.5..0.5));
            blk.d_c = Matrix::from_fn(1, 2, |_, _| rng.gen_range(-0.5..0.5));
        }
        let a_phi = build_a_phi(&red, &ctrl, &mas).unwrap();

        // Unreduced closed loop (nominal part of the augmented system).
        let (a_c, b_c, c_c, d_c) = ctrl.global_blocks();
        let nq = mas.n_agents() * mas.output_dim();
        let _ = nq;
        let l_q = &red.l_q;
        let top_left = &mas.global_a + &mas.global_b * &d_c * l_q * &mas.global_c;
        let top_right = &mas.global_b * &c_c;
        let bot_left = &b_c * l_q * &mas.global_c;
        let (sx, sc) = (top_left.nrows(), a_c.nrows());
        let mut a_cl = DMatrix::zeros(sx + sc, sx + sc);
        a_cl.view_mut((0, 0), (sx, sx)).copy_from(&top_left);
        a_cl.view_mut((0, sx), (sx, sc)).copy_from(&top_right);
        a_cl.view_mut((sx, 0), (sc, sx)).copy_from(&bot_left);
        a_cl.view_mut((sx, sx), (sc, sc)).copy_from(&a_c);

        // Reduce: x_r = L̂_n x. A_Φ = T A_cl T† with
        // T = diag(L̂_n, I), T† = diag(L̂_n†, I).
        let l_hat_dag = kron(&pinv(&red.l_hat).unwrap(), &eye(mas.state_dim())).unwrap();
        let s1 = red.a_r.nrows();
        let mut t = DMatrix::zeros(s1 + sc, sx + sc);
        t.view_mut((0, 0), (s1, sx)).copy_from(&red.l_hat_n);
        t.view_mut((s1, sx), (sc, sc)).copy_from(&eye(sc));
        let mut t_dag = DMatrix::zeros(sx + sc, s1 + sc);
        t_dag.view_mut((0, 0), (sx, s1)).copy_from(&l_hat_dag);
        t_dag.view_mut((sx, s1), (sc, sc)).copy_from(&eye(sc));
        let reduced_oracle = &t * &a_cl * &t_dag;
        assert!(
            (&reduced_oracle - &a_phi).norm() < 1e-10,
            "residual {}",
            (&reduced_oracle - &a_phi).norm()
        );
    }

    #[test]
    fn a_phi_spectrum_invariant_under_relabeling() {
        let mas = random_mas(31, 3, 2, 1, 2);
        let red = build_reduced(&mas).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let nc = 1;
        let mut ctrl = ControllerRealization::zero(3, nc, 1, 2);
        for blk in &mut ctrl.agents {
            blk.a_c = Matrix::from_fn(nc, nc, |_, _| rng.gen_range(-2.0..-0.5));
            blk.b_c = Matrix::from_fn(nc, 2, |_, _| rng.gen_range(-0.5..0.5));
            blk.c_c = Matrix::from_fn(1, nc, |_, _| rng.gen_range(-0.5..0.5));
            blk.d_c = Matrix::from_fn(1, 2, |_, _| rng.gen_range(-0.5..0.5));
        }
        // Relabel agents by the cyclic shift; the ring adjacency is invariant
        // under it, so the closed-loop spectrum must be preserved.
        let perm = [1usize, 2, 0];
        let mut adj = Matrix::zeros(3, 3);
        for i in 0..3 {
            for j in 0..3 {
                adj[(perm[i], perm[j])] = mas.graph.adjacency[(i, j)];
            }
        }
        let graph = NetworkGraph::from_adjacency(adj).unwrap();
        let agents: Vec<_> = (0..3).map(|i| mas.agents[perm.iter().position(|p| *p == i).unwrap()].clone()).collect();
        let mas2 = assemble_global(agents, graph).unwrap();
        let red2 = build_reduced(&mas2).unwrap();
        let mut ctrl2 = ctrl.clone();
        for i in 0..3 {
            ctrl2.agents[perm[i]] = ctrl.agents[i].clone();
        }
        let spec = |m: &Matrix| {
            let mut ev: Vec<(f64, f64)> = m
                .clone()
                .complex_eigenvalues()
                .iter()
                .map(|c| (c.re, c.im))
                .collect();
            ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
            ev
        };
        let e1 = spec(&build_a_phi(&red, &ctrl, &mas).unwrap());
        let e2 = spec(&build_a_phi(&red2, &ctrl2, &mas2).unwrap());
        for (a, b) in e1.iter().zip(e2.iter()) {
            assert!((a.0 - b.0).abs() < 1e-8 && (a.1 - b.1).abs() < 1e-8);
        }
    }
}
