//! Dense linear-algebra and graph kernels: Kronecker products, blockwise
//! pattern scaling, Moore-Penrose pseudo-inverse, symmetric eigenvalue
//! checks, Laplacian construction and reduction.

use crate::{s, to_f64, Error, Result, Scalar, DEFAULT_REL_TOL};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// True when every entry of `m` is finite.
pub fn all_finite<T: Scalar>(m: &DMatrix<T>) -> bool {
    m.iter().all(|x| to_f64(*x).is_finite())
}

/// Kronecker product `a ⊗ b`, with a dimension-overflow guard.
pub fn kron<T: Scalar>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<DMatrix<T>> {
    let rows = a
        .nrows()
        .checked_mul(b.nrows())
        .ok_or_else(|| Error::Dimension("kron row count overflow".into()))?;
    let cols = a
        .ncols()
        .checked_mul(b.ncols())
        .ok_or_else(|| Error::Dimension("kron column count overflow".into()))?;
    if rows.checked_mul(cols).is_none() {
        return Err(Error::Dimension("kron entry count overflow".into()));
    }
    if !all_finite(a) || !all_finite(b) {
        return Err(Error::Invalid("kron operand has non-finite entries".into()));
    }
    Ok(a.kronecker(b))
}

/// Identity matrix shorthand.
pub fn eye<T: Scalar>(n: usize) -> DMatrix<T> {
    DMatrix::identity(n, n)
}

/// Blockwise pattern scaling: output block `(i, j)` equals
/// `pattern[(i, j)] * blocks[j]`.
///
/// This generalizes the Hadamard-of-Kronecker construction used to keep the
/// synthesis pencil affine: with `pattern` the reduced Laplacian and
/// `blocks[j]` the per-agent variable blocks, the result equals the explicit
/// product of the lifted matrices.
pub fn block_scale<T: Scalar>(pattern: &DMatrix<T>, blocks: &[DMatrix<T>]) -> Result<DMatrix<T>> {
    if blocks.len() != pattern.ncols() {
        return Err(Error::Dimension(format!(
            "block_scale: pattern has {} columns but {} blocks given",
            pattern.ncols(),
            blocks.len()
        )));
    }
    let (p, q) = match blocks.first() {
        Some(b0) => (b0.nrows(), b0.ncols()),
        None => return Ok(DMatrix::zeros(0, 0)),
    };
    for (j, b) in blocks.iter().enumerate() {
        if b.nrows() != p || b.ncols() != q {
            return Err(Error::Dimension(format!(
                "block_scale: block {j} is {}x{}, expected {p}x{q}",
                b.nrows(),
                b.ncols()
            )));
        }
    }
    let mut out = DMatrix::zeros(pattern.nrows() * p, pattern.ncols() * q);
    for i in 0..pattern.nrows() {
        for j in 0..pattern.ncols() {
            let w = pattern[(i, j)];
            if w != T::zero() {
                out.view_mut((i * p, j * q), (p, q)).copy_from(&(blocks[j].clone() * w));
            }
        }
    }
    Ok(out)
}

/// Moore-Penrose pseudo-inverse via SVD.
///
/// Singular values below `max_dim * eps * sigma_max` are truncated.
pub fn pinv<T: Scalar>(a: &DMatrix<T>) -> Result<DMatrix<T>> {
    if !all_finite(a) {
        return Err(Error::Invalid("pinv input has non-finite entries".into()));
    }
    if a.is_empty() {
        return Ok(DMatrix::zeros(a.ncols(), a.nrows()));
    }
    let svd = a
        .clone()
        .try_svd(true, true, T::default_epsilon(), 1000)
        .ok_or(Error::SvdFailed)?;
    let smax = svd.singular_values.max();
    let cutoff = s::<T>(a.nrows().max(a.ncols()) as f64) * T::default_epsilon() * smax;
    svd.pseudo_inverse(cutoff)
        .map_err(|_| Error::SvdFailed)
}

/// Singular values of `a` (descending).
pub fn singular_values<T: Scalar>(a: &DMatrix<T>) -> Result<DVector<T>> {
    let svd = a
        .clone()
        .try_svd(false, false, T::default_epsilon(), 1000)
        .ok_or(Error::SvdFailed)?;
    Ok(svd.singular_values)
}

/// Spectral norm (largest singular value).
pub fn spectral_norm<T: Scalar>(a: &DMatrix<T>) -> Result<T> {
    if a.is_empty() {
        return Ok(T::zero());
    }
    Ok(singular_values(a)?.max())
}

/// Numerical rank with relative tolerance `rel_tol` on singular values.
pub fn rank<T: Scalar>(a: &DMatrix<T>, rel_tol: f64) -> Result<usize> {
    if a.is_empty() {
        return Ok(0);
    }
    let sv = singular_values(a)?;
    let smax = sv.max();
    if to_f64(smax) == 0.0 {
        return Ok(0);
    }
    let cut = smax * s::<T>(rel_tol);
    Ok(sv.iter().filter(|x| **x > cut).count())
}

/// Graph Laplacian `L = D - A` from a weighted adjacency matrix.
///
/// Rejects negative weights and a nonzero diagonal. Row sums are zero by
/// construction: `l_ii` accumulates the same weights that the off-diagonal
/// entries negate.
pub fn laplacian<T: Scalar>(adjacency: &DMatrix<T>) -> Result<DMatrix<T>> {
    let n = adjacency.nrows();
    if adjacency.ncols() != n {
        return Err(Error::Dimension("adjacency must be square".into()));
    }
    if !all_finite(adjacency) {
        return Err(Error::Invalid("adjacency has non-finite entries".into()));
    }
    for i in 0..n {
        if adjacency[(i, i)] != T::zero() {
            return Err(Error::Invalid(format!("adjacency diagonal entry ({i},{i}) must be zero")));
        }
        for j in 0..n {
            if adjacency[(i, j)] < T::zero() {
                return Err(Error::Invalid(format!("negative adjacency weight at ({i},{j})")));
            }
        }
    }
    let mut l = DMatrix::zeros(n, n);
    for i in 0..n {
        let mut deg = T::zero();
        for j in 0..n {
            if i != j {
                deg += adjacency[(i, j)];
                l[(i, j)] = -adjacency[(i, j)];
            }
        }
        l[(i, i)] = deg;
    }
    Ok(l)
}

/// Select `N-1` independent rows of a Laplacian.
///
/// Drops the last row first; if the remaining rows are rank deficient, falls
/// back to a greedy deterministic sweep that keeps each row whose component
/// orthogonal to the span of the kept rows is non-negligible.
pub fn reduce_laplacian<T: Scalar>(l: &DMatrix<T>) -> Result<DMatrix<T>> {
    reduce_laplacian_tol(l, DEFAULT_REL_TOL)
}

/// [`reduce_laplacian`] with an explicit relative rank tolerance.
pub fn reduce_laplacian_tol<T: Scalar>(l: &DMatrix<T>, rel_tol: f64) -> Result<DMatrix<T>> {
    let n = l.nrows();
    if l.ncols() != n {
        return Err(Error::Dimension("laplacian must be square".into()));
    }
    if n == 0 {
        return Err(Error::Invalid("empty laplacian".into()));
    }
    if n == 1 {
        return Ok(DMatrix::zeros(0, 1));
    }
    let first = l.rows(0, n - 1).into_owned();
    if rank(&first, rel_tol)? == n - 1 {
        return Ok(first);
    }
    // Greedy row selection, in row order.
    let scale = to_f64(spectral_norm(l)?).max(1.0);
    let mut kept: Vec<DVector<T>> = Vec::new();
    let mut kept_idx: Vec<usize> = Vec::new();
    for i in 0..n {
        let row = l.row(i).transpose();
        let mut resid = row.clone();
        for b in &kept {
            let c = b.dot(&resid);
            resid -= b * c;
        }
        if to_f64(resid.norm()) > rel_tol * scale {
            let nrm = resid.norm();
            kept.push(resid / nrm);
            kept_idx.push(i);
            if kept_idx.len() == n - 1 {
                break;
            }
        }
    }
    if kept_idx.len() < n - 1 {
        return Err(Error::RankDeficient(format!(
            "laplacian rank {} < {}",
            kept_idx.len(),
            n - 1
        )));
    }
    let mut out = DMatrix::zeros(n - 1, n);
    for (r, &i) in kept_idx.iter().enumerate() {
        out.row_mut(r).copy_from(&l.row(i));
    }
    Ok(out)
}

/// Eigenvalues of the symmetrized matrix `(a + aᵀ)/2`, ascending.
pub fn sym_eigenvalues<T: Scalar>(a: &DMatrix<T>) -> Result<DVector<T>> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension("sym_eigenvalues needs a square matrix".into()));
    }
    if a.is_empty() {
        return Ok(DVector::zeros(0));
    }
    let sym = (a + a.transpose()) * s::<T>(0.5);
    let eig = sym
        .try_symmetric_eigen(T::default_epsilon(), 10_000)
        .ok_or(Error::SvdFailed)?;
    let mut ev: Vec<T> = eig.eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(DVector::from_vec(ev))
}

/// Largest eigenvalue of a symmetric matrix.
///
/// Asymmetry beyond `1e-9 * ||a||` is an error; the matrix is symmetrized
/// before the eigendecomposition.
pub fn max_eig_sym<T: Scalar>(a: &DMatrix<T>) -> Result<T> {
    check_symmetry(a, 1e-9)?;
    let ev = sym_eigenvalues(a)?;
    if ev.is_empty() {
        return Err(Error::Invalid("empty matrix".into()));
    }
    Ok(ev[ev.len() - 1])
}

/// Smallest eigenvalue of a symmetric matrix (same contract as [`max_eig_sym`]).
pub fn min_eig_sym<T: Scalar>(a: &DMatrix<T>) -> Result<T> {
    check_symmetry(a, 1e-9)?;
    let ev = sym_eigenvalues(a)?;
    if ev.is_empty() {
        return Err(Error::Invalid("empty matrix".into()));
    }
    Ok(ev[0])
}

fn check_symmetry<T: Scalar>(a: &DMatrix<T>, rel_tol: f64) -> Result<()> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension("symmetric check needs a square matrix".into()));
    }
    let asym = to_f64((a - a.transpose()).norm());
    let tol = rel_tol * to_f64(a.norm()).max(f64::MIN_POSITIVE);
    if asym > tol {
        return Err(Error::NotSymmetric { asym, tol });
    }
    Ok(())
}

/// Largest real part among the (generally complex) eigenvalues of `a`.
pub fn spectral_abscissa<T: Scalar>(a: &DMatrix<T>) -> Result<T> {
    if a.nrows() != a.ncols() {
        return Err(Error::Dimension("spectral_abscissa needs a square matrix".into()));
    }
    if a.is_empty() {
        return Ok(s(f64::NEG_INFINITY));
    }
    let ev = a.clone().complex_eigenvalues();
    Ok(ev.iter().map(|c| c.re).fold(s(f64::NEG_INFINITY), |m, x| if x > m { x } else { m }))
}

/// True iff zero is numerically a simple eigenvalue of the symmetrized
/// Laplacian and all other eigenvalues are positive.
pub fn spectral_connectivity<T: Scalar>(l: &DMatrix<T>) -> bool {
    spectral_connectivity_tol(l, DEFAULT_REL_TOL)
}

/// [`spectral_connectivity`] with an explicit relative tolerance.
pub fn spectral_connectivity_tol<T: Scalar>(l: &DMatrix<T>, rel_tol: f64) -> bool {
    let ev = match sym_eigenvalues(l) {
        Ok(e) => e,
        Err(_) => return false,
    };
    if ev.is_empty() {
        return false;
    }
    let scale = ev.iter().map(|x| to_f64(*x).abs()).fold(1.0, f64::max);
    let tol = rel_tol * scale;
    let near_zero = ev.iter().filter(|x| to_f64(**x).abs() <= tol).count();
    let negative = ev.iter().filter(|x| to_f64(**x) < -tol).count();
    near_zero == 1 && negative == 0
}

/// Communication topology of the multi-agent network.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NetworkGraph<T: Scalar> {
    pub n_agents: usize,
    pub adjacency: DMatrix<T>,
    pub laplacian: DMatrix<T>,
    pub reduced_laplacian: DMatrix<T>,
}

impl<T: Scalar> NetworkGraph<T> {
    /// Build the Laplacian and its reduction from a weighted adjacency matrix.
    pub fn from_adjacency(adjacency: DMatrix<T>) -> Result<Self> {
        let lap = laplacian(&adjacency)?;
        let reduced = reduce_laplacian(&lap)?;
        Ok(Self {
            n_agents: adjacency.nrows(),
            adjacency,
            laplacian: lap,
            reduced_laplacian: reduced,
        })
    }

    pub fn is_connected(&self) -> bool {
        spectral_connectivity(&self.laplacian)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Matrix;

    fn mat(rows: &[&[f64]]) -> Matrix {
        Matrix::from_fn(rows.len(), rows[0].len(), |i, j| rows[i][j])
    }

    /// Adjacency of the three-agent cycle used throughout the examples:
    /// agent 1 senses 2, agent 2 senses 3, agent 3 senses 1.
    pub(crate) fn cycle3_adjacency() -> Matrix {
        mat(&[&[0., 1., 0.], &[0., 0., 1.], &[1., 0., 0.]])
    }

    pub(crate) fn cycle3_laplacian() -> Matrix {
        mat(&[&[1., -1., 0.], &[0., 1., -1.], &[-1., 0., 1.]])
    }

    #[test]
    fn kron_identity_block_diagonal() {
        let m = mat(&[&[1., 2.], &[3., 4.]]);
        let k = kron(&eye(2), &m).unwrap();
        assert_eq!(k.nrows(), 4);
        assert_eq!(k.view((0, 0), (2, 2)).clone_owned(), m);
        assert_eq!(k.view((2, 2), (2, 2)).clone_owned(), m);
        assert!(k.view((0, 2), (2, 2)).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn kron_laplacian_row_sums_zero() {
        let l = cycle3_laplacian();
        let k = kron(&l, &eye(4)).unwrap();
        for i in 0..k.nrows() {
            assert_eq!(k.row(i).sum(), 0.0);
        }
    }

    #[test]
    fn kron_mixed_product_identity() {
        // kron(a,b)·kron(c,d) = kron(a·c, b·d), direct-multiplication oracle.
        let mut rng_state = 1u64;
        let mut next = move || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((rng_state >> 33) as f64) / (1u64 << 31) as f64 - 1.0
        };
        for _ in 0..5 {
            let mut r = |_: usize, _: usize| next();
            let a = Matrix::from_fn(2, 2, &mut r);
            let b = Matrix::from_fn(2, 2, &mut r);
            let c = Matrix::from_fn(2, 2, &mut r);
            let d = Matrix::from_fn(2, 2, &mut r);
            let lhs = kron(&a, &b).unwrap() * kron(&c, &d).unwrap();
            let rhs = kron(&(&a * &c), &(&b * &d)).unwrap();
            assert!((lhs - rhs).norm() < 1e-12);
        }
    }

    #[test]
    fn block_scale_identity_pattern() {
        let m = mat(&[&[1., 2.], &[3., 4.]]);
        let out = block_scale(&eye(2), &[m.clone(), m.clone()]).unwrap();
        assert_eq!(out, kron(&eye(2), &m).unwrap());
    }

    #[test]
    fn block_scale_zero_pattern() {
        let m = mat(&[&[1., 2.], &[3., 4.]]);
        let out = block_scale(&Matrix::zeros(2, 2), &[m.clone(), m]).unwrap();
        assert!(out.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn block_scale_matches_lifted_product() {
        // block_scale(L̂, [p̄_s B_j X_j]) = (I ⊗ p̄_s)(L̂ ⊗ I_n) blockdiag(B_j X_j)
        let l_hat = cycle3_laplacian().rows(0, 2).into_owned();
        let n = 4;
        let p_s = mat(&[&[2., 0.1, 0., 0.], &[0.1, 1., 0., 0.], &[0., 0., 3., 0.2], &[0., 0., 0.2, 1.5]]);
        let bs: Vec<Matrix> = (0..3)
            .map(|j| Matrix::from_fn(n, 1, |i, _| (i + j) as f64 * 0.3 - 0.4))
            .collect();
        let xs: Vec<Matrix> = (0..3)
            .map(|j| Matrix::from_fn(1, 2, |_, c| (c as f64 + 1.0) * (j as f64 - 1.0) * 0.7 + 0.2))
            .collect();
        let blocks: Vec<Matrix> = (0..3).map(|j| &p_s * &bs[j] * &xs[j]).collect();
        let lhs = block_scale(&l_hat, &blocks).unwrap();

        let mut bd = Matrix::zeros(3 * n, 3 * 2);
        for j in 0..3 {
            bd.view_mut((j * n, j * 2), (n, 2)).copy_from(&(&bs[j] * &xs[j]));
        }
        let rhs = kron(&eye(2), &p_s).unwrap() * kron(&l_hat, &eye(n)).unwrap() * bd;
        assert!((lhs - rhs).norm() < 1e-12);
    }

    #[test]
    fn block_scale_mismatched_blocks_rejected() {
        let m = mat(&[&[1., 2.], &[3., 4.]]);
        let bad = Matrix::zeros(3, 2);
        assert!(block_scale(&eye(2), &[m, bad]).is_err());
    }

    #[test]
    fn pinv_identity() {
        let p = pinv(&eye::<f64>(3)).unwrap();
        assert!((p - eye::<f64>(3)).norm() < 1e-12);
    }

    #[test]
    fn pinv_reduced_laplacian_right_inverse() {
        let l_hat = cycle3_laplacian().rows(0, 2).into_owned();
        let p = pinv(&l_hat).unwrap();
        assert!((&l_hat * &p - eye::<f64>(2)).norm() < 1e-10);
    }

    #[test]
    fn pinv_penrose_conditions_random() {
        let mut state = 7u64;
        let mut next = move || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
            ((state >> 33) as f64) / (1u64 << 31) as f64 - 1.0
        };
        for _ in 0..20 {
            let a = Matrix::from_fn(3, 5, |_, _| next());
            let p = pinv(&a).unwrap();
            let scale = a.norm().max(1.0);
            assert!((&a * &p * &a - &a).norm() / scale < 1e-9);
            assert!((&p * &a * &p - &p).norm() / p.norm().max(1.0) < 1e-9);
            let ap = &a * &p;
            let pa = &p * &a;
            assert!((ap.transpose() - &ap).norm() < 1e-9);
            assert!((pa.transpose() - &pa).norm() < 1e-9);
        }
    }

    #[test]
    fn laplacian_cycle_matches_expected() {
        let l = laplacian(&cycle3_adjacency()).unwrap();
        assert_eq!(l, cycle3_laplacian());
    }

    #[test]
    fn laplacian_empty_graph_is_zero() {
        let l = laplacian(&Matrix::zeros(4, 4)).unwrap();
        assert!(l.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn laplacian_complete_graph() {
        let j = Matrix::from_element(3, 3, 1.0);
        let adj = &j - eye::<f64>(3);
        let l = laplacian(&adj).unwrap();
        let expected = eye::<f64>(3) * 2.0 - (&j - eye::<f64>(3));
        assert_eq!(l, expected);
    }

    #[test]
    fn laplacian_rejects_negative_weight() {
        let mut adj = Matrix::zeros(2, 2);
        adj[(0, 1)] = -1.0;
        assert!(laplacian(&adj).is_err());
    }

    #[test]
    fn laplacian_rejects_nonzero_diagonal() {
        let mut adj = Matrix::zeros(2, 2);
        adj[(0, 0)] = 1.0;
        assert!(laplacian(&adj).is_err());
    }

    #[test]
    fn reduce_laplacian_cycle_first_two_rows() {
        let l = cycle3_laplacian();
        let r = reduce_laplacian(&l).unwrap();
        assert_eq!(r, l.rows(0, 2).into_owned());
        assert_eq!(rank(&r, DEFAULT_REL_TOL).unwrap(), 2);
    }

    #[test]
    fn reduce_laplacian_two_agent_path() {
        let l = mat(&[&[1., -1.], &[-1., 1.]]);
        let r = reduce_laplacian(&l).unwrap();
        assert_eq!(r, mat(&[&[1., -1.]]));
    }

    #[test]
    fn reduce_laplacian_zero_fails() {
        assert!(reduce_laplacian(&Matrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn reduce_laplacian_row_span_covers_l() {
        // Every row of L lies in the row span of L̂.
        let l = cycle3_laplacian();
        let r = reduce_laplacian(&l).unwrap();
        let proj = r.transpose() * pinv(&r.transpose()).unwrap();
        for i in 0..3 {
            let row = l.row(i).transpose();
            let resid = (&proj * &row - &row).norm();
            assert!(resid < 1e-9, "row {i} residual {resid}");
        }
    }

    #[test]
    fn max_eig_sym_examples() {
        assert!((max_eig_sym(&eye::<f64>(3)).unwrap() - 1.0).abs() < 1e-12);
        let d = Matrix::from_diagonal(&nalgebra::dvector![-1.0, -2.0]);
        assert!((max_eig_sym(&d).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn max_eig_sym_rejects_asymmetric() {
        let m = mat(&[&[0., 1.], &[0., 0.]]);
        assert!(matches!(max_eig_sym(&m), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn cycle_symmetrized_smallest_eigenvalue_zero() {
        // Characteristic polynomial of (L+Lᵀ)/2 for the 3-cycle:
        // sym = [[1,-.5,-.5],[-.5,1,-.5],[-.5,-.5,1]], det(sym - λI) = -λ(λ-1.5)².
        let ev = sym_eigenvalues(&cycle3_laplacian()).unwrap();
        assert!(ev[0].abs() < 1e-12);
        assert!((ev[1] - 1.5).abs() < 1e-12);
        assert!((ev[2] - 1.5).abs() < 1e-12);
    }

    #[test]
    fn connectivity_cycle_true() {
        assert!(spectral_connectivity(&cycle3_laplacian()));
    }

    #[test]
    fn connectivity_disjoint_false() {
        let two = mat(&[&[1., -1.], &[-1., 1.]]);
        let mut l = Matrix::zeros(4, 4);
        l.view_mut((0, 0), (2, 2)).copy_from(&two);
        l.view_mut((2, 2), (2, 2)).copy_from(&two);
        assert!(!spectral_connectivity(&l));
    }

    #[test]
    fn connectivity_single_node_true() {
        assert!(spectral_connectivity(&Matrix::zeros(1, 1)));
    }

    #[test]
    fn network_graph_construction() {
        let g = NetworkGraph::from_adjacency(cycle3_adjacency()).unwrap();
        assert_eq!(g.laplacian, cycle3_laplacian());
        assert!(g.is_connected());
        assert_eq!(g.reduced_laplacian.nrows(), 2);
    }
}
