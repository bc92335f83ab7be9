//! Splitting a weight matrix into rotations and a stretch/projection:
//! `W ~ exp(Phi) exp(Lambda + beta Pi) exp(Psi)`.
//!
//! `Phi` and `Psi` are skew-symmetric (angular velocities of the two SVD
//! rotations), `Lambda` holds the log singular values on the leading rank
//! positions and `Pi` is `-1` on the trailing null positions, so that
//! `exp(Lambda + beta Pi)` tends to the singular-value matrix as `beta` grows.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 30.0;
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

const ORTHOGONALITY_TOL: f64 = 1e-8;

// Degree-13 Pade coefficients of exp and the matching scaling threshold.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];
const THETA13: f64 = 5.371920351148152;

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

fn is_diagonal(a: &DMatrix<f64>) -> bool {
    a.iter().enumerate().all(|(k, v)| {
        let (i, j) = (k % a.nrows(), k / a.nrows());
        i == j || *v == 0.0
    })
}

/// Matrix exponential by scaling and squaring with a [13/13] Pade approximant.
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.nrows() != a.ncols() {
        return Err(Error::dim("expm (square matrix)", a.nrows(), a.ncols()));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("expm argument".into()));
    }
    let n = a.nrows();
    if is_diagonal(a) {
        return Ok(DMatrix::from_diagonal(&a.diagonal().map(f64::exp)));
    }

    let norm = one_norm(a);
    let squarings = if norm > THETA13 {
        (norm / THETA13).log2().ceil().max(0.0) as i32
    } else {
        0
    };
    let scaled = a / 2f64.powi(squarings);

    let id = DMatrix::<f64>::identity(n, n);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &PADE13;

    let u_inner = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]) + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &id * b[1];
    let u = &scaled * u_inner;
    let v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]) + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &id * b[0];

    let denom = &v - &u;
    let numer = &v + &u;
    let mut r = denom
        .lu()
        .solve(&numer)
        .ok_or_else(|| Error::Singular("Pade denominator in expm".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    Ok(r)
}

fn determinant(m: &DMatrix<f64>) -> f64 {
    m.clone().lu().determinant()
}

/// Frobenius residual `||Q^T Q - I||_F`.
pub fn orthogonality_residual(q: &DMatrix<f64>) -> f64 {
    let n = q.nrows();
    (q.transpose() * q - DMatrix::<f64>::identity(n, n)).norm()
}

/// Principal real logarithm of a proper rotation.
///
/// Works on the real Schur form, which for an orthogonal matrix is block
/// diagonal with 2x2 rotation blocks and `+-1` entries. Each rotation block
/// contributes its `atan2` angle in `(-pi, pi]`; eigenvalues `-1` are paired
/// into half-turns. The result is exactly skew-symmetric.
pub fn rotation_log(q: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if q.nrows() != q.ncols() {
        return Err(Error::dim("rotation_log (square matrix)", q.nrows(), q.ncols()));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("rotation_log argument".into()));
    }
    let residual = orthogonality_residual(q);
    if residual > ORTHOGONALITY_TOL {
        return Err(Error::NotOrthogonal { residual });
    }
    let det = determinant(q);
    if det <= 0.0 {
        return Err(Error::NegativeDeterminant { det });
    }

    let n = q.nrows();
    let mut log = DMatrix::<f64>::zeros(n, n);
    if n == 1 {
        return Ok(log);
    }

    let (basis, t) = q
        .clone()
        .try_schur(f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Decomposition("real Schur iteration did not converge".into()))?
        .unpack();

    let add_plane = |log: &mut DMatrix<f64>, u: &DVector<f64>, w: &DVector<f64>, angle: f64| {
        // angle * (w u^T - u w^T)
        *log += (w * u.transpose() - u * w.transpose()) * angle;
    };

    let split_tol = 64.0 * f64::EPSILON;
    let mut half_turns: Vec<DVector<f64>> = Vec::new();
    let mut i = 0;
    while i < n {
        let is_block = i + 1 < n && t[(i + 1, i)].abs() > split_tol;
        if !is_block {
            if t[(i, i)] < 0.0 {
                half_turns.push(basis.column(i).into_owned());
            }
            i += 1;
            continue;
        }
        let block = t.fixed_view::<2, 2>(i, i).into_owned();
        let u = basis.column(i).into_owned();
        let w = basis.column(i + 1).into_owned();
        if block.determinant() > 0.0 {
            let angle = (block[(1, 0)] - block[(0, 1)]).atan2(block[(0, 0)] + block[(1, 1)]);
            add_plane(&mut log, &u, &w, angle);
        } else {
            // A reflection block: eigenvalues +1 and -1 that Schur left coupled.
            let sym = (block + block.transpose()) * 0.5;
            let eig = SymmetricEigen::new(sym);
            let k = if eig.eigenvalues[0] < eig.eigenvalues[1] { 0 } else { 1 };
            let e = eig.eigenvectors.column(k);
            half_turns.push(&u * e[0] + &w * e[1]);
        }
        i += 2;
    }

    if !half_turns.len().is_multiple_of(2) {
        return Err(Error::NegativeDeterminant { det });
    }
    for pair in half_turns.chunks(2) {
        add_plane(&mut log, &pair[0], &pair[1], std::f64::consts::PI);
    }
    Ok((&log - log.transpose()) * 0.5)
}

/// `W ~ exp(phi) exp(diag(lambda) + beta diag(pi)) exp(psi)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearDecomposition {
    pub phi: DMatrix<f64>,
    pub psi: DMatrix<f64>,
    /// Diagonal of `Lambda`: log singular values, zero beyond the rank.
    pub lambda: DVector<f64>,
    /// Diagonal of `Pi`: zero on the leading rank positions, `-1` after.
    pub pi: DVector<f64>,
    pub beta: f64,
    pub rank: usize,
}

impl LinearDecomposition {
    pub fn dim(&self) -> usize {
        self.lambda.len()
    }

    /// Diagonal of the stretch generator `Lambda + beta Pi`.
    pub fn stretch_generator(&self) -> DVector<f64> {
        &self.lambda + &self.pi * self.beta
    }

    /// `exp(Phi) exp(Lambda + beta Pi) exp(Psi)`.
    pub fn reconstruct(&self) -> Result<DMatrix<f64>> {
        let u = expm(&self.phi)?;
        let v = expm(&self.psi)?;
        let s = DMatrix::from_diagonal(&self.stretch_generator().map(f64::exp));
        Ok(u * s * v)
    }

    pub fn to_record(&self) -> DecompositionRecord {
        let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
        DecompositionRecord {
            dimension: self.dim(),
            rank: self.rank,
            beta: self.beta,
            phi: rows(&self.phi),
            psi: rows(&self.psi),
            lambda: self.lambda.iter().copied().collect(),
            pi: self.pi.iter().copied().collect(),
        }
    }
}

/// JSON form of a [`LinearDecomposition`]; `Lambda` and `Pi` are stored as diagonals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionRecord {
    pub dimension: usize,
    pub rank: usize,
    pub beta: f64,
    #[serde(rename = "Phi")]
    pub phi: Vec<Vec<f64>>,
    #[serde(rename = "Psi")]
    pub psi: Vec<Vec<f64>>,
    #[serde(rename = "Lambda")]
    pub lambda: Vec<f64>,
    #[serde(rename = "Pi")]
    pub pi: Vec<f64>,
}

/// Decomposition with the default rank threshold.
pub fn decompose(w: &DMatrix<f64>, beta: f64) -> Result<LinearDecomposition> {
    decompose_with_tol(w, beta, DEFAULT_RANK_TOL)
}

/// Full-size SVD `W = U S V` with `U`, `V` proper rotations, then logarithms.
///
/// Singular values `<= rank_tol * sigma_max` count as zero. When the rank is
/// deficient, a null-space column of `U` (row of `V`) can be negated freely,
/// which is how determinant `-1` factors are turned into rotations. A
/// full-rank `W` with negative determinant cannot be handled that way.
pub fn decompose_with_tol(w: &DMatrix<f64>, beta: f64, rank_tol: f64) -> Result<LinearDecomposition> {
    let d = w.nrows();
    if d == 0 || w.ncols() != d {
        return Err(Error::dim("decompose (square matrix)", d, w.ncols()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::invalid(format!("beta must be positive, got {beta}")));
    }
    if rank_tol.is_nan() || rank_tol < 0.0 {
        return Err(Error::invalid(format!("rank tolerance must be >= 0, got {rank_tol}")));
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("weight matrix".into()));
    }

    let svd = w.clone().svd(true, true);
    let (u_raw, vt_raw) = match (svd.u, svd.v_t) {
        (Some(u), Some(v)) => (u, v),
        _ => return Err(Error::Decomposition("SVD did not return singular vectors".into())),
    };
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));

    let sigma = DVector::from_iterator(d, order.iter().map(|&k| svd.singular_values[k]));
    let mut u = DMatrix::from_fn(d, d, |i, j| u_raw[(i, order[j])]);
    let mut v = DMatrix::from_fn(d, d, |i, j| vt_raw[(order[i], j)]);

    // Fix the sign freedom of each singular pair: largest entry of the V row positive.
    for k in 0..d {
        let row = v.row(k);
        let pivot = row.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        if pivot < 0.0 {
            v.row_mut(k).neg_mut();
            u.column_mut(k).neg_mut();
        }
    }

    let sigma_max = sigma[0];
    let rank = sigma.iter().filter(|&&s| sigma_max > 0.0 && s > rank_tol * sigma_max).count();

    let det_u = determinant(&u);
    let det_v = determinant(&v);
    if rank < d {
        if det_u < 0.0 {
            u.column_mut(d - 1).neg_mut();
        }
        if det_v < 0.0 {
            v.row_mut(d - 1).neg_mut();
        }
    } else if det_u * det_v < 0.0 {
        let det_w = det_u * det_v * sigma.iter().product::<f64>();
        return Err(Error::ReflectionNeedsEmbedding { det: det_w });
    } else if det_u < 0.0 {
        u.column_mut(d - 1).neg_mut();
        v.row_mut(d - 1).neg_mut();
    }

    let phi = rotation_log(&u)?;
    let psi = rotation_log(&v)?;
    let lambda = DVector::from_fn(d, |i, _| if i < rank { sigma[i].ln() } else { 0.0 });
    let pi = DVector::from_fn(d, |i, _| if i < rank { 0.0 } else { -1.0 });

    Ok(LinearDecomposition {
        phi,
        psi,
        lambda,
        pi,
        beta,
        rank,
    })
}
