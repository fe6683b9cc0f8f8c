//! Rigid-motion invariant geometry: pairwise distances, classical
//! multidimensional scaling back to 3-D coordinates, and a deterministic
//! canonical pose for the recovered coordinates.
//!
//! Everything here runs in `f64` regardless of the training precision.
//!
//! Pose ambiguity of the recovery is resolved column by column: columns
//! follow descending eigenvalue order and each column is flipped so that
//! its largest-magnitude entry is positive. This is only well defined when
//! the retained eigenvalues are distinct; a repeated eigenvalue leaves a
//! rotation inside its eigenspace that no sign rule can remove. Mirror
//! images share a distance matrix, so chirality is invisible downstream.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Number of recovered coordinates.
pub const EMBED_DIM: usize = 3;

/// Magnitude ties in the sign rule are resolved toward the lowest index.
const SIGN_TIE: f64 = 1e-9;

/// Symmetric matrix of Euclidean distances.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_positions(positions: &[[f64; 3]]) -> Self {
        let n = positions.len();
        let mut d = vec![0.0; n * n];
        for i in 0..n {
            for j in i + 1..n {
                let a = positions[i];
                let b = positions[j];
                let v = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                d[i * n + j] = v;
                d[j * n + i] = v;
            }
        }
        DistanceMatrix { n, d }
    }

    /// Wraps an arbitrary row-major matrix after checking that it is square,
    /// symmetric, non-negative, and has a zero diagonal.
    pub fn from_rows(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::Shape(format!("distance matrix needs {} entries", n * n)));
        }
        let m = DistanceMatrix { n, d };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        let n = self.n;
        let tol = 1e-12 * self.max_entry().max(1.0);
        for i in 0..n {
            if self.get(i, i).abs() > tol {
                return Err(Error::Invariant(format!("nonzero diagonal at {i}")));
            }
            for j in 0..n {
                let v = self.get(i, j);
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::Invariant(format!("invalid distance {v} at ({i}, {j})")));
                }
                if (v - self.get(j, i)).abs() > tol {
                    return Err(Error::Invariant(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.d
    }

    pub fn max_entry(&self) -> f64 {
        self.d.iter().copied().fold(0.0, f64::max)
    }

    /// Largest entrywise absolute difference.
    pub fn max_abs_diff(&self, other: &DistanceMatrix) -> f64 {
        assert_eq!(self.n, other.n, "distance matrices of different size");
        self.d
            .iter()
            .zip(&other.d)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub fn distance_matrix(positions: &[[f64; 3]]) -> DistanceMatrix {
    DistanceMatrix::from_positions(positions)
}

/// `B = -1/2 · J d² J` with `J = I - 11ᵀ/n`.
pub fn double_center(d: &DistanceMatrix) -> DMatrix<f64> {
    let n = d.n();
    let sq = DMatrix::from_fn(n, n, |i, j| d.get(i, j).powi(2));
    let nf = n as f64;
    let row_mean: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / nf).collect();
    let col_mean: Vec<f64> = (0..n).map(|j| sq.column(j).sum() / nf).collect();
    let all = row_mean.iter().sum::<f64>() / nf;
    DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_mean[i] - col_mean[j] + all))
}

/// Full symmetric eigendecomposition with eigenvalues in descending order
/// (ties keep the solver's original index order).
#[derive(Debug, Clone)]
pub struct Eigen {
    pub values: Vec<f64>,
    /// `vectors[k * n + i]` is component `i` of eigenvector `k`.
    pub vectors: Vec<f64>,
}

pub fn full_eigen(b: &DMatrix<f64>) -> Result<Eigen> {
    let n = b.nrows();
    if n != b.ncols() {
        return Err(Error::Shape("eigendecomposition needs a square matrix".into()));
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::Invariant("non-finite entry in centered matrix".into()));
    }
    let eig = SymmetricEigen::new(b.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = Vec::with_capacity(n * n);
    for &k in &order {
        vectors.extend(eig.eigenvectors.column(k).iter().copied());
    }
    Ok(Eigen { values, vectors })
}

/// Output of [`mds_embed`].
#[derive(Debug, Clone, PartialEq)]
pub struct MdsResult {
    pub p_hat: Vec<[f64; 3]>,
    /// All `n` eigenvalues of the centered matrix, descending, unclamped.
    pub eigenvalues: Vec<f64>,
    /// Number of strictly positive eigenvalues among the top three.
    pub rank_used: usize,
}

/// Eigenvalue retained for the square root: negatives and values at the
/// level of round-off are clamped to zero.
fn retained(lambda: f64, scale: f64) -> f64 {
    if lambda <= 1e-12 * scale.max(1.0) {
        0.0
    } else {
        lambda
    }
}

pub(crate) fn embed_from_eigen(eig: &Eigen, n: usize) -> (Vec<[f64; 3]>, usize) {
    let scale = eig.values.first().copied().unwrap_or(0.0).abs();
    let mut p = vec![[0.0; 3]; n];
    let mut rank = 0;
    for k in 0..EMBED_DIM.min(n) {
        let lam = retained(eig.values[k], scale);
        if lam == 0.0 {
            continue;
        }
        rank += 1;
        let r = lam.sqrt();
        for (i, row) in p.iter_mut().enumerate() {
            row[k] = r * eig.vectors[k * n + i];
        }
    }
    (p, rank)
}

/// Classical MDS: `p̂ = V_k Λ_k^{1/2}` for the top three eigenpairs of the
/// double-centered squared distances.
pub fn mds_embed(d: &DistanceMatrix) -> Result<MdsResult> {
    d.validate()?;
    let eig = full_eigen(&double_center(d))?;
    let (p_hat, rank_used) = embed_from_eigen(&eig, d.n());
    Ok(MdsResult {
        p_hat,
        eigenvalues: eig.values,
        rank_used,
    })
}

/// Sign per column that makes the column's largest-magnitude entry positive.
pub fn canonical_signs(p_hat: &[[f64; 3]]) -> [f64; 3] {
    let mut signs = [1.0; 3];
    for (k, sign) in signs.iter_mut().enumerate() {
        let mut best = 0.0f64;
        let mut pick = 0.0f64;
        for row in p_hat {
            let v = row[k];
            if v.abs() > best + SIGN_TIE {
                best = v.abs();
                pick = v;
            }
        }
        if pick < 0.0 {
            *sign = -1.0;
        }
    }
    signs
}

/// Pose-independent coordinates: descending-eigenvalue column order with
/// each column's sign fixed by [`canonical_signs`].
pub fn canonicalize(r: &MdsResult) -> Vec<[f64; 3]> {
    let s = canonical_signs(&r.p_hat);
    r.p_hat
        .iter()
        .map(|row| [row[0] * s[0], row[1] * s[1], row[2] * s[2]])
        .collect()
}

/// Distance matrix → MDS → canonical pose in one call.
pub fn recover_canonical(positions: &[[f64; 3]]) -> Result<Vec<[f64; 3]>> {
    Ok(canonicalize(&mds_embed(&distance_matrix(positions))?))
}

/// Smallest gap between consecutive retained eigenvalues (the first four
/// when available), relative to the largest. A small value means the
/// canonical pose is ill-defined.
pub fn spectral_gap(r: &MdsResult) -> f64 {
    let top: Vec<f64> = r.eigenvalues.iter().take(EMBED_DIM + 1).copied().collect();
    let scale = top.first().copied().unwrap_or(0.0).abs().max(f64::MIN_POSITIVE);
    top.windows(2)
        .map(|w| (w[0] - w[1]).abs() / scale)
        .fold(f64::INFINITY, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let d = distance_matrix(&[[0.0, 0.0, 0.0], [3.0, 4.0, 0.0]]);
        assert_eq!(d.get(0, 1), 5.0);
        assert_eq!(d.get(1, 0), 5.0);
        assert_eq!(d.get(0, 0), 0.0);
    }

    #[test]
    fn two_points_center_to_known_matrix() {
        // d² = [[0,4],[4,0]], J = [[.5,-.5],[-.5,.5]]; -½ J d² J = [[1,-1],[-1,1]]
        let d = DistanceMatrix::from_rows(2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let b = double_center(&d);
        let expect = [[1.0, -1.0], [-1.0, 1.0]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((b[(i, j)] - expect[i][j]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn coincident_points_center_to_zero() {
        let d = distance_matrix(&[[1.0, 2.0, 3.0]; 4]);
        assert!(double_center(&d).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn two_points_embed_on_one_axis() {
        // eigenpairs of [[1,-1],[-1,1]]: λ=2 with (1,-1)/√2, λ=0
        let d = DistanceMatrix::from_rows(2, vec![0.0, 2.0, 2.0, 0.0]).unwrap();
        let r = mds_embed(&d).unwrap();
        assert_eq!(r.rank_used, 1);
        assert!((r.eigenvalues[0] - 2.0).abs() < 1e-12);
        let c = canonicalize(&r);
        assert!((c[0][0].abs() - 1.0).abs() < 1e-12);
        assert!((c[1][0] + c[0][0]).abs() < 1e-12);
        assert!(c.iter().all(|row| row[1] == 0.0 && row[2] == 0.0));
    }

    #[test]
    fn equilateral_triangle_spectrum() {
        // B for unit equilateral triangle is J/2: eigenvalues 1/2, 1/2, 0
        let h = 3f64.sqrt() / 2.0;
        let d = distance_matrix(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, h, 0.0]]);
        let r = mds_embed(&d).unwrap();
        assert!((r.eigenvalues[0] - 0.5).abs() < 1e-12);
        assert!((r.eigenvalues[1] - 0.5).abs() < 1e-12);
        assert!(r.eigenvalues[2].abs() < 1e-12);
        assert_eq!(r.rank_used, 2);
        let back = distance_matrix(&r.p_hat);
        assert!(back.max_abs_diff(&d) < 1e-12);
        assert!(r.p_hat.iter().all(|p| p[2] == 0.0));
    }

    #[test]
    fn rejects_invalid_matrices() {
        assert!(DistanceMatrix::from_rows(2, vec![0.0, 1.0, 2.0, 0.0]).is_err());
        assert!(DistanceMatrix::from_rows(2, vec![0.0, -1.0, -1.0, 0.0]).is_err());
        assert!(DistanceMatrix::from_rows(2, vec![1.0, 1.0, 1.0, 0.0]).is_err());
    }

    #[test]
    fn sign_rule_flips_negated_column() {
        let r = MdsResult {
            p_hat: vec![[1.0, -3.0, 0.5], [-2.0, 1.0, -0.25]],
            eigenvalues: vec![5.0, 2.0, 0.1],
            rank_used: 3,
        };
        let c = canonicalize(&r);
        assert_eq!(c, vec![[-1.0, 3.0, 0.5], [2.0, -1.0, -0.25]]);
        assert_eq!(canonicalize(&MdsResult { p_hat: c.clone(), ..r }), c);
    }

    #[test]
    fn sign_tie_prefers_lowest_index() {
        let r = MdsResult {
            p_hat: vec![[-1.0, 0.0, 0.0], [1.0, 0.0, 0.0]],
            eigenvalues: vec![2.0, 0.0],
            rank_used: 1,
        };
        assert_eq!(canonicalize(&r)[0][0], 1.0);
    }
}
