//! Graph Laplacian denoising: objectives, a closed-form oracle solve, the
//! unrolled iteration, the smoothed lp penalty, and the
//! majorization-minimization reweighting matrix.
//!
//! The edge set is every ordered pair `i != j` (complete directed graph);
//! affinities encode soft membership, so regularizer sums run over ordered
//! pairs and count each unordered pair twice when the affinity is symmetric.

use crate::error::{Error, Result};
use crate::matrix::{lu_solve, DenseMatrix};
use crate::tape::{row_softmax_value, NodeId, Tape};

/// A denoising instance: noisy signals, pairwise affinities, and the
/// smoothed-penalty parameters.
#[derive(Debug, Clone)]
pub struct GldProblem {
    pub x: DenseMatrix,
    pub affinity: DenseMatrix,
    pub epsilon: f64,
    pub p: f64,
}

impl GldProblem {
    pub fn new(x: DenseMatrix, affinity: DenseMatrix, epsilon: f64, p: f64) -> Result<Self> {
        check_penalty_params(epsilon, p)?;
        let n = x.rows();
        if affinity.shape() != (n, n) {
            return Err(Error::dims("gld_problem", (n, n), affinity.shape()));
        }
        for i in 0..n {
            if affinity.get(i, i) != 0.0 {
                return Err(Error::InvalidParam(format!(
                    "affinity diagonal must be zero (row {i})"
                )));
            }
            for j in 0..n {
                if affinity.get(i, j) < 0.0 {
                    return Err(Error::InvalidParam(format!(
                        "affinity must be nonnegative (entry {i},{j})"
                    )));
                }
            }
        }
        Ok(GldProblem { x, affinity, epsilon, p })
    }
}

fn check_penalty_params(epsilon: f64, p: f64) -> Result<()> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidParam(format!("epsilon must be positive, got {epsilon}")));
    }
    if !(p > 0.0 && p <= 2.0) {
        return Err(Error::InvalidParam(format!("p must lie in (0, 2], got {p}")));
    }
    Ok(())
}

/// Which normalization the Laplacian uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LaplacianVariant {
    /// `L = D - A` with `D_ii = sum_j A_ij`.
    Combinatorial,
    /// `L = I - D^{-1} A`; a node with no neighbors keeps its own signal
    /// (its normalized row becomes the unit vector on itself).
    RandomWalk,
}

/// A Laplacian together with the affinity and degree matrices it came from.
#[derive(Debug, Clone)]
pub struct LaplacianForm {
    pub variant: LaplacianVariant,
    pub laplacian: DenseMatrix,
    pub degree: DenseMatrix,
    pub affinity: DenseMatrix,
}

impl LaplacianForm {
    pub fn from_affinity(affinity: &DenseMatrix, variant: LaplacianVariant) -> Result<Self> {
        let n = affinity.rows();
        if affinity.cols() != n {
            return Err(Error::dims("laplacian", (n, n), affinity.shape()));
        }
        let mut degree = DenseMatrix::zeros(n, n);
        for i in 0..n {
            degree.set(i, i, affinity.row(i).iter().sum());
        }
        let laplacian = match variant {
            LaplacianVariant::Combinatorial => degree.sub(affinity)?,
            LaplacianVariant::RandomWalk => {
                DenseMatrix::identity(n).sub(&normalized_affinity(affinity))?
            }
        };
        Ok(LaplacianForm {
            variant,
            laplacian,
            degree,
            affinity: affinity.clone(),
        })
    }
}

/// Row-normalize an affinity matrix to `D^{-1} A`; rows that sum to zero fall
/// back to the unit vector on the node itself.
pub fn normalized_affinity(affinity: &DenseMatrix) -> DenseMatrix {
    let n = affinity.rows();
    DenseMatrix::from_fn(n, n, |i, j| {
        let d: f64 = affinity.row(i).iter().sum();
        if d == 0.0 {
            if i == j {
                1.0
            } else {
                0.0
            }
        } else {
            affinity.get(i, j) / d
        }
    })
}

/// Smoothed lp distance penalty: quadratic inside `|x| <= epsilon`, pure
/// `|x|^p` growth (up to the constant that keeps it C1) outside.
pub fn smoothed_lp(x: f64, epsilon: f64, p: f64) -> Result<f64> {
    check_penalty_params(epsilon, p)?;
    if p == 2.0 {
        // both branches collapse to x^2
        return Ok(x * x);
    }
    let ax = x.abs();
    Ok(if ax <= epsilon {
        epsilon.powf(p - 2.0) * x * x
    } else {
        (2.0 / p) * ax.powf(p) - ((2.0 - p) / p) * epsilon.powf(p)
    })
}

/// Derivative of [`smoothed_lp`] in `x`; both branches agree at `|x| = epsilon`.
pub fn smoothed_lp_derivative(x: f64, epsilon: f64, p: f64) -> Result<f64> {
    check_penalty_params(epsilon, p)?;
    let ax = x.abs();
    let m = if ax <= epsilon {
        2.0 * epsilon.powf(p - 2.0) * ax
    } else {
        2.0 * ax.powf(p - 1.0)
    };
    Ok(m * x.signum())
}

fn check_signal_shapes(y: &DenseMatrix, x: &DenseMatrix) -> Result<()> {
    if y.shape() != x.shape() {
        return Err(Error::dims("gld_objective", y.shape(), x.shape()));
    }
    Ok(())
}

/// Quadratic denoising objective: fidelity plus the affinity-weighted sum of
/// squared row distances over all ordered pairs.
pub fn gld_objective(y: &DenseMatrix, problem: &GldProblem, lap: &LaplacianForm) -> Result<f64> {
    check_signal_shapes(y, &problem.x)?;
    let fid = y.sub(&problem.x)?.frob_norm().powi(2);
    let mut reg = 0.0;
    let n = y.rows();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let a = lap.affinity.get(i, j);
            if a != 0.0 {
                let d = y.row_distance(i, j);
                reg += a * d * d;
            }
        }
    }
    Ok(fid + reg)
}

/// Denoising objective with the smoothed lp penalty in place of the square.
pub fn gld_lp_objective(y: &DenseMatrix, problem: &GldProblem, lap: &LaplacianForm) -> Result<f64> {
    check_signal_shapes(y, &problem.x)?;
    let fid = y.sub(&problem.x)?.frob_norm().powi(2);
    let mut reg = 0.0;
    let n = y.rows();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let a = lap.affinity.get(i, j);
            if a != 0.0 {
                reg += a * smoothed_lp(y.row_distance(i, j), problem.epsilon, problem.p)?;
            }
        }
    }
    Ok(fid + reg)
}

/// Stationary point of the quadratic objective: solve `(I + L) Y = X` by
/// dense LU with partial pivoting.
pub fn closed_form_solution(problem: &GldProblem, lap: &LaplacianForm) -> Result<DenseMatrix> {
    let n = problem.x.rows();
    let system = DenseMatrix::identity(n).add(&lap.laplacian)?;
    lu_solve(&system, &problem.x)
}

/// Solve `(2I - A~) Y = X` for an already row-stochastic attention matrix —
/// the fixed point of the unrolled iteration.
pub fn solve_fixed_point(a_tilde: &DenseMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    let n = x.rows();
    let system = DenseMatrix::identity(n).scale(2.0).sub(a_tilde)?;
    lu_solve(&system, x)
}

/// One explicit gradient step on the quadratic objective:
/// `Y - 2*alpha*((L + I) Y - Y0)`.
pub fn gradient_step(
    y_k: &DenseMatrix,
    y_0: &DenseMatrix,
    lap: &LaplacianForm,
    alpha: f64,
) -> Result<DenseMatrix> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParam(format!("step size must be positive, got {alpha}")));
    }
    check_signal_shapes(y_k, y_0)?;
    let ly = lap.laplacian.matmul(y_k)?;
    let residual = ly.add(y_k)?.sub(y_0)?;
    y_k.sub(&residual.scale(2.0 * alpha))
}

/// The linear part of one unrolled layer: `(A~ Y + Y + Y0) / 3`. With the
/// random-walk Laplacian and step size 1/6 this equals [`gradient_step`].
pub fn unrolled_update(
    y_k: &DenseMatrix,
    y_0: &DenseMatrix,
    a_tilde: &DenseMatrix,
) -> Result<DenseMatrix> {
    check_signal_shapes(y_k, y_0)?;
    let mixed = a_tilde.matmul(y_k)?;
    Ok(mixed.add(y_k)?.add(y_0)?.scale(1.0 / 3.0))
}

/// Per-pair reweighting factors derived from the smoothed lp penalty:
/// `epsilon^(p-2)` inside the quadratic region, `d^(p-2)` outside. The
/// diagonal is unused by any objective but kept finite at `epsilon^(p-2)`.
pub fn omega_matrix(y: &DenseMatrix, epsilon: f64, p: f64) -> Result<DenseMatrix> {
    check_penalty_params(epsilon, p)?;
    let n = y.rows();
    let base = epsilon.powf(p - 2.0);
    let mut omega = DenseMatrix::zeros(n, n);
    for i in 0..n {
        omega.set(i, i, base);
        for j in (i + 1)..n {
            let d = y.row_distance(i, j);
            let w = if d <= epsilon { base } else { d.powf(p - 2.0) };
            omega.set(i, j, w);
            omega.set(j, i, w);
        }
    }
    Ok(omega)
}

/// Quadratic majorizer of [`gld_lp_objective`] anchored at `y_anchor`:
/// fidelity plus `sum_ij A_ij * Omega_ij(anchor) * d_ij^2`.
pub fn mm_surrogate(
    y: &DenseMatrix,
    y_anchor: &DenseMatrix,
    problem: &GldProblem,
    lap: &LaplacianForm,
) -> Result<f64> {
    check_signal_shapes(y, &problem.x)?;
    check_signal_shapes(y_anchor, &problem.x)?;
    let omega = omega_matrix(y_anchor, problem.epsilon, problem.p)?;
    let fid = y.sub(&problem.x)?.frob_norm().powi(2);
    let mut reg = 0.0;
    let n = y.rows();
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let a = lap.affinity.get(i, j);
            if a != 0.0 {
                let d = y.row_distance(i, j);
                reg += a * omega.get(i, j) * d * d;
            }
        }
    }
    Ok(fid + reg)
}

/// Laplacian of the ordered-pair edge set, i.e. of `W + W^T`. The gradient of
/// `sum_{i != j} W_ij * d_ij^2` is exactly `2 * pair_laplacian(W) * Y`.
pub fn pair_laplacian(weights: &DenseMatrix) -> DenseMatrix {
    let n = weights.rows();
    let sym = weights
        .add(&weights.transpose())
        .expect("square matrix plus its transpose");
    let mut lap = sym.scale(-1.0);
    for i in 0..n {
        // self-loops never contribute to a pairwise-distance sum
        let deg: f64 = sym.row(i).iter().sum::<f64>() - sym.get(i, i);
        lap.set(i, i, deg);
    }
    lap
}

/// One outer majorization-minimization iteration: reweight at the current
/// point, then take `inner_steps` safe gradient steps on the surrogate.
/// Never increases [`gld_lp_objective`].
pub fn mm_descent_step(
    y: &DenseMatrix,
    problem: &GldProblem,
    lap: &LaplacianForm,
    inner_steps: usize,
) -> Result<DenseMatrix> {
    let omega = omega_matrix(y, problem.epsilon, problem.p)?;
    let mut weights = lap.affinity.hadamard(&omega)?;
    let n = weights.rows();
    for i in 0..n {
        weights.set(i, i, 0.0);
    }
    let pl = pair_laplacian(&weights);
    // Lipschitz bound for the surrogate gradient: 2 + 2*lambda_max(pl),
    // with lambda_max(pl) <= 2 * max degree of W + W^T.
    let max_deg = (0..n)
        .map(|i| pl.get(i, i))
        .fold(0.0_f64, f64::max);
    let alpha = 1.0 / (2.0 + 4.0 * max_deg);
    let mut cur = y.clone();
    for _ in 0..inner_steps {
        let grad = cur
            .sub(&problem.x)?
            .scale(2.0)
            .add(&pl.matmul(&cur)?.scale(2.0))?;
        cur = cur.sub(&grad.scale(alpha))?;
    }
    Ok(cur)
}

/// Build the quadratic objective on a tape so it can be differentiated:
/// `sum((Y - X) ** 2) + sum(Y * (pair_laplacian(A) Y))`.
pub fn gld_objective_node(
    tape: &mut Tape,
    y: NodeId,
    x: NodeId,
    affinity: &DenseMatrix,
) -> Result<NodeId> {
    let pl = tape.constant(pair_laplacian(affinity));
    let diff = tape.sub(y, x)?;
    let fid_sq = tape.hadamard(diff, diff)?;
    let fid = tape.sum_all(fid_sq);
    let ly = tape.matmul(pl, y)?;
    let quad = tape.hadamard(y, ly)?;
    let reg = tape.sum_all(quad);
    tape.add(fid, reg)
}

/// Distance-to-solution traces for the three unrolled solver flavors on one
/// instance: the linear iteration, its nonnegative (ReLU) version, and the
/// reweighted nonnegative version.
#[derive(Debug, Clone)]
pub struct DenoiseCurves {
    pub plain: Vec<f64>,
    pub proximal: Vec<f64>,
    pub reweighted: Vec<f64>,
}

/// Run all three solver variants from `Y0 = X` against the closed-form fixed
/// point of the plain iteration, recording `||Y_k - Y*||_F` per iteration
/// (index 0 is the starting point).
pub fn denoise_curves(
    x: &DenseMatrix,
    scores: &DenseMatrix,
    epsilon: f64,
    p: f64,
    iters: usize,
) -> Result<DenoiseCurves> {
    let n = x.rows();
    if scores.shape() != (n, n) {
        return Err(Error::dims("denoise_curves", (n, n), scores.shape()));
    }
    let mask = off_diagonal_mask(n);
    let a_plain = row_softmax_value(scores, Some(&mask))?;
    let y_star = solve_fixed_point(&a_plain, x)?;

    let mut plain = x.clone();
    let mut proximal = x.clone();
    let mut reweighted = x.clone();
    let mut curves = DenoiseCurves {
        plain: vec![plain.sub(&y_star)?.frob_norm()],
        proximal: vec![proximal.sub(&y_star)?.frob_norm()],
        reweighted: vec![reweighted.sub(&y_star)?.frob_norm()],
    };
    for _ in 0..iters {
        plain = unrolled_update(&plain, x, &a_plain)?;
        proximal = unrolled_update(&proximal, x, &a_plain)?.map(|v| v.max(0.0));
        let omega = omega_matrix(&reweighted, epsilon, p)?;
        let a_rw = row_softmax_value(&omega.hadamard(scores)?, Some(&mask))?;
        reweighted = unrolled_update(&reweighted, x, &a_rw)?.map(|v| v.max(0.0));
        curves.plain.push(plain.sub(&y_star)?.frob_norm());
        curves.proximal.push(proximal.sub(&y_star)?.frob_norm());
        curves.reweighted.push(reweighted.sub(&y_star)?.frob_norm());
    }
    Ok(curves)
}

/// Row-major mask that is `false` exactly on the diagonal.
pub fn off_diagonal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|k| k / n != k % n).collect()
}
