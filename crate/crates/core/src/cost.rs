//! Cost functions over a dataset and the derivatives of the log-determinant
//! cost `U_n(W) = ln det Γ_n(W)`.
//!
//! With `J_t` the `d × s` weight Jacobian at `z_t`, `r_t = y_t − F_W(z_t)` and
//! `Γ_n = (1/n) Σ r_t r_tᵀ`:
//!
//! * gradient: `∂U_n/∂W_k = 2 tr(Γ_n⁻¹ A_n(k))`, `A_n(k) = −(1/n) Σ J_t[:,k] r_tᵀ`
//! * Hessian:
//!   `−2 tr(Γ_n⁻¹ (A_n(l) + A_n(l)ᵀ) Γ_n⁻¹ A_n(k)) + 2 tr(Γ_n⁻¹ B_n(k,l)) + 2 tr(Γ_n⁻¹ C_n(k,l))`
//!   where `B_n(k,l) = (1/n) Σ J_t[:,k] J_t[:,l]ᵀ` and
//!   `C_n(k,l) = −(1/n) Σ r_t ∂²F/∂W_k∂W_lᵀ`.
//!
//! The first Hessian term carries both indices and a minus sign; it comes from
//! `∂Γ⁻¹ = −Γ⁻¹ (∂Γ) Γ⁻¹`.

use serde::{Deserialize, Serialize};

pub use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::linalg::{self, CholeskyFactor, DenseMatrix, Square, SymMatrix};
use crate::mlp::{self, WeightVector};

/// `Γ_n(W)` with its factor and inverse.
#[derive(Clone, Debug)]
pub struct ResidualCovariance {
    pub gamma: SymMatrix,
    pub factor: CholeskyFactor,
    pub inverse: SymMatrix,
}

impl ResidualCovariance {
    pub fn from_gamma(gamma: SymMatrix) -> Result<Self> {
        let factor = linalg::cholesky(&gamma).map_err(|_| Error::SingularCovariance)?;
        let inverse = linalg::spd_inverse(&factor);
        Ok(Self { gamma, factor, inverse })
    }

    pub fn logdet(&self) -> f64 {
        linalg::logdet(&self.factor)
    }
}

#[derive(Clone, Debug)]
pub struct CostEvaluation {
    pub value: f64,
    pub gradient: Option<Vec<f64>>,
    pub hessian: Option<SymMatrix>,
    pub residual_cov: ResidualCovariance,
}

/// Which objective an estimator minimizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `U_n(W) = ln det Γ_n(W)`.
    LogDet,
    /// Mean squared residual norm `V_n(W) / n`.
    SumSquares,
    /// `(1/n) Σ r_tᵀ Γ⁻¹ r_t` for a fixed `Γ`.
    Gls(SymMatrix),
}

/// Residual rows `y_t − F_W(z_t)`, flattened row-major (`n × d`).
pub fn residuals(w: &WeightVector, data: &Dataset) -> Result<Vec<f64>> {
    Ok(forward_pass(w, data)?.res)
}

fn covariance_of(res: &[f64], d: usize) -> Result<ResidualCovariance> {
    let gamma = linalg::sample_covariance(res.chunks_exact(d))?;
    ResidualCovariance::from_gamma(gamma)
}

pub fn gamma_n(w: &WeightVector, data: &Dataset) -> Result<ResidualCovariance> {
    covariance_of(&residuals(w, data)?, data.output_dim())
}

pub fn u_n(w: &WeightVector, data: &Dataset) -> Result<f64> {
    Ok(evaluate_u_n(w, data, false, false)?.value)
}

/// Raw sum of squared residual norms (no `1/n`).
pub fn v_n(w: &WeightVector, data: &Dataset) -> Result<f64> {
    Ok(residuals(w, data)?.iter().map(|r| r * r).sum())
}

pub fn gls_cost(w: &WeightVector, data: &Dataset, gamma: &SymMatrix) -> Result<f64> {
    if gamma.dim() != data.output_dim() {
        return Err(Error::DimensionMismatch("GLS covariance dimension".into()));
    }
    let factor = linalg::cholesky(gamma).map_err(|_| Error::SingularCovariance)?;
    let d = data.output_dim();
    let res = residuals(w, data)?;
    let total: f64 = res
        .chunks_exact(d)
        .map(|r| r.iter().zip(factor.solve(r)).map(|(a, b)| a * b).sum::<f64>())
        .sum();
    Ok(total / data.len() as f64)
}

fn check_index(w: &WeightVector, k: usize) {
    assert!(k < w.arch().param_count(), "parameter index {k} out of range");
}

/// `A_n(W_k) = (1/n) Σ −∂F/∂W_k (y_t − F_W(z_t))ᵀ`.
pub fn a_n(w: &WeightVector, data: &Dataset, k: usize) -> Result<DenseMatrix> {
    data.check_architecture(w.arch())?;
    check_index(w, k);
    let d = data.output_dim();
    let n = data.len() as f64;
    let mut acc = DenseMatrix::zeros(d);
    for t in 0..data.len() {
        let z = data.input(t);
        let g = mlp::weight_jacobian(w, z).column(k);
        let f = mlp::forward(w, z);
        let y = data.target(t);
        for i in 0..d {
            for j in 0..d {
                *acc.get_mut(i, j) -= g[i] * (y[j] - f[j]) / n;
            }
        }
    }
    Ok(acc)
}

/// `B_n(W_k, W_l) = (1/n) Σ ∂F/∂W_k ∂F/∂W_lᵀ`.
pub fn b_n(w: &WeightVector, data: &Dataset, k: usize, l: usize) -> Result<DenseMatrix> {
    data.check_architecture(w.arch())?;
    check_index(w, k);
    check_index(w, l);
    let d = data.output_dim();
    let n = data.len() as f64;
    let mut acc = DenseMatrix::zeros(d);
    for t in 0..data.len() {
        let jac = mlp::weight_jacobian(w, data.input(t));
        let (gk, gl) = (jac.column(k), jac.column(l));
        for i in 0..d {
            for j in 0..d {
                *acc.get_mut(i, j) += gk[i] * gl[j] / n;
            }
        }
    }
    Ok(acc)
}

/// `C_n(W_k, W_l) = (1/n) Σ −(y_t − F_W(z_t)) ∂²F/∂W_k∂W_lᵀ`.
pub fn c_n(w: &WeightVector, data: &Dataset, k: usize, l: usize) -> Result<DenseMatrix> {
    data.check_architecture(w.arch())?;
    check_index(w, k);
    check_index(w, l);
    let d = data.output_dim();
    let n = data.len() as f64;
    let mut acc = DenseMatrix::zeros(d);
    for t in 0..data.len() {
        let z = data.input(t);
        let h = mlp::weight_second_derivative(w, z, k, l);
        let f = mlp::forward(w, z);
        let y = data.target(t);
        for i in 0..d {
            for j in 0..d {
                *acc.get_mut(i, j) -= (y[i] - f[i]) * h[j] / n;
            }
        }
    }
    Ok(acc)
}

/// Per-sample forward quantities kept between passes.
struct Pass {
    act: Vec<f64>,
    slope: Vec<f64>,
    res: Vec<f64>,
}

fn forward_pass(w: &WeightVector, data: &Dataset) -> Result<Pass> {
    data.check_architecture(w.arch())?;
    let (h, d) = (w.arch().hidden_units, data.output_dim());
    let n = data.len();
    let mut act = vec![0.0; n * h];
    let mut slope = vec![0.0; n * h];
    let mut res = vec![0.0; n * d];
    let mut out = vec![0.0; d];
    for t in 0..n {
        let (a, s) = (&mut act[t * h..(t + 1) * h], &mut slope[t * h..(t + 1) * h]);
        mlp::hidden_layer(w, data.input(t), a, s);
        mlp::output_from_hidden(w, a, &mut out);
        for (i, y) in data.target(t).iter().enumerate() {
            res[t * d + i] = y - out[i];
        }
    }
    Ok(Pass { act, slope, res })
}

/// `−(2/n) Σ J_tᵀ M r_t`: the gradient shared by all three costs, with
/// `M = Γ_n⁻¹`, `I` or a fixed `Γ⁻¹`.
fn weighted_gradient(w: &WeightVector, data: &Dataset, pass: &Pass, metric: &SymMatrix) -> Vec<f64> {
    let arch = w.arch();
    let (h, d, s) = (arch.hidden_units, arch.output_dim, arch.param_count());
    let n = data.len();
    let mut grad = vec![0.0; s];
    let mut delta = vec![0.0; h];
    for t in 0..n {
        let q = metric.mul_vec(&pass.res[t * d..(t + 1) * d]);
        let act = &pass.act[t * h..(t + 1) * h];
        let slope = &pass.slope[t * h..(t + 1) * h];
        for j in 0..h {
            let mut back = 0.0;
            for (i, qi) in q.iter().enumerate() {
                back += w.weights[arch.output_weight_index(i, j)] * qi;
                grad[arch.output_weight_index(i, j)] += qi * act[j];
            }
            delta[j] = back * slope[j];
        }
        for (i, qi) in q.iter().enumerate() {
            grad[arch.output_bias_index(i)] += qi;
        }
        let z = data.input(t);
        for j in 0..h {
            for (m, zm) in z.iter().enumerate() {
                grad[arch.hidden_weight_index(j, m)] += delta[j] * zm;
            }
            grad[arch.hidden_bias_index(j)] += delta[j];
        }
    }
    let scale = -2.0 / n as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    grad
}

/// `(1/n) Σ J_tᵀ M J_t`, i.e. the matrix of `tr(M B_n(k,l))`.
pub(crate) fn jacobian_gram(w: &WeightVector, data: &Dataset, metric: &SymMatrix) -> Result<SymMatrix> {
    let pass = forward_pass(w, data)?;
    Ok(jacobian_gram_with(w, data, &pass, metric))
}

fn jacobian_gram_with(w: &WeightVector, data: &Dataset, pass: &Pass, metric: &SymMatrix) -> SymMatrix {
    let arch = w.arch();
    let (h, d, s) = (arch.hidden_units, arch.output_dim, arch.param_count());
    let n = data.len();
    let mut jac = vec![0.0; d * s];
    let mut mj = vec![0.0; d * s];
    let mut acc = vec![0.0; s * s];
    for t in 0..n {
        mlp::fill_jacobian(
            w,
            data.input(t),
            &pass.act[t * h..(t + 1) * h],
            &pass.slope[t * h..(t + 1) * h],
            &mut jac,
        );
        for i in 0..d {
            for k in 0..s {
                mj[i * s + k] = (0..d).map(|a| metric.at(i, a) * jac[a * s + k]).sum();
            }
        }
        for k in 0..s {
            for l in 0..=k {
                let mut v = 0.0;
                for i in 0..d {
                    v += jac[i * s + k] * mj[i * s + l];
                }
                acc[k * s + l] += v;
            }
        }
    }
    let n = n as f64;
    SymMatrix::from_fn(s, |k, l| if l <= k { acc[k * s + l] / n } else { acc[l * s + k] / n })
}

/// Value, gradient and optionally Hessian of `U_n` in one pass over the data.
pub fn evaluate_u_n(
    w: &WeightVector,
    data: &Dataset,
    with_gradient: bool,
    with_hessian: bool,
) -> Result<CostEvaluation> {
    let pass = forward_pass(w, data)?;
    let cov = covariance_of(&pass.res, data.output_dim())?;
    let value = cov.logdet();
    let gradient = (with_gradient || with_hessian).then(|| weighted_gradient(w, data, &pass, &cov.inverse));
    let hessian = with_hessian.then(|| hessian_with(w, data, &pass, &cov.inverse));
    Ok(CostEvaluation {
        value,
        gradient,
        hessian,
        residual_cov: cov,
    })
}

pub fn grad_u_n(w: &WeightVector, data: &Dataset) -> Result<Vec<f64>> {
    Ok(evaluate_u_n(w, data, true, false)?.gradient.expect("requested"))
}

pub fn hessian_u_n(w: &WeightVector, data: &Dataset) -> Result<SymMatrix> {
    Ok(evaluate_u_n(w, data, false, true)?.hessian.expect("requested"))
}

fn hessian_with(w: &WeightVector, data: &Dataset, pass: &Pass, ginv: &SymMatrix) -> SymMatrix {
    let arch = w.arch();
    let (h, d, s, din) = (arch.hidden_units, arch.output_dim, arch.param_count(), arch.input_dim);
    let n = data.len();
    let nf = n as f64;

    // A_n(k) for every k, as s blocks of d×d
    let mut a = vec![0.0; s * d * d];
    // Σ q_tᵀ ∂²F/∂W_k∂W_l
    let mut curv = vec![0.0; s * s];
    let mut jac = vec![0.0; d * s];
    let mut feat = vec![0.0; din + 1];
    for t in 0..n {
        let act = &pass.act[t * h..(t + 1) * h];
        let slope = &pass.slope[t * h..(t + 1) * h];
        let r = &pass.res[t * d..(t + 1) * d];
        let z = data.input(t);
        mlp::fill_jacobian(w, z, act, slope, &mut jac);
        for k in 0..s {
            for i in 0..d {
                let g = jac[i * s + k];
                if g != 0.0 {
                    for j in 0..d {
                        a[k * d * d + i * d + j] -= g * r[j];
                    }
                }
            }
        }

        let q = ginv.mul_vec(r);
        feat[..din].copy_from_slice(z);
        feat[din] = 1.0;
        let input_index = |j: usize, m: usize| {
            if m < din {
                arch.hidden_weight_index(j, m)
            } else {
                arch.hidden_bias_index(j)
            }
        };
        for j in 0..h {
            let back: f64 = (0..d).map(|i| w.weights[arch.output_weight_index(i, j)] * q[i]).sum();
            let second = -2.0 * act[j] * slope[j];
            for m in 0..=din {
                let km = input_index(j, m);
                for m2 in 0..=din {
                    curv[km * s + input_index(j, m2)] += back * second * feat[m] * feat[m2];
                }
                for (i, qi) in q.iter().enumerate() {
                    let v = qi * slope[j] * feat[m];
                    let ko = arch.output_weight_index(i, j);
                    curv[km * s + ko] += v;
                    curv[ko * s + km] += v;
                }
            }
        }
    }
    a.iter_mut().for_each(|v| *v /= nf);

    // Γ⁻¹ A_k and Γ⁻¹ A_k Γ⁻¹
    let block = |k: usize| DenseMatrix::from_row_major(d, a[k * d * d..(k + 1) * d * d].to_vec()).expect("block");
    let blocks: Vec<DenseMatrix> = (0..s).map(block).collect();
    let left: Vec<DenseMatrix> = blocks.iter().map(|b| ginv.as_dense().matmul(b)).collect();
    let sandwich: Vec<DenseMatrix> = left.iter().map(|m| m.matmul(ginv)).collect();

    let gram = jacobian_gram_with(w, data, pass, ginv);
    let mut full = DenseMatrix::zeros(s);
    for k in 0..s {
        for l in 0..s {
            let plain = linalg::trace_product(&left[l], &left[k]).expect("dims");
            // tr(Γ⁻¹ A_lᵀ Γ⁻¹ A_k) = Σ_ij (A_l)_ij (Γ⁻¹ A_k Γ⁻¹)_ij
            let transposed: f64 = blocks[l]
                .as_slice()
                .iter()
                .zip(sandwich[k].as_slice())
                .map(|(x, y)| x * y)
                .sum();
            let value = -2.0 * (plain + transposed) + 2.0 * gram.at(k, l) - 2.0 * curv[k * s + l] / nf;
            *full.get_mut(k, l) = value;
        }
    }
    SymMatrix::symmetrize(&full)
}

/// Value and gradient of the chosen cost. Singular covariance is an error so
/// that line searches backtrack rather than step into `-∞`.
pub fn evaluate(
    kind: &CostKind,
    w: &WeightVector,
    data: &Dataset,
    with_gradient: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    match kind {
        CostKind::LogDet => {
            let e = evaluate_u_n(w, data, with_gradient, false)?;
            Ok((e.value, e.gradient))
        }
        CostKind::SumSquares => {
            let pass = forward_pass(w, data)?;
            let value = pass.res.iter().map(|r| r * r).sum::<f64>() / data.len() as f64;
            let grad =
                with_gradient.then(|| weighted_gradient(w, data, &pass, &SymMatrix::identity(data.output_dim())));
            Ok((value, grad))
        }
        CostKind::Gls(gamma) => {
            if gamma.dim() != data.output_dim() {
                return Err(Error::DimensionMismatch("GLS covariance dimension".into()));
            }
            let factor = linalg::cholesky(gamma).map_err(|_| Error::SingularCovariance)?;
            let inv = linalg::spd_inverse(&factor);
            let pass = forward_pass(w, data)?;
            let d = data.output_dim();
            let value = pass
                .res
                .chunks_exact(d)
                .map(|r| r.iter().zip(inv.mul_vec(r)).map(|(a, b)| a * b).sum::<f64>())
                .sum::<f64>()
                / data.len() as f64;
            let grad = with_gradient.then(|| weighted_gradient(w, data, &pass, &inv));
            Ok((value, grad))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{transform_units, Architecture};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_problem(din: usize, h: usize, d: usize, n: usize, seed: u64) -> (WeightVector, Dataset) {
        let arch = Architecture::new(din, h, d).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = WeightVector::new(
            arch,
            (0..arch.param_count()).map(|_| rng.random_range(-1.5..1.5)).collect(),
        )
        .unwrap();
        let inputs: Vec<f64> = (0..n * din).map(|_| rng.random_range(-2.0..2.0)).collect();
        let targets: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
        (w, Dataset::new(din, d, inputs, targets).unwrap())
    }

    fn residual_loop(w: &WeightVector, data: &Dataset) -> Vec<Vec<f64>> {
        (0..data.len())
            .map(|t| {
                let f = mlp::forward(w, data.input(t));
                data.target(t).iter().zip(&f).map(|(y, f)| y - f).collect()
            })
            .collect()
    }

    /// Dataset whose residuals under the zero network equal the given rows.
    fn data_with_residuals(rows: &[Vec<f64>]) -> (WeightVector, Dataset) {
        let d = rows[0].len();
        let arch = Architecture::new(1, 1, d).unwrap();
        let n = rows.len();
        let data = Dataset::new(1, d, (0..n).map(|t| t as f64).collect(), rows.concat()).unwrap();
        (WeightVector::zeros(arch), data)
    }

    #[test]
    fn residuals_examples() {
        let (w, data) = random_problem(2, 2, 2, 30, 1);
        let zero_targets = Dataset::new(2, 2, (0..60).map(|v| v as f64).collect(), vec![0.0; 60]).unwrap();
        assert!(residuals(&WeightVector::zeros(*w.arch()), &zero_targets)
            .unwrap()
            .iter()
            .all(|&r| r == 0.0));

        let exact_targets: Vec<f64> = (0..data.len()).flat_map(|t| mlp::forward(&w, data.input(t))).collect();
        let exact = Dataset::new(
            2,
            2,
            (0..data.len()).flat_map(|t| data.input(t).to_vec()).collect(),
            exact_targets,
        )
        .unwrap();
        assert!(residuals(&w, &exact).unwrap().iter().all(|&r| r == 0.0));

        let got = residuals(&w, &data).unwrap();
        for (t, row) in residual_loop(&w, &data).iter().enumerate() {
            for i in 0..2 {
                assert!((got[t * 2 + i] - row[i]).abs() < 1e-14);
            }
        }
        let other = Architecture::new(3, 2, 2).unwrap();
        assert!(matches!(
            residuals(&WeightVector::zeros(other), &data),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn gamma_and_costs_on_constructed_residuals() {
        let (w, data) = data_with_residuals(&[vec![1.0], vec![-1.0], vec![2.0]]);
        let g = gamma_n(&w, &data).unwrap();
        assert_eq!(g.gamma.as_slice(), &[2.0]);
        assert!((u_n(&w, &data).unwrap() - 2f64.ln()).abs() < 1e-15);

        let (w, data) = data_with_residuals(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.0]]);
        let expected = 2.0 * (1.0f64 / 3.0).ln();
        assert!((u_n(&w, &data).unwrap() - expected).abs() < 1e-14);
        assert_eq!(v_n(&w, &data).unwrap(), 2.0);

        // rows (1,0),(0,1) doubled: Γ_n = diag(1/2, 1/2) without dropping below n = d+1
        let (w, data) = data_with_residuals(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert!((u_n(&w, &data).unwrap() + 2.0 * 2f64.ln()).abs() < 1e-15);

        // Γ_n = I
        let s = 2f64.sqrt();
        let (w, data) = data_with_residuals(&[vec![s, 0.0], vec![-s, 0.0], vec![0.0, s], vec![0.0, -s]]);
        assert!(u_n(&w, &data).unwrap().abs() < 1e-15);

        let (w, data) = data_with_residuals(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        assert!(matches!(gamma_n(&w, &data), Err(Error::SingularCovariance)));
        assert_eq!(v_n(&w, &data).unwrap(), 0.0);
    }

    #[test]
    fn gamma_and_v_n_match_loop_oracle() {
        let (w, data) = random_problem(3, 2, 2, 100, 2);
        let rows = residual_loop(&w, &data);
        let g = gamma_n(&w, &data).unwrap();
        let mut v = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                let naive: f64 = rows.iter().map(|r| r[i] * r[j]).sum::<f64>() / 100.0;
                assert!((g.gamma.at(i, j) - naive).abs() < 1e-12);
            }
        }
        for r in &rows {
            v += r[0] * r[0] + r[1] * r[1];
        }
        assert!((v_n(&w, &data).unwrap() - v).abs() < 1e-12 * v);
    }

    #[test]
    fn gls_examples() {
        let (w, data) = random_problem(2, 2, 2, 40, 3);
        let id = gls_cost(&w, &data, &SymMatrix::identity(2)).unwrap();
        assert!((id - v_n(&w, &data).unwrap() / 40.0).abs() < 1e-12);

        let (w1, d1) = data_with_residuals(&[vec![2.0], vec![2.0]]);
        assert!((gls_cost(&w1, &d1, &SymMatrix::diagonal(&[4.0])).unwrap() - 1.0).abs() < 1e-15);

        let gamma = SymMatrix::from_row_major(2, vec![2.0, 0.5, 0.5, 1.0]).unwrap();
        let det = 2.0 * 1.0 - 0.25;
        let inv = [1.0 / det, -0.5 / det, -0.5 / det, 2.0 / det];
        let oracle: f64 = residual_loop(&w, &data)
            .iter()
            .map(|r| r[0] * (inv[0] * r[0] + inv[1] * r[1]) + r[1] * (inv[2] * r[0] + inv[3] * r[1]))
            .sum::<f64>()
            / 40.0;
        assert!((gls_cost(&w, &data, &gamma).unwrap() - oracle).abs() < 1e-10);
        let singular = SymMatrix::from_row_major(2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(matches!(gls_cost(&w, &data, &singular), Err(Error::SingularCovariance)));
    }

    #[test]
    fn building_blocks_small_cases() {
        let (w, data) = data_with_residuals(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![0.0, 0.0]]);
        let s = w.arch().param_count();
        for k in 0..s {
            assert!(a_n(&w, &data, k).unwrap().as_slice().iter().all(|&v| v == 0.0));
            assert!(c_n(&w, &data, k, 0).unwrap().as_slice().iter().all(|&v| v == 0.0));
        }

        // n = 1 is below the d+1 floor for Dataset, so check the d = 1 case with
        // two identical rows: A = −g r.
        let arch = Architecture::new(1, 1, 1).unwrap();
        let w = WeightVector::new(arch, vec![0.4, 0.1, 0.7, 0.2]).unwrap();
        let data = Dataset::new(1, 1, vec![0.5, 0.5], vec![1.3, 1.3]).unwrap();
        let g = mlp::weight_jacobian(&w, &[0.5]).column(0)[0];
        let r = 1.3 - mlp::forward(&w, &[0.5])[0];
        assert!((a_n(&w, &data, 0).unwrap().at(0, 0) + g * r).abs() < 1e-15);

        let (w, data) = random_problem(2, 2, 3, 25, 4);
        let arch = *w.arch();
        for i in 0..3 {
            for j in 0..3 {
                let b = b_n(&w, &data, arch.output_bias_index(i), arch.output_bias_index(j)).unwrap();
                for a in 0..3 {
                    for c in 0..3 {
                        let e = if a == i && c == j { 1.0 } else { 0.0 };
                        assert!((b.at(a, c) - e).abs() < 1e-14);
                    }
                }
                let c = c_n(&w, &data, arch.output_bias_index(i), arch.output_bias_index(j)).unwrap();
                assert!(c.as_slice().iter().all(|&v| v == 0.0));
            }
        }
        for k in 0..arch.param_count() {
            let b = b_n(&w, &data, k, k).unwrap();
            let sym = SymMatrix::symmetrize(&b);
            assert!(linalg::sym_eigenvalues(&sym)[0] > -1e-12);
            let l = (k * 7 + 3) % arch.param_count();
            let bkl = b_n(&w, &data, k, l).unwrap();
            let blk = b_n(&w, &data, l, k).unwrap();
            assert_eq!(bkl, blk.transpose());
        }
    }

    #[test]
    fn building_blocks_match_definition_loops() {
        let (w, data) = random_problem(2, 2, 2, 50, 5);
        let rows = residual_loop(&w, &data);
        let s = w.arch().param_count();
        for k in 0..s {
            let a = a_n(&w, &data, k).unwrap();
            for l in 0..s {
                let b = b_n(&w, &data, k, l).unwrap();
                let c = c_n(&w, &data, k, l).unwrap();
                let (mut ea, mut eb, mut ec) = ([[0.0; 2]; 2], [[0.0; 2]; 2], [[0.0; 2]; 2]);
                for (t, r) in rows.iter().enumerate() {
                    let z = data.input(t);
                    let jac = mlp::weight_jacobian(&w, z);
                    let hkl = mlp::weight_second_derivative(&w, z, k, l);
                    for i in 0..2 {
                        for j in 0..2 {
                            ea[i][j] += -jac.at(i, k) * r[j] / 50.0;
                            eb[i][j] += jac.at(i, k) * jac.at(j, l) / 50.0;
                            ec[i][j] += -r[i] * hkl[j] / 50.0;
                        }
                    }
                }
                for i in 0..2 {
                    for j in 0..2 {
                        assert!((a.at(i, j) - ea[i][j]).abs() < 1e-12);
                        assert!((b.at(i, j) - eb[i][j]).abs() < 1e-12);
                        assert!((c.at(i, j) - ec[i][j]).abs() < 1e-12);
                    }
                }
            }
        }
    }

    fn fd_gradient(w: &WeightVector, data: &Dataset, step: f64) -> Vec<f64> {
        (0..w.arch().param_count())
            .map(|k| {
                let mut p = w.clone();
                p.weights[k] += step;
                let mut m = w.clone();
                m.weights[k] -= step;
                (u_n(&p, data).unwrap() - u_n(&m, data).unwrap()) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn gradient_is_trace_formula_and_matches_finite_differences() {
        for seed in 0..10 {
            let (w, data) = random_problem(3, 2, 2, 200, 100 + seed);
            let grad = grad_u_n(&w, &data).unwrap();
            let cov = gamma_n(&w, &data).unwrap();
            let fd = fd_gradient(&w, &data, 1e-6);
            for k in 0..w.arch().param_count() {
                let trace = 2.0 * linalg::trace_product(&cov.inverse, &a_n(&w, &data, k).unwrap()).unwrap();
                assert!((grad[k] - trace).abs() < 1e-12);
                assert!((grad[k] - fd[k]).abs() / grad[k].abs().max(fd[k].abs()).max(1.0) < 1e-5);
            }
        }
    }

    #[test]
    fn scalar_output_gradient_is_scaled_mse_gradient() {
        let (w, data) = random_problem(2, 2, 1, 60, 6);
        let grad = grad_u_n(&w, &data).unwrap();
        let rows = residual_loop(&w, &data);
        let gamma: f64 = rows.iter().map(|r| r[0] * r[0]).sum::<f64>() / 60.0;
        for (k, gk) in grad.iter().enumerate() {
            let mse: f64 = rows
                .iter()
                .enumerate()
                .map(|(t, r)| -2.0 * mlp::weight_jacobian(&w, data.input(t)).at(0, k) * r[0])
                .sum::<f64>()
                / 60.0;
            assert!((gk - mse / gamma).abs() < 1e-12);
        }
    }

    #[test]
    fn hessian_matches_block_formula_and_finite_differences() {
        for seed in 0..5 {
            let (w, data) = random_problem(3, 2, 2, 200, 200 + seed);
            let hess = hessian_u_n(&w, &data).unwrap();
            let cov = gamma_n(&w, &data).unwrap();
            let ginv = &cov.inverse;
            let s = w.arch().param_count();
            let blocks: Vec<DenseMatrix> = (0..s).map(|k| a_n(&w, &data, k).unwrap()).collect();
            for k in 0..s {
                for l in 0..s {
                    assert_eq!(hess.at(k, l), hess.at(l, k));
                    let al = &blocks[l];
                    let sum = DenseMatrix::from_fn(2, |i, j| al.at(i, j) + al.at(j, i));
                    let left = ginv.as_dense().matmul(&sum).matmul(ginv).matmul(&blocks[k]);
                    let first = -2.0 * (0..2).map(|i| left.at(i, i)).sum::<f64>();
                    let second = 2.0 * linalg::trace_product(ginv, &b_n(&w, &data, k, l).unwrap()).unwrap();
                    let third = 2.0 * linalg::trace_product(ginv, &c_n(&w, &data, k, l).unwrap()).unwrap();
                    let formula = first + second + third;
                    assert!((hess.at(k, l) - formula).abs() < 1e-10 * formula.abs().max(1.0));
                }
            }
            let step = 1e-5;
            for l in 0..s {
                let mut p = w.clone();
                p.weights[l] += step;
                let mut m = w.clone();
                m.weights[l] -= step;
                let (gp, gm) = (grad_u_n(&p, &data).unwrap(), grad_u_n(&m, &data).unwrap());
                for k in 0..s {
                    let fd = (gp[k] - gm[k]) / (2.0 * step);
                    let h = hess.at(k, l);
                    assert!(
                        (h - fd).abs() / h.abs().max(fd.abs()).max(1.0) < 1e-4,
                        "({k},{l}) {h} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn output_bias_hessian_near_twice_inverse_gamma_at_small_residuals() {
        let (w, data) = random_problem(2, 1, 2, 300, 7);
        let arch = *w.arch();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let targets: Vec<f64> = (0..data.len())
            .flat_map(|t| {
                mlp::forward(&w, data.input(t))
                    .into_iter()
                    .map(|f| f + 1e-4 * rng.random_range(-1.0..1.0))
                    .collect::<Vec<_>>()
            })
            .collect();
        let inputs: Vec<f64> = (0..data.len()).flat_map(|t| data.input(t).to_vec()).collect();
        let data = Dataset::new(2, 2, inputs, targets).unwrap();
        let hess = hessian_u_n(&w, &data).unwrap();
        let cov = gamma_n(&w, &data).unwrap();
        for i in 0..2 {
            let k = arch.output_bias_index(i);
            let expect = 2.0 * cov.inverse.at(i, i);
            assert!((hess.at(k, k) - expect).abs() < 0.05 * expect);
        }
    }

    #[test]
    fn costs_invariant_under_symmetry_group() {
        let (w, data) = random_problem(2, 3, 2, 80, 9);
        let image = transform_units(&w, &[2, 0, 1], &[true, false, true]);
        assert!((u_n(&w, &data).unwrap() - u_n(&image, &data).unwrap()).abs() < 1e-12);
        let (v1, v2) = (v_n(&w, &data).unwrap(), v_n(&image, &data).unwrap());
        assert!((v1 - v2).abs() < 1e-12 * v1.max(1.0));
    }

    #[test]
    fn gls_gradient_points_like_log_det_gradient() {
        let (w, data) = random_problem(3, 2, 2, 200, 10);
        let cov = gamma_n(&w, &data).unwrap();
        let (_, g_gls) = evaluate(&CostKind::Gls(cov.gamma.clone()), &w, &data, true).unwrap();
        let g_gls = g_gls.unwrap();
        let g_u = grad_u_n(&w, &data).unwrap();
        let dot: f64 = g_gls.iter().zip(&g_u).map(|(a, b)| a * b).sum();
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        let cos = (dot / (norm(&g_gls) * norm(&g_u))).clamp(-1.0, 1.0);
        assert!(cos.acos() < 1e-3);
    }

    #[test]
    fn evaluate_kinds_agree_with_direct_costs() {
        let (w, data) = random_problem(2, 2, 2, 50, 11);
        let (u, _) = evaluate(&CostKind::LogDet, &w, &data, false).unwrap();
        assert!((u - u_n(&w, &data).unwrap()).abs() < 1e-14);
        let (v, g) = evaluate(&CostKind::SumSquares, &w, &data, true).unwrap();
        assert!((v - v_n(&w, &data).unwrap() / 50.0).abs() < 1e-13);
        let g = g.unwrap();
        let step = 1e-6;
        for k in 0..w.arch().param_count() {
            let mut p = w.clone();
            p.weights[k] += step;
            let mut m = w.clone();
            m.weights[k] -= step;
            let fd = (v_n(&p, &data).unwrap() - v_n(&m, &data).unwrap()) / (2.0 * step * 50.0);
            assert!((g[k] - fd).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
