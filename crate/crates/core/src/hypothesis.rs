//! The nested-model statistics `T_n` (log-determinant cost) and `S_n`
//! (least squares), and chi-squared tail probabilities.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::cost::{CostKind, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{self, FitConfig, FitResult};
use crate::linalg::Square;
use crate::mlp::{Architecture, ParameterMask};

/// Negative statistics above this are optimizer slack and clamp to zero.
pub const NEGATIVE_SLACK: f64 = -1e-9;

/// Levels at which reports record a decision.
pub const LEVELS: [f64; 3] = [0.10, 0.05, 0.01];

fn chi2(dof: usize) -> ChiSquared {
    assert!(dof > 0, "chi-squared needs positive degrees of freedom");
    ChiSquared::new(dof as f64).expect("positive degrees of freedom")
}

/// `P(χ²_dof ≤ x)`.
pub fn chi2_cdf(x: f64, dof: usize) -> f64 {
    chi2(dof).cdf(x.max(0.0))
}

/// `P(χ²_dof > x)`, computed directly to keep precision in the far tail.
pub fn chi2_sf(x: f64, dof: usize) -> f64 {
    chi2(dof).sf(x.max(0.0))
}

/// Inverse CDF by bisection, absolute error below 1e-8. The library inverse
/// loses accuracy in the lower tail for small dof.
pub fn chi2_quantile(p: f64, dof: usize) -> f64 {
    assert!((0.0..1.0).contains(&p), "probability must lie in [0, 1)");
    if p == 0.0 {
        return 0.0;
    }
    let law = chi2(dof);
    let mut hi = (dof as f64).max(1.0);
    while law.cdf(hi) < p {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    while hi - lo > 1e-10 {
        let mid = 0.5 * (lo + hi);
        if law.cdf(mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelDecision {
    pub level: f64,
    pub reject: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestReport {
    pub n: usize,
    pub t_n: f64,
    /// Least-squares statistic; its null law has unknown weights, so it gets
    /// no p-value.
    pub s_n: Option<f64>,
    pub dof: usize,
    pub p_value_t: f64,
    /// `n (Ŵ_n − Ŵ⁰_n)ᵀ Î₀ (Ŵ_n − Ŵ⁰_n)`, the quadratic approximation of `t_n`.
    pub quadratic_form: Option<f64>,
    pub fit_full: FitResult,
    pub fit_restricted: FitResult,
    pub decision_at_levels: Vec<LevelDecision>,
}

fn check_restricted(arch: &Architecture, mask: &ParameterMask) -> Result<usize> {
    if mask.architecture != *arch {
        return Err(Error::ArchMismatch("restricted mask architecture".into()));
    }
    match mask.pinned_count() {
        0 => Err(Error::InvalidInput(
            "restricted mask must pin at least one coordinate".into(),
        )),
        dof => Ok(dof),
    }
}

fn scaled_difference(statistic: &'static str, n: usize, restricted: f64, full: f64) -> Result<f64> {
    let value = n as f64 * (restricted - full);
    if value >= 0.0 {
        Ok(value)
    } else if value >= NEGATIVE_SLACK {
        Ok(0.0)
    } else {
        Err(Error::InconsistentStatistic { statistic, value })
    }
}

/// Restricted fit, then a full fit whose starts include the restricted
/// optimum so the full minimum can never be worse.
fn nested_fits(
    data: &Dataset,
    arch: Architecture,
    mask: &ParameterMask,
    cfg: &FitConfig,
    kind: &CostKind,
) -> Result<(FitResult, FitResult)> {
    let restricted = estimate::minimize(data, arch, mask, cfg, kind)?;
    let full = estimate::minimize_with_starts(
        data,
        arch,
        &ParameterMask::all_free(arch),
        cfg,
        kind,
        std::slice::from_ref(&restricted.weights),
    )?;
    Ok((full, restricted))
}

/// `n (Ŵ_n − Ŵ⁰_n)ᵀ Î₀ (Ŵ_n − Ŵ⁰_n)` with `Î₀` taken from the full fit.
pub fn quadratic_form(full: &FitResult, restricted: &FitResult, n: usize) -> Option<f64> {
    let info = full.info_matrix.as_ref()?;
    let diff: Vec<f64> = full
        .weights
        .weights
        .iter()
        .zip(&restricted.weights.weights)
        .map(|(a, b)| a - b)
        .collect();
    let s = diff.len();
    let mut q = 0.0;
    for k in 0..s {
        for l in 0..s {
            q += diff[k] * info.at(k, l) * diff[l];
        }
    }
    Some(n as f64 * q)
}

/// `T_n = n (min_{Θ_q} U_n − min_{Θ_s} U_n)` with its χ² p-value.
pub fn t_statistic(
    data: &Dataset,
    arch: Architecture,
    mask_restricted: &ParameterMask,
    cfg: &FitConfig,
) -> Result<TestReport> {
    let dof = check_restricted(&arch, mask_restricted)?;
    let (fit_full, fit_restricted) = nested_fits(data, arch, mask_restricted, cfg, &CostKind::LogDet)?;
    let n = data.len();
    let t_n = scaled_difference("T_n", n, fit_restricted.cost, fit_full.cost)?;
    let p_value_t = chi2_sf(t_n, dof);
    Ok(TestReport {
        n,
        t_n,
        s_n: None,
        dof,
        p_value_t,
        quadratic_form: quadratic_form(&fit_full, &fit_restricted, n),
        decision_at_levels: LEVELS
            .iter()
            .map(|&level| LevelDecision {
                level,
                reject: p_value_t < level,
            })
            .collect(),
        fit_full,
        fit_restricted,
    })
}

/// `S_n = n (min_{Θ_q} V̄_n − min_{Θ_s} V̄_n)` with `V̄_n = V_n / n`.
pub fn s_statistic(
    data: &Dataset,
    arch: Architecture,
    mask_restricted: &ParameterMask,
    cfg: &FitConfig,
) -> Result<f64> {
    check_restricted(&arch, mask_restricted)?;
    let (full, restricted) = nested_fits(data, arch, mask_restricted, cfg, &CostKind::SumSquares)?;
    scaled_difference("S_n", data.len(), restricted.cost, full.cost)
}

/// `T_n` report with `S_n` filled in.
pub fn run_test(
    data: &Dataset,
    arch: Architecture,
    mask_restricted: &ParameterMask,
    cfg: &FitConfig,
) -> Result<TestReport> {
    let mut report = t_statistic(data, arch, mask_restricted, cfg)?;
    report.s_n = Some(s_statistic(data, arch, mask_restricted, cfg)?);
    Ok(report)
}

impl TestReport {
    /// Fixed-width summary table.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<10} {:>14} {:>5} {:>12} {:>6} {:>6} {:>6}\n",
            "statistic", "value", "dof", "p-value", "10%", "5%", "1%"
        ));
        let mark = |r: bool| if r { "reject" } else { "accept" };
        let d: Vec<&str> = self.decision_at_levels.iter().map(|l| mark(l.reject)).collect();
        out.push_str(&format!(
            "{:<10} {:>14.6} {:>5} {:>12.6e} {:>6} {:>6} {:>6}\n",
            "T_n", self.t_n, self.dof, self.p_value_t, d[0], d[1], d[2]
        ));
        if let Some(s) = self.s_n {
            out.push_str(&format!(
                "{:<10} {:>14.6} {:>5} {:>12} {:>6} {:>6} {:>6}\n",
                "S_n", s, self.dof, "-", "-", "-", "-"
            ));
        }
        out
    }
}
