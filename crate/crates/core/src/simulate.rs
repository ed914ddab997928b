//! Synthetic data under `Y = F_{W⁰}(Z) + ε`, Monte Carlo replication of the
//! nested tests, and empirical-distribution diagnostics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::cost::{self, Dataset};
use crate::error::{Error, Result};
use crate::estimate::{self, FitConfig, FitResult};
use crate::hypothesis::{self, chi2_cdf, chi2_quantile};
use crate::linalg::{self, Square, SymMatrix};
use crate::mlp::{self, ParameterMask, WeightVector};

/// Asymptotic Kolmogorov-Smirnov constants `c(α)` for α = 10%, 5%, 1%.
pub const KS_CONSTANTS: [(f64, f64); 3] = [(0.10, 1.224), (0.05, 1.358), (0.01, 1.628)];

/// Reports with a larger failed fraction are marked invalid.
pub const MAX_FAILURE_FRACTION: f64 = 0.05;

/// Critical KS distance `c(α)/√m`.
pub fn ks_critical(level: f64, m: usize) -> f64 {
    let c = KS_CONSTANTS
        .iter()
        .find(|(a, _)| (a - level).abs() < 1e-12)
        .map(|&(_, c)| c)
        .unwrap_or_else(|| panic!("no KS constant for level {level}"));
    c / (m as f64).sqrt()
}

/// Law of the standardized (zero mean, unit variance) noise components.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseFamily {
    Gaussian,
    /// Uniform on `[−√3, √3]`.
    ScaledUniform,
    /// Laplace with scale `1/√2`.
    ScaledLaplace,
}

impl NoiseFamily {
    fn draw(self, rng: &mut impl Rng) -> f64 {
        match self {
            NoiseFamily::Gaussian => rng.sample(StandardNormal),
            NoiseFamily::ScaledUniform => {
                let a = 3f64.sqrt();
                rng.random_range(-a..a)
            }
            NoiseFamily::ScaledLaplace => {
                let u: f64 = rng.random_range(-0.5..0.5);
                -u.signum() * (1.0 - 2.0 * u.abs()).ln() / 2f64.sqrt()
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputLaw {
    StandardGaussian,
    /// Independent uniform components on `[−a, a]`.
    UniformBox(f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub true_weights: WeightVector,
    pub noise_cov: SymMatrix,
    pub noise_family: NoiseFamily,
    pub input_law: InputLaw,
    pub n: usize,
    pub seed: u64,
}

impl GeneratorSpec {
    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let arch = self.true_weights.arch();
        arch.validate()?;
        if self.noise_cov.dim() != arch.output_dim {
            return Err(Error::DimensionMismatch(format!(
                "noise covariance is {0}x{0} but the network has {1} outputs",
                self.noise_cov.dim(),
                arch.output_dim
            )));
        }
        if let InputLaw::UniformBox(a) = self.input_law {
            if a.is_nan() || a <= 0.0 {
                return Err(Error::InvalidInput(
                    "uniform input box needs a positive half-width".into(),
                ));
            }
        }
        Ok(())
    }
}

pub fn generate(spec: &GeneratorSpec) -> Result<Dataset> {
    spec.validate()?;
    let factor = linalg::cholesky(&spec.noise_cov).map_err(|_| Error::SingularCovariance)?;
    let arch = spec.true_weights.arch();
    let (din, d) = (arch.input_dim, arch.output_dim);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut inputs = Vec::with_capacity(spec.n * din);
    let mut targets = Vec::with_capacity(spec.n * d);
    let mut z = vec![0.0; din];
    let mut u = vec![0.0; d];
    for _ in 0..spec.n {
        for v in z.iter_mut() {
            *v = match spec.input_law {
                InputLaw::StandardGaussian => rng.sample(StandardNormal),
                InputLaw::UniformBox(a) => rng.random_range(-a..a),
            };
        }
        for v in u.iter_mut() {
            *v = spec.noise_family.draw(&mut rng);
        }
        let noise = factor.lower_mul(&u);
        let f = mlp::forward(&spec.true_weights, &z);
        inputs.extend_from_slice(&z);
        targets.extend(f.iter().zip(&noise).map(|(a, b)| a + b));
    }
    Dataset::new(din, d, inputs, targets)
}

/// `sup_i max(|i/m − F(x_i)|, |(i−1)/m − F(x_i)|)` over sorted samples.
pub fn ks_statistic(sorted: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyInput);
    }
    let m = sorted.len() as f64;
    Ok(sorted.iter().enumerate().fold(0.0, |acc, (i, &x)| {
        let f = cdf(x);
        let above = ((i + 1) as f64 / m - f).abs();
        let below = (i as f64 / m - f).abs();
        acc.max(above).max(below)
    }))
}

fn sorted(samples: &[f64]) -> Vec<f64> {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Pairs `(χ²_dof quantile, empirical quantile)` at `p_i = (i − 0.5)/grid`.
pub fn qq_points(samples: &[f64], dof: usize, grid: usize) -> Result<Vec<(f64, f64)>> {
    if samples.is_empty() {
        return Err(Error::EmptyInput);
    }
    if grid < 2 {
        return Err(Error::InvalidInput("QQ grid needs at least two points".into()));
    }
    let v = sorted(samples);
    let m = v.len();
    Ok((1..=grid)
        .map(|i| {
            let p = (i as f64 - 0.5) / grid as f64;
            let idx = ((p * m as f64).ceil() as usize).clamp(1, m) - 1;
            (chi2_quantile(p, dof), v[idx])
        })
        .collect())
}

/// Estimate of the contrast `K(W, W⁰) = lim U_n(W) − U_n(W⁰)` on one large
/// generated sample.
pub fn contrast_probe(spec: &GeneratorSpec, w: &WeightVector, n_large: usize) -> Result<f64> {
    if n_large < 10_000 {
        return Err(Error::InvalidInput(format!(
            "contrast probe needs n ≥ 10⁴, got {n_large}"
        )));
    }
    let data = generate(&GeneratorSpec {
        n: n_large,
        ..spec.clone()
    })?;
    Ok(cost::u_n(w, &data)? - cost::u_n(&spec.true_weights, &data)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatisticKind {
    /// Log-determinant statistic `T_n`, plus its quadratic approximation.
    LogDet,
    /// Least-squares statistic `S_n`.
    SumSquares,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReplicationRecord {
    pub rep: usize,
    pub seed: u64,
    pub t_n: Option<f64>,
    pub s_n: Option<f64>,
    pub quadratic_form: Option<f64>,
    pub converged_full: bool,
    pub converged_restricted: bool,
    pub cost_full: Option<f64>,
    pub cost_restricted: Option<f64>,
    pub weights_full: Option<Vec<f64>>,
    pub weights_restricted: Option<Vec<f64>>,
    pub failure: Option<String>,
}

impl ReplicationRecord {
    fn usable(&self) -> bool {
        self.failure.is_none() && self.converged_full && self.converged_restricted
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistributionSummary {
    pub count: usize,
    pub mean: f64,
    pub ks_vs_chi2: f64,
    pub ks_critical_1pct: f64,
    pub qq_points: Vec<(f64, f64)>,
}

impl DistributionSummary {
    fn from_samples(samples: &[f64], dof: usize, grid: usize) -> Option<Self> {
        if samples.is_empty() {
            return None;
        }
        let v = sorted(samples);
        Some(Self {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            ks_vs_chi2: ks_statistic(&v, |x| chi2_cdf(x, dof)).ok()?,
            ks_critical_1pct: ks_critical(0.01, v.len()),
            qq_points: qq_points(&v, dof, grid).ok()?,
        })
    }

    pub fn rejects_chi2_at_1pct(&self) -> bool {
        self.ks_vs_chi2 > self.ks_critical_1pct
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloReport {
    pub replications: usize,
    pub dof: usize,
    pub n: usize,
    pub statistics: Vec<ReplicationRecord>,
    pub ks_t_vs_chi2: Option<f64>,
    pub empirical_mean_t: Option<f64>,
    pub qq_points: Vec<(f64, f64)>,
    pub t_summary: Option<DistributionSummary>,
    pub s_summary: Option<DistributionSummary>,
    pub failures: usize,
    pub failure_reasons: Vec<String>,
    pub valid: bool,
}

/// Grid size for QQ output.
pub const QQ_GRID: usize = 50;

fn replicate_once(
    spec: &GeneratorSpec,
    mask: &ParameterMask,
    cfg: &FitConfig,
    rep: usize,
    kinds: &[StatisticKind],
) -> ReplicationRecord {
    let seed = spec.seed.wrapping_add(rep as u64);
    let mut record = ReplicationRecord {
        rep,
        seed,
        t_n: None,
        s_n: None,
        quadratic_form: None,
        converged_full: true,
        converged_restricted: true,
        cost_full: None,
        cost_restricted: None,
        weights_full: None,
        weights_restricted: None,
        failure: None,
    };
    let data = match generate(&spec.with_seed(seed)) {
        Ok(d) => d,
        Err(e) => {
            record.failure = Some(format!("generate: {e}"));
            return record;
        }
    };
    let cfg = FitConfig {
        seed: cfg.seed.wrapping_add(rep as u64),
        ..cfg.clone()
    };
    let arch = *spec.true_weights.arch();
    if kinds.contains(&StatisticKind::LogDet) {
        match hypothesis::t_statistic(&data, arch, mask, &cfg) {
            Ok(r) => {
                record.t_n = Some(r.t_n);
                record.quadratic_form = r.quadratic_form;
                record.converged_full &= r.fit_full.converged;
                record.converged_restricted &= r.fit_restricted.converged;
                record.cost_full = Some(r.fit_full.cost);
                record.cost_restricted = Some(r.fit_restricted.cost);
                record.weights_full = Some(r.fit_full.weights.weights);
                record.weights_restricted = Some(r.fit_restricted.weights.weights);
            }
            Err(e) => {
                record.failure = Some(format!("T_n: {e}"));
                return record;
            }
        }
    }
    if kinds.contains(&StatisticKind::SumSquares) {
        match hypothesis::s_statistic(&data, arch, mask, &cfg) {
            Ok(s) => record.s_n = Some(s),
            Err(e) => record.failure = Some(format!("S_n: {e}")),
        }
    }
    record
}

/// Replicates the nested test `reps` times. Replication `r` uses generator
/// seed `spec.seed + r`; records come back in replication order whatever the
/// scheduling.
pub fn run_replications(
    spec: &GeneratorSpec,
    mask_restricted: &ParameterMask,
    cfg: &FitConfig,
    reps: usize,
    statistic_kinds: &[StatisticKind],
) -> Result<MonteCarloReport> {
    if reps == 0 {
        return Err(Error::InvalidInput("need at least one replication".into()));
    }
    if statistic_kinds.is_empty() {
        return Err(Error::InvalidInput("no statistic requested".into()));
    }
    spec.validate()?;
    cfg.validate()?;
    let arch = *spec.true_weights.arch();
    if mask_restricted.architecture != arch {
        return Err(Error::ArchMismatch("restricted mask does not match generator".into()));
    }
    let dof = mask_restricted.pinned_count();
    if dof == 0 {
        return Err(Error::InvalidInput(
            "restricted mask must pin at least one coordinate".into(),
        ));
    }

    let statistics: Vec<ReplicationRecord> = (0..reps)
        .into_par_iter()
        .map(|rep| replicate_once(spec, mask_restricted, cfg, rep, statistic_kinds))
        .collect();
    Ok(summarize(statistics, dof, spec.n))
}

/// Aggregates replication records; only converged replications enter the
/// distributional summaries.
pub fn summarize(statistics: Vec<ReplicationRecord>, dof: usize, n: usize) -> MonteCarloReport {
    let replications = statistics.len();
    let usable: Vec<&ReplicationRecord> = statistics.iter().filter(|r| r.usable()).collect();
    let failures = replications - usable.len();
    let failure_reasons = statistics
        .iter()
        .filter(|r| !r.usable())
        .map(|r| {
            format!(
                "rep {}: {}",
                r.rep,
                r.failure.as_deref().unwrap_or("fit did not converge")
            )
        })
        .collect();
    let t: Vec<f64> = usable.iter().filter_map(|r| r.t_n).collect();
    let s: Vec<f64> = usable.iter().filter_map(|r| r.s_n).collect();
    let t_summary = DistributionSummary::from_samples(&t, dof, QQ_GRID);
    let s_summary = DistributionSummary::from_samples(&s, dof, QQ_GRID);
    MonteCarloReport {
        replications,
        dof,
        n,
        ks_t_vs_chi2: t_summary.as_ref().map(|s| s.ks_vs_chi2),
        empirical_mean_t: t_summary.as_ref().map(|s| s.mean),
        qq_points: t_summary.as_ref().map(|s| s.qq_points.clone()).unwrap_or_default(),
        t_summary,
        s_summary,
        failures,
        failure_reasons,
        valid: (failures as f64) <= MAX_FAILURE_FRACTION * replications as f64,
        statistics,
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.16e}")).unwrap_or_default()
}

impl MonteCarloReport {
    /// CSV with one row per replication.
    pub fn write_statistics_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "rep",
            "t_n",
            "s_n",
            "converged_full",
            "converged_restricted",
            "cost_full",
            "cost_restricted",
        ])?;
        for r in &self.statistics {
            w.write_record([
                r.rep.to_string(),
                fmt_opt(r.t_n),
                fmt_opt(r.s_n),
                r.converged_full.to_string(),
                r.converged_restricted.to_string(),
                fmt_opt(r.cost_full),
                fmt_opt(r.cost_restricted),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_qq_csv(&self, writer: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["statistic", "theoretical", "empirical"])?;
        for (name, summary) in [("t_n", &self.t_summary), ("s_n", &self.s_summary)] {
            if let Some(summary) = summary {
                for (a, b) in &summary.qq_points {
                    w.write_record([name.to_string(), format!("{a:.16e}"), format!("{b:.16e}")])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Full-model fits on `reps` independent datasets (seeds `spec.seed + r`),
/// in replication order.
pub fn fit_replications(spec: &GeneratorSpec, cfg: &FitConfig, reps: usize) -> Vec<Result<FitResult>> {
    let arch = *spec.true_weights.arch();
    let mask = ParameterMask::all_free(arch);
    (0..reps)
        .into_par_iter()
        .map(|rep| {
            let data = generate(&spec.with_seed(spec.seed.wrapping_add(rep as u64)))?;
            let cfg = FitConfig {
                seed: cfg.seed.wrapping_add(rep as u64),
                ..cfg.clone()
            };
            estimate::minimize(&data, arch, &mask, &cfg, &cost::CostKind::LogDet)
        })
        .collect()
}
