//! Multi-start minimization of the costs over the full parameter box or a
//! zero-masked subspace, and the plug-in information matrix.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{self, CostKind, Dataset};
use crate::error::{Error, Result};
use crate::linalg::SymMatrix;
use crate::mlp::{self, Architecture, ParameterMask, WeightVector, DEFAULT_BOX_RADIUS};

/// Stored curvature pairs in the quasi-Newton approximation.
const MEMORY: usize = 10;
/// Sufficient-decrease constant of the Armijo test.
const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 50;
/// Canonical forms closer than this (max-norm) count as the same minimum.
pub const DEDUP_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    pub max_iterations: usize,
    /// Convergence threshold on the max-norm of the free-coordinate gradient.
    pub gradient_tolerance: f64,
    pub n_starts: usize,
    pub seed: u64,
    pub box_radius: f64,
    /// Attach the plug-in information matrix to log-determinant fits.
    pub info_matrix: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self {
            max_iterations: 500,
            gradient_tolerance: 1e-7,
            n_starts: 10,
            seed: 0,
            box_radius: DEFAULT_BOX_RADIUS,
            info_matrix: true,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0
            || self.n_starts == 0
            || self.gradient_tolerance.is_nan()
            || self.gradient_tolerance <= 0.0
            || self.box_radius.is_nan()
            || self.box_radius <= 0.0
        {
            return Err(Error::InvalidInput(
                "max_iterations, n_starts, gradient_tolerance and box_radius must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StartSummary {
    pub start: usize,
    pub seed: u64,
    /// `None` when the start failed outright.
    pub cost: Option<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub note: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    pub architecture: Architecture,
    pub mask: ParameterMask,
    pub cost_kind: CostKind,
    /// Canonical representative of the best minimum found.
    pub weights: WeightVector,
    pub cost: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub on_boundary: bool,
    pub best_start: usize,
    pub distinct_minima: usize,
    pub starts: Vec<StartSummary>,
    pub info_matrix: Option<SymMatrix>,
}

/// Outcome of one quasi-Newton descent.
#[derive(Clone, Debug)]
pub struct Descent {
    pub weights: WeightVector,
    pub cost: f64,
    pub gradient_norm: f64,
    pub converged: bool,
    pub on_boundary: bool,
    pub iterations: usize,
    /// Cost after every accepted step, starting with the initial point.
    pub history: Vec<f64>,
    pub stalled: bool,
}

/// SplitMix64 finalizer; decorrelates per-start seeds from nearby base seeds.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn max_abs(v: impl IntoIterator<Item = f64>) -> f64 {
    v.into_iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Objective<'a> {
    kind: &'a CostKind,
    data: &'a Dataset,
    free: Vec<usize>,
    template: WeightVector,
    radius: f64,
}

impl Objective<'_> {
    fn embed(&self, x: &[f64]) -> WeightVector {
        let mut w = self.template.clone();
        for (&k, &v) in self.free.iter().zip(x) {
            w.weights[k] = v;
        }
        w
    }

    fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let w = self.embed(x);
        let (value, grad) = cost::evaluate(self.kind, &w, self.data, true)?;
        if !value.is_finite() {
            return Err(Error::SingularCovariance);
        }
        let grad = grad.expect("gradient requested");
        Ok((value, self.free.iter().map(|&k| grad[k]).collect()))
    }

    fn project(&self, x: &mut [f64]) {
        for v in x.iter_mut() {
            *v = v.clamp(-self.radius, self.radius);
        }
    }
}

/// Two-loop recursion: `-H g` for the limited-memory inverse Hessian.
fn lbfgs_direction(grad: &[f64], pairs: &[(Vec<f64>, Vec<f64>, f64)]) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let mut alphas = Vec::with_capacity(pairs.len());
    for (s, y, rho) in pairs.iter().rev() {
        let a = rho * dot(s, &q);
        q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
        alphas.push(a);
    }
    let scale = match pairs.last() {
        Some((s, y, _)) => dot(s, y) / dot(y, y),
        None => 1.0 / max_abs(grad.iter().copied()).max(1.0),
    };
    q.iter_mut().for_each(|v| *v *= scale);
    for ((s, y, rho), a) in pairs.iter().zip(alphas.into_iter().rev()) {
        let b = rho * dot(y, &q);
        q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
    }
    q.iter_mut().for_each(|v| *v = -*v);
    q
}

/// Safeguarded minimizer of the quadratic (first backtrack) or cubic
/// (later backtracks) interpolating the line-search samples.
fn interpolate_step(f0: f64, slope: f64, a1: f64, f1: f64, prev: Option<(f64, f64)>) -> f64 {
    let candidate = match prev {
        None => -slope * a1 * a1 / (2.0 * (f1 - f0 - slope * a1)),
        Some((a2, f2)) => {
            let r1 = f1 - f0 - slope * a1;
            let r2 = f2 - f0 - slope * a2;
            let denom = a1 - a2;
            let a = (r1 / (a1 * a1) - r2 / (a2 * a2)) / denom;
            let b = (-a2 * r1 / (a1 * a1) + a1 * r2 / (a2 * a2)) / denom;
            if a.abs() < 1e-300 {
                -slope / (2.0 * b)
            } else {
                let disc = b * b - 3.0 * a * slope;
                if disc < 0.0 {
                    0.5 * a1
                } else {
                    (-b + disc.sqrt()) / (3.0 * a)
                }
            }
        }
    };
    if candidate.is_finite() {
        candidate.clamp(0.1 * a1, 0.5 * a1)
    } else {
        0.5 * a1
    }
}

/// One limited-memory quasi-Newton descent from `start`, holding the mask's
/// pinned coordinates at zero and clamping iterates to the box.
pub fn descend(
    data: &Dataset,
    mask: &ParameterMask,
    cfg: &FitConfig,
    kind: &CostKind,
    start: &WeightVector,
) -> Result<Descent> {
    data.check_architecture(&mask.architecture)?;
    let start = mlp::apply_mask(start, mask)?;
    let obj = Objective {
        kind,
        data,
        free: mask.free_indices(),
        template: start.clone(),
        radius: cfg.box_radius,
    };
    let mut x: Vec<f64> = obj.free.iter().map(|&k| start.weights[k]).collect();
    obj.project(&mut x);
    let (mut f, mut g) = obj.eval(&x)?;
    let mut history = vec![f];
    let mut pairs: Vec<(Vec<f64>, Vec<f64>, f64)> = Vec::with_capacity(MEMORY);
    let mut iterations = 0;
    let mut stalled = false;

    while iterations < cfg.max_iterations {
        if max_abs(g.iter().copied()) <= cfg.gradient_tolerance {
            break;
        }
        let mut dir = lbfgs_direction(&g, &pairs);
        let mut slope = dot(&g, &dir);
        if slope.is_nan() || slope >= 0.0 {
            pairs.clear();
            dir = lbfgs_direction(&g, &pairs);
            slope = dot(&g, &dir);
        }

        let mut step = 1.0;
        let mut prev: Option<(f64, f64)> = None;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            let mut trial: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            obj.project(&mut trial);
            let moved: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
            let predicted = dot(&g, &moved);
            match obj.eval(&trial) {
                Ok((ft, gt)) if ft <= f + ARMIJO * predicted && ft <= f => {
                    accepted = Some((trial, ft, gt));
                    break;
                }
                Ok((ft, _)) => {
                    let next = interpolate_step(f, slope, step, ft, prev);
                    prev = Some((step, ft));
                    step = next;
                }
                Err(_) => {
                    prev = None;
                    step *= 0.2;
                }
            }
        }
        let Some((xn, fn_, gn)) = accepted else {
            if pairs.is_empty() {
                stalled = true;
                break;
            }
            // retry from a steepest-descent model before giving up
            pairs.clear();
            continue;
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gn.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * dot(&y, &y).sqrt() {
            if pairs.len() == MEMORY {
                pairs.remove(0);
            }
            pairs.push((s, y, 1.0 / sy));
        }
        x = xn;
        f = fn_;
        g = gn;
        history.push(f);
        iterations += 1;
    }

    let gradient_norm = max_abs(g.iter().copied());
    let on_boundary = x.iter().any(|v| v.abs() >= cfg.box_radius);
    Ok(Descent {
        weights: obj.embed(&x),
        cost: f,
        gradient_norm,
        converged: gradient_norm <= cfg.gradient_tolerance && !on_boundary,
        on_boundary,
        iterations,
        history,
        stalled,
    })
}

/// Minimizes `kind` over the masked box from `cfg.n_starts` random starts.
pub fn minimize(
    data: &Dataset,
    arch: Architecture,
    mask: &ParameterMask,
    cfg: &FitConfig,
    kind: &CostKind,
) -> Result<FitResult> {
    minimize_with_starts(data, arch, mask, cfg, kind, &[])
}

/// As [`minimize`], with extra caller-supplied starting points tried after
/// the random ones.
pub fn minimize_with_starts(
    data: &Dataset,
    arch: Architecture,
    mask: &ParameterMask,
    cfg: &FitConfig,
    kind: &CostKind,
    extra_starts: &[WeightVector],
) -> Result<FitResult> {
    cfg.validate()?;
    data.check_architecture(&arch)?;
    if mask.architecture != arch {
        return Err(Error::ArchMismatch(
            "mask architecture differs from requested architecture".into(),
        ));
    }
    let total = cfg.n_starts + extra_starts.len();
    let outcomes: Vec<(u64, Result<Descent>)> = (0..total)
        .into_par_iter()
        .map(|i| {
            let seed = mix_seed(cfg.seed, i as u64);
            let start = match i.checked_sub(cfg.n_starts) {
                None => mlp::random_init(arch, mask, seed),
                Some(j) => extra_starts[j].clone(),
            };
            (seed, descend(data, mask, cfg, kind, &start))
        })
        .collect();

    let mut starts = Vec::with_capacity(total);
    let mut best: Option<(usize, &Descent)> = None;
    for (i, (seed, outcome)) in outcomes.iter().enumerate() {
        match outcome {
            Ok(d) => {
                starts.push(StartSummary {
                    start: i,
                    seed: *seed,
                    cost: Some(d.cost),
                    converged: d.converged,
                    iterations: d.iterations,
                    note: if d.on_boundary {
                        Some("ended on box boundary".into())
                    } else if !d.converged {
                        Some(format!("gradient norm {:e} above tolerance", d.gradient_norm))
                    } else {
                        None
                    },
                });
                if best.is_none_or(|(_, b)| d.cost < b.cost) {
                    best = Some((i, d));
                }
            }
            Err(e) => starts.push(StartSummary {
                start: i,
                seed: *seed,
                cost: None,
                converged: false,
                iterations: 0,
                note: Some(e.to_string()),
            }),
        }
    }

    if !starts.iter().any(|s| s.converged) {
        return Err(Error::AllStartsFailed(
            starts
                .iter()
                .map(|s| format!("start {}: {}", s.start, s.note.as_deref().unwrap_or("not converged")))
                .collect(),
        ));
    }
    let (best_start, descent) = best.expect("a converged start exists");

    let mut minima: Vec<WeightVector> = Vec::new();
    for d in outcomes
        .iter()
        .filter_map(|(_, o)| o.as_ref().ok())
        .filter(|d| d.converged)
    {
        let c = mlp::canonicalize(&d.weights);
        let seen = minima
            .iter()
            .any(|m| max_abs(m.weights.iter().zip(&c.weights).map(|(a, b)| a - b)) <= DEDUP_TOLERANCE);
        if !seen {
            minima.push(c);
        }
    }

    let info_matrix = match (kind, cfg.info_matrix) {
        (CostKind::LogDet, true) => Some(estimate_info_matrix(&descent.weights, data)?),
        _ => None,
    };

    Ok(FitResult {
        architecture: arch,
        mask: mask.clone(),
        cost_kind: kind.clone(),
        weights: mlp::canonicalize(&descent.weights),
        cost: descent.cost,
        gradient_norm: descent.gradient_norm,
        converged: descent.converged,
        on_boundary: descent.on_boundary,
        best_start,
        distinct_minima: minima.len(),
        starts,
        info_matrix,
    })
}

/// Plug-in `Î₀`: entry `(k,l)` is `tr(Γ_n⁻¹(w) B_n(W_k, W_l))`.
pub fn estimate_info_matrix(w: &WeightVector, data: &Dataset) -> Result<SymMatrix> {
    let cov = cost::gamma_n(w, data)?;
    cost::jacobian_gram(w, data, &cov.inverse)
}
