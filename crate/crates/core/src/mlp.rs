//! One-hidden-layer perceptron `F_W(z) = b₂ + W₂ tanh(W₁ z + b₁)` and its
//! derivatives with respect to the flat weight vector.
//!
//! Flat layout of a weight vector, for `h` hidden units, `d'` inputs and `d`
//! outputs:
//!
//! | block          | length   | order                      |
//! |----------------|----------|----------------------------|
//! | hidden weights | `h·d'`   | row-major by hidden unit   |
//! | hidden biases  | `h`      | by hidden unit             |
//! | output weights | `d·h`    | row-major by output        |
//! | output biases  | `d`      | by output                  |

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::error::{Error, Result};

/// Default half-width of the compact parameter box `[-R, R]^s`.
pub const DEFAULT_BOX_RADIUS: f64 = 50.0;

/// Half-width of the uniform initialization range.
pub const INIT_RANGE: f64 = 0.7;

/// Hidden-unit nonlinearity. Only odd sigmoids keep the sign-flip symmetry,
/// so tanh is the single option.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_units: usize,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
}

/// What a flat coordinate controls.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    HiddenWeight { unit: usize, input: usize },
    HiddenBias { unit: usize },
    OutputWeight { output: usize, unit: usize },
    OutputBias { output: usize },
}

impl Architecture {
    pub fn new(input_dim: usize, hidden_units: usize, output_dim: usize) -> Result<Self> {
        if input_dim == 0 || hidden_units == 0 || output_dim == 0 {
            return Err(Error::InvalidInput(format!(
                "architecture dimensions must be positive, got d'={input_dim} h={hidden_units} d={output_dim}"
            )));
        }
        Ok(Self {
            input_dim,
            hidden_units,
            output_dim,
            activation: Activation::Tanh,
        })
    }

    pub fn validate(&self) -> Result<()> {
        Self::new(self.input_dim, self.hidden_units, self.output_dim).map(|_| ())
    }

    /// `s = h(d'+1) + d(h+1)`.
    pub fn param_count(&self) -> usize {
        self.hidden_units * (self.input_dim + 1) + self.output_dim * (self.hidden_units + 1)
    }

    pub fn hidden_weight_index(&self, unit: usize, input: usize) -> usize {
        unit * self.input_dim + input
    }

    pub fn hidden_bias_index(&self, unit: usize) -> usize {
        self.hidden_units * self.input_dim + unit
    }

    pub fn output_weight_index(&self, output: usize, unit: usize) -> usize {
        self.hidden_units * (self.input_dim + 1) + output * self.hidden_units + unit
    }

    pub fn output_bias_index(&self, output: usize) -> usize {
        self.hidden_units * (self.input_dim + 1) + self.output_dim * self.hidden_units + output
    }

    pub fn role(&self, k: usize) -> ParamRole {
        let (h, din) = (self.hidden_units, self.input_dim);
        let hw = h * din;
        let ow = h * (din + 1);
        let ob = ow + self.output_dim * h;
        if k < hw {
            ParamRole::HiddenWeight {
                unit: k / din,
                input: k % din,
            }
        } else if k < ow {
            ParamRole::HiddenBias { unit: k - hw }
        } else if k < ob {
            ParamRole::OutputWeight {
                output: (k - ow) / h,
                unit: (k - ow) % h,
            }
        } else {
            assert!(k < self.param_count(), "parameter index {k} out of range");
            ParamRole::OutputBias { output: k - ob }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub architecture: Architecture,
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(architecture: Architecture, weights: Vec<f64>) -> Result<Self> {
        architecture.validate()?;
        if weights.len() != architecture.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "architecture needs {} weights, got {}",
                architecture.param_count(),
                weights.len()
            )));
        }
        if weights.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("weights must be finite".into()));
        }
        Ok(Self { architecture, weights })
    }

    pub fn zeros(architecture: Architecture) -> Self {
        Self {
            architecture,
            weights: vec![0.0; architecture.param_count()],
        }
    }

    pub fn arch(&self) -> &Architecture {
        &self.architecture
    }

    pub fn values(&self) -> &[f64] {
        &self.weights
    }

    pub fn in_box(&self, radius: f64) -> bool {
        self.weights.iter().all(|v| v.abs() <= radius)
    }

    fn hidden_weight(&self, unit: usize, input: usize) -> f64 {
        self.weights[self.architecture.hidden_weight_index(unit, input)]
    }

    fn hidden_bias(&self, unit: usize) -> f64 {
        self.weights[self.architecture.hidden_bias_index(unit)]
    }

    fn output_weight(&self, output: usize, unit: usize) -> f64 {
        self.weights[self.architecture.output_weight_index(output, unit)]
    }

    fn output_bias(&self, output: usize) -> f64 {
        self.weights[self.architecture.output_bias_index(output)]
    }
}

/// Nested-hypothesis mask: non-free coordinates are pinned to zero.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParameterMask {
    pub architecture: Architecture,
    pub free: Vec<bool>,
}

impl ParameterMask {
    pub fn new(architecture: Architecture, free: Vec<bool>) -> Result<Self> {
        architecture.validate()?;
        if free.len() != architecture.param_count() {
            return Err(Error::DimensionMismatch(format!(
                "mask needs {} entries, got {}",
                architecture.param_count(),
                free.len()
            )));
        }
        if !free.iter().any(|&f| f) {
            return Err(Error::InvalidInput(
                "mask must leave at least one free coordinate".into(),
            ));
        }
        Ok(Self { architecture, free })
    }

    pub fn all_free(architecture: Architecture) -> Self {
        Self {
            architecture,
            free: vec![true; architecture.param_count()],
        }
    }

    /// All-free mask with the listed coordinates pinned.
    pub fn pinning(architecture: Architecture, pinned: &[usize]) -> Result<Self> {
        let mut free = vec![true; architecture.param_count()];
        for &k in pinned {
            *free.get_mut(k).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "pinned index {k} out of range for s={}",
                    architecture.param_count()
                ))
            })? = false;
        }
        Self::new(architecture, free)
    }

    pub fn is_free(&self, k: usize) -> bool {
        self.free[k]
    }

    /// Number of free coordinates `q`.
    pub fn free_count(&self) -> usize {
        self.free.iter().filter(|&&f| f).count()
    }

    pub fn pinned_count(&self) -> usize {
        self.free.len() - self.free_count()
    }

    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.free.len()).filter(|&k| self.free[k]).collect()
    }
}

/// `d × s` matrix of partials; column `k` is `∂F_W(z)/∂W_k`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightJacobian {
    output_dim: usize,
    param_count: usize,
    entries: Vec<f64>,
}

impl WeightJacobian {
    pub fn at(&self, output: usize, k: usize) -> f64 {
        self.entries[output * self.param_count + k]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.output_dim).map(|i| self.at(i, k)).collect()
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }
}

/// Hidden-layer activations `tanh(a_j)` and their slopes `1 - tanh²(a_j)`.
pub(crate) fn hidden_layer(w: &WeightVector, z: &[f64], act: &mut [f64], slope: &mut [f64]) {
    let arch = w.arch();
    for j in 0..arch.hidden_units {
        let mut a = w.hidden_bias(j);
        for (m, zm) in z.iter().enumerate() {
            a += w.hidden_weight(j, m) * zm;
        }
        let t = a.tanh();
        act[j] = t;
        slope[j] = 1.0 - t * t;
    }
}

pub(crate) fn output_from_hidden(w: &WeightVector, act: &[f64], out: &mut [f64]) {
    let arch = w.arch();
    for (i, o) in out.iter_mut().enumerate().take(arch.output_dim) {
        let mut v = w.output_bias(i);
        for (j, a) in act.iter().enumerate() {
            v += w.output_weight(i, j) * a;
        }
        *o = v;
    }
}

pub fn forward(w: &WeightVector, z: &[f64]) -> Vec<f64> {
    let arch = w.arch();
    assert_eq!(z.len(), arch.input_dim, "input dimension");
    let mut act = vec![0.0; arch.hidden_units];
    let mut slope = vec![0.0; arch.hidden_units];
    hidden_layer(w, z, &mut act, &mut slope);
    let mut out = vec![0.0; arch.output_dim];
    output_from_hidden(w, &act, &mut out);
    out
}

pub(crate) fn fill_jacobian(w: &WeightVector, z: &[f64], act: &[f64], slope: &[f64], jac: &mut [f64]) {
    let arch = w.arch();
    let s = arch.param_count();
    jac.iter_mut().for_each(|v| *v = 0.0);
    for i in 0..arch.output_dim {
        let row = &mut jac[i * s..(i + 1) * s];
        for j in 0..arch.hidden_units {
            let g = w.output_weight(i, j) * slope[j];
            for (m, zm) in z.iter().enumerate() {
                row[arch.hidden_weight_index(j, m)] = g * zm;
            }
            row[arch.hidden_bias_index(j)] = g;
            row[arch.output_weight_index(i, j)] = act[j];
        }
        row[arch.output_bias_index(i)] = 1.0;
    }
}

pub fn weight_jacobian(w: &WeightVector, z: &[f64]) -> WeightJacobian {
    let arch = w.arch();
    assert_eq!(z.len(), arch.input_dim, "input dimension");
    let (h, s, d) = (arch.hidden_units, arch.param_count(), arch.output_dim);
    let mut act = vec![0.0; h];
    let mut slope = vec![0.0; h];
    hidden_layer(w, z, &mut act, &mut slope);
    let mut entries = vec![0.0; d * s];
    fill_jacobian(w, z, &act, &slope, &mut entries);
    WeightJacobian {
        output_dim: d,
        param_count: s,
        entries,
    }
}

/// Input-side coordinate of a hidden unit: the `input`-th input or, for the
/// bias, a constant 1.
fn input_side(role: ParamRole) -> Option<(usize, Option<usize>)> {
    match role {
        ParamRole::HiddenWeight { unit, input } => Some((unit, Some(input))),
        ParamRole::HiddenBias { unit } => Some((unit, None)),
        _ => None,
    }
}

/// `∂²F_W(z)/∂W_k∂W_l` as a `d`-vector.
pub fn weight_second_derivative(w: &WeightVector, z: &[f64], k: usize, l: usize) -> Vec<f64> {
    let arch = w.arch();
    assert_eq!(z.len(), arch.input_dim, "input dimension");
    let mut out = vec![0.0; arch.output_dim];
    let (rk, rl) = (arch.role(k), arch.role(l));
    let feature = |input: Option<usize>| input.map_or(1.0, |m| z[m]);
    let preact = |unit: usize| {
        w.hidden_bias(unit)
            + (0..arch.input_dim)
                .map(|m| w.hidden_weight(unit, m) * z[m])
                .sum::<f64>()
    };
    match (input_side(rk), input_side(rl)) {
        (Some((uk, ik)), Some((ul, il))) => {
            if uk == ul {
                let t = preact(uk).tanh();
                let curvature = -2.0 * t * (1.0 - t * t);
                let base = curvature * feature(ik) * feature(il);
                for (i, o) in out.iter_mut().enumerate() {
                    *o = w.output_weight(i, uk) * base;
                }
            }
        }
        (Some((unit, input)), None) | (None, Some((unit, input))) => {
            let other = if input_side(rk).is_some() { rl } else { rk };
            if let ParamRole::OutputWeight { output, unit: ou } = other {
                if ou == unit {
                    let t = preact(unit).tanh();
                    out[output] = (1.0 - t * t) * feature(input);
                }
            }
        }
        (None, None) => {}
    }
    out
}

pub fn apply_mask(w: &WeightVector, mask: &ParameterMask) -> Result<WeightVector> {
    if w.architecture != mask.architecture {
        return Err(Error::ArchMismatch(format!(
            "{:?} vs {:?}",
            w.architecture, mask.architecture
        )));
    }
    let weights = w
        .weights
        .iter()
        .zip(&mask.free)
        .map(|(&v, &free)| if free { v } else { 0.0 })
        .collect();
    Ok(WeightVector {
        architecture: w.architecture,
        weights,
    })
}

fn unit_key(w: &WeightVector, unit: usize) -> Vec<f64> {
    let arch = w.arch();
    let mut key: Vec<f64> = (0..arch.input_dim).map(|m| w.hidden_weight(unit, m)).collect();
    key.push(w.hidden_bias(unit));
    key
}

fn lex_cmp(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Picks one representative of the weight-space symmetry class: every hidden
/// unit's first nonzero input-side coefficient is made positive by a full
/// sign flip, then units are sorted lexicographically by (input weights,
/// bias), ties broken by outgoing weights.
pub fn canonicalize(w: &WeightVector) -> WeightVector {
    let arch = *w.arch();
    let mut flipped = w.clone();
    for j in 0..arch.hidden_units {
        let first = unit_key(&flipped, j).into_iter().find(|&v| v != 0.0);
        if first.is_some_and(|v| v < 0.0) {
            for m in 0..arch.input_dim {
                let k = arch.hidden_weight_index(j, m);
                flipped.weights[k] = -flipped.weights[k];
            }
            let k = arch.hidden_bias_index(j);
            flipped.weights[k] = -flipped.weights[k];
            for i in 0..arch.output_dim {
                let k = arch.output_weight_index(i, j);
                flipped.weights[k] = -flipped.weights[k];
            }
        }
    }
    // -0.0 and 0.0 must compare equal in the sort key
    for v in flipped.weights.iter_mut() {
        if *v == 0.0 {
            *v = 0.0;
        }
    }

    let outgoing =
        |w: &WeightVector, j: usize| -> Vec<f64> { (0..arch.output_dim).map(|i| w.output_weight(i, j)).collect() };
    let mut order: Vec<usize> = (0..arch.hidden_units).collect();
    order.sort_by(|&a, &b| {
        lex_cmp(&unit_key(&flipped, a), &unit_key(&flipped, b))
            .then_with(|| lex_cmp(&outgoing(&flipped, a), &outgoing(&flipped, b)))
    });

    let mut out = flipped.clone();
    for (new, &old) in order.iter().enumerate() {
        for m in 0..arch.input_dim {
            out.weights[arch.hidden_weight_index(new, m)] = flipped.hidden_weight(old, m);
        }
        out.weights[arch.hidden_bias_index(new)] = flipped.hidden_bias(old);
        for i in 0..arch.output_dim {
            out.weights[arch.output_weight_index(i, new)] = flipped.output_weight(i, old);
        }
    }
    out
}

/// Applies a hidden-unit permutation (`perm[new] = old`) and per-unit sign
/// flips; the result computes the same function.
pub fn transform_units(w: &WeightVector, perm: &[usize], flip: &[bool]) -> WeightVector {
    let arch = *w.arch();
    assert_eq!(perm.len(), arch.hidden_units);
    assert_eq!(flip.len(), arch.hidden_units);
    let mut out = w.clone();
    for (new, &old) in perm.iter().enumerate() {
        let sign = if flip[old] { -1.0 } else { 1.0 };
        for m in 0..arch.input_dim {
            out.weights[arch.hidden_weight_index(new, m)] = sign * w.hidden_weight(old, m);
        }
        out.weights[arch.hidden_bias_index(new)] = sign * w.hidden_bias(old);
        for i in 0..arch.output_dim {
            out.weights[arch.output_weight_index(i, new)] = sign * w.output_weight(i, old);
        }
    }
    out
}

pub fn random_init(arch: Architecture, mask: &ParameterMask, seed: u64) -> WeightVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = mask
        .free
        .iter()
        .map(|&free| {
            if free {
                rng.random_range(-INIT_RANGE..=INIT_RANGE)
            } else {
                0.0
            }
        })
        .collect();
    WeightVector {
        architecture: arch,
        weights,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::{prop_assert, prop_assert_eq, proptest};

    fn arch(din: usize, h: usize, d: usize) -> Architecture {
        Architecture::new(din, h, d).unwrap()
    }

    fn random_weights(a: Architecture, seed: u64, scale: f64) -> WeightVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = (0..a.param_count()).map(|_| rng.random_range(-scale..scale)).collect();
        WeightVector::new(a, weights).unwrap()
    }

    fn random_input(dim: usize, rng: &mut impl Rng, scale: f64) -> Vec<f64> {
        (0..dim).map(|_| rng.random_range(-scale..scale)).collect()
    }

    // independent scalar-loop evaluation reading weights straight from the
    // documented layout
    fn forward_oracle(a: &Architecture, w: &[f64], z: &[f64]) -> Vec<f64> {
        let (din, h, d) = (a.input_dim, a.hidden_units, a.output_dim);
        let w1 = &w[..h * din];
        let b1 = &w[h * din..h * din + h];
        let w2 = &w[h * din + h..h * din + h + d * h];
        let b2 = &w[h * din + h + d * h..];
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let mut acc = b1[j];
            for m in 0..din {
                acc += w1[j * din + m] * z[m];
            }
            hidden[j] = acc.tanh();
        }
        (0..d)
            .map(|i| {
                let mut acc = b2[i];
                for j in 0..h {
                    acc += w2[i * h + j] * hidden[j];
                }
                acc
            })
            .collect()
    }

    #[test]
    fn param_count_and_layout() {
        let a = arch(3, 2, 2);
        assert_eq!(a.param_count(), 2 * 4 + 2 * 3);
        assert_eq!(a.role(0), ParamRole::HiddenWeight { unit: 0, input: 0 });
        assert_eq!(a.role(5), ParamRole::HiddenWeight { unit: 1, input: 2 });
        assert_eq!(a.role(6), ParamRole::HiddenBias { unit: 0 });
        assert_eq!(a.role(8), ParamRole::OutputWeight { output: 0, unit: 0 });
        assert_eq!(a.role(11), ParamRole::OutputWeight { output: 1, unit: 1 });
        assert_eq!(a.role(13), ParamRole::OutputBias { output: 1 });
        for k in 0..a.param_count() {
            let back = match a.role(k) {
                ParamRole::HiddenWeight { unit, input } => a.hidden_weight_index(unit, input),
                ParamRole::HiddenBias { unit } => a.hidden_bias_index(unit),
                ParamRole::OutputWeight { output, unit } => a.output_weight_index(output, unit),
                ParamRole::OutputBias { output } => a.output_bias_index(output),
            };
            assert_eq!(back, k);
        }
        assert!(Architecture::new(0, 1, 1).is_err());
    }

    #[test]
    fn forward_zero_weights() {
        let a = arch(2, 3, 2);
        assert_eq!(forward(&WeightVector::zeros(a), &[1.5, -2.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn forward_constant_network() {
        let a = arch(1, 1, 1);
        let w = WeightVector::new(a, vec![0.0, 0.0, 3.0, -1.25]).unwrap();
        assert_eq!(forward(&w, &[0.4]), vec![-1.25]);
        assert_eq!(forward(&w, &[-7.0]), vec![-1.25]);
    }

    #[test]
    fn forward_matches_scalar_loop() {
        let a = arch(2, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for seed in 0..20 {
            let w = random_weights(a, seed, 2.0);
            let z = random_input(2, &mut rng, 3.0);
            let got = forward(&w, &z);
            let want = forward_oracle(&a, w.values(), &z);
            for (g, e) in got.iter().zip(&want) {
                assert!((g - e).abs() < 1e-14);
            }
        }
    }

    fn finite_difference_column(w: &WeightVector, z: &[f64], k: usize, step: f64) -> Vec<f64> {
        let mut plus = w.clone();
        plus.weights[k] += step;
        let mut minus = w.clone();
        minus.weights[k] -= step;
        forward(&plus, z)
            .iter()
            .zip(forward(&minus, z))
            .map(|(p, m)| (p - m) / (2.0 * step))
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1.0)
    }

    #[test]
    fn jacobian_bias_columns_are_basis_vectors() {
        let a = arch(2, 2, 3);
        let w = random_weights(a, 4, 1.0);
        let jac = weight_jacobian(&w, &[0.3, -0.2]);
        for i in 0..3 {
            let mut e = vec![0.0; 3];
            e[i] = 1.0;
            assert_eq!(jac.column(a.output_bias_index(i)), e);
        }
    }

    #[test]
    fn jacobian_output_weight_column_is_activation() {
        let a = arch(1, 1, 2);
        // hidden weight 0.8, bias -0.1, outputs (1.5, -2), biases (0, 0)
        let w = WeightVector::new(a, vec![0.8, -0.1, 1.5, -2.0, 0.0, 0.0]).unwrap();
        let z = [0.6];
        let sigma = (0.8f64 * 0.6 - 0.1).tanh();
        let jac = weight_jacobian(&w, &z);
        assert_eq!(jac.column(a.output_weight_index(1, 0)), vec![0.0, sigma]);
        assert_eq!(jac.column(a.output_weight_index(0, 0)), vec![sigma, 0.0]);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let a = arch(3, 2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for seed in 0..100 {
            let w = random_weights(a, seed, 1.5);
            let z = random_input(3, &mut rng, 2.0);
            let jac = weight_jacobian(&w, &z);
            for k in 0..a.param_count() {
                let fd = finite_difference_column(&w, &z, k, 1e-6);
                for i in 0..2 {
                    assert!(rel_err(jac.at(i, k), fd[i]) < 1e-6, "k={k} i={i}");
                }
            }
        }
    }

    #[test]
    fn second_derivative_simple_entries() {
        let a = arch(2, 2, 2);
        let w = random_weights(a, 8, 1.0);
        let z = [0.2, -1.1];
        assert_eq!(
            weight_second_derivative(&w, &z, a.output_bias_index(0), a.output_bias_index(1)),
            vec![0.0, 0.0]
        );
        // output weight (1, unit 0) against unit 0's hidden bias
        let pre = w.weights[a.hidden_bias_index(0)]
            + w.weights[a.hidden_weight_index(0, 0)] * z[0]
            + w.weights[a.hidden_weight_index(0, 1)] * z[1];
        let slope = 1.0 - pre.tanh().powi(2);
        let v = weight_second_derivative(&w, &z, a.output_weight_index(1, 0), a.hidden_bias_index(0));
        assert_eq!(v[0], 0.0);
        assert!((v[1] - slope).abs() < 1e-15);
        // different units never interact
        let v = weight_second_derivative(&w, &z, a.hidden_bias_index(0), a.hidden_bias_index(1));
        assert_eq!(v, vec![0.0, 0.0]);
    }

    #[test]
    fn second_derivative_matches_jacobian_differences_and_is_symmetric() {
        let a = arch(3, 2, 2);
        let s = a.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..20 {
            let w = random_weights(a, 100 + seed, 1.5);
            let z = random_input(3, &mut rng, 2.0);
            for k in 0..s {
                for l in 0..s {
                    let v = weight_second_derivative(&w, &z, k, l);
                    let vt = weight_second_derivative(&w, &z, l, k);
                    let step = 1e-6;
                    let mut plus = w.clone();
                    plus.weights[l] += step;
                    let mut minus = w.clone();
                    minus.weights[l] -= step;
                    let jp = weight_jacobian(&plus, &z).column(k);
                    let jm = weight_jacobian(&minus, &z).column(k);
                    for i in 0..2 {
                        assert!((v[i] - vt[i]).abs() < 1e-12);
                        let fd = (jp[i] - jm[i]) / (2.0 * step);
                        assert!(rel_err(v[i], fd) < 1e-5, "k={k} l={l}: {} vs {fd}", v[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn mask_application() {
        let a = arch(2, 2, 1);
        let w = random_weights(a, 5, 1.0);
        assert_eq!(apply_mask(&w, &ParameterMask::all_free(a)).unwrap(), w);

        let only_bias = ParameterMask::pinning(a, &(0..a.param_count() - 1).collect::<Vec<_>>()).unwrap();
        let c = apply_mask(&w, &only_bias).unwrap();
        let b = w.weights[a.output_bias_index(0)];
        assert_eq!(forward(&c, &[3.0, -4.0]), vec![b]);
        assert_eq!(forward(&c, &[0.1, 0.0]), vec![b]);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut free: Vec<bool> = (0..a.param_count()).map(|_| rng.random_bool(0.5)).collect();
        free[0] = true;
        let mask = ParameterMask::new(a, free.clone()).unwrap();
        let m = apply_mask(&w, &mask).unwrap();
        for k in 0..a.param_count() {
            assert_eq!(m.weights[k], if free[k] { w.weights[k] } else { 0.0 });
        }

        let other = ParameterMask::all_free(arch(1, 2, 1));
        assert!(matches!(apply_mask(&w, &other), Err(Error::ArchMismatch(_))));
        assert!(ParameterMask::new(a, vec![false; a.param_count()]).is_err());
    }

    #[test]
    fn canonicalize_examples() {
        let a = arch(2, 3, 2);
        let w = canonicalize(&random_weights(a, 12, 1.0));
        assert_eq!(canonicalize(&w), w);

        let swapped = transform_units(&w, &[1, 0, 2], &[false; 3]);
        assert_ne!(swapped, w);
        assert_eq!(canonicalize(&swapped), w);

        let flipped = transform_units(&w, &[0, 1, 2], &[false, true, false]);
        assert_eq!(canonicalize(&flipped), w);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..100 {
            let z = random_input(2, &mut rng, 4.0);
            for (x, y) in forward(&flipped, &z).iter().zip(forward(&w, &z)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn random_init_properties() {
        let a = arch(2, 2, 2);
        let mask = ParameterMask::pinning(a, &[0, 3]).unwrap();
        let w1 = random_init(a, &mask, 42);
        assert_eq!(w1, random_init(a, &mask, 42));
        assert_eq!(w1.weights[0], 0.0);
        assert_eq!(w1.weights[3], 0.0);
        assert!(w1.weights.iter().all(|v| v.abs() <= INIT_RANGE));

        let only_one = ParameterMask::pinning(a, &(1..a.param_count()).collect::<Vec<_>>()).unwrap();
        let w = random_init(a, &only_one, 1);
        assert!(w.weights[1..].iter().all(|&v| v == 0.0));

        let full = ParameterMask::all_free(a);
        let mut sums = vec![0.0; a.param_count()];
        let draws = 10_000;
        for seed in 0..draws {
            for (s, v) in sums.iter_mut().zip(random_init(a, &full, seed).weights) {
                *s += v;
            }
        }
        for s in sums {
            assert!((s / draws as f64).abs() < 0.03);
        }
    }

    #[test]
    fn growth_bounds_over_parameter_box() {
        let a = arch(2, 2, 2);
        let s = a.param_count();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut worst_first: f64 = 0.0;
        let mut worst_second: f64 = 0.0;
        for _ in 0..300 {
            let w = WeightVector::new(
                a,
                (0..s)
                    .map(|_| rng.random_range(-DEFAULT_BOX_RADIUS..DEFAULT_BOX_RADIUS))
                    .collect(),
            )
            .unwrap();
            let scale = 10f64.powf(rng.random_range(-2.0..3.0));
            let mut z = random_input(2, &mut rng, 1.0);
            let norm = z.iter().map(|v| v * v).sum::<f64>().sqrt();
            z.iter_mut().for_each(|v| *v *= scale / norm.max(1e-12));
            let zn = scale.min(1e3);
            let jac = weight_jacobian(&w, &z);
            for k in 0..s {
                let col = jac.column(k);
                let cn = col.iter().map(|v| v * v).sum::<f64>().sqrt();
                worst_first = worst_first.max(cn / (1.0 + zn));
                for l in 0..s {
                    let sd = weight_second_derivative(&w, &z, k, l);
                    let sn = sd.iter().map(|v| v * v).sum::<f64>().sqrt();
                    worst_second = worst_second.max(sn / (1.0 + zn * zn));
                }
            }
        }
        // |∂F| ≤ R√d (1+|z|); |∂²F| ≤ R√d (1+|z|²)
        let bound = DEFAULT_BOX_RADIUS * 2f64.sqrt() + 1.0;
        assert!(worst_first.is_finite() && worst_first <= bound, "{worst_first}");
        assert!(worst_second.is_finite() && worst_second <= bound, "{worst_second}");
    }

    proptest! {
        #[test]
        fn symmetry_group_leaves_function_and_canonical_form_unchanged(
            seed in 0u64..10_000,
            perm_seed in 0u64..1000,
        ) {
            let a = arch(2, 3, 2);
            let w = random_weights(a, seed, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let mut perm: Vec<usize> = (0..3).collect();
            for i in (1..3).rev() {
                perm.swap(i, rng.random_range(0..=i));
            }
            let flip: Vec<bool> = (0..3).map(|_| rng.random_bool(0.5)).collect();
            let image = transform_units(&w, &perm, &flip);
            for _ in 0..10 {
                let z = random_input(2, &mut rng, 5.0);
                for (x, y) in forward(&image, &z).iter().zip(forward(&w, &z)) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
            prop_assert_eq!(canonicalize(&image), canonicalize(&w));
        }
    }
}
