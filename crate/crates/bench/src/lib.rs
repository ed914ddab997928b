//! Shared fixtures for the benchmarks.

use detmlp::simulate::{generate, GeneratorSpec, InputLaw, NoiseFamily};
use detmlp::{Architecture, Dataset, SymMatrix, WeightVector};

/// A `d'=3, h=2, d=2` network and `n` noisy observations from it.
pub fn fixture(n: usize) -> (WeightVector, Dataset) {
    let arch = Architecture::new(3, 2, 2).expect("architecture");
    let weights = vec![
        1.0, -0.5, 0.3, 0.2, 0.8, -0.4, 0.1, -0.2, 1.2, -0.7, 0.6, 0.9, 0.1, -0.3,
    ];
    let w = WeightVector::new(arch, weights).expect("weights");
    let spec = GeneratorSpec {
        true_weights: w.clone(),
        noise_cov: SymMatrix::diagonal(&[1.0, 4.0]),
        noise_family: NoiseFamily::Gaussian,
        input_law: InputLaw::StandardGaussian,
        n,
        seed: 17,
    };
    let data = generate(&spec).expect("generate");
    (w, data)
}
