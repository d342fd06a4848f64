//! Shared workloads for the benchmarks.

use jmls_core::model::{benchmark_scalar_system, random_model};
use jmls_core::{simulate, Dataset, InputLaw, JmlsModel};

/// The scalar benchmark system with `steps` simulated samples.
pub fn scalar_workload(steps: usize) -> (JmlsModel, Dataset) {
    let model = benchmark_scalar_system();
    let data = simulate(&model, &InputLaw::StandardNormal, steps, 1).expect("simulation succeeds");
    (model, data)
}

/// A random stable system with `n_x` states and `m` modes.
pub fn random_workload(n_x: usize, m: usize, steps: usize) -> (JmlsModel, Dataset) {
    let model = random_model(n_x, 1, 1, m, 7);
    let data = simulate(&model, &InputLaw::StandardNormal, steps, 8).expect("simulation succeeds");
    (model, data)
}
