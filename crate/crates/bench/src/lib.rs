//! Fixtures shared by the benchmarks.

use diffora_core::data::gen_sphere;
use diffora_core::numerics::gaussian_matrix;
use diffora_core::pipeline::{prepare_task, RunConfig, Task};
use diffora_core::{Matrix, SeededRng};

/// Random symmetric positive definite `n×n` matrix.
pub fn spd(n: usize, seed: u64) -> Matrix {
    let g = gaussian_matrix(n, n, &mut SeededRng::new(seed, 0)).expect("valid shape");
    let mut m = g.t_matmul(&g).expect("square");
    for i in 0..n {
        m[(i, i)] += n as f64;
    }
    m
}

/// Unit-norm inputs (`d×n`) and a Gaussian `d×m` base layer.
pub fn gram_inputs(n: usize, d: usize, m: usize, seed: u64) -> (Matrix, Matrix) {
    let rng = SeededRng::new(seed, 0);
    let ds = gen_sphere(n, d, 1.0, &mut rng.derive(1)).expect("valid sphere data");
    let w0 = gaussian_matrix(d, m, &mut rng.derive(2)).expect("valid shape");
    (ds.x, w0)
}

/// The default planted task.
pub fn planted_task(seed: u64) -> (RunConfig, Task) {
    let cfg = RunConfig::planted_default(seed);
    let task = prepare_task(&cfg).expect("default config is valid");
    (cfg, task)
}
