//! Fixtures shared by the criterion benchmarks.

use hdpissa_core::rng::SplitMix64;
use hdpissa_core::tasks::{gen_linear_task, SyntheticTask};
use hdpissa_core::{Matrix, Method, Trainer, TrainerConfig};

pub fn gaussian(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(rows, cols, |_, _| rng.normal())
}

pub fn desk_task() -> SyntheticTask {
    gen_linear_task(64, 64, 32, 0.0, 7).expect("fixed task shape")
}

pub fn trainer(method: Method, devices: usize, rank: usize, parallel: bool) -> (Trainer, Matrix, Matrix) {
    let task = desk_task();
    let config = TrainerConfig {
        method,
        devices,
        rank,
        global_batch: 64,
        parallel,
        ..TrainerConfig::default()
    };
    let (x, t) = task.next_batch(0, 64).expect("batch");
    (Trainer::new(config, &task).expect("valid config"), x, t)
}
