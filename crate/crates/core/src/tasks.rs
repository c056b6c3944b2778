//! Deterministic teacher-student data with a controllable-rank optimal update.

use crate::error::{invalid, Result};
use crate::linalg::Matrix;
use crate::model::{Activation, LossKind};
use crate::rng::SplitMix64;

const TAG_BASE: u64 = 1;
const TAG_DELTA: u64 = 2;
const TAG_BATCH: u64 = 3;
const TAG_EVAL: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    LinearTeacher,
    MlpClassify,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::LinearTeacher => "linear_teacher",
            TaskKind::MlpClassify => "mlp_classify",
        }
    }
}

impl std::str::FromStr for TaskKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear_teacher" | "LinearTeacher" => Ok(TaskKind::LinearTeacher),
            "mlp_classify" | "MlpClassify" => Ok(TaskKind::MlpClassify),
            other => invalid(format!("unknown task kind `{other}`")),
        }
    }
}

/// A student initialization (`base`) and a hidden teacher `base + delta`
/// whose per-layer deltas have exact rank `target_rank`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub target_rank: usize,
    pub noise_std: f64,
    pub seed: u64,
    base: Vec<Matrix>,
    deltas: Vec<Matrix>,
    teacher: Vec<Matrix>,
}

/// Orthonormal `rows x cols` frame from Gaussian columns (modified
/// Gram-Schmidt, two passes).
fn random_orthonormal(rows: usize, cols: usize, rng: &mut SplitMix64) -> Matrix {
    debug_assert!(cols <= rows);
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while q.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for u in &q {
                let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    Matrix::from_fn(rows, cols, |i, k| q[k][i])
}

/// `Q_L diag(sigma) Q_R^T` with random orthonormal frames.
fn with_spectrum(rows: usize, cols: usize, sigma: &[f64], rng: &mut SplitMix64) -> Matrix {
    let k = sigma.len();
    if k == 0 {
        return Matrix::zeros(rows, cols);
    }
    let left = random_orthonormal(rows, k, rng);
    let right = random_orthonormal(cols, k, rng);
    let scaled = Matrix::from_fn(rows, k, |i, j| left.get(i, j) * sigma[j]);
    scaled.matmul(&right.transpose()).expect("conformant")
}

/// Pretrained-like weight: singular values `1/k`.
fn base_weight(rows: usize, cols: usize, seed: u64, layer: u64) -> Matrix {
    let d = rows.min(cols);
    let sigma: Vec<f64> = (1..=d).map(|k| 1.0 / k as f64).collect();
    with_spectrum(rows, cols, &sigma, &mut SplitMix64::derived(seed, &[TAG_BASE, layer]))
}

/// Random partial isometry of rank `rank`: every nonzero singular value is 1.
fn target_delta(rows: usize, cols: usize, rank: usize, seed: u64, layer: u64) -> Matrix {
    let sigma = vec![1.0; rank];
    with_spectrum(rows, cols, &sigma, &mut SplitMix64::derived(seed, &[TAG_DELTA, layer]))
}

fn check_dims(dims: &[usize], target_rank: usize, noise_std: f64) -> Result<()> {
    if dims.contains(&0) {
        return invalid("task dimensions must be positive");
    }
    if !(noise_std >= 0.0 && noise_std.is_finite()) {
        return invalid(format!("noise_std must be non-negative, got {noise_std}"));
    }
    let min = dims.windows(2).map(|w| w[0].min(w[1])).min().unwrap_or(0);
    if target_rank > min {
        return invalid(format!("target_rank {target_rank} exceeds min layer dimension {min}"));
    }
    Ok(())
}

/// Single-layer regression: `T = X (W_base + delta) + noise`.
pub fn gen_linear_task(
    input_dim: usize,
    output_dim: usize,
    target_rank: usize,
    noise_std: f64,
    seed: u64,
) -> Result<SyntheticTask> {
    check_dims(&[input_dim, output_dim], target_rank, noise_std)?;
    let base = base_weight(input_dim, output_dim, seed, 0);
    let delta = target_delta(input_dim, output_dim, target_rank, seed, 0);
    let teacher = base.add(&delta)?;
    Ok(SyntheticTask {
        kind: TaskKind::LinearTeacher,
        input_dim,
        hidden_dim: 0,
        output_dim,
        target_rank,
        noise_std,
        seed,
        base: vec![base],
        deltas: vec![delta],
        teacher: vec![teacher],
    })
}

/// Two-layer tanh teacher; labels are the one-hot argmax of its logits.
pub fn gen_mlp_task(
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
    target_rank: usize,
    seed: u64,
) -> Result<SyntheticTask> {
    check_dims(&[input_dim, hidden_dim, output_dim], target_rank, 0.0)?;
    let dims = [(input_dim, hidden_dim), (hidden_dim, output_dim)];
    let mut base = Vec::new();
    let mut deltas = Vec::new();
    let mut teacher = Vec::new();
    for (l, &(r, c)) in dims.iter().enumerate() {
        let b = base_weight(r, c, seed, l as u64);
        let d = target_delta(r, c, target_rank, seed, l as u64);
        teacher.push(b.add(&d)?);
        base.push(b);
        deltas.push(d);
    }
    Ok(SyntheticTask {
        kind: TaskKind::MlpClassify,
        input_dim,
        hidden_dim,
        output_dim,
        target_rank,
        noise_std: 0.0,
        seed,
        base,
        deltas,
        teacher,
    })
}

impl SyntheticTask {
    /// Student initialization, one matrix per layer.
    pub fn base_weights(&self) -> &[Matrix] {
        &self.base
    }

    pub fn target_deltas(&self) -> &[Matrix] {
        &self.deltas
    }

    pub fn teacher_weights(&self) -> &[Matrix] {
        &self.teacher
    }

    pub fn activation(&self) -> Activation {
        match self.kind {
            TaskKind::LinearTeacher => Activation::Identity,
            TaskKind::MlpClassify => Activation::Tanh,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        match self.kind {
            TaskKind::LinearTeacher => LossKind::Mse,
            TaskKind::MlpClassify => LossKind::SoftmaxCrossEntropy,
        }
    }

    /// Batch for `step`; a pure function of `(seed, step, batch_size)`.
    pub fn next_batch(&self, step: u64, batch_size: usize) -> Result<(Matrix, Matrix)> {
        self.sample(&mut SplitMix64::derived(self.seed, &[TAG_BATCH, step]), batch_size)
    }

    /// Fixed held-out batch, disjoint from the training stream.
    pub fn eval_batch(&self, batch_size: usize) -> Result<(Matrix, Matrix)> {
        self.sample(&mut SplitMix64::derived(self.seed, &[TAG_EVAL]), batch_size)
    }

    fn sample(&self, rng: &mut SplitMix64, batch_size: usize) -> Result<(Matrix, Matrix)> {
        if batch_size == 0 {
            return invalid("batch_size must be at least 1");
        }
        let x = Matrix::from_fn(batch_size, self.input_dim, |_, _| rng.normal());
        let t = match self.kind {
            TaskKind::LinearTeacher => {
                let clean = x.matmul(&self.teacher[0])?;
                if self.noise_std > 0.0 {
                    clean.map(|v| v + self.noise_std * rng.normal())
                } else {
                    clean
                }
            }
            TaskKind::MlpClassify => {
                let h = x.matmul(&self.teacher[0])?.map(f64::tanh);
                let logits = h.matmul(&self.teacher[1])?;
                Matrix::from_fn(batch_size, self.output_dim, |i, j| {
                    let row = logits.row(i);
                    let arg = (0..row.len())
                        .max_by(|&a, &b| row[a].total_cmp(&row[b]).then(b.cmp(&a)))
                        .unwrap_or(0);
                    if arg == j {
                        1.0
                    } else {
                        0.0
                    }
                })
            }
        };
        Ok((x, t))
    }
}
