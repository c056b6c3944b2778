//! AdamW that returns explicit deltas, and the direct-weight-update algebra.

use crate::adapters::AdapterPair;
use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, Precision};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamWState {
    pub m1: Matrix,
    pub m2: Matrix,
    pub t: u64,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize, config: AdamWConfig) -> Self {
        Self {
            m1: Matrix::zeros(rows, cols),
            m2: Matrix::zeros(rows, cols),
            t: 0,
            config,
        }
    }

    /// Advance one step at learning rate `lr`, returning the additive delta
    /// for `param` without applying it.
    pub fn delta(
        &self,
        grad: &Matrix,
        param: &Matrix,
        lr: f64,
        prec: Precision,
    ) -> Result<(Matrix, AdamWState)> {
        if grad.shape() != self.m1.shape() || param.shape() != self.m1.shape() {
            return Err(Error::DimensionMismatch {
                op: "adamw",
                lhs: grad.shape(),
                rhs: self.m1.shape(),
            });
        }
        let c = self.config;
        let r = |x: f64| prec.round(x);
        let t = self.t + 1;
        let bc1 = r(1.0 - c.beta1.powi(t as i32));
        let bc2 = r(1.0 - c.beta2.powi(t as i32));

        let m1 = self
            .m1
            .zip_with(grad, |m, g| r(r(c.beta1 * m) + r((1.0 - c.beta1) * g)))?;
        let m2 = self
            .m2
            .zip_with(grad, |v, g| r(r(c.beta2 * v) + r((1.0 - c.beta2) * r(g * g))))?;

        let mut delta = Matrix::zeros(param.rows(), param.cols());
        for i in 0..param.rows() {
            for j in 0..param.cols() {
                let m_hat = r(m1.get(i, j) / bc1);
                let v_hat = r(m2.get(i, j) / bc2);
                let adaptive = r(m_hat / r(r(v_hat.sqrt()) + c.eps));
                let decay = r(c.weight_decay * param.get(i, j));
                delta.set(i, j, r(-lr * r(adaptive + decay)));
            }
        }
        Ok((
            delta,
            AdamWState {
                m1,
                m2,
                t,
                config: c,
            },
        ))
    }
}

/// One AdamW step at the state's configured learning rate in 64-bit arithmetic.
pub fn adamw_delta(grad: &Matrix, param: &Matrix, state: &AdamWState) -> Result<(Matrix, AdamWState)> {
    state.delta(grad, param, state.config.lr, Precision::F64)
}

/// `du = da b + a db + da db`: the change of `a b` when both factors move.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaUpdate {
    pub du: Matrix,
}

pub fn delta_update(pair: &AdapterPair, da: &Matrix, db: &Matrix) -> Result<DeltaUpdate> {
    delta_update_with(pair, da, db, Precision::F64)
}

pub fn delta_update_with(
    pair: &AdapterPair,
    da: &Matrix,
    db: &Matrix,
    prec: Precision,
) -> Result<DeltaUpdate> {
    if da.shape() != pair.a.shape() || db.shape() != pair.b.shape() {
        return invalid(format!(
            "delta shapes {:?}/{:?} do not match adapter {:?}/{:?}",
            da.shape(),
            db.shape(),
            pair.a.shape(),
            pair.b.shape()
        ));
    }
    let first = da.matmul_with(&pair.b, prec)?;
    let second = pair.a.matmul_with(db, prec)?;
    let cross = da.matmul_with(db, prec)?;
    let du = first.add_with(&second, prec)?.add_with(&cross, prec)?;
    Ok(DeltaUpdate { du })
}

/// Device-order mean of the deltas.
pub fn aggregate(deltas: &[DeltaUpdate]) -> Result<Matrix> {
    aggregate_with(deltas, Precision::F64)
}

pub fn aggregate_with(deltas: &[DeltaUpdate], prec: Precision) -> Result<Matrix> {
    let Some(first) = deltas.first() else {
        return invalid("cannot aggregate zero deltas");
    };
    let mut sum = first.du.clone();
    for d in &deltas[1..] {
        sum = sum.add_with(&d.du, prec)?;
    }
    let k = deltas.len() as f64;
    Ok(sum.map(|x| prec.round(x / k)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScheduleKind {
    #[default]
    Constant,
    Cosine,
}

impl ScheduleKind {
    pub fn name(self) -> &'static str {
        match self {
            ScheduleKind::Constant => "constant",
            ScheduleKind::Cosine => "cosine",
        }
    }
}

impl std::str::FromStr for ScheduleKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(ScheduleKind::Constant),
            "cosine" => Ok(ScheduleKind::Cosine),
            other => crate::error::invalid(format!("unknown schedule `{other}`")),
        }
    }
}

/// Linear warmup followed by constant or cosine-annealed learning rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup_ratio: f64,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn warmup_steps(&self) -> usize {
        (self.warmup_ratio * self.total_steps as f64).round() as usize
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.base_lr * (step + 1) as f64 / warm as f64;
        }
        match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::Cosine => {
                let span = self.total_steps.saturating_sub(warm).max(1) as f64;
                let progress = (step - warm) as f64 / span;
                0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * progress).cos())
            }
        }
    }
}
