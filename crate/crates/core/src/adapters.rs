//! LoRA, PiSSA and HD-PiSSA adapter construction.
//!
//! Shapes follow `Y = X W` with `W: m x n` (`m` inputs, `n` outputs), so an
//! adapter is `A: m x r`, `B: r x n` and contributes `A B`.

use crate::error::{invalid, Result};
use crate::linalg::{svd, Matrix, Svd};
use crate::rng::SplitMix64;

/// One device's adapter factors and the singular-component range they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterPair {
    pub a: Matrix,
    pub b: Matrix,
    pub device_index: usize,
    pub component_lo: usize,
    pub component_hi: usize,
}

impl AdapterPair {
    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn product(&self) -> Matrix {
        self.a.matmul(&self.b).expect("adapter factors are conformant")
    }

    /// Checks the shape invariants against a base weight of shape `(m, n)`.
    pub fn validate_for(&self, m: usize, n: usize) -> Result<()> {
        let r = self.rank();
        if self.a.rows() != m || self.b.cols() != n || self.b.rows() != r {
            return invalid(format!(
                "adapter {}x{} / {}x{} does not fit a {m}x{n} weight",
                self.a.rows(),
                self.a.cols(),
                self.b.rows(),
                self.b.cols()
            ));
        }
        if self.component_hi - self.component_lo != r {
            return invalid("adapter component range does not match its rank");
        }
        Ok(())
    }
}

/// `W_res = W - A B` for a PiSSA adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualWeight {
    pub w_res: Matrix,
}

fn check_rank(w: &Matrix, rank: usize) -> Result<()> {
    let d = w.rows().min(w.cols());
    if rank == 0 || rank > d {
        return invalid(format!("rank {rank} outside 1..={d}"));
    }
    Ok(())
}

/// Kaiming-uniform `A` on `[-sqrt(6/m), sqrt(6/m)]`, zero `B`.
pub fn init_lora(w: &Matrix, rank: usize, seed: u64) -> Result<AdapterPair> {
    init_lora_for_device(w, rank, seed, 0)
}

pub(crate) fn init_lora_for_device(
    w: &Matrix,
    rank: usize,
    seed: u64,
    device_index: usize,
) -> Result<AdapterPair> {
    check_rank(w, rank)?;
    let (m, n) = w.shape();
    let bound = (6.0 / m as f64).sqrt();
    let mut rng = SplitMix64::new(seed);
    let a = Matrix::from_fn(m, rank, |_, _| rng.uniform(-bound, bound));
    Ok(AdapterPair {
        a,
        b: Matrix::zeros(rank, n),
        device_index,
        component_lo: device_index * rank,
        component_hi: (device_index + 1) * rank,
    })
}

/// Top-`rank` principal components as the adapter; the rest stays in `W_res`.
pub fn init_pissa(w: &Matrix, rank: usize) -> Result<(AdapterPair, ResidualWeight)> {
    check_rank(w, rank)?;
    let f = svd(w)?;
    pissa_from_svd(w, &f, rank)
}

pub fn pissa_from_svd(w: &Matrix, f: &Svd, rank: usize) -> Result<(AdapterPair, ResidualWeight)> {
    check_rank(w, rank)?;
    let (a, b) = f.truncate(0, rank)?;
    let pair = AdapterPair {
        a,
        b,
        device_index: 0,
        component_lo: 0,
        component_hi: rank,
    };
    let w_res = w.sub(&pair.product())?;
    Ok((pair, ResidualWeight { w_res }))
}

/// Partition the top `devices * rank` components: device `i` gets `i*r..(i+1)*r`.
pub fn init_hd_pissa(w: &Matrix, rank: usize, devices: usize) -> Result<Vec<AdapterPair>> {
    let f = svd(w)?;
    hd_pissa_from_svd(w, &f, rank, devices)
}

pub fn hd_pissa_from_svd(
    w: &Matrix,
    f: &Svd,
    rank: usize,
    devices: usize,
) -> Result<Vec<AdapterPair>> {
    if devices == 0 {
        return invalid("need at least one device");
    }
    check_rank(w, rank)?;
    let d = w.rows().min(w.cols());
    if devices * rank > d {
        return invalid(format!(
            "{devices} devices x rank {rank} exceeds min dimension {d}"
        ));
    }
    (0..devices)
        .map(|i| {
            let (lo, hi) = (i * rank, (i + 1) * rank);
            let (a, b) = f.truncate(lo, hi)?;
            Ok(AdapterPair {
                a,
                b,
                device_index: i,
                component_lo: lo,
                component_hi: hi,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut g = SplitMix64::new(seed);
        Matrix::from_fn(rows, cols, |_, _| g.normal())
    }

    #[test]
    fn lora_product_is_zero() {
        let w = random(6, 5, 1);
        let p = init_lora(&w, 3, 42).unwrap();
        assert_eq!(p.product(), Matrix::zeros(6, 5));
        assert_eq!(p.rank(), 3);
    }

    #[test]
    fn lora_is_deterministic() {
        let w = random(6, 5, 1);
        let a = init_lora(&w, 2, 7).unwrap();
        let b = init_lora(&w, 2, 7).unwrap();
        assert_eq!(a.a.data(), b.a.data());
        assert_ne!(init_lora(&w, 2, 8).unwrap().a, a.a);
    }

    #[test]
    fn lora_respects_kaiming_bound() {
        let w = random(4, 6, 2);
        let p = init_lora(&w, 2, 3).unwrap();
        let bound = (6.0f64 / 4.0).sqrt();
        assert!(p.a.data().iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn lora_rejects_bad_rank() {
        let w = random(4, 3, 2);
        assert!(init_lora(&w, 0, 1).is_err());
        assert!(init_lora(&w, 4, 1).is_err());
    }

    #[test]
    fn pissa_diag_example() {
        let w = Matrix::diag(&[4.0, 1.0]);
        let (p, res) = init_pissa(&w, 1).unwrap();
        assert_eq!(p.product(), Matrix::diag(&[4.0, 0.0]));
        assert_eq!(res.w_res, Matrix::diag(&[0.0, 1.0]));
    }

    #[test]
    fn pissa_full_rank_leaves_no_residual() {
        let w = random(5, 7, 3);
        let (_, res) = init_pissa(&w, 5).unwrap();
        assert!(res.w_res.frobenius_norm() <= 1e-10 * w.frobenius_norm());
    }

    #[test]
    fn pissa_residual_is_eckart_young() {
        let w = random(8, 8, 4);
        let (_, res) = init_pissa(&w, 3).unwrap();
        let s = svd(&w).unwrap().s;
        let tail: f64 = s[3..].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((res.w_res.frobenius_norm() - tail).abs() <= 1e-9);
    }

    #[test]
    fn hd_pissa_single_device_equals_pissa() {
        let w = random(7, 6, 5);
        let f = svd(&w).unwrap();
        let hd = hd_pissa_from_svd(&w, &f, 3, 1).unwrap();
        let (p, _) = pissa_from_svd(&w, &f, 3).unwrap();
        assert_eq!(hd, vec![p]);
    }

    #[test]
    fn hd_pissa_diag_example() {
        let w = Matrix::diag(&[8.0, 6.0, 4.0, 2.0]);
        let pairs = init_hd_pissa(&w, 1, 4).unwrap();
        for (i, p) in pairs.iter().enumerate() {
            let mut expect = [0.0; 4];
            expect[i] = [8.0, 6.0, 4.0, 2.0][i];
            let gap = p.product().sub(&Matrix::diag(&expect)).unwrap().max_abs();
            assert!(gap <= 1e-14, "device {i}: {gap}");
            assert_eq!((p.component_lo, p.component_hi), (i, i + 1));
        }
    }

    #[test]
    fn hd_pissa_pairs_are_orthogonal() {
        let w = random(16, 16, 6);
        let pairs = init_hd_pissa(&w, 2, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                if i == j {
                    continue;
                }
                let (ai, aj) = (&pairs[i].a, &pairs[j].a);
                let cross = ai.transpose().matmul(aj).unwrap().frobenius_norm();
                assert!(cross <= 1e-9 * ai.frobenius_norm() * aj.frobenius_norm());
                let (bi, bj) = (&pairs[i].b, &pairs[j].b);
                let cross = bi.matmul(&bj.transpose()).unwrap().frobenius_norm();
                assert!(cross <= 1e-9 * bi.frobenius_norm() * bj.frobenius_norm());
            }
        }
    }

    #[test]
    fn hd_pissa_sum_is_partial_reconstruction() {
        let w = random(10, 9, 7);
        let f = svd(&w).unwrap();
        let pairs = hd_pissa_from_svd(&w, &f, 2, 3).unwrap();
        let mut sum = Matrix::zeros(10, 9);
        for p in &pairs {
            sum = sum.add(&p.product()).unwrap();
        }
        let (a, b) = f.truncate(0, 6).unwrap();
        assert!(sum.sub(&a.matmul(&b).unwrap()).unwrap().frobenius_norm() <= 1e-12 * w.frobenius_norm());
    }

    #[test]
    fn hd_pissa_rejects_oversubscription() {
        let w = random(6, 6, 8);
        assert!(init_hd_pissa(&w, 2, 4).is_err());
        assert!(init_hd_pissa(&w, 2, 0).is_err());
    }
}
