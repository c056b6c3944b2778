//! Singular spectra of merged weight updates.

use std::collections::BTreeMap;
use std::io::Write;

use crate::distsim::{Method, TrainResult};
use crate::error::{invalid, Error, Result};
use crate::linalg::{svd, Matrix};

pub const DEFAULT_TAU: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct RankSpectrum {
    /// Descending.
    pub singular_values: Vec<f64>,
    pub tau: f64,
    /// Number of singular values above `tau * sigma_1`.
    pub effective_rank: usize,
    pub layer_label: String,
}

impl RankSpectrum {
    pub fn sigma1(&self) -> f64 {
        self.singular_values.first().copied().unwrap_or(0.0)
    }

    /// `sigma_i / sigma_1`, or zero when the update is zero.
    pub fn normalized(&self, i: usize) -> f64 {
        let s1 = self.sigma1();
        if s1 > 0.0 {
            self.singular_values[i] / s1
        } else {
            0.0
        }
    }
}

/// Merged update of one layer relative to its initialization.
pub fn compute_delta(result: &TrainResult, method: Method, layer: usize) -> Result<Matrix> {
    if result.method != method {
        return invalid(format!(
            "snapshot was produced by {}, not {method}",
            result.method
        ));
    }
    let missing = || Error::InvalidInput(format!("no snapshot for layer {layer}"));
    let w0 = result.w_init.get(layer).ok_or_else(missing)?;
    let w1 = result.w_final.get(layer).ok_or_else(missing)?;
    match method {
        Method::LoraDp | Method::PissaDp => {
            let adapter = |snap: &[Vec<Option<crate::adapters::AdapterPair>>]| {
                snap.first()
                    .and_then(|dev| dev.get(layer))
                    .cloned()
                    .ok_or_else(missing)
            };
            match (adapter(&result.adapter_init)?, adapter(&result.adapter_final)?) {
                (Some(a0), Some(a1)) => {
                    if method == Method::LoraDp {
                        Ok(a1.product())
                    } else {
                        a1.product().sub(&a0.product())
                    }
                }
                // Layer not adapted: frozen.
                _ => Ok(Matrix::zeros(w0.rows(), w0.cols())),
            }
        }
        _ => w1.sub(w0),
    }
}

pub fn spectrum(delta: &Matrix, tau: f64, label: &str) -> Result<RankSpectrum> {
    if !delta.is_finite() {
        return invalid("update contains non-finite entries");
    }
    if tau.is_nan() || tau < 0.0 {
        return invalid(format!("tau must be non-negative, got {tau}"));
    }
    let s = svd(delta)?.s;
    let s1 = s.first().copied().unwrap_or(0.0);
    let effective_rank = if s1 > 0.0 {
        s.iter().filter(|&&x| x > tau * s1).count()
    } else {
        0
    };
    Ok(RankSpectrum {
        singular_values: s,
        tau,
        effective_rank,
        layer_label: label.to_string(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareRow {
    pub baseline: Method,
    /// 1-based singular-value index.
    pub index: usize,
    pub hd_sigma: f64,
    pub baseline_sigma: f64,
    /// `hd_sigma / baseline_sigma`; infinite when the baseline value is zero.
    pub ratio: f64,
    /// Index lies beyond the HD-PiSSA bound `2Kr`.
    pub beyond_hd_bound: bool,
    /// Index lies beyond the baseline's structural bound (`r`, `2r`, ...).
    pub beyond_baseline_bound: bool,
    /// Baseline value is at or below `tau * sigma_1`.
    pub baseline_negligible: bool,
}

/// Index-by-index comparison of the HD-PiSSA spectrum with every other method.
pub fn compare_spectra(
    spectra: &BTreeMap<Method, RankSpectrum>,
    rank: usize,
    devices: usize,
) -> Result<Vec<CompareRow>> {
    let hd = spectra
        .get(&Method::HdPissa)
        .ok_or_else(|| Error::InvalidInput("comparison needs an HD-PiSSA spectrum".into()))?;
    let hd_bound = 2 * devices * rank;
    let mut rows = Vec::new();
    for (&method, base) in spectra {
        if method == Method::HdPissa {
            continue;
        }
        let bound = method.update_rank_bound(rank, devices);
        let b1 = base.sigma1();
        let n = hd.singular_values.len().min(base.singular_values.len());
        for i in 0..n {
            let h = hd.singular_values[i];
            let b = base.singular_values[i];
            let ratio = if b > 0.0 {
                h / b
            } else if h > 0.0 {
                f64::INFINITY
            } else {
                1.0
            };
            rows.push(CompareRow {
                baseline: method,
                index: i + 1,
                hd_sigma: h,
                baseline_sigma: b,
                ratio,
                beyond_hd_bound: i + 1 > hd_bound,
                beyond_baseline_bound: bound.is_some_and(|r| i + 1 > r),
                baseline_negligible: b <= base.tau * b1,
            });
        }
    }
    Ok(rows)
}

pub const CSV_HEADER: &str = "layer,method,index,sigma,sigma_over_sigma1";

/// Rows are 1-indexed; floats use 17 significant digits so they round-trip.
pub fn write_spectrum_csv<W: Write>(
    out: &mut W,
    spectra: &[(Method, &RankSpectrum)],
    header: bool,
) -> std::io::Result<()> {
    if header {
        writeln!(out, "{CSV_HEADER}")?;
    }
    for (method, spec) in spectra {
        for (i, s) in spec.singular_values.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{:.16e},{:.16e}",
                spec.layer_label,
                method.name(),
                i + 1,
                s,
                spec.normalized(i)
            )?;
        }
    }
    Ok(())
}
