//! Adapter-augmented linear networks with hand-written backpropagation.
//!
//! A layer computes `Z = X W + s (X A) B` where `s` depends on the mode:
//! no adapter term for `Plain`, `s = 1` for `Residual` (W holds `W_res`),
//! and `s = gamma` for `Muted`. Muted adapter gradients are multiplied by
//! `1/gamma` on the way out, which recovers the gradients of the
//! unscaled residual parametrization.

use crate::adapters::AdapterPair;
use crate::error::{invalid, Error, Result};
use crate::linalg::{Matrix, Precision};

pub const DEFAULT_GAMMA: f64 = 1e-16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardMode {
    Plain,
    Residual,
    Muted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Tanh,
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Mse,
    SoftmaxCrossEntropy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLinearLayer {
    pub w: Matrix,
    pub adapter: Option<AdapterPair>,
    pub gamma: f64,
    pub mode: ForwardMode,
}

impl AdapterLinearLayer {
    pub fn plain(w: Matrix) -> Self {
        Self {
            w,
            adapter: None,
            gamma: DEFAULT_GAMMA,
            mode: ForwardMode::Plain,
        }
    }

    pub fn new(
        w: Matrix,
        adapter: Option<AdapterPair>,
        gamma: f64,
        mode: ForwardMode,
    ) -> Result<Self> {
        let layer = Self {
            w,
            adapter,
            gamma,
            mode,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(p) = &self.adapter {
            p.validate_for(self.w.rows(), self.w.cols())?;
        }
        match self.mode {
            ForwardMode::Plain => Ok(()),
            ForwardMode::Residual if self.adapter.is_none() => {
                invalid("residual mode needs an adapter")
            }
            ForwardMode::Residual => Ok(()),
            ForwardMode::Muted if self.adapter.is_none() => invalid("muted mode needs an adapter"),
            ForwardMode::Muted if !(self.gamma > 0.0 && self.gamma.is_finite()) => {
                invalid(format!("mute scalar must be positive, got {}", self.gamma))
            }
            ForwardMode::Muted => Ok(()),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }

    /// Multiplier on the adapter product in the forward pass, if it is active.
    fn adapter_scale(&self) -> Option<f64> {
        match self.mode {
            ForwardMode::Plain => None,
            ForwardMode::Residual => Some(1.0),
            ForwardMode::Muted => Some(self.gamma),
        }
    }

    /// `W + s A B`, the weight the layer effectively applies.
    pub fn effective_weight(&self) -> Matrix {
        match (self.adapter_scale(), &self.adapter) {
            (Some(s), Some(p)) => self
                .w
                .add(&p.product().scale(s))
                .expect("validated adapter shape"),
            _ => self.w.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<AdapterLinearLayer>,
    pub activation: Activation,
    pub loss: LossKind,
    pub precision: Precision,
}

impl Network {
    pub fn new(
        layers: Vec<AdapterLinearLayer>,
        activation: Activation,
        loss: LossKind,
    ) -> Result<Self> {
        if layers.is_empty() {
            return invalid("network needs at least one layer");
        }
        for l in &layers {
            l.validate()?;
        }
        for (k, pair) in layers.windows(2).enumerate() {
            if pair[0].out_dim() != pair[1].in_dim() {
                return invalid(format!(
                    "layer {k} outputs {} features but layer {} expects {}",
                    pair[0].out_dim(),
                    k + 1,
                    pair[1].in_dim()
                ));
            }
        }
        Ok(Self {
            layers,
            activation,
            loss,
            precision: Precision::F64,
        })
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }
}

/// Per-layer cached intermediates from [`forward`].
#[derive(Debug, Clone)]
pub struct Tape {
    inputs: Vec<Matrix>,
    adapter_hidden: Vec<Option<Matrix>>,
    pre_activations: Vec<Matrix>,
}

impl Tape {
    pub fn output(&self) -> &Matrix {
        self.pre_activations.last().expect("non-empty tape")
    }

    pub fn inputs(&self) -> &[Matrix] {
        &self.inputs
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub g_w: Matrix,
    pub g_a: Option<Matrix>,
    pub g_b: Option<Matrix>,
}

fn activate(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Tanh => z.tanh(),
        Activation::Relu => z.max(0.0),
        Activation::Identity => z,
    }
}

fn activation_slope(act: Activation, z: f64) -> f64 {
    match act {
        Activation::Tanh => {
            let t = z.tanh();
            1.0 - t * t
        }
        Activation::Relu => {
            if z > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Activation::Identity => 1.0,
    }
}

pub fn forward(net: &Network, x: &Matrix) -> Result<(Matrix, Tape)> {
    let p = net.precision;
    if x.cols() != net.input_dim() {
        return Err(Error::DimensionMismatch {
            op: "forward",
            lhs: x.shape(),
            rhs: net.layers[0].w.shape(),
        });
    }
    let last = net.layers.len() - 1;
    let mut inputs = Vec::with_capacity(net.layers.len());
    let mut adapter_hidden = Vec::with_capacity(net.layers.len());
    let mut pre_activations = Vec::with_capacity(net.layers.len());
    let mut h = p.round_matrix(x);
    for (k, layer) in net.layers.iter().enumerate() {
        layer.validate()?;
        let w = p.round_matrix(&layer.w);
        let mut z = h.matmul_with(&w, p)?;
        let hidden = match (layer.adapter_scale(), &layer.adapter) {
            (Some(s), Some(pair)) => {
                let s = p.round(s);
                let xa = h.matmul_with(&p.round_matrix(&pair.a), p)?;
                let xab = xa.matmul_with(&p.round_matrix(&pair.b), p)?;
                z = z.zip_with(&xab, |zv, v| p.round(zv + p.round(s * v)))?;
                Some(xa)
            }
            _ => None,
        };
        let next = if k < last {
            z.map(|v| p.round(activate(net.activation, v)))
        } else {
            z.clone()
        };
        inputs.push(std::mem::replace(&mut h, next));
        adapter_hidden.push(hidden);
        pre_activations.push(z);
    }
    Ok((
        h,
        Tape {
            inputs,
            adapter_hidden,
            pre_activations,
        },
    ))
}

/// Mean loss over rows and its gradient with respect to the network output.
fn loss_and_grad(kind: LossKind, y: &Matrix, t: &Matrix, p: Precision) -> Result<(f64, Matrix)> {
    if y.shape() != t.shape() {
        return Err(Error::DimensionMismatch {
            op: "loss",
            lhs: y.shape(),
            rhs: t.shape(),
        });
    }
    let rows = y.rows() as f64;
    match kind {
        LossKind::Mse => {
            let diff = y.sub_with(t, p)?;
            let ss = diff
                .data()
                .iter()
                .fold(0.0, |acc, d| p.round(acc + p.round(d * d)));
            let loss = p.round(ss / (2.0 * rows));
            Ok((loss, diff.map(|d| p.round(d / rows))))
        }
        LossKind::SoftmaxCrossEntropy => {
            let mut grad = Matrix::zeros(y.rows(), y.cols());
            let mut total = 0.0;
            for i in 0..y.rows() {
                let row = y.row(i);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| p.round((v - max).exp())).collect();
                let z = exps.iter().fold(0.0, |a, e| p.round(a + e));
                let log_z = p.round(z.ln());
                for j in 0..y.cols() {
                    let tij = t.get(i, j);
                    let log_p = p.round(p.round(row[j] - max) - log_z);
                    if tij != 0.0 {
                        total = p.round(total - p.round(tij * log_p));
                    }
                    let prob = p.round(exps[j] / z);
                    grad.set(i, j, p.round(p.round(prob - tij) / rows));
                }
            }
            Ok((p.round(total / rows), grad))
        }
    }
}

pub fn loss_only(net: &Network, x: &Matrix, targets: &Matrix) -> Result<f64> {
    let (y, _) = forward(net, x)?;
    Ok(loss_and_grad(net.loss, &y, targets, net.precision)?.0)
}

/// Mean loss and per-layer gradients. Muted-layer adapter gradients are
/// returned already multiplied by `1/gamma`.
pub fn backward(
    net: &Network,
    tape: &Tape,
    targets: &Matrix,
) -> Result<(f64, Vec<LayerGradients>)> {
    let p = net.precision;
    if tape.inputs.len() != net.layers.len() {
        return invalid("tape was recorded on a different network");
    }
    for (layer, input) in net.layers.iter().zip(&tape.inputs) {
        if input.cols() != layer.in_dim() {
            return invalid("tape was recorded on a different network");
        }
    }
    let (loss, mut dz) = loss_and_grad(net.loss, tape.output(), targets, p)?;

    let mut grads = Vec::with_capacity(net.layers.len());
    for k in (0..net.layers.len()).rev() {
        let layer = &net.layers[k];
        let x = &tape.inputs[k];
        let w = p.round_matrix(&layer.w);
        let g_w = x.t_matmul_with(&dz, p)?;
        let mut dx = if k > 0 {
            Some(dz.matmul_t_with(&w, p)?)
        } else {
            None
        };

        let (g_a, g_b) = match (layer.adapter_scale(), &layer.adapter, &tape.adapter_hidden[k]) {
            (Some(s), Some(pair), Some(xa)) => {
                let s = p.round(s);
                let a = p.round_matrix(&pair.a);
                let b = p.round_matrix(&pair.b);
                // Gradient with respect to the product (X A) B.
                let d_prod = dz.scale_with(s, p);
                let mut g_b = xa.t_matmul_with(&d_prod, p)?;
                let d_hidden = d_prod.matmul_t_with(&b, p)?;
                let mut g_a = x.t_matmul_with(&d_hidden, p)?;
                if layer.mode == ForwardMode::Muted {
                    let inv = p.round(1.0 / s);
                    g_a = g_a.scale_with(inv, p);
                    g_b = g_b.scale_with(inv, p);
                }
                if let Some(dx) = dx.as_mut() {
                    let through_adapter = d_hidden.matmul_t_with(&a, p)?;
                    *dx = dx.add_with(&through_adapter, p)?;
                }
                (Some(g_a), Some(g_b))
            }
            (Some(_), Some(_), None) => return invalid("tape is missing adapter activations"),
            _ => (None, None),
        };
        grads.push(LayerGradients { g_w, g_a, g_b });

        if let Some(dx) = dx {
            let z_prev = &tape.pre_activations[k - 1];
            dz = dx.zip_with(z_prev, |g, z| p.round(g * activation_slope(net.activation, z)))?;
        }
    }
    grads.reverse();
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{init_hd_pissa, init_pissa};
    use crate::rng::SplitMix64;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut g = SplitMix64::new(seed);
        Matrix::from_fn(rows, cols, |_, _| g.normal())
    }

    fn random_pair(m: usize, n: usize, r: usize, seed: u64) -> AdapterPair {
        AdapterPair {
            a: random(m, r, seed).scale(0.5),
            b: random(r, n, seed + 1).scale(0.5),
            device_index: 0,
            component_lo: 0,
            component_hi: r,
        }
    }

    fn rel(a: &Matrix, b: &Matrix) -> f64 {
        a.sub(b).unwrap().frobenius_norm() / b.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn muted_requires_positive_gamma() {
        let w = random(3, 3, 1);
        let pair = random_pair(3, 3, 1, 2);
        assert!(AdapterLinearLayer::new(w.clone(), Some(pair.clone()), 0.0, ForwardMode::Muted).is_err());
        assert!(AdapterLinearLayer::new(w.clone(), None, 1e-16, ForwardMode::Muted).is_err());
        assert!(AdapterLinearLayer::new(w, Some(pair), 1e-16, ForwardMode::Muted).is_ok());
    }

    #[test]
    fn network_checks_chaining() {
        let l0 = AdapterLinearLayer::plain(random(3, 4, 1));
        let l1 = AdapterLinearLayer::plain(random(5, 2, 2));
        assert!(Network::new(vec![l0, l1], Activation::Tanh, LossKind::Mse).is_err());
    }

    #[test]
    fn one_layer_hand_example() {
        let w = Matrix::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let net = Network::new(vec![AdapterLinearLayer::plain(w)], Activation::Identity, LossKind::Mse).unwrap();
        let x = Matrix::from_rows(&[&[1.0, -1.0], &[0.5, 2.0]]).unwrap();
        let (y, _) = forward(&net, &x).unwrap();
        assert_eq!(y, Matrix::from_rows(&[&[-2.0, -2.0], &[6.5, 9.0]]).unwrap());
    }

    #[test]
    fn forward_rejects_bad_input() {
        let net = Network::new(vec![AdapterLinearLayer::plain(random(3, 2, 1))], Activation::Tanh, LossKind::Mse).unwrap();
        assert!(forward(&net, &random(4, 2, 2)).is_err());
    }

    #[test]
    fn muting_bound() {
        let w = random(6, 5, 3);
        let pair = random_pair(6, 5, 2, 4);
        let x = random(4, 6, 5);
        let gamma = 1e-16;
        let muted = Network::new(
            vec![AdapterLinearLayer::new(w.clone(), Some(pair.clone()), gamma, ForwardMode::Muted).unwrap()],
            Activation::Identity,
            LossKind::Mse,
        )
        .unwrap();
        let plain = Network::new(vec![AdapterLinearLayer::plain(w)], Activation::Identity, LossKind::Mse).unwrap();
        let ym = forward(&muted, &x).unwrap().0;
        let yp = forward(&plain, &x).unwrap().0;
        let bound = 2e-16 * x.frobenius_norm() * pair.a.frobenius_norm() * pair.b.frobenius_norm();
        assert!(ym.sub(&yp).unwrap().frobenius_norm() <= bound);
    }

    #[test]
    fn pissa_residual_forward_preserves_output() {
        let w = random(8, 6, 6);
        let (pair, res) = init_pissa(&w, 3).unwrap();
        let x = random(5, 8, 7);
        let resid = Network::new(
            vec![AdapterLinearLayer::new(res.w_res, Some(pair), 1.0, ForwardMode::Residual).unwrap()],
            Activation::Identity,
            LossKind::Mse,
        )
        .unwrap();
        let plain = Network::new(vec![AdapterLinearLayer::plain(w)], Activation::Identity, LossKind::Mse).unwrap();
        let yr = forward(&resid, &x).unwrap().0;
        let yp = forward(&plain, &x).unwrap().0;
        assert!(rel(&yr, &yp) <= 1e-10);
    }

    #[test]
    fn zero_data_gives_zero_gradients() {
        let w = random(4, 3, 8);
        let pair = random_pair(4, 3, 2, 9);
        let net = Network::new(
            vec![AdapterLinearLayer::new(w, Some(pair), 1e-8, ForwardMode::Muted).unwrap()],
            Activation::Tanh,
            LossKind::Mse,
        )
        .unwrap();
        let x = Matrix::zeros(5, 4);
        let (_, tape) = forward(&net, &x).unwrap();
        let (loss, grads) = backward(&net, &tape, &Matrix::zeros(5, 3)).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads[0].g_w.max_abs(), 0.0);
        assert_eq!(grads[0].g_a.as_ref().unwrap().max_abs(), 0.0);
        assert_eq!(grads[0].g_b.as_ref().unwrap().max_abs(), 0.0);
    }

    #[test]
    fn mse_of_perfect_prediction_is_zero() {
        let net = Network::new(vec![AdapterLinearLayer::plain(random(3, 2, 1))], Activation::Tanh, LossKind::Mse).unwrap();
        let x = random(4, 3, 2);
        let (y, _) = forward(&net, &x).unwrap();
        assert_eq!(loss_only(&net, &x, &y).unwrap(), 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let net = Network::new(
            vec![AdapterLinearLayer::plain(Matrix::zeros(3, 5))],
            Activation::Tanh,
            LossKind::SoftmaxCrossEntropy,
        )
        .unwrap();
        let x = random(4, 3, 3);
        let t = Matrix::from_fn(4, 5, |i, j| if j == i % 5 { 1.0 } else { 0.0 });
        let loss = loss_only(&net, &x, &t).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn loss_only_matches_backward() {
        let net = two_layer(ForwardMode::Residual, LossKind::Mse, 1.0, 10);
        let x = random(6, 8, 11);
        let t = random(6, 8, 12);
        let (_, tape) = forward(&net, &x).unwrap();
        let (l1, _) = backward(&net, &tape, &t).unwrap();
        assert_eq!(l1, loss_only(&net, &x, &t).unwrap());
    }

    #[test]
    fn backward_rejects_foreign_tape() {
        let net = two_layer(ForwardMode::Plain, LossKind::Mse, 1.0, 13);
        let other = Network::new(vec![AdapterLinearLayer::plain(random(8, 8, 1))], Activation::Tanh, LossKind::Mse).unwrap();
        let x = random(3, 8, 14);
        let (_, tape) = forward(&other, &x).unwrap();
        assert!(backward(&net, &tape, &random(3, 8, 15)).is_err());
    }

    fn two_layer(mode: ForwardMode, loss: LossKind, gamma: f64, seed: u64) -> Network {
        let layers = (0..2)
            .map(|k| {
                let w = random(8, 8, seed + 10 * k).scale(0.4);
                let adapter = (mode != ForwardMode::Plain).then(|| random_pair(8, 8, 2, seed + 10 * k + 1));
                AdapterLinearLayer::new(w, adapter, gamma, mode).unwrap()
            })
            .collect();
        Network::new(layers, Activation::Tanh, loss).unwrap()
    }

    fn perturbed(net: &Network, layer: usize, which: u8, i: usize, j: usize, h: f64) -> Network {
        let mut n = net.clone();
        let l = &mut n.layers[layer];
        let m = match which {
            0 => &mut l.w,
            1 => &mut l.adapter.as_mut().unwrap().a,
            _ => &mut l.adapter.as_mut().unwrap().b,
        };
        m.set(i, j, m.get(i, j) + h);
        n
    }

    /// Central finite differences of `loss_only` against `backward`.
    fn check_finite_differences(net: &Network, x: &Matrix, t: &Matrix) {
        let (_, tape) = forward(net, x).unwrap();
        let (_, grads) = backward(net, &tape, t).unwrap();
        let h = 1e-5;
        for (k, g) in grads.iter().enumerate() {
            let mut mats = vec![(0u8, &g.g_w)];
            if let Some(ga) = &g.g_a {
                mats.push((1, ga));
            }
            if let Some(gb) = &g.g_b {
                mats.push((2, gb));
            }
            for (which, gm) in mats {
                let scale = gm.max_abs();
                for i in 0..gm.rows() {
                    for j in 0..gm.cols() {
                        let lp = loss_only(&perturbed(net, k, which, i, j, h), x, t).unwrap();
                        let lm = loss_only(&perturbed(net, k, which, i, j, -h), x, t).unwrap();
                        let fd = (lp - lm) / (2.0 * h);
                        let an = gm.get(i, j);
                        assert!(
                            (fd - an).abs() <= 1e-5 * (fd.abs() + 1e-3 * scale),
                            "layer {k} factor {which} ({i},{j}): fd {fd} vs {an}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn finite_differences_all_modes_and_losses() {
        for (s, mode) in [ForwardMode::Plain, ForwardMode::Residual].into_iter().enumerate() {
            for loss in [LossKind::Mse, LossKind::SoftmaxCrossEntropy] {
                let net = two_layer(mode, loss, 1.0, 20 + s as u64);
                let x = random(6, 8, 30);
                let t = match loss {
                    LossKind::Mse => random(6, 8, 31),
                    LossKind::SoftmaxCrossEntropy => Matrix::from_fn(6, 8, |i, j| if j == (3 * i) % 8 { 1.0 } else { 0.0 }),
                };
                check_finite_differences(&net, &x, &t);
            }
        }
    }

    #[test]
    fn finite_differences_muted_with_visible_gamma() {
        // With gamma large enough to move the loss, raw muted gradients are
        // checkable directly: rescaled gradient times gamma equals the FD.
        let gamma = 0.5;
        let net = two_layer(ForwardMode::Muted, LossKind::Mse, gamma, 40);
        let x = random(6, 8, 41);
        let t = random(6, 8, 42);
        let (_, tape) = forward(&net, &x).unwrap();
        let (_, grads) = backward(&net, &tape, &t).unwrap();
        let h = 1e-5;
        for (k, g) in grads.iter().enumerate() {
            let ga = g.g_a.as_ref().unwrap();
            for i in 0..8 {
                for j in 0..2 {
                    let lp = loss_only(&perturbed(&net, k, 1, i, j, h), &x, &t).unwrap();
                    let lm = loss_only(&perturbed(&net, k, 1, i, j, -h), &x, &t).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    assert!((fd - gamma * ga.get(i, j)).abs() <= 1e-5 * (fd.abs() + 1e-3 * gamma * ga.max_abs()));
                }
            }
        }
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        assert_eq!(activation_slope(Activation::Relu, 0.0), 0.0);
        assert_eq!(activation_slope(Activation::Relu, 1e-300), 1.0);
    }

    #[test]
    fn muted_gradients_match_forward_equivalent_residual() {
        for (idx, gamma) in [1e-4, 1e-8, 1e-16].into_iter().enumerate() {
            let w = random(10, 7, 50 + idx as u64);
            let pair = random_pair(10, 7, 3, 60 + idx as u64);
            let x = random(9, 10, 70);
            let t = random(9, 7, 71);
            let muted = Network::new(
                vec![AdapterLinearLayer::new(w.clone(), Some(pair.clone()), gamma, ForwardMode::Muted).unwrap()],
                Activation::Identity,
                LossKind::Mse,
            )
            .unwrap();
            let w_res = w.add(&pair.product().scale(gamma)).unwrap().sub(&pair.product()).unwrap();
            let resid = Network::new(
                vec![AdapterLinearLayer::new(w_res, Some(pair), 1.0, ForwardMode::Residual).unwrap()],
                Activation::Identity,
                LossKind::Mse,
            )
            .unwrap();
            let gm = backward(&muted, &forward(&muted, &x).unwrap().1, &t).unwrap().1;
            let gr = backward(&resid, &forward(&resid, &x).unwrap().1, &t).unwrap().1;
            assert!(rel(gm[0].g_a.as_ref().unwrap(), gr[0].g_a.as_ref().unwrap()) <= 1e-6);
            assert!(rel(gm[0].g_b.as_ref().unwrap(), gr[0].g_b.as_ref().unwrap()) <= 1e-6);
        }
    }

    #[test]
    fn muted_output_is_device_independent() {
        let w = random(16, 16, 80);
        let pairs = init_hd_pissa(&w, 2, 4).unwrap();
        let x = random(8, 16, 81);
        let outputs: Vec<Matrix> = pairs
            .into_iter()
            .map(|p| {
                let net = Network::new(
                    vec![AdapterLinearLayer::new(w.clone(), Some(p), 1e-16, ForwardMode::Muted).unwrap()],
                    Activation::Identity,
                    LossKind::Mse,
                )
                .unwrap();
                forward(&net, &x).unwrap().0
            })
            .collect();
        for o in &outputs[1..] {
            assert!(o.sub(&outputs[0]).unwrap().max_abs() <= 1e-8);
        }
    }

    #[test]
    fn loss_is_row_permutation_invariant() {
        let net = two_layer(ForwardMode::Residual, LossKind::SoftmaxCrossEntropy, 1.0, 90);
        let x = random(5, 8, 91);
        let t = Matrix::from_fn(5, 8, |i, j| if j == i { 1.0 } else { 0.0 });
        let perm = [3, 0, 4, 1, 2];
        let xp = Matrix::from_fn(5, 8, |i, j| x.get(perm[i], j));
        let tp = Matrix::from_fn(5, 8, |i, j| t.get(perm[i], j));
        let a = loss_only(&net, &x, &t).unwrap();
        let b = loss_only(&net, &xp, &tp).unwrap();
        assert!((a - b).abs() <= 1e-14 * a.abs());
    }
}
