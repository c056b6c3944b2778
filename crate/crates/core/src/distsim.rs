//! Single-process simulation of K data-parallel devices.
//!
//! Per-device work (forward, backward, and for direct-weight-update methods
//! the local AdamW step) is a pure function of the shared state and the
//! device's shard, so it may run on a thread pool. Everything that mutates
//! shared state happens afterwards, in device-index order.

use rayon::prelude::*;

use crate::adapters::{
    hd_pissa_from_svd, init_lora, init_lora_for_device, pissa_from_svd, AdapterPair,
};
use crate::error::{invalid, Error, Result};
use crate::linalg::{svd, Matrix, Precision};
use crate::model::{
    backward, forward, loss_only, Activation, AdapterLinearLayer, ForwardMode, LayerGradients,
    LossKind, Network, DEFAULT_GAMMA,
};
use crate::optim::{
    aggregate_with, delta_update_with, AdamWConfig, AdamWState, DeltaUpdate, LrSchedule,
    ScheduleKind,
};
use crate::rng::SplitMix64;
use crate::tasks::SyntheticTask;

const TAG_LORA: u64 = 11;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Fft,
    LoraDp,
    PissaDp,
    HdPissa,
    LoraDwu,
    TopRankDwu,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Fft,
        Method::LoraDp,
        Method::PissaDp,
        Method::HdPissa,
        Method::LoraDwu,
        Method::TopRankDwu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Fft => "FFT",
            Method::LoraDp => "LoRA-DP",
            Method::PissaDp => "PiSSA-DP",
            Method::HdPissa => "HD-PiSSA",
            Method::LoraDwu => "LoRA-DWU",
            Method::TopRankDwu => "TopRank-DWU",
        }
    }

    pub fn code(self) -> u8 {
        Method::ALL.iter().position(|&m| m == self).unwrap() as u8
    }

    pub fn from_code(code: u8) -> Option<Method> {
        Method::ALL.get(code as usize).copied()
    }

    /// Methods that keep adapters fixed and apply aggregated deltas to `W`.
    pub fn is_direct_update(self) -> bool {
        matches!(self, Method::HdPissa | Method::LoraDwu | Method::TopRankDwu)
    }

    /// Methods that train replicated adapters against a frozen base.
    pub fn is_adapter_dp(self) -> bool {
        matches!(self, Method::LoraDp | Method::PissaDp)
    }

    /// Structural bound on the rank of the merged update, if any.
    pub fn update_rank_bound(self, rank: usize, devices: usize) -> Option<usize> {
        match self {
            Method::Fft => None,
            Method::LoraDp => Some(rank),
            Method::PissaDp => Some(2 * rank),
            Method::HdPissa | Method::LoraDwu | Method::TopRankDwu => Some(2 * devices * rank),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .iter()
            .copied()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .map_or_else(|| invalid(format!("unknown method `{s}`")), Ok)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainerConfig {
    pub devices: usize,
    pub rank: usize,
    pub method: Method,
    pub gamma: f64,
    pub optimizer: AdamWConfig,
    pub schedule: ScheduleKind,
    pub warmup_ratio: f64,
    pub steps: usize,
    pub global_batch: usize,
    pub seed: u64,
    pub precision: Precision,
    /// `None` adapts every layer.
    pub adapter_mask: Option<Vec<bool>>,
    /// Run per-device work on the rayon pool. Results are identical either way.
    pub parallel: bool,
    pub eval_batch: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            devices: 1,
            rank: 2,
            method: Method::HdPissa,
            gamma: DEFAULT_GAMMA,
            optimizer: AdamWConfig::default(),
            schedule: ScheduleKind::Constant,
            warmup_ratio: 0.0,
            steps: 100,
            global_batch: 32,
            seed: 0,
            precision: Precision::F64,
            adapter_mask: None,
            parallel: false,
            eval_batch: 256,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, task: &SyntheticTask) -> Result<()> {
        let layers = task.base_weights();
        if self.devices == 0 {
            return invalid("devices must be at least 1");
        }
        if self.global_batch == 0 || !self.global_batch.is_multiple_of(self.devices) {
            return invalid(format!(
                "global_batch {} is not divisible by {} devices",
                self.global_batch, self.devices
            ));
        }
        if self.method != Method::Fft {
            if self.rank == 0 {
                return invalid("rank must be at least 1");
            }
            if self.method.is_direct_update() && !(self.gamma > 0.0 && self.gamma.is_finite()) {
                return invalid(format!("gamma must be positive, got {}", self.gamma));
            }
            let per_layer = if matches!(self.method, Method::HdPissa) {
                self.devices * self.rank
            } else {
                self.rank
            };
            for (l, w) in layers.iter().enumerate() {
                if !self.is_adapted(l) {
                    continue;
                }
                let d = w.rows().min(w.cols());
                if per_layer > d {
                    return invalid(format!(
                        "layer {l}: {per_layer} adapter components exceed min dimension {d}"
                    ));
                }
            }
        }
        if let Some(mask) = &self.adapter_mask {
            if mask.len() != layers.len() {
                return invalid(format!(
                    "adapter_mask has {} entries for {} layers",
                    mask.len(),
                    layers.len()
                ));
            }
        }
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return invalid("warmup_ratio must be in [0, 1)");
        }
        let o = &self.optimizer;
        if !(o.lr >= 0.0 && (0.0..1.0).contains(&o.beta1) && (0.0..1.0).contains(&o.beta2) && o.eps > 0.0)
        {
            return invalid("invalid optimizer hyperparameters");
        }
        if self.eval_batch == 0 {
            return invalid("eval_batch must be at least 1");
        }
        Ok(())
    }

    pub fn is_adapted(&self, layer: usize) -> bool {
        self.adapter_mask
            .as_ref()
            .is_none_or(|m| m.get(layer).copied().unwrap_or(false))
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            kind: self.schedule,
            base_lr: self.optimizer.lr,
            warmup_ratio: self.warmup_ratio,
            total_steps: self.steps,
        }
    }
}

/// Adapters and optimizer moments owned by one device, indexed by layer.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceState {
    pub adapters: Vec<Option<AdapterPair>>,
    pub opt_a: Vec<Option<AdamWState>>,
    pub opt_b: Vec<Option<AdamWState>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub method: Method,
    pub rank: usize,
    pub devices: usize,
    pub loss_curve: Vec<f64>,
    pub lr_curve: Vec<f64>,
    /// Base weight per layer (`W_res` for PiSSA-DP).
    pub w_init: Vec<Matrix>,
    pub w_final: Vec<Matrix>,
    /// `[device][layer]`.
    pub adapter_init: Vec<Vec<Option<AdapterPair>>>,
    pub adapter_final: Vec<Vec<Option<AdapterPair>>>,
    pub wall_steps: usize,
    /// Held-out loss of the merged model before and after training.
    pub eval_initial: f64,
    pub eval_final: f64,
}

/// Split rows into `devices` contiguous, equally sized blocks.
pub fn shard_batch(x: &Matrix, t: &Matrix, devices: usize) -> Result<Vec<(Matrix, Matrix)>> {
    if devices == 0 || !x.rows().is_multiple_of(devices) || x.rows() != t.rows() {
        return invalid(format!(
            "cannot shard {} rows over {devices} devices",
            x.rows()
        ));
    }
    let per = x.rows() / devices;
    (0..devices)
        .map(|i| Ok((x.slice_rows(i * per, (i + 1) * per)?, t.slice_rows(i * per, (i + 1) * per)?)))
        .collect()
}

/// Optimizer state shared by all replicas (FFT weights, DP adapters).
#[derive(Debug, Clone)]
enum SharedState {
    None,
    Weight(AdamWState),
    Adapter(AdamWState, AdamWState),
}

struct DeviceOutput {
    loss: f64,
    grads: Vec<LayerGradients>,
    /// Direct-update methods only: per layer `(du, new opt_a, new opt_b)`.
    local: Vec<Option<(DeltaUpdate, AdamWState, AdamWState)>>,
}

pub struct Trainer {
    config: TrainerConfig,
    weights: Vec<Matrix>,
    activation: Activation,
    loss: LossKind,
    devices: Vec<DeviceState>,
    shared: Vec<SharedState>,
    step: usize,
}

impl Trainer {
    pub fn new(config: TrainerConfig, task: &SyntheticTask) -> Result<Self> {
        config.validate(task)?;
        let p = config.precision;
        let k = config.devices;
        let r = config.rank;
        let nlayers = task.base_weights().len();

        let mut weights = Vec::with_capacity(nlayers);
        let mut per_device: Vec<Vec<Option<AdapterPair>>> = vec![Vec::with_capacity(nlayers); k];
        let mut shared = Vec::with_capacity(nlayers);
        for (l, w) in task.base_weights().iter().enumerate() {
            let adapted = config.method != Method::Fft && config.is_adapted(l);
            let mut layer_w = w.clone();
            let mut pairs: Vec<Option<AdapterPair>> = vec![None; k];
            if adapted {
                let lora_seed = |dev: u64| SplitMix64::derived(config.seed, &[TAG_LORA, l as u64, dev]).next_u64();
                match config.method {
                    Method::Fft => unreachable!(),
                    Method::LoraDp => {
                        let pair = init_lora(w, r, lora_seed(0))?;
                        pairs = vec![Some(pair); k];
                    }
                    Method::PissaDp => {
                        let (pair, res) = pissa_from_svd(w, &svd(w)?, r)?;
                        layer_w = res.w_res;
                        pairs = vec![Some(pair); k];
                    }
                    Method::HdPissa => {
                        let parts = hd_pissa_from_svd(w, &svd(w)?, r, k)?;
                        pairs = parts.into_iter().map(Some).collect();
                    }
                    Method::LoraDwu => {
                        pairs = (0..k)
                            .map(|i| init_lora_for_device(w, r, lora_seed(i as u64), i).map(Some))
                            .collect::<Result<_>>()?;
                    }
                    Method::TopRankDwu => {
                        let (pair, _) = pissa_from_svd(w, &svd(w)?, r)?;
                        pairs = (0..k)
                            .map(|i| Some(AdapterPair { device_index: i, ..pair.clone() }))
                            .collect();
                    }
                }
            }
            for pair in pairs.iter_mut().flatten() {
                pair.a = p.round_matrix(&pair.a);
                pair.b = p.round_matrix(&pair.b);
            }
            let opt = config.optimizer;
            shared.push(match config.method {
                Method::Fft => SharedState::Weight(AdamWState::new(w.rows(), w.cols(), opt)),
                m if m.is_adapter_dp() && adapted => SharedState::Adapter(
                    AdamWState::new(w.rows(), r, opt),
                    AdamWState::new(r, w.cols(), opt),
                ),
                _ => SharedState::None,
            });
            for (dev, pair) in pairs.into_iter().enumerate() {
                per_device[dev].push(pair);
            }
            weights.push(p.round_matrix(&layer_w));
        }

        let devices = per_device
            .into_iter()
            .map(|adapters| {
                let local = |f: fn(&AdapterPair) -> (usize, usize)| -> Vec<Option<AdamWState>> {
                    adapters
                        .iter()
                        .map(|a| {
                            a.as_ref().filter(|_| config.method.is_direct_update()).map(|a| {
                                let (rows, cols) = f(a);
                                AdamWState::new(rows, cols, config.optimizer)
                            })
                        })
                        .collect()
                };
                let opt_a = local(|a| a.a.shape());
                let opt_b = local(|a| a.b.shape());
                DeviceState {
                    adapters,
                    opt_a,
                    opt_b,
                }
            })
            .collect();

        Ok(Self {
            config,
            weights,
            activation: task.activation(),
            loss: task.loss_kind(),
            devices,
            shared,
            step: 0,
        })
    }

    pub fn config(&self) -> &TrainerConfig {
        &self.config
    }

    /// Shared base weights (`W`, or `W_res` for PiSSA-DP).
    pub fn weights(&self) -> &[Matrix] {
        &self.weights
    }

    pub fn devices(&self) -> &[DeviceState] {
        &self.devices
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// The network device `dev` runs its forward/backward on.
    pub fn device_network(&self, dev: usize) -> Result<Network> {
        let mode = match self.config.method {
            Method::Fft => ForwardMode::Plain,
            m if m.is_adapter_dp() => ForwardMode::Residual,
            _ => ForwardMode::Muted,
        };
        let layers = self
            .weights
            .iter()
            .zip(&self.devices[dev].adapters)
            .map(|(w, adapter)| match adapter {
                Some(pair) => AdapterLinearLayer::new(w.clone(), Some(pair.clone()), self.config.gamma, mode),
                None => Ok(AdapterLinearLayer::plain(w.clone())),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network::new(layers, self.activation, self.loss)?.with_precision(self.config.precision))
    }

    /// Merged weights the trained model applies (`W_res + A B` for DP adapters).
    pub fn merged_weights(&self) -> Vec<Matrix> {
        self.weights
            .iter()
            .zip(&self.devices[0].adapters)
            .map(|(w, adapter)| match adapter {
                Some(pair) if self.config.method.is_adapter_dp() => {
                    w.add(&pair.product()).expect("validated adapter shape")
                }
                _ => w.clone(),
            })
            .collect()
    }

    pub fn merged_network(&self) -> Result<Network> {
        let layers = self
            .merged_weights()
            .into_iter()
            .map(AdapterLinearLayer::plain)
            .collect();
        Ok(Network::new(layers, self.activation, self.loss)?.with_precision(self.config.precision))
    }

    pub fn eval_loss(&self, x: &Matrix, t: &Matrix) -> Result<f64> {
        loss_only(&self.merged_network()?, x, t)
    }

    fn device_work(&self, dev: usize, x: &Matrix, t: &Matrix, lr: f64) -> Result<DeviceOutput> {
        let p = self.config.precision;
        let net = self.device_network(dev)?;
        let (_, tape) = forward(&net, x)?;
        let (loss, grads) = backward(&net, &tape, t)?;
        let mut local = Vec::new();
        if self.config.method.is_direct_update() {
            let state = &self.devices[dev];
            for (l, g) in grads.iter().enumerate() {
                let entry = match (&state.adapters[l], &g.g_a, &g.g_b) {
                    (Some(pair), Some(ga), Some(gb)) => {
                        let opt_a = state.opt_a[l].as_ref().expect("direct-update device state");
                        let opt_b = state.opt_b[l].as_ref().expect("direct-update device state");
                        let (da, next_a) = opt_a.delta(ga, &pair.a, lr, p)?;
                        let (db, next_b) = opt_b.delta(gb, &pair.b, lr, p)?;
                        let du = delta_update_with(pair, &da, &db, p)?;
                        Some((du, next_a, next_b))
                    }
                    _ => None,
                };
                local.push(entry);
            }
        }
        Ok(DeviceOutput { loss, grads, local })
    }

    fn check_finite(&self, outputs: &[DeviceOutput]) -> Result<()> {
        for (dev, out) in outputs.iter().enumerate() {
            let bad_grad = out.grads.iter().any(|g| {
                !g.g_w.is_finite()
                    || g.g_a.as_ref().is_some_and(|m| !m.is_finite())
                    || g.g_b.as_ref().is_some_and(|m| !m.is_finite())
            });
            let bad_local = out.local.iter().flatten().any(|(du, _, _)| !du.du.is_finite());
            if !out.loss.is_finite() || bad_grad || bad_local {
                return Err(Error::Numerical {
                    step: self.step,
                    detail: format!("device {dev} produced non-finite loss or gradients (loss = {})", out.loss),
                });
            }
        }
        Ok(())
    }

    /// Device-order mean of one gradient matrix across devices.
    fn mean_over_devices<'a>(&self, mats: impl Iterator<Item = &'a Matrix>) -> Result<Matrix> {
        let p = self.config.precision;
        let mut it = mats;
        let mut sum = it.next().expect("at least one device").clone();
        for m in it {
            sum = sum.add_with(m, p)?;
        }
        let k = self.config.devices as f64;
        Ok(sum.map(|x| p.round(x / k)))
    }

    /// One synchronized step on a global batch; returns the mean shard loss.
    pub fn train_step(&mut self, x: &Matrix, t: &Matrix) -> Result<f64> {
        let p = self.config.precision;
        let lr = self.config.lr_schedule().lr_at(self.step);
        let shards = shard_batch(&p.round_matrix(x), &p.round_matrix(t), self.config.devices)?;

        let outputs: Vec<DeviceOutput> = if self.config.parallel {
            shards
                .par_iter()
                .enumerate()
                .map(|(dev, (xs, ts))| self.device_work(dev, xs, ts, lr))
                .collect::<Result<_>>()?
        } else {
            shards
                .iter()
                .enumerate()
                .map(|(dev, (xs, ts))| self.device_work(dev, xs, ts, lr))
                .collect::<Result<_>>()?
        };
        self.check_finite(&outputs)?;

        // Barrier: all shared mutation below runs in device order.
        for l in 0..self.weights.len() {
            match self.config.method {
                Method::Fft => {
                    let g = self.mean_over_devices(outputs.iter().map(|o| &o.grads[l].g_w))?;
                    let SharedState::Weight(st) = &self.shared[l] else {
                        unreachable!("FFT keeps a weight optimizer per layer")
                    };
                    let (delta, next) = st.delta(&g, &self.weights[l], lr, p)?;
                    self.weights[l] = self.weights[l].add_with(&delta, p)?;
                    self.shared[l] = SharedState::Weight(next);
                }
                Method::LoraDp | Method::PissaDp => {
                    let SharedState::Adapter(st_a, st_b) = &self.shared[l] else {
                        continue;
                    };
                    let ga = self.mean_over_devices(outputs.iter().map(|o| o.grads[l].g_a.as_ref().unwrap()))?;
                    let gb = self.mean_over_devices(outputs.iter().map(|o| o.grads[l].g_b.as_ref().unwrap()))?;
                    let pair = self.devices[0].adapters[l].as_ref().expect("adapted layer");
                    let (da, next_a) = st_a.delta(&ga, &pair.a, lr, p)?;
                    let (db, next_b) = st_b.delta(&gb, &pair.b, lr, p)?;
                    let a = pair.a.add_with(&da, p)?;
                    let b = pair.b.add_with(&db, p)?;
                    for dev in &mut self.devices {
                        let replica = dev.adapters[l].as_mut().expect("replicated adapter");
                        replica.a = a.clone();
                        replica.b = b.clone();
                    }
                    self.shared[l] = SharedState::Adapter(next_a, next_b);
                }
                Method::HdPissa | Method::LoraDwu | Method::TopRankDwu => {
                    if outputs[0].local[l].is_none() {
                        continue;
                    }
                    let deltas: Vec<DeltaUpdate> = outputs
                        .iter()
                        .map(|o| o.local[l].as_ref().expect("every device adapts the layer").0.clone())
                        .collect();
                    let du = aggregate_with(&deltas, p)?;
                    self.weights[l] = self.weights[l].add_with(&du, p)?;
                }
            }
        }
        if self.config.method.is_direct_update() {
            for (dev, out) in self.devices.iter_mut().zip(outputs.iter()) {
                for (l, entry) in out.local.iter().enumerate() {
                    if let Some((_, next_a, next_b)) = entry {
                        dev.opt_a[l] = Some(next_a.clone());
                        dev.opt_b[l] = Some(next_b.clone());
                    }
                }
            }
        }

        let loss = outputs.iter().fold(0.0, |acc, o| p.round(acc + o.loss));
        self.step += 1;
        Ok(p.round(loss / self.config.devices as f64))
    }

    /// Largest relative Frobenius gap between the rescaled muted adapter
    /// gradients and those of the unmuted residual form `W - A_i B_i`,
    /// over devices, layers and both factors. Zero for other methods.
    pub fn muting_gradient_error(&self, x: &Matrix, t: &Matrix) -> Result<f64> {
        if !self.config.method.is_direct_update() {
            return Ok(0.0);
        }
        let p = self.config.precision;
        let shards = shard_batch(&p.round_matrix(x), &p.round_matrix(t), self.config.devices)?;
        let mut worst = 0.0_f64;
        for (dev, (xs, ts)) in shards.iter().enumerate() {
            let muted = self.device_network(dev)?;
            let mut reference = muted.clone();
            for layer in &mut reference.layers {
                if let Some(pair) = &layer.adapter {
                    layer.w = layer.w.sub(&pair.product())?;
                    layer.mode = ForwardMode::Residual;
                }
            }
            let (_, tm) = forward(&muted, xs)?;
            let (_, gm) = backward(&muted, &tm, ts)?;
            let (_, tr) = forward(&reference, xs)?;
            let (_, gr) = backward(&reference, &tr, ts)?;
            for (a, b) in gm.iter().zip(&gr) {
                for (x, y) in [(&a.g_a, &b.g_a), (&a.g_b, &b.g_b)] {
                    if let (Some(x), Some(y)) = (x, y) {
                        let denom = y.frobenius_norm();
                        let gap = x.sub(y)?.frobenius_norm();
                        let rel = if denom > 0.0 { gap / denom } else { gap };
                        worst = worst.max(rel);
                    }
                }
            }
        }
        Ok(worst)
    }

    fn adapter_snapshot(&self) -> Vec<Vec<Option<AdapterPair>>> {
        self.devices.iter().map(|d| d.adapters.clone()).collect()
    }
}

/// Run `config.steps` synchronized steps on the task's batch stream.
pub fn train(config: &TrainerConfig, task: &SyntheticTask) -> Result<TrainResult> {
    let mut trainer = Trainer::new(config.clone(), task)?;
    let (ex, et) = task.eval_batch(config.eval_batch)?;
    let w_init = trainer.weights.clone();
    let adapter_init = trainer.adapter_snapshot();
    let eval_initial = trainer.eval_loss(&ex, &et)?;
    let schedule = config.lr_schedule();

    let mut loss_curve = Vec::with_capacity(config.steps);
    let mut lr_curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (x, t) = task.next_batch(step as u64, config.global_batch)?;
        lr_curve.push(schedule.lr_at(step));
        loss_curve.push(trainer.train_step(&x, &t)?);
    }
    let eval_final = trainer.eval_loss(&ex, &et)?;
    Ok(TrainResult {
        method: config.method,
        rank: config.rank,
        devices: config.devices,
        loss_curve,
        lr_curve,
        w_init,
        w_final: trainer.weights.clone(),
        adapter_init,
        adapter_final: trainer.adapter_snapshot(),
        wall_steps: trainer.step,
        eval_initial,
        eval_final,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{gen_linear_task, gen_mlp_task};

    fn small_task() -> SyntheticTask {
        gen_linear_task(12, 10, 4, 0.0, 3).unwrap()
    }

    fn config(method: Method, devices: usize) -> TrainerConfig {
        TrainerConfig {
            devices,
            rank: 2,
            method,
            steps: 5,
            global_batch: 8,
            seed: 1,
            optimizer: AdamWConfig {
                lr: 1e-2,
                ..AdamWConfig::default()
            },
            ..TrainerConfig::default()
        }
    }

    #[test]
    fn shard_examples() {
        let x = Matrix::from_fn(8, 2, |i, j| (i * 2 + j) as f64);
        let t = Matrix::from_fn(8, 1, |i, _| i as f64);
        let one = shard_batch(&x, &t, 1).unwrap();
        assert_eq!(one[0].0, x);
        let four = shard_batch(&x, &t, 4).unwrap();
        for (i, (xs, ts)) in four.iter().enumerate() {
            assert_eq!(ts.column(0), vec![(2 * i) as f64, (2 * i + 1) as f64]);
            assert_eq!(xs.rows(), 2);
        }
        let xs: Vec<Matrix> = four.iter().map(|s| s.0.clone()).collect();
        assert_eq!(Matrix::vstack(&xs).unwrap(), x);
        assert!(shard_batch(&x, &t, 3).is_err());
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(Method::from_code(m.code()), Some(m));
        }
        assert!("DoRA".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        let task = small_task();
        let mut c = config(Method::HdPissa, 3);
        assert!(c.validate(&task).is_err(), "8 rows over 3 devices");
        c.devices = 4;
        c.rank = 3;
        assert!(c.validate(&task).is_err(), "4 x 3 > 10");
        c.rank = 2;
        assert!(c.validate(&task).is_ok());
        c.adapter_mask = Some(vec![true, false]);
        assert!(c.validate(&task).is_err());
    }

    #[test]
    fn zero_steps_leave_weights() {
        let task = small_task();
        for m in Method::ALL {
            let mut c = config(m, 2);
            c.steps = 0;
            let r = train(&c, &task).unwrap();
            assert_eq!(r.w_init, r.w_final);
            assert_eq!(r.adapter_init, r.adapter_final);
            assert!(r.loss_curve.is_empty());
        }
    }

    #[test]
    fn zero_gradient_batch_changes_nothing() {
        let task = small_task();
        for m in Method::ALL {
            let mut trainer = Trainer::new(config(m, 2), &task).unwrap();
            let before = (trainer.weights().to_vec(), trainer.devices().to_vec());
            let x = Matrix::zeros(8, 12);
            let t = Matrix::zeros(8, 10);
            let loss = trainer.train_step(&x, &t).unwrap();
            assert_eq!(loss, 0.0);
            assert_eq!(trainer.weights(), &before.0[..], "{m}");
            for (d, b) in trainer.devices().iter().zip(&before.1) {
                assert_eq!(d.adapters, b.adapters, "{m}");
            }
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical_and_parallel_agrees() {
        let task = small_task();
        for m in Method::ALL {
            let c = config(m, 2);
            let a = train(&c, &task).unwrap();
            let b = train(&c, &task).unwrap();
            assert_eq!(a, b);
            let par = train(&TrainerConfig { parallel: true, ..c }, &task).unwrap();
            assert_eq!(a, par, "{m}");
        }
    }

    #[test]
    fn dp_methods_never_touch_base_and_dwu_never_touch_adapters() {
        let task = small_task();
        for m in Method::ALL {
            let r = train(&config(m, 2), &task).unwrap();
            if m.is_adapter_dp() {
                assert_eq!(r.w_init, r.w_final, "{m}");
                assert_ne!(r.adapter_init, r.adapter_final, "{m}");
            }
            if m.is_direct_update() {
                assert_eq!(r.adapter_init, r.adapter_final, "{m}");
                assert_ne!(r.w_init, r.w_final, "{m}");
            }
        }
    }

    #[test]
    fn hd_pissa_devices_carry_disjoint_components() {
        let task = small_task();
        let trainer = Trainer::new(config(Method::HdPissa, 4), &task).unwrap();
        for (i, d) in trainer.devices().iter().enumerate() {
            let p = d.adapters[0].as_ref().unwrap();
            assert_eq!((p.component_lo, p.component_hi), (2 * i, 2 * i + 2));
            assert_eq!(p.device_index, i);
        }
    }

    #[test]
    fn fft_descends_on_teacher_student() {
        let task = gen_linear_task(8, 6, 3, 0.0, 5).unwrap();
        let c = TrainerConfig {
            method: Method::Fft,
            devices: 2,
            steps: 50,
            global_batch: 64,
            optimizer: AdamWConfig {
                lr: 1e-3,
                ..AdamWConfig::default()
            },
            ..TrainerConfig::default()
        };
        // Evaluate on a fixed batch so sampling noise does not mask descent.
        let (ex, et) = task.eval_batch(512).unwrap();
        let mut trainer = Trainer::new(c.clone(), &task).unwrap();
        let mut prev = trainer.eval_loss(&ex, &et).unwrap();
        for step in 0..c.steps {
            let (x, t) = task.next_batch(step as u64, c.global_batch).unwrap();
            trainer.train_step(&x, &t).unwrap();
            let now = trainer.eval_loss(&ex, &et).unwrap();
            assert!(now <= prev * (1.0 + 1e-12), "step {step}: {now} > {prev}");
            prev = now;
        }
    }

    #[test]
    fn device_count_only_changes_the_partition() {
        let task = small_task();
        let (x, t) = task.next_batch(3, 16).unwrap();
        for k in [2, 4, 8] {
            let shards = shard_batch(&x, &t, k).unwrap();
            let xs: Vec<Matrix> = shards.iter().map(|s| s.0.clone()).collect();
            assert_eq!(Matrix::vstack(&xs).unwrap(), x);
            if k > 1 {
                assert_ne!(shards[0].0, shards[1].0);
            }
        }
    }

    #[test]
    fn mlp_task_trains_with_cross_entropy() {
        let task = gen_mlp_task(6, 8, 4, 2, 2).unwrap();
        let mut c = config(Method::HdPissa, 2);
        c.rank = 1;
        c.steps = 20;
        let r = train(&c, &task).unwrap();
        assert!(r.loss_curve.iter().all(|l| l.is_finite()));
        assert_eq!(r.w_init.len(), 2);
    }

    #[test]
    fn adapter_mask_freezes_unadapted_layers() {
        let task = gen_mlp_task(6, 8, 4, 2, 2).unwrap();
        let mut c = config(Method::HdPissa, 2);
        c.rank = 1;
        c.adapter_mask = Some(vec![false, true]);
        let r = train(&c, &task).unwrap();
        assert_eq!(r.w_init[0], r.w_final[0]);
        assert_ne!(r.w_init[1], r.w_final[1]);
        assert!(r.adapter_init[0][0].is_none());
    }

    #[test]
    fn muting_error_scales_with_gamma() {
        let task = small_task();
        let (x, t) = task.next_batch(0, 8).unwrap();
        let mut errs = Vec::new();
        for gamma in [1e-2, 1e-8, 1e-16] {
            let c = TrainerConfig {
                gamma,
                ..config(Method::HdPissa, 2)
            };
            errs.push(Trainer::new(c, &task).unwrap().muting_gradient_error(&x, &t).unwrap());
        }
        assert!(errs[0] > 1e-6);
        assert!(errs[1] < 1e-6);
        assert!(errs[2] < 1e-12);
    }
}
