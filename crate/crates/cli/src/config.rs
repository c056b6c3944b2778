//! Flat `key = value` run configuration.

use std::path::PathBuf;

use hdpissa_core::tasks::{gen_linear_task, gen_mlp_task, SyntheticTask, TaskKind};
use hdpissa_core::{Method, Precision, ScheduleKind, TrainerConfig};

use crate::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub trainer: TrainerConfig,
    pub task: TaskKind,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub target_rank: usize,
    pub noise_std: f64,
    /// Defaults to the trainer seed.
    pub task_seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            trainer: TrainerConfig::default(),
            task: TaskKind::LinearTeacher,
            input_dim: 64,
            hidden_dim: 32,
            output_dim: 64,
            target_rank: 32,
            noise_std: 0.0,
            task_seed: None,
            out_dir: None,
        }
    }
}

pub const KEYS: &[&str] = &[
    "method",
    "devices",
    "rank",
    "gamma",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "schedule",
    "warmup_ratio",
    "steps",
    "global_batch",
    "eval_batch",
    "seed",
    "precision",
    "adapter_mask",
    "parallel",
    "task",
    "input_dim",
    "hidden_dim",
    "output_dim",
    "target_rank",
    "noise_std",
    "task_seed",
    "out_dir",
];

fn bad(key: &str, value: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("invalid value `{value}` for key `{key}`: {why}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> CliResult<T>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| bad(key, value, e))
}

fn boolean(key: &str, value: &str) -> CliResult<bool> {
    match value {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        _ => Err(bad(key, value, "expected true or false")),
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(CliError::Config(format!("duplicate key `{key}`")));
            }
            cfg.set(key, value)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> CliResult<()> {
        let t = &mut self.trainer;
        match key {
            "method" => t.method = value.parse::<Method>().map_err(|e| bad(key, value, e))?,
            "devices" => t.devices = num(key, value)?,
            "rank" => t.rank = num(key, value)?,
            "gamma" => t.gamma = num(key, value)?,
            "lr" => t.optimizer.lr = num(key, value)?,
            "beta1" => t.optimizer.beta1 = num(key, value)?,
            "beta2" => t.optimizer.beta2 = num(key, value)?,
            "eps" => t.optimizer.eps = num(key, value)?,
            "weight_decay" => t.optimizer.weight_decay = num(key, value)?,
            "schedule" => t.schedule = value.parse::<ScheduleKind>().map_err(|e| bad(key, value, e))?,
            "warmup_ratio" => t.warmup_ratio = num(key, value)?,
            "steps" => t.steps = num(key, value)?,
            "global_batch" => t.global_batch = num(key, value)?,
            "eval_batch" => t.eval_batch = num(key, value)?,
            "seed" => t.seed = num(key, value)?,
            "precision" => t.precision = value.parse::<Precision>().map_err(|e| bad(key, value, e))?,
            "adapter_mask" => {
                t.adapter_mask = if value.is_empty() || value == "all" {
                    None
                } else {
                    Some(
                        value
                            .split(',')
                            .map(|v| boolean(key, v.trim()))
                            .collect::<CliResult<_>>()?,
                    )
                }
            }
            "parallel" => t.parallel = boolean(key, value)?,
            "task" => self.task = value.parse::<TaskKind>().map_err(|e| bad(key, value, e))?,
            "input_dim" => self.input_dim = num(key, value)?,
            "hidden_dim" => self.hidden_dim = num(key, value)?,
            "output_dim" => self.output_dim = num(key, value)?,
            "target_rank" => self.target_rank = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "task_seed" => self.task_seed = Some(num(key, value)?),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn task_seed(&self) -> u64 {
        self.task_seed.unwrap_or(self.trainer.seed)
    }

    pub fn build_task(&self) -> CliResult<SyntheticTask> {
        let seed = self.task_seed();
        let task = match self.task {
            TaskKind::LinearTeacher => {
                gen_linear_task(self.input_dim, self.output_dim, self.target_rank, self.noise_std, seed)
            }
            TaskKind::MlpClassify => {
                if self.noise_std != 0.0 {
                    return Err(bad("noise_std", &self.noise_std.to_string(), "mlp_classify labels are noiseless"));
                }
                gen_mlp_task(self.input_dim, self.hidden_dim, self.output_dim, self.target_rank, seed)
            }
        };
        let task = task.map_err(|e| CliError::Config(e.to_string()))?;
        self.trainer
            .validate(&task)
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(task)
    }

    /// Every key with its resolved value; parsing the echo yields `self`.
    pub fn echo(&self) -> String {
        let t = &self.trainer;
        let o = &t.optimizer;
        let mask = t.adapter_mask.as_ref().map_or_else(
            || "all".to_string(),
            |m| m.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(","),
        );
        let mut out = String::new();
        let mut put = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        put("method", t.method.name().into());
        put("devices", t.devices.to_string());
        put("rank", t.rank.to_string());
        put("gamma", format!("{:e}", t.gamma));
        put("lr", format!("{:e}", o.lr));
        put("beta1", format!("{:e}", o.beta1));
        put("beta2", format!("{:e}", o.beta2));
        put("eps", format!("{:e}", o.eps));
        put("weight_decay", format!("{:e}", o.weight_decay));
        put("schedule", t.schedule.name().into());
        put("warmup_ratio", format!("{:e}", t.warmup_ratio));
        put("steps", t.steps.to_string());
        put("global_batch", t.global_batch.to_string());
        put("eval_batch", t.eval_batch.to_string());
        put("seed", t.seed.to_string());
        put("precision", t.precision.name().into());
        put("adapter_mask", mask);
        put("parallel", t.parallel.to_string());
        put("task", self.task.name().into());
        put("input_dim", self.input_dim.to_string());
        put("hidden_dim", self.hidden_dim.to_string());
        put("output_dim", self.output_dim.to_string());
        put("target_rank", self.target_rank.to_string());
        put("noise_std", format!("{:e}", self.noise_std));
        put("task_seed", self.task_seed().to_string());
        if let Some(dir) = &self.out_dir {
            put("out_dir", dir.display().to_string());
        }
        out
    }
}
