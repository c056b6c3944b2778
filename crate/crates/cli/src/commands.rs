//! The four subcommands. Each writes its artifacts into an output directory.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use hdpissa_core::rankanalysis::{compare_spectra, compute_delta, spectrum, write_spectrum_csv, RankSpectrum};
use hdpissa_core::tasks::SyntheticTask;
use hdpissa_core::{train, Method, Precision, TrainResult, Trainer, TrainerConfig};

use crate::archive::{Snapshot, TaskFingerprint};
use crate::config::RunConfig;
use crate::{CliError, CliResult};

pub const LOSS_CSV: &str = "loss.csv";
pub const SNAPSHOT: &str = "snapshot.hdps";
pub const CONFIG_ECHO: &str = "config.txt";
pub const SPECTRUM_CSV: &str = "spectrum.csv";
pub const COMPARE_CSV: &str = "compare.csv";
pub const ABLATE_CSV: &str = "ablate_gamma.csv";

/// Relative held-out loss change at or below which a run counts as flat.
pub const FLAT_TOLERANCE: f64 = 1e-6;
/// Bound on the muting-equivalence gradient error.
pub const MUTING_BOUND: f64 = 1e-6;

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn read_file(path: &Path) -> CliResult<Vec<u8>> {
    fs::read(path).map_err(|e| CliError::io(format!("reading {}", path.display()), e))
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = String::from_utf8(read_file(path)?)
        .map_err(|_| CliError::Config(format!("{} is not UTF-8", path.display())))?;
    RunConfig::parse(&text)
}

fn fingerprint(cfg: &RunConfig, task: &SyntheticTask) -> TaskFingerprint {
    TaskFingerprint {
        kind: task.kind as u8,
        input_dim: task.input_dim,
        hidden_dim: task.hidden_dim,
        output_dim: task.output_dim,
        target_rank: task.target_rank,
        noise_std: task.noise_std,
        seed: cfg.task_seed(),
    }
}

pub fn loss_csv(result: &TrainResult) -> String {
    let mut s = String::from("step,loss,lr\n");
    for (i, (loss, lr)) in result.loss_curve.iter().zip(&result.lr_curve).enumerate() {
        s.push_str(&format!("{},{:.16e},{:.16e}\n", i + 1, loss, lr));
    }
    s
}

/// Train once and write `loss.csv`, `snapshot.hdps` and `config.txt`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> CliResult<TrainResult> {
    let task = cfg.build_task()?;
    let result = train(&cfg.trainer, &task)?;
    create_dir(out)?;
    write_file(&out.join(LOSS_CSV), loss_csv(&result).as_bytes())?;
    let snapshot = Snapshot {
        task: fingerprint(cfg, &task),
        result,
    };
    let mut bytes = Vec::new();
    snapshot.write(&mut bytes).expect("writing to memory");
    write_file(&out.join(SNAPSHOT), &bytes)?;
    write_file(&out.join(CONFIG_ECHO), cfg.echo().as_bytes())?;
    Ok(snapshot.result)
}

pub fn load_snapshot(path: &Path) -> CliResult<Snapshot> {
    let path = if path.is_dir() { path.join(SNAPSHOT) } else { path.to_path_buf() };
    Snapshot::read(&read_file(&path)?)
}

fn layer_spectrum(snap: &Snapshot, method: Method, layer: usize, tau: f64) -> CliResult<RankSpectrum> {
    if layer >= snap.result.w_init.len() {
        return Err(CliError::Usage(format!(
            "layer {layer} out of range; snapshot has {} layers",
            snap.result.w_init.len()
        )));
    }
    let delta = compute_delta(&snap.result, method, layer)?;
    Ok(spectrum(&delta, tau, &format!("layer{layer}"))?)
}

/// Spectrum of one layer's update; `method` must match the archive if given.
pub fn cmd_spectrum(snapshot: &Path, method: Option<Method>, layer: usize, tau: f64, out: &Path) -> CliResult<RankSpectrum> {
    let snap = load_snapshot(snapshot)?;
    let method = method.unwrap_or(snap.result.method);
    let spec = layer_spectrum(&snap, method, layer, tau)?;
    let mut buf = Vec::new();
    write_spectrum_csv(&mut buf, &[(method, &spec)], true).expect("writing to memory");
    create_dir(out)?;
    write_file(&out.join(SPECTRUM_CSV), &buf)?;
    Ok(spec)
}

pub const COMPARE_HEADER: &str =
    "layer,method,index,sigma,sigma_over_sigma1,hd_over_method,beyond_method_bound,beyond_2kr,method_negligible";

/// Merge spectra of several archives from the same task and compare each
/// against the HD-PiSSA one.
pub fn cmd_compare(snapshots: &[PathBuf], layer: usize, tau: f64, out: &Path) -> CliResult<String> {
    let mut spectra = BTreeMap::new();
    let mut reference: Option<(TaskFingerprint, usize, usize)> = None;
    let mut shape = None;
    for path in snapshots {
        let snap = load_snapshot(path)?;
        let r = &snap.result;
        match &reference {
            None => reference = Some((snap.task.clone(), 0, 0)),
            Some((task, _, _)) if *task != snap.task => {
                return Err(CliError::Config(format!(
                    "{} was trained on a different task than {}",
                    path.display(),
                    snapshots[0].display()
                )))
            }
            _ => {}
        }
        if r.method == Method::HdPissa {
            shape = Some((r.rank, r.devices));
        }
        if spectra.contains_key(&r.method) {
            return Err(CliError::Usage(format!("two archives for method {}", r.method)));
        }
        spectra.insert(r.method, layer_spectrum(&snap, r.method, layer, tau)?);
    }
    let (rank, devices) =
        shape.ok_or_else(|| CliError::Usage("compare needs an HD-PiSSA snapshot".into()))?;
    let rows = compare_spectra(&spectra, rank, devices)?;
    let hd_bound = 2 * devices * rank;

    let mut s = format!("{COMPARE_HEADER}\n");
    let hd = &spectra[&Method::HdPissa];
    for (i, sigma) in hd.singular_values.iter().enumerate() {
        s.push_str(&format!(
            "{},{},{},{:.16e},{:.16e},{:.16e},{},{},{}\n",
            hd.layer_label,
            Method::HdPissa.name(),
            i + 1,
            sigma,
            hd.normalized(i),
            1.0,
            i + 1 > hd_bound,
            i + 1 > hd_bound,
            *sigma <= tau * hd.sigma1()
        ));
    }
    for row in rows {
        let spec = &spectra[&row.baseline];
        s.push_str(&format!(
            "{},{},{},{:.16e},{:.16e},{:.16e},{},{},{}\n",
            spec.layer_label,
            row.baseline.name(),
            row.index,
            row.baseline_sigma,
            spec.normalized(row.index - 1),
            row.ratio,
            row.beyond_baseline_bound,
            row.beyond_hd_bound,
            row.baseline_negligible
        ));
    }
    create_dir(out)?;
    write_file(&out.join(COMPARE_CSV), s.as_bytes())?;
    Ok(s)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub gamma: f64,
    pub precision: Precision,
    pub final_loss: f64,
    pub max_grad_error: f64,
    pub flat_curve: bool,
    pub loss_curve: Vec<f64>,
}

/// Train like `train`, additionally probing the muting-equivalence error on
/// every batch before it is consumed.
pub fn probed_run(config: &TrainerConfig, task: &SyntheticTask) -> CliResult<AblationRow> {
    if !config.method.is_direct_update() {
        return Err(CliError::Config(format!(
            "gamma has no effect for method {}; use a direct-update method",
            config.method
        )));
    }
    let mut trainer = Trainer::new(config.clone(), task)?;
    let (ex, et) = task.eval_batch(config.eval_batch)?;
    let initial = trainer.eval_loss(&ex, &et)?;
    let mut max_err = 0.0_f64;
    let mut curve = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let (x, t) = task.next_batch(step as u64, config.global_batch)?;
        max_err = max_err.max(trainer.muting_gradient_error(&x, &t)?);
        curve.push(trainer.train_step(&x, &t)?);
    }
    let final_loss = trainer.eval_loss(&ex, &et)?;
    let flat = (final_loss - initial).abs() <= FLAT_TOLERANCE * initial.abs();
    Ok(AblationRow {
        gamma: config.gamma,
        precision: config.precision,
        final_loss,
        max_grad_error: max_err,
        flat_curve: flat,
        loss_curve: curve,
    })
}

pub const ABLATE_HEADER: &str = "gamma,precision,final_loss,max_grad_error,flat_curve,exceeds_bound";

/// One probed run per gamma. Numerical failures become rows with NaN loss.
pub fn cmd_ablate_gamma(cfg: &RunConfig, gammas: &[f64], precision: Option<Precision>, out: &Path) -> CliResult<Vec<AblationRow>> {
    if gammas.is_empty() {
        return Err(CliError::Usage("--gammas needs at least one value".into()));
    }
    let task = cfg.build_task()?;
    let mut rows = Vec::new();
    let mut text = format!("{ABLATE_HEADER}\n");
    for &gamma in gammas {
        let trainer = TrainerConfig {
            gamma,
            precision: precision.unwrap_or(cfg.trainer.precision),
            ..cfg.trainer.clone()
        };
        trainer.validate(&task).map_err(|e| CliError::Config(e.to_string()))?;
        let row = match probed_run(&trainer, &task) {
            Err(CliError::Core(hdpissa_core::Error::Numerical { .. })) => AblationRow {
                gamma,
                precision: trainer.precision,
                final_loss: f64::NAN,
                max_grad_error: f64::NAN,
                flat_curve: false,
                loss_curve: Vec::new(),
            },
            other => other?,
        };
        text.push_str(&format!(
            "{:e},{},{:.16e},{:.16e},{},{}\n",
            row.gamma,
            row.precision.name(),
            row.final_loss,
            row.max_grad_error,
            row.flat_curve,
            row.max_grad_error.is_nan() || row.max_grad_error > MUTING_BOUND
        ));
        rows.push(row);
    }
    create_dir(out)?;
    let path = out.join(ABLATE_CSV);
    let mut f = fs::File::create(&path).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    f.write_all(text.as_bytes())
        .map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    Ok(rows)
}
