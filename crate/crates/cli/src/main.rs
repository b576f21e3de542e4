//! `dcglr`: dataset generation, pretraining, evaluation and diagnostics.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::Command;
use serde_json::json;

use dcglr_core::backbone::{BackboneConfig, ModelParams};
use dcglr_core::data::{
    ingest_off_dir, parse_off, sample_mesh, synth_dataset, Dataset, Shape, Split, SynthConfig,
};
use dcglr_core::distill::{self, PretrainOptions, StepMetrics, TrainConfig, TrainState};
use dcglr_core::eval::{self, ProbeConfig};
use dcglr_core::geometry::{normalize, CropConfig};
use dcglr_core::rng::{self, purpose};

use config::{add_flags, Cmd, Settings};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] dcglr_core::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        use dcglr_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Usage(_) | E::Parameter(_) | E::Dimension(_) => 2,
                E::Numeric(_) => 4,
                E::DegenerateCrop { .. }
                | E::DegenerateInput(_)
                | E::Parse { .. }
                | E::Format(_)
                | E::Io(_) => 3,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn cli() -> Command {
    Command::new("dcglr")
        .about("Self-supervised point-cloud pretraining by teacher-student distillation")
        .version(env!("CARGO_PKG_VERSION"))
        .subcommand_required(true)
        .arg_required_else_help(true)
        .subcommand(add_flags(
            Command::new("gen").about("Generate a synthetic dataset or ingest OFF meshes"),
            Cmd::Gen,
        ))
        .subcommand(add_flags(
            Command::new("pretrain").about("Pretrain a backbone by self-distillation"),
            Cmd::Pretrain,
        ))
        .subcommand(add_flags(
            Command::new("eval").about("Linear probe on frozen teacher features"),
            Cmd::Eval,
        ))
        .subcommand(add_flags(
            Command::new("diagnose").about("Feature covariance spectrum and PCA projection"),
            Cmd::Diagnose,
        ))
        .subcommand(add_flags(
            Command::new("attn").about("Export class-token attention maps as PLY"),
            Cmd::Attn,
        ))
}

fn main() -> ExitCode {
    let matches = match cli().try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let (name, sub) = matches.subcommand().expect("subcommand required");
    let cmd = match name {
        "gen" => Cmd::Gen,
        "pretrain" => Cmd::Pretrain,
        "eval" => Cmd::Eval,
        "diagnose" => Cmd::Diagnose,
        _ => Cmd::Attn,
    };
    let run = || -> Result<()> {
        let s = Settings::resolve(cmd, sub)?;
        match cmd {
            Cmd::Gen => cmd_gen(&s),
            Cmd::Pretrain => cmd_pretrain(&s),
            Cmd::Eval => cmd_eval(&s),
            Cmd::Diagnose => cmd_diagnose(&s),
            Cmd::Attn => cmd_attn(&s),
        }
    };
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn out_dir(s: &Settings) -> Result<PathBuf> {
    let dir = PathBuf::from(s.get::<String>("out")?);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("json values serialize");
    fs::write(path, text + "\n")?;
    Ok(())
}

fn cmd_gen(s: &Settings) -> Result<()> {
    let seed = s.get("seed")?;
    let points: usize = s.get("points")?;
    let data = match s.existing_path("off_dir")? {
        Some(dir) => ingest_off_dir(&dir, points, seed)?,
        None => {
            let classes = s.get::<String>("classes")?;
            synth_dataset(&SynthConfig {
                classes: Shape::parse_list(&classes)?,
                per_class: s.get("per_class")?,
                n_points: points,
                noise_sigma: s.get("noise")?,
                test_fraction: s.get("test_fraction")?,
                seed,
            })?
        }
    };
    let dir = out_dir(s)?;
    let manifest = data.save(
        &dir,
        &s.get::<String>("name")?,
        json!({"seed": seed, "config": s.to_json()}),
    )?;
    println!(
        "wrote {} clouds in {} classes to {}",
        data.len(),
        data.class_names.len(),
        manifest.display()
    );
    Ok(())
}

fn backbone_config(s: &Settings) -> Result<BackboneConfig> {
    let cfg = BackboneConfig {
        k_patch: s.get("k_patch")?,
        dim: s.get("dim")?,
        depth: s.get("depth")?,
        heads: s.get("heads")?,
        mlp_hidden: s.get("mlp_hidden")?,
        patch_hidden: s.get("patch_hidden")?,
        projector_hidden: s.get("projector_hidden")?,
        out_dim: s.get("out_dim")?,
        centroid_channels: s.flag("centroid_channels")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(s: &Settings) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        crops: CropConfig {
            globals: s.get("globals")?,
            locals: s.get("locals")?,
            resolutions: s.get("resolutions")?,
            global_ratio: (s.get("global_ratio_min")?, s.get("global_ratio_max")?),
            local_ratio: (s.get("local_ratio_min")?, s.get("local_ratio_max")?),
            min_points: s.get("min_points")?,
            global_size: s.opt("global_size")?,
            local_size: s.opt("local_size")?,
        },
        teacher_temp: s.get("teacher_temp")?,
        student_temp: s.get("student_temp")?,
        center_rate: s.get("center_rate")?,
        centering: s.flag("centering")?,
        momentum_start: s.get("momentum_start")?,
        global_weight: s.get("global_weight")?,
        local_weight: s.get("local_weight")?,
        epochs: s.get("epochs")?,
        batch_size: s.get("batch_size")?,
        base_lr: s.get("base_lr")?,
        warmup_epochs: s.get("warmup_epochs")?,
        weight_decay: s.get("weight_decay")?,
        seed: s.get("seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(s: &Settings) -> Result<Dataset> {
    let path = s
        .existing_path("data")?
        .ok_or_else(|| CliError::Config("--data is required".into()))?;
    Ok(Dataset::load(&path)?)
}

fn progress(m: &StepMetrics) {
    eprintln!(
        "step {:>6} epoch {:>4} loss {:.5} (g {:.5} l {:.5}) lr {:.3e} lambda {:.5} |c| {:.4} {:.0} ms",
        m.step, m.epoch, m.loss, m.loss_g, m.loss_l, m.lr, m.lambda, m.center_norm, m.wall_ms
    );
}

fn cmd_pretrain(s: &Settings) -> Result<()> {
    let data = load_data(s)?;
    let clouds = data.subset(Split::Train);
    let dir = out_dir(s)?;
    let (config, state) = match s.existing_path("resume")? {
        Some(ckpt) => {
            // The stored schedule is continued unchanged.
            let (state, stored) = TrainState::load(&ckpt)?;
            (stored, state)
        }
        None => {
            let config = train_config(s)?;
            let backbone = backbone_config(s)?;
            (config.clone(), TrainState::init(&backbone, config.seed)?)
        }
    };
    fs::write(dir.join("config.ini"), s.to_config_text())?;
    write_json(
        &dir.join("run.json"),
        &json!({"seed": config.seed, "config": s.to_json(), "train": config}),
    )?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        ctrlc::set_handler(move || {
            if stop.swap(true, Ordering::SeqCst) {
                std::process::exit(130);
            }
            eprintln!("interrupt: finishing the current step and writing a checkpoint");
        })
        .map_err(|e| CliError::Config(format!("cannot install interrupt handler: {e}")))?;
    }
    let opts = PretrainOptions {
        out_dir: Some(dir.clone()),
        checkpoint_every: s.get("checkpoint_every")?,
        record_wall_time: true,
        stop: Some(stop),
        stop_at_step: None,
        on_step: Some(progress),
    };
    let out = distill::resume(&clouds, &config, state, &opts)?;
    println!(
        "{} after {} steps ({} skipped samples); checkpoints: {}",
        if out.interrupted {
            "interrupted"
        } else {
            "finished"
        },
        out.state.step,
        out.state.skipped,
        out.checkpoints
            .iter()
            .map(|p| p.display().to_string())
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

fn model(s: &Settings) -> Result<ModelParams> {
    if s.flag("random_init")? {
        return Ok(ModelParams::init(&backbone_config(s)?, s.get("seed")?)?);
    }
    let path = s.existing_path("checkpoint")?.ok_or_else(|| {
        CliError::Config("--checkpoint is required (or --random-init true)".into())
    })?;
    Ok(distill::load_teacher(&path)?)
}

/// Settings as JSON, with the backbone section taken from the model actually
/// used (a checkpoint carries its own architecture).
fn run_json(s: &Settings, params: &ModelParams) -> serde_json::Value {
    let mut v = s.to_json();
    if let serde_json::Value::Object(o) = &mut v {
        o.insert("backbone".into(), json!(params.config()));
    }
    v
}

fn cmd_eval(s: &Settings) -> Result<()> {
    let data = load_data(s)?;
    let params = model(s)?;
    let seed = s.get("seed")?;
    let features = eval::extract_features(&data.clouds, &params, seed)?;
    let labels = data.labels()?;
    let report = eval::linear_probe(
        &features.rows,
        &labels,
        &data.split,
        &ProbeConfig {
            reg: s.get("probe_reg")?,
            epochs: s.get("probe_epochs")?,
            lr: s.get("probe_lr")?,
            seed,
        },
    )?;
    let dir = out_dir(s)?;
    let path = dir.join("probe.json");
    write_json(
        &path,
        &json!({"seed": seed, "config": run_json(s, &params), "probe": report}),
    )?;
    println!(
        "test accuracy {:.4} (train {:.4}) -> {}",
        report.test_accuracy,
        report.train_accuracy,
        path.display()
    );
    Ok(())
}

fn cmd_diagnose(s: &Settings) -> Result<()> {
    let data = load_data(s)?;
    let params = model(s)?;
    let seed: u64 = s.get("seed")?;
    let features = eval::extract_features(&data.clouds, &params, seed)?;
    let report = eval::spectrum(&features.rows, s.get("threshold")?)?;
    let coords = eval::pca_project(&features.rows, s.get("pca_dims")?)?;
    let dir = out_dir(s)?;
    let header = format!(
        "# seed={seed} config={}\n",
        serde_json::to_string(&run_json(s, &params)).expect("json values serialize")
    );
    let mut csv = header.clone().into_bytes();
    eval::write_spectrum_csv(&mut csv, &report)?;
    fs::write(dir.join("spectrum.csv"), csv)?;
    let mut csv = header.into_bytes();
    eval::write_projection_csv(&mut csv, &coords, &features.labels)?;
    fs::write(dir.join("pca.csv"), csv)?;
    write_json(
        &dir.join("spectrum.json"),
        &json!({"seed": seed, "config": run_json(s, &params), "spectrum": report}),
    )?;
    println!(
        "effective rank {} of {}{} -> {}",
        report.effective_rank,
        report.eigenvalues.len(),
        if report.degenerate {
            " (collapsed)"
        } else {
            ""
        },
        dir.display()
    );
    Ok(())
}

fn cmd_attn(s: &Settings) -> Result<()> {
    let params = model(s)?;
    let seed: u64 = s.get("seed")?;
    let cloud = match s.existing_path("cloud_file")? {
        Some(path) => {
            let mesh = parse_off(&fs::read_to_string(&path)?)?;
            let mut r = rng::derived(seed, &[purpose::SYNTH]);
            normalize(&sample_mesh(&mesh, s.get("points")?, &mut r)?)
        }
        None => {
            let data = load_data(s)?;
            let i: usize = s.get("index")?;
            data.clouds.get(i).cloned().ok_or_else(|| {
                CliError::Config(format!("--index {i} out of range ({} clouds)", data.len()))
            })?
        }
    };
    let dir = out_dir(s)?;
    let extra = [format!(
        "config {}",
        serde_json::to_string(&run_json(s, &params)).expect("json values serialize")
    )];
    let (maps, paths) = eval::export_attention(
        &cloud,
        &params,
        s.opt("layer")?,
        seed,
        &dir,
        &s.get::<String>("name")?,
        &extra,
    )?;
    println!(
        "layer {}: wrote {} head maps to {}",
        maps.layer,
        paths.len(),
        dir.display()
    );
    Ok(())
}
