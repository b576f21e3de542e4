//! Small end-to-end run: synthetic data, pretraining, probe and spectrum.
//!
//! `cargo run --release --example toy_run -- [epochs] [seed] [centering]`

use std::time::Instant;

use dcglr_core::backbone::{forward, BackboneConfig, ModelParams};
use dcglr_core::data::{synth_dataset, Split, SynthConfig};
use dcglr_core::distill::{pretrain, PretrainOptions, TrainConfig};
use dcglr_core::eval::{extract_features, linear_probe, spectrum, ProbeConfig, RANK_THRESHOLD};
use dcglr_core::geometry::CropConfig;
use dcglr_core::rng::{self, purpose};
use dcglr_core::Tensor;

fn env<T: std::str::FromStr>(name: &str, default: T) -> T {
    std::env::var(name)
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(default)
}

fn main() -> dcglr_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or(30, |s| s.parse().unwrap());
    let seed = args.get(2).map_or(0, |s| s.parse().unwrap());
    let centering = args.get(3).is_none_or(|s| s != "off");

    let data = synth_dataset(&SynthConfig {
        per_class: 50,
        n_points: env("NPTS", 512),
        seed,
        ..SynthConfig::default()
    })?;
    let backbone = BackboneConfig {
        k_patch: 16,
        dim: 64,
        depth: 2,
        heads: 8,
        mlp_hidden: 128,
        patch_hidden: 64,
        projector_hidden: env("PROJ", 256),
        out_dim: 64,
        centroid_channels: true,
    };
    let config = TrainConfig {
        crops: CropConfig {
            global_size: Some(env("GS", 256)).filter(|&n| n > 0),
            local_size: Some(env("LS", 64)),
            locals: env("LOCALS", 8),
            ..CropConfig::default()
        },
        centering,
        teacher_temp: if centering { env("TT", 0.04) } else { 1.0 },
        student_temp: env("TS", 0.1),
        momentum_start: env("MOM", 0.996),
        base_lr: env("LR", 5e-4),
        weight_decay: env("WD", 0.04),
        epochs,
        batch_size: 8,
        warmup_epochs: env("WARM", 3),
        seed,
        ..TrainConfig::default()
    };
    let train = if env("ALL", 0) == 1 {
        data.clouds.clone()
    } else {
        data.subset(Split::Train)
    };
    let t0 = Instant::now();
    let out = pretrain(
        &train,
        &config,
        &backbone,
        &PretrainOptions {
            on_step: Some(|m| {
                if m.step % 150 == 0 {
                    eprintln!(
                        "step {} epoch {} loss {:.4} ({:.0} ms)",
                        m.step, m.epoch, m.loss, m.wall_ms
                    )
                }
            }),
            ..Default::default()
        },
    )?;
    eprintln!("pretrain {:.1}s", t0.elapsed().as_secs_f64());
    let labels = data.labels()?;
    for (name, params) in [
        ("trained", out.state.teacher.clone()),
        ("random", ModelParams::init(&backbone, seed)?),
    ] {
        let f = extract_features(&data.clouds, &params, seed)?;
        let s = spectrum(&f.rows, RANK_THRESHOLD)?;
        if env("DIAG", 0) == 1 {
            let mut logits = Vec::new();
            for c in &data.clouds {
                let out = forward(c, &params, &mut rng::derived(seed, &[purpose::FEATURES]))?;
                logits.extend_from_slice(out.logits.data());
            }
            let k = backbone.out_dim;
            let l = spectrum(
                &Tensor::new(vec![data.clouds.len(), k], logits)?,
                RANK_THRESHOLD,
            )?;
            println!(
                "{name}: feature normalized {}",
                s.normalized[..12]
                    .iter()
                    .map(|v| format!("{v:.1e}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            println!(
                "{name}: logit rank {} normalized {}",
                l.effective_rank,
                l.normalized[..12]
                    .iter()
                    .map(|v| format!("{v:.1e}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
        }
        for reg in [1e-4, 1e-3, 1e-2, 1e-1] {
            let p = linear_probe(
                &f.rows,
                &labels,
                &data.split,
                &ProbeConfig {
                    seed,
                    reg,
                    ..Default::default()
                },
            )?;
            println!(
                "{name}: effective_rank {} reg {reg} probe {:.3} (train {:.3})",
                s.effective_rank, p.test_accuracy, p.train_accuracy
            );
        }
    }
    Ok(())
}
