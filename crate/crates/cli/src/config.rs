//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Every key lives in exactly one section and is mirrored as a
//! `--kebab-case` flag. Resolution order is flag, then environment (output
//! directory only), then config file, then built-in default.

use std::collections::BTreeMap;
use std::path::Path;

use clap::{Arg, ArgMatches, Command};

use crate::CliError;

/// Environment variable that overrides the output directory.
pub const OUT_DIR_ENV: &str = "DCGLR_OUT_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Cmd {
    Gen,
    Pretrain,
    Eval,
    Diagnose,
    Attn,
}

use Cmd::*;

pub struct Key {
    pub name: &'static str,
    pub section: &'static str,
    pub alias: Option<&'static str>,
    pub default: Option<&'static str>,
    pub help: &'static str,
    pub commands: &'static [Cmd],
}

const ALL: &[Cmd] = &[Gen, Pretrain, Eval, Diagnose, Attn];
const MODEL: &[Cmd] = &[Pretrain, Eval, Diagnose, Attn];
const TRAIN: &[Cmd] = &[Pretrain];
const FEAT: &[Cmd] = &[Eval, Diagnose, Attn];

macro_rules! key {
    ($name:literal, $sec:literal, $alias:expr, $def:expr, $cmds:expr, $help:literal) => {
        Key {
            name: $name,
            section: $sec,
            alias: $alias,
            default: $def,
            help: $help,
            commands: $cmds,
        }
    };
}

pub const KEYS: &[Key] = &[
    key!("seed", "run", None, Some("0"), ALL, "Run seed"),
    key!("out", "run", None, Some("out"), ALL, "Output directory"),
    // data
    key!(
        "classes",
        "data",
        None,
        Some("6"),
        &[Gen],
        "Class count or comma-separated shape names"
    ),
    key!(
        "per_class",
        "data",
        None,
        Some("50"),
        &[Gen],
        "Clouds per class"
    ),
    key!(
        "points",
        "data",
        None,
        Some("1024"),
        &[Gen, Attn],
        "Points per cloud"
    ),
    key!(
        "noise",
        "data",
        None,
        Some("0.01"),
        &[Gen],
        "Gaussian jitter sigma"
    ),
    key!(
        "test_fraction",
        "data",
        None,
        Some("0.2"),
        &[Gen],
        "Fraction of each class held out"
    ),
    key!(
        "off_dir",
        "data",
        None,
        None,
        &[Gen],
        "Directory tree of OFF meshes (<class>/**/*.off)"
    ),
    key!(
        "name",
        "data",
        None,
        Some("dataset"),
        &[Gen, Attn],
        "Output file stem"
    ),
    key!(
        "data",
        "data",
        None,
        None,
        &[Pretrain, Eval, Diagnose, Attn],
        "Dataset manifest (.json) or container (.pcb)"
    ),
    // backbone
    key!(
        "k_patch",
        "backbone",
        None,
        Some("32"),
        MODEL,
        "Points per patch"
    ),
    key!("dim", "backbone", None, Some("128"), MODEL, "Token width D"),
    key!(
        "depth",
        "backbone",
        None,
        Some("4"),
        MODEL,
        "Transformer blocks L"
    ),
    key!(
        "heads",
        "backbone",
        None,
        Some("8"),
        MODEL,
        "Attention heads"
    ),
    key!(
        "mlp_hidden",
        "backbone",
        None,
        Some("256"),
        MODEL,
        "Transformer MLP width"
    ),
    key!(
        "patch_hidden",
        "backbone",
        None,
        Some("128"),
        MODEL,
        "Patch embedding hidden width"
    ),
    key!(
        "projector_hidden",
        "backbone",
        None,
        Some("512"),
        MODEL,
        "Projector hidden width"
    ),
    key!(
        "out_dim",
        "backbone",
        None,
        Some("128"),
        MODEL,
        "Projector output dimension K"
    ),
    key!(
        "centroid_channels",
        "backbone",
        None,
        Some("true"),
        MODEL,
        "Append patch centroid to point inputs"
    ),
    // crops
    key!(
        "globals",
        "crops",
        None,
        Some("2"),
        TRAIN,
        "Global crops per cloud (I)"
    ),
    key!(
        "locals",
        "crops",
        None,
        Some("8"),
        TRAIN,
        "Local crops per cloud (J)"
    ),
    key!(
        "resolutions",
        "crops",
        None,
        Some("2"),
        TRAIN,
        "Half-resolution clouds added to the local set (R)"
    ),
    key!(
        "global_ratio_min",
        "crops",
        None,
        Some("0.7"),
        TRAIN,
        "Smallest global crop ratio"
    ),
    key!(
        "global_ratio_max",
        "crops",
        None,
        Some("1.0"),
        TRAIN,
        "Largest global crop ratio"
    ),
    key!(
        "local_ratio_min",
        "crops",
        None,
        Some("0.2"),
        TRAIN,
        "Smallest local crop ratio"
    ),
    key!(
        "local_ratio_max",
        "crops",
        None,
        Some("0.5"),
        TRAIN,
        "Largest local crop ratio"
    ),
    key!(
        "min_points",
        "crops",
        None,
        Some("32"),
        TRAIN,
        "Smallest allowed crop"
    ),
    key!(
        "global_size",
        "crops",
        None,
        Some("1024"),
        TRAIN,
        "Resample global crops to this size (none: keep)"
    ),
    key!(
        "local_size",
        "crops",
        None,
        Some("256"),
        TRAIN,
        "Resample local crops to this size (none: keep)"
    ),
    // train
    key!(
        "epochs",
        "train",
        None,
        Some("100"),
        TRAIN,
        "Training epochs"
    ),
    key!(
        "batch_size",
        "train",
        Some("batch"),
        Some("16"),
        TRAIN,
        "Clouds per step"
    ),
    key!(
        "base_lr",
        "train",
        Some("lr"),
        Some("5e-4"),
        TRAIN,
        "Peak learning rate"
    ),
    key!(
        "warmup_epochs",
        "train",
        None,
        Some("10"),
        TRAIN,
        "Linear warmup epochs"
    ),
    key!(
        "weight_decay",
        "train",
        None,
        Some("0.04"),
        TRAIN,
        "AdamW decoupled weight decay"
    ),
    key!(
        "teacher_temp",
        "train",
        None,
        Some("0.04"),
        TRAIN,
        "Teacher temperature"
    ),
    key!(
        "student_temp",
        "train",
        None,
        Some("0.1"),
        TRAIN,
        "Student temperature"
    ),
    key!(
        "center_rate",
        "train",
        None,
        Some("0.9"),
        TRAIN,
        "Center EMA rate q"
    ),
    key!(
        "centering",
        "train",
        None,
        Some("true"),
        TRAIN,
        "Enable teacher centering"
    ),
    key!(
        "momentum_start",
        "train",
        None,
        Some("0.996"),
        TRAIN,
        "Initial teacher momentum"
    ),
    key!(
        "global_weight",
        "train",
        None,
        Some("1"),
        TRAIN,
        "Weight of the global loss"
    ),
    key!(
        "local_weight",
        "train",
        None,
        Some("1"),
        TRAIN,
        "Weight of the local loss"
    ),
    key!(
        "checkpoint_every",
        "train",
        None,
        Some("10"),
        TRAIN,
        "Checkpoint period in epochs (0: final only)"
    ),
    key!(
        "resume",
        "train",
        None,
        None,
        TRAIN,
        "Training checkpoint to resume from"
    ),
    // eval
    key!(
        "checkpoint",
        "eval",
        None,
        None,
        FEAT,
        "Training checkpoint or parameter file"
    ),
    key!(
        "random_init",
        "eval",
        None,
        Some("false"),
        FEAT,
        "Use a randomly initialized backbone"
    ),
    key!(
        "probe_reg",
        "eval",
        None,
        Some("1e-4"),
        &[Eval],
        "Probe L2 penalty"
    ),
    key!(
        "probe_epochs",
        "eval",
        None,
        Some("500"),
        &[Eval],
        "Probe optimization steps"
    ),
    key!(
        "probe_lr",
        "eval",
        None,
        Some("0.05"),
        &[Eval],
        "Probe learning rate"
    ),
    key!(
        "threshold",
        "eval",
        None,
        Some("1e-3"),
        &[Diagnose],
        "Effective-rank cutoff on normalized eigenvalues"
    ),
    key!(
        "pca_dims",
        "eval",
        None,
        Some("2"),
        &[Diagnose],
        "PCA output dimensions"
    ),
    key!(
        "index",
        "eval",
        None,
        Some("0"),
        &[Attn],
        "Dataset cloud index"
    ),
    key!(
        "cloud_file",
        "eval",
        None,
        None,
        &[Attn],
        "OFF mesh to sample instead of a dataset cloud"
    ),
    key!(
        "layer",
        "eval",
        None,
        None,
        &[Attn],
        "Transformer layer (default: last)"
    ),
];

pub fn key(name: &str) -> Option<&'static Key> {
    KEYS.iter().find(|k| k.name == name)
}

pub fn flag_name(name: &str) -> String {
    name.replace('_', "-")
}

/// Adds `--config` and one flag per key valid for `cmd`.
pub fn add_flags(mut c: Command, cmd: Cmd) -> Command {
    c = c.arg(
        Arg::new("config")
            .long("config")
            .value_name("FILE")
            .help("Config file with `key = value` lines and [section] headers"),
    );
    for k in KEYS.iter().filter(|k| k.commands.contains(&cmd)) {
        let mut a = Arg::new(k.name)
            .long(flag_name(k.name))
            .value_name("VALUE")
            .overrides_with(k.name)
            .help(match k.default {
                Some(d) => format!("{} [{}.{}, default {d}]", k.help, k.section, k.name),
                None => format!("{} [{}.{}]", k.help, k.section, k.name),
            });
        if let Some(al) = k.alias {
            a = a.visible_alias(al);
        }
        c = c.arg(a);
    }
    c
}

/// Parses config text into `key -> value`. Unknown keys, keys in the wrong
/// section and duplicates are errors.
pub fn parse_config(text: &str, origin: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut section = String::new();
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        let at = || format!("{origin}:{}", i + 1);
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .ok_or_else(|| CliError::Config(format!("{}: malformed section header", at())))?
                .trim();
            if !KEYS.iter().any(|k| k.section == name) {
                return Err(CliError::Config(format!(
                    "{}: unknown section [{name}]",
                    at()
                )));
            }
            section = name.to_string();
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{}: expected `key = value`", at())))?;
        let (k, v) = (k.trim(), v.trim());
        let spec =
            key(k).ok_or_else(|| CliError::Config(format!("{}: unknown key {k:?}", at())))?;
        if !section.is_empty() && spec.section != section {
            return Err(CliError::Config(format!(
                "{}: key {k:?} belongs in [{}], not [{section}]",
                at(),
                spec.section
            )));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(CliError::Config(format!("{}: duplicate key {k:?}", at())));
        }
    }
    Ok(out)
}

/// Fully resolved settings for one command.
#[derive(Clone, Debug)]
pub struct Settings {
    cmd: Cmd,
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn resolve(cmd: Cmd, m: &ArgMatches) -> Result<Self, CliError> {
        let mut values = BTreeMap::new();
        for k in KEYS.iter().filter(|k| k.commands.contains(&cmd)) {
            if let Some(d) = k.default {
                values.insert(k.name.to_string(), d.to_string());
            }
        }
        if let Some(path) = m.get_one::<String>("config") {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Config(format!("--config {path}: {e}")))?;
            for (k, v) in parse_config(&text, path)? {
                if !key(&k).is_some_and(|s| s.commands.contains(&cmd)) {
                    return Err(CliError::Config(format!(
                        "{path}: key {k:?} does not apply to this command"
                    )));
                }
                values.insert(k, v);
            }
        }
        if let Ok(dir) = std::env::var(OUT_DIR_ENV) {
            if !dir.is_empty() {
                values.insert("out".into(), dir);
            }
        }
        for k in KEYS.iter().filter(|k| k.commands.contains(&cmd)) {
            if let Some(v) = m.get_one::<String>(k.name) {
                values.insert(k.name.to_string(), v.clone());
            }
        }
        Ok(Self { cmd, values })
    }

    pub fn raw(&self, name: &str) -> Option<&str> {
        debug_assert!(
            key(name).is_some_and(|k| k.commands.contains(&self.cmd)),
            "{name}"
        );
        self.values.get(name).map(String::as_str)
    }

    pub fn get<T: std::str::FromStr>(&self, name: &str) -> Result<T, CliError> {
        let v = self
            .raw(name)
            .ok_or_else(|| CliError::Config(format!("--{} is required", flag_name(name))))?;
        v.parse()
            .map_err(|_| CliError::Config(format!("--{}: invalid value {v:?}", flag_name(name))))
    }

    pub fn opt<T: std::str::FromStr>(&self, name: &str) -> Result<Option<T>, CliError> {
        match self.raw(name) {
            None | Some("none") | Some("") => Ok(None),
            Some(_) => self.get(name).map(Some),
        }
    }

    pub fn flag(&self, name: &str) -> Result<bool, CliError> {
        match self.raw(name) {
            Some("true" | "1" | "yes" | "on") => Ok(true),
            Some("false" | "0" | "no" | "off") | None => Ok(false),
            Some(v) => Err(CliError::Config(format!(
                "--{}: expected true or false, got {v:?}",
                flag_name(name)
            ))),
        }
    }

    /// Path that must exist.
    pub fn existing_path(&self, name: &str) -> Result<Option<std::path::PathBuf>, CliError> {
        match self.raw(name) {
            None | Some("") => Ok(None),
            Some(p) if Path::new(p).exists() => Ok(Some(p.into())),
            Some(p) => Err(CliError::Config(format!(
                "--{}: path {p} does not exist",
                flag_name(name)
            ))),
        }
    }

    /// The resolved settings as a JSON object, for embedding in outputs.
    pub fn to_json(&self) -> serde_json::Value {
        let mut sections = serde_json::Map::new();
        for (k, v) in &self.values {
            let sec = key(k).map_or("run", |s| s.section);
            let entry = sections
                .entry(sec.to_string())
                .or_insert_with(|| serde_json::Value::Object(Default::default()));
            if let serde_json::Value::Object(o) = entry {
                o.insert(k.clone(), serde_json::Value::String(v.clone()));
            }
        }
        serde_json::Value::Object(sections)
    }

    /// Settings in config-file syntax; reloading reproduces them.
    pub fn to_config_text(&self) -> String {
        let mut out = String::new();
        let mut sections: Vec<&str> = KEYS.iter().map(|k| k.section).collect();
        sections.dedup();
        for sec in sections {
            let lines: Vec<String> = self
                .values
                .iter()
                .filter(|(k, _)| key(k).is_some_and(|s| s.section == sec))
                .map(|(k, v)| format!("{k} = {v}"))
                .collect();
            if !lines.is_empty() {
                out.push_str(&format!("[{sec}]\n{}\n\n", lines.join("\n")));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        for (i, a) in KEYS.iter().enumerate() {
            for b in &KEYS[i + 1..] {
                assert_ne!(a.name, b.name);
                assert_ne!(Some(a.name), b.alias);
            }
        }
    }

    #[test]
    fn sections_and_comments() {
        let m = parse_config(
            "# run\nseed = 3\n[train]\nepochs=5 # short\n\n[crops]\nlocals = 4\n",
            "c",
        )
        .unwrap();
        assert_eq!(m["seed"], "3");
        assert_eq!(m["epochs"], "5");
        assert_eq!(m["locals"], "4");
    }

    #[test]
    fn rejects_typos_and_misplaced_keys() {
        for bad in [
            "epoch = 3",
            "[train]\nlocals = 2",
            "[nope]",
            "seed 3",
            "seed = 1\nseed = 2",
            "[train",
        ] {
            assert!(
                matches!(parse_config(bad, "c"), Err(CliError::Config(_))),
                "{bad}"
            );
        }
    }
}
