use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::loss::{loss_global, loss_local, mean_of, teacher_targets, total_loss, update_center};
use super::optim::AdamW;
use super::schedule::{ema_update, lr_schedule, momentum_schedule};
use crate::autodiff::{Tape, Tensor, Var};
use crate::backbone::archive::Archive;
use crate::backbone::{forward_patches, patchify, BackboneConfig, Bound, ModelParams, Patches};
use crate::error::{Error, Result};
use crate::geometry::{make_crop_set, CropConfig, PointCloud};
use crate::rng::{self, purpose};

/// Hyperparameters of self-distillation pretraining.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub crops: CropConfig,
    /// Teacher sharpening temperature τ_t.
    pub teacher_temp: f64,
    /// Student softmax temperature τ_s.
    pub student_temp: f64,
    /// Center EMA rate q.
    pub center_rate: f64,
    /// When false the center stays at zero.
    pub centering: bool,
    /// Initial teacher momentum λ_0.
    pub momentum_start: f64,
    pub global_weight: f64,
    pub local_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            crops: CropConfig::default(),
            teacher_temp: 0.04,
            student_temp: 0.1,
            center_rate: 0.9,
            centering: true,
            momentum_start: 0.996,
            global_weight: 1.0,
            local_weight: 1.0,
            epochs: 100,
            batch_size: 16,
            base_lr: 5e-4,
            warmup_epochs: 10,
            weight_decay: 0.04,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.crops.validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.crops.globals < 2 {
            return bad(format!(
                "need at least 2 global crops for the global loss, got {}",
                self.crops.globals
            ));
        }
        if self.crops.locals + self.crops.resolutions == 0 {
            return bad("need at least one local or resolution crop".into());
        }
        if !(self.teacher_temp > 0.0 && self.student_temp > 0.0) {
            return bad("temperatures must be positive".into());
        }
        if !(self.center_rate > 0.0 && self.center_rate < 1.0) {
            return bad(format!("center rate {} not in (0, 1)", self.center_rate));
        }
        if !(0.0..1.0).contains(&self.momentum_start) {
            return bad(format!(
                "momentum start {} not in [0, 1)",
                self.momentum_start
            ));
        }
        if self.global_weight < 0.0 || self.local_weight < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive".into());
        }
        if !(self.base_lr >= 0.0 && self.weight_decay >= 0.0) {
            return bad("learning rate and weight decay must be non-negative".into());
        }
        Ok(())
    }
}

/// Step counts derived from the dataset size and config.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Schedule {
    pub steps_per_epoch: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
}

impl Schedule {
    pub fn new(samples: usize, config: &TrainConfig) -> Self {
        let spe = samples.div_ceil(config.batch_size).max(1) as u64;
        Self {
            steps_per_epoch: spe,
            total_steps: spe * config.epochs as u64,
            warmup_steps: spe * config.warmup_epochs as u64,
        }
    }
}

/// Everything that evolves during pretraining.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub teacher: ModelParams,
    pub student: ModelParams,
    pub center: Tensor,
    pub optimizer: AdamW,
    /// Completed optimisation steps.
    pub step: u64,
    /// Samples skipped because a crop was degenerate.
    pub skipped: u64,
}

impl TrainState {
    /// Random student; the teacher starts as an exact copy.
    pub fn init(backbone: &BackboneConfig, seed: u64) -> Result<Self> {
        let student = ModelParams::init(backbone, seed)?;
        Ok(Self {
            teacher: student.clone(),
            center: Tensor::zeros(&[backbone.out_dim]),
            optimizer: AdamW::new(student.tensors()),
            student,
            step: 0,
            skipped: 0,
        })
    }

    pub fn save(&self, path: &Path, config: &TrainConfig) -> Result<()> {
        let mut a = Archive::new();
        a.set_meta("kind", "train");
        a.set_meta("step", self.step);
        a.set_meta("skipped", self.skipped);
        a.set_meta("seed", config.seed);
        a.set_meta("adam.t", self.optimizer.t);
        a.set_meta(
            "train_config",
            serde_json::to_string(config).map_err(|e| Error::Format(e.to_string()))?,
        );
        self.teacher.write_archive(&mut a, "teacher.");
        self.student.write_archive(&mut a, "student.");
        a.push("center", self.center.clone());
        for (i, n) in self.student.names().iter().enumerate() {
            a.push(format!("adam.m.{n}"), self.optimizer.m[i].clone());
            a.push(format!("adam.v.{n}"), self.optimizer.v[i].clone());
        }
        a.save(path)
    }

    /// Loads a training checkpoint and the config it was written with.
    pub fn load(path: &Path) -> Result<(Self, TrainConfig)> {
        let mut a = Archive::load(path)?;
        if a.meta("kind") != Some("train") {
            return Err(Error::Format(format!(
                "{} is not a training checkpoint",
                path.display()
            )));
        }
        let config: TrainConfig = serde_json::from_str(a.meta("train_config").unwrap_or(""))
            .map_err(|e| Error::Format(format!("bad train_config: {e}")))?;
        let step = a.meta_parse("step")?;
        let skipped = a.meta_parse("skipped")?;
        let t = a.meta_parse("adam.t")?;
        let teacher = ModelParams::read_archive(&mut a, "teacher.")?;
        let student = ModelParams::read_archive(&mut a, "student.")?;
        let center = a.take_array("center")?;
        let mut optimizer = AdamW::new(student.tensors());
        optimizer.t = t;
        for (i, n) in student.names().iter().enumerate() {
            optimizer.m[i] = a.take_array(&format!("adam.m.{n}"))?;
            optimizer.v[i] = a.take_array(&format!("adam.v.{n}"))?;
        }
        Ok((
            Self {
                teacher,
                student,
                center,
                optimizer,
                step,
                skipped,
            },
            config,
        ))
    }
}

/// Teacher network from a training checkpoint, or the network stored in a
/// plain parameter file.
pub fn load_teacher(path: &Path) -> Result<ModelParams> {
    let mut a = Archive::load(path)?;
    match a.meta("kind") {
        Some("train") => ModelParams::read_archive(&mut a, "teacher."),
        Some("model") => ModelParams::read_archive(&mut a, ""),
        other => Err(Error::Format(format!(
            "{}: unknown checkpoint kind {other:?}",
            path.display()
        ))),
    }
}

/// Per-step training record, one JSON line in the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub loss_g: f64,
    pub loss_l: f64,
    pub loss: f64,
    pub lr: f64,
    pub lambda: f64,
    pub center_norm: f64,
    pub wall_ms: f64,
    pub skipped: u64,
    pub seed: u64,
}

/// One training cloud with its private random stream seed.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub cloud: &'a PointCloud,
    pub seed: u64,
}

/// Patchified crops of one sample. `locals` includes resolution clouds.
struct Views {
    globals: Vec<Patches>,
    locals: Vec<Patches>,
}

fn prepare(sample: &Sample, crops: &CropConfig, k_patch: usize) -> Result<Views> {
    let mut r = rng::stream(sample.seed);
    let crops = CropConfig {
        min_points: crops.min_points.max(k_patch),
        ..crops.clone()
    };
    let set = make_crop_set(sample.cloud, &crops, &mut r)?;
    let patch = |c: &PointCloud, r: &mut rng::Stream| patchify(c, k_patch, r);
    Ok(Views {
        globals: set
            .globals
            .iter()
            .map(|c| patch(c, &mut r))
            .collect::<Result<_>>()?,
        locals: set
            .locals
            .iter()
            .map(|c| patch(c, &mut r))
            .collect::<Result<_>>()?,
    })
}

/// Forwards `items` batched by patch count; returns logits rows in item order.
fn grouped_logits(tape: &mut Tape, p: &Bound, items: &[&Patches]) -> Result<Vec<(Var, usize)>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, it) in items.iter().enumerate() {
        groups.entry(it.count()).or_default().push(i);
    }
    let mut rows = vec![None; items.len()];
    for idx in groups.values() {
        let batch: Vec<&Patches> = idx.iter().map(|&i| items[i]).collect();
        let out = forward_patches(tape, p, &batch)?;
        for (r, &i) in idx.iter().enumerate() {
            rows[i] = Some((out.logits, r));
        }
    }
    Ok(rows
        .into_iter()
        .map(|r| r.expect("every item forwarded"))
        .collect())
}

/// Single optimisation step over a batch of samples.
///
/// Samples whose crops are degenerate are skipped and counted. The teacher
/// sees global crops only and sits on the tape as constants, so no gradient
/// reaches it; the student sees every crop.
pub fn train_step(
    state: &mut TrainState,
    config: &TrainConfig,
    batch: &[Sample],
    schedule: &Schedule,
) -> Result<StepMetrics> {
    let started = Instant::now();
    let k_patch = state.student.config().k_patch;
    let k_out = state.student.config().out_dim;
    let mut views = Vec::with_capacity(batch.len());
    let mut skipped = 0;
    for s in batch {
        match prepare(s, &config.crops, k_patch) {
            Ok(v) => views.push(v),
            Err(Error::DegenerateCrop { .. } | Error::DegenerateInput(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    state.skipped += skipped;
    if views.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "all {} samples in the batch were skipped as degenerate",
            batch.len()
        )));
    }

    let mut tape = Tape::new();
    let student = state.student.bind(&mut tape, true);
    let teacher = state.teacher.bind(&mut tape, false);

    let n_global = config.crops.globals;
    let global_items: Vec<&Patches> = views.iter().flat_map(|v| &v.globals).collect();
    let teacher_rows = grouped_logits(&mut tape, &teacher, &global_items)?;
    let mut teacher_logits = Vec::with_capacity(global_items.len() * k_out);
    for &(v, r) in &teacher_rows {
        teacher_logits.extend_from_slice(tape.value(v).row(r));
    }
    let teacher_logits = Tensor::new(vec![global_items.len(), k_out], teacher_logits)?;
    teacher_logits.check_finite("teacher logits")?;
    let center = if config.centering {
        state.center.clone()
    } else {
        Tensor::zeros(&[k_out])
    };
    let targets = teacher_targets(&teacher_logits, &center, config.teacher_temp)?;

    let student_items: Vec<&Patches> = views
        .iter()
        .flat_map(|v| v.globals.iter().chain(&v.locals))
        .collect();
    let rows = grouped_logits(&mut tape, &student, &student_items)?;
    let mut probs_of: BTreeMap<Var, Var> = BTreeMap::new();
    let mut student_probs = Vec::with_capacity(rows.len());
    for &(v, r) in &rows {
        let probs = match probs_of.get(&v) {
            Some(&p) => p,
            None => {
                let p = tape.softmax(v, config.student_temp)?;
                probs_of.insert(v, p);
                p
            }
        };
        student_probs.push(tape.slice(probs, 0, r, r + 1)?);
    }

    let per_sample = n_global + config.crops.locals + config.crops.resolutions;
    let mut lg_terms = Vec::with_capacity(views.len());
    let mut ll_terms = Vec::with_capacity(views.len());
    for b in 0..views.len() {
        let t: Vec<Tensor> = (0..n_global)
            .map(|i| Tensor::new(vec![1, k_out], targets.row(b * n_global + i).to_vec()))
            .collect::<Result<_>>()?;
        let s = &student_probs[b * per_sample..(b + 1) * per_sample];
        lg_terms.push(loss_global(&mut tape, &t, &s[..n_global])?);
        ll_terms.push(loss_local(&mut tape, &t, &s[n_global..])?);
    }
    let lg = mean_of(&mut tape, &lg_terms)?;
    let ll = mean_of(&mut tape, &ll_terms)?;
    let loss = total_loss(&mut tape, lg, ll, config.global_weight, config.local_weight)?;

    let lr = lr_schedule(
        state.step,
        schedule.total_steps,
        schedule.warmup_steps,
        config.base_lr,
    );
    let lambda = momentum_schedule(state.step, schedule.total_steps, config.momentum_start);
    let mut metrics = StepMetrics {
        step: state.step,
        epoch: state.step / schedule.steps_per_epoch,
        loss_g: tape.value(lg).item()?,
        loss_l: tape.value(ll).item()?,
        loss: tape.value(loss).item()?,
        lr,
        lambda,
        center_norm: state.center.norm(),
        wall_ms: 0.0,
        skipped,
        seed: config.seed,
    };
    if !metrics.loss.is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite loss at step {}: {}",
            state.step,
            serde_json::to_string(&metrics).unwrap_or_default()
        )));
    }

    let grads = tape.backward(loss)?;
    let student_grads: Vec<Option<&Tensor>> =
        student.vars().iter().map(|&v| grads.get(v)).collect();
    let decay: Vec<bool> = (0..state.student.len())
        .map(|i| state.student.decays(i))
        .collect();
    state.optimizer.step(
        state.student.tensors_mut(),
        &student_grads,
        lr,
        config.weight_decay,
        &|i| decay[i],
    )?;
    if !state.student.all_finite() {
        return Err(Error::Numeric(format!(
            "non-finite student parameters after step {}: {}",
            state.step,
            serde_json::to_string(&metrics).unwrap_or_default()
        )));
    }
    ema_update(&mut state.teacher, &state.student, lambda)?;
    if config.centering {
        state.center = update_center(&state.center, &teacher_logits, config.center_rate)?;
    }
    state.step += 1;
    metrics.center_norm = state.center.norm();
    metrics.wall_ms = started.elapsed().as_secs_f64() * 1e3;
    Ok(metrics)
}

/// Drives [`train_step`] over shuffled epochs of a dataset.
pub struct Trainer<'d> {
    clouds: &'d [PointCloud],
    config: TrainConfig,
    state: TrainState,
    schedule: Schedule,
    order: Option<(u64, Vec<usize>)>,
    /// Write measured step time into metrics; off gives reproducible logs.
    pub record_wall_time: bool,
}

impl<'d> Trainer<'d> {
    pub fn new(
        clouds: &'d [PointCloud],
        config: TrainConfig,
        backbone: &BackboneConfig,
    ) -> Result<Self> {
        let state = TrainState::init(backbone, config.seed)?;
        Self::with_state(clouds, config, state)
    }

    pub fn with_state(
        clouds: &'d [PointCloud],
        config: TrainConfig,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        if clouds.is_empty() {
            return Err(Error::DegenerateInput("empty training set".into()));
        }
        if state.center.shape() != [state.student.config().out_dim]
            || !state.teacher.same_shapes(&state.student)
        {
            return Err(Error::Dimension("inconsistent training state".into()));
        }
        let schedule = Schedule::new(clouds.len(), &config);
        Ok(Self {
            clouds,
            config,
            state,
            schedule,
            order: None,
            record_wall_time: true,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn into_state(self) -> TrainState {
        self.state
    }

    pub fn schedule(&self) -> Schedule {
        self.schedule
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.schedule.total_steps
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut idx: Vec<usize> = (0..self.clouds.len()).collect();
            idx.shuffle(&mut rng::derived(
                self.config.seed,
                &[purpose::SHUFFLE, epoch],
            ));
            self.order = Some((epoch, idx));
        }
        &self.order.as_ref().expect("order set").1
    }

    /// Runs the next batch.
    pub fn step(&mut self) -> Result<StepMetrics> {
        if self.is_finished() {
            return Err(Error::Usage("training already finished".into()));
        }
        let spe = self.schedule.steps_per_epoch;
        let epoch = self.state.step / spe;
        let pos = (self.state.step % spe) as usize * self.config.batch_size;
        let (seed, bs) = (self.config.seed, self.config.batch_size);
        let ids: Vec<usize> = {
            let order = self.epoch_order(epoch);
            order[pos..(pos + bs).min(order.len())].to_vec()
        };
        let batch: Vec<Sample> = ids
            .iter()
            .map(|&i| Sample {
                cloud: &self.clouds[i],
                seed: rng::derive_seed(seed, &[purpose::SAMPLE, epoch, i as u64]),
            })
            .collect();
        let mut m = train_step(&mut self.state, &self.config, &batch, &self.schedule)?;
        if !self.record_wall_time {
            m.wall_ms = 0.0;
        }
        Ok(m)
    }
}

/// Output locations, checkpoint cadence and interruption for [`pretrain`].
#[derive(Clone, Debug, Default)]
pub struct PretrainOptions {
    /// Directory for `metrics.jsonl` and checkpoints; `None` keeps
    /// everything in memory.
    pub out_dir: Option<PathBuf>,
    /// Write `epoch_NNNN.ckpt` every this many epochs (0: final only).
    pub checkpoint_every: usize,
    pub record_wall_time: bool,
    /// Checked after every step; when set, a final checkpoint is flushed.
    pub stop: Option<Arc<AtomicBool>>,
    /// Stop after this many total steps (for staged runs).
    pub stop_at_step: Option<u64>,
    /// Progress callback, invoked after every step.
    pub on_step: Option<fn(&StepMetrics)>,
}

pub struct PretrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
    pub checkpoints: Vec<PathBuf>,
    /// Stopped before the schedule completed.
    pub interrupted: bool,
}

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";

/// Pretraining from a fresh random initialisation.
pub fn pretrain(
    clouds: &[PointCloud],
    config: &TrainConfig,
    backbone: &BackboneConfig,
    options: &PretrainOptions,
) -> Result<PretrainOutcome> {
    let state = TrainState::init(backbone, config.seed)?;
    resume(clouds, config, state, options)
}

/// Continues pretraining from `state`. An existing metrics log in the output
/// directory is cut back to the steps before `state.step`.
pub fn resume(
    clouds: &[PointCloud],
    config: &TrainConfig,
    state: TrainState,
    options: &PretrainOptions,
) -> Result<PretrainOutcome> {
    let mut trainer = Trainer::with_state(clouds, config.clone(), state)?;
    trainer.record_wall_time = options.record_wall_time;
    let mut log = match &options.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(open_log(&dir.join(METRICS_FILE), trainer.state().step)?)
        }
        None => None,
    };
    let spe = trainer.schedule().steps_per_epoch;
    let mut metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut interrupted = false;
    while !trainer.is_finished() {
        if options
            .stop_at_step
            .is_some_and(|s| trainer.state().step >= s)
            || options
                .stop
                .as_ref()
                .is_some_and(|f| f.load(Ordering::SeqCst))
        {
            interrupted = true;
            break;
        }
        let m = trainer.step()?;
        if let Some(w) = log.as_mut() {
            let line = serde_json::to_string(&m).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        if let Some(cb) = options.on_step {
            cb(&m);
        }
        metrics.push(m);
        let done = trainer.state().step;
        if let Some(dir) = &options.out_dir {
            let epoch = done / spe;
            if options.checkpoint_every > 0
                && done % spe == 0
                && epoch % options.checkpoint_every as u64 == 0
            {
                let p = dir.join(format!("epoch_{epoch:04}.ckpt"));
                trainer.state().save(&p, config)?;
                checkpoints.push(p);
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = &options.out_dir {
        let p = dir.join(LAST_CHECKPOINT);
        trainer.state().save(&p, config)?;
        checkpoints.push(p);
    }
    Ok(PretrainOutcome {
        state: trainer.into_state(),
        metrics,
        checkpoints,
        interrupted,
    })
}

/// Opens the metrics log for appending, keeping only lines for steps before
/// `from_step`.
fn open_log(path: &Path, from_step: u64) -> Result<File> {
    let mut kept = Vec::new();
    if from_step > 0 && path.exists() {
        for line in BufReader::new(File::open(path)?).lines() {
            let line = line?;
            let m: StepMetrics = serde_json::from_str(&line)
                .map_err(|e| Error::Format(format!("bad metrics line: {e}")))?;
            if m.step < from_step {
                kept.push(line);
            }
        }
    }
    let mut f = OpenOptions::new()
        .create(true)
        .write(true)
        .truncate(true)
        .open(path)?;
    for line in kept {
        writeln!(f, "{line}")?;
    }
    Ok(f)
}
