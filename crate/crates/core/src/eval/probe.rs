use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::data::Split;
use crate::distill::AdamW;
use crate::error::{Error, Result};
use crate::rng::{self, purpose};

/// Linear probe hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    /// L2 penalty on the weight matrix.
    pub reg: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            reg: 1e-4,
            epochs: 500,
            lr: 0.05,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub final_loss: f64,
    pub classes: usize,
    pub train_size: usize,
    pub test_size: usize,
    pub config: ProbeConfig,
}

/// Fitted multinomial logistic classifier over standardized features.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProbe {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    /// `[D, C]`.
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearProbe {
    pub fn standardize(&self, x: &Tensor) -> Result<Tensor> {
        let d = self.mean.len();
        if x.last_dim() != d {
            return Err(Error::Dimension(format!(
                "features have {} columns, probe expects {d}",
                x.last_dim()
            )));
        }
        let mut out = x.clone();
        for row in out.data_mut().chunks_mut(d) {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[j]) / self.scale[j];
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let z = self.standardize(x)?;
        let mut tape = Tape::new();
        let zv = tape.constant(z);
        let w = tape.constant(self.weight.clone());
        let b = tape.constant(self.bias.clone());
        let l = tape.matmul(zv, w)?;
        let l = tape.add_bias(l, b)?;
        Ok(tape
            .value(l)
            .rows()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect())
    }
}

fn gather(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let d = x.last_dim();
    let mut data = Vec::with_capacity(idx.len() * d);
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    Tensor::new(vec![idx.len(), d], data)
}

/// Fits a softmax-regression probe on the training rows by full-batch
/// AdamW on `mean CE + reg·‖W‖²`. Features are standardized with the
/// training mean and standard deviation.
pub fn fit_probe(
    x: &Tensor,
    labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<(LinearProbe, f64)> {
    let (m, d) = (labels.len(), x.last_dim());
    if x.shape() != [m, d] || m == 0 {
        return Err(Error::Dimension(format!(
            "features {:?} for {m} labels",
            x.shape()
        )));
    }
    let mut seen = vec![false; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::DegenerateInput(format!(
                "label {l} ≥ {classes} classes"
            )));
        }
        seen[l] = true;
    }
    if seen.iter().filter(|&&s| s).count() < 2 {
        return Err(Error::DegenerateInput(
            "probe training set has a single class".into(),
        ));
    }
    let mut mean = vec![0.0; d];
    for r in x.rows() {
        for j in 0..d {
            mean[j] += r[j] / m as f64;
        }
    }
    let mut var = vec![0.0; d];
    for r in x.rows() {
        for j in 0..d {
            var[j] += (r[j] - mean[j]).powi(2) / m as f64;
        }
    }
    let scale: Vec<f64> = var
        .iter()
        .map(|&v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
        .collect();
    let mut probe = LinearProbe {
        mean,
        scale,
        weight: Tensor::randn(
            &[d, classes],
            0.01,
            &mut rng::derived(cfg.seed, &[purpose::PROBE]),
        ),
        bias: Tensor::zeros(&[classes]),
    };
    let z = probe.standardize(x)?;
    let mut onehot = Tensor::zeros(&[m, classes]);
    for (i, &l) in labels.iter().enumerate() {
        onehot.data_mut()[i * classes + l] = 1.0;
    }
    let mut params = vec![probe.weight.clone(), probe.bias.clone()];
    let mut opt = AdamW::new(&params);
    let mut last = f64::NAN;
    for _ in 0..cfg.epochs.max(1) {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let w = tape.param(params[0].clone());
        let b = tape.param(params[1].clone());
        let logits = tape.matmul(zv, w)?;
        let logits = tape.add_bias(logits, b)?;
        let q = tape.softmax(logits, 1.0)?;
        let ce = tape.cross_entropy(&onehot, q)?;
        let ce = tape.sum(ce);
        let ce = tape.scale(ce, 1.0 / m as f64);
        let sq = tape.mul(w, w)?;
        let sq = tape.sum(sq);
        let pen = tape.scale(sq, cfg.reg);
        let loss = tape.add(ce, pen)?;
        last = tape.value(loss).item()?;
        if !last.is_finite() {
            return Err(Error::Numeric("non-finite probe loss".into()));
        }
        let g = tape.backward(loss)?;
        opt.step(&mut params, &[g.get(w), g.get(b)], cfg.lr, 0.0, &|_| false)?;
    }
    probe.weight = params[0].clone();
    probe.bias = params[1].clone();
    Ok((probe, last))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// Trains on the `Train` rows and reports accuracy on the `Test` rows.
pub fn linear_probe(
    features: &Tensor,
    labels: &[usize],
    split: &[Split],
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if labels.len() != split.len() || features.shape().first() != Some(&labels.len()) {
        return Err(Error::Dimension(
            "features, labels and split must have one entry per cloud".into(),
        ));
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let pick = |s: Split| -> Vec<usize> { (0..labels.len()).filter(|&i| split[i] == s).collect() };
    let (tr, te) = (pick(Split::Train), pick(Split::Test));
    if te.is_empty() {
        return Err(Error::DegenerateInput("probe test split is empty".into()));
    }
    let ytr: Vec<usize> = tr.iter().map(|&i| labels[i]).collect();
    let yte: Vec<usize> = te.iter().map(|&i| labels[i]).collect();
    let xtr = gather(features, &tr)?;
    let xte = gather(features, &te)?;
    let (probe, final_loss) = fit_probe(&xtr, &ytr, classes, cfg)?;
    Ok(ProbeReport {
        train_accuracy: accuracy(&probe.predict(&xtr)?, &ytr),
        test_accuracy: accuracy(&probe.predict(&xte)?, &yte),
        final_loss,
        classes,
        train_size: tr.len(),
        test_size: te.len(),
        config: cfg.clone(),
    })
}
