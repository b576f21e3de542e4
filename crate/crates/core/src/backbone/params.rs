use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::archive::Archive;
use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;

/// Shape hyperparameters of the point-cloud ViT and its projector.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    /// Points per patch.
    pub k_patch: usize,
    /// Token width D.
    pub dim: usize,
    /// Transformer blocks L.
    pub depth: usize,
    pub heads: usize,
    /// Feed-forward width inside each block.
    pub mlp_hidden: usize,
    /// Hidden width of the per-point patch MLP.
    pub patch_hidden: usize,
    /// Hidden width of the two projector hidden layers.
    pub projector_hidden: usize,
    /// Projector output K.
    pub out_dim: usize,
    /// Append the patch centroid to every re-centered point (6 input channels).
    pub centroid_channels: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            k_patch: 32,
            dim: 128,
            depth: 4,
            heads: 8,
            mlp_hidden: 256,
            patch_hidden: 128,
            projector_hidden: 512,
            out_dim: 128,
            centroid_channels: true,
        }
    }
}

impl BackboneConfig {
    /// Default widths with the projector output at 512.
    pub fn paper_scale() -> Self {
        Self {
            out_dim: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("k_patch", self.k_patch),
            ("dim", self.dim),
            ("depth", self.depth),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("patch_hidden", self.patch_hidden),
            ("projector_hidden", self.projector_hidden),
            ("out_dim", self.out_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("backbone {name} must be positive")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        if self.centroid_channels {
            6
        } else {
            3
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub(crate) fn write_meta(&self, a: &mut Archive) {
        a.set_meta("backbone.k_patch", self.k_patch);
        a.set_meta("backbone.dim", self.dim);
        a.set_meta("backbone.depth", self.depth);
        a.set_meta("backbone.heads", self.heads);
        a.set_meta("backbone.mlp_hidden", self.mlp_hidden);
        a.set_meta("backbone.patch_hidden", self.patch_hidden);
        a.set_meta("backbone.projector_hidden", self.projector_hidden);
        a.set_meta("backbone.out_dim", self.out_dim);
        a.set_meta("backbone.centroid_channels", self.centroid_channels);
    }

    pub(crate) fn read_meta(a: &Archive) -> Result<Self> {
        let cfg = Self {
            k_patch: a.meta_parse("backbone.k_patch")?,
            dim: a.meta_parse("backbone.dim")?,
            depth: a.meta_parse("backbone.depth")?,
            heads: a.meta_parse("backbone.heads")?,
            mlp_hidden: a.meta_parse("backbone.mlp_hidden")?,
            patch_hidden: a.meta_parse("backbone.patch_hidden")?,
            projector_hidden: a.meta_parse("backbone.projector_hidden")?,
            out_dim: a.meta_parse("backbone.out_dim")?,
            centroid_channels: a.meta_parse("backbone.centroid_channels")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// How a parameter is initialised.
enum Init {
    /// Gaussian with std `1/sqrt(fan_in)`, fan-in taken from the first axis.
    Weight,
    Zeros,
    Ones,
    /// Small Gaussian for the class token.
    Token,
}

/// Name, shape and initialiser of every parameter, in canonical order.
fn layout(cfg: &BackboneConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, ph, pj) = (cfg.dim, cfg.patch_hidden, cfg.projector_hidden);
    let mut v = vec![
        (
            "patch.w1".into(),
            vec![cfg.input_channels(), ph],
            Init::Weight,
        ),
        ("patch.b1".into(), vec![ph], Init::Zeros),
        ("patch.w2".into(), vec![ph, d], Init::Weight),
        ("patch.b2".into(), vec![d], Init::Zeros),
        ("cls".into(), vec![1, d], Init::Token),
    ];
    for l in 0..cfg.depth {
        let p = |s: &str| format!("blocks.{l}.{s}");
        v.push((p("ln1.g"), vec![d], Init::Ones));
        v.push((p("ln1.b"), vec![d], Init::Zeros));
        for w in ["wq", "wk", "wv", "wo"] {
            v.push((p(&format!("attn.{w}")), vec![d, d], Init::Weight));
            v.push((p(&format!("attn.b{}", &w[1..])), vec![d], Init::Zeros));
        }
        v.push((p("ln2.g"), vec![d], Init::Ones));
        v.push((p("ln2.b"), vec![d], Init::Zeros));
        v.push((p("mlp.w1"), vec![d, cfg.mlp_hidden], Init::Weight));
        v.push((p("mlp.b1"), vec![cfg.mlp_hidden], Init::Zeros));
        v.push((p("mlp.w2"), vec![cfg.mlp_hidden, d], Init::Weight));
        v.push((p("mlp.b2"), vec![d], Init::Zeros));
    }
    v.push(("norm.g".into(), vec![d], Init::Ones));
    v.push(("norm.b".into(), vec![d], Init::Zeros));
    v.push(("proj.w1".into(), vec![d, pj], Init::Weight));
    v.push(("proj.b1".into(), vec![pj], Init::Zeros));
    v.push(("proj.w2".into(), vec![pj, pj], Init::Weight));
    v.push(("proj.b2".into(), vec![pj], Init::Zeros));
    v.push(("proj.w3".into(), vec![pj, cfg.out_dim], Init::Weight));
    v.push(("proj.b3".into(), vec![cfg.out_dim], Init::Zeros));
    v
}

/// Every learnable array of one network (backbone and projector).
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    config: BackboneConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ModelParams {
    /// Random initialisation from `seed`.
    pub fn init(config: &BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::derived(seed, &[rng::purpose::INIT]);
        let (names, tensors) = layout(config)
            .into_iter()
            .map(|(name, shape, init)| {
                let t = match init {
                    Init::Weight => Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut r),
                    Init::Zeros => Tensor::zeros(&shape),
                    Init::Ones => Tensor::full(&shape, 1.0),
                    Init::Token => Tensor::randn(&shape, 0.02, &mut r),
                };
                (name, t)
            })
            .unzip();
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    /// All parameters zero.
    pub fn zeros(config: &BackboneConfig) -> Result<Self> {
        config.validate()?;
        let (names, tensors) = layout(config)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .unzip();
        Ok(Self::assemble(config.clone(), names, tensors))
    }

    fn assemble(config: BackboneConfig, names: Vec<String>, tensors: Vec<Tensor>) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            config,
            names,
            tensors,
            index,
        }
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Weight matrices receive weight decay; biases, norms and the class
    /// token do not.
    pub fn decays(&self, i: usize) -> bool {
        self.tensors[i].rank() >= 2 && self.names[i] != "cls"
    }

    pub fn same_shapes(&self, other: &ModelParams) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    /// Registers every array on `tape`, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { params: self, vars }
    }

    /// Appends the config and arrays (names prefixed) to an archive.
    pub fn write_archive(&self, a: &mut Archive, prefix: &str) {
        self.config.write_meta(a);
        for (n, t) in self.iter() {
            a.push(format!("{prefix}{n}"), t.clone());
        }
    }

    /// Reads a network stored under `prefix`.
    pub fn read_archive(a: &mut Archive, prefix: &str) -> Result<Self> {
        let config = BackboneConfig::read_meta(a)?;
        let mut out = Self::zeros(&config)?;
        for i in 0..out.names.len() {
            let key = format!("{prefix}{}", out.names[i]);
            let t = a.take_array(&key)?;
            if t.shape() != out.tensors[i].shape() {
                return Err(Error::Format(format!(
                    "array {key} has shape {:?}, expected {:?}",
                    t.shape(),
                    out.tensors[i].shape()
                )));
            }
            out.tensors[i] = t;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut a = Archive::new();
        a.set_meta("kind", "model");
        self.write_archive(&mut a, "");
        a.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut a = Archive::load(path)?;
        Self::read_archive(&mut a, "")
    }
}

/// Parameters registered on a tape.
pub struct Bound<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn config(&self) -> &BackboneConfig {
        &self.params.config
    }

    /// Tape handle for a named parameter. Names come from the fixed layout.
    pub fn var(&self, name: &str) -> Var {
        let i = self.params.index[name];
        self.vars[i]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_finite() {
        let cfg = BackboneConfig::default();
        let a = ModelParams::init(&cfg, 3).unwrap();
        let b = ModelParams::init(&cfg, 3).unwrap();
        let c = ModelParams::init(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        assert!(a.same_shapes(&c));
    }

    #[test]
    fn heads_must_divide_dim() {
        let cfg = BackboneConfig {
            dim: 30,
            heads: 8,
            ..BackboneConfig::default()
        };
        assert!(matches!(ModelParams::init(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn decay_mask_skips_vectors_and_token() {
        let p = ModelParams::init(&BackboneConfig::default(), 0).unwrap();
        for (i, n) in p.names().iter().enumerate() {
            let expect = n.contains(".w") && !n.contains("ln");
            assert_eq!(p.decays(i), expect, "{n}");
        }
    }

    #[test]
    fn file_round_trip() {
        let cfg = BackboneConfig {
            dim: 16,
            heads: 4,
            depth: 1,
            mlp_hidden: 8,
            patch_hidden: 8,
            projector_hidden: 8,
            out_dim: 4,
            ..BackboneConfig::default()
        };
        let p = ModelParams::init(&cfg, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        p.save(&path).unwrap();
        assert_eq!(ModelParams::load(&path).unwrap(), p);
    }
}
