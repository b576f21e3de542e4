//! Point-cloud vision transformer.
//!
//! A cloud is split into `S = ⌊N / k⌋` patches (FPS centroids plus their k
//! nearest neighbours). Each patch is embedded by a per-point MLP followed by
//! a column-wise max-pool, a learnable class token is prepended, and the
//! sequence runs through `L` pre-norm transformer blocks. The final class
//! token is the backbone feature; a three-layer MLP projector maps it to the
//! K logits used by the distillation loss.
//!
//! Forward functions work on batches of `C` equally shaped patch sets so one
//! tape covers many crops with large matrix products.

pub mod archive;
mod params;

use rand::Rng;

pub use params::{BackboneConfig, Bound, ModelParams};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};
use crate::geometry::{fps, knn, Point, PointCloud};

/// `S` patches of `k` points, each re-centered on its centroid.
#[derive(Clone, Debug, PartialEq)]
pub struct Patches {
    pub k: usize,
    pub centers: Vec<Point>,
    /// Cloud indices of each patch's members, nearest first.
    pub members: Vec<Vec<usize>>,
    /// Re-centered member coordinates, `S·k` rows.
    pub offsets: Vec<Point>,
}

impl Patches {
    pub fn count(&self) -> usize {
        self.centers.len()
    }

    /// Per-point network input, `[S·k, 3]` or `[S·k, 6]` with the centroid
    /// appended.
    pub fn input(&self, centroid_channels: bool) -> Tensor {
        let c = if centroid_channels { 6 } else { 3 };
        let mut data = Vec::with_capacity(self.offsets.len() * c);
        for (i, p) in self.offsets.iter().enumerate() {
            data.extend_from_slice(p);
            if centroid_channels {
                data.extend_from_slice(&self.centers[i / self.k]);
            }
        }
        Tensor::new(vec![self.offsets.len(), c], data).expect("patch input shape")
    }
}

/// Groups a cloud into `⌊N / k_patch⌋` kNN patches around FPS centroids.
pub fn patchify<R: Rng + ?Sized>(
    cloud: &PointCloud,
    k_patch: usize,
    rng: &mut R,
) -> Result<Patches> {
    if k_patch == 0 || cloud.len() < k_patch {
        return Err(Error::DegenerateInput(format!(
            "cloud of {} points cannot form a patch of {k_patch}",
            cloud.len()
        )));
    }
    let s = cloud.len() / k_patch;
    let centroids = fps(cloud, s, rng)?;
    let mut centers = Vec::with_capacity(s);
    let mut members = Vec::with_capacity(s);
    let mut offsets = Vec::with_capacity(s * k_patch);
    for &ci in &centroids {
        let c = cloud.points[ci];
        let idx = knn(cloud, &c, k_patch)?;
        for &j in &idx {
            let p = cloud.points[j];
            offsets.push([p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
        }
        centers.push(c);
        members.push(idx);
    }
    Ok(Patches {
        k: k_patch,
        centers,
        members,
        offsets,
    })
}

fn linear(tape: &mut Tape, p: &Bound, x: Var, w: &str, b: &str) -> Result<Var> {
    let y = tape.matmul(x, p.var(w))?;
    tape.add_bias(y, p.var(b))
}

/// Patch tokens from stacked per-point inputs `[C·S·k, c_in]`, giving
/// `[C·S, D]`.
pub fn embed_patches(tape: &mut Tape, p: &Bound, input: Var, k: usize) -> Result<Var> {
    let rows = tape.shape(input)[0];
    if k == 0 || !rows.is_multiple_of(k) {
        return dim_err(format!("{rows} points do not split into patches of {k}"));
    }
    let h = linear(tape, p, input, "patch.w1", "patch.b1")?;
    let h = tape.gelu(h);
    let h = linear(tape, p, h, "patch.w2", "patch.b2")?;
    let d = p.config().dim;
    let h = tape.reshape(h, &[rows / k, k, d])?;
    tape.max_over_axis(h, 1)
}

/// Encoder output for a batch of `C` sequences.
pub struct Encoded {
    /// Final class-token embedding, `[C, D]`.
    pub class_feature: Var,
    /// Attention probabilities per layer, each `[C·H, T, T]` with `T = S + 1`.
    pub attention: Vec<Var>,
}

/// Prepends the class token to `tokens: [C, S, D]` and runs the blocks.
pub fn encode(tape: &mut Tape, p: &Bound, tokens: Var) -> Result<Encoded> {
    let cfg = p.config().clone();
    let (c, s, d) = match *tape.shape(tokens) {
        [c, s, d] if d == cfg.dim && s >= 1 => (c, s, d),
        ref other => {
            return dim_err(format!(
                "encode expects [C, S>=1, {}], got {other:?}",
                cfg.dim
            ))
        }
    };
    let t = s + 1;
    let (h, dh) = (cfg.heads, cfg.head_dim());

    let ones = tape.constant(Tensor::full(&[c, 1], 1.0));
    let cls = tape.matmul(ones, p.var("cls"))?;
    let cls = tape.reshape(cls, &[c, 1, d])?;
    let mut x = tape.concat(&[cls, tokens], 1)?;

    let mut attention = Vec::with_capacity(cfg.depth);
    for l in 0..cfg.depth {
        let key = |s: &str| format!("blocks.{l}.{s}");

        let n = tape.layer_norm(x, p.var(&key("ln1.g")), p.var(&key("ln1.b")))?;
        let n = tape.reshape(n, &[c * t, d])?;
        let heads = |tape: &mut Tape, w: &str, b: &str, perm: &[usize], last: [usize; 2]| {
            let y = linear(tape, p, n, &key(w), &key(b))?;
            let y = tape.reshape(y, &[c, t, h, dh])?;
            let y = tape.permute(y, perm)?;
            tape.reshape(y, &[c * h, last[0], last[1]])
        };
        let q = heads(tape, "attn.wq", "attn.bq", &[0, 2, 1, 3], [t, dh])?;
        let k = heads(tape, "attn.wk", "attn.bk", &[0, 2, 3, 1], [dh, t])?;
        let v = heads(tape, "attn.wv", "attn.bv", &[0, 2, 1, 3], [t, dh])?;
        let scores = tape.matmul(q, k)?;
        let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let a = tape.softmax(scores, 1.0)?;
        attention.push(a);
        let ctx = tape.matmul(a, v)?;
        let ctx = tape.reshape(ctx, &[c, h, t, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[c * t, d])?;
        let o = linear(tape, p, ctx, &key("attn.wo"), &key("attn.bo"))?;
        let o = tape.reshape(o, &[c, t, d])?;
        x = tape.add(x, o)?;

        let n = tape.layer_norm(x, p.var(&key("ln2.g")), p.var(&key("ln2.b")))?;
        let n = tape.reshape(n, &[c * t, d])?;
        let f = linear(tape, p, n, &key("mlp.w1"), &key("mlp.b1"))?;
        let f = tape.gelu(f);
        let f = linear(tape, p, f, &key("mlp.w2"), &key("mlp.b2"))?;
        let f = tape.reshape(f, &[c, t, d])?;
        x = tape.add(x, f)?;
    }
    let x = tape.layer_norm(x, p.var("norm.g"), p.var("norm.b"))?;
    let cls = tape.slice(x, 1, 0, 1)?;
    let class_feature = tape.reshape(cls, &[c, d])?;
    Ok(Encoded {
        class_feature,
        attention,
    })
}

/// Projector MLP `D → H → H → K` with GELU, giving unnormalized logits.
pub fn project(tape: &mut Tape, p: &Bound, features: Var) -> Result<Var> {
    let h = linear(tape, p, features, "proj.w1", "proj.b1")?;
    let h = tape.gelu(h);
    let h = linear(tape, p, h, "proj.w2", "proj.b2")?;
    let h = tape.gelu(h);
    linear(tape, p, h, "proj.w3", "proj.b3")
}

/// Batched forward outputs.
pub struct Output {
    /// Backbone features (class token), `[C, D]`.
    pub features: Var,
    /// Projector logits, `[C, K]`.
    pub logits: Var,
    pub attention: Vec<Var>,
}

/// Runs patch embedding, encoder and projector over `C` patch sets that
/// share `S` and `k`.
pub fn forward_patches(tape: &mut Tape, p: &Bound, batch: &[&Patches]) -> Result<Output> {
    let first = match batch.first() {
        Some(f) => *f,
        None => return dim_err("forward over an empty batch"),
    };
    let (s, k) = (first.count(), first.k);
    if batch.iter().any(|b| b.count() != s || b.k != k) {
        return dim_err("patch sets in one batch must share patch count and size");
    }
    let cc = p.config().centroid_channels;
    let cin = p.config().input_channels();
    let mut data = Vec::with_capacity(batch.len() * s * k * cin);
    for b in batch {
        data.extend(b.input(cc).into_data());
    }
    let input = tape.constant(Tensor::new(vec![batch.len() * s * k, cin], data)?);
    let tokens = embed_patches(tape, p, input, k)?;
    let tokens = tape.reshape(tokens, &[batch.len(), s, p.config().dim])?;
    let enc = encode(tape, p, tokens)?;
    let logits = project(tape, p, enc.class_feature)?;
    Ok(Output {
        features: enc.class_feature,
        logits,
        attention: enc.attention,
    })
}

/// Result of a single-cloud forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub feature: Tensor,
    pub logits: Tensor,
    /// `[L, heads, S+1, S+1]`.
    pub attention: Tensor,
    pub patches: Patches,
}

/// Single-cloud forward without gradients.
pub fn forward<R: Rng + ?Sized>(
    cloud: &PointCloud,
    params: &ModelParams,
    rng: &mut R,
) -> Result<Forward> {
    let patches = patchify(cloud, params.config().k_patch, rng)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, false);
    let out = forward_patches(&mut tape, &bound, &[&patches])?;
    let t = patches.count() + 1;
    let cfg = params.config();
    let mut att = Vec::with_capacity(cfg.depth * cfg.heads * t * t);
    for &a in &out.attention {
        att.extend_from_slice(tape.value(a).data());
    }
    Ok(Forward {
        feature: tape.detach(out.features).reshape(&[cfg.dim])?,
        logits: tape.detach(out.logits).reshape(&[cfg.out_dim])?,
        attention: Tensor::new(vec![cfg.depth, cfg.heads, t, t], att)?,
        patches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            k_patch: 8,
            dim: 16,
            depth: 2,
            heads: 4,
            mlp_hidden: 16,
            patch_hidden: 8,
            projector_hidden: 16,
            out_dim: 8,
            centroid_channels: true,
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = rng::stream(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [r.random(), r.random(), r.random()])
                .collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn patch_counts() {
        let p = patchify(&cloud(64, 1), 32, &mut rng::stream(2)).unwrap();
        assert_eq!(p.count(), 2);
        assert!(p.members.iter().all(|m| m.len() == 32));
        let p = patchify(&cloud(2048, 3), 32, &mut rng::stream(4)).unwrap();
        assert_eq!(p.count(), 64);
        assert!(matches!(
            patchify(&cloud(10, 5), 32, &mut rng::stream(0)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn patch_offsets_are_recentered() {
        let c = cloud(40, 6);
        let p = patchify(&c, 8, &mut rng::stream(7)).unwrap();
        for (s, m) in p.members.iter().enumerate() {
            assert_eq!(c.points[m[0]], p.centers[s]);
            assert_eq!(p.offsets[s * 8], [0.0; 3]);
        }
    }

    #[test]
    fn forward_shapes_and_attention_rows() {
        let params = ModelParams::init(&tiny(), 1).unwrap();
        let f = forward(&cloud(40, 8), &params, &mut rng::stream(9)).unwrap();
        assert_eq!(f.feature.shape(), &[16]);
        assert_eq!(f.logits.shape(), &[8]);
        assert_eq!(f.attention.shape(), &[2, 4, 6, 6]);
        for row in f.attention.rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn single_patch_sequence_is_finite() {
        let params = ModelParams::init(&tiny(), 2).unwrap();
        let f = forward(&cloud(8, 10), &params, &mut rng::stream(11)).unwrap();
        assert_eq!(f.attention.shape(), &[2, 4, 2, 2]);
        assert!(f.feature.all_finite() && f.logits.all_finite());
    }

    #[test]
    fn zero_projector_gives_zero_logits() {
        let mut params = ModelParams::init(&tiny(), 3).unwrap();
        for name in [
            "proj.w1", "proj.b1", "proj.w2", "proj.b2", "proj.w3", "proj.b3",
        ] {
            let t = params.get_mut(name).unwrap();
            *t = Tensor::zeros(t.shape());
        }
        let f = forward(&cloud(32, 12), &params, &mut rng::stream(13)).unwrap();
        assert!(f.logits.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batch_of_clouds_matches_individual_forwards() {
        let params = ModelParams::init(&tiny(), 4).unwrap();
        let a = patchify(&cloud(32, 14), 8, &mut rng::stream(15)).unwrap();
        let b = patchify(&cloud(32, 16), 8, &mut rng::stream(17)).unwrap();
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let both = forward_patches(&mut tape, &bound, &[&a, &b]).unwrap();
        let only_b = forward_patches(&mut tape, &bound, &[&b]).unwrap();
        let both = tape.value(both.logits).row(1).to_vec();
        let single = tape.value(only_b.logits).row(0).to_vec();
        for (x, y) in both.iter().zip(&single) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
