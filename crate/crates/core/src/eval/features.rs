use std::collections::BTreeMap;

use crate::autodiff::{Tape, Tensor};
use crate::backbone::{forward_patches, patchify, ModelParams, Patches};
use crate::error::{Error, Result};
use crate::geometry::PointCloud;
use crate::rng::{self, purpose};

/// Backbone features, one row per cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    /// `[M, D]`.
    pub rows: Tensor,
    pub labels: Vec<Option<usize>>,
}

impl FeatureMatrix {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Clouds forwarded per tape.
const CHUNK: usize = 32;

/// Class-token features of every full cloud. Each cloud draws its patch
/// centroids from the same `seed`-derived stream, so a row depends only on
/// its cloud and never on its position or neighbours.
pub fn extract_features(
    clouds: &[PointCloud],
    params: &ModelParams,
    seed: u64,
) -> Result<FeatureMatrix> {
    let cfg = params.config();
    let patches: Vec<Patches> = clouds
        .iter()
        .map(|c| {
            patchify(
                c,
                cfg.k_patch,
                &mut rng::derived(seed, &[purpose::FEATURES]),
            )
        })
        .collect::<Result<_>>()?;
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in patches.iter().enumerate() {
        groups.entry(p.count()).or_default().push(i);
    }
    let d = cfg.dim;
    let mut rows = vec![0.0; clouds.len() * d];
    for idx in groups.values() {
        for chunk in idx.chunks(CHUNK) {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, false);
            let batch: Vec<&Patches> = chunk.iter().map(|&i| &patches[i]).collect();
            let out = forward_patches(&mut tape, &bound, &batch)?;
            let f = tape.value(out.features);
            for (r, &i) in chunk.iter().enumerate() {
                rows[i * d..(i + 1) * d].copy_from_slice(f.row(r));
            }
        }
    }
    let rows = Tensor::new(vec![clouds.len(), d], rows)?;
    if !rows.all_finite() {
        return Err(Error::Numeric("non-finite backbone features".into()));
    }
    Ok(FeatureMatrix {
        rows,
        labels: clouds.iter().map(|c| c.label).collect(),
    })
}
