//! Class-token attention maps painted onto points, exported as ASCII PLY.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::backbone::{forward, ModelParams};
use crate::error::{Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::rng::{self, purpose};

/// Attention of the class token over patches for one head.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadMap {
    pub head: usize,
    /// Class-to-patch weights with the class-to-class entry removed,
    /// renormalized to sum to 1.
    pub patch_weights: Vec<f64>,
    /// Per-point weight: the largest weight among patches containing the
    /// point, 0 for points in no patch.
    pub point_weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub layer: usize,
    pub seed: u64,
    pub heads: Vec<HeadMap>,
}

/// Class-token attention of `layer` (default: the last one) for every head.
pub fn class_attention(
    cloud: &PointCloud,
    params: &ModelParams,
    layer: Option<usize>,
    seed: u64,
) -> Result<AttentionMaps> {
    let cfg = params.config();
    let layer = layer.unwrap_or(cfg.depth - 1);
    if layer >= cfg.depth {
        return Err(Error::Parameter(format!(
            "layer {layer} out of range, backbone has {} layers",
            cfg.depth
        )));
    }
    let f = forward(
        cloud,
        params,
        &mut rng::derived(seed, &[purpose::ATTENTION]),
    )?;
    let t = f.patches.count() + 1;
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let start = ((layer * cfg.heads + h) * t) * t;
        let row = &f.attention.data()[start..start + t];
        let mass: f64 = row[1..].iter().sum();
        if mass.is_nan() || mass <= 0.0 {
            return Err(Error::Numeric(format!(
                "head {h} puts no attention on patches"
            )));
        }
        let patch_weights: Vec<f64> = row[1..].iter().map(|w| w / mass).collect();
        let mut point_weights = vec![0.0; cloud.len()];
        for (members, &w) in f.patches.members.iter().zip(&patch_weights) {
            for &i in members {
                point_weights[i] = f64::max(point_weights[i], w);
            }
        }
        heads.push(HeadMap {
            head: h,
            patch_weights,
            point_weights,
        });
    }
    Ok(AttentionMaps { layer, seed, heads })
}

/// Blue to red heat ramp for `t ∈ [0, 1]`.
pub fn heat_color(t: f64) -> [u8; 3] {
    let t = t.clamp(0.0, 1.0);
    let g = 1.0 - (2.0 * t - 1.0).abs();
    [t, g, 1.0 - t].map(|c| (c * 255.0).round() as u8)
}

/// ASCII PLY with `x y z red green blue weight` per vertex. Colors encode
/// the weight relative to the largest weight in the cloud.
pub fn write_ply(points: &[Point], weights: &[f64], comments: &[String]) -> Result<String> {
    if points.len() != weights.len() {
        return Err(Error::Dimension("one weight per point required".into()));
    }
    let top = weights.iter().copied().fold(0.0, f64::max);
    let mut s = String::from("ply\nformat ascii 1.0\n");
    for c in comments {
        if c.contains('\n') {
            return Err(Error::Format("PLY comments must be single lines".into()));
        }
        let _ = writeln!(s, "comment {c}");
    }
    let _ = writeln!(s, "element vertex {}", points.len());
    for p in ["x", "y", "z"] {
        let _ = writeln!(s, "property double {p}");
    }
    for p in ["red", "green", "blue"] {
        let _ = writeln!(s, "property uchar {p}");
    }
    s.push_str("property double weight\nend_header\n");
    for (p, &w) in points.iter().zip(weights) {
        let [r, g, b] = heat_color(if top > 0.0 { w / top } else { 0.0 });
        let _ = writeln!(s, "{:?} {:?} {:?} {r} {g} {b} {w:?}", p[0], p[1], p[2]);
    }
    Ok(s)
}

/// Vertices read back from an ASCII PLY file.
#[derive(Clone, Debug, PartialEq)]
pub struct PlyVertices {
    pub comments: Vec<String>,
    pub properties: Vec<String>,
    /// One row per vertex, in property order.
    pub rows: Vec<Vec<f64>>,
}

impl PlyVertices {
    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.properties.iter().position(|p| p == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}

/// Minimal reader for ASCII PLY files with a single vertex element of
/// scalar properties.
pub fn parse_ply(text: &str) -> Result<PlyVertices> {
    let bad = |line: usize, m: String| Error::Parse { line, message: m };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "ply")) => {}
        _ => return Err(bad(1, "missing ply magic".into())),
    }
    let mut comments = Vec::new();
    let mut properties = Vec::new();
    let mut count = None;
    let mut ascii = false;
    loop {
        let (i, l) = lines
            .next()
            .ok_or_else(|| bad(0, "header not terminated".into()))?;
        let toks: Vec<&str> = l.split_whitespace().collect();
        match toks.as_slice() {
            ["format", "ascii", "1.0"] => ascii = true,
            ["comment", ..] => comments.push(l["comment".len()..].trim_start().to_string()),
            ["element", "vertex", n] => {
                count = Some(
                    n.parse::<usize>()
                        .map_err(|_| bad(i + 1, format!("bad count {n}")))?,
                )
            }
            ["element", other, ..] => {
                return Err(bad(i + 1, format!("unsupported element {other}")))
            }
            ["property", "list", ..] => {
                return Err(bad(i + 1, "list properties unsupported".into()))
            }
            ["property", _ty, name] => properties.push(name.to_string()),
            ["end_header"] => break,
            _ => return Err(bad(i + 1, format!("unexpected header line {l:?}"))),
        }
    }
    if !ascii {
        return Err(bad(2, "only ascii 1.0 PLY is supported".into()));
    }
    let count = count.ok_or_else(|| bad(0, "no vertex element".into()))?;
    let mut rows = Vec::with_capacity(count);
    for _ in 0..count {
        let (i, l) = lines
            .next()
            .ok_or_else(|| bad(0, "fewer vertices than declared".into()))?;
        let row: Vec<f64> = l
            .split_whitespace()
            .map(|t| {
                t.parse::<f64>()
                    .map_err(|_| bad(i + 1, format!("bad value {t:?}")))
            })
            .collect::<Result<_>>()?;
        if row.len() != properties.len() {
            return Err(bad(
                i + 1,
                format!("{} values for {} properties", row.len(), properties.len()),
            ));
        }
        rows.push(row);
    }
    Ok(PlyVertices {
        comments,
        properties,
        rows,
    })
}

/// Writes one PLY per head as `<dir>/<stem>_head<h>.ply`. Metadata lines
/// (layer, head, seed, plus any `extra`) are stored as PLY comments.
pub fn export_attention(
    cloud: &PointCloud,
    params: &ModelParams,
    layer: Option<usize>,
    seed: u64,
    dir: &Path,
    stem: &str,
    extra: &[String],
) -> Result<(AttentionMaps, Vec<PathBuf>)> {
    let maps = class_attention(cloud, params, layer, seed)?;
    fs::create_dir_all(dir)?;
    let final_layer = maps.layer + 1 == params.config().depth;
    let mut paths = Vec::with_capacity(maps.heads.len());
    for h in &maps.heads {
        let mut comments = vec![
            format!("layer {}", maps.layer),
            format!("final_layer {final_layer}"),
            format!("head {}", h.head),
            format!("seed {seed}"),
        ];
        comments.extend(extra.iter().cloned());
        let text = write_ply(&cloud.points, &h.point_weights, &comments)?;
        let path = dir.join(format!("{stem}_head{}.ply", h.head));
        fs::write(&path, text)?;
        paths.push(path);
    }
    Ok((maps, paths))
}
