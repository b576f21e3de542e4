//! Datasets: synthetic primitives, OFF meshes and the `PCB1` container.

pub mod off;
pub mod pcb;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{normalize, PointCloud};
use crate::rng::{self, purpose};

pub use off::{parse_off, sample_mesh, write_off, OffMesh};
pub use pcb::{load_pcb, read_pcb, save_pcb, write_pcb};
pub use synth::{sample_shape, synth_dataset, Shape, SynthConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// Labelled clouds with a train/test assignment per cloud.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub clouds: Vec<PointCloud>,
    pub class_names: Vec<String>,
    pub split: Vec<Split>,
}

impl Dataset {
    pub fn new(
        clouds: Vec<PointCloud>,
        class_names: Vec<String>,
        split: Vec<Split>,
    ) -> Result<Self> {
        if split.len() != clouds.len() {
            return Err(Error::DegenerateInput(format!(
                "{} clouds but {} split entries",
                clouds.len(),
                split.len()
            )));
        }
        for (i, c) in clouds.iter().enumerate() {
            if let Some(l) = c.label {
                if l >= class_names.len() {
                    return Err(Error::DegenerateInput(format!(
                        "cloud {i} has label {l} but only {} classes",
                        class_names.len()
                    )));
                }
            }
        }
        Ok(Self {
            clouds,
            class_names,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.clouds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.split[i] == split)
            .collect()
    }

    pub fn subset(&self, split: Split) -> Vec<PointCloud> {
        self.indices(split)
            .into_iter()
            .map(|i| self.clouds[i].clone())
            .collect()
    }

    /// Labels of every cloud; unlabelled clouds are an error.
    pub fn labels(&self) -> Result<Vec<usize>> {
        self.clouds
            .iter()
            .enumerate()
            .map(|(i, c)| {
                c.label
                    .ok_or_else(|| Error::DegenerateInput(format!("cloud {i} has no label")))
            })
            .collect()
    }

    /// Writes `<stem>.pcb` and the manifest `<stem>.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str, extra: serde_json::Value) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let container = format!("{stem}.pcb");
        save_pcb(&dir.join(&container), &self.clouds)?;
        let manifest = Manifest {
            files: vec![container.clone()],
            class_names: self.class_names.clone(),
            entries: self
                .clouds
                .iter()
                .zip(&self.split)
                .enumerate()
                .map(|(i, (c, &split))| ManifestEntry {
                    file: container.clone(),
                    index: i,
                    label: c.label,
                    split,
                })
                .collect(),
            extra,
        };
        let path = dir.join(format!("{stem}.json"));
        manifest.save(&path)?;
        Ok(path)
    }

    /// Loads from a manifest, or from a bare `.pcb` file (all clouds train,
    /// class names derived from the largest label).
    pub fn load(path: &Path) -> Result<Self> {
        if path.extension().is_some_and(|e| e == "pcb") {
            let clouds = load_pcb(path)?;
            let classes = clouds
                .iter()
                .filter_map(|c| c.label)
                .max()
                .map_or(0, |m| m + 1);
            let split = vec![Split::Train; clouds.len()];
            return Self::new(clouds, (0..classes).map(|c| c.to_string()).collect(), split);
        }
        let manifest = Manifest::load(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut containers = Vec::with_capacity(manifest.files.len());
        for f in &manifest.files {
            containers.push((f.clone(), load_pcb(&base.join(f))?));
        }
        let mut clouds = Vec::with_capacity(manifest.entries.len());
        let mut split = Vec::with_capacity(manifest.entries.len());
        for e in &manifest.entries {
            let (_, data) = containers
                .iter()
                .find(|(f, _)| f == &e.file)
                .ok_or_else(|| {
                    Error::Format(format!("manifest entry names unknown file {}", e.file))
                })?;
            let mut c = data
                .get(e.index)
                .ok_or_else(|| Error::Format(format!("{} has no cloud {}", e.file, e.index)))?
                .clone();
            if c.label != e.label {
                return Err(Error::Format(format!(
                    "label mismatch for {}[{}]",
                    e.file, e.index
                )));
            }
            c.label = e.label;
            clouds.push(c);
            split.push(e.split);
        }
        Self::new(clouds, manifest.class_names, split)
    }
}

/// JSON index of a dataset stored in one or more `PCB1` files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<String>,
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
    /// Generation parameters and seed.
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub file: String,
    pub index: usize,
    pub label: Option<usize>,
    pub split: Split,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, text + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }
}

fn off_files(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            off_files(&p, out)?;
        } else if p.extension().is_some_and(|e| e.eq_ignore_ascii_case("off")) {
            out.push(p);
        }
    }
    Ok(())
}

/// Builds a dataset from a directory tree of OFF meshes laid out as
/// `<root>/<class>/**/*.off`. Files under a directory named `test` go to the
/// test split. Each mesh is surface-sampled and normalized.
pub fn ingest_off_dir(root: &Path, n_points: usize, seed: u64) -> Result<Dataset> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    let mut clouds = Vec::new();
    let mut split = Vec::new();
    let mut names = Vec::new();
    for (c, dir) in classes.iter().enumerate() {
        names.push(
            dir.file_name()
                .unwrap_or_default()
                .to_string_lossy()
                .into_owned(),
        );
        let mut files = Vec::new();
        off_files(dir, &mut files)?;
        for (i, f) in files.iter().enumerate() {
            let text = fs::read_to_string(f)?;
            let mesh = parse_off(&text).map_err(|e| match e {
                Error::Parse { line, message } => Error::Parse {
                    line,
                    message: format!("{}: {message}", f.display()),
                },
                other => other,
            })?;
            let mut r = rng::derived(seed, &[purpose::SYNTH, c as u64, i as u64]);
            let mut cloud = normalize(&sample_mesh(&mesh, n_points, &mut r)?);
            cloud.label = Some(c);
            clouds.push(cloud);
            let test = f
                .strip_prefix(dir)
                .map(|rel| rel.components().any(|p| p.as_os_str() == "test"))
                .unwrap_or(false);
            split.push(if test { Split::Test } else { Split::Train });
        }
    }
    if clouds.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "no OFF files found under {}",
            root.display()
        )));
    }
    Dataset::new(clouds, names, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_roundtrip() {
        let d = synth_dataset(&SynthConfig {
            per_class: 2,
            n_points: 16,
            ..SynthConfig::default()
        })
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let m = d
            .save(dir.path(), "set", serde_json::json!({"seed": 0}))
            .unwrap();
        assert_eq!(Dataset::load(&m).unwrap(), d);
        let bare = Dataset::load(&dir.path().join("set.pcb")).unwrap();
        assert_eq!(bare.clouds, d.clouds);
        assert_eq!(bare.class_names.len(), 6);
    }

    #[test]
    fn off_directory_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let tri = "OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n";
        for (class, sub) in [("a", "train"), ("a", "test"), ("b", "train")] {
            let p = dir.path().join(class).join(sub);
            fs::create_dir_all(&p).unwrap();
            fs::write(p.join("m.off"), tri).unwrap();
        }
        let d = ingest_off_dir(dir.path(), 32, 1).unwrap();
        assert_eq!(d.class_names, vec!["a", "b"]);
        assert_eq!(d.len(), 3);
        assert_eq!(d.split, vec![Split::Test, Split::Train, Split::Train]);
    }

    #[test]
    fn labels_must_fit_classes() {
        let c = PointCloud::new(vec![[0.0; 3]], Some(2)).unwrap();
        assert!(Dataset::new(vec![c], vec!["x".into()], vec![Split::Train]).is_err());
    }
}
