//! On-disk artifacts: manifest, hierarchy, core and network weights.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::expansion::PgmCore;
use crate::nn::{Activation, AdamState, Head, MaskedLayer, Metrics, Net, Tap, TrainReport, TrainState};
use crate::skeleton::Hierarchy;

/// Writes `bytes` next to `path` and renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Bundle(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    f.write_all(bytes)
        .map_err(|e| Error::io(tmp.display().to_string(), e))?;
    f.sync_all().map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Bumped whenever an artifact layout changes.
pub const FORMAT_VERSION: u32 = 1;

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Bundle(format!("{}: {e}", path.display())))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub config_hash: String,
    pub seed: u64,
    /// Most recent stage that wrote into the bundle.
    pub stage: String,
    /// Files written per stage, relative to the bundle directory.
    pub artifacts: BTreeMap<String, Vec<String>>,
    pub config: PipelineConfig,
}

/// A pipeline output directory.
#[derive(Debug, Clone)]
pub struct Bundle {
    root: PathBuf,
}

impl Bundle {
    pub const MANIFEST: &'static str = "manifest.json";
    pub const HIERARCHY: &'static str = "hierarchy.json";
    pub const CORE: &'static str = "core.json";
    pub const GRAPH: &'static str = "core.dot";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn manifest(&self) -> Result<Option<Manifest>> {
        let p = self.path(Self::MANIFEST);
        if !p.exists() {
            return Ok(None);
        }
        let m: Manifest = load_json(&p)?;
        if m.format_version != FORMAT_VERSION {
            return Err(Error::Bundle(format!(
                "{} has format version {}, this build reads {FORMAT_VERSION}",
                p.display(),
                m.format_version
            )));
        }
        Ok(Some(m))
    }

    /// Records `stage` and its files. Artifacts of other stages are kept
    /// only while the config hash is unchanged.
    pub fn record(&self, stage: &str, files: &[String], config: &PipelineConfig) -> Result<()> {
        let hash = config.semantic_hash();
        let mut artifacts = match self.manifest()? {
            Some(m) if m.config_hash == hash => m.artifacts,
            _ => BTreeMap::new(),
        };
        artifacts.insert(stage.to_string(), files.to_vec());
        save_json(
            &self.path(Self::MANIFEST),
            &Manifest {
                format_version: FORMAT_VERSION,
                config_hash: hash,
                seed: config.seed,
                stage: stage.to_string(),
                artifacts,
                config: config.clone(),
            },
        )
    }

    pub fn save_hierarchy(&self, h: &Hierarchy) -> Result<()> {
        save_json(&self.path(Self::HIERARCHY), h)
    }

    pub fn load_hierarchy(&self) -> Result<Hierarchy> {
        load_json(&self.path(Self::HIERARCHY))
    }

    pub fn save_core(&self, core: &PgmCore) -> Result<()> {
        save_json(&self.path(Self::CORE), core)
    }

    pub fn load_core(&self) -> Result<PgmCore> {
        let core: PgmCore = load_json(&self.path(Self::CORE))?;
        core.validate()?;
        Ok(core)
    }

    fn weights_stem(name: &str) -> String {
        format!("weights/{name}")
    }

    pub fn save_net(&self, name: &str, net: &Net<f32>) -> Result<Vec<String>> {
        let stem = Self::weights_stem(name);
        let mut blob = Vec::new();
        let header = NetHeader::encode(net, &mut blob);
        write_blob(&self.path(&format!("{stem}.bin")), &blob)?;
        save_json(
            &self.path(&format!("{stem}.json")),
            &WeightsFile {
                format_version: FORMAT_VERSION,
                blob: format!("{name}.bin"),
                floats: blob.len(),
                net: header,
            },
        )?;
        Ok(vec![format!("{stem}.json"), format!("{stem}.bin")])
    }

    pub fn load_net(&self, name: &str) -> Result<Net<f32>> {
        let stem = Self::weights_stem(name);
        let file: WeightsFile = load_json(&self.path(&format!("{stem}.json")))?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Bundle(format!(
                "weights {name} have format version {}",
                file.format_version
            )));
        }
        let blob = read_blob(&self.path(&format!("weights/{}", file.blob)), file.floats)?;
        let mut cursor = 0;
        file.net.decode(&blob, &mut cursor)
    }

    pub fn has_net(&self, name: &str) -> bool {
        self.path(&format!("{}.json", Self::weights_stem(name))).exists()
    }

    fn checkpoint_stem(name: &str) -> String {
        format!("checkpoints/{name}")
    }

    pub fn save_checkpoint(&self, name: &str, st: &TrainState<f32>) -> Result<()> {
        let stem = Self::checkpoint_stem(name);
        let mut blob = Vec::new();
        let net = NetHeader::encode(&st.net, &mut blob);
        let best = NetHeader::encode(&st.best, &mut blob);
        for (m, v) in st.adam.m_w.iter().zip(&st.adam.v_w) {
            blob.extend(m.iter());
            blob.extend(v.iter());
        }
        for (m, v) in st.adam.m_b.iter().zip(&st.adam.v_b) {
            blob.extend(m.iter());
            blob.extend(v.iter());
        }
        write_blob(&self.path(&format!("{stem}.bin")), &blob)?;
        save_json(
            &self.path(&format!("{stem}.json")),
            &CheckpointFile {
                format_version: FORMAT_VERSION,
                floats: blob.len(),
                net,
                best,
                adam_step: st.adam.step,
                best_metrics: st.best_metrics,
                stale: st.stale,
                report: st.report.clone(),
            },
        )
    }

    pub fn load_checkpoint(&self, name: &str) -> Result<Option<TrainState<f32>>> {
        let stem = Self::checkpoint_stem(name);
        let json = self.path(&format!("{stem}.json"));
        if !json.exists() {
            return Ok(None);
        }
        let file: CheckpointFile = load_json(&json)?;
        if file.format_version != FORMAT_VERSION {
            return Err(Error::Bundle(format!(
                "checkpoint {name} has format version {}",
                file.format_version
            )));
        }
        let blob = read_blob(&self.path(&format!("{stem}.bin")), file.floats)?;
        let mut cursor = 0;
        let net = file.net.decode(&blob, &mut cursor)?;
        let best = file.best.decode(&blob, &mut cursor)?;
        let mut adam = AdamState::new(&net);
        adam.step = file.adam_step;
        for (m, v) in adam.m_w.iter_mut().zip(adam.v_w.iter_mut()) {
            fill(m.iter_mut(), &blob, &mut cursor)?;
            fill(v.iter_mut(), &blob, &mut cursor)?;
        }
        for (m, v) in adam.m_b.iter_mut().zip(adam.v_b.iter_mut()) {
            fill(m.iter_mut(), &blob, &mut cursor)?;
            fill(v.iter_mut(), &blob, &mut cursor)?;
        }
        if cursor != blob.len() {
            return Err(Error::Bundle(format!("checkpoint {name} has trailing data")));
        }
        Ok(Some(TrainState {
            net,
            adam,
            best,
            best_metrics: file.best_metrics,
            stale: file.stale,
            report: file.report,
        }))
    }

    pub fn clear_checkpoint(&self, name: &str) -> Result<()> {
        for ext in ["json", "bin"] {
            let p = self.path(&format!("{}.{ext}", Self::checkpoint_stem(name)));
            if p.exists() {
                fs::remove_file(&p).map_err(|e| Error::io(p.display().to_string(), e))?;
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
enum LayerRole {
    Trunk,
    Tap { source: usize },
    Output,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LayerHeader {
    role: LayerRole,
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    /// Live inputs per unit; absent for dense layers.
    mask: Option<Vec<Vec<u32>>>,
}

/// Shapes and masks; the values live in the blob, each layer's weights
/// row-major followed by its biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct NetHeader {
    label: String,
    head: Head,
    n_classes: usize,
    layers: Vec<LayerHeader>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WeightsFile {
    format_version: u32,
    blob: String,
    floats: usize,
    net: NetHeader,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    floats: usize,
    net: NetHeader,
    best: NetHeader,
    adam_step: u64,
    best_metrics: Option<Metrics>,
    stale: usize,
    report: TrainReport,
}

impl NetHeader {
    fn encode(net: &Net<f32>, blob: &mut Vec<f32>) -> Self {
        let roles = net
            .trunk
            .iter()
            .map(|_| LayerRole::Trunk)
            .chain(net.taps.iter().map(|t| LayerRole::Tap { source: t.source }))
            .chain(std::iter::once(LayerRole::Output));
        let layers = net
            .layers()
            .into_iter()
            .zip(roles)
            .map(|(l, role)| {
                blob.extend(l.weights.iter());
                blob.extend(l.bias.iter());
                LayerHeader {
                    role,
                    in_dim: l.in_dim(),
                    out_dim: l.out_dim(),
                    activation: l.activation,
                    mask: l.mask.as_ref().map(|m| {
                        m.rows()
                            .into_iter()
                            .map(|r| r.iter().enumerate().filter(|p| *p.1).map(|p| p.0 as u32).collect())
                            .collect()
                    }),
                }
            })
            .collect();
        Self {
            label: net.label.clone(),
            head: net.head,
            n_classes: net.n_classes,
            layers,
        }
    }

    fn decode(&self, blob: &[f32], cursor: &mut usize) -> Result<Net<f32>> {
        let mut trunk = Vec::new();
        let mut taps = Vec::new();
        let mut output = None;
        for h in &self.layers {
            let mut l = MaskedLayer::dense(h.in_dim, h.out_dim, h.activation);
            if let Some(rows) = &h.mask {
                if rows.len() != h.out_dim {
                    return Err(Error::Bundle("mask rows do not match layer width".into()));
                }
                let mut m = Array2::from_elem((h.out_dim, h.in_dim), false);
                for (o, row) in rows.iter().enumerate() {
                    for &i in row {
                        let i = i as usize;
                        if i >= h.in_dim {
                            return Err(Error::Bundle(format!("mask index {i} out of range")));
                        }
                        m[[o, i]] = true;
                    }
                }
                l.mask = Some(m);
            }
            fill(l.weights.iter_mut(), blob, cursor)?;
            fill(l.bias.iter_mut(), blob, cursor)?;
            if !l.mask_is_clean() {
                return Err(Error::Bundle("stored weights violate their mask".into()));
            }
            match h.role {
                LayerRole::Trunk => trunk.push(l),
                LayerRole::Tap { source } => taps.push(Tap { source, layer: l }),
                LayerRole::Output => output = Some(l),
            }
        }
        let net = Net {
            label: self.label.clone(),
            trunk,
            taps,
            output: output.ok_or_else(|| Error::Bundle("network has no output layer".into()))?,
            head: self.head,
            n_classes: self.n_classes,
        };
        net.validate()
            .map_err(|e| Error::Bundle(format!("stored network is inconsistent: {e}")))?;
        Ok(net)
    }
}

fn fill<'a>(dst: impl Iterator<Item = &'a mut f32>, blob: &[f32], cursor: &mut usize) -> Result<()> {
    for d in dst {
        *d = *blob
            .get(*cursor)
            .ok_or_else(|| Error::Bundle("weight blob is too short".into()))?;
        *cursor += 1;
    }
    Ok(())
}

fn write_blob(path: &Path, floats: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(floats.len() * 4);
    for f in floats {
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

fn read_blob(path: &Path, floats: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    if bytes.len() != floats * 4 {
        return Err(Error::Bundle(format!(
            "{} holds {} bytes, header promises {}",
            path.display(),
            bytes.len(),
            floats * 4
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}
