// SPDX-License-Identifier: MIT OR Apache-2.0

//! On-disk interchange: model bundles, glitch lists, config files and
//! channel archives.
//!
//! A bundle is a directory holding one safetensors file, `vocab.json`
//! (token string to id), `meta.json` (`d`, `V`, tied flag) and optionally
//! `glitch.txt`. Tensor names follow the usual
//! `model.layers.{L}.mlp.{gate,up,down}_proj.weight` / `lm_head.weight`
//! layout; f16 and bf16 payloads are widened to f32 on load.
//!
//! An archive is JSON Lines: one header line, then one decomposition per
//! line. Floats use shortest round-trip formatting, so reading an archive
//! and writing it again reproduces it byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Result, RotateError};
use crate::linstats::Unembedding;
use crate::rotate::{Decomposition, NeuronId, Role, RotateConfig, WeightVector};
use crate::vocab::Vocab;

pub const TENSOR_FILE: &str = "model.safetensors";
pub const VOCAB_FILE: &str = "vocab.json";
pub const META_FILE: &str = "meta.json";
pub const GLITCH_FILE: &str = "glitch.txt";
pub const UNEMBEDDING_TENSOR: &str = "lm_head.weight";
/// Fallback for tied-embedding checkpoints that only ship the embedding.
pub const EMBEDDING_TENSOR: &str = "model.embed_tokens.weight";

pub const ARCHIVE_KIND: &str = "rotate-archive";
pub const ARCHIVE_VERSION: u32 = 1;

/// Name of the safetensors tensor holding `role` weights of `layer`.
pub fn tensor_name(layer: u32, role: Role) -> String {
    let proj = match role {
        Role::Gate => "gate",
        Role::In => "up",
        Role::Out => "down",
    };
    format!("model.layers.{layer}.mlp.{proj}_proj.weight")
}

/// Row-major f32 matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(RotateError::DimensionMismatch {
                context: "matrix payload",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        (0..self.rows).map(|i| self.data[i * self.cols + j]).collect()
    }
}

/// Contents of `meta.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMeta {
    #[serde(default)]
    pub model_id: String,
    pub d: usize,
    #[serde(rename = "V", alias = "vocab_size")]
    pub vocab_size: usize,
    #[serde(alias = "tied")]
    pub tied_embeddings: bool,
}

/// A loaded model: unembedding, MLP weights and vocabulary.
///
/// MLP matrices keep their checkpoint orientation: gate and in are
/// `d_a x d` (a neuron is a row), out is `d x d_a` (a neuron is a column).
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub model_id: String,
    pub unembedding: Unembedding,
    pub weights: BTreeMap<(u32, Role), Matrix>,
    pub vocab: Vocab,
    pub tied_embeddings: bool,
    /// Ids from `glitch.txt`, empty when the bundle has none.
    pub glitch_ids: Vec<usize>,
}

impl ModelBundle {
    pub fn dim(&self) -> usize {
        self.unembedding.dim()
    }

    pub fn vocab_size(&self) -> usize {
        self.unembedding.vocab_size()
    }

    pub fn layers(&self) -> BTreeSet<u32> {
        self.weights.keys().map(|&(l, _)| l).collect()
    }

    fn matrix(&self, layer: u32, role: Role) -> Result<&Matrix> {
        self.weights.get(&(layer, role)).ok_or_else(|| RotateError::Tensor {
            name: tensor_name(layer, role),
            reason: "not present in bundle".into(),
        })
    }

    /// Number of neurons (`d_a`) stored for this layer and role.
    pub fn neuron_count(&self, layer: u32, role: Role) -> Result<usize> {
        let m = self.matrix(layer, role)?;
        Ok(if role == Role::Out { m.cols } else { m.rows })
    }

    pub fn neuron(&self, layer: u32, role: Role, index: u32) -> Result<WeightVector> {
        let count = self.neuron_count(layer, role)?;
        let i = index as usize;
        if i >= count {
            return Err(RotateError::InvalidInput(format!(
                "neuron index {index} out of range for {} ({count} neurons)",
                tensor_name(layer, role)
            )));
        }
        let m = self.matrix(layer, role)?;
        let values: Vec<f64> = if role == Role::Out {
            m.column(i).into_iter().map(f64::from).collect()
        } else {
            m.row(i).iter().map(|&x| f64::from(x)).collect()
        };
        Ok(WeightVector {
            id: NeuronId { layer, role, index },
            values,
        })
    }

    /// All neuron vectors of one layer and role, in index order.
    pub fn neurons(&self, layer: u32, role: Role) -> Result<Vec<WeightVector>> {
        let count = self.neuron_count(layer, role)?;
        (0..count as u32).map(|i| self.neuron(layer, role, i)).collect()
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| RotateError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| RotateError::format(path, e.to_string()))
}

fn find_tensor_file(dir: &Path) -> Result<PathBuf> {
    let preferred = dir.join(TENSOR_FILE);
    if preferred.is_file() {
        return Ok(preferred);
    }
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| RotateError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "safetensors"))
        .collect();
    found.sort();
    match found.len() {
        1 => Ok(found.pop().unwrap()),
        0 => Err(RotateError::format(dir, "no .safetensors file in bundle")),
        n => Err(RotateError::format(
            dir,
            format!("{n} .safetensors files in bundle; expected one (or {TENSOR_FILE})"),
        )),
    }
}

fn widen(name: &str, view: &TensorView<'_>) -> Result<Vec<f32>> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32())
            .collect(),
        other => {
            return Err(RotateError::Tensor {
                name: name.to_string(),
                reason: format!("unsupported dtype {other:?} (expected F32, F16 or BF16)"),
            })
        }
    };
    Ok(out)
}

fn load_matrix(tensors: &SafeTensors<'_>, name: &str) -> Result<Matrix> {
    let view = tensors.tensor(name).map_err(|e| RotateError::Tensor {
        name: name.to_string(),
        reason: e.to_string(),
    })?;
    let shape = view.shape();
    if shape.len() != 2 {
        return Err(RotateError::Tensor {
            name: name.to_string(),
            reason: format!("expected a 2-d tensor, got shape {shape:?}"),
        });
    }
    let (rows, cols) = (shape[0], shape[1]);
    Matrix::new(rows, cols, widen(name, &view)?)
}

/// Parse `model.layers.{L}.mlp.{proj}_proj.weight`.
fn parse_mlp_name(name: &str) -> Option<(u32, Role)> {
    let rest = name.strip_prefix("model.layers.")?;
    let (layer, rest) = rest.split_once('.')?;
    let role = match rest {
        "mlp.gate_proj.weight" => Role::Gate,
        "mlp.up_proj.weight" => Role::In,
        "mlp.down_proj.weight" => Role::Out,
        _ => return None,
    };
    Some((layer.parse().ok()?, role))
}

/// Load a bundle directory, validating every shape against `meta.json`.
pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let meta: BundleMeta = read_json(&dir.join(META_FILE))?;
    let token_ids: BTreeMap<String, usize> = read_json(&dir.join(VOCAB_FILE))?;
    let vocab_path = dir.join(VOCAB_FILE);
    if token_ids.len() != meta.vocab_size {
        return Err(RotateError::format(
            &vocab_path,
            format!(
                "vocab has {} entries but the bundle declares V = {}",
                token_ids.len(),
                meta.vocab_size
            ),
        ));
    }
    let vocab =
        Vocab::from_token_ids(&token_ids).map_err(|e| RotateError::format(&vocab_path, e.to_string()))?;

    let tensor_path = find_tensor_file(dir)?;
    let bytes = fs::read(&tensor_path).map_err(|e| RotateError::io(&tensor_path, e))?;
    let tensors =
        SafeTensors::deserialize(&bytes).map_err(|e| RotateError::format(&tensor_path, e.to_string()))?;

    let u_name = if tensors.names().contains(&UNEMBEDDING_TENSOR) || !meta.tied_embeddings {
        UNEMBEDDING_TENSOR
    } else {
        EMBEDDING_TENSOR
    };
    let u = load_matrix(&tensors, u_name)?;
    if u.rows != meta.vocab_size || u.cols != meta.d {
        return Err(RotateError::Tensor {
            name: u_name.to_string(),
            reason: format!(
                "shape [{}, {}] does not match V = {} (vocab) and d = {}",
                u.rows, u.cols, meta.vocab_size, meta.d
            ),
        });
    }
    let unembedding = Unembedding::new(u.rows, u.cols, u.data)?;

    let mut names: Vec<&str> = tensors.names();
    names.sort_unstable();
    let mut weights = BTreeMap::new();
    for name in names {
        let Some((layer, role)) = parse_mlp_name(name) else {
            continue;
        };
        let m = load_matrix(&tensors, name)?;
        let d_side = if role == Role::Out { m.rows } else { m.cols };
        if d_side != meta.d {
            return Err(RotateError::Tensor {
                name: name.to_string(),
                reason: format!("shape [{}, {}] has no axis of model width d = {}", m.rows, m.cols, meta.d),
            });
        }
        weights.insert((layer, role), m);
    }

    let glitch_path = dir.join(GLITCH_FILE);
    let glitch_ids = if glitch_path.is_file() {
        load_glitch_list(&glitch_path)?
    } else {
        Vec::new()
    };

    let model_id = if meta.model_id.is_empty() {
        dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
    } else {
        meta.model_id
    };

    Ok(ModelBundle {
        model_id,
        unembedding,
        weights,
        vocab,
        tied_embeddings: meta.tied_embeddings,
        glitch_ids,
    })
}

fn f32_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Write `bundle` as an f32 bundle directory (created if missing).
pub fn write_bundle(dir: impl AsRef<Path>, bundle: &ModelBundle) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| RotateError::io(dir, e))?;

    let u = &bundle.unembedding;
    let mut payloads: Vec<(String, Vec<usize>, Vec<u8>)> =
        vec![(UNEMBEDDING_TENSOR.to_string(), vec![u.vocab_size(), u.dim()], f32_bytes(u.as_slice()))];
    for (&(layer, role), m) in &bundle.weights {
        payloads.push((tensor_name(layer, role), vec![m.rows, m.cols], f32_bytes(&m.data)));
    }
    let views = payloads
        .iter()
        .map(|(name, shape, bytes)| {
            TensorView::new(Dtype::F32, shape.clone(), bytes)
                .map(|v| (name.clone(), v))
                .map_err(|e| RotateError::Tensor {
                    name: name.clone(),
                    reason: e.to_string(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let tensor_path = dir.join(TENSOR_FILE);
    let bytes = safetensors::serialize(views, None)
        .map_err(|e| RotateError::format(&tensor_path, e.to_string()))?;
    fs::write(&tensor_path, bytes).map_err(|e| RotateError::io(&tensor_path, e))?;

    let meta = BundleMeta {
        model_id: bundle.model_id.clone(),
        d: bundle.dim(),
        vocab_size: bundle.vocab_size(),
        tied_embeddings: bundle.tied_embeddings,
    };
    write_json(&dir.join(META_FILE), &meta)?;
    write_json(&dir.join(VOCAB_FILE), &bundle.vocab.to_token_ids())?;

    if !bundle.glitch_ids.is_empty() {
        let path = dir.join(GLITCH_FILE);
        let text: String = bundle.glitch_ids.iter().map(|id| format!("{id}\n")).collect();
        fs::write(&path, text).map_err(|e| RotateError::io(&path, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| RotateError::format(path, e.to_string()))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| RotateError::io(path, e))
}

/// Read a glitch-token list: a JSON array of ids, or one id per line.
///
/// Blank lines and `#` comments are skipped. The result is sorted and
/// deduplicated; range checks happen when the mask is built.
pub fn load_glitch_list(path: impl AsRef<Path>) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RotateError::io(path, e))?;
    parse_glitch_list(&text).map_err(|reason| RotateError::format(path, reason))
}

fn parse_glitch_list(text: &str) -> std::result::Result<Vec<usize>, String> {
    let ids: BTreeSet<usize> = if text.trim_start().starts_with('[') {
        serde_json::from_str::<Vec<usize>>(text)
            .map_err(|e| format!("invalid JSON id array: {e}"))?
            .into_iter()
            .collect()
    } else {
        let mut ids = BTreeSet::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let id = line
                .parse::<usize>()
                .map_err(|_| format!("line {}: {line:?} is not a token id", n + 1))?;
            ids.insert(id);
        }
        ids
    };
    Ok(ids.into_iter().collect())
}

/// Read a flat config file; `.json` is parsed as JSON, anything else as TOML.
///
/// Missing keys take their default values; unknown keys are rejected.
pub fn load_config(path: impl AsRef<Path>) -> Result<RotateConfig> {
    load_config_over(path, RotateConfig::default())
}

/// Like [`load_config`], but keys missing from the file keep their value
/// in `base` instead of the built-in default.
pub fn load_config_over(path: impl AsRef<Path>, base: RotateConfig) -> Result<RotateConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| RotateError::io(path, e))?;
    let parsed: serde_json::Value = if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| RotateError::format(path, e.to_string()))?
    } else {
        toml::from_str(&text).map_err(|e| RotateError::format(path, e.to_string()))?
    };
    let serde_json::Value::Object(overrides) = parsed else {
        return Err(RotateError::format(path, "config must be a table of flat keys"));
    };
    let mut merged = match serde_json::to_value(base).expect("config serializes") {
        serde_json::Value::Object(map) => map,
        _ => unreachable!("config serializes to an object"),
    };
    merged.extend(overrides);
    let config: RotateConfig = serde_json::from_value(serde_json::Value::Object(merged))
        .map_err(|e| RotateError::format(path, e.to_string()))?;
    config.validate()?;
    Ok(config)
}

/// Hex SHA-256 of the canonical JSON form of `config`.
pub fn config_hash(config: &RotateConfig) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    Sha256::digest(canonical.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// First line of an archive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchiveHeader {
    pub kind: String,
    pub version: u32,
    pub model_id: String,
    pub layer: Option<u32>,
    pub role: Option<Role>,
    pub config_hash: String,
    pub tool_version: String,
    pub config: RotateConfig,
}

impl ArchiveHeader {
    pub fn new(model_id: impl Into<String>, layer: Option<u32>, role: Option<Role>, config: RotateConfig) -> Self {
        Self {
            kind: ARCHIVE_KIND.to_string(),
            version: ARCHIVE_VERSION,
            model_id: model_id.into(),
            layer,
            role,
            config_hash: config_hash(&config),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            config,
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if self.kind != ARCHIVE_KIND {
            return Err(format!("header kind {:?}, expected {ARCHIVE_KIND:?}", self.kind));
        }
        if self.version != ARCHIVE_VERSION {
            return Err(format!("unsupported archive version {}", self.version));
        }
        if self.config_hash != config_hash(&self.config) {
            return Err("header config hash does not match its config snapshot".into());
        }
        Ok(())
    }
}

/// A parsed archive.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelArchive {
    pub header: ArchiveHeader,
    pub records: Vec<Decomposition>,
}

/// Streaming archive writer; records are appended one line at a time.
pub struct ArchiveWriter {
    path: PathBuf,
    out: BufWriter<File>,
    config_hash: String,
    vocab: Option<Vocab>,
}

impl ArchiveWriter {
    /// Create (truncate) `path` and write the header line.
    pub fn create(path: impl AsRef<Path>, header: &ArchiveHeader, vocab: Option<&Vocab>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| RotateError::io(&path, e))?;
        let mut writer = Self {
            config_hash: header.config_hash.clone(),
            out: BufWriter::new(file),
            vocab: vocab.cloned(),
            path,
        };
        writer.write_line(header)?;
        Ok(writer)
    }

    fn write_line<T: Serialize>(&mut self, value: &T) -> Result<()> {
        let line = serde_json::to_string(value).map_err(|e| RotateError::format(&self.path, e.to_string()))?;
        self.out
            .write_all(line.as_bytes())
            .and_then(|()| self.out.write_all(b"\n"))
            .map_err(|e| RotateError::io(&self.path, e))
    }

    /// Append one decomposition, resolving token strings when a vocabulary was given.
    pub fn append(&mut self, decomposition: &Decomposition) -> Result<()> {
        let hash = config_hash(&decomposition.config);
        if hash != self.config_hash {
            return Err(RotateError::InvalidInput(format!(
                "decomposition of {} was run with a different config than the archive header",
                decomposition.neuron
            )));
        }
        match &self.vocab {
            Some(vocab) => {
                let mut resolved = decomposition.clone();
                for c in &mut resolved.channels {
                    for t in c.top_tokens.iter_mut().chain(c.bottom_tokens.iter_mut()) {
                        t.token = vocab.get(t.id).unwrap_or_default().to_string();
                    }
                }
                self.write_line(&resolved)
            }
            None => self.write_line(decomposition),
        }
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| RotateError::io(&self.path, e))
    }
}

/// Write a complete archive.
pub fn write_decompositions(
    path: impl AsRef<Path>,
    header: &ArchiveHeader,
    decompositions: &[Decomposition],
    vocab: Option<&Vocab>,
) -> Result<()> {
    let mut writer = ArchiveWriter::create(path, header, vocab)?;
    for d in decompositions {
        writer.append(d)?;
    }
    writer.finish()
}

/// Read an archive, checking the header and every record's config hash.
pub fn read_archive(path: impl AsRef<Path>) -> Result<ChannelArchive> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| RotateError::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| RotateError::format(path, "empty archive (missing header line)"))?
        .map_err(|e| RotateError::io(path, e))?;
    let header: ArchiveHeader =
        serde_json::from_str(&first).map_err(|e| RotateError::format(path, format!("line 1: {e}")))?;
    header
        .validate()
        .map_err(|reason| RotateError::format(path, format!("line 1: {reason}")))?;

    let mut records = Vec::new();
    let mut last_ok: Option<RotateConfig> = None;
    for (n, line) in lines.enumerate() {
        let line = line.map_err(|e| RotateError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let record: Decomposition = serde_json::from_str(&line)
            .map_err(|e| RotateError::format(path, format!("line {}: {e}", n + 2)))?;
        if last_ok != Some(record.config) && config_hash(&record.config) != header.config_hash {
            return Err(RotateError::format(
                path,
                format!("line {}: record config does not match the header hash", n + 2),
            ));
        }
        last_ok = Some(record.config);
        records.push(record);
    }
    Ok(ChannelArchive { header, records })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glitch_list_parsing() {
        assert_eq!(parse_glitch_list("").unwrap(), Vec::<usize>::new());
        assert_eq!(parse_glitch_list("3\n3\n7").unwrap(), vec![3, 7]);
        assert_eq!(parse_glitch_list("[9, 2, 9]").unwrap(), vec![2, 9]);
        assert_eq!(parse_glitch_list("# ids\n\n4\n").unwrap(), vec![4]);
        let err = parse_glitch_list("1\n2\nx7\n").unwrap_err();
        assert!(err.contains("line 3"), "{err}");
    }

    #[test]
    fn mlp_names() {
        assert_eq!(parse_mlp_name("model.layers.18.mlp.up_proj.weight"), Some((18, Role::In)));
        assert_eq!(parse_mlp_name(&tensor_name(3, Role::Out)), Some((3, Role::Out)));
        assert_eq!(parse_mlp_name("model.layers.0.self_attn.q_proj.weight"), None);
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RotateConfig::default();
        let b = RotateConfig { seed: 1, ..a };
        assert_eq!(config_hash(&a).len(), 64);
        assert_eq!(config_hash(&a), config_hash(&a));
        assert_ne!(config_hash(&a), config_hash(&b));
    }
}
