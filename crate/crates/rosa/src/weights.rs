//! Weight file reader/writer: an 8-byte little-endian header length, a JSON
//! header mapping tensor names to `{dtype, shape, data_offsets}` (plus an
//! optional `__metadata__` string map), then the raw little-endian payload —
//! a safetensors-compatible subset.
//!
//! Accepted dtypes are F16, F32, and F64; everything widens to f64 on load.
//! Files written here are always F64. Tensor names follow the documented
//! scheme (`embed`, `layers.{l}.wq`, ..., `final_norm`, `head`; rotation
//! files use `rotations.{l}`; merged-model files add `adapters.{l}`), and
//! the model configuration rides in `__metadata__`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mat::{Layout, Mat};
use crate::model::{LayerWeights, Model, ModelConfig};
use crate::rotation::{RotatedModel, RotationMatrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F16,
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F16 => 2,
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "F16" => Ok(Dtype::F16),
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::Schema {
                message: format!("unsupported dtype {other:?} (accepted: F16, F32, F64)"),
            }),
        }
    }
}

#[derive(Debug, Clone)]
struct TensorEntry {
    dtype: Dtype,
    shape: Vec<usize>,
    begin: usize,
    end: usize,
}

/// Parsed weight file: header entries plus raw payload.
#[derive(Debug)]
pub struct WeightFile {
    tensors: BTreeMap<String, TensorEntry>,
    metadata: BTreeMap<String, String>,
    payload: Vec<u8>,
}

#[derive(serde::Deserialize)]
struct RawEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

impl WeightFile {
    pub fn read(path: &Path) -> Result<WeightFile> {
        let mut file = std::fs::File::open(path)?;
        let mut len_bytes = [0u8; 8];
        file.read_exact(&mut len_bytes).map_err(|_| Error::Parse {
            offset: 0,
            message: "file shorter than the 8-byte header length".into(),
        })?;
        let header_len = u64::from_le_bytes(len_bytes);
        let rest_len = file.metadata()?.len().saturating_sub(8);
        if header_len > rest_len {
            return Err(Error::Parse {
                offset: 8,
                message: format!("declared header length {header_len} exceeds remaining {rest_len} bytes"),
            });
        }
        let mut header_bytes = vec![0u8; header_len as usize];
        file.read_exact(&mut header_bytes)?;
        let mut payload = Vec::new();
        file.read_to_end(&mut payload)?;

        let header: serde_json::Map<String, serde_json::Value> =
            serde_json::from_slice(&header_bytes).map_err(|e| Error::Parse {
                offset: 8,
                message: format!("header is not valid JSON: {e}"),
            })?;

        let mut tensors = BTreeMap::new();
        let mut metadata = BTreeMap::new();
        for (name, value) in header {
            if name == "__metadata__" {
                let map: BTreeMap<String, String> =
                    serde_json::from_value(value).map_err(|e| Error::Schema {
                        message: format!("__metadata__ must map strings to strings: {e}"),
                    })?;
                metadata = map;
                continue;
            }
            let raw: RawEntry = serde_json::from_value(value).map_err(|e| Error::Schema {
                message: format!("tensor {name:?}: malformed header entry: {e}"),
            })?;
            let dtype = Dtype::parse(&raw.dtype)?;
            let begin = raw.data_offsets[0] as usize;
            let end = raw.data_offsets[1] as usize;
            if begin > end || end > payload.len() {
                return Err(Error::Schema {
                    message: format!(
                        "tensor {name:?}: offsets [{begin}, {end}) outside payload of {} bytes",
                        payload.len()
                    ),
                });
            }
            let count: usize = raw.shape.iter().product();
            let expected = count * dtype.size();
            if end - begin != expected {
                return Err(Error::Schema {
                    message: format!(
                        "tensor {name:?}: shape {:?} needs {expected} bytes, offsets span {}",
                        raw.shape,
                        end - begin
                    ),
                });
            }
            tensors.insert(
                name,
                TensorEntry {
                    dtype,
                    shape: raw.shape,
                    begin,
                    end,
                },
            );
        }

        // offsets must not overlap
        let mut spans: Vec<(usize, usize, &String)> = tensors
            .iter()
            .map(|(name, t)| (t.begin, t.end, name))
            .collect();
        spans.sort();
        for pair in spans.windows(2) {
            if pair[0].1 > pair[1].0 {
                return Err(Error::Schema {
                    message: format!(
                        "tensors {:?} and {:?} overlap in the payload",
                        pair[0].2, pair[1].2
                    ),
                });
            }
        }

        Ok(WeightFile {
            tensors,
            metadata,
            payload,
        })
    }

    pub fn metadata(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| Error::Schema {
                message: format!("missing metadata key {key:?}"),
            })
    }

    pub fn tensor_names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    /// Reads a tensor widened to f64, validating its shape.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<Vec<f64>> {
        let entry = self.tensors.get(name).ok_or_else(|| Error::Schema {
            message: format!("missing tensor {name:?}"),
        })?;
        if entry.shape != shape {
            return Err(Error::Schema {
                message: format!(
                    "tensor {name:?}: expected shape {shape:?}, file has {:?}",
                    entry.shape
                ),
            });
        }
        let bytes = &self.payload[entry.begin..entry.end];
        let mut out = Vec::with_capacity(shape.iter().product());
        match entry.dtype {
            Dtype::F64 => {
                for c in bytes.chunks_exact(8) {
                    out.push(f64::from_le_bytes(c.try_into().unwrap()));
                }
            }
            Dtype::F32 => {
                for c in bytes.chunks_exact(4) {
                    out.push(f64::from(f32::from_le_bytes(c.try_into().unwrap())));
                }
            }
            Dtype::F16 => {
                for c in bytes.chunks_exact(2) {
                    out.push(f16_to_f64(u16::from_le_bytes(c.try_into().unwrap())));
                }
            }
        }
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::Schema {
                message: format!("tensor {name:?} contains non-finite values"),
            });
        }
        Ok(out)
    }

    fn tensor_mat(&self, name: &str, rows: usize, cols: usize) -> Result<Mat> {
        let data = self.tensor(name, &[rows, cols])?;
        Mat::from_data(rows, cols, Layout::RowMajor, data)
    }
}

/// IEEE 754 half-precision to f64.
fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * (-24f64).exp2(),
        0x1f => {
            if frac == 0.0 {
                sign * f64::INFINITY
            } else {
                f64::NAN
            }
        }
        _ => sign * (1.0 + frac / 1024.0) * f64::from(exp - 15).exp2(),
    }
}

/// Writes tensors (always F64) plus metadata in the container format.
/// Tensors are laid out in the order given, contiguously from offset 0.
pub fn write_weight_file(
    path: &Path,
    tensors: &[(String, Vec<usize>, &[f64])],
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let mut header = serde_json::Map::new();
    if !metadata.is_empty() {
        header.insert(
            "__metadata__".to_string(),
            serde_json::to_value(metadata).expect("string map"),
        );
    }
    let mut offset = 0usize;
    for (name, shape, data) in tensors {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::dim("write_weight_file", count, data.len()));
        }
        let bytes = count * 8;
        header.insert(
            name.clone(),
            serde_json::json!({
                "dtype": "F64",
                "shape": shape,
                "data_offsets": [offset, offset + bytes],
            }),
        );
        offset += bytes;
    }
    let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header)).expect("serializable");

    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for (_, _, data) in tensors {
        for v in *data {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn config_metadata(config: &ModelConfig) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("d".into(), config.d.to_string());
    m.insert("layers".into(), config.layers.to_string());
    m.insert("heads".into(), config.heads.to_string());
    m.insert("kv_groups".into(), config.kv_groups.to_string());
    m.insert("m_ratio".into(), config.m_ratio.to_string());
    m.insert("vocab".into(), config.vocab.to_string());
    m.insert("seed".into(), config.seed.to_string());
    m
}

fn config_from_metadata(wf: &WeightFile) -> Result<ModelConfig> {
    fn parse<T: std::str::FromStr>(wf: &WeightFile, key: &str) -> Result<T> {
        wf.metadata(key)?.parse::<T>().map_err(|_| Error::Schema {
            message: format!("metadata key {key:?} is not a valid number"),
        })
    }
    let config = ModelConfig {
        d: parse(wf, "d")?,
        layers: parse(wf, "layers")?,
        heads: parse(wf, "heads")?,
        kv_groups: parse(wf, "kv_groups")?,
        m_ratio: parse(wf, "m_ratio")?,
        vocab: parse(wf, "vocab")?,
        seed: parse(wf, "seed")?,
    };
    config.validate().map_err(|e| Error::Schema {
        message: format!("metadata config invalid: {e}"),
    })?;
    Ok(config)
}

fn model_tensors(model: &Model) -> Vec<(String, Vec<usize>, &[f64])> {
    let cfg = &model.config;
    let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    out.push(("embed".into(), vec![cfg.vocab, cfg.d], model.embed.data()));
    for (l, lw) in model.layers.iter().enumerate() {
        out.push((format!("layers.{l}.wq"), vec![cfg.d, cfg.d], lw.wq.data()));
        out.push((format!("layers.{l}.wk"), vec![cfg.d_kv(), cfg.d], lw.wk.data()));
        out.push((format!("layers.{l}.wv"), vec![cfg.d_kv(), cfg.d], lw.wv.data()));
        out.push((format!("layers.{l}.wo"), vec![cfg.d, cfg.d], lw.wo.data()));
        out.push((format!("layers.{l}.wup"), vec![cfg.d_ff(), cfg.d], lw.wup.data()));
        out.push((format!("layers.{l}.wgate"), vec![cfg.d_ff(), cfg.d], lw.wgate.data()));
        out.push((format!("layers.{l}.wdown"), vec![cfg.d, cfg.d_ff()], lw.wdown.data()));
        out.push((format!("layers.{l}.attn_norm"), vec![cfg.d], &lw.attn_norm_gain));
        out.push((format!("layers.{l}.mlp_norm"), vec![cfg.d], &lw.mlp_norm_gain));
    }
    out.push(("final_norm".into(), vec![cfg.d], &model.final_norm_gain));
    out.push(("head".into(), vec![cfg.vocab, cfg.d], model.head.data()));
    out
}

/// Saves a model (tensors all F64, row-major).
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    model.validate()?;
    write_weight_file(path, &model_tensors(model), &config_metadata(&model.config))
}

fn load_model_from(wf: &WeightFile) -> Result<Model> {
    let cfg = config_from_metadata(wf)?;
    let embed = wf.tensor_mat("embed", cfg.vocab, cfg.d)?;
    let mut layers = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        layers.push(LayerWeights {
            wq: wf.tensor_mat(&format!("layers.{l}.wq"), cfg.d, cfg.d)?,
            wk: wf.tensor_mat(&format!("layers.{l}.wk"), cfg.d_kv(), cfg.d)?,
            wv: wf.tensor_mat(&format!("layers.{l}.wv"), cfg.d_kv(), cfg.d)?,
            wo: wf.tensor_mat(&format!("layers.{l}.wo"), cfg.d, cfg.d)?,
            wup: wf.tensor_mat(&format!("layers.{l}.wup"), cfg.d_ff(), cfg.d)?,
            wgate: wf.tensor_mat(&format!("layers.{l}.wgate"), cfg.d_ff(), cfg.d)?,
            wdown: wf.tensor_mat(&format!("layers.{l}.wdown"), cfg.d, cfg.d_ff())?,
            attn_norm_gain: wf.tensor(&format!("layers.{l}.attn_norm"), &[cfg.d])?,
            mlp_norm_gain: wf.tensor(&format!("layers.{l}.mlp_norm"), &[cfg.d])?,
        });
    }
    let model = Model {
        config: cfg,
        embed,
        layers,
        final_norm_gain: wf.tensor("final_norm", &[cfg.d])?,
        head: wf.tensor_mat("head", cfg.vocab, cfg.d)?,
    };
    model.validate().map_err(|e| Error::Schema {
        message: format!("loaded model invalid: {e}"),
    })?;
    Ok(model)
}

/// Loads a model, widening F16/F32 tensors to f64.
pub fn load_model(path: &Path) -> Result<Model> {
    load_model_from(&WeightFile::read(path)?)
}

/// Saves per-layer rotations as `rotations.{l}`.
pub fn save_rotations(rotations: &[RotationMatrix], config: &ModelConfig, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
    for (l, r) in rotations.iter().enumerate() {
        if r.dim() != config.d {
            return Err(Error::dim("save_rotations", config.d, r.dim()));
        }
        tensors.push((format!("rotations.{l}"), vec![config.d, config.d], r.mat().data()));
    }
    write_weight_file(path, &tensors, &config_metadata(config))
}

/// Loads rotations, re-validating orthogonality.
pub fn load_rotations(path: &Path) -> Result<Vec<RotationMatrix>> {
    let wf = WeightFile::read(path)?;
    let cfg = config_from_metadata(&wf)?;
    let mut rotations = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let q = wf.tensor_mat(&format!("rotations.{l}"), cfg.d, cfg.d)?;
        rotations.push(RotationMatrix::new(q)?);
    }
    Ok(rotations)
}

/// Saves a merged model: the model tensors plus `adapters.{l}` and the
/// rotation-applied flags in the metadata.
pub fn save_rotated_model(rm: &RotatedModel, path: &Path) -> Result<()> {
    rm.model.validate()?;
    let cfg = &rm.model.config;
    if rm.adapters.len() + 1 != cfg.layers {
        return Err(Error::dim("save_rotated_model", cfg.layers - 1, rm.adapters.len()));
    }
    let mut tensors = model_tensors(&rm.model);
    for (l, a) in rm.adapters.iter().enumerate() {
        tensors.push((format!("adapters.{l}"), vec![cfg.d, cfg.d], a.data()));
    }
    let mut metadata = config_metadata(cfg);
    metadata.insert("embed_rotation_applied".into(), rm.embed_rotation_applied.to_string());
    metadata.insert("head_rotation_applied".into(), rm.head_rotation_applied.to_string());
    write_weight_file(path, &tensors, &metadata)
}

pub fn load_rotated_model(path: &Path) -> Result<RotatedModel> {
    let wf = WeightFile::read(path)?;
    let model = load_model_from(&wf)?;
    let cfg = &model.config;
    let mut adapters = Vec::with_capacity(cfg.layers - 1);
    for l in 0..cfg.layers - 1 {
        adapters.push(wf.tensor_mat(&format!("adapters.{l}"), cfg.d, cfg.d)?);
    }
    let parse_flag = |key: &str| -> Result<bool> {
        wf.metadata(key)?.parse::<bool>().map_err(|_| Error::Schema {
            message: format!("metadata key {key:?} is not a boolean"),
        })
    };
    Ok(RotatedModel {
        model,
        adapters,
        embed_rotation_applied: parse_flag("embed_rotation_applied")?,
        head_rotation_applied: parse_flag("head_rotation_applied")?,
    })
}

/// Reads raw 32-bit little-endian token ids and splits them into `seqs`
/// sequences of `len` tokens.
pub fn load_token_file(path: &Path, seqs: usize, len: usize) -> Result<Vec<Vec<u32>>> {
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Parse {
            offset: (bytes.len() - bytes.len() % 4) as u64,
            message: "token file length is not a multiple of 4".into(),
        });
    }
    let ids: Vec<u32> = bytes
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if ids.len() < seqs * len {
        return Err(Error::Schema {
            message: format!("token file has {} ids, need {}", ids.len(), seqs * len),
        });
    }
    Ok((0..seqs).map(|s| ids[s * len..(s + 1) * len].to_vec()).collect())
}
