//! Model container: a directory holding `config.json` plus `weights.bin`.
//!
//! `weights.bin` is a little-endian stream of records, one per tensor:
//!
//! ```text
//! [u32 name_len][name bytes UTF-8][u32 ndim][u32 dims…][f32 row-major data]
//! ```
//!
//! Tensor names are `embed`, `final_norm`, `lm_head`, and per layer
//! `layer.{i}.{wq|wk|wv|wo|w_gate|w_up|w_down|attn_norm|ffn_norm}`.
//! Serialization order is canonical (embed, layers in order with the field
//! order above, final_norm, lm_head) so save → load → save round-trips
//! byte-identically.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{LayerWeights, Model, ModelConfig, ModelError};

const CONFIG_FILE: &str = "config.json";
const WEIGHTS_FILE: &str = "weights.bin";

/// Serializes a model into `dir` (created if absent).
pub fn save_model(model: &Model, dir: &Path) -> Result<(), ModelError> {
    model.config.validate()?;
    std::fs::create_dir_all(dir)?;
    let config_json = serde_json::to_string_pretty(&model.config)
        .map_err(|e| ModelError::MalformedContainer(e.to_string()))?;
    std::fs::write(dir.join(CONFIG_FILE), config_json + "\n")?;

    let file = std::fs::File::create(dir.join(WEIGHTS_FILE))?;
    let mut w = BufWriter::new(file);
    for (name, dims, data) in tensor_entries(model) {
        write_record(&mut w, &name, &dims, data)?;
    }
    w.flush()?;
    Ok(())
}

/// Loads a model container, validating every tensor name and shape.
pub fn load_model(dir: &Path) -> Result<Model, ModelError> {
    let config_text = std::fs::read_to_string(dir.join(CONFIG_FILE))?;
    let config: ModelConfig = serde_json::from_str(&config_text)
        .map_err(|e| ModelError::MalformedContainer(format!("config.json: {e}")))?;
    config.validate()?;

    let file = std::fs::File::open(dir.join(WEIGHTS_FILE))?;
    let mut r = BufReader::new(file);
    let mut tensors: HashMap<String, (Vec<usize>, Vec<f32>)> = HashMap::new();
    while let Some((name, dims, data)) = read_record(&mut r)? {
        tensors.insert(name, (dims, data));
    }

    let mut take = |name: String, expected: &[usize]| -> Result<Vec<f32>, ModelError> {
        let (dims, data) = tensors
            .remove(&name)
            .ok_or_else(|| ModelError::MissingTensor { name: name.clone() })?;
        if dims != expected {
            return Err(ModelError::ShapeMismatch {
                name,
                expected: expected.to_vec(),
                actual: dims,
            });
        }
        Ok(data)
    };

    let d = config.d_model;
    let qd = config.num_heads * config.head_dim;
    let kd = config.num_kv_heads * config.head_dim;
    let ff = config.d_ff();

    let embed = take("embed".into(), &[config.vocab_size, d])?;
    let mut layers = Vec::with_capacity(config.num_layers);
    for i in 0..config.num_layers {
        layers.push(LayerWeights {
            wq: take(format!("layer.{i}.wq"), &[d, qd])?,
            wk: take(format!("layer.{i}.wk"), &[d, kd])?,
            wv: take(format!("layer.{i}.wv"), &[d, kd])?,
            wo: take(format!("layer.{i}.wo"), &[qd, d])?,
            w_gate: take(format!("layer.{i}.w_gate"), &[d, ff])?,
            w_up: take(format!("layer.{i}.w_up"), &[d, ff])?,
            w_down: take(format!("layer.{i}.w_down"), &[ff, d])?,
            attn_norm: take(format!("layer.{i}.attn_norm"), &[d])?,
            ffn_norm: take(format!("layer.{i}.ffn_norm"), &[d])?,
        });
    }
    let final_norm = take("final_norm".into(), &[d])?;
    let lm_head = take("lm_head".into(), &[d, config.vocab_size])?;

    if let Some(name) = tensors.keys().next() {
        return Err(ModelError::MalformedContainer(format!(
            "unexpected tensor {name}"
        )));
    }

    Ok(Model {
        config,
        embed,
        layers,
        final_norm,
        lm_head,
    })
}

/// Canonical (name, dims, data) sequence of a model's tensors.
fn tensor_entries<'m>(model: &'m Model) -> Vec<(String, Vec<usize>, &'m [f32])> {
    let cfg = &model.config;
    let d = cfg.d_model;
    let qd = cfg.num_heads * cfg.head_dim;
    let kd = cfg.num_kv_heads * cfg.head_dim;
    let ff = cfg.d_ff();
    let mut out: Vec<(String, Vec<usize>, &[f32])> = Vec::new();
    out.push(("embed".into(), vec![cfg.vocab_size, d], &model.embed));
    for (i, l) in model.layers.iter().enumerate() {
        out.push((format!("layer.{i}.wq"), vec![d, qd], &l.wq));
        out.push((format!("layer.{i}.wk"), vec![d, kd], &l.wk));
        out.push((format!("layer.{i}.wv"), vec![d, kd], &l.wv));
        out.push((format!("layer.{i}.wo"), vec![qd, d], &l.wo));
        out.push((format!("layer.{i}.w_gate"), vec![d, ff], &l.w_gate));
        out.push((format!("layer.{i}.w_up"), vec![d, ff], &l.w_up));
        out.push((format!("layer.{i}.w_down"), vec![ff, d], &l.w_down));
        out.push((format!("layer.{i}.attn_norm"), vec![d], &l.attn_norm));
        out.push((format!("layer.{i}.ffn_norm"), vec![d], &l.ffn_norm));
    }
    out.push(("final_norm".into(), vec![d], &model.final_norm));
    out.push(("lm_head".into(), vec![d, cfg.vocab_size], &model.lm_head));
    out
}

fn write_record<W: Write>(
    w: &mut W,
    name: &str,
    dims: &[usize],
    data: &[f32],
) -> Result<(), ModelError> {
    debug_assert_eq!(dims.iter().product::<usize>(), data.len());
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &dim in dims {
        w.write_all(&(dim as u32).to_le_bytes())?;
    }
    for &v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one record; `Ok(None)` at a clean end of stream.
fn read_record<R: Read>(r: &mut R) -> Result<Option<(String, Vec<usize>, Vec<f32>)>, ModelError> {
    let mut len_buf = [0u8; 4];
    match r.read_exact(&mut len_buf) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e.into()),
    }
    let name_len = u32::from_le_bytes(len_buf) as usize;
    if name_len == 0 || name_len > 4096 {
        return Err(ModelError::MalformedContainer(format!(
            "implausible tensor name length {name_len}"
        )));
    }
    let mut name_bytes = vec![0u8; name_len];
    r.read_exact(&mut name_bytes)
        .map_err(|_| ModelError::MalformedContainer("truncated tensor name".into()))?;
    let name = String::from_utf8(name_bytes)
        .map_err(|_| ModelError::MalformedContainer("tensor name not UTF-8".into()))?;

    let mut ndim_buf = [0u8; 4];
    r.read_exact(&mut ndim_buf)
        .map_err(|_| ModelError::MalformedContainer(format!("{name}: truncated ndim")))?;
    let ndim = u32::from_le_bytes(ndim_buf) as usize;
    if ndim == 0 || ndim > 8 {
        return Err(ModelError::MalformedContainer(format!(
            "{name}: implausible ndim {ndim}"
        )));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut dim_buf = [0u8; 4];
        r.read_exact(&mut dim_buf)
            .map_err(|_| ModelError::MalformedContainer(format!("{name}: truncated dims")))?;
        dims.push(u32::from_le_bytes(dim_buf) as usize);
    }
    let count: usize = dims.iter().product();
    let mut data = vec![0.0f32; count];
    let mut byte_buf = vec![0u8; count * 4];
    r.read_exact(&mut byte_buf)
        .map_err(|_| ModelError::MalformedContainer(format!("{name}: truncated data")))?;
    for (v, chunk) in data.iter_mut().zip(byte_buf.chunks_exact(4)) {
        *v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
    }
    Ok(Some((name, dims, data)))
}
