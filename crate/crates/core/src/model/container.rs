//! Weight container, format v1. All integers little-endian.
//!
//! ```text
//! magic        8 bytes   "DOTRSZ01"
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (format_version + ModelConfig)
//! tensors      until end of file, each:
//!   name_len   u16
//!   name       name_len bytes UTF-8
//!   dtype      u8        0 = f32, 1 = f64
//!   rank       u8
//!   dims       rank × u32
//!   data       prod(dims) little-endian elements, row-major
//! ```
//!
//! Matrices are stored in the row-vector convention (`x · W`), so a
//! checkpoint that applies `W x` must be transposed on export.

use std::collections::HashMap;
use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{LayerWeights, Model, ModelConfig, Precision};
use crate::linalg::Matrix;

pub const MAGIC: &[u8; 8] = b"DOTRSZ01";
const MAGIC_PREFIX: &[u8; 6] = b"DOTRSZ";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("not a weight container (bad magic)")]
    BadMagic,
    #[error("unsupported container version {found}, expected {FORMAT_VERSION}")]
    VersionMismatch { found: String },
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has dims {found:?}, expected {expected:?}")]
    DimMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("file is truncated")]
    TruncatedFile,
    #[error("tensor `{0}` appears more than once")]
    DuplicateTensor(String),
    #[error("unexpected tensor `{0}`")]
    UnexpectedTensor(String),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    #[serde(flatten)]
    config: ModelConfig,
}

/// Tensor names and dims required by `config`, in storage order.
pub fn expected_tensors(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let w = config.width();
    let mut out = vec![("embed".to_string(), vec![config.vocab_size, w])];
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.push((p("wq"), vec![w, config.attn_width()]));
        out.push((p("wk"), vec![w, config.kv_width()]));
        out.push((p("wv"), vec![w, config.kv_width()]));
        out.push((p("wo"), vec![config.attn_width(), w]));
        out.push((p("wup"), vec![w, config.d_ff]));
        out.push((p("wgate"), vec![w, config.d_ff]));
        out.push((p("wdown"), vec![config.d_ff, w]));
        if !config.folded {
            out.push((p("norm_attn"), vec![w]));
            out.push((p("norm_ffn"), vec![w]));
        }
        if config.residual_width.is_some() {
            out.push((p("adapter_attn"), vec![w, w]));
            out.push((p("adapter_ffn"), vec![w, w]));
        }
    }
    if !config.folded {
        out.push(("norm_final".to_string(), vec![w]));
    }
    out.push(("head".to_string(), vec![w, config.vocab_size]));
    out
}

fn model_tensors(model: &Model) -> Vec<(String, Vec<usize>, &[f64])> {
    fn mat(name: String, m: &Matrix) -> (String, Vec<usize>, &[f64]) {
        let (r, c) = m.shape();
        (name, vec![r, c], m.as_slice())
    }
    fn vec1(name: String, v: &[f64]) -> (String, Vec<usize>, &[f64]) {
        (name, vec![v.len()], v)
    }
    let mut out: Vec<(String, Vec<usize>, &[f64])> = vec![mat("embed".into(), &model.embed)];
    for (i, l) in model.layers.iter().enumerate() {
        let p = |s: &str| format!("layers.{i}.{s}");
        out.push(mat(p("wq"), &l.wq));
        out.push(mat(p("wk"), &l.wk));
        out.push(mat(p("wv"), &l.wv));
        out.push(mat(p("wo"), &l.wo));
        out.push(mat(p("wup"), &l.wup));
        out.push(mat(p("wgate"), &l.wgate));
        out.push(mat(p("wdown"), &l.wdown));
        if let Some(g) = &l.norm_attn {
            out.push(vec1(p("norm_attn"), g));
        }
        if let Some(g) = &l.norm_ffn {
            out.push(vec1(p("norm_ffn"), g));
        }
        if let Some(a) = &l.adapter_attn {
            out.push(mat(p("adapter_attn"), a));
        }
        if let Some(a) = &l.adapter_ffn {
            out.push(mat(p("adapter_ffn"), a));
        }
    }
    if let Some(g) = &model.norm_final {
        out.push(vec1("norm_final".into(), g));
    }
    out.push(mat("head".into(), &model.head));
    out
}

/// Checks that the model's tensors are exactly the ones its config declares.
fn check_layout(model: &Model) -> Result<(), ContainerError> {
    model
        .config
        .validate()
        .map_err(|e| ContainerError::InvalidHeader(e.to_string()))?;
    let expected = expected_tensors(&model.config);
    let actual = model_tensors(model);
    let mut actual_map: HashMap<&str, &Vec<usize>> = HashMap::new();
    for (name, dims, _) in &actual {
        actual_map.insert(name.as_str(), dims);
    }
    for (name, dims) in &expected {
        match actual_map.remove(name.as_str()) {
            None => return Err(ContainerError::MissingTensor(name.clone())),
            Some(found) if found != dims => {
                return Err(ContainerError::DimMismatch {
                    name: name.clone(),
                    expected: dims.clone(),
                    found: found.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if let Some(name) = actual_map.keys().next() {
        return Err(ContainerError::UnexpectedTensor(name.to_string()));
    }
    Ok(())
}

/// Serializes a model into any writer.
pub fn write_container<W: Write>(model: &Model, mut w: W) -> Result<(), ContainerError> {
    check_layout(model)?;
    let header = serde_json::to_vec(&Header {
        format_version: FORMAT_VERSION,
        config: model.config.clone(),
    })
    .map_err(|e| ContainerError::InvalidHeader(e.to_string()))?;
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u32).to_le_bytes())?;
    w.write_all(&header)?;

    let precision = model.config.precision;
    for (name, dims, data) in model_tensors(model) {
        let name_bytes = name.as_bytes();
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        let dtype: u8 = match precision {
            Precision::F32 => 0,
            Precision::F64 => 1,
        };
        w.write_all(&[dtype, dims.len() as u8])?;
        for d in &dims {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(data.len() * 8);
        match precision {
            Precision::F32 => data
                .iter()
                .for_each(|v| buf.extend_from_slice(&(*v as f32).to_le_bytes())),
            Precision::F64 => data.iter().for_each(|v| buf.extend_from_slice(&v.to_le_bytes())),
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn save_container(model: &Model, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let mut buf = Vec::new();
    write_container(model, &mut buf)?;
    fs::write(path, buf)?;
    Ok(())
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self.pos.checked_add(n).ok_or(ContainerError::TruncatedFile)?;
        if end > self.data.len() {
            return Err(ContainerError::TruncatedFile);
        }
        let s = &self.data[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, ContainerError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn at_end(&self) -> bool {
        self.pos == self.data.len()
    }
}

/// Parses a container from any reader.
pub fn read_container<R: Read>(mut r: R) -> Result<Model, ContainerError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    parse(&bytes)
}

pub fn load_container(path: impl AsRef<Path>) -> Result<Model, ContainerError> {
    parse(&fs::read(path)?)
}

fn parse(bytes: &[u8]) -> Result<Model, ContainerError> {
    let mut cur = Cursor { data: bytes, pos: 0 };
    let magic = cur.take(8).map_err(|_| ContainerError::BadMagic)?;
    if magic != MAGIC {
        if magic.starts_with(MAGIC_PREFIX) {
            return Err(ContainerError::VersionMismatch {
                found: String::from_utf8_lossy(&magic[6..]).into_owned(),
            });
        }
        return Err(ContainerError::BadMagic);
    }
    let header_len = cur.u32()? as usize;
    let header: Header = serde_json::from_slice(cur.take(header_len)?)
        .map_err(|e| ContainerError::InvalidHeader(e.to_string()))?;
    if header.format_version != FORMAT_VERSION {
        return Err(ContainerError::VersionMismatch {
            found: header.format_version.to_string(),
        });
    }
    let config = header.config;
    config
        .validate()
        .map_err(|e| ContainerError::InvalidHeader(e.to_string()))?;

    let mut tensors: HashMap<String, (Vec<usize>, Vec<f64>)> = HashMap::new();
    while !cur.at_end() {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| ContainerError::InvalidHeader("tensor name is not UTF-8".into()))?;
        let dtype = cur.u8()?;
        let rank = cur.u8()? as usize;
        let dims = (0..rank)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let count: usize = dims.iter().product();
        let data: Vec<f64> = match dtype {
            0 => cur
                .take(count * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            1 => cur
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            other => return Err(ContainerError::BadDtype(other)),
        };
        if tensors.insert(name.clone(), (dims, data)).is_some() {
            return Err(ContainerError::DuplicateTensor(name));
        }
    }

    let expected = expected_tensors(&config);
    for (name, dims) in &expected {
        match tensors.get(name) {
            None => return Err(ContainerError::MissingTensor(name.clone())),
            Some((found, _)) if found != dims => {
                return Err(ContainerError::DimMismatch {
                    name: name.clone(),
                    expected: dims.clone(),
                    found: found.clone(),
                })
            }
            Some(_) => {}
        }
    }
    if tensors.len() != expected.len() {
        let extra = tensors
            .keys()
            .find(|k| !expected.iter().any(|(n, _)| n == *k))
            .cloned()
            .unwrap_or_default();
        return Err(ContainerError::UnexpectedTensor(extra));
    }

    let mut take_mat = |name: &str| {
        let (dims, data) = tensors.remove(name).expect("validated above");
        Matrix::from_vec(dims[0], dims[1], data)
    };
    let embed = take_mat("embed");
    let head = take_mat("head");
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        let compressed = config.residual_width.is_some();
        layers.push(LayerWeights {
            wq: take_mat(&p("wq")),
            wk: take_mat(&p("wk")),
            wv: take_mat(&p("wv")),
            wo: take_mat(&p("wo")),
            wup: take_mat(&p("wup")),
            wgate: take_mat(&p("wgate")),
            wdown: take_mat(&p("wdown")),
            norm_attn: None,
            norm_ffn: None,
            adapter_attn: compressed.then(|| take_mat(&p("adapter_attn"))),
            adapter_ffn: compressed.then(|| take_mat(&p("adapter_ffn"))),
        });
    }
    let mut take_vec = |name: &str| tensors.remove(name).map(|(_, d)| d);
    let mut norm_final = None;
    if !config.folded {
        for (i, l) in layers.iter_mut().enumerate() {
            l.norm_attn = take_vec(&format!("layers.{i}.norm_attn"));
            l.norm_ffn = take_vec(&format!("layers.{i}.norm_ffn"));
        }
        norm_final = take_vec("norm_final");
    }

    Ok(Model {
        config,
        embed,
        layers,
        norm_final,
        head,
    })
}
