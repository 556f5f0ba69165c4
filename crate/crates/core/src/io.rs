//! File formats: matrix and tensor text files, corpus JSON, model and
//! ground-truth manifests.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::decomposition::DecompositionConfig;
use crate::error::{Error, Result};
use crate::moments::{Document, HdpTree, NodeSpec};
use crate::tensor::DenseTensor;

/// `rows cols` header, then one line per row with every value written at
/// full precision.
pub fn format_matrix(m: &DMatrix<f64>) -> String {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    for r in 0..m.nrows() {
        let row: Vec<String> = m.row(r).iter().map(|x| format!("{x:.16e}")).collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

fn parse_values(line: &str, lineno: usize) -> Result<Vec<f64>> {
    line.split_whitespace()
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| Error::Parse(format!("line {lineno}: `{t}`: {e}")))
        })
        .collect()
}

fn parse_header(line: Option<&str>) -> Result<Vec<usize>> {
    let line = line.ok_or_else(|| Error::Parse("empty file".into()))?;
    line.split_whitespace()
        .map(|t| t.parse::<usize>().map_err(|e| Error::Parse(format!("header `{t}`: {e}"))))
        .collect()
}

pub fn parse_matrix(text: &str) -> Result<DMatrix<f64>> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header = parse_header(lines.next())?;
    let [rows, cols] = header[..] else {
        return Err(Error::Parse(format!("matrix header needs 2 fields, got {}", header.len())));
    };
    let mut data = Vec::with_capacity(rows * cols);
    let mut seen = 0;
    for (i, line) in lines.enumerate() {
        let vals = parse_values(line, i + 2)?;
        if vals.len() != cols {
            return Err(Error::Parse(format!("line {}: expected {cols} values, got {}", i + 2, vals.len())));
        }
        data.extend(vals);
        seen += 1;
    }
    if seen != rows {
        return Err(Error::Parse(format!("expected {rows} rows, got {seen}")));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    fs::write(path, format_matrix(m))?;
    Ok(())
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    parse_matrix(&fs::read_to_string(path)?)
}

/// Dimensions on the first line, then the entries in row-major order with
/// one line per fibre of the last mode.
pub fn format_tensor(t: &DenseTensor) -> String {
    let dims: Vec<String> = t.dims().iter().map(usize::to_string).collect();
    let mut out = dims.join(" ");
    out.push('\n');
    let width = t.dims().last().copied().unwrap_or(1).max(1);
    for chunk in t.data().chunks(width) {
        for (i, x) in chunk.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{x:.16e}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_tensor(text: &str) -> Result<DenseTensor> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let dims = parse_header(lines.next())?;
    let mut data = Vec::new();
    for (i, line) in lines.enumerate() {
        data.extend(parse_values(line, i + 2)?);
    }
    DenseTensor::new(dims, data).map_err(|e| Error::Parse(e.to_string()))
}

/// Write named tensors into `dir` as `<name>.txt` plus a `manifest.json`
/// listing the files next to `extra` fields.
pub fn write_tensor_dir(dir: &Path, tensors: &[(&str, &DenseTensor)], extra: serde_json::Value) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut files = serde_json::Map::new();
    for (name, t) in tensors {
        let file = format!("{name}.txt");
        fs::write(dir.join(&file), format_tensor(t))?;
        files.insert((*name).to_string(), serde_json::Value::String(file));
    }
    let manifest = serde_json::json!({ "tensors": files, "fields": extra });
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Tensors listed in a directory written by [`write_tensor_dir`].
pub fn read_tensor_dir(dir: &Path) -> Result<(BTreeMap<String, DenseTensor>, serde_json::Value)> {
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
    let mut out = BTreeMap::new();
    if let Some(files) = manifest["tensors"].as_object() {
        for (name, file) in files {
            let file = file
                .as_str()
                .ok_or_else(|| Error::Parse(format!("tensor `{name}` has no file name")))?;
            out.insert(name.clone(), parse_tensor(&fs::read_to_string(dir.join(file))?)?);
        }
    }
    Ok((out, manifest["fields"].clone()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentEntry {
    /// Owning leaf; absent for held-out documents.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leaf: Option<usize>,
    /// Word id (as a string key) to count.
    pub counts: BTreeMap<String, u64>,
}

impl DocumentEntry {
    fn new(leaf: Option<usize>, doc: &Document) -> Self {
        Self {
            leaf,
            counts: doc.counts().iter().map(|(w, c)| (w.to_string(), *c)).collect(),
        }
    }

    fn document(&self) -> Result<Document> {
        let counts = self
            .counts
            .iter()
            .map(|(w, &c)| {
                w.parse::<usize>()
                    .map(|w| (w, c))
                    .map_err(|e| Error::Parse(format!("word id `{w}`: {e}")))
            })
            .collect::<Result<_>>()?;
        Ok(Document::new(counts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusFile {
    pub vocab_size: usize,
    pub gammas: Vec<f64>,
    pub nodes: Vec<NodeSpec>,
    pub documents: Vec<DocumentEntry>,
}

impl CorpusFile {
    pub fn from_tree(tree: &HdpTree) -> Self {
        let documents = tree
            .nodes()
            .filter_map(|n| n.document.as_ref().map(|d| DocumentEntry::new(Some(n.id), d)))
            .collect();
        Self {
            vocab_size: tree.vocab_size(),
            gammas: tree.gammas().to_vec(),
            nodes: tree.node_specs(),
            documents,
        }
    }

    pub fn into_tree(self) -> Result<HdpTree> {
        let docs = self
            .documents
            .iter()
            .map(|d| {
                let leaf = d
                    .leaf
                    .ok_or_else(|| Error::Parse("corpus document without a leaf id".into()))?;
                Ok((leaf, d.document()?))
            })
            .collect::<Result<_>>()?;
        HdpTree::new(self.vocab_size, self.gammas, &self.nodes, docs)
    }
}

pub fn write_corpus(path: &Path, tree: &HdpTree) -> Result<()> {
    fs::write(path, serde_json::to_string(&CorpusFile::from_tree(tree))?)?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<HdpTree> {
    let file: CorpusFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.into_tree()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocumentsFile {
    pub documents: Vec<DocumentEntry>,
}

pub fn write_documents(path: &Path, docs: &[Document]) -> Result<()> {
    let file = DocumentsFile {
        documents: docs.iter().map(|d| DocumentEntry::new(None, d)).collect(),
    };
    fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn read_documents(path: &Path) -> Result<Vec<Document>> {
    let file: DocumentsFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    file.documents.iter().map(DocumentEntry::document).collect()
}

/// Ground truth written next to a generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthManifest {
    pub model: String,
    pub data_file: String,
    pub phi_file: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pi0: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma2: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub heldout_file: Option<String>,
    pub seed: u64,
}

/// Output of a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub model: String,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "K1")]
    pub k1: usize,
    pub sigma2: Option<f64>,
    pub pi: Vec<f64>,
    pub phi_file: String,
    pub branches: Vec<String>,
    pub eigenvalues: Vec<f64>,
    pub converged: Vec<bool>,
    pub solver: String,
    pub seed: u64,
    pub decomposition: DecompositionConfig,
    pub timings_ms: BTreeMap<String, f64>,
}

/// Resolve `file` relative to the directory holding `manifest`.
pub fn sibling(manifest: &Path, file: &str) -> PathBuf {
    let p = Path::new(file);
    if p.is_absolute() {
        return p.to_path_buf();
    }
    manifest.parent().map_or_else(|| p.to_path_buf(), |d| d.join(p))
}
