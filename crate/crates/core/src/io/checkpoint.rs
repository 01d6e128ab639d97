//! Self-describing text checkpoints.
//!
//! ```text
//! vidcap-checkpoint
//! format_version 1
//! kind model
//! [config]
//! hidden 8
//! [meta]
//! seed 7
//! timestamp 0
//! [vocab 4]
//! 0 START 0
//! ...
//! [array W_ix 8 4]
//! <one row of the last dimension per line>
//! [end]
//! ```

use std::fmt::{self, Write as _};
use std::path::Path;

use super::{parse_f64, push_values, read_text, write_text, IoError};
use crate::captioner::{CaptionModel, ModelConfig};
use crate::features::{Channel, Codebook};
use crate::text::Vocabulary;

pub const MAGIC: &str = "vidcap-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Model,
    Codebook,
}

impl fmt::Display for CheckpointKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckpointKind::Model => "model",
            CheckpointKind::Codebook => "codebook",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
    /// Header line in the parsed file, 0 when built in memory.
    pub line: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub config: Vec<(String, String)>,
    pub meta: Vec<(String, String)>,
    pub vocab: Option<Vec<(String, u64)>>,
    pub arrays: Vec<NamedArray>,
}

/// `SOURCE_DATE_EPOCH` when set, else 0, so identical runs give identical files.
fn timestamp() -> String {
    std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|v| v.trim().parse::<u64>().ok())
        .unwrap_or(0)
        .to_string()
}

pub fn render_checkpoint(ckpt: &Checkpoint) -> String {
    let mut out = format!("{MAGIC}\nformat_version {FORMAT_VERSION}\nkind {}\n", ckpt.kind);
    out.push_str("[config]\n");
    for (k, v) in &ckpt.config {
        let _ = writeln!(out, "{k} {v}");
    }
    out.push_str("[meta]\n");
    for (k, v) in &ckpt.meta {
        let _ = writeln!(out, "{k} {v}");
    }
    if let Some(vocab) = &ckpt.vocab {
        let _ = writeln!(out, "[vocab {}]", vocab.len());
        for (i, (w, c)) in vocab.iter().enumerate() {
            let _ = writeln!(out, "{i} {w} {c}");
        }
    }
    for a in &ckpt.arrays {
        out.push_str("[array ");
        out.push_str(&a.name);
        for d in &a.dims {
            let _ = write!(out, " {d}");
        }
        out.push_str("]\n");
        let cols = a.dims.last().copied().unwrap_or(0);
        let rows = if cols == 0 { a.dims[..a.dims.len() - 1].iter().product() } else { a.data.len() / cols };
        for r in 0..rows {
            push_values(&mut out, &a.data[r * cols..(r + 1) * cols], ' ');
            out.push('\n');
        }
    }
    out.push_str("[end]\n");
    out
}

struct Lines<'a> {
    path: &'a Path,
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, wanted: &str) -> Result<(usize, &'a str), IoError> {
        match self.inner.next() {
            Some((i, l)) => {
                self.last = i + 1;
                Ok((i + 1, l))
            }
            None => Err(IoError::Truncated {
                path: self.path.to_path_buf(),
                msg: format!("file ends after line {} while reading {wanted}", self.last),
            }),
        }
    }
}

fn key_value<'a>(path: &Path, line: usize, l: &'a str) -> Result<(&'a str, &'a str), IoError> {
    l.split_once(' ')
        .filter(|(k, v)| !k.is_empty() && !v.is_empty())
        .ok_or_else(|| IoError::malformed(path, line, format!("expected `key value`, got {l:?}")))
}

fn parse_dims(path: &Path, line: usize, fields: &[&str]) -> Result<Vec<usize>, IoError> {
    if fields.is_empty() {
        return Err(IoError::Shape {
            path: path.to_path_buf(),
            line,
            msg: "array has no dimensions".into(),
        });
    }
    fields
        .iter()
        .map(|f| {
            f.parse::<usize>().map_err(|_| IoError::Shape {
                path: path.to_path_buf(),
                line,
                msg: format!("bad dimension {f:?}"),
            })
        })
        .collect()
}

/// Parses and validates a checkpoint document. `path` is used for diagnostics.
pub fn parse_checkpoint(path: &Path, text: &str) -> Result<Checkpoint, IoError> {
    let mut lines = Lines {
        path,
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (n, magic) = lines.next("the header")?;
    if magic != MAGIC {
        return Err(IoError::malformed(path, n, format!("not a checkpoint (expected {MAGIC:?})")));
    }
    let (n, l) = lines.next("format_version")?;
    match key_value(path, n, l)? {
        ("format_version", v) if v == FORMAT_VERSION.to_string() => {}
        ("format_version", v) => {
            return Err(IoError::Version {
                path: path.to_path_buf(),
                found: v.to_string(),
                expected: FORMAT_VERSION,
            })
        }
        _ => return Err(IoError::malformed(path, n, "expected format_version")),
    }
    let (n, l) = lines.next("kind")?;
    let kind = match key_value(path, n, l)? {
        ("kind", "model") => CheckpointKind::Model,
        ("kind", "codebook") => CheckpointKind::Codebook,
        _ => return Err(IoError::malformed(path, n, format!("bad kind line {l:?}"))),
    };

    let mut ckpt = Checkpoint {
        kind,
        config: vec![],
        meta: vec![],
        vocab: None,
        arrays: vec![],
    };
    let (n, l) = lines.next("[config]")?;
    if l != "[config]" {
        return Err(IoError::malformed(path, n, "expected [config]"));
    }
    let mut section = "config";
    loop {
        let (n, l) = lines.next("a section")?;
        if l == "[end]" {
            if let Some((n, extra)) = lines.inner.find(|(_, l)| !l.trim().is_empty()) {
                return Err(IoError::malformed(path, n + 1, format!("content after [end]: {extra:?}")));
            }
            return Ok(ckpt);
        }
        if l == "[meta]" {
            if section != "config" {
                return Err(IoError::malformed(path, n, "[meta] must follow [config]"));
            }
            section = "meta";
            continue;
        }
        if let Some(inner) = l.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
            let fields: Vec<&str> = inner.split(' ').collect();
            match fields[0] {
                "vocab" if ckpt.vocab.is_none() && ckpt.arrays.is_empty() => {
                    let size = parse_dims(path, n, &fields[1..])?;
                    if size.len() != 1 {
                        return Err(IoError::Shape {
                            path: path.to_path_buf(),
                            line: n,
                            msg: "vocab header takes one size".into(),
                        });
                    }
                    let mut entries = Vec::with_capacity(size[0]);
                    for i in 0..size[0] {
                        let (m, l) = lines.next("vocabulary entries")?;
                        let parts: Vec<&str> = l.split(' ').collect();
                        let entry = match parts.as_slice() {
                            [id, w, c] if id.parse::<usize>().ok() == Some(i) => {
                                c.parse::<u64>().ok().map(|c| (w.to_string(), c))
                            }
                            _ => None,
                        };
                        entries.push(entry.ok_or_else(|| IoError::malformed(path, m, format!("expected `{i} word count`")))?);
                    }
                    ckpt.vocab = Some(entries);
                }
                "array" if fields.len() >= 2 && !fields[1].is_empty() => {
                    let name = fields[1].to_string();
                    if ckpt.arrays.iter().any(|a| a.name == name) {
                        return Err(IoError::malformed(path, n, format!("duplicate array {name}")));
                    }
                    let dims = parse_dims(path, n, &fields[2..])?;
                    let cols = *dims.last().expect("non-empty");
                    let rows: usize = dims[..dims.len() - 1].iter().product();
                    let mut data = Vec::with_capacity(rows * cols);
                    for _ in 0..rows {
                        let (m, l) = lines.next(&format!("array {name}"))?;
                        let before = data.len();
                        if !l.is_empty() {
                            for v in l.split(' ') {
                                data.push(parse_f64(path, m, v)?);
                            }
                        }
                        if data.len() - before != cols {
                            return Err(IoError::Shape {
                                path: path.to_path_buf(),
                                line: m,
                                msg: format!("array {name} row has {} values, shape says {cols}", data.len() - before),
                            });
                        }
                    }
                    ckpt.arrays.push(NamedArray { name, dims, data, line: n });
                }
                _ => return Err(IoError::malformed(path, n, format!("unexpected section {l:?}"))),
            }
            section = "body";
            continue;
        }
        let (k, v) = key_value(path, n, l)?;
        let target = match section {
            "config" => &mut ckpt.config,
            "meta" => &mut ckpt.meta,
            _ => return Err(IoError::malformed(path, n, format!("unexpected line {l:?}"))),
        };
        if target.iter().any(|(key, _)| key == k) {
            return Err(IoError::malformed(path, n, format!("duplicate key {k}")));
        }
        target.push((k.to_string(), v.to_string()));
    }
}

/// Typed access to a parsed checkpoint, keeping the path for diagnostics.
struct Reader<'a> {
    path: &'a Path,
    ckpt: Checkpoint,
}

impl Reader<'_> {
    fn load(path: &Path, kind: CheckpointKind) -> Result<Reader<'_>, IoError> {
        let ckpt = parse_checkpoint(path, &read_text(path)?)?;
        if ckpt.kind != kind {
            return Err(IoError::malformed(path, 3, format!("expected a {kind} checkpoint, found {}", ckpt.kind)));
        }
        Ok(Reader { path, ckpt })
    }

    fn config<T: std::str::FromStr>(&self, key: &str) -> Result<T, IoError> {
        let raw = self
            .ckpt
            .config
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| IoError::malformed(self.path, 4, format!("config is missing {key}")))?;
        raw.parse()
            .map_err(|_| IoError::malformed(self.path, 4, format!("config {key} has bad value {raw:?}")))
    }

    fn shape_error(&self, line: usize, msg: String) -> IoError {
        IoError::Shape {
            path: self.path.to_path_buf(),
            line,
            msg,
        }
    }

    /// Removes and returns the named array after checking its shape.
    fn take(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f64>, IoError> {
        let i = self
            .ckpt
            .arrays
            .iter()
            .position(|a| a.name == name)
            .ok_or_else(|| self.shape_error(0, format!("missing array {name}")))?;
        let a = self.ckpt.arrays.remove(i);
        if a.dims != dims {
            return Err(self.shape_error(a.line, format!("array {name} has shape {:?}, expected {dims:?}", a.dims)));
        }
        Ok(a.data)
    }

    fn finish(self) -> Result<(), IoError> {
        match self.ckpt.arrays.first() {
            Some(a) => Err(self.shape_error(a.line, format!("unexpected array {}", a.name))),
            None => Ok(()),
        }
    }
}

fn model_checkpoint(model: &CaptionModel, seed: u64) -> Checkpoint {
    let c = &model.config;
    let config = [
        ("vocab_size", c.vocab_size.to_string()),
        ("embed_dim", c.embed_dim.to_string()),
        ("hidden", c.hidden.to_string()),
        ("init_feat_dim", c.init_feat_dim.to_string()),
        ("persist_feat_dim", c.persist_feat_dim.to_string()),
        ("use_bias", c.use_bias.to_string()),
        ("max_caption_len", c.max_caption_len.to_string()),
    ];
    Checkpoint {
        kind: CheckpointKind::Model,
        config: config.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        meta: vec![("seed".into(), seed.to_string()), ("timestamp".into(), timestamp())],
        vocab: Some(model.vocab.entries().map(|(w, c)| (w.to_string(), c)).collect()),
        arrays: model
            .weights
            .tensors()
            .into_iter()
            .map(|(name, dims, data)| NamedArray {
                name,
                dims,
                data: data.to_vec(),
                line: 0,
            })
            .collect(),
    }
}

pub fn save_model(path: &Path, model: &CaptionModel, seed: u64) -> Result<(), IoError> {
    write_text(path, &render_checkpoint(&model_checkpoint(model, seed)))
}

pub fn load_model(path: &Path) -> Result<CaptionModel, IoError> {
    let mut r = Reader::load(path, CheckpointKind::Model)?;
    let config = ModelConfig {
        vocab_size: r.config("vocab_size")?,
        embed_dim: r.config("embed_dim")?,
        hidden: r.config("hidden")?,
        init_feat_dim: r.config("init_feat_dim")?,
        persist_feat_dim: r.config("persist_feat_dim")?,
        use_bias: r.config("use_bias")?,
        max_caption_len: r.config("max_caption_len")?,
    };
    let entries = r
        .ckpt
        .vocab
        .take()
        .ok_or_else(|| IoError::malformed(path, 4, "model checkpoint has no [vocab] section"))?;
    if entries.len() != config.vocab_size {
        return Err(r.shape_error(0, format!("vocab has {} words, config says {}", entries.len(), config.vocab_size)));
    }
    let vocab = Vocabulary::from_entries(entries).map_err(|e| IoError::malformed(path, 0, e.to_string()))?;
    let mut model = CaptionModel::zeros(config, vocab).map_err(|e| IoError::malformed(path, 4, e.to_string()))?;
    let shapes: Vec<(String, Vec<usize>)> = model.weights.tensors().into_iter().map(|(n, d, _)| (n, d)).collect();
    for ((name, dst), (_, dims)) in model.weights.tensors_mut().into_iter().zip(shapes) {
        dst.copy_from_slice(&r.take(&name, &dims)?);
    }
    r.finish()?;
    Ok(model)
}

fn codebook_checkpoint(cb: &Codebook) -> Checkpoint {
    let config = [
        ("k", cb.k().to_string()),
        ("dim", cb.dim.to_string()),
        ("channel", cb.channel.map_or("none", Channel::tag).to_string()),
        ("iterations", cb.iterations.to_string()),
    ];
    Checkpoint {
        kind: CheckpointKind::Codebook,
        config: config.into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        meta: vec![("seed".into(), cb.seed.to_string()), ("timestamp".into(), timestamp())],
        vocab: None,
        arrays: vec![
            NamedArray {
                name: "centroids".into(),
                dims: vec![cb.k(), cb.dim],
                data: cb.centroids.iter().flatten().copied().collect(),
                line: 0,
            },
            NamedArray {
                name: "sse_log".into(),
                dims: vec![cb.sse_log.len()],
                data: cb.sse_log.clone(),
                line: 0,
            },
        ],
    }
}

pub fn save_codebook(path: &Path, codebook: &Codebook) -> Result<(), IoError> {
    write_text(path, &render_checkpoint(&codebook_checkpoint(codebook)))
}

pub fn load_codebook(path: &Path) -> Result<Codebook, IoError> {
    let mut r = Reader::load(path, CheckpointKind::Codebook)?;
    let k: usize = r.config("k")?;
    let dim: usize = r.config("dim")?;
    let iterations = r.config("iterations")?;
    let channel = match r.config::<String>("channel")?.as_str() {
        "none" => None,
        tag => Some(
            tag.parse::<Channel>()
                .map_err(|e| IoError::malformed(path, 4, e.to_string()))?,
        ),
    };
    let seed = r
        .ckpt
        .meta
        .iter()
        .find(|(key, _)| key == "seed")
        .and_then(|(_, v)| v.parse().ok())
        .ok_or_else(|| IoError::malformed(path, 0, "meta is missing a numeric seed"))?;
    if k == 0 || dim == 0 {
        return Err(r.shape_error(0, "codebook needs k ≥ 1 and dim ≥ 1".into()));
    }
    let flat = r.take("centroids", &[k, dim])?;
    let n_sse = r
        .ckpt
        .arrays
        .iter()
        .find(|a| a.name == "sse_log")
        .map_or(0, |a| a.dims.first().copied().unwrap_or(0));
    let sse_log = r.take("sse_log", &[n_sse])?;
    r.finish()?;
    Ok(Codebook {
        centroids: flat.chunks(dim).map(<[f64]>::to_vec).collect(),
        dim,
        channel,
        seed,
        iterations,
        sse_log,
    })
}
