use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ndarray::Array1;

use super::{parse_f64, push_values, read_text, write_text, IoError};
use crate::captioner::{CaptionDataset, CaptionSample};
use crate::error::Result;
use crate::features::{Channel, DescriptorSet, ScoreMatrix};
use crate::text::{build_vocab, tokenize, translate_caption, Vocabulary, UNK_ID};

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionRecord {
    pub clip_id: String,
    pub text: String,
    pub line: usize,
}

/// Reads `clip_id<TAB>caption` lines. Blank lines are skipped and a clip may
/// appear more than once (several references).
pub fn read_captions(path: &Path) -> Result<Vec<CaptionRecord>, IoError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let (id, caption) = raw
            .split_once('\t')
            .ok_or_else(|| IoError::malformed(path, line, "expected clip_id<TAB>caption"))?;
        let id = id.trim();
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(IoError::malformed(path, line, format!("bad clip id {id:?}")));
        }
        out.push(CaptionRecord {
            clip_id: id.to_string(),
            text: caption.trim().to_string(),
            line,
        });
    }
    Ok(out)
}

pub fn write_captions<S: AsRef<str>>(path: &Path, records: &[(S, S)]) -> Result<(), IoError> {
    let mut out = String::new();
    for (id, text) in records {
        out.push_str(id.as_ref());
        out.push('\t');
        out.push_str(text.as_ref());
        out.push('\n');
    }
    write_text(path, &out)
}

/// Rows of a `#dims d` table in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub dim: usize,
    pub rows: Vec<(String, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(dim: usize) -> Self {
        FeatureTable {
            dim,
            rows: Vec::new(),
            index: HashMap::new(),
        }
    }

    /// Appends a row; returns false (and keeps the table unchanged) on a
    /// duplicate id.
    pub fn push(&mut self, id: String, values: Vec<f64>) -> bool {
        if self.index.contains_key(&id) {
            return false;
        }
        self.index.insert(id.clone(), self.rows.len());
        self.rows.push((id, values));
        true
    }

    pub fn get(&self, id: &str) -> Option<&[f64]> {
        self.index.get(id).map(|&i| self.rows[i].1.as_slice())
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

fn parse_dims_header(path: &Path, first: Option<&str>) -> Result<(usize, Vec<String>), IoError> {
    let header = first.ok_or_else(|| IoError::malformed(path, 1, "empty file, expected a #dims header"))?;
    let mut words = header.split_whitespace();
    if words.next() != Some("#dims") {
        return Err(IoError::malformed(path, 1, "expected a #dims header"));
    }
    let dim = words
        .next()
        .and_then(|d| d.parse::<usize>().ok())
        .filter(|&d| d > 0)
        .ok_or_else(|| IoError::malformed(path, 1, "#dims needs a positive integer"))?;
    Ok((dim, words.map(str::to_string).collect()))
}

/// Yields `(line, clip_id, values)` for every row of a comma-separated table.
fn table_rows(path: &Path, text: &str) -> Result<(usize, Vec<(usize, String, Vec<f64>)>), IoError> {
    let mut lines = text.lines();
    let (dim, rest) = parse_dims_header(path, lines.next())?;
    if !rest.is_empty() {
        return Err(IoError::malformed(path, 1, format!("unexpected header fields {rest:?}")));
    }
    let mut rows = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        if raw.trim().is_empty() {
            continue;
        }
        let (id, values) = raw
            .split_once('\t')
            .ok_or_else(|| IoError::malformed(path, line, "expected clip_id<TAB>v1,...,vd"))?;
        let id = id.trim();
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(IoError::malformed(path, line, format!("bad clip id {id:?}")));
        }
        let values = values
            .split(',')
            .map(|v| parse_f64(path, line, v))
            .collect::<Result<Vec<f64>, IoError>>()?;
        if values.len() != dim {
            return Err(IoError::Dim {
                path: path.to_path_buf(),
                line,
                expected: dim,
                got: values.len(),
            });
        }
        rows.push((line, id.to_string(), values));
    }
    Ok((dim, rows))
}

/// Reads a feature file: `#dims d`, then one `clip_id<TAB>v1,...,vd` per clip.
pub fn read_feature_file(path: &Path) -> Result<FeatureTable, IoError> {
    let (dim, rows) = table_rows(path, &read_text(path)?)?;
    let mut table = FeatureTable::new(dim);
    for (line, id, values) in rows {
        if table.get(&id).is_some() {
            return Err(IoError::DuplicateId {
                path: path.to_path_buf(),
                line,
                id,
            });
        }
        table.push(id, values);
    }
    Ok(table)
}

pub fn write_feature_file(path: &Path, table: &FeatureTable) -> Result<(), IoError> {
    let mut out = format!("#dims {}\n", table.dim);
    for (id, values) in &table.rows {
        out.push_str(id);
        out.push('\t');
        push_values(&mut out, values, ',');
        out.push('\n');
    }
    write_text(path, &out)
}

/// Reads a score file. Each row holds one classifier's scores for a clip, so
/// ids repeat; matrices come back in order of first appearance.
pub fn read_score_file(path: &Path) -> Result<Vec<ScoreMatrix>, IoError> {
    let (_, rows) = table_rows(path, &read_text(path)?)?;
    let mut order: Vec<ScoreMatrix> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for (_, id, values) in rows {
        let slot = *index.entry(id.clone()).or_insert_with(|| {
            order.push(ScoreMatrix {
                clip_id: id,
                rows: Vec::new(),
            });
            order.len() - 1
        });
        order[slot].rows.push(values);
    }
    Ok(order)
}

/// Reads one clip's descriptors for one channel. The clip id is the file stem.
pub fn read_descriptor_file(path: &Path) -> Result<DescriptorSet, IoError> {
    let text = read_text(path)?;
    let mut lines = text.lines();
    let (dim, rest) = parse_dims_header(path, lines.next())?;
    let channel = match rest.as_slice() {
        [key, tag] if key == "#channel" => tag
            .parse::<Channel>()
            .map_err(|e| IoError::malformed(path, 1, e.to_string()))?,
        _ => return Err(IoError::malformed(path, 1, "expected header #dims d #channel <tag>")),
    };
    let clip_id = path
        .file_stem()
        .and_then(|s| s.to_str())
        .filter(|s| !s.is_empty())
        .ok_or_else(|| IoError::malformed(path, 1, "cannot derive a clip id from the file name"))?
        .to_string();
    let mut rows = Vec::new();
    for (i, raw) in lines.enumerate() {
        let line = i + 2;
        if raw.trim().is_empty() {
            continue;
        }
        let row = raw
            .split_whitespace()
            .map(|v| parse_f64(path, line, v))
            .collect::<Result<Vec<f64>, IoError>>()?;
        if row.len() != dim {
            return Err(IoError::Dim {
                path: path.to_path_buf(),
                line,
                expected: dim,
                got: row.len(),
            });
        }
        rows.push(row);
    }
    Ok(DescriptorSet {
        clip_id,
        channel,
        dim,
        rows,
    })
}

pub fn write_descriptor_file(path: &Path, set: &DescriptorSet) -> Result<(), IoError> {
    let mut out = format!("#dims {} #channel {}\n", set.dim, set.channel.tag());
    for row in &set.rows {
        push_values(&mut out, row, ' ');
        out.push('\n');
    }
    write_text(path, &out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPaths {
    pub captions: PathBuf,
    pub init_features: PathBuf,
    pub persist_features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VocabSource {
    Existing(Vocabulary),
    Build { min_count: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedDataset {
    pub dataset: CaptionDataset,
    /// Caption tokens that were mapped to UNK.
    pub unk_tokens: usize,
    pub total_tokens: usize,
}

fn lookup<'a>(
    table: &'a FeatureTable,
    table_path: &Path,
    record: &CaptionRecord,
    captions: &Path,
) -> Result<&'a [f64], IoError> {
    table.get(&record.clip_id).ok_or_else(|| IoError::MissingJoin {
        path: captions.to_path_buf(),
        line: record.line,
        id: record.clip_id.clone(),
        features: table_path.to_path_buf(),
    })
}

/// Joins captions with their features and encodes the text.
pub fn load_dataset(paths: &DatasetPaths, vocab: VocabSource, translate: bool) -> Result<LoadedDataset> {
    let records = read_captions(&paths.captions)?;
    let init = read_feature_file(&paths.init_features)?;
    let persist = paths.persist_features.as_deref().map(read_feature_file).transpose()?;

    let tokens: Vec<Vec<String>> = records
        .iter()
        .map(|r| {
            let t = tokenize(&r.text);
            if translate {
                translate_caption(&t)
            } else {
                t
            }
        })
        .collect();
    let vocab = match vocab {
        VocabSource::Existing(v) => v,
        VocabSource::Build { min_count } => build_vocab(&tokens, min_count)?,
    };

    let mut samples = Vec::with_capacity(records.len());
    let (mut unk_tokens, mut total_tokens) = (0, 0);
    for (record, words) in records.iter().zip(&tokens) {
        let init_feat = lookup(&init, &paths.init_features, record, &paths.captions)?;
        let persist_feat = match (&persist, &paths.persist_features) {
            (Some(table), Some(p)) => Some(Array1::from(lookup(table, p, record, &paths.captions)?.to_vec())),
            _ => None,
        };
        let ids = vocab.encode(words);
        // a literal "UNK" in the text also counts
        unk_tokens += ids.iter().filter(|&&id| id == UNK_ID).count();
        total_tokens += ids.len();
        samples.push(CaptionSample {
            clip_id: record.clip_id.clone(),
            init_feat: Array1::from(init_feat.to_vec()),
            persist_feat,
            tokens: ids,
        });
    }
    Ok(LoadedDataset {
        dataset: CaptionDataset {
            samples,
            vocab,
            init_dim: init.dim,
            persist_dim: persist.as_ref().map_or(0, |t| t.dim),
        },
        unk_tokens,
        total_tokens,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::text::SOMEONE;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    fn fixture(dir: &Path) -> DatasetPaths {
        DatasetPaths {
            captions: write(dir, "caps.txt", "a\tThe man walks.\nb\tA girl runs\n\nc\tsomeone sits\n"),
            init_features: write(dir, "init.txt", "#dims 2\na\t1,2\nb\t3,4\nc\t5,6\n"),
            persist_features: Some(write(dir, "pers.txt", "#dims 1\nc\t0.5\nb\t0.25\na\t-1\n")),
        }
    }

    #[test]
    fn three_clip_fixture_loads() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path());
        let loaded = load_dataset(&paths, VocabSource::Build { min_count: 1 }, false).unwrap();
        let ds = &loaded.dataset;
        assert_eq!(ds.len(), 3);
        assert_eq!((ds.init_dim, ds.persist_dim), (2, 1));
        assert_eq!(ds.samples[1].init_feat.to_vec(), vec![3.0, 4.0]);
        assert_eq!(ds.samples[0].persist_feat.as_ref().unwrap().to_vec(), vec![-1.0]);
        assert_eq!(loaded.unk_tokens, 0);
        assert_eq!(loaded.total_tokens, 8);
    }

    #[test]
    fn translate_flag_maps_person_words() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path());
        let loaded = load_dataset(&paths, VocabSource::Build { min_count: 1 }, true).unwrap();
        let ds = &loaded.dataset;
        let someone = ds.vocab.id(SOMEONE).unwrap();
        assert!(ds.samples[0].tokens.contains(&someone));
        assert!(ds.vocab.id("man").is_none());
        // lowercase "someone" is a different word
        assert!(ds.vocab.id("someone").is_some());
    }

    #[test]
    fn existing_vocab_counts_unknowns() {
        let dir = tempfile::tempdir().unwrap();
        let paths = fixture(dir.path());
        let vocab = build_vocab(&[vec!["the", "walks"]], 1).unwrap();
        let loaded = load_dataset(&paths, VocabSource::Existing(vocab), false).unwrap();
        assert_eq!(loaded.unk_tokens, 6);
    }

    #[test]
    fn missing_join_names_the_clip() {
        let dir = tempfile::tempdir().unwrap();
        let mut paths = fixture(dir.path());
        paths.init_features = write(dir.path(), "init2.txt", "#dims 2\na\t1,2\nc\t5,6\n");
        let err = load_dataset(&paths, VocabSource::Build { min_count: 1 }, false).unwrap_err();
        match err {
            Error::Io(IoError::MissingJoin { line, ref id, .. }) => assert_eq!((line, id.as_str()), (2, "b")),
            other => panic!("{other:?}"),
        }
        assert!(err.to_string().contains(" b "), "{err}");
    }

    #[test]
    fn feature_file_errors_carry_line_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let d = dir.path();
        let cases = [
            ("#dims 2\na\t1,2\na\t3,4\n", "dup"),
            ("#dims 2\na\t1,2\nb\t3\n", "dim"),
            ("#dims 2\na\t1,x\n", "malformed"),
            ("#dims 2\na 1,2\n", "malformed"),
            ("a\t1,2\n", "header"),
            ("", "header"),
            ("#dims 0\n", "header"),
        ];
        for (i, (body, class)) in cases.iter().enumerate() {
            let p = write(d, &format!("f{i}.txt"), body);
            let err = read_feature_file(&p).unwrap_err();
            let ok = match (*class, &err) {
                ("dup", IoError::DuplicateId { line: 3, .. }) => true,
                ("dim", IoError::Dim { line: 3, expected: 2, got: 1, .. }) => true,
                ("malformed", IoError::Malformed { line: 2, .. }) => true,
                ("header", IoError::Malformed { line: 1, .. }) => true,
                _ => false,
            };
            assert!(ok, "case {i}: {err:?}");
        }
        let missing = read_feature_file(&d.join("nope.txt")).unwrap_err();
        assert!(matches!(missing, IoError::Io { .. }));
    }

    #[test]
    fn caption_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "c.txt", "a\tok\nno tab here\n");
        assert!(matches!(read_captions(&p), Err(IoError::Malformed { line: 2, .. })));
        let p = write(dir.path(), "c2.txt", "\tempty id\n");
        assert!(matches!(read_captions(&p), Err(IoError::Malformed { line: 1, .. })));
    }

    #[test]
    fn feature_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = FeatureTable::new(3);
        t.push("x".into(), vec![0.1, -1e-300, 1.0 / 3.0]);
        t.push("y".into(), vec![f64::MAX, -0.0, 7.0]);
        assert!(!t.push("x".into(), vec![0.0; 3]));
        let p = dir.path().join("t.txt");
        write_feature_file(&p, &t).unwrap();
        let back = read_feature_file(&p).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.get("y").unwrap()[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn score_rows_group_by_clip() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "s.txt", "#dims 2\nb\t1,2\na\t0,0\nb\t3,4\n");
        let m = read_score_file(&p).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].clip_id, "b");
        assert_eq!(m[0].rows, vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(m[1].rows, vec![vec![0.0, 0.0]]);
    }

    #[test]
    fn descriptor_files() {
        let dir = tempfile::tempdir().unwrap();
        let set = DescriptorSet {
            clip_id: "clip7".into(),
            channel: Channel::Hof,
            dim: 2,
            rows: vec![vec![1.5, -2.0], vec![0.0, 1e-7]],
        };
        let p = dir.path().join("clip7.txt");
        write_descriptor_file(&p, &set).unwrap();
        assert_eq!(read_descriptor_file(&p).unwrap(), set);

        let bad = [
            ("#dims 2\n1 2\n", 1),
            ("#dims 2 #channel sift\n1 2\n", 1),
            ("#dims 2 #channel hog\n1 2 3\n", 2),
            ("#dims 2 #channel hog\n1 two\n", 2),
        ];
        for (i, (body, line)) in bad.iter().enumerate() {
            let p = write(dir.path(), &format!("d{i}.txt"), body);
            let err = read_descriptor_file(&p).unwrap_err();
            let got = match err {
                IoError::Malformed { line, .. } | IoError::Dim { line, .. } => line,
                other => panic!("{other:?}"),
            };
            assert_eq!(got, *line, "case {i}");
        }
    }
}
