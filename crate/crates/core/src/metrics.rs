//! Corpus-level caption metrics: BLEU-4, ROUGE-L, base CIDEr, average length.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("no caption pairs to evaluate")]
    Empty,
    #[error("pair {0:?} has no references")]
    NoReferences(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPair {
    pub clip_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

impl EvalPair {
    pub fn new(clip_id: impl Into<String>, candidate: Vec<String>, references: Vec<Vec<String>>) -> Self {
        EvalPair {
            clip_id: clip_id.into(),
            candidate,
            references,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricReport {
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub avg_len: f64,
    pub perplexity: Option<f64>,
    pub pairs: usize,
    pub candidate_tokens: usize,
}

/// Numerator used when no n-gram of some order matched anywhere in the corpus.
pub const BLEU_SMOOTHING: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
const MAX_N: usize = 4;

type NgramCounts<'a> = BTreeMap<&'a [String], usize>;

fn ngrams(tokens: &[String], n: usize) -> NgramCounts<'_> {
    let mut counts = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

fn validate(pairs: &[EvalPair]) -> Result<(), MetricError> {
    if pairs.is_empty() {
        return Err(MetricError::Empty);
    }
    if let Some(p) = pairs.iter().find(|p| p.references.is_empty()) {
        return Err(MetricError::NoReferences(p.clip_id.clone()));
    }
    Ok(())
}

/// Corpus BLEU with uniform weights over 1..4-grams and a brevity penalty
/// against the closest reference length.
pub fn bleu4(pairs: &[EvalPair]) -> Result<f64, MetricError> {
    validate(pairs)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for pair in pairs {
        let c = pair.candidate.len();
        cand_len += c;
        // closest reference length, shorter wins a tie
        ref_len += pair
            .references
            .iter()
            .map(Vec::len)
            .min_by_key(|&r| (r.abs_diff(c), r))
            .expect("validated");

        for n in 1..=MAX_N {
            let cand = ngrams(&pair.candidate, n);
            let mut max_ref: NgramCounts = BTreeMap::new();
            for r in &pair.references {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in cand {
                total[n - 1] += k;
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
            }
        }
    }

    if cand_len == 0 {
        return Ok(0.0);
    }
    let log_precision: f64 = (0..MAX_N)
        .map(|i| {
            let p = if matched[i] > 0 {
                matched[i] as f64 / total[i] as f64
            } else {
                BLEU_SMOOTHING / total[i].max(1) as f64
            };
            p.ln()
        })
        .sum::<f64>()
        / MAX_N as f64;
    let bp = if cand_len < ref_len {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    } else {
        1.0
    };
    Ok(bp * log_precision.exp())
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_l_pair(cand: &[String], reference: &[String]) -> f64 {
    if cand.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let lcs = lcs_len(cand, reference) as f64;
    if lcs == 0.0 {
        return 0.0;
    }
    let precision = lcs / cand.len() as f64;
    let recall = lcs / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * precision * recall / (recall + b2 * precision)
}

/// Mean over pairs of the best LCS F-measure against any reference.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64, MetricError> {
    validate(pairs)?;
    let sum: f64 = pairs
        .iter()
        .map(|p| {
            p.references
                .iter()
                .map(|r| rouge_l_pair(&p.candidate, r))
                .fold(0.0, f64::max)
        })
        .sum();
    Ok(sum / pairs.len() as f64)
}

fn tfidf<'a>(counts: &NgramCounts<'a>, idf: &dyn Fn(&[String]) -> f64) -> (BTreeMap<&'a [String], f64>, f64) {
    let total: usize = counts.values().sum();
    let mut vec = BTreeMap::new();
    let mut norm2 = 0.0;
    for (&g, &k) in counts {
        let w = k as f64 / total as f64 * idf(g);
        norm2 += w * w;
        vec.insert(g, w);
    }
    (vec, norm2.sqrt())
}

/// Base CIDEr (no length penalty, no clipping), averaged over pairs.
///
/// Document frequency counts each pair's reference set once. Candidate
/// n-grams never seen in any reference get `df = 1`.
pub fn cider(pairs: &[EvalPair]) -> Result<f64, MetricError> {
    validate(pairs)?;
    let n_docs = pairs.len() as f64;
    let mut per_pair = vec![0.0; pairs.len()];

    for n in 1..=MAX_N {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for p in pairs {
            let set: BTreeSet<&[String]> = p
                .references
                .iter()
                .flat_map(|r| r.windows(n))
                .collect();
            for g in set {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        let idf = |g: &[String]| (n_docs / df.get(g).copied().unwrap_or(0).max(1) as f64).ln();

        for (slot, p) in per_pair.iter_mut().zip(pairs) {
            let (cv, cn) = tfidf(&ngrams(&p.candidate, n), &idf);
            let mut sum = 0.0;
            for r in &p.references {
                let (rv, rn) = tfidf(&ngrams(r, n), &idf);
                if cn == 0.0 || rn == 0.0 {
                    continue;
                }
                let dot: f64 = cv.iter().filter_map(|(g, w)| rv.get(g).map(|v| w * v)).sum();
                sum += dot / (cn * rn);
            }
            *slot += sum / p.references.len() as f64;
        }
    }
    let scale = 10.0 / MAX_N as f64;
    Ok(per_pair.iter().map(|s| s * scale).sum::<f64>() / n_docs)
}

pub fn avg_length<S: AsRef<[String]>>(candidates: &[S]) -> Result<f64, MetricError> {
    if candidates.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: usize = candidates.iter().map(|c| c.as_ref().len()).sum();
    Ok(total as f64 / candidates.len() as f64)
}

pub fn evaluate(pairs: &[EvalPair]) -> Result<MetricReport, MetricError> {
    let candidates: Vec<&[String]> = pairs.iter().map(|p| p.candidate.as_slice()).collect();
    Ok(MetricReport {
        bleu4: bleu4(pairs)?,
        rouge_l: rouge_l(pairs)?,
        cider: cider(pairs)?,
        avg_len: avg_length(&candidates)?,
        perplexity: None,
        pairs: pairs.len(),
        candidate_tokens: candidates.iter().map(|c| c.len()).sum(),
    })
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10}", "metric", "value")?;
        writeln!(f, "{:<12} {:>10.6}", "Bleu_4", self.bleu4)?;
        writeln!(f, "{:<12} {:>10.6}", "ROUGE_L", self.rouge_l)?;
        writeln!(f, "{:<12} {:>10.6}", "CIDEr", self.cider)?;
        writeln!(f, "{:<12} {:>10}", "METEOR", "n/a")?;
        writeln!(f, "{:<12} {:>10.4}", "avg.len", self.avg_len)?;
        match self.perplexity {
            Some(p) => writeln!(f, "{:<12} {:>10.4}", "perplexity", p)?,
            None => writeln!(f, "{:<12} {:>10}", "perplexity", "-")?,
        }
        write!(f, "{:<12} {:>10}", "pairs", self.pairs)
    }
}
