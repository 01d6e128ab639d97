//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 data error.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::captioner::{
    beam_decode, grad_check, perplexity, train, GradCheckConfig, OptimizerKind, TrainConfig, DEFAULT_EPS,
};
use crate::error::{Error, Result};
use crate::features::{concat_channels, kmeans_fit, late_fuse, quantize, Channel, DescriptorSet, FeatureError};
use crate::io::{
    load_codebook, load_dataset, load_model, read_captions, read_descriptor_file, read_feature_file, read_score_file,
    save_codebook, save_model, write_captions, write_feature_file, DatasetPaths, FeatureTable, IoError, VocabSource,
};
use crate::metrics::{avg_length, evaluate, EvalPair};
use crate::text::{tokenize, translate_caption, DEFAULT_MIN_COUNT};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "vidcap", version, about = "Train and evaluate an LSTM video caption generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a caption model and write a checkpoint
    Train(TrainArgs),
    /// Decode captions for every clip in a feature file
    Generate(GenerateArgs),
    /// Score candidate captions against references
    Evaluate(EvaluateArgs),
    /// Fit a k-means codebook on descriptor files of one channel
    Codebook(CodebookArgs),
    /// Turn descriptor files into concatenated bag-of-words histograms
    Quantize(QuantizeArgs),
    /// Average classifier score rows per clip
    Fuse(FuseArgs),
    /// Compare analytic and numeric gradients on random tiny models
    Gradcheck(GradcheckArgs),
}

fn positive(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v.is_finite() => Ok(v),
        _ => Err(format!("expected a positive number, got {s:?}")),
    }
}

fn at_least_one(s: &str) -> std::result::Result<usize, String> {
    match s.parse::<usize>() {
        Ok(v) if v >= 1 => Ok(v),
        _ => Err(format!("expected an integer of at least 1, got {s:?}")),
    }
}

fn unit_interval(s: &str) -> std::result::Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if (0.0..1.0).contains(&v) => Ok(v),
        _ => Err(format!("expected a number in [0, 1), got {s:?}")),
    }
}

#[derive(Debug, Args)]
struct FeatureInputs {
    /// Init feature file (`#dims d` table)
    #[arg(long)]
    init_features: PathBuf,
    /// Persistent feature file fed at every step
    #[arg(long)]
    persist_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Captions file, `clip_id<TAB>text` per line
    #[arg(long)]
    captions: PathBuf,
    #[command(flatten)]
    features: FeatureInputs,
    /// Checkpoint to write
    #[arg(long)]
    out: PathBuf,
    /// Also write the per-epoch log here
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 256, value_parser = at_least_one)]
    hidden: usize,
    #[arg(long, default_value_t = 128, value_parser = at_least_one)]
    embed_dim: usize,
    #[arg(long, default_value_t = 0.01, value_parser = positive)]
    lr: f64,
    #[arg(long, default_value_t = 0.9, value_parser = unit_interval)]
    momentum: f64,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 16, value_parser = at_least_one)]
    batch: usize,
    #[arg(long, default_value_t = 5.0, value_parser = positive)]
    clip_norm: f64,
    /// Longest caption in tokens, END included
    #[arg(long, default_value_t = 30, value_parser = at_least_one)]
    max_len: usize,
    /// Stop after this many parameter updates
    #[arg(long)]
    max_updates: Option<usize>,
    /// sgd (with momentum) or rmsprop
    #[arg(long, default_value = "sgd")]
    optimizer: OptimizerKind,
    /// Drop the LSTM gate biases
    #[arg(long)]
    no_bias: bool,
    /// Map man, woman, person, boy and girl to SOMEONE
    #[arg(long)]
    translate: bool,
    #[arg(long, default_value_t = DEFAULT_MIN_COUNT, value_parser = at_least_one)]
    min_count: usize,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    features: FeatureInputs,
    /// Captions file to write
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = at_least_one)]
    beam: usize,
    /// Defaults to the model's max caption length
    #[arg(long, value_parser = at_least_one)]
    max_len: Option<usize>,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// One caption per clip
    #[arg(long)]
    candidates: PathBuf,
    /// One or more captions per clip
    #[arg(long)]
    references: PathBuf,
    #[arg(long)]
    translate: bool,
    /// Write the report as JSON here as well
    #[arg(long)]
    json: Option<PathBuf>,
    /// Report the model's perplexity on the references
    #[arg(long, requires = "init_features")]
    model: Option<PathBuf>,
    #[arg(long, requires = "model")]
    init_features: Option<PathBuf>,
    #[arg(long, requires = "model")]
    persist_features: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CodebookArgs {
    /// Descriptor files, all of one channel
    #[arg(long, num_args = 1.., required = true)]
    descriptors: Vec<PathBuf>,
    #[arg(long, value_parser = at_least_one)]
    k: usize,
    #[arg(long, default_value_t = 100)]
    max_iter: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    /// One codebook per channel
    #[arg(long, num_args = 1.., required = true)]
    codebook: Vec<PathBuf>,
    #[arg(long, num_args = 1.., required = true)]
    descriptors: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Keep raw counts instead of L1-normalized histograms
    #[arg(long)]
    no_normalize_hist: bool,
}

#[derive(Debug, Args)]
struct FuseArgs {
    #[arg(long)]
    scores: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100, value_parser = at_least_one)]
    configs: usize,
    #[arg(long, default_value_t = DEFAULT_EPS, value_parser = positive)]
    eps: f64,
    #[arg(long, default_value_t = 1e-4, value_parser = positive)]
    tolerance: f64,
}

/// Runs the CLI with process stdout and stderr.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}

pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{text}");
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match cli.command {
        Command::Train(a) => cmd_train(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::Evaluate(a) => cmd_evaluate(a, out),
        Command::Codebook(a) => cmd_codebook(a, out),
        Command::Quantize(a) => cmd_quantize(a, out),
        Command::Fuse(a) => cmd_fuse(a, out),
        Command::Gradcheck(a) => cmd_gradcheck(a, out),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            EXIT_DATA
        }
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |source| {
        IoError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    }
}

fn say(out: &mut dyn Write, text: std::fmt::Arguments<'_>) -> Result<()> {
    out.write_fmt(text).map_err(io_err(Path::new("<stdout>")))
}

fn cmd_train(a: TrainArgs, out: &mut dyn Write) -> Result<i32> {
    let paths = DatasetPaths {
        captions: a.captions,
        init_features: a.features.init_features,
        persist_features: a.features.persist_features,
    };
    let loaded = load_dataset(&paths, VocabSource::Build { min_count: a.min_count }, a.translate)?;
    say(
        out,
        format_args!(
            "loaded {} captions, vocabulary {}, {} of {} tokens mapped to UNK\n",
            loaded.dataset.len(),
            loaded.dataset.vocab.len(),
            loaded.unk_tokens,
            loaded.total_tokens
        ),
    )?;
    let config = TrainConfig {
        hidden: a.hidden,
        embed_dim: a.embed_dim,
        learning_rate: a.lr,
        momentum: a.momentum,
        grad_clip_norm: a.clip_norm,
        epochs: a.epochs,
        batch_size: a.batch,
        seed: a.seed,
        optimizer: a.optimizer,
        max_caption_len: a.max_len,
        use_bias: !a.no_bias,
        max_updates: a.max_updates,
        ..TrainConfig::default()
    };
    let (model, log) = train(&loaded.dataset, &config)?;
    say(out, format_args!("{log}"))?;
    if let Some(p) = &a.log {
        std::fs::write(p, log.to_string()).map_err(io_err(p))?;
    }
    save_model(&a.out, &model, a.seed)?;
    say(out, format_args!("wrote {}\n", a.out.display()))?;
    Ok(EXIT_OK)
}

fn feature_rows(features: &FeatureInputs) -> Result<Vec<(String, Array1<f64>, Option<Array1<f64>>)>> {
    let init = read_feature_file(&features.init_features)?;
    let persist = features.persist_features.as_deref().map(read_feature_file).transpose()?;
    let mut rows = Vec::with_capacity(init.len());
    for (i, (id, values)) in init.rows.iter().enumerate() {
        let p = match (&persist, &features.persist_features) {
            (Some(t), Some(path)) => Some(Array1::from(
                t.get(id)
                    .ok_or_else(|| IoError::MissingJoin {
                        path: features.init_features.clone(),
                        line: i + 2,
                        id: id.clone(),
                        features: path.clone(),
                    })?
                    .to_vec(),
            )),
            _ => None,
        };
        rows.push((id.clone(), Array1::from(values.clone()), p));
    }
    Ok(rows)
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> Result<i32> {
    let model = load_model(&a.model)?;
    let max_len = a.max_len.unwrap_or(model.config.max_caption_len);
    let mut records = Vec::new();
    let mut lengths = Vec::new();
    for (id, init, persist) in feature_rows(&a.features)? {
        let decoded = beam_decode(&model, &init, persist.as_ref(), a.beam, max_len)?;
        let words = model.vocab.decode(&decoded.tokens)?;
        records.push((id, words.join(" ")));
        lengths.push(words);
    }
    write_captions(&a.out, &records)?;
    let mean = if lengths.is_empty() { 0.0 } else { avg_length(&lengths)? };
    say(
        out,
        format_args!(
            "wrote {} captions to {} (beam {}, mean length {:.4})\n",
            records.len(),
            a.out.display(),
            a.beam,
            mean
        ),
    )?;
    Ok(EXIT_OK)
}

fn caption_tokens(text: &str, translate: bool) -> Vec<String> {
    let t = tokenize(text);
    if translate {
        translate_caption(&t)
    } else {
        t
    }
}

fn cmd_evaluate(a: EvaluateArgs, out: &mut dyn Write) -> Result<i32> {
    let candidates = read_captions(&a.candidates)?;
    let references = read_captions(&a.references)?;
    let mut refs: HashMap<&str, Vec<Vec<String>>> = HashMap::new();
    for r in &references {
        refs.entry(r.clip_id.as_str()).or_default().push(caption_tokens(&r.text, a.translate));
    }
    let mut pairs = Vec::with_capacity(candidates.len());
    let mut seen = HashMap::new();
    for c in &candidates {
        if seen.insert(c.clip_id.as_str(), c.line).is_some() {
            return Err(IoError::DuplicateId {
                path: a.candidates.clone(),
                line: c.line,
                id: c.clip_id.clone(),
            }
            .into());
        }
        let r = refs.get(c.clip_id.as_str()).ok_or_else(|| IoError::MissingJoin {
            path: a.candidates.clone(),
            line: c.line,
            id: c.clip_id.clone(),
            features: a.references.clone(),
        })?;
        pairs.push(EvalPair::new(c.clip_id.clone(), caption_tokens(&c.text, a.translate), r.clone()));
    }
    let mut report = evaluate(&pairs)?;
    if let (Some(model_path), Some(init)) = (&a.model, &a.init_features) {
        let model = load_model(model_path)?;
        let paths = DatasetPaths {
            captions: a.references.clone(),
            init_features: init.clone(),
            persist_features: a.persist_features.clone(),
        };
        let loaded = load_dataset(&paths, VocabSource::Existing(model.vocab.clone()), a.translate)?;
        report.perplexity = Some(perplexity(&model, &loaded.dataset)?);
    }
    let json = serde_json::to_string(&report).expect("report serializes");
    say(out, format_args!("{report}\n{json}\n"))?;
    if let Some(p) = &a.json {
        std::fs::write(p, format!("{json}\n")).map_err(io_err(p))?;
    }
    Ok(EXIT_OK)
}

fn cmd_codebook(a: CodebookArgs, out: &mut dyn Write) -> Result<i32> {
    let mut rows = Vec::new();
    let mut layout: Option<(Channel, usize, &Path)> = None;
    for path in &a.descriptors {
        let set = read_descriptor_file(path)?;
        match layout {
            None => layout = Some((set.channel, set.dim, path)),
            Some((channel, dim, first)) => {
                if set.channel != channel || set.dim != dim {
                    return Err(IoError::malformed(
                        path,
                        1,
                        format!(
                            "channel {} with {} dims differs from {} with {} dims in {}",
                            set.channel,
                            set.dim,
                            channel,
                            dim,
                            first.display()
                        ),
                    )
                    .into());
                }
            }
        }
        rows.extend(set.rows);
    }
    let (channel, _, _) = layout.expect("clap requires at least one file");
    let mut codebook = kmeans_fit(&rows, a.k, a.seed, a.max_iter)?;
    codebook.channel = Some(channel);
    save_codebook(&a.out, &codebook)?;
    say(
        out,
        format_args!(
            "channel {channel}: {} descriptors, k {}, {} iterations, final SSE {:.6e}\nwrote {}\n",
            rows.len(),
            codebook.k(),
            codebook.iterations,
            codebook.final_sse(),
            a.out.display()
        ),
    )?;
    Ok(EXIT_OK)
}

fn cmd_quantize(a: QuantizeArgs, out: &mut dyn Write) -> Result<i32> {
    let mut books = HashMap::new();
    for path in &a.codebook {
        let cb = load_codebook(path)?;
        let channel = cb
            .channel
            .ok_or_else(|| IoError::malformed(path, 4, "codebook has no channel"))?;
        if books.insert(channel, cb).is_some() {
            return Err(IoError::malformed(path, 4, format!("second codebook for channel {channel}")).into());
        }
    }
    let order: Vec<Channel> = Channel::ALL.into_iter().filter(|c| books.contains_key(c)).collect();

    let mut clips: Vec<String> = Vec::new();
    let mut sets: HashMap<(String, Channel), DescriptorSet> = HashMap::new();
    for path in &a.descriptors {
        let set = read_descriptor_file(path)?;
        if !books.contains_key(&set.channel) {
            return Err(IoError::malformed(path, 1, format!("no codebook given for channel {}", set.channel)).into());
        }
        if !clips.contains(&set.clip_id) {
            clips.push(set.clip_id.clone());
        }
        let key = (set.clip_id.clone(), set.channel);
        if sets.contains_key(&key) {
            return Err(IoError::DuplicateId {
                path: path.clone(),
                line: 1,
                id: format!("{} ({})", set.clip_id, set.channel),
            }
            .into());
        }
        sets.insert(key, set);
    }

    let dim = order.iter().map(|c| books[c].k()).sum();
    let mut table = FeatureTable::new(dim);
    for clip in clips {
        let mut parts = Vec::with_capacity(order.len());
        for &channel in &order {
            let set = sets
                .get(&(clip.clone(), channel))
                .ok_or(FeatureError::MissingChannel(channel))?;
            parts.push((channel, quantize(&books[&channel], &set.rows, !a.no_normalize_hist)?));
        }
        table.push(clip, concat_channels(&order, &parts)?);
    }
    write_feature_file(&a.out, &table)?;
    say(
        out,
        format_args!("wrote {} histograms of {} bins to {}\n", table.len(), dim, a.out.display()),
    )?;
    Ok(EXIT_OK)
}

fn cmd_fuse(a: FuseArgs, out: &mut dyn Write) -> Result<i32> {
    let matrices = read_score_file(&a.scores)?;
    let first = matrices
        .first()
        .ok_or_else(|| IoError::malformed(&a.scores, 2, "no score rows"))?;
    let mut table = FeatureTable::new(first.rows[0].len());
    for m in &matrices {
        table.push(m.clip_id.clone(), late_fuse(m)?);
    }
    write_feature_file(&a.out, &table)?;
    say(
        out,
        format_args!("fused {} clips over {} categories into {}\n", table.len(), table.dim, a.out.display()),
    )?;
    Ok(EXIT_OK)
}

fn cmd_gradcheck(a: GradcheckArgs, out: &mut dyn Write) -> Result<i32> {
    let mut rng = ChaCha8Rng::seed_from_u64(a.seed);
    let mut worst: f64 = 0.0;
    for i in 0..a.configs {
        let config = GradCheckConfig::random(&mut rng, if i % 2 == 0 { 0 } else { 3 });
        let report = grad_check(&config, a.seed.wrapping_add(i as u64), a.eps)?;
        say(
            out,
            format_args!(
                "config {i}: words {} embed {} hidden {} persist {} len {}: max rel error {:.3e} at {}\n",
                config.words,
                config.embed_dim,
                config.hidden,
                config.persist_dim,
                config.caption_len,
                report.max_rel_error,
                report.worst
            ),
        )?;
        worst = worst.max(report.max_rel_error);
    }
    let ok = worst < a.tolerance;
    say(
        out,
        format_args!(
            "max relative error {worst:.3e} over {} configs: {}\n",
            a.configs,
            if ok { "ok" } else { "FAILED" }
        ),
    )?;
    Ok(if ok { EXIT_OK } else { EXIT_DATA })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_capture(args: &[&str]) -> (i32, String, String) {
        let mut out = Vec::new();
        let mut err = Vec::new();
        let code = run_with(std::iter::once("vidcap").chain(args.iter().copied()), &mut out, &mut err);
        (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(run_capture(&[]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["bogus"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["fuse", "--scores", "a", "--out", "b", "--frobnicate"]).0, EXIT_USAGE);
        assert_eq!(run_capture(&["generate", "--model", "m", "--init-features", "f", "--out", "o", "--beam", "0"]).0, EXIT_USAGE);
        let (code, _, err) = run_capture(&["train", "--captions", "c", "--init-features", "f", "--out", "o", "--lr=-1"]);
        assert_eq!(code, EXIT_USAGE);
        assert!(err.contains("positive"), "{err}");
    }

    #[test]
    fn help_and_version_exit_zero() {
        let (code, out, _) = run_capture(&["--help"]);
        assert_eq!(code, EXIT_OK);
        assert!(out.contains("gradcheck"));
        assert_eq!(run_capture(&["--version"]).0, EXIT_OK);
    }

    #[test]
    fn missing_file_is_a_data_error() {
        let (code, _, err) = run_capture(&["fuse", "--scores", "/nonexistent/scores.txt", "--out", "/tmp/x"]);
        assert_eq!(code, EXIT_DATA);
        assert!(err.contains("/nonexistent/scores.txt"), "{err}");
    }

    #[test]
    fn gradcheck_command_reports() {
        let (code, out, _) = run_capture(&["gradcheck", "--configs", "3", "--seed", "4"]);
        assert_eq!(code, EXIT_OK, "{out}");
        assert_eq!(out.lines().count(), 4);
        assert!(out.ends_with("ok\n"));
    }
}
