//! Command-line surface: `train | encode | retrieve | generate | eval |
//! param-count | expand-vocab`.
//!
//! Settings come from an optional `key=value` file (`--config`) and
//! `--key value` flags, flags winning. Unknown keys are rejected and the
//! effective configuration is echoed to stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::embeddings::{
    init_embeddings, learn_expansion_projection, EmbeddingSource, Expansion, PretrainedEmbeddings,
    Ridge,
};
use crate::error::{Error, Result};
use crate::evaluation::{
    cross_val_predict, metrics, pair_feature_matrix, parse_class_tsv, parse_pair_tsv, HeadConfig,
    HeadKind, Task,
};
use crate::model::{
    count_params, encode_inputs, greedy_decode, ModelConfig, SentenceVector, WordInput,
};
use crate::numerics::Tensor;
use crate::retrieval::{format_vectors, parse_vectors, rank_all};
use crate::training::{
    build_vocab, init_params, load_checkpoint, make_pairs, save_checkpoint, train_from, Checkpoint,
    EpochLoss, TrainConfig,
};

pub const USAGE: &str = "\
usage: tskip <command> [--config FILE] [--key value ...]

commands:
  train         --corpus FILE --out CKPT [--loss-csv FILE] [--resume CKPT]
  encode        --checkpoint CKPT --input FILE [--out FILE]
  retrieve      --checkpoint CKPT --query FILE --database FILE [--top-k N]
                (--vectors treats query/database as vectors files)
  generate      --checkpoint CKPT --input FILE [--max-len N]
  eval          --checkpoint CKPT --task pair|class --data FILE [--labels score|binary]
  param-count   [model keys]
  expand-vocab  --checkpoint CKPT --pretrained FILE --out CKPT

model keys:  vocab_size embed_dim encoder_kind encoder_dim connection decoder_dim targets
train keys:  batch_size max_len epochs seed lr beta1 beta2 eps init_range shards
eval keys:   bins folds head_steps head_lr head_l2 json
";

/// Every setting a command can read.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub head: HeadConfig,
    pub corpus: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub query: Option<PathBuf>,
    pub database: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub pretrained: Option<PathBuf>,
    pub loss_csv: Option<PathBuf>,
    pub top_k: usize,
    pub vectors: bool,
    pub task: Option<String>,
    pub labels: String,
    pub bins: usize,
    pub folds: usize,
    pub json: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            head: HeadConfig::default(),
            corpus: None,
            out: None,
            checkpoint: None,
            resume: None,
            input: None,
            query: None,
            database: None,
            data: None,
            pretrained: None,
            loss_csv: None,
            top_k: 5,
            vectors: false,
            task: None,
            labels: "score".into(),
            bins: 5,
            folds: 10,
            json: false,
        }
    }
}

const BOOL_KEYS: [&str; 2] = ["vectors", "json"];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected true or false, got {value:?}"
        ))),
    }
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

impl RunConfig {
    /// Sets one key; dashes in `key` are treated as underscores.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('-', "_");
        if self.model.set(&key, value)? {
            return Ok(());
        }
        let path = || Some(PathBuf::from(value));
        match key.as_str() {
            "batch_size" => self.train.batch_size = parse_num(&key, value)?,
            "max_len" => self.train.max_len = parse_num(&key, value)?,
            "epochs" => self.train.epochs = parse_num(&key, value)?,
            "seed" => self.train.seed = parse_num(&key, value)?,
            "lr" => self.train.adam.lr = parse_num(&key, value)?,
            "beta1" => self.train.adam.beta1 = parse_num(&key, value)?,
            "beta2" => self.train.adam.beta2 = parse_num(&key, value)?,
            "eps" => self.train.adam.eps = parse_num(&key, value)?,
            "init_range" => self.train.init_range = parse_num(&key, value)?,
            "shards" => self.train.shards = parse_num(&key, value)?,
            "head_steps" => self.head.steps = parse_num(&key, value)?,
            "head_lr" => self.head.lr = parse_num(&key, value)?,
            "head_l2" => self.head.l2 = parse_num(&key, value)?,
            "corpus" => self.corpus = path(),
            "out" => self.out = path(),
            "checkpoint" => self.checkpoint = path(),
            "resume" => self.resume = path(),
            "input" => self.input = path(),
            "query" => self.query = path(),
            "database" => self.database = path(),
            "data" => self.data = path(),
            "pretrained" => self.pretrained = path(),
            "loss_csv" => self.loss_csv = path(),
            "top_k" => self.top_k = parse_num(&key, value)?,
            "vectors" => self.vectors = parse_bool(&key, value)?,
            "task" => self.task = Some(value.to_string()),
            "labels" => self.labels = value.to_string(),
            "bins" => self.bins = parse_num(&key, value)?,
            "folds" => self.folds = parse_num(&key, value)?,
            "json" => self.json = parse_bool(&key, value)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key=value` file body; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: "expected key=value".into(),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    /// Builds from `--key value` flags, loading `--config FILE` first so
    /// that flags override it regardless of position.
    pub fn from_args(args: &[String]) -> Result<Self> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut config_file = None;
        let mut i = 0;
        while i < args.len() {
            let key = args[i]
                .strip_prefix("--")
                .ok_or_else(|| Error::Usage(format!("unexpected argument {:?}", args[i])))?
                .replace('-', "_");
            let next = args.get(i + 1).filter(|v| !v.starts_with("--"));
            let value = match next {
                Some(v) => {
                    i += 2;
                    v.clone()
                }
                None if BOOL_KEYS.contains(&key.as_str()) => {
                    i += 1;
                    "true".into()
                }
                None => return Err(Error::Usage(format!("--{key} needs a value"))),
            };
            if key == "config" {
                config_file = Some(PathBuf::from(value));
            } else {
                pairs.push((key, value));
            }
        }
        let mut cfg = RunConfig::default();
        if let Some(path) = config_file {
            let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            cfg.apply_text(&text, &path.display().to_string())?;
        }
        for (k, v) in pairs {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Effective settings as sorted `key=value` lines.
    pub fn to_kv(&self) -> String {
        let t = &self.train;
        let mut entries: Vec<(String, String)> = self
            .model
            .entries()
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        entries.extend(
            [
                ("batch_size", t.batch_size.to_string()),
                ("max_len", t.max_len.to_string()),
                ("epochs", t.epochs.to_string()),
                ("seed", t.seed.to_string()),
                ("lr", t.adam.lr.to_string()),
                ("beta1", t.adam.beta1.to_string()),
                ("beta2", t.adam.beta2.to_string()),
                ("eps", t.adam.eps.to_string()),
                ("init_range", t.init_range.to_string()),
                ("shards", t.shards.to_string()),
                ("head_steps", self.head.steps.to_string()),
                ("head_lr", self.head.lr.to_string()),
                ("head_l2", self.head.l2.to_string()),
                ("corpus", show_path(&self.corpus)),
                ("out", show_path(&self.out)),
                ("checkpoint", show_path(&self.checkpoint)),
                ("resume", show_path(&self.resume)),
                ("input", show_path(&self.input)),
                ("query", show_path(&self.query)),
                ("database", show_path(&self.database)),
                ("data", show_path(&self.data)),
                ("pretrained", show_path(&self.pretrained)),
                ("loss_csv", show_path(&self.loss_csv)),
                ("top_k", self.top_k.to_string()),
                ("vectors", self.vectors.to_string()),
                ("task", self.task.clone().unwrap_or_default()),
                ("labels", self.labels.clone()),
                ("bins", self.bins.to_string()),
                ("folds", self.folds.to_string()),
                ("json", self.json.to_string()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v)),
        );
        entries.sort();
        entries
            .into_iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Usage(format!("--{} is required", key.replace('_', "-"))))
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn out_err(e: std::io::Error) -> Error {
    Error::io("<stdout>", e)
}

/// Sentence encoding with the checkpoint's vocabulary, consulting the
/// expansion table for unknown words before falling back to UNK.
pub struct SentenceEncoder<'a> {
    ck: &'a Checkpoint,
}

impl<'a> SentenceEncoder<'a> {
    pub fn new(ck: &'a Checkpoint) -> Self {
        SentenceEncoder { ck }
    }

    pub fn inputs(&self, sentence: &str) -> Result<Vec<WordInput>> {
        sentence
            .split_whitespace()
            .map(|w| {
                if let Some(id) = self.ck.vocab.id(w) {
                    return Ok(WordInput::Token(id));
                }
                match self.ck.expansion.as_ref().map(|x| x.embed(w)) {
                    Some(Ok(v)) => Ok(WordInput::Vector(v)),
                    Some(Err(Error::OutOfVocabulary(_))) | None => {
                        Ok(WordInput::Token(crate::training::vocab::UNK))
                    }
                    Some(Err(e)) => Err(e),
                }
            })
            .collect()
    }

    pub fn encode(&self, sentence: &str) -> Result<SentenceVector> {
        encode_inputs(&self.ck.params, &self.ck.config, &self.inputs(sentence)?)
    }

    /// Encodes lines into a matrix, one row per line, splitting work across
    /// `workers` threads and reassembling in input order.
    pub fn encode_all(&self, lines: &[&str], workers: usize) -> Result<Tensor> {
        if lines.is_empty() {
            return Err(Error::Empty("input sentences"));
        }
        let chunk = lines.len().div_ceil(workers.clamp(1, lines.len()));
        let parts: Vec<Result<Vec<SentenceVector>>> = std::thread::scope(|s| {
            let handles: Vec<_> = lines
                .chunks(chunk)
                .map(|c| {
                    s.spawn(move || c.iter().map(|l| self.encode(l)).collect::<Result<Vec<_>>>())
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("encoder worker panicked"))
                .collect()
        });
        let mut rows = Vec::with_capacity(lines.len());
        for p in parts {
            rows.extend(p?);
        }
        Tensor::stack_rows(&rows.iter().map(SentenceVector::tensor).collect::<Vec<_>>())
    }
}

/// Non-blank lines; a blank line is an error because every input line must
/// map to one output line.
fn sentence_lines<'t>(text: &'t str, origin: &Path) -> Result<Vec<&'t str>> {
    let lines: Vec<&str> = text.lines().collect();
    if let Some(i) = lines.iter().position(|l| l.trim().is_empty()) {
        return Err(Error::Parse {
            path: origin.display().to_string(),
            line: i + 1,
            msg: "blank line where a sentence was expected".into(),
        });
    }
    if lines.is_empty() {
        return Err(Error::Empty("input sentences"));
    }
    Ok(lines)
}

fn loss_csv(history: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,loss,tokens\n");
    for e in history {
        s.push_str(&format!("{},{},{}\n", e.epoch, e.loss, e.tokens));
    }
    s
}

pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let corpus_path = require(&cfg.corpus, "corpus")?;
    let ck_path = require(&cfg.out, "out")?;
    let text = read_text(corpus_path)?;
    let (model_cfg, vocab, params, adam) = match &cfg.resume {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            (ck.config, ck.vocab, ck.params, ck.adam)
        }
        None => {
            let vocab = build_vocab(text.lines(), cfg.model.vocab_size)?;
            let model_cfg = ModelConfig {
                vocab_size: vocab.len(),
                ..cfg.model.clone()
            };
            let mut params = init_params(&model_cfg, &cfg.train)?;
            if let Some(p) = &cfg.pretrained {
                let table = PretrainedEmbeddings::load(p)?;
                let r = cfg.train.init_range;
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
                rng.set_stream(2);
                let src = EmbeddingSource::Pretrained {
                    table: &table,
                    lo: -r,
                    hi: r,
                };
                params.embedding = init_embeddings(&vocab, &src, model_cfg.embed_dim, &mut rng)?;
            }
            (model_cfg, vocab, params, None)
        }
    };
    let pairs = make_pairs(&text, &vocab)?;
    let tc = TrainConfig {
        adam: adam.as_ref().map_or(cfg.train.adam, |a| a.config),
        ..cfg.train.clone()
    };
    let outcome = train_from(&model_cfg, params, adam, &pairs, &tc)?;
    let mut ck = Checkpoint::new(model_cfg, vocab, outcome.params);
    ck.adam = Some(outcome.adam);
    save_checkpoint(ck_path, &ck)?;
    let csv_path = cfg.loss_csv.clone().unwrap_or_else(|| {
        let mut p = ck_path.as_os_str().to_owned();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    write_text(&csv_path, &loss_csv(&outcome.history))?;
    let last = outcome.history.last().map_or(f64::NAN, |e| e.loss);
    writeln!(
        out,
        "pairs={} epochs={} final_loss={last:.6}",
        pairs.len(),
        outcome.history.len()
    )
    .map_err(out_err)?;
    Ok(())
}

fn load_ck(cfg: &RunConfig) -> Result<Checkpoint> {
    load_checkpoint(require(&cfg.checkpoint, "checkpoint")?)
}

pub fn cmd_encode(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ck = load_ck(cfg)?;
    let input = require(&cfg.input, "input")?;
    let text = read_text(input)?;
    let lines = sentence_lines(&text, input)?;
    let vectors = SentenceEncoder::new(&ck).encode_all(&lines, cfg.train.shards)?;
    let body = format_vectors(&vectors);
    match &cfg.out {
        Some(p) => write_text(p, &body),
        None => out.write_all(body.as_bytes()).map_err(out_err),
    }
}

pub fn cmd_retrieve(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let qpath = require(&cfg.query, "query")?;
    let dpath = require(&cfg.database, "database")?;
    let (qtext, dtext) = (read_text(qpath)?, read_text(dpath)?);
    let (queries, database, dlines) = if cfg.vectors {
        let q = parse_vectors(&qtext, &qpath.display().to_string())?;
        let d = parse_vectors(&dtext, &dpath.display().to_string())?;
        (q, d, None)
    } else {
        let ck = load_ck(cfg)?;
        let enc = SentenceEncoder::new(&ck);
        let ql = sentence_lines(&qtext, qpath).map_err(|e| match e {
            Error::Empty(_) => Error::Empty("query sentences"),
            e => e,
        })?;
        let dl = sentence_lines(&dtext, dpath).map_err(|e| match e {
            Error::Empty(_) => Error::Empty("retrieval database"),
            e => e,
        })?;
        let q = enc.encode_all(&ql, cfg.train.shards)?;
        let d = enc.encode_all(&dl, cfg.train.shards)?;
        (q, d, Some(dl))
    };
    let ranked = rank_all(&queries, &database, cfg.top_k)?;
    writeln!(out, "query\trank\tindex\tcosine\tsentence").map_err(out_err)?;
    for (qi, hits) in ranked.iter().enumerate() {
        for (rank, n) in hits.iter().enumerate() {
            let text = dlines.as_ref().map_or("", |d| d[n.index]);
            writeln!(
                out,
                "{qi}\t{}\t{}\t{:.6}\t{text}",
                rank + 1,
                n.index,
                n.score
            )
            .map_err(out_err)?;
        }
    }
    Ok(())
}

pub fn cmd_generate(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let ck = load_ck(cfg)?;
    let input = require(&cfg.input, "input")?;
    let text = read_text(input)?;
    let enc = SentenceEncoder::new(&ck);
    let mut body = String::new();
    for line in sentence_lines(&text, input)? {
        let z = enc.encode(line)?;
        let ids = greedy_decode(&ck.params, &z, cfg.train.max_len)?;
        body.push_str(&ck.vocab.decode(&ids));
        body.push('\n');
    }
    match &cfg.out {
        Some(p) => write_text(p, &body),
        None => out.write_all(body.as_bytes()).map_err(out_err),
    }
}

pub fn cmd_eval(cfg: &RunConfig, out: &mut dyn Write, log: &mut dyn Write) -> Result<()> {
    let ck = load_ck(cfg)?;
    let data = require(&cfg.data, "data")?;
    let text = read_text(data)?;
    let origin = data.display().to_string();
    let enc = SentenceEncoder::new(&ck);
    let (features, targets, kind, task) = match cfg.task.as_deref() {
        Some("pair") => {
            let examples = parse_pair_tsv(&text, &origin)?;
            let a: Vec<&str> = examples.iter().map(|e| e.sentence_a.as_str()).collect();
            let b: Vec<&str> = examples.iter().map(|e| e.sentence_b.as_str()).collect();
            let feats = pair_feature_matrix(
                &enc.encode_all(&a, cfg.train.shards)?,
                &enc.encode_all(&b, cfg.train.shards)?,
            )?;
            let targets: Vec<f64> = examples.iter().map(|e| e.label).collect();
            match cfg.labels.as_str() {
                "score" => (
                    feats,
                    targets,
                    HeadKind::SoftmaxBins(cfg.bins),
                    Task::Relatedness,
                ),
                "binary" => (feats, targets, HeadKind::Binary, Task::Binary),
                other => {
                    return Err(Error::Config(format!(
                        "labels must be score or binary, got {other:?}"
                    )))
                }
            }
        }
        Some("class") => {
            let examples = parse_class_tsv(&text, &origin)?;
            let sentences: Vec<&str> = examples.iter().map(|e| e.sentence.as_str()).collect();
            let feats = enc.encode_all(&sentences, cfg.train.shards)?;
            let targets: Vec<f64> = examples.iter().map(|e| e.label as f64).collect();
            let classes = examples.iter().map(|e| e.label).max().unwrap_or(0) + 1;
            if classes <= 2 {
                (feats, targets, HeadKind::Binary, Task::Binary)
            } else {
                (
                    feats,
                    targets,
                    HeadKind::Multiclass(classes),
                    Task::Multiclass,
                )
            }
        }
        Some(other) => {
            return Err(Error::Usage(format!(
                "--task must be pair or class, got {other:?}"
            )))
        }
        None => return Err(Error::Usage("--task is required".into())),
    };
    if targets.iter().all(|&t| t == targets[0]) {
        writeln!(
            log,
            "warning: degenerate data: every label is {}",
            targets[0]
        )
        .map_err(out_err)?;
    }
    let cv = cross_val_predict(
        &features,
        &targets,
        kind,
        cfg.folds,
        cfg.train.seed,
        &cfg.head,
    )?;
    for w in &cv.warnings {
        writeln!(log, "warning: {w}").map_err(out_err)?;
    }
    let report = metrics(&cv.predictions, &targets, task)?;
    write!(out, "{report}").map_err(out_err)?;
    if cfg.json {
        writeln!(out, "json={}", report.to_json()).map_err(out_err)?;
    }
    Ok(())
}

pub fn cmd_param_count(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    cfg.model.validate()?;
    let counts = count_params(&cfg.model);
    writeln!(out, "{counts}").map_err(out_err)?;
    writeln!(out, "total={}", counts.total()).map_err(out_err)?;
    Ok(())
}

pub fn cmd_expand_vocab(cfg: &RunConfig, out: &mut dyn Write) -> Result<()> {
    let mut ck = load_ck(cfg)?;
    let table = PretrainedEmbeddings::load(require(&cfg.pretrained, "pretrained")?)?;
    let dest = require(&cfg.out, "out")?;
    let m = learn_expansion_projection(&table, &ck.params.embedding, &ck.vocab, Ridge::Rescue)?;
    let shared = ck
        .vocab
        .ranked()
        .filter(|(w, _)| table.get(w).is_some())
        .count();
    ck.expansion = Some(Expansion::new(m, table)?);
    save_checkpoint(dest, &ck)?;
    writeln!(
        out,
        "shared={shared} pretrained_dim={}",
        ck.expansion.as_ref().map_or(0, |x| x.projection.rows())
    )
    .map_err(out_err)?;
    Ok(())
}

/// Parses `args` (without the program name), runs the command and returns
/// the process exit code. Errors are reported on `err`.
pub fn run(args: &[String], out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let Some(cmd) = args.first() else {
        let _ = write!(err, "{USAGE}");
        return 2;
    };
    if matches!(cmd.as_str(), "-h" | "--help" | "help") {
        let _ = write!(out, "{USAGE}");
        return 0;
    }
    let result = RunConfig::from_args(&args[1..]).and_then(|cfg| {
        let _ = write!(err, "# {cmd}\n{}", cfg.to_kv());
        match cmd.as_str() {
            "train" => cmd_train(&cfg, out),
            "encode" => cmd_encode(&cfg, out),
            "retrieve" => cmd_retrieve(&cfg, out),
            "generate" => cmd_generate(&cfg, out),
            "eval" => cmd_eval(&cfg, out, err),
            "param-count" => cmd_param_count(&cfg, out),
            "expand-vocab" => cmd_expand_vocab(&cfg, out),
            other => Err(Error::Usage(format!("unknown command {other:?}\n{USAGE}"))),
        }
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}
