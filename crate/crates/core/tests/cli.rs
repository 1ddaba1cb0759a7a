//! End-to-end runs of the `tskip` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use tempfile::TempDir;
use tskip::app::SentenceEncoder;
use tskip::embeddings::PretrainedEmbeddings;
use tskip::retrieval::{cosine, parse_vectors};
use tskip::training::load_checkpoint;
use tskip::Tensor;

const FIXTURE: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy_corpus.txt");

fn tskip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tskip"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(args: &[&str]) -> String {
    let o = tskip(args);
    assert!(o.status.success(), "tskip {args:?} failed:\n{}", stderr(&o));
    stdout(&o)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train_args<'a>(corpus: &'a str, out: &'a str, epochs: &'a str) -> Vec<&'a str> {
    vec![
        "train",
        "--corpus",
        corpus,
        "--out",
        out,
        "--embed-dim",
        "16",
        "--encoder-dim",
        "64",
        "--decoder-dim",
        "64",
        "--batch-size",
        "8",
        "--lr",
        "0.01",
        "--epochs",
        epochs,
    ]
}

struct Trained {
    dir: TempDir,
    ckpt: PathBuf,
    report: String,
}

/// The fixture memorized once and shared across tests.
fn trained() -> &'static Trained {
    static CELL: OnceLock<Trained> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("toy.tskp");
        let report = ok(&train_args(FIXTURE, s(&ckpt), "200"));
        Trained { dir, ckpt, report }
    })
}

fn fixture_documents() -> Vec<Vec<String>> {
    std::fs::read_to_string(FIXTURE)
        .unwrap()
        .split("\n\n")
        .map(|d| {
            d.lines()
                .filter(|l| !l.trim().is_empty())
                .map(str::to_string)
                .collect::<Vec<_>>()
        })
        .filter(|d| !d.is_empty())
        .collect()
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p
}

fn final_loss(report: &str) -> f64 {
    report
        .split_whitespace()
        .find_map(|kv| kv.strip_prefix("final_loss="))
        .unwrap()
        .parse()
        .unwrap()
}

#[test]
fn train_memorizes_fixture_and_saves_loadable_checkpoint() {
    let t = trained();
    assert!(t.report.starts_with("pairs=32 epochs=200"), "{}", t.report);
    assert!(final_loss(&t.report) < 0.05, "{}", t.report);
    let ck = load_checkpoint(&t.ckpt).unwrap();
    assert_eq!(ck.config.sentence_dim(), 64);
    assert!(ck.adam.is_some());
    let csv = std::fs::read_to_string(format!("{}.loss.csv", s(&t.ckpt))).unwrap();
    assert_eq!(csv.lines().next(), Some("epoch,loss,tokens"));
    assert_eq!(csv.lines().count(), 201);
}

#[test]
fn missing_corpus_exits_2_without_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("never.tskp");
    let o = tskip(&[
        "train",
        "--corpus",
        s(&dir.path().join("absent.txt")),
        "--out",
        s(&out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.txt"));
    assert!(!out.exists());
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn same_seed_gives_identical_loss_curves() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = train_args(FIXTURE, s(&out), "3");
        args.extend(["--seed", "42", "--shards", "3"]);
        ok(&args);
        std::fs::read_to_string(format!("{}.loss.csv", s(&out))).unwrap()
    };
    let (a, b) = (run("a.tskp"), run("b.tskp"));
    assert_eq!(a, b);
    assert_eq!(a.lines().count(), 4);
}

#[test]
fn resume_continues_from_saved_optimizer_state() {
    let t = trained();
    let out = t.dir.path().join("resumed.tskp");
    let report = ok(&[
        "train",
        "--corpus",
        FIXTURE,
        "--resume",
        s(&t.ckpt),
        "--out",
        s(&out),
        "--epochs",
        "2",
        "--batch-size",
        "8",
    ]);
    assert!(final_loss(&report) < 0.05, "{report}");
    let (before, after) = (
        load_checkpoint(&t.ckpt).unwrap(),
        load_checkpoint(&out).unwrap(),
    );
    assert_eq!(after.adam.unwrap().step, before.adam.unwrap().step + 8);
}

#[test]
fn encode_writes_one_vector_per_line() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "in.txt", "the old man walked to the harbor\nshe read every line twice\nthe old man walked to the harbor\n");
    let vectors = parse_vectors(
        &ok(&["encode", "--checkpoint", s(&t.ckpt), "--input", s(&input)]),
        "stdout",
    )
    .unwrap();
    assert_eq!(vectors.shape(), (3, 64));
    assert_eq!(vectors.row(0), vectors.row(2));
    assert_ne!(vectors.row(0), vectors.row(1));

    let blank = write(dir.path(), "blank.txt", "a line\n\nanother\n");
    let o = tskip(&["encode", "--checkpoint", s(&t.ckpt), "--input", s(&blank)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("blank.txt:2:"), "{}", stderr(&o));
}

#[test]
fn encode_bi_avg_max_gives_1200_values() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = write(
        dir.path(),
        "c.txt",
        "one small step\nanother small step\nthe end\n",
    );
    let ckpt = dir.path().join("bi.tskp");
    ok(&[
        "train",
        "--corpus",
        s(&corpus),
        "--out",
        s(&ckpt),
        "--encoder-kind",
        "bi",
        "--connection",
        "avg_max",
        "--encoder-dim",
        "300",
        "--decoder-dim",
        "8",
        "--embed-dim",
        "8",
        "--epochs",
        "1",
    ]);
    let input = write(dir.path(), "in.txt", "one small step\n");
    let vectors = parse_vectors(
        &ok(&["encode", "--checkpoint", s(&ckpt), "--input", s(&input)]),
        "stdout",
    )
    .unwrap();
    assert_eq!(vectors.shape(), (1, 1200));
}

#[test]
fn retrieve_ranks_each_sentence_first_against_itself() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let all: Vec<String> = fixture_documents().concat();
    let db = write(dir.path(), "db.txt", &(all.join("\n") + "\n"));
    let picks = [0, 7, 23, 39];
    let queries: Vec<&str> = picks.iter().map(|&i| all[i].as_str()).collect();
    let q = write(dir.path(), "q.txt", &(queries.join("\n") + "\n"));
    let table = ok(&[
        "retrieve",
        "--checkpoint",
        s(&t.ckpt),
        "--query",
        s(&q),
        "--database",
        s(&db),
        "--top-k",
        "3",
    ]);
    let mut lines = table.lines();
    assert_eq!(lines.next(), Some("query\trank\tindex\tcosine\tsentence"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), picks.len() * 3);
    for (qi, &pick) in picks.iter().enumerate() {
        let top = &rows[qi * 3];
        assert_eq!(
            top[..3],
            [qi.to_string().as_str(), "1", pick.to_string().as_str()]
        );
        assert!((top[3].parse::<f64>().unwrap() - 1.0).abs() <= 1e-6);
        assert_eq!(top[4], all[pick]);
    }
}

#[test]
fn retrieve_vectors_mode() {
    let dir = tempfile::tempdir().unwrap();
    let q = write(dir.path(), "q.vec", "1 0 0\n");
    let db = write(dir.path(), "db.vec", "0 2 0\n3 0 0\n0 0 -1\n");
    let table = ok(&[
        "retrieve",
        "--vectors",
        "--query",
        s(&q),
        "--database",
        s(&db),
        "--top-k",
        "10",
    ]);
    let rows: Vec<Vec<&str>> = table
        .lines()
        .skip(1)
        .map(|l| l.split('\t').collect())
        .collect();
    assert_eq!(rows.len(), 3, "k beyond the database returns every row");
    assert_eq!(rows[0][2..4], ["1", "1.000000"]);
    // orthogonal ties keep database order
    assert_eq!(rows[1][2..4], ["0", "0.000000"]);
    assert_eq!(rows[2][2..4], ["2", "0.000000"]);

    let empty = write(dir.path(), "empty.vec", "");
    assert_eq!(
        tskip(&[
            "retrieve",
            "--vectors",
            "--query",
            s(&q),
            "--database",
            s(&empty)
        ])
        .status
        .code(),
        Some(1)
    );
}

#[test]
fn generate_reproduces_memorized_continuations() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let (mut sources, mut targets) = (Vec::new(), Vec::new());
    for doc in fixture_documents() {
        for w in doc.windows(2) {
            sources.push(w[0].clone());
            targets.push(w[1].clone());
        }
    }
    let input = write(dir.path(), "src.txt", &(sources.join("\n") + "\n"));
    let args = ["generate", "--checkpoint", s(&t.ckpt), "--input", s(&input)];
    let first = ok(&args);
    assert_eq!(first, ok(&args), "decoding is deterministic");
    let got: Vec<&str> = first.lines().collect();
    assert_eq!(got.len(), targets.len());
    let exact = got
        .iter()
        .zip(&targets)
        .filter(|(g, t)| **g == t.as_str())
        .count();
    assert!(
        exact * 10 >= targets.len() * 9,
        "{exact}/{} exact",
        targets.len()
    );

    let short = ok(&[
        "generate",
        "--checkpoint",
        s(&t.ckpt),
        "--input",
        s(&input),
        "--max-len",
        "3",
    ]);
    assert!(
        short.lines().all(|l| l.split_whitespace().count() <= 3),
        "{short}"
    );
}

#[test]
fn eval_pair_task_recovers_cosine_relatedness() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = load_checkpoint(&t.ckpt).unwrap();
    let enc = SentenceEncoder::new(&ck);
    let all: Vec<String> = fixture_documents().concat();
    let vectors: Vec<Tensor> = all.iter().map(|l| enc.encode(l).unwrap().0).collect();
    let mut tsv = String::new();
    for i in 0..all.len() {
        for j in (i + 1)..all.len() {
            let c = cosine(vectors[i].data(), vectors[j].data()).unwrap();
            tsv.push_str(&format!(
                "{}\t{}\t{}\n",
                all[i],
                all[j],
                1.0 + 2.0 * (c + 1.0)
            ));
        }
    }
    let data = write(dir.path(), "pairs.tsv", &tsv);
    let report = ok(&[
        "eval",
        "--checkpoint",
        s(&t.ckpt),
        "--task",
        "pair",
        "--data",
        s(&data),
        "--json",
    ]);
    let get = |k: &str| {
        report
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{k}=")))
            .unwrap_or_else(|| panic!("no {k} in {report}"))
    };
    assert_eq!(get("n"), "780");
    assert!(get("pearson_r").parse::<f64>().unwrap() >= 0.95, "{report}");
    assert!(
        get("spearman_rho").parse::<f64>().unwrap() >= 0.95,
        "{report}"
    );
    get("mse");
    assert!(get("json").starts_with("{\"n\":780,"));
}

#[test]
fn eval_warns_on_single_class_data() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let rows: String = fixture_documents()
        .concat()
        .iter()
        .map(|l| format!("1\t{l}\n"))
        .collect();
    let data = write(dir.path(), "cls.tsv", &rows);
    let o = tskip(&[
        "eval",
        "--checkpoint",
        s(&t.ckpt),
        "--task",
        "class",
        "--data",
        s(&data),
        "--folds",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(
        stderr(&o).contains("warning: degenerate data: every label is 1"),
        "{}",
        stderr(&o)
    );
    let out = stdout(&o);
    assert!(
        out.contains("n=40") && out.contains("accuracy=1.000000") && out.contains("f1="),
        "{out}"
    );
}

#[test]
fn param_count_reports_components() {
    let out = ok(&["param-count"]);
    assert_eq!(
        out,
        "rnns=4320000 embedding=6000000 prediction=12000000\ntotal=22320000\n"
    );
    let small = ok(&[
        "param-count",
        "--vocab-size",
        "10",
        "--embed-dim",
        "2",
        "--encoder-dim",
        "3",
        "--decoder-dim",
        "3",
    ]);
    assert!(small.ends_with("total=167\n"), "{small}");
}

#[test]
fn expand_vocab_maps_unseen_words_through_the_projection() {
    let t = trained();
    let dir = tempfile::tempdir().unwrap();
    let ck = load_checkpoint(&t.ckpt).unwrap();
    // pretrained space equal to the trained one, plus synonyms for two words
    let mut tokens = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (word, _) in ck.vocab.ranked() {
        tokens.push(word.to_string());
        rows.push(
            ck.params
                .embedding
                .row(ck.vocab.id(word).unwrap() as usize)
                .to_vec(),
        );
    }
    for (new, old) in [("quay", "harbor"), ("ambled", "walked")] {
        tokens.push(new.to_string());
        rows.push(
            ck.params
                .embedding
                .row(ck.vocab.id(old).unwrap() as usize)
                .to_vec(),
        );
    }
    let table = PretrainedEmbeddings::new(tokens, Tensor::from_rows(&rows)).unwrap();
    let pre = write(dir.path(), "pre.txt", &table.to_text());
    let expanded = dir.path().join("expanded.tskp");
    let report = ok(&[
        "expand-vocab",
        "--checkpoint",
        s(&t.ckpt),
        "--pretrained",
        s(&pre),
        "--out",
        s(&expanded),
    ]);
    assert_eq!(
        report.trim(),
        format!("shared={} pretrained_dim=16", ck.vocab.len() - 4)
    );

    let input = write(
        dir.path(),
        "in.txt",
        "the old man walked to the harbor\nthe old man ambled to the quay\nthe old man zzyzx to the harbor\nthe old man <unk> to the harbor\n",
    );
    let encode = |c: &Path| {
        parse_vectors(
            &ok(&["encode", "--checkpoint", s(c), "--input", s(&input)]),
            "stdout",
        )
        .unwrap()
    };
    let (base, exp) = (encode(&t.ckpt), encode(&expanded));
    assert_eq!(base.row(0), exp.row(0), "in-vocabulary words are untouched");
    let drift = exp
        .row(0)
        .iter()
        .zip(exp.row(1))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(drift < 1e-4, "synonyms drift {drift}");
    assert_eq!(
        exp.row(2),
        exp.row(3),
        "unknown everywhere falls back to UNK"
    );

    let again = dir.path().join("again.tskp");
    ok(&[
        "expand-vocab",
        "--checkpoint",
        s(&expanded),
        "--pretrained",
        s(&pre),
        "--out",
        s(&again),
    ]);
    assert_eq!(encode(&again), exp);
}
