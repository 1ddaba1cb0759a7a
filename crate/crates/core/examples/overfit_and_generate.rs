//! Memorizes a small corpus, then regenerates each next sentence greedily.
//!
//! cargo run --release --example overfit_and_generate -- [corpus] [epochs] [batch_size] [lr]

use std::time::Instant;

use tskip::model::{encode, greedy_decode, ModelConfig};
use tskip::training::{
    build_vocab, greedy_token_match, make_pairs, train, AdamConfig, TrainConfig,
};

fn main() -> tskip::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let path = args.first().cloned().unwrap_or_else(|| {
        concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/toy_corpus.txt").to_string()
    });
    let epochs = args.get(1).map_or(Ok(300), |s| s.parse()).expect("epochs");
    let batch_size = args
        .get(2)
        .map_or(Ok(8), |s| s.parse())
        .expect("batch size");
    let lr = args
        .get(3)
        .map_or(Ok(0.01), |s| s.parse())
        .expect("learning rate");

    let text = std::fs::read_to_string(&path).expect("readable corpus");
    let vocab = build_vocab(text.lines(), 20_000)?;
    let pairs = make_pairs(&text, &vocab)?;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 16,
        encoder_dim: 64,
        decoder_dim: 64,
        ..ModelConfig::default()
    };
    let tc = TrainConfig {
        epochs,
        batch_size,
        adam: AdamConfig {
            lr,
            ..AdamConfig::default()
        },
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let out = train(&cfg, &pairs, &tc)?;
    for e in out
        .history
        .iter()
        .filter(|e| e.epoch % 25 == 0 || e.epoch + 1 == epochs)
    {
        println!("epoch {:>4}  {:.4} nats/token", e.epoch, e.loss);
    }
    let matched = greedy_token_match(&out.params, &cfg, &pairs, 30)?;
    println!(
        "{} pairs, vocab {}, {:.1}s, token match {:.1}%",
        pairs.len(),
        vocab.len(),
        start.elapsed().as_secs_f64(),
        100.0 * matched
    );
    for p in pairs.iter().take(4) {
        let z = encode(&out.params, &cfg, &p.source)?;
        let gen = greedy_decode(&out.params, &z, 30)?;
        println!("{}\n  -> {}", vocab.decode(&p.source), vocab.decode(&gen));
    }
    Ok(())
}
