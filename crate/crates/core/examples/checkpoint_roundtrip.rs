//! Trains briefly, saves, reloads and compares every tensor bit for bit.

use tskip::model::ModelConfig;
use tskip::training::{
    build_vocab, load_checkpoint, make_pairs, save_checkpoint, train, Checkpoint, TrainConfig,
};

fn main() -> tskip::Result<()> {
    let text = "one small step\nfor a careful man\n\nwe came we saw\nthen we left\n";
    let vocab = build_vocab(text.lines(), 100)?;
    let pairs = make_pairs(text, &vocab)?;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 8,
        encoder_dim: 8,
        decoder_dim: 8,
        ..ModelConfig::default()
    };
    let out = train(
        &cfg,
        &pairs,
        &TrainConfig {
            epochs: 5,
            ..TrainConfig::default()
        },
    )?;
    let mut ck = Checkpoint::new(cfg, vocab, out.params);
    ck.adam = Some(out.adam);

    let path = std::env::temp_dir().join(format!("tskip-example-{}.tskp", std::process::id()));
    save_checkpoint(&path, &ck)?;
    let back = load_checkpoint(&path)?;
    let bytes = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    std::fs::remove_file(&path).ok();

    let identical = ck
        .params
        .named_tensors()
        .iter()
        .zip(back.params.named_tensors())
        .all(|((_, a), (_, b))| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    println!(
        "{bytes} bytes, bit-identical tensors: {identical}, optimizer step {}",
        back.adam.map_or(0, |a| a.step)
    );

    let truncated = &ck.to_bytes()[..100];
    println!(
        "truncated image: {}",
        Checkpoint::from_bytes(truncated).unwrap_err()
    );
    Ok(())
}
