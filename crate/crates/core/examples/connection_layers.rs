//! Plain versus mean+max connection on the same encoder states.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tskip::model::{
    encode, encoder_states, Connection, EncoderKind, ModelConfig, ModelParams, WordInput,
};

fn main() -> tskip::Result<()> {
    let base = ModelConfig {
        vocab_size: 50,
        embed_dim: 8,
        encoder_kind: EncoderKind::Bi,
        encoder_dim: 6,
        decoder_dim: 8,
        ..ModelConfig::default()
    };
    let params = ModelParams::uniform(&base, 0.5, &mut ChaCha8Rng::seed_from_u64(3));
    let sentence = [5, 9, 12, 7];
    let states = encoder_states(&params, &sentence.map(WordInput::Token))?;
    println!(
        "{} steps of width {}",
        states.states.rows(),
        states.states.cols()
    );
    for connection in [Connection::Plain, Connection::AvgMax] {
        let cfg = ModelConfig {
            connection,
            ..base.clone()
        };
        let z = encode(&params, &cfg, &sentence)?;
        let head: Vec<String> = z
            .values()
            .iter()
            .take(4)
            .map(|v| format!("{v:+.3}"))
            .collect();
        println!(
            "{connection:<8} dim {:>3}  [{} ...]",
            z.dim(),
            head.join(", ")
        );
    }
    // the mean+max vector of a length-one sentence is its state twice
    let one = encode(
        &params,
        &ModelConfig {
            connection: Connection::AvgMax,
            ..base.clone()
        },
        &[5],
    )?;
    let (mean, max) = one.values().split_at(one.dim() / 2);
    println!("length-1 halves equal: {}", mean == max);
    println!(
        "reference-scale bi avg_max dim: {}",
        ModelConfig::bi_avg_max().sentence_dim()
    );
    Ok(())
}
