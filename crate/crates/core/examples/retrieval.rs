//! Nearest-neighbour search over sentence vectors from an untrained model,
//! so the geometry is random but self-matches are exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tskip::model::{encode, ModelConfig, ModelParams};
use tskip::numerics::Tensor;
use tskip::retrieval::top_k;
use tskip::training::build_vocab;

fn main() -> tskip::Result<()> {
    let sentences = [
        "the cat sat on the mat",
        "a dog slept by the fire",
        "the cat slept on the mat",
        "rain fell on the roof",
    ];
    let vocab = build_vocab(sentences, 100)?;
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        embed_dim: 8,
        encoder_dim: 16,
        decoder_dim: 8,
        ..ModelConfig::bi_avg_max()
    };
    let params = ModelParams::uniform(&cfg, 0.3, &mut ChaCha8Rng::seed_from_u64(2));
    let rows = sentences
        .iter()
        .map(|s| Ok(encode(&params, &cfg, &vocab.encode(s))?.0))
        .collect::<tskip::Result<Vec<Tensor>>>()?;
    let db = Tensor::stack_rows(&rows.iter().collect::<Vec<_>>())?;
    let query = vocab.encode("the cat sat on the mat");
    let q = encode(&params, &cfg, &query)?;
    for n in top_k(q.values(), &db, 3)? {
        println!("{:.6}  {}", n.score, sentences[n.index]);
    }
    Ok(())
}
