//! Learns a linear map from a pretrained space into model embeddings and
//! uses it for a word the model never saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tskip::embeddings::{
    expand_vocabulary, learn_expansion_projection, PretrainedEmbeddings, Ridge,
};
use tskip::numerics::Tensor;
use tskip::training::Vocabulary;

fn main() -> tskip::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (pre_dim, model_dim, words) = (6, 4, 40);
    let vocab = Vocabulary::from_ranked((0..words).map(|i| (format!("w{i}"), 1)).collect())?;

    // pretrained table: every model word plus one unseen word
    let mut tokens: Vec<String> = vocab.ranked().map(|(t, _)| t.to_string()).collect();
    tokens.push("unseen".into());
    let table = PretrainedEmbeddings::new(
        tokens,
        Tensor::from_fn(words + 1, pre_dim, |_, _| rng.gen_range(-1.0..1.0)),
    )?;

    // model embeddings that are an exact linear image of the table
    let m0 = Tensor::from_fn(pre_dim, model_dim, |_, _| rng.gen_range(-1.0..1.0));
    let mut trained = Tensor::zeros(vocab.len(), model_dim);
    for id in 4..vocab.len() {
        let v = table.get(vocab.token(id as u32).unwrap()).unwrap();
        let row = Tensor::row_vector(v.to_vec()).matmul(&m0)?;
        trained.row_mut(id).copy_from_slice(row.data());
    }

    let m = learn_expansion_projection(&table, &trained, &vocab, Ridge::Rescue)?;
    println!("max |M - M0| = {:.2e}", m.max_abs_diff(&m0));
    let v = expand_vocabulary(&m, &table, "unseen")?;
    let expected = Tensor::row_vector(table.get("unseen").unwrap().to_vec()).matmul(&m0)?;
    println!(
        "unseen -> {:?}\n  error {:.2e}",
        v.data(),
        v.max_abs_diff(&expected)
    );
    Ok(())
}
