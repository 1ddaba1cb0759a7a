//! Finite-difference checks of the autodiff primitives and of a full model
//! objective.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tskip::model::{
    example_objective, BoundModel, Connection, EncoderKind, ModelConfig, ModelParams,
};
use tskip::numerics::{gradient_check, Pool, Tensor};

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn main() -> tskip::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = random(3, 4, &mut rng);
    let b = random(4, 2, &mut rng);

    let err = gradient_check(
        |g, p| {
            let m = g.matmul(p[0], p[1])?;
            let s = g.sigmoid(m);
            let t = g.tanh(s);
            Ok(g.sum_all(t))
        },
        &[a.clone(), b.clone()],
        1e-5,
    )?;
    println!("matmul/sigmoid/tanh   max rel err {err:.2e}");

    let err = gradient_check(
        |g, p| {
            let mean = g.pool_rows(Pool::Mean, p[0])?;
            let max = g.pool_rows(Pool::Max, p[0])?;
            let both = g.concat_cols(mean, max)?;
            let w = g.matmul(both, p[1])?;
            g.softmax_cross_entropy(w, 1)
        },
        &[a, random(8, 3, &mut rng)],
        1e-5,
    )?;
    println!("pool/concat/softmax   max rel err {err:.2e}");

    let cfg = ModelConfig {
        vocab_size: 12,
        embed_dim: 3,
        encoder_kind: EncoderKind::Bi,
        encoder_dim: 3,
        connection: Connection::Plain,
        decoder_dim: 4,
        ..ModelConfig::default()
    };
    let params = ModelParams::uniform(&cfg, 1.0, &mut rng);
    let tensors: Vec<Tensor> = params
        .named_tensors()
        .into_iter()
        .map(|(_, t)| t.clone())
        .collect();
    let err = gradient_check(
        |g, ids| {
            let bm = BoundModel::from_ids(&cfg, ids)?;
            Ok(example_objective(g, &bm, &cfg, &[4, 5, 6, 7, 8, 9], &[7, 8, 10, 4, 6], None)?.0)
        },
        &tensors,
        1e-4,
    )?;
    println!("full bi model         max rel err {err:.2e}");
    Ok(())
}
