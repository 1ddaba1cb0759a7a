//! Relatedness harness on synthetic pairs whose gold score is a monotone
//! function of their cosine, plus a small classification run.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tskip::evaluation::{
    cross_val_predict, kfold_cv, metrics, pair_feature_matrix, HeadConfig, HeadKind, Task,
};
use tskip::numerics::Tensor;

fn unit(z: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let v: Vec<f64> = (0..z).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn main() -> tskip::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let (n, z) = (400, 10);
    let (mut us, mut vs, mut gold) = (Vec::new(), Vec::new(), Vec::new());
    for _ in 0..n {
        let u = unit(z, &mut rng);
        let w = unit(z, &mut rng);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let v: Vec<f64> = u
            .iter()
            .zip(&w)
            .map(|(a, b)| theta.cos() * a + theta.sin() * b)
            .collect();
        let cos = tskip::retrieval::cosine(&u, &v)?;
        gold.push(1.0 + 4.0 * (cos + 1.0) / 2.0);
        us.push(u);
        vs.push(v);
    }
    let feats = pair_feature_matrix(&Tensor::from_rows(&us), &Tensor::from_rows(&vs))?;
    let cv = cross_val_predict(
        &feats,
        &gold,
        HeadKind::SoftmaxBins(5),
        10,
        0,
        &HeadConfig::default(),
    )?;
    print!("{}", metrics(&cv.predictions, &gold, Task::Relatedness)?);

    // two Gaussian blobs
    let x = Tensor::from_fn(60, 4, |i, _| {
        rng.gen_range(-1.0..1.0) + if i % 2 == 0 { 1.5 } else { -1.5 }
    });
    let labels: Vec<usize> = (0..60).map(|i| i % 2).collect();
    println!(
        "blob 10-fold accuracy={:.3}",
        kfold_cv(&x, &labels, 2, 10, 0, &HeadConfig::default())?
    );
    Ok(())
}
