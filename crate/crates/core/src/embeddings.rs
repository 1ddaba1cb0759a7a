//! Word-embedding initialization and the vocabulary-expansion projection.

use std::collections::HashMap;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::training::vocab::Vocabulary;

/// Token → vector table with a shared dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct PretrainedEmbeddings {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    vectors: Tensor,
}

impl PretrainedEmbeddings {
    /// `vectors` row `i` belongs to `tokens[i]`.
    pub fn new(tokens: Vec<String>, vectors: Tensor) -> Result<Self> {
        if tokens.len() != vectors.rows() {
            return Err(Error::ShapeMismatch {
                op: "pretrained_embeddings",
                left: (tokens.len(), 1),
                right: vectors.shape(),
            });
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("invalid pretrained token {t:?}")));
            }
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate pretrained token {t:?}")));
            }
        }
        Ok(PretrainedEmbeddings {
            tokens,
            index,
            vectors,
        })
    }

    /// Parses the text format: `token v1 .. vk` per line, with an optional
    /// leading `count dim` header. `origin` is used in error messages.
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_string(),
            line,
            msg,
        };
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .peekable();
        let mut header: Option<(usize, usize)> = None;
        if let Some((_, first)) = lines.peek() {
            let f: Vec<&str> = first.split_whitespace().collect();
            if let [a, b] = f[..] {
                if let (Ok(n), Ok(d)) = (a.parse::<usize>(), b.parse::<usize>()) {
                    header = Some((n, d));
                    lines.next();
                }
            }
        }
        let mut tokens = Vec::new();
        let mut data = Vec::new();
        let mut dim = header.map(|(_, d)| d);
        for (i, line) in lines {
            let mut fields = line.split_whitespace();
            let token = fields.next().expect("non-blank line");
            let values = fields
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| err(i + 1, format!("bad number {f:?}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            match dim {
                Some(d) if d != values.len() => {
                    return Err(err(
                        i + 1,
                        format!("expected {d} values, found {}", values.len()),
                    ))
                }
                None if values.is_empty() => {
                    return Err(err(i + 1, "token without a vector".into()))
                }
                _ => dim = Some(values.len()),
            }
            tokens.push(token.to_string());
            data.extend(values);
        }
        let dim = dim
            .filter(|_| !tokens.is_empty())
            .ok_or(Error::Empty("pretrained embeddings"))?;
        if let Some((n, _)) = header {
            if n != tokens.len() {
                return Err(err(
                    1,
                    format!("header announces {n} vectors, file has {}", tokens.len()),
                ));
            }
        }
        let vectors = Tensor::new(tokens.len(), dim, data)?;
        Self::new(tokens, vectors).map_err(|e| err(0, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Text form accepted by [`Self::parse`], with a header.
    pub fn to_text(&self) -> String {
        let mut out = format!("{} {}\n", self.len(), self.dim());
        for (i, t) in self.tokens.iter().enumerate() {
            out.push_str(t);
            for v in self.vectors.row(i) {
                out.push(' ');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.index.get(word).map(|&i| self.vectors.row(i))
    }
}

/// Where initial word vectors come from.
#[derive(Clone, Debug)]
pub enum EmbeddingSource<'a> {
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Misses (including reserved tokens) are drawn from `U(lo, hi)`.
    Pretrained {
        table: &'a PretrainedEmbeddings,
        lo: f64,
        hi: f64,
    },
}

/// Builds a `V×e` embedding matrix for `vocab`.
pub fn init_embeddings(
    vocab: &Vocabulary,
    source: &EmbeddingSource<'_>,
    e: usize,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let (lo, hi, table) = match *source {
        EmbeddingSource::Uniform { lo, hi } => (lo, hi, None),
        EmbeddingSource::Pretrained { table, lo, hi } => {
            if table.dim() != e {
                return Err(Error::ShapeMismatch {
                    op: "init_embeddings",
                    left: (table.len(), table.dim()),
                    right: (vocab.len(), e),
                });
            }
            (lo, hi, Some(table))
        }
    };
    if lo.is_nan() || hi.is_nan() || lo > hi {
        return Err(Error::Config(format!(
            "uniform range [{lo}, {hi}] is empty"
        )));
    }
    let mut out = Tensor::zeros(vocab.len(), e);
    for id in 0..vocab.len() {
        let word = vocab.token(id as u32).expect("dense ids");
        let row = out.row_mut(id);
        match table.and_then(|t| t.get(word)) {
            Some(v) => row.copy_from_slice(v),
            None => {
                for x in row.iter_mut() {
                    *x = if lo == hi { lo } else { rng.gen_range(lo..hi) };
                }
            }
        }
    }
    Ok(out)
}

/// Cholesky factor `L` of a symmetric positive-definite matrix, or `None`
/// when a pivot is not safely positive.
fn cholesky(a: &Tensor) -> Option<Tensor> {
    let n = a.rows();
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(0.0, f64::max);
    let tol = scale * 1e-13;
    let mut l = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = a.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if d.is_nan() || d <= tol {
            return None;
        }
        let d = d.sqrt();
        l.set(j, j, d);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / d);
        }
    }
    Some(l)
}

/// Solves `L Lᵀ X = B` column by column.
fn cholesky_solve(l: &Tensor, b: &Tensor) -> Tensor {
    let n = l.rows();
    let mut x = b.clone();
    for c in 0..b.cols() {
        for i in 0..n {
            let mut s = x.get(i, c);
            for k in 0..i {
                s -= l.get(i, k) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
        for i in (0..n).rev() {
            let mut s = x.get(i, c);
            for k in i + 1..n {
                s -= l.get(k, i) * x.get(k, c);
            }
            x.set(i, c, s / l.get(i, i));
        }
    }
    x
}

/// Ridge strategy for the normal equations.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Ridge {
    /// Undamped solve, retrying with `1e-6 · trace(XᵀX)/e'` only if the
    /// system is numerically singular.
    Rescue,
    /// Always add `λ·I`.
    Fixed(f64),
}

/// Least-squares `M` (e′×e) with `pretrained(w)·M ≈ trained_E[w]` over the
/// words both tables know. Reserved tokens are ignored.
pub fn learn_expansion_projection(
    pretrained: &PretrainedEmbeddings,
    trained: &Tensor,
    vocab: &Vocabulary,
    ridge: Ridge,
) -> Result<Tensor> {
    if trained.rows() != vocab.len() {
        return Err(Error::ShapeMismatch {
            op: "learn_expansion_projection",
            left: trained.shape(),
            right: (vocab.len(), trained.cols()),
        });
    }
    let shared: Vec<(usize, &[f64])> = vocab
        .ranked()
        .enumerate()
        .filter_map(|(i, (w, _))| {
            pretrained
                .get(w)
                .map(|v| (i + crate::training::vocab::RESERVED.len(), v))
        })
        .collect();
    let ep = pretrained.dim();
    if shared.len() < ep.max(1) {
        return Err(Error::InsufficientSharedVocab {
            shared: shared.len(),
            needed: ep.max(1),
        });
    }
    let x = Tensor::from_rows(&shared.iter().map(|(_, v)| *v).collect::<Vec<_>>());
    let y = Tensor::from_rows(
        &shared
            .iter()
            .map(|&(i, _)| trained.row(i))
            .collect::<Vec<_>>(),
    );
    let xt = x.transpose();
    let xtx = xt.matmul(&x)?;
    let xty = xt.matmul(&y)?;
    let damped = |lambda: f64| {
        let mut a = xtx.clone();
        for i in 0..ep {
            a.set(i, i, a.get(i, i) + lambda);
        }
        a
    };
    let rescue = 1e-6 * (0..ep).map(|i| xtx.get(i, i)).sum::<f64>() / ep as f64;
    let attempts: Vec<f64> = match ridge {
        Ridge::Rescue => vec![0.0, rescue],
        Ridge::Fixed(l) => vec![l],
    };
    for lambda in attempts {
        if let Some(l) = cholesky(&damped(lambda)) {
            if lambda > 0.0 && ridge == Ridge::Rescue {
                log::warn!("expansion system is ill-conditioned; solved with ridge {lambda:e}");
            }
            return Ok(cholesky_solve(&l, &xty));
        }
    }
    Err(Error::Singular)
}

/// `pretrained(word)·M`.
pub fn expand_vocabulary(
    m: &Tensor,
    pretrained: &PretrainedEmbeddings,
    word: &str,
) -> Result<Tensor> {
    let v = pretrained
        .get(word)
        .ok_or_else(|| Error::OutOfVocabulary(word.to_string()))?;
    Tensor::row_vector(v.to_vec()).matmul(m)
}

/// A learned projection together with the pretrained table it maps from.
#[derive(Clone, Debug, PartialEq)]
pub struct Expansion {
    pub projection: Tensor,
    pub pretrained: PretrainedEmbeddings,
}

impl Expansion {
    pub fn new(projection: Tensor, pretrained: PretrainedEmbeddings) -> Result<Self> {
        if projection.rows() != pretrained.dim() {
            return Err(Error::ShapeMismatch {
                op: "expansion",
                left: projection.shape(),
                right: (pretrained.dim(), projection.cols()),
            });
        }
        Ok(Expansion {
            projection,
            pretrained,
        })
    }

    pub fn embed(&self, word: &str) -> Result<Tensor> {
        expand_vocabulary(&self.projection, &self.pretrained, word)
    }
}

/// Frobenius residual `‖X·M − Y‖²` over the shared vocabulary.
pub fn expansion_residual(
    pretrained: &PretrainedEmbeddings,
    trained: &Tensor,
    vocab: &Vocabulary,
    m: &Tensor,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, (w, _)) in vocab.ranked().enumerate() {
        if let Some(v) = pretrained.get(w) {
            let pred = Tensor::row_vector(v.to_vec()).matmul(m)?;
            let id = i + crate::training::vocab::RESERVED.len();
            total += pred
                .data()
                .iter()
                .zip(trained.row(id))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
    }
    Ok(total)
}
