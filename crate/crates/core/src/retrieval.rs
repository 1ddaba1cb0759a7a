//! Brute-force cosine nearest neighbours and the plain-text vectors format.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity; zero vectors score 0 against everything.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "cosine",
            left: (1, a.len()),
            right: (1, b.len()),
        });
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    /// Row in the database.
    pub index: usize,
    pub score: f64,
}

/// The `k` most similar database rows, best first. Equal scores keep
/// database order; `k` larger than the database returns every row.
pub fn top_k(query: &[f64], database: &Tensor, k: usize) -> Result<Vec<Neighbor>> {
    if database.rows() == 0 {
        return Err(Error::Empty("retrieval database"));
    }
    let mut scored = (0..database.rows())
        .map(|i| {
            Ok(Neighbor {
                index: i,
                score: cosine(query, database.row(i))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    // stable sort keeps database order among ties
    scored.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    scored.truncate(k);
    Ok(scored)
}

/// [`top_k`] for every query row.
pub fn rank_all(queries: &Tensor, database: &Tensor, k: usize) -> Result<Vec<Vec<Neighbor>>> {
    (0..queries.rows())
        .map(|q| top_k(queries.row(q), database, k))
        .collect()
}

/// One space-separated vector per non-blank line, all the same width.
pub fn parse_vectors(text: &str, origin: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (i, line) in text
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
    {
        let row = line
            .split_whitespace()
            .map(|f| f.parse::<f64>())
            .collect::<std::result::Result<Vec<f64>, _>>()
            .map_err(|e| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: origin.to_string(),
                    line: i + 1,
                    msg: format!("expected {} values, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Empty("vectors file"));
    }
    Ok(Tensor::from_rows(&rows))
}

/// Inverse of [`parse_vectors`]; values use the shortest exact decimal form.
pub fn format_vectors(vectors: &Tensor) -> String {
    let mut out = String::new();
    for r in 0..vectors.rows() {
        let line: Vec<String> = vectors.row(r).iter().map(f64::to_string).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    out
}
