//! Frozen text embeddings via hashed bag-of-tokens.
//!
//! The encoder has no trainable state and no vocabulary file: tokens are
//! lowercased alphanumeric runs, each hashed twice with FNV-1a 64 (two
//! offset bases) to pick a bucket and a sign, and the counts are L2
//! normalized. The same text always embeds to the same row, which is what
//! makes cached retrieval and the disabled-text ablation well defined.
//! A learned projection into model space lives with the model parameters,
//! not here.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

const FNV_PRIME: u64 = 0x100000001b3;
/// Standard FNV-1a offset basis; selects the bucket.
const BASIS_BUCKET: u64 = 0xcbf29ce484222325;
/// Rotated basis; its parity selects the sign.
const BASIS_SIGN: u64 = 0x84222325cbf29ce4;

fn fnv1a(bytes: &[u8], basis: u64) -> u64 {
    let mut h = basis;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Lowercased maximal alphanumeric runs.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Embed one text into a 1 x dim row: signed token counts, L2 normalized.
/// Texts with no tokens (or full sign cancellation) give an exact zero row.
pub fn embed_text(text: &str, dim: usize) -> Result<Matrix> {
    if dim == 0 {
        return Err(Error::invalid("embedding dim must be positive"));
    }
    let mut row = Matrix::zeros(1, dim);
    for token in tokenize(text) {
        let bucket = (fnv1a(token.as_bytes(), BASIS_BUCKET) % dim as u64) as usize;
        let sign = if fnv1a(token.as_bytes(), BASIS_SIGN) % 2 == 0 { 1.0 } else { -1.0 };
        row.data_mut()[bucket] += sign;
    }
    let norm = row.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in row.data_mut() {
            *v /= norm;
        }
    }
    Ok(row)
}

/// Embed one text per row into an N x dim matrix.
pub fn embed_texts(texts: &[String], dim: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(texts.len(), dim);
    for (r, text) in texts.iter().enumerate() {
        let row = embed_text(text, dim)?;
        out.row_mut(r).copy_from_slice(row.row(0));
    }
    Ok(out)
}

/// Fraction of distinct tokens that share a bucket with another distinct
/// token. Diagnostic for choosing `dim`.
pub fn collision_rate(tokens: &[String], dim: usize) -> Result<f64> {
    if dim == 0 {
        return Err(Error::invalid("embedding dim must be positive"));
    }
    let mut distinct: Vec<&String> = tokens.iter().collect();
    distinct.sort();
    distinct.dedup();
    if distinct.is_empty() {
        return Ok(0.0);
    }
    let mut bucket_counts = vec![0usize; dim];
    let buckets: Vec<usize> = distinct
        .iter()
        .map(|t| (fnv1a(t.as_bytes(), BASIS_BUCKET) % dim as u64) as usize)
        .collect();
    for &b in &buckets {
        bucket_counts[b] += 1;
    }
    let colliding = buckets.iter().filter(|&&b| bucket_counts[b] > 1).count();
    Ok(colliding as f64 / distinct.len() as f64)
}
