//! Diagnostics over materialized attention weights.

use linearize_tensor::{Scalar, Tensor};

use crate::{Error, Result};

const STOCHASTIC_TOL: f64 = 1e-4;

fn check_row<T: Scalar>(row: &[T], index: usize) -> Result<()> {
    let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
    if (sum - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|v| v.as_f64() < 0.0) {
        return Err(Error::NotStochastic { row: index, sum });
    }
    Ok(())
}

/// Entropy `−Σ a ln a` of every row along the last axis, with `0 ln 0 = 0`.
pub fn attention_entropy<T: Scalar>(weights: &Tensor<T>) -> Result<Vec<f64>> {
    let n = weights.last_dim().max(1);
    weights
        .data()
        .chunks(n)
        .enumerate()
        .map(|(r, row)| {
            check_row(row, r)?;
            Ok(-row
                .iter()
                .map(|a| a.as_f64())
                .filter(|&a| a > 0.0)
                .map(|a| a * a.ln())
                .sum::<f64>())
        })
        .collect()
}

/// Expected look-back `Σ_{j≤i} (i − j) a_{i,j}` for the query at 1-based index `i`.
///
/// `row` holds the weights of that query over positions `1..=i` (anything
/// further right must be zero).
pub fn effective_sequence_length<T: Scalar>(row: &[T], i: usize) -> Result<f64> {
    if i == 0 || i > row.len() {
        return Err(Error::shape(format!("query index {i} for row of {}", row.len())));
    }
    check_row(row, i - 1)?;
    if row[i..].iter().any(|v| *v != T::zero()) {
        return Err(Error::NotStochastic {
            row: i - 1,
            sum: row[..i].iter().map(|v| v.as_f64()).sum(),
        });
    }
    Ok(row[..i]
        .iter()
        .enumerate()
        .map(|(j, a)| (i - 1 - j) as f64 * a.as_f64())
        .sum())
}

/// ESL of one sample: per head, the sum of per-query ESLs; then averaged over
/// heads and layers (and over the batch axis when it is larger than one).
///
/// Each layer's weights are `[batch, heads, seq, seq]`.
pub fn sample_esl<T: Scalar>(layers: &[Tensor<T>]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::shape("no layers"));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for w in layers {
        if w.rank() != 4 || w.shape()[2] != w.shape()[3] {
            return Err(Error::shape(format!("weights {:?}", w.shape())));
        }
        let n = w.shape()[3];
        for head in w.data().chunks(n * n) {
            let mut sum = 0.0;
            for i in 0..n {
                sum += effective_sequence_length(&head[i * n..(i + 1) * n], i + 1)?;
            }
            total += sum;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
