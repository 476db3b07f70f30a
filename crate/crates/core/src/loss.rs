//! Scaled cosine reconstruction losses for features and meta-path adjacency,
//! and their semantic-weighted combination.

use std::rc::Rc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::matrix::{norm, Matrix};
use crate::tape::{Tape, TapeError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("loss scope is empty")]
    EmptyScope,
    #[error("{what} row {row} has zero norm (strict mode)")]
    ZeroRow { what: &'static str, row: usize },
    #[error("{losses} per-path losses but {weights} semantic weights")]
    CountMismatch { losses: usize, weights: usize },
    #[error("scaling exponent {0} must be >= 1")]
    BadGamma(f64),
}

pub type Result<T> = std::result::Result<T, LossError>;

/// Which target rows enter the feature loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    #[default]
    All,
    MaskedOnly,
}

/// Mean over `rows` of `(1 - cos(target_v, pred_v))^gamma`. Rows where
/// either side has zero norm are left out of the mean, or rejected when
/// `strict`. If every row is left out the loss is a constant zero.
pub fn scaled_cosine_error(
    tape: &mut Tape,
    target: Var,
    pred: Var,
    rows: &[usize],
    gamma: f64,
    strict: bool,
    what: &'static str,
) -> Result<Var> {
    if gamma < 1.0 || !gamma.is_finite() {
        return Err(LossError::BadGamma(gamma));
    }
    if rows.is_empty() {
        return Err(LossError::EmptyScope);
    }
    let (t, p) = (tape.value(target), tape.value(pred));
    if t.shape() != p.shape() {
        return Err(TapeError::Shape {
            op: "scaled_cosine_error",
            lhs: t.shape(),
            rhs: p.shape(),
        }
        .into());
    }
    let mut keep = Vec::with_capacity(rows.len());
    for &r in rows {
        if norm(t.row(r)) == 0.0 || norm(p.row(r)) == 0.0 {
            if strict {
                return Err(LossError::ZeroRow { what, row: r });
            }
        } else {
            keep.push(r);
        }
    }
    if keep.is_empty() {
        return Ok(tape.constant(Matrix::scalar(0.0)));
    }
    let idx: Rc<[usize]> = keep.into();
    let tg = tape.gather_rows(target, idx.clone())?;
    let pg = tape.gather_rows(pred, idx)?;
    let cos = tape.row_cosine(tg, pg)?;
    let neg = tape.scale(cos, -1.0)?;
    let err = tape.add_scalar(neg, 1.0)?;
    let err = tape.pow(err, gamma)?;
    Ok(tape.reduce_mean(err)?)
}

/// Feature reconstruction loss over all target rows or only fully masked
/// ones.
pub fn feature_loss(
    tape: &mut Tape,
    x: Var,
    decoded: Var,
    scope: Scope,
    masked_nodes: &[usize],
    gamma: f64,
    strict: bool,
) -> Result<Var> {
    let rows: Vec<usize> = match scope {
        Scope::All => (0..tape.shape(x).0).collect(),
        Scope::MaskedOnly => masked_nodes.to_vec(),
    };
    scaled_cosine_error(tape, x, decoded, &rows, gamma, strict, "feature")
}

/// `sigmoid(H · Hᵀ)`.
pub fn reconstruct_adjacency(tape: &mut Tape, h: Var) -> Result<Var> {
    let gram = tape.matmul_nt(h, h)?;
    Ok(tape.sigmoid(gram)?)
}

/// Adjacency reconstruction loss of `reconstructed` against the binary
/// adjacency `adjacency` (a constant). Empty adjacency rows are isolated
/// nodes and are left out (or rejected when `strict`).
pub fn metapath_loss(
    tape: &mut Tape,
    adjacency: &Matrix,
    reconstructed: Var,
    gamma: f64,
    strict: bool,
) -> Result<Var> {
    let a = tape.constant(adjacency.clone());
    let rows: Vec<usize> = (0..adjacency.rows()).collect();
    scaled_cosine_error(tape, a, reconstructed, &rows, gamma, strict, "adjacency")
}

/// `sum_phi alpha[phi] * losses[phi]`; `alpha` is a `P x 1` column.
pub fn combined_mp_loss(tape: &mut Tape, losses: &[Var], alpha: Var) -> Result<Var> {
    let p = tape.shape(alpha);
    if p != (losses.len(), 1) {
        return Err(LossError::CountMismatch {
            losses: losses.len(),
            weights: p.0 * p.1,
        });
    }
    let stacked = tape.concat_rows(losses)?;
    let weighted = tape.mul(stacked, alpha)?;
    let mean = tape.reduce_mean(weighted)?;
    Ok(tape.scale(mean, losses.len() as f64)?)
}

pub fn total_loss(
    tape: &mut Tape,
    l_feat: Var,
    l_mp: Var,
    lambda_feat: f64,
    lambda_mp: f64,
) -> Result<Var> {
    let a = tape.scale(l_feat, lambda_feat)?;
    let b = tape.scale(l_mp, lambda_mp)?;
    Ok(tape.add(a, b)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathLoss {
    pub metapath: String,
    pub loss: f64,
    pub alpha: f64,
}

/// One epoch's loss components, as written to `train_log.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub epoch: usize,
    pub l_feat: f64,
    pub metapaths: Vec<PathLoss>,
    pub l_mp: f64,
    pub l_total: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_time_ms: Option<u64>,
}
