//! The three training loss terms and their weighted combination:
//! `L_total = a1*L_mse + a2*L_opl + a3*L_ce`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::LatentPair;
use crate::scalar::Scalar;
use crate::tape::{Tape, Var};

/// Epsilon guarding the normalization inside the orthogonality loss.
pub const OPL_NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights<S> {
    /// Weight of the cross-modal alignment term.
    pub mse: S,
    /// Weight of the orthogonal projection term.
    pub opl: S,
    /// Weight of the identity cross-entropy term.
    pub ce: S,
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        LossWeights {
            mse: S::from_f64(0.02),
            opl: S::from_f64(0.78),
            ce: S::from_f64(0.2),
        }
    }
}

impl<S: Scalar> LossWeights<S> {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("mse", self.mse), ("opl", self.opl), ("ce", self.ce)] {
            if !v.is_finite() || v < S::zero() {
                return Err(Error::InvalidArgument(format!(
                    "loss weight `{name}` must be finite and nonnegative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Mean squared distance between the two latent embeddings, averaged over
/// every element: aligns the modalities globally, scale included.
pub fn mse_alignment<S: Scalar>(tape: &mut Tape<S>, latent: &LatentPair) -> Result<Var> {
    let diff = tape.sub(latent.face, latent.voice)?;
    let sq = tape.mul(diff, diff)?;
    Ok(tape.mean(sq))
}

/// Orthogonal projection loss over the fused batch embeddings.
///
/// With rows normalized to unit length, `s` is the mean cosine over
/// same-identity pairs and `dv` the mean |cosine| over cross-identity
/// pairs; the loss is `(1 - s) + dv`, dropping whichever term has no
/// pairs. Needs at least two rows.
pub fn opl<S: Scalar>(tape: &mut Tape<S>, fused: Var, labels: &[usize]) -> Result<Var> {
    let shape = tape.shape(fused);
    if shape.len() != 2 {
        return Err(Error::InvalidArgument(format!(
            "opl expects a [B, d] batch, got shape {shape:?}"
        )));
    }
    let batch = shape[0];
    if batch < 2 {
        return Err(Error::InvalidArgument(format!(
            "opl needs a batch of at least 2, got {batch}"
        )));
    }
    if labels.len() != batch {
        return Err(Error::InvalidArgument(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }

    let normalized = tape.l2_normalize(fused, S::from_f64(OPL_NORM_EPS))?;
    let transposed = tape.transpose(normalized)?;
    let gram = tape.matmul(normalized, transposed)?;

    // Unordered pair masks over the strict upper triangle, pre-divided by
    // the pair counts so a plain sum yields the means.
    let mut same_pairs = 0usize;
    let mut diff_pairs = 0usize;
    for i in 0..batch {
        for j in (i + 1)..batch {
            if labels[i] == labels[j] {
                same_pairs += 1;
            } else {
                diff_pairs += 1;
            }
        }
    }
    let mut same_mask = vec![S::zero(); batch * batch];
    let mut diff_mask = vec![S::zero(); batch * batch];
    for i in 0..batch {
        for j in (i + 1)..batch {
            if labels[i] == labels[j] {
                same_mask[i * batch + j] = S::one() / S::from_f64(same_pairs as f64);
            } else {
                diff_mask[i * batch + j] = S::one() / S::from_f64(diff_pairs as f64);
            }
        }
    }

    let same_term = if same_pairs > 0 {
        let mask = tape.constant(vec![batch, batch], same_mask);
        let weighted = tape.mul(gram, mask)?;
        let mean_cos = tape.sum(weighted);
        let one = tape.scalar_const(S::one());
        Some(tape.sub(one, mean_cos)?)
    } else {
        None
    };
    let diff_term = if diff_pairs > 0 {
        let mask = tape.constant(vec![batch, batch], diff_mask);
        let magnitudes = tape.abs(gram);
        let weighted = tape.mul(magnitudes, mask)?;
        Some(tape.sum(weighted))
    } else {
        None
    };

    match (same_term, diff_term) {
        (Some(s), Some(d)) => tape.add(s, d),
        (Some(s), None) => Ok(s),
        (None, Some(d)) => Ok(d),
        (None, None) => unreachable!("a batch of >= 2 has at least one pair"),
    }
}

/// Mean negative log-likelihood of the true identities, straight from
/// logits via the tape's log-sum-exp primitive.
pub fn cross_entropy<S: Scalar>(tape: &mut Tape<S>, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.cross_entropy_logits(logits, labels)
}

/// The three terms of one batch, plus their weighted total.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: Var,
    pub mse: Var,
    pub opl: Var,
    pub ce: Var,
}

pub fn total_loss<S: Scalar>(
    tape: &mut Tape<S>,
    latent: &LatentPair,
    fused: Var,
    logits: Var,
    labels: &[usize],
    weights: &LossWeights<S>,
) -> Result<LossBreakdown> {
    weights.validate()?;
    let mse = mse_alignment(tape, latent)?;
    let opl_term = opl(tape, fused, labels)?;
    let ce = cross_entropy(tape, logits, labels)?;
    let weighted_mse = tape.scale(weights.mse, mse);
    let weighted_opl = tape.scale(weights.opl, opl_term);
    let weighted_ce = tape.scale(weights.ce, ce);
    let partial = tape.add(weighted_mse, weighted_opl)?;
    let total = tape.add(partial, weighted_ce)?;
    Ok(LossBreakdown {
        total,
        mse,
        opl: opl_term,
        ce,
    })
}
