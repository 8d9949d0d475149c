use crate::autograd::{ReduceKind, Trace, Var};
use crate::error::{Error, Result};

/// Splits `f (C, 1, H, W)` into `bins` horizontal strips and returns the
/// per-strip mean plus max, `(bins, C)`.
pub fn horizontal_pool(tr: &mut Trace, f: Var, bins: usize) -> Result<Var> {
    let s = tr.shape(f).to_vec();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape(format!("horizontal pooling expects (C,1,H,W), got {s:?}")));
    }
    let (c, h, w) = (s[0], s[2], s[3]);
    if bins == 0 || h % bins != 0 {
        return Err(Error::shape(format!("{bins} bins do not divide height {h}")));
    }
    let strips = tr.reshape(f, vec![c, bins, (h / bins) * w])?;
    let mean = tr.reduce(strips, ReduceKind::Mean, &[2])?;
    let max = tr.reduce(strips, ReduceKind::Max, &[2])?;
    let parts = tr.add(mean, max)?;
    let parts = tr.reshape(parts, vec![c, bins])?;
    tr.permute(parts, &[1, 0])
}

/// Maps part `b` of `parts (bins, C)` through its own `w[b] (E, C)`,
/// giving `(bins, 1, E)`.
pub fn separate_fc(tr: &mut Trace, parts: Var, w: Var) -> Result<Var> {
    let s = tr.shape(parts).to_vec();
    if s.len() != 2 {
        return Err(Error::shape(format!("parts must be (bins, C), got {s:?}")));
    }
    let x = tr.reshape(parts, vec![s[0], 1, s[1]])?;
    tr.batched_linear(x, w)
}

/// Scalar loss terms of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub triplet: Var,
    pub cross_entropy: Var,
    pub total: Var,
}

/// Batch-all triplet plus per-part cross-entropy on `emb (bins, B, E)` with
/// per-part classifiers `classifier (bins, K, E)`.
pub fn total_loss(
    tr: &mut Trace,
    emb: Var,
    classifier: Var,
    labels: &[usize],
    margin: f64,
) -> Result<LossVars> {
    let triplet = tr.triplet_loss(emb, labels, margin)?;
    let logits = tr.batched_linear(emb, classifier)?;
    let cross_entropy = tr.cross_entropy(logits, labels)?;
    let total = tr.add(triplet, cross_entropy)?;
    Ok(LossVars {
        triplet,
        cross_entropy,
        total,
    })
}
