//! Metric and classification losses over a P×K batch.

use rapa_tensor::{Graph, Real, RowReduce, Var};

use crate::error::{Error, Result};

/// Checks that `labels` form a P×K batch with P ≥ 2 and K ≥ 2.
pub fn check_pk(labels: &[usize]) -> Result<(usize, usize)> {
    let mut counts: Vec<(usize, usize)> = Vec::new();
    for &l in labels {
        match counts.iter_mut().find(|(id, _)| *id == l) {
            Some((_, c)) => *c += 1,
            None => counts.push((l, 1)),
        }
    }
    let k = counts.first().map_or(0, |&(_, c)| c);
    if counts.len() < 2 || k < 2 || counts.iter().any(|&(_, c)| c != k) {
        return Err(Error::Data(format!(
            "batch-hard triplet needs at least 2 identities with the same number (≥ 2) of samples each; got {counts:?}"
        )));
    }
    Ok((counts.len(), k))
}

/// Batch-hard triplet loss summed over anchors, with Euclidean distances:
/// `Σ_a [margin + max_pos d(a, p) − min_neg d(a, n)]₊`. The anchor counts
/// as its own positive.
pub fn batch_hard_triplet<T: Real>(g: &mut Graph<T>, features: Var, labels: &[usize], margin: f64) -> Result<Var> {
    check_pk(labels)?;
    let n = labels.len();
    if g.shape(features).first() != Some(&n) {
        return Err(Error::Data(format!("{n} labels for features {:?}", g.shape(features))));
    }
    let dist = g.pairwise_dist(features, false)?;
    let pos: Vec<bool> = (0..n * n).map(|i| labels[i / n] == labels[i % n]).collect();
    let neg: Vec<bool> = pos.iter().map(|&p| !p).collect();
    let hardest_pos = g.masked_reduce_rows(dist, &pos, RowReduce::Max)?;
    let hardest_neg = g.masked_reduce_rows(dist, &neg, RowReduce::Min)?;
    let gap = g.sub(hardest_pos, hardest_neg)?;
    let gap = g.add_scalar(gap, T::from_f64_lossy(margin));
    let hinge = g.relu(gap);
    Ok(g.sum_all(hinge))
}

/// Mean negative log-likelihood of the true class under a softmax of `logits`.
pub fn softmax_ce<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::Data(format!("{} labels for logits {s:?}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= s[1]) {
        return Err(Error::Data(format!("label {bad} outside {} classes", s[1])));
    }
    let lsm = g.log_softmax_last(logits)?;
    let picked = g.gather_cols(lsm, labels)?;
    let mean = g.mean_all(picked);
    Ok(g.scale(mean, -T::one()))
}

/// `Σ_c L_c + λ · L_reg`.
pub fn total_loss<T: Real>(g: &mut Graph<T>, branch_losses: &[Var], reg: Option<Var>, lambda: f64) -> Result<Var> {
    let mut total = match branch_losses.split_first() {
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &l| g.add(acc, l))?,
        None => return Err(Error::Data("no branch losses".into())),
    };
    if let Some(r) = reg {
        let weighted = g.scale(r, T::from_f64_lossy(lambda));
        total = g.add(total, weighted)?;
    }
    Ok(total)
}
