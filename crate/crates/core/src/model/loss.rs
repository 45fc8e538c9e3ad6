//! Plain-number versions of the per-sentence losses. The batched tape
//! version lives in `forward.rs`; tests check the two agree.

use crate::error::{Error, Result};

fn check(dists: &[Vec<f64>], n: usize, what: &str) -> Result<()> {
    if dists.is_empty() {
        return Err(Error::Contract("loss over an empty sequence".into()));
    }
    if dists.len() != n {
        return Err(Error::Contract(format!(
            "{} distributions for {n} {what}",
            dists.len()
        )));
    }
    Ok(())
}

/// `(1/L) * sum_i -ln P(y_i = t_i)`.
pub fn loss_ce(dists: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    check(dists, targets.len(), "targets")?;
    Ok(ce_sum(dists, targets) / dists.len() as f64)
}

fn ce_sum(dists: &[Vec<f64>], targets: &[usize]) -> f64 {
    dists.iter().zip(targets).map(|(d, &t)| -d[t].ln()).sum()
}

/// `sum_i k_i * -ln P(cpy) + (1 - k_i) * -ln(1 - P(cpy))`, unnormalised.
pub fn loss_bce(dists: &[Vec<f64>], kappa: &[bool], cpy: usize) -> Result<f64> {
    check(dists, kappa.len(), "copy flags")?;
    Ok(dists
        .iter()
        .zip(kappa)
        .map(|(d, &k)| if k { -d[cpy].ln() } else { -(-d[cpy]).ln_1p() })
        .sum())
}

/// `(1/L) * (CE_sum + bce_sum)`, or plain cross-entropy without `use_bce`.
pub fn loss_total(
    dists: &[Vec<f64>],
    targets: &[usize],
    kappa: &[bool],
    cpy: usize,
    use_bce: bool,
) -> Result<f64> {
    check(dists, targets.len(), "targets")?;
    let mut total = ce_sum(dists, targets);
    if use_bce {
        total += loss_bce(dists, kappa, cpy)?;
    }
    Ok(total / dists.len() as f64)
}

/// `k_i` is true iff the source word at the attended position `argmaxes[i]`
/// equals `targets[i]`.
pub fn copy_targets(source: &[String], argmaxes: &[usize], targets: &[String]) -> Vec<bool> {
    argmaxes
        .iter()
        .zip(targets)
        .map(|(&j, t)| source.get(j) == Some(t))
        .collect()
}
