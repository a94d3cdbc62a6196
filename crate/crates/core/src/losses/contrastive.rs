use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{Tape, Tensor, Var};
use crate::error::{NeatError, Result};

/// One positive partner per anchor, drawn uniformly from the other members
/// of its group. Anchors alone in their group get `None`.
pub fn sample_positives(groups: &[usize], seed: u64) -> Vec<Option<usize>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..groups.len())
        .map(|i| {
            let cands: Vec<usize> = (0..groups.len())
                .filter(|&j| j != i && groups[j] == groups[i])
                .collect();
            (!cands.is_empty()).then(|| cands[rng.random_range(0..cands.len())])
        })
        .collect()
}

/// InfoNCE over the rows of `codes` (`[K, D]`, unit-norm). For each anchor
/// with a positive, the logits are its similarity to the sampled positive and
/// to every member of a different group, divided by `tau`. Returns the mean
/// over anchors, or zero (with a warning) when no anchor has a positive.
pub fn info_nce(tape: &mut Tape, codes: Var, groups: &[usize], tau: f64, seed: u64) -> Result<Var> {
    let shape = tape.shape(codes).to_vec();
    if shape.len() != 2 || shape[0] != groups.len() {
        return Err(NeatError::shape(
            "info_nce",
            format!("codes {shape:?} for {} group labels", groups.len()),
        ));
    }
    if !(tau > 0.0) {
        return Err(NeatError::invalid(format!("temperature {tau} must be positive")));
    }
    let k = groups.len();
    let positives = sample_positives(groups, seed);
    if positives.iter().all(Option::is_none) {
        log::warn!("contrastive batch has no positive pairs; term set to 0");
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let t = tape.transpose(codes)?;
    let sim = tape.matmul(codes, t)?;
    let sim = tape.scale(sim, 1.0 / tau);
    let mut losses = Vec::new();
    for (i, pos) in positives.iter().enumerate() {
        let Some(p) = *pos else { continue };
        let mut idx = vec![i * k + p];
        idx.extend((0..k).filter(|&j| groups[j] != groups[i]).map(|j| i * k + j));
        let logits = tape.gather(sim, &idx)?;
        let lse = tape.logsumexp(logits);
        let pos_logit = tape.gather(sim, &idx[..1])?;
        losses.push(tape.sub(lse, pos_logit)?);
    }
    let n = losses.len();
    let stacked = tape.concat(&losses)?;
    let total = tape.sum(stacked);
    Ok(tape.scale(total, 1.0 / n as f64))
}

/// [`info_nce`] on plain code vectors.
pub fn info_nce_codes(codes: &[Vec<f64>], groups: &[usize], tau: f64, seed: u64) -> Result<f64> {
    let d = codes.first().map_or(0, Vec::len);
    if codes.iter().any(|c| c.len() != d) {
        return Err(NeatError::invalid("codes must share one dimension"));
    }
    let mut tape = Tape::new();
    let m = tape.constant(Tensor::new(vec![codes.len(), d], codes.concat())?);
    let out = info_nce(&mut tape, m, groups, tau, seed)?;
    Ok(tape.value(out).item())
}
