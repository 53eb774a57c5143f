//! The four training objectives and their weighted combination.
//!
//! Intensity (MSE) and spatial-gradient terms shape the predicted frame;
//! compaction pulls features toward their best-matching prototype;
//! separation pushes the runner-up prototype away with a margin hinge.
//! The last two read their prototype indices from the matching weights and
//! route gradients only through the feature/prototype distances — the
//! argmax itself is a non-differentiable selection.

use crate::error::DiffError;
use crate::ops;
use crate::tape::{Tape, Val};
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub intensity: f64,
    pub gradient: f64,
    pub compaction: f64,
    pub separation: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { intensity: 1.0, gradient: 1.0, compaction: 0.01, separation: 0.01, margin: 1.0 }
    }
}

/// Per-term scalars of one evaluation. The stored total always equals the
/// recomputed weighted sum.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub intensity: f64,
    pub gradient: f64,
    pub compaction: f64,
    pub separation: f64,
    pub total: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.intensity * self.intensity
            + w.gradient * self.gradient
            + w.compaction * self.compaction
            + w.separation * self.separation
    }
}

/// Tape handles for the individual terms. Prototype terms are absent when
/// no prototype stage runs (plain-autoencoder ablation).
pub struct LossTerms {
    pub intensity: Val,
    pub gradient: Val,
    pub compaction: Option<Val>,
    pub separation: Option<Val>,
}

/// Compaction term from matching weights: distances to each site's
/// argmax prototype.
pub fn compaction_from_matches<E: Element>(
    tape: &mut Tape<E>,
    sites: Val,
    protos: Val,
    matches: Val,
) -> Result<Val, DiffError> {
    let assign = ops::argmax_rows(tape.value(matches))?;
    tape.compaction_loss(sites, protos, assign)
}

/// Separation term from matching weights; returns `None` (term defined as
/// zero) when fewer than two prototypes exist.
pub fn separation_from_matches<E: Element>(
    tape: &mut Tape<E>,
    sites: Val,
    protos: Val,
    matches: Val,
    margin: f64,
) -> Result<Option<Val>, DiffError> {
    let m = tape.value(protos).dims2("separation_loss")?.0;
    if m < 2 {
        log::warn!("separation loss degenerate: {m} prototype(s), term set to 0");
        return Ok(None);
    }
    let (nearest, second) = ops::top_two_indices(tape.value(matches))?;
    Ok(Some(tape.separation_loss(sites, protos, nearest, second, margin)?))
}

/// Weighted total over the present terms, with a per-term report. Errors
/// with the offending term's name if any part is non-finite.
pub fn total_loss<E: Element>(
    tape: &mut Tape<E>,
    terms: &LossTerms,
    weights: &LossWeights,
) -> Result<(Val, LossReport), DiffError> {
    let mut report = LossReport::default();
    let mut parts: Vec<(Val, f64)> = Vec::with_capacity(4);

    let grab = |tape: &Tape<E>, val: Val, name: &'static str| -> Result<f64, DiffError> {
        let v = tape.value(val).item().to_f64();
        if !v.is_finite() {
            return Err(DiffError::NonFinite(format!("loss term {name}")));
        }
        Ok(v)
    };

    report.intensity = grab(tape, terms.intensity, "intensity")?;
    parts.push((terms.intensity, weights.intensity));
    report.gradient = grab(tape, terms.gradient, "gradient")?;
    parts.push((terms.gradient, weights.gradient));
    if let Some(cp) = terms.compaction {
        report.compaction = grab(tape, cp, "compaction")?;
        parts.push((cp, weights.compaction));
    }
    if let Some(sp) = terms.separation {
        report.separation = grab(tape, sp, "separation")?;
        parts.push((sp, weights.separation));
    }

    let total = tape.weighted_sum(&parts)?;
    report.total = tape.value(total).item().to_f64();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn terms_on(tape: &mut Tape<f64>, i: f64, g: f64, cp: f64, sp: f64) -> LossTerms {
        LossTerms {
            intensity: tape.leaf(Tensor::scalar(i)),
            gradient: tape.leaf(Tensor::scalar(g)),
            compaction: Some(tape.leaf(Tensor::scalar(cp))),
            separation: Some(tape.leaf(Tensor::scalar(sp))),
        }
    }

    #[test]
    fn zero_weights_zero_total() {
        let mut tape = Tape::new();
        let terms = terms_on(&mut tape, 1.0, 2.0, 3.0, 4.0);
        let w = LossWeights { intensity: 0.0, gradient: 0.0, compaction: 0.0, separation: 0.0, margin: 1.0 };
        let (_, report) = total_loss(&mut tape, &terms, &w).unwrap();
        assert_eq!(report.total, 0.0);
    }

    #[test]
    fn default_weights_combine_as_documented() {
        let mut tape = Tape::new();
        let terms = terms_on(&mut tape, 0.5, 0.25, 3.0, 7.0);
        let w = LossWeights::default();
        let (total, report) = total_loss(&mut tape, &terms, &w).unwrap();
        let want = 0.5 + 0.25 + 0.01 * 3.0 + 0.01 * 7.0;
        assert!((report.total - want).abs() < 1e-12);
        assert!((tape.value(total).item() - want).abs() < 1e-12);
        assert!((report.weighted_total(&w) - report.total).abs() < 1e-12);
    }

    #[test]
    fn doubling_gradient_weight_doubles_its_contribution() {
        let mut tape = Tape::new();
        let terms = terms_on(&mut tape, 0.0, 0.4, 0.0, 0.0);
        let w1 = LossWeights { gradient: 1.0, intensity: 0.0, compaction: 0.0, separation: 0.0, margin: 1.0 };
        let w2 = LossWeights { gradient: 2.0, ..w1 };
        let (_, r1) = total_loss(&mut tape, &terms, &w1).unwrap();
        let (_, r2) = total_loss(&mut tape, &terms, &w2).unwrap();
        assert!((r2.total - 2.0 * r1.total).abs() < 1e-12);
    }

    #[test]
    fn non_finite_term_is_named() {
        let mut tape = Tape::new();
        let terms = terms_on(&mut tape, 1.0, f64::NAN, 0.0, 0.0);
        let err = total_loss(&mut tape, &terms, &LossWeights::default()).unwrap_err();
        assert!(err.to_string().contains("gradient"), "{err}");
    }

    #[test]
    fn compaction_indices_match_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        let sites = Tensor::<f64>::from_fn(&[8, 4], |_| rng.gen_range(-1.0..1.0));
        let protos = Tensor::<f64>::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));
        // cosine matching weights, as the model computes them
        let sn = ops::l2_normalize_rows(&sites, 1e-12).unwrap();
        let pn = ops::l2_normalize_rows(&protos, 1e-12).unwrap();
        let sims = ops::matmul(&sn, &ops::transpose(&pn).unwrap()).unwrap();
        let w = ops::softmax_rows(&sims).unwrap();

        let mut tape = Tape::new();
        let s = tape.leaf(sites.clone());
        let p = tape.leaf(protos.clone());
        let m = tape.leaf(w.clone());
        let loss = compaction_from_matches(&mut tape, s, p, m).unwrap();

        // brute force: argmax of cosine similarity per site
        let mut want = 0.0;
        for n in 0..8 {
            let mut best = (0usize, f64::NEG_INFINITY);
            for k in 0..3 {
                if sims.data()[n * 3 + k] > best.1 {
                    best = (k, sims.data()[n * 3 + k]);
                }
            }
            let d: f64 = (0..4)
                .map(|j| {
                    let r = sites.data()[n * 4 + j] - protos.data()[best.0 * 4 + j];
                    r * r
                })
                .sum::<f64>()
                .sqrt();
            want += d;
        }
        assert!((tape.value(loss).item() - want).abs() < 1e-9);
    }

    #[test]
    fn single_prototype_separation_degenerates_to_none() {
        let mut tape = Tape::<f64>::new();
        let sites = tape.leaf(Tensor::from_fn(&[4, 2], |i| i as f64));
        let protos = tape.leaf(Tensor::from_fn(&[1, 2], |i| i as f64));
        let w = tape.leaf(Tensor::filled(&[4, 1], 1.0));
        let out = separation_from_matches(&mut tape, sites, protos, w, 1.0).unwrap();
        assert!(out.is_none());
    }

    #[test]
    fn single_prototype_compaction_sums_all_distances() {
        let mut tape = Tape::<f64>::new();
        let sites = tape.leaf(Tensor::new(&[2, 2], vec![3.0, 4.0, 0.0, 1.0]).unwrap());
        let protos = tape.leaf(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let w = tape.leaf(Tensor::filled(&[2, 1], 1.0));
        let loss = compaction_from_matches(&mut tape, sites, protos, w).unwrap();
        assert!((tape.value(loss).item() - 6.0).abs() < 1e-12); // 5 + 1
    }
}
