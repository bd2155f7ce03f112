use super::LamboError;
use crate::rng::Rng;
use crate::seqcore::PositionMask;
use rand::Rng as _;

/// Edit probabilities proportional to saliency; 0 at immutable positions.
pub fn edit_distribution(scores: &[f64], immutable: &PositionMask) -> Result<Vec<f64>, LamboError> {
    let masked: Vec<f64> = scores
        .iter()
        .enumerate()
        .map(|(i, &s)| if immutable.is_conserved(i) { 0.0 } else { s.max(0.0) })
        .collect();
    let total: f64 = masked.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(LamboError::Distribution("no mutable position has positive saliency".into()));
    }
    Ok(masked.into_iter().map(|s| s / total).collect())
}

/// Draws `count` distinct positions one at a time, renormalizing over the
/// positions not yet drawn.
pub fn sample_edit_positions(dist: &[f64], count: usize, rng: &mut Rng) -> Result<Vec<usize>, LamboError> {
    let support = dist.iter().filter(|&&p| p > 0.0).count();
    if count > support {
        return Err(LamboError::Budget {
            budget: count,
            available: support,
        });
    }
    let mut weights = dist.to_vec();
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let total: f64 = weights.iter().sum();
        let mut u = rng.gen::<f64>() * total;
        let mut pick = None;
        for (i, &w) in weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            pick = Some(i);
            if u < w {
                break;
            }
            u -= w;
        }
        let i = pick.expect("positive weight remains");
        weights[i] = 0.0;
        out.push(i);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::saliency_from_norms;
    use crate::rng::Rng;
    use proptest::prelude::*;
    use rand::SeedableRng;

    #[test]
    fn large_temperature_is_uniform_over_mutable() {
        let imm = PositionMask::new(vec![false, true, false, false]);
        let s = saliency_from_norms(&[0.1, 5.0, 2.0, 0.7], 1e6, 1e-6, &imm);
        let d = edit_distribution(&s, &imm).unwrap();
        assert_eq!(d[1], 0.0);
        for i in [0, 2, 3] {
            assert!((d[i] - 1.0 / 3.0).abs() < 1e-5);
        }
    }

    #[test]
    fn dominant_position_takes_all_mass_as_floor_vanishes() {
        let imm = PositionMask::none_conserved(5);
        let norms = [1e-3, 1.0, 1e-3, 1e-3, 1e-3];
        let mut last = 0.0;
        for eps in [1e-2, 1e-4, 1e-8] {
            let d = edit_distribution(&saliency_from_norms(&norms, 0.1, eps, &imm), &imm).unwrap();
            assert!(d[1] > last);
            last = d[1];
        }
        assert!(last > 1.0 - 1e-6);
    }

    #[test]
    fn full_budget_and_point_mass() {
        let mut rng = Rng::seed_from_u64(0);
        let mut all = sample_edit_positions(&[0.2, 0.0, 0.5, 0.3], 3, &mut rng).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 2, 3]);
        for _ in 0..100 {
            assert_eq!(sample_edit_positions(&[0.0, 1.0, 0.0], 1, &mut rng).unwrap(), vec![1]);
        }
        assert!(sample_edit_positions(&[0.0, 1.0, 0.0], 2, &mut rng).is_err());
    }

    /// Inclusion probability of each position under sequential draws.
    fn inclusion_oracle(p: &[f64], b: usize) -> Vec<f64> {
        fn rec(p: &[f64], taken: &mut Vec<usize>, prob: f64, b: usize, out: &mut [f64]) {
            if taken.len() == b {
                for &i in taken.iter() {
                    out[i] += prob;
                }
                return;
            }
            let rest: f64 = (0..p.len()).filter(|i| !taken.contains(i)).map(|i| p[i]).sum();
            for i in 0..p.len() {
                if taken.contains(&i) || p[i] == 0.0 {
                    continue;
                }
                taken.push(i);
                rec(p, taken, prob * p[i] / rest, b, out);
                taken.pop();
            }
        }
        let mut out = vec![0.0; p.len()];
        rec(p, &mut Vec::new(), 1.0, b, &mut out);
        out
    }

    #[test]
    fn inclusion_frequencies_match_enumeration() {
        let p = [0.05, 0.4, 0.1, 0.3, 0.15];
        let want = inclusion_oracle(&p, 2);
        let n = 100_000;
        let mut counts = [0usize; 5];
        let mut rng = Rng::seed_from_u64(17);
        for _ in 0..n {
            for i in sample_edit_positions(&p, 2, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        for i in 0..5 {
            let f = counts[i] as f64 / n as f64;
            let se = (want[i] * (1.0 - want[i]) / n as f64).sqrt();
            assert!((f - want[i]).abs() < 3.0 * se, "{i}: {f} vs {}", want[i]);
        }
    }

    proptest! {
        #[test]
        fn scaling_scores_leaves_distribution_unchanged(scores in prop::collection::vec(1e-3f64..10.0, 2..12), c in 1e-3f64..1e3, bits in prop::collection::vec(any::<bool>(), 12)) {
            let imm = PositionMask::new(bits[..scores.len()].to_vec());
            prop_assume!(imm.conserved_count() < scores.len());
            let a = edit_distribution(&scores, &imm).unwrap();
            let scaled: Vec<f64> = scores.iter().map(|s| s * c).collect();
            let b = edit_distribution(&scaled, &imm).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn draws_are_distinct_and_mutable(weights in prop::collection::vec(0.0f64..1.0, 3..10), seed in 0u64..1000) {
            let support = weights.iter().filter(|&&w| w > 0.0).count();
            prop_assume!(support >= 2);
            let mut rng = Rng::seed_from_u64(seed);
            let picks = sample_edit_positions(&weights, 2, &mut rng).unwrap();
            prop_assert_ne!(picks[0], picks[1]);
            prop_assert!(picks.iter().all(|&i| weights[i] > 0.0));
        }
    }
}
