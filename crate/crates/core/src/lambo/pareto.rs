use super::LamboError;
use crate::model::{Denoiser, ModelError, ValueHead};
use crate::tensor::{Tape, Tensor, Var};
use rand::distributions::{Distribution, WeightedIndex};

/// `a` weakly dominates `b` everywhere and strictly somewhere (maximization).
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x >= y) && a.iter().zip(b).any(|(x, y)| x > y)
}

/// Non-dominated subset, in input order; duplicates keep their first copy.
pub fn pareto_extract(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        let beaten = points.iter().any(|q| dominates(q, p));
        let repeated = points[..i].iter().any(|q| q == p);
        if !beaten && !repeated {
            out.push(p.clone());
        }
    }
    out
}

/// Exact hypervolume dominated by `points` above `reference`, for any number
/// of objectives (slicing on the last axis).
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> Result<f64, LamboError> {
    for p in points {
        if p.len() != reference.len() {
            return Err(LamboError::Dimension {
                expected: reference.len(),
                got: p.len(),
            });
        }
        if p.iter().zip(reference).any(|(x, r)| x < r) {
            return Err(LamboError::BelowReference);
        }
    }
    Ok(hv_rec(points.to_vec(), reference))
}

fn hv_rec(mut points: Vec<Vec<f64>>, reference: &[f64]) -> f64 {
    let m = reference.len();
    if points.is_empty() || m == 0 {
        return 0.0;
    }
    if m == 1 {
        return points.iter().map(|p| p[0]).fold(reference[0], f64::max) - reference[0];
    }
    let last = m - 1;
    points.sort_by(|a, b| b[last].total_cmp(&a[last]));
    let mut total = 0.0;
    for i in 0..points.len() {
        let top = points[i][last];
        let next = points.get(i + 1).map_or(reference[last], |p| p[last]);
        let depth = top - next;
        if depth <= 0.0 {
            continue;
        }
        let slice: Vec<Vec<f64>> = points[..=i].iter().map(|p| p[..last].to_vec()).collect();
        total += hv_rec(pareto_extract(&slice), &reference[..last]) * depth;
    }
    total
}

/// Front of baseline objective vectors and the reference point.
#[derive(Debug, Clone, PartialEq)]
pub struct ParetoState {
    front: Vec<Vec<f64>>,
    reference: Vec<f64>,
    volume: f64,
}

impl ParetoState {
    /// Prunes `baseline` to its non-dominated subset. The reference defaults
    /// to `-1e-3` in every coordinate.
    pub fn new(baseline: &[Vec<f64>], objectives: usize, reference: Option<Vec<f64>>) -> Result<Self, LamboError> {
        let reference = reference.unwrap_or_else(|| vec![-1e-3; objectives]);
        if reference.len() != objectives {
            return Err(LamboError::Dimension {
                expected: objectives,
                got: reference.len(),
            });
        }
        let front = pareto_extract(baseline);
        let volume = hypervolume(&front, &reference)?;
        Ok(ParetoState {
            front,
            reference,
            volume,
        })
    }

    pub fn front(&self) -> &[Vec<f64>] {
        &self.front
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn objectives(&self) -> usize {
        self.reference.len()
    }

    pub fn volume(&self) -> f64 {
        self.volume
    }

    /// `[HV(front + y) - HV(front)]_+`.
    pub fn hvi(&self, y: &[f64]) -> Result<f64, LamboError> {
        if y.len() != self.reference.len() {
            return Err(LamboError::Dimension {
                expected: self.reference.len(),
                got: y.len(),
            });
        }
        if self.front.iter().any(|p| p.iter().zip(y).all(|(a, b)| a >= b)) {
            return Ok(0.0);
        }
        let clipped: Vec<f64> = y.iter().zip(&self.reference).map(|(a, r)| a.max(*r)).collect();
        let mut pts = self.front.clone();
        pts.push(clipped);
        Ok((hypervolume(&pts, &self.reference)? - self.volume).max(0.0))
    }

    /// HVI of every class combination, first objective slowest; class `c`
    /// stands for objective value `c`.
    pub fn hvi_table(&self, classes: &[usize], cap: usize) -> Result<Vec<f64>, LamboError> {
        let size = combination_count(classes, cap)?;
        let mut out = Vec::with_capacity(size);
        let mut y = vec![0.0; classes.len()];
        for idx in 0..size {
            let mut rem = idx;
            for j in (0..classes.len()).rev() {
                y[j] = (rem % classes[j]) as f64;
                rem /= classes[j];
            }
            out.push(self.hvi(&y)?);
        }
        Ok(out)
    }
}

fn combination_count(classes: &[usize], cap: usize) -> Result<usize, LamboError> {
    let mut size = 1usize;
    for &k in classes {
        size = size.saturating_mul(k);
    }
    if size > cap {
        return Err(LamboError::EhviCap { size, cap });
    }
    Ok(size)
}

/// Default limit on the number of class combinations enumerated exactly.
pub const EHVI_CAP: usize = 10_000;

/// Closed-form EHVI under independent per-objective class distributions.
pub fn discrete_ehvi(tables: &[Vec<f64>], state: &ParetoState, cap: usize) -> Result<f64, LamboError> {
    if tables.len() != state.objectives() {
        return Err(LamboError::Dimension {
            expected: state.objectives(),
            got: tables.len(),
        });
    }
    let classes: Vec<usize> = tables.iter().map(Vec::len).collect();
    let hvi = state.hvi_table(&classes, cap)?;
    let mut total = 0.0;
    for (idx, h) in hvi.iter().enumerate() {
        if *h == 0.0 {
            continue;
        }
        let mut rem = idx;
        let mut p = 1.0;
        for j in (0..classes.len()).rev() {
            p *= tables[j][rem % classes[j]];
            rem /= classes[j];
        }
        total += p * h;
    }
    Ok(total)
}

/// Monte Carlo EHVI: mean HVI and its standard error over `draws` sampled
/// class vectors.
pub fn monte_carlo_ehvi(
    tables: &[Vec<f64>],
    state: &ParetoState,
    draws: usize,
    rng: &mut crate::rng::Rng,
) -> Result<(f64, f64), LamboError> {
    let dists: Vec<WeightedIndex<f64>> = tables
        .iter()
        .map(|t| WeightedIndex::new(t).map_err(|e| LamboError::Distribution(e.to_string())))
        .collect::<Result<_, _>>()?;
    let (mut sum, mut sq) = (0.0, 0.0);
    let mut y = vec![0.0; tables.len()];
    for _ in 0..draws {
        for (j, d) in dists.iter().enumerate() {
            y[j] = d.sample(rng) as f64;
        }
        let h = state.hvi(&y)?;
        sum += h;
        sq += h * h;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = (sq / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    Ok((mean, (var / n).sqrt()))
}

/// Differentiable EHVI of ensemble-mean head predictions.
#[derive(Debug, Clone)]
pub struct Acquisition {
    objectives: Vec<usize>,
    table: Tensor,
}

impl Acquisition {
    pub fn new(model: &Denoiser, objectives: Vec<usize>, state: &ParetoState, cap: usize) -> Result<Self, LamboError> {
        if objectives.len() != state.objectives() || objectives.is_empty() {
            return Err(LamboError::Dimension {
                expected: state.objectives(),
                got: objectives.len(),
            });
        }
        let mut classes = Vec::with_capacity(objectives.len());
        for &o in &objectives {
            if o >= model.objectives() {
                return Err(ModelError::Objective(o).into());
            }
            classes.push(model.classes(o));
        }
        let table = Tensor::from_vec(state.hvi_table(&classes, cap)?);
        Ok(Acquisition { objectives, table })
    }

    pub fn objectives(&self) -> &[usize] {
        &self.objectives
    }
}

impl ValueHead for Acquisition {
    fn value(&self, model: &Denoiser, tape: &mut Tape, h: Var) -> Result<Var, ModelError> {
        let mut joint = model.ensemble_probs(tape, h, self.objectives[0])?;
        for &o in &self.objectives[1..] {
            let p = model.ensemble_probs(tape, h, o)?;
            joint = tape.row_outer(joint, p)?;
        }
        let table = tape.constant(self.table.clone())?;
        let weighted = tape.mul_broadcast(joint, table)?;
        Ok(tape.sum(weighted)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DenoiserConfig, GuidanceLayer};
    use crate::rng::Rng;
    use crate::seqcore::Sequence;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    #[test]
    fn small_volumes() {
        assert_eq!(hypervolume(&[vec![1.0, 1.0]], &[0.0, 0.0]).unwrap(), 1.0);
        assert_eq!(hypervolume(&[vec![2.0, 1.0], vec![1.0, 2.0]], &[0.0, 0.0]).unwrap(), 3.0);
        let with_dominated = hypervolume(&[vec![2.0, 1.0], vec![1.0, 2.0], vec![0.5, 0.5]], &[0.0, 0.0]).unwrap();
        assert_eq!(with_dominated, 3.0);
        assert_eq!(hypervolume(&[vec![1.0, 2.0, 3.0]], &[0.0, 0.0, 0.0]).unwrap(), 6.0);
        assert!(matches!(hypervolume(&[vec![-1.0, 1.0]], &[0.0, 0.0]), Err(LamboError::BelowReference)));
    }

    #[test]
    fn three_objective_inclusion_exclusion() {
        let pts = vec![vec![2.0, 1.0, 1.0], vec![1.0, 2.0, 1.0], vec![1.0, 1.0, 2.0]];
        // 3 boxes of volume 2, pairwise overlaps 1, triple overlap 1.
        assert_eq!(hypervolume(&pts, &[0.0; 3]).unwrap(), 3.0 * 2.0 - 3.0 + 1.0);
    }

    #[test]
    fn pareto_example() {
        let pts = vec![vec![1.0, 2.0], vec![2.0, 1.0], vec![1.0, 1.0]];
        assert_eq!(pareto_extract(&pts), vec![vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert_eq!(pareto_extract(&pts[2..]), vec![vec![1.0, 1.0]]);
    }

    #[test]
    fn hvi_cases() {
        let st = ParetoState::new(&[vec![1.0, 1.0]], 2, Some(vec![0.0, 0.0])).unwrap();
        assert_eq!(st.hvi(&[0.5, 0.5]).unwrap(), 0.0);
        assert_eq!(st.hvi(&[2.0, 3.0]).unwrap(), 6.0 - 1.0);
    }

    fn brute_front(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        for (i, p) in points.iter().enumerate() {
            let mut keep = true;
            for (j, q) in points.iter().enumerate() {
                let ge = q.iter().zip(p).all(|(a, b)| a >= b);
                let gt = q.iter().zip(p).any(|(a, b)| a > b);
                if (ge && gt) || (j < i && q == p) {
                    keep = false;
                }
            }
            if keep {
                out.push(p.clone());
            }
        }
        out
    }

    fn grid_volume(points: &[Vec<f64>], reference: &[f64], n: usize) -> f64 {
        // Exact for integer-valued points on a unit grid.
        let m = reference.len();
        let mut count = 0usize;
        let mut idx = vec![0usize; m];
        loop {
            let cell: Vec<f64> = idx.iter().zip(reference).map(|(&i, r)| r + i as f64 + 0.5).collect();
            if points.iter().any(|p| p.iter().zip(&cell).all(|(a, c)| a >= c)) {
                count += 1;
            }
            let mut k = 0;
            loop {
                if k == m {
                    return count as f64;
                }
                idx[k] += 1;
                if idx[k] < n {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
        }
    }

    proptest! {
        #[test]
        fn extract_matches_brute_force(pts in prop::collection::vec(prop::collection::vec(0u8..6, 3), 1..20)) {
            let pts: Vec<Vec<f64>> = pts.into_iter().map(|p| p.into_iter().map(f64::from).collect()).collect();
            let front = pareto_extract(&pts);
            prop_assert_eq!(&front, &brute_front(&pts));
            for p in &pts {
                prop_assert!(front.contains(p) || front.iter().any(|q| dominates(q, p)));
            }
        }

        #[test]
        fn integer_volumes_match_grid_count(pts in prop::collection::vec(prop::collection::vec(0u8..5, 3), 1..8), extra in prop::collection::vec(0u8..5, 3)) {
            let pts: Vec<Vec<f64>> = pts.into_iter().map(|p| p.into_iter().map(f64::from).collect()).collect();
            let r = [0.0; 3];
            let hv = hypervolume(&pts, &r).unwrap();
            prop_assert_eq!(hv, grid_volume(&pts, &r, 5));
            let mut more = pts.clone();
            more.push(extra.into_iter().map(f64::from).collect());
            prop_assert!(hypervolume(&more, &r).unwrap() >= hv);
        }
    }

    #[test]
    fn ehvi_matches_enumeration_and_monte_carlo() {
        let mut rng = Rng::seed_from_u64(8);
        let base = vec![vec![3.0, 1.0], vec![1.0, 3.0], vec![2.0, 2.0]];
        let st = ParetoState::new(&base, 2, None).unwrap();
        let rand_table = |k: usize, rng: &mut Rng| {
            let w: Vec<f64> = (0..k).map(|_| rng.gen::<f64>()).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect::<Vec<f64>>()
        };
        let tables = vec![rand_table(5, &mut rng), rand_table(4, &mut rng)];
        let exact = discrete_ehvi(&tables, &st, EHVI_CAP).unwrap();
        let mut enumerated = 0.0;
        for a in 0..5 {
            for b in 0..4 {
                enumerated += tables[0][a] * tables[1][b] * st.hvi(&[a as f64, b as f64]).unwrap();
            }
        }
        assert!((exact - enumerated).abs() < 1e-12);
        let (mc, se) = monte_carlo_ehvi(&tables, &st, 20_000, &mut rng).unwrap();
        assert!((mc - exact).abs() < 3.0 * se, "{mc} vs {exact} (se {se})");
    }

    #[test]
    fn ehvi_reduced_cases() {
        let st = ParetoState::new(&[vec![5.0, 5.0]], 2, None).unwrap();
        assert_eq!(discrete_ehvi(&[vec![0.5, 0.5], vec![0.2, 0.8]], &st, EHVI_CAP).unwrap(), 0.0);
        let st = ParetoState::new(&[vec![0.5]], 1, Some(vec![0.0])).unwrap();
        let p = [0.3, 0.7];
        let e = discrete_ehvi(&[p.to_vec()], &st, EHVI_CAP).unwrap();
        assert!((e - p[1] * st.hvi(&[1.0]).unwrap()).abs() < 1e-15);
        assert!(matches!(
            discrete_ehvi(&[vec![0.01; 101], vec![0.01; 100]], &ParetoState::new(&[], 2, None).unwrap(), EHVI_CAP),
            Err(LamboError::EhviCap { .. })
        ));
    }

    fn model() -> Denoiser {
        let cfg = DenoiserConfig {
            vocab: 4,
            length: 5,
            embed_dim: 4,
            channels: 6,
            encoder_blocks: 1,
            head_blocks: 1,
            kernel_width: 3,
            ensemble_size: 2,
            objective_classes: vec![3, 4],
            timesteps: 8,
            guidance_layer: GuidanceLayer::Last,
        };
        Denoiser::new(cfg, &mut Rng::seed_from_u64(21)).unwrap()
    }

    #[test]
    fn acquisition_equals_closed_form() {
        let m = model();
        let st = ParetoState::new(&[vec![1.0, 1.0]], 2, None).unwrap();
        let acq = Acquisition::new(&m, vec![0, 1], &st, EHVI_CAP).unwrap();
        let seq = Sequence::new(vec![0, 1, 2, 3, 1]);
        let h = m.hidden(&seq, 0).unwrap();
        let tables: Vec<Vec<f64>> = (0..2)
            .map(|o| {
                let members = m.head_probability_table(&h, o).unwrap();
                let k = members[0].len();
                (0..k).map(|c| members.iter().map(|r| r[c]).sum::<f64>() / members.len() as f64).collect()
            })
            .collect();
        let want = discrete_ehvi(&tables, &st, EHVI_CAP).unwrap();
        let got = crate::model::clean_value(&m, &seq, &acq).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!(got >= 0.0);
    }

    #[test]
    fn acquisition_gradient_matches_finite_differences() {
        let m = model();
        let st = ParetoState::new(&[vec![1.0, 0.0], vec![0.0, 2.0]], 2, None).unwrap();
        let acq = Acquisition::new(&m, vec![0, 1], &st, EHVI_CAP).unwrap();
        let seq = Sequence::new(vec![0, 1, 2, 3, 1]);
        let h0 = m.embed_tensor(&seq).unwrap();
        let f = |x: &Tensor| {
            let mut tape = Tape::frozen();
            let v = tape.constant(x.clone()).unwrap();
            let h = m.encode_embedded(&mut tape, v, &[0]).unwrap();
            let y = acq.value(&m, &mut tape, h).unwrap();
            tape.value(y).item()
        };
        let (g, _) = m.value_gradient_h0(&seq, &acq).unwrap();
        let step = 1e-5;
        for i in 0..h0.numel() {
            let mut a = h0.clone();
            a.data_mut()[i] += step;
            let mut b = h0.clone();
            b.data_mut()[i] -= step;
            let fd = (f(&a) - f(&b)) / (2.0 * step);
            let an = g.data()[i];
            let scale = an.abs().max(fd.abs()).max(1e-6);
            assert!((an - fd).abs() / scale < 1e-4, "{i}: {an} vs {fd}");
        }
    }
}
