use crate::rng::Rng;
use crate::seqcore::Sequence;
use rand::Rng as _;

#[derive(Debug, Clone, PartialEq)]
pub struct McmcResult {
    pub seq: Sequence,
    /// Energy of the chain state after each proposal; entry 0 is the seed.
    pub energies: Vec<f64>,
    pub accepted: usize,
}

/// `min(1, exp(-delta / temperature))`.
pub fn acceptance_probability(delta: f64, temperature: f64) -> f64 {
    if delta <= 0.0 {
        1.0
    } else {
        (-delta / temperature).exp()
    }
}

/// Metropolis-Hastings over single-token substitutions. Each proposal picks a
/// uniform position among `mutable` and a uniform token in `0..tokens` other
/// than the current one.
pub fn mh_mcmc(
    energy: &dyn Fn(&Sequence) -> f64,
    seed: &Sequence,
    mutable: &[usize],
    tokens: usize,
    temperature: f64,
    steps: usize,
    rng: &mut Rng,
) -> McmcResult {
    let mut cur = seed.clone();
    let mut e = energy(&cur);
    let mut energies = Vec::with_capacity(steps + 1);
    energies.push(e);
    let mut accepted = 0;
    for _ in 0..steps {
        if mutable.is_empty() || tokens < 2 {
            energies.push(e);
            continue;
        }
        let pos = mutable[rng.gen_range(0..mutable.len())];
        let old = cur.get(pos);
        let mut tok = rng.gen_range(0..tokens - 1);
        if tok >= old {
            tok += 1;
        }
        let mut prop = cur.clone();
        prop.set(pos, tok);
        let e2 = energy(&prop);
        if rng.gen::<f64>() < acceptance_probability(e2 - e, temperature) {
            cur = prop;
            e = e2;
            accepted += 1;
        }
        energies.push(e);
    }
    McmcResult {
        seq: cur,
        energies,
        accepted,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn acceptance_rule() {
        assert_eq!(acceptance_probability(0.0, 0.7), 1.0);
        assert!((acceptance_probability(0.7 * 2f64.ln(), 0.7) - 0.5).abs() < 1e-15);
        assert_eq!(acceptance_probability(-3.0, 0.7), 1.0);
    }

    #[test]
    fn stationary_law_matches_boltzmann() {
        // One position over 3 tokens: the chain's occupancy must follow exp(-E/T).
        let e = [0.0, 0.5, 1.5];
        let temp = 0.8;
        let energy = |s: &Sequence| e[s.get(0)];
        let res = mh_mcmc(&energy, &Sequence::new(vec![0]), &[0], 3, temp, 200_000, &mut Rng::seed_from_u64(9));
        let mut counts = [0usize; 3];
        for &x in &res.energies[1000..] {
            let k = e.iter().position(|&v| v == x).unwrap();
            counts[k] += 1;
        }
        let z: f64 = e.iter().map(|v| (-v / temp).exp()).sum();
        let n: usize = counts.iter().sum();
        for k in 0..3 {
            let want = (-e[k] / temp).exp() / z;
            assert!((counts[k] as f64 / n as f64 - want).abs() < 0.01, "{k}");
        }
    }

    #[test]
    fn low_temperature_energy_trends_down() {
        let target = [2usize, 0, 1, 3, 3, 1, 0, 2];
        let energy = |s: &Sequence| s.ids().iter().zip(&target).filter(|(a, b)| a != b).count() as f64;
        let seed = Sequence::new(vec![0; 8]);
        let mutable: Vec<usize> = (0..8).collect();
        let mut early = 0.0;
        let mut late = 0.0;
        for k in 0..20 {
            let r = mh_mcmc(&energy, &seed, &mutable, 4, 0.2, 400, &mut Rng::seed_from_u64(k));
            early += r.energies[50];
            late += r.energies[400];
        }
        assert!(late < early);
    }

    #[test]
    fn immutable_positions_stay() {
        let energy = |s: &Sequence| s.ids().iter().sum::<usize>() as f64;
        let seed = Sequence::new(vec![3, 3, 3, 3]);
        let r = mh_mcmc(&energy, &seed, &[1, 2], 4, 1.0, 500, &mut Rng::seed_from_u64(1));
        assert_eq!(r.seq.get(0), 3);
        assert_eq!(r.seq.get(3), 3);
    }
}
