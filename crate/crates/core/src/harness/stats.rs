use statrs::distribution::{ContinuousCDF, StudentsT};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance.
pub fn variance(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1) as f64
}

pub fn standard_error(x: &[f64]) -> f64 {
    (variance(x) / x.len() as f64).sqrt()
}

/// Ranks starting at 1, ties sharing their average rank.
pub fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut out = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            out[k] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman correlation with the two-sided p-value of the t approximation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spearman {
    pub rho: f64,
    pub n: usize,
    pub p_two_sided: f64,
}

impl Spearman {
    /// One-sided p-value for a negative (`negative = true`) or positive trend.
    pub fn p_one_sided(&self, negative: bool) -> f64 {
        let half = self.p_two_sided / 2.0;
        if (self.rho < 0.0) == negative && self.rho != 0.0 {
            half
        } else {
            1.0 - half
        }
    }
}

pub fn spearman(x: &[f64], y: &[f64]) -> Spearman {
    let n = x.len();
    let rho = pearson(&ranks(x), &ranks(y));
    let p = if n < 3 {
        1.0
    } else if rho.abs() >= 1.0 {
        0.0
    } else {
        let df = (n - 2) as f64;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
        2.0 * dist.sf(t.abs())
    };
    Spearman { rho, n, p_two_sided: p }
}

/// Welch's t statistic, degrees of freedom, and the one-sided p-value for
/// `mean(a) > mean(b)`.
pub fn welch_greater(a: &[f64], b: &[f64]) -> (f64, f64, f64) {
    let (va, vb) = (variance(a) / a.len() as f64, variance(b) / b.len() as f64);
    let se = (va + vb).sqrt();
    let diff = mean(a) - mean(b);
    if se == 0.0 {
        let p = if diff > 0.0 { 0.0 } else { 1.0 };
        return (f64::INFINITY * diff.signum(), f64::NAN, p);
    }
    let t = diff / se;
    let df = (va + vb).powi(2) / (va * va / (a.len() - 1) as f64 + vb * vb / (b.len() - 1) as f64);
    let dist = StudentsT::new(0.0, 1.0, df).expect("positive df");
    (t, df, dist.sf(t))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ranks_average_ties() {
        assert_eq!(ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_reference_values() {
        let x = [1.0, 2.0, 3.0, 4.0, 5.0];
        let s = spearman(&x, &[5.0, 6.0, 7.0, 8.0, 7.0]);
        // rho = 0.8207826816681233 (ties in y), n = 5.
        assert!((s.rho - 0.8207826816681233).abs() < 1e-12);
        // scipy.stats.spearmanr p-value (t approximation, 3 df).
        assert!((s.p_two_sided - 0.08858700531354381).abs() < 1e-9, "{}", s.p_two_sided);
        assert!(s.p_one_sided(false) < 0.05);
        assert!(s.p_one_sided(true) > 0.95);
        let perfect = spearman(&x, &[9.0, 7.0, 5.0, 3.0, 1.0]);
        assert!((perfect.rho + 1.0).abs() < 1e-12);
        assert!(perfect.p_one_sided(true) < 1e-6);
    }

    #[test]
    fn welch_reference_values() {
        let a = [5.1, 4.9, 5.6, 5.8, 6.0, 5.2];
        let b = [4.2, 4.8, 4.4, 5.0, 4.1];
        let (t, df, p) = welch_greater(&a, &b);
        // scipy.stats.ttest_ind(equal_var=False, alternative="greater")
        assert!((t - 3.7755192297941575).abs() < 1e-12, "{t}");
        assert!((df - 8.921987907388289).abs() < 1e-9, "{df}");
        assert!((p - 0.0022241555596451564).abs() < 1e-9, "{p}");
    }
}
