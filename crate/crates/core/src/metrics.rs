//! Statistics over sets of session outcomes.

use std::collections::HashSet;

use crate::{Error, Result};

fn check_level(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::OutOfRange(format!("level {alpha} outside (0, 1]")))
    }
}

/// Size of the tail `⌈α·n⌉`, computed with a small tolerance so that e.g.
/// 0.3·10 counts as exactly 3.
fn tail_len(alpha: f64, n: usize) -> usize {
    let raw = alpha * n as f64;
    let rounded = raw.round();
    let k = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (k as usize).clamp(1, n)
}

fn sorted(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(v)
}

pub fn mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("values"));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

/// Population standard deviation.
pub fn std_dev(values: &[f64]) -> Result<f64> {
    let m = mean(values)?;
    Ok((values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / values.len() as f64).sqrt())
}

/// Mean of the lowest `⌈α·n⌉` values.
pub fn empirical_cvar(values: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let v = sorted(values)?;
    let k = tail_len(alpha, v.len());
    Ok(v[..k].iter().sum::<f64>() / k as f64)
}

/// Mean of the highest `⌈α·n⌉` values.
pub fn atr_top(values: &[f64], alpha: f64) -> Result<f64> {
    check_level(alpha)?;
    let v = sorted(values)?;
    let k = tail_len(alpha, v.len());
    Ok(v[v.len() - k..].iter().sum::<f64>() / k as f64)
}

/// `Σ_x Σ_y |x − y| / (2 n Σ v)` via the sorted closed form.
pub fn gini(values: &[f64]) -> Result<f64> {
    let v = sorted(values)?;
    let total: f64 = v.iter().sum();
    if !(total > 0.0) {
        return Err(Error::OutOfRange(format!(
            "Gini is undefined for a nonpositive total ({total})"
        )));
    }
    let n = v.len() as f64;
    // Σ_{x,y}|x−y| = 2 Σ_i (2i − n + 1) x_(i) for ascending 0-based i
    let weighted: f64 = v.iter().enumerate().map(|(i, x)| (2.0 * i as f64 - n + 1.0) * x).sum();
    Ok(2.0 * weighted / (2.0 * n * total))
}

/// Distinct exposed items over `catalog_size × total exposed positions`.
pub fn coverage(lists: &[Vec<usize>], catalog_size: usize) -> Result<f64> {
    if catalog_size == 0 {
        return Err(Error::InvalidConfig("catalog size must be positive".into()));
    }
    let positions: usize = lists.iter().map(Vec::len).sum();
    if positions == 0 {
        return Ok(0.0);
    }
    Ok(distinct_items(lists) as f64 / (catalog_size as f64 * positions as f64))
}

pub fn distinct_items(lists: &[Vec<usize>]) -> usize {
    lists.iter().flatten().collect::<HashSet<_>>().len()
}

/// Fraction of unordered pairs in the list that share a category.
pub fn ils(list: &[usize], categories: &[usize]) -> Result<f64> {
    let k = list.len();
    if k < 2 {
        return Err(Error::OutOfRange(format!("intra-list similarity needs k >= 2, got {k}")));
    }
    if let Some(&bad) = list.iter().find(|&&i| i >= categories.len()) {
        return Err(Error::OutOfRange(format!("item {bad} has no category")));
    }
    let mut same = 0usize;
    for i in 0..k {
        for j in i + 1..k {
            same += usize::from(categories[list[i]] == categories[list[j]]);
        }
    }
    Ok(same as f64 / (k * (k - 1) / 2) as f64)
}

/// Mean ILS over lists.
pub fn mean_ils(lists: &[Vec<usize>], categories: &[usize]) -> Result<f64> {
    let vals = lists.iter().map(|l| ils(l, categories)).collect::<Result<Vec<_>>>()?;
    mean(&vals)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionOutcome {
    pub total_reward: f64,
    pub depth: usize,
    pub exposed: Vec<Vec<usize>>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    pub(crate) fn gini_brute(values: &[f64]) -> f64 {
        let mut s = 0.0;
        for x in values {
            for y in values {
                s += (x - y).abs();
            }
        }
        s / (2.0 * values.len() as f64 * values.iter().sum::<f64>())
    }

    #[test]
    fn cvar_and_atr_cases() {
        let v = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(empirical_cvar(&v, 1.0).unwrap(), 3.0);
        assert_eq!(atr_top(&v, 1.0).unwrap(), 3.0);
        assert_eq!(empirical_cvar(&v, 0.4).unwrap(), 1.5);
        assert_eq!(atr_top(&v, 0.4).unwrap(), 4.5);
        assert_eq!(empirical_cvar(&[2.5; 7], 0.3).unwrap(), 2.5);
        assert_eq!(atr_top(&[20.0; 4], 0.5).unwrap(), 20.0);
        assert!(empirical_cvar(&[], 0.5).is_err());
        assert!(atr_top(&v, 0.0).is_err());
        // ⌈0.3·5⌉ = 2
        assert_eq!(empirical_cvar(&v, 0.3).unwrap(), 1.5);
        // 0.3·10 is exactly 3
        let ten: Vec<f64> = (1..=10).map(f64::from).collect();
        assert_eq!(empirical_cvar(&ten, 0.3).unwrap(), 2.0);
    }

    proptest! {
        #[test]
        fn tails_bracket_mean(values in proptest::collection::vec(-5.0f64..20.0, 1..60), alpha in 0.01f64..1.0) {
            let m = mean(&values).unwrap();
            prop_assert!(empirical_cvar(&values, alpha).unwrap() <= m + 1e-12);
            prop_assert!(atr_top(&values, alpha).unwrap() >= m - 1e-12);
        }

        #[test]
        fn ils_permutation_invariant(list in proptest::collection::vec(0usize..12, 2..10), seed in 0u64..1000) {
            let cats: Vec<usize> = (0..12).map(|i| i % 3).collect();
            let mut shuffled = list.clone();
            let mut r = rng::seeded(seed);
            for i in (1..shuffled.len()).rev() {
                shuffled.swap(i, r.random_range(0..=i));
            }
            prop_assert_eq!(ils(&list, &cats).unwrap(), ils(&shuffled, &cats).unwrap());
        }
    }

    #[test]
    fn gini_cases() {
        assert_eq!(gini(&[3.0; 5]).unwrap(), 0.0);
        assert_relative_eq!(gini(&[0.0, 7.0]).unwrap(), 0.5, epsilon = 1e-15);
        assert!(gini(&[0.0, 0.0]).is_err());
        assert!(gini(&[-1.0, 0.5]).is_err());
        let mut r = rng::seeded(5);
        for _ in 0..100 {
            let v: Vec<f64> = (0..50).map(|_| r.random_range(0.0..10.0)).collect();
            let (fast, slow) = (gini(&v).unwrap(), gini_brute(&v));
            assert!((fast - slow).abs() <= 1e-12 * slow.max(1.0));
            let scaled: Vec<f64> = v.iter().map(|x| x * 3.7).collect();
            assert!((gini(&scaled).unwrap() - fast).abs() < 1e-12);
        }
    }

    #[test]
    fn coverage_cases() {
        let repeated = vec![vec![0, 1, 2]; 4];
        assert_eq!(distinct_items(&repeated), 3);
        assert_relative_eq!(coverage(&repeated, 10).unwrap(), 3.0 / (10.0 * 12.0));
        let all = vec![vec![0, 1], vec![2, 3], vec![4, 0]];
        assert_eq!(distinct_items(&all), 5);
        let trace = vec![vec![7, 3, 9], vec![3, 1, 8], vec![9, 2, 7]];
        let oracle: HashSet<usize> = [7, 3, 9, 1, 8, 2].into_iter().collect();
        assert_eq!(distinct_items(&trace), oracle.len());
        assert_eq!(coverage(&[], 5).unwrap(), 0.0);
        assert!(coverage(&trace, 0).is_err());
    }

    #[test]
    fn ils_cases() {
        let cats = [0, 0, 1, 2, 0];
        assert_eq!(ils(&[0, 1, 4], &cats).unwrap(), 1.0);
        assert_eq!(ils(&[0, 2, 3], &cats).unwrap(), 0.0);
        assert_relative_eq!(ils(&[0, 1, 2, 3], &cats).unwrap(), 1.0 / 6.0);
        assert!(ils(&[0], &cats).is_err());
    }
}
