//! Order-statistics helpers shared across modules.

/// Quartile summary of a sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quartiles {
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

/// Quantile with linear interpolation between order statistics: for sorted
/// data of length n, quantile p sits at fractional rank h = (n - 1) * p.
pub(crate) fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    debug_assert!((0.0..=1.0).contains(&p));
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    let frac = h - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Q1/median/Q3 of an unsorted sample (input order untouched; values copied).
pub(crate) fn quartiles(values: &[f64]) -> Quartiles {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Quartiles {
        q1: quantile_sorted(&sorted, 0.25),
        median: quantile_sorted(&sorted, 0.5),
        q3: quantile_sorted(&sorted, 0.75),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_through_five() {
        let q = quartiles(&[5.0, 3.0, 1.0, 4.0, 2.0]);
        assert_eq!(q.median, 3.0);
        assert_eq!(q.q1, 2.0);
        assert_eq!(q.q3, 4.0);
    }

    #[test]
    fn interpolates_between_ranks() {
        // n=4: median at rank 1.5 -> mean of middle two
        let q = quartiles(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(q.median, 2.5);
        assert_eq!(q.q1, 1.75);
        assert_eq!(q.q3, 3.25);
    }

    #[test]
    fn single_element() {
        let q = quartiles(&[7.0]);
        assert_eq!((q.q1, q.median, q.q3), (7.0, 7.0, 7.0));
    }
}
