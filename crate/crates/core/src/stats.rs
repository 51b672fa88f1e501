//! Summary statistics shared by the oracles, the harness and the tests.

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Unbiased sample standard deviation (`n − 1` denominator); 0 for `n < 2`.
pub fn sample_std(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

/// `sample_std / √n`.
pub fn standard_error(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    sample_std(xs) / (xs.len() as f64).sqrt()
}

/// Median; the mean of the two middle values for even lengths.
pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Per-key running sums over disjoint segments of a single trajectory.
///
/// Each segment yields one ratio estimate per key; the spread of those
/// segment means gives a standard error that accounts for autocorrelation
/// inside the trajectory.
#[derive(Clone, Debug)]
pub struct BatchMeans {
    sums: Vec<Vec<f64>>,
    counts: Vec<Vec<u64>>,
}

impl BatchMeans {
    pub fn new(keys: usize, batches: usize) -> Self {
        Self { sums: vec![vec![0.0; batches]; keys], counts: vec![vec![0; batches]; keys] }
    }

    pub fn batches(&self) -> usize {
        self.sums.first().map_or(0, Vec::len)
    }

    pub fn record(&mut self, key: usize, batch: usize, value: f64) {
        self.sums[key][batch] += value;
        self.counts[key][batch] += 1;
    }

    /// Overall ratio estimate and batch-mean standard error for `key`.
    /// Batches without observations of `key` are skipped.
    pub fn estimate(&self, key: usize) -> (f64, f64, u64) {
        let total: f64 = self.sums[key].iter().sum();
        let count: u64 = self.counts[key].iter().sum();
        let seg: Vec<f64> = self.sums[key]
            .iter()
            .zip(&self.counts[key])
            .filter(|(_, &c)| c > 0)
            .map(|(s, &c)| s / c as f64)
            .collect();
        (total / count as f64, standard_error(&seg), count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basic_statistics() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mean(&xs), 2.5);
        assert_eq!(median(&xs), 2.5);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        let sd = (5.0f64 / 3.0).sqrt();
        assert!((sample_std(&xs) - sd).abs() < 1e-15);
        assert!((standard_error(&xs) - sd / 2.0).abs() < 1e-15);
    }

    #[test]
    fn batch_means_ratio() {
        let mut b = BatchMeans::new(1, 2);
        b.record(0, 0, 1.0);
        b.record(0, 0, 3.0);
        b.record(0, 1, 5.0);
        let (est, se, n) = b.estimate(0);
        assert_eq!(n, 3);
        assert_eq!(est, 3.0);
        // segment means 2 and 5
        assert!((se - standard_error(&[2.0, 5.0])).abs() < 1e-15);
    }
}
