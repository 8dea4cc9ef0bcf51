//! Sample statistics and log-log order fits used by every condition check.

use serde::{Deserialize, Serialize};

/// A point estimate with its standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub value: f64,
    pub stderr: f64,
}

impl Stat {
    pub fn new(value: f64, stderr: f64) -> Self {
        Stat { value, stderr }
    }

    pub fn exact(value: f64) -> Self {
        Stat { value, stderr: 0.0 }
    }
}

/// Streaming accumulator for mean and standard error.
#[derive(Debug, Clone, Copy, Default)]
pub struct Accumulator {
    n: u64,
    sum: f64,
    sum_sq: f64,
}

impl Accumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Accumulator) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sum / self.n as f64
        }
    }

    /// Unbiased sample variance; zero for fewer than two samples.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        let var = (self.sum_sq - self.sum * self.sum / n) / (n - 1.0);
        var.max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }

    pub fn stat(&self) -> Stat {
        Stat::new(self.mean(), self.stderr())
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn mean_stderr(xs: &[f64]) -> Stat {
    let mut acc = Accumulator::new();
    for &x in xs {
        acc.push(x);
    }
    acc.stat()
}

/// Ordinary least-squares line fit y = a + b x.
///
/// Returns (intercept, slope, slope standard error). The slope stderr comes
/// from the usual residual-variance formula and is zero for two points.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    assert_eq!(x.len(), y.len());
    let n = x.len() as f64;
    assert!(x.len() >= 2, "line_fit needs at least two points");
    let mx = mean(x);
    let my = mean(y);
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        sxx += (xi - mx) * (xi - mx);
        sxy += (xi - mx) * (yi - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let mut ss_res = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let r = yi - intercept - slope * xi;
        ss_res += r * r;
    }
    let dof = (x.len() as f64 - 2.0).max(1.0);
    let slope_se = (ss_res / dof / sxx).sqrt();
    let _ = n;
    (intercept, slope, slope_se)
}

/// Fitted exponent p of err ~ C * h^p over a sweep of (h, err) pairs.
///
/// Pairs with non-positive error are dropped; `None` when fewer than two
/// usable points remain (errors at or below floor carry no slope information).
pub fn order_fit(h: &[f64], err: &[f64], floor: f64) -> Option<OrderFit> {
    let mut lx = Vec::new();
    let mut ly = Vec::new();
    for (&hi, &ei) in h.iter().zip(err) {
        if ei > floor && hi > 0.0 {
            lx.push(hi.ln());
            ly.push(ei.ln());
        }
    }
    if lx.len() < 2 {
        return None;
    }
    let (_, slope, se) = line_fit(&lx, &ly);
    Some(OrderFit {
        exponent: slope,
        stderr: se,
        points: lx.len(),
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct OrderFit {
    pub exponent: f64,
    pub stderr: f64,
    pub points: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accumulator_matches_direct() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let s = mean_stderr(&xs);
        assert!((s.value - 2.5).abs() < 1e-14);
        // sample variance 5/3, stderr sqrt(5/12)
        assert!((s.stderr - (5.0 / 12.0_f64).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn order_fit_recovers_slope() {
        let h = [0.2_f64, 0.1, 0.05, 0.025];
        let err: Vec<f64> = h.iter().map(|&x| 3.0 * x * x.sqrt()).collect();
        let fit = order_fit(&h, &err, 0.0).unwrap();
        assert!((fit.exponent - 1.5).abs() < 1e-10);
    }

    #[test]
    fn order_fit_drops_floored_points() {
        let h = [0.2, 0.1, 0.05];
        let err = [1e-18, 1e-18, 1e-18];
        assert!(order_fit(&h, &err, 1e-15).is_none());
    }
}
