/// An unnormalized target density known only through pointwise evaluation.
///
/// `log_density` returns the natural log of the unnormalized density, or
/// `f64::NEG_INFINITY` outside the support. Targets must be pure functions of
/// their input so that independent chains can share them.
pub trait Target: Send + Sync {
    fn dim(&self) -> usize;

    fn log_density(&self, theta: &[f64]) -> f64;

    /// Gradient of `log_density`, when the target can provide one.
    fn grad_log_density(&self, _theta: &[f64]) -> Option<Vec<f64>> {
        None
    }

    fn has_gradient(&self) -> bool {
        false
    }
}

impl<T: Target + ?Sized> Target for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, theta: &[f64]) -> f64 {
        (**self).log_density(theta)
    }
    fn grad_log_density(&self, theta: &[f64]) -> Option<Vec<f64>> {
        (**self).grad_log_density(theta)
    }
    fn has_gradient(&self) -> bool {
        (**self).has_gradient()
    }
}

impl<T: Target + ?Sized> Target for Box<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_density(&self, theta: &[f64]) -> f64 {
        (**self).log_density(theta)
    }
    fn grad_log_density(&self, theta: &[f64]) -> Option<Vec<f64>> {
        (**self).grad_log_density(theta)
    }
    fn has_gradient(&self) -> bool {
        (**self).has_gradient()
    }
}

/// Wraps a target and counts density evaluations.
#[derive(Debug)]
pub struct CountingTarget<T> {
    inner: T,
    evals: std::sync::atomic::AtomicUsize,
}

impl<T> CountingTarget<T> {
    pub fn new(inner: T) -> Self {
        CountingTarget {
            inner,
            evals: std::sync::atomic::AtomicUsize::new(0),
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evals.load(std::sync::atomic::Ordering::Relaxed)
    }
}

impl<T: Target> Target for CountingTarget<T> {
    fn dim(&self) -> usize {
        self.inner.dim()
    }
    fn log_density(&self, theta: &[f64]) -> f64 {
        self.evals.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
        self.inner.log_density(theta)
    }
    fn grad_log_density(&self, theta: &[f64]) -> Option<Vec<f64>> {
        self.inner.grad_log_density(theta)
    }
    fn has_gradient(&self) -> bool {
        self.inner.has_gradient()
    }
}

/// Log-density of `N(0, I)` in `x.len()` dimensions.
pub fn std_normal_log_density(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * x.iter().map(|v| v * v).sum::<f64>()
}
