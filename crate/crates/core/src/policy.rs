//! Deterministic state-feedback policies.

/// A deterministic map from states to inputs.
pub trait Policy: Send + Sync {
    fn act(&self, x: &[f64]) -> Vec<f64>;
}

impl<F> Policy for F
where
    F: Fn(&[f64]) -> Vec<f64> + Send + Sync,
{
    fn act(&self, x: &[f64]) -> Vec<f64> {
        self(x)
    }
}

/// Always returns the same input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstantPolicy(pub Vec<f64>);

impl Policy for ConstantPolicy {
    fn act(&self, _x: &[f64]) -> Vec<f64> {
        self.0.clone()
    }
}

/// Clips `u` into the box `[lo, hi]` componentwise.
pub fn clip_to_box(u: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    u.iter()
        .zip(lo.iter().zip(hi))
        .map(|(v, (l, h))| v.clamp(*l, *h))
        .collect()
}
