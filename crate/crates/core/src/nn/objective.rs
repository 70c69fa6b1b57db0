/// A scalar function of a flat parameter vector with an exact gradient.
pub trait Objective {
    fn value(&self, params: &[f64]) -> f64;

    fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>);
}

/// Reverse-mode gradient of `objective` at `params`.
pub fn gradient<O: Objective + ?Sized>(objective: &O, params: &[f64]) -> Vec<f64> {
    objective.value_and_gradient(params).1
}

/// `||theta||^2 / 2`
pub struct HalfSquaredNorm;

impl Objective for HalfSquaredNorm {
    fn value(&self, params: &[f64]) -> f64 {
        0.5 * params.iter().map(|p| p * p).sum::<f64>()
    }

    fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        (self.value(params), params.to_vec())
    }
}

pub struct Constant(pub f64);

impl Objective for Constant {
    fn value(&self, _: &[f64]) -> f64 {
        self.0
    }

    fn value_and_gradient(&self, params: &[f64]) -> (f64, Vec<f64>) {
        (self.0, vec![0.0; params.len()])
    }
}
