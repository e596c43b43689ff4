//! Limited-memory BFGS direction via the two-loop recursion.

use std::collections::VecDeque;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
struct Pair {
    s: Vec<f64>,
    y: Vec<f64>,
    rho: f64,
}

/// Ring buffer of the most recent curvature pairs.
///
/// A pair is only stored when `yᵀs` exceeds the curvature threshold, which keeps
/// the implicit inverse Hessian positive definite under a noisy objective.
#[derive(Clone, Debug)]
pub struct LbfgsHistory {
    pairs: VecDeque<Pair>,
    capacity: usize,
    curvature_threshold: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl LbfgsHistory {
    pub fn new(capacity: usize, curvature_threshold: f64) -> Self {
        LbfgsHistory {
            pairs: VecDeque::with_capacity(capacity),
            capacity,
            curvature_threshold,
        }
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Stores `(s, y)` if it passes the curvature check. Returns whether it was kept.
    pub fn push(&mut self, s: Vec<f64>, y: Vec<f64>) -> bool {
        assert_eq!(s.len(), y.len(), "pair vectors differ in length");
        let sy = dot(&s, &y);
        if self.capacity == 0 || !sy.is_finite() || sy <= self.curvature_threshold {
            return false;
        }
        if self.pairs.len() == self.capacity {
            self.pairs.pop_front();
        }
        self.pairs.push_back(Pair { s, y, rho: 1.0 / sy });
        true
    }

    /// Iterates over stored `(s, y)` pairs, oldest first.
    pub fn pairs(&self) -> impl Iterator<Item = (&[f64], &[f64])> {
        self.pairs.iter().map(|p| (p.s.as_slice(), p.y.as_slice()))
    }

    pub fn clear(&mut self) {
        self.pairs.clear();
    }

    /// Approximates `H·gradient` for the inverse Hessian `H` implied by the history.
    ///
    /// With no pairs this is the gradient itself.
    pub fn direction(&self, gradient: &[f64]) -> Result<Vec<f64>> {
        if gradient.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("gradient"));
        }
        let mut q = gradient.to_vec();
        let mut alphas = Vec::with_capacity(self.pairs.len());
        for p in self.pairs.iter().rev() {
            let a = p.rho * dot(&p.s, &q);
            q.iter_mut().zip(&p.y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push(a);
        }
        if let Some(newest) = self.pairs.back() {
            let gamma = 1.0 / (newest.rho * dot(&newest.y, &newest.y));
            q.iter_mut().for_each(|qi| *qi *= gamma);
        }
        for (p, a) in self.pairs.iter().zip(alphas.into_iter().rev()) {
            let b = p.rho * dot(&p.y, &q);
            q.iter_mut().zip(&p.s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        Ok(q)
    }
}
