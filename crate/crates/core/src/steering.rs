//! Additive activation steering along concept directions.
//!
//! A plan of strength `alpha` adds `(alpha / |L|) * v_l` to the residual
//! stream at every window layer `l`. `alpha` is expressed in self-report
//! space: positive values push toward the high end of the rating scale, so
//! plans for sign-corrected concepts use the negated training direction.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probes::ConceptVectorSet;
use crate::scalar::Scalar;
use crate::tensorio::ActivationTensor;

/// Strengths used for self- and cross-steering grids.
pub const DEFAULT_ALPHAS: [f64; 5] = [-4.0, -2.0, 0.0, 2.0, 4.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct SteeringPlan<T> {
    pub concept_name: String,
    pub alpha: f64,
    pub window: Vec<usize>,
    /// Vector added at each window layer.
    pub deltas: BTreeMap<usize, Vec<T>>,
}

/// Intercepts the residual stream after a transformer block.
pub trait ResidualHook<T>: Sync {
    fn hooks_layer(&self, layer: usize) -> bool;

    /// Called once per token position at every layer for which
    /// [`hooks_layer`](Self::hooks_layer) is true.
    fn on_residual(&self, layer: usize, position: usize, hidden: &mut [T]);
}

pub fn build_plan<T: Scalar>(set: &ConceptVectorSet<T>, alpha: f64) -> SteeringPlan<T> {
    let signed = if set.sign_correction { -alpha } else { alpha };
    let scale = T::lit(signed / set.window.len() as f64);
    let deltas = set.window.iter().map(|&l| (l, set.vectors[l].iter().map(|&x| x * scale).collect())).collect();
    SteeringPlan { concept_name: set.concept_name.clone(), alpha, window: set.window.clone(), deltas }
}

impl<T: Scalar> SteeringPlan<T> {
    pub fn cast<U: Scalar>(&self) -> SteeringPlan<U> {
        SteeringPlan {
            concept_name: self.concept_name.clone(),
            alpha: self.alpha,
            window: self.window.clone(),
            deltas: self.deltas.iter().map(|(&l, d)| (l, d.iter().map(|x| U::lit(x.as_f64())).collect())).collect(),
        }
    }

    /// True when every delta is exactly zero.
    pub fn is_noop(&self) -> bool {
        self.deltas.values().flatten().all(|x| *x == T::zero())
    }

    /// Sums deltas over the union of both windows.
    pub fn merged(&self, other: &SteeringPlan<T>) -> Result<SteeringPlan<T>> {
        let mut deltas = self.deltas.clone();
        for (&l, d) in &other.deltas {
            match deltas.get_mut(&l) {
                Some(acc) => {
                    if acc.len() != d.len() {
                        return Err(Error::DimensionMismatch(format!("delta sizes differ at layer {l}")));
                    }
                    for (a, &x) in acc.iter_mut().zip(d) {
                        *a += x;
                    }
                }
                None => {
                    deltas.insert(l, d.clone());
                }
            }
        }
        Ok(SteeringPlan {
            concept_name: format!("{}+{}", self.concept_name, other.concept_name),
            alpha: f64::NAN,
            window: deltas.keys().copied().collect(),
            deltas,
        })
    }
}

impl<T: Scalar> ResidualHook<T> for SteeringPlan<T> {
    fn hooks_layer(&self, layer: usize) -> bool {
        self.deltas.contains_key(&layer)
    }

    fn on_residual(&self, layer: usize, _position: usize, hidden: &mut [T]) {
        if let Some(delta) = self.deltas.get(&layer) {
            for (h, &d) in hidden.iter_mut().zip(delta) {
                *h += d;
            }
        }
    }
}

/// Post-hoc steering of stored activations: every token at every window
/// layer is shifted by that layer's delta.
pub fn apply_to_tensor<T: Scalar>(tensor: &ActivationTensor<T>, plan: &SteeringPlan<T>) -> Result<ActivationTensor<T>> {
    for (&l, d) in &plan.deltas {
        if l >= tensor.layer_count() || d.len() != tensor.hidden_dim() {
            return Err(Error::DimensionMismatch(format!(
                "plan layer {l} (dim {}) does not fit a {}-layer tensor of dim {}",
                d.len(),
                tensor.layer_count(),
                tensor.hidden_dim()
            )));
        }
    }
    let mut out = tensor.clone();
    if plan.is_noop() {
        return Ok(out);
    }
    for &l in plan.deltas.keys() {
        for t in 0..out.token_count() {
            plan.on_residual(l, t, out.hidden_mut(l, t));
        }
    }
    Ok(out)
}
