//! Central finite-difference verification of backward passes.
//!
//! The checker perturbs each selected parameter element by `±eps`, rebuilds
//! the scalar loss, and compares the numeric slope against the gradient
//! produced by [`Tensor::backward`]. It runs at f64, where central
//! differences leave plenty of headroom below the pass tolerance.

use crate::error::Result;
use crate::param_tree::ParamTree;
use crate::rng;
use crate::tensor::{no_grad, Tensor};

use rand::seq::SliceRandom;

/// Settings for a finite-difference sweep.
pub struct GradCheck {
    /// Perturbation half-width.
    pub eps: f64,
    /// Per-parameter cap on checked elements; larger tensors are
    /// subsampled deterministically. `0` means check everything.
    pub max_elements_per_param: usize,
    /// Seed for the subsampling choice.
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            eps: 1e-5,
            max_elements_per_param: 0,
            seed: 0,
        }
    }
}

/// Outcome of a sweep: the worst relative error and where it occurred.
#[derive(Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_param: Option<(String, usize)>,
}

impl GradReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_err <= tolerance
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1.0);
    (analytic - numeric).abs() / denom
}

impl GradCheck {
    /// Checks `d loss / d p` for every selected element of every parameter
    /// in `params`. `loss_fn` must rebuild the loss from the parameters'
    /// current values on each call.
    pub fn run(
        &self,
        params: &ParamTree<f64>,
        mut loss_fn: impl FnMut() -> Result<Tensor<f64>>,
    ) -> Result<GradReport> {
        params.zero_grads();
        let loss = loss_fn()?;
        loss.backward()?;

        let analytic: Vec<(String, Vec<f64>)> = params
            .iter()
            .map(|(name, t)| {
                let g = t.grad().unwrap_or_else(|| vec![0.0; t.len()]);
                (name.to_string(), g)
            })
            .collect();

        let mut report = GradReport {
            checked: 0,
            max_rel_err: 0.0,
            worst_param: None,
        };

        for (name, grads) in &analytic {
            let tensor = params.tensor(name)?;
            let indices = self.pick_indices(name, tensor.len());
            for idx in indices {
                let numeric = {
                    let original = tensor.data()[idx];
                    tensor.data_mut()[idx] = original + self.eps;
                    let plus = no_grad(&mut loss_fn)?.item();
                    tensor.data_mut()[idx] = original - self.eps;
                    let minus = no_grad(&mut loss_fn)?.item();
                    tensor.data_mut()[idx] = original;
                    (plus - minus) / (2.0 * self.eps)
                };
                let err = rel_err(grads[idx], numeric);
                report.checked += 1;
                if err > report.max_rel_err {
                    report.max_rel_err = err;
                    report.worst_param = Some((name.clone(), idx));
                }
            }
        }
        Ok(report)
    }

    fn pick_indices(&self, name: &str, len: usize) -> Vec<usize> {
        let cap = self.max_elements_per_param;
        if cap == 0 || len <= cap {
            return (0..len).collect();
        }
        let mut all: Vec<usize> = (0..len).collect();
        let mut rng = rng::stream(self.seed, "gradcheck", &[rng::label_index(name)]);
        all.shuffle(&mut rng);
        all.truncate(cap);
        all.sort_unstable();
        all
    }
}
