//! Adam optimizer and the training objectives.
//!
//! The combined objective is reconstruction error plus, from global epoch 3
//! onward, a proximal penalty pulling the shared denoiser weights toward
//! the last aggregated weights. During epochs 1 and 2 the penalty graph is
//! never built, so value and gradients are bit-identical to the plain
//! reconstruction loss.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::ftn::CountLevel;
use crate::param_tree::ParamTree;
use crate::tensor::{Element, Tensor};
use crate::unet::DenoiserModel;

/// Global epochs before the weight-constraint term activates.
pub const GWC_WARMUP_EPOCHS: u32 = 2;

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_gwc: f64,
    pub mu_fedprox: f64,
    /// Use the unnormalized squared-distance sum instead of the
    /// element-count-normalized mean.
    pub gwc_raw_sum: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_gwc: 0.001,
            mu_fedprox: 0.01,
            gwc_raw_sum: false,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_gwc < 0.0 || self.mu_fedprox < 0.0 {
            return Err(Error::config(format!(
                "loss weights must be non-negative, got lambda={} mu={}",
                self.lambda_gwc, self.mu_fedprox
            )));
        }
        Ok(())
    }
}

/// Adam state: first/second moments congruent to the optimized tree.
pub struct AdamState<T: Element> {
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
    pub step_count: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<T: Element> AdamState<T> {
    pub fn new(params: &ParamTree<T>, lr: f64) -> Self {
        let m = params
            .iter()
            .map(|(n, t)| (n.to_string(), vec![T::ZERO; t.len()]))
            .collect();
        let v = params
            .iter()
            .map(|(n, t)| (n.to_string(), vec![T::ZERO; t.len()]))
            .collect();
        AdamState {
            m,
            v,
            step_count: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// One Adam update over `params`, then gradient reset.
    ///
    /// Every parameter must carry a gradient (a loss that does not touch
    /// some parameter indicates a wiring bug, not a zero gradient).
    pub fn step(&mut self, params: &ParamTree<T>) -> Result<()> {
        for (name, _) in params.iter() {
            if !self.m.contains_key(name) {
                return Err(Error::contract(format!(
                    "optimizer state has no moments for parameter {name:?}"
                )));
            }
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let one_m_b1 = T::from_f64(1.0 - self.beta1);
        let one_m_b2 = T::from_f64(1.0 - self.beta2);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        let lr = T::from_f64(self.lr);
        let eps = T::from_f64(self.eps);

        for (name, tensor) in params.iter() {
            let grad = tensor.grad().ok_or_else(|| {
                Error::contract(format!("parameter {name:?} has no gradient before step"))
            })?;
            let m = self.m.get_mut(name).unwrap();
            let v = self.v.get_mut(name).unwrap();
            let mut data = tensor.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = b1 * m[i] + one_m_b1 * g;
                v[i] = b2 * v[i] + one_m_b2 * g * g;
                let m_hat = m[i] * inv_bc1;
                let v_hat = v[i] * inv_bc2;
                data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.zero_grads();
        Ok(())
    }
}

/// Mean reconstruction error over a batch: each `(x, y, d)` item runs a
/// training-mode forward pass and contributes `mse(forward(x, d), y)`.
pub fn recon_loss<T: Element>(
    model: &DenoiserModel<T>,
    batch: &[(Tensor<T>, Tensor<T>, CountLevel)],
) -> Result<Tensor<T>> {
    if batch.is_empty() {
        return Err(Error::contract("reconstruction loss over an empty batch"));
    }
    let mut acc: Option<Tensor<T>> = None;
    for (x, y, d) in batch {
        let pred = model.forward(x, *d, true)?;
        let item = pred.mse(y)?;
        acc = Some(match acc {
            Some(a) => a.add(&item)?,
            None => item,
        });
    }
    let total = acc.unwrap();
    total.scale(T::ONE / T::from_f64(batch.len() as f64))
}

fn check_trees_match<T: Element>(local: &ParamTree<T>, anchor: &ParamTree<T>) -> Result<()> {
    local
        .check_congruent(anchor)
        .map_err(|e| Error::shape(format!("proximal trees incongruent: {e}")))
}

/// Squared distance between two congruent trees, normalized by total
/// element count unless `raw_sum`. No gradient flows into `anchor`.
pub fn gwc_loss<T: Element>(
    local: &ParamTree<T>,
    anchor: &ParamTree<T>,
    raw_sum: bool,
) -> Result<Tensor<T>> {
    check_trees_match(local, anchor)?;
    let mut acc: Option<Tensor<T>> = None;
    let mut count = 0usize;
    for ((_, t), (_, a)) in local.iter().zip(anchor.iter()) {
        let term = t.sub(&a.detach())?.sum_sq()?;
        count += t.len();
        acc = Some(match acc {
            Some(s) => s.add(&term)?,
            None => term,
        });
    }
    let total = acc.ok_or_else(|| Error::contract("proximal loss over empty trees"))?;
    if raw_sum {
        Ok(total)
    } else {
        total.scale(T::ONE / T::from_f64(count as f64))
    }
}

/// FedProx proximal term: `(mu / 2)` times the normalized squared distance.
/// Applied every epoch, with no warm-up gate.
pub fn fedprox_term<T: Element>(
    local: &ParamTree<T>,
    anchor: &ParamTree<T>,
    mu: f64,
) -> Result<Tensor<T>> {
    let dist = gwc_loss(local, anchor, false)?;
    dist.scale(T::from_f64(mu / 2.0))
}

/// Training objective at global epoch `q` (1-based).
///
/// For `q <= 2` this is exactly [`recon_loss`] — the penalty graph is not
/// constructed at all. From `q = 3` on, adds `lambda` times the weight
/// constraint between the model's `denoiser.*` subtree and the anchor.
pub fn combined_loss<T: Element>(
    model: &DenoiserModel<T>,
    batch: &[(Tensor<T>, Tensor<T>, CountLevel)],
    anchor: Option<&ParamTree<T>>,
    weights: &LossWeights,
    q: u32,
) -> Result<Tensor<T>> {
    let recon = recon_loss(model, batch)?;
    if q <= GWC_WARMUP_EPOCHS {
        return Ok(recon);
    }
    let anchor = anchor.ok_or_else(|| {
        Error::contract(format!("weight constraint active at epoch {q} but no anchor deployed"))
    })?;
    let local = model.params.subset(|n| n.starts_with("denoiser."));
    let anchor_sub = anchor.subset(|n| n.starts_with("denoiser."));
    let gwc = gwc_loss(&local, &anchor_sub, weights.gwc_raw_sum)?;
    recon.add(&gwc.scale(T::from_f64(weights.lambda_gwc))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::unet::UNetConfig;

    fn scalar_param(v: f64) -> (ParamTree<f64>, Tensor<f64>) {
        let t = Tensor::from_vec(&[1], vec![v]).unwrap();
        t.set_requires_grad(true);
        let mut tree = ParamTree::new();
        tree.insert("w", t.clone()).unwrap();
        (tree, t)
    }

    fn tiny_model(seed: u64) -> DenoiserModel<f64> {
        let mut r = rng::stream(seed, "model", &[]);
        DenoiserModel::init(
            UNetConfig {
                levels: 2,
                base_channels: 4,
                ..UNetConfig::default()
            },
            &mut r,
        )
        .unwrap()
    }

    fn d(v: f64) -> CountLevel {
        CountLevel::new(v).unwrap()
    }

    #[test]
    fn adam_first_step_closed_form() {
        let (tree, w) = scalar_param(0.0);
        // loss = w, so the gradient is exactly 1.
        let loss = w.scale(1.0).unwrap();
        loss.backward().unwrap();
        let mut adam = AdamState::new(&tree, 0.1);
        adam.step(&tree).unwrap();
        // m_hat = 1, v_hat = 1: w = -lr / (1 + eps).
        let expect = -0.1 / (1.0 + 1e-8);
        assert!((w.data()[0] - expect).abs() < 1e-15, "{}", w.data()[0]);
        assert_eq!(adam.step_count, 1);
        assert!(!w.has_grad(), "step must clear gradients");
    }

    #[test]
    fn adam_zero_gradient_is_a_fixed_point() {
        let (tree, w) = scalar_param(1.5);
        let loss = w.scale(0.0).unwrap();
        loss.backward().unwrap();
        let mut adam = AdamState::new(&tree, 0.1);
        adam.step(&tree).unwrap();
        assert_eq!(w.data()[0], 1.5);
        assert_eq!(adam.m["w"], vec![0.0]);
        assert_eq!(adam.v["w"], vec![0.0]);
    }

    #[test]
    fn adam_missing_gradient_rejected() {
        let (tree, _) = scalar_param(1.0);
        let mut adam = AdamState::new(&tree, 0.1);
        assert!(matches!(adam.step(&tree), Err(Error::Contract(_))));
    }

    #[test]
    fn adam_lr_zero_leaves_params_invariant() {
        let (tree, w) = scalar_param(2.0);
        let mut adam = AdamState::new(&tree, 0.0);
        for _ in 0..3 {
            let loss = w.sum_sq().unwrap();
            loss.backward().unwrap();
            adam.step(&tree).unwrap();
        }
        assert_eq!(w.data()[0], 2.0);
        assert_eq!(adam.step_count, 3);
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let (tree, w) = scalar_param(0.7);
            let mut adam = AdamState::new(&tree, 1e-2);
            for _ in 0..5 {
                let loss = w.sum_sq().unwrap();
                loss.backward().unwrap();
                adam.step(&tree).unwrap();
            }
            let bits = w.data()[0].to_bits();
            bits
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn recon_loss_zero_for_identity_on_clean_pairs() {
        let model = tiny_model(1);
        for (_, t) in model.params.iter() {
            for v in t.data_mut().iter_mut() {
                *v = 0.0;
            }
        }
        let x = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 2.0).unwrap();
        let batch = vec![(x.clone(), x.clone(), d(0.1))];
        assert_eq!(recon_loss(&model, &batch).unwrap().item(), 0.0);

        // Pair differing by a constant 1 everywhere: mean of ones squared.
        let y = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 3.0).unwrap();
        let batch = vec![(x, y, d(0.1))];
        assert_eq!(recon_loss(&model, &batch).unwrap().item(), 1.0);
    }

    #[test]
    fn recon_loss_matches_composed_forward_mse() {
        let model = tiny_model(2);
        let mut r = rng::stream(3, "data", &[]);
        use rand::Rng;
        let mk = |r: &mut rand_chacha::ChaCha8Rng| {
            let v: Vec<f64> = (0..64).map(|_| r.random_range(0.0..1.0)).collect();
            Tensor::from_vec(&[1, 1, 4, 4, 4], v).unwrap()
        };
        let batch = vec![
            (mk(&mut r), mk(&mut r), d(0.05)),
            (mk(&mut r), mk(&mut r), d(0.2)),
        ];
        let loss = recon_loss(&model, &batch).unwrap().item();
        let mut expect = 0.0;
        for (x, y, dl) in &batch {
            expect += model.forward(x, *dl, true).unwrap().mse(y).unwrap().item();
        }
        expect /= 2.0;
        assert!((loss - expect).abs() < 1e-12, "{loss} vs {expect}");
    }

    #[test]
    fn recon_loss_rejects_empty_batch() {
        let model = tiny_model(4);
        assert!(matches!(
            recon_loss(&model, &[]),
            Err(Error::Contract(_))
        ));
    }

    fn pair_trees(a: &[f64], b: &[f64]) -> (ParamTree<f64>, ParamTree<f64>) {
        let ta = Tensor::from_vec(&[a.len()], a.to_vec()).unwrap();
        ta.set_requires_grad(true);
        let tb = Tensor::from_vec(&[b.len()], b.to_vec()).unwrap();
        let mut la = ParamTree::new();
        la.insert("w", ta).unwrap();
        let mut lb = ParamTree::new();
        lb.insert("w", tb).unwrap();
        (la, lb)
    }

    #[test]
    fn gwc_hand_values() {
        let (local, anchor) = pair_trees(&[1.0, 2.0], &[0.0, 0.0]);
        assert_eq!(gwc_loss(&local, &anchor, false).unwrap().item(), 2.5);
        assert_eq!(gwc_loss(&local, &anchor, true).unwrap().item(), 5.0);
        let (same_a, same_b) = pair_trees(&[3.0, -1.0], &[3.0, -1.0]);
        assert_eq!(gwc_loss(&same_a, &same_b, false).unwrap().item(), 0.0);
    }

    #[test]
    fn gwc_value_is_symmetric() {
        let (a, b) = pair_trees(&[1.0, -2.0, 0.5], &[0.3, 0.9, -1.1]);
        let ab = gwc_loss(&a, &b, false).unwrap().item();
        let ba = gwc_loss(&b, &a, false).unwrap().item();
        assert_eq!(ab, ba);
    }

    #[test]
    fn gwc_incongruent_is_shape_error() {
        let (a, _) = pair_trees(&[1.0], &[0.0]);
        let (b, _) = pair_trees(&[1.0, 2.0], &[0.0, 0.0]);
        assert!(matches!(gwc_loss(&a, &b, false), Err(Error::Shape(_))));
    }

    #[test]
    fn gwc_gradient_matches_closed_form() {
        // d/dw mean((w - a)^2) = 2 (w - a) / n.
        let (local, anchor) = pair_trees(&[1.0, 4.0], &[0.0, 2.0]);
        let loss = gwc_loss(&local, &anchor, false).unwrap();
        loss.backward().unwrap();
        let g = local.get("w").unwrap().grad().unwrap();
        assert!((g[0] - 1.0).abs() < 1e-13);
        assert!((g[1] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn gwc_no_gradient_into_anchor() {
        let (local, _) = pair_trees(&[1.0], &[0.0]);
        let anchor_t = Tensor::from_vec(&[1], vec![0.5]).unwrap();
        anchor_t.set_requires_grad(true);
        let mut anchor = ParamTree::new();
        anchor.insert("w", anchor_t.clone()).unwrap();
        let loss = gwc_loss(&local, &anchor, false).unwrap();
        loss.backward().unwrap();
        assert!(local.get("w").unwrap().has_grad());
        assert!(!anchor_t.has_grad());
    }

    #[test]
    fn gwc_step_pulls_toward_anchor() {
        let (local, anchor) = pair_trees(&[1.0, -2.0, 0.4], &[0.2, 0.5, -0.3]);
        let dist_before = gwc_loss(&local, &anchor, false).unwrap().item();
        let loss = gwc_loss(&local, &anchor, false).unwrap();
        loss.backward().unwrap();
        let w = local.get("w").unwrap();
        let g = w.grad().unwrap();
        {
            let mut data = w.data_mut();
            for (v, gi) in data.iter_mut().zip(&g) {
                *v -= 1e-3 * gi;
            }
        }
        w.zero_grad();
        let dist_after = gwc_loss(&local, &anchor, false).unwrap().item();
        assert!(dist_after < dist_before);
    }

    #[test]
    fn fedprox_hand_values() {
        let (a, b) = pair_trees(&[1.0], &[0.0]);
        assert_eq!(fedprox_term(&a, &b, 2.0).unwrap().item(), 1.0);
        assert_eq!(fedprox_term(&a, &b, 0.0).unwrap().item(), 0.0);
        let (s1, s2) = pair_trees(&[4.0, 4.0], &[4.0, 4.0]);
        assert_eq!(fedprox_term(&s1, &s2, 5.0).unwrap().item(), 0.0);
    }

    fn toy_batch() -> Vec<(Tensor<f64>, Tensor<f64>, CountLevel)> {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 1.0).unwrap();
        let y = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 1.2).unwrap();
        vec![(x, y, d(0.1))]
    }

    #[test]
    fn warmup_epochs_bypass_the_penalty_entirely() {
        let model = tiny_model(5);
        let anchor = ParamTree::from_snapshot(
            &model.params.subset(|n| n.starts_with("denoiser.")).snapshot(),
        )
        .unwrap();
        let weights = LossWeights::default();
        for q in [1, 2] {
            let plain = recon_loss(&model, &toy_batch()).unwrap().item();
            let combined = combined_loss(&model, &toy_batch(), Some(&anchor), &weights, q)
                .unwrap()
                .item();
            assert_eq!(plain.to_bits(), combined.to_bits(), "epoch {q}");
        }
    }

    #[test]
    fn warmup_gradients_are_bit_identical() {
        let model = tiny_model(6);
        let anchor = ParamTree::from_snapshot(
            &model.params.subset(|n| n.starts_with("denoiser.")).snapshot(),
        )
        .unwrap();
        // Shift the anchor so a live penalty would change gradients.
        for (_, t) in anchor.iter() {
            for v in t.data_mut().iter_mut() {
                *v += 0.5;
            }
        }
        let trainable = model.trainable();

        trainable.zero_grads();
        recon_loss(&model, &toy_batch()).unwrap().backward().unwrap();
        let plain: Vec<(String, Vec<u64>)> = trainable
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    t.grad().unwrap().iter().map(|v| v.to_bits()).collect(),
                )
            })
            .collect();

        trainable.zero_grads();
        combined_loss(&model, &toy_batch(), Some(&anchor), &LossWeights::default(), 2)
            .unwrap()
            .backward()
            .unwrap();
        for (name, bits) in &plain {
            let got: Vec<u64> = trainable
                .tensor(name)
                .unwrap()
                .grad()
                .unwrap()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(&got, bits, "{name}");
        }
    }

    #[test]
    fn active_epoch_adds_exactly_lambda_gwc() {
        let model = tiny_model(7);
        let anchor = ParamTree::from_snapshot(
            &model.params.subset(|n| n.starts_with("denoiser.")).snapshot(),
        )
        .unwrap();
        for (_, t) in anchor.iter() {
            for v in t.data_mut().iter_mut() {
                *v += 0.1;
            }
        }
        let weights = LossWeights::default();
        let recon = recon_loss(&model, &toy_batch()).unwrap().item();
        let local = model.params.subset(|n| n.starts_with("denoiser."));
        let gwc = gwc_loss(&local, &anchor, false).unwrap().item();
        let combined = combined_loss(&model, &toy_batch(), Some(&anchor), &weights, 3)
            .unwrap()
            .item();
        let expect = recon + gwc * 0.001;
        assert_eq!(combined.to_bits(), expect.to_bits());
        assert!(gwc > 0.0);
    }

    #[test]
    fn active_epoch_without_anchor_rejected() {
        let model = tiny_model(8);
        assert!(matches!(
            combined_loss(&model, &toy_batch(), None, &LossWeights::default(), 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn anchor_equal_to_local_reduces_to_recon() {
        let model = tiny_model(9);
        let anchor = ParamTree::from_snapshot(
            &model.params.subset(|n| n.starts_with("denoiser.")).snapshot(),
        )
        .unwrap();
        let recon = recon_loss(&model, &toy_batch()).unwrap().item();
        let combined = combined_loss(&model, &toy_batch(), Some(&anchor), &LossWeights::default(), 3)
            .unwrap()
            .item();
        assert_eq!(recon.to_bits(), combined.to_bits());
    }
}
