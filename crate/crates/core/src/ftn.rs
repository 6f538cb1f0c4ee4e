//! Count-conditioned channel modulation layers.
//!
//! Each layer squeezes a feature map to per-channel means, mixes in a small
//! MLP embedding of the acquisition count level, and emits a per-channel
//! excitation vector that rescales the feature map. The layers hold their
//! own named parameters under the `ftn.` namespace; in federated training
//! they stay on the client.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::param_tree::ParamTree;
use crate::tensor::{Element, Tensor};

/// Fraction of full acquisition counts retained, in `(0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct CountLevel(f64);

impl CountLevel {
    pub fn new(d: f64) -> Result<Self> {
        if !(d > 0.0 && d <= 1.0) {
            return Err(Error::domain(format!(
                "count level must lie in (0, 1], got {d}"
            )));
        }
        Ok(CountLevel(d))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Parameters of one modulation layer for a `channels`-wide feature map.
///
/// `w_r` re-mixes the squeezed channel means, `w_1..w_3` embed the count
/// level through a two-hidden-layer MLP (widths `C/2` and `C`), and
/// `w_fuse` projects the fused vector to the final excitation.
pub struct FtnParams<T: Element> {
    pub w_r: Tensor<T>,
    pub w_1: Tensor<T>,
    pub w_2: Tensor<T>,
    pub w_3: Tensor<T>,
    pub w_fuse: Tensor<T>,
    channels: usize,
}

const FIELDS: [&str; 5] = ["w_r", "w_1", "w_2", "w_3", "w_fuse"];

impl<T: Element> FtnParams<T> {
    /// Shapes of the five weight tensors for a given channel count.
    fn shapes(channels: usize) -> [Vec<usize>; 5] {
        let c = channels;
        [
            vec![c, c],     // w_r
            vec![c / 2, 1], // w_1
            vec![c, c / 2], // w_2
            vec![c, c],     // w_3
            vec![c, c],     // w_fuse
        ]
    }

    /// Fresh parameters with uniform init scaled by fan-in; the excitation
    /// starts near zero so the surrounding network carries signal first.
    pub fn init(channels: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        if channels == 0 || channels % 2 != 0 {
            return Err(Error::config(format!(
                "modulation layer needs a positive even channel count, got {channels}"
            )));
        }
        let shapes = Self::shapes(channels);
        let mut tensors = Vec::with_capacity(5);
        for shape in &shapes {
            let fan_in: usize = shape[1..].iter().product();
            let bound = 1.0 / (fan_in as f64).sqrt();
            let n: usize = shape.iter().product();
            let data: Vec<T> = (0..n)
                .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                .collect();
            let t = Tensor::from_vec(shape, data)?;
            t.set_requires_grad(true);
            tensors.push(t);
        }
        let mut it = tensors.into_iter();
        Ok(FtnParams {
            w_r: it.next().unwrap(),
            w_1: it.next().unwrap(),
            w_2: it.next().unwrap(),
            w_3: it.next().unwrap(),
            w_fuse: it.next().unwrap(),
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn tensors(&self) -> [&Tensor<T>; 5] {
        [&self.w_r, &self.w_1, &self.w_2, &self.w_3, &self.w_fuse]
    }

    /// Registers the five tensors in `tree` as `{prefix}.w_r` etc.
    pub fn insert_into(&self, tree: &mut ParamTree<T>, prefix: &str) -> Result<()> {
        for (field, tensor) in FIELDS.iter().zip(self.tensors()) {
            tree.insert(format!("{prefix}.{field}"), tensor.clone())?;
        }
        Ok(())
    }

    /// Reconstructs a layer view from tensors registered under `prefix`.
    pub fn from_tree(tree: &ParamTree<T>, prefix: &str, channels: usize) -> Result<Self> {
        let shapes = Self::shapes(channels);
        let mut tensors = Vec::with_capacity(5);
        for (field, shape) in FIELDS.iter().zip(&shapes) {
            let name = format!("{prefix}.{field}");
            let t = tree.tensor(&name)?;
            if t.shape() != shape.as_slice() {
                return Err(Error::shape(format!(
                    "{name}: expected shape {:?}, found {:?}",
                    shape,
                    t.shape()
                )));
            }
            tensors.push(t.clone());
        }
        let mut it = tensors.into_iter();
        Ok(FtnParams {
            w_r: it.next().unwrap(),
            w_1: it.next().unwrap(),
            w_2: it.next().unwrap(),
            w_3: it.next().unwrap(),
            w_fuse: it.next().unwrap(),
            channels,
        })
    }
}

/// Per-channel excitation vector `[B, C]` for feature map `f` at count
/// level `d`.
///
/// Pipeline: `v = gap(f)`; `v_r = w_r v`; `v_d = w_3 relu(w_2 relu(w_1 d))`;
/// `fused = sigmoid(v_d) * v_r + v_d`; result `w_fuse fused`. The count
/// branch is independent of `f`; the squeeze branch is linear in `f`.
pub fn ftn_excitation<T: Element>(
    f: &Tensor<T>,
    d: CountLevel,
    params: &FtnParams<T>,
) -> Result<Tensor<T>> {
    let shape = f.shape();
    if shape.len() != 5 || shape[1] != params.channels {
        return Err(Error::shape(format!(
            "feature map shape {:?} does not match {}-channel modulation layer",
            shape, params.channels
        )));
    }
    let batch = shape[0];
    let v = f.gap()?;
    let v_r = v.fc(&params.w_r)?;
    let d_in = Tensor::from_vec(&[batch, 1], vec![T::from_f64(d.value()); batch])?;
    let h = d_in.fc(&params.w_1)?.relu()?;
    let h = h.fc(&params.w_2)?.relu()?;
    let v_d = h.fc(&params.w_3)?;
    let fused = v_d.sigmoid()?.mul(&v_r)?.add(&v_d)?;
    fused.fc(&params.w_fuse)
}

/// Rescales each channel of `f` by its excitation: `out[:, c] = f[:, c] *
/// excitation[:, c]`.
pub fn ftn_forward<T: Element>(
    f: &Tensor<T>,
    d: CountLevel,
    params: &FtnParams<T>,
) -> Result<Tensor<T>> {
    let v_hat = ftn_excitation(f, d, params)?;
    f.channel_scale(&v_hat)
}
