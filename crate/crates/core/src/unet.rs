//! Residual 3-D U-Net denoiser with a count-conditioned modulation layer
//! on every block output.
//!
//! Parameters live in one [`ParamTree`] under three namespaces:
//! `denoiser.*` for convolution and normalization weights, `norm_stats.*`
//! for running normalization statistics (not gradient-trained), and
//! `ftn.*` for the modulation layers. Federated strategies differ only in
//! which namespaces they share; [`DenoiserModel::partition`] encodes that
//! split.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ftn::{ftn_forward, CountLevel, FtnParams};
use crate::param_tree::ParamTree;
use crate::tensor::{Element, Tensor};

const NORM_EPS: f64 = 1e-5;
const NORM_MOMENTUM: f64 = 0.1;

/// Architecture knobs. Channel width doubles per level.
#[derive(Debug, Clone, PartialEq)]
pub struct UNetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub kernel: usize,
    pub conv_per_block: usize,
    pub use_norm: bool,
    pub residual_output: bool,
}

impl Default for UNetConfig {
    fn default() -> Self {
        UNetConfig {
            levels: 3,
            base_channels: 16,
            kernel: 3,
            conv_per_block: 2,
            use_norm: true,
            residual_output: true,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 2 {
            return Err(Error::config(format!(
                "unet needs at least 2 levels, got {}",
                self.levels
            )));
        }
        if self.base_channels == 0 || self.base_channels % 2 != 0 {
            return Err(Error::config(format!(
                "base_channels must be positive and even, got {}",
                self.base_channels
            )));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if self.conv_per_block == 0 {
            return Err(Error::config("conv_per_block must be at least 1"));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this (repeated 2x pooling).
    pub fn spatial_divisor(&self) -> usize {
        1 << (self.levels - 1)
    }

    fn channels_at(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

/// One encoder/decoder/bottleneck block: its namespace suffix and channel
/// counts.
#[derive(Debug, Clone)]
struct BlockDesc {
    name: String,
    in_channels: usize,
    out_channels: usize,
}

fn block_plan(config: &UNetConfig) -> Vec<BlockDesc> {
    let l = config.levels;
    let mut blocks = Vec::with_capacity(2 * l - 1);
    for i in 0..l - 1 {
        blocks.push(BlockDesc {
            name: format!("enc{i}"),
            in_channels: if i == 0 { 1 } else { config.channels_at(i - 1) },
            out_channels: config.channels_at(i),
        });
    }
    blocks.push(BlockDesc {
        name: "bottleneck".into(),
        in_channels: config.channels_at(l - 2),
        out_channels: config.channels_at(l - 1),
    });
    for i in (0..l - 1).rev() {
        blocks.push(BlockDesc {
            name: format!("dec{i}"),
            in_channels: config.channels_at(i + 1) + config.channels_at(i),
            out_channels: config.channels_at(i),
        });
    }
    blocks
}

/// Federated sharing strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StrategyId {
    FedFtn,
    FedAvg,
    FedProx,
    FedBn,
    FedSp,
    LocalOnly,
}

impl StrategyId {
    pub const ALL: [StrategyId; 6] = [
        StrategyId::FedFtn,
        StrategyId::FedAvg,
        StrategyId::FedProx,
        StrategyId::FedBn,
        StrategyId::FedSp,
        StrategyId::LocalOnly,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fedftn" => Ok(StrategyId::FedFtn),
            "fedavg" => Ok(StrategyId::FedAvg),
            "fedprox" => Ok(StrategyId::FedProx),
            "fedbn" => Ok(StrategyId::FedBn),
            "fedsp" => Ok(StrategyId::FedSp),
            "local_only" => Ok(StrategyId::LocalOnly),
            other => Err(Error::config(format!(
                "unknown strategy {other:?}; expected one of \
                 fedftn, fedavg, fedprox, fedbn, fedsp, local_only"
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StrategyId::FedFtn => "fedftn",
            StrategyId::FedAvg => "fedavg",
            StrategyId::FedProx => "fedprox",
            StrategyId::FedBn => "fedbn",
            StrategyId::FedSp => "fedsp",
            StrategyId::LocalOnly => "local_only",
        }
    }

    /// Whether a parameter name belongs to the strategy's shared partition.
    pub fn is_shared(self, name: &str) -> bool {
        match self {
            StrategyId::FedFtn => {
                name.starts_with("denoiser.") || name.starts_with("norm_stats.")
            }
            StrategyId::FedAvg | StrategyId::FedProx => true,
            StrategyId::FedBn => {
                !(name.contains(".norm.") || name.starts_with("norm_stats."))
            }
            StrategyId::FedSp => {
                name.starts_with("denoiser.enc")
                    || name.starts_with("denoiser.bottleneck")
                    || name.starts_with("norm_stats.enc")
                    || name.starts_with("norm_stats.bottleneck")
            }
            StrategyId::LocalOnly => false,
        }
    }
}

/// The denoiser: configuration plus its full parameter tree.
pub struct DenoiserModel<T: Element> {
    pub config: UNetConfig,
    pub params: ParamTree<T>,
    blocks: Vec<BlockDesc>,
}

impl<T: Element> DenoiserModel<T> {
    /// Builds a freshly initialized model. Convolution weights and biases
    /// draw from uniform(±1/sqrt(fan_in)); the output convolution starts
    /// at zero so the initial forward pass is the identity.
    pub fn init(config: UNetConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let blocks = block_plan(&config);
        let mut params = ParamTree::new();
        let k = config.kernel;

        for block in &blocks {
            for j in 0..config.conv_per_block {
                let c_in = if j == 0 {
                    block.in_channels
                } else {
                    block.out_channels
                };
                let c_out = block.out_channels;
                let fan_in = c_in * k * k * k;
                let bound = 1.0 / (fan_in as f64).sqrt();
                let w_data: Vec<T> = (0..c_out * fan_in)
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect();
                let w = Tensor::from_vec(&[c_out, c_in, k, k, k], w_data)?;
                w.set_requires_grad(true);
                let b_data: Vec<T> = (0..c_out)
                    .map(|_| T::from_f64(rng.random_range(-bound..bound)))
                    .collect();
                let b = Tensor::from_vec(&[c_out], b_data)?;
                b.set_requires_grad(true);
                let prefix = format!("denoiser.{}.conv{}", block.name, j);
                params.insert(format!("{prefix}.w"), w)?;
                params.insert(format!("{prefix}.b"), b)?;
                if config.use_norm {
                    let gamma = Tensor::full(&[c_out], T::ONE)?;
                    gamma.set_requires_grad(true);
                    let beta = Tensor::zeros(&[c_out])?;
                    beta.set_requires_grad(true);
                    params.insert(format!("{prefix}.norm.gamma"), gamma)?;
                    params.insert(format!("{prefix}.norm.beta"), beta)?;
                    let stats = format!("norm_stats.{}.conv{}", block.name, j);
                    params.insert(format!("{stats}.mean"), Tensor::zeros(&[c_out])?)?;
                    params.insert(format!("{stats}.var"), Tensor::full(&[c_out], T::ONE)?)?;
                }
            }
            let ftn = FtnParams::<T>::init(block.out_channels, rng)?;
            ftn.insert_into(&mut params, &format!("ftn.{}", block.name))?;
        }

        let c0 = config.base_channels;
        let out_w = Tensor::zeros(&[1, c0, 1, 1, 1])?;
        out_w.set_requires_grad(true);
        let out_b = Tensor::zeros(&[1])?;
        out_b.set_requires_grad(true);
        params.insert("denoiser.out.conv.w", out_w)?;
        params.insert("denoiser.out.conv.b", out_b)?;

        Ok(DenoiserModel {
            config,
            params,
            blocks,
        })
    }

    /// Namespace suffixes of all convolution blocks, encoder to decoder.
    pub fn block_names(&self) -> Vec<&str> {
        self.blocks.iter().map(|b| b.name.as_str()).collect()
    }

    /// Denoised estimate for `x` (`[B, 1, H, W, D]`) at count level `d`.
    ///
    /// `train` controls only whether running normalization statistics are
    /// updated; normalization itself always uses the statistics of the
    /// current input.
    pub fn forward(&self, x: &Tensor<T>, d: CountLevel, train: bool) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() != 5 || shape[1] != 1 {
            return Err(Error::shape(format!(
                "denoiser input must be [batch, 1, h, w, d], got {shape:?}"
            )));
        }
        let div = self.config.spatial_divisor();
        if shape[2..].iter().any(|&e| e % div != 0) {
            return Err(Error::shape(format!(
                "spatial extents {:?} must be divisible by {div}",
                &shape[2..]
            )));
        }

        let l = self.config.levels;
        let mut skips: Vec<Tensor<T>> = Vec::with_capacity(l - 1);
        let mut f = x.clone();
        for i in 0..l - 1 {
            let e = self.block_forward(&self.blocks[i], &f, d, train)?;
            f = e.downsample_avg_2x()?;
            skips.push(e);
        }
        f = self.block_forward(&self.blocks[l - 1], &f, d, train)?;
        for i in (0..l - 1).rev() {
            let dec = &self.blocks[2 * l - 2 - i];
            let up = f.upsample_nearest_2x()?;
            let cat = up.concat_channels(&skips[i])?;
            f = self.block_forward(dec, &cat, d, train)?;
        }

        let out_w = self.params.tensor("denoiser.out.conv.w")?;
        let out_b = self.params.tensor("denoiser.out.conv.b")?;
        let residual = f.conv3d(out_w, 1, 0)?.channel_bias(out_b)?;
        if self.config.residual_output {
            x.add(&residual)
        } else {
            Ok(residual)
        }
    }

    fn block_forward(
        &self,
        block: &BlockDesc,
        input: &Tensor<T>,
        d: CountLevel,
        train: bool,
    ) -> Result<Tensor<T>> {
        let pad = (self.config.kernel - 1) / 2;
        let mut f = input.clone();
        for j in 0..self.config.conv_per_block {
            let prefix = format!("denoiser.{}.conv{}", block.name, j);
            let w = self.params.tensor(&format!("{prefix}.w"))?;
            let b = self.params.tensor(&format!("{prefix}.b"))?;
            f = f.conv3d(w, 1, pad)?.channel_bias(b)?;
            if self.config.use_norm {
                let gamma = self.params.tensor(&format!("{prefix}.norm.gamma"))?;
                let beta = self.params.tensor(&format!("{prefix}.norm.beta"))?;
                let (normed, mean, var) = f.instance_norm(gamma, beta, T::from_f64(NORM_EPS))?;
                if train {
                    self.update_norm_stats(&block.name, j, block.out_channels, &mean, &var)?;
                }
                f = normed;
            }
            f = f.relu()?;
        }
        let ftn = FtnParams::from_tree(
            &self.params,
            &format!("ftn.{}", block.name),
            block.out_channels,
        )?;
        ftn_forward(&f, d, &ftn)
    }

    fn update_norm_stats(
        &self,
        block: &str,
        conv: usize,
        channels: usize,
        mean: &[T],
        var: &[T],
    ) -> Result<()> {
        let prefix = format!("norm_stats.{block}.conv{conv}");
        let mean_t = self.params.tensor(&format!("{prefix}.mean"))?;
        let var_t = self.params.tensor(&format!("{prefix}.var"))?;
        let batch = mean.len() / channels;
        let inv_b = T::from_f64(1.0 / batch as f64);
        let m = T::from_f64(NORM_MOMENTUM);
        let keep = T::ONE - m;
        let mut mt = mean_t.data_mut();
        let mut vt = var_t.data_mut();
        for c in 0..channels {
            let mut bm = T::ZERO;
            let mut bv = T::ZERO;
            for bi in 0..batch {
                bm += mean[bi * channels + c];
                bv += var[bi * channels + c];
            }
            mt[c] = keep * mt[c] + m * bm * inv_b;
            vt[c] = keep * vt[c] + m * bv * inv_b;
        }
        Ok(())
    }

    /// Splits the parameter tree into (shared, local) for a strategy.
    /// The two trees are disjoint and cover every parameter.
    pub fn partition(&self, strategy: StrategyId) -> (ParamTree<T>, ParamTree<T>) {
        let shared = self.params.subset(|n| strategy.is_shared(n));
        let local = self.params.subset(|n| !strategy.is_shared(n));
        (shared, local)
    }

    /// Gradient-trained parameters: everything except running statistics.
    pub fn trainable(&self) -> ParamTree<T> {
        self.params.subset(|n| !n.starts_with("norm_stats."))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny_config() -> UNetConfig {
        UNetConfig {
            levels: 2,
            base_channels: 4,
            ..UNetConfig::default()
        }
    }

    fn tiny_model(seed: u64) -> DenoiserModel<f64> {
        let mut r = rng::stream(seed, "model", &[]);
        DenoiserModel::init(tiny_config(), &mut r).unwrap()
    }

    fn d(v: f64) -> CountLevel {
        CountLevel::new(v).unwrap()
    }

    #[test]
    fn config_validation() {
        assert!(UNetConfig::default().validate().is_ok());
        assert!(UNetConfig {
            levels: 1,
            ..UNetConfig::default()
        }
        .validate()
        .is_err());
        assert!(UNetConfig {
            base_channels: 6,
            ..UNetConfig::default()
        }
        .validate()
        .is_ok());
        assert!(UNetConfig {
            base_channels: 5,
            ..UNetConfig::default()
        }
        .validate()
        .is_err());
        assert!(UNetConfig {
            kernel: 4,
            ..UNetConfig::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn block_count_matches_levels() {
        let model = tiny_model(1);
        assert_eq!(model.block_names(), vec!["enc0", "bottleneck", "dec0"]);
        let mut r = rng::stream(1, "model", &[]);
        let deep = DenoiserModel::<f64>::init(
            UNetConfig {
                levels: 3,
                base_channels: 4,
                ..UNetConfig::default()
            },
            &mut r,
        )
        .unwrap();
        assert_eq!(deep.block_names().len(), 5);
        assert_eq!(
            deep.block_names(),
            vec!["enc0", "enc1", "bottleneck", "dec1", "dec0"]
        );
    }

    #[test]
    fn every_name_is_in_exactly_one_namespace() {
        let model = tiny_model(2);
        for name in model.params.names() {
            let hits = ["denoiser.", "norm_stats.", "ftn."]
                .iter()
                .filter(|p| name.starts_with(*p))
                .count();
            assert_eq!(hits, 1, "name {name} matches {hits} namespaces");
        }
    }

    #[test]
    fn one_modulation_layer_per_block() {
        let model = tiny_model(3);
        let ftn_entries = model.params.subset(|n| n.starts_with("ftn."));
        assert_eq!(ftn_entries.len(), 5 * model.block_names().len());
    }

    #[test]
    fn forward_shape_and_determinism() {
        let model = tiny_model(4);
        let mut r = rng::stream(9, "input", &[]);
        let data: Vec<f64> = (0..512).map(|_| r.random_range(0.0..2.0)).collect();
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], data).unwrap();
        let a = model.forward(&x, d(0.05), false).unwrap();
        let b = model.forward(&x, d(0.05), false).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(*a.data(), *b.data());
    }

    #[test]
    fn indivisible_input_rejected() {
        let model = tiny_model(5);
        let x = Tensor::<f64>::full(&[1, 1, 6, 8, 8], 1.0).unwrap();
        // levels=2 needs divisibility by 2; 6 is fine, so use an odd extent.
        assert!(model.forward(&x, d(0.1), false).is_ok());
        let x = Tensor::<f64>::full(&[1, 1, 7, 8, 8], 1.0).unwrap();
        assert!(matches!(
            model.forward(&x, d(0.1), false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_params_give_identity() {
        let model = tiny_model(6);
        for (_, t) in model.params.iter() {
            let mut buf = t.data_mut();
            for v in buf.iter_mut() {
                *v = 0.0;
            }
        }
        let data: Vec<f64> = (0..512).map(|i| (i % 13) as f64 * 0.1).collect();
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], data.clone()).unwrap();
        let y = model.forward(&x, d(0.2), false).unwrap();
        assert_eq!(*y.data(), data);
    }

    #[test]
    fn fresh_model_starts_as_identity() {
        // Zero-initialized output convolution makes the residual zero.
        let model = tiny_model(7);
        let data: Vec<f64> = (0..512).map(|i| (i % 7) as f64).collect();
        let x = Tensor::from_vec(&[1, 1, 8, 8, 8], data.clone()).unwrap();
        let y = model.forward(&x, d(0.1), false).unwrap();
        assert_eq!(*y.data(), data);
    }

    #[test]
    fn train_mode_updates_running_stats() {
        let model = tiny_model(8);
        let x = Tensor::<f64>::full(&[1, 1, 8, 8, 8], 1.0).unwrap();
        let before = model
            .params
            .tensor("norm_stats.enc0.conv0.mean")
            .unwrap()
            .data()
            .clone();
        model.forward(&x, d(0.1), false).unwrap();
        let after_eval = model
            .params
            .tensor("norm_stats.enc0.conv0.mean")
            .unwrap()
            .data()
            .clone();
        assert_eq!(before, after_eval);
        model.forward(&x, d(0.1), true).unwrap();
        let after_train = model
            .params
            .tensor("norm_stats.enc0.conv0.mean")
            .unwrap()
            .data()
            .clone();
        assert_ne!(before, after_train);
    }

    #[test]
    fn strategy_parsing_roundtrip() {
        for s in StrategyId::ALL {
            assert_eq!(StrategyId::parse(s.as_str()).unwrap(), s);
        }
        assert!(matches!(
            StrategyId::parse("fedmystery"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn partition_law_holds_for_every_strategy() {
        let model = tiny_model(10);
        let all: Vec<String> = model.params.names().iter().map(|s| s.to_string()).collect();
        for strategy in StrategyId::ALL {
            let (shared, local) = model.partition(strategy);
            assert_eq!(shared.len() + local.len(), all.len(), "{strategy:?}");
            for name in &all {
                let in_shared = shared.get(name).is_some();
                let in_local = local.get(name).is_some();
                assert!(in_shared ^ in_local, "{strategy:?}: {name}");
            }
        }
    }

    #[test]
    fn partition_contents_per_strategy() {
        let model = tiny_model(11);
        let (shared, local) = model.partition(StrategyId::FedFtn);
        assert!(local.names().iter().all(|n| n.starts_with("ftn.")));
        assert!(shared.names().iter().all(|n| !n.starts_with("ftn.")));

        let (shared, _) = model.partition(StrategyId::FedAvg);
        assert_eq!(shared.len(), model.params.len());

        let (shared, local) = model.partition(StrategyId::FedBn);
        // Name-set oracle: local is exactly the norm affine + stats names.
        let expect: Vec<&str> = model
            .params
            .names()
            .into_iter()
            .filter(|n| n.contains(".norm.") || n.starts_with("norm_stats."))
            .collect();
        assert_eq!(local.names(), expect);
        assert!(shared.names().iter().all(|n| !n.contains(".norm.")));

        let (shared, local) = model.partition(StrategyId::FedSp);
        assert!(shared
            .names()
            .iter()
            .all(|n| n.contains(".enc") || n.contains(".bottleneck")));
        assert!(local.get("denoiser.out.conv.w").is_some());
        assert!(local.names().iter().any(|n| n.starts_with("ftn.")));

        let (shared, local) = model.partition(StrategyId::LocalOnly);
        assert!(shared.is_empty());
        assert_eq!(local.len(), model.params.len());
    }

    #[test]
    fn init_is_deterministic() {
        let a = tiny_model(12);
        let b = tiny_model(12);
        for ((na, ta), (nb, tb)) in a.params.iter().zip(b.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(*ta.data(), *tb.data(), "{na}");
        }
    }

    #[test]
    fn trainable_excludes_running_stats() {
        let model = tiny_model(13);
        let t = model.trainable();
        assert!(t.names().iter().all(|n| !n.starts_with("norm_stats.")));
        assert!(t.names().iter().any(|n| n.starts_with("denoiser.")));
        assert!(t.names().iter().any(|n| n.starts_with("ftn.")));
    }
}
