//! Experiment configuration: a TOML file that captures everything a run
//! depends on — strategy, network shape, optimisation hyperparameters,
//! synthetic site definitions, and transport.
//!
//! Unknown keys are hard errors so a typo cannot silently fall back to a
//! default. `parse` and `render` round-trip: rendering a resolved config
//! and parsing it back yields an equal value, and the rendered bytes are
//! deterministic, which is what makes frozen per-run config copies
//! meaningful.

use std::path::Path;

use fedftn_core::federation::{RunConfig, TrainSettings, TransportKind};
use fedftn_core::ftn::CountLevel;
use fedftn_core::optim::LossWeights;
use fedftn_core::phantom::SiteProfile;
use fedftn_core::unet::{StrategyId, UNetConfig};
use fedftn_core::{Error, Result};
use serde::{Deserialize, Serialize};

/// Numeric precision the experiment runs at. The wire format is `f32`
/// either way; this selects the in-memory element type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!(
                "precision must be \"f32\" or \"f64\", got \"{other}\""
            ))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        }
    }
}

/// Transport selection as written in a config file or on the command
/// line: `inproc` or `socket:HOST:PORT`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Transport {
    #[default]
    Inproc,
    Socket(String),
}

impl Transport {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "inproc" {
            return Ok(Transport::Inproc);
        }
        if let Some(addr) = s.strip_prefix("socket:") {
            if addr.split(':').count() != 2 || addr.ends_with(':') || addr.starts_with(':') {
                return Err(Error::config(format!(
                    "socket transport must be \"socket:HOST:PORT\", got \"{s}\""
                )));
            }
            return Ok(Transport::Socket(addr.to_string()));
        }
        Err(Error::config(format!(
            "transport must be \"inproc\" or \"socket:HOST:PORT\", got \"{s}\""
        )))
    }

    pub fn render(&self) -> String {
        match self {
            Transport::Inproc => "inproc".to_string(),
            Transport::Socket(addr) => format!("socket:{addr}"),
        }
    }

    pub fn to_core(&self) -> TransportKind {
        match self {
            Transport::Inproc => TransportKind::InProcess,
            Transport::Socket(addr) => TransportKind::Socket(addr.clone()),
        }
    }
}

mod strategy_str {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &StrategyId, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(v.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<StrategyId, D::Error> {
        let raw = String::deserialize(d)?;
        StrategyId::parse(&raw).map_err(serde::de::Error::custom)
    }
}

mod precision_str {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Precision, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(v.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Precision, D::Error> {
        let raw = String::deserialize(d)?;
        Precision::parse(&raw).map_err(serde::de::Error::custom)
    }
}

mod transport_str {
    use super::*;
    use serde::{Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &Transport, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&v.render())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(
        d: D,
    ) -> std::result::Result<Transport, D::Error> {
        let raw = String::deserialize(d)?;
        Transport::parse(&raw).map_err(serde::de::Error::custom)
    }
}

fn default_lr() -> f64 {
    1e-4
}
fn default_batch_size() -> usize {
    3
}
fn default_lambda_gwc() -> f64 {
    0.001
}
fn default_mu_fedprox() -> f64 {
    0.01
}
fn default_true() -> bool {
    true
}

/// `[experiment]`: identity, strategy, and optimisation knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    /// Names the run directory and tags every CSV row.
    pub run_id: String,
    /// Master seed for model initialisation, batching, and augmentation.
    pub seed: u64,
    #[serde(with = "strategy_str")]
    pub strategy: StrategyId,
    /// Number of communication rounds (server aggregations).
    pub global_epochs: usize,
    /// Full local passes between aggregations.
    pub local_epochs: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_lambda_gwc")]
    pub lambda_gwc: f64,
    #[serde(default = "default_mu_fedprox")]
    pub mu_fedprox: f64,
    #[serde(default)]
    pub gwc_raw_sum: bool,
    #[serde(default, with = "precision_str")]
    pub precision: Precision,
    #[serde(default, with = "transport_str")]
    pub transport: Transport,
    pub output_dir: String,
    /// Training-time cubic crop edge; omit to train on whole volumes.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crop: Option<usize>,
    #[serde(default = "default_true")]
    pub flip_augment: bool,
    /// Emit metric rows every this many rounds (0 = final round only).
    #[serde(default)]
    pub metrics_every: usize,
    #[serde(default)]
    pub adam_reset_per_round: bool,
}

/// `[unet]`: denoiser architecture. Defaults match [`UNetConfig::default`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetSection {
    #[serde(default = "d_levels")]
    pub levels: usize,
    #[serde(default = "d_base_channels")]
    pub base_channels: usize,
    #[serde(default = "d_kernel")]
    pub kernel: usize,
    #[serde(default = "d_conv_per_block")]
    pub conv_per_block: usize,
    #[serde(default = "default_true")]
    pub use_norm: bool,
    #[serde(default = "default_true")]
    pub residual_output: bool,
}

fn d_levels() -> usize {
    UNetConfig::default().levels
}
fn d_base_channels() -> usize {
    UNetConfig::default().base_channels
}
fn d_kernel() -> usize {
    UNetConfig::default().kernel
}
fn d_conv_per_block() -> usize {
    UNetConfig::default().conv_per_block
}

impl Default for UnetSection {
    fn default() -> Self {
        let c = UNetConfig::default();
        UnetSection {
            levels: c.levels,
            base_channels: c.base_channels,
            kernel: c.kernel,
            conv_per_block: c.conv_per_block,
            use_norm: c.use_norm,
            residual_output: c.residual_output,
        }
    }
}

impl UnetSection {
    pub fn to_core(&self) -> UNetConfig {
        UNetConfig {
            levels: self.levels,
            base_channels: self.base_channels,
            kernel: self.kernel,
            conv_per_block: self.conv_per_block,
            use_norm: self.use_norm,
            residual_output: self.residual_output,
        }
    }
}

/// `[data]`: synthetic dataset geometry shared by all sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    /// Seed the phantoms and noise draws derive from. Runs must share this
    /// (and the site definitions) to be comparable. Defaults to the
    /// experiment seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub volume_size: [usize; 3],
    pub subjects_per_site: usize,
    /// `[train, val, test]` subject counts; must sum to `subjects_per_site`.
    pub split: [usize; 3],
}

/// `[[site]]`: one synthetic acquisition site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteSection {
    pub site_id: u32,
    pub count_levels: Vec<f64>,
    pub blur_fwhm_voxels: f64,
    pub noise_gain: f64,
    pub intensity_scale: f64,
    #[serde(default = "d_anisotropy")]
    pub voxel_anisotropy: [f64; 3],
}

fn d_anisotropy() -> [f64; 3] {
    [1.0, 1.0, 1.0]
}

/// A full experiment description: what `fedftn train` consumes and what a
/// run directory freezes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub unet: UnetSection,
    pub data: DataSection,
    #[serde(rename = "site")]
    pub sites: Vec<SiteSection>,
}

/// Command-line overrides applied on top of a parsed config file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<String>,
    pub transport: Option<Transport>,
    pub precision: Option<Precision>,
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let config: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("config: cannot read {}: {e}", path.display()))
        })?;
        Self::parse(&text)
    }

    /// Renders the config back to TOML. Deterministic: equal configs
    /// produce identical bytes.
    pub fn render(&self) -> String {
        toml::to_string_pretty(self).expect("experiment config serializes")
    }

    /// Applies command-line overrides and pins the dataset seed, returning
    /// a config whose rendered form captures the run completely.
    pub fn resolve(mut self, overrides: &Overrides) -> Self {
        if let Some(seed) = overrides.seed {
            self.experiment.seed = seed;
        }
        if let Some(dir) = &overrides.output_dir {
            self.experiment.output_dir = dir.clone();
        }
        if let Some(transport) = &overrides.transport {
            self.experiment.transport = transport.clone();
        }
        if let Some(precision) = overrides.precision {
            self.experiment.precision = precision;
        }
        if self.data.seed.is_none() {
            self.data.seed = Some(self.experiment.seed);
        }
        self
    }

    pub fn data_seed(&self) -> u64 {
        self.data.seed.unwrap_or(self.experiment.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if e.run_id.is_empty() {
            return Err(Error::config("experiment.run_id: must not be empty"));
        }
        if !e
            .run_id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'))
        {
            return Err(Error::config(format!(
                "experiment.run_id: \"{}\" may only contain ASCII letters, digits, '-', '_', '.'",
                e.run_id
            )));
        }
        if e.global_epochs == 0 {
            return Err(Error::config("experiment.global_epochs: must be at least 1"));
        }
        if !(e.lr.is_finite() && e.lr > 0.0) {
            return Err(Error::config(format!(
                "experiment.lr: must be positive and finite, got {}",
                e.lr
            )));
        }
        if e.batch_size == 0 {
            return Err(Error::config("experiment.batch_size: must be at least 1"));
        }
        if !(e.lambda_gwc.is_finite() && e.lambda_gwc >= 0.0) {
            return Err(Error::config(format!(
                "experiment.lambda_gwc: must be non-negative, got {}",
                e.lambda_gwc
            )));
        }
        if !(e.mu_fedprox.is_finite() && e.mu_fedprox >= 0.0) {
            return Err(Error::config(format!(
                "experiment.mu_fedprox: must be non-negative, got {}",
                e.mu_fedprox
            )));
        }
        if e.output_dir.is_empty() {
            return Err(Error::config("experiment.output_dir: must not be empty"));
        }

        let unet = self.unet.to_core();
        unet.validate()
            .map_err(|err| Error::config(format!("unet: {err}")))?;
        let divisor = unet.spatial_divisor();
        for (axis, &extent) in self.data.volume_size.iter().enumerate() {
            if extent < 16 {
                return Err(Error::config(format!(
                    "data.volume_size[{axis}]: {extent} is below the phantom minimum of 16"
                )));
            }
            if extent % divisor != 0 {
                return Err(Error::config(format!(
                    "data.volume_size[{axis}]: {extent} is not divisible by the network's \
                     spatial divisor {divisor}"
                )));
            }
        }
        let [tr, va, te] = self.data.split;
        if tr + va + te != self.data.subjects_per_site {
            return Err(Error::config(format!(
                "data.split: {:?} must sum to subjects_per_site = {}",
                self.data.split, self.data.subjects_per_site
            )));
        }
        if tr == 0 {
            return Err(Error::config(
                "data.split: the train share must be at least 1 subject",
            ));
        }
        if let Some(crop) = e.crop {
            if crop % divisor != 0 {
                return Err(Error::config(format!(
                    "experiment.crop: {crop} is not divisible by the network's spatial \
                     divisor {divisor}"
                )));
            }
            if self.data.volume_size.iter().any(|&ext| crop > ext) {
                return Err(Error::config(format!(
                    "experiment.crop: {crop} exceeds volume size {:?}",
                    self.data.volume_size
                )));
            }
        }

        if self.sites.is_empty() {
            return Err(Error::config("site: at least one [[site]] is required"));
        }
        let mut seen = std::collections::BTreeSet::new();
        for site in &self.sites {
            if !seen.insert(site.site_id) {
                return Err(Error::config(format!(
                    "site: duplicate site_id {}",
                    site.site_id
                )));
            }
            self.site_profile(site)?.validate().map_err(|err| {
                Error::config(format!("site {}: {err}", site.site_id))
            })?;
        }
        Ok(())
    }

    fn site_profile(&self, site: &SiteSection) -> Result<SiteProfile> {
        let count_levels = site
            .count_levels
            .iter()
            .map(|&d| {
                CountLevel::new(d).map_err(|err| {
                    Error::config(format!("site {}: count_levels: {err}", site.site_id))
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(SiteProfile {
            site_id: site.site_id,
            count_levels,
            blur_fwhm_voxels: site.blur_fwhm_voxels,
            noise_gain: site.noise_gain,
            intensity_scale: site.intensity_scale,
            voxel_anisotropy: site.voxel_anisotropy,
            seed: self.data_seed(),
        })
    }

    /// The site profiles this config describes, seeded with the dataset
    /// seed.
    pub fn site_profiles(&self) -> Result<Vec<SiteProfile>> {
        self.sites.iter().map(|s| self.site_profile(s)).collect()
    }

    pub fn profile_for(&self, site_id: u32) -> Result<SiteProfile> {
        let site = self
            .sites
            .iter()
            .find(|s| s.site_id == site_id)
            .ok_or_else(|| {
                Error::config(format!("site: no [[site]] with site_id {site_id}"))
            })?;
        self.site_profile(site)
    }

    /// The orchestration config equivalent of this experiment.
    pub fn run_config(&self) -> RunConfig {
        let e = &self.experiment;
        RunConfig {
            strategy: e.strategy,
            unet: self.unet.to_core(),
            global_epochs: e.global_epochs,
            local_epochs: e.local_epochs,
            lr: e.lr,
            adam_reset_per_round: e.adam_reset_per_round,
            metrics_every: e.metrics_every,
            train: self.train_settings(),
        }
    }

    pub fn train_settings(&self) -> TrainSettings {
        let e = &self.experiment;
        TrainSettings {
            batch_size: e.batch_size,
            crop: e.crop,
            flip_augment: e.flip_augment,
            weights: LossWeights {
                lambda_gwc: e.lambda_gwc,
                mu_fedprox: e.mu_fedprox,
                gwc_raw_sum: e.gwc_raw_sum,
            },
            seed: e.seed,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_toml() -> &'static str {
        r#"
[experiment]
run_id = "pilot-fedftn"
seed = 2024
strategy = "fedftn"
global_epochs = 4
local_epochs = 2
output_dir = "runs"
crop = 8

[unet]
levels = 2
base_channels = 4

[data]
volume_size = [16, 16, 16]
subjects_per_site = 3
split = [2, 0, 1]

[[site]]
site_id = 1
count_levels = [0.05, 0.1]
blur_fwhm_voxels = 2.0
noise_gain = 0.5
intensity_scale = 1.0

[[site]]
site_id = 2
count_levels = [0.02, 0.05]
blur_fwhm_voxels = 2.5
noise_gain = 0.4
intensity_scale = 1.2
voxel_anisotropy = [1.0, 1.0, 1.3]
"#
    }

    #[test]
    fn parses_and_applies_defaults() {
        let c = ExperimentConfig::parse(sample_toml()).unwrap();
        assert_eq!(c.experiment.lr, 1e-4);
        assert_eq!(c.experiment.batch_size, 3);
        assert_eq!(c.experiment.lambda_gwc, 0.001);
        assert_eq!(c.experiment.mu_fedprox, 0.01);
        assert_eq!(c.experiment.precision, Precision::F32);
        assert_eq!(c.experiment.transport, Transport::Inproc);
        assert!(c.experiment.flip_augment);
        assert_eq!(c.experiment.metrics_every, 0);
        assert_eq!(c.unet.kernel, 3);
        assert_eq!(c.sites[0].voxel_anisotropy, [1.0, 1.0, 1.0]);
        assert_eq!(c.data.seed, None);
        assert_eq!(c.data_seed(), 2024);
    }

    #[test]
    fn round_trips_through_render() {
        let resolved = ExperimentConfig::parse(sample_toml())
            .unwrap()
            .resolve(&Overrides::default());
        let rendered = resolved.render();
        let back = ExperimentConfig::parse(&rendered).unwrap();
        assert_eq!(back, resolved);
        // Rendering is deterministic byte for byte.
        assert_eq!(back.render(), rendered);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = sample_toml().replace("crop = 8", "crop = 8\nlearning_rate_typo = 0.1");
        let err = ExperimentConfig::parse(&text).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("learning_rate_typo"), "{err}");
    }

    #[test]
    fn overrides_take_effect_and_pin_data_seed() {
        let overrides = Overrides {
            seed: Some(99),
            output_dir: Some("elsewhere".into()),
            transport: Some(Transport::Socket("127.0.0.1:0".into())),
            precision: Some(Precision::F64),
        };
        let c = ExperimentConfig::parse(sample_toml())
            .unwrap()
            .resolve(&overrides);
        assert_eq!(c.experiment.seed, 99);
        assert_eq!(c.data.seed, Some(99));
        assert_eq!(c.experiment.output_dir, "elsewhere");
        assert_eq!(c.experiment.precision, Precision::F64);
        assert!(matches!(c.experiment.transport, Transport::Socket(_)));
    }

    #[test]
    fn explicit_data_seed_survives_seed_override() {
        let text = sample_toml().replace(
            "volume_size = [16, 16, 16]",
            "seed = 777\nvolume_size = [16, 16, 16]",
        );
        let c = ExperimentConfig::parse(&text)
            .unwrap()
            .resolve(&Overrides {
                seed: Some(99),
                ..Overrides::default()
            });
        assert_eq!(c.experiment.seed, 99);
        assert_eq!(c.data_seed(), 777);
    }

    #[test]
    fn field_level_validation_messages() {
        let cases = [
            ("global_epochs = 4", "global_epochs = 0", "global_epochs"),
            ("split = [2, 0, 1]", "split = [1, 0, 1]", "data.split"),
            ("crop = 8", "crop = 7", "experiment.crop"),
            ("site_id = 2", "site_id = 1", "duplicate site_id"),
            (
                "volume_size = [16, 16, 16]",
                "volume_size = [16, 17, 16]",
                "volume_size[1]",
            ),
            (
                "volume_size = [16, 16, 16]",
                "volume_size = [16, 16, 8]",
                "volume_size[2]",
            ),
        ];
        for (from, to, needle) in cases {
            let text = sample_toml().replace(from, to);
            let err = ExperimentConfig::parse(&text).unwrap_err();
            assert!(
                err.to_string().contains(needle),
                "replacing {from:?} with {to:?}: expected {needle:?} in {err}"
            );
        }
    }

    #[test]
    fn transport_strings_parse_and_render() {
        assert_eq!(Transport::parse("inproc").unwrap(), Transport::Inproc);
        assert_eq!(
            Transport::parse("socket:127.0.0.1:4000").unwrap(),
            Transport::Socket("127.0.0.1:4000".into())
        );
        assert!(Transport::parse("socket:").is_err());
        assert!(Transport::parse("socket:nohost").is_err());
        assert!(Transport::parse("tcp:1:2").is_err());
        assert_eq!(
            Transport::parse("socket:localhost:0").unwrap().render(),
            "socket:localhost:0"
        );
    }

    #[test]
    fn strategy_and_precision_strings_are_validated() {
        let bad = sample_toml().replace("strategy = \"fedftn\"", "strategy = \"fedsgd\"");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let bad = sample_toml().replace("seed = 2024", "seed = 2024\nprecision = \"f16\"");
        assert!(ExperimentConfig::parse(&bad).is_err());
        let ok = sample_toml().replace("seed = 2024", "seed = 2024\nprecision = \"f64\"");
        assert_eq!(
            ExperimentConfig::parse(&ok).unwrap().experiment.precision,
            Precision::F64
        );
    }
}
