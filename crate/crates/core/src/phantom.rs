//! Synthetic multi-site phantom data.
//!
//! Each site generates soft-tissue-like volumes — a smooth elliptical body,
//! a few higher-uptake organ ellipsoids, and occasional small hot lesions —
//! and degrades them to low-count acquisitions with a Poisson thinning
//! surrogate: scale intensities by `count_level * gain`, draw Poisson
//! counts, rescale back, and blur with a site-specific kernel. The draw is
//! unbiased around the blurred reference and its variance grows as
//! `1 / count_level`, which is the relationship the denoiser conditions on.
//!
//! Sites differ in blur width, noise gain, intensity scaling, and voxel
//! anisotropy, giving a genuinely heterogeneous federation.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};

use crate::error::{Error, Result};
use crate::ftn::CountLevel;
use crate::rng;
use crate::tensor::{Element, Tensor};

/// FWHM-to-sigma conversion for Gaussian kernels.
const FWHM_TO_SIGMA: f64 = 2.354_820_045_030_949;

/// Edge-softening blur applied to freshly generated phantoms, in voxels.
const PHANTOM_EDGE_SIGMA: f64 = 0.6;

const MIN_PHANTOM_EXTENT: usize = 16;

/// Acquisition characteristics of one synthetic site.
#[derive(Debug, Clone)]
pub struct SiteProfile {
    pub site_id: u32,
    pub count_levels: Vec<CountLevel>,
    pub blur_fwhm_voxels: f64,
    pub noise_gain: f64,
    pub intensity_scale: f64,
    pub voxel_anisotropy: [f64; 3],
    pub seed: u64,
}

impl SiteProfile {
    pub fn validate(&self) -> Result<()> {
        if self.count_levels.is_empty() {
            return Err(Error::config(format!(
                "site {} has no count levels",
                self.site_id
            )));
        }
        if self.blur_fwhm_voxels < 0.0 {
            return Err(Error::config(format!(
                "site {}: blur fwhm must be >= 0, got {}",
                self.site_id, self.blur_fwhm_voxels
            )));
        }
        if self.noise_gain <= 0.0 || self.intensity_scale <= 0.0 {
            return Err(Error::config(format!(
                "site {}: gain and intensity scale must be positive",
                self.site_id
            )));
        }
        if self.voxel_anisotropy.iter().any(|&a| a <= 0.0) {
            return Err(Error::config(format!(
                "site {}: anisotropy factors must be positive",
                self.site_id
            )));
        }
        Ok(())
    }

    /// The three default site profiles: one high-count clean site and two
    /// lower-count sites with distinct blur, gain, scale, and anisotropy.
    pub fn default_sites(seed: u64) -> Vec<SiteProfile> {
        let levels = |ds: &[f64]| -> Vec<CountLevel> {
            ds.iter().map(|&d| CountLevel::new(d).unwrap()).collect()
        };
        vec![
            SiteProfile {
                site_id: 1,
                count_levels: levels(&[0.05, 0.10, 0.20]),
                blur_fwhm_voxels: 2.0,
                noise_gain: 0.5,
                intensity_scale: 1.0,
                voxel_anisotropy: [1.0, 1.0, 1.0],
                seed,
            },
            SiteProfile {
                site_id: 2,
                count_levels: levels(&[0.02, 0.05, 0.10]),
                blur_fwhm_voxels: 2.5,
                noise_gain: 0.4,
                intensity_scale: 1.2,
                voxel_anisotropy: [1.0, 1.0, 1.0],
                seed,
            },
            SiteProfile {
                site_id: 3,
                count_levels: levels(&[0.02, 0.05, 0.10]),
                blur_fwhm_voxels: 3.0,
                noise_gain: 0.6,
                intensity_scale: 0.85,
                voxel_anisotropy: [1.0, 1.0, 1.3],
                seed,
            },
        ]
    }
}

/// Voxel class labels recorded before edge blurring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Region {
    Background = 0,
    Body = 1,
    Organ = 2,
    Lesion = 3,
}

/// A generated reference volume plus its per-voxel region labels.
pub struct Phantom {
    pub shape: [usize; 3],
    pub volume: Vec<f64>,
    pub labels: Vec<Region>,
}

impl Phantom {
    /// Mean intensity over voxels of one region class.
    pub fn region_mean(&self, region: Region) -> Option<f64> {
        let mut sum = 0.0;
        let mut n = 0usize;
        for (&v, &l) in self.volume.iter().zip(&self.labels) {
            if l == region {
                sum += v;
                n += 1;
            }
        }
        (n > 0).then(|| sum / n as f64)
    }
}

/// One training/evaluation item: a low-count volume, its full-count
/// reference, and the count level it was acquired at.
#[derive(Clone)]
pub struct Sample<T: Element> {
    pub x: Tensor<T>,
    pub y: Tensor<T>,
    pub d: CountLevel,
    pub site_id: u32,
    pub subject_id: u32,
}

/// Per-split sample lists for one site.
pub struct SiteDataset<T: Element> {
    pub train: Vec<Sample<T>>,
    pub val: Vec<Sample<T>>,
    pub test: Vec<Sample<T>>,
}

impl<T: Element> SiteDataset<T> {
    pub fn split(&self, name: &str) -> &[Sample<T>] {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            "test" => &self.test,
            _ => &[],
        }
    }
}

fn ellipsoid_mask(
    shape: [usize; 3],
    center: [f64; 3],
    semi_axes: [f64; 3],
    mut hit: impl FnMut(usize),
) {
    let [h, w, d] = shape;
    for i in 0..h {
        for j in 0..w {
            for k in 0..d {
                let dx = (i as f64 - center[0]) / semi_axes[0];
                let dy = (j as f64 - center[1]) / semi_axes[1];
                let dz = (k as f64 - center[2]) / semi_axes[2];
                if dx * dx + dy * dy + dz * dz <= 1.0 {
                    hit((i * w + j) * d + k);
                }
            }
        }
    }
}

/// Separable Gaussian blur with truncated, border-renormalized kernels.
/// A constant field stays exactly constant. `sigma` is per axis, in voxels;
/// zero disables that axis.
pub fn gaussian_blur(volume: &[f64], shape: [usize; 3], sigma: [f64; 3]) -> Vec<f64> {
    let mut cur = volume.to_vec();
    let [h, w, d] = shape;
    let strides = [w * d, d, 1];
    let extents = [h, w, d];
    for axis in 0..3 {
        let s = sigma[axis];
        if s <= 0.0 {
            continue;
        }
        let radius = (3.0 * s).ceil() as isize;
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|o| (-(o as f64) * (o as f64) / (2.0 * s * s)).exp())
            .collect();
        let mut next = vec![0.0f64; cur.len()];
        let extent = extents[axis] as isize;
        let stride = strides[axis] as isize;
        // Iterate over all lines along `axis`.
        let line_count = cur.len() / extents[axis];
        let mut line_starts = Vec::with_capacity(line_count);
        for idx in 0..cur.len() {
            let pos_on_axis = (idx as isize / stride) % extent;
            if pos_on_axis == 0 {
                line_starts.push(idx);
            }
        }
        for &start in &line_starts {
            for p in 0..extent {
                let mut acc = 0.0;
                let mut weight = 0.0;
                for (ki, &kv) in kernel.iter().enumerate() {
                    let q = p + ki as isize - radius;
                    if q < 0 || q >= extent {
                        continue;
                    }
                    acc += kv * cur[(start as isize + q * stride) as usize];
                    weight += kv;
                }
                next[(start as isize + p * stride) as usize] = acc / weight;
            }
        }
        cur = next;
    }
    cur
}

/// Generates a reference phantom: body, organs, lesions, softly blurred.
/// Deterministic in `seed`.
pub fn generate_phantom(seed: u64, size: [usize; 3]) -> Result<Phantom> {
    if size.iter().any(|&e| e < MIN_PHANTOM_EXTENT) {
        return Err(Error::config(format!(
            "phantom extents must be at least {MIN_PHANTOM_EXTENT}, got {size:?}"
        )));
    }
    let mut rng = rng::stream(seed, "phantom", &[]);
    let [h, w, d] = size;
    let n = h * w * d;
    let mut volume = vec![0.0f64; n];
    let mut labels = vec![Region::Background; n];

    let jitter = |rng: &mut ChaCha8Rng, base: f64, frac: f64| {
        base * rng.random_range(1.0 - frac..1.0 + frac)
    };
    let body_center = [
        jitter(&mut rng, h as f64 / 2.0, 0.05),
        jitter(&mut rng, w as f64 / 2.0, 0.05),
        jitter(&mut rng, d as f64 / 2.0, 0.05),
    ];
    let body_axes = [
        jitter(&mut rng, 0.38 * h as f64, 0.1),
        jitter(&mut rng, 0.38 * w as f64, 0.1),
        jitter(&mut rng, 0.38 * d as f64, 0.1),
    ];
    ellipsoid_mask(size, body_center, body_axes, |i| {
        volume[i] = 1.0;
        labels[i] = Region::Body;
    });

    let organ_count = rng.random_range(2..=5usize);
    for _ in 0..organ_count {
        let center = [
            body_center[0] + rng.random_range(-0.55..0.55) * body_axes[0],
            body_center[1] + rng.random_range(-0.55..0.55) * body_axes[1],
            body_center[2] + rng.random_range(-0.55..0.55) * body_axes[2],
        ];
        let axes = [
            rng.random_range(0.08..0.18) * h as f64,
            rng.random_range(0.08..0.18) * w as f64,
            rng.random_range(0.08..0.18) * d as f64,
        ];
        let uptake = rng.random_range(1.8..3.0);
        ellipsoid_mask(size, center, axes, |i| {
            if labels[i] != Region::Background {
                volume[i] = uptake;
                labels[i] = Region::Organ;
            }
        });
    }

    let lesion_count = rng.random_range(0..=3usize);
    for _ in 0..lesion_count {
        let center = [
            body_center[0] + rng.random_range(-0.6..0.6) * body_axes[0],
            body_center[1] + rng.random_range(-0.6..0.6) * body_axes[1],
            body_center[2] + rng.random_range(-0.6..0.6) * body_axes[2],
        ];
        let r = rng.random_range(2.0..3.0);
        let uptake = rng.random_range(5.0..8.0);
        ellipsoid_mask(size, center, [r, r, r], |i| {
            if labels[i] != Region::Background {
                volume[i] = uptake;
                labels[i] = Region::Lesion;
            }
        });
    }

    let volume = gaussian_blur(
        &volume,
        size,
        [PHANTOM_EDGE_SIGMA, PHANTOM_EDGE_SIGMA, PHANTOM_EDGE_SIGMA],
    );
    Ok(Phantom {
        shape: size,
        volume,
        labels,
    })
}

fn site_blur_sigma(profile: &SiteProfile) -> [f64; 3] {
    let base = profile.blur_fwhm_voxels / FWHM_TO_SIGMA;
    [
        base / profile.voxel_anisotropy[0],
        base / profile.voxel_anisotropy[1],
        base / profile.voxel_anisotropy[2],
    ]
}

/// Degrades a full-count volume to a low-count acquisition at level `d`:
/// Poisson thinning at `d * gain` counts per intensity unit, then the
/// site's resolution blur. The expectation equals the blurred reference;
/// the variance scales as `1 / d`.
pub fn simulate_low_count<T: Element>(
    y: &Tensor<T>,
    d: CountLevel,
    profile: &SiteProfile,
    noise_seed: u64,
) -> Result<Tensor<T>> {
    let shape = y.shape();
    if shape.len() < 3 {
        return Err(Error::shape(format!(
            "low-count simulation expects a volume, got shape {shape:?}"
        )));
    }
    let spatial = [
        shape[shape.len() - 3],
        shape[shape.len() - 2],
        shape[shape.len() - 1],
    ];
    if spatial.iter().product::<usize>() != y.len() {
        return Err(Error::shape(format!(
            "low-count simulation expects leading dims of 1, got shape {shape:?}"
        )));
    }
    let factor = d.value() * profile.noise_gain;
    let mut rng = rng::stream(noise_seed, "poisson", &[]);
    let yd = y.data();
    let mut counts = Vec::with_capacity(y.len());
    for &v in yd.iter() {
        let lambda = v.to_f64() * factor;
        if lambda < 0.0 {
            return Err(Error::domain(
                "low-count simulation needs a non-negative reference",
            ));
        }
        if lambda == 0.0 {
            counts.push(0.0);
        } else {
            let draw: f64 = Poisson::new(lambda)
                .map_err(|e| Error::domain(format!("poisson({lambda}): {e}")))?
                .sample(&mut rng);
            counts.push(draw / factor);
        }
    }
    drop(yd);
    let blurred = gaussian_blur(&counts, spatial, site_blur_sigma(profile));
    Tensor::from_vec(shape, blurred.into_iter().map(T::from_f64).collect())
}

/// Builds the full per-site dataset: one subject per phantom, one sample
/// per (subject, count level), subjects split disjointly into
/// train/val/test. Deterministic in the profile.
pub fn build_site_dataset<T: Element>(
    profile: &SiteProfile,
    volume_size: [usize; 3],
    n_subjects: usize,
    split: (usize, usize, usize),
) -> Result<SiteDataset<T>> {
    profile.validate()?;
    let (tr, va, te) = split;
    if tr + va + te != n_subjects {
        return Err(Error::config(format!(
            "split {split:?} does not sum to {n_subjects} subjects"
        )));
    }
    let mut out = SiteDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
    };
    let site = profile.site_id as u64;
    for subject in 0..n_subjects {
        let phantom_seed = rng::derive(profile.seed, "subject", &[site, subject as u64]);
        let phantom = generate_phantom(phantom_seed, volume_size)?;
        let y_shape = [1, 1, volume_size[0], volume_size[1], volume_size[2]];
        let y_data: Vec<T> = phantom
            .volume
            .iter()
            .map(|&v| T::from_f64(v * profile.intensity_scale))
            .collect();
        let y = Tensor::from_vec(&y_shape, y_data)?;
        let bucket = if subject < tr {
            &mut out.train
        } else if subject < tr + va {
            &mut out.val
        } else {
            &mut out.test
        };
        for (li, &d) in profile.count_levels.iter().enumerate() {
            let noise_seed =
                rng::derive(profile.seed, "noise", &[site, subject as u64, li as u64]);
            let x = simulate_low_count(&y, d, profile, noise_seed)?;
            bucket.push(Sample {
                x,
                y: y.clone(),
                d,
                site_id: profile.site_id,
                subject_id: subject as u32,
            });
        }
    }
    Ok(out)
}

/// Paired random crop and axis flips: the same window and the same flip
/// pattern apply to both volumes.
pub fn augment<T: Element>(
    x: &Tensor<T>,
    y: &Tensor<T>,
    crop: usize,
    flip: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let shape = x.shape();
    if shape != y.shape() {
        return Err(Error::shape(format!(
            "augment pair has shapes {:?} and {:?}",
            shape,
            y.shape()
        )));
    }
    if shape.len() != 5 {
        return Err(Error::shape(format!(
            "augment expects [batch, channel, h, w, d], got {shape:?}"
        )));
    }
    let (h, w, d) = (shape[2], shape[3], shape[4]);
    if crop > h || crop > w || crop > d {
        return Err(Error::shape(format!(
            "crop {crop} exceeds volume extents {h}x{w}x{d}"
        )));
    }
    let off = [
        rng.random_range(0..=h - crop),
        rng.random_range(0..=w - crop),
        rng.random_range(0..=d - crop),
    ];
    let flips = if flip {
        [rng.random(), rng.random(), rng.random()]
    } else {
        [false, false, false]
    };

    let cut = |t: &Tensor<T>| -> Result<Tensor<T>> {
        let td = t.data();
        let (b, c) = (shape[0], shape[1]);
        let mut out = Vec::with_capacity(b * c * crop * crop * crop);
        for bc in 0..b * c {
            let base = bc * h * w * d;
            for i in 0..crop {
                let si = if flips[0] { crop - 1 - i } else { i } + off[0];
                for j in 0..crop {
                    let sj = if flips[1] { crop - 1 - j } else { j } + off[1];
                    for k in 0..crop {
                        let sk = if flips[2] { crop - 1 - k } else { k } + off[2];
                        out.push(td[base + (si * w + sj) * d + sk]);
                    }
                }
            }
        }
        Tensor::from_vec(&[b, c, crop, crop, crop], out)
    };
    Ok((cut(x)?, cut(y)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile() -> SiteProfile {
        SiteProfile::default_sites(42).remove(0)
    }

    #[test]
    fn default_sites_are_valid_and_distinct() {
        let sites = SiteProfile::default_sites(1);
        assert_eq!(sites.len(), 3);
        for s in &sites {
            s.validate().unwrap();
        }
        assert_eq!(sites[0].count_levels[0].value(), 0.05);
        assert_eq!(sites[1].count_levels[0].value(), 0.02);
        assert!(sites[1].intensity_scale != sites[2].intensity_scale);
    }

    #[test]
    fn phantom_rejects_tiny_extents() {
        assert!(matches!(
            generate_phantom(1, [8, 32, 32]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn phantom_is_deterministic_and_bounded() {
        let a = generate_phantom(7, [16, 16, 16]).unwrap();
        let b = generate_phantom(7, [16, 16, 16]).unwrap();
        assert_eq!(a.volume, b.volume);
        assert!(a.volume.iter().all(|&v| v >= 0.0 && v.is_finite()));
        assert!(a.volume.iter().cloned().fold(0.0, f64::max) > 0.0);
        let c = generate_phantom(8, [16, 16, 16]).unwrap();
        assert_ne!(a.volume, c.volume);
    }

    #[test]
    fn region_intensity_ordering() {
        // Lesions are hotter than organs, organs hotter than plain body.
        let mut checked = 0;
        for seed in 0..20 {
            let p = generate_phantom(seed, [24, 24, 24]).unwrap();
            let body = p.region_mean(Region::Body).unwrap();
            if let (Some(organ), Some(lesion)) =
                (p.region_mean(Region::Organ), p.region_mean(Region::Lesion))
            {
                assert!(lesion > organ, "seed {seed}: {lesion} !> {organ}");
                assert!(organ > body, "seed {seed}: {organ} !> {body}");
                checked += 1;
            }
        }
        assert!(checked >= 3, "too few phantoms had all three regions");
    }

    #[test]
    fn blur_preserves_constants() {
        let v = vec![2.5; 16 * 16 * 16];
        let out = gaussian_blur(&v, [16, 16, 16], [1.0, 0.7, 1.3]);
        for x in out {
            assert!((x - 2.5).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_volume_simulates_to_zero() {
        let y = Tensor::<f64>::zeros(&[1, 1, 16, 16, 16]).unwrap();
        let x = simulate_low_count(&y, CountLevel::new(0.05).unwrap(), &profile(), 3).unwrap();
        assert!(x.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn simulation_is_seed_deterministic() {
        let p = generate_phantom(1, [16, 16, 16]).unwrap();
        let y =
            Tensor::<f64>::from_vec(&[1, 1, 16, 16, 16], p.volume.clone()).unwrap();
        let d = CountLevel::new(0.1).unwrap();
        let a = simulate_low_count(&y, d, &profile(), 11).unwrap();
        let b = simulate_low_count(&y, d, &profile(), 11).unwrap();
        let c = simulate_low_count(&y, d, &profile(), 12).unwrap();
        assert_eq!(*a.data(), *b.data());
        assert_ne!(*a.data(), *c.data());
    }

    #[test]
    fn high_count_limit_approaches_blur() {
        // gain >> 1 makes Poisson relative noise vanish.
        let p = generate_phantom(2, [16, 16, 16]).unwrap();
        let y =
            Tensor::<f64>::from_vec(&[1, 1, 16, 16, 16], p.volume.clone()).unwrap();
        let mut prof = profile();
        prof.noise_gain = 1e6;
        let d = CountLevel::new(1.0).unwrap();
        let x = simulate_low_count(&y, d, &prof, 5).unwrap();
        let blurred = gaussian_blur(&p.volume, [16, 16, 16], site_blur_sigma(&prof));
        let peak = blurred.iter().cloned().fold(0.0, f64::max);
        for (&got, &want) in x.data().iter().zip(&blurred) {
            if want > 0.1 * peak {
                assert!(
                    (got - want).abs() / want <= 0.01,
                    "{got} vs {want}"
                );
            }
        }
    }

    #[test]
    fn dataset_counts_and_split_disjointness() {
        let ds: SiteDataset<f32> =
            build_site_dataset(&profile(), [16, 16, 16], 10, (6, 1, 3)).unwrap();
        assert_eq!(ds.train.len(), 18);
        assert_eq!(ds.val.len(), 3);
        assert_eq!(ds.test.len(), 9);
        let ids = |s: &[Sample<f32>]| -> Vec<u32> {
            let mut v: Vec<u32> = s.iter().map(|x| x.subject_id).collect();
            v.dedup();
            v
        };
        let (tr, va, te) = (ids(&ds.train), ids(&ds.val), ids(&ds.test));
        for t in &tr {
            assert!(!va.contains(t) && !te.contains(t));
        }
        for v in &va {
            assert!(!te.contains(v));
        }
    }

    #[test]
    fn dataset_split_must_sum() {
        let result = build_site_dataset::<f32>(&profile(), [16, 16, 16], 10, (6, 1, 2));
        assert!(matches!(result, Err(Error::Config(_))));
    }

    #[test]
    fn dataset_is_deterministic() {
        let a: SiteDataset<f32> =
            build_site_dataset(&profile(), [16, 16, 16], 4, (2, 1, 1)).unwrap();
        let b: SiteDataset<f32> =
            build_site_dataset(&profile(), [16, 16, 16], 4, (2, 1, 1)).unwrap();
        for (sa, sb) in a.train.iter().zip(&b.train) {
            assert_eq!(*sa.x.data(), *sb.x.data());
            assert_eq!(*sa.y.data(), *sb.y.data());
        }
    }

    #[test]
    fn augment_identity_when_full_crop_no_flip() {
        let p = generate_phantom(3, [16, 16, 16]).unwrap();
        let y = Tensor::<f64>::from_vec(&[1, 1, 16, 16, 16], p.volume.clone()).unwrap();
        let mut r = rng::stream(0, "aug", &[]);
        let (ax, ay) = augment(&y, &y, 16, false, &mut r).unwrap();
        assert_eq!(*ax.data(), p.volume);
        assert_eq!(*ay.data(), p.volume);
    }

    #[test]
    fn augment_is_paired() {
        // y = x + 1 everywhere; the pairing must survive crop and flips.
        let data: Vec<f64> = (0..16 * 16 * 16).map(|i| (i % 17) as f64).collect();
        let x = Tensor::<f64>::from_vec(&[1, 1, 16, 16, 16], data.clone()).unwrap();
        let y = Tensor::<f64>::from_vec(
            &[1, 1, 16, 16, 16],
            data.iter().map(|v| v + 1.0).collect(),
        )
        .unwrap();
        for seed in 0..50 {
            let mut r = rng::stream(seed, "aug", &[]);
            let (ax, ay) = augment(&x, &y, 8, true, &mut r).unwrap();
            for (&a, &b) in ax.data().iter().zip(ay.data().iter()) {
                assert_eq!(b, a + 1.0);
            }
        }
    }

    #[test]
    fn augment_rejects_oversized_crop() {
        let x = Tensor::<f64>::zeros(&[1, 1, 8, 8, 8]).unwrap();
        let mut r = rng::stream(0, "aug", &[]);
        assert!(matches!(
            augment(&x, &x, 9, false, &mut r),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn intensity_scale_multiplies_references() {
        // Same site, same seed, doubled intensity scale: references double.
        let base = profile();
        let mut scaled = profile();
        scaled.intensity_scale = 2.0 * base.intensity_scale;
        let a: SiteDataset<f64> = build_site_dataset(&base, [16, 16, 16], 1, (1, 0, 0)).unwrap();
        let b: SiteDataset<f64> = build_site_dataset(&scaled, [16, 16, 16], 1, (1, 0, 0)).unwrap();
        for (sa, sb) in a.train.iter().zip(&b.train) {
            for (&va, &vb) in sa.y.data().iter().zip(sb.y.data().iter()) {
                assert!((vb - 2.0 * va).abs() < 1e-12);
            }
        }
    }
}
