use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, LabelSpace, Sample};

/// Synthetic long-tail classification data with two kinds of label noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub classes: usize,
    pub dim: usize,
    pub n: usize,
    /// Class `r` (0-based) gets size proportional to `(r + 1)^-imbalance_exponent`.
    pub imbalance_exponent: f64,
    /// Share of samples drawn midway between their prototype and another class's.
    pub boundary_noise_rate: f64,
    /// Share of labels replaced by a different class chosen uniformly.
    pub flip_noise_rate: f64,
    /// Standard deviation of prototype coordinates.
    pub prototype_scale: f64,
    /// Standard deviation of per-sample isotropic noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            classes: 12,
            dim: 64,
            n: 3000,
            imbalance_exponent: 1.0,
            boundary_noise_rate: 0.2,
            flip_noise_rate: 0.1,
            prototype_scale: 0.3,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.classes < 4 {
            return Err(Error::Config(format!(
                "synthetic data needs at least 4 classes, got {}",
                self.classes
            )));
        }
        if self.dim == 0 {
            return Err(Error::Config("dim must be positive".into()));
        }
        if self.n < 10 * self.classes {
            return Err(Error::Config(format!(
                "n = {} is below 10 samples per class ({} classes)",
                self.n, self.classes
            )));
        }
        for (name, rate) in [
            ("boundary_noise_rate", self.boundary_noise_rate),
            ("flip_noise_rate", self.flip_noise_rate),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {rate}")));
            }
        }
        if !(self.imbalance_exponent >= 0.0 && self.imbalance_exponent.is_finite()) {
            return Err(Error::Config("imbalance_exponent must be finite and >= 0".into()));
        }
        if !(self.prototype_scale > 0.0 && self.noise_std >= 0.0) {
            return Err(Error::Config("prototype_scale must be > 0 and noise_std >= 0".into()));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` to weights `(r+1)^-e`; ties in the
/// remainder go to the lower class, which keeps sizes non-increasing.
fn class_sizes(classes: usize, n: usize, exponent: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..classes).map(|r| ((r + 1) as f64).powf(-exponent)).collect();
    let total: f64 = weights.iter().sum();
    let quotas: Vec<f64> = weights.iter().map(|w| w / total * n as f64).collect();
    let mut sizes: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..classes).collect();
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let missing = n - sizes.iter().sum::<usize>();
    for &c in order.iter().take(missing) {
        sizes[c] += 1;
    }
    sizes
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim)
        .map(|_| scale * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng))
        .collect()
}

pub fn synth_generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let c = config.classes;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let prototypes: Vec<Vec<f64>> = (0..c)
        .map(|_| gaussian(&mut rng, config.dim, config.prototype_scale))
        .collect();
    let sizes = class_sizes(c, config.n, config.imbalance_exponent);

    let mut samples = Vec::with_capacity(config.n);
    for (class, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            let mut center = prototypes[class].clone();
            if rng.random_bool(config.boundary_noise_rate) {
                let other = (class + rng.random_range(1..c)) % c;
                for (x, o) in center.iter_mut().zip(&prototypes[other]) {
                    *x = 0.5 * (*x + o);
                }
            }
            let noise = gaussian(&mut rng, config.dim, config.noise_std);
            let features = center.iter().zip(noise).map(|(x, e)| x + e).collect();
            let label = if rng.random_bool(config.flip_noise_rate) {
                (class + rng.random_range(1..c)) % c
            } else {
                class
            };
            samples.push((features, label));
        }
    }
    samples.shuffle(&mut rng);
    let width = (config.n.max(1) - 1).to_string().len();
    let samples = samples
        .into_iter()
        .enumerate()
        .map(|(i, (features, label))| Sample {
            id: format!("s{i:0width$}"),
            features,
            label,
        })
        .collect();
    // Zero-padded so that lexicographic order (used when reloading) is index order.
    let lw = (c - 1).to_string().len().max(2);
    let labels = LabelSpace::new((0..c).map(|i| format!("class_{i:0lw$}")).collect())?;
    Dataset::new(samples, labels)
}
