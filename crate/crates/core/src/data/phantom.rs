//! Synthetic ellipsoid phantoms with exact label maps.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::io::write_volume;
use super::manifest::{DatasetManifest, LabeledEntry};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};
use crate::volume::{linear_index, voxel_count, Dims, Volume};

pub const BACKGROUND_MEAN: f32 = 0.2;

/// Noiseless intensity of class `k` out of `class_count`.
pub fn class_mean(k: usize, class_count: usize) -> f32 {
    if k == 0 {
        BACKGROUND_MEAN
    } else {
        BACKGROUND_MEAN + 0.6 * k as f32 / (class_count - 1) as f32
    }
}

/// Recovers labels from a noiseless phantom by thresholding halfway between
/// neighbouring class means.
pub fn threshold_labels(image: &Volume, class_count: usize) -> Vec<u8> {
    image
        .values()
        .iter()
        .map(|&x| {
            let mut k = 0;
            while k + 1 < class_count
                && x > 0.5 * (class_mean(k, class_count) + class_mean(k + 1, class_count))
            {
                k += 1;
            }
            k as u8
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSpec {
    /// Training volumes (labeled + unlabeled).
    pub n_volumes: usize,
    pub shape: Dims,
    pub class_count: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    /// How many of the training volumes are listed as labeled.
    pub labeled_count: usize,
    /// Extra held-out volumes written after the training ones.
    pub validation_count: usize,
}

#[derive(Debug, Clone)]
pub struct Phantom {
    pub image: Volume,
    pub label: Volume,
    /// The image before noise was added.
    pub clean: Volume,
}

struct Ellipsoid {
    center: [f64; 3],
    radii: [f64; 3],
    /// Rows are the ellipsoid axes in grid coordinates.
    axes: [[f64; 3]; 3],
    class: u8,
}

impl Ellipsoid {
    fn random(shape: Dims, class_count: usize, rng: &mut impl Rng) -> Self {
        let min_dim = *shape.iter().min().unwrap() as f64;
        let center = [0, 1, 2].map(|a| rng.gen_range(0.15..0.85) * shape[a] as f64);
        let radii = [0, 1, 2].map(|_| rng.gen_range(0.08..0.25) * min_dim);
        // uniform random rotation from a unit quaternion
        let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
        let tau = std::f64::consts::TAU;
        let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
        let (w, x, y, z) = (
            a * (tau * u2).sin(),
            a * (tau * u2).cos(),
            b * (tau * u3).sin(),
            b * (tau * u3).cos(),
        );
        let axes = [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
            [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
            [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
        ];
        let class = rng.gen_range(1..class_count) as u8;
        Self {
            center,
            radii,
            axes,
            class,
        }
    }

    fn contains(&self, p: [f64; 3]) -> bool {
        let d = [0, 1, 2].map(|a| p[a] - self.center[a]);
        let mut acc = 0.0;
        for (axis, r) in self.axes.iter().zip(self.radii) {
            let t = axis[0] * d[0] + axis[1] * d[1] + axis[2] * d[2];
            acc += (t / r) * (t / r);
        }
        acc <= 1.0
    }

    /// Paints the ellipsoid; returns how many voxels it covered.
    fn paint(&self, shape: Dims, labels: &mut [u8]) -> usize {
        let mut count = 0;
        for z in 0..shape[2] {
            for y in 0..shape[1] {
                for x in 0..shape[0] {
                    if self.contains([x as f64, y as f64, z as f64]) {
                        labels[linear_index(shape, x, y, z)] = self.class;
                        count += 1;
                    }
                }
            }
        }
        count
    }
}

/// Draws one phantom: 1 to 3 ellipsoids of random foreground classes on a
/// background, plus Gaussian noise of standard deviation `noise_sigma`.
pub fn generate_phantom(
    shape: Dims,
    class_count: usize,
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Result<Phantom> {
    if class_count < 2 {
        return Err(Error::InvalidArgument(format!(
            "phantoms need at least 2 classes, got {class_count}"
        )));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidArgument(format!("empty phantom shape {shape:?}")));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be non-negative, got {noise_sigma}"
        )));
    }
    let n = voxel_count(shape);
    let mut labels = vec![0u8; n];
    let count = rng.gen_range(1..=3);
    for _ in 0..count {
        loop {
            let e = Ellipsoid::random(shape, class_count, rng);
            if e.paint(shape, &mut labels) > 0 {
                break;
            }
        }
    }
    // later ellipsoids may fully cover earlier ones, but never erase all
    // foreground since the last one painted is nonempty
    let clean: Vec<f32> = labels
        .iter()
        .map(|&l| class_mean(l as usize, class_count))
        .collect();
    let noisy: Vec<f32> = clean
        .iter()
        .map(|&c| {
            let z: f64 = StandardNormal.sample(rng);
            (c as f64 + noise_sigma * z) as f32
        })
        .collect();
    Ok(Phantom {
        image: Volume::image(shape, [1.0; 3], noisy)?,
        label: Volume::label(shape, [1.0; 3], class_count, &labels)?,
        clean: Volume::image(shape, [1.0; 3], clean)?,
    })
}

/// Writes `n_volumes + validation_count` phantoms under `out_dir` and a
/// `manifest.toml` describing the split. Paths in the manifest are relative.
pub fn generate_phantom_dataset(spec: &PhantomSpec, out_dir: &Path) -> Result<DatasetManifest> {
    if spec.n_volumes == 0 {
        return Err(Error::InvalidArgument("n_volumes must be positive".into()));
    }
    if spec.labeled_count == 0 || spec.labeled_count > spec.n_volumes {
        return Err(Error::InvalidArgument(format!(
            "labeled_count must be in [1, {}], got {}",
            spec.n_volumes, spec.labeled_count
        )));
    }
    let total = spec.n_volumes + spec.validation_count;
    let mut manifest = DatasetManifest {
        class_count: spec.class_count,
        labeled: Vec::new(),
        unlabeled: Vec::new(),
        validation: Vec::new(),
    };
    for i in 0..total {
        let mut rng = stream_rng(spec.seed, i as u64, Stream::Phantom);
        let ph = generate_phantom(spec.shape, spec.class_count, spec.noise_sigma, &mut rng)?;
        let image = format!("images/img_{i:03}.hdr");
        let label = format!("labels/lab_{i:03}.hdr");
        write_volume(&out_dir.join(&image), &ph.image)?;
        write_volume(&out_dir.join(&label), &ph.label)?;
        let entry = LabeledEntry {
            image: image.into(),
            label: label.into(),
        };
        if i < spec.labeled_count {
            manifest.labeled.push(entry);
        } else if i < spec.n_volumes {
            manifest.unlabeled.push(entry.image);
        } else {
            manifest.validation.push(entry);
        }
    }
    manifest.validate()?;
    manifest.save(&out_dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    #[test]
    fn noiseless_phantom_thresholds_to_labels() {
        for c in [2, 3, 5] {
            let ph = generate_phantom([20, 18, 16], c, 0.0, &mut seeded(c as u64)).unwrap();
            assert_eq!(threshold_labels(&ph.image, c), ph.label.labels());
        }
    }

    #[test]
    fn label_and_clean_image_agree_geometrically() {
        let ph = generate_phantom([24, 24, 24], 3, 0.1, &mut seeded(3)).unwrap();
        let fg_label: Vec<bool> = ph.label.labels().iter().map(|&l| l > 0).collect();
        let fg_clean: Vec<bool> = ph
            .clean
            .values()
            .iter()
            .map(|&x| x > BACKGROUND_MEAN)
            .collect();
        assert_eq!(fg_label, fg_clean);
        assert!(fg_label.iter().any(|&b| b));
    }

    #[test]
    fn noise_has_requested_scale() {
        let ph = generate_phantom([32, 32, 32], 2, 0.1, &mut seeded(9)).unwrap();
        let n = ph.image.voxels() as f64;
        let var: f64 = ph
            .image
            .values()
            .iter()
            .zip(ph.clean.values())
            .map(|(&a, &b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / n;
        assert!((var.sqrt() - 0.1).abs() < 0.003, "std {}", var.sqrt());
    }

    #[test]
    fn single_class_rejected() {
        assert!(generate_phantom([4, 4, 4], 1, 0.0, &mut seeded(0)).is_err());
    }

    #[test]
    fn dataset_is_deterministic() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let spec = PhantomSpec {
            n_volumes: 3,
            shape: [12, 10, 8],
            class_count: 2,
            noise_sigma: 0.1,
            seed: 11,
            labeled_count: 1,
            validation_count: 1,
        };
        let ma = generate_phantom_dataset(&spec, a.path()).unwrap();
        generate_phantom_dataset(&spec, b.path()).unwrap();
        assert_eq!(ma.labeled.len(), 1);
        assert_eq!(ma.unlabeled.len(), 2);
        assert_eq!(ma.validation.len(), 1);
        for rel in ["images/img_002.raw", "labels/lab_003.raw", "manifest.toml"] {
            assert_eq!(
                std::fs::read(a.path().join(rel)).unwrap(),
                std::fs::read(b.path().join(rel)).unwrap()
            );
        }
    }
}
