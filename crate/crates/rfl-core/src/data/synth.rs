//! Synthetic corpus with two deliberately different signal families on
//! disjoint pixel blocks of an 8x8 single-channel image.
//!
//! Rows 0..4 carry a high-amplitude class template buried in Gaussian
//! noise: predictive but only up to the noise floor, and far from the
//! decision boundary in l2. Rows 4..7 carry a faint, noise-free code that
//! is perfectly predictive yet sits a tiny l2 step from the boundary. A
//! model that leans on the faint block gains clean accuracy and loses it
//! to small perturbations; one that leans on the loud block is robust but
//! capped. Row 7 is clutter.
//!
//! Class codes are Walsh rows, so every pair of distinct codes disagrees
//! in exactly half its positions and the flip distances below are exact
//! closed forms, not estimates.

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{self, stream};
use crate::tensor::Buffer;
use rand::prelude::Distribution;
use rand_distr::StandardNormal;

pub const HEIGHT: usize = 8;
pub const WIDTH: usize = 8;
/// Rows carrying the loud, noisy template.
pub const RF_ROWS: std::ops::Range<usize> = 0..4;
/// Rows carrying the faint, clean code.
pub const NRF_ROWS: std::ops::Range<usize> = 4..7;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub n_per_class: usize,
    pub test_per_class: usize,
    /// Amplitude of the loud template (rows 0..4).
    pub rf_amp: f64,
    /// Amplitude of the faint code (rows 4..7).
    pub nrf_amp: f64,
    /// Noise on the loud rows and the clutter row.
    pub noise_sigma: f64,
    /// Noise on the faint rows; zero keeps them perfectly predictive.
    pub nrf_noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> SyntheticSpec {
        SyntheticSpec {
            classes: 4,
            n_per_class: 128,
            test_per_class: 64,
            rf_amp: 0.13,
            nrf_amp: 0.05,
            noise_sigma: 0.4,
            nrf_noise_sigma: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn to_kv(&self) -> crate::config::Kv {
        let mut kv = crate::config::Kv::new();
        kv.set("classes", self.classes);
        kv.set("n_per_class", self.n_per_class);
        kv.set("test_per_class", self.test_per_class);
        kv.set("rf_amp", self.rf_amp);
        kv.set("nrf_amp", self.nrf_amp);
        kv.set("noise_sigma", self.noise_sigma);
        kv.set("nrf_noise_sigma", self.nrf_noise_sigma);
        kv.set("seed", self.seed);
        kv
    }

    pub fn from_kv(kv: &crate::config::Kv) -> Result<SyntheticSpec> {
        let d = SyntheticSpec::default();
        let mut r = kv.reader();
        let spec = SyntheticSpec {
            classes: r.usize_or("classes", d.classes)?,
            n_per_class: r.usize_or("n_per_class", d.n_per_class)?,
            test_per_class: r.usize_or("test_per_class", d.test_per_class)?,
            rf_amp: r.f64_or("rf_amp", d.rf_amp)?,
            nrf_amp: r.f64_or("nrf_amp", d.nrf_amp)?,
            noise_sigma: r.f64_or("noise_sigma", d.noise_sigma)?,
            nrf_noise_sigma: r.f64_or("nrf_noise_sigma", d.nrf_noise_sigma)?,
            seed: r.u64_or("seed", d.seed)?,
        };
        r.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.classes > 7 {
            return Err(Error::InvalidConfig(format!(
                "classes must be in 2..=7, got {}",
                self.classes
            )));
        }
        if self.n_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::InvalidConfig("empty split requested".into()));
        }
        for (name, v) in [
            ("rf_amp", self.rf_amp),
            ("nrf_amp", self.nrf_amp),
            ("noise_sigma", self.noise_sigma),
            ("nrf_noise_sigma", self.nrf_noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

pub struct SyntheticData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Walsh sign: row i, column j of the 8x8 Sylvester matrix.
fn walsh(i: usize, j: usize) -> f64 {
    if (i & j).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

/// Loud-template code row for a class. Row 0 is all ones and carries no
/// contrast, so classes start at row 1.
fn rf_row(class: usize) -> usize {
    class + 1
}

/// Faint-code row for a class, a different assignment so the two blocks
/// do not share per-class shapes.
fn nrf_row(class: usize, classes: usize) -> usize {
    classes - class
}

/// Noise-free image for a class: 0.5 everywhere, plus both signals.
pub fn class_signal(spec: &SyntheticSpec, class: usize) -> Buffer {
    Buffer::from_fn(vec![1, 1, HEIGHT, WIDTH], |p| {
        let (row, col) = (p / WIDTH, p % WIDTH);
        let mut v = 0.5;
        if RF_ROWS.contains(&row) {
            v += spec.rf_amp * walsh(rf_row(class), col);
        } else if NRF_ROWS.contains(&row) {
            v += spec.nrf_amp * walsh(nrf_row(class, spec.classes), col);
        }
        v
    })
}

/// Exact l2 distance from any clean image to the nearest point classified
/// as a different class by an ideal reader of the loud rows. Distinct
/// Walsh rows disagree in 4 of 8 columns, over 4 rows: 16 positions, each
/// a 2*rf_amp flip, and the boundary sits halfway.
pub fn rf_flip_radius(spec: &SyntheticSpec) -> f64 {
    spec.rf_amp * (16.0f64).sqrt()
}

/// Same for the faint rows: 4 of 8 columns over 3 rows.
pub fn nrf_flip_radius(spec: &SyntheticSpec) -> f64 {
    spec.nrf_amp * (12.0f64).sqrt()
}

fn gen_split(spec: &SyntheticSpec, split_id: u64, per_class: usize, name: &str) -> Result<Dataset> {
    let n = per_class * spec.classes;
    let mut data = Vec::with_capacity(n * HEIGHT * WIDTH);
    let mut labels = Vec::with_capacity(n);
    for class in 0..spec.classes {
        let clean = class_signal(spec, class);
        for i in 0..per_class {
            let mut r = rng::stream_rng(spec.seed, stream::SYNTH, &[split_id, class as u64, i as u64]);
            for p in 0..HEIGHT * WIDTH {
                let row = p / WIDTH;
                let z: f64 = StandardNormal.sample(&mut r);
                let sigma = if NRF_ROWS.contains(&row) {
                    spec.nrf_noise_sigma
                } else {
                    spec.noise_sigma
                };
                data.push((clean.data()[p] + sigma * z).clamp(0.0, 1.0));
            }
            labels.push(class);
        }
    }
    Dataset::new(
        Buffer::new(data, vec![n, 1, HEIGHT, WIDTH])?,
        labels,
        spec.classes,
        name,
    )
}

/// Both splits in one deterministic call. The test split uses its own
/// noise stream, never a tail of the training stream.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    Ok(SyntheticData {
        train: gen_split(spec, 0, spec.n_per_class, "synthetic/train")?,
        test: gen_split(spec, 1, spec.test_per_class, "synthetic/test")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walsh_rows_disagree_in_exactly_half_their_positions() {
        for a in 1..8 {
            for b in 1..8 {
                if a == b {
                    continue;
                }
                let hamming: usize = (0..8).filter(|&j| walsh(a, j) != walsh(b, j)).count();
                assert_eq!(hamming, 4, "rows {a} and {b}");
            }
        }
    }

    #[test]
    fn flip_radii_match_distances_between_clean_class_images() {
        let spec = SyntheticSpec::default();
        for a in 0..spec.classes {
            for b in 0..spec.classes {
                if a == b {
                    continue;
                }
                let xa = class_signal(&spec, a);
                let xb = class_signal(&spec, b);
                let (mut d_rf, mut d_nrf) = (0.0f64, 0.0f64);
                for p in 0..HEIGHT * WIDTH {
                    let row = p / WIDTH;
                    let d = (xa.data()[p] - xb.data()[p]).powi(2);
                    if RF_ROWS.contains(&row) {
                        d_rf += d;
                    } else if NRF_ROWS.contains(&row) {
                        d_nrf += d;
                    }
                }
                // The boundary between equidistant classes is at half the
                // inter-class distance.
                assert!((d_rf.sqrt() / 2.0 - rf_flip_radius(&spec)).abs() < 1e-12);
                assert!((d_nrf.sqrt() / 2.0 - nrf_flip_radius(&spec)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn faint_rows_are_noise_free_by_default() {
        let spec = SyntheticSpec {
            n_per_class: 3,
            test_per_class: 1,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap();
        for i in 0..data.train.len() {
            let class = data.train.labels[i];
            let clean = class_signal(&spec, class);
            let img = data.train.image(i);
            for p in 0..HEIGHT * WIDTH {
                let row = p / WIDTH;
                if NRF_ROWS.contains(&row) {
                    assert_eq!(img.data()[p], clean.data()[p]);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let spec = SyntheticSpec {
            n_per_class: 4,
            test_per_class: 2,
            ..SyntheticSpec::default()
        };
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.train.images.data(), b.train.images.data());
        assert_eq!(a.test.images.data(), b.test.images.data());
        let other = generate(&SyntheticSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a.train.images.data(), other.train.images.data());
    }

    #[test]
    fn pixels_stay_inside_the_unit_box() {
        let spec = SyntheticSpec {
            n_per_class: 16,
            noise_sigma: 1.5,
            ..SyntheticSpec::default()
        };
        let data = generate(&spec).unwrap();
        for &v in data.train.images.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn spec_round_trips_through_its_text_form() {
        let spec = SyntheticSpec { classes: 5, rf_amp: 0.2, seed: 9, ..SyntheticSpec::default() };
        assert_eq!(SyntheticSpec::from_kv(&spec.to_kv()).unwrap(), spec);
        let stray = crate::config::Kv::parse("bogus_key = 1\n").unwrap();
        assert!(SyntheticSpec::from_kv(&stray).is_err());
    }

    #[test]
    fn bad_specs_are_rejected_as_config_errors() {
        let mut spec = SyntheticSpec {
            classes: 9,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate(&spec), Err(Error::InvalidConfig(_))));
        spec.classes = 4;
        spec.noise_sigma = f64::NAN;
        assert!(matches!(generate(&spec), Err(Error::InvalidConfig(_))));
    }
}
