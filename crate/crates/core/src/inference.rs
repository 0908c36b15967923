//! Monte Carlo prediction from a trained model and rater bank.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{derive_seed, image_to_tensor, ClassMap, RgbImage};
use crate::error::{Error, Result};
use crate::latent::{standard_normal, RaterBank};
use crate::network::SegModel;
use crate::tensor::{Scalar, Tensor};

/// Latent samples per prediction when none is given.
pub const DEFAULT_SAMPLES: usize = 16;

/// Largest possible variance of a quantity in `[0, 1]`.
const MAX_VARIANCE: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionResult {
    /// `[C, H, W]` mean of the sampled softmax maps.
    pub mean_probs: Tensor<f32>,
    /// Argmax of each sampled map.
    pub sample_maps: Vec<ClassMap>,
    /// `[H, W]` class-averaged across-sample variance divided by 0.25, in `[0, 1]`.
    pub uncertainty: Tensor<f32>,
    /// `[H, W]` entropy of `mean_probs` in nats.
    pub entropy: Tensor<f32>,
    pub argmax_map: ClassMap,
    /// Raters the samples were drawn from.
    pub raters: Vec<usize>,
    pub samples: usize,
    pub seed: u64,
    /// Set when a rater simulation was asked for the gold slot.
    pub gold_requested: bool,
}

impl PredictionResult {
    pub fn num_classes(&self) -> usize {
        self.mean_probs.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.argmax_map.width
    }

    pub fn height(&self) -> usize {
        self.argmax_map.height
    }

    /// Uncertainty as 8-bit gray, 255 (white) for certain pixels.
    pub fn uncertainty_map(&self) -> ClassMap {
        let data = self
            .uncertainty
            .data()
            .iter()
            .map(|&u| (255.0 * (1.0 - u.clamp(0.0, 1.0) as f64)).round() as u8)
            .collect();
        ClassMap {
            width: self.width(),
            height: self.height(),
            data,
        }
    }
}

/// Gold-rater prediction.
pub fn predict(
    model: &SegModel,
    bank: &RaterBank,
    image: &RgbImage,
    samples: usize,
    seed: u64,
) -> Result<PredictionResult> {
    mixture(model, bank, image, &[(bank.gold(), seed)], samples, seed)
}

/// Samples from rater `r`'s posterior. Asking for the gold slot is allowed
/// and marked in the result.
pub fn simulate_rater(
    model: &SegModel,
    bank: &RaterBank,
    image: &RgbImage,
    r: usize,
    samples: usize,
    seed: u64,
) -> Result<PredictionResult> {
    let mut out = mixture(model, bank, image, &[(r, seed)], samples, seed)?;
    out.gold_requested = r == bank.gold();
    Ok(out)
}

/// Equal mixture of two raters: `samples` draws from each.
pub fn blend_raters(
    model: &SegModel,
    bank: &RaterBank,
    image: &RgbImage,
    r1: usize,
    r2: usize,
    samples: usize,
    seed: u64,
) -> Result<PredictionResult> {
    if r1 == r2 {
        return Err(Error::InvalidArgument(format!(
            "cannot blend rater {r1} with itself"
        )));
    }
    let parts = [(r1, derive_seed(&[seed, 1])), (r2, derive_seed(&[seed, 2]))];
    mixture(model, bank, image, &parts, samples, seed)
}

/// `samples` draws per `(rater, seed)` part, all pooled with equal weight.
fn mixture(
    model: &SegModel,
    bank: &RaterBank,
    image: &RgbImage,
    parts: &[(usize, u64)],
    samples: usize,
    seed: u64,
) -> Result<PredictionResult> {
    if samples == 0 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    for &(r, _) in parts {
        bank.latent(r)?;
    }
    let features = model.extract_features(&image_to_tensor(image))?;
    let mut maps = Vec::with_capacity(samples * parts.len());
    for &(r, part_seed) in parts {
        let mut rng = ChaCha8Rng::seed_from_u64(part_seed);
        for _ in 0..samples {
            let eps = standard_normal(&mut rng, bank.dim());
            let z: Vec<f32> = bank
                .sample(r, &eps)?
                .into_iter()
                .map(f32::from_f64)
                .collect();
            maps.push(model.segment(&features, &z)?);
        }
    }
    let mut out = summarize(&maps)?;
    out.raters = parts.iter().map(|p| p.0).collect();
    out.samples = samples;
    out.seed = seed;
    Ok(out)
}

/// Mean, spread and argmaxes of `[1, C, H, W]` probability maps.
fn summarize(maps: &[Tensor<f32>]) -> Result<PredictionResult> {
    let (_, c, h, w) = maps[0].dims4("summarize")?;
    let plane = h * w;
    let k = maps.len() as f64;
    let mut mean = vec![0f64; c * plane];
    for m in maps {
        for (acc, &p) in mean.iter_mut().zip(m.data()) {
            *acc += p as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= k);
    let mut var = vec![0f64; c * plane];
    for m in maps {
        for ((acc, &p), &mu) in var.iter_mut().zip(m.data()).zip(&mean) {
            let d = p as f64 - mu;
            *acc += d * d;
        }
    }
    let mut uncertainty = vec![0f32; plane];
    let mut entropy = vec![0f32; plane];
    for px in 0..plane {
        let v: f64 = (0..c).map(|ch| var[ch * plane + px] / k).sum::<f64>() / c as f64;
        uncertainty[px] = (v / MAX_VARIANCE) as f32;
        entropy[px] = (0..c)
            .map(|ch| mean[ch * plane + px])
            .filter(|&p| p > 0.0)
            .map(|p| -p * p.ln())
            .sum::<f64>() as f32;
    }
    let sample_maps = maps.iter().map(|m| argmax(m.data(), c, w, h)).collect();
    let argmax_map = argmax(&mean, c, w, h);
    Ok(PredictionResult {
        mean_probs: Tensor::from_parts(vec![c, h, w], mean.iter().map(|&v| v as f32).collect()),
        sample_maps,
        uncertainty: Tensor::from_parts(vec![h, w], uncertainty),
        entropy: Tensor::from_parts(vec![h, w], entropy),
        argmax_map,
        raters: vec![],
        samples: 0,
        seed: 0,
        gold_requested: false,
    })
}

/// Per-pixel argmax over planar `[C, H, W]` values; ties go to the lower class.
fn argmax<T: Scalar>(probs: &[T], c: usize, w: usize, h: usize) -> ClassMap {
    let plane = w * h;
    let data = (0..plane)
        .map(|px| {
            let mut best = 0;
            for ch in 1..c {
                if probs[ch * plane + px] > probs[best * plane + px] {
                    best = ch;
                }
            }
            best as u8
        })
        .collect();
    ClassMap {
        width: w,
        height: h,
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ModelConfig;

    fn setup(logit_scale: f32) -> (SegModel, RaterBank, RgbImage) {
        let mut config = ModelConfig::new(4, 8);
        config.widths = [4, 4, 4];
        let mut model = SegModel::new(config, 3).unwrap();
        for l in model.layers_mut() {
            if l.name == "head.conv3" {
                l.weight
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v *= logit_scale);
            }
        }
        let bank = RaterBank::init(3, 8, 2.0, 8.0, 5).unwrap();
        let data = (0..16 * 16 * 3).map(|i| ((i * 37) % 251) as u8).collect();
        let image = RgbImage::new(16, 16, data).unwrap();
        (model, bank, image)
    }

    fn mean_abs_diff(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
        let s: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs() as f64)
            .sum();
        s / a.numel() as f64
    }

    fn check_result_invariants(p: &PredictionResult) {
        let (c, plane) = (p.num_classes(), p.width() * p.height());
        for px in 0..plane {
            let s: f32 = (0..c).map(|ch| p.mean_probs.data()[ch * plane + px]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(
            p.argmax_map,
            argmax(p.mean_probs.data(), c, p.width(), p.height())
        );
        assert!(p
            .uncertainty
            .data()
            .iter()
            .all(|&u| (0.0..=1.0).contains(&u)));
    }

    #[test]
    fn single_sample_has_no_uncertainty() {
        let (model, bank, image) = setup(10.0);
        let p = predict(&model, &bank, &image, 1, 0).unwrap();
        assert!(p.uncertainty.data().iter().all(|&u| u == 0.0));
        assert_eq!(p.sample_maps.len(), 1);
        assert_eq!(p.sample_maps[0], p.argmax_map);
        check_result_invariants(&p);
    }

    #[test]
    fn collapsed_posterior_has_no_uncertainty() {
        let (model, mut bank, image) = setup(10.0);
        let gold = bank.gold();
        bank.latent_mut(gold).unwrap().scale_chol(1e-6);
        let p = predict(&model, &bank, &image, 16, 4).unwrap();
        let max = p.uncertainty.data().iter().cloned().fold(0.0, f32::max);
        assert!(max < 1e-6, "{max}");
        let (model, bank, image) = setup(10.0);
        let p = predict(&model, &bank, &image, 16, 4).unwrap();
        assert!(p.uncertainty.data().iter().any(|&u| u > 1e-3));
        check_result_invariants(&p);
    }

    #[test]
    fn equal_latents_give_equal_maps() {
        let (model, bank, image) = setup(10.0);
        let features = model.extract_features(&image_to_tensor(&image)).unwrap();
        let z: Vec<f32> = bank
            .latent(1)
            .unwrap()
            .mean()
            .iter()
            .map(|&v| v as f32)
            .collect();
        let a = model.segment(&features, &z).unwrap();
        let b = model.segment(&features, &z).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn deterministic_for_a_seed() {
        let (model, bank, image) = setup(10.0);
        let a = simulate_rater(&model, &bank, &image, 1, 8, 21).unwrap();
        let b = simulate_rater(&model, &bank, &image, 1, 8, 21).unwrap();
        assert_eq!(a, b);
        assert!(!a.gold_requested);
        let c = simulate_rater(&model, &bank, &image, 1, 8, 22).unwrap();
        assert_ne!(a.mean_probs, c.mean_probs);
    }

    #[test]
    fn bad_arguments() {
        let (model, bank, image) = setup(1.0);
        assert!(simulate_rater(&model, &bank, &image, 9, 4, 0).is_err());
        assert!(predict(&model, &bank, &image, 0, 0).is_err());
        assert!(blend_raters(&model, &bank, &image, 1, 1, 4, 0).is_err());
        assert!(blend_raters(&model, &bank, &image, 1, 7, 4, 0).is_err());
        let gold = simulate_rater(&model, &bank, &image, bank.gold(), 2, 0).unwrap();
        assert!(gold.gold_requested);
    }

    #[test]
    fn blend_is_the_mean_of_both_raters() {
        let (model, bank, image) = setup(10.0);
        let b = blend_raters(&model, &bank, &image, 0, 2, 4, 9).unwrap();
        check_result_invariants(&b);
        assert_eq!(b.sample_maps.len(), 8);
        let p0 = mixture(&model, &bank, &image, &[(0, derive_seed(&[9, 1]))], 4, 0).unwrap();
        let p2 = mixture(&model, &bank, &image, &[(2, derive_seed(&[9, 2]))], 4, 0).unwrap();
        for ((m, x), y) in b
            .mean_probs
            .data()
            .iter()
            .zip(p0.mean_probs.data())
            .zip(p2.mean_probs.data())
        {
            assert!((m - 0.5 * (x + y)).abs() < 1e-6);
        }
    }

    #[test]
    fn self_blend_matches_a_larger_prediction() {
        let (model, bank, image) = setup(10.0);
        let blend = mixture(&model, &bank, &image, &[(1, 100), (1, 200)], 64, 0).unwrap();
        let single = simulate_rater(&model, &bank, &image, 1, 128, 300).unwrap();
        let d = mean_abs_diff(&blend.mean_probs, &single.mean_probs);
        assert!(d < 0.05, "{d}");
    }

    #[test]
    fn more_samples_change_little() {
        let (model, bank, image) = setup(10.0);
        let few = predict(&model, &bank, &image, 8, 1).unwrap();
        let many = predict(&model, &bank, &image, 64, 2).unwrap();
        let d = mean_abs_diff(&few.mean_probs, &many.mean_probs);
        assert!(d < 0.05, "{d}");
        // the samples really do disagree, so the check is not vacuous
        assert!(many.sample_maps.iter().any(|m| *m != many.sample_maps[0]));
    }

    #[test]
    fn uncertainty_gray_levels() {
        let (model, bank, image) = setup(10.0);
        let mut p = predict(&model, &bank, &image, 2, 0).unwrap();
        p.uncertainty.data_mut()[0] = 0.0;
        p.uncertainty.data_mut()[1] = 1.0;
        let g = p.uncertainty_map();
        assert_eq!((g.data[0], g.data[1]), (255, 0));
    }
}
