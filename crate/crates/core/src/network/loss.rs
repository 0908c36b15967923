//! Likelihood losses over class-probability maps.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Label value marking unannotated pixels.
pub const IGNORE_LABEL: u8 = 255;

/// Which likelihood term drives training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LossKind {
    #[default]
    Dice,
    CrossEntropy,
}

impl LossKind {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, probs: Var, target: &Tensor<T>) -> Result<Var> {
        match self {
            LossKind::Dice => g.generalized_dice(probs, target),
            LossKind::CrossEntropy => g.cross_entropy(probs, target),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LossKind::Dice => "dice",
            LossKind::CrossEntropy => "cross_entropy",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dice" => Ok(LossKind::Dice),
            "cross_entropy" | "ce" => Ok(LossKind::CrossEntropy),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected dice or cross_entropy)"
            ))),
        }
    }
}

/// One-hot encodes a `[H*W]` label map into `[1, C, H, W]`. Pixels labelled
/// [`IGNORE_LABEL`] become all-zero columns.
pub fn one_hot<T: Scalar>(
    labels: &[u8],
    num_classes: usize,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    if labels.len() != h * w {
        return Err(Error::shape(
            "one_hot",
            format!("{} labels for a {h}x{w} map", labels.len()),
        ));
    }
    let plane = h * w;
    let mut data = vec![T::zero(); num_classes * plane];
    for (px, &l) in labels.iter().enumerate() {
        if l == IGNORE_LABEL {
            continue;
        }
        if l as usize >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id {l} at pixel {px} is out of range for {num_classes} classes"
            )));
        }
        data[l as usize * plane + px] = T::one();
    }
    Ok(Tensor::from_parts(vec![1, num_classes, h, w], data))
}

/// Generalized dice loss of a probability map against a one-hot target.
pub fn generalized_dice_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = g.generalized_dice(p, target)?;
    Ok(g.value(l).item().as_f64())
}

/// Mean cross-entropy of a probability map against a one-hot target.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let l = g.cross_entropy(p, target)?;
    Ok(g.value(l).item().as_f64())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs_from(classes: usize, h: usize, w: usize, per_pixel: &[Vec<f64>]) -> Tensor<f64> {
        let plane = h * w;
        let mut data = vec![0.0; classes * plane];
        for (px, dist) in per_pixel.iter().enumerate() {
            for (c, &v) in dist.iter().enumerate() {
                data[c * plane + px] = v;
            }
        }
        Tensor::new(vec![1, classes, h, w], data).unwrap()
    }

    #[test]
    fn perfect_overlap_is_zero() {
        let labels = [0u8, 1, 2, 2, 1, 0];
        let t: Tensor<f64> = one_hot(&labels, 3, 2, 3).unwrap();
        assert!(generalized_dice_loss(&t, &t).unwrap().abs() < 1e-12);
        assert!(cross_entropy_loss(&t, &t).unwrap().abs() < 1e-12);
    }

    #[test]
    fn disjoint_support_is_one() {
        let target: Tensor<f64> = one_hot(&[0, 0, 1, 1], 2, 2, 2).unwrap();
        let pred: Tensor<f64> = one_hot(&[1, 1, 0, 0], 2, 2, 2).unwrap();
        assert!((generalized_dice_loss(&pred, &target).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_two_class_case() {
        // target [0,1,1,1]; class-1 probabilities 0.2, 0.6, 0.9, 0.7
        let target: Tensor<f64> = one_hot(&[0, 1, 1, 1], 2, 2, 2).unwrap();
        let p1 = [0.2, 0.6, 0.9, 0.7];
        let probs = probs_from(
            2,
            2,
            2,
            &p1.iter().map(|&p| vec![1.0 - p, p]).collect::<Vec<_>>(),
        );
        let w0 = 1.0 / (1e-6 + 1.0);
        let w1 = 1.0 / (1e-6 + 9.0);
        let inter = w0 * 0.8 + w1 * (0.6 + 0.9 + 0.7);
        let union = w0 * (1.6 + 1.0) + w1 * (2.4 + 3.0);
        let expected = 1.0 - 2.0 * inter / union;
        let got = generalized_dice_loss(&probs, &target).unwrap();
        assert!((got - expected).abs() < 1e-6, "{got} vs {expected}");
        assert!((got - 0.347_222_195).abs() < 1e-6, "{got}");
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let target: Tensor<f64> = one_hot(&[0, 1, 2, 3], 4, 2, 2).unwrap();
        let probs = Tensor::full(&[1, 4, 2, 2], 0.25);
        let v = cross_entropy_loss(&probs, &target).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!((v - 1.3863).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let target: Tensor<f64> = one_hot(&[0, 1, 2, 1, 0, 2], 3, 2, 3).unwrap();
        let logits = Tensor::new(
            vec![1, 3, 2, 3],
            (0..18).map(|i| ((i * 7) % 11) as f64 * 0.3 - 1.5).collect(),
        )
        .unwrap();
        let eval = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let p = g.softmax_channels(v).unwrap();
            let l = g.cross_entropy(p, &target).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.get(v).cloned())
        };
        let (_, analytic) = eval(&logits);
        let analytic = analytic.unwrap();
        let h = 1e-3;
        for e in 0..logits.numel() {
            let mut plus = logits.clone();
            plus.data_mut()[e] += h;
            let mut minus = logits.clone();
            minus.data_mut()[e] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic.data()[e];
            assert!((a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-3);
        }
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let target: Tensor<f64> = one_hot(&[0, 1, 255, 1, 0, 2], 3, 2, 3).unwrap();
        let logits = Tensor::new(
            vec![1, 3, 2, 3],
            (0..18)
                .map(|i| ((i * 5) % 13) as f64 * 0.25 - 1.2)
                .collect(),
        )
        .unwrap();
        let eval = |x: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new();
            let v = g.param(x.clone());
            let p = g.softmax_channels(v).unwrap();
            let l = g.generalized_dice(p, &target).unwrap();
            let grads = g.backward(l).unwrap();
            (g.value(l).item(), grads.get(v).cloned())
        };
        let analytic = eval(&logits).1.unwrap();
        let h = 1e-3;
        for e in 0..logits.numel() {
            let mut plus = logits.clone();
            plus.data_mut()[e] += h;
            let mut minus = logits.clone();
            minus.data_mut()[e] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic.data()[e];
            assert!(
                (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8) < 1e-3,
                "entry {e}: {a} vs {numeric}"
            );
        }
        // the ignored pixel (index 2) receives no gradient
        for c in 0..3 {
            assert_eq!(analytic.data()[c * 6 + 2], 0.0);
        }
    }

    #[test]
    fn absent_class_has_no_weight() {
        // classes 0 and 1 have volume 2, class 2 is absent; the mass on class 2
        // only counts through what it takes from the present classes:
        // 1 - 2 * (1.3 + 1.3) / (3.6 + 3.6) = 5/18
        let target: Tensor<f64> = one_hot(&[0, 0, 1, 1], 3, 2, 2).unwrap();
        let probs = probs_from(
            3,
            2,
            2,
            &[
                vec![0.7, 0.1, 0.2],
                vec![0.6, 0.2, 0.2],
                vec![0.1, 0.8, 0.1],
                vec![0.2, 0.5, 0.3],
            ],
        );
        let got = generalized_dice_loss(&probs, &target).unwrap();
        assert!((got - 5.0 / 18.0).abs() < 1e-9, "{got}");

        // batch of that element and a perfect one averages to 5/36
        let mut both = probs.data().to_vec();
        both.extend_from_slice(target.data());
        let mut targets = target.data().to_vec();
        targets.extend_from_slice(target.data());
        let probs2 = Tensor::new(vec![2, 3, 2, 2], both).unwrap();
        let target2 = Tensor::new(vec![2, 3, 2, 2], targets).unwrap();
        let got = generalized_dice_loss(&probs2, &target2).unwrap();
        assert!((got - 5.0 / 36.0).abs() < 1e-9, "{got}");
    }

    #[test]
    fn rejects_non_one_hot_targets() {
        let probs = Tensor::<f64>::full(&[1, 2, 1, 2], 0.5);
        let bad = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 0.5, 0.0, 0.5]).unwrap();
        assert!(generalized_dice_loss(&probs, &bad).is_err());
        let double = Tensor::new(vec![1, 2, 1, 2], vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        assert!(cross_entropy_loss(&probs, &double).is_err());
        assert!(one_hot::<f64>(&[0, 3], 3, 1, 2).is_err());
    }

    #[test]
    fn ignored_pixels_do_not_count() {
        let target: Tensor<f64> = one_hot(&[0, 1, 255, 255], 2, 2, 2).unwrap();
        let mut probs = probs_from(
            2,
            2,
            2,
            &[
                vec![1.0, 0.0],
                vec![0.0, 1.0],
                vec![0.5, 0.5],
                vec![0.0, 1.0],
            ],
        );
        assert!(generalized_dice_loss(&probs, &target).unwrap().abs() < 1e-12);
        probs.data_mut()[3] = 0.9;
        assert!(generalized_dice_loss(&probs, &target).unwrap().abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn dice_is_invariant_under_joint_relabelling(
            labels in proptest::collection::vec(0u8..3, 16),
            raw in proptest::collection::vec(0.01f64..1.0, 48),
            perm_idx in 0usize..6,
        ) {
            let perms = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
            let perm = perms[perm_idx];
            let per_pixel: Vec<Vec<f64>> = (0..16)
                .map(|px| {
                    let s: f64 = (0..3).map(|c| raw[px * 3 + c]).sum();
                    (0..3).map(|c| raw[px * 3 + c] / s).collect()
                })
                .collect();
            let probs = probs_from(3, 4, 4, &per_pixel);
            let target: Tensor<f64> = one_hot(&labels, 3, 4, 4).unwrap();
            let relabelled: Vec<u8> = labels.iter().map(|&l| perm[l as usize] as u8).collect();
            let permuted_pixels: Vec<Vec<f64>> = per_pixel
                .iter()
                .map(|d| {
                    let mut out = vec![0.0; 3];
                    for c in 0..3 {
                        out[perm[c]] = d[c];
                    }
                    out
                })
                .collect();
            let a = generalized_dice_loss(&probs, &target).unwrap();
            let b = generalized_dice_loss(
                &probs_from(3, 4, 4, &permuted_pixels),
                &one_hot(&relabelled, 3, 4, 4).unwrap(),
            ).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }
}
