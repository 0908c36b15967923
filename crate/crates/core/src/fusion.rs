//! Label fusion baselines: majority vote and multi-class STAPLE.
//!
//! Pixels holding [`IGNORE_LABEL`] are unobserved for that rater. A pixel no
//! rater observed is left at [`IGNORE_LABEL`] in fused maps and takes no
//! part in the estimation.

use crate::data::ClassMap;
use crate::error::{Error, Result};
use crate::metrics::IGNORE_LABEL;
use crate::tensor::Tensor;

pub const DEFAULT_MAX_ITERS: usize = 50;
pub const DEFAULT_TOL: f64 = 1e-6;

/// Pseudo-count added to every confusion entry in the M-step.
pub const LAPLACE: f64 = 1e-6;

/// Weight of the majority vote in the initial posterior.
const INIT_CONFIDENCE: f64 = 0.9;

/// Per-pixel modal class; ties go to the smallest class.
pub fn majority_vote(masks: &[&ClassMap], num_classes: usize) -> Result<ClassMap> {
    let (w, h) = check_shapes(masks)?;
    let mut votes = vec![0u32; num_classes];
    let mut data = Vec::with_capacity(w * h);
    for px in 0..w * h {
        votes.iter_mut().for_each(|v| *v = 0);
        for m in masks {
            let v = m.data[px];
            if v == IGNORE_LABEL {
                continue;
            }
            check_class(v, num_classes)?;
            votes[v as usize] += 1;
        }
        data.push(modal(&votes).map_or(IGNORE_LABEL, |c| c as u8));
    }
    Ok(ClassMap {
        width: w,
        height: h,
        data,
    })
}

fn modal(votes: &[u32]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (c, &v) in votes.iter().enumerate() {
        if v > 0 && best.map_or(true, |b| v > votes[b]) {
            best = Some(c);
        }
    }
    best
}

fn check_shapes(masks: &[&ClassMap]) -> Result<(usize, usize)> {
    let first = masks
        .first()
        .ok_or_else(|| Error::InvalidArgument("need at least one mask".into()))?;
    for m in masks {
        if (m.width, m.height) != (first.width, first.height) {
            return Err(Error::shape(
                "fusion",
                format!(
                    "masks are {}x{} and {}x{}",
                    first.width, first.height, m.width, m.height
                ),
            ));
        }
    }
    Ok((first.width, first.height))
}

fn check_class(v: u8, num_classes: usize) -> Result<()> {
    if v as usize >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "class id {v} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

/// Rater performance as confusion matrices plus a class prior.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionModel {
    pub num_classes: usize,
    /// `theta[r][true * C + observed]`, rows sum to 1.
    pub theta: Vec<Vec<f64>>,
    pub prior: Vec<f64>,
}

impl ConfusionModel {
    pub fn num_raters(&self) -> usize {
        self.theta.len()
    }

    pub fn get(&self, r: usize, truth: usize, observed: usize) -> f64 {
        self.theta[r][truth * self.num_classes + observed]
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StapleOptions {
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for StapleOptions {
    fn default() -> Self {
        StapleOptions {
            max_iters: DEFAULT_MAX_ITERS,
            tol: DEFAULT_TOL,
        }
    }
}

/// Fusion of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedImage {
    /// `[C, H, W]` posterior over the true class; zero at unobserved pixels.
    pub posterior: Tensor<f64>,
    pub fused: ClassMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Staple {
    pub images: Vec<FusedImage>,
    pub model: ConfusionModel,
    /// Observed-data log-likelihood at each E-step.
    pub log_likelihood: Vec<f64>,
    pub converged: bool,
}

/// STAPLE on a single image; every rater must observe at least one pixel.
pub fn staple_fuse(masks: &[&ClassMap], num_classes: usize, opts: StapleOptions) -> Result<Staple> {
    let maps: Vec<Option<&ClassMap>> = masks.iter().map(|&m| Some(m)).collect();
    staple_fuse_many(&[maps], num_classes, opts)
}

/// STAPLE over several images with one confusion model shared by all of
/// them. `images[i][r]` is rater `r`'s mask of image `i`, if any.
pub fn staple_fuse_many(
    images: &[Vec<Option<&ClassMap>>],
    num_classes: usize,
    opts: StapleOptions,
) -> Result<Staple> {
    let c = num_classes;
    if c < 2 {
        return Err(Error::InvalidArgument("need at least 2 classes".into()));
    }
    let num_raters = images.first().map_or(0, |v| v.len());
    if num_raters < 2 {
        return Err(Error::InvalidArgument(
            "STAPLE needs at least 2 raters".into(),
        ));
    }
    // flatten every observed pixel into rows of R labels
    let mut obs: Vec<u8> = vec![];
    let mut layout = vec![];
    let mut seen = vec![0usize; num_raters];
    for (i, maps) in images.iter().enumerate() {
        if maps.len() != num_raters {
            return Err(Error::InvalidArgument(format!(
                "image {i} has {} rater slots, expected {num_raters}",
                maps.len()
            )));
        }
        let present: Vec<&ClassMap> = maps.iter().flatten().copied().collect();
        let (w, h) = check_shapes(&present).map_err(|e| match e {
            Error::InvalidArgument(_) => Error::InvalidArgument(format!("image {i} has no masks")),
            other => other,
        })?;
        let mut rows = vec![];
        for px in 0..w * h {
            let labels: Vec<u8> = maps
                .iter()
                .map(|m| m.map_or(IGNORE_LABEL, |m| m.data[px]))
                .collect();
            if labels.iter().all(|&v| v == IGNORE_LABEL) {
                continue;
            }
            for (r, &v) in labels.iter().enumerate() {
                if v != IGNORE_LABEL {
                    check_class(v, c)?;
                    seen[r] += 1;
                }
            }
            rows.push(px);
            obs.extend(labels);
        }
        layout.push((w, h, rows));
    }
    if let Some(r) = seen.iter().position(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "rater {r} has no annotated pixel"
        )));
    }
    let n = obs.len() / num_raters;

    // initial posterior: majority vote softened towards uniform
    let mut post = vec![0f64; n * c];
    let mut votes = vec![0u32; c];
    for p in 0..n {
        votes.iter_mut().for_each(|v| *v = 0);
        for &v in &obs[p * num_raters..(p + 1) * num_raters] {
            if v != IGNORE_LABEL {
                votes[v as usize] += 1;
            }
        }
        let mv = modal(&votes).expect("observed pixel");
        for k in 0..c {
            post[p * c + k] =
                (1.0 - INIT_CONFIDENCE) / c as f64 + if k == mv { INIT_CONFIDENCE } else { 0.0 };
        }
    }
    let mut model = m_step(&obs, &post, num_raters, c);
    let mut log_likelihood = vec![];
    let mut converged = false;
    for _ in 0..opts.max_iters {
        log_likelihood.push(e_step(&obs, &model, &mut post));
        let next = m_step(&obs, &post, num_raters, c);
        let delta = model
            .theta
            .iter()
            .flatten()
            .zip(next.theta.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        model = next;
        if delta < opts.tol {
            converged = true;
            break;
        }
    }
    // final posterior under the returned model
    e_step(&obs, &model, &mut post);

    let mut out = Vec::with_capacity(layout.len());
    let mut p = 0;
    for (w, h, rows) in layout {
        let plane = w * h;
        let mut posterior = vec![0f64; c * plane];
        let mut fused = vec![IGNORE_LABEL; plane];
        for px in rows {
            let row = &post[p * c..(p + 1) * c];
            let mut best = 0;
            for k in 0..c {
                posterior[k * plane + px] = row[k];
                if row[k] > row[best] {
                    best = k;
                }
            }
            fused[px] = best as u8;
            p += 1;
        }
        out.push(FusedImage {
            posterior: Tensor::from_parts(vec![c, h, w], posterior),
            fused: ClassMap {
                width: w,
                height: h,
                data: fused,
            },
        });
    }
    Ok(Staple {
        images: out,
        model,
        log_likelihood,
        converged,
    })
}

/// Fills `post` with normalized posteriors; returns the observed-data
/// log-likelihood under `model`.
fn e_step(obs: &[u8], model: &ConfusionModel, post: &mut [f64]) -> f64 {
    let (c, nr) = (model.num_classes, model.num_raters());
    let mut ll = 0.0;
    for (p, labels) in obs.chunks(nr).enumerate() {
        let row = &mut post[p * c..(p + 1) * c];
        for (k, slot) in row.iter_mut().enumerate() {
            let mut v = model.prior[k];
            for (r, &s) in labels.iter().enumerate() {
                if s != IGNORE_LABEL {
                    v *= model.get(r, k, s as usize);
                }
            }
            *slot = v;
        }
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= z);
        ll += z.ln();
    }
    ll
}

fn m_step(obs: &[u8], post: &[f64], nr: usize, c: usize) -> ConfusionModel {
    let mut counts = vec![vec![LAPLACE; c * c]; nr];
    let mut prior = vec![0f64; c];
    for (p, labels) in obs.chunks(nr).enumerate() {
        let row = &post[p * c..(p + 1) * c];
        for (k, &w) in row.iter().enumerate() {
            prior[k] += w;
            for (r, &s) in labels.iter().enumerate() {
                if s != IGNORE_LABEL {
                    counts[r][k * c + s as usize] += w;
                }
            }
        }
    }
    for table in &mut counts {
        for row in table.chunks_mut(c) {
            let z: f64 = row.iter().sum();
            row.iter_mut().for_each(|v| *v /= z);
        }
    }
    let total: f64 = prior.iter().sum();
    prior.iter_mut().for_each(|v| *v /= total);
    ConfusionModel {
        num_classes: c,
        theta: counts,
        prior,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn map(w: usize, h: usize, data: Vec<u8>) -> ClassMap {
        ClassMap::new(w, h, data).unwrap()
    }

    #[test]
    fn majority_examples() {
        let a = map(3, 1, vec![0, 2, 1]);
        let b = map(3, 1, vec![0, 3, 1]);
        let c = map(3, 1, vec![1, 255, 255]);
        assert_eq!(majority_vote(&[&a, &a, &a], 4).unwrap(), a);
        assert_eq!(majority_vote(&[&a, &a, &b], 4).unwrap(), a);
        // 1-1 tie between 2 and 3 goes to 2; pixel 2 is seen by two raters only
        assert_eq!(majority_vote(&[&a, &b, &c], 4).unwrap().data, vec![0, 2, 1]);
        let blank = map(3, 1, vec![255; 3]);
        assert_eq!(majority_vote(&[&blank], 4).unwrap(), blank);
        assert!(majority_vote(&[&a, &map(1, 1, vec![0])], 4).is_err());
        assert!(majority_vote(&[], 4).is_err());
        assert!(majority_vote(&[&b], 3).is_err());
    }

    fn assert_well_formed(s: &Staple) {
        for th in &s.model.theta {
            for row in th.chunks(s.model.num_classes) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        assert!((s.model.prior.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        for pair in s.log_likelihood.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-9, "{} -> {}", pair[0], pair[1]);
        }
        for img in &s.images {
            let c = s.model.num_classes;
            let plane = img.fused.data.len();
            for px in 0..plane {
                let sum: f64 = (0..c).map(|k| img.posterior.data()[k * plane + px]).sum();
                if img.fused.data[px] != IGNORE_LABEL {
                    assert!((sum - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn identical_raters_are_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m = map(16, 16, (0..256).map(|_| rng.gen_range(0..3)).collect());
        let s = staple_fuse(&[&m, &m, &m], 3, StapleOptions::default()).unwrap();
        assert_eq!(s.images[0].fused, m);
        for r in 0..3 {
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        assert!(s.model.get(r, a, b) < 1e-3);
                    }
                }
            }
        }
        assert_well_formed(&s);
    }

    /// A blocky 4-class 64x64 map and `raters` copies of it, each pixel kept
    /// with probability `diag` and otherwise replaced by a uniform other class.
    fn planted(seed: u64, raters: usize, diag: f64) -> (ClassMap, Vec<ClassMap>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blocks: Vec<u8> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let truth = map(
            64,
            64,
            (0..4096)
                .map(|p| blocks[(p / 64 / 8) * 8 + (p % 64) / 8])
                .collect(),
        );
        let obs = (0..raters)
            .map(|_| {
                let data = truth
                    .data
                    .iter()
                    .map(|&c| {
                        if rng.gen_bool(diag) {
                            c
                        } else {
                            let k = rng.gen_range(0..3);
                            (0..4u8).filter(|&o| o != c).nth(k).unwrap()
                        }
                    })
                    .collect();
                map(64, 64, data)
            })
            .collect();
        (truth, obs)
    }

    #[test]
    fn recovers_planted_confusions() {
        let (truth, obs) = planted(7, 5, 0.85);
        let maps: Vec<&ClassMap> = obs.iter().collect();
        let s = staple_fuse(&maps, 4, StapleOptions::default()).unwrap();
        for r in 0..5 {
            for a in 0..4 {
                for b in 0..4 {
                    let want = if a == b { 0.85 } else { 0.05 };
                    let got = s.model.get(r, a, b);
                    assert!((got - want).abs() < 0.05, "rater {r} [{a}][{b}] = {got}");
                }
            }
        }
        let correct = s.images[0]
            .fused
            .data
            .iter()
            .zip(&truth.data)
            .filter(|(a, b)| a == b)
            .count();
        assert!(correct as f64 / 4096.0 > 0.95);
        assert_well_formed(&s);
    }

    #[test]
    fn two_raters_in_total_disagreement() {
        let a = map(4, 4, (0..16).map(|i| (i % 3 == 0) as u8).collect());
        let b = map(4, 4, a.data.iter().map(|&v| 1 - v).collect());
        let first = staple_fuse(&[&a, &b], 2, StapleOptions::default()).unwrap();
        let again = staple_fuse(&[&a, &b], 2, StapleOptions::default()).unwrap();
        assert_eq!(first, again);
        // every pixel is a 1-1 tie, so the majority start is all class 0
        assert_eq!(first.images[0].fused.data, vec![0; 16]);
        assert_well_formed(&first);
        // so when one rater marks everything 0, the fusion follows that rater
        let zeros = map(4, 4, vec![0; 16]);
        let ones = map(4, 4, vec![1; 16]);
        for order in [[&zeros, &ones], [&ones, &zeros]] {
            let s = staple_fuse(&order, 2, StapleOptions::default()).unwrap();
            assert_eq!(s.images[0].fused, zeros);
            assert_well_formed(&s);
        }
    }

    #[test]
    fn sparse_and_missing_annotations() {
        let t = map(4, 1, vec![0, 1, 1, 0]);
        let partial = map(4, 1, vec![0, 255, 1, 255]);
        let blank = map(4, 1, vec![255; 4]);
        let s = staple_fuse_many(
            &[
                vec![Some(&t), Some(&partial), None],
                vec![Some(&blank), Some(&blank), Some(&t)],
            ],
            2,
            StapleOptions::default(),
        )
        .unwrap();
        assert_eq!(s.images.len(), 2);
        assert_eq!(s.images[0].fused, t);
        assert_eq!(s.images[1].fused, t);
        assert_well_formed(&s);
        assert!(staple_fuse(&[&t, &blank], 2, StapleOptions::default()).is_err());
        assert!(staple_fuse(&[&t], 2, StapleOptions::default()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn em_invariants_and_rater_order(
            seed in 0u64..1000,
            raters in 2usize..5,
            diag in 0.5f64..0.95,
            rotate in 1usize..4,
        ) {
            let (_, obs) = planted(seed, raters, diag);
            let maps: Vec<&ClassMap> = obs.iter().collect();
            let s = staple_fuse(&maps, 4, StapleOptions::default()).unwrap();
            assert_well_formed(&s);
            let mut permuted = maps.clone();
            permuted.rotate_left(rotate % raters);
            let p = staple_fuse(&permuted, 4, StapleOptions::default()).unwrap();
            prop_assert_eq!(&s.images[0].fused, &p.images[0].fused);
            for (x, y) in s.images[0].posterior.data().iter().zip(p.images[0].posterior.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            for r in 0..raters {
                let q = (r + raters - rotate % raters) % raters;
                for (x, y) in s.model.theta[r].iter().zip(&p.model.theta[q]) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}
