//! Generated rater masks agree with the archetype parameters that produced
//! them, counted directly over the data.

use pionono::data::synth::{self, ArchetypeKind, RaterArchetype};
use pionono::data::{DatasetConfig, MultiRaterDataset};

const IGNORE: u8 = 255;

/// Row-normalized counts: gold class (rows) vs rater label (columns, last =
/// unannotated).
fn empirical_confusion(ds: &MultiRaterDataset, rater: usize) -> Vec<Vec<f64>> {
    let c = ds.num_classes;
    let mut counts = vec![vec![0u64; c + 1]; c];
    for i in 0..ds.len() {
        let (Some(gold), Some(mask)) = (&ds.gold[i], &ds.masks[i][rater]) else {
            continue;
        };
        for (&g, &m) in gold.data.iter().zip(&mask.data) {
            let col = if m == IGNORE { c } else { m as usize };
            counts[g as usize][col] += 1;
        }
    }
    counts
        .iter()
        .map(|row| {
            let n: u64 = row.iter().sum();
            row.iter().map(|&v| v as f64 / n.max(1) as f64).collect()
        })
        .collect()
}

#[test]
fn default_confuser_mostly_relabels_class_two() {
    let cfg = DatasetConfig {
        test: 0,
        seed: 1,
        ..DatasetConfig::default()
    };
    let ds = cfg.generate_split(0).unwrap();
    let m = empirical_confusion(&ds, 2);
    assert!(m[2][3] > 0.5, "confusion[2][3] = {}", m[2][3]);
}

const FAITHFUL: ArchetypeKind = ArchetypeKind::Faithful;
const CONFUSER: ArchetypeKind = ArchetypeKind::Confuser {
    src: 2,
    dst: 3,
    p_confuse: 0.8,
};
const UNDER: ArchetypeKind = ArchetypeKind::UnderSegmenter { p_erase: 0.5 };
const OVER: ArchetypeKind = ArchetypeKind::OverGrader { p_upgrade: 0.3 };

fn check_against_analytic(kinds: &[ArchetypeKind], images: usize, p_apply: f64, seed: u64) {
    let raters: Vec<RaterArchetype> = kinds
        .iter()
        .map(|&kind| RaterArchetype {
            kind,
            jitter_radius: 0,
            p_apply,
        })
        .collect();
    let cfg = DatasetConfig {
        train: images,
        test: 0,
        raters: raters.clone(),
        seed,
        ..DatasetConfig::default()
    };
    let ds = cfg.generate_split(0).unwrap();
    for (r, arch) in raters.iter().enumerate() {
        let emp = empirical_confusion(&ds, r);
        let want = arch.analytic_confusion(ds.num_classes);
        for (a, b) in emp.iter().flatten().zip(want.iter().flatten()) {
            assert!(
                (a - b).abs() < 0.03,
                "rater {r} ({arch}): {emp:?} vs {want:?}"
            );
        }
    }
}

#[test]
fn pixelwise_archetypes_match_analytic_confusion() {
    check_against_analytic(&[FAITHFUL, CONFUSER, OVER], 200, 1.0, 5);
}

#[test]
fn empirical_confusion_converges_to_analytic_with_per_image_firing() {
    // firing (and erasure) is one draw per image or component, so the
    // estimator needs many images
    check_against_analytic(&[FAITHFUL, CONFUSER, UNDER, OVER], 2000, 0.7, 5);
}

#[test]
fn zero_probabilities_make_every_rater_the_gold() {
    let raters =
        synth::parse_raters("faithful@0:0,confuser:2:3:0@0:1,under:0@0:1,over:0@0:1").unwrap();
    let cfg = DatasetConfig {
        train: 20,
        test: 0,
        raters,
        seed: 3,
        ..DatasetConfig::default()
    };
    let ds = cfg.generate_split(0).unwrap();
    for i in 0..ds.len() {
        for r in 0..4 {
            assert_eq!(ds.masks[i][r], ds.gold[i]);
        }
    }
}

#[test]
fn every_archetype_keeps_shape_and_legal_ids() {
    let raters =
        synth::parse_raters("faithful@3:1,confuser:1:2:0.5@3:1,under:0.7@3:1,over:0.9@3:1")
            .unwrap();
    let cfg = DatasetConfig {
        train: 30,
        test: 0,
        raters,
        seed: 8,
        ..DatasetConfig::default()
    };
    let ds = cfg.generate_split(0).unwrap();
    ds.validate().unwrap();
}
