//! Agreement tables, latent summaries and prediction overlays.

use std::fmt::Write as _;

use pionono::data::pnm::save_image;
use pionono::data::{self, derive_seed, ClassMap, RgbImage};
use pionono::inference::{predict, simulate_rater};
use pionono::metrics::{evaluate, Aggregation, IGNORE_LABEL};
use pionono::trainer::load_checkpoint;
use pionono::Error;

use crate::commands::{distance_csv, ensure_outside, rater_name};
use crate::manifest::{create_dir, write_atomic, RunManifest};
use crate::{CliResult, ReportArgs};

/// Weight of the class colour when blended over the input image.
pub const OVERLAY_ALPHA: f64 = 0.5;

/// Class 0 green, 1 yellow, 2 orange, 3 red; further classes cycle through the tail.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 170, 0],
    [255, 220, 0],
    [255, 140, 0],
    [220, 0, 0],
    [0, 90, 220],
    [150, 0, 200],
    [0, 200, 200],
    [120, 120, 120],
];

pub fn class_rgb(class: u8) -> [u8; 3] {
    PALETTE[class as usize % PALETTE.len()]
}

/// Blends each pixel's class colour over the image at [`OVERLAY_ALPHA`].
/// Pixels labelled 255 keep the image colour.
pub fn overlay(img: &RgbImage, map: &ClassMap) -> RgbImage {
    let data = img
        .data
        .chunks_exact(3)
        .zip(&map.data)
        .flat_map(|(px, &class)| {
            let color = if class == IGNORE_LABEL {
                None
            } else {
                Some(class_rgb(class))
            };
            (0..3).map(move |ch| match color {
                Some(c) => ((1.0 - OVERLAY_ALPHA) * px[ch] as f64 + OVERLAY_ALPHA * c[ch] as f64)
                    .round() as u8,
                None => px[ch],
            })
        })
        .collect();
    RgbImage {
        width: img.width,
        height: img.height,
        data,
    }
}

/// Pooled unweighted kappa over the images where both sides exist; `None`
/// without any such image.
fn pooled_kappa(pairs: &[(&ClassMap, &ClassMap)], num_classes: usize) -> CliResult<Option<f64>> {
    if pairs.is_empty() {
        return Ok(None);
    }
    Ok(Some(
        evaluate(pairs, num_classes, Aggregation::Pooled)?.kappa_unweighted,
    ))
}

fn cell(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.6}"))
}

fn mean(vals: &[f64]) -> Option<f64> {
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn run(a: ReportArgs, argv: &[String]) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let ds = data::load_dataset(&a.data)?;
    ensure_outside(&a.out, &a.data)?;
    let (model, bank) = (&ckpt.model, &ckpt.bank);
    if bank.num_raters() != ds.num_raters {
        return Err(Error::InvalidArgument(format!(
            "checkpoint has {} raters but {} has {}",
            bank.num_raters(),
            a.data.display(),
            ds.num_raters
        ))
        .into());
    }
    if model.num_classes() != ds.num_classes {
        return Err(Error::InvalidArgument(format!(
            "checkpoint predicts {} classes but {} has {}",
            model.num_classes(),
            a.data.display(),
            ds.num_classes
        ))
        .into());
    }
    if a.gold {
        if let Some(i) = (0..ds.len()).find(|&i| ds.gold[i].is_none()) {
            return Err(Error::format(
                a.data.join("gold").join(format!("{}.pgm", ds.ids[i])),
                "gold metrics requested but the gold mask is missing",
            )
            .into());
        }
    }
    create_dir(&a.out)?;
    create_dir(&a.out.join("overlays"))?;
    let c = ds.num_classes;
    let m_raters = ds.num_raters;
    let gold = bank.gold();

    // simulations of every rater and the gold prediction, one seed stream per (image, slot)
    let mut sims: Vec<Vec<ClassMap>> = vec![Vec::with_capacity(ds.len()); m_raters];
    let mut preds = Vec::with_capacity(ds.len());
    for i in 0..ds.len() {
        for (r, sim) in sims.iter_mut().enumerate() {
            let seed = derive_seed(&[a.seed, i as u64, r as u64]);
            sim.push(simulate_rater(model, bank, &ds.images[i], r, a.samples, seed)?.argmax_map);
        }
        let seed = derive_seed(&[a.seed, i as u64, gold as u64]);
        let pred = predict(model, bank, &ds.images[i], a.samples, seed)?.argmax_map;
        save_image(
            &overlay(&ds.images[i], &pred),
            &a.out.join("overlays").join(format!("{}.ppm", ds.ids[i])),
        )?;
        preds.push(pred);
    }

    let mut agreement =
        String::from("rater,kappa_vs_other_raters,kappa_sim_vs_self,kappa_sim_vs_other_raters\n");
    for r in 0..m_raters {
        let mut vs_others = Vec::new();
        let mut sim_vs_others = Vec::new();
        for o in (0..m_raters).filter(|&o| o != r) {
            let both: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.masks[i][r].is_some() && ds.masks[i][o].is_some())
                .collect();
            let human: Vec<_> = both
                .iter()
                .map(|&i| {
                    (
                        ds.masks[i][r].as_ref().unwrap(),
                        ds.masks[i][o].as_ref().unwrap(),
                    )
                })
                .collect();
            vs_others.extend(pooled_kappa(&human, c)?);
            let sim: Vec<_> = (0..ds.len())
                .filter_map(|i| ds.masks[i][o].as_ref().map(|m| (&sims[r][i], m)))
                .collect();
            sim_vs_others.extend(pooled_kappa(&sim, c)?);
        }
        let own: Vec<_> = (0..ds.len())
            .filter_map(|i| ds.masks[i][r].as_ref().map(|m| (&sims[r][i], m)))
            .collect();
        let _ = writeln!(
            agreement,
            "{},{},{},{}",
            rater_name(r, gold),
            cell(mean(&vs_others)),
            cell(pooled_kappa(&own, c)?),
            cell(mean(&sim_vs_others))
        );
    }
    if a.gold {
        let golds: Vec<&ClassMap> = ds.gold.iter().map(|g| g.as_ref().unwrap()).collect();
        let mut vs_raters = Vec::new();
        let mut pred_vs_raters = Vec::new();
        for r in 0..m_raters {
            let have: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.masks[i][r].is_some())
                .collect();
            let human: Vec<_> = have
                .iter()
                .map(|&i| (golds[i], ds.masks[i][r].as_ref().unwrap()))
                .collect();
            vs_raters.extend(pooled_kappa(&human, c)?);
            let model_pairs: Vec<_> = have
                .iter()
                .map(|&i| (&preds[i], ds.masks[i][r].as_ref().unwrap()))
                .collect();
            pred_vs_raters.extend(pooled_kappa(&model_pairs, c)?);
        }
        let own: Vec<_> = preds.iter().zip(golds.iter().copied()).collect();
        let _ = writeln!(
            agreement,
            "gold,{},{},{}",
            cell(mean(&vs_raters)),
            cell(pooled_kappa(&own, c)?),
            cell(mean(&pred_vs_raters))
        );
    }
    let agreement_path = a.out.join("agreement.csv");
    write_atomic(&agreement_path, agreement.as_bytes())?;

    let dist_path = a.out.join("latent_distances.csv");
    write_atomic(&dist_path, distance_csv(bank)?.as_bytes())?;

    let d = bank.dim();
    let mut projection = String::from("rater,mu_0,mu_1,sigma_00,sigma_01,sigma_11\n");
    for r in 0..=bank.gold() {
        let lat = bank.latent(r)?;
        let mu = lat.mean();
        let cov = lat.covariance();
        let at = |i: usize, j: usize| if i < d && j < d { cov[i * d + j] } else { 0.0 };
        let _ = writeln!(
            projection,
            "{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            rater_name(r, gold),
            mu[0],
            mu.get(1).copied().unwrap_or(0.0),
            at(0, 0),
            at(0, 1),
            at(1, 1)
        );
    }
    let projection_path = a.out.join("latent_projection.csv");
    write_atomic(&projection_path, projection.as_bytes())?;
    print!("{agreement}");
    eprintln!(
        "report for {} images written to {}",
        ds.len(),
        a.out.display()
    );

    let mut m = RunManifest::new("report", argv);
    m.seed = Some(a.seed);
    m.config = vec![
        ("samples".into(), a.samples.to_string()),
        ("gold".into(), a.gold.to_string()),
        ("overlay_alpha".into(), OVERLAY_ALPHA.to_string()),
    ];
    m.input("checkpoint", &a.checkpoint)
        .hash("checkpoint", &a.checkpoint)
        .input("data", &a.data);
    for (label, path) in [
        ("agreement", &agreement_path),
        ("latent_distances", &dist_path),
        ("latent_projection", &projection_path),
    ] {
        m.output(label, path).hash(label, path);
    }
    m.output("overlays", &a.out.join("overlays"));
    m.write(&a.out)?;
    Ok(())
}
