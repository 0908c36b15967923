use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use pionono::data::pnm::{load_image, save_mask};
use pionono::data::{self, derive_seed, ClassMap, DatasetConfig, RgbImage, MANIFEST};
use pionono::fusion::{majority_vote, staple_fuse_many, StapleOptions};
use pionono::inference::{blend_raters, predict as predict_gold, simulate_rater, PredictionResult};
use pionono::metrics::{evaluate, Aggregation, Scores};
use pionono::network::ModelConfig;
use pionono::trainer::{self, load_checkpoint, TrainConfig, FINAL_CHECKPOINT, LOG_FILE};
use pionono::{kv, Error};

use crate::manifest::{create_dir, write_atomic, RunManifest};
use crate::{
    CliError, CliResult, EvalArgs, FuseArgs, GenDataArgs, InspectArgs, SamplingArgs, TrainArgs,
};

/// Keys of a generation manifest that describe the output rather than the settings.
fn is_derived_dataset_key(key: &str) -> bool {
    key.starts_with("rater.") || key.ends_with(".masks_present")
}

pub fn gen_data(a: GenDataArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg = DatasetConfig::default();
    if let Some(path) = &a.config {
        for (k, v) in kv::read(path)? {
            if !is_derived_dataset_key(&k) {
                cfg.set(&k, &v)?;
            }
        }
    }
    let flags: [(&str, Option<String>); 9] = [
        ("seed", a.seed.map(|v| v.to_string())),
        ("train", a.train.map(|v| v.to_string())),
        ("test", a.test.map(|v| v.to_string())),
        ("size", a.size.map(|v| v.to_string())),
        ("classes", a.classes.map(|v| v.to_string())),
        ("max_shapes", a.max_shapes.map(|v| v.to_string())),
        ("noise_sd", a.noise_sd.map(|v| v.to_string())),
        ("coverage", a.coverage.map(|v| v.to_string())),
        ("raters", a.raters),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    create_dir(&a.out)?;
    let summary = data::gen_dataset(&cfg, &a.out)?;
    eprintln!(
        "wrote {} train and {} test images ({} and {} rater masks) to {}",
        cfg.train,
        cfg.test,
        summary.train_masks,
        summary.test_masks,
        a.out.display()
    );

    let mut m = RunManifest::new("gen-data", argv);
    m.seed = Some(cfg.seed);
    m.config = cfg
        .to_manifest(&summary)
        .into_iter()
        .filter(|(k, _)| !is_derived_dataset_key(k))
        .collect();
    if let Some(path) = &a.config {
        m.input("config", path);
    }
    m.output("train", &a.out.join("train"))
        .output("test", &a.out.join("test"))
        .hash("manifest", &a.out.join(MANIFEST));
    m.write(&a.out)?;
    Ok(())
}

pub fn train(a: TrainArgs, argv: &[String]) -> CliResult<()> {
    let mut cfg = TrainConfig::default();
    if let Some(path) = &a.config {
        for (k, v) in kv::read(path)? {
            cfg.set(&k, &v)?;
        }
    }
    let flags: [(&str, Option<String>); 17] = [
        ("epochs", a.epochs.map(|v| v.to_string())),
        ("lr_net", a.lr_net.map(|v| v.to_string())),
        ("lr_latent", a.lr_latent.map(|v| v.to_string())),
        (
            "decay_start_epoch",
            a.decay_start_epoch.map(|v| v.to_string()),
        ),
        ("decay_factor", a.decay_factor.map(|v| v.to_string())),
        ("lambda", a.lambda.map(|v| v.to_string())),
        ("k_train", a.k_train.map(|v| v.to_string())),
        ("batch_size", a.batch_size.map(|v| v.to_string())),
        ("batching", a.batching),
        ("loss", a.loss),
        ("seed", a.seed.map(|v| v.to_string())),
        ("latent_dim", a.latent_dim.map(|v| v.to_string())),
        ("prior_var", a.prior_var.map(|v| v.to_string())),
        ("post_var", a.post_var.map(|v| v.to_string())),
        ("kl_scope", a.kl_scope),
        (
            "checkpoint_every",
            a.checkpoint_every.map(|v| v.to_string()),
        ),
        ("augment", a.augment.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    cfg.validate()?;
    let ds = data::load_dataset(&a.data)?;
    ensure_outside(&a.out, &a.data)?;
    create_dir(&a.out)?;
    let quiet = a.quiet;
    let epochs = cfg.epochs;
    let mut report = |row: &trainer::EpochLog| {
        if !quiet {
            eprintln!(
                "epoch {}/{} loss {:.4} ll {:.4} kl {:.3} lr_net {:.3e}",
                row.epoch + 1,
                epochs,
                row.loss,
                row.ll,
                row.kl,
                row.lr_net
            );
        }
    };
    let out = trainer::train_observed(
        &ds,
        &cfg,
        ModelConfig::DEFAULT_WIDTHS,
        Some(&a.out),
        &mut report,
    )?;

    let mut m = RunManifest::new("train", argv);
    m.seed = Some(cfg.seed);
    m.config = cfg.entries();
    m.input("data", &a.data);
    if let Some(path) = &a.config {
        m.input("config", path);
    }
    let ckpt = out
        .checkpoint
        .unwrap_or_else(|| a.out.join(FINAL_CHECKPOINT));
    m.output("checkpoint", &ckpt)
        .output("log", &a.out.join(LOG_FILE))
        .hash("checkpoint", &ckpt)
        .hash("log", &a.out.join(LOG_FILE));
    if let Some(last) = out.log.last() {
        m.note("final.loss", last.loss)
            .note("final.ll", last.ll)
            .note("final.kl", last.kl);
    }
    m.write(&a.out)?;
    Ok(())
}

/// Rejects an output directory at or below an input directory.
pub fn ensure_outside(out: &Path, input: &Path) -> CliResult<()> {
    let abs = |p: &Path| -> PathBuf {
        let p = if p.is_absolute() {
            p.to_path_buf()
        } else {
            std::env::current_dir().unwrap_or_default().join(p)
        };
        // canonicalize the longest existing prefix so symlinks and `..` compare equal
        let mut existing = p.as_path();
        let mut rest = Vec::new();
        while !existing.exists() {
            match (existing.parent(), existing.file_name()) {
                (Some(parent), Some(name)) => {
                    rest.push(name.to_owned());
                    existing = parent;
                }
                _ => break,
            }
        }
        let mut base = existing
            .canonicalize()
            .unwrap_or_else(|_| existing.to_path_buf());
        base.extend(rest.iter().rev());
        base
    };
    if abs(out).starts_with(abs(input)) {
        return Err(CliError::Usage(format!(
            "output directory {} lies inside input {}; inputs are never modified",
            out.display(),
            input.display()
        )));
    }
    Ok(())
}

/// Images to run inference on: a dataset split or one file.
fn sampling_inputs(a: &SamplingArgs) -> CliResult<Vec<(String, RgbImage)>> {
    match (&a.data, &a.image) {
        (Some(dir), _) => {
            let ds = data::load_dataset(dir)?;
            Ok(ds.ids.into_iter().zip(ds.images).collect())
        }
        (None, Some(path)) => {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::format(path, "file name is not valid UTF-8"))?
                .to_string();
            Ok(vec![(id, load_image(path)?)])
        }
        (None, None) => Err(CliError::Usage(
            "one of --data or --image is required".into(),
        )),
    }
}

/// `predict` when `rater` is `None`, otherwise `simulate` (optionally blended).
pub fn predict(
    a: SamplingArgs,
    rater: Option<(usize, Option<usize>)>,
    argv: &[String],
) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let inputs = sampling_inputs(&a)?;
    if let Some(dir) = a.data.as_ref().or(a.image.as_ref()) {
        ensure_outside(&a.out, dir)?;
    }
    create_dir(&a.out)?;
    if a.save_samples {
        create_dir(&a.out.join("samples"))?;
    }
    let (model, bank) = (&ckpt.model, &ckpt.bank);
    let subcommand = if rater.is_some() {
        "simulate"
    } else {
        "predict"
    };
    let mut gold_requested = false;
    for (i, (id, img)) in inputs.iter().enumerate() {
        let seed = derive_seed(&[a.seed, i as u64]);
        let res: PredictionResult = match rater {
            None => predict_gold(model, bank, img, a.samples, seed)?,
            Some((r, None)) => simulate_rater(model, bank, img, r, a.samples, seed)?,
            Some((r, Some(r2))) => blend_raters(model, bank, img, r, r2, a.samples, seed)?,
        };
        gold_requested |= res.gold_requested;
        save_mask(&res.argmax_map, &a.out.join(format!("{id}.pgm")))?;
        save_mask(
            &res.uncertainty_map(),
            &a.out.join(format!("{id}_uncertainty.pgm")),
        )?;
        if a.save_samples {
            for (k, s) in res.sample_maps.iter().enumerate() {
                save_mask(s, &a.out.join("samples").join(format!("{id}_{k:03}.pgm")))?;
            }
        }
    }
    if gold_requested {
        eprintln!(
            "note: rater {} is the gold slot; samples follow the gold posterior",
            bank.gold()
        );
    }

    let raters = match rater {
        None => bank.gold().to_string(),
        Some((r, None)) => r.to_string(),
        Some((r, Some(r2))) => format!("{r},{r2}"),
    };
    let sidecar: Vec<(String, String)> = vec![
        ("kind".into(), subcommand.into()),
        ("rater".into(), raters.clone()),
        ("gold_slot".into(), bank.gold().to_string()),
        ("gold_requested".into(), gold_requested.to_string()),
        ("samples".into(), a.samples.to_string()),
        ("seed".into(), a.seed.to_string()),
        ("image_seed".into(), "derive_seed(seed, image index)".into()),
        (
            "uncertainty".into(),
            "255 * (1 - mean class variance / 0.25); white (255) is certain, black (0) maximally uncertain".into(),
        ),
        ("images".into(), inputs.len().to_string()),
    ];
    let meta = a.out.join("meta.txt");
    write_atomic(&meta, kv::render(&sidecar).as_bytes())?;
    eprintln!(
        "wrote {} {subcommand} maps to {}",
        inputs.len(),
        a.out.display()
    );

    let mut m = RunManifest::new(subcommand, argv);
    m.seed = Some(a.seed);
    m.config = vec![
        ("samples".into(), a.samples.to_string()),
        ("rater".into(), raters),
        ("save_samples".into(), a.save_samples.to_string()),
    ];
    m.input("checkpoint", &a.checkpoint)
        .hash("checkpoint", &a.checkpoint);
    if let Some(dir) = &a.data {
        m.input("data", dir);
    }
    if let Some(img) = &a.image {
        m.input("image", img).hash("image", img);
    }
    m.output("dir", &a.out).hash("meta", &meta);
    m.write(&a.out)?;
    Ok(())
}

pub fn fuse(a: FuseArgs, argv: &[String]) -> CliResult<()> {
    let method = a.method.as_str();
    if method != "staple" && method != "majority" {
        return Err(CliError::Usage(format!(
            "--method must be staple or majority, got {method:?}"
        )));
    }
    let ds = data::load_dataset(&a.data)?;
    ensure_outside(&a.out, &a.data)?;
    create_dir(&a.out)?;
    let c = ds.num_classes;
    let annotated: Vec<usize> = (0..ds.len())
        .filter(|&i| ds.masks[i].iter().any(Option::is_some))
        .collect();
    if annotated.len() < ds.len() {
        eprintln!(
            "skipping {} images without rater masks",
            ds.len() - annotated.len()
        );
    }

    let mut m = RunManifest::new("fuse", argv);
    m.config = vec![("method".into(), method.into())];
    m.input("data", &a.data).output("dir", &a.out);
    match method {
        "majority" => {
            for &i in &annotated {
                let masks: Vec<&ClassMap> = ds.masks[i].iter().flatten().collect();
                save_mask(
                    &majority_vote(&masks, c)?,
                    &a.out.join(format!("{}.pgm", ds.ids[i])),
                )?;
            }
        }
        _ => {
            let opts = StapleOptions {
                max_iters: a.max_iters,
                tol: a.tol,
            };
            m.config
                .push(("max_iters".into(), opts.max_iters.to_string()));
            m.config.push(("tol".into(), opts.tol.to_string()));
            let images: Vec<Vec<Option<&ClassMap>>> = annotated
                .iter()
                .map(|&i| ds.masks[i].iter().map(Option::as_ref).collect())
                .collect();
            let res = staple_fuse_many(&images, c, opts)?;
            for (fused, &i) in res.images.iter().zip(&annotated) {
                save_mask(&fused.fused, &a.out.join(format!("{}.pgm", ds.ids[i])))?;
            }
            let mut csv = String::from("rater,true_class,observed_class,probability\n");
            for r in 0..res.model.num_raters() {
                for t in 0..c {
                    for o in 0..c {
                        let _ = writeln!(csv, "{r},{t},{o},{:.6}", res.model.get(r, t, o));
                    }
                }
            }
            let conf = a.out.join("confusion.csv");
            write_atomic(&conf, csv.as_bytes())?;
            let mut prior = String::from("class,probability\n");
            for (k, p) in res.model.prior.iter().enumerate() {
                let _ = writeln!(prior, "{k},{p:.6}");
            }
            let prior_path = a.out.join("prior.csv");
            write_atomic(&prior_path, prior.as_bytes())?;
            m.hash("confusion", &conf).hash("prior", &prior_path);
            m.note("staple.iterations", res.log_likelihood.len())
                .note("staple.converged", res.converged)
                .note(
                    "staple.log_likelihood",
                    res.log_likelihood.last().copied().unwrap_or(f64::NAN),
                );
            if !res.converged {
                eprintln!(
                    "warning: STAPLE stopped after {} iterations without converging",
                    opts.max_iters
                );
            }
        }
    }
    eprintln!(
        "fused {} images with {method} into {}",
        annotated.len(),
        a.out.display()
    );
    m.write(&a.out)?;
    Ok(())
}

/// A named set of reference masks keyed by image id.
struct Reference {
    name: String,
    masks: Vec<(String, ClassMap)>,
}

fn load_references(dir: &Path, classes: Option<usize>) -> CliResult<(Vec<Reference>, usize)> {
    if dir.join("meta.txt").is_file() {
        let ds = data::load_dataset(dir)?;
        let mut refs = Vec::new();
        for r in 0..ds.num_raters {
            let masks = (0..ds.len())
                .filter_map(|i| ds.masks[i][r].clone().map(|m| (ds.ids[i].clone(), m)))
                .collect();
            refs.push(Reference {
                name: format!("rater{r}"),
                masks,
            });
        }
        let gold: Vec<_> = (0..ds.len())
            .filter_map(|i| ds.gold[i].clone().map(|m| (ds.ids[i].clone(), m)))
            .collect();
        if !gold.is_empty() {
            refs.push(Reference {
                name: "gold".into(),
                masks: gold,
            });
        }
        return Ok((refs, classes.unwrap_or(ds.num_classes)));
    }
    let classes = classes.ok_or_else(|| {
        CliError::Usage(format!("{} has no meta.txt; pass --classes", dir.display()))
    })?;
    let masks = read_mask_dir(dir)?;
    if masks.is_empty() {
        return Err(Error::format(dir, "no .pgm masks found").into());
    }
    Ok((
        vec![Reference {
            name: dir.display().to_string(),
            masks,
        }],
        classes,
    ))
}

/// Every `<id>.pgm` directly inside `dir`, sorted by id.
fn read_mask_dir(dir: &Path) -> CliResult<Vec<(String, ClassMap)>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "pgm") && p.is_file())
        .collect();
    paths.sort();
    paths
        .into_iter()
        .map(|p| {
            let id = p
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_string();
            Ok((id, data::pnm::load_mask(&p)?))
        })
        .collect()
}

pub fn scores_header(num_classes: usize) -> String {
    let mut h =
        String::from("source,reference,images,kappa_unweighted,kappa_quadratic,accuracy,mean_iou");
    for c in 0..num_classes {
        let _ = write!(h, ",iou_{c}");
    }
    h
}

pub fn scores_row(source: &str, reference: &str, s: &Scores) -> String {
    let mut row = format!(
        "{source},{reference},{},{:.6},{:.6},{:.6},{:.6}",
        s.images, s.kappa_unweighted, s.kappa_quadratic, s.accuracy, s.mean_iou
    );
    for v in &s.class_iou {
        match v {
            Some(v) => {
                let _ = write!(row, ",{v:.6}");
            }
            None => row.push(','),
        }
    }
    row
}

pub fn eval(a: EvalArgs, argv: &[String]) -> CliResult<()> {
    let aggregation: Aggregation = a
        .aggregation
        .parse()
        .map_err(|e: Error| CliError::Usage(e.to_string()))?;
    let (refs, c) = load_references(&a.reference, a.classes)?;
    create_dir(&a.out)?;
    let mut csv = scores_header(c);
    csv.push('\n');
    for pred_dir in &a.pred {
        if !pred_dir.is_dir() {
            return Err(Error::io(
                pred_dir,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "prediction directory not found",
                ),
            )
            .into());
        }
        for reference in &refs {
            let mut preds = Vec::with_capacity(reference.masks.len());
            for (id, _) in &reference.masks {
                let path = pred_dir.join(format!("{id}.pgm"));
                if !path.is_file() {
                    return Err(
                        Error::format(&path, format!("missing prediction for image {id}")).into(),
                    );
                }
                preds.push(data::pnm::load_mask(&path)?);
            }
            let pairs: Vec<(&ClassMap, &ClassMap)> = preds
                .iter()
                .zip(reference.masks.iter().map(|(_, m)| m))
                .collect();
            let scores = evaluate(&pairs, c, aggregation)?;
            let row = scores_row(&pred_dir.display().to_string(), &reference.name, &scores);
            println!("{row}");
            csv.push_str(&row);
            csv.push('\n');
        }
    }
    let path = a.out.join("eval.csv");
    write_atomic(&path, csv.as_bytes())?;

    let mut m = RunManifest::new("eval", argv);
    m.config = vec![
        ("aggregation".into(), a.aggregation.clone()),
        ("classes".into(), c.to_string()),
    ];
    for (k, p) in a.pred.iter().enumerate() {
        m.input(&format!("pred.{k}"), p);
    }
    m.input("reference", &a.reference)
        .output("eval", &path)
        .hash("eval", &path);
    m.write(&a.out)?;
    Ok(())
}

pub fn rater_name(r: usize, gold: usize) -> String {
    if r == gold {
        "gold".into()
    } else {
        format!("rater{r}")
    }
}

pub fn inspect_latent(a: InspectArgs, argv: &[String]) -> CliResult<()> {
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let bank = &ckpt.bank;
    create_dir(&a.out)?;
    let d = bank.dim();
    let gold = bank.gold();

    let mut latent = String::from("rater,kl");
    for i in 0..d {
        let _ = write!(latent, ",mu_{i}");
    }
    for i in 0..d {
        let _ = write!(latent, ",sd_{i}");
    }
    latent.push('\n');
    println!(
        "epoch {} latent_dim {d} prior_var {}",
        ckpt.epoch,
        bank.prior_var()
    );
    println!(
        "{:<8} {:>10} {:>10} {:>10}",
        "rater", "kl", "|mu|", "mean sd"
    );
    for r in 0..=bank.gold() {
        let lat = bank.latent(r)?;
        let mu = lat.mean();
        let cov = lat.covariance();
        let sd: Vec<f64> = (0..d).map(|i| cov[i * d + i].sqrt()).collect();
        let kl = bank.kl_to_prior(r)?;
        let name = rater_name(r, gold);
        let _ = write!(latent, "{name},{kl:.6}");
        for v in mu.iter().chain(&sd) {
            let _ = write!(latent, ",{v:.6}");
        }
        latent.push('\n');
        let norm = mu.iter().map(|v| v * v).sum::<f64>().sqrt();
        println!(
            "{name:<8} {kl:>10.4} {norm:>10.4} {:>10.4}",
            sd.iter().sum::<f64>() / d as f64
        );
    }
    let latent_path = a.out.join("latent.csv");
    write_atomic(&latent_path, latent.as_bytes())?;
    let dist_path = a.out.join("distances.csv");
    write_atomic(&dist_path, distance_csv(bank)?.as_bytes())?;

    let mut m = RunManifest::new("inspect-latent", argv);
    m.input("checkpoint", &a.checkpoint)
        .hash("checkpoint", &a.checkpoint)
        .output("latent", &latent_path)
        .output("distances", &dist_path)
        .hash("latent", &latent_path)
        .hash("distances", &dist_path);
    m.write(&a.out)?;
    Ok(())
}

/// Pairwise Bhattacharyya distances with a header row and column of names.
pub fn distance_csv(bank: &pionono::latent::RaterBank) -> CliResult<String> {
    let dist = bank.pairwise_overlap()?;
    let names: Vec<String> = (0..=bank.gold())
        .map(|r| rater_name(r, bank.gold()))
        .collect();
    let mut csv = format!("rater,{}\n", names.join(","));
    for (name, row) in names.iter().zip(&dist) {
        csv.push_str(name);
        for v in row {
            let _ = write!(csv, ",{v:.6}");
        }
        csv.push('\n');
    }
    Ok(csv)
}
