//! Variational training of the network and the rater posteriors.

pub mod adam;
pub mod checkpoint;
pub mod config;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use adam::{adam_update, AdamSlot, AdamState};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{lr_schedule, Batching, KlScope, TrainConfig};

use crate::autodiff::Graph;
use crate::data::{
    derive_seed, image_to_tensor, Annotation, ClassMap, MultiRaterDataset, Orientation,
};
use crate::error::{Error, Result};
use crate::latent::{standard_normal, RaterBank};
use crate::network::loss::one_hot;
use crate::network::{ModelConfig, SegModel};
use crate::tensor::{Scalar, Tensor};

pub const LOG_HEADER: &str = "epoch,loss,ll,kl,lr_net,lr_latent";
pub const LOG_FILE: &str = "log.csv";
pub const FINAL_CHECKPOINT: &str = "checkpoint.pnn";

/// One annotated example inside a [`Batch`].
#[derive(Clone, Debug)]
pub struct BatchItem {
    /// Index into the batch's image tensor.
    pub image: usize,
    /// Rater id; the bank's gold index for gold masks.
    pub rater: usize,
    pub mask: ClassMap,
}

#[derive(Clone, Debug)]
pub struct Batch<T: Scalar = f32> {
    /// `[B, 3, H, W]`.
    pub images: Tensor<T>,
    pub items: Vec<BatchItem>,
}

/// Result of one objective evaluation.
#[derive(Clone, Debug)]
pub struct StepOutput<T: Scalar = f32> {
    pub loss: f64,
    pub ll: f64,
    pub kl: f64,
    /// (weight, bias) gradients in [`SegModel::layers`] order.
    pub net_grads: Vec<(Tensor<T>, Tensor<T>)>,
    /// (mu, chol) gradients of every rater that entered the objective.
    pub latent_grads: BTreeMap<usize, (Tensor<T>, Tensor<T>)>,
}

/// Evaluates `ll + lambda * kl` and its gradients for one batch.
///
/// `ll` is the likelihood loss averaged over `k_train` reparameterized
/// latent draws per item; `kl` is the mean KL to the prior over the raters in
/// the batch (or over all of them, per `kl_scope`).
pub fn elbo_step<T: Scalar>(
    model: &SegModel<T>,
    bank: &RaterBank<T>,
    batch: &Batch<T>,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<StepOutput<T>> {
    if batch.items.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if bank.dim() != model.latent_dim() {
        return Err(Error::shape(
            "elbo_step",
            format!(
                "bank dimension {} vs head {}",
                bank.dim(),
                model.latent_dim()
            ),
        ));
    }
    let (b, _, h, w) = batch.images.dims4("elbo_step")?;
    let c = model.num_classes();
    let mut targets = Vec::with_capacity(batch.items.len());
    for item in &batch.items {
        if item.image >= b {
            return Err(Error::InvalidArgument(format!(
                "item refers to image {} of {b}",
                item.image
            )));
        }
        bank.latent(item.rater)?;
        if (item.mask.width, item.mask.height) != (w, h) {
            return Err(Error::shape(
                "elbo_step",
                format!(
                    "mask {}x{} for a {w}x{h} image",
                    item.mask.width, item.mask.height
                ),
            ));
        }
        targets.push(one_hot::<T>(&item.mask.data, c, h, w)?);
    }
    let targets = Tensor::stack_batch(&targets)?;

    let mut g = Graph::new();
    let bound = model.bind(&mut g, true);
    let x = g.constant(batch.images.clone());
    let feats = model.features_in(&mut g, &bound, x)?;
    let index: Vec<usize> = batch.items.iter().map(|i| i.image).collect();
    let feats = if index.len() == b && index.iter().enumerate().all(|(i, &j)| i == j) {
        feats
    } else {
        g.gather_batch(feats, &index)?
    };

    let in_batch: BTreeSet<usize> = batch.items.iter().map(|i| i.rater).collect();
    let kl_raters: BTreeSet<usize> = match cfg.kl_scope {
        KlScope::Batch => in_batch.clone(),
        KlScope::All => (0..=bank.gold()).collect(),
    };
    let mut latents = BTreeMap::new();
    for &r in in_batch.union(&kl_raters) {
        let bl = bank.bind(&mut g, r)?;
        let chol = bl.chol(&mut g)?;
        latents.insert(r, (bl, chol));
    }

    let mut lls = Vec::with_capacity(cfg.k_train);
    for _ in 0..cfg.k_train {
        let mut zs = Vec::with_capacity(batch.items.len());
        for item in &batch.items {
            let (bl, chol) = latents[&item.rater];
            let eps = standard_normal(rng, bank.dim());
            zs.push(bl.sample(&mut g, chol, &eps)?);
        }
        let z = g.stack(&zs)?;
        let probs = model.segment_in(&mut g, &bound, feats, z)?;
        lls.push(cfg.loss.apply(&mut g, probs, &targets)?);
    }
    let ll = g.mean(&lls)?;
    let kls = kl_raters
        .iter()
        .map(|r| {
            let (bl, chol) = latents[r];
            bl.kl(&mut g, chol, bank.prior_var())
        })
        .collect::<Result<Vec<_>>>()?;
    let kl = g.mean(&kls)?;
    let weighted = g.scale(kl, cfg.lambda);
    let loss = g.add(ll, weighted)?;

    let (lv, llv, klv) = (
        g.value(loss).item().as_f64(),
        g.value(ll).item().as_f64(),
        g.value(kl).item().as_f64(),
    );
    if !lv.is_finite() {
        return Err(Error::NonFinite(format!(
            "training loss (ll {llv}, kl {klv})"
        )));
    }
    let mut grads = g.backward(loss)?;
    let mut take = |v| grads.take(v);
    let net_grads = bound
        .vars()
        .zip(model.layers())
        .map(|((wv, bv), layer)| {
            (
                take(wv).unwrap_or_else(|| Tensor::zeros(layer.weight.shape())),
                take(bv).unwrap_or_else(|| Tensor::zeros(layer.bias.shape())),
            )
        })
        .collect();
    let latent_grads = latents
        .iter()
        .map(|(&r, (bl, _))| {
            let d = bank.dim();
            (
                r,
                (
                    take(bl.mu).unwrap_or_else(|| Tensor::zeros(&[d])),
                    take(bl.chol_raw).unwrap_or_else(|| Tensor::zeros(&[d, d])),
                ),
            )
        })
        .collect();
    Ok(StepOutput {
        loss: lv,
        ll: llv,
        kl: klv,
        net_grads,
        latent_grads,
    })
}

/// Applies a step's gradients with the two learning rates.
pub fn apply_gradients(
    model: &mut SegModel,
    bank: &mut RaterBank,
    adam: &mut AdamState,
    step: &StepOutput,
    lr_net: f64,
    lr_latent: f64,
) -> Result<()> {
    for (layer, (gw, gb)) in model.layers_mut().zip(&step.net_grads) {
        adam.update(
            &format!("{}.weight", layer.name),
            &mut layer.weight,
            gw,
            lr_net,
        )?;
        adam.update(&format!("{}.bias", layer.name), &mut layer.bias, gb, lr_net)?;
    }
    for (&r, (gmu, gchol)) in &step.latent_grads {
        let lat = bank.latent_mut(r)?;
        adam.update(&format!("latent.{r}.mu"), &mut lat.mu, gmu, lr_latent)?;
        adam.update(
            &format!("latent.{r}.chol"),
            &mut lat.chol_raw,
            gchol,
            lr_latent,
        )?;
    }
    Ok(())
}

/// Averages over one epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub ll: f64,
    pub kl: f64,
    pub lr_net: f64,
    pub lr_latent: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss, self.ll, self.kl, self.lr_net, self.lr_latent
        )
    }
}

/// Fresh model and bank for a dataset.
pub fn initial_state(
    ds: &MultiRaterDataset,
    cfg: &TrainConfig,
    widths: [usize; 3],
) -> Result<Checkpoint> {
    let config = ModelConfig {
        widths,
        ..ModelConfig::new(ds.num_classes, cfg.latent_dim)
    };
    Ok(Checkpoint {
        model: SegModel::new(config, derive_seed(&[cfg.seed, 1]))?,
        bank: RaterBank::init(
            ds.num_raters,
            cfg.latent_dim,
            cfg.prior_var,
            cfg.post_var,
            derive_seed(&[cfg.seed, 2]),
        )?,
        adam: AdamState::new(),
        epoch: 0,
    })
}

/// Groups of annotations forming the steps of one epoch.
pub fn epoch_batches(
    annotations: &[Annotation],
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Vec<Vec<Annotation>> {
    match cfg.batching {
        Batching::Pairs => {
            let mut pairs = annotations.to_vec();
            pairs.shuffle(rng);
            pairs.chunks(cfg.batch_size).map(<[_]>::to_vec).collect()
        }
        Batching::Images => {
            let mut by_image: BTreeMap<usize, Vec<Annotation>> = BTreeMap::new();
            for &a in annotations {
                by_image.entry(a.image).or_default().push(a);
            }
            let mut images: Vec<usize> = by_image.keys().copied().collect();
            images.shuffle(rng);
            images
                .chunks(cfg.batch_size)
                .map(|chunk| {
                    chunk
                        .iter()
                        .flat_map(|i| by_image[i].iter().copied())
                        .collect()
                })
                .collect()
        }
    }
}

/// Materializes a group of annotations, augmenting each distinct image once.
pub fn build_batch(
    ds: &MultiRaterDataset,
    group: &[Annotation],
    augment: bool,
    rng: &mut impl Rng,
) -> Result<Batch> {
    let mut slots: Vec<(usize, Orientation)> = Vec::new();
    let mut items = Vec::with_capacity(group.len());
    for a in group {
        let slot = match slots.iter().position(|&(i, _)| i == a.image) {
            Some(s) => s,
            None => {
                let o = if augment {
                    Orientation::random(rng)
                } else {
                    Orientation::default()
                };
                slots.push((a.image, o));
                slots.len() - 1
            }
        };
        let mask = ds.mask(a.image, a.rater).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "image {} has no mask from rater {}",
                ds.ids[a.image], a.rater
            ))
        })?;
        items.push(BatchItem {
            image: slot,
            rater: a.rater,
            mask: slots[slot].1.mask(mask),
        });
    }
    let images = slots
        .iter()
        .map(|&(i, o)| image_to_tensor(&o.image(&ds.images[i])))
        .collect::<Vec<_>>();
    Ok(Batch {
        images: Tensor::stack_batch(&images)?,
        items,
    })
}

/// Result of [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub state: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Final checkpoint, when an output directory was given.
    pub checkpoint: Option<PathBuf>,
}

/// Trains from a fresh initialization. With `out`, writes `log.csv`
/// (flushed every epoch), periodic `checkpoint_epoch<N>.pnn` files and the
/// final `checkpoint.pnn`.
pub fn train(ds: &MultiRaterDataset, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutput> {
    train_with_widths(ds, cfg, ModelConfig::DEFAULT_WIDTHS, out)
}

pub fn train_with_widths(
    ds: &MultiRaterDataset,
    cfg: &TrainConfig,
    widths: [usize; 3],
    out: Option<&Path>,
) -> Result<TrainOutput> {
    train_observed(ds, cfg, widths, out, &mut |_| {})
}

/// [`train_with_widths`] that reports each finished epoch to `on_epoch`.
pub fn train_observed(
    ds: &MultiRaterDataset,
    cfg: &TrainConfig,
    widths: [usize; 3],
    out: Option<&Path>,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<TrainOutput> {
    cfg.validate()?;
    ds.validate()?;
    let annotations = ds.annotations();
    if annotations.is_empty() {
        return Err(Error::InvalidArgument("dataset has no annotations".into()));
    }
    let mut state = initial_state(ds, cfg, widths)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, 3]));

    let mut log_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            let mut w = BufWriter::new(f);
            writeln!(w, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
            Some((w, path))
        }
        None => None,
    };

    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr_net = lr_schedule(epoch, cfg.lr_net, cfg);
        let lr_latent = lr_schedule(epoch, cfg.lr_latent, cfg);
        let (mut loss, mut ll, mut kl) = (0.0, 0.0, 0.0);
        let batches = epoch_batches(&annotations, cfg, &mut rng);
        let steps = batches.len();
        for group in batches {
            let batch = build_batch(ds, &group, cfg.augment, &mut rng)?;
            let step = elbo_step(&state.model, &state.bank, &batch, cfg, &mut rng);
            let step = match step {
                Ok(s) => s,
                Err(e) => {
                    flush_log(&mut log_file);
                    return Err(e);
                }
            };
            if let Err(e) = apply_gradients(
                &mut state.model,
                &mut state.bank,
                &mut state.adam,
                &step,
                lr_net,
                lr_latent,
            ) {
                flush_log(&mut log_file);
                return Err(e);
            }
            loss += step.loss;
            ll += step.ll;
            kl += step.kl;
        }
        let n = steps as f64;
        let row = EpochLog {
            epoch,
            loss: loss / n,
            ll: ll / n,
            kl: kl / n,
            lr_net,
            lr_latent,
        };
        if let Some((w, path)) = log_file.as_mut() {
            writeln!(w, "{}", row.csv_row())
                .and_then(|_| w.flush())
                .map_err(|e| Error::io(path.as_path(), e))?;
        }
        on_epoch(&row);
        log.push(row);
        state.epoch = epoch + 1;
        if let Some(dir) = out {
            if cfg.checkpoint_every > 0
                && (epoch + 1) % cfg.checkpoint_every == 0
                && epoch + 1 < cfg.epochs
            {
                save_checkpoint(
                    &state,
                    &dir.join(format!("checkpoint_epoch{}.pnn", epoch + 1)),
                )?;
            }
        }
    }
    let checkpoint = match out {
        Some(dir) => {
            let path = dir.join(FINAL_CHECKPOINT);
            save_checkpoint(&state, &path)?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutput {
        state,
        log,
        checkpoint,
    })
}

fn flush_log(log: &mut Option<(BufWriter<fs::File>, PathBuf)>) {
    if let Some((w, _)) = log.as_mut() {
        let _ = w.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{DatasetConfig, SceneConfig};

    fn tiny_dataset(images: usize, seed: u64) -> MultiRaterDataset {
        DatasetConfig {
            train: images,
            test: 0,
            scene: SceneConfig {
                size: 16,
                max_shapes: 2,
                ..SceneConfig::default()
            },
            seed,
            ..DatasetConfig::default()
        }
        .generate_split(0)
        .unwrap()
    }

    const TINY: [usize; 3] = [4, 4, 4];

    fn tiny_state(ds: &MultiRaterDataset, cfg: &TrainConfig) -> Checkpoint {
        initial_state(ds, cfg, TINY).unwrap()
    }

    fn batch_of(ds: &MultiRaterDataset, pairs: &[(usize, usize)]) -> Batch {
        let group: Vec<Annotation> = pairs
            .iter()
            .map(|&(image, rater)| Annotation { image, rater })
            .collect();
        build_batch(ds, &group, false, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn zero_lambda_is_pure_likelihood() {
        let ds = tiny_dataset(2, 1);
        let cfg = TrainConfig {
            lambda: 0.0,
            ..TrainConfig::default()
        };
        let st = tiny_state(&ds, &cfg);
        let batch = batch_of(&ds, &[(0, 0), (1, 2)]);
        let out = elbo_step(
            &st.model,
            &st.bank,
            &batch,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(out.loss, out.ll);
        assert!(out.kl > 0.0);
        let cfg2 = TrainConfig { lambda: 0.5, ..cfg };
        let out2 = elbo_step(
            &st.model,
            &st.bank,
            &batch,
            &cfg2,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert!((out2.loss - (out.ll + 0.5 * out.kl)).abs() < 1e-6);
    }

    #[test]
    fn absent_raters_get_no_gradient() {
        let ds = tiny_dataset(2, 2);
        let cfg = TrainConfig::default();
        let mut st = tiny_state(&ds, &cfg);
        let batch = batch_of(&ds, &[(0, 1), (1, 4)]);
        let out = elbo_step(
            &st.model,
            &st.bank,
            &batch,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(
            out.latent_grads.keys().copied().collect::<Vec<_>>(),
            vec![1, 4]
        );
        let before = st.bank.clone();
        apply_gradients(&mut st.model, &mut st.bank, &mut st.adam, &out, 1e-3, 0.02).unwrap();
        for r in [0, 2, 3] {
            assert_eq!(st.bank.latents()[r], before.latents()[r]);
            assert!(!st.adam.slots.contains_key(&format!("latent.{r}.mu")));
        }
        assert_ne!(st.bank.latents()[1], before.latents()[1]);
        // with kl_scope = all every latent takes part
        let all = TrainConfig {
            kl_scope: KlScope::All,
            ..cfg
        };
        let out = elbo_step(
            &st.model,
            &st.bank,
            &batch,
            &all,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        assert_eq!(out.latent_grads.len(), 5);
        assert!(out.latent_grads[&0].0.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn invalid_batches_are_rejected() {
        let ds = tiny_dataset(1, 3);
        let cfg = TrainConfig::default();
        let st = tiny_state(&ds, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut batch = batch_of(&ds, &[(0, 0)]);
        let empty = Batch {
            images: batch.images.clone(),
            items: vec![],
        };
        assert!(elbo_step(&st.model, &st.bank, &empty, &cfg, &mut rng).is_err());
        batch.items[0].mask.data[0] = 7;
        assert!(elbo_step(&st.model, &st.bank, &batch, &cfg, &mut rng).is_err());
        batch.items[0].mask.data[0] = 0;
        batch.items[0].rater = 9;
        assert!(elbo_step(&st.model, &st.bank, &batch, &cfg, &mut rng).is_err());
    }

    #[test]
    fn image_batching_shares_images_across_raters() {
        let ds = tiny_dataset(5, 4);
        let ann = ds.annotations();
        let cfg = TrainConfig {
            batch_size: 2,
            ..TrainConfig::default()
        };
        let groups = epoch_batches(&ann, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(groups.len(), 3);
        let mut all: Vec<Annotation> = groups.concat();
        all.sort();
        assert_eq!(all, ann);
        let pairs = TrainConfig {
            batching: Batching::Pairs,
            ..cfg
        };
        let groups = epoch_batches(&ann, &pairs, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(groups.len(), ann.len().div_ceil(2));
        let batch = build_batch(&ds, &ann[..5], true, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.images.shape()[0], 1);
    }

    #[test]
    fn zero_epochs_returns_the_initialization() {
        let ds = tiny_dataset(2, 5);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let out = train_with_widths(&ds, &cfg, TINY, None).unwrap();
        assert_eq!(out.state, tiny_state(&ds, &cfg));
        assert!(out.log.is_empty());
    }

    #[test]
    fn overfits_a_small_set() {
        let ds = tiny_dataset(4, 6);
        let cfg = TrainConfig {
            lr_net: 3e-3,
            augment: false,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let mut st = tiny_state(&ds, &cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let gold = ds.num_raters;
        let batch = batch_of(&ds, &(0..4).map(|i| (i, gold)).collect::<Vec<_>>());
        let mut losses = vec![];
        for _ in 0..50 {
            let out = elbo_step(&st.model, &st.bank, &batch, &cfg, &mut rng).unwrap();
            losses.push(out.loss);
            apply_gradients(
                &mut st.model,
                &mut st.bank,
                &mut st.adam,
                &out,
                cfg.lr_net,
                cfg.lr_latent,
            )
            .unwrap();
        }
        let last = elbo_step(&st.model, &st.bank, &batch, &cfg, &mut rng)
            .unwrap()
            .loss;
        assert!(last < 0.5 * losses[0], "{} -> {last}", losses[0]);
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let ds = tiny_dataset(3, 7);
        let cfg = TrainConfig {
            epochs: 2,
            checkpoint_every: 1,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ra = train_with_widths(&ds, &cfg, TINY, Some(a.path())).unwrap();
        let rb = train_with_widths(&ds, &cfg, TINY, Some(b.path())).unwrap();
        let la = fs::read(a.path().join(LOG_FILE)).unwrap();
        assert_eq!(la, fs::read(b.path().join(LOG_FILE)).unwrap());
        let text = String::from_utf8(la).unwrap();
        assert_eq!(text.lines().next(), Some(LOG_HEADER));
        assert_eq!(text.lines().count(), 3);
        assert!(a.path().join("checkpoint_epoch1.pnn").exists());
        assert_eq!(load_checkpoint(&ra.checkpoint.unwrap()).unwrap(), ra.state);
        assert_eq!(ra.state, rb.state);
        assert_eq!(ra.state.epoch, 2);
    }
}
