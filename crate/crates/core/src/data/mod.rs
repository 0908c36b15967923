//! Multi-rater datasets: in-memory form, on-disk layout and synthetic
//! generation.
//!
//! A dataset directory holds
//!
//! ```text
//! images/<id>.ppm
//! raters/<r>/<id>.pgm     (missing file = not annotated by r)
//! gold/<id>.pgm           (optional)
//! meta.txt                (num_classes, num_raters, class_names)
//! ```

pub mod pnm;
pub mod synth;

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use pnm::{ClassMap, RgbImage};
pub use synth::{ArchetypeKind, RaterArchetype, SceneConfig};

use crate::error::{Error, Result};
use crate::kv;
use crate::network::loss::IGNORE_LABEL;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct MultiRaterDataset {
    pub ids: Vec<String>,
    pub images: Vec<RgbImage>,
    /// `masks[image][rater]`.
    pub masks: Vec<Vec<Option<ClassMap>>>,
    pub gold: Vec<Option<ClassMap>>,
    pub num_classes: usize,
    pub num_raters: usize,
    pub class_names: Vec<String>,
}

/// One training example: an image and a rater whose mask exists.
/// `rater == num_raters` refers to the gold mask.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Annotation {
    pub image: usize,
    pub rater: usize,
}

pub fn default_class_names(num_classes: usize) -> Vec<String> {
    (0..num_classes)
        .map(|c| {
            if c == 0 {
                "background".to_string()
            } else {
                format!("class{c}")
            }
        })
        .collect()
}

impl MultiRaterDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn has_gold(&self) -> bool {
        self.gold.iter().any(Option::is_some)
    }

    /// Mask of `rater` for `image`; the gold slot is `num_raters`.
    pub fn mask(&self, image: usize, rater: usize) -> Option<&ClassMap> {
        if rater == self.num_raters {
            self.gold.get(image)?.as_ref()
        } else {
            self.masks.get(image)?.get(rater)?.as_ref()
        }
    }

    /// Every present (image, rater) mask, gold included, in index order.
    pub fn annotations(&self) -> Vec<Annotation> {
        (0..self.len())
            .flat_map(|image| {
                (0..=self.num_raters)
                    .filter(move |&rater| self.mask(image, rater).is_some())
                    .map(move |rater| Annotation { image, rater })
            })
            .collect()
    }

    /// Checks shapes and class ids.
    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.ids.len() != n || self.masks.len() != n || self.gold.len() != n {
            return Err(Error::InvalidArgument(
                "dataset tables have different lengths".into(),
            ));
        }
        if self.class_names.len() != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} class names for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        for i in 0..n {
            if self.masks[i].len() != self.num_raters {
                return Err(Error::InvalidArgument(format!(
                    "image {} has a wrong rater count",
                    self.ids[i]
                )));
            }
            for r in 0..=self.num_raters {
                if let Some(m) = self.mask(i, r) {
                    check_mask(m, &self.images[i], self.num_classes).map_err(|msg| {
                        Error::InvalidArgument(format!("{} rater {r}: {msg}", self.ids[i]))
                    })?;
                }
            }
        }
        Ok(())
    }

    /// Image `i` as a `[1, 3, H, W]` tensor scaled to `[-1, 1]`.
    pub fn image_tensor<T: Scalar>(&self, i: usize) -> Tensor<T> {
        image_to_tensor(&self.images[i])
    }
}

fn check_mask(m: &ClassMap, img: &RgbImage, num_classes: usize) -> std::result::Result<(), String> {
    if (m.width, m.height) != (img.width, img.height) {
        return Err(format!(
            "mask is {}x{} but image is {}x{}",
            m.width, m.height, img.width, img.height
        ));
    }
    if let Some(v) = m
        .data
        .iter()
        .find(|&&v| v as usize >= num_classes && v != IGNORE_LABEL)
    {
        return Err(format!(
            "class id {v} out of range for {num_classes} classes"
        ));
    }
    Ok(())
}

/// Planar `1 x 3 x H x W` tensor with 8-bit channels mapped linearly onto
/// `[-1, 1]`.
pub fn image_to_tensor<T: Scalar>(img: &RgbImage) -> Tensor<T> {
    let plane = img.width * img.height;
    let mut data = vec![T::zero(); 3 * plane];
    for p in 0..plane {
        for c in 0..3 {
            let v = img.data[p * 3 + c] as f64 / 255.0;
            data[c * plane + p] = T::from_f64(2.0 * v - 1.0);
        }
    }
    Tensor::from_parts(vec![1, 3, img.height, img.width], data)
}

/// A dihedral transform: `rot` quarter turns (counter-clockwise), then an
/// optional horizontal flip.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Orientation {
    pub rot: u8,
    pub flip: bool,
}

impl Orientation {
    pub fn random(rng: &mut impl Rng) -> Self {
        Orientation {
            rot: rng.gen_range(0..4),
            flip: rng.gen(),
        }
    }

    /// Applies to an interleaved `w x h x channels` buffer; returns the new
    /// buffer and its `(w, h)`.
    pub fn apply(
        self,
        data: &[u8],
        w: usize,
        h: usize,
        channels: usize,
    ) -> (Vec<u8>, usize, usize) {
        let (mut cur, mut cw, mut ch) = (data.to_vec(), w, h);
        for _ in 0..self.rot % 4 {
            // counter-clockwise: new (x, y) = (y, cw - 1 - x)
            let mut next = vec![0; cur.len()];
            let (nw, nh) = (ch, cw);
            for y in 0..ch {
                for x in 0..cw {
                    let (nx, ny) = (y, cw - 1 - x);
                    let (src, dst) = ((y * cw + x) * channels, (ny * nw + nx) * channels);
                    next[dst..dst + channels].copy_from_slice(&cur[src..src + channels]);
                }
            }
            cur = next;
            cw = nw;
            ch = nh;
        }
        if self.flip {
            for row in cur.chunks_mut(cw * channels) {
                for x in 0..cw / 2 {
                    for k in 0..channels {
                        row.swap(x * channels + k, (cw - 1 - x) * channels + k);
                    }
                }
            }
        }
        (cur, cw, ch)
    }

    pub fn image(self, img: &RgbImage) -> RgbImage {
        let (data, width, height) = self.apply(&img.data, img.width, img.height, 3);
        RgbImage {
            width,
            height,
            data,
        }
    }

    pub fn mask(self, m: &ClassMap) -> ClassMap {
        let (data, width, height) = self.apply(&m.data, m.width, m.height, 1);
        ClassMap {
            width,
            height,
            data,
        }
    }
}

fn image_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("images").join(format!("{id}.ppm"))
}

fn rater_path(dir: &Path, r: usize, id: &str) -> PathBuf {
    dir.join("raters")
        .join(r.to_string())
        .join(format!("{id}.pgm"))
}

fn gold_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("gold").join(format!("{id}.pgm"))
}

pub fn save_dataset(ds: &MultiRaterDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    for (i, id) in ds.ids.iter().enumerate() {
        pnm::save_image(&ds.images[i], &image_path(dir, id))?;
        for r in 0..ds.num_raters {
            if let Some(m) = &ds.masks[i][r] {
                pnm::save_mask(m, &rater_path(dir, r, id))?;
            }
        }
        if let Some(g) = &ds.gold[i] {
            pnm::save_mask(g, &gold_path(dir, id))?;
        }
    }
    for r in 0..ds.num_raters {
        let d = dir.join("raters").join(r.to_string());
        fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let meta = kv::render(&[
        ("num_classes".into(), ds.num_classes.to_string()),
        ("num_raters".into(), ds.num_raters.to_string()),
        ("class_names".into(), ds.class_names.join(",")),
    ]);
    let path = dir.join("meta.txt");
    fs::write(&path, meta).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<MultiRaterDataset> {
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let meta_path = dir.join("meta.txt");
    let mut num_classes = None;
    let mut num_raters = None;
    let mut class_names = None;
    for (k, v) in kv::read(&meta_path)? {
        let parsed = |v: &str| {
            v.parse::<usize>().map_err(|_| {
                Error::format(&meta_path, format!("{k} must be an integer, got {v:?}"))
            })
        };
        match k.as_str() {
            "num_classes" => num_classes = Some(parsed(&v)?),
            "num_raters" => num_raters = Some(parsed(&v)?),
            "class_names" => {
                class_names = Some(
                    v.split(',')
                        .map(|s| s.trim().to_string())
                        .collect::<Vec<_>>(),
                )
            }
            _ => return Err(Error::format(&meta_path, format!("unknown key {k:?}"))),
        }
    }
    let num_classes =
        num_classes.ok_or_else(|| Error::format(&meta_path, "missing num_classes"))?;
    let num_raters = num_raters.ok_or_else(|| Error::format(&meta_path, "missing num_raters"))?;
    if !(2..=255).contains(&num_classes) {
        return Err(Error::format(
            &meta_path,
            format!("num_classes {num_classes} out of range"),
        ));
    }
    let class_names = class_names.unwrap_or_else(|| default_class_names(num_classes));
    if class_names.len() != num_classes {
        return Err(Error::format(
            &meta_path,
            format!(
                "{} class names for {num_classes} classes",
                class_names.len()
            ),
        ));
    }

    let img_dir = dir.join("images");
    let mut ids: Vec<String> = fs::read_dir(&img_dir)
        .map_err(|e| Error::io(&img_dir, e))?
        .filter_map(|entry| {
            let path = entry.ok()?.path();
            (path.extension()? == "ppm").then(|| path.file_stem()?.to_str().map(String::from))?
        })
        .collect();
    ids.sort();

    let mut ds = MultiRaterDataset {
        ids: Vec::with_capacity(ids.len()),
        images: Vec::with_capacity(ids.len()),
        masks: Vec::with_capacity(ids.len()),
        gold: Vec::with_capacity(ids.len()),
        num_classes,
        num_raters,
        class_names,
    };
    let load_checked = |path: PathBuf, img: &RgbImage| -> Result<Option<ClassMap>> {
        if !path.exists() {
            return Ok(None);
        }
        let m = pnm::load_mask(&path)?;
        check_mask(&m, img, num_classes).map_err(|msg| Error::format(&path, msg))?;
        Ok(Some(m))
    };
    for id in ids {
        let img = pnm::load_image(&image_path(dir, &id))?;
        let masks = (0..num_raters)
            .map(|r| load_checked(rater_path(dir, r, &id), &img))
            .collect::<Result<Vec<_>>>()?;
        let gold = load_checked(gold_path(dir, &id), &img)?;
        ds.ids.push(id);
        ds.images.push(img);
        ds.masks.push(masks);
        ds.gold.push(gold);
    }
    Ok(ds)
}

/// Settings of a synthetic train/test dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub train: usize,
    pub test: usize,
    pub scene: SceneConfig,
    pub raters: Vec<RaterArchetype>,
    /// Probability that any given (image, rater) mask is written.
    pub coverage: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 200,
            test: 50,
            scene: SceneConfig::default(),
            raters: synth::default_raters(),
            coverage: 1.0,
            seed: 0,
        }
    }
}

/// Counts recorded after generation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GenSummary {
    pub train_masks: usize,
    pub test_masks: usize,
}

pub const MANIFEST: &str = "manifest.txt";

/// SplitMix64 finalizer over a sequence of words; gives independent
/// per-image and per-rater streams.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9E37_79B9_7F4A_7C15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

const STREAM_SCENE: u64 = 1;
const STREAM_RATER: u64 = 2;
const STREAM_COVERAGE: u64 = 3;

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.raters.is_empty() {
            return Err(Error::Config(
                "at least one rater archetype is required".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.coverage) {
            return Err(Error::Config(format!(
                "coverage {} is not in [0, 1]",
                self.coverage
            )));
        }
        if self.scene.size % crate::network::SPATIAL_MULTIPLE != 0 {
            return Err(Error::Config(format!(
                "size {} must be a multiple of {}",
                self.scene.size,
                crate::network::SPATIAL_MULTIPLE
            )));
        }
        for r in &self.raters {
            r.validate(self.scene.num_classes)?;
        }
        Ok(())
    }

    /// Generates one split in memory. `split` is 0 for train, 1 for test.
    pub fn generate_split(&self, split: u64) -> Result<MultiRaterDataset> {
        self.validate()?;
        let count = if split == 0 { self.train } else { self.test };
        let c = self.scene.num_classes;
        let mut ds = MultiRaterDataset {
            ids: Vec::with_capacity(count),
            images: Vec::with_capacity(count),
            masks: Vec::with_capacity(count),
            gold: Vec::with_capacity(count),
            num_classes: c,
            num_raters: self.raters.len(),
            class_names: default_class_names(c),
        };
        for i in 0..count as u64 {
            let (img, gold) = synth::gen_ground_truth(
                &self.scene,
                derive_seed(&[self.seed, STREAM_SCENE, split, i]),
            )?;
            let mut cover =
                ChaCha8Rng::seed_from_u64(derive_seed(&[self.seed, STREAM_COVERAGE, split, i]));
            let mut masks = Vec::with_capacity(self.raters.len());
            for (r, arch) in self.raters.iter().enumerate() {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[
                    self.seed,
                    STREAM_RATER,
                    split,
                    i,
                    r as u64,
                ]));
                let mask = synth::apply_archetype(&gold, arch, c, &mut rng)?;
                let present = cover.gen::<f64>() < self.coverage;
                masks.push(present.then_some(mask));
            }
            ds.ids.push(format!("{i:04}"));
            ds.images.push(img);
            ds.masks.push(masks);
            ds.gold.push(Some(gold));
        }
        Ok(ds)
    }

    pub fn to_manifest(&self, summary: &GenSummary) -> Vec<(String, String)> {
        let mut kv = vec![
            ("seed".to_string(), self.seed.to_string()),
            ("train".into(), self.train.to_string()),
            ("test".into(), self.test.to_string()),
            ("size".into(), self.scene.size.to_string()),
            ("classes".into(), self.scene.num_classes.to_string()),
            ("max_shapes".into(), self.scene.max_shapes.to_string()),
            ("noise_sd".into(), self.scene.noise_sd.to_string()),
            ("coverage".into(), self.coverage.to_string()),
            ("raters".into(), synth::format_raters(&self.raters)),
        ];
        for (r, a) in self.raters.iter().enumerate() {
            let (kind, params) = match a.kind {
                ArchetypeKind::Faithful => ("faithful", String::new()),
                ArchetypeKind::Confuser {
                    src,
                    dst,
                    p_confuse,
                } => (
                    "confuser",
                    format!("src={src} dst={dst} p_confuse={p_confuse}"),
                ),
                ArchetypeKind::UnderSegmenter { p_erase } => {
                    ("under_segmenter", format!("p_erase={p_erase}"))
                }
                ArchetypeKind::OverGrader { p_upgrade } => {
                    ("over_grader", format!("p_upgrade={p_upgrade}"))
                }
            };
            kv.push((format!("rater.{r}.kind"), kind.into()));
            kv.push((format!("rater.{r}.params"), params));
            kv.push((
                format!("rater.{r}.jitter_radius"),
                a.jitter_radius.to_string(),
            ));
            kv.push((format!("rater.{r}.p_apply"), a.p_apply.to_string()));
        }
        kv.push((
            "train.masks_present".into(),
            summary.train_masks.to_string(),
        ));
        kv.push(("test.masks_present".into(), summary.test_masks.to_string()));
        kv
    }

    /// Sets one generation setting from its manifest key and textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = kv::value(key, value)?,
            "train" => self.train = kv::value(key, value)?,
            "test" => self.test = kv::value(key, value)?,
            "size" => self.scene.size = kv::value(key, value)?,
            "classes" => self.scene.num_classes = kv::value(key, value)?,
            "max_shapes" => self.scene.max_shapes = kv::value(key, value)?,
            "noise_sd" => self.scene.noise_sd = kv::value(key, value)?,
            "coverage" => self.coverage = kv::value(key, value)?,
            "raters" => self.raters = synth::parse_raters(value)?,
            other => return Err(Error::Config(format!("unknown dataset key {other:?}"))),
        }
        Ok(())
    }

    /// Reads the generation settings back from a manifest.
    pub fn from_manifest(path: &Path) -> Result<Self> {
        let mut cfg = DatasetConfig::default();
        for (k, v) in kv::read(path)? {
            if k.starts_with("rater.") || k.ends_with(".masks_present") {
                continue;
            }
            cfg.set(&k, &v).map_err(|e| match e {
                Error::Config(msg) => Error::format(path, msg),
                other => other,
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn count_masks(ds: &MultiRaterDataset) -> usize {
    ds.masks.iter().flatten().filter(|m| m.is_some()).count()
}

/// Writes `out/train`, `out/test` and `out/manifest.txt`.
pub fn gen_dataset(cfg: &DatasetConfig, out: &Path) -> Result<GenSummary> {
    let train = cfg.generate_split(0)?;
    save_dataset(&train, &out.join("train"))?;
    let test = cfg.generate_split(1)?;
    save_dataset(&test, &out.join("test"))?;
    let summary = GenSummary {
        train_masks: count_masks(&train),
        test_masks: count_masks(&test),
    };
    let path = out.join(MANIFEST);
    fs::write(&path, kv::render(&cfg.to_manifest(&summary))).map_err(|e| Error::io(&path, e))?;
    Ok(summary)
}
