//! Synthetic scenes and rater archetypes.
//!
//! A scene is a background (class 0) with up to a few non-touching
//! ellipses, each carrying a class in `1..C`. Pixels are drawn in a fixed
//! per-class colour plus Gaussian noise, so a small network can learn the
//! mapping. Raters are simulated by corrupting the gold mask according to an
//! archetype and then perturbing the boundary of every component.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::pnm::{ClassMap, RgbImage};
use crate::error::{Error, Result};
use crate::network::loss::IGNORE_LABEL;

/// Minimum background gap (pixels, chessboard distance) between ellipses.
const SHAPE_GAP: isize = 3;
const PLACEMENT_ATTEMPTS: usize = 60;

pub const DEFAULT_JITTER: usize = 2;
pub const DEFAULT_P_APPLY: f64 = 0.7;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub size: usize,
    pub num_classes: usize,
    pub max_shapes: usize,
    pub noise_sd: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            size: 64,
            num_classes: 4,
            max_shapes: 4,
            noise_sd: 0.1,
        }
    }
}

/// Base colour of a class, RGB in `[0, 1]`.
pub fn class_color(class: usize, num_classes: usize) -> [f64; 3] {
    if class == 0 {
        return [0.85, 0.82, 0.86];
    }
    let fg = (num_classes - 1).max(1) as f64;
    let hue = 300.0 * (class - 1) as f64 / fg;
    hsv(hue, 0.8, 0.75)
}

fn hsv(h: f64, s: f64, v: f64) -> [f64; 3] {
    let c = v * s;
    let hp = h / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn contains(&self, x: usize, y: usize) -> bool {
        let dx = x as f64 + 0.5 - self.cx;
        let dy = y as f64 + 0.5 - self.cy;
        let u = (dx * self.cos + dy * self.sin) / self.a;
        let v = (-dx * self.sin + dy * self.cos) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Draws a gold mask and its rendered image. Deterministic per seed.
pub fn gen_ground_truth(cfg: &SceneConfig, seed: u64) -> Result<(RgbImage, ClassMap)> {
    if cfg.num_classes < 2 || cfg.num_classes > 255 {
        return Err(Error::InvalidArgument(format!(
            "need 2..=255 classes, got {}",
            cfg.num_classes
        )));
    }
    if cfg.size < 8 {
        return Err(Error::InvalidArgument(format!(
            "image size {} is too small",
            cfg.size
        )));
    }
    if !(cfg.noise_sd >= 0.0 && cfg.noise_sd.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "noise sd {} is invalid",
            cfg.noise_sd
        )));
    }
    let n = cfg.size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = ClassMap::filled(n, n, 0);
    let shapes = if cfg.max_shapes == 0 {
        0
    } else {
        rng.gen_range(1..=cfg.max_shapes)
    };
    let lo = (n as f64 / 10.0).max(2.0);
    let hi = (n as f64 / 4.5).max(lo + 1.0);
    for _ in 0..shapes {
        let class = rng.gen_range(1..cfg.num_classes) as u8;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let a = rng.gen_range(lo..hi);
            let b = rng.gen_range(lo..hi);
            let r = a.max(b) + 1.0;
            let span = n as f64 - 2.0 * r;
            let (cx, cy) = if span > 0.0 {
                (r + rng.gen_range(0.0..span), r + rng.gen_range(0.0..span))
            } else {
                (n as f64 / 2.0, n as f64 / 2.0)
            };
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let e = Ellipse {
                cx,
                cy,
                a,
                b,
                cos: angle.cos(),
                sin: angle.sin(),
            };
            let pixels: Vec<(usize, usize)> = (0..n)
                .flat_map(|y| (0..n).map(move |x| (x, y)))
                .filter(|&(x, y)| e.contains(x, y))
                .collect();
            if pixels.is_empty() || !clear_of_shapes(&mask, &pixels) {
                continue;
            }
            for (x, y) in pixels {
                mask.data[y * n + x] = class;
            }
            break;
        }
    }
    let noise =
        Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut data = Vec::with_capacity(n * n * 3);
    for &c in &mask.data {
        let base = class_color(c as usize, cfg.num_classes);
        for v in base {
            let v = (v + noise.sample(&mut rng)).clamp(0.0, 1.0);
            data.push((v * 255.0).round() as u8);
        }
    }
    Ok((RgbImage::new(n, n, data)?, mask))
}

fn clear_of_shapes(mask: &ClassMap, pixels: &[(usize, usize)]) -> bool {
    let n = mask.width as isize;
    pixels.iter().all(|&(x, y)| {
        (-SHAPE_GAP..=SHAPE_GAP).all(|dy| {
            (-SHAPE_GAP..=SHAPE_GAP).all(|dx| {
                let (xx, yy) = (x as isize + dx, y as isize + dy);
                xx < 0 || yy < 0 || xx >= n || yy >= n || mask.data[(yy * n + xx) as usize] == 0
            })
        })
    })
}

/// How a simulated rater departs from the gold mask.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ArchetypeKind {
    Faithful,
    /// Relabels each `src` pixel to `dst` with probability `p_confuse`.
    Confuser {
        src: u8,
        dst: u8,
        p_confuse: f64,
    },
    /// Marks each foreground component unannotated with probability `p_erase`.
    UnderSegmenter {
        p_erase: f64,
    },
    /// Moves each foreground pixel of class `c` to `min(c + 1, C - 1)` with
    /// probability `p_upgrade`.
    OverGrader {
        p_upgrade: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RaterArchetype {
    pub kind: ArchetypeKind,
    /// Maximum boundary perturbation in pixels.
    pub jitter_radius: usize,
    /// Per-image probability that the kind-specific bias fires.
    pub p_apply: f64,
}

impl RaterArchetype {
    pub fn new(kind: ArchetypeKind) -> Self {
        RaterArchetype {
            kind,
            jitter_radius: DEFAULT_JITTER,
            p_apply: DEFAULT_P_APPLY,
        }
    }

    /// Faithful, no jitter, never fires: reproduces the gold mask.
    pub fn identity() -> Self {
        RaterArchetype {
            kind: ArchetypeKind::Faithful,
            jitter_radius: 0,
            p_apply: 0.0,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "{name} = {p} is not a probability"
                )))
            }
        };
        prob("p_apply", self.p_apply)?;
        match self.kind {
            ArchetypeKind::Faithful => Ok(()),
            ArchetypeKind::Confuser {
                src,
                dst,
                p_confuse,
            } => {
                prob("p_confuse", p_confuse)?;
                if src as usize >= num_classes || dst as usize >= num_classes {
                    return Err(Error::InvalidArgument(format!(
                        "confuser classes {src}->{dst} out of range for {num_classes} classes"
                    )));
                }
                Ok(())
            }
            ArchetypeKind::UnderSegmenter { p_erase } => prob("p_erase", p_erase),
            ArchetypeKind::OverGrader { p_upgrade } => prob("p_upgrade", p_upgrade),
        }
    }

    /// Expected confusion from gold (rows) to this rater's labels, ignoring
    /// boundary jitter. Columns `0..C` are classes, column `C` is unannotated.
    pub fn analytic_confusion(&self, num_classes: usize) -> Vec<Vec<f64>> {
        let c = num_classes;
        let mut m = vec![vec![0.0; c + 1]; c];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        let pa = self.p_apply;
        match self.kind {
            ArchetypeKind::Faithful => {}
            ArchetypeKind::Confuser {
                src,
                dst,
                p_confuse,
            } => {
                let (s, d) = (src as usize, dst as usize);
                if s != d {
                    m[s][s] -= pa * p_confuse;
                    m[s][d] += pa * p_confuse;
                }
            }
            ArchetypeKind::UnderSegmenter { p_erase } => {
                for row in m.iter_mut().skip(1) {
                    row.iter_mut().for_each(|v| *v *= 1.0 - pa * p_erase);
                    row[c] = pa * p_erase;
                }
            }
            ArchetypeKind::OverGrader { p_upgrade } => {
                for i in 1..c.saturating_sub(1) {
                    m[i][i] -= pa * p_upgrade;
                    m[i][i + 1] += pa * p_upgrade;
                }
            }
        }
        m
    }
}

impl fmt::Display for RaterArchetype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            ArchetypeKind::Faithful => write!(f, "faithful")?,
            ArchetypeKind::Confuser {
                src,
                dst,
                p_confuse,
            } => write!(f, "confuser:{src}:{dst}:{p_confuse}")?,
            ArchetypeKind::UnderSegmenter { p_erase } => write!(f, "under:{p_erase}")?,
            ArchetypeKind::OverGrader { p_upgrade } => write!(f, "over:{p_upgrade}")?,
        }
        write!(f, "@{}:{}", self.jitter_radius, self.p_apply)
    }
}

/// `faithful`, `confuser:SRC:DST:P`, `under:P` or `over:P`, optionally
/// followed by `@JITTER:P_APPLY`.
impl FromStr for RaterArchetype {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad rater archetype {s:?}"));
        let num = |v: &str| v.trim().parse::<f64>().map_err(|_| bad());
        let class = |v: &str| v.trim().parse::<u8>().map_err(|_| bad());
        let (kind, extra) = match s.split_once('@') {
            Some((k, e)) => (k, Some(e)),
            None => (s, None),
        };
        let parts: Vec<&str> = kind.trim().split(':').collect();
        let kind = match parts[..] {
            ["faithful"] => ArchetypeKind::Faithful,
            ["confuser", src, dst, p] => ArchetypeKind::Confuser {
                src: class(src)?,
                dst: class(dst)?,
                p_confuse: num(p)?,
            },
            ["under", p] => ArchetypeKind::UnderSegmenter { p_erase: num(p)? },
            ["over", p] => ArchetypeKind::OverGrader { p_upgrade: num(p)? },
            _ => return Err(bad()),
        };
        let mut out = RaterArchetype::new(kind);
        if let Some(extra) = extra {
            let (j, p) = extra.split_once(':').ok_or_else(bad)?;
            out.jitter_radius = j.trim().parse().map_err(|_| bad())?;
            out.p_apply = num(p)?;
        }
        out.validate(usize::MAX)
            .map_err(|e| Error::Config(format!("{s:?}: {e}")))?;
        Ok(out)
    }
}

/// Comma-separated list of rater archetypes.
pub fn parse_raters(s: &str) -> Result<Vec<RaterArchetype>> {
    let raters: Vec<RaterArchetype> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if raters.is_empty() {
        return Err(Error::Config(
            "at least one rater archetype is required".into(),
        ));
    }
    Ok(raters)
}

pub fn format_raters(raters: &[RaterArchetype]) -> String {
    raters
        .iter()
        .map(|r| r.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Two faithful raters, a 2->3 confuser and an under-segmenter.
pub fn default_raters() -> Vec<RaterArchetype> {
    vec![
        RaterArchetype::new(ArchetypeKind::Faithful),
        RaterArchetype::new(ArchetypeKind::Faithful),
        RaterArchetype::new(ArchetypeKind::Confuser {
            src: 2,
            dst: 3,
            p_confuse: 0.8,
        }),
        RaterArchetype::new(ArchetypeKind::UnderSegmenter { p_erase: 0.5 }),
    ]
}

fn is_foreground(v: u8) -> bool {
    v != 0 && v != IGNORE_LABEL
}

/// 4-connected components of pixels satisfying `pred`, in scan order.
pub fn components(map: &ClassMap, pred: impl Fn(u8) -> bool) -> Vec<Vec<usize>> {
    let (w, h) = (map.width, map.height);
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..w * h {
        if seen[start] || !pred(map.data[start]) {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(p) = queue.pop_front() {
            comp.push(p);
            for q in neighbours(p, w, h) {
                if !seen[q] && pred(map.data[q]) {
                    seen[q] = true;
                    queue.push_back(q);
                }
            }
        }
        out.push(comp);
    }
    out
}

fn neighbours(p: usize, w: usize, h: usize) -> impl Iterator<Item = usize> {
    let (x, y) = (p % w, p / w);
    [
        (x > 0).then(|| p - 1),
        (x + 1 < w).then(|| p + 1),
        (y > 0).then(|| p - w),
        (y + 1 < h).then(|| p + w),
    ]
    .into_iter()
    .flatten()
}

/// Grows a component over background pixels up to `radius` steps
/// (4-connected), copying the label of the nearest component pixel.
fn dilate(map: &mut ClassMap, comp: &[usize], radius: usize) {
    let (w, h) = (map.width, map.height);
    let mut dist: Vec<usize> = vec![usize::MAX; w * h];
    let mut queue: VecDeque<usize> = comp.iter().copied().collect();
    for &p in comp {
        dist[p] = 0;
    }
    while let Some(p) = queue.pop_front() {
        if dist[p] == radius {
            continue;
        }
        for q in neighbours(p, w, h) {
            if dist[q] == usize::MAX && map.data[q] == 0 {
                dist[q] = dist[p] + 1;
                map.data[q] = map.data[p];
                queue.push_back(q);
            }
        }
    }
}

/// Clears component pixels within `radius` steps of its outside.
fn erode(map: &mut ClassMap, comp: &[usize], radius: usize) {
    let (w, h) = (map.width, map.height);
    let mut inside = vec![false; w * h];
    for &p in comp {
        inside[p] = true;
    }
    let mut dist: Vec<usize> = vec![usize::MAX; w * h];
    let mut queue = VecDeque::new();
    for &p in comp {
        if neighbours(p, w, h).any(|q| !inside[q]) {
            dist[p] = 1;
            queue.push_back(p);
        }
    }
    while let Some(p) = queue.pop_front() {
        if dist[p] == radius {
            continue;
        }
        for q in neighbours(p, w, h) {
            if inside[q] && dist[q] == usize::MAX {
                dist[q] = dist[p] + 1;
                queue.push_back(q);
            }
        }
    }
    for &p in comp {
        if dist[p] <= radius {
            map.data[p] = 0;
        }
    }
}

/// Simulates one rater's annotation of `gold`.
pub fn apply_archetype(
    gold: &ClassMap,
    arch: &RaterArchetype,
    num_classes: usize,
    rng: &mut impl Rng,
) -> Result<ClassMap> {
    arch.validate(num_classes)?;
    if let Some(bad) = gold
        .data
        .iter()
        .find(|&&v| v as usize >= num_classes && v != IGNORE_LABEL)
    {
        return Err(Error::InvalidArgument(format!(
            "gold mask holds class {bad} but only {num_classes} classes exist"
        )));
    }
    let mut out = gold.clone();
    let fires = rng.gen::<f64>() < arch.p_apply;
    match arch.kind {
        ArchetypeKind::Faithful => {}
        ArchetypeKind::Confuser {
            src,
            dst,
            p_confuse,
        } => {
            if fires {
                for v in out.data.iter_mut().filter(|v| **v == src) {
                    if rng.gen::<f64>() < p_confuse {
                        *v = dst;
                    }
                }
            }
        }
        ArchetypeKind::UnderSegmenter { p_erase } => {
            if fires {
                for comp in components(&out, is_foreground) {
                    if rng.gen::<f64>() < p_erase {
                        for p in comp {
                            out.data[p] = IGNORE_LABEL;
                        }
                    }
                }
            }
        }
        ArchetypeKind::OverGrader { p_upgrade } => {
            if fires {
                let top = (num_classes - 1) as u8;
                for v in out.data.iter_mut().filter(|v| is_foreground(**v)) {
                    if rng.gen::<f64>() < p_upgrade {
                        *v = (*v + 1).min(top);
                    }
                }
            }
        }
    }
    if arch.jitter_radius > 0 {
        for comp in components(&out, is_foreground) {
            let radius = rng.gen_range(0..=arch.jitter_radius);
            let grow = rng.gen::<bool>();
            if radius == 0 {
                continue;
            }
            if grow {
                dilate(&mut out, &comp, radius);
            } else {
                erode(&mut out, &comp, radius);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scene(seed: u64) -> (RgbImage, ClassMap) {
        gen_ground_truth(&SceneConfig::default(), seed).unwrap()
    }

    #[test]
    fn zero_shapes_is_all_background() {
        let cfg = SceneConfig {
            max_shapes: 0,
            ..SceneConfig::default()
        };
        let (_, m) = gen_ground_truth(&cfg, 3).unwrap();
        assert!(m.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn scenes_are_deterministic_and_legal() {
        assert_eq!(scene(11), scene(11));
        assert_ne!(scene(11).1, scene(12).1);
        for seed in 0..20 {
            let (img, m) = scene(seed);
            assert_eq!((img.width, img.height), (64, 64));
            assert!(m.data.iter().all(|&v| v < 4));
            // ellipses do not touch: every component is single-class
            for comp in components(&m, is_foreground) {
                assert!(comp.iter().all(|&p| m.data[p] == m.data[comp[0]]));
            }
        }
        assert!(gen_ground_truth(
            &SceneConfig {
                num_classes: 1,
                ..SceneConfig::default()
            },
            0
        )
        .is_err());
    }

    #[test]
    fn colours_track_classes() {
        // mean colour of each class region is close to its base colour
        let (img, m) = scene(5);
        for c in 0..4u8 {
            let px: Vec<usize> = (0..m.data.len()).filter(|&p| m.data[p] == c).collect();
            if px.len() < 50 {
                continue;
            }
            let base = class_color(c as usize, 4);
            for ch in 0..3 {
                let mean = px
                    .iter()
                    .map(|&p| img.data[p * 3 + ch] as f64 / 255.0)
                    .sum::<f64>()
                    / px.len() as f64;
                assert!(
                    (mean - base[ch]).abs() < 0.05,
                    "class {c} ch {ch}: {mean} vs {}",
                    base[ch]
                );
            }
        }
    }

    #[test]
    fn identity_archetype_returns_gold() {
        let (_, gold) = scene(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let faithful = RaterArchetype {
            jitter_radius: 0,
            ..RaterArchetype::new(ArchetypeKind::Faithful)
        };
        assert_eq!(
            apply_archetype(&gold, &faithful, 4, &mut rng).unwrap(),
            gold
        );
        for kind in [
            ArchetypeKind::Confuser {
                src: 2,
                dst: 3,
                p_confuse: 0.0,
            },
            ArchetypeKind::UnderSegmenter { p_erase: 0.0 },
            ArchetypeKind::OverGrader { p_upgrade: 0.0 },
        ] {
            let arch = RaterArchetype {
                kind,
                jitter_radius: 0,
                p_apply: 1.0,
            };
            assert_eq!(apply_archetype(&gold, &arch, 4, &mut rng).unwrap(), gold);
        }
    }

    #[test]
    fn full_erasure_marks_every_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = RaterArchetype {
            kind: ArchetypeKind::UnderSegmenter { p_erase: 1.0 },
            jitter_radius: 0,
            p_apply: 1.0,
        };
        for seed in 0..5 {
            let (_, gold) = scene(seed);
            let out = apply_archetype(&gold, &arch, 4, &mut rng).unwrap();
            for (g, o) in gold.data.iter().zip(&out.data) {
                assert_eq!(*o, if *g == 0 { 0 } else { IGNORE_LABEL });
            }
        }
    }

    #[test]
    fn certain_confusion_conserves_mass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let arch = RaterArchetype {
            kind: ArchetypeKind::Confuser {
                src: 2,
                dst: 3,
                p_confuse: 1.0,
            },
            jitter_radius: 0,
            p_apply: 1.0,
        };
        for seed in 0..10 {
            let (_, gold) = scene(seed);
            let out = apply_archetype(&gold, &arch, 4, &mut rng).unwrap();
            let (hg, ho) = (gold.histogram(), out.histogram());
            assert_eq!(ho[2], 0);
            assert_eq!(ho[3], hg[2] + hg[3]);
        }
    }

    #[test]
    fn over_grader_saturates_at_top_class() {
        let gold = ClassMap::new(4, 1, vec![0, 1, 2, 3]).unwrap();
        let arch = RaterArchetype {
            kind: ArchetypeKind::OverGrader { p_upgrade: 1.0 },
            jitter_radius: 0,
            p_apply: 1.0,
        };
        let out = apply_archetype(&gold, &arch, 4, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(out.data, vec![0, 2, 3, 3]);
    }

    #[test]
    fn jitter_moves_boundaries_by_at_most_the_radius() {
        // a single 5x5 square in a 13x13 map
        let mut gold = ClassMap::filled(13, 13, 0);
        for y in 4..9 {
            for x in 4..9 {
                gold.data[y * 13 + x] = 1;
            }
        }
        let arch = RaterArchetype {
            kind: ArchetypeKind::Faithful,
            jitter_radius: 2,
            p_apply: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = std::collections::BTreeSet::new();
        for _ in 0..40 {
            let out = apply_archetype(&gold, &arch, 2, &mut rng).unwrap();
            let fg = out.data.iter().filter(|&&v| v == 1).count();
            seen.insert(fg);
            assert!(out.data.iter().all(|&v| v <= 1));
        }
        // radius 0, eroded by 1 or 2, dilated by 1 or 2 (diamond growth)
        let expected: std::collections::BTreeSet<usize> = [25, 9, 1, 45, 69].into();
        assert_eq!(seen, expected);
    }

    #[test]
    fn spec_strings_round_trip() {
        let raters = default_raters();
        let s = format_raters(&raters);
        assert_eq!(
            s,
            "faithful@2:0.7,faithful@2:0.7,confuser:2:3:0.8@2:0.7,under:0.5@2:0.7"
        );
        assert_eq!(parse_raters(&s).unwrap(), raters);
        assert_eq!(
            "over:0.25@0:1".parse::<RaterArchetype>().unwrap(),
            RaterArchetype {
                kind: ArchetypeKind::OverGrader { p_upgrade: 0.25 },
                jitter_radius: 0,
                p_apply: 1.0
            }
        );
        assert!("under:1.5".parse::<RaterArchetype>().is_err());
        assert!("weird".parse::<RaterArchetype>().is_err());
        assert!(parse_raters("").is_err());
    }

    #[test]
    fn analytic_rows_are_stochastic() {
        for arch in default_raters()
            .into_iter()
            .chain(["over:0.4".parse().unwrap()])
        {
            for row in arch.analytic_confusion(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
        let m = default_raters()[2].analytic_confusion(4);
        assert!((m[2][3] - 0.56).abs() < 1e-12);
    }
}
