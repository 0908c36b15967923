//! Agreement between class maps: Cohen's kappa, accuracy and IoU.

use std::fmt;
use std::str::FromStr;

use crate::data::ClassMap;
use crate::error::{Error, Result};

/// Label for unannotated pixels.
pub const IGNORE_LABEL: u8 = 255;

/// Pixel counts `n[a][b]` of prediction class `a` against reference class `b`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Contingency {
    num_classes: usize,
    counts: Vec<u64>,
    total: u64,
}

impl Contingency {
    pub fn new(num_classes: usize) -> Self {
        Contingency {
            num_classes,
            counts: vec![0; num_classes * num_classes],
            total: 0,
        }
    }

    /// Row-major `C x C` counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::InvalidArgument(format!(
                "{} counts for {num_classes} classes",
                counts.len()
            )));
        }
        let total = counts.iter().sum();
        Ok(Contingency {
            num_classes,
            counts,
            total,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, pred: usize, reference: usize) -> u64 {
        self.counts[pred * self.num_classes + reference]
    }

    pub fn record(&mut self, pred: usize, reference: usize) {
        self.counts[pred * self.num_classes + reference] += 1;
        self.total += 1;
    }

    /// Adds another table's counts into this one.
    pub fn merge(&mut self, other: &Contingency) -> Result<()> {
        if other.num_classes != self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "cannot merge {} and {} class tables",
                self.num_classes, other.num_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.total += other.total;
        Ok(())
    }

    pub fn transpose(&self) -> Contingency {
        let c = self.num_classes;
        let mut counts = vec![0; c * c];
        for a in 0..c {
            for b in 0..c {
                counts[b * c + a] = self.get(a, b);
            }
        }
        Contingency {
            num_classes: c,
            counts,
            total: self.total,
        }
    }

    /// Prediction marginals.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts
            .chunks(self.num_classes)
            .map(|r| r.iter().sum())
            .collect()
    }

    /// Reference marginals.
    pub fn col_sums(&self) -> Vec<u64> {
        let c = self.num_classes;
        (0..c)
            .map(|b| (0..c).map(|a| self.get(a, b)).sum())
            .collect()
    }
}

/// Counts paired pixels, skipping any pixel where either map holds the
/// ignore label.
pub fn contingency(
    pred: &ClassMap,
    reference: &ClassMap,
    num_classes: usize,
    ignore_label: Option<u8>,
) -> Result<Contingency> {
    if (pred.width, pred.height) != (reference.width, reference.height) {
        return Err(Error::shape(
            "contingency",
            format!(
                "prediction {}x{} vs reference {}x{}",
                pred.width, pred.height, reference.width, reference.height
            ),
        ));
    }
    let mut table = Contingency::new(num_classes);
    for (&a, &b) in pred.data.iter().zip(&reference.data) {
        if ignore_label.is_some_and(|ig| a == ig || b == ig) {
            continue;
        }
        let (ai, bi) = (a as usize, b as usize);
        if ai >= num_classes || bi >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class id {} out of range for {num_classes} classes",
                ai.max(bi)
            )));
        }
        table.record(ai, bi);
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Weighting {
    #[default]
    Unweighted,
    /// Disagreement weights `(a - b)^2 / (C - 1)^2`.
    Quadratic,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" | "unweighted" => Ok(Weighting::Unweighted),
            "quadratic" => Ok(Weighting::Quadratic),
            other => Err(Error::InvalidArgument(format!(
                "weighting must be none or quadratic, got {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Weighting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Weighting::Unweighted => "none",
            Weighting::Quadratic => "quadratic",
        })
    }
}

/// Cohen's kappa of a table. When chance agreement is total (both sides use
/// a single, identical class) the value is 1.0 for perfect agreement and
/// [`Error::UndefinedKappa`] otherwise.
pub fn kappa(table: &Contingency, weighting: Weighting) -> Result<f64> {
    if table.total == 0 {
        return Err(Error::EmptyContingency);
    }
    let c = table.num_classes;
    let n = table.total as f64;
    let rows = table.row_sums();
    let cols = table.col_sums();
    let weight = |a: usize, b: usize| -> f64 {
        match weighting {
            Weighting::Unweighted => (a != b) as u8 as f64,
            Weighting::Quadratic => {
                let d = a as f64 - b as f64;
                d * d / ((c - 1) as f64).powi(2)
            }
        }
    };
    // disagreement form: 1 - observed / expected, both weighted
    let mut observed = 0.0;
    let mut expected = 0.0;
    let mut chance_disagreement = false;
    for a in 0..c {
        for b in 0..c {
            if a == b {
                continue;
            }
            let w = weight(a, b);
            observed += w * table.get(a, b) as f64 / n;
            expected += w * (rows[a] as f64 / n) * (cols[b] as f64 / n);
            chance_disagreement |= rows[a] > 0 && cols[b] > 0;
        }
    }
    if !chance_disagreement {
        let perfect = (0..c).all(|a| table.get(a, a) == rows[a]);
        return if perfect {
            Ok(1.0)
        } else {
            Err(Error::UndefinedKappa)
        };
    }
    Ok(1.0 - observed / expected)
}

/// Fraction of counted pixels on the diagonal.
pub fn accuracy(table: &Contingency) -> Result<f64> {
    if table.total == 0 {
        return Err(Error::EmptyContingency);
    }
    let diag: u64 = (0..table.num_classes).map(|a| table.get(a, a)).sum();
    Ok(diag as f64 / table.total as f64)
}

/// Per-class IoU (`None` for classes absent from both sides) and their mean.
pub fn iou(table: &Contingency) -> Result<(Vec<Option<f64>>, f64)> {
    if table.total == 0 {
        return Err(Error::EmptyContingency);
    }
    let rows = table.row_sums();
    let cols = table.col_sums();
    let per_class: Vec<Option<f64>> = (0..table.num_classes)
        .map(|k| {
            let inter = table.get(k, k);
            let union = rows[k] + cols[k] - inter;
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = present.iter().sum::<f64>() / present.len() as f64;
    Ok((per_class, mean))
}

/// How metrics over several images are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// One table summed over all pixels of all images.
    #[default]
    Pooled,
    /// Metrics per image, then averaged over the images with counted pixels.
    PerImage,
}

impl FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pooled" => Ok(Aggregation::Pooled),
            "per-image" => Ok(Aggregation::PerImage),
            other => Err(Error::InvalidArgument(format!(
                "aggregation must be pooled or per-image, got {other:?}"
            ))),
        }
    }
}

/// The full set of scores for one (prediction, reference) pairing.
#[derive(Clone, Debug, PartialEq)]
pub struct Scores {
    pub kappa_unweighted: f64,
    pub kappa_quadratic: f64,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub class_iou: Vec<Option<f64>>,
    /// Images that contributed counted pixels.
    pub images: usize,
}

impl Scores {
    pub fn from_table(table: &Contingency) -> Result<Self> {
        let (class_iou, mean_iou) = iou(table)?;
        Ok(Scores {
            kappa_unweighted: kappa(table, Weighting::Unweighted)?,
            kappa_quadratic: kappa(table, Weighting::Quadratic)?,
            accuracy: accuracy(table)?,
            mean_iou,
            class_iou,
            images: 1,
        })
    }
}

/// Scores over `(prediction, reference)` pairs, ignoring [`IGNORE_LABEL`].
pub fn evaluate(
    pairs: &[(&ClassMap, &ClassMap)],
    num_classes: usize,
    aggregation: Aggregation,
) -> Result<Scores> {
    let tables = pairs
        .iter()
        .map(|(p, r)| contingency(p, r, num_classes, Some(IGNORE_LABEL)))
        .collect::<Result<Vec<_>>>()?;
    let used: Vec<&Contingency> = tables.iter().filter(|t| t.total > 0).collect();
    match aggregation {
        Aggregation::Pooled => {
            let mut pooled = Contingency::new(num_classes);
            for t in &used {
                pooled.merge(t)?;
            }
            let mut scores = Scores::from_table(&pooled)?;
            scores.images = used.len();
            Ok(scores)
        }
        Aggregation::PerImage => {
            if used.is_empty() {
                return Err(Error::EmptyContingency);
            }
            let each = used
                .iter()
                .map(|t| Scores::from_table(t))
                .collect::<Result<Vec<_>>>()?;
            let k = each.len() as f64;
            let mean = |f: fn(&Scores) -> f64| each.iter().map(f).sum::<f64>() / k;
            let class_iou = (0..num_classes)
                .map(|c| {
                    let vals: Vec<f64> = each.iter().filter_map(|s| s.class_iou[c]).collect();
                    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
                })
                .collect();
            Ok(Scores {
                kappa_unweighted: mean(|s| s.kappa_unweighted),
                kappa_quadratic: mean(|s| s.kappa_quadratic),
                accuracy: mean(|s| s.accuracy),
                mean_iou: mean(|s| s.mean_iou),
                class_iou,
                images: each.len(),
            })
        }
    }
}
