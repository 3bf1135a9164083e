//! Per-class threshold calibration.
//!
//! The pipeline runs in four steps:
//!
//! 1. [`accumulate_class_means`]: for each exit `n` and ground-truth class
//!    `k`, the mean probability vector over all training pixels of class `k`.
//! 2. [`average_over_layers`]: the mean of those vectors across exits, one
//!    row per class.
//! 3. [`confidence_gaps`]: top-1 minus top-2 of each row. A large gap marks a
//!    class the network is confident about.
//! 4. [`scale_thresholds`]: a single inverse min-max rescale of the gaps into
//!    `[alpha, beta]`. The most confident class gets `alpha`, the least
//!    confident gets `beta`.
//!
//! Probabilities come from dense forward passes, so steps 1-3 do not depend
//! on any threshold and can be reused across `alpha` values.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, FormatError, Result};
use crate::model::MultiExitNet;
use crate::tensor::Tensor;

/// Running sums for the class-mean table. Merging is exact up to the order of
/// `f64` additions, which callers keep deterministic.
#[derive(Debug, Clone)]
pub struct ClassMeanAccumulator {
    num_exits: usize,
    num_classes: usize,
    ignore_label: Option<usize>,
    sums: Vec<f64>,
    counts: Vec<u64>,
    images: usize,
}

impl ClassMeanAccumulator {
    pub fn new(num_exits: usize, num_classes: usize, ignore_label: Option<usize>) -> Self {
        Self {
            num_exits,
            num_classes,
            ignore_label,
            sums: vec![0.0; num_exits * num_classes * num_classes],
            counts: vec![0; num_classes],
            images: 0,
        }
    }

    /// Adds one image given its per-exit probability maps and labels.
    pub fn add(&mut self, probs: &[Tensor], labels: &[usize]) -> Result<()> {
        let k = self.num_classes;
        if probs.len() != self.num_exits {
            return Err(Error::config(format!(
                "expected {} exit maps, got {}",
                self.num_exits,
                probs.len()
            )));
        }
        for p in probs {
            if p.channels() != k || p.plane() != labels.len() {
                return Err(Error::config(format!(
                    "probability map {:?} does not match {} classes over {} labels",
                    p.shape(),
                    k,
                    labels.len()
                )));
            }
        }
        let plane = labels.len();
        for (pos, &label) in labels.iter().enumerate() {
            if Some(label) == self.ignore_label {
                continue;
            }
            if label >= k {
                return Err(Error::data(format!(
                    "label {label} out of range for {k} classes"
                )));
            }
            self.counts[label] += 1;
            for (n, p) in probs.iter().enumerate() {
                let row = (n * k + label) * k;
                for i in 0..k {
                    self.sums[row + i] += p.data()[i * plane + pos] as f64;
                }
            }
        }
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ClassMeanAccumulator) -> Result<()> {
        if (self.num_exits, self.num_classes) != (other.num_exits, other.num_classes) {
            return Err(Error::usage(
                "cannot merge class-mean accumulators of different shapes",
            ));
        }
        for (a, b) in self.sums.iter_mut().zip(&other.sums) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        self.images += other.images;
        Ok(())
    }

    pub fn finish(self) -> Result<ClassMeanTable> {
        if self.images == 0 {
            return Err(Error::data("calibration dataset is empty"));
        }
        let k = self.num_classes;
        let mut means = self.sums;
        for n in 0..self.num_exits {
            for class in 0..k {
                let count = self.counts[class];
                let row = &mut means[(n * k + class) * k..][..k];
                if count == 0 {
                    row.fill(0.0);
                } else {
                    for v in row.iter_mut() {
                        *v /= count as f64;
                    }
                }
            }
        }
        Ok(ClassMeanTable {
            num_exits: self.num_exits,
            num_classes: k,
            means,
            counts: self.counts,
        })
    }
}

/// `means[n][k]`: mean exit-`n` probability vector over pixels labelled `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMeanTable {
    num_exits: usize,
    num_classes: usize,
    means: Vec<f64>,
    counts: Vec<u64>,
}

impl ClassMeanTable {
    pub fn num_exits(&self) -> usize {
        self.num_exits
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Mean vector at 0-based exit `n` for class `k`, `None` if `k` never
    /// occurred.
    pub fn mean(&self, n: usize, k: usize) -> Option<&[f64]> {
        if self.counts[k] == 0 {
            return None;
        }
        let c = self.num_classes;
        Some(&self.means[(n * c + k) * c..][..c])
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn is_absent(&self, k: usize) -> bool {
        self.counts[k] == 0
    }

    pub fn absent_classes(&self) -> Vec<usize> {
        (0..self.num_classes)
            .filter(|k| self.is_absent(*k))
            .collect()
    }
}

/// Runs dense forward passes over `data` and averages exit probabilities per
/// ground-truth class. Images are processed in parallel on the current rayon
/// pool; partial sums are merged in input order.
pub fn accumulate_class_means(
    net: &MultiExitNet,
    data: &[LabeledImage],
    ignore_label: Option<usize>,
) -> Result<ClassMeanTable> {
    let cfg = net.config();
    let partials: Vec<Result<ClassMeanAccumulator>> = data
        .par_iter()
        .map(|item| {
            let probs = net.forward_dense(&item.image)?;
            let mut acc = ClassMeanAccumulator::new(cfg.num_exits, cfg.num_classes, ignore_label);
            acc.add(&probs, &item.labels)?;
            Ok(acc)
        })
        .collect();
    let mut total = ClassMeanAccumulator::new(cfg.num_exits, cfg.num_classes, ignore_label);
    for partial in partials {
        total.merge(&partial?)?;
    }
    total.finish()
}

/// Row `k` is the class-`k` mean vector averaged over exits; `None` rows are
/// absent classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassConfidenceMatrix {
    rows: Vec<Option<Vec<f64>>>,
}

impl ClassConfidenceMatrix {
    pub fn from_rows(rows: Vec<Option<Vec<f64>>>) -> Self {
        Self { rows }
    }

    pub fn rows(&self) -> &[Option<Vec<f64>>] {
        &self.rows
    }

    pub fn num_classes(&self) -> usize {
        self.rows.len()
    }
}

pub fn average_over_layers(table: &ClassMeanTable) -> ClassConfidenceMatrix {
    let k = table.num_classes;
    let rows = (0..k)
        .map(|class| {
            if table.is_absent(class) {
                return None;
            }
            let mut row = vec![0.0f64; k];
            for n in 0..table.num_exits {
                for (acc, v) in row.iter_mut().zip(table.mean(n, class).unwrap()) {
                    *acc += v;
                }
            }
            for v in row.iter_mut() {
                *v /= table.num_exits as f64;
            }
            Some(row)
        })
        .collect();
    ClassConfidenceMatrix { rows }
}

/// Largest minus second-largest entry per row. Absent classes give `None`.
pub fn confidence_gaps(matrix: &ClassConfidenceMatrix) -> Vec<Option<f64>> {
    matrix
        .rows
        .iter()
        .map(|row| {
            row.as_ref().map(|r| {
                let mut top = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for &v in r {
                    if v > top {
                        second = top;
                        top = v;
                    } else if v > second {
                        second = v;
                    }
                }
                top - second
            })
        })
        .collect()
}

/// Inverse min-max rescale of confidence gaps into `[alpha, beta]`.
///
/// The largest gap maps to exactly `alpha` and the smallest to exactly
/// `beta`. Absent classes get `beta` and do not take part in the min/max. If
/// every present gap is equal, all thresholds are `beta`.
pub fn scale_thresholds(gaps: &[Option<f64>], alpha: f64, beta: f64) -> Result<ThresholdVector> {
    check_alpha_beta(alpha, beta).map_err(Error::Config)?;
    let present: Vec<f64> = gaps.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(Error::data("no class present in calibration data"));
    }
    let min = present.iter().copied().fold(f64::INFINITY, f64::min);
    let max = present.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let thresholds = gaps
        .iter()
        .map(|g| match *g {
            None => beta,
            Some(_) if span == 0.0 => beta,
            Some(g) if g == max => alpha,
            Some(g) if g == min => beta,
            Some(g) => (1.0 - (g - min) / span) * (beta - alpha) + alpha,
        })
        .collect();
    let absent = gaps
        .iter()
        .enumerate()
        .filter(|(_, g)| g.is_none())
        .map(|(k, _)| k)
        .collect();
    ThresholdVector::new(thresholds, alpha, beta, absent)
}

fn check_alpha_beta(alpha: f64, beta: f64) -> std::result::Result<(), String> {
    if !(alpha > 0.0 && alpha <= 1.0 && beta > 0.0 && beta <= 1.0) {
        return Err(format!("alpha {alpha} and beta {beta} must lie in (0, 1]"));
    }
    if alpha >= beta {
        return Err(format!("alpha {alpha} must be smaller than beta {beta}"));
    }
    Ok(())
}

/// Per-class masking thresholds together with the range they were scaled to.
#[derive(Debug, Clone, PartialEq)]
pub struct ThresholdVector {
    thresholds: Vec<f64>,
    alpha: f64,
    beta: f64,
    absent: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ThresholdFile {
    version: u32,
    alpha: f64,
    beta: f64,
    num_classes: usize,
    thresholds: Vec<f64>,
    absent_classes: Vec<usize>,
}

impl ThresholdVector {
    pub fn new(thresholds: Vec<f64>, alpha: f64, beta: f64, absent: Vec<usize>) -> Result<Self> {
        let tv = Self {
            thresholds,
            alpha,
            beta,
            absent,
        };
        tv.validate().map_err(Error::Config)?;
        Ok(tv)
    }

    fn validate(&self) -> std::result::Result<(), String> {
        check_alpha_beta(self.alpha, self.beta)?;
        if self.thresholds.len() < 2 {
            return Err(format!(
                "need at least 2 classes, got {}",
                self.thresholds.len()
            ));
        }
        for (k, &t) in self.thresholds.iter().enumerate() {
            if !(t >= self.alpha && t <= self.beta) {
                return Err(format!(
                    "threshold {t} for class {k} outside [{}, {}]",
                    self.alpha, self.beta
                ));
            }
        }
        if let Some(k) = self.absent.iter().find(|k| **k >= self.thresholds.len()) {
            return Err(format!("absent class {k} out of range"));
        }
        Ok(())
    }

    pub fn values(&self) -> &[f64] {
        &self.thresholds
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn absent_classes(&self) -> &[usize] {
        &self.absent
    }

    pub fn num_classes(&self) -> usize {
        self.thresholds.len()
    }

    pub(crate) fn present_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.thresholds
            .iter()
            .enumerate()
            .filter(|(k, _)| !self.absent.contains(k))
            .map(|(_, t)| *t)
    }

    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        if self.thresholds.len() != num_classes {
            return Err(Error::config(format!(
                "thresholds cover {} classes but the model has {num_classes}",
                self.thresholds.len()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let file = ThresholdFile {
            version: 1,
            alpha: self.alpha,
            beta: self.beta,
            num_classes: self.thresholds.len(),
            thresholds: self.thresholds.clone(),
            absent_classes: self.absent.clone(),
        };
        serde_json::to_string_pretty(&file).expect("thresholds serialize") + "\n"
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self> {
        let file: ThresholdFile = serde_json::from_slice(bytes).map_err(FormatError::Json)?;
        if file.version != 1 {
            return Err(FormatError::UnsupportedVersion {
                format: "thresholds",
                version: file.version,
            }
            .into());
        }
        if file.num_classes != file.thresholds.len() {
            return Err(FormatError::Range(format!(
                "num_classes {} but {} thresholds",
                file.num_classes,
                file.thresholds.len()
            ))
            .into());
        }
        let tv = Self {
            thresholds: file.thresholds,
            alpha: file.alpha,
            beta: file.beta,
            absent: file.absent_classes,
        };
        tv.validate().map_err(FormatError::Range)?;
        Ok(tv)
    }
}

/// Everything computed before the `alpha`/`beta` rescale, kept so a sweep
/// can rescale without another pass over the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Calibration {
    pub class_means: ClassMeanTable,
    pub confidence: ClassConfidenceMatrix,
    pub gaps: Vec<Option<f64>>,
}

impl Calibration {
    pub fn from_table(class_means: ClassMeanTable) -> Self {
        let confidence = average_over_layers(&class_means);
        let gaps = confidence_gaps(&confidence);
        Self {
            class_means,
            confidence,
            gaps,
        }
    }

    pub fn run(
        net: &MultiExitNet,
        data: &[LabeledImage],
        ignore_label: Option<usize>,
    ) -> Result<Self> {
        Ok(Self::from_table(accumulate_class_means(
            net,
            data,
            ignore_label,
        )?))
    }

    pub fn thresholds(&self, alpha: f64, beta: f64) -> Result<ThresholdVector> {
        scale_thresholds(&self.gaps, alpha, beta)
    }

    /// Diagnostics document: the class-mean table in `[exit][class][i]`
    /// form, the averaged matrix and the raw gaps.
    pub fn diagnostics_json(&self) -> serde_json::Value {
        let t = &self.class_means;
        let means: Vec<Vec<Option<Vec<f64>>>> = (0..t.num_exits)
            .map(|n| {
                (0..t.num_classes)
                    .map(|k| t.mean(n, k).map(<[f64]>::to_vec))
                    .collect()
            })
            .collect();
        serde_json::json!({
            "num_exits": t.num_exits,
            "num_classes": t.num_classes,
            "pixel_counts": t.counts,
            "absent_classes": t.absent_classes(),
            "class_means": means,
            "confidence_matrix": self.confidence.rows,
            "confidence_gaps": self.gaps,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(k: usize, h: usize, w: usize, data: &[f32]) -> Tensor {
        Tensor::new(k, h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn hand_accumulation() {
        // Channel-major: class 0 plane then class 1 plane.
        let p = probs(2, 1, 2, &[0.8, 0.4, 0.2, 0.6]);
        let mut acc = ClassMeanAccumulator::new(1, 2, None);
        acc.add(&[p], &[0, 1]).unwrap();
        let table = acc.finish().unwrap();
        let m0 = table.mean(0, 0).unwrap();
        let m1 = table.mean(0, 1).unwrap();
        assert!((m0[0] - 0.8).abs() < 1e-7 && (m0[1] - 0.2).abs() < 1e-7);
        assert!((m1[0] - 0.4).abs() < 1e-7 && (m1[1] - 0.6).abs() < 1e-7);
    }

    #[test]
    fn symmetric_average() {
        let p = probs(2, 1, 2, &[1.0, 0.0, 0.0, 1.0]);
        let mut acc = ClassMeanAccumulator::new(1, 2, None);
        acc.add(&[p], &[0, 0]).unwrap();
        assert_eq!(acc.finish().unwrap().mean(0, 0).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn absent_class_flagged() {
        let p = probs(3, 1, 2, &[0.5, 0.2, 0.3, 0.6, 0.2, 0.2]);
        let mut acc = ClassMeanAccumulator::new(1, 3, None);
        acc.add(&[p], &[0, 1]).unwrap();
        let table = acc.finish().unwrap();
        assert_eq!(table.counts()[2], 0);
        assert!(table.is_absent(2));
        assert!(table.mean(0, 2).is_none());
        assert_eq!(table.absent_classes(), vec![2]);
    }

    #[test]
    fn ignore_and_range() {
        let p = probs(2, 1, 2, &[0.8, 0.4, 0.2, 0.6]);
        let mut acc = ClassMeanAccumulator::new(1, 2, Some(255));
        acc.add(std::slice::from_ref(&p), &[0, 255]).unwrap();
        let t = acc.finish().unwrap();
        assert_eq!(t.counts(), &[1, 0]);
        let mut acc = ClassMeanAccumulator::new(1, 2, None);
        assert!(matches!(acc.add(&[p], &[0, 5]), Err(Error::Data(_))));
    }

    #[test]
    fn empty_dataset_is_error() {
        let acc = ClassMeanAccumulator::new(2, 2, None);
        assert!(matches!(acc.finish(), Err(Error::Data(_))));
    }

    #[test]
    fn layer_average_small_cases() {
        let mut acc = ClassMeanAccumulator::new(1, 2, None);
        acc.add(&[probs(2, 1, 1, &[0.3, 0.7])], &[1]).unwrap();
        let t = acc.finish().unwrap();
        let m = average_over_layers(&t);
        assert_eq!(m.rows()[1].as_deref(), t.mean(0, 1));
        assert!(m.rows()[0].is_none());

        let mut acc = ClassMeanAccumulator::new(2, 2, None);
        acc.add(
            &[probs(2, 1, 1, &[1.0, 0.0]), probs(2, 1, 1, &[0.0, 1.0])],
            &[0],
        )
        .unwrap();
        let m = average_over_layers(&acc.finish().unwrap());
        assert_eq!(m.rows()[0].as_deref(), Some(&[0.5, 0.5][..]));
    }

    #[test]
    fn layer_average_matches_summation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_xoshiro::SplitMix64::seed_from_u64(11);
        let (n, k) = (4, 3);
        let mut acc = ClassMeanAccumulator::new(n, k, None);
        let maps: Vec<Tensor> = (0..n)
            .map(|_| Tensor::from_fn(k, 2, 3, |_, _, _| rng.random::<f32>()))
            .collect();
        let labels: Vec<usize> = (0..6).map(|i| i % k).collect();
        acc.add(&maps, &labels).unwrap();
        let table = acc.finish().unwrap();
        let m = average_over_layers(&table);
        for class in 0..k {
            for i in 0..k {
                let mut s = 0.0;
                for layer in 0..n {
                    s += table.mean(layer, class).unwrap()[i];
                }
                assert!((m.rows()[class].as_ref().unwrap()[i] - s / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gaps() {
        let m = ClassConfidenceMatrix::from_rows(vec![
            Some(vec![0.7, 0.2, 0.1]),
            Some(vec![0.0, 1.0, 0.0]),
            Some(vec![1.0 / 3.0; 3]),
            None,
        ]);
        let g = confidence_gaps(&m);
        assert!((g[0].unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(g[1], Some(1.0));
        assert_eq!(g[2], Some(0.0));
        assert_eq!(g[3], None);
    }

    #[test]
    fn scaling_endpoints_and_middle() {
        let t = scale_thresholds(&[Some(0.5), Some(0.1)], 0.9, 0.998).unwrap();
        assert_eq!(t.values(), &[0.9, 0.998]);
        let t = scale_thresholds(&[Some(0.5), Some(0.3), Some(0.1)], 0.9, 0.998).unwrap();
        assert_eq!(t.values()[0], 0.9);
        assert_eq!(t.values()[2], 0.998);
        assert!((t.values()[1] - 0.949).abs() < 1e-12);
    }

    #[test]
    fn scaling_degenerate_and_absent() {
        let t = scale_thresholds(&[Some(0.4), Some(0.4)], 0.9, 0.998).unwrap();
        assert_eq!(t.values(), &[0.998, 0.998]);
        let t = scale_thresholds(&[Some(0.9), None, Some(0.1)], 0.9, 0.998).unwrap();
        assert_eq!(t.values(), &[0.9, 0.998, 0.998]);
        assert_eq!(t.absent_classes(), &[1]);
        assert!(matches!(
            scale_thresholds(&[Some(0.5), Some(0.1)], 0.998, 0.998),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            scale_thresholds(&[Some(0.5), Some(0.1)], 0.99, 0.9),
            Err(Error::Config(_))
        ));
        assert!(scale_thresholds(&[None, None], 0.9, 0.998).is_err());
    }

    #[test]
    fn json_round_trip_and_validation() {
        let t = scale_thresholds(&[Some(0.5), Some(0.3), None], 0.9, 0.998).unwrap();
        let back = ThresholdVector::from_json(t.to_json().as_bytes()).unwrap();
        assert_eq!(back, t);

        let bad = r#"{"version":1,"alpha":0.9,"beta":0.998,"num_classes":2,"thresholds":[1.5,0.998],"absent_classes":[]}"#;
        assert!(matches!(
            ThresholdVector::from_json(bad.as_bytes()),
            Err(Error::Format(FormatError::Range(_)))
        ));
        let bad_k = r#"{"version":1,"alpha":0.9,"beta":0.998,"num_classes":3,"thresholds":[0.9,0.998],"absent_classes":[]}"#;
        assert!(ThresholdVector::from_json(bad_k.as_bytes()).is_err());
        assert!(matches!(
            ThresholdVector::from_json(b"{nope"),
            Err(Error::Format(FormatError::Json(_)))
        ));
        assert!(t.check_classes(4).is_err());
        assert!(t.check_classes(3).is_ok());
    }

    proptest! {
        #[test]
        fn scaling_reverses_order(gaps in prop::collection::vec(0.0f64..1.0, 2..12), alpha in 0.5f64..0.95) {
            let beta = 0.998;
            let g: Vec<Option<f64>> = gaps.iter().copied().map(Some).collect();
            let t = scale_thresholds(&g, alpha, beta).unwrap();
            for i in 0..gaps.len() {
                prop_assert!(t.values()[i] >= alpha && t.values()[i] <= beta);
                for j in 0..gaps.len() {
                    if gaps[i] > gaps[j] {
                        prop_assert!(t.values()[i] < t.values()[j]);
                    }
                }
            }
        }

        #[test]
        fn class_permutation_permutes_thresholds(
            gaps in prop::collection::vec(0.0f64..1.0, 3..8),
            seed in any::<u64>(),
        ) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..gaps.len()).collect();
            perm.shuffle(&mut rand_xoshiro::SplitMix64::seed_from_u64(seed));
            let g: Vec<Option<f64>> = gaps.iter().copied().map(Some).collect();
            let pg: Vec<Option<f64>> = perm.iter().map(|&i| g[i]).collect();
            let t = scale_thresholds(&g, 0.9, 0.998).unwrap();
            let pt = scale_thresholds(&pg, 0.9, 0.998).unwrap();
            for (new, &old) in perm.iter().enumerate() {
                prop_assert_eq!(pt.values()[new], t.values()[old]);
            }
        }
    }
}
