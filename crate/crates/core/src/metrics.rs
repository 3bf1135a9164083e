//! Per-exit segmentation quality and cost.

use std::fmt::Write as _;

use num_integer::Integer;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledImage;
use crate::error::{Error, Result};
use crate::model::{AdaptiveResult, MultiExitNet};
use crate::policy::ExitPolicy;

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Builds from row-major counts.
    pub fn from_counts(num_classes: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != num_classes * num_classes {
            return Err(Error::config("confusion counts must be K x K"));
        }
        Ok(Self {
            num_classes,
            counts,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(
        &mut self,
        pred: &[usize],
        gt: &[usize],
        ignore_label: Option<usize>,
    ) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::config(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if Some(g) == ignore_label {
                continue;
            }
            if g >= k || p >= k {
                return Err(Error::data(format!(
                    "class id out of range: gt {g}, pred {p}, K = {k}"
                )));
            }
            self.counts[g * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.num_classes != other.num_classes {
            return Err(Error::usage(
                "cannot merge confusion matrices of different sizes",
            ));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Mean IoU over classes with a nonzero union. Classes with an empty
    /// union are reported as `None` and left out of the mean.
    pub fn miou(&self) -> Result<MeanIou> {
        let k = self.num_classes;
        let fractions: Vec<(u64, u64)> = (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|g| self.get(g, c)).sum();
                (tp, row + col - tp)
            })
            .collect();
        let per_class: Vec<Option<f64>> = fractions
            .iter()
            .map(|&(tp, union)| (union > 0).then(|| tp as f64 / union as f64))
            .collect();
        let present: Vec<(u64, u64)> = fractions.into_iter().filter(|f| f.1 > 0).collect();
        if present.is_empty() {
            return Err(Error::data("mIoU undefined: no class has a nonzero union"));
        }
        let miou = exact_mean(&present).unwrap_or_else(|| {
            // Sorted so relabelling classes cannot change the result.
            let mut ious: Vec<f64> = per_class.iter().flatten().copied().collect();
            ious.sort_by(f64::total_cmp);
            ious.iter().sum::<f64>() / ious.len() as f64
        });
        Ok(MeanIou { miou, per_class })
    }
}

/// Mean of `tp / union` fractions as one correctly rounded division, when the
/// common-denominator form fits in 53 bits.
fn exact_mean(ratios: &[(u64, u64)]) -> Option<f64> {
    const LIMIT: u128 = 1 << 53;
    let mut denom: u128 = 1;
    for &(_, u) in ratios {
        denom = denom.checked_mul(u as u128 / denom.gcd(&(u as u128)))?;
        if denom >= LIMIT {
            return None;
        }
    }
    let mut num: u128 = 0;
    for &(tp, u) in ratios {
        num = num.checked_add(tp as u128 * (denom / u as u128))?;
    }
    let denom = denom.checked_mul(ratios.len() as u128)?;
    (num < LIMIT && denom < LIMIT).then(|| num as f64 / denom as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanIou {
    pub miou: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitReport {
    /// 1-based.
    pub exit: usize,
    pub miou: f64,
    pub per_class_iou: Vec<Option<f64>>,
    /// Mean per-image cumulative FLOPs through this exit, in units of 1e9.
    pub gflops: f64,
    /// Share of pixels finalized at exactly this exit.
    pub finalized_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub policy: String,
    pub method: String,
    pub model_id: String,
    pub dataset_id: String,
    pub num_images: usize,
    pub exits: Vec<ExitReport>,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub run: serde_json::Value,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    /// `exit,miou,gflops`, one row per exit.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("exit,miou,gflops\n");
        for e in &self.exits {
            writeln!(s, "{},{},{}", e.exit, e.miou, e.gflops).unwrap();
        }
        s
    }

    pub fn final_exit(&self) -> &ExitReport {
        self.exits.last().expect("reports have at least two exits")
    }
}

/// Accumulates anytime predictions and ledgers image by image.
#[derive(Debug, Clone)]
pub struct ReportBuilder {
    num_exits: usize,
    num_classes: usize,
    ignore_label: Option<usize>,
    matrices: Vec<ConfusionMatrix>,
    flops: Vec<u128>,
    finalized: Vec<u64>,
    pixels: u64,
    images: usize,
}

impl ReportBuilder {
    pub fn new(num_exits: usize, num_classes: usize, ignore_label: Option<usize>) -> Self {
        Self {
            num_exits,
            num_classes,
            ignore_label,
            matrices: vec![ConfusionMatrix::new(num_classes); num_exits],
            flops: vec![0; num_exits],
            finalized: vec![0; num_exits],
            pixels: 0,
            images: 0,
        }
    }

    pub fn add(&mut self, result: &AdaptiveResult, gt: &[usize]) -> Result<()> {
        if result.num_exits() != self.num_exits
            || result.ledger.exit_totals().len() != self.num_exits
            || result.per_exit_probs[0].channels() != self.num_classes
        {
            return Err(Error::usage(
                "result does not match the report's model configuration",
            ));
        }
        for n in 0..self.num_exits {
            self.matrices[n].accumulate(&result.anytime_prediction(n), gt, self.ignore_label)?;
            self.flops[n] += result.ledger.exit_totals()[n] as u128;
            self.finalized[n] += result.finalized_at(n + 1).len() as u64;
        }
        self.pixels += gt.len() as u64;
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ReportBuilder) -> Result<()> {
        if (self.num_exits, self.num_classes) != (other.num_exits, other.num_classes) {
            return Err(Error::usage(
                "cannot merge reports of different configurations",
            ));
        }
        for n in 0..self.num_exits {
            self.matrices[n].merge(&other.matrices[n])?;
            self.flops[n] += other.flops[n];
            self.finalized[n] += other.finalized[n];
        }
        self.pixels += other.pixels;
        self.images += other.images;
        Ok(())
    }

    pub fn matrices(&self) -> &[ConfusionMatrix] {
        &self.matrices
    }

    pub fn finish(
        &self,
        policy: &dyn ExitPolicy,
        model_id: &str,
        dataset_id: &str,
    ) -> Result<EvalReport> {
        if self.images == 0 {
            return Err(Error::data("no images evaluated"));
        }
        let exits = (0..self.num_exits)
            .map(|n| {
                let m = self.matrices[n].miou()?;
                Ok(ExitReport {
                    exit: n + 1,
                    miou: m.miou,
                    per_class_iou: m.per_class,
                    gflops: self.flops[n] as f64 / self.images as f64 / 1e9,
                    finalized_fraction: self.finalized[n] as f64 / self.pixels as f64,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport {
            policy: policy.descriptor(),
            method: policy.label(),
            model_id: model_id.to_string(),
            dataset_id: dataset_id.to_string(),
            num_images: self.images,
            exits,
            run: serde_json::Value::Null,
        })
    }
}

/// Report over already-computed results.
pub fn build_report<'a>(
    items: impl IntoIterator<Item = (&'a AdaptiveResult, &'a [usize])>,
    num_classes: usize,
    ignore_label: Option<usize>,
    policy: &dyn ExitPolicy,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    let mut items = items.into_iter().peekable();
    let num_exits = items
        .peek()
        .map(|(r, _)| r.num_exits())
        .ok_or_else(|| Error::data("no results"))?;
    let mut builder = ReportBuilder::new(num_exits, num_classes, ignore_label);
    for (r, gt) in items {
        builder.add(r, gt)?;
    }
    builder.finish(policy, model_id, dataset_id)
}

/// Runs the adaptive pass over every image (in parallel on the current rayon
/// pool) and reports per-exit mIoU and cost. Per-image partials are merged
/// in input order.
pub fn evaluate(
    net: &MultiExitNet,
    data: &[LabeledImage],
    policy: &dyn ExitPolicy,
    ignore_label: Option<usize>,
    model_id: &str,
    dataset_id: &str,
) -> Result<EvalReport> {
    let cfg = net.config();
    let partials: Vec<Result<ReportBuilder>> = data
        .par_iter()
        .map(|item| {
            let result = net.forward_adaptive(&item.image, policy)?;
            let mut b = ReportBuilder::new(cfg.num_exits, cfg.num_classes, ignore_label);
            b.add(&result, &item.labels)?;
            Ok(b)
        })
        .collect();
    let mut total = ReportBuilder::new(cfg.num_exits, cfg.num_classes, ignore_label);
    for p in partials {
        total.merge(&p?)?;
    }
    total.finish(policy, model_id, dataset_id)
}

/// Renders reports side by side: one row per method, an mIoU (%) and GFLOPs
/// column pair per exit.
pub fn format_table(reports: &[EvalReport], model_name: &str) -> String {
    let n = reports.iter().map(|r| r.exits.len()).max().unwrap_or(0);
    let mut s = String::from("| Method | Model |");
    for e in 1..=n {
        write!(s, " Exit {e} mIoU | Exit {e} GFLOPs |").unwrap();
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|---|".repeat(n));
    s.push('\n');
    for r in reports {
        write!(s, "| {} | {} |", r.method, model_name).unwrap();
        for e in &r.exits {
            write!(s, " {:.2} | {:.6} |", e.miou * 100.0, e.gflops).unwrap();
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{build_fixture_model, build_oracle_model, OracleSpec};
    use crate::model::ModelConfig;
    use crate::policy::{DensePolicy, UniformPolicy};
    use crate::tensor::{argmax_channels, Tensor};

    #[test]
    fn diagonal_and_ignored() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1], &[0, 1, 1], None).unwrap();
        assert_eq!(cm.counts(), &[1, 0, 0, 2]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1], &[255, 255], Some(255)).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn hand_counted_two_by_two() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1], None).unwrap();
        assert_eq!(cm.counts(), &[1, 1, 0, 2]);
    }

    #[test]
    fn out_of_range_is_data_error() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(matches!(
            cm.accumulate(&[2], &[0], None),
            Err(Error::Data(_))
        ));
        assert!(matches!(
            cm.accumulate(&[0], &[7], Some(255)),
            Err(Error::Data(_))
        ));
    }

    #[test]
    fn miou_hand_example() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 1, 0, 3]).unwrap();
        let m = cm.miou().unwrap();
        assert_eq!(m.per_class, vec![Some(2.0 / 3.0), Some(3.0 / 4.0)]);
        assert_eq!(m.miou, 17.0 / 24.0);
    }

    #[test]
    fn miou_perfect_and_excluded() {
        let cm = ConfusionMatrix::from_counts(3, vec![4, 0, 0, 0, 5, 0, 0, 0, 0]).unwrap();
        let m = cm.miou().unwrap();
        assert_eq!(m.miou, 1.0);
        assert_eq!(m.per_class[2], None);
        assert!(ConfusionMatrix::new(2).miou().is_err());
    }

    #[test]
    fn miou_large_coprime_unions_fall_back_to_floats() {
        // Unions 99991, 99989, 99971 and 99961 are prime; their product
        // exceeds 2^53 so the exact path is skipped.
        let cm = ConfusionMatrix::from_counts(
            4,
            vec![
                50000, 49991, 0, 0, 0, 49000, 50989, 0, 0, 0, 99000, 971, 0, 0, 0, 99961,
            ],
        )
        .unwrap();
        let m = cm.miou().unwrap();
        let ious: Vec<f64> = m.per_class.iter().flatten().copied().collect();
        assert!((m.miou - ious.iter().sum::<f64>() / 4.0).abs() < 1e-15);
        assert_eq!(exact_mean(&[(1, 3), (3, 4)]), Some(13.0 / 24.0));
    }

    #[test]
    fn dense_report_is_plain_head_evaluation() {
        let net = build_fixture_model(0, ModelConfig::default()).unwrap();
        let img = Tensor::from_fn(3, 5, 5, |c, y, x| ((c + 2 * y + 3 * x) % 7) as f32 / 7.0);
        let gt: Vec<usize> = (0..25).map(|i| i % 3).collect();
        let r = net.forward_adaptive(&img, &DensePolicy).unwrap();
        let report = build_report([(&r, gt.as_slice())], 3, None, &DensePolicy, "m", "d").unwrap();
        let dense = net.forward_dense(&img).unwrap();
        for (n, e) in report.exits.iter().enumerate() {
            let mut cm = ConfusionMatrix::new(3);
            cm.accumulate(&argmax_channels(&dense[n]).0, &gt, None)
                .unwrap();
            assert_eq!(e.miou, cm.miou().unwrap().miou);
            assert_eq!(e.gflops, r.ledger.exit_totals()[n] as f64 / 1e9);
        }
        assert_eq!(report.policy, "dense");
        assert!(report.to_csv().starts_with("exit,miou,gflops\n1,"));
        assert!(format_table(&[report], "toy").contains("| Dense | toy |"));
    }

    #[test]
    fn mismatched_results_rejected() {
        let a = build_oracle_model(&OracleSpec::identity(2, 2)).unwrap();
        let b = build_oracle_model(&OracleSpec::identity(2, 3)).unwrap();
        let img = Tensor::zeros(2, 2, 2);
        let ra = a.forward_adaptive(&img, &DensePolicy).unwrap();
        let rb = b.forward_adaptive(&img, &DensePolicy).unwrap();
        let gt = vec![0usize; 4];
        let err = build_report(
            [(&ra, gt.as_slice()), (&rb, gt.as_slice())],
            2,
            None,
            &DensePolicy,
            "m",
            "d",
        );
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn frozen_pixels_keep_their_label_across_exits() {
        let net = build_fixture_model(1, ModelConfig::default()).unwrap();
        let img = Tensor::from_fn(3, 6, 6, |c, y, x| ((c * 5 + y * 3 + x) % 11) as f32 / 11.0);
        let r = net
            .forward_adaptive(&img, &UniformPolicy::new(0.34).unwrap())
            .unwrap();
        for pos in 0..36 {
            let e = r.canvas.exit_map()[pos];
            let first = r.anytime_prediction(e - 1)[pos];
            for n in e - 1..4 {
                assert_eq!(r.anytime_prediction(n)[pos], first);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn additive_and_permutation_invariant(
                pairs in prop::collection::vec((0usize..4, 0usize..4), 1..200),
                split in 0usize..200,
                perm in Just((0..4).collect::<Vec<usize>>()).prop_shuffle(),
            ) {
                let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
                let gt: Vec<usize> = pairs.iter().map(|p| p.1).collect();
                let cut = split.min(pred.len());
                let mut whole = ConfusionMatrix::new(4);
                whole.accumulate(&pred, &gt, None).unwrap();
                let mut a = ConfusionMatrix::new(4);
                a.accumulate(&pred[..cut], &gt[..cut], None).unwrap();
                let mut b = ConfusionMatrix::new(4);
                b.accumulate(&pred[cut..], &gt[cut..], None).unwrap();
                a.merge(&b).unwrap();
                prop_assert_eq!(&a, &whole);
                prop_assert_eq!(whole.total(), pred.len() as u64);

                let m = whole.miou().unwrap();
                prop_assert!((0.0..=1.0).contains(&m.miou));
                let pp: Vec<usize> = pred.iter().map(|c| perm[*c]).collect();
                let pg: Vec<usize> = gt.iter().map(|c| perm[*c]).collect();
                let mut permuted = ConfusionMatrix::new(4);
                permuted.accumulate(&pp, &pg, None).unwrap();
                let pm = permuted.miou().unwrap();
                prop_assert_eq!(pm.miou, m.miou);
                for (c, &p) in perm.iter().enumerate() {
                    prop_assert_eq!(pm.per_class[p], m.per_class[c]);
                }
            }
        }
    }
}
