//! Overlap metrics on binarized masks and the BCE + soft-IoU training loss.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Probabilities are clamped into `[BCE_EPS, 1 − BCE_EPS]` before the log.
pub const BCE_EPS: f64 = 1e-7;
/// Additive smoothing in the soft-IoU ratio.
pub const IOU_SMOOTH: f64 = 1.0;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub iou: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    // 0/0 means both sides agree there is nothing to find
    if den == 0 { 1.0 } else { num as f64 / den as f64 }
}

impl MetricsReport {
    pub fn from_counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        let total = tp + fp + fn_ + tn;
        Self {
            dsc: ratio(2 * tp, 2 * tp + fp + fn_),
            iou: ratio(tp, tp + fp + fn_),
            se: ratio(tp, tp + fn_),
            sp: ratio(tn, tn + fp),
            acc: ratio(tp + tn, total),
            tp,
            fp,
            fn_,
            tn,
        }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

/// Binarizes `pred` at `threshold` (`p >= threshold` is foreground) and
/// counts agreement with the binary `truth`.
pub fn compute_metrics<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, threshold: f64) -> Result<MetricsReport> {
    if pred.shape() != truth.shape() {
        return Err(Error::shape("compute_metrics", pred.shape(), truth.shape()));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0u64, 0u64, 0u64, 0u64);
    let th = T::of(threshold);
    for (&p, &y) in pred.data().iter().zip(truth.data()) {
        let y = if y == T::one() {
            true
        } else if y == T::zero() {
            false
        } else {
            return Err(Error::invalid("compute_metrics", format!("truth value {y} is not 0 or 1")));
        };
        match (p >= th, y) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(MetricsReport::from_counts(tp, fp, fn_, tn))
}

/// Per-image metrics for a batch laid out `[B, ...]`.
pub fn batch_metrics<T: Scalar>(pred: &Tensor<T>, truth: &Tensor<T>, threshold: f64) -> Result<Vec<MetricsReport>> {
    if pred.shape() != truth.shape() || pred.rank() == 0 {
        return Err(Error::shape("batch_metrics", pred.shape(), truth.shape()));
    }
    let b = pred.dim(0);
    let per = pred.numel() / b.max(1);
    (0..b)
        .map(|i| {
            let slice = |t: &Tensor<T>| Tensor::new(vec![per], t.data()[i * per..(i + 1) * per].to_vec());
            compute_metrics(&slice(pred)?, &slice(truth)?, threshold)
        })
        .collect()
}

/// Mean and (population) standard deviation of each fraction over images.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub dsc: f64,
    pub iou: f64,
    pub se: f64,
    pub sp: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub count: usize,
    pub mean: MetricSummary,
    pub std: MetricSummary,
}

impl Aggregate {
    pub fn from_reports(reports: &[MetricsReport]) -> Self {
        let n = reports.len().max(1) as f64;
        let pick: [fn(&MetricsReport) -> f64; 5] = [|r| r.dsc, |r| r.iou, |r| r.se, |r| r.sp, |r| r.acc];
        let mut mean = [0.0; 5];
        let mut std = [0.0; 5];
        for (k, f) in pick.iter().enumerate() {
            let m = reports.iter().map(f).sum::<f64>() / n;
            let var = reports.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n;
            mean[k] = m;
            std[k] = var.sqrt();
        }
        let summary = |v: [f64; 5]| MetricSummary {
            dsc: v[0],
            iou: v[1],
            se: v[2],
            sp: v[3],
            acc: v[4],
        };
        Self {
            count: reports.len(),
            mean: summary(mean),
            std: summary(std),
        }
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    id: &'a str,
    dsc: f64,
    iou: f64,
    se: f64,
    sp: f64,
    acc: f64,
    tp: Option<u64>,
    fp: Option<u64>,
    #[serde(rename = "fn")]
    fn_: Option<u64>,
    tn: Option<u64>,
}

/// One row per image, then `mean` and `std` rows (count columns left empty).
pub fn write_report_csv(path: &Path, rows: &[(String, MetricsReport)]) -> Result<Aggregate> {
    let reports: Vec<MetricsReport> = rows.iter().map(|(_, r)| *r).collect();
    let agg = Aggregate::from_reports(&reports);
    let csv_err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for (id, r) in rows {
        w.serialize(CsvRow {
            id,
            dsc: r.dsc,
            iou: r.iou,
            se: r.se,
            sp: r.sp,
            acc: r.acc,
            tp: Some(r.tp),
            fp: Some(r.fp),
            fn_: Some(r.fn_),
            tn: Some(r.tn),
        })
        .map_err(csv_err)?;
    }
    for (id, s) in [("mean", agg.mean), ("std", agg.std)] {
        w.serialize(CsvRow {
            id,
            dsc: s.dsc,
            iou: s.iou,
            se: s.se,
            sp: s.sp,
            acc: s.acc,
            tp: None,
            fp: None,
            fn_: None,
            tn: None,
        })
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(agg)
}

impl<T: Scalar> Tape<'_, T> {
    /// Mean binary cross-entropy of probabilities `p` against a constant
    /// target of the same shape.
    pub fn bce_loss(&self, p: &Var<T>, truth: &Tensor<T>) -> Result<Var<T>> {
        if p.shape() != truth.shape() {
            return Err(Error::shape("bce_loss", p.shape(), truth.shape()));
        }
        let (lo, hi) = (T::of(BCE_EPS), T::of(1.0 - BCE_EPS));
        let n = T::of(p.value().numel() as f64);
        let mut acc = 0.0f64;
        for (&pv, &y) in p.value().data().iter().zip(truth.data()) {
            let pc = pv.max(lo).min(hi).as_f64();
            let y = y.as_f64();
            acc -= y * pc.ln() + (1.0 - y) * (1.0 - pc).ln();
        }
        let out = Tensor::scalar(T::of(acc) / n);
        let pv = p.value().clone();
        let y = truth.clone();
        Ok(self.record(out, &[p], move |g, _| {
            let scale = g.item()? / n;
            let grad = pv.zip_map(&y, |pv, yv| {
                if pv < lo || pv > hi {
                    T::zero()
                } else {
                    scale * (pv - yv) / (pv * (T::one() - pv))
                }
            })?;
            Ok(vec![Some(grad)])
        }))
    }

    /// `1 − (Σp·y + 1)/(Σp + Σy − Σp·y + 1)` per image, averaged over the
    /// leading batch axis.
    pub fn soft_iou_loss(&self, p: &Var<T>, truth: &Tensor<T>) -> Result<Var<T>> {
        if p.shape() != truth.shape() || p.rank() == 0 {
            return Err(Error::shape("soft_iou_loss", p.shape(), truth.shape()));
        }
        let axes: Vec<usize> = (1..p.rank()).collect();
        let y = self.constant(truth.clone());
        let py = self.mul(p, &y)?;
        let (inter, sp, sy) = if axes.is_empty() {
            (py, p.clone(), y)
        } else {
            (
                self.sum(&py, &axes, false)?,
                self.sum(p, &axes, false)?,
                self.sum(&y, &axes, false)?,
            )
        };
        let num = self.add_scalar(&inter, IOU_SMOOTH);
        let union = self.sub(&self.add(&sp, &sy)?, &inter)?;
        let den = self.add_scalar(&union, IOU_SMOOTH);
        let iou = self.div(&num, &den)?;
        let loss = self.add_scalar(&self.neg(&iou), 1.0);
        Ok(self.mean_all(&loss))
    }

    /// Unit-weighted sum of [`Tape::bce_loss`] and [`Tape::soft_iou_loss`].
    pub fn total_loss(&self, p: &Var<T>, truth: &Tensor<T>) -> Result<Var<T>> {
        let bce = self.bce_loss(p, truth)?;
        let iou = self.soft_iou_loss(p, truth)?;
        self.add(&bce, &iou)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradient;
    use crate::rng::SeededRng;

    fn random_mask(rng: &mut SeededRng, n: usize, p: f64) -> Tensor<f64> {
        Tensor::from_fn([n, n], |_| if rng.bernoulli(p) { 1.0 } else { 0.0 })
    }

    #[test]
    fn perfect_and_disjoint() {
        let a = Tensor::<f64>::from_f64([4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        let r = compute_metrics(&a, &a, 0.5).unwrap();
        assert_eq!((r.dsc, r.iou, r.se, r.sp, r.acc), (1.0, 1.0, 1.0, 1.0, 1.0));
        let b = Tensor::<f64>::from_f64([4], &[0.0, 0.0, 1.0, 1.0]).unwrap();
        let r = compute_metrics(&a, &b, 0.5).unwrap();
        assert_eq!((r.dsc, r.iou, r.se), (0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_empty_is_perfect() {
        let z = Tensor::<f64>::zeros([8, 8]);
        let r = compute_metrics(&z, &z, 0.5).unwrap();
        assert_eq!((r.dsc, r.iou, r.se), (1.0, 1.0, 1.0));
        assert_eq!(r.tn, 64);
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Tensor::<f64>::zeros([4]);
        assert!(compute_metrics(&a, &Tensor::zeros([5]), 0.5).is_err());
        let half = Tensor::full([4], 0.5);
        assert!(compute_metrics(&a, &half, 0.5).is_err());
    }

    #[test]
    fn brute_force_oracle_on_random_pairs() {
        let mut rng = SeededRng::new(11);
        for _ in 0..1000 {
            let p = rng.uniform(0.0, 1.0);
            let pred = Tensor::<f64>::from_fn([16, 16], |_| rng.uniform(0.0, 1.0) * p * 2.0);
            let density = rng.uniform(0.0, 1.0);
            let truth = random_mask(&mut rng, 16, density);
            let r = compute_metrics(&pred, &truth, 0.5).unwrap();
            let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
            for i in 0..16 {
                for j in 0..16 {
                    let a = pred.at(&[i, j]) >= 0.5;
                    let b = truth.at(&[i, j]) == 1.0;
                    if a && b {
                        tp += 1;
                    } else if a {
                        fp += 1;
                    } else if b {
                        fn_ += 1;
                    } else {
                        tn += 1;
                    }
                }
            }
            assert_eq!((r.tp, r.fp, r.fn_, r.tn), (tp, fp, fn_, tn));
            assert_eq!(r.total(), 256);
            assert!(r.dsc >= r.iou);
            for v in [r.dsc, r.iou, r.se, r.sp, r.acc] {
                assert!((0.0..=1.0).contains(&v));
            }
            assert_eq!(r.acc, (tp + tn) as f64 / 256.0);
            // symmetry of DSC after binarization
            let binar = pred.map(|v| if v >= 0.5 { 1.0 } else { 0.0 });
            let s = compute_metrics(&truth, &binar, 0.5).unwrap();
            assert_eq!(s.dsc, r.dsc);
        }
    }

    #[test]
    fn bce_known_values() {
        let tape = Tape::<f64>::new();
        let y = Tensor::from_f64([4], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let half = tape.leaf(Tensor::full([4], 0.5));
        let l = tape.bce_loss(&half, &y).unwrap().value().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-12);
        let exact = tape.leaf(y.clone());
        let l = tape.bce_loss(&exact, &y).unwrap().value().item().unwrap();
        assert!(l > 0.0 && l < 1e-6);
    }

    #[test]
    fn soft_iou_limits() {
        let tape = Tape::<f64>::new();
        let y = Tensor::from_f64([1, 4], &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let p = tape.leaf(y.clone());
        assert!(tape.soft_iou_loss(&p, &y).unwrap().value().item().unwrap().abs() < 1e-12);
        let z = Tensor::zeros([1, 4]);
        let p = tape.leaf(z.clone());
        assert!(tape.soft_iou_loss(&p, &z).unwrap().value().item().unwrap().abs() < 1e-12);
        let total = tape.total_loss(&tape.leaf(y.clone()), &y).unwrap().value().item().unwrap();
        assert!((0.0..1e-6).contains(&total));
    }

    #[test]
    fn soft_iou_tracks_hard_iou_on_near_binary_predictions() {
        let mut rng = SeededRng::new(5);
        for _ in 0..20 {
            let truth = random_mask(&mut rng, 32, 0.3);
            let guess = random_mask(&mut rng, 32, 0.3);
            // mostly right, with a few flipped pixels, pushed 0.005 off binary
            let pred = truth.zip_map(&guess, |t, g| if g == 1.0 && t == 0.0 { 0.995 } else { t }).unwrap();
            let pred = pred.map(|v| if v == 1.0 { 0.995 } else if v == 0.0 { 0.005 } else { v });
            let hard = compute_metrics(&pred, &truth, 0.5).unwrap().iou;
            let tape = Tape::<f64>::new();
            let p = tape.leaf(pred.reshape([1, 32, 32]).unwrap());
            let soft = 1.0 - tape.soft_iou_loss(&p, &truth.reshape([1, 32, 32]).unwrap()).unwrap().value().item().unwrap();
            assert!((soft - hard).abs() < 0.02, "soft {soft} hard {hard}");
        }
    }

    #[test]
    fn total_loss_non_negative() {
        let mut rng = SeededRng::new(9);
        for _ in 0..50 {
            let tape = Tape::<f64>::new();
            let p = tape.leaf(Tensor::from_fn([2, 1, 4, 4], |_| rng.uniform(0.0, 1.0)));
            let y = Tensor::from_fn([2, 1, 4, 4], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
            assert!(tape.total_loss(&p, &y).unwrap().value().item().unwrap() >= 0.0);
        }
    }

    #[test]
    fn loss_gradients() {
        let mut rng = SeededRng::new(3);
        let p = Tensor::<f64>::from_fn([2, 1, 3, 3], |_| rng.uniform(0.05, 0.95));
        let y = Tensor::from_fn([2, 1, 3, 3], |_| if rng.bernoulli(0.5) { 1.0 } else { 0.0 });
        assert!(check_gradient(&p, 1e-6, |t, x| t.bce_loss(x, &y)).unwrap() < 1e-6);
        assert!(check_gradient(&p, 1e-6, |t, x| t.soft_iou_loss(x, &y)).unwrap() < 1e-6);
        assert!(check_gradient(&p, 1e-6, |t, x| t.total_loss(x, &y)).unwrap() < 1e-6);
    }

    #[test]
    fn aggregate_mean_matches_rows() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![
            ("a".to_string(), MetricsReport::from_counts(3, 1, 0, 4)),
            ("b".to_string(), MetricsReport::from_counts(1, 0, 1, 6)),
        ];
        let path = dir.path().join("r.csv");
        let agg = write_report_csv(&path, &rows).unwrap();
        assert!((agg.mean.dsc - (rows[0].1.dsc + rows[1].1.dsc) / 2.0).abs() < 1e-15);
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,dsc,iou,se,sp,acc,tp,fp,fn,tn");
        assert_eq!(lines.len(), 5);
        assert!(lines[3].starts_with("mean,"));
        assert!(lines[4].starts_with("std,"));
    }
}
