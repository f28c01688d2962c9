//! Segmentation metrics, per-condition reports and diagnostic panels.

use std::path::Path;

use dcaa_autograd::Tensor;
use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::adversarial::DiscBank;
use crate::error::{Error, Result};
use crate::segnet::{argmax_labels, PredictMode, SegNet};
use crate::selftrain::{ambivalence_map, threshold_labels, upsample, Teacher};
use crate::toyworld::Dataset;

/// `L x L` confusion counts, rows = ground truth, columns = prediction.
/// Ground-truth 0 pixels are skipped.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Confusion {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn from_labels(pred: &[u8], gt: &[u8], num_classes: usize) -> Result<Self> {
        let mut c = Confusion::new(num_classes);
        c.add(pred, gt)?;
        Ok(c)
    }

    pub fn add(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let l = self.num_classes;
        for (&p, &t) in pred.iter().zip(gt) {
            if t == 0 {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p == 0 || p > l || t > l {
                return Err(Error::Invalid(format!("label pair ({t}, {p}) outside 1..={l}")));
            }
            self.counts[(t - 1) * l + p - 1] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        assert_eq!(self.num_classes, other.num_classes, "class count mismatch");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// Per-class IoU (`None` where the class is absent from both ground truth
/// and prediction) and the mean over the defined classes.
pub fn miou(c: &Confusion) -> (Vec<Option<f64>>, f64) {
    let l = c.num_classes;
    let mut per = Vec::with_capacity(l);
    for k in 0..l {
        let tp = c.get(k, k);
        let fn_: u64 = (0..l).filter(|&j| j != k).map(|j| c.get(k, j)).sum();
        let fp: u64 = (0..l).filter(|&j| j != k).map(|j| c.get(j, k)).sum();
        let denom = tp + fp + fn_;
        per.push((denom > 0).then(|| tp as f64 / denom as f64));
    }
    let defined: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = if defined.is_empty() {
        0.0
    } else {
        defined.iter().sum::<f64>() / defined.len() as f64
    };
    (per, mean)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub name: String,
    pub confusion: Confusion,
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub samples: usize,
}

impl ClassReport {
    fn from_confusion(name: &str, confusion: Confusion, samples: usize) -> Self {
        let (iou, m) = miou(&confusion);
        ClassReport {
            name: name.to_string(),
            confusion,
            iou,
            miou: m,
            samples,
        }
    }
}

/// Metrics of one model on one eval split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// All images of the training (seen) conditions.
    pub overall: ClassReport,
    /// One entry per condition in manifest order, seen and unseen.
    pub per_condition: Vec<ClassReport>,
    pub unseen: Vec<String>,
    pub samples: usize,
}

impl MetricReport {
    pub fn condition(&self, name: &str) -> Option<&ClassReport> {
        self.per_condition.iter().find(|r| r.name == name)
    }

    /// Rows `scope,condition,miou,samples,iou_1..iou_L`; excluded classes
    /// are left empty.
    pub fn to_csv(&self) -> String {
        let l = self.overall.confusion.num_classes;
        let mut s = String::from("scope,condition,miou,samples");
        for k in 1..=l {
            s.push_str(&format!(",iou_{k}"));
        }
        s.push('\n');
        let mut row = |scope: &str, r: &ClassReport| {
            s.push_str(&format!("{scope},{},{:.6},{}", r.name, r.miou, r.samples));
            for v in &r.iou {
                match v {
                    Some(v) => s.push_str(&format!(",{v:.6}")),
                    None => s.push(','),
                }
            }
            s.push('\n');
        };
        row("seen", &self.overall);
        for r in &self.per_condition {
            let scope = if self.unseen.contains(&r.name) { "unseen" } else { "seen" };
            row(scope, r);
        }
        s
    }

    /// Fixed-width table of mIoU per condition.
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<12} {:>8} {:>8}\n", "condition", "mIoU", "images");
        s.push_str(&format!("{:<12} {:>8.2} {:>8}\n", "all-seen", 100.0 * self.overall.miou, self.overall.samples));
        for r in &self.per_condition {
            let tag = if self.unseen.contains(&r.name) {
                format!("{}*", r.name)
            } else {
                r.name.clone()
            };
            s.push_str(&format!("{:<12} {:>8.2} {:>8}\n", tag, 100.0 * r.miou, r.samples));
        }
        if !self.unseen.is_empty() {
            s.push_str("* unseen during training\n");
        }
        s
    }
}

/// Per-image predictions of one model over a dataset.
pub struct Predictions {
    /// `[N * H * W]` predicted labels.
    pub labels: Vec<u8>,
    pub probs: Vec<Tensor>,
}

/// Runs `net` over `ds` in batches, returning argmax labels and per-image
/// probability maps at input resolution.
pub fn predict_dataset(net: &SegNet, ds: &Dataset, mode: PredictMode, batch: usize) -> Result<Predictions> {
    let mut labels = Vec::new();
    let mut probs = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let b = ds.batch_of(chunk);
        let p = net.predict(&b.images, mode)?;
        labels.extend(argmax_labels(&p));
        for i in 0..chunk.len() {
            probs.push(p.batch_item(i));
        }
    }
    Ok(Predictions { labels, probs })
}

/// Evaluates `net` on `ds`. `seen` lists the training conditions that make
/// up the overall score; every other condition is reported as unseen.
pub fn evaluate(net: &SegNet, ds: &Dataset, mode: PredictMode, batch: usize, seen: &[String]) -> Result<MetricReport> {
    let preds = predict_dataset(net, ds, mode, batch)?;
    report_from_labels(ds, &preds.labels, net.cfg.num_classes, seen)
}

pub fn report_from_labels(ds: &Dataset, pred: &[u8], num_classes: usize, seen: &[String]) -> Result<MetricReport> {
    let conds = &ds.manifest.conditions;
    let mut per: Vec<(Confusion, usize)> = vec![(Confusion::new(num_classes), 0); conds.len()];
    let mut overall = Confusion::new(num_classes);
    let mut seen_count = 0;
    let mut off = 0;
    for s in &ds.samples {
        let n = s.label.len();
        let c = Confusion::from_labels(&pred[off..off + n], &s.label, num_classes)?;
        off += n;
        let name = s.condition.as_ref().map(|c| c.name.as_str()).unwrap_or("none");
        if let Some(ci) = s.condition.as_ref().map(|c| c.index) {
            per[ci].0.merge(&c);
            per[ci].1 += 1;
        }
        if s.condition.is_none() || seen.iter().any(|x| x == name) {
            overall.merge(&c);
            seen_count += 1;
        }
    }
    let per_condition = conds
        .iter()
        .zip(per)
        .map(|(name, (c, n))| ClassReport::from_confusion(name, c, n))
        .collect();
    Ok(MetricReport {
        overall: ClassReport::from_confusion("all", overall, seen_count),
        per_condition,
        unseen: conds.iter().filter(|c| !seen.contains(c)).cloned().collect(),
        samples: ds.len(),
    })
}

/// Means of the ambivalence map over correctly and incorrectly predicted
/// pixels, and their point-biserial correlation with correctness.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AmbivalenceStats {
    pub mean_correct: f64,
    pub mean_incorrect: f64,
    pub point_biserial: f64,
    pub correct_pixels: usize,
    pub incorrect_pixels: usize,
}

impl AmbivalenceStats {
    pub fn gap(&self) -> f64 {
        self.mean_correct - self.mean_incorrect
    }
}

pub fn point_biserial(values: &[f64], flags: &[bool]) -> AmbivalenceStats {
    assert_eq!(values.len(), flags.len(), "one flag per value");
    let (mut s1, mut n1, mut s0, mut n0) = (0.0, 0usize, 0.0, 0usize);
    for (&v, &f) in values.iter().zip(flags) {
        if f {
            s1 += v;
            n1 += 1;
        } else {
            s0 += v;
            n0 += 1;
        }
    }
    let n = (n1 + n0) as f64;
    let m1 = if n1 > 0 { s1 / n1 as f64 } else { f64::NAN };
    let m0 = if n0 > 0 { s0 / n0 as f64 } else { f64::NAN };
    let mean = (s1 + s0) / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let r = if n1 == 0 || n0 == 0 || sd == 0.0 {
        0.0
    } else {
        (m1 - m0) / sd * ((n1 as f64 / n) * (n0 as f64 / n)).sqrt()
    };
    AmbivalenceStats {
        mean_correct: m1,
        mean_incorrect: m0,
        point_biserial: r,
        correct_pixels: n1,
        incorrect_pixels: n0,
    }
}

/// Ambivalence of the fused prediction, upsampled to input resolution,
/// against the correctness of that prediction over labelled pixels.
pub fn ambivalence_consistency(net: &SegNet, bank: &DiscBank, ds: &Dataset, batch: usize) -> Result<AmbivalenceStats> {
    let mut values = Vec::new();
    let mut flags = Vec::new();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let teacher = Teacher { net, bank: Some(bank) };
    for chunk in idx.chunks(batch.max(1)) {
        let b = ds.batch_of(chunk);
        let (h, w) = b.hw();
        let pack = teacher.pack(&b.images, 0.0, crate::config::PseudoMode::Apla)?;
        let d = upsample(&pack.ambivalence, h, w);
        let pred = argmax_labels(&crate::segnet::renormalize(&upsample(&pack.fused_probs, h, w)));
        for ((&p, &t), &dv) in pred.iter().zip(&b.labels).zip(d.data()) {
            if t != 0 {
                values.push(dv);
                flags.push(p == t);
            }
        }
    }
    Ok(point_biserial(&values, &flags))
}

/// Fixed class palette for label renders; index 0 is black.
pub fn class_color(l: u8) -> [u8; 3] {
    const P: [[u8; 3]; 8] = [
        [0, 0, 0],
        [70, 130, 180],
        [128, 64, 128],
        [190, 120, 60],
        [60, 160, 60],
        [220, 30, 30],
        [220, 200, 40],
        [150, 80, 200],
    ];
    if (l as usize) < P.len() {
        P[l as usize]
    } else {
        let v = l.wrapping_mul(67);
        [v, v.wrapping_mul(3), 255 - v]
    }
}

/// Writes a horizontal strip: input | ground truth | prediction | error map
/// | pseudo-label regions | ambivalence heatmap.
#[allow(clippy::too_many_arguments)]
pub fn write_panel(
    path: &Path,
    image: &Tensor,
    gt: &[u8],
    pred: &[u8],
    pseudo: &[u8],
    ambivalence: &[f64],
    h: usize,
    w: usize,
) -> Result<()> {
    let tiles = 6;
    let mut img = RgbImage::new((w * tiles) as u32, h as u32);
    let hw = h * w;
    let to8 = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let px = |tile: usize| ((tile * w + x) as u32, y as u32);
            let d = image.data();
            let put = |img: &mut RgbImage, tile: usize, c: [u8; 3]| {
                let (a, b) = px(tile);
                img.put_pixel(a, b, Rgb(c));
            };
            put(&mut img, 0, [to8(d[p]), to8(d[hw + p]), to8(d[2 * hw + p])]);
            put(&mut img, 1, class_color(gt[p]));
            put(&mut img, 2, class_color(pred[p]));
            let err = if gt[p] != 0 && pred[p] != gt[p] { [255, 255, 255] } else { [0, 0, 0] };
            put(&mut img, 3, err);
            let region = if pseudo[p] == 0 {
                [0, 0, 0]
            } else if pseudo[p] != gt[p] {
                [128, 128, 128]
            } else {
                [255, 255, 255]
            };
            put(&mut img, 4, region);
            let a = ambivalence[p].clamp(0.0, 1.0);
            put(&mut img, 5, [to8(1.0 - a), to8(1.0 - 0.5 * (a - 0.5).abs() * 2.0), to8(a)]);
        }
    }
    img.save(path).map_err(|e| Error::file(path, e))
}

/// Panels for the first `per_condition` images of every condition.
pub fn write_panels(
    dir: &Path,
    net: &SegNet,
    bank: Option<&DiscBank>,
    ds: &Dataset,
    lambda_p: f64,
    per_condition: usize,
) -> Result<usize> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = 0;
    for (ci, group) in ds.by_condition().into_iter().enumerate() {
        let name = ds.manifest.conditions.get(ci).cloned().unwrap_or_default();
        for &i in group.iter().take(per_condition) {
            let b = ds.batch_of(&[i]);
            let (h, w) = b.hw();
            let (pred, pseudo, amb) = if net.cfg.variant == crate::segnet::Variant::Cam {
                let t = Teacher { net, bank };
                let pack = t.pack(&b.images, lambda_p, crate::config::PseudoMode::Apla)?;
                let full = crate::segnet::renormalize(&upsample(&pack.fused_probs, h, w));
                (argmax_labels(&full), pack.pseudo_labels, upsample(&pack.ambivalence, h, w))
            } else {
                let p = net.predict(&b.images, PredictMode::Fused)?;
                let amb = match bank {
                    Some(bk) if bk.ca.is_some() => upsample(&ambivalence_map(&p, bk)?, h, w),
                    _ => Tensor::ones(&[1, 1, h, w]),
                };
                (argmax_labels(&p), threshold_labels(&p, lambda_p)?, amb)
            };
            let path = dir.join(format!("{name}_{i:05}.png"));
            write_panel(&path, &b.images.batch_item(0), &b.labels, &pred, &pseudo, amb.data(), h, w)?;
            written += 1;
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = [1u8, 2, 3, 3, 0, 2];
        let c = Confusion::from_labels(&gt.map(|v| if v == 0 { 1 } else { v }), &gt, 3).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(c.get(i, j), 0);
                }
            }
        }
        assert_eq!(c.total(), 5);
        let (per, m) = miou(&c);
        assert!(per.iter().all(|v| *v == Some(1.0)));
        assert_eq!(m, 1.0);
    }

    #[test]
    fn disjoint_is_zero_and_absent_excluded() {
        let c = Confusion::from_labels(&[2, 2], &[1, 1], 4).unwrap();
        let (per, m) = miou(&c);
        assert_eq!(per, vec![Some(0.0), Some(0.0), None, None]);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn hand_built_three_by_three() {
        let c = Confusion {
            num_classes: 3,
            counts: vec![5, 1, 0, 0, 4, 2, 1, 0, 7],
        };
        let (per, m) = miou(&c);
        let want = [5.0 / 7.0, 4.0 / 7.0, 7.0 / 10.0];
        for (p, w) in per.iter().zip(want) {
            assert!((p.unwrap() - w).abs() < 1e-15);
        }
        assert!((m - want.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }

    #[test]
    fn point_biserial_matches_pearson() {
        let v = [0.9, 0.8, 0.4, 0.3, 0.7, 0.2];
        let f = [true, true, false, false, true, false];
        let s = point_biserial(&v, &f);
        let x: Vec<f64> = f.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let n = v.len() as f64;
        let (mx, mv) = (x.iter().sum::<f64>() / n, v.iter().sum::<f64>() / n);
        let cov: f64 = x.iter().zip(&v).map(|(a, b)| (a - mx) * (b - mv)).sum::<f64>() / n;
        let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
        let sv = (v.iter().map(|a| (a - mv).powi(2)).sum::<f64>() / n).sqrt();
        assert!((s.point_biserial - cov / (sx * sv)).abs() < 1e-12);
        assert!(s.gap() > 0.0);
    }
}
