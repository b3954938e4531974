use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::imaging::{BinaryMask, ScoreMap};

/// Pixel confusion counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

/// Precision, recall and F1; each is 0 when its denominator is 0.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Counts {
    pub fn add(self, other: Counts) -> Counts {
        Counts {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            fn_: self.fn_ + other.fn_,
        }
    }

    pub fn metrics(&self) -> Metrics {
        let ratio = |num: u64, den: u64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Metrics {
            precision,
            recall,
            f1,
        }
    }
}

fn check_dims(pred: (usize, usize), gt: &BinaryMask, idx: usize) -> Result<()> {
    if pred != (gt.width(), gt.height()) {
        return Err(Error::invalid(format!(
            "image {idx}: prediction {}x{} vs ground truth {}x{}",
            pred.0,
            pred.1,
            gt.width(),
            gt.height()
        )));
    }
    Ok(())
}

pub fn count(pred: &BinaryMask, gt: &BinaryMask) -> Result<Counts> {
    check_dims((pred.width(), pred.height()), gt, 0)?;
    let mut c = Counts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            _ => {}
        }
    }
    Ok(c)
}

/// Corpus-pooled (micro-averaged) metrics over paired prediction/ground-truth masks.
pub fn evaluate(preds: &[BinaryMask], gts: &[BinaryMask]) -> Result<Metrics> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} predictions vs {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    let mut total = Counts::default();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        check_dims((p.width(), p.height()), g, i)?;
        total = total.add(count(p, g)?);
    }
    Ok(total.metrics())
}

/// Parses `start:stop:step` into an ascending threshold list that includes
/// `stop` when it lies on the grid.
pub fn parse_sweep(spec: &str) -> Result<Vec<f32>> {
    let parts: Vec<&str> = spec.split(':').collect();
    let [start, stop, step] = parts.as_slice() else {
        return Err(Error::invalid(format!("threshold sweep {spec:?} is not start:stop:step")));
    };
    let num = |s: &str| {
        s.trim()
            .parse::<f64>()
            .map_err(|_| Error::invalid(format!("threshold sweep {spec:?}: {s:?} is not a number")))
    };
    let (start, stop, step) = (num(start)?, num(stop)?, num(step)?);
    if !(0.0..=1.0).contains(&start) || !(0.0..=1.0).contains(&stop) || start > stop || !(step > 0.0) {
        return Err(Error::invalid(format!(
            "threshold sweep {spec:?} needs 0 <= start <= stop <= 1 and step > 0"
        )));
    }
    let n = ((stop - start) / step + 1e-9).floor() as usize;
    Ok((0..=n).map(|i| (start + i as f64 * step).min(1.0) as f32).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub threshold: f32,
    pub metrics: Metrics,
}

/// Counts at every swept threshold, pooled over the corpus and per image.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub thresholds: Vec<f32>,
    pub corpus: Vec<Counts>,
    pub per_image: Vec<(String, Vec<Counts>)>,
}

impl EvalReport {
    /// Pools per-image sweep counts (from [`sweep_counts`]) into a report.
    pub fn from_counts(thresholds: &[f32], per_image: Vec<(String, Vec<Counts>)>) -> Result<EvalReport> {
        check_thresholds(thresholds)?;
        let mut corpus = vec![Counts::default(); thresholds.len()];
        for (id, counts) in &per_image {
            if counts.len() != thresholds.len() {
                return Err(Error::invalid(format!(
                    "image {id}: {} counts for {} thresholds",
                    counts.len(),
                    thresholds.len()
                )));
            }
            for (acc, c) in corpus.iter_mut().zip(counts) {
                *acc = acc.add(*c);
            }
        }
        Ok(EvalReport {
            thresholds: thresholds.to_vec(),
            corpus,
            per_image,
        })
    }

    /// Index of the threshold with the best corpus F1 (lowest threshold on ties).
    pub fn best_index(&self) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, c) in self.corpus.iter().enumerate() {
            let f1 = c.metrics().f1;
            if f1 > best.1 {
                best = (i, f1);
            }
        }
        best.0
    }

    pub fn best(&self) -> (f32, Metrics) {
        let i = self.best_index();
        (self.thresholds[i], self.corpus[i].metrics())
    }

    /// Corpus row followed by one row per image, all at `thresholds[index]`.
    pub fn rows_at(&self, index: usize) -> Vec<EvalRow> {
        let tau = self.thresholds[index];
        std::iter::once(EvalRow {
            id: "corpus".into(),
            threshold: tau,
            metrics: self.corpus[index].metrics(),
        })
        .chain(self.per_image.iter().map(|(id, counts)| EvalRow {
            id: id.clone(),
            threshold: tau,
            metrics: counts[index].metrics(),
        }))
        .collect()
    }

    /// CSV `id,threshold,precision,recall,f1`: corpus row first, then per-image rows,
    /// at the best-F1 threshold (or the threshold closest to `fixed`).
    pub fn write_csv<W: Write>(&self, out: W, fixed: Option<f32>) -> Result<()> {
        let index = match fixed {
            Some(t) => self
                .thresholds
                .iter()
                .enumerate()
                .min_by(|a, b| (a.1 - t).abs().total_cmp(&(b.1 - t).abs()))
                .map(|(i, _)| i)
                .unwrap_or(0),
            None => self.best_index(),
        };
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["id", "threshold", "precision", "recall", "f1"])?;
        for row in self.rows_at(index) {
            w.write_record(&[
                row.id,
                format!("{:.4}", row.threshold),
                format!("{:.6}", row.metrics.precision),
                format!("{:.6}", row.metrics.recall),
                format!("{:.6}", row.metrics.f1),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    /// CSV `threshold,precision,recall,f1` of the corpus at every swept threshold.
    pub fn write_sweep_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["threshold", "precision", "recall", "f1"])?;
        for (t, c) in self.thresholds.iter().zip(&self.corpus) {
            let m = c.metrics();
            w.write_record(&[
                format!("{t:.4}"),
                format!("{:.6}", m.precision),
                format!("{:.6}", m.recall),
                format!("{:.6}", m.f1),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>, fixed: Option<f32>) -> Result<()> {
        let dir = dir.as_ref();
        let open = |name: &str| {
            let p = dir.join(name);
            std::fs::File::create(&p).map_err(|e| Error::io(p, e))
        };
        self.write_csv(open("report.csv")?, fixed)?;
        self.write_sweep_csv(open("sweep.csv")?)
    }
}

fn check_thresholds(thresholds: &[f32]) -> Result<()> {
    if thresholds.is_empty() || thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("thresholds must be non-empty and strictly ascending"));
    }
    Ok(())
}

/// Counts for `score >= t` at every threshold, in one pass over the image.
pub fn sweep_counts(score: &ScoreMap, gt: &BinaryMask, thresholds: &[f32]) -> Result<Vec<Counts>> {
    check_thresholds(thresholds)?;
    check_dims((score.width(), score.height()), gt, 0)?;
    // hist[k] = pixels predicted positive at exactly the first k thresholds.
    let mut pos = vec![0u64; thresholds.len() + 1];
    let mut neg = vec![0u64; thresholds.len() + 1];
    for (&s, &g) in score.data().iter().zip(gt.data()) {
        let k = thresholds.partition_point(|&t| t <= s);
        if g == 1 {
            pos[k] += 1;
        } else {
            neg[k] += 1;
        }
    }
    let total_pos: u64 = pos.iter().sum();
    let mut out = vec![Counts::default(); thresholds.len()];
    let (mut tp, mut fp) = (0u64, 0u64);
    for i in (0..thresholds.len()).rev() {
        tp += pos[i + 1];
        fp += neg[i + 1];
        out[i] = Counts {
            tp,
            fp,
            fn_: total_pos - tp,
        };
    }
    Ok(out)
}

/// Threshold sweep over score maps: equivalent to thresholding each map at
/// every `t` and pooling [`count`]s, without materializing the masks.
pub fn evaluate_sweep(
    scores: &[(String, &ScoreMap)],
    gts: &[&BinaryMask],
    thresholds: &[f32],
) -> Result<EvalReport> {
    if scores.len() != gts.len() {
        return Err(Error::invalid(format!(
            "{} score maps vs {} ground-truth masks",
            scores.len(),
            gts.len()
        )));
    }
    let mut per_image = Vec::with_capacity(scores.len());
    for (i, ((id, s), g)) in scores.iter().zip(gts).enumerate() {
        check_dims((s.width(), s.height()), g, i)?;
        per_image.push((id.clone(), sweep_counts(s, g, thresholds)?));
    }
    EvalReport::from_counts(thresholds, per_image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::threshold;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_and_empty_predictions() {
        let gt = BinaryMask::from_fn(4, 4, |i, j| i == j);
        let m = evaluate(&[gt.clone()], &[gt.clone()]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        let m = evaluate(&[BinaryMask::zeros(4, 4)], &[gt]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn half_overlap() {
        let gt = BinaryMask::new(4, 2, vec![1, 1, 1, 1, 0, 0, 0, 0]).unwrap();
        let pred = BinaryMask::new(4, 2, vec![0, 0, 1, 1, 1, 1, 0, 0]).unwrap();
        let m = evaluate(&[pred], &[gt]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn dims_must_match() {
        assert!(evaluate(&[BinaryMask::zeros(2, 2)], &[BinaryMask::zeros(2, 3)]).is_err());
        assert!(evaluate(&[BinaryMask::zeros(2, 2)], &[]).is_err());
    }

    #[test]
    fn sweep_parsing() {
        assert_eq!(parse_sweep("0:1:0.25").unwrap(), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
        assert_eq!(parse_sweep("0.1:0.3:0.1").unwrap().len(), 3);
        for bad in ["0:1", "a:1:0.1", "0.5:0.2:0.1", "0:1:0", "0:2:0.5"] {
            assert!(parse_sweep(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn sweep_matches_explicit_thresholding() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let thresholds = parse_sweep("0:1:0.05").unwrap();
        let scores: Vec<ScoreMap> = (0..3)
            .map(|_| ScoreMap::new(9, 7, (0..63).map(|_| rng.gen_range(0.0..=1.0)).collect()).unwrap())
            .collect();
        let gts: Vec<BinaryMask> = (0..3)
            .map(|_| BinaryMask::new(9, 7, (0..63).map(|_| rng.gen_range(0..=1)).collect()).unwrap())
            .collect();
        let named: Vec<(String, &ScoreMap)> =
            scores.iter().enumerate().map(|(i, s)| (format!("img{i}"), s)).collect();
        let gt_refs: Vec<&BinaryMask> = gts.iter().collect();
        let report = evaluate_sweep(&named, &gt_refs, &thresholds).unwrap();
        for (k, &t) in thresholds.iter().enumerate() {
            let preds: Vec<BinaryMask> = scores.iter().map(|s| threshold(s, t).unwrap()).collect();
            let direct = evaluate(&preds, &gts).unwrap();
            assert_eq!(report.corpus[k].metrics(), direct, "t = {t}");
            for (i, (p, g)) in preds.iter().zip(&gts).enumerate() {
                assert_eq!(report.per_image[i].1[k], count(p, g).unwrap());
            }
        }
    }

    #[test]
    fn csv_layout() {
        let gt = BinaryMask::new(2, 1, vec![1, 0]).unwrap();
        let s = ScoreMap::new(2, 1, vec![0.8, 0.3]).unwrap();
        let report = evaluate_sweep(&[("a".into(), &s)], &[&gt], &[0.2, 0.5]).unwrap();
        assert_eq!(report.best(), (0.5, Metrics { precision: 1.0, recall: 1.0, f1: 1.0 }));
        let mut buf = Vec::new();
        report.write_csv(&mut buf, None).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "id,threshold,precision,recall,f1");
        assert!(lines[1].starts_with("corpus,0.5000,1.000000"));
        assert!(lines[2].starts_with("a,0.5000"));
        assert_eq!(lines.len(), 3);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn swapping_pred_and_gt_swaps_precision_and_recall(
                a in proptest::collection::vec(0u8..=1, 30), b in proptest::collection::vec(0u8..=1, 30)
            ) {
                let a = BinaryMask::new(6, 5, a).unwrap();
                let b = BinaryMask::new(6, 5, b).unwrap();
                let ab = evaluate(&[a.clone()], &[b.clone()]).unwrap();
                let ba = evaluate(&[b], &[a]).unwrap();
                prop_assert_eq!(ab.precision, ba.recall);
                prop_assert_eq!(ab.recall, ba.precision);
                prop_assert_eq!(ab.f1, ba.f1);
                for v in [ab.precision, ab.recall, ab.f1] {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
                if ab.precision + ab.recall > 0.0 {
                    let f1 = 2.0 * ab.precision * ab.recall / (ab.precision + ab.recall);
                    prop_assert!((ab.f1 - f1).abs() < 1e-12);
                }
            }
        }
    }
}
