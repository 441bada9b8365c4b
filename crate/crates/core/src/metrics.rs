//! Predictions and evaluation reports.

use std::fmt::Write as _;

use serde::Serialize;

use crate::arch::{BdnModel, Head};
use crate::augment::Pipeline;
use crate::data::{batch_iterator, BatchMode, Dataset, Record};
use crate::error::{invalid, Result};
use crate::layers::softmax;
use crate::network::Mode;
use crate::rating::{
    decode_gaussian, fit_gaussian, gaussian_of_distribution, kl_gaussian, quantize_binary, BinaryLabel, KlForm,
    RatingGaussian,
};
use crate::rgb::RgbImage;

/// Decoded head output for one image.
#[derive(Clone, Debug, PartialEq)]
pub enum Prediction {
    Binary { p_high: f64 },
    Gaussian(RatingGaussian),
    /// Probabilities of ratings 1..=10.
    Distribution(Vec<f64>),
}

impl Prediction {
    pub fn from_output(head: Head, out: &[f64]) -> Result<Self> {
        if out.len() != head.channels() {
            return Err(invalid(format!(
                "{} head expects {} outputs, got {}",
                head,
                head.channels(),
                out.len()
            )));
        }
        Ok(match head {
            Head::Binary => Prediction::Binary {
                p_high: softmax(out)[1],
            },
            Head::Gaussian => Prediction::Gaussian(decode_gaussian([out[0], out[1]])),
            Head::Dist10 => Prediction::Distribution(softmax(out)),
        })
    }

    /// Predicted rating distribution, when the head models one.
    pub fn gaussian(&self) -> Result<Option<RatingGaussian>> {
        Ok(match self {
            Prediction::Binary { .. } => None,
            Prediction::Gaussian(g) => Some(*g),
            Prediction::Distribution(p) => Some(gaussian_of_distribution(p)?),
        })
    }

    /// High when `p_high > 0.5` or the predicted mean exceeds 5.
    pub fn label(&self) -> Result<BinaryLabel> {
        Ok(match self {
            Prediction::Binary { p_high } => {
                if *p_high > 0.5 {
                    BinaryLabel::High
                } else {
                    BinaryLabel::Low
                }
            }
            _ => {
                let mu = self.gaussian()?.expect("distribution head").mu;
                if mu > 5.0 {
                    BinaryLabel::High
                } else {
                    BinaryLabel::Low
                }
            }
        })
    }

    /// `image_id,label,p_high`, or `image_id,label,mu,sigma` for the
    /// Gaussian head, followed by `p1..p10` for the 10-bin head.
    pub fn to_line(&self, image_id: &str) -> Result<String> {
        let label = match self.label()? {
            BinaryLabel::High => "high",
            _ => "low",
        };
        Ok(match self {
            Prediction::Binary { p_high } => format!("{},{},{}", image_id, label, p_high),
            Prediction::Gaussian(g) => format!("{},{},{},{}", image_id, label, g.mu, g.sigma),
            Prediction::Distribution(p) => {
                let g = gaussian_of_distribution(p)?;
                let probs: Vec<String> = p.iter().map(|v| v.to_string()).collect();
                format!("{},{},{},{},{}", image_id, label, g.mu, g.sigma, probs.join(","))
            }
        })
    }
}

/// Inference on single images.
pub fn predict(model: &BdnModel, img: &RgbImage) -> Result<Prediction> {
    Prediction::from_output(model.head, model.run_image(img, Mode::Infer)?.data())
}

/// Batched inference over dataset entries, in `indices` order.
pub fn predict_dataset(model: &BdnModel, dataset: &Dataset, indices: &[usize]) -> Result<Vec<Prediction>> {
    let none = Pipeline::none();
    let mut out = Vec::with_capacity(indices.len());
    for batch in batch_iterator(dataset, indices, 32, &none, 0, BatchMode::Eval)? {
        let mut slots: Vec<Option<Prediction>> = vec![None; batch.len()];
        for b in batch.buckets(true)? {
            let hsv = b.hsv.as_ref().expect("hsv requested");
            let trace = model.forward(&b.input, hsv, Mode::Infer)?;
            for (k, &p) in b.positions.iter().enumerate() {
                slots[p] = Some(Prediction::from_output(model.head, trace.output().item(k))?);
            }
        }
        out.extend(slots.into_iter().map(|p| p.expect("every position bucketed")));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct Confusion {
    pub true_high: usize,
    pub false_high: usize,
    pub true_low: usize,
    pub false_low: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DistributionMetrics {
    /// Mean KL(groundtruth Gaussian || predicted Gaussian).
    pub average_kl: f64,
    /// Fraction of images with |predicted mean - true mean| < 1.
    pub within_one: f64,
    /// Accuracy of the predicted means after binarisation.
    pub rebinarized_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub delta: f64,
    pub images: usize,
    /// Images outside the exclusion band.
    pub evaluated: usize,
    pub excluded: usize,
    /// None when every image is excluded.
    pub accuracy: Option<f64>,
    pub confusion: Confusion,
    pub distribution: Option<DistributionMetrics>,
}

/// Scores predictions against the records' rating histograms.
pub fn compute_metrics(predictions: &[Prediction], records: &[Record], delta: f64) -> Result<EvalReport> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(invalid(format!("delta must be non-negative, got {}", delta)));
    }
    if predictions.len() != records.len() {
        return Err(invalid(format!(
            "{} predictions for {} records",
            predictions.len(),
            records.len()
        )));
    }
    if records.is_empty() {
        return Err(invalid("cannot evaluate an empty test set"));
    }
    let mut confusion = Confusion::default();
    let mut kl_sum = 0.0;
    let mut within = 0usize;
    let mut dist_count = 0usize;
    for (p, r) in predictions.iter().zip(records) {
        let truth_mean = r.mean_rating()?;
        let truth = quantize_binary(truth_mean, delta);
        if truth != BinaryLabel::Excluded {
            match (truth, p.label()?) {
                (BinaryLabel::High, BinaryLabel::High) => confusion.true_high += 1,
                (BinaryLabel::Low, BinaryLabel::High) => confusion.false_high += 1,
                (BinaryLabel::Low, _) => confusion.true_low += 1,
                _ => confusion.false_low += 1,
            }
        }
        if let Some(g) = p.gaussian()? {
            kl_sum += kl_gaussian(&fit_gaussian(&r.ratings)?, &g, KlForm::Corrected)?;
            within += ((g.mu - truth_mean).abs() < 1.0) as usize;
            dist_count += 1;
        }
    }
    if dist_count != 0 && dist_count != records.len() {
        return Err(invalid("predictions mix binary and distribution heads"));
    }
    let evaluated = confusion.true_high + confusion.false_high + confusion.true_low + confusion.false_low;
    let accuracy = (evaluated > 0).then(|| (confusion.true_high + confusion.true_low) as f64 / evaluated as f64);
    let distribution = (dist_count > 0).then(|| DistributionMetrics {
        average_kl: kl_sum / dist_count as f64,
        within_one: within as f64 / dist_count as f64,
        rebinarized_accuracy: accuracy,
    });
    Ok(EvalReport {
        delta,
        images: records.len(),
        evaluated,
        excluded: records.len() - evaluated,
        accuracy,
        confusion,
        distribution,
    })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |v| v.to_string())
}

impl EvalReport {
    /// `key,value` lines.
    pub fn to_records(&self) -> String {
        let mut s = String::new();
        let c = &self.confusion;
        let rows: Vec<(&str, String)> = vec![
            ("delta", self.delta.to_string()),
            ("images", self.images.to_string()),
            ("evaluated", self.evaluated.to_string()),
            ("excluded", self.excluded.to_string()),
            ("accuracy", opt(self.accuracy)),
            ("true_high", c.true_high.to_string()),
            ("false_high", c.false_high.to_string()),
            ("true_low", c.true_low.to_string()),
            ("false_low", c.false_low.to_string()),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{},{}", k, v);
        }
        if let Some(d) = &self.distribution {
            let _ = writeln!(s, "average_kl,{}", d.average_kl);
            let _ = writeln!(s, "within_one,{}", d.within_one);
            let _ = writeln!(s, "rebinarized_accuracy,{}", opt(d.rebinarized_accuracy));
        }
        s
    }

    pub fn to_human(&self) -> String {
        let mut s = String::new();
        let pct = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{:.2}%", 100.0 * v));
        let _ = writeln!(s, "images:        {} ({} excluded at delta {})", self.images, self.excluded, self.delta);
        let _ = writeln!(s, "accuracy:      {}", pct(self.accuracy));
        let c = &self.confusion;
        let _ = writeln!(s, "                  pred high  pred low");
        let _ = writeln!(s, "  true high   {:>10} {:>9}", c.true_high, c.false_low);
        let _ = writeln!(s, "  true low    {:>10} {:>9}", c.false_high, c.true_low);
        if let Some(d) = &self.distribution {
            let _ = writeln!(s, "average KL:    {:.4}", d.average_kl);
            let _ = writeln!(s, "|mu diff| < 1: {}", pct(Some(d.within_one)));
            let _ = writeln!(s, "rebinarized:   {}", pct(d.rebinarized_accuracy));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rating::{raw_for_sigma, RatingHistogram};
    use std::path::PathBuf;

    fn record(counts: [u32; 10]) -> Record {
        Record {
            image_id: "x".into(),
            image_path: PathBuf::from("x.png"),
            ratings: RatingHistogram(counts),
            styles: [false; 14],
        }
    }

    #[test]
    fn perfect_gaussian_predictions() {
        let recs = vec![
            record([0, 0, 10, 20, 40, 20, 10, 0, 0, 0]),
            record([0, 0, 0, 0, 0, 5, 30, 60, 5, 0]),
            record([50, 30, 10, 0, 0, 0, 0, 0, 0, 0]),
        ];
        let preds: Vec<Prediction> = recs
            .iter()
            .map(|r| Prediction::Gaussian(fit_gaussian(&r.ratings).unwrap()))
            .collect();
        for delta in [0.0, 0.5, 1.0] {
            let rep = compute_metrics(&preds, &recs, delta).unwrap();
            let d = rep.distribution.unwrap();
            assert_eq!(d.average_kl, 0.0);
            assert_eq!(d.within_one, 1.0);
            assert_eq!(d.rebinarized_accuracy, Some(1.0));
        }
    }

    #[test]
    fn four_image_fixture() {
        // means: 7.0 (High), 3.0 (Low), 5.0 (Excluded), 5.5 (High at delta 0)
        let mut a = [0; 10];
        a[6] = 10;
        let mut b = [0; 10];
        b[2] = 10;
        let mut c = [0; 10];
        c[4] = 10;
        let mut d = [0; 10];
        d[4] = 5;
        d[5] = 5;
        let recs = vec![record(a), record(b), record(c), record(d)];
        let preds = vec![
            Prediction::Binary { p_high: 0.9 },
            Prediction::Binary { p_high: 0.6 },
            Prediction::Binary { p_high: 0.1 },
            Prediction::Binary { p_high: 0.2 },
        ];
        let rep = compute_metrics(&preds, &recs, 0.0).unwrap();
        assert_eq!((rep.evaluated, rep.excluded), (3, 1));
        assert_eq!(rep.accuracy, Some(1.0 / 3.0));
        assert_eq!(
            rep.confusion,
            Confusion {
                true_high: 1,
                false_high: 1,
                true_low: 0,
                false_low: 1
            }
        );
        assert!(rep.distribution.is_none());
        // delta 1 excludes 5.0 and 5.5
        let rep = compute_metrics(&preds, &recs, 1.0).unwrap();
        assert_eq!((rep.evaluated, rep.accuracy), (2, Some(0.5)));
    }

    #[test]
    fn always_high_on_all_high_set() {
        let mut h = [0; 10];
        h[7] = 3;
        let recs = vec![record(h); 5];
        let preds = vec![Prediction::Binary { p_high: 0.99 }; 5];
        assert_eq!(compute_metrics(&preds, &recs, 0.0).unwrap().accuracy, Some(1.0));
    }

    #[test]
    fn report_is_pure_and_formats() {
        let recs = vec![record([1, 2, 3, 4, 5, 6, 7, 8, 9, 10]), record([10, 9, 8, 7, 6, 5, 4, 3, 2, 1])];
        let preds = vec![
            Prediction::from_output(Head::Gaussian, &[6.0, raw_for_sigma(2.0).unwrap()]).unwrap(),
            Prediction::from_output(Head::Dist10, &[0.0; 10]).unwrap(),
        ];
        let a = compute_metrics(&preds, &recs, 0.0).unwrap();
        let b = compute_metrics(&preds, &recs, 0.0).unwrap();
        assert_eq!(a.to_records(), b.to_records());
        assert!(a.to_records().contains("average_kl,"));
        assert!(a.to_human().contains("accuracy"));
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(compute_metrics(&[Prediction::Binary { p_high: 0.5 }], &[], 0.0).is_err());
        assert!(compute_metrics(&[], &[], 0.0).is_err());
    }

    #[test]
    fn prediction_lines() {
        let p = Prediction::Binary { p_high: 0.75 };
        assert_eq!(p.to_line("img7").unwrap(), "img7,high,0.75");
        let g = Prediction::Gaussian(RatingGaussian::new(4.5, 1.25).unwrap());
        assert_eq!(g.to_line("a").unwrap(), "a,low,4.5,1.25");
    }
}
