//! Rating histograms, their Gaussian summaries, and the distribution losses.

use crate::error::{invalid, Error, Result};
use crate::layers::{log_softmax, softmax};
use crate::tensor::{Shape, Tensor};

pub const RATING_BINS: usize = 10;

/// Lower bound on any fitted or predicted standard deviation, in rating
/// points. Unanimous histograms would otherwise fit sigma = 0.
pub const SIGMA_FLOOR: f64 = 0.1;

/// Rater counts for ratings 1..=10.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub struct RatingHistogram(pub [u32; RATING_BINS]);

impl RatingHistogram {
    pub fn total(&self) -> u64 {
        self.0.iter().map(|&c| c as u64).sum()
    }

    /// Counts normalised to a probability vector.
    pub fn normalized(&self) -> Result<[f64; RATING_BINS]> {
        let total = self.total();
        if total == 0 {
            return Err(invalid("rating histogram is empty"));
        }
        Ok(self.0.map(|c| c as f64 / total as f64))
    }

    /// Shannon entropy (nats) of the normalised histogram.
    pub fn entropy(&self) -> Result<f64> {
        Ok(self
            .normalized()?
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum())
    }
}

/// Mean and standard deviation of a rating distribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RatingGaussian {
    pub mu: f64,
    pub sigma: f64,
}

impl RatingGaussian {
    pub fn new(mu: f64, sigma: f64) -> Result<Self> {
        if !mu.is_finite() || !(sigma > 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("invalid gaussian (mu {}, sigma {})", mu, sigma)));
        }
        Ok(RatingGaussian { mu, sigma })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BinaryLabel {
    Low,
    High,
    Excluded,
}

impl BinaryLabel {
    /// Class index used by the binary softmax head.
    pub fn class(&self) -> Option<usize> {
        match self {
            BinaryLabel::Low => Some(0),
            BinaryLabel::High => Some(1),
            BinaryLabel::Excluded => None,
        }
    }
}

pub fn mean_rating(h: &RatingHistogram) -> Result<f64> {
    let total = h.total();
    if total == 0 {
        return Err(invalid("rating histogram is empty"));
    }
    let weighted: f64 = h.0.iter().enumerate().map(|(i, &c)| (i + 1) as f64 * c as f64).sum();
    Ok(weighted / total as f64)
}

/// Moment-matched Gaussian with `sigma` floored at [`SIGMA_FLOOR`].
pub fn fit_gaussian(h: &RatingHistogram) -> Result<RatingGaussian> {
    let mu = mean_rating(h)?;
    let total = h.total() as f64;
    let var: f64 = h
        .0
        .iter()
        .enumerate()
        .map(|(i, &c)| c as f64 * ((i + 1) as f64 - mu).powi(2))
        .sum::<f64>()
        / total;
    Ok(RatingGaussian {
        mu,
        sigma: var.sqrt().max(SIGMA_FLOOR),
    })
}

/// Low below `5 - delta`, High above `5 + delta`, Excluded otherwise
/// (boundaries included).
pub fn quantize_binary(mean: f64, delta: f64) -> BinaryLabel {
    if mean < 5.0 - delta {
        BinaryLabel::Low
    } else if mean > 5.0 + delta {
        BinaryLabel::High
    } else {
        BinaryLabel::Excluded
    }
}

/// Which closed form to use for the Gaussian KL divergence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KlForm {
    /// `log(s2/s1) + (s1^2 + (m1-m2)^2) / (2 s2^2) - 1/2`
    #[default]
    Corrected,
    /// The same expression with `2 m2^2` as the denominator.
    Literal,
}

/// KL(n1 || n2) between two univariate Gaussians.
pub fn kl_gaussian(n1: &RatingGaussian, n2: &RatingGaussian, form: KlForm) -> Result<f64> {
    if !(n1.sigma > 0.0) || !(n2.sigma > 0.0) {
        return Err(invalid(format!(
            "kl_gaussian needs positive sigmas, got {} and {}",
            n1.sigma, n2.sigma
        )));
    }
    let denom = match form {
        KlForm::Corrected => 2.0 * n2.sigma * n2.sigma,
        KlForm::Literal => {
            if n2.mu == 0.0 {
                return Err(invalid("literal KL form is undefined for a zero predicted mean"));
            }
            2.0 * n2.mu * n2.mu
        }
    };
    let d = n1.mu - n2.mu;
    Ok((n2.sigma / n1.sigma).ln() + (n1.sigma * n1.sigma + d * d) / denom - 0.5)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse of the sigma mapping used by the Gaussian head.
pub fn raw_for_sigma(sigma: f64) -> Result<f64> {
    let s = sigma - SIGMA_FLOOR;
    if !(s > 0.0) {
        return Err(invalid(format!("sigma {} is not above the floor", sigma)));
    }
    Ok(if s > 30.0 { s } else { s.exp_m1().ln() })
}

/// Decodes the head's two raw outputs: `mu = raw0`,
/// `sigma = softplus(raw1) + SIGMA_FLOOR`.
pub fn decode_gaussian(raw: [f64; 2]) -> RatingGaussian {
    RatingGaussian {
        mu: raw[0],
        sigma: softplus(raw[1]) + SIGMA_FLOOR,
    }
}

fn check_head(op: &'static str, t: &Tensor, n: usize, c: usize) -> Result<()> {
    let s = t.shape();
    if s != Shape::new(n, c, 1, 1) || n == 0 {
        return Err(Error::ShapeMismatch {
            op,
            expected: format!("{}x{}x1x1", n, c),
            actual: s.to_string(),
        });
    }
    Ok(())
}

/// Mean KL(target || predicted) over the batch and its gradient with respect
/// to the raw `(n, 2, 1, 1)` head output.
pub fn kl_loss_and_grad(pred_raw: &Tensor, targets: &[RatingGaussian], form: KlForm) -> Result<(f64, Tensor)> {
    check_head("kl_loss", pred_raw, targets.len(), 2)?;
    let n = targets.len() as f64;
    let mut grad = Tensor::zeros(pred_raw.shape());
    let mut loss = 0.0;
    for (i, t) in targets.iter().enumerate() {
        let raw = pred_raw.item(i);
        let pred = decode_gaussian([raw[0], raw[1]]);
        loss += kl_gaussian(t, &pred, form)?;
        let d = t.mu - pred.mu;
        let (d_mu, d_sigma) = match form {
            KlForm::Corrected => {
                let s2 = pred.sigma * pred.sigma;
                (-d / s2, 1.0 / pred.sigma - (t.sigma * t.sigma + d * d) / (s2 * pred.sigma))
            }
            KlForm::Literal => {
                let m2 = pred.mu * pred.mu;
                (-d / m2 - (t.sigma * t.sigma + d * d) / (m2 * pred.mu), 1.0 / pred.sigma)
            }
        };
        let g = grad.item_mut(i);
        g[0] = d_mu / n;
        g[1] = d_sigma * sigmoid(raw[1]) / n;
    }
    Ok((loss / n, grad))
}

/// Mean cross-entropy between softmax(logits) and each normalised histogram.
pub fn distribution_softmax_loss(logits: &Tensor, hists: &[RatingHistogram]) -> Result<(f64, Tensor)> {
    check_head("distribution_softmax_loss", logits, hists.len(), RATING_BINS)?;
    let n = hists.len() as f64;
    let mut grad = Tensor::zeros(logits.shape());
    let mut loss = 0.0;
    for (i, h) in hists.iter().enumerate() {
        let p = h.normalized()?;
        let row = logits.item(i);
        let logq = log_softmax(row);
        let q = softmax(row);
        loss -= p.iter().zip(&logq).map(|(a, b)| a * b).sum::<f64>();
        for (j, g) in grad.item_mut(i).iter_mut().enumerate() {
            *g = (q[j] - p[j]) / n;
        }
    }
    Ok((loss / n, grad))
}

/// Mean KL(histogram || softmax(logits)): the cross-entropy minus the
/// histogram entropy, so the gradient matches the softmax loss.
pub fn distribution_kl_loss(logits: &Tensor, hists: &[RatingHistogram]) -> Result<(f64, Tensor)> {
    let (ce, grad) = distribution_softmax_loss(logits, hists)?;
    let mut mean_entropy = 0.0;
    for h in hists {
        mean_entropy += h.entropy()?;
    }
    Ok((ce - mean_entropy / hists.len() as f64, grad))
}

/// Mean and standard deviation of a predicted 10-bin distribution.
pub fn gaussian_of_distribution(probs: &[f64]) -> Result<RatingGaussian> {
    if probs.len() != RATING_BINS {
        return Err(invalid(format!("expected {} bins, got {}", RATING_BINS, probs.len())));
    }
    let total: f64 = probs.iter().sum();
    let mu = probs.iter().enumerate().map(|(i, p)| (i + 1) as f64 * p).sum::<f64>() / total;
    let var = probs
        .iter()
        .enumerate()
        .map(|(i, p)| p * ((i + 1) as f64 - mu).powi(2))
        .sum::<f64>()
        / total;
    Ok(RatingGaussian {
        mu,
        sigma: var.sqrt().max(SIGMA_FLOOR),
    })
}
