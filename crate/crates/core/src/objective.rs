//! Cross-entropy task loss, Jensen-Shannon prediction consistency and the
//! combined training objective.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mla::AlignmentBreakdown;
use crate::tensor::{FeatureMap, LabelMap, IGNORE};

/// Default prediction-consistency weight.
pub const DEFAULT_LAMBDA_PC: f64 = 10.0;

/// Clamp applied inside every logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-pixel class posteriors, `classes × height × width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap {
    data: Vec<f64>,
    classes: usize,
    height: usize,
    width: usize,
}

impl ProbabilityMap {
    /// Channel-wise softmax of a logit map.
    pub fn from_logits(logits: &FeatureMap) -> Self {
        let (c, h, w) = logits.shape();
        let n = h * w;
        let src = logits.data();
        let mut data = vec![0.0; c * n];
        for p in 0..n {
            let max = (0..c).map(|k| src[k * n + p]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..c {
                let e = (src[k * n + p] - max).exp();
                data[k * n + p] = e;
                sum += e;
            }
            for k in 0..c {
                data[k * n + p] /= sum;
            }
        }
        Self {
            data,
            classes: c,
            height: h,
            width: w,
        }
    }

    /// Wraps explicit probabilities, checking the per-pixel simplex.
    pub fn from_vec(data: Vec<f64>, classes: usize, height: usize, width: usize) -> Result<Self> {
        if data.len() != classes * height * width || classes == 0 {
            return Err(Error::shape(
                format!("{classes}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        let n = height * width;
        for p in 0..n {
            let mut sum = 0.0;
            for k in 0..classes {
                let v = data[k * n + p];
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidInput(format!("probability {v} outside [0, 1]")));
                }
                sum += v;
            }
            if (sum - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidInput(format!("pixel {p} sums to {sum}")));
            }
        }
        Ok(Self {
            data,
            classes,
            height,
            width,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn area(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, k: usize, p: usize) -> f64 {
        self.data[k * self.area() + p]
    }

    /// Arg-max labels.
    pub fn argmax(&self) -> LabelMap {
        let n = self.area();
        let labels = (0..n)
            .map(|p| {
                let mut best = 0;
                for k in 1..self.classes {
                    if self.data[k * n + p] > self.data[best * n + p] {
                        best = k;
                    }
                }
                best as u8
            })
            .collect();
        LabelMap::new(labels, self.height, self.width, self.classes).expect("argmax stays within class range")
    }

    fn check_same(&self, other: &ProbabilityMap) -> Result<()> {
        if (self.classes, self.height, self.width) == (other.classes, other.height, other.width) {
            Ok(())
        } else {
            Err(Error::shape(
                format!("{}x{}x{}", self.classes, self.height, self.width),
                format!("{}x{}x{}", other.classes, other.height, other.width),
            ))
        }
    }

    /// Backpropagates a gradient on the probabilities to the logits.
    pub fn softmax_backward(&self, grad_prob: &[f64]) -> FeatureMap {
        let n = self.area();
        let mut out = vec![0.0; self.data.len()];
        for p in 0..n {
            let dot: f64 = (0..self.classes)
                .map(|k| self.data[k * n + p] * grad_prob[k * n + p])
                .sum();
            for k in 0..self.classes {
                out[k * n + p] = self.data[k * n + p] * (grad_prob[k * n + p] - dot);
            }
        }
        FeatureMap::from_vec(out, self.classes, self.height, self.width, crate::net::HEAD_LAYER)
            .expect("finite softmax gradient")
    }
}

fn check_labels(p: &ProbabilityMap, gt: &LabelMap) -> Result<()> {
    if p.height != gt.height() || p.width != gt.width() {
        return Err(Error::shape(
            format!("{}x{}", p.height, p.width),
            format!("{}x{}", gt.height(), gt.width()),
        ));
    }
    if gt.num_categories() > p.classes {
        return Err(Error::shape(
            format!("{} classes", p.classes),
            format!("{} categories", gt.num_categories()),
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood of the true class over non-ignore pixels.
pub fn task_loss(p: &ProbabilityMap, gt: &LabelMap) -> Result<f64> {
    check_labels(p, gt)?;
    let n = p.area();
    let mut sum = 0.0;
    let mut valid = 0usize;
    for (q, &label) in gt.data().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        sum -= p.data[label as usize * n + q].max(PROB_FLOOR).ln();
        valid += 1;
    }
    if valid == 0 {
        return Err(Error::AllIgnored);
    }
    Ok(sum / valid as f64)
}

/// Task loss and its gradient with respect to the logits behind `p`.
pub fn task_loss_grad(p: &ProbabilityMap, gt: &LabelMap) -> Result<(f64, FeatureMap)> {
    let loss = task_loss(p, gt)?;
    let n = p.area();
    let valid = gt.data().iter().filter(|&&v| v != IGNORE).count() as f64;
    let mut grad = vec![0.0; p.data.len()];
    for (q, &label) in gt.data().iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        for k in 0..p.classes {
            let target = if k == label as usize { 1.0 } else { 0.0 };
            grad[k * n + q] = (p.data[k * n + q] - target) / valid;
        }
    }
    let grad = FeatureMap::from_vec(grad, p.classes, p.height, p.width, crate::net::HEAD_LAYER)?;
    Ok((loss, grad))
}

fn xlogy_ratio(x: f64, m: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * (x.max(PROB_FLOOR).ln() - m.max(PROB_FLOOR).ln())
    }
}

/// Pixel-averaged Jensen-Shannon divergence in nats.
pub fn js_consistency(p_i: &ProbabilityMap, p_sr: &ProbabilityMap) -> Result<f64> {
    p_i.check_same(p_sr)?;
    let n = p_i.area();
    let mut total = 0.0;
    for q in 0..n {
        let mut px = 0.0;
        for k in 0..p_i.classes {
            let a = p_i.data[k * n + q];
            let b = p_sr.data[k * n + q];
            let m = 0.5 * (a + b);
            px += xlogy_ratio(a, m) + xlogy_ratio(b, m);
        }
        total += 0.5 * px;
    }
    Ok(total / n as f64)
}

/// Jensen-Shannon consistency and its gradients with respect to the logits
/// of both branches.
pub fn js_consistency_grad(p_i: &ProbabilityMap, p_sr: &ProbabilityMap) -> Result<(f64, FeatureMap, FeatureMap)> {
    let value = js_consistency(p_i, p_sr)?;
    let n = p_i.area();
    let scale = 0.5 / n as f64;
    let mut gi = vec![0.0; p_i.data.len()];
    let mut gs = vec![0.0; p_i.data.len()];
    for idx in 0..p_i.data.len() {
        let a = p_i.data[idx].max(PROB_FLOOR);
        let b = p_sr.data[idx].max(PROB_FLOOR);
        let m = (0.5 * (p_i.data[idx] + p_sr.data[idx])).max(PROB_FLOOR);
        gi[idx] = scale * (a.ln() - m.ln());
        gs[idx] = scale * (b.ln() - m.ln());
    }
    Ok((value, p_i.softmax_backward(&gi), p_sr.softmax_backward(&gs)))
}

/// Components of the overall objective.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub task_i: f64,
    /// Absent when the rearranged branch is disabled; the task term is then
    /// the original-branch loss alone.
    pub task_sr: Option<f64>,
    pub mla_total: f64,
    pub pc: f64,
    pub lambda_pc: f64,
    pub total: f64,
}

/// `0.5 * (task_i + task_sr) + weighted MLA + lambda_pc * pc`.
pub fn total_loss(
    task_i: f64,
    task_sr: Option<f64>,
    mla: &AlignmentBreakdown,
    pc: f64,
    lambda_pc: f64,
) -> Result<LossBreakdown> {
    let parts = [task_i, task_sr.unwrap_or(0.0), mla.total, pc, lambda_pc];
    if parts.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite loss component".into()));
    }
    let task = match task_sr {
        Some(sr) => 0.5 * (task_i + sr),
        None => task_i,
    };
    Ok(LossBreakdown {
        task_i,
        task_sr,
        mla_total: mla.total,
        pc,
        lambda_pc,
        total: task + mla.total + lambda_pc * pc,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn probs(rows: &[&[f64]]) -> ProbabilityMap {
        // rows are per-pixel distributions
        let c = rows[0].len();
        let n = rows.len();
        let mut data = vec![0.0; c * n];
        for (p, r) in rows.iter().enumerate() {
            for k in 0..c {
                data[k * n + p] = r[k];
            }
        }
        ProbabilityMap::from_vec(data, c, 1, n).unwrap()
    }

    #[test]
    fn task_loss_examples() {
        let p = probs(&[&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]]);
        let gt = LabelMap::new(vec![0, 1], 1, 2, 3).unwrap();
        assert!(task_loss(&p, &gt).unwrap() <= 1e-11);

        let u = probs(&[&[0.25; 4], &[0.25; 4], &[0.25; 4]]);
        let gt = LabelMap::new(vec![0, 3, 2], 1, 3, 4).unwrap();
        assert!((task_loss(&u, &gt).unwrap() - 4f64.ln()).abs() < 1e-12);

        let gt = LabelMap::filled(IGNORE, 1, 3, 4).unwrap();
        assert!(matches!(task_loss(&u, &gt), Err(Error::AllIgnored)));
    }

    #[test]
    fn js_examples() {
        let a = probs(&[&[0.3, 0.7]]);
        assert_eq!(js_consistency(&a, &a).unwrap(), 0.0);
        let p = probs(&[&[1.0, 0.0]]);
        let q = probs(&[&[0.0, 1.0]]);
        assert!((js_consistency(&p, &q).unwrap() - 2f64.ln()).abs() < 1e-12);
        let h = probs(&[&[0.5, 0.5]]);
        // 0.5 * (ln(4/3) + 0.5 ln(2/3) + 0.5 ln 2)
        let expect = 0.5 * ((4.0f64 / 3.0).ln() + 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln());
        let got = js_consistency(&p, &h).unwrap();
        assert!((got - expect).abs() < 1e-12);
        assert!((got - 0.2158).abs() < 1e-4);
    }

    #[test]
    fn total_loss_examples() {
        let mla = AlignmentBreakdown {
            total: 0.2,
            ..Default::default()
        };
        let b = total_loss(1.0, Some(3.0), &mla, 0.05, DEFAULT_LAMBDA_PC).unwrap();
        assert!((b.total - 2.7).abs() < 1e-12);
        let zero = total_loss(0.0, Some(0.0), &AlignmentBreakdown::default(), 0.0, 10.0).unwrap();
        assert_eq!(zero.total, 0.0);
        let srm_only = total_loss(1.25, Some(0.75), &AlignmentBreakdown::default(), 0.3, 0.0).unwrap();
        assert_eq!(srm_only.total, 0.5 * (1.25 + 0.75));
        assert!(total_loss(f64::NAN, None, &mla, 0.0, 1.0).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = FeatureMap::from_vec(vec![1., -2., 0.5, 3., 0., 0.], 3, 1, 2, 5).unwrap();
        let p = ProbabilityMap::from_logits(&logits);
        for q in 0..2 {
            let s: f64 = (0..3).map(|k| p.get(k, q)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert_eq!(p.argmax().data(), &[0, 1]);
    }

    fn arb_pair() -> impl Strategy<Value = (ProbabilityMap, ProbabilityMap)> {
        (2usize..5, 1usize..5).prop_flat_map(|(c, n)| {
            (
                proptest::collection::vec(-6.0f64..6.0, c * n),
                proptest::collection::vec(-6.0f64..6.0, c * n),
            )
                .prop_map(move |(a, b)| {
                    let to = |v: Vec<f64>| ProbabilityMap::from_logits(&FeatureMap::from_vec(v, c, 1, n, 5).unwrap());
                    (to(a), to(b))
                })
        })
    }

    proptest! {
        #[test]
        fn js_symmetric_and_bounded((p, q) in arb_pair()) {
            let a = js_consistency(&p, &q).unwrap();
            let b = js_consistency(&q, &p).unwrap();
            prop_assert_eq!(a.to_bits(), b.to_bits());
            prop_assert!(a >= 0.0 && a <= 2f64.ln() + 1e-12);
            prop_assert!(js_consistency(&p, &p).unwrap().abs() <= 1e-9);
        }
    }
}
