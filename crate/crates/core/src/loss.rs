//! Loss functions and their analytic gradients: softmax cross-entropy,
//! the instance/bag probability model, the negative-only multiple
//! instance loss actually optimized during bag training, and the full
//! bag loss (positive term included) as an explicit variant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Binary category indicator of length C. Softmax cross-entropy requires
/// exactly one set entry; the MIL losses accept any multi-hot vector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVector {
    entries: Vec<u8>,
}

impl LabelVector {
    pub fn one_hot(index: usize, classes: usize) -> Result<LabelVector> {
        if index >= classes {
            return Err(Error::data(format!("label {index} out of range for {classes} classes")));
        }
        let mut entries = vec![0u8; classes];
        entries[index] = 1;
        Ok(LabelVector { entries })
    }

    pub fn ones(classes: usize) -> LabelVector {
        LabelVector { entries: vec![1u8; classes] }
    }

    pub fn from_bits(entries: Vec<u8>) -> Result<LabelVector> {
        if entries.iter().any(|&e| e > 1) {
            return Err(Error::data("label vector entries must be 0 or 1".to_string()));
        }
        Ok(LabelVector { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.entries[i] == 1
    }

    pub fn bits(&self) -> &[u8] {
        &self.entries
    }

    /// Index of the single set entry; errors if zero or multiple are set.
    pub fn single_label(&self) -> Result<usize> {
        let ones: Vec<usize> =
            self.entries.iter().enumerate().filter(|(_, &e)| e == 1).map(|(i, _)| i).collect();
        match ones.as_slice() {
            [only] => Ok(*only),
            _ => Err(Error::data(format!(
                "expected a single-label vector, found {} set entries",
                ones.len()
            ))),
        }
    }
}

/// Ordered collection of augmented regions sharing one image-level label.
#[derive(Clone, Debug)]
pub struct Bag {
    instances: Vec<Tensor>,
    label: LabelVector,
}

impl Bag {
    pub fn new(instances: Vec<Tensor>, label: LabelVector) -> Result<Bag> {
        let first = instances
            .first()
            .ok_or_else(|| Error::data("a bag needs at least one instance"))?;
        let shape = first.shape().to_vec();
        if instances.iter().any(|t| t.shape() != shape) {
            return Err(Error::shape("bag instances must share one shape".to_string()));
        }
        Ok(Bag { instances, label })
    }

    pub fn instances(&self) -> &[Tensor] {
        &self.instances
    }

    pub fn label(&self) -> &LabelVector {
        &self.label
    }

    pub fn size(&self) -> usize {
        self.instances.len()
    }
}

/// Which term structure the bag loss uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MilMode {
    NegativeOnly,
    FullBag,
}

/// MIL loss configuration. `lambda` is the rate constant of the instance
/// probability model, distinct from the optimizer learning rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MilConfig {
    pub lambda: f64,
    pub mode: MilMode,
    pub prob_clamp_epsilon: f64,
}

impl Default for MilConfig {
    fn default() -> Self {
        MilConfig { lambda: 0.001, mode: MilMode::NegativeOnly, prob_clamp_epsilon: 1e-12 }
    }
}

impl MilConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::config("mil lambda must be positive"));
        }
        if !(self.prob_clamp_epsilon > 0.0 && self.prob_clamp_epsilon <= 1e-3) {
            return Err(Error::config("prob_clamp_epsilon must be in (0, 1e-3]"));
        }
        Ok(())
    }
}

/// 0-based index of the maximum score; ties resolve to the lowest index.
pub fn predict_label(scores: &[f64]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::data("cannot predict a label from an empty score vector"));
    }
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate().skip(1) {
        if v > scores[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Numerically stable softmax with max subtraction.
pub fn softmax(scores: &[f64]) -> Vec<f64> {
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|&h| (h - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Cross-entropy of the softmax distribution against a single-label
/// vector, with its gradient p - y w.r.t. the scores.
pub fn softmax_ce(scores: &[f64], label: &LabelVector) -> Result<(f64, Vec<f64>)> {
    if scores.len() != label.len() {
        return Err(Error::shape(format!(
            "score vector length {} does not match label length {}",
            scores.len(),
            label.len()
        )));
    }
    let target = label.single_label()?;
    let probs = softmax(scores);
    let loss = -probs[target].ln();
    let grad = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| p - if i == target { 1.0 } else { 0.0 })
        .collect();
    Ok((loss, grad))
}

/// Probability that a region with non-negative score h depicts the
/// category: 1 - exp(-lambda * h), strictly inside [0, 1).
pub fn instance_prob(score: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::config("instance_prob lambda must be positive"));
    }
    if score < 0.0 {
        return Err(Error::numeric(format!(
            "instance score {score} is negative; the loss layer expects ReLU-rectified scores"
        )));
    }
    Ok(-(-lambda * score).exp_m1())
}

/// Probability that every instance in the bag is negative: the product of
/// the per-instance complements.
pub fn bag_negative_prob(probs: &[f64]) -> f64 {
    probs.iter().map(|&p| 1.0 - p).product()
}

fn check_scores(scores: &Tensor, label: &LabelVector) -> Result<(usize, usize)> {
    if scores.rank() != 2 {
        return Err(Error::shape(format!(
            "bag scores must be (m, C), got {:?}",
            scores.shape()
        )));
    }
    let (m, c) = (scores.dim(0), scores.dim(1));
    if c != label.len() {
        return Err(Error::shape(format!(
            "bag scores have {c} categories but label has {}",
            label.len()
        )));
    }
    if let Some(bad) = scores.data().iter().find(|v| **v < 0.0) {
        return Err(Error::numeric(format!(
            "negative bag score {bad}; the loss layer expects ReLU-rectified scores"
        )));
    }
    Ok((m, c))
}

/// Negative-only bag loss in closed form: lambda * sum_i (1 - y_i) *
/// sum_j h_i^j. The gradient is the constant lambda * (1 - y_i) for every
/// region, independent of the scores.
pub fn mil_loss_negative_only(
    scores: &Tensor,
    label: &LabelVector,
    cfg: &MilConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let (m, c) = check_scores(scores, label)?;
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[m, c]);
    for i in 0..c {
        if label.get(i) {
            continue;
        }
        let mut col_sum = 0.0;
        for j in 0..m {
            col_sum += scores.data()[j * c + i];
            grad.data_mut()[j * c + i] = cfg.lambda;
        }
        loss += cfg.lambda * col_sum;
    }
    Ok((loss, grad))
}

/// Full bag loss, positive-bag term included:
/// -sum_i [ y_i log(1 - q_i) + (1 - y_i) log(q_i) ] with q_i the
/// probability that the bag is negative for category i. Logs are clamped
/// to [eps, 1 - eps]; the gradient of a clamped term is zero.
pub fn mil_loss_full_bag(
    scores: &Tensor,
    label: &LabelVector,
    cfg: &MilConfig,
) -> Result<(f64, Tensor)> {
    cfg.validate()?;
    let (m, c) = check_scores(scores, label)?;
    let eps = cfg.prob_clamp_epsilon;
    let clamp = |v: f64| v.clamp(eps, 1.0 - eps);
    let mut loss = 0.0;
    let mut grad = Tensor::zeros(&[m, c]);
    for i in 0..c {
        let probs: Vec<f64> = (0..m)
            .map(|j| instance_prob(scores.data()[j * c + i], cfg.lambda))
            .collect::<Result<_>>()?;
        let q = bag_negative_prob(&probs);
        // d loss / d h_i^j collapses to a per-category constant:
        //   negative term: lambda
        //   positive term: -lambda * q / (1 - q)
        let g = if label.get(i) {
            loss += -clamp(1.0 - q).ln();
            if 1.0 - q <= eps || 1.0 - q >= 1.0 - eps {
                0.0
            } else {
                -cfg.lambda * q / (1.0 - q)
            }
        } else {
            loss += -clamp(q).ln();
            if q <= eps || q >= 1.0 - eps {
                0.0
            } else {
                cfg.lambda
            }
        };
        for j in 0..m {
            grad.data_mut()[j * c + i] = g;
        }
    }
    Ok((loss, grad))
}

/// How per-region scores are folded into one bag-level score vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Per-class aggregate of an (m, C) score matrix, feeding `predict_label`.
pub fn aggregate_bag_scores(scores: &Tensor, how: Aggregation) -> Result<Vec<f64>> {
    if scores.rank() != 2 || scores.dim(0) == 0 {
        return Err(Error::shape(format!(
            "aggregate expects a non-empty (m, C) matrix, got {:?}",
            scores.shape()
        )));
    }
    let (m, c) = (scores.dim(0), scores.dim(1));
    let mut out = vec![0.0; c];
    match how {
        Aggregation::Mean => {
            for j in 0..m {
                for i in 0..c {
                    out[i] += scores.data()[j * c + i];
                }
            }
            out.iter_mut().for_each(|v| *v /= m as f64);
        }
        Aggregation::Max => {
            out.copy_from_slice(&scores.data()[..c]);
            for j in 1..m {
                for i in 0..c {
                    out[i] = out[i].max(scores.data()[j * c + i]);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff;
    use crate::rng::rng_from;
    use rand::Rng;

    #[test]
    fn predict_label_argmax_and_ties() {
        assert_eq!(predict_label(&[1.0, 3.0, 2.0]).unwrap(), 1);
        assert_eq!(predict_label(&[5.0, 5.0]).unwrap(), 0);
        assert_eq!(predict_label(&[0.0]).unwrap(), 0);
        assert!(predict_label(&[]).is_err());
    }

    #[test]
    fn softmax_ce_uniform_case() {
        let y = LabelVector::one_hot(0, 2).unwrap();
        let (loss, grad) = softmax_ce(&[0.0, 0.0], &y).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((grad[0] + 0.5).abs() < 1e-12);
        assert!((grad[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn softmax_ce_confident_case() {
        let y = LabelVector::one_hot(0, 2).unwrap();
        let (loss, _) = softmax_ce(&[10.0, 0.0], &y).unwrap();
        // direct evaluation: -ln(e^10 / (e^10 + 1)) = ln(1 + e^-10)
        let expected = (1.0 + (-10.0f64).exp()).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((loss - 4.5418e-5).abs() < 1e-8);
    }

    #[test]
    fn softmax_ce_rejects_multi_label() {
        let multi = LabelVector::from_bits(vec![1, 1, 0]).unwrap();
        assert!(softmax_ce(&[0.0, 0.0, 0.0], &multi).is_err());
        let none = LabelVector::from_bits(vec![0, 0, 0]).unwrap();
        assert!(softmax_ce(&[0.0, 0.0, 0.0], &none).is_err());
    }

    #[test]
    fn softmax_ce_gradient_matches_finite_differences() {
        let mut rng = rng_from(21, 0, 0);
        for _ in 0..20 {
            let c = rng.gen_range(2..8);
            let target = rng.gen_range(0..c);
            let y = LabelVector::one_hot(target, c).unwrap();
            let scores: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let (_, grad) = softmax_ce(&scores, &y).unwrap();
            let x = Tensor::from_vec(&[c], scores).unwrap();
            let numeric =
                finite_diff(|t| softmax_ce(t.data(), &y).map(|(l, _)| l), &x, 1e-6).unwrap();
            for (a, n) in grad.iter().zip(numeric.data()) {
                assert!(crate::gradcheck::rel_err(*a, *n) <= 1e-7, "analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn softmax_identities_hold() {
        let mut rng = rng_from(22, 0, 0);
        for _ in 0..1000 {
            let c = rng.gen_range(2..12);
            let target = rng.gen_range(0..c);
            let y = LabelVector::one_hot(target, c).unwrap();
            let scores: Vec<f64> = (0..c).map(|_| rng.gen::<f64>() * 20.0 - 10.0).collect();
            let probs = softmax(&scores);
            let sum: f64 = probs.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            let (loss, grad) = softmax_ce(&scores, &y).unwrap();
            assert!(loss >= 0.0);
            let grad_sum: f64 = grad.iter().sum();
            assert!(grad_sum.abs() <= 1e-12);
        }
    }

    #[test]
    fn instance_prob_fixed_points() {
        assert_eq!(instance_prob(0.0, 0.001).unwrap(), 0.0);
        // lambda * h = 1 exactly
        let p = instance_prob(1000.0, 0.001).unwrap();
        assert!((p - (1.0 - (-1.0f64).exp())).abs() < 1e-15);
        assert!((p - 0.6321206).abs() < 1e-7);
        assert!(instance_prob(-0.1, 0.001).is_err());
    }

    #[test]
    fn instance_prob_monotone_and_invertible() {
        let mut rng = rng_from(23, 0, 0);
        for _ in 0..1000 {
            let lambda = rng.gen::<f64>() * 0.01 + 1e-4;
            let a = rng.gen::<f64>() * 100.0 + 0.01;
            let b = a + rng.gen::<f64>() * 100.0 + 1e-9;
            let pa = instance_prob(a, lambda).unwrap();
            let pb = instance_prob(b, lambda).unwrap();
            assert!(pa < pb, "monotonicity violated at ({a}, {b})");
            assert!(pa > 0.0 && pa < 1.0);
            // invert: h = -ln(1 - p) / lambda
            let recovered = -(1.0 - pa).ln() / lambda;
            assert!(
                crate::gradcheck::rel_err(recovered, a) <= 1e-9,
                "inversion lost precision: {a} vs {recovered}"
            );
        }
    }

    #[test]
    fn bag_negative_prob_products() {
        assert_eq!(bag_negative_prob(&[0.0, 0.0, 0.0]), 1.0);
        assert_eq!(bag_negative_prob(&[0.3, 1.0]), 0.0);
        assert!((bag_negative_prob(&[0.5, 0.5]) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn negative_only_worked_example() {
        // two categories, label on the first; per-region scores
        // class 1: [2, 1], class 2: [3, 4]
        let scores = Tensor::from_vec(&[2, 2], vec![2.0, 3.0, 1.0, 4.0]).unwrap();
        let y = LabelVector::one_hot(0, 2).unwrap();
        let cfg = MilConfig { lambda: 0.001, ..Default::default() };
        let (loss, grad) = mil_loss_negative_only(&scores, &y, &cfg).unwrap();
        assert!((loss - 0.007).abs() < 1e-15);
        assert_eq!(grad.data(), &[0.0, 0.001, 0.0, 0.001]);
    }

    #[test]
    fn negative_only_all_ones_label_is_flat_zero() {
        let scores = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let y = LabelVector::ones(3);
        let cfg = MilConfig::default();
        let (loss, grad) = mil_loss_negative_only(&scores, &y, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn negative_only_gradient_ignores_scores() {
        let mut rng = rng_from(24, 0, 0);
        let y = LabelVector::one_hot(0, 4).unwrap();
        let cfg = MilConfig { lambda: 0.25, ..Default::default() };
        let mut reference: Option<Vec<f64>> = None;
        for _ in 0..10 {
            let scores = Tensor::from_vec(
                &[3, 4],
                (0..12).map(|_| rng.gen::<f64>() * 50.0).collect(),
            )
            .unwrap();
            let (_, grad) = mil_loss_negative_only(&scores, &y, &cfg).unwrap();
            match &reference {
                None => reference = Some(grad.data().to_vec()),
                Some(r) => assert_eq!(r.as_slice(), grad.data()),
            }
        }
        let grad = reference.unwrap();
        for j in 0..3 {
            assert_eq!(grad[j * 4], 0.0);
            for i in 1..4 {
                assert_eq!(grad[j * 4 + i], 0.25);
            }
        }
    }

    /// The closed form must equal the probability chain
    /// -sum_i (1 - y_i) log prod_j (1 - p_i^j) evaluated through
    /// `instance_prob` and `bag_negative_prob`.
    #[test]
    fn negative_only_matches_probability_chain() {
        let mut rng = rng_from(25, 0, 0);
        for _ in 0..1000 {
            let m = rng.gen_range(1..8);
            let c = rng.gen_range(1..12);
            let lambda = rng.gen::<f64>() * 0.009 + 0.001;
            let scores = Tensor::from_vec(
                &[m, c],
                (0..m * c).map(|_| rng.gen::<f64>() * 100.0).collect(),
            )
            .unwrap();
            let bits: Vec<u8> = (0..c).map(|_| u8::from(rng.gen::<f64>() < 0.3)).collect();
            let y = LabelVector::from_bits(bits).unwrap();
            let cfg = MilConfig { lambda, ..Default::default() };
            let (closed, _) = mil_loss_negative_only(&scores, &y, &cfg).unwrap();

            let mut chain = 0.0;
            for i in 0..c {
                if y.get(i) {
                    continue;
                }
                let probs: Vec<f64> = (0..m)
                    .map(|j| instance_prob(scores.data()[j * c + i], lambda).unwrap())
                    .collect();
                chain += -bag_negative_prob(&probs).ln();
            }
            assert!(
                (closed - chain).abs() <= 1e-10,
                "closed {closed} vs chain {chain} (diff {})",
                (closed - chain).abs()
            );
        }
    }

    #[test]
    fn negative_only_zero_iff_off_label_columns_zero() {
        let cfg = MilConfig::default();
        let y = LabelVector::one_hot(1, 3).unwrap();
        let zeroed =
            Tensor::from_vec(&[2, 3], vec![0.0, 5.0, 0.0, 0.0, 2.0, 0.0]).unwrap();
        let (loss, _) = mil_loss_negative_only(&zeroed, &y, &cfg).unwrap();
        assert_eq!(loss, 0.0);
        let nonzero =
            Tensor::from_vec(&[2, 3], vec![0.0, 5.0, 0.1, 0.0, 2.0, 0.0]).unwrap();
        let (loss, _) = mil_loss_negative_only(&nonzero, &y, &cfg).unwrap();
        assert!(loss > 0.0);
    }

    #[test]
    fn full_bag_single_positive_instance() {
        // p = 0.5 ⇔ lambda * h = ln 2
        let lambda = 0.001;
        let h = std::f64::consts::LN_2 / lambda;
        let scores = Tensor::from_vec(&[1, 1], vec![h]).unwrap();
        let y = LabelVector::one_hot(0, 1).unwrap();
        let cfg = MilConfig { lambda, ..Default::default() };
        let (loss, _) = mil_loss_full_bag(&scores, &y, &cfg).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn full_bag_negative_zero_score_costs_nothing() {
        let scores = Tensor::from_vec(&[1, 1], vec![0.0]).unwrap();
        let y = LabelVector::from_bits(vec![0]).unwrap();
        let cfg = MilConfig::default();
        let (loss, _) = mil_loss_full_bag(&scores, &y, &cfg).unwrap();
        assert_eq!(loss, 0.0);
    }

    #[test]
    fn full_bag_gradient_matches_finite_differences() {
        let mut rng = rng_from(26, 0, 0);
        for _ in 0..20 {
            let m = rng.gen_range(1..5);
            let c = rng.gen_range(1..6);
            // keep probabilities away from the clamp boundaries
            let lambda = 0.01;
            let scores = Tensor::from_vec(
                &[m, c],
                (0..m * c).map(|_| rng.gen::<f64>() * 40.0 + 5.0).collect(),
            )
            .unwrap();
            let bits: Vec<u8> = (0..c).map(|_| u8::from(rng.gen::<f64>() < 0.5)).collect();
            let y = LabelVector::from_bits(bits).unwrap();
            let cfg = MilConfig { lambda, mode: MilMode::FullBag, ..Default::default() };
            let (_, grad) = mil_loss_full_bag(&scores, &y, &cfg).unwrap();
            let numeric = finite_diff(
                |t| mil_loss_full_bag(t, &y, &cfg).map(|(l, _)| l),
                &scores,
                1e-6,
            )
            .unwrap();
            for (a, n) in grad.data().iter().zip(numeric.data()) {
                assert!(
                    crate::gradcheck::rel_err(*a, *n) <= 1e-5,
                    "analytic {a} numeric {n}"
                );
            }
        }
    }

    #[test]
    fn aggregate_mean_and_max() {
        let scores = Tensor::from_vec(&[2, 2], vec![1.0, 3.0, 3.0, 1.0]).unwrap();
        assert_eq!(aggregate_bag_scores(&scores, Aggregation::Mean).unwrap(), vec![2.0, 2.0]);
        assert_eq!(aggregate_bag_scores(&scores, Aggregation::Max).unwrap(), vec![3.0, 3.0]);

        let single = Tensor::from_vec(&[1, 3], vec![0.5, -1.0, 2.0]).unwrap();
        assert_eq!(
            aggregate_bag_scores(&single, Aggregation::Mean).unwrap(),
            vec![0.5, -1.0, 2.0]
        );
    }

    #[test]
    fn aggregate_mean_matches_brute_force() {
        let mut rng = rng_from(27, 0, 0);
        for _ in 0..50 {
            let m = rng.gen_range(1..7);
            let c = rng.gen_range(1..9);
            let scores = Tensor::from_vec(
                &[m, c],
                (0..m * c).map(|_| rng.gen::<f64>() * 10.0 - 5.0).collect(),
            )
            .unwrap();
            let fast = aggregate_bag_scores(&scores, Aggregation::Mean).unwrap();
            for i in 0..c {
                let mut acc = 0.0;
                for j in 0..m {
                    acc += scores.data()[j * c + i];
                }
                assert!((fast[i] - acc / m as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn bag_construction_checks_shapes() {
        let a = Tensor::zeros(&[3, 4, 4]);
        let b = Tensor::zeros(&[3, 5, 5]);
        let y = LabelVector::one_hot(0, 2).unwrap();
        assert!(Bag::new(vec![a.clone(), b], y.clone()).is_err());
        assert!(Bag::new(vec![], y.clone()).is_err());
        assert!(Bag::new(vec![a.clone(), a], y).is_ok());
    }
}
