//! Training objective: correlation loss, pairwise rank loss, and their
//! weighted combination with the local perception constraint.

use crate::error::{KvqError, Result};
use crate::lpc::LossTerm;
use crate::tensor::{Tape, Tensor, TensorId};
use std::sync::Arc;

/// Balancing coefficients for the rank and local-perception terms.
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_r: f64,
    pub lambda_p: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_r: 1.0, lambda_p: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_r < 0.0 || self.lambda_p < 0.0 {
            return Err(KvqError::config(format!(
                "loss weights must be nonnegative, got lambda_r={} lambda_p={}",
                self.lambda_r, self.lambda_p
            )));
        }
        Ok(())
    }
}

/// Sum of squared deviations below this is treated as zero variance.
const VAR_FLOOR: f64 = 1e-30;

/// Correlation loss `(1 - PLCC(pred, gt)) / 2`, in `[0, 1]` and invariant
/// under positive affine maps of the predictions. Zero variance on either
/// side makes the correlation undefined; the loss then degenerates to a
/// constant 0.5 with the flag set.
pub fn plcc_loss(tape: &mut Tape, preds: TensorId, gt: &[f64]) -> Result<LossTerm> {
    let n = tape.data(preds).len();
    if n != gt.len() {
        return Err(KvqError::shape(format!("plcc_loss: {n} predictions vs {} labels", gt.len())));
    }
    if n < 2 {
        return Err(KvqError::contract("plcc_loss: need at least 2 samples".to_string()));
    }
    let gt_mean = gt.iter().sum::<f64>() / n as f64;
    let ym: Vec<f64> = gt.iter().map(|v| v - gt_mean).collect();
    let sy = ym.iter().map(|v| v * v).sum::<f64>().sqrt();

    let pred_data = tape.data(preds).to_vec();
    let p_mean = pred_data.iter().sum::<f64>() / n as f64;
    let sx_sq: f64 = pred_data.iter().map(|v| (v - p_mean) * (v - p_mean)).sum();
    if sx_sq < VAR_FLOOR || (sy * sy) < VAR_FLOOR {
        let half = tape.constant(Tensor::scalar(0.5));
        return Ok(LossTerm { value: half, degenerate: true });
    }

    let flat = tape.reshape(preds, vec![n])?;
    let mean = tape.mean_all(flat);
    let xm = tape.sub(flat, mean)?;
    let ym_t = tape.constant(Tensor::new(vec![n], ym)?);
    let cov_terms = tape.mul(xm, ym_t)?;
    let cov = tape.sum_all(cov_terms);
    let xm_sq = tape.mul(xm, xm)?;
    let ssx = tape.sum_all(xm_sq);
    let sx = tape.sqrt(ssx);
    let sy_t = tape.constant(Tensor::scalar(sy));
    let denom_raw = tape.mul(sx, sy_t)?;
    let denom = tape.clamp_min(denom_raw, VAR_FLOOR);
    let plcc = tape.div(cov, denom)?;
    let halved = tape.scale(plcc, -0.5);
    let value = tape.add_const(halved, 0.5);
    Ok(LossTerm { value, degenerate: false })
}

/// Zero-margin pairwise hinge over every ground-truth-ordered pair: for each
/// (i, j) with `gt[i] > gt[j]`, penalize `max(0, pred[j] - pred[i])`, averaged
/// over the pairs. Batches with no ordered pair give a constant zero.
pub fn rank_loss(tape: &mut Tape, preds: TensorId, gt: &[f64]) -> Result<TensorId> {
    let n = tape.data(preds).len();
    if n != gt.len() {
        return Err(KvqError::shape(format!("rank_loss: {n} predictions vs {} labels", gt.len())));
    }
    let mut hi = Vec::new();
    let mut lo = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if gt[i] > gt[j] {
                hi.push(i);
                lo.push(j);
            }
        }
    }
    if hi.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let flat = tape.reshape(preds, vec![n])?;
    let q_hi = tape.index_select(flat, 0, Arc::new(hi))?;
    let q_lo = tape.index_select(flat, 0, Arc::new(lo))?;
    let margin = tape.sub(q_lo, q_hi)?;
    let hinge = tape.relu(margin);
    Ok(tape.mean_all(hinge))
}

/// Full objective: `plcc + lambda_r * rank + lambda_p * lpc`.
pub fn total_loss(
    tape: &mut Tape,
    plcc: TensorId,
    rank: TensorId,
    lpc: TensorId,
    w: &LossWeights,
) -> Result<TensorId> {
    w.validate()?;
    let rank_term = tape.scale(rank, w.lambda_r);
    let lpc_term = tape.scale(lpc, w.lambda_p);
    let partial = tape.add(plcc, rank_term)?;
    tape.add(partial, lpc_term)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn plcc_of(preds: &[f64], gt: &[f64]) -> (f64, bool) {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![preds.len()], preds.to_vec()).unwrap());
        let term = plcc_loss(&mut tape, p, gt).unwrap();
        (tape.value(term.value).item().unwrap(), term.degenerate)
    }

    fn rank_of(preds: &[f64], gt: &[f64]) -> f64 {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![preds.len()], preds.to_vec()).unwrap());
        let r = rank_loss(&mut tape, p, gt).unwrap();
        tape.value(r).item().unwrap()
    }

    #[test]
    fn perfect_and_affine_predictions_have_zero_loss() {
        let gt = [1.0, 3.0, 2.0, 5.0, 4.0];
        let (v, d) = plcc_of(&gt, &gt);
        assert!(v.abs() < 1e-12);
        assert!(!d);
        let scaled: Vec<f64> = gt.iter().map(|v| 2.5 * v + 7.0).collect();
        let (v, _) = plcc_of(&scaled, &gt);
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn anticorrelated_predictions_have_loss_one() {
        let gt = [1.0, 2.0, 3.0];
        let neg: Vec<f64> = gt.iter().map(|v| -v).collect();
        let (v, _) = plcc_of(&neg, &gt);
        assert!((v - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_degenerates_to_half() {
        let (v, d) = plcc_of(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert_eq!(v, 0.5);
        assert!(d);
        let (v, d) = plcc_of(&[1.0, 2.0, 3.0], &[4.0, 4.0, 4.0]);
        assert_eq!(v, 0.5);
        assert!(d);
    }

    #[test]
    fn single_sample_batch_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::new(vec![1], vec![1.0]).unwrap());
        assert!(matches!(plcc_loss(&mut tape, p, &[1.0]), Err(KvqError::Contract(_))));
    }

    #[test]
    fn rank_loss_zero_cases() {
        // single element: no pairs
        assert_eq!(rank_of(&[3.0], &[1.0]), 0.0);
        // co-ordered predictions: every hinge inactive
        assert_eq!(rank_of(&[0.1, 0.5, 0.9], &[10.0, 20.0, 30.0]), 0.0);
        // all-tied ground truth: no ordered pairs
        assert_eq!(rank_of(&[0.3, 0.2, 0.9], &[1.0, 1.0, 1.0]), 0.0);
    }

    #[test]
    fn rank_loss_single_violated_pair() {
        // gt orders sample 0 above sample 1, prediction reverses by 1.0
        assert!((rank_of(&[0.0, 1.0], &[2.0, 1.0]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rank_loss_matches_pairwise_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        for _ in 0..20 {
            let n = rng.random_range(2..8);
            let preds: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let gt: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..5.0)).collect();
            let got = rank_of(&preds, &gt);
            let mut total = 0.0;
            let mut count = 0usize;
            for i in 0..n {
                for j in 0..n {
                    if gt[i] > gt[j] {
                        total += (preds[j] - preds[i]).max(0.0);
                        count += 1;
                    }
                }
            }
            let expect = if count == 0 { 0.0 } else { total / count as f64 };
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_is_weighted_sum() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(0.3));
        let r = tape.constant(Tensor::scalar(0.7));
        let l = tape.constant(Tensor::scalar(0.2));
        let w = LossWeights { lambda_r: 0.5, lambda_p: 2.0 };
        let total = total_loss(&mut tape, p, r, l, &w).unwrap();
        let expect = 0.3 + 0.5 * 0.7 + 2.0 * 0.2;
        assert!((tape.value(total).item().unwrap() - expect).abs() < 1e-12);

        // lambda_r = lambda_p = 0 reduces to the correlation term
        let w0 = LossWeights { lambda_r: 0.0, lambda_p: 0.0 };
        let total = total_loss(&mut tape, p, r, l, &w0).unwrap();
        assert!((tape.value(total).item().unwrap() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn negative_weights_are_rejected() {
        assert!(LossWeights { lambda_r: -0.1, lambda_p: 0.0 }.validate().is_err());
    }
}
