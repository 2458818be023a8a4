//! Evaluation metrics: rank/linear correlation, saliency metrics, and the
//! region-annotation protocols.

use std::collections::HashMap;

use crate::data::lpvq::AnnotationRecord;
use crate::error::{KvqError, Result};
use crate::tensor::Tensor;

/// Pearson linear correlation coefficient.
pub fn plcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(KvqError::shape(format!("plcc: {} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(KvqError::contract("plcc: need at least 2 samples".to_string()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&a, &b) in x.iter().zip(y) {
        cov += (a - mx) * (b - my);
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(KvqError::UndefinedMetric(
            "pearson correlation undefined for zero variance".to_string(),
        ));
    }
    Ok(cov / (vx.sqrt() * vy.sqrt()))
}

/// Ranks with ties averaged (1-based), the standard Spearman convention.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && x[order[j + 1]] == x[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn srcc(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(KvqError::shape(format!("srcc: {} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(KvqError::contract("srcc: need at least 2 samples".to_string()));
    }
    plcc(&average_ranks(x), &average_ranks(y))
}

/// Coordinates (flat indices) whose value reaches 0.9 of the map maximum.
/// The `>=` comparison keeps the maximum itself in the set even under exact
/// ties. The map must be nonnegative with a positive maximum.
pub fn fixation_points(map: &Tensor) -> Result<Vec<usize>> {
    if map.data().iter().any(|&v| v < 0.0) {
        return Err(KvqError::input("fixation_points: map must be nonnegative"));
    }
    let max = map.data().iter().cloned().fold(0.0f64, f64::max);
    if max <= 0.0 {
        return Err(KvqError::input("fixation_points: all-zero map has no fixations"));
    }
    let thresh = 0.9 * max;
    Ok(map
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &v)| v >= thresh)
        .map(|(i, _)| i)
        .collect())
}

/// Normalized scanpath saliency: the prediction is standardized to zero mean
/// and unit (population) variance, then averaged at the fixation coordinates.
pub fn nss(pred: &Tensor, fixations: &[usize]) -> Result<f64> {
    if fixations.is_empty() {
        return Err(KvqError::contract("nss: empty fixation set".to_string()));
    }
    let d = pred.data();
    let n = d.len() as f64;
    let mean = d.iter().sum::<f64>() / n;
    let var = d.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(KvqError::UndefinedMetric(
            "nss undefined for a constant prediction".to_string(),
        ));
    }
    let std = var.sqrt();
    let mut acc = 0.0;
    for &f in fixations {
        if f >= d.len() {
            return Err(KvqError::contract(format!("nss: fixation {f} out of range")));
        }
        acc += (d[f] - mean) / std;
    }
    Ok(acc / fixations.len() as f64)
}

/// Shuffled AUC: positives are this sample's fixation values, negatives are
/// fixation coordinates drawn from other samples. Ties count one half.
pub fn sauc(pred: &Tensor, fixations: &[usize], negatives: &[usize]) -> Result<f64> {
    if fixations.is_empty() || negatives.is_empty() {
        return Err(KvqError::contract("sauc: positive and negative sets must be nonempty".to_string()));
    }
    if negatives.iter().any(|n| fixations.contains(n)) {
        return Err(KvqError::contract("sauc: positive and negative sets must be disjoint".to_string()));
    }
    let d = pred.data();
    let at = |idx: &[usize]| -> Result<Vec<f64>> {
        idx.iter()
            .map(|&i| {
                d.get(i)
                    .copied()
                    .ok_or_else(|| KvqError::contract(format!("sauc: index {i} out of range")))
            })
            .collect()
    };
    let pos = at(fixations)?;
    let neg = at(negatives)?;
    let mut score = 0.0;
    for &p in &pos {
        for &n in &neg {
            if p > n {
                score += 1.0;
            } else if p == n {
                score += 0.5;
            }
        }
    }
    Ok(score / (pos.len() * neg.len()) as f64)
}

/// KL divergence KL(GT ‖ prediction) with both maps epsilon-smoothed and
/// normalized to sum one. Always nonnegative.
pub fn kl_div(gt: &Tensor, pred: &Tensor) -> Result<f64> {
    const EPS: f64 = 1e-7;
    if gt.shape() != pred.shape() {
        return Err(KvqError::shape(format!("kl_div: {:?} vs {:?}", gt.shape(), pred.shape())));
    }
    if gt.data().iter().chain(pred.data()).any(|&v| v < 0.0) {
        return Err(KvqError::input("kl_div: maps must be nonnegative"));
    }
    let norm = |d: &[f64]| -> Vec<f64> {
        let total: f64 = d.iter().map(|&v| v + EPS).sum();
        d.iter().map(|&v| (v + EPS) / total).collect()
    };
    let p = norm(gt.data());
    let q = norm(pred.data());
    Ok(p.iter().zip(&q).map(|(&pi, &qi)| pi * (pi / qi).ln()).sum())
}

/// Pooled correlation over all (image, cell) pairs.
#[derive(Clone, Debug)]
pub struct InterSampleResult {
    pub srcc: f64,
    pub plcc: f64,
    pub cells: usize,
}

/// Per-image correlations averaged over images; images whose cell MOS has no
/// variance are skipped and counted.
#[derive(Clone, Debug)]
pub struct IntraSampleResult {
    pub mean_srcc: f64,
    pub mean_plcc: f64,
    pub images_used: usize,
    pub images_skipped: usize,
}

/// Cell key: (image, grid row, grid col).
pub type CellKey = (String, usize, usize);

fn cell_mos_by_image(records: &[AnnotationRecord]) -> Vec<(String, Vec<((usize, usize), f64)>)> {
    let mut per_image: HashMap<&str, HashMap<(usize, usize), (f64, usize)>> = HashMap::new();
    for r in records {
        let cell = per_image
            .entry(&r.image_id)
            .or_default()
            .entry((r.row, r.col))
            .or_insert((0.0, 0));
        cell.0 += r.score;
        cell.1 += 1;
    }
    let mut images: Vec<&str> = per_image.keys().copied().collect();
    images.sort_unstable();
    images
        .into_iter()
        .map(|img| {
            let mut cells: Vec<((usize, usize), f64)> = per_image[img]
                .iter()
                .map(|(&rc, &(sum, n))| (rc, sum / n as f64))
                .collect();
            cells.sort_unstable_by_key(|&(rc, _)| rc);
            (img.to_string(), cells)
        })
        .collect()
}

fn prediction_for(
    predictions: &HashMap<CellKey, f64>,
    image: &str,
    cell: (usize, usize),
) -> Result<f64> {
    predictions
        .get(&(image.to_string(), cell.0, cell.1))
        .copied()
        .ok_or_else(|| {
            KvqError::Coverage(format!(
                "missing prediction for image {image} cell ({}, {})",
                cell.0, cell.1
            ))
        })
}

/// Pools every annotated cell of every image into one correlation between
/// predictions and per-cell MOS.
pub fn inter_sample_eval(
    records: &[AnnotationRecord],
    predictions: &HashMap<CellKey, f64>,
) -> Result<InterSampleResult> {
    let by_image = cell_mos_by_image(records);
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (image, cells) in &by_image {
        for &(cell, mos) in cells {
            xs.push(prediction_for(predictions, image, cell)?);
            ys.push(mos);
        }
    }
    Ok(InterSampleResult { srcc: srcc(&xs, &ys)?, plcc: plcc(&xs, &ys)?, cells: xs.len() })
}

/// Correlates predictions against cell MOS separately within each image and
/// averages across images.
pub fn intra_sample_eval(
    records: &[AnnotationRecord],
    predictions: &HashMap<CellKey, f64>,
) -> Result<IntraSampleResult> {
    let by_image = cell_mos_by_image(records);
    let mut s_acc = 0.0;
    let mut p_acc = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for (image, cells) in &by_image {
        let mut xs = Vec::with_capacity(cells.len());
        let mut ys = Vec::with_capacity(cells.len());
        for &(cell, mos) in cells {
            xs.push(prediction_for(predictions, image, cell)?);
            ys.push(mos);
        }
        let mean = ys.iter().sum::<f64>() / ys.len() as f64;
        let var: f64 = ys.iter().map(|v| (v - mean) * (v - mean)).sum();
        if var == 0.0 {
            skipped += 1;
            continue;
        }
        s_acc += srcc(&xs, &ys)?;
        p_acc += plcc(&xs, &ys)?;
        used += 1;
    }
    if used == 0 {
        return Err(KvqError::UndefinedMetric(
            "intra-sample evaluation skipped every image".to_string(),
        ));
    }
    Ok(IntraSampleResult {
        mean_srcc: s_acc / used as f64,
        mean_plcc: p_acc / used as f64,
        images_used: used,
        images_skipped: skipped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn srcc_monotone_and_reversed() {
        let x = [1.0, 2.5, 3.0, 10.0];
        let y = [0.1, 0.2, 0.4, 0.5];
        assert!((srcc(&x, &y).unwrap() - 1.0).abs() < 1e-12);
        let rev: Vec<f64> = y.iter().rev().cloned().collect();
        assert!((srcc(&x, &rev).unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn srcc_matches_rank_difference_formula() {
        // no ties: rho = 1 - 6*sum(d^2)/(n(n^2-1))
        let x = [1.0, 2.0, 3.0, 4.0];
        let y = [1.0, 3.0, 2.0, 4.0];
        let rx = average_ranks(&x);
        let ry = average_ranks(&y);
        let d2: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - b) * (a - b)).sum();
        let n = 4.0;
        let oracle = 1.0 - 6.0 * d2 / (n * (n * n - 1.0));
        assert!((oracle - 0.8).abs() < 1e-12);
        assert!((srcc(&x, &y).unwrap() - 0.8).abs() < 1e-12);
    }

    #[test]
    fn tied_values_average_their_ranks() {
        let ranks = average_ranks(&[2.0, 1.0, 2.0, 5.0]);
        assert_eq!(ranks, vec![2.5, 1.0, 2.5, 4.0]);
    }

    #[test]
    fn srcc_invariant_under_monotone_transform() {
        let x = [0.3, -1.0, 2.0, 0.7, 0.1];
        let y = [1.0, 0.5, 4.0, 2.0, 1.5];
        let base = srcc(&x, &y).unwrap();
        let tx: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let ty: Vec<f64> = y.iter().map(|v| v * 3.0 + 1.0).collect();
        assert!((srcc(&tx, &ty).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_is_undefined() {
        assert!(matches!(
            plcc(&[1.0, 1.0], &[1.0, 2.0]),
            Err(KvqError::UndefinedMetric(_))
        ));
        assert!(matches!(
            srcc(&[1.0, 2.0], &[3.0, 3.0]),
            Err(KvqError::UndefinedMetric(_))
        ));
    }

    #[test]
    fn fixations_single_peak_and_constant_map() {
        let peak = Tensor::from_fn(&[2, 2], |i| if i == 2 { 1.0 } else { 0.1 });
        assert_eq!(fixation_points(&peak).unwrap(), vec![2]);
        // constant positive map: every cell reaches 0.9*max under >=
        let flat = Tensor::full(&[3, 3], 0.4);
        assert_eq!(fixation_points(&flat).unwrap().len(), 9);
        assert!(fixation_points(&Tensor::zeros(&[2, 2])).is_err());
    }

    #[test]
    fn fixations_match_threshold_scan_oracle() {
        let map = Tensor::from_fn(&[4, 4], |i| ((i * 37) % 11) as f64 / 10.0);
        let got = fixation_points(&map).unwrap();
        let max = map.data().iter().cloned().fold(0.0f64, f64::max);
        let expect: Vec<usize> = (0..16).filter(|&i| map.data()[i] >= 0.9 * max).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn nss_closed_form_for_indicator_prediction() {
        // n of N cells are one; NSS at those cells is sqrt((N-n)/n).
        let n_total = 20;
        let n_fix = 4;
        let pred = Tensor::from_fn(&[n_total], |i| if i < n_fix { 1.0 } else { 0.0 });
        let fixations: Vec<usize> = (0..n_fix).collect();
        let got = nss(&pred, &fixations).unwrap();
        let expect = ((n_total - n_fix) as f64 / n_fix as f64).sqrt();
        assert!((got - expect).abs() < 1e-12);
        assert!(got > 0.0);
    }

    #[test]
    fn nss_constant_prediction_is_undefined() {
        let pred = Tensor::full(&[8], 0.3);
        assert!(matches!(nss(&pred, &[0]), Err(KvqError::UndefinedMetric(_))));
    }

    #[test]
    fn sauc_perfect_separation_and_all_ties() {
        let pred = Tensor::new(vec![4], vec![0.9, 0.8, 0.1, 0.2]).unwrap();
        assert_eq!(sauc(&pred, &[0, 1], &[2, 3]).unwrap(), 1.0);
        let flat = Tensor::full(&[4], 0.5);
        assert_eq!(sauc(&flat, &[0, 1], &[2, 3]).unwrap(), 0.5);
        assert!(sauc(&pred, &[], &[2]).is_err());
        assert!(sauc(&pred, &[1], &[1, 2]).is_err());
    }

    #[test]
    fn sauc_matches_pair_count_oracle() {
        let pred = Tensor::new(vec![6], vec![0.9, 0.4, 0.4, 0.2, 0.7, 0.1]).unwrap();
        let pos = [0, 1];
        let neg = [2, 3, 5];
        let got = sauc(&pred, &pos, &neg).unwrap();
        // pairs: (0.9 vs 0.4, 0.2, 0.1) = 3 wins; (0.4 vs 0.4)=0.5, vs 0.2=1, vs 0.1=1
        let expect = (3.0 + 0.5 + 1.0 + 1.0) / 6.0;
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn kl_identical_is_zero_and_closed_form_case() {
        let p = Tensor::new(vec![2], vec![0.75, 0.25]).unwrap();
        assert!(kl_div(&p, &p).unwrap().abs() < 1e-9);
        let q = Tensor::new(vec![2], vec![0.5, 0.5]).unwrap();
        let got = kl_div(&p, &q).unwrap();
        let expect = 0.75 * (1.5f64).ln() + 0.25 * (0.5f64).ln();
        assert!((got - expect).abs() < 1e-5, "{got} vs {expect}");
        assert!(got >= 0.0);
    }

    fn toy_records() -> Vec<AnnotationRecord> {
        // two images, 2x1 grids, two annotators
        let mut recs = Vec::new();
        for (img, scores) in [("a", [(1.0, 2.0), (3.0, 3.0)]), ("b", [(4.0, 5.0), (2.0, 1.0)])] {
            for (cell, (s1, s2)) in scores.iter().enumerate() {
                recs.push(AnnotationRecord {
                    image_id: img.to_string(),
                    row: 0,
                    col: cell,
                    annotator_id: "u1".to_string(),
                    score: *s1,
                });
                recs.push(AnnotationRecord {
                    image_id: img.to_string(),
                    row: 0,
                    col: cell,
                    annotator_id: "u2".to_string(),
                    score: *s2,
                });
            }
        }
        recs
    }

    #[test]
    fn perfect_predictions_score_one_on_both_protocols() {
        let recs = toy_records();
        let mut preds = HashMap::new();
        // MOS: a -> [1.5, 3.0]; b -> [4.5, 1.5]
        preds.insert(("a".to_string(), 0, 0), 1.5);
        preds.insert(("a".to_string(), 0, 1), 3.0);
        preds.insert(("b".to_string(), 0, 0), 4.5);
        preds.insert(("b".to_string(), 0, 1), 1.5);
        let inter = inter_sample_eval(&recs, &preds).unwrap();
        assert!((inter.srcc - 1.0).abs() < 1e-12);
        assert!((inter.plcc - 1.0).abs() < 1e-12);
        assert_eq!(inter.cells, 4);
        let intra = intra_sample_eval(&recs, &preds).unwrap();
        assert!((intra.mean_srcc - 1.0).abs() < 1e-12);
        assert_eq!(intra.images_used, 2);
        assert_eq!(intra.images_skipped, 0);
    }

    #[test]
    fn missing_prediction_is_a_coverage_error() {
        let recs = toy_records();
        let mut preds = HashMap::new();
        preds.insert(("a".to_string(), 0, 0), 1.0);
        assert!(matches!(
            inter_sample_eval(&recs, &preds),
            Err(KvqError::Coverage(_))
        ));
    }

    #[test]
    fn two_image_intra_matches_per_image_oracle() {
        let recs = toy_records();
        let mut preds = HashMap::new();
        // image a predictions co-ordered with MOS [1.5, 3.0] -> srcc 1
        preds.insert(("a".to_string(), 0, 0), 0.2);
        preds.insert(("a".to_string(), 0, 1), 0.9);
        // image b predictions anti-ordered with MOS [4.5, 1.5] -> srcc -1
        preds.insert(("b".to_string(), 0, 0), 0.1);
        preds.insert(("b".to_string(), 0, 1), 0.8);
        let intra = intra_sample_eval(&recs, &preds).unwrap();
        assert!((intra.mean_srcc - 0.0).abs() < 1e-12);
    }
}
