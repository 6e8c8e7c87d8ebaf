//! Classification metrics.

#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Index of the largest value; ties go to the smallest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

impl Metrics {
    pub fn from_predictions(pred: &[usize], labels: &[usize], classes: usize) -> Self {
        assert_eq!(pred.len(), labels.len());
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&p, &y) in pred.iter().zip(labels) {
            confusion[y][p] += 1;
        }
        let total = pred.len();
        let correct: usize = (0..classes).map(|k| confusion[k][k]).sum();
        let per_class_f1: Vec<f64> = (0..classes)
            .map(|k| {
                let tp = confusion[k][k] as f64;
                let fp = (0..classes).filter(|&j| j != k).map(|j| confusion[j][k]).sum::<usize>() as f64;
                let fn_ = (0..classes).filter(|&j| j != k).map(|j| confusion[k][j]).sum::<usize>() as f64;
                let den = 2.0 * tp + fp + fn_;
                if den == 0.0 {
                    0.0
                } else {
                    2.0 * tp / den
                }
            })
            .collect();
        Self {
            accuracy: if total == 0 { 0.0 } else { correct as f64 / total as f64 },
            macro_f1: per_class_f1.iter().sum::<f64>() / classes.max(1) as f64,
            per_class_f1,
            confusion,
        }
    }

    pub fn from_logits(logits: &[f64], classes: usize, labels: &[usize]) -> Self {
        let pred: Vec<usize> = logits.chunks(classes).map(argmax).collect();
        Self::from_predictions(&pred, labels, classes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect() {
        let y = [0, 1, 2, 1];
        let m = Metrics::from_predictions(&y, &y, 3);
        assert_eq!(m.accuracy, 1.0);
        assert_eq!(m.macro_f1, 1.0);
    }

    #[test]
    fn binary_half_f1() {
        // positive class 1: TP=1, FP=1, FN=1, TN=1
        let y = [1, 0, 1, 0];
        let p = [1, 1, 0, 0];
        let m = Metrics::from_predictions(&p, &y, 2);
        assert_eq!(m.per_class_f1[1], 0.5);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn ties_pick_smallest_index() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn absent_class_scores_zero() {
        let m = Metrics::from_predictions(&[0, 0], &[0, 0], 3);
        assert_eq!(m.per_class_f1, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn random_case_matches_precision_recall_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let y: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
        let p: Vec<usize> = (0..20).map(|_| rng.random_range(0..3)).collect();
        let m = Metrics::from_predictions(&p, &y, 3);
        let mut f1s = Vec::new();
        for k in 0..3 {
            let mut tp = 0.0;
            let mut pp = 0.0;
            let mut ap = 0.0;
            for i in 0..20 {
                if p[i] == k {
                    pp += 1.0;
                }
                if y[i] == k {
                    ap += 1.0;
                }
                if p[i] == k && y[i] == k {
                    tp += 1.0;
                }
            }
            let prec: f64 = if pp > 0.0 { tp / pp } else { 0.0 };
            let rec: f64 = if ap > 0.0 { tp / ap } else { 0.0 };
            f1s.push(if prec + rec > 0.0 { 2.0 * prec * rec / (prec + rec) } else { 0.0 });
        }
        for k in 0..3 {
            assert!((m.per_class_f1[k] - f1s[k]).abs() < 1e-12);
        }
        let acc = (0..20).filter(|&i| p[i] == y[i]).count() as f64 / 20.0;
        assert_eq!(m.accuracy, acc);
    }

    proptest! {
        #[test]
        fn macro_f1_invariant_to_relabeling(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..60),
            perm in Just(vec![0usize, 1, 2, 3]).prop_shuffle(),
        ) {
            let (p, y): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let a = Metrics::from_predictions(&p, &y, 4);
            let pp: Vec<usize> = p.iter().map(|&v| perm[v]).collect();
            let yy: Vec<usize> = y.iter().map(|&v| perm[v]).collect();
            let b = Metrics::from_predictions(&pp, &yy, 4);
            prop_assert!((a.macro_f1 - b.macro_f1).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&a.macro_f1));
            let trace: usize = (0..4).map(|k| a.confusion[k][k]).sum();
            prop_assert_eq!(a.accuracy, trace as f64 / p.len() as f64);
        }
    }
}
