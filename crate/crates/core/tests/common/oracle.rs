//! Independent reference computations, written from the definitions and
//! sharing no code with the library.

/// `Σ αᵢ Hᵢ` by explicit loops.
pub fn weighted_sum(layers: &[Vec<f64>], alpha: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; layers[0].len()];
    for (i, layer) in layers.iter().enumerate() {
        for (j, v) in layer.iter().enumerate() {
            out[j] += alpha[i] * v;
        }
    }
    out
}

pub struct Weighted {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub accuracy: f64,
}

/// Support-weighted precision, recall and F1 over four classes; a class
/// with nothing predicted (or no support) scores 0.
pub fn weighted_metrics(pred: &[usize], truth: &[usize]) -> Weighted {
    let n = truth.len() as f64;
    let mut w = Weighted {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
        accuracy: pred.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / n,
    };
    for c in 0..4 {
        let tp = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count() as f64;
        let predicted = pred.iter().filter(|&&p| p == c).count() as f64;
        let support = truth.iter().filter(|&&t| t == c).count() as f64;
        let p = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let r = if support > 0.0 { tp / support } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        w.precision += support / n * p;
        w.recall += support / n * r;
        w.f1 += support / n * f;
    }
    w
}
