/// Numerically stable softmax of one logit row.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn log_softmax_at(z: &[f64], k: usize) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z[k] - lse
}

/// Mean negative log-probability of the true class (labels 0-based).
pub fn cross_entropy(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    if logits.is_empty() {
        return 0.0;
    }
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| -log_softmax_at(z, y))
        .sum();
    (total / logits.len() as f64).max(0.0)
}

/// Cross-entropy together with its gradient with respect to the logits.
pub fn cross_entropy_grad(logits: &[Vec<f64>], labels: &[usize]) -> (f64, Vec<Vec<f64>>) {
    let n = logits.len().max(1) as f64;
    let grads = logits
        .iter()
        .zip(labels)
        .map(|(z, &y)| {
            let mut p = softmax(z);
            p[y] -= 1.0;
            p.iter_mut().for_each(|v| *v /= n);
            p
        })
        .collect();
    (cross_entropy(logits, labels), grads)
}

pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}
