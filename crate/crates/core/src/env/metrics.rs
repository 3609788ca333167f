use std::collections::HashMap;
use std::hash::Hash;

/// Bag-of-tokens F1 between a prediction and a reference.
///
/// Both empty scores 1; exactly one empty scores 0.
pub fn token_f1<X: Eq + Hash>(pred: &[X], gold: &[X]) -> f64 {
    match (pred.is_empty(), gold.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&X, usize> = HashMap::new();
    for g in gold {
        *counts.entry(g).or_default() += 1;
    }
    let mut overlap = 0usize;
    for p in pred {
        if let Some(c) = counts.get_mut(p) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pred.len() as f64;
    let recall = overlap as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

pub fn exact_match<X: PartialEq>(pred: &[X], gold: &[X]) -> bool {
    pred == gold
}
