use alloc::collections::BTreeMap;
use alloc::vec::Vec;

fn ngram_counts<T: Ord>(seq: &[T], n: usize) -> BTreeMap<&[T], usize> {
    let mut m = BTreeMap::new();
    if seq.len() >= n {
        for w in seq.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped matches and candidate n-gram total for order `n`.
pub fn modified_precision<T: Ord>(candidate: &[T], reference: &[T], n: usize) -> (usize, usize) {
    let cand = ngram_counts(candidate, n);
    let refs = ngram_counts(reference, n);
    let matched = cand
        .iter()
        .map(|(g, &c)| c.min(refs.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, candidate.len().saturating_sub(n - 1))
}

/// Sentence BLEU-4: geometric mean of modified 1- to 4-gram precisions times
/// the brevity penalty. Orders 2 to 4 with a zero count use add-one
/// smoothing on both numerator and denominator; no unigram match scores 0.
pub fn bleu4<T: Ord>(candidate: &[T], reference: &[T]) -> f64 {
    if candidate.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let (mut m, mut t) = modified_precision(candidate, reference, n);
        if m == 0 || t == 0 {
            if n == 1 {
                return 0.0;
            }
            m += 1;
            t += 1;
        }
        log_sum += libm_ln(m as f64 / t as f64) / 4.0;
    }
    let (c, r) = (candidate.len() as f64, reference.len() as f64);
    let bp = if c < r { libm_exp(1.0 - r / c) } else { 1.0 };
    bp * libm_exp(log_sum)
}

/// Whitespace tokens, lowercased, with surrounding punctuation removed.
pub fn normalize_words(text: &str) -> Vec<alloc::string::String> {
    text.split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token-level F1 between a prediction and a gold answer.
pub fn token_f1(prediction: &str, gold: &str) -> f64 {
    let p = normalize_words(prediction);
    let g = normalize_words(gold);
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in &g {
        *counts.entry(w).or_insert(0) += 1;
    }
    let mut common = 0;
    for w in &p {
        if let Some(c) = counts.get_mut(w.as_str()) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn libm_ln(x: f64) -> f64 {
    num_traits::Float::ln(x)
}

fn libm_exp(x: f64) -> f64 {
    num_traits::Float::exp(x)
}
