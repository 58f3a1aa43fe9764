use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};

/// Indices of one training triple: a source example, a same-class target
/// example and the charge label whose CE bundle completes it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TripleRef {
    pub label: usize,
    pub source: usize,
    pub target: usize,
}

/// Two triples of different charges.
pub type PairedTriple = [TripleRef; 2];

fn majority(counts: &[usize]) -> (usize, usize) {
    let mut best = (0, 0);
    for (k, &c) in counts.iter().enumerate() {
        if c > best.1 {
            best = (k, c);
        }
    }
    best
}

/// Builds one epoch of batches. Every source example is used exactly once
/// when the class distribution allows it; when only one class is left, its
/// remaining examples are paired with source examples of other classes drawn
/// again. Target examples are drawn with replacement from the same class.
pub fn sample_epoch<R: Rng>(
    source_labels: &[usize],
    target_by_class: &[Vec<usize>],
    ce_labels: &BTreeSet<usize>,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<Vec<PairedTriple>>> {
    if batch_size < 2 || !batch_size.is_multiple_of(2) {
        return Err(Error::Contract(format!("batch size must be even and at least 2, got {batch_size}")));
    }
    let k = target_by_class.len();
    if k < 2 {
        return Err(Error::Contract("paired sampling needs at least two classes".into()));
    }
    let mut counts = vec![0usize; k];
    for &l in source_labels {
        if l >= k {
            return Err(Error::Data(format!("source label {l} is not below {k}")));
        }
        counts[l] += 1;
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && target_by_class[c].is_empty() {
            return Err(Error::Data(format!("class {c} has no target training example")));
        }
        if n > 0 && !ce_labels.contains(&c) {
            return Err(Error::Data(format!("class {c} has no CE bundle")));
        }
    }
    if counts.iter().filter(|&&n| n > 0).count() < 2 {
        return Err(Error::Data("source data covers fewer than two classes".into()));
    }

    let mut remaining: Vec<usize> = (0..source_labels.len()).collect();
    remaining.shuffle(rng);

    let refill = |rng: &mut R, avoid: usize| -> usize {
        loop {
            let i = rng.gen_range(0..source_labels.len());
            if source_labels[i] != avoid {
                return i;
            }
        }
    };
    let mut pairs: Vec<(usize, usize)> = Vec::with_capacity(source_labels.len() / 2 + 1);
    while remaining.len() >= 2 {
        let (big, big_count) = majority(&counts);
        let first = if 2 * big_count >= remaining.len() {
            remaining.iter().position(|&i| source_labels[i] == big).expect("counted")
        } else {
            0
        };
        let a = remaining.remove(first);
        counts[source_labels[a]] -= 1;
        let b = match remaining.iter().position(|&i| source_labels[i] != source_labels[a]) {
            Some(p) => {
                let b = remaining.remove(p);
                counts[source_labels[b]] -= 1;
                b
            }
            None => refill(rng, source_labels[a]),
        };
        pairs.push((a, b));
    }
    if let Some(&a) = remaining.first() {
        pairs.push((a, refill(rng, source_labels[a])));
    }

    let triple = |rng: &mut R, s: usize| {
        let label = source_labels[s];
        TripleRef {
            label,
            source: s,
            target: *target_by_class[label].choose(rng).expect("checked non-empty"),
        }
    };
    let paired: Vec<PairedTriple> = pairs
        .into_iter()
        .map(|(a, b)| [triple(rng, a), triple(rng, b)])
        .collect();
    Ok(paired.chunks(batch_size / 2).map(<[_]>::to_vec).collect())
}
