use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::io::{CeTexts, Factor, GroundTruth};
use super::{Domain, Example};
use crate::error::{Error, Result};
use crate::model::{Element, NUM_ELEMENTS};

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

/// Parameters of the two-style synthetic corpus.
///
/// Every class owns, per element type, a pool of `phrases_per_element`
/// content phrases; the last phrase of each pool is the colloquial variant.
/// Both domains draw from the same pools but with different preferences for
/// the colloquial phrase, and interleave phrases with markers from their own
/// style lexicon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub num_classes: usize,
    pub phrases_per_element: usize,
    pub phrase_len: usize,
    pub generic_tokens_per_element: usize,
    pub source_markers: Vec<String>,
    pub target_markers: Vec<String>,
    /// Inclusive range of markers placed in each gap of a source document.
    pub source_gap: [usize; 2],
    pub target_gap: [usize; 2],
    pub ce_gap: [usize; 2],
    pub source_colloquial_prob: f64,
    pub target_colloquial_prob: f64,
    pub source_per_class: usize,
    /// Class `k` receives `source_per_class * imbalance_decay^k` source
    /// documents (at least one). `1.0` is balanced.
    pub imbalance_decay: f64,
    pub target_shots: usize,
    pub target_valid_per_class: usize,
    pub target_test_per_class: usize,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            num_classes: 10,
            phrases_per_element: 3,
            phrase_len: 2,
            generic_tokens_per_element: 6,
            source_markers: words(&[
                "whereas",
                "aforesaid",
                "hereinafter",
                "pursuant",
                "thereof",
                "herein",
                "notwithstanding",
                "heretofore",
                "forthwith",
                "therein",
                "wherein",
                "hereby",
            ]),
            target_markers: words(&[
                "like",
                "basically",
                "honestly",
                "so",
                "yeah",
                "kinda",
                "literally",
                "anyway",
                "um",
                "totally",
                "actually",
                "well",
            ]),
            source_gap: [0, 1],
            target_gap: [1, 3],
            ce_gap: [0, 1],
            source_colloquial_prob: 0.0,
            target_colloquial_prob: 0.7,
            source_per_class: 200,
            imbalance_decay: 1.0,
            target_shots: 5,
            target_valid_per_class: 5,
            target_test_per_class: 30,
            seed: 2024,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_classes", self.num_classes >= 2),
            ("phrases_per_element", self.phrases_per_element >= 1),
            ("phrase_len", self.phrase_len >= 1),
            ("generic_tokens_per_element", self.generic_tokens_per_element >= 1 || self.phrase_len == 1),
            ("source_markers", !self.source_markers.is_empty()),
            ("target_markers", !self.target_markers.is_empty()),
            ("source_per_class", self.source_per_class >= 1),
            ("target_shots", self.target_shots >= 1),
            ("target_test_per_class", self.target_test_per_class >= 1),
        ];
        for (field, ok) in positive {
            if !ok {
                return Err(Error::config(field, "value too small"));
            }
        }
        for (field, r) in [("source_gap", self.source_gap), ("target_gap", self.target_gap), ("ce_gap", self.ce_gap)] {
            if r[0] > r[1] {
                return Err(Error::config(field, "range start exceeds its end"));
            }
        }
        for (field, p) in [
            ("source_colloquial_prob", self.source_colloquial_prob),
            ("target_colloquial_prob", self.target_colloquial_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "probability outside [0, 1]"));
            }
        }
        if !(self.imbalance_decay > 0.0 && self.imbalance_decay <= 1.0) {
            return Err(Error::config("imbalance_decay", "must lie in (0, 1]"));
        }
        for (field, lex) in [("source_markers", &self.source_markers), ("target_markers", &self.target_markers)] {
            let set: BTreeSet<&String> = lex.iter().collect();
            if set.len() != lex.len() {
                return Err(Error::config(field, "duplicate marker"));
            }
            if let Some(bad) = lex.iter().find(|m| m.is_empty() || m.contains(char::is_whitespace) || m.contains('.')) {
                return Err(Error::config(field, format!("invalid marker `{bad}`")));
            }
        }
        let source: BTreeSet<&String> = self.source_markers.iter().collect();
        if let Some(shared) = self.target_markers.iter().find(|m| source.contains(m)) {
            return Err(Error::config(
                "target_markers",
                format!("`{shared}` also appears in source_markers; style lexicons must be disjoint"),
            ));
        }
        Ok(())
    }

    /// Source documents generated for class `k`.
    pub fn source_count(&self, class: usize) -> usize {
        let n = self.source_per_class as f64 * self.imbalance_decay.powi(class as i32);
        (n.round() as usize).max(1)
    }

    pub fn target_per_class(&self) -> usize {
        self.target_shots + self.target_valid_per_class + self.target_test_per_class
    }
}

/// Generated corpus plus its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub source: Vec<Example>,
    pub target: Vec<Example>,
    pub ce: Vec<CeTexts>,
    pub factors: GroundTruth,
    /// `phrases[class][element][phrase]` as token lists.
    pub phrases: Vec<Vec<Vec<Vec<String>>>>,
}

struct Generator<'a> {
    spec: &'a CorpusSpec,
    rng: ChaCha8Rng,
    phrases: Vec<Vec<Vec<Vec<String>>>>,
}

impl Generator<'_> {
    fn markers(&mut self, lexicon: &[String], gap: [usize; 2], out: &mut Vec<String>) {
        let n = self.rng.gen_range(gap[0]..=gap[1]);
        for _ in 0..n {
            out.push(lexicon.choose(&mut self.rng).expect("non-empty").clone());
        }
    }

    fn document(&mut self, class: usize, domain: Domain) -> String {
        let spec = self.spec;
        let (lexicon, gap, colloquial) = match domain {
            Domain::Source => (&spec.source_markers, spec.source_gap, spec.source_colloquial_prob),
            Domain::Target => (&spec.target_markers, spec.target_gap, spec.target_colloquial_prob),
        };
        let p = spec.phrases_per_element;
        let mut toks = Vec::new();
        self.markers(lexicon, gap, &mut toks);
        for m in 0..NUM_ELEMENTS {
            let pick = if p == 1 {
                0
            } else if self.rng.gen_bool(colloquial) {
                p - 1
            } else {
                self.rng.gen_range(0..p - 1)
            };
            toks.extend(self.phrases[class][m][pick].iter().cloned());
            self.markers(lexicon, gap, &mut toks);
        }
        toks.join(" ")
    }

    fn ce_text(&mut self, class: usize, m: usize) -> String {
        let spec = self.spec;
        let mut toks = Vec::new();
        for pick in 0..spec.phrases_per_element {
            self.markers(&spec.source_markers, spec.ce_gap, &mut toks);
            toks.extend(self.phrases[class][m][pick].iter().cloned());
        }
        toks.join(" ")
    }
}

/// Builds source, target and CE texts with their ground-truth factors.
/// Output is a pure function of `spec` (including its seed).
pub fn generate_synthetic_corpus(spec: &CorpusSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut factors: BTreeMap<String, Factor> = BTreeMap::new();

    // Content pools: one class-specific token per phrase followed by
    // generic element-level tokens shared between classes.
    let mut phrases = vec![vec![Vec::new(); NUM_ELEMENTS]; spec.num_classes];
    for (m, element) in Element::ORDER.iter().enumerate() {
        let generic: Vec<String> = (0..spec.generic_tokens_per_element)
            .map(|g| format!("{element}.g{g}"))
            .collect();
        for (k, class_phrases) in phrases.iter_mut().enumerate() {
            for p in 0..spec.phrases_per_element {
                let head = format!("{element}.c{k}.p{p}");
                let mut phrase = vec![head.clone()];
                factors.insert(head, Factor::Content([k].into()));
                for _ in 1..spec.phrase_len {
                    let g = generic.choose(&mut rng).expect("non-empty").clone();
                    match factors.entry(g.clone()).or_insert_with(|| Factor::Content(BTreeSet::new())) {
                        Factor::Content(set) => {
                            set.insert(k);
                        }
                        Factor::Style(_) => unreachable!("generic tokens are not markers"),
                    }
                    phrase.push(g);
                }
                class_phrases[m].push(phrase);
            }
        }
    }
    for m in &spec.source_markers {
        factors.insert(m.clone(), Factor::Style(Domain::Source));
    }
    for m in &spec.target_markers {
        factors.insert(m.clone(), Factor::Style(Domain::Target));
    }

    let mut gen = Generator { spec, rng, phrases };
    let mut source = Vec::new();
    for k in 0..spec.num_classes {
        for _ in 0..spec.source_count(k) {
            source.push(Example {
                text: gen.document(k, Domain::Source),
                label: k,
                domain: Domain::Source,
            });
        }
    }
    let mut target = Vec::new();
    for k in 0..spec.num_classes {
        for _ in 0..spec.target_per_class() {
            target.push(Example {
                text: gen.document(k, Domain::Target),
                label: k,
                domain: Domain::Target,
            });
        }
    }
    let ce = (0..spec.num_classes)
        .map(|k| {
            let [object, objective, subject, subjective] = [0, 1, 2, 3].map(|m| gen.ce_text(k, m));
            CeTexts {
                label: k,
                object,
                objective,
                subject,
                subjective,
            }
        })
        .collect();

    Ok(SyntheticCorpus {
        source,
        target,
        ce,
        factors: GroundTruth { factors },
        phrases: gen.phrases,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{class_counts, few_shot_split};

    fn small() -> CorpusSpec {
        CorpusSpec {
            num_classes: 3,
            source_per_class: 20,
            target_shots: 1,
            target_valid_per_class: 2,
            target_test_per_class: 5,
            ..CorpusSpec::default()
        }
    }

    /// Bag-of-words classifier over class-specific content tokens.
    fn oracle(truth: &GroundTruth, text: &str, k: usize) -> usize {
        let mut votes = vec![0usize; k];
        for tok in text.split_whitespace().filter(|t| !truth.is_style(t)) {
            if let Some(c) = truth.class_of(tok) {
                votes[c] += 1;
            }
        }
        crate::model::argmax(&votes.iter().map(|&v| v as f64).collect::<Vec<_>>())
    }

    #[test]
    fn counts_and_split_sizes() {
        let spec = small();
        let c = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(c.source.len(), 60);
        assert_eq!(class_counts(&c.target, 3), vec![8, 8, 8]);
        assert_eq!(c.ce.len(), 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let split = few_shot_split(&c.target, 3, 1, 5, &mut rng).unwrap();
        assert_eq!(split.train.len(), 3);
        assert_eq!(split.test.len(), 15);
    }

    #[test]
    fn style_lexicons_stay_in_their_domain() {
        let spec = CorpusSpec::default();
        let c = generate_synthetic_corpus(&spec).unwrap();
        let target: BTreeSet<&str> = spec.target_markers.iter().map(String::as_str).collect();
        let source: BTreeSet<&str> = spec.source_markers.iter().map(String::as_str).collect();
        for e in &c.source {
            assert!(e.text.split_whitespace().all(|t| !target.contains(t)));
        }
        for e in &c.target {
            assert!(e.text.split_whitespace().all(|t| !source.contains(t)));
        }
        for ce in &c.ce {
            for t in ce.texts() {
                assert!(t.split_whitespace().all(|t| !target.contains(t)));
            }
        }
    }

    #[test]
    fn content_oracle_is_perfect_on_both_domains() {
        let spec = CorpusSpec::default();
        let c = generate_synthetic_corpus(&spec).unwrap();
        for e in c.source.iter().chain(&c.target) {
            assert_eq!(oracle(&c.factors, &e.text, spec.num_classes), e.label, "{}", e.text);
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let a = generate_synthetic_corpus(&small()).unwrap();
        let b = generate_synthetic_corpus(&small()).unwrap();
        assert_eq!(a, b);
        let other = generate_synthetic_corpus(&CorpusSpec { seed: 99, ..small() }).unwrap();
        assert_ne!(a.source, other.source);
    }

    #[test]
    fn overlapping_lexicons_rejected() {
        let mut spec = small();
        spec.target_markers.push("whereas".into());
        let err = generate_synthetic_corpus(&spec).unwrap_err();
        assert!(matches!(err, Error::Config { ref field, .. } if field == "target_markers"), "{err}");
    }

    #[test]
    fn imbalance_decays_geometrically() {
        let spec = CorpusSpec {
            imbalance_decay: 0.5,
            ..small()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        assert_eq!(class_counts(&c.source, 3), vec![20, 10, 5]);
    }
}
