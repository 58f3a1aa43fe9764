//! Datasets, constitutive-element knowledge, the synthetic corpus and
//! batch construction.

mod corpus;
mod io;
mod sampler;
mod split;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CeBundle;
use crate::text::{TokenSeq, Vocab};

pub use corpus::{generate_synthetic_corpus, CorpusSpec, SyntheticCorpus};
pub use io::{
    load_ce_file, load_dataset, load_factors, write_ce_file, write_dataset, write_factors, CeTexts, Factor,
    GroundTruth,
};
pub use sampler::{sample_epoch, PairedTriple, TripleRef};
pub use split::{few_shot_split, FewShotSplit};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn name(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::Data(format!("unknown domain `{other}`"))),
        }
    }
}

/// One labeled fact description.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub text: String,
    pub label: usize,
    pub domain: Domain,
}

/// Number of examples per class, over `num_classes` classes.
pub fn class_counts(examples: &[Example], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for e in examples {
        if e.label < num_classes {
            counts[e.label] += 1;
        }
    }
    counts
}

/// A tokenized example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub seq: TokenSeq,
    pub label: usize,
    pub domain: Domain,
}

pub fn encode_examples(examples: &[Example], vocab: &Vocab, max_len: usize) -> Result<Vec<Sample>> {
    examples
        .iter()
        .map(|e| {
            Ok(Sample {
                seq: TokenSeq::encode(&e.text, vocab, max_len)?,
                label: e.label,
                domain: e.domain,
            })
        })
        .collect()
}

/// Tokenizes every CE entry into a bundle in element order.
pub fn encode_ce(ce: &BTreeMap<usize, CeTexts>, vocab: &Vocab, max_len: usize) -> Result<BTreeMap<usize, CeBundle>> {
    ce.iter()
        .map(|(&k, texts)| {
            let seqs = texts
                .texts()
                .iter()
                .map(|t| TokenSeq::encode(t, vocab, max_len))
                .collect::<Result<Vec<_>>>()?;
            Ok((k, CeBundle::new(k, seqs)?))
        })
        .collect()
}
