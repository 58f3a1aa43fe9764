use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Domain, Example};
use crate::error::{read_to_string, write_file, Error, Result};
use crate::model::Element;

/// Reads a dataset: one JSON object per line with `text`, `label` and
/// `domain`. Labels must be below `num_classes` when given.
pub fn load_dataset(path: &Path, num_classes: Option<usize>) -> Result<Vec<Example>> {
    let text = read_to_string(path)?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let ex: Example = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        if ex.text.split_whitespace().next().is_none() {
            return Err(parse("empty text".into()));
        }
        if let Some(k) = num_classes {
            if ex.label >= k {
                return Err(parse(format!("label {} is not below {k}", ex.label)));
            }
        }
        out.push(ex);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: dataset is empty", path.display())));
    }
    Ok(out)
}

pub fn write_dataset(path: &Path, examples: &[Example]) -> Result<()> {
    let mut buf = String::new();
    for e in examples {
        buf.push_str(&serde_json::to_string(e).expect("serializable"));
        buf.push('\n');
    }
    write_file(path, buf)
}

/// The four element texts of one charge.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CeTexts {
    pub label: usize,
    pub object: String,
    pub objective: String,
    pub subject: String,
    pub subjective: String,
}

impl CeTexts {
    pub fn get(&self, element: Element) -> &str {
        match element {
            Element::Object => &self.object,
            Element::Objective => &self.objective,
            Element::Subject => &self.subject,
            Element::Subjective => &self.subjective,
        }
    }

    /// Texts in element order.
    pub fn texts(&self) -> [&str; 4] {
        Element::ORDER.map(|e| self.get(e))
    }
}

/// Reads the CE file (one JSON object per charge), keyed by label.
pub fn load_ce_file(path: &Path) -> Result<BTreeMap<usize, CeTexts>> {
    let text = read_to_string(path)?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let ce: CeTexts = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        if ce.texts().iter().any(|t| t.split_whitespace().next().is_none()) {
            return Err(parse("empty element text".into()));
        }
        if out.insert(ce.label, ce).is_some() {
            return Err(parse("duplicate charge label".into()));
        }
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: CE file is empty", path.display())));
    }
    Ok(out)
}

pub fn write_ce_file(path: &Path, ces: &[CeTexts]) -> Result<()> {
    let mut buf = String::new();
    for c in ces {
        buf.push_str(&serde_json::to_string(c).expect("serializable"));
        buf.push('\n');
    }
    write_file(path, buf)
}

/// Ground-truth role of a token in the synthetic corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Factor {
    /// Content word; the set of classes whose phrases use it.
    Content(BTreeSet<usize>),
    /// Style marker of one domain.
    Style(Domain),
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GroundTruth {
    pub factors: BTreeMap<String, Factor>,
}

impl GroundTruth {
    pub fn get(&self, token: &str) -> Option<&Factor> {
        self.factors.get(token)
    }

    /// The class a token identifies on its own, if any.
    pub fn class_of(&self, token: &str) -> Option<usize> {
        match self.factors.get(token) {
            Some(Factor::Content(classes)) if classes.len() == 1 => classes.iter().next().copied(),
            _ => None,
        }
    }

    pub fn is_style(&self, token: &str) -> bool {
        matches!(self.factors.get(token), Some(Factor::Style(_)))
    }
}

/// `token<TAB>content<TAB>c1,c2,...` or `token<TAB>style<TAB>domain`.
pub fn write_factors(path: &Path, truth: &GroundTruth) -> Result<()> {
    let mut buf = String::new();
    for (tok, f) in &truth.factors {
        match f {
            Factor::Content(classes) => {
                let list: Vec<String> = classes.iter().map(|c| c.to_string()).collect();
                buf.push_str(&format!("{tok}\tcontent\t{}\n", list.join(",")));
            }
            Factor::Style(d) => buf.push_str(&format!("{tok}\tstyle\t{d}\n")),
        }
    }
    write_file(path, buf)
}

pub fn load_factors(path: &Path) -> Result<GroundTruth> {
    let text = read_to_string(path)?;
    let mut truth = GroundTruth::default();
    for (n, line) in text.lines().enumerate() {
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let [tok, kind, value] = cols[..] else {
            return Err(parse("expected three tab-separated fields".into()));
        };
        let factor = match kind {
            "content" => Factor::Content(
                value
                    .split(',')
                    .map(|c| c.parse::<usize>().map_err(|e| parse(format!("bad class: {e}"))))
                    .collect::<Result<_>>()?,
            ),
            "style" => Factor::Style(value.parse().map_err(|e: Error| parse(e.to_string()))?),
            other => return Err(parse(format!("unknown factor kind `{other}`"))),
        };
        truth.factors.insert(tok.to_string(), factor);
    }
    if truth.factors.is_empty() {
        return Err(Error::Data(format!("{}: factor file is empty", path.display())));
    }
    Ok(truth)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        let data = vec![
            Example {
                text: "a \"quoted\" b".into(),
                label: 2,
                domain: Domain::Target,
            },
            Example {
                text: "c".into(),
                label: 0,
                domain: Domain::Source,
            },
        ];
        write_dataset(&p, &data).unwrap();
        assert_eq!(load_dataset(&p, Some(3)).unwrap(), data);
        let err = load_dataset(&p, Some(2)).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.jsonl");
        std::fs::write(&p, "").unwrap();
        assert!(matches!(load_dataset(&p, None), Err(Error::Data(_))));

        std::fs::write(
            &p,
            "{\"text\":\"x\",\"label\":0,\"domain\":\"source\"}\n{\"text\":\"y\",\"label\":1,\"domain\":\"tgt\"}\n",
        )
        .unwrap();
        assert!(matches!(load_dataset(&p, None), Err(Error::Parse { line: 2, .. })));

        std::fs::write(&p, "not json\n").unwrap();
        assert!(matches!(load_dataset(&p, None), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(load_dataset(&dir.path().join("missing"), None), Err(Error::Io { .. })));
    }

    #[test]
    fn ce_and_factor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ces = vec![CeTexts {
            label: 1,
            object: "o".into(),
            objective: "ov w".into(),
            subject: "s".into(),
            subjective: "sv".into(),
        }];
        let p = dir.path().join("ce.jsonl");
        write_ce_file(&p, &ces).unwrap();
        let back = load_ce_file(&p).unwrap();
        assert_eq!(back[&1], ces[0]);
        assert_eq!(back[&1].texts(), ["o", "ov w", "s", "sv"]);

        let mut truth = GroundTruth::default();
        truth.factors.insert("w".into(), Factor::Content([0, 3].into()));
        truth.factors.insert("x".into(), Factor::Content([2].into()));
        truth.factors.insert("um".into(), Factor::Style(Domain::Target));
        let p = dir.path().join("f.tsv");
        write_factors(&p, &truth).unwrap();
        let back = load_factors(&p).unwrap();
        assert_eq!(back, truth);
        assert_eq!(back.class_of("x"), Some(2));
        assert_eq!(back.class_of("w"), None);
        assert!(back.is_style("um"));
    }
}
