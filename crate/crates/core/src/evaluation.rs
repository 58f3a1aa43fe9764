//! Classification metrics, multi-seed aggregation, representation dumps
//! and the disentanglement probe.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Domain, Factor, GroundTruth, Sample};
use crate::error::{read_to_string, write_file, Error, Result};
use crate::model::{argmax, encode_ce_bundle, encode_fact, CeBundle, Model};

/// `K x K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn add(&mut self, truth: usize, predicted: usize) {
        self.counts[truth * self.k + predicted] += 1;
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.k + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k.max(1)).map(<[u64]>::to_vec).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub mp: f64,
    pub mr: f64,
    pub f1: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: f64, den: f64) -> f64 {
    if den == 0.0 {
        0.0
    } else {
        num / den
    }
}

/// Accuracy plus macro precision, recall and F1 over all `K` classes;
/// every 0/0 is taken as 0.
pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<Metrics> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Contract("cannot compute metrics of an empty confusion matrix".into()));
    }
    let k = cm.num_classes();
    let mut trace = 0;
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c);
        trace += tp;
        let predicted: u64 = (0..k).map(|t| cm.get(t, c)).sum();
        let support: u64 = (0..k).map(|p| cm.get(c, p)).sum();
        let precision = ratio(tp as f64, predicted as f64);
        let recall = ratio(tp as f64, support as f64);
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1: ratio(2.0 * precision * recall, precision + recall),
            support,
        });
    }
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / k as f64;
    Ok(Metrics {
        acc: trace as f64 / total as f64,
        mp: mean(|c| c.precision),
        mr: mean(|c| c.recall),
        f1: mean(|c| c.f1),
        per_class,
    })
}

/// Predicted class of every sample, in order.
pub fn predictions(model: &Model, data: &[Sample]) -> Result<Vec<usize>> {
    data.iter().map(|s| model.predict_proba(&s.seq).map(|p| argmax(&p))).collect()
}

pub fn evaluate(model: &Model, data: &[Sample]) -> Result<(ConfusionMatrix, Metrics)> {
    let k = model.dims().num_classes;
    let mut cm = ConfusionMatrix::new(k);
    for (s, p) in data.iter().zip(predictions(model, data)?) {
        if s.label >= k {
            return Err(Error::Data(format!("label {} is not below {k}", s.label)));
        }
        cm.add(s.label, p);
    }
    let metrics = compute_metrics(&cm)?;
    Ok((cm, metrics))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single value.
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        if values.is_empty() {
            return Summary { mean: 0.0, std: 0.0 };
        }
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Summary { mean, std }
    }
}

/// Metrics of several runs with their mean and standard deviation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub n_seeds: usize,
    pub acc: Summary,
    pub mp: Summary,
    pub mr: Summary,
    pub f1: Summary,
    pub runs: BTreeMap<String, Metrics>,
}

impl MultiSeedReport {
    pub fn new(runs: BTreeMap<String, Metrics>) -> Self {
        let col = |f: fn(&Metrics) -> f64| Summary::of(&runs.values().map(f).collect::<Vec<_>>());
        MultiSeedReport {
            n_seeds: runs.len(),
            acc: col(|m| m.acc),
            mp: col(|m| m.mp),
            mr: col(|m| m.mr),
            f1: col(|m| m.f1),
            runs,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum RepKind {
    FactCr,
    FactSr,
    CeCr,
    CeSr,
}

impl RepKind {
    pub fn name(self) -> &'static str {
        match self {
            RepKind::FactCr => "fact-CR",
            RepKind::FactSr => "fact-SR",
            RepKind::CeCr => "ce-CR",
            RepKind::CeSr => "ce-SR",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        [RepKind::FactCr, RepKind::FactSr, RepKind::CeCr, RepKind::CeSr]
            .into_iter()
            .find(|k| k.name() == s)
    }
}

/// One row of a representation dump. `domain` is `None` for CE rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RepRow {
    pub kind: RepKind,
    pub domain: Option<Domain>,
    pub label: usize,
    pub values: Vec<f64>,
}

/// Instance CR and SR of every sample, then of every CE bundle.
pub fn representations(model: &Model, data: &[Sample], ce: &BTreeMap<usize, CeBundle>) -> Result<Vec<RepRow>> {
    let mut rows = Vec::with_capacity(2 * (data.len() + ce.len()));
    let mut push = |tape: &Tape, reps: &crate::model::Representations, domain, label, kinds: [RepKind; 2]| {
        for (kind, v) in kinds.into_iter().zip([reps.content, reps.style]) {
            rows.push(RepRow {
                kind,
                domain,
                label,
                values: tape.value(v).data().to_vec(),
            });
        }
    };
    for s in data {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let reps = encode_fact(&mut tape, &bound, &s.seq)?;
        push(&tape, &reps, Some(s.domain), s.label, [RepKind::FactCr, RepKind::FactSr]);
    }
    for (&k, bundle) in ce {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let reps = encode_ce_bundle(&mut tape, &bound, bundle)?;
        push(&tape, &reps, None, k, [RepKind::CeCr, RepKind::CeSr]);
    }
    Ok(rows)
}

/// `kind<TAB>domain<TAB>label<TAB>v1<TAB>v2...`; CE rows use domain `ce`.
pub fn write_dump(path: &Path, rows: &[RepRow]) -> Result<()> {
    let mut buf = String::new();
    for r in rows {
        let domain = r.domain.map_or("ce", Domain::name);
        write!(buf, "{}\t{domain}\t{}", r.kind.name(), r.label).expect("string write");
        for v in &r.values {
            write!(buf, "\t{v}").expect("string write");
        }
        buf.push('\n');
    }
    write_file(path, buf)
}

pub fn dump_representations(
    model: &Model,
    data: &[Sample],
    ce: &BTreeMap<usize, CeBundle>,
    path: &Path,
) -> Result<Vec<RepRow>> {
    let rows = representations(model, data, ce)?;
    write_dump(path, &rows)?;
    Ok(rows)
}

pub fn load_dump(path: &Path) -> Result<Vec<RepRow>> {
    let text = read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let parse = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            message,
        };
        let mut cols = line.split('\t');
        let kind = cols.next().and_then(RepKind::parse).ok_or_else(|| parse("unknown kind".into()))?;
        let domain = match cols.next() {
            Some("ce") => None,
            Some(d) => Some(d.parse().map_err(|e: Error| parse(e.to_string()))?),
            None => return Err(parse("missing domain".into())),
        };
        let label = cols
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| parse("bad label".into()))?;
        let values = cols
            .map(|v| v.parse::<f64>().map_err(|e| parse(format!("bad value: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.is_empty() {
            return Err(parse("row has no components".into()));
        }
        rows.push(RepRow {
            kind,
            domain,
            label,
            values,
        });
    }
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Nearest-centroid domain accuracy on held-out style vectors.
    pub sr_domain_acc: f64,
    /// Same probe on instance content vectors.
    pub cr_domain_acc: f64,
    /// Mean distance of a style vector to its domain center over the
    /// distance between the two centers.
    pub sr_intra_inter_ratio: f64,
    /// Accuracy of assigning each fact CR to the nearest CE content vector.
    pub cr_anchor_acc: f64,
    /// The same restricted to target-domain facts.
    pub cr_anchor_acc_target: f64,
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn centroid<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Option<Vec<f64>> {
    let mut sum: Option<Vec<f64>> = None;
    let mut n = 0.0;
    for r in rows {
        let s = sum.get_or_insert_with(|| vec![0.0; r.len()]);
        for (a, b) in s.iter_mut().zip(r) {
            *a += b;
        }
        n += 1.0;
    }
    sum.map(|s| s.into_iter().map(|v| v / n).collect())
}

fn fact_rows(rows: &[RepRow], kind: RepKind) -> Vec<(Domain, &[f64])> {
    rows.iter()
        .filter(|r| r.kind == kind)
        .filter_map(|r| r.domain.map(|d| (d, r.values.as_slice())))
        .collect()
}

/// Within each domain, fits the centroid on even rows and holds out odd
/// rows; ties go to the source domain.
fn domain_probe(rows: &[(Domain, &[f64])]) -> Result<f64> {
    let split = |d: Domain| {
        let all: Vec<&[f64]> = rows.iter().filter(|r| r.0 == d).map(|r| r.1).collect();
        let fit = centroid(all.iter().step_by(2).copied());
        let held: Vec<&[f64]> = all.into_iter().skip(1).step_by(2).collect();
        (fit, held)
    };
    let (Some(src), src_held) = split(Domain::Source) else {
        return Err(Error::Data("domain probe needs rows of both domains".into()));
    };
    let (Some(tgt), tgt_held) = split(Domain::Target) else {
        return Err(Error::Data("domain probe needs rows of both domains".into()));
    };
    let total = src_held.len() + tgt_held.len();
    if total == 0 {
        return Err(Error::Data("domain probe has no held-out rows".into()));
    }
    let is_target = |v: &[f64]| euclid(v, &tgt) < euclid(v, &src);
    let correct = src_held.iter().filter(|v| !is_target(v)).count() + tgt_held.iter().filter(|v| is_target(v)).count();
    Ok(correct as f64 / total as f64)
}

fn anchor_accuracy(rows: &[RepRow], anchors: &BTreeMap<usize, &[f64]>, domain: Option<Domain>) -> f64 {
    let facts: Vec<&RepRow> = rows
        .iter()
        .filter(|r| r.kind == RepKind::FactCr && (domain.is_none() || r.domain == domain))
        .collect();
    if facts.is_empty() {
        return 0.0;
    }
    let correct = facts
        .iter()
        .filter(|r| {
            let mut best: Option<(f64, usize)> = None;
            for (&k, a) in anchors {
                let d = euclid(&r.values, a);
                if best.is_none_or(|(bd, _)| d < bd) {
                    best = Some((d, k));
                }
            }
            best.map(|b| b.1) == Some(r.label)
        })
        .count();
    correct as f64 / facts.len() as f64
}

/// Checks that the dumped representations separate domains in style space
/// but not in content space, and that content vectors cluster by class.
pub fn disentanglement_probe(rows: &[RepRow], truth: &GroundTruth) -> Result<ProbeReport> {
    for d in [Domain::Source, Domain::Target] {
        if !truth.factors.values().any(|f| *f == Factor::Style(d)) {
            return Err(Error::Data(format!("ground truth has no {d} style factors")));
        }
    }
    let sr = fact_rows(rows, RepKind::FactSr);
    let cr = fact_rows(rows, RepKind::FactCr);
    let sr_domain_acc = domain_probe(&sr)?;
    let cr_domain_acc = domain_probe(&cr)?;

    let center = |d: Domain| centroid(sr.iter().filter(|r| r.0 == d).map(|r| r.1)).expect("probe checked domains");
    let (cs, ct) = (center(Domain::Source), center(Domain::Target));
    let intra = sr
        .iter()
        .map(|(d, v)| euclid(v, if *d == Domain::Source { &cs } else { &ct }))
        .sum::<f64>()
        / sr.len() as f64;
    let inter = euclid(&cs, &ct);
    let sr_intra_inter_ratio = if inter == 0.0 {
        if intra == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        intra / inter
    };

    let anchors: BTreeMap<usize, &[f64]> = rows
        .iter()
        .filter(|r| r.kind == RepKind::CeCr)
        .map(|r| (r.label, r.values.as_slice()))
        .collect();
    if anchors.is_empty() {
        return Err(Error::Data("dump contains no CE content rows".into()));
    }
    Ok(ProbeReport {
        sr_domain_acc,
        cr_domain_acc,
        sr_intra_inter_ratio,
        cr_anchor_acc: anchor_accuracy(rows, &anchors, None),
        cr_anchor_acc_target: anchor_accuracy(rows, &anchors, Some(Domain::Target)),
    })
}
