//! Alignment, separation, clustering and classification objectives.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{encode_ce_bundle, encode_fact, predict, BoundModel, CeBundle, Representations};
use crate::text::TokenSeq;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_c1: f64,
    pub lambda_c2: f64,
    pub lambda_c3: f64,
    pub lambda_s1: f64,
    pub lambda_s2: f64,
    pub beta_1: f64,
    pub beta_2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_c1: 1.0,
            lambda_c2: 1.0,
            lambda_c3: 10.0,
            lambda_s1: 1.0,
            lambda_s2: 1.0,
            beta_1: 100.0,
            beta_2: 1.0,
        }
    }
}

impl LossWeights {
    pub fn named(&self) -> [(&'static str, f64); 7] {
        [
            ("lambda_c1", self.lambda_c1),
            ("lambda_c2", self.lambda_c2),
            ("lambda_c3", self.lambda_c3),
            ("lambda_s1", self.lambda_s1),
            ("lambda_s2", self.lambda_s2),
            ("beta_1", self.beta_1),
            ("beta_2", self.beta_2),
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in self.named() {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::config(name, format!("weight must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }

    /// Weights with the ablated terms zeroed.
    pub fn with_ablation(mut self, ablation: Ablation) -> Self {
        match ablation {
            Ablation::None => {}
            Ablation::Dcs => {
                self.lambda_s1 = 0.0;
                self.lambda_s2 = 0.0;
            }
            Ablation::Ela => self.lambda_c1 = 0.0,
        }
        self
    }

    /// Only the source classification term is active.
    pub fn source_only(beta_1: f64) -> Self {
        LossWeights {
            lambda_c1: 0.0,
            lambda_c2: 0.0,
            lambda_c3: 0.0,
            lambda_s1: 0.0,
            lambda_s2: 0.0,
            beta_1,
            beta_2: 0.0,
        }
    }
}

/// Model variants obtained by dropping groups of constraints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ablation {
    #[default]
    None,
    /// No style-space constraints.
    Dcs,
    /// No element-level alignment.
    Ela,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Ablation::None),
            "dcs" => Ok(Ablation::Dcs),
            "ela" => Ok(Ablation::Ela),
            other => Err(Error::config("ablation", format!("unknown ablation `{other}`"))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::None => "none",
            Ablation::Dcs => "dcs",
            Ablation::Ela => "ela",
        })
    }
}

/// Which weighted sum is optimized.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    /// `beta_1 ce_source + beta_2 ce_target + lambda_c3 l_c3`
    Pretrain,
    Full,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts<T> {
    pub l_c1: T,
    pub l_c2: T,
    pub l_c3: T,
    pub l_s1: T,
    pub l_s2: T,
    pub ce_source: T,
    pub ce_target: T,
}

impl<T: Copy> LossParts<T> {
    pub fn map<U>(&self, mut f: impl FnMut(T) -> U) -> LossParts<U> {
        LossParts {
            l_c1: f(self.l_c1),
            l_c2: f(self.l_c2),
            l_c3: f(self.l_c3),
            l_s1: f(self.l_s1),
            l_s2: f(self.l_s2),
            ce_source: f(self.ce_source),
            ce_target: f(self.ce_target),
        }
    }

    /// `(weight, part)` pairs of the terms included in `objective`.
    fn weighted(&self, w: &LossWeights, objective: Objective) -> Vec<(f64, T)> {
        match objective {
            Objective::Pretrain => vec![
                (w.beta_1, self.ce_source),
                (w.beta_2, self.ce_target),
                (w.lambda_c3, self.l_c3),
            ],
            Objective::Full => vec![
                (w.lambda_c1, self.l_c1),
                (w.lambda_c2, self.l_c2),
                (w.lambda_c3, self.l_c3),
                (w.lambda_s1, self.l_s1),
                (w.lambda_s2, self.l_s2),
                (w.beta_1, self.ce_source),
                (w.beta_2, self.ce_target),
            ],
        }
    }
}

impl LossParts<f64> {
    pub fn objective(&self, w: &LossWeights, objective: Objective) -> f64 {
        self.weighted(w, objective).iter().map(|(w, v)| w * v).sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_c1: f64,
    pub l_c2: f64,
    pub l_c3: f64,
    pub l_s1: f64,
    pub l_s2: f64,
    pub ce_source: f64,
    pub ce_target: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn parts(&self) -> LossParts<f64> {
        LossParts {
            l_c1: self.l_c1,
            l_c2: self.l_c2,
            l_c3: self.l_c3,
            l_s1: self.l_s1,
            l_s2: self.l_s2,
            ce_source: self.ce_source,
            ce_target: self.ce_target,
        }
    }
}

/// Weighted total of all terms after applying `ablation` to `weights`.
pub fn total_loss(parts: &LossParts<f64>, weights: &LossWeights, ablation: Ablation) -> Result<LossBreakdown> {
    weights.validate()?;
    let w = weights.with_ablation(ablation);
    Ok(LossBreakdown {
        l_c1: parts.l_c1,
        l_c2: parts.l_c2,
        l_c3: parts.l_c3,
        l_s1: parts.l_s1,
        l_s2: parts.l_s2,
        ce_source: parts.ce_source,
        ce_target: parts.ce_target,
        total: parts.objective(&w, Objective::Full),
    })
}

/// Weighted objective recorded on the tape. Zero-weighted terms are left
/// out of the graph.
pub fn objective_on_tape(
    tape: &mut Tape,
    parts: &LossParts<Var>,
    weights: &LossWeights,
    objective: Objective,
) -> Result<Var> {
    let mut terms = Vec::new();
    for (w, v) in parts.weighted(weights, objective) {
        if w != 0.0 {
            terms.push(tape.scale(v, w));
        }
    }
    if terms.is_empty() {
        return Ok(tape.leaf(Matrix::scalar(0.0)));
    }
    tape.add_n(&terms)
}

fn same_class(reps: &[&Representations]) -> Result<usize> {
    let first = reps[0].label;
    if first.is_none() || reps.iter().any(|r| r.label != first) {
        return Err(Error::Contract(format!(
            "aligned representations must share a class, got {:?}",
            reps.iter().map(|r| r.label).collect::<Vec<_>>()
        )));
    }
    Ok(first.unwrap())
}

/// Element-level and instance-level alignment of a same-class triple:
/// `l_c1 = Σ_m d(x_m, x̂_m) + d(x_m, e_m)`, `l_c2 = d(x, x̂) + d(x, e)`.
/// Target and CE vectors are only linked through the source vectors.
pub fn content_alignment(
    tape: &mut Tape,
    source: &Representations,
    target: &Representations,
    ce: &Representations,
) -> Result<(Var, Var)> {
    same_class(&[source, target, ce])?;
    if source.elements.len() != target.elements.len() || source.elements.len() != ce.elements.len() {
        return Err(Error::Contract("element vector counts differ".into()));
    }
    let mut terms = Vec::with_capacity(2 * source.elements.len());
    for m in 0..source.elements.len() {
        terms.push(tape.distance(source.elements[m], target.elements[m])?);
        terms.push(tape.distance(source.elements[m], ce.elements[m])?);
    }
    let l_c1 = tape.add_n(&terms)?;
    let a = tape.distance(source.content, target.content)?;
    let b = tape.distance(source.content, ce.content)?;
    let l_c2 = tape.add(a, b)?;
    Ok((l_c1, l_c2))
}

/// `exp(-d(e_c^{k1}, e_c^{k2}))` for two different charges.
pub fn content_separation(tape: &mut Tape, first: &Representations, second: &Representations) -> Result<Var> {
    match (first.label, second.label) {
        (Some(a), Some(b)) if a != b => {}
        labels => {
            return Err(Error::Contract(format!(
                "separation needs two distinct charges, got {labels:?}"
            )))
        }
    }
    exp_neg_distance(tape, first.content, second.content)
}

fn exp_neg_distance(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let d = tape.distance(a, b)?;
    let neg = tape.scale(d, -1.0);
    Ok(tape.exp(neg))
}

/// Output of [`style_cluster`].
#[derive(Clone, Copy, Debug)]
pub struct StyleCluster {
    pub loss: Var,
    pub source_center: Var,
    pub target_center: Var,
}

/// Mean over batch items of `d(x̂_s, x̄̂_s) + d(x_s, x̄_s) + d(e_s, x̄_s)`
/// with in-batch domain centers. Gradients flow through the centers.
pub fn style_cluster(tape: &mut Tape, source: &[Var], target: &[Var], ce: &[Var]) -> Result<StyleCluster> {
    if source.len() < 2 || target.len() < 2 {
        return Err(Error::Contract(format!(
            "style clustering needs at least 2 items per domain, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    if source.len() != target.len() || ce.len() != source.len() {
        return Err(Error::Contract("source, target and CE style lists differ in length".into()));
    }
    let source_center = tape.mean(source)?;
    let target_center = tape.mean(target)?;
    let mut per_item = Vec::with_capacity(source.len());
    for i in 0..source.len() {
        let t = tape.distance(target[i], target_center)?;
        let s = tape.distance(source[i], source_center)?;
        let e = tape.distance(ce[i], source_center)?;
        per_item.push(tape.add_n(&[t, s, e])?);
    }
    Ok(StyleCluster {
        loss: tape.mean(&per_item)?,
        source_center,
        target_center,
    })
}

/// `exp(-d(x̄_s, x̄̂_s))`.
pub fn style_separation(tape: &mut Tape, source_center: Var, target_center: Var) -> Result<Var> {
    exp_neg_distance(tape, source_center, target_center)
}

/// Mean of `-ln(p[label] + 1e-12)` over the batch.
pub fn cross_entropy(tape: &mut Tape, probs: &[Var], labels: &[usize]) -> Result<Var> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Contract(format!(
            "{} distributions for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let terms = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| tape.neg_log_at(p, y))
        .collect::<Result<Vec<_>>>()?;
    tape.mean(&terms)
}

/// One class's members of a paired batch.
#[derive(Clone, Copy, Debug)]
pub struct TripleInput<'a> {
    pub label: usize,
    pub source: &'a TokenSeq,
    pub target: &'a TokenSeq,
    pub ce: &'a CeBundle,
}

/// Everything recorded for one batch.
#[derive(Clone, Debug)]
pub struct BatchGraph {
    pub parts: LossParts<Var>,
    pub source_probs: Vec<Var>,
    pub target_probs: Vec<Var>,
}

/// Records every loss term of a batch of paired triples. Pairwise terms
/// are averaged over triples (or pairs, for `l_c3`); each distinct CE
/// bundle is encoded once.
pub fn batch_graph(tape: &mut Tape, model: &BoundModel, pairs: &[[TripleInput<'_>; 2]]) -> Result<BatchGraph> {
    if pairs.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut ce_reps: BTreeMap<usize, Representations> = BTreeMap::new();
    for t in pairs.iter().flatten() {
        if t.ce.label != t.label {
            return Err(Error::Contract(format!(
                "triple of class {} carries the CE bundle of class {}",
                t.label, t.ce.label
            )));
        }
        if let std::collections::btree_map::Entry::Vacant(e) = ce_reps.entry(t.label) {
            let reps = encode_ce_bundle(tape, model, t.ce)?;
            e.insert(reps);
        }
    }

    let head = model.fact_head()?;
    let n = pairs.len() * 2;
    let (mut c1, mut c2) = (Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut src_styles, mut tgt_styles, mut ce_styles) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let (mut source_probs, mut target_probs, mut labels) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    let mut c3 = Vec::with_capacity(pairs.len());

    for pair in pairs {
        if pair[0].label == pair[1].label {
            return Err(Error::Contract(format!(
                "paired triples must have distinct classes, both are {}",
                pair[0].label
            )));
        }
        for t in pair {
            let mut src = encode_fact(tape, model, t.source)?;
            src.label = Some(t.label);
            let mut tgt = encode_fact(tape, model, t.target)?;
            tgt.label = Some(t.label);
            let ce = &ce_reps[&t.label];
            let (a, b) = content_alignment(tape, &src, &tgt, ce)?;
            c1.push(a);
            c2.push(b);
            src_styles.push(src.style);
            tgt_styles.push(tgt.style);
            ce_styles.push(ce.style);
            source_probs.push(predict(tape, src.content, head)?);
            target_probs.push(predict(tape, tgt.content, head)?);
            labels.push(t.label);
        }
        c3.push(content_separation(tape, &ce_reps[&pair[0].label], &ce_reps[&pair[1].label])?);
    }

    let cluster = style_cluster(tape, &src_styles, &tgt_styles, &ce_styles)?;
    let parts = LossParts {
        l_c1: tape.mean(&c1)?,
        l_c2: tape.mean(&c2)?,
        l_c3: tape.mean(&c3)?,
        l_s1: cluster.loss,
        l_s2: style_separation(tape, cluster.source_center, cluster.target_center)?,
        ce_source: cross_entropy(tape, &source_probs, &labels)?,
        ce_target: cross_entropy(tape, &target_probs, &labels)?,
    };
    Ok(BatchGraph {
        parts,
        source_probs,
        target_probs,
    })
}
