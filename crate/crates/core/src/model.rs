//! The disentangling network.
//!
//! Two parameter towers: the fact tower is shared by source and target
//! fact descriptions, the CE tower encodes constitutive-element texts. The
//! word embedding table is shared by both towers.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gru_cell, gru_shapes, GruParams, Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::text::{embed, EmbeddingTable, TokenSeq};

/// Number of constitutive-element types.
pub const NUM_ELEMENTS: usize = 4;

/// Constitutive-element types in the order fed to the fusion GRU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Element {
    Object,
    Objective,
    Subject,
    Subjective,
}

impl Element {
    pub const ORDER: [Element; NUM_ELEMENTS] = [
        Element::Object,
        Element::Objective,
        Element::Subject,
        Element::Subjective,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Element::Object => "object",
            Element::Objective => "objective",
            Element::Subject => "subject",
            Element::Subjective => "subjective",
        }
    }

    pub fn index(self) -> usize {
        Self::ORDER.iter().position(|&e| e == self).expect("listed")
    }
}

impl fmt::Display for Element {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub num_classes: usize,
}

impl ModelDims {
    pub fn hidden_dim(&self) -> usize {
        self.content_dim + self.style_dim
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            ("vocab_size", self.vocab_size >= 2),
            ("embed_dim", self.embed_dim >= 1),
            ("content_dim", self.content_dim >= 1),
            ("style_dim", self.style_dim >= 1),
            ("num_classes", self.num_classes >= 2),
        ];
        for (field, ok) in checks {
            if !ok {
                return Err(Error::config(field, "value too small"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub weight: T,
    pub bias: T,
}

/// Parameters of one encoder tower, generic over storage.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower<T> {
    pub encoder: GruParams<T>,
    /// Per element type: the dense layer of `g_m` and its query vector.
    pub element_weight: Vec<T>,
    pub element_bias: Vec<T>,
    pub element_query: Vec<T>,
    pub fusion: GruParams<T>,
    pub style_query: T,
    pub head: Option<Head<T>>,
}

impl<T> Tower<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Tower<U> {
        Tower {
            encoder: self.encoder.map(&mut f),
            element_weight: self.element_weight.iter().map(&mut f).collect(),
            element_bias: self.element_bias.iter().map(&mut f).collect(),
            element_query: self.element_query.iter().map(&mut f).collect(),
            fusion: self.fusion.map(&mut f),
            style_query: f(&self.style_query),
            head: self.head.as_ref().map(|h| Head {
                weight: f(&h.weight),
                bias: f(&h.bias),
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    embedding: usize,
    fact: Tower<usize>,
    ce: Tower<usize>,
}

#[derive(Clone, Copy)]
enum Init {
    /// Uniform in `±1/sqrt(cols)`.
    FanIn,
    Zero,
    Embedding,
}

struct LayoutBuilder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl LayoutBuilder {
    fn add(&mut self, name: String, shape: (usize, usize), init: Init) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.inits.push(init);
        self.names.len() - 1
    }

    fn gru(&mut self, prefix: &str, input: usize, hidden: usize) -> GruParams<usize> {
        let shapes = gru_shapes(input, hidden);
        let named = shapes.named();
        let idx: Vec<usize> = named
            .iter()
            .map(|(n, &s)| {
                let init = if n.starts_with('b') { Init::Zero } else { Init::FanIn };
                self.add(format!("{prefix}.{n}"), s, init)
            })
            .collect();
        GruParams {
            w_z: idx[0],
            u_z: idx[1],
            b_z: idx[2],
            w_r: idx[3],
            u_r: idx[4],
            b_r: idx[5],
            w_n: idx[6],
            u_n: idx[7],
            b_n: idx[8],
        }
    }

    fn tower(&mut self, prefix: &str, dims: &ModelDims, with_head: bool) -> Tower<usize> {
        let (dc, ds) = (dims.content_dim, dims.style_dim);
        let encoder = self.gru(&format!("{prefix}.encoder"), dims.embed_dim, dims.hidden_dim());
        let mut element_weight = Vec::new();
        let mut element_bias = Vec::new();
        let mut element_query = Vec::new();
        for e in Element::ORDER {
            element_weight.push(self.add(format!("{prefix}.element.{e}.weight"), (dc, dc), Init::FanIn));
            element_bias.push(self.add(format!("{prefix}.element.{e}.bias"), (dc, 1), Init::Zero));
            element_query.push(self.add(format!("{prefix}.element.{e}.query"), (dc, 1), Init::FanIn));
        }
        let fusion = self.gru(&format!("{prefix}.fusion"), dc, dc);
        let style_query = self.add(format!("{prefix}.style.query"), (ds, 1), Init::FanIn);
        let head = with_head.then(|| Head {
            weight: self.add(format!("{prefix}.head.weight"), (dims.num_classes, dc), Init::FanIn),
            bias: self.add(format!("{prefix}.head.bias"), (dims.num_classes, 1), Init::Zero),
        });
        Tower {
            encoder,
            element_weight,
            element_bias,
            element_query,
            fusion,
            style_query,
            head,
        }
    }
}

fn build_layout(dims: &ModelDims) -> (Layout, LayoutBuilder) {
    let mut b = LayoutBuilder {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let embedding = b.add("embedding".into(), (dims.vocab_size, dims.embed_dim), Init::Embedding);
    let fact = b.tower("fact", dims, true);
    let ce = b.tower("ce", dims, false);
    (Layout { embedding, fact, ce }, b)
}

/// All trainable tensors plus their structure.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    dims: ModelDims,
    names: Vec<String>,
    tensors: Vec<Matrix>,
    layout: Layout,
}

/// Tape handles for every parameter of a [`Model`].
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub vars: Vec<Var>,
    pub embedding: Var,
    pub fact: Tower<Var>,
    pub ce: Tower<Var>,
    pub content_dim: usize,
}

impl Model {
    /// Random initialization; tensors are drawn in layout order.
    pub fn new<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let (layout, b) = build_layout(&dims);
        let tensors = b
            .shapes
            .iter()
            .zip(&b.inits)
            .map(|(&(r, c), init)| match init {
                Init::Zero => Matrix::zeros(r, c),
                Init::Embedding => EmbeddingTable::random(r, c, rng).0,
                Init::FanIn => {
                    let bound = 1.0 / (c as f64).sqrt();
                    let data = (0..r * c).map(|_| rng.gen_range(-bound..bound)).collect();
                    Matrix::from_vec(r, c, data).expect("shape")
                }
            })
            .collect();
        Ok(Model {
            dims,
            names: b.names,
            tensors,
            layout,
        })
    }

    /// Builds a model from named tensors, checking names and shapes.
    pub fn from_named(dims: ModelDims, named: Vec<(String, Matrix)>) -> Result<Self> {
        dims.validate()?;
        let (layout, b) = build_layout(&dims);
        if named.len() != b.names.len() {
            return Err(Error::Compatibility(format!(
                "expected {} tensors, found {}",
                b.names.len(),
                named.len()
            )));
        }
        let mut tensors = Vec::with_capacity(named.len());
        for ((name, m), (want, &shape)) in named.into_iter().zip(b.names.iter().zip(&b.shapes)) {
            if &name != want || m.shape() != shape {
                return Err(Error::Compatibility(format!(
                    "tensor `{name}` {:?} does not match expected `{want}` {shape:?}",
                    m.shape()
                )));
            }
            tensors.push(m);
        }
        Ok(Model {
            dims,
            names: b.names,
            tensors,
            layout,
        })
    }

    pub fn dims(&self) -> &ModelDims {
        &self.dims
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn tensor(&self, name: &str) -> Option<&Matrix> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Matrix> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn embedding_index(&self) -> usize {
        self.layout.embedding
    }

    /// Indices of the CE tower tensors.
    pub fn ce_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.layout.ce.map(|&i| out.push(i));
        out
    }

    /// Indices of the fact tower tensors.
    pub fn fact_indices(&self) -> Vec<usize> {
        let mut out = Vec::new();
        self.layout.fact.map(|&i| out.push(i));
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.iter().map(Matrix::len).sum()
    }

    /// Registers every tensor as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        self.bind_with(tape, &self.tensors)
    }

    /// Registers caller-provided tensors laid out like this model.
    pub fn bind_with(&self, tape: &mut Tape, tensors: &[Matrix]) -> BoundModel {
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        BoundModel::from_vars(self, vars)
    }

    /// Class probabilities for one fact description.
    pub fn predict_proba(&self, seq: &TokenSeq) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let reps = encode_fact(&mut tape, &bound, seq)?;
        let probs = predict(&mut tape, reps.content, bound.fact_head()?)?;
        Ok(tape.value(probs).data().to_vec())
    }
}

impl BoundModel {
    pub fn from_vars(model: &Model, vars: Vec<Var>) -> Self {
        let l = &model.layout;
        BoundModel {
            embedding: vars[l.embedding],
            fact: l.fact.map(|&i| vars[i]),
            ce: l.ce.map(|&i| vars[i]),
            content_dim: model.dims.content_dim,
            vars,
        }
    }

    pub fn fact_head(&self) -> Result<&Head<Var>> {
        self.fact
            .head
            .as_ref()
            .ok_or_else(|| Error::Contract("fact tower has no prediction head".into()))
    }
}

/// Per-token hidden states split into content and style rows.
#[derive(Clone, Copy, Debug)]
pub struct SplitHidden {
    /// `content_dim x n`
    pub content: Var,
    /// `style_dim x n`
    pub style: Var,
}

/// Vectors extracted from one text (or one CE bundle).
#[derive(Clone, Debug)]
pub struct Representations {
    pub label: Option<usize>,
    /// One content vector per element type.
    pub elements: Vec<Var>,
    /// Instance-level content vector.
    pub content: Var,
    /// Style vector.
    pub style: Var,
}

/// GRU over the embedded tokens, each hidden state split into the first
/// `content_dim` rows (content) and the remaining rows (style).
pub fn basic_encode(
    tape: &mut Tape,
    embedding: Var,
    seq: &TokenSeq,
    encoder: &GruParams<Var>,
    content_dim: usize,
) -> Result<SplitHidden> {
    let embedded = embed(tape, embedding, seq)?;
    let hidden = tape.shape(encoder.u_z).0;
    if content_dim == 0 || content_dim >= hidden {
        return Err(Error::Shape(format!(
            "content_dim {content_dim} must lie in 1..{hidden}"
        )));
    }
    let mut h = tape.leaf(Matrix::zeros(hidden, 1));
    let mut states = Vec::with_capacity(seq.true_len());
    for i in 0..seq.true_len() {
        let x = tape.column(embedded, i)?;
        h = gru_cell(tape, x, h, encoder)?;
        states.push(h);
    }
    let all = tape.hstack(&states)?;
    Ok(SplitHidden {
        content: tape.slice_rows(all, 0, content_dim)?,
        style: tape.slice_rows(all, content_dim, hidden - content_dim)?,
    })
}

/// Attention pooling: `alpha = softmax(states^T query)`, output `states alpha`.
/// Returns `(pooled, alpha)`.
pub fn attention_pool(tape: &mut Tape, states: Var, query: Var) -> Result<(Var, Var)> {
    let scores = tape.trans_matmul(states, query)?;
    let alpha = tape.softmax(scores)?;
    Ok((tape.matmul(states, alpha)?, alpha))
}

/// `g_m` (dense + tanh) applied to every content column, then attention
/// pooled with the element query.
pub fn element_cr(tape: &mut Tape, content: Var, tower: &Tower<Var>, element: usize) -> Result<(Var, Var)> {
    let transformed = tape.matmul(tower.element_weight[element], content)?;
    let transformed = tape.add_column(transformed, tower.element_bias[element])?;
    let transformed = tape.tanh(transformed);
    attention_pool(tape, transformed, tower.element_query[element])
}

/// One element-level content vector per element type.
pub fn extract_element_crs(tape: &mut Tape, content: Var, tower: &Tower<Var>) -> Result<Vec<Var>> {
    (0..tower.element_weight.len())
        .map(|m| element_cr(tape, content, tower, m).map(|(x, _)| x))
        .collect()
}

/// Final state of the fusion GRU run over the element vectors from zero.
pub fn fuse_instance_cr(
    tape: &mut Tape,
    elements: &[Var],
    fusion: &GruParams<Var>,
    expected: usize,
) -> Result<Var> {
    if elements.len() != expected || elements.is_empty() {
        return Err(Error::Contract(format!(
            "fusion expects {expected} element vectors, got {}",
            elements.len()
        )));
    }
    let dim = tape.shape(fusion.u_z).0;
    let mut h = tape.leaf(Matrix::zeros(dim, 1));
    for &x in elements {
        h = gru_cell(tape, x, h, fusion)?;
    }
    Ok(h)
}

/// Style vector: attention pooling directly over the style rows.
pub fn extract_sr(tape: &mut Tape, style: Var, query: Var) -> Result<Var> {
    attention_pool(tape, style, query).map(|(x, _)| x)
}

/// Content and style vectors of a fact description with the fact tower.
pub fn encode_fact(tape: &mut Tape, model: &BoundModel, seq: &TokenSeq) -> Result<Representations> {
    let tower = &model.fact;
    let split = basic_encode(tape, model.embedding, seq, &tower.encoder, model.content_dim)?;
    let elements = extract_element_crs(tape, split.content, tower)?;
    let content = fuse_instance_cr(tape, &elements, &tower.fusion, elements.len())?;
    let style = extract_sr(tape, split.style, tower.style_query)?;
    Ok(Representations {
        label: None,
        elements,
        content,
        style,
    })
}

/// The constitutive-element texts of one charge, in [`Element::ORDER`].
#[derive(Clone, Debug, PartialEq)]
pub struct CeBundle {
    pub label: usize,
    pub texts: Vec<TokenSeq>,
}

impl CeBundle {
    pub fn new(label: usize, texts: Vec<TokenSeq>) -> Result<Self> {
        if texts.len() != NUM_ELEMENTS {
            return Err(Error::Data(format!(
                "charge {label}: expected {NUM_ELEMENTS} element texts, got {}",
                texts.len()
            )));
        }
        Ok(CeBundle { label, texts })
    }
}

/// Encodes a CE bundle with the CE tower. Text `m` yields only the
/// element-`m` content vector; the bundle style is the mean of the
/// per-text style vectors.
pub fn encode_ce_bundle(tape: &mut Tape, model: &BoundModel, bundle: &CeBundle) -> Result<Representations> {
    let tower = &model.ce;
    let mut elements = Vec::with_capacity(bundle.texts.len());
    let mut styles = Vec::with_capacity(bundle.texts.len());
    for (m, seq) in bundle.texts.iter().enumerate() {
        let split = basic_encode(tape, model.embedding, seq, &tower.encoder, model.content_dim)?;
        elements.push(element_cr(tape, split.content, tower, m)?.0);
        styles.push(extract_sr(tape, split.style, tower.style_query)?);
    }
    let content = fuse_instance_cr(tape, &elements, &tower.fusion, tower.element_weight.len())?;
    let style = tape.mean(&styles)?;
    Ok(Representations {
        label: Some(bundle.label),
        elements,
        content,
        style,
    })
}

/// `softmax(W x + b)` over the charges.
pub fn predict(tape: &mut Tape, content: Var, head: &Head<Var>) -> Result<Var> {
    let logits = tape.matmul(head.weight, content)?;
    let logits = tape.add(logits, head.bias)?;
    tape.softmax(logits)
}

/// Index of the largest probability; ties go to the lowest index.
pub fn argmax(probs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dims(dc: usize, ds: usize) -> ModelDims {
        ModelDims {
            vocab_size: 12,
            embed_dim: 5,
            content_dim: dc,
            style_dim: ds,
            num_classes: 3,
        }
    }

    fn seq(ids: &[usize]) -> TokenSeq {
        TokenSeq::from_ids(ids.to_vec(), ids.len()).unwrap()
    }

    #[test]
    fn split_hidden_shapes_default_scale() {
        let d = ModelDims {
            vocab_size: 20,
            embed_dim: 8,
            content_dim: 128,
            style_dim: 16,
            num_classes: 4,
        };
        let model = Model::new(d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let s = basic_encode(&mut tape, b.embedding, &seq(&[2, 3, 4, 5, 6]), &b.fact.encoder, 128).unwrap();
        assert_eq!(tape.shape(s.content), (128, 5));
        assert_eq!(tape.shape(s.style), (16, 5));
    }

    #[test]
    fn split_is_a_partition_of_hidden_states() {
        let model = Model::new(dims(3, 2), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let s = basic_encode(&mut tape, b.embedding, &seq(&[4]), &b.fact.encoder, 3).unwrap();
        assert_eq!(tape.shape(s.content), (3, 1));
        // Recompute the single hidden state directly.
        let e = embed(&mut tape, b.embedding, &seq(&[4])).unwrap();
        let x = tape.column(e, 0).unwrap();
        let h0 = tape.leaf(Matrix::zeros(5, 1));
        let h = gru_cell(&mut tape, x, h0, &b.fact.encoder).unwrap();
        let mut joined = tape.value(s.content).data().to_vec();
        joined.extend_from_slice(tape.value(s.style).data());
        assert_eq!(joined, tape.value(h).data());
    }

    #[test]
    fn singleton_attention_is_identity() {
        let model = Model::new(dims(4, 2), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let s = basic_encode(&mut tape, b.embedding, &seq(&[7]), &b.fact.encoder, 4).unwrap();
        let (x, alpha) = element_cr(&mut tape, s.content, &b.fact, 1).unwrap();
        assert_eq!(tape.value(alpha).data(), &[1.0]);
        let g = tape.matmul(b.fact.element_weight[1], s.content).unwrap();
        let g = tape.add(g, b.fact.element_bias[1]).unwrap();
        let g = tape.tanh(g);
        assert_eq!(tape.value(x), tape.value(g));

        let sr = extract_sr(&mut tape, s.style, b.fact.style_query).unwrap();
        assert_eq!(tape.value(sr), tape.value(s.style));
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let model = Model::new(dims(4, 3), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let s = basic_encode(&mut tape, b.embedding, &seq(&[2, 9, 4, 4, 11]), &b.fact.encoder, 4).unwrap();
        for m in 0..NUM_ELEMENTS {
            let (_, alpha) = element_cr(&mut tape, s.content, &b.fact, m).unwrap();
            assert!((tape.value(alpha).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let (sr, alpha) = attention_pool(&mut tape, s.style, b.fact.style_query).unwrap();
        assert_eq!(tape.shape(sr), (3, 1));
        assert!((tape.value(alpha).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let elems = extract_element_crs(&mut tape, s.content, &b.fact).unwrap();
        assert_eq!(elems.len(), NUM_ELEMENTS);
    }

    #[test]
    fn fusion_contract_and_single_step() {
        let model = Model::new(dims(4, 2), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let x = tape.leaf(Matrix::column(vec![0.3, -0.1, 0.2, 0.5]));
        let fused = fuse_instance_cr(&mut tape, &[x], &b.fact.fusion, 1).unwrap();
        let h0 = tape.leaf(Matrix::zeros(4, 1));
        let direct = gru_cell(&mut tape, x, h0, &b.fact.fusion).unwrap();
        assert_eq!(tape.value(fused), tape.value(direct));
        assert!(matches!(
            fuse_instance_cr(&mut tape, &[x, x], &b.fact.fusion, 4),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn fusion_is_order_sensitive() {
        let model = Model::new(dims(4, 2), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let xs: Vec<Var> = (0..4)
            .map(|i| tape.leaf(Matrix::column(vec![0.1 * i as f64, -0.4, 0.3 - 0.2 * i as f64, 0.6])))
            .collect();
        let fwd = fuse_instance_cr(&mut tape, &xs, &b.fact.fusion, 4).unwrap();
        let rev: Vec<Var> = xs.iter().rev().cloned().collect();
        let bwd = fuse_instance_cr(&mut tape, &rev, &b.fact.fusion, 4).unwrap();
        assert_eq!(tape.shape(fwd), (4, 1));
        assert_ne!(tape.value(fwd), tape.value(bwd));
    }

    #[test]
    fn ce_bundle_style_is_mean_and_elements_are_local() {
        let model = Model::new(dims(4, 2), &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        let texts = vec![seq(&[2, 3]), seq(&[4, 5, 6]), seq(&[7]), seq(&[8, 9])];
        let bundle = CeBundle::new(1, texts.clone()).unwrap();
        let mut tape = Tape::new();
        let b = model.bind(&mut tape);
        let reps = encode_ce_bundle(&mut tape, &b, &bundle).unwrap();
        assert_eq!(tape.shape(reps.content), (4, 1));
        assert_eq!(tape.shape(reps.style), (2, 1));

        let mut changed = texts.clone();
        changed[2] = seq(&[10, 11, 3]);
        let other = encode_ce_bundle(&mut tape, &b, &CeBundle::new(1, changed).unwrap()).unwrap();
        for m in 0..NUM_ELEMENTS {
            let same = tape.value(reps.elements[m]) == tape.value(other.elements[m]);
            assert_eq!(same, m != 2, "element {m}");
        }

        // Four identical texts give four equal style vectors; their mean is that vector.
        let same = CeBundle::new(0, vec![seq(&[3, 4]); 4]).unwrap();
        let reps = encode_ce_bundle(&mut tape, &b, &same).unwrap();
        let s = basic_encode(&mut tape, b.embedding, &seq(&[3, 4]), &b.ce.encoder, 4).unwrap();
        let single = extract_sr(&mut tape, s.style, b.ce.style_query).unwrap();
        for (a, c) in tape.value(reps.style).data().iter().zip(tape.value(single).data()) {
            assert!((a - c).abs() < 1e-15);
        }
    }

    #[test]
    fn ce_bundle_requires_four_texts() {
        assert!(matches!(CeBundle::new(0, vec![seq(&[2])]), Err(Error::Data(_))));
    }

    #[test]
    fn predict_uniform_with_zero_head() {
        let mut d = dims(4, 2);
        d.num_classes = 10;
        let mut model = Model::new(d, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        for name in ["fact.head.weight", "fact.head.bias"] {
            model.tensor_mut(name).unwrap().data_mut().fill(0.0);
        }
        let p = model.predict_proba(&seq(&[2, 5])).unwrap();
        assert_eq!(p.len(), 10);
        assert!(p.iter().all(|&v| (v - 0.1).abs() < 1e-15));
        assert_eq!(argmax(&p), 0);
    }

    #[test]
    fn predict_is_shift_invariant() {
        let mut tape = Tape::new();
        let w = tape.leaf(Matrix::from_vec(3, 2, vec![1.0, 0.5, -0.3, 2.0, 0.0, 0.1]).unwrap());
        let b0 = tape.leaf(Matrix::column(vec![0.0, 0.2, -0.1]));
        let b1 = tape.leaf(Matrix::column(vec![5.0, 5.2, 4.9]));
        let x = tape.leaf(Matrix::column(vec![0.4, -0.7]));
        let p0 = predict(&mut tape, x, &Head { weight: w, bias: b0 }).unwrap();
        let p1 = predict(&mut tape, x, &Head { weight: w, bias: b1 }).unwrap();
        assert!((tape.value(p0).data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(argmax(tape.value(p0).data()), argmax(tape.value(p1).data()));
    }

    #[test]
    fn towers_are_disjoint_and_facts_share_parameters() {
        let model = Model::new(dims(4, 2), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let fact = model.fact_indices();
        let ce = model.ce_indices();
        assert!(fact.iter().all(|i| !ce.contains(i)));
        assert_eq!(fact.len() + ce.len() + 1, model.tensors().len());

        let s = seq(&[3, 6, 9]);
        let enc = |m: &Model| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape);
            let r = encode_fact(&mut tape, &b, &s).unwrap();
            (tape.value(r.content).clone(), tape.value(r.style).clone())
        };
        let (src, tgt) = (enc(&model), enc(&model));
        assert_eq!(src, tgt);

        let mut perturbed = model.clone();
        for i in ce {
            perturbed.tensors_mut()[i].data_mut().iter_mut().for_each(|v| *v += 0.37);
        }
        assert_eq!(enc(&perturbed), src);
    }

    #[test]
    fn end_to_end_gradient_check() {
        let model = Model::new(dims(3, 2), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let s = seq(&[2, 5, 7]);
        let report = grad_check(
            |tape, vars| {
                let b = BoundModel::from_vars(&model, vars.to_vec());
                let reps = encode_fact(tape, &b, &s)?;
                let p = predict(tape, reps.content, b.fact_head()?)?;
                tape.neg_log_at(p, 1)
            },
            model.tensors(),
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-3, "{report:?}");
    }

    #[test]
    fn from_named_checks_layout() {
        let model = Model::new(dims(3, 2), &mut ChaCha8Rng::seed_from_u64(10)).unwrap();
        let named: Vec<_> = model.names().iter().cloned().zip(model.tensors().iter().cloned()).collect();
        assert_eq!(Model::from_named(model.dims().clone(), named.clone()).unwrap(), model);
        let mut bad = named;
        bad.swap(1, 2);
        assert!(matches!(Model::from_named(model.dims().clone(), bad), Err(Error::Compatibility(_))));
    }
}
