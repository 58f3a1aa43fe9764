//! Adam, the two-phase training schedule, logs and checkpoints.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape};
use crate::data::{encode_ce, encode_examples, few_shot_split, sample_epoch, CeTexts, Example, PairedTriple, Sample};
use crate::error::{read_to_string, write_file, Error, Result};
use crate::evaluation::{evaluate, Metrics};
use crate::losses::{batch_graph, objective_on_tape, total_loss, Ablation, LossBreakdown, LossWeights, Objective, TripleInput};
use crate::model::{CeBundle, Model, ModelDims};
use crate::text::{EmbeddingTable, Vocab};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Flat key-value run configuration. Relative paths are resolved against
/// the directory of the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub source: PathBuf,
    pub target: PathBuf,
    pub ce: PathBuf,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub shots: usize,
    pub test_per_class: usize,
    pub batch_size: usize,
    pub pretrain_epochs: usize,
    pub main_epochs: usize,
    pub lr: f64,
    pub embed_dim: usize,
    pub content_dim: usize,
    pub style_dim: usize,
    pub max_len: usize,
    pub ce_max_len: usize,
    pub min_freq: usize,
    pub ablation: Ablation,
    pub lambda_c1: f64,
    pub lambda_c2: f64,
    pub lambda_c3: f64,
    pub lambda_s1: f64,
    pub lambda_s2: f64,
    pub beta_1: f64,
    pub beta_2: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        TrainConfig {
            source: "source.jsonl".into(),
            target: "target.jsonl".into(),
            ce: "ce.jsonl".into(),
            out_dir: "runs".into(),
            seed: 1,
            shots: 1,
            test_per_class: 30,
            batch_size: 8,
            pretrain_epochs: 15,
            main_epochs: 10,
            lr: 1e-3,
            embed_dim: 32,
            content_dim: 16,
            style_dim: 4,
            max_len: 32,
            ce_max_len: 16,
            min_freq: 1,
            ablation: Ablation::None,
            lambda_c1: w.lambda_c1,
            lambda_c2: w.lambda_c2,
            lambda_c3: w.lambda_c3,
            lambda_s1: w.lambda_s1,
            lambda_s2: w.lambda_s2,
            beta_1: w.beta_1,
            beta_2: w.beta_2,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        let mut cfg: TrainConfig = toml::from_str(&text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.to_string())
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.source, &mut cfg.target, &mut cfg.ce, &mut cfg.out_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serializable")
    }

    /// Weights as configured, before the ablation is applied.
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda_c1: self.lambda_c1,
            lambda_c2: self.lambda_c2,
            lambda_c3: self.lambda_c3,
            lambda_s1: self.lambda_s1,
            lambda_s2: self.lambda_s2,
            beta_1: self.beta_1,
            beta_2: self.beta_2,
        }
    }

    pub fn set_weights(&mut self, w: LossWeights) {
        self.lambda_c1 = w.lambda_c1;
        self.lambda_c2 = w.lambda_c2;
        self.lambda_c3 = w.lambda_c3;
        self.lambda_s1 = w.lambda_s1;
        self.lambda_s2 = w.lambda_s2;
        self.beta_1 = w.beta_1;
        self.beta_2 = w.beta_2;
    }

    /// Weights actually optimized: the configured ones with the ablation
    /// applied.
    pub fn effective_weights(&self) -> LossWeights {
        self.weights().with_ablation(self.ablation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 || !self.batch_size.is_multiple_of(2) {
            return Err(Error::config("batch_size", "must be even and at least 2"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("lr", "must be positive"));
        }
        let positive = [
            ("shots", self.shots),
            ("test_per_class", self.test_per_class),
            ("embed_dim", self.embed_dim),
            ("content_dim", self.content_dim),
            ("style_dim", self.style_dim),
            ("max_len", self.max_len),
            ("ce_max_len", self.ce_max_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        self.weights().validate()
    }
}

/// Tokenized inputs of one run.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub num_classes: usize,
    pub source: Vec<Sample>,
    pub train: Vec<Sample>,
    pub valid: Vec<Sample>,
    pub test: Vec<Sample>,
    pub ce: BTreeMap<usize, CeBundle>,
}

/// Splits the target set, builds the vocabulary from the training side
/// (source, target train, CE texts) and tokenizes everything.
pub fn prepare(
    cfg: &TrainConfig,
    source: &[Example],
    target: &[Example],
    ce: &BTreeMap<usize, CeTexts>,
    rng: &mut ChaCha8Rng,
) -> Result<Prepared> {
    let num_classes = ce.keys().next_back().map_or(0, |k| k + 1);
    if num_classes < 2 {
        return Err(Error::Data("at least two charges are required".into()));
    }
    if let Some(k) = (0..num_classes).find(|k| !ce.contains_key(k)) {
        return Err(Error::Data(format!("class {k} has no CE entry")));
    }
    if let Some(e) = source.iter().chain(target).find(|e| e.label >= num_classes) {
        return Err(Error::Data(format!("label {} has no CE entry", e.label)));
    }
    let split = few_shot_split(target, num_classes, cfg.shots, cfg.test_per_class, rng)?;

    let mut corpus: Vec<&str> = source.iter().chain(&split.train).map(|e| e.text.as_str()).collect();
    for c in ce.values() {
        corpus.extend(c.texts());
    }
    let vocab = Vocab::build(&corpus, cfg.min_freq)?;
    Ok(Prepared {
        source: encode_examples(source, &vocab, cfg.max_len)?,
        train: encode_examples(&split.train, &vocab, cfg.max_len)?,
        valid: encode_examples(&split.valid, &vocab, cfg.max_len)?,
        test: encode_examples(&split.test, &vocab, cfg.max_len)?,
        ce: encode_ce(ce, &vocab, cfg.ce_max_len)?,
        num_classes,
        vocab,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &[Matrix]) -> Self {
        let zeros: Vec<Matrix> = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }
}

/// Bias-corrected Adam update of every tensor.
pub fn adam_update(
    params: &mut [Matrix],
    names: &[String],
    grads: &[Matrix],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::Shape(format!("gradient shape mismatch for `{}`", names[i])));
        }
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for `{}`", names[i])));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(state.m.iter_mut().zip(state.v.iter_mut())) {
        for (((p, &g), m), v) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Adam step on a model; the PAD embedding row is re-zeroed afterwards.
pub fn adam_step(model: &mut Model, grads: &[Matrix], state: &mut AdamState, lr: f64) -> Result<()> {
    let names = model.names().to_vec();
    adam_update(model.tensors_mut(), &names, grads, state, lr)?;
    let e = model.embedding_index();
    EmbeddingTable::zero_pad_row(&mut model.tensors_mut()[e]);
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Main,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Main => "main",
        }
    }

    pub fn objective(self) -> Objective {
        match self {
            Phase::Pretrain => Objective::Pretrain,
            Phase::Main => Objective::Full,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub phase: Phase,
    pub breakdown: LossBreakdown,
    /// Value of the objective actually differentiated this step.
    pub objective: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    pub mean_objective: f64,
    pub mean_ce_source: f64,
    pub valid: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn steps_csv(&self) -> String {
        let mut out = String::from("step,phase,l_c1,l_c2,l_c3,l_s1,l_s2,ce_source,ce_target,total,objective\n");
        for s in &self.steps {
            let b = &s.breakdown;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{},{}",
                s.step,
                s.phase.name(),
                b.l_c1,
                b.l_c2,
                b.l_c3,
                b.l_s1,
                b.l_s2,
                b.ce_source,
                b.ce_target,
                b.total,
                s.objective
            )
            .expect("string write");
        }
        out
    }

    pub fn epochs_csv(&self) -> String {
        let mut out = String::from("epoch,phase,mean_objective,mean_ce_source,valid_acc,valid_mp,valid_mr,valid_f1\n");
        for e in &self.epochs {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                e.epoch,
                e.phase.name(),
                e.mean_objective,
                e.mean_ce_source,
                e.valid.acc,
                e.valid.mp,
                e.valid.mr,
                e.valid.f1
            )
            .expect("string write");
        }
        out
    }
}

/// State of one training run. All randomness comes from `rng`, consumed in
/// the order: target split, initialization, per-epoch batch sampling.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub data: &'a Prepared,
    pub model: Model,
    pub adam: AdamState,
    pub log: TrainLog,
    rng: ChaCha8Rng,
    tape: Tape,
    source_labels: Vec<usize>,
    target_by_class: Vec<Vec<usize>>,
    ce_labels: BTreeSet<usize>,
    epoch: usize,
}

/// Best main-phase epoch by target-validation macro-F1.
#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    pub epoch: usize,
    pub valid_f1: f64,
    pub model: Model,
    pub adam: AdamState,
}

impl<'a> Trainer<'a> {
    /// `rng` must already have been used for the split in [`prepare`].
    pub fn new(config: TrainConfig, data: &'a Prepared, mut rng: ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let dims = ModelDims {
            vocab_size: data.vocab.len(),
            embed_dim: config.embed_dim,
            content_dim: config.content_dim,
            style_dim: config.style_dim,
            num_classes: data.num_classes,
        };
        let model = Model::new(dims, &mut rng)?;
        let mut target_by_class = vec![Vec::new(); data.num_classes];
        for (i, s) in data.train.iter().enumerate() {
            target_by_class[s.label].push(i);
        }
        Ok(Trainer {
            adam: AdamState::new(model.tensors()),
            source_labels: data.source.iter().map(|s| s.label).collect(),
            ce_labels: data.ce.keys().copied().collect(),
            config,
            data,
            model,
            log: TrainLog::default(),
            rng,
            tape: Tape::new(),
            target_by_class,
            epoch: 0,
        })
    }

    fn resolve(&self, pair: &PairedTriple) -> [TripleInput<'a>; 2] {
        let data = self.data;
        pair.map(|t| TripleInput {
            label: t.label,
            source: &data.source[t.source].seq,
            target: &data.train[t.target].seq,
            ce: &data.ce[&t.label],
        })
    }

    /// One optimization step on a batch; returns the step record.
    pub fn step(&mut self, batch: &[PairedTriple], phase: Phase) -> Result<StepRecord> {
        let weights = self.config.effective_weights();
        let inputs: Vec<[TripleInput<'a>; 2]> = batch.iter().map(|p| self.resolve(p)).collect();
        self.tape.reset();
        let bound = self.model.bind(&mut self.tape);
        let graph = batch_graph(&mut self.tape, &bound, &inputs)?;
        let objective = objective_on_tape(&mut self.tape, &graph.parts, &weights, phase.objective())?;
        self.tape.backward(objective)?;
        let grads: Vec<Matrix> = bound.vars.iter().map(|&v| self.tape.grad(v)).collect();
        let tape = &self.tape;
        let parts = graph.parts.map(|v| tape.scalar(v));
        let breakdown = total_loss(&parts, &self.config.weights(), self.config.ablation)?;
        let record = StepRecord {
            step: self.log.steps.len() + 1,
            phase,
            breakdown,
            objective: self.tape.scalar(objective),
        };
        if !record.objective.is_finite() {
            return Err(Error::Numeric(format!("objective is {} at step {}", record.objective, record.step)));
        }
        adam_step(&mut self.model, &grads, &mut self.adam, self.config.lr)?;
        self.log.steps.push(record.clone());
        Ok(record)
    }

    fn epoch(&mut self, phase: Phase) -> Result<&EpochRecord> {
        let batches = sample_epoch(
            &self.source_labels,
            &self.target_by_class,
            &self.ce_labels,
            self.config.batch_size,
            &mut self.rng,
        )?;
        let (mut obj, mut ce) = (0.0, 0.0);
        for batch in &batches {
            let r = self.step(batch, phase)?;
            obj += r.objective;
            ce += r.breakdown.ce_source;
        }
        let n = batches.len().max(1) as f64;
        self.epoch += 1;
        let (_, valid) = evaluate(&self.model, &self.data.valid)?;
        self.log.epochs.push(EpochRecord {
            epoch: self.epoch,
            phase,
            mean_objective: obj / n,
            mean_ce_source: ce / n,
            valid,
        });
        Ok(self.log.epochs.last().expect("just pushed"))
    }

    /// Optimizes `beta_1 ce_source + beta_2 ce_target + lambda_c3 l_c3`.
    pub fn run_pretrain(&mut self) -> Result<()> {
        for _ in 0..self.config.pretrain_epochs {
            self.epoch(Phase::Pretrain)?;
        }
        Ok(())
    }

    /// Optimizes the full weighted objective and keeps the epoch with the
    /// best validation macro-F1 (earliest on ties). With no main epochs the
    /// current model is returned.
    pub fn run_main(&mut self) -> Result<Selection> {
        let mut best = Selection {
            epoch: self.epoch,
            valid_f1: self.log.epochs.last().map_or(f64::NEG_INFINITY, |e| e.valid.f1),
            model: self.model.clone(),
            adam: self.adam.clone(),
        };
        for i in 0..self.config.main_epochs {
            let f1 = self.epoch(Phase::Main)?.valid.f1;
            if i == 0 || f1 > best.valid_f1 {
                best = Selection {
                    epoch: self.epoch,
                    valid_f1: f1,
                    model: self.model.clone(),
                    adam: self.adam.clone(),
                };
            }
        }
        Ok(best)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

/// Serialized model plus everything needed to resume or check it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub dims: ModelDims,
    pub vocab_hash: String,
    pub best_epoch: usize,
    pub config: TrainConfig,
    pub tensors: Vec<NamedTensor>,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn new(model: &Model, vocab: &Vocab, config: &TrainConfig, best_epoch: usize, adam: &AdamState) -> Self {
        Checkpoint {
            dims: model.dims().clone(),
            vocab_hash: vocab.content_hash(),
            best_epoch,
            config: config.clone(),
            tensors: model
                .names()
                .iter()
                .zip(model.tensors())
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                    data: t.data().to_vec(),
                })
                .collect(),
            adam: adam.clone(),
        }
    }

    pub fn model(&self) -> Result<Model> {
        let named = self
            .tensors
            .iter()
            .map(|t| Ok((t.name.clone(), Matrix::from_vec(t.rows, t.cols, t.data.clone())?)))
            .collect::<Result<Vec<_>>>()?;
        Model::from_named(self.dims.clone(), named)
    }

    /// Fails unless `vocab` is the vocabulary the model was trained with.
    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        let hash = vocab.content_hash();
        if hash != self.vocab_hash {
            return Err(Error::Compatibility(format!(
                "vocabulary hash {hash} does not match checkpoint hash {}",
                self.vocab_hash
            )));
        }
        if vocab.len() != self.dims.vocab_size {
            return Err(Error::Compatibility(format!(
                "vocabulary has {} entries, checkpoint expects {}",
                vocab.len(),
                self.dims.vocab_size
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string(self).expect("serializable"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }
}

/// Result of a complete run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub selection: Selection,
    pub log: TrainLog,
    pub test: Metrics,
    pub checkpoint: Checkpoint,
}

/// Split, initialize, pretrain, train, select, and evaluate on the target
/// test split.
pub fn train(
    config: &TrainConfig,
    source: &[Example],
    target: &[Example],
    ce: &BTreeMap<usize, CeTexts>,
) -> Result<(Prepared, TrainOutcome)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let data = prepare(config, source, target, ce, &mut rng)?;
    let outcome = train_prepared(config, &data, rng)?;
    Ok((data, outcome))
}

pub fn train_prepared(config: &TrainConfig, data: &Prepared, rng: ChaCha8Rng) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone(), data, rng)?;
    trainer.run_pretrain()?;
    let selection = trainer.run_main()?;
    let (_, test) = evaluate(&selection.model, &data.test)?;
    let checkpoint = Checkpoint::new(&selection.model, &data.vocab, config, selection.epoch, &selection.adam);
    Ok(TrainOutcome {
        selection,
        log: trainer.log,
        test,
        checkpoint,
    })
}

/// Writes `checkpoint.json`, `vocab.tsv`, `steps.csv` and `epochs.csv`.
pub fn write_run(dir: &Path, data: &Prepared, outcome: &TrainOutcome) -> Result<()> {
    outcome.checkpoint.save(&dir.join("checkpoint.json"))?;
    data.vocab.save(&dir.join("vocab.tsv"))?;
    write_file(&dir.join("steps.csv"), outcome.log.steps_csv())?;
    write_file(&dir.join("epochs.csv"), outcome.log.epochs_csv())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic_corpus, CorpusSpec};

    fn tiny_model() -> Model {
        let dims = ModelDims {
            vocab_size: 5,
            embed_dim: 3,
            content_dim: 2,
            style_dim: 2,
            num_classes: 2,
        };
        Model::new(dims, &mut ChaCha8Rng::seed_from_u64(0)).unwrap()
    }

    #[test]
    fn first_adam_step_moves_by_lr() {
        let mut model = tiny_model();
        let before = model.clone();
        let grads: Vec<Matrix> = model.tensors().iter().map(|t| Matrix::filled(t.rows(), t.cols(), 1.0)).collect();
        let mut state = AdamState::new(model.tensors());
        adam_step(&mut model, &grads, &mut state, 1e-3).unwrap();
        let e = model.embedding_index();
        for (i, (a, b)) in before.tensors().iter().zip(model.tensors()).enumerate() {
            for (r, (x, y)) in a.data().iter().zip(b.data()).enumerate() {
                if i == e && r < a.cols() {
                    assert_eq!(*y, 0.0, "PAD row stays zero");
                } else {
                    assert!(((x - y) - 1e-3).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn zero_grads_leave_params() {
        let mut model = tiny_model();
        let before = model.clone();
        let grads: Vec<Matrix> = model.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        let mut state = AdamState::new(model.tensors());
        adam_step(&mut model, &grads, &mut state, 1e-3).unwrap();
        assert_eq!(model, before);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut model = tiny_model();
        let mut grads: Vec<Matrix> = model.tensors().iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        grads[3].data_mut()[0] = f64::NAN;
        let name = model.names()[3].clone();
        let mut state = AdamState::new(model.tensors());
        let err = adam_step(&mut model, &grads, &mut state, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains(&name)), "{err}");
        assert_eq!(state.step, 0);
    }

    #[test]
    fn config_validation_and_paths() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "batch_size = 4\nsource = \"data/s.jsonl\"\nablation = \"dcs\"\n").unwrap();
        let cfg = TrainConfig::load(&p).unwrap();
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.source, dir.path().join("data/s.jsonl"));
        assert_eq!(cfg.effective_weights().lambda_s1, 0.0);
        assert_eq!(cfg.effective_weights().lambda_s2, 0.0);

        std::fs::write(&p, "batch_size = 3\n").unwrap();
        assert!(matches!(TrainConfig::load(&p), Err(Error::Config { ref field, .. }) if field == "batch_size"));
        std::fs::write(&p, "beta_2 = -1.0\n").unwrap();
        assert!(matches!(TrainConfig::load(&p), Err(Error::Config { ref field, .. }) if field == "beta_2"));
        std::fs::write(&p, "bogus = 1\n").unwrap();
        assert!(matches!(TrainConfig::load(&p), Err(Error::Config { .. })));
        assert_eq!(toml::from_str::<TrainConfig>(&TrainConfig::default().to_toml()).unwrap(), TrainConfig::default());
    }

    fn micro() -> (TrainConfig, Vec<Example>, Vec<Example>, BTreeMap<usize, CeTexts>) {
        let spec = CorpusSpec {
            num_classes: 3,
            source_per_class: 6,
            target_shots: 1,
            target_valid_per_class: 2,
            target_test_per_class: 2,
            ..CorpusSpec::default()
        };
        let c = generate_synthetic_corpus(&spec).unwrap();
        let cfg = TrainConfig {
            test_per_class: 2,
            batch_size: 4,
            pretrain_epochs: 1,
            main_epochs: 2,
            embed_dim: 6,
            content_dim: 4,
            style_dim: 2,
            ..TrainConfig::default()
        };
        let ce = c.ce.iter().map(|t| (t.label, t.clone())).collect();
        (cfg, c.source, c.target, ce)
    }

    #[test]
    fn runs_are_bitwise_reproducible() {
        let (cfg, s, t, ce) = micro();
        let (_, a) = train(&cfg, &s, &t, &ce).unwrap();
        let (_, b) = train(&cfg, &s, &t, &ce).unwrap();
        assert_eq!(a.log.steps_csv(), b.log.steps_csv());
        assert_eq!(a.log.epochs_csv(), b.log.epochs_csv());
        let ja = serde_json::to_string(&a.checkpoint).unwrap();
        assert_eq!(ja, serde_json::to_string(&b.checkpoint).unwrap());
        let back: Checkpoint = serde_json::from_str(&ja).unwrap();
        assert_eq!(back, a.checkpoint);
        assert_eq!(back.model().unwrap(), a.selection.model);
        assert_eq!(a.log.epochs.len(), 3);
        assert_eq!(a.log.steps.len(), 3 * 5);
    }

    #[test]
    fn pretrain_objective_has_three_terms() {
        let (cfg, s, t, ce) = micro();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let data = prepare(&cfg, &s, &t, &ce, &mut rng).unwrap();
        let mut tr = Trainer::new(cfg.clone(), &data, rng).unwrap();
        tr.run_pretrain().unwrap();
        let w = cfg.weights();
        for r in &tr.log.steps {
            let b = &r.breakdown;
            let expect = w.beta_1 * b.ce_source + w.beta_2 * b.ce_target + w.lambda_c3 * b.l_c3;
            assert!((r.objective - expect).abs() <= 1e-9 * expect.abs().max(1.0));
            assert!(b.l_c1 > 0.0 && b.l_s1 > 0.0, "other terms still measured");
        }
        let sel = tr.run_main().unwrap();
        for r in tr.log.steps.iter().filter(|r| r.phase == Phase::Main) {
            assert!((r.objective - r.breakdown.total).abs() <= 1e-9 * r.objective.abs().max(1.0));
        }
        let best = tr
            .log
            .epochs
            .iter()
            .filter(|e| e.phase == Phase::Main)
            .fold(f64::NEG_INFINITY, |m, e| m.max(e.valid.f1));
        assert_eq!(sel.valid_f1, best);
        let first = tr.log.epochs.iter().find(|e| e.phase == Phase::Main && e.valid.f1 == best).unwrap();
        assert_eq!(sel.epoch, first.epoch);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let (mut cfg, s, t, ce) = micro();
        cfg.pretrain_epochs = 0;
        cfg.main_epochs = 0;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let data = prepare(&cfg, &s, &t, &ce, &mut rng).unwrap();
        let mut tr = Trainer::new(cfg, &data, rng).unwrap();
        let init = tr.model.clone();
        tr.run_pretrain().unwrap();
        let sel = tr.run_main().unwrap();
        assert_eq!(sel.model, init);
        assert!(tr.log.steps.is_empty());
    }

    #[test]
    fn classification_never_reaches_ce_tower() {
        let (mut cfg, s, t, ce) = micro();
        cfg.set_weights(LossWeights {
            lambda_c1: 0.0,
            lambda_c2: 0.0,
            lambda_c3: 0.0,
            lambda_s1: 0.0,
            lambda_s2: 0.0,
            beta_1: 1.0,
            beta_2: 1.0,
        });
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let data = prepare(&cfg, &s, &t, &ce, &mut rng).unwrap();
        let mut tr = Trainer::new(cfg, &data, rng).unwrap();
        let before = tr.model.clone();
        tr.run_pretrain().unwrap();
        for i in before.ce_indices() {
            assert_eq!(before.tensors()[i], tr.model.tensors()[i], "{}", before.names()[i]);
        }
    }

    #[test]
    fn vocab_mismatch_refused() {
        let (cfg, s, t, ce) = micro();
        let (data, out) = train(&cfg, &s, &t, &ce).unwrap();
        out.checkpoint.check_vocab(&data.vocab).unwrap();
        let other = Vocab::build(&["a b c"], 1).unwrap();
        assert!(matches!(out.checkpoint.check_vocab(&other), Err(Error::Compatibility(_))));
    }
}
