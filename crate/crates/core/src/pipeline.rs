//! The commands behind the `dlccp` binary, as library functions.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{grad_check, GradCheckReport};
use crate::data::{
    encode_ce, encode_examples, generate_synthetic_corpus, load_ce_file, load_dataset, load_factors,
    sample_epoch, write_ce_file, write_dataset, write_factors, CorpusSpec, Example,
};
use crate::error::{read_to_string, write_file, Error, Result};
use crate::evaluation::{disentanglement_probe, dump_representations, evaluate, Metrics, MultiSeedReport, ProbeReport};
use crate::losses::{batch_graph, objective_on_tape, Ablation, LossWeights, Objective, TripleInput};
use crate::model::{BoundModel, Model, ModelDims};
use crate::text::{EmbeddingTable, Vocab};
use crate::training::{prepare, train_prepared, write_run, Checkpoint, TrainConfig};

pub const GRADCHECK_TOLERANCE: f64 = 1e-3;
pub const GRADCHECK_STEP: f64 = 1e-4;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(|e| Error::io(path, e))
}

/// Record of one command invocation: what went in and what came out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    /// Absolute input path to sha256 of its contents.
    pub inputs: BTreeMap<String, String>,
    /// sha256 over the sorted `(path, hash)` pairs of `inputs`.
    pub input_hash: String,
    pub outputs: Vec<String>,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new<C: Serialize>(command: &str, config: &C, seeds: Vec<u64>, inputs: &[&Path]) -> Result<Self> {
        let mut hashes = BTreeMap::new();
        for p in inputs {
            hashes.insert(absolute(p)?.display().to_string(), sha256_file(p)?);
        }
        Ok(RunManifest {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("serializable"),
            seeds,
            input_hash: combined_hash(&hashes),
            inputs: hashes,
            outputs: Vec::new(),
            created_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, serde_json::to_string_pretty(self).expect("serializable"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            message: e.to_string(),
        })
    }

    /// Re-hashes every input and fails on the first mismatch.
    pub fn verify(&self) -> Result<()> {
        for (path, want) in &self.inputs {
            let got = sha256_file(Path::new(path))?;
            if &got != want {
                return Err(Error::Compatibility(format!("{path}: hash {got} differs from recorded {want}")));
            }
        }
        if combined_hash(&self.inputs) != self.input_hash {
            return Err(Error::Compatibility("combined input hash does not match".into()));
        }
        Ok(())
    }
}

fn combined_hash(inputs: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (p, v) in inputs {
        h.update(p.as_bytes());
        h.update([0]);
        h.update(v.as_bytes());
        h.update(*b"\n");
    }
    hex::encode(h.finalize())
}

pub fn load_corpus_spec(path: &Path) -> Result<CorpusSpec> {
    let text = read_to_string(path)?;
    let spec: CorpusSpec = toml::from_str(&text).map_err(|e| {
        let field = e.message().split('`').nth(1).unwrap_or("spec").to_string();
        Error::config(field, e.to_string())
    })?;
    spec.validate()?;
    Ok(spec)
}

/// Files written by [`cmd_gen`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusFiles {
    pub source: PathBuf,
    pub target: PathBuf,
    pub ce: PathBuf,
    pub factors: PathBuf,
    pub manifest: PathBuf,
}

impl CorpusFiles {
    pub fn in_dir(dir: &Path) -> Self {
        CorpusFiles {
            source: dir.join("source.jsonl"),
            target: dir.join("target.jsonl"),
            ce: dir.join("ce.jsonl"),
            factors: dir.join("factors.tsv"),
            manifest: dir.join("manifest.json"),
        }
    }
}

/// Generates the synthetic corpus into `out`. Without a spec file the
/// default spec is used.
pub fn cmd_gen(spec_path: Option<&Path>, out: &Path) -> Result<CorpusFiles> {
    let spec = match spec_path {
        Some(p) => load_corpus_spec(p)?,
        None => CorpusSpec::default(),
    };
    let inputs: Vec<&Path> = spec_path.into_iter().collect();
    let mut manifest = RunManifest::new("gen", &spec, vec![spec.seed], &inputs)?;
    let corpus = generate_synthetic_corpus(&spec)?;
    let files = CorpusFiles::in_dir(out);
    write_dataset(&files.source, &corpus.source)?;
    write_dataset(&files.target, &corpus.target)?;
    write_ce_file(&files.ce, &corpus.ce)?;
    write_factors(&files.factors, &corpus.factors)?;
    for p in [&files.source, &files.target, &files.ce, &files.factors] {
        manifest.outputs.push(absolute(p)?.display().to_string());
    }
    manifest.save(&files.manifest)?;
    Ok(files)
}

/// Command-line overrides of a training config.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainOverrides {
    pub shots: Option<usize>,
    pub ablation: Option<Ablation>,
    pub seeds: Option<Vec<u64>>,
    pub out_dir: Option<PathBuf>,
}

/// Config echo stored in training manifests.
#[derive(Serialize)]
struct TrainEcho<'a> {
    config: &'a TrainConfig,
    effective_weights: LossWeights,
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub dir: PathBuf,
    pub best_epoch: usize,
    pub test: Metrics,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub runs: Vec<SeedRun>,
    pub report: MultiSeedReport,
    pub manifest: PathBuf,
}

type Inputs = (Vec<Example>, Vec<Example>, BTreeMap<usize, crate::data::CeTexts>);

fn load_inputs(cfg: &TrainConfig) -> Result<Inputs> {
    let ce = load_ce_file(&cfg.ce)?;
    let k = ce.keys().next_back().map_or(0, |k| k + 1);
    Ok((load_dataset(&cfg.source, Some(k))?, load_dataset(&cfg.target, Some(k))?, ce))
}

/// Trains one model per seed. Each seed gets `out_dir/seed-<seed>/` with
/// the checkpoint, vocabulary, logs, its target split and test metrics.
/// The manifest is written before any training starts.
pub fn cmd_train(config_path: &Path, overrides: &TrainOverrides) -> Result<TrainSummary> {
    let mut cfg = TrainConfig::load(config_path)?;
    if let Some(n) = overrides.shots {
        cfg.shots = n;
    }
    if let Some(a) = overrides.ablation {
        cfg.ablation = a;
    }
    if let Some(dir) = &overrides.out_dir {
        cfg.out_dir = dir.clone();
    }
    cfg.validate()?;
    let seeds = overrides.seeds.clone().unwrap_or_else(|| vec![cfg.seed]);
    if seeds.is_empty() {
        return Err(Error::config("seeds", "at least one seed is required"));
    }

    let echo = TrainEcho {
        config: &cfg,
        effective_weights: cfg.effective_weights(),
    };
    let mut manifest = RunManifest::new("train", &echo, seeds.clone(), &[config_path, &cfg.source, &cfg.target, &cfg.ce])?;
    let seed_dirs: Vec<PathBuf> = seeds.iter().map(|s| cfg.out_dir.join(format!("seed-{s}"))).collect();
    for d in &seed_dirs {
        manifest.outputs.push(absolute(&d.join("checkpoint.json"))?.display().to_string());
    }
    let manifest_path = cfg.out_dir.join("manifest.json");
    manifest.save(&manifest_path)?;

    let (source, target, ce) = load_inputs(&cfg)?;
    let mut runs = Vec::new();
    for (&seed, dir) in seeds.iter().zip(seed_dirs) {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = prepare(&run_cfg, &source, &target, &ce, &mut rng)?;
        let split_examples = |samples: &[crate::data::Sample]| -> Vec<Example> {
            samples
                .iter()
                .map(|s| Example {
                    text: s.seq.decode(&data.vocab),
                    label: s.label,
                    domain: s.domain,
                })
                .collect()
        };
        let outcome = train_prepared(&run_cfg, &data, rng)?;
        write_run(&dir, &data, &outcome)?;
        write_dataset(&dir.join("target_train.jsonl"), &split_examples(&data.train))?;
        write_dataset(&dir.join("target_valid.jsonl"), &split_examples(&data.valid))?;
        write_dataset(&dir.join("target_test.jsonl"), &split_examples(&data.test))?;
        write_file(
            &dir.join("test_metrics.json"),
            serde_json::to_string_pretty(&outcome.test).expect("serializable"),
        )?;
        runs.push(SeedRun {
            seed,
            dir,
            best_epoch: outcome.selection.epoch,
            test: outcome.test,
        });
    }
    let report = MultiSeedReport::new(runs.iter().map(|r| (format!("seed-{}", r.seed), r.test.clone())).collect());
    write_file(&cfg.out_dir.join("report.json"), report.to_json())?;
    Ok(TrainSummary {
        runs,
        report,
        manifest: manifest_path,
    })
}

/// Loads a checkpoint and its vocabulary (by default `vocab.tsv` next to
/// the checkpoint), refusing a vocabulary with a different hash.
pub fn load_checkpoint(path: &Path, vocab: Option<&Path>) -> Result<(Checkpoint, Model, Vocab)> {
    let ckpt = Checkpoint::load(path)?;
    let vocab_path = match vocab {
        Some(v) => v.to_path_buf(),
        None => path.parent().unwrap_or(Path::new("")).join("vocab.tsv"),
    };
    let vocab = Vocab::load(&vocab_path)?;
    ckpt.check_vocab(&vocab)?;
    let model = ckpt.model()?;
    Ok((ckpt, model, vocab))
}

/// Evaluates each checkpoint on `data` and aggregates across them.
pub fn cmd_eval(checkpoints: &[PathBuf], data: &Path, vocab: Option<&Path>) -> Result<MultiSeedReport> {
    if checkpoints.is_empty() {
        return Err(Error::config("checkpoint", "at least one checkpoint is required"));
    }
    let mut runs = BTreeMap::new();
    for (i, path) in checkpoints.iter().enumerate() {
        let (ckpt, model, vocab) = load_checkpoint(path, vocab)?;
        let examples = load_dataset(data, Some(ckpt.dims.num_classes))?;
        let samples = encode_examples(&examples, &vocab, ckpt.config.max_len)?;
        let (_, metrics) = evaluate(&model, &samples)?;
        runs.insert(format!("{i:02}:{}", path.display()), metrics);
    }
    Ok(MultiSeedReport::new(runs))
}

/// Writes the representation dump and, given a factor file, runs the
/// disentanglement probe on it.
pub fn cmd_dump(
    checkpoint: &Path,
    data: &Path,
    ce: &Path,
    vocab: Option<&Path>,
    out: &Path,
    factors: Option<&Path>,
) -> Result<(usize, Option<ProbeReport>)> {
    let (ckpt, model, vocab) = load_checkpoint(checkpoint, vocab)?;
    let examples = load_dataset(data, Some(ckpt.dims.num_classes))?;
    let samples = encode_examples(&examples, &vocab, ckpt.config.max_len)?;
    let bundles = encode_ce(&load_ce_file(ce)?, &vocab, ckpt.config.ce_max_len)?;
    let rows = dump_representations(&model, &samples, &bundles, out)?;
    let probe = match factors {
        Some(f) => Some(disentanglement_probe(&rows, &load_factors(f)?)?),
        None => None,
    };
    Ok((rows.len(), probe))
}

/// Gradient check of the full weighted objective on one batch of a
/// two-class micro corpus (`d_c = 6`, `d_s = 3`, batch size 2).
pub fn cmd_gradcheck(seed: u64) -> Result<GradCheckReport> {
    gradcheck_objective(seed, &LossWeights::default(), GRADCHECK_STEP)
}

/// [`cmd_gradcheck`] with explicit weights and finite-difference step.
pub fn gradcheck_objective(seed: u64, weights: &LossWeights, step: f64) -> Result<GradCheckReport> {
    let spec = CorpusSpec {
        num_classes: 2,
        source_per_class: 2,
        target_shots: 1,
        target_valid_per_class: 0,
        target_test_per_class: 1,
        seed,
        ..CorpusSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec)?;
    let mut texts: Vec<&str> = corpus.source.iter().chain(&corpus.target).map(|e| e.text.as_str()).collect();
    for c in &corpus.ce {
        texts.extend(c.texts());
    }
    let vocab = Vocab::build(&texts, 1)?;
    let source = encode_examples(&corpus.source, &vocab, 32)?;
    let target = encode_examples(&corpus.target, &vocab, 32)?;
    let ce_map = corpus.ce.iter().map(|c| (c.label, c.clone())).collect();
    let bundles = encode_ce(&ce_map, &vocab, 16)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims = ModelDims {
        vocab_size: vocab.len(),
        embed_dim: 4,
        content_dim: 6,
        style_dim: 3,
        num_classes: 2,
    };
    let mut model = Model::new(dims, &mut rng)?;
    // At initialization biases are zero and every document maps to nearly the
    // same content vector; d(x, x̂) ~ 1e-3 makes the central difference itself
    // inaccurate. Check at a generic point instead.
    for t in model.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    let e = model.embedding_index();
    EmbeddingTable::zero_pad_row(&mut model.tensors_mut()[e]);
    let labels: Vec<usize> = source.iter().map(|s| s.label).collect();
    let mut by_class = vec![Vec::new(); 2];
    for (i, t) in target.iter().enumerate() {
        by_class[t.label].push(i);
    }
    let batches = sample_epoch(&labels, &by_class, &bundles.keys().copied().collect(), 2, &mut rng)?;
    let batch: Vec<[TripleInput<'_>; 2]> = batches[0]
        .iter()
        .map(|pair| {
            pair.map(|t| TripleInput {
                label: t.label,
                source: &source[t.source].seq,
                target: &target[t.target].seq,
                ce: &bundles[&t.label],
            })
        })
        .collect();
    grad_check(
        |tape, vars| {
            let bound = BoundModel::from_vars(&model, vars.to_vec());
            let graph = batch_graph(tape, &bound, &batch)?;
            objective_on_tape(tape, &graph.parts, weights, Objective::Full)
        },
        model.tensors(),
        step,
    )
}

pub fn cmd_verify(manifest: &Path) -> Result<RunManifest> {
    let m = RunManifest::load(manifest)?;
    m.verify()?;
    Ok(m)
}
