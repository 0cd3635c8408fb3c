//! File-level orchestration behind the command-line tool.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::classifier::{pretrain, ClassifierRole, StyleClassifier};
use crate::config::{Precision, RunConfig};
use crate::corpus::{load_corpus, load_references, load_split, Batch, Example, StyleLabel, Vocabulary};
use crate::error::{Error, Result};
use crate::eval::embed::{embedding_rows, write_embeddings, Targets};
use crate::eval::{bleu_corpus, perplexity, transfer_accuracy, KneserNeyLm, MetricReport};
use crate::generator::Generator;
use crate::losses::{train, TrainReport};
use crate::synthetic::{make_synthetic, write_corpus};
use crate::tensor::Float;

/// Batch size used for inference-only passes.
const INFER_BATCH: usize = 128;

/// Locations of every artifact inside a work directory.
#[derive(Clone, Debug)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: &Path) -> Self {
        Artifacts { dir: dir.to_path_buf() }
    }

    pub fn vocab(&self) -> PathBuf {
        self.dir.join("vocab.txt")
    }

    pub fn classifier(&self, role: ClassifierRole) -> PathBuf {
        self.dir.join(format!("{}.ck", role.as_str()))
    }

    pub fn lm(&self) -> PathBuf {
        self.dir.join("lm.arpa")
    }

    pub fn generator(&self) -> PathBuf {
        self.dir.join("generator.ck")
    }

    pub fn config(&self) -> PathBuf {
        self.dir.join("config.toml")
    }
}

fn require(path: &Path, made_by: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::InvalidState(format!(
            "missing {} (run `{made_by}` first)",
            path.display()
        )))
    }
}

/// Distinct seeds for the three pretrained classifiers.
pub fn classifier_seed(base: u64, role: ClassifierRole) -> u64 {
    let offset = match role {
        ClassifierRole::StyleMarker => 101,
        ClassifierRole::LossClassifier => 202,
        ClassifierRole::EvalClassifier => 303,
    };
    base.wrapping_mul(1000).wrapping_add(offset)
}

#[derive(Clone, Debug)]
pub struct PretrainSummary {
    pub vocab_size: usize,
    /// `(role, checkpoint, best held-out accuracy %)`.
    pub classifiers: Vec<(ClassifierRole, PathBuf, f64)>,
    pub lm: PathBuf,
}

/// Builds the vocabulary, pretrains the style marker and both classifiers,
/// and estimates the evaluation language model.
pub fn cmd_pretrain(cfg: &RunConfig) -> Result<PretrainSummary> {
    match cfg.train.precision {
        Precision::F32 => pretrain_as::<f32>(cfg),
        Precision::F64 => pretrain_as::<f64>(cfg),
    }
}

fn pretrain_as<F: Float>(cfg: &RunConfig) -> Result<PretrainSummary> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.paths.work_dir);
    fs::create_dir_all(&art.dir).map_err(|e| Error::io(&art.dir, e))?;
    let train_set = load_split(&cfg.paths.data_dir, "train")?;
    let dev_set = load_split(&cfg.paths.data_dir, "dev").ok();
    let vocab = Vocabulary::build(&train_set, cfg.model.min_freq)?;
    vocab.save(&art.vocab())?;
    cfg.save(&art.config())?;

    let mut classifiers = Vec::new();
    for role in [
        ClassifierRole::StyleMarker,
        ClassifierRole::LossClassifier,
        ClassifierRole::EvalClassifier,
    ] {
        let seed = classifier_seed(cfg.train.seed, role);
        let (model, report) = pretrain::<F>(
            role,
            cfg.classifier_dims(vocab.len()),
            &train_set,
            dev_set.as_deref(),
            &vocab,
            &cfg.pretrain_options(seed),
        )?;
        let path = art.classifier(role);
        model.save(&path)?;
        log::info!("{role}: held-out accuracy {:.2}%", report.best_dev_accuracy);
        classifiers.push((role, path, report.best_dev_accuracy));
    }

    let lines: Vec<String> = train_set.iter().map(Example::text).collect();
    let lm = KneserNeyLm::train(&lines, crate::eval::lm::DEFAULT_ORDER)?;
    lm.save(&art.lm())?;
    Ok(PretrainSummary {
        vocab_size: vocab.len(),
        classifiers,
        lm: art.lm(),
    })
}

fn load_classifier<F: Float>(art: &Artifacts, role: ClassifierRole) -> Result<StyleClassifier<F>> {
    let path = art.classifier(role);
    require(&path, "pretrain")?;
    let model = StyleClassifier::load(&path)?;
    if model.role != role {
        return Err(Error::Checkpoint(format!(
            "{} holds a {} but a {role} was expected",
            path.display(),
            model.role
        )));
    }
    Ok(model)
}

fn load_vocab(art: &Artifacts) -> Result<Vocabulary> {
    require(&art.vocab(), "pretrain")?;
    Vocabulary::load(&art.vocab())
}

/// Trains the generator against the pretrained, frozen classifiers.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainReport> {
    match cfg.train.precision {
        Precision::F32 => train_as::<f32>(cfg),
        Precision::F64 => train_as::<f64>(cfg),
    }
}

fn train_as<F: Float>(cfg: &RunConfig) -> Result<TrainReport> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.paths.work_dir);
    let vocab = load_vocab(&art)?;
    let marker = load_classifier::<F>(&art, ClassifierRole::StyleMarker)?;
    let classifier = load_classifier::<F>(&art, ClassifierRole::LossClassifier)?;
    let data = load_split(&cfg.paths.data_dir, "train")?;
    cfg.save(&art.config())?;
    let w = cfg.weights();
    log::info!(
        "loss weights: lambda1={} lambda2={} lambda3={} lambda4={}",
        w.self_recon,
        w.cycle,
        w.content,
        w.style
    );
    let mut gen = Generator::<F>::new(
        cfg.generator_dims(vocab.len()),
        cfg.generator_ablation(),
        cfg.train.seed,
    )?;
    let report = train(&mut gen, Some(&marker), Some(&classifier), &data, &vocab, &cfg.train_options())?;
    let meta = BTreeMap::from([("seed".to_string(), cfg.train.seed.to_string())]);
    gen.to_checkpoint(meta).save(&art.generator())?;
    Ok(report)
}

fn load_generator<F: Float>(art: &Artifacts) -> Result<Generator<F>> {
    require(&art.generator(), "train")?;
    Generator::from_checkpoint(&Checkpoint::load(&art.generator())?)
}

/// Greedy transfer of tokenized sentences towards `target`.
pub fn transfer_sentences<F: Float>(
    gen: &Generator<F>,
    marker: &StyleClassifier<F>,
    vocab: &Vocabulary,
    sentences: &[Vec<String>],
    target: StyleLabel,
    max_len: usize,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(sentences.len());
    for chunk in sentences.chunks(INFER_BATCH) {
        let exs: Vec<Example> = chunk
            .iter()
            .map(|t| Example {
                tokens: t.clone(),
                style: target.flip(),
            })
            .collect();
        let refs: Vec<&Example> = exs.iter().collect();
        let batch = Batch::new(&refs, vocab, max_len)?;
        let ids = gen.transfer(&batch, &vec![target; batch.size()], marker, max_len)?;
        out.extend(ids.iter().map(|s| vocab.decode(s)));
    }
    Ok(out)
}

/// Transfers every line of `input` to `target`, writing
/// `<input>.transferred.txt` unless `output` is given.
pub fn cmd_transfer(cfg: &RunConfig, input: &Path, target: StyleLabel, output: Option<&Path>) -> Result<PathBuf> {
    match cfg.train.precision {
        Precision::F32 => transfer_as::<f32>(cfg, input, target, output),
        Precision::F64 => transfer_as::<f64>(cfg, input, target, output),
    }
}

pub fn default_transfer_output(input: &Path) -> PathBuf {
    let mut name = input.as_os_str().to_owned();
    name.push(".transferred.txt");
    PathBuf::from(name)
}

fn transfer_as<F: Float>(cfg: &RunConfig, input: &Path, target: StyleLabel, output: Option<&Path>) -> Result<PathBuf> {
    let art = Artifacts::new(&cfg.paths.work_dir);
    let vocab = load_vocab(&art)?;
    let marker = load_classifier::<F>(&art, ClassifierRole::StyleMarker)?;
    let gen = load_generator::<F>(&art)?;
    let corpus = load_corpus(input, target.flip())?;
    let sentences: Vec<Vec<String>> = corpus.examples.into_iter().map(|e| e.tokens).collect();
    let outs = transfer_sentences(&gen, &marker, &vocab, &sentences, target, cfg.train.max_len)?;
    let path = output.map(Path::to_path_buf).unwrap_or_else(|| default_transfer_output(input));
    let text: String = outs.iter().map(|t| t.join(" ") + "\n").collect();
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Inputs to `cmd_eval`. Unset checkpoint paths default to the work
/// directory's artifacts.
#[derive(Clone, Debug)]
pub struct EvalRequest {
    pub inputs: PathBuf,
    pub outputs: PathBuf,
    pub target: StyleLabel,
    /// `input \t reference ...` lines aligned with `inputs`.
    pub references: Option<PathBuf>,
    pub lm: Option<PathBuf>,
    pub classifier: Option<PathBuf>,
}

fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

fn tokens(lines: &[String]) -> Vec<Vec<String>> {
    lines
        .iter()
        .map(|l| l.split_whitespace().map(str::to_owned).collect())
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, req: &EvalRequest) -> Result<MetricReport> {
    match cfg.train.precision {
        Precision::F32 => eval_as::<f32>(cfg, req),
        Precision::F64 => eval_as::<f64>(cfg, req),
    }
}

fn eval_as<F: Float>(cfg: &RunConfig, req: &EvalRequest) -> Result<MetricReport> {
    let art = Artifacts::new(&cfg.paths.work_dir);
    let vocab = load_vocab(&art)?;
    let cls_path = req
        .classifier
        .clone()
        .unwrap_or_else(|| art.classifier(ClassifierRole::EvalClassifier));
    require(&cls_path, "pretrain")?;
    let classifier = StyleClassifier::<F>::load(&cls_path)?;
    let lm_path = req.lm.clone().unwrap_or_else(|| art.lm());
    require(&lm_path, "pretrain")?;
    let lm = KneserNeyLm::load(&lm_path)?;

    let inputs = read_lines(&req.inputs)?;
    let outputs = read_lines(&req.outputs)?;
    if inputs.len() != outputs.len() {
        return Err(Error::InvalidArgument(format!(
            "{} has {} lines but {} has {}",
            req.inputs.display(),
            inputs.len(),
            req.outputs.display(),
            outputs.len()
        )));
    }
    let (inp, out) = (tokens(&inputs), tokens(&outputs));
    let targets = vec![req.target; out.len()];
    let s_acc = transfer_accuracy(&out, &targets, &classifier, &vocab, cfg.train.max_len, INFER_BATCH)?;
    let self_refs: Vec<Vec<Vec<String>>> = inp.iter().map(|t| vec![t.clone()]).collect();
    let self_bleu = bleu_corpus(&out, &self_refs)?;
    let ref_bleu = match &req.references {
        Some(path) => {
            let refs = load_references(path)?;
            if refs.len() != out.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} has {} references for {} outputs",
                    path.display(),
                    refs.len(),
                    out.len()
                )));
            }
            let refs: Vec<Vec<Vec<String>>> = refs
                .iter()
                .map(|(_, rs)| tokens(rs))
                .collect();
            Some(bleu_corpus(&out, &refs)?)
        }
        None => None,
    };
    let ppl = perplexity(&lm, &outputs)?;
    MetricReport::new(s_acc, self_bleu, ref_bleu, ppl)
}

/// Writes content and style vectors for one split of the corpus.
pub fn cmd_export_embeddings(cfg: &RunConfig, split: &str, output: &Path, targets: Targets) -> Result<usize> {
    match cfg.train.precision {
        Precision::F32 => export_as::<f32>(cfg, split, output, targets),
        Precision::F64 => export_as::<f64>(cfg, split, output, targets),
    }
}

fn export_as<F: Float>(cfg: &RunConfig, split: &str, output: &Path, targets: Targets) -> Result<usize> {
    let art = Artifacts::new(&cfg.paths.work_dir);
    let vocab = load_vocab(&art)?;
    let marker = load_classifier::<F>(&art, ClassifierRole::StyleMarker)?;
    let gen = load_generator::<F>(&art)?;
    let examples = load_split(&cfg.paths.data_dir, split)?;
    let rows = embedding_rows(&gen, &marker, &examples, &vocab, cfg.train.max_len, INFER_BATCH, targets)?;
    write_embeddings(output, &rows)?;
    Ok(rows.len())
}

/// Generates and writes the templated corpus.
pub fn cmd_make_synthetic(seed: u64, size: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    write_corpus(&make_synthetic(seed, size)?, dir)
}
