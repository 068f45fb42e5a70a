//! Stage orchestration over an output directory.
//!
//! Each stage reads only artifacts persisted by its upstream stages and writes
//! its own artifacts plus a manifest holding the stage fingerprint. The
//! fingerprint hashes the configuration fields the stage consumes together
//! with the upstream fingerprints, so rerunning an unchanged stage is a no-op
//! and any upstream change propagates downstream.
//!
//! The in-memory builders ([`build_index`], [`build_prompts`]) are public so
//! experiments can run the same computations without touching disk.

use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cf::{all_top_k, import_embeddings, train_cf, CfEmbeddings};
use crate::cluster::hierarchical_cluster;
use crate::config::PipelineConfig;
use crate::corpus::{apply_k_core, ingest_files, split_leave_one_out, Corpus, SplitCorpus};
use crate::decode::{infer, EncodingCache, IdTrie};
use crate::embed::embed_items;
use crate::error::{Error, Result};
use crate::eval::{aggregate, complexity_account, eval_cases, head_items, run_cases, EvalCase, EvalReport, EvalSettings, Target};
use crate::exec::Exec;
use crate::ids::{assign_ids, LexicalIdMap};
use crate::model::FusionModel;
use crate::prompt::{build_prompt_bundle, render_bundle, ItemPrompts, PromptConfig};
use crate::synth::generate;
use crate::tfidf::tfidf_all;
use crate::train::{train, write_curve_csv, TrainData, TrainState};
use crate::vocab::{Vocabulary, VocabConfig};

/// Version of every JSON envelope and manifest written by the pipeline.
pub const ARTIFACT_VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    SynthData,
    Ingest,
    Index,
    Cf,
    Prompts,
    Train,
    Evaluate,
    Recommend,
    BenchComplexity,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::SynthData,
        Stage::Ingest,
        Stage::Index,
        Stage::Cf,
        Stage::Prompts,
        Stage::Train,
        Stage::Evaluate,
        Stage::Recommend,
        Stage::BenchComplexity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::SynthData => "synth-data",
            Stage::Ingest => "ingest",
            Stage::Index => "index",
            Stage::Cf => "cf",
            Stage::Prompts => "prompts",
            Stage::Train => "train",
            Stage::Evaluate => "evaluate",
            Stage::Recommend => "recommend",
            Stage::BenchComplexity => "bench-complexity",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown stage `{s}`")))
    }
}

/// Manifest written next to a stage's artifacts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u8,
    pub stage: Stage,
    pub fingerprint: String,
    pub files: Vec<String>,
    pub summary: String,
}

/// Result of one `run` call.
#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub stage: Stage,
    pub fingerprint: String,
    /// The stage was already up to date.
    pub skipped: bool,
    pub message: String,
}

impl fmt::Display for StageSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.skipped { "up-to-date" } else { "done" };
        write!(f, "{} {status} fp={} {}", self.stage, &self.fingerprint[..12.min(self.fingerprint.len())], self.message)
    }
}

/// JSON artifact wrapper carrying the format version and producing fingerprint.
#[derive(Debug, Serialize, Deserialize)]
struct Envelope<T> {
    version: u8,
    fingerprint: String,
    payload: T,
}

/// Exclusive lock on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Vocabulary and identifiers produced by the `index` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexArtifact {
    pub vocab: Vocabulary,
    pub id_map: LexicalIdMap,
}

/// Tokenized prompts produced by the `prompts` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptArtifact {
    pub items: ItemPrompts,
    pub train: TrainData,
    pub valid: Vec<EvalCase>,
    pub test: Vec<EvalCase>,
}

pub fn build_index(corpus: &Corpus, vocab_cfg: &VocabConfig, cfg: &crate::config::IndexConfig, exec: Exec) -> Result<IndexArtifact> {
    let vocab = Vocabulary::build(corpus, vocab_cfg);
    let vectors = tfidf_all(corpus, &vocab, exec);
    let emb = embed_items(&vectors, &cfg.embedding, exec)?;
    let tree = hierarchical_cluster(&emb, &cfg.cluster_params(), exec);
    let mut id_map = assign_ids(&tree, &vectors, &vocab, cfg.l)?;
    id_map.rebuild_reverse()?;
    Ok(IndexArtifact { vocab, id_map })
}

/// Item prompts, training examples and evaluation cases. `cf` may be `None`
/// only when the prompt config does not verbalize similar items.
#[allow(clippy::too_many_arguments)]
pub fn build_prompts(
    corpus: &Corpus,
    split: &SplitCorpus,
    index: &IndexArtifact,
    cf: Option<&CfEmbeddings>,
    cfg: &PromptConfig,
    sim: crate::cf::Similarity,
    examples_per_user: usize,
    exec: Exec,
) -> Result<PromptArtifact> {
    let similar = match cf {
        Some(e) if cfg.use_cf => all_top_k(e, cfg.num_similar, sim, exec),
        None if cfg.use_cf && cfg.num_similar > 0 => {
            return Err(Error::InvalidInput("similar-item prompts need collaborative embeddings".into()))
        }
        _ => Vec::new(),
    };
    let (vocab, ids) = (&index.vocab, &index.id_map);
    let items = ItemPrompts::build(corpus, ids, vocab, &similar, cfg);
    let train = TrainData::from_split(split, ids, vocab, &items, cfg, examples_per_user)?;
    let valid = eval_cases(split, Target::Valid, ids, vocab, &items, cfg)?;
    let test = eval_cases(split, Target::Test, ids, vocab, &items, cfg)?;
    Ok(PromptArtifact { items, train, valid, test })
}

fn hash_json<T: Serialize>(h: &mut Sha256, label: &str, v: &T) {
    h.update(label.as_bytes());
    h.update(serde_json::to_vec(v).expect("config values serialize"));
    h.update([0u8]);
}

fn hash_file(h: &mut Sha256, path: &Path) -> Result<()> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            break;
        }
        h.update(&buf[..n]);
    }
    Ok(())
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Pipeline runner bound to one configuration and output directory.
pub struct Pipeline {
    pub config: PipelineConfig,
    pub exec: Exec,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, exec: Exec) -> Result<Self> {
        config.validate()?;
        Ok(Pipeline { config, exec })
    }

    pub fn out(&self) -> &Path {
        &self.config.out_dir
    }

    fn path(&self, name: &str) -> PathBuf {
        self.config.out_dir.join(name)
    }

    fn manifest_path(&self, stage: Stage) -> PathBuf {
        self.path(&format!("manifests/{}.json", stage.name()))
    }

    pub fn manifest(&self, stage: Stage) -> Option<Manifest> {
        let bytes = fs::read(self.manifest_path(stage)).ok()?;
        let m: Manifest = serde_json::from_slice(&bytes).ok()?;
        (m.version == ARTIFACT_VERSION && m.files.iter().all(|f| self.path(f).exists())).then_some(m)
    }

    /// Fingerprint of a finished upstream stage, or an error naming it.
    fn upstream(&self, stage: Stage, artifact: &str) -> Result<String> {
        self.manifest(stage).map(|m| m.fingerprint).ok_or_else(|| Error::MissingArtifact {
            artifact: artifact.to_string(),
            stage: stage.name().to_string(),
        })
    }

    fn uses_synth_data(&self) -> bool {
        self.config.data.interactions.is_none()
    }

    fn data_paths(&self) -> (PathBuf, PathBuf) {
        match (&self.config.data.interactions, &self.config.data.items) {
            (Some(a), Some(b)) => (a.clone(), b.clone()),
            _ => (self.path("synth/interactions.jsonl"), self.path("synth/items.jsonl")),
        }
    }

    /// Fingerprint a stage from the config it consumes and its upstreams.
    pub fn fingerprint(&self, stage: Stage) -> Result<String> {
        let c = &self.config;
        let mut h = Sha256::new();
        h.update([ARTIFACT_VERSION]);
        h.update(stage.name().as_bytes());
        match stage {
            Stage::SynthData => hash_json(&mut h, "synth", &c.synth),
            Stage::Ingest => {
                hash_json(&mut h, "format", &c.data.format);
                hash_json(&mut h, "k_core", &c.data.k_core);
                if self.uses_synth_data() {
                    h.update(self.upstream(Stage::SynthData, "synth/interactions.jsonl")?);
                } else {
                    let (a, b) = self.data_paths();
                    hash_file(&mut h, &a)?;
                    hash_file(&mut h, &b)?;
                }
            }
            Stage::Index => {
                hash_json(&mut h, "vocab", &c.vocab);
                hash_json(&mut h, "index", &c.index);
                if let crate::embed::EmbeddingSource::ExternalFile { path } = &c.index.embedding {
                    hash_file(&mut h, path)?;
                }
                h.update(self.upstream(Stage::Ingest, "corpus.bin")?);
            }
            Stage::Cf => {
                hash_json(&mut h, "cf", &c.cf);
                if let Some(path) = &c.cf.import {
                    hash_file(&mut h, path)?;
                }
                h.update(self.upstream(Stage::Ingest, "corpus.bin")?);
            }
            Stage::Prompts => {
                hash_json(&mut h, "prompt", &c.prompt);
                hash_json(&mut h, "examples_per_user", &c.train.examples_per_user);
                h.update(self.upstream(Stage::Index, "index.json")?);
                if c.prompt.use_cf {
                    hash_json(&mut h, "similarity", &c.cf.similarity);
                    h.update(self.upstream(Stage::Cf, "cf.bin")?);
                }
            }
            Stage::Train => {
                hash_json(&mut h, "model", &c.model);
                hash_json(&mut h, "train", &c.train);
                h.update(self.upstream(Stage::Prompts, "prompts.json")?);
            }
            Stage::Evaluate | Stage::Recommend => {
                hash_json(&mut h, "decode", &c.decode);
                h.update(self.upstream(Stage::Train, "model.ckpt")?);
            }
            Stage::BenchComplexity => hash_json(&mut h, "complexity", &c.complexity),
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Run one stage under the directory lock.
    pub fn run(&self, stage: Stage) -> Result<StageSummary> {
        let _lock = OutputLock::acquire(self.out())?;
        self.run_locked(stage)
    }

    /// Run stages in order under a single lock acquisition.
    pub fn run_all(&self, stages: &[Stage]) -> Result<Vec<StageSummary>> {
        let _lock = OutputLock::acquire(self.out())?;
        stages.iter().map(|&s| self.run_locked(s)).collect()
    }

    fn run_locked(&self, stage: Stage) -> Result<StageSummary> {
        let fingerprint = self.fingerprint(stage)?;
        if stage != Stage::BenchComplexity {
            if let Some(m) = self.manifest(stage) {
                if m.fingerprint == fingerprint {
                    return Ok(StageSummary {
                        stage,
                        fingerprint,
                        skipped: true,
                        message: m.summary,
                    });
                }
            }
        }
        log::info!("running stage {stage}");
        let (files, message) = match stage {
            Stage::SynthData => self.synth_data()?,
            Stage::Ingest => self.ingest(&fingerprint)?,
            Stage::Index => self.index(&fingerprint)?,
            Stage::Cf => self.cf()?,
            Stage::Prompts => self.prompts(&fingerprint)?,
            Stage::Train => self.train()?,
            Stage::Evaluate => self.evaluate(&fingerprint)?,
            Stage::Recommend => self.recommend()?,
            Stage::BenchComplexity => {
                let c = &self.config.complexity;
                let acct = complexity_account(c.user_tokens, c.item_tokens, c.num_items);
                return Ok(StageSummary {
                    stage,
                    fingerprint,
                    skipped: false,
                    message: acct.render(),
                });
            }
        };
        let manifest = Manifest {
            version: ARTIFACT_VERSION,
            stage,
            fingerprint: fingerprint.clone(),
            files,
            summary: message.clone(),
        };
        let mp = self.manifest_path(stage);
        fs::create_dir_all(mp.parent().expect("manifest dir")).map_err(|e| Error::io(&mp, e))?;
        write_atomic(&mp, &serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))?;
        Ok(StageSummary {
            stage,
            fingerprint,
            skipped: false,
            message,
        })
    }

    fn write_json<T: Serialize>(&self, name: &str, fingerprint: &str, payload: &T) -> Result<()> {
        let env = Envelope {
            version: ARTIFACT_VERSION,
            fingerprint: fingerprint.to_string(),
            payload,
        };
        write_atomic(&self.path(name), &serde_json::to_vec(&env).expect("artifact serializes"))
    }

    fn read_json<T: DeserializeOwned>(&self, stage: Stage, name: &str) -> Result<T> {
        let fp = self.upstream(stage, name)?;
        let path = self.path(name);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let env: Envelope<T> = serde_json::from_slice(&bytes).map_err(|e| Error::Artifact(format!("{}: {e}", path.display())))?;
        if env.version != ARTIFACT_VERSION {
            return Err(Error::Artifact(format!("{}: version {} (expected {ARTIFACT_VERSION})", path.display(), env.version)));
        }
        if env.fingerprint != fp {
            return Err(Error::Artifact(format!("{}: fingerprint does not match its manifest; rerun `{stage}`", path.display())));
        }
        Ok(env.payload)
    }

    pub fn load_corpus(&self) -> Result<Corpus> {
        self.upstream(Stage::Ingest, "corpus.bin")?;
        Corpus::load(&self.path("corpus.bin"))
    }

    pub fn load_index(&self) -> Result<IndexArtifact> {
        let mut ix: IndexArtifact = self.read_json(Stage::Index, "index.json")?;
        ix.vocab.rebuild_index();
        ix.id_map.rebuild_reverse()?;
        Ok(ix)
    }

    pub fn load_prompts(&self) -> Result<PromptArtifact> {
        self.read_json(Stage::Prompts, "prompts.json")
    }

    pub fn load_model(&self) -> Result<FusionModel<f32>> {
        self.upstream(Stage::Train, "model.ckpt")?;
        Ok(TrainState::<f32>::load(&self.path("model.ckpt"))?.model)
    }

    fn synth_data(&self) -> Result<(Vec<String>, String)> {
        let data = generate(&self.config.synth)?;
        let dir = self.path("synth");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut a = Vec::new();
        let mut b = Vec::new();
        data.write_interactions(&mut a).map_err(|e| Error::io(&dir, e))?;
        data.write_items(&mut b).map_err(|e| Error::io(&dir, e))?;
        write_atomic(&dir.join("interactions.jsonl"), &a)?;
        write_atomic(&dir.join("items.jsonl"), &b)?;
        Ok((
            vec!["synth/interactions.jsonl".into(), "synth/items.jsonl".into()],
            format!("{} items, {} interactions", data.items.len(), data.interactions.len()),
        ))
    }

    fn ingest(&self, _fp: &str) -> Result<(Vec<String>, String)> {
        let (a, b) = self.data_paths();
        let (raw, stats) = ingest_files(&a, &b, self.config.data.format)?;
        let corpus = apply_k_core(&raw, self.config.data.k_core);
        write_atomic(&self.path("corpus.bin"), &corpus.to_snapshot_bytes())?;
        let split = split_leave_one_out(&corpus);
        Ok((
            vec!["corpus.bin".into()],
            format!(
                "{} users, {} items, {} interactions after {}-core; {} dropped unknown-item interactions; {} users too short to split",
                corpus.num_users(),
                corpus.num_items(),
                corpus.num_interactions(),
                self.config.data.k_core,
                stats.dropped_unknown_item,
                split.excluded.len()
            ),
        ))
    }

    fn index(&self, fp: &str) -> Result<(Vec<String>, String)> {
        let corpus = self.load_corpus()?;
        let ix = build_index(&corpus, &self.config.vocab, &self.config.index, self.exec)?;
        self.write_json("index.json", fp, &ix)?;
        let tsv = self.path("ids.tsv");
        let mut buf = Vec::new();
        ix.id_map.write_tsv(&mut buf, &corpus, &ix.vocab).map_err(|e| Error::io(&tsv, e))?;
        write_atomic(&tsv, &buf)?;
        let r = &ix.id_map.report;
        Ok((
            vec!["index.json".into(), "ids.tsv".into()],
            format!(
                "vocab {} tokens, {} ids of {} components, tree depth {}, {} deduplicated, {} padded",
                ix.vocab.len(),
                ix.id_map.len(),
                ix.id_map.base_len,
                ix.id_map.tree.max_depth(),
                r.deduplicated,
                r.padded_items
            ),
        ))
    }

    fn cf(&self) -> Result<(Vec<String>, String)> {
        let corpus = self.load_corpus()?;
        let split = split_leave_one_out(&corpus);
        let emb = match &self.config.cf.import {
            Some(path) => import_embeddings(path, corpus.num_items())?,
            None => train_cf(&split, &self.config.cf)?,
        };
        write_atomic(&self.path("cf.bin"), &emb.to_binary())?;
        Ok((vec!["cf.bin".into()], format!("{} x {} embeddings", emb.num_items, emb.dims)))
    }

    fn prompts(&self, fp: &str) -> Result<(Vec<String>, String)> {
        let corpus = self.load_corpus()?;
        let split = split_leave_one_out(&corpus);
        let ix = self.load_index()?;
        let c = &self.config;
        let cf = if c.prompt.use_cf {
            self.upstream(Stage::Cf, "cf.bin")?;
            let path = self.path("cf.bin");
            let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
            Some(CfEmbeddings::from_binary(&bytes, corpus.num_items())?)
        } else {
            None
        };
        let art = build_prompts(&corpus, &split, &ix, cf.as_ref(), &c.prompt, c.cf.similarity, c.train.examples_per_user, self.exec)?;
        self.write_json("prompts.json", fp, &art)?;
        let mut sample = String::new();
        for case in art.test.iter().take(3) {
            sample.push_str(&render_bundle(&corpus.users[case.user], &case.bundle, &ix.vocab));
            sample.push('\n');
        }
        write_atomic(&self.path("prompts_sample.txt"), sample.as_bytes())?;
        let truncated = art.items.truncated.iter().filter(|&&t| t).count();
        Ok((
            vec!["prompts.json".into(), "prompts_sample.txt".into()],
            format!(
                "{} item prompts ({truncated} truncated), {} training examples, {} evaluation users",
                art.items.prompts.len(),
                art.train.examples.len(),
                art.test.len()
            ),
        ))
    }

    fn train(&self) -> Result<(Vec<String>, String)> {
        let ix = self.load_index()?;
        let prompts = self.load_prompts()?;
        let longest = ix.id_map.ids.iter().map(Vec::len).max().unwrap_or(0);
        let mcfg = self.config.model_config(ix.vocab.len(), longest);
        mcfg.check_ids(ix.id_map.base_len, longest)?;
        let model = FusionModel::<f32>::new(mcfg)?;
        let mut state = TrainState::new(model, self.config.train.seed);
        let outcome = train(&mut state, &prompts.train, &self.config.train, self.exec)?;
        write_atomic(&self.path("model.ckpt"), &state.to_bytes())?;
        let curve = self.path("curve.csv");
        let mut buf = Vec::new();
        write_curve_csv(&mut buf, &outcome.curve).map_err(|e| Error::io(&curve, e))?;
        write_atomic(&curve, &buf)?;
        Ok((
            vec!["model.ckpt".into(), "curve.csv".into()],
            format!(
                "{} parameters, {} steps, final epoch loss {:.4}",
                state.model.num_parameters(),
                state.step,
                outcome.epoch_loss.last().copied().unwrap_or(f64::NAN)
            ),
        ))
    }

    /// Cached item encodings for the current model, rebuilt when stale.
    fn encoding_cache(&self, model: &FusionModel<f32>, prompts: &PromptArtifact) -> Result<EncodingCache<f32>> {
        let path = self.path("cache.bin");
        if let Ok(c) = EncodingCache::<f32>::load(&path) {
            if c.check(model).is_ok() && c.entries.len() == prompts.items.prompts.len() {
                return Ok(c);
            }
        }
        let c = EncodingCache::build(model, &prompts.items.prompts, self.config.decode.cache_chunk, self.exec)?;
        write_atomic(&path, &c.to_bytes())?;
        Ok(c)
    }

    fn evaluate(&self, fp: &str) -> Result<(Vec<String>, String)> {
        let corpus = self.load_corpus()?;
        let split = split_leave_one_out(&corpus);
        let ix = self.load_index()?;
        let prompts = self.load_prompts()?;
        let model = self.load_model()?;
        let cache = self.encoding_cache(&model, &prompts)?;
        let trie = IdTrie::from_map(&ix.id_map)?;
        let d = &self.config.decode;
        let settings = EvalSettings {
            beam_size: d.beam_size,
            top_n: d.top_n,
        };
        let (outcomes, stats) = run_cases(&model, &prompts.test, Some(&cache), &trie, settings, self.exec)?;
        let head = head_items(&split.train_popularity());
        let report = aggregate(&outcomes, &head, &d.cutoffs, split.excluded.len(), fp);
        self.write_json("report.json", fp, &report)?;
        let csv = self.path("report.csv");
        let mut buf = Vec::new();
        report.write_csv(&mut buf).map_err(|e| Error::io(&csv, e))?;
        write_atomic(&csv, &buf)?;
        let k = d.cutoffs[0];
        Ok((
            vec!["report.json".into(), "report.csv".into(), "cache.bin".into()],
            format!(
                "{} users, R@{k}={:.4} N@{k}={:.4}, {} online tokens, {} cache misses\n{}",
                report.num_users,
                report.metric("all", "recall", k).unwrap_or(0.0),
                report.metric("all", "ndcg", k).unwrap_or(0.0),
                stats.online_tokens,
                stats.cache_misses,
                report.table()
            ),
        ))
    }

    pub fn load_report(&self) -> Result<EvalReport> {
        self.read_json(Stage::Evaluate, "report.json")
    }

    fn recommend(&self) -> Result<(Vec<String>, String)> {
        let corpus = self.load_corpus()?;
        let ix = self.load_index()?;
        let prompts = self.load_prompts()?;
        let model = self.load_model()?;
        let cache = self.encoding_cache(&model, &prompts)?;
        let trie = IdTrie::from_map(&ix.id_map)?;
        let d = &self.config.decode;
        let p = &self.config.prompt;
        let users: Vec<usize> = (0..corpus.num_users()).filter(|&u| !corpus.sequences[u].is_empty()).collect();
        let results = self.exec.map(&users, |&u| {
            let bundle = build_prompt_bundle(&corpus.sequences[u], &ix.id_map, &ix.vocab, &prompts.items, p)?;
            infer(&model, &bundle, Some(&cache), &trie, d.beam_size, d.top_n).map(|(r, _)| r)
        });
        let path = self.path("recommendations.tsv");
        let mut out = String::from("user_key\trank\titem_key\tlog_score\n");
        let mut shortfalls = 0;
        for (&u, r) in users.iter().zip(results) {
            let r = r?;
            shortfalls += r.shortfall as usize;
            for (rank, item) in r.ranked.iter().enumerate() {
                out.push_str(&format!("{}\t{}\t{}\t{:.6}\n", corpus.users[u], rank + 1, corpus.items[item.item].item_key, item.score));
            }
        }
        write_atomic(&path, out.as_bytes())?;
        Ok((
            vec!["recommendations.tsv".into(), "cache.bin".into()],
            format!("{} users, top {} each, {shortfalls} short lists", users.len(), d.top_n),
        ))
    }
}
