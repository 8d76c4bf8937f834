use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Arg, ArgMatches, Args, Command, FromArgMatches, Parser, Subcommand};
use ned_core::corpus::{read_jsonl, Corpus, Page};
use ned_core::evalsuite::{self, compress_embeddings, evaluate, pattern_slices, MentionKey};
use ned_core::kb::{build_cooccurrence_adjacency, load_kb, popularity_counts, KbPaths, LoadOptions, StructuredKB};
use ned_core::model::{MentionFilter, Model};
use ned_core::numerics::primitive_suite;
use ned_core::syncorpus::{generate_all, GenParams};
use ned_core::trainer::{
    self, load_checkpoint, model_grad_check, save_checkpoint, TrainConfig, TrainOptions, CONFIG_KEYS,
};
use ned_core::weaklabel::weak_label_corpus;
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Parser)]
#[command(
    name = "ned",
    version,
    about = "Entity disambiguation over a structured knowledge base"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic KB and corpus.
    GenCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 500)]
        entities: usize,
        #[arg(long, default_value_t = 20)]
        types: usize,
        #[arg(long, default_value_t = 10)]
        relations: usize,
        #[arg(long, default_value_t = 5000)]
        sentences: usize,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 1.0)]
        zipf: f64,
        #[arg(long, default_value_t = 0.1)]
        unseen_fraction: f64,
    },
    /// Load and validate a KB; optionally add a co-occurrence adjacency.
    BuildKb {
        #[arg(long)]
        kb: PathBuf,
        /// Corpus for the co-occurrence adjacency.
        #[arg(long, requires = "cooc_threshold")]
        corpus: Option<PathBuf>,
        #[arg(long, requires = "corpus")]
        cooc_threshold: Option<u64>,
        /// Defaults to the KB directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Add pronoun and alias labels using page metadata.
    WeakLabel {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        pages: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model.
    Train {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_steps: Option<usize>,
        #[command(flatten)]
        overrides: ConfigFlags,
    },
    /// Score a corpus and report micro P/R/F1 per slice.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        /// Training corpus; gives popularity counts and affordance keywords.
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Popularity slices (the default when no slice kind is chosen).
        #[arg(long)]
        slices: bool,
        /// Reasoning-pattern slices.
        #[arg(long)]
        patterns: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Keep the top k% entity rows by popularity; the rest share one row.
    Compress {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        k_percent: f64,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top TF-IDF keywords for sentences mentioning a type.
    MineAffordances {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        kb: PathBuf,
        #[arg(long = "type")]
        type_id: u32,
        #[arg(long, default_value_t = 15)]
        top_n: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    GradCheck {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// One `--flag value` per config key, `_` spelled `-`.
#[derive(Clone, Debug, Default)]
struct ConfigFlags(Vec<(&'static str, String)>);

impl FromArgMatches for ConfigFlags {
    fn from_arg_matches(m: &ArgMatches) -> Result<Self, clap::Error> {
        Ok(Self(
            CONFIG_KEYS
                .iter()
                .filter_map(|&k| m.get_one::<String>(k).map(|v| (k, v.clone())))
                .collect(),
        ))
    }

    fn update_from_arg_matches(&mut self, m: &ArgMatches) -> Result<(), clap::Error> {
        *self = Self::from_arg_matches(m)?;
        Ok(())
    }
}

impl Args for ConfigFlags {
    fn augment_args(cmd: Command) -> Command {
        CONFIG_KEYS.iter().fold(cmd, |c, &k| {
            c.arg(
                Arg::new(k)
                    .long(k.replace('_', "-"))
                    .value_name("VALUE")
                    .help_heading("Config overrides"),
            )
        })
    }

    fn augment_args_for_update(cmd: Command) -> Command {
        Self::augment_args(cmd)
    }
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    version: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    config_hash: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    wall_clock_secs: f64,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    extra: BTreeMap<String, serde_json::Value>,
}

struct Run {
    manifest: RunManifest,
    start: Instant,
}

impl Run {
    fn new(command: &str) -> Self {
        Self {
            manifest: RunManifest {
                command: command.to_string(),
                version: env!("CARGO_PKG_VERSION"),
                config_hash: None,
                seed: None,
                inputs: BTreeMap::new(),
                outputs: BTreeMap::new(),
                wall_clock_secs: 0.0,
                extra: BTreeMap::new(),
            },
            start: Instant::now(),
        }
    }

    /// Records the digest of a file, or of every file under a directory.
    fn input(&mut self, path: &Path) -> Result<()> {
        for (p, d) in digests(path)? {
            self.manifest.inputs.insert(p, d);
        }
        Ok(())
    }

    fn output(&mut self, path: &Path) -> Result<()> {
        for (p, d) in digests(path)? {
            self.manifest.outputs.insert(p, d);
        }
        Ok(())
    }

    fn extra(&mut self, key: &str, value: impl Serialize) {
        self.manifest
            .extra
            .insert(key.to_string(), serde_json::to_value(value).expect("serializable"));
    }

    fn finish(mut self, path: &Path) -> Result<()> {
        self.manifest.wall_clock_secs = self.start.elapsed().as_secs_f64();
        let text = serde_json::to_string_pretty(&self.manifest)? + "\n";
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

fn digests(path: &Path) -> Result<Vec<(String, String)>> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .with_context(|| format!("reading {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        entries.sort();
        let mut out = Vec::new();
        for e in entries {
            if e.file_name()
                .is_some_and(|n| n.to_string_lossy().ends_with(".manifest.json"))
            {
                continue;
            }
            out.extend(digests(&e)?);
        }
        return Ok(out);
    }
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(vec![(path.display().to_string(), hex::encode(Sha256::digest(&bytes)))])
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("{}: no such file or directory", path.display());
    }
    Ok(())
}

fn load_corpus(path: &Path) -> Result<Corpus> {
    require(path)?;
    Corpus::load(path).with_context(|| format!("loading corpus {}", path.display()))
}

fn load_kb_dir(dir: &Path, cfg: &TrainConfig) -> Result<StructuredKB> {
    require(&dir.join("aliases.tsv"))?;
    let opts = LoadOptions {
        max_types: cfg.max_types,
        max_relations: cfg.max_relations,
        coarse_types: cfg.coarse_types,
        ..LoadOptions::default()
    };
    load_kb(&KbPaths::in_dir(dir), &opts).with_context(|| format!("loading KB from {}", dir.display()))
}

/// KB with popularity counts taken from `train`.
fn kb_with_popularity(dir: &Path, train: &Corpus, cfg: &TrainConfig) -> Result<StructuredKB> {
    let mut kb = load_kb_dir(dir, cfg)?;
    kb.set_popularity(popularity_counts(train, &kb)?);
    Ok(kb)
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

/// Manifest next to a file output, or inside a directory output.
fn manifest_path(out: &Path, command: &str) -> PathBuf {
    if out.is_dir() {
        out.join(format!("{command}.manifest.json"))
    } else {
        let name = out
            .file_name()
            .map(|n| n.to_string_lossy().to_string())
            .unwrap_or_default();
        out.with_file_name(format!("{name}.manifest.json"))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Cmd::GenCorpus {
            out,
            seed,
            entities,
            types,
            relations,
            sentences,
            k,
            zipf,
            unseen_fraction,
        } => {
            let mut run = Run::new("gen-corpus");
            let params = GenParams {
                n_entities: entities,
                n_types: types,
                n_relations: relations,
                n_sentences: sentences,
                k_ambiguity: k,
                zipf_exponent: zipf,
                unseen_fraction,
                seed,
                ..GenParams::default()
            };
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let (_, corpus) = generate_all(&params, &out)?;
            run.manifest.seed = Some(seed);
            run.output(&out)?;
            run.extra("sentences", corpus.answers.len());
            println!(
                "wrote {} train / {} dev / {} test sentences to {}",
                corpus.train.sentences.len(),
                corpus.dev.sentences.len(),
                corpus.test.sentences.len(),
                out.display()
            );
            run.finish(&out.join("gen-corpus.manifest.json"))
        }
        Cmd::BuildKb {
            kb,
            corpus,
            cooc_threshold,
            out,
        } => {
            let mut run = Run::new("build-kb");
            run.input(&kb)?;
            let mut loaded = load_kb_dir(&kb, &TrainConfig::default())?;
            let out = out.unwrap_or_else(|| kb.clone());
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            if let (Some(c), Some(t)) = (corpus, cooc_threshold) {
                run.input(&c)?;
                let corpus = load_corpus(&c)?;
                let adj = build_cooccurrence_adjacency(&corpus, &loaded, t)?;
                let path = out.join(format!("{}.adj.tsv", adj.name));
                loaded.write_adjacency(&adj, &path)?;
                run.output(&path)?;
                run.extra("cooc_threshold", t);
                run.extra("cooc_edges", adj.edge_count());
                loaded.add_adjacency(adj);
            }
            let mut summary = format!(
                "entities={}\naliases={}\ntype_vocab={}\nrelation_vocab={}\n",
                loaded.len(),
                loaded.candidate_map.len(),
                loaded.type_vocab_size,
                loaded.relation_vocab_size
            );
            for (name, adj) in &loaded.adjacencies {
                summary.push_str(&format!("adjacency.{name}.edges={}\n", adj.edge_count()));
            }
            let path = out.join("kb_summary.txt");
            fs::write(&path, &summary)?;
            run.output(&path)?;
            print!("{summary}");
            run.finish(&out.join("build-kb.manifest.json"))
        }
        Cmd::WeakLabel { corpus, pages, kb, out } => {
            let mut run = Run::new("weak-label");
            for p in [&corpus, &pages, &kb] {
                run.input(p)?;
            }
            let c = load_corpus(&corpus)?;
            require(&pages)?;
            let pages: Vec<Page> = read_jsonl(&pages)?;
            let kb = load_kb_dir(&kb, &TrainConfig::default())?;
            let (labelled, stats) = weak_label_corpus(&c, &pages, &kb);
            labelled.save(&out)?;
            run.output(&out)?;
            run.extra("mentions_before", stats.before);
            run.extra("mentions_after", stats.after);
            run.extra("ratio", stats.ratio);
            println!(
                "mentions {} -> {} (ratio {:.3})",
                stats.before, stats.after, stats.ratio
            );
            run.finish(&manifest_path(&out, "weak-label"))
        }
        Cmd::Train {
            kb,
            train,
            config,
            out,
            max_steps,
            overrides,
        } => {
            let mut run = Run::new("train");
            let mut cfg = match &config {
                Some(p) => {
                    require(p)?;
                    run.input(p)?;
                    TrainConfig::parse_text(&fs::read_to_string(p)?)
                        .with_context(|| format!("parsing {}", p.display()))?
                }
                None => TrainConfig::default(),
            };
            for (k, v) in &overrides.0 {
                cfg.set(k, v).with_context(|| format!("--{}", k.replace('_', "-")))?;
            }
            cfg.validate()?;
            run.input(&kb)?;
            run.input(&train)?;
            let corpus = load_corpus(&train)?;
            let kb = kb_with_popularity(&kb, &corpus, &cfg)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let opts = TrainOptions {
                checkpoint_dir: Some(out.clone()),
                max_steps,
            };
            let (model, log) = trainer::train(&corpus, &kb, cfg.clone(), &opts)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            model.vocab.save(&out.join("vocab.tsv"))?;
            let mut tsv = String::from("step\tepoch\tloss\tdis_loss\ttype_loss\tmasked_fraction\n");
            for s in &log.steps {
                tsv.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    s.step, s.epoch, s.loss, s.dis_loss, s.type_loss, s.masked_fraction
                ));
            }
            fs::write(out.join("train_log.tsv"), tsv)?;
            run.manifest.config_hash = Some(format!("{:016x}", cfg.hash()));
            run.manifest.seed = Some(cfg.seed);
            run.output(&out)?;
            run.extra("steps", log.steps.len());
            run.extra("skipped_sentences", log.skipped_sentences);
            if let Some(last) = log.steps.last() {
                println!("trained {} steps, final loss {:.4}", log.steps.len(), last.loss);
            }
            run.finish(&out.join("train.manifest.json"))
        }
        Cmd::Eval {
            checkpoint,
            kb,
            train,
            corpus,
            slices,
            patterns,
            out,
        } => {
            let mut run = Run::new("eval");
            for p in [&checkpoint, &kb, &train, &corpus] {
                require(p)?;
                run.input(p)?;
            }
            let model: Model<f64> = load_checkpoint(&checkpoint)?;
            let train_c = load_corpus(&train)?;
            let kb = kb_with_popularity(&kb, &train_c, &model.config)?;
            let test = load_corpus(&corpus)?;
            let mut extra: BTreeMap<String, std::collections::BTreeSet<MentionKey>> = BTreeMap::new();
            if patterns {
                let keywords = evalsuite::type_keywords(&train_c, &kb, 15);
                let (sets, coverage) = pattern_slices(&test, &kb, &keywords);
                for (p, set) in sets {
                    extra.insert(p.as_str().to_string(), set);
                }
                run.extra(
                    "pattern_coverage",
                    coverage
                        .iter()
                        .map(|(p, c)| (p.as_str(), *c))
                        .collect::<BTreeMap<_, _>>(),
                );
            }
            let mut report = evaluate(&model, &test, &kb, &extra)?;
            if patterns && !slices {
                for s in evalsuite::Slice::ALL {
                    report.blocks.remove(s.as_str());
                }
            }
            let text = report.to_text();
            write_or_print(out.as_deref(), &text)?;
            run.manifest.config_hash = Some(format!("{:016x}", model.config.hash()));
            run.manifest.seed = Some(model.config.seed);
            match &out {
                Some(p) => {
                    run.output(p)?;
                    run.finish(&manifest_path(p, "eval"))
                }
                None => run.finish(&manifest_path(&checkpoint, "eval")),
            }
        }
        Cmd::Compress {
            checkpoint,
            kb,
            train,
            k_percent,
            seed,
            out,
        } => {
            let mut run = Run::new("compress");
            for p in [&checkpoint, &kb, &train] {
                require(p)?;
                run.input(p)?;
            }
            let model: Model<f64> = load_checkpoint(&checkpoint)?;
            let train_c = load_corpus(&train)?;
            let kb = kb_with_popularity(&kb, &train_c, &model.config)?;
            let (small, info) = compress_embeddings(&model, &kb, k_percent, seed)?;
            save_checkpoint(&small, &out)?;
            run.manifest.seed = Some(seed);
            run.manifest.config_hash = Some(format!("{:016x}", small.config.hash()));
            run.output(&out)?;
            run.extra("k_percent", k_percent);
            run.extra("ratio", info.ratio);
            run.extra("retained_rows", info.retained);
            run.extra("shared_from", info.shared_from.map(|e| kb.key(e).to_string()));
            println!(
                "kept {} of {} entity rows (ratio {})",
                info.retained,
                kb.len(),
                info.ratio
            );
            run.finish(&manifest_path(&out, "compress"))
        }
        Cmd::MineAffordances {
            corpus,
            kb,
            type_id,
            top_n,
            out,
        } => {
            let mut run = Run::new("mine-affordances");
            run.input(&corpus)?;
            run.input(&kb)?;
            let c = load_corpus(&corpus)?;
            let kb = load_kb_dir(&kb, &TrainConfig::default())?;
            let words = evalsuite::affordance_keywords(&c, &kb, type_id, top_n)?;
            let text: String = words.iter().map(|(w, s)| format!("{w}\t{s:.6}\n")).collect();
            write_or_print(out.as_deref(), &text)?;
            run.extra("type", type_id);
            match &out {
                Some(p) => {
                    run.output(p)?;
                    run.finish(&manifest_path(p, "mine-affordances"))
                }
                None => run.finish(Path::new("mine-affordances.manifest.json")),
            }
        }
        Cmd::GradCheck { seed, tolerance, out } => {
            let mut run = Run::new("grad-check");
            run.manifest.seed = Some(seed);
            let mut results = primitive_suite(seed)?;
            results.push(("model", full_model_check(seed)?));
            let mut text = String::new();
            let mut failed = Vec::new();
            for (name, err) in &results {
                let ok = *err < tolerance;
                text.push_str(&format!("{name}\t{err:.3e}\t{}\n", if ok { "ok" } else { "FAIL" }));
                if !ok {
                    failed.push(*name);
                }
            }
            let out = out.unwrap_or_else(|| PathBuf::from("."));
            fs::create_dir_all(&out)?;
            let path = out.join("grad_check.tsv");
            fs::write(&path, &text)?;
            print!("{text}");
            run.output(&path)?;
            run.extra("tolerance", tolerance);
            run.finish(&out.join("grad-check.manifest.json"))?;
            if !failed.is_empty() {
                bail!("gradient check failed for {}", failed.join(", "));
            }
            Ok(())
        }
    }
}

/// Full-model check on a small generated KB: one sentence with two
/// mentions, small widths, every parameter trainable.
fn full_model_check(seed: u64) -> Result<f64> {
    let dir = std::env::temp_dir().join(format!("ned-grad-check-{}-{seed}", std::process::id()));
    let params = GenParams {
        n_entities: 15,
        n_types: 6,
        n_relations: 5,
        n_sentences: 40,
        k_ambiguity: 3,
        seed,
        ..GenParams::default()
    };
    let (_, syn) = generate_all(&params, &dir)?;
    let mut cfg = TrainConfig {
        hidden: 8,
        d_entity: 4,
        d_type: 4,
        d_relation: 4,
        d_coarse: 4,
        ff_dim: 8,
        heads: 2,
        freeze_encoder: false,
        encoder_layers: 1,
        seed,
        ..TrainConfig::default()
    };
    cfg.candidates = 3;
    let kb = load_kb_dir(&dir.join("kb"), &cfg)?;
    fs::remove_dir_all(&dir).ok();
    let mut model = Model::new(cfg, ned_core::encoder::Vocab::build(&syn.train), &kb)?;
    let sentence = syn
        .train
        .sentences
        .iter()
        .find(|s| s.mentions.len() >= 2)
        .context("no two-mention sentence")?;
    let inst = model
        .prepare(sentence, &kb, MentionFilter::Train)?
        .context("sentence has no usable mention")?;
    Ok(model_grad_check(&mut model, &inst, None, 1e-5)?.max_rel_error)
}
