mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;
use unlearn_core::corpus::CorpusEntry;
use unlearn_core::eval::{foot_slip_report, report_jsonl, report_table, train_extractors, ExtractorConfig, Extractors};
use unlearn_core::lora::{apply_policy, NegationPolicy, TaskVector};
use unlearn_core::model::{load_model, load_task_vector, save_model, save_task_vector, DenoiserParams};
use unlearn_core::motion::{load_corpus, save_corpus, save_motion, synth_corpus_with};
use unlearn_core::pipeline::{alpha_sweep, evaluate, generate, mean_reconstruction, sweep_tsv, train_base, Generator};
use unlearn_core::safety::{partition, Classifier, LemmaList, RemoteAgent, AGENT_ENV};
use unlearn_core::seed;
use unlearn_core::unlearn::absorb;

use config::RunConfig;

type S = f32;

#[derive(Parser)]
#[command(name = "motion-unlearn", version, about = "Absorb-then-negate unlearning for a toy motion diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key = value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads for batch-parallel evaluation.
    #[arg(long, default_value_t = 1)]
    threads: usize,
}

#[derive(Args, Clone)]
struct WithPolicy {
    #[command(flatten)]
    common: Common,
    /// static:<a> or gated:<a_safe>,<a_unsafe>
    #[arg(long)]
    policy: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Synth(Common),
    /// Train the base denoiser on the corpus.
    TrainBase(Common),
    /// Absorb the unsafe stream into adapters and write the task vector.
    Absorb(Common),
    /// Sample every corpus prompt from the negated model.
    Negate(WithPolicy),
    /// Per-split metrics for the base and negated models.
    Eval(WithPolicy),
    /// Write forget/retain ids from lemma matching.
    Partition(Common),
    /// Evaluate static negation over the scale grid.
    SweepAlpha(Common),
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn new(c: &Common, policy: Option<&str>) -> Result<Self> {
        let mut cfg = RunConfig::load(c.config.as_deref())?;
        if let Some(s) = c.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = &c.out {
            cfg.out = o.clone();
        }
        if let Some(p) = policy {
            cfg.policy = NegationPolicy::parse(p)?;
        }
        if c.threads == 0 {
            bail!("--threads must be at least 1");
        }
        // A pool may already exist when commands run in-process; that is fine.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(c.threads).build_global();
        fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
        Ok(Self { out: cfg.out.clone(), cfg })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn require(&self, rel: &str, what: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if !p.exists() {
            bail!("missing {what}: {} (run the producing command first)", p.display());
        }
        Ok(p)
    }

    fn corpus(&self) -> Result<Vec<CorpusEntry<S>>> {
        let dir = self.require("corpus/manifest.jsonl", "corpus manifest")?;
        Ok(load_corpus(dir.parent().expect("manifest has a parent"))?)
    }

    fn base(&self) -> Result<DenoiserParams<S>> {
        let dir = self.require("base/manifest.json", "base checkpoint")?;
        Ok(load_model(dir.parent().expect("manifest has a parent"))?)
    }

    fn task_vector(&self) -> Result<TaskVector<S>> {
        let dir = self.require("task_vector/manifest.json", "task vector")?;
        Ok(load_task_vector(dir.parent().expect("manifest has a parent"))?)
    }

    fn lemmas(&self) -> Result<LemmaList> {
        match &self.cfg.lemmas {
            Some(p) => Ok(LemmaList::from_file(p).with_context(|| format!("reading lemma list {}", p.display()))?),
            None => Ok(LemmaList::default_list()),
        }
    }

    fn classifier(&self) -> Result<Classifier> {
        let lemmas = self.lemmas()?;
        let url = std::env::var(AGENT_ENV).ok().filter(|u| !u.is_empty()).or(self.cfg.agent_url.clone());
        Ok(match url {
            Some(u) => Classifier::Remote(RemoteAgent::new(u, lemmas)),
            None => Classifier::Rules(lemmas),
        })
    }

    fn extractors(&self, corpus: &[CorpusEntry<S>]) -> Result<Extractors<S>> {
        Ok(train_extractors(corpus, seed::derive(self.cfg.seed, "extractors"), &ExtractorConfig::default())?)
    }
}

fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path).with_context(|| format!("creating {}", path.display()))?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_synth(ctx: &Ctx) -> Result<()> {
    let corpus = synth_corpus_with::<S>(&ctx.cfg.synth, ctx.cfg.seed, ctx.cfg.per_class)?;
    let dir = ctx.path("corpus");
    save_corpus(&dir, &corpus)?;
    let mut counts = std::collections::BTreeMap::new();
    for e in &corpus {
        *counts.entry(format!("level {} {}", e.level, e.split)).or_insert(0usize) += 1;
    }
    for (k, n) in counts {
        println!("{k}: {n}");
    }
    println!("wrote {} entries to {}", corpus.len(), dir.display());
    Ok(())
}

fn cmd_train_base(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let t0 = Instant::now();
    let (params, log) = train_base(&corpus, &ctx.cfg.base)?;
    save_model(&params, &ctx.path("base"))?;
    write_jsonl(&ctx.path("base_log.jsonl"), &log)?;
    let last = log.last().map_or(f64::NAN, |r| r.loss);
    println!("trained base for {} steps in {:.1?}; final loss {last:.4}", log.len(), t0.elapsed());
    Ok(())
}

fn cmd_absorb(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let base = ctx.base()?;
    let mut s1 = ctx.cfg.stage1.clone();
    if s1.checkpoint_every > 0 {
        s1.checkpoint_dir = Some(ctx.path("checkpoints"));
    }
    let t0 = Instant::now();
    let out = absorb(&base, &corpus, &s1)?;
    save_task_vector(&out.task_vector, &ctx.path("task_vector"))?;
    write_jsonl(&ctx.path("absorb_log.jsonl"), &out.log)?;
    println!(
        "absorbed for {} steps in {:.1?}; task vector norm {:.4}",
        out.log.len(),
        t0.elapsed(),
        out.task_vector.sq_norm().sqrt()
    );
    Ok(())
}

#[derive(Serialize)]
struct NegatedRecord {
    id: String,
    caption: String,
    level: u8,
    alpha: f64,
    policy: String,
    motion_file: String,
}

fn cmd_negate(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let base = ctx.base()?;
    let tv = ctx.task_vector()?;
    let classifier = ctx.classifier()?;
    let policy = ctx.cfg.policy;
    let entries: Vec<&CorpusEntry<S>> = corpus.iter().collect();
    let gen = Generator::Negated { delta: &tv, policy: &policy };
    let motions = generate(&base, gen, &entries, &classifier, ctx.cfg.eval.prefix_len, seed::derive(ctx.cfg.seed, "negate"))?;
    let dir = ctx.path("negated");
    fs::create_dir_all(dir.join("motions"))?;
    let mut records = Vec::with_capacity(entries.len());
    for (e, m) in entries.iter().zip(&motions) {
        let rel = format!("motions/{}.bin", e.id);
        save_motion(&dir.join(&rel), m)?;
        let level = classifier.classify(&e.caption)?.level;
        records.push(NegatedRecord {
            id: e.id.clone(),
            caption: e.caption.clone(),
            level: level.as_u8(),
            alpha: apply_policy(level, &policy),
            policy: policy.to_string(),
            motion_file: rel,
        });
    }
    write_jsonl(&dir.join("manifest.jsonl"), &records)?;
    for forget in [true, false] {
        let idx: Vec<usize> = (0..entries.len()).filter(|&i| entries[i].split.forget == forget).collect();
        if idx.is_empty() {
            continue;
        }
        let sub: Vec<&CorpusEntry<S>> = idx.iter().map(|&i| entries[i]).collect();
        let gm: Vec<_> = idx.iter().map(|&i| motions[i].clone()).collect();
        let recon = mean_reconstruction(&gm, &sub, ctx.cfg.eval.prefix_len)?;
        let slip = foot_slip_report(&gm)?;
        println!(
            "{}: n={} reconstruction {recon:.4} mean foot slip {:.4}",
            if forget { "forget" } else { "retain" },
            idx.len(),
            slip.mean_slip
        );
    }
    println!("wrote {} motions under {} with {policy}", motions.len(), dir.display());
    Ok(())
}

fn cmd_eval(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let base = ctx.base()?;
    let classifier = ctx.classifier()?;
    let ex = ctx.extractors(&corpus)?;
    let mut rows = evaluate("base", &base, Generator::Base, &corpus, &ex, &classifier, &ctx.cfg.eval)?;
    if ctx.path("task_vector/manifest.json").exists() {
        let tv = ctx.task_vector()?;
        let policy = ctx.cfg.policy;
        let gen = Generator::Negated { delta: &tv, policy: &policy };
        rows.extend(evaluate(&policy.to_string(), &base, gen, &corpus, &ex, &classifier, &ctx.cfg.eval)?);
    } else {
        info!("no task vector found; reporting the base model only");
    }
    fs::write(ctx.path("eval.jsonl"), report_jsonl(&rows)?)?;
    let table = report_table(&rows);
    fs::write(ctx.path("eval.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn cmd_partition(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let lemmas = ctx.lemmas()?;
    let (forget, retain) = partition(&corpus, &lemmas);
    let dir = ctx.path("partition");
    fs::create_dir_all(&dir)?;
    let ids = |v: &[&CorpusEntry<S>]| v.iter().map(|e| format!("{}\n", e.id)).collect::<String>();
    fs::write(dir.join("forget.txt"), ids(&forget))?;
    fs::write(dir.join("retain.txt"), ids(&retain))?;
    let agree = forget.iter().filter(|e| e.split.forget).count() + retain.iter().filter(|e| !e.split.forget).count();
    println!(
        "forget {} retain {}; agreement with corpus labels {agree}/{}",
        forget.len(),
        retain.len(),
        corpus.len()
    );
    Ok(())
}

fn cmd_sweep(ctx: &Ctx) -> Result<()> {
    let corpus = ctx.corpus()?;
    let base = ctx.base()?;
    let tv = ctx.task_vector()?;
    let classifier = ctx.classifier()?;
    let ex = ctx.extractors(&corpus)?;
    let rows = alpha_sweep(&base, &tv, &corpus, &ex, &classifier, &ctx.cfg.grid, &ctx.cfg.eval)?;
    write_jsonl(&ctx.path("sweep.jsonl"), &rows)?;
    for split in ["forget", "retain"] {
        let tsv = sweep_tsv(&rows, split);
        fs::write(ctx.path(&format!("sweep_{split}.tsv")), &tsv)?;
        println!("# {split}\n{tsv}");
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Synth(c) => cmd_synth(&Ctx::new(c, None)?),
        Command::TrainBase(c) => cmd_train_base(&Ctx::new(c, None)?),
        Command::Absorb(c) => cmd_absorb(&Ctx::new(c, None)?),
        Command::Negate(p) => cmd_negate(&Ctx::new(&p.common, p.policy.as_deref())?),
        Command::Eval(p) => cmd_eval(&Ctx::new(&p.common, p.policy.as_deref())?),
        Command::Partition(c) => cmd_partition(&Ctx::new(c, None)?),
        Command::SweepAlpha(c) => cmd_sweep(&Ctx::new(c, None)?),
    }
}
