use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use ocor::corpus::{
    build_case_specs, encode, load_case_specs, load_corpus, resolve_cases, tokenize,
    write_case_specs, CorpusStats, Kind, TokenizerConfig,
};
use ocor::eval::{
    ensemble_ranking, perfect_ranking_sets, rank_cases, EvalReport, ScoreFile, ScoredRanking,
};
use ocor::model::Model;
use ocor::numerics::Checkpoint;
use ocor::overlap::{overlap_matrix_tokens, OverlapMetric};
use ocor::training::{train, TrainSinks};
use serde::{Deserialize, Serialize};

use crate::run_config::{load_file, Overrides, RunConfig};
use crate::{Cli, Command};

pub fn run(cli: Cli) -> Result<()> {
    let file = load_file(cli.config.as_deref())?;
    let mut threads = cli.threads;
    if threads.is_none() {
        threads = file.parse_opt("threads")?;
    }
    if let Some(n) = threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::Preprocess {
            corpus,
            out,
            cases_out,
            negatives,
            seed,
        } => {
            let run = RunConfig::build(file, &Overrides::default(), &[])?;
            preprocess(
                &corpus,
                &out,
                cases_out.as_deref(),
                negatives,
                seed,
                &run.model.tokenizer(),
            )
        }
        Command::Train {
            corpus,
            dev_cases,
            out_dir,
            dry_run,
            overrides,
        } => {
            let paths = [
                ("corpus", corpus.as_deref()),
                ("dev_cases", dev_cases.as_deref()),
                ("out_dir", out_dir.as_deref()),
            ];
            let run = RunConfig::build(file, &overrides, &paths)?;
            if dry_run {
                print!("{}", run.effective());
                return Ok(());
            }
            cmd_train(&run)
        }
        Command::Eval {
            checkpoint,
            corpus,
            cases,
            scores,
            lambda,
            out,
            perfect_sets,
        } => {
            let overrides = Overrides {
                lambda,
                ..Default::default()
            };
            let run = RunConfig::build(file, &overrides, &[])?;
            cmd_eval(
                &checkpoint,
                &corpus,
                &cases,
                &scores,
                run.lambda,
                out.as_deref(),
                perfect_sets.as_deref(),
            )
        }
        Command::Retrieve {
            checkpoint,
            query,
            candidates,
            top_k,
        } => retrieve(&checkpoint, &query, &candidates, top_k),
        Command::Overlap {
            query,
            code,
            metric,
            labels,
        } => {
            let metric: OverlapMetric = metric.parse().map_err(anyhow::Error::msg)?;
            print!("{}", overlap_tsv(&query, &code, metric, labels)?);
            Ok(())
        }
        Command::Describe {
            checkpoint,
            overrides,
        } => {
            let model = match checkpoint {
                Some(p) => load_model(&p)?,
                None => {
                    let run = RunConfig::build(file, &overrides, &[])?;
                    Model::init(run.model, run.train.seed)?
                }
            };
            print!("{}", model.describe());
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct TokenizedPair<'a> {
    id: &'a str,
    question_tokens: Vec<String>,
    code_tokens: Vec<String>,
}

fn preprocess(
    corpus: &Path,
    out: &Path,
    cases_out: Option<&Path>,
    negatives: usize,
    seed: u64,
    tok: &TokenizerConfig,
) -> Result<()> {
    let pairs = load_corpus(corpus)?;
    let mut w =
        BufWriter::new(File::create(out).with_context(|| format!("creating {}", out.display()))?);
    for p in &pairs {
        let rec = TokenizedPair {
            id: &p.id,
            question_tokens: encode(&p.question, Kind::NaturalLanguage, tok)
                .tokens()
                .to_vec(),
            code_tokens: encode(&p.code, Kind::Code, tok).tokens().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    let stats = CorpusStats::compute(&pairs);
    println!("statistic\tvalue");
    println!("QC-pairs\t{}", stats.pairs);
    println!(
        "Avg. tokens in description\t{:.2}",
        stats.avg_tokens_description
    );
    println!(
        "Max tokens in description\t{}",
        stats.max_tokens_description
    );
    println!("Avg. tokens in code\t{:.2}", stats.avg_tokens_code);
    println!("Max tokens in code\t{}", stats.max_tokens_code);
    if let Some(path) = cases_out {
        let specs = build_case_specs(&pairs, negatives, seed)?;
        write_case_specs(path, &specs)?;
        log::info!("wrote {} cases to {}", specs.len(), path.display());
    }
    Ok(())
}

fn cmd_train(run: &RunConfig) -> Result<()> {
    let Some(corpus) = &run.corpus else {
        bail!("no corpus given (use --corpus or `corpus = ...` in the config)");
    };
    let out_dir = run.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let pairs = load_corpus(corpus)?;
    let dev = match &run.dev_cases {
        Some(p) => Some(resolve_cases(
            &load_case_specs(p)?,
            &pairs,
            &run.model.tokenizer(),
        )?),
        None => None,
    };
    let meta = run.effective();
    log::info!("effective config:\n{meta}");

    let mut model = Model::init(run.model.clone(), run.train.seed)?;
    let log_path = out_dir.join("train.log.jsonl");
    let mut log = BufWriter::new(File::create(&log_path)?);
    let sinks = TrainSinks {
        checkpoint_dir: Some(&out_dir),
        log: Some(&mut log),
        metadata: Some(&meta),
        ..Default::default()
    };
    let outcome = train(&mut model, &pairs, dev.as_deref(), &run.train, sinks)?;
    log.flush()?;
    let final_path = out_dir.join("model.ckpt");
    model
        .to_checkpoint_with(outcome.steps, &meta)
        .save(&final_path)?;
    if let (Some(e), Some(m)) = (outcome.best_epoch, outcome.best_dev_mrr) {
        println!("best dev MRR {m:.4} at epoch {e}");
    }
    println!("wrote {}", final_path.display());
    Ok(())
}

fn load_model(path: &Path) -> Result<Model> {
    let ckpt = Checkpoint::load(path)?;
    Ok(Model::from_checkpoint(&ckpt)?)
}

/// Results file: the run seed plus per-model reports.
#[derive(Serialize)]
struct EvalOutput {
    seed: Option<u64>,
    lambda: f64,
    reports: Vec<EvalReport>,
}

fn cmd_eval(
    checkpoint: &Path,
    corpus: &Path,
    cases: &Path,
    score_files: &[PathBuf],
    lambda: f64,
    out: Option<&Path>,
    perfect: Option<&Path>,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let seed = ocor::config::KeyValues::parse(&ckpt.config_text)?.parse_opt("seed")?;
    let model = Model::from_checkpoint(&ckpt)?;
    let pairs = load_corpus(corpus)?;
    let cases = resolve_cases(
        &load_case_specs(cases)?,
        &pairs,
        &model.config().tokenizer(),
    )?;
    let own = rank_cases(&model, &cases)?;

    let mut reports = vec![EvalReport::new("ocor", &own)?];
    let mut per_model: Vec<(String, Vec<ScoredRanking>)> = vec![("ocor".into(), own.clone())];
    for path in score_files {
        let file = ScoreFile::load(path)?;
        let theirs = file.rank_cases(&cases)?;
        let mixed = own
            .iter()
            .zip(&cases)
            .map(|(r, c)| ensemble_ranking(r, &file.case_scores(c)?, lambda))
            .collect::<Result<Vec<_>, _>>()?;
        reports.push(EvalReport::new(file.model_name.clone(), &theirs)?);
        reports.push(EvalReport::new(
            format!("ocor+{}", file.model_name),
            &mixed,
        )?);
        per_model.push((file.model_name.clone(), theirs));
    }
    println!("model\tMRR");
    for r in &reports {
        println!("{}\t{:.4}", r.model, r.mrr);
    }

    if let Some(path) = out {
        let body = EvalOutput {
            seed,
            lambda,
            reports,
        };
        fs::write(path, serde_json::to_string_pretty(&body)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if let Some(path) = perfect {
        let sets = perfect_ranking_sets(&per_model)?;
        fs::write(path, serde_json::to_string_pretty(&sets)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        for (name, size) in &sets.sizes {
            println!("perfect\t{name}\t{size}");
        }
        for i in &sets.intersections {
            println!("perfect\t{}\t{}", i.models.join("&"), i.size);
        }
    }
    Ok(())
}

#[derive(Deserialize)]
struct Candidate {
    id: String,
    code: String,
}

fn retrieve(checkpoint: &Path, query: &str, candidates: &Path, top_k: usize) -> Result<()> {
    let model = load_model(checkpoint)?;
    let tok = model.config().tokenizer();
    let file =
        File::open(candidates).with_context(|| format!("opening {}", candidates.display()))?;
    let mut cands = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let c: Candidate = serde_json::from_str(&line)
            .with_context(|| format!("{}: line {}", candidates.display(), n + 1))?;
        cands.push(c);
    }
    if cands.is_empty() {
        bail!("{} has no candidates", candidates.display());
    }
    let q = encode(query, Kind::NaturalLanguage, &tok);
    let inputs = cands
        .iter()
        .map(|c| model.pair_input(&q, &encode(&c.code, Kind::Code, &tok)))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<_> = inputs.iter().collect();
    let scores = model.score_pairs(&refs)?;
    let ranking = ScoredRanking::new("query", scores, 0)?;
    for (rank, &i) in ranking.order.iter().take(top_k).enumerate() {
        println!("{}\t{:.4}\t{}", rank + 1, ranking.scores[i], cands[i].id);
    }
    Ok(())
}

fn overlap_tsv(query: &str, code: &str, metric: OverlapMetric, labels: bool) -> Result<String> {
    let q = tokenize(query, Kind::NaturalLanguage);
    let c = tokenize(code, Kind::Code);
    let m = overlap_matrix_tokens(metric, &q, &c, (Kind::NaturalLanguage, Kind::Code))?;
    if !labels {
        return Ok(m.to_tsv());
    }
    let mut s = String::new();
    s.push_str(&c.iter().fold(String::new(), |acc, t| acc + "\t" + t));
    s.push('\n');
    for (tok, line) in q.iter().zip(m.to_tsv().lines()) {
        s.push_str(&format!("{tok}\t{line}\n"));
    }
    Ok(s)
}
