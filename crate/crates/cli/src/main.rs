use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use segmix_core::eval::{kfold_holdout_eval, missing_value_experiment, Trained};
use segmix_core::model::DEFAULT_TAG_CONFIG_CAP;
use segmix_core::{
    generate_planted_blocks, parse_alignment, train, AlignedDataset, Alphabet, Caps, DirichletPrior, EmConfig,
    Format, Method, ParseOptions, PipelineConfig, PlantedConfig, Pruning, ScoreKind, ScoreTable,
    SegmentationModel,
};

#[derive(Parser)]
#[command(name = "segmix", version, about = "Segment aligned sequences into independent mixture blocks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Score candidates, find the best segmentation and fit the final model.
    Segment {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        run: RunArgs,
        /// dp, greedy, ind or clust.
        #[arg(long, default_value = "dp")]
        method: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fill in missing entries with a fitted model.
    Impute {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Most likely hidden state of every segment for every row.
    Type {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        input: InputArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Positions of a segment carrying the most information about its hidden state.
    Tags {
        #[arg(long)]
        model: PathBuf,
        /// 1-based segment index.
        #[arg(long)]
        segment: usize,
        #[arg(long)]
        budget: usize,
        /// Largest number of symbol configurations to enumerate.
        #[arg(long, default_value_t = DEFAULT_TAG_CONFIG_CAP)]
        max_configs: u128,
        #[arg(long)]
        out: PathBuf,
    },
    /// Held-out likelihood comparison or masked-entry imputation experiment.
    Eval {
        #[command(flatten)]
        input: InputArgs,
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_parser = ["holdout", "missing"])]
        protocol: String,
        /// Methods compared by the holdout protocol; IND is always included.
        #[arg(long, value_delimiter = ',', default_value = "ind,dp,greedy,clust")]
        methods: Vec<String>,
        /// Method trained by the missing-value protocol.
        #[arg(long, default_value = "dp")]
        method: String,
        #[arg(long, default_value_t = 10)]
        eval_folds: usize,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.10")]
        rates: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a synthetic planted-block dataset and its true segmentation.
    Gen {
        #[arg(long, default_value_t = 40)]
        rows: usize,
        #[arg(long, default_value_t = 60)]
        cols: usize,
        #[arg(long, default_value_t = 2)]
        alphabet: usize,
        #[arg(long, default_value_t = 10)]
        block_length: usize,
        #[arg(long, default_value_t = 3)]
        types: usize,
        #[arg(long, default_value_t = 0.05)]
        noise: f64,
        #[arg(long, default_value_t = 0.0)]
        missing: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Matrix output path.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth segmentation JSON.
        #[arg(long)]
        truth: Option<PathBuf>,
    },
}

#[derive(Args, Clone)]
struct InputArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "matrix")]
    format: Format,
    #[arg(long, default_value = "?")]
    missing: String,
    /// Token separator; one character per position when absent.
    #[arg(long)]
    delimiter: Option<char>,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// bic, cs or cv.
    #[arg(long, default_value = "cv")]
    score: String,
    /// Folds of the CV score.
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 5)]
    max_card: usize,
    #[arg(long, default_value_t = 50)]
    max_seglen: usize,
    /// EM restarts per candidate score.
    #[arg(long, default_value_t = 10)]
    restarts: usize,
    /// EM restarts for the final model.
    #[arg(long, default_value_t = 25)]
    final_restarts: usize,
    #[arg(long, default_value_t = 500)]
    max_iterations: usize,
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    /// Dirichlet concentration on emissions; defaults to 1/A.
    #[arg(long)]
    prior: Option<f64>,
    /// Dirichlet concentration on mixture weights.
    #[arg(long, default_value_t = 0.0)]
    weight_prior: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Worker threads; all cores when absent.
    #[arg(long)]
    threads: Option<usize>,
    /// Skip candidates with the cardinality and extension heuristics.
    #[arg(long)]
    prune: bool,
    #[arg(long, default_value_t = 0.0)]
    slack: f64,
}

/// The settings that determine a run's results.
#[derive(Serialize)]
struct RunConfig {
    input: String,
    format: Format,
    missing_token: String,
    delimiter: Option<char>,
    method: String,
    score: ScoreKind,
    max_card: usize,
    max_seglen: usize,
    restarts: usize,
    final_restarts: usize,
    max_iterations: usize,
    tolerance: f64,
    emission_prior: Option<f64>,
    weight_prior: f64,
    seed: u64,
    pruning: Option<Pruning>,
}

impl RunArgs {
    fn score_kind(&self) -> Result<ScoreKind> {
        Ok(match self.score.as_str() {
            "cv" => ScoreKind::Cv { folds: self.folds },
            other => other.parse()?,
        })
    }

    fn pipeline(&self) -> Result<PipelineConfig> {
        let prior = self.prior.map(|a| DirichletPrior {
            emission_concentration: a,
            weight_concentration: self.weight_prior,
        });
        Ok(PipelineConfig {
            caps: Caps {
                max_card: self.max_card,
                max_len: self.max_seglen,
            },
            prior,
            scoring_em: EmConfig {
                restarts: self.restarts,
                max_iterations: self.max_iterations,
                tolerance: self.tolerance,
                ..EmConfig::default()
            },
            final_restarts: self.final_restarts,
            pruning: self.prune.then_some(Pruning { slack: self.slack }),
            clust_folds: self.folds,
            seed: self.seed,
        })
    }

    fn config(&self, input: &InputArgs, method: &str) -> Result<RunConfig> {
        Ok(RunConfig {
            input: input.input.display().to_string(),
            format: input.format,
            missing_token: input.missing.clone(),
            delimiter: input.delimiter,
            method: method.to_string(),
            score: self.score_kind()?,
            max_card: self.max_card,
            max_seglen: self.max_seglen,
            restarts: self.restarts,
            final_restarts: self.final_restarts,
            max_iterations: self.max_iterations,
            tolerance: self.tolerance,
            emission_prior: self.prior,
            weight_prior: self.weight_prior,
            seed: self.seed,
            pruning: self.prune.then_some(Pruning { slack: self.slack }),
        })
    }

    fn init_threads(&self) -> Result<()> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads.unwrap_or(0))
            .build_global()
            .context("configuring the thread pool")
    }
}

fn read_input(input: &InputArgs, alphabet: Option<&Alphabet>) -> Result<AlignedDataset> {
    let text = fs::read_to_string(&input.input).with_context(|| format!("reading {}", input.input.display()))?;
    let opts = ParseOptions {
        format: input.format,
        missing_token: input.missing.clone(),
        delimiter: input.delimiter,
        alphabet: alphabet.cloned(),
    };
    parse_alignment(&text, &opts).with_context(|| format!("parsing {}", input.input.display()))
}

fn read_model(path: &Path) -> Result<SegmentationModel> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    SegmentationModel::from_json(&text).with_context(|| format!("loading model {}", path.display()))
}

/// Parse `input` against the model's alphabet and check its width.
fn read_for_model(input: &InputArgs, model: &SegmentationModel) -> Result<AlignedDataset> {
    let ds = read_input(input, Some(model.alphabet()))?;
    if ds.n_cols() != model.n_cols() {
        bail!(
            "input has {} positions but the model covers {}",
            ds.n_cols(),
            model.n_cols()
        );
    }
    Ok(ds)
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn pretty(value: &serde_json::Value) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

/// First line of every TSV output.
fn provenance_line(value: &serde_json::Value) -> Result<String> {
    Ok(format!("# {}\n", serde_json::to_string(value)?))
}

fn cmd_segment(input: InputArgs, run: RunArgs, method_name: String, out: PathBuf) -> Result<()> {
    run.init_threads()?;
    let started = Instant::now();
    let kind = run.score_kind()?;
    let method = Method::from_parts(&method_name, kind)?;
    let config = run.config(&input, &method_name)?;
    let cfg = run.pipeline()?;
    let ds = read_input(&input, None)?;
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let scores_path = out.join("scores.tsv");
    let resume = if scores_path.exists() && method.score_kind().is_some() {
        let text = fs::read_to_string(&scores_path)?;
        match ScoreTable::from_tsv(&text) {
            Ok(t) => Some(t),
            Err(e) => {
                log::warn!("ignoring unreadable {}: {e}", scores_path.display());
                None
            }
        }
    } else {
        None
    };
    let Trained { mut model, table, total } = train(&ds, method, &cfg, resume.as_ref())?;
    let resumed = match (&resume, &table) {
        (Some(old), Some(new)) if old.meta.compatible(&new.meta) => {
            new.iter().filter(|((s, l, c), _)| old.get(*s, *l, *c).is_some()).count()
        }
        _ => 0,
    };
    let config_json = serde_json::to_value(&config)?;
    model.provenance.config = Some(config_json.clone());
    let provenance = serde_json::to_value(&model.provenance)?;

    if let Some(t) = &table {
        write(&scores_path, &t.to_tsv())?;
    }
    let seg = model.segmentation();
    write(
        &out.join("segmentation.json"),
        &pretty(&json!({
            "segments": seg,
            "total_score": total,
            "provenance": provenance,
        }))?,
    )?;
    write(&out.join("model.json"), &model.to_json()?)?;
    write(
        &out.join("run.json"),
        &pretty(&json!({
            "config": config_json,
            "threads": run.threads,
            "out": out.display().to_string(),
            "rows": ds.n_rows(),
            "cols": ds.n_cols(),
            "alphabet": ds.alphabet(),
            "candidates_scored": table.as_ref().map(ScoreTable::len),
            "candidates_skipped": table.as_ref().map(|t| t.skipped().count()),
            "scores_resumed": resumed,
            "segments": seg.len(),
            "correlated_segments": seg.correlated_count(),
            "elapsed_seconds": started.elapsed().as_secs_f64(),
        }))?,
    )?;
    eprintln!(
        "{} segments ({} correlated) written to {}",
        seg.len(),
        seg.correlated_count(),
        out.display()
    );
    Ok(())
}

fn cmd_impute(model_path: PathBuf, input: InputArgs, out: PathBuf) -> Result<()> {
    let model = read_model(&model_path)?;
    let ds = read_for_model(&input, &model)?;
    fs::create_dir_all(&out)?;
    let alphabet = model.alphabet();
    let provenance = json!({
        "model": model_path.display().to_string(),
        "input": input.input.display().to_string(),
        "model_provenance": model.provenance,
    });

    let mut rows = Vec::with_capacity(ds.n_rows());
    let mut tsv = provenance_line(&provenance)?;
    tsv.push_str("row\tlabel\tcol\tsymbol\tprobability\tdistribution\n");
    let mut view = String::new();
    for r in 0..ds.n_rows() {
        let imp = model.impute_missing(ds.row(r));
        let label = ds.row_label(r);
        let mut line = String::new();
        let mut imputed = imp.cells.iter().map(|c| c.col).peekable();
        for (c, &v) in imp.completed.iter().enumerate() {
            let sym = alphabet.symbol(v);
            if imputed.peek() == Some(&c) {
                imputed.next();
                line.push_str(&format!("[{sym}]"));
            } else {
                line.push_str(sym);
            }
        }
        view.push_str(&format!("{label}\t{line}\n"));
        for cell in &imp.cells {
            let dist: Vec<String> = cell.distribution.iter().map(|p| p.to_string()).collect();
            tsv.push_str(&format!(
                "{}\t{label}\t{}\t{}\t{}\t{}\n",
                r + 1,
                cell.col + 1,
                alphabet.symbol(cell.symbol),
                cell.probability(),
                dist.join(",")
            ));
        }
        rows.push(imp.completed.into_iter().map(Some).collect());
    }
    let completed = AlignedDataset::from_rows(alphabet.clone(), rows)?;
    let completed = match ds.labels() {
        Some(l) => completed.with_labels(l.to_vec())?,
        None => completed,
    };
    let (name, text) = match input.format {
        Format::Matrix => ("completed.txt", completed.to_matrix(&input.missing, input.delimiter)?),
        Format::Fasta => ("completed.fasta", completed.to_fasta(&input.missing)?),
    };
    write(&out.join(name), &text)?;
    write(&out.join("imputed.tsv"), &tsv)?;
    write(&out.join("imputed_view.txt"), &view)?;
    Ok(())
}

fn cmd_type(model_path: PathBuf, input: InputArgs, out: PathBuf) -> Result<()> {
    let model = read_model(&model_path)?;
    let ds = read_for_model(&input, &model)?;
    let provenance = json!({
        "model": model_path.display().to_string(),
        "input": input.input.display().to_string(),
        "model_provenance": model.provenance,
    });
    let mut tsv = provenance_line(&provenance)?;
    tsv.push_str("row\tlabel\tsegment\tstart\tend\tstate\tposterior\n");
    for r in 0..ds.n_rows() {
        let label = ds.row_label(r);
        for call in model.assign_types(ds.row(r)) {
            let seg = model.segments()[call.segment].segment;
            let state = call.state.map_or_else(|| "-".to_string(), |k| (k + 1).to_string());
            tsv.push_str(&format!(
                "{}\t{label}\t{}\t{}\t{}\t{state}\t{}\n",
                r + 1,
                call.segment + 1,
                seg.start,
                seg.end(),
                call.posterior
            ));
        }
    }
    write(&out, &tsv)
}

fn cmd_tags(model_path: PathBuf, segment: usize, budget: usize, max_configs: u128, out: PathBuf) -> Result<()> {
    let model = read_model(&model_path)?;
    if segment == 0 {
        bail!("segments are numbered from 1");
    }
    let picks = model.select_tags(segment - 1, budget, max_configs)?;
    let provenance = json!({
        "model": model_path.display().to_string(),
        "segment": segment,
        "budget": budget,
        "model_provenance": model.provenance,
    });
    let mut tsv = provenance_line(&provenance)?;
    tsv.push_str("rank\tposition\tcumulative_mi\tgain\n");
    let mut prev = 0.0;
    for (i, p) in picks.iter().enumerate() {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            i + 1,
            p.position,
            p.cumulative_mi,
            p.cumulative_mi - prev
        ));
        prev = p.cumulative_mi;
    }
    write(&out, &tsv)
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    input: InputArgs,
    run: RunArgs,
    protocol: String,
    methods: Vec<String>,
    method: String,
    eval_folds: usize,
    rates: Vec<f64>,
    repeats: usize,
    out: PathBuf,
) -> Result<()> {
    run.init_threads()?;
    let kind = run.score_kind()?;
    let cfg = run.pipeline()?;
    let ds = read_input(&input, None)?;
    fs::create_dir_all(&out)?;
    match protocol.as_str() {
        "holdout" => {
            let methods = methods
                .iter()
                .map(|m| Method::from_parts(m.trim(), kind))
                .collect::<Result<Vec<_>, _>>()?;
            let config = run.config(&input, &methods.iter().map(ToString::to_string).collect::<Vec<_>>().join(","))?;
            let provenance = json!({ "protocol": "holdout", "folds": eval_folds, "config": config });
            let report = kfold_holdout_eval(&ds, &methods, eval_folds, &cfg, None)?;
            write(
                &out.join("holdout.json"),
                &pretty(&json!({ "report": report, "provenance": provenance }))?,
            )?;
            let line = provenance_line(&provenance)?;
            write(&out.join("holdout.tsv"), &(line.clone() + &report.to_tsv(ds.labels())))?;
            write(&out.join("holdout_long.tsv"), &(line + &report.long_table()))?;
            for (m, rel) in report.methods.iter().zip(&report.relative_totals) {
                eprintln!("{m}\t{rel:+.4}");
            }
        }
        "missing" => {
            let m = Method::from_parts(&method, kind)?;
            let config = run.config(&input, &m.to_string())?;
            let provenance = json!({ "protocol": "missing", "rates": rates, "repeats": repeats, "config": config });
            let report = missing_value_experiment(&ds, &rates, repeats, m, &cfg)?;
            write(
                &out.join("missing.json"),
                &pretty(&json!({ "report": report, "provenance": provenance }))?,
            )?;
            let line = provenance_line(&provenance)?;
            write(&out.join("missing.tsv"), &(line.clone() + &report.to_tsv()))?;
            write(&out.join("missing_long.tsv"), &(line + &report.long_table()))?;
            eprint!("{}", report.to_tsv());
        }
        other => bail!("unknown protocol {other:?}"),
    }
    Ok(())
}

fn cmd_gen(cfg: PlantedConfig, out: PathBuf, truth: Option<PathBuf>) -> Result<()> {
    let (ds, seg) = generate_planted_blocks(&cfg)?;
    write(&out, &ds.to_matrix("?", None)?)?;
    if let Some(path) = truth {
        write(&path, &pretty(&json!({ "segments": seg, "generator": cfg }))?)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Segment { input, run, method, out } => cmd_segment(input, run, method, out),
        Command::Impute { model, input, out } => cmd_impute(model, input, out),
        Command::Type { model, input, out } => cmd_type(model, input, out),
        Command::Tags {
            model,
            segment,
            budget,
            max_configs,
            out,
        } => cmd_tags(model, segment, budget, max_configs, out),
        Command::Eval {
            input,
            run,
            protocol,
            methods,
            method,
            eval_folds,
            rates,
            repeats,
            out,
        } => cmd_eval(input, run, protocol, methods, method, eval_folds, rates, repeats, out),
        Command::Gen {
            rows,
            cols,
            alphabet,
            block_length,
            types,
            noise,
            missing,
            seed,
            out,
            truth,
        } => cmd_gen(
            PlantedConfig {
                n_rows: rows,
                n_cols: cols,
                alphabet_size: alphabet,
                block_length,
                types_per_block: types,
                noise,
                missing_rate: missing,
                seed,
            },
            out,
            truth,
        ),
    }
}
