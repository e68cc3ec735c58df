use std::io::Read;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use temed_core::dataset::{split, transform, SplitAssignment, TabularDataset};
use temed_core::evalkit::{
    classification_metrics, compare_tables, label_metrics, render_report, train_on_split, NamedReport, ReportFormat,
};
use temed_core::llm_gateway::{CompletionRequest, GatewayError};
use temed_core::models::{ModelDocument, ModelFamily};
use temed_core::rextract::{build_fewshot_classifier_prompt, parse_fewshot_answer, PromptTemplates};
use temed_core::vorc::{
    extract_corpus, read_corpus_jsonl, write_extracted_csv, write_provenance_jsonl, ProvenanceEntry, VorcBudget,
    VorcError,
};
use temed_core::ExtractionSchema;

mod config;
mod error;

use config::{require_path, RunConfig};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "temed", version, about = "Extract tables from medical reports with an LLM and fit interpretable classifiers")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    /// Print machine-readable JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render the extraction prompt for one report without calling a provider.
    PromptPreview(PreviewArgs),
    /// Run the extraction loop over a corpus and write the extracted table.
    Extract(ExtractArgs),
    /// Grid-search one model family on a labeled table.
    Train(TrainArgs),
    /// Score a saved model on a table.
    Evaluate(EvaluateArgs),
    /// Compare an extracted table with ground truth and measure model fidelity.
    Compare(CompareArgs),
    /// Few-shot classification of reports directly by the provider.
    Fewshot(FewshotArgs),
}

#[derive(Debug, Args)]
struct SchemaArgs {
    #[arg(long)]
    schema: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PreviewArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// Report text file, or `-` for stdin.
    #[arg(long)]
    report: PathBuf,
    /// Drop the guidelines and the example reasoning.
    #[arg(long)]
    no_reasoning: bool,
}

#[derive(Debug, Args)]
struct ExtractArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long)]
    templates: Option<PathBuf>,
    /// JSON-lines corpus of {"id", "text", "label"?} objects.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Answer from a replay script instead of the configured provider.
    #[arg(long)]
    replay: Option<PathBuf>,
    #[arg(long)]
    budget: Option<u32>,
    #[arg(long)]
    parallelism: Option<usize>,
    /// Use the prompt without reasoning guidelines or example reasoning.
    #[arg(long)]
    no_reasoning: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    /// Labeled CSV table.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    family: FamilyArg,
    /// Reuse an existing split file instead of drawing one from the seed.
    #[arg(long)]
    split: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Subset {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    split: Option<PathBuf>,
    /// Rows to score; defaults to `test` with a split file and `all` without.
    #[arg(long, value_enum)]
    subset: Option<Subset>,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    extracted: PathBuf,
    #[arg(long)]
    provenance: Option<PathBuf>,
    /// Model families for the fidelity reports.
    #[arg(long, value_enum, value_delimiter = ',', default_values_t = [FamilyArg::Logreg, FamilyArg::Dtree, FamilyArg::Gbdt])]
    family: Vec<FamilyArg>,
}

#[derive(Debug, Args)]
struct FewshotArgs {
    #[command(flatten)]
    schema: SchemaArgs,
    /// JSON-lines file of labeled example reports.
    #[arg(long)]
    shots: Option<PathBuf>,
    /// Use only the first N shots.
    #[arg(long)]
    n_shots: Option<usize>,
    #[arg(long)]
    corpus: Option<PathBuf>,
    #[arg(long)]
    replay: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FamilyArg {
    Logreg,
    Dtree,
    Gbdt,
}

impl From<FamilyArg> for ModelFamily {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Logreg => ModelFamily::Logreg,
            FamilyArg::Dtree => ModelFamily::Dtree,
            FamilyArg::Gbdt => ModelFamily::Gbdt,
        }
    }
}

struct Ctx {
    cfg: RunConfig,
    json: bool,
}

impl Ctx {
    fn out(&self, name: &str) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(&self.cfg.output_dir)
            .map_err(|e| CliError::Usage(format!("cannot create {}: {e}", self.cfg.output_dir.display())))?;
        Ok(self.cfg.output_dir.join(name))
    }

    fn schema(&self, flag: &SchemaArgs) -> Result<ExtractionSchema, CliError> {
        let path = require_path(flag.schema.as_ref().or(self.cfg.schema.as_ref()), "--schema")?;
        Ok(ExtractionSchema::load(path)?)
    }

    fn format(&self) -> ReportFormat {
        if self.json {
            ReportFormat::Json
        } else {
            ReportFormat::Text
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::Usage(format!("cannot write {}: {e}", path.display())))
}

fn prompt_preview(ctx: &Ctx, args: PreviewArgs) -> Result<(), CliError> {
    let schema = ctx.schema(&args.schema)?;
    let dir = require_path(args.templates.as_ref().or(ctx.cfg.templates.as_ref()), "--templates")?;
    let templates = PromptTemplates::load_dir(dir, &schema)?;
    let report = if args.report.as_os_str() == "-" {
        let mut s = String::new();
        std::io::stdin().read_to_string(&mut s)?;
        s
    } else {
        std::fs::read_to_string(&args.report)
            .map_err(|e| CliError::Usage(format!("cannot read report {}: {e}", args.report.display())))?
    };
    let prompt = if args.no_reasoning {
        templates.render_extract_only(&schema, &report)?
    } else {
        templates.render(&schema, &report)?
    };
    println!("{prompt}");
    Ok(())
}

fn extract(ctx: &mut Ctx, args: ExtractArgs) -> Result<(), CliError> {
    ctx.cfg.replay_override(args.replay);
    let schema = ctx.schema(&args.schema)?;
    let dir = require_path(args.templates.as_ref().or(ctx.cfg.templates.as_ref()), "--templates")?;
    let corpus = require_path(args.corpus.as_ref().or(ctx.cfg.corpus.as_ref()), "--corpus")?;
    let mut templates = PromptTemplates::load_dir(dir, &schema)?;
    if args.no_reasoning {
        templates = templates.extract_only();
    }
    let budget = args
        .budget
        .map(|b| VorcBudget { max_correction_prompts: b })
        .unwrap_or(ctx.cfg.budget);
    let parallelism = args.parallelism.unwrap_or(ctx.cfg.parallelism);
    let reports = read_corpus_jsonl(corpus)?;
    let provider = ctx.cfg.provider()?;
    let out = extract_corpus(&provider, &reports, &schema, &templates, budget, parallelism)?;

    let mut csv = Vec::new();
    write_extracted_csv(&mut csv, &schema, &out.records, &reports)?;
    write_file(&ctx.out("extracted.csv")?, csv)?;
    let mut prov = Vec::new();
    write_provenance_jsonl(&mut prov, &out.provenance)?;
    write_file(&ctx.out("provenance.jsonl")?, prov)?;
    let stats = serde_json::to_string_pretty(&out.stats).expect("stats serialize") + "\n";
    write_file(&ctx.out("extract_stats.json")?, &stats)?;

    for f in &out.failures {
        eprintln!("failed: {f}");
    }
    if ctx.json {
        print!("{stats}");
    } else {
        let rate = out.stats.vorc_call_rate.map_or_else(|| "-".into(), |r| format!("{r:.3}"));
        println!(
            "extracted {}/{} records, {} failed, vorc_call_rate {rate}",
            out.stats.n_records, out.stats.n_reports, out.stats.n_failures
        );
    }
    let exhausted = out.failures.iter().find_map(|f| match f {
        VorcError::Provider {
            error: e @ GatewayError::ExhaustedRetries { .. },
            ..
        } => Some(e.to_string()),
        _ => None,
    });
    match exhausted {
        Some(msg) => Err(CliError::ProviderExhausted(msg)),
        None => Ok(()),
    }
}

fn train(ctx: &Ctx, args: TrainArgs) -> Result<(), CliError> {
    let schema = ctx.schema(&args.schema)?;
    let data = TabularDataset::load_csv(&args.data, &schema)?;
    let assignment = match &args.split {
        Some(p) => read_split(p)?,
        None => split(&data, ctx.cfg.seed)?,
    };
    let family = ModelFamily::from(args.family);
    let fitted = train_on_split(&data, &assignment, family)?;
    let doc = ModelDocument::new(fitted.model.clone(), fitted.encoder.clone(), schema, Some(assignment.seed));
    let model_path = ctx.out(&format!("{family}_model.json"))?;
    doc.save(&model_path)?;
    write_file(&ctx.out(&format!("{family}_grid.csv"))?, fitted.grid.to_csv())?;
    write_file(&ctx.out("split.json")?, assignment.to_json() + "\n")?;
    let best = fitted.grid.best();
    if ctx.json {
        let summary = serde_json::json!({
            "family": family.as_str(),
            "selected": best.hyperparams.to_string(),
            "val_accuracy": best.val_accuracy,
            "grid_size": fitted.grid.candidates.len(),
            "model": model_path.display().to_string(),
        });
        println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
    } else {
        println!(
            "{family}: selected {} (val accuracy {:.4}) from {} candidates; model written to {}",
            best.hyperparams,
            best.val_accuracy,
            fitted.grid.candidates.len(),
            model_path.display()
        );
    }
    Ok(())
}

fn read_split(path: &Path) -> Result<SplitAssignment, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read split {}: {e}", path.display())))?;
    SplitAssignment::from_json(&text).map_err(|e| CliError::Usage(format!("split {}: {e}", path.display())))
}

fn evaluate(ctx: &Ctx, args: EvaluateArgs) -> Result<(), CliError> {
    let doc = ModelDocument::load(&args.model)?;
    let data = TabularDataset::load_csv(&args.data, &doc.schema)?;
    let subset = args.subset.unwrap_or(if args.split.is_some() { Subset::Test } else { Subset::All });
    let ids: Vec<usize> = match (subset, &args.split) {
        (Subset::All, _) => (0..data.n()).collect(),
        (_, None) => return Err(CliError::Usage("--subset other than all needs --split".into())),
        (s, Some(p)) => {
            let a = read_split(p)?;
            match s {
                Subset::Train => a.train,
                Subset::Val => a.val,
                _ => a.test,
            }
        }
    };
    let m = transform(&data, &doc.encoder, &ids)?;
    let scores = doc.model.predict_proba(&m.rows)?;
    let report = classification_metrics(m.labels()?, &scores, 0.5)?;
    let name = format!("{}_{}", doc.model.family(), format!("{subset:?}").to_lowercase());
    let reports = [NamedReport::Classification { name, report }];
    write_file(&ctx.out("evaluation.json")?, render_report(&reports, ReportFormat::Json))?;
    print!("{}", render_report(&reports, ctx.format()));
    Ok(())
}

fn compare(ctx: &Ctx, args: CompareArgs) -> Result<(), CliError> {
    let schema = ctx.schema(&args.schema)?;
    let truth = TabularDataset::load_csv(&args.truth, &schema)?;
    let extracted = TabularDataset::load_csv(&args.extracted, &schema)?;
    let provenance = match &args.provenance {
        Some(p) => Some(read_provenance(p)?),
        None => None,
    };
    let families: Vec<ModelFamily> = args.family.iter().map(|&f| f.into()).collect();
    let reports = compare_tables(&truth, &extracted, provenance.as_deref(), &families, ctx.cfg.seed)?;
    write_file(&ctx.out("compare_report.json")?, render_report(&reports, ReportFormat::Json))?;
    write_file(&ctx.out("compare_report.csv")?, render_report(&reports, ReportFormat::Csv))?;
    print!("{}", render_report(&reports, ctx.format()));
    Ok(())
}

fn read_provenance(path: &Path) -> Result<Vec<ProvenanceEntry>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read provenance {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Usage(format!("provenance {} line {}: {e}", path.display(), i + 1)))
        })
        .collect()
}

fn fewshot(ctx: &mut Ctx, args: FewshotArgs) -> Result<(), CliError> {
    ctx.cfg.replay_override(args.replay);
    let schema = ctx.schema(&args.schema)?;
    let label = schema
        .label()
        .cloned()
        .ok_or_else(|| CliError::Usage("schema has no label; few-shot classification needs one".into()))?;
    let shots_path = require_path(args.shots.as_ref().or(ctx.cfg.shots.as_ref()), "--shots")?;
    let corpus = require_path(args.corpus.as_ref().or(ctx.cfg.corpus.as_ref()), "--corpus")?;
    let mut shots = read_corpus_jsonl(shots_path)?;
    if let Some(k) = args.n_shots {
        shots.truncate(k);
    }
    if shots.is_empty() {
        return Err(CliError::Usage("few-shot classification needs at least one shot".into()));
    }
    let shots: Vec<(String, String)> = shots
        .into_iter()
        .map(|r| match r.label {
            Some(l) => Ok((r.text, l)),
            None => Err(CliError::Usage(format!("shot `{}` has no label", r.id))),
        })
        .collect::<Result<_, _>>()?;
    let reports = read_corpus_jsonl(corpus)?;
    let provider = ctx.cfg.provider()?;

    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["id", "prediction", "answer"]).map_err(|e| CliError::Usage(e.to_string()))?;
    let (mut y_true, mut y_pred, mut abstained) = (Vec::new(), Vec::new(), 0usize);
    for r in &reports {
        let prompt = build_fewshot_classifier_prompt(&shots, &r.text, &label)?;
        let mut req = CompletionRequest::new(prompt);
        req.max_tokens = 16;
        let answer = provider.complete(&req)?.text;
        let parsed = parse_fewshot_answer(&answer, &label);
        let shown = parsed.map_or("abstain", |v| label.decode(v));
        w.write_record([r.id.as_str(), shown, answer.trim()])
            .map_err(|e| CliError::Usage(e.to_string()))?;
        match (parsed, r.label.as_deref().and_then(|l| label.encode(l))) {
            (None, _) => abstained += 1,
            (Some(p), Some(t)) => {
                y_pred.push(p);
                y_true.push(t);
            }
            (Some(_), None) => {}
        }
    }
    let table = w.into_inner().map_err(|e| CliError::Usage(e.to_string()))?;
    write_file(&ctx.out("fewshot_labels.csv")?, table)?;
    if y_true.is_empty() {
        return Err(CliError::Usage(format!(
            "no scorable reports ({abstained} abstained, the rest unlabeled)"
        )));
    }
    let mut report = label_metrics(&y_true, &y_pred)?;
    report.note = Some(format!("{abstained} abstained; AUC not defined for hard labels"));
    let reports = [NamedReport::Classification {
        name: format!("fewshot_{}", shots.len()),
        report,
    }];
    write_file(&ctx.out("fewshot_report.json")?, render_report(&reports, ReportFormat::Json))?;
    print!("{}", render_report(&reports, ctx.format()));
    if !ctx.json {
        println!("  abstained          {abstained}");
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = cli.output_dir {
        cfg.output_dir = d;
    }
    let mut ctx = Ctx { cfg, json: cli.json };
    match cli.command {
        Command::PromptPreview(a) => prompt_preview(&ctx, a),
        Command::Extract(a) => extract(&mut ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Evaluate(a) => evaluate(&ctx, a),
        Command::Compare(a) => compare(&ctx, a),
        Command::Fewshot(a) => fewshot(&mut ctx, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
