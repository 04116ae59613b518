use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde_json::{json, Value};

use tarmt_core::corpus::{
    import_file, subsample_constraints, validate_corpus_with, write_corpus, Corpus, ImportFormat, ImportOptions,
    Severity, ValidationOptions,
};
use tarmt_core::detector::MatchOptions;
use tarmt_core::gateway::{meter, Gateway, ResponseCache};
use tarmt_core::metrics::{self, EvalOptions, MetricReport};
use tarmt_core::pipeline::{
    read_hypotheses, read_traces, write_traces, Ablation, DetectorMode, PipelineError, RevisionTrace, RunConfig,
    RunMode, Runner, StopReason, TraceLine,
};
use tarmt_core::prompting::{EnsemblePolicy, PromptBook};
use tarmt_core::reporting::{self, Bucket};

use crate::config::load_backend;
use crate::{
    AblationArg, Command, CorpusArgs, DetectorArg, EvaluateArgs, Failure, Format, ImportArgs, ModeArg, OutFormat,
    PrintTemplatesArgs, ReportView, RunArgs, SubsampleArgs, ValidateArgs,
};

pub fn dispatch(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Import(a) => Ok(import(a)?),
        Command::Validate(a) => validate(a),
        Command::Run(a) => run(a),
        Command::Evaluate(a) => Ok(evaluate(a)?),
        Command::Report(a) => Ok(report(a.view)?),
        Command::PrintTemplates(a) => Ok(print_templates(a)?),
        Command::Subsample(a) => Ok(subsample(a)?),
    }
}

impl From<Format> for ImportFormat {
    fn from(f: Format) -> Self {
        match f {
            Format::Jsonl => ImportFormat::Jsonl,
            Format::DinuTsv => ImportFormat::DinuTsv,
            Format::Wmt21Tt => ImportFormat::Wmt21Tt,
            Format::LxmJson => ImportFormat::LxmJson,
        }
    }
}

fn load(args: &CorpusArgs) -> Result<Corpus> {
    let import = import_file(&args.corpus, args.format.into(), &ImportOptions::default())
        .with_context(|| format!("loading corpus {}", args.corpus.display()))?;
    for w in &import.warnings {
        log::warn!("{w}");
    }
    Ok(import.corpus)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}

fn import(a: ImportArgs) -> Result<()> {
    let opts = ImportOptions {
        name: a.name,
        src_lang: a.src_lang,
        tgt_lang: a.tgt_lang,
    };
    let import = import_file(&a.input, a.format.into(), &opts)
        .with_context(|| format!("importing {}", a.input.display()))?;
    for w in &import.warnings {
        eprintln!("{w}");
    }
    let mut out = create(&a.output)?;
    write_corpus(&import.corpus, &mut out)?;
    out.flush()?;
    eprintln!(
        "imported `{}`: {} unit(s), {} constraint(s), {} warning(s)",
        import.corpus.name,
        import.corpus.len(),
        import.corpus.total_constraints(),
        import.warnings.len()
    );
    Ok(())
}

fn validate(a: ValidateArgs) -> std::result::Result<(), Failure> {
    let import = import_file(&a.corpus.corpus, a.corpus.format.into(), &ImportOptions::default())
        .with_context(|| format!("loading corpus {}", a.corpus.corpus.display()))?;
    let mut issues = import.warnings;
    let opts = ValidationOptions {
        require_constraints: a.require_constraints,
    };
    for issue in validate_corpus_with(&import.corpus, opts) {
        if !issues.contains(&issue) {
            issues.push(issue);
        }
    }
    for issue in &issues {
        if a.json {
            println!("{}", serde_json::to_string(issue).map_err(anyhow::Error::from)?);
        } else {
            println!("{issue}");
        }
    }
    let errors = issues.iter().filter(|i| i.severity == Severity::Error).count();
    eprintln!(
        "`{}`: {} unit(s), {} error(s), {} warning(s)",
        import.corpus.name,
        import.corpus.len(),
        errors,
        issues.len() - errors
    );
    if errors > 0 {
        return Err(Failure::Data(anyhow!("{errors} validation error(s)")));
    }
    Ok(())
}

fn ensemble(spec: &str, seed: u64) -> EnsemblePolicy {
    let ids: Vec<&str> = spec.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    match ids.as_slice() {
        ["default"] => EnsemblePolicy::default_ensemble(seed),
        [one] => EnsemblePolicy::fixed(*one),
        many => EnsemblePolicy::random(many, seed),
    }
}

fn run_config(a: &RunArgs) -> RunConfig {
    RunConfig {
        max_iterations: a.max_iters,
        ensemble: ensemble(&a.ensemble, a.seed),
        translate_template: a.translate_template.clone(),
        mode: match a.mode {
            ModeArg::LlmTranslate => RunMode::LlmTranslate,
            ModeArg::NmtSeeded => RunMode::NmtSeeded,
        },
        ablation: match a.ablation {
            AblationArg::None => Ablation::None,
            AblationArg::NoUncompleted => Ablation::NoUncompleted,
            AblationArg::NoOriginal => Ablation::NoOriginal,
            AblationArg::FlaggedOnly => Ablation::FlaggedOnly,
        },
        parallelism: a.parallel,
        detector: match a.detector {
            DetectorArg::Rule => DetectorMode::Rule,
            DetectorArg::Llm => DetectorMode::Llm,
        },
        match_options: MatchOptions {
            case_sensitive: a.case_sensitive,
        },
    }
}

fn prompt_book(templates: Option<&Path>, zero_shot: bool) -> Result<PromptBook> {
    let mut book = PromptBook::builtin();
    if let Some(path) = templates {
        book.load_manifest(path)?;
    }
    Ok(if zero_shot { book.zero_shot() } else { book })
}

fn report_path(a: &RunArgs) -> PathBuf {
    a.report.clone().unwrap_or_else(|| {
        let mut name = a.traces.file_stem().unwrap_or_default().to_os_string();
        name.push(".report.json");
        a.traces.with_file_name(name)
    })
}

fn run(a: RunArgs) -> std::result::Result<(), Failure> {
    if a.hypotheses.is_some() && a.mode != ModeArg::NmtSeeded {
        return Err(Failure::Usage(anyhow!("--hypotheses requires --mode nmt-seeded")));
    }
    if a.resume.is_some() && a.hypotheses.is_some() {
        return Err(Failure::Usage(anyhow!("--resume cannot be combined with --hypotheses")));
    }
    let corpus = load(&a.corpus)?;
    let book = prompt_book(a.templates.as_deref(), a.zero_shot)?;
    let config = run_config(&a);
    config.validate(&book).map_err(|e| Failure::Usage(e.into()))?;
    let loaded = load_backend(&a.backend)?;
    let mut gateway = Gateway::new(loaded.backend, loaded.settings);
    if !a.no_cache {
        let cache = match &a.cache {
            Some(path) => ResponseCache::open(path).with_context(|| format!("opening cache {}", path.display()))?,
            None => ResponseCache::in_memory(),
        };
        gateway = gateway.with_cache(cache);
    }
    let runner = Runner::new(&gateway, &book, &config);
    let stamp = runner.stamp(&corpus);
    log::info!("config hash {}", stamp.config_hash);

    let outcome = if let Some(path) = &a.hypotheses {
        let hyps = read_hypotheses(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
            .with_context(|| format!("reading {}", path.display()))?;
        runner.revise_only(&hyps, &corpus)
    } else if let Some(path) = &a.resume {
        let previous = read_previous(path)?;
        runner.resume(&corpus, &previous)
    } else {
        runner.run_corpus(&corpus)
    };
    let (traces, all_failed) = match outcome {
        Ok(t) => (t, None),
        Err(PipelineError::AllUnitsFailed { first, traces }) => (traces, Some(first)),
        Err(e @ (PipelineError::InvalidConfig(_) | PipelineError::Prompt(_))) => return Err(Failure::Usage(e.into())),
        Err(e) => return Err(Failure::Data(e.into())),
    };

    let mut out = create(&a.traces)?;
    write_traces(&mut out, &stamp, &traces).map_err(anyhow::Error::from)?;
    out.flush().map_err(anyhow::Error::from)?;

    let failed: Vec<&str> = traces
        .iter()
        .filter(|t| t.stop_reason == StopReason::BackendError)
        .map(|t| t.unit_id.as_str())
        .collect();
    let metrics = match all_failed {
        Some(_) => None,
        None => Some(metrics::evaluate_traces(&traces, &corpus, reporting::eval_options_for(&corpus)).map_err(anyhow::Error::from)?),
    };
    let usage = meter(&gateway.responses());
    let report = json!({
        "schema_version": stamp.schema_version,
        "tool_version": stamp.tool_version,
        "config_hash": stamp.config_hash,
        "corpus": stamp.corpus,
        "backend_id": stamp.backend_id,
        "seed": stamp.seed,
        "config": config,
        "metrics": metrics,
        "usage": {
            "by_stage": usage.rows(),
            "total": usage.total,
        },
        "gateway": gateway.stats(),
        "failed_units": failed,
    });
    let report_path = report_path(&a);
    write_json(&report_path, &report)?;

    if let Some(m) = &metrics {
        eprintln!("{}", summary_line(m));
    }
    eprintln!(
        "{} unit(s), {} live call(s), {} cache hit(s), cost {:.4}; traces {}, report {}",
        traces.len(),
        gateway.stats().live_calls,
        gateway.stats().cache_hits,
        usage.total.cost,
        a.traces.display(),
        report_path.display()
    );
    if let Some(first) = all_failed {
        return Err(Failure::Backend(anyhow!("every unit failed; first error: {first}")));
    }
    if !failed.is_empty() {
        return Err(Failure::Partial(anyhow!(
            "{} of {} unit(s) failed at the backend: {}",
            failed.len(),
            traces.len(),
            failed.join(", ")
        )));
    }
    Ok(())
}

fn summary_line(m: &MetricReport) -> String {
    let f = |x: Option<f64>| x.map(metrics::format_score).unwrap_or_else(|| "-".into());
    let mut s = format!("`{}`: BLEU {}", m.corpus, f(m.bleu));
    if m.sar_percent.is_some() {
        let _ = write!(s, ", SAR {}%, SMR {}%", f(m.sar_percent), f(m.smr_percent));
    } else {
        let _ = write!(s, ", CCR {}%", f(m.ccr_percent));
    }
    s
}

fn read_previous(path: &Path) -> Result<Vec<TraceLine>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_traces(BufReader::new(file)).with_context(|| format!("reading traces {}", path.display()))
}

fn load_traces(path: &Path, corpus: &Corpus) -> Result<(Vec<RevisionTrace>, Option<TraceLine>)> {
    let lines = read_previous(path)?;
    let first = lines.first().cloned();
    if let Some(f) = &first {
        if f.stamp.corpus != corpus.name {
            log::warn!("traces were produced for corpus `{}`, scoring against `{}`", f.stamp.corpus, corpus.name);
        }
        if lines.iter().any(|l| l.stamp.config_hash != f.stamp.config_hash) {
            log::warn!("{}: traces come from more than one configuration", path.display());
        }
    }
    Ok((lines.into_iter().map(|l| l.trace).collect(), first))
}

fn parse_external(spec: &str) -> Result<(&str, &Path)> {
    match spec.split_once('=') {
        Some((name, path)) if !name.is_empty() && !path.is_empty() => Ok((name, Path::new(path))),
        _ => bail!("--external expects NAME=PATH, got `{spec}`"),
    }
}

fn evaluate(a: EvaluateArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let opts = EvalOptions {
        xml_mode: a.xml,
        match_options: MatchOptions {
            case_sensitive: a.case_sensitive,
        },
    };
    let externals = a
        .external
        .iter()
        .map(|s| parse_external(s))
        .collect::<Result<Vec<_>>>()?;
    let (mut report, provenance) = match (&a.traces, &a.hypotheses) {
        (Some(path), _) => {
            let (traces, first) = load_traces(path, &corpus)?;
            let report = metrics::evaluate_traces(&traces, &corpus, opts)?;
            let stamp = first.map(|l| {
                json!({
                    "config_hash": l.stamp.config_hash,
                    "backend_id": l.stamp.backend_id,
                    "seed": l.stamp.seed,
                    "run_tool_version": l.stamp.tool_version,
                })
            });
            (report, json!({"traces": path, "run": stamp}))
        }
        (None, Some(path)) => {
            let hyps: HashMap<String, String> = read_hypotheses(BufReader::new(
                File::open(path).with_context(|| format!("opening {}", path.display()))?,
            ))?;
            let missing: Vec<&str> = corpus.units.iter().filter(|u| !hyps.contains_key(&u.id)).map(|u| u.id.as_str()).collect();
            if !missing.is_empty() {
                bail!("{}: no hypothesis for unit(s) {}", path.display(), missing.join(", "));
            }
            let ordered: Vec<&str> = corpus.units.iter().map(|u| hyps[&u.id].as_str()).collect();
            (metrics::evaluate(&corpus, &ordered, opts)?, json!({"hypotheses": path}))
        }
        (None, None) => unreachable!("clap requires --traces or --hypotheses"),
    };
    for (name, path) in externals {
        let scores = metrics::ingest_external(path)?;
        report.attach_external(name, &scores, &corpus);
    }
    let value = json!({
        "tool_version": env!("CARGO_PKG_VERSION"),
        "corpus": corpus.name,
        "source": provenance,
        "metrics": report,
    });
    match &a.output {
        Some(path) => write_json(path, &value)?,
        None => println!("{}", serde_json::to_string_pretty(&value)?),
    }
    eprintln!("{}", summary_line(&report));
    Ok(())
}

/// Accepts a bare metric report or one wrapped under `metrics` by `run` and `evaluate`.
fn read_metric_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    let inner = match value.get("metrics") {
        Some(Value::Null) => bail!("{}: the run produced no metrics", path.display()),
        Some(m) => m.clone(),
        None => value,
    };
    serde_json::from_value(inner).with_context(|| format!("{}: not a metric report", path.display()))
}

fn cell(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn report(view: ReportView) -> Result<()> {
    let text = match view {
        ReportView::Curve { corpus, traces, output_format } => {
            let corpus = load(&corpus)?;
            let (traces, _) = load_traces(&traces, &corpus)?;
            let rows = reporting::iteration_curve(&traces, &corpus, reporting::eval_options_for(&corpus))?;
            match output_format {
                OutFormat::Table => reporting::curve_table(&rows),
                OutFormat::Csv => reporting::curve_csv(&rows),
                OutFormat::Json => serde_json::to_string_pretty(&rows)? + "\n",
            }
        }
        ReportView::Buckets { corpus, traces, bounds, output_format } => {
            let corpus = load(&corpus)?;
            let (traces, _) = load_traces(&traces, &corpus)?;
            let buckets =
                reporting::bucket_by_constraint_count(&traces, &corpus, &bounds, reporting::eval_options_for(&corpus))?;
            match output_format {
                OutFormat::Table => reporting::bucket_table(&buckets),
                OutFormat::Csv => bucket_csv(&buckets),
                OutFormat::Json => serde_json::to_string_pretty(&buckets)? + "\n",
            }
        }
        ReportView::Delta { before, after, output_format } => {
            let (b, a) = (read_metric_report(&before)?, read_metric_report(&after)?);
            match output_format {
                OutFormat::Table => reporting::delta_report(&b, &a)?,
                OutFormat::Csv => {
                    let mut s = String::from("metric,before,after,delta\n");
                    for r in reporting::delta_rows(&b, &a)? {
                        let _ = writeln!(s, "{},{},{},{}", r.metric, cell(r.before), cell(r.after), cell(r.delta));
                    }
                    s
                }
                OutFormat::Json => serde_json::to_string_pretty(&reporting::delta_rows(&b, &a)?)? + "\n",
            }
        }
    };
    io::stdout().write_all(text.as_bytes())?;
    Ok(())
}

fn bucket_csv(buckets: &[Bucket]) -> String {
    let mut s = String::from("k_min,k_max,n_units,n_constraints,ccr_percent,bleu\n");
    for b in buckets {
        let r = b.report.as_ref();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            b.k_min,
            b.k_max.map(|k| k.to_string()).unwrap_or_default(),
            b.n_units,
            b.n_constraints,
            cell(r.and_then(|r| r.ccr_percent)),
            cell(r.and_then(|r| r.bleu))
        );
    }
    s
}

fn print_templates(a: PrintTemplatesArgs) -> Result<()> {
    let book = PromptBook::builtin();
    if let Some(dir) = &a.export {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        for t in book.templates() {
            fs::write(dir.join(format!("{}.txt", t.id)), format!("{}\n", t.body))?;
        }
        write_json(&dir.join("manifest.json"), &book.manifest_json())?;
        eprintln!("exported {} template(s) to {}", book.templates().count(), dir.display());
        return Ok(());
    }
    if let Some(id) = &a.id {
        let t = book.get(id)?;
        if a.json {
            println!("{}", serde_json::to_string_pretty(&json!({"id": t.id, "stage": t.stage, "variant": t.variant, "body": t.body}))?);
        } else {
            println!("{}", t.body);
        }
        return Ok(());
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&book.manifest_json())?);
        return Ok(());
    }
    let mut out = String::new();
    for t in book.templates() {
        let _ = writeln!(out, "=== {} ({:?}, {:?}) ===\n{}\n", t.id, t.stage, t.variant, t.body);
    }
    if let Some(d) = &book.demonstration {
        let _ = writeln!(
            out,
            "=== demonstration ===\nsource: {}\nflawed: {}\nanswer: {}",
            d.unit.source_text, d.flawed, d.answer
        );
    }
    io::stdout().write_all(out.as_bytes())?;
    Ok(())
}

fn subsample(a: SubsampleArgs) -> Result<()> {
    let corpus = load(&a.corpus)?;
    let sub = subsample_constraints(&corpus, a.k, a.seed)?;
    let mut out = create(&a.output)?;
    write_corpus(&sub.corpus, &mut out)?;
    out.flush()?;
    eprintln!(
        "kept {} unit(s) with k={}, dropped {}",
        sub.corpus.len(),
        a.k,
        sub.dropped
    );
    Ok(())
}
