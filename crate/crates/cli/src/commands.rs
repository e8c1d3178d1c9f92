use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context, Result};
use aqp_core::cvae::{marginal_fidelity_report, FidelityReport, LossParts};
use aqp_core::dataset::{infer_schema, load_csv, train_test_split, ColumnKind, DatasetError, Schema, Table};
use aqp_core::engine::{train_bundle, Engine, EngineError, ModelBundle, QueryResult};
use aqp_core::evalharness::{
    ablation_table, generate_synthetic_workload, masking_ablation, oracle_execute, run_eval, samples_sweep, sweep_table,
    EvalError, ExactResult,
};
use aqp_core::planner::PlanError;
use aqp_core::rng::stream;
use aqp_core::sqlfront::{parse, SqlError};
use aqp_core::synthgen::{generate_table, rare_group_preset, SynthError, SynthSpec};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{AppConfig, ConfigError, LoadedConfig};
use crate::{Cli, Command, EvalArgs, ModelArgs, QueryArgs, SynthArgs, TrainArgs};

/// 1 for errors caused by the user's input, 2 otherwise.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let user = if cause.is::<ConfigError>()
            || cause.is::<SqlError>()
            || cause.is::<PlanError>()
            || cause.is::<DatasetError>()
            || cause.is::<SynthError>()
            || cause.is::<std::io::Error>()
        {
            Some(true)
        } else if let Some(e) = cause.downcast_ref::<EngineError>() {
            Some(e.is_user_error())
        } else if let Some(e) = cause.downcast_ref::<EvalError>() {
            Some(matches!(e, EvalError::InvalidSpec(_) | EvalError::UnsuitableTable | EvalError::Io(_)))
        } else {
            cause.downcast_ref::<aqp_core::Error>().map(aqp_core::Error::is_user_error)
        };
        if let Some(user) = user {
            return if user { 1 } else { 2 };
        }
    }
    2
}

pub fn run(cli: Cli) -> Result<()> {
    let g = cli.global;
    let mut config = LoadedConfig::load(g.config.as_deref())?.resolve(g.seed)?;
    if let Some(t) = g.table {
        config.data.table = Some(t);
    }
    if let Some(s) = g.schema {
        config.data.schema = Some(s);
    }
    if let Some(o) = g.output {
        config.output = o;
    }
    match cli.command {
        Command::Ingest => ingest(&config),
        Command::Train(args) => train(config, args),
        Command::Query(args) => query(config, args),
        Command::Repl(args) => repl(config, args),
        Command::Eval(args) => eval(config, args),
        Command::Synth(args) => synth(&config, args),
    }
}

fn table_path(config: &AppConfig) -> Result<&Path> {
    let path = config
        .data
        .table
        .as_deref()
        .ok_or_else(|| ConfigError::Invalid("no table configured: set data.table or pass --table".into()))?;
    if !path.exists() {
        return Err(ConfigError::Invalid(format!("table {} does not exist", path.display())).into());
    }
    Ok(path)
}

fn configured_schema(config: &AppConfig) -> Result<Schema> {
    let path = table_path(config)?;
    Ok(match &config.data.schema {
        Some(s) => Schema::load(s).with_context(|| format!("loading schema {}", s.display()))?,
        None => infer_schema(path, config.data.infer_rows).with_context(|| format!("inferring schema of {}", path.display()))?,
    })
}

fn load_table(config: &AppConfig, schema: &Schema) -> Result<Table> {
    let path = table_path(config)?;
    load_csv(path, schema).with_context(|| format!("loading {}", path.display()))
}

/// `(training rows, evaluation rows)`; both are the whole table unless
/// `data.holdout` is set.
fn split(config: &AppConfig, table: Table) -> Result<(Table, Table)> {
    if config.data.holdout == 0.0 {
        return Ok((table.clone(), table));
    }
    let seed = aqp_core::rng::derive_seed(config.seed, "holdout");
    Ok(train_test_split(&table, 1.0 - config.data.holdout, seed)?)
}

fn model_path(config: &AppConfig, flag: Option<&Path>) -> PathBuf {
    flag.map_or_else(|| config.output.join("model.elct"), Path::to_path_buf)
}

fn load_model(config: &AppConfig, args: &ModelArgs) -> Result<ModelBundle> {
    let path = model_path(config, args.model.as_deref());
    ModelBundle::load(&path).with_context(|| format!("loading model {}", path.display()))
}

fn write_config(config: &AppConfig, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("config.toml"), config.to_toml())?;
    Ok(())
}

// ------------------------------------------------------------------ ingest

#[derive(Debug, Serialize)]
struct ColumnProfile {
    name: String,
    kind: ColumnKind,
    distinct: usize,
    missing: usize,
    /// Most frequent values with their counts (categorical columns).
    top: Vec<(String, usize)>,
    /// min, mean, max (numerical columns).
    range: Option<(f64, f64, f64)>,
}

fn profile(table: &Table) -> Vec<ColumnProfile> {
    let schema = table.schema();
    (0..schema.len())
        .map(|c| {
            let missing = table.missing_cells().iter().filter(|(_, col)| *col == c).count();
            let mut counts = std::collections::BTreeMap::<String, usize>::new();
            for row in table.rows() {
                *counts.entry(row[c].to_string()).or_default() += 1;
            }
            let distinct = counts.len();
            let (top, range) = match schema.kind(c) {
                ColumnKind::Categorical => {
                    let mut top: Vec<(String, usize)> = counts.into_iter().collect();
                    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
                    top.truncate(5);
                    (top, None)
                }
                ColumnKind::Numerical => {
                    let v = table.numeric_column(c);
                    let min = v.iter().copied().fold(f64::INFINITY, f64::min);
                    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mean = v.iter().sum::<f64>() / v.len().max(1) as f64;
                    (Vec::new(), Some((min, mean, max)))
                }
            };
            ColumnProfile { name: schema.name(c).to_owned(), kind: schema.kind(c), distinct, missing, top, range }
        })
        .collect()
}

fn ingest(config: &AppConfig) -> Result<()> {
    let schema = configured_schema(config)?;
    let table = load_table(config, &schema)?;
    let columns = profile(&table);
    println!("rows: {} (dropped {})", table.row_count(), table.dropped_rows());
    println!("{:<20} {:<12} {:>9} {:>8}  summary", "column", "kind", "distinct", "missing");
    for c in &columns {
        let summary = match c.range {
            Some((min, mean, max)) => format!("min {min:.4} mean {mean:.4} max {max:.4}"),
            None => c.top.iter().map(|(v, n)| format!("{v}:{n}")).collect::<Vec<_>>().join(" "),
        };
        println!("{:<20} {:<12} {:>9} {:>8}  {summary}", c.name, c.kind.to_string(), c.distinct, c.missing);
    }
    fs::create_dir_all(&config.output)?;
    schema.save(config.output.join("schema.toml"))?;
    fs::write(config.output.join("profile.json"), serde_json::to_vec_pretty(&columns)?)?;
    println!("schema written to {}", config.output.join("schema.toml").display());
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Debug, Serialize)]
struct TrainSummary {
    model: PathBuf,
    checksum: String,
    rows: usize,
    mask: String,
    mask_factor: f64,
    epochs: Vec<LossParts>,
    fidelity: FidelityReport,
    /// Validation NLL per candidate ordering, and the chosen one.
    selest_validation_nll: Vec<f64>,
    selest_chosen: Option<usize>,
    seconds: f64,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

fn train(mut config: AppConfig, args: TrainArgs) -> Result<()> {
    if let Some(kind) = args.mask_kind {
        config.mask.kind = kind;
    }
    if let Some(f) = args.mask_factor {
        config.mask.factor = f;
    }
    if let Some(e) = args.epochs {
        config.cvae.epochs = e;
    }
    config.validate()?;
    let schema = configured_schema(&config)?;
    let (table, _) = split(&config, load_table(&config, &schema)?)?;
    let options = config.train_options(&schema)?;
    let start = Instant::now();
    let (bundle, report) = train_bundle(&table, &options)?;
    let seconds = start.elapsed().as_secs_f64();
    let path = model_path(&config, args.model.as_deref());
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let bytes = bundle.to_bytes();
    fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    let fidelity_rows = config.train.fidelity_rows.min(table.row_count()).max(1);
    let fidelity_table = if options.discretize.is_empty() {
        table.clone()
    } else {
        let bins = if options.bins == 0 { aqp_core::planner::DEFAULT_BINS } else { options.bins };
        aqp_core::planner::discretize_table(&table, &options.discretize, bins)?.0
    };
    let fidelity = marginal_fidelity_report(&bundle.cvae, &fidelity_table, fidelity_rows, &mut stream(config.seed, "fidelity"))?;
    let summary = TrainSummary {
        model: path.clone(),
        checksum: hex(&Sha256::digest(&bytes)),
        rows: table.row_count(),
        mask: config.mask.kind.to_string(),
        mask_factor: config.mask.factor,
        epochs: report.cvae.epochs.clone(),
        fidelity,
        selest_validation_nll: report.selest.as_ref().map_or_else(Vec::new, |r| r.trials.iter().map(|t| t.validation_nll).collect()),
        selest_chosen: report.selest.as_ref().map(|r| r.chosen),
        seconds,
    };
    print!("{}", render_train_summary(&summary));
    write_config(&config, &config.output)?;
    fs::write(config.output.join("train_summary.json"), serde_json::to_vec_pretty(&summary)?)?;
    Ok(())
}

fn render_train_summary(s: &TrainSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "model: {}", s.model.display());
    let _ = writeln!(out, "checksum: {}", s.checksum);
    let _ = writeln!(out, "rows: {}, masking: {} (factor {})", s.rows, s.mask, s.mask_factor);
    for (i, e) in s.epochs.iter().enumerate() {
        let _ = writeln!(out, "epoch {:>3}: loss {:.4} (kl {:.4}, reconstruction {:.4})", i + 1, e.total(), e.kl, e.reconstruction);
    }
    for (name, tv) in &s.fidelity.categorical_tv {
        let _ = writeln!(out, "marginal {name}: total variation {tv:.4}");
    }
    for (name, (gm, tm, gs, ts)) in &s.fidelity.numerical {
        let _ = writeln!(out, "marginal {name}: mean {gm:.4} vs {tm:.4}, std {gs:.4} vs {ts:.4}");
    }
    for (i, nll) in s.selest_validation_nll.iter().enumerate() {
        let chosen = if Some(i) == s.selest_chosen { " (chosen)" } else { "" };
        let _ = writeln!(out, "selectivity ordering {i}: validation nll {nll:.4}{chosen}");
    }
    let _ = writeln!(out, "training time: {:.1}s", s.seconds);
    out
}

// ------------------------------------------------------------------- query

fn render_result(result: &QueryResult, bundle: &ModelBundle, group_by: &[usize]) -> String {
    let schema = &bundle.transformer().schema;
    let mut out = String::new();
    let names: Vec<&str> = group_by.iter().map(|&c| schema.name(c)).collect();
    let value_label = result.aggregate.to_string();
    if result.grouped {
        let _ = writeln!(out, "{} | {value_label}", names.join(" | "));
        for r in &result.rows {
            let _ = writeln!(out, "{} | {}{}", r.key.join(" | "), r.value, flags(r.low_confidence, r.partial));
        }
        for key in &result.unanswered {
            let _ = writeln!(out, "{} | unanswered", key.join(" | "));
        }
    } else {
        match result.rows.first() {
            Some(r) => {
                let _ = writeln!(out, "{value_label}: {}{}", r.value, flags(r.low_confidence, r.partial));
            }
            None => {
                let _ = writeln!(out, "{value_label}: unanswered");
            }
        }
    }
    for d in &result.diagnostics {
        let group = if d.group.is_empty() { String::new() } else { format!("[{}] ", d.group.join(", ")) };
        let sel = match (d.selectivity, d.std_error) {
            (Some(s), Some(se)) => format!("selectivity {s:.6} ± {se:.6}"),
            (Some(s), None) => format!("selectivity {s:.6}"),
            _ => "selectivity -".into(),
        };
        let oov = if d.not_in_vocabulary { ", value not in vocabulary" } else { "" };
        let _ = writeln!(
            out,
            "  {group}{:+} {}: {sel}, survivors {}/{}{oov}",
            d.sign, d.term, d.survivors, d.generated
        );
    }
    out
}

fn flags(low_confidence: bool, partial: bool) -> String {
    let mut f = Vec::new();
    if low_confidence {
        f.push("low confidence");
    }
    if partial {
        f.push("partial");
    }
    if f.is_empty() {
        String::new()
    } else {
        format!("  ({})", f.join(", "))
    }
}

fn apply_samples(config: &mut AppConfig, args: &ModelArgs) -> Result<()> {
    if let Some(n) = args.samples {
        config.engine.n_samples = n;
    }
    config.validate()?;
    Ok(())
}

fn query(mut config: AppConfig, args: QueryArgs) -> Result<()> {
    apply_samples(&mut config, &args.model)?;
    let bundle = load_model(&config, &args.model)?;
    let engine = Engine::new(&bundle, config.engine);
    let plan = engine.plan(&args.sql)?;
    if args.plan {
        print!("{}", plan.render(&bundle.transformer().schema));
        return Ok(());
    }
    let result = engine.execute(&plan, &mut stream(config.seed, "generate"))?;
    if args.json {
        println!("{}", serde_json::to_string_pretty(&result)?);
    } else {
        print!("{}", render_result(&result, &bundle, &plan.group_by));
    }
    Ok(())
}

// -------------------------------------------------------------------- repl

fn render_exact(exact: &ExactResult) -> String {
    let mut out = String::new();
    for (key, value) in &exact.rows {
        let v = value.map_or("empty".into(), |v| v.to_string());
        if exact.grouped {
            let _ = writeln!(out, "{} | {v}", key.join(" | "));
        } else {
            let _ = writeln!(out, "{v}");
        }
    }
    out
}

struct Repl<'a> {
    config: &'a AppConfig,
    bundle: &'a ModelBundle,
    engine: Engine<'a>,
    rng: aqp_core::rng::StreamRng,
    table: Option<Table>,
}

impl Repl<'_> {
    fn exact_table(&mut self) -> Result<&Table> {
        if self.table.is_none() {
            let table = load_table(self.config, &self.bundle.user_schema())
                .context("\\exact needs the raw table (data.table or --table)")?;
            self.table = Some(table);
        }
        Ok(self.table.as_ref().expect("loaded above"))
    }

    fn line(&mut self, line: &str) -> Result<String> {
        let line = line.trim();
        if let Some(sql) = line.strip_prefix("\\plan") {
            let plan = self.engine.plan(sql.trim())?;
            return Ok(plan.render(&self.bundle.transformer().schema));
        }
        if let Some(sql) = line.strip_prefix("\\exact") {
            let sql = sql.trim();
            let schema = self.bundle.user_schema();
            let ast = parse(sql, &schema)?;
            let exact = oracle_execute(&ast, self.exact_table()?);
            let plan = self.engine.plan(sql)?;
            let approx = self.engine.execute(&plan, &mut self.rng)?;
            return Ok(format!(
                "exact:\n{}approximate:\n{}",
                render_exact(&exact),
                render_result(&approx, self.bundle, &plan.group_by)
            ));
        }
        let plan = self.engine.plan(line)?;
        let result = self.engine.execute(&plan, &mut self.rng)?;
        Ok(render_result(&result, self.bundle, &plan.group_by))
    }
}

fn repl(mut config: AppConfig, args: ModelArgs) -> Result<()> {
    apply_samples(&mut config, &args)?;
    let bundle = load_model(&config, &args)?;
    let mut repl = Repl {
        config: &config,
        bundle: &bundle,
        engine: Engine::new(&bundle, config.engine),
        rng: stream(config.seed, "generate"),
        table: None,
    };
    let interactive = std::io::stdin().is_terminal();
    let stdin = std::io::stdin();
    let mut lines = stdin.lock().lines();
    loop {
        if interactive {
            print!("aqp> ");
            std::io::stdout().flush()?;
        }
        let Some(line) = lines.next() else { break };
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if matches!(trimmed, "\\q" | "\\quit" | "exit") {
            break;
        }
        match repl.line(trimmed) {
            Ok(text) => print!("{text}"),
            Err(e) => println!("error: {e:#}"),
        }
        std::io::stdout().flush()?;
    }
    Ok(())
}

// -------------------------------------------------------------------- eval

fn eval(mut config: AppConfig, args: EvalArgs) -> Result<()> {
    apply_samples(&mut config, &args.model)?;
    if let Some(c) = args.count {
        config.eval.count = c;
    }
    config.validate()?;
    let dir = config.output.join("eval");
    let eval_config = config.eval_config();
    if args.masking_ablation {
        let schema = configured_schema(&config)?;
        let (train_rows, table) = split(&config, load_table(&config, &schema)?)?;
        let workload = generate_synthetic_workload(&table, &config.workload())?;
        let options = config.train_options(&schema)?;
        let results = if config.data.holdout == 0.0 {
            masking_ablation(&table, &options, &config.eval.ablation, &workload, &eval_config)?
        } else {
            config
                .eval
                .ablation
                .iter()
                .map(|&kind| {
                    let mut opts = options.clone();
                    opts.mask.kind = kind;
                    let (bundle, _) = train_bundle(&train_rows, &opts)?;
                    Ok((kind, run_eval(&bundle, &table, &workload, &eval_config)))
                })
                .collect::<Result<Vec<_>>>()?
        };
        for (kind, report) in &results {
            report.write_to_dir(dir.join(format!("ablation-{kind}")))?;
        }
        let text = ablation_table(&results);
        print!("{text}");
        write_config(&config, &dir)?;
        fs::write(dir.join("ablation.txt"), text)?;
        return Ok(());
    }
    let bundle = load_model(&config, &args.model)?;
    let (_, table) = split(&config, load_table(&config, &bundle.user_schema())?)?;
    bundle.check_schema(table.schema())?;
    if config.data.holdout == 0.0 && table.row_count() != bundle.meta.row_count {
        eprintln!(
            "warning: table has {} rows but the model was trained on {}; COUNT and SUM scale by the training size",
            table.row_count(),
            bundle.meta.row_count
        );
    }
    let workload = generate_synthetic_workload(&table, &config.workload())?;
    if let Some(samples) = args.samples_sweep {
        let samples = if samples.is_empty() { config.eval.samples.clone() } else { samples };
        if samples.is_empty() || samples.contains(&0) {
            return Err(ConfigError::Invalid("sample counts must be positive".into()).into());
        }
        let reports = samples_sweep(&bundle, &table, &workload, &samples, &eval_config);
        for r in &reports {
            r.write_to_dir(dir.join(format!("samples-{}", r.summary.n_samples)))?;
        }
        let text = sweep_table(&reports);
        print!("{text}");
        write_config(&config, &dir)?;
        fs::write(dir.join("sweep.txt"), text)?;
        return Ok(());
    }
    let report = run_eval(&bundle, &table, &workload, &eval_config);
    report.write_to_dir(&dir)?;
    write_config(&config, &dir)?;
    print!("{}", report.summary.table());
    Ok(())
}

// ------------------------------------------------------------------- synth

fn synth(config: &AppConfig, args: SynthArgs) -> Result<()> {
    let mut spec = match (&args.spec, args.preset.as_deref()) {
        (Some(path), _) => SynthSpec::load(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some("rare-group")) => rare_group_preset(100_000, config.seed),
        (None, other) => return Err(anyhow!("unknown preset {other:?}")),
    };
    if let Some(rows) = args.rows {
        spec.rows = rows;
    }
    let (table, truth) = generate_table(&spec)?;
    let out = args.out.unwrap_or_else(|| config.output.join("synth.csv"));
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    table.save_csv(&out)?;
    let schema_path = out.with_extension("schema.toml");
    truth.schema().save(&schema_path)?;
    fs::write(out.with_extension("spec.toml"), spec.to_toml())?;
    println!("{} rows written to {} (schema {})", table.row_count(), out.display(), schema_path.display());
    Ok(())
}
