mod args;

use std::collections::HashSet;
use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::Parser;
use serde::Serialize;

use args::{
    BenchMultiArgs, BenchSingleArgs, Cli, Command, ConfigFile, DecodeArgs, GenDataArgs, ModelArgs, PlanArgs, SearchArgs,
    TrainArgs,
};
use retrospec_core::corpus::{
    gen_synthetic, gen_targets, load_lines, load_reactions, load_stock, write_dataset, DatasetManifest, Grammar,
    GrammarConfig, OracleExpander, ReactionFormat, ReactionPair,
};
use retrospec_core::decode::{generate, DecodeConfig, DecodeMetrics, DecodeModel, Strategy};
use retrospec_core::harness::{
    bench_multi_step, bench_single_step, multi_step_csv, render_accuracy, render_beam_width_table, render_multi_step,
    render_single_step, single_step_csv, PlanSetting, RunManifest, SingleStepOptions,
};
use retrospec_core::model::{
    encode_source, load_checkpoint, save_checkpoint, train, EncodedPair, ModelConfig, TrainSchedule, Transformer,
};
use retrospec_core::plan::{plan, Algorithm, Expander, Expansion, ModelExpander, PlanConfig, Stock};
use retrospec_core::smiles::{Vocabulary, EOS};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("RETROSPEC_GIT_DESCRIBE"), ")");

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.render().to_string();
            let line = text.lines().next().unwrap_or("invalid arguments").trim();
            eprintln!("{}", if line.starts_with("error:") { line.to_string() } else { format!("error: {line}") });
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}

/// Context chain joined by ": ", skipping causes a message already quotes.
fn one_line(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out.replace('\n', " ")
}

fn run(cli: Cli) -> Result<()> {
    let file = match &cli.config {
        Some(path) => ConfigFile::load(path)?,
        None => ConfigFile::default(),
    };
    match cli.command {
        Command::GenData(mut a) => {
            if let Some(f) = file.gen_data {
                a.overlay(f);
            }
            gen_data(a)
        }
        Command::Train(mut a) => {
            if let Some(f) = file.train {
                a.overlay(f);
            }
            train_cmd(a)
        }
        Command::Decode(mut a) => {
            if let Some(f) = file.decode {
                a.overlay(f);
            }
            decode_cmd(a)
        }
        Command::Plan(mut a) => {
            if let Some(f) = file.plan {
                a.overlay(f);
            }
            plan_cmd(a)
        }
        Command::BenchSingle(mut a) => {
            if let Some(f) = file.bench_single {
                a.overlay(f);
            }
            bench_single_cmd(a)
        }
        Command::BenchMulti(mut a) => {
            if let Some(f) = file.bench_multi {
                a.overlay(f);
            }
            bench_multi_cmd(a)
        }
    }
}

fn manifest(command: &str, config: &impl Serialize) -> Result<RunManifest> {
    Ok(RunManifest::new(command, VERSION, serde_json::to_value(config)?))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let out = a.out.clone().context("--out is required")?;
    let d = GrammarConfig::default();
    let config = GrammarConfig {
        size: a.size.unwrap_or(d.size),
        blocks: a.blocks.unwrap_or(d.blocks),
        rules: a.rules.unwrap_or(d.rules),
        max_depth: a.max_depth.unwrap_or(d.max_depth),
        fragment_len: (a.min_fragment.unwrap_or(d.fragment_len.0), a.max_fragment.unwrap_or(d.fragment_len.1)),
        valid_fraction: a.valid_fraction.unwrap_or(d.valid_fraction),
        test_fraction: a.test_fraction.unwrap_or(d.test_fraction),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let dataset = gen_synthetic(&config)?;
    let products: HashSet<String> = dataset.all_pairs().map(|p| p.product.clone()).collect();
    let targets = gen_targets(
        &dataset.grammar,
        a.targets.unwrap_or(200),
        config.max_depth,
        config.seed.wrapping_add(1),
        &products,
    )?;
    let lines: Vec<String> = targets.into_iter().map(|t| t.smiles).collect();
    let written = write_dataset(&out, &dataset, &[("targets.txt", lines)])?;
    let mut m = manifest("gen-data", &config)?;
    m.seed = Some(config.seed);
    m.outputs = written.checksums.keys().cloned().chain(["manifest.json".to_string()]).collect();
    m.write_beside(&out.join("run"))?;
    println!(
        "wrote {} train, {} valid, {} test pairs, {} stock, {} targets to {}",
        written.train,
        written.valid,
        written.test,
        written.stock,
        a.targets.unwrap_or(200),
        out.display()
    );
    Ok(())
}

fn vocab_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("vocab")
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let out = a.out.clone().context("--out is required")?;
    let train_path = match (&a.train, &a.data) {
        (Some(p), _) => p.clone(),
        (None, Some(d)) => d.join("train.tsv"),
        (None, None) => bail!("--data or --train is required"),
    };
    let valid_path = match (&a.valid, &a.data) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(d)) => Some(d.join("valid.tsv")),
        (None, None) => None,
    };
    let train_pairs = load_reactions(&train_path, ReactionFormat::Tsv)?;
    let valid_pairs = match &valid_path {
        Some(p) => load_reactions(p, ReactionFormat::Tsv)?.pairs,
        None => Vec::new(),
    };
    let vocab = Vocabulary::build(
        train_pairs
            .pairs
            .iter()
            .chain(&valid_pairs)
            .flat_map(|p| [p.product.as_str(), p.reactants.as_str()]),
    )?;
    let mut config = match a.preset.as_deref().unwrap_or("toy") {
        "toy" => ModelConfig::toy(vocab.len()),
        "paper" => ModelConfig::paper(vocab.len()),
        other => bail!("--preset {other:?}: expected toy or paper"),
    };
    if let Some(m) = a.medusa_heads {
        config.medusa_heads = m;
    }
    if let Some(d) = a.d_model {
        config.d_model = d;
    }
    if let Some(l) = a.layers {
        config.layers_enc = l;
        config.layers_dec = l;
    }
    if let Some(l) = a.max_len {
        config.max_len = l;
    }
    if let Some(p) = a.dropout {
        config.dropout = p;
    }
    if let Some(s) = a.seed {
        config.seed = s;
    }
    let d = TrainSchedule::default();
    let schedule = TrainSchedule {
        steps: a.steps.unwrap_or(6000),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        peak_lr: a.lr.unwrap_or(2e-3),
        warmup_steps: a.warmup.unwrap_or(200),
        eval_every: a.eval_every.unwrap_or(500),
        seed: a.seed.unwrap_or(d.seed),
        ..d
    };
    let encode = |pairs: &[ReactionPair]| -> Result<(Vec<EncodedPair>, usize)> {
        let mut out = Vec::with_capacity(pairs.len());
        let mut too_long = 0;
        for p in pairs {
            let source = encode_source(&vocab, &p.product)?;
            let mut target = vocab.encode(&p.reactants)?;
            target.push(EOS);
            if source.len() > config.max_len || target.len() + 1 > config.max_len {
                too_long += 1;
                continue;
            }
            out.push(EncodedPair { source, target });
        }
        Ok((out, too_long))
    };
    let (data, dropped) = encode(&train_pairs.pairs)?;
    let (heldout, _) = encode(&valid_pairs)?;
    if dropped > 0 || train_pairs.skipped > 0 {
        eprintln!("skipped {} malformed and {} over-length training pairs", train_pairs.skipped, dropped);
    }
    let (mut params, log) = train(&config, &data, &heldout, &schedule, |s, e| {
        if let Some(e) = e {
            eprintln!("step {} train {:.4} heldout {:.4}", s.step, s.total, e.heldout.total);
        }
    })?;
    if let Some(last) = log.steps.last() {
        if !last.total.is_finite() {
            bail!("training diverged: loss {} at step {}", last.total, last.step);
        }
    }
    params.meta.vocab_hash = vocab.hash();
    params.meta.training_step = schedule.steps as u64;
    save_checkpoint(&params, &out)?;
    let vpath = vocab_path(&out);
    vocab.save(&vpath)?;
    let log_path = a.log.clone().unwrap_or_else(|| out.with_extension("log.csv"));
    let f = fs::File::create(&log_path).with_context(|| format!("writing {}", log_path.display()))?;
    log.write_csv(BufWriter::new(f))?;

    #[derive(Serialize)]
    struct Snapshot<'a> {
        model: &'a ModelConfig,
        schedule: &'a TrainSchedule,
        train: &'a Path,
        valid: Option<&'a Path>,
    }
    let mut m = manifest(
        "train",
        &Snapshot {
            model: &config,
            schedule: &schedule,
            train: &train_path,
            valid: valid_path.as_deref(),
        },
    )?
    .with_checkpoint(&out)?;
    m.seed = Some(schedule.seed);
    m.outputs = [&out, &vpath, &log_path].iter().map(|p| p.display().to_string()).collect();
    m.write_beside(&out)?;
    println!("saved {} after {} steps", out.display(), schedule.steps);
    Ok(())
}

struct Loaded {
    model: Transformer,
    vocab: Vocabulary,
    checkpoint: PathBuf,
}

fn load_model(a: &ModelArgs) -> Result<Loaded> {
    let checkpoint = a.checkpoint.clone().context("--checkpoint is required")?;
    if !checkpoint.is_file() {
        bail!("--checkpoint {}: no such file", checkpoint.display());
    }
    let vpath = a.vocab.clone().unwrap_or_else(|| vocab_path(&checkpoint));
    let vocab = Vocabulary::load(&vpath).with_context(|| format!("--vocab {}", vpath.display()))?;
    let params = load_checkpoint(&checkpoint, Some(&vocab)).with_context(|| format!("--checkpoint {}", checkpoint.display()))?;
    Ok(Loaded {
        model: Transformer::new(params)?,
        vocab,
        checkpoint,
    })
}

fn decode_config<M: DecodeModel>(a: &ModelArgs, model: &M) -> Result<DecodeConfig> {
    let strategy: Strategy = a.strategy.as_deref().unwrap_or("msbs").parse()?;
    let d = DecodeConfig::default();
    let draft_len = a.draft_len.unwrap_or(match strategy {
        Strategy::Hsbs => 10,
        _ => model.extra_heads().max(1),
    });
    let config = DecodeConfig {
        strategy,
        beam_size: a.beams.unwrap_or(d.beam_size),
        max_len: a.max_len.unwrap_or(d.max_len),
        nucleus: a.nucleus.unwrap_or(d.nucleus),
        draft_len,
        n_drafts: a.drafts.unwrap_or(if strategy == Strategy::Hsbs { 10 } else { 1 }),
    };
    config.validate()?;
    Ok(config)
}

fn output_or_cwd(path: Option<&Path>, command: &str) -> PathBuf {
    path.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(format!("{command}.out")))
}

fn decode_cmd(a: DecodeArgs) -> Result<()> {
    let loaded = load_model(&a.model)?;
    let config = decode_config(&a.model, &loaded.model)?;
    let mut inputs = a.smiles.clone();
    if let Some(p) = &a.input {
        inputs.extend(load_lines(p)?);
    }
    if inputs.is_empty() {
        bail!("no input: pass SMILES arguments or --input");
    }
    let sources = inputs
        .iter()
        .map(|s| encode_source(&loaded.vocab, s).with_context(|| format!("input {s:?}")))
        .collect::<Result<Vec<_>>>()?;
    let mut writer: Box<dyn Write> = match &a.output {
        Some(p) => Box::new(BufWriter::new(
            fs::File::create(p).with_context(|| format!("--output {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    let mut metrics = DecodeMetrics::default();
    for chunk in sources.chunks(a.batch_size.unwrap_or(1).max(1)) {
        let (hyps, m) = generate(&loaded.model, chunk, &config)?;
        metrics.merge(&m);
        for row in hyps {
            let fields: Vec<String> = row
                .iter()
                .map(|h| format!("{}\t{:.6}", loaded.vocab.decode(h.body()), h.score))
                .collect();
            writeln!(writer, "{}", fields.join("\t"))?;
        }
    }
    writer.flush()?;
    drop(writer);
    let mut outputs = Vec::new();
    if let Some(p) = &a.output {
        outputs.push(p.display().to_string());
    }
    if let Some(p) = &a.metrics {
        write_file(p, serde_json::to_string_pretty(&metrics)? + "\n")?;
        outputs.push(p.display().to_string());
    }
    #[derive(Serialize)]
    struct Snapshot<'a> {
        decode: &'a DecodeConfig,
        batch_size: usize,
        inputs: usize,
    }
    let mut m = manifest(
        "decode",
        &Snapshot {
            decode: &config,
            batch_size: a.batch_size.unwrap_or(1),
            inputs: inputs.len(),
        },
    )?
    .with_checkpoint(&loaded.checkpoint)?;
    m.outputs = outputs;
    m.write_beside(&output_or_cwd(a.output.as_deref(), "decode"))?;
    Ok(())
}

/// Model-backed or grammar-backed expansion.
enum AnyExpander<'a> {
    Model(ModelExpander<'a, Transformer>),
    Oracle(OracleExpander),
}

impl Expander for AnyExpander<'_> {
    fn expand(&mut self, molecules: &[&str]) -> Expansion {
        match self {
            AnyExpander::Model(e) => e.expand(molecules),
            AnyExpander::Oracle(e) => e.expand(molecules),
        }
    }
}

/// Stock, targets, and either a model or the dataset grammar.
struct SearchInputs {
    stock: Stock,
    targets: Vec<String>,
    grammar: Option<Grammar>,
}

fn search_inputs(s: &SearchArgs, direct: &[String]) -> Result<SearchInputs> {
    let grammar = match &s.oracle {
        Some(dir) => {
            let path = dir.join("manifest.json");
            let text = fs::read_to_string(&path).with_context(|| format!("--oracle {}", path.display()))?;
            let manifest: DatasetManifest =
                serde_json::from_str(&text).with_context(|| format!("--oracle {}", path.display()))?;
            Some(Grammar::new(&manifest.config)?)
        }
        None => None,
    };
    let stock_path = match (&s.stock, &s.oracle) {
        (Some(p), _) => p.clone(),
        (None, Some(dir)) => dir.join("stock.txt"),
        (None, None) => bail!("--stock is required"),
    };
    let (stock, _) = load_stock(&stock_path).with_context(|| format!("--stock {}", stock_path.display()))?;
    let mut targets = direct.to_vec();
    let targets_path = match (&s.targets, &s.oracle) {
        (Some(p), _) => Some(p.clone()),
        (None, Some(dir)) if direct.is_empty() => Some(dir.join("targets.txt")),
        _ => None,
    };
    if let Some(p) = targets_path {
        targets.extend(load_lines(&p).with_context(|| format!("--targets {}", p.display()))?);
    }
    if let Some(n) = s.limit {
        targets.truncate(n);
    }
    if targets.is_empty() {
        bail!("no targets: pass SMILES arguments or --targets");
    }
    Ok(SearchInputs { stock, targets, grammar })
}

fn plan_config(s: &SearchArgs, algo: Option<&str>, beam_width: Option<usize>, time_limit: Option<f64>) -> Result<PlanConfig> {
    let d = PlanConfig::default();
    let config = PlanConfig {
        algorithm: algo.map(str::parse::<Algorithm>).transpose()?.unwrap_or(d.algorithm),
        max_depth: s.max_depth.unwrap_or(d.max_depth),
        max_iterations: s.max_iterations.unwrap_or(d.max_iterations),
        time_limit: time_limit.or(d.time_limit),
        expansions: s.expansions.unwrap_or(d.expansions),
        beam_width: beam_width.unwrap_or(d.beam_width),
        max_model_calls: None,
    };
    config.validate()?;
    Ok(config)
}

fn plan_cmd(a: PlanArgs) -> Result<()> {
    let inputs = search_inputs(&a.search, &a.smiles)?;
    let config = plan_config(&a.search, a.algo.as_deref(), a.beam_width, a.time_limit)?;
    let loaded = match inputs.grammar {
        Some(_) => None,
        None => Some(load_model(&a.model)?),
    };
    let decode = match &loaded {
        Some(l) => Some(DecodeConfig {
            beam_size: a.model.beams.unwrap_or(config.expansions),
            ..decode_config(&a.model, &l.model)?
        }),
        None => None,
    };
    let mut expander = match (&loaded, &inputs.grammar) {
        (Some(l), _) => AnyExpander::Model(ModelExpander::new(&l.model, &l.vocab, decode.clone().expect("model config"))),
        (None, Some(g)) => AnyExpander::Oracle(OracleExpander::new(g.clone())),
        (None, None) => unreachable!("either a model or a grammar"),
    };
    let mut results = Vec::with_capacity(inputs.targets.len());
    let mut solved = 0;
    for target in &inputs.targets {
        let r = plan(target, &mut expander, &inputs.stock, &config)?;
        solved += r.solved as usize;
        println!(
            "{}\t{}\t{}\t{}\t{:.3}",
            r.target,
            if r.solved { "solved" } else { "unsolved" },
            r.iterations,
            r.model_calls,
            r.wall_time_s
        );
        results.push(r);
    }
    eprintln!(
        "solved {solved}/{} ({:.2}%)",
        results.len(),
        100.0 * solved as f64 / results.len() as f64
    );
    let mut outputs = Vec::new();
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        write_file(&dir.join("routes.json"), serde_json::to_string_pretty(&results)? + "\n")?;
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["target", "solved", "iterations", "model_calls", "wall_time_s", "nodes", "stop", "route_depth"])?;
        for r in &results {
            w.serialize((
                &r.target,
                r.solved,
                r.iterations,
                r.model_calls,
                r.wall_time_s,
                r.nodes,
                r.stop,
                r.route.as_ref().map(|t| t.depth()),
            ))?;
        }
        write_file(&dir.join("summary.csv"), w.into_inner()?)?;
        outputs = vec!["routes.json".into(), "summary.csv".into()];
    }
    #[derive(Serialize)]
    struct Snapshot<'a> {
        plan: &'a PlanConfig,
        decode: Option<&'a DecodeConfig>,
        oracle: Option<&'a Path>,
        targets: usize,
    }
    let snapshot = Snapshot {
        plan: &config,
        decode: decode.as_ref(),
        oracle: a.search.oracle.as_deref(),
        targets: inputs.targets.len(),
    };
    let mut m = manifest("plan", &snapshot)?;
    if let Some(l) = &loaded {
        m = m.with_checkpoint(&l.checkpoint)?;
    }
    m.outputs = outputs;
    match &a.out {
        Some(dir) => m.write_beside(dir)?,
        None => m.write_beside(Path::new("plan.out"))?,
    };
    Ok(())
}

fn bench_single_cmd(a: BenchSingleArgs) -> Result<()> {
    let loaded = load_model(&a.model)?;
    let base = decode_config(&a.model, &loaded.model)?;
    let data_path = a.data.clone().context("--data is required")?;
    let mut pairs = load_reactions(&data_path, ReactionFormat::Tsv)?.pairs;
    if let Some(n) = a.limit {
        pairs.truncate(n);
    }
    let d = SingleStepOptions::default();
    let strategies = match &a.strategies {
        Some(names) => names.iter().map(|s| s.parse()).collect::<Result<Vec<Strategy>, _>>()?,
        None => d.strategies,
    };
    let options = SingleStepOptions {
        strategies,
        batch_sizes: a.batch_sizes.clone().unwrap_or(d.batch_sizes),
        runs: a.runs.unwrap_or(d.runs),
        decode: base,
    };
    let report = bench_single_step(&loaded.model, &loaded.vocab, &pairs, &options)?;
    let text = render_single_step(&report) + "\n" + &render_accuracy(&report);
    print!("{text}");
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("bench-single"));
    create_dir(&out)?;
    write_file(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_file(&out.join("report.csv"), single_step_csv(&report)?)?;
    write_file(&out.join("report.txt"), &text)?;
    let mut m = manifest("bench-single", &options)?.with_checkpoint(&loaded.checkpoint)?;
    m.outputs = ["report.json", "report.csv", "report.txt"].map(String::from).to_vec();
    m.write_beside(&out)?;
    Ok(())
}

/// `ALGO:BEAM_WIDTH:SECONDS:STRATEGY`; SECONDS may be `none`.
fn parse_setting(text: &str, base: &PlanConfig) -> Result<(PlanConfig, Strategy)> {
    let parts: Vec<&str> = text.split(':').collect();
    let [algo, width, seconds, strategy] = parts[..] else {
        bail!("--setting {text:?}: expected ALGO:BEAM_WIDTH:SECONDS:STRATEGY");
    };
    let config = PlanConfig {
        algorithm: algo.parse()?,
        beam_width: width.parse().with_context(|| format!("--setting {text:?}: beam width"))?,
        time_limit: match seconds {
            "none" => None,
            s => Some(s.parse().with_context(|| format!("--setting {text:?}: seconds"))?),
        },
        ..base.clone()
    };
    config.validate()?;
    Ok((config, strategy.parse()?))
}

fn bench_multi_cmd(a: BenchMultiArgs) -> Result<()> {
    let inputs = search_inputs(&a.search, &[])?;
    let base = plan_config(&a.search, None, None, None)?;
    let specs = a
        .settings
        .clone()
        .unwrap_or_else(|| vec!["retro-star:1:5:bs".into(), "retro-star:1:5:msbs".into()]);
    let loaded = match inputs.grammar {
        Some(_) => None,
        None => Some(load_model(&a.model)?),
    };
    let mut settings = Vec::with_capacity(specs.len());
    let mut decoders = Vec::with_capacity(specs.len());
    for spec in &specs {
        let (plan, strategy) = parse_setting(spec, &base)?;
        let decoder = match &loaded {
            Some(l) => {
                let m = ModelArgs {
                    strategy: Some(strategy.to_string()),
                    ..a.model.clone()
                };
                Some(DecodeConfig {
                    beam_size: a.model.beams.unwrap_or(plan.expansions),
                    ..decode_config(&m, &l.model)?
                })
            }
            None => None,
        };
        settings.push(PlanSetting {
            label: spec.clone(),
            decoder: if loaded.is_some() { strategy.to_string() } else { "oracle".into() },
            plan,
        });
        decoders.push(decoder);
    }
    let mut labels = HashSet::new();
    if let Some(dup) = settings.iter().find(|s| !labels.insert(&s.label)) {
        bail!("--setting {:?} given twice", dup.label);
    }
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("bench-multi"));
    create_dir(&out)?;
    let results = out.join("results.jsonl");
    let report = bench_multi_step(
        &inputs.targets,
        &inputs.stock,
        &settings,
        |setting| {
            let i = settings.iter().position(|s| s.label == setting.label).expect("known setting");
            match (&loaded, &inputs.grammar) {
                (Some(l), _) => AnyExpander::Model(ModelExpander::new(
                    &l.model,
                    &l.vocab,
                    decoders[i].clone().expect("model config"),
                )),
                (None, Some(g)) => AnyExpander::Oracle(OracleExpander::new(g.clone())),
                (None, None) => unreachable!("either a model or a grammar"),
            }
        },
        Some(&results),
    )?;
    let text = render_multi_step(&report) + "\n" + &render_beam_width_table(&report);
    print!("{text}");
    write_file(&out.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_file(&out.join("report.csv"), multi_step_csv(&report)?)?;
    write_file(&out.join("report.txt"), &text)?;
    #[derive(Serialize)]
    struct Snapshot<'a> {
        settings: &'a [PlanSetting],
        decoders: &'a [Option<DecodeConfig>],
        oracle: Option<&'a Path>,
        targets: usize,
    }
    let mut m = manifest(
        "bench-multi",
        &Snapshot {
            settings: &settings,
            decoders: &decoders,
            oracle: a.search.oracle.as_deref(),
            targets: inputs.targets.len(),
        },
    )?;
    if let Some(l) = &loaded {
        m = m.with_checkpoint(&l.checkpoint)?;
    }
    m.outputs = ["results.jsonl", "report.json", "report.csv", "report.txt"].map(String::from).to_vec();
    m.write_beside(&out)?;
    Ok(())
}
