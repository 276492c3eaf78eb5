use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "retrospec", version = crate::VERSION, about = "Speculative beam search for SMILES-to-SMILES retrosynthesis")]
pub struct Cli {
    /// TOML file with one table per subcommand; keys are long flag names.
    /// Flags given on the command line win over the file.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic reaction corpus, stock, and planning targets.
    GenData(GenDataArgs),
    /// Train a model with Medusa heads.
    Train(TrainArgs),
    /// Predict precursors for molecules.
    Decode(DecodeArgs),
    /// Multi-step route search for target molecules.
    Plan(PlanArgs),
    /// Single-step decoding benchmark (wall time, calls, batch size, acceptance, accuracy).
    BenchSingle(BenchSingleArgs),
    /// Multi-step planning benchmark over several planner settings.
    BenchMulti(BenchMultiArgs),
}

/// Fill every unset field of `self` from `file`.
macro_rules! overlay {
    ($ty:ty { $($field:ident),* $(,)? }) => {
        impl $ty {
            pub fn overlay(&mut self, file: Self) {
                $( if self.$field.is_none() { self.$field = file.$field; } )*
            }
        }
    };
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct GenDataArgs {
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Reaction pairs over all splits [default: 20000].
    #[arg(long)]
    pub size: Option<usize>,
    /// Building blocks, i.e. stock size [default: 150].
    #[arg(long)]
    pub blocks: Option<usize>,
    /// Coupling rules [default: 6].
    #[arg(long)]
    pub rules: Option<usize>,
    /// Deepest product in rule applications, at most 5 [default: 5].
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// Shortest building block in tokens [default: 3].
    #[arg(long)]
    pub min_fragment: Option<usize>,
    /// Longest building block in tokens [default: 6].
    #[arg(long)]
    pub max_fragment: Option<usize>,
    #[arg(long)]
    pub valid_fraction: Option<f64>,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    /// Planning targets written to targets.txt [default: 200].
    #[arg(long)]
    pub targets: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

overlay!(GenDataArgs {
    out,
    size,
    blocks,
    rules,
    max_depth,
    min_fragment,
    max_fragment,
    valid_fraction,
    test_fraction,
    targets,
    seed
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct TrainArgs {
    /// Dataset directory holding train.tsv and valid.tsv.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Training pairs; overrides <data>/train.tsv.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Held-out pairs; overrides <data>/valid.tsv.
    #[arg(long)]
    pub valid: Option<PathBuf>,
    /// Checkpoint to write; the vocabulary goes beside it as .vocab.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Architecture preset: toy or paper [default: toy].
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub medusa_heads: Option<usize>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    /// Optimizer steps [default: 6000].
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Peak learning rate [default: 0.002].
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Per-step loss CSV [default: <out>.log.csv].
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

overlay!(TrainArgs {
    data,
    train,
    valid,
    out,
    preset,
    medusa_heads,
    d_model,
    layers,
    max_len,
    dropout,
    steps,
    batch_size,
    lr,
    warmup,
    eval_every,
    log,
    seed
});

/// Model and decoding flags shared by decode, plan, and the benchmarks.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ModelArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Vocabulary file [default: checkpoint path with .vocab extension].
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// bs, bs-opt, hsbs, or msbs [default: msbs].
    #[arg(long)]
    pub strategy: Option<String>,
    /// Beam size K [default: 10].
    #[arg(long)]
    pub beams: Option<usize>,
    /// Longest output in tokens [default: 200].
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Top-p verification threshold [default: 0.9975].
    #[arg(long)]
    pub nucleus: Option<f64>,
    /// Draft length [default: Medusa heads for msbs, 10 for hsbs].
    #[arg(long)]
    pub draft_len: Option<usize>,
    /// Query-fragment drafts per beam for hsbs [default: 10].
    #[arg(long)]
    pub drafts: Option<usize>,
}

overlay!(ModelArgs {
    checkpoint,
    vocab,
    strategy,
    beams,
    max_len,
    nucleus,
    draft_len,
    drafts
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct DecodeArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Line-delimited SMILES to decode.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Predictions file [default: standard output].
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// JSON metrics record for the run.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Sources decoded together [default: 1].
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Molecules given directly.
    #[arg(value_name = "SMILES")]
    #[serde(skip)]
    pub smiles: Vec<String>,
}

impl DecodeArgs {
    pub fn overlay(&mut self, file: Self) {
        self.model.overlay(file.model);
        for (mine, theirs) in [(&mut self.input, file.input), (&mut self.output, file.output), (&mut self.metrics, file.metrics)] {
            if mine.is_none() {
                *mine = theirs;
            }
        }
        if self.batch_size.is_none() {
            self.batch_size = file.batch_size;
        }
    }
}

/// Planner limits shared by plan and bench-multi.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct SearchArgs {
    /// Building blocks, one SMILES per line.
    #[arg(long)]
    pub stock: Option<PathBuf>,
    /// Targets, one SMILES per line.
    #[arg(long)]
    pub targets: Option<PathBuf>,
    /// Use the synthetic grammar in this dataset directory instead of a model.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    /// Longest route in reactions [default: 5].
    #[arg(long)]
    pub max_depth: Option<usize>,
    /// [default: 35000]
    #[arg(long)]
    pub max_iterations: Option<usize>,
    /// Precursor sets kept per expansion [default: 10].
    #[arg(long)]
    pub expansions: Option<usize>,
    /// Planning only the first N targets.
    #[arg(long)]
    pub limit: Option<usize>,
}

overlay!(SearchArgs {
    stock,
    targets,
    oracle,
    max_depth,
    max_iterations,
    expansions,
    limit
});

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct PlanArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchArgs,
    /// retro-star or dfs [default: retro-star].
    #[arg(long)]
    pub algo: Option<String>,
    /// Frontier entries expanded per iteration [default: 1].
    #[arg(long)]
    pub beam_width: Option<usize>,
    /// Seconds per target [default: 5].
    #[arg(long)]
    pub time_limit: Option<f64>,
    /// Output directory for routes and the summary CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Targets given directly.
    #[arg(value_name = "SMILES")]
    #[serde(skip)]
    pub smiles: Vec<String>,
}

impl PlanArgs {
    pub fn overlay(&mut self, file: Self) {
        self.model.overlay(file.model);
        self.search.overlay(file.search);
        if self.algo.is_none() {
            self.algo = file.algo;
        }
        if self.beam_width.is_none() {
            self.beam_width = file.beam_width;
        }
        if self.time_limit.is_none() {
            self.time_limit = file.time_limit;
        }
        if self.out.is_none() {
            self.out = file.out;
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BenchSingleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    /// Reactions to decode (product<TAB>reactants).
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Comma-separated strategies [default: bs,bs-opt,hsbs,msbs].
    #[arg(long, value_delimiter = ',')]
    pub strategies: Option<Vec<String>>,
    /// Comma-separated batch sizes [default: 1,4,8,16,32].
    #[arg(long, value_delimiter = ',')]
    pub batch_sizes: Option<Vec<usize>>,
    /// Repetitions per cell [default: 5].
    #[arg(long)]
    pub runs: Option<usize>,
    /// Decode only the first N reactions.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output directory for report.json, report.csv, and report.txt.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl BenchSingleArgs {
    pub fn overlay(&mut self, file: Self) {
        self.model.overlay(file.model);
        if self.data.is_none() {
            self.data = file.data;
        }
        if self.strategies.is_none() {
            self.strategies = file.strategies;
        }
        if self.batch_sizes.is_none() {
            self.batch_sizes = file.batch_sizes;
        }
        if self.runs.is_none() {
            self.runs = file.runs;
        }
        if self.limit.is_none() {
            self.limit = file.limit;
        }
        if self.out.is_none() {
            self.out = file.out;
        }
    }
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct BenchMultiArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    #[serde(flatten)]
    pub search: SearchArgs,
    /// Planner setting ALGO:BEAM_WIDTH:SECONDS:STRATEGY, repeatable, e.g.
    /// retro-star:16:5:bs-opt [default: retro-star:1:5:bs and retro-star:1:5:msbs].
    #[arg(long = "setting")]
    #[serde(rename = "setting")]
    pub settings: Option<Vec<String>>,
    /// Output directory; results.jsonl there makes runs resumable.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl BenchMultiArgs {
    pub fn overlay(&mut self, file: Self) {
        self.model.overlay(file.model);
        self.search.overlay(file.search);
        if self.settings.is_none() {
            self.settings = file.settings;
        }
        if self.out.is_none() {
            self.out = file.out;
        }
    }
}

/// Per-subcommand tables of the config file.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub struct ConfigFile {
    #[serde(default)]
    pub gen_data: Option<GenDataArgs>,
    #[serde(default)]
    pub train: Option<TrainArgs>,
    #[serde(default)]
    pub decode: Option<DecodeArgs>,
    #[serde(default)]
    pub plan: Option<PlanArgs>,
    #[serde(default)]
    pub bench_single: Option<BenchSingleArgs>,
    #[serde(default)]
    pub bench_multi: Option<BenchMultiArgs>,
}

impl ConfigFile {
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("--config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("--config {}", path.display()))
    }

    /// Every table must name a subcommand and every key one of its long flags.
    pub fn parse(text: &str) -> Result<Self> {
        use clap::CommandFactory;
        let table: toml::Table = toml::from_str(text)?;
        let cli = Cli::command();
        for (section, value) in &table {
            let sub = cli
                .find_subcommand(section)
                .with_context(|| format!("unknown section [{section}]"))?;
            let keys = value
                .as_table()
                .with_context(|| format!("[{section}] must be a table"))?;
            for key in keys.keys() {
                let known = sub.get_arguments().any(|a| a.get_long() == Some(key.as_str()));
                if !known {
                    anyhow::bail!("unknown key {key:?} in [{section}]");
                }
            }
        }
        Ok(table.try_into()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_win_over_file() {
        let file = ConfigFile::parse(
            r#"
            [decode]
            strategy = "bs"
            beams = 5
            batch-size = 4
            "#,
        )
        .unwrap();
        let mut args = DecodeArgs {
            model: ModelArgs {
                beams: Some(10),
                ..Default::default()
            },
            ..Default::default()
        };
        args.overlay(file.decode.unwrap());
        assert_eq!(args.model.beams, Some(10));
        assert_eq!(args.model.strategy.as_deref(), Some("bs"));
        assert_eq!(args.batch_size, Some(4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ConfigFile::parse("[decode]\nbeam = 3\n").is_err());
        assert!(ConfigFile::parse("[decoder]\n").is_err());
        assert!(ConfigFile::parse("[bench-multi]\nsetting = [\"dfs:1:5:bs\"]\n").is_ok());
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
