use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use polarpath::config::RunConfig;
use polarpath::pipeline::{self, RunManifest};
use polarpath::render::Palette;
use polarpath::{Error, Result};

/// Weakly-supervised classification of synthetic polarimetric slides.
#[derive(Parser)]
#[command(name = "polarpath", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic slide corpus.
    Gen(Common),
    /// Train the per-slide pixel classifiers and write probability maps.
    Stage1(Common),
    /// Distil probability maps into the patch encoder and export embeddings.
    Stage2(Common),
    /// Train the attention-MIL classifier and evaluate held-out ROIs.
    Stage3(Common),
    /// Run gen, stage1, stage2, stage3, render and report in order.
    Pipeline(Common),
    /// Label-noise sweep with and without confident learning.
    NoiseExp(Common),
    /// Render probability maps as pseudo-H&E images.
    Render {
        #[command(flatten)]
        common: Common,
        /// JSON palette with one RGB anchor per structure class.
        #[arg(long)]
        palette: Option<PathBuf>,
    },
    /// Summarize the metrics of every command run so far.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Confident learning in stage 1.
    #[arg(long, value_enum)]
    cl: Option<Toggle>,
    /// 224-pixel patches, 1024-wide embeddings and 448-pixel slides.
    #[arg(long)]
    paper_scale: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

impl Common {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if self.paper_scale {
            cfg = cfg.paper_scale();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(cl) = self.cl {
            cfg.stage1.confidence_learning = matches!(cl, Toggle::On);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn run(command: Command) -> Result<RunManifest> {
    match command {
        Command::Gen(c) => pipeline::gen(&c.resolve()?),
        Command::Stage1(c) => pipeline::stage1(&c.resolve()?),
        Command::Stage2(c) => pipeline::stage2(&c.resolve()?),
        Command::Stage3(c) => pipeline::stage3(&c.resolve()?),
        Command::Pipeline(c) => pipeline::pipeline(&c.resolve()?),
        Command::NoiseExp(c) => pipeline::noise_exp(&c.resolve()?),
        Command::Render { common, palette } => {
            let cfg = common.resolve()?;
            let palette = palette.as_deref().map(Palette::load).transpose()?;
            pipeline::render(&cfg, palette.as_ref())
        }
        Command::Report(c) => pipeline::report(&c.resolve()?),
    }
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("POLARPATH_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("POLARPATH_THREADS must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(format!("cannot size the thread pool: {e}")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    // usage errors are validation errors, so they exit 1 rather than clap's 2
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let result = configure_threads().and_then(|()| run(cli.command));
    match result {
        Ok(manifest) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&manifest.metrics).expect("metrics serialize")
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
