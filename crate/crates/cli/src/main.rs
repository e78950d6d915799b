use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use zigzag::runner::{
    self, AblateArgs, CacheArgs, Command, DumpArgs, Fault, Manifest, SampleArgs, SamplerArgs, StoryArgs, TrainArgs,
    VerifyArgs,
};
use zigzag::sampler::Variant;
use zigzag::Error;

#[derive(Parser)]
#[command(name = "zigzag", version, about = "Asymmetric zigzag sampling lab")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the toy denoiser on the procedural world.
    Train {
        /// key=value training config; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build an identity token cache.
    Cache {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Identity prompt, e.g. "a cat".
        #[arg(long)]
        identity: String,
        #[arg(long, default_value_t = 0.2)]
        k_ratio: f64,
        /// Comma-separated layer indices; all layers when omitted.
        #[arg(long, value_delimiter = ',')]
        layers: Vec<usize>,
        #[arg(long, default_value_t = 5.5)]
        guidance: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a single image.
    Sample {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        identity: String,
        #[arg(long)]
        scene: String,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a story from a story file.
    Story {
        #[command(flatten)]
        story: StoryFlags,
    },
    /// Generate a long story with a sliding window over the scenes.
    LongStory {
        #[command(flatten)]
        story: StoryFlags,
        #[arg(long)]
        window: usize,
        /// Defaults to the window size.
        #[arg(long)]
        stride: Option<usize>,
    },
    /// Run every (variant, seed) pair and write a ranked report.
    Ablate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        story: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "azs_asymmetric,zig_gen_symmetric,zig_zag_symmetric,all_symmetric")]
        variants: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        /// Comma-separated k values; more than one runs a k sweep.
        #[arg(long, value_delimiter = ',')]
        k_ratios: Vec<f64>,
        #[command(flatten)]
        sampler: SamplerFlags,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the algebraic invariants on randomised instances.
    Verify {
        #[arg(long, default_value_t = 100)]
        cases: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Deliberately break a check: `increasing-alpha`.
        #[arg(long)]
        fault: Option<String>,
    },
    /// Write rendered scenes as latent grids.
    Dump {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Rerun a command from its manifest and compare outputs bit for bit.
    Replay {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct StoryFlags {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Prebuilt identity cache; built on the fly when omitted.
    #[arg(long)]
    cache: Option<PathBuf>,
    #[arg(long)]
    story: PathBuf,
    #[command(flatten)]
    sampler: SamplerFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SamplerFlags {
    #[arg(long, default_value = "azs_asymmetric")]
    variant: String,
    #[arg(long)]
    steps: Option<usize>,
    /// Text guidance scale for zig and generation.
    #[arg(long, default_value_t = 5.5)]
    guidance: f64,
    /// Guidance scale of the zag step.
    #[arg(long, default_value_t = 0.0)]
    zag_guidance: f64,
    #[arg(long, default_value_t = 1.0)]
    w_active: f64,
    #[arg(long, default_value_t = 0.3)]
    w_inactive: f64,
    #[arg(long, default_value_t = 0.2)]
    k_ratio: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',')]
    layers: Vec<usize>,
    /// Fraction of timesteps that run the zigzag triple.
    #[arg(long, default_value_t = 1.0)]
    zigzag_fraction: f64,
}

fn parse_variant(s: &str) -> Result<Variant, Error> {
    s.parse().map_err(|_| {
        let valid: Vec<&str> = Variant::ALL.iter().map(|v| v.as_str()).collect();
        Error::Usage(format!("unknown variant {s:?}; valid variants: {}", valid.join(", ")))
    })
}

impl SamplerFlags {
    fn into_args(self) -> Result<SamplerArgs, Error> {
        Ok(SamplerArgs {
            variant: parse_variant(&self.variant)?,
            steps: self.steps,
            guidance: self.guidance,
            zag_guidance: self.zag_guidance,
            w_active: self.w_active,
            w_inactive: self.w_inactive,
            k_ratio: self.k_ratio,
            seed: self.seed,
            layers: self.layers,
            zigzag_fraction: self.zigzag_fraction,
        })
    }
}

impl StoryFlags {
    fn into_args(self, window: Option<usize>, stride: Option<usize>) -> Result<StoryArgs, Error> {
        Ok(StoryArgs {
            checkpoint: self.checkpoint,
            cache: self.cache,
            story: self.story,
            sampler: self.sampler.into_args()?,
            window,
            stride,
            out: self.out,
        })
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_ascii_lowercase).collect()
}

fn summarize(m: &Manifest) {
    let d = &m.details;
    match &m.command {
        Command::Train(_) => println!(
            "trained: initial loss {:.3}, final loss {:.3}, checkpoint {}",
            d["initial_loss"].as_f64().unwrap_or(f64::NAN),
            d["final_loss"].as_f64().unwrap_or(f64::NAN),
            d["checkpoint_hash"].as_str().unwrap_or("?")
        ),
        Command::Cache(_) => println!(
            "cache: {} entries, k_count {} of {} tokens, hash {}",
            d["entries"],
            d["k_count"],
            d["tokens"],
            d["cache_hash"].as_str().unwrap_or("?")
        ),
        Command::Sample(_) => println!("sample: {} denoiser calls ({} per step)", d["denoiser_calls"], d["calls_per_step"]),
        Command::Story(_) | Command::LongStory(_) => {
            let scenes = d["scenes"].as_array().map_or(0, Vec::len);
            let per_step = d["scenes"][0]["calls_per_step"].clone();
            println!("story: {scenes} scenes, {per_step} denoiser calls per step");
            if let Some(sc) = d["metrics"]["subject_consistency"].as_f64() {
                println!(
                    "consistency {sc:.4}, alignment {:.4}",
                    d["metrics"]["prompt_alignment"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
        Command::Ablate(a) => {
            if let Ok(text) = std::fs::read_to_string(a.out.join("report.txt")) {
                print!("{}", text.split("--- json ---").next().unwrap_or(""));
            }
        }
        Command::Dump(_) => println!("dump: {} renders", d["renders"]),
    }
    println!("manifest: {}", m.command.out().join(runner::MANIFEST_FILE).display());
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let command = match cli.command {
        Cmd::Train { config, out } => Command::Train(TrainArgs { config, out }),
        Cmd::Cache {
            checkpoint,
            identity,
            k_ratio,
            layers,
            guidance,
            seed,
            steps,
            out,
        } => Command::Cache(CacheArgs {
            checkpoint,
            identity: words(&identity),
            k_ratio,
            layers,
            guidance,
            seed,
            steps,
            out,
        }),
        Cmd::Sample {
            checkpoint,
            identity,
            scene,
            sampler,
            out,
        } => Command::Sample(SampleArgs {
            checkpoint,
            identity: words(&identity),
            scene: words(&scene),
            sampler: sampler.into_args()?,
            out,
        }),
        Cmd::Story { story } => Command::Story(story.into_args(None, None)?),
        Cmd::LongStory { story, window, stride } => Command::LongStory(story.into_args(Some(window), stride)?),
        Cmd::Ablate {
            checkpoint,
            story,
            variants,
            seeds,
            k_ratios,
            sampler,
            out,
        } => Command::Ablate(AblateArgs {
            checkpoint,
            story,
            variants: variants.iter().map(|v| parse_variant(v)).collect::<Result<_, _>>()?,
            seeds,
            k_ratios,
            sampler: sampler.into_args()?,
            out,
        }),
        Cmd::Verify { cases, seed, fault } => {
            let fault = match fault.as_deref() {
                None => None,
                Some("increasing-alpha" | "increasing_alpha") => Some(Fault::IncreasingAlpha),
                Some(other) => return Err(Error::Usage(format!("unknown fault {other:?}; valid: increasing-alpha"))),
            };
            let report = runner::cmd_verify(&VerifyArgs { cases, seed, fault })?;
            print!("{}", report.to_text());
            return Ok(if report.passed() { ExitCode::SUCCESS } else { ExitCode::from(3) });
        }
        Cmd::Dump { config, out } => Command::Dump(DumpArgs { config, out }),
        Cmd::Replay { manifest, out } => {
            let report = runner::replay(&manifest, &out)?;
            println!(
                "replay {}: {} identical, {} differ, {} missing",
                report.command,
                report.matched.len(),
                report.mismatched.len(),
                report.missing.len()
            );
            for f in report.mismatched.iter().chain(&report.missing) {
                println!("  differs: {f}");
            }
            for f in &report.changed_inputs {
                println!("  input changed since the original run: {f}");
            }
            return Ok(if report.identical() { ExitCode::SUCCESS } else { ExitCode::from(3) });
        }
    };
    let manifest = runner::run(command)?;
    summarize(&manifest);
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
