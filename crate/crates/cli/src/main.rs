use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context as _;
use clap::{Args, Parser, Subcommand};
use gradmark::harness::{
    self, apply_attack, calibrate, clean_bottoms, exit_code, prepare, preset, AttackSpec, Evaluator, ExperimentConfig,
    FINAL_PROBES, PRESETS,
};
use gradmark::linalg::{RngStream, StreamLabel};
use gradmark::nn::{read_checkpoint, write_checkpoint};
use gradmark::watermark::{keygen, read_key, verify, write_key};
use gradmark::Error;

#[derive(Parser)]
#[command(name = "gradmark", version, about = "Split-learning watermark simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// TOML experiment config.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Name of a shipped preset.
    #[arg(long)]
    preset: Option<String>,
    /// Overrides `output.dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides `seed`.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> gradmark::Result<ExperimentConfig> {
        let mut cfg = match (&self.config, &self.preset) {
            (Some(path), _) => ExperimentConfig::load(path)?,
            (None, Some(name)) => preset(name)?,
            (None, None) => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.output.dir = out.clone();
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train once with the config's base settings (the sweep section is ignored).
    Run(ConfigArgs),
    /// Run every point of the config's sweep.
    Sweep(ConfigArgs),
    /// Check a checkpoint against a key file.
    Verify {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: PathBuf,
        #[arg(long, default_value_t = 256)]
        samples: usize,
        #[arg(long, default_value_t = 0.7)]
        tau: f64,
        /// Seed of the probe stream.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Null success-rate distribution from clean models and random keys.
    Calibrate(ConfigArgs),
    /// Apply post-hoc attacks to a checkpoint using the config's attacker shard.
    Attack {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        key: Option<PathBuf>,
        /// `half16`, `int8`, `int4`, `prune:<ratio>` or `finetune:<steps>`; repeatable.
        #[arg(long = "attack", required = true, value_parser = parse_attack)]
        attacks: Vec<AttackSpec>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Write a fresh key file.
    Keygen {
        #[arg(long)]
        d: usize,
        #[arg(long)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// List the shipped presets.
    Presets,
}

fn parse_attack(s: &str) -> Result<AttackSpec, String> {
    AttackSpec::parse(s).ok_or_else(|| format!("unknown attack `{s}`"))
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn dispatch(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Run(args) => {
            let mut cfg = args.load()?;
            cfg.sweep = Default::default();
            let report = harness::run(&cfg)?;
            let f = &report.final_;
            match &f.verification {
                Some(v) => println!(
                    "accuracy {:.4}  wsr {:.4}  passed {}  -> {}",
                    f.accuracy,
                    v.wsr,
                    v.passed,
                    cfg.output.dir.display()
                ),
                None => println!("accuracy {:.4}  -> {}", f.accuracy, cfg.output.dir.display()),
            }
        }
        Command::Sweep(args) => {
            let cfg = args.load()?;
            for (name, report) in harness::run_sweep(&cfg)? {
                let wsr = report
                    .final_
                    .verification
                    .map(|v| format!("{:.4}", v.wsr))
                    .unwrap_or_else(|| "-".into());
                println!("{name}: accuracy {:.4}  wsr {wsr}", report.final_.accuracy);
            }
            println!("summary -> {}", cfg.output.dir.join("summary.csv").display());
        }
        Command::Verify {
            checkpoint,
            key,
            samples,
            tau,
            seed,
        } => {
            let model = read_checkpoint(&checkpoint)?;
            let key = read_key(&key)?;
            let mut probes = RngStream::new(seed, StreamLabel::Verification).derive(FINAL_PROBES);
            print_json(&verify(&model.bottom, &key, samples, tau, &mut probes)?)?;
        }
        Command::Calibrate(args) => {
            let cfg = args.load()?;
            let cal = calibrate(&cfg, &clean_bottoms(&cfg)?)?;
            std::fs::create_dir_all(&cfg.output.dir)?;
            write_json(&cfg.output.dir.join("calibration.json"), &cal)?;
            println!(
                "null mean {:.4}  std {:.4}  tau_5sigma {:.4}",
                cal.mean, cal.std, cal.tau_5sigma
            );
        }
        Command::Attack {
            checkpoint,
            key,
            attacks,
            config,
        } => {
            let cfg = config.load()?;
            let model = read_checkpoint(&checkpoint)?;
            let key = key.as_deref().map(read_key).transpose()?;
            let prep = prepare(&cfg)?;
            let shard = &prep.shards[cfg.protocol.capture_client];
            let ev = Evaluator {
                model: &model,
                eval: prep.test.as_ref().unwrap_or(&prep.train),
                key: key.as_ref(),
                samples: cfg.verify.samples,
                tau: cfg.verify.tau,
                seed: cfg.seed,
            };
            std::fs::create_dir_all(&cfg.output.dir)?;
            let mut reports = Vec::new();
            for spec in attacks {
                let bottom = apply_attack(&model.bottom, spec, &cfg, shard)?;
                let mut attacked = model.clone();
                attacked.bottom = bottom;
                let name = spec.to_string().replace(':', "-");
                write_checkpoint(&attacked, &cfg.output.dir.join(format!("attacked-{name}.ckpt")))?;
                reports.push(ev.compare(spec.name(), spec.parameter(), &attacked.bottom)?);
            }
            write_json(&cfg.output.dir.join("attacks.json"), &reports)?;
            print_json(&reports)?;
        }
        Command::Keygen { d, k, seed, out } => {
            let key = keygen(&mut RngStream::new(seed, StreamLabel::WatermarkKey), d, k)?;
            write_key(&key, &out)?;
            println!("key (d = {d}, k = {k}) -> {}", out.display());
        }
        Command::Presets => {
            for (name, _) in PRESETS {
                println!("{name}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let code = err.downcast_ref::<Error>().map(exit_code).unwrap_or(1);
            ExitCode::from(code as u8)
        }
    }
}
