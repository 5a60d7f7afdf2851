//! `cipher` — train-your-own deepfake detector.
//!
//! Usage:
//!   cipher <command> [--config FILE] [--KEY VALUE ...] [paths...]
//!
//! Commands run in order: prepare, train-gan, train-diffusion, generate,
//! finetune, detect, evaluate. `detect` takes image paths as positional
//! arguments. Every `--KEY VALUE` pair overrides a config key (dotted names
//! like `gan.lr`, plus shorthands `--real`, `--fake`, `--n`, `--run`,
//! `--threshold`, `--registry`).

use cipher::cli::{run_command, Config, Precision, RunContext};

const COMMANDS: &[&str] = &[
    "prepare",
    "train-gan",
    "train-diffusion",
    "generate",
    "finetune",
    "detect",
    "evaluate",
];

const USAGE: &str = "\
usage: cipher <command> [--config FILE] [--KEY VALUE ...] [paths...]

commands:
  prepare          build dataset manifests (--real DIR [--fake DIR] --n N)
  train-gan        train the progressive GAN on the real manifest
  train-diffusion  train the diffusion model on the real manifest
  generate         sample fakes from the diffusion checkpoint
  finetune         fine-tune the discriminator as a real/fake detector
  detect           score image paths with the detector
  evaluate         run the detector over evaluation corpora, write reports

options:
  --config FILE    layer a key = value config file under the overrides
  --KEY VALUE      override any config key (e.g. --gan.lr 0.001 --run exp1)
  --help           show this message

environment:
  CIPHER_RUNS_DIR  root directory for runs (default: ./runs)
";

struct Invocation {
    command: String,
    config_file: Option<String>,
    overrides: Vec<(String, String)>,
    positional: Vec<String>,
}

fn parse_args(args: &[String]) -> Result<Invocation, String> {
    let mut it = args.iter().peekable();
    let command = match it.next() {
        Some(c) if c == "--help" || c == "-h" => return Err(String::new()),
        Some(c) => c.clone(),
        None => return Err(String::new()),
    };
    if !COMMANDS.contains(&command.as_str()) {
        return Err(format!("unknown command '{command}'"));
    }
    let mut inv = Invocation {
        command,
        config_file: None,
        overrides: Vec::new(),
        positional: Vec::new(),
    };
    while let Some(arg) = it.next() {
        if arg == "--help" || arg == "-h" {
            return Err(String::new());
        }
        if let Some(key) = arg.strip_prefix("--") {
            let value = it
                .next()
                .ok_or_else(|| format!("flag --{key} needs a value"))?;
            if key == "config" {
                inv.config_file = Some(value.clone());
            } else {
                inv.overrides.push((key.to_string(), value.clone()));
            }
        } else {
            inv.positional.push(arg.clone());
        }
    }
    Ok(inv)
}

fn run(inv: &Invocation) -> cipher::Result<()> {
    let mut cfg = match &inv.config_file {
        Some(path) => Config::from_file(std::path::Path::new(path))?,
        None => Config::default(),
    };
    for (key, value) in &inv.overrides {
        cfg.set_checked(key, value, "command line")?;
    }
    let precision = cfg.precision()?;
    let ctx = RunContext::open(cfg)?;
    match precision {
        Precision::F32 => run_command::<f32>(&inv.command, &ctx, &inv.positional),
        Precision::F64 => run_command::<f64>(&inv.command, &ctx, &inv.positional),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let inv = match parse_args(&args) {
        Ok(inv) => inv,
        Err(msg) if msg.is_empty() => {
            print!("{USAGE}");
            std::process::exit(if args.is_empty() { 2 } else { 0 });
        }
        Err(msg) => {
            eprintln!("error: {msg}");
            eprint!("{USAGE}");
            std::process::exit(2);
        }
    };
    if let Err(e) = run(&inv) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
