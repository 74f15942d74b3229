use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use roadclip::error::{Error, Result};
use roadclip::eval::{
    attention_map, evaluate, export_heatmap, run_ablation, write_ablation, zero_shot_classify, AblationSpec,
};
use roadclip::harness::{checkpoint, gradcheck, inspect, train, RunConfig};
use roadclip::parallel::worker_count;
use roadclip::synthbench::{generate_dataset, load_dataset, write_dataset, DatasetManifest, Split};

#[derive(Parser)]
#[command(name = "roadclip", version, about = "Road-damage vision-language training on a synthetic benchmark")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Positional strategy: none, sinusoidal_absolute, learnable_absolute, relative, dape.
    #[arg(long)]
    pe: Option<String>,
    /// Dataset directory (overrides `data.path`).
    #[arg(long)]
    data: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        let mut o = Vec::new();
        if let Some(v) = self.seed {
            o.push(format!("seed={v}"));
        }
        if let Some(v) = self.epochs {
            o.push(format!("train.epochs={v}"));
        }
        if let Some(v) = self.batch_size {
            o.push(format!("train.batch_size={v}"));
        }
        if let Some(v) = self.lr {
            o.push(format!("optim.lr={v:e}"));
        }
        if let Some(v) = &self.pe {
            o.push(format!("pe=\"{v}\""));
        }
        if let Some(v) = &self.data {
            o.push(format!("data.path=\"{}\"", v.display()));
        }
        // explicit --set wins over the shorthand flags
        o.extend(self.overrides.iter().cloned());
        match &self.config {
            Some(p) => RunConfig::load(p, &o),
            None => RunConfig::from_toml("", &o),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to disk.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// JSON manifest; the default recipe applies when omitted.
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        train: Option<usize>,
        #[arg(long)]
        val: Option<usize>,
        #[arg(long)]
        test: Option<usize>,
    },
    /// Train from scratch; writes `checkpoint.bin` and `train_log.jsonl`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        /// Append the summary line to this file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Export attention heatmaps for the first N samples into this directory.
        #[arg(long)]
        heatmaps: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        heatmap_count: usize,
    },
    /// Train and test every cell of a strategy × loss-weight grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// TOML grid with `strategies` and `[[weights]]`; all five strategies
        /// with the configured weights when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference check of the full objective in f64.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 6)]
        per_group: usize,
    },
    /// Parameter counts, temperature, and prototype norms of a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn parse_split(s: &str) -> Result<Split> {
    Split::ALL
        .into_iter()
        .find(|x| x.name() == s)
        .ok_or_else(|| Error::Invalid(format!("unknown split `{s}`")))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData {
            out,
            manifest,
            seed,
            train,
            val,
            test,
        } => {
            let mut m = match manifest {
                Some(p) => {
                    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
                    serde_json::from_slice(&bytes).map_err(|e| Error::format(&p, e.to_string()))?
                }
                None => DatasetManifest::default(),
            };
            m.seed = seed.unwrap_or(m.seed);
            m.train = train.unwrap_or(m.train);
            m.val = val.unwrap_or(m.val);
            m.test = test.unwrap_or(m.test);
            let ds = generate_dataset(&m, worker_count())?;
            let written = write_dataset(&ds, &out)?;
            println!(
                "{}",
                json!({"out": out, "seed": written.seed, "train": written.train, "val": written.val,
                       "test": written.test, "files": written.files.len()})
            );
        }
        Command::Train { cfg, out } => {
            let cfg = cfg.load()?;
            let data = load_dataset(Path::new(&cfg.data.path))?;
            create_dir(&out)?;
            let log_path = out.join("train_log.jsonl");
            let mut log = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut io_err = None;
            let (state, _) = train(cfg, &data, |l| {
                let line = l.to_json_line();
                println!("{line}");
                if let Err(e) = writeln!(log, "{line}") {
                    io_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = io_err {
                return Err(Error::io(&log_path, e));
            }
            write_file(&out.join("config.toml"), state.config.to_toml())?;
            checkpoint::save(&state, &out.join("checkpoint.bin"))?;
        }
        Command::Eval {
            checkpoint: ckpt,
            data,
            split,
            out,
            heatmaps,
            heatmap_count,
        } => {
            let state = checkpoint::load(&ckpt)?;
            let ds = load_dataset(&data)?;
            let split = parse_split(&split)?;
            let samples = ds.split(split);
            let summary = evaluate(&state.model, samples, &state.config.eval)?;
            let zs = zero_shot_classify(&state.model, samples)?;
            let run_id = ckpt
                .parent()
                .and_then(|p| p.file_name())
                .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned());
            let line = json!({"run_id": run_id, "split": split.name(), "epoch": state.epoch,
                              "metrics": summary, "confusion": zs.confusion})
            .to_string();
            println!("{line}");
            if let Some(p) = out {
                let mut f = fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?;
                writeln!(f, "{line}").map_err(|e| Error::io(&p, e))?;
            }
            if let Some(dir) = heatmaps {
                create_dir(&dir)?;
                for s in samples.iter().take(heatmap_count) {
                    let map = attention_map(&state.model, &s.image, &s.caption, &s.id)?;
                    export_heatmap(&map, &s.image, &dir.join(format!("{}.pgm", s.id)))?;
                }
            }
        }
        Command::Ablate { cfg, grid, out } => {
            let cfg = cfg.load()?;
            let grid = match grid {
                Some(p) => {
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    toml::from_str(&text).map_err(|e| Error::config("grid", e.to_string()))?
                }
                None => AblationSpec {
                    strategies: roadclip::dape::PeStrategy::ALL.to_vec(),
                    weights: vec![cfg.loss],
                },
            };
            let data = load_dataset(Path::new(&cfg.data.path))?;
            let rows = run_ablation(&cfg, &grid, &data, |r| {
                println!("{}", serde_json::to_string(r).expect("plain struct"))
            })?;
            write_ablation(&rows, &out)?;
        }
        Command::Gradcheck { cfg, per_group } => {
            let cfg = cfg.load()?;
            let report = gradcheck(&cfg, per_group.max(1))?;
            for g in &report.groups {
                println!("{:<32} {:>3} coords  max rel err {:.3e}", g.name, g.coords, g.max_rel_err);
            }
            println!(
                "checked {} coordinates; worst {} at {:.3e}; {}",
                report.checked,
                report.worst,
                report.max_rel_err,
                if report.passed() { "PASS" } else { "FAIL" }
            );
            if !report.passed() {
                return Err(Error::GradientMismatch {
                    group: report.worst,
                    max_rel_err: report.max_rel_err,
                });
            }
        }
        Command::Inspect { checkpoint: ckpt } => {
            let state = checkpoint::load(&ckpt)?;
            let info = inspect(&state);
            println!("epoch        {}", info.epoch);
            println!("pe           {}", info.pe);
            println!("parameters   {} in {} tensors", info.parameters, info.tensors);
            for (g, n) in &info.groups {
                println!("  {g:<12} {n}");
            }
            println!("tau          {:.6}", info.tau);
            let norms: Vec<String> = info.prototype_norms.iter().map(|n| format!("{n:.4}")).collect();
            println!("prototypes   {}", norms.join(" "));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
