//! Command-line entry point.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::KvConfig;
use crate::datasynth::{self, WorldConfig};
use crate::error::{Error, Result};
use crate::features::Sample;
use crate::model::{checkpoint, Ablation, Arch, Model, ModelConfig};
use crate::traineval::{self, MetricsReport, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "dpan",
    version,
    about = "Train and evaluate relevant-recommendation CTR models",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        users: Option<usize>,
        #[arg(long)]
        items: Option<usize>,
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        impressions: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        beta_sim: Option<f64>,
        #[arg(long)]
        beta_div: Option<f64>,
        /// `world.*` keys.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train on all days but the last and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "dpan")]
        model: String,
        /// `model.*` and `train.*` keys; `preset = full` selects full-size widths.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Repeatable ablation flag, e.g. `--ablate no_deep_union`.
        #[arg(long)]
        ablate: Vec<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score the last day of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        baseline_ckpt: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the full model and every single-flag ablation.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Distinct categories and brands in each event's top-k by channel.
    CaseStudy {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 5)]
        topk: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn flag_err(flag: &str, e: Error) -> Error {
    Error::Config(format!("{flag}: {e}"))
}

fn read_config(path: &Option<PathBuf>) -> Result<KvConfig> {
    match path {
        Some(p) => KvConfig::read(p).map_err(|e| flag_err("--config", e)),
        None => Ok(KvConfig::new()),
    }
}

fn load_data(dir: &Path) -> Result<(crate::features::VocabManifest, Vec<Sample>)> {
    if !dir.is_dir() {
        return Err(Error::Config(format!("--data: {} is not a directory", dir.display())));
    }
    datasynth::load_dir(dir).map_err(|e| flag_err("--data", e))
}

/// Model and training configs: desk preset, then file values, then flags.
fn resolve_training(kv: &KvConfig, arch: Option<Arch>, seed: Option<u64>, epochs: Option<usize>) -> Result<(ModelConfig, TrainConfig)> {
    kv.check_known_sections()?;
    let (mut mc, mut tc) = match kv.get_str("preset").unwrap_or("desk") {
        "desk" => (ModelConfig::desk(), TrainConfig::desk()),
        "full" => (ModelConfig::default(), TrainConfig::default()),
        other => return Err(Error::Config(format!("--config: unknown preset `{other}` (expected desk or full)"))),
    };
    mc.apply(&kv.section("model")).map_err(|e| flag_err("--config", e))?;
    tc.apply(&kv.section("train")).map_err(|e| flag_err("--config", e))?;
    if let Some(a) = arch {
        mc.arch = a;
    }
    if let Some(s) = seed {
        mc.seed = s;
        tc.seed = s;
    }
    if let Some(e) = epochs {
        tc.epochs = e;
    }
    tc.validate()?;
    Ok((mc, tc))
}

fn resolved_text(mc: &ModelConfig, tc: &TrainConfig) -> String {
    let mut kv = KvConfig::new();
    for (prefix, sub) in [("model", mc.to_kv()), ("train", tc.to_kv())] {
        for k in sub.keys() {
            kv.set(format!("{prefix}.{k}"), sub.get_str(k).unwrap_or_default());
        }
    }
    kv.to_text()
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn execute(cmd: Command, out: &mut dyn Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match cmd {
        Command::GenData {
            out: dir,
            users,
            items,
            days,
            impressions,
            seed,
            beta_sim,
            beta_div,
            config,
        } => {
            let mut w = WorldConfig::default();
            w.apply(&read_config(&config)?.section("world")).map_err(|e| flag_err("--config", e))?;
            macro_rules! over {
                ($($f:ident),*) => { $(if let Some(v) = $f { w.$f = v; })* };
            }
            over!(users, items, days, impressions, seed, beta_sim, beta_div);
            let data = datasynth::generate(&w)?;
            datasynth::write_dir(&dir, &data).map_err(|e| flag_err("--out", e))?;
            write!(out, "{}", data.header()).map_err(io)?;
            writeln!(out, "wrote {} samples to {}", data.samples.len(), dir.display()).map_err(io)?;
        }
        Command::Train {
            data,
            model,
            config,
            out: ckpt,
            ablate,
            seed,
            epochs,
        } => {
            let arch: Arch = model.parse().map_err(|e| flag_err("--model", e))?;
            let (mut mc, tc) = resolve_training(&read_config(&config)?, Some(arch), seed, epochs)?;
            for a in &ablate {
                let a: Ablation = a.parse().map_err(|e| flag_err("--ablate", e))?;
                mc.ablations.set(a, true);
            }
            mc.validate().map_err(|e| flag_err("--ablate", e))?;
            let (manifest, samples) = load_data(&data)?;
            let (train_set, test_set) = traineval::split_by_day(&samples).map_err(|e| flag_err("--data", e))?;
            let resolved = resolved_text(&mc, &tc);
            write!(out, "{resolved}").map_err(io)?;
            let mut m = Model::new(mc, manifest)?;
            let report = traineval::train(&mut m, &train_set, &test_set, &tc)?;
            let table = traineval::epoch_table(&report);
            write!(out, "{table}").map_err(io)?;
            checkpoint::save(&m, &KvConfig::parse(&resolved, Path::new("<resolved>"))?, &ckpt)
                .map_err(|e| flag_err("--out", e))?;
            traineval::write_with_config(&sibling(&ckpt, ".metrics.txt"), &resolved, &table)?;
            traineval::write_summary(&sibling(&ckpt, ".summary.json"), &resolved, &report)?;
        }
        Command::Eval {
            ckpt,
            data,
            baseline_ckpt,
            out: dest,
        } => {
            let (m, cfg) = checkpoint::load(&ckpt).map_err(|e| flag_err("--ckpt", e))?;
            let (_, samples) = load_data(&data)?;
            let (_, test_set) = traineval::split_by_day(&samples).map_err(|e| flag_err("--data", e))?;
            let batch = cfg.get("train.eval_batch")?.unwrap_or(512);
            let metrics = traineval::evaluate(&m, &test_set, batch)?;
            let base = match &baseline_ckpt {
                Some(p) => {
                    let (b, _) = checkpoint::load(p).map_err(|e| flag_err("--baseline-ckpt", e))?;
                    Some(traineval::evaluate(&b, &test_set, batch)?)
                }
                None => None,
            };
            let report = MetricsReport::new(metrics, base)?;
            let text = cfg.to_text();
            write!(out, "{text}{}", report.to_text()).map_err(io)?;
            if let Some(p) = dest {
                traineval::write_with_config(&p, &text, &report.to_text()).map_err(|e| flag_err("--out", e))?;
                traineval::write_summary(&sibling(&p, ".json"), &text, &report)?;
            }
        }
        Command::Ablate {
            data,
            config,
            out: dest,
            seed,
        } => {
            let (mc, tc) = resolve_training(&read_config(&config)?, None, seed, None)?;
            if mc.arch != Arch::Dpan {
                return Err(Error::Config("--config: ablations apply to model.arch = dpan only".into()));
            }
            let (manifest, samples) = load_data(&data)?;
            let (train_set, test_set) = traineval::split_by_day(&samples).map_err(|e| flag_err("--data", e))?;
            let resolved = resolved_text(&mc, &tc);
            write!(out, "{resolved}").map_err(io)?;
            let rows = traineval::ablate(&mc, &manifest, &train_set, &test_set, &tc)?;
            let table = traineval::ablation_table(&rows);
            write!(out, "{table}").map_err(io)?;
            if let Some(p) = dest {
                traineval::write_with_config(&p, &resolved, &table).map_err(|e| flag_err("--out", e))?;
                traineval::write_summary(&sibling(&p, ".json"), &resolved, &rows)?;
            }
        }
        Command::CaseStudy {
            ckpt,
            data,
            topk,
            out: dest,
        } => {
            if topk == 0 {
                return Err(Error::Config("--topk must be at least 1".into()));
            }
            let (m, cfg) = checkpoint::load(&ckpt).map_err(|e| flag_err("--ckpt", e))?;
            let (_, samples) = load_data(&data)?;
            let (_, test_set) = traineval::split_by_day(&samples).map_err(|e| flag_err("--data", e))?;
            let cs = traineval::case_study(&m, &test_set, topk, 512)?;
            if cs.clamped {
                eprintln!("warning: --topk {topk} exceeds some slates; clamped to the slate size");
            }
            let mut text = cs.plot_table();
            let t = &cs.sign_test;
            text.push_str(&format!(
                "# sign test over {} users: gul>srp {}, srp>gul {}, ties {}, p(one-sided) {:.3e}, p(two-sided) {:.3e}\n",
                t.users, t.gul_greater, t.srp_greater, t.ties, t.p_gul_greater, t.p_two_sided
            ));
            let header = cfg.to_text();
            write!(out, "{header}{text}").map_err(io)?;
            if let Some(p) = dest {
                traineval::write_with_config(&p, &header, &text).map_err(|e| flag_err("--out", e))?;
                traineval::write_summary(&sibling(&p, ".json"), &header, &cs)?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns 0 on success, 2 on usage errors, and 1 on runtime failures.
pub fn run_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = if code == 0 {
                write!(out, "{}", e.render())
            } else {
                write!(err, "{}", e.render())
            };
            return code;
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            1
        }
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    run_with(args, &mut std::io::stdout().lock(), &mut std::io::stderr().lock())
}
