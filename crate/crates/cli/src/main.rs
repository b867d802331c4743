//! `zigfed`: runs the detection pipeline stage by stage or end to end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use zigfed_core::harness::{self, ExperimentConfig, HarnessError, Stage};

#[derive(Debug, Parser)]
#[command(name = "zigfed", version, about = "Federated intrusion detection for simulated ZigBee networks")]
struct Cli {
    /// TOML experiment configuration; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Overrides the configured master seed.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,
    /// Bundle directory read and written by every stage.
    #[arg(long, global = true, value_name = "DIR", default_value = "zigfed-out")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate the pretraining hour and the normal corpus.
    Simulate,
    /// Extract window features from the simulated logs.
    Features,
    /// Train the model federated clients start from.
    Pretrain,
    /// Train the centralized baseline on coordinator-level features.
    TrainCentral,
    /// Run the federated rounds and write the comms ledger.
    TrainFed,
    /// Calibrate per-router thresholds on held-out normal windows.
    Thresholds,
    /// Simulate every selected attack and score its windows.
    Detect,
    /// Sweep k and write per-attack reports plus the summary table.
    SweepK,
    /// Compare centralized and federated communication volume.
    Overhead,
    /// Run every stage in order.
    RunAll,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| HarnessError {
                stage: Stage::Config,
                source: format!("{}: {e}", path.display()).into(),
            })?;
            ExperimentConfig::from_toml(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), HarnessError> {
    let cfg = load_config(cli)?;
    let out: &Path = &cli.out;
    std::fs::create_dir_all(out)
        .map_err(|e| HarnessError { stage: Stage::Config, source: format!("{}: {e}", out.display()).into() })?;
    match cli.command {
        Command::Simulate => {
            harness::write_manifest(&cfg, out)?;
            harness::stage_simulate(&cfg, out)?;
        }
        Command::Features => harness::stage_features(&cfg, out)?,
        Command::Pretrain => {
            let r = harness::stage_pretrain(&cfg, out)?;
            println!("pretrain loss {:.6} -> {:.6}", r.initial_loss, r.final_loss());
        }
        Command::TrainCentral => {
            let r = harness::stage_train_central(&cfg, out)?;
            println!("central loss {:.6} -> {:.6}", r.initial_loss, r.final_loss());
        }
        Command::TrainFed => {
            let ledger = harness::stage_train_fed(&cfg, out)?;
            let bytes: usize = ledger.iter().map(|m| m.bytes).sum();
            println!("{} weight messages, {bytes} B", ledger.len());
        }
        Command::Thresholds => {
            let t = harness::stage_thresholds(&cfg, out)?;
            for ((method, r), st) in &t {
                println!("{method} {r}: mean {:.6} std {:.6}", st.mean, st.std);
            }
        }
        Command::Detect => {
            let runs = harness::stage_detect(&cfg, out)?;
            println!("scored {} attack runs", runs.len());
        }
        Command::SweepK => print_fused(&harness::stage_sweep_k(&cfg, out)?),
        Command::Overhead => {
            let (published, simulated) = harness::stage_overhead(&cfg, out)?;
            for (name, r) in [("published", published), ("simulated", simulated)] {
                println!(
                    "{name}: centralized {} B, federated {} B, ratio {:.2}",
                    r.centralized_bytes, r.federated_bytes, r.ratio
                );
            }
        }
        Command::RunAll => print_fused(&harness::run_experiment(&cfg, out)?.attacks),
    }
    Ok(())
}

fn print_fused(reports: &[harness::AttackReport]) {
    for rep in reports {
        for f in &rep.fused {
            let m = &f.metrics;
            println!(
                "{} {:<11} k={} recall {:.3} fpr {:.3} f1 {:.3}",
                rep.spec.slug(),
                f.method,
                f.k,
                m.recall,
                m.false_positive_rate,
                m.f1
            );
        }
    }
}

fn diagnostics(e: &HarnessError) -> String {
    let mut out = format!("zigfed: error: {e}\n");
    let mut src = std::error::Error::source(e).and_then(std::error::Error::source);
    while let Some(s) = src {
        out.push_str(&format!("  caused by: {s}\n"));
        src = s.source();
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprint!("{}", diagnostics(&e));
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use std::fs;

    use super::*;

    const QUICK: &str = r#"
scenario = "III"
attacks = ["E2>A"]
pretrain_duration = 600

[fl]
rounds = 2
round_interval = 600

[fl.local_train]
epochs = 2

[train]
epochs = 2

[plan]
normal_before = 240
attack_window = 90
normal_after = 150
"#;

    fn cli(config: &Path, out: &Path, args: &[&str]) -> Cli {
        let mut argv = vec!["zigfed".to_string(), "--config".into(), config.display().to_string()];
        argv.extend(["--out".to_string(), out.display().to_string()]);
        argv.extend(args.iter().map(|a| a.to_string()));
        Cli::try_parse_from(argv).unwrap()
    }

    fn quick_config(dir: &Path) -> PathBuf {
        let p = dir.join("quick.toml");
        fs::write(&p, QUICK).unwrap();
        p
    }

    #[test]
    fn stage_commands_reproduce_run_all() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(dir.path());
        let all = dir.path().join("all");
        run(&cli(&cfg, &all, &["run-all"])).unwrap();
        let staged = dir.path().join("staged");
        for stage in [
            "simulate",
            "features",
            "pretrain",
            "train-central",
            "train-fed",
            "thresholds",
            "detect",
            "sweep-k",
            "overhead",
        ] {
            run(&cli(&cfg, &staged, &[stage])).unwrap_or_else(|e| panic!("{stage}: {e}"));
        }
        for f in [
            "MANIFEST",
            "summary.csv",
            "thresholds.csv",
            "overhead.csv",
            "models/central.wts",
            "attacks/E2-A/reports.csv",
        ] {
            assert_eq!(fs::read(all.join(f)).unwrap(), fs::read(staged.join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn seed_flag_overrides_the_config() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(dir.path());
        let out = dir.path().join("b");
        run(&cli(&cfg, &out, &["--seed", "7", "simulate"])).unwrap();
        let manifest = fs::read_to_string(out.join("MANIFEST")).unwrap();
        assert!(manifest.contains("seed = 7"), "{manifest}");
    }

    #[test]
    fn bad_config_fails_in_config_stage() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        let out = dir.path().join("out");
        for (text, cmd) in [("windw = 60\n", "run-all"), ("attacks = [\"E1>Z\"]\n", "simulate")] {
            fs::write(&p, text).unwrap();
            let e = run(&cli(&p, &out, &[cmd])).unwrap_err();
            assert_eq!(e.stage, Stage::Config);
            assert!(diagnostics(&e).starts_with("zigfed: error: [config]"), "{}", diagnostics(&e));
        }
        let e = run(&cli(&dir.path().join("missing.toml"), &out, &["simulate"])).unwrap_err();
        assert!(diagnostics(&e).contains("[config]") && diagnostics(&e).contains("missing.toml"));
    }

    #[test]
    fn stage_without_inputs_names_itself() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = quick_config(dir.path());
        let out = dir.path().join("empty");
        for (cmd, stage) in [("features", Stage::Features), ("pretrain", Stage::Pretrain), ("detect", Stage::Detect)] {
            let e = run(&cli(&cfg, &out, &[cmd])).unwrap_err();
            assert_eq!(e.stage, stage, "{cmd}: {e}");
            assert!(diagnostics(&e).contains(&format!("[{stage}]")));
        }
    }

    #[test]
    fn unknown_subcommand_is_rejected() {
        assert!(Cli::try_parse_from(["zigfed", "train-everything"]).is_err());
        assert!(Cli::try_parse_from(["zigfed", "--seed", "x", "run-all"]).is_err());
    }
}
