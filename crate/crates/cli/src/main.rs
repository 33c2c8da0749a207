use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use cdlf::oracle::{build_oracle, simulate, sweep_kappa, write_rollout_csv, write_sweep_csv, Pulse};
use cdlf::pipeline::protocol::{write_quantile_csv, write_window_csv};
use cdlf::pipeline::{
    ablate_fusion, generate_synthetic, load_panel, prepare, run_climatology, run_protocol, save_panel, stability_check,
    train_model, working_panel, ModelArtifact, PanelDataset, RunConfig,
};
use cdlf::CdlfError;

#[derive(Parser)]
#[command(name = "cdlf", version, about = "Cold-start life-cycle forecasting with conditional diffusion")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic panel CSV.
    GenSynthetic,
    /// Train on the training split of a panel and save the model.
    Train {
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Write quantile bands for the test series of a panel.
    Forecast {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Score a trained model and the climatology baseline on the test series.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Train and evaluate both fusion variants under the same seed.
    AblateFusion {
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Bounds and measured constants of a trained transition.
    StabilityCheck {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        panel: Option<PathBuf>,
    },
    /// Monte Carlo run of the linear-Gaussian oracle.
    OracleSim,
    /// Oracle plateaus over the configured kappa grid.
    KappaSweep,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<CdlfError>() {
        Some(CdlfError::Diverged(_) | CdlfError::NonFinite(_) | CdlfError::MarginViolated { .. }) => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let out = cli.out.as_path();
    match cli.cmd {
        Command::GenSynthetic => {
            let ds = generate_synthetic(&cfg.synthetic, cfg.seed);
            let p = out.join("panel.csv");
            save_panel(&ds, &p)?;
            info!("wrote {} series to {}", ds.len(), p.display());
        }
        Command::Train { panel } => {
            let ds = panel_for(&cfg, panel)?;
            let p = prepare(&ds, cfg.protocol.test_fraction, cfg.seed)?;
            let (model, log) = train_model::<f64>(&cfg.model, &cfg.train, &p.train, cfg.seed)?;
            info!("trained {} steps ({:?})", log.steps, log.stop);
            let art = ModelArtifact::new(
                model,
                ds.descriptor_columns.clone(),
                p.map.clone(),
                cfg.data.transform,
                p.train.iter().map(|s| s.id.clone()).collect(),
                cfg.seed,
            );
            art.save(out.join("model.json"))?;
            write_json(&out.join("train_log.json"), &log)?;
        }
        Command::Forecast { model, panel } => {
            let art = ModelArtifact::load(&model)?;
            let p = art.split_panel(&panel_for(&cfg, panel)?)?;
            let res = run_protocol(&art.model, &p.train, &p.test, &cfg.protocol, cfg.seed)?;
            write_quantile_csv(&res.quantiles, BufWriter::new(File::create(out.join("quantiles.csv"))?))?;
            write_json(&out.join("launch_summaries.json"), &res.summaries)?;
            info!("forecast {} windows", res.windows.len());
        }
        Command::Evaluate { model, panel } => {
            let art = ModelArtifact::load(&model)?;
            let p = art.split_panel(&panel_for(&cfg, panel)?)?;
            let res = run_protocol(&art.model, &p.train, &p.test, &cfg.protocol, cfg.seed)?;
            let base = run_climatology(&p.train, &p.test, &cfg.protocol)?;
            write_json(&out.join("metrics.json"), &res.report)?;
            write_json(&out.join("baseline_metrics.json"), &base.report)?;
            write_window_csv(&res.windows, BufWriter::new(File::create(out.join("windows.csv"))?))?;
            println!("model       MAE {:.4}  RMSE {:.4}  MCRPS {:.4}", res.report.mae, res.report.rmse, res.report.mcrps);
            println!("climatology MAE {:.4}  RMSE {:.4}  MCRPS {:.4}", base.report.mae, base.report.rmse, base.report.mcrps);
        }
        Command::AblateFusion { panel } => {
            let ds = panel_for(&cfg, panel)?;
            let p = prepare(&ds, cfg.protocol.test_fraction, cfg.seed)?;
            let rep = ablate_fusion(&p, &cfg)?;
            write_json(&out.join("ablation.json"), &rep)?;
            let table = rep.table();
            fs::write(out.join("ablation.csv"), &table)?;
            print!("{table}");
            if !rep.init_hashes_match {
                return Err(CdlfError::Validation("variant initializations differ outside the fusion".into()).into());
            }
        }
        Command::StabilityCheck { model, panel } => {
            let art = ModelArtifact::load(&model)?;
            let p = art.split_panel(&panel_for(&cfg, panel)?)?;
            let rep = stability_check(&art.model, &p.train, &cfg.stability, cfg.seed)?;
            write_json(&out.join("stability.json"), &rep)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
        }
        Command::OracleSim => {
            let o = &cfg.oracle;
            let sys = build_oracle(o.params)?;
            let pulse = (o.pulse_t > 0).then_some(Pulse {
                t: o.pulse_t,
                magnitude: o.pulse_magnitude,
            });
            let st = simulate(&sys, o.horizon, o.rollouts, o.e0, pulse, o.coupling, cfg.seed)?;
            let bound = sys.error_bound(o.e0);
            write_rollout_csv(&st, bound, BufWriter::new(File::create(out.join("oracle_rollouts.csv"))?))?;
            let max = st.delta_hat.iter().copied().fold(0.0, f64::max);
            println!("kappa {:.4}  max delta {:.5}  plateau {:.5}  bound {:?}", sys.kappa(), max, st.plateau(), bound);
        }
        Command::KappaSweep => {
            let o = &cfg.oracle;
            let rows = sweep_kappa(&o.kappas, o.params, o.horizon, o.rollouts, o.coupling, cfg.seed)?;
            write_sweep_csv(&rows, BufWriter::new(File::create(out.join("kappa_sweep.csv"))?))?;
            for r in &rows {
                println!("kappa {:.2}  plateau {:.5}  bound {:?}", r.kappa, r.plateau, r.bound);
            }
        }
    }
    Ok(())
}

/// Loads the panel from the flag or the config, or generates the
/// configured synthetic panel, then applies the configured preprocessing.
fn panel_for(cfg: &RunConfig, flag: Option<PathBuf>) -> Result<PanelDataset> {
    let raw = match flag.or_else(|| cfg.data.panel.clone()) {
        Some(p) => load_panel(&p).with_context(|| format!("loading {}", p.display()))?,
        None => generate_synthetic(&cfg.synthetic, cfg.seed),
    };
    Ok(working_panel(&raw, &cfg.data)?)
}

fn write_json<T: serde::Serialize + ?Sized>(path: &Path, v: &T) -> Result<()> {
    serde_json::to_writer_pretty(BufWriter::new(File::create(path)?), v)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&CdlfError::Diverged("x".into()).into()), 2);
        assert_eq!(exit_code(&CdlfError::MarginViolated { rho: 1.0 }.into()), 2);
        assert_eq!(exit_code(&CdlfError::Validation("x".into()).into()), 1);
        let wrapped = anyhow::Error::from(CdlfError::NonFinite("loss")).context("training");
        assert_eq!(exit_code(&wrapped), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), 1);
    }
}
