//! Command-line interface: dataset generation, transfer-ratio estimation,
//! training, evaluation, and the multi-seed ablation suite.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use transpar::data::{generate, read_csv, standardize, write_csv, ShiftScenario, Standardizer};
use transpar::discrepancy::TransferRatioEstimate;
use transpar::error::{Error, Result};
use transpar::harness::{
    emit_reports, evaluate, run_one, run_stage1, run_suite, Method, TrainConfig, METRICS_HEADER,
};
use transpar::model::Network;

#[derive(Parser)]
#[command(name = "transpar", about = "Transferable-parameter learning on synthetic domain shifts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    #[value(name = "two-moons-rot")]
    TwoMoonsRot,
    #[value(name = "gauss-trans")]
    GaussTrans,
    #[value(name = "label-shift")]
    LabelShift,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    #[value(name = "source-only")]
    SourceOnly,
    #[value(name = "dann")]
    Dann,
    #[value(name = "transpar-dann")]
    TransparDann,
}

impl From<MethodArg> for Method {
    fn from(m: MethodArg) -> Method {
        match m {
            MethodArg::SourceOnly => Method::SourceOnly,
            MethodArg::Dann => Method::Dann,
            MethodArg::TransparDann => Method::TransparDann,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shift dataset as CSV plus a metadata sidecar.
    GenData {
        #[arg(long, value_enum)]
        scenario: ScenarioArg,
        /// Rotation angle in degrees (two-moons-rot only).
        #[arg(long, default_value_t = 30.0)]
        theta: f64,
        /// Samples per domain.
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 0.1)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Target-mean translation "dx,dy" (gauss-trans only).
        #[arg(long, default_value = "2.0,0.0")]
        translation: String,
        /// Target class proportions "p0,p1,..." (label-shift only).
        #[arg(long, default_value = "0.8,0.2")]
        proportions: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: estimate the transfer ratio and write ratio.json.
    EstimateRatio {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one run and write metrics, checkpoint, and predictions.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Reuse a stage-1 ratio.json instead of recomputing it.
        #[arg(long)]
        ratio: Option<PathBuf>,
        #[arg(long, value_enum)]
        method: MethodArg,
        #[arg(long)]
        out: PathBuf,
        /// Also dump per-iteration partition masks.
        #[arg(long)]
        dump_masks: bool,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the full ablation grid over consecutive seeds and emit reports.
    Suite {
        #[arg(long)]
        config: PathBuf,
        /// Number of seeds, starting from the config's seed.
        #[arg(long)]
        seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_pair(s: &str) -> Result<[f64; 2]> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::config(format!("bad float {p}: {e}"))))
        .collect::<Result<_>>()?;
    if parts.len() != 2 {
        return Err(Error::config(format!("expected two comma-separated floats, got {s}")));
    }
    Ok([parts[0], parts[1]])
}

fn parse_proportions(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| Error::config(format!("bad float {p}: {e}"))))
        .collect()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { scenario, theta, n, noise, seed, translation, proportions, out } => {
            let scenario = match scenario {
                ScenarioArg::TwoMoonsRot => ShiftScenario::TwoMoonsRotation {
                    theta_deg: theta,
                    noise,
                    n_source: n,
                    n_target: n,
                },
                ScenarioArg::GaussTrans => ShiftScenario::GaussianTranslation {
                    translation: parse_pair(&translation)?,
                    noise,
                    n_source: n,
                    n_target: n,
                },
                ScenarioArg::LabelShift => ShiftScenario::TargetLabelShift {
                    target_proportions: parse_proportions(&proportions)?,
                    noise,
                    n_source: n,
                    n_target: n,
                },
            };
            let data = generate(&scenario, seed)?;
            write_csv(&data, &scenario, seed, &out)?;
            println!(
                "wrote {} source and {} target samples to {}",
                data.source_train.len() + data.source_test.len(),
                data.target_train.len() + data.target_test.len(),
                out.display()
            );
        }
        Command::EstimateRatio { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let estimate = run_stage1(&cfg)?;
            estimate.save(&out)?;
            println!(
                "err={} d_A={} tau={} -> {}",
                estimate.err,
                estimate.d_a,
                estimate.tau,
                out.display()
            );
        }
        Command::Train { config, ratio, method, out, dump_masks } => {
            let mut cfg = TrainConfig::load(&config)?;
            cfg.method = method.into();
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::config(format!("cannot create {}: {e}", out.display())))?;
            let ratio = match (&cfg.method, ratio) {
                (Method::TransparDann, Some(path)) => Some(TransferRatioEstimate::load(&path)?),
                (Method::TransparDann, None) => {
                    let est = run_stage1(&cfg)?;
                    est.save(&out.join("ratio.json"))?;
                    Some(est)
                }
                _ => None,
            };
            let run_id = format!("{}__s{}", cfg.method.id(), cfg.seed);
            let (result, adapted_d_a) = run_one(&cfg, ratio.as_ref(), &run_id, dump_masks)?;

            let mut csv = String::from(METRICS_HEADER);
            csv.push('\n');
            for row in &result.rows {
                csv.push_str(&row.to_csv_line());
                csv.push('\n');
            }
            std::fs::write(out.join("metrics.csv"), csv)?;
            result.net.save_checkpoint(&out.join("checkpoint.json"))?;
            write_predictions(&cfg, &result.net, &out)?;
            if dump_masks {
                write_masks(&result.mask_log, &out.join("masks.csv"))?;
            }
            println!(
                "{run_id}: source acc {:.4}, target acc {:.4}, adapted d_A {:.4}",
                result.final_source_acc, result.final_target_acc, adapted_d_a
            );
        }
        Command::Eval { checkpoint, data } => {
            let net = Network::load_checkpoint(&checkpoint)?;
            let mut datasets = read_csv(&data)?;
            let st = Standardizer::fit(&datasets.source_train)?;
            st.apply(&mut datasets.source_train);
            st.apply(&mut datasets.source_test);
            st.apply(&mut datasets.target_train);
            st.apply(&mut datasets.target_test);
            let acc_src = evaluate(&net, &datasets.source_test)?;
            let acc_tgt = evaluate(&net, &datasets.target_test)?;
            println!("{{\"source_test_acc\":{acc_src},\"target_test_acc\":{acc_tgt}}}");
        }
        Command::Suite { config, seeds, out } => {
            if seeds < 2 {
                return Err(Error::config("suite needs at least 2 seeds"));
            }
            let cfg = TrainConfig::load(&config)?;
            let seed_list: Vec<u64> = (0..seeds).map(|i| cfg.seed + i).collect();
            let (report, rows) = run_suite(&cfg, &seed_list)?;
            emit_reports(&report, &rows, &out)?;
            let failures: usize = report
                .cells
                .iter()
                .map(|c| c.runs.iter().filter(|r| !r.ok).count())
                .sum();
            println!(
                "suite: {} cells x {} seeds -> {}, {} failed runs",
                report.cells.len(),
                seed_list.len(),
                out.display(),
                failures
            );
        }
    }
    Ok(())
}

fn write_predictions(cfg: &TrainConfig, net: &Network, out: &std::path::Path) -> Result<()> {
    let mut data = generate(&cfg.scenario, cfg.seed)?;
    standardize(&mut data)?;
    for (ds, name) in [
        (&data.source_test, "predictions_source_test.csv"),
        (&data.target_test, "predictions_target_test.csv"),
    ] {
        let preds = net.predict(&ds.feature_matrix(), ds.len());
        let labels = ds.labels();
        let mut csv = String::from("idx,y_true,y_pred\n");
        for (i, (y, p)) in labels.iter().zip(&preds).enumerate() {
            csv.push_str(&format!("{i},{y},{p}\n"));
        }
        std::fs::write(out.join(name), csv)?;
    }
    Ok(())
}

fn write_masks(log: &[transpar::optim::StepRecord], path: &std::path::Path) -> Result<()> {
    // One line per (iteration, role): counts plus the mask packed as hex.
    let mut out = String::from("iteration,role,m,m_t,mask_hex\n");
    for rec in log {
        if let Some(masks) = &rec.masks {
            for (stats, mask) in rec.stats.iter().zip(masks) {
                let mut hex = String::with_capacity(mask.len() / 4 + 1);
                for chunk in mask.chunks(4) {
                    let mut nibble = 0u8;
                    for (i, &b) in chunk.iter().enumerate() {
                        if b {
                            nibble |= 1 << i;
                        }
                    }
                    hex.push(char::from_digit(nibble as u32, 16).unwrap());
                }
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    rec.iteration,
                    stats.role.short_name(),
                    stats.m,
                    stats.m_t,
                    hex
                ));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
