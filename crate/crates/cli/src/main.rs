//! `rcdl` command-line front end.
//!
//! Every verb reads one scenario file and writes CSV files into `--out`.
//! A short JSON summary goes to stdout; failures print a JSON object to
//! stderr and exit with status 1.

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rcdl_core::harness::{
    run_bartlett_drops, run_eigenmodes, run_sweep, write_curve_csv, write_tensor_csv, Scenario, Setup, ChannelSource,
};
use rcdl_core::analysis::{curve_at, write_profile_csv};
use rcdl_core::rcdl::table_spreads;
use serde_json::{json, Value};
use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "rcdl", version, about = "TDL / CDL / rCDL link-level channel experiments")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the number of drops.
    #[arg(long)]
    drops: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Verb {
    /// Port-level channel of one drop at the CSI and data instants.
    GenChannel {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        drop: usize,
    },
    /// Bartlett profiles and the mean decorrelation curve.
    Bartlett {
        #[command(flatten)]
        common: Common,
    },
    /// Per-layer SINR statistics.
    SvdSinr {
        #[command(flatten)]
        common: Common,
    },
    /// Throughput-versus-SNR sweep over the configured CSI schemes.
    CsiSweep {
        #[command(flatten)]
        common: Common,
    },
    /// Spreads and delay spread of the ingested tables.
    ValidateTables {
        #[command(flatten)]
        common: Common,
    },
}

fn setup(c: &Common) -> Result<Setup> {
    let mut s = Scenario::load(&c.config)?;
    if let Some(seed) = c.seed {
        s.seed = seed;
    }
    if let Some(d) = c.drops {
        s.drops = d;
    }
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    Ok(Setup::new(s)?)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>> {
    let p = dir.join(name);
    Ok(BufWriter::new(File::create(&p).with_context(|| format!("creating {}", p.display()))?))
}

fn run(cli: Cli) -> Result<Value> {
    Ok(match cli.verb {
        Verb::GenChannel { common, drop } => {
            let st = setup(&common)?;
            let s = &st.scenario;
            let t0 = st.drop_start(drop);
            let h = st.channel(drop, &[t0, t0 + s.snapped_delay_s()], &s.carrier.prb_frequencies())?;
            write_tensor_csv(&h, create(&common.out, "channel.csv")?)?;
            json!({"drop": drop, "start_time_s": t0, "n_rx": h.n_rx(), "n_tx": h.n_tx(), "mean_power": h.mean_power()})
        }
        Verb::Bartlett { common } => {
            let st = setup(&common)?;
            let (runs, mean) = run_bartlett_drops(&st)?;
            write_profile_csv(&runs[0].profile, create(&common.out, "profile.csv")?)?;
            write_curve_csv(&mean, create(&common.out, "decorrelation.csv")?)?;
            let std: Vec<f64> = runs.iter().map(|r| r.profile.peak_std_deg()).collect();
            json!({
                "drops": runs.len(),
                "peak_std_deg_max": std.iter().cloned().fold(0.0, f64::max),
                "decorrelation_at_2_5_ms": curve_at(&mean, 2.5e-3),
            })
        }
        Verb::SvdSinr { common } => {
            let st = setup(&common)?;
            let r = run_eigenmodes(&st)?;
            r.write_csv(create(&common.out, "layer_sinr.csv")?)?;
            json!({"medians_db": r.medians(), "spread_db": r.spread_db()})
        }
        Verb::CsiSweep { common } => {
            let st = setup(&common)?;
            let r = run_sweep(&st)?;
            r.write_csv(create(&common.out, "sweep.csv")?)?;
            r.write_drops_csv(create(&common.out, "drops.csv")?)?;
            let at: serde_json::Map<String, Value> = r
                .schemes
                .iter()
                .map(|&sc| (sc.name().to_string(), json!({"snr_at_50": r.snr_at(sc, 0.5), "snr_at_70": r.snr_at(sc, 0.7)})))
                .collect();
            json!({"drops": st.scenario.drops, "schemes": at})
        }
        Verb::ValidateTables { common } => {
            let st = setup(&common)?;
            match &st.source {
                ChannelSource::Tdl { profile, .. } => {
                    json!({"kind": "tdl", "taps": profile.taps.len(), "rms_delay_spread_ns": profile.rms_delay_spread() * 1e9})
                }
                ChannelSource::Cdl { table, .. } => {
                    let sp = table_spreads(table)?;
                    json!({
                        "kind": "cdl",
                        "clusters": table.n_clusters(),
                        "spreads_deg": sp.map(|s| s.0),
                        "rms_delay_spread_ns": table.rms_delay_spread() * 1e9,
                    })
                }
                ChannelSource::Rcdl { build, .. } => json!({"kind": "rcdl", "report": build.report}),
            }
        }
    })
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(v) => println!("{v}"),
        Err(e) => {
            let causes: Vec<String> = e.chain().skip(1).map(|c| c.to_string()).collect();
            eprintln!("{}", json!({"error": e.to_string(), "causes": causes}));
            std::process::exit(1);
        }
    }
}
