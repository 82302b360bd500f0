use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use psych_core::analytics::{self, SigmaTable};
use psych_core::annotation::{read_annotations, Annotation};
use psych_core::behavior;
use psych_core::eval::{compare_runs, REPORT_CSV_HEADER};
use psych_core::jsonl;
use psych_core::loss::{gradcheck_with, GradcheckConfig, LossConfig};
use psych_core::regressor::{self, HarnessConfig, LossMode, Regressor};
use psych_core::synth::{self, SyntheticScene};
use psych_service::pool::is_control_stratum;
use psych_service::{Engine, ImagePool, ServiceConfig};

/// The server's settings, saved so offline review replays under the same rules.
const CONFIG_FILE: &str = "config.json";

#[derive(Parser)]
#[command(name = "psych", version, about = "Psychophysical person-detection toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a raw behavioral file against annotations and score it.
    Ingest {
        #[arg(long)]
        behavior: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Scored records (JSON lines). The summary goes next to it as `<out>.summary.json`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Histograms, accuracy tables, sigma table and response times.
    Analyze {
        /// Scored records written by `ingest`.
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        include_controls: bool,
        #[arg(long, default_value_t = analytics::DEFAULT_SIGMA_MIN)]
        sigma_min: f64,
    },
    /// Dwell heatmap of one worker's trail over one image, as plain PGM.
    Heatmap {
        #[arg(long)]
        records: PathBuf,
        #[arg(long)]
        session: String,
        #[arg(long)]
        image: String,
        #[arg(long, default_value_t = 4)]
        cell: u32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic loss gradients against finite differences.
    Gradcheck {
        /// Loss parameter JSON. Without it weights and loss kinds are drawn at random.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        n: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Train the proxy regressor on synthetic scenes.
    TrainToy {
        #[arg(long, value_enum)]
        mode: ModeArg,
        /// Loss parameter JSON; the paper weights are used when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        /// sigma.csv from `analyze`; simulated from the observer model when omitted.
        #[arg(long)]
        sigma: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long)]
        n_per_stratum: Option<usize>,
        #[arg(long, default_value_t = 7)]
        data_seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a saved regressor on saved test scenes.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "model")]
        mode: String,
    },
    /// Run the survey server.
    Serve {
        /// Annotations of the positives pool.
        #[arg(long)]
        pool: PathBuf,
        /// Annotations of the control pool. Without it, 10 m images at 90 or 100% visibility in `--pool` become controls.
        #[arg(long)]
        controls: Option<PathBuf>,
        #[arg(long, default_value_t = 500)]
        surveys: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 8080)]
        port: u16,
        /// Directory of image files named by image id.
        #[arg(long)]
        images: Option<PathBuf>,
        /// Three comma separated image ids for practice.
        #[arg(long, value_delimiter = ',')]
        practice: Option<Vec<String>>,
        #[arg(long, default_value = "service-data")]
        data_dir: PathBuf,
        #[arg(long)]
        allow_repeat_workers: bool,
    },
    /// Review a finished session offline, against a stopped server's data directory.
    Review {
        #[arg(long)]
        session: String,
        #[arg(long)]
        pool: PathBuf,
        #[arg(long)]
        controls: Option<PathBuf>,
        #[arg(long, default_value = "service-data")]
        data_dir: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Baseline,
    Psych,
    Both,
}

fn main() -> Result<()> {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    match Cli::parse().command {
        Command::Ingest {
            behavior,
            annotations,
            out,
        } => ingest(&behavior, &annotations, &out),
        Command::Analyze {
            records,
            out_dir,
            include_controls,
            sigma_min,
        } => analyze(&records, &out_dir, include_controls, sigma_min),
        Command::Heatmap {
            records,
            session,
            image,
            cell,
            out,
        } => heatmap(&records, &session, &image, cell, &out),
        Command::Gradcheck { params, n, seed } => gradcheck(params.as_deref(), n, seed),
        Command::TrainToy {
            mode,
            params,
            sigma,
            seeds,
            epochs,
            n_per_stratum,
            data_seed,
            out,
        } => {
            let mut cfg = HarnessConfig {
                data_seed,
                seeds: (1..=seeds).collect(),
                ..HarnessConfig::default()
            };
            cfg.train.epochs = epochs;
            if let Some(n) = n_per_stratum {
                cfg.n_per_stratum = n;
            }
            if let Some(p) = &params {
                cfg.loss = LossConfig::load(p)?;
            }
            train_toy(&cfg, mode, sigma.as_deref(), &out)
        }
        Command::Eval {
            model,
            test,
            out,
            seed,
            mode,
        } => eval(&model, &test, &out, seed, &mode),
        Command::Serve {
            pool,
            controls,
            surveys,
            seed,
            port,
            images,
            practice,
            data_dir,
            allow_repeat_workers,
        } => {
            let pool = load_pool(&pool, controls.as_deref())?;
            let mut config = ServiceConfig::with_default_practice(&pool);
            config.allow_repeat_workers = allow_repeat_workers;
            if let Some(p) = practice {
                config.practice_images = p;
            }
            fs::create_dir_all(&data_dir)?;
            fs::write(data_dir.join(CONFIG_FILE), serde_json::to_string_pretty(&config)?)?;
            let engine = Engine::open(pool, config, &data_dir, surveys, seed)?;
            tokio::runtime::Runtime::new()?.block_on(serve(engine, images, port))
        }
        Command::Review {
            session,
            pool,
            controls,
            data_dir,
        } => {
            if !data_dir.join(psych_service::store::SURVEYS_FILE).exists() {
                bail!("{} holds no survey data", data_dir.display());
            }
            let pool = load_pool(&pool, controls.as_deref())?;
            let config: ServiceConfig = match fs::read_to_string(data_dir.join(CONFIG_FILE)) {
                Ok(text) => serde_json::from_str(&text)?,
                Err(_) => ServiceConfig::with_default_practice(&pool),
            };
            let mut engine = Engine::open(pool, config, &data_dir, 0, 0)?;
            let result = match engine.review_of(&session) {
                Some(done) => done.clone(),
                None => engine.review(&session)?,
            };
            println!("{}", serde_json::to_string_pretty(&result)?);
            Ok(())
        }
    }
}

fn ingest(behavior_file: &Path, annotations: &Path, out: &Path) -> Result<()> {
    let output = behavior::ingest(behavior_file, annotations)?;
    for issue in &output.issues {
        tracing::warn!("{issue}");
    }
    if !output.clamped.is_empty() {
        tracing::warn!("{} coordinates clamped into the image", output.clamped.len());
    }
    behavior::write_scored(out, &output.records)?;
    let summary_path = with_suffix(out, ".summary.json");
    let summary = serde_json::json!({
        "summary": output.summary,
        "rejected_lines": output.issues.iter().map(|e| serde_json::json!({ "line": e.line(), "error": e.to_string() })).collect::<Vec<_>>(),
        "clamped": output.clamped.len(),
    });
    fs::write(&summary_path, serde_json::to_string_pretty(&summary)?)?;
    println!(
        "{} records written to {}, {} lines rejected, summary in {}",
        output.records.len(),
        out.display(),
        output.issues.len(),
        summary_path.display()
    );
    Ok(())
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn analyze(records: &Path, out_dir: &Path, include_controls: bool, sigma_min: f64) -> Result<()> {
    let mut records = behavior::read_scored(records)?;
    if !include_controls {
        records.retain(|r| !r.is_control);
    }
    fs::create_dir_all(out_dir)?;
    let write = |name: &str, text: String| -> Result<()> {
        let path = out_dir.join(name);
        fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
    };
    write("histograms.csv", analytics::histograms_csv(&analytics::iou_histograms(&records)))?;
    let acc0 = analytics::accuracy_table(&records, 0.0);
    write("accuracy_t0.csv", analytics::accuracy_csv(&acc0))?;
    write(
        "accuracy_t50.csv",
        analytics::accuracy_csv(&analytics::accuracy_table(&records, 0.5)),
    )?;
    let sigma = analytics::sigma_table(&acc0, sigma_min);
    write("sigma.csv", sigma.to_csv_string()?)?;
    write(
        "rt.csv",
        analytics::response_time_csv(&analytics::response_time_stats(&records)),
    )?;
    println!("{} records analysed into {}", records.len(), out_dir.display());
    Ok(())
}

fn heatmap(records: &Path, session: &str, image: &str, cell: u32, out: &Path) -> Result<()> {
    let records = behavior::read_scored(records)?;
    let Some(record) = records
        .iter()
        .find(|r| r.session_id == session && r.image_id == image)
    else {
        bail!("no record for session {session} and image {image}");
    };
    let map = analytics::search_heatmap(record, cell)?;
    fs::write(out, map.to_pgm())?;
    println!("heatmap with {} ms of dwell written to {}", map.total_mass(), out.display());
    Ok(())
}

fn gradcheck(params: Option<&Path>, n: usize, seed: u64) -> Result<()> {
    let mut cfg = GradcheckConfig::default();
    if let Some(path) = params {
        let loss = LossConfig::load(path)?;
        cfg.sigma_min = loss.sigma_min;
        cfg.fixed = Some((loss.a, loss.b, loss.default_loss));
    }
    let report = gradcheck_with(&cfg, n, seed);
    println!("{}", serde_json::to_string_pretty(&report)?);
    if !report.passed() {
        bail!("{} gradient components exceed tolerance {}", report.failures.len(), report.tolerance);
    }
    Ok(())
}

fn train_toy(cfg: &HarnessConfig, mode: ModeArg, sigma: Option<&Path>, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let dataset = synth::generate_dataset_with(&cfg.synth, cfg.n_per_stratum, cfg.data_seed)?;
    let params = match sigma {
        Some(path) => cfg.loss.clone().into_params(SigmaTable::read_csv(path)?)?,
        None => regressor::harness_params(cfg)?,
    };
    params.sigma_table.write_csv(&out.join("sigma.csv"))?;
    jsonl::write_all(&out.join("test.jsonl"), &dataset.test)?;
    let modes: &[LossMode] = match mode {
        ModeArg::Baseline => &[LossMode::Baseline],
        ModeArg::Psych => &[LossMode::Psych],
        ModeArg::Both => &[LossMode::Baseline, LossMode::Psych],
    };
    let mut report = String::from(REPORT_CSV_HEADER);
    let mut curves = String::from("mode,seed,epoch,loss\n");
    let mut reports: Vec<Vec<_>> = vec![Vec::new(); modes.len()];
    for &seed in &cfg.seeds {
        for (slot, &m) in modes.iter().enumerate() {
            let result = regressor::train(&dataset.train, m, &params, &cfg.train, seed)?;
            let model_path = out.join(format!("model_{}_seed{seed}.json", m.name()));
            result.regressor.save(&model_path)?;
            for (epoch, loss) in result.loss_curve.iter().enumerate() {
                curves.push_str(&format!("{},{seed},{epoch},{loss}\n", m.name()));
            }
            let r = regressor::evaluate(&result.regressor, &dataset.test, &[]);
            report.push_str(&r.csv_rows(seed, m.name()));
            tracing::info!(
                "{} seed {seed}: mAP@0.50 {:.2}, center error {:.2} px",
                m.name(),
                r.overall.map50,
                r.overall.center_err_px
            );
            reports[slot].push(r);
        }
    }
    fs::write(out.join("report.csv"), report)?;
    fs::write(out.join("loss_curves.csv"), curves)?;
    if mode == ModeArg::Both && cfg.seeds.len() >= 2 {
        let cmp = compare_runs(&reports[0], &reports[1])?;
        fs::write(out.join("comparison.csv"), cmp.to_csv())?;
    }
    println!("trained {} run(s) into {}", cfg.seeds.len() * modes.len(), out.display());
    Ok(())
}

fn eval(model: &Path, test: &Path, out: &Path, seed: u64, mode: &str) -> Result<()> {
    let reg = Regressor::load(model).with_context(|| format!("loading {}", model.display()))?;
    let scenes: Vec<SyntheticScene> = jsonl::read_strict(test)?;
    if scenes.is_empty() {
        bail!("{} holds no test scenes", test.display());
    }
    if scenes[0].feature_vec.len() != reg.inputs() {
        bail!(
            "model expects {} features, scenes have {}",
            reg.inputs(),
            scenes[0].feature_vec.len()
        );
    }
    let report = regressor::evaluate(&reg, &scenes, &[]);
    fs::write(out, format!("{REPORT_CSV_HEADER}{}", report.csv_rows(seed, mode)))?;
    println!(
        "mAP@0.50 {:.2}, mAP@[.50:.95] {:.2}, mAP@0.00 {:.2} over {} scenes",
        report.overall.map50,
        report.overall.map5095,
        report.overall.map00,
        scenes.len()
    );
    Ok(())
}

fn load_pool(pool: &Path, controls: Option<&Path>) -> Result<ImagePool> {
    let anns = read_annotations(pool)?;
    let (positives, controls): (Vec<Annotation>, Vec<Annotation>) = match controls {
        Some(path) => (anns, read_annotations(path)?),
        None => anns.into_iter().partition(|a| !is_control_stratum(a)),
    };
    Ok(ImagePool::new(positives, controls)?)
}

async fn serve(engine: Engine, images: Option<PathBuf>, port: u16) -> Result<()> {
    let app = psych_service::http::router(Arc::new(Mutex::new(engine)), images);
    let listener = tokio::net::TcpListener::bind(("0.0.0.0", port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
