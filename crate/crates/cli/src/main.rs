use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use evstereo_core::config::RunConfig;
use evstereo_core::dataset::{load_split, stacks_from_streams, synthesize};
use evstereo_core::eval::{evaluate, predict, Prediction};
use evstereo_core::events::{filter_window, EventStream};
use evstereo_core::gradsuite;
use evstereo_core::imageio::{read_f32, read_png16, write_colormap, write_f32, write_png16};
use evstereo_core::loss::MetricReport;
use evstereo_core::model::StereoNet;
use evstereo_core::train::{save_run, train};
use evstereo_tensor::{ParamStore, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "evstereo",
    version,
    about = "Event-camera stereo depth: synthetic data, training, evaluation, inference"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `key = value` configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Extra `key=value` overrides applied after the config file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate train and test scene splits.
    Synth,
    /// Train on the train split of a dataset.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Print the loss every this many iterations.
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Predict disparity from a pair of event files (EVT1 or CSV).
    Infer {
        #[arg(long)]
        left: PathBuf,
        #[arg(long)]
        right: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Emit one prediction per window end spaced this far apart; 0 uses the
        /// whole stream once.
        #[arg(long, default_value_t = 0)]
        stride_us: u64,
        /// Sensor size for CSV inputs.
        #[arg(long)]
        width: Option<u32>,
        #[arg(long)]
        height: Option<u32>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
    /// Render a disparity file (PNG16 or float32 dump) or an event file as an
    /// 8-bit magma image.
    Viz {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
        /// Upper end of the colour scale; defaults to the map's maximum.
        #[arg(long)]
        max: Option<f64>,
    },
}

#[derive(Parser, Debug)]
struct Wrapper {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    cli: Cli,
}

fn load_config(common: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut cfg =
        match (&common.config, fallback) {
            (Some(p), _) => RunConfig::from_file(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            (None, Some(p)) if p.is_file() => RunConfig::from_file(p)
                .with_context(|| format!("reading config {}", p.display()))?,
            _ => RunConfig::default(),
        };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.apply_overrides(&common.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(StereoNet, ParamStore)> {
    let (net, mut params) = StereoNet::new(cfg.model(), cfg.seed)?;
    params
        .load(checkpoint)
        .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    Ok((net, params))
}

fn write_prediction(dir: &Path, stem: &str, p: &Prediction, max_disparity: usize) -> Result<()> {
    let all = vec![true; p.disparity.len()];
    write_png16(
        dir.join(format!("{stem}.png")),
        &p.disparity,
        &all,
        p.width,
        p.height,
    )?;
    write_f32(
        dir.join(format!("{stem}.f32.evsk")),
        &Tensor::new([1, p.height, p.width], p.disparity.clone())?,
    )?;
    write_colormap(
        dir.join(format!("{stem}_magma.png")),
        &p.disparity,
        None,
        p.width,
        p.height,
        0.0,
        (max_disparity - 1) as f64,
    )?;
    Ok(())
}

fn read_events(path: &Path, width: Option<u32>, height: Option<u32>) -> Result<EventStream> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    if is_csv {
        let (Some(w), Some(h)) = (width, height) else {
            bail!(evstereo_core::Error::Invalid(
                "CSV event files need --width and --height".into()
            ));
        };
        Ok(EventStream::read_csv(fs::File::open(path)?, w, h)?)
    } else {
        EventStream::load(path).with_context(|| format!("reading events {}", path.display()))
    }
}

fn run(common: Common, command: Command) -> Result<()> {
    let out = common.out_dir.clone();
    match command {
        Command::Synth => {
            let cfg = load_config(&common, None)?;
            fs::create_dir_all(&out)?;
            let dirs = synthesize(&out, &cfg)?;
            fs::write(out.join("config.txt"), cfg.to_text())?;
            println!("wrote {} scenes to {}", dirs.len(), out.display());
        }
        Command::Train { data, log_every } => {
            let cfg = load_config(&common, None)?;
            let samples = load_split(&data, "train", cfg.window_events, cfg.scales)?;
            let every = log_every.max(1);
            let trained = train(&cfg, &samples, |r| {
                if (r.iteration + 1) % every == 0 || r.iteration == 0 {
                    println!(
                        "iter {:>6}  loss {:>10.5}  lr {:.3e}",
                        r.iteration + 1,
                        r.loss,
                        r.lr
                    );
                }
            })?;
            save_run(&out, &cfg, &trained)?;
            println!(
                "wrote loss.csv, checkpoint.evsk and config.txt to {}",
                out.display()
            );
        }
        Command::Eval {
            data,
            checkpoint,
            split,
        } => {
            let cfg = load_config(
                &common,
                checkpoint.parent().map(|p| p.join("config.txt")).as_deref(),
            )?;
            let (net, params) = load_model(&cfg, &checkpoint)?;
            let samples = load_split(&data, &split, cfg.window_events, cfg.scales)?;
            let report = evaluate(&net, &params, &samples)?;
            let pred_dir = out.join("pred");
            fs::create_dir_all(&pred_dir)?;
            for (p, s) in report.predictions.iter().zip(&samples) {
                write_prediction(&pred_dir, &s.name, p, cfg.max_disparity)?;
            }
            let json = serde_json::json!({
                "aggregate": report.aggregate,
                "coarse_aggregate": report.initial_aggregate,
                "per_sample": report.per_sample.iter().map(|(n, r)| serde_json::json!({"name": n, "metrics": r})).collect::<Vec<_>>(),
            });
            fs::write(
                out.join("metrics.json"),
                format!("{}\n", serde_json::to_string(&json)?),
            )?;
            let mut rows = report.per_sample.clone();
            rows.push(("aggregate".into(), report.aggregate));
            rows.push(("coarse".into(), report.initial_aggregate));
            let table = MetricReport::table(&rows);
            fs::write(out.join("metrics.txt"), &table)?;
            print!("{table}");
            println!("{}", report.aggregate.to_json());
        }
        Command::Infer {
            left,
            right,
            checkpoint,
            stride_us,
            width,
            height,
        } => {
            let cfg = load_config(
                &common,
                checkpoint.parent().map(|p| p.join("config.txt")).as_deref(),
            )?;
            let (net, params) = load_model(&cfg, &checkpoint)?;
            let l = read_events(&left, width, height)?;
            let r = read_events(&right, width, height)?;
            let end = l
                .events
                .last()
                .map_or(0, |e| e.t)
                .max(r.events.last().map_or(0, |e| e.t))
                + 1;
            let start = l
                .events
                .first()
                .map_or(0, |e| e.t)
                .min(r.events.first().map_or(0, |e| e.t));
            let ends: Vec<u64> = if stride_us == 0 {
                vec![end]
            } else {
                (1..)
                    .map(|k| start + k * stride_us)
                    .take_while(|&t| t < end)
                    .chain([end])
                    .collect()
            };
            fs::create_dir_all(&out)?;
            for (i, &t) in ends.iter().enumerate() {
                let lw = EventStream {
                    events: filter_window(&l.events, 0, t),
                    ..l.clone()
                };
                let rw = EventStream {
                    events: filter_window(&r.events, 0, t),
                    ..r.clone()
                };
                let (ls, rs) = stacks_from_streams(&lw, &rw, cfg.window_events, cfg.scales)?;
                let p = predict(&net, &params, &ls, &rs)?;
                let stem = format!("disp_{i:04}");
                write_prediction(&out, &stem, &p, cfg.max_disparity)?;
                println!(
                    "{stem}: window ending at {t} us, mean disparity {:.3}",
                    p.disparity.iter().sum::<f64>() / p.disparity.len() as f64
                );
            }
        }
        Command::Gradcheck { module } => {
            let seed = common.seed.unwrap_or(0);
            let rows = gradsuite::run(&module, seed)?;
            print!("{}", gradsuite::format_rows(&rows));
            let failed = rows.iter().filter(|r| !r.passed()).count();
            if failed > 0 {
                bail!(evstereo_core::Error::Invalid(format!(
                    "{failed} gradient check(s) above tolerance {:e}",
                    gradsuite::TOLERANCE
                )));
            }
            println!("all {} checks below {:e}", rows.len(), gradsuite::TOLERANCE);
        }
        Command::Viz { input, output, max } => {
            let ext = input
                .extension()
                .and_then(|e| e.to_str())
                .unwrap_or("")
                .to_ascii_lowercase();
            let (values, valid, w, h, lo): (Vec<f64>, Option<Vec<bool>>, usize, usize, f64) =
                match ext.as_str() {
                    "png" => {
                        let (d, v, w, h) = read_png16(&input)?;
                        (d, Some(v), w, h, 0.0)
                    }
                    "evsk" => {
                        let t = read_f32(&input)?;
                        let s = t.shape();
                        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
                        (t.data()[..h * w].to_vec(), None, w, h, 0.0)
                    }
                    "evt" | "csv" => {
                        let cfg = load_config(&common, None)?;
                        let ev =
                            read_events(&input, Some(cfg.width as u32), Some(cfg.height as u32))?;
                        let (w, h) = (ev.width as usize, ev.height as usize);
                        let g = evstereo_core::events::stack_by_number(
                            &ev.events,
                            cfg.window_events,
                            w,
                            h,
                        );
                        (g.into_data(), None, w, h, -1.0)
                    }
                    other => bail!(evstereo_core::Error::Invalid(format!(
                        "cannot visualise `.{other}` files"
                    ))),
                };
            let hi = max.unwrap_or_else(|| {
                values
                    .iter()
                    .copied()
                    .fold(f64::MIN, f64::max)
                    .max(lo + 1e-9)
            });
            let output = output.unwrap_or_else(|| {
                out.join(format!(
                    "{}_magma.png",
                    input.file_stem().and_then(|s| s.to_str()).unwrap_or("viz")
                ))
            });
            if let Some(parent) = output.parent() {
                fs::create_dir_all(parent)?;
            }
            write_colormap(&output, &values, valid.as_deref(), w, h, lo, hi)?;
            println!("wrote {}", output.display());
        }
    }
    Ok(())
}

/// 1 for bad input or failed checks, 2 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<evstereo_core::Error>() {
            use evstereo_core::Error as E;
            return match e {
                E::Config(_) | E::Invalid(_) | E::EventFormat(_) => 1,
                _ => 2,
            };
        }
    }
    2
}

fn main() -> ExitCode {
    let parsed = match Wrapper::try_parse() {
        Ok(p) => p,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(parsed.common, parsed.cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
