use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use wholebody::augment::{convolve, generate_kernel, read_pnm, write_pnm};
use wholebody::fit::{fit_whole_body, FitConfig, FitEvidence, GradientMode, TermWeights};
use wholebody::integrate::{copy_paste, hand_is_confident, CopyPasteOptions};
use wholebody::io::{
    load_model, to_json_string, DatasetFile, EstimateFile, EstimateFrame, MeshFile, PoseFile, ResultFile,
    ResultFrame, TrainingRecord, TruthFile, WristNetFile, FORMAT_VERSION,
};
use wholebody::metrics::{mesh_error_rows, mpjpe, pa_mpjpe, TABLE_ROWS};
use wholebody::scenario::{synthesize_frames, ScenarioConfig};
use wholebody::toy::{make_toy_model, ToyConfig};
use wholebody::wristnet::{apply_wristnet, synthesize_dataset, train, Activation, SynthConfig, TrainConfig, WristNet};
use wholebody::{pose_model, Error, ModelTemplate, Result};

#[derive(Parser, Debug)]
#[command(name = "wholebody", version, about = "Pose, integrate, fit and evaluate a skinned whole-body model")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Model file; the default toy model generated from --seed when absent.
    #[arg(long, global = true)]
    model: Option<PathBuf>,
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Output path; standard output when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Strategy {
    CopyPaste,
    WristNet,
    Optimize,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Gradient {
    Analytic,
    CentralDifference,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a toy model file.
    MakeToy {
        #[arg(long, default_value_t = ToyConfig::default().fingers_per_hand)]
        fingers_per_hand: usize,
        #[arg(long, default_value_t = ToyConfig::default().joints_per_finger)]
        joints_per_finger: usize,
        #[arg(long, default_value_t = ToyConfig::default().ring_vertices)]
        ring_vertices: usize,
        #[arg(long, default_value_t = ToyConfig::default().num_shape)]
        num_shape: usize,
        #[arg(long, default_value_t = ToyConfig::default().num_expression)]
        num_expression: usize,
    },
    /// Pose the model and dump the mesh, joints and transforms.
    Pose {
        #[arg(long)]
        pose: PathBuf,
    },
    /// Merge part estimates into whole-body poses.
    Integrate {
        #[arg(long, value_enum)]
        strategy: Strategy,
        #[arg(long)]
        estimates: PathBuf,
        /// Trained net, required by the wrist-net strategy.
        #[arg(long)]
        wristnet: Option<PathBuf>,
        #[arg(long, default_value_t = CopyPasteOptions::default().hand_confidence_threshold)]
        hand_threshold: f64,
    },
    /// Optimization-based integration with explicit settings.
    Fit {
        #[arg(long)]
        estimates: PathBuf,
        #[arg(long, default_value_t = TermWeights::default().w2d)]
        w2d: f64,
        #[arg(long, default_value_t = TermWeights::default().wmesh)]
        wmesh: f64,
        #[arg(long, default_value_t = TermWeights::default().wpri)]
        wpri: f64,
        #[arg(long, default_value_t = TermWeights::default().w3d)]
        w3d: f64,
        #[arg(long, default_value_t = FitConfig::default().stage1_iters)]
        stage1_iters: usize,
        #[arg(long, default_value_t = FitConfig::default().stage2_iters)]
        stage2_iters: usize,
        #[arg(long, value_enum, default_value_t = Gradient::Analytic)]
        gradient: Gradient,
        #[arg(long, default_value_t = CopyPasteOptions::default().hand_confidence_threshold)]
        hand_threshold: f64,
    },
    /// Generate wrist-net training samples, and optionally evaluation frames.
    SynthData {
        #[arg(long, default_value_t = 5000)]
        count: usize,
        #[arg(long, default_value_t = 100)]
        frames: usize,
        /// Part estimates of the evaluation frames.
        #[arg(long, requires = "gt_out")]
        estimates_out: Option<PathBuf>,
        /// Ground truth of the evaluation frames.
        #[arg(long, requires = "estimates_out")]
        gt_out: Option<PathBuf>,
    },
    /// Train the wrist network on a synthesized dataset.
    TrainWristnet {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = TrainConfig::default().epochs)]
        epochs: usize,
        #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
        lr: f64,
        #[arg(long, default_value_t = TrainConfig::default().batch_size)]
        batch_size: usize,
    },
    /// Per-part mesh errors of integrated results against ground truth.
    Eval {
        #[arg(long)]
        results: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Motion-blur a PGM/PPM image.
    Blur {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value_t = 15)]
        size: usize,
        #[arg(long, default_value_t = 0.5)]
        intensity: f64,
        /// Also write the kernel as a plain-text grid.
        #[arg(long)]
        kernel_out: Option<PathBuf>,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

fn emit(out: &Option<PathBuf>, text: &str) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| io_err(p, e)),
        None => std::io::stdout()
            .write_all(text.as_bytes())
            .map_err(|e| io_err(Path::new("<stdout>"), e)),
    }
}

fn emit_json<T: Serialize>(g: &Global, value: &T) -> Result<()> {
    emit(&g.out, &to_json_string(value)?)
}

fn csv_text(header: &[&str], rows: Vec<Vec<String>>) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let fail = |e: csv::Error| Error::InvalidInput(format!("csv: {e}"));
    w.write_record(header).map_err(fail)?;
    for r in rows {
        w.write_record(&r).map_err(fail)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn json_only(g: &Global, command: &str) -> Result<()> {
    if g.format == Format::Csv {
        return Err(Error::InvalidInput(format!("{command} has no csv output")));
    }
    Ok(())
}

fn require_out<'a>(g: &'a Global, command: &str) -> Result<&'a PathBuf> {
    g.out
        .as_ref()
        .ok_or_else(|| Error::InvalidInput(format!("{command} needs --out")))
}

fn model(g: &Global) -> Result<ModelTemplate> {
    match &g.model {
        Some(p) => load_model(p),
        None => make_toy_model(&ToyConfig::default(), g.seed),
    }
}

fn integrate_frame(
    template: &ModelTemplate,
    frame: &EstimateFrame,
    strategy: Strategy,
    net: Option<&WristNet>,
    opts: &CopyPasteOptions,
    fit: &FitConfig,
) -> Result<ResultFrame> {
    let init = copy_paste(
        template,
        &frame.body,
        frame.left_hand.as_ref(),
        frame.right_hand.as_ref(),
        frame.face.as_ref(),
        opts,
    )?;
    // hands copy-paste ignored stay out of the later strategies too
    let left = frame.left_hand.as_ref().filter(|h| hand_is_confident(h, opts));
    let right = frame.right_hand.as_ref().filter(|h| hand_is_confident(h, opts));
    let (result, report) = match strategy {
        Strategy::CopyPaste => (init, None),
        Strategy::WristNet => {
            let net = net.ok_or_else(|| Error::InvalidInput("wrist-net strategy needs --wristnet".into()))?;
            (apply_wristnet(net, &init, left, right, template)?, None)
        }
        Strategy::Optimize => {
            let evidence = FitEvidence {
                keypoints2d: frame.body.keypoints2d.as_deref(),
                left_hand: left,
                right_hand: right,
            };
            let (r, rep) = fit_whole_body(&init, &evidence, template, fit)?;
            (r, Some(rep))
        }
    };
    Ok(ResultFrame {
        id: frame.id.clone(),
        result,
        report,
    })
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::CopyPaste => "copy-paste",
        Strategy::WristNet => "wrist-net",
        Strategy::Optimize => "optimize",
    }
}

fn run_integrate(
    g: &Global,
    strategy: Strategy,
    estimates: &Path,
    net: Option<&WristNet>,
    opts: CopyPasteOptions,
    fit: FitConfig,
) -> Result<()> {
    let template = model(g)?;
    let file = EstimateFile::load(estimates, &template)?;
    let start = Instant::now();
    let frames = file
        .frames
        .iter()
        .map(|f| {
            integrate_frame(&template, f, strategy, net, &opts, &fit)
                .inspect_err(|_| eprintln!("frame {} failed", f.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let elapsed = start.elapsed().as_secs_f64();
    eprintln!(
        "{}: {} frames, {:.6} s/frame",
        strategy_name(strategy),
        frames.len(),
        elapsed / frames.len().max(1) as f64
    );
    let out = ResultFile {
        version: FORMAT_VERSION,
        strategy: strategy_name(strategy).into(),
        frames,
    };
    match g.format {
        Format::Json => emit_json(g, &out),
        Format::Csv => {
            let names = template.tree().names();
            let mut rows = Vec::new();
            for f in &out.frames {
                for (j, name) in names.iter().enumerate() {
                    let r = f.result.pose.local(j);
                    rows.push(vec![
                        f.id.clone(),
                        name.clone(),
                        r.x.to_string(),
                        r.y.to_string(),
                        r.z.to_string(),
                        serde_json::to_value(f.result.provenance[j])
                            .ok()
                            .and_then(|v| v.as_str().map(str::to_owned))
                            .unwrap_or_default(),
                    ]);
                }
            }
            emit(&g.out, &csv_text(&["frame", "joint", "x", "y", "z", "provenance"], rows)?)
        }
    }
}

#[derive(Serialize)]
struct EvalTable {
    version: u32,
    frames: usize,
    units: &'static str,
    rows: Vec<EvalRow>,
    mpjpe: f64,
    pa_mpjpe: f64,
}

#[derive(Serialize)]
struct EvalRow {
    part: String,
    v2v: f64,
    pa_v2v: f64,
}

fn run_eval(g: &Global, results: &Path, gt: &Path) -> Result<()> {
    let template = model(g)?;
    let res = ResultFile::load(results, &template)?;
    let truth = TruthFile::load(gt, &template)?;
    if res.frames.len() != truth.frames.len() {
        return Err(Error::InvalidInput(format!(
            "{} result frames vs {} ground-truth frames",
            res.frames.len(),
            truth.frames.len()
        )));
    }
    if res.frames.is_empty() {
        return Err(Error::InvalidInput("no frames to evaluate".into()));
    }
    let mut sums = vec![(0.0, 0.0); TABLE_ROWS.len()];
    let (mut mp, mut pa) = (0.0, 0.0);
    for (r, t) in res.frames.iter().zip(&truth.frames) {
        if r.id != t.id {
            return Err(Error::InvalidInput(format!("frame id {} has no ground truth (found {})", r.id, t.id)));
        }
        let pred = pose_model(&template, &r.result.pose)?;
        let gt = pose_model(&template, &t.pose)?;
        for (s, row) in sums.iter_mut().zip(mesh_error_rows(&template, &pred.vertices, &gt.vertices)?) {
            s.0 += row.v2v;
            s.1 += row.pa_v2v;
        }
        mp += mpjpe(&pred.joints3d, &gt.joints3d)?;
        pa += pa_mpjpe(&pred.joints3d, &gt.joints3d)?;
    }
    // model units are metres
    let n = res.frames.len() as f64;
    let mm = |v: f64| 1000.0 * v / n;
    let table = EvalTable {
        version: FORMAT_VERSION,
        frames: res.frames.len(),
        units: "mm",
        rows: TABLE_ROWS
            .iter()
            .zip(&sums)
            .map(|(name, s)| EvalRow {
                part: name.to_string(),
                v2v: mm(s.0),
                pa_v2v: mm(s.1),
            })
            .collect(),
        mpjpe: mm(mp),
        pa_mpjpe: mm(pa),
    };
    match g.format {
        Format::Json => emit_json(g, &table),
        Format::Csv => {
            let rows = table
                .rows
                .iter()
                .map(|r| vec![r.part.clone(), format!("{:.3}", r.v2v), format!("{:.3}", r.pa_v2v)])
                .collect();
            emit(&g.out, &csv_text(&["part", "v2v_mm", "pa_v2v_mm"], rows)?)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match cli.command {
        Command::MakeToy {
            fingers_per_hand,
            joints_per_finger,
            ring_vertices,
            num_shape,
            num_expression,
        } => {
            json_only(g, "make-toy")?;
            let cfg = ToyConfig {
                fingers_per_hand,
                joints_per_finger,
                ring_vertices,
                num_shape,
                num_expression,
            };
            let t = make_toy_model(&cfg, g.seed)?;
            emit_json(g, &wholebody::io::ModelFile::from_template(&t))
        }
        Command::Pose { pose } => {
            let template = model(g)?;
            let pose = PoseFile::load(&pose, &template)?;
            let mesh = pose_model(&template, &pose)?;
            match g.format {
                Format::Json => emit_json(g, &MeshFile::new(&mesh)),
                Format::Csv => {
                    let rows = mesh
                        .vertices
                        .iter()
                        .enumerate()
                        .map(|(i, v)| ("vertex", i, v))
                        .chain(mesh.joints3d.iter().enumerate().map(|(i, v)| ("joint", i, v)))
                        .map(|(k, i, v)| vec![k.into(), i.to_string(), v.x.to_string(), v.y.to_string(), v.z.to_string()])
                        .collect();
                    emit(&g.out, &csv_text(&["kind", "index", "x", "y", "z"], rows)?)
                }
            }
        }
        Command::Integrate {
            strategy,
            estimates,
            wristnet,
            hand_threshold,
        } => {
            let net = wristnet.as_deref().map(WristNetFile::load).transpose()?;
            let opts = CopyPasteOptions {
                hand_confidence_threshold: hand_threshold,
            };
            run_integrate(g, strategy, &estimates, net.as_ref(), opts, FitConfig::default())
        }
        Command::Fit {
            estimates,
            w2d,
            wmesh,
            wpri,
            w3d,
            stage1_iters,
            stage2_iters,
            gradient,
            hand_threshold,
        } => {
            let fit = FitConfig {
                stage1_iters,
                stage2_iters,
                term_weights: TermWeights { w2d, wmesh, wpri, w3d },
                gradient: match gradient {
                    Gradient::Analytic => GradientMode::Analytic,
                    Gradient::CentralDifference => GradientMode::CentralDifference,
                },
                ..FitConfig::default()
            };
            fit.validate()?;
            let opts = CopyPasteOptions {
                hand_confidence_threshold: hand_threshold,
            };
            run_integrate(g, Strategy::Optimize, &estimates, None, opts, fit)
        }
        Command::SynthData {
            count,
            frames,
            estimates_out,
            gt_out,
        } => {
            json_only(g, "synth-data")?;
            let out = require_out(g, "synth-data")?;
            let template = model(g)?;
            let (samples, report) = synthesize_dataset(&template, count, g.seed, &SynthConfig::default())?;
            eprintln!(
                "synth-data: {} samples, {} attempts, {} solver failures",
                samples.len(),
                report.attempts,
                report.solver_failed
            );
            let data = DatasetFile {
                version: FORMAT_VERSION,
                seed: g.seed,
                report,
                samples,
            };
            wholebody::io::write_json(out, &data)?;
            if let (Some(e), Some(t)) = (estimates_out, gt_out) {
                let (est, truth) = synthesize_frames(&template, frames, g.seed, &ScenarioConfig::default())?;
                wholebody::io::write_json(&e, &EstimateFile::new(est))?;
                wholebody::io::write_json(&t, &TruthFile::new(truth))?;
            }
            Ok(())
        }
        Command::TrainWristnet {
            data,
            epochs,
            lr,
            batch_size,
        } => {
            json_only(g, "train-wristnet")?;
            let data = DatasetFile::load(&data)?;
            let cfg = TrainConfig {
                epochs,
                learning_rate: lr,
                batch_size,
                seed: g.seed,
            };
            let (net, curve) = train(&WristNet::new(g.seed, Activation::Relu), &data.samples, &cfg)?;
            eprintln!(
                "train-wristnet: loss {:.6} -> {:.6} over {epochs} epochs",
                curve[0],
                curve.last().unwrap()
            );
            let record = TrainingRecord {
                epochs,
                learning_rate: lr,
                batch_size,
                seed: g.seed,
                samples: data.samples.len(),
                loss_curve: curve,
            };
            emit_json(g, &WristNetFile::new(&net, Some(record)))
        }
        Command::Eval { results, gt } => run_eval(g, &results, &gt),
        Command::Blur {
            input,
            size,
            intensity,
            kernel_out,
        } => {
            let out = require_out(g, "blur")?;
            let kernel = generate_kernel(size, intensity, g.seed)?;
            let img = read_pnm(&input)?;
            write_pnm(out, &convolve(&img, &kernel))?;
            if let Some(k) = kernel_out {
                std::fs::write(&k, kernel.to_text()).map_err(|e| io_err(&k, e))?;
            }
            Ok(())
        }
    }
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
}

fn report(category: &str, message: String) -> ExitCode {
    let text = serde_json::to_string(&ErrorReport {
        error: category,
        message,
    })
    .unwrap_or_else(|_| format!("{{\"error\":\"{category}\"}}"));
    eprintln!("{text}");
    ExitCode::from(2)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => return report("usage", e.to_string()),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(e.category(), e.to_string()),
    }
}
