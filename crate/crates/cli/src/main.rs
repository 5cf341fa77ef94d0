//! `hires`: crop plans, encodes, ablation matrices, gradient checks and probes.
//!
//! Exit codes: 0 ok, 1 check failed, 2 usage/input/config, 3 internal shape
//! error, 4 numeric failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hires_core::cvfm::FusionMode;
use hires_core::encoder::{ablation_matrix, make_variant, EncoderConfig, HybridEncoder};
use hires_core::gradcheck::{fusion_gradcheck, noise_image, GradcheckOptions};
use hires_core::image::{atomic_write, load_image, write_raw};
use hires_core::planner::{build_crop_plan, score_candidates, PlannerConfig};
use hires_core::probe::{
    boundary_shift_probe, cross_tile_saliency, default_saliency_setup, run_probe, DriftRow,
    GlyphSpec, Placement, ProbeTask,
};
use hires_core::Error;

const OUT_DIR_ENV: &str = "HIRES_OUT_DIR";

#[derive(Parser)]
#[command(
    name = "hires",
    version,
    about = "High-resolution hybrid vision encoder toolkit"
)]
struct Cli {
    /// Directory for reports (falls back to $HIRES_OUT_DIR, then ./hires-out).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// `test` is 64-bit and required for gradient checks. `fast` is accepted
    /// for forward commands and currently computes in 64-bit as well.
    #[arg(long, global = true, value_enum, default_value_t = Precision::Test)]
    precision: Precision,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Precision {
    Test,
    Fast,
}

#[derive(Subcommand)]
enum Command {
    /// Score the candidate resolutions for an image size and print the plan.
    Plan {
        width: usize,
        height: usize,
        /// JSON list of `[width, height]` candidates.
        #[arg(long)]
        candidates: Option<PathBuf>,
        /// Take tile geometry and candidates from an encoder config.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Print JSON instead of the table.
        #[arg(long)]
        json: bool,
    },
    /// Encode an image (.ppm or raw float) into visual tokens.
    Encode {
        image: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Token dump path; the JSON summary goes next to it.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print layer and stage shapes without allocating weights.
        #[arg(long)]
        dry_run: bool,
    },
    /// Run variants of a config and report shapes, saliency, drift, runtime.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Comma-separated variant ids; defaults to the full matrix.
        #[arg(long, value_delimiter = ',')]
        matrix: Option<Vec<String>>,
        /// Gate value for every fused variant. At zero all rows match the
        /// baseline.
        #[arg(long, default_value_t = 0.5)]
        gate: f64,
    },
    /// Backward versus finite differences over the fusion parameters, for all
    /// four fusion modes.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: u64,
        /// Check this many random coordinates per parameter tensor.
        #[arg(long)]
        coords: Option<usize>,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Two-stage toy training plus boundary probes for the baseline and hybrid.
    Probe {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        task: Task,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        stage1_steps: Option<usize>,
        #[arg(long)]
        stage2_steps: Option<usize>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    #[value(name = "boundary_glyph_count")]
    BoundaryGlyphCount,
}

enum Failure {
    Check(String),
    Core(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Core(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Core(Error::Io(e))
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Core(Error::Json(e))
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_shape() {
                3
            } else if e.is_numeric() {
                4
            } else {
                2
            })
        }
    }
}

fn run(cli: Cli) -> Outcome {
    let out_dir = cli
        .out_dir
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("hires-out"));
    match cli.command {
        Command::Plan {
            width,
            height,
            candidates,
            config,
            json,
        } => cmd_plan(
            width,
            height,
            candidates.as_deref(),
            config.as_deref(),
            json,
        ),
        Command::Encode {
            image,
            config,
            seed,
            out,
            dry_run,
        } => {
            let out = out.unwrap_or_else(|| out_dir.join("tokens.raw"));
            cmd_encode(&image, &config, seed, &out, dry_run, cli.precision)
        }
        Command::Ablate {
            config,
            seed,
            matrix,
            gate,
        } => cmd_ablate(&config, seed, matrix, gate, &out_dir, cli.precision),
        Command::Gradcheck {
            config,
            seed,
            coords,
            corrupt,
        } => {
            if cli.precision != Precision::Test {
                return Err(Error::Usage("gradcheck needs --precision test".into()).into());
            }
            cmd_gradcheck(&config, seed, coords, corrupt, &out_dir)
        }
        Command::Probe {
            config,
            task: Task::BoundaryGlyphCount,
            seed,
            samples,
            stage1_steps,
            stage2_steps,
        } => {
            let mut task = ProbeTask::default();
            if let Some(n) = samples {
                task.samples = n;
            }
            if let Some(n) = stage1_steps {
                task.schedule.stage1_steps = n;
            }
            if let Some(n) = stage2_steps {
                task.schedule.stage2_steps = n;
            }
            cmd_probe(&config, &task, seed, &out_dir, cli.precision)
        }
    }
}

fn read_config(path: &Path) -> Result<EncoderConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
    Ok(EncoderConfig::from_json(&text)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    atomic_write(path, text.as_bytes())?;
    Ok(())
}

fn cmd_plan(
    w: usize,
    h: usize,
    candidates: Option<&Path>,
    config: Option<&Path>,
    json: bool,
) -> Outcome {
    let mut planner = match config {
        Some(p) => read_config(p)?.effective_planner(),
        None => PlannerConfig::full(),
    };
    if let Some(p) = candidates {
        let text = std::fs::read_to_string(p)
            .map_err(|e| Error::Usage(format!("cannot read candidates {}: {e}", p.display())))?;
        planner.candidates = serde_json::from_str(&text)?;
    }
    let plan = build_crop_plan(w, h, &planner)?;
    let sel = score_candidates(w, h, &planner.candidates)?;
    if json {
        let v = serde_json::json!({ "selection": sel, "plan": plan });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    println!("input {w}x{h}, tile {}", planner.tile_size);
    println!("  #  candidate    scale        res_eff            res_wasted");
    for (i, c) in sel.candidates.iter().enumerate() {
        let (n, d) = c.scale_fraction();
        println!(
            "{} {i}  {:>4}x{:<4}   {:>4}/{:<4}   {:>16}   {:>16}",
            if i == sel.chosen_index { "*" } else { " " },
            c.width,
            c.height,
            n,
            d,
            c.eff_area().to_string(),
            c.wasted_area().to_string(),
        );
    }
    let c = sel.chosen();
    println!(
        "chosen {}x{} (eff {}, wasted {})",
        c.width,
        c.height,
        c.eff_area(),
        c.wasted_area()
    );
    println!(
        "tie-break: effective area ties {:?} -> wasted area ties {:?} -> decided by {}",
        sel.eff_ties,
        sel.wasted_ties,
        serde_json::to_value(sel.decided_by)?
            .as_str()
            .unwrap_or("?")
    );
    let p = &plan.pad;
    println!(
        "grid {}x{}, resize to {}x{}, pad left {} top {} right {} bottom {}",
        plan.grid.0,
        plan.grid.1,
        plan.resize_to.0,
        plan.resize_to.1,
        p.left,
        p.top,
        p.right,
        p.bottom
    );
    println!(
        "highres {}x{} (resize to {}x{}), branch scale {}/{}",
        plan.highres_dims.0,
        plan.highres_dims.1,
        plan.highres_resize_to.0,
        plan.highres_resize_to.1,
        plan.branch_scale.0,
        plan.branch_scale.1
    );
    println!("views {}, token grid {}", plan.view_count, plan.token_grid);
    Ok(())
}

#[derive(Serialize)]
struct EncodeSummary<'a> {
    config_hash: String,
    seed: u64,
    precision: Precision,
    shape: [usize; 3],
    tokens: String,
    plan: &'a hires_core::planner::CropPlan,
}

fn cmd_encode(
    image: &Path,
    config: &Path,
    seed: u64,
    out: &Path,
    dry_run: bool,
    precision: Precision,
) -> Outcome {
    let cfg = read_config(config)?;
    let enc = HybridEncoder::new(cfg.clone())?;
    let img = load_image(image, cfg.normalization.clone())?;
    if dry_run {
        let report = enc.dry_run(img.width(), img.height())?;
        let v = serde_json::json!({ "config_hash": cfg.hash(), "shapes": report });
        println!("{}", serde_json::to_string_pretty(&v)?);
        return Ok(());
    }
    let params = enc.init_params(seed)?;
    let tokens = enc.encode(&img, &params)?;
    write_raw(out, &tokens.to_tensor())?;
    let summary = EncodeSummary {
        config_hash: cfg.hash(),
        seed,
        precision,
        shape: tokens.shape(),
        tokens: out
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        plan: &tokens.plan,
    };
    let summary_path = out.with_extension("json");
    write_json(&summary_path, &summary)?;
    let [v, t, d] = tokens.shape();
    println!("tokens {v}x{t}x{d} -> {}", out.display());
    println!("summary -> {}", summary_path.display());
    Ok(())
}

#[derive(Serialize)]
struct AblationRow {
    variant: String,
    config_hash: String,
    token_shape: [usize; 3],
    cross_tile_saliency_max: f64,
    feature_drift: Vec<DriftRow>,
    max_feature_drift: f64,
    runtime_ms: u128,
}

fn cmd_ablate(
    config: &Path,
    seed: u64,
    matrix: Option<Vec<String>>,
    gate: f64,
    out_dir: &Path,
    precision: Precision,
) -> Outcome {
    let mut base = read_config(config)?;
    base.fusion.gate_init = gate;
    let ids = matrix.unwrap_or_else(ablation_matrix);
    // reject bad ids before any work
    let variants = ids
        .iter()
        .map(|id| make_variant(&base, id).map(|c| (id.clone(), c)))
        .collect::<Result<Vec<_>, _>>()?;
    let [w, h] = *base
        .effective_planner()
        .candidates
        .iter()
        .max_by_key(|[w, h]| w * h)
        .expect("validated candidates");
    let image = noise_image(w, h, seed, &base)?;
    let shifts = ProbeTask::default().shifts;
    let mut rows = Vec::new();
    for (id, cfg) in variants {
        let start = Instant::now();
        let enc = HybridEncoder::new(cfg)?;
        let params = enc.init_params(seed)?;
        let tokens = enc.encode(&image, &params)?;
        let (target, pixels) = default_saliency_setup(&tokens.plan)?;
        let sal = cross_tile_saliency(
            &enc,
            &params,
            &image,
            target,
            &pixels,
            ProbeTask::default().saliency_eps,
        )?;
        let glyph = GlyphSpec::plus(Placement::Interior { tile: 0 }, (w, h));
        let drift = boundary_shift_probe(&enc, &params, &glyph, &shifts)?;
        let max_drift = drift.iter().fold(0.0f64, |m, d| m.max(d.drift));
        rows.push(AblationRow {
            variant: id.clone(),
            config_hash: enc.config().hash(),
            token_shape: tokens.shape(),
            cross_tile_saliency_max: sal.max,
            feature_drift: drift,
            max_feature_drift: max_drift,
            runtime_ms: start.elapsed().as_millis(),
        });
        let r = rows.last().expect("pushed");
        println!(
            "{:<24} {:?}  saliency {:.3e}  drift {:.3e}  {} ms",
            r.variant, r.token_shape, r.cross_tile_saliency_max, r.max_feature_drift, r.runtime_ms
        );
    }
    let mut csv = String::from("variant,config_hash,views,tokens,dim,cross_tile_saliency_max,max_feature_drift,runtime_ms\n");
    for r in &rows {
        let [v, t, d] = r.token_shape;
        csv.push_str(&format!(
            "{},{},{v},{t},{d},{:e},{:e},{}\n",
            r.variant, r.config_hash, r.cross_tile_saliency_max, r.max_feature_drift, r.runtime_ms
        ));
    }
    let report = serde_json::json!({
        "base_config_hash": base.hash(),
        "seed": seed,
        "gate": gate,
        "precision": precision,
        "image": [w, h],
        "rows": rows,
    });
    write_json(&out_dir.join("ablate.json"), &report)?;
    atomic_write(&out_dir.join("ablate.csv"), csv.as_bytes())?;
    if let Some(first) = rows.first() {
        if rows.iter().any(|r| r.token_shape != first.token_shape) {
            return Err(Failure::Check("variants disagree on token shape".into()));
        }
    }
    if let Some(r) = rows
        .iter()
        .find(|r| r.variant == "ds" && r.cross_tile_saliency_max != 0.0)
    {
        return Err(Failure::Check(format!(
            "ds saliency {} is not zero",
            r.cross_tile_saliency_max
        )));
    }
    Ok(())
}

#[derive(Serialize)]
struct GradcheckRow {
    mode: String,
    param: String,
    max_rel_err: f64,
    max_abs_err: f64,
    passed: bool,
}

fn cmd_gradcheck(
    config: &Path,
    seed: u64,
    coords: Option<usize>,
    corrupt: bool,
    out_dir: &Path,
) -> Outcome {
    let base = read_config(config)?;
    let [w, h] = *base
        .effective_planner()
        .candidates
        .iter()
        .min_by_key(|[w, h]| w * h)
        .expect("validated candidates");
    let image = noise_image(w, h, seed, &base)?;
    let opts = GradcheckOptions {
        seed,
        corrupt,
        coords_per_param: coords,
        ..Default::default()
    };
    let mut rows = Vec::new();
    for mode in [
        FusionMode::Channel,
        FusionMode::LocalCa,
        FusionMode::GlobalCa,
        FusionMode::Add,
    ] {
        let mut cfg = base.clone();
        cfg.fusion.enabled = true;
        cfg.fusion.mode = mode;
        let name = serde_json::to_value(mode)?
            .as_str()
            .unwrap_or("?")
            .to_string();
        let report = fusion_gradcheck(&cfg, &image, opts)?;
        println!(
            "{:<10} {:>3} params  max rel err {:.3e}  {}",
            name,
            report.params.len(),
            report.max_rel_err(),
            if report.passed() { "pass" } else { "FAIL" }
        );
        rows.extend(report.params.into_iter().map(|p| GradcheckRow {
            mode: name.clone(),
            param: p.name,
            max_rel_err: p.max_rel_err,
            max_abs_err: p.max_abs_err,
            passed: p.passed,
        }));
    }
    let report = serde_json::json!({
        "config_hash": base.hash(),
        "seed": seed,
        "rtol": opts.rtol,
        "atol": opts.atol,
        "coords_per_param": coords,
        "rows": rows,
    });
    write_json(&out_dir.join("gradcheck.json"), &report)?;
    let worst = rows
        .iter()
        .filter(|r| !r.passed)
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err));
    match worst {
        Some(r) => Err(Failure::Check(format!(
            "worst offender {}/{} rel err {:.3e}",
            r.mode, r.param, r.max_rel_err
        ))),
        None => Ok(()),
    }
}

#[derive(Serialize)]
struct Timing {
    variant: String,
    config_hash: String,
    seconds: f64,
}

fn cmd_probe(
    config: &Path,
    task: &ProbeTask,
    seed: u64,
    out_dir: &Path,
    precision: Precision,
) -> Outcome {
    let cfg = read_config(config)?;
    if !cfg.fusion.enabled {
        return Err(Error::Usage(
            "probe needs a config with fusion enabled for the hybrid row".into(),
        )
        .into());
    }
    let encoders = vec![
        (
            "ds".to_string(),
            HybridEncoder::new(make_variant(&cfg, "ds")?)?,
        ),
        ("hybrid".to_string(), HybridEncoder::new(cfg)?),
    ];
    let mut merged: Option<hires_core::probe::ProbeReport> = None;
    let mut timing = Vec::new();
    for pair in encoders {
        let start = Instant::now();
        let report = run_probe(std::slice::from_ref(&pair), task, seed)?;
        timing.push(Timing {
            variant: pair.0.clone(),
            config_hash: pair.1.config().hash(),
            seconds: start.elapsed().as_secs_f64(),
        });
        let row = &report.rows[0];
        println!(
            "{:<8} loss {:.4} -> {:.4}  saliency {:.3e}  stage-1 frozen identical {}",
            row.variant,
            row.initial_loss,
            row.final_loss,
            row.cross_tile_saliency_max,
            row.stage1_frozen_bit_identical
        );
        match merged.as_mut() {
            None => merged = Some(report),
            Some(m) => {
                m.rows.extend(report.rows);
                m.metrics.extend(report.metrics);
                m.curves.extend(report.curves);
            }
        }
    }
    let report = merged.expect("two encoders");
    write_json(&out_dir.join("report.json"), &report)?;
    atomic_write(&out_dir.join("curves.csv"), report.curves_csv().as_bytes())?;
    write_json(
        &out_dir.join("timing.json"),
        &serde_json::json!({ "precision": precision, "runs": timing }),
    )?;
    if let Some(r) = report.rows.iter().find(|r| !r.stage1_frozen_bit_identical) {
        return Err(Failure::Check(format!(
            "{}: stage 1 changed frozen weights",
            r.variant
        )));
    }
    Ok(())
}
