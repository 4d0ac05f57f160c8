//! Command-line front end for the orientation-estimation library: synthetic
//! scene generation, polar transformation, panorama augmentation, feature
//! extraction, orientation estimation, pool retrieval, and report
//! evaluation, plus two self-check commands for the loss gradients and the
//! toy fitting loop.
//!
//! Exit codes: 0 on success; 2 on malformed usage (reported by the argument
//! parser); 1 on runtime failures, with a diagnostic on stderr.
//!
//! The RNG seed is resolved in precedence order: the `--seed` flag, an
//! explicit `seed` key in the `--config` file, the `CVO_SEED` environment
//! variable, then 0. Worker threads: the `--jobs` flag, the config file,
//! then 1.

use std::error::Error;
use std::fs;
use std::num::NonZeroUsize;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use cvorient::{
    cosine_distance, cosine_distance_grad, emit_report, estimate_cs, estimate_fi,
    extract_features, generate_scenes, polar_transform, read_fmap, run_retrieval, shift_and_crop,
    toy_fit, triplet_loss, triplet_loss_grad, write_fmap, ChannelAffine, EvaluationRecord,
    FeatureMap, LossConfig, PairAlignment, RasterImage, RefinementMethod, RetrievalConfig,
    RetrievalScene, SouthAlignedAngle, TripletBatch, WIDTH_STRIDE,
};

type CliResult<T> = std::result::Result<T, Box<dyn Error>>;

#[derive(Parser)]
#[command(
    name = "cvorient",
    version,
    about = "Cross-view camera-orientation estimation on panoramic street imagery"
)]
struct Cli {
    /// RNG seed; overrides the config file and the CVO_SEED variable.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    /// TOML config file holding a [retrieval] table.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Worker threads for the retrieval sweep; overrides the config file.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<NonZeroUsize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic scenes: overhead/query PNG pairs plus truth.csv.
    Synth {
        /// Output directory; created if missing.
        out_dir: PathBuf,
        /// Number of scenes.
        #[arg(long, default_value_t = 8)]
        count: usize,
        /// Overhead image side length in pixels.
        #[arg(long, default_value_t = 512)]
        side: usize,
        /// Panorama height in pixels.
        #[arg(long, default_value_t = 128)]
        pano_height: usize,
        /// Panorama width in pixels.
        #[arg(long, default_value_t = 512)]
        pano_width: usize,
    },
    /// Polar-transform a square overhead PNG into a panorama strip.
    Polar {
        input: PathBuf,
        output: PathBuf,
        /// Panorama height in pixels.
        #[arg(long, default_value_t = 128)]
        height: usize,
        /// Panorama width in pixels.
        #[arg(long, default_value_t = 512)]
        width: usize,
    },
    /// Roll a panorama by a pixel shift, crop it to a field of view, and
    /// print the ground truth this creates.
    Augment {
        input: PathBuf,
        /// Roll amount in panorama pixels.
        #[arg(long)]
        shift: usize,
        /// Field of view kept after the roll, in degrees.
        #[arg(long, default_value_t = 360.0)]
        fov: f64,
        /// Where to save the augmented panorama.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
    },
    /// Extract features from a panorama or overhead PNG into an FMAP1 file.
    Extract { input: PathBuf, output: PathBuf },
    /// Estimate the orientation shift between two feature files, printing
    /// the estimate as JSON.
    Estimate {
        /// Ground (query) feature file.
        ground: PathBuf,
        /// Satellite feature file.
        satellite: PathBuf,
        /// Sub-pixel refinement method.
        #[arg(long, value_enum, default_value_t = MethodArg::Fi)]
        method: MethodArg,
        /// Width-scaling factor for refinement.
        #[arg(long, default_value_t = NonZeroUsize::new(10).unwrap())]
        scale: NonZeroUsize,
    },
    /// Rank a scene directory's candidate pool for every query and write
    /// per-query records as JSON.
    Retrieve {
        /// Scene directory as laid out by `synth`.
        scene_dir: PathBuf,
        /// Records output path; stdout when omitted.
        #[arg(long, value_name = "PATH")]
        out: Option<PathBuf>,
        /// Dataset tag stored on every record.
        #[arg(long, default_value = "synth")]
        tag: String,
    },
    /// Turn a records file into a report (JSON) and an error histogram (CSV).
    Evaluate {
        /// Records file written by `retrieve`.
        records: PathBuf,
        /// Report JSON output path.
        #[arg(long, value_name = "PATH")]
        report: PathBuf,
        /// Histogram CSV output path.
        #[arg(long, value_name = "PATH")]
        histogram: PathBuf,
    },
    /// Check the analytic loss gradients against central finite differences
    /// on random inputs; fails if any relative gap exceeds 1e-4.
    Gradcheck {
        /// Number of random triplets to check.
        #[arg(long, default_value_t = 100)]
        trials: usize,
    },
    /// Fit the toy per-channel transform on a synthetic batch and print the
    /// endpoints of the loss trace.
    FitToy {
        /// Gradient-descent steps.
        #[arg(long, default_value_t = 200)]
        steps: usize,
        /// Step size.
        #[arg(long, default_value_t = 0.05)]
        learning_rate: f64,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Fi,
    Cs,
}

impl From<MethodArg> for RefinementMethod {
    fn from(arg: MethodArg) -> Self {
        match arg {
            MethodArg::Fi => RefinementMethod::Fi,
            MethodArg::Cs => RefinementMethod::Cs,
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let config = effective_config(&cli)?;
    match cli.command {
        Command::Synth {
            out_dir,
            count,
            side,
            pano_height,
            pano_width,
        } => cmd_synth(&out_dir, count, side, pano_height, pano_width, config.seed),
        Command::Polar {
            input,
            output,
            height,
            width,
        } => cmd_polar(&input, &output, height, width),
        Command::Augment {
            input,
            shift,
            fov,
            out,
        } => cmd_augment(&input, shift, fov, out.as_deref()),
        Command::Extract { input, output } => cmd_extract(&input, &output),
        Command::Estimate {
            ground,
            satellite,
            method,
            scale,
        } => cmd_estimate(&ground, &satellite, method.into(), scale.get()),
        Command::Retrieve {
            scene_dir,
            out,
            tag,
        } => cmd_retrieve(&scene_dir, out.as_deref(), &tag, &config),
        Command::Evaluate {
            records,
            report,
            histogram,
        } => cmd_evaluate(&records, &report, &histogram, &config),
        Command::Gradcheck { trials } => cmd_gradcheck(trials, config.seed),
        Command::FitToy {
            steps,
            learning_rate,
        } => cmd_fit_toy(steps, learning_rate, config.seed),
    }
}

/// Merges the config file with the command-line and environment overrides.
fn effective_config(cli: &Cli) -> CliResult<RetrievalConfig> {
    let mut config = RetrievalConfig::default();
    let mut seed_from_file = false;
    if let Some(path) = &cli.config {
        let text = fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        config = RetrievalConfig::from_toml_str(&text)?;
        // An explicit `seed = 0` in the file should still outrank CVO_SEED,
        // so key presence is checked on the raw document, not on the parsed
        // value (whose default is also 0).
        seed_from_file = text
            .parse::<toml::Table>()
            .ok()
            .and_then(|doc| doc.get("retrieval")?.get("seed").cloned())
            .is_some();
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    } else if !seed_from_file {
        if let Ok(text) = std::env::var("CVO_SEED") {
            config.seed = text
                .trim()
                .parse()
                .map_err(|_| format!("CVO_SEED must be an unsigned integer, got {text:?}"))?;
        }
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs.get();
    }
    Ok(config)
}

fn cmd_synth(
    out_dir: &Path,
    count: usize,
    side: usize,
    pano_height: usize,
    pano_width: usize,
    seed: u64,
) -> CliResult<()> {
    fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let scenes = generate_scenes(seed, count, side, pano_height, pano_width)?;
    let mut csv = String::from("id,x_shift,w_gt,theta_gt\n");
    for scene in &scenes {
        scene
            .overhead
            .save_png(out_dir.join(format!("overhead_{:04}.png", scene.id)))?;
        scene
            .query
            .save_png(out_dir.join(format!("query_{:04}.png", scene.id)))?;
        csv.push_str(&format!(
            "{},{},{},{}\n",
            scene.id,
            scene.x_shift,
            scene.w_gt,
            scene.theta_gt.degrees()
        ));
    }
    let csv_path = out_dir.join("truth.csv");
    fs::write(&csv_path, csv).map_err(|e| format!("{}: {e}", csv_path.display()))?;
    println!("synth: wrote {count} scenes to {}", out_dir.display());
    Ok(())
}

fn cmd_polar(input: &Path, output: &Path, height: usize, width: usize) -> CliResult<()> {
    let overhead = RasterImage::load_png(input)?;
    let panorama = polar_transform(&overhead, height, width)?;
    panorama.save_png(output)?;
    println!("polar: wrote {} ({height}x{width})", output.display());
    Ok(())
}

fn cmd_augment(input: &Path, shift: usize, fov: f64, out: Option<&Path>) -> CliResult<()> {
    let panorama = RasterImage::load_png(input)?;
    let width = panorama.width();
    if width % WIDTH_STRIDE != 0 {
        return Err(format!(
            "panorama width {width} is not a multiple of the feature stride {WIDTH_STRIDE}"
        )
        .into());
    }
    let result = shift_and_crop(&panorama, shift, fov, width / WIDTH_STRIDE)?;
    if let Some(path) = out {
        result.image.save_png(path)?;
    }
    println!("w_gt={} theta_gt={}", result.w_gt, result.theta_gt.degrees());
    Ok(())
}

fn cmd_extract(input: &Path, output: &Path) -> CliResult<()> {
    let image = RasterImage::load_png(input)?;
    let features = extract_features(&image)?;
    write_fmap(&features, output)?;
    let (height, width, channels) = features.shape();
    println!(
        "extract: wrote {} ({height}x{width}x{channels})",
        output.display()
    );
    Ok(())
}

fn cmd_estimate(
    ground: &Path,
    satellite: &Path,
    method: RefinementMethod,
    scale: usize,
) -> CliResult<()> {
    let f_g = read_fmap(ground)?;
    let f_s = read_fmap(satellite)?;
    let estimate = match method {
        RefinementMethod::Fi => estimate_fi(&f_g, &f_s, scale)?,
        RefinementMethod::Cs => estimate_cs(&f_g, &f_s, scale)?,
    };
    let mut json = serde_json::to_string_pretty(&estimate)?;
    json.push('\n');
    print!("{json}");
    Ok(())
}

fn cmd_retrieve(
    scene_dir: &Path,
    out: Option<&Path>,
    tag: &str,
    config: &RetrievalConfig,
) -> CliResult<()> {
    let scenes = load_scene_dir(scene_dir, tag, config.pool_size)?;
    let records = run_retrieval(&scenes, config)?;
    let mut json = serde_json::to_string_pretty(&records)?;
    json.push('\n');
    match out {
        Some(path) => {
            fs::write(path, json).map_err(|e| format!("{}: {e}", path.display()))?;
            println!(
                "retrieve: wrote {} records to {}",
                records.len(),
                path.display()
            );
        }
        None => print!("{json}"),
    }
    Ok(())
}

fn cmd_evaluate(
    records_path: &Path,
    report_path: &Path,
    histogram_path: &Path,
    config: &RetrievalConfig,
) -> CliResult<()> {
    let text =
        fs::read_to_string(records_path).map_err(|e| format!("{}: {e}", records_path.display()))?;
    let records: Vec<EvaluationRecord> =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", records_path.display()))?;
    let config_value = serde_json::to_value(config)?;
    let report = emit_report(
        &records,
        config_value,
        config.seed,
        report_path,
        histogram_path,
    )?;
    let m = &report.metrics;
    println!(
        "evaluate: {} records, recall@1 {:.4}, rate<2° {:.4}, rate<5° {:.4}, mean {:.4}°, median {:.4}°",
        m.record_count,
        m.recall_at_1,
        m.rate_below_2,
        m.rate_below_5,
        m.mean_angle_error,
        m.median_angle_error
    );
    Ok(())
}

/// Compares the analytic cosine-distance and triplet-loss gradients against
/// central finite differences on random small maps.
fn cmd_gradcheck(trials: usize, seed: u64) -> CliResult<()> {
    if trials == 0 {
        return Err("trials must be at least 1".into());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let height = rng.random_range(1..=2);
        let width = rng.random_range(2..=6);
        let channels = rng.random_range(1..=3);
        let anchor = random_map(height, width, channels, &mut rng);
        let positive = random_map(height, width, channels, &mut rng);
        let negative = random_map(height, width, channels, &mut rng);
        let alpha = *[1.0, 5.0, 10.0].choose(&mut rng).expect("non-empty");

        let cos = cosine_distance_grad(&anchor, &positive)?;
        for i in 0..anchor.values().len() {
            let plus = cosine_distance(&perturbed(&anchor, i, h), &positive)?;
            let minus = cosine_distance(&perturbed(&anchor, i, -h), &positive)?;
            worst = worst.max(relative_gap(cos.left[i], (plus - minus) / (2.0 * h)));
            let plus = cosine_distance(&anchor, &perturbed(&positive, i, h))?;
            let minus = cosine_distance(&anchor, &perturbed(&positive, i, -h))?;
            worst = worst.max(relative_gap(cos.right[i], (plus - minus) / (2.0 * h)));
        }

        let grads = triplet_loss_grad(&anchor, &positive, &negative, alpha)?;
        for i in 0..anchor.values().len() {
            let plus = triplet_loss(&perturbed(&anchor, i, h), &positive, &negative, alpha)?;
            let minus = triplet_loss(&perturbed(&anchor, i, -h), &positive, &negative, alpha)?;
            worst = worst.max(relative_gap(grads.anchor[i], (plus - minus) / (2.0 * h)));
            let plus = triplet_loss(&anchor, &perturbed(&positive, i, h), &negative, alpha)?;
            let minus = triplet_loss(&anchor, &perturbed(&positive, i, -h), &negative, alpha)?;
            worst = worst.max(relative_gap(grads.positive[i], (plus - minus) / (2.0 * h)));
            let plus = triplet_loss(&anchor, &positive, &perturbed(&negative, i, h), alpha)?;
            let minus = triplet_loss(&anchor, &positive, &perturbed(&negative, i, -h), alpha)?;
            worst = worst.max(relative_gap(grads.negative[i], (plus - minus) / (2.0 * h)));
        }
    }
    println!("gradcheck: {trials} trials, worst relative gap {worst:.3e}");
    if worst > 1e-4 {
        return Err(format!("worst relative gap {worst:.3e} exceeds 1e-4").into());
    }
    Ok(())
}

/// Builds a small deterministic batch whose streets and satellites agree,
/// corrupts one channel's sign in the initial transform so the optimizer has
/// something to undo, and reports the endpoints of the loss trace.
fn cmd_fit_toy(steps: usize, learning_rate: f64, seed: u64) -> CliResult<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let streets: Vec<FeatureMap> = (0..4).map(|_| random_map(2, 4, 2, &mut rng)).collect();
    let satellites = streets.clone();
    let alignments = vec![
        PairAlignment {
            w_gt: 0.0,
            w_est: 0.0
        };
        4
    ];
    let batch = TripletBatch::new(streets, satellites, alignments, 360.0)?;
    let mut init = ChannelAffine::random(2, seed);
    init.scale[0] = -init.scale[0];
    let fit = toy_fit(&batch, &init, steps, learning_rate, &LossConfig::default())?;
    let first = fit.trace[0];
    let last = *fit.trace.last().expect("trace is non-empty");
    println!(
        "fit-toy: {steps} steps at learning rate {learning_rate}, loss {first:.6} -> {last:.6}, mean angle loss {:.6}",
        fit.mean_angle_loss
    );
    Ok(())
}

/// Reads a scene directory as `synth` lays it out: `truth.csv` with header
/// `id,x_shift,w_gt,theta_gt` next to `overhead_NNNN.png` / `query_NNNN.png`
/// pairs. Scenes are ordered by id and truncated to the pool size.
fn load_scene_dir(dir: &Path, tag: &str, pool_size: usize) -> CliResult<Vec<RetrievalScene>> {
    let csv_path = dir.join("truth.csv");
    let text = fs::read_to_string(&csv_path).map_err(|e| format!("{}: {e}", csv_path.display()))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("id,x_shift,w_gt,theta_gt") => {}
        other => {
            return Err(format!(
                "{}: expected header \"id,x_shift,w_gt,theta_gt\", got {other:?}",
                csv_path.display()
            )
            .into())
        }
    }
    let mut scenes = Vec::new();
    for (idx, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let row = idx + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(format!(
                "{}:{row}: expected 4 fields, got {}",
                csv_path.display(),
                fields.len()
            )
            .into());
        }
        let id: u64 = fields[0]
            .trim()
            .parse()
            .map_err(|_| format!("{}:{row}: bad id {:?}", csv_path.display(), fields[0]))?;
        // The recorded pixel shift documents provenance; the engine only
        // needs the ground truth in feature bins.
        let _: usize = fields[1]
            .trim()
            .parse()
            .map_err(|_| format!("{}:{row}: bad x_shift {:?}", csv_path.display(), fields[1]))?;
        let w_gt: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| format!("{}:{row}: bad w_gt {:?}", csv_path.display(), fields[2]))?;
        let theta: f64 = fields[3]
            .trim()
            .parse()
            .map_err(|_| format!("{}:{row}: bad theta_gt {:?}", csv_path.display(), fields[3]))?;
        if !w_gt.is_finite() || !theta.is_finite() {
            return Err(format!(
                "{}:{row}: ground truth must be finite",
                csv_path.display()
            )
            .into());
        }
        let overhead = RasterImage::load_png(dir.join(format!("overhead_{id:04}.png")))?;
        let query = RasterImage::load_png(dir.join(format!("query_{id:04}.png")))?;
        scenes.push(RetrievalScene {
            id,
            overhead,
            query,
            w_gt,
            theta_gt: SouthAlignedAngle::new(theta),
            tag: tag.to_string(),
        });
    }
    if scenes.is_empty() {
        return Err(format!("{}: no scenes listed", csv_path.display()).into());
    }
    scenes.sort_by_key(|s| s.id);
    scenes.truncate(pool_size);
    Ok(scenes)
}

fn random_map(height: usize, width: usize, channels: usize, rng: &mut ChaCha8Rng) -> FeatureMap {
    let values = (0..height * width * channels)
        .map(|_| rng.random_range(-1.0..1.0))
        .collect();
    FeatureMap::new(height, width, channels, values).expect("dimensions are positive")
}

/// A copy of `map` with one coordinate nudged by `delta`.
fn perturbed(map: &FeatureMap, index: usize, delta: f64) -> FeatureMap {
    let (height, width, channels) = map.shape();
    let mut values = map.values().to_vec();
    values[index] += delta;
    FeatureMap::new(height, width, channels, values).expect("shape is unchanged")
}

fn relative_gap(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}
