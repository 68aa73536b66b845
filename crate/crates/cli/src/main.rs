//! `dico`: color invariants, feature disentangling, synthetic scenes,
//! training, translation and evaluation from the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dico::color_invariants::{invariants, INVARIANT_NAMES};
use dico::data::{
    generate_synthetic_scene, list_images, load_image, save_image, synth_background,
    SyntheticSceneSpec,
};
use dico::disentangle::{disentangle, MaskParams, DEFAULT_GAMMA, DEFAULT_S0};
use dico::feature_extractor::FeatureExtractor;
use dico::pipeline::{evaluate, Model, TrainConfig, Trainer};
use dico::{Error, Result, Tensor};

#[derive(Parser, Debug)]
#[command(
    name = "dico",
    version,
    about = "Night-to-day translation for fixed-camera scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the five color-invariant maps of an image as E.png, W.png, C.png, H.png, N.png.
    Invariants(InvariantsArgs),
    /// Write per-stage background masks of an image against a reference background.
    Disentangle(DisentangleArgs),
    /// Average the day frames of a scene into a reference background.
    SynthBackground(SynthBackgroundArgs),
    /// Generate a procedural scene with ground-truth masks.
    SynthScene(SynthSceneArgs),
    /// Train the translator from a JSON configuration.
    Train(TrainArgs),
    /// Translate a night image, or a directory of them, with a checkpoint.
    Translate(TranslateArgs),
    /// Score a checkpoint on a scene and write a JSON report.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct InvariantsArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = dico::color_invariants::DEFAULT_SIGMA)]
    sigma: f32,
    #[arg(long, default_value_t = dico::color_invariants::DEFAULT_EPSILON)]
    epsilon: f32,
}

#[derive(Args, Debug)]
struct DisentangleArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    reference: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Repeat for several stages.
    #[arg(long = "stage", default_values_t = ["stage3".to_string(), "stage4".to_string()])]
    stages: Vec<String>,
    #[arg(long, default_value_t = DEFAULT_GAMMA)]
    gamma: f32,
    #[arg(long, default_value_t = DEFAULT_S0)]
    s0: f32,
    /// Seed of the bundled extractor weights.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthBackgroundArgs {
    #[arg(long)]
    scene_dir: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthSceneArgs {
    /// JSON scene recipe; omitted fields take their defaults.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    /// Overrides the recipe's seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON training configuration; omitted fields take their defaults.
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    no_lci: bool,
    #[arg(long)]
    no_fore: bool,
    #[arg(long)]
    no_back: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Continue from a checkpoint weight file written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct TranslateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    scene_dir: PathBuf,
    #[arg(long)]
    report: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Invariants(a) => cmd_invariants(a),
        Command::Disentangle(a) => cmd_disentangle(a),
        Command::SynthBackground(a) => cmd_synth_background(a),
        Command::SynthScene(a) => cmd_synth_scene(a),
        Command::Train(a) => cmd_train(a),
        Command::Translate(a) => cmd_translate(a),
        Command::Eval(a) => cmd_eval(a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Channel `c` of `t` stretched to [0, 1] for viewing.
fn channel_png(t: &Tensor, c: usize) -> Result<Tensor> {
    let s = t.shape();
    let plane = t.plane(0, c);
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    let data = plane
        .iter()
        .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
        .collect();
    Tensor::new(dico::Shape::new(1, 1, s.h(), s.w()), data)
}

fn cmd_invariants(a: InvariantsArgs) -> Result<()> {
    let image = load_image(&a.input)?;
    let phi = invariants(&image, a.sigma, a.epsilon)?;
    create_dir(&a.out_dir)?;
    for (c, name) in INVARIANT_NAMES.iter().enumerate() {
        save_image(
            &channel_png(&phi, c)?,
            &a.out_dir.join(format!("{name}.png")),
        )?;
    }
    Ok(())
}

fn cmd_disentangle(a: DisentangleArgs) -> Result<()> {
    let image = load_image(&a.input)?;
    let reference = load_image(&a.reference)?;
    if image.shape() != reference.shape() {
        return Err(Error::Dimension {
            op: "disentangle",
            axis: "extent",
            expected: reference.shape().to_string(),
            got: image.shape().to_string(),
        });
    }
    let params = MaskParams {
        gamma: a.gamma,
        s0: a.s0,
        ..MaskParams::default()
    };
    let extractor = FeatureExtractor::standard(a.seed);
    let ref_pyr = extractor.extract(&reference)?;
    let (sims, masks) = disentangle(&extractor, &image, &ref_pyr, &a.stages, params)?;
    create_dir(&a.out_dir)?;
    for (sim, (stage, mask)) in sims.iter().zip(&masks.masks) {
        save_image(mask, &a.out_dir.join(format!("mask_{stage}.png")))?;
        let scores = sim.scores.map(|p| 0.5 * (p + 1.0));
        save_image(&scores, &a.out_dir.join(format!("similarity_{stage}.png")))?;
    }
    Ok(())
}

fn cmd_synth_background(a: SynthBackgroundArgs) -> Result<()> {
    let day = list_images(&a.scene_dir.join("day"))?
        .iter()
        .map(|p| load_image(p))
        .collect::<Result<Vec<_>>>()?;
    let background = synth_background(&day)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(&background, &a.out)
}

fn cmd_synth_scene(a: SynthSceneArgs) -> Result<()> {
    let mut spec = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|source| Error::Io {
                path: path.clone(),
                source,
            })?;
            serde_json::from_str::<SyntheticSceneSpec>(&text).map_err(|source| Error::Json {
                path: path.clone(),
                source,
            })?
        }
        None => SyntheticSceneSpec::default(),
    };
    if let Some(seed) = a.seed {
        spec.seed = seed;
    }
    generate_synthetic_scene(&spec)?.write(&a.out_dir)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut config = TrainConfig::load(&a.config)?;
    config.use_lci &= !a.no_lci;
    config.use_l_fore &= !a.no_fore;
    config.use_l_back &= !a.no_back;
    if let Some(seed) = a.seed {
        config.seed = seed;
    }
    if let Some(n) = a.iterations {
        config.iterations = n;
    }
    if let Some(root) = a.data_root {
        config.data_root = root;
    }
    if let Some(out) = a.out_dir {
        config.out_dir = out;
    }
    let every = config.log_every;
    let mut trainer = match &a.resume {
        Some(ckpt) => Trainer::resume(config, ckpt)?,
        None => Trainer::new(config)?,
    };
    let quiet = a.quiet;
    trainer.run(|r| {
        if !quiet && every > 0 && (r.iter % every == 0 || r.iter == 1) {
            println!(
                "iter {:>6}  total_g {:.4}  total_d {:.4}  back {:.4}  fore {:.4}  adv_g {:.4}",
                r.iter, r.total_g, r.total_d, r.l_back, r.l_fore, r.l_adv_g
            );
        }
    })?;
    if !quiet {
        println!(
            "checkpoint: {}",
            trainer.config().out_dir.join("checkpoint.bin").display()
        );
    }
    Ok(())
}

fn cmd_translate(a: TranslateArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    if a.input.is_dir() {
        create_dir(&a.out)?;
        for path in list_images(&a.input)? {
            let out = model.translate(&load_image(&path)?)?;
            let name = path.file_stem().expect("listed file").to_string_lossy();
            save_image(&out, &a.out.join(format!("{name}.png")))?;
        }
        return Ok(());
    }
    let out = model.translate(&load_image(&a.input)?)?;
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    save_image(&out, &a.out)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = Model::load(&a.checkpoint)?;
    let report = evaluate(&model, &a.scene_dir)?;
    if let Some(dir) = a.report.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    write_json(&a.report, &report)?;
    let text = serde_json::to_string_pretty(&report).expect("plain data");
    println!("{text}");
    eprintln!("note: {}", report.caveat);
    Ok(())
}
