//! Training loop, checkpoints, inference and evaluation.
//!
//! One iteration is a generator step followed by a discriminator step on the
//! detached generator output. Batches depend only on (seed, iteration), and
//! every kernel reduces in a fixed order, so a run is a pure function of its
//! configuration, and resuming from a checkpoint continues the same stream.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::color_invariants::{
    invariants, lci_forward, LearnableEnsemble, DEFAULT_EPSILON, DEFAULT_SIGMA, ENSEMBLE_CHANNELS,
};
use crate::data::{load_mask, sample_batch, save_image, SceneDataset, SceneImages};
use crate::disentangle::{
    broadcast_batch, default_negatives, disentangle, elesim_on_tape, hard_negative_select,
    to_mask_on_tape, MaskParams,
};
use crate::error::{Error, Result};
use crate::eval::{
    fit_gaussian, frechet_distance, mask_metrics, resize_nearest, EvalReport, FRECHET_CAVEAT,
};
use crate::feature_extractor::{FeatureExtractor, FeaturePyramid, PyramidSpec, PyramidVars};
use crate::losses::{
    adv_d_on_tape, adv_g_on_tape, l_back_on_tape, l_fore_on_tape, total_g_on_tape, totals,
    LossParts, LossReport, LossWeights, DEFAULT_TAU,
};
use crate::networks::{
    init_networks, to_unit_range, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig,
};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Shape, Tape, Tensor};
use crate::weights::ParamSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: u64,
    pub batch_size: usize,
    pub lr_g: f32,
    pub lr_d: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub weights: LossWeights,
    pub tau: f32,
    pub sigma: f32,
    pub eps_inv: f32,
    pub mask: MaskParams,
    pub stages: Vec<String>,
    /// Locations scored by L_fore per stage; `None` uses `default_negatives`.
    pub negatives: Option<usize>,
    pub image_size: usize,
    pub use_lci: bool,
    pub use_l_fore: bool,
    pub use_l_back: bool,
    pub extractor: PyramidSpec,
    /// `in_channels` is derived from `use_lci` and ignored here.
    pub generator: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub data_root: PathBuf,
    pub out_dir: PathBuf,
    pub log_every: u64,
    /// Sample grid cadence in iterations; 0 disables.
    pub sample_every: u64,
    /// Intermediate checkpoint cadence; 0 keeps only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        TrainConfig {
            seed: 0,
            iterations: 200,
            batch_size: 1,
            lr_g: adam.lr,
            lr_d: adam.lr,
            beta1: adam.beta1,
            beta2: adam.beta2,
            adam_eps: adam.eps,
            weights: LossWeights::default(),
            tau: DEFAULT_TAU,
            sigma: DEFAULT_SIGMA,
            eps_inv: DEFAULT_EPSILON,
            mask: MaskParams::default(),
            stages: vec!["stage3".into(), "stage4".into()],
            negatives: None,
            image_size: 64,
            use_lci: true,
            use_l_fore: true,
            use_l_back: true,
            extractor: PyramidSpec::standard(0),
            generator: GeneratorConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            data_root: PathBuf::from("scene"),
            out_dir: PathBuf::from("runs/dico"),
            log_every: 10,
            sample_every: 100,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr_g", self.lr_g),
            ("lr_d", self.lr_d),
            ("adam_eps", self.adam_eps),
            ("tau", self.tau),
            ("sigma", self.sigma),
            ("eps_inv", self.eps_inv),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::Config(format!("{name} must lie in [0, 1), got {b}")));
            }
        }
        for (name, w) in [
            ("adv", self.weights.adv),
            ("back", self.weights.back),
            ("fore", self.weights.fore),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weight {name} must be non-negative, got {w}"
                )));
            }
        }
        self.mask.validate()?;
        self.extractor.validate()?;
        let unit = 4usize.max(1 << self.extractor.downsamples());
        if self.image_size == 0 || !self.image_size.is_multiple_of(unit) {
            return Err(Error::Config(format!(
                "image_size {} must be a positive multiple of {unit}",
                self.image_size
            )));
        }
        if self.stages.is_empty() {
            return Err(Error::Config(
                "at least one EleSim stage is required".into(),
            ));
        }
        let known = self.extractor.stage_names();
        for s in &self.stages {
            if !known.contains(s) {
                return Err(Error::Config(format!(
                    "unknown stage {s:?}; extractor has {known:?}"
                )));
            }
        }
        if self.negatives == Some(0) {
            return Err(Error::Config("negatives must be positive".into()));
        }
        Ok(())
    }

    /// Generator layout implied by the LCI toggle.
    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            in_channels: 3 + if self.use_lci { ENSEMBLE_CHANNELS } else { 0 },
            ..self.generator
        }
    }

    /// Loss weights with disabled terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        LossWeights {
            adv: self.weights.adv,
            back: if self.use_l_back {
                self.weights.back
            } else {
                0.0
            },
            fore: if self.use_l_fore {
                self.weights.fore
            } else {
                0.0
            },
        }
    }

    fn adam(&self, lr: f32) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Trainable state: generator, discriminator and the invariant mixture Λ.
#[derive(Clone, Debug, PartialEq)]
pub struct Networks {
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub lci: ParamSet,
}

impl Networks {
    pub fn init(config: &TrainConfig) -> Self {
        let (generator, discriminator, lci) =
            init_networks(config.seed, config.generator_config(), config.discriminator);
        Networks {
            generator,
            discriminator,
            lci: lci.to_params(),
        }
    }

    pub fn ensemble(&self) -> Result<LearnableEnsemble> {
        LearnableEnsemble::from_params(&self.lci)
    }

    fn to_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        set.extend_prefixed("gen.", &self.generator.params);
        set.extend_prefixed("disc.", &self.discriminator.params);
        set.extend_prefixed("lci.", &self.lci);
        set
    }

    fn from_params(config: &TrainConfig, set: &ParamSet) -> Result<Self> {
        let generator =
            Generator::from_params(config.generator_config(), set.strip_prefix("gen."))?;
        let discriminator =
            Discriminator::from_params(config.discriminator, set.strip_prefix("disc."))?;
        let lci = set.strip_prefix("lci.");
        LearnableEnsemble::from_params(&lci)?;
        Ok(Networks {
            generator,
            discriminator,
            lci,
        })
    }
}

/// JSON sidecar stored next to a checkpoint's weight file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    /// Completed iterations.
    pub step: u64,
    pub adam_steps: BTreeMap<String, u64>,
}

pub fn sidecar_path(weights: &Path) -> PathBuf {
    weights.with_extension("json")
}

fn read_checkpoint(path: &Path) -> Result<(CheckpointMeta, ParamSet)> {
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&text).map_err(|source| Error::Json { path: side, source })?;
    Ok((meta, ParamSet::load(path)?))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// First batch item of the tensors a step produced, for sample grids.
#[derive(Clone, Debug)]
pub struct StepImages {
    pub night: Tensor,
    pub xi: Option<Tensor>,
    /// Mask of the deepest configured stage.
    pub mask: Tensor,
    pub output: Tensor,
}

pub struct Trainer {
    config: TrainConfig,
    extractor: FeatureExtractor,
    scene: SceneImages,
    /// Φ of every night frame; empty without LCI.
    phi: Vec<Tensor>,
    reference: FeaturePyramid,
    nets: Networks,
    opt_gen: Adam,
    opt_lci: Adam,
    opt_disc: Adam,
    step: u64,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let scene = SceneDataset::open(&config.data_root)?.load(true)?;
        let nets = Networks::init(&config);
        Self::assemble(config, scene, nets, None)
    }

    /// Continues from a checkpoint. The checkpoint's own configuration must
    /// agree with `config` on everything but iteration count and paths.
    pub fn resume(config: TrainConfig, checkpoint: &Path) -> Result<Self> {
        config.validate()?;
        let (meta, set) = read_checkpoint(checkpoint)?;
        let strip = |c: &TrainConfig| TrainConfig {
            iterations: 1,
            data_root: PathBuf::new(),
            out_dir: PathBuf::new(),
            log_every: 0,
            sample_every: 0,
            checkpoint_every: 0,
            ..c.clone()
        };
        if strip(&meta.config) != strip(&config) {
            return Err(Error::Config(format!(
                "checkpoint {} was trained with a different configuration",
                checkpoint.display()
            )));
        }
        let scene = SceneDataset::open(&config.data_root)?.load(true)?;
        let nets = Networks::from_params(&config, &set)?;
        Self::assemble(config, scene, nets, Some((meta, set)))
    }

    fn assemble(
        config: TrainConfig,
        scene: SceneImages,
        nets: Networks,
        restore: Option<(CheckpointMeta, ParamSet)>,
    ) -> Result<Self> {
        let s = scene.reference.shape();
        if s.h() != config.image_size || s.w() != config.image_size {
            return Err(Error::dim(
                "trainer",
                "extent",
                format!("{0}x{0}", config.image_size),
                format!("{}x{}", s.h(), s.w()),
            ));
        }
        let extractor = FeatureExtractor::new(config.extractor.clone())?;
        let reference = extractor.extract(&scene.reference)?;
        let phi = if config.use_lci {
            scene
                .night
                .iter()
                .map(|x| invariants(x, config.sigma, config.eps_inv))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let (g, d) = (config.adam(config.lr_g), config.adam(config.lr_d));
        let (opt_gen, opt_lci, opt_disc, step) = match restore {
            None => (
                Adam::new(g, &nets.generator.params),
                Adam::new(g, &nets.lci),
                Adam::new(d, &nets.discriminator.params),
                0,
            ),
            Some((meta, set)) => {
                let n = |k: &str| meta.adam_steps.get(k).copied().unwrap_or(0);
                (
                    Adam::import(g, n("gen"), &nets.generator.params, "opt.gen.", &set)?,
                    Adam::import(g, n("lci"), &nets.lci, "opt.lci.", &set)?,
                    Adam::import(d, n("disc"), &nets.discriminator.params, "opt.disc.", &set)?,
                    meta.step,
                )
            }
        };
        Ok(Trainer {
            config,
            extractor,
            scene,
            phi,
            reference,
            nets,
            opt_gen,
            opt_lci,
            opt_disc,
            step,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn networks(&self) -> &Networks {
        &self.nets
    }

    /// Completed iterations.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> Model {
        Model {
            config: self.config.clone(),
            nets: self.nets.clone(),
        }
    }

    /// One generator update followed by one discriminator update.
    pub fn train_step(&mut self) -> Result<(LossReport, StepImages)> {
        let cfg = &self.config;
        let it = self.step + 1;
        let b = cfg.batch_size;
        let idx = sample_batch(
            cfg.seed,
            it,
            b,
            self.scene.night.len(),
            self.scene.day.len(),
        );
        let pick = |set: &[Tensor], ids: &[usize]| {
            Tensor::stack(&ids.iter().map(|&i| set[i].clone()).collect::<Vec<_>>())
        };
        let night = pick(&self.scene.night, &idx.night)?;
        let day = pick(&self.scene.day, &idx.day)?;
        let w = cfg.effective_weights();
        let abort = |e: Error| match e {
            Error::NonFinite { term, .. } => Error::NonFinite {
                term,
                iteration: it,
            },
            e => e,
        };

        // Generator step. The discriminator enters as constants.
        let tape = Tape::new();
        let gen_p = self.nets.generator.params.bind(&tape, true);
        let lci_p = self.nets.lci.bind(&tape, cfg.use_lci);
        let disc_c = self.nets.discriminator.params.bind(&tape, false);
        let x = tape.constant(night.clone());
        let xi = if cfg.use_lci {
            let phi = tape.constant(pick(&self.phi, &idx.night)?);
            Some(lci_forward(
                &tape,
                phi,
                lci_p.get("weight")?,
                lci_p.get("bias")?,
            )?)
        } else {
            None
        };
        let out = to_unit_range(&tape, self.nets.generator.forward(&tape, &gen_p, x, xi)?);
        let gen_pyr = self.extractor.extract_on_tape(&tape, out, false)?;
        let mut ref_vars = Vec::with_capacity(cfg.stages.len());
        let mut masks = Vec::with_capacity(cfg.stages.len());
        for stage in &cfg.stages {
            let r = self
                .reference
                .get(stage)
                .ok_or_else(|| Error::Config(format!("no reference for {stage:?}")))?;
            let r = tape.constant(broadcast_batch(r, b)?);
            let scores = elesim_on_tape(&tape, gen_pyr.get(stage)?, r)?;
            masks.push((
                stage.clone(),
                to_mask_on_tape(&tape, scores, cfg.mask.gamma, cfg.mask.s0)?,
            ));
            ref_vars.push((stage.clone(), r));
        }
        let zero = || tape.constant(Tensor::scalar(0.0));
        let (back, back_stages) = if cfg.use_l_back {
            let l = l_back_on_tape(&tape, &gen_pyr, &PyramidVars { stages: ref_vars }, &masks)?;
            (l.total, l.per_stage)
        } else {
            (zero(), Vec::new())
        };
        let (fore, fore_stages, fore_empty) = if cfg.use_l_fore {
            let night_pyr = self.extractor.extract_on_tape(&tape, x, true)?;
            let mut locations = Vec::with_capacity(masks.len());
            for (stage, m) in &masks {
                let mv = tape.value(*m);
                let k = cfg
                    .negatives
                    .unwrap_or_else(|| default_negatives(mv.shape().h(), mv.shape().w()));
                locations.push((stage.clone(), hard_negative_select(&mv, k)?));
            }
            let l = l_fore_on_tape(&tape, &gen_pyr, &night_pyr, &masks, &locations, cfg.tau)?;
            (l.total, l.per_stage, l.empty)
        } else {
            (zero(), Vec::new(), false)
        };
        let d_fake = self.nets.discriminator.forward(&tape, &disc_c, out)?;
        let adv = adv_g_on_tape(&tape, d_fake)?;
        let total = total_g_on_tape(&tape, adv, back, fore, w)?;
        let mut parts = LossParts {
            l_back: tape.value(back).item(),
            l_fore: tape.value(fore).item(),
            l_adv_g: tape.value(adv).item(),
            l_adv_d: 0.0,
        };
        totals(parts, w, it)?;
        let grads = tape.backward(total)?;
        let g_gen = gen_p.grads(&grads);
        let g_lci = lci_p.grads(&grads);
        let fake = tape.value(out);
        let images = StepImages {
            night: night.batch_item(0),
            xi: xi.map(|v| tape.value(v).batch_item(0)),
            mask: tape
                .value(masks.last().expect("stages validated").1)
                .batch_item(0),
            output: fake.batch_item(0),
        };
        let per_stage = |v: Vec<(String, crate::tensor::Var)>| -> Vec<(String, f32)> {
            v.into_iter()
                .map(|(n, s)| (n, tape.value(s).item()))
                .collect()
        };
        let back_per_stage = per_stage(back_stages);
        let fore_per_stage = per_stage(fore_stages);
        drop(gen_p);
        drop(lci_p);
        drop(disc_c);
        self.opt_gen
            .update(&mut self.nets.generator.params, &g_gen)
            .map_err(abort)?;
        if cfg.use_lci {
            self.opt_lci
                .update(&mut self.nets.lci, &g_lci)
                .map_err(abort)?;
        }

        // Discriminator step on the detached fake.
        let tape = Tape::new();
        let disc_p = self.nets.discriminator.params.bind(&tape, true);
        let d_real = self
            .nets
            .discriminator
            .forward(&tape, &disc_p, tape.constant(day))?;
        let d_fake = self
            .nets
            .discriminator
            .forward(&tape, &disc_p, tape.constant(fake))?;
        let ld = adv_d_on_tape(&tape, d_real, d_fake)?;
        parts.l_adv_d = tape.value(ld).item();
        let (total_g, total_d) = totals(parts, w, it)?;
        let g_disc = disc_p.grads(&tape.backward(ld)?);
        drop(disc_p);
        self.opt_disc
            .update(&mut self.nets.discriminator.params, &g_disc)
            .map_err(abort)?;

        self.step = it;
        let report = LossReport {
            iter: it,
            l_back: parts.l_back,
            l_fore: parts.l_fore,
            l_adv_g: parts.l_adv_g,
            l_adv_d: parts.l_adv_d,
            total_g,
            total_d,
            back_per_stage,
            fore_per_stage,
            weights: w,
            tau: self.config.tau,
            fore_empty,
        };
        Ok((report, images))
    }

    /// Writes the weight file and its JSON sidecar.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
        let mut set = self.nets.to_params();
        self.opt_gen
            .export(&self.nets.generator.params, "opt.gen.", &mut set);
        self.opt_lci.export(&self.nets.lci, "opt.lci.", &mut set);
        self.opt_disc
            .export(&self.nets.discriminator.params, "opt.disc.", &mut set);
        set.save(path)?;
        let meta = CheckpointMeta {
            config: self.config.clone(),
            step: self.step,
            adam_steps: BTreeMap::from([
                ("gen".to_string(), self.opt_gen.step),
                ("lci".to_string(), self.opt_lci.step),
                ("disc".to_string(), self.opt_disc.step),
            ]),
        };
        write_json(&sidecar_path(path), &meta)
    }

    /// Runs until `config.iterations`, writing the loss CSV, sample grids and
    /// checkpoints under `config.out_dir`. `on_report` sees every iteration.
    pub fn run(&mut self, mut on_report: impl FnMut(&LossReport)) -> Result<()> {
        let out = self.config.out_dir.clone();
        create_dir(&out)?;
        write_json(&out.join("config.json"), &self.config)?;
        let csv_path = out.join("losses.csv");
        let mut csv = open_csv(&csv_path, self.step)?;
        while self.step < self.config.iterations {
            let (report, images) = self.train_step()?;
            writeln!(csv, "{}", report.csv_row()).map_err(|e| Error::io(&csv_path, e))?;
            csv.flush().map_err(|e| Error::io(&csv_path, e))?;
            on_report(&report);
            let it = report.iter;
            if self.config.sample_every > 0 && it % self.config.sample_every == 0 {
                let path = out.join("samples").join(format!("iter_{it:06}.png"));
                create_dir(path.parent().expect("joined"))?;
                save_image(&sample_grid(&images, &self.reference_image())?, &path)?;
            }
            if self.config.checkpoint_every > 0 && it % self.config.checkpoint_every == 0 {
                self.save_checkpoint(&out.join("checkpoints").join(format!("iter_{it:06}.bin")))?;
            }
        }
        self.save_checkpoint(&out.join("checkpoint.bin"))
    }

    fn reference_image(&self) -> Tensor {
        self.scene.reference.clone()
    }
}

/// Opens the loss CSV for appending after `step` completed iterations. Rows
/// beyond `step` (from an interrupted run) are dropped.
fn open_csv(path: &Path, step: u64) -> Result<fs::File> {
    let mut text = format!("{}\n", LossReport::CSV_HEADER);
    if step > 0 {
        if let Ok(old) = fs::read_to_string(path) {
            for line in old.lines().skip(1) {
                let iter = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if iter.is_some_and(|i| i <= step) {
                    text.push_str(line);
                    text.push('\n');
                }
            }
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))?;
    fs::OpenOptions::new()
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))
}

/// Per-channel min-max stretch to [0, 1]; constant channels map to 0.5.
fn stretch(t: &Tensor) -> Tensor {
    let s = t.shape();
    let mut data = Vec::with_capacity(t.len());
    for n in 0..s.n() {
        for c in 0..s.c() {
            let p = t.plane(n, c);
            let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let span = hi - lo;
            data.extend(
                p.iter()
                    .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.5 }),
            );
        }
    }
    Tensor::new(s, data).expect("same shape")
}

fn to_rgb(t: &Tensor) -> Tensor {
    let s = t.shape();
    if s.c() == 3 {
        return t.clone();
    }
    Tensor::from_fn(Shape::new(s.n(), 3, s.h(), s.w()), |[n, _, y, x]| {
        t.get([n, 0, y, x])
    })
}

/// Panels side by side: night | ξ | mask | output | reference.
pub fn sample_grid(images: &StepImages, reference: &Tensor) -> Result<Tensor> {
    let s = images.night.shape();
    let (h, w) = (s.h(), s.w());
    let xi = match &images.xi {
        Some(xi) => stretch(xi),
        None => Tensor::full(Shape::new(1, 3, h, w), 0.5),
    };
    let panels = [
        images.night.clone(),
        to_rgb(&xi),
        to_rgb(&resize_nearest(&images.mask, h, w)),
        images.output.clone(),
        reference.clone(),
    ];
    for p in &panels {
        if p.shape() != Shape::new(1, 3, h, w) {
            return Err(Error::dim(
                "sample_grid",
                "panel",
                Shape::new(1, 3, h, w),
                p.shape(),
            ));
        }
    }
    let cols = panels.len();
    Ok(Tensor::from_fn(
        Shape::new(1, 3, h, w * cols),
        |[_, c, y, x]| panels[x / w].get([0, c, y, x % w]).clamp(0.0, 1.0),
    ))
}

/// Trained networks plus the configuration that produced them.
#[derive(Clone, Debug)]
pub struct Model {
    pub config: TrainConfig,
    pub nets: Networks,
}

impl Model {
    /// Untrained networks for `config`, as at iteration 0.
    pub fn init(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let nets = Networks::init(&config);
        Ok(Model { config, nets })
    }

    pub fn load(checkpoint: &Path) -> Result<Self> {
        let (meta, set) = read_checkpoint(checkpoint)?;
        let nets = Networks::from_params(&meta.config, &set)?;
        Ok(Model {
            config: meta.config,
            nets,
        })
    }

    /// Night image(s) (B,3,H,W) in [0,1] to day, same shape, in [0,1].
    pub fn translate(&self, night: &Tensor) -> Result<Tensor> {
        let s = night.shape();
        if s.c() != 3 {
            return Err(Error::dim("translate", "channel", 3, s.c()));
        }
        let tape = Tape::new();
        let p = self.nets.generator.params.bind(&tape, false);
        let xi = if self.config.use_lci {
            let phi = invariants(night, self.config.sigma, self.config.eps_inv)?;
            let lci = self.nets.ensemble()?;
            Some(lci_forward(
                &tape,
                tape.constant(phi),
                tape.constant(lci.weight),
                tape.constant(lci.bias),
            )?)
        } else {
            None
        };
        let raw = self
            .nets
            .generator
            .forward(&tape, &p, tape.constant(night.clone()), xi)?;
        Ok(tape.value(to_unit_range(&tape, raw)))
    }
}

fn deepest_stage(spec: &PyramidSpec) -> Result<String> {
    spec.stage_names()
        .pop()
        .ok_or_else(|| Error::Config("extractor has no stages".into()))
}

/// Ground-truth foreground masks for every night frame, if the scene has them
/// under `masks/` with the frame's file name.
fn night_truth(dataset: &SceneDataset) -> Result<Option<Vec<Tensor>>> {
    let dir = dataset.root.join("masks");
    let paths: Vec<PathBuf> = dataset
        .night
        .iter()
        .map(|p| dir.join(p.file_name().expect("listed file")))
        .collect();
    if !paths.iter().all(|p| p.is_file()) {
        return Ok(None);
    }
    paths
        .iter()
        .map(|p| load_mask(p))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn background_l1(images: &[Tensor], reference: &Tensor, truth: &[Tensor]) -> f64 {
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (img, t) in images.iter().zip(truth) {
        let s = img.shape();
        for c in 0..3 {
            for y in 0..s.h() {
                for x in 0..s.w() {
                    if t.get([0, 0, y, x]) <= 0.5 {
                        sum += (img.get([0, c, y, x]) - reference.get([0, c, y, x])).abs() as f64;
                        n += 1;
                    }
                }
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Scores `model` on a scene: feature-Fréchet distance of translated night
/// frames to day frames before (untrained networks of the same seed) and
/// after training, plus mask and background metrics where truth masks exist.
pub fn evaluate(model: &Model, scene_dir: &Path) -> Result<EvalReport> {
    let dataset = SceneDataset::open(scene_dir)?;
    let scene = dataset.load(true)?;
    let cfg = &model.config;
    let extractor = FeatureExtractor::new(cfg.extractor.clone())?;
    let stage = deepest_stage(&cfg.extractor)?;
    let untrained = Model::init(cfg.clone())?;
    let translate_all = |m: &Model| {
        scene
            .night
            .iter()
            .map(|x| m.translate(x))
            .collect::<Result<Vec<_>>>()
    };
    let before = translate_all(&untrained)?;
    let after = translate_all(model)?;
    let day = fit_gaussian(&scene.day, &extractor, &stage)?;
    let frechet_before = frechet_distance(&fit_gaussian(&before, &extractor, &stage)?, &day)?;
    let frechet_after = frechet_distance(&fit_gaussian(&after, &extractor, &stage)?, &day)?;

    let mut report = EvalReport {
        frechet_before,
        frechet_after,
        mask_iou_per_stage: BTreeMap::new(),
        separation_per_stage: BTreeMap::new(),
        background_l1_translated: None,
        background_l1_night: None,
        caveat: FRECHET_CAVEAT.to_string(),
    };
    if let Some(truth) = night_truth(&dataset)? {
        let reference = extractor.extract(&scene.reference)?;
        let batch = Tensor::stack(&after)?;
        let (_, masks) = disentangle(&extractor, &batch, &reference, &cfg.stages, cfg.mask)?;
        let truth_batch = Tensor::stack(&truth)?;
        for (stage, m) in &masks.masks {
            let metrics = mask_metrics(m, &truth_batch, cfg.mask.threshold)?;
            report.mask_iou_per_stage.insert(stage.clone(), metrics.iou);
            report
                .separation_per_stage
                .insert(stage.clone(), metrics.separation);
        }
        report.background_l1_translated = Some(background_l1(&after, &scene.reference, &truth));
        report.background_l1_night = Some(background_l1(&scene.night, &scene.reference, &truth));
    }
    Ok(report)
}
