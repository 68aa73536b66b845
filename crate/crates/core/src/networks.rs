//! ResNet-style generator and PatchGAN discriminator.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::color_invariants::{LearnableEnsemble, ENSEMBLE_CHANNELS};
use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor, Var};
use crate::weights::{Bound, ParamSet};

pub const NORM_EPS: f32 = 1e-5;
pub const INIT_STD: f32 = 0.02;
pub const DISC_SLOPE: f32 = 0.2;
pub const DISC_MIN_EXTENT: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// 3 + invariant channels when the learnable invariant is used, else 3.
    pub in_channels: usize,
    pub base_channels: usize,
    pub res_blocks: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            in_channels: 3 + ENSEMBLE_CHANNELS,
            base_channels: 32,
            res_blocks: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig { base_channels: 32 }
    }
}

struct Init<'a> {
    rng: &'a mut ChaCha8Rng,
    set: ParamSet,
}

impl Init<'_> {
    fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize) {
        let normal = Normal::new(0.0f32, INIT_STD).expect("valid std");
        let shape = Shape::new(out_c, in_c, k, k);
        let w: Vec<f32> = (0..shape.numel())
            .map(|_| normal.sample(self.rng))
            .collect();
        self.set.insert(
            format!("{name}.weight"),
            Tensor::new(shape, w).expect("sized"),
        );
        self.set.insert(
            format!("{name}.bias"),
            Tensor::zeros(Shape::new(1, out_c, 1, 1)),
        );
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.set.insert(
            format!("{name}.gamma"),
            Tensor::ones(Shape::new(1, c, 1, 1)),
        );
        self.set.insert(
            format!("{name}.beta"),
            Tensor::zeros(Shape::new(1, c, 1, 1)),
        );
    }
}

fn conv(tape: &Tape, p: &Bound, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.conv2d(x, w, Some(b), stride, pad)
}

/// Instance normalization followed by a learned per-channel affine map.
fn norm(tape: &Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.instance_norm(x, NORM_EPS)?;
    let y = tape.mul(y, p.get(&format!("{name}.gamma"))?)?;
    tape.add(y, p.get(&format!("{name}.beta"))?)
}

fn check_params(params: &ParamSet, expected: &ParamSet, what: &str) -> Result<()> {
    for (name, t) in expected.iter() {
        let got = params
            .get(name)
            .ok_or_else(|| Error::Config(format!("{what} is missing tensor {name:?}")))?;
        if got.shape() != t.shape() {
            return Err(Error::dim("load", "parameter", t.shape(), got.shape()));
        }
    }
    if params.len() != expected.len() {
        return Err(Error::Config(format!(
            "{what} has {} tensors, expected {}",
            params.len(),
            expected.len()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub config: GeneratorConfig,
    pub params: ParamSet,
}

impl Generator {
    pub fn init(config: GeneratorConfig, rng: &mut ChaCha8Rng) -> Self {
        let b = config.base_channels;
        let mut init = Init {
            rng,
            set: ParamSet::new(),
        };
        init.conv("stem", b, config.in_channels, 7);
        init.norm("stem.norm", b);
        init.conv("down1", 2 * b, b, 3);
        init.norm("down1.norm", 2 * b);
        init.conv("down2", 4 * b, 2 * b, 3);
        init.norm("down2.norm", 4 * b);
        for r in 0..config.res_blocks {
            for i in 1..=2 {
                let name = format!("res{r}.conv{i}");
                init.conv(&name, 4 * b, 4 * b, 3);
                init.norm(&format!("{name}.norm"), 4 * b);
            }
        }
        init.conv("up1", 2 * b, 4 * b, 3);
        init.norm("up1.norm", 2 * b);
        init.conv("up2", b, 2 * b, 3);
        init.norm("up2.norm", b);
        init.conv("out", 3, b, 7);
        Generator {
            config,
            params: init.set,
        }
    }

    /// Rebuilds a generator from loaded tensors, checking names and shapes.
    pub fn from_params(config: GeneratorConfig, params: ParamSet) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        check_params(
            &params,
            &Generator::init(config, &mut rng).params,
            "generator",
        )?;
        Ok(Generator { config, params })
    }

    /// Tanh output in (−1, 1). `xi` is required exactly when the generator
    /// expects more than three input channels.
    pub fn forward(&self, tape: &Tape, p: &Bound, rgb: Var, xi: Option<Var>) -> Result<Var> {
        let s = tape.shape(rgb);
        if !s.h().is_multiple_of(4) {
            return Err(Error::dim("generator", "height", "multiple of 4", s.h()));
        }
        if !s.w().is_multiple_of(4) {
            return Err(Error::dim("generator", "width", "multiple of 4", s.w()));
        }
        let input = match xi {
            Some(xi) => tape.concat(&[rgb, xi])?,
            None => rgb,
        };
        let c = tape.shape(input).c();
        if c != self.config.in_channels {
            return Err(Error::dim(
                "generator",
                "channel",
                self.config.in_channels,
                c,
            ));
        }
        let block = |name: &str, x: Var, stride: usize, pad: usize| -> Result<Var> {
            let y = conv(tape, p, name, x, stride, pad)?;
            Ok(tape.relu(norm(tape, p, &format!("{name}.norm"), y)?))
        };
        let mut x = block("stem", input, 1, 3)?;
        x = block("down1", x, 2, 1)?;
        x = block("down2", x, 2, 1)?;
        for r in 0..self.config.res_blocks {
            let h = block(&format!("res{r}.conv1"), x, 1, 1)?;
            let name = format!("res{r}.conv2");
            let h = norm(
                tape,
                p,
                &format!("{name}.norm"),
                conv(tape, p, &name, h, 1, 1)?,
            )?;
            x = tape.add(x, h)?;
        }
        x = block("up1", tape.up2(x), 1, 1)?;
        x = block("up2", tape.up2(x), 1, 1)?;
        Ok(tape.tanh(conv(tape, p, "out", x, 1, 3)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub config: DiscriminatorConfig,
    pub params: ParamSet,
}

impl Discriminator {
    pub fn init(config: DiscriminatorConfig, rng: &mut ChaCha8Rng) -> Self {
        let b = config.base_channels;
        let mut init = Init {
            rng,
            set: ParamSet::new(),
        };
        init.conv("conv1", b, 3, 4);
        init.conv("conv2", 2 * b, b, 4);
        init.norm("conv2.norm", 2 * b);
        init.conv("conv3", 4 * b, 2 * b, 4);
        init.norm("conv3.norm", 4 * b);
        init.conv("conv4", 1, 4 * b, 4);
        Discriminator {
            config,
            params: init.set,
        }
    }

    pub fn from_params(config: DiscriminatorConfig, params: ParamSet) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        check_params(
            &params,
            &Discriminator::init(config, &mut rng).params,
            "discriminator",
        )?;
        Ok(Discriminator { config, params })
    }

    /// Patch logits (B,1,H/16,W/16).
    pub fn forward(&self, tape: &Tape, p: &Bound, image: Var) -> Result<Var> {
        let s = tape.shape(image);
        if s.h() < DISC_MIN_EXTENT {
            return Err(Error::dim(
                "discriminator",
                "height",
                format!(">= {DISC_MIN_EXTENT}"),
                s.h(),
            ));
        }
        if s.w() < DISC_MIN_EXTENT {
            return Err(Error::dim(
                "discriminator",
                "width",
                format!(">= {DISC_MIN_EXTENT}"),
                s.w(),
            ));
        }
        let mut x = tape.leaky_relu(conv(tape, p, "conv1", image, 2, 1)?, DISC_SLOPE);
        for name in ["conv2", "conv3"] {
            let y = conv(tape, p, name, x, 2, 1)?;
            x = tape.leaky_relu(norm(tape, p, &format!("{name}.norm"), y)?, DISC_SLOPE);
        }
        conv(tape, p, "conv4", x, 2, 1)
    }
}

impl LearnableEnsemble {
    pub fn to_params(&self) -> ParamSet {
        let mut set = ParamSet::new();
        set.insert("weight", self.weight.clone());
        set.insert("bias", self.bias.clone());
        set
    }

    pub fn from_params(params: &ParamSet) -> Result<Self> {
        let default = LearnableEnsemble::default();
        check_params(params, &default.to_params(), "invariant ensemble")?;
        Ok(LearnableEnsemble {
            weight: params.require("weight")?.clone(),
            bias: params.require("bias")?.clone(),
        })
    }
}

/// Seeded initial networks. The generator and discriminator draw from
/// separate streams of the same seed.
pub fn init_networks(
    seed: u64,
    gen: GeneratorConfig,
    disc: DiscriminatorConfig,
) -> (Generator, Discriminator, LearnableEnsemble) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let g = Generator::init(gen, &mut rng);
    rng.set_stream(2);
    rng.set_word_pos(0);
    let d = Discriminator::init(disc, &mut rng);
    (g, d, LearnableEnsemble::default())
}

/// Maps a tanh output to image range: (x + 1) / 2.
pub fn to_unit_range(tape: &Tape, x: Var) -> Var {
    tape.scale(tape.add_scalar(x, 1.0), 0.5)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{random_tensor, GradCheck};

    fn nets(seed: u64) -> (Generator, Discriminator, LearnableEnsemble) {
        init_networks(
            seed,
            GeneratorConfig::default(),
            DiscriminatorConfig::default(),
        )
    }

    #[test]
    fn generator_shape_and_range() {
        let (g, _, _) = nets(0);
        let t = Tape::new();
        let p = g.params.bind(&t, false);
        let rgb = t.constant(random_tensor(Shape::new(1, 3, 64, 64), 1, 0.0, 1.0, 0.0));
        let xi = t.constant(random_tensor(Shape::new(1, 3, 64, 64), 2, -1.0, 1.0, 0.0));
        let out = t.value(g.forward(&t, &p, rgb, Some(xi)).unwrap());
        assert_eq!(out.shape(), Shape::new(1, 3, 64, 64));
        assert!(out.data().iter().all(|&v| v > -1.0 && v < 1.0));
    }

    #[test]
    fn generator_rejects_bad_extent_and_channels() {
        let (g, _, _) = nets(0);
        let t = Tape::new();
        let p = g.params.bind(&t, false);
        let rgb = t.constant(Tensor::zeros(Shape::new(1, 3, 18, 16)));
        let xi = t.constant(Tensor::zeros(Shape::new(1, 3, 18, 16)));
        assert!(matches!(
            g.forward(&t, &p, rgb, Some(xi)),
            Err(Error::Dimension { axis: "height", .. })
        ));
        let rgb = t.constant(Tensor::zeros(Shape::new(1, 3, 16, 16)));
        assert!(matches!(
            g.forward(&t, &p, rgb, None),
            Err(Error::Dimension {
                axis: "channel",
                ..
            })
        ));
    }

    #[test]
    fn zeroed_residual_block_is_identity() {
        let (mut g, _, _) = nets(3);
        g.config.res_blocks = 1;
        let keep: Vec<(String, Tensor)> = g
            .params
            .iter()
            .filter(|(n, _)| !n.starts_with("res") || n.starts_with("res0"))
            .map(|(n, t)| {
                let zero = n.starts_with("res0") && (n.ends_with("weight") || n.ends_with("bias"));
                let t = if zero {
                    Tensor::zeros(t.shape())
                } else {
                    t.clone()
                };
                (n.to_string(), t)
            })
            .collect();
        let mut set = ParamSet::new();
        for (n, t) in keep {
            set.insert(n, t);
        }
        let t = Tape::new();
        let p = set.bind(&t, false);
        let x = t.constant(random_tensor(Shape::new(1, 128, 4, 4), 4, -1.0, 1.0, 0.0));
        let h = t.relu(
            norm(
                &t,
                &p,
                "res0.conv1.norm",
                conv(&t, &p, "res0.conv1", x, 1, 1).unwrap(),
            )
            .unwrap(),
        );
        let h = norm(
            &t,
            &p,
            "res0.conv2.norm",
            conv(&t, &p, "res0.conv2", h, 1, 1).unwrap(),
        )
        .unwrap();
        let out = t.add(x, h).unwrap();
        assert_eq!(t.value(out), t.value(x));
    }

    #[test]
    fn discriminator_patch_map() {
        let (_, d, _) = nets(0);
        let t = Tape::new();
        let p = d.params.bind(&t, false);
        let img = random_tensor(Shape::new(1, 3, 64, 64), 5, 0.0, 1.0, 0.0);
        let a = t.value(d.forward(&t, &p, t.constant(img.clone())).unwrap());
        let b = t.value(d.forward(&t, &p, t.constant(img)).unwrap());
        assert_eq!(a.shape(), Shape::new(1, 1, 4, 4));
        assert_eq!(a, b);
        let small = t.constant(Tensor::zeros(Shape::new(1, 3, 16, 64)));
        assert!(matches!(
            d.forward(&t, &p, small),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn discriminator_input_gradient() {
        let (_, d, _) = nets(1);
        let img = random_tensor(Shape::new(1, 3, 32, 32), 7, 0.0, 1.0, 0.0);
        // Leaky relus put some unit on a kink for most probes, and f32 roundoff
        // rules out small steps, so use a wide step and drop kink-crossing probes.
        let check = GradCheck {
            h: 1e-2,
            max_coords: 200,
            skip_kinks: true,
            ..GradCheck::default()
        };
        let (err, used) = check
            .coordinates_counted(&[img], |t, v| {
                let p = d.params.bind(t, false);
                d.forward(t, &p, v[0])
            })
            .unwrap();
        assert!(used >= 40, "only {used} usable probes");
        assert!(err < 1e-3, "relative error {err}");
    }

    #[test]
    fn init_is_seeded_with_gan_std() {
        let (g1, d1, l1) = nets(9);
        let (g2, d2, l2) = nets(9);
        assert_eq!((&g1, &d1, &l1), (&g2, &d2, &l2));
        let (g3, d3, _) = nets(10);
        assert_ne!(g1, g3);
        assert_ne!(d1, d3);
        assert_ne!(g1.params.get("stem.weight"), d1.params.get("conv1.weight"));
        let w: Vec<f64> = g1
            .params
            .iter()
            .filter(|(n, _)| n.ends_with("weight"))
            .flat_map(|(_, t)| t.data().iter().map(|&v| v as f64))
            .collect();
        assert!(w.len() >= 10_000);
        let m = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - m).powi(2)).sum::<f64>() / w.len() as f64).sqrt();
        assert!((0.015..=0.025).contains(&sd), "std {sd}");
        assert!(g1
            .params
            .iter()
            .filter(|(n, _)| n.ends_with("bias") || n.ends_with("beta"))
            .all(|(_, t)| t.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn from_params_validates() {
        let (g, d, l) = nets(0);
        assert!(Generator::from_params(g.config, g.params.clone()).is_ok());
        assert!(Discriminator::from_params(d.config, d.params.clone()).is_ok());
        assert_eq!(LearnableEnsemble::from_params(&l.to_params()).unwrap(), l);
        let mut bad = g.params.clone();
        bad.insert("stem.weight", Tensor::zeros(Shape::new(1, 1, 1, 1)));
        assert!(Generator::from_params(g.config, bad).is_err());
        assert!(Generator::from_params(g.config, d.params).is_err());
    }

    #[test]
    fn instance_norm_statistics() {
        let (g, _, _) = nets(0);
        let t = Tape::new();
        let p = g.params.bind(&t, false);
        let x = t.constant(random_tensor(Shape::new(2, 32, 8, 8), 7, -3.0, 5.0, 0.0));
        let y = t.value(norm(&t, &p, "stem.norm", x).unwrap());
        for b in 0..2 {
            for c in 0..32 {
                let pl = y.plane(b, c);
                let m = pl.iter().map(|&v| v as f64).sum::<f64>() / 64.0;
                let sd = (pl.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 64.0).sqrt();
                assert!(
                    m.abs() < 1e-4 && (sd - 1.0).abs() < 1e-3,
                    "mean {m} std {sd}"
                );
            }
        }
    }
}
