//! Frozen multi-scale convolutional feature pyramid.
//!
//! Stands in for an ImageNet-pretrained backbone. The bundled weights are
//! seeded orthogonal kernels; a `DICOW1` weight file can replace them.

use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tape, Tensor, Var};
use crate::weights::ParamSet;

pub const LEAKY_SLOPE: f32 = 0.2;

/// Gain that keeps the second moment of a white input constant through
/// unit-norm kernels followed by a leaky relu with [`LEAKY_SLOPE`].
pub fn leaky_gain() -> f32 {
    (2.0 / (1.0 + LEAKY_SLOPE * LEAKY_SLOPE)).sqrt()
}

fn default_gain() -> f32 {
    leaky_gain()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub convs: usize,
    pub channels: usize,
    /// The first conv of this stage has stride 2.
    pub downsample: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightSource {
    Bundled { seed: u64 },
    File { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidSpec {
    pub stages: Vec<StageSpec>,
    pub weights: WeightSource,
    /// Scalar applied to every conv output before the activation.
    #[serde(default = "default_gain")]
    pub gain: f32,
}

impl PyramidSpec {
    /// Four stages of two 3x3 conv + leaky-relu blocks, channels 16/32/64/64,
    /// halving resolution at the start of stages 2-4.
    pub fn standard(seed: u64) -> Self {
        let stage = |i: usize, channels: usize| StageSpec {
            name: format!("stage{i}"),
            convs: 2,
            channels,
            downsample: i > 1,
        };
        PyramidSpec {
            stages: vec![stage(1, 16), stage(2, 32), stage(3, 64), stage(4, 64)],
            weights: WeightSource::Bundled { seed },
            gain: leaky_gain(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain.is_finite() && self.gain > 0.0) {
            return Err(Error::Config(format!(
                "gain must be positive, got {}",
                self.gain
            )));
        }
        if self.stages.len() < 2 {
            return Err(Error::Config("a pyramid needs at least two stages".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if self.stages[..i].iter().any(|o| o.name == s.name) {
                return Err(Error::Config(format!("duplicate stage name {:?}", s.name)));
            }
            if s.convs == 0 || s.channels == 0 {
                return Err(Error::Config(format!("stage {:?} is empty", s.name)));
            }
        }
        Ok(())
    }

    pub fn downsamples(&self) -> usize {
        self.stages.iter().filter(|s| s.downsample).count()
    }

    pub fn stage_names(&self) -> Vec<String> {
        self.stages.iter().map(|s| s.name.clone()).collect()
    }
}

fn conv_name(stage: &str, i: usize) -> String {
    format!("{stage}.conv{i}")
}

/// Rows of a `rows x cols` matrix with orthonormal rows (blocks of `cols` rows
/// when `rows > cols`), by modified Gram-Schmidt on Gaussian draws whose
/// column `j` is scaled by `scale[j]`.
fn orthogonal_rows(rng: &mut ChaCha8Rng, rows: usize, scale: &[f64]) -> Vec<f32> {
    let cols = scale.len();
    let mut out = Vec::with_capacity(rows * cols);
    let mut block: Vec<Vec<f64>> = Vec::new();
    while out.len() < rows * cols {
        if block.len() == cols {
            block.clear();
        }
        let mut v: Vec<f64> = scale
            .iter()
            .map(|s| {
                let z: f64 = StandardNormal.sample(rng);
                s * z
            })
            .collect();
        for b in &block {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        out.extend(v.iter().map(|&x| x as f32));
        block.push(v);
    }
    out
}

/// Spatial envelope of the kernel draws, exp(-d²/(2·0.35²)) at tap distance d.
/// Centre-heavy kernels keep the effective receptive field of the deep stages
/// close to their stride, so a small object changes the channel profile of
/// the cells it covers instead of being averaged into a 47-pixel footprint.
/// Variance floor of the input standardization.
pub const STANDARDIZE_FLOOR: f32 = 1e-3;

const KERNEL_TAPER: [f64; 9] = {
    const E: f64 = 0.016_879_9; // exp(-1 / 0.245)
    const C: f64 = 0.000_284_9; // exp(-2 / 0.245)
    [C, E, C, E, 1.0, E, C, E, C]
};

/// Deterministic orthogonal weights for `spec`'s stages, 3x3 kernels, zero biases.
/// Every flattened kernel row has unit norm, which preserves the variance of a
/// white input through each linear map.
pub fn bundled_weights(stages: &[StageSpec], seed: u64) -> ParamSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut set = ParamSet::new();
    let mut in_c = 3;
    for s in stages {
        for i in 0..s.convs {
            let scale: Vec<f64> = (0..in_c).flat_map(|_| KERNEL_TAPER).collect();
            let w = orthogonal_rows(&mut rng, s.channels, &scale);
            let name = conv_name(&s.name, i);
            set.insert(
                format!("{name}.weight"),
                Tensor::new(Shape::new(s.channels, in_c, 3, 3), w).expect("sized"),
            );
            set.insert(
                format!("{name}.bias"),
                Tensor::zeros(Shape::new(1, s.channels, 1, 1)),
            );
            in_c = s.channels;
        }
    }
    set
}

/// Named stage activations, in stage order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub stages: Vec<(String, Tensor)>,
}

impl FeaturePyramid {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.stages.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Stage activations recorded on a tape.
#[derive(Clone, Debug)]
pub struct PyramidVars {
    pub stages: Vec<(String, Var)>,
}

impl PyramidVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.stages
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("pyramid has no stage {name:?}")))
    }
}

#[derive(Clone, Debug)]
pub struct FeatureExtractor {
    spec: PyramidSpec,
    weights: ParamSet,
}

impl FeatureExtractor {
    pub fn new(spec: PyramidSpec) -> Result<Self> {
        spec.validate()?;
        let weights = match &spec.weights {
            WeightSource::Bundled { seed } => bundled_weights(&spec.stages, *seed),
            WeightSource::File { path } => ParamSet::load(path)?,
        };
        let ex = FeatureExtractor { spec, weights };
        ex.check_weights()?;
        Ok(ex)
    }

    pub fn standard(seed: u64) -> Self {
        Self::new(PyramidSpec::standard(seed)).expect("standard spec is valid")
    }

    fn check_weights(&self) -> Result<()> {
        let mut in_c = 3;
        for s in &self.spec.stages {
            for i in 0..s.convs {
                let name = conv_name(&s.name, i);
                let w = self.weights.require(&format!("{name}.weight"))?;
                let [o, c, _, _] = w.shape().0;
                if o != s.channels || c != in_c {
                    return Err(Error::dim(
                        "feature_extractor",
                        "channel",
                        format!("({}, {in_c})", s.channels),
                        format!("({o}, {c})"),
                    ));
                }
                self.weights.require(&format!("{name}.bias"))?;
                in_c = s.channels;
            }
        }
        Ok(())
    }

    pub fn spec(&self) -> &PyramidSpec {
        &self.spec
    }

    pub fn weights(&self) -> &ParamSet {
        &self.weights
    }

    pub fn channels(&self, stage: &str) -> Option<usize> {
        self.spec
            .stages
            .iter()
            .find(|s| s.name == stage)
            .map(|s| s.channels)
    }

    /// Records the forward pass on `tape`. Extractor weights enter as constants,
    /// so only the image can receive gradients; `stop_gradient` cuts that too.
    pub fn extract_on_tape(
        &self,
        tape: &Tape,
        image: Var,
        stop_gradient: bool,
    ) -> Result<PyramidVars> {
        let blocks = self.blocks_on_tape(tape, image, stop_gradient)?;
        let mut stages = Vec::with_capacity(self.spec.stages.len());
        let mut end = 0;
        for s in &self.spec.stages {
            end += s.convs;
            stages.push((s.name.clone(), blocks[end - 1]));
        }
        Ok(PyramidVars { stages })
    }

    /// Activation after every conv block, in order.
    fn blocks_on_tape(&self, tape: &Tape, image: Var, stop_gradient: bool) -> Result<Vec<Var>> {
        let shape = tape.shape(image);
        if shape.c() != 3 {
            return Err(Error::dim("extract", "channel", 3, shape.c()));
        }
        let div = 1usize << self.spec.downsamples();
        if !shape.h().is_multiple_of(div) {
            return Err(Error::dim(
                "extract",
                "height",
                format!("multiple of {div}"),
                shape.h(),
            ));
        }
        if !shape.w().is_multiple_of(div) {
            return Err(Error::dim(
                "extract",
                "width",
                format!("multiple of {div}"),
                shape.w(),
            ));
        }
        let x = if stop_gradient {
            tape.detach(image)
        } else {
            image
        };
        // Each image is standardized over all its channels and pixels before
        // the convs. This removes global brightness and contrast, so a dim
        // frame and a bright frame of the same scene get comparable channel
        // profiles, while color ratios survive. The floor keeps flat images finite.
        let mu = tape.spatial_mean(tape.channel_mean(x)?)?;
        let d = tape.sub(x, mu)?;
        let var = tape.spatial_mean(tape.channel_mean(tape.square(d))?)?;
        let mut x = tape.div(d, tape.sqrt(tape.add_scalar(var, STANDARDIZE_FLOOR)))?;
        let mut blocks = Vec::new();
        for s in &self.spec.stages {
            for i in 0..s.convs {
                let name = conv_name(&s.name, i);
                let w = tape.constant(self.weights.require(&format!("{name}.weight"))?.clone());
                let b = tape.constant(self.weights.require(&format!("{name}.bias"))?.clone());
                let stride = if s.downsample && i == 0 { 2 } else { 1 };
                x = tape.conv2d(x, w, Some(b), stride, 1)?;
                x = tape.leaky_relu(tape.scale(x, self.spec.gain), LEAKY_SLOPE);
                blocks.push(x);
            }
        }
        Ok(blocks)
    }

    pub fn extract(&self, image: &Tensor) -> Result<FeaturePyramid> {
        let tape = Tape::new();
        let x = tape.constant(image.clone());
        let vars = self.extract_on_tape(&tape, x, true)?;
        Ok(FeaturePyramid {
            stages: vars
                .stages
                .into_iter()
                .map(|(n, v)| (n, tape.value(v)))
                .collect(),
        })
    }
}
