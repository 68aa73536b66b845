//! Photometric color invariants and their learnable ensemble.
//!
//! RGB is mapped to spectral intensity `E` and its first and second spectral
//! derivatives with a fixed linear model. Each plane is differentiated spatially
//! with Gaussian derivative filters, and five edge invariants are assembled:
//!
//! | channel | invariant to                                              |
//! |---------|-----------------------------------------------------------|
//! | `E`     | nothing (plain spectral edge strength)                    |
//! | `W`     | illumination intensity                                    |
//! | `C`     | scene geometry, illumination intensity                    |
//! | `H`     | scene geometry, Fresnel reflection, illumination intensity|
//! | `N`     | scene geometry, illumination intensity and color          |
//!
//! The learnable ensemble is a 1x1 convolution mixing the five channels.

use crate::error::{Error, Result};
use crate::tensor::{Axis, Parity, Shape, Tape, Tensor, Var};

/// Rows map (R, G, B) to (E, E_λ, E_λλ).
pub const GAUSSIAN_COLOR_MATRIX: [[f32; 3]; 3] =
    [[0.06, 0.63, 0.27], [0.3, 0.04, -0.35], [0.34, -0.6, 0.17]];

pub const INVARIANT_NAMES: [&str; 5] = ["E", "W", "C", "H", "N"];
pub const DEFAULT_SIGMA: f32 = 1.0;
pub const DEFAULT_EPSILON: f32 = 1e-4;
pub const ENSEMBLE_CHANNELS: usize = 3;
/// Hue denominators below this fraction of `E²` are clamped to it. An absolute
/// guard would break the intensity invariance at low-chroma pixels.
pub const HUE_CHROMA_FLOOR: f32 = 0.02;

#[derive(Clone, Copy, Debug)]
pub struct GaussianColorPlanes {
    pub e: Var,
    pub e_l: Var,
    pub e_ll: Var,
}

/// Spectral planes and their spatial Gaussian derivatives. `i` runs down rows,
/// `j` across columns.
#[derive(Clone, Copy, Debug)]
pub struct DerivativeSet {
    pub e: Var,
    pub e_l: Var,
    pub e_ll: Var,
    pub e_i: Var,
    pub e_j: Var,
    pub e_li: Var,
    pub e_lj: Var,
    pub e_lli: Var,
    pub e_llj: Var,
    pub sigma: f32,
}

/// Φ: a (B, 5, H, W) map with channels ordered E, W, C, H, N.
#[derive(Clone, Copy, Debug)]
pub struct InvariantStack {
    pub phi: Var,
    pub sigma: f32,
    pub epsilon: f32,
}

/// Λ as a (3, 5, 1, 1) kernel plus a per-output-channel bias.
#[derive(Clone, Debug, PartialEq)]
pub struct LearnableEnsemble {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Default for LearnableEnsemble {
    /// Every output channel starts as the plain mean of the five invariants.
    fn default() -> Self {
        LearnableEnsemble {
            weight: Tensor::full(Shape::new(ENSEMBLE_CHANNELS, 5, 1, 1), 0.2),
            bias: Tensor::zeros(Shape::new(1, ENSEMBLE_CHANNELS, 1, 1)),
        }
    }
}

pub fn gaussian_color_model(tape: &Tape, rgb: Var) -> Result<GaussianColorPlanes> {
    let c = tape.shape(rgb).c();
    if c != 3 {
        return Err(Error::dim("gaussian_color_model", "channel", 3, c));
    }
    let row = |r: usize| {
        let w = Tensor::new(Shape::new(1, 3, 1, 1), GAUSSIAN_COLOR_MATRIX[r].to_vec())
            .expect("3 coefficients");
        tape.conv2d(rgb, tape.constant(w), None, 1, 0)
    };
    Ok(GaussianColorPlanes {
        e: row(0)?,
        e_l: row(1)?,
        e_ll: row(2)?,
    })
}

pub fn kernel_radius(sigma: f32) -> usize {
    (3.0 * sigma).ceil() as usize
}

/// Half-kernels `(smooth, derivative)` for scale `sigma`.
///
/// The smoothing taps sum to one over the full kernel. The derivative taps are
/// the sampled `-dg/dt`, scaled so that a unit ramp yields exactly 1.
pub fn gaussian_taps(sigma: f32) -> Result<(Vec<f32>, Vec<f32>)> {
    if !sigma.is_finite() || sigma <= 0.0 {
        return Err(Error::Parameter(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let r = kernel_radius(sigma);
    let s2 = (sigma as f64).powi(2);
    let g: Vec<f64> = (0..=r)
        .map(|t| (-((t * t) as f64) / (2.0 * s2)).exp())
        .collect();
    let total = g[0] + 2.0 * g[1..].iter().sum::<f64>();
    let smooth = g.iter().map(|v| (v / total) as f32).collect();
    // y[i] = sum_t d_t (x[i+t] - x[i-t]); a ramp x[i] = i gives sum_t 2 t d_t.
    let ramp: f64 = (1..=r).map(|t| 2.0 * (t * t) as f64 * g[t]).sum();
    let mut deriv = vec![0.0f32];
    deriv.extend((1..=r).map(|t| (t as f64 * g[t] / ramp) as f32));
    Ok((smooth, deriv))
}

/// Gaussian derivatives of every spectral plane.
///
/// The sampled kernel is applied as a true convolution: `E_i(i) = Σ_s E(i-s) g'(s)`,
/// which with `g'(s) = -s g(s) / σ²` becomes the antisymmetric form
/// `Σ_{s>0} c_s (E(i+s) - E(i-s))` with positive `c_s`. Borders replicate.
pub fn gaussian_derivatives(
    tape: &Tape,
    planes: &GaussianColorPlanes,
    sigma: f32,
) -> Result<DerivativeSet> {
    let (smooth, deriv) = gaussian_taps(sigma)?;
    let shape = tape.shape(planes.e);
    let min = 2 * kernel_radius(sigma) + 1;
    if shape.h() < min {
        return Err(Error::dim(
            "gaussian_derivatives",
            "height",
            format!(">= {min}"),
            shape.h(),
        ));
    }
    if shape.w() < min {
        return Err(Error::dim(
            "gaussian_derivatives",
            "width",
            format!(">= {min}"),
            shape.w(),
        ));
    }
    let d_i = |x: Var| -> Result<Var> {
        let s = tape.filter1d(x, &smooth, Axis::Width, Parity::Even)?;
        tape.filter1d(s, &deriv, Axis::Height, Parity::Odd)
    };
    let d_j = |x: Var| -> Result<Var> {
        let s = tape.filter1d(x, &smooth, Axis::Height, Parity::Even)?;
        tape.filter1d(s, &deriv, Axis::Width, Parity::Odd)
    };
    Ok(DerivativeSet {
        e: planes.e,
        e_l: planes.e_l,
        e_ll: planes.e_ll,
        e_i: d_i(planes.e)?,
        e_j: d_j(planes.e)?,
        e_li: d_i(planes.e_l)?,
        e_lj: d_j(planes.e_l)?,
        e_lli: d_i(planes.e_ll)?,
        e_llj: d_j(planes.e_ll)?,
        sigma,
    })
}

fn root_sum_squares(tape: &Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = tape.square(terms[0]);
    for &t in &terms[1..] {
        acc = tape.add(acc, tape.square(t))?;
    }
    Ok(tape.sqrt(acc))
}

/// The five invariants stacked as (E, W, C, H, N).
///
/// Ratios are stabilized by flooring their base quantities at `epsilon`:
/// `max(E, ε)` stands in for `E` in every denominator and `E_λ² + E_λλ²` is
/// floored at [`HUE_CHROMA_FLOOR`]`·max(E, ε)²`. Both floors scale with the
/// image intensity wherever `E > ε`, so the ratios stay homogeneous of degree
/// zero there, including near-achromatic pixels where hue is undefined.
pub fn compute_invariants(tape: &Tape, d: &DerivativeSet, epsilon: f32) -> Result<InvariantStack> {
    if epsilon.is_nan() || epsilon <= 0.0 {
        return Err(Error::Parameter(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    let e_floor = tape.clamp_min(d.e, epsilon);
    let e2 = tape.square(e_floor);
    let e3 = tape.mul(e2, e_floor)?;

    let e_inv = root_sum_squares(tape, &[d.e_i, d.e_li, d.e_lli, d.e_j, d.e_lj, d.e_llj])?;

    let w_terms: Vec<Var> = [d.e_i, d.e_li, d.e_lli, d.e_j, d.e_lj, d.e_llj]
        .iter()
        .map(|&t| tape.div(t, e_floor))
        .collect::<Result<_>>()?;
    let w_inv = root_sum_squares(tape, &w_terms)?;

    // (E_x E - E_s E_spatial) / E²  for spectral plane E_s
    let first_order = |e_sx: Var, e_s: Var, e_x: Var| -> Result<Var> {
        let a = tape.mul(e_sx, d.e)?;
        let b = tape.mul(e_s, e_x)?;
        tape.div(tape.sub(a, b)?, e2)
    };
    let c_li = first_order(d.e_li, d.e_l, d.e_i)?;
    let c_lj = first_order(d.e_lj, d.e_l, d.e_j)?;
    let c_lli = first_order(d.e_lli, d.e_ll, d.e_i)?;
    let c_llj = first_order(d.e_llj, d.e_ll, d.e_j)?;
    let c_inv = root_sum_squares(tape, &[c_li, c_lli, c_lj, c_llj])?;

    let chroma = tape.add(tape.square(d.e_l), tape.square(d.e_ll))?;
    let chroma_floor = tape.scale(e2, HUE_CHROMA_FLOOR);
    let chroma = tape.add(chroma_floor, tape.relu(tape.sub(chroma, chroma_floor)?))?;
    let hue = |e_lx: Var, e_llx: Var| -> Result<Var> {
        let a = tape.mul(e_lx, d.e_ll)?;
        let b = tape.mul(d.e_l, e_llx)?;
        tape.div(tape.sub(a, b)?, chroma)
    };
    let h_i = hue(d.e_li, d.e_lli)?;
    let h_j = hue(d.e_lj, d.e_llj)?;
    let h_inv = root_sum_squares(tape, &[h_i, h_j])?;

    // (E_λλx E² - E_λλ E_x E - 2 E_λx E_λ E + 2 E_λ² E_x) / E³
    let second_order = |e_x: Var, e_lx: Var, e_llx: Var| -> Result<Var> {
        let e_sq = tape.square(d.e);
        let t1 = tape.mul(e_llx, e_sq)?;
        let t2 = tape.mul(tape.mul(d.e_ll, e_x)?, d.e)?;
        let t3 = tape.scale(tape.mul(tape.mul(e_lx, d.e_l)?, d.e)?, 2.0);
        let t4 = tape.scale(tape.mul(tape.square(d.e_l), e_x)?, 2.0);
        let num = tape.add(tape.sub(tape.sub(t1, t2)?, t3)?, t4)?;
        tape.div(num, e3)
    };
    let n_lli = second_order(d.e_i, d.e_li, d.e_lli)?;
    let n_llj = second_order(d.e_j, d.e_lj, d.e_llj)?;
    let n_inv = root_sum_squares(tape, &[c_li, n_lli, c_lj, n_llj])?;

    let phi = tape.concat(&[e_inv, w_inv, c_inv, h_inv, n_inv])?;
    Ok(InvariantStack {
        phi,
        sigma: d.sigma,
        epsilon,
    })
}

/// ξ = ΛΦ + bias, as a 1x1 convolution over the invariant stack.
pub fn lci_forward(tape: &Tape, phi: Var, weight: Var, bias: Var) -> Result<Var> {
    let c = tape.shape(phi).c();
    if c != 5 {
        return Err(Error::dim("lci_forward", "channel", 5, c));
    }
    tape.conv2d(phi, weight, Some(bias), 1, 0)
}

/// Image tensor (B, 3, H, W) → invariant stack along a caller-owned tape.
pub fn invariants_on_tape(
    tape: &Tape,
    rgb: Var,
    sigma: f32,
    epsilon: f32,
) -> Result<InvariantStack> {
    let planes = gaussian_color_model(tape, rgb)?;
    let derivs = gaussian_derivatives(tape, &planes, sigma)?;
    compute_invariants(tape, &derivs, epsilon)
}

/// Non-differentiable convenience: Φ for an image tensor.
pub fn invariants(rgb: &Tensor, sigma: f32, epsilon: f32) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(rgb.clone());
    let stack = invariants_on_tape(&tape, x, sigma, epsilon)?;
    Ok(tape.value(stack.phi))
}

/// Non-differentiable convenience: ξ for an invariant stack and ensemble.
pub fn ensemble(phi: &Tensor, lambda: &LearnableEnsemble) -> Result<Tensor> {
    let tape = Tape::new();
    let xi = lci_forward(
        &tape,
        tape.constant(phi.clone()),
        tape.constant(lambda.weight.clone()),
        tape.constant(lambda.bias.clone()),
    )?;
    Ok(tape.value(xi))
}
