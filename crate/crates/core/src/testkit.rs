//! Finite-difference gradient oracle and seeded test inputs.
//!
//! The oracle only evaluates forward passes; it never reads tape gradients
//! except as the quantity under test.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::{Shape, Tape, Tensor, Var};

/// Uniform values in [lo, hi), pushed at least `gap` away from zero so that
/// kinked ops (relu, abs) are not straddled by a finite-difference step.
pub fn random_tensor(shape: Shape, seed: u64, lo: f32, hi: f32, gap: f32) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| loop {
        let v: f32 = rng.random_range(lo..hi);
        if v.abs() >= gap {
            break v;
        }
    })
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub h: f32,
    /// Cap on perturbed coordinates per input; coordinates are spread evenly.
    pub max_coords: usize,
    pub seed: u64,
    /// Skip coordinate probes whose ±h step moves any relu-like input across
    /// its kink (see [`Tape::kink_signature`]). Needed for deep piecewise
    /// networks where some unit straddles a kink for almost every probe.
    pub skip_kinks: bool,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            h: 1e-3,
            max_coords: 64,
            seed: 7,
            skip_kinks: false,
        }
    }
}

/// `|a - b| / max(|a|, |b|, 1e-6)` applied to vectors through their norms.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

impl GradCheck {
    fn weights(&self, shape: Shape) -> Option<Tensor> {
        if shape.is_scalar() {
            None
        } else {
            Some(random_tensor(shape, self.seed ^ 0x5eed, -1.0, 1.0, 0.0))
        }
    }

    fn eval<F>(&self, f: &F, inputs: &[Tensor]) -> Result<f64>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        Ok(self.eval_signed(f, inputs)?.0)
    }

    fn eval_signed<F>(&self, f: &F, inputs: &[Tensor]) -> Result<(f64, Vec<bool>)>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = tape.value(f(&tape, &vars)?);
        let sig = if self.skip_kinks {
            tape.kink_signature()
        } else {
            Vec::new()
        };
        let value = match self.weights(out.shape()) {
            None => out.item() as f64,
            Some(w) => out
                .data()
                .iter()
                .zip(w.data())
                .map(|(&y, &r)| y as f64 * r as f64)
                .sum(),
        };
        Ok((value, sig))
    }

    fn analytic<F>(&self, f: &F, inputs: &[Tensor]) -> Result<Vec<Tensor>>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let loss = match self.weights(tape.shape(out)) {
            None => out,
            Some(w) => {
                let w = tape.constant(w);
                let prod = tape.mul(out, w)?;
                tape.sum(prod)?
            }
        };
        let grads = tape.backward(loss)?;
        Ok(vars
            .iter()
            .zip(inputs)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect())
    }

    /// Coordinate-wise central differences; returns the worst relative error over inputs.
    pub fn coordinates<F>(&self, inputs: &[Tensor], f: F) -> Result<f64>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        Ok(self.coordinates_counted(inputs, f)?.0)
    }

    /// As [`GradCheck::coordinates`], also returning how many probes were used.
    pub fn coordinates_counted<F>(&self, inputs: &[Tensor], f: F) -> Result<(f64, usize)>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let analytic = self.analytic(&f, inputs)?;
        let base = self.eval_signed(&f, inputs)?.1;
        let mut used = 0;
        let mut worst = 0.0f64;
        for (which, input) in inputs.iter().enumerate() {
            let n = input.len();
            let step = n.div_ceil(self.max_coords).max(1);
            let (mut num, mut ana) = (Vec::new(), Vec::new());
            for i in (0..n).step_by(step) {
                let mut probe = inputs.to_vec();
                let mut plus = input.data().to_vec();
                plus[i] += self.h;
                probe[which] = Tensor::new(input.shape(), plus)?;
                let (fp, sp) = self.eval_signed(&f, &probe)?;
                let mut minus = input.data().to_vec();
                minus[i] -= self.h;
                probe[which] = Tensor::new(input.shape(), minus)?;
                let (fm, sm) = self.eval_signed(&f, &probe)?;
                if sp != base || sm != base {
                    continue;
                }
                num.push((fp - fm) / (2.0 * self.h as f64));
                ana.push(analytic[which].data()[i] as f64);
            }
            used += num.len();
            if !num.is_empty() {
                worst = worst.max(rel_err(&num, &ana));
            }
        }
        Ok((worst, used))
    }

    /// Directional central differences along `directions` random ±1 vectors
    /// spanning all inputs at once; returns the worst relative error.
    pub fn directional<F>(&self, inputs: &[Tensor], directions: usize, f: F) -> Result<f64>
    where
        F: Fn(&Tape, &[Var]) -> Result<Var>,
    {
        let analytic = self.analytic(&f, inputs)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0xd1ec);
        let (mut num, mut ana) = (Vec::new(), Vec::new());
        for _ in 0..directions {
            let dirs: Vec<Vec<f32>> = inputs
                .iter()
                .map(|t| {
                    (0..t.len())
                        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                        .collect()
                })
                .collect();
            let shifted = |sign: f32| -> Result<Vec<Tensor>> {
                inputs
                    .iter()
                    .zip(&dirs)
                    .map(|(t, d)| {
                        let v = t
                            .data()
                            .iter()
                            .zip(d)
                            .map(|(&x, &di)| x + sign * self.h * di)
                            .collect();
                        Tensor::new(t.shape(), v)
                    })
                    .collect()
            };
            let fp = self.eval(&f, &shifted(1.0)?)?;
            let fm = self.eval(&f, &shifted(-1.0)?)?;
            num.push((fp - fm) / (2.0 * self.h as f64));
            ana.push(
                analytic
                    .iter()
                    .zip(&dirs)
                    .map(|(g, d)| {
                        g.data()
                            .iter()
                            .zip(d)
                            .map(|(&a, &b)| a as f64 * b as f64)
                            .sum::<f64>()
                    })
                    .sum(),
            );
        }
        Ok(rel_err(&num, &ana))
    }
}
