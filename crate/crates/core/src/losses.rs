//! Training objectives: background regression, disentangled contrastive loss,
//! least-squares adversarial terms and their weighted totals.

use serde::{Deserialize, Serialize};

use crate::disentangle::split_on_tape;
use crate::error::{Error, Result};
use crate::feature_extractor::PyramidVars;
use crate::tensor::{Tape, Tensor, Var};

pub const DEFAULT_TAU: f32 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub adv: f32,
    pub back: f32,
    pub fore: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            adv: 1.0,
            back: 1.0,
            fore: 1.0,
        }
    }
}

/// A summed multi-stage loss with its per-stage terms.
#[derive(Clone, Debug)]
pub struct StageLoss {
    pub total: Var,
    pub per_stage: Vec<(String, Var)>,
    /// Set when no location was available on any stage and the loss is a constant 0.
    pub empty: bool,
}

fn stage_var(pyr: &PyramidVars, stage: &str) -> Result<Var> {
    pyr.stages
        .iter()
        .find(|(n, _)| n == stage)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Config(format!("stage {stage:?} missing from pyramid")))
}

fn sum_stages(tape: &Tape, per_stage: &[(String, Var)]) -> Result<Var> {
    let mut iter = per_stage.iter().map(|(_, v)| *v);
    let first = iter
        .next()
        .ok_or_else(|| Error::Config("no loss stages configured".into()))?;
    iter.try_fold(first, |acc, v| tape.add(acc, v))
}

/// Σ_k mean |M_k ⊙ ζ_k(gen) − M_k ⊙ ζ_k(ref)| over the stages in `masks`.
pub fn l_back_on_tape(
    tape: &Tape,
    gen: &PyramidVars,
    reference: &PyramidVars,
    masks: &[(String, Var)],
) -> Result<StageLoss> {
    let mut per_stage = Vec::with_capacity(masks.len());
    for (stage, mask) in masks {
        let g = stage_var(gen, stage)?;
        let r = stage_var(reference, stage)?;
        let (g_bg, _) = split_on_tape(tape, g, *mask)?;
        // Same arithmetic on both sides, so identical features cancel exactly.
        let (r_bg, _) = split_on_tape(tape, r, *mask)?;
        let diff = tape.abs(tape.sub(g_bg, r_bg)?);
        per_stage.push((stage.clone(), tape.mean(diff)?));
    }
    Ok(StageLoss {
        total: sum_stages(tape, &per_stage)?,
        per_stage,
        empty: false,
    })
}

/// Channel vectors scaled to unit length at every location.
pub fn normalize_channels(tape: &Tape, x: Var) -> Result<Var> {
    let norm = tape.sqrt(tape.channel_sum(tape.square(x))?);
    tape.div(x, norm)
}

/// Per-location positive and negative logits of one stage, each (B,1,H,W):
/// pos = ((1−M)⊙n(ζ_gen))·((1−M)⊙n(ζ_night)) / τ and
/// neg = (M⊙n(ζ_gen))·(M⊙n(ζ_night)) / τ.
pub fn fore_logits(tape: &Tape, gen: Var, night: Var, mask: Var, tau: f32) -> Result<(Var, Var)> {
    check_tau(tau)?;
    let ng = normalize_channels(tape, gen)?;
    let nn = normalize_channels(tape, night)?;
    let (g_bg, g_fg) = split_on_tape(tape, ng, mask)?;
    let (n_bg, n_fg) = split_on_tape(tape, nn, mask)?;
    let pos = tape.channel_sum(tape.mul(g_fg, n_fg)?)?;
    let neg = tape.channel_sum(tape.mul(g_bg, n_bg)?)?;
    Ok((tape.scale(pos, 1.0 / tau), tape.scale(neg, 1.0 / tau)))
}

fn check_tau(tau: f32) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "temperature must be positive, got {tau}"
        )))
    }
}

/// Disentangled contrastive loss. For each stage, every selected location
/// contributes −log(e^pos / (e^pos + Σ_j e^neg_j)) with the negatives taken
/// at all selected locations of the same image; rows are averaged and stages summed.
/// `locations` holds the selected indices per stage and batch item.
pub fn l_fore_on_tape(
    tape: &Tape,
    gen: &PyramidVars,
    night: &PyramidVars,
    masks: &[(String, Var)],
    locations: &[(String, Vec<Vec<usize>>)],
    tau: f32,
) -> Result<StageLoss> {
    check_tau(tau)?;
    let mut per_stage = Vec::with_capacity(masks.len());
    for (stage, mask) in masks {
        let idx = locations
            .iter()
            .find(|(n, _)| n == stage)
            .map(|(_, i)| i)
            .ok_or_else(|| Error::Config(format!("no locations for stage {stage:?}")))?;
        if idx.iter().all(|row| row.is_empty()) {
            continue;
        }
        let (pos, neg) = fore_logits(
            tape,
            stage_var(gen, stage)?,
            stage_var(night, stage)?,
            *mask,
            tau,
        )?;
        let pos = tape.gather(pos, idx)?;
        let neg = tape.gather(neg, idx)?;
        per_stage.push((stage.clone(), tape.contrastive(pos, neg)?));
    }
    if per_stage.is_empty() {
        return Ok(StageLoss {
            total: tape.constant(Tensor::scalar(0.0)),
            per_stage,
            empty: true,
        });
    }
    Ok(StageLoss {
        total: sum_stages(tape, &per_stage)?,
        per_stage,
        empty: false,
    })
}

/// Generator side of LSGAN: mean((D(fake) − 1)²).
pub fn adv_g_on_tape(tape: &Tape, d_fake: Var) -> Result<Var> {
    tape.mean(tape.square(tape.add_scalar(d_fake, -1.0)))
}

/// Discriminator side of LSGAN: mean((D(real) − 1)²) + mean(D(fake)²).
/// `d_fake` must come from a detached generator output.
pub fn adv_d_on_tape(tape: &Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    let real = tape.mean(tape.square(tape.add_scalar(d_real, -1.0)))?;
    let fake = tape.mean(tape.square(d_fake))?;
    tape.add(real, fake)
}

pub fn adv_g(d_fake: &Tensor) -> f32 {
    let tape = Tape::new();
    let d = tape.constant(d_fake.clone());
    tape.value(adv_g_on_tape(&tape, d).expect("non-empty"))
        .item()
}

pub fn adv_d(d_real: &Tensor, d_fake: &Tensor) -> f32 {
    let tape = Tape::new();
    let r = tape.constant(d_real.clone());
    let f = tape.constant(d_fake.clone());
    tape.value(adv_d_on_tape(&tape, r, f).expect("non-empty"))
        .item()
}

/// Weighted generator objective recorded on the tape, in the same order as
/// [`totals`] so that the logged value is the differentiated one.
pub fn total_g_on_tape(tape: &Tape, adv: Var, back: Var, fore: Var, w: LossWeights) -> Result<Var> {
    let a = tape.scale(adv, w.adv);
    let b = tape.scale(back, w.back);
    let f = tape.scale(fore, w.fore);
    tape.add(tape.add(a, b)?, f)
}

/// Raw loss values of one iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub l_back: f32,
    pub l_fore: f32,
    pub l_adv_g: f32,
    pub l_adv_d: f32,
}

/// (total_g, total_d). Any non-finite part aborts with the offending term.
pub fn totals(parts: LossParts, w: LossWeights, iteration: u64) -> Result<(f32, f32)> {
    for (term, v) in [
        ("l_back", parts.l_back),
        ("l_fore", parts.l_fore),
        ("l_adv_g", parts.l_adv_g),
        ("l_adv_d", parts.l_adv_d),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: term.into(),
                iteration,
            });
        }
    }
    let total_g = w.adv * parts.l_adv_g + w.back * parts.l_back + w.fore * parts.l_fore;
    if !total_g.is_finite() {
        return Err(Error::NonFinite {
            term: "total_g".into(),
            iteration,
        });
    }
    Ok((total_g, parts.l_adv_d))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub iter: u64,
    pub l_back: f32,
    pub l_fore: f32,
    pub l_adv_g: f32,
    pub l_adv_d: f32,
    pub total_g: f32,
    pub total_d: f32,
    pub back_per_stage: Vec<(String, f32)>,
    pub fore_per_stage: Vec<(String, f32)>,
    pub weights: LossWeights,
    pub tau: f32,
    /// L_fore had no locations to score this iteration.
    pub fore_empty: bool,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,l_back,l_fore,l_adv_g,l_adv_d,total_g,total_d";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.iter,
            self.l_back,
            self.l_fore,
            self.l_adv_g,
            self.l_adv_d,
            self.total_g,
            self.total_d
        )
    }
}
