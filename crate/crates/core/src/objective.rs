//! Contrastive objectives.
//!
//! Speech rows of a target-speaker batch are laid out flat: row `n·K + q` is
//! mixture `n` conditioned on its `q`-th speaker. Target indices are
//! zero-based.
//!
//! * image→speech: image `m` against all `N·K` conditioned speech rows, the
//!   positive being row `m·K + p_m`;
//! * speech→image: each of the `N` target-conditioned rows against the `N`
//!   images.
//!
//! The loss is `(Σ_m L_is(m) + Σ_m L_si(m)) / 2N`. With `K = 1` this is the
//! symmetric CLIP loss.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor, Var};

pub const LOG_TEMPERATURE_PATH: &str = "loss/log_temperature";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub temperature: f64,
    /// Learn `ln τ` as a parameter initialized from `temperature`.
    pub learnable_temperature: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            learnable_temperature: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {}", self.temperature)));
        }
        Ok(())
    }

    /// Adds the log-temperature parameter when learnable.
    pub fn init_params(&self, store: &mut ParamStore) -> Result<()> {
        if self.learnable_temperature && store.id(LOG_TEMPERATURE_PATH).is_none() {
            let t = Tensor::scalar(self.temperature.ln())?.with_requires_grad(true);
            store.insert(LOG_TEMPERATURE_PATH, t)?;
        }
        Ok(())
    }

    /// `1/τ` as a `[1]` tape value, differentiable when learnable.
    pub fn inv_temperature(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        if self.learnable_temperature {
            let log_t = tape.param_by_path(store, LOG_TEMPERATURE_PATH)?;
            let neg = tape.scale(log_t, -1.0)?;
            tape.exp(neg)
        } else {
            Ok(tape.constant(&Tensor::scalar(1.0 / self.temperature)?))
        }
    }
}

/// Conditioned embeddings of one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    /// `[N × E]`
    pub images: Tensor,
    /// `[N × K × E]`
    pub speech: Tensor,
    /// Zero-based target condition per sample.
    pub targets: Vec<usize>,
}

const UNIT_NORM_TOL: f64 = 1e-9;

fn check_unit_rows(t: &Tensor, what: &str) -> Result<()> {
    let e = t.last_dim();
    for (r, row) in t.data().chunks(e).enumerate() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if (n - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Batch(format!("{what} row {r} has norm {n}, expected 1")));
        }
    }
    Ok(())
}

impl ContrastiveBatch {
    pub fn new(images: Tensor, speech: Tensor, targets: Vec<usize>) -> Result<Self> {
        let b = Self {
            images,
            speech,
            targets,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn n(&self) -> usize {
        self.images.shape()[0]
    }

    pub fn k(&self) -> usize {
        self.speech.shape()[1]
    }

    pub fn validate(&self) -> Result<()> {
        let (si, ss) = (self.images.shape(), self.speech.shape());
        if si.len() != 2 || ss.len() != 3 {
            return Err(Error::Batch(format!("expected images [N×E], speech [N×K×E]; got {si:?}, {ss:?}")));
        }
        if si[0] != ss[0] || si[1] != ss[2] {
            return Err(Error::Batch(format!("images {si:?} and speech {ss:?} disagree")));
        }
        if self.targets.len() != si[0] {
            return Err(Error::Batch(format!("{} targets for {} samples", self.targets.len(), si[0])));
        }
        if let Some(p) = self.targets.iter().find(|&&p| p >= ss[1]) {
            return Err(Error::Batch(format!("target index {p} out of range for K = {}", ss[1])));
        }
        check_unit_rows(&self.images, "image")?;
        check_unit_rows(&self.speech, "speech")
    }
}

/// Mean per-direction terms and the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossTerms {
    pub image_to_speech: f64,
    pub speech_to_image: f64,
    pub total: f64,
}

/// `Σ_rows (lse(row) − row[pos])`.
fn cross_entropy_sum(tape: &mut Tape, logits: Var, positives: &[usize]) -> Result<Var> {
    let cols = tape.shape(logits)[1];
    let lse = tape.log_sum_exp(logits)?;
    let flat: Vec<usize> = positives.iter().enumerate().map(|(r, &c)| r * cols + c).collect();
    let pos = tape.gather(logits, &flat)?;
    let diff = tape.sub(lse, pos)?;
    tape.sum(diff)
}

fn scaled_sims(tape: &mut Tape, a: Var, b: Var, inv_tau: Var) -> Result<Var> {
    let bt = tape.transpose(b)?;
    let s = tape.matmul(a, bt)?;
    tape.mul_scalar(s, inv_tau)
}

/// Tape-level vanilla loss; returns `(total, Σ L_is, Σ L_si)`.
pub fn vanilla_clip_loss_var(tape: &mut Tape, e_i: Var, e_s: Var, inv_tau: Var) -> Result<(Var, Var, Var)> {
    let n = tape.shape(e_i)[0];
    if n == 0 || tape.shape(e_s) != tape.shape(e_i) {
        return Err(Error::Batch(format!(
            "vanilla loss needs matching [N×E] inputs, got {:?} and {:?}",
            tape.shape(e_i),
            tape.shape(e_s)
        )));
    }
    let diag: Vec<usize> = (0..n).collect();
    let l_is = scaled_sims(tape, e_i, e_s, inv_tau)?;
    let l_is = cross_entropy_sum(tape, l_is, &diag)?;
    let l_si = scaled_sims(tape, e_s, e_i, inv_tau)?;
    let l_si = cross_entropy_sum(tape, l_si, &diag)?;
    let both = tape.add(l_is, l_si)?;
    let total = tape.scale(both, 1.0 / (2 * n) as f64)?;
    Ok((total, l_is, l_si))
}

/// Tape-level target-speaker loss over `e_s: [N·K × E]`; returns
/// `(total, Σ L_is, Σ L_si)`.
pub fn target_speaker_loss_var(
    tape: &mut Tape,
    e_i: Var,
    e_s: Var,
    k: usize,
    targets: &[usize],
    inv_tau: Var,
) -> Result<(Var, Var, Var)> {
    let n = tape.shape(e_i)[0];
    let e = tape.shape(e_i)[1];
    if n == 0 || k == 0 {
        return Err(Error::Batch("empty batch".into()));
    }
    if tape.shape(e_s) != [n * k, e] {
        return Err(Error::Batch(format!(
            "speech rows {:?} do not match N·K = {}·{k}",
            tape.shape(e_s),
            n
        )));
    }
    if targets.len() != n || targets.iter().any(|&p| p >= k) {
        return Err(Error::Batch(format!("invalid targets {targets:?} for N = {n}, K = {k}")));
    }
    let pos_cols: Vec<usize> = targets.iter().enumerate().map(|(m, &p)| m * k + p).collect();
    let l_is = scaled_sims(tape, e_i, e_s, inv_tau)?;
    let l_is = cross_entropy_sum(tape, l_is, &pos_cols)?;
    let anchors = tape.select_rows(e_s, &pos_cols)?;
    let l_si = scaled_sims(tape, anchors, e_i, inv_tau)?;
    let diag: Vec<usize> = (0..n).collect();
    let l_si = cross_entropy_sum(tape, l_si, &diag)?;
    let both = tape.add(l_is, l_si)?;
    let total = tape.scale(both, 1.0 / (2 * n) as f64)?;
    Ok((total, l_is, l_si))
}

fn fixed_inv_tau(tape: &mut Tape, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    Ok(tape.constant(&Tensor::scalar(1.0 / cfg.temperature)?))
}

fn terms(tape: &Tape, n: usize, (total, l_is, l_si): (Var, Var, Var)) -> LossTerms {
    LossTerms {
        image_to_speech: tape.scalar(l_is) / n as f64,
        speech_to_image: tape.scalar(l_si) / n as f64,
        total: tape.scalar(total),
    }
}

pub fn vanilla_clip_loss_terms(e_i: &Tensor, e_s: &Tensor, cfg: &LossConfig) -> Result<LossTerms> {
    if e_i.shape().len() != 2 || e_i.shape()[0] == 0 {
        return Err(Error::Batch("empty batch".into()));
    }
    check_unit_rows(e_i, "image")?;
    check_unit_rows(e_s, "speech")?;
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(e_i), tape.constant(e_s));
    let inv = fixed_inv_tau(&mut tape, cfg)?;
    let out = vanilla_clip_loss_var(&mut tape, a, b, inv)?;
    Ok(terms(&tape, e_i.shape()[0], out))
}

pub fn vanilla_clip_loss(e_i: &Tensor, e_s: &Tensor, cfg: &LossConfig) -> Result<f64> {
    Ok(vanilla_clip_loss_terms(e_i, e_s, cfg)?.total)
}

pub fn target_speaker_loss_terms(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<LossTerms> {
    batch.validate()?;
    let (n, k) = (batch.n(), batch.k());
    let e = batch.images.shape()[1];
    let mut tape = Tape::new();
    let a = tape.constant(&batch.images);
    let b = tape.constant(&batch.speech.clone().reshape(vec![n * k, e])?);
    let inv = fixed_inv_tau(&mut tape, cfg)?;
    let out = target_speaker_loss_var(&mut tape, a, b, k, &batch.targets, inv)?;
    Ok(terms(&tape, n, out))
}

pub fn target_speaker_loss(batch: &ContrastiveBatch, cfg: &LossConfig) -> Result<f64> {
    Ok(target_speaker_loss_terms(batch, cfg)?.total)
}

/// Pairwise dot products `[A × B]`; cosine similarities for unit rows.
pub fn similarity_matrix(e_a: &Tensor, e_b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (e_a.shape(), e_b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("similarity_matrix", format!("{sa:?} vs {sb:?}")));
    }
    let (a, b) = (sa[0], sb[0]);
    let mut out = vec![0.0; a * b];
    for i in 0..a {
        let ra = e_a.row(i);
        for j in 0..b {
            out[i * b + j] = ra.iter().zip(e_b.row(j)).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::new(vec![a, b], out)
}
