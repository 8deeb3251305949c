//! The full finite-difference suite: every differentiable tape operation,
//! then the end-to-end loss through the encoder with each adapter variant.

use serde::Serialize;

use crate::encoder::{EncoderConfig, RetrievalModel};
use crate::error::Result;
use crate::numcore::gradcheck::{check_inputs, check_params, GradCheckReport};
use crate::numcore::{Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::objective::{target_speaker_loss_var, vanilla_clip_loss_var, LossConfig};
use crate::rng;
use crate::tsre::{SpeakerEmbedding, TsreConfig, Variant};

pub const SUITE_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct SuiteReport {
    pub seed: u64,
    pub tolerance: f64,
    pub checks: Vec<GradCheckReport>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn worst(&self) -> Option<&GradCheckReport> {
        self.checks.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }

    /// One line per check group.
    pub fn table(&self) -> String {
        let mut out = format!("{:<28} {:>8} {:>12}  {}\n", "group", "entries", "max_rel_err", "status");
        for c in &self.checks {
            out.push_str(&format!(
                "{:<28} {:>8} {:>12.3e}  {}\n",
                c.name,
                c.checked,
                c.max_rel_err,
                if c.passed { "ok" } else { "FAIL" }
            ));
        }
        out
    }
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let r = |shape: &[usize], tag: &str| Tensor::randn(shape, 1.0, &mut rng::stream(seed, &format!("suite/{tag}")));
    let a = r(&[3, 4], "a");
    let b = r(&[3, 4], "b");
    let row = r(&[4], "row");
    let s = r(&[1], "s");
    // shifted away from the kink so finite differences do not straddle it
    let kinkless = Tensor::new(
        vec![3, 4],
        a.data().iter().map(|v| if v.abs() < 0.05 { v + 0.1 } else { *v }).collect(),
    )
    .expect("finite");
    let ab = || vec![a.clone(), b.clone()];
    vec![
        ("matmul", vec![a.clone(), r(&[4, 2], "m")], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))),
        ("add", ab(), Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", ab(), Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", ab(), Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![a.clone(), row.clone()], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("mul_row", vec![a.clone(), row.clone()], Box::new(|t, v| t.mul_row(v[0], v[1]))),
        ("scale", vec![a.clone()], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("mul_scalar", vec![a.clone(), s], Box::new(|t, v| t.mul_scalar(v[0], v[1]))),
        ("exp", vec![a.clone()], Box::new(|t, v| t.exp(v[0]))),
        (
            "log",
            vec![b.clone()],
            Box::new(|t, v| {
                let e = t.exp(v[0])?;
                t.log(e)
            }),
        ),
        ("relu", vec![kinkless], Box::new(|t, v| t.relu(v[0]))),
        ("gelu", vec![a.clone()], Box::new(|t, v| t.gelu(v[0]))),
        ("softmax", vec![a.clone()], Box::new(|t, v| t.softmax(v[0]))),
        ("log_sum_exp", vec![a.clone()], Box::new(|t, v| t.log_sum_exp(v[0]))),
        (
            "layer_norm",
            vec![a.clone(), row.clone(), r(&[4], "beta")],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], LAYER_NORM_EPS)),
        ),
        (
            "conv1d_grouped",
            vec![r(&[6, 4], "h"), r(&[4, 2, 3], "w")],
            Box::new(|t, v| t.conv1d_grouped(v[0], v[1], 2)),
        ),
        ("mean_rows", vec![a.clone()], Box::new(|t, v| t.mean_rows(v[0]))),
        ("l2_normalize", vec![a.clone()], Box::new(|t, v| t.l2_normalize(v[0]))),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        (
            "slice_concat",
            ab(),
            Box::new(|t, v| {
                let l = t.slice_cols(v[0], 0, 1)?;
                let r = t.slice_cols(v[1], 1, 3)?;
                t.concat_cols(&[r, l])
            }),
        ),
        (
            "select_gather",
            vec![a.clone()],
            Box::new(|t, v| {
                let rows = t.select_rows(v[0], &[2, 0, 2])?;
                t.gather(rows, &[0, 5, 11, 5])
            }),
        ),
        (
            "reshape_stack",
            vec![row.clone()],
            Box::new(|t, v| {
                let r = t.reshape(v[0], &[1, 4])?;
                t.stack_rows(&[r, v[0]])
            }),
        ),
        (
            "weighted_sum",
            vec![r(&[2], "alpha"), a.clone(), b.clone()],
            Box::new(|t, v| t.weighted_sum(v[0], &[v[1], v[2]])),
        ),
    ]
}

fn suite_encoder() -> EncoderConfig {
    EncoderConfig {
        num_layers: 1,
        hidden_dim: 8,
        num_heads: 2,
        ff_dim: 12,
        embed_dim: 5,
        speaker_dim: 3,
        input_dim: 4,
        latent_dim: 6,
        paper_scale_preset: false,
    }
}

fn suite_loss() -> LossConfig {
    LossConfig {
        learnable_temperature: true,
        temperature: 0.5,
    }
}

/// A model off the identity point: adapter parameters are jittered so every
/// conditioned path carries gradient.
fn jittered_model(variant: Option<Variant>, seed: u64) -> Result<RetrievalModel> {
    let mut m = RetrievalModel::new(suite_encoder(), seed)?;
    if let Some(v) = variant {
        m.attach_tsre(TsreConfig::new(v), seed)?;
        let ids: Vec<_> = m.params.ids().filter(|&id| m.params.path(id).starts_with("tsre/")).collect();
        for id in ids {
            let path = m.params.path(id).to_string();
            let t = m.params.get_mut(id);
            let noise = rng::normal_vec(&mut rng::stream(seed, &format!("suite/jitter/{path}")), t.numel(), 0.3);
            for (x, n) in t.data_mut().iter_mut().zip(noise) {
                *x += n;
            }
        }
    }
    suite_loss().init_params(&mut m.params)?;
    Ok(m)
}

fn end_to_end(variant: Option<Variant>, seed: u64) -> Result<GradCheckReport> {
    let model = jittered_model(variant, seed)?;
    let cfg = model.config.clone();
    let (n, k) = (2usize, if variant.is_some() { 2usize } else { 1 });
    let frames: Vec<Tensor> = (0..n)
        .map(|i| Tensor::randn(&[3, cfg.input_dim], 1.0, &mut rng::stream(seed, &format!("suite/x{i}"))))
        .collect();
    let speakers: Vec<SpeakerEmbedding> = (0..n * k)
        .map(|i| SpeakerEmbedding::new(rng::normal_vec(&mut rng::stream(seed, &format!("suite/u{i}")), cfg.speaker_dim, 1.0)))
        .collect::<Result<_>>()?;
    let latents = Tensor::randn(&[n, cfg.latent_dim], 1.0, &mut rng::stream(seed, "suite/latents"));
    let targets = vec![k - 1, 0];
    let loss_cfg = suite_loss();
    let name = match variant {
        Some(v) => format!("end_to_end/{v}"),
        None => "end_to_end/base".to_string(),
    };
    check_params(&name, &model.params, &[], SUITE_TOLERANCE, |tape, store| {
        let mut m = model.clone();
        m.params = store.clone();
        let e_i = m.image_forward(tape, &latents)?;
        let inv_tau = loss_cfg.inv_temperature(tape, store)?;
        if variant.is_some() {
            let mut rows = Vec::with_capacity(n * k);
            for (i, x) in frames.iter().enumerate() {
                for q in 0..k {
                    rows.push(m.speech_forward(tape, x, Some(&speakers[i * k + q]))?);
                }
            }
            let e_s = tape.stack_rows(&rows)?;
            Ok(target_speaker_loss_var(tape, e_i, e_s, k, &targets, inv_tau)?.0)
        } else {
            let rows = frames.iter().map(|x| m.speech_forward(tape, x, None)).collect::<Result<Vec<_>>>()?;
            let e_s = tape.stack_rows(&rows)?;
            Ok(vanilla_clip_loss_var(tape, e_i, e_s, inv_tau)?.0)
        }
    })
}

/// Runs every check; failures are reported, not raised.
pub fn run_suite(seed: u64) -> Result<SuiteReport> {
    let mut checks = Vec::new();
    for (name, inputs, f) in op_cases(seed) {
        checks.push(check_inputs(&format!("op/{name}"), &inputs, SUITE_TOLERANCE, f)?);
    }
    checks.push(end_to_end(None, seed)?);
    for v in Variant::ALL {
        checks.push(end_to_end(Some(v), seed)?);
    }
    Ok(SuiteReport {
        seed,
        tolerance: SUITE_TOLERANCE,
        checks,
    })
}
