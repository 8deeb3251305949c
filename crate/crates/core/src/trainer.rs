//! Deterministic two-stage training.
//!
//! Stage `base` trains the speech encoder on clean single-speaker utterances
//! with the symmetric contrastive loss. Stage `tsre-finetune` starts from a
//! base checkpoint, attaches fresh adapters, freezes the host encoder (the
//! head block stays trainable by default), and optimizes the target-speaker
//! loss over every mixture conditioned on every one of its speakers.
//!
//! Batches are a pure function of `(seed, step)`: epoch `e` visits the
//! training split in the order of a permutation drawn from stream
//! `train/epoch/e`, cut into full batches. Resuming at step `s` therefore
//! replays exactly the batches an uninterrupted run would see.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::container::Container;
use crate::datagen::{Corpus, MixtureSample, Split};
use crate::encoder::{EncoderConfig, RetrievalModel, IMAGE_PREFIX, TSRE_PREFIX};
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor};
use crate::objective::{target_speaker_loss_var, vanilla_clip_loss_var, LossConfig};
use crate::retrieval::{evaluate, Protocol, RecallReport, DEFAULT_KS};
use crate::rng;
use crate::tsre::TsreConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Base,
    TsreFinetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::TsreFinetune => "tsre-finetune",
        }
    }

    pub fn protocol(self) -> Protocol {
        match self {
            Stage::Base => Protocol::Single,
            Stage::TsreFinetune => Protocol::Target,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Stage::Base),
            "tsre-finetune" | "tsre" => Ok(Stage::TsreFinetune),
            other => Err(Error::Config(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub max_steps: u64,
    pub seed: u64,
    pub stage: Stage,
    /// Path prefixes excluded from updates. `None` selects the stage
    /// default: nothing for `base`; everything outside `tsre/` and the head
    /// block for `tsre-finetune`. The image projection is always frozen.
    pub freeze: Option<Vec<String>>,
    pub val_every: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            batch_size: 32,
            weight_decay: 1e-8,
            max_steps: 2000,
            seed: 0,
            stage: Stage::Base,
            freeze: None,
            val_every: 100,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("contrastive training needs batch_size >= 2".into()));
        }
        if self.weight_decay < 0.0 || self.val_every == 0 {
            return Err(Error::Config("weight_decay must be >= 0 and val_every >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.adam_eps <= 0.0 {
            return Err(Error::Config("Adam betas must lie in [0, 1) and eps > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Frozen prefixes in effect for this stage.
    pub fn frozen_prefixes(&self) -> Vec<String> {
        match (&self.freeze, self.stage) {
            (Some(f), _) => f.clone(),
            (None, Stage::Base) => Vec::new(),
            (None, Stage::TsreFinetune) => FINETUNE_FROZEN.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Host parameters held fixed while fine-tuning adapters. The head block and
/// `tsre/` stay trainable.
pub const FINETUNE_FROZEN: [&str; 5] = ["speech/input/", "speech/blocks/", "speech/layer_weights", "speech/out/", "loss/"];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

/// One Adam update at step `t` (1-based) with decoupled weight decay:
/// `θ ← θ − lr·(m̂/(√v̂ + ε) + wd·θ)`.
pub fn adam_update(theta: &mut [f64], grad: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamConfig) {
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
}

/// First and second moments keyed by parameter path.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Updates every trainable parameter of `store` from its accumulated grad,
/// then clears the grads.
pub fn adam_step(store: &mut ParamStore, state: &mut AdamState, cfg: &AdamConfig) {
    state.step += 1;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let path = store.path(id).to_string();
        let t = store.get_mut(id);
        if !t.requires_grad() {
            continue;
        }
        let n = t.numel();
        let grad = t.grad().map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let m = state.m.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(path).or_insert_with(|| vec![0.0; n]);
        adam_update(t.data_mut(), &grad, m, v, state.step, cfg);
    }
    store.zero_grad();
}

/// Everything needed to resume or evaluate a run.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: u64,
    pub config_digest: String,
    pub encoder: EncoderConfig,
    pub tsre: Option<TsreConfig>,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub params: ParamStore,
    pub adam: AdamState,
    pub best: Option<BestRecord>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestRecord {
    pub step: u64,
    pub recall_at_1: f64,
}

pub const CHECKPOINT_KIND: &str = "tsrelab-checkpoint";

impl Checkpoint {
    pub fn model(&self) -> Result<RetrievalModel> {
        let mut m = RetrievalModel::new(self.encoder.clone(), 0)?;
        m.params = self.params.clone();
        if let Some(t) = &self.tsre {
            m.bind_tsre(t.clone())?;
        }
        Ok(m)
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": CHECKPOINT_KIND,
            "stage": self.stage,
            "step": self.step,
            "config_digest": self.config_digest,
            "encoder": self.encoder,
            "tsre": self.tsre,
            "loss": self.loss,
            "train": self.train,
            "adam_step": self.adam.step,
            "best": self.best,
            "trainable": self.params.iter().filter(|(_, _, t)| t.requires_grad()).map(|(_, p, _)| p.to_string()).collect::<Vec<_>>(),
        }));
        for (_, p, t) in self.params.iter() {
            c.push(format!("param/{p}"), Tensor::new(t.shape().to_vec(), t.data().to_vec()).expect("finite"));
        }
        for (moments, tag) in [(&self.adam.m, "m"), (&self.adam.v, "v")] {
            for (p, vals) in moments {
                c.push(format!("adam/{tag}/{p}"), Tensor::vector(vals.clone()).expect("finite"));
            }
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = &c.meta;
        if meta["kind"] != CHECKPOINT_KIND {
            return Err(Error::Format("not a checkpoint container".into()));
        }
        let field = |k: &str| -> Result<Value> { Ok(meta.get(k).cloned().unwrap_or(Value::Null)) };
        let trainable: Vec<String> = serde_json::from_value(field("trainable")?)?;
        let mut params = ParamStore::new();
        let mut adam = AdamState {
            step: serde_json::from_value(field("adam_step")?)?,
            ..AdamState::default()
        };
        for (path, t) in &c.tensors {
            if let Some(p) = path.strip_prefix("param/") {
                let rg = trainable.iter().any(|x| x == p);
                params.insert(p, t.clone().with_requires_grad(rg))?;
            } else if let Some(p) = path.strip_prefix("adam/m/") {
                adam.m.insert(p.to_string(), t.data().to_vec());
            } else if let Some(p) = path.strip_prefix("adam/v/") {
                adam.v.insert(p.to_string(), t.data().to_vec());
            } else {
                return Err(Error::Format(format!("unexpected checkpoint entry {path}")));
            }
        }
        Ok(Self {
            stage: serde_json::from_value(field("stage")?)?,
            step: serde_json::from_value(field("step")?)?,
            config_digest: serde_json::from_value(field("config_digest")?)?,
            encoder: serde_json::from_value(field("encoder")?)?,
            tsre: serde_json::from_value(field("tsre")?)?,
            loss: serde_json::from_value(field("loss")?)?,
            train: serde_json::from_value(field("train")?)?,
            params,
            adam,
            best: serde_json::from_value(field("best")?)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }

    /// Adapter parameter count as serialized.
    pub fn tsre_param_count(&self) -> usize {
        self.params.numel_with_prefix(TSRE_PREFIX)
    }
}

/// Inputs of a training run besides the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub encoder: EncoderConfig,
    pub tsre: Option<TsreConfig>,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl RunSpec {
    /// Digest of everything that shapes the trajectory except its length.
    pub fn digest(&self, corpus: &Corpus) -> String {
        let mut train = serde_json::to_value(&self.train).expect("serializable");
        train.as_object_mut().expect("object").remove("max_steps");
        let doc = json!({
            "encoder": self.encoder,
            "tsre": self.tsre,
            "loss": self.loss,
            "train": train,
            "data": corpus.config,
        });
        rng::digest_hex(doc.to_string().as_bytes())[..16].to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val: Option<ValRecalls>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValRecalls {
    pub speech_to_image: BTreeMap<String, f64>,
    pub image_to_speech: BTreeMap<String, f64>,
}

impl ValRecalls {
    fn from_reports(s2i: &RecallReport, i2s: &RecallReport) -> Self {
        let m = |r: &RecallReport| r.recall.values.iter().map(|v| (format!("r@{}", v.k), v.recall)).collect();
        Self {
            speech_to_image: m(s2i),
            image_to_speech: m(i2s),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub last: Checkpoint,
    pub best: Checkpoint,
    pub log: Vec<LogEntry>,
}

/// Output locations of a run; `None` keeps everything in memory.
#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub dir: Option<PathBuf>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LOG_FILE: &str = "log.jsonl";

/// Sample indices of batch `step` (0-based) over `n` training samples.
pub fn batch_indices(seed: u64, step: u64, n: usize, batch: usize) -> Result<Vec<usize>> {
    if n < batch {
        return Err(Error::Config(format!("training split has {n} samples, fewer than batch size {batch}")));
    }
    let per_epoch = (n / batch) as u64;
    let epoch = step / per_epoch;
    let within = (step % per_epoch) as usize;
    let perm = rng::permutation(&mut rng::stream(seed, &format!("train/epoch/{epoch}")), n);
    Ok(perm[within * batch..(within + 1) * batch].to_vec())
}

/// Loss of one batch recorded on `tape`; returns the scalar loss var.
pub fn batch_loss(
    tape: &mut Tape,
    model: &RetrievalModel,
    loss_cfg: &LossConfig,
    corpus: &Corpus,
    batch: &[&MixtureSample],
    stage: Stage,
) -> Result<crate::numcore::Var> {
    let latents: Vec<f64> = batch
        .iter()
        .map(|s| corpus.image_latent(&s.image_id).map(<[f64]>::to_vec))
        .collect::<Result<Vec<_>>>()?
        .concat();
    let latents = Tensor::new(vec![batch.len(), corpus.config.latent_dim], latents)?;
    let e_i = model.image_forward(tape, &latents)?;
    let inv_tau = loss_cfg.inv_temperature(tape, &model.params)?;
    match stage {
        Stage::Base => {
            let rows = batch
                .iter()
                .map(|s| model.speech_forward(tape, &s.clean_target, None))
                .collect::<Result<Vec<_>>>()?;
            let e_s = tape.stack_rows(&rows)?;
            Ok(vanilla_clip_loss_var(tape, e_i, e_s, inv_tau)?.0)
        }
        Stage::TsreFinetune => {
            let k = batch[0].k();
            if batch.iter().any(|s| s.k() != k) {
                return Err(Error::Batch("mixed speaker counts in one batch".into()));
            }
            let mut rows = Vec::with_capacity(batch.len() * k);
            for s in batch {
                for u in &s.enrollments {
                    rows.push(model.speech_forward(tape, &s.mixture, Some(u))?);
                }
            }
            let e_s = tape.stack_rows(&rows)?;
            let targets: Vec<usize> = batch.iter().map(|s| s.target).collect();
            Ok(target_speaker_loss_var(tape, e_i, e_s, k, &targets, inv_tau)?.0)
        }
    }
}

fn numerical(step: u64, e: Error) -> Error {
    if e.is_numerical() {
        Error::NonFinite(format!("training step {step}: {e}"))
    } else {
        e
    }
}

/// Builds the starting model and optimizer state for a run.
fn initial_state(spec: &RunSpec, corpus: &Corpus, init: Option<&Checkpoint>) -> Result<(RetrievalModel, AdamState, u64, Option<BestRecord>)> {
    let digest = spec.digest(corpus);
    let stage = spec.train.stage;
    match (stage, init) {
        (_, Some(ck)) if ck.stage == stage => {
            if ck.config_digest != digest {
                return Err(Error::Config(format!(
                    "checkpoint was produced under config {} but this run is {digest}",
                    ck.config_digest
                )));
            }
            Ok((ck.model()?, ck.adam.clone(), ck.step, ck.best))
        }
        (Stage::TsreFinetune, Some(ck)) if ck.stage == Stage::Base => {
            if ck.encoder != spec.encoder {
                return Err(Error::Config("base checkpoint encoder config differs from run config".into()));
            }
            let mut model = ck.model()?;
            model.params.remove_prefix("loss/");
            let tsre = spec
                .tsre
                .clone()
                .ok_or_else(|| Error::Config("tsre-finetune stage needs a tsre config".into()))?;
            model.attach_tsre(tsre, spec.train.seed)?;
            spec.loss.init_params(&mut model.params)?;
            Ok((model, AdamState::default(), 0, None))
        }
        (Stage::TsreFinetune, None) => Err(Error::Config("tsre-finetune stage requires a base checkpoint (--init)".into())),
        (Stage::Base, None) => {
            let mut model = RetrievalModel::new(spec.encoder.clone(), spec.train.seed)?;
            spec.loss.init_params(&mut model.params)?;
            Ok((model, AdamState::default(), 0, None))
        }
        (_, Some(ck)) => Err(Error::Config(format!(
            "cannot start stage {stage} from a {} checkpoint",
            ck.stage
        ))),
    }
}

/// Runs (or resumes) training up to `train.max_steps`.
pub fn train(spec: &RunSpec, corpus: &Corpus, init: Option<&Checkpoint>, out: &RunOutput) -> Result<TrainOutcome> {
    spec.train.validate()?;
    spec.loss.validate()?;
    spec.encoder.validate()?;
    if spec.encoder.input_dim != corpus.config.input_dim
        || spec.encoder.latent_dim != corpus.config.latent_dim
        || spec.encoder.speaker_dim != corpus.config.speaker_dim
    {
        return Err(Error::Config("encoder and corpus dimensions disagree".into()));
    }
    let stage = spec.train.stage;
    if stage == Stage::Base && corpus.k() != 1 {
        log::warn!("base stage trains on the clean target utterances of a K={} corpus", corpus.k());
    }
    let digest = spec.digest(corpus);
    let (mut model, mut adam, start, mut best) = initial_state(spec, corpus, init)?;
    let frozen = spec.train.frozen_prefixes();
    model.params.apply_freeze(&frozen, &[IMAGE_PREFIX]);
    let adam_cfg = spec.train.adam();

    let train_samples = corpus.split(Split::Train);
    let snapshot = |model: &RetrievalModel, adam: &AdamState, step: u64, best: Option<BestRecord>| Checkpoint {
        stage,
        step,
        config_digest: digest.clone(),
        encoder: spec.encoder.clone(),
        tsre: model.tsre().map(|t| t.config.clone()),
        loss: spec.loss.clone(),
        train: spec.train.clone(),
        params: model.params.clone(),
        adam: adam.clone(),
        best,
    };

    let mut log_file = match &out.dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(LOG_FILE);
            if start == 0 {
                Some(fs::File::create(path)?)
            } else {
                Some(fs::OpenOptions::new().append(true).create(true).open(path)?)
            }
        }
        None => None,
    };
    let mut best_ck = match (&out.dir, best) {
        (Some(dir), Some(_)) if dir.join(BEST_CHECKPOINT).exists() => Some(Checkpoint::load(&dir.join(BEST_CHECKPOINT))?),
        _ => None,
    };
    let mut log = Vec::new();

    for step in start..spec.train.max_steps {
        let idx = batch_indices(spec.train.seed, step, train_samples.len(), spec.train.batch_size)?;
        let batch: Vec<&MixtureSample> = idx.iter().map(|&i| train_samples[i]).collect();
        let mut tape = Tape::new();
        let loss = batch_loss(&mut tape, &model, &spec.loss, corpus, &batch, stage).map_err(|e| numerical(step, e))?;
        let loss_value = tape.scalar(loss);
        tape.backward_into(loss, &mut model.params).map_err(|e| numerical(step, e))?;
        drop(tape);
        adam_step(&mut model.params, &mut adam, &adam_cfg);
        if model.params.iter().any(|(_, _, t)| t.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("parameters after step {}", step + 1)));
        }

        let done = step + 1;
        let mut entry = LogEntry {
            step: done,
            loss: loss_value,
            lr: spec.train.learning_rate,
            val: None,
        };
        if done % spec.train.val_every == 0 || done == spec.train.max_steps {
            let (s2i, i2s) = evaluate(&model, corpus, Split::Val, stage.protocol(), &DEFAULT_KS)?;
            let r1 = s2i.at(1).expect("k=1 evaluated");
            entry.val = Some(ValRecalls::from_reports(&s2i, &i2s));
            if best.is_none_or(|b| r1 > b.recall_at_1) {
                best = Some(BestRecord {
                    step: done,
                    recall_at_1: r1,
                });
                let ck = snapshot(&model, &adam, done, best);
                if let Some(dir) = &out.dir {
                    ck.save(&dir.join(BEST_CHECKPOINT))?;
                }
                best_ck = Some(ck);
            }
            log::info!("step {done} loss {loss_value:.5} val s2i r@1 {r1:.3}");
        }
        if let Some(f) = log_file.as_mut() {
            writeln!(f, "{}", serde_json::to_string(&entry)?)?;
        }
        log.push(entry);
    }

    let last = snapshot(&model, &adam, spec.train.max_steps.max(start), best);
    if let Some(dir) = &out.dir {
        last.save(&dir.join(LAST_CHECKPOINT))?;
    }
    let best = best_ck.unwrap_or_else(|| last.clone());
    Ok(TrainOutcome { last, best, log })
}

#[cfg(test)]
mod tests;
