//! Speech and image encoders mapping into the shared retrieval space.
//!
//! The speech tower is a small pre-norm transformer: input projection plus
//! sinusoidal positions, a stack of blocks, a learnable softmax-weighted sum
//! over every layer output (input included), one head block, temporal mean
//! pooling, and a projection to the embedding size. The image tower is a
//! frozen random projection of a caption latent. Both outputs are
//! unit-norm.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor, Var, LAYER_NORM_EPS};
use crate::rng;
use crate::tsre::{self, SpeakerEmbedding, Tsre, TsreConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    pub embed_dim: usize,
    pub speaker_dim: usize,
    /// Features per input frame.
    pub input_dim: usize,
    /// Size of the caption latent the image tower consumes.
    pub latent_dim: usize,
    /// Switches parameter accounting to the large-model sizes (hidden 1024,
    /// speaker 256). Ignored when building a model.
    pub paper_scale_preset: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 64,
            num_heads: 4,
            ff_dim: 128,
            embed_dim: 32,
            speaker_dim: 16,
            input_dim: 32,
            latent_dim: 24,
            paper_scale_preset: false,
        }
    }
}

impl EncoderConfig {
    pub fn paper_scale() -> Self {
        Self {
            num_layers: 1,
            hidden_dim: 1024,
            num_heads: 16,
            ff_dim: 4096,
            embed_dim: 512,
            speaker_dim: 256,
            input_dim: 1024,
            latent_dim: 512,
            paper_scale_preset: true,
        }
    }

    /// The configuration parameter accounting should use.
    pub fn accounting(&self) -> Self {
        if self.paper_scale_preset {
            Self::paper_scale()
        } else {
            self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("num_heads", self.num_heads),
            ("ff_dim", self.ff_dim),
            ("embed_dim", self.embed_dim),
            ("speaker_dim", self.speaker_dim),
            ("input_dim", self.input_dim),
            ("latent_dim", self.latent_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be >= 1")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        Ok(())
    }
}

/// Fixed sinusoidal position table `[T × D]`.
pub fn sinusoidal_positions(time: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; time * dim];
    for t in 0..time {
        for i in 0..dim {
            let pair = (i / 2) as f64;
            let angle = t as f64 / 10000f64.powf(2.0 * pair / dim as f64);
            data[t * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![time, dim], data).expect("finite table")
}

/// `Σ_l softmax(α)_l · H_l`.
pub fn weighted_layer_sum(tape: &mut Tape, layers: &[Var], alpha: Var) -> Result<Var> {
    let w = tape.softmax(alpha)?;
    tape.weighted_sum(w, layers)
}

/// Speech encoder plus frozen image projection, with optional adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalModel {
    pub config: EncoderConfig,
    pub params: ParamStore,
    tsre: Option<Tsre>,
}

pub const IMAGE_PREFIX: &str = "image/";
pub const TSRE_PREFIX: &str = "tsre/";
pub const HEAD_PREFIX: &str = "speech/head/";

fn block_paths(prefix: &str) -> [String; 12] {
    [
        "ln1/gamma", "ln1/beta", "attn/wqkv", "attn/bqkv", "attn/wo", "attn/bo", "ln2/gamma",
        "ln2/beta", "ff/w1", "ff/b1", "ff/w2", "ff/b2",
    ]
    .map(|p| format!("{prefix}/{p}"))
}

impl RetrievalModel {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let d = config.hidden_dim;
        let f = config.ff_dim;
        let mut add = |path: String, shape: &[usize], init: Init| -> Result<()> {
            let t = match init {
                Init::Zeros => Tensor::zeros(shape),
                Init::Ones => Tensor::ones(shape),
                Init::Normal(std) => Tensor::randn(shape, std, &mut rng::stream(seed, &path)),
            };
            let trainable = !path.starts_with(IMAGE_PREFIX);
            params.insert(path, t.with_requires_grad(trainable))?;
            Ok(())
        };
        let fan = |n: usize| (1.0 / n as f64).sqrt();

        add("speech/input/w".into(), &[config.input_dim, d], Init::Normal(fan(config.input_dim)))?;
        add("speech/input/b".into(), &[d], Init::Zeros)?;
        let mut block_prefixes: Vec<String> = (0..config.num_layers).map(|i| format!("speech/blocks/{i}")).collect();
        block_prefixes.push("speech/head".into());
        for (bi, pre) in block_prefixes.iter().enumerate() {
            if bi == config.num_layers {
                add("speech/layer_weights".into(), &[config.num_layers + 1], Init::Zeros)?;
            }
            add(format!("{pre}/ln1/gamma"), &[d], Init::Ones)?;
            add(format!("{pre}/ln1/beta"), &[d], Init::Zeros)?;
            add(format!("{pre}/attn/wqkv"), &[d, 3 * d], Init::Normal(fan(d)))?;
            add(format!("{pre}/attn/bqkv"), &[3 * d], Init::Zeros)?;
            add(format!("{pre}/attn/wo"), &[d, d], Init::Normal(0.5 * fan(d)))?;
            add(format!("{pre}/attn/bo"), &[d], Init::Zeros)?;
            add(format!("{pre}/ln2/gamma"), &[d], Init::Ones)?;
            add(format!("{pre}/ln2/beta"), &[d], Init::Zeros)?;
            add(format!("{pre}/ff/w1"), &[d, f], Init::Normal(fan(d)))?;
            add(format!("{pre}/ff/b1"), &[f], Init::Zeros)?;
            add(format!("{pre}/ff/w2"), &[f, d], Init::Normal(0.5 * fan(f)))?;
            add(format!("{pre}/ff/b2"), &[d], Init::Zeros)?;
        }
        add("speech/out/w".into(), &[d, config.embed_dim], Init::Normal(fan(d)))?;
        add("speech/out/b".into(), &[config.embed_dim], Init::Zeros)?;
        add(
            "image/proj".into(),
            &[config.latent_dim, config.embed_dim],
            Init::Normal(fan(config.latent_dim)),
        )?;
        debug_assert!(block_prefixes.iter().all(|p| block_paths(p).iter().all(|q| params.id(q).is_some())));
        Ok(Self {
            config,
            params,
            tsre: None,
        })
    }

    pub fn tsre(&self) -> Option<&Tsre> {
        self.tsre.as_ref()
    }

    /// Adds freshly initialized adapters. Fails if adapters are attached.
    pub fn attach_tsre(&mut self, cfg: TsreConfig, seed: u64) -> Result<()> {
        if self.tsre.is_some() {
            return Err(Error::Config("TSRE already attached".into()));
        }
        let t = Tsre::new(cfg.clone(), &self.config)?;
        tsre::init_params(&mut self.params, &self.config, &cfg, seed)?;
        self.tsre = Some(t);
        Ok(())
    }

    /// Rebinds adapters whose parameters are already in `params` (used when
    /// loading a checkpoint).
    pub fn bind_tsre(&mut self, cfg: TsreConfig) -> Result<()> {
        let t = Tsre::new(cfg, &self.config)?;
        if !self.params.iter().any(|(_, p, _)| p.starts_with(TSRE_PREFIX)) {
            return Err(Error::Config("no tsre/ parameters to bind".into()));
        }
        self.tsre = Some(t);
        Ok(())
    }

    pub fn detach_tsre(&mut self) {
        self.params.remove_prefix(TSRE_PREFIX);
        self.tsre = None;
    }

    fn check_conditioning(&self, u: Option<&SpeakerEmbedding>) -> Result<()> {
        match (&self.tsre, u) {
            (Some(_), None) => Err(Error::Conditioning(
                "adapters attached but no speaker embedding given".into(),
            )),
            (None, Some(_)) => Err(Error::Conditioning(
                "speaker embedding given but no adapters attached".into(),
            )),
            (Some(_), Some(u)) if u.dim() != self.config.speaker_dim => Err(Error::Conditioning(format!(
                "speaker embedding has {} dims, encoder expects {}",
                u.dim(),
                self.config.speaker_dim
            ))),
            _ => Ok(()),
        }
    }

    fn p(&self, tape: &mut Tape, path: &str) -> Result<Var> {
        tape.param_by_path(&self.params, path)
    }

    fn norm(&self, tape: &mut Tape, site: usize, which: usize, prefix: &str, h: Var, u: Option<Var>) -> Result<Var> {
        let gamma = self.p(tape, &format!("{prefix}/ln{which}/gamma"))?;
        let beta = self.p(tape, &format!("{prefix}/ln{which}/beta"))?;
        if let (Some(t), Some(u)) = (&self.tsre, u) {
            if let Some(film) = t.film_at(tape, &self.params, site, which)? {
                return tsre::scl_forward(tape, h, u, gamma, beta, &film, LAYER_NORM_EPS);
            }
        }
        tape.layer_norm(h, gamma, beta, LAYER_NORM_EPS)
    }

    fn attention(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let d = self.config.hidden_dim;
        let heads = self.config.num_heads;
        let dh = d / heads;
        let wqkv = self.p(tape, &format!("{prefix}/attn/wqkv"))?;
        let bqkv = self.p(tape, &format!("{prefix}/attn/bqkv"))?;
        let qkv = tape.matmul(x, wqkv)?;
        let qkv = tape.add_row(qkv, bqkv)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for hd in 0..heads {
            let q = tape.slice_cols(qkv, hd * dh, dh)?;
            let k = tape.slice_cols(qkv, d + hd * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * d + hd * dh, dh)?;
            let kt = tape.transpose(k)?;
            let scores = tape.matmul(q, kt)?;
            let scores = tape.scale(scores, scale)?;
            let attn = tape.softmax(scores)?;
            outs.push(tape.matmul(attn, v)?);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
        let wo = self.p(tape, &format!("{prefix}/attn/wo"))?;
        let bo = self.p(tape, &format!("{prefix}/attn/bo"))?;
        let o = tape.matmul(cat, wo)?;
        tape.add_row(o, bo)
    }

    fn feed_forward(&self, tape: &mut Tape, prefix: &str, x: Var) -> Result<Var> {
        let w1 = self.p(tape, &format!("{prefix}/ff/w1"))?;
        let b1 = self.p(tape, &format!("{prefix}/ff/b1"))?;
        let w2 = self.p(tape, &format!("{prefix}/ff/w2"))?;
        let b2 = self.p(tape, &format!("{prefix}/ff/b2"))?;
        let h = tape.matmul(x, w1)?;
        let h = tape.add_row(h, b1)?;
        let h = tape.gelu(h)?;
        let h = tape.matmul(h, w2)?;
        tape.add_row(h, b2)
    }

    /// Pre-norm block. With adapters at `site`, the conditional convolution
    /// updates the residual stream on entry and both layer norms become
    /// speaker-conditional.
    fn block(&self, tape: &mut Tape, site: usize, prefix: &str, h: Var, u: Option<Var>) -> Result<Var> {
        let mut x = h;
        if let (Some(t), Some(u)) = (&self.tsre, u) {
            x = t.conv_at(tape, &self.params, site, x, u)?;
        }
        let n1 = self.norm(tape, site, 1, prefix, x, u)?;
        let a = self.attention(tape, prefix, n1)?;
        x = tape.add(x, a)?;
        let n2 = self.norm(tape, site, 2, prefix, x, u)?;
        let f = self.feed_forward(tape, prefix, n2)?;
        tape.add(x, f)
    }

    /// Frame-level hidden states of the head block, before pooling.
    fn speech_hidden(&self, tape: &mut Tape, x: &Tensor, u: Option<&SpeakerEmbedding>) -> Result<Var> {
        self.check_conditioning(u)?;
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::shape(
                "encode_speech",
                format!("expected [T x {}], got {shape:?}", self.config.input_dim),
            ));
        }
        let time = shape[0];
        let uv = u.map(|u| tape.constant(&u.to_tensor()));
        let xv = tape.constant(x);
        let w = self.p(tape, "speech/input/w")?;
        let b = self.p(tape, "speech/input/b")?;
        let h = tape.matmul(xv, w)?;
        let h = tape.add_row(h, b)?;
        let pe = tape.constant(&sinusoidal_positions(time, self.config.hidden_dim));
        let mut h = tape.add(h, pe)?;
        let mut layers = vec![h];
        for i in 0..self.config.num_layers {
            h = self.block(tape, i, &format!("speech/blocks/{i}"), h, uv)?;
            layers.push(h);
        }
        let alpha = self.p(tape, "speech/layer_weights")?;
        let mixed = weighted_layer_sum(tape, &layers, alpha)?;
        self.block(tape, self.config.num_layers, "speech/head", mixed, uv)
    }

    /// Unit-norm utterance embedding `[E]` recorded on `tape`.
    pub fn speech_forward(&self, tape: &mut Tape, x: &Tensor, u: Option<&SpeakerEmbedding>) -> Result<Var> {
        let h = self.speech_hidden(tape, x, u)?;
        let pooled = tape.mean_rows(h)?;
        let d = self.config.hidden_dim;
        let row = tape.reshape(pooled, &[1, d])?;
        let w = self.p(tape, "speech/out/w")?;
        let b = self.p(tape, "speech/out/b")?;
        let e = tape.matmul(row, w)?;
        let e = tape.add_row(e, b)?;
        let e = tape.reshape(e, &[self.config.embed_dim])?;
        tape.l2_normalize(e)
    }

    /// Unit-norm image embeddings `[N × E]` for caption latents `[N × latent]`.
    pub fn image_forward(&self, tape: &mut Tape, latents: &Tensor) -> Result<Var> {
        let s = latents.shape();
        let n = if s.len() == 1 { 1 } else { s[0] };
        if latents.last_dim() != self.config.latent_dim || s.len() > 2 {
            return Err(Error::shape(
                "encode_image",
                format!("expected latent size {}, got {s:?}", self.config.latent_dim),
            ));
        }
        let x = tape.constant(latents);
        let x = tape.reshape(x, &[n, self.config.latent_dim])?;
        let proj = self.p(tape, "image/proj")?;
        let e = tape.matmul(x, proj)?;
        tape.l2_normalize(e)
    }

    pub fn encode_speech(&self, x: &Tensor, u: Option<&SpeakerEmbedding>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = self.speech_forward(&mut tape, x, u)?;
        Ok(tape.tensor(e))
    }

    pub fn encode_image(&self, latent: &[f64]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = self.image_forward(&mut tape, &Tensor::vector(latent.to_vec())?)?;
        tape.tensor(e).reshape(vec![self.config.embed_dim])
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|(_, _, t)| t.requires_grad()).map(|(_, _, t)| t.numel()).sum()
    }
}

enum Init {
    Zeros,
    Ones,
    Normal(f64),
}
