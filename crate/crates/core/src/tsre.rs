//! Target-speaker adapters inserted into the speech encoder.
//!
//! Three building blocks, all conditioned on an enrollment embedding `u`:
//!
//! * **SCL**: layer norm whose scale is FiLM-modulated,
//!   `γ' = w(u) ⊙ γ + b(u)` with `w(u) = u·W_w + b_w`, `b(u) = u·W_b + b_b`.
//! * **SCC**: residual grouped convolution whose kernel is shifted by a
//!   projection of `u`: `h + s · conv(h, w_c + FC(u))`.
//! * **SCC-B**: SCC run inside a pointwise down/up bottleneck:
//!   `h + up(h̄ + s · conv(h̄, w_c + FC(u)))`, `h̄ = down(h)`.
//!
//! Every block is the identity at initialization (`W_w = W_b = 0`, `b_w = 1`,
//! `b_b = 0`, `s = 0`, and a zero up-projection), so attaching adapters to a
//! trained encoder leaves its outputs unchanged until fine-tuning moves them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numcore::{ParamStore, Tape, Tensor, Var};
use crate::rng;

/// Enrollment vector conditioning the adapters.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding(Vec<f64>);

impl SpeakerEmbedding {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning("speaker embedding must be non-empty and finite".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.0.clone()).expect("validated at construction")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "scl")]
    Scl,
    #[serde(rename = "scc")]
    Scc,
    #[serde(rename = "scc-b5")]
    SccB5,
    #[serde(rename = "scc-b3")]
    SccB3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Scl, Variant::Scc, Variant::SccB5, Variant::SccB3];

    pub fn has_conv(self) -> bool {
        self != Variant::Scl
    }

    pub fn is_bottleneck(self) -> bool {
        matches!(self, Variant::SccB5 | Variant::SccB3)
    }

    pub fn default_kernel(self) -> usize {
        match self {
            Variant::SccB5 => 5,
            _ => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Scl => "SCL",
            Variant::Scc => "SCC",
            Variant::SccB5 => "SCC-B5",
            Variant::SccB3 => "SCC-B3",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "scl" => Ok(Variant::Scl),
            "scc" => Ok(Variant::Scc),
            "scc-b5" | "sccb5" => Ok(Variant::SccB5),
            "scc-b3" | "sccb3" => Ok(Variant::SccB3),
            other => Err(Error::Config(format!("unknown TSRE variant {other:?}"))),
        }
    }
}

/// Which encoder blocks receive adapters. Block `num_layers` is the head
/// block that follows the weighted layer sum.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Sites {
    #[default]
    All,
    Head,
    Blocks(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TsreConfig {
    pub variant: Variant,
    /// Convolution kernel size; defaults to 5 for SCC-B5 and 3 otherwise.
    #[serde(default)]
    pub kernel_size: Option<usize>,
    /// Bottleneck width for SCC-B; defaults to half the hidden size.
    #[serde(default)]
    pub bottleneck_dim: Option<usize>,
    /// Input channels per group of the full-width SCC convolution.
    #[serde(default = "default_scc_group_width")]
    pub scc_group_width: usize,
    #[serde(default)]
    pub sites: Sites,
}

fn default_scc_group_width() -> usize {
    4
}

impl TsreConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            kernel_size: None,
            bottleneck_dim: None,
            scc_group_width: default_scc_group_width(),
            sites: Sites::All,
        }
    }

    pub fn with_sites(mut self, sites: Sites) -> Self {
        self.sites = sites;
        self
    }

    pub fn kernel(&self) -> usize {
        self.kernel_size.unwrap_or_else(|| self.variant.default_kernel())
    }

    pub fn bottleneck(&self, hidden: usize) -> usize {
        self.bottleneck_dim.unwrap_or(hidden / 2)
    }

    /// Channels the conditional convolution runs over, and its group count.
    pub fn conv_layout(&self, hidden: usize) -> (usize, usize) {
        if self.variant.is_bottleneck() {
            let c = self.bottleneck(hidden);
            (c, c)
        } else {
            (hidden, hidden / self.scc_group_width)
        }
    }

    pub fn site_indices(&self, num_layers: usize) -> Vec<usize> {
        match &self.sites {
            Sites::All => (0..=num_layers).collect(),
            Sites::Head => vec![num_layers],
            Sites::Blocks(b) => {
                let mut b = b.clone();
                b.sort_unstable();
                b.dedup();
                b
            }
        }
    }

    pub fn validate(&self, enc: &EncoderConfig) -> Result<()> {
        let k = self.kernel();
        if k.is_multiple_of(2) || k == 0 {
            return Err(Error::Config(format!("TSRE kernel size must be odd, got {k}")));
        }
        match self.variant {
            Variant::SccB5 if k != 5 => {
                return Err(Error::Config(format!("SCC-B5 requires kernel size 5, got {k}")))
            }
            Variant::SccB3 if k != 3 => {
                return Err(Error::Config(format!("SCC-B3 requires kernel size 3, got {k}")))
            }
            _ => {}
        }
        if self.variant.is_bottleneck() {
            let c = self.bottleneck(enc.hidden_dim);
            if c == 0 {
                return Err(Error::Config("bottleneck width must be >= 1".into()));
            }
        } else if self.variant == Variant::Scc
            && (self.scc_group_width == 0 || !enc.hidden_dim.is_multiple_of(self.scc_group_width))
        {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by SCC group width {}",
                enc.hidden_dim, self.scc_group_width
            )));
        }
        let sites = self.site_indices(enc.num_layers);
        if sites.is_empty() || sites.iter().any(|&s| s > enc.num_layers) {
            return Err(Error::Config(format!(
                "TSRE sites {sites:?} out of range for {} blocks plus head",
                enc.num_layers
            )));
        }
        Ok(())
    }
}

pub fn site_prefix(site: usize, num_layers: usize) -> String {
    if site == num_layers {
        "tsre/head".to_string()
    } else {
        format!("tsre/blocks/{site}")
    }
}

/// Adds freshly initialized adapter parameters for every site to `store`.
pub fn init_params(store: &mut ParamStore, enc: &EncoderConfig, cfg: &TsreConfig, seed: u64) -> Result<()> {
    cfg.validate(enc)?;
    let d = enc.hidden_dim;
    let s = enc.speaker_dim;
    for site in cfg.site_indices(enc.num_layers) {
        let pre = site_prefix(site, enc.num_layers);
        for ln in ["scl1", "scl2"] {
            store.insert(format!("{pre}/{ln}/w_w"), Tensor::zeros(&[s, d]))?;
            store.insert(format!("{pre}/{ln}/b_w"), Tensor::ones(&[d]))?;
            store.insert(format!("{pre}/{ln}/w_b"), Tensor::zeros(&[s, d]))?;
            store.insert(format!("{pre}/{ln}/b_b"), Tensor::zeros(&[d]))?;
        }
        if !cfg.variant.has_conv() {
            continue;
        }
        let k = cfg.kernel();
        let (c, groups) = cfg.conv_layout(d);
        let width = c / groups;
        let taps = c * width * k;
        if cfg.variant.is_bottleneck() {
            let p = format!("{pre}/scc/down_w");
            let std = (1.0 / d as f64).sqrt();
            store.insert(&p, Tensor::randn(&[d, c], std, &mut rng::stream(seed, &p)))?;
            store.insert(format!("{pre}/scc/down_b"), Tensor::zeros(&[c]))?;
        }
        let p = format!("{pre}/scc/w_c");
        let std = (1.0 / (width * k) as f64).sqrt();
        store.insert(&p, Tensor::randn(&[c, width, k], std, &mut rng::stream(seed, &p)))?;
        let p = format!("{pre}/scc/mod_w");
        store.insert(&p, Tensor::randn(&[s, taps], 0.02, &mut rng::stream(seed, &p)))?;
        store.insert(format!("{pre}/scc/mod_b"), Tensor::zeros(&[taps]))?;
        store.insert(format!("{pre}/scc/s"), Tensor::zeros(&[1]))?;
        if cfg.variant.is_bottleneck() {
            store.insert(format!("{pre}/scc/up_w"), Tensor::zeros(&[c, d]))?;
            store.insert(format!("{pre}/scc/up_b"), Tensor::zeros(&[d]))?;
        }
    }
    let ids: Vec<_> = store.ids().filter(|&id| store.path(id).starts_with("tsre/")).collect();
    for id in ids {
        store.get_mut(id).set_requires_grad(true);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct FilmVars {
    pub w_w: Var,
    pub b_w: Var,
    pub w_b: Var,
    pub b_b: Var,
}

impl FilmVars {
    pub fn from_store(tape: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        Ok(Self {
            w_w: tape.param_by_path(store, &format!("{prefix}/w_w"))?,
            b_w: tape.param_by_path(store, &format!("{prefix}/b_w"))?,
            w_b: tape.param_by_path(store, &format!("{prefix}/w_b"))?,
            b_b: tape.param_by_path(store, &format!("{prefix}/b_b"))?,
        })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SccVars {
    pub w_c: Var,
    pub mod_w: Var,
    pub mod_b: Var,
    pub s: Var,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct SccBVars {
    pub down_w: Var,
    pub down_b: Var,
    pub scc: SccVars,
    pub up_w: Var,
    pub up_b: Var,
}

fn as_row(tape: &mut Tape, u: Var) -> Result<Var> {
    let n = tape.value(u).len();
    tape.reshape(u, &[1, n])
}

/// `x·W + b` for a single-row `x`, returned as a flat vector.
fn project(tape: &mut Tape, row: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(row, w)?;
    let y = tape.add_row(y, b)?;
    let n = tape.value(y).len();
    tape.reshape(y, &[n])
}

/// `γ' = (u·W_w + b_w) ⊙ γ + (u·W_b + b_b)`.
pub fn conditioned_gamma(tape: &mut Tape, u: Var, gamma: Var, film: &FilmVars) -> Result<Var> {
    let row = as_row(tape, u)?;
    let scale = project(tape, row, film.w_w, film.b_w)?;
    let shift = project(tape, row, film.w_b, film.b_b)?;
    let g = tape.mul(scale, gamma)?;
    tape.add(g, shift)
}

/// Speaker-conditional layer norm over the last axis of `h`.
pub fn scl_forward(
    tape: &mut Tape,
    h: Var,
    u: Var,
    gamma: Var,
    beta: Var,
    film: &FilmVars,
    eps: f64,
) -> Result<Var> {
    let d = *tape.shape(h).last().expect("non-empty");
    if tape.value(gamma).len() != d || tape.value(film.b_w).len() != d {
        return Err(Error::shape("scl_forward", format!("hidden {d} vs FiLM/γ sizes")));
    }
    let g = conditioned_gamma(tape, u, gamma, film)?;
    tape.layer_norm(h, g, beta, eps)
}

/// Speaker-modulated kernel `w_c + reshape(u·W_mod + b_mod)`.
pub fn conditioned_kernel(tape: &mut Tape, u: Var, v: &SccVars) -> Result<Var> {
    let row = as_row(tape, u)?;
    let delta = project(tape, row, v.mod_w, v.mod_b)?;
    let shape = tape.shape(v.w_c).to_vec();
    let delta = tape.reshape(delta, &shape)?;
    tape.add(v.w_c, delta)
}

/// `h + s · conv(h, w_c + FC(u))`.
pub fn scc_forward(tape: &mut Tape, h: Var, u: Var, v: &SccVars) -> Result<Var> {
    let kernel = conditioned_kernel(tape, u, v)?;
    let c = tape.conv1d_grouped(h, kernel, v.groups)?;
    if tape.shape(c) != tape.shape(h) {
        return Err(Error::shape(
            "scc_forward",
            format!("conv output {:?} vs input {:?}", tape.shape(c), tape.shape(h)),
        ));
    }
    let c = tape.mul_scalar(c, v.s)?;
    tape.add(h, c)
}

/// `h + up(h̄ + s · conv(h̄, w_c + FC(u)))` with `h̄ = down(h)`.
pub fn sccb_forward(tape: &mut Tape, h: Var, u: Var, v: &SccBVars) -> Result<Var> {
    let down = tape.matmul(h, v.down_w)?;
    let down = tape.add_row(down, v.down_b)?;
    let mid = scc_forward(tape, down, u, &v.scc)?;
    let up = tape.matmul(mid, v.up_w)?;
    let up = tape.add_row(up, v.up_b)?;
    tape.add(h, up)
}

/// Adapter set attached to one encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Tsre {
    pub config: TsreConfig,
    num_layers: usize,
    hidden: usize,
    sites: Vec<usize>,
}

impl Tsre {
    pub fn new(config: TsreConfig, enc: &EncoderConfig) -> Result<Self> {
        config.validate(enc)?;
        let sites = config.site_indices(enc.num_layers);
        Ok(Self {
            config,
            num_layers: enc.num_layers,
            hidden: enc.hidden_dim,
            sites,
        })
    }

    pub fn has_site(&self, site: usize) -> bool {
        self.sites.contains(&site)
    }

    pub fn sites(&self) -> &[usize] {
        &self.sites
    }

    fn prefix(&self, site: usize) -> String {
        site_prefix(site, self.num_layers)
    }

    /// Applies the site's conditional convolution (if the variant has one).
    pub fn conv_at(&self, tape: &mut Tape, store: &ParamStore, site: usize, h: Var, u: Var) -> Result<Var> {
        if !self.config.variant.has_conv() || !self.has_site(site) {
            return Ok(h);
        }
        let pre = format!("{}/scc", self.prefix(site));
        let (_, groups) = self.config.conv_layout(self.hidden);
        let scc = SccVars {
            w_c: tape.param_by_path(store, &format!("{pre}/w_c"))?,
            mod_w: tape.param_by_path(store, &format!("{pre}/mod_w"))?,
            mod_b: tape.param_by_path(store, &format!("{pre}/mod_b"))?,
            s: tape.param_by_path(store, &format!("{pre}/s"))?,
            groups,
        };
        if self.config.variant.is_bottleneck() {
            let v = SccBVars {
                down_w: tape.param_by_path(store, &format!("{pre}/down_w"))?,
                down_b: tape.param_by_path(store, &format!("{pre}/down_b"))?,
                scc,
                up_w: tape.param_by_path(store, &format!("{pre}/up_w"))?,
                up_b: tape.param_by_path(store, &format!("{pre}/up_b"))?,
            };
            sccb_forward(tape, h, u, &v)
        } else {
            scc_forward(tape, h, u, &scc)
        }
    }

    /// FiLM parameters for layer norm `which` (1 or 2) of `site`, if present.
    pub fn film_at(&self, tape: &mut Tape, store: &ParamStore, site: usize, which: usize) -> Result<Option<FilmVars>> {
        if !self.has_site(site) {
            return Ok(None);
        }
        let pre = format!("{}/scl{which}", self.prefix(site));
        FilmVars::from_store(tape, store, &pre).map(Some)
    }
}

/// Adapter parameter tally split into weight and bias parts.
///
/// Weights are the FiLM projection matrices, convolution kernels, pointwise
/// projections, and the scalar scales; biases are every additive vector
/// (`b_w`, `b_b`, `mod_b`, `down_b`, `up_b`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub scl_weights: usize,
    pub scl_biases: usize,
    pub conv_weights: usize,
    pub conv_biases: usize,
}

impl ParamCount {
    pub fn total(&self) -> usize {
        self.scl_weights + self.scl_biases + self.conv_weights + self.conv_biases
    }

    /// The ablation-table convention: the weight count of the component that
    /// distinguishes the variant (SCL for `Scl`, the convolution otherwise).
    pub fn table_value(&self, variant: Variant) -> usize {
        if variant.has_conv() {
            self.conv_weights
        } else {
            self.scl_weights
        }
    }
}

pub fn count_params(enc: &EncoderConfig, cfg: &TsreConfig) -> Result<ParamCount> {
    cfg.validate(enc)?;
    let d = enc.hidden_dim;
    let s = enc.speaker_dim;
    let n_sites = cfg.site_indices(enc.num_layers).len();
    let mut count = ParamCount {
        scl_weights: n_sites * 2 * (2 * s * d),
        scl_biases: n_sites * 2 * (2 * d),
        conv_weights: 0,
        conv_biases: 0,
    };
    if cfg.variant.has_conv() {
        let k = cfg.kernel();
        let (c, groups) = cfg.conv_layout(d);
        let taps = c * (c / groups) * k;
        let mut w = taps + s * taps + 1;
        let mut b = taps;
        if cfg.variant.is_bottleneck() {
            w += 2 * d * c;
            b += c + d;
        }
        count.conv_weights = n_sites * w;
        count.conv_biases = n_sites * b;
    }
    Ok(count)
}

/// Count at the large-model preset (hidden 1024, speaker 256, bottleneck
/// 512) with adapters in the head block only.
pub fn paper_scale_count(variant: Variant) -> ParamCount {
    let enc = EncoderConfig::paper_scale();
    let cfg = TsreConfig::new(variant).with_sites(Sites::Head);
    count_params(&enc, &cfg).expect("preset is valid")
}
