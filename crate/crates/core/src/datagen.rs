//! Synthetic multi-speaker corpora.
//!
//! Captions are Gaussian latents. An utterance renders a caption through a
//! fixed random lexicon: latent coordinate `j` owns a short frame pattern
//! placed at its own position in the utterance, and the content is the
//! latent-weighted sum of patterns. Channels are grouped into contiguous
//! bands and every band carries the same content. Patterns are zero-mean
//! over time, so a clean utterance's temporal mean is exactly the speaker
//! offset (plus noise).
//!
//! A speaker is an 8-dimensional signature `σ`. Coloring is a per-channel
//! affine map `x ↦ g ⊙ x + o` with band-constant gains
//! `g = exp(c_g · M_g σ)` and offsets `o = c_o · M_o σ`, where `M_g`, `M_o`
//! are fixed random matrices; a zero signature is the identity. In a
//! mixture each band is dominated by whichever speaker is loudest there.
//! Enrollment embeddings are a frozen projection of the mean-pooled
//! enrollment frames, unit-normalized.
//!
//! Mixtures are plain weighted sums. The corpus gives every component gain
//! `1/rms`, so each speaker enters at unit loudness.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::rng;
use crate::tsre::SpeakerEmbedding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub num_images: usize,
    pub captions_per_image: usize,
    pub num_speakers: usize,
    /// Speakers per mixture.
    pub k: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub input_dim: usize,
    /// Contiguous channel bands. Content is replicated in every band and
    /// speaker gains are constant within a band.
    pub bands: usize,
    pub utterance_frames: usize,
    /// Length of each lexicon pattern, in frames.
    pub pattern_frames: usize,
    pub enrollment_frames: usize,
    pub signature_dim: usize,
    pub speaker_dim: usize,
    pub noise_std: f64,
    pub gain_contrast: f64,
    pub offset_scale: f64,
    /// Spread of caption latents around their image latent.
    pub caption_jitter: f64,
    /// Image counts for train / val / test; must sum to `num_images`.
    pub split_images: [usize; 3],
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_images: 400,
            captions_per_image: 1,
            num_speakers: 40,
            k: 2,
            seed: 0,
            latent_dim: 24,
            input_dim: 32,
            bands: 8,
            utterance_frames: 16,
            pattern_frames: 4,
            enrollment_frames: 24,
            signature_dim: 8,
            speaker_dim: 16,
            noise_std: 0.05,
            gain_contrast: 2.0,
            offset_scale: 0.5,
            caption_jitter: 0.1,
            split_images: [300, 50, 50],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(1..=3).contains(&self.k) {
            return err(format!("k must be 1, 2 or 3, got {}", self.k));
        }
        if self.num_speakers < self.k {
            return err(format!("{} speakers cannot fill {}-speaker mixtures", self.num_speakers, self.k));
        }
        if self.split_images.iter().sum::<usize>() != self.num_images {
            return err(format!("split sizes {:?} do not sum to {}", self.split_images, self.num_images));
        }
        for (name, n) in [("train", 0), ("val", 1), ("test", 2)] {
            if self.split_images[n] * self.captions_per_image < self.k {
                return err(format!("{name} split has too few captions for {}-speaker mixtures", self.k));
            }
        }
        if self.captions_per_image == 0
            || self.latent_dim == 0
            || self.input_dim == 0
            || self.signature_dim == 0
            || self.speaker_dim == 0
        {
            return err("dimensions and counts must be >= 1".into());
        }
        if self.bands == 0 || !self.input_dim.is_multiple_of(self.bands) {
            return err(format!("input_dim {} is not divisible into {} bands", self.input_dim, self.bands));
        }
        if self.pattern_frames == 0 || self.pattern_frames > self.utterance_frames.min(self.enrollment_frames) {
            return err("pattern_frames must be in 1..=min(utterance, enrollment) frames".into());
        }
        if !(self.noise_std >= 0.0) || !self.gain_contrast.is_finite() || !self.offset_scale.is_finite() {
            return err("noise_std must be >= 0 and scales finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerProfile {
    pub speaker_id: String,
    pub signature: Vec<f64>,
    pub enrollment_frames: Tensor,
    pub embedding: SpeakerEmbedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLatent {
    pub caption_id: String,
    pub image_id: String,
    pub latent: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub speaker_id: String,
    pub caption_id: String,
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureSample {
    pub sample_id: String,
    pub split: Split,
    pub mixture: Tensor,
    pub components: Vec<Component>,
    /// Zero-based index of the target component.
    pub target: usize,
    /// One enrollment per component, in component order.
    pub enrollments: Vec<SpeakerEmbedding>,
    pub image_id: String,
    /// The target's clean utterance at unit RMS.
    pub clean_target: Tensor,
}

impl MixtureSample {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    pub fn target_enrollment(&self) -> &SpeakerEmbedding {
        &self.enrollments[self.target]
    }
}

/// Fixed random maps shared by every utterance of a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct Renderer {
    cfg: SynthConfig,
    /// `[latent × T × input]`
    lexicon: Vec<f64>,
    /// `[latent × T_e × input]`
    enroll_lexicon: Vec<f64>,
    /// `[bands × signature]`
    gain_map: Vec<f64>,
    /// `[input × signature]`
    offset_map: Vec<f64>,
    /// `[speaker_dim × input]`
    enroll_proj: Vec<f64>,
}

fn zero_mean_lexicon(cfg: &SynthConfig, frames: usize, path: &str) -> Vec<f64> {
    let (l, d) = (cfg.pattern_frames, cfg.input_dim);
    let w = d / cfg.bands;
    let mut s = rng::stream(cfg.seed, path);
    let mut out = vec![0.0; cfg.latent_dim * frames * d];
    let slots = frames - l + 1;
    for j in 0..cfg.latent_dim {
        let start = (j * slots) / cfg.latent_dim;
        let pat = rng::normal_vec(&mut s, l * w, (frames as f64 / (l * cfg.latent_dim) as f64).sqrt());
        let block = &mut out[j * frames * d..(j + 1) * frames * d];
        for t in 0..l {
            for c in 0..d {
                block[(start + t) * d + c] = pat[t * w + c % w];
            }
        }
        for c in 0..d {
            let mean = (0..frames).map(|t| block[t * d + c]).sum::<f64>() / frames as f64;
            for t in 0..frames {
                block[t * d + c] -= mean;
            }
        }
    }
    out
}

impl Renderer {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, sd) = (cfg.input_dim, cfg.signature_dim);
        let scale = 1.0 / (sd as f64).sqrt();
        Ok(Self {
            cfg: cfg.clone(),
            lexicon: zero_mean_lexicon(cfg, cfg.utterance_frames, "data/lexicon"),
            enroll_lexicon: zero_mean_lexicon(cfg, cfg.enrollment_frames, "data/enroll_lexicon"),
            gain_map: rng::normal_vec(&mut rng::stream(cfg.seed, "data/coloring/gain"), cfg.bands * sd, scale),
            offset_map: rng::normal_vec(&mut rng::stream(cfg.seed, "data/coloring/offset"), d * sd, scale),
            enroll_proj: rng::normal_vec(
                &mut rng::stream(cfg.seed, "data/enroll_proj"),
                cfg.speaker_dim * d,
                1.0 / (d as f64).sqrt(),
            ),
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    /// Per-channel gain and offset for a signature.
    pub fn coloring(&self, signature: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let sd = self.cfg.signature_dim;
        let proj = |m: &[f64]| -> Vec<f64> {
            m.chunks(sd).map(|row| row.iter().zip(signature).map(|(a, b)| a * b).sum()).collect()
        };
        let w = self.cfg.input_dim / self.cfg.bands;
        let gain = proj(&self.gain_map)
            .into_iter()
            .flat_map(|v| std::iter::repeat_n((self.cfg.gain_contrast * v).exp(), w))
            .collect();
        let offset = proj(&self.offset_map).into_iter().map(|v| self.cfg.offset_scale * v).collect();
        (gain, offset)
    }

    fn content(&self, lexicon: &[f64], frames: usize, latent: &[f64]) -> Vec<f64> {
        let block = frames * self.cfg.input_dim;
        let mut out = vec![0.0; block];
        for (j, z) in latent.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(&lexicon[j * block..(j + 1) * block]) {
                *o += z * p;
            }
        }
        out
    }

    fn colorize(&self, content: Vec<f64>, signature: &[f64], noise_path: &str, seed: u64) -> Tensor {
        let d = self.cfg.input_dim;
        let frames = content.len() / d;
        let (gain, offset) = self.coloring(signature);
        let mut s = rng::stream(seed, noise_path);
        let noise = rng::normal_vec(&mut s, content.len(), self.cfg.noise_std);
        let data = content
            .iter()
            .zip(noise)
            .enumerate()
            .map(|(i, (c, n))| gain[i % d] * c + offset[i % d] + n)
            .collect();
        Tensor::new(vec![frames, d], data).expect("finite rendering")
    }

    /// `[T × input_dim]` frames of `caption` spoken by `speaker`.
    pub fn render_utterance(&self, caption: &CaptionLatent, speaker: &SpeakerProfile, seed: u64) -> Tensor {
        self.render_with_signature(caption, &speaker.speaker_id, &speaker.signature, seed)
    }

    pub fn render_with_signature(&self, caption: &CaptionLatent, speaker_id: &str, signature: &[f64], seed: u64) -> Tensor {
        let content = self.content(&self.lexicon, self.cfg.utterance_frames, &caption.latent);
        let path = format!("data/utt/{}/{}", caption.caption_id, speaker_id);
        self.colorize(content, signature, &path, seed)
    }

    /// Enrollment segment `segment` of a speaker: a dedicated caption never
    /// used in mixtures, rendered over `enrollment_frames` frames.
    pub fn enrollment_segment(&self, speaker_id: &str, signature: &[f64], segment: usize) -> Tensor {
        let path = format!("data/enroll/{speaker_id}/{segment}");
        let latent = rng::normal_vec(&mut rng::stream(self.cfg.seed, &format!("{path}/latent")), self.cfg.latent_dim, 1.0);
        let content = self.content(&self.enroll_lexicon, self.cfg.enrollment_frames, &latent);
        self.colorize(content, signature, &format!("{path}/noise"), self.cfg.seed)
    }

    /// Unit-norm projection of the mean-pooled frames.
    pub fn embed_frames(&self, frames: &Tensor) -> Result<SpeakerEmbedding> {
        let d = self.cfg.input_dim;
        if frames.last_dim() != d {
            return Err(Error::shape("enroll", format!("expected {d} channels, got {:?}", frames.shape())));
        }
        let rows = frames.rows() as f64;
        let mut mean = vec![0.0; d];
        for row in frames.data().chunks(d) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / rows;
            }
        }
        let e: Vec<f64> = self.enroll_proj.chunks(d).map(|r| r.iter().zip(&mean).map(|(a, b)| a * b).sum()).collect();
        let n = e.iter().map(|v| v * v).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(Error::Degenerate {
                op: "enroll",
                detail: "mean-pooled enrollment projects to zero".into(),
            });
        }
        SpeakerEmbedding::new(e.into_iter().map(|v| v / n).collect())
    }

    pub fn enroll(&self, speaker: &SpeakerProfile) -> Result<SpeakerEmbedding> {
        self.embed_frames(&speaker.enrollment_frames)
    }

    pub fn speaker(&self, index: usize) -> Result<SpeakerProfile> {
        let speaker_id = format!("spk{index:03}");
        let signature = rng::normal_vec(
            &mut rng::stream(self.cfg.seed, &format!("data/speaker/{speaker_id}/signature")),
            self.cfg.signature_dim,
            1.0,
        );
        let enrollment_frames = self.enrollment_segment(&speaker_id, &signature, 0);
        let embedding = self.embed_frames(&enrollment_frames)?;
        Ok(SpeakerProfile {
            speaker_id,
            signature,
            enrollment_frames,
            embedding,
        })
    }
}

pub fn rms(x: &Tensor) -> f64 {
    (x.data().iter().map(|v| v * v).sum::<f64>() / x.numel() as f64).sqrt()
}

/// Frame-wise `Σ_q gains[q] · utterances[q]`; shorter inputs are zero-padded
/// at the tail to the longest.
pub fn mix(utterances: &[Tensor], gains: &[f64]) -> Result<Tensor> {
    if utterances.is_empty() {
        return Err(Error::Config("mix needs at least one utterance".into()));
    }
    if utterances.len() != gains.len() {
        return Err(Error::Config(format!("{} utterances but {} gains", utterances.len(), gains.len())));
    }
    let d = utterances[0].last_dim();
    if utterances.iter().any(|u| u.shape().len() != 2 || u.last_dim() != d) {
        return Err(Error::shape("mix", "utterances must share the channel count"));
    }
    let frames = utterances.iter().map(|u| u.rows()).max().expect("non-empty");
    let mut out = vec![0.0; frames * d];
    for (u, g) in utterances.iter().zip(gains) {
        for (o, v) in out.iter_mut().zip(u.data()) {
            *o += g * v;
        }
    }
    Tensor::new(vec![frames, d], out)
}

/// Gain that brings `x` to unit RMS.
pub fn unit_rms_gain(x: &Tensor) -> Result<f64> {
    let r = rms(x);
    if r == 0.0 {
        return Err(Error::Degenerate {
            op: "mix",
            detail: "silent utterance".into(),
        });
    }
    Ok(1.0 / r)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitStats {
    pub split: Split,
    pub images: usize,
    pub utterances: usize,
    pub speakers_per_utterance: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: SynthConfig,
    pub speakers: Vec<SpeakerProfile>,
    pub captions: Vec<CaptionLatent>,
    /// Image id → image latent.
    pub images: BTreeMap<String, Vec<f64>>,
    pub image_split: BTreeMap<String, Split>,
    pub samples: Vec<MixtureSample>,
}

pub fn build_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    let renderer = Renderer::new(cfg)?;
    let speakers = (0..cfg.num_speakers).map(|i| renderer.speaker(i)).collect::<Result<Vec<_>>>()?;

    let mut images = BTreeMap::new();
    let mut captions = Vec::new();
    for i in 0..cfg.num_images {
        let image_id = format!("img{i:04}");
        let base = rng::normal_vec(&mut rng::stream(cfg.seed, &format!("data/{image_id}/latent")), cfg.latent_dim, 1.0);
        for c in 0..cfg.captions_per_image {
            let caption_id = format!("{image_id}_c{c}");
            let jitter = rng::normal_vec(
                &mut rng::stream(cfg.seed, &format!("data/{caption_id}/jitter")),
                cfg.latent_dim,
                cfg.caption_jitter,
            );
            captions.push(CaptionLatent {
                caption_id,
                image_id: image_id.clone(),
                latent: base.iter().zip(&jitter).map(|(a, b)| a + b).collect(),
            });
        }
        images.insert(image_id, base);
    }

    let mut order: Vec<String> = images.keys().cloned().collect();
    order.shuffle(&mut rng::stream(cfg.seed, "data/split"));
    let mut image_split = BTreeMap::new();
    let [n_train, n_val, _] = cfg.split_images;
    for (i, id) in order.into_iter().enumerate() {
        let s = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        image_split.insert(id, s);
    }

    let mut samples = Vec::with_capacity(captions.len());
    for split in Split::ALL {
        let pool: Vec<&CaptionLatent> = captions.iter().filter(|c| image_split[&c.image_id] == split).collect();
        for target in &pool {
            let mut s = rng::stream(cfg.seed, &format!("data/mixture/{}", target.caption_id));
            let mut spk: Vec<usize> = (0..cfg.num_speakers).collect();
            spk.shuffle(&mut s);
            let others: Vec<&&CaptionLatent> = pool.iter().filter(|c| c.image_id != target.image_id).collect();
            let mut chosen: Vec<&CaptionLatent> = others.choose_multiple(&mut s, cfg.k - 1).map(|c| **c).collect();
            if chosen.len() != cfg.k - 1 {
                return Err(Error::Config(format!(
                    "{} split cannot supply {} distinct interfering images",
                    split.name(),
                    cfg.k - 1
                )));
            }
            let p = s.gen_range(0..cfg.k);
            chosen.insert(p, target);

            let mut utts = Vec::with_capacity(cfg.k);
            let mut components = Vec::with_capacity(cfg.k);
            let mut enrollments = Vec::with_capacity(cfg.k);
            for (q, cap) in chosen.iter().enumerate() {
                let sp = &speakers[spk[q]];
                let u = renderer.render_utterance(cap, sp, cfg.seed);
                let gain = unit_rms_gain(&u)?;
                components.push(Component {
                    speaker_id: sp.speaker_id.clone(),
                    caption_id: cap.caption_id.clone(),
                    gain,
                });
                enrollments.push(sp.embedding.clone());
                utts.push(u);
            }
            let gains: Vec<f64> = components.iter().map(|c| c.gain).collect();
            let mixture = mix(&utts, &gains)?;
            let clean_target = mix(&utts[p..=p], &gains[p..=p])?;
            samples.push(MixtureSample {
                sample_id: format!("{}_{}", split.name(), target.caption_id),
                split,
                mixture,
                components,
                target: p,
                enrollments,
                image_id: target.image_id.clone(),
                clean_target,
            });
        }
    }
    Ok(Corpus {
        config: cfg.clone(),
        speakers,
        captions,
        images,
        image_split,
        samples,
    })
}

/// Manifest line for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub sample_id: String,
    pub split: Split,
    pub image_id: String,
    pub target: usize,
    pub components: Vec<Component>,
    /// Byte offsets into the frame store's data section.
    pub mixture_offset: u64,
    pub clean_offset: u64,
    pub frames: usize,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FRAMES_FILE: &str = "frames.bin";
pub const CORPUS_FILE: &str = "corpus.json";

impl Corpus {
    pub fn split(&self, split: Split) -> Vec<&MixtureSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn k(&self) -> usize {
        self.config.k
    }

    pub fn image_latent(&self, image_id: &str) -> Result<&[f64]> {
        self.images
            .get(image_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Config(format!("unknown image {image_id}")))
    }

    pub fn stats(&self) -> Vec<SplitStats> {
        Split::ALL
            .iter()
            .map(|&split| {
                let samples = self.split(split);
                let images: BTreeSet<&str> = samples.iter().map(|s| s.image_id.as_str()).collect();
                SplitStats {
                    split,
                    images: images.len(),
                    utterances: samples.len(),
                    speakers_per_utterance: self.config.k,
                }
            })
            .collect()
    }

    fn frame_store(&self) -> Container {
        let mut c = Container::new(json!({"kind": "frames"}));
        for s in &self.samples {
            c.push(format!("mixture/{}", s.sample_id), s.mixture.clone());
            c.push(format!("clean/{}", s.sample_id), s.clean_target.clone());
        }
        for (id, latent) in &self.images {
            c.push(format!("image/{id}"), Tensor::vector(latent.clone()).expect("finite"));
        }
        for sp in &self.speakers {
            c.push(format!("speaker/{}/signature", sp.speaker_id), Tensor::vector(sp.signature.clone()).expect("finite"));
            c.push(format!("speaker/{}/enrollment_frames", sp.speaker_id), sp.enrollment_frames.clone());
            c.push(format!("speaker/{}/embedding", sp.speaker_id), sp.embedding.to_tensor());
        }
        for cap in &self.captions {
            c.push(format!("caption/{}", cap.caption_id), Tensor::vector(cap.latent.clone()).expect("finite"));
        }
        c
    }

    /// Writes `corpus.json`, `manifest.jsonl`, and `frames.bin` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let store = self.frame_store();
        let offsets: BTreeMap<String, u64> = store.entries().into_iter().map(|e| (e.path, e.offset)).collect();
        let mut manifest = String::new();
        for s in &self.samples {
            let entry = ManifestEntry {
                sample_id: s.sample_id.clone(),
                split: s.split,
                image_id: s.image_id.clone(),
                target: s.target,
                components: s.components.clone(),
                mixture_offset: offsets[&format!("mixture/{}", s.sample_id)],
                clean_offset: offsets[&format!("clean/{}", s.sample_id)],
                frames: s.mixture.rows(),
            };
            manifest.push_str(&serde_json::to_string(&entry)?);
            manifest.push('\n');
        }
        let meta = json!({
            "config": self.config,
            "stats": self.stats(),
            "captions": self.captions.iter().map(|c| json!({"caption_id": c.caption_id, "image_id": c.image_id})).collect::<Vec<_>>(),
            "speakers": self.speakers.iter().map(|s| s.speaker_id.clone()).collect::<Vec<_>>(),
            "image_split": self.image_split,
        });
        fs::write(dir.join(CORPUS_FILE), serde_json::to_string_pretty(&meta)? + "\n")?;
        fs::write(dir.join(MANIFEST_FILE), manifest)?;
        store.save(&dir.join(FRAMES_FILE))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: serde_json::Value = serde_json::from_slice(&fs::read(dir.join(CORPUS_FILE))?)?;
        let config: SynthConfig = serde_json::from_value(meta["config"].clone())?;
        let image_split: BTreeMap<String, Split> = serde_json::from_value(meta["image_split"].clone())?;
        let store = Container::load(&dir.join(FRAMES_FILE))?;
        let get = |path: &str| -> Result<&Tensor> {
            store.get(path).ok_or_else(|| Error::Format(format!("frame store lacks {path}")))
        };

        let mut speakers = Vec::new();
        let mut embeddings = BTreeMap::new();
        for id in meta["speakers"].as_array().ok_or_else(|| Error::Format("speakers list".into()))? {
            let id = id.as_str().ok_or_else(|| Error::Format("speaker id".into()))?.to_string();
            let embedding = SpeakerEmbedding::new(get(&format!("speaker/{id}/embedding"))?.data().to_vec())?;
            embeddings.insert(id.clone(), embedding.clone());
            speakers.push(SpeakerProfile {
                signature: get(&format!("speaker/{id}/signature"))?.data().to_vec(),
                enrollment_frames: get(&format!("speaker/{id}/enrollment_frames"))?.clone(),
                embedding,
                speaker_id: id,
            });
        }
        let mut captions = Vec::new();
        for c in meta["captions"].as_array().ok_or_else(|| Error::Format("captions list".into()))? {
            let caption_id = c["caption_id"].as_str().unwrap_or_default().to_string();
            captions.push(CaptionLatent {
                latent: get(&format!("caption/{caption_id}"))?.data().to_vec(),
                image_id: c["image_id"].as_str().unwrap_or_default().to_string(),
                caption_id,
            });
        }
        let mut images = BTreeMap::new();
        for id in image_split.keys() {
            images.insert(id.clone(), get(&format!("image/{id}"))?.data().to_vec());
        }
        let mut samples = Vec::new();
        for line in fs::read_to_string(dir.join(MANIFEST_FILE))?.lines() {
            let e: ManifestEntry = serde_json::from_str(line)?;
            let enrollments = e
                .components
                .iter()
                .map(|c| {
                    embeddings
                        .get(&c.speaker_id)
                        .cloned()
                        .ok_or_else(|| Error::Format(format!("unknown speaker {}", c.speaker_id)))
                })
                .collect::<Result<Vec<_>>>()?;
            samples.push(MixtureSample {
                mixture: get(&format!("mixture/{}", e.sample_id))?.clone(),
                clean_target: get(&format!("clean/{}", e.sample_id))?.clone(),
                sample_id: e.sample_id,
                split: e.split,
                components: e.components,
                target: e.target,
                enrollments,
                image_id: e.image_id,
            });
        }
        Ok(Self {
            config,
            speakers,
            captions,
            images,
            image_split,
            samples,
        })
    }
}

#[cfg(test)]
mod tests;
