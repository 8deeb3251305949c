//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use tsrelab_core::config::RunConfig;
use tsrelab_core::datagen::{build_corpus, Corpus, Split, SynthConfig};
use tsrelab_core::encoder::{EncoderConfig, RetrievalModel};
use tsrelab_core::gradsuite::run_suite;
use tsrelab_core::numcore::{conv1d_grouped, Tensor};
use tsrelab_core::objective::{
    target_speaker_loss_terms, vanilla_clip_loss, vanilla_clip_loss_terms, ContrastiveBatch, LossConfig, LossTerms,
};
use tsrelab_core::retrieval::{evaluate, recall_at_k, write_reports, Protocol};
use tsrelab_core::rng::{self, Stream};
use tsrelab_core::trainer::{train, Checkpoint, RunOutput, RunSpec, Stage, TrainConfig};
use tsrelab_core::tsre::{paper_scale_count, SpeakerEmbedding, TsreConfig, Variant};

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const IDENTITY_TOL: f64 = 1e-12;
const IDENTITY_PROBES: usize = 100;
const REDUCTION_TOL: f64 = 1e-12;
const REDUCTION_BATCHES: usize = 50;
const UNIFORM_TOL: f64 = 1e-9;
const SCL_EXACT: usize = 1_048_576;
const COUNT_BAND: f64 = 0.25;
const SCC_B3_REF: f64 = 1.59e6;
const SCC_B5_REF: f64 = 2.11e6;
const CONV_TOL: f64 = 1e-12;
const LOSS_ORACLE_TOL: f64 = 1e-12;
const BASE_MIN_R1: f64 = 0.8;
const MIN_DEGRADATION: f64 = 0.30;
const MIN_GAIN: f64 = 0.20;
const MIN_RECOVERED_FRACTION: f64 = 0.5;
const BEHAVIOR_BUDGET: Duration = Duration::from_secs(30 * 60);

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn fail<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn unit_rows(rows: usize, dim: usize, rng: &mut Stream) -> Tensor {
    let mut t = Tensor::randn(&[rows, dim], 1.0, rng);
    let d = t.data_mut();
    for r in 0..rows {
        let row = &mut d[r * dim..(r + 1) * dim];
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    t
}

fn gradient_integrity() -> Outcome {
    let t = Instant::now();
    let report = run_suite(0).map_err(fail)?;
    let elapsed = t.elapsed();
    let worst = report.worst().map_or(0.0, |w| w.max_rel_err);
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    check(
        failed.is_empty() && worst < GRAD_TOL && elapsed < GRAD_BUDGET,
        format!(
            "{} groups, worst rel err {worst:.2e} < {GRAD_TOL:.0e}, {:.1}s; failed {failed:?}",
            report.checks.len(),
            elapsed.as_secs_f64()
        ),
    )
}

fn identity_at_init() -> Outcome {
    let cfg = EncoderConfig::default();
    let host = RetrievalModel::new(cfg.clone(), 3).map_err(fail)?;
    let mut worst = BTreeMap::new();
    for v in Variant::ALL {
        let mut m = host.clone();
        m.attach_tsre(TsreConfig::new(v), 3).map_err(fail)?;
        let mut max = 0.0f64;
        for p in 0..IDENTITY_PROBES {
            let mut r = rng::stream(7, &format!("identity/{v}/{p}"));
            let frames = 4 + p % 13;
            let x = Tensor::randn(&[frames, cfg.input_dim], 1.0, &mut r);
            let u = SpeakerEmbedding::new(rng::normal_vec(&mut r, cfg.speaker_dim, 1.0)).map_err(fail)?;
            let plain = host.encode_speech(&x, None).map_err(fail)?;
            let cond = m.encode_speech(&x, Some(&u)).map_err(fail)?;
            max = max.max(plain.max_abs_diff(&cond));
        }
        worst.insert(v.label(), max);
    }
    let ok = worst.values().all(|&d| d < IDENTITY_TOL);
    let detail = worst.iter().map(|(k, d)| format!("{k} {d:.1e}")).collect::<Vec<_>>().join(", ");
    check(ok, format!("max |Δ| over {IDENTITY_PROBES} probes: {detail}"))
}

fn loss_reduction() -> Outcome {
    let cfg = LossConfig::default();
    let mut max = 0.0f64;
    for b in 0..REDUCTION_BATCHES {
        let mut r = rng::stream(11, &format!("reduction/{b}"));
        let (n, e) = (2 + b % 7, 3 + b % 5);
        let imgs = unit_rows(n, e, &mut r);
        let speech = unit_rows(n, e, &mut r);
        let vanilla = vanilla_clip_loss(&imgs, &speech, &cfg).map_err(fail)?;
        let batch = ContrastiveBatch::new(imgs, speech.reshape(vec![n, 1, e]).map_err(fail)?, vec![0; n]).map_err(fail)?;
        let target = target_speaker_loss_terms(&batch, &cfg).map_err(fail)?.total;
        max = max.max((vanilla - target).abs());
    }
    let mut r = rng::stream(11, "reduction/uniform");
    let shared = unit_rows(1, 6, &mut r);
    let (n, k) = (4, 2);
    let images = Tensor::new(vec![n, 6], shared.data().repeat(n)).map_err(fail)?;
    let speech = Tensor::new(vec![n, k, 6], shared.data().repeat(n * k)).map_err(fail)?;
    let batch = ContrastiveBatch::new(images, speech, vec![0, 1, 1, 0]).map_err(fail)?;
    let i2s = target_speaker_loss_terms(&batch, &cfg).map_err(fail)?.image_to_speech;
    let off = (i2s - 8f64.ln()).abs();
    check(
        max < REDUCTION_TOL && off < UNIFORM_TOL,
        format!("K=1 vs vanilla max |Δ| {max:.1e} over {REDUCTION_BATCHES} batches; uniform i→s − ln 8 = {off:.1e}"),
    )
}

fn parameter_accounting() -> Outcome {
    let c = |v| paper_scale_count(v).table_value(v);
    let (scl, scc, b5, b3) = (c(Variant::Scl), c(Variant::Scc), c(Variant::SccB5), c(Variant::SccB3));
    let dev = |n: usize, r: f64| (n as f64 - r) / r;
    let ok = scl == SCL_EXACT
        && dev(b3, SCC_B3_REF).abs() <= COUNT_BAND
        && dev(b5, SCC_B5_REF).abs() <= COUNT_BAND
        && scl < b3
        && b3 < b5
        && b5 < scc;
    check(
        ok,
        format!(
            "SCL {scl}, SCC-B3 {b3} ({:+.1}%), SCC-B5 {b5} ({:+.1}%), SCC {scc}",
            100.0 * dev(b3, SCC_B3_REF),
            100.0 * dev(b5, SCC_B5_REF)
        ),
    )
}

fn direct_conv(h: &Tensor, w: &Tensor, groups: usize) -> Vec<f64> {
    let (t_len, c_in) = (h.shape()[0], h.shape()[1]);
    let (c_out, per, k) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let out_per = c_out / groups;
    let half = (k / 2) as isize;
    let mut out = vec![0.0; t_len * c_out];
    for t in 0..t_len {
        for o in 0..c_out {
            let g = o / out_per;
            let mut acc = 0.0;
            for i in 0..per {
                let ci = g * per + i;
                for j in 0..k {
                    let src = t as isize + j as isize - half;
                    if src >= 0 && (src as usize) < t_len {
                        acc += w.data()[(o * per + i) * k + j] * h.data()[src as usize * c_in + ci];
                    }
                }
            }
            out[t * c_out + o] = acc;
        }
    }
    out
}

fn exhaustive_rank(row: &[f64], gold: usize) -> usize {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite").then(a.cmp(&b)));
    order.iter().position(|&j| j == gold).expect("gold present")
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Per-term cross-entropy written out sample by sample.
fn scripted_loss(images: &Tensor, speech: &[Vec<Vec<f64>>], targets: &[usize], tau: f64) -> LossTerms {
    let n = targets.len();
    let mut l_is = 0.0;
    let mut l_si = 0.0;
    for i in 0..n {
        let img = images.row(i);
        let pos = dot(img, &speech[i][targets[i]]) / tau;
        let all: f64 = speech.iter().flatten().map(|s| (dot(img, s) / tau).exp()).sum();
        l_is += all.ln() - pos;
        let anchor = &speech[i][targets[i]];
        let pos = dot(anchor, img) / tau;
        let all: f64 = (0..n).map(|j| (dot(anchor, images.row(j)) / tau).exp()).sum();
        l_si += all.ln() - pos;
    }
    LossTerms {
        image_to_speech: l_is / n as f64,
        speech_to_image: l_si / n as f64,
        total: (l_is + l_si) / (2 * n) as f64,
    }
}

fn terms_gap(a: &LossTerms, b: &LossTerms) -> f64 {
    (a.total - b.total)
        .abs()
        .max((a.image_to_speech - b.image_to_speech).abs())
        .max((a.speech_to_image - b.speech_to_image).abs())
}

fn oracle_equivalences() -> Outcome {
    let mut conv_gap = 0.0f64;
    for (case, (t, c, g, k)) in [(7, 4, 2, 3), (9, 6, 3, 5), (5, 8, 8, 3), (6, 4, 1, 1)].into_iter().enumerate() {
        let mut r = rng::stream(13, &format!("oracle/conv/{case}"));
        let h = Tensor::randn(&[t, c], 1.0, &mut r);
        let w = Tensor::randn(&[c, c / g, k], 1.0, &mut r);
        let y = conv1d_grouped(&h, &w, g).map_err(fail)?;
        let want = direct_conv(&h, &w, g);
        conv_gap = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(conv_gap, f64::max);
    }

    let mut recall_mismatch = 0usize;
    for case in 0..20 {
        let mut r = rng::stream(13, &format!("oracle/recall/{case}"));
        let (q, c) = (5 + case % 4, 6 + case % 5);
        // coarse values force ties
        let raw = Tensor::randn(&[q, c], 1.0, &mut r);
        let sims = Tensor::new(vec![q, c], raw.data().iter().map(|v| (v * 2.0).round()).collect()).map_err(fail)?;
        let gold: Vec<usize> = (0..q).map(|i| (i * 7 + case) % c).collect();
        let ks = [1, 2, 3, 5];
        let got = recall_at_k(&sims, &gold, &ks).map_err(fail)?;
        let ranks: Vec<usize> = (0..q).map(|i| exhaustive_rank(sims.row(i), gold[i])).collect();
        for &k in &ks {
            let want = ranks.iter().filter(|&&rk| rk < k).count() as f64 / q as f64;
            if got.at(k) != Some(want) {
                recall_mismatch += 1;
            }
        }
    }

    let mut loss_gap = 0.0f64;
    let cfg = LossConfig {
        temperature: 0.3,
        learnable_temperature: false,
    };
    for case in 0..10 {
        let mut r = rng::stream(13, &format!("oracle/loss/{case}"));
        let (n, k, e) = (2 + case % 4, 1 + case % 3, 5);
        let images = unit_rows(n, e, &mut r);
        let flat = unit_rows(n * k, e, &mut r);
        let speech: Vec<Vec<Vec<f64>>> = (0..n).map(|i| (0..k).map(|q| flat.row(i * k + q).to_vec()).collect()).collect();
        let targets: Vec<usize> = (0..n).map(|i| (i + case) % k).collect();
        let want = scripted_loss(&images, &speech, &targets, cfg.temperature);
        let batch = ContrastiveBatch::new(images.clone(), flat.clone().reshape(vec![n, k, e]).map_err(fail)?, targets)
            .map_err(fail)?;
        loss_gap = loss_gap.max(terms_gap(&target_speaker_loss_terms(&batch, &cfg).map_err(fail)?, &want));
        if k == 1 {
            let got = vanilla_clip_loss_terms(&images, &flat, &cfg).map_err(fail)?;
            loss_gap = loss_gap.max(terms_gap(&got, &want));
        }
    }
    check(
        conv_gap < CONV_TOL && recall_mismatch == 0 && loss_gap < LOSS_ORACLE_TOL,
        format!("conv max |Δ| {conv_gap:.1e}, recall mismatches {recall_mismatch}, loss max |Δ| {loss_gap:.1e}"),
    )
}

fn config_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/acceptance")
}

fn load_config(name: &str) -> Result<RunConfig, String> {
    let mut c = RunConfig::load(&config_dir().join(name)).map_err(fail)?;
    c.resolve_seed(None).map_err(fail)?;
    c.validate().map_err(fail)?;
    Ok(c)
}

fn corpus_with_k(cfg: &RunConfig, k: usize) -> Result<Corpus, String> {
    build_corpus(&SynthConfig { k, ..cfg.data.clone() }).map_err(fail)
}

fn r_at_1(model: &RetrievalModel, corpus: &Corpus, protocol: Protocol) -> Result<f64, String> {
    let (s2i, _) = evaluate(model, corpus, Split::Test, protocol, &[1]).map_err(fail)?;
    s2i.at(1).ok_or_else(|| "missing R@1".to_string())
}

fn behavioral_reproduction() -> Outcome {
    let t = Instant::now();
    let base_cfg = load_config("base.json")?;
    let ft_cfg = load_config("finetune.json")?;
    let c1 = corpus_with_k(&base_cfg, 1)?;
    let base = train(&base_cfg.run_spec(), &c1, None, &RunOutput::default()).map_err(fail)?.best;
    let host = base.model().map_err(fail)?;
    let base_r1 = r_at_1(&host, &c1, Protocol::Single)?;

    let mut rows = Vec::new();
    for k in [2, 3] {
        let ck = corpus_with_k(&ft_cfg, k)?;
        let star = r_at_1(&host, &ck, Protocol::Single)?;
        let tuned = train(&ft_cfg.run_spec(), &ck, Some(&base), &RunOutput::default()).map_err(fail)?.best;
        let tsre = r_at_1(&tuned.model().map_err(fail)?, &ck, Protocol::Target)?;
        rows.push((star, tsre));
    }
    let elapsed = t.elapsed();
    let [(star2, tsre2), (star3, tsre3)] = [rows[0], rows[1]];
    let degradation = base_r1 - star2;
    let gain = tsre2 - star2;
    let recovered = gain / degradation;
    let parts = [
        ("a", base_r1 >= BASE_MIN_R1),
        ("b", degradation >= MIN_DEGRADATION),
        ("c", gain >= MIN_GAIN && recovered >= MIN_RECOVERED_FRACTION),
        ("d", tsre3 > star3 && star3 < star2 && tsre3 < tsre2),
        ("time", elapsed < BEHAVIOR_BUDGET),
    ];
    let failed: Vec<&str> = parts.iter().filter(|p| !p.1).map(|p| p.0).collect();
    check(
        failed.is_empty(),
        format!(
            "seed {}: base K1 {base_r1:.3}; K2 base* {star2:.3} tsre {tsre2:.3} (recovered {:.0}%); \
             K3 base* {star3:.3} tsre {tsre3:.3}; {:.0}s; failed parts {failed:?}",
            base_cfg.data.seed,
            100.0 * recovered,
            elapsed.as_secs_f64()
        ),
    )
}

fn tree_bytes(dir: &Path) -> Result<BTreeMap<String, Vec<u8>>, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(fail)? {
            let p = entry.map_err(fail)?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).map_err(fail)?.display().to_string();
                out.insert(rel, fs::read(&p).map_err(fail)?);
            }
        }
    }
    Ok(out)
}

fn pipeline_once(root: &Path) -> Result<(), String> {
    let data = SynthConfig {
        num_images: 40,
        num_speakers: 8,
        k: 2,
        seed: 21,
        split_images: [24, 8, 8],
        ..SynthConfig::default()
    };
    let encoder = EncoderConfig {
        num_layers: 1,
        hidden_dim: 16,
        num_heads: 2,
        ff_dim: 16,
        embed_dim: 8,
        ..EncoderConfig::default()
    };
    let single = build_corpus(&SynthConfig { k: 1, ..data.clone() }).map_err(fail)?;
    let mixed = build_corpus(&data).map_err(fail)?;
    single.save(&root.join("corpus_k1")).map_err(fail)?;
    mixed.save(&root.join("corpus_k2")).map_err(fail)?;
    let single = Corpus::load(&root.join("corpus_k1")).map_err(fail)?;
    let mixed = Corpus::load(&root.join("corpus_k2")).map_err(fail)?;

    let train_cfg = |stage, steps| TrainConfig {
        batch_size: 8,
        max_steps: steps,
        seed: 21,
        stage,
        val_every: 4,
        ..TrainConfig::default()
    };
    let base_spec = RunSpec {
        encoder: encoder.clone(),
        tsre: None,
        loss: LossConfig::default(),
        train: train_cfg(Stage::Base, 8),
    };
    let base_out = RunOutput {
        dir: Some(root.join("base")),
    };
    train(&base_spec, &single, None, &base_out).map_err(fail)?;
    let base = Checkpoint::load(&root.join("base/best.ckpt")).map_err(fail)?;
    let ft_spec = RunSpec {
        tsre: Some(TsreConfig::new(Variant::SccB3)),
        train: train_cfg(Stage::TsreFinetune, 6),
        ..base_spec
    };
    let ft_out = RunOutput {
        dir: Some(root.join("finetune")),
    };
    train(&ft_spec, &mixed, Some(&base), &ft_out).map_err(fail)?;
    let tuned = Checkpoint::load(&root.join("finetune/best.ckpt")).map_err(fail)?.model().map_err(fail)?;

    fs::create_dir_all(root.join("reports")).map_err(fail)?;
    let (a, b) = evaluate(&base.model().map_err(fail)?, &mixed, Split::Test, Protocol::Single, &[1, 5]).map_err(fail)?;
    write_reports(&[a, b], &root.join("reports/base_star")).map_err(fail)?;
    let (a, b) = evaluate(&tuned, &mixed, Split::Test, Protocol::Target, &[1, 5]).map_err(fail)?;
    write_reports(&[a, b], &root.join("reports/tsre")).map_err(fail)
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(fail)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline_once(&a)?;
    pipeline_once(&b)?;
    let (ta, tb) = (tree_bytes(&a)?, tree_bytes(&b)?);
    let differing: Vec<&String> = ta.keys().filter(|k| ta.get(*k) != tb.get(*k)).collect();
    let same_names = ta.keys().eq(tb.keys());
    let has = |suffix: &str| ta.keys().any(|k| k.ends_with(suffix));
    let covered = has(".ckpt") && has(".json") && has(".csv") && has("log.jsonl");
    check(
        same_names && differing.is_empty() && covered,
        format!("{} files compared, differing {differing:?}", ta.len()),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 7] = [
        ("gradient integrity", gradient_integrity),
        ("identity at init", identity_at_init),
        ("loss reduction", loss_reduction),
        ("parameter accounting", parameter_accounting),
        ("desk-scale behavior", behavioral_reproduction),
        ("oracle equivalences", oracle_equivalences),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = format!("criterion {}", i + 1);
        if !filter.is_empty() && !filter.iter().any(|f| name.contains(f.as_str()) || id == *f) {
            continue;
        }
        let (verdict, detail) = match run() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failures += 1;
                ("FAIL", d)
            }
        };
        println!("{verdict} {id} ({name}): {detail}");
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
