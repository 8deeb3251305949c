use super::*;
use crate::numcore::cosine_similarity;

fn small_cfg(k: usize) -> SynthConfig {
    SynthConfig {
        num_images: 40,
        num_speakers: 8,
        k,
        seed: 3,
        split_images: [30, 5, 5],
        ..SynthConfig::default()
    }
}

fn caption(id: &str, seed: u64) -> CaptionLatent {
    CaptionLatent {
        caption_id: id.into(),
        image_id: "img".into(),
        latent: rng::normal_vec(&mut rng::stream(seed, id), 24, 1.0),
    }
}

#[test]
fn rendering_is_deterministic_and_speaker_colored() {
    let r = Renderer::new(&SynthConfig::default()).unwrap();
    let cap = caption("c0", 1);
    let (a, b) = (r.speaker(0).unwrap(), r.speaker(1).unwrap());
    assert_eq!(r.render_utterance(&cap, &a, 5), r.render_utterance(&cap, &a, 5));
    let d = r.render_utterance(&cap, &a, 5).max_abs_diff(&r.render_utterance(&cap, &b, 5));
    assert!(d > 0.1, "{d}");
}

#[test]
fn zero_signature_without_noise_depends_on_caption_only() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let r = Renderer::new(&cfg).unwrap();
    let cap = caption("c1", 2);
    let zero = vec![0.0; 8];
    let x = r.render_with_signature(&cap, "spkA", &zero, 1);
    let y = r.render_with_signature(&cap, "spkB", &zero, 9);
    assert_eq!(x, y);
    let other = r.render_with_signature(&caption("c2", 2), "spkA", &zero, 1);
    assert!(x.max_abs_diff(&other) > 0.1);
}

#[test]
fn clean_utterance_time_mean_is_the_offset() {
    let cfg = SynthConfig {
        noise_std: 0.0,
        ..SynthConfig::default()
    };
    let r = Renderer::new(&cfg).unwrap();
    let sp = r.speaker(4).unwrap();
    let x = r.render_utterance(&caption("c3", 3), &sp, 0);
    let (_, offset) = r.coloring(&sp.signature);
    let (t_len, d) = (x.rows(), x.last_dim());
    for c in 0..d {
        let mean = (0..t_len).map(|t| x.data()[t * d + c]).sum::<f64>() / t_len as f64;
        assert!((mean - offset[c]).abs() < 1e-12);
    }
}

#[test]
fn mix_cases() {
    let a = Tensor::randn(&[5, 3], 1.0, &mut rng::stream(1, "mix/a"));
    assert_eq!(mix(std::slice::from_ref(&a), &[1.0]).unwrap(), a);
    let z = mix(&[a.clone(), a.clone()], &[1.0, -1.0]).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
    assert!(matches!(mix(&[], &[]), Err(Error::Config(_))));

    let short = Tensor::ones(&[2, 3]);
    let m = mix(&[a.clone(), short], &[1.0, 2.0]).unwrap();
    assert_eq!(m.shape(), &[5, 3]);
    assert_eq!(m.row(4), a.row(4));
    assert_eq!(m.row(0)[0], a.row(0)[0] + 2.0);
}

#[test]
fn unit_rms_components() {
    for i in 0..10 {
        let x = Tensor::randn(&[16, 16], 0.3 + i as f64, &mut rng::stream(2, &format!("rms{i}")));
        let g = unit_rms_gain(&x).unwrap();
        let y = mix(&[x], &[g]).unwrap();
        let direct = (y.data().iter().map(|v| v * v).sum::<f64>() / 256.0).sqrt();
        assert!((direct - 1.0).abs() < 1e-9);
    }
    assert!(unit_rms_gain(&Tensor::zeros(&[2, 2])).is_err());
}

#[test]
fn enrollment_similarity_structure() {
    let r = Renderer::new(&SynthConfig::default()).unwrap();
    let mut worst_same: f64 = 1.0;
    for i in 0..20 {
        let sp = r.speaker(i).unwrap();
        let e0 = r.enroll(&sp).unwrap();
        assert!((e0.as_slice().iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        let seg1 = r.enrollment_segment(&sp.speaker_id, &sp.signature, 1);
        let e1 = r.embed_frames(&seg1).unwrap();
        worst_same = worst_same.min(cosine_similarity(e0.as_slice(), e1.as_slice()).unwrap());
    }
    assert!(worst_same > 0.9, "same-speaker cosine {worst_same}");

    let embs: Vec<_> = (0..40).map(|i| r.speaker(i).unwrap().embedding).collect();
    let mut sims = Vec::new();
    for i in 0..40 {
        for j in (i + 1)..40 {
            sims.push(cosine_similarity(embs[i].as_slice(), embs[j].as_slice()).unwrap());
        }
    }
    let mean = sims.iter().sum::<f64>() / sims.len() as f64;
    eprintln!("enrollment: worst same-speaker cosine {worst_same:.4}, mean cross-speaker cosine {mean:.4} over {} pairs", sims.len());
    assert!(sims.len() >= 100);
    assert!(mean.abs() < 0.1, "{mean}");
}

#[test]
fn corpus_counts_and_invariants() {
    let c = build_corpus(&SynthConfig::default()).unwrap();
    assert_eq!(c.samples.len(), 400);
    let stats = c.stats();
    assert_eq!(stats.iter().map(|s| s.images).collect::<Vec<_>>(), vec![300, 50, 50]);
    assert_eq!(stats.iter().map(|s| s.utterances).collect::<Vec<_>>(), vec![300, 50, 50]);
    let mut targets = BTreeSet::new();
    for s in &c.samples {
        assert_eq!(s.k(), 2);
        assert!(s.target < 2);
        let spk: BTreeSet<_> = s.components.iter().map(|x| &x.speaker_id).collect();
        assert_eq!(spk.len(), 2);
        let target_caption = &s.components[s.target].caption_id;
        assert!(targets.insert(target_caption.clone()));
        for comp in &s.components {
            let img = &c.captions.iter().find(|x| x.caption_id == comp.caption_id).unwrap().image_id;
            assert_eq!(c.image_split[img], s.split);
        }
        let sp = c.speakers.iter().find(|x| x.speaker_id == s.components[s.target].speaker_id).unwrap();
        assert_eq!(s.target_enrollment(), &sp.embedding);
    }
    assert_eq!(targets.len(), 400);
}

#[test]
fn k1_corpus_is_single_speaker() {
    let c = build_corpus(&small_cfg(1)).unwrap();
    for s in &c.samples {
        assert_eq!(s.k(), 1);
        assert_eq!(s.mixture, s.clean_target);
    }
}

#[test]
fn infeasible_parameters_are_rejected() {
    let mut cfg = small_cfg(3);
    cfg.num_speakers = 2;
    assert!(matches!(build_corpus(&cfg), Err(Error::Config(_))));
    let mut cfg = small_cfg(2);
    cfg.split_images = [30, 5, 4];
    assert!(build_corpus(&cfg).is_err());
    let mut cfg = small_cfg(2);
    cfg.k = 4;
    assert!(build_corpus(&cfg).is_err());
}

#[test]
fn corpus_files_are_deterministic_and_round_trip() {
    let cfg = small_cfg(3);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let c = build_corpus(&cfg).unwrap();
    c.save(d1.path()).unwrap();
    build_corpus(&cfg).unwrap().save(d2.path()).unwrap();
    for f in [MANIFEST_FILE, FRAMES_FILE, CORPUS_FILE] {
        assert_eq!(fs::read(d1.path().join(f)).unwrap(), fs::read(d2.path().join(f)).unwrap(), "{f}");
    }
    let back = Corpus::load(d1.path()).unwrap();
    assert_eq!(back.config, c.config);
    assert_eq!(back.speakers, c.speakers);
    assert_eq!(back.captions, c.captions);
    assert_eq!(back.images, c.images);
    assert_eq!(back.image_split, c.image_split);
    for (a, b) in back.samples.iter().zip(&c.samples) {
        assert_eq!(a, b);
    }
    assert_eq!(back, c);
    let first: ManifestEntry =
        serde_json::from_str(fs::read_to_string(d1.path().join(MANIFEST_FILE)).unwrap().lines().next().unwrap()).unwrap();
    let store = Container::load(&d1.path().join(FRAMES_FILE)).unwrap();
    let e = store.entries().into_iter().find(|e| e.path == format!("mixture/{}", first.sample_id)).unwrap();
    assert_eq!(e.offset, first.mixture_offset);
}

/// Solves `A x = b` for symmetric positive definite `A` by Cholesky.
fn cholesky_solve(a: &[f64], n: usize, b: &[f64], m: usize) -> Vec<f64> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i * n + k] * l[j * n + k]).sum();
            l[i * n + j] = if i == j { (a[i * n + i] - s).sqrt() } else { (a[i * n + j] - s) / l[j * n + j] };
        }
    }
    let mut x = b.to_vec();
    for c in 0..m {
        for i in 0..n {
            let s: f64 = (0..i).map(|k| l[i * n + k] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
        for i in (0..n).rev() {
            let s: f64 = ((i + 1)..n).map(|k| l[k * n + i] * x[k * m + c]).sum();
            x[i * m + c] = (x[i * m + c] - s) / l[i * n + i];
        }
    }
    x
}

#[test]
fn linear_probe_recovers_captions_from_clean_speech() {
    let cfg = SynthConfig {
        k: 1,
        ..SynthConfig::default()
    };
    let c = build_corpus(&cfg).unwrap();
    let r = Renderer::new(&cfg).unwrap();
    let f = cfg.utterance_frames * cfg.input_dim;
    let lat = cfg.latent_dim;
    let caption_of = |id: &str| c.captions.iter().find(|x| x.caption_id == id).unwrap();

    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for s in c.split(Split::Train) {
        let cap = caption_of(&s.components[0].caption_id);
        for rep in 0..3 {
            let sp = &c.speakers[(rep * 13 + xs.len()) % c.speakers.len()];
            let u = r.render_utterance(cap, sp, 100 + rep as u64);
            let g = unit_rms_gain(&u).unwrap();
            xs.push(u.data().iter().map(|v| v * g).collect::<Vec<_>>());
            ys.push(cap.latent.clone());
        }
    }
    let mut ata = vec![0.0; f * f];
    let mut aty = vec![0.0; f * lat];
    for (x, y) in xs.iter().zip(&ys) {
        for i in 0..f {
            for j in 0..f {
                ata[i * f + j] += x[i] * x[j];
            }
            for j in 0..lat {
                aty[i * lat + j] += x[i] * y[j];
            }
        }
    }
    for i in 0..f {
        ata[i * f + i] += 1.0;
    }
    let w = cholesky_solve(&ata, f, &aty, lat);

    let test = c.split(Split::Test);
    let pool: Vec<&CaptionLatent> = test.iter().map(|s| caption_of(&s.components[0].caption_id)).collect();
    let mut correct = 0;
    for (i, s) in test.iter().enumerate() {
        let x = &s.clean_target;
        let pred: Vec<f64> = (0..lat).map(|j| (0..f).map(|k| x.data()[k] * w[k * lat + j]).sum()).collect();
        let best = pool
            .iter()
            .enumerate()
            .max_by(|a, b| {
                let sa = cosine_similarity(&pred, &a.1.latent).unwrap();
                let sb = cosine_similarity(&pred, &b.1.latent).unwrap();
                sa.total_cmp(&sb)
            })
            .unwrap()
            .0;
        correct += usize::from(best == i);
    }
    let acc = correct as f64 / test.len() as f64;
    eprintln!("linear probe accuracy {acc:.3}");
    assert!(acc > 0.9, "{acc}");
}
