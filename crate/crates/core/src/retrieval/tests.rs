use super::*;
use crate::datagen::{build_corpus, SynthConfig};
use crate::encoder::EncoderConfig;
use crate::tsre::{TsreConfig, Variant};
use proptest::prelude::*;

fn rand_sims(q: usize, c: usize, seed: u64) -> Tensor {
    Tensor::randn(&[q, c], 1.0, &mut rng::stream(seed, "sims"))
}

/// Sorts candidate indices by (similarity desc, index asc) and reads off the
/// gold position.
fn oracle_recall(sims: &Tensor, gold: &[usize], k: usize) -> f64 {
    let c = sims.shape()[1];
    let mut hits = 0;
    for (q, &g) in gold.iter().enumerate() {
        let row = sims.row(q);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let pos = order.iter().position(|&j| j == g).unwrap();
        hits += usize::from(pos < k.min(c));
    }
    hits as f64 / gold.len() as f64
}

#[test]
fn single_query_single_candidate() {
    let r = recall_at_k(&Tensor::from_rows(&[vec![0.3]]).unwrap(), &[0], &[1]).unwrap();
    assert_eq!(r.at(1), Some(1.0));
}

#[test]
fn identity_like_sims_give_perfect_recall() {
    let mut s = rand_sims(6, 6, 1);
    for i in 0..6 {
        s.data_mut()[i * 6 + i] = 10.0;
    }
    let r = recall_at_k(&s, &[0, 1, 2, 3, 4, 5], &DEFAULT_KS).unwrap();
    assert!(r.values.iter().all(|v| v.recall == 1.0));
}

#[test]
fn matches_exhaustive_sort_oracle() {
    for seed in 0..20 {
        let s = rand_sims(5, 7, seed);
        let mut g = rng::stream(seed, "gold");
        let gold: Vec<usize> = (0..5).map(|_| rand::Rng::gen_range(&mut g, 0..7)).collect();
        let r = recall_at_k(&s, &gold, &[1, 2, 3, 5, 7]).unwrap();
        for v in &r.values {
            assert_eq!(v.recall, oracle_recall(&s, &gold, v.k));
        }
    }
}

#[test]
fn ties_break_toward_smaller_index() {
    let s = Tensor::from_rows(&[vec![0.5, 0.5, 0.5]]).unwrap();
    assert_eq!(gold_ranks(&s, &[vec![0]]).unwrap(), vec![0]);
    assert_eq!(gold_ranks(&s, &[vec![2]]).unwrap(), vec![2]);
    assert_eq!(recall_at_k(&s, &[1], &[1]).unwrap().at(1), Some(0.0));
}

#[test]
fn k_beyond_candidates_is_clamped_with_warning() {
    let s = rand_sims(3, 4, 2);
    let r = recall_at_k(&s, &[0, 1, 2], &[10]).unwrap();
    assert_eq!(r.at(10), Some(1.0));
    assert_eq!(r.warnings.len(), 1);
    assert!(recall_at_k(&s, &[4, 0, 0], &[1]).is_err());
    assert!(recall_at_k(&s, &[0, 0, 0], &[0]).is_err());
}

#[test]
fn untrained_model_is_near_chance() {
    // 50 candidates: chance R@1 = 0.02. Across 20 random similarity draws the
    // mean must sit within a wide Monte-Carlo band.
    let mut total = 0.0;
    for seed in 0..20 {
        let s = rand_sims(50, 50, 100 + seed);
        let gold: Vec<usize> = (0..50).collect();
        total += recall_at_k(&s, &gold, &[1]).unwrap().at(1).unwrap();
    }
    let mean = total / 20.0;
    assert!((mean - 0.02).abs() < 0.015, "{mean}");
}

proptest! {
    #[test]
    fn monotone_in_k_and_permutation_invariant(seed in 0u64..1000, q in 1usize..8, c in 1usize..9) {
        let s = rand_sims(q, c, seed);
        let mut g = rng::stream(seed, "g");
        let gold: Vec<usize> = (0..q).map(|_| rand::Rng::gen_range(&mut g, 0..c)).collect();
        let ks: Vec<usize> = (1..=c + 1).collect();
        let r = recall_at_k(&s, &gold, &ks).unwrap();
        for w in r.values.windows(2) {
            prop_assert!(w[0].recall <= w[1].recall);
        }
        prop_assert!(r.values.iter().all(|v| (0.0..=1.0).contains(&v.recall)));

        let perm = rng::permutation(&mut rng::stream(seed, "p"), c);
        let mut data = Vec::new();
        for row in 0..q {
            data.extend(perm.iter().map(|&j| s.row(row)[j]));
        }
        let ps = Tensor::new(vec![q, c], data).unwrap();
        let pg: Vec<usize> = gold.iter().map(|&g| perm.iter().position(|&j| j == g).unwrap()).collect();
        let rp = recall_at_k(&ps, &pg, &ks).unwrap();
        prop_assert_eq!(r.values, rp.values);
    }
}

fn tiny_setup(k: usize) -> (RetrievalModel, Corpus) {
    let data = SynthConfig {
        num_images: 24,
        num_speakers: 6,
        k,
        seed: 4,
        split_images: [12, 6, 6],
        ..SynthConfig::default()
    };
    let enc = EncoderConfig {
        num_layers: 1,
        hidden_dim: 16,
        ff_dim: 32,
        embed_dim: 8,
        ..EncoderConfig::default()
    };
    (RetrievalModel::new(enc, 1).unwrap(), build_corpus(&data).unwrap())
}

#[test]
fn evaluate_is_deterministic_and_checks_protocol() {
    let (model, corpus) = tiny_setup(2);
    let a = evaluate(&model, &corpus, Split::Test, Protocol::Single, &DEFAULT_KS).unwrap();
    let b = evaluate(&model, &corpus, Split::Test, Protocol::Single, &DEFAULT_KS).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.0.recall.n_queries, 6);
    assert_eq!(a.0.recall.n_candidates, 6);
    assert_eq!(a.0.recall.warnings.len(), 1);
    assert!(matches!(
        evaluate(&model, &corpus, Split::Test, Protocol::Target, &DEFAULT_KS),
        Err(Error::Config(_))
    ));
    let mut m = model.clone();
    m.attach_tsre(TsreConfig::new(Variant::Scl), 2).unwrap();
    assert!(matches!(
        evaluate(&m, &corpus, Split::Test, Protocol::Single, &DEFAULT_KS),
        Err(Error::Config(_))
    ));
}

#[test]
fn target_protocol_on_single_speaker_corpus_equals_single() {
    let (model, corpus) = tiny_setup(1);
    let single = evaluate(&model, &corpus, Split::Val, Protocol::Single, &DEFAULT_KS).unwrap();
    let mut m = model.clone();
    m.attach_tsre(TsreConfig::new(Variant::SccB3), 2).unwrap();
    let target = evaluate(&m, &corpus, Split::Val, Protocol::Target, &DEFAULT_KS).unwrap();
    assert_eq!(single.0.recall, target.0.recall);
    assert_eq!(single.1.recall, target.1.recall);
}

#[test]
fn reports_round_trip_through_files() {
    let (model, corpus) = tiny_setup(2);
    let (a, b) = evaluate(&model, &corpus, Split::Test, Protocol::Single, &DEFAULT_KS).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("report");
    write_reports(&[a.clone(), b.clone()], &stem).unwrap();
    let back: Vec<RecallReport> = serde_json::from_slice(&fs::read(stem.with_extension("json")).unwrap()).unwrap();
    assert_eq!(back, vec![a, b]);
    let csv = fs::read_to_string(stem.with_extension("csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);
    assert!(csv.lines().nth(1).unwrap().starts_with("single,speech_to_image,1,"));
}
