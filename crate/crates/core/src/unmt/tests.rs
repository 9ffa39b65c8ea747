use rand::Rng;

use super::*;
use crate::corpus::STANDARD_SPECIALS;
use crate::mlm::InitMode;

fn vocab(n: usize) -> Vocabulary {
    let entries = (0..n).map(|i| (format!("w{i}"), 1)).collect();
    Vocabulary::from_entries(&STANDARD_SPECIALS, entries).unwrap()
}

fn config(v: &Vocabulary, dropout: f64) -> TransformerConfig {
    TransformerConfig { layers: 2, model_dim: 16, heads: 2, ffn_dim: 32, dropout, max_positions: 32, vocab_size: v.len(), n_langs: 2 }
}

fn model<T: Scalar>(n: usize, seed: u64, dropout: f64) -> Seq2Seq<T> {
    let v = vocab(n);
    let cfg = config(&v, dropout);
    let mlm = MlmModel::init(&cfg, v, &InitMode::Random, seed).unwrap();
    init_unmt_from_mlm(&mlm, &cfg, seed + 1000).unwrap()
}

fn loss_of<T: Scalar>(m: &Seq2Seq<T>, src: &[Vec<usize>], sl: usize, tgt: &[Vec<usize>], tl: usize) -> f64 {
    let mut tape = Tape::new();
    let l = seq2seq_loss(&mut tape, m, src, sl, tgt, tl, None).unwrap();
    tape.scalar(l).f64()
}

#[test]
fn transfer_copies_everything_but_cross_attention() {
    let v = vocab(10);
    let cfg = config(&v, 0.1);
    let table = crate::embedding::EmbeddingMatrix::new(v.clone(), vec![0.5; v.len() * 16], 16).unwrap();
    let mlm = MlmModel::<f32>::init(&cfg, v, &InitMode::AlignedFrozen(table), 3).unwrap();
    assert!(mlm.embeddings_frozen());
    let a = init_unmt_from_mlm(&mlm, &cfg, 1).unwrap();
    let b = init_unmt_from_mlm(&mlm, &cfg, 2).unwrap();
    for (_, p) in mlm.store.iter() {
        assert_eq!(a.store.by_name(&p.name).unwrap().tensor.data, p.tensor.data);
    }
    for ((_, pa), (_, pb)) in a.store.iter().zip(b.store.iter()) {
        let cross = pa.name.contains("cross");
        if pa.name.starts_with("decoder.") && !cross {
            let enc_name = pa.name.replacen("decoder.", "encoder.", 1);
            assert_eq!(pa.tensor.data, mlm.store.by_name(&enc_name).unwrap().tensor.data, "{}", pa.name);
        }
        assert_eq!(pa.name.contains(".cross."), pa.tensor.data != pb.tensor.data, "{}", pa.name);
    }
    // one token table serves encoder input, decoder input and output
    assert_eq!(a.store.iter().filter(|(_, p)| p.tensor.shape == vec![a.config.vocab_size, 16]).count(), 1);
    assert!(a.store.iter().all(|(_, p)| p.trainable));
    let wrong = TransformerConfig { layers: 3, ..cfg };
    assert!(init_unmt_from_mlm(&mlm, &wrong, 1).is_err());
}

#[test]
fn noise_identity_and_floor() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = vec![5, 6, 7, 8, 9];
    let id = NoiseConfig { drop_prob: 0.0, blank_prob: 0.0, shuffle_window: 1 };
    assert_eq!(noise(&s, &id, 1, &mut rng), s);
    let drop_all = NoiseConfig { drop_prob: 1.0 - 1e-15, blank_prob: 0.0, shuffle_window: 1 };
    for _ in 0..50 {
        let out = noise(&s, &drop_all, 1, &mut rng);
        assert_eq!(out.len(), 1);
        assert!(s.contains(&out[0]));
    }
}

#[test]
fn shuffle_displacement_is_bounded() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s: Vec<usize> = (10..15).collect();
    let cfg = NoiseConfig { drop_prob: 0.0, blank_prob: 0.0, shuffle_window: 3 };
    let mut moved = false;
    for _ in 0..1000 {
        let out = noise(&s, &cfg, 1, &mut rng);
        let mut sorted = out.clone();
        sorted.sort();
        assert_eq!(sorted, s);
        for (new_pos, t) in out.iter().enumerate() {
            let old_pos = t - 10;
            assert!(new_pos.abs_diff(old_pos) <= 2);
            moved |= new_pos != old_pos;
        }
    }
    assert!(moved);
}

#[test]
fn noise_length_bounds() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let s: Vec<usize> = (5..25).collect();
    let cfg = NoiseConfig::default();
    for _ in 0..500 {
        let out = noise(&s, &cfg, 1, &mut rng);
        assert!(!out.is_empty() && out.len() <= s.len());
    }
}

#[test]
fn uniform_model_dae_loss_is_ln_v() {
    let mut m = model::<f64>(12, 1, 0.0);
    m.store.get_mut(m.layout.emb.tokens).tensor.data.iter_mut().for_each(|x| *x = 0.0);
    let batch = vec![vec![5, 6, 7], vec![8, 9]];
    let l = loss_of(&m, &batch, 0, &batch, 0);
    assert!((l - (m.vocab.len() as f64).ln()).abs() < 1e-12);
}

#[test]
fn loss_is_invariant_to_batch_order() {
    let m = model::<f64>(12, 2, 0.0);
    let src = vec![vec![5, 6, 7], vec![8, 9], vec![10, 11, 12, 13]];
    let tgt = vec![vec![6, 7], vec![9, 9, 9], vec![12]];
    let l1 = loss_of(&m, &src, 0, &tgt, 1);
    let perm = [2, 0, 1];
    let src2: Vec<_> = perm.iter().map(|&i| src[i].clone()).collect();
    let tgt2: Vec<_> = perm.iter().map(|&i| tgt[i].clone()).collect();
    assert!((l1 - loss_of(&m, &src2, 0, &tgt2, 1)).abs() < 1e-12);
}

#[test]
fn dae_memorizes_without_noise() {
    let mut m = model::<f32>(10, 3, 0.0);
    let batch = vec![vec![5, 6, 7, 8], vec![9, 10, 11], vec![12, 13, 14, 5]];
    let cfg = NoiseConfig { drop_prob: 0.0, blank_prob: 0.0, shuffle_window: 1 };
    let mut adam = Adam::new(AdamConfig { lr: 3e-3, ..Default::default() });
    let (mut rng, mut drop) = (ChaCha8Rng::seed_from_u64(0), ChaCha8Rng::seed_from_u64(1));
    let mut last = f64::INFINITY;
    for _ in 0..200 {
        last = dae_step(&mut m, &mut adam, &batch, 0, &cfg, &mut rng, &mut drop).unwrap();
    }
    assert!(last < 0.1, "loss {last}");
}

#[test]
fn generation_leaves_no_gradient() {
    let m = model::<f64>(10, 4, 0.1);
    let out = greedy_batch(&m, &[vec![5, 6, 7], vec![8]], 0, 1).unwrap();
    assert_eq!(out.len(), 2);
    assert!(m.store.iter().all(|(_, p)| p.tensor.grad.is_none()));
}

/// Trains a translator for the cipher `w_i ↔ w_{i+k}` with supervision,
/// then checks that back-translation sees exactly the supervised pair.
#[test]
fn bt_on_perfect_translator_equals_supervised_step() {
    let n = 8;
    let mut m = model::<f64>(2 * n, 5, 0.0);
    let base = 5;
    let cipher = |s: &[usize]| s.iter().map(|&t| t + n).collect::<Vec<_>>();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut adam = Adam::new(AdamConfig { lr: 3e-3, ..Default::default() });
    let mut drop = ChaCha8Rng::seed_from_u64(0);
    let sample = |rng: &mut ChaCha8Rng| -> Vec<usize> { (0..rng.random_range(2..5)).map(|_| base + rng.random_range(0..n)).collect() };
    for _ in 0..600 {
        let a: Vec<Vec<usize>> = (0..16).map(|_| sample(&mut rng)).collect();
        let b: Vec<Vec<usize>> = a.iter().map(|s| cipher(s)).collect();
        train_on(&mut m, &mut adam, &a, 0, &b, 1, &mut drop).unwrap();
        train_on(&mut m, &mut adam, &b, 1, &a, 0, &mut drop).unwrap();
    }
    let batch: Vec<Vec<usize>> = (0..8).map(|_| sample(&mut rng)).collect();
    let synthetic = greedy_batch(&m, &batch, 0, 1).unwrap();
    let truth: Vec<Vec<usize>> = batch.iter().map(|s| cipher(s)).collect();
    assert_eq!(synthetic, truth);
    let supervised = loss_of(&m, &truth, 1, &batch, 0);
    let mut m2 = m.clone();
    let bt = bt_step(&mut m2, &mut Adam::new(AdamConfig::default()), &batch, 0, 1, &mut drop).unwrap();
    assert!((bt - supervised).abs() < 1e-12);
    assert!(bt < 0.1, "{bt}");
}

#[test]
fn beam_one_equals_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = DecodeConfig { beam_size: 1, ..Default::default() };
    for i in 0..100 {
        let m = model::<f32>(9, 100 + i, 0.0);
        let src: Vec<usize> = (0..rng.random_range(1..6)).map(|_| rng.random_range(5..14)).collect();
        let g = greedy_decode(&m, &src, 0, 1, &cfg).unwrap();
        let b = beam_search(&m, &src, 0, 1, &cfg).unwrap();
        assert_eq!(g, b);
        let batched = greedy_batch(&m, &[src.clone()], 0, 1).unwrap().remove(0);
        let eos = m.vocab.specials().eos.unwrap();
        assert_eq!(batched, g.tokens.iter().copied().filter(|&t| t != eos).collect::<Vec<_>>());
    }
}

#[test]
fn beam_never_scores_below_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for i in 0..30 {
        let m = model::<f64>(9, 300 + i, 0.0);
        let src: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(5..14)).collect();
        let cfg = DecodeConfig { beam_size: 4, ..Default::default() };
        let g = greedy_decode(&m, &src, 0, 1, &cfg).unwrap();
        let b = beam_search(&m, &src, 0, 1, &cfg).unwrap();
        assert!(b.score >= g.score);
        let limit = cfg.max_len(src.len(), m.config.max_positions);
        assert!(b.tokens.len() <= limit);
    }
}

#[test]
fn eos_preferring_model_emits_only_eos() {
    let mut m = model::<f64>(9, 6, 0.0);
    let eos = m.vocab.specials().eos.unwrap();
    m.store.get_mut(m.layout.emb.pred_bias).tensor.data[eos] = 1e3;
    for beam in [1, 5] {
        let h = beam_search(&m, &[5, 6], 0, 1, &DecodeConfig { beam_size: beam, ..Default::default() }).unwrap();
        assert_eq!(h.tokens, vec![eos]);
        assert_eq!(m.decode_text(&h.tokens), "");
    }
}

#[test]
fn zero_steps_leave_model_unchanged() {
    let mut m = model::<f32>(9, 7, 0.1);
    let before = m.clone();
    let c = Corpus::new("a", vec![vec!["w0".into(), "w1".into()]]);
    let cfg = UnmtTrainConfig { steps: 0, ..Default::default() };
    let metrics = train_unmt(&mut m, [&c, &c], &[], &cfg).unwrap();
    assert_eq!(m, before);
    assert!(metrics.rows.is_empty());
}

#[test]
fn metrics_rows_match_validation_events() {
    let mut m = model::<f32>(9, 8, 0.1);
    let c1 = Corpus::new("a", vec![vec!["w0".into(), "w1".into()], vec!["w2".into()]]);
    let c2 = Corpus::new("b", vec![vec!["w5".into(), "w6".into(), "w7".into()]]);
    let valid = ValidationSet { src_lang: 1, tgt_lang: 0, sources: c2.clone(), references: vec!["w0 w1".into()] };
    let cfg = UnmtTrainConfig { steps: 10, batch_size: 2, eval_every: 4, patience: 0, ..Default::default() };
    let metrics = train_unmt(&mut m, [&c1, &c2], &[valid], &cfg).unwrap();
    assert_eq!(metrics.rows.iter().map(|r| r.step).collect::<Vec<_>>(), vec![4, 8, 10]);
    assert_eq!(metrics.to_tsv().lines().count(), 3);
}

#[test]
fn decoder_is_causal_and_encoder_ignores_padding() {
    use crate::neural::PaddedBatch;
    let m = model::<f64>(12, 9, 0.0);
    let run = |src: &[Vec<usize>], tgt: &[Vec<usize>]| {
        let mut tape = Tape::new();
        let eb = PaddedBatch::new(src, 0);
        let h = encoder_forward::<f64, ChaCha8Rng>(&mut tape, &m.store, &m.layout, &m.config, &eb, &vec![0; src.len()], None).unwrap();
        let enc = tape.value(h).to_vec();
        let db = PaddedBatch::new(tgt, 0);
        let d = decoder_forward::<f64, ChaCha8Rng>(&mut tape, &m.store, &m.layout, &m.config, &db, &vec![1; tgt.len()], h, &eb.padding(), None).unwrap();
        (enc, tape.value(d).to_vec(), eb, db)
    };
    let dm = m.config.model_dim;
    let (e1, d1, eb, _) = run(&[vec![2, 5, 6, 3], vec![2, 7, 3]], &[vec![2, 8, 9, 10]]);
    // padding id at position (1, 3) changed from 0 to 11
    let mut tape = Tape::new();
    let mut b2 = eb.clone();
    b2.ids[7] = 11;
    let h = encoder_forward::<f64, ChaCha8Rng>(&mut tape, &m.store, &m.layout, &m.config, &b2, &[0, 0], None).unwrap();
    let e2 = tape.value(h);
    for (pos, pad) in eb.padding().iter().enumerate() {
        if !pad {
            for c in 0..dm {
                assert!((e1[pos * dm + c] - e2[pos * dm + c]).abs() < 1e-6);
            }
        }
    }
    let _ = d1;
    // causality: changing target token 2 leaves positions 0 and 1 unchanged
    let (_, da, _, _) = run(&[vec![2, 5, 3]], &[vec![2, 8, 9, 10]]);
    let (_, db_, _, _) = run(&[vec![2, 5, 3]], &[vec![2, 8, 11, 10]]);
    for i in 0..2 * dm {
        assert!((da[i] - db_[i]).abs() < 1e-9);
    }
    assert!((0..dm).any(|c| (da[2 * dm + c] - db_[2 * dm + c]).abs() > 1e-6));
    // zero-length target gives an empty output
    let (_, empty, _, _) = run(&[vec![2, 5, 3]], &[vec![]]);
    assert!(empty.is_empty());
}

#[test]
fn batch_permutation_permutes_encoder_output() {
    use crate::neural::PaddedBatch;
    let m = model::<f64>(12, 10, 0.0);
    let src = vec![vec![2, 5, 6, 3], vec![2, 7, 3], vec![2, 8, 9, 10, 3]];
    let enc = |s: &[Vec<usize>]| {
        let mut tape = Tape::new();
        let b = PaddedBatch::new(s, 0);
        let h = encoder_forward::<f64, ChaCha8Rng>(&mut tape, &m.store, &m.layout, &m.config, &b, &vec![0; s.len()], None).unwrap();
        (tape.value(h).to_vec(), b.len)
    };
    let (a, l) = enc(&src);
    let perm = [2, 0, 1];
    let (b, _) = enc(&perm.iter().map(|&i| src[i].clone()).collect::<Vec<_>>());
    let dm = m.config.model_dim;
    for (new, &old) in perm.iter().enumerate() {
        for t in 0..src[old].len() {
            for c in 0..dm {
                assert!((a[(old * l + t) * dm + c] - b[(new * l + t) * dm + c]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn encoder_rejects_bad_input() {
    use crate::neural::PaddedBatch;
    let m = model::<f64>(5, 11, 0.0);
    let mut tape = Tape::new();
    let b = PaddedBatch::new(&[vec![2, 99, 3]], 0);
    match encoder_forward::<f64, ChaCha8Rng>(&mut tape, &m.store, &m.layout, &m.config, &b, &[0], None) {
        Err(Error::TokenOutOfRange { position, id, .. }) => assert_eq!((position, id), (1, 99)),
        other => panic!("{other:?}"),
    }
    let long = PaddedBatch::new(&[vec![5; 40]], 0);
    assert!(matches!(
        encoder_forward::<f64, ChaCha8Rng>(&mut tape, &m.store, &m.layout, &m.config, &long, &[0], None),
        Err(Error::SequenceTooLong { .. })
    ));
}
