mod common;

use common::oracle_segment;
use ndarray::Array2;
use picto_core::corpus::{parse_tagged, Mode, Role};
use picto_core::mlm::Checkpoint;
use picto_core::prediction::{build_masked_sequence, card_vector, Board, Card, CardDecoder, Predictor, Query};
use picto_core::tokenizer::{TokenId, Vocab};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Caption tokens by brute force: multi-word tokens first, then pieces.
fn oracle_caption_ids(vocab: &Vocab, caption: &str) -> Vec<TokenId> {
    let words: Vec<String> = caption.split_whitespace().map(str::to_lowercase).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let joined = (2..=3).rev().filter(|n| i + n <= words.len()).find_map(|n| {
            let id = vocab.id(&words[i..i + n].join("_"))?;
            vocab.is_mwe(id).then_some((id, n))
        });
        match joined {
            Some((id, n)) => {
                out.push(id);
                i += n;
            }
            None => {
                out.extend(oracle_segment(vocab, &words[i]));
                i += 1;
            }
        }
    }
    out
}

fn oracle_card_vector(vocab: &Vocab, table: &Array2<f32>, caption: &str) -> Vec<f64> {
    let ids = oracle_caption_ids(vocab, caption);
    (0..table.ncols())
        .map(|c| ids.iter().map(|&id| f64::from(table[[id as usize, c]])).sum::<f64>() / ids.len() as f64)
        .collect()
}

fn card(id: &str, caption: &str, role: Option<Role>) -> Card {
    Card {
        id: id.into(),
        caption: caption.into(),
        role_hint: role,
        pictogram: None,
        folder: None,
    }
}

fn random_query(rng: &mut impl Rng, board: &Board, mode: Mode) -> Query {
    let mask = *Role::ALL.choose(rng).unwrap();
    let mut filled = Vec::new();
    for r in Role::ALL {
        if r == mask || !rng.random_bool(0.5) {
            continue;
        }
        let options: Vec<&Card> = board.cards.iter().filter(|c| c.role_hint == Some(r)).collect();
        filled.push((r, options.choose(rng).unwrap().caption.clone()));
    }
    Query::from_slots(mode, filled, Some(mask), rng.random_range(1..=40)).unwrap()
}

#[test]
fn card_vectors_match_oracle_on_integer_tables() {
    for mode in [Mode::Cs, Mode::Flat] {
        let ckpt = common::checkpoint(mode);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let table = Array2::from_shape_simple_fn((ckpt.vocab.len(), 6), || rng.random_range(-20i32..=20) as f32);
        for c in &common::board().cards {
            let got = card_vector(c, &ckpt.vocab, &table).unwrap();
            let want: Vec<f32> = oracle_card_vector(&ckpt.vocab, &table, &c.caption)
                .into_iter()
                .map(|x| x as f32)
                .collect();
            assert_eq!(got, want, "{mode} {}", c.caption);
        }
    }
}

#[test]
fn card_vectors_match_oracle_on_model_embeddings() {
    for mode in [Mode::Cs, Mode::Flat] {
        let ckpt = common::checkpoint(mode);
        let table = &ckpt.model.params.word_embeddings;
        let decoder = CardDecoder::build(&common::board(), &ckpt).unwrap();
        for c in &common::board().cards {
            let want = oracle_card_vector(&ckpt.vocab, table, &c.caption);
            let col = decoder.column(&c.id).unwrap();
            for (g, w) in col.iter().zip(&want) {
                assert!((f64::from(*g) - w).abs() <= 1e-7, "{} {g} vs {w}", c.caption);
            }
        }
    }
}

#[test]
fn single_token_caption_is_its_row_and_mwe_caption_is_one_token() {
    let ckpt = common::checkpoint(Mode::Cs);
    let table = &ckpt.model.params.word_embeddings;
    let pipoca = ckpt.vocab.id("pipoca").unwrap();
    let v = card_vector(&card("p", "pipoca", None), &ckpt.vocab, table).unwrap();
    assert_eq!(v, table.row(pipoca as usize).to_vec());
    let xixi = ckpt.vocab.id("fazer_xixi").unwrap();
    let v = card_vector(&card("x", "fazer xixi", None), &ckpt.vocab, table).unwrap();
    assert_eq!(v, table.row(xixi as usize).to_vec());

    let flat = common::checkpoint(Mode::Flat);
    let t = &flat.model.params.word_embeddings;
    let (fazer, xixi) = (flat.vocab.tokenize("fazer"), flat.vocab.tokenize("xixi"));
    assert_eq!((fazer.len(), xixi.len()), (1, 1));
    let v = card_vector(&card("x", "fazer xixi", None), &flat.vocab, t).unwrap();
    let mean: Vec<f32> = t
        .row(fazer[0] as usize)
        .iter()
        .zip(t.row(xixi[0] as usize))
        .map(|(a, b)| ((f64::from(*a) + f64::from(*b)) / 2.0) as f32)
        .collect();
    assert_eq!(v, mean);
}

#[test]
fn decoder_columns_and_single_card_board() {
    let ckpt = common::checkpoint(Mode::Cs);
    let board = common::board();
    let decoder = CardDecoder::build(&board, &ckpt).unwrap();
    assert_eq!(decoder.matrix().dim(), (ckpt.config().hidden, board.cards.len()));
    let pipoca = board.card("pipoca").unwrap();
    let table = &ckpt.model.params.word_embeddings;
    assert_eq!(
        decoder.column("pipoca").unwrap(),
        card_vector(pipoca, &ckpt.vocab, table).unwrap()
    );

    let one = Board::new("one", vec![pipoca.clone()], vec![]).unwrap();
    let d1 = CardDecoder::build(&one, &ckpt).unwrap();
    assert_eq!(d1.matrix().dim(), (ckpt.config().hidden, 1));
    assert_eq!(d1.column("pipoca"), decoder.column("pipoca"));
    let predictor = Predictor::new(ckpt.clone(), one, d1).unwrap();
    let q = Query::cs([(Role::Quem, "eu".to_string())], Role::OQue, 5).unwrap();
    let p = predictor.predict(&q).unwrap();
    assert_eq!(p.predictions.len(), 1);
    assert_eq!(p.predictions[0].prob, 1.0);
}

#[test]
fn predictions_do_not_depend_on_card_order() {
    let ckpt = common::checkpoint(Mode::Cs);
    let board = common::board();
    let mut shuffled = board.clone();
    shuffled.cards.shuffle(&mut ChaCha8Rng::seed_from_u64(2));
    let a = Predictor::build(ckpt.clone(), board.clone()).unwrap();
    let b = Predictor::build(ckpt, shuffled).unwrap();
    for c in &board.cards {
        assert_eq!(a.decoder().column(&c.id), b.decoder().column(&c.id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..20 {
        let q = random_query(&mut rng, &board, Mode::Cs);
        assert_eq!(a.predict(&q).unwrap(), b.predict(&q).unwrap());
    }
}

#[test]
fn card_logits_equal_direct_dot_products() {
    let board = common::board();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for mode in [Mode::Cs, Mode::Flat] {
        let ckpt = common::checkpoint(mode);
        let predictor = Predictor::build(ckpt.clone(), board.clone()).unwrap();
        let table = &ckpt.model.params.word_embeddings;
        let vectors: Vec<Vec<f64>> = predictor
            .decoder()
            .card_ids()
            .iter()
            .map(|id| oracle_card_vector(&ckpt.vocab, table, &board.card(id).unwrap().caption))
            .collect();
        for _ in 0..25 {
            let q = random_query(&mut rng, &board, mode);
            let ids = ckpt.vocab.tokenize(&q.text());
            let pos = 1 + ids.iter().position(|&t| t == picto_core::tokenizer::MASK).unwrap();
            let mut full = vec![picto_core::tokenizer::CLS];
            full.extend(&ids);
            full.push(picto_core::tokenizer::SEP);
            let hidden = ckpt.model.transformed_states(&full).unwrap();
            let h = hidden.row(pos);
            let ranking = predictor.rank(&q).unwrap();
            for (j, v) in vectors.iter().enumerate() {
                let want: f64 = h.iter().zip(v).map(|(&a, b)| f64::from(a) * b).sum();
                let got = ranking.logits[j];
                assert!((got - want).abs() <= 1e-5 * want.abs().max(1e-3), "{got} vs {want}");
            }
            let total: f64 = ranking.log_probs.iter().map(|l| l.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
            let p = predictor.predict(&q).unwrap();
            assert_eq!(p.predictions.len(), q.k.min(board.cards.len()));
            assert!(p.predictions.windows(2).all(|w| w[0].prob >= w[1].prob));
        }
    }
}

#[test]
fn masked_sequences_match_the_documented_layouts() {
    let cs = common::checkpoint(Mode::Cs);
    let show = |vocab: &Vocab, q: &Query| {
        let (seq, pos) = build_masked_sequence(q, vocab, 33).unwrap();
        let toks: Vec<&str> = seq.active().iter().map(|&id| vocab.token(id).unwrap()).collect();
        assert_eq!(toks[pos], "[MASK]");
        assert_eq!(toks.iter().filter(|t| **t == "[MASK]").count(), 1);
        toks.join(" ")
    };
    let q = Query::cs(
        [(Role::Quem, "eu".into()), (Role::Verbo, "comer".into())],
        Role::OQue,
        5,
    )
    .unwrap();
    assert_eq!(
        show(&cs.vocab, &q),
        "[CLS] <quem> eu </quem> <verbo> comer </verbo> <o_que> [MASK] </o_que> [SEP]"
    );
    let q = Query::cs([], Role::Quem, 5).unwrap();
    assert_eq!(show(&cs.vocab, &q), "[CLS] <quem> [MASK] </quem> [SEP]");
    let flat = common::checkpoint(Mode::Flat);
    let q = Query::flat("eu comer", 5).unwrap();
    assert_eq!(show(&flat.vocab, &q), "[CLS] eu comer [MASK] [SEP]");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let board = common::board();
    for _ in 0..50 {
        let q = random_query(&mut rng, &board, Mode::Cs);
        show(&cs.vocab, &q);
        let parsed = parse_tagged(&q.text().replace("[MASK]", "placeholder")).unwrap();
        assert!(parsed.slots().iter().any(|s| s.text == "placeholder"));
    }
    let long = Query::flat("eu ".repeat(40), 1).unwrap();
    assert!(build_masked_sequence(&long, &flat.vocab, 33).is_err());
    assert!(build_masked_sequence(&Query::cs([], Role::Quem, 1).unwrap(), &flat.vocab, 33).is_err());
}

#[test]
fn stale_decoder_is_rejected_and_k_is_clamped() {
    let board = common::board();
    let a = common::checkpoint(Mode::Cs);
    let b = common::prepared(Mode::Cs, 99).1.ckpt;
    let decoder = CardDecoder::build(&board, &a).unwrap();
    let err = Predictor::new(b, board.clone(), decoder.clone()).unwrap_err();
    assert!(err.to_string().contains("stale"), "{err}");

    let q = Query::cs([], Role::Quem, 10_000).unwrap();
    let p = picto_core::prediction::predict_cards(&q, &a, &board, &decoder).unwrap();
    assert_eq!(p.predictions.len(), board.cards.len());
    let total: f64 = p.predictions.iter().map(|c| c.prob).sum();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn decoder_file_round_trips() {
    let ckpt = common::checkpoint(Mode::Flat);
    let decoder = CardDecoder::build(&common::board(), &ckpt).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("decoder.json");
    decoder.save(&path).unwrap();
    let back = CardDecoder::load(&path).unwrap();
    assert_eq!(back, decoder);
    assert_eq!(back.fingerprint(), ckpt.fingerprint().unwrap());
    let reloaded = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
    assert!(Predictor::new(reloaded, common::board(), back).is_ok());
}
