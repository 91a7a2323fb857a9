//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! The desk experiment runs once through the `picto` binary (corpus, both
//! models, evaluation); every criterion then checks its artifacts or runs
//! its own oracle.

mod support;

use std::fmt::Write as _;
use std::net::SocketAddr;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::{Duration, Instant};

use ndarray::Array2;
use picto::service::{default_role_colors, Service, ServiceConfig};
use picto_core::corpus::{parse_tagged, read_corpus, write_corpus, Mode, Role, Sentence};
use picto_core::eval::{acc_at_k, entropy_at_k, mrr, rank_of, Comparison};
use picto_core::mlm::{
    is_eligible, mask_collate, Checkpoint, MlmModel, ModelConfig, Substitution, TrainConfig, TrainSeq,
};
use picto_core::pipeline::{prepare_checkpoint, train_tokenizer, DEFAULT_VOCAB_TARGET};
use picto_core::prediction::{card_vector, Board, Card, CardDecoder, Predictor, Query};
use picto_core::tokenizer::{add_mwe_tokens, add_role_tokens, role_tag_strings, TokenSeq, Vocab, CLS, MASK, SEP};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use support::{board_path, oracle_card_vector, oracle_mean, oracle_mwe_init, oracle_segment, picto_ok, to_f32};

const RUNTIME_BUDGET: Duration = Duration::from_secs(20 * 60);
const K_LIST: [usize; 5] = [1, 9, 18, 25, 36];

/// Artifacts of the desk experiment.
struct Run {
    dir: tempfile::TempDir,
    elapsed: Duration,
    report: Comparison,
    table: String,
    cs: Checkpoint,
    flat: Checkpoint,
    board: Board,
    train: Vec<Sentence>,
    test: Vec<Sentence>,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn eval_args<'a>(dir: &'a Path, board: &'a str, report: &'a str, rankings: &'a str) -> Vec<String> {
    [
        "eval",
        "--model-cs",
        s(&dir.join("cs.ckpt")),
        "--model-flat",
        s(&dir.join("flat.ckpt")),
        "--test",
        s(&dir.join("corpus.test")),
        "--board",
        board,
        "--k",
        "1,9,18,25,36",
        "--report",
        s(&dir.join(report)),
        "--dump-rankings",
        s(&dir.join(rankings)),
    ]
    .map(str::to_owned)
    .to_vec()
}

fn desk_run() -> Run {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let board = board_path();
    let start = Instant::now();
    picto_ok(&[
        "generate-corpus",
        "--seed",
        "42",
        "--train",
        "2000",
        "--test",
        "200",
        "--out",
        s(&d.join("corpus")),
    ]);
    for mode in ["cs", "flat"] {
        picto_ok(&[
            "train",
            "--mode",
            mode,
            "--preset",
            "desk",
            "--corpus",
            s(&d.join("corpus.train")),
            "--board",
            s(&board),
            "--out",
            s(&d.join(format!("{mode}.ckpt"))),
            "--vocab-out",
            s(&d.join(format!("{mode}.vocab"))),
        ]);
    }
    let table = picto_ok(&eval_args(d, s(&board), "report.json", "rankings.json"));
    let elapsed = start.elapsed();
    let report = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    Run {
        elapsed,
        report,
        table,
        cs: Checkpoint::load(d.join("cs.ckpt")).unwrap(),
        flat: Checkpoint::load(d.join("flat.ckpt")).unwrap(),
        board: Board::load(&board).unwrap(),
        train: read_corpus(&d.join("corpus.train")).unwrap(),
        test: read_corpus(&d.join("corpus.test")).unwrap(),
        dir,
    }
}

fn directional_accuracy(run: &Run) -> String {
    let (cs, flat) = (&run.report.cs, &run.report.flat);
    let (a_cs, a_flat) = (cs.acc_at(1).unwrap(), flat.acc_at(1).unwrap());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let detail = format!(
        "ACC@1 cs {a_cs:.3} > flat {a_flat:.3}, MRR cs {:.3} > flat {:.3}, pipeline {:.0}s on {cores} core(s)",
        cs.mrr,
        flat.mrr,
        run.elapsed.as_secs_f64()
    );
    assert_eq!((cs.cases, flat.cases), (200, 200));
    assert_eq!(run.train.len(), 2000);
    assert_eq!(run.cs.meta.loss_trace.len(), 30);
    assert_eq!(run.flat.meta.loss_trace.len(), 30);
    let base = run.flat.vocab.len();
    assert!(
        (0..base as u32).all(|id| run.cs.vocab.token(id) == run.flat.vocab.token(id)),
        "vocabularies diverge"
    );
    assert!(a_cs > a_flat, "{detail}");
    assert!(cs.mrr > flat.mrr, "{detail}");
    assert!(run.elapsed <= RUNTIME_BUDGET, "{detail}");
    detail
}

fn directional_entropy(run: &Run) -> String {
    let (cs, flat) = (&run.report.cs, &run.report.flat);
    let violations: Vec<usize> = K_LIST
        .iter()
        .filter(|&&k| cs.entropy_at(k).unwrap() > flat.entropy_at(k).unwrap())
        .copied()
        .collect();
    let mut detail = String::new();
    for k in K_LIST {
        let _ = write!(
            detail,
            "E@{k} {:.3}/{:.3} ",
            cs.entropy_at(k).unwrap(),
            flat.entropy_at(k).unwrap()
        );
    }
    let detail = format!("cs/flat {}; violations at K = {violations:?}", detail.trim_end());
    assert!(cs.entropy_at(1).unwrap() < flat.entropy_at(1).unwrap(), "{detail}");
    assert!(violations.len() <= 1, "{detail}");
    detail
}

fn masking_statistics(run: &Run) -> String {
    let policy = TrainConfig::desk().mask_policy();
    let mut parts = Vec::new();
    for (mode, ckpt) in [(Mode::Cs, &run.cs), (Mode::Flat, &run.flat)] {
        let vocab = &ckpt.vocab;
        let seqs: Vec<TokenSeq> = run.train.iter().map(|t| vocab.encode(&t.render(mode), 33)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let (mut eligible, mut selected, mut counts) = (0usize, 0usize, [0usize; 3]);
        while eligible < 100_000 {
            let batch = mask_collate(&seqs, vocab, &policy, &mut rng);
            for (seq, masked) in seqs.iter().zip(&batch.seqs) {
                for i in 0..seq.len {
                    let ok = is_eligible(vocab, seq.ids[i], &policy);
                    eligible += usize::from(ok);
                    let Some(sub) = masked.substitutions[i] else { continue };
                    assert!(ok && !vocab.is_role_tag(seq.ids[i]), "ineligible position selected");
                    selected += 1;
                    counts[match sub {
                        Substitution::Mask => 0,
                        Substitution::Random => 1,
                        Substitution::Keep => 2,
                    }] += 1;
                }
            }
        }
        let rate = selected as f64 / eligible as f64;
        let fr: Vec<f64> = counts.iter().map(|&c| c as f64 / selected as f64).collect();
        let line = format!(
            "{mode}: {eligible} eligible, rate {rate:.4}, mask/random/keep {:.3}/{:.3}/{:.3}",
            fr[0], fr[1], fr[2]
        );
        assert!((rate - 0.15).abs() <= 0.005, "{line}");
        for (f, want) in fr.iter().zip([0.8, 0.1, 0.1]) {
            assert!((f - want).abs() <= 0.01, "{line}");
        }
        parts.push(line);
    }
    parts.join("; ")
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

fn tying_and_encoding(run: &Run) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut worst = 0f64;
    let mut queries = 0;
    for (mode, ckpt) in [(Mode::Cs, &run.cs), (Mode::Flat, &run.flat)] {
        let model = &ckpt.model;
        assert!(std::ptr::eq(model.decoder_weight(), &model.params.word_embeddings));
        let predictor = Predictor::build(ckpt.clone(), run.board.clone()).unwrap();
        let table = &model.params.word_embeddings;
        // Card vectors at storage precision, like every embedding row.
        let vectors: Vec<Vec<f32>> = predictor
            .decoder()
            .card_ids()
            .iter()
            .map(|id| {
                to_f32(oracle_card_vector(
                    &ckpt.vocab,
                    table,
                    &run.board.card(id).unwrap().caption,
                ))
            })
            .collect();
        for _ in 0..50 {
            let q = random_query(&mut rng, &run.board, mode);
            let mut ids = vec![CLS];
            ids.extend(ckpt.vocab.tokenize(&q.text()));
            ids.push(SEP);
            let pos = ids.iter().position(|&t| t == MASK).unwrap();
            let hidden = model.transformed_states(&ids).unwrap();
            let full = hidden.dot(&table.t()) + &model.params.decoder_bias;
            assert_eq!(model.forward_logits(&ids).unwrap(), full, "full-vocabulary logits");

            let h = hidden.row(pos);
            let ranking = predictor.rank(&q).unwrap();
            for (j, v) in vectors.iter().enumerate() {
                let want: f64 = h.iter().zip(v).map(|(&a, &b)| f64::from(a) * f64::from(b)).sum();
                let rel = (ranking.logits[j] - want).abs() / want.abs().max(1e-3);
                worst = worst.max(rel);
            }
            queries += 1;
        }
    }
    let detail =
        format!("{queries} queries, decoder shares the embedding table, worst card-logit relative error {worst:.2e}");
    assert!(worst <= 1e-5, "{detail}");
    detail
}

fn integer_table(rows: usize, width: usize, seed: u64) -> Array2<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_simple_fn((rows, width), || rng.random_range(-20i32..=20) as f32)
}

fn max_abs_diff(a: &[f32], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, y)| (f64::from(x) - y).abs())
        .fold(0.0, f64::max)
}

fn mean_vectors(run: &Run) -> String {
    let base = train_tokenizer(&run.train, &run.board, DEFAULT_VOCAB_TARGET).unwrap();
    let captions = run.board.multiword_captions();

    // Integer tables: exact.
    let table = integer_table(base.len(), 8, 1);
    let (tagged, tags) = add_role_tokens(&base, &table).unwrap();
    for (new, tag) in tags.iter().zip(role_tag_strings()) {
        assert_eq!(
            new.init,
            to_f32(oracle_mean(&table, &oracle_segment(&base, &tag))),
            "{tag}"
        );
    }
    let table = integer_table(tagged.len(), 8, 2);
    let (_, mwe) = add_mwe_tokens(&tagged, &captions, &table).unwrap();
    for new in &mwe.added {
        let expr = new.token.replace('_', " ");
        assert_eq!(new.init, to_f32(oracle_mwe_init(&tagged, &table, &expr)), "{expr}");
    }
    let mut cards = 0;
    for ckpt in [&run.cs, &run.flat] {
        let table = integer_table(ckpt.vocab.len(), 8, 3);
        for c in &run.board.cards {
            let got = card_vector(c, &ckpt.vocab, &table).unwrap();
            assert_eq!(
                got,
                to_f32(oracle_card_vector(&ckpt.vocab, &table, &c.caption)),
                "{}",
                c.caption
            );
            cards += 1;
        }
    }

    // Real model: the cs model's initialization and both trained decoders.
    let seed = TrainConfig::desk().seed;
    let template = ModelConfig::desk(base.len());
    let init = Checkpoint::init(template.clone(), base.clone(), seed).unwrap();
    let prepared = prepare_checkpoint(Mode::Cs, &base, &run.board, &template, seed).unwrap();
    assert_eq!(
        prepared.ckpt.vocab, run.cs.vocab,
        "prepared vocabulary differs from the trained model's"
    );
    let mut worst = 0f64;
    let e0 = &init.model.params.word_embeddings;
    for new in &prepared.role_tags {
        worst = worst.max(max_abs_diff(
            &new.init,
            &oracle_mean(e0, &oracle_segment(&base, &new.token)),
        ));
    }
    let e1 = &prepared.ckpt.model.params.word_embeddings;
    for new in &prepared.mwe.added {
        worst = worst.max(max_abs_diff(
            &new.init,
            &oracle_mwe_init(&base, e1, &new.token.replace('_', " ")),
        ));
    }
    for ckpt in [&run.cs, &run.flat] {
        let decoder = CardDecoder::build(&run.board, ckpt).unwrap();
        for c in &run.board.cards {
            let want = oracle_card_vector(&ckpt.vocab, &ckpt.model.params.word_embeddings, &c.caption);
            worst = worst.max(max_abs_diff(&decoder.column(&c.id).unwrap(), &want));
        }
    }
    let detail = format!(
        "{} tags, {} multi-word tokens, {cards} card vectors exact on integer tables; worst deviation on the real model {worst:.1e}",
        tags.len(),
        mwe.added.len()
    );
    assert!(worst <= 1e-7, "{detail}");
    detail
}

fn metric_oracles(run: &Run) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..100 {
        let cards = rng.random_range(1..=40);
        let cases = rng.random_range(1..=50);
        let ids: Vec<String> = (0..cards).map(|i| format!("c{i}")).collect();
        let (mut rankings, mut targets, mut log_probs) = (vec![], vec![], vec![]);
        for _ in 0..cases {
            let mut ranking = ids.clone();
            ranking.shuffle(&mut rng);
            rankings.push(ranking);
            targets.push(if rng.random_bool(0.1) {
                "absent".to_owned()
            } else {
                ids[rng.random_range(0..cards)].clone()
            });
            let mut logits: Vec<f64> = (0..cards).map(|_| rng.random_range(-5.0..5.0)).collect();
            logits.sort_by(|a, b| b.total_cmp(a));
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            log_probs.push(logits.iter().map(|l| (l.exp() / z).ln()).collect::<Vec<f64>>());
        }
        let ranks: Vec<Option<usize>> = rankings.iter().zip(&targets).map(|(r, t)| rank_of(r, t)).collect();
        let mut prev = 0.0;
        for k in 1..=cards {
            let hits = rankings
                .iter()
                .zip(&targets)
                .filter(|(r, t)| r[..k].contains(t))
                .count();
            let acc = acc_at_k(&ranks, k).unwrap();
            assert_eq!(acc, hits as f64 / cases as f64, "ACC@{k}");
            assert!(acc >= prev);
            prev = acc;
            let mut total = 0.0;
            for lp in &log_probs {
                let mut s = 0.0;
                for l in &lp[..k] {
                    s -= l;
                }
                total += s / k as f64;
            }
            let e = entropy_at_k(&log_probs, k).unwrap();
            assert!((e - total / cases as f64).abs() <= 1e-9, "E@{k}");
        }
        let mut rr = 0.0;
        for (r, t) in rankings.iter().zip(&targets) {
            if let Some(p) = r.iter().position(|c| c == t) {
                rr += 1.0 / (p + 1) as f64;
            }
        }
        assert_eq!(mrr(&ranks).unwrap(), rr / cases as f64, "MRR");
    }
    for r in [&run.report.cs, &run.report.flat] {
        assert!(r.acc.windows(2).all(|w| w[0] <= w[1]), "{} ACC@K decreases", r.name);
    }
    "100 random instances match enumeration; ACC@K nondecreasing in both reports".into()
}

fn gradient_check(_: &Run) -> String {
    let config = ModelConfig {
        hidden: 8,
        layers: 1,
        heads: 2,
        ff_size: 16,
        max_seq: 8,
        vocab_size: 20,
        dropout: 0.0,
    };
    let mut model = MlmModel::init(config, &mut ChaCha8Rng::seed_from_u64(11))
        .unwrap()
        .cast::<f64>();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (_, mut t) in model.params.tensors_mut() {
        t.mapv_inplace(|v| v * 10.0 + rng.random_range(-0.1..0.1));
    }
    let (a_ids, a_t) = ([2, 7, 4, 9, 3], [None, None, Some(8), Some(9), None]);
    let (b_ids, b_t) = (
        [2, 11, 12, 13, 14, 4, 3],
        [None, Some(11), None, None, None, Some(15), None],
    );
    let batch = [
        TrainSeq {
            ids: &a_ids,
            targets: &a_t,
        },
        TrainSeq {
            ids: &b_ids,
            targets: &b_t,
        },
    ];
    let (_, _, grads) = model.loss_and_grad(&batch, 1.0, None);
    let analytic: Vec<(String, Vec<f64>)> = grads
        .tensors()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();
    let h = 1e-4;
    let (mut worst, mut at, mut checked) = (0f64, String::new(), 0usize);
    for (ti, (name, grad)) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let set = |m: &mut MlmModel<f64>, v: f64| *m.params.tensors_mut()[ti].1.iter_mut().nth(i).unwrap() = v;
            let original = *model.params.tensors()[ti].1.iter().nth(i).unwrap();
            set(&mut model, original + h);
            let (up, _, _) = model.loss_and_grad(&batch, 1.0, None);
            set(&mut model, original - h);
            let (down, _, _) = model.loss_and_grad(&batch, 1.0, None);
            set(&mut model, original);
            let numeric = (up - down) / (2.0 * h);
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
            if err > worst {
                (worst, at) = (err, format!("{name}[{i}]"));
            }
            checked += 1;
        }
    }
    let detail = format!("{checked} parameters, worst relative error {worst:.1e} at {at}");
    assert!(worst < 1e-3, "{detail}");
    detail
}

fn determinism_and_round_trips(run: &Run) -> String {
    let d = run.dir.path();
    let board = board_path();
    picto_ok(&[
        "generate-corpus",
        "--seed",
        "42",
        "--train",
        "2000",
        "--test",
        "200",
        "--out",
        s(&d.join("again")),
    ]);
    for split in ["train", "test"] {
        let a = std::fs::read(d.join(format!("corpus.{split}"))).unwrap();
        assert_eq!(
            a,
            std::fs::read(d.join(format!("again.{split}"))).unwrap(),
            "{split} corpus differs"
        );
    }

    let mut traces = Vec::new();
    for name in ["short-a", "short-b"] {
        let out = d.join(format!("{name}.ckpt"));
        picto_ok(&[
            "train",
            "--mode",
            "cs",
            "--epochs",
            "2",
            "--corpus",
            s(&d.join("corpus.train")),
            "--board",
            s(&board),
            "--out",
            s(&out),
        ]);
        traces.push((
            Checkpoint::load(&out).unwrap().meta.loss_trace,
            std::fs::read(&out).unwrap(),
        ));
    }
    assert_eq!(traces[0].0.len(), 2);
    assert_eq!(traces[0], traces[1], "repeated training differs");

    picto_ok(&eval_args(d, s(&board), "report2.json", "rankings2.json"));
    for (a, b) in [("rankings.json", "rankings2.json"), ("report.json", "report2.json")] {
        assert_eq!(
            std::fs::read(d.join(a)).unwrap(),
            std::fs::read(d.join(b)).unwrap(),
            "{a} differs on rerun"
        );
    }

    for (mode, ckpt) in [("cs", &run.cs), ("flat", &run.flat)] {
        let bytes = std::fs::read(d.join(format!("{mode}.ckpt"))).unwrap();
        assert_eq!(ckpt.to_bytes().unwrap(), bytes, "{mode} checkpoint bytes");
        let vocab_path = d.join(format!("{mode}.vocab"));
        let vocab = Vocab::load(&vocab_path).unwrap();
        assert_eq!(&vocab, &ckpt.vocab);
        assert_eq!(
            vocab.to_file_string().into_bytes(),
            std::fs::read(&vocab_path).unwrap(),
            "{mode} vocab bytes"
        );
    }

    for sentence in run.train.iter().chain(&run.test) {
        assert_eq!(&parse_tagged(&sentence.render_tagged()).unwrap(), sentence);
    }
    let rewritten = d.join("rewritten.train");
    write_corpus(&rewritten, &run.train).unwrap();
    assert_eq!(
        std::fs::read(&rewritten).unwrap(),
        std::fs::read(d.join("corpus.train")).unwrap()
    );
    format!(
        "corpora, 2-epoch loss traces {:.4?}, rankings and report identical on rerun; checkpoints, vocab files and {} tagged sentences round-trip",
        traces[0].0,
        run.train.len() + run.test.len()
    )
}

struct Scripted {
    model: Mode,
    mode: Option<&'static str>,
    slots: &'static [(&'static str, &'static str)],
    mask: Option<&'static str>,
    prefix: Option<&'static str>,
    k: usize,
}

const fn cs(slots: &'static [(&'static str, &'static str)], mask: &'static str, k: usize) -> Scripted {
    Scripted {
        model: Mode::Cs,
        mode: None,
        slots,
        mask: Some(mask),
        prefix: None,
        k,
    }
}

const fn flat(prefix: &'static str, k: usize) -> Scripted {
    Scripted {
        model: Mode::Flat,
        mode: None,
        slots: &[],
        mask: None,
        prefix: Some(prefix),
        k,
    }
}

const QUERIES: [Scripted; 20] = [
    cs(&[("quem", "eu"), ("verbo", "querer comer")], "o_que", 12),
    cs(&[("verbo", "comer")], "o_que", 5),
    cs(&[("quem", "eu"), ("verbo", "beber")], "o_que", 9),
    cs(&[("quem", "você"), ("verbo", "brincar")], "onde", 18),
    cs(&[("verbo", "dormir")], "quando", 25),
    cs(&[("quem", "mamãe"), ("verbo", "ir")], "onde", 36),
    cs(&[("quem", "eu")], "verbo", 12),
    cs(&[("verbo", "comer"), ("o_que", "pipoca")], "quem", 3),
    cs(&[("verbo", "correr")], "como", 10),
    cs(&[("quem", "eu"), ("verbo", "comer"), ("o_que", "pipoca")], "onde", 241),
    cs(&[], "o_que", 1),
    cs(&[("quem", "papai"), ("verbo", "fazer xixi")], "quando", 7),
    cs(&[("verbo", "tomar banho"), ("quando", "agora")], "onde", 12),
    cs(&[("quem", "eu"), ("verbo", "querer comer")], "o_que", 500),
    Scripted {
        mode: Some("flat"),
        ..flat("eu querer comer", 12)
    },
    flat("eu querer comer", 12),
    Scripted {
        slots: &[("quem", "eu"), ("verbo", "beber")],
        mask: Some("o_que"),
        prefix: None,
        ..flat("", 9)
    },
    flat("você brincar", 18),
    flat("", 36),
    Scripted {
        slots: &[("verbo", "ir")],
        mask: Some("onde"),
        prefix: None,
        ..flat("", 25)
    },
];

impl Scripted {
    fn cli_args(&self, model: &Path, board: &Path) -> Vec<String> {
        let mut args: Vec<String> = ["predict", "--json", "--model", s(model), "--board", s(board)]
            .map(str::to_owned)
            .to_vec();
        for (role, text) in self.slots {
            args.extend(["--slot".into(), format!("{role}={text}")]);
        }
        if let Some(m) = self.mask {
            args.extend(["--mask".into(), m.into()]);
        }
        if let Some(p) = self.prefix {
            args.extend(["--prefix".into(), p.into()]);
        }
        if let Some(m) = self.mode {
            args.extend(["--mode".into(), m.into()]);
        }
        args.extend(["--k".into(), self.k.to_string()]);
        args
    }

    fn body(&self) -> serde_json::Value {
        let mut body = serde_json::json!({
            "slots": self.slots.iter().map(|(r, t)| (r.to_string(), serde_json::Value::from(*t))).collect::<serde_json::Map<_, _>>(),
            "k": self.k,
        });
        if let Some(m) = self.mask {
            body["mask_role"] = m.into();
        }
        if let Some(p) = self.prefix {
            body["prefix"] = p.into();
        }
        if let Some(m) = self.mode {
            body["mode"] = m.into();
        }
        body
    }
}

fn cli_service_consistency(run: &Run) -> String {
    let board = board_path();
    let runtime = tokio::runtime::Runtime::new().unwrap();
    let mut addrs = Vec::new();
    for mode in [Mode::Cs, Mode::Flat] {
        let config = ServiceConfig {
            addr: SocketAddr::from(([127, 0, 0, 1], 0)),
            model: run.path(&format!("{mode}.ckpt")),
            board: board.clone(),
            decoder: None,
            default_k: 12,
            static_dir: None,
            role_colors: default_role_colors(),
        };
        let service = runtime.block_on(Service::bind(&config)).unwrap();
        addrs.push(service.local_addr().unwrap());
        runtime.spawn(service.run(std::future::pending()));
    }
    let client = reqwest::Client::new();
    let mut compared = 0;
    for q in &QUERIES {
        let (i, ckpt) = match q.model {
            Mode::Cs => (0, run.path("cs.ckpt")),
            Mode::Flat => (1, run.path("flat.ckpt")),
        };
        let cli = picto_ok(&q.cli_args(&ckpt, &board));
        let (status, http) = runtime.block_on(async {
            let resp = client
                .post(format!("http://{}/predict", addrs[i]))
                .json(&q.body())
                .send()
                .await
                .unwrap();
            (resp.status(), resp.text().await.unwrap())
        });
        assert!(status.is_success(), "{status}: {http}");
        assert_eq!(cli.trim_end(), http, "query {}", compared + 1);
        let parsed: serde_json::Value = serde_json::from_str(&http).unwrap();
        let n = parsed["predictions"].as_array().unwrap().len();
        assert_eq!(n, q.k.min(run.board.cards.len()));
        compared += 1;
    }
    format!("{compared} scripted queries byte-identical between `picto predict --json` and POST /predict")
}

static PANIC_MESSAGE: Mutex<Option<String>> = Mutex::new(None);

fn main() {
    panic::set_hook(Box::new(|info| {
        *PANIC_MESSAGE.lock().unwrap() = Some(info.to_string().replace('\n', " "));
    }));
    let run = panic::catch_unwind(desk_run);
    let setup_error = PANIC_MESSAGE.lock().unwrap().take();
    if let Ok(run) = &run {
        print!("{}", run.table);
    }

    type Check = fn(&Run) -> String;
    let criteria: [(&str, Check); 9] = [
        ("directional accuracy and runtime", directional_accuracy),
        ("directional entropy", directional_entropy),
        ("masking statistics", masking_statistics),
        ("tied decoder and card encoding", tying_and_encoding),
        ("mean-vector construction", mean_vectors),
        ("metric oracles", metric_oracles),
        ("gradient check", gradient_check),
        ("determinism and round-trips", determinism_and_round_trips),
        ("cli and service consistency", cli_service_consistency),
    ];
    let mut failed = 0;
    for (n, (name, check)) in criteria.iter().enumerate() {
        let outcome = match &run {
            Ok(run) => panic::catch_unwind(AssertUnwindSafe(|| check(run)))
                .map_err(|_| PANIC_MESSAGE.lock().unwrap().take().unwrap_or_default()),
            Err(_) => Err(format!(
                "desk experiment failed: {}",
                setup_error.clone().unwrap_or_default()
            )),
        };
        match outcome {
            Ok(detail) => println!("PASS {}. {name}: {detail}", n + 1),
            Err(msg) => {
                failed += 1;
                println!("FAIL {}. {name}: {msg}", n + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
