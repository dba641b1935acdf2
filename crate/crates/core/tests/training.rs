use mcif_core::model::parse_scales;
use mcif_core::synth::{lengths_match, Corpus, CorpusSpec, Range};
use mcif_core::train::{decode, load_model, train, TrainConfig};

fn tiny_corpus(train_utts: usize) -> Corpus {
    let mut spec = CorpusSpec::default();
    spec.language.word_inventory = 6;
    spec.language.chars_per_word = Range::new(2, 3);
    spec.language.word_final_letters = 3;
    spec.language.noise_std = 0.0;
    spec.train_utts = train_utts;
    spec.heldout_utts = 0;
    spec.words_per_utt = Range::new(2, 3);
    Corpus::generate(&spec).unwrap()
}

fn short_config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig {
        epochs,
        ..TrainConfig::default()
    };
    cfg.schedule.boundaries = (2, 4);
    cfg.model.hidden = 32;
    cfg
}

#[test]
fn generated_targets_have_generated_lengths() {
    let corpus = tiny_corpus(20);
    let cfg = short_config(1);
    let out = train(&corpus, &cfg).unwrap();
    let builder = out.vocab.builder();
    for u in corpus.train() {
        let t = builder.build(&u.text).unwrap();
        assert!(lengths_match(u, &t), "{}", u.id);
    }
}

#[test]
fn stage_one_trains_only_the_character_terms() {
    let out = train(&tiny_corpus(4), &short_config(3)).unwrap();
    let first = &out.log[0];
    assert_eq!(first.stage, 1);
    assert_eq!(first.weights.ctc, [1.0, 0.0, 0.0]);
    assert_eq!(first.weights.qua, [true, false, false]);
    assert!(!first.weights.ce);
    assert!(first.loss.ctc[0] > 0.0);
    assert_eq!((first.loss.ctc[1], first.loss.ctc[2], first.loss.ce), (0.0, 0.0, 0.0));
    assert_eq!((first.loss.qua[1], first.loss.qua[2]), (0.0, 0.0));
    assert_eq!(out.log[2].stage, 2);
    assert!(out.log[2].weights.qua[1]);
}

#[test]
fn fits_a_small_training_set() {
    let corpus = tiny_corpus(20);
    let mut cfg = short_config(60);
    cfg.base_lr = 1e-2;
    cfg.schedule.boundaries = (10, 20);
    let out = train(&corpus, &cfg).unwrap();
    assert!(!out.report.diverged);
    // With no held-out split the report covers the training utterances.
    assert_eq!(out.report.heldout.utterances, 20);
    assert!(out.report.heldout.token_accuracy >= 0.9, "{:?}", out.report.heldout);
    let last = out.log.last().unwrap().loss.total;
    assert!(last < out.log[20].loss.total);
}

#[test]
fn saved_model_decodes_identically() {
    let corpus = tiny_corpus(6);
    let mut cfg = short_config(5);
    cfg.model.scales = parse_scales("p,w").unwrap();
    let out = train(&corpus, &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    out.save(dir.path()).unwrap();
    for f in ["model.ckpt", "bpe.model", "phones.txt", "chars.txt", "lexicon.txt", "train_log.jsonl", "report.json"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
    let (model, vocab) = load_model(dir.path()).unwrap();
    assert_eq!(model.config, out.model.config);
    assert_eq!(vocab.bpe, out.vocab.bpe);
    for u in corpus.train() {
        let a = decode(&out.model, &out.vocab.bpe, &u.frames).unwrap();
        let b = decode(&model, &vocab.bpe, &u.frames).unwrap();
        assert_eq!(a.ids, b.ids);
        assert_eq!(a.spans, b.spans);
    }
    let lines = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(lines.lines().count(), 5);
}

#[test]
fn same_seed_same_log() {
    let corpus = tiny_corpus(5);
    let cfg = short_config(3);
    let a = train(&corpus, &cfg).unwrap();
    let b = train(&corpus, &cfg).unwrap();
    assert_eq!(a.log_jsonl(), b.log_jsonl());
    let mut other = cfg.clone();
    other.shuffle_seed = 9;
    assert_ne!(train(&corpus, &other).unwrap().log_jsonl(), a.log_jsonl());
}

