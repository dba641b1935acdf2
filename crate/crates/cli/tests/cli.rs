use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn mcif(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcif")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL_SPEC: &str = r#"{
  "language": {"word_inventory": 8, "chars_per_word": {"min": 2, "max": 3}, "word_final_letters": 3, "seed": 4},
  "train_utts": 12,
  "heldout_utts": 4
}"#;

#[test]
fn generate_train_decode_score() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SMALL_SPEC).unwrap();
    fs::write(d.join("train.cfg"), "# short run\nepochs = 3\nstage2_epoch = 1\nstage3_epoch = 2\n").unwrap();
    let corpus = d.join("corpus");

    let o = mcif(&["gen", "--spec", p(&d.join("spec.json")), "--out", p(&corpus)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["corpus.meta", "utts.tsv", "gold_spans.tsv", "lexicon.txt"] {
        assert!(corpus.join(f).is_file(), "{f}");
    }

    let o = mcif(&["gen", "--spec", p(&d.join("spec.json")), "--out", p(&corpus)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("--force"));
    let o = mcif(&["gen", "--spec", p(&d.join("spec.json")), "--out", p(&corpus), "--force"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));

    let model = d.join("model");
    let o = mcif(&[
        "train", "--corpus", p(&corpus), "--config", p(&d.join("train.cfg")), "--out", p(&model), "--scales", "c,w", "--quiet",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(fs::read_to_string(model.join("train_log.jsonl")).unwrap().lines().count(), 3);

    let hyp = d.join("hyp.tsv");
    let ctm = d.join("hyp.ctm");
    let svg = d.join("svg");
    let o = mcif(&[
        "decode", "--model", p(&model), "--corpus", p(&corpus), "--out", p(&hyp), "--ctm", p(&ctm), "--svg", p(&svg),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let hyp_text = fs::read_to_string(&hyp).unwrap();
    assert_eq!(hyp_text.lines().count(), 4);
    let ctm_text = fs::read_to_string(&ctm).unwrap();
    for line in ctm_text.lines() {
        let f: Vec<&str> = line.split(' ').collect();
        assert_eq!(f.len(), 5, "{line}");
        assert_eq!(f[1], "1");
        assert!(f[2].parse::<f64>().unwrap() >= 0.0);
        assert!(f[3].parse::<f64>().unwrap() > 0.0);
    }
    let svgs: Vec<_> = fs::read_dir(&svg).unwrap().collect();
    assert_eq!(svgs.len(), 4);

    // Score the held-out references against the decoded text.
    let utts = fs::read_to_string(corpus.join("utts.tsv")).unwrap();
    let refs: String = utts
        .lines()
        .filter(|l| l.starts_with("heldout"))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            format!("{}\t{}\n", f[0], f[f.len() - 1])
        })
        .collect();
    fs::write(d.join("ref.tsv"), refs).unwrap();
    let json = d.join("report.json");
    let o = mcif(&[
        "eval", "--ref", p(&d.join("ref.tsv")), "--hyp", p(&hyp), "--lexicon", p(&corpus.join("lexicon.txt")), "--json", p(&json),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report["utterances"], 4);
    assert!(String::from_utf8_lossy(&o.stdout).contains("WER"));
}

#[test]
fn eval_reports_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("ref.tsv"), "a\tgo on\nb\tgo\n").unwrap();
    fs::write(d.join("hyp.tsv"), "a\tgo on\nc\tgo\n").unwrap();
    fs::write(d.join("lex.dict"), "GO  G OW1\nON  AA1 N\n").unwrap();
    let o = mcif(&[
        "eval", "--ref", p(&d.join("ref.tsv")), "--hyp", p(&d.join("hyp.tsv")), "--lexicon", p(&d.join("lex.dict")),
    ]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains('b') && err.contains('c'), "{err}");
}

#[test]
fn eval_scores_a_segmentation_error() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("ref.tsv"), "u1\tice cream\n").unwrap();
    fs::write(d.join("hyp.tsv"), "u1\ticecream\n").unwrap();
    fs::write(d.join("lex.dict"), "ICE  AY1 S\nCREAM  K R IY1 M\nICECREAM  AY1 S K R IY2 M\n").unwrap();
    let json = d.join("r.json");
    let o = mcif(&[
        "eval", "--ref", p(&d.join("ref.tsv")), "--hyp", p(&d.join("hyp.tsv")), "--lexicon", p(&d.join("lex.dict")),
        "--json", p(&json),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let r: serde_json::Value = serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(r["se"]["events"], 1);
    assert_eq!(r["wer"], 1.0);
}

#[test]
fn verify_suites_pass_and_unknown_suite_is_a_usage_error() {
    let o = mcif(&["verify", "--suite", "cif", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS"));
    let o = mcif(&["verify", "--suite", "ctc"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(code(&mcif(&["verify", "--suite", "everything"])), 2);
}

#[test]
fn usage_and_io_errors_have_distinct_codes() {
    assert_eq!(code(&mcif(&["train"])), 2);
    assert_eq!(code(&mcif(&["frobnicate"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");
    let o = mcif(&["train", "--corpus", p(&missing), "--out", p(&dir.path().join("m"))]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    fs::write(dir.path().join("bad.cfg"), "epochs = many\n").unwrap();
    let o = mcif(&["train", "--corpus", p(&missing), "--config", p(&dir.path().join("bad.cfg")), "--out", p(&missing)]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = mcif(&["train", "--corpus", p(&missing), "--out", p(&missing), "--scales", "w,c"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = mcif(&["eval", "--ref", p(&missing), "--hyp", p(&missing), "--lexicon", p(&missing), "--theta-pe", "2"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
}

fn dir_snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SMALL_SPEC).unwrap();
    let spec = d.join("spec.json");
    for (name, seed) in [("a", "5"), ("b", "5"), ("c", "6")] {
        let o = mcif(&["gen", "--spec", p(&spec), "--out", p(&d.join(name)), "--seed", seed]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(dir_snapshot(&d.join("a")), dir_snapshot(&d.join("b")));
    let utts = |n: &str| fs::read_to_string(d.join(n).join("utts.tsv")).unwrap();
    assert_ne!(utts("a"), utts("c"));
    let meta = |n: &str| -> serde_json::Value {
        serde_json::from_str(&fs::read_to_string(d.join(n).join("corpus.meta")).unwrap()).unwrap()
    };
    let keys = |v: &serde_json::Value| v.as_object().unwrap().keys().cloned().collect::<Vec<_>>();
    assert_eq!(keys(&meta("a")), keys(&meta("c")));
}

#[test]
fn isolating_mode_makes_single_letter_words() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("spec.json"),
        r#"{"language": {"word_inventory": 6, "chars_per_word": {"min": 1, "max": 1},
            "phonemes_per_char": {"min": 1, "max": 1}}, "train_utts": 5, "heldout_utts": 2}"#,
    )
    .unwrap();
    let o = mcif(&["gen", "--spec", p(&d.join("spec.json")), "--out", p(&d.join("c"))]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let utts = fs::read_to_string(d.join("c").join("utts.tsv")).unwrap();
    for line in utts.lines() {
        let text = line.split('\t').last().unwrap();
        assert!(text.split(' ').all(|w| w.chars().count() == 1), "{line}");
    }
}

#[test]
fn eval_identical_files_and_homophone_threshold() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("lex.dict"), "THERE  DH EH1 R\nTHEIR  DH EH1 R\nCAT  K AE1 T\nBAT  B AE1 T\nGO  G OW1\n").unwrap();
    fs::write(d.join("ref.tsv"), "a\tgo there\nb\tthe cat\n").unwrap();
    fs::write(d.join("hyp.tsv"), "a\tgo their\nb\tthe bat\n").unwrap();
    let run = |hyp: &str, extra: &[&str]| -> serde_json::Value {
        let (json, reference, lexicon) = (d.join("out.json"), d.join("ref.tsv"), d.join("lex.dict"));
        let mut args = vec!["eval", "--ref", p(&reference), "--hyp", hyp, "--lexicon", p(&lexicon), "--json", p(&json)];
        args.extend_from_slice(extra);
        let o = mcif(&args);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        serde_json::from_str(&fs::read_to_string(&json).unwrap()).unwrap()
    };
    let same = run(p(&d.join("ref.tsv")), &[]);
    assert_eq!(same["format"], "mcif-eval v1");
    assert_eq!(same["wer"], 0.0);
    assert_eq!(same["pe"]["events"], 0);
    assert_eq!(same["se"]["events"], 0);
    let loose = run(p(&d.join("hyp.tsv")), &[]);
    assert_eq!(loose["pe"]["events"], 2);
    let strict = run(p(&d.join("hyp.tsv")), &["--theta-pe", "0"]);
    assert_eq!(strict["pe"]["events"], 1);
}

#[test]
fn verify_output_is_deterministic() {
    let a = mcif(&["verify", "--suite", "cif", "--seed", "11"]);
    let b = mcif(&["verify", "--suite", "cif", "--seed", "11"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn train_writes_checkpoints_at_eval_intervals() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SMALL_SPEC).unwrap();
    let o = mcif(&["gen", "--spec", p(&d.join("spec.json")), "--out", p(&d.join("c"))]);
    assert_eq!(code(&o), 0);
    fs::write(d.join("t.cfg"), "epochs = 2\neval_interval = 1\n").unwrap();
    let o = mcif(&[
        "train", "--corpus", p(&d.join("c")), "--config", p(&d.join("t.cfg")), "--out", p(&d.join("m")), "--quiet",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("m/report.json")).unwrap()).unwrap();
    assert_eq!(report["format"], "mcif-train-report v1");
    let log = fs::read_to_string(d.join("m/train_log.jsonl")).unwrap();
    assert!(log.lines().all(|l| l.contains("\"eval\":{")));
}
