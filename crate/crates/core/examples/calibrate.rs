//! Trains on a generated corpus and prints per-epoch progress.
//!
//! Usage: calibrate [key=value ...]. Corpus keys: cpw_min, cpw_max, final, seed, noise.
//! Everything else goes to the training config.

use std::time::Instant;

use mcif_core::synth::{Corpus, CorpusSpec, Range};
use mcif_core::train::{train_with, TrainConfig};

fn main() {
    let mut spec = CorpusSpec::default();
    let mut cfg = TrainConfig::default();
    let mut diag = 0usize;
    let mut clean_seed = 99u64;
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("key=value");
        match k {
            "cpw_min" => spec.language.chars_per_word.min = v.parse().unwrap(),
            "cpw_max" => spec.language.chars_per_word.max = v.parse().unwrap(),
            "final" => spec.language.word_final_letters = v.parse().unwrap(),
            "diag" => diag = v.parse().unwrap(),
            "clean_seed" => clean_seed = v.parse().unwrap(),
            "seed" => spec.language.seed = v.parse().unwrap(),
            "noise" => spec.language.noise_std = v.parse().unwrap(),
            "fpp_max" => spec.language.frames_per_phoneme = Range::new(spec.language.frames_per_phoneme.min, v.parse().unwrap()),
            _ => cfg.set(k, v).unwrap(),
        }
    }
    let corpus = Corpus::generate(&spec).unwrap();
    let start = Instant::now();
    let out = train_with(&corpus, &cfg, |e, _, _| {
        let ev = e
            .eval
            .as_ref()
            .map(|m| format!(" acc {:.3} exact {} mae {:?}", m.token_accuracy, m.exact, m.length_mae))
            .unwrap_or_default();
        println!(
            "ep {:3} st {} lr {:.2e} tot {:.3} qua {:.2?} ctc {:.2?} ce {:.3} skip {} t {:.1}s{}",
            e.epoch,
            e.stage,
            e.lr,
            e.loss.total,
            e.loss.qua,
            e.loss.ctc,
            e.loss.ce,
            e.skipped,
            start.elapsed().as_secs_f64(),
            ev
        );
    })
    .unwrap();
    println!("{}", serde_json::to_string(&out.report.heldout).unwrap());
    let lang = mcif_core::synth::gen_language(&spec.language).unwrap();
    let clean = mcif_core::synth::gen_corpus(&lang, 50, spec.words_per_utt, 0.0, clean_seed, "clean").unwrap();
    let (mut hits, mut total) = (0, 0);
    let mut ds = std::collections::BTreeMap::new();
    let mut de = std::collections::BTreeMap::new();
    for (k, u) in clean.iter().enumerate() {
        let d = mcif_core::train::decode(&out.model, &out.vocab.bpe, &u.frames).unwrap();
        let (h, t) = mcif_core::train::span_hits(&out.vocab.bpe, u, &d, 2).unwrap();
        hits += h;
        total += t;
        if d.spans.len() == u.gold_spans.len() {
            for (&(s, e), &(gs, ge)) in d.spans.iter().zip(&u.gold_spans) {
                *ds.entry(s as i64 - gs as i64).or_insert(0usize) += 1;
                *de.entry(e as i64 - ge as i64).or_insert(0usize) += 1;
            }
        }
        if k < diag {
            println!("ref {:?}\nhyp {:?}\ngold {:?}\npred {:?}", u.text, d.text, u.gold_spans, d.spans);
            let pass = out.model.forward(&u.frames, None, mcif_core::CifMode::Infer).unwrap();
            for st in &pass.stages {
                let a = pass.tape.value(st.alpha);
                println!("  {} {:?}", st.scale, a.data().iter().map(|v| format!("{:.2}", v)).collect::<Vec<_>>().join(" "));
            }
        }
    }
    println!("start offsets {ds:?}\nend offsets {de:?}");
    println!("span hits {hits}/{total} = {:.3}", hits as f64 / total.max(1) as f64);
}
