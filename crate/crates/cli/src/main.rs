use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};

use mcif_core::metrics::{evaluate, pair_transcripts, parse_transcripts, EvalConfig, MetricsError, PeDenominator};
use mcif_core::model::parse_scales;
use mcif_core::synth::{Corpus, CorpusSpec, SynthError, Utterance};
use mcif_core::text::{parse_cmudict, CmuOptions, TextError};
use mcif_core::train::{decode, load_model, save_model, train_with, Decoded, TrainConfig, TrainError};
use mcif_core::verify::{run_suite, Suite};

#[derive(Parser)]
#[command(name = "mcif", version, about = "Multi-scale CIF toolkit: synthetic data, training, decoding, scoring")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Heldout,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Denominator {
    Phonemes,
    Words,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus.
    Gen {
        /// JSON corpus spec; defaults are used for missing fields or when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the language seed of the spec.
        #[arg(long)]
        seed: Option<u64>,
        /// Write into a non-empty directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model on a corpus directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        /// `key = value` config file.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Active scales, e.g. c,p,w or p,w; must end with w.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        quiet: bool,
    },
    /// Decode a corpus split with a trained model.
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Hypothesis transcripts, `id<TAB>text`.
        #[arg(long)]
        out: PathBuf,
        /// Token timings in CTM format.
        #[arg(long)]
        ctm: Option<PathBuf>,
        /// Directory for one SVG timeline per utterance.
        #[arg(long)]
        svg: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "heldout")]
        split: Split,
    },
    /// Score hypotheses: WER, phonetic-confusion and segmentation error rates.
    Eval {
        #[arg(long = "ref")]
        reference: PathBuf,
        #[arg(long)]
        hyp: PathBuf,
        /// CMU-format pronunciation dictionary.
        #[arg(long)]
        lexicon: PathBuf,
        #[arg(long, default_value_t = 0.6)]
        theta_pe: f64,
        #[arg(long, default_value_t = 0.5)]
        theta_se: f64,
        #[arg(long, value_enum, default_value = "phonemes")]
        pe_denominator: Denominator,
        /// Also write the full report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Run a verification suite.
    Verify {
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

/// Error tagged with the process exit code it maps to.
struct Failure {
    code: u8,
    err: anyhow::Error,
}

const EXIT_VERIFY: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_IO: u8 = 3;

fn usage(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_USAGE,
        err: err.into(),
    }
}

fn io(err: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: EXIT_IO,
        err: err.into(),
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Config(_) => usage(e),
            _ => io(e),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Io { .. } | TrainError::Format { .. } => io(e),
            TrainError::Model(mcif_core::model::ModelError::Checkpoint(_)) => io(e),
            _ => usage(e),
        }
    }
}

fn read_text(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path)
        .with_context(|| format!("cannot read {}", path.display()))
        .map_err(io)
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<(), Failure> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)
            .with_context(|| format!("cannot create {}", parent.display()))
            .map_err(io)?;
    }
    fs::write(path, body)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(io)
}

fn cmd_gen(spec: Option<PathBuf>, out: PathBuf, seed: Option<u64>, force: bool) -> Result<(), Failure> {
    let mut spec: CorpusSpec = match spec {
        Some(p) => serde_json::from_str(&read_text(&p)?)
            .with_context(|| format!("{} is not a valid corpus spec", p.display()))
            .map_err(usage)?,
        None => CorpusSpec::default(),
    };
    if let Some(s) = seed {
        spec.language.seed = s;
    }
    let non_empty = out.is_dir()
        && fs::read_dir(&out)
            .map_err(|e| io(anyhow!(e).context(format!("cannot list {}", out.display()))))?
            .next()
            .is_some();
    if non_empty && !force {
        return Err(usage(anyhow!(
            "{} exists and is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let corpus = Corpus::generate(&spec)?;
    corpus.write(&out)?;
    println!(
        "wrote {} utterances ({} train, {} held-out) to {}",
        corpus.utterances.len(),
        corpus.train().len(),
        corpus.heldout().len(),
        out.display()
    );
    Ok(())
}

fn cmd_train(corpus: PathBuf, config: Option<PathBuf>, out: PathBuf, scales: Option<String>, quiet: bool) -> Result<(), Failure> {
    let mut cfg = match &config {
        Some(p) => TrainConfig::parse(&read_text(p)?).map_err(|e| usage(anyhow!(e).context(format!("in {}", p.display()))))?,
        None => TrainConfig::default(),
    };
    if let Some(s) = scales {
        cfg.model.scales = parse_scales(&s).map_err(usage)?;
    }
    let corpus = Corpus::read(&corpus)?;
    let mut checkpoint_err = None;
    let outcome = train_with(&corpus, &cfg, |e, model, vocab| {
        if e.eval.is_some() && checkpoint_err.is_none() {
            checkpoint_err = save_model(&out, model, vocab, &cfg).err();
        }
        if quiet {
            return;
        }
        let mut line = format!(
            "epoch {:3}  stage {}  lr {:.3e}  loss {:.4}  skipped {}",
            e.epoch, e.stage, e.lr, e.loss.total, e.skipped
        );
        if let Some(m) = &e.eval {
            write!(line, "  heldout acc {:.3}", m.token_accuracy).unwrap();
        }
        eprintln!("{line}");
    })?;
    if let Some(e) = checkpoint_err {
        return Err(e.into());
    }
    outcome.save(&out)?;
    let r = &outcome.report;
    println!(
        "scales {}  epochs {}  held-out token accuracy {:.4}  exact {}/{}{}",
        r.scales,
        r.epochs_run,
        r.heldout.token_accuracy,
        r.heldout.exact,
        r.heldout.utterances,
        if r.diverged { "  (diverged; kept last good parameters)" } else { "" }
    );
    Ok(())
}

fn svg_timeline(u: &Utterance, d: &Decoded, labels: &[String]) -> String {
    let px = 8.0;
    let row_h = 18.0;
    let rows = d.spans.len().max(u.gold_spans.len());
    let width = (u.num_frames() as f64 * px + 140.0).max(200.0);
    let height = rows as f64 * row_h + 40.0;
    let mut s = String::new();
    writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" data-format=\"mcif-timeline v1\">"
    )
    .unwrap();
    writeln!(s, "<text x=\"4\" y=\"14\" font-size=\"12\">{} (gold: grey, predicted: blue)</text>", xml_escape(&u.id)).unwrap();
    for i in 0..rows {
        let y = 24.0 + i as f64 * row_h;
        writeln!(s, "<g class=\"row\" data-index=\"{i}\">").unwrap();
        let label = labels.get(i).map(String::as_str).unwrap_or("");
        writeln!(s, "<text x=\"4\" y=\"{}\" font-size=\"11\">{}</text>", y + 12.0, xml_escape(label)).unwrap();
        if let Some(&(a, b)) = u.gold_spans.get(i) {
            writeln!(
                s,
                "<rect class=\"gold\" x=\"{}\" y=\"{y}\" width=\"{}\" height=\"7\" fill=\"#999\"/>",
                120.0 + a as f64 * px,
                (b - a) as f64 * px
            )
            .unwrap();
        }
        if let Some(&(a, b)) = d.spans.get(i) {
            writeln!(
                s,
                "<rect class=\"pred\" x=\"{}\" y=\"{}\" width=\"{}\" height=\"7\" fill=\"#36c\"/>",
                120.0 + a as f64 * px,
                y + 8.0,
                (b.saturating_sub(a)) as f64 * px
            )
            .unwrap();
        }
        writeln!(s, "</g>").unwrap();
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn cmd_decode(model: PathBuf, corpus: PathBuf, out: PathBuf, ctm: Option<PathBuf>, svg: Option<PathBuf>, split: Split) -> Result<(), Failure> {
    if !model.join("model.ckpt").is_file() {
        return Err(io(anyhow!("no checkpoint at {}", model.join("model.ckpt").display())));
    }
    let (model, vocab) = load_model(&model)?;
    let corpus = Corpus::read(&corpus)?;
    let utts = match split {
        Split::Train => corpus.train(),
        Split::Heldout => corpus.heldout(),
        Split::All => &corpus.utterances[..],
    };
    let frame_sec = corpus.frame_ms() / 1000.0;
    let mut hyp = String::new();
    let mut ctm_text = String::new();
    if let Some(dir) = &svg {
        fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(io)?;
    }
    for u in utts {
        let d = decode(&model, &vocab.bpe, &u.frames)?;
        writeln!(hyp, "{}\t{}", u.id, d.text).unwrap();
        let labels: Vec<String> = d
            .ids
            .iter()
            .map(|&id| vocab.bpe.token_label(id).unwrap_or_else(|| format!("<{id}>")))
            .collect();
        for (label, &(a, b)) in labels.iter().zip(&d.spans) {
            writeln!(
                ctm_text,
                "{} 1 {:.3} {:.3} {}",
                u.id,
                a as f64 * frame_sec,
                b.saturating_sub(a) as f64 * frame_sec,
                label
            )
            .unwrap();
        }
        if let Some(dir) = &svg {
            write_file(&dir.join(format!("{}.svg", u.id)), svg_timeline(u, &d, &labels))?;
        }
    }
    write_file(&out, hyp)?;
    if let Some(p) = ctm {
        write_file(&p, ctm_text)?;
    }
    println!("decoded {} utterances", utts.len());
    Ok(())
}

fn cmd_eval(
    reference: PathBuf,
    hyp: PathBuf,
    lexicon: PathBuf,
    theta_pe: f64,
    theta_se: f64,
    denom: Denominator,
    json: Option<PathBuf>,
) -> Result<(), Failure> {
    for (name, t) in [("--theta-pe", theta_pe), ("--theta-se", theta_se)] {
        if !(0.0..=1.0).contains(&t) {
            return Err(usage(anyhow!("{name} must be in [0, 1], got {t}")));
        }
    }
    let parse = |p: &Path| -> Result<Vec<(String, String)>, Failure> {
        parse_transcripts(&read_text(p)?).map_err(|e| io(anyhow!(e).context(format!("in {}", p.display()))))
    };
    let refs = parse(&reference)?;
    let hyps = parse(&hyp)?;
    let pairs = pair_transcripts(&refs, &hyps).map_err(usage)?;
    let file = fs::File::open(&lexicon)
        .with_context(|| format!("cannot read {}", lexicon.display()))
        .map_err(io)?;
    let lex = parse_cmudict(std::io::BufReader::new(file), CmuOptions::default())
        .map_err(|e: TextError| io(anyhow!(e).context(format!("in {}", lexicon.display()))))?;
    let cfg = EvalConfig {
        theta_pe,
        theta_se,
        pe_denominator: match denom {
            Denominator::Phonemes => PeDenominator::RefPhonemes,
            Denominator::Words => PeDenominator::RefWords,
        },
    };
    let report = evaluate(&pairs, &lex, &cfg).map_err(|e: MetricsError| usage(e))?;
    print!("{}", report.to_table());
    if let Some(p) = json {
        write_json(&p, "mcif-eval v1", serde_json::to_value(&report))?;
    }
    Ok(())
}

/// Writes `value` as pretty JSON with a leading `format` field.
fn write_json(path: &Path, format: &str, value: serde_json::Result<serde_json::Value>) -> Result<(), Failure> {
    let mut v = value.map_err(|e| io(anyhow!(e)))?;
    let body = match v.as_object_mut() {
        Some(obj) => {
            let mut out = serde_json::Map::new();
            out.insert("format".into(), format.into());
            out.append(obj);
            serde_json::Value::Object(out)
        }
        None => v,
    };
    let text = serde_json::to_string_pretty(&body).map_err(|e| io(anyhow!(e)))?;
    write_file(path, text + "\n")
}

fn cmd_verify(suite: String, seed: u64, json: Option<PathBuf>) -> Result<(), Failure> {
    let suite: Suite = suite.parse().map_err(usage)?;
    let report = run_suite(suite, seed).map_err(|e| Failure {
        code: EXIT_VERIFY,
        err: e.into(),
    })?;
    print!("{}", report.to_text());
    if let Some(p) = json {
        write_json(&p, "mcif-verify v1", serde_json::to_value(&report))?;
    }
    if !report.passed() {
        return Err(Failure {
            code: EXIT_VERIFY,
            err: anyhow!("suite {suite} failed"),
        });
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.cmd {
        Cmd::Gen { spec, out, seed, force } => cmd_gen(spec, out, seed, force),
        Cmd::Train {
            corpus,
            config,
            out,
            scales,
            quiet,
        } => cmd_train(corpus, config, out, scales, quiet),
        Cmd::Decode {
            model,
            corpus,
            out,
            ctm,
            svg,
            split,
        } => cmd_decode(model, corpus, out, ctm, svg, split),
        Cmd::Eval {
            reference,
            hyp,
            lexicon,
            theta_pe,
            theta_se,
            pe_denominator,
            json,
        } => cmd_eval(reference, hyp, lexicon, theta_pe, theta_se, pe_denominator, json),
        Cmd::Verify { suite, seed, json } => cmd_verify(suite, seed, json),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure { code, err }) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
