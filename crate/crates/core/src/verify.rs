//! Oracle and gradient suites behind `mcif verify` and the acceptance tests.

use std::fmt;
use std::fmt::Write as _;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::cif::{cif_forward, scale_to_length, CifConfig, CifMode, EventKind, FireTrace};
use crate::ctc::ctc_loss_from_logits;
use crate::model::{token_cross_entropy, McifModel, ModelConfig, ModelError, StageWeights};
use crate::nn::{finite_diff_check, NnError, NodeId, ParamSet, Tape, Tensor2};
use crate::oracle::{brute_force_ctc, simulate_cif};
use crate::text::{Scale, ScaleTargets};

/// Weights this close to a firing boundary are resampled before a gradient check.
pub const BOUNDARY_MARGIN: f64 = 1e-3;
pub const CIF_TOL: f64 = 1e-12;
pub const CTC_LOSS_TOL: f64 = 1e-9;
pub const CTC_GRAD_TOL: f64 = 1e-6;
pub const OP_GRAD_TOL: f64 = 1e-4;
pub const E2E_GRAD_TOL: f64 = 1e-3;
const FD_EPS: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("unknown suite {0:?} (expected grad, ctc or cif)")]
    UnknownSuite(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Grad,
    Ctc,
    Cif,
}

impl FromStr for Suite {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "grad" => Ok(Suite::Grad),
            "ctc" => Ok(Suite::Ctc),
            "cif" => Ok(Suite::Cif),
            other => Err(VerifyError::UnknownSuite(other.to_string())),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Suite::Grad => "grad",
            Suite::Ctc => "ctc",
            Suite::Cif => "cif",
        })
    }
}

/// One named check: `worst` is compared against `tolerance` (or, for counting checks,
/// `failures` must be zero).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub cases: usize,
    pub failures: usize,
    pub worst: f64,
    pub tolerance: f64,
    /// Finite-difference coordinates left out because a perturbation crossed a boundary.
    pub skipped: usize,
}

impl Check {
    fn new(name: &str, tolerance: f64) -> Self {
        Self {
            name: name.to_string(),
            cases: 0,
            failures: 0,
            worst: 0.0,
            tolerance,
            skipped: 0,
        }
    }

    fn record(&mut self, err: f64) {
        self.cases += 1;
        if err.is_nan() || err > self.tolerance {
            self.failures += 1;
        }
        if err.is_nan() || err > self.worst {
            self.worst = err;
        }
    }

    fn fail(&mut self) {
        self.cases += 1;
        self.failures += 1;
    }

    fn pass(&mut self) {
        self.cases += 1;
    }

    pub fn passed(&self) -> bool {
        self.failures == 0 && self.cases > 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(Check::passed)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            writeln!(
                out,
                "{:4} {:<28} cases {:>6}  failures {:>4}  max err {:.3e}  tol {:.0e}{}",
                if c.passed() { "ok" } else { "FAIL" },
                c.name,
                c.cases,
                c.failures,
                c.worst,
                c.tolerance,
                if c.skipped > 0 {
                    format!("  skipped {}", c.skipped)
                } else {
                    String::new()
                }
            )
            .unwrap();
        }
        writeln!(
            out,
            "suite {} (seed {}): {}",
            self.suite,
            self.seed,
            if self.passed() { "PASS" } else { "FAIL" }
        )
        .unwrap();
        out
    }
}

pub fn run_suite(suite: Suite, seed: u64) -> Result<SuiteReport, VerifyError> {
    match suite {
        Suite::Cif => Ok(cif_suite(seed, 1000)),
        Suite::Ctc => Ok(ctc_suite(seed, 20)),
        Suite::Grad => grad_suite(seed, 100),
    }
}

fn rand_tensor(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Tensor2 {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor2::from_vec(rows, cols, data).expect("sizes agree")
}

fn rows_of(t: &Tensor2) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

/// Largest difference between the trace and the simulator, or `None` when they
/// disagree structurally (event count, frames, tail flags).
fn compare_with_simulator(frames: &Tensor2, alpha: &[f64], cfg: &CifConfig, mode: CifMode) -> Option<f64> {
    let (fired, trace) = cif_forward(frames, alpha, cfg, mode).ok()?;
    let sim = simulate_cif(&rows_of(frames), alpha, cfg.beta, cfg.beta_tail, mode == CifMode::Train);
    if sim.events.len() != trace.events.len() || fired.rows() != trace.events.len() {
        return None;
    }
    let mut worst = (sim.residual - trace.residual).abs();
    for (n, (ev, se)) in trace.events.iter().zip(&sim.events).enumerate() {
        let frames_of: Vec<usize> = ev.splits.iter().map(|&(t, _)| t).collect();
        if frames_of != se.frames || ev.is_tail() != se.tail {
            return None;
        }
        for (&(_, w), &sw) in ev.splits.iter().zip(&se.weights) {
            worst = worst.max((w - sw).abs());
        }
        for (a, b) in fired.row(n).iter().zip(&se.embedding) {
            worst = worst.max((a - b).abs());
        }
    }
    Some(worst)
}

/// Random weights, with a share of exact zeros and ones so that ties get exercised.
fn random_alpha(rng: &mut impl Rng, t: usize) -> Vec<f64> {
    (0..t)
        .map(|_| match rng.gen_range(0..10) {
            0 => 0.0,
            1 => 1.0,
            _ => rng.gen_range(0.0..1.0),
        })
        .collect()
}

/// Simulator equivalence, the fire-count law after scaling, and the worked example.
pub fn cif_suite(seed: u64, cases: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut eq = Check::new("simulator equivalence", CIF_TOL);
    for k in 0..cases {
        let t = rng.gen_range(1..=50);
        let d = rng.gen_range(1..=8);
        let frames = rand_tensor(&mut rng, t, d, 1.0);
        let alpha = random_alpha(&mut rng, t);
        let cfg = CifConfig {
            beta: if k % 4 == 3 { rng.gen_range(0.5..2.0) } else { 1.0 },
            beta_tail: 0.45,
        };
        let mode = if k % 2 == 0 { CifMode::Train } else { CifMode::Infer };
        match compare_with_simulator(&frames, &alpha, &cfg, mode) {
            Some(err) => eq.record(err),
            None => eq.fail(),
        }
    }

    let mut law = Check::new("fire count after scaling", 0.0);
    for _ in 0..cases {
        let t = rng.gen_range(1..=60);
        let u = rng.gen_range(1..=t);
        let mut alpha: Vec<f64> = (0..t).map(|_| rng.gen_range(0.0..1.0)).collect();
        alpha[rng.gen_range(0..t)] += 0.01;
        let scaled = match scale_to_length(&alpha, u) {
            Ok(s) => s,
            Err(_) => {
                law.fail();
                continue;
            }
        };
        let frames = rand_tensor(&mut rng, t, 2, 1.0);
        match cif_forward(&frames, &scaled, &CifConfig::default(), CifMode::Train) {
            Ok((fired, _)) if fired.rows() == u => law.pass(),
            _ => law.fail(),
        }
    }

    let mut golden = Check::new("worked example", 0.0);
    if figure_example_holds() {
        golden.pass();
    } else {
        golden.fail();
    }
    SuiteReport {
        suite: Suite::Cif,
        seed,
        checks: vec![eq, law, golden],
    }
}

/// α = (0.3, 0.5, 0.3) over basis frames fires once with splits (0.3, 0.5, 0.2) and
/// leaves 0.1; α = (0.6, 0.2) fires a tail in inference mode.
pub fn figure_example_holds() -> bool {
    let cfg = CifConfig::default();
    let Ok((fired, trace)) = cif_forward(&Tensor2::identity(3), &[0.3, 0.5, 0.3], &cfg, CifMode::Infer) else {
        return false;
    };
    let ok_first = trace.events.len() == 1
        && trace.events[0].splits.len() == 3
        && trace.events[0]
            .splits
            .iter()
            .zip([(0, 0.3), (1, 0.5), (2, 0.2)])
            .all(|(&(t, w), (et, ew))| t == et && (w - ew).abs() <= 1e-15)
        && (trace.residual - 0.1).abs() <= 1e-15
        && fired.row(0).iter().zip([0.3, 0.5, 0.2]).all(|(a, b)| (a - b).abs() <= 1e-15);
    let Ok((_, tail)) = cif_forward(&Tensor2::identity(2), &[0.6, 0.2], &cfg, CifMode::Infer) else {
        return false;
    };
    let ok_tail = tail.events.len() == 1 && tail.events[0].kind == EventKind::Tail;
    ok_first && ok_tail
}

fn softmax_rows(logits: &Tensor2) -> Vec<Vec<f64>> {
    (0..logits.rows())
        .map(|r| {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
            let z: f64 = e.iter().sum();
            e.into_iter().map(|v| v / z).collect()
        })
        .collect()
}

fn all_label_seqs(vocab: usize, max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![vec![]];
    let mut frontier = vec![vec![]];
    for _ in 0..max_len {
        let mut next = Vec::new();
        for s in &frontier {
            for v in 1..=vocab {
                let mut n: Vec<usize> = s.clone();
                n.push(v);
                next.push(n);
            }
        }
        out.extend(next.iter().cloned());
        frontier = next;
    }
    out
}

/// Every (T <= 6, L <= 3, V <= 3) instance against path enumeration, plus central
/// differences of the logit gradient.
pub fn ctc_suite(seed: u64, dists_per_shape: usize) -> SuiteReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut loss_check = Check::new("loss vs path enumeration", CTC_LOSS_TOL);
    let mut grad_check = Check::new("logit gradient", CTC_GRAD_TOL);
    let mut infeasible = 0;
    for v in 1..=3 {
        let labels_all = all_label_seqs(v, 3);
        for t in 1..=6 {
            for _ in 0..dists_per_shape {
                let logits = rand_tensor(&mut rng, t, v + 1, 2.0);
                let probs = softmax_rows(&logits);
                for labels in &labels_all {
                    let want = brute_force_ctc(&probs, labels);
                    let Ok((loss, grad)) = ctc_loss_from_logits(&logits, labels) else {
                        loss_check.fail();
                        continue;
                    };
                    if want.is_infinite() || loss.is_infinite() {
                        infeasible += 1;
                        if want == loss {
                            loss_check.pass();
                        } else {
                            loss_check.fail();
                        }
                        continue;
                    }
                    loss_check.record((loss - want).abs());
                    let mut worst = 0.0f64;
                    let mut x = logits.clone();
                    for i in 0..x.data().len() {
                        let orig = x.data()[i];
                        x.data_mut()[i] = orig + FD_EPS;
                        let plus = ctc_loss_from_logits(&x, labels).map(|r| r.0).unwrap_or(f64::NAN);
                        x.data_mut()[i] = orig - FD_EPS;
                        let minus = ctc_loss_from_logits(&x, labels).map(|r| r.0).unwrap_or(f64::NAN);
                        x.data_mut()[i] = orig;
                        let numeric = (plus - minus) / (2.0 * FD_EPS);
                        worst = worst.max((numeric - grad.data()[i]).abs());
                    }
                    grad_check.record(worst);
                }
            }
        }
    }
    let _ = infeasible;
    SuiteReport {
        suite: Suite::Ctc,
        seed,
        checks: vec![loss_check, grad_check],
    }
}

/// Which frames every event of every CIF node used, and whether its last frame was cut.
type Signature = Vec<Vec<(Vec<usize>, bool, bool)>>;

fn signature(traces: &[&FireTrace]) -> Signature {
    traces
        .iter()
        .map(|tr| {
            tr.events
                .iter()
                .map(|e| (e.splits.iter().map(|&(t, _)| t).collect(), e.cut, e.is_tail()))
                .collect()
        })
        .collect()
}

/// A tape graph under test: builds its output from input nodes and lists its CIF nodes.
type Graph<'a> = dyn Fn(&mut Tape, &[NodeId]) -> Result<(NodeId, Vec<NodeId>), NnError> + 'a;

struct Built {
    tape: Tape,
    out: NodeId,
    inputs: Vec<NodeId>,
    sig: Signature,
}

fn build_graph(graph: &Graph, inputs: &[Tensor2]) -> Result<Built, NnError> {
    let mut tape = Tape::new();
    let ids = inputs
        .iter()
        .map(|t| tape.input(t.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let (out, cifs) = graph(&mut tape, &ids)?;
    let sig = signature(&cifs.iter().filter_map(|&c| tape.trace(c)).collect::<Vec<_>>());
    Ok(Built {
        tape,
        out,
        inputs: ids,
        sig,
    })
}

fn project(b: &Built, proj: &Tensor2) -> f64 {
    b.tape.value(b.out).data().iter().zip(proj.data()).map(|(a, p)| a * p).sum()
}

/// Central differences of `<proj, graph(inputs)>` over every input coordinate, with a
/// random projection `proj`. Perturbations that change any firing pattern are skipped.
fn check_graph(check: &mut Check, graph: &Graph, inputs: &[Tensor2], rng: &mut impl Rng) -> Result<(), NnError> {
    let base = build_graph(graph, inputs)?;
    let (r, c) = base.tape.value(base.out).shape();
    let proj = rand_tensor(rng, r, c, 1.0);
    let grads = base.tape.backward(&[(base.out, proj.clone())])?;
    let lens: Vec<usize> = inputs.iter().map(|t| t.data().len()).collect();
    let point: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let analytic: Vec<f64> = base
        .inputs
        .iter()
        .zip(inputs)
        .flat_map(|(id, t)| {
            grads
                .get(*id)
                .map(|g| g.data().to_vec())
                .unwrap_or_else(|| vec![0.0; t.data().len()])
        })
        .collect();
    let rebuild = |x: &[f64]| -> Vec<Tensor2> {
        let mut off = 0;
        inputs
            .iter()
            .zip(&lens)
            .map(|(t, &n)| {
                let v = Tensor2::from_vec(t.rows(), t.cols(), x[off..off + n].to_vec()).expect("same shape");
                off += n;
                v
            })
            .collect()
    };
    let report = finite_diff_check(
        |x| {
            let b = build_graph(graph, &rebuild(x)).ok()?;
            (b.sig == base.sig).then(|| project(&b, &proj))
        },
        &point,
        &analytic,
        FD_EPS,
    )?;
    check.record(report.max_rel_error);
    check.skipped += report.skipped;
    Ok(())
}

/// Cumulative weight stays at least `margin` away from every multiple of `beta`, and the
/// leftover from `beta_tail`.
fn clear_of_boundaries(alpha: &[f64], beta: f64, beta_tail: f64, margin: f64) -> bool {
    let mut c = 0.0;
    for &a in alpha {
        c += a;
        let k = (c / beta).round();
        if k >= 1.0 && (c - k * beta).abs() < margin {
            return false;
        }
    }
    let residual = c - (c / beta).floor() * beta;
    (residual - beta_tail).abs() >= margin && residual >= margin
}

fn away_from_zero(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor2 {
    let data = (0..rows * cols)
        .map(|_| {
            let v: f64 = rng.gen_range(0.01..1.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor2::from_vec(rows, cols, data).expect("sizes agree")
}

/// Central-difference checks of every tape op, the length loss through a predictor,
/// CIF away from firing boundaries, and the full model objective.
pub fn grad_suite(seed: u64, points: usize) -> Result<SuiteReport, VerifyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();

    let mut c = Check::new("linear", OP_GRAD_TOL);
    for _ in 0..points {
        let (t, i, o) = (rng.gen_range(1..6), rng.gen_range(1..6), rng.gen_range(1..6));
        let inputs = [rand_tensor(&mut rng, t, i, 1.0), rand_tensor(&mut rng, i, o, 1.0), rand_tensor(&mut rng, 1, o, 1.0)];
        check_graph(&mut c, &|tp: &mut Tape, ids: &[NodeId]| Ok((tp.linear(ids[0], ids[1], Some(ids[2]))?, vec![])), &inputs, &mut rng)?;
    }
    checks.push(c);

    let mut c = Check::new("relu", OP_GRAD_TOL);
    for _ in 0..points {
        let (r, c2) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let inputs = [away_from_zero(&mut rng, r, c2)];
        check_graph(&mut c, &|tp: &mut Tape, ids: &[NodeId]| Ok((tp.relu(ids[0])?, vec![])), &inputs, &mut rng)?;
    }
    checks.push(c);

    let mut c = Check::new("sigmoid", OP_GRAD_TOL);
    for _ in 0..points {
        let (r, c2) = (rng.gen_range(1..6), rng.gen_range(1..6));
        let inputs = [rand_tensor(&mut rng, r, c2, 3.0)];
        check_graph(&mut c, &|tp: &mut Tape, ids: &[NodeId]| Ok((tp.sigmoid(ids[0])?, vec![])), &inputs, &mut rng)?;
    }
    checks.push(c);

    let mut c = Check::new("conv1d", OP_GRAD_TOL);
    for _ in 0..points {
        let width = [1, 3, 5][rng.gen_range(0..3)];
        let (t, d, o) = (rng.gen_range(1..8), rng.gen_range(1..4), rng.gen_range(1..4));
        let inputs = [rand_tensor(&mut rng, t, d, 1.0), rand_tensor(&mut rng, width * d, o, 1.0)];
        check_graph(&mut c, &|tp: &mut Tape, ids: &[NodeId]| Ok((tp.conv1d(ids[0], ids[1])?, vec![])), &inputs, &mut rng)?;
    }
    checks.push(c);

    let mut c = Check::new("scale_to_length", OP_GRAD_TOL);
    for _ in 0..points {
        let t = rng.gen_range(1..10);
        let target = rng.gen_range(1..=t);
        let data = (0..t).map(|_| rng.gen_range(0.05..1.0)).collect();
        let inputs = [Tensor2::from_vec(t, 1, data)?];
        check_graph(&mut c, &move |tp: &mut Tape, ids: &[NodeId]| Ok((tp.scale_to_length(ids[0], target)?, vec![])), &inputs, &mut rng)?;
    }
    checks.push(c);

    let mut c = Check::new("token cross-entropy", OP_GRAD_TOL);
    for _ in 0..points {
        let (n, v) = (rng.gen_range(1..5), rng.gen_range(2..6));
        let logits = rand_tensor(&mut rng, n, v, 2.0);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=v)).collect();
        let (_, grad) = token_cross_entropy(&logits, &labels)?;
        let rebuild = |x: &[f64]| Tensor2::from_vec(n, v, x.to_vec()).expect("same shape");
        let r = finite_diff_check(
            |x| token_cross_entropy(&rebuild(x), &labels).ok().map(|r| r.0),
            logits.data(),
            grad.data(),
            FD_EPS,
        )?;
        c.record(r.max_rel_error);
    }
    checks.push(c);

    let mut c = Check::new("cif", OP_GRAD_TOL);
    let mut k = 0;
    while c.cases < points {
        k += 1;
        let t = rng.gen_range(1..10);
        let d = rng.gen_range(1..4);
        let alpha: Vec<f64> = (0..t).map(|_| rng.gen_range(0.05..0.95)).collect();
        let cfg = CifConfig::default();
        if !clear_of_boundaries(&alpha, cfg.beta, cfg.beta_tail, BOUNDARY_MARGIN) {
            continue;
        }
        let mode = if k % 2 == 0 { CifMode::Train } else { CifMode::Infer };
        let inputs = [rand_tensor(&mut rng, t, d, 1.0), Tensor2::column(&alpha)];
        let (_, tr) = cif_forward(&inputs[0], &alpha, &cfg, mode).map_err(NnError::from)?;
        if tr.events.is_empty() {
            continue;
        }
        check_graph(
            &mut c,
            &move |tp: &mut Tape, ids: &[NodeId]| {
                let f = tp.cif(ids[0], ids[1], &cfg, mode)?;
                Ok((f, vec![f]))
            },
            &inputs,
            &mut rng,
        )?;
    }
    checks.push(c);

    checks.push(quantity_check(&mut rng, points)?);
    checks.push(end_to_end_check(&mut rng, points)?);

    Ok(SuiteReport {
        suite: Suite::Grad,
        seed,
        checks,
    })
}

/// `|sum(sigmoid(linear(conv(x)))) - U|` against central differences, away from the kink.
fn quantity_check(rng: &mut impl Rng, points: usize) -> Result<Check, VerifyError> {
    let mut c = Check::new("length loss via predictor", OP_GRAD_TOL);
    while c.cases < points {
        let (t, h) = (rng.gen_range(2..10), rng.gen_range(1..4));
        let inputs = [
            rand_tensor(rng, t, h, 1.0),
            rand_tensor(rng, 3 * h, h, 1.0),
            rand_tensor(rng, h, 1, 1.0),
            rand_tensor(rng, 1, 1, 1.0),
        ];
        let target = rng.gen_range(1..=t) as f64;
        let alpha_of = |inp: &[Tensor2]| -> Result<(Tape, NodeId, Vec<NodeId>), NnError> {
            let mut tp = Tape::new();
            let ids = inp.iter().map(|x| tp.input(x.clone())).collect::<Result<Vec<_>, _>>()?;
            let conv = tp.conv1d(ids[0], ids[1])?;
            let z = tp.linear(conv, ids[2], Some(ids[3]))?;
            let a = tp.sigmoid(z)?;
            Ok((tp, a, ids))
        };
        let (tp, a, ids) = alpha_of(&inputs)?;
        let diff = tp.value(a).sum() - target;
        if diff.abs() < BOUNDARY_MARGIN {
            continue;
        }
        let grads = tp.backward(&[(a, Tensor2::column(&vec![diff.signum(); t]))])?;
        let lens: Vec<usize> = inputs.iter().map(|x| x.data().len()).collect();
        let point: Vec<f64> = inputs.iter().flat_map(|x| x.data().to_vec()).collect();
        let analytic: Vec<f64> = ids.iter().flat_map(|id| grads.get(*id).unwrap().data().to_vec()).collect();
        let r = finite_diff_check(
            |x| {
                let mut off = 0;
                let inp: Vec<Tensor2> = inputs
                    .iter()
                    .zip(&lens)
                    .map(|(s, &n)| {
                        let v = Tensor2::from_vec(s.rows(), s.cols(), x[off..off + n].to_vec()).unwrap();
                        off += n;
                        v
                    })
                    .collect();
                let (tp, a, _) = alpha_of(&inp).ok()?;
                Some((tp.value(a).sum() - target).abs())
            },
            &point,
            &analytic,
            FD_EPS,
        )?;
        c.record(r.max_rel_error);
    }
    Ok(c)
}

fn e2e_objective(model: &McifModel, frames: &Tensor2, targets: &ScaleTargets, w: &StageWeights) -> Option<(f64, Signature, [f64; 3])> {
    let pass = model.forward(frames, Some(targets), CifMode::Train).ok()?;
    let (bundle, _) = model.losses(&pass, targets, w).ok()?;
    let traces: Vec<&FireTrace> = pass.stages.iter().filter_map(|s| pass.tape.trace(s.fired)).collect();
    let mut diffs = [0.0; 3];
    for (i, &s) in Scale::ALL.iter().enumerate() {
        if let Some(sum) = pass.alpha_sum(s) {
            diffs[i] = sum - targets.len(s) as f64;
        }
    }
    Some((bundle.total, signature(&traces), diffs))
}

/// The full training objective on a T=8, D=4 toy, over frames and every parameter.
fn end_to_end_check(rng: &mut impl Rng, points: usize) -> Result<Check, VerifyError> {
    let mut c = Check::new("end-to-end total loss", E2E_GRAD_TOL);
    let targets = ScaleTargets {
        chars: vec![2, 3, 1, 4, 5],
        phones: vec![1, 3, 2],
        words: vec![2, 1],
    };
    let w = StageWeights::all_on();
    while c.cases < points {
        let model = McifModel::new(ModelConfig {
            feature_dim: 4,
            hidden: 6,
            vocab: [5, 4, 3],
            init_seed: rng.gen(),
            ..ModelConfig::default()
        })?;
        let frames = rand_tensor(rng, 8, 4, 1.0);
        let Some((_, base_sig, diffs)) = e2e_objective(&model, &frames, &targets, &w) else {
            continue;
        };
        if diffs.iter().any(|d| d.abs() < BOUNDARY_MARGIN) {
            continue;
        }
        let (bundle, Some((pass, grads))) = model.loss_and_grads(&frames, &targets, &w)? else {
            continue;
        };
        if !bundle.total.is_finite() {
            continue;
        }
        let mut acc = model.params.clone();
        acc.zero_grad();
        grads.accumulate_into(&mut acc)?;

        let names: Vec<String> = model.params.names().map(str::to_string).collect();
        let mut point: Vec<f64> = frames.data().to_vec();
        let mut analytic: Vec<f64> = grads.get(pass.frames).expect("frames reach the loss").data().to_vec();
        for n in &names {
            point.extend_from_slice(model.params.value(n)?.data());
            analytic.extend_from_slice(acc.grad(n)?.data());
        }
        let rebuild = |x: &[f64]| -> (Tensor2, ParamSet) {
            let fr = Tensor2::from_vec(8, 4, x[..32].to_vec()).unwrap();
            let mut ps = model.params.clone();
            let mut off = 32;
            for n in &names {
                let v = ps.value(n).unwrap();
                let len = v.data().len();
                let nv = Tensor2::from_vec(v.rows(), v.cols(), x[off..off + len].to_vec()).unwrap();
                ps.set_value(n, nv).unwrap();
                off += len;
            }
            (fr, ps)
        };
        let r = finite_diff_check(
            |x| {
                let (fr, ps) = rebuild(x);
                let m = McifModel {
                    config: model.config.clone(),
                    params: ps,
                };
                let (v, sig, d) = e2e_objective(&m, &fr, &targets, &w)?;
                let same_side = d.iter().zip(&diffs).all(|(a, b)| a.signum() == b.signum());
                (sig == base_sig && same_side).then_some(v)
            },
            &point,
            &analytic,
            FD_EPS,
        )?;
        c.record(r.max_rel_error);
        c.skipped += r.skipped;
    }
    Ok(c)
}
