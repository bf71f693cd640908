//! Acceptance suite: one `PASS`/`FAIL` line per criterion on stderr, each at
//! its pinned tolerance. Tests are serialized so wall-clock limits are not
//! distorted by each other.

use std::fs;
use std::io::Write;
use std::process::Command;
use std::sync::{Mutex, OnceLock};
use std::time::{Duration, Instant};

use num_bigint::BigUint;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

use gcgsim::data::{build_dataset, gen_random_graph, Dataset, GenConfig, LabelSource, Labeler, PairPlan};
use gcgsim::eval::{encode_all, evaluate_split, swap_eval_iis, SplitReport, SwapReport};
use gcgsim::ged::{beam_ged, exact_ged_astar, exact_ged_bruteforce, hungarian_ged, BeamWidth};
use gcgsim::gradcheck::{check_model, check_primitives, primitive_names, GradCheckConfig};
use gcgsim::graph::{extract_partition, pad_pair, sim_from_ged, Graph};
use gcgsim::metrics::{average_ranks, kendall_tau, precision_at_k, spearman_rho, RankScope};
use gcgsim::model::{GcgSim, ModelConfig};
use gcgsim::train::{fit, TrainConfig};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

/// Writes the verdict line past the test harness capture and fails the test
/// when the criterion does not hold.
fn verdict(name: &str, passed: bool, detail: String) {
    let line = format!("{} {name}: {detail}\n", if passed { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(passed, "{name} failed: {detail}");
}

fn small_pairs(count: usize, seed: u64) -> Vec<(Graph, Graph)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|k| {
            let n1 = rng.gen_range(1..=6);
            let n2 = rng.gen_range(1..=6);
            let p = rng.gen_range(0.2..0.7);
            let a = gen_random_graph(format!("a{k}"), n1, 3, p, false, &mut rng).unwrap();
            let b = gen_random_graph(format!("b{k}"), n2, 3, p, false, &mut rng).unwrap();
            (a, b)
        })
        .collect()
}

const SUITE_PAIRS: usize = 250;
const SUITE_SEED: u64 = 2024;

#[test]
fn ged_oracle_equivalence() {
    let _g = serial();
    let pairs = small_pairs(SUITE_PAIRS, SUITE_SEED);
    let start = Instant::now();
    let mut mismatches = 0;
    for (a, b) in &pairs {
        let pair = pad_pair(a, b);
        assert!(pair.size() <= 6);
        if exact_ged_astar(&pair).unwrap().value != exact_ged_bruteforce(&pair).unwrap().value {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    verdict(
        "GED oracle equivalence",
        mismatches == 0 && elapsed < Duration::from_secs(60),
        format!("{} pairs with N <= 6, {mismatches} A*/brute-force mismatches, {elapsed:.2?} (limit 60 s)", pairs.len()),
    );
}

#[test]
fn heuristic_bounds() {
    let _g = serial();
    let pairs = small_pairs(SUITE_PAIRS, SUITE_SEED);
    let (mut below, mut unbounded_off) = (0, 0);
    for (a, b) in &pairs {
        let pair = pad_pair(a, b);
        let exact = exact_ged_bruteforce(&pair).unwrap().value;
        for w in [1, 5, 100] {
            below += (beam_ged(&pair, BeamWidth::Finite(w)).unwrap().value < exact) as usize;
        }
        below += (hungarian_ged(&pair).unwrap().value < exact) as usize;
        unbounded_off += (beam_ged(&pair, BeamWidth::Unbounded).unwrap().value != exact) as usize;
    }
    verdict(
        "Heuristic bounds",
        below == 0 && unbounded_off == 0,
        format!(
            "{} pairs: {below} beam(1,5,100)/Hungarian values below exact, {unbounded_off} unbounded-beam values differ",
            pairs.len()
        ),
    );
}

#[test]
fn partition_consistency() {
    let _g = serial();
    let pairs = small_pairs(SUITE_PAIRS, SUITE_SEED);
    let mut cost_off = 0;
    let mut nonempty = 0;
    for (a, b) in &pairs {
        let pair = pad_pair(a, b);
        let witness = exact_ged_astar(&pair).unwrap();
        let part = extract_partition(&pair, &witness.alignment).unwrap();
        cost_off += (part.edit_cost().total() != exact_ged_bruteforce(&pair).unwrap().value) as usize;
        for g in [a, b] {
            let same = pad_pair(g, g);
            let p = extract_partition(&same, &exact_ged_astar(&same).unwrap().alignment).unwrap();
            let unaligned = p.g1.unaligned_nodes.len()
                + p.g1.unaligned_edges.len()
                + p.g2.unaligned_nodes.len()
                + p.g2.unaligned_edges.len();
            nonempty += (unaligned != 0) as usize;
        }
    }
    verdict(
        "Partition consistency",
        cost_off == 0 && nonempty == 0,
        format!(
            "{} pairs: {cost_off} partition costs differ from exact GED; {} self-pairs, {nonempty} with unaligned parts",
            pairs.len(),
            2 * pairs.len()
        ),
    );
}

/// `exp(-2 ged / (n1 + n2))` from an exact fixed-point Taylor series with
/// 256 fractional bits.
fn sim_oracle(ged: u64, n1: u64, n2: u64) -> f64 {
    const BITS: u64 = 256;
    let one = BigUint::from(1u8) << BITS;
    let x = (BigUint::from(2 * ged) << BITS) / BigUint::from(n1 + n2);
    let mut term = one.clone();
    let mut sum = one.clone();
    let mut k = 1u64;
    loop {
        term = (&term * &x >> BITS) / BigUint::from(k);
        if term == BigUint::from(0u8) {
            break;
        }
        sum += &term;
        k += 1;
    }
    // exp(-x) = 1 / exp(x), scaled by 2^100 before the conversion.
    let scaled = (BigUint::from(1u8) << (BITS + 100)) / sum;
    let digits = scaled.to_u64_digits();
    let mut value = 0.0;
    for (i, d) in digits.iter().enumerate() {
        value += *d as f64 * 2f64.powi(64 * i as i32);
    }
    value / 2f64.powi(100)
}

#[test]
fn similarity_fidelity() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    let mut iff_broken = 0;
    for _ in 0..1000 {
        let ged = if rng.gen_bool(0.1) { 0 } else { rng.gen_range(1..=60) };
        let n1 = rng.gen_range(1..=40);
        let n2 = rng.gen_range(1..=40);
        let s = sim_from_ged(ged as i64, n1, n2).unwrap();
        worst = worst.max((s - sim_oracle(ged, n1 as u64, n2 as u64)).abs());
        iff_broken += ((s == 1.0) != (ged == 0)) as usize;
    }
    verdict(
        "Similarity normalization fidelity",
        worst <= 1e-12 && iff_broken == 0,
        format!("1000 triples: max |error| {worst:.3e} (limit 1e-12), {iff_broken} violations of sim = 1 iff ged = 0"),
    );
}

#[test]
fn gradient_suite() {
    let _g = serial();
    let cfg = GradCheckConfig::default();
    let start = Instant::now();
    let mut reports = check_primitives(20, 0, &cfg).unwrap();
    reports.push(check_model(20, 0, &cfg).unwrap());
    let elapsed = start.elapsed();
    let worst = reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let cli = Command::new(env!("CARGO_BIN_EXE_gcgsim"))
        .args(["gradcheck", "--instances", "20", "--seed", "0"])
        .env_remove("GCGSIM_SEED")
        .output()
        .unwrap();
    let all_covered = primitive_names().len() + 1 == reports.len() && reports.iter().all(|r| r.instances == 20);
    verdict(
        "Gradient suite",
        failed.is_empty()
            && all_covered
            && worst <= cfg.tolerance
            && cli.status.code() == Some(0)
            && elapsed < Duration::from_secs(120),
        format!(
            "{} primitives + full model, 20 instances each: max rel. error {worst:.2e} (limit 1e-4), failing {failed:?}, \
             CLI exit {:?}, {elapsed:.2?} (limit 120 s)",
            reports.len() - 1,
            cli.status.code()
        ),
    );
}

fn symmetry_violations(model: &GcgSim, graphs: &[Graph]) -> (usize, usize) {
    let mut checked = 0;
    let mut bad = 0;
    for g in graphs {
        let e = model.encode(g).unwrap();
        let acts = model.infer(&e, &e).unwrap();
        for layer in &acts.layers {
            checked += 1;
            let zero = layer.h_us_i.iter().chain(&layer.h_us_j).all(|&v| v == 0.0);
            if layer.alpha != 1.0 || !zero {
                bad += 1;
            }
        }
    }
    (checked, bad)
}

#[test]
fn symmetry_fixture() {
    let _g = serial();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let graphs: Vec<Graph> = (0..30)
        .map(|k| gen_random_graph(format!("s{k}"), rng.gen_range(1..=10), 3, 0.4, false, &mut rng).unwrap())
        .collect();
    let mut checked = 0;
    let mut bad = 0;
    for seed in 0..3 {
        let model = GcgSim::new(ModelConfig { label_vocab_size: 3, seed, ..Default::default() }).unwrap();
        let (c, b) = symmetry_violations(&model, &graphs);
        checked += c;
        bad += b;
    }
    verdict(
        "Symmetry fixture",
        bad == 0,
        format!("{checked} layer activations of identical-graph pairs, {bad} with alpha != 1 or nonzero H_us"),
    );
}

fn hand_examples() -> Vec<(&'static str, f64, f64)> {
    let truth = [1.0, 2.0, 3.0];
    let pred = [1.0, 3.0, 2.0];
    // Truth top-10 is indices 0..10; the prediction keeps 0..5 and promotes 10..15.
    let truth20: Vec<f64> = (0..20).map(|i| 20.0 - i as f64).collect();
    let mut pred20 = truth20.clone();
    for i in 5..10 {
        pred20[i] = -(i as f64);
    }
    for i in 10..15 {
        pred20[i] = 100.0 - i as f64;
    }
    vec![
        ("spearman", spearman_rho(&pred, &truth).unwrap(), 0.5),
        ("kendall", kendall_tau(&pred, &truth).unwrap(), 1.0 / 3.0),
        ("p@10", precision_at_k(&pred20, &truth20, 10).unwrap(), 0.5),
    ]
}

mod naive {
    pub fn ranks(x: &[f64]) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let below = x.iter().filter(|&&w| w < v).count() as f64;
                let equal = x.iter().filter(|&&w| w == v).count() as f64;
                below + (equal + 1.0) / 2.0
            })
            .collect()
    }

    pub fn spearman(p: &[f64], t: &[f64]) -> Option<f64> {
        let (a, b) = (ranks(p), ranks(t));
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma) * (x - ma)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb) * (y - mb)).sum();
        (va != 0.0 && vb != 0.0).then(|| cov / (va * vb).sqrt())
    }

    pub fn kendall(p: &[f64], t: &[f64]) -> Option<f64> {
        let sign = |d: f64| (d > 0.0) as i64 - (d < 0.0) as i64;
        let (mut s, mut nx, mut ny) = (0i64, 0i64, 0i64);
        for i in 0..p.len() {
            for j in i + 1..p.len() {
                let (a, b) = (sign(p[i] - p[j]), sign(t[i] - t[j]));
                s += a * b;
                nx += a.abs();
                ny += b.abs();
            }
        }
        (nx != 0 && ny != 0).then(|| s as f64 / ((nx as f64) * (ny as f64)).sqrt())
    }

    pub fn precision(p: &[f64], t: &[f64], k: usize) -> f64 {
        let in_top = |x: &[f64], i: usize| {
            let beaten_by = (0..x.len()).filter(|&j| x[j] > x[i] || (x[j] == x[i] && j < i)).count();
            beaten_by < k
        };
        (0..p.len()).filter(|&i| in_top(p, i) && in_top(t, i)).count() as f64 / k as f64
    }
}

#[test]
fn metric_oracles() {
    let _g = serial();
    const TOL: f64 = 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut disagreements = Vec::new();
    let mut tied_vectors = 0;
    for case in 0..50 {
        let n = rng.gen_range(2..=60);
        // Every other case draws from a small value set so ties are common.
        let levels = if case % 2 == 0 { rng.gen_range(2..=5) } else { 1_000_000 };
        let mut draw = |_| rng.gen_range(0..levels) as f64 / levels as f64;
        let pred: Vec<f64> = (0..n).map(&mut draw).collect();
        let truth: Vec<f64> = (0..n).map(&mut draw).collect();
        tied_vectors += (average_ranks(&truth).iter().any(|r| r.fract() != 0.0)) as usize;
        if average_ranks(&pred) != naive::ranks(&pred) {
            disagreements.push(format!("case {case}: ranks"));
        }
        match (spearman_rho(&pred, &truth).ok(), naive::spearman(&pred, &truth)) {
            (Some(a), Some(b)) if (a - b).abs() <= TOL => {}
            (None, None) => {}
            other => disagreements.push(format!("case {case}: rho {other:?}")),
        }
        match (kendall_tau(&pred, &truth).ok(), naive::kendall(&pred, &truth)) {
            (Some(a), Some(b)) if (a - b).abs() <= TOL => {}
            (None, None) => {}
            other => disagreements.push(format!("case {case}: tau {other:?}")),
        }
        for k in [1, 5, 10, n] {
            if k > n {
                continue;
            }
            let (a, b) = (precision_at_k(&pred, &truth, k).unwrap(), naive::precision(&pred, &truth, k));
            if a != b {
                disagreements.push(format!("case {case}: p@{k} {a} vs {b}"));
            }
        }
    }
    let hands = hand_examples();
    let hand_ok = hands.iter().all(|(_, got, want)| (got - want).abs() <= TOL);
    verdict(
        "Metric oracles",
        disagreements.is_empty() && hand_ok && tied_vectors > 0,
        format!(
            "50 random vector pairs ({tied_vectors} with tied truth values): disagreements {disagreements:?}; \
             hand examples {hands:?}"
        ),
    );
}

#[test]
fn determinism() {
    let _g = serial();
    let dir = TempDir::new().unwrap();
    let run = |args: &[&str]| {
        let out = Command::new(env!("CARGO_BIN_EXE_gcgsim")).args(args).env_remove("GCGSIM_SEED").output().unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        out.stdout
    };
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    run(&["gen", "--out", &p("data"), "--graphs", "40", "--train-pairs", "150", "--database-size", "8", "--seed", "7"]);
    let mut outputs = Vec::new();
    for k in 0..2 {
        let (model, report) = (p(&format!("model{k}.json")), p(&format!("report{k}.json")));
        let stdout = run(&["train", "--data", &p("data"), "--out", &model, "--report", &report, "--seed", "7", "--epochs", "3"]);
        outputs.push((fs::read(&model).unwrap(), fs::read(&report).unwrap(), stdout));
    }
    let same_model = outputs[0].0 == outputs[1].0;
    let same_report = outputs[0].1 == outputs[1].1 && outputs[0].2 == outputs[1].2;
    verdict(
        "Determinism",
        same_model && same_report,
        format!(
            "`train --seed 7` twice: model files identical = {same_model} ({} bytes), reports identical = {same_report}",
            outputs[0].0.len()
        ),
    );
}

// Desk-scale training. The dataset and every trained variant are built once
// and shared by the three training criteria.

const DESK_SEED: u64 = 7;
const SEEDS: [u64; 3] = [7, 8, 9];

fn desk_recipe() -> GenConfig {
    GenConfig {
        num_graphs: 200,
        min_nodes: 5,
        max_nodes: 10,
        label_vocab: 3,
        edge_prob: 0.4,
        seed: DESK_SEED,
        labeler: Labeler { exact_cap: 10, ..Default::default() },
        pairs: PairPlan { train_pairs: Some(1200), database_size: Some(20), self_pairs: false },
        ..Default::default()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Variant {
    Full,
    NoGncm,
    NoPsgd,
    NoEcp,
    NoIir,
}

impl Variant {
    fn config(self, seed: u64) -> ModelConfig {
        let mut cfg = ModelConfig { label_vocab_size: 3, seed, ..Default::default() };
        match self {
            Variant::Full => {}
            Variant::NoGncm => cfg.use_gncm = false,
            Variant::NoPsgd => cfg.use_psgd = false,
            Variant::NoEcp => cfg.lambda = 0.0,
            Variant::NoIir => cfg.beta = 0.0,
        }
        cfg
    }
}

struct Trained {
    variant: Variant,
    seed: u64,
    test: SplitReport,
    iis: SwapReport,
    elapsed: Duration,
}

struct Desk {
    dataset: Dataset,
    build_time: Duration,
    runs: Vec<Trained>,
}

fn train_variant(ds: &Dataset, variant: Variant, seed: u64) -> Trained {
    let start = Instant::now();
    let mut model = GcgSim::new(variant.config(seed)).unwrap();
    let graphs = encode_all(&model, &ds.graphs).unwrap();
    let train = ds.examples(&ds.train).unwrap();
    let val = ds.examples(&ds.val).unwrap();
    fit(&mut model, &graphs, &train, &val, &TrainConfig { seed, ..Default::default() }, |_| {}).unwrap();
    let test = evaluate_split(&model, ds, "test", RankScope::PerQuery, 1).unwrap();
    let elapsed = start.elapsed();
    let iis = swap_eval_iis(&model, &graphs, &ds.examples(&ds.test).unwrap()).unwrap();
    let line = format!(
        "  trained {variant:?} seed {seed}: test MSE {:.3}e-3, rho {:.3}, IIS MSE difference {:.3e} ({elapsed:.0?})\n",
        test.metrics.mse_e3, test.metrics.rho, iis.mse_difference
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    Trained { variant, seed, test, iis, elapsed }
}

fn desk() -> &'static Desk {
    static DESK: OnceLock<Desk> = OnceLock::new();
    DESK.get_or_init(|| {
        let start = Instant::now();
        let dataset = build_dataset(&desk_recipe(), 1).unwrap();
        let build_time = start.elapsed();
        let mut runs = Vec::new();
        for seed in SEEDS {
            for v in [Variant::Full, Variant::NoGncm, Variant::NoPsgd, Variant::NoEcp, Variant::NoIir] {
                runs.push(train_variant(&dataset, v, seed));
            }
        }
        Desk { dataset, build_time, runs }
    })
}

fn runs_of(d: &Desk, v: Variant) -> Vec<&Trained> {
    d.runs.iter().filter(|r| r.variant == v).collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn desk_training() {
    let _g = serial();
    let d = desk();
    let ds = &d.dataset;
    let all_exact = ds.train.iter().chain(&ds.val).chain(&ds.test).all(|r| r.source == LabelSource::Exact);
    let run = d.runs.iter().find(|r| r.variant == Variant::Full && r.seed == DESK_SEED).unwrap();
    let m = &run.test.metrics;
    let reduction = 1.0 - m.mse_e3 / run.test.constant_mean_mse_e3;
    let wall = d.build_time + run.elapsed;
    verdict(
        "Desk-scale training",
        all_exact && reduction >= 0.5 && m.rho >= 0.6 && wall < Duration::from_secs(30 * 60),
        format!(
            "seed {DESK_SEED}, {} graphs, {}/{}/{} train/val/test pairs, exact labels = {all_exact}: test MSE {:.3}e-3 vs \
             constant-mean {:.3}e-3 ({:.1}% lower, need >= 50%), per-query rho {:.3} (need >= 0.6), wall clock {wall:.0?} \
             (limit 30 min)",
            ds.graphs.len(),
            ds.train.len(),
            ds.val.len(),
            ds.test.len(),
            m.mse_e3,
            run.test.constant_mean_mse_e3,
            100.0 * reduction,
            m.rho
        ),
    );
}

#[test]
fn ablation_direction() {
    let _g = serial();
    let d = desk();
    let mse = |v| mean(runs_of(d, v).iter().map(|r| r.test.metrics.mse_e3));
    let full = mse(Variant::Full);
    let others: Vec<(Variant, f64)> =
        [Variant::NoGncm, Variant::NoPsgd, Variant::NoEcp].into_iter().map(|v| (v, mse(v))).collect();
    verdict(
        "Ablation direction",
        others.iter().all(|&(_, m)| full <= m),
        format!(
            "mean test MSE over seeds {SEEDS:?}: full {full:.3}e-3, {}",
            others.iter().map(|(v, m)| format!("{v:?} {m:.3}e-3")).collect::<Vec<_>>().join(", ")
        ),
    );
}

#[test]
fn iir_robustness_direction() {
    let _g = serial();
    let d = desk();
    let signed = |v| mean(runs_of(d, v).iter().map(|r| r.iis.mse_difference));
    let absolute = |v| mean(runs_of(d, v).iter().map(|r| r.iis.mse_difference.abs()));
    let (full, no_iir) = (signed(Variant::Full), signed(Variant::NoIir));
    verdict(
        "IIR robustness direction",
        full <= no_iir,
        format!(
            "mean IIS MSE difference (swapped - original) over seeds {SEEDS:?}: full {full:.4e}, beta = 0 {no_iir:.4e} \
             (mean absolute: full {:.4e}, beta = 0 {:.4e})",
            absolute(Variant::Full),
            absolute(Variant::NoIir)
        ),
    );
}
