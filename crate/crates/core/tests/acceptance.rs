//! Acceptance suite. Each test prints one `PASS criterion-N` line (or
//! panics with a `FAIL` message) and enforces its runtime budget.
//!
//! Criteria 5-7 need the real DNC/UCI datasets and long training runs, so
//! they are `#[ignore]` by default; run them with
//! `cargo test -p dynembed-core --test acceptance --release -- --include-ignored`
//! after placing the datasets under `data/` (see the README).

use std::path::PathBuf;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dynembed_core::autodiff::{Tape, Tensor};
use dynembed_core::config::{ExperimentConfig, SplitSpec};
use dynembed_core::diagnostics::{
    contraction_violation, corollary1_trace, lemma1_check, lemma2_check, random_er_sequence,
    random_er_snapshot, random_features, weighted_smoothness_distance,
};
use dynembed_core::eval::{auc, average_precision};
use dynembed_core::experiment::run_experiment;
use dynembed_core::graph::{row_normalize, transition_normalize};
use dynembed_core::ingest::{load_edge_list, slice, EdgeListFormat, SliceConfig};
use dynembed_core::models::Framework;
use dynembed_core::norms::{self, NormKind};

fn report(criterion: &str, ok: bool, detail: &str) {
    if ok {
        println!("PASS {criterion}: {detail}");
    } else {
        println!("FAIL {criterion}: {detail}");
        panic!("{criterion} failed: {detail}");
    }
}

fn budget(criterion: &str, started: Instant, limit_secs: f64) {
    let elapsed = started.elapsed().as_secs_f64();
    report(
        &format!("{criterion} (runtime)"),
        elapsed < limit_secs,
        &format!("{elapsed:.2}s of {limit_secs}s budget"),
    );
}

/// The shared random-graph corpus: 200 draws with n <= 50, d <= 8,
/// Erdős–Rényi p in {0.1, 0.3, 0.6}.
fn theory_corpus() -> Vec<(dynembed_core::Snapshot, dynembed_core::Matrix)> {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    (0..200)
        .map(|_| {
            let n = rng.random_range(2..=50);
            let d = rng.random_range(1..=8);
            let p = [0.1, 0.3, 0.6][rng.random_range(0..3)];
            let s = random_er_snapshot(n, p, &mut rng);
            let x = random_features(n, d, 3.0, &mut rng);
            (s, x)
        })
        .collect()
}

#[test]
fn criterion_1a_aggregation_contracts_smoothness_distance() {
    let started = Instant::now();
    let mut worst = f64::NEG_INFINITY;
    for (s, x) in theory_corpus() {
        for adj in [row_normalize(&s), transition_normalize(&s).0] {
            let before = weighted_smoothness_distance(&x, &adj).unwrap();
            let violation = contraction_violation(&x, &adj).unwrap();
            let rel = violation / before.abs().max(1e-300);
            worst = worst.max(rel);
            assert!(
                violation <= before.abs() * 1e-9 + 1e-12,
                "contraction violated: rel {rel}"
            );
        }
    }
    report(
        "criterion-1a",
        true,
        &format!("200 graphs, both row-stochastic weightings, worst relative violation {worst:.2e}"),
    );
    budget("criterion-1a", started, 10.0);
}

#[test]
fn criterion_1b_gradient_and_hessian_probes() {
    let started = Instant::now();
    let mut worst_residual: f64 = 0.0;
    let mut worst_q = f64::INFINITY;
    for (idx, (s, x)) in theory_corpus().into_iter().enumerate() {
        let r1 = lemma1_check(&x, &row_normalize(&s)).unwrap();
        let r2 = lemma1_check(&x, &transition_normalize(&s).0).unwrap();
        worst_residual = worst_residual.max(r1).max(r2);
        let q = lemma2_check(&s, 1000, idx as u64).unwrap();
        worst_q = worst_q.min(q);
    }
    report(
        "criterion-1b (lemma 1)",
        worst_residual < 1e-10,
        &format!("max residual {worst_residual:.2e} < 1e-10"),
    );
    report(
        "criterion-1b (lemma 2)",
        worst_q >= -1e-9,
        &format!("min quadratic form {worst_q:.3e} >= -1e-9"),
    );
    budget("criterion-1b", started, 10.0);
}

#[test]
fn criterion_1c_two_arm_traces_hold_per_step_and_summed() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xABCD);
    let mut checked = 0;
    for seq_idx in 0..20u64 {
        let n0 = rng.random_range(10..=16);
        let growth = rng.random_range(0..=4);
        let seq = random_er_sequence(5, n0, growth, 0.3, &mut rng);
        for fw in [Framework::DynGcn, Framework::GruGcn] {
            let trace = corollary1_trace(&seq, fw, NormKind::None, 32, seq_idx).unwrap();
            assert!(
                trace.per_step_holds(1e-9),
                "per-step inequality violated (sequence {seq_idx}, {fw:?}): {:?}",
                trace
                    .steps
                    .iter()
                    .map(|s| (s.dist_conv, s.dist_noconv))
                    .collect::<Vec<_>>()
            );
            assert!(trace.summed_holds(1e-9), "summed inequality violated");
            checked += 1;
        }
    }
    report(
        "criterion-1c",
        checked == 40,
        "20 sequences x 2 frameworks: per-step and summed distance inequalities hold",
    );
    budget("criterion-1c", started, 30.0);
}

#[test]
fn criterion_2_feature_norm_invariants() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xFEA7);
    let mut worst_norm_dev: f64 = 0.0;
    let mut worst_identity_rel: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=500);
        let d = rng.random_range(2..=8);
        let data: Vec<f64> = (0..n * d).map(|_| rng.random_range(-5.0..5.0)).collect();
        let z = Tensor::from_values(n, d, data).unwrap();
        let mut tape = Tape::new();
        let y = norms::feature_norm(&mut tape, &z).unwrap().to_matrix();

        for r in 0..n {
            let norm: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            worst_norm_dev = worst_norm_dev.max((norm - 1.0).abs());
        }
        // brute-force pairwise oracle for the total-distance identity
        let mut brute = 0.0;
        for i in 0..n {
            for j in 0..n {
                brute += y.row_dist_sq(i, j);
            }
        }
        let mut colsum = vec![0.0; d];
        for i in 0..n {
            for (c, v) in colsum.iter_mut().enumerate() {
                *v += y.get(i, c);
            }
        }
        let closed =
            2.0 * (n * n) as f64 - 2.0 * colsum.iter().map(|v| v * v).sum::<f64>();
        let rel = (brute - closed).abs() / brute.abs().max(1.0);
        worst_identity_rel = worst_identity_rel.max(rel);
    }
    report(
        "criterion-2 (unit rows)",
        worst_norm_dev < 1e-12,
        &format!("max |row norm - 1| = {worst_norm_dev:.2e} < 1e-12"),
    );
    report(
        "criterion-2 (identity)",
        worst_identity_rel < 1e-9,
        &format!("max relative identity error {worst_identity_rel:.2e} < 1e-9"),
    );
    budget("criterion-2", started, 10.0);
}

/// Criterion 3 and its per-op coverage live in `tests/gradcheck.rs`; this
/// entry re-runs the full-step checks under the acceptance budget so the
/// suite reports one line for the criterion.
#[test]
fn criterion_3_gradient_checks() {
    let started = Instant::now();
    gradcheck_full_steps();
    report(
        "criterion-3",
        true,
        "all ops and both full framework steps match central finite differences (rel < 1e-4)",
    );
    budget("criterion-3", started, 30.0);
}

fn gradcheck_full_steps() {
    use dynembed_core::graph::{build_snapshot, symmetric_normalize};
    use dynembed_core::models::{step_dyn_gcn, step_gru_gcn, ModelState};
    use dynembed_core::training::bce_loss;
    use std::rc::Rc;

    let eps = 1e-5;
    for (fw, seed) in [(Framework::DynGcn, 70u64), (Framework::GruGcn, 71u64)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut edges = Vec::new();
        for i in 0..6usize {
            for j in (i + 1)..6 {
                if rng.random::<f64>() < 0.5 {
                    edges.push((i, j, 1.0));
                }
            }
        }
        if edges.is_empty() {
            edges.push((0, 1, 1.0));
        }
        let adj = Rc::new(symmetric_normalize(&build_snapshot(&edges, 6).unwrap()));
        let state = std::cell::RefCell::new(
            ModelState::new(fw, 4, 0.25, NormKind::FeatureNorm, 6, &mut rng).unwrap(),
        );
        let pos = [(0usize, 1usize), (2, 4)];
        let neg = [(1usize, 5usize), (0, 3)];
        let forward = |tape: &mut Tape| -> f64 {
            let mut srng = ChaCha8Rng::seed_from_u64(1234 + seed);
            let mut st = state.borrow_mut();
            st.reset_hidden();
            let z = match fw {
                Framework::DynGcn => step_dyn_gcn(&mut st, tape, &adj, true, &mut srng).unwrap(),
                Framework::GruGcn => step_gru_gcn(&mut st, tape, &adj, true, &mut srng).unwrap(),
            };
            let loss = bce_loss(tape, &z, &pos, &neg, 1.0).unwrap();
            loss.scalar().unwrap()
        };
        let params = state.borrow().parameters();
        // analytic gradients
        let mut tape = Tape::new();
        let _ = forward(&mut tape);
        // rebuild the loss tensor for backward: forward returned the value,
        // so re-run keeping the tensor this time
        tape.discard();
        let loss = {
            let mut srng = ChaCha8Rng::seed_from_u64(1234 + seed);
            let mut st = state.borrow_mut();
            st.reset_hidden();
            let z = match fw {
                Framework::DynGcn => {
                    step_dyn_gcn(&mut st, &mut tape, &adj, true, &mut srng).unwrap()
                }
                Framework::GruGcn => {
                    step_gru_gcn(&mut st, &mut tape, &adj, true, &mut srng).unwrap()
                }
            };
            bce_loss(&mut tape, &z, &pos, &neg, 1.0).unwrap()
        };
        for p in &params {
            p.zero_grad();
        }
        tape.backward(&loss).unwrap();
        let analytic: Vec<Vec<f64>> = params.iter().map(|p| p.grad()).collect();

        for (p, a) in params.iter().zip(&analytic) {
            for i in 0..p.len() {
                let orig = p.values()[i];
                p.values_mut()[i] = orig + eps;
                let mut t = Tape::new();
                let up = forward(&mut t);
                t.discard();
                p.values_mut()[i] = orig - eps;
                let mut t = Tape::new();
                let down = forward(&mut t);
                t.discard();
                p.values_mut()[i] = orig;
                let numeric = (up - down) / (2.0 * eps);
                let rel = (a[i] - numeric).abs() / a[i].abs().max(numeric.abs()).max(1.0);
                assert!(rel < 1e-4, "{fw:?} param entry {i}: rel err {rel}");
            }
        }
    }
}

#[test]
fn criterion_4_metric_oracles_match_exactly() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x4A4A);

    // independent brute-force oracles
    let auc_oracle = |pos: &[f64], neg: &[f64]| -> f64 {
        let mut wins = 0.0;
        for &p in pos {
            for &n in neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() as f64 * neg.len() as f64)
    };
    let ap_oracle = |pos: &[f64], neg: &[f64]| -> f64 {
        let mut terms: Vec<(usize, f64)> = Vec::new();
        for (idx, &s) in pos.iter().enumerate() {
            let above_any = pos.iter().filter(|&&x| x > s).count()
                + neg.iter().filter(|&&x| x > s).count();
            let tied_before = pos[..idx].iter().filter(|&&x| x == s).count();
            let rank = above_any + tied_before + 1;
            let hits = pos.iter().filter(|&&x| x > s).count() + tied_before + 1;
            terms.push((rank, hits as f64 / rank as f64));
        }
        terms.sort_by_key(|&(r, _)| r);
        terms.iter().map(|&(_, t)| t).sum::<f64>() / pos.len() as f64
    };

    for instance in 0..1000 {
        let p = rng.random_range(1..=200);
        let n = rng.random_range(1..=200);
        // integer grid scores force heavy ties
        let pos: Vec<f64> = (0..p).map(|_| rng.random_range(0..40) as f64 / 8.0).collect();
        let neg: Vec<f64> = (0..n).map(|_| rng.random_range(0..40) as f64 / 8.0).collect();
        let a = auc(&pos, &neg).unwrap();
        let ao = auc_oracle(&pos, &neg);
        assert!(a == ao, "instance {instance}: auc {a} != oracle {ao}");
        let ap = average_precision(&pos, &neg).unwrap();
        let apo = ap_oracle(&pos, &neg);
        assert!(ap == apo, "instance {instance}: ap {ap} != oracle {apo}");
    }
    report(
        "criterion-4",
        true,
        "1000 random instances (P,N <= 200): auc and average_precision equal brute-force oracles exactly",
    );
    budget("criterion-4", started, 10.0);
}

// ---------------------------------------------------------------------------
// Dataset-gated criteria. These need the KONECT exports on disk and a
// release build; see the README for download instructions.
// ---------------------------------------------------------------------------

fn data_dir() -> PathBuf {
    std::env::var_os("DYNEMBED_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR"))
                .join("..")
                .join("..")
                .join("data")
        })
}

fn dataset_path(name: &str, file: &str) -> PathBuf {
    let path = data_dir().join(name).join(file);
    assert!(
        path.exists(),
        "dataset file {} not found; download it first (see README 'Datasets')",
        path.display()
    );
    path
}

fn dnc_sequence() -> dynembed_core::ingest::SnapshotSequence {
    let t = load_edge_list(
        &dataset_path("dnc", "out.dnc-temporalGraph"),
        EdgeListFormat::Konect,
    )
    .unwrap();
    slice(
        &t,
        &SliceConfig {
            target_edges_per_slice: 2000,
            day_boundary_rule: true,
            max_steps: None,
        },
    )
    .unwrap()
}

fn uci_sequence() -> dynembed_core::ingest::SnapshotSequence {
    let t = load_edge_list(
        &dataset_path("uci", "out.opsahl-ucsocial"),
        EdgeListFormat::Konect,
    )
    .unwrap();
    slice(
        &t,
        &SliceConfig {
            target_edges_per_slice: 3000,
            day_boundary_rule: true,
            max_steps: None,
        },
    )
    .unwrap()
}

fn dnc_config(norm: &str, framework: &str) -> ExperimentConfig {
    ExperimentConfig {
        framework: framework.into(),
        norm: norm.into(),
        split: SplitSpec::Ratio80,
        seeds: vec![0, 1, 2, 3, 4],
        ..ExperimentConfig::default()
    }
}

#[test]
#[ignore = "needs the DNC dataset under data/dnc and a multi-minute training budget"]
fn criterion_5ab_dnc_dyn_gcn_feature_norm_gains() {
    let started = Instant::now();
    let seq = dnc_sequence();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let (with_fn, _) = run_experiment(&seq, &dnc_config("fn", "dyn-gcn"), threads).unwrap();
    let (without, _) = run_experiment(&seq, &dnc_config("none", "dyn-gcn"), threads).unwrap();

    report(
        "criterion-5a (margin)",
        with_fn.auc.mean - without.auc.mean >= 0.02,
        &format!(
            "DNC dyn-gcn AUC with fn {:.4} vs without {:.4} (need >= 0.02 margin)",
            with_fn.auc.mean, without.auc.mean
        ),
    );
    report(
        "criterion-5a (band)",
        (0.86..=0.96).contains(&with_fn.auc.mean),
        &format!("fn mean AUC {:.4} within [0.86, 0.96]", with_fn.auc.mean),
    );
    report(
        "criterion-5b",
        without.rneg_average.mean >= 5.0 * with_fn.rneg_average.mean,
        &format!(
            "averaged R_neg {:.4} (fn) vs {:.4} (none): need >= 5x reduction",
            with_fn.rneg_average.mean, without.rneg_average.mean
        ),
    );
    budget("criterion-5ab", started, 900.0);
}

#[test]
#[ignore = "needs the UCI dataset under data/uci and a multi-minute training budget"]
fn criterion_5c_uci_gru_gcn_feature_norm_ap_gain() {
    let started = Instant::now();
    let seq = uci_sequence();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let (with_fn, _) = run_experiment(&seq, &dnc_config("fn", "gru-gcn"), threads).unwrap();
    let (without, _) = run_experiment(&seq, &dnc_config("none", "gru-gcn"), threads).unwrap();
    report(
        "criterion-5c",
        with_fn.ap.mean > without.ap.mean,
        &format!(
            "UCI gru-gcn AP with fn {:.4} vs without {:.4} (any positive margin)",
            with_fn.ap.mean, without.ap.mean
        ),
    );
    budget("criterion-5c", started, 1500.0);
}

#[test]
#[ignore = "needs the DNC dataset under data/dnc and a multi-minute training budget"]
fn criterion_5d_feature_norm_dominates_pair_norm_variants() {
    let seq = dnc_sequence();
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get());
    let (fn_run, _) = run_experiment(&seq, &dnc_config("fn", "dyn-gcn"), threads).unwrap();
    let (pn_run, _) = run_experiment(&seq, &dnc_config("pn", "dyn-gcn"), threads).unwrap();
    let (pnsi_run, _) = run_experiment(&seq, &dnc_config("pn-si", "dyn-gcn"), threads).unwrap();
    report(
        "criterion-5d",
        fn_run.auc.mean >= pn_run.auc.mean && fn_run.auc.mean >= pnsi_run.auc.mean,
        &format!(
            "DNC dyn-gcn mean AUC: fn {:.4} >= pn {:.4} and >= pn-si {:.4}",
            fn_run.auc.mean, pn_run.auc.mean, pnsi_run.auc.mean
        ),
    );
}

#[test]
#[ignore = "needs the DNC and UCI datasets under data/"]
fn criterion_6_slicing_reproduction() {
    let dnc = load_edge_list(
        &dataset_path("dnc", "out.dnc-temporalGraph"),
        EdgeListFormat::Konect,
    )
    .unwrap();
    report(
        "criterion-6 (DNC totals)",
        dnc.num_nodes() == 1891 && dnc.records.len() == 39264,
        &format!("{} nodes, {} links (need 1891/39264)", dnc.num_nodes(), dnc.records.len()),
    );
    let steps = dnc_sequence().num_steps();
    report(
        "criterion-6 (DNC steps)",
        (11..=13).contains(&steps),
        &format!("{steps} steps (need 12 +/- 1)"),
    );

    let uci = load_edge_list(
        &dataset_path("uci", "out.opsahl-ucsocial"),
        EdgeListFormat::Konect,
    )
    .unwrap();
    report(
        "criterion-6 (UCI totals)",
        uci.num_nodes() == 1899 && uci.records.len() == 59835,
        &format!("{} nodes, {} links (need 1899/59835)", uci.num_nodes(), uci.records.len()),
    );
    let steps = uci_sequence().num_steps();
    report(
        "criterion-6 (UCI steps)",
        (11..=13).contains(&steps),
        &format!("{steps} steps (need 12 +/- 1)"),
    );
}

#[test]
#[ignore = "needs the DNC dataset under data/dnc; repeats a criterion-5 seed"]
fn criterion_7_dnc_run_is_bit_exactly_reproducible() {
    let seq = dnc_sequence();
    let cfg = ExperimentConfig {
        seeds: vec![0],
        ..dnc_config("fn", "dyn-gcn")
    };
    let (a, ra) = run_experiment(&seq, &cfg, 1).unwrap();
    let (b, rb) = run_experiment(&seq, &cfg, 1).unwrap();
    let exact = a.auc.mean.to_bits() == b.auc.mean.to_bits()
        && a.ap.mean.to_bits() == b.ap.mean.to_bits()
        && ra[0].report.rneg_average.map(f64::to_bits)
            == rb[0].report.rneg_average.map(f64::to_bits);
    report(
        "criterion-7",
        exact,
        "repeat of the criterion-5 run with identical seed reproduces AUC/AP/R_neg bit-exactly",
    );
}
