//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs every criterion in sequence and prints its verdict with the measured
//! numbers. The process fails only if a criterion cannot be evaluated (a
//! crash or an I/O error), never because a verdict is FAIL. Set
//! `THM_ACCEPTANCE=1,4,mesh` to evaluate a subset.
//!
//! The conductivity sweep (criterion 4) contains about eight 1000-iteration
//! runs of several tens of minutes each. It is evaluated only when selected
//! explicitly or when `THM_ACCEPTANCE_LONG=1` is set; otherwise its line reports
//! FAIL as not evaluated.

use std::collections::HashSet;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use faer::{Mat, Side};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thm::experiment::{RunResult, build_mesh, run_experiment};
use thm::report::to_csv;
use thm::{ExperimentConfig, ExperimentKind, RunStatus};
use thm_core::PolyMesh;
use thm_core::forms::*;
use thm_core::mms::{ErrorReport, ManufacturedCase, observed_order};
use thm_core::picard::PicardStatus;
use thm_core::sparse::Coo;
use thm_core::system::{TransportState, assemble_global};

const NORMS: [&str; 7] = ["u_L2", "u_dG", "p_L2", "p_dG", "T_L2", "T_dG", "phi_L2"];
const THETAS: [f64; 6] = [1.0, 1e-2, 1e-4, 1e-6, 1e-8, 1e-10];

/// Reference mesh sizes for 100, 310 and 1000 cells.
const REFERENCE_H: [f64; 3] = [0.1811, 0.1025, 0.0569];

/// Stabilized-variant errors at ell = 3, N = 310 for each theta, in the order
/// u_L2, u_dG, p_L2, p_dG, T_L2, T_dG.
const THETA_STAB_ERRORS: [[f64; 6]; 6] = [
    [9.793e-07, 5.537e-4, 1.416e-06, 6.166e-4, 1.414e-06, 6.006e-4],
    [9.797e-07, 5.537e-4, 1.416e-06, 6.166e-4, 4.850e-06, 6.061e-05],
    [4.606e-06, 5.567e-4, 1.460e-06, 6.166e-4, 0.002, 0.001],
    [5.238e-06, 5.628e-4, 1.475e-06, 6.167e-4, 0.007, 4.356e-4],
    [5.127e-06, 5.596e-4, 1.454e-06, 6.166e-4, 0.007, 5.351e-05],
    [5.143e-06, 5.596e-4, 1.453e-06, 6.166e-4, 0.007, 5.452e-06],
];

/// Pressure and temperature L2 errors of the permeability test (all variants
/// agree) at N = 100, 310, 1000.
const KAPPA_P_L2: [f64; 3] = [0.184, 0.056, 0.021];
const KAPPA_T_L2: [f64; 3] = [3.928e-4, 4.800e-05, 7.368e-06];
/// Same for the combined conductivity and permeability test.
const THETAKAPPA_P_L2: [f64; 3] = [0.100, 0.031, 0.012];
const THETAKAPPA_T_L2: [f64; 3] = [0.100, 0.031, 0.012];
/// Iteration counts of the combined test per variant (old, vol, plain, stab)
/// at N = 100, 310, 1000.
const THETAKAPPA_ITERATIONS: [[usize; 3]; 4] = [[4, 8, 4], [6, 11, 4], [4, 7, 4], [9, 18, 6]];

struct Verdicts {
    lines: Vec<(bool, String)>,
}

impl Verdicts {
    fn record(&mut self, id: &str, name: &str, pass: bool, details: &[String]) {
        let line = format!("{} [{id}] {name}", if pass { "PASS" } else { "FAIL" });
        println!("{line}");
        for d in details {
            println!("    {d}");
        }
        self.lines.push((pass, line));
    }
}

fn configs_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn load(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(configs_dir().join(name)).expect("shipped configuration")
}

fn run(cfg: &ExperimentConfig, heavy: bool) -> Vec<RunResult> {
    let started = Instant::now();
    let results = run_experiment(cfg, heavy, &|r| {
        eprintln!(
            "  {} {} ell={} N={}: {} after {} iterations, {:.1} s",
            r.label,
            r.spec.variant.name(),
            r.spec.ell,
            r.spec.cells,
            r.status.name(),
            r.iterations,
            r.seconds
        )
    })
    .expect("experiment runs");
    eprintln!("  {} finished in {:.1} s", cfg.kind.name(), started.elapsed().as_secs_f64());
    results
}

fn errors(r: &RunResult) -> [f64; 7] {
    r.errors.map_or([f64::NAN; 7], |e: ErrorReport| e.as_array())
}

fn converged(r: &RunResult) -> bool {
    r.status == RunStatus::Picard(PicardStatus::Converged)
}

fn find<'a>(results: &'a [RunResult], variant: TransportVariant, ell: usize, cells: usize) -> Vec<&'a RunResult> {
    results.iter().filter(|r| r.spec.variant == variant && r.spec.ell == ell && r.spec.cells == cells).collect()
}

fn order(e: &[f64], h: &[f64]) -> f64 {
    observed_order(e, h).unwrap_or(f64::NAN)
}

/// `value` lies within a factor `k` of `reference` in either direction.
fn within_factor(value: f64, reference: f64, k: f64) -> bool {
    value.is_finite() && value <= k * reference && value >= reference / k
}

fn fmt_run(r: &RunResult) -> String {
    format!("{} after {}", r.status.name(), r.iterations)
}

fn criterion_mesh(v: &mut Verdicts) {
    let mut pass = true;
    let mut details = Vec::new();
    for (cells, reference) in [100, 310, 1000].into_iter().zip(REFERENCE_H) {
        let h = build_mesh(cells, 1, 100).expect("mesh").h();
        let ok = (h - reference).abs() <= 0.15 * reference;
        pass &= ok;
        details.push(format!("N = {cells}: h = {h:.4} against {reference} (+-15%): {}", if ok { "ok" } else { "outside" }));
    }
    v.record("mesh", "Lloyd mesh sizes match the reference meshes within 15%", pass, &details);
}

fn criteria_1_and_3(v: &mut Verdicts) {
    let cfg = load("convergence_h.toml");
    let started = Instant::now();
    let results = run(&cfg, false);
    let elapsed = started.elapsed().as_secs_f64();

    let mut pass = true;
    let mut details = Vec::new();
    for ell in [2usize, 3] {
        for variant in [TransportVariant::Vol, TransportVariant::Plain] {
            let runs: Vec<&RunResult> = [310, 1000].iter().map(|&n| find(&results, variant, ell, n)[0]).collect();
            let (e0, e1) = (errors(runs[0]), errors(runs[1]));
            let hs = [runs[0].h, runs[1].h];
            let l = ell as f64;
            let mut parts = Vec::new();
            for (name, i, lo, hi) in [
                ("u_dG", 1, l - 0.3, l + 0.5),
                ("p_dG", 3, l - 0.3, l + 0.5),
                ("T_dG", 5, l - 0.3, l + 0.5),
                ("u_L2", 0, l + 0.7, l + 1.5),
                ("p_L2", 2, l + 0.7, l + 1.5),
                ("T_L2", 4, l + 0.7, l + 1.5),
            ] {
                let o = order(&[e0[i], e1[i]], &hs);
                let ok = o >= lo && o <= hi;
                pass &= ok;
                parts.push(format!("{name} {o:.2}{}", if ok { "" } else { " (out of band)" }));
            }
            details.push(format!("ell = {ell} {}: {}", variant.name(), parts.join(", ")));
        }
    }
    v.record("1", "h-convergence orders over N = 310 -> 1000 (dG in [l-0.3, l+0.5], L2 in [l+0.7, l+1.5])", pass, &details);
    v.record(
        "1-runtime",
        "h-convergence study completes in under 10 minutes",
        elapsed < 600.0,
        &[format!("{elapsed:.0} s for {} runs", results.len())],
    );

    let mut pass = true;
    let mut details = Vec::new();
    for r in &results {
        let ok = converged(r) && r.iterations <= 8;
        pass &= ok;
        details.push(format!("ell = {} N = {} {}: {}", r.spec.ell, r.spec.cells, r.spec.variant.name(), fmt_run(r)));
    }
    v.record("3", "vol and plain converge in at most 8 Picard iterations", pass, &details);
}

fn criterion_2(v: &mut Verdicts) {
    let mut cfg = ExperimentConfig::new(ExperimentKind::ConvergenceP, vec![100], (1..=5).collect());
    cfg.variants = vec!["vol".into()];
    let results = run(&cfg, true);
    let mut pass = results.iter().all(converged);
    let mut details = Vec::new();
    let table: Vec<[f64; 7]> = (1..=5).map(|ell| errors(find(&results, TransportVariant::Vol, ell, 100)[0])).collect();
    for (ell, e) in table.iter().enumerate() {
        details.push(format!("ell = {}: {}", ell + 1, e.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(" ")));
    }
    for (i, name) in NORMS.iter().enumerate() {
        let decreasing = table.windows(2).all(|w| w[1][i] < w[0][i]);
        pass &= decreasing;
        if !decreasing {
            details.push(format!("{name} does not decrease strictly"));
        }
    }
    for (i, name) in NORMS.iter().enumerate().filter(|(_, n)| n.ends_with("L2")) {
        let factor = (table[0][i] / table[4][i]).powf(0.25);
        let ok = factor >= 3.0;
        pass &= ok;
        details.push(format!("{name}: mean reduction x{factor:.1} per degree{}", if ok { "" } else { " (below x3)" }));
    }
    v.record("2", "degree convergence on 100 cells, ell = 1..5", pass, &details);
}

fn criterion_4(v: &mut Verdicts) {
    let cfg = load("robustness_theta.toml");
    let results = run(&cfg, false);
    let at = |variant: TransportVariant, theta: f64| {
        results
            .iter()
            .find(|r| r.spec.variant == variant && r.spec.point.theta == Some(theta))
            .expect("theta run")
    };
    let mut pass = true;
    let mut details = Vec::new();
    for variant in TransportVariant::ALL {
        let row: Vec<String> = THETAS.iter().map(|&t| fmt_run(at(variant, t))).collect();
        details.push(format!("{}: {}", variant.name(), row.join(" | ")));
    }
    for &theta in &THETAS {
        let stab = at(TransportVariant::Stab, theta);
        if !(converged(stab) && stab.iterations <= 16) {
            pass = false;
            details.push(format!("stab at theta = {theta:e}: {} (needs convergence within 16)", fmt_run(stab)));
        }
        let plain = at(TransportVariant::Plain, theta);
        if theta >= 1e-8 && !converged(plain) {
            pass = false;
            details.push(format!("plain at theta = {theta:e}: {}", fmt_run(plain)));
        }
        let vol = at(TransportVariant::Vol, theta);
        if theta >= 1e-6 && !converged(vol) {
            pass = false;
            details.push(format!("vol at theta = {theta:e}: {}", fmt_run(vol)));
        }
        let old = at(TransportVariant::Old, theta);
        if theta <= 1e-2 && old.status != RunStatus::Picard(PicardStatus::MaxIter) {
            pass = false;
            details.push(format!("old at theta = {theta:e}: {} (expected max_iter)", fmt_run(old)));
        }
    }
    for (k, &theta) in THETAS.iter().enumerate() {
        let e = errors(at(TransportVariant::Stab, theta));
        let mut outside = Vec::new();
        for (i, name) in NORMS[..6].iter().enumerate() {
            if !within_factor(e[i], THETA_STAB_ERRORS[k][i], 10.0) {
                outside.push(format!("{name} {:.3e} vs {:.3e}", e[i], THETA_STAB_ERRORS[k][i]));
            }
        }
        if !outside.is_empty() {
            pass = false;
            details.push(format!("stab errors outside x10 at theta = {theta:e}: {}", outside.join(", ")));
        }
    }
    let p = errors(at(TransportVariant::Stab, 1e-10))[2];
    details.push(format!("stab p_L2 at theta = 1e-10: {p:.3e} (bound 1.5e-5)"));
    pass &= p <= 1.5e-5;
    v.record("4", "robustness for vanishing thermal conductivity (ell = 3, N = 310)", pass, &details);
}

/// Pressure and temperature L2 errors within `k` of the references at each
/// mesh, and their least-squares orders over the three meshes.
fn error_band(
    results: &[RunResult],
    variant: TransportVariant,
    p_ref: &[f64; 3],
    t_ref: &[f64; 3],
    k: f64,
    details: &mut Vec<String>,
) -> (bool, [f64; 2]) {
    let runs: Vec<&RunResult> = [100, 310, 1000].iter().map(|&n| find(results, variant, 2, n)[0]).collect();
    let hs: Vec<f64> = runs.iter().map(|r| r.h).collect();
    let mut pass = true;
    let mut parts = Vec::new();
    for (j, r) in runs.iter().enumerate() {
        let e = errors(r);
        let (okp, okt) = (within_factor(e[2], p_ref[j], k), within_factor(e[4], t_ref[j], k));
        pass &= okp && okt;
        parts.push(format!(
            "N = {}: p {:.3e}/{:.3e}{} T {:.3e}/{:.3e}{}",
            r.spec.cells,
            e[2],
            p_ref[j],
            if okp { "" } else { "!" },
            e[4],
            t_ref[j],
            if okt { "" } else { "!" }
        ));
    }
    let ep: Vec<f64> = runs.iter().map(|r| errors(r)[2]).collect();
    let et: Vec<f64> = runs.iter().map(|r| errors(r)[4]).collect();
    details.push(format!("{} errors (ours/reference, ! outside x{k}): {}", variant.name(), parts.join("; ")));
    (pass, [order(&ep, &hs), order(&et, &hs)])
}

fn criterion_5(v: &mut Verdicts) {
    let cfg = load("robustness_kappa.toml");
    let results = run(&cfg, false);
    let mut pass = true;
    let mut details = Vec::new();
    for r in &results {
        let ok = converged(r) && r.iterations <= 6;
        pass &= ok;
        details.push(format!("N = {} {}: {}", r.spec.cells, r.spec.variant.name(), fmt_run(r)));
    }
    for variant in TransportVariant::ALL {
        let (ok, orders) = error_band(&results, variant, &KAPPA_P_L2, &KAPPA_T_L2, 5.0, &mut details);
        pass &= ok;
        let orders_ok = orders.iter().all(|&o| o >= 1.8);
        pass &= orders_ok;
        details.push(format!(
            "{} L2 orders: p {:.2}, T {:.2}{}",
            variant.name(),
            orders[0],
            orders[1],
            if orders_ok { "" } else { " (below 1.8)" }
        ));
    }
    v.record("5", "robustness for vanishing permeability (ell = 2)", pass, &details);
}

fn criterion_6(v: &mut Verdicts) {
    let cfg = load("robustness_thetakappa.toml");
    let results = run(&cfg, false);
    let mut pass = true;
    let mut details = Vec::new();
    for (vi, variant) in TransportVariant::ALL.into_iter().enumerate() {
        let mut row = Vec::new();
        for (j, cells) in [100, 310, 1000].into_iter().enumerate() {
            let r = find(&results, variant, 2, cells)[0];
            let limit = 2 * THETAKAPPA_ITERATIONS[vi][j];
            let ok = converged(r) && r.iterations <= limit;
            pass &= ok;
            row.push(format!("{} (<= {limit}){}", fmt_run(r), if ok { "" } else { "!" }));
        }
        details.push(format!("{}: {}", variant.name(), row.join(" | ")));
    }
    for variant in TransportVariant::ALL {
        let (ok, _) = error_band(&results, variant, &THETAKAPPA_P_L2, &THETAKAPPA_T_L2, 5.0, &mut details);
        pass &= ok;
    }
    v.record("6", "robustness for vanishing conductivity and permeability (ell = 2)", pass, &details);
}

fn criterion_7(v: &mut Verdicts) {
    let cfg = load("superconvergence.toml");
    let results = run(&cfg, false);
    let runs: Vec<&RunResult> = [100, 310, 1000].iter().map(|&n| find(&results, TransportVariant::Vol, 2, n)[0]).collect();
    let hs: Vec<f64> = runs.iter().map(|r| r.h).collect();
    let u_l2: Vec<f64> = runs.iter().map(|r| errors(r)[0]).collect();
    let u_dg: Vec<f64> = runs.iter().map(|r| errors(r)[1]).collect();
    let (o_l2, o_dg) = (order(&u_l2, &hs), order(&u_dg, &hs));
    let pass = runs.iter().all(|r| converged(r)) && o_dg >= 2.7 && o_l2 >= 3.6;
    v.record(
        "7",
        "displacement superconvergence (nu_u = 0.1, nu_p = nu_T = 1e4, ell = 2)",
        pass,
        &[
            format!("u_dG {}: order {o_dg:.2} (>= 2.7)", u_dg.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(" ")),
            format!("u_L2 {}: order {o_l2:.2} (>= 3.6)", u_l2.iter().map(|e| format!("{e:.3e}")).collect::<Vec<_>>().join(" ")),
        ],
    );
}

fn lloyd(n: usize, seed: u64) -> Arc<PolyMesh> {
    Arc::new(build_mesh(n, seed, 100).expect("mesh"))
}

fn disc_with(mesh: Arc<PolyMesh>, ell: usize, material: Material) -> Discretization {
    let params = ModelParams::uniform(material, mesh.n_cells());
    Discretization::new(mesh, ell, ell, params, PenaltyParams::default()).expect("discretization")
}

fn random_vec(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn zero_s(_: [f64; 2]) -> f64 {
    0.0
}

fn zero_v(_: [f64; 2]) -> [f64; 2] {
    [0.0, 0.0]
}

/// Relative defects of the plain and stabilized transport identities for one
/// `(T, p)` pair, with the right-hand sides computed by quadrature.
fn identity_defects(disc: &Discretization, t: &[f64], p: &[f64]) -> (f64, f64) {
    let space = disc.space();
    let mesh = space.mesh();
    let eta = EtaField::new(space, p, disc.params());
    let opts = TransportOptions::default();
    let plain = assemble_c(disc, TransportVariant::Plain, opts, &eta, None, &zero_s).expect("plain").0;
    let stab = assemble_c(disc, TransportVariant::Stab, opts, &eta, None, &zero_s).expect("stab").0;
    let order = disc.volume_order();
    let tv = |c: usize, x: [f64; 2]| space.evaluate(t, c, x).value[0];
    let mut volume = 0.0;
    for c in 0..mesh.n_cells() {
        for (x, w) in space.element_quadrature(c, order).iter() {
            volume -= 0.5 * w * eta.value_and_div(c, x).1 * tv(c, x).powi(2);
        }
    }
    let (mut faces, mut upwind, mut inflow) = (0.0, 0.0, 0.0);
    for f in 0..mesh.n_faces() {
        let face = mesh.face(f);
        let n = face.normal;
        for (x, w) in space.face_quadrature(f, order).iter() {
            let ep = eta.value(face.owner, x);
            let tp = tv(face.owner, x);
            match face.neighbor {
                Some(nb) => {
                    let em = eta.value(nb, x);
                    let tm = tv(nb, x);
                    let jump_n = (ep[0] - em[0]) * n[0] + (ep[1] - em[1]) * n[1];
                    faces += 0.5 * w * jump_n * 0.5 * (tp * tp + tm * tm);
                    let avg_n = 0.5 * ((ep[0] + em[0]) * n[0] + (ep[1] + em[1]) * n[1]);
                    upwind += w * avg_n.abs() / 2.0 * (tp - tm).powi(2);
                }
                None => {
                    let en = ep[0] * n[0] + ep[1] * n[1];
                    faces += 0.5 * w * en * tp * tp;
                    inflow += w * (en.abs() - en) / 2.0 * tp * tp;
                }
            }
        }
    }
    let b_half = 0.5 * b_functional(mesh, order, &|c, x| tv(c, x).powi(2), &|c, x| eta.value_and_div(c, x));
    let scale = volume.abs() + faces.abs() + upwind + inflow;
    let plain_defect = (plain.bilinear(t, t) - (volume + faces)).abs() / scale;
    let stab_defect = (stab.bilinear(t, t) - (b_half + upwind + inflow)).abs() / scale;
    (plain_defect, stab_defect)
}

fn criterion_8(v: &mut Verdicts) {
    let started = Instant::now();
    let mesh = lloyd(20, 19);
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let (mut worst_plain, mut worst_stab, mut pairs) = (0.0f64, 0.0f64, 0);
    for ell in 1..=3 {
        let disc = disc_with(mesh.clone(), ell, Material::reference());
        let n = disc.space().n_dofs();
        for _ in 0..17 {
            let (t, p) = (random_vec(n, &mut rng), random_vec(n, &mut rng));
            let (a, b) = identity_defects(&disc, &t, &p);
            worst_plain = worst_plain.max(a);
            worst_stab = worst_stab.max(b);
            pairs += 1;
        }
    }
    let elapsed = started.elapsed().as_secs_f64();
    let pass = worst_plain <= 1e-10 && worst_stab <= 1e-10 && pairs >= 50 && elapsed < 30.0;
    v.record(
        "8",
        "transport energy identities on a 20-cell mesh, ell = 1..3",
        pass,
        &[format!(
            "{pairs} pairs, worst relative defect plain {worst_plain:.1e}, stab {worst_stab:.1e} (<= 1e-10), {elapsed:.1} s (< 30 s)"
        )],
    );
}

fn dense(coo: &Coo) -> Mat<f64> {
    let d = coo.to_dense();
    Mat::from_fn(coo.nrows(), coo.ncols(), |i, j| d[i][j])
}

fn max_asymmetry(coo: &Coo) -> f64 {
    let d = coo.to_dense();
    let mut worst: f64 = 0.0;
    for i in 0..d.len() {
        for j in 0..i {
            worst = worst.max((d[i][j] - d[j][i]).abs());
        }
    }
    worst
}

fn eig_range(coo: &Coo) -> (f64, f64) {
    let e = dense(coo).self_adjoint_eigenvalues(Side::Lower).expect("eigenvalues");
    (e[0], e[e.len() - 1])
}

fn criterion_9(v: &mut Verdicts) {
    let mesh = lloyd(100, 1);
    let disc = disc_with(mesh, 2, Material::reference());
    let mut pass = true;
    let mut details = Vec::new();
    let at = assemble_at(&disc, &zero_s).0;
    let ap = assemble_ap(&disc, &zero_s).0;
    let ae = assemble_ae(&disc, &zero_v).0;
    let m = assemble_m(&disc);
    let d = assemble_d(&disc);
    for (name, coo) in [("A_T", &at), ("A_p", &ap), ("A_e", &ae), ("M", &m), ("D", &d)] {
        let asym = max_asymmetry(coo);
        let (lo, hi) = eig_range(coo);
        let definite = name.starts_with('A');
        let ok = asym <= 1e-12 && if definite { lo > 0.0 } else { lo >= -1e-12 * hi.max(1.0) };
        pass &= ok;
        details.push(format!(
            "{name}: asymmetry {asym:.1e}, eigenvalues [{lo:.3e}, {hi:.3e}] ({})",
            if definite { "positive definite" } else { "semidefinite" }
        ));
    }

    let case = ManufacturedCase::trigonometric();
    let problem = case.problem(disc.clone(), TransportVariant::Stab, TransportOptions::default()).expect("problem");
    let p = disc.space().project_scalar(|x| (2.0 * x[0]).sin() * x[1]);
    let eta = EtaField::new(disc.space(), &p, disc.params());
    let system = assemble_global(&problem, TransportState { eta: &eta, t_prev: None }).expect("system");
    let l = &system.layout;
    let a = &system.matrix;
    let (cp, ri, vals) = (a.symbolic().col_ptr(), a.symbolic().row_idx(), a.val());
    let mut up = std::collections::HashMap::new();
    let mut pu = std::collections::HashMap::new();
    for j in 0..a.ncols() {
        for k in cp[j]..cp[j + 1] {
            let i = ri[k];
            if l.u.contains(&i) && l.phi.contains(&j) {
                *up.entry((i, j)).or_insert(0.0) += vals[k];
            } else if l.phi.contains(&i) && l.u.contains(&j) {
                *pu.entry((j, i)).or_insert(0.0) += vals[k];
            }
        }
    }
    let keys: HashSet<(usize, usize)> = up.keys().chain(pu.keys()).copied().collect();
    let skew_defect = keys
        .iter()
        .map(|k| (up.get(k).copied().unwrap_or(0.0) + pu.get(k).copied().unwrap_or(0.0)).abs())
        .fold(0.0, f64::max);
    pass &= skew_defect == 0.0;
    details.push(format!("(u, phi) coupling: largest |A_u,phi + A_phi,u^T| = {skew_defect:e} over {} entries", keys.len()));

    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let mut worst: f64 = 0.0;
    for _ in 0..3 {
        let p = random_vec(disc.space().n_dofs(), &mut rng);
        let eta = EtaField::new(disc.space(), &p, disc.params());
        let (uw, inflow) = assemble_upwind_parts(&disc, &eta);
        for coo in [uw, inflow] {
            let (lo, hi) = eig_range(&coo);
            worst = worst.min(lo / hi.max(1.0));
            pass &= max_asymmetry(&coo) <= 1e-12 && lo >= -1e-12 * hi.max(1.0);
        }
    }
    details.push(format!("upwind and inflow forms: smallest scaled eigenvalue {worst:.1e}"));
    v.record("9", "operator symmetry, definiteness and coupling skewness (N = 100, ell = 2)", pass, &details);
}

fn criterion_10(v: &mut Verdicts) {
    let mut cfg = ExperimentConfig::new(ExperimentKind::ConvergenceP, vec![100], vec![1, 2, 3]);
    cfg.cf = Some(0.0);
    cfg.case = thm::config::CaseChoice::Polynomial;
    let results = run(&cfg, false);
    let mut pass = true;
    let mut details = Vec::new();
    for r in &results {
        let worst = errors(r).into_iter().fold(0.0, f64::max);
        let ok = converged(r) && worst <= 1e-8;
        pass &= ok;
        details.push(format!("ell = {}: {}, largest error norm {worst:.2e}", r.spec.ell, fmt_run(r)));
    }
    v.record("10", "patch test with polynomial solutions, ell = 1..3 (<= 1e-8)", pass, &details);
}

fn criterion_11(v: &mut Verdicts) {
    let mut nonlinear = ExperimentConfig::new(ExperimentKind::ConvergenceH, vec![100, 310], vec![2]);
    nonlinear.variants = vec!["vol".into(), "stab".into()];
    let mut pass = true;
    let mut details = Vec::new();
    for (name, cfg) in [("patch.toml", load("patch.toml")), ("nonlinear h-sweep", nonlinear)] {
        let a = to_csv(&run(&cfg, false), true).expect("csv");
        let b = to_csv(&run(&cfg, false), true).expect("csv");
        let same = a.as_bytes() == b.as_bytes();
        pass &= same;
        details.push(format!("{name}: {} bytes, {}", a.len(), if same { "identical" } else { "different" }));
    }
    v.record("11", "re-running a configuration reproduces the CSV byte for byte", pass, &details);
}

fn main() {
    let selected: Option<HashSet<String>> =
        std::env::var("THM_ACCEPTANCE").ok().map(|s| s.split(',').map(|x| x.trim().to_owned()).collect());
    let wants = |id: &str| selected.as_ref().is_none_or(|s| s.contains(id));
    let mut v = Verdicts { lines: Vec::new() };
    let started = Instant::now();
    let criteria: [(&str, fn(&mut Verdicts)); 11] = [
        ("mesh", criterion_mesh),
        ("8", criterion_8),
        ("9", criterion_9),
        ("10", criterion_10),
        ("11", criterion_11),
        ("1", criteria_1_and_3),
        ("2", criterion_2),
        ("7", criterion_7),
        ("5", criterion_5),
        ("6", criterion_6),
        ("4", criterion_4),
    ];
    let long = selected.is_some() || std::env::var("THM_ACCEPTANCE_LONG").is_ok_and(|s| s == "1");
    for (id, f) in criteria {
        if id == "4" && !long {
            v.record(
                "4",
                "robustness for vanishing thermal conductivity (ell = 3, N = 310)",
                false,
                &["not evaluated: long sweep (several hours on one core); run with THM_ACCEPTANCE=4 or THM_ACCEPTANCE_LONG=1".into()],
            );
        } else if wants(id) || (id == "1" && wants("3")) {
            f(&mut v);
        }
    }
    let passed = v.lines.iter().filter(|(p, _)| *p).count();
    println!();
    println!("acceptance summary: {passed} of {} checks pass ({:.0} s)", v.lines.len(), started.elapsed().as_secs_f64());
    for (_, line) in &v.lines {
        println!("  {line}");
    }
}
