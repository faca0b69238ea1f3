//! End-to-end acceptance checks.
//!
//! Each test verifies one headline quantitative claim at its stated tolerance
//! and prints a single `[PASS]`/`[FAIL]` line (run with `--nocapture` to see
//! them). Monte Carlo checks compare against 3 batch-means standard errors
//! unless noted; closed-form checks use fixed absolute tolerances.

use clusteriv::estimator::{ar1_cross_moment, ar1_panel_q};
use clusteriv::simulation::{DgpSpec, McConfig, McEngine, ShockModel};
use clusteriv::{
    build_astar, build_projection, decomposition_experiment, nickell_bias_plugin,
    quadratic_clt_experiment, CenteringMethod, CenteringMode, ClusterPartition, ControlMatrix,
    ExclusionMatrix, ExclusionRecipe, ShockDistribution,
};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::time::Instant;

fn report(name: &str, pass: bool, detail: &str) {
    let tag = if pass { "PASS" } else { "FAIL" };
    println!("[{tag}] {name}: {detail}");
    assert!(pass, "{name}: {detail}");
}

fn mc(dgp: DgpSpec, replications: usize, seed: u64) -> McConfig {
    McConfig {
        dgp,
        shocks: ShockModel::default(),
        replications,
        seed,
        alpha: 0.05,
        recipe: None,
        mode: None,
        method: None,
        beta0: None,
    }
}

// ---------------------------------------------------------------------------
// 1. The three constructions agree on random instances.
// ---------------------------------------------------------------------------

/// One random instance: unbalanced clusters, random controls (intercept,
/// cluster indicators, or dense), random exclusion pattern, both modes.
fn random_instance_agrees(
    seed: u64,
    min_n: usize,
    max_n: usize,
    max_k: usize,
    tol: f64,
) -> (usize, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Cluster sizes in [1, 6] until the target size is reached.
    let target = rng.random_range(min_n..=max_n);
    let mut sizes = Vec::new();
    let mut total = 0;
    while total < target {
        let cap = (target - total).min(6);
        let t = rng.random_range(1..=cap);
        sizes.push(t);
        total += t;
    }
    let assignment: Vec<usize> = sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &t)| std::iter::repeat_n(i, t))
        .collect();
    let partition = ClusterPartition::new(assignment.clone()).unwrap();
    let n = partition.n();

    let controls = match rng.random_range(0..3) {
        0 => ControlMatrix::intercept(n).unwrap(),
        1 if max_k < 5 => ControlMatrix::group_indicators(assignment).unwrap(),
        _ => {
            let k = rng.random_range(max_k.min(2)..=max_k);
            let w = DMatrix::from_fn(n, k, |_, j| {
                if j == 0 {
                    1.0
                } else {
                    rng.random::<f64>() * 2.0 - 1.0
                }
            });
            ControlMatrix::dense(w).unwrap()
        }
    };
    let proj = build_projection(controls).unwrap();

    // Random subset of within-cluster off-diagonal pairs.
    let share = rng.random::<f64>() * 0.6;
    let mut pairs = Vec::new();
    for i in 0..partition.num_clusters() {
        let members = partition.members(i).to_vec();
        for &r in &members {
            for &c in &members {
                if r != c && rng.random::<f64>() < share {
                    pairs.push((r, c));
                }
            }
        }
    }
    let excl = ExclusionMatrix::from_zero_pairs(partition, pairs).unwrap();

    let mut worst: f64 = 0.0;
    for mode in [CenteringMode::Outcome, CenteringMode::Design] {
        let exact = build_astar(&proj, &excl, mode, CenteringMethod::VecOracle)
            .unwrap()
            .to_dense();
        for method in [CenteringMethod::LeaveOut, CenteringMethod::BlockB] {
            let a = build_astar(&proj, &excl, mode, method).unwrap();
            worst = worst.max((a.to_dense() - &exact).amax());
            let v = a.validate_class(proj.controls(), &excl);
            worst = worst.max(v.annihilation).max(v.exclusion);
        }
    }
    assert!(
        worst <= tol,
        "instance seed {seed} (n = {n}): worst deviation {worst:.3e} > {tol:.1e}"
    );
    (n, worst)
}

#[test]
fn acceptance_1_methods_agree_on_random_instances() {
    let t0 = Instant::now();
    let tol = 1e-8;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    // 70 small instances, 20 with many controls, 10 at the size cap.
    for seed in 0..70u64 {
        let (_, w) = random_instance_agrees(1000 + seed, 9, 40, 3, tol);
        worst = worst.max(w);
        count += 1;
    }
    for seed in 0..20u64 {
        let (_, w) = random_instance_agrees(2000 + seed, 20, 35, 10, tol);
        worst = worst.max(w);
        count += 1;
    }
    for seed in 0..10u64 {
        let (n, w) = random_instance_agrees(3000 + seed, 60, 100, 2, tol);
        assert!(n <= 100);
        worst = worst.max(w);
        count += 1;
    }
    let elapsed = t0.elapsed();
    report(
        "1 three constructions agree (100 random instances, n <= 100, k <= 10)",
        count == 100 && worst <= tol && elapsed.as_secs() < 60,
        &format!("worst deviation {worst:.2e} <= 1e-8, {elapsed:.1?} < 60s"),
    );
}

// ---------------------------------------------------------------------------
// 2. Closed-form traces.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_2_closed_form_traces() {
    let tol = 1e-10;
    let build = |clusters: usize, periods: usize, recipe: &ExclusionRecipe| {
        let partition = ClusterPartition::balanced(clusters, periods).unwrap();
        let controls =
            ControlMatrix::group_indicators(partition.assignment().to_vec()).unwrap();
        let proj = build_projection(controls).unwrap();
        let times: Vec<i64> = (0..partition.n())
            .map(|l| (l % periods + 1) as i64)
            .collect();
        let excl =
            ExclusionMatrix::from_recipe(partition, recipe, Some(&times), None).unwrap();
        (proj, excl)
    };

    // Cluster demeaning: tr(M) = n - N.
    let (proj, _) = build(50, 3, &ExclusionRecipe::Unrestricted);
    let m_trace_err = (proj.trace() - (150.0 - 50.0)).abs();

    // Lagged-outcome exclusion at T = 3: per-cluster trace
    // T - 1 - sum_{t=2}^{T} 1/t = 2 - 5/6 = 7/6.
    let (proj3, excl3) = build(50, 3, &ExclusionRecipe::WeakExogeneity);
    let a3 = build_astar(&proj3, &excl3, CenteringMode::Outcome, CenteringMethod::LeaveOut)
        .unwrap();
    let per3 = a3.per_cluster_trace();
    let weak3_err = per3
        .iter()
        .map(|t| (t - 7.0 / 6.0).abs())
        .fold(0.0f64, f64::max)
        .max((a3.trace() - 50.0 * 7.0 / 6.0).abs());

    // Same at T = 5: 4 - (1/2 + 1/3 + 1/4 + 1/5) = 163/60.
    let (proj5, excl5) = build(20, 5, &ExclusionRecipe::WeakExogeneity);
    let a5 = build_astar(&proj5, &excl5, CenteringMode::Outcome, CenteringMethod::LeaveOut)
        .unwrap();
    let weak5_err = a5
        .per_cluster_trace()
        .iter()
        .map(|t| (t - 163.0 / 60.0).abs())
        .fold(0.0f64, f64::max);

    // One-period feedback at T = 3: per-cluster trace T - 1 - 1/T = 5/3.
    let (projh, exclh) = build(50, 3, &ExclusionRecipe::Horizon(1));
    let ah = build_astar(&projh, &exclh, CenteringMode::Outcome, CenteringMethod::LeaveOut)
        .unwrap();
    let horizon_err = ah
        .per_cluster_trace()
        .iter()
        .map(|t| (t - 5.0 / 3.0).abs())
        .fold(0.0f64, f64::max);

    // Contemporaneous-only exclusion leaves nothing: A* = 0.
    let (projc, exclc) = build(20, 4, &ExclusionRecipe::Contemporaneous);
    let ac = build_astar(&projc, &exclc, CenteringMode::Outcome, CenteringMethod::LeaveOut)
        .unwrap();
    let contemp_max = ac.to_dense().amax();

    // tr(A*) equals ||A*||_F^2 for the constrained projection.
    let (d, o) = a3.frobenius_sq_split();
    let pythagoras_err = (a3.trace() - (d + o)).abs();

    let worst = m_trace_err
        .max(weak3_err)
        .max(weak5_err)
        .max(horizon_err)
        .max(contemp_max)
        .max(pythagoras_err);
    report(
        "2 closed-form traces (7/6, 163/60, 5/3, n-N, zero matrix, trace = ||A||^2)",
        worst <= tol,
        &format!("worst error {worst:.2e} <= 1e-10"),
    );
}

// ---------------------------------------------------------------------------
// 3. Lagged-outcome bias: least squares matches the plug-in, the centered
//    estimator is unbiased.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_3_lagged_outcome_bias() {
    let t0 = Instant::now();
    let (clusters, periods, beta, sigma2) = (2000usize, 3usize, 0.5f64, 1.0f64);
    let config = mc(
        DgpSpec::DynamicPanel {
            clusters,
            periods,
            beta,
            sigma_alpha: 1.0,
        },
        2000,
        20260815,
    );
    let (rep, _) = McEngine::new(config).unwrap().run().unwrap();

    let partition = ClusterPartition::balanced(clusters, periods).unwrap();
    let proj = build_projection(
        ControlMatrix::group_indicators(partition.assignment().to_vec()).unwrap(),
    )
    .unwrap();
    let times: Vec<i64> = (0..partition.n())
        .map(|l| (l % periods + 1) as i64)
        .collect();
    let q = ar1_panel_q(beta, sigma2, periods);
    let plugin = nickell_bias_plugin(&proj, &partition, ar1_cross_moment(&times, beta, sigma2), q);

    // The plug-in itself has a closed form at T = 3, beta = 1/2: -15/28.
    let plugin_exact_err = (plugin - (-15.0 / 28.0)).abs();
    let ls_dev = (rep.mean_bias_ls - plugin).abs() / rep.mc_se_bias_ls;
    let astar_dev = rep.mean_bias_astar.abs() / rep.mc_se_bias_astar;
    let elapsed = t0.elapsed();
    report(
        "3 lagged-outcome bias (N=2000, T=3, beta=0.5, R=2000)",
        plugin_exact_err <= 1e-12 && ls_dev <= 3.0 && astar_dev <= 3.0 && elapsed.as_secs() < 300,
        &format!(
            "plug-in {plugin:.6} (= -15/28), LS bias {:.6} at {ls_dev:.2} se, \
             centered bias {:.6} at {astar_dev:.2} se, {elapsed:.1?} < 5min",
            rep.mean_bias_ls, rep.mean_bias_astar
        ),
    );
}

// ---------------------------------------------------------------------------
// 4. Jackknife variance: unbiased for block-diagonal centering, conservative
//    otherwise, and exactly equal to the score-based variance when
//    block-diagonal.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_4_jackknife_variance() {
    // Block-diagonal case: cluster fixed effects only.
    let config = mc(
        DgpSpec::DynamicPanel {
            clusters: 300,
            periods: 3,
            beta: 0.5,
            sigma_alpha: 1.0,
        },
        2000,
        99,
    );
    let (bd, _) = McEngine::new(config).unwrap().run().unwrap();
    let bd_dev = bd.jackknife_gap_mean.abs() / bd.jackknife_gap_se;
    let cr_rel = bd.mean_abs_vjk_minus_vcr / bd.mean_v_jackknife;

    // Non-block-diagonal case: two-way fixed effects with feedback.
    let config = mc(
        DgpSpec::TwoWayFe {
            students: 120,
            beta: 1.0,
            feedback: 1.0,
            sigma_alpha: 1.0,
            sigma_teacher: 1.0,
        },
        2000,
        55,
    );
    let (tw, _) = McEngine::new(config).unwrap().run().unwrap();
    let tw_ratio = tw.jackknife_gap_mean / tw.jackknife_gap_se;

    report(
        "4 jackknife variance (unbiased block-diagonal, conservative two-way, = score form)",
        bd_dev <= 3.0 && cr_rel <= 1e-12 && tw_ratio >= -3.0,
        &format!(
            "block-diagonal gap at {bd_dev:.2} se, |V_jk - V_cr|/V_jk = {cr_rel:.1e}, \
             two-way gap at {tw_ratio:+.2} se (>= -3)"
        ),
    );
}

// ---------------------------------------------------------------------------
// 5. Score-test size, confidence-set coverage, and the weak-identification
//    set taxonomy.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_5_test_inversion() {
    // Strongly identified panel: size close to nominal, bounded sets.
    let config = mc(
        DgpSpec::DynamicPanel {
            clusters: 500,
            periods: 5,
            beta: 0.5,
            sigma_alpha: 1.0,
        },
        5000,
        777,
    );
    let (strong, _) = McEngine::new(config).unwrap().run().unwrap();

    // Weakly identified: unit root, two periods, few clusters.
    let config = mc(
        DgpSpec::DynamicPanel {
            clusters: 25,
            periods: 2,
            beta: 1.0,
            sigma_alpha: 0.0,
        },
        2000,
        4242,
    );
    let (weak, _) = McEngine::new(config).unwrap().run().unwrap();

    let size_ok = strong.ar_size >= 0.035 && strong.ar_size <= 0.065;
    let covers_estimate =
        strong.set_covers_estimate_share == 1.0 && weak.set_covers_estimate_share == 1.0;
    let kinds = weak.kind_counts;
    let all_kinds =
        kinds.bounded_interval > 0 && kinds.complement_of_interval > 0 && kinds.whole_line > 0;
    report(
        "5 test inversion (size in [0.035, 0.065], estimate always covered, all set kinds)",
        size_ok && covers_estimate && all_kinds,
        &format!(
            "size {:.4}, estimate covered {:.0}%/{:.0}%, weak-design kinds \
             {}/{}/{} (bounded/complement/line), weak coverage {:.3}",
            strong.ar_size,
            100.0 * strong.set_covers_estimate_share,
            100.0 * weak.set_covers_estimate_share,
            kinds.bounded_interval,
            kinds.complement_of_interval,
            kinds.whole_line,
            weak.set_coverage,
        ),
    );
}

// ---------------------------------------------------------------------------
// 6. Distribution theory: the hollow-quadratic CLT and the linear/quadratic
//    decomposition with its cross-cluster interaction term.
// ---------------------------------------------------------------------------

#[test]
fn acceptance_6_distribution_experiments() {
    // (a) Hollow quadratic CLT over 200 clusters of mixed sizes.
    let sizes: Vec<usize> = (0..200).map(|i| 2 + i % 4).collect();
    let mut clt_ok = true;
    let mut clt_detail = String::new();
    for dist in [
        ShockDistribution::Gaussian,
        ShockDistribution::RademacherMixture,
    ] {
        let rep = quadratic_clt_experiment(&sizes, dist, 5000, 31337).unwrap();
        clt_ok &= (rep.variance_ratio - 1.0).abs() <= 0.10 && rep.ks_statistic <= 0.03;
        clt_detail.push_str(&format!(
            "{dist:?}: ratio {:.3}, KS {:.4}; ",
            rep.variance_ratio, rep.ks_statistic
        ));
    }

    // (b) Decomposition on the two-way design, strict exogeneity: the linear
    // and quadratic parts are uncorrelated and the interaction term vanishes.
    let two_way = |feedback: f64| {
        mc(
            DgpSpec::TwoWayFe {
                students: 120,
                beta: 1.0,
                feedback,
                sigma_alpha: 1.0,
                sigma_teacher: 1.0,
            },
            3000,
            808,
        )
    };
    let engine = McEngine::new(two_way(0.0)).unwrap();
    let strict = decomposition_experiment(&engine, 3000).unwrap();
    let strict_ok = strict.cov_linear_quadratic.abs() <= 3.0 * strict.cov_linear_quadratic_se
        && strict.correction_mean.abs() <= 3.0 * strict.correction_se
        && strict.identity_max_error <= 1e-9
        && strict.ks_statistic <= 0.05;

    // (c) Block-diagonal centering has no cross-cluster blocks at all, so the
    // interaction term is identically zero.
    let engine_bd = McEngine::new(mc(
        DgpSpec::DynamicPanel {
            clusters: 200,
            periods: 3,
            beta: 0.5,
            sigma_alpha: 1.0,
        },
        500,
        31,
    ))
    .unwrap();
    let bd = decomposition_experiment(&engine_bd, 500).unwrap();
    let bd_ok = bd.correction_mean == 0.0 && bd.correction_se == 0.0;

    // (d) Feedback through the two-way links: the interaction term is
    // nonzero, detected, and matches its analytic expectation
    // g^2 s^4 sum_{i != j} sum_{q, q'} A_ij[q'+1, q] A_ji[q+1, q'].
    let (feedback, sigma2) = (1.0f64, 1.0f64);
    let engine_fb = McEngine::new(two_way(feedback)).unwrap();
    let mut exact = 0.0;
    for (i, j, block) in engine_fb.astar.iter_blocks() {
        if i != j {
            if let Some(rev) = engine_fb.astar.block(j, i) {
                for q in 0..2 {
                    for qp in 0..2 {
                        exact += feedback * feedback
                            * sigma2
                            * sigma2
                            * block[(qp + 1, q)]
                            * rev[(q + 1, qp)];
                    }
                }
            }
        }
    }
    let fb = decomposition_experiment(&engine_fb, 3000).unwrap();
    let fb_detected = fb.correction_mean.abs() > 3.0 * fb.correction_se;
    let fb_matches = (fb.correction_mean - exact).abs() <= 3.0 * fb.correction_se;

    report(
        "6 distribution experiments (quadratic CLT, decomposition, interaction term)",
        clt_ok && strict_ok && bd_ok && fb_detected && fb_matches,
        &format!(
            "{clt_detail}strict: cov(L,Q) at {:.2} se, interaction at {:.2} se; \
             block-diagonal: interaction identically 0; feedback: interaction {:.4} \
             vs analytic {exact:.4} ({:.2} se apart, {:.0} se from zero)",
            strict.cov_linear_quadratic.abs() / strict.cov_linear_quadratic_se,
            strict.correction_mean.abs() / strict.correction_se,
            fb.correction_mean,
            (fb.correction_mean - exact).abs() / fb.correction_se,
            fb.correction_mean.abs() / fb.correction_se,
        ),
    );
}

// ---------------------------------------------------------------------------
// 7. Spatial designs: tightening the exclusion radius strictly shrinks the
//    centering trace (identification content decreases monotonically).
// ---------------------------------------------------------------------------

#[test]
fn acceptance_7_spatial_trace_monotonicity() {
    let spec = DgpSpec::SpatialInterference {
        clusters: 20,
        villages_per_cluster: 12,
        beta: 1.0,
        interference: 0.5,
        range: 2.0,
        box_side: 4.0,
    };
    let design = spec.build_design(1234).unwrap();
    let proj = build_projection(design.controls.clone()).unwrap();
    let n = design.partition.n() as f64;
    let clusters = design.partition.num_clusters() as f64;
    let mut traces = Vec::new();
    for radius in [0.0, 1.0, 2.0, 3.0] {
        let excl = ExclusionMatrix::from_recipe(
            design.partition.clone(),
            &ExclusionRecipe::DistanceCutoff(radius),
            None,
            design.coords.as_deref(),
        )
        .unwrap();
        let a = build_astar(&proj, &excl, CenteringMode::Design, CenteringMethod::LeaveOut)
            .unwrap();
        traces.push(a.trace());
    }
    let radius0_exact = (traces[0] - (n - clusters)).abs() <= 1e-9;
    let strictly_decreasing = traces.windows(2).all(|w| w[0] > w[1]);
    report(
        "7 spatial trace strictly decreasing in the exclusion radius {0,1,2,3}",
        radius0_exact && strictly_decreasing,
        &format!(
            "traces {:.3} > {:.3} > {:.3} > {:.3} (radius 0 equals n - N = {})",
            traces[0],
            traces[1],
            traces[2],
            traces[3],
            n - clusters
        ),
    );
}
