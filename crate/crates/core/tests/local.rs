use funnel_select::local::{
    check_ls3, check_tt, guard_gap_bound, reduce_local, reparametrize, unreparametrize, verify_local_semigroup,
    zeta_local, LocalFunnel, LocalRule, LocalSemiProcess, TerminalTime,
};
use funnel_select::problems::{RiccatiRule, SyntheticLocalRule};
use funnel_select::separating::{quadrature_error_estimate, zeta_eval, zeta_full, TruncationBudget};
use funnel_select::{Enumeration, PhiFamily, ReductionParams, SemiProcess, StatePoint};

/// Time for `x' = 1 + x^2` to reach `1e8` from `a` by RK4 with steps of
/// about one percent relative change, plus the remaining `~1/x`.
fn integrated_blowup(a: f64) -> f64 {
    let f = |x: f64| 1.0 + x * x;
    let (mut t, mut x) = (0.0f64, a);
    while x < 1e8 {
        let h = 1e-3 / (1.0 + x.abs());
        let k1 = f(x);
        let k2 = f(x + 0.5 * h * k1);
        let k3 = f(x + 0.5 * h * k2);
        let k4 = f(x + h * k3);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        t += h;
    }
    t + 1.0 / x
}

#[test]
fn riccati_terminal_time_matches_integration() {
    for a in [-2.0, -0.5, 0.0, 1.0, 3.0] {
        let closed = RiccatiRule.terminal_time(0.0, &StatePoint::scalar(a)).duration();
        assert!((closed - integrated_blowup(a)).abs() < 1e-6, "a = {a}");
    }
}

#[test]
fn riccati_terminal_time_is_lsc() {
    let samples: Vec<(f64, StatePoint)> = (-12..=12)
        .flat_map(|i| (0..4).map(move |j| (j as f64 * 0.5, StatePoint::scalar(i as f64 * 0.25))))
        .collect();
    let report = check_tt(|t, x| RiccatiRule.terminal_time(t, x), &samples, 1e-2, 1e-6).unwrap();
    assert!(report.passed(), "{:?}", report.violations);
    assert_eq!(report.checked, samples.len());
    let constant = check_tt(|_, _| TerminalTime::Finite(2.0), &samples, 1e-2, 1e-6).unwrap();
    assert_eq!(constant.worst_deficit, 0.0);
    assert!(check_tt(|_, _| TerminalTime::Finite(2.0), &samples, 0.0, 1e-6).is_err());
}

#[test]
fn riccati_ls3_holds_with_equality() {
    for a in [-1.5, 0.0, 0.75] {
        let f = LocalFunnel::unroll(&RiccatiRule, 0.0, &StatePoint::scalar(a), 0.0625, 1e-3, 10).unwrap();
        for k in 0..=f.funnel().grid().n_steps() {
            let r = check_ls3(&f, &RiccatiRule, k, 1e-3, 1e-9);
            assert!(r.passed(), "a = {a}, k = {k}: {r:?}");
            assert!(r.max_abs_defect <= 1e-9, "a = {a}, k = {k}: {}", r.max_abs_defect);
        }
    }
}

#[test]
fn ls3_violation_is_reported() {
    let rule = SyntheticLocalRule { t_star: 2.0, rate: 2.0 };
    let f = LocalFunnel::unroll(&rule, 0.0, &StatePoint::scalar(0.0), 0.5, 1e-3, 1000).unwrap();
    assert!(check_ls3(&f, &rule, 0, 1e-3, 1e-9).passed());
    let r = check_ls3(&f, &rule, 2, 1e-3, 1e-9);
    assert_eq!(r.inequality_violations.len(), f.funnel().len());
}

#[test]
fn reparametrized_tan_path() {
    let a = 0.5f64;
    let f = LocalFunnel::unroll(&RiccatiRule, 0.0, &StatePoint::scalar(a), 0.03125, 1e-3, 10).unwrap();
    let w = &f.funnel().paths()[0];
    let wt = reparametrize(w, f.terminal()).unwrap();
    let big_t = f.terminal().duration();
    for k in 0..wt.grid().len() {
        let s = wt.grid().time(k);
        assert!(s < 1.0);
        let exact = (a.atan() + s * big_t).tan();
        assert!(
            (wt.sample(k).x() - exact).abs() <= 1e-12 * exact.abs().max(1.0),
            "s = {s}"
        );
    }
    let back = unreparametrize(&wt, 0.0, f.terminal(), 0.03125).unwrap();
    assert_eq!(back.samples(), w.samples());
    assert!(reparametrize(w, TerminalTime::Infinite).is_err());
}

#[test]
fn guard_gap_sensitivity_is_within_bound() {
    let e = Enumeration::new(PhiFamily::Mixed, 1, 4).unwrap();
    for a in [-1.0, 0.0, 2.0] {
        let x = StatePoint::scalar(a);
        let coarse = LocalFunnel::unroll(&RiccatiRule, 0.0, &x, 1.0 / 256.0, 1e-2, 10).unwrap();
        let fine = LocalFunnel::unroll(&RiccatiRule, 0.0, &x, 1.0 / 256.0, 1e-4, 10).unwrap();
        assert!(fine.covered() > coarse.covered());
        for n in 0..30 {
            let fun = e.functional(n);
            let wc = &coarse.funnel().paths()[0];
            let wf = &fine.funnel().paths()[0];
            let zc = zeta_local(wc, coarse.terminal(), &fun).unwrap();
            let zf = zeta_local(wf, fine.terminal(), &fun).unwrap();
            let bound = guard_gap_bound(fun.lambda(), coarse.covered(), coarse.terminal())
                + quadrature_error_estimate(wf, &fun, wf.grid().horizon()).unwrap();
            assert!(
                (zf - zc).abs() <= bound,
                "a = {a}, n = {n}: {} > {bound}",
                (zf - zc).abs()
            );
        }
    }
}

#[test]
fn zeta_local_agrees_with_global_functional_on_the_covered_window() {
    let f = LocalFunnel::unroll(&RiccatiRule, 0.0, &StatePoint::scalar(-1e3), 0.125, 1e-3, 10).unwrap();
    let p = &f.funnel().paths()[0];
    let e = Enumeration::new(PhiFamily::Bumps, 1, 3).unwrap();
    let budget = TruncationBudget::new(p.grid().horizon(), 1.0).unwrap();
    for n in 0..20 {
        let fun = e.functional(n);
        assert_eq!(
            zeta_local(p, f.terminal(), &fun).unwrap(),
            zeta_eval(p, &fun, &budget).unwrap()
        );
    }
}

#[test]
fn reduce_local_matches_lexicographic_argmax() {
    let rule = SyntheticLocalRule::new(3.0);
    let e = Enumeration::new(PhiFamily::Mixed, 1, 4).unwrap();
    let params = ReductionParams::default();
    let f = LocalFunnel::unroll(&rule, 0.0, &StatePoint::scalar(0.0), 0.25, 1e-3, 1 << 12).unwrap();
    let out = reduce_local(&f, &e, &params);
    let mut survivors: Vec<usize> = (0..f.funnel().len()).collect();
    for stage in &out.outcome.trace.stages {
        let fun = e.functional(stage.n);
        let vals: Vec<f64> = survivors
            .iter()
            .map(|&i| zeta_local(&f.funnel().paths()[i], f.terminal(), &fun).unwrap())
            .collect();
        let best = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        survivors = survivors
            .iter()
            .zip(&vals)
            .filter(|(_, &v)| v >= best - params.eta_tie)
            .map(|(&i, _)| i)
            .collect();
    }
    assert_eq!(survivors, out.outcome.survivors);
    assert_eq!(survivors.len(), 1);
    let j = out.to_json();
    assert_eq!(j["terminal_T"], 3.0);
    assert!(j["guard_gap"].as_f64().unwrap() > 0.0);
}

#[test]
fn local_selection_is_a_local_semi_process() {
    let e = Enumeration::new(PhiFamily::Bumps, 1, 4).unwrap();
    let p = LocalSemiProcess::new(SyntheticLocalRule::new(3.0), e, ReductionParams::default(), 0.25, 1e-3).unwrap();
    let mut triples = Vec::new();
    for k0 in [0i64, 3, 7] {
        for k1 in [k0, k0 + 1, 9] {
            for k2 in [k1, (k1 + 1).min(11), 11] {
                let a = (k0 % 3) as f64 * 0.25;
                triples.push((
                    k0 as f64 * 0.25,
                    k1 as f64 * 0.25,
                    k2 as f64 * 0.25,
                    StatePoint::scalar(a),
                ));
            }
        }
    }
    for (t0, _, _, a) in &triples {
        assert_eq!(p.select(*t0, a).unwrap().outcome.at(*t0).unwrap(), *a);
    }
    let report = verify_local_semigroup(&p, &triples, 1e-9);
    assert!(
        report.passed(),
        "{:?}",
        &report.failures[..report.failures.len().min(3)]
    );
}

#[test]
fn riccati_local_selection() {
    let e = Enumeration::new(PhiFamily::Sigmoids, 1, 4).unwrap();
    let p = LocalSemiProcess::new(RiccatiRule, e, ReductionParams::default(), 0.0625, 1e-3).unwrap();
    let out = p.select(0.0, &StatePoint::scalar(0.0)).unwrap();
    assert_eq!(out.outcome.trace.stages.len(), 0);
    let triples = vec![
        (0.0, 0.5, 1.0, StatePoint::scalar(0.0)),
        (0.25, 0.75, 1.25, StatePoint::scalar(-1.0)),
        (0.0, 0.0, 1.5, StatePoint::scalar(0.0)),
    ];
    let report = verify_local_semigroup(&p, &triples, 1e-9);
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn long_terminal_times_reduce_like_the_global_engine() {
    let rule = SyntheticLocalRule::new(100.0);
    let e = Enumeration::new(PhiFamily::Sigmoids, 1, 4).unwrap();
    let params = ReductionParams::default();
    let f = LocalFunnel::unroll(&rule, 0.0, &StatePoint::scalar(0.0), 0.25, 1e-3, 1 << 12);
    // 399 steps of two-way branching cannot be unrolled; compare on a window
    assert!(f.is_err());
    let global = SemiProcess::new(rule, e.clone(), params, 0.25, 2.0).unwrap();
    let g = global.select(0.0, &StatePoint::scalar(0.0)).unwrap();
    let local = reduce_local(
        &LocalFunnel::unroll(
            &SyntheticLocalRule::new(2.0 / (1.0 - 1e-3) + 0.25 * 0.5),
            0.0,
            &StatePoint::scalar(0.0),
            0.25,
            1e-3,
            1 << 12,
        )
        .unwrap(),
        &e,
        &params,
    );
    assert_eq!(local.outcome.selected, g.selected);
    assert_eq!(
        zeta_full(&g.selected, &e.functional(0)),
        zeta_full(&local.outcome.selected, &e.functional(0))
    );
}
