use funnel_select::clairaut::ClairautRule;
use funnel_select::funnel::{check_all_shifts, check_shift_closure, check_splice_closure};
use funnel_select::problems::{LatticeRule, RiccatiRule, SqrtAbsRule, SyntheticLocalRule, SyntheticTreeRule};
use funnel_select::{unroll, BranchArc, BranchRule, Funnel, GridNode, Result, StatePoint, TimeGrid};

fn assert_closed<R: BranchRule>(rule: &R, a: f64, grid: TimeGrid) {
    let f = unroll(rule, &StatePoint::scalar(a), grid, 1 << 16).unwrap();
    assert!(f.tree_consistent());
    let (s3, s4) = check_all_shifts(&f, rule);
    assert!(
        s3.passed(),
        "{}: {:?}",
        rule.name(),
        &s3.violations[..s3.violations.len().min(3)]
    );
    assert!(
        s4.passed(),
        "{}: {:?}",
        rule.name(),
        &s4.violations[..s4.violations.len().min(3)]
    );
    assert!(s3.checked >= 20 && s4.checked >= 20, "{}", rule.name());
}

#[test]
fn clairaut_funnels_are_closed() {
    assert_closed(&ClairautRule::default(), 1.0, TimeGrid::new(0.0, 0.25, 10).unwrap());
    assert_closed(&ClairautRule::default(), -0.25, TimeGrid::new(-1.0, 0.25, 10).unwrap());
}

#[test]
fn sqrt_abs_funnels_are_closed() {
    assert_closed(&SqrtAbsRule, 0.0, TimeGrid::new(0.0, 0.25, 24).unwrap());
}

#[test]
fn riccati_funnel_is_closed() {
    assert_closed(&RiccatiRule, 0.0, TimeGrid::new(0.0, 0.0625, 24).unwrap());
}

#[test]
fn synthetic_funnels_are_closed() {
    for seed in 0..5 {
        assert_closed(
            &SyntheticTreeRule::new(seed, 3).unwrap(),
            0.0,
            TimeGrid::new(0.0, 0.5, 5).unwrap(),
        );
    }
    assert_closed(&LatticeRule::symmetric(), 0.0, TimeGrid::new(0.0, 1.0, 5).unwrap());
    assert_closed(&SyntheticLocalRule::new(10.0), 0.0, TimeGrid::new(0.0, 0.5, 8).unwrap());
}

/// Branches only at the first node of whatever funnel it is asked for;
/// its funnels therefore depend on where unrolling starts.
struct FirstNodeOnly {
    start: i64,
}

impl BranchRule for FirstNodeOnly {
    fn arcs(&self, node: GridNode, x: &StatePoint) -> Result<Vec<BranchArc>> {
        if node.index == self.start {
            Ok(vec![BranchArc::scalar(x.x() + 1.0), BranchArc::scalar(x.x() - 1.0)])
        } else {
            Ok(vec![BranchArc::scalar(x.x())])
        }
    }
    fn max_branching(&self) -> usize {
        2
    }
}

#[test]
fn missing_splices_are_detected() {
    // The funnel from t0 branches once; funnels from later nodes branch at
    // their own start, so splices create paths the first funnel lacks.
    let grid = TimeGrid::new(0.0, 1.0, 4).unwrap();
    let f = unroll(&FirstNodeOnly { start: 0 }, &StatePoint::scalar(0.0), grid, 100).unwrap();
    let later = |g: TimeGrid, x: &StatePoint| unroll(&FirstNodeOnly { start: g.first() }, x, g, 100);
    let s4 = funnel_select::funnel::check_splice_closure_with(&f, 2, later);
    assert!(!s4.passed());
    assert!(s4.violations.iter().all(|v| v.k == 2 && v.other.is_some()));
    // the constant tail is missing from the later funnels as well
    let s3 = funnel_select::funnel::check_shift_closure_with(&f, 2, later);
    assert!(!s3.passed());
}

#[test]
fn missing_shifts_are_detected() {
    let grid = TimeGrid::new(0.0, 1.0, 3).unwrap();
    let full = unroll(&LatticeRule::symmetric(), &StatePoint::scalar(0.0), grid, 100).unwrap();
    // Drop every path through the middle arc after its first step.
    let keep: Vec<usize> = (0..full.len())
        .filter(|&i| full.addresses()[i][1..].iter().all(|&c| c != 1))
        .collect();
    let thin: Funnel = full.restrict(&keep).unwrap();
    let s3 = check_shift_closure(&full, &LatticeRule::symmetric(), 1);
    assert!(s3.passed());
    let s3 = funnel_select::funnel::check_shift_closure_with(&full, 1, |g, x| {
        let sub = unroll(&LatticeRule::symmetric(), x, g, 100)?;
        let keep: Vec<usize> = (0..sub.len())
            .filter(|&i| sub.addresses()[i].iter().all(|&c| c != 1))
            .collect();
        sub.restrict(&keep)
    });
    assert!(!s3.passed());
    let s4 = check_splice_closure(&thin, &LatticeRule::symmetric(), 1);
    assert!(!s4.passed());
}
