mod common;

use common::suites::formula_suite;

#[test]
fn losses_match_brute_force_formulas() {
    let checks = formula_suite(3, 200);
    assert_eq!(checks.len(), 5);
    for c in checks {
        println!("{:<20} {} instances, max abs {:.2e}", c.name, c.instances, c.max_abs);
        assert!(c.max_abs <= 1e-5, "{} deviates by {}", c.name, c.max_abs);
    }
}
