//! Prints one PASS/FAIL line per acceptance criterion and fails if any fails.

use quadgrasp_acceptance as acc;

fn main() {
    let scenario = acc::reference_scenario();
    let checks = [
        acc::approach(&scenario),
        acc::grasp(&scenario),
        acc::filter(),
        acc::kinematics(&scenario),
        acc::fsm(&scenario),
        acc::geometry(&scenario),
        acc::protocol(&scenario),
    ];
    for c in &checks {
        println!("{}", c.line());
    }
    let failed = checks.iter().filter(|c| !c.pass).count();
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
