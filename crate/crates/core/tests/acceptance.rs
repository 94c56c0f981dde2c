//! One PASS/FAIL line per acceptance criterion. Set `BSMAMBA_ACCEPT_FAST=1`
//! to skip the overfit and ablation runs.

use std::process::ExitCode;

use bsmamba::selftest::{self, Check};

#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

const ABLATION_ITERS: usize = 50;

fn main() -> ExitCode {
    let fast = std::env::var_os("BSMAMBA_ACCEPT_FAST").is_some();
    let mut checks: Vec<Check> = vec![
        selftest::scan_count(),
        selftest::scan_oracle(100, 7),
        selftest::op_gradients(),
        selftest::end_to_end_gradients(2),
        selftest::permutations(1000, 8),
        selftest::fft_ffc(),
        selftest::loss_defaults(),
        selftest::param_budget(),
    ];
    for c in &checks {
        println!("{}", c.line());
    }
    if fast {
        println!("SKIP overfit, ablations (BSMAMBA_ACCEPT_FAST)");
    } else {
        let c = selftest::overfit(true);
        println!("{}", c.line());
        checks.push(c);
        let c = selftest::ablations(ABLATION_ITERS);
        println!("{}", c.line());
        checks.push(c);
    }
    let failed = checks.iter().filter(|c| !c.ok()).count();
    println!("acceptance: {} passed, {failed} failed", checks.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
