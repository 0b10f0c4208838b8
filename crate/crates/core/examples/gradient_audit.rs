//! Central finite differences against the reverse-mode gradients of every op
//! and layer, plus one op with a deliberately wrong backward rule.

use sinonet::audit::{gradient_suite, GRAD_TOL};

fn main() -> sinonet::Result<()> {
    let reports = gradient_suite(0, true)?;
    for r in &reports {
        println!(
            "{:<24} {:>10.2e} {}",
            r.name,
            r.max_rel_err,
            if r.passed { "ok" } else { "FAIL" }
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!(
        "{failed} of {} cases above {GRAD_TOL:e} (the injected fault should be the only one)",
        reports.len()
    );
    Ok(())
}
