//! Acceptance report: one PASS/FAIL line per criterion.
//!
//! The exit status fails on any broken property, panic or incomplete suite.
//! An ordering that completes but misses its threshold is a measured outcome:
//! it prints FAIL without failing the run. `--strict` makes those fatal too.

mod oracle;
mod ordering;
mod properties;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;

use flare::harness::SuiteId;

type Criterion = (u8, &'static str, Box<dyn Fn() -> Result<String, Miss>>);

pub enum Miss {
    Broken(String),
    Measured(String),
}

impl From<String> for Miss {
    fn from(detail: String) -> Self {
        Miss::Broken(detail)
    }
}

fn main() -> ExitCode {
    let criteria: Vec<Criterion> = vec![
        (1, "gradient oracle", Box::new(properties::gradient_oracle)),
        (2, "stop-gradient", Box::new(properties::stop_gradient)),
        (3, "bellman oracles", Box::new(properties::bellman_oracles)),
        (4, "building blocks", Box::new(properties::building_blocks)),
        (
            5,
            "dimension algebra",
            Box::new(properties::dimension_algebra),
        ),
        (
            6,
            "motivation ordering",
            Box::new(|| ordering::ordering(SuiteId::Motivation)),
        ),
        (
            7,
            "state ablation ordering",
            Box::new(|| ordering::ordering(SuiteId::StateAblation)),
        ),
        (
            8,
            "pixel ordering",
            Box::new(|| ordering::ordering(SuiteId::PixelAblationStack)),
        ),
        (
            9,
            "pixel-flow ablation",
            Box::new(|| ordering::ordering(SuiteId::PixelAblationFlow)),
        ),
        (
            10,
            "frame-count ablation",
            Box::new(|| ordering::ordering(SuiteId::PixelAblationFrames)),
        ),
        (
            11,
            "discrete path",
            Box::new(|| ordering::ordering(SuiteId::Discrete)),
        ),
        (12, "reproducibility", Box::new(ordering::reproducibility)),
    ];
    let args: Vec<String> = std::env::args().skip(1).collect();
    let strict = args.iter().any(|a| a == "--strict");
    let filter: Vec<u8> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in &criteria {
        if !filter.is_empty() && !filter.contains(n) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(Miss::Broken(
                p.downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into()),
            ))
        });
        match outcome {
            Ok(detail) => println!("criterion {n:>2} PASS {name}: {detail}"),
            Err(Miss::Measured(detail)) => {
                failed += usize::from(strict);
                println!("criterion {n:>2} FAIL {name}: {detail}");
            }
            Err(Miss::Broken(detail)) => {
                failed += 1;
                println!("criterion {n:>2} FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
