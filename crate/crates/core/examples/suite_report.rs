//! Prints the summary table and verdicts of every suite with finished runs
//! under `$FLARE_OUTPUT` (or `runs/`). Train them with `flare suite --name <id>`.

use flare::harness::{load_suite, output_root, SuiteId};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = output_root();
    for id in SuiteId::ALL {
        let result = load_suite(id, &[0, 1, 2, 3, 4], &root)?;
        if result.variants.is_empty() {
            println!("{id}: no finished runs under {}", root.display());
            continue;
        }
        println!("== {id}");
        print!("{}", result.summary_csv()?);
        print!("{}", result.verdicts_text());
    }
    Ok(())
}
