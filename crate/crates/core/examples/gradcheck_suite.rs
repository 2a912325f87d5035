//! Runs every finite-difference gradient check and prints one line each.

fn main() -> scrwkv::Result<()> {
    let reports = scrwkv::verify::run_gradchecks("all")?;
    for r in &reports {
        println!("{r}");
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} of {} passed", reports.len() - failed, reports.len());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
