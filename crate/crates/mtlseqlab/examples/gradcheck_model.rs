//! Check every analytic gradient of the joint model against central finite
//! differences, for both head types, on a desk-scale instance.

use mtlseqlab::multitask::{gradcheck_instance, gradcheck_run, HeadType};

fn main() -> mtlseqlab::Result<()> {
    let eps = 1e-5;
    let threshold = 1e-4;
    let mut worst: f64 = 0.0;
    for head in [HeadType::Greedy, HeadType::Crf] {
        println!("head = {head}");
        let inst = gradcheck_instance(head, 42)?;
        for (group, err) in gradcheck_run(&inst, eps, None)? {
            let mark = if err < threshold { "ok" } else { "FAIL" };
            println!("  {group:<18} max rel err {err:.3e}  {mark}");
            worst = worst.max(err);
        }
    }
    println!("worst over both heads: {worst:.3e} (threshold {threshold:.0e})");
    if worst >= threshold {
        std::process::exit(2);
    }
    Ok(())
}
