//! Score a handcrafted gold/prediction pair where every number is checkable
//! on paper: concept-level P/R/F1 over (span, concept) matches, plus the
//! boundary-inconsistency rate between the MER and MEN streams.

use mtlseqlab::corpus::parse_conll_str;
use mtlseqlab::evaluation::{boundary_inconsistency, concept_prf, corpus_spans};
use mtlseqlab::multitask::TaskId;

const GOLD: &str = "\
migraine\tB-DISEASE\tB-D001
worsened\tO\tO

took\tO\tO
zomig\tB-CHEMICAL\tB-C101
";

// the chemical is right, the disease span leaks one token and the concept is
// wrong; MER and MEN also disagree on that boundary
const PRED: &str = "\
migraine\tB-DISEASE\tB-D002
worsened\tI-DISEASE\tO

took\tO\tO
zomig\tB-CHEMICAL\tB-C101
";

fn main() -> mtlseqlab::Result<()> {
    let gold = parse_conll_str(GOLD, "gold", false)?;
    let pred = parse_conll_str(PRED, "pred", false)?;

    for task in [TaskId::Mer, TaskId::Men] {
        let g = corpus_spans(&gold, task)?;
        let p = corpus_spans(&pred, task)?;
        let r = concept_prf(&g, &p);
        println!(
            "{task}: tp {} fp {} fn {}  P {:.3} R {:.3} F1 {:.3}",
            r.tp, r.fp, r.fn_, r.precision, r.recall, r.f1
        );
    }

    let mer = corpus_spans(&pred, TaskId::Mer)?;
    let men = corpus_spans(&pred, TaskId::Men)?;
    // boundary sets: MER {(0,0,2),(1,1,2)}, MEN {(0,0,1),(1,1,2)} →
    // symmetric difference 2, union 3
    println!(
        "boundary inconsistency: {:.4} (expect 2/3)",
        boundary_inconsistency(&mer, &men)
    );
    Ok(())
}
