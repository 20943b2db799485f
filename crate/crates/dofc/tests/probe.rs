use dofc::demo;
use dofc::synthesis::{synthesize, SynthesisMode, SynthesisOptions};

#[test]
fn probe_residuals() {
    let problem = demo::manipulator_problem(SynthesisOptions::default()).unwrap();
    for (name, mode) in
        [("cor", SynthesisMode::Corollary1), ("thm", SynthesisMode::Theorem1)]
    {
        let res = synthesize(&problem, mode).unwrap();
        println!(
            "{name}: obj {:.4} cert_obj {:.4} residuals {:?} warnings {:?}",
            res.objective, res.certified_objective, res.controller.recovery_residuals, res.warnings
        );
    }
}
