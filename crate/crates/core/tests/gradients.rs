use hctmg::verify::{gradient_checks, ABS_FLOOR};

#[test]
fn analytic_gradients_match_central_differences() {
    let checks = gradient_checks().unwrap();
    let names: Vec<&str> = checks.iter().map(|c| c.name).collect();
    for required in ["conv1d", "gru", "mha", "transformer_block_cross", "gate_scaling", "mixing_w1_w2", "head", "full_loss_hct"] {
        assert!(names.contains(&required), "missing {required}");
    }
    for c in &checks {
        assert!(c.passes(), "{}: worst {:?}", c.name, c.report.worst(ABS_FLOOR));
        assert!(!c.report.coords.is_empty());
    }
}
