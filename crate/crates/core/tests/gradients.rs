use transaction_core::gradcheck::{check_model, run_op_suite, TOLERANCE};
use transaction_core::model::{ModelConfig, Variant};

#[test]
fn every_op_matches_central_differences() {
    let results = run_op_suite(7, 100).unwrap();
    for r in &results {
        assert!(r.probes > 0, "{} never probed", r.name);
        assert!(r.passed(), "{}: max relative error {:e} over {} probes", r.name, r.max_rel_error, r.probes);
    }
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        d_rgb: 4,
        d_flow: 4,
        d_obj: 4,
        n_frames: 3,
        n_blocks: 2,
        heads: 2,
        ff_mult: 2,
        n_verbs: 3,
        n_nouns: 4,
        n_actions: 5,
        variant,
    }
}

#[test]
fn model_gradients_match_for_every_variant() {
    for v in Variant::ALL {
        let r = check_model(tiny(v), 11, 60).unwrap();
        assert!(r.max_rel_error < TOLERANCE, "{}: {:e}", r.name, r.max_rel_error);
    }
}
