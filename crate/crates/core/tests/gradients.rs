mod common;

use common::{gradient_check, GRAD_REL_TOL, GRAD_TARGETS};

#[test]
fn analytic_gradients_match_finite_differences() {
    for target in GRAD_TARGETS {
        for seed in 0..25 {
            let err = gradient_check(target, seed);
            assert!(err < GRAD_REL_TOL, "{target:?} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn full_size_network_log_prob_gradient() {
    use trackarena::policy::{backward, log_prob, sample_action, LossAdjoints, PolicyParams};
    let mut rng = trackarena::seeds::rng_from(11, &[]);
    let p = PolicyParams::init(&[64, 64], -0.7, &mut rng);
    let obs = common::rand_obs(&mut rng);
    let a = sample_action(&p, &obs, &mut rng).action;
    let g = backward(&p, &obs, &a, LossAdjoints { log_prob: 1.0, ..Default::default() }, None).unwrap();
    let fd = common::central_difference(&p, |q| log_prob(q, &obs, &a));
    assert!(common::relative_error(&g.data, &fd) < GRAD_REL_TOL);
}
