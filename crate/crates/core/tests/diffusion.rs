mod common;

#[test]
fn reconstruction_inverts_forward_process() {
    let err = common::diffusion_identity_error();
    assert!(err < 1e-9, "{err:e}");
}

#[test]
fn forward_moments_match_closed_form() {
    let z = common::diffusion_moment_z();
    assert!(z < 4.0, "{z} standard errors");
}
