//! Finite-difference checks of every graph primitive and of the full
//! denoiser loss, with and without adapters.

mod support;

use support::gradcheck::{check_model, check_primitive, primitives, INSTANCES, TOL_F32, TOL_F64};

#[test]
fn every_primitive() {
    let all = primitives();
    assert!(all.len() >= 25);
    for p in all {
        let (e64, e32) = check_primitive(p.name, &p.shapes, p.f64, p.f32);
        assert!(e64 < TOL_F64, "{}: f64 relative error {e64:.3e} over {INSTANCES} instances", p.name);
        assert!(e32 < TOL_F32, "{}: f32 relative error {e32:.3e} over {INSTANCES} instances", p.name);
    }
}

#[test]
fn denoiser_loss() {
    let (e64, e32) = check_model(false);
    assert!(e64 < TOL_F64 && e32 < TOL_F32, "{e64:.3e} / {e32:.3e}");
}

#[test]
fn adapted_denoiser_loss() {
    let (e64, e32) = check_model(true);
    assert!(e64 < TOL_F64 && e32 < TOL_F32, "{e64:.3e} / {e32:.3e}");
}
