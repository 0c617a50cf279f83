mod common;

use ovaxai::arch::{build_lenet, LeNetVariant};
use ovaxai::ops::Mode;

use common::*;

fn assert_case(name: &str, make: impl Fn(u64) -> GradCase, coords: usize) {
    let mut total = GradReport::default();
    for seed in 0..4 {
        total.merge(check_gradients(&make(seed), coords, seed));
    }
    assert!(total.failures.is_empty(), "{name}: {:?}", total.failures);
    assert!(total.checked > total.skipped, "{name}: too many kinks");
}

#[test]
fn primitive_gradients() {
    assert_case("conv2d", conv_case, 12);
    assert_case("dense", dense_case, 12);
    assert_case("batchnorm", batchnorm_case, 12);
}

#[test]
fn composite_gradients() {
    assert_case("residual", |s| model_case(residual_spec(s), 2, Mode::Train, s), 10);
    assert_case("inception", |s| model_case(inception_spec(s), 2, Mode::Train, s), 10);
    assert_case(
        "lenet-b",
        |s| model_case(build_lenet(LeNetVariant::B, [32, 32, 3]).unwrap(), 1, Mode::Infer, s),
        8,
    );
}
