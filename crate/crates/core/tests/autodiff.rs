mod common;

use common::*;
use freqlens::optim::param_grads;
use freqlens::par;
use proptest::prelude::*;

#[test]
fn backprop_matches_central_differences() {
    let detail = autodiff_suite().unwrap();
    println!("{detail}");
}

#[test]
fn softmax_regression_matches_closed_form() {
    for seed in 0..5 {
        let e = linear_softmax_error(seed).unwrap();
        assert!(e < 1e-4, "seed {seed}: {e:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    // Fixed-order reductions: the thread count never changes a gradient bit.
    #[test]
    fn gradients_do_not_depend_on_threads(seed in 0u64..1000, b in 1usize..6, fat in any::<bool>()) {
        let net = micro_resnet(seed, 3, 2, 32, fat);
        let batch = rand_batch(seed, b, 2, 8, 8, 3);
        let par_grads = param_grads(&net, &batch).unwrap();
        let seq_grads = par::sequential(|| param_grads(&net, &batch).unwrap());
        prop_assert_eq!(par_grads, seq_grads);
    }
}
