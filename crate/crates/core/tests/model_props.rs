mod common;

use ccl_core::{Activation, Mlp, ModelSpec, ParamVector};
use common::*;
use proptest::prelude::*;

proptest! {
    #[test]
    fn binary_layout_round_trips(v in prop::collection::vec(prop::num::f64::NORMAL | prop::num::f64::ZERO, 0..200)) {
        let p = ParamVector(v);
        let mut buf = Vec::new();
        p.write_binary(&mut buf).unwrap();
        prop_assert_eq!(buf.len(), 8 * p.len());
        prop_assert_eq!(ParamVector::read_binary(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn param_count_matches_layout(input in 1usize..8, hidden in prop::collection::vec(1usize..9, 1..4), c in 2usize..6) {
        let spec = ModelSpec::new(input, hidden.clone(), c, Activation::Tanh).unwrap();
        let mut dims = vec![input];
        dims.extend(&hidden);
        dims.push(c);
        let want: usize = dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        prop_assert_eq!(spec.param_count(), want);
        let m = Mlp::new(spec).unwrap();
        let x = m.init_params(1);
        prop_assert_eq!(x.len(), want);
        prop_assert!(x.is_finite());
    }
}

#[test]
fn layout_offsets_tile_the_vector() {
    let spec = ModelSpec::new(3, vec![4, 5], 2, Activation::Relu).unwrap();
    let m = Mlp::new(spec.clone()).unwrap();
    let mut next = 0;
    for l in 0..3 {
        let (w, b) = m.layer_offsets(l);
        assert_eq!(w, next);
        next = b + if l == 2 { 2 } else { spec.hidden_dims[l] };
    }
    assert_eq!(next, spec.param_count());
}

#[test]
fn relu_forward_matches_oracle_on_random_nets() {
    let mut r = rng(9);
    let spec = ModelSpec::new(6, vec![8], 3, Activation::Relu).unwrap();
    let m = Mlp::new(spec.clone()).unwrap();
    let x = uniform_vec(&mut r, spec.param_count(), 1.0);
    let inputs = random_matrix(&mut r, 12, 6, 1.0);
    let z = m.features(&x, &inputs).unwrap();
    assert!(max_abs_diff(z.as_slice(), oracle_features(&spec, &x, &inputs).as_slice()) < 1e-12);
}
