mod common;

use timnet::tensor::{Tape, Tensor};

#[test]
fn conv_matches_nested_loops() {
    let worst = common::conv_oracle_worst();
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn adam_first_step_matches_closed_form() {
    let worst = common::adam_oracle_worst();
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn conv_identity_and_scaling_kernels() {
    let mut rng = timnet::seed::rng(&[1]);
    let x = Tensor::<f64>::uniform(&[1, 4, 4], -1.0, 1.0, &mut rng);
    let mut tape = Tape::new();
    let xv = tape.leaf(&x);
    let one = tape.constant(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let y = tape.conv2d(xv, one, 1, 0).unwrap();
    assert_eq!(tape.value(y), x.data());
    let ones = tape.constant(&[1, 2, 2], vec![1.0; 4]).unwrap();
    let two = tape.constant(&[1, 1, 1, 1], vec![2.0]).unwrap();
    let y = tape.conv2d(ones, two, 1, 0).unwrap();
    assert_eq!(tape.value(y), &[2.0; 4]);
}
