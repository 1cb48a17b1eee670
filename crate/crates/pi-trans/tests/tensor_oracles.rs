//! Loop-oracle cross-checks for the heavy kernels.

mod common;

use common::*;
use pi_trans::tensor::{Rng, Tape, Tensor};

#[test]
fn conv2d_matches_six_loop_oracle() {
    let mut rng = Rng::new(3, "conv-oracle");
    let x = Tensor::randn(&[2, 3, 8, 8], 0.0, 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3, 3, 3], 0.0, 0.5, &mut rng);
    let b = Tensor::randn(&[4], 0.0, 0.5, &mut rng);
    let mut tape = Tape::no_grad();
    let y = tape.conv2d(&x, &w, &b, 2, 1).unwrap();
    assert_eq!(y.shape(), &[2, 4, 4, 4]);
    let oracle = conv2d_oracle(x.data(), w.data(), b.data(), 2, 3, 8, 8, 4, 3, 2, 1);
    assert!(max_abs_diff(y.data(), &oracle) <= 1e-5);
}

#[test]
fn conv2d_stride_padding_grid_matches_oracle() {
    for (stride, padding, k) in [(1, 0, 1), (1, 1, 3), (2, 0, 3), (2, 1, 4), (3, 2, 5)] {
        let mut rng = Rng::new(7 + stride as u64, "conv-grid");
        let x = Tensor::randn(&[1, 2, 9, 9], 0.0, 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, k, k], 0.0, 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.0, 0.5, &mut rng);
        let mut tape = Tape::no_grad();
        let y = tape.conv2d(&x, &w, &b, stride, padding).unwrap();
        let oracle = conv2d_oracle(x.data(), w.data(), b.data(), 1, 2, 9, 9, 3, k, stride, padding);
        assert!(
            max_abs_diff(y.data(), &oracle) <= 1e-5,
            "k={k} s={stride} p={padding}"
        );
    }
}

#[test]
fn batched_matmul_matches_triple_loop_oracle() {
    let a = randn(&[2, 5, 7], 11, "mm-a");
    let b = randn(&[2, 7, 3], 12, "mm-b");
    let mut tape = Tape::no_grad();
    let c = tape.matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[2, 5, 3]);
    let oracle = matmul_oracle(a.data(), b.data(), 2, 5, 7, 3);
    assert!(max_abs_diff(c.data(), &oracle) <= 1e-5);
}

#[test]
fn parallel_and_serial_matmul_are_bit_identical() {
    // Force the parallel path with a matrix above the internal threshold,
    // then compare against the same product computed single-threaded.
    let a = randn(&[256, 130], 13, "mmp-a");
    let b = randn(&[130, 256], 14, "mmp-b");
    let run = || {
        let mut tape = Tape::no_grad();
        tape.matmul(&a, &b).unwrap().data().to_vec()
    };
    pi_trans::tensor::set_threads(1);
    let serial = run();
    pi_trans::tensor::set_threads(4);
    let parallel = run();
    pi_trans::tensor::set_threads(1);
    assert_eq!(serial, parallel);
}

#[test]
fn softmax_lane_sums_survive_huge_magnitudes() {
    let data: Vec<f32> = vec![1000.0, -1000.0, 999.0, 3.0, 0.5, -2.0, 1.0, 0.0];
    let x = Tensor::from_vec(data, &[2, 4]).unwrap();
    let mut tape = Tape::no_grad();
    let y = tape.softmax(&x, 1).unwrap();
    for row in y.data().chunks(4) {
        let s: f32 = row.iter().sum();
        assert!((s - 1.0).abs() <= 1e-5);
    }
}

#[test]
fn backward_through_composed_graph_matches_finite_differences() {
    // A little network touching most primitives at once.
    let x = randn(&[1, 2, 6, 6], 21, "compose-x");
    let w = Tensor::randn(&[4, 2, 3, 3], 0.0, 0.4, &mut Rng::new(22, "compose-w")).detach();
    let b = Tensor::zeros(&[4]);
    let err = pi_trans::tensor::gradcheck(
        |t, x| {
            let y = t.conv2d(x, &w, &b, 1, 1)?;
            let y = t.gelu(&y)?;
            let up = t.nearest_upsample2(&y)?;
            let (odd, even) = {
                let o = t.stride_channels(&up, 0)?;
                let e = t.stride_channels(&up, 1)?;
                (o, e)
            };
            let merged = t.concat(&[&odd, &even], 1)?;
            let flat = t.reshape(&merged, &[4, 144])?;
            let sm = t.softmax(&flat, 1)?;
            let tanh = t.tanh(&sm)?;
            t.mean(&tanh)
        },
        &x,
        1e-3,
    )
    .unwrap();
    assert!(err <= 1e-2, "composed gradcheck err {err}");
}
