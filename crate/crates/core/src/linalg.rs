//! Matrix kernels behind the tape ops.
//!
//! Multiplication goes through `ndarray`'s BLAS-style `general_mat_mul`.
//! Large products are split into fixed-size row blocks processed with
//! rayon; because the block boundaries do not depend on the thread count,
//! results are bit-identical no matter how many workers run.

use ndarray::{s, ArrayView2, ArrayViewMut2};
use rayon::prelude::*;

use crate::tensor::Tensor;

/// Output rows per parallel block. Fixed so that chunking (and therefore
/// floating-point evaluation order) never depends on the worker count.
const BLOCK_ROWS: usize = 256;

pub fn matmul(a: &Tensor, b: &Tensor, m: usize, k: usize, n: usize) -> Tensor {
    let av = ArrayView2::from_shape((m, k), a.data()).expect("matmul lhs shape");
    let bv = ArrayView2::from_shape((k, n), b.data()).expect("matmul rhs shape");
    let mut out = vec![0.0; m * n];

    if m <= BLOCK_ROWS || rayon::current_num_threads() == 1 {
        let mut ov = ArrayViewMut2::from_shape((m, n), &mut out[..]).unwrap();
        ndarray::linalg::general_mat_mul(1.0, &av, &bv, 0.0, &mut ov);
    } else {
        out.par_chunks_mut(BLOCK_ROWS * n)
            .enumerate()
            .for_each(|(blk, chunk)| {
                let r0 = blk * BLOCK_ROWS;
                let rows = chunk.len() / n;
                let asub = av.slice(s![r0..r0 + rows, ..]);
                let mut ov = ArrayViewMut2::from_shape((rows, n), chunk).unwrap();
                ndarray::linalg::general_mat_mul(1.0, &asub, &bv, 0.0, &mut ov);
            });
    }
    Tensor::new(&[m, n], out).expect("matmul output shape")
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (m, n) = (a.rows(), a.cols());
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        for c in 0..n {
            out[c * m + r] = a.data()[r * n + c];
        }
    }
    Tensor::new(&[n, m], out).expect("transpose output")
}
