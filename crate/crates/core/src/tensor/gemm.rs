use rayon::prelude::*;

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

const PAR_THRESHOLD: usize = 1 << 18;
const ROW_BLOCK: usize = 64;

/// `c = op(a) · op(b)` (or `c += ...` when `accumulate`), with `c` an m×n
/// row-major matrix. `a` is stored m×k when not transposed and k×m when
/// transposed; likewise `b` is k×n or n×k.
///
/// Rows of `c` are split into fixed blocks that run in parallel; each output
/// element is produced by exactly one block, so results do not depend on the
/// number of worker threads.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: Transpose,
    b: &[T],
    tb: Transpose,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    let beta = if accumulate { T::one() } else { T::zero() };
    if k == 0 {
        if !accumulate {
            c.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1isize),
        Transpose::Yes => (1isize, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1isize),
        Transpose::Yes => (1isize, k as isize),
    };
    let run = |row0: usize, rows: usize, c_block: &mut [T]| {
        let a_off = match ta {
            Transpose::No => row0 * k,
            Transpose::Yes => row0,
        };
        // SAFETY: the offsets and strides address elements inside `a`, `b`
        // and the `rows`×n block of `c`, all checked by the length asserts.
        unsafe {
            T::raw_gemm(
                rows,
                k,
                n,
                T::one(),
                a.as_ptr().add(a_off),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c_block.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if m * n * k < PAR_THRESHOLD || m < 2 * ROW_BLOCK || rayon::current_num_threads() == 1 {
        run(0, m, c);
    } else {
        c.par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(i, block)| run(i * ROW_BLOCK, block.len() / n, block));
    }
}
