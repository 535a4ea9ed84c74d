use crate::par;
use crate::scalar::Scalar;

/// Column block width; one block of `b` rows stays cache resident while the
/// rows of `a` stream past it.
const COL_BLOCK: usize = 256;
/// Output rows handed to one task.
const ROW_CHUNK: usize = 16;

/// `c = a · b` for row-major `a: m×k`, `b: k×p`, `c: m×p`.
///
/// Every output element accumulates its `k` products in ascending order, so
/// results do not depend on blocking or on how rows are split across tasks.
pub fn gemm<T: Scalar>(m: usize, k: usize, p: usize, a: &[T], b: &[T], c: &mut [T]) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * p, "gemm: rhs length");
    assert_eq!(c.len(), m * p, "gemm: output length");
    if m == 0 || p == 0 {
        return;
    }
    par::for_each_chunk(c, ROW_CHUNK * p, |chunk_idx, c_rows| {
        let row0 = chunk_idx * ROW_CHUNK;
        let rows = c_rows.len() / p;
        c_rows.fill(T::zero());
        let mut j0 = 0;
        while j0 < p {
            let j1 = (j0 + COL_BLOCK).min(p);
            for r in 0..rows {
                let a_row = &a[(row0 + r) * k..(row0 + r + 1) * k];
                let c_seg = &mut c_rows[r * p + j0..r * p + j1];
                for (kk, &aik) in a_row.iter().enumerate() {
                    let b_seg = &b[kk * p + j0..kk * p + j1];
                    for (cv, &bv) in c_seg.iter_mut().zip(b_seg) {
                        *cv = *cv + aik * bv;
                    }
                }
            }
            j0 = j1;
        }
    });
}
