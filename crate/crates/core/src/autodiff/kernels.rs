//! Dense kernels shared by the autodiff ops.

/// `c = a · b + beta · c` with `a` logically `[m, k]` and `b` logically `[k, n]`.
///
/// `trans_a` means `a` is stored as `[k, m]`; `trans_b` means `b` is stored as `[n, k]`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted slice lengths cover every index reachable through
    // the given strides for an m×k, k×n and m×n operand respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major strides for a shape.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let nd = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out_shape, out);
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    // Innermost axis handled as a strided run to keep the hot loop tight.
    let last = nd - 1;
    let run = out_shape[last];
    let run_stride = src_strides[last];
    loop {
        for r in 0..run {
            out.push(data[offset + r * run_stride]);
        }
        // Advance the multi-index over all but the innermost axis.
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out_shape, out);
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

pub fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_agree() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.0, 2.0, 1.0, 0.0, 3.0]; // 3x2
        let mut c = [0.0; 4];
        gemm(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [5.0, 11.0, 14.0, 23.0]);

        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0]; // a stored transposed
        let bt = [1.0, 2.0, 0.0, 0.0, 1.0, 3.0]; // b stored transposed
        let mut c2 = [0.0; 4];
        gemm(2, 3, 2, &at, true, &bt, true, &mut c2, 0.0);
        assert_eq!(c, c2);
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let perm = [2, 0, 1];
        let (s, p) = permute(&data, &shape, &perm);
        assert_eq!(s, vec![4, 2, 3]);
        // out[i][j][l] = in[j][l][i]
        assert_eq!(p[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let (s2, back) = permute(&p, &s, &inverse_permutation(&perm));
        assert_eq!(s2, shape.to_vec());
        assert_eq!(back, data);
    }
}
