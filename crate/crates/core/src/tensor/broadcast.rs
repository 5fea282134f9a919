// NumPy-style broadcasting over right-aligned shapes.

use crate::error::{Error, Result};

pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of `input` it reads from.
///
/// `input` must broadcast to `out`.
pub(crate) fn source_indices(out: &[usize], input: &[usize]) -> Vec<usize> {
    let n = out.len();
    let offset = n - input.len();
    // Strides of `input` expressed in `out`'s axes; zero on broadcast axes.
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..input.len()).rev() {
        if input[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= input[i];
    }
    let numel: usize = out.iter().product();
    let mut result = Vec::with_capacity(numel);
    let mut counter = vec![0usize; n];
    let mut src = 0usize;
    for _ in 0..numel {
        result.push(src);
        for axis in (0..n).rev() {
            counter[axis] += 1;
            src += strides[axis];
            if counter[axis] < out[axis] {
                break;
            }
            src -= strides[axis] * out[axis];
            counter[axis] = 0;
        }
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(
            broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(),
            vec![2, 3, 4]
        );
        assert!(broadcast_shape("t", &[2, 3], &[2]).is_err());
    }

    #[test]
    fn indices_follow_row_major_layout() {
        assert_eq!(source_indices(&[2, 3], &[3]), vec![0, 1, 2, 0, 1, 2]);
        assert_eq!(source_indices(&[2, 3], &[2, 1]), vec![0, 0, 0, 1, 1, 1]);
        assert_eq!(source_indices(&[2, 2], &[2, 2]), vec![0, 1, 2, 3]);
    }
}
