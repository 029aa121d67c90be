use crate::error::{shape_err, Result};

/// Right-aligned broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return shape_err(op, format!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For every flat index of `out`, the flat index of the broadcast source
/// element in a tensor of shape `src`.
pub(crate) fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    // Source strides aligned to output axes; broadcast axes get stride 0.
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= src[i];
    }
    let total: usize = out.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut cur = 0usize;
    for _ in 0..total {
        map.push(cur);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            cur += strides[ax];
            if idx[ax] < out[ax] {
                break;
            }
            cur -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// Row-major strides.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes() {
        assert_eq!(broadcast_shape("t", &[2, 3], &[3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast_shape("t", &[2, 1, 4], &[3, 1]).unwrap(), vec![2, 3, 4]);
        assert!(broadcast_shape("t", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn map_channel_bias() {
        let m = broadcast_map(&[2, 3, 2], &[3, 1]);
        assert_eq!(m, vec![0, 0, 1, 1, 2, 2, 0, 0, 1, 1, 2, 2]);
    }

    #[test]
    fn map_identity() {
        let m = broadcast_map(&[2, 2], &[2, 2]);
        assert_eq!(m, vec![0, 1, 2, 3]);
    }
}
