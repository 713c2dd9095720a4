//! Update encoding: top-k sparsification with residual accumulation, the
//! sparse wire format, and conversion of weight updates to gradients.

use crate::error::{Error, Result};

/// Per-client sparsification state. `theta` is the fraction of coordinates
/// withheld each step; withheld mass accumulates in `residual`.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressionState {
    pub theta: f64,
    pub residual: Vec<f64>,
}

impl CompressionState {
    pub fn new(theta: f64, dim: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&theta) {
            return Err(Error::config(format!("compression ratio {theta} must lie in [0, 1)")));
        }
        Ok(Self {
            theta,
            residual: vec![0.0; dim],
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Compressed {
    /// Dense payload, zero outside `mask`.
    pub payload: Vec<f64>,
    pub mask: Vec<bool>,
}

/// Number of coordinates kept out of `dim`: `ceil((1 − θ)·dim)`, at least 1.
pub fn kept_count(theta: f64, dim: usize) -> usize {
    // The epsilon absorbs representation error, e.g. (1 − 0.7)·10.
    let k = ((1.0 - theta) * dim as f64 - 1e-9).ceil() as usize;
    k.clamp(1.min(dim), dim)
}

/// Keeps the `k` largest-magnitude coordinates of `g + residual` (ties to
/// the lowest index) and carries the rest forward.
pub fn compress_topk(g: &[f64], state: &CompressionState) -> Result<(Compressed, CompressionState)> {
    if g.len() != state.residual.len() {
        return Err(Error::ShapeMismatch {
            op: "compress_topk",
            lhs: vec![g.len()],
            rhs: vec![state.residual.len()],
        });
    }
    let v: Vec<f64> = g.iter().zip(&state.residual).map(|(a, b)| a + b).collect();
    let k = kept_count(state.theta, v.len());
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[b].abs().total_cmp(&v[a].abs()).then(a.cmp(&b)));
    let mut mask = vec![false; v.len()];
    for &i in &order[..k] {
        mask[i] = true;
    }
    let mut payload = vec![0.0; v.len()];
    let mut residual = v;
    for (i, &keep) in mask.iter().enumerate() {
        if keep {
            payload[i] = residual[i];
            residual[i] = 0.0;
        }
    }
    Ok((
        Compressed { payload, mask },
        CompressionState {
            theta: state.theta,
            residual,
        },
    ))
}

/// Sparse payload in transmission form: indices ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseUpdate {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseUpdate {
    pub fn from_masked(payload: &[f64], mask: &[bool]) -> Self {
        let (indices, values) = mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| (i as u32, payload[i]))
            .unzip();
        Self { indices, values }
    }

    pub fn to_dense(&self, dim: usize) -> Result<(Vec<f64>, Vec<bool>)> {
        let mut payload = vec![0.0; dim];
        let mut mask = vec![false; dim];
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            let i = i as usize;
            if i >= dim {
                return Err(Error::Data(format!("sparse index {i} outside dimension {dim}")));
            }
            payload[i] = v;
            mask[i] = true;
        }
        Ok((payload, mask))
    }

    /// `count: u32 LE`, then `count` LE `u32` indices, then `count` LE `f64`s.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + self.indices.len() * 12);
        out.extend_from_slice(&(self.indices.len() as u32).to_le_bytes());
        for i in &self.indices {
            out.extend_from_slice(&i.to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let short = || Error::Data("sparse payload truncated".into());
        let count = u32::from_le_bytes(bytes.get(..4).ok_or_else(short)?.try_into().expect("4 bytes")) as usize;
        if bytes.len() != 4 + count * 12 {
            return Err(Error::Data(format!(
                "sparse payload of {} bytes does not hold {count} entries",
                bytes.len()
            )));
        }
        let (idx, vals) = bytes[4..].split_at(count * 4);
        let indices: Vec<u32> = idx
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Data("sparse indices must be strictly ascending".into()));
        }
        let values = vals
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self { indices, values })
    }
}

/// `(w(t) − w_k) / η_k`: the gradient that one SGD step of size `η_k`
/// would have to follow to move `w(t)` to `w_k`.
pub fn weight_update_to_gradient(w_k: &[f64], w_t: &[f64], lr: f64) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::config(format!("client learning rate {lr} must be positive")));
    }
    if w_k.len() != w_t.len() {
        return Err(Error::ShapeMismatch {
            op: "weight_update_to_gradient",
            lhs: vec![w_k.len()],
            rhs: vec![w_t.len()],
        });
    }
    Ok(w_t.iter().zip(w_k).map(|(a, b)| (a - b) / lr).collect())
}

/// Same conversion for a transmitted delta `w_k − w(t)`.
pub fn delta_to_gradient(delta: &[f64], lr: f64) -> Result<Vec<f64>> {
    if !(lr > 0.0) {
        return Err(Error::config(format!("client learning rate {lr} must be positive")));
    }
    Ok(delta.iter().map(|d| -d / lr).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pinned_example() {
        let state = CompressionState::new(0.5, 4).unwrap();
        let (c, next) = compress_topk(&[3.0, -1.0, 0.5, -4.0], &state).unwrap();
        assert_eq!(c.payload, vec![3.0, 0.0, 0.0, -4.0]);
        assert_eq!(c.mask, vec![true, false, false, true]);
        assert_eq!(next.residual, vec![0.0, -1.0, 0.5, 0.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let state = CompressionState::new(0.5, 4).unwrap();
        let (c, _) = compress_topk(&[1.0, -1.0, 1.0, -1.0], &state).unwrap();
        assert_eq!(c.mask, vec![true, true, false, false]);
    }

    #[test]
    fn theta_zero_is_passthrough() {
        let mut state = CompressionState::new(0.0, 3).unwrap();
        state.residual = vec![0.5, 0.0, -1.0];
        let (c, next) = compress_topk(&[1.0, 2.0, 3.0], &state).unwrap();
        assert_eq!(c.payload, vec![1.5, 2.0, 2.0]);
        assert!(next.residual.iter().all(|&r| r == 0.0));
        let (again, _) = compress_topk(&[1.0, 2.0, 3.0], &next).unwrap();
        assert_eq!(again.payload, vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn kept_count_values() {
        assert_eq!(kept_count(0.0, 10), 10);
        assert_eq!(kept_count(0.7, 10), 3);
        assert_eq!(kept_count(0.9, 10), 1);
        assert_eq!(kept_count(0.9, 5), 1);
        assert_eq!(kept_count(0.99, 5), 1);
        assert_eq!(kept_count(0.25, 9814), 7361);
        assert!(CompressionState::new(1.0, 3).is_err());
    }

    #[test]
    fn weight_conversion() {
        let w = [1.0, -2.0, 0.5];
        assert_eq!(weight_update_to_gradient(&w, &w, 0.1).unwrap(), vec![0.0; 3]);
        let g = [0.3, -0.7, 2.0];
        let lr = 0.05;
        let stepped: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a - lr * b).collect();
        let back = weight_update_to_gradient(&stepped, &w, lr).unwrap();
        for (a, b) in back.iter().zip(&g) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!(weight_update_to_gradient(&w, &w, 0.0).is_err());
        assert!(delta_to_gradient(&w, -1.0).is_err());
    }

    #[test]
    fn wire_roundtrip() {
        let sparse = SparseUpdate::from_masked(&[0.0, 2.5, 0.0, -1.0], &[false, true, false, true]);
        assert_eq!(sparse.indices, vec![1, 3]);
        let bytes = sparse.encode();
        assert_eq!(bytes.len(), 4 + 2 * 12);
        assert_eq!(&bytes[..4], &2u32.to_le_bytes());
        let back = SparseUpdate::decode(&bytes).unwrap();
        assert_eq!(back, sparse);
        let (dense, mask) = back.to_dense(4).unwrap();
        assert_eq!(dense, vec![0.0, 2.5, 0.0, -1.0]);
        assert_eq!(mask, vec![false, true, false, true]);
        assert!(back.to_dense(3).is_err());
        assert!(SparseUpdate::decode(&bytes[..bytes.len() - 1]).is_err());
    }

    proptest! {
        #[test]
        fn conservation_and_count(
            steps in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 12), 1..6),
            theta in 0.0f64..0.95,
        ) {
            let mut state = CompressionState::new(theta, 12).unwrap();
            for g in steps {
                let (c, next) = compress_topk(&g, &state).unwrap();
                for i in 0..12 {
                    // Each coordinate lands entirely in one side: exact.
                    prop_assert_eq!(c.payload[i] + next.residual[i], g[i] + state.residual[i]);
                    prop_assert!(!c.mask[i] || next.residual[i] == 0.0);
                    prop_assert!(c.mask[i] || c.payload[i] == 0.0);
                }
                prop_assert_eq!(c.mask.iter().filter(|&&m| m).count(), kept_count(theta, 12));
                state = next;
            }
        }
    }
}
