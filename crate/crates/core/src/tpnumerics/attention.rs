use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::FloatScalar;
use crate::tpnumerics::matrix::DenseMatrix;
use crate::tpnumerics::mlp::check_partition;

/// Parameters of one attention head. The four matrices always travel
/// together, so a head is the unit of placement.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead<T> {
    /// `hidden x head_dim`
    pub wq: DenseMatrix<T>,
    pub wk: DenseMatrix<T>,
    pub wv: DenseMatrix<T>,
    /// `head_dim x hidden`
    pub wo: DenseMatrix<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayer<T> {
    hidden: usize,
    head_dim: usize,
    heads: Vec<AttentionHead<T>>,
}

impl<T: FloatScalar> AttentionLayer<T> {
    pub fn new(heads: Vec<AttentionHead<T>>) -> Result<Self> {
        let first = heads.first().ok_or_else(|| Error::InvalidArgument("attention layer needs a head".into()))?;
        let (hidden, head_dim) = first.wq.shape();
        for (i, h) in heads.iter().enumerate() {
            let ok = h.wq.shape() == (hidden, head_dim)
                && h.wk.shape() == (hidden, head_dim)
                && h.wv.shape() == (hidden, head_dim)
                && h.wo.shape() == (head_dim, hidden);
            if !ok {
                return Err(Error::DimensionMismatch(format!("head {i} shapes differ from head 0")));
            }
        }
        Ok(Self { hidden, head_dim, heads })
    }

    pub fn random(hidden: usize, n_heads: usize, head_dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (hidden as f64).sqrt();
        let heads = (0..n_heads)
            .map(|_| AttentionHead {
                wq: DenseMatrix::random(hidden, head_dim, scale, rng),
                wk: DenseMatrix::random(hidden, head_dim, scale, rng),
                wv: DenseMatrix::random(hidden, head_dim, scale, rng),
                wo: DenseMatrix::random(head_dim, hidden, scale, rng),
            })
            .collect();
        Self { hidden, head_dim, heads }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn n_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn heads(&self) -> &[AttentionHead<T>] {
        &self.heads
    }
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows<T: FloatScalar>(m: &DenseMatrix<T>) -> DenseMatrix<T> {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
        let sum = exps.iter().fold(T::zero(), |acc, &e| acc + e);
        for (c, e) in exps.into_iter().enumerate() {
            out.set(r, c, e / sum);
        }
    }
    out
}

/// `softmax(Q K^T / sqrt(d)) V`.
pub fn scaled_dot_product<T: FloatScalar>(
    q: &DenseMatrix<T>,
    k: &DenseMatrix<T>,
    v: &DenseMatrix<T>,
) -> Result<DenseMatrix<T>> {
    let d = T::from_f64_lossy(q.cols() as f64).sqrt();
    let scores = q.matmul(&k.transpose())?.map(|s| s / d);
    softmax_rows(&scores).matmul(v)
}

fn check_input<T: FloatScalar>(x: &DenseMatrix<T>, hidden: usize) -> Result<()> {
    if x.cols() != hidden {
        return Err(Error::DimensionMismatch(format!(
            "input has {} columns, layer hidden size is {hidden}",
            x.cols()
        )));
    }
    Ok(())
}

/// Dense multi-head attention: project with the concatenated weights,
/// attend per head, concatenate, and apply the stacked output projection.
pub fn attention_forward_dense<T: FloatScalar>(x: &DenseMatrix<T>, layer: &AttentionLayer<T>) -> Result<DenseMatrix<T>> {
    check_input(x, layer.hidden)?;
    let cat = |f: fn(&AttentionHead<T>) -> &DenseMatrix<T>| {
        let parts: Vec<&DenseMatrix<T>> = layer.heads.iter().map(f).collect();
        DenseMatrix::hcat(&parts)
    };
    let q = x.matmul(&cat(|h| &h.wq)?)?;
    let k = x.matmul(&cat(|h| &h.wk)?)?;
    let v = x.matmul(&cat(|h| &h.wv)?)?;
    let wo_parts: Vec<&DenseMatrix<T>> = layer.heads.iter().map(|h| &h.wo).collect();
    let wo = DenseMatrix::vcat(&wo_parts)?;

    let d = layer.head_dim;
    let outputs = (0..layer.n_heads())
        .map(|i| {
            let cols: Vec<usize> = (i * d..(i + 1) * d).collect();
            scaled_dot_product(&q.select_cols(&cols), &k.select_cols(&cols), &v.select_cols(&cols))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&DenseMatrix<T>> = outputs.iter().collect();
    DenseMatrix::hcat(&refs)?.matmul(&wo)
}

/// Attention block sharded by whole heads across the ranks of a TP group.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionReplica<T> {
    hidden: usize,
    assignment: Vec<Vec<usize>>,
    shards: Vec<Vec<AttentionHead<T>>>,
}

impl<T: FloatScalar> AttentionReplica<T> {
    /// `assignment[r]` lists the heads placed on rank `r`. Every head must
    /// appear exactly once.
    pub fn new(layer: &AttentionLayer<T>, assignment: &[Vec<usize>]) -> Result<Self> {
        check_partition(layer.n_heads(), assignment)?;
        let shards = assignment.iter().map(|hs| hs.iter().map(|&i| layer.heads[i].clone()).collect()).collect();
        Ok(Self { hidden: layer.hidden, assignment: assignment.to_vec(), shards })
    }

    pub fn degree(&self) -> usize {
        self.shards.len()
    }

    pub fn assignment(&self) -> &[Vec<usize>] {
        &self.assignment
    }
}

/// Sum over ranks of each rank's `sum_i head_i(X) W_O^(i)`, in ascending
/// rank order.
pub fn attention_forward_tp<T: FloatScalar>(x: &DenseMatrix<T>, replica: &AttentionReplica<T>) -> Result<DenseMatrix<T>> {
    check_input(x, replica.hidden)?;
    let mut out: Option<DenseMatrix<T>> = None;
    for shard in &replica.shards {
        for h in shard {
            let head = scaled_dot_product(&x.matmul(&h.wq)?, &x.matmul(&h.wk)?, &x.matmul(&h.wv)?)?;
            let partial = head.matmul(&h.wo)?;
            out = Some(match out {
                None => partial,
                Some(acc) => acc.add(&partial)?,
            });
        }
    }
    out.ok_or_else(|| Error::IncompletePartition("replica holds no heads".into()))
}

/// Contiguous balanced head assignment, larger ranks first.
pub fn contiguous_head_assignment(n_heads: usize, n: usize) -> Vec<Vec<usize>> {
    crate::shardmap::contiguous_ranges(n_heads, n).into_iter().map(|r| r.collect()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one() {
        let m = DenseMatrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 1000.0, 1000.0, -1000.0]).unwrap();
        let s = softmax_rows(&m);
        for r in 0..2 {
            let sum: f64 = s.row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-15);
        }
        assert!((s.get(1, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn single_head_single_rank() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = AttentionLayer::<f64>::random(6, 1, 3, &mut rng);
        let x = DenseMatrix::random(5, 6, 1.0, &mut rng);
        let dense = attention_forward_dense(&x, &layer).unwrap();
        let tp = attention_forward_tp(&x, &AttentionReplica::new(&layer, &[vec![0]]).unwrap()).unwrap();
        assert!(tp.relative_error(&dense).unwrap() < 1e-14);
    }

    #[test]
    fn bad_head_assignments_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = AttentionLayer::<f64>::random(4, 3, 2, &mut rng);
        assert!(AttentionReplica::new(&layer, &[vec![0, 1], vec![1, 2]]).is_err());
        assert!(AttentionReplica::new(&layer, &[vec![0], vec![2]]).is_err());
        assert!(AttentionReplica::new(&layer, &[vec![0, 1, 2, 3]]).is_err());
    }

    #[test]
    fn contiguous_assignment_shape() {
        let a = contiguous_head_assignment(8, 3);
        assert_eq!(a, vec![vec![0, 1, 2], vec![3, 4, 5], vec![6, 7]]);
    }
}
