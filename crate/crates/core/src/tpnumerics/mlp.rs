use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{FloatScalar, Scalar};
use crate::tpnumerics::matrix::DenseMatrix;

/// Cubic coefficient of the tanh GeLU approximation.
pub const GELU_CUBIC: f64 = 0.044715;

pub fn gelu<T: FloatScalar>(x: T) -> T {
    gelu_with(x, GELU_CUBIC)
}

/// GeLU with an explicit cubic coefficient; only the verifier's negative
/// control passes anything other than [`GELU_CUBIC`].
pub fn gelu_with<T: FloatScalar>(x: T, cubic: f64) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(cubic);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_derivative<T: FloatScalar>(x: T) -> T {
    let half = T::from_f64_lossy(0.5);
    let c = T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = T::from_f64_lossy(GELU_CUBIC);
    let three = T::from_f64_lossy(3.0);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * k * x * x)
}

/// Two-matmul MLP block: `Z = GeLU(X A) B`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpLayer<T> {
    /// `hidden x ffn`
    pub a: DenseMatrix<T>,
    /// `ffn x hidden`
    pub b: DenseMatrix<T>,
}

impl<T: Scalar> MlpLayer<T> {
    pub fn new(a: DenseMatrix<T>, b: DenseMatrix<T>) -> Result<Self> {
        if a.cols() != b.rows() || a.rows() != b.cols() {
            return Err(Error::DimensionMismatch(format!(
                "A is {:?}, B is {:?}; expected hidden x ffn and ffn x hidden",
                a.shape(),
                b.shape()
            )));
        }
        Ok(Self { a, b })
    }

    pub fn hidden(&self) -> usize {
        self.a.rows()
    }

    pub fn ffn(&self) -> usize {
        self.a.cols()
    }
}

impl<T: FloatScalar> MlpLayer<T> {
    /// Random layer with `ffn = 4 * hidden`.
    pub fn random(hidden: usize, rng: &mut impl Rng) -> Self {
        Self::random_with_ffn(hidden, 4 * hidden, rng)
    }

    pub fn random_with_ffn(hidden: usize, ffn: usize, rng: &mut impl Rng) -> Self {
        let a = DenseMatrix::random(hidden, ffn, 1.0, rng);
        let b = DenseMatrix::random(ffn, hidden, 1.0, rng);
        Self { a, b }
    }
}

fn check_input<T: Scalar>(x: &DenseMatrix<T>, hidden: usize) -> Result<()> {
    if x.cols() != hidden {
        return Err(Error::DimensionMismatch(format!(
            "input has {} columns, layer hidden size is {hidden}",
            x.cols()
        )));
    }
    Ok(())
}

pub fn mlp_forward_dense<T: FloatScalar>(x: &DenseMatrix<T>, layer: &MlpLayer<T>) -> Result<DenseMatrix<T>> {
    check_input(x, layer.hidden())?;
    x.matmul(&layer.a)?.map(gelu).matmul(&layer.b)
}

/// Gradients of `Z = GeLU(X A) B` with respect to `A` and `B` given `dL/dZ`.
pub fn mlp_backward<T: FloatScalar>(
    x: &DenseMatrix<T>,
    a: &DenseMatrix<T>,
    b: &DenseMatrix<T>,
    upstream: &DenseMatrix<T>,
) -> Result<(DenseMatrix<T>, DenseMatrix<T>)> {
    check_input(x, a.rows())?;
    if upstream.shape() != (x.rows(), b.cols()) {
        return Err(Error::DimensionMismatch(format!(
            "upstream gradient is {:?}, output is {:?}",
            upstream.shape(),
            (x.rows(), b.cols())
        )));
    }
    let pre = x.matmul(a)?;
    let y = pre.map(gelu);
    let grad_b = y.transpose().matmul(upstream)?;
    let d_pre = upstream.matmul(&b.transpose())?.hadamard(&pre.map(gelu_derivative))?;
    let grad_a = x.transpose().matmul(&d_pre)?;
    Ok((grad_a, grad_b))
}

/// One GPU's share of a column-partitioned `(A, B)` pair: columns `cols` of
/// `A` and the matching rows of `B`. Parameters and gradients share this
/// layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnFragment<T> {
    pub cols: Vec<usize>,
    /// `hidden x cols.len()`
    pub a: DenseMatrix<T>,
    /// `cols.len() x hidden`
    pub b: DenseMatrix<T>,
}

/// A column-partitioned `(A, B)` pair across the ranks of one TP group.
#[derive(Debug, Clone, PartialEq)]
pub struct ShardedPair<T> {
    k: usize,
    hidden: usize,
    fragments: Vec<ColumnFragment<T>>,
}

impl<T: Scalar> ShardedPair<T> {
    /// Slices dense `A` / `B` by the per-rank column lists.
    pub fn from_dense(a: &DenseMatrix<T>, b: &DenseMatrix<T>, layout: &[Vec<usize>]) -> Result<Self> {
        let k = a.cols();
        if b.rows() != k || a.rows() != b.cols() {
            return Err(Error::DimensionMismatch("A/B shapes are not transposes".into()));
        }
        check_partition(k, layout)?;
        let fragments = layout
            .iter()
            .map(|cols| ColumnFragment { cols: cols.clone(), a: a.select_cols(cols), b: b.select_rows(cols) })
            .collect();
        Ok(Self { k, hidden: a.rows(), fragments })
    }

    /// Builds from fragments owning disjoint columns; fragments may be empty.
    pub fn from_fragments(k: usize, hidden: usize, fragments: Vec<ColumnFragment<T>>) -> Result<Self> {
        let layout: Vec<Vec<usize>> = fragments.iter().map(|f| f.cols.clone()).collect();
        check_partition(k, &layout)?;
        for f in &fragments {
            if f.a.shape() != (hidden, f.cols.len()) || f.b.shape() != (f.cols.len(), hidden) {
                return Err(Error::DimensionMismatch("fragment shape does not match its columns".into()));
            }
        }
        Ok(Self { k, hidden, fragments })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn degree(&self) -> usize {
        self.fragments.len()
    }

    pub fn fragments(&self) -> &[ColumnFragment<T>] {
        &self.fragments
    }

    pub fn layout(&self) -> Vec<Vec<usize>> {
        self.fragments.iter().map(|f| f.cols.clone()).collect()
    }

    /// Reassembles dense `A` and `B`.
    pub fn assemble(&self) -> (DenseMatrix<T>, DenseMatrix<T>) {
        let mut a = DenseMatrix::zeros(self.hidden, self.k);
        let mut b = DenseMatrix::zeros(self.k, self.hidden);
        for f in &self.fragments {
            for (local, &j) in f.cols.iter().enumerate() {
                for r in 0..self.hidden {
                    a.set(r, j, f.a.get(r, local));
                    b.set(j, r, f.b.get(local, r));
                }
            }
        }
        (a, b)
    }
}

pub(crate) fn check_partition(k: usize, layout: &[Vec<usize>]) -> Result<()> {
    let mut seen = vec![false; k];
    for cols in layout {
        for &j in cols {
            match seen.get_mut(j) {
                None => return Err(Error::IncompletePartition(format!("column {j} outside 0..{k}"))),
                Some(s) if *s => return Err(Error::IncompletePartition(format!("column {j} assigned twice"))),
                Some(s) => *s = true,
            }
        }
    }
    if let Some(j) = seen.iter().position(|s| !s) {
        return Err(Error::IncompletePartition(format!("column {j} is not assigned to any rank")));
    }
    Ok(())
}

/// One data-parallel replica of an MLP block under tensor parallelism.
#[derive(Debug, Clone, PartialEq)]
pub struct TpReplica<T> {
    pub params: ShardedPair<T>,
    pub grads: Option<ShardedPair<T>>,
}

impl<T: Scalar> TpReplica<T> {
    pub fn new(layer: &MlpLayer<T>, layout: &[Vec<usize>]) -> Result<Self> {
        Ok(Self { params: ShardedPair::from_dense(&layer.a, &layer.b, layout)?, grads: None })
    }

    pub fn degree(&self) -> usize {
        self.params.degree()
    }

    /// Installs dense gradients, sliced to this replica's layout.
    pub fn set_dense_grads(&mut self, grad_a: &DenseMatrix<T>, grad_b: &DenseMatrix<T>) -> Result<()> {
        self.grads = Some(ShardedPair::from_dense(grad_a, grad_b, &self.params.layout())?);
        Ok(())
    }
}

impl<T: FloatScalar> TpReplica<T> {
    /// Shard-local backward pass; each rank only touches its own columns.
    pub fn backward(&mut self, x: &DenseMatrix<T>, upstream: &DenseMatrix<T>) -> Result<()> {
        let fragments = self
            .params
            .fragments
            .iter()
            .map(|f| {
                let (ga, gb) = mlp_backward(x, &f.a, &f.b, upstream)?;
                Ok(ColumnFragment { cols: f.cols.clone(), a: ga, b: gb })
            })
            .collect::<Result<Vec<_>>>()?;
        self.grads = Some(ShardedPair { k: self.params.k, hidden: self.params.hidden, fragments });
        Ok(())
    }
}

/// Sum of per-rank partial outputs `GeLU(X A_i) B_i`, accumulated in
/// ascending rank order.
pub fn mlp_forward_tp<T: FloatScalar>(x: &DenseMatrix<T>, replica: &TpReplica<T>) -> Result<DenseMatrix<T>> {
    check_input(x, replica.params.hidden)?;
    let mut out: Option<DenseMatrix<T>> = None;
    for f in &replica.params.fragments {
        if f.cols.is_empty() {
            continue;
        }
        let partial = x.matmul(&f.a)?.map(gelu).matmul(&f.b)?;
        out = Some(match out {
            None => partial,
            Some(acc) => acc.add(&partial)?,
        });
    }
    out.ok_or_else(|| Error::IncompletePartition("replica holds no columns".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn gelu_sanity() {
        assert_eq!(gelu(0.0f64), 0.0);
        let mut prev = gelu(-0.5f64);
        for i in 1..=100 {
            let x = -0.5 + i as f64 * 0.05;
            let g = gelu(x);
            assert!(g > prev, "GeLU not increasing at {x}");
            prev = g;
        }
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for &x in &[-2.0f64, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_input_gives_zero_output() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let layer = MlpLayer::<f64>::random(3, &mut rng);
        let z = mlp_forward_dense(&DenseMatrix::zeros(2, 3), &layer).unwrap();
        assert!(z.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn incomplete_layout_is_rejected() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let layer = MlpLayer::<f64>::random_with_ffn(2, 4, &mut rng);
        let err = TpReplica::new(&layer, &[vec![0, 1], vec![3]]).unwrap_err();
        assert!(matches!(err, Error::IncompletePartition(_)));
        assert!(TpReplica::new(&layer, &[vec![0, 1, 2], vec![2, 3]]).is_err());
    }
}
