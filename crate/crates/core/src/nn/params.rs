use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Model weights as `L` flat blocks, input layer first.
///
/// The concatenation of the blocks is the full weight vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerwiseParams<T> {
    blocks: Vec<Vec<T>>,
}

impl<T: Scalar> LayerwiseParams<T> {
    pub fn new(blocks: Vec<Vec<T>>) -> Result<Self> {
        if blocks.is_empty() || blocks.iter().any(Vec::is_empty) {
            return Err(Error::Shape("parameters need at least one nonempty block".into()));
        }
        Ok(Self { blocks })
    }

    pub fn zeros(sizes: &[usize]) -> Result<Self> {
        Self::new(sizes.iter().map(|&n| vec![T::zero(); n]).collect())
    }

    pub fn from_flat(flat: &[T], sizes: &[usize]) -> Result<Self> {
        if flat.len() != sizes.iter().sum::<usize>() {
            return Err(Error::Shape(format!("{} values do not fill blocks {sizes:?}", flat.len())));
        }
        let mut rest = flat;
        let blocks = sizes
            .iter()
            .map(|&n| {
                let (head, tail) = rest.split_at(n);
                rest = tail;
                head.to_vec()
            })
            .collect();
        Self::new(blocks)
    }

    pub fn num_layers(&self) -> usize {
        self.blocks.len()
    }

    pub fn total_dim(&self) -> usize {
        self.blocks.iter().map(Vec::len).sum()
    }

    /// Block of layer `i` (0-based; layer index `i + 1` in 1-based notation).
    pub fn block(&self, i: usize) -> &[T] {
        &self.blocks[i]
    }

    pub fn blocks(&self) -> &[Vec<T>] {
        &self.blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    pub fn into_blocks(self) -> Vec<Vec<T>> {
        self.blocks
    }

    pub fn to_flat(&self) -> Vec<T> {
        self.blocks.concat()
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.blocks.len() == other.blocks.len() && self.blocks.iter().zip(&other.blocks).all(|(a, b)| a.len() == b.len())
    }

    pub fn norm_sq(&self) -> T {
        let mut s = T::zero();
        for b in &self.blocks {
            for &x in b {
                s += x * x;
            }
        }
        s
    }

    pub fn dist_sq(&self, other: &Self) -> T {
        let mut s = T::zero();
        for (a, b) in self.blocks.iter().zip(&other.blocks) {
            for (&x, &y) in a.iter().zip(b) {
                s += (x - y) * (x - y);
            }
        }
        s
    }

    pub fn scaled(&self, c: T) -> Self {
        Self { blocks: self.blocks.iter().map(|b| b.iter().map(|&x| x * c).collect()).collect() }
    }
}

/// A client's (possibly truncated) stochastic gradient.
///
/// `depth` is the 1-based index of the earliest layer whose gradient was
/// computed; blocks are present for layers `depth..=L` only, and
/// `depth == L + 1` means nothing was computed.
#[derive(Debug, Clone, PartialEq)]
pub struct PartialGradient<T> {
    depth: usize,
    num_layers: usize,
    blocks: Vec<Vec<T>>,
    sample_count: usize,
}

impl<T: Scalar> PartialGradient<T> {
    pub fn new(depth: usize, num_layers: usize, blocks: Vec<Vec<T>>, sample_count: usize) -> Result<Self> {
        if depth == 0 || depth > num_layers + 1 {
            return Err(Error::Contract(format!("depth {depth} outside 1..={}", num_layers + 1)));
        }
        if blocks.len() != num_layers + 1 - depth {
            return Err(Error::Contract(format!(
                "depth {depth} of {num_layers} layers needs {} blocks, got {}",
                num_layers + 1 - depth,
                blocks.len()
            )));
        }
        Ok(Self { depth, num_layers, blocks, sample_count })
    }

    /// Wraps a full gradient (depth 1).
    pub fn full(grad: LayerwiseParams<T>, sample_count: usize) -> Self {
        let num_layers = grad.num_layers();
        Self { depth: 1, num_layers, blocks: grad.into_blocks(), sample_count }
    }

    /// An empty update from a client that finished no layer.
    pub fn empty(num_layers: usize, sample_count: usize) -> Self {
        Self { depth: num_layers + 1, num_layers, blocks: Vec::new(), sample_count }
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_layers(&self) -> usize {
        self.num_layers
    }

    pub fn sample_count(&self) -> usize {
        self.sample_count
    }

    pub fn is_full(&self) -> bool {
        self.depth == 1
    }

    /// Blocks for layers `depth..=L`, in layer order.
    pub fn blocks(&self) -> &[Vec<T>] {
        &self.blocks
    }

    /// Gradient block of 0-based layer `i`, if it was computed.
    pub fn layer(&self, i: usize) -> Option<&[T]> {
        (i + 1 >= self.depth && i < self.num_layers).then(|| self.blocks[i + 1 - self.depth].as_slice())
    }

    /// Keeps only layers `depth..=L` of this gradient.
    pub fn truncate(&self, depth: usize) -> Result<Self> {
        if depth < self.depth {
            return Err(Error::Contract(format!("cannot extend a depth-{} gradient to depth {depth}", self.depth)));
        }
        if depth > self.num_layers + 1 {
            return Err(Error::Contract(format!("depth {depth} outside 1..={}", self.num_layers + 1)));
        }
        Ok(Self {
            depth,
            num_layers: self.num_layers,
            blocks: self.blocks[depth - self.depth..].to_vec(),
            sample_count: self.sample_count,
        })
    }

    pub fn into_full(self) -> Result<LayerwiseParams<T>> {
        if !self.is_full() {
            return Err(Error::Contract(format!("expected a full gradient, got depth {}", self.depth)));
        }
        LayerwiseParams::new(self.blocks)
    }

    pub(crate) fn check_against(&self, params: &LayerwiseParams<T>) -> Result<()> {
        if self.num_layers != params.num_layers() {
            return Err(Error::Shape(format!(
                "gradient has {} layers, model has {}",
                self.num_layers,
                params.num_layers()
            )));
        }
        for (k, b) in self.blocks.iter().enumerate() {
            let i = self.depth - 1 + k;
            if b.len() != params.block(i).len() {
                return Err(Error::Shape(format!(
                    "gradient block for layer {} has {} entries, parameters have {}",
                    i + 1,
                    b.len(),
                    params.block(i).len()
                )));
            }
        }
        Ok(())
    }
}

/// `w - eta * g`, blockwise; the gradient must be full.
pub fn apply_local_step<T: Scalar>(params: &LayerwiseParams<T>, grad: &PartialGradient<T>, eta: T) -> Result<LayerwiseParams<T>> {
    if !grad.is_full() {
        return Err(Error::Contract(format!(
            "local models are formed from full gradients only; got depth {}",
            grad.depth()
        )));
    }
    if !(eta > T::zero()) {
        return Err(Error::Contract("step size must be positive".into()));
    }
    grad.check_against(params)?;
    let blocks = params
        .blocks()
        .iter()
        .zip(grad.blocks())
        .map(|(w, g)| w.iter().zip(g).map(|(&w, &g)| w - eta * g).collect())
        .collect();
    LayerwiseParams::new(blocks)
}
