//! Network building blocks: learnable parameters, Chebyshev graph
//! convolution, batch normalization, and the conv-BN-LeakyReLU block.
//! Every layer carries its own exact reverse-mode backward.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::operator::ScaledGraphOperator;

/// A learnable tensor with its gradient accumulator and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: DMatrix<f64>,
    pub grad: DMatrix<f64>,
    pub m1: DMatrix<f64>,
    pub m2: DMatrix<f64>,
}

impl Param {
    pub fn zeros(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self {
            name: name.into(),
            value: DMatrix::zeros(rows, cols),
            grad: DMatrix::zeros(rows, cols),
            m1: DMatrix::zeros(rows, cols),
            m2: DMatrix::zeros(rows, cols),
        }
    }

    pub fn fill_uniform(&mut self, bound: f64, rng: &mut ChaCha8Rng) {
        for i in 0..self.value.nrows() {
            for j in 0..self.value.ncols() {
                self.value[(i, j)] = rng.random::<f64>() * 2.0 * bound - bound;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Chebyshev spectral graph convolution of order K:
/// Y = Σ_k T_k(L̂) X W_k + b with T_0 = X, T_1 = L̂X, T_k = 2L̂T_{k-1} - T_{k-2}.
#[derive(Debug, Clone)]
pub struct ChebLayer {
    pub weights: Vec<Param>,
    /// Absent when the layer feeds a BatchNorm, which would cancel it.
    pub bias: Option<Param>,
}

impl ChebLayer {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, order: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::without_bias(prefix, c_in, c_out, order, rng);
        layer.bias = Some(Param::zeros(format!("{prefix}.b"), 1, c_out));
        layer
    }

    pub fn without_bias(prefix: &str, c_in: usize, c_out: usize, order: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(order >= 1);
        let bound = (6.0 / (c_in as f64 * order as f64 + c_out as f64)).sqrt();
        let mut weights = Vec::with_capacity(order);
        for k in 0..order {
            let mut w = Param::zeros(format!("{prefix}.w{k}"), c_in, c_out);
            w.fill_uniform(bound, rng);
            weights.push(w);
        }
        Self { weights, bias: None }
    }

    pub fn order(&self) -> usize {
        self.weights.len()
    }

    pub fn forward(&self, op: &ScaledGraphOperator, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weights[0].value;
        let mut t_prev2 = x.clone();
        let mut t_prev1 = DMatrix::zeros(0, 0);
        for (k, w) in self.weights.iter().enumerate().skip(1) {
            let t = if k == 1 {
                op.apply(x)
            } else {
                2.0 * op.apply(&t_prev1) - &t_prev2
            };
            y += &t * &w.value;
            if k >= 2 {
                t_prev2 = std::mem::replace(&mut t_prev1, t);
            } else {
                t_prev1 = t;
            }
        }
        if let Some(bias) = &self.bias {
            for i in 0..y.nrows() {
                for j in 0..y.ncols() {
                    y[(i, j)] += bias.value[(0, j)];
                }
            }
        }
        y
    }

    /// Accumulate parameter gradients and return dLoss/dX. The Chebyshev
    /// basis is recomputed from the cached layer input; the input gradient
    /// uses the same recurrence applied to the output gradient, which is
    /// valid because T_k(L̂) is symmetric.
    pub fn backward(
        &mut self,
        op: &ScaledGraphOperator,
        x_in: &DMatrix<f64>,
        d_out: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        if let Some(bias) = &mut self.bias {
            let col_sums = d_out.row_sum();
            for j in 0..bias.grad.ncols() {
                bias.grad[(0, j)] += col_sums[j];
            }
        }
        // weights: dW_k = T_k(L̂ X)ᵀ dY
        {
            let mut t_prev2 = x_in.clone();
            self.weights[0].grad += t_prev2.transpose() * d_out;
            let mut t_prev1 = DMatrix::zeros(0, 0);
            for k in 1..self.order() {
                let t = if k == 1 {
                    op.apply(x_in)
                } else {
                    2.0 * op.apply(&t_prev1) - &t_prev2
                };
                self.weights[k].grad += t.transpose() * d_out;
                if k >= 2 {
                    t_prev2 = std::mem::replace(&mut t_prev1, t);
                } else {
                    t_prev1 = t;
                }
            }
        }
        // input: dX = Σ_k T_k(L̂) dY W_kᵀ
        let mut dx = d_out * self.weights[0].value.transpose();
        let mut u_prev2 = d_out.clone();
        let mut u_prev1 = DMatrix::zeros(0, 0);
        for k in 1..self.order() {
            let u = if k == 1 {
                op.apply(d_out)
            } else {
                2.0 * op.apply(&u_prev1) - &u_prev2
            };
            dx += &u * self.weights[k].value.transpose();
            if k >= 2 {
                u_prev2 = std::mem::replace(&mut u_prev1, u);
            } else {
                u_prev1 = u;
            }
        }
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = self.weights.iter_mut().collect();
        if let Some(bias) = &mut self.bias {
            out.push(bias);
        }
        out
    }
}

/// Whether a forward pass uses batch statistics (and optionally updates the
/// running estimates) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train { update_stats: bool },
    Eval,
}

/// Per-channel batch normalization over all vertices.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub scale: Param,
    pub shift: Param,
    pub running_mean: DVector<f64>,
    pub running_var: DVector<f64>,
    pub eps: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    xhat: DMatrix<f64>,
    inv_std: DVector<f64>,
}

impl BatchNorm {
    pub fn new(prefix: &str, channels: usize, eps: f64, momentum: f64) -> Self {
        let mut scale = Param::zeros(format!("{prefix}.scale"), 1, channels);
        scale.value.fill(1.0);
        let shift = Param::zeros(format!("{prefix}.shift"), 1, channels);
        Self {
            scale,
            shift,
            running_mean: DVector::zeros(channels),
            running_var: DVector::from_element(channels, 1.0),
            eps,
            momentum,
        }
    }

    pub fn forward(&mut self, z: &DMatrix<f64>, phase: Phase) -> (DMatrix<f64>, Option<BnCache>) {
        let n = z.nrows() as f64;
        let c = z.ncols();
        match phase {
            Phase::Train { update_stats } => {
                let mut mean = DVector::zeros(c);
                let mut var = DVector::zeros(c);
                for j in 0..c {
                    let col = z.column(j);
                    let mu = col.sum() / n;
                    let v = col.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
                    mean[j] = mu;
                    var[j] = v;
                }
                if update_stats {
                    for j in 0..c {
                        self.running_mean[j] =
                            (1.0 - self.momentum) * self.running_mean[j] + self.momentum * mean[j];
                        self.running_var[j] =
                            (1.0 - self.momentum) * self.running_var[j] + self.momentum * var[j];
                    }
                }
                let inv_std = var.map(|v| 1.0 / (v + self.eps).sqrt());
                let mut xhat = z.clone();
                for j in 0..c {
                    let (mu, istd) = (mean[j], inv_std[j]);
                    for i in 0..z.nrows() {
                        xhat[(i, j)] = (xhat[(i, j)] - mu) * istd;
                    }
                }
                let mut out = xhat.clone();
                for j in 0..c {
                    let (g, b) = (self.scale.value[(0, j)], self.shift.value[(0, j)]);
                    for i in 0..out.nrows() {
                        out[(i, j)] = out[(i, j)] * g + b;
                    }
                }
                (out, Some(BnCache { xhat, inv_std }))
            }
            Phase::Eval => {
                let mut out = z.clone();
                for j in 0..c {
                    let istd = 1.0 / (self.running_var[j] + self.eps).sqrt();
                    let mu = self.running_mean[j];
                    let (g, b) = (self.scale.value[(0, j)], self.shift.value[(0, j)]);
                    for i in 0..out.nrows() {
                        out[(i, j)] = (out[(i, j)] - mu) * istd * g + b;
                    }
                }
                (out, None)
            }
        }
    }

    /// Backward through training-mode normalization (batch statistics are a
    /// function of the input, so the gradient includes their paths).
    pub fn backward(&mut self, cache: &BnCache, d_out: &DMatrix<f64>) -> DMatrix<f64> {
        let n = d_out.nrows() as f64;
        let c = d_out.ncols();
        let mut dz = DMatrix::zeros(d_out.nrows(), d_out.ncols());
        for j in 0..c {
            let gamma = self.scale.value[(0, j)];
            let mut sum_d = 0.0;
            let mut sum_dx = 0.0;
            for i in 0..d_out.nrows() {
                let d = d_out[(i, j)];
                sum_d += d;
                sum_dx += d * cache.xhat[(i, j)];
            }
            self.shift.grad[(0, j)] += sum_d;
            self.scale.grad[(0, j)] += sum_dx;
            let istd = cache.inv_std[j];
            // dxhat = gamma * d; dz = istd/N * (N dxhat - Σdxhat - xhat Σ(dxhat·xhat))
            let sum_dxhat = gamma * sum_d;
            let sum_dxhat_xhat = gamma * sum_dx;
            for i in 0..d_out.nrows() {
                let dxhat = gamma * d_out[(i, j)];
                dz[(i, j)] =
                    istd / n * (n * dxhat - sum_dxhat - cache.xhat[(i, j)] * sum_dxhat_xhat);
            }
        }
        dz
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.scale, &mut self.shift]
    }
}

/// ChebConv followed by batch normalization and LeakyReLU.
#[derive(Debug, Clone)]
pub struct ConvBlock {
    pub conv: ChebLayer,
    pub bn: BatchNorm,
    pub slope: f64,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    x_in: DMatrix<f64>,
    bn: BnCache,
    pre_act: DMatrix<f64>,
}

impl ConvBlock {
    pub fn new(
        prefix: &str,
        c_in: usize,
        c_out: usize,
        order: usize,
        slope: f64,
        bn_eps: f64,
        bn_momentum: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: ChebLayer::without_bias(&format!("{prefix}.conv"), c_in, c_out, order, rng),
            bn: BatchNorm::new(&format!("{prefix}.bn"), c_out, bn_eps, bn_momentum),
            slope,
        }
    }

    pub fn forward(
        &mut self,
        op: &ScaledGraphOperator,
        x: &DMatrix<f64>,
        phase: Phase,
    ) -> (DMatrix<f64>, Option<BlockCache>) {
        let z = self.conv.forward(op, x);
        let (pre_act, bn_cache) = self.bn.forward(&z, phase);
        let out = pre_act.map(|v| if v > 0.0 { v } else { self.slope * v });
        match bn_cache {
            Some(bn) => (
                out,
                Some(BlockCache {
                    x_in: x.clone(),
                    bn,
                    pre_act,
                }),
            ),
            None => (out, None),
        }
    }

    pub fn backward(
        &mut self,
        op: &ScaledGraphOperator,
        cache: &BlockCache,
        d_out: &DMatrix<f64>,
    ) -> DMatrix<f64> {
        let mut d_pre = d_out.clone();
        for i in 0..d_pre.nrows() {
            for j in 0..d_pre.ncols() {
                if cache.pre_act[(i, j)] <= 0.0 {
                    d_pre[(i, j)] *= self.slope;
                }
            }
        }
        let dz = self.bn.backward(&cache.bn, &d_pre);
        self.conv.backward(op, &cache.x_in, &dz)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = self.conv.params_mut();
        out.extend(self.bn.params_mut());
        out
    }
}

/// Vertex-wise fully connected layer.
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Param,
    pub bias: Param,
}

impl LinearHead {
    pub fn new(prefix: &str, c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / (c_in as f64 + c_out as f64)).sqrt();
        let mut weight = Param::zeros(format!("{prefix}.w"), c_in, c_out);
        weight.fill_uniform(bound, rng);
        let bias = Param::zeros(format!("{prefix}.b"), 1, c_out);
        Self { weight, bias }
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut y = x * &self.weight.value;
        for i in 0..y.nrows() {
            for j in 0..y.ncols() {
                y[(i, j)] += self.bias.value[(0, j)];
            }
        }
        y
    }

    pub fn backward(&mut self, x_in: &DMatrix<f64>, d_out: &DMatrix<f64>) -> DMatrix<f64> {
        self.weight.grad += x_in.transpose() * d_out;
        let col_sums = d_out.row_sum();
        for j in 0..self.bias.grad.ncols() {
            self.bias.grad[(0, j)] += col_sums[j];
        }
        d_out * self.weight.value.transpose()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sparse::SparseMatrix;
    use approx::assert_relative_eq;
    use rand::SeedableRng;

    fn single_vertex_op() -> ScaledGraphOperator {
        // an isolated vertex has L_sym = 0, so the scaled operator is -I
        ScaledGraphOperator::from_sparse(
            SparseMatrix::from_triplets(1, 1, &[(0, 0, -1.0)]).unwrap(),
        )
    }

    #[test]
    fn cheb_zero_weights_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = ChebLayer::new("t", 2, 3, 3, &mut rng);
        for w in &mut layer.weights {
            w.value.fill(0.0);
        }
        let op = single_vertex_op();
        let x = DMatrix::from_row_slice(1, 2, &[1.0, -2.0]);
        let y = layer.forward(&op, &x);
        assert!(y.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cheb_isolated_vertex_unrolls_recurrence() {
        // with L̂ = -I: T_0 = x, T_1 = -x, T_2 = 2(-1)(-x) - x = x
        // so y = (W_0 - W_1 + W_2) x + b
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut layer = ChebLayer::new("t", 2, 2, 3, &mut rng);
        layer.bias.as_mut().unwrap().value[(0, 0)] = 0.25;
        layer.bias.as_mut().unwrap().value[(0, 1)] = -0.5;
        let op = single_vertex_op();
        let x = DMatrix::from_row_slice(1, 2, &[0.7, -1.3]);
        let y = layer.forward(&op, &x);
        let combined =
            &layer.weights[0].value - &layer.weights[1].value + &layer.weights[2].value;
        let expect = &x * combined + layer.bias.as_ref().unwrap().value.clone();
        assert_relative_eq!(y, expect, epsilon = 1e-14);
    }

    #[test]
    fn cheb_order_one_is_vertexwise_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = ChebLayer::new("t", 3, 2, 1, &mut rng);
        let mesh = crate::fixtures::icosphere(1);
        let op = ScaledGraphOperator::from_mesh(&mesh).unwrap();
        let x = DMatrix::from_fn(mesh.vertex_count(), 3, |i, j| (i * 3 + j) as f64 * 0.01);
        let y = layer.forward(&op, &x);
        let mut expect = &x * &layer.weights[0].value;
        for i in 0..expect.nrows() {
            for j in 0..expect.ncols() {
                expect[(i, j)] += layer.bias.as_ref().unwrap().value[(0, j)];
            }
        }
        assert_relative_eq!(y, expect, epsilon = 1e-14);
    }

    #[test]
    fn cheb_order_two_identity() {
        // for K = 2 the layer must equal W_0 X + W_1 L̂X computed directly
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layer = ChebLayer::new("t", 2, 2, 2, &mut rng);
        let mesh = crate::fixtures::icosphere(1);
        let op = ScaledGraphOperator::from_mesh(&mesh).unwrap();
        let x = DMatrix::from_fn(mesh.vertex_count(), 2, |i, j| ((i + j) as f64).sin());
        let y = layer.forward(&op, &x);
        let direct = &x * &layer.weights[0].value + op.apply(&x) * &layer.weights[1].value;
        assert_relative_eq!(y, direct, epsilon = 1e-13);
    }

    #[test]
    fn batchnorm_centers_constant_channel() {
        let mut bn = BatchNorm::new("t", 2, 1e-5, 0.1);
        let z = DMatrix::from_fn(6, 2, |i, j| if j == 0 { 3.5 } else { i as f64 });
        let (out, _) = bn.forward(&z, Phase::Train { update_stats: false });
        for i in 0..6 {
            // constant channel normalizes to zero (scale 1, shift 0)
            assert!(out[(i, 0)].abs() < 1e-9);
        }
    }

    #[test]
    fn block_negative_preactivation_scaled_by_slope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mesh = crate::fixtures::icosphere(1);
        let op = ScaledGraphOperator::from_mesh(&mesh).unwrap();
        let mut block = ConvBlock::new("t", 2, 2, 3, 0.01, 1e-5, 0.1, &mut rng);
        let x = DMatrix::from_fn(mesh.vertex_count(), 2, |i, j| ((i * 7 + j) as f64 * 0.1).cos());
        let (out, cache) = block.forward(&op, &x, Phase::Train { update_stats: false });
        let cache = cache.unwrap();
        for i in 0..out.nrows() {
            for j in 0..out.ncols() {
                let p = cache.pre_act[(i, j)];
                let expect = if p > 0.0 { p } else { 0.01 * p };
                assert_relative_eq!(out[(i, j)], expect, epsilon = 1e-15);
            }
        }
    }

    #[test]
    fn block_composes_conv_bn_relu() {
        // compositional oracle: run the three stages independently
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mesh = crate::fixtures::icosphere(1);
        let op = ScaledGraphOperator::from_mesh(&mesh).unwrap();
        let mut block = ConvBlock::new("t", 3, 4, 3, 0.01, 1e-5, 0.1, &mut rng);
        let x = DMatrix::from_fn(mesh.vertex_count(), 3, |i, j| ((i + 2 * j) as f64 * 0.3).sin());
        let (out, _) = block.forward(&op, &x, Phase::Train { update_stats: false });

        let z = block.conv.forward(&op, &x);
        let (p, _) = block.bn.forward(&z, Phase::Train { update_stats: false });
        let reference = p.map(|v| if v > 0.0 { v } else { 0.01 * v });
        assert_relative_eq!(out, reference, epsilon = 1e-14);
    }
}
