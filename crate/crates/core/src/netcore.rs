//! A small differentiable core: parameter storage, dense layers and MLPs,
//! PointNet-style set abstraction, the template intrinsic-feature extractor,
//! L2 normalization, Adam, a binary checkpoint format and finite-difference
//! gradient checking.
//!
//! Every layer is explicit: `forward` returns a trace, `backward` consumes it
//! and accumulates parameter gradients into the [`ParamStore`].

use std::collections::HashMap;
use std::path::Path;

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pointops::{ball_query, farthest_point_sampling, Point3, PointCloud};

/// Handle to a tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Array2<f64>,
    pub grad: Array2<f64>,
}

/// Named parameter matrices, each with a same-shaped gradient buffer.
/// Vectors are stored as `1 × n` matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Panics on duplicate names.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Array2::zeros(value.raw_dim());
        self.params.push(Param { name, value, grad });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn value(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &Array2<f64> {
        &self.params[id.0].grad
    }

    pub fn grad_mut(&mut self, id: ParamId) -> &mut Array2<f64> {
        &mut self.params[id.0].grad
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    /// Adds `other`'s gradients into this store (same layout required).
    pub fn accumulate_grads(&mut self, other: &ParamStore, scale: f64) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.grad.scaled_add(scale, &b.grad);
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params.iter().all(|p| p.grad.iter().all(|g| g.is_finite()))
    }

    /// Overwrites values of tensors present in `other` by name. Returns how many matched.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<usize> {
        let mut matched = 0;
        for p in &mut self.params {
            if let Some(src) = other.get(&p.name) {
                if src.value.shape() != p.value.shape() {
                    return Err(Error::ShapeMismatch {
                        expected: format!("{:?} for `{}`", p.value.shape(), p.name),
                        actual: format!("{:?}", src.value.shape()),
                    });
                }
                p.value.assign(&src.value);
                matched += 1;
            }
        }
        Ok(matched)
    }
}

/// Glorot-uniform initializer: U(±√(6/(fan_in+fan_out))).
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound))
}

/// Gradients of an affine map `y = x·W + b`.
#[derive(Debug, Clone)]
pub struct DenseGrads {
    pub d_input: Array2<f64>,
    pub d_weights: Array2<f64>,
    pub d_bias: Array2<f64>,
}

fn check_dense_shapes(input: &Array2<f64>, weights: &Array2<f64>, bias: &Array2<f64>) -> Result<()> {
    if input.ncols() != weights.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("input with {} columns", weights.nrows()),
            actual: format!("{:?}", input.shape()),
        });
    }
    if bias.shape() != [1, weights.ncols()] {
        return Err(Error::ShapeMismatch {
            expected: format!("bias of shape [1, {}]", weights.ncols()),
            actual: format!("{:?}", bias.shape()),
        });
    }
    Ok(())
}

/// Affine map over row vectors: `input (n×i) · weights (i×o) + bias (1×o)`.
pub fn dense_forward(input: &Array2<f64>, weights: &Array2<f64>, bias: &Array2<f64>) -> Result<Array2<f64>> {
    check_dense_shapes(input, weights, bias)?;
    Ok(input.dot(weights) + bias)
}

pub fn dense_backward(input: &Array2<f64>, weights: &Array2<f64>, grad_out: &Array2<f64>) -> Result<DenseGrads> {
    if grad_out.shape() != [input.nrows(), weights.ncols()] || input.ncols() != weights.nrows() {
        return Err(Error::ShapeMismatch {
            expected: format!("[{}, {}]", input.nrows(), weights.ncols()),
            actual: format!("{:?}", grad_out.shape()),
        });
    }
    Ok(DenseGrads {
        d_input: grad_out.dot(&weights.t()),
        d_weights: input.t().dot(grad_out),
        d_bias: grad_out.sum_axis(Axis(0)).insert_axis(Axis(0)),
    })
}

/// Dense layer whose weights live in a [`ParamStore`].
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weights: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize, rng: &mut R) -> Self {
        let weights = store.add(format!("{name}.weight"), glorot_uniform(rng, in_dim, out_dim));
        let bias = store.add(format!("{name}.bias"), Array2::zeros((1, out_dim)));
        Dense {
            weights,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, store: &ParamStore, input: &Array2<f64>) -> Result<Array2<f64>> {
        dense_forward(input, store.value(self.weights), store.value(self.bias))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&self, store: &mut ParamStore, input: &Array2<f64>, grad_out: &Array2<f64>) -> Result<Array2<f64>> {
        if grad_out.shape() != [input.nrows(), self.out_dim] || input.ncols() != self.in_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("[{}, {}]", input.nrows(), self.out_dim),
                actual: format!("{:?}", grad_out.shape()),
            });
        }
        let d_input = grad_out.dot(&store.value(self.weights).t());
        general_mat_mul(1.0, &input.t(), grad_out, 1.0, store.grad_mut(self.weights));
        *store.grad_mut(self.bias) += &grad_out.sum_axis(Axis(0)).insert_axis(Axis(0));
        Ok(d_input)
    }
}

/// Stack of dense layers with ReLU between them (and optionally after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub relu_last: bool,
}

/// Cached activations of one MLP forward pass.
#[derive(Debug, Clone)]
pub struct MlpTrace {
    inputs: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl MlpTrace {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

fn relu_mask(grad: &mut Array2<f64>, activated: &Array2<f64>) {
    ndarray::Zip::from(grad).and(activated).for_each(|g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
}

impl Mlp {
    /// `dims = [in, h1, ..., out]`; parameters named `{name}.{i}.weight` etc.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dims: &[usize], relu_last: bool, rng: &mut R) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Dense::new(store, &format!("{name}.{i}"), d[0], d[1], rng))
            .collect();
        Mlp { layers, relu_last }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").out_dim
    }

    pub fn forward(&self, store: &ParamStore, input: &Array2<f64>) -> Result<MlpTrace> {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(store, &x)?;
            if i < last || self.relu_last {
                relu_inplace(&mut y);
            }
            inputs.push(x);
            x = y;
        }
        Ok(MlpTrace { inputs, output: x })
    }

    /// Forward pass without keeping intermediates.
    pub fn infer(&self, store: &ParamStore, input: &Array2<f64>) -> Result<Array2<f64>> {
        let mut x = input.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(store, &x)?;
            if i < last || self.relu_last {
                relu_inplace(&mut x);
            }
        }
        Ok(x)
    }

    pub fn backward(&self, store: &mut ParamStore, trace: &MlpTrace, grad_out: &Array2<f64>) -> Result<Array2<f64>> {
        let mut g = grad_out.clone();
        if self.relu_last {
            relu_mask(&mut g, &trace.output);
        }
        for i in (0..self.layers.len()).rev() {
            g = self.layers[i].backward(store, &trace.inputs[i], &g)?;
            if i > 0 {
                // inputs[i] is the post-ReLU output of layer i-1
                relu_mask(&mut g, &trace.inputs[i]);
            }
        }
        Ok(g)
    }
}

/// Shared-MLP grouping layer: each center's feature is the channel-wise max
/// of the MLP applied to its group's offsets `(point − center)`.
#[derive(Debug, Clone)]
pub struct SetAbstraction {
    pub radius: f64,
    pub k_max: usize,
    pub mlp: Mlp,
}

#[derive(Debug, Clone)]
pub struct SetAbstractionTrace {
    mlp: MlpTrace,
    /// Row of the stacked MLP output that won the max, per (group, channel).
    argmax: Array2<usize>,
}

/// Stacks groups of 3D offsets into one matrix plus segment boundaries.
pub fn stack_groups(groups: &[Vec<Point3>]) -> (Array2<f64>, Vec<usize>) {
    let total: usize = groups.iter().map(Vec::len).sum();
    let mut rows = Array2::zeros((total, 3));
    let mut starts = Vec::with_capacity(groups.len() + 1);
    let mut r = 0;
    for g in groups {
        starts.push(r);
        for p in g {
            rows[[r, 0]] = p[0];
            rows[[r, 1]] = p[1];
            rows[[r, 2]] = p[2];
            r += 1;
        }
    }
    starts.push(r);
    (rows, starts)
}

/// Segment-wise channel max with argmax (lowest row on ties).
pub fn segment_max(values: &Array2<f64>, starts: &[usize]) -> (Array2<f64>, Array2<usize>) {
    let groups = starts.len() - 1;
    let c = values.ncols();
    let mut out = Array2::from_elem((groups, c), f64::NEG_INFINITY);
    let mut arg = Array2::zeros((groups, c));
    for g in 0..groups {
        for r in starts[g]..starts[g + 1] {
            let row = values.row(r);
            for ch in 0..c {
                if row[ch] > out[[g, ch]] {
                    out[[g, ch]] = row[ch];
                    arg[[g, ch]] = r;
                }
            }
        }
    }
    (out, arg)
}

impl SetAbstraction {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, radius: f64, k_max: usize, dims: &[usize], rng: &mut R) -> Self {
        assert_eq!(dims[0], 3, "set abstraction consumes xyz offsets");
        SetAbstraction {
            radius,
            k_max,
            mlp: Mlp::new(store, name, dims, true, rng),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.mlp.out_dim()
    }

    /// Pools explicit groups of offsets. Every group must be non-empty.
    pub fn pool_groups(&self, store: &ParamStore, groups: &[Vec<Point3>]) -> Result<(Array2<f64>, SetAbstractionTrace)> {
        if groups.iter().any(Vec::is_empty) {
            return Err(Error::EmptyInput("set abstraction group"));
        }
        let (rows, starts) = stack_groups(groups);
        let mlp = self.mlp.forward(store, &rows)?;
        let (features, argmax) = segment_max(mlp.output(), &starts);
        Ok((features, SetAbstractionTrace { mlp, argmax }))
    }

    pub fn group(&self, cloud: &PointCloud, centers: &[Point3]) -> Result<Vec<Vec<Point3>>> {
        centers
            .iter()
            .map(|c| {
                let idx = ball_query(cloud, *c, self.radius, self.k_max)?;
                Ok(idx
                    .iter()
                    .map(|&i| {
                        let p = cloud.points[i];
                        [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
                    })
                    .collect())
            })
            .collect()
    }

    pub fn forward(&self, store: &ParamStore, cloud: &PointCloud, centers: &[Point3]) -> Result<(Array2<f64>, SetAbstractionTrace)> {
        let groups = self.group(cloud, centers)?;
        self.pool_groups(store, &groups)
    }

    /// Routes each channel's gradient to the row that produced the max.
    pub fn backward(&self, store: &mut ParamStore, trace: &SetAbstractionTrace, grad_out: &Array2<f64>) -> Result<()> {
        let mut g = Array2::zeros(trace.mlp.output().raw_dim());
        for ((grp, ch), &row) in trace.argmax.indexed_iter() {
            g[[row, ch]] += grad_out[[grp, ch]];
        }
        self.mlp.backward(store, &trace.mlp, &g)?;
        Ok(())
    }
}

/// Hyperparameters of the template feature extractor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FeatureExtractorConfig {
    /// FPS centers.
    pub m: usize,
    pub radii: [f64; 2],
    pub group_sizes: [usize; 2],
    /// Local feature width per scale.
    pub local_dim: usize,
    pub local_hidden: usize,
    /// Widths of the fully connected stack after flattening.
    pub fc_hidden: Vec<usize>,
    pub intrinsic_dim: usize,
}

impl Default for FeatureExtractorConfig {
    fn default() -> Self {
        FeatureExtractorConfig {
            m: 128,
            radii: [0.2, 0.4],
            group_sizes: [16, 32],
            local_dim: 32,
            local_hidden: 32,
            fc_hidden: vec![256, 64],
            intrinsic_dim: 16,
        }
    }
}

impl FeatureExtractorConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [self.m, self.group_sizes[0], self.group_sizes[1], self.local_dim, self.local_hidden, self.intrinsic_dim];
        if counts.iter().any(|&c| c == 0) || self.fc_hidden.iter().any(|&c| c == 0) {
            return Err(Error::Config("feature extractor sizes must be positive".into()));
        }
        if !(self.radii[0] > 0.0 && self.radii[1] > 0.0) {
            return Err(Error::Config("feature extractor radii must be positive".into()));
        }
        Ok(())
    }
}

/// FPS → two-radius set abstraction → concat (m × 2C) → flatten → FC stack.
#[derive(Debug, Clone)]
pub struct IntrinsicExtractor {
    pub cfg: FeatureExtractorConfig,
    pub scales: [SetAbstraction; 2],
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct IntrinsicTrace {
    /// Per cloud, the two set-abstraction traces.
    scales: Vec<[SetAbstractionTrace; 2]>,
    head: MlpTrace,
}

impl IntrinsicExtractor {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: FeatureExtractorConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let local = [3, cfg.local_hidden, cfg.local_dim];
        let sa0 = SetAbstraction::new(store, &format!("{name}.sa0"), cfg.radii[0], cfg.group_sizes[0], &local, rng);
        let sa1 = SetAbstraction::new(store, &format!("{name}.sa1"), cfg.radii[1], cfg.group_sizes[1], &local, rng);
        let mut dims = vec![cfg.m * 2 * cfg.local_dim];
        dims.extend(&cfg.fc_hidden);
        dims.push(cfg.intrinsic_dim);
        let head = Mlp::new(store, &format!("{name}.fc"), &dims, false, rng);
        Ok(IntrinsicExtractor {
            cfg,
            scales: [sa0, sa1],
            head,
        })
    }

    /// Builds an extractor with its own store, initialized from `seed`.
    pub fn seeded(cfg: FeatureExtractorConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ex = IntrinsicExtractor::new(&mut store, "intrinsic", cfg, &mut rng)?;
        Ok((ex, store))
    }

    /// Flattened multi-scale local features of one cloud (1 × m·2C).
    fn local_features(&self, store: &ParamStore, cloud: &PointCloud) -> Result<(Array1<f64>, [SetAbstractionTrace; 2])> {
        let m = self.cfg.m;
        if cloud.len() < m {
            return Err(Error::InvalidArgument(format!(
                "intrinsic feature needs at least {m} points, got {}",
                cloud.len()
            )));
        }
        let centers: Vec<Point3> = farthest_point_sampling(cloud, m)?
            .into_iter()
            .map(|i| cloud.points[i])
            .collect();
        let (f0, t0) = self.scales[0].forward(store, cloud, &centers)?;
        let (f1, t1) = self.scales[1].forward(store, cloud, &centers)?;
        let c = self.cfg.local_dim;
        let mut multi = Array2::zeros((m, 2 * c));
        multi.slice_mut(s![.., ..c]).assign(&f0);
        multi.slice_mut(s![.., c..]).assign(&f1);
        let flat = multi.into_shape_with_order(m * 2 * c).expect("contiguous");
        Ok((flat, [t0, t1]))
    }

    /// One output row per cloud. The clouds share a single pass through the
    /// fully connected head.
    pub fn forward_batch(&self, store: &ParamStore, clouds: &[PointCloud]) -> Result<(Array2<f64>, IntrinsicTrace)> {
        if clouds.is_empty() {
            return Err(Error::EmptyInput("intrinsic feature batch"));
        }
        let width = self.cfg.m * 2 * self.cfg.local_dim;
        let mut flat = Array2::zeros((clouds.len(), width));
        let mut scales = Vec::with_capacity(clouds.len());
        for (i, cloud) in clouds.iter().enumerate() {
            let (row, t) = self.local_features(store, cloud)?;
            flat.row_mut(i).assign(&row);
            scales.push(t);
        }
        let head = self.head.forward(store, &flat)?;
        Ok((head.output().clone(), IntrinsicTrace { scales, head }))
    }

    pub fn forward(&self, store: &ParamStore, cloud: &PointCloud) -> Result<(Array1<f64>, IntrinsicTrace)> {
        let (out, trace) = self.forward_batch(store, std::slice::from_ref(cloud))?;
        Ok((out.row(0).to_owned(), trace))
    }

    pub fn infer(&self, store: &ParamStore, cloud: &PointCloud) -> Result<Array1<f64>> {
        Ok(self.forward(store, cloud)?.0)
    }

    /// `grad_out` has one row per cloud of the traced batch.
    pub fn backward_batch(&self, store: &mut ParamStore, trace: &IntrinsicTrace, grad_out: &Array2<f64>) -> Result<()> {
        let d_flat = self.head.backward(store, &trace.head, grad_out)?;
        let (m, c) = (self.cfg.m, self.cfg.local_dim);
        for (row, scales) in d_flat.rows().into_iter().zip(&trace.scales) {
            let d_multi = row.to_owned().into_shape_with_order((m, 2 * c)).expect("contiguous");
            self.scales[0].backward(store, &scales[0], &d_multi.slice(s![.., ..c]).to_owned())?;
            self.scales[1].backward(store, &scales[1], &d_multi.slice(s![.., c..]).to_owned())?;
        }
        Ok(())
    }

    pub fn backward(&self, store: &mut ParamStore, trace: &IntrinsicTrace, grad_out: &Array1<f64>) -> Result<()> {
        self.backward_batch(store, trace, &grad_out.clone().insert_axis(Axis(0)))
    }
}

pub const NORM_EPS: f64 = 1e-12;

/// `v / ‖v‖`, rejecting vectors with norm ≤ 1e-12.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > NORM_EPS) {
        return Err(Error::InvalidArgument(format!("cannot normalize vector with norm {n:e}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Backward of [`l2_normalize`]: `(g − y (y·g)) / ‖v‖` with `y = v/‖v‖`.
pub fn l2_normalize_backward(v: &[f64], grad_out: &[f64]) -> Result<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(n > NORM_EPS) {
        return Err(Error::InvalidArgument(format!("cannot normalize vector with norm {n:e}")));
    }
    let yg: f64 = v.iter().zip(grad_out).map(|(a, g)| a * g).sum::<f64>() / n;
    Ok(v
        .iter()
        .zip(grad_out)
        .map(|(a, g)| (g - a / n * yg) / n)
        .collect())
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: store.params().iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
            v: store.params().iter().map(|p| Array2::zeros(p.value.raw_dim())).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update from the store's current gradients.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for ((p, m), v) in store.params_mut().iter_mut().zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.value)
                .and(&p.grad)
                .and(m)
                .and(v)
                .for_each(|w, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"IFGK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Little-endian binary: magic, version, tensor count, then per tensor the
/// name (length-prefixed UTF-8), rank, dims and float64 payload.
pub fn checkpoint_to_bytes(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        for d in p.value.shape() {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in p.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn checkpoint_from_bytes(buf: &[u8]) -> Result<ParamStore> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let shape = match dims.as_slice() {
            [n] => (1, *n),
            [a, b] => (*a, *b),
            _ => return Err(Error::Checkpoint(format!("tensor `{name}` has unsupported rank {rank}"))),
        };
        let n = shape.0 * shape.1;
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if store.id(&name).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        store.add(name, Array2::from_shape_vec(shape, data).expect("sized"));
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok(store)
}

pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_bytes(store)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

/// One compared coordinate in a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Largest offenders first.
    pub worst: Vec<GradEntry>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }

    fn from_entries(mut entries: Vec<GradEntry>, tolerance: f64) -> Self {
        entries.sort_by(|a, b| b.rel_error.total_cmp(&a.rel_error));
        let checked = entries.len();
        let max_rel_error = entries.first().map_or(0.0, |e| e.rel_error);
        entries.truncate(8);
        GradCheckReport {
            checked,
            max_rel_error,
            tolerance,
            worst: entries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tolerance: f64,
    /// Lower bound on the relative-error denominator.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_per_tensor: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-5,
            tolerance: 1e-4,
            floor: 1e-5,
            max_per_tensor: None,
            seed: 0,
        }
    }
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central differences of a scalar function of a flat vector, compared
/// against the supplied analytic gradient.
pub fn grad_check_vector(
    f: impl Fn(&[f64]) -> f64,
    x: &[f64],
    analytic: &[f64],
    opts: GradCheckOptions,
) -> GradCheckReport {
    assert_eq!(x.len(), analytic.len());
    let mut xp = x.to_vec();
    let entries = (0..x.len())
        .map(|i| {
            let orig = xp[i];
            xp[i] = orig + opts.step;
            let fp = f(&xp);
            xp[i] = orig - opts.step;
            let fm = f(&xp);
            xp[i] = orig;
            let numeric = (fp - fm) / (2.0 * opts.step);
            GradEntry {
                name: "x".into(),
                index: i,
                analytic: analytic[i],
                numeric,
                rel_error: relative_error(analytic[i], numeric, opts.floor),
            }
        })
        .collect();
    GradCheckReport::from_entries(entries, opts.tolerance)
}

/// Checks every parameter of `store` (or a seeded sample per tensor).
///
/// `loss_and_grad` must return the loss and, when asked, accumulate analytic
/// gradients into the store (grads are zeroed before the analytic call).
pub fn grad_check(
    store: &mut ParamStore,
    mut loss_and_grad: impl FnMut(&mut ParamStore, bool) -> f64,
    opts: GradCheckOptions,
) -> GradCheckReport {
    store.zero_grads();
    loss_and_grad(store, true);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut entries = Vec::new();
    for pi in 0..store.len() {
        let n = store.params()[pi].value.len();
        let picks: Vec<usize> = match opts.max_per_tensor {
            Some(k) if k < n => rand::seq::index::sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for idx in picks {
            let analytic = *store.params()[pi].grad.iter().nth(idx).expect("in range");
            let orig = value_at(store, pi, idx);
            set_value(store, pi, idx, orig + opts.step);
            let fp = loss_and_grad(store, false);
            set_value(store, pi, idx, orig - opts.step);
            let fm = loss_and_grad(store, false);
            set_value(store, pi, idx, orig);
            let numeric = (fp - fm) / (2.0 * opts.step);
            entries.push(GradEntry {
                name: store.params()[pi].name.clone(),
                index: idx,
                analytic,
                numeric,
                rel_error: relative_error(analytic, numeric, opts.floor),
            });
        }
    }
    GradCheckReport::from_entries(entries, opts.tolerance)
}

fn value_at(store: &ParamStore, pi: usize, idx: usize) -> f64 {
    let v = &store.params()[pi].value;
    v[[idx / v.ncols(), idx % v.ncols()]]
}

fn set_value(store: &mut ParamStore, pi: usize, idx: usize, x: f64) {
    let v = &mut store.params_mut()[pi].value;
    let c = v.ncols();
    v[[idx / c, idx % c]] = x;
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(42)
    }

    #[test]
    fn dense_identity_and_zero() {
        let x = array![[1.0, -2.0, 3.0]];
        let eye = Array2::eye(3);
        let zero_b = Array2::zeros((1, 3));
        assert_eq!(dense_forward(&x, &eye, &zero_b).unwrap(), x);
        let b = array![[0.5, 0.25, -1.0]];
        assert_eq!(dense_forward(&x, &Array2::zeros((3, 3)), &b).unwrap(), b);
    }

    #[test]
    fn dense_shape_errors() {
        let x = Array2::zeros((2, 4));
        let w = Array2::zeros((3, 5));
        let b = Array2::zeros((1, 5));
        assert!(matches!(dense_forward(&x, &w, &b), Err(Error::ShapeMismatch { .. })));
        let bad_bias = Array2::zeros((1, 4));
        assert!(dense_forward(&Array2::zeros((2, 3)), &w, &bad_bias).is_err());
        assert!(dense_backward(&Array2::zeros((2, 3)), &w, &Array2::zeros((2, 4))).is_err());
    }

    #[test]
    fn set_abstraction_singleton_and_duplicate() {
        let mut store = ParamStore::new();
        let sa = SetAbstraction::new(&mut store, "sa", 0.5, 8, &[3, 8, 4], &mut rng());
        let offset = [0.1, -0.2, 0.05];
        let (single, _) = sa.pool_groups(&store, &[vec![offset]]).unwrap();
        let direct = sa.mlp.infer(&store, &array![[0.1, -0.2, 0.05]]).unwrap();
        assert_eq!(single, direct);
        let (dup, _) = sa.pool_groups(&store, &[vec![offset, offset]]).unwrap();
        assert_eq!(single, dup);
        assert!(sa.pool_groups(&store, &[vec![]]).is_err());
    }

    #[test]
    fn l2_normalize_cases() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let u = l2_normalize(&[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(u, vec![0.0, 1.0, 0.0]);
        assert!(l2_normalize(&[1e-13, 0.0]).is_err());
        assert!(l2_normalize_backward(&[0.0, 0.0], &[1.0, 1.0]).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_and_errors() {
        let mut store = ParamStore::new();
        Mlp::new(&mut store, "m", &[3, 4, 2], false, &mut rng());
        let bytes = checkpoint_to_bytes(&store);
        assert_eq!(&bytes[..4], b"IFGK");
        let back = checkpoint_from_bytes(&bytes).unwrap();
        assert_eq!(back.len(), store.len());
        for (a, b) in back.params().iter().zip(store.params()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.value, b.value);
        }
        assert!(checkpoint_from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(checkpoint_from_bytes(&bad).is_err());
    }

    #[test]
    fn checkpoint_accepts_rank_one() {
        let mut buf = Vec::new();
        buf.extend_from_slice(b"IFGK");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(b"b");
        buf.extend_from_slice(&1u32.to_le_bytes());
        buf.extend_from_slice(&2u32.to_le_bytes());
        buf.extend_from_slice(&1.5f64.to_le_bytes());
        buf.extend_from_slice(&(-2.0f64).to_le_bytes());
        let store = checkpoint_from_bytes(&buf).unwrap();
        assert_eq!(store.get("b").unwrap().value, array![[1.5, -2.0]]);
    }

    #[test]
    fn adam_moves_against_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", array![[1.0, -1.0]]);
        *store.grad_mut(id) = array![[2.0, -3.0]];
        let mut adam = Adam::new(&store, 0.1);
        adam.step(&mut store);
        let w = store.value(id);
        assert!((w[[0, 0]] - 0.9).abs() < 1e-6);
        assert!((w[[0, 1]] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn linear_function_checks_exactly() {
        let coeffs = [0.5, -1.25, 2.0];
        let f = |x: &[f64]| x.iter().zip(coeffs).map(|(a, c)| a * c).sum::<f64>();
        let rep = grad_check_vector(f, &[0.3, 0.7, -0.1], &coeffs, GradCheckOptions::default());
        assert!(rep.max_rel_error < 1e-9, "{rep:?}");
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let f = |x: &[f64]| x[0] * x[0] + x[1].sin();
        let x: [f64; 2] = [0.4, 0.3];
        let wrong = [2.0 * x[0] * 1.05, x[1].cos()];
        let rep = grad_check_vector(f, &x, &wrong, GradCheckOptions::default());
        assert!(rep.max_rel_error > 1e-2);
        assert!(!rep.passed());
        assert_eq!(rep.worst[0].index, 0);
    }
}
