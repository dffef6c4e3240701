//! Dense multilayer perceptrons in f64 with exact reverse-mode gradients,
//! Adam, finite-difference checking, and a versioned binary checkpoint
//! format.
//!
//! The stack is deliberately small: fully connected layers, tanh or
//! rectifier hidden activations, and a linear output layer whose
//! interpretation (raw values vs. categorical logits) is recorded in
//! [`OutputHead`]. Inputs may be dense vectors or lists of active one-hot
//! indices; both produce bitwise-identical outputs and gradients, the sparse
//! path just skips the zero terms.

use std::io::{Read, Write};

use rand::Rng;

use crate::error::{CoreError, Result};
use crate::seeds::{derive, rng_from};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

/// How the linear output layer is meant to be read. Forward passes return
/// raw outputs either way; losses over logits apply log-softmax themselves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputHead {
    Identity,
    CategoricalLogits,
}

/// Fully connected network parameters. Layer `l` maps `sizes[l]` inputs to
/// `sizes[l+1]` outputs with a row-major weight matrix; every layer except
/// the last is followed by `activations[l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub sizes: Vec<usize>,
    /// `weights[l]` is `sizes[l+1] x sizes[l]`, row-major.
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
    pub activations: Vec<Activation>,
    pub output_head: OutputHead,
}

/// Deterministic fan-in-scaled initialization: weights uniform in
/// +-1/sqrt(fan_in), biases zero, tanh hidden layers, identity head.
pub fn mlp_init(layer_sizes: &[usize], seed: u64) -> Result<MlpParams> {
    if layer_sizes.len() < 2 {
        return Err(CoreError::InvalidConfig(format!(
            "a network needs at least input and output sizes, got {layer_sizes:?}"
        )));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(CoreError::InvalidConfig(format!(
            "zero-width layer in {layer_sizes:?}"
        )));
    }
    let mut rng = rng_from(derive(seed, 0x6e6e_0001));
    let n_layers = layer_sizes.len() - 1;
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        weights.push(w);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(MlpParams {
        sizes: layer_sizes.to_vec(),
        weights,
        biases,
        activations: vec![Activation::Tanh; n_layers - 1],
        output_head: OutputHead::Identity,
    })
}

impl MlpParams {
    pub fn with_head(mut self, head: OutputHead) -> Self {
        self.output_head = head;
        self
    }

    pub fn with_activations(mut self, act: Activation) -> Self {
        for a in &mut self.activations {
            *a = act;
        }
        self
    }

    pub fn n_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn in_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn out_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_layers();
        if self.weights.len() != n || self.biases.len() != n {
            return Err(CoreError::Shape("layer list lengths disagree".into()));
        }
        if self.activations.len() != n - 1 {
            return Err(CoreError::Shape(format!(
                "expected {} hidden activations, got {}",
                n - 1,
                self.activations.len()
            )));
        }
        for l in 0..n {
            if self.weights[l].len() != self.sizes[l] * self.sizes[l + 1]
                || self.biases[l].len() != self.sizes[l + 1]
            {
                return Err(CoreError::Shape(format!("layer {l} shape mismatch")));
            }
        }
        if self
            .weights
            .iter()
            .chain(self.biases.iter())
            .flatten()
            .any(|v| !v.is_finite())
        {
            return Err(CoreError::NonFinite("network parameters".into()));
        }
        Ok(())
    }
}

/// One network input: a dense vector of width `in_dim`; the indices of
/// one-hot components that are 1 (everything else 0); or a one-hot section
/// followed by a dense tail occupying the last `tail.len()` inputs.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Dense(&'a [f64]),
    OneHot(&'a [usize]),
    OneHotDense { idx: &'a [usize], tail: &'a [f64] },
}

/// Input batch flattened for the backward pass: per-sample spans into
/// shared index and dense pools, so a batch costs a fixed number of
/// allocations regardless of its size.
#[derive(Clone, Copy, Debug, PartialEq)]
enum StoredKind {
    Dense,
    OneHot,
    OneHotDense,
}

#[derive(Clone, Debug)]
struct StoredBatch {
    kind: Vec<StoredKind>,
    /// One-hot indices, all samples back to back; `idx_off` has batch+1
    /// prefix offsets.
    idx: Vec<usize>,
    idx_off: Vec<usize>,
    /// Dense parts (full rows or tails) back to back, offsets likewise.
    dense: Vec<f64>,
    dense_off: Vec<usize>,
}

impl StoredBatch {
    fn idx_of(&self, i: usize) -> &[usize] {
        &self.idx[self.idx_off[i]..self.idx_off[i + 1]]
    }

    fn dense_of(&self, i: usize) -> &[f64] {
        &self.dense[self.dense_off[i]..self.dense_off[i + 1]]
    }
}

/// Activations cached by [`forward`]; consumed by [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    sizes: Vec<usize>,
    batch: usize,
    inputs: StoredBatch,
    /// `post[l]` holds layer `l`'s post-activation outputs sample-major:
    /// sample `i` occupies `post[l][i*width..(i+1)*width]`.
    post: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.batch
    }
}

fn apply_activation(v: &mut [f64], act: Activation) {
    match act {
        Activation::Tanh => {
            for x in v {
                *x = x.tanh();
            }
        }
        Activation::Relu => {
            for x in v {
                if *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
    }
}

/// Four-lane dot product for the dense layers above the input. Lanes bucket
/// columns by `j mod 4` to break the floating-point add latency chain.
#[inline]
fn dot4(row: &[f64], x: &[f64]) -> f64 {
    let n4 = row.len() & !3;
    let mut acc = [0.0f64; 4];
    for (r4, x4) in row[..n4].chunks_exact(4).zip(x[..n4].chunks_exact(4)) {
        acc[0] += r4[0] * x4[0];
        acc[1] += r4[1] * x4[1];
        acc[2] += r4[2] * x4[2];
        acc[3] += r4[3] * x4[3];
    }
    for (m, (wj, xj)) in row[n4..].iter().zip(&x[n4..]).enumerate() {
        acc[m] += wj * xj;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3])
}

/// Blocked transpose of a `rows x cols` row-major matrix into column-major.
/// Sparse first-layer passes walk whole weight columns, which are contiguous
/// only in this layout.
fn transposed(w: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; w.len()];
    const B: usize = 16;
    for rb in (0..rows).step_by(B) {
        let rhi = rows.min(rb + B);
        for cb in (0..cols).step_by(B) {
            let chi = cols.min(cb + B);
            for r in rb..rhi {
                for c in cb..chi {
                    t[c * rows + r] = w[r * cols + c];
                }
            }
        }
    }
    t
}

/// Derivative of the activation expressed through its output value.
fn activation_slope(post: f64, act: Activation) -> f64 {
    match act {
        Activation::Tanh => 1.0 - post * post,
        Activation::Relu => {
            if post > 0.0 {
                1.0
            } else {
                0.0
            }
        }
    }
}

/// Runs the network on a batch. Returns outputs (one row per input) plus the
/// cache that [`backward`] needs.
pub fn forward(params: &MlpParams, inputs: &[Input]) -> Result<(Vec<Vec<f64>>, ForwardCache)> {
    let n_layers = params.n_layers();
    let in_dim = params.in_dim();
    let batch = inputs.len();

    // Validate and flatten the batch up front.
    let mut stored = StoredBatch {
        kind: Vec::with_capacity(batch),
        idx: Vec::new(),
        idx_off: Vec::with_capacity(batch + 1),
        dense: Vec::new(),
        dense_off: Vec::with_capacity(batch + 1),
    };
    stored.idx_off.push(0);
    stored.dense_off.push(0);
    for input in inputs {
        match input {
            Input::Dense(x) => {
                if x.len() != in_dim {
                    return Err(CoreError::Shape(format!(
                        "input width {} does not match first layer {in_dim}",
                        x.len()
                    )));
                }
                stored.kind.push(StoredKind::Dense);
                stored.dense.extend_from_slice(x);
            }
            Input::OneHot(idx) => {
                if let Some(&bad) = idx.iter().find(|&&j| j >= in_dim) {
                    return Err(CoreError::Shape(format!(
                        "one-hot index {bad} out of range for input width {in_dim}"
                    )));
                }
                stored.kind.push(StoredKind::OneHot);
                stored.idx.extend_from_slice(idx);
            }
            Input::OneHotDense { idx, tail } => {
                if tail.len() > in_dim {
                    return Err(CoreError::Shape(format!(
                        "dense tail of {} exceeds input width {in_dim}",
                        tail.len()
                    )));
                }
                let split = in_dim - tail.len();
                if let Some(&bad) = idx.iter().find(|&&j| j >= split) {
                    return Err(CoreError::Shape(format!(
                        "one-hot index {bad} reaches into the dense tail at {split}"
                    )));
                }
                stored.kind.push(StoredKind::OneHotDense);
                stored.idx.extend_from_slice(idx);
                stored.dense.extend_from_slice(tail);
            }
        }
        stored.idx_off.push(stored.idx.len());
        stored.dense_off.push(stored.dense.len());
    }

    let mut post: Vec<Vec<f64>> = Vec::with_capacity(n_layers);

    // First layer off the input. Sparse samples accumulate whole weight
    // columns, contiguous in a transposed copy shared by the batch; dense
    // samples take the usual row dot products.
    let rows0 = params.sizes[1];
    let mut h0 = vec![0.0; batch * rows0];
    {
        let w = &params.weights[0];
        let b = &params.biases[0];
        let wt: Vec<f64> = if stored.kind.iter().any(|k| *k != StoredKind::Dense) {
            transposed(w, rows0, in_dim)
        } else {
            Vec::new()
        };
        for i in 0..batch {
            let h = &mut h0[i * rows0..(i + 1) * rows0];
            match stored.kind[i] {
                StoredKind::Dense => {
                    let x = stored.dense_of(i);
                    for (r, hr) in h.iter_mut().enumerate() {
                        let row = &w[r * in_dim..(r + 1) * in_dim];
                        let mut acc = 0.0;
                        for (wj, xj) in row.iter().zip(x) {
                            acc += wj * xj;
                        }
                        *hr = b[r] + acc;
                    }
                }
                StoredKind::OneHot => {
                    h.copy_from_slice(b);
                    for &j in stored.idx_of(i) {
                        let col = &wt[j * rows0..(j + 1) * rows0];
                        for (hr, wj) in h.iter_mut().zip(col) {
                            *hr += wj;
                        }
                    }
                }
                StoredKind::OneHotDense => {
                    h.copy_from_slice(b);
                    for &j in stored.idx_of(i) {
                        let col = &wt[j * rows0..(j + 1) * rows0];
                        for (hr, wj) in h.iter_mut().zip(col) {
                            *hr += wj;
                        }
                    }
                    let tail = stored.dense_of(i);
                    let split = in_dim - tail.len();
                    for (t, &x) in tail.iter().enumerate() {
                        let col = &wt[(split + t) * rows0..(split + t + 1) * rows0];
                        for (hr, wj) in h.iter_mut().zip(col) {
                            *hr += wj * x;
                        }
                    }
                }
            }
        }
    }
    if n_layers > 1 {
        apply_activation(&mut h0, params.activations[0]);
    }
    post.push(h0);

    // Dense layers above, same row-resident order.
    for l in 1..n_layers {
        let cols = params.sizes[l];
        let width = params.sizes[l + 1];
        let w = &params.weights[l];
        let prev = &post[l - 1];
        let mut h = vec![0.0; batch * width];
        for r in 0..width {
            let row = &w[r * cols..(r + 1) * cols];
            let br = params.biases[l][r];
            for i in 0..batch {
                h[i * width + r] = br + dot4(row, &prev[i * cols..(i + 1) * cols]);
            }
        }
        if l < n_layers - 1 {
            apply_activation(&mut h, params.activations[l]);
        }
        post.push(h);
    }

    let out_dim = params.out_dim();
    let last = &post[n_layers - 1];
    let outputs: Vec<Vec<f64>> = (0..batch)
        .map(|i| last[i * out_dim..(i + 1) * out_dim].to_vec())
        .collect();
    Ok((
        outputs,
        ForwardCache {
            sizes: params.sizes.clone(),
            batch,
            inputs: stored,
            post,
        },
    ))
}

/// Parameter gradients, shaped exactly like [`MlpParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params.weights.iter().map(|w| vec![0.0; w.len()]).collect(),
            biases: params.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for x in v {
                *x *= c;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .iter()
            .chain(self.biases.iter())
            .flatten()
            .all(|v| v.is_finite())
    }
}

/// Exact reverse-mode gradients of `sum_i <out_grads[i], output_i>` with
/// respect to every parameter. The cache must come from a [`forward`] call
/// on the same architecture; per-sample loss scaling (e.g. 1/batch) belongs
/// in `out_grads`.
pub fn backward(
    params: &MlpParams,
    cache: &ForwardCache,
    out_grads: &[Vec<f64>],
) -> Result<MlpGrads> {
    if cache.sizes != params.sizes {
        return Err(CoreError::Shape(
            "forward cache does not match this network".into(),
        ));
    }
    if out_grads.len() != cache.batch_len() {
        return Err(CoreError::Shape(format!(
            "{} output gradients for a cached batch of {}",
            out_grads.len(),
            cache.batch_len()
        )));
    }
    let n_layers = params.n_layers();
    let batch = cache.batch;
    let out_dim = params.out_dim();
    let mut grads = MlpGrads::zeros_like(params);

    // Deltas for the layer currently being processed, sample-major.
    let mut delta = vec![0.0; batch * out_dim];
    for (i, out_grad) in out_grads.iter().enumerate() {
        if out_grad.len() != out_dim {
            return Err(CoreError::Shape(format!(
                "output gradient width {} does not match output {}",
                out_grad.len(),
                out_dim
            )));
        }
        delta[i * out_dim..(i + 1) * out_dim].copy_from_slice(out_grad);
    }

    for l in (0..n_layers).rev() {
        let cols = params.sizes[l];
        let width = params.sizes[l + 1];
        // Weight gradients; each gradient row is accumulated while resident,
        // with samples in index order so results match per-sample summation.
        if l == 0 {
            // Sparse samples scatter whole delta vectors into a column-major
            // accumulator; one blocked pass folds it into the row-major
            // gradients. Dense samples update rows directly.
            let sparse = cache
                .inputs
                .kind
                .iter()
                .any(|k| *k != StoredKind::Dense);
            let mut gt: Vec<f64> = if sparse { vec![0.0; width * cols] } else { Vec::new() };
            for i in 0..batch {
                let d = &delta[i * width..(i + 1) * width];
                match cache.inputs.kind[i] {
                    StoredKind::Dense => {
                        let x = cache.inputs.dense_of(i);
                        for (r, &dr) in d.iter().enumerate() {
                            if dr == 0.0 {
                                continue;
                            }
                            let grow = &mut grads.weights[0][r * cols..(r + 1) * cols];
                            for (g, xj) in grow.iter_mut().zip(x) {
                                *g += dr * xj;
                            }
                        }
                    }
                    StoredKind::OneHot => {
                        for &j in cache.inputs.idx_of(i) {
                            let gcol = &mut gt[j * width..(j + 1) * width];
                            for (g, dr) in gcol.iter_mut().zip(d) {
                                *g += dr;
                            }
                        }
                    }
                    StoredKind::OneHotDense => {
                        for &j in cache.inputs.idx_of(i) {
                            let gcol = &mut gt[j * width..(j + 1) * width];
                            for (g, dr) in gcol.iter_mut().zip(d) {
                                *g += dr;
                            }
                        }
                        let tail = cache.inputs.dense_of(i);
                        let split = cols - tail.len();
                        for (t, &x) in tail.iter().enumerate() {
                            let gcol = &mut gt[(split + t) * width..(split + t + 1) * width];
                            for (g, dr) in gcol.iter_mut().zip(d) {
                                *g += dr * x;
                            }
                        }
                    }
                }
            }
            if sparse {
                const B: usize = 16;
                let gw = &mut grads.weights[0];
                for jb in (0..cols).step_by(B) {
                    let jhi = cols.min(jb + B);
                    for rb in (0..width).step_by(B) {
                        let rhi = width.min(rb + B);
                        for j in jb..jhi {
                            for r in rb..rhi {
                                gw[r * cols + j] += gt[j * width + r];
                            }
                        }
                    }
                }
            }
        } else {
            let prev = &cache.post[l - 1];
            for r in 0..width {
                let grow = &mut grads.weights[l][r * cols..(r + 1) * cols];
                for i in 0..batch {
                    let d = delta[i * width + r];
                    if d == 0.0 {
                        continue;
                    }
                    for (g, xj) in grow.iter_mut().zip(&prev[i * cols..(i + 1) * cols]) {
                        *g += d * xj;
                    }
                }
            }
        }
        for i in 0..batch {
            for (g, d) in grads.biases[l]
                .iter_mut()
                .zip(&delta[i * width..(i + 1) * width])
            {
                *g += d;
            }
        }
        // Propagate to the previous layer's outputs.
        if l > 0 {
            let prev = &cache.post[l - 1];
            let w = &params.weights[l];
            let mut next_delta = vec![0.0; batch * cols];
            for r in 0..width {
                let row = &w[r * cols..(r + 1) * cols];
                for i in 0..batch {
                    let d = delta[i * width + r];
                    if d == 0.0 {
                        continue;
                    }
                    for (nd, wj) in next_delta[i * cols..(i + 1) * cols].iter_mut().zip(row) {
                        *nd += d * wj;
                    }
                }
            }
            let act = params.activations[l - 1];
            for (nd, &p) in next_delta.iter_mut().zip(prev.iter()) {
                *nd *= activation_slope(p, act);
            }
            delta = next_delta;
        }
    }
    Ok(grads)
}

/// Adam accumulators; shapes mirror the parameters they update.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m_weights: Vec<Vec<f64>>,
    pub m_biases: Vec<Vec<f64>>,
    pub v_weights: Vec<Vec<f64>>,
    pub v_biases: Vec<Vec<f64>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &MlpParams) -> Self {
        let zw = || -> Vec<Vec<f64>> { params.weights.iter().map(|w| vec![0.0; w.len()]).collect() };
        let zb = || -> Vec<Vec<f64>> { params.biases.iter().map(|b| vec![0.0; b.len()]).collect() };
        AdamState {
            m_weights: zw(),
            m_biases: zb(),
            v_weights: zw(),
            v_biases: zb(),
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

fn adam_update_slice(
    p: &mut [f64],
    g: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    lr: f64,
    b1: f64,
    b2: f64,
    eps: f64,
    bc1: f64,
    bc2: f64,
) {
    for i in 0..p.len() {
        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
        let mhat = m[i] / bc1;
        let vhat = v[i] / bc2;
        p[i] -= lr * mhat / (vhat.sqrt() + eps);
    }
}

/// One Adam step with bias correction. Non-finite gradients abort before
/// touching any state so training fails loudly instead of poisoning the
/// parameters.
pub fn adam_step(
    params: &mut MlpParams,
    grads: &MlpGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grads.weights.len() != params.weights.len()
        || grads
            .weights
            .iter()
            .zip(&params.weights)
            .any(|(g, w)| g.len() != w.len())
        || grads
            .biases
            .iter()
            .zip(&params.biases)
            .any(|(g, b)| g.len() != b.len())
    {
        return Err(CoreError::Shape("gradient shapes do not match".into()));
    }
    if !grads.is_finite() {
        return Err(CoreError::NonFinite("gradients".into()));
    }
    state.step += 1;
    let bc1 = 1.0 - state.beta1.powi(state.step as i32);
    let bc2 = 1.0 - state.beta2.powi(state.step as i32);
    for l in 0..params.weights.len() {
        adam_update_slice(
            &mut params.weights[l],
            &grads.weights[l],
            &mut state.m_weights[l],
            &mut state.v_weights[l],
            lr,
            state.beta1,
            state.beta2,
            state.eps,
            bc1,
            bc2,
        );
        adam_update_slice(
            &mut params.biases[l],
            &grads.biases[l],
            &mut state.m_biases[l],
            &mut state.v_biases[l],
            lr,
            state.beta1,
            state.beta2,
            state.eps,
            bc1,
            bc2,
        );
    }
    Ok(())
}

/// Polyak averaging: `target <- (1 - rate) * target + rate * source`.
pub fn polyak_update(target: &mut MlpParams, source: &MlpParams, rate: f64) -> Result<()> {
    if target.sizes != source.sizes {
        return Err(CoreError::Shape(
            "target and source architectures differ".into(),
        ));
    }
    for (tw, sw) in target.weights.iter_mut().zip(&source.weights) {
        for (t, s) in tw.iter_mut().zip(sw) {
            *t = (1.0 - rate) * *t + rate * s;
        }
    }
    for (tb, sb) in target.biases.iter_mut().zip(&source.biases) {
        for (t, s) in tb.iter_mut().zip(sb) {
            *t = (1.0 - rate) * *t + rate * s;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Finite-difference checking.
// ---------------------------------------------------------------------------

/// Central finite-difference gradient of a scalar function of the
/// parameters, perturbing one parameter at a time by +-h.
pub fn finite_difference_grads(
    params: &MlpParams,
    mut f: impl FnMut(&MlpParams) -> f64,
    h: f64,
) -> MlpGrads {
    let mut fd = MlpGrads::zeros_like(params);
    let mut probe = params.clone();
    for l in 0..params.weights.len() {
        for i in 0..params.weights[l].len() {
            let orig = probe.weights[l][i];
            probe.weights[l][i] = orig + h;
            let hi = f(&probe);
            probe.weights[l][i] = orig - h;
            let lo = f(&probe);
            probe.weights[l][i] = orig;
            fd.weights[l][i] = (hi - lo) / (2.0 * h);
        }
        for i in 0..params.biases[l].len() {
            let orig = probe.biases[l][i];
            probe.biases[l][i] = orig + h;
            let hi = f(&probe);
            probe.biases[l][i] = orig - h;
            let lo = f(&probe);
            probe.biases[l][i] = orig;
            fd.biases[l][i] = (hi - lo) / (2.0 * h);
        }
    }
    fd
}

/// Worst relative disagreement between two gradient sets:
/// `|a - b| / max(|a|, |b|, floor)` over every parameter.
pub fn max_relative_error(a: &MlpGrads, b: &MlpGrads, floor: f64) -> f64 {
    let mut worst: f64 = 0.0;
    let pairs = a
        .weights
        .iter()
        .zip(&b.weights)
        .chain(a.biases.iter().zip(&b.biases));
    for (av, bv) in pairs {
        for (&x, &y) in av.iter().zip(bv) {
            let denom = x.abs().max(y.abs()).max(floor);
            worst = worst.max((x - y).abs() / denom);
        }
    }
    worst
}

// ---------------------------------------------------------------------------
// Checkpoint format: magic + version, architecture, row-major f64 arrays.
// ---------------------------------------------------------------------------

const MLP_MAGIC: &[u8; 8] = b"MLPNET01";
const ADAM_MAGIC: &[u8; 8] = b"ADAMST01";

fn write_u64<W: Write>(w: &mut W, v: u64) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_f64_slice<W: Write>(w: &mut W, v: &[f64]) -> Result<()> {
    for x in v {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64_vec<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(n);
    let mut buf = [0u8; 8];
    for _ in 0..n {
        r.read_exact(&mut buf)?;
        out.push(f64::from_le_bytes(buf));
    }
    Ok(out)
}

pub fn write_mlp<W: Write>(w: &mut W, params: &MlpParams) -> Result<()> {
    params.validate()?;
    w.write_all(MLP_MAGIC)?;
    write_u64(w, params.sizes.len() as u64)?;
    for &s in &params.sizes {
        write_u64(w, s as u64)?;
    }
    for act in &params.activations {
        w.write_all(&[match act {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }])?;
    }
    w.write_all(&[match params.output_head {
        OutputHead::Identity => 0,
        OutputHead::CategoricalLogits => 1,
    }])?;
    for l in 0..params.n_layers() {
        write_f64_slice(w, &params.weights[l])?;
        write_f64_slice(w, &params.biases[l])?;
    }
    Ok(())
}

pub fn read_mlp<R: Read>(r: &mut R) -> Result<MlpParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MLP_MAGIC {
        return Err(CoreError::Parse {
            line: 0,
            msg: "not a network checkpoint (bad magic)".into(),
        });
    }
    let n_sizes = read_u64(r)? as usize;
    if !(2..=64).contains(&n_sizes) {
        return Err(CoreError::Parse {
            line: 0,
            msg: format!("implausible layer count {n_sizes}"),
        });
    }
    let mut sizes = Vec::with_capacity(n_sizes);
    for _ in 0..n_sizes {
        sizes.push(read_u64(r)? as usize);
    }
    let n_layers = n_sizes - 1;
    let mut activations = Vec::with_capacity(n_layers - 1);
    for _ in 0..n_layers - 1 {
        let mut code = [0u8; 1];
        r.read_exact(&mut code)?;
        activations.push(match code[0] {
            0 => Activation::Tanh,
            1 => Activation::Relu,
            c => {
                return Err(CoreError::Parse {
                    line: 0,
                    msg: format!("unknown activation code {c}"),
                })
            }
        });
    }
    let mut head = [0u8; 1];
    r.read_exact(&mut head)?;
    let output_head = match head[0] {
        0 => OutputHead::Identity,
        1 => OutputHead::CategoricalLogits,
        c => {
            return Err(CoreError::Parse {
                line: 0,
                msg: format!("unknown output head code {c}"),
            })
        }
    };
    let mut weights = Vec::with_capacity(n_layers);
    let mut biases = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        weights.push(read_f64_vec(r, sizes[l] * sizes[l + 1])?);
        biases.push(read_f64_vec(r, sizes[l + 1])?);
    }
    let params = MlpParams {
        sizes,
        weights,
        biases,
        activations,
        output_head,
    };
    params.validate()?;
    Ok(params)
}

pub fn write_adam<W: Write>(w: &mut W, state: &AdamState) -> Result<()> {
    w.write_all(ADAM_MAGIC)?;
    write_u64(w, state.step)?;
    write_f64_slice(w, &[state.beta1, state.beta2, state.eps])?;
    write_u64(w, state.m_weights.len() as u64)?;
    for l in 0..state.m_weights.len() {
        write_u64(w, state.m_weights[l].len() as u64)?;
        write_u64(w, state.m_biases[l].len() as u64)?;
        write_f64_slice(w, &state.m_weights[l])?;
        write_f64_slice(w, &state.m_biases[l])?;
        write_f64_slice(w, &state.v_weights[l])?;
        write_f64_slice(w, &state.v_biases[l])?;
    }
    Ok(())
}

pub fn read_adam<R: Read>(r: &mut R) -> Result<AdamState> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != ADAM_MAGIC {
        return Err(CoreError::Parse {
            line: 0,
            msg: "not an optimizer checkpoint (bad magic)".into(),
        });
    }
    let step = read_u64(r)?;
    let consts = read_f64_vec(r, 3)?;
    let n_layers = read_u64(r)? as usize;
    let mut state = AdamState {
        m_weights: Vec::with_capacity(n_layers),
        m_biases: Vec::with_capacity(n_layers),
        v_weights: Vec::with_capacity(n_layers),
        v_biases: Vec::with_capacity(n_layers),
        step,
        beta1: consts[0],
        beta2: consts[1],
        eps: consts[2],
    };
    for _ in 0..n_layers {
        let nw = read_u64(r)? as usize;
        let nb = read_u64(r)? as usize;
        state.m_weights.push(read_f64_vec(r, nw)?);
        state.m_biases.push(read_f64_vec(r, nb)?);
        state.v_weights.push(read_f64_vec(r, nw)?);
        state.v_biases.push(read_f64_vec(r, nb)?);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_batch(rows: &[Vec<f64>]) -> Vec<Input<'_>> {
        rows.iter().map(|r| Input::Dense(r)).collect()
    }

    #[test]
    fn init_is_deterministic_in_the_seed() {
        let a = mlp_init(&[4, 8, 2], 7).unwrap();
        let b = mlp_init(&[4, 8, 2], 7).unwrap();
        let c = mlp_init(&[4, 8, 2], 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        a.validate().unwrap();
    }

    #[test]
    fn param_count_matches_arithmetic() {
        let p = mlp_init(&[8, 32, 32, 4], 0).unwrap();
        assert_eq!(
            p.param_count(),
            8 * 32 + 32 + 32 * 32 + 32 + 32 * 4 + 4 // 1476
        );
    }

    #[test]
    fn identity_single_layer_reproduces_input() {
        let mut p = mlp_init(&[3, 3], 0).unwrap();
        p.weights[0] = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        p.biases[0] = vec![0.0; 3];
        let x = vec![0.3, -1.2, 4.0];
        let (out, _) = forward(&p, &dense_batch(std::slice::from_ref(&x))).unwrap();
        assert_eq!(out[0], x);
    }

    #[test]
    fn zero_input_zero_bias_tanh_gives_zero() {
        let p = mlp_init(&[4, 16, 2], 3).unwrap();
        let x = vec![0.0; 4];
        let (out, _) = forward(&p, &dense_batch(std::slice::from_ref(&x))).unwrap();
        assert_eq!(out[0], vec![0.0, 0.0]);
    }

    #[test]
    fn batch_rows_match_single_sample_runs() {
        let p = mlp_init(&[5, 12, 3], 11).unwrap();
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|i| (0..5).map(|j| (i * 5 + j) as f64 * 0.1 - 1.0).collect())
            .collect();
        let (batch_out, _) = forward(&p, &dense_batch(&rows)).unwrap();
        for (i, row) in rows.iter().enumerate() {
            let (single, _) = forward(&p, &dense_batch(std::slice::from_ref(row))).unwrap();
            assert_eq!(batch_out[i], single[0]);
        }
    }

    #[test]
    fn one_hot_and_dense_inputs_agree_bitwise() {
        let p = mlp_init(&[10, 8, 4], 5).unwrap();
        let idx = [1usize, 4, 7];
        let mut x = vec![0.0; 10];
        for &j in &idx {
            x[j] = 1.0;
        }
        let (dense_out, dense_cache) = forward(&p, &[Input::Dense(&x)]).unwrap();
        let (hot_out, hot_cache) = forward(&p, &[Input::OneHot(&idx)]).unwrap();
        assert_eq!(dense_out, hot_out);

        let og = vec![vec![0.25, -1.0, 0.5, 2.0]];
        let gd = backward(&p, &dense_cache, &og).unwrap();
        let gh = backward(&p, &hot_cache, &og).unwrap();
        assert_eq!(gd, gh);
    }

    #[test]
    fn hybrid_input_matches_equivalent_dense_vector() {
        let mut p = mlp_init(&[12, 9, 3], 21).unwrap();
        let mut rng = rng_from(99);
        for b in p.biases.iter_mut().flatten() {
            *b = rng.gen_range(-0.5..0.5);
        }
        let idx = [0usize, 3, 7];
        let tail = [0.5, -1.25, 0.0, 2.0];
        let mut x = vec![0.0; 12];
        for &j in &idx {
            x[j] = 1.0;
        }
        x[8..].copy_from_slice(&tail);

        let (dense_out, dense_cache) = forward(&p, &[Input::Dense(&x)]).unwrap();
        let (hyb_out, hyb_cache) =
            forward(&p, &[Input::OneHotDense { idx: &idx, tail: &tail }]).unwrap();
        for (a, b) in dense_out[0].iter().zip(&hyb_out[0]) {
            assert!((a - b).abs() < 1e-12);
        }

        let og = vec![vec![1.0, -0.5, 0.25]];
        let gd = backward(&p, &dense_cache, &og).unwrap();
        let gh = backward(&p, &hyb_cache, &og).unwrap();
        assert!(max_relative_error(&gd, &gh, 1e-9) < 1e-9);

        // FD on the hybrid path directly.
        let inputs = [Input::OneHotDense { idx: &idx, tail: &tail }];
        let (out, cache) = forward(&p, &inputs).unwrap();
        let og: Vec<Vec<f64>> = out.iter().map(|o| o.iter().map(|v| 2.0 * v).collect()).collect();
        let analytic = backward(&p, &cache, &og).unwrap();
        let fd = finite_difference_grads(
            &p,
            |q| {
                let (o, _) = forward(q, &inputs).unwrap();
                o[0].iter().map(|v| v * v).sum()
            },
            1e-5,
        );
        assert!(max_relative_error(&analytic, &fd, 1e-4) < 1e-4);

        // Indices may not reach into the dense tail.
        assert!(forward(&p, &[Input::OneHotDense { idx: &[9], tail: &tail }]).is_err());
    }

    #[test]
    fn linear_regression_gradient_matches_closed_form() {
        // Single linear layer, squared loss on one sample:
        // d/dW of (w.x - y)^2 = 2 (w.x - y) x.
        let mut p = mlp_init(&[3, 1], 2).unwrap();
        p.weights[0] = vec![0.5, -0.25, 1.5];
        p.biases[0] = vec![0.1];
        let x = vec![1.0, 2.0, -1.0];
        let y = 2.0;
        let (out, cache) = forward(&p, &dense_batch(std::slice::from_ref(&x))).unwrap();
        let resid = out[0][0] - y;
        let grads = backward(&p, &cache, &[vec![2.0 * resid]]).unwrap();
        for j in 0..3 {
            assert!((grads.weights[0][j] - 2.0 * resid * x[j]).abs() < 1e-12);
        }
        assert!((grads.biases[0][0] - 2.0 * resid).abs() < 1e-12);
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let p = mlp_init(&[6, 9, 2], 4).unwrap();
        let x = vec![0.4; 6];
        let (_, cache) = forward(&p, &dense_batch(std::slice::from_ref(&x))).unwrap();
        let grads = backward(&p, &cache, &[vec![0.0, 0.0]]).unwrap();
        assert_eq!(grads, MlpGrads::zeros_like(&p));
    }

    fn quadratic_loss(p: &MlpParams, inputs: &[Input], targets: &[Vec<f64>]) -> f64 {
        let (out, _) = forward(p, inputs).unwrap();
        let mut loss = 0.0;
        for (o, t) in out.iter().zip(targets) {
            for (a, b) in o.iter().zip(t) {
                loss += (a - b) * (a - b);
            }
        }
        loss
    }

    #[test]
    fn backward_matches_finite_differences_on_random_nets() {
        for seed in 0..4u64 {
            let p = if seed % 2 == 0 {
                mlp_init(&[7, 10, 3], seed).unwrap()
            } else {
                mlp_init(&[7, 10, 3], seed)
                    .unwrap()
                    .with_activations(Activation::Relu)
            };
            let mut rng = rng_from(derive(seed, 0xfd));
            let rows: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let targets: Vec<Vec<f64>> = (0..5)
                .map(|_| (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let inputs = dense_batch(&rows);

            let (out, cache) = forward(&p, &inputs).unwrap();
            let og: Vec<Vec<f64>> = out
                .iter()
                .zip(&targets)
                .map(|(o, t)| o.iter().zip(t).map(|(a, b)| 2.0 * (a - b)).collect())
                .collect();
            let analytic = backward(&p, &cache, &og).unwrap();
            let fd = finite_difference_grads(&p, |q| quadratic_loss(q, &inputs, &targets), 1e-5);
            let err = max_relative_error(&analytic, &fd, 1e-4);
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let p1 = mlp_init(&[4, 6, 2], 0).unwrap();
        let p2 = mlp_init(&[4, 7, 2], 0).unwrap();
        let x = vec![0.1; 4];
        let (_, cache) = forward(&p1, &dense_batch(std::slice::from_ref(&x))).unwrap();
        assert!(backward(&p2, &cache, &[vec![1.0, 1.0]]).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_parameters_fixed() {
        let mut p = mlp_init(&[3, 4, 1], 1).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let zeros = MlpGrads::zeros_like(&p);
        adam_step(&mut p, &zeros, &mut state, 0.01).unwrap();
        assert_eq!(p, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        let mut p = mlp_init(&[1, 1], 0).unwrap();
        p.weights[0] = vec![0.0];
        let w0 = p.weights[0][0];
        let mut state = AdamState::new(&p);
        let mut grads = MlpGrads::zeros_like(&p);
        grads.weights[0][0] = 1.0;
        adam_step(&mut p, &grads, &mut state, 0.01).unwrap();
        // mhat = g, vhat = g^2, so the step is lr * g / (|g| + eps) ~ lr.
        assert!((p.weights[0][0] - (w0 - 0.01)).abs() < 1e-8);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = mlp_init(&[2, 2], 0).unwrap();
        let before = p.clone();
        let mut state = AdamState::new(&p);
        let mut grads = MlpGrads::zeros_like(&p);
        grads.weights[0][1] = f64::NAN;
        assert!(adam_step(&mut p, &grads, &mut state, 0.1).is_err());
        assert_eq!(p, before);
        assert_eq!(state.step, 0);
    }

    #[test]
    fn polyak_moves_target_toward_source() {
        let mut target = mlp_init(&[2, 2], 0).unwrap();
        let source = mlp_init(&[2, 2], 9).unwrap();
        let w0 = target.weights[0][0];
        polyak_update(&mut target, &source, 0.25).unwrap();
        let expect = 0.75 * w0 + 0.25 * source.weights[0][0];
        assert!((target.weights[0][0] - expect).abs() < 1e-15);
    }

    #[test]
    fn checkpoints_round_trip_bitwise() {
        let p = mlp_init(&[6, 11, 4], 13)
            .unwrap()
            .with_head(OutputHead::CategoricalLogits)
            .with_activations(Activation::Relu);
        let mut buf = Vec::new();
        write_mlp(&mut buf, &p).unwrap();
        let back = read_mlp(&mut buf.as_slice()).unwrap();
        assert_eq!(p, back);

        let mut state = AdamState::new(&p);
        let mut q = p.clone();
        let mut grads = MlpGrads::zeros_like(&p);
        grads.weights[0][0] = 0.5;
        grads.biases[1][2] = -0.25;
        adam_step(&mut q, &grads, &mut state, 0.001).unwrap();
        let mut abuf = Vec::new();
        write_adam(&mut abuf, &state).unwrap();
        let astate = read_adam(&mut abuf.as_slice()).unwrap();
        assert_eq!(state, astate);

        assert!(read_mlp(&mut abuf.as_slice()).is_err());
    }
}
