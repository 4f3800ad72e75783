//! The neural weight predictor: pointwise residual network with instance and
//! batch normalization, log-sigmoid heads and log-sum-exp normalization.
//! Forward, manual backward, initialization and binary serialization.
//!
//! Activations are channel-major (C x N) internally; the public weight
//! matrices are observation-major (N x M) to match the pipeline.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::io::{Read, Write};
use std::path::Path;

use crate::scene::Scene;

/// Input feature dimension: the observation 4-vector.
pub const INPUT_DIM: usize = 4;

const NORM_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const WEIGHTS_MAGIC: &[u8; 4] = b"PWTS";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct NetConfig {
    pub m_star: usize,
    /// Hidden channel count.
    pub width: usize,
    /// Residual block count.
    pub blocks: usize,
}

impl NetConfig {
    pub fn new(m_star: usize) -> Self {
        NetConfig {
            m_star,
            width: 128,
            blocks: 6,
        }
    }
}

/// One named parameter tensor, row-major. Vectors use `cols = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub data: Vec<f64>,
}

impl Tensor {
    fn new(name: &str, rows: usize, cols: usize, trainable: bool, fill: f64) -> Self {
        Tensor {
            name: name.to_string(),
            rows,
            cols,
            trainable,
            data: vec![fill; rows * cols],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    fn as_vector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.data)
    }
}

/// All parameters of the predictor, in a fixed flat layout:
/// stem (w, b), then per block and sub-layer
/// (conv.w, conv.b, in.scale, in.shift, bn.scale, bn.shift, bn.rmean,
/// bn.rvar), then head_p (w, b) and head_q (w, b).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub config: NetConfig,
    pub tensors: Vec<Tensor>,
}

const STEM_W: usize = 0;
const STEM_B: usize = 1;
const SUB_TENSORS: usize = 8;

fn sub_base(block: usize, sub: usize) -> usize {
    2 + (block * 2 + sub) * SUB_TENSORS
}

fn head_base(cfg: &NetConfig) -> usize {
    2 + cfg.blocks * 2 * SUB_TENSORS
}

fn manifest(cfg: &NetConfig) -> Vec<(String, usize, usize, bool)> {
    let w = cfg.width;
    let mut m = vec![
        ("stem.w".to_string(), w, INPUT_DIM, true),
        ("stem.b".to_string(), w, 1, true),
    ];
    for k in 0..cfg.blocks {
        for s in 0..2 {
            let p = format!("block{k}.sub{s}");
            m.push((format!("{p}.conv.w"), w, w, true));
            m.push((format!("{p}.conv.b"), w, 1, true));
            m.push((format!("{p}.in.scale"), w, 1, true));
            m.push((format!("{p}.in.shift"), w, 1, true));
            m.push((format!("{p}.bn.scale"), w, 1, true));
            m.push((format!("{p}.bn.shift"), w, 1, true));
            m.push((format!("{p}.bn.rmean"), w, 1, false));
            m.push((format!("{p}.bn.rvar"), w, 1, false));
        }
    }
    m.push(("head_p.w".to_string(), cfg.m_star, w, true));
    m.push(("head_p.b".to_string(), cfg.m_star, 1, true));
    m.push(("head_q.w".to_string(), cfg.m_star + 1, w, true));
    m.push(("head_q.b".to_string(), cfg.m_star + 1, 1, true));
    m
}

/// He-style fan-in initialization for conv weights, zero biases, unit norm
/// scales, zero shifts, running stats (0, 1). Deterministic per seed.
pub fn init_params(cfg: NetConfig, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tensors = manifest(&cfg)
        .into_iter()
        .map(|(name, rows, cols, trainable)| {
            let mut t = if name.ends_with(".scale") || name.ends_with(".rvar") {
                Tensor::new(&name, rows, cols, trainable, 1.0)
            } else {
                Tensor::new(&name, rows, cols, trainable, 0.0)
            };
            if name.ends_with(".w") {
                let std = (2.0 / cols as f64).sqrt();
                for v in &mut t.data {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *v = z * std;
                }
            }
            t
        })
        .collect();
    NetworkParams { config: cfg, tensors }
}

/// Per-parameter gradient accumulators, same layout as the tensors;
/// non-trainable slots stay zero.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientBundle {
    pub grads: Vec<Vec<f64>>,
}

impl GradientBundle {
    pub fn zeros_like(params: &NetworkParams) -> Self {
        GradientBundle {
            grads: params.tensors.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &GradientBundle, scale: f64) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in &mut self.grads {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|x| x.is_finite()))
    }

    pub fn norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }
}

struct NormCache {
    xhat: DMatrix<f64>,
    inv_std: DVector<f64>,
}

struct SubCache {
    x_in: DMatrix<f64>,
    inorm: NormCache,
    bnorm: NormCache,
    pre_relu: DMatrix<f64>,
    out: DMatrix<f64>,
    batch_mean: DVector<f64>,
    batch_var: DVector<f64>,
}

struct BlockCache {
    subs: [SubCache; 2],
}

/// Activations retained by a forward pass for the backward pass and for
/// running-statistics updates.
pub struct ForwardCache {
    pub mode: Mode,
    x: DMatrix<f64>,
    stem_z: DMatrix<f64>,
    stem_a: DMatrix<f64>,
    blocks: Vec<BlockCache>,
    zp: DMatrix<f64>,
    zq: DMatrix<f64>,
    lp_cm: DMatrix<f64>,
    lq_cm: DMatrix<f64>,
}

/// Scene observations as a D x N feature matrix (normalized-frame 4-vectors).
pub fn scene_features(scene: &Scene) -> DMatrix<f64> {
    let n = scene.len();
    DMatrix::from_fn(INPUT_DIM, n, |d, i| scene.observations[i].v[d])
}

fn conv_forward(w: &Tensor, b: &Tensor, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut z = w.as_matrix() * x;
    let bias = b.as_vector();
    for mut col in z.column_iter_mut() {
        col += &bias;
    }
    z
}

fn channel_stats(x: &DMatrix<f64>) -> (DVector<f64>, DVector<f64>) {
    let n = x.ncols() as f64;
    let mean = DVector::from_iterator(x.nrows(), x.row_iter().map(|r| r.sum() / n));
    let var = DVector::from_iterator(
        x.nrows(),
        x.row_iter()
            .enumerate()
            .map(|(c, r)| r.iter().map(|v| (v - mean[c]).powi(2)).sum::<f64>() / n),
    );
    (mean, var)
}

fn norm_apply(
    x: &DMatrix<f64>,
    mean: &DVector<f64>,
    var: &DVector<f64>,
    scale: &Tensor,
    shift: &Tensor,
) -> (NormCache, DMatrix<f64>) {
    let inv_std = DVector::from_iterator(x.nrows(), var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()));
    let mut xhat = x.clone();
    for (c, mut row) in xhat.row_iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = (*v - mean[c]) * inv_std[c];
        }
    }
    let mut out = xhat.clone();
    for (c, mut row) in out.row_iter_mut().enumerate() {
        for v in row.iter_mut() {
            *v = *v * scale.data[c] + shift.data[c];
        }
    }
    (NormCache { xhat, inv_std }, out)
}

fn relu(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.map(|v| v.max(0.0))
}

fn log_sigmoid(x: &DMatrix<f64>) -> DMatrix<f64> {
    // -softplus(-x), overflow-safe in both tails
    x.map(|v| {
        if v > 0.0 {
            -(-v).exp().ln_1p()
        } else {
            v - v.exp().ln_1p()
        }
    })
}

fn sub_forward(params: &NetworkParams, base: usize, x: &DMatrix<f64>, mode: Mode) -> SubCache {
    let t = &params.tensors;
    let conv_out = conv_forward(&t[base], &t[base + 1], x);
    let (in_mean, in_var) = channel_stats(&conv_out);
    let (inorm, in_out) = norm_apply(&conv_out, &in_mean, &in_var, &t[base + 2], &t[base + 3]);
    let (batch_mean, batch_var) = match mode {
        Mode::Train => channel_stats(&in_out),
        Mode::Infer => (t[base + 6].as_vector(), t[base + 7].as_vector()),
    };
    let (bnorm, pre_relu) = norm_apply(&in_out, &batch_mean, &batch_var, &t[base + 4], &t[base + 5]);
    let out = relu(&pre_relu);
    SubCache {
        x_in: x.clone(),
        inorm,
        bnorm,
        pre_relu,
        out,
        batch_mean,
        batch_var,
    }
}

/// Forward pass. In train mode batch norm uses batch statistics (retained in
/// the cache; commit them with [`update_running_stats`]); in infer mode it
/// uses the stored running statistics. Returns observation-major logP
/// (N x M*) and logQ (N x (M*+1)).
pub fn network_forward(
    params: &NetworkParams,
    scene: &Scene,
    mode: Mode,
) -> (DMatrix<f64>, DMatrix<f64>, ForwardCache) {
    let x = scene_features(scene);
    network_forward_features(params, &x, mode)
}

pub fn network_forward_features(
    params: &NetworkParams,
    x: &DMatrix<f64>,
    mode: Mode,
) -> (DMatrix<f64>, DMatrix<f64>, ForwardCache) {
    let cfg = &params.config;
    let t = &params.tensors;
    let stem_z = conv_forward(&t[STEM_W], &t[STEM_B], x);
    let stem_a = relu(&stem_z);
    let mut feat = stem_a.clone();
    let mut blocks = Vec::with_capacity(cfg.blocks);
    for k in 0..cfg.blocks {
        let s0 = sub_forward(params, sub_base(k, 0), &feat, mode);
        let s1 = sub_forward(params, sub_base(k, 1), &s0.out, mode);
        feat = &feat + &s1.out;
        blocks.push(BlockCache { subs: [s0, s1] });
    }
    let hb = head_base(cfg);
    let zp = conv_forward(&t[hb], &t[hb + 1], &feat);
    let zq = conv_forward(&t[hb + 2], &t[hb + 3], &feat);
    let lp_tilde = log_sigmoid(&zp);
    let lq_tilde = log_sigmoid(&zq);
    // logP: normalize over observations (columns of the N x M* output =
    // rows of the channel-major M* x N activation)
    let mut lp_cm = lp_tilde.clone();
    for mut row in lp_cm.row_iter_mut() {
        let lse = log_sum_exp(&row.iter().copied().collect::<Vec<_>>());
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    // logQ: normalize over the M*+1 slots (columns of the channel-major
    // (M*+1) x N activation)
    let mut lq_cm = lq_tilde;
    for mut col in lq_cm.column_iter_mut() {
        let lse = log_sum_exp(&col.iter().copied().collect::<Vec<_>>());
        for v in col.iter_mut() {
            *v -= lse;
        }
    }
    let log_p = lp_cm.transpose();
    let log_q = lq_cm.transpose();
    let cache = ForwardCache {
        mode,
        x: x.clone(),
        stem_z,
        stem_a,
        blocks,
        zp,
        zq,
        lp_cm,
        lq_cm,
    };
    (log_p, log_q, cache)
}

fn log_sum_exp(vals: &[f64]) -> f64 {
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Commits the batch statistics of a train-mode forward into the running
/// means/variances with momentum 0.1.
pub fn update_running_stats(params: &mut NetworkParams, cache: &ForwardCache) {
    assert_eq!(cache.mode, Mode::Train, "running stats come from train mode");
    for (k, block) in cache.blocks.iter().enumerate() {
        for (s, sub) in block.subs.iter().enumerate() {
            let base = sub_base(k, s);
            for c in 0..params.config.width {
                let rm = &mut params.tensors[base + 6].data[c];
                *rm = (1.0 - BN_MOMENTUM) * *rm + BN_MOMENTUM * sub.batch_mean[c];
                let rv = &mut params.tensors[base + 7].data[c];
                *rv = (1.0 - BN_MOMENTUM) * *rv + BN_MOMENTUM * sub.batch_var[c];
            }
        }
    }
}

fn norm_backward(
    d_out: &DMatrix<f64>,
    cache: &NormCache,
    scale: &Tensor,
) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let n = d_out.ncols() as f64;
    let mut dx = DMatrix::zeros(d_out.nrows(), d_out.ncols());
    let mut d_scale = vec![0.0; d_out.nrows()];
    let mut d_shift = vec![0.0; d_out.nrows()];
    for c in 0..d_out.nrows() {
        let mut sum_d = 0.0;
        let mut sum_dx = 0.0;
        for i in 0..d_out.ncols() {
            let dy = d_out[(c, i)];
            let dxhat = dy * scale.data[c];
            sum_d += dxhat;
            sum_dx += dxhat * cache.xhat[(c, i)];
            d_scale[c] += dy * cache.xhat[(c, i)];
            d_shift[c] += dy;
        }
        for i in 0..d_out.ncols() {
            let dxhat = d_out[(c, i)] * scale.data[c];
            dx[(c, i)] =
                cache.inv_std[c] / n * (n * dxhat - sum_d - cache.xhat[(c, i)] * sum_dx);
        }
    }
    (dx, d_scale, d_shift)
}

fn relu_backward(d_out: &DMatrix<f64>, pre: &DMatrix<f64>) -> DMatrix<f64> {
    d_out.zip_map(pre, |d, z| if z > 0.0 { d } else { 0.0 })
}

fn conv_backward(
    w: &Tensor,
    x_in: &DMatrix<f64>,
    d_z: &DMatrix<f64>,
) -> (DMatrix<f64>, Vec<f64>, DMatrix<f64>) {
    let d_w = d_z * x_in.transpose();
    let d_b: Vec<f64> = d_z.row_iter().map(|r| r.sum()).collect();
    let d_x = w.as_matrix().transpose() * d_z;
    (d_w, d_b, d_x)
}

fn accumulate(bundle: &mut GradientBundle, idx: usize, values: impl IntoIterator<Item = f64>) {
    for (g, v) in bundle.grads[idx].iter_mut().zip(values) {
        *g += v;
    }
}

fn sub_backward(
    params: &NetworkParams,
    base: usize,
    sub: &SubCache,
    d_out: &DMatrix<f64>,
    bundle: &mut GradientBundle,
) -> DMatrix<f64> {
    let t = &params.tensors;
    let d_pre = relu_backward(d_out, &sub.pre_relu);
    let (d_in_out, d_bn_scale, d_bn_shift) = norm_backward(&d_pre, &sub.bnorm, &t[base + 4]);
    accumulate(bundle, base + 4, d_bn_scale);
    accumulate(bundle, base + 5, d_bn_shift);
    let (d_conv_out, d_in_scale, d_in_shift) = norm_backward(&d_in_out, &sub.inorm, &t[base + 2]);
    accumulate(bundle, base + 2, d_in_scale);
    accumulate(bundle, base + 3, d_in_shift);
    let (d_w, d_b, d_x) = conv_backward(&t[base], &sub.x_in, &d_conv_out);
    accumulate(bundle, base, d_w.transpose().iter().copied().collect::<Vec<_>>());
    accumulate(bundle, base + 1, d_b);
    d_x
}

/// Exact gradients of `sum(grad_log_p .* logP) + sum(grad_log_q .* logQ)`
/// with respect to every trainable parameter. Expects a train-mode cache.
pub fn network_backward(
    params: &NetworkParams,
    cache: &ForwardCache,
    grad_log_p: &DMatrix<f64>,
    grad_log_q: &DMatrix<f64>,
) -> GradientBundle {
    assert_eq!(cache.mode, Mode::Train, "backward requires a train-mode cache");
    let cfg = &params.config;
    assert_eq!(grad_log_p.nrows(), cache.x.ncols(), "grad_log_p row count");
    assert_eq!(grad_log_p.ncols(), cfg.m_star, "grad_log_p column count");
    assert_eq!(grad_log_q.nrows(), cache.x.ncols(), "grad_log_q row count");
    assert_eq!(grad_log_q.ncols(), cfg.m_star + 1, "grad_log_q column count");
    let mut bundle = GradientBundle::zeros_like(params);
    let t = &params.tensors;
    let gp_cm = grad_log_p.transpose();
    let gq_cm = grad_log_q.transpose();

    // log-sum-exp normalization: d/dz_tilde = g - softmax * sum(g)
    let mut d_lp = gp_cm.clone();
    for (c, mut row) in d_lp.row_iter_mut().enumerate() {
        let gsum: f64 = gp_cm.row(c).sum();
        for (i, v) in row.iter_mut().enumerate() {
            *v -= cache.lp_cm[(c, i)].exp() * gsum;
        }
    }
    let mut d_lq = gq_cm.clone();
    for (i, mut col) in d_lq.column_iter_mut().enumerate() {
        let gsum: f64 = gq_cm.column(i).sum();
        for (c, v) in col.iter_mut().enumerate() {
            *v -= cache.lq_cm[(c, i)].exp() * gsum;
        }
    }
    // log-sigmoid: dy/dz = 1 - sigmoid(z) = 1 - exp(y), with
    // y = z - LSE-normalizer + normalizer again = the pre-normalization
    // activation; recompute exp(y) from z for stability
    let d_zp = d_lp.zip_map(&cache.zp, |d, z| d * (1.0 - sigmoid(z)));
    let d_zq = d_lq.zip_map(&cache.zq, |d, z| d * (1.0 - sigmoid(z)));

    let hb = head_base(cfg);
    let feat = block_output(cache, cfg.blocks);
    let (d_wp, d_bp, d_feat_p) = conv_backward(&t[hb], &feat, &d_zp);
    accumulate(&mut bundle, hb, d_wp.transpose().iter().copied().collect::<Vec<_>>());
    accumulate(&mut bundle, hb + 1, d_bp);
    let (d_wq, d_bq, d_feat_q) = conv_backward(&t[hb + 2], &feat, &d_zq);
    accumulate(&mut bundle, hb + 2, d_wq.transpose().iter().copied().collect::<Vec<_>>());
    accumulate(&mut bundle, hb + 3, d_bq);

    let mut d_feat = d_feat_p + d_feat_q;
    for k in (0..cfg.blocks).rev() {
        let block = &cache.blocks[k];
        // residual: out = in + sub1(sub0(in))
        let d_branch = sub_backward(params, sub_base(k, 1), &block.subs[1], &d_feat, &mut bundle);
        let d_in_branch = sub_backward(params, sub_base(k, 0), &block.subs[0], &d_branch, &mut bundle);
        d_feat += d_in_branch;
    }
    let d_stem_z = relu_backward(&d_feat, &cache.stem_z);
    let (d_w, d_b, _) = conv_backward(&t[STEM_W], &cache.x, &d_stem_z);
    accumulate(&mut bundle, STEM_W, d_w.transpose().iter().copied().collect::<Vec<_>>());
    accumulate(&mut bundle, STEM_B, d_b);
    bundle
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn block_output(cache: &ForwardCache, blocks: usize) -> DMatrix<f64> {
    if blocks == 0 {
        cache.stem_a.clone()
    } else {
        let k = blocks - 1;
        block_output(cache, k) + &cache.blocks[k].subs[1].out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum WeightsFileError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a weights file (bad magic)")]
    BadMagic,
    #[error("unsupported weights format version {0}")]
    BadVersion(u32),
    #[error("tensor `{tensor}`: expected shape {expected_rows}x{expected_cols}, found {rows}x{cols}")]
    ShapeMismatch {
        tensor: String,
        expected_rows: usize,
        expected_cols: usize,
        rows: usize,
        cols: usize,
    },
    #[error("tensor `{expected}` missing or out of order (found `{found}`)")]
    NameMismatch { expected: String, found: String },
    #[error("truncated weights file")]
    Truncated,
}

/// Binary weights container: magic, version, config header, then each tensor
/// as (name, shape, trainable flag, f64 little-endian data) in layout order.
pub fn save_params(params: &NetworkParams, path: &Path) -> Result<(), WeightsFileError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(WEIGHTS_MAGIC)?;
    f.write_all(&WEIGHTS_VERSION.to_le_bytes())?;
    for v in [
        params.config.m_star,
        INPUT_DIM,
        params.config.width,
        params.config.blocks,
        params.tensors.len(),
    ] {
        f.write_all(&(v as u32).to_le_bytes())?;
    }
    for t in &params.tensors {
        f.write_all(&(t.name.len() as u32).to_le_bytes())?;
        f.write_all(t.name.as_bytes())?;
        f.write_all(&(t.rows as u32).to_le_bytes())?;
        f.write_all(&(t.cols as u32).to_le_bytes())?;
        f.write_all(&[t.trainable as u8])?;
        for v in &t.data {
            f.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_params(path: &Path) -> Result<NetworkParams, WeightsFileError> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut f, &mut magic)?;
    if &magic != WEIGHTS_MAGIC {
        return Err(WeightsFileError::BadMagic);
    }
    let version = read_u32(&mut f)?;
    if version != WEIGHTS_VERSION {
        return Err(WeightsFileError::BadVersion(version));
    }
    let m_star = read_u32(&mut f)? as usize;
    let d = read_u32(&mut f)? as usize;
    let width = read_u32(&mut f)? as usize;
    let blocks = read_u32(&mut f)? as usize;
    let count = read_u32(&mut f)? as usize;
    let cfg = NetConfig { m_star, width, blocks };
    let expected = manifest(&cfg);
    if d != INPUT_DIM || count != expected.len() {
        return Err(WeightsFileError::NameMismatch {
            expected: format!("{} tensors with D={INPUT_DIM}", expected.len()),
            found: format!("{count} tensors with D={d}"),
        });
    }
    let mut tensors = Vec::with_capacity(count);
    for (name, rows, cols, trainable) in expected {
        let nlen = read_u32(&mut f)? as usize;
        let mut nbuf = vec![0u8; nlen];
        read_exact(&mut f, &mut nbuf)?;
        let found = String::from_utf8_lossy(&nbuf).into_owned();
        if found != name {
            return Err(WeightsFileError::NameMismatch { expected: name, found });
        }
        let (r, c) = (read_u32(&mut f)? as usize, read_u32(&mut f)? as usize);
        if (r, c) != (rows, cols) {
            return Err(WeightsFileError::ShapeMismatch {
                tensor: name,
                expected_rows: rows,
                expected_cols: cols,
                rows: r,
                cols: c,
            });
        }
        let mut flag = [0u8; 1];
        read_exact(&mut f, &mut flag)?;
        let mut data = vec![0.0; rows * cols];
        let mut buf = [0u8; 8];
        for v in &mut data {
            read_exact(&mut f, &mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        tensors.push(Tensor {
            name,
            rows,
            cols,
            trainable,
            data,
        });
    }
    Ok(NetworkParams { config: cfg, tensors })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8]) -> Result<(), WeightsFileError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            WeightsFileError::Truncated
        } else {
            WeightsFileError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, WeightsFileError> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Train-time resize to a fixed observation count: uniform subsample without
/// replacement above `n_max`, uniform duplication below. Ground truth labels
/// follow their observations.
pub fn pad_or_subsample(scene: &Scene, n_max: usize, rng: &mut ChaCha8Rng) -> Scene {
    let n = scene.len();
    if n == n_max {
        return scene.clone();
    }
    let indices: Vec<usize> = if n > n_max {
        let mut sel = rand::seq::index::sample(rng, n, n_max).into_vec();
        sel.sort_unstable();
        sel
    } else {
        let mut idx: Vec<usize> = (0..n).collect();
        use rand::Rng as _;
        idx.extend((0..n_max - n).map(|_| rng.gen_range(0..n)));
        idx
    };
    let mut out = scene.clone();
    out.observations = indices.iter().map(|&i| scene.observations[i]).collect();
    out.gt_labels = scene
        .gt_labels
        .as_ref()
        .map(|l| indices.iter().map(|&i| l[i]).collect());
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Observation, Task};
    use approx::assert_relative_eq;

    fn tiny_cfg(m_star: usize) -> NetConfig {
        NetConfig {
            m_star,
            width: 8,
            blocks: 2,
        }
    }

    fn random_scene(n: usize, seed: u64) -> Scene {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng as _;
        let observations = (0..n)
            .map(|_| {
                Observation::correspondence(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                )
            })
            .collect();
        Scene {
            task: Task::Homography,
            width: 1024.0,
            height: 1024.0,
            observations,
            gt_labels: None,
            gt_models: None,
            intrinsics: None,
            seed,
        }
    }

    fn loss_of(params: &NetworkParams, scene: &Scene, gp: &DMatrix<f64>, gq: &DMatrix<f64>) -> f64 {
        let (lp, lq, _) = network_forward(params, scene, Mode::Train);
        (gp.component_mul(&lp)).sum() + (gq.component_mul(&lq)).sum()
    }

    #[test]
    fn forward_normalization_various_n() {
        for n in [1usize, 5, 64] {
            let params = init_params(tiny_cfg(3), 1);
            let scene = random_scene(n, n as u64);
            for mode in [Mode::Train, Mode::Infer] {
                let (lp, lq, _) = network_forward(&params, &scene, mode);
                for j in 0..3 {
                    let s: f64 = (0..n).map(|i| lp[(i, j)].exp()).sum();
                    assert_relative_eq!(s, 1.0, epsilon = 1e-9);
                }
                for i in 0..n {
                    let s: f64 = (0..4).map(|j| lq[(i, j)].exp()).sum();
                    assert_relative_eq!(s, 1.0, epsilon = 1e-9);
                }
                assert!(lp.iter().chain(lq.iter()).all(|v| v.is_finite()));
            }
        }
    }

    #[test]
    fn zero_heads_give_uniform_outputs() {
        let mut params = init_params(tiny_cfg(2), 3);
        let hb = head_base(&params.config);
        for idx in hb..hb + 4 {
            params.tensors[idx].data.iter_mut().for_each(|v| *v = 0.0);
        }
        let n = 7;
        let scene = random_scene(n, 4);
        let (lp, lq, _) = network_forward(&params, &scene, Mode::Infer);
        for v in lp.iter() {
            assert_relative_eq!(*v, (1.0 / n as f64).ln(), epsilon = 1e-12);
        }
        for v in lq.iter() {
            assert_relative_eq!(*v, (1.0f64 / 3.0).ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn infer_mode_permutation_equivariance() {
        let params = init_params(tiny_cfg(2), 5);
        let scene = random_scene(9, 6);
        let (lp, lq, _) = network_forward(&params, &scene, Mode::Infer);
        let mut perm: Vec<usize> = (0..9).collect();
        perm.reverse();
        perm.swap(2, 5);
        let mut permuted = scene.clone();
        permuted.observations = perm.iter().map(|&i| scene.observations[i]).collect();
        let (lp2, lq2, _) = network_forward(&params, &permuted, Mode::Infer);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for j in 0..2 {
                assert_relative_eq!(lp2[(new_row, j)], lp[(old_row, j)], epsilon = 1e-12);
            }
            for j in 0..3 {
                assert_relative_eq!(lq2[(new_row, j)], lq[(old_row, j)], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn forward_deterministic() {
        let params = init_params(tiny_cfg(2), 8);
        let scene = random_scene(12, 9);
        let (a, b, _) = network_forward(&params, &scene, Mode::Train);
        let (a2, b2, _) = network_forward(&params, &scene, Mode::Train);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..2u64 {
            let params = init_params(tiny_cfg(2), seed);
            let scene = random_scene(6, seed + 100);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 200);
            use rand::Rng as _;
            let gp = DMatrix::from_fn(6, 2, |_, _| rng.gen_range(-1.0..1.0));
            let gq = DMatrix::from_fn(6, 3, |_, _| rng.gen_range(-1.0..1.0));
            let (_, _, cache) = network_forward(&params, &scene, Mode::Train);
            let bundle = network_backward(&params, &cache, &gp, &gq);
            let h = 1e-4;
            let mut worst: (f64, String) = (0.0, String::new());
            for ti in 0..params.tensors.len() {
                if !params.tensors[ti].trainable {
                    continue;
                }
                for vi in 0..params.tensors[ti].len() {
                    let mut pp = params.clone();
                    pp.tensors[ti].data[vi] += h;
                    let fp = loss_of(&pp, &scene, &gp, &gq);
                    let mut pm = params.clone();
                    pm.tensors[ti].data[vi] -= h;
                    let fm = loss_of(&pm, &scene, &gp, &gq);
                    let fd = (fp - fm) / (2.0 * h);
                    let an = bundle.grads[ti][vi];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    if rel > worst.0 {
                        worst = (rel, format!("{}[{vi}]", params.tensors[ti].name));
                    }
                }
            }
            assert!(worst.0 < 1e-4, "worst gradient {} rel err {}", worst.1, worst.0);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_bundle() {
        let params = init_params(tiny_cfg(2), 1);
        let scene = random_scene(5, 2);
        let (_, _, cache) = network_forward(&params, &scene, Mode::Train);
        let bundle = network_backward(
            &params,
            &cache,
            &DMatrix::zeros(5, 2),
            &DMatrix::zeros(5, 3),
        );
        assert_eq!(bundle.norm(), 0.0);
    }

    #[test]
    fn dead_path_head_gradient_is_zero() {
        let params = init_params(tiny_cfg(2), 1);
        let scene = random_scene(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        use rand::Rng as _;
        let gp = DMatrix::from_fn(5, 2, |_, _| rng.gen_range(-1.0..1.0));
        let (_, _, cache) = network_forward(&params, &scene, Mode::Train);
        let bundle = network_backward(&params, &cache, &gp, &DMatrix::zeros(5, 3));
        let hb = head_base(&params.config);
        assert!(bundle.grads[hb + 2].iter().all(|&g| g == 0.0));
        assert!(bundle.grads[hb + 3].iter().all(|&g| g == 0.0));
        // sample head did receive gradient
        assert!(bundle.grads[hb].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn init_deterministic_and_shapes() {
        let a = init_params(tiny_cfg(3), 42);
        let b = init_params(tiny_cfg(3), 42);
        assert_eq!(a, b);
        let c = init_params(tiny_cfg(3), 43);
        assert_ne!(a, c);
        assert_eq!(a.tensors.len(), 2 + 2 * 2 * 8 + 4);
        // running stats initialized to (0, 1)
        let base = sub_base(0, 0);
        assert!(a.tensors[base + 6].data.iter().all(|&v| v == 0.0));
        assert!(a.tensors[base + 7].data.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn save_load_round_trip_bit_exact() {
        let params = init_params(tiny_cfg(2), 11);
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("w1.bin");
        let p2 = dir.path().join("w2.bin");
        save_params(&params, &p1).unwrap();
        let loaded = load_params(&p1).unwrap();
        assert_eq!(params, loaded);
        save_params(&loaded, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_rejects_corruption() {
        let params = init_params(tiny_cfg(2), 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.bin");
        save_params(&params, &p).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_params(&p), Err(WeightsFileError::BadMagic)));
        // truncation
        save_params(&params, &p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_params(&p), Err(WeightsFileError::Truncated)));
    }

    #[test]
    fn running_stats_update_momentum() {
        let mut params = init_params(tiny_cfg(2), 1);
        let scene = random_scene(16, 3);
        let (_, _, cache) = network_forward(&params, &scene, Mode::Train);
        let base = sub_base(0, 0);
        let before = params.tensors[base + 6].data.clone();
        update_running_stats(&mut params, &cache);
        let after = &params.tensors[base + 6].data;
        for (c, (&b, &a)) in before.iter().zip(after).enumerate() {
            let expect = 0.9 * b + 0.1 * cache.blocks[0].subs[0].batch_mean[c];
            assert_relative_eq!(a, expect, epsilon = 1e-12);
        }
    }

    #[test]
    fn pad_or_subsample_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut scene = random_scene(10, 1);
        scene.gt_labels = Some((0..10).map(|i| i % 3).collect());
        // identity
        let same = pad_or_subsample(&scene, 10, &mut rng);
        assert_eq!(same, scene);
        // subsample: distinct originals
        let sub = pad_or_subsample(&scene, 6, &mut rng);
        assert_eq!(sub.len(), 6);
        let mut seen = std::collections::HashSet::new();
        for o in &sub.observations {
            assert!(seen.insert(format!("{:?}", o.v)));
        }
        // pad: every original present, labels follow
        let pad = pad_or_subsample(&scene, 17, &mut rng);
        assert_eq!(pad.len(), 17);
        for (orig, lab) in scene.observations.iter().zip(scene.gt_labels.as_ref().unwrap()) {
            let found = pad
                .observations
                .iter()
                .zip(pad.gt_labels.as_ref().unwrap())
                .any(|(o, l)| o == orig && l == lab);
            assert!(found);
        }
    }
}
