//! Small U-shaped encoder-decoder with hand-written forward and backward
//! passes.
//!
//! Layout is NCHW, row-major. Every 3x3 convolution uses zero padding 1 and
//! is lowered to a matrix product over an im2col buffer. The network is
//! generic over [`Real`] so the same code runs in `f32` for training and in
//! `f64` for gradient checks.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec::Exec;
use crate::voldata::{DepthImage, MaskStack, N_ORGANS};

#[derive(Debug, Error, PartialEq)]
pub enum NetError {
    #[error("input {h}x{w} is not divisible by {factor} (2^(levels-1))")]
    Indivisible { h: usize, w: usize, factor: usize },
    #[error("invalid architecture: {0}")]
    Arch(String),
    #[error("shape mismatch: expected {expected:?}, got {found:?}")]
    Shape {
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("trace does not belong to these parameters")]
    StaleTrace,
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Floating-point element type of the network.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Send + Sync + std::iter::Sum + 'static
{
    /// `c <- alpha * a * b + beta * c` for an `m x k` by `k x n` product with
    /// explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("representable")
    }

    fn to_bits_u64(self) -> u64;
}

fn check_gemm_bounds(m: usize, k: usize, n: usize, a: usize, sa: (isize, isize), b: usize, sb: (isize, isize), c: usize) {
    let extent = |rows: usize, cols: usize, s: (isize, isize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * s.0 as usize + (cols - 1) * s.1 as usize + 1
        }
    };
    assert!(extent(m, k, sa) <= a, "gemm: lhs out of bounds");
    assert!(extent(k, n, sb) <= b, "gemm: rhs out of bounds");
    assert!(m * n <= c, "gemm: output out of bounds");
}

impl Real for f32 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        sa: (isize, isize),
        b: &[f32],
        sb: (isize, isize),
        beta: f32,
        c: &mut [f32],
    ) {
        check_gemm_bounds(m, k, n, a.len(), sa, b.len(), sb, c.len());
        // SAFETY: extents checked above; output is a dense m x n row-major block.
        unsafe {
            matrixmultiply::sgemm(
                m, k, n, alpha, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits() as u64
    }
}

impl Real for f64 {
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        sa: (isize, isize),
        b: &[f64],
        sb: (isize, isize),
        beta: f64,
        c: &mut [f64],
    ) {
        check_gemm_bounds(m, k, n, a.len(), sa, b.len(), sb, c.len());
        // SAFETY: extents checked above; output is a dense m x n row-major block.
        unsafe {
            matrixmultiply::dgemm(
                m, k, n, alpha, a.as_ptr(), sa.0, sa.1, b.as_ptr(), sb.0, sb.1, beta,
                c.as_mut_ptr(), n as isize, 1,
            );
        }
    }

    fn to_bits_u64(self) -> u64 {
        self.to_bits()
    }
}

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NetError::Shape {
                expected: shape,
                found: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::from_f64_lossy(v.to_f64().unwrap()))
                .collect(),
        }
    }
}

/// Architecture descriptor: per-level channel widths, input size and number
/// of output channels. The input always has one channel.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Arch {
    pub channels: Vec<usize>,
    pub height: usize,
    pub width: usize,
    pub n_out: usize,
}

/// One convolution layer of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
}

impl ConvSpec {
    fn fan_in(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.cout, self.cin, self.kernel, self.kernel]
    }
}

impl Arch {
    pub fn new(channels: Vec<usize>, height: usize, width: usize, n_out: usize) -> Self {
        Self {
            channels,
            height,
            width,
            n_out,
        }
    }

    /// Three levels (16, 32, 64) with eleven output channels.
    pub fn default_for(height: usize, width: usize) -> Self {
        Self::new(vec![16, 32, 64], height, width, N_ORGANS)
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.channels.len() > 8 {
            return Err(NetError::Arch(format!(
                "need 1..=8 levels, got {}",
                self.channels.len()
            )));
        }
        if self.channels.iter().any(|&c| c == 0 || c > u16::MAX as usize) {
            return Err(NetError::Arch("channel widths must be in 1..=65535".into()));
        }
        if self.n_out == 0 || self.n_out > u8::MAX as usize {
            return Err(NetError::Arch("n_out must be in 1..=255".into()));
        }
        let factor = 1 << (self.levels() - 1);
        if self.height == 0 || self.width == 0 || self.height % factor != 0 || self.width % factor != 0 {
            return Err(NetError::Indivisible {
                h: self.height,
                w: self.width,
                factor,
            });
        }
        Ok(())
    }

    /// Convolutions in execution order: encoder levels top-down, decoder
    /// levels bottom-up, then the 1x1 head.
    pub fn layers(&self) -> Vec<ConvSpec> {
        let c = &self.channels;
        let conv = |name: String, cin, cout, kernel| ConvSpec {
            name,
            cin,
            cout,
            kernel,
        };
        let mut out = Vec::new();
        let mut cin = 1;
        for (i, &ch) in c.iter().enumerate() {
            out.push(conv(format!("enc{i}.conv1"), cin, ch, 3));
            out.push(conv(format!("enc{i}.conv2"), ch, ch, 3));
            cin = ch;
        }
        for i in (0..c.len() - 1).rev() {
            out.push(conv(format!("dec{i}.conv1"), c[i + 1] + c[i], c[i], 3));
            out.push(conv(format!("dec{i}.conv2"), c[i], c[i], 3));
        }
        out.push(conv("head".into(), c[0], self.n_out, 1));
        out
    }

    /// Parameter tensor names and shapes, weight then bias per layer.
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        self.layers()
            .into_iter()
            .flat_map(|l| {
                [
                    (format!("{}.weight", l.name), l.weight_shape()),
                    (format!("{}.bias", l.name), vec![l.cout]),
                ]
            })
            .collect()
    }

    pub fn input_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, 1, self.height, self.width]
    }

    pub fn output_shape(&self, batch: usize) -> Vec<usize> {
        vec![batch, self.n_out, self.height, self.width]
    }
}

/// Named parameter tensors of a network (also used for gradients and
/// optimizer moments).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    arch: Arch,
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

impl<T: Real> NetworkParams<T> {
    pub fn zeros(arch: &Arch) -> Result<Self> {
        arch.validate()?;
        let (names, tensors) = arch
            .tensor_specs()
            .into_iter()
            .map(|(n, s)| (n, Tensor::zeros(s)))
            .unzip();
        Ok(Self {
            arch: arch.clone(),
            names,
            tensors,
        })
    }

    /// Builds parameters from tensors given in [`Arch::tensor_specs`] order.
    pub fn from_tensors(arch: &Arch, tensors: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let specs = arch.tensor_specs();
        if specs.len() != tensors.len() {
            return Err(NetError::Arch(format!(
                "expected {} tensors, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        for ((_, shape), t) in specs.iter().zip(&tensors) {
            if shape.as_slice() != t.shape() {
                return Err(NetError::Shape {
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(Self {
            arch: arch.clone(),
            names: specs.into_iter().map(|(n, _)| n).collect(),
            tensors,
        })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn same_shape(&self, other: &NetworkParams<T>) -> bool {
        self.arch == other.arch
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    /// FNV-1a over architecture and parameter bit patterns.
    pub fn checksum(&self) -> u64 {
        let mut h = Fnv::new();
        for &c in &self.arch.channels {
            h.write_u64(c as u64);
        }
        h.write_u64(self.arch.height as u64);
        h.write_u64(self.arch.width as u64);
        h.write_u64(self.arch.n_out as u64);
        for t in &self.tensors {
            for &v in t.data() {
                h.write_u64(v.to_bits_u64());
            }
        }
        h.finish()
    }

    pub fn cast<U: Real>(&self) -> NetworkParams<U> {
        NetworkParams {
            arch: self.arch.clone(),
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

struct Fnv(u64);

impl Fnv {
    fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    fn write_u64(&mut self, v: u64) {
        for b in v.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    fn finish(&self) -> u64 {
        self.0
    }
}

/// He-uniform weights `U(-sqrt(6/fan_in), sqrt(6/fan_in))`, zero biases.
pub fn init_params<T: Real>(arch: &Arch, rng_seed: u64) -> Result<NetworkParams<T>> {
    let mut params = NetworkParams::zeros(arch)?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    for (i, layer) in arch.layers().iter().enumerate() {
        let bound = (6.0 / layer.fan_in() as f64).sqrt();
        for w in params.tensors[2 * i].data_mut() {
            *w = T::from_f64_lossy(rng.gen_range(-bound..bound));
        }
    }
    Ok(params)
}

// ---------------------------------------------------------------------------
// Per-image primitives. Feature maps are `c x h x w` slices.

fn im2col3<T: Real>(x: &[T], cin: usize, h: usize, w: usize, cols: &mut [T]) {
    let hw = h * w;
    for c in 0..cin {
        let plane = &x[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    let dst = &mut row[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = T::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[..w - 1].copy_from_slice(&src[1..]);
                            dst[w - 1] = T::zero();
                        }
                    }
                }
            }
        }
    }
}

fn col2im3<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, dx: &mut [T]) {
    let hw = h * w;
    dx.fill(T::zero());
    for c in 0..cin {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((c * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &row[y * w..(y + 1) * w];
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    match kx {
                        0 => {
                            for i in 0..w - 1 {
                                dst[i] = dst[i] + src[i + 1];
                            }
                        }
                        1 => {
                            for i in 0..w {
                                dst[i] = dst[i] + src[i];
                            }
                        }
                        _ => {
                            for i in 1..w {
                                dst[i] = dst[i] + src[i - 1];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Real>(
    layer: &ConvSpec,
    weight: &[T],
    bias: &[T],
    x: &[T],
    h: usize,
    w: usize,
    scratch: &mut Vec<T>,
) -> Vec<T> {
    let hw = h * w;
    let k = layer.fan_in();
    let cols: &[T] = if layer.kernel == 3 {
        scratch.resize(k * hw, T::zero());
        im2col3(x, layer.cin, h, w, scratch);
        scratch
    } else {
        x
    };
    let mut out = vec![T::zero(); layer.cout * hw];
    for (o, &b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    T::gemm(
        layer.cout,
        k,
        hw,
        T::one(),
        weight,
        (k as isize, 1),
        cols,
        (hw as isize, 1),
        T::one(),
        &mut out,
    );
    out
}

/// Accumulates weight/bias gradients and returns the input gradient when
/// `need_dx` is set.
#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Real>(
    layer: &ConvSpec,
    weight: &[T],
    x: &[T],
    h: usize,
    w: usize,
    dout: &[T],
    dweight: &mut [T],
    dbias: &mut [T],
    need_dx: bool,
    scratch: &mut Vec<T>,
) -> Option<Vec<T>> {
    let hw = h * w;
    let k = layer.fan_in();
    for (o, db) in dbias.iter_mut().enumerate() {
        *db = *db + dout[o * hw..(o + 1) * hw].iter().copied().sum::<T>();
    }
    let cols: &[T] = if layer.kernel == 3 {
        scratch.resize(k * hw, T::zero());
        im2col3(x, layer.cin, h, w, scratch);
        scratch
    } else {
        x
    };
    // dW[cout, k] += dout[cout, hw] * cols^T[hw, k]
    T::gemm(
        layer.cout,
        hw,
        k,
        T::one(),
        dout,
        (hw as isize, 1),
        cols,
        (1, hw as isize),
        T::one(),
        dweight,
    );
    if !need_dx {
        return None;
    }
    // dcols[k, hw] = W^T[k, cout] * dout[cout, hw]
    let mut dcols = vec![T::zero(); k * hw];
    T::gemm(
        k,
        layer.cout,
        hw,
        T::one(),
        weight,
        (1, k as isize),
        dout,
        (hw as isize, 1),
        T::zero(),
        &mut dcols,
    );
    if layer.kernel == 3 {
        let mut dx = vec![T::zero(); layer.cin * hw];
        col2im3(&dcols, layer.cin, h, w, &mut dx);
        Some(dx)
    } else {
        Some(dcols)
    }
}

fn relu_inplace<T: Real>(x: &mut [T]) {
    for v in x {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
}

/// Rectifier backward; the subgradient at zero is zero.
fn relu_backward<T: Real>(out: &[T], grad: &mut [T]) {
    for (g, &o) in grad.iter_mut().zip(out) {
        if o <= T::zero() {
            *g = T::zero();
        }
    }
}

/// 2x2 max pooling; returns the pooled map and flat argmax indices into `x`.
/// Ties resolve to the first element in row-major window order.
fn maxpool2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let j = base + (2 * y + dy) * w + 2 * xx + dx;
                    if x[j] > x[best] {
                        best = j;
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

fn maxpool2_backward<T: Real>(dy: &[T], idx: &[u32], input_len: usize) -> Vec<T> {
    let mut dx = vec![T::zero(); input_len];
    for (&g, &i) in dy.iter().zip(idx) {
        dx[i as usize] = dx[i as usize] + g;
    }
    dx
}

/// Nearest-neighbour 2x upsampling of a `c x h x w` map.
fn upsample2<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let src = &x[ch * h * w + (y / 2) * w..][..w];
            let dst = &mut out[ch * oh * ow + y * ow..][..ow];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

fn upsample2_backward<T: Real>(dy: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            let src = &dy[ch * oh * ow + y * ow..][..ow];
            let dst = &mut dx[ch * h * w + (y / 2) * w..][..w];
            for (xx, &g) in src.iter().enumerate() {
                dst[xx / 2] = dst[xx / 2] + g;
            }
        }
    }
    dx
}

/// Activations of one image kept for the backward pass.
#[derive(Debug, Clone)]
struct ImageTrace<T> {
    /// Input of each convolution, in layer order.
    inputs: Vec<Vec<T>>,
    /// Rectified output of each convolution except the head.
    outputs: Vec<Vec<T>>,
    /// Argmax indices of each pooling step.
    pools: Vec<Vec<u32>>,
}

/// Cached activations of a batched forward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace<T> {
    params_checksum: u64,
    batch: usize,
    images: Vec<ImageTrace<T>>,
}

impl<T> ForwardTrace<T> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn level_dims(arch: &Arch, level: usize) -> (usize, usize) {
    (arch.height >> level, arch.width >> level)
}

fn forward_image<T: Real>(params: &NetworkParams<T>, layers: &[ConvSpec], image: &[T]) -> (Vec<T>, ImageTrace<T>) {
    let arch = &params.arch;
    let levels = arch.levels();
    let mut scratch = Vec::new();
    let mut trace = ImageTrace {
        inputs: Vec::with_capacity(layers.len()),
        outputs: Vec::with_capacity(layers.len()),
        pools: Vec::with_capacity(levels),
    };
    let mut li = 0;
    let mut run = |x: Vec<T>, h: usize, w: usize, relu: bool, trace: &mut ImageTrace<T>| {
        let layer = &layers[li];
        let mut y = conv_forward(
            layer,
            params.tensors[2 * li].data(),
            params.tensors[2 * li + 1].data(),
            &x,
            h,
            w,
            &mut scratch,
        );
        trace.inputs.push(x);
        if relu {
            relu_inplace(&mut y);
            trace.outputs.push(y.clone());
        }
        li += 1;
        y
    };

    let mut skips = Vec::with_capacity(levels);
    let mut x = image.to_vec();
    for level in 0..levels {
        let (h, w) = level_dims(arch, level);
        if level > 0 {
            let (ph, pw) = level_dims(arch, level - 1);
            let (pooled, idx) = maxpool2(&x, arch.channels[level - 1], ph, pw);
            trace.pools.push(idx);
            x = pooled;
        }
        x = run(x, h, w, true, &mut trace);
        x = run(x, h, w, true, &mut trace);
        if level + 1 < levels {
            skips.push(x.clone());
        }
    }
    for level in (0..levels - 1).rev() {
        let (h, w) = level_dims(arch, level);
        let (lh, lw) = level_dims(arch, level + 1);
        let mut cat = upsample2(&x, arch.channels[level + 1], lh, lw);
        cat.extend_from_slice(&skips[level]);
        x = run(cat, h, w, true, &mut trace);
        x = run(x, h, w, true, &mut trace);
    }
    let logits = run(x, arch.height, arch.width, false, &mut trace);
    (logits, trace)
}

fn backward_image<T: Real>(
    params: &NetworkParams<T>,
    layers: &[ConvSpec],
    trace: &ImageTrace<T>,
    grad_logits: &[T],
) -> Vec<Vec<T>> {
    let arch = &params.arch;
    let levels = arch.levels();
    let mut grads: Vec<Vec<T>> = params.tensors.iter().map(|t| vec![T::zero(); t.len()]).collect();
    let mut scratch = Vec::new();
    let mut li = layers.len();

    // Walks one convolution backwards: `dy` is the gradient w.r.t. the
    // (rectified, if `relu`) output.
    let mut step = |mut dy: Vec<T>, h: usize, w: usize, relu: bool, need_dx: bool, grads: &mut Vec<Vec<T>>| {
        li -= 1;
        if relu {
            relu_backward(&trace.outputs[li], &mut dy);
        }
        let (gw, rest) = grads.split_at_mut(2 * li + 1);
        conv_backward(
            &layers[li],
            params.tensors[2 * li].data(),
            &trace.inputs[li],
            h,
            w,
            &dy,
            &mut gw[2 * li],
            &mut rest[0],
            need_dx,
            &mut scratch,
        )
    };

    let mut dx = step(grad_logits.to_vec(), arch.height, arch.width, false, true, &mut grads).unwrap();
    let mut dskips: Vec<Vec<T>> = vec![Vec::new(); levels];
    for level in 0..levels - 1 {
        let (h, w) = level_dims(arch, level);
        let (lh, lw) = level_dims(arch, level + 1);
        dx = step(dx, h, w, true, true, &mut grads).unwrap();
        let dcat = step(dx, h, w, true, true, &mut grads).unwrap();
        let up_len = arch.channels[level + 1] * h * w;
        dskips[level] = dcat[up_len..].to_vec();
        dx = upsample2_backward(&dcat[..up_len], arch.channels[level + 1], lh, lw);
    }
    for level in (0..levels).rev() {
        let (h, w) = level_dims(arch, level);
        if level + 1 < levels {
            for (a, &b) in dx.iter_mut().zip(&dskips[level]) {
                *a = *a + b;
            }
        }
        dx = step(dx, h, w, true, true, &mut grads).unwrap();
        let need_dx = level > 0;
        let d = step(dx, h, w, true, need_dx, &mut grads);
        if level > 0 {
            let (ph, pw) = level_dims(arch, level - 1);
            dx = maxpool2_backward(&d.unwrap(), &trace.pools[level - 1], arch.channels[level - 1] * ph * pw);
        } else {
            dx = Vec::new();
        }
    }
    debug_assert_eq!(li, 0);
    grads
}

fn check_shape(expected: Vec<usize>, found: &[usize]) -> Result<()> {
    if expected.as_slice() != found {
        return Err(NetError::Shape {
            expected,
            found: found.to_vec(),
        });
    }
    Ok(())
}

pub fn forward<T: Real>(params: &NetworkParams<T>, input: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    forward_with(Exec::default(), params, input)
}

/// Batched forward pass. `input` is `B x 1 x H x W`; returns pre-activation
/// logits `B x n_out x H x W` and the trace needed by [`backward`].
pub fn forward_with<T: Real>(
    exec: Exec,
    params: &NetworkParams<T>,
    input: &Tensor<T>,
) -> Result<(Tensor<T>, ForwardTrace<T>)> {
    let arch = &params.arch;
    let batch = input.shape().first().copied().unwrap_or(0);
    check_shape(arch.input_shape(batch), input.shape())?;
    let layers = arch.layers();
    let plane = arch.height * arch.width;
    let results = exec.map_range(batch, |b| forward_image(params, &layers, &input.data()[b * plane..(b + 1) * plane]));
    let mut logits = Vec::with_capacity(batch * arch.n_out * plane);
    let mut images = Vec::with_capacity(batch);
    for (l, t) in results {
        logits.extend_from_slice(&l);
        images.push(t);
    }
    Ok((
        Tensor::new(arch.output_shape(batch), logits)?,
        ForwardTrace {
            params_checksum: params.checksum(),
            batch,
            images,
        },
    ))
}

pub fn backward<T: Real>(
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    grad_logits: &Tensor<T>,
) -> Result<NetworkParams<T>> {
    backward_with(Exec::default(), params, trace, grad_logits)
}

/// Gradients of `sum(logits * grad_logits)` with respect to every parameter,
/// summed over the batch in item order.
pub fn backward_with<T: Real>(
    exec: Exec,
    params: &NetworkParams<T>,
    trace: &ForwardTrace<T>,
    grad_logits: &Tensor<T>,
) -> Result<NetworkParams<T>> {
    if trace.params_checksum != params.checksum() || trace.images.len() != trace.batch {
        return Err(NetError::StaleTrace);
    }
    let arch = &params.arch;
    check_shape(arch.output_shape(trace.batch), grad_logits.shape())?;
    let layers = arch.layers();
    let chunk = arch.n_out * arch.height * arch.width;
    let per_image = exec.map_range(trace.batch, |b| {
        backward_image(params, &layers, &trace.images[b], &grad_logits.data()[b * chunk..(b + 1) * chunk])
    });
    let mut total = NetworkParams::zeros(arch)?;
    for grads in per_image {
        for (t, g) in total.tensors.iter_mut().zip(grads) {
            for (a, b) in t.data_mut().iter_mut().zip(g) {
                *a = *a + b;
            }
        }
    }
    Ok(total)
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Stacks depth images into a `B x 1 x H x W` tensor.
pub fn batch_input<T: Real>(images: &[&DepthImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| NetError::Shape {
        expected: vec![1],
        found: vec![0],
    })?;
    let d = first.dims();
    let mut data = Vec::with_capacity(images.len() * d.len());
    for img in images {
        check_shape(vec![d.h, d.w], &[img.dims().h, img.dims().w])?;
        data.extend(img.values().iter().map(|&v| T::from_f64_lossy(v as f64)));
    }
    Tensor::new(vec![images.len(), 1, d.h, d.w], data)
}

/// Per-channel binary masks from logits of one image: `sigmoid > 0.5`.
pub fn masks_from_logits<T: Real>(logits: &[T], depth: &DepthImage) -> MaskStack {
    let d = depth.dims();
    let half = T::from_f64_lossy(0.5);
    let channels = logits
        .chunks(d.len())
        .map(|ch| ch.iter().map(|&x| (sigmoid(x) > half) as u8).collect())
        .collect();
    MaskStack::canonical(d, depth.spacing(), channels).expect("logit shape matches the depth image")
}

pub fn predict_masks<T: Real>(params: &NetworkParams<T>, depth: &DepthImage) -> Result<MaskStack> {
    if params.arch.n_out != N_ORGANS {
        return Err(NetError::Arch(format!("prediction needs {N_ORGANS} output channels")));
    }
    let input = batch_input::<T>(&[depth])?;
    let (logits, _) = forward_with(Exec::Sequential, params, &input)?;
    Ok(masks_from_logits(logits.data(), depth))
}

/// Batched inference over many images, each item independent.
pub fn predict_all<T: Real>(exec: Exec, params: &NetworkParams<T>, depths: &[DepthImage]) -> Result<Vec<MaskStack>> {
    exec.map(depths, |d| predict_masks(params, d)).into_iter().collect()
}
