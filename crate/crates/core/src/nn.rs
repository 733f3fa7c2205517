//! Minimal convolutional network stack: a UNet with explicit backward pass,
//! Adam, and flat parameter storage.
//!
//! All parameters of a network live in one flat vector; every layer knows its
//! offset into it. That keeps the optimizer, gradient accumulation and
//! checkpoint serialization trivial.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

const LEAKY_SLOPE: f64 = 0.1;

/// A `channels x height x width` activation for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            height,
            width,
            data: vec![T::zero(); channels * height * width],
        }
    }

    pub fn from_planes(planes: &[&[T]], height: usize, width: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(planes.len() * height * width);
        for p in planes {
            if p.len() != height * width {
                return Err(Error::invalid("feature plane size mismatch"));
            }
            data.extend_from_slice(p);
        }
        Ok(FeatureMap {
            channels: planes.len(),
            height,
            width,
            data,
        })
    }

    #[inline]
    fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }
}

/// One convolution (3x3 "same" or 1x1), optionally followed by leaky ReLU.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvLayer {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub activated: bool,
    pub offset: usize,
}

struct ConvCache<T> {
    cols: Vec<T>,
    height: usize,
    width: usize,
}

impl ConvLayer {
    fn weight_len(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    fn k_dim(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn init<T: Scalar, R: Rng + ?Sized>(&self, params: &mut [T], rng: &mut R) {
        let fan_in = self.k_dim() as f64;
        let gain = if self.activated { 2.0 } else { 1.0 };
        let std = (gain / fan_in).sqrt();
        let w = &mut params[self.offset..self.offset + self.weight_len()];
        for v in w {
            let n: f64 = StandardNormal.sample(rng);
            *v = lit(n * std);
        }
        for b in &mut params[self.offset + self.weight_len()..self.offset + self.param_count()] {
            *b = T::zero();
        }
    }

    fn forward<T: Scalar>(&self, params: &[T], input: &FeatureMap<T>) -> (FeatureMap<T>, ConvCache<T>) {
        debug_assert_eq!(input.channels, self.in_channels);
        let (h, w) = (input.height, input.width);
        let n = h * w;
        let cols = if self.kernel == 1 {
            input.data.clone()
        } else {
            im2col3(input)
        };
        let weights = &params[self.offset..self.offset + self.weight_len()];
        let bias = &params[self.offset + self.weight_len()..self.offset + self.param_count()];
        let mut out = FeatureMap::zeros(self.out_channels, h, w);
        for (co, chunk) in out.data.chunks_mut(n).enumerate() {
            chunk.fill(bias[co]);
        }
        let k = self.k_dim();
        gemm(
            self.out_channels,
            k,
            n,
            T::one(),
            weights,
            (k as isize, 1),
            &cols,
            (n as isize, 1),
            T::one(),
            &mut out.data,
            (n as isize, 1),
        );
        if self.activated {
            let slope = lit::<T>(LEAKY_SLOPE);
            for v in &mut out.data {
                if *v < T::zero() {
                    *v *= slope;
                }
            }
        }
        (
            out,
            ConvCache {
                cols,
                height: h,
                width: w,
            },
        )
    }

    /// `output` is this layer's (post-activation) output; `grad` is dL/d(output)
    /// and is consumed. Returns dL/d(input) when requested.
    fn backward<T: Scalar>(
        &self,
        params: &[T],
        cache: &ConvCache<T>,
        output: &FeatureMap<T>,
        mut grad: FeatureMap<T>,
        grads: &mut [T],
        want_input_grad: bool,
    ) -> Option<FeatureMap<T>> {
        let n = cache.height * cache.width;
        let k = self.k_dim();
        if self.activated {
            let slope = lit::<T>(LEAKY_SLOPE);
            for (g, &o) in grad.data.iter_mut().zip(&output.data) {
                if o < T::zero() {
                    *g *= slope;
                }
            }
        }
        let wl = self.weight_len();
        let (gw, gb) = grads[self.offset..self.offset + self.param_count()].split_at_mut(wl);
        for (co, chunk) in grad.data.chunks(n).enumerate() {
            gb[co] += chunk.iter().copied().sum::<T>();
        }
        // dW += dOut (Cout x N) * cols^T (N x K)
        gemm(
            self.out_channels,
            n,
            k,
            T::one(),
            &grad.data,
            (n as isize, 1),
            &cache.cols,
            (1, n as isize),
            T::one(),
            gw,
            (k as isize, 1),
        );
        if !want_input_grad {
            return None;
        }
        // dCols = W^T (K x Cout) * dOut (Cout x N)
        let weights = &params[self.offset..self.offset + wl];
        let mut dcols = vec![T::zero(); k * n];
        gemm(
            k,
            self.out_channels,
            n,
            T::one(),
            weights,
            (1, k as isize),
            &grad.data,
            (n as isize, 1),
            T::zero(),
            &mut dcols,
            (n as isize, 1),
        );
        if self.kernel == 1 {
            Some(FeatureMap {
                channels: self.in_channels,
                height: cache.height,
                width: cache.width,
                data: dcols,
            })
        } else {
            Some(col2im3(&dcols, self.in_channels, cache.height, cache.width))
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    (rsa, csa): (isize, isize),
    b: &[T],
    (rsb, csb): (isize, isize),
    beta: T,
    c: &mut [T],
    (rsc, csc): (isize, isize),
) {
    let extent = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1
        }
    };
    assert!(extent(m, k, rsa, csa) as usize <= a.len());
    assert!(extent(k, n, rsb, csb) as usize <= b.len());
    assert!(extent(m, n, rsc, csc) as usize <= c.len());
    // SAFETY: the asserted extents keep every strided access in bounds.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Rows are `(channel, ky, kx)`, columns are output pixels; zero padding 1.
fn im2col3<T: Scalar>(input: &FeatureMap<T>) -> Vec<T> {
    let (c, h, w) = (input.channels, input.height, input.width);
    let n = h * w;
    let mut cols = vec![T::zero(); c * 9 * n];
    for ci in 0..c {
        let src = input.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    let drow = &mut row[y * w..][..w];
                    match kx {
                        0 => drow[1..].copy_from_slice(&srow[..w - 1]),
                        1 => drow.copy_from_slice(srow),
                        _ => drow[..w - 1].copy_from_slice(&srow[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im3<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize) -> FeatureMap<T> {
    let n = h * w;
    let mut out = FeatureMap::zeros(c, h, w);
    for ci in 0..c {
        let dst = &mut out.data[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &cols[((ci * 9) + ky * 3 + kx) * n..][..n];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[sy as usize * w..][..w];
                    let srow = &row[y * w..][..w];
                    match kx {
                        0 => drow[..w - 1]
                            .iter_mut()
                            .zip(&srow[1..])
                            .for_each(|(d, &s)| *d += s),
                        1 => drow.iter_mut().zip(srow).for_each(|(d, &s)| *d += s),
                        _ => drow[1..]
                            .iter_mut()
                            .zip(&srow[..w - 1])
                            .for_each(|(d, &s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

fn avg_pool2<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (h2, w2) = (x.height / 2, x.width / 2);
    let quarter = lit::<T>(0.25);
    let mut out = FeatureMap::zeros(x.channels, h2, w2);
    for c in 0..x.channels {
        let src = x.channel(c);
        for y in 0..h2 {
            for xx in 0..w2 {
                let s = src[2 * y * x.width + 2 * xx]
                    + src[2 * y * x.width + 2 * xx + 1]
                    + src[(2 * y + 1) * x.width + 2 * xx]
                    + src[(2 * y + 1) * x.width + 2 * xx + 1];
                out.data[c * h2 * w2 + y * w2 + xx] = s * quarter;
            }
        }
    }
    out
}

fn avg_pool2_backward<T: Scalar>(g: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (g.height * 2, g.width * 2);
    let quarter = lit::<T>(0.25);
    let mut out = FeatureMap::zeros(g.channels, h, w);
    for c in 0..g.channels {
        for y in 0..h {
            for x in 0..w {
                out.data[c * h * w + y * w + x] =
                    g.data[c * g.height * g.width + (y / 2) * g.width + x / 2] * quarter;
            }
        }
    }
    out
}

fn upsample2<T: Scalar>(x: &FeatureMap<T>) -> FeatureMap<T> {
    let (h, w) = (x.height * 2, x.width * 2);
    let mut out = FeatureMap::zeros(x.channels, h, w);
    for c in 0..x.channels {
        for y in 0..h {
            for xx in 0..w {
                out.data[c * h * w + y * w + xx] =
                    x.data[c * x.height * x.width + (y / 2) * x.width + xx / 2];
            }
        }
    }
    out
}

fn upsample2_backward<T: Scalar>(g: &FeatureMap<T>) -> FeatureMap<T> {
    let (h2, w2) = (g.height / 2, g.width / 2);
    let mut out = FeatureMap::zeros(g.channels, h2, w2);
    for c in 0..g.channels {
        for y in 0..g.height {
            for x in 0..g.width {
                out.data[c * h2 * w2 + (y / 2) * w2 + x / 2] +=
                    g.data[c * g.height * g.width + y * g.width + x];
            }
        }
    }
    out
}

fn concat<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>) -> FeatureMap<T> {
    let mut data = Vec::with_capacity(a.data.len() + b.data.len());
    data.extend_from_slice(&a.data);
    data.extend_from_slice(&b.data);
    FeatureMap {
        channels: a.channels + b.channels,
        height: a.height,
        width: a.width,
        data,
    }
}

fn split<T: Scalar>(g: FeatureMap<T>, first: usize) -> (FeatureMap<T>, FeatureMap<T>) {
    let n = g.height * g.width;
    let mut data = g.data;
    let rest = data.split_off(first * n);
    (
        FeatureMap {
            channels: first,
            height: g.height,
            width: g.width,
            data,
        },
        FeatureMap {
            channels: g.channels - first,
            height: g.height,
            width: g.width,
            data: rest,
        },
    )
}

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub base_channels: usize,
    /// Resolution levels including the bottleneck.
    pub depth: usize,
    /// Adds input channel 0 to the output, so the layers learn a correction.
    #[serde(default)]
    pub residual: bool,
}

impl Default for UNetSpec {
    fn default() -> Self {
        UNetSpec {
            in_channels: 2,
            base_channels: 8,
            depth: 4,
            residual: false,
        }
    }
}

/// Interface shared by trainable single-output networks.
pub trait Network<T: Scalar> {
    fn params(&self) -> &[T];
    fn params_mut(&mut self) -> &mut [T];
    fn in_channels(&self) -> usize;
    fn forward(&self, input: &FeatureMap<T>) -> Result<Vec<T>>;
    /// Mean-squared error against `target`, accumulating dL/dparams into `grads`.
    fn loss_and_grad(&self, input: &FeatureMap<T>, target: &[T], grads: &mut [T]) -> Result<T>;
}

/// Encoder-decoder with skip connections. Each level has two 3x3
/// convolutions; downsampling is 2x2 average pooling, upsampling nearest
/// neighbour, and a 1x1 head produces one output plane.
#[derive(Clone, Debug, PartialEq)]
pub struct UNet<T> {
    spec: UNetSpec,
    layers: Vec<ConvLayer>,
    params: Vec<T>,
}

struct Trace<T> {
    // (cache, output) for every layer in execution order
    steps: Vec<(ConvCache<T>, FeatureMap<T>)>,
    // channels of each encoder skip
    skip_channels: Vec<usize>,
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng + ?Sized>(spec: UNetSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        let layers = net.layers.clone();
        for l in &layers {
            l.init(&mut net.params, rng);
        }
        Ok(net)
    }

    pub fn zeroed(spec: UNetSpec) -> Result<Self> {
        if spec.in_channels == 0 || spec.base_channels == 0 || spec.depth == 0 {
            return Err(Error::invalid("UNet dimensions must be positive"));
        }
        let mut layers = Vec::new();
        let mut offset = 0;
        let mut push = |i: usize, o: usize, k: usize, act: bool| {
            let l = ConvLayer {
                in_channels: i,
                out_channels: o,
                kernel: k,
                activated: act,
                offset,
            };
            offset += l.param_count();
            layers.push(l);
        };
        let ch = |lvl: usize| spec.base_channels << lvl;
        let mut prev = spec.in_channels;
        for lvl in 0..spec.depth {
            push(prev, ch(lvl), 3, true);
            push(ch(lvl), ch(lvl), 3, true);
            prev = ch(lvl);
        }
        for lvl in (0..spec.depth - 1).rev() {
            push(prev + ch(lvl), ch(lvl), 3, true);
            push(ch(lvl), ch(lvl), 3, true);
            prev = ch(lvl);
        }
        push(prev, 1, 1, false);
        Ok(UNet {
            spec,
            layers,
            params: vec![T::zero(); offset],
        })
    }

    pub fn from_params(spec: UNetSpec, params: Vec<T>) -> Result<Self> {
        let mut net = Self::zeroed(spec)?;
        if params.len() != net.params.len() {
            return Err(Error::invalid(format!(
                "UNet expects {} parameters, got {}",
                net.params.len(),
                params.len()
            )));
        }
        net.params = params;
        Ok(net)
    }

    pub fn spec(&self) -> UNetSpec {
        self.spec
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Spatial sizes must be divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.spec.depth - 1)
    }

    fn check_input(&self, input: &FeatureMap<T>) -> Result<()> {
        if input.channels != self.spec.in_channels {
            return Err(Error::invalid(format!(
                "network expects {} input channels, got {}",
                self.spec.in_channels, input.channels
            )));
        }
        let m = self.size_multiple();
        if input.height % m != 0 || input.width % m != 0 || input.height < m || input.width < m {
            return Err(Error::invalid(format!(
                "input {}x{} must be a positive multiple of {m}",
                input.height, input.width
            )));
        }
        Ok(())
    }

    fn run(&self, input: &FeatureMap<T>) -> (FeatureMap<T>, Trace<T>) {
        let depth = self.spec.depth;
        let mut steps = Vec::with_capacity(self.layers.len());
        let mut skips: Vec<FeatureMap<T>> = Vec::with_capacity(depth);
        let mut li = 0;
        let mut x = input.clone();
        for lvl in 0..depth {
            if lvl > 0 {
                x = avg_pool2(&x);
            }
            for _ in 0..2 {
                let (y, c) = self.layers[li].forward(&self.params, &x);
                li += 1;
                steps.push((c, y.clone()));
                x = y;
            }
            skips.push(x.clone());
        }
        let skip_channels = skips.iter().map(|s| s.channels).collect();
        for lvl in (0..depth - 1).rev() {
            x = concat(&upsample2(&x), &skips[lvl]);
            for _ in 0..2 {
                let (y, c) = self.layers[li].forward(&self.params, &x);
                li += 1;
                steps.push((c, y.clone()));
                x = y;
            }
        }
        let (mut y, c) = self.layers[li].forward(&self.params, &x);
        steps.push((c, y.clone()));
        if self.spec.residual {
            for (o, &v) in y.data.iter_mut().zip(&input.data) {
                *o += v;
            }
        }
        (
            y,
            Trace {
                steps,
                skip_channels,
            },
        )
    }

    fn backprop(&self, trace: Trace<T>, grad_out: FeatureMap<T>, grads: &mut [T]) {
        let depth = self.spec.depth;
        let mut steps = trace.steps;
        let mut li = self.layers.len();
        let mut pop = |g: FeatureMap<T>, grads: &mut [T], want: bool| {
            li -= 1;
            let (cache, out) = steps.pop().expect("trace in sync with layers");
            self.layers[li].backward(&self.params, &cache, &out, g, grads, want)
        };

        let mut g = pop(grad_out, grads, true).unwrap();
        let mut skip_grads: Vec<Option<FeatureMap<T>>> = vec![None; depth];
        for lvl in 0..depth - 1 {
            g = pop(g, grads, true).unwrap();
            g = pop(g, grads, true).unwrap();
            let up_channels = g.channels - trace.skip_channels[lvl];
            let (g_up, g_skip) = split(g, up_channels);
            skip_grads[lvl] = Some(g_skip);
            g = upsample2_backward(&g_up);
        }
        for lvl in (0..depth).rev() {
            if let Some(s) = skip_grads[lvl].take() {
                for (a, b) in g.data.iter_mut().zip(s.data) {
                    *a += b;
                }
            }
            g = pop(g, grads, true).unwrap();
            let first = lvl == 0;
            match pop(g, grads, !first) {
                Some(next) => g = next,
                None => return,
            }
            if lvl > 0 {
                g = avg_pool2_backward(&g);
            }
        }
    }
}

impl<T: Scalar> Network<T> for UNet<T> {
    fn params(&self) -> &[T] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    fn in_channels(&self) -> usize {
        self.spec.in_channels
    }

    fn forward(&self, input: &FeatureMap<T>) -> Result<Vec<T>> {
        self.check_input(input)?;
        Ok(self.run(input).0.data)
    }

    fn loss_and_grad(&self, input: &FeatureMap<T>, target: &[T], grads: &mut [T]) -> Result<T> {
        self.check_input(input)?;
        if grads.len() != self.params.len() {
            return Err(Error::invalid("gradient buffer size mismatch"));
        }
        let (out, trace) = self.run(input);
        if target.len() != out.data.len() {
            return Err(Error::invalid("target size mismatch"));
        }
        let n = T::from_usize(target.len()).unwrap();
        let two_over_n = lit::<T>(2.0) / n;
        let mut loss = T::zero();
        let mut g = FeatureMap::zeros(1, out.height, out.width);
        for ((gv, &o), &t) in g.data.iter_mut().zip(&out.data).zip(target) {
            let d = o - t;
            loss += d * d;
            *gv = d * two_over_n;
        }
        self.backprop(trace, g, grads);
        Ok(loss / n)
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Scalar> Adam<T> {
    pub fn new(param_count: usize, learning_rate: f64) -> Self {
        Adam {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [T], grads: &[T]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let (b1, b2) = (lit::<T>(self.beta1), lit::<T>(self.beta2));
        let one = T::one();
        let c1 = lit::<T>(1.0 - self.beta1.powi(self.t));
        let c2 = lit::<T>(1.0 - self.beta2.powi(self.t));
        let lr = lit::<T>(self.learning_rate);
        let eps = lit::<T>(self.epsilon);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (one - b1) * g;
            self.v[i] = b2 * self.v[i] + (one - b2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + eps);
        }
    }
}
