//! Direct 2-D convolution (correlation, zero padding) with per-connection
//! skipping driven by the layer's connectivity flags.
//!
//! For stride 1 the kernel loop runs over a "wide" output plane whose rows
//! have the padded input pitch, so every tap is one contiguous axpy. The
//! columns past the true output width are scratch and never read back.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Connectivity;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{batch_dims, restore_rank, Tensor};

/// Counts multiply-accumulates actually executed by convolution kernels.
#[derive(Debug, Default)]
pub struct MacCounter(AtomicU64);

impl MacCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&self, n: u64) {
        self.0.fetch_add(n, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer<T> {
    pub(crate) in_maps: usize,
    pub(crate) out_maps: usize,
    pub(crate) k: usize,
    pub(crate) stride: usize,
    pub(crate) pad: usize,
    pub(crate) kernels: Tensor<T>,
    pub(crate) biases: Vec<T>,
    pub(crate) connectivity: Connectivity,
}

impl<T: Scalar> ConvLayer<T> {
    /// Dense layer with all-zero kernels and biases.
    pub fn zeros(in_maps: usize, out_maps: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if in_maps == 0 || out_maps == 0 || k == 0 || stride == 0 {
            return Err(Error::InvalidArgument(format!(
                "conv layer needs positive extents, got in={in_maps} out={out_maps} k={k} stride={stride}"
            )));
        }
        Ok(ConvLayer {
            in_maps,
            out_maps,
            k,
            stride,
            pad,
            kernels: Tensor::zeros(vec![out_maps, in_maps, k, k]),
            biases: vec![T::zero(); out_maps],
            connectivity: Connectivity::dense(out_maps, in_maps),
        })
    }

    /// Dense layer with He-scaled normal kernels and zero biases.
    pub fn he_init<R: Rng>(
        in_maps: usize,
        out_maps: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut layer = Self::zeros(in_maps, out_maps, k, stride, pad)?;
        let std = (2.0 / (in_maps * k * k) as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        for v in layer.kernels.data_mut() {
            *v = T::of(normal.sample(rng));
        }
        Ok(layer)
    }

    /// Builds a layer from raw parts, zeroing kernels whose flag is clear.
    pub fn from_parts(
        kernels: Tensor<T>,
        biases: Vec<T>,
        connectivity: Connectivity,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        let &[out_maps, in_maps, k, k2] = kernels.shape() else {
            return Err(Error::Shape(format!("kernels must be rank 4, got {:?}", kernels.shape())));
        };
        if k != k2 || k == 0 || in_maps == 0 || out_maps == 0 || stride == 0 {
            return Err(Error::Shape(format!("bad kernel shape {:?}", kernels.shape())));
        }
        if biases.len() != out_maps
            || connectivity.out_maps() != out_maps
            || connectivity.in_maps() != in_maps
        {
            return Err(Error::Shape("biases/connectivity do not match kernels".into()));
        }
        let mut layer = ConvLayer {
            in_maps,
            out_maps,
            k,
            stride,
            pad,
            kernels,
            biases,
            connectivity,
        };
        for o in 0..out_maps {
            for i in 0..in_maps {
                if !layer.connectivity.get(o, i) {
                    layer.kernel_mut(o, i).fill(T::zero());
                }
            }
        }
        Ok(layer)
    }

    pub fn in_maps(&self) -> usize {
        self.in_maps
    }
    pub fn out_maps(&self) -> usize {
        self.out_maps
    }
    pub fn kernel_size(&self) -> usize {
        self.k
    }
    pub fn stride(&self) -> usize {
        self.stride
    }
    pub fn pad(&self) -> usize {
        self.pad
    }
    pub fn kernels(&self) -> &Tensor<T> {
        &self.kernels
    }
    pub fn biases(&self) -> &[T] {
        &self.biases
    }
    pub fn biases_mut(&mut self) -> &mut [T] {
        &mut self.biases
    }
    pub fn connectivity(&self) -> &Connectivity {
        &self.connectivity
    }

    pub fn kernel(&self, o: usize, i: usize) -> &[T] {
        let kk = self.k * self.k;
        let start = (o * self.in_maps + i) * kk;
        &self.kernels.data()[start..start + kk]
    }

    /// Mutable access to one kernel. Callers must keep pruned kernels zero.
    pub fn kernel_mut(&mut self, o: usize, i: usize) -> &mut [T] {
        let kk = self.k * self.k;
        let start = (o * self.in_maps + i) * kk;
        &mut self.kernels.data_mut()[start..start + kk]
    }

    /// Clears the flag of connection `i -> o` and zeroes its kernel.
    pub fn prune_connection(&mut self, o: usize, i: usize) {
        self.connectivity.set(o, i, false);
        self.kernel_mut(o, i).fill(T::zero());
    }

    pub fn active_connections(&self) -> usize {
        self.connectivity.count_active()
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        conv_output_size(h, w, self.k, self.stride, self.pad)
    }

    /// Checks that every cleared flag has an all-zero kernel.
    pub fn check_invariants(&self) -> Result<()> {
        for o in 0..self.out_maps {
            for i in 0..self.in_maps {
                if !self.connectivity.get(o, i) && self.kernel(o, i).iter().any(|v| *v != T::zero()) {
                    return Err(Error::Mask(format!("pruned kernel ({o},{i}) is not zero")));
                }
            }
        }
        Ok(())
    }
}

pub fn conv_output_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<(usize, usize)> {
    if h + 2 * pad < k || w + 2 * pad < k {
        return Err(Error::Shape(format!(
            "input {h}x{w} (pad {pad}) smaller than kernel {k}"
        )));
    }
    Ok(((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1))
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    hp: usize,
    wp: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Geometry {
    fn new<T: Scalar>(layer: &ConvLayer<T>, c: usize, h: usize, w: usize) -> Result<Self> {
        if c != layer.in_maps {
            return Err(Error::Shape(format!(
                "conv expects {} input maps, got {c}",
                layer.in_maps
            )));
        }
        let (ho, wo) = layer.output_size(h, w)?;
        Ok(Geometry {
            c,
            h,
            w,
            hp: h + 2 * layer.pad,
            wp: w + 2 * layer.pad,
            ho,
            wo,
            k: layer.k,
            s: layer.stride,
            p: layer.pad,
        })
    }

    fn plane_in(&self) -> usize {
        self.h * self.w
    }
    fn plane_padded(&self) -> usize {
        self.hp * self.wp
    }
    fn plane_out(&self) -> usize {
        self.ho * self.wo
    }
    /// Length of the contiguous wide-plane run covering all outputs (stride 1).
    fn span(&self) -> usize {
        (self.ho - 1) * self.wp + self.wo
    }
    fn macs_per_connection(&self) -> u64 {
        (self.ho * self.wo * self.k * self.k) as u64
    }
}

fn pad_into<T: Scalar>(x: &[T], g: &Geometry, out: &mut Vec<T>) {
    out.clear();
    // Trailing slack lets the stride-1 kernel run whole lane blocks.
    out.resize(g.c * g.plane_padded() + LANES, T::zero());
    for i in 0..g.c {
        for y in 0..g.h {
            let src = &x[i * g.plane_in() + y * g.w..][..g.w];
            let dst_off = i * g.plane_padded() + (y + g.p) * g.wp + g.p;
            out[dst_off..dst_off + g.w].copy_from_slice(src);
        }
    }
}

const LANES: usize = 64;

fn tap_offsets(g: &Geometry) -> Vec<usize> {
    (0..g.k).flat_map(|ky| (0..g.k).map(move |kx| ky * g.wp + kx)).collect()
}

/// `out[j] += sum over (input, tap) of w[tap] * src[j + offset[tap]]` for
/// `j < span` (a multiple of the lane block), accumulated in input-then-tap order for every `j`.
#[inline(never)]
fn accumulate_taps<T: Scalar>(active: &[(&[T], &[T])], taps: &[usize], out: &mut [T], span: usize) {
    debug_assert_eq!(span % LANES, 0);
    for j0 in (0..span).step_by(LANES) {
        let mut acc = [T::zero(); LANES];
        acc.copy_from_slice(&out[j0..j0 + LANES]);
        for &(kern, src) in active {
            for (&wv, &off) in kern.iter().zip(taps) {
                let s = &src[j0 + off..j0 + off + LANES];
                for l in 0..LANES {
                    acc[l] = wv.mul_add(s[l], acc[l]);
                }
            }
        }
        out[j0..j0 + LANES].copy_from_slice(&acc);
    }
}

fn forward_sample<T: Scalar>(
    src: &[T],
    g: &Geometry,
    layer: &ConvLayer<T>,
    conn: &Connectivity,
    wide: &mut Vec<T>,
    out: &mut [T],
) -> u64 {
    let kk = g.k * g.k;
    let mut macs = 0u64;
    for o in 0..layer.out_maps {
        let bias = layer.biases[o];
        let plane = &mut out[o * g.plane_out()..(o + 1) * g.plane_out()];
        if g.s == 1 {
            let span = g.span().div_ceil(LANES) * LANES;
            wide.clear();
            wide.resize(span, bias);
            let taps = tap_offsets(g);
            let mut active = Vec::with_capacity(layer.in_maps);
            for i in conn.inputs_of(o) {
                active.push((layer.kernel(o, i), &src[i * g.plane_padded()..(i + 1) * g.plane_padded() + LANES]));
                macs += g.macs_per_connection();
            }
            accumulate_taps(&active, &taps, wide, span);
            for y in 0..g.ho {
                plane[y * g.wo..(y + 1) * g.wo].copy_from_slice(&wide[y * g.wp..y * g.wp + g.wo]);
            }
        } else {
            plane.fill(bias);
            for i in conn.inputs_of(o) {
                let kern = &layer.kernel(o, i)[..kk];
                let src_i = &src[i * g.plane_padded()..(i + 1) * g.plane_padded()];
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = kern[ky * g.k + kx];
                        for y in 0..g.ho {
                            let row = (y * g.s + ky) * g.wp + kx;
                            for x in 0..g.wo {
                                plane[y * g.wo + x] += wv * src_i[row + x * g.s];
                            }
                        }
                    }
                }
                macs += g.macs_per_connection();
            }
        }
    }
    macs
}

/// Masked convolution forward pass over `[in_maps,H,W]` or `[n,in_maps,H,W]`.
pub fn conv_forward<T: Scalar>(input: &Tensor<T>, layer: &ConvLayer<T>) -> Result<Tensor<T>> {
    conv_forward_with(input, layer, &layer.connectivity, None)
}

/// As [`conv_forward`], adding the executed MAC count to `counter`.
pub fn conv_forward_counted<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    counter: &MacCounter,
) -> Result<Tensor<T>> {
    conv_forward_with(input, layer, &layer.connectivity, Some(counter))
}

/// Forward pass using `conn` in place of the layer's own connectivity.
/// Used for temporary mask overlays.
pub fn conv_forward_with<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    conn: &Connectivity,
    counter: Option<&MacCounter>,
) -> Result<Tensor<T>> {
    let ([n, c, h, w], batched) = batch_dims(input.shape())?;
    let g = Geometry::new(layer, c, h, w)?;
    if conn.out_maps() != layer.out_maps || conn.in_maps() != layer.in_maps {
        return Err(Error::Shape("overlay connectivity does not match layer".into()));
    }
    input.ensure_finite("conv input")?;
    let mut out = Tensor::zeros(restore_rank(batched, n, &[layer.out_maps, g.ho, g.wo]));
    let mut padded = Vec::new();
    let mut wide = Vec::new();
    let mut macs = 0;
    let out_len = layer.out_maps * g.plane_out();
    for s in 0..n {
        let x = &input.data()[s * c * h * w..(s + 1) * c * h * w];
        pad_into(x, &g, &mut padded);
        let dst = &mut out.data_mut()[s * out_len..(s + 1) * out_len];
        macs += forward_sample(&padded, &g, layer, conn, &mut wide, dst);
    }
    if let Some(counter) = counter {
        counter.add(macs);
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads<T> {
    /// `None` when the caller did not request the input gradient.
    pub input: Option<Tensor<T>>,
    pub kernels: Tensor<T>,
    pub biases: Vec<T>,
}

/// Lane-blocked dot product over `len` (a multiple of the lane block).
fn dot_blocked<T: Scalar>(a: &[T], b: &[T], len: usize) -> T {
    let mut acc = [T::zero(); LANES];
    for j0 in (0..len).step_by(LANES) {
        let (x, y) = (&a[j0..j0 + LANES], &b[j0..j0 + LANES]);
        for l in 0..LANES {
            acc[l] = x[l].mul_add(y[l], acc[l]);
        }
    }
    let mut width = LANES / 2;
    while width > 0 {
        for l in 0..width {
            let hi = acc[l + width];
            acc[l] += hi;
        }
        width /= 2;
    }
    acc[0]
}

/// Bias and kernel gradients for one stride-1 sample. Leaves each output
/// gradient plane in `gwide` laid out on the padded row pitch.
#[allow(clippy::too_many_arguments)]
fn backward_sample_unit<T: Scalar>(
    src: &[T],
    go: &[T],
    g: &Geometry,
    layer: &ConvLayer<T>,
    conn: &Connectivity,
    gk: &mut [T],
    gb: &mut [T],
    gwide: &mut Vec<T>,
) {
    let kk = g.k * g.k;
    let span = g.span().div_ceil(LANES) * LANES;
    let taps = tap_offsets(g);
    gwide.clear();
    gwide.resize(span, T::zero());
    for o in 0..layer.out_maps {
        let gplane = &go[o * g.plane_out()..(o + 1) * g.plane_out()];
        gb[o] += gplane.iter().copied().sum::<T>();
        for y in 0..g.ho {
            gwide[y * g.wp..y * g.wp + g.wo].copy_from_slice(&gplane[y * g.wo..(y + 1) * g.wo]);
        }
        for i in conn.inputs_of(o) {
            let src_i = &src[i * g.plane_padded()..];
            let kstart = (o * layer.in_maps + i) * kk;
            for (t, &off) in taps.iter().enumerate() {
                gk[kstart + t] += dot_blocked(gwide, &src_i[off..], span);
            }
        }
    }
}

/// Input gradient for one stride-1 sample, written cropped into `gin`
/// (`[in_maps,H,W]`). Each input plane is a correlation of the margin-padded
/// output gradients with the flipped kernels.
fn input_grad_unit<T: Scalar>(
    go: &[T],
    g: &Geometry,
    layer: &ConvLayer<T>,
    conn: &Connectivity,
    gpad: &mut Vec<T>,
    gin: &mut Vec<T>,
) {
    let margin = (g.k - 1) * g.wp + g.k - 1;
    let span_in = g.plane_padded().div_ceil(LANES) * LANES;
    let stride = margin + span_in;
    gpad.clear();
    gpad.resize(layer.out_maps * stride, T::zero());
    for o in 0..layer.out_maps {
        for y in 0..g.ho {
            let at = o * stride + margin + y * g.wp;
            gpad[at..at + g.wo].copy_from_slice(&go[o * g.plane_out() + y * g.wo..][..g.wo]);
        }
    }
    let taps: Vec<usize> = tap_offsets(g).iter().map(|&off| margin - off).collect();
    gin.clear();
    gin.resize(g.c * g.plane_in(), T::zero());
    let mut acc = vec![T::zero(); span_in];
    let mut active = Vec::with_capacity(layer.out_maps);
    for i in 0..layer.in_maps {
        active.clear();
        for o in 0..layer.out_maps {
            if conn.get(o, i) {
                active.push((layer.kernel(o, i), &gpad[o * stride..(o + 1) * stride]));
            }
        }
        acc.fill(T::zero());
        accumulate_taps(&active, &taps, &mut acc, span_in);
        for y in 0..g.h {
            let from = (y + g.p) * g.wp + g.p;
            gin[i * g.plane_in() + y * g.w..][..g.w].copy_from_slice(&acc[from..from + g.w]);
        }
    }
}

/// Exact gradients of [`conv_forward`]. Kernels with a cleared flag receive
/// an exactly zero gradient.
pub fn conv_backward<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Vec<T>)> {
    let g = conv_backward_with(input, layer, &layer.connectivity, grad_out, true)?;
    Ok((g.input.expect("requested"), g.kernels, g.biases))
}

pub fn conv_backward_with<T: Scalar>(
    input: &Tensor<T>,
    layer: &ConvLayer<T>,
    conn: &Connectivity,
    grad_out: &Tensor<T>,
    want_input: bool,
) -> Result<ConvGrads<T>> {
    let ([n, c, h, w], batched) = batch_dims(input.shape())?;
    let g = Geometry::new(layer, c, h, w)?;
    let expected = restore_rank(batched, n, &[layer.out_maps, g.ho, g.wo]);
    if grad_out.shape() != expected.as_slice() {
        return Err(Error::Shape(format!(
            "grad_out {:?} does not match conv output {expected:?}",
            grad_out.shape()
        )));
    }
    let kk = g.k * g.k;
    let mut gk = Tensor::zeros(vec![layer.out_maps, layer.in_maps, g.k, g.k]);
    let mut gb = vec![T::zero(); layer.out_maps];
    let mut gin = want_input.then(|| Tensor::zeros(input.shape().to_vec()));
    let mut padded = Vec::new();
    let mut gsrc: Vec<T> = Vec::new();
    let mut gwide: Vec<T> = Vec::new();
    let out_len = layer.out_maps * g.plane_out();
    for s in 0..n {
        let x = &input.data()[s * c * h * w..(s + 1) * c * h * w];
        pad_into(x, &g, &mut padded);
        let src = &padded[..];
        let go = &grad_out.data()[s * out_len..(s + 1) * out_len];
        if want_input && g.s != 1 {
            gsrc.clear();
            gsrc.resize(c * g.plane_padded(), T::zero());
        }
        if g.s == 1 {
            backward_sample_unit(src, go, &g, layer, conn, gk.data_mut(), &mut gb, &mut gwide);
            if want_input {
                input_grad_unit(go, &g, layer, conn, &mut gwide, &mut gsrc);
            }
        } else {
            for o in 0..layer.out_maps {
                let gplane = &go[o * g.plane_out()..(o + 1) * g.plane_out()];
                gb[o] += gplane.iter().copied().sum::<T>();
                for i in conn.inputs_of(o) {
                    let src_i = &src[i * g.plane_padded()..(i + 1) * g.plane_padded()];
                    let kstart = (o * layer.in_maps + i) * kk;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let wv = layer.kernels.data()[kstart + ky * g.k + kx];
                            let mut acc = T::zero();
                            for y in 0..g.ho {
                                let row = (y * g.s + ky) * g.wp + kx;
                                for xo in 0..g.wo {
                                    let gv = gplane[y * g.wo + xo];
                                    acc += gv * src_i[row + xo * g.s];
                                    if want_input {
                                        gsrc[i * g.plane_padded() + row + xo * g.s] += wv * gv;
                                    }
                                }
                            }
                            gk.data_mut()[kstart + ky * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
        if let Some(gin) = gin.as_mut() {
            let dst = &mut gin.data_mut()[s * c * h * w..(s + 1) * c * h * w];
            if g.s == 1 {
                dst.copy_from_slice(&gsrc);
                continue;
            }
            for i in 0..c {
                for y in 0..h {
                    let from = i * g.plane_padded() + (y + g.p) * g.wp + g.p;
                    dst[i * h * w + y * w..i * h * w + (y + 1) * w].copy_from_slice(&gsrc[from..from + w]);
                }
            }
        }
    }
    Ok(ConvGrads {
        input: gin,
        kernels: gk,
        biases: gb,
    })
}
