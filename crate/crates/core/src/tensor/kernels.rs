//! Raw convolution kernels over flattened grids.
//!
//! A valid correlation over a `[d1, d2, d3]` grid is evaluated on the input
//! grid itself: the output for the window whose low corner sits at flat
//! input index `p` is
//!
//! ```text
//! out[co][p] = bias[co] + sum_ci sum_t w[co][ci][t] * in[ci][p + off[t]]
//! ```
//!
//! with `off[t] = a*d2*d3 + b*d3 + c` for kernel tap `(a, b, c)`. Entries at
//! positions whose window leaves the grid are computed but discarded by the
//! caller.
//!
//! Accumulation order is fixed for every output element: start from the bias,
//! then input channels ascending, then taps in lexicographic `(a, b, c)`
//! order, one multiply and one add per term (no fused multiply-add). Vector
//! lanes hold distinct output elements, so the value of an element never
//! depends on the grid size, the blocking, or the instruction set. This is
//! what makes separately generated blocks bit-identical to a monolithic
//! generation.

const LANES: usize = 16;
const DOT_LANES: usize = 8;

/// Flat offsets of the kernel taps for a grid of `dims`, lexicographic order.
pub(crate) fn tap_offsets(dims: [usize; 3], kernel: [usize; 3]) -> Vec<usize> {
    let s1 = dims[1] * dims[2];
    let s2 = dims[2];
    let mut offs = Vec::with_capacity(kernel.iter().product());
    for a in 0..kernel[0] {
        for b in 0..kernel[1] {
            for c in 0..kernel[2] {
                offs.push(a * s1 + b * s2 + c);
            }
        }
    }
    offs
}

/// Number of flat positions that cover every valid output window.
pub(crate) fn valid_span(dims: [usize; 3], kernel: [usize; 3]) -> usize {
    let o = [
        dims[0] + 1 - kernel[0],
        dims[1] + 1 - kernel[1],
        dims[2] + 1 - kernel[2],
    ];
    (o[0] - 1) * dims[1] * dims[2] + (o[1] - 1) * dims[2] + o[2]
}

/// Copies `channels` planes of length `plane` into buffers of `stride`
/// floats each, starting `lead` floats in, zero elsewhere.
pub(crate) fn padded_planes(src: &[f32], channels: usize, plane: usize, lead: usize, stride: usize) -> Vec<f32> {
    let mut buf = vec![0.0f32; channels * stride];
    for c in 0..channels {
        buf[c * stride + lead..c * stride + lead + plane].copy_from_slice(&src[c * plane..(c + 1) * plane]);
    }
    buf
}

fn round_up(n: usize, m: usize) -> usize {
    n.div_ceil(m) * m
}

/// Multi-channel tap correlation over `n` flat positions.
///
/// `src` holds `cin` planes of `stride` floats; every read `p + off[t]` with
/// `p < round_up(n, LANES)` must fall inside the plane. `weights` is laid out
/// `[cout][cin][taps]`. Returns `cout` planes of `n` floats.
#[allow(clippy::too_many_arguments)]
pub(crate) fn correlate(
    src: &[f32],
    cin: usize,
    stride: usize,
    offs: &[usize],
    weights: &[f32],
    init: &[f32],
    cout: usize,
    n: usize,
) -> Vec<f32> {
    let taps = offs.len();
    assert_eq!(weights.len(), cout * cin * taps);
    assert_eq!(init.len(), cout);
    let maxoff = offs.iter().copied().max().unwrap_or(0);
    assert!(cin == 0 || round_up(n, LANES) + maxoff <= stride);
    assert!(src.len() >= cin * stride);
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: feature presence checked above; bounds asserted.
            return unsafe { correlate_avx512(src, cin, stride, offs, weights, init, cout, n) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: feature presence checked above; bounds asserted.
            return unsafe { correlate_avx2(src, cin, stride, offs, weights, init, cout, n) };
        }
    }
    // SAFETY: bounds asserted above.
    unsafe { correlate_body::<4>(src, cin, stride, offs, weights, init, cout, n) }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
#[allow(clippy::too_many_arguments)]
unsafe fn correlate_avx2(
    src: &[f32],
    cin: usize,
    stride: usize,
    offs: &[usize],
    weights: &[f32],
    init: &[f32],
    cout: usize,
    n: usize,
) -> Vec<f32> {
    correlate_body::<4>(src, cin, stride, offs, weights, init, cout, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
#[allow(clippy::too_many_arguments)]
unsafe fn correlate_avx512(
    src: &[f32],
    cin: usize,
    stride: usize,
    offs: &[usize],
    weights: &[f32],
    init: &[f32],
    cout: usize,
    n: usize,
) -> Vec<f32> {
    correlate_body::<8>(src, cin, stride, offs, weights, init, cout, n)
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
unsafe fn correlate_body<const CB: usize>(
    src: &[f32],
    cin: usize,
    stride: usize,
    offs: &[usize],
    weights: &[f32],
    init: &[f32],
    cout: usize,
    n: usize,
) -> Vec<f32> {
    let taps = offs.len();
    let n_full = round_up(n, LANES);
    let mut out = vec![0.0f32; cout * n];
    let mut wb = vec![0.0f32; cin * taps * CB];
    let sp = src.as_ptr();

    for co0 in (0..cout).step_by(CB) {
        let cb = CB.min(cout - co0);
        // packed weights [ci][t][q], zero for q >= cb
        wb.iter_mut().for_each(|w| *w = 0.0);
        for q in 0..cb {
            for ci in 0..cin {
                for t in 0..taps {
                    wb[(ci * taps + t) * CB + q] = weights[((co0 + q) * cin + ci) * taps + t];
                }
            }
        }
        let mut bias = [0.0f32; CB];
        bias[..cb].copy_from_slice(&init[co0..co0 + cb]);
        let wp = wb.as_ptr();

        for p0 in (0..n_full).step_by(LANES) {
            let mut acc = [[0.0f32; LANES]; CB];
            for q in 0..CB {
                acc[q] = [bias[q]; LANES];
            }
            for ci in 0..cin {
                let plane = sp.add(ci * stride + p0);
                let wrow = wp.add(ci * taps * CB);
                for (t, &off) in offs.iter().enumerate() {
                    let x = plane.add(off);
                    let w = wrow.add(t * CB);
                    let mut xs = [0.0f32; LANES];
                    for l in 0..LANES {
                        xs[l] = *x.add(l);
                    }
                    for q in 0..CB {
                        let wq = *w.add(q);
                        for l in 0..LANES {
                            acc[q][l] += wq * xs[l];
                        }
                    }
                }
            }
            let len = LANES.min(n - p0.min(n));
            for (q, a) in acc.iter().enumerate().take(cb) {
                let base = (co0 + q) * n + p0;
                out[base..base + len].copy_from_slice(&a[..len]);
            }
        }
    }
    out
}

/// Deterministic dot product: eight strided partial sums reduced in a fixed
/// order.
pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; DOT_LANES];
    let chunks = a.len() / DOT_LANES;
    for k in 0..chunks {
        let x: &[f32; DOT_LANES] = a[k * DOT_LANES..(k + 1) * DOT_LANES].try_into().unwrap();
        let y: &[f32; DOT_LANES] = b[k * DOT_LANES..(k + 1) * DOT_LANES].try_into().unwrap();
        for l in 0..DOT_LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0f32;
    for k in chunks * DOT_LANES..a.len() {
        tail += a[k] * b[k];
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

/// Forward valid correlation. `input` is `cin` planes of `dims`; returns
/// `cout` planes of the output dims `dims - kernel + 1`.
pub(crate) fn conv_valid_forward(
    input: &[f32],
    cin: usize,
    dims: [usize; 3],
    weights: &[f32],
    bias: &[f32],
    cout: usize,
    kernel: [usize; 3],
) -> Vec<f32> {
    let plane: usize = dims.iter().product();
    let offs = tap_offsets(dims, kernel);
    let maxoff = *offs.last().unwrap();
    let n = valid_span(dims, kernel);
    let stride = (round_up(n, LANES) + maxoff).max(plane);
    let src = padded_planes(input, cin, plane, 0, stride);
    let grid = correlate(&src, cin, stride, &offs, weights, bias, cout, n);
    gather_valid(&grid, cout, n, dims, kernel)
}

/// Extracts the valid windows from grid-indexed planes of length `n`.
pub(crate) fn gather_valid(grid: &[f32], channels: usize, n: usize, dims: [usize; 3], kernel: [usize; 3]) -> Vec<f32> {
    let o = [
        dims[0] + 1 - kernel[0],
        dims[1] + 1 - kernel[1],
        dims[2] + 1 - kernel[2],
    ];
    let mut out = Vec::with_capacity(channels * o[0] * o[1] * o[2]);
    for c in 0..channels {
        let g = &grid[c * n..(c + 1) * n];
        for i in 0..o[0] {
            for j in 0..o[1] {
                let start = (i * dims[1] + j) * dims[2];
                out.extend_from_slice(&g[start..start + o[2]]);
            }
        }
    }
    out
}

/// Scatters output-shaped planes back onto the input grid (zero elsewhere),
/// each plane placed `lead` floats into a buffer of `stride` floats.
fn scatter_valid(
    values: &[f32],
    channels: usize,
    dims: [usize; 3],
    kernel: [usize; 3],
    lead: usize,
    stride: usize,
) -> Vec<f32> {
    let o = [
        dims[0] + 1 - kernel[0],
        dims[1] + 1 - kernel[1],
        dims[2] + 1 - kernel[2],
    ];
    let per = o[0] * o[1] * o[2];
    let mut buf = vec![0.0f32; channels * stride];
    for c in 0..channels {
        let src = &values[c * per..(c + 1) * per];
        let dst = &mut buf[c * stride + lead..];
        let mut k = 0;
        for i in 0..o[0] {
            for j in 0..o[1] {
                let start = (i * dims[1] + j) * dims[2];
                dst[start..start + o[2]].copy_from_slice(&src[k..k + o[2]]);
                k += o[2];
            }
        }
    }
    buf
}

/// Adjoints of [`conv_valid_forward`]. Returns `(d_input, d_weights, d_bias)`;
/// weight and bias gradients are skipped (empty) when `want_params` is false.
pub(crate) fn conv_valid_backward(
    input: &[f32],
    cin: usize,
    dims: [usize; 3],
    weights: &[f32],
    cout: usize,
    kernel: [usize; 3],
    grad_out: &[f32],
    want_input: bool,
    want_params: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let plane: usize = dims.iter().product();
    let offs = tap_offsets(dims, kernel);
    let taps = offs.len();
    let maxoff = *offs.last().unwrap();

    let d_input = if want_input {
        // d_in[ci][q] = sum_co sum_t w[co][ci][t] * g[co][q - off[t]]
        let stride = maxoff + round_up(plane, LANES) + LANES;
        let g = scatter_valid(grad_out, cout, dims, kernel, maxoff, stride);
        let flipped: Vec<usize> = offs.iter().map(|&o| maxoff - o).collect();
        let mut wt = vec![0.0f32; cin * cout * taps];
        for co in 0..cout {
            for ci in 0..cin {
                for t in 0..taps {
                    wt[(ci * cout + co) * taps + t] = weights[(co * cin + ci) * taps + t];
                }
            }
        }
        let zeros = vec![0.0f32; cin];
        correlate(&g, cout, stride, &flipped, &wt, &zeros, cin, plane)
    } else {
        Vec::new()
    };

    let (d_w, d_b) = if want_params {
        let n = valid_span(dims, kernel);
        let g = scatter_valid(grad_out, cout, dims, kernel, 0, plane);
        let mut d_w = vec![0.0f32; cout * cin * taps];
        for co in 0..cout {
            let gc = &g[co * plane..co * plane + n];
            for ci in 0..cin {
                let x = &input[ci * plane..(ci + 1) * plane];
                for (t, &off) in offs.iter().enumerate() {
                    d_w[(co * cin + ci) * taps + t] = dot(gc, &x[off..off + n]);
                }
            }
        }
        let per = grad_out.len() / cout.max(1);
        let d_b = (0..cout)
            .map(|co| grad_out[co * per..(co + 1) * per].iter().map(|&v| v as f64).sum::<f64>() as f32)
            .collect();
        (d_w, d_b)
    } else {
        (Vec::new(), Vec::new())
    };
    (d_input, d_w, d_b)
}
