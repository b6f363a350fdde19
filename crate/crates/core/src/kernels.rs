//! Raw compute kernels shared by forward evaluation and backpropagation.
//!
//! All kernels operate on row-major `f64` slices. Inner loops run over the
//! contiguous width axis so the compiler can vectorize them.

/// Dimensions of a stride-1, zero-padded "same" convolution.
#[derive(Clone, Copy, Debug)]
pub struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvDims {
    fn pad(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }
}

/// `out[co,y,x] = bias[co] + sum_{ci,dy,dx} in[ci,y+dy-ph,x+dx-pw] * k[co,ci,dy,dx]`
pub fn conv2d_forward(input: &[f64], kernel: &[f64], bias: &[f64], d: ConvDims) -> Vec<f64> {
    let (ph, pw) = d.pad();
    let plane = d.h * d.w;
    let mut out = vec![0.0; d.c_out * plane];
    for co in 0..d.c_out {
        let out_plane = &mut out[co * plane..(co + 1) * plane];
        out_plane.fill(bias[co]);
        for ci in 0..d.c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let wgt = kernel[((co * d.c_in + ci) * d.kh + dy) * d.kw + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    // oy + dy - ph must land in [0, h)
                    let oy0 = ph.saturating_sub(dy);
                    let oy1 = (d.h + ph - dy).min(d.h);
                    let ox0 = pw.saturating_sub(dx);
                    let ox1 = (d.w + pw - dx).min(d.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy + dy - ph;
                        let orow = &mut out_plane[oy * d.w + ox0..oy * d.w + ox1];
                        let irow = &in_plane[iy * d.w + (ox0 + dx - pw)..iy * d.w + (ox1 + dx - pw)];
                        for (o, &i) in orow.iter_mut().zip(irow) {
                            *o += wgt * i;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradient of the convolution w.r.t. its input.
pub fn conv2d_backward_input(grad_out: &[f64], kernel: &[f64], d: ConvDims) -> Vec<f64> {
    let (ph, pw) = d.pad();
    let plane = d.h * d.w;
    let mut grad_in = vec![0.0; d.c_in * plane];
    for co in 0..d.c_out {
        let go_plane = &grad_out[co * plane..(co + 1) * plane];
        for ci in 0..d.c_in {
            let gi_plane = &mut grad_in[ci * plane..(ci + 1) * plane];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let wgt = kernel[((co * d.c_in + ci) * d.kh + dy) * d.kw + dx];
                    if wgt == 0.0 {
                        continue;
                    }
                    let oy0 = ph.saturating_sub(dy);
                    let oy1 = (d.h + ph - dy).min(d.h);
                    let ox0 = pw.saturating_sub(dx);
                    let ox1 = (d.w + pw - dx).min(d.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    for oy in oy0..oy1 {
                        let iy = oy + dy - ph;
                        let grow = &go_plane[oy * d.w + ox0..oy * d.w + ox1];
                        let irow =
                            &mut gi_plane[iy * d.w + (ox0 + dx - pw)..iy * d.w + (ox1 + dx - pw)];
                        for (gi, &go) in irow.iter_mut().zip(grow) {
                            *gi += wgt * go;
                        }
                    }
                }
            }
        }
    }
    grad_in
}

/// Gradients of the convolution w.r.t. kernel and bias.
pub fn conv2d_backward_kernel(
    grad_out: &[f64],
    input: &[f64],
    d: ConvDims,
) -> (Vec<f64>, Vec<f64>) {
    let (ph, pw) = d.pad();
    let plane = d.h * d.w;
    let mut grad_k = vec![0.0; d.c_out * d.c_in * d.kh * d.kw];
    let mut grad_b = vec![0.0; d.c_out];
    for co in 0..d.c_out {
        let go_plane = &grad_out[co * plane..(co + 1) * plane];
        grad_b[co] = go_plane.iter().sum();
        for ci in 0..d.c_in {
            let in_plane = &input[ci * plane..(ci + 1) * plane];
            for dy in 0..d.kh {
                for dx in 0..d.kw {
                    let oy0 = ph.saturating_sub(dy);
                    let oy1 = (d.h + ph - dy).min(d.h);
                    let ox0 = pw.saturating_sub(dx);
                    let ox1 = (d.w + pw - dx).min(d.w);
                    if ox0 >= ox1 {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy0..oy1 {
                        let iy = oy + dy - ph;
                        let grow = &go_plane[oy * d.w + ox0..oy * d.w + ox1];
                        let irow = &in_plane[iy * d.w + (ox0 + dx - pw)..iy * d.w + (ox1 + dx - pw)];
                        let mut s = 0.0;
                        for (&g, &i) in grow.iter().zip(irow) {
                            s += g * i;
                        }
                        acc += s;
                    }
                    grad_k[((co * d.c_in + ci) * d.kh + dy) * d.kw + dx] = acc;
                }
            }
        }
    }
    (grad_k, grad_b)
}

/// Bilinear sampling with a zero border: grid entries are continuous
/// `(row, col)` source coordinates; anything outside `[0,h-1] x [0,w-1]`
/// reads as zero.
pub fn grid_sample_forward(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    grid: &[f64],
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; c * out_h * out_w];
    let plane = h * w;
    let out_plane = out_h * out_w;
    for (cell, coords) in grid.chunks_exact(2).enumerate() {
        let (r, col) = (coords[0], coords[1]);
        if !(r >= 0.0 && r <= (h - 1) as f64 && col >= 0.0 && col <= (w - 1) as f64) {
            continue;
        }
        let r0 = r.floor() as usize;
        let c0 = col.floor() as usize;
        let fr = r - r0 as f64;
        let fc = col - c0 as f64;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let w00 = (1.0 - fr) * (1.0 - fc);
        let w01 = (1.0 - fr) * fc;
        let w10 = fr * (1.0 - fc);
        let w11 = fr * fc;
        for ch in 0..c {
            let ip = &input[ch * plane..(ch + 1) * plane];
            out[ch * out_plane + cell] = w00 * ip[r0 * w + c0]
                + w01 * ip[r0 * w + c1]
                + w10 * ip[r1 * w + c0]
                + w11 * ip[r1 * w + c1];
        }
    }
    out
}

/// Gradient of bilinear sampling w.r.t. the sampled input (the grid is a
/// constant).
pub fn grid_sample_backward_input(
    grad_out: &[f64],
    c: usize,
    h: usize,
    w: usize,
    grid: &[f64],
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let mut grad_in = vec![0.0; c * h * w];
    let plane = h * w;
    let out_plane = out_h * out_w;
    for (cell, coords) in grid.chunks_exact(2).enumerate() {
        let (r, col) = (coords[0], coords[1]);
        if !(r >= 0.0 && r <= (h - 1) as f64 && col >= 0.0 && col <= (w - 1) as f64) {
            continue;
        }
        let r0 = r.floor() as usize;
        let c0 = col.floor() as usize;
        let fr = r - r0 as f64;
        let fc = col - c0 as f64;
        let r1 = (r0 + 1).min(h - 1);
        let c1 = (c0 + 1).min(w - 1);
        let w00 = (1.0 - fr) * (1.0 - fc);
        let w01 = (1.0 - fr) * fc;
        let w10 = fr * (1.0 - fc);
        let w11 = fr * fc;
        for ch in 0..c {
            let g = grad_out[ch * out_plane + cell];
            if g == 0.0 {
                continue;
            }
            let gp = &mut grad_in[ch * plane..(ch + 1) * plane];
            gp[r0 * w + c0] += w00 * g;
            gp[r0 * w + c1] += w01 * g;
            gp[r1 * w + c0] += w10 * g;
            gp[r1 * w + c1] += w11 * g;
        }
    }
    grad_in
}

/// 2x2 max pooling with stride 2. Returns the pooled values and, per output
/// element, the flat input index of the winning cell (first in scan order on
/// ties).
pub fn maxpool2_forward(input: &[f64], c: usize, h: usize, w: usize) -> (Vec<f64>, Vec<u32>) {
    debug_assert!(h % 2 == 0 && w % 2 == 0);
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut arg = vec![0u32; c * oh * ow];
    for ch in 0..c {
        let ip = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let base = (2 * oy) * w + 2 * ox;
                let cand = [base, base + 1, base + w, base + w + 1];
                let mut best = cand[0];
                for &i in &cand[1..] {
                    if ip[i] > ip[best] {
                        best = i;
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = ip[best];
                arg[ch * oh * ow + oy * ow + ox] = (ch * h * w + best) as u32;
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward(grad_out: &[f64], argmax: &[u32], input_len: usize) -> Vec<f64> {
    let mut grad_in = vec![0.0; input_len];
    for (&g, &i) in grad_out.iter().zip(argmax) {
        grad_in[i as usize] += g;
    }
    grad_in
}
