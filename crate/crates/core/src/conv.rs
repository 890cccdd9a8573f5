//! Spatial tape operations: grouped 2-D convolution, bilinear upsampling,
//! bilinear warping by a projective map, and cropping.
//!
//! Convolutions use im2col plus a per-group matrix product. Border handling
//! is reflect-101 (mirror without repeating the edge sample); size-1 axes
//! fall back to edge replication.

use crate::tensor::{as1, as2, as3, Tensor};
use ndarray::{Array2, Array3, Axis};

/// Padding scheme used when a kernel overhangs the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PadMode {
    Zero,
    Reflect,
}

/// Reflect-101 an index into `[0, n)`.
pub fn reflect_idx(i: i64, n: i64) -> usize {
    if n == 1 {
        return 0;
    }
    let p = 2 * (n - 1);
    let mut m = i % p;
    if m < 0 {
        m += p;
    }
    if m >= n {
        (p - m) as usize
    } else {
        m as usize
    }
}

/// Map from column entries to flat source pixels: for each (kr, kc, ho, wo)
/// the flat index `r*w + c` into one input channel, or -1 for a zero pad.
fn conv_index_map(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    ph: usize,
    pw: usize,
    mode: PadMode,
) -> (Vec<i64>, usize, usize) {
    let hout = (h + 2 * ph - kh) / stride + 1;
    let wout = (w + 2 * pw - kw) / stride + 1;
    let mut map = vec![0i64; kh * kw * hout * wout];
    let mut pos = 0usize;
    for kr in 0..kh {
        for kc in 0..kw {
            for ho in 0..hout {
                let r = (ho * stride + kr) as i64 - ph as i64;
                for wo in 0..wout {
                    let c = (wo * stride + kc) as i64 - pw as i64;
                    map[pos] = match mode {
                        PadMode::Zero => {
                            if r < 0 || r >= h as i64 || c < 0 || c >= w as i64 {
                                -1
                            } else {
                                r * w as i64 + c
                            }
                        }
                        PadMode::Reflect => {
                            (reflect_idx(r, h as i64) * w + reflect_idx(c, w as i64)) as i64
                        }
                    };
                    pos += 1;
                }
            }
        }
    }
    (map, hout, wout)
}

fn im2col(x: &Array3<f64>, map: &[i64], k2: usize, n_out: usize) -> Array2<f64> {
    let (cin, _, _) = x.dim();
    let mut cols = Array2::<f64>::zeros((cin * k2, n_out));
    let cols_s = cols.as_slice_mut().unwrap();
    for ci in 0..cin {
        let plane = x.index_axis(Axis(0), ci);
        let ps = plane.to_slice().unwrap();
        for k in 0..k2 {
            let row = &mut cols_s[(ci * k2 + k) * n_out..(ci * k2 + k + 1) * n_out];
            let m = &map[k * n_out..(k + 1) * n_out];
            for (dst, &src) in row.iter_mut().zip(m.iter()) {
                *dst = if src < 0 { 0.0 } else { ps[src as usize] };
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    map: &[i64],
    cin: usize,
    h: usize,
    w: usize,
    k2: usize,
    n_out: usize,
) -> Array3<f64> {
    let mut dx = Array3::<f64>::zeros((cin, h, w));
    let ds = dcols.as_slice().unwrap();
    for ci in 0..cin {
        let mut plane = dx.index_axis_mut(Axis(0), ci);
        let ps = plane.as_slice_mut().unwrap();
        for k in 0..k2 {
            let row = &ds[(ci * k2 + k) * n_out..(ci * k2 + k + 1) * n_out];
            let m = &map[k * n_out..(k + 1) * n_out];
            for (&g, &src) in row.iter().zip(m.iter()) {
                if src >= 0 {
                    ps[src as usize] += g;
                }
            }
        }
    }
    dx
}

/// Grouped 2-D convolution of a (Cin, H, W) tensor with weights
/// (Cout, Cin/groups, kh, kw) and optional per-output-channel bias.
pub fn conv2d(
    x: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: (usize, usize),
    groups: usize,
    mode: PadMode,
) -> Tensor {
    let g = x.graph();
    let xv = as3(&x.value());
    let wv = weight.value();
    let ws = wv.shape().to_vec();
    let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let (cin, h, w) = xv.dim();
    assert_eq!(cin, cin_g * groups, "channel/group mismatch");
    assert_eq!(cout % groups, 0);
    let cout_g = cout / groups;
    let k2 = kh * kw;
    let (map, hout, wout) = conv_index_map(h, w, kh, kw, stride, pad.0, pad.1, mode);
    let n_out = hout * wout;
    let cols = im2col(&xv, &map, k2, n_out);
    let w_mat = as2(&wv.into_shape_with_order(ndarray::IxDyn(&[cout, cin_g * k2])).unwrap());

    let mut out_mat = Array2::<f64>::zeros((cout, n_out));
    for gi in 0..groups {
        let wg = w_mat.slice(ndarray::s![gi * cout_g..(gi + 1) * cout_g, ..]);
        let cg = cols.slice(ndarray::s![gi * cin_g * k2..(gi + 1) * cin_g * k2, ..]);
        let prod = wg.dot(&cg);
        out_mat
            .slice_mut(ndarray::s![gi * cout_g..(gi + 1) * cout_g, ..])
            .assign(&prod);
    }
    if let Some(b) = bias {
        let bv = as1(&b.value());
        for co in 0..cout {
            out_mat.row_mut(co).mapv_inplace(|v| v + bv[co]);
        }
    }
    let out = out_mat
        .into_shape_with_order((cout, hout, wout))
        .unwrap()
        .into_dyn();

    if !g.grad_enabled() {
        return g.push_nograd(out);
    }

    let ix = x.id();
    let iw = weight.id();
    let ib = bias.map(|b| b.id());
    g.push_op(
        out,
        Box::new(move |gout, _vals, grads| {
            let g3 = as3(gout);
            let g_mat = g3
                .into_shape_with_order((cout, n_out))
                .unwrap();
            let mut dw = Array2::<f64>::zeros((cout, cin_g * k2));
            let mut dcols = Array2::<f64>::zeros((cin_g * k2 * groups, n_out));
            for gi in 0..groups {
                let gg = g_mat.slice(ndarray::s![gi * cout_g..(gi + 1) * cout_g, ..]);
                let cg = cols.slice(ndarray::s![gi * cin_g * k2..(gi + 1) * cin_g * k2, ..]);
                dw.slice_mut(ndarray::s![gi * cout_g..(gi + 1) * cout_g, ..])
                    .assign(&gg.dot(&cg.t()));
                let wg = w_mat.slice(ndarray::s![gi * cout_g..(gi + 1) * cout_g, ..]);
                dcols
                    .slice_mut(ndarray::s![gi * cin_g * k2..(gi + 1) * cin_g * k2, ..])
                    .assign(&wg.t().dot(&gg));
            }
            let dx = col2im(&dcols, &map, cin, h, w, k2, n_out);
            crate::tensor::acc_grad(grads, ix, dx.into_dyn());
            crate::tensor::acc_grad(
                grads,
                iw,
                dw.into_shape_with_order(ndarray::IxDyn(&[cout, cin_g, kh, kw]))
                    .unwrap(),
            );
            if let Some(ib) = ib {
                let db = g_mat.sum_axis(Axis(1));
                crate::tensor::acc_grad(grads, ib, db.into_dyn());
            }
        }),
    )
}

/// Bilinear upsampling/downsampling of a (C, H, W) tensor to (C, oh, ow),
/// sampling at pixel centers.
pub fn upsample_bilinear(x: &Tensor, oh: usize, ow: usize) -> Tensor {
    let g = x.graph();
    let xv = as3(&x.value());
    let (c, h, w) = xv.dim();
    if (h, w) == (oh, ow) {
        // still a node so graphs stay uniform
        return x.mul_scalar(1.0);
    }
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    let mut rows = Vec::with_capacity(oh);
    for o in 0..oh {
        let src = ((o as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let r0 = src.floor() as usize;
        let r1 = (r0 + 1).min(h - 1);
        rows.push((r0, r1, src - r0 as f64));
    }
    let mut colsm = Vec::with_capacity(ow);
    for o in 0..ow {
        let src = ((o as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
        let c0 = src.floor() as usize;
        let c1 = (c0 + 1).min(w - 1);
        colsm.push((c0, c1, src - c0 as f64));
    }
    let mut out = Array3::<f64>::zeros((c, oh, ow));
    for ci in 0..c {
        for (ro, &(r0, r1, fr)) in rows.iter().enumerate() {
            for (co, &(c0, c1, fc)) in colsm.iter().enumerate() {
                let v = (1.0 - fr) * ((1.0 - fc) * xv[[ci, r0, c0]] + fc * xv[[ci, r0, c1]])
                    + fr * ((1.0 - fc) * xv[[ci, r1, c0]] + fc * xv[[ci, r1, c1]]);
                out[[ci, ro, co]] = v;
            }
        }
    }
    let out = out.into_dyn();
    if !g.grad_enabled() {
        return g.push_nograd(out);
    }
    let ix = x.id();
    g.push_op(
        out,
        Box::new(move |gout, _vals, grads| {
            let g3 = as3(gout);
            let mut dx = Array3::<f64>::zeros((c, h, w));
            for ci in 0..c {
                for (ro, &(r0, r1, fr)) in rows.iter().enumerate() {
                    for (co, &(c0, c1, fc)) in colsm.iter().enumerate() {
                        let gv = g3[[ci, ro, co]];
                        dx[[ci, r0, c0]] += gv * (1.0 - fr) * (1.0 - fc);
                        dx[[ci, r0, c1]] += gv * (1.0 - fr) * fc;
                        dx[[ci, r1, c0]] += gv * fr * (1.0 - fc);
                        dx[[ci, r1, c1]] += gv * fr * fc;
                    }
                }
            }
            crate::tensor::acc_grad(grads, ix, dx.into_dyn());
        }),
    )
}

/// Plain-array bilinear warp kernel. `dest_to_src` maps homogeneous output
/// coordinates (x, y, 1) to source coordinates; borders reflect.
pub fn warp_array(x: &Array3<f64>, dest_to_src: &[[f64; 3]; 3]) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (out, _) = warp_forward(x, dest_to_src, c, h, w);
    out
}

type WarpSaves = Vec<(usize, usize, usize, usize, f64, f64)>;

fn warp_forward(
    x: &Array3<f64>,
    m: &[[f64; 3]; 3],
    c: usize,
    h: usize,
    w: usize,
) -> (Array3<f64>, WarpSaves) {
    let mut out = Array3::<f64>::zeros((c, h, w));
    let mut saves: WarpSaves = Vec::with_capacity(h * w);
    for yo in 0..h {
        for xo in 0..w {
            let xf = xo as f64;
            let yf = yo as f64;
            let sw = m[2][0] * xf + m[2][1] * yf + m[2][2];
            let sx = (m[0][0] * xf + m[0][1] * yf + m[0][2]) / sw;
            let sy = (m[1][0] * xf + m[1][1] * yf + m[1][2]) / sw;
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let c0 = reflect_idx(x0 as i64, w as i64);
            let c1 = reflect_idx(x0 as i64 + 1, w as i64);
            let r0 = reflect_idx(y0 as i64, h as i64);
            let r1 = reflect_idx(y0 as i64 + 1, h as i64);
            saves.push((r0, r1, c0, c1, fy, fx));
            for ci in 0..c {
                out[[ci, yo, xo]] = (1.0 - fy)
                    * ((1.0 - fx) * x[[ci, r0, c0]] + fx * x[[ci, r0, c1]])
                    + fy * ((1.0 - fx) * x[[ci, r1, c0]] + fx * x[[ci, r1, c1]]);
            }
        }
    }
    (out, saves)
}

/// Bilinear warp of a (C, H, W) tensor by a projective dest-to-src map.
/// The map itself is a constant; gradients flow to the input only.
pub fn warp_bilinear(x: &Tensor, dest_to_src: &[[f64; 3]; 3]) -> Tensor {
    let g = x.graph();
    let xv = as3(&x.value());
    let (c, h, w) = xv.dim();
    let (out, saves) = warp_forward(&xv, dest_to_src, c, h, w);
    let out = out.into_dyn();
    if !g.grad_enabled() {
        return g.push_nograd(out);
    }
    let ix = x.id();
    g.push_op(
        out,
        Box::new(move |gout, _vals, grads| {
            let g3 = as3(gout);
            let mut dx = Array3::<f64>::zeros((c, h, w));
            for yo in 0..h {
                for xo in 0..w {
                    let (r0, r1, c0, c1, fy, fx) = saves[yo * w + xo];
                    for ci in 0..c {
                        let gv = g3[[ci, yo, xo]];
                        dx[[ci, r0, c0]] += gv * (1.0 - fy) * (1.0 - fx);
                        dx[[ci, r0, c1]] += gv * (1.0 - fy) * fx;
                        dx[[ci, r1, c0]] += gv * fy * (1.0 - fx);
                        dx[[ci, r1, c1]] += gv * fy * fx;
                    }
                }
            }
            crate::tensor::acc_grad(grads, ix, dx.into_dyn());
        }),
    )
}

/// Crop a (C, H, W) tensor to `[r0, r0+h) x [c0, c0+w)`.
pub fn crop2d(x: &Tensor, r0: usize, c0: usize, h: usize, w: usize) -> Tensor {
    let g = x.graph();
    let xv = as3(&x.value());
    let (c, hin, win) = xv.dim();
    assert!(r0 + h <= hin && c0 + w <= win);
    if (r0, c0, h, w) == (0, 0, hin, win) {
        return x.mul_scalar(1.0);
    }
    let out = xv
        .slice(ndarray::s![.., r0..r0 + h, c0..c0 + w])
        .to_owned()
        .into_dyn();
    if !g.grad_enabled() {
        return g.push_nograd(out);
    }
    let ix = x.id();
    g.push_op(
        out,
        Box::new(move |gout, _vals, grads| {
            let g3 = as3(gout);
            let mut dx = Array3::<f64>::zeros((c, hin, win));
            dx.slice_mut(ndarray::s![.., r0..r0 + h, c0..c0 + w])
                .assign(&g3);
            crate::tensor::acc_grad(grads, ix, dx.into_dyn());
        }),
    )
}

/// Reflect-pad a plain image to the next multiples of `mult` in both axes.
pub fn pad_to_multiple(img: &Array2<f64>, mult: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let ph = h.div_ceil(mult) * mult;
    let pw = w.div_ceil(mult) * mult;
    if (ph, pw) == (h, w) {
        return img.clone();
    }
    let mut out = Array2::<f64>::zeros((ph, pw));
    for r in 0..ph {
        for c in 0..pw {
            out[[r, c]] = img[[reflect_idx(r as i64, h as i64), reflect_idx(c as i64, w as i64)]];
        }
    }
    out
}

/// Exact spatial permutations used by the transform pool. These are
/// bit-exact and invert exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExactPerm {
    HFlip,
    VFlip,
    /// 90 degrees clockwise: (C, H, W) -> (C, W, H).
    Rot90,
    Rot180,
    /// 270 degrees clockwise: (C, H, W) -> (C, W, H).
    Rot270,
}

impl ExactPerm {
    pub fn inverse(self) -> ExactPerm {
        match self {
            ExactPerm::Rot90 => ExactPerm::Rot270,
            ExactPerm::Rot270 => ExactPerm::Rot90,
            other => other,
        }
    }

    /// Source pixel (r, c) for each destination pixel, plus output dims.
    fn mapping(self, h: usize, w: usize) -> (usize, usize, Vec<(usize, usize)>) {
        match self {
            ExactPerm::HFlip => {
                let mut m = Vec::with_capacity(h * w);
                for r in 0..h {
                    for c in 0..w {
                        m.push((r, w - 1 - c));
                    }
                }
                (h, w, m)
            }
            ExactPerm::VFlip => {
                let mut m = Vec::with_capacity(h * w);
                for r in 0..h {
                    for c in 0..w {
                        m.push((h - 1 - r, c));
                    }
                }
                (h, w, m)
            }
            ExactPerm::Rot180 => {
                let mut m = Vec::with_capacity(h * w);
                for r in 0..h {
                    for c in 0..w {
                        m.push((h - 1 - r, w - 1 - c));
                    }
                }
                (h, w, m)
            }
            ExactPerm::Rot90 => {
                // out[r', c'] = in[h-1-c', r'], out dims (w, h)
                let mut m = Vec::with_capacity(h * w);
                for rp in 0..w {
                    for cp in 0..h {
                        m.push((h - 1 - cp, rp));
                    }
                }
                (w, h, m)
            }
            ExactPerm::Rot270 => {
                // out[r', c'] = in[c', w-1-r'], out dims (w, h)
                let mut m = Vec::with_capacity(h * w);
                for rp in 0..w {
                    for cp in 0..h {
                        m.push((cp, w - 1 - rp));
                    }
                }
                (w, h, m)
            }
        }
    }

    /// Apply to a plain (C, H, W) array.
    pub fn apply_array(self, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let (oh, ow, map) = self.mapping(h, w);
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for (dst, &(sr, sc)) in map.iter().enumerate() {
                out[[ci, dst / ow, dst % ow]] = x[[ci, sr, sc]];
            }
        }
        out
    }

    /// Apply to a (C, H, W) tensor as a tape op.
    pub fn apply_tensor(self, x: &Tensor) -> Tensor {
        let g = x.graph();
        let xv = as3(&x.value());
        let (c, h, w) = xv.dim();
        let (oh, ow, map) = self.mapping(h, w);
        let mut out = Array3::<f64>::zeros((c, oh, ow));
        for ci in 0..c {
            for (dst, &(sr, sc)) in map.iter().enumerate() {
                out[[ci, dst / ow, dst % ow]] = xv[[ci, sr, sc]];
            }
        }
        let out = out.into_dyn();
        if !g.grad_enabled() {
            return g.push_nograd(out);
        }
        let ix = x.id();
        g.push_op(
            out,
            Box::new(move |gout, _vals, grads| {
                let g3 = as3(gout);
                let mut dx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for (dst, &(sr, sc)) in map.iter().enumerate() {
                        dx[[ci, sr, sc]] += g3[[ci, dst / ow, dst % ow]];
                    }
                }
                crate::tensor::acc_grad(grads, ix, dx.into_dyn());
            }),
        )
    }
}

/// Rot90-family mapping of a ground-truth grid position under an exact
/// permutation of an (h, w) grid; used by tests.
pub fn permute_point(p: ExactPerm, h: usize, w: usize, r: usize, c: usize) -> (usize, usize) {
    match p {
        ExactPerm::HFlip => (r, w - 1 - c),
        ExactPerm::VFlip => (h - 1 - r, c),
        ExactPerm::Rot180 => (h - 1 - r, w - 1 - c),
        // dest (r', c') such that mapping hits (r, c)
        ExactPerm::Rot90 => (c, h - 1 - r),
        ExactPerm::Rot270 => (w - 1 - c, r),
    }
}
