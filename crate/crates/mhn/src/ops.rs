//! Layer kernels with pinned numerics.
//!
//! Every kernel accumulates in 32-bit reals with a fixed summation order,
//! so identical inputs give bit-identical outputs across runs and
//! platforms. Convolution sums in `(channel, kernel-row, kernel-col)`
//! order per output value; bilinear upsampling uses the
//! align-corners-false coordinate rule; ROI pooling rounds coordinates
//! half away from zero.

use crate::bbox::BBox;
use crate::tensor::Tensor4;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum OpError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("degenerate roi: {0}")]
    DegenerateRoi(String),
}

/// Output extent of a convolution axis under the floor convention.
pub fn conv_out_size(input: usize, kernel: u32, stride: u32, padding: u32, dilation: u32) -> usize {
    let span = dilation as i64 * (kernel as i64 - 1) + 1;
    let num = input as i64 + 2 * padding as i64 - span;
    if num < 0 {
        0
    } else {
        (num / stride as i64 + 1) as usize
    }
}

/// 2-D convolution with zero padding and dilation.
///
/// `weights` is laid out `(out_c, in_c, kh, kw)`; `bias` has one entry per
/// output channel.
pub fn conv2d(
    x: &Tensor4,
    weights: &Tensor4,
    bias: &[f32],
    stride: u32,
    dilation: u32,
    padding: (u32, u32),
) -> Result<Tensor4, OpError> {
    let (n, in_c, h, w) = x.dims();
    let (out_c, wc, kh, kw) = weights.dims();
    if wc != in_c {
        return Err(OpError::ShapeMismatch(format!(
            "conv expects {wc} input channels, feature map has {in_c}"
        )));
    }
    if bias.len() != out_c {
        return Err(OpError::ShapeMismatch(format!(
            "conv has {out_c} output channels but {} bias entries",
            bias.len()
        )));
    }
    let oh = conv_out_size(h, kh as u32, stride, padding.0, dilation);
    let ow = conv_out_size(w, kw as u32, stride, padding.1, dilation);
    if oh == 0 || ow == 0 {
        return Err(OpError::ShapeMismatch(format!(
            "conv output would be empty for input {h}x{w} with kernel {kh}x{kw}"
        )));
    }
    let mut out = Tensor4::zeros(n, out_c, oh, ow);
    let s = stride as usize;
    let d = dilation as usize;
    for b in 0..n {
        for oc in 0..out_c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f32;
                    for ic in 0..in_c {
                        for ky in 0..kh {
                            let iy = (oy * s + ky * d) as i64 - padding.0 as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * s + kx * d) as i64 - padding.1 as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                acc += x.at(b, ic, iy as usize, ix as usize)
                                    * weights.at(oc, ic, ky, kx);
                            }
                        }
                    }
                    out.set(b, oc, oy, ox, acc + bias[oc]);
                }
            }
        }
    }
    Ok(out)
}

/// Per-window maximum with floor division for the output extent.
pub fn maxpool2d(x: &Tensor4, kernel: (u32, u32), stride: u32) -> Result<Tensor4, OpError> {
    let (n, c, h, w) = x.dims();
    let (kh, kw) = (kernel.0 as usize, kernel.1 as usize);
    if h < kh || w < kw {
        return Err(OpError::ShapeMismatch(format!(
            "pool kernel {kh}x{kw} exceeds input {h}x{w}"
        )));
    }
    let s = stride as usize;
    let oh = (h - kh) / s + 1;
    let ow = (w - kw) / s + 1;
    let mut out = Tensor4::zeros(n, c, oh, ow);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut m = f32::NEG_INFINITY;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            m = m.max(x.at(b, ch, oy * s + ky, ox * s + kx));
                        }
                    }
                    out.set(b, ch, oy, ox, m);
                }
            }
        }
    }
    Ok(out)
}

/// Bilinear x2 upsampling, align-corners-false: the source coordinate of
/// output cell `d` is `(d + 0.5) / 2 - 0.5`, clamped to the input range.
pub fn upsample_bilinear_x2(x: &Tensor4) -> Tensor4 {
    let (n, c, h, w) = x.dims();
    let (oh, ow) = (h * 2, w * 2);
    let mut out = Tensor4::zeros(n, c, oh, ow);
    // Precompute per-axis source cells and blend weights.
    let axis = |len: usize, out_len: usize| -> Vec<(usize, usize, f32)> {
        (0..out_len)
            .map(|d| {
                let src = (d as f32 + 0.5) / 2.0 - 0.5;
                let lo = src.floor();
                let t = src - lo;
                let i0 = (lo.max(0.0) as usize).min(len - 1);
                let i1 = ((lo as i64 + 1).max(0) as usize).min(len - 1);
                (i0, i1, t)
            })
            .collect()
    };
    let ys = axis(h, oh);
    let xs = axis(w, ow);
    for b in 0..n {
        for ch in 0..c {
            for (oy, &(y0, y1, ty)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, tx)) in xs.iter().enumerate() {
                    let top = x.at(b, ch, y0, x0) * (1.0 - tx) + x.at(b, ch, y0, x1) * tx;
                    let bot = x.at(b, ch, y1, x0) * (1.0 - tx) + x.at(b, ch, y1, x1) * tx;
                    out.set(b, ch, oy, ox, top * (1.0 - ty) + bot * ty);
                }
            }
        }
    }
    out
}

/// Pointwise sum; both operands must have identical dims.
pub fn elementwise_add(a: &Tensor4, b: &Tensor4) -> Result<Tensor4, OpError> {
    if a.dims() != b.dims() {
        return Err(OpError::ShapeMismatch(format!(
            "add operands have dims {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let mut out = a.clone();
    for (o, v) in out.data_mut().iter_mut().zip(b.data()) {
        *o += v;
    }
    Ok(out)
}

pub fn relu(x: &Tensor4) -> Tensor4 {
    let mut out = x.clone();
    for v in out.data_mut() {
        *v = v.max(0.0);
    }
    out
}

fn round_away(v: f32) -> i64 {
    // f32::round is round-half-away-from-zero.
    v.round() as i64
}

/// Max-pool an ROI given in input-pixel coordinates into an `out` grid.
///
/// The box is divided by `feat_stride` with round-half-away-from-zero,
/// clamped to the feature bounds, and partitioned into bins at rounded
/// proportional boundaries. Empty bins yield 0.
pub fn roi_pool(
    feat: &Tensor4,
    roi: &BBox,
    feat_stride: u32,
    out: (usize, usize),
) -> Result<Tensor4, OpError> {
    let (n, c, h, w) = feat.dims();
    if roi.x2 <= roi.x1 || roi.y2 <= roi.y1 {
        return Err(OpError::DegenerateRoi(format!(
            "roi ({}, {}, {}, {}) has no area",
            roi.x1, roi.y1, roi.x2, roi.y2
        )));
    }
    let s = feat_stride as f32;
    let gx1 = round_away(roi.x1 / s);
    let gy1 = round_away(roi.y1 / s);
    let gx2 = round_away(roi.x2 / s);
    let gy2 = round_away(roi.y2 / s);
    if gx1 >= w as i64 && gx2 >= w as i64 || gx1 < 0 && gx2 < 0 {
        return Err(OpError::DegenerateRoi("roi lies outside the feature map".into()));
    }
    if gy1 >= h as i64 && gy2 >= h as i64 || gy1 < 0 && gy2 < 0 {
        return Err(OpError::DegenerateRoi("roi lies outside the feature map".into()));
    }
    let cx1 = gx1.clamp(0, w as i64 - 1) as usize;
    let cy1 = gy1.clamp(0, h as i64 - 1) as usize;
    let cx2 = gx2.clamp(cx1 as i64, w as i64 - 1) as usize;
    let cy2 = gy2.clamp(cy1 as i64, h as i64 - 1) as usize;
    let cells_w = cx2 - cx1 + 1;
    let cells_h = cy2 - cy1 + 1;
    let (oh, ow) = out;
    let mut pooled = Tensor4::zeros(n, c, oh, ow);
    let bound = |j: usize, bins: usize, cells: usize| -> usize {
        ((j as f64 * cells as f64 / bins as f64).round()) as usize
    };
    for b in 0..n {
        for ch in 0..c {
            for by in 0..oh {
                let y_start = cy1 + bound(by, oh, cells_h);
                let y_end = cy1 + bound(by + 1, oh, cells_h);
                for bx in 0..ow {
                    let x_start = cx1 + bound(bx, ow, cells_w);
                    let x_end = cx1 + bound(bx + 1, ow, cells_w);
                    let mut m = f32::NEG_INFINITY;
                    for y in y_start..y_end {
                        for x in x_start..x_end {
                            m = m.max(feat.at(b, ch, y, x));
                        }
                    }
                    if !m.is_finite() {
                        m = 0.0; // empty bin
                    }
                    pooled.set(b, ch, by, bx, m);
                }
            }
        }
    }
    Ok(pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(n: usize, c: usize, h: usize, w: usize, data: &[f32]) -> Tensor4 {
        Tensor4::from_vec(n, c, h, w, data.to_vec()).unwrap()
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor4::filled(1, 1, 3, 3, 1.0);
        let w = t(1, 1, 1, 1, &[1.0]);
        let y = conv2d(&x, &w, &[0.0], 1, 1, (0, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_dilated_impulse_hits_nine_taps() {
        // Impulse at the center of a 5x5 map, 3x3 ones kernel with
        // dilation 2 and padding 2: ones appear exactly at the taps.
        let mut x = Tensor4::zeros(1, 1, 5, 5);
        x.set(0, 0, 2, 2, 1.0);
        let w = Tensor4::filled(1, 1, 3, 3, 1.0);
        let y = conv2d(&x, &w, &[0.0], 1, 2, (2, 2)).unwrap();
        assert_eq!(y.dims(), (1, 1, 5, 5));
        for iy in 0..5 {
            for ix in 0..5 {
                let expect = if iy % 2 == 0 && ix % 2 == 0 { 1.0 } else { 0.0 };
                assert_eq!(y.at(0, 0, iy, ix), expect, "at ({iy},{ix})");
            }
        }
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let x = Tensor4::zeros(1, 2, 4, 4);
        let w = Tensor4::filled(3, 2, 3, 3, 0.7);
        let y = conv2d(&x, &w, &[0.5, -1.5, 2.0], 1, 1, (1, 1)).unwrap();
        for oc in 0..3 {
            for iy in 0..4 {
                for ix in 0..4 {
                    assert_eq!(y.at(0, oc, iy, ix), [0.5, -1.5, 2.0][oc]);
                }
            }
        }
    }

    #[test]
    fn conv_linearity_with_zero_bias() {
        let x = t(1, 1, 3, 3, &[0.5, -1.0, 2.0, 0.25, 1.5, -0.75, 3.0, -2.0, 0.125]);
        let w = t(1, 1, 3, 3, &[0.5, 0.25, -0.5, 1.0, -1.0, 0.75, 0.125, 0.5, -0.25]);
        let y1 = conv2d(&x, &w, &[0.0], 1, 1, (1, 1)).unwrap();
        let mut x2 = x.clone();
        for v in x2.data_mut() {
            *v *= 4.0;
        }
        let y2 = conv2d(&x2, &w, &[0.0], 1, 1, (1, 1)).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert_eq!(a * 4.0, *b);
        }
    }

    #[test]
    fn conv_channel_mismatch_rejected() {
        let x = Tensor4::zeros(1, 3, 4, 4);
        let w = Tensor4::zeros(1, 2, 3, 3);
        assert!(matches!(conv2d(&x, &w, &[0.0], 1, 1, (1, 1)), Err(OpError::ShapeMismatch(_))));
    }

    #[test]
    fn pool_constant_map_halves() {
        let x = Tensor4::filled(1, 1, 4, 4, 3.5);
        let y = maxpool2d(&x, (2, 2), 2).unwrap();
        assert_eq!(y, Tensor4::filled(1, 1, 2, 2, 3.5));
    }

    #[test]
    fn pool_window_max() {
        let x = t(1, 1, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let y = maxpool2d(&x, (2, 2), 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
    }

    #[test]
    fn pool_counting_grid_matches_loop() {
        let data: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        let x = t(1, 1, 4, 4, &data);
        let y = maxpool2d(&x, (2, 2), 2).unwrap();
        // reference loop over windows
        let mut expect = vec![0.0f32; 4];
        for oy in 0..2 {
            for ox in 0..2 {
                let mut m = f32::NEG_INFINITY;
                for ky in 0..2 {
                    for kx in 0..2 {
                        m = m.max(data[(oy * 2 + ky) * 4 + ox * 2 + kx]);
                    }
                }
                expect[oy * 2 + ox] = m;
            }
        }
        assert_eq!(y.data(), expect.as_slice());
    }

    #[test]
    fn upsample_constant_stays_constant() {
        let x = Tensor4::filled(1, 2, 3, 3, 0.7);
        let y = upsample_bilinear_x2(&x);
        assert_eq!(y.dims(), (1, 2, 6, 6));
        for v in y.data() {
            assert_eq!(*v, 0.7);
        }
    }

    #[test]
    fn upsample_single_cell_replicates() {
        let x = t(1, 1, 1, 1, &[4.25]);
        let y = upsample_bilinear_x2(&x);
        assert_eq!(y.data(), &[4.25; 4]);
    }

    #[test]
    fn upsample_two_by_two_closed_form() {
        // Per-pixel evaluation of the coordinate rule for [[0,1],[2,3]].
        let x = t(1, 1, 2, 2, &[0.0, 1.0, 2.0, 3.0]);
        let y = upsample_bilinear_x2(&x);
        #[rustfmt::skip]
        let expect = [
            0.0,  0.25, 0.75, 1.0,
            0.5,  0.75, 1.25, 1.5,
            1.5,  1.75, 2.25, 2.5,
            2.0,  2.25, 2.75, 3.0,
        ];
        for (a, b) in y.data().iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-6, "{:?}", y.data());
        }
    }

    #[test]
    fn add_zero_is_identity_and_shapes_checked() {
        let x = t(1, 1, 2, 2, &[1.0, -2.0, 3.0, -4.0]);
        let z = Tensor4::zeros(1, 1, 2, 2);
        assert_eq!(elementwise_add(&x, &z).unwrap(), x);
        let bad = Tensor4::zeros(1, 1, 2, 3);
        assert!(matches!(elementwise_add(&x, &bad), Err(OpError::ShapeMismatch(_))));
    }

    #[test]
    fn relu_clamps_negatives() {
        let x = t(1, 1, 1, 4, &[-1.0, 0.0, 2.5, -0.001]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.5, 0.0]);
    }

    #[test]
    fn roi_full_map_identity() {
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let x = t(1, 1, 4, 4, &data);
        let roi = BBox::new(0.0, 0.0, 16.0, 16.0);
        let y = roi_pool(&x, &roi, 4, (4, 4)).unwrap();
        assert_eq!(y.data(), data.as_slice());
    }

    #[test]
    fn roi_constant_map_pools_constant() {
        let x = Tensor4::filled(1, 3, 8, 8, 2.5);
        let roi = BBox::new(3.0, 3.0, 30.0, 30.0);
        let y = roi_pool(&x, &roi, 4, (7, 7)).unwrap();
        for v in y.data() {
            assert_eq!(*v, 2.5);
        }
    }

    #[test]
    fn roi_quadrant_maxima() {
        let data: Vec<f32> = (1..=16).map(|v| v as f32).collect();
        let x = t(1, 1, 4, 4, &data);
        let roi = BBox::new(0.0, 0.0, 4.0, 4.0);
        let y = roi_pool(&x, &roi, 1, (2, 2)).unwrap();
        assert_eq!(y.data(), &[6.0, 8.0, 14.0, 16.0]);
    }

    #[test]
    fn roi_outside_map_is_degenerate() {
        let x = Tensor4::zeros(1, 1, 4, 4);
        let roi = BBox::new(100.0, 100.0, 120.0, 120.0);
        assert!(matches!(roi_pool(&x, &roi, 1, (2, 2)), Err(OpError::DegenerateRoi(_))));
        let flat = BBox::new(2.0, 2.0, 2.0, 6.0);
        assert!(matches!(roi_pool(&x, &flat, 1, (2, 2)), Err(OpError::DegenerateRoi(_))));
    }
}
