//! Image-plane resampling helpers shared by augmentation, TTA and rendering.
//!
//! The bilinear tables are mirror-symmetric by construction: entry i of a
//! length-n table is the exact mirror of entry n-1-i. That makes
//! resize(flip(x)) == flip(resize(x)) hold bitwise, which the TTA
//! flip-equivariance guarantee relies on.

/// One output coordinate's source cell: (i0, i1, weight of i1).
pub type Cell = (usize, usize, f64);

/// Symmetric bilinear table (half-pixel-centres convention).
pub fn bilinear_table(src: usize, dst: usize) -> Vec<Cell> {
    let mut table = vec![(0usize, 0usize, 0.0f64); dst];
    let scale = src as f64 / dst as f64;
    let half = dst.div_ceil(2);
    for (i, slot) in table.iter_mut().enumerate().take(half) {
        let pos = (i as f64 + 0.5) * scale - 0.5;
        *slot = if pos <= 0.0 {
            (0, 0, 0.0)
        } else if pos >= (src - 1) as f64 {
            (src - 1, src - 1, 0.0)
        } else {
            let i0 = pos.floor() as usize;
            (i0, i0 + 1, pos - i0 as f64)
        };
    }
    for i in half..dst {
        let (j0, j1, f) = table[dst - 1 - i];
        table[i] = (src - 1 - j1, src - 1 - j0, if j0 == j1 { 0.0 } else { 1.0 - f });
    }
    table
}

/// Bilinear resize of an interleaved `ch`-channel image.
pub fn resize_channels_f32(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    ch: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    if src_w == dst_w && src_h == dst_h {
        return src.to_vec();
    }
    let xt = bilinear_table(src_w, dst_w);
    let yt = bilinear_table(src_h, dst_h);
    let mut out = vec![0.0f32; dst_w * dst_h * ch];
    for (y, &(y0, y1, fy)) in yt.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xt.iter().enumerate() {
            for c in 0..ch {
                let a = src[(y0 * src_w + x0) * ch + c] as f64;
                let b = src[(y0 * src_w + x1) * ch + c] as f64;
                let cc = src[(y1 * src_w + x0) * ch + c] as f64;
                let d = src[(y1 * src_w + x1) * ch + c] as f64;
                let v = (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * cc + fx * d);
                out[(y * dst_w + x) * ch + c] = v as f32;
            }
        }
    }
    out
}

/// Bilinear resize of a single-channel f64 map.
pub fn resize_f64(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    if src_w == dst_w && src_h == dst_h {
        return src.to_vec();
    }
    let xt = bilinear_table(src_w, dst_w);
    let yt = bilinear_table(src_h, dst_h);
    let mut out = vec![0.0f64; dst_w * dst_h];
    for (y, &(y0, y1, fy)) in yt.iter().enumerate() {
        for (x, &(x0, x1, fx)) in xt.iter().enumerate() {
            let a = src[y0 * src_w + x0];
            let b = src[y0 * src_w + x1];
            let cc = src[y1 * src_w + x0];
            let d = src[y1 * src_w + x1];
            out[y * dst_w + x] =
                (1.0 - fy) * ((1.0 - fx) * a + fx * b) + fy * ((1.0 - fx) * cc + fx * d);
        }
    }
    out
}

/// Nearest-neighbour resize (exact value transport, used where annotations
/// must stay bit-consistent).
pub fn resize_nearest<T: Copy>(
    src: &[T],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<T> {
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for y in 0..dst_h {
        let sy = nearest_index(y, src_h, dst_h);
        for x in 0..dst_w {
            let sx = nearest_index(x, src_w, dst_w);
            out.push(src[sy * src_w + sx]);
        }
    }
    out
}

fn nearest_index(i: usize, src: usize, dst: usize) -> usize {
    // floor((i + 0.5) * src / dst) via integer arithmetic
    (((2 * i + 1) * src) / (2 * dst)).min(src - 1)
}

/// Horizontal mirror of an interleaved `ch`-channel image.
pub fn flip_horizontal<T: Copy>(src: &[T], w: usize, h: usize, ch: usize) -> Vec<T> {
    let mut out = src.to_vec();
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                out[(y * w + x) * ch + c] = src[(y * w + (w - 1 - x)) * ch + c];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_is_mirror_symmetric() {
        for (src, dst) in [(128, 64), (64, 128), (96, 64), (64, 448), (320, 448)] {
            let t = bilinear_table(src, dst);
            for i in 0..dst {
                let (a0, a1, af) = t[i];
                let (b0, b1, bf) = t[dst - 1 - i];
                assert_eq!(a0, src - 1 - b1);
                assert_eq!(a1, src - 1 - b0);
                if a0 == a1 {
                    assert_eq!(af, bf);
                } else {
                    assert_eq!(af, 1.0 - bf, "src={src} dst={dst} i={i}");
                }
            }
        }
    }

    #[test]
    fn resize_commutes_with_flip_bitwise() {
        let (w, h) = (10, 6);
        let src: Vec<f64> = (0..w * h).map(|i| (i as f64 * 0.37).sin()).collect();
        for (dw, dh) in [(7, 4), (20, 12), (10, 6)] {
            let a = resize_f64(&flip_horizontal(&src, w, h, 1), w, h, dw, dh);
            let b = flip_horizontal(&resize_f64(&src, w, h, dw, dh), dw, dh, 1);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn identity_resize_is_noop() {
        let src: Vec<f32> = (0..24).map(|i| i as f32).collect();
        assert_eq!(resize_channels_f32(&src, 4, 2, 3, 4, 2), src);
    }

    #[test]
    fn double_flip_is_identity() {
        let src: Vec<f32> = (0..30).map(|i| i as f32 * 1.5).collect();
        let once = flip_horizontal(&src, 5, 2, 3);
        let twice = flip_horizontal(&once, 5, 2, 3);
        assert_eq!(src, twice);
    }
}
