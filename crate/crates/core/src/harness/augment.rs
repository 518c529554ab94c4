use crate::rng::Rng;
use crate::tensor::Tensor;

/// Maximum translation in pixels along each axis.
pub const MAX_SHIFT: i64 = 2;

/// Mirrors each `[C, H, W]` plane left-right.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (h, w) = (img.dim(img.ndim() - 2), img.dim(img.ndim() - 1));
    let mut out = img.clone();
    for (dst, src) in out.data_mut().chunks_exact_mut(w).zip(img.data().chunks_exact(w)) {
        for x in 0..w {
            dst[x] = src[w - 1 - x];
        }
    }
    debug_assert_eq!(img.len() % (h * w), 0);
    out
}

/// Shifts content by `(dy, dx)` pixels, filling uncovered pixels with zero.
pub fn translate(img: &Tensor, dy: i64, dx: i64) -> Tensor {
    let (h, w) = (img.dim(img.ndim() - 2) as i64, img.dim(img.ndim() - 1) as i64);
    let mut out = Tensor::zeros(img.shape());
    for (dst, src) in out
        .data_mut()
        .chunks_exact_mut((h * w) as usize)
        .zip(img.data().chunks_exact((h * w) as usize))
    {
        for y in 0..h {
            let sy = y - dy;
            if !(0..h).contains(&sy) {
                continue;
            }
            for x in 0..w {
                let sx = x - dx;
                if (0..w).contains(&sx) {
                    dst[(y * w + x) as usize] = src[(sy * w + sx) as usize];
                }
            }
        }
    }
    out
}

/// Random horizontal flip (p = 0.5) and integer translation in
/// `[-2, 2]^2`, applied identically to both regions.
pub fn augment(roi: &Tensor, cr: &Tensor, rng: &mut Rng) -> (Tensor, Tensor) {
    let flip = rng.bernoulli(0.5);
    let dy = rng.int_inclusive(-MAX_SHIFT, MAX_SHIFT);
    let dx = rng.int_inclusive(-MAX_SHIFT, MAX_SHIFT);
    let apply = |t: &Tensor| {
        let t = if flip { flip_horizontal(t) } else { t.clone() };
        if dy == 0 && dx == 0 {
            t
        } else {
            translate(&t, dy, dx)
        }
    };
    (apply(roi), apply(cr))
}
