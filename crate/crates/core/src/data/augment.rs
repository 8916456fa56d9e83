use rand::Rng;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentPolicy {
    /// Mirror each image left-right with probability 0.5.
    pub flip: bool,
    /// Reflect-pad by this many pixels, then crop a random window of the
    /// original size. Zero disables cropping.
    pub crop_padding: usize,
}

impl AugmentPolicy {
    pub fn identity() -> Self {
        AugmentPolicy::default()
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.crop_padding == 0
    }
}

/// Mirror index into `0..n` for offsets up to `n - 1` outside the range.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 { -i } else if i >= n { 2 * (n - 1) - i } else { i };
    r.clamp(0, n - 1) as usize
}

/// Applies `policy` to an `[N, C, H, W]` batch. Other ranks pass through.
pub fn augment_batch<R: Rng + ?Sized>(x: &Tensor, policy: &AugmentPolicy, rng: &mut R) -> Tensor {
    if policy.is_identity() || x.rank() != 4 {
        return x.clone();
    }
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let p = policy.crop_padding as i64;
    let mut out = x.clone();
    let src = x.data();
    let dst = out.data_mut();
    for e in 0..n {
        let flip = policy.flip && rng.random_bool(0.5);
        let (dy, dx) = if p > 0 { (rng.random_range(-p..=p) as isize, rng.random_range(-p..=p) as isize) } else { (0, 0) };
        for ch in 0..c {
            let base = (e * c + ch) * h * w;
            for r in 0..h {
                let sr = reflect(r as isize + dy, h);
                for col in 0..w {
                    let sc = reflect(col as isize + dx, w);
                    let sc = if flip { w - 1 - sc } else { sc };
                    dst[base + r * w + col] = src[base + sr * w + sc];
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    #[test]
    fn reflect_mirrors_without_repeating_edge() {
        assert_eq!(reflect(-1, 5), 1);
        assert_eq!(reflect(-2, 5), 2);
        assert_eq!(reflect(5, 5), 3);
        assert_eq!(reflect(6, 5), 2);
        assert_eq!(reflect(3, 5), 3);
    }

    #[test]
    fn flip_twice_is_identity() {
        let x = Tensor::randn(&[2, 3, 4, 5], &mut seed::rng(0, "x"));
        let flip = AugmentPolicy { flip: true, crop_padding: 0 };
        // With a shared seed the same examples get flipped both times.
        let once = augment_batch(&x, &flip, &mut seed::rng(1, "a"));
        let twice = augment_batch(&once, &flip, &mut seed::rng(1, "a"));
        assert_eq!(twice, x);
    }
}
