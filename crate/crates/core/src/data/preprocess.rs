use crate::error::{Error, Result};
use crate::nn::functional::resize_bilinear_planes;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// One image/mask pair: image `[3, H, W]` in `[0, 1]`, mask `[1, H, W]`
/// with values in {0, 1}.
#[derive(Debug, Clone)]
pub struct SegSample {
    pub id: String,
    pub image: Tensor,
    pub mask: Tensor,
}

impl SegSample {
    pub fn new(id: impl Into<String>, image: Tensor, mask: Tensor) -> Result<Self> {
        let id = id.into();
        let ok = image.rank() == 3 && image.dim(0) == 3 && mask.rank() == 3 && mask.dim(0) == 1 && image.shape()[1..] == mask.shape()[1..];
        if !ok {
            return Err(Error::Data(format!(
                "sample `{id}`: image {:?} and mask {:?} do not agree",
                image.shape(),
                mask.shape()
            )));
        }
        if mask.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample `{id}`: mask is not binary")));
        }
        Ok(Self { id, image, mask })
    }

    pub fn height(&self) -> usize {
        self.image.dim(1)
    }

    pub fn width(&self) -> usize {
        self.image.dim(2)
    }
}

/// Where a square canvas came from, so predictions can be mapped back.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PadInfo {
    pub height: usize,
    pub width: usize,
    pub top: usize,
    pub left: usize,
}

impl PadInfo {
    pub fn for_size(height: usize, width: usize) -> Self {
        let side = height.max(width);
        Self {
            height,
            width,
            top: (side - height) / 2,
            left: (side - width) / 2,
        }
    }

    pub fn square(&self) -> usize {
        self.height.max(self.width)
    }

    fn pads(&self) -> [(usize, usize); 3] {
        let s = self.square();
        [
            (0, 0),
            (self.top, s - self.height - self.top),
            (self.left, s - self.width - self.left),
        ]
    }
}

/// Nearest-neighbour resampling of planar data (half-pixel centres).
pub fn resize_nearest_planes(x: &[f32], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let src = |o: usize, n_in: usize, n_out: usize| (((o as f64 + 0.5) * n_in as f64 / n_out as f64) as usize).min(n_in - 1);
    let ys: Vec<usize> = (0..oh).map(|o| src(o, h, oh)).collect();
    let xs: Vec<usize> = (0..ow).map(|o| src(o, w, ow)).collect();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let plane = &x[p * h * w..(p + 1) * h * w];
        for &y in &ys {
            out.extend(xs.iter().map(|&x| plane[y * w + x]));
        }
    }
    out
}

pub fn resize_image(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    if (h, w) == (oh, ow) {
        return t.detach();
    }
    Tensor::from_vec(resize_bilinear_planes(&t.data(), c, h, w, oh, ow), &[c, oh, ow]).expect("resized size")
}

pub fn resize_mask(t: &Tensor, oh: usize, ow: usize) -> Tensor {
    let (c, h, w) = (t.dim(0), t.dim(1), t.dim(2));
    Tensor::from_vec(resize_nearest_planes(&t.data(), c, h, w, oh, ow), &[c, oh, ow]).expect("resized size")
}

/// Zero-pads the shorter side symmetrically (extra row/column goes to the
/// bottom/right), then resizes to `side`×`side`: bilinear for the image,
/// nearest for the mask.
pub fn pad_to_square_resize(s: &SegSample, side: usize) -> Result<(SegSample, PadInfo)> {
    let info = PadInfo::for_size(s.height(), s.width());
    let pads = info.pads();
    let image = resize_image(&s.image.pad(&pads)?, side, side);
    let mask = resize_mask(&s.mask.pad(&pads)?, side, side);
    Ok((
        SegSample {
            id: s.id.clone(),
            image,
            mask,
        },
        info,
    ))
}

/// Maps a `[1, side, side]` probability map back to the original frame.
pub fn restore_original(prob: &Tensor, info: PadInfo) -> Result<Tensor> {
    let s = info.square();
    resize_image(prob, s, s).crop(&info.pads())
}

/// Admissible multiscale sides: multiples of 32 from 0.75× to 1.25× of 256.
pub const SCALES: [usize; 5] = [192, 224, 256, 288, 320];

pub fn draw_scale(rng: &mut Rng) -> usize {
    SCALES[rng.below(SCALES.len())]
}

pub fn resize_sample(s: &SegSample, side: usize) -> SegSample {
    SegSample {
        id: s.id.clone(),
        image: resize_image(&s.image, side, side),
        mask: resize_mask(&s.mask, side, side),
    }
}

/// Re-samples a canonical square sample at a random admissible side.
pub fn multiscale_resize(s: &SegSample, rng: &mut Rng) -> SegSample {
    resize_sample(s, draw_scale(rng))
}

/// Stacks samples of equal size into `[B, 3, H, W]` and `[B, 1, H, W]`.
pub fn stack(samples: &[&SegSample]) -> Result<(Tensor, Tensor)> {
    let first = samples.first().ok_or_else(|| Error::Data("cannot stack an empty batch".into()))?;
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(samples.len() * 3 * h * w);
    let mut msk = Vec::with_capacity(samples.len() * h * w);
    for s in samples {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Data(format!("sample `{}` is {}×{}, batch is {h}×{w}", s.id, s.height(), s.width())));
        }
        img.extend_from_slice(&s.image.data());
        msk.extend_from_slice(&s.mask.data());
    }
    let b = samples.len();
    Ok((Tensor::from_vec(img, &[b, 3, h, w])?, Tensor::from_vec(msk, &[b, 1, h, w])?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(h: usize, w: usize) -> SegSample {
        let img = Tensor::from_vec((0..3 * h * w).map(|i| (i % 7) as f32 / 7.0).collect(), &[3, h, w]).unwrap();
        let mask = Tensor::from_vec((0..h * w).map(|i| (i % 3 == 0) as u8 as f32).collect(), &[1, h, w]).unwrap();
        SegSample::new("s", img, mask).unwrap()
    }

    #[test]
    fn cvc_sized_input_pads_evenly() {
        let s = sample(288, 384);
        let (out, info) = pad_to_square_resize(&s, 256).unwrap();
        assert_eq!((info.top, info.left, info.square()), (48, 0, 384));
        assert_eq!(out.image.shape(), &[3, 256, 256]);
        assert_eq!(out.mask.shape(), &[1, 256, 256]);
        assert!(out.mask.to_vec().iter().all(|&v| v == 0.0 || v == 1.0));
        // padded rows are black
        let (padded, _) = pad_to_square_resize(&s, 384).unwrap();
        assert!(padded.image.to_vec()[..48 * 384].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn square_input_is_only_resized_and_idempotent() {
        let s = sample(64, 64);
        let (out, info) = pad_to_square_resize(&s, 32).unwrap();
        assert_eq!((info.top, info.left), (0, 0));
        let (again, _) = pad_to_square_resize(&out, 32).unwrap();
        assert!(again.image.bitwise_eq(&out.image));
        assert!(again.mask.bitwise_eq(&out.mask));
    }

    #[test]
    fn restore_returns_original_frame() {
        let s = sample(288, 384);
        let (out, info) = pad_to_square_resize(&s, 256).unwrap();
        let back = restore_original(&out.mask, info).unwrap();
        assert_eq!(back.shape(), &[1, 288, 384]);
    }

    #[test]
    fn scales_are_uniform_and_aligned() {
        let mut r = Rng::new(42);
        let mut counts = [0usize; 5];
        for _ in 0..10_000 {
            let side = draw_scale(&mut r);
            assert_eq!(side % 32, 0);
            counts[SCALES.iter().position(|&s| s == side).unwrap()] += 1;
        }
        for c in counts {
            assert!((c as f64 / 10_000.0 - 0.2).abs() <= 0.02);
        }
        let a: Vec<usize> = (0..20).map(|_| draw_scale(&mut Rng::new(5))).collect();
        assert!(a.iter().all(|&s| s == a[0]));
    }

    #[test]
    fn multiscale_keeps_binarity_and_agreement() {
        let (s, _) = pad_to_square_resize(&sample(40, 50), 256).unwrap();
        let mut r = Rng::new(1);
        for _ in 0..5 {
            let m = multiscale_resize(&s, &mut r);
            assert_eq!(m.image.shape()[1..], m.mask.shape()[1..]);
            assert!(m.mask.to_vec().iter().all(|&v| v == 0.0 || v == 1.0));
        }
    }

    #[test]
    fn stacking_checks_sizes() {
        let (a, b) = (sample(4, 4), sample(4, 4));
        let (img, msk) = stack(&[&a, &b]).unwrap();
        assert_eq!(img.shape(), &[2, 3, 4, 4]);
        assert_eq!(msk.shape(), &[2, 1, 4, 4]);
        assert!(stack(&[&a, &sample(4, 5)]).is_err());
        assert!(SegSample::new("x", Tensor::zeros(&[3, 2, 2]), Tensor::full(&[1, 2, 2], 0.5)).is_err());
    }
}
