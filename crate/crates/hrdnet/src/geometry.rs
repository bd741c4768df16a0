//! Image pyramids, alignment padding and quadrant cropping.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::Real;

/// Axis-aligned box, (x, y) top-left corner plus width/height, in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    /// Intersection rectangle, if non-degenerate.
    pub fn intersect(&self, other: &BBox) -> Option<BBox> {
        let x1 = self.x.max(other.x);
        let y1 = self.y.max(other.y);
        let x2 = self.x2().min(other.x2());
        let y2 = self.y2().min(other.y2());
        if x2 > x1 && y2 > y1 {
            Some(BBox::new(x1, y1, x2 - x1, y2 - y1))
        } else {
            None
        }
    }

    /// Clip to an image of the given size, returning None when degenerate.
    pub fn clip_to(&self, width: f64, height: f64) -> Option<BBox> {
        self.intersect(&BBox::new(0.0, 0.0, width, height))
    }
}

/// An image plus its ground-truth boxes and class labels.
#[derive(Debug, Clone)]
pub struct AnnotatedImage<F = f32> {
    pub image: Array3<F>,
    pub boxes: Vec<BBox>,
    pub labels: Vec<usize>,
}

/// Ordered list of resized copies of one source image; member `i` has
/// spatial size `round(alpha^i * base_size)`.
#[derive(Debug, Clone)]
pub struct ImagePyramid<F> {
    pub images: Vec<Array3<F>>,
    pub alpha: f64,
    pub base_size: (usize, usize),
}

impl<F: Real> ImagePyramid<F> {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Bilinear resize (half-pixel centers, no corner alignment).
pub fn resize_bilinear<F: Real>(image: &Array3<F>, out_h: usize, out_w: usize) -> Array3<F> {
    let (c, h, w) = image.dim();
    if (out_h, out_w) == (h, w) {
        return image.clone();
    }
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let mut out = Array3::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let fy = F::from_f64(sy - y0 as f64);
        for ox in 0..out_w {
            let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let fx = F::from_f64(sx - x0 as f64);
            let one = F::one();
            for ci in 0..c {
                let v = image[[ci, y0, x0]] * (one - fy) * (one - fx)
                    + image[[ci, y0, x1]] * (one - fy) * fx
                    + image[[ci, y1, x0]] * fy * (one - fx)
                    + image[[ci, y1, x1]] * fy * fx;
                out[[ci, oy, ox]] = v;
            }
        }
    }
    out
}

/// Build the image pyramid fed to the parallel streams. Member 0 is the
/// input itself; deeper members shrink by `alpha` per step.
pub fn build_pyramid<F: Real>(
    image: &Array3<F>,
    n_streams: usize,
    alpha: f64,
) -> Result<ImagePyramid<F>> {
    let (_, h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!(
            "image has non-positive dimensions {h}x{w}"
        )));
    }
    if n_streams < 1 {
        return Err(Error::InvalidInput("n_streams must be >= 1".into()));
    }
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::InvalidInput(format!("alpha {alpha} not in (0, 1]")));
    }
    if alpha == 0.5 && n_streams > 1 {
        let divisor = 1usize << (n_streams - 1);
        if h % divisor != 0 || w % divisor != 0 {
            return Err(Error::Alignment(format!(
                "image {h}x{w} not divisible by {divisor} (needed for a {n_streams}-member pyramid)"
            )));
        }
    }
    let mut images = Vec::with_capacity(n_streams);
    images.push(image.clone());
    for i in 1..n_streams {
        let scale = alpha.powi(i as i32);
        let hi = (scale * h as f64).round() as usize;
        let wi = (scale * w as f64).round() as usize;
        if hi == 0 || wi == 0 {
            return Err(Error::InvalidInput(format!(
                "pyramid member {i} would be empty ({hi}x{wi})"
            )));
        }
        images.push(resize_bilinear(image, hi, wi));
    }
    Ok(ImagePyramid {
        images,
        alpha,
        base_size: (h, w),
    })
}

/// Divisor that keeps every stream's coarsest feature map integral.
pub fn alignment_divisor(n_streams: usize, max_stride: usize) -> usize {
    max_stride << (n_streams - 1)
}

/// Zero-pad bottom/right so the dims divide `max_stride * 2^(n_streams-1)`.
/// Returns the padded image and the (pad_h, pad_w) amounts.
pub fn pad_to_alignment<F: Real>(
    image: &Array3<F>,
    n_streams: usize,
    alpha: f64,
    max_stride: usize,
) -> Result<(Array3<F>, (usize, usize))> {
    if alpha != 0.5 {
        return Err(Error::Config(format!(
            "alignment padding assumes alpha = 0.5, got {alpha}"
        )));
    }
    if n_streams < 1 || max_stride == 0 {
        return Err(Error::InvalidInput(
            "n_streams and max_stride must be positive".into(),
        ));
    }
    let (c, h, w) = image.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput(format!(
            "image has non-positive dimensions {h}x{w}"
        )));
    }
    let divisor = alignment_divisor(n_streams, max_stride);
    let target_h = h.div_ceil(divisor) * divisor;
    let target_w = w.div_ceil(divisor) * divisor;
    if (target_h, target_w) == (h, w) {
        return Ok((image.clone(), (0, 0)));
    }
    let mut padded = Array3::zeros((c, target_h, target_w));
    padded
        .slice_mut(ndarray::s![.., ..h, ..w])
        .assign(image);
    Ok((padded, (target_h - h, target_w - w)))
}

/// Fraction of a clipped box's area that must survive for the box to be
/// kept in a quadrant patch.
pub const MIN_RETAINED_AREA: f64 = 0.25;

/// Split a sample into 4 non-overlapping patches tiling the image, with
/// boxes clipped and shifted into each patch's frame. Clipped boxes keeping
/// less than 25% of their original area are dropped.
pub fn crop_quadrants<F: Real>(sample: &AnnotatedImage<F>) -> Result<Vec<AnnotatedImage<F>>> {
    let (c, h, w) = sample.image.dim();
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} too small to crop into quadrants"
        )));
    }
    let h0 = h.div_ceil(2);
    let w0 = w.div_ceil(2);
    let rects = [
        (0, 0, h0, w0),
        (0, w0, h0, w - w0),
        (h0, 0, h - h0, w0),
        (h0, w0, h - h0, w - w0),
    ];
    let mut patches = Vec::with_capacity(4);
    for &(py, px, ph, pw) in &rects {
        let image = sample
            .image
            .slice(ndarray::s![.., py..py + ph, px..px + pw])
            .to_owned();
        debug_assert_eq!(image.dim(), (c, ph, pw));
        let patch_rect = BBox::new(px as f64, py as f64, pw as f64, ph as f64);
        let mut boxes = Vec::new();
        let mut labels = Vec::new();
        for (b, &label) in sample.boxes.iter().zip(&sample.labels) {
            if let Some(clipped) = b.intersect(&patch_rect) {
                if clipped.area() >= MIN_RETAINED_AREA * b.area() {
                    boxes.push(BBox::new(
                        clipped.x - px as f64,
                        clipped.y - py as f64,
                        clipped.w,
                        clipped.h,
                    ));
                    labels.push(label);
                }
            }
        }
        patches.push(AnnotatedImage {
            image,
            boxes,
            labels,
        });
    }
    Ok(patches)
}
