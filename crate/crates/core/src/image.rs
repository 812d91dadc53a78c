//! Image tensors and their on-disk form.

use std::path::Path;

use ndarray::{Array2, Array3, Array4, ArrayD, Axis, Ix4};

use crate::error::{Error, Result};

/// Value range of an image tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ImageRange {
    /// `[-1, 1]`, native generator output.
    SignedUnit,
    /// `[0, 1]`.
    Unit,
    /// Already resized and normalized for the named extractor; unbounded.
    Normalized(String),
}

/// `H × W × C` image with `C ∈ {1, 3}`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Array3<f64>,
    range: ImageRange,
}

impl ImageTensor {
    pub fn new(pixels: Array3<f64>, range: ImageRange) -> Result<Self> {
        let (h, w, c) = pixels.dim();
        if h == 0 || w == 0 {
            return Err(Error::DegenerateImage(format!("{h}x{w} image has zero area")));
        }
        if c != 1 && c != 3 {
            return Err(Error::ShapeMismatch(format!("images need 1 or 3 channels, got {c}")));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        let (lo, hi) = match range {
            ImageRange::SignedUnit => (-1.0, 1.0),
            ImageRange::Unit => (0.0, 1.0),
            ImageRange::Normalized(_) => (f64::NEG_INFINITY, f64::INFINITY),
        };
        if let Some(v) = pixels.iter().find(|&&v| v < lo || v > hi) {
            return Err(Error::Data(format!("pixel {v} outside declared range {range:?}")));
        }
        Ok(Self { pixels, range })
    }

    pub fn filled(h: usize, w: usize, c: usize, value: f64, range: ImageRange) -> Result<Self> {
        Self::new(Array3::from_elem((h, w, c), value), range)
    }

    pub fn pixels(&self) -> &Array3<f64> {
        &self.pixels
    }

    pub fn range(&self) -> &ImageRange {
        &self.range
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    pub fn to_unit(&self) -> Result<ImageTensor> {
        match &self.range {
            ImageRange::Unit => Ok(self.clone()),
            ImageRange::SignedUnit => Ok(ImageTensor {
                pixels: self.pixels.mapv(signed_to_unit),
                range: ImageRange::Unit,
            }),
            ImageRange::Normalized(id) => Err(Error::Data(format!(
                "image normalized for `{id}` has no unit-range form"
            ))),
        }
    }

    pub fn to_signed_unit(&self) -> Result<ImageTensor> {
        match &self.range {
            ImageRange::SignedUnit => Ok(self.clone()),
            ImageRange::Unit => Ok(ImageTensor {
                pixels: self.pixels.mapv(|v| 2.0 * v - 1.0),
                range: ImageRange::SignedUnit,
            }),
            ImageRange::Normalized(id) => Err(Error::Data(format!(
                "image normalized for `{id}` has no signed-range form"
            ))),
        }
    }

    /// `1 × C × H × W` copy for the differentiation tape.
    pub fn to_nchw(&self) -> ArrayD<f64> {
        self.pixels
            .view()
            .permuted_axes([2, 0, 1])
            .insert_axis(Axis(0))
            .as_standard_layout()
            .into_owned()
            .into_dyn()
    }

    pub fn from_nchw(t: &ArrayD<f64>, range: ImageRange) -> Result<Self> {
        let t4 = t
            .view()
            .into_dimensionality::<Ix4>()
            .map_err(|_| Error::ShapeMismatch(format!("expected 1xCxHxW, got {:?}", t.shape())))?;
        if t4.dim().0 != 1 {
            return Err(Error::ShapeMismatch(format!("expected batch of one, got {}", t4.dim().0)));
        }
        let hwc = t4
            .index_axis(Axis(0), 0)
            .permuted_axes([1, 2, 0])
            .as_standard_layout()
            .into_owned();
        Self::new(hwc, range)
    }

    /// Luminance plane in `[0, 1]` with weights 0.299/0.587/0.114.
    pub fn luminance(&self) -> Result<Array2<f64>> {
        let u = self.to_unit()?;
        Ok(match u.channels() {
            1 => u.pixels.index_axis(Axis(2), 0).to_owned(),
            _ => {
                let p = &u.pixels;
                Array2::from_shape_fn((u.height(), u.width()), |(i, j)| {
                    0.299 * p[[i, j, 0]] + 0.587 * p[[i, j, 1]] + 0.114 * p[[i, j, 2]]
                })
            }
        })
    }

    /// Quantizes to 8 bits per channel (rounded, clamped).
    pub fn to_u8(&self) -> Result<Array3<u8>> {
        Ok(self.to_unit()?.pixels.mapv(quantize))
    }

    /// 8-bit luminance plane.
    pub fn to_gray8(&self) -> Result<Array2<u8>> {
        let u8s = self.to_u8()?;
        Ok(match self.channels() {
            1 => u8s.index_axis(Axis(2), 0).to_owned(),
            _ => Array2::from_shape_fn((self.height(), self.width()), |(i, j)| {
                let v = 0.299 * u8s[[i, j, 0]] as f64
                    + 0.587 * u8s[[i, j, 1]] as f64
                    + 0.114 * u8s[[i, j, 2]] as f64;
                v.round().clamp(0.0, 255.0) as u8
            }),
        })
    }

    pub fn from_u8(bytes: &Array3<u8>) -> Result<Self> {
        Self::new(bytes.mapv(|b| b as f64 / 255.0), ImageRange::Unit)
    }

    /// Reads an 8-bit PNG. Grayscale files keep a single channel; everything
    /// else is converted to RGB.
    pub fn load_png(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let img = ::image::open(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let gray = matches!(
            img.color(),
            ::image::ColorType::L8 | ::image::ColorType::L16 | ::image::ColorType::La8 | ::image::ColorType::La16
        );
        if gray {
            let g = img.to_luma8();
            let (w, h) = g.dimensions();
            let arr = Array3::from_shape_vec((h as usize, w as usize, 1), g.into_raw())
                .map_err(|e| Error::Data(e.to_string()))?;
            Self::from_u8(&arr)
        } else {
            let rgb = img.to_rgb8();
            let (w, h) = rgb.dimensions();
            let arr = Array3::from_shape_vec((h as usize, w as usize, 3), rgb.into_raw())
                .map_err(|e| Error::Data(e.to_string()))?;
            Self::from_u8(&arr)
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8()?;
        let (h, w, c) = bytes.dim();
        let raw: Vec<u8> = bytes.iter().copied().collect();
        let color = if c == 1 {
            ::image::ExtendedColorType::L8
        } else {
            ::image::ExtendedColorType::Rgb8
        };
        ::image::save_buffer_with_format(path, &raw, w as u32, h as u32, color, ::image::ImageFormat::Png)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }

    /// Bilinear resize (half-pixel centres); equal sizes return a copy.
    pub fn resize(&self, h: usize, w: usize) -> Result<ImageTensor> {
        if h == 0 || w == 0 {
            return Err(Error::DegenerateImage(format!("resize target {h}x{w}")));
        }
        if (h, w) == (self.height(), self.width()) {
            return Ok(self.clone());
        }
        let rh = crate::autodiff::bilinear_matrix(h, self.height());
        let rw = crate::autodiff::bilinear_matrix(w, self.width());
        let mut out = Array3::zeros((h, w, self.channels()));
        for c in 0..self.channels() {
            let plane = rh.dot(&self.pixels.index_axis(Axis(2), c)).dot(&rw.t());
            out.index_axis_mut(Axis(2), c).assign(&plane);
        }
        let (lo, hi) = match self.range {
            ImageRange::SignedUnit => (-1.0, 1.0),
            ImageRange::Unit => (0.0, 1.0),
            ImageRange::Normalized(_) => (f64::NEG_INFINITY, f64::INFINITY),
        };
        out.mapv_inplace(|v| v.clamp(lo, hi));
        Self::new(out, self.range.clone())
    }

    /// Stacks images of equal size into `N × C × H × W`.
    pub fn batch_nchw(images: &[&ImageTensor]) -> Result<Array4<f64>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Precondition("empty image batch".into()))?;
        let (h, w, c) = first.pixels.dim();
        let mut out = Array4::zeros((images.len(), c, h, w));
        for (n, img) in images.iter().enumerate() {
            if img.pixels.dim() != (h, w, c) {
                return Err(Error::ShapeMismatch("images in a batch differ in size".into()));
            }
            out.index_axis_mut(Axis(0), n)
                .assign(&img.pixels.view().permuted_axes([2, 0, 1]));
        }
        Ok(out)
    }
}

#[inline]
pub fn signed_to_unit(v: f64) -> f64 {
    (v + 1.0) * 0.5
}

#[inline]
fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_and_empty() {
        assert!(ImageTensor::filled(2, 2, 3, 1.5, ImageRange::Unit).is_err());
        assert!(matches!(
            ImageTensor::new(Array3::zeros((0, 4, 3)), ImageRange::Unit),
            Err(Error::DegenerateImage(_))
        ));
        assert!(ImageTensor::new(Array3::zeros((2, 2, 2)), ImageRange::Unit).is_err());
    }

    #[test]
    fn range_round_trip() {
        let img = ImageTensor::new(
            Array3::from_shape_fn((3, 4, 3), |(i, j, c)| ((i + j + c) as f64 / 8.0) * 2.0 - 1.0),
            ImageRange::SignedUnit,
        )
        .unwrap();
        let back = img.to_unit().unwrap().to_signed_unit().unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn nchw_round_trip_is_exact() {
        let img = ImageTensor::new(
            Array3::from_shape_fn((2, 5, 3), |(i, j, c)| (i * 15 + j * 3 + c) as f64 / 30.0),
            ImageRange::Unit,
        )
        .unwrap();
        let t = img.to_nchw();
        assert_eq!(t.shape(), &[1, 3, 2, 5]);
        assert_eq!(ImageTensor::from_nchw(&t, ImageRange::Unit).unwrap(), img);
    }

    #[test]
    fn png_round_trip_preserves_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new(
            Array3::from_shape_fn((4, 6, 3), |(i, j, c)| ((i * 18 + j * 3 + c) % 256) as f64 / 255.0),
            ImageRange::Unit,
        )
        .unwrap();
        let p = dir.path().join("x.png");
        img.save_png(&p).unwrap();
        let back = ImageTensor::load_png(&p).unwrap();
        assert_eq!(back.to_u8().unwrap(), img.to_u8().unwrap());

        let gray = ImageTensor::filled(3, 3, 1, 0.5, ImageRange::Unit).unwrap();
        let g = dir.path().join("g.png");
        gray.save_png(&g).unwrap();
        assert_eq!(ImageTensor::load_png(&g).unwrap().channels(), 1);
    }
}
