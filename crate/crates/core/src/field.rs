//! Dense per-pixel grid containers.
//!
//! Every per-frame quantity (inverse depth, uncertainty, correspondence
//! targets, confidences, features, masks) lives on the same `h x w` grid.
//! Pixel coordinates are `(x, y)` with `x` the column and `y` the row, and
//! pixel centers sit at integer coordinates, so the valid continuous domain
//! for interpolation is `[0, w-1] x [0, h-1]`.

/// A scalar value per grid pixel, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn filled(h: usize, w: usize, value: f64) -> Self {
        Self { h, w, data: vec![value; h * w] }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "field data length must match grid");
        Self { h, w, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Value at (row, col).
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.w + col] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn same_shape(&self, other: &ScalarField) -> bool {
        self.h == other.h && self.w == other.w
    }
}

/// A 2-vector per grid pixel (pixel coordinates, per-component weights).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelField2 {
    h: usize,
    w: usize,
    data: Vec<[f64; 2]>,
}

impl PixelField2 {
    pub fn filled(h: usize, w: usize, value: [f64; 2]) -> Self {
        Self { h, w, data: vec![value; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> [f64; 2] {
        self.data[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: [f64; 2]) {
        self.data[row * self.w + col] = value;
    }

    pub fn as_slice(&self) -> &[[f64; 2]] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [[f64; 2]] {
        &mut self.data
    }
}

/// A boolean mask per grid pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct BoolField {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BoolField {
    pub fn filled(h: usize, w: usize, value: bool) -> Self {
        Self { h, w, data: vec![value; h * w] }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> bool {
        self.data[row * self.w + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.w + col] = value;
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [bool] {
        &mut self.data
    }

    pub fn count_true(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// A `channels`-vector per grid pixel, row-major with channels fastest.
///
/// Index layout: `data[(row * w + col) * channels + ch]`, which matches the
/// on-disk FMAP container so that load/save are straight memcpys.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    h: usize,
    w: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(h: usize, w: usize, channels: usize) -> Self {
        Self { h, w, channels, data: vec![0.0; h * w * channels] }
    }

    pub fn from_vec(h: usize, w: usize, channels: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w * channels, "feature data length must match grid");
        Self { h, w, channels, data }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixel(&self, row: usize, col: usize) -> &[f64] {
        let base = (row * self.w + col) * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn pixel_mut(&mut self, row: usize, col: usize) -> &mut [f64] {
        let base = (row * self.w + col) * self.channels;
        &mut self.data[base..base + self.channels]
    }

    /// Pixel access by flattened index `row * w + col`.
    pub fn pixel_flat(&self, idx: usize) -> &[f64] {
        let base = idx * self.channels;
        &self.data[base..base + self.channels]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }
}
