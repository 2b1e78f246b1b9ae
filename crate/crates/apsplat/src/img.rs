//! Row-major RGB image buffer in `f64`, values nominally in [0, 1].

use nalgebra::Vector3;

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, `3 * width * height` values.
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn filled(width: usize, height: usize, rgb: Vector3<f64>) -> Self {
        let mut img = Self::new(width, height);
        for p in 0..width * height {
            img.data[3 * p] = rgb.x;
            img.data[3 * p + 1] = rgb.y;
            img.data[3 * p + 2] = rgb.z;
        }
        img
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Vector3<f64> {
        let i = 3 * (y * self.width + x);
        Vector3::new(self.data[i], self.data[i + 1], self.data[i + 2])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: Vector3<f64>) {
        let i = 3 * (y * self.width + x);
        self.data[i] = rgb.x;
        self.data[i + 1] = rgb.y;
        self.data[i + 2] = rgb.z;
    }

    pub fn same_size(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Mean over all channels of |a - b|.
    pub fn mean_abs_diff(&self, other: &Image) -> f64 {
        assert!(self.same_size(other));
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n
    }

    /// Mean squared error over all channels.
    pub fn mse(&self, other: &Image) -> f64 {
        assert!(self.same_size(other));
        let n = self.data.len() as f64;
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// 8-bit quantization used by the PNG/PPM writers.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn set_get_roundtrip() {
        let mut img = Image::new(4, 3);
        img.set(2, 1, Vector3::new(0.1, 0.5, 0.9));
        assert_eq!(img.get(2, 1), Vector3::new(0.1, 0.5, 0.9));
        assert_eq!(img.get(0, 0), Vector3::zeros());
    }

    #[test]
    fn diff_metrics() {
        let a = Image::filled(2, 2, Vector3::new(0.5, 0.5, 0.5));
        let b = Image::filled(2, 2, Vector3::new(0.75, 0.75, 0.75));
        assert!((a.mean_abs_diff(&b) - 0.25).abs() < 1e-15);
        assert!((a.mse(&b) - 0.0625).abs() < 1e-15);
    }
}
