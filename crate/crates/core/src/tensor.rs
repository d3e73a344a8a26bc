//! Dense channel-major maps shared by every stage.

/// A `channels × height × width` array of `f64`, channel-major then row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Map3 {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Map3 {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::filled(channels, height, width, 0.0)
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    /// Panics if `data.len()` does not match the dimensions.
    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Self {
        assert_eq!(
            data.len(),
            channels * height * width,
            "Map3 data length does not match {channels}x{height}x{width}"
        );
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Copies the channel vector at flat pixel index `p` into `out`.
    pub fn pixel_into(&self, p: usize, out: &mut [f64]) {
        let n = self.plane_len();
        for (c, o) in out.iter_mut().enumerate() {
            *o = self.data[c * n + p];
        }
    }

    pub fn pixel(&self, p: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.channels];
        self.pixel_into(p, &mut v);
        v
    }

    pub fn set_pixel(&mut self, p: usize, values: &[f64]) {
        let n = self.plane_len();
        for (c, v) in values.iter().enumerate() {
            self.data[c * n + p] = *v;
        }
    }

    pub fn same_shape(&self, other: &Map3) -> bool {
        self.dims() == other.dims()
    }

    /// Reverses the width axis of every channel.
    pub fn hflip(&self) -> Map3 {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }
}
