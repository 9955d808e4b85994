use super::Scalar;

/// Channel-major activation block: `data[((c * n + i) * h + y) * w + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<F> {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<F>,
}

impl<F: Scalar> FeatureMap<F> {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            n,
            h,
            w,
            data: vec![F::zero(); c * n * h * w],
        }
    }

    pub fn from_vec(c: usize, n: usize, h: usize, w: usize, data: Vec<F>) -> Self {
        assert_eq!(data.len(), c * n * h * w, "feature map size");
        Self { c, n, h, w, data }
    }

    /// Stacks `n` single-channel `h×w` images into a `1×n×h×w` block.
    pub fn from_images(images: &[&[F]], h: usize, w: usize) -> Self {
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            assert_eq!(img.len(), h * w, "image size");
            data.extend_from_slice(img);
        }
        Self::from_vec(1, images.len(), h, w, data)
    }

    /// Per-sample feature vectors `[d][n]` (with `h = w = 1`).
    pub fn from_columns(d: usize, n: usize, data: Vec<F>) -> Self {
        Self::from_vec(d, n, 1, 1, data)
    }

    /// Number of elements per channel row.
    pub fn cols(&self) -> usize {
        self.n * self.h * self.w
    }

    pub fn spatial(&self) -> usize {
        self.h * self.w
    }

    pub fn row(&self, c: usize) -> &[F] {
        let cols = self.cols();
        &self.data[c * cols..(c + 1) * cols]
    }

    /// Replicates a single-channel block to `channels` identical channels.
    pub fn replicate_channels(&self, channels: usize) -> Self {
        assert_eq!(self.c, 1, "replication expects one channel");
        let mut data = Vec::with_capacity(self.data.len() * channels);
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Self::from_vec(channels, self.n, self.h, self.w, data)
    }

    /// Column `i` of a `[d][n]` vector block.
    pub fn column(&self, i: usize) -> Vec<F> {
        debug_assert_eq!(self.spatial(), 1);
        (0..self.c).map(|d| self.data[d * self.n + i]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}
