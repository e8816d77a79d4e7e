use serde::{Deserialize, Serialize};

/// Shape of a 4-D activation tensor in NCHW order.
///
/// Linear-layer activations are carried as `(n, features, 1, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorShape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl TensorShape {
    pub fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Shape of a flattened feature vector.
    pub fn features(n: usize, d: usize) -> Self {
        Self {
            n,
            c: d,
            h: 1,
            w: 1,
        }
    }

    pub fn elements(&self) -> u64 {
        self.n as u64 * self.c as u64 * self.h as u64 * self.w as u64
    }

    /// Elements per batch entry.
    pub fn feature_elements(&self) -> u64 {
        self.c as u64 * self.h as u64 * self.w as u64
    }

    pub fn is_valid(&self) -> bool {
        self.n >= 1 && self.c >= 1 && self.h >= 1 && self.w >= 1
    }
}

impl std::fmt::Display for TensorShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.c, self.h, self.w)
    }
}
