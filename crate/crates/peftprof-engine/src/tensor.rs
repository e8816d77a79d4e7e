use peftprof_core::TensorShape;

/// Dense NCHW tensor of f64 values. The engine trades speed for exactness:
/// kernels are straightforward loops whose arithmetic the instrumentation
/// counts directly.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: TensorShape,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: TensorShape) -> Self {
        Tensor {
            shape,
            data: vec![0.0; shape.elements() as usize],
        }
    }

    pub fn from_vec(shape: TensorShape, data: Vec<f64>) -> Self {
        assert_eq!(shape.elements() as usize, data.len());
        Tensor { shape, data }
    }

    pub fn elements(&self) -> usize {
        self.data.len()
    }

    pub fn bytes(&self, width: u64) -> u64 {
        self.shape.elements() * width
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    #[inline]
    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn at_mut(&mut self, n: usize, c: usize, h: usize, w: usize) -> &mut f64 {
        let i = self.idx(n, c, h, w);
        &mut self.data[i]
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn max_rel_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(1e-12))
            .fold(0.0, f64::max)
    }
}

/// A flat parameter tensor with its logical element count.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamValue {
    pub data: Vec<f64>,
}

impl ParamValue {
    pub fn zeros(elements: u64) -> Self {
        ParamValue {
            data: vec![0.0; elements as usize],
        }
    }
}
