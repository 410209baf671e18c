use crate::error::{shape_err, Result, TensorError};

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != data.len() {
            return shape_err(
                "tensor",
                format!(
                    "shape {:?} needs {} elements, buffer has {}",
                    shape,
                    n,
                    data.len()
                ),
            );
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn dims4(&self, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [b, c, h, w] => Ok((b, c, h, w)),
            _ => shape_err(op, format!("expected a 4-D tensor, got {:?}", self.shape)),
        }
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() {
            return shape_err("reshape", format!("{:?} -> {:?}", self.shape, shape));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Slice `[index]` along the leading axis.
    pub fn index_first(&self, index: usize) -> Result<Tensor> {
        if self.shape.is_empty() || index >= self.shape[0] {
            return Err(TensorError::InvalidArgument {
                op: "index_first",
                msg: format!("index {index} out of range for shape {:?}", self.shape),
            });
        }
        let inner: usize = self.shape[1..].iter().product();
        Ok(Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        })
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let Some(first) = items.first() else {
            return shape_err("stack", "no tensors to stack");
        };
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for t in items {
            if t.shape != first.shape {
                return shape_err("stack", format!("{:?} vs {:?}", t.shape, first.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Zero-pad the last two (spatial) axes on the bottom and right.
    pub fn pad_spatial(&self, new_h: usize, new_w: usize) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return shape_err("pad_spatial", "need at least 2 axes");
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        if new_h < h || new_w < w {
            return shape_err(
                "pad_spatial",
                format!("cannot pad {h}x{w} to {new_h}x{new_w}"),
            );
        }
        let outer: usize = self.shape[..r - 2].iter().product();
        let mut data = vec![0.0; outer * new_h * new_w];
        for o in 0..outer {
            for y in 0..h {
                let src = &self.data[(o * h + y) * w..(o * h + y + 1) * w];
                let dst = (o * new_h + y) * new_w;
                data[dst..dst + w].copy_from_slice(src);
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = new_h;
        shape[r - 1] = new_w;
        Ok(Tensor { shape, data })
    }

    /// Crop the last two axes to the window starting at (`top`, `left`).
    pub fn crop_spatial(&self, top: usize, left: usize, ch: usize, cw: usize) -> Result<Tensor> {
        let r = self.rank();
        if r < 2 {
            return shape_err("crop_spatial", "need at least 2 axes");
        }
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        if top + ch > h || left + cw > w {
            return shape_err(
                "crop_spatial",
                format!("window {ch}x{cw} at ({top},{left}) exceeds {h}x{w}"),
            );
        }
        let outer: usize = self.shape[..r - 2].iter().product();
        let mut data = Vec::with_capacity(outer * ch * cw);
        for o in 0..outer {
            for y in top..top + ch {
                let row = (o * h + y) * w;
                data.extend_from_slice(&self.data[row + left..row + left + cw]);
            }
        }
        let mut shape = self.shape.clone();
        shape[r - 2] = ch;
        shape[r - 1] = cw;
        Ok(Tensor { shape, data })
    }

    /// Reverse the row order of the second-to-last axis.
    pub fn flip_vertical(&self) -> Tensor {
        let r = self.rank();
        assert!(r >= 2, "flip_vertical needs at least 2 axes");
        let (h, w) = (self.shape[r - 2], self.shape[r - 1]);
        let outer: usize = self.shape[..r - 2].iter().product();
        let mut data = Vec::with_capacity(self.data.len());
        for o in 0..outer {
            for y in (0..h).rev() {
                let row = (o * h + y) * w;
                data.extend_from_slice(&self.data[row..row + w]);
            }
        }
        Tensor {
            shape: self.shape.clone(),
            data,
        }
    }
}

pub(crate) fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(TensorError::AxisOutOfRange { axis, rank })
    } else {
        Ok(())
    }
}
