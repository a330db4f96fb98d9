use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An n-dimensional row-major array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Stack equal-length rows into a `(rows, 1, width)` batch.
    pub fn from_rows<'a, I>(rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let mut data = Vec::new();
        let mut n = 0;
        let mut width = None;
        for row in rows {
            match width {
                None => width = Some(row.len()),
                Some(w) if w != row.len() => {
                    return Err(Error::shape(
                        "from_rows",
                        format!("row {n} has width {} (expected {w})", row.len()),
                    ))
                }
                _ => {}
            }
            data.extend_from_slice(row);
            n += 1;
        }
        Tensor::new(vec![n, 1, width.unwrap_or(0)], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// `(batch, channels, width)` of an activation tensor.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [n, c, w] => Ok((n, c, w)),
            _ => Err(Error::shape(
                "dims3",
                format!("expected (batch, channels, width), got {:?}", self.shape),
            )),
        }
    }

    pub fn sum_squares(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Sample `i` of a `(batch, channels, width)` tensor.
    pub fn sample(&self, i: usize) -> Result<Tensor2> {
        let (n, c, w) = self.dims3()?;
        if i >= n {
            return Err(Error::shape("sample", format!("index {i} of batch {n}")));
        }
        Ok(Tensor2 {
            channels: c,
            width: w,
            data: self.data[i * c * w..(i + 1) * c * w].to_vec(),
        })
    }

    /// Stack single-sample matrices into a `(batch, channels, width)` tensor.
    pub fn stack<'a, I>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = &'a Tensor2>,
    {
        let mut data = Vec::new();
        let mut dims = None;
        let mut n = 0;
        for t in items {
            match dims {
                None => dims = Some((t.channels, t.width)),
                Some(d) if d != (t.channels, t.width) => {
                    return Err(Error::shape("stack", format!("{d:?} vs {:?}", (t.channels, t.width))))
                }
                _ => {}
            }
            data.extend_from_slice(&t.data);
            n += 1;
        }
        let (c, w) = dims.unwrap_or((0, 0));
        Tensor::new(vec![n, c, w], data)
    }
}

/// A single `channels × width` matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor2 {
    pub channels: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Tensor2 {
    pub fn new(channels: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * width {
            return Err(Error::shape(
                "tensor2",
                format!(
                    "{channels}×{width} needs {} values, got {}",
                    channels * width,
                    data.len()
                ),
            ));
        }
        Ok(Tensor2 { channels, width, data })
    }

    pub fn zeros(channels: usize, width: usize) -> Self {
        Tensor2 {
            channels,
            width,
            data: vec![0.0; channels * width],
        }
    }

    pub fn get(&self, c: usize, w: usize) -> f64 {
        self.data[c * self.width + w]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.channels, self.width)
    }

    pub fn to_batch(&self) -> Tensor {
        Tensor {
            shape: vec![1, self.channels, self.width],
            data: self.data.clone(),
        }
    }
}
