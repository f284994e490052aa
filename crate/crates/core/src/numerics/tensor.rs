use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SraError};

/// Dense row-major tensor of rank 1 to 3.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTensor", into = "RawTensor")]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

/// On-disk "tjson" layout: `{"dims":[...],"data":[...]}`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl TryFrom<RawTensor> for Tensor {
    type Error = SraError;

    fn try_from(raw: RawTensor) -> Result<Self> {
        Tensor::new(raw.dims, raw.data)
    }
}

impl From<Tensor> for RawTensor {
    fn from(t: Tensor) -> Self {
        RawTensor {
            dims: t.dims,
            data: t.data,
        }
    }
}

pub const MAX_RANK: usize = 3;

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(SraError::shape("tensor", "rank 1..=3", format!("rank {}", dims.len())));
        }
        if dims.contains(&0) {
            return Err(SraError::shape("tensor", "positive dims", format!("{dims:?}")));
        }
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(SraError::shape(
                "tensor",
                format!("{n} elements for dims {dims:?}"),
                format!("{} elements", data.len()),
            ));
        }
        Ok(Tensor { dims, data })
    }

    /// Panics on invalid dims; for internally computed shapes only.
    pub fn zeros(dims: &[usize]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), vec![value; n]).expect("valid dims")
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor::new(vec![n], data).expect("non-empty vector")
    }

    pub fn from_fn(dims: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(&mut f).collect()).expect("valid dims")
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        Tensor::new(dims.to_vec(), self.data)
    }

    /// `(dims[0], dims[1], dims[2])` of a rank-3 tensor.
    pub fn dims3(&self, op: &'static str) -> Result<(usize, usize, usize)> {
        match self.dims[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(SraError::shape(op, "rank-3 tensor", format!("{:?}", self.dims))),
        }
    }

    pub fn get3(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[(a * self.dims[1] + b) * self.dims[2] + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.dims, other.dims, "max_abs_diff on mismatched dims");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn dot(&self, other: &Tensor) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Tensor, s: f64) {
        assert_eq!(self.dims, other.dims, "add_scaled on mismatched dims");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn to_tjson(&self) -> String {
        serde_json::to_string(self).expect("tensor serializes")
    }

    pub fn from_tjson(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn read_tjson(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_tjson(&fs::read_to_string(path)?)
    }

    pub fn write_tjson(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_tjson())?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_dims() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![], vec![]).is_err());
        assert!(Tensor::new(vec![1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
        assert!(Tensor::new(vec![2, 1, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn tjson_layout() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.5]).unwrap();
        let s = t.to_tjson();
        assert_eq!(s, r#"{"dims":[2,2],"data":[1.0,2.0,3.0,4.5]}"#);
        assert_eq!(Tensor::from_tjson(&s).unwrap(), t);
        assert!(Tensor::from_tjson(r#"{"dims":[3],"data":[1.0]}"#).is_err());
        assert!(Tensor::from_tjson(r#"{"dims":[1],"data":[1.0],"x":1}"#).is_err());
    }

    #[test]
    fn rank3_indexing_is_row_major() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        assert_eq!(t.get3(1, 2, 3), 23.0);
        assert_eq!(t.get3(0, 1, 0), 4.0);
    }
}
