use gradnet::Tensor;
use nalgebra::{DMatrix, DVector};

pub(crate) fn matrix_to_tensor(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::matrix(r, c, data).expect("shape matches")
}

pub(crate) fn vector_to_column(v: &DVector<f64>) -> Tensor {
    Tensor::column(v.iter().copied().collect())
}
