use super::tensor::Tensor;

/// A named trainable tensor with its accumulated gradient.
///
/// Embedding tables are marked row-sparse: backward passes record which rows
/// they touched so that `zero_grad` and the optimizer only visit those rows.
#[derive(Clone, Debug)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
    touched: Option<TouchedRows>,
}

#[derive(Clone, Debug)]
struct TouchedRows {
    mask: Vec<bool>,
    rows: Vec<usize>,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        ParamBlock {
            name: name.into(),
            value,
            grad,
            touched: None,
        }
    }

    /// A row-sparse block; `value` must be a matrix.
    pub fn new_sparse(name: impl Into<String>, value: Tensor) -> Self {
        let rows = value.rows();
        let mut block = ParamBlock::new(name, value);
        block.touched = Some(TouchedRows {
            mask: vec![false; rows],
            rows: Vec::new(),
        });
        block
    }

    pub fn is_sparse(&self) -> bool {
        self.touched.is_some()
    }

    /// Rows that received gradient since the last `zero_grad`, for sparse blocks.
    pub fn touched_rows(&self) -> Option<&[usize]> {
        self.touched.as_ref().map(|t| t.rows.as_slice())
    }

    /// Adds `g` into gradient row `row`, recording the row as touched.
    pub fn accumulate_row(&mut self, row: usize, g: &[f64], scale: f64) {
        if let Some(t) = self.touched.as_mut() {
            if !t.mask[row] {
                t.mask[row] = true;
                t.rows.push(row);
            }
        }
        for (a, b) in self.grad.row_mut(row).iter_mut().zip(g) {
            *a += scale * b;
        }
    }

    pub fn zero_grad(&mut self) {
        match self.touched.as_mut() {
            Some(t) => {
                for &r in &t.rows {
                    self.grad.row_mut(r).fill(0.0);
                    t.mask[r] = false;
                }
                t.rows.clear();
            }
            None => self.grad.fill(0.0),
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }
}

/// Anything that owns trainable parameter blocks in a stable order.
pub trait HasParams {
    fn params(&self) -> Vec<&ParamBlock>;
    fn params_mut(&mut self) -> Vec<&mut ParamBlock>;

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn num_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

impl HasParams for Vec<ParamBlock> {
    fn params(&self) -> Vec<&ParamBlock> {
        self.iter().collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        self.iter_mut().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sparse_zero_grad_clears_touched_rows_only() {
        let mut p = ParamBlock::new_sparse("t", Tensor::zeros(&[4, 2]));
        p.accumulate_row(2, &[1.0, 2.0], 1.0);
        p.accumulate_row(2, &[1.0, 2.0], 0.5);
        p.accumulate_row(0, &[3.0, 3.0], 1.0);
        assert_eq!(p.touched_rows(), Some(&[2, 0][..]));
        assert_eq!(p.grad.row(2), &[1.5, 3.0]);
        p.zero_grad();
        assert!(p.grad.data().iter().all(|&g| g == 0.0));
        assert_eq!(p.touched_rows(), Some(&[][..]));
    }

    #[test]
    fn accumulation_after_zero_equals_single_contribution() {
        let mut p = ParamBlock::new("w", Tensor::zeros(&[3]));
        p.grad.data_mut().copy_from_slice(&[9.0, 9.0, 9.0]);
        p.zero_grad();
        p.grad
            .add_scaled(&Tensor::vector(vec![1.0, -2.0, 0.5]).unwrap(), 1.0);
        assert_eq!(p.grad.data(), &[1.0, -2.0, 0.5]);
        assert_eq!(p.grad.shape(), p.value.shape());
    }
}
