use super::{matmul, Param, Scalar, Tensor};

/// Fully connected layer, weight layout `[out, in]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    pub in_features: usize,
    pub out_features: usize,
}

impl<T: Scalar> Linear<T> {
    pub fn new(name: &str, input: usize, output: usize) -> Self {
        Linear {
            weight: Param::zeros(format!("{name}.weight"), &[output, input]),
            bias: Param::zeros(format!("{name}.bias"), &[output]),
            in_features: input,
            out_features: output,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.features(), self.in_features, "{}: input width", self.weight.name);
        let mut y = vec![T::zero(); x.n * self.out_features];
        for row in y.chunks_mut(self.out_features) {
            row.copy_from_slice(&self.bias.value);
        }
        matmul(
            x.n,
            self.in_features,
            self.out_features,
            &x.data,
            false,
            &self.weight.value,
            true,
            T::one(),
            &mut y,
        );
        Tensor::dense(x.n, self.out_features, y)
    }

    pub fn backward(&mut self, x: &Tensor<T>, dy: &Tensor<T>, need_input_grad: bool) -> Option<Tensor<T>> {
        assert_eq!(dy.features(), self.out_features);
        for row in dy.data.chunks(self.out_features) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        // dW[out, in] += dYᵀ · X
        matmul(
            self.out_features,
            x.n,
            self.in_features,
            &dy.data,
            true,
            &x.data,
            false,
            T::one(),
            &mut self.weight.grad,
        );
        need_input_grad.then(|| {
            let mut dx = vec![T::zero(); x.n * self.in_features];
            matmul(
                x.n,
                self.out_features,
                self.in_features,
                &dy.data,
                false,
                &self.weight.value,
                false,
                T::zero(),
                &mut dx,
            );
            Tensor::from_vec(x.n, x.c, x.h, x.w, dx)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_is_affine() {
        let mut l = Linear::<f64>::new("l", 2, 2);
        l.weight.value = vec![1.0, 2.0, 3.0, 4.0];
        l.bias.value = vec![0.5, -0.5];
        let y = l.forward(&Tensor::dense(1, 2, vec![1.0, 1.0]));
        assert_eq!(y.data, vec![3.5, 6.5]);
    }

    #[test]
    fn backward_gradients() {
        let mut l = Linear::<f64>::new("l", 3, 2);
        l.weight.value = vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0];
        let x = Tensor::dense(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let dy = Tensor::dense(2, 2, vec![1.0, 0.0, 0.0, 1.0]);
        let dx = l.backward(&x, &dy, true).unwrap();
        assert_eq!(l.bias.grad, vec![1.0, 1.0]);
        assert_eq!(l.weight.grad, vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        assert_eq!(dx.data, vec![1.0, 0.0, -1.0, 2.0, 1.0, 0.0]);
    }
}
