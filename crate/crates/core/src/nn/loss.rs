use crate::error::{Error, Result};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{lit, Scalar, Tensor};

pub(crate) struct CrossEntropySaved<T> {
    probs: Vec<T>,
    labels: Vec<usize>,
}

impl<T: Scalar> CrossEntropySaved<T> {
    pub(crate) fn backward(&self, logits: Var, g: T, sink: &mut GradSink<'_, T>) {
        let pixels = self.labels.len();
        let scale = g * lit::<T>(1.0 / pixels as f64);
        let mut gl: Vec<T> = self.probs.iter().map(|&p| p * scale).collect();
        for (p, &label) in self.labels.iter().enumerate() {
            gl[label * pixels + p] -= scale;
        }
        sink.add(logits, gl);
    }
}

impl<T: Scalar> Tape<T> {
    /// Mean per-pixel cross-entropy of `logits: [K × H × W]` against
    /// `labels` (row-major, `H·W` entries in `0..K`).
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        self.check(logits)?;
        let d = self.dims(logits).to_vec();
        if d.len() != 3 || d[1] * d[2] != labels.len() {
            return Err(Error::invalid(
                "cross_entropy",
                format!("logits {d:?} vs {} labels", labels.len()),
            ));
        }
        let (k, pixels) = (d[0], labels.len());
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::invalid("cross_entropy", format!("label {bad} outside {k} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![T::zero(); src.len()];
        let mut loss = T::zero();
        for p in 0..pixels {
            let mut max = src[p];
            for c in 1..k {
                max = max.max(src[c * pixels + p]);
            }
            let mut total = T::zero();
            for c in 0..k {
                let e = (src[c * pixels + p] - max).exp();
                probs[c * pixels + p] = e;
                total += e;
            }
            for c in 0..k {
                probs[c * pixels + p] = probs[c * pixels + p] / total;
            }
            loss += total.ln() + max - src[labels[p] * pixels + p];
        }
        loss *= lit::<T>(1.0 / pixels as f64);
        let saved = CrossEntropySaved {
            probs,
            labels: labels.to_vec(),
        };
        self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, saved }, &[logits])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_k() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::full(&[4, 3, 3], 0.7));
        let labels: Vec<usize> = (0..9).map(|i| i % 4).collect();
        let l = tape.cross_entropy(logits, &labels).unwrap();
        assert!((tape.value(l).item() - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_label() {
        let mut tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[2, 1, 2]));
        assert!(tape.cross_entropy(logits, &[0, 2]).is_err());
        assert!(tape.cross_entropy(logits, &[0]).is_err());
    }
}
