use crate::autodiff::Tape;
use crate::data::Split;
use crate::error::{Error, Result};
use crate::net::{Mode, PartitionedModel};
use crate::tensor::Tensor;

/// Examples per evaluation forward pass.
pub const EVAL_CHUNK: usize = 512;

/// Accuracy of every head and of every top-m ensemble on one split.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadAccuracy {
    /// `per_head[k - 1]`: accuracy of component `k`'s head.
    pub per_head: Vec<f64>,
    /// `ensemble[m - 1]`: accuracy when averaging the probabilities of heads
    /// `n - m + 1 ..= n`. `ensemble[0]` equals the final head.
    pub ensemble: Vec<f64>,
}

impl HeadAccuracy {
    pub fn final_head(&self) -> f64 {
        *self.per_head.last().unwrap()
    }

    pub fn top(&self, m: usize) -> Result<f64> {
        if m == 0 || m > self.ensemble.len() {
            return Err(Error::Config(format!("ensemble size must be in 1..={}, got {m}", self.ensemble.len())));
        }
        Ok(self.ensemble[m - 1])
    }
}

/// Predictions from averaging the softmax probabilities of the last `m` heads.
/// Ties go to the lowest class index.
pub fn ensemble_predictions(logits: &[Tensor], m: usize) -> Result<Vec<usize>> {
    let n = logits.len();
    if m == 0 || m > n {
        return Err(Error::Config(format!("ensemble size must be in 1..={n}, got {m}")));
    }
    if m == 1 {
        return Ok(logits[n - 1].argmax_rows());
    }
    let mut avg = logits[n - m].softmax_rows();
    for l in &logits[n - m + 1..] {
        avg.add_assign(&l.softmax_rows());
    }
    avg.scale_inplace(1.0 / m as f64);
    Ok(avg.argmax_rows())
}

fn correct(pred: &[usize], targets: &[usize]) -> usize {
    pred.iter().zip(targets).filter(|(p, t)| p == t).count()
}

/// Logits of every head for `x`, in eval mode.
pub fn head_logits(model: &PartitionedModel, x: &Tensor) -> Result<Vec<Tensor>> {
    let mut tape = Tape::new();
    let pass = model.forward(&mut tape, x, Mode::Eval)?;
    Ok(pass.logits.iter().map(|&v| tape.value(v).clone()).collect())
}

/// Per-head and ensemble accuracy over `x`, `targets`, in chunks.
pub fn evaluate_tensors(model: &PartitionedModel, x: &Tensor, targets: &[usize]) -> Result<HeadAccuracy> {
    let n = model.len();
    let total = targets.len();
    if total == 0 || x.batch() != total {
        return Err(Error::Data(format!("cannot evaluate {} inputs against {total} targets", x.batch())));
    }
    let mut heads = vec![0usize; n];
    let mut ens = vec![0usize; n];
    let mut start = 0;
    while start < total {
        let end = (start + EVAL_CHUNK).min(total);
        let logits = head_logits(model, &x.slice_batch(start, end))?;
        let t = &targets[start..end];
        for (k, l) in logits.iter().enumerate() {
            heads[k] += correct(&l.argmax_rows(), t);
        }
        for m in 1..=n {
            ens[m - 1] += correct(&ensemble_predictions(&logits, m)?, t);
        }
        start = end;
    }
    let frac = |c: usize| c as f64 / total as f64;
    Ok(HeadAccuracy { per_head: heads.into_iter().map(frac).collect(), ensemble: ens.into_iter().map(frac).collect() })
}

pub fn evaluate(model: &PartitionedModel, split: &Split) -> Result<HeadAccuracy> {
    evaluate_tensors(model, &split.inputs(), split.targets())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_of_one_is_final_head() {
        let a = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0, 2.0], &[3.0, 0.0]]).unwrap();
        let logits = [a, b.clone()];
        assert_eq!(ensemble_predictions(&logits, 1).unwrap(), b.argmax_rows());
        assert!(ensemble_predictions(&logits, 3).is_err());
        assert!(ensemble_predictions(&logits, 0).is_err());
    }

    #[test]
    fn confident_head_dominates_average() {
        // Head 1 is mildly wrong, head 2 strongly right.
        let a = Tensor::from_rows(&[&[0.5, 0.0]]).unwrap();
        let b = Tensor::from_rows(&[&[0.0, 5.0]]).unwrap();
        assert_eq!(ensemble_predictions(&[a, b], 2).unwrap(), vec![1]);
    }
}
