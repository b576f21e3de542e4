//! Centering, sharpening and the cross-entropy distillation losses.

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{dim_err, Error, Result};

/// Teacher probabilities `softmax((o − c) / τ_t)` for each row of `logits`.
///
/// The result is a plain tensor: targets never carry gradients.
pub fn teacher_targets(logits: &Tensor, center: &Tensor, temperature: f64) -> Result<Tensor> {
    let k = logits.last_dim();
    if center.shape() != [k] {
        return dim_err(format!(
            "center {:?} does not match logits {:?}",
            center.shape(),
            logits.shape()
        ));
    }
    let mut shifted = logits.clone();
    for row in shifted.data_mut().chunks_mut(k) {
        for (v, c) in row.iter_mut().zip(center.data()) {
            *v -= c;
        }
    }
    shifted.softmax(temperature)
}

/// `c ← q·c + (1 − q)·mean(batch rows)`.
pub fn update_center(center: &Tensor, batch_logits: &Tensor, rate: f64) -> Result<Tensor> {
    if batch_logits.numel() == 0 {
        return Err(Error::Parameter("center update over an empty batch".into()));
    }
    let mean = batch_logits.mean_rows()?;
    center.zip(&mean, |c, m| rate * c + (1.0 - rate) * m)
}

/// Mean cross-entropy over ordered pairs of distinct global crops:
/// `1/(I(I−1)) Σ_i Σ_{j≠i} H(t_i, s_j)`.
pub fn loss_global(tape: &mut Tape, targets: &[Tensor], student: &[Var]) -> Result<Var> {
    let i_count = targets.len();
    if i_count < 2 {
        return Err(Error::Config(format!(
            "global loss needs at least 2 global crops, got {i_count}"
        )));
    }
    if student.len() != i_count {
        return dim_err(format!(
            "{} teacher targets but {} student globals",
            i_count,
            student.len()
        ));
    }
    let mut terms = Vec::with_capacity(i_count * (i_count - 1));
    for (i, t) in targets.iter().enumerate() {
        for (j, &s) in student.iter().enumerate() {
            if i != j {
                terms.push(tape.cross_entropy(t, s)?);
            }
        }
    }
    mean_of(tape, &terms)
}

/// Mean cross-entropy over every (teacher global, student local) pair.
pub fn loss_local(tape: &mut Tape, targets: &[Tensor], student_locals: &[Var]) -> Result<Var> {
    if targets.is_empty() || student_locals.is_empty() {
        return Err(Error::Config(
            "local loss needs at least one global and one local crop".into(),
        ));
    }
    let mut terms = Vec::with_capacity(targets.len() * student_locals.len());
    for t in targets {
        for &s in student_locals {
            terms.push(tape.cross_entropy(t, s)?);
        }
    }
    mean_of(tape, &terms)
}

/// `ω_g·loss_g + ω_l·loss_l`.
pub fn total_loss(tape: &mut Tape, loss_g: Var, loss_l: Var, w_g: f64, w_l: f64) -> Result<Var> {
    let g = tape.scale(loss_g, w_g);
    let l = tape.scale(loss_l, w_l);
    tape.add(g, l)
}

pub(crate) fn sum_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let (&first, rest) = terms
        .split_first()
        .ok_or_else(|| Error::Dimension("sum of zero terms".into()))?;
    rest.iter().try_fold(first, |acc, &t| tape.add(acc, t))
}

pub(crate) fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let s = sum_of(tape, terms)?;
    Ok(tape.scale(s, 1.0 / terms.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn probs(k: usize, seed: u64, t: f64) -> Tensor {
        Tensor::randn(&[k], 1.0, &mut rng::stream(seed))
            .softmax(t)
            .unwrap()
    }

    #[test]
    fn zero_center_is_plain_sharpened_softmax() {
        let o = Tensor::randn(&[3, 5], 1.0, &mut rng::stream(1));
        let t = teacher_targets(&o, &Tensor::zeros(&[5]), 0.04).unwrap();
        assert_eq!(t, o.softmax(0.04).unwrap());
    }

    #[test]
    fn logits_equal_to_center_give_uniform() {
        let c = Tensor::randn(&[6], 1.0, &mut rng::stream(2));
        let o = c.clone().reshape(&[1, 6]).unwrap();
        let t = teacher_targets(&o, &c, 0.04).unwrap();
        assert!(t.data().iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn center_update_edge_rates() {
        let c = Tensor::vector(vec![1.0, -2.0]);
        let batch = Tensor::from_rows(&[vec![3.0, 1.0], vec![5.0, 3.0]]).unwrap();
        assert_eq!(update_center(&c, &batch, 1.0).unwrap(), c);
        assert_eq!(update_center(&c, &batch, 0.0).unwrap().data(), &[4.0, 2.0]);
        let z = update_center(&Tensor::zeros(&[2]), &batch, 0.9).unwrap();
        assert!((z.data()[0] - 0.4).abs() < 1e-12);
        assert!((z.data()[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn global_loss_requires_two_crops() {
        let mut tape = Tape::new();
        let s = tape.constant(probs(4, 3, 1.0));
        assert!(matches!(
            loss_global(&mut tape, &[probs(4, 4, 1.0)], &[s]),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn global_loss_two_crops_is_mean_of_cross_terms() {
        let (t1, t2) = (probs(5, 5, 0.5), probs(5, 6, 0.5));
        let (s1, s2) = (probs(5, 7, 1.0), probs(5, 8, 1.0));
        let h = |p: &Tensor, q: &Tensor| -> f64 {
            -p.data()
                .iter()
                .zip(q.data())
                .map(|(a, b)| a * b.ln())
                .sum::<f64>()
        };
        let mut tape = Tape::new();
        let v1 = tape.constant(s1.clone());
        let v2 = tape.constant(s2.clone());
        let l = loss_global(&mut tape, &[t1.clone(), t2.clone()], &[v1, v2]).unwrap();
        let expect = 0.5 * (h(&t1, &s2) + h(&t2, &s1));
        assert!((tape.value(l).item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn uniform_targets_bound_loss_by_ln_k() {
        let k = 9;
        let u = Tensor::full(&[k], 1.0 / k as f64);
        let mut tape = Tape::new();
        let flat = tape.constant(u.clone());
        let l = loss_global(&mut tape, &[u.clone(), u.clone()], &[flat, flat]).unwrap();
        assert!((tape.value(l).item().unwrap() - (k as f64).ln()).abs() < 1e-14);

        // Any non-uniform student costs more (Jensen).
        let s1 = tape.constant(probs(k, 20, 1.0));
        let s2 = tape.constant(probs(k, 21, 1.0));
        let l = loss_global(&mut tape, &[u.clone(), u], &[s1, s2]).unwrap();
        assert!(tape.value(l).item().unwrap() > (k as f64).ln());
    }

    #[test]
    fn total_loss_weights() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::scalar(2.0));
        let l = tape.constant(Tensor::scalar(3.0));
        let t = total_loss(&mut tape, g, l, 1.0, 1.0).unwrap();
        assert_eq!(tape.value(t).item().unwrap(), 5.0);
        let t = total_loss(&mut tape, g, l, 1.0, 0.0).unwrap();
        assert_eq!(tape.value(t).item().unwrap(), 2.0);
    }
}
