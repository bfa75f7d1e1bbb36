//! Training objective: L1 photometric term, the volume-size penalty on
//! per-bone extents, and the weighted total
//! `L = L_p + lambda_v L_v + lambda_s L_s` (the constraint term exists only
//! under the soft-softmax strategy).

use crate::tape::Var;
use crate::tensor::{Result, Tensor};

/// Mean absolute error over the RGB channels of a batch (`[n,3]` each).
pub fn photometric_loss<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let t = constant_like(pred, target);
    Ok(pred.sub(t)?.abs().mean_all())
}

/// Sum of absolute errors (callers that mix in constant off-tape terms
/// normalize themselves).
pub fn l1_sum<'t>(pred: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    let t = constant_like(pred, target);
    Ok(pred.sub(t)?.abs().sum_all())
}

fn constant_like<'t>(like: Var<'t>, value: &Tensor) -> Var<'t> {
    like.tape_ref().constant(value.clone())
}

/// Value-level photometric loss (oracle/test convenience).
pub fn photometric_value(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.iter()
        .zip(target)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / pred.len() as f64
}

/// Volume loss over per-bone extents: sum of the three-axis products.
pub fn volume_loss_value(extents: &[[f64; 3]]) -> f64 {
    extents.iter().map(|e| e[0] * e[1] * e[2]).sum()
}

/// Weighted objective assembly.
pub fn total_loss<'t>(
    lp: Var<'t>,
    lv: Option<Var<'t>>,
    ls: Option<Var<'t>>,
    lambda_v: f64,
    lambda_s: f64,
) -> Result<Var<'t>> {
    let mut total = lp;
    if let Some(lv) = lv {
        total = total.add(lv.scale(lambda_v))?;
    }
    if let Some(ls) = ls {
        total = total.add(ls.scale(lambda_s))?;
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn photometric_examples() {
        let tape = Tape::new();
        let a = Tensor::new(&[2, 3], vec![0.2, 0.4, 0.6, 0.8, 1.0, 0.0]).unwrap();
        let p = tape.constant(a.clone());
        assert_eq!(photometric_loss(p, &a).unwrap().item().unwrap(), 0.0);

        let zeros = tape.constant(Tensor::zeros(&[2, 3]));
        let ones = Tensor::filled(&[2, 3], 1.0);
        assert_eq!(photometric_loss(zeros, &ones).unwrap().item().unwrap(), 1.0);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..12).map(|_| rng.gen_range(0.0..1.0)).collect();
        let xv = tape.constant(Tensor::new(&[4, 3], x.clone()).unwrap());
        let loss = photometric_loss(xv, &Tensor::new(&[4, 3], y.clone()).unwrap())
            .unwrap()
            .item()
            .unwrap();
        assert!((loss - photometric_value(&x, &y)).abs() < 1e-12);
    }

    #[test]
    fn volume_loss_examples() {
        assert_eq!(volume_loss_value(&[[1.0; 3]; 24]), 24.0);
        let mut e = [[1.0; 3]; 24];
        e[0] = [2.0, 3.0, 4.0];
        assert_eq!(volume_loss_value(&e), 23.0 + 24.0);
    }

    #[test]
    fn volume_loss_gradient_is_product_rule() {
        // d/d sx of sx*sy*sz = sy*sz
        let tape = Tape::new();
        let ext = tape.param(Tensor::new(&[1, 3], vec![2.0, 3.0, 4.0]).unwrap());
        let px = ext.slice_cols(0, 1).unwrap();
        let py = ext.slice_cols(1, 2).unwrap();
        let pz = ext.slice_cols(2, 3).unwrap();
        let lv = px.mul(py).unwrap().mul(pz).unwrap().sum_all();
        let g = tape.backward(lv).unwrap();
        let ge = g.get(ext).unwrap();
        assert_eq!(ge.data(), &[12.0, 8.0, 6.0]);
    }

    #[test]
    fn total_loss_weighting() {
        let tape = Tape::new();
        let lp = tape.scalar(0.5);
        let lv = tape.scalar(24.0);
        let ls = tape.scalar(2.0);
        // zero weights: total equals L_p
        let t0 = total_loss(lp, Some(lv), Some(ls), 0.0, 0.0).unwrap();
        assert_eq!(t0.item().unwrap(), 0.5);
        let t = total_loss(lp, Some(lv), Some(ls), 0.001, 0.001).unwrap();
        assert!((t.item().unwrap() - (0.5 + 0.024 + 0.002)).abs() < 1e-12);
    }
}
