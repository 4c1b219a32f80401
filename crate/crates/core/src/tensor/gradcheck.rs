//! Central-difference gradient checking in `f64`.

use super::{SeqLayout, Tape, Tensor, Var};
use crate::error::Result;
use crate::rng;

pub type Build<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

pub const DEFAULT_STEP: f64 = 1e-3;

/// Compares tape gradients of the scalar built by `build` against central
/// differences. Per input the error is
/// `max |fd - analytic| / max(|analytic|_inf, 1e-6)`; the worst input wins.
///
/// With `sample = Some((k, seed))` only `k` randomly chosen elements of each
/// input are perturbed.
pub fn max_relative_error(inputs: &[Tensor<f64>], build: &Build<'_>, step: f64, sample: Option<(usize, u64)>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let root = build(&mut tape, &vars)?;
    tape.backward(root)?;

    let eval = |ins: &[Tensor<f64>]| -> Result<f64> {
        let mut t = Tape::no_grad();
        let vs: Vec<Var> = ins.iter().map(|x| t.constant(x.clone())).collect();
        let r = build(&mut t, &vs)?;
        Ok(t.value(r).item())
    };

    let mut worst = 0.0f64;
    let mut ins = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = tape
            .grad(vars[k])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
        let elems: Vec<usize> = match sample {
            Some((count, seed)) if count < input.len() => {
                let mut p = rng::permutation(input.len(), rng::derive(seed, k as u64));
                p.truncate(count);
                p
            }
            _ => (0..input.len()).collect(),
        };
        for i in elems {
            let x0 = ins[k].data()[i];
            ins[k].data_mut()[i] = x0 + step;
            let up = eval(&ins)?;
            ins[k].data_mut()[i] = x0 - step;
            let down = eval(&ins)?;
            ins[k].data_mut()[i] = x0;
            let fd = (up - down) / (2.0 * step);
            worst = worst.max((fd - analytic.data()[i]).abs() / scale);
        }
    }
    Ok(worst)
}

type T64 = Tensor<f64>;

pub(crate) fn randn(shape: &[usize], r: &mut rng::Rng) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| rng::normal(r) as f64)
}

/// Reduces a tensor output to a scalar with fixed random weights so every
/// output element matters.
pub(crate) fn weighted_sum(t: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut r = rng::seeded(seed ^ 0xABCD);
    let w = randn(t.shape(y), &mut r);
    let w = t.constant(w);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

pub(crate) fn away_from_zero(shape: &[usize], r: &mut rng::Rng) -> T64 {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng::normal(r) as f64;
        if v.abs() < 0.05 {
            v.signum() * 0.05 + v
        } else {
            v
        }
    })
}

/// Worst relative error of every differentiable tape op on random inputs
/// drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<(&'static str, f64)>> {
    let mut r = rng::seeded(seed);
    let mut out = Vec::new();
    let mut check = |name: &'static str, ins: Vec<T64>, build: &Build<'_>| -> Result<()> {
        out.push((name, max_relative_error(&ins, build, DEFAULT_STEP, None)?));
        Ok(())
    };
    check("matmul", vec![randn(&[3, 4], &mut r), randn(&[4, 2], &mut r)], &|t, v| {
        let y = t.matmul(v[0], v[1])?;
        weighted_sum(t, y, seed)
    })?;
    check(
        "linear",
        vec![randn(&[3, 4], &mut r), randn(&[4, 5], &mut r), randn(&[5], &mut r)],
        &|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            weighted_sum(t, y, seed)
        },
    )?;
    check("add_mul_scale", vec![randn(&[2, 3], &mut r), randn(&[2, 3], &mut r)], &|t, v| {
        let a = t.add(v[0], v[1])?;
        let m = t.mul(a, v[1])?;
        let s = t.scale(m, 0.7);
        let mean = t.mean(s);
        let w = weighted_sum(t, s, seed)?;
        t.add(w, mean)
    })?;
    check("relu", vec![away_from_zero(&[3, 5], &mut r)], &|t, v| {
        let y = t.relu(v[0]);
        weighted_sum(t, y, seed)
    })?;
    check("gelu", vec![randn(&[3, 5], &mut r)], &|t, v| {
        let y = t.gelu(v[0]);
        weighted_sum(t, y, seed)
    })?;
    check("sigmoid", vec![randn(&[3, 5], &mut r)], &|t, v| {
        let y = t.sigmoid(v[0]);
        weighted_sum(t, y, seed)
    })?;
    check("softmax", vec![randn(&[3, 7], &mut r)], &|t, v| {
        let y = t.softmax_lastdim(v[0])?;
        weighted_sum(t, y, seed)
    })?;
    check(
        "layernorm",
        vec![randn(&[3, 6], &mut r), randn(&[6], &mut r), randn(&[6], &mut r)],
        &|t, v| {
            let y = t.layernorm(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, y, seed)
        },
    )?;
    let labels = [(seed % 5) as usize, ((seed + 2) % 5) as usize];
    check("cross_entropy", vec![randn(&[2, 5], &mut r)], &|t, v| t.cross_entropy(v[0], &labels))?;
    let targets = [1.0, 0.0, 1.0, 0.0];
    check("bce", vec![randn(&[4, 1], &mut r)], &|t, v| t.bce_with_logits(v[0], &targets, 1.5))?;
    let keep: Vec<bool> = (0..7).map(|i| i == 0 || (seed >> i) & 1 == 1).collect();
    check("attention", vec![randn(&[7, 12], &mut r)], &|t, v| {
        let layout = SeqLayout::ragged(vec![3, 4]);
        let mut k = keep.clone();
        k[3] = true;
        let y = t.attention(v[0], &layout, 2, Some(&k))?;
        weighted_sum(t, y, seed)
    })?;
    check("rows", vec![randn(&[4, 3], &mut r), randn(&[2, 3], &mut r), randn(&[4, 2], &mut r)], &|t, v| {
        let stacked = t.vstack(v[0], v[1])?; // 6x3
        let g = t.gather_rows(stacked, &[5, 0, 0, 3])?; // 4x3
        let layout = SeqLayout::ragged(vec![1, 3]);
        let m = t.group_mean_rows(g, &layout)?; // 2x3
        let rep = t.gather_rows(m, &[0, 1, 1, 0])?;
        let c = t.concat_cols(rep, v[2])?; // 4x5
        let w = weighted_sum(t, c, seed)?;
        let a = t.add_rows(v[0], v[1])?; // period 2
        let wa = weighted_sum(t, a, seed + 1)?;
        t.add(w, wa)
    })?;
    check("gate_rows_x", vec![randn(&[4, 3], &mut r)], &|t, v| {
        let p = t.constant(Tensor::full([2], 0.3));
        let y = t.gate_rows(v[0], p, &[1, 3], &[false, true])?;
        weighted_sum(t, y, seed)
    })?;
    drop(check);
    Ok(out)
}
