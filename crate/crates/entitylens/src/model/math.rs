//! Shared numeric primitives for forward/backward passes.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::Flt;

/// LayerNorm forward. Returns (y, xhat, inv_std); xhat and inv_std are the
/// caches the backward pass needs.
pub fn layer_norm<F: Flt>(
    x: ArrayView2<'_, F>,
    w: ArrayView1<'_, F>,
    b: ArrayView1<'_, F>,
    eps: F,
) -> (Array2<F>, Array2<F>, Array1<F>) {
    let d = F::from_usize(x.ncols()).unwrap();
    let mut xhat = x.to_owned();
    let mut inv = Array1::<F>::zeros(x.nrows());
    for (mut row, inv_i) in xhat.rows_mut().into_iter().zip(inv.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|&v| v * v).sum::<F>() / d;
        let s = (var + eps).sqrt().recip();
        row.mapv_inplace(|v| v * s);
        *inv_i = s;
    }
    let mut y = xhat.clone();
    for mut row in y.rows_mut() {
        row.zip_mut_with(&w, |v, &wi| *v = *v * wi);
        row += &b;
    }
    (y, xhat, inv)
}

/// LayerNorm backward: returns dx and accumulates dw/db.
pub fn layer_norm_backward<F: Flt>(
    dy: ArrayView2<'_, F>,
    xhat: &Array2<F>,
    inv: &Array1<F>,
    w: ArrayView1<'_, F>,
    dw: &mut Array1<F>,
    db: &mut Array1<F>,
) -> Array2<F> {
    let d = F::from_usize(dy.ncols()).unwrap();
    for (dy_row, xhat_row) in dy.rows().into_iter().zip(xhat.rows()) {
        for ((dwi, dbi), (&dyi, &xi)) in dw
            .iter_mut()
            .zip(db.iter_mut())
            .zip(dy_row.iter().zip(xhat_row.iter()))
        {
            *dwi = *dwi + dyi * xi;
            *dbi = *dbi + dyi;
        }
    }
    let mut dx = Array2::<F>::zeros(dy.raw_dim());
    for ((mut dx_row, dy_row), (xhat_row, &inv_i)) in dx
        .rows_mut()
        .into_iter()
        .zip(dy.rows())
        .zip(xhat.rows().into_iter().zip(inv.iter()))
    {
        // dxhat = dy * w
        let dxhat: Vec<F> = dy_row
            .iter()
            .zip(w.iter())
            .map(|(&dyi, &wi)| dyi * wi)
            .collect();
        let m1 = dxhat.iter().copied().sum::<F>() / d;
        let m2 = dxhat
            .iter()
            .zip(xhat_row.iter())
            .map(|(&g, &xi)| g * xi)
            .sum::<F>()
            / d;
        for ((dxi, &g), &xi) in dx_row.iter_mut().zip(dxhat.iter()).zip(xhat_row.iter()) {
            *dxi = inv_i * (g - m1 - xi * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Flt>(u: F) -> F {
    let c = F::from_f64(GELU_C).unwrap();
    let a = F::from_f64(GELU_A).unwrap();
    let half = F::from_f64(0.5).unwrap();
    half * u * (F::one() + (c * (u + a * u * u * u)).tanh())
}

pub fn gelu_prime<F: Flt>(u: F) -> F {
    let c = F::from_f64(GELU_C).unwrap();
    let a = F::from_f64(GELU_A).unwrap();
    let half = F::from_f64(0.5).unwrap();
    let three = F::from_f64(3.0).unwrap();
    let t = (c * (u + a * u * u * u)).tanh();
    half * (F::one() + t) + half * u * (F::one() - t * t) * c * (F::one() + three * a * u * u)
}

/// Causal row softmax in place over `scores[i][..=i]`; entries above the
/// diagonal are set to zero.
pub fn causal_softmax_inplace<F: Flt>(scores: &mut Array2<F>) {
    let n = scores.nrows();
    for i in 0..n {
        let mut row = scores.row_mut(i);
        let mut max = F::neg_infinity();
        for j in 0..=i {
            if row[j] > max {
                max = row[j];
            }
        }
        let mut sum = F::zero();
        for j in 0..=i {
            let e = (row[j] - max).exp();
            row[j] = e;
            sum = sum + e;
        }
        for j in 0..=i {
            row[j] = row[j] / sum;
        }
        for j in i + 1..n {
            row[j] = F::zero();
        }
    }
}

/// Row-wise softmax backward: ds = p .* (dp - sum(dp .* p)).
pub fn softmax_backward_rows<F: Flt>(p: &Array2<F>, dp: &Array2<F>) -> Array2<F> {
    let mut ds = Array2::<F>::zeros(p.raw_dim());
    for ((mut ds_row, p_row), dp_row) in ds
        .rows_mut()
        .into_iter()
        .zip(p.rows())
        .zip(dp.rows())
    {
        let dot = p_row
            .iter()
            .zip(dp_row.iter())
            .map(|(&pi, &di)| pi * di)
            .sum::<F>();
        for ((dsi, &pi), &di) in ds_row.iter_mut().zip(p_row.iter()).zip(dp_row.iter()) {
            *dsi = pi * (di - dot);
        }
    }
    ds
}

/// Mean cross-entropy over rows with targets, plus dlogits. Accumulates the
/// loss in f64. Rows with target `None` are masked out.
pub fn cross_entropy<F: Flt>(
    logits: &Array2<F>,
    targets: &[Option<u32>],
) -> (f64, Array2<F>) {
    assert_eq!(logits.nrows(), targets.len());
    let n_valid = targets.iter().flatten().count().max(1);
    let scale = F::from_usize(n_valid).unwrap().recip();
    let mut loss = 0.0f64;
    let mut dlogits = Array2::<F>::zeros(logits.raw_dim());
    for ((row, target), mut drow) in logits
        .rows()
        .into_iter()
        .zip(targets.iter())
        .zip(dlogits.rows_mut())
    {
        let Some(t) = target else { continue };
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let mut sum = F::zero();
        for &v in row.iter() {
            sum = sum + (v - max).exp();
        }
        let log_z = sum.ln() + max;
        loss += (log_z - row[*t as usize]).to_f64().unwrap();
        for (j, (di, &v)) in drow.iter_mut().zip(row.iter()).enumerate() {
            let p = (v - log_z).exp();
            *di = if j == *t as usize { (p - F::one()) * scale } else { p * scale };
        }
    }
    (loss / n_valid as f64, dlogits)
}

/// Mean squared L2 norm of rows.
pub fn mean_sq_norm<F: Flt>(x: ArrayView2<'_, F>) -> f64 {
    let n = x.nrows().max(1);
    x.axis_iter(Axis(0))
        .map(|r| r.iter().map(|&v| (v * v).to_f64().unwrap()).sum::<f64>())
        .sum::<f64>()
        / n as f64
}
