//! Masked kernelized attention over all user and item tokens.
//!
//! With a kernel feature map `phi`, the masked attention output is
//!
//! ```text
//! h_i = sum_j M_ij phi(q_i).phi(k_j) v_j / sum_j M_ij phi(q_i).phi(k_j)
//! ```
//!
//! For the sine degree mask `M_ij = sin(pi/4 (z_i + z_j))` the angle-sum
//! identity splits `M_ij` into `sin(a_i)cos(a_j) + cos(a_i)sin(a_j)` with
//! `a = pi z / 4`, so the mask factors into a query-side and a key-side
//! weight per term. Each term (a "branch") needs only one global key
//! summary `sum_j w_j phi(k_j) v_j^T` and one normaliser
//! `sum_j w_j phi(k_j)`, computed once and reused for every query: O(n m^2)
//! time and O(m^2) extra memory. The all-ones mask is the single branch
//! with unit weights. A general dense mask has no such factorization; only
//! the dense oracle accepts one, at O(n^2) cost.
//!
//! Queries and keys are scaled by `m^(-1/4)` before the feature map, so
//! `phi(q).phi(k)` targets `exp(q.k / sqrt(m))`.

use std::f64::consts::FRAC_PI_4;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_data::{InteractionGraph, Split};
use crate::kernel_features::{FeatureMap, Shift};

/// Largest token count the dense oracle will materialize.
pub const DENSE_GUARD: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    SineDegree,
    AllOnes,
    Adjacency,
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskMode::SineDegree => "sine_degree",
            MaskMode::AllOnes => "all_ones",
            MaskMode::Adjacency => "adjacency",
        })
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sine_degree" => Ok(MaskMode::SineDegree),
            "all_ones" => Ok(MaskMode::AllOnes),
            "adjacency" => Ok(MaskMode::Adjacency),
            other => Err(Error::invalid(format!("unknown mask mode `{other}`"))),
        }
    }
}

/// Inputs of one attention layer: `n` tokens of width `m`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a> {
    pub x: ArrayView2<'a, f64>,
    pub w_q: ArrayView2<'a, f64>,
    pub w_k: ArrayView2<'a, f64>,
    pub degree_z: ArrayView1<'a, f64>,
    pub mask_mode: MaskMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub h: Array2<f64>,
}

/// Token neighbourhoods of the bipartite graph: users are tokens `0..M`,
/// items are tokens `M..M+N`.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighborhoods {
    lists: Vec<Vec<usize>>,
}

impl Neighborhoods {
    pub fn from_graph(graph: &InteractionGraph, split: Split, self_loops: bool) -> Self {
        let m = graph.num_users;
        let mut lists = vec![Vec::new(); graph.num_nodes()];
        if self_loops {
            for (t, list) in lists.iter_mut().enumerate() {
                list.push(t);
            }
        }
        for (u, i) in graph.edges_in(split) {
            lists[u].push(m + i);
            lists[m + i].push(u);
        }
        for list in &mut lists {
            list.sort_unstable();
            list.dedup();
        }
        Self { lists }
    }

    pub fn from_lists(lists: Vec<Vec<usize>>) -> Self {
        Self { lists }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    pub fn neighbors(&self, token: usize) -> &[usize] {
        &self.lists[token]
    }

    /// Dense 0/1 mask, for the oracle.
    pub fn to_dense(&self) -> Array2<f64> {
        let n = self.lists.len();
        let mut out = Array2::zeros((n, n));
        for (i, list) in self.lists.iter().enumerate() {
            for &j in list {
                out[[i, j]] = 1.0;
            }
        }
        out
    }
}

/// The mask applied by one forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Mask<'a> {
    SineDegree(ArrayView1<'a, f64>),
    AllOnes,
    Adjacency(&'a Neighborhoods),
}

impl Mask<'_> {
    pub fn mode(&self) -> MaskMode {
        match self {
            Mask::SineDegree(_) => MaskMode::SineDegree,
            Mask::AllOnes => MaskMode::AllOnes,
            Mask::Adjacency(_) => MaskMode::Adjacency,
        }
    }
}

pub fn kernel_input_scale(m: usize) -> f64 {
    (m as f64).powf(-0.25)
}

/// `M_ij = sin((pi/2) (z_i + z_j) / 2)`.
pub fn sine_mask_entry(z_i: f64, z_j: f64) -> f64 {
    (FRAC_PI_4 * (z_i + z_j)).sin()
}

pub fn project_qkv(
    x: ArrayView2<f64>,
    w_q: ArrayView2<f64>,
    w_k: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>, Array2<f64>)> {
    let m = x.ncols();
    for (name, w) in [("W_Q", w_q), ("W_K", w_k)] {
        if w.dim() != (m, m) {
            return Err(Error::Shape {
                op: "project_qkv",
                expected: format!("{name} {m}x{m}"),
                actual: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
    }
    Ok((x.dot(&w_q), x.dot(&w_k), x.to_owned()))
}

fn check_shapes(
    x: ArrayView2<f64>,
    w_q: ArrayView2<f64>,
    w_k: ArrayView2<f64>,
    mask: &Mask,
    map: &FeatureMap,
) -> Result<()> {
    let (n, m) = x.dim();
    if n == 0 {
        return Err(Error::EmptyInput(
            "attention needs at least one token".into(),
        ));
    }
    if map.dim != m {
        return Err(Error::Shape {
            op: "attention",
            expected: format!("feature map dim {m}"),
            actual: map.dim.to_string(),
        });
    }
    for (name, w) in [("W_Q", w_q), ("W_K", w_k)] {
        if w.dim() != (m, m) {
            return Err(Error::Shape {
                op: "attention",
                expected: format!("{name} {m}x{m}"),
                actual: format!("{}x{}", w.nrows(), w.ncols()),
            });
        }
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name.into()));
        }
    }
    match mask {
        Mask::SineDegree(z) => {
            if z.len() != n {
                return Err(Error::Shape {
                    op: "attention",
                    expected: format!("{n} degree centralities"),
                    actual: z.len().to_string(),
                });
            }
            if let Some(bad) = z.iter().position(|v| !(*v > 0.0 && *v < 1.0)) {
                return Err(Error::invalid(format!(
                    "degree centrality of token {bad} is {} (must be in (0, 1))",
                    z[bad]
                )));
            }
        }
        Mask::Adjacency(nb) => {
            if nb.len() != n {
                return Err(Error::Shape {
                    op: "attention",
                    expected: format!("{n} neighbourhoods"),
                    actual: nb.len().to_string(),
                });
            }
        }
        Mask::AllOnes => {}
    }
    Ok(())
}

/// Global key summaries of the factorized mask, one entry per branch.
#[derive(Debug, Clone, PartialEq)]
pub struct KeySummaries {
    /// `sum_j w_j phi(k_j) v_j^T`, each `m x m`.
    pub kv: Vec<Array2<f64>>,
    /// `sum_j w_j phi(k_j)`, each length `m`.
    pub k: Vec<Array1<f64>>,
}

/// Per-token (query weight, key weight) pairs of each mask branch.
fn branch_weights(mask: &Mask, n: usize) -> Vec<(Array1<f64>, Array1<f64>)> {
    match mask {
        Mask::SineDegree(z) => {
            let s = z.mapv(|v| (FRAC_PI_4 * v).sin());
            let c = z.mapv(|v| (FRAC_PI_4 * v).cos());
            vec![(s.clone(), c.clone()), (c, s)]
        }
        Mask::AllOnes | Mask::Adjacency(_) => vec![(Array1::ones(n), Array1::ones(n))],
    }
}

fn scale_rows(a: &Array2<f64>, w: ArrayView1<f64>) -> Array2<f64> {
    let mut out = a.clone();
    for (mut row, s) in out.axis_iter_mut(Axis(0)).zip(w.iter()) {
        row *= *s;
    }
    out
}

fn row_dots(a: &Array2<f64>, b: &Array2<f64>) -> Array1<f64> {
    Zip::from(a.rows())
        .and(b.rows())
        .map_collect(|x, y| x.dot(&y))
}

fn select_rows(a: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    a.select(Axis(0), rows)
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionTape {
    rows: Vec<usize>,
    scale: f64,
    q_in: Array2<f64>,
    phi_q: Array2<f64>,
    k_in: Array2<f64>,
    phi_k: Array2<f64>,
    h: Array2<f64>,
    den: Array1<f64>,
    branches: Vec<(Array1<f64>, Array1<f64>)>,
    summaries: Option<KeySummaries>,
    /// Summaries were supplied by the caller and are treated as constants.
    frozen: bool,
}

impl AttentionTape {
    pub fn summaries(&self) -> Option<&KeySummaries> {
        self.summaries.as_ref()
    }
}

/// Gradients of an attention pass w.r.t. its inputs.
#[derive(Debug, Clone)]
pub struct AttentionGrads {
    pub dx: Array2<f64>,
    pub dw_q: Array2<f64>,
    pub dw_k: Array2<f64>,
    /// Present for the sine mask only.
    pub dz: Option<Array1<f64>>,
}

/// Attention outputs for the query tokens in `rows`, plus a tape for
/// [`attention_backward`]. `rows` must not repeat a token. Supplying
/// `frozen` summaries (factorized masks only) skips recomputing them, and
/// the backward pass then sends no gradient through keys or values.
pub fn attention_forward(
    x: ArrayView2<f64>,
    w_q: ArrayView2<f64>,
    w_k: ArrayView2<f64>,
    mask: Mask,
    map: &FeatureMap,
    rows: &[usize],
    frozen: Option<&KeySummaries>,
) -> Result<(Array2<f64>, AttentionTape)> {
    check_shapes(x, w_q, w_k, &mask, map)?;
    let (n, m) = x.dim();
    if let Some(&bad) = rows.iter().find(|&&r| r >= n) {
        return Err(Error::invalid(format!(
            "query token {bad} out of range ({n} tokens)"
        )));
    }
    let scale = kernel_input_scale(m);

    let x_rows = select_rows(x, rows);
    let q_in = x_rows.dot(&w_q) * scale;
    let phi_q = map.apply_rows(q_in.view(), Shift::PerRow);

    let need_keys = frozen.is_none() || matches!(mask, Mask::Adjacency(_));
    let (k_in, phi_k) = if need_keys {
        let k_in = x.dot(&w_k) * scale;
        let phi_k = map.apply_rows(k_in.view(), Shift::Global);
        (k_in, phi_k)
    } else {
        (Array2::zeros((0, m)), Array2::zeros((0, m)))
    };

    let all_branches = branch_weights(&mask, n);

    let (h, den, summaries) = match mask {
        Mask::Adjacency(nb) => {
            let mut h = Array2::zeros((rows.len(), m));
            let mut den = Array1::zeros(rows.len());
            for (r, &tok) in rows.iter().enumerate() {
                let pq = phi_q.row(r);
                let mut acc = h.row_mut(r);
                let mut total = 0.0;
                for &j in nb.neighbors(tok) {
                    let a = pq.dot(&phi_k.row(j));
                    total += a;
                    acc.scaled_add(a, &x.row(j));
                }
                den[r] = total;
                if !(total > 0.0 && total.is_finite()) {
                    return Err(Error::ZeroDenominator { token: tok });
                }
                acc /= total;
            }
            (h, den, None)
        }
        _ => {
            let summaries = match frozen {
                Some(s) => s.clone(),
                None => {
                    let mut kv = Vec::with_capacity(all_branches.len());
                    let mut k = Vec::with_capacity(all_branches.len());
                    for (_, key_w) in &all_branches {
                        let weighted = scale_rows(&phi_k, key_w.view());
                        kv.push(weighted.t().dot(&x));
                        k.push(weighted.sum_axis(Axis(0)));
                    }
                    KeySummaries { kv, k }
                }
            };
            if summaries.kv.len() != all_branches.len() {
                return Err(Error::invalid("frozen summaries do not match the mask"));
            }
            let mut num = Array2::zeros((rows.len(), m));
            let mut den = Array1::zeros(rows.len());
            for ((query_w, _), (kv, ksum)) in all_branches
                .iter()
                .zip(summaries.kv.iter().zip(&summaries.k))
            {
                let qw = scale_rows(&phi_q, query_w.select(Axis(0), rows).view());
                num += &qw.dot(kv);
                den += &qw.dot(ksum);
            }
            for (r, d) in den.iter().enumerate() {
                if !(*d > 0.0 && d.is_finite()) {
                    return Err(Error::ZeroDenominator { token: rows[r] });
                }
            }
            let h = num / den.view().insert_axis(Axis(1));
            (h, den, Some(summaries))
        }
    };

    let tape = AttentionTape {
        rows: rows.to_vec(),
        scale,
        q_in,
        phi_q,
        k_in,
        phi_k,
        h: h.clone(),
        den,
        branches: all_branches,
        summaries,
        frozen: frozen.is_some(),
    };
    Ok((h, tape))
}

/// Reverse-mode pass for [`attention_forward`]; `dh` is aligned with the
/// forward's `rows`. The same inputs and mask must be passed again.
pub fn attention_backward(
    tape: &AttentionTape,
    x: ArrayView2<f64>,
    w_q: ArrayView2<f64>,
    w_k: ArrayView2<f64>,
    mask: Mask,
    map: &FeatureMap,
    dh: ArrayView2<f64>,
) -> AttentionGrads {
    let (n, m) = x.dim();
    let rows = &tape.rows;
    assert_eq!(dh.dim(), (rows.len(), m), "dh must match the forward rows");

    let mut dx = Array2::<f64>::zeros((n, m));
    let mut dphi_q = Array2::<f64>::zeros((rows.len(), m));
    let mut dphi_k = Array2::<f64>::zeros(tape.phi_k.raw_dim());
    let mut dz: Option<Array1<f64>> = None;

    // h = num / den
    let dnum = dh.to_owned() / tape.den.view().insert_axis(Axis(1));
    let dden = -row_dots(&dh.to_owned(), &tape.h) / &tape.den;

    match mask {
        Mask::Adjacency(nb) => {
            for (r, &tok) in rows.iter().enumerate() {
                let pq = tape.phi_q.row(r);
                let g = dnum.row(r);
                let h = tape.h.row(r);
                for &j in nb.neighbors(tok) {
                    let pk = tape.phi_k.row(j);
                    let a = pq.dot(&pk);
                    // d a_ij = g . (v_j - h_i) / den_i
                    let da = g.dot(&x.row(j)) - g.dot(&h);
                    dx.row_mut(j).scaled_add(a, &g);
                    dphi_q.row_mut(r).scaled_add(da, &pk);
                    dphi_k.row_mut(j).scaled_add(da, &pq);
                }
            }
        }
        _ => {
            let summaries = tape
                .summaries
                .as_ref()
                .expect("factorized pass keeps summaries");
            let mut d_query_w = Vec::with_capacity(tape.branches.len());
            let mut d_key_w = Vec::with_capacity(tape.branches.len());
            for ((query_w, key_w), (kv, ksum)) in tape
                .branches
                .iter()
                .zip(summaries.kv.iter().zip(&summaries.k))
            {
                let qw_rows = query_w.select(Axis(0), rows);
                // t_i = kv . dnum_i
                let t = dnum.dot(&kv.t());
                let phi_dot_k = tape.phi_q.dot(ksum);
                let mut local = t.clone();
                for (mut row, dd) in local.axis_iter_mut(Axis(0)).zip(dden.iter()) {
                    row.scaled_add(*dd, ksum);
                }
                dphi_q += &scale_rows(&local, qw_rows.view());
                d_query_w.push(row_dots(&tape.phi_q, &t) + &(&dden * &phi_dot_k));

                if tape.frozen {
                    d_key_w.push(Array1::zeros(n));
                    continue;
                }
                let qw = scale_rows(&tape.phi_q, qw_rows.view());
                let d_kv = qw.t().dot(&dnum);
                let d_ksum = qw.t().dot(&dden);
                // per key: d phi_k_j = w_j (d_kv v_j + d_ksum)
                let mut through = x.dot(&d_kv.t());
                let key_dot = row_dots(&tape.phi_k, &through) + &tape.phi_k.dot(&d_ksum);
                for mut row in through.axis_iter_mut(Axis(0)) {
                    row += &d_ksum;
                }
                dphi_k += &scale_rows(&through, key_w.view());
                let weighted_k = scale_rows(&tape.phi_k, key_w.view());
                dx += &weighted_k.dot(&d_kv);
                d_key_w.push(key_dot);
            }

            if let Mask::SineDegree(z) = mask {
                // branches: (sin, cos) then (cos, sin)
                let mut grad = Array1::zeros(n);
                let d_sin_key = &d_key_w[1];
                let d_cos_key = &d_key_w[0];
                for t in 0..n {
                    let a = FRAC_PI_4 * z[t];
                    grad[t] = FRAC_PI_4 * (a.cos() * d_sin_key[t] - a.sin() * d_cos_key[t]);
                }
                for (r, &tok) in rows.iter().enumerate() {
                    let a = FRAC_PI_4 * z[tok];
                    grad[tok] +=
                        FRAC_PI_4 * (a.cos() * d_query_w[0][r] - a.sin() * d_query_w[1][r]);
                }
                dz = Some(grad);
            }
        }
    }

    let d_q_in = map.backward_rows(tape.q_in.view(), tape.phi_q.view(), dphi_q.view());
    let dq = d_q_in * tape.scale;
    let x_rows = select_rows(x, rows);
    let dw_q = x_rows.t().dot(&dq);
    let dx_rows = dq.dot(&w_q.t());
    for (r, &tok) in rows.iter().enumerate() {
        dx.row_mut(tok).scaled_add(1.0, &dx_rows.row(r));
    }

    let dw_k = if tape.k_in.nrows() == n && !(tape.frozen && mask.mode() != MaskMode::Adjacency) {
        let d_k_in = map.backward_rows(tape.k_in.view(), tape.phi_k.view(), dphi_k.view());
        let dk = d_k_in * tape.scale;
        dx += &dk.dot(&w_k.t());
        x.t().dot(&dk)
    } else {
        Array2::zeros((m, m))
    };

    AttentionGrads { dx, dw_q, dw_k, dz }
}

fn all_rows(n: usize) -> Vec<usize> {
    (0..n).collect()
}

fn inputs_mask<'a>(inputs: &AttentionInputs<'a>) -> Result<Mask<'a>> {
    match inputs.mask_mode {
        MaskMode::SineDegree => Ok(Mask::SineDegree(inputs.degree_z)),
        MaskMode::AllOnes => Ok(Mask::AllOnes),
        MaskMode::Adjacency => Err(Error::invalid(
            "adjacency masks need a graph; use adjacency_masked_attention",
        )),
    }
}

/// Rows per block in [`masked_linear_attention`].
const STREAM_BLOCK: usize = 256;

/// Linear-time masked attention for the sine-degree and all-ones masks.
///
/// Inference only: keys and then queries are streamed in row blocks, so
/// the working set stays at a few blocks plus the `m x m` summaries. The
/// global key shift is tracked online; when a block raises it, the
/// running summaries are rescaled.
pub fn masked_linear_attention(
    inputs: &AttentionInputs,
    map: &FeatureMap,
) -> Result<AttentionOutput> {
    let mask = inputs_mask(inputs)?;
    let (x, w_q, w_k) = (inputs.x, inputs.w_q, inputs.w_k);
    check_shapes(x, w_q, w_k, &mask, map)?;
    let (n, m) = x.dim();
    let scale = kernel_input_scale(m);
    let branches = branch_weights(&mask, n);

    let mut kv = vec![Array2::<f64>::zeros((m, m)); branches.len()];
    let mut ksum = vec![Array1::<f64>::zeros(m); branches.len()];
    let mut offset = f64::NEG_INFINITY;
    for start in (0..n).step_by(STREAM_BLOCK) {
        let end = (start + STREAM_BLOCK).min(n);
        let xb = x.slice(s![start..end, ..]);
        let (phi_k, c) = map.apply_rows_offset((xb.dot(&w_k) * scale).view(), Shift::Global);
        let block_factor = if c > offset {
            let old = (offset - c).exp();
            for (a, b) in kv.iter_mut().zip(ksum.iter_mut()) {
                *a *= old;
                *b *= old;
            }
            offset = c;
            1.0
        } else {
            (c - offset).exp()
        };
        for ((_, key_w), (a, b)) in branches.iter().zip(kv.iter_mut().zip(ksum.iter_mut())) {
            let mut weighted = phi_k.clone();
            for (mut row, w) in weighted
                .axis_iter_mut(Axis(0))
                .zip(key_w.slice(s![start..end]).iter())
            {
                row *= *w * block_factor;
            }
            *a += &weighted.t().dot(&xb);
            *b += &weighted.sum_axis(Axis(0));
        }
    }

    let mut h = Array2::zeros((n, m));
    for start in (0..n).step_by(STREAM_BLOCK) {
        let end = (start + STREAM_BLOCK).min(n);
        let xb = x.slice(s![start..end, ..]);
        let phi_q = map.apply_rows((xb.dot(&w_q) * scale).view(), Shift::PerRow);
        let mut num = Array2::<f64>::zeros((end - start, m));
        let mut den = Array1::<f64>::zeros(end - start);
        for ((query_w, _), (a, b)) in branches.iter().zip(kv.iter().zip(&ksum)) {
            let qw = scale_rows(&phi_q, query_w.slice(s![start..end]));
            num += &qw.dot(a);
            den += &qw.dot(b);
        }
        for (r, d) in den.iter().enumerate() {
            if !(*d > 0.0 && d.is_finite()) {
                return Err(Error::ZeroDenominator { token: start + r });
            }
        }
        h.slice_mut(s![start..end, ..])
            .assign(&(num / den.insert_axis(Axis(1))));
    }
    Ok(AttentionOutput { h })
}

/// Adjacency-masked attention by sparse accumulation over neighbourhoods.
pub fn adjacency_masked_attention(
    inputs: &AttentionInputs,
    map: &FeatureMap,
    neighborhoods: &Neighborhoods,
) -> Result<AttentionOutput> {
    let rows = all_rows(inputs.x.nrows());
    let (h, _) = attention_forward(
        inputs.x,
        inputs.w_q,
        inputs.w_k,
        Mask::Adjacency(neighborhoods),
        map,
        &rows,
        None,
    )?;
    Ok(AttentionOutput { h })
}

/// Quadratic reference: materializes the `n x n` mask and attention scores.
pub fn dense_oracle(
    inputs: &AttentionInputs,
    map: &FeatureMap,
    use_softmax: bool,
) -> Result<AttentionOutput> {
    let n = inputs.x.nrows();
    if n > DENSE_GUARD {
        return Err(Error::invalid(format!(
            "dense oracle limited to {DENSE_GUARD} tokens, got {n}"
        )));
    }
    let mask = match inputs_mask(inputs)? {
        Mask::SineDegree(z) => {
            check_shapes(inputs.x, inputs.w_q, inputs.w_k, &Mask::SineDegree(z), map)?;
            Array2::from_shape_fn((n, n), |(i, j)| sine_mask_entry(z[i], z[j]))
        }
        _ => Array2::ones((n, n)),
    };
    dense_oracle_with_mask(inputs, map, use_softmax, mask.view())
}

/// Quadratic reference with an arbitrary dense mask.
pub fn dense_oracle_with_mask(
    inputs: &AttentionInputs,
    map: &FeatureMap,
    use_softmax: bool,
    mask: ArrayView2<f64>,
) -> Result<AttentionOutput> {
    let (n, m) = inputs.x.dim();
    if n > DENSE_GUARD {
        return Err(Error::invalid(format!(
            "dense oracle limited to {DENSE_GUARD} tokens, got {n}"
        )));
    }
    check_shapes(inputs.x, inputs.w_q, inputs.w_k, &Mask::AllOnes, map)?;
    if mask.dim() != (n, n) {
        return Err(Error::Shape {
            op: "dense_oracle",
            expected: format!("{n}x{n} mask"),
            actual: format!("{}x{}", mask.nrows(), mask.ncols()),
        });
    }
    let (q, k, v) = project_qkv(inputs.x, inputs.w_q, inputs.w_k)?;

    let mut scores = if use_softmax {
        let mut s = q.dot(&k.t()) / (m as f64).sqrt();
        for mut row in s.axis_iter_mut(Axis(0)) {
            let top = row.fold(f64::NEG_INFINITY, |a, b| a.max(*b));
            row.mapv_inplace(|v| (v - top).exp());
        }
        s
    } else {
        let scale = kernel_input_scale(m);
        let phi_q = map.apply_rows((q * scale).view(), Shift::None);
        let phi_k = map.apply_rows((k * scale).view(), Shift::None);
        let mut s = Array2::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                s[[i, j]] = phi_q.row(i).dot(&phi_k.row(j));
            }
        }
        s
    };
    scores *= &mask;

    let mut h = Array2::zeros((n, m));
    for i in 0..n {
        let mut total = 0.0;
        for j in 0..n {
            let w = scores[[i, j]];
            total += w;
            for c in 0..m {
                h[[i, c]] += w * v[[j, c]];
            }
        }
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::ZeroDenominator { token: i });
        }
        for c in 0..m {
            h[[i, c]] /= total;
        }
    }
    Ok(AttentionOutput { h })
}
