//! Trainable parameters, the alignment + uniformity loss, reverse-mode
//! gradients through the whole model, and the Adam training loop.

use std::time::Instant;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{
    attention_backward, attention_forward, KeySummaries, Mask, MaskMode, Neighborhoods,
};
use crate::config::RunConfig;
use crate::error::{Error, ErrorClass, Result};
use crate::evaluation::{evaluate, Representations};
use crate::graph_data::{InteractionGraph, Split};
use crate::kernel_features::FeatureMap;
use crate::spectral::StructuralEncodings;

/// `floor(log2(degree + 1))`, capped at `buckets - 1`.
pub fn degree_bucket(degree: u64, buckets: usize) -> usize {
    let b = (u64::BITS - 1 - degree.saturating_add(1).leading_zeros()) as usize;
    b.min(buckets.saturating_sub(1))
}

fn sigmoid(t: f64) -> f64 {
    1.0 / (1.0 + (-t).exp())
}

/// Every trainable tensor. Also used to hold gradients and Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// One row per token, users first.
    pub embeddings: Array2<f64>,
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    /// One row per degree bucket.
    pub degree_table: Array2<f64>,
    pub degree_weight: Array1<f64>,
    pub degree_bias: f64,
}

pub const PARAM_NAMES: [&str; 6] = [
    "embeddings",
    "w_q",
    "w_k",
    "degree_table",
    "degree_weight",
    "degree_bias",
];

impl ModelParams {
    /// `E ~ N(0, 0.1^2)`, `W_Q, W_K = I + N(0, 0.01^2)`, zero degree table
    /// and bias, degree weight `~ N(0, 0.1^2)`. Every `z` starts at 0.5.
    pub fn init(
        tokens: usize,
        d: usize,
        m: usize,
        buckets: usize,
        degree_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let wide = Normal::new(0.0, 0.1).unwrap();
        let narrow = Normal::new(0.0, 0.01).unwrap();
        let embeddings = Array2::from_shape_simple_fn((tokens, d), || wide.sample(&mut rng));
        let mut w_q = Array2::from_shape_simple_fn((m, m), || narrow.sample(&mut rng));
        let mut w_k = Array2::from_shape_simple_fn((m, m), || narrow.sample(&mut rng));
        for i in 0..m {
            w_q[[i, i]] += 1.0;
            w_k[[i, i]] += 1.0;
        }
        let degree_weight = Array1::from_shape_simple_fn(degree_dim, || wide.sample(&mut rng));
        Self {
            embeddings,
            w_q,
            w_k,
            degree_table: Array2::zeros((buckets, degree_dim)),
            degree_weight,
            degree_bias: 0.0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            embeddings: Array2::zeros(self.embeddings.raw_dim()),
            w_q: Array2::zeros(self.w_q.raw_dim()),
            w_k: Array2::zeros(self.w_k.raw_dim()),
            degree_table: Array2::zeros(self.degree_table.raw_dim()),
            degree_weight: Array1::zeros(self.degree_weight.raw_dim()),
            degree_bias: 0.0,
        }
    }

    /// Flat views in [`PARAM_NAMES`] order.
    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.embeddings.as_slice().expect("standard layout"),
            self.w_q.as_slice().expect("standard layout"),
            self.w_k.as_slice().expect("standard layout"),
            self.degree_table.as_slice().expect("standard layout"),
            self.degree_weight.as_slice().expect("standard layout"),
            std::slice::from_ref(&self.degree_bias),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.embeddings.as_slice_mut().expect("standard layout"),
            self.w_q.as_slice_mut().expect("standard layout"),
            self.w_k.as_slice_mut().expect("standard layout"),
            self.degree_table.as_slice_mut().expect("standard layout"),
            self.degree_weight.as_slice_mut().expect("standard layout"),
            std::slice::from_mut(&mut self.degree_bias),
        ]
    }

    /// Name of the first tensor holding a NaN or infinity.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        self.tensors()
            .iter()
            .zip(PARAM_NAMES)
            .find(|(t, _)| t.iter().any(|v| !v.is_finite()))
            .map(|(_, name)| name)
    }

    /// Name of the first tensor with a value that `f32` cannot hold.
    pub fn first_out_of_f32_range(&self) -> Option<&'static str> {
        let max = f32::MAX as f64;
        self.tensors()
            .iter()
            .zip(PARAM_NAMES)
            .find(|(t, _)| t.iter().any(|v| !(v.abs() <= max)))
            .map(|(_, name)| name)
    }

    /// Rounds every value through `f32`, the checkpoint precision.
    pub fn round_to_f32(&mut self) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub align: f64,
    pub uniform: f64,
    pub total: f64,
}

/// `log mean_{a != b} exp(-|y_a - y_b|^2)` and its gradient.
fn uniformity(y: ArrayView2<f64>) -> (f64, Array2<f64>) {
    let b = y.nrows();
    let mut d2 = Array2::<f64>::zeros((b, b));
    for a in 0..b {
        for c in (a + 1)..b {
            let diff = &y.row(a) - &y.row(c);
            let v = diff.dot(&diff);
            d2[[a, c]] = v;
            d2[[c, a]] = v;
        }
    }
    let mut shift = f64::NEG_INFINITY;
    for a in 0..b {
        for c in 0..b {
            if a != c {
                shift = shift.max(-d2[[a, c]]);
            }
        }
    }
    let mut weights = Array2::<f64>::zeros((b, b));
    let mut sum = 0.0;
    for a in 0..b {
        for c in 0..b {
            if a != c {
                let w = (-d2[[a, c]] - shift).exp();
                weights[[a, c]] = w;
                sum += w;
            }
        }
    }
    let value = shift + sum.ln() - ((b * (b - 1)) as f64).ln();

    // d/dy_a = -4 sum_c (w_ac / S) (y_a - y_c); the 2 from the symmetric
    // pair and the 2 from the squared distance.
    weights /= sum;
    let row_sums = weights.sum_axis(Axis(1));
    let mut grad = weights.dot(&y);
    grad -= &(&y * &row_sums.insert_axis(Axis(1)));
    grad *= 4.0;
    (value, grad)
}

fn check_batch(users: ArrayView2<f64>, items: ArrayView2<f64>) -> Result<()> {
    if users.dim() != items.dim() {
        return Err(Error::Shape {
            op: "directau_loss",
            expected: format!("{:?}", users.dim()),
            actual: format!("{:?}", items.dim()),
        });
    }
    if users.nrows() < 2 {
        return Err(Error::invalid(
            "uniformity needs a batch of at least 2 pairs",
        ));
    }
    Ok(())
}

/// Alignment + `lambda` x uniformity over a batch of matched user/item rows.
pub fn directau_loss(
    users: ArrayView2<f64>,
    items: ArrayView2<f64>,
    lambda: f64,
) -> Result<LossBreakdown> {
    directau_loss_grad(users, items, lambda).map(|(l, _, _)| l)
}

/// [`directau_loss`] with gradients w.r.t. the user and item rows.
pub fn directau_loss_grad(
    users: ArrayView2<f64>,
    items: ArrayView2<f64>,
    lambda: f64,
) -> Result<(LossBreakdown, Array2<f64>, Array2<f64>)> {
    check_batch(users, items)?;
    let b = users.nrows() as f64;
    let diff = &users - &items;
    let align = diff.iter().map(|v| v * v).sum::<f64>() / b;
    let (uu, gu) = uniformity(users);
    let (ui, gi) = uniformity(items);
    let uniform = uu + ui;
    let mut du = &diff * (2.0 / b);
    let mut di = -&du;
    if lambda != 0.0 {
        du.scaled_add(lambda, &gu);
        di.scaled_add(lambda, &gi);
    }
    let loss = LossBreakdown {
        align,
        uniform,
        total: align + lambda * uniform,
    };
    Ok((loss, du, di))
}

/// Frozen model structure: encodings, feature map, mask and flags.
#[derive(Debug, Clone)]
pub struct Model {
    /// Structural encodings per token; zero columns when disabled.
    pub encodings: Array2<f64>,
    pub token_buckets: Vec<usize>,
    pub map: FeatureMap,
    pub mask_mode: MaskMode,
    pub neighborhoods: Option<Neighborhoods>,
    pub num_users: usize,
    pub normalize: bool,
    pub residual: bool,
}

/// Output of one batch step.
#[derive(Debug, Clone)]
pub struct StepResult {
    pub loss: LossBreakdown,
    pub grads: ModelParams,
    /// Key summaries computed this step (factorized masks, fresh steps).
    pub summaries: Option<KeySummaries>,
}

impl Model {
    pub fn new(
        graph: &InteractionGraph,
        encodings: Option<&StructuralEncodings>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let n = graph.num_nodes();
        let encodings = if cfg.structural_encodings {
            let enc = encodings
                .ok_or_else(|| Error::invalid("structural encodings are enabled but missing"))?;
            if enc.rank() != cfg.d {
                return Err(Error::Shape {
                    op: "model encodings",
                    expected: format!("rank {}", cfg.d),
                    actual: format!("rank {}", enc.rank()),
                });
            }
            let p = enc.token_matrix();
            if p.nrows() != n {
                return Err(Error::Shape {
                    op: "model encodings",
                    expected: format!("{n} tokens"),
                    actual: format!("{} tokens", p.nrows()),
                });
            }
            p
        } else {
            Array2::zeros((n, 0))
        };
        let m = cfg.token_dim();
        let map = FeatureMap::new(cfg.feature_map, m, cfg.simrf_seed, cfg.focus_power)?;
        let token_buckets = graph
            .token_degrees(cfg.degree_source)
            .into_iter()
            .map(|deg| degree_bucket(deg, cfg.degree_buckets))
            .collect();
        let neighborhoods = (cfg.mask_mode == MaskMode::Adjacency)
            .then(|| Neighborhoods::from_graph(graph, Split::Train, cfg.self_loops));
        Ok(Self {
            encodings,
            token_buckets,
            map,
            mask_mode: cfg.mask_mode,
            neighborhoods,
            num_users: graph.num_users,
            normalize: cfg.normalize,
            residual: cfg.residual,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.token_buckets.len()
    }

    pub fn token_dim(&self) -> usize {
        self.map.dim
    }

    pub fn embedding_dim(&self) -> usize {
        self.token_dim() - self.encodings.ncols()
    }

    pub fn check_params(&self, params: &ModelParams) -> Result<()> {
        let (n, m, d) = (self.num_tokens(), self.token_dim(), self.embedding_dim());
        let shape_err = |what: &str, want: String, got: String| {
            Err(Error::Shape {
                op: "model parameters",
                expected: format!("{what} {want}"),
                actual: got,
            })
        };
        if params.embeddings.dim() != (n, d) {
            return shape_err(
                "embeddings",
                format!("{:?}", (n, d)),
                format!("{:?}", params.embeddings.dim()),
            );
        }
        if params.w_q.dim() != (m, m) || params.w_k.dim() != (m, m) {
            return shape_err(
                "projections",
                format!("{:?}", (m, m)),
                format!("{:?}", params.w_q.dim()),
            );
        }
        let buckets = params.degree_table.nrows();
        if self.token_buckets.iter().any(|&b| b >= buckets) {
            return shape_err(
                "degree table",
                "rows for every bucket".into(),
                format!("{buckets} rows"),
            );
        }
        if params.degree_weight.len() != params.degree_table.ncols() {
            return shape_err(
                "degree weight",
                params.degree_table.ncols().to_string(),
                params.degree_weight.len().to_string(),
            );
        }
        Ok(())
    }

    /// Token inputs `X = [E, P]`.
    pub fn inputs(&self, params: &ModelParams) -> Array2<f64> {
        let (n, d) = params.embeddings.dim();
        let mut x = Array2::zeros((n, self.token_dim()));
        x.slice_mut(s![.., ..d]).assign(&params.embeddings);
        x.slice_mut(s![.., d..]).assign(&self.encodings);
        x
    }

    /// Per-bucket centrality `sigmoid(table[b] . w + bias)`.
    fn bucket_z(&self, params: &ModelParams) -> Array1<f64> {
        params
            .degree_table
            .dot(&params.degree_weight)
            .mapv(|t| sigmoid(t + params.degree_bias))
    }

    /// Learned degree centrality of every token, in `(0, 1)`.
    pub fn degree_centrality(&self, params: &ModelParams) -> Array1<f64> {
        let zb = self.bucket_z(params);
        self.token_buckets.iter().map(|&b| zb[b]).collect()
    }

    /// [`Self::degree_centrality`], failing once the sigmoid saturates.
    fn checked_centrality(&self, params: &ModelParams) -> Result<Array1<f64>> {
        let z = self.degree_centrality(params);
        if let Some(v) = z.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
            return Err(Error::Numerical(format!(
                "degree centrality saturated at {v}"
            )));
        }
        Ok(z)
    }

    fn mask<'a>(&'a self, z: &'a Array1<f64>) -> Mask<'a> {
        match self.mask_mode {
            MaskMode::SineDegree => Mask::SineDegree(z.view()),
            MaskMode::AllOnes => Mask::AllOnes,
            MaskMode::Adjacency => {
                Mask::Adjacency(self.neighborhoods.as_ref().expect("built with the model"))
            }
        }
    }

    /// Final representations of every token.
    pub fn forward_all(&self, params: &ModelParams) -> Result<Array2<f64>> {
        self.check_params(params)?;
        let x = self.inputs(params);
        let z = self.checked_centrality(params)?;
        let rows: Vec<usize> = (0..self.num_tokens()).collect();
        let (mut out, _) = attention_forward(
            x.view(),
            params.w_q.view(),
            params.w_k.view(),
            self.mask(&z),
            &self.map,
            &rows,
            None,
        )?;
        if self.residual {
            out += &x;
        }
        if self.normalize {
            for mut row in out.rows_mut() {
                let norm = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
                row /= norm;
            }
        }
        Ok(out)
    }

    pub fn representations(&self, params: &ModelParams) -> Result<Representations> {
        Ok(Representations::from_tokens(
            &self.forward_all(params)?,
            self.num_users,
        ))
    }

    /// Loss and exact gradients on a batch of training pairs. With
    /// `frozen` summaries the key/value path gets no gradient.
    pub fn step(
        &self,
        params: &ModelParams,
        batch: &[(usize, usize)],
        lambda: f64,
        frozen: Option<&KeySummaries>,
    ) -> Result<StepResult> {
        self.check_params(params)?;
        if batch.len() < 2 {
            return Err(Error::invalid("batch needs at least 2 pairs"));
        }
        let n = self.num_tokens();
        let m = self.token_dim();
        let d = self.embedding_dim();
        let user_tok: Vec<usize> = batch.iter().map(|&(u, _)| u).collect();
        let item_tok: Vec<usize> = batch.iter().map(|&(_, i)| self.num_users + i).collect();
        if let Some(&bad) = user_tok.iter().chain(&item_tok).find(|&&t| t >= n) {
            return Err(Error::invalid(format!("batch token {bad} out of range")));
        }
        let mut rows: Vec<usize> = user_tok.iter().chain(&item_tok).copied().collect();
        rows.sort_unstable();
        rows.dedup();
        let pos = |t: usize| rows.binary_search(&t).expect("token is in rows");

        let x = self.inputs(params);
        let z = self.checked_centrality(params)?;
        let (h, tape) = attention_forward(
            x.view(),
            params.w_q.view(),
            params.w_k.view(),
            self.mask(&z),
            &self.map,
            &rows,
            frozen,
        )?;
        let mut out = h;
        if self.residual {
            out += &x.select(Axis(0), &rows);
        }
        let norms: Array1<f64> = out
            .rows()
            .into_iter()
            .map(|r| r.dot(&r).sqrt().max(f64::MIN_POSITIVE))
            .collect();
        let y = if self.normalize {
            &out / &norms.view().insert_axis(Axis(1))
        } else {
            out.clone()
        };

        let yu = y.select(
            Axis(0),
            &user_tok.iter().map(|&t| pos(t)).collect::<Vec<_>>(),
        );
        let yi = y.select(
            Axis(0),
            &item_tok.iter().map(|&t| pos(t)).collect::<Vec<_>>(),
        );
        let (loss, du, di) = directau_loss_grad(yu.view(), yi.view(), lambda)?;
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("loss".into()));
        }

        let mut dy = Array2::<f64>::zeros((rows.len(), m));
        for (b, &t) in user_tok.iter().enumerate() {
            let mut r = dy.row_mut(pos(t));
            r += &du.row(b);
        }
        for (b, &t) in item_tok.iter().enumerate() {
            let mut r = dy.row_mut(pos(t));
            r += &di.row(b);
        }
        let dout = if self.normalize {
            let mut g = dy;
            for ((mut gr, yr), nrm) in g.rows_mut().into_iter().zip(y.rows()).zip(norms.iter()) {
                let proj = yr.dot(&gr);
                gr.scaled_add(-proj, &yr);
                gr /= *nrm;
            }
            g
        } else {
            dy
        };

        let ag = attention_backward(
            &tape,
            x.view(),
            params.w_q.view(),
            params.w_k.view(),
            self.mask(&z),
            &self.map,
            dout.view(),
        );
        let mut dx = ag.dx;
        if self.residual {
            for (r, &t) in rows.iter().enumerate() {
                let mut row = dx.row_mut(t);
                row += &dout.row(r);
            }
        }

        let mut grads = params.zeros_like();
        grads.embeddings.assign(&dx.slice(s![.., ..d]));
        grads.w_q = ag.dw_q;
        grads.w_k = ag.dw_k;
        if let Some(dz) = ag.dz {
            let zb = self.bucket_z(params);
            let mut per_bucket = Array1::<f64>::zeros(zb.len());
            for (t, &b) in self.token_buckets.iter().enumerate() {
                per_bucket[b] += dz[t] * zb[b] * (1.0 - zb[b]);
            }
            for (b, &g) in per_bucket.iter().enumerate() {
                if g != 0.0 {
                    let mut row = grads.degree_table.row_mut(b);
                    row.scaled_add(g, &params.degree_weight);
                    grads
                        .degree_weight
                        .scaled_add(g, &params.degree_table.row(b));
                    grads.degree_bias += g;
                }
            }
        }
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        Ok(StepResult {
            loss,
            grads,
            summaries: tape.summaries().cloned(),
        })
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    first: ModelParams,
    second: ModelParams,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            first: params.zeros_like(),
            second: params.zeros_like(),
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.lr, self.eps);
        for (((p, g), m1), m2) in params
            .tensors_mut()
            .into_iter()
            .zip(grads.tensors())
            .zip(self.first.tensors_mut())
            .zip(self.second.tensors_mut())
        {
            for j in 0..p.len() {
                m1[j] = b1 * m1[j] + (1.0 - b1) * g[j];
                m2[j] = b2 * m2[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m1[j] / c1;
                let vh = m2[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub align: f64,
    pub uniform: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_recall: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    /// Best parameters by validation recall, rounded to `f32` precision.
    pub params: ModelParams,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Set when training diverged; `params` then hold the last good state.
    pub aborted: Option<String>,
}

fn is_divergence(e: &Error) -> bool {
    e.class() == ErrorClass::Numerical
}

/// Mini-batch training with validation early stopping.
pub fn train(
    graph: &InteractionGraph,
    encodings: Option<&StructuralEncodings>,
    cfg: &RunConfig,
) -> Result<TrainOutcome> {
    let model = Model::new(graph, encodings, cfg)?;
    let mut params = ModelParams::init(
        model.num_tokens(),
        model.embedding_dim(),
        model.token_dim(),
        cfg.degree_buckets,
        cfg.degree_dim,
        cfg.init_seed,
    );
    let mut edges: Vec<(usize, usize)> = graph.edges_in(Split::Train).collect();
    if edges.len() < 2 {
        return Err(Error::EmptyInput(
            "training split needs at least 2 interactions".into(),
        ));
    }
    let has_valid = graph.split_sizes()[Split::Valid as usize] > 0;
    let mut adam = Adam::new(&params, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed ^ 0x5851_f42d_4c95_7f2d);
    let start = Instant::now();

    let mut log = Vec::new();
    let mut best = params.clone();
    let mut best_recall = f64::NEG_INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0;
    let mut step_count = 0usize;
    let mut cached: Option<KeySummaries> = None;
    let mut aborted = None;
    let mut evaluated = false;

    'epochs: for epoch in 1..=cfg.epochs {
        edges.shuffle(&mut rng);
        let (mut sa, mut su, mut st, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in edges.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let reuse = !step_count.is_multiple_of(cfg.summary_refresh)
                && model.mask_mode != MaskMode::Adjacency;
            let frozen = if reuse { cached.as_ref() } else { None };
            let result = model.step(&params, batch, cfg.lambda, frozen);
            step_count += 1;
            let res = match result {
                Ok(r) => r,
                Err(e) if is_divergence(&e) => {
                    log::warn!("training diverged at epoch {epoch}: {e}");
                    aborted = Some(e.to_string());
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            if frozen.is_none() {
                cached = res.summaries;
            }
            let last_good = params.clone();
            adam.step(&mut params, &res.grads);
            if let Some(name) = params.first_out_of_f32_range() {
                aborted = Some(format!("{name} overflowed after update"));
                params = last_good;
                break 'epochs;
            }
            sa += res.loss.align;
            su += res.loss.uniform;
            st += res.loss.total;
            batches += 1;
        }
        let nb = batches.max(1) as f64;
        let mut record = EpochRecord {
            epoch,
            align: sa / nb,
            uniform: su / nb,
            total: st / nb,
            val_recall: None,
            wall_time: cfg.log_timing.then(|| start.elapsed().as_secs_f64()),
        };

        let mut stop = false;
        if has_valid && epoch % cfg.eval_every == 0 {
            let reps = match model.representations(&params) {
                Ok(r) => r,
                Err(e) if is_divergence(&e) => {
                    aborted = Some(e.to_string());
                    log.push(record);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            let recall = evaluate(&reps, graph, None, Split::Valid, cfg.val_k)?.recall;
            record.val_recall = Some(recall);
            evaluated = true;
            if recall > best_recall {
                best_recall = recall;
                best = params.clone();
                best_epoch = epoch;
                stale = 0;
            } else {
                stale += 1;
                stop = stale >= cfg.patience;
            }
        }
        log::info!(
            "epoch {epoch}: total {:.5} align {:.5} uniform {:.5}{}",
            record.total,
            record.align,
            record.uniform,
            record
                .val_recall
                .map(|r| format!(" val_recall@{} {r:.4}", cfg.val_k))
                .unwrap_or_default()
        );
        log.push(record);
        if !evaluated {
            best = params.clone();
            best_epoch = epoch;
        }
        if stop {
            log::info!("early stop at epoch {epoch}, best epoch {best_epoch}");
            break;
        }
    }

    if aborted.is_some() && !evaluated {
        best = params;
    }
    best.round_to_f32();
    Ok(TrainOutcome {
        model,
        params: best,
        log,
        best_epoch,
        aborted,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn bucket_arithmetic() {
        assert_eq!(degree_bucket(0, 32), 0);
        assert_eq!(degree_bucket(1, 32), 1);
        assert_eq!(degree_bucket(2, 32), 1);
        assert_eq!(degree_bucket(3, 32), 2);
        assert_eq!(degree_bucket(1_000_000, 8), 7);
        assert_eq!(degree_bucket(u64::MAX, 64), 63);
    }

    #[test]
    fn identical_rows_give_zero_loss() {
        let y = Array2::from_elem((4, 3), 0.5);
        let l = directau_loss(y.view(), y.view(), 1.0).unwrap();
        assert_abs_diff_eq!(l.align, 0.0);
        assert_abs_diff_eq!(l.uniform, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(l.total, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn single_pair_uniformity() {
        let a = (2f64).ln().sqrt();
        let users = array![[0.0, 0.0], [a, 0.0]];
        let items = array![[1.0, 1.0], [1.0, 1.0]];
        let l = directau_loss(users.view(), items.view(), 1.0).unwrap();
        // Identical items contribute 0.
        assert_abs_diff_eq!(l.uniform, -(2f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn batch_of_one_rejected() {
        let y = Array2::<f64>::zeros((1, 3));
        assert!(directau_loss(y.view(), y.view(), 1.0).is_err());
    }

    fn naive_loss(u: &Array2<f64>, i: &Array2<f64>, lambda: f64) -> LossBreakdown {
        let b = u.nrows();
        let mut align = 0.0;
        for r in 0..b {
            for c in 0..u.ncols() {
                align += (u[[r, c]] - i[[r, c]]).powi(2);
            }
        }
        align /= b as f64;
        let uni = |y: &Array2<f64>| {
            let mut s = 0.0;
            for a in 0..b {
                for c in 0..b {
                    if a != c {
                        let mut d = 0.0;
                        for k in 0..y.ncols() {
                            d += (y[[a, k]] - y[[c, k]]).powi(2);
                        }
                        s += (-d).exp();
                    }
                }
            }
            (s / (b * (b - 1)) as f64).ln()
        };
        let uniform = uni(u) + uni(i);
        LossBreakdown {
            align,
            uniform,
            total: align + lambda * uniform,
        }
    }

    #[test]
    fn loss_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let b = rng.random_range(2..12);
            let u = Array2::from_shape_fn((b, 5), |_| rng.random_range(-1.0..1.0));
            let i = Array2::from_shape_fn((b, 5), |_| rng.random_range(-1.0..1.0));
            let got = directau_loss(u.view(), i.view(), 0.7).unwrap();
            let want = naive_loss(&u, &i, 0.7);
            assert_abs_diff_eq!(got.align, want.align, epsilon = 1e-12);
            assert_abs_diff_eq!(got.uniform, want.uniform, epsilon = 1e-12);
            assert_abs_diff_eq!(got.total, want.total, epsilon = 1e-12);
            assert!(got.uniform <= 0.0 && got.align >= 0.0);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut u = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let i = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let (_, du, _) = directau_loss_grad(u.view(), i.view(), 1.3).unwrap();
        let eps = 1e-6;
        for r in 0..5 {
            for c in 0..3 {
                let orig = u[[r, c]];
                u[[r, c]] = orig + eps;
                let up = directau_loss(u.view(), i.view(), 1.3).unwrap().total;
                u[[r, c]] = orig - eps;
                let dn = directau_loss(u.view(), i.view(), 1.3).unwrap().total;
                u[[r, c]] = orig;
                assert_abs_diff_eq!((up - dn) / (2.0 * eps), du[[r, c]], epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn zero_lambda_drops_uniformity_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let u = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let i = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let (_, du, di) = directau_loss_grad(u.view(), i.view(), 0.0).unwrap();
        let align_only = (&u - &i) * (2.0 / 4.0);
        assert_eq!(du, align_only);
        assert_eq!(di, -&align_only);
    }

    fn toy(mask: MaskMode) -> (InteractionGraph, StructuralEncodings, RunConfig) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let edges: Vec<(usize, usize)> = (0..20)
            .flat_map(|u| {
                let picks: Vec<usize> = (0..15).filter(|_| rng.random_bool(0.25)).collect();
                picks.into_iter().map(move |i| (u, i))
            })
            .collect();
        let g = InteractionGraph::from_edges(20, 15, edges).unwrap();
        let cfg = RunConfig {
            d: 4,
            mask_mode: mask,
            degree_buckets: 8,
            degree_dim: 3,
            ..RunConfig::default()
        };
        let r = crate::spectral::SparseMatrix::from_graph(&g, Split::Train).unwrap();
        let enc =
            crate::spectral::truncated_svd(&r, crate::spectral::SvdOptions::new(4, 1)).unwrap();
        (g, enc, cfg)
    }

    #[test]
    fn fresh_params_give_half_centrality() {
        let (g, enc, cfg) = toy(MaskMode::SineDegree);
        let model = Model::new(&g, Some(&enc), &cfg).unwrap();
        let p = ModelParams::init(model.num_tokens(), 4, 8, 8, 3, 1);
        assert!(model.degree_centrality(&p).iter().all(|&z| z == 0.5));
    }

    #[test]
    fn step_gradients_match_finite_differences() {
        for mask in [MaskMode::SineDegree, MaskMode::AllOnes, MaskMode::Adjacency] {
            let (g, enc, cfg) = toy(mask);
            let model = Model::new(&g, Some(&enc), &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut p = ModelParams::init(model.num_tokens(), 4, 8, 8, 3, 2);
            for v in p.degree_table.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            p.degree_bias = 0.3;
            let batch: Vec<(usize, usize)> = g.edges.iter().copied().step_by(3).take(6).collect();
            let res = model.step(&p, &batch, 0.8, None).unwrap();
            let grads = res.grads.tensors().map(|t| t.to_vec());
            let eps = 1e-5;
            for (ti, name) in PARAM_NAMES.iter().enumerate() {
                let len = grads[ti].len();
                for j in (0..len).step_by((len / 12).max(1)) {
                    let orig = p.tensors()[ti][j];
                    p.tensors_mut()[ti][j] = orig + eps;
                    let up = model.step(&p, &batch, 0.8, None).unwrap().loss.total;
                    p.tensors_mut()[ti][j] = orig - eps;
                    let dn = model.step(&p, &batch, 0.8, None).unwrap().loss.total;
                    p.tensors_mut()[ti][j] = orig;
                    let fd = (up - dn) / (2.0 * eps);
                    let an = grads[ti][j];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                    assert!(rel < 1e-4, "{mask:?} {name}[{j}]: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let (g, enc, cfg) = toy(MaskMode::AllOnes);
        let model = Model::new(&g, Some(&enc), &cfg).unwrap();
        let mut p = ModelParams::init(model.num_tokens(), 4, 8, 8, 3, 3);
        let before = p.clone();
        let mut grads = p.zeros_like();
        grads.w_q.fill(2.0);
        grads.w_q[[0, 0]] = -5.0;
        let mut adam = Adam::new(&p, 0.01);
        adam.step(&mut p, &grads);
        assert_abs_diff_eq!(p.w_q[[0, 1]], before.w_q[[0, 1]] - 0.01, epsilon = 1e-9);
        assert_abs_diff_eq!(p.w_q[[0, 0]], before.w_q[[0, 0]] + 0.01, epsilon = 1e-9);
        assert_eq!(p.embeddings, before.embeddings);
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (g, enc, mut cfg) = toy(MaskMode::SineDegree);
        let g = crate::graph_data::split_edges(g, crate::graph_data::SplitRatios::default(), 1)
            .unwrap();
        cfg.epochs = 15;
        cfg.batch_size = 16;
        cfg.lr = 1e-2;
        cfg.patience = 100;
        let a = train(&g, Some(&enc), &cfg).unwrap();
        let b = train(&g, Some(&enc), &cfg).unwrap();
        assert!(a.aborted.is_none());
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert!(a.log.last().unwrap().total < a.log[0].total);
    }

    #[test]
    fn huge_learning_rate_aborts_cleanly() {
        let (g, enc, mut cfg) = toy(MaskMode::SineDegree);
        let g = crate::graph_data::split_edges(g, crate::graph_data::SplitRatios::default(), 1)
            .unwrap();
        cfg.epochs = 5;
        cfg.batch_size = 16;
        cfg.lr = 1e300;
        let out = train(&g, Some(&enc), &cfg).unwrap();
        assert!(out.aborted.is_some());
        assert!(out.params.first_non_finite().is_none());
    }
}
