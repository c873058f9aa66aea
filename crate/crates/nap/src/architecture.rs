//! The NAP network: set embeddings, a masked self-attention trunk, an
//! acquisition head producing one scalar per query, a bucketed distribution
//! head, and a separate small value network.
//!
//! History tokens attend each other freely; query tokens attend the history
//! and themselves only, and no positional encoding is used anywhere. This
//! yields history-order invariance and query independence.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{masked_attention, Array, NodeId, Tape};

pub const LAYER_NORM_EPS: f64 = 1e-6;
/// Hidden width of the value network, Linear(2, 512) + tanh + Linear(512, 1).
pub const VALUE_HIDDEN: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub bucket_count: usize,
    pub softmax_temperature_train: f64,
}

impl ModelConfig {
    /// Full-scale configuration.
    pub fn paper(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            embed_dim: 512,
            ff_dim: 1024,
            layers: 6,
            heads: 4,
            dropout: 0.0,
            bucket_count: 1000,
            softmax_temperature_train: 0.1,
        }
    }

    /// Small configuration for desk-scale experiments.
    pub fn desk(input_dim: usize) -> Self {
        ModelConfig {
            input_dim,
            embed_dim: 64,
            ff_dim: 128,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            bucket_count: 64,
            softmax_temperature_train: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.input_dim == 0
            || self.embed_dim == 0
            || self.ff_dim == 0
            || self.layers == 0
            || self.heads == 0
            || self.bucket_count == 0
        {
            return Err("all model extents must be positive".into());
        }
        if self.embed_dim % self.heads != 0 {
            return Err(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.softmax_temperature_train <= 0.0 {
            return Err("softmax temperature must be positive".into());
        }
        if self.dropout != 0.0 {
            return Err("dropout > 0 is not supported".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamKind {
    Weight,
    Bias,
    Gain,
}

fn param_layout(config: &ModelConfig) -> Vec<(String, usize, usize, ParamKind)> {
    use ParamKind::*;
    let (d, e, f, b) = (
        config.input_dim,
        config.embed_dim,
        config.ff_dim,
        config.bucket_count,
    );
    let dh = config.head_dim();
    let mut layout = vec![
        ("x_embed.w".into(), d, e, Weight),
        ("x_embed.b".into(), 1, e, Bias),
        ("y_embed.w".into(), 1, e, Weight),
        ("y_embed.b".into(), 1, e, Bias),
        ("tt_embed.w".into(), 2, e, Weight),
        ("tt_embed.b".into(), 1, e, Bias),
    ];
    for l in 0..config.layers {
        for h in 0..config.heads {
            for proj in ["wq", "wk", "wv"] {
                layout.push((format!("layer{l}.head{h}.{proj}"), e, dh, Weight));
            }
        }
        layout.push((format!("layer{l}.attn.wo"), e, e, Weight));
        layout.push((format!("layer{l}.attn.bo"), 1, e, Bias));
        layout.push((format!("layer{l}.ln1.g"), 1, e, Gain));
        layout.push((format!("layer{l}.ln1.b"), 1, e, Bias));
        layout.push((format!("layer{l}.ln2.g"), 1, e, Gain));
        layout.push((format!("layer{l}.ln2.b"), 1, e, Bias));
        layout.push((format!("layer{l}.ff.w1"), e, f, Weight));
        layout.push((format!("layer{l}.ff.b1"), 1, f, Bias));
        layout.push((format!("layer{l}.ff.w2"), f, e, Weight));
        layout.push((format!("layer{l}.ff.b2"), 1, e, Bias));
    }
    layout.extend([
        ("final_ln.g".to_string(), 1, e, Gain),
        ("final_ln.b".to_string(), 1, e, Bias),
        ("acq_head.w1".to_string(), e, e, Weight),
        ("acq_head.b1".to_string(), 1, e, Bias),
        ("acq_head.w2".to_string(), e, 1, Weight),
        ("acq_head.b2".to_string(), 1, 1, Bias),
        ("dist_head.w".to_string(), e, b, Weight),
        ("dist_head.b".to_string(), 1, b, Bias),
        ("value.w1".to_string(), 2, VALUE_HIDDEN, Weight),
        ("value.b1".to_string(), 1, VALUE_HIDDEN, Bias),
        ("value.w2".to_string(), VALUE_HIDDEN, 1, Weight),
        ("value.b2".to_string(), 1, 1, Bias),
    ]);
    layout
}

/// All learnable arrays, keyed by name.
#[derive(Debug, Clone)]
pub struct ModelParams {
    config: ModelConfig,
    arrays: BTreeMap<String, Array>,
}

impl ModelParams {
    /// Scaled-uniform initialization: weights U(-s, s) with s = 1/sqrt(fan_in),
    /// biases zero, layer-norm gains one.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Self {
        config.validate().expect("invalid model config");
        let mut arrays = BTreeMap::new();
        for (name, rows, cols, kind) in param_layout(&config) {
            let arr = match kind {
                ParamKind::Weight => {
                    let scale = 1.0 / (rows as f64).sqrt();
                    Array::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
                }
                ParamKind::Bias => Array::zeros(&[rows, cols]),
                ParamKind::Gain => Array::from_fn(rows, cols, |_, _| 1.0),
            };
            arrays.insert(name, arr);
        }
        ModelParams { config, arrays }
    }

    pub fn from_arrays(config: ModelConfig, arrays: BTreeMap<String, Array>) -> Result<Self, String> {
        let layout = param_layout(&config);
        if arrays.len() != layout.len() {
            return Err(format!(
                "expected {} parameter arrays, got {}",
                layout.len(),
                arrays.len()
            ));
        }
        for (name, rows, cols, _) in &layout {
            let arr = arrays
                .get(name)
                .ok_or_else(|| format!("missing parameter `{name}`"))?;
            if arr.shape() != [*rows, *cols] {
                return Err(format!(
                    "parameter `{name}` has shape {:?}, expected [{rows}, {cols}]",
                    arr.shape()
                ));
            }
        }
        Ok(ModelParams { config, arrays })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn get(&self, name: &str) -> &Array {
        self.arrays
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    /// Deterministic (sorted-name) iteration over all parameter arrays.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.arrays.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.arrays.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn num_params(&self) -> usize {
        self.arrays.values().map(Array::len).sum()
    }

    /// Registers every parameter on `tape` and returns name -> node bindings.
    pub fn bind(&self, tape: &mut Tape) -> Bindings {
        let map = self
            .arrays
            .iter()
            .map(|(name, arr)| (name.clone(), tape.leaf(arr.clone())))
            .collect();
        Bindings { map }
    }
}

/// Tape nodes for one parameter snapshot.
pub struct Bindings {
    map: BTreeMap<String, NodeId>,
}

impl Bindings {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .map
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn nodes(&self) -> Vec<NodeId> {
        self.map.values().copied().collect()
    }
}

/// Token-level attention mask over `n_hist + n_pred` tokens.
///
/// History rows may attend every history column; query rows may attend the
/// history columns and their own diagonal only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    n_hist: usize,
    n_pred: usize,
}

pub fn build_mask(n_hist: usize, n_pred: usize) -> AttentionMask {
    assert!(n_pred >= 1, "need at least one query token");
    AttentionMask { n_hist, n_pred }
}

impl AttentionMask {
    pub fn side(&self) -> usize {
        self.n_hist + self.n_pred
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        j < self.n_hist || i == j
    }

    /// Row-major boolean matrix, true where token `i` may attend token `j`.
    pub fn to_matrix(&self) -> Vec<bool> {
        let n = self.side();
        let mut m = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                m.push(self.allows(i, j));
            }
        }
        m
    }
}

/// History and query token embeddings on a tape. History token i is
/// `x_embed(x_i) + y_embed(y_i)`; query token j is `x_embed(x_j)` alone.
pub fn embed_tokens(
    tape: &mut Tape,
    bind: &Bindings,
    history_x: &Array,
    history_y: &Array,
    queries: &Array,
) -> NodeId {
    let n_hist = history_x.rows();
    assert_eq!(history_y.rows(), n_hist, "history x/y length mismatch");
    assert_eq!(
        history_x.cols(),
        queries.cols(),
        "input dimension mismatch between history and queries"
    );
    assert!(queries.rows() >= 1, "empty query set");

    let qx = tape.leaf(queries.clone());
    let xw = bind.node("x_embed.w");
    let xb = bind.node("x_embed.b");
    let q_embed = tape.matmul(qx, xw);
    let q_embed = tape.add_row(q_embed, xb);
    if n_hist == 0 {
        return q_embed;
    }
    let hx = tape.leaf(history_x.clone());
    let hy = tape.leaf(history_y.clone());
    let hx_embed = tape.matmul(hx, xw);
    let hx_embed = tape.add_row(hx_embed, xb);
    let yw = bind.node("y_embed.w");
    let yb = bind.node("y_embed.b");
    let hy_embed = tape.matmul(hy, yw);
    let hy_embed = tape.add_row(hy_embed, yb);
    let hist_tokens = tape.add(hx_embed, hy_embed);
    tape.concat_rows(&[hist_tokens, q_embed])
}

/// Output nodes of one forward pass.
pub struct ForwardNodes {
    /// `n_pred x 1` acquisition values.
    pub acq: NodeId,
    /// `n_pred x bucket_count` unnormalized log bucket weights.
    pub dist_logits: NodeId,
}

/// Runs the masked trunk and both heads on a caller-provided tape.
///
/// The (t, T) embedding, computed from `(t/T, (T-t)/T)`, is added to the
/// query-token trunk outputs before the acquisition head only; the
/// distribution head stays budget-independent.
pub fn forward_on_tape(
    tape: &mut Tape,
    bind: &Bindings,
    config: &ModelConfig,
    history_x: &Array,
    history_y: &Array,
    queries: &Array,
    t: usize,
    budget: usize,
) -> ForwardNodes {
    assert!(t >= 1 && t <= budget, "step {t} outside 1..={budget}");
    let n_hist = history_x.rows();
    let n_pred = queries.rows();
    let mut h = embed_tokens(tape, bind, history_x, history_y, queries);
    let mask = Rc::new(build_mask(n_hist, n_pred).to_matrix());

    for l in 0..config.layers {
        let ln1 = tape.layer_norm(
            h,
            bind.node(&format!("layer{l}.ln1.g")),
            bind.node(&format!("layer{l}.ln1.b")),
            LAYER_NORM_EPS,
        );
        let mut head_outs = Vec::with_capacity(config.heads);
        for hd in 0..config.heads {
            let q = tape.matmul(ln1, bind.node(&format!("layer{l}.head{hd}.wq")));
            let k = tape.matmul(ln1, bind.node(&format!("layer{l}.head{hd}.wk")));
            let v = tape.matmul(ln1, bind.node(&format!("layer{l}.head{hd}.wv")));
            head_outs.push(masked_attention(tape, q, k, v, mask.clone()));
        }
        let concat = tape.concat_cols(&head_outs);
        let att = tape.matmul(concat, bind.node(&format!("layer{l}.attn.wo")));
        let att = tape.add_row(att, bind.node(&format!("layer{l}.attn.bo")));
        h = tape.add(h, att);

        let ln2 = tape.layer_norm(
            h,
            bind.node(&format!("layer{l}.ln2.g")),
            bind.node(&format!("layer{l}.ln2.b")),
            LAYER_NORM_EPS,
        );
        let ff = tape.matmul(ln2, bind.node(&format!("layer{l}.ff.w1")));
        let ff = tape.add_row(ff, bind.node(&format!("layer{l}.ff.b1")));
        let ff = tape.relu(ff);
        let ff = tape.matmul(ff, bind.node(&format!("layer{l}.ff.w2")));
        let ff = tape.add_row(ff, bind.node(&format!("layer{l}.ff.b2")));
        h = tape.add(h, ff);
    }

    let h = tape.layer_norm(
        h,
        bind.node("final_ln.g"),
        bind.node("final_ln.b"),
        LAYER_NORM_EPS,
    );
    let query_rows = Rc::new((n_hist..n_hist + n_pred).collect::<Vec<_>>());
    let q_out = tape.gather_rows(h, query_rows);

    let dist_logits = tape.matmul(q_out, bind.node("dist_head.w"));
    let dist_logits = tape.add_row(dist_logits, bind.node("dist_head.b"));

    let frac = t as f64 / budget as f64;
    let tt_feats = tape.leaf(Array::matrix(1, 2, vec![frac, 1.0 - frac]));
    let tt = tape.matmul(tt_feats, bind.node("tt_embed.w"));
    let tt = tape.add_row(tt, bind.node("tt_embed.b"));
    let acq_in = tape.add_row(q_out, tt);
    let acq = tape.matmul(acq_in, bind.node("acq_head.w1"));
    let acq = tape.add_row(acq, bind.node("acq_head.b1"));
    let acq = tape.relu(acq);
    let acq = tape.matmul(acq, bind.node("acq_head.w2"));
    let acq = tape.add_row(acq, bind.node("acq_head.b2"));

    ForwardNodes { acq, dist_logits }
}

/// Forward pass on a fresh tape, returning plain values: per-query
/// acquisition scalars and the `n_pred x bucket_count` logit matrix.
pub fn forward(
    params: &ModelParams,
    history: &[(Vec<f64>, f64)],
    queries: &Array,
    t: usize,
    budget: usize,
) -> (Vec<f64>, Array) {
    let mut tape = Tape::new();
    let bind = params.bind(&mut tape);
    let (hx, hy) = history_arrays(history, params.config().input_dim);
    let out = forward_on_tape(
        &mut tape,
        &bind,
        params.config(),
        &hx,
        &hy,
        queries,
        t,
        budget,
    );
    (
        tape.value(out.acq).data().to_vec(),
        tape.value(out.dist_logits).clone(),
    )
}

/// Packs history pairs into `(n_hist x D, n_hist x 1)` arrays.
pub fn history_arrays(history: &[(Vec<f64>, f64)], input_dim: usize) -> (Array, Array) {
    let hx = Array::from_fn(history.len(), input_dim, |i, j| history[i].0[j]);
    let hy = Array::from_fn(history.len(), 1, |i, _| history[i].1);
    (hx, hy)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PolicyMode {
    /// Softmax over acquisition values at the given temperature.
    Softmax(f64),
    /// One-hot at the first maximal value.
    Argmax,
}

/// Probability vector over a finite candidate set given acquisition values.
pub fn policy_probs(acq_values: &[f64], mode: PolicyMode) -> Vec<f64> {
    assert!(!acq_values.is_empty(), "empty candidate set");
    match mode {
        PolicyMode::Softmax(temperature) => {
            assert!(temperature > 0.0, "temperature must be positive");
            crate::distribution::bucket_weights(
                &acq_values
                    .iter()
                    .map(|v| v / temperature)
                    .collect::<Vec<_>>(),
            )
        }
        PolicyMode::Argmax => {
            let best = argmax(acq_values);
            let mut probs = vec![0.0; acq_values.len()];
            probs[best] = 1.0;
            probs
        }
    }
}

/// Index of the first maximal entry.
pub fn argmax(values: &[f64]) -> usize {
    assert!(!values.is_empty(), "argmax of empty slice");
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Value-network output for `(t/T, best_y)`. At an empty history callers
/// pass `best_y = 0`.
pub fn value_estimate(params: &ModelParams, t: usize, budget: usize, best_y: f64) -> f64 {
    assert!(t <= budget, "step {t} beyond budget {budget}");
    let feats = Array::matrix(1, 2, vec![t as f64 / budget as f64, best_y]);
    let mut pre = crate::diffcore::matmul(&feats, params.get("value.w1"));
    pre.axpy(1.0, params.get("value.b1"));
    let act = pre.map(f64::tanh);
    let out = crate::diffcore::matmul(&act, params.get("value.w2"));
    out.scalar_value() + params.get("value.b2").scalar_value()
}

/// Tape node for the value network, used by the trainer's value loss.
pub fn value_node(
    tape: &mut Tape,
    bind: &Bindings,
    t: usize,
    budget: usize,
    best_y: f64,
) -> NodeId {
    let feats = tape.leaf(Array::matrix(1, 2, vec![t as f64 / budget as f64, best_y]));
    let h = tape.matmul(feats, bind.node("value.w1"));
    let h = tape.add_row(h, bind.node("value.b1"));
    let h = tape.tanh(h);
    let out = tape.matmul(h, bind.node("value.w2"));
    let out = tape.add_row(out, bind.node("value.b2"));
    tape.sum_all(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: 2,
            embed_dim: 8,
            ff_dim: 16,
            layers: 2,
            heads: 2,
            dropout: 0.0,
            bucket_count: 8,
            softmax_temperature_train: 0.1,
        }
    }

    fn random_history(rng: &mut impl Rng, n: usize, d: usize) -> Vec<(Vec<f64>, f64)> {
        (0..n)
            .map(|_| {
                (
                    (0..d).map(|_| rng.random_range(0.0..1.0)).collect(),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect()
    }

    #[test]
    fn mask_matches_stated_pattern() {
        let mask = build_mask(3, 2);
        let expected = [
            [true, true, true, false, false],
            [true, true, true, false, false],
            [true, true, true, false, false],
            [true, true, true, true, false],
            [true, true, true, false, true],
        ];
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(mask.allows(i, j), expected[i][j], "entry ({i}, {j})");
            }
        }
    }

    #[test]
    fn mask_with_empty_history_is_identity() {
        let mask = build_mask(0, 1);
        assert_eq!(mask.to_matrix(), vec![true]);
        let mask = build_mask(0, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(mask.allows(i, j), i == j);
            }
        }
    }

    #[test]
    fn mask_single_history_three_queries() {
        let mask = build_mask(1, 3);
        for i in 1..4 {
            for j in 0..4 {
                assert_eq!(mask.allows(i, j), j == 0 || i == j);
            }
        }
    }

    #[test]
    fn embed_identical_pairs_give_identical_tokens() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = ModelParams::init(tiny_config(), &mut rng);
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let hx = Array::matrix(2, 2, vec![0.3, 0.7, 0.3, 0.7]);
        let hy = Array::matrix(2, 1, vec![0.4, 0.4]);
        let q = Array::matrix(1, 2, vec![0.1, 0.9]);
        let tokens = embed_tokens(&mut tape, &bind, &hx, &hy, &q);
        let v = tape.value(tokens);
        assert_eq!(&v.data()[0..8], &v.data()[8..16]);
    }

    #[test]
    fn embed_is_positionless() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = ModelParams::init(tiny_config(), &mut rng);
        let run = |hx: Array, hy: Array| {
            let mut tape = Tape::new();
            let bind = params.bind(&mut tape);
            let q = Array::matrix(1, 2, vec![0.5, 0.5]);
            let tokens = embed_tokens(&mut tape, &bind, &hx, &hy, &q);
            tape.value(tokens).clone()
        };
        let a = run(
            Array::matrix(2, 2, vec![0.1, 0.2, 0.8, 0.9]),
            Array::matrix(2, 1, vec![0.3, 0.6]),
        );
        let b = run(
            Array::matrix(2, 2, vec![0.8, 0.9, 0.1, 0.2]),
            Array::matrix(2, 1, vec![0.6, 0.3]),
        );
        // swapped pairs swap token rows, leaving the set of rows unchanged
        assert_eq!(&a.data()[0..8], &b.data()[8..16]);
        assert_eq!(&a.data()[8..16], &b.data()[0..8]);
        assert_eq!(&a.data()[16..24], &b.data()[16..24]);
    }

    #[test]
    fn query_token_is_history_token_minus_y_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::init(tiny_config(), &mut rng);
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let x = vec![0.25, 0.75];
        let y = 0.4;
        let hx = Array::matrix(1, 2, x.clone());
        let hy = Array::matrix(1, 1, vec![y]);
        let q = Array::matrix(1, 2, x);
        let tokens = embed_tokens(&mut tape, &bind, &hx, &hy, &q);
        let v = tape.value(tokens);
        let yw = params.get("y_embed.w");
        let yb = params.get("y_embed.b");
        for j in 0..8 {
            let y_embed = y * yw.at(0, j) + yb.at(0, j);
            assert!((v.at(0, j) - y_embed - v.at(1, j)).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_history_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::init(tiny_config(), &mut rng);
        let history = random_history(&mut rng, 5, 2);
        let queries = Array::from_fn(3, 2, |_, _| rng.random_range(0.0..1.0));
        let (acq, dist) = forward(&params, &history, &queries, 2, 10);
        let mut permuted = history.clone();
        permuted.swap(0, 4);
        permuted.swap(1, 3);
        let (acq_p, dist_p) = forward(&params, &permuted, &queries, 2, 10);
        for (a, b) in acq.iter().zip(&acq_p) {
            assert!((a - b).abs() < 1e-6);
        }
        for (a, b) in dist.data().iter().zip(dist_p.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_is_query_independent() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let params = ModelParams::init(tiny_config(), &mut rng);
        let history = random_history(&mut rng, 4, 2);
        let a = vec![0.2, 0.9];
        let b = vec![0.7, 0.1];
        let both = Array::matrix(2, 2, [a.clone(), b].concat());
        let only_a = Array::matrix(1, 2, a);
        let (acq_both, dist_both) = forward(&params, &history, &both, 3, 10);
        let (acq_a, dist_a) = forward(&params, &history, &only_a, 3, 10);
        assert!((acq_both[0] - acq_a[0]).abs() < 1e-6);
        for j in 0..8 {
            assert!((dist_both.at(0, j) - dist_a.at(0, j)).abs() < 1e-6);
        }
    }

    #[test]
    fn forward_with_empty_history_is_finite_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let params = ModelParams::init(tiny_config(), &mut rng);
        let queries = Array::matrix(1, 2, vec![0.5, 0.5]);
        let (acq, dist) = forward(&params, &[], &queries, 1, 10);
        assert!(acq[0].is_finite());
        let weights = crate::distribution::bucket_weights(dist.data());
        let total: f64 = weights.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn policy_probs_symmetry_and_softmax_example() {
        let p = policy_probs(&[7.0, 7.0], PolicyMode::Softmax(0.3));
        assert_eq!(p, vec![0.5, 0.5]);
        let p = policy_probs(&[1.0, 0.0], PolicyMode::Softmax(1.0));
        assert!((p[0] - 0.731059).abs() < 1e-6);
        assert!((p[1] - 0.268941).abs() < 1e-6);
    }

    #[test]
    fn policy_argmax_breaks_ties_at_lowest_index() {
        let p = policy_probs(&[2.0, 5.0, 5.0], PolicyMode::Argmax);
        assert_eq!(p, vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn policy_probs_shift_invariant_and_normalized() {
        let values = [0.3, -1.2, 2.0, 0.0];
        let shifted: Vec<f64> = values.iter().map(|v| v + 5.0).collect();
        let a = policy_probs(&values, PolicyMode::Softmax(0.1));
        let b = policy_probs(&shifted, PolicyMode::Softmax(0.1));
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(argmax(&a), argmax(&policy_probs(&values, PolicyMode::Softmax(3.0))));
    }

    #[test]
    fn value_estimate_zero_weights_give_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut params = ModelParams::init(tiny_config(), &mut rng);
        for (name, arr) in params.iter_mut() {
            if name.starts_with("value.") {
                for v in arr.data_mut() {
                    *v = 0.0;
                }
            }
        }
        assert_eq!(value_estimate(&params, 3, 10, 0.7), 0.0);
    }

    #[test]
    fn value_estimate_depends_only_on_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::init(tiny_config(), &mut rng);
        let a = value_estimate(&params, 2, 8, 0.5);
        let b = value_estimate(&params, 2, 8, 0.5);
        assert_eq!(a, b);
        let c = value_estimate(&params, 4, 16, 0.5);
        assert_eq!(a, c, "equal (t/T, best_y) must give equal values");
    }

    #[test]
    fn value_node_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let params = ModelParams::init(tiny_config(), &mut rng);
        let eval = |p: &ModelParams| {
            let mut tape = Tape::new();
            let bind = p.bind(&mut tape);
            let v = value_node(&mut tape, &bind, 3, 10, 0.4);
            tape.value(v).scalar_value()
        };
        let mut tape = Tape::new();
        let bind = params.bind(&mut tape);
        let v = value_node(&mut tape, &bind, 3, 10, 0.4);
        let names = ["value.w1", "value.b1", "value.w2", "value.b2"];
        let nodes: Vec<_> = names.iter().map(|n| bind.node(n)).collect();
        let (_, grads) = tape.value_and_grad(v, &nodes).unwrap();
        let step = 1e-5;
        for (name, grad) in names.iter().zip(&grads) {
            for i in (0..grad.len()).step_by(grad.len().div_ceil(5)) {
                let mut plus = params.clone();
                plus.iter_mut().find(|(n, _)| n == name).unwrap().1.data_mut()[i] += step;
                let mut minus = params.clone();
                minus.iter_mut().find(|(n, _)| n == name).unwrap().1.data_mut()[i] -= step;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * step);
                let g = grad.data()[i];
                let denom = 1e-6_f64.max(g.abs()).max(fd.abs());
                assert!((g - fd).abs() / denom < 1e-4, "{name}[{i}]: {g} vs {fd}");
            }
        }
    }
}
