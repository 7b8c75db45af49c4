//! Transformer building blocks over the autodiff graph: linear layers,
//! layer norm parameters, pre-LN attention blocks, and a small trunk with a
//! final norm. Parameter names are `{prefix}.{field}` and define checkpoint
//! layout.

use rand::Rng;

use crate::graph::{Graph, Id, ParamId, ParamStore};
use crate::tensor::Tensor;

/// ViT-style init scale.
pub const INIT_STD: f32 = 0.02;

#[derive(Debug, Clone)]
pub struct LinearParams {
    pub w: ParamId,
    pub b: ParamId,
}

impl LinearParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
        trainable: bool,
    ) -> Self {
        let w = store.register(
            &format!("{prefix}.w"),
            Tensor::randn(d_in, d_out, INIT_STD, rng),
            trainable,
        );
        let b = store.register(&format!("{prefix}.b"), Tensor::zeros(1, d_out), trainable);
        LinearParams { w, b }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Id) -> Id {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let h = g.matmul(x, w);
        g.add_row(h, b)
    }
}

#[derive(Debug, Clone)]
pub struct NormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl NormParams {
    pub fn register(store: &mut ParamStore, prefix: &str, d: usize, trainable: bool) -> Self {
        let gamma =
            store.register(&format!("{prefix}.gamma"), Tensor::full(1, d, 1.0), trainable);
        let beta = store.register(&format!("{prefix}.beta"), Tensor::zeros(1, d), trainable);
        NormParams { gamma, beta }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Id) -> Id {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm_rows(x, gamma, beta, 1e-5)
    }
}

/// One pre-LN block: attention + MLP, both residual.
#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: NormParams,
    pub wq: LinearParams,
    pub wk: LinearParams,
    pub wv: LinearParams,
    pub wo: LinearParams,
    pub ln2: NormParams,
    pub fc1: LinearParams,
    pub fc2: LinearParams,
}

impl BlockParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        mlp_hidden: usize,
        rng: &mut impl Rng,
        trainable: bool,
    ) -> Self {
        BlockParams {
            ln1: NormParams::register(store, &format!("{prefix}.ln1"), d, trainable),
            wq: LinearParams::register(store, &format!("{prefix}.wq"), d, d, rng, trainable),
            wk: LinearParams::register(store, &format!("{prefix}.wk"), d, d, rng, trainable),
            wv: LinearParams::register(store, &format!("{prefix}.wv"), d, d, rng, trainable),
            wo: LinearParams::register(store, &format!("{prefix}.wo"), d, d, rng, trainable),
            ln2: NormParams::register(store, &format!("{prefix}.ln2"), d, trainable),
            fc1: LinearParams::register(
                store,
                &format!("{prefix}.fc1"),
                d,
                mlp_hidden,
                rng,
                trainable,
            ),
            fc2: LinearParams::register(
                store,
                &format!("{prefix}.fc2"),
                mlp_hidden,
                d,
                rng,
                trainable,
            ),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Id, heads: usize) -> Id {
        let d = g.value(x).cols();
        assert_eq!(d % heads, 0, "model dim {d} not divisible by {heads} heads");
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();

        let h = self.ln1.forward(g, x);
        let q = self.wq.forward(g, h);
        let k = self.wk.forward(g, h);
        let v = self.wv.forward(g, h);

        let mut head_outs = Vec::with_capacity(heads);
        for i in 0..heads {
            let qi = g.slice_cols(q, i * dh, (i + 1) * dh);
            let ki = g.slice_cols(k, i * dh, (i + 1) * dh);
            let vi = g.slice_cols(v, i * dh, (i + 1) * dh);
            let logits = g.matmul_nt(qi, ki);
            let logits = g.scale(logits, scale);
            let att = g.softmax_rows(logits);
            head_outs.push(g.matmul(att, vi));
        }
        let joined = g.concat_cols(&head_outs);
        let o = self.wo.forward(g, joined);
        let x = g.add(x, o);

        let h2 = self.ln2.forward(g, x);
        let m = self.fc1.forward(g, h2);
        let m = g.gelu(m);
        let m = self.fc2.forward(g, m);
        g.add(x, m)
    }
}

/// Block stack with final layer norm.
#[derive(Debug, Clone)]
pub struct TransformerParams {
    pub blocks: Vec<BlockParams>,
    pub final_norm: NormParams,
    pub heads: usize,
}

impl TransformerParams {
    pub fn register(
        store: &mut ParamStore,
        prefix: &str,
        layers: usize,
        d: usize,
        heads: usize,
        rng: &mut impl Rng,
        trainable: bool,
    ) -> Self {
        let blocks = (0..layers)
            .map(|i| {
                BlockParams::register(store, &format!("{prefix}.block{i}"), d, 4 * d, rng, trainable)
            })
            .collect();
        let final_norm = NormParams::register(store, &format!("{prefix}.norm"), d, trainable);
        TransformerParams { blocks, final_norm, heads }
    }

    pub fn forward(&self, g: &mut Graph<'_>, mut x: Id) -> Id {
        for block in &self.blocks {
            x = block.forward(g, x, self.heads);
        }
        self.final_norm.forward(g, x)
    }
}
