//! Attention network `g_θ`: subtoken encoder with in-token self-attention and mean
//! pooling, a stack of blocks whose attention weights serve both context
//! self-attention and query cross-attention, and a linear head to the scaled
//! energy gradient.

pub mod layers;
pub mod linalg;
pub mod params;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{IcmError, Result};
use crate::rng::stream_rng;
use crate::tokenizer::Context;
use layers::*;
pub use params::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, ParameterSet, Tensor};

pub const SUBTOKEN_FEATURES: usize = 6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub embed_dim: usize,
    pub head_count: usize,
    pub subtoken_blocks: usize,
    pub main_blocks: usize,
    pub ffn_hidden: usize,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig { embed_dim: 64, head_count: 4, subtoken_blocks: 2, main_blocks: 4, ffn_hidden: 128, seed: 0 }
    }
}

impl NetworkConfig {
    /// Reduced depth used by the toy training runs.
    pub fn toy() -> Self {
        NetworkConfig { subtoken_blocks: 1, main_blocks: 2, ..Default::default() }
    }

    /// Configuration of the finite-difference gradient check.
    pub fn small() -> Self {
        NetworkConfig { embed_dim: 16, head_count: 2, subtoken_blocks: 1, main_blocks: 1, ffn_hidden: 32, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.head_count == 0 || self.embed_dim % self.head_count != 0 {
            return Err(IcmError::InvalidConfig(format!(
                "embed_dim {} must be a positive multiple of head_count {}",
                self.embed_dim, self.head_count
            )));
        }
        if self.subtoken_blocks == 0 || self.main_blocks == 0 || self.ffn_hidden == 0 {
            return Err(IcmError::InvalidConfig("block counts and ffn_hidden must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct BlockIdx {
    ln1: NormIdx,
    q: LinearIdx,
    k: LinearIdx,
    v: LinearIdx,
    o: LinearIdx,
    ln2: NormIdx,
    ff1: LinearIdx,
    ff2: LinearIdx,
}

#[derive(Clone, Debug)]
struct Layout {
    sub_in: LinearIdx,
    sub_blocks: Vec<BlockIdx>,
    query_in: LinearIdx,
    main_blocks: Vec<BlockIdx>,
    out_ln: NormIdx,
    out: LinearIdx,
}

struct Builder<'a, R: Rng> {
    p: &'a mut ParameterSet,
    rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn linear(&mut self, name: &str, i: usize, o: usize) -> LinearIdx {
        let bound = 1.0 / (i as f64).sqrt();
        let data = (0..i * o).map(|_| self.rng.gen_range(-bound..bound)).collect();
        let w = self.p.push(format!("{name}.w"), vec![i, o], data);
        let b = self.p.push(format!("{name}.b"), vec![o], vec![0.0; o]);
        LinearIdx { w, b, fan_in: i, fan_out: o }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIdx {
        let gain = self.p.push(format!("{name}.gain"), vec![d], vec![1.0; d]);
        let bias = self.p.push(format!("{name}.bias"), vec![d], vec![0.0; d]);
        NormIdx { gain, bias, dim: d }
    }

    fn block(&mut self, name: &str, d: usize, h: usize) -> BlockIdx {
        BlockIdx {
            ln1: self.norm(&format!("{name}.ln1"), d),
            q: self.linear(&format!("{name}.attn.q"), d, d),
            k: self.linear(&format!("{name}.attn.k"), d, d),
            v: self.linear(&format!("{name}.attn.v"), d, d),
            o: self.linear(&format!("{name}.attn.o"), d, d),
            ln2: self.norm(&format!("{name}.ln2"), d),
            ff1: self.linear(&format!("{name}.ffn.1"), d, h),
            ff2: self.linear(&format!("{name}.ffn.2"), h, d),
        }
    }
}

fn build(config: &NetworkConfig) -> (Layout, ParameterSet) {
    let mut p = ParameterSet::default();
    let mut rng = stream_rng(config.seed, 0x6e6574);
    let d = config.embed_dim;
    let h = config.ffn_hidden;
    let mut b = Builder { p: &mut p, rng: &mut rng };
    let sub_in = b.linear("sub_in", SUBTOKEN_FEATURES, d);
    let sub_blocks = (0..config.subtoken_blocks).map(|i| b.block(&format!("sub.{i}"), d, h)).collect();
    let query_in = b.linear("query_in", 2, d);
    let main_blocks = (0..config.main_blocks).map(|i| b.block(&format!("main.{i}"), d, h)).collect();
    let out_ln = b.norm("out_ln", d);
    let out = b.linear("out", d, 2);
    (Layout { sub_in, sub_blocks, query_in, main_blocks, out_ln, out }, p)
}

/// Flattened network input for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextInput {
    /// Subtoken rows `(Ā row-major, Î)`.
    pub features: Vec<f64>,
    /// Contiguous subtoken range of each token.
    pub token_ranges: Vec<(usize, usize)>,
}

impl ContextInput {
    pub fn from_context(ctx: &Context) -> ContextInput {
        let mut features = Vec::with_capacity(ctx.subtoken_count() * SUBTOKEN_FEATURES);
        let mut token_ranges = Vec::with_capacity(ctx.tokens.len());
        for t in &ctx.tokens {
            let start = features.len() / SUBTOKEN_FEATURES;
            for s in &t.subtokens {
                features.extend_from_slice(&s.a_bar);
                features.extend_from_slice(&s.i_hat);
            }
            token_ranges.push((start, features.len() / SUBTOKEN_FEATURES));
        }
        ContextInput { features, token_ranges }
    }

    pub fn subtoken_count(&self) -> usize {
        self.features.len() / SUBTOKEN_FEATURES
    }
}

struct FfnCache {
    ln2: NormCache,
    xn2: Vec<f64>,
    h_pre: Vec<f64>,
    h_act: Vec<f64>,
}

struct SelfBlockCache {
    ln1: NormCache,
    xn: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attn: AttnCache,
    a: Vec<f64>,
    ffn: FfnCache,
}

struct KvCache {
    ln: NormCache,
    xn: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

struct CrossBlockCache {
    ln1: NormCache,
    xn: Vec<f64>,
    q: Vec<f64>,
    attn: AttnCache,
    a: Vec<f64>,
    ffn: FfnCache,
}

/// Context-side forward state; reusable across query batches.
pub struct PreparedContext {
    token_count: usize,
    sub_groups: Vec<AttnGroup>,
    token_ranges: Vec<(usize, usize)>,
    features: Vec<f64>,
    sub_caches: Vec<SelfBlockCache>,
    main_caches: Vec<SelfBlockCache>,
    kv: Vec<KvCache>,
    /// Final-layer context embeddings, `n_tokens × d`.
    pub embeddings: Vec<f64>,
}

impl PreparedContext {
    pub fn token_count(&self) -> usize {
        self.token_count
    }
}

pub struct QueryTrace {
    count: usize,
    input: Vec<f64>,
    blocks: Vec<CrossBlockCache>,
    out_ln: NormCache,
    out_in: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingBatch {
    pub context_embeddings: Vec<Vec<f64>>,
    pub field_embedding: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParameterSet,
    layout: Layout,
}

fn check_finite(v: &[f64], layer: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(IcmError::NonFiniteActivation(layer.to_string()))
    }
}

/// Queries per cross-attention batch in `predict`.
const QUERY_CHUNK: usize = 512;

impl Network {
    pub fn new(config: NetworkConfig) -> Result<Network> {
        config.validate()?;
        let (layout, params) = build(&config);
        Ok(Network { config, params, layout })
    }

    pub fn from_parts(config: NetworkConfig, params: ParameterSet) -> Result<Network> {
        let mut net = Network::new(config)?;
        net.params.check_shapes(&params)?;
        if !params.all_finite() {
            return Err(IcmError::NonFinite("checkpoint parameters".into()));
        }
        net.params = params;
        Ok(net)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.parameter_count()
    }

    fn d(&self) -> usize {
        self.config.embed_dim
    }

    fn ffn_fwd(&self, blk: &BlockIdx, x: &[f64], n: usize) -> (Vec<f64>, FfnCache) {
        let p = &self.params;
        let (xn2, ln2) = norm_fwd(p, blk.ln2, x);
        let h_pre = linear_fwd(p, blk.ff1, &xn2, n);
        let h_act = gelu(&h_pre);
        let f = linear_fwd(p, blk.ff2, &h_act, n);
        (added(x, &f), FfnCache { ln2, xn2, h_pre, h_act })
    }

    fn ffn_bwd(&self, g: &mut ParameterSet, blk: &BlockIdx, c: &FfnCache, dy: &[f64], n: usize) -> Vec<f64> {
        let p = &self.params;
        let dh = linear_bwd(p, g, blk.ff2, &c.h_act, dy, n);
        let dh = gelu_bwd(&c.h_pre, &dh);
        let dxn = linear_bwd(p, g, blk.ff1, &c.xn2, &dh, n);
        let mut dx = norm_bwd(p, g, blk.ln2, &c.ln2, &dxn);
        add_into(&mut dx, dy);
        dx
    }

    fn self_block_fwd(&self, blk: &BlockIdx, x: &[f64], n: usize, groups: &[AttnGroup]) -> (Vec<f64>, SelfBlockCache) {
        let p = &self.params;
        let (xn, ln1) = norm_fwd(p, blk.ln1, x);
        let q = linear_fwd(p, blk.q, &xn, n);
        let k = linear_fwd(p, blk.k, &xn, n);
        let v = linear_fwd(p, blk.v, &xn, n);
        let (a, attn) = attention_fwd(&q, &k, &v, self.d(), self.config.head_count, groups);
        let o = linear_fwd(p, blk.o, &a, n);
        let x1 = added(x, &o);
        let (x2, ffn) = self.ffn_fwd(blk, &x1, n);
        (x2, SelfBlockCache { ln1, xn, q, k, v, attn, a, ffn })
    }

    fn self_block_bwd(
        &self,
        g: &mut ParameterSet,
        blk: &BlockIdx,
        c: &SelfBlockCache,
        dy: &[f64],
        n: usize,
        groups: &[AttnGroup],
    ) -> Vec<f64> {
        let p = &self.params;
        let dx1 = self.ffn_bwd(g, blk, &c.ffn, dy, n);
        let da = linear_bwd(p, g, blk.o, &c.a, &dx1, n);
        let (dq, dk, dv) = attention_bwd(&c.q, &c.k, &c.v, &c.attn, &da, self.d(), self.config.head_count, groups);
        let mut dxn = linear_bwd(p, g, blk.q, &c.xn, &dq, n);
        add_into(&mut dxn, &linear_bwd(p, g, blk.k, &c.xn, &dk, n));
        add_into(&mut dxn, &linear_bwd(p, g, blk.v, &c.xn, &dv, n));
        let mut dx = norm_bwd(p, g, blk.ln1, &c.ln1, &dxn);
        add_into(&mut dx, &dx1);
        dx
    }

    fn kv_fwd(&self, blk: &BlockIdx, h: &[f64], n: usize) -> KvCache {
        let p = &self.params;
        let (xn, ln) = norm_fwd(p, blk.ln1, h);
        let k = linear_fwd(p, blk.k, &xn, n);
        let v = linear_fwd(p, blk.v, &xn, n);
        KvCache { ln, xn, k, v }
    }

    fn cross_block_fwd(&self, blk: &BlockIdx, y: &[f64], nq: usize, kv: &KvCache, nk: usize) -> (Vec<f64>, CrossBlockCache) {
        let p = &self.params;
        let (xn, ln1) = norm_fwd(p, blk.ln1, y);
        let q = linear_fwd(p, blk.q, &xn, nq);
        let groups = [AttnGroup { q: (0, nq), k: (0, nk) }];
        let (a, attn) = attention_fwd(&q, &kv.k, &kv.v, self.d(), self.config.head_count, &groups);
        let o = linear_fwd(p, blk.o, &a, nq);
        let y1 = added(y, &o);
        let (y2, ffn) = self.ffn_fwd(blk, &y1, nq);
        (y2, CrossBlockCache { ln1, xn, q, attn, a, ffn })
    }

    /// Context-side forward pass.
    pub fn prepare(&self, input: &ContextInput) -> Result<PreparedContext> {
        let d = self.d();
        let ns = input.subtoken_count();
        let nt = input.token_ranges.len();
        if nt == 0 || ns == 0 {
            return Err(IcmError::ShapeMismatch("empty context".into()));
        }
        if input.features.len() != ns * SUBTOKEN_FEATURES {
            return Err(IcmError::ShapeMismatch(format!("feature buffer of {} values", input.features.len())));
        }
        let mut prev = 0;
        for &(a, b) in &input.token_ranges {
            if a != prev || b <= a || b > ns {
                return Err(IcmError::ShapeMismatch(format!("token range ({a}, {b})")));
            }
            prev = b;
        }
        if prev != ns {
            return Err(IcmError::ShapeMismatch("token ranges do not cover all subtokens".into()));
        }
        let lay = &self.layout;
        let sub_groups: Vec<AttnGroup> = input.token_ranges.iter().map(|&r| AttnGroup { q: r, k: r }).collect();
        let mut x = linear_fwd(&self.params, lay.sub_in, &input.features, ns);
        let mut sub_caches = Vec::with_capacity(lay.sub_blocks.len());
        for blk in &lay.sub_blocks {
            let (y, c) = self.self_block_fwd(blk, &x, ns, &sub_groups);
            x = y;
            sub_caches.push(c);
        }
        check_finite(&x, "subtoken encoder")?;
        let mut h = vec![0.0; nt * d];
        for (t, &(a, b)) in input.token_ranges.iter().enumerate() {
            let inv = 1.0 / (b - a) as f64;
            for s in a..b {
                for c in 0..d {
                    h[t * d + c] += x[s * d + c] * inv;
                }
            }
        }
        let all = [AttnGroup { q: (0, nt), k: (0, nt) }];
        let mut main_caches = Vec::with_capacity(lay.main_blocks.len());
        for blk in &lay.main_blocks {
            let (y, c) = self.self_block_fwd(blk, &h, nt, &all);
            h = y;
            main_caches.push(c);
        }
        check_finite(&h, "context blocks")?;
        let kv = lay.main_blocks.iter().map(|blk| self.kv_fwd(blk, &h, nt)).collect();
        Ok(PreparedContext {
            token_count: nt,
            sub_groups,
            token_ranges: input.token_ranges.clone(),
            features: input.features.clone(),
            sub_caches,
            main_caches,
            kv,
            embeddings: h,
        })
    }

    fn query_fwd(&self, prep: &PreparedContext, queries: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, QueryTrace)> {
        let nq = queries.len();
        let nk = prep.token_count;
        let lay = &self.layout;
        let input: Vec<f64> = queries.iter().flat_map(|q| q.iter().copied()).collect();
        let mut y = linear_fwd(&self.params, lay.query_in, &input, nq);
        let mut blocks = Vec::with_capacity(lay.main_blocks.len());
        for (blk, kv) in lay.main_blocks.iter().zip(&prep.kv) {
            let (y2, c) = self.cross_block_fwd(blk, &y, nq, kv, nk);
            y = y2;
            blocks.push(c);
        }
        let (out_in, out_ln) = norm_fwd(&self.params, lay.out_ln, &y);
        let out = linear_fwd(&self.params, lay.out, &out_in, nq);
        check_finite(&out, "output head")?;
        let pred = out.chunks_exact(2).map(|c| [c[0], c[1]]).collect();
        Ok((pred, QueryTrace { count: nq, input, blocks, out_ln, out_in }))
    }

    /// Predicted scaled gradients for normalized queries; batches are independent.
    pub fn predict(&self, prep: &PreparedContext, queries: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        let mut out = Vec::with_capacity(queries.len());
        for chunk in queries.chunks(QUERY_CHUNK) {
            out.extend(self.query_fwd(prep, chunk)?.0);
        }
        Ok(out)
    }

    pub fn forward(&self, input: &ContextInput, queries: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
        let prep = self.prepare(input)?;
        self.predict(&prep, queries)
    }

    /// Forward pass keeping everything needed by `backward`.
    pub fn forward_trace(&self, input: &ContextInput, queries: &[[f64; 2]]) -> Result<(Vec<[f64; 2]>, PreparedContext, QueryTrace)> {
        let prep = self.prepare(input)?;
        let (out, qt) = self.query_fwd(&prep, queries)?;
        Ok((out, prep, qt))
    }

    /// Parameter gradients of `Σ_q cotangent_q · output_q`.
    pub fn backward(&self, prep: &PreparedContext, qt: &QueryTrace, cotangent: &[[f64; 2]]) -> Result<ParameterSet> {
        if cotangent.len() != qt.count {
            return Err(IcmError::ShapeMismatch(format!("{} cotangents for {} queries", cotangent.len(), qt.count)));
        }
        let p = &self.params;
        let lay = &self.layout;
        let d = self.d();
        let nq = qt.count;
        let nk = prep.token_count;
        let ns = prep.features.len() / SUBTOKEN_FEATURES;
        let mut g = p.zeros_like();
        let dout: Vec<f64> = cotangent.iter().flat_map(|c| c.iter().copied()).collect();
        let dy = linear_bwd(p, &mut g, lay.out, &qt.out_in, &dout, nq);
        let mut dy = norm_bwd(p, &mut g, lay.out_ln, &qt.out_ln, &dy);
        let mut dh = vec![0.0; nk * d];
        let groups = [AttnGroup { q: (0, nq), k: (0, nk) }];
        for b in (0..lay.main_blocks.len()).rev() {
            let blk = &lay.main_blocks[b];
            let c = &qt.blocks[b];
            let kv = &prep.kv[b];
            let dy1 = self.ffn_bwd(&mut g, blk, &c.ffn, &dy, nq);
            let da = linear_bwd(p, &mut g, blk.o, &c.a, &dy1, nq);
            let (dq, dk, dv) = attention_bwd(&c.q, &kv.k, &kv.v, &c.attn, &da, d, self.config.head_count, &groups);
            let dxn = linear_bwd(p, &mut g, blk.q, &c.xn, &dq, nq);
            let mut dyin = norm_bwd(p, &mut g, blk.ln1, &c.ln1, &dxn);
            add_into(&mut dyin, &dy1);
            dy = dyin;
            let mut dkn = linear_bwd(p, &mut g, blk.k, &kv.xn, &dk, nk);
            add_into(&mut dkn, &linear_bwd(p, &mut g, blk.v, &kv.xn, &dv, nk));
            add_into(&mut dh, &norm_bwd(p, &mut g, blk.ln1, &kv.ln, &dkn));
        }
        linear_bwd(p, &mut g, lay.query_in, &qt.input, &dy, nq);
        let all = [AttnGroup { q: (0, nk), k: (0, nk) }];
        for b in (0..lay.main_blocks.len()).rev() {
            dh = self.self_block_bwd(&mut g, &lay.main_blocks[b], &prep.main_caches[b], &dh, nk, &all);
        }
        let mut dx = vec![0.0; ns * d];
        for (t, &(a, bnd)) in prep.token_ranges.iter().enumerate() {
            let inv = 1.0 / (bnd - a) as f64;
            for s in a..bnd {
                for c in 0..d {
                    dx[s * d + c] = dh[t * d + c] * inv;
                }
            }
        }
        for b in (0..lay.sub_blocks.len()).rev() {
            dx = self.self_block_bwd(&mut g, &lay.sub_blocks[b], &prep.sub_caches[b], &dx, ns, &prep.sub_groups);
        }
        linear_bwd(p, &mut g, lay.sub_in, &prep.features, &dx, ns);
        Ok(g)
    }

    /// Final-layer context embeddings and their mean.
    pub fn embed_contexts(&self, input: &ContextInput) -> Result<EmbeddingBatch> {
        let prep = self.prepare(input)?;
        let d = self.d();
        let context_embeddings: Vec<Vec<f64>> = prep.embeddings.chunks_exact(d).map(|r| r.to_vec()).collect();
        let n = context_embeddings.len() as f64;
        let mut field_embedding = vec![0.0; d];
        for e in &context_embeddings {
            for (f, v) in field_embedding.iter_mut().zip(e) {
                *f += v / n;
            }
        }
        Ok(EmbeddingBatch { context_embeddings, field_embedding })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn random_input(tokens: usize, subs: usize, seed: u64) -> ContextInput {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut features = Vec::new();
        let mut token_ranges = Vec::new();
        for t in 0..tokens {
            let k = subs + t % 2;
            let start = features.len() / SUBTOKEN_FEATURES;
            for _ in 0..k * SUBTOKEN_FEATURES {
                features.push(rng.gen_range(-1.0..1.0));
            }
            token_ranges.push((start, start + k));
        }
        ContextInput { features, token_ranges }
    }

    fn permute_tokens(input: &ContextInput, order: &[usize], reverse_subs: bool) -> ContextInput {
        let mut features = Vec::new();
        let mut token_ranges = Vec::new();
        for &t in order {
            let (a, b) = input.token_ranges[t];
            let start = features.len() / SUBTOKEN_FEATURES;
            let mut rows: Vec<usize> = (a..b).collect();
            if reverse_subs {
                rows.reverse();
            }
            for s in rows {
                features.extend_from_slice(&input.features[s * SUBTOKEN_FEATURES..(s + 1) * SUBTOKEN_FEATURES]);
            }
            token_ranges.push((start, start + b - a));
        }
        ContextInput { features, token_ranges }
    }

    fn close(a: &[[f64; 2]], b: &[[f64; 2]], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x[0] - y[0]).abs() <= tol && (x[1] - y[1]).abs() <= tol)
    }

    #[test]
    fn permutation_duplication_and_query_independence() {
        let net = Network::new(NetworkConfig { main_blocks: 2, ..NetworkConfig::small() }).unwrap();
        let input = random_input(7, 3, 1);
        let queries = vec![[0.1, -0.2], [0.5, 0.3], [-1.0, 0.8]];
        let base = net.forward(&input, &queries).unwrap();
        let perm = permute_tokens(&input, &[3, 0, 6, 2, 5, 1, 4], true);
        assert!(close(&base, &net.forward(&perm, &queries).unwrap(), 1e-10));
        let dup = permute_tokens(&input, &[0, 0, 1, 1, 2, 2, 3, 3, 4, 4, 5, 5, 6, 6], false);
        assert!(close(&base, &net.forward(&dup, &queries).unwrap(), 1e-10));
        for (k, q) in queries.iter().enumerate() {
            let one = net.forward(&input, std::slice::from_ref(q)).unwrap();
            assert_eq!(one[0], base[k]);
        }
        assert_eq!(base, net.forward(&input, &queries).unwrap());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let net = Network::new(NetworkConfig::small()).unwrap();
        let input = ContextInput {
            token_ranges: (0..5).map(|t| (3 * t, 3 * t + 3)).collect(),
            ..random_input(5, 3, 2)
        };
        let input = ContextInput { features: input.features[..15 * SUBTOKEN_FEATURES].to_vec(), ..input };
        let queries = vec![[0.2, 0.1], [-0.3, 0.4], [0.9, -0.7], [0.0, 0.05]];
        let cot = vec![[1.0, -0.5], [0.3, 0.8], [-0.6, 0.2], [0.4, 0.4]];
        let (_, prep, qt) = net.forward_trace(&input, &queries).unwrap();
        let g = net.backward(&prep, &qt, &cot).unwrap();
        let probe = |n: &Network| -> f64 {
            let out = n.forward(&input, &queries).unwrap();
            out.iter().zip(&cot).map(|(o, c)| o[0] * c[0] + o[1] * c[1]).sum()
        };
        let h = 1e-5;
        let mut worst = 0.0f64;
        for (ti, t) in net.params.tensors.iter().enumerate() {
            for k in 0..t.data.len() {
                let mut a = net.clone();
                a.params.tensors[ti].data[k] += h;
                let mut b = net.clone();
                b.params.tensors[ti].data[k] -= h;
                let fd = (probe(&a) - probe(&b)) / (2.0 * h);
                let an = g.tensors[ti].data[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                worst = worst.max(rel);
            }
        }
        assert!(worst < 1e-4, "worst relative gradient error {worst}");
    }

    #[test]
    fn zero_and_unused_cotangent_gradients() {
        let net = Network::new(NetworkConfig::small()).unwrap();
        let input = random_input(4, 3, 3);
        let queries = vec![[0.2, 0.1], [-0.3, 0.4]];
        let (_, prep, qt) = net.forward_trace(&input, &queries).unwrap();
        let g = net.backward(&prep, &qt, &[[0.0, 0.0]; 2]).unwrap();
        assert!(g.tensors.iter().all(|t| t.data.iter().all(|&v| v == 0.0)));
        let g = net.backward(&prep, &qt, &[[1.0, 0.0], [0.5, 0.0]]).unwrap();
        assert_eq!(g.get("out.b").unwrap().data[1], 0.0);
        let w = &g.get("out.w").unwrap().data;
        assert!(w.iter().skip(1).step_by(2).all(|&v| v == 0.0));
    }

    #[test]
    fn lipschitz_ratio() {
        let net = Network::new(NetworkConfig::small()).unwrap();
        let input = random_input(5, 3, 4);
        let queries = vec![[0.3, -0.1]];
        let base = net.forward(&input, &queries).unwrap()[0];
        let diff = |delta: f64| {
            let mut p = input.clone();
            p.features[4] += delta;
            let o = net.forward(&p, &queries).unwrap()[0];
            ((o[0] - base[0]).powi(2) + (o[1] - base[1]).powi(2)).sqrt()
        };
        let ratio = diff(1e-3) / diff(1e-4);
        assert!((ratio - 10.0).abs() < 0.5, "{ratio}");
    }

    #[test]
    fn embeddings_and_checkpoint_round_trip() {
        let net = Network::new(NetworkConfig::small()).unwrap();
        let input = random_input(6, 3, 5);
        let e = net.embed_contexts(&input).unwrap();
        assert_eq!(e.context_embeddings.len(), 6);
        for c in 0..16 {
            let m: f64 = e.context_embeddings.iter().map(|r| r[c]).sum::<f64>() / 6.0;
            assert!((m - e.field_embedding[c]).abs() < 1e-12);
        }
        let perm = permute_tokens(&input, &[5, 4, 3, 2, 1, 0], false);
        let e2 = net.embed_contexts(&perm).unwrap();
        for c in 0..16 {
            assert!((e.field_embedding[c] - e2.field_embedding[c]).abs() < 1e-12);
        }
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &net.config, &net.params).unwrap();
        let (cfg, params): (NetworkConfig, ParameterSet) = read_checkpoint(&mut buf.as_slice()).unwrap();
        let back = Network::from_parts(cfg, params).unwrap();
        assert_eq!(back.params, net.params);
        let (_, mut bad) = read_checkpoint::<NetworkConfig>(&mut buf.as_slice()).unwrap();
        bad.tensors.pop();
        assert!(matches!(Network::from_parts(net.config.clone(), bad), Err(IcmError::ShapeMismatch(_))));
    }

    #[test]
    fn desk_default_size() {
        let n = Network::new(NetworkConfig::default()).unwrap().parameter_count();
        assert!((150_000..250_000).contains(&n), "{n}");
        assert!(NetworkConfig { head_count: 3, ..Default::default() }.validate().is_err());
    }
}
