//! Decoder-only transformer language model parameterized by a positional
//! scheme.
//!
//! Blocks are standard pre-norm residual blocks — `x + Attn(LN(x))` then
//! `x + FFN(LN(x))` — with a final normalization before the vocabulary
//! projection. Attention follows the scaled-softmax form with per-head
//! additive temporal biases injected into the already-scaled logits,
//! immediately before normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posenc::{PositionalScheme, SchemeTables};
use crate::tape::{NodeId, Tape};
use crate::tensor::{Mask, Tensor};

const INIT_STD: f64 = 0.02;

/// Model hyperparameters plus the positional scheme and init seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layer count R.
    pub layers: usize,
    /// Head count H.
    pub heads: usize,
    /// Width d (divisible by H).
    pub width: usize,
    /// Vocabulary size v.
    pub vocab: usize,
    /// Training sequence length.
    pub l_tr: usize,
    /// Feed-forward width multiplier.
    pub ffn_mult: usize,
    pub scheme: PositionalScheme,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale preset: small enough to train on a CPU in minutes.
    pub fn desk(scheme: PositionalScheme, seed: u64) -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            width: 128,
            vocab: 256,
            l_tr: 128,
            ffn_mult: 4,
            scheme,
            seed,
        }
    }

    /// Full-scale reference preset (R=12, H=12, d=768, L_tr=512) over the
    /// byte vocabulary. Provided for completeness; not desk-trainable.
    pub fn paper(scheme: PositionalScheme, seed: u64) -> Self {
        ModelConfig {
            layers: 12,
            heads: 12,
            width: 768,
            vocab: 256,
            l_tr: 512,
            ffn_mult: 4,
            scheme,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::ZeroHeads);
        }
        if self.width == 0 || self.width % self.heads != 0 {
            return Err(Error::Dimension {
                op: "ModelConfig",
                msg: format!("width {} not divisible by heads {}", self.width, self.heads),
            });
        }
        if self.l_tr < 2 {
            return Err(Error::Dimension {
                op: "ModelConfig",
                msg: format!("training length {} must be at least 2", self.l_tr),
            });
        }
        if self.vocab == 0 || self.layers == 0 || self.ffn_mult == 0 {
            return Err(Error::Dimension {
                op: "ModelConfig",
                msg: "layers, vocab, and ffn_mult must be positive".into(),
            });
        }
        self.scheme.validate()
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn ffn_width(&self) -> usize {
        self.width * self.ffn_mult
    }

    /// Tables for evaluation up to `max_len` positions.
    pub fn build_tables(&self, max_len: usize) -> Result<SchemeTables> {
        SchemeTables::build(&self.scheme, self.heads, self.width, max_len)
    }
}

/// One attention block's projection weights: per-head query/key/value maps
/// stored `[d × d/H]` (applied as `x · W`) and the output mix `[d × d]`.
#[derive(Debug, Clone)]
pub struct AttnWeights {
    pub wq: Vec<Tensor>,
    pub wk: Vec<Tensor>,
    pub wv: Vec<Tensor>,
    pub wo: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub attn: AttnWeights,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
}

/// All trainable parameters. Immutable during inference; training holds the
/// single mutable reference.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub embedding: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_gain: Tensor,
    pub lnf_bias: Tensor,
    /// Vocabulary projection, stored `[d × v]`.
    pub output: Tensor,
}

fn gaussian_fill(rng: &mut ChaCha8Rng, t: &mut Tensor, std: f64) {
    // Box-Muller; one value per draw keeps the stream layout obvious.
    for v in t.data_mut() {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        *v = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

impl ModelState {
    /// Seeded initialization: N(0, 0.02) projections, zero biases, unit
    /// normalization gains.
    pub fn init(config: &ModelConfig) -> Result<ModelState> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dh, f, v) = (
            config.width,
            config.head_width(),
            config.ffn_width(),
            config.vocab,
        );
        let mut proj = |shape: &[usize]| {
            let mut t = Tensor::zeros(shape).with_grad();
            gaussian_fill(&mut rng, &mut t, INIT_STD);
            t
        };
        let embedding = proj(&[v, d]);
        let mut layers = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            let attn = AttnWeights {
                wq: (0..config.heads).map(|_| proj(&[d, dh])).collect(),
                wk: (0..config.heads).map(|_| proj(&[d, dh])).collect(),
                wv: (0..config.heads).map(|_| proj(&[d, dh])).collect(),
                wo: proj(&[d, d]),
            };
            layers.push(LayerWeights {
                ln1_gain: ones(&[d]),
                ln1_bias: Tensor::zeros(&[d]).with_grad(),
                attn,
                ln2_gain: ones(&[d]),
                ln2_bias: Tensor::zeros(&[d]).with_grad(),
                ffn_w1: proj(&[d, f]),
                ffn_b1: Tensor::zeros(&[f]).with_grad(),
                ffn_w2: proj(&[f, d]),
                ffn_b2: Tensor::zeros(&[d]).with_grad(),
            });
        }
        let output = proj(&[d, v]);
        Ok(ModelState {
            embedding,
            layers,
            lnf_gain: ones(&[d]),
            lnf_bias: Tensor::zeros(&[d]).with_grad(),
            output,
        })
    }

    /// Visit every parameter in the canonical (checkpoint) order.
    pub fn for_each_param<F: FnMut(String, &Tensor)>(&self, mut f: F) {
        f("embedding".into(), &self.embedding);
        for (i, l) in self.layers.iter().enumerate() {
            f(format!("layers.{i}.ln1.gain"), &l.ln1_gain);
            f(format!("layers.{i}.ln1.bias"), &l.ln1_bias);
            for (h, t) in l.attn.wq.iter().enumerate() {
                f(format!("layers.{i}.attn.wq.{h}"), t);
            }
            for (h, t) in l.attn.wk.iter().enumerate() {
                f(format!("layers.{i}.attn.wk.{h}"), t);
            }
            for (h, t) in l.attn.wv.iter().enumerate() {
                f(format!("layers.{i}.attn.wv.{h}"), t);
            }
            f(format!("layers.{i}.attn.wo"), &l.attn.wo);
            f(format!("layers.{i}.ln2.gain"), &l.ln2_gain);
            f(format!("layers.{i}.ln2.bias"), &l.ln2_bias);
            f(format!("layers.{i}.ffn.w1"), &l.ffn_w1);
            f(format!("layers.{i}.ffn.b1"), &l.ffn_b1);
            f(format!("layers.{i}.ffn.w2"), &l.ffn_w2);
            f(format!("layers.{i}.ffn.b2"), &l.ffn_b2);
        }
        f("final_norm.gain".into(), &self.lnf_gain);
        f("final_norm.bias".into(), &self.lnf_bias);
        f("output".into(), &self.output);
    }

    /// Mutable visit in the same canonical order.
    pub fn for_each_param_mut<F: FnMut(String, &mut Tensor)>(&mut self, mut f: F) {
        f("embedding".into(), &mut self.embedding);
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(format!("layers.{i}.ln1.gain"), &mut l.ln1_gain);
            f(format!("layers.{i}.ln1.bias"), &mut l.ln1_bias);
            for (h, t) in l.attn.wq.iter_mut().enumerate() {
                f(format!("layers.{i}.attn.wq.{h}"), t);
            }
            for (h, t) in l.attn.wk.iter_mut().enumerate() {
                f(format!("layers.{i}.attn.wk.{h}"), t);
            }
            for (h, t) in l.attn.wv.iter_mut().enumerate() {
                f(format!("layers.{i}.attn.wv.{h}"), t);
            }
            f(format!("layers.{i}.attn.wo"), &mut l.attn.wo);
            f(format!("layers.{i}.ln2.gain"), &mut l.ln2_gain);
            f(format!("layers.{i}.ln2.bias"), &mut l.ln2_bias);
            f(format!("layers.{i}.ffn.w1"), &mut l.ffn_w1);
            f(format!("layers.{i}.ffn.b1"), &mut l.ffn_b1);
            f(format!("layers.{i}.ffn.w2"), &mut l.ffn_w2);
            f(format!("layers.{i}.ffn.b2"), &mut l.ffn_b2);
        }
        f("final_norm.gain".into(), &mut self.lnf_gain);
        f("final_norm.bias".into(), &mut self.lnf_bias);
        f("output".into(), &mut self.output);
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, t| n += t.numel());
        n
    }

    pub fn zero_grads(&mut self) {
        self.for_each_param_mut(|_, t| t.zero_grad());
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.for_each_param(|_, t| ok &= t.is_finite());
        ok
    }
}

fn ones(shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, vec![1.0; n]).unwrap().with_grad()
}

/// Tape-resident handles to all parameters, in canonical order.
struct ParamNodes {
    embedding: NodeId,
    layers: Vec<LayerNodes>,
    lnf_gain: NodeId,
    lnf_bias: NodeId,
    output: NodeId,
}

struct LayerNodes {
    ln1_gain: NodeId,
    ln1_bias: NodeId,
    wq: Vec<NodeId>,
    wk: Vec<NodeId>,
    wv: Vec<NodeId>,
    wo: NodeId,
    ln2_gain: NodeId,
    ln2_bias: NodeId,
    ffn_w1: NodeId,
    ffn_b1: NodeId,
    ffn_w2: NodeId,
    ffn_b2: NodeId,
}

/// A completed forward pass: the tape plus node handles for the logits, the
/// post-embedding input vectors, and every parameter leaf (in canonical
/// order, for gradient harvesting).
pub struct ForwardPass {
    pub tape: Tape,
    pub logits: NodeId,
    pub input: NodeId,
    pub param_nodes: Vec<(String, NodeId)>,
}

/// One attention head: `softmax(q·kᵀ/scale + bias, mask) · v`.
///
/// `bias`, when present, is a dense row-major L×L matrix added to the scaled
/// logits right before normalization.
pub fn attention_head(
    tape: &mut Tape,
    q: NodeId,
    k: NodeId,
    v: NodeId,
    bias: Option<&[f64]>,
    mask: &Mask,
    scale: f64,
) -> Result<NodeId> {
    let scores = tape.matmul_nt(q, k)?;
    let scaled = tape.scale(scores, 1.0 / scale);
    let biased = match bias {
        Some(b) => tape.add_const(scaled, b)?,
        None => scaled,
    };
    let attn = tape.softmax_rows(biased, Some(mask))?;
    tape.matmul(attn, v)
}

/// Run the model over `tokens`, producing per-position next-token logits.
pub fn forward(
    state: &ModelState,
    config: &ModelConfig,
    tables: &SchemeTables,
    tokens: &[usize],
) -> Result<ForwardPass> {
    let l = tokens.len();
    if l == 0 {
        return Err(Error::Dimension {
            op: "forward",
            msg: "empty token sequence".into(),
        });
    }
    if l > tables.max_len {
        return Err(Error::LengthExceedsBias {
            len: l,
            table: tables.max_len,
        });
    }
    let mut tape = Tape::new();
    let nodes = leaf_params(&mut tape, state);
    let mask = tables.bias.mask().truncated(l);
    let scale = (config.head_width() as f64).sqrt();
    let positions: Vec<usize> = (0..l).collect();

    // Dense per-head bias slices are shared by every layer.
    let bias_dense: Option<Vec<Vec<f64>>> = if tables.bias.has_bias() {
        Some(
            (0..config.heads)
                .map(|h| tables.bias.dense_head(h, l))
                .collect::<Result<_>>()?,
        )
    } else {
        None
    };

    let embedded = tape.embedding_lookup(nodes.embedding, tokens)?;
    let input = match &tables.sinusoidal {
        Some(table) => {
            let rows = &table.data()[..l * config.width];
            tape.add_const(embedded, rows)?
        }
        None => embedded,
    };

    let mut x = input;
    for layer in &nodes.layers {
        let h1 = tape.layernorm(x, layer.ln1_gain, layer.ln1_bias)?;
        let mut head_outs = Vec::with_capacity(config.heads);
        for h in 0..config.heads {
            let mut q = tape.matmul(h1, layer.wq[h])?;
            let mut k = tape.matmul(h1, layer.wk[h])?;
            let v = tape.matmul(h1, layer.wv[h])?;
            if let Some(rot) = &tables.rotary {
                q = tape.rotary(q, rot, &positions)?;
                k = tape.rotary(k, rot, &positions)?;
            }
            let bias = bias_dense.as_ref().map(|b| b[h].as_slice());
            head_outs.push(attention_head(&mut tape, q, k, v, bias, &mask, scale)?);
        }
        let cat = tape.concat_cols(&head_outs)?;
        let mixed = tape.matmul(cat, layer.wo)?;
        x = tape.add(x, mixed)?;

        let h2 = tape.layernorm(x, layer.ln2_gain, layer.ln2_bias)?;
        let up = tape.matmul(h2, layer.ffn_w1)?;
        let up = tape.add_row_vec(up, layer.ffn_b1)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, layer.ffn_w2)?;
        let down = tape.add_row_vec(down, layer.ffn_b2)?;
        x = tape.add(x, down)?;
    }
    let xf = tape.layernorm(x, nodes.lnf_gain, nodes.lnf_bias)?;
    let logits = tape.matmul(xf, nodes.output)?;

    let param_nodes = flatten_param_nodes(state, &nodes);
    Ok(ForwardPass {
        tape,
        logits,
        input,
        param_nodes,
    })
}

fn leaf_params(tape: &mut Tape, state: &ModelState) -> ParamNodes {
    let embedding = tape.leaf(&state.embedding);
    let layers = state
        .layers
        .iter()
        .map(|l| LayerNodes {
            ln1_gain: tape.leaf(&l.ln1_gain),
            ln1_bias: tape.leaf(&l.ln1_bias),
            wq: l.attn.wq.iter().map(|t| tape.leaf(t)).collect(),
            wk: l.attn.wk.iter().map(|t| tape.leaf(t)).collect(),
            wv: l.attn.wv.iter().map(|t| tape.leaf(t)).collect(),
            wo: tape.leaf(&l.attn.wo),
            ln2_gain: tape.leaf(&l.ln2_gain),
            ln2_bias: tape.leaf(&l.ln2_bias),
            ffn_w1: tape.leaf(&l.ffn_w1),
            ffn_b1: tape.leaf(&l.ffn_b1),
            ffn_w2: tape.leaf(&l.ffn_w2),
            ffn_b2: tape.leaf(&l.ffn_b2),
        })
        .collect();
    ParamNodes {
        embedding,
        layers,
        lnf_gain: tape.leaf(&state.lnf_gain),
        lnf_bias: tape.leaf(&state.lnf_bias),
        output: tape.leaf(&state.output),
    }
}

fn flatten_param_nodes(state: &ModelState, nodes: &ParamNodes) -> Vec<(String, NodeId)> {
    let mut ids = Vec::new();
    ids.push(nodes.embedding);
    for l in &nodes.layers {
        ids.push(l.ln1_gain);
        ids.push(l.ln1_bias);
        ids.extend(&l.wq);
        ids.extend(&l.wk);
        ids.extend(&l.wv);
        ids.push(l.wo);
        ids.push(l.ln2_gain);
        ids.push(l.ln2_bias);
        ids.push(l.ffn_w1);
        ids.push(l.ffn_b1);
        ids.push(l.ffn_w2);
        ids.push(l.ffn_b2);
    }
    ids.push(nodes.lnf_gain);
    ids.push(nodes.lnf_bias);
    ids.push(nodes.output);
    let mut named = Vec::with_capacity(ids.len());
    let mut i = 0;
    state.for_each_param(|name, _| {
        named.push((name, ids[i]));
        i += 1;
    });
    named
}

/// Forward plus cross-entropy against `targets`; returns the pass and the
/// loss node.
pub fn lm_loss(
    state: &ModelState,
    config: &ModelConfig,
    tables: &SchemeTables,
    inputs: &[usize],
    targets: &[usize],
) -> Result<(ForwardPass, NodeId)> {
    let mut pass = forward(state, config, tables, inputs)?;
    let loss = pass.tape.cross_entropy(pass.logits, targets)?;
    Ok((pass, loss))
}

/// Gradient of the next-token loss at `target_position` with respect to each
/// post-embedding input vector. Returns one gradient vector per position.
pub fn input_gradients(
    state: &ModelState,
    config: &ModelConfig,
    tables: &SchemeTables,
    tokens: &[usize],
    target_position: usize,
) -> Result<Vec<Vec<f64>>> {
    let l = tokens.len();
    if target_position + 1 >= l {
        return Err(Error::Dimension {
            op: "input_gradients",
            msg: format!(
                "target position {target_position} has no following token in a length-{l} segment"
            ),
        });
    }
    let mut pass = forward(state, config, tables, tokens)?;
    let row = pass.tape.slice_rows(pass.logits, target_position, 1)?;
    let loss = pass.tape.cross_entropy(row, &[tokens[target_position + 1]])?;
    pass.tape.backward(loss)?;
    let g = pass
        .tape
        .grad(pass.input)
        .expect("input participates in differentiation");
    let d = config.width;
    Ok(g.chunks_exact(d).map(|c| c.to_vec()).collect())
}

/// Harvest parameter gradients from a backward-completed pass, in canonical
/// order. The list aligns with `ModelState::for_each_param`.
pub fn collect_param_grads(pass: &ForwardPass) -> Vec<Vec<f64>> {
    pass.param_nodes
        .iter()
        .map(|(_, id)| {
            pass.tape
                .grad(*id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; pass.tape.value(*id).len()])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(scheme: PositionalScheme) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            width: 8,
            vocab: 11,
            l_tr: 5,
            ffn_mult: 2,
            scheme,
            seed: 7,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(PositionalScheme::None);
        assert!(c.validate().is_ok());
        c.width = 9;
        assert!(c.validate().is_err());
        c.width = 8;
        c.l_tr = 1;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_deterministic() {
        let c = tiny_config(PositionalScheme::alibi());
        let a = ModelState::init(&c).unwrap();
        let b = ModelState::init(&c).unwrap();
        let mut pairs = Vec::new();
        a.for_each_param(|name, t| pairs.push((name, t.data().to_vec())));
        b.for_each_param(|name, t| {
            let (n2, d2) = pairs.remove(0);
            assert_eq!(name, n2);
            assert_eq!(t.data(), &d2[..]);
        });
    }

    #[test]
    fn single_token_attention_row_is_one() {
        for scheme in [
            PositionalScheme::None,
            PositionalScheme::sinusoidal(),
            PositionalScheme::rotary(),
            PositionalScheme::alibi(),
            PositionalScheme::windowed(2),
            PositionalScheme::Sandwich { dbar: 4, base: 1e4 },
            PositionalScheme::logbias(),
        ] {
            let c = tiny_config(scheme);
            let state = ModelState::init(&c).unwrap();
            let tables = c.build_tables(4).unwrap();
            let pass = forward(&state, &c, &tables, &[3]).unwrap();
            assert_eq!(pass.tape.shape(pass.logits), &[1, 11]);
            assert!(pass.tape.value(pass.logits).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_slope_alibi_matches_none_bitwise() {
        let mut c = tiny_config(PositionalScheme::Alibi {
            shift: 0,
            equalized: Some(f64::INFINITY),
        });
        // equalized h = +inf gives slope 2^-inf = 0 exactly
        let state = ModelState::init(&c).unwrap();
        let tables_zero = c.build_tables(6).unwrap();
        c.scheme = PositionalScheme::None;
        let tables_none = c.build_tables(6).unwrap();
        let tokens = [1usize, 4, 2, 9, 9];
        let a = forward(&state, &c, &tables_zero, &tokens).unwrap();
        let b = forward(&state, &c, &tables_none, &tokens).unwrap();
        let av = a.tape.value(a.logits);
        let bv = b.tape.value(b.logits);
        assert_eq!(av.len(), bv.len());
        for (x, y) in av.iter().zip(bv) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn causality_exact() {
        let c = tiny_config(PositionalScheme::alibi());
        let state = ModelState::init(&c).unwrap();
        let tables = c.build_tables(8).unwrap();
        let base = [1usize, 4, 2, 9, 7];
        let pass = forward(&state, &c, &tables, &base).unwrap();
        let mut perturbed = base;
        perturbed[4] = 0;
        let pass2 = forward(&state, &c, &tables, &perturbed).unwrap();
        let v = c.vocab;
        for pos in 0..4 {
            let a = &pass.tape.value(pass.logits)[pos * v..(pos + 1) * v];
            let b = &pass2.tape.value(pass2.logits)[pos * v..(pos + 1) * v];
            assert_eq!(a, b, "position {pos} affected by a future token");
        }
    }

    #[test]
    fn forward_checks_lengths_and_tokens() {
        let c = tiny_config(PositionalScheme::None);
        let state = ModelState::init(&c).unwrap();
        let tables = c.build_tables(4).unwrap();
        assert!(matches!(
            forward(&state, &c, &tables, &[0; 5]),
            Err(Error::LengthExceedsBias { len: 5, table: 4 })
        ));
        assert!(matches!(
            forward(&state, &c, &tables, &[0, 99]),
            Err(Error::IndexOutOfRange { .. })
        ));
    }

    #[test]
    fn input_gradients_finite_and_deterministic() {
        let c = tiny_config(PositionalScheme::sinusoidal());
        let state = ModelState::init(&c).unwrap();
        let tables = c.build_tables(6).unwrap();
        let tokens = [5usize, 1, 8, 2, 10, 3];
        let g1 = input_gradients(&state, &c, &tables, &tokens, 4).unwrap();
        let g2 = input_gradients(&state, &c, &tables, &tokens, 4).unwrap();
        assert_eq!(g1.len(), 6);
        for (a, b) in g1.iter().zip(&g2) {
            assert!(a.iter().all(|v| v.is_finite()));
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        // position after the target contributes nothing
        assert!(g1[5].iter().all(|&v| v == 0.0));
        assert!(input_gradients(&state, &c, &tables, &tokens, 5).is_err());
    }
}
