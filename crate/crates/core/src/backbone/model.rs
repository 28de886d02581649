use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::config::{AttentionMode, BackboneConfig};
use super::sequence::{Element, InterleavedSequence, PAD};
use crate::autograd::{ParamId, ParamStore, Real, Segment, Tape, Var};
use crate::error::{Error, Result};

pub const INIT_STD: f64 = 0.02;

pub(crate) fn normal_matrix<F: Real>(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Array2<F> {
    let dist = Normal::new(0.0, std).expect("valid std");
    Array2::from_shape_simple_fn((rows, cols), || F::of(dist.sample(rng)))
}

/// Looks up a parameter by name and checks its shape.
pub(crate) fn bind_param<F: Real>(
    store: &ParamStore<F>,
    name: &str,
    shape: (usize, usize),
) -> Result<ParamId> {
    let id = store
        .find(name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
    let got = store.get(id).dim();
    if got != shape {
        return Err(Error::Checkpoint(format!(
            "tensor {name} has shape {got:?}, expected {shape:?}"
        )));
    }
    Ok(id)
}

/// Parameters of one pre-norm transformer block.
#[derive(Clone, Debug)]
pub struct BlockParams {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

fn block_shapes(d: usize, d_ff: usize) -> [(&'static str, (usize, usize)); 16] {
    [
        ("ln1.g", (1, d)),
        ("ln1.b", (1, d)),
        ("attn.wq", (d, d)),
        ("attn.bq", (1, d)),
        ("attn.wk", (d, d)),
        ("attn.bk", (1, d)),
        ("attn.wv", (d, d)),
        ("attn.bv", (1, d)),
        ("attn.wo", (d, d)),
        ("attn.bo", (1, d)),
        ("ln2.g", (1, d)),
        ("ln2.b", (1, d)),
        ("ffn.w1", (d, d_ff)),
        ("ffn.b1", (1, d_ff)),
        ("ffn.w2", (d_ff, d)),
        ("ffn.b2", (1, d)),
    ]
}

impl BlockParams {
    fn from_ids(ids: &[ParamId]) -> Self {
        Self {
            ln1_g: ids[0],
            ln1_b: ids[1],
            wq: ids[2],
            bq: ids[3],
            wk: ids[4],
            bk: ids[5],
            wv: ids[6],
            bv: ids[7],
            wo: ids[8],
            bo: ids[9],
            ln2_g: ids[10],
            ln2_b: ids[11],
            w1: ids[12],
            b1: ids[13],
            w2: ids[14],
            b2: ids[15],
        }
    }

    fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        d: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let ids: Vec<ParamId> = block_shapes(d, d_ff)
            .into_iter()
            .map(|(name, (r, c))| {
                let value = if name.ends_with(".g") {
                    Array2::ones((r, c))
                } else if r == 1 {
                    Array2::zeros((r, c))
                } else {
                    normal_matrix(r, c, INIT_STD, rng)
                };
                store.add(format!("{prefix}.{name}"), value)
            })
            .collect();
        Self::from_ids(&ids)
    }

    fn bind<F: Real>(store: &ParamStore<F>, prefix: &str, d: usize, d_ff: usize) -> Result<Self> {
        let ids = block_shapes(d, d_ff)
            .into_iter()
            .map(|(name, shape)| bind_param(store, &format!("{prefix}.{name}"), shape))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_ids(&ids))
    }

    fn forward<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        x: Var,
        heads: usize,
        segments: &[Segment],
        causal: bool,
    ) -> Var {
        let linear = |tape: &mut Tape<'_, F>, x: Var, w: ParamId, b: ParamId| {
            let w = tape.param(w);
            let b = tape.param(b);
            let h = tape.matmul(x, w);
            tape.add_row(h, b)
        };
        let g = tape.param(self.ln1_g);
        let b = tape.param(self.ln1_b);
        let h = tape.layer_norm(x, g, b);
        let q = linear(tape, h, self.wq, self.bq);
        let k = linear(tape, h, self.wk, self.bk);
        let v = linear(tape, h, self.wv, self.bv);
        let a = tape.attention(q, k, v, heads, segments, causal);
        let a = linear(tape, a, self.wo, self.bo);
        let x = tape.add(x, a);

        let g = tape.param(self.ln2_g);
        let b = tape.param(self.ln2_b);
        let h = tape.layer_norm(x, g, b);
        let f = linear(tape, h, self.w1, self.b1);
        let f = tape.gelu(f);
        let f = linear(tape, f, self.w2, self.b2);
        tape.add(x, f)
    }
}

/// A stack of pre-norm blocks followed by a final layer norm.
#[derive(Clone, Debug)]
pub struct TransformerStack {
    heads: usize,
    blocks: Vec<BlockParams>,
    ln_g: ParamId,
    ln_b: ParamId,
}

impl TransformerStack {
    pub(crate) fn init<F: Real>(
        store: &mut ParamStore<F>,
        prefix: &str,
        layers: usize,
        d: usize,
        heads: usize,
        d_ff: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let blocks = (0..layers)
            .map(|l| BlockParams::init(store, &format!("{prefix}.blocks.{l}"), d, d_ff, rng))
            .collect();
        let ln_g = store.add(format!("{prefix}.ln_f.g"), Array2::ones((1, d)));
        let ln_b = store.add(format!("{prefix}.ln_f.b"), Array2::zeros((1, d)));
        Self {
            heads,
            blocks,
            ln_g,
            ln_b,
        }
    }

    pub(crate) fn bind<F: Real>(
        store: &ParamStore<F>,
        prefix: &str,
        layers: usize,
        d: usize,
        heads: usize,
        d_ff: usize,
    ) -> Result<Self> {
        let blocks = (0..layers)
            .map(|l| BlockParams::bind(store, &format!("{prefix}.blocks.{l}"), d, d_ff))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            heads,
            blocks,
            ln_g: bind_param(store, &format!("{prefix}.ln_f.g"), (1, d))?,
            ln_b: bind_param(store, &format!("{prefix}.ln_f.b"), (1, d))?,
        })
    }

    pub(crate) fn forward<F: Real>(
        &self,
        tape: &mut Tape<'_, F>,
        mut x: Var,
        segments: &[Segment],
        causal: bool,
    ) -> Result<Var> {
        for (l, block) in self.blocks.iter().enumerate() {
            x = block.forward(tape, x, self.heads, segments, causal);
            if tape.value(x).iter().any(|v| !v.is_finite()) {
                return Err(Error::numeric(l, "non-finite hidden state"));
            }
        }
        let g = tape.param(self.ln_g);
        let b = tape.param(self.ln_b);
        Ok(tape.layer_norm(x, g, b))
    }
}

/// Several sequences laid out row-wise in one matrix.
///
/// With `pad_to`, every sequence occupies exactly that many rows; the
/// trailing rows hold PAD tokens and are excluded from attention keys and
/// pooling.
#[derive(Clone, Debug)]
pub struct PackedBatch {
    token_rows: Vec<usize>,
    token_ids: Vec<usize>,
    patch_rows: Vec<usize>,
    patches: Vec<f32>,
    positions: Vec<usize>,
    segments: Vec<Segment>,
    rows: usize,
}

impl PackedBatch {
    pub fn new(seqs: &[&InterleavedSequence], config: &BackboneConfig, pad_to: Option<usize>) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::input("empty batch"));
        }
        let mut batch = PackedBatch {
            token_rows: Vec::new(),
            token_ids: Vec::new(),
            patch_rows: Vec::new(),
            patches: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
            rows: 0,
        };
        for seq in seqs {
            seq.validate(config.vocab_size, config.patch_dim)?;
            let valid = seq.len();
            let len = pad_to.unwrap_or(valid);
            if len < valid {
                return Err(Error::input(format!("sequence of length {valid} exceeds pad_to {len}")));
            }
            if len > config.max_len {
                return Err(Error::input(format!(
                    "sequence length {len} exceeds max_len {}",
                    config.max_len
                )));
            }
            let start = batch.rows;
            for (i, el) in seq.elements().iter().enumerate() {
                match el {
                    Element::Text(id) => {
                        batch.token_rows.push(start + i);
                        batch.token_ids.push(*id as usize);
                    }
                    Element::Patch { values, .. } => {
                        batch.patch_rows.push(start + i);
                        batch.patches.extend_from_slice(values);
                    }
                }
            }
            for i in valid..len {
                batch.token_rows.push(start + i);
                batch.token_ids.push(PAD as usize);
            }
            batch.positions.extend(0..len);
            batch.segments.push(Segment { start, len, valid });
            batch.rows += len;
        }
        Ok(batch)
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    /// Row index of position `pos` of sequence `seq`.
    pub fn row(&self, seq: usize, pos: usize) -> usize {
        self.segments[seq].start + pos
    }
}

/// Per-position outputs of the backbone for one sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates<F> {
    pub states: Array2<F>,
}

impl<F: Real> HiddenStates<F> {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.states.nrows() == 0
    }
}

/// Token/patch embedding, learned positions and a pre-norm transformer.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    tok: ParamId,
    patch_w: ParamId,
    patch_b: ParamId,
    pos: ParamId,
    stack: TransformerStack,
}

pub const BACKBONE_PREFIX: &str = "backbone";

impl Backbone {
    pub fn init<F: Real>(config: &BackboneConfig, store: &mut ParamStore<F>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let p = BACKBONE_PREFIX;
        let tok = store.add(format!("{p}.tok_embed"), normal_matrix(config.vocab_size, d, INIT_STD, rng));
        let patch_w = store.add(format!("{p}.patch_proj.w"), normal_matrix(config.patch_dim, d, INIT_STD, rng));
        let patch_b = store.add(format!("{p}.patch_proj.b"), Array2::zeros((1, d)));
        let pos = store.add(format!("{p}.pos_embed"), normal_matrix(config.max_len, d, INIT_STD, rng));
        let stack = TransformerStack::init(store, p, config.n_layers, d, config.n_heads, config.d_ff, rng);
        Ok(Self {
            config: config.clone(),
            tok,
            patch_w,
            patch_b,
            pos,
            stack,
        })
    }

    /// Attaches to parameters already present in `store` (e.g. loaded from
    /// a checkpoint), checking every shape.
    pub fn bind<F: Real>(config: &BackboneConfig, store: &ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let p = BACKBONE_PREFIX;
        Ok(Self {
            config: config.clone(),
            tok: bind_param(store, &format!("{p}.tok_embed"), (config.vocab_size, d))?,
            patch_w: bind_param(store, &format!("{p}.patch_proj.w"), (config.patch_dim, d))?,
            patch_b: bind_param(store, &format!("{p}.patch_proj.b"), (1, d))?,
            pos: bind_param(store, &format!("{p}.pos_embed"), (config.max_len, d))?,
            stack: TransformerStack::bind(store, p, config.n_layers, d, config.n_heads, config.d_ff)?,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn token_table(&self) -> ParamId {
        self.tok
    }

    pub fn patch_projection(&self) -> ParamId {
        self.patch_w
    }

    pub fn pack(&self, seqs: &[&InterleavedSequence], pad_to: Option<usize>) -> Result<PackedBatch> {
        PackedBatch::new(seqs, &self.config, pad_to)
    }

    /// Input embeddings: token rows from the table, patch rows through the
    /// projection, plus positional embeddings.
    pub fn embed<F: Real>(&self, tape: &mut Tape<'_, F>, batch: &PackedBatch) -> Var {
        let table = tape.param(self.tok);
        let mut sources = Vec::with_capacity(2);
        let mut map = vec![(0, 0); batch.rows];
        if !batch.token_rows.is_empty() {
            let toks = tape.gather_rows(table, &batch.token_ids);
            for (k, &r) in batch.token_rows.iter().enumerate() {
                map[r] = (sources.len(), k);
            }
            sources.push(toks);
        }
        if !batch.patch_rows.is_empty() {
            let n = batch.patch_rows.len();
            let patches = Array2::from_shape_vec(
                (n, self.config.patch_dim),
                batch.patches.iter().map(|&x| F::of(x as f64)).collect(),
            )
            .expect("patch buffer matches row count");
            let patches = tape.constant(patches);
            let w = tape.param(self.patch_w);
            let b = tape.param(self.patch_b);
            let proj = tape.matmul(patches, w);
            let proj = tape.add_row(proj, b);
            for (k, &r) in batch.patch_rows.iter().enumerate() {
                map[r] = (sources.len(), k);
            }
            sources.push(proj);
        }
        let content = tape.assemble(&sources, &map);
        let pos_table = tape.param(self.pos);
        let pos = tape.gather_rows(pos_table, &batch.positions);
        tape.add(content, pos)
    }

    /// Hidden states for every row of `batch`.
    pub fn forward<F: Real>(&self, tape: &mut Tape<'_, F>, batch: &PackedBatch, mode: AttentionMode) -> Result<Var> {
        let x = self.embed(tape, batch);
        self.stack.forward(tape, x, &batch.segments, mode.is_causal())
    }

    pub fn embed_inputs<F: Real>(&self, store: &ParamStore<F>, seq: &InterleavedSequence) -> Result<Array2<F>> {
        let batch = self.pack(&[seq], None)?;
        let mut tape = Tape::new(store);
        let x = self.embed(&mut tape, &batch);
        Ok(tape.value(x).clone())
    }

    pub fn hidden_states<F: Real>(
        &self,
        store: &ParamStore<F>,
        seq: &InterleavedSequence,
        mode: AttentionMode,
    ) -> Result<HiddenStates<F>> {
        let batch = self.pack(&[seq], None)?;
        let mut tape = Tape::new(store);
        let h = self.forward(&mut tape, &batch, mode)?;
        Ok(HiddenStates {
            states: tape.value(h).clone(),
        })
    }

    /// Hidden states of `seq` computed inside a right-padded batch of length
    /// `pad_to`; only the real rows are returned.
    pub fn hidden_states_padded<F: Real>(
        &self,
        store: &ParamStore<F>,
        seq: &InterleavedSequence,
        mode: AttentionMode,
        pad_to: usize,
    ) -> Result<HiddenStates<F>> {
        let batch = self.pack(&[seq], Some(pad_to))?;
        let mut tape = Tape::new(store);
        let h = self.forward(&mut tape, &batch, mode)?;
        Ok(HiddenStates {
            states: tape.value(h).slice(s![..seq.len(), ..]).to_owned(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::sequence::EOS;
    use crate::rng::rng_from_seed;

    fn tiny() -> BackboneConfig {
        BackboneConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            d_ff: 16,
            vocab_size: 12,
            patch_dim: 3,
            max_len: 16,
            ..Default::default()
        }
    }

    fn mixed() -> InterleavedSequence {
        let mut s = InterleavedSequence::from_tokens(&[4, 7]);
        s.push_image((0..4).map(|k| vec![0.1 * k as f32, -0.2, 0.3]).collect());
        s
    }

    #[test]
    fn embedding_rows_follow_definition() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let model = Backbone::init(&cfg, &mut store, &mut rng_from_seed(0)).unwrap();
        let seq = mixed();
        let e = model.embed_inputs(&store, &seq).unwrap();
        assert_eq!(e.dim(), (6, 8));
        let table = store.get(model.token_table());
        let pos = store.get(model.pos);
        let expect = &table.row(7) + &pos.row(1);
        assert_eq!(e.row(1), expect);

        let zero = InterleavedSequence::new(vec![Element::Patch {
            image: 0,
            values: vec![0.0; 3],
        }]);
        let e = model.embed_inputs(&store, &zero).unwrap();
        assert_eq!(e.row(0), pos.row(0));
    }

    #[test]
    fn bad_inputs_are_rejected() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let model = Backbone::init(&cfg, &mut store, &mut rng_from_seed(0)).unwrap();
        assert!(model.embed_inputs(&store, &InterleavedSequence::from_tokens(&[12])).is_err());
        let long = InterleavedSequence::from_tokens(&[4; 17]);
        assert!(model.hidden_states(&store, &long, AttentionMode::Causal).is_err());
    }

    #[test]
    fn single_position_modes_agree() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let model = Backbone::init(&cfg, &mut store, &mut rng_from_seed(3)).unwrap();
        let seq = InterleavedSequence::from_tokens(&[EOS]);
        let a = model.hidden_states(&store, &seq, AttentionMode::Causal).unwrap();
        let b = model.hidden_states(&store, &seq, AttentionMode::Bidirectional).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let model = Backbone::init(&cfg, &mut store, &mut rng_from_seed(3)).unwrap();
        let seq = mixed();
        let a = model.hidden_states(&store, &seq, AttentionMode::Bidirectional).unwrap();
        let b = model.hidden_states(&store, &seq, AttentionMode::Bidirectional).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), seq.len());
    }

    #[test]
    fn non_finite_weights_report_layer() {
        let cfg = tiny();
        let mut store = ParamStore::<f32>::new();
        let model = Backbone::init(&cfg, &mut store, &mut rng_from_seed(3)).unwrap();
        let id = store.find("backbone.blocks.1.ffn.b2").unwrap();
        store.get_mut(id)[[0, 0]] = f32::NAN;
        let err = model
            .hidden_states(&store, &mixed(), AttentionMode::Causal)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric { layer: 1, .. }), "{err}");
    }

    #[test]
    fn padding_does_not_leak() {
        let cfg = tiny();
        let mut store = ParamStore::<f64>::new();
        let model = Backbone::init(&cfg, &mut store, &mut rng_from_seed(9)).unwrap();
        let seq = mixed();
        for mode in [AttentionMode::Causal, AttentionMode::Bidirectional] {
            let plain = model.hidden_states(&store, &seq, mode).unwrap();
            let padded = model.hidden_states_padded(&store, &seq, mode, 11).unwrap();
            for (a, b) in plain.states.iter().zip(padded.states.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
