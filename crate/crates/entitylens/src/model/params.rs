//! Flat parameter storage with a typed layout.
//!
//! All tensors live in one contiguous `Vec<F>` addressed by `Slot`s. That
//! keeps the optimizer, gradient checks, and checkpoint IO elementwise over a
//! single buffer, while forward/backward code reads typed 2-d views.

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;

use super::config::ModelConfig;
use super::Flt;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub ln1_w: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
    pub ln2_w: Slot,
    pub ln2_b: Slot,
    pub w_in: Slot,
    pub w_out: Slot,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_embed: Slot,
    pub pos_embed: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_w: Slot,
    pub lnf_b: Slot,
    pub unembed: Slot,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let mut offset = 0usize;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let d = cfg.d_model;
        let tok_embed = slot(cfg.vocab_size, d);
        let pos_embed = slot(cfg.max_seq_len, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                ln1_w: slot(1, d),
                ln1_b: slot(1, d),
                wq: slot(d, d),
                wk: slot(d, d),
                wv: slot(d, d),
                wo: slot(d, d),
                ln2_w: slot(1, d),
                ln2_b: slot(1, d),
                w_in: slot(d, cfg.d_mlp),
                w_out: slot(cfg.d_mlp, d),
            })
            .collect();
        let lnf_w = slot(1, d);
        let lnf_b = slot(1, d);
        let unembed = slot(d, cfg.vocab_size);
        Layout {
            tok_embed,
            pos_embed,
            layers,
            lnf_w,
            lnf_b,
            unembed,
            total: offset,
        }
    }

    /// (name, slot) pairs in blob order; names are the checkpoint tensor table.
    pub fn tensor_table(&self) -> Vec<(String, Slot)> {
        let mut t = vec![
            ("tok_embed".to_string(), self.tok_embed),
            ("pos_embed".to_string(), self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            t.push((format!("layer{i}.ln1.w"), l.ln1_w));
            t.push((format!("layer{i}.ln1.b"), l.ln1_b));
            t.push((format!("layer{i}.attn.wq"), l.wq));
            t.push((format!("layer{i}.attn.wk"), l.wk));
            t.push((format!("layer{i}.attn.wv"), l.wv));
            t.push((format!("layer{i}.attn.wo"), l.wo));
            t.push((format!("layer{i}.ln2.w"), l.ln2_w));
            t.push((format!("layer{i}.ln2.b"), l.ln2_b));
            t.push((format!("layer{i}.mlp.w_in"), l.w_in));
            t.push((format!("layer{i}.mlp.w_out"), l.w_out));
        }
        t.push(("lnf.w".to_string(), self.lnf_w));
        t.push(("lnf.b".to_string(), self.lnf_b));
        t.push(("unembed".to_string(), self.unembed));
        t
    }

    /// Slots whose rows are vectors written into the residual stream:
    /// token/positional embeddings, attention output and MLP output
    /// projections. These are the orthogonalization targets.
    pub fn residual_writing_slots(&self) -> Vec<(String, Slot)> {
        let mut t = vec![
            ("tok_embed".to_string(), self.tok_embed),
            ("pos_embed".to_string(), self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            t.push((format!("layer{i}.attn.wo"), l.wo));
            t.push((format!("layer{i}.mlp.w_out"), l.w_out));
        }
        t
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVec<F> {
    pub data: Vec<F>,
}

impl<F: Flt> ParamVec<F> {
    pub fn zeros(n: usize) -> ParamVec<F> {
        ParamVec {
            data: vec![F::zero(); n],
        }
    }

    pub fn view(&self, s: Slot) -> ArrayView2<'_, F> {
        ArrayView2::from_shape((s.rows, s.cols), &self.data[s.offset..s.offset + s.len()])
            .expect("slot shape")
    }

    pub fn view_mut(&mut self, s: Slot) -> ArrayViewMut2<'_, F> {
        ArrayViewMut2::from_shape((s.rows, s.cols), &mut self.data[s.offset..s.offset + s.len()])
            .expect("slot shape")
    }

    pub fn vec_view(&self, s: Slot) -> ArrayView1<'_, F> {
        debug_assert_eq!(s.rows, 1);
        ArrayView1::from_shape(s.cols, &self.data[s.offset..s.offset + s.len()]).expect("slot")
    }

    pub fn vec_view_mut(&mut self, s: Slot) -> ArrayViewMut1<'_, F> {
        debug_assert_eq!(s.rows, 1);
        ArrayViewMut1::from_shape(s.cols, &mut self.data[s.offset..s.offset + s.len()])
            .expect("slot")
    }

    pub fn add_into(&mut self, slot: Slot, values: ArrayView2<'_, F>) {
        let mut v = self.view_mut(slot);
        v += &values;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl ParamVec<f32> {
    pub fn to_f64(&self) -> ParamVec<f64> {
        ParamVec {
            data: self.data.iter().map(|&x| f64::from(x)).collect(),
        }
    }
}

/// Standard-normal via Box-Muller over the seeded stream.
pub(crate) fn normal(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Random init: N(0, 0.02) weights and embeddings, LayerNorm gain 1 bias 0.
/// Small init keeps step-0 logits near zero, i.e. loss near ln(vocab).
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParamVec<f32> {
    let layout = Layout::new(cfg);
    let mut p = ParamVec::<f32>::zeros(layout.total);
    let mut r = rng::stream(seed, "model.init");
    for x in &mut p.data {
        *x = (normal(&mut r) * 0.02) as f32;
    }
    for l in &layout.layers {
        for s in [l.ln1_w, l.ln2_w] {
            p.view_mut(s).fill(1.0);
        }
        for s in [l.ln1_b, l.ln2_b] {
            p.view_mut(s).fill(0.0);
        }
    }
    p.view_mut(layout.lnf_w).fill(1.0);
    p.view_mut(layout.lnf_b).fill(0.0);
    p
}
