use ndarray::{s, Array1, Array2, Axis};

use super::kv::KvLayer;
use super::prefill::PrefillOutput;
use super::rope::{frequencies, rotate_row};
use super::{argmax, Model, TokenId};
use crate::error::{Error, Result};

/// Everything greedy decoding needs after a prefill: the position-free KV
/// cache, the position of every cached row and the last hidden state.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub kv: Vec<KvLayer>,
    pub positions: Vec<usize>,
    pub last_hidden: Array1<f64>,
}

impl PrefillOutput {
    pub fn decode_state(&self) -> Result<DecodeState> {
        let n = self.positions.len();
        if n == 0 {
            return Err(Error::Argument(
                "cannot decode from an empty prefill".into(),
            ));
        }
        let last = n - 1;
        if self.depth[last] < self.kv.len() {
            return Err(Error::Plan(
                "last prompt token was not computed in every layer".into(),
            ));
        }
        Ok(DecodeState {
            kv: self.kv.clone(),
            positions: self.positions.clone(),
            last_hidden: Model::hidden_row(self, last),
        })
    }
}

impl Model {
    /// Greedy decoding. Each step appends one row to every layer of the cache.
    pub fn decode(&self, state: &mut DecodeState, max_steps: usize) -> Result<Vec<TokenId>> {
        if state.kv.is_empty() || state.kv[0].n_rows() == 0 {
            return Err(Error::Argument("decode needs a non-empty KV cache".into()));
        }
        let mut out = Vec::with_capacity(max_steps);
        for _ in 0..max_steps {
            let tok = argmax(&self.logits(state.last_hidden.view()));
            out.push(tok);
            self.step(state, tok)?;
        }
        Ok(out)
    }

    fn step(&self, state: &mut DecodeState, tok: TokenId) -> Result<()> {
        let cfg = self.config();
        let (dh, n_heads) = (cfg.d_head, cfg.n_heads);
        let freqs = frequencies(dh, cfg.rpe_base);
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = state.positions.last().map_or(0, |p| p + 1);
        let mut h = self.embed_tokens(&[tok])?;

        for (lw, cache) in self.layers.iter().zip(state.kv.iter_mut()) {
            let x = lw.ln_attn.forward(&h);
            let mut q = x.dot(&lw.wq);
            let k = x.dot(&lw.wk);
            let v = x.dot(&lw.wv);
            cache
                .keys
                .push_row(k.row(0))
                .map_err(|e| Error::Shape(e.to_string()))?;
            cache
                .values
                .push_row(v.row(0))
                .map_err(|e| Error::Shape(e.to_string()))?;

            let mut keys = cache.keys.clone();
            for (row, &p) in keys
                .axis_iter_mut(Axis(0))
                .zip(state.positions.iter().chain(std::iter::once(&pos)))
            {
                rotate_row(row, p, dh, &freqs, false);
            }
            rotate_row(q.row_mut(0), pos, dh, &freqs, false);

            let mut attn = Array2::zeros((1, cfg.d_model));
            for head in 0..n_heads {
                let cols = head * dh..(head + 1) * dh;
                let mut w: Array1<f64> = keys
                    .slice(s![.., cols.clone()])
                    .dot(&q.slice(s![0, cols.clone()]))
                    * scale;
                let max = w.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                w.mapv_inplace(|x| (x - max).exp());
                let sum = w.sum();
                w /= sum;
                let o = w.dot(&cache.values.slice(s![.., cols.clone()]));
                attn.slice_mut(s![0, cols]).assign(&o);
            }
            h += &attn.dot(&lw.wo);
            lw.ffn_residual(&mut h);
        }
        state.positions.push(pos);
        state.last_hidden = h.row(0).to_owned();
        Ok(())
    }
}
