use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters of the bidirectional denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self { vocab_size: 22, d_model: 48, n_layers: 2, n_heads: 4, d_ff: 96, max_len: 64 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config(format!("degenerate model config {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len == 0 {
            return Err(Error::Config("max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

/// Location of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn mat<'a>(&self, data: &'a [f64]) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.rows, self.cols), &data[self.range()]).unwrap()
    }

    pub fn mat_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut2<'a, f64> {
        ArrayViewMut2::from_shape((self.rows, self.cols), &mut data[self.range()]).unwrap()
    }

    pub fn vec<'a>(&self, data: &'a [f64]) -> ArrayView1<'a, f64> {
        ArrayView1::from(&data[self.range()])
    }

    pub fn vec_mut<'a>(&self, data: &'a mut [f64]) -> ArrayViewMut1<'a, f64> {
        ArrayViewMut1::from(&mut data[self.range()])
    }
}

#[derive(Debug, Clone)]
pub struct LayerSlots {
    pub ln1_g: Slot,
    pub ln1_b: Slot,
    pub wq: Slot,
    pub wk: Slot,
    pub wv: Slot,
    pub wo: Slot,
    pub ln2_g: Slot,
    pub ln2_b: Slot,
    pub w1: Slot,
    pub b1: Slot,
    pub w2: Slot,
    pub b2: Slot,
}

#[derive(Debug, Clone)]
pub struct Layout {
    pub tok_emb: Slot,
    pub pos_emb: Slot,
    pub layers: Vec<LayerSlots>,
    pub lnf_g: Slot,
    pub lnf_b: Slot,
    pub w_out: Slot,
    pub b_out: Slot,
    pub total: usize,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let mut offset = 0;
        let mut slot = |rows: usize, cols: usize| {
            let s = Slot { offset, rows, cols };
            offset += rows * cols;
            s
        };
        let (d, ff, v) = (cfg.d_model, cfg.d_ff, cfg.vocab_size);
        let tok_emb = slot(v, d);
        let pos_emb = slot(cfg.max_len, d);
        let layers = (0..cfg.n_layers)
            .map(|_| LayerSlots {
                ln1_g: slot(1, d),
                ln1_b: slot(1, d),
                wq: slot(d, d),
                wk: slot(d, d),
                wv: slot(d, d),
                wo: slot(d, d),
                ln2_g: slot(1, d),
                ln2_b: slot(1, d),
                w1: slot(d, ff),
                b1: slot(1, ff),
                w2: slot(ff, d),
                b2: slot(1, d),
            })
            .collect();
        let lnf_g = slot(1, d);
        let lnf_b = slot(1, d);
        let w_out = slot(d, v);
        let b_out = slot(1, v);
        Self { tok_emb, pos_emb, layers, lnf_g, lnf_b, w_out, b_out, total: offset }
    }
}

/// Initialisation choices for [`ModelParams::init`].
#[derive(Debug, Clone, Copy, Default)]
pub struct InitOptions {
    /// Zero the output projection and bias so every position predicts uniformly.
    pub zero_output: bool,
    /// Zero the positional table, making the network permutation-equivariant.
    pub zero_positions: bool,
}

/// Parameters of the denoiser, stored as one flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub data: Vec<f64>,
}

impl ModelParams {
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R, opts: InitOptions) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![0.0; layout.total];
        let mut fill = |s: Slot, std: f64, data: &mut [f64]| {
            for x in &mut data[s.range()] {
                *x = std * rng.sample::<f64, _>(StandardNormal);
            }
        };
        let d = config.d_model as f64;
        fill(layout.tok_emb, 1.0, &mut data);
        if !opts.zero_positions {
            fill(layout.pos_emb, 1.0, &mut data);
        }
        for l in &layout.layers {
            for w in [l.wq, l.wk, l.wv, l.wo, l.w1] {
                fill(w, 1.0 / d.sqrt(), &mut data);
            }
            fill(l.w2, 1.0 / (config.d_ff as f64).sqrt(), &mut data);
            for g in [l.ln1_g, l.ln2_g] {
                data[g.range()].fill(1.0);
            }
        }
        data[layout.lnf_g.range()].fill(1.0);
        if !opts.zero_output {
            fill(layout.w_out, 1.0 / d.sqrt(), &mut data);
        }
        Ok(Self { config, data })
    }

    pub fn from_flat(config: ModelConfig, data: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let expected = Layout::new(&config).total;
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, layout needs {expected}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("parameter {i} is not finite")));
        }
        Ok(Self { config, data })
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.config)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn layout_accounts_for_every_component() {
        let cfg = ModelConfig { vocab_size: 12, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 16, max_len: 16 };
        let l = Layout::new(&cfg);
        let per_layer = 4 * 8 + 4 * 64 + 8 * 16 + 16 + 16 * 8 + 8;
        assert_eq!(l.total, 12 * 8 + 16 * 8 + per_layer + 2 * 8 + 8 * 12 + 12);
        let p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(0), InitOptions::default()).unwrap();
        assert_eq!(p.len(), l.total);
        assert!(p.data.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_bad_heads() {
        let cfg = ModelConfig { d_model: 10, n_heads: 4, ..Default::default() };
        assert!(cfg.validate().is_err());
    }
}
