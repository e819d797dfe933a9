use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{ModelConfig, ModelParams};
use crate::error::{Error, Result};
use crate::seq::Vocabulary;

pub const CHECKPOINT_FORMAT: &str = "medlab-checkpoint-v1";

/// JSON container: vocabulary, architecture and flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format: String,
    pub vocab: Vocabulary,
    pub model: ModelConfig,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(vocab: &Vocabulary, params: &ModelParams) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            vocab: vocab.clone(),
            model: params.config,
            params: params.data.clone(),
        }
    }

    pub fn into_parts(self) -> Result<(Vocabulary, ModelParams)> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!("unsupported checkpoint format {:?}", self.format)));
        }
        self.vocab.validate()?;
        if self.vocab.size != self.model.vocab_size {
            return Err(Error::Config("checkpoint vocabulary and model disagree on size".into()));
        }
        let params = ModelParams::from_flat(self.model, self.params)?;
        Ok((self.vocab, params))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::model::InitOptions;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn json_roundtrip_is_bit_exact() {
        let vocab = Vocabulary::standard();
        let cfg = ModelConfig { vocab_size: vocab.size, d_model: 8, n_layers: 1, n_heads: 2, d_ff: 8, max_len: 8 };
        let p = ModelParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(5), InitOptions::default()).unwrap();
        let dir = std::env::temp_dir().join(format!("medlab-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.json");
        Checkpoint::new(&vocab, &p).save(&path).unwrap();
        let (v2, p2) = Checkpoint::load(&path).unwrap().into_parts().unwrap();
        assert_eq!(v2, vocab);
        assert_eq!(p2, p);
        std::fs::remove_dir_all(dir).ok();
    }
}
