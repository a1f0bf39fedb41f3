//! Desk-scale pre-norm decoder stack: configuration, per-layer weights, and
//! seeded synthetic construction.
//!
//! Weight matrices are stored `D_out x D_in` so a projection of a token
//! batch `X` (rows = tokens) is `X W^T`. Attention uses grouped-query
//! layout: `heads` query heads sharing `kv_groups` key/value heads.

use crate::error::{Error, Result};
use crate::mat::Mat;
use crate::rng::{gaussian_vec, seeded_rng, STREAM_MODEL};

/// RMSNorm epsilon used by every normalization in the stack. The forward
/// rotation algebra is exact for any value because the normalizer depends
/// only on the (rotation-invariant) activation norm.
pub const RMSNORM_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Hidden size.
    pub d: usize,
    /// Decoder layer count.
    pub layers: usize,
    /// Query head count.
    pub heads: usize,
    /// Key/value group count (GQA); divides `heads`.
    pub kv_groups: usize,
    /// Intermediate-to-hidden ratio; intermediate size is `round(m * d)`.
    pub m_ratio: f64,
    /// Vocabulary size.
    pub vocab: usize,
    /// Seed for synthetic construction.
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: d = 64, 4 heads in 2 KV groups, ratio 2.6875,
    /// 4 layers, vocabulary 256.
    pub fn desk_scale(seed: u64) -> Self {
        ModelConfig {
            d: 64,
            layers: 4,
            heads: 4,
            kv_groups: 2,
            m_ratio: 2.6875,
            vocab: 256,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.layers == 0 || self.heads == 0 || self.kv_groups == 0 || self.vocab == 0 {
            return Err(Error::arg("ModelConfig", "all dimensions must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::arg(
                "ModelConfig",
                format!("hidden size {} not divisible by {} heads", self.d, self.heads),
            ));
        }
        if !self.heads.is_multiple_of(self.kv_groups) {
            return Err(Error::arg(
                "ModelConfig",
                format!("{} heads not divisible by {} kv groups", self.heads, self.kv_groups),
            ));
        }
        if !self.m_ratio.is_finite() || self.m_ratio <= 0.0 || self.d_ff() == 0 {
            return Err(Error::arg("ModelConfig", "intermediate ratio must be positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.heads
    }

    /// Key/value width: `kv_groups * head_dim`.
    pub fn d_kv(&self) -> usize {
        self.kv_groups * self.head_dim()
    }

    /// Intermediate (MLP) width: `round(m * d)`.
    pub fn d_ff(&self) -> usize {
        (self.m_ratio * self.d as f64).round() as usize
    }
}

/// The seven projection matrices and two normalization gains of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Mat,
    pub wk: Mat,
    pub wv: Mat,
    pub wo: Mat,
    pub wup: Mat,
    pub wgate: Mat,
    pub wdown: Mat,
    pub attn_norm_gain: Vec<f64>,
    pub mlp_norm_gain: Vec<f64>,
}

impl LayerWeights {
    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d;
        let checks = [
            ("wq", &self.wq, d, d),
            ("wk", &self.wk, config.d_kv(), d),
            ("wv", &self.wv, config.d_kv(), d),
            ("wo", &self.wo, d, d),
            ("wup", &self.wup, config.d_ff(), d),
            ("wgate", &self.wgate, config.d_ff(), d),
            ("wdown", &self.wdown, d, config.d_ff()),
        ];
        for (name, m, rows, cols) in checks {
            if m.rows() != rows || m.cols() != cols {
                return Err(Error::dim(
                    "LayerWeights",
                    format!("{name} {rows}x{cols}"),
                    format!("{}x{}", m.rows(), m.cols()),
                ));
            }
        }
        if self.attn_norm_gain.len() != d || self.mlp_norm_gain.len() != d {
            return Err(Error::dim("LayerWeights", format!("gains of {d}"), self.attn_norm_gain.len()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    /// Token embedding, `vocab x d` (row per token).
    pub embed: Mat,
    pub layers: Vec<LayerWeights>,
    pub final_norm_gain: Vec<f64>,
    /// Output head, `vocab x d`.
    pub head: Mat,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        if self.layers.len() != self.config.layers {
            return Err(Error::dim("Model", self.config.layers, self.layers.len()));
        }
        for lw in &self.layers {
            lw.validate(&self.config)?;
        }
        let (v, d) = (self.config.vocab, self.config.d);
        if self.embed.rows() != v || self.embed.cols() != d {
            return Err(Error::dim("Model", format!("embed {v}x{d}"), format!("{}x{}", self.embed.rows(), self.embed.cols())));
        }
        if self.head.rows() != v || self.head.cols() != d {
            return Err(Error::dim("Model", format!("head {v}x{d}"), format!("{}x{}", self.head.rows(), self.head.cols())));
        }
        if self.final_norm_gain.len() != d {
            return Err(Error::dim("Model", d, self.final_norm_gain.len()));
        }
        Ok(())
    }

    /// Rewrites all gains to exactly 1.0 (for fixtures exercising the
    /// bit-for-bit identity-merge contract).
    pub fn with_unit_gains(mut self) -> Model {
        for lw in &mut self.layers {
            lw.attn_norm_gain = vec![1.0; self.config.d];
            lw.mlp_norm_gain = vec![1.0; self.config.d];
        }
        self.final_norm_gain = vec![1.0; self.config.d];
        self
    }
}

/// Builds a synthetic model from the config seed.
///
/// All weight matrices draw i.i.d. N(0, 1/d) entries (standard deviation
/// `1/sqrt(d)`) from the ChaCha8 model stream; norm gains draw 1 + 0.1 z so
/// the gain-folding path is exercised by default. Identical seeds produce
/// bit-identical models on every platform.
pub fn synth_model(config: &ModelConfig) -> Result<Model> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed, STREAM_MODEL);
    let std = 1.0 / (config.d as f64).sqrt();
    let d = config.d;
    let d_kv = config.d_kv();
    let d_ff = config.d_ff();

    fn mat(rng: &mut rand_chacha::ChaCha8Rng, std: f64, rows: usize, cols: usize) -> Mat {
        Mat::from_data(rows, cols, crate::mat::Layout::RowMajor, gaussian_vec(rng, rows * cols, std))
            .expect("sized data")
    }

    let embed = mat(&mut rng, std, config.vocab, d);
    let mut layers = Vec::with_capacity(config.layers);
    for _ in 0..config.layers {
        let wq = mat(&mut rng, std, d, d);
        let wk = mat(&mut rng, std, d_kv, d);
        let wv = mat(&mut rng, std, d_kv, d);
        let wo = mat(&mut rng, std, d, d);
        let wup = mat(&mut rng, std, d_ff, d);
        let wgate = mat(&mut rng, std, d_ff, d);
        let wdown = mat(&mut rng, std, d, d_ff);
        let attn_norm_gain: Vec<f64> = gaussian_vec(&mut rng, d, 0.1).iter().map(|z| 1.0 + z).collect();
        let mlp_norm_gain: Vec<f64> = gaussian_vec(&mut rng, d, 0.1).iter().map(|z| 1.0 + z).collect();
        layers.push(LayerWeights {
            wq,
            wk,
            wv,
            wo,
            wup,
            wgate,
            wdown,
            attn_norm_gain,
            mlp_norm_gain,
        });
    }
    let final_norm_gain: Vec<f64> = gaussian_vec(&mut rng, d, 0.1).iter().map(|z| 1.0 + z).collect();
    let head = mat(&mut rng, std, config.vocab, d);

    Ok(Model {
        config: *config,
        embed,
        layers,
        final_norm_gain,
        head,
    })
}
