//! The FlatFormer network and its ablation variants.

pub mod config;
pub mod masks;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{LagNorm, ModelConfig, NormPlacement, Variant};
pub use masks::{causal_mask, forgetting_basis, forgetting_bias, normalized_lag, BiasMasks};

use crate::error::{config_err, data_err, Result};
use crate::features::Batch;
use crate::numerics::{BoundParams, Graph, ParamStore, Tensor, Var};
use crate::Scalar;

/// `PE(τ, 2k) = sin(τ / 10000^{2k/d})`, `PE(τ, 2k+1) = cos(τ / 10000^{2k/d})`.
pub fn sinusoidal_pe(tau: usize, d: usize) -> Vec<f64> {
    (0..d)
        .map(|i| {
            let k = (i / 2) as f64;
            let angle = tau as f64 / 10000f64.powf(2.0 * k / d as f64);
            if i % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

/// Fixed zero-mean direction carrying the backbone's time-lag channel,
/// scaled like a freshly initialized embedding row. Zero mean keeps it from
/// being erased by the first layer norm.
pub fn time_channel_direction(d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|i| if i % 2 == 0 { scale } else { -scale }).collect()
}

/// Initial per-head rates: `0.0125·2^i`, capped at 0.4.
pub fn rate_ladder(heads: usize) -> Vec<f64> {
    (0..heads).map(|i| (0.0125 * 2f64.powi(i as i32)).min(0.4)).collect()
}

/// FNV-1a, stable across platforms and releases.
fn name_hash(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zeros,
    Ones,
    Rates,
}

/// Names, shapes and initializers of every learnable tensor, in store order.
pub fn parameter_layout(config: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let d = config.d_model;
    let mut out = vec![
        ("embed.exercise".to_string(), vec![config.vocab_size + 1, d], Init::Normal),
        ("embed.answer".to_string(), vec![3, d], Init::Normal),
    ];
    if config.variant.uses_sessions() {
        out.push(("embed.session".into(), vec![config.max_sessions, d], Init::Normal));
    } else {
        out.push(("embed.position".into(), vec![config.max_len, d], Init::Normal));
    }
    if config.learns_rates() {
        out.push(("forget.rates".into(), vec![config.heads], Init::Rates));
    }
    for l in 0..config.layers {
        let p = |s: &str| format!("block{l}.{s}");
        out.extend([
            (p("ln1.gain"), vec![d], Init::Ones),
            (p("ln1.bias"), vec![d], Init::Zeros),
            (p("attn.wq"), vec![d, d], Init::Normal),
            (p("attn.wk"), vec![d, d], Init::Normal),
            (p("attn.wv"), vec![d, d], Init::Normal),
            (p("attn.wo"), vec![d, d], Init::Normal),
            (p("ln2.gain"), vec![d], Init::Ones),
            (p("ln2.bias"), vec![d], Init::Zeros),
            (p("ffn.w1"), vec![d, config.d_ff], Init::Normal),
            (p("ffn.b1"), vec![config.d_ff], Init::Zeros),
            (p("ffn.w2"), vec![config.d_ff, d], Init::Normal),
            (p("ffn.b2"), vec![d], Init::Zeros),
        ]);
    }
    let hd = config.head_hidden();
    out.extend([
        ("final_ln.gain".to_string(), vec![d], Init::Ones),
        ("final_ln.bias".to_string(), vec![d], Init::Zeros),
        ("head.w1".to_string(), vec![d, hd], Init::Normal),
        ("head.b1".to_string(), vec![hd], Init::Zeros),
        ("head.w2".to_string(), vec![hd, 1], Init::Normal),
        ("head.b2".to_string(), vec![1], Init::Zeros),
    ]);
    out
}

/// Output of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Probabilities `[B, L]`.
    pub probs: Var,
    /// Attention weights per layer, `[B, h, L, L]`.
    pub attention: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct FlatFormer<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
}

/// Build a freshly initialized model of the configured variant.
pub fn build_variant<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<FlatFormer<T>> {
    FlatFormer::new(config.clone(), seed)
}

impl<T: Scalar> FlatFormer<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in parameter_layout(&config) {
            let value = match init {
                Init::Normal => {
                    // Seeded per name, so variants sharing a tensor start equal.
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ name_hash(&name));
                    Tensor::truncated_normal(&shape, config.init_std, &mut rng)
                }
                Init::Zeros => Tensor::zeros(&shape),
                Init::Ones => Tensor::ones(&shape),
                Init::Rates => Tensor::from_f64(&shape, &rate_ladder(config.heads))?,
            };
            params.insert(name, value)?;
        }
        // Padding row of the exercise table.
        let d = config.d_model;
        params.get_mut("embed.exercise").unwrap().data_mut()[..d].fill(T::zero());
        Ok(FlatFormer { config, params })
    }

    /// Wrap existing parameters, checking them against the layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(config_err!(
                "checkpoint has {} tensors, the {} layout needs {}",
                params.len(),
                config.variant,
                layout.len()
            ));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(config_err!("parameter {name}: shape {:?}, expected {shape:?}", t.shape())),
                None => return Err(config_err!("parameter {name} missing")),
            }
        }
        Ok(FlatFormer { config, params })
    }

    pub fn masks(&self, batch: &Batch) -> Result<BiasMasks<T>> {
        BiasMasks::build(&self.config, batch)
    }

    /// `X⁰` for a batch: content + answer + (session + step) or position,
    /// plus the time-lag channel for the backbone. Dropout is applied after
    /// the sum.
    pub fn embed_input(&self, g: &mut Graph<T>, p: &BoundParams, batch: &Batch, masks: &BiasMasks<T>) -> Result<Var> {
        let c = &self.config;
        let (bsz, len, d) = (batch.size, batch.len, c.d_model);
        let shape = [bsz, len];
        let content = g.embedding(p.var("embed.exercise"), &batch.exercises, &shape)?;
        let answers = g.embedding(p.var("embed.answer"), &batch.prev_answers, &shape)?;
        let mut x = g.add(content, answers)?;

        let mut fixed: Option<Vec<T>> = None;
        if c.variant.uses_sessions() {
            let rows: Vec<usize> = batch.session_ids.iter().map(|s| s % c.max_sessions).collect();
            let sess = g.embedding(p.var("embed.session"), &rows, &shape)?;
            x = g.add(x, sess)?;
            let mut pe = Vec::with_capacity(bsz * len * d);
            for &tau in &batch.session_steps {
                pe.extend(sinusoidal_pe(tau, d).into_iter().map(T::of));
            }
            fixed = Some(pe);
        } else {
            if len > c.max_len {
                return Err(data_err!("window of {len} steps exceeds the positional table of {}", c.max_len));
            }
            let rows: Vec<usize> = (0..bsz).flat_map(|_| 0..len).collect();
            let pos = g.embedding(p.var("embed.position"), &rows, &shape)?;
            x = g.add(x, pos)?;
        }
        if let Some(lags) = &masks.step_lags {
            let dir = time_channel_direction(d, c.init_std);
            let v: Vec<T> = lags
                .iter()
                .flat_map(|&f| dir.iter().map(move |&u| T::of(f * u)))
                .collect();
            fixed = Some(v);
        }
        if let Some(v) = fixed {
            let k = g.constant(Tensor::new(&[bsz, len, d], v)?);
            x = g.add(x, k)?;
        }
        g.dropout(x, c.dropout)
    }

    /// Multi-head self-attention with the pre-computed biases injected into
    /// the logits. Returns the projected output and the attention weights.
    pub fn injected_mhsa(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        masks: &BiasMasks<T>,
        layer: usize,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let w = |s: &str| p.var(&format!("block{layer}.attn.{s}"));
        let q = g.linear(x, w("wq"))?;
        let k = g.linear(x, w("wk"))?;
        let v = g.linear(x, w("wv"))?;
        let q = g.split_heads(q, c.heads)?;
        let k = g.split_heads(k, c.heads)?;
        let v = g.split_heads(v, c.heads)?;
        let scale = T::of(1.0 / (c.head_dim() as f64).sqrt());
        let mut logits = g.bmm(q, k, true, scale)?;
        logits = g.add_attention_bias(logits, &masks.combined)?;
        if let (Some(basis), Some(rates)) = (&masks.basis, p.try_var("forget.rates")) {
            logits = g.add_head_scaled_bias(logits, rates, basis)?;
        }
        let attn = g.softmax_lastdim(logits);
        let ctx = g.bmm(attn, v, false, T::one())?;
        let merged = g.merge_heads(ctx)?;
        let out = g.linear(merged, w("wo"))?;
        Ok((out, attn))
    }

    fn ffn(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, layer: usize) -> Result<Var> {
        let w = |s: &str| p.var(&format!("block{layer}.ffn.{s}"));
        let h = g.linear(x, w("w1"))?;
        let h = g.add_bias(h, w("b1"))?;
        let h = g.relu(h);
        let h = g.linear(h, w("w2"))?;
        g.add_bias(h, w("b2"))
    }

    fn layernorm(&self, g: &mut Graph<T>, p: &BoundParams, x: Var, prefix: &str) -> Result<Var> {
        g.layernorm(x, p.var(&format!("{prefix}.gain")), p.var(&format!("{prefix}.bias")))
    }

    pub fn encoder_block(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        x: Var,
        masks: &BiasMasks<T>,
        layer: usize,
    ) -> Result<(Var, Var)> {
        let c = &self.config;
        let ln1 = format!("block{layer}.ln1");
        let ln2 = format!("block{layer}.ln2");
        let h = match c.norm {
            NormPlacement::PreAttention => {
                let xn = self.layernorm(g, p, x, &ln1)?;
                let (a, attn) = self.injected_mhsa(g, p, xn, masks, layer)?;
                let a = g.dropout(a, c.dropout)?;
                (g.add(x, a)?, attn)
            }
            NormPlacement::Post => {
                let (a, attn) = self.injected_mhsa(g, p, x, masks, layer)?;
                let a = g.dropout(a, c.dropout)?;
                let s = g.add(x, a)?;
                (self.layernorm(g, p, s, &ln1)?, attn)
            }
        };
        let (h, attn) = h;
        let f = self.ffn(g, p, h, layer)?;
        let f = g.dropout(f, c.dropout)?;
        let s = g.add(h, f)?;
        Ok((self.layernorm(g, p, s, &ln2)?, attn))
    }

    /// Final layer norm, two-layer MLP and sigmoid: `[B, L, d] -> [B, L]`.
    pub fn predict(&self, g: &mut Graph<T>, p: &BoundParams, x: Var) -> Result<Var> {
        let s = g.shape(x).to_vec();
        let x = self.layernorm(g, p, x, "final_ln")?;
        let h = g.linear(x, p.var("head.w1"))?;
        let h = g.add_bias(h, p.var("head.b1"))?;
        let h = g.relu(h);
        let o = g.linear(h, p.var("head.w2"))?;
        let o = g.add_bias(o, p.var("head.b2"))?;
        let o = g.sigmoid(o);
        g.reshape(o, &s[..2])
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &BoundParams, batch: &Batch, masks: &BiasMasks<T>) -> Result<Forward> {
        if masks.batch != batch.size || masks.len != batch.len {
            return Err(config_err!("masks were built for a different batch"));
        }
        let mut x = self.embed_input(g, p, batch, masks)?;
        let mut attention = Vec::with_capacity(self.config.layers);
        for l in 0..self.config.layers {
            let (next, attn) = self.encoder_block(g, p, x, masks, l)?;
            x = next;
            attention.push(attn);
        }
        let probs = self.predict(g, p, x)?;
        Ok(Forward { probs, attention })
    }

    /// Mean BCE over the batch's loss mask.
    pub fn loss(&self, g: &mut Graph<T>, fwd: &Forward, batch: &Batch) -> Result<Var> {
        let targets: Vec<T> = batch.targets.iter().map(|&a| T::of(a as f64)).collect();
        let mask: Vec<T> = batch.loss_mask.iter().map(|&m| T::of(m as f64)).collect();
        let (sum, n) = g.bce(fwd.probs, &targets, &mask)?;
        Ok(g.scale(sum, T::of(1.0 / n as f64)))
    }

    /// Evaluation-mode probabilities `[B·L]`, row-major.
    pub fn predict_batch(&self, batch: &Batch) -> Result<Vec<T>> {
        let masks = self.masks(batch)?;
        self.predict_with_masks(batch, &masks)
    }

    /// As [`FlatFormer::predict_batch`] with masks built by the caller.
    pub fn predict_with_masks(&self, batch: &Batch, masks: &BiasMasks<T>) -> Result<Vec<T>> {
        let mut g = Graph::eval();
        let p = self.params.bind(&mut g);
        let fwd = self.forward(&mut g, &p, batch, masks)?;
        Ok(g.value(fwd.probs).data().to_vec())
    }

    /// Evaluation-mode attention weights per layer, `[B, h, L, L]` each.
    pub fn attention_maps(&self, batch: &Batch) -> Result<Vec<Tensor<T>>> {
        let masks = self.masks(batch)?;
        let mut g = Graph::eval();
        let p = self.params.bind(&mut g);
        let fwd = self.forward(&mut g, &p, batch, &masks)?;
        Ok(fwd.attention.iter().map(|&a| g.value(a).clone()).collect())
    }

    /// Per-head forgetting rates actually in use.
    pub fn rates(&self) -> Vec<f64> {
        match self.params.get("forget.rates") {
            Some(r) => r.to_f64_vec(),
            None => vec![self.config.effective_beta(); self.config.heads],
        }
    }

    pub fn num_params(&self) -> usize {
        self.params.numel()
    }
}
