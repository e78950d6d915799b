//! Tiny pre-norm transformer noise predictor with hand-written gradients.
//!
//! Each block: text-image cross-attention, image self-attention (the K/V tap
//! and injection point), then a GELU feed-forward, all residual. Timestep and
//! position enter as learned embeddings added to every visual token.

use ndarray::{Array1, Array2, Array3, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AttentionRecord, Denoiser, DenoiserRequest, DenoiserResponse};
use crate::attention::{attend, attend_backward};
use crate::cache::{inject_kv, InjectionSlice};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub tokens: usize,
    pub channels: usize,
    pub model_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub text_dim: usize,
    pub layers: usize,
    /// Number of sampling steps `T`; the timestep table has `T + 1` rows.
    pub timesteps: usize,
}

impl ModelDims {
    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.tokens,
            self.channels,
            self.model_dim,
            self.heads,
            self.ffn_dim,
            self.text_dim,
            self.layers,
            self.timesteps,
        ];
        if all.contains(&0) {
            return Err(Error::config(format!("model dimensions must be positive: {self:?}")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Field names of one block, in checkpoint order.
pub const BLOCK_FIELDS: [&str; 20] = [
    "cross_norm_gain",
    "cross_norm_bias",
    "cross_q",
    "cross_k",
    "cross_v",
    "cross_out",
    "cross_out_bias",
    "self_norm_gain",
    "self_norm_bias",
    "self_q",
    "self_k",
    "self_v",
    "self_out",
    "self_out_bias",
    "ffn_norm_gain",
    "ffn_norm_bias",
    "ffn_in",
    "ffn_in_bias",
    "ffn_out",
    "ffn_out_bias",
];

#[derive(Debug, Clone, PartialEq)]
pub struct BlockWeights {
    pub cross_norm_gain: Array2<f64>,
    pub cross_norm_bias: Array2<f64>,
    pub cross_q: Array2<f64>,
    pub cross_k: Array2<f64>,
    pub cross_v: Array2<f64>,
    pub cross_out: Array2<f64>,
    pub cross_out_bias: Array2<f64>,
    pub self_norm_gain: Array2<f64>,
    pub self_norm_bias: Array2<f64>,
    pub self_q: Array2<f64>,
    pub self_k: Array2<f64>,
    pub self_v: Array2<f64>,
    pub self_out: Array2<f64>,
    pub self_out_bias: Array2<f64>,
    pub ffn_norm_gain: Array2<f64>,
    pub ffn_norm_bias: Array2<f64>,
    pub ffn_in: Array2<f64>,
    pub ffn_in_bias: Array2<f64>,
    pub ffn_out: Array2<f64>,
    pub ffn_out_bias: Array2<f64>,
}

impl BlockWeights {
    fn zeros(d: &ModelDims) -> Self {
        let (m, f, e) = (d.model_dim, d.ffn_dim, d.text_dim);
        let z = |r, c| Array2::zeros((r, c));
        Self {
            cross_norm_gain: z(1, m),
            cross_norm_bias: z(1, m),
            cross_q: z(m, m),
            cross_k: z(e, m),
            cross_v: z(e, m),
            cross_out: z(m, m),
            cross_out_bias: z(1, m),
            self_norm_gain: z(1, m),
            self_norm_bias: z(1, m),
            self_q: z(m, m),
            self_k: z(m, m),
            self_v: z(m, m),
            self_out: z(m, m),
            self_out_bias: z(1, m),
            ffn_norm_gain: z(1, m),
            ffn_norm_bias: z(1, m),
            ffn_in: z(m, f),
            ffn_in_bias: z(1, f),
            ffn_out: z(f, m),
            ffn_out_bias: z(1, m),
        }
    }

    pub fn fields(&self) -> [&Array2<f64>; 20] {
        [
            &self.cross_norm_gain,
            &self.cross_norm_bias,
            &self.cross_q,
            &self.cross_k,
            &self.cross_v,
            &self.cross_out,
            &self.cross_out_bias,
            &self.self_norm_gain,
            &self.self_norm_bias,
            &self.self_q,
            &self.self_k,
            &self.self_v,
            &self.self_out,
            &self.self_out_bias,
            &self.ffn_norm_gain,
            &self.ffn_norm_bias,
            &self.ffn_in,
            &self.ffn_in_bias,
            &self.ffn_out,
            &self.ffn_out_bias,
        ]
    }

    pub fn fields_mut(&mut self) -> [&mut Array2<f64>; 20] {
        [
            &mut self.cross_norm_gain,
            &mut self.cross_norm_bias,
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
            &mut self.cross_out,
            &mut self.cross_out_bias,
            &mut self.self_norm_gain,
            &mut self.self_norm_bias,
            &mut self.self_q,
            &mut self.self_k,
            &mut self.self_v,
            &mut self.self_out,
            &mut self.self_out_bias,
            &mut self.ffn_norm_gain,
            &mut self.ffn_norm_bias,
            &mut self.ffn_in,
            &mut self.ffn_in_bias,
            &mut self.ffn_out,
            &mut self.ffn_out_bias,
        ]
    }
}

/// All learned matrices of the toy denoiser. Biases and gains are `[1, k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiserWeights {
    pub dims: ModelDims,
    pub input_proj: Array2<f64>,
    pub input_bias: Array2<f64>,
    pub pos_embed: Array2<f64>,
    pub time_embed: Array2<f64>,
    pub blocks: Vec<BlockWeights>,
    pub final_norm_gain: Array2<f64>,
    pub final_norm_bias: Array2<f64>,
    pub output_proj: Array2<f64>,
    pub output_bias: Array2<f64>,
}

/// Gradients share the weight layout.
pub type WeightGrads = ToyDenoiserWeights;

/// This implementation is itself the denoiser.
pub type ToyDenoiser = ToyDenoiserWeights;

impl ToyDenoiserWeights {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let m = dims.model_dim;
        Ok(Self {
            dims,
            input_proj: Array2::zeros((dims.channels, m)),
            input_bias: Array2::zeros((1, m)),
            pos_embed: Array2::zeros((dims.tokens, m)),
            time_embed: Array2::zeros((dims.timesteps + 1, m)),
            blocks: (0..dims.layers).map(|_| BlockWeights::zeros(&dims)).collect(),
            final_norm_gain: Array2::zeros((1, m)),
            final_norm_bias: Array2::zeros((1, m)),
            output_proj: Array2::zeros((m, dims.channels)),
            output_bias: Array2::zeros((1, dims.channels)),
        })
    }

    /// Random initialisation: scaled normal projections, unit norm gains,
    /// sinusoidal timestep table.
    pub fn init(dims: ModelDims, rng: &mut impl Rng) -> Result<Self> {
        let mut w = Self::zeros(dims)?;
        let mut normal = |a: &mut Array2<f64>, std: f64| {
            let dist = Normal::new(0.0, std).expect("positive std");
            a.mapv_inplace(|_| dist.sample(rng));
        };
        let m = dims.model_dim as f64;
        let e = dims.text_dim as f64;
        let f = dims.ffn_dim as f64;
        normal(&mut w.input_proj, 1.0 / (dims.channels as f64).sqrt());
        normal(&mut w.pos_embed, 0.3);
        for b in &mut w.blocks {
            normal(&mut b.cross_q, 1.0 / m.sqrt());
            normal(&mut b.cross_k, 1.0 / e.sqrt());
            normal(&mut b.cross_v, 1.0 / e.sqrt());
            normal(&mut b.cross_out, 0.5 / m.sqrt());
            normal(&mut b.self_q, 1.0 / m.sqrt());
            normal(&mut b.self_k, 1.0 / m.sqrt());
            normal(&mut b.self_v, 1.0 / m.sqrt());
            normal(&mut b.self_out, 0.5 / m.sqrt());
            normal(&mut b.ffn_in, 1.0 / m.sqrt());
            normal(&mut b.ffn_out, 0.5 / f.sqrt());
            b.cross_norm_gain.fill(1.0);
            b.self_norm_gain.fill(1.0);
            b.ffn_norm_gain.fill(1.0);
        }
        normal(&mut w.output_proj, 1.0 / m.sqrt());
        w.final_norm_gain.fill(1.0);
        let half = dims.model_dim / 2;
        for t in 0..=dims.timesteps {
            let u = t as f64 / dims.timesteps as f64;
            for j in 0..half {
                let freq = std::f64::consts::PI * (1 << j.min(10)) as f64 / 2.0;
                w.time_embed[[t, 2 * j]] = 0.5 * (freq * u).sin();
                w.time_embed[[t, 2 * j + 1]] = 0.5 * (freq * u).cos();
            }
        }
        Ok(w)
    }

    /// `(name, matrix)` pairs in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Array2<f64>)> {
        let mut out = vec![
            ("input_proj".to_string(), &self.input_proj),
            ("input_bias".to_string(), &self.input_bias),
            ("pos_embed".to_string(), &self.pos_embed),
            ("time_embed".to_string(), &self.time_embed),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, m) in BLOCK_FIELDS.iter().zip(b.fields()) {
                out.push((format!("block{l}.{name}"), m));
            }
        }
        out.push(("final_norm_gain".to_string(), &self.final_norm_gain));
        out.push(("final_norm_bias".to_string(), &self.final_norm_bias));
        out.push(("output_proj".to_string(), &self.output_proj));
        out.push(("output_bias".to_string(), &self.output_bias));
        out
    }

    /// Mutable matrices in the same order as [`Self::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        let mut out = vec![
            &mut self.input_proj,
            &mut self.input_bias,
            &mut self.pos_embed,
            &mut self.time_embed,
        ];
        for b in &mut self.blocks {
            out.extend(b.fields_mut());
        }
        out.push(&mut self.final_norm_gain);
        out.push(&mut self.final_norm_bias);
        out.push(&mut self.output_proj);
        out.push(&mut self.output_bias);
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, m)| m.len()).sum()
    }

    /// Shape and finiteness check against `dims`.
    pub fn check(&self) -> Result<()> {
        self.dims.validate()?;
        let reference = Self::zeros(self.dims)?;
        for ((name, got), (_, want)) in self.named_params().iter().zip(reference.named_params()) {
            if got.dim() != want.dim() {
                return Err(Error::config(format!(
                    "{name} has shape {:?}, expected {:?}",
                    got.dim(),
                    want.dim()
                )));
            }
            if !got.iter().all(|v| v.is_finite()) {
                return Err(Error::numeric(format!("{name} contains non-finite values")));
            }
        }
        if self.blocks.len() != self.dims.layers {
            return Err(Error::config("block count differs from the declared layer count"));
        }
        Ok(())
    }

    /// Single-item forward pass. `tape` is filled for training when given;
    /// injection and taping are mutually exclusive.
    pub fn forward_item(
        &self,
        x: ArrayView2<f64>,
        timestep: usize,
        text: &Array2<f64>,
        injection: Option<InjectionSlice<'_>>,
        record: bool,
        tape: Option<&mut ForwardTape>,
    ) -> Result<(Array2<f64>, Vec<AttentionRecord>)> {
        let d = &self.dims;
        if x.dim() != (d.tokens, d.channels) {
            return Err(Error::config(format!(
                "latent item has shape {:?}, model expects ({}, {})",
                x.dim(),
                d.tokens,
                d.channels
            )));
        }
        if text.ncols() != d.text_dim || text.nrows() == 0 {
            return Err(Error::config(format!(
                "prompt embedding has shape {:?}, model expects (>=1, {})",
                text.dim(),
                d.text_dim
            )));
        }
        if timestep > d.timesteps {
            return Err(Error::config(format!(
                "timestep {timestep} exceeds the model's table of {}",
                d.timesteps
            )));
        }
        if injection.is_some() && tape.is_some() {
            return Err(Error::Internal("taped forward does not support injection".into()));
        }
        let heads = d.heads;
        let mut h = x.dot(&self.input_proj) + &self.input_bias + &self.pos_embed;
        h += &self.time_embed.row(timestep);
        let mut records = Vec::new();
        let mut block_tapes = Vec::new();
        let keep = tape.is_some();

        for (l, b) in self.blocks.iter().enumerate() {
            let (a1, ln1) = layer_norm(&h, &b.cross_norm_gain, &b.cross_norm_bias);
            let cq = a1.dot(&b.cross_q);
            let ck = text.dot(&b.cross_k);
            let cv = text.dot(&b.cross_v);
            let (cctx, cprobs) = attend(cq.view(), ck.view(), cv.view(), heads);
            h = h + cctx.dot(&b.cross_out) + &b.cross_out_bias;

            let (a2, ln2) = layer_norm(&h, &b.self_norm_gain, &b.self_norm_bias);
            let sq = a2.dot(&b.self_q);
            let sk = a2.dot(&b.self_k);
            let sv = a2.dot(&b.self_v);
            let entry = match injection {
                Some(inj) => inj.entry_for(l)?,
                None => None,
            };
            let (sctx, sprobs) = match entry {
                Some(e) => {
                    let (k_aug, v_aug) = inject_kv(&sk, &sv, e)?;
                    attend(sq.view(), k_aug.view(), v_aug.view(), heads)
                }
                None => attend(sq.view(), sk.view(), sv.view(), heads),
            };
            h = h + sctx.dot(&b.self_out) + &b.self_out_bias;

            let (a3, ln3) = layer_norm(&h, &b.ffn_norm_gain, &b.ffn_norm_bias);
            let pre = a3.dot(&b.ffn_in) + &b.ffn_in_bias;
            let act = pre.mapv(gelu);
            h = h + act.dot(&b.ffn_out) + &b.ffn_out_bias;

            if record {
                let mut scores = cprobs[0].clone();
                for p in &cprobs[1..] {
                    scores += p;
                }
                scores.mapv_inplace(|v| v / heads as f64);
                records.push(AttentionRecord {
                    layer_index: l,
                    timestep,
                    text_image_scores: scores,
                    self_keys: sk.clone(),
                    self_values: sv.clone(),
                });
            }
            if keep {
                block_tapes.push(BlockTape {
                    ln1,
                    a1,
                    cq,
                    ck,
                    cv,
                    cprobs,
                    cctx,
                    ln2,
                    a2,
                    sq,
                    sk,
                    sv,
                    sprobs,
                    sctx,
                    ln3,
                    a3,
                    pre,
                    act,
                });
            }
        }
        let (af, lnf) = layer_norm(&h, &self.final_norm_gain, &self.final_norm_bias);
        let eps = af.dot(&self.output_proj) + &self.output_bias;
        if let Some(tape) = tape {
            *tape = ForwardTape {
                x: x.to_owned(),
                timestep,
                text: text.clone(),
                blocks: block_tapes,
                lnf,
                af,
            };
        }
        Ok((eps, records))
    }

    /// Accumulates parameter gradients for `d_eps` into `grads` and returns
    /// the gradient with respect to the prompt embedding rows.
    pub fn backward_item(&self, tape: &ForwardTape, d_eps: &Array2<f64>, grads: &mut WeightGrads) -> Array2<f64> {
        grads.output_proj += &tape.af.t().dot(d_eps);
        grads.output_bias += &d_eps.sum_axis(Axis(0)).insert_axis(Axis(0));
        let daf = d_eps.dot(&self.output_proj.t());
        let mut dh = layer_norm_backward(
            &daf,
            &tape.lnf,
            &self.final_norm_gain,
            &mut grads.final_norm_gain,
            &mut grads.final_norm_bias,
        );
        let mut dtext = Array2::zeros(tape.text.raw_dim());

        for (l, (b, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let g = &mut grads.blocks[l];
            // feed-forward
            g.ffn_out += &bt.act.t().dot(&dh);
            g.ffn_out_bias += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dact = dh.dot(&b.ffn_out.t());
            let dpre = &dact * &bt.pre.mapv(gelu_grad);
            g.ffn_in += &bt.a3.t().dot(&dpre);
            g.ffn_in_bias += &dpre.sum_axis(Axis(0)).insert_axis(Axis(0));
            let da3 = dpre.dot(&b.ffn_in.t());
            dh += &layer_norm_backward(&da3, &bt.ln3, &b.ffn_norm_gain, &mut g.ffn_norm_gain, &mut g.ffn_norm_bias);

            // self-attention
            g.self_out += &bt.sctx.t().dot(&dh);
            g.self_out_bias += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dsctx = dh.dot(&b.self_out.t());
            let (dq, dk, dv) = attend_backward(bt.sq.view(), bt.sk.view(), bt.sv.view(), &bt.sprobs, dsctx.view());
            g.self_q += &bt.a2.t().dot(&dq);
            g.self_k += &bt.a2.t().dot(&dk);
            g.self_v += &bt.a2.t().dot(&dv);
            let da2 = dq.dot(&b.self_q.t()) + dk.dot(&b.self_k.t()) + dv.dot(&b.self_v.t());
            dh += &layer_norm_backward(&da2, &bt.ln2, &b.self_norm_gain, &mut g.self_norm_gain, &mut g.self_norm_bias);

            // cross-attention
            g.cross_out += &bt.cctx.t().dot(&dh);
            g.cross_out_bias += &dh.sum_axis(Axis(0)).insert_axis(Axis(0));
            let dcctx = dh.dot(&b.cross_out.t());
            let (dq, dk, dv) = attend_backward(bt.cq.view(), bt.ck.view(), bt.cv.view(), &bt.cprobs, dcctx.view());
            g.cross_q += &bt.a1.t().dot(&dq);
            g.cross_k += &tape.text.t().dot(&dk);
            g.cross_v += &tape.text.t().dot(&dv);
            dtext += &(dk.dot(&b.cross_k.t()) + dv.dot(&b.cross_v.t()));
            let da1 = dq.dot(&b.cross_q.t());
            dh += &layer_norm_backward(&da1, &bt.ln1, &b.cross_norm_gain, &mut g.cross_norm_gain, &mut g.cross_norm_bias);
        }

        grads.input_proj += &tape.x.t().dot(&dh);
        let col = dh.sum_axis(Axis(0));
        grads.input_bias += &col.view().insert_axis(Axis(0));
        grads.pos_embed += &dh;
        let mut row = grads.time_embed.row_mut(tape.timestep);
        row += &col;
        dtext
    }
}

impl Denoiser for ToyDenoiserWeights {
    fn predict(&self, req: &DenoiserRequest<'_>) -> Result<DenoiserResponse> {
        let data = &req.latent.data;
        let (batch, n, c) = data.dim();
        if req.prompt.token_count() == 0 {
            return Err(Error::config("prompt embedding has no tokens"));
        }
        let mut eps = Array3::zeros((batch, n, c));
        let mut all_records = req.record_attention.then(Vec::new);
        for b in 0..batch {
            let (e, records) = self.forward_item(
                data.index_axis(Axis(0), b),
                req.latent.timestep,
                &req.prompt.matrix,
                req.injection,
                req.record_attention,
                None,
            )?;
            eps.index_axis_mut(Axis(0), b).assign(&e);
            if let Some(all) = all_records.as_mut() {
                all.push(records);
            }
        }
        Ok(DenoiserResponse {
            eps,
            attention_records: all_records,
        })
    }

    fn layer_count(&self) -> usize {
        self.dims.layers
    }
}

/// Intermediates of one taped forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardTape {
    x: Array2<f64>,
    timestep: usize,
    text: Array2<f64>,
    blocks: Vec<BlockTape>,
    lnf: NormTape,
    af: Array2<f64>,
}

#[derive(Debug, Clone)]
struct BlockTape {
    ln1: NormTape,
    a1: Array2<f64>,
    cq: Array2<f64>,
    ck: Array2<f64>,
    cv: Array2<f64>,
    cprobs: Vec<Array2<f64>>,
    cctx: Array2<f64>,
    ln2: NormTape,
    a2: Array2<f64>,
    sq: Array2<f64>,
    sk: Array2<f64>,
    sv: Array2<f64>,
    sprobs: Vec<Array2<f64>>,
    sctx: Array2<f64>,
    ln3: NormTape,
    a3: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

#[derive(Debug, Clone, Default)]
struct NormTape {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

fn layer_norm(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, NormTape) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let centered = x - &mean.view().insert_axis(Axis(1));
    let var = centered.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    let xhat = &centered * &inv_std.view().insert_axis(Axis(1));
    let out = &xhat * gain + bias;
    (out, NormTape { xhat, inv_std })
}

fn layer_norm_backward(
    dy: &Array2<f64>,
    tape: &NormTape,
    gain: &Array2<f64>,
    dgain: &mut Array2<f64>,
    dbias: &mut Array2<f64>,
) -> Array2<f64> {
    *dgain += &(dy * &tape.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    *dbias += &dy.sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * gain;
    let d = dy.ncols() as f64;
    let mean_dxhat = dxhat.sum_axis(Axis(1)) / d;
    let mean_dxhat_xhat = (&dxhat * &tape.xhat).sum_axis(Axis(1)) / d;
    let mut dx = &dxhat - &mean_dxhat.insert_axis(Axis(1));
    dx -= &(&tape.xhat * &mean_dxhat_xhat.insert_axis(Axis(1)));
    dx * tape.inv_std.view().insert_axis(Axis(1))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}
