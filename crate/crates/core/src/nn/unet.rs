//! Two-level 2D encoder-decoder with per-stage embedding injection.
//!
//! ```text
//! x ─ conv_in ─ conv_a ──────────────────────────────── concat ─ conv_u2 ─ conv_out
//!                  └ pool ─ conv_down ──────── add ─ conv_u1 ─ up ┘
//!                              └ pool ─ conv_mid ─ up ┘
//! ```
//!
//! Every conv except `conv_out` is modulated by the embedding and followed by
//! a SiLU. The embedding itself is `silu(fc2(silu(fc1(features))))`; it either
//! adds a per-channel bias or, in scale-shift mode, maps the conv output `z`
//! to `z * (1 + gamma) + beta` per channel.

use serde::{Deserialize, Serialize};

use super::layers::{
    add_channel_bias, avg_pool2, avg_pool2_backward, channel_sums, silu_backward, silu_forward, upsample2,
    upsample2_backward, Conv3x3, Linear,
};
use super::{ParamRef, ParamStore, Scalar};
use crate::error::{Error, Result};

/// How the embedding enters each conv stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingMode {
    /// Per-channel bias.
    #[default]
    Add,
    /// Per-channel scale and bias.
    ScaleShift,
}

impl EmbeddingMode {
    fn width(self) -> usize {
        match self {
            EmbeddingMode::Add => 1,
            EmbeddingMode::ScaleShift => 2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channel width at full resolution; the coarser levels use twice this.
    pub base_width: usize,
    /// Size of the sinusoidal features and of the embedding MLP.
    pub embed_dim: usize,
    #[serde(default)]
    pub embedding: EmbeddingMode,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return Err(Error::arg(format!("degenerate backbone config {self:?}")));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return Err(Error::arg(format!("embed_dim must be even, got {}", self.embed_dim)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvSlots {
    conv: Conv3x3,
    weight: ParamRef,
    bias: ParamRef,
    /// Embedding projection `(k * cout, embed_dim)` with `k` from the
    /// embedding mode, absent on the output conv.
    emb: Option<ParamRef>,
}

#[derive(Debug, Clone, Copy)]
struct Slots {
    fc1_w: ParamRef,
    fc1_b: ParamRef,
    fc2_w: ParamRef,
    fc2_b: ParamRef,
    conv_in: ConvSlots,
    conv_a: ConvSlots,
    conv_down: ConvSlots,
    conv_mid: ConvSlots,
    conv_u1: ConvSlots,
    conv_u2: ConvSlots,
    conv_out: ConvSlots,
}

/// Network parameters plus the layout that interprets them.
#[derive(Debug, Clone)]
pub struct Backbone<S> {
    config: BackboneConfig,
    params: ParamStore<S>,
    slots: Slots,
}

/// Intermediate activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    h: usize,
    w: usize,
    input: Vec<S>,
    features: Vec<S>,
    a1: Vec<S>,
    eh: Vec<S>,
    emb: Vec<S>,
    e_act: Vec<S>,
    /// Conv outputs before scale-shift modulation (empty in additive mode).
    pre: [Vec<S>; 6],
    z0: Vec<S>,
    h0: Vec<S>,
    z1: Vec<S>,
    q1: Vec<S>,
    z2: Vec<S>,
    q2: Vec<S>,
    z3: Vec<S>,
    u1: Vec<S>,
    z4: Vec<S>,
    u2: Vec<S>,
    z5: Vec<S>,
    h5: Vec<S>,
    pub output: Vec<S>,
}

fn pair_mut<S>(grads: &mut [S], first: ParamRef, second: ParamRef) -> (&mut [S], &mut [S]) {
    assert_eq!(second.offset, first.offset + first.len, "parameters are not adjacent");
    grads[first.offset..second.offset + second.len].split_at_mut(first.len)
}

impl<S: Scalar> Backbone<S> {
    /// Allocates a zero-initialized network.
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut p = ParamStore::new();
        let d = config.embed_dim;
        let k = config.embedding.width();
        let (c0, c1) = (config.base_width, 2 * config.base_width);
        let fc1_w = p.add("emb.fc1.weight", &[d, d], d);
        let fc1_b = p.add("emb.fc1.bias", &[d], 0);
        let fc2_w = p.add("emb.fc2.weight", &[d, d], d);
        let fc2_b = p.add("emb.fc2.bias", &[d], 0);
        let mut conv = |name: &str, cin: usize, cout: usize, with_emb: bool| {
            let weight = p.add(format!("{name}.weight"), &[cout, cin, 3, 3], cin * 9);
            let bias = p.add(format!("{name}.bias"), &[cout], 0);
            let emb = with_emb.then(|| p.add(format!("{name}.emb_proj"), &[k * cout, d], d));
            ConvSlots {
                conv: Conv3x3 { cin, cout },
                weight,
                bias,
                emb,
            }
        };
        let slots = Slots {
            fc1_w,
            fc1_b,
            fc2_w,
            fc2_b,
            conv_in: conv("conv_in", config.in_channels, c0, true),
            conv_a: conv("conv_a", c0, c0, true),
            conv_down: conv("conv_down", c0, c1, true),
            conv_mid: conv("conv_mid", c1, c1, true),
            conv_u1: conv("conv_up1", c1, c1, true),
            conv_u2: conv("conv_up2", c1 + c0, c0, true),
            conv_out: conv("conv_out", c0, config.out_channels, false),
        };
        Ok(Self {
            config,
            params: p,
            slots,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    /// Replaces the parameter values; the layout must match.
    pub fn set_params(&mut self, values: &[S]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::arg(format!(
                "expected {} parameters, got {}",
                self.params.len(),
                values.len()
            )));
        }
        self.params.values_mut().copy_from_slice(values);
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Same architecture and values in a different scalar type.
    pub fn cast<T: Scalar>(&self) -> Backbone<T> {
        Backbone {
            config: self.config,
            params: self.params.cast(),
            slots: self.slots,
        }
    }

    fn check_shape(&self, input: &[S], h: usize, w: usize, features: &[S]) -> Result<()> {
        if !h.is_multiple_of(4) || !w.is_multiple_of(4) || h == 0 || w == 0 {
            return Err(Error::arg(format!(
                "spatial size {h}x{w} must be a positive multiple of 4"
            )));
        }
        if input.len() != self.config.in_channels * h * w {
            return Err(Error::arg(format!(
                "input has {} values, expected {} channels of {h}x{w}",
                input.len(),
                self.config.in_channels
            )));
        }
        if features.len() != self.config.embed_dim {
            return Err(Error::arg(format!(
                "embedding features have length {}, expected {}",
                features.len(),
                self.config.embed_dim
            )));
        }
        Ok(())
    }

    /// Embedding projection of one stage: `cout` biases, or `cout` scales
    /// followed by `cout` biases.
    fn modulation(&self, s: &ConvSlots, emb: ParamRef, e_act: &[S]) -> Vec<S> {
        let lin = Linear {
            input: self.config.embed_dim,
            output: self.config.embedding.width() * s.conv.cout,
        };
        lin.forward(e_act, self.params.get(emb), None)
    }

    /// Conv plus embedding; also returns the unmodulated conv output in
    /// scale-shift mode.
    fn conv_stage(&self, s: &ConvSlots, x: &[S], h: usize, w: usize, e_act: &[S]) -> (Vec<S>, Vec<S>) {
        let p = &self.params;
        let mut z = s.conv.forward(x, h, w, p.get(s.weight), p.get(s.bias));
        let Some(emb) = s.emb else {
            return (z, Vec::new());
        };
        let m = self.modulation(s, emb, e_act);
        match self.config.embedding {
            EmbeddingMode::Add => {
                add_channel_bias(&mut z, &m, h * w);
                (z, Vec::new())
            }
            EmbeddingMode::ScaleShift => {
                let (gamma, beta) = m.split_at(s.conv.cout);
                let y = z
                    .chunks(h * w)
                    .zip(gamma.iter().zip(beta))
                    .flat_map(|(ch, (&g, &b))| ch.iter().map(move |&v| v * (S::one() + g) + b))
                    .collect();
                (y, z)
            }
        }
    }

    /// Runs the network on one `(in_channels, h, w)` input.
    pub fn forward(&self, input: &[S], h: usize, w: usize, features: &[S]) -> Result<ForwardCache<S>> {
        self.check_shape(input, h, w, features)?;
        let p = &self.params;
        let sl = &self.slots;
        let d = self.config.embed_dim;
        let (c0, c1) = (self.config.base_width, 2 * self.config.base_width);
        let fc = Linear { input: d, output: d };

        let a1 = fc.forward(features, p.get(sl.fc1_w), Some(p.get(sl.fc1_b)));
        let eh = silu_forward(&a1);
        let emb = fc.forward(&eh, p.get(sl.fc2_w), Some(p.get(sl.fc2_b)));
        let e_act = silu_forward(&emb);

        let (hh, wh) = (h / 2, w / 2);
        let (hq, wq) = (h / 4, w / 4);

        let (z0, m0) = self.conv_stage(&sl.conv_in, input, h, w, &e_act);
        let h0 = silu_forward(&z0);
        let (z1, m1) = self.conv_stage(&sl.conv_a, &h0, h, w, &e_act);
        let h1 = silu_forward(&z1);
        let q1 = avg_pool2(&h1, c0, h, w);
        let (z2, m2) = self.conv_stage(&sl.conv_down, &q1, hh, wh, &e_act);
        let h2 = silu_forward(&z2);
        let q2 = avg_pool2(&h2, c1, hh, wh);
        let (z3, m3) = self.conv_stage(&sl.conv_mid, &q2, hq, wq, &e_act);
        let h3 = silu_forward(&z3);
        let mut u1 = upsample2(&h3, c1, hq, wq);
        u1.iter_mut().zip(&h2).for_each(|(a, b)| *a = *a + *b);
        let (z4, m4) = self.conv_stage(&sl.conv_u1, &u1, hh, wh, &e_act);
        let h4 = silu_forward(&z4);
        let mut u2 = upsample2(&h4, c1, hh, wh);
        u2.extend_from_slice(&h1);
        let (z5, m5) = self.conv_stage(&sl.conv_u2, &u2, h, w, &e_act);
        let h5 = silu_forward(&z5);
        let (output, _) = self.conv_stage(&sl.conv_out, &h5, h, w, &e_act);

        Ok(ForwardCache {
            h,
            w,
            input: input.to_vec(),
            features: features.to_vec(),
            a1,
            eh,
            emb,
            e_act,
            pre: [m0, m1, m2, m3, m4, m5],
            z0,
            h0,
            z1,
            q1,
            z2,
            q2,
            z3,
            u1,
            z4,
            u2,
            z5,
            h5,
            output,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_stage_backward(
        &self,
        s: &ConvSlots,
        x: &[S],
        pre: &[S],
        h: usize,
        w: usize,
        e_act: &[S],
        grad_y: &[S],
        grads: &mut [S],
        grad_e_act: &mut [S],
        need_input_grad: bool,
    ) -> Option<Vec<S>> {
        let p = &self.params;
        let hw = h * w;
        let mut scaled = None;
        if let Some(emb) = s.emb {
            let cout = s.conv.cout;
            let lin = Linear {
                input: self.config.embed_dim,
                output: self.config.embedding.width() * cout,
            };
            let g_m = match self.config.embedding {
                EmbeddingMode::Add => channel_sums(grad_y, cout, hw),
                EmbeddingMode::ScaleShift => {
                    let m = self.modulation(s, emb, e_act);
                    let mut g_m = vec![S::zero(); 2 * cout];
                    let mut g_z = Vec::with_capacity(grad_y.len());
                    for c in 0..cout {
                        let (gy, z) = (&grad_y[c * hw..(c + 1) * hw], &pre[c * hw..(c + 1) * hw]);
                        let (mut dg, mut db) = (S::zero(), S::zero());
                        for (&g, &zv) in gy.iter().zip(z) {
                            dg = dg + g * zv;
                            db = db + g;
                            g_z.push(g * (S::one() + m[c]));
                        }
                        g_m[c] = dg;
                        g_m[cout + c] = db;
                    }
                    scaled = Some(g_z);
                    g_m
                }
            };
            let g_e = lin.backward(e_act, p.get(emb), &g_m, &mut grads[emb.range()], None);
            grad_e_act.iter_mut().zip(&g_e).for_each(|(a, b)| *a = *a + *b);
        }
        let grad_z = scaled.as_deref().unwrap_or(grad_y);
        let (gw, gb) = pair_mut(grads, s.weight, s.bias);
        s.conv
            .backward(x, h, w, p.get(s.weight), grad_z, gw, gb, need_input_grad)
    }

    /// Accumulates the gradient of `<grad_output, output>` with respect to
    /// every parameter into `grads`.
    pub fn backward(&self, cache: &ForwardCache<S>, grad_output: &[S], grads: &mut [S]) -> Result<()> {
        if grad_output.len() != cache.output.len() {
            return Err(Error::arg("upstream gradient does not match the output shape"));
        }
        if grads.len() != self.params.len() {
            return Err(Error::arg("gradient buffer does not match the parameter count"));
        }
        let p = &self.params;
        let sl = &self.slots;
        let d = self.config.embed_dim;
        let (c0, c1) = (self.config.base_width, 2 * self.config.base_width);
        let (h, w) = (cache.h, cache.w);
        let (hh, wh) = (h / 2, w / 2);
        let (hq, wq) = (h / 4, w / 4);
        let c = cache;
        let mut g_e = vec![S::zero(); d];

        let mut g = self
            .conv_stage_backward(
                &sl.conv_out,
                &c.h5,
                &[],
                h,
                w,
                &c.e_act,
                grad_output,
                grads,
                &mut g_e,
                true,
            )
            .unwrap();
        silu_backward(&c.z5, &mut g);
        let g_u2 = self
            .conv_stage_backward(&sl.conv_u2, &c.u2, &c.pre[5], h, w, &c.e_act, &g, grads, &mut g_e, true)
            .unwrap();
        let (g_up4, g_h1_skip) = g_u2.split_at(c1 * h * w);
        let mut g = upsample2_backward(g_up4, c1, hh, wh);
        silu_backward(&c.z4, &mut g);
        let g_u1 = self
            .conv_stage_backward(
                &sl.conv_u1,
                &c.u1,
                &c.pre[4],
                hh,
                wh,
                &c.e_act,
                &g,
                grads,
                &mut g_e,
                true,
            )
            .unwrap();
        let mut g = upsample2_backward(&g_u1, c1, hq, wq);
        silu_backward(&c.z3, &mut g);
        let g_q2 = self
            .conv_stage_backward(
                &sl.conv_mid,
                &c.q2,
                &c.pre[3],
                hq,
                wq,
                &c.e_act,
                &g,
                grads,
                &mut g_e,
                true,
            )
            .unwrap();
        let mut g = avg_pool2_backward(&g_q2, c1, hh, wh);
        g.iter_mut().zip(&g_u1).for_each(|(a, b)| *a = *a + *b);
        silu_backward(&c.z2, &mut g);
        let g_q1 = self
            .conv_stage_backward(
                &sl.conv_down,
                &c.q1,
                &c.pre[2],
                hh,
                wh,
                &c.e_act,
                &g,
                grads,
                &mut g_e,
                true,
            )
            .unwrap();
        let mut g = avg_pool2_backward(&g_q1, c0, h, w);
        g.iter_mut().zip(g_h1_skip).for_each(|(a, b)| *a = *a + *b);
        silu_backward(&c.z1, &mut g);
        let mut g = self
            .conv_stage_backward(&sl.conv_a, &c.h0, &c.pre[1], h, w, &c.e_act, &g, grads, &mut g_e, true)
            .unwrap();
        silu_backward(&c.z0, &mut g);
        self.conv_stage_backward(
            &sl.conv_in,
            &c.input,
            &c.pre[0],
            h,
            w,
            &c.e_act,
            &g,
            grads,
            &mut g_e,
            false,
        );

        silu_backward(&c.emb, &mut g_e);
        let fc = Linear { input: d, output: d };
        let (gw, gb) = pair_mut(grads, sl.fc2_w, sl.fc2_b);
        let mut g_eh = fc.backward(&c.eh, p.get(sl.fc2_w), &g_e, gw, Some(gb));
        silu_backward(&c.a1, &mut g_eh);
        let (gw, gb) = pair_mut(grads, sl.fc1_w, sl.fc1_b);
        fc.backward(&c.features, p.get(sl.fc1_w), &g_eh, gw, Some(gb));
        Ok(())
    }
}
