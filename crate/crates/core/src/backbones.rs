//! Relevance (DSSM, QEM, HEM) and preference (MLP, DCN) backbones.
//!
//! Every backbone produces an `H`-dimensional last-layer representation and a
//! scalar effect `sigmoid(w·hidden + b)` from its own linear decoder.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoding::EncodedBatch;
use crate::error::{Error, Result};
use crate::numerics::{
    axpy, derive_seed, dot, relu_backward_inplace, relu_inplace, rng_from_seed, sigmoid, DrpRng,
    Linear, Mlp, MlpCache, ParamBlock, Tensor,
};

pub const DEFAULT_HIDDEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum RelevanceKind {
    Dssm,
    Qem,
    Hem,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PreferenceKind {
    Mlp,
    Dcn,
}

impl FromStr for RelevanceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DSSM" => Ok(RelevanceKind::Dssm),
            "QEM" => Ok(RelevanceKind::Qem),
            "HEM" => Ok(RelevanceKind::Hem),
            _ => Err(Error::Config(format!(
                "unknown relevance model `{s}` (expected DSSM, QEM or HEM)"
            ))),
        }
    }
}

impl FromStr for PreferenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "MLP" => Ok(PreferenceKind::Mlp),
            "DCN" => Ok(PreferenceKind::Dcn),
            _ => Err(Error::Config(format!(
                "unknown preference model `{s}` (expected MLP or DCN)"
            ))),
        }
    }
}

impl fmt::Display for RelevanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RelevanceKind::Dssm => "DSSM",
            RelevanceKind::Qem => "QEM",
            RelevanceKind::Hem => "HEM",
        })
    }
}

impl fmt::Display for PreferenceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PreferenceKind::Mlp => "MLP",
            PreferenceKind::Dcn => "DCN",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    #[serde(default = "default_relevance")]
    pub relevance: RelevanceKind,
    #[serde(default = "default_preference")]
    pub preference: PreferenceKind,
    /// Prediction-layer widths; the second-to-last is the hidden size `H`.
    #[serde(default = "default_units")]
    pub units: Vec<usize>,
    /// Width `d` of the ID embeddings and of `q`, `v`, `u`.
    #[serde(default = "default_embedding_dim")]
    pub embedding_dim: usize,
}

fn default_embedding_dim() -> usize {
    crate::encoding::DEFAULT_EMBEDDING_DIM
}

fn default_relevance() -> RelevanceKind {
    RelevanceKind::Dssm
}

fn default_preference() -> PreferenceKind {
    PreferenceKind::Mlp
}

fn default_units() -> Vec<usize> {
    vec![64, DEFAULT_HIDDEN, 1]
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            relevance: default_relevance(),
            preference: default_preference(),
            units: default_units(),
            embedding_dim: default_embedding_dim(),
        }
    }
}

impl BackboneConfig {
    pub fn new(relevance: RelevanceKind, preference: PreferenceKind) -> Self {
        BackboneConfig {
            relevance,
            preference,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.units.as_slice() {
            [inner, hidden, 1] if *inner > 0 && *hidden > 0 && self.embedding_dim > 0 => Ok(()),
            other => Err(Error::Config(format!(
                "prediction-layer units must be [inner, H, 1] with positive widths and a positive embedding_dim, got {other:?}"
            ))),
        }
    }

    pub fn inner(&self) -> usize {
        self.units[0]
    }

    pub fn hidden(&self) -> usize {
        self.units[1]
    }
}

/// Batched backbone result: one effect and one hidden row per example.
#[derive(Clone, Debug)]
pub struct BackboneOutput {
    pub effect: Vec<f64>,
    pub hidden: Tensor,
}

/// Linear read-out to a probability, shared by all backbones.
#[derive(Clone, Debug)]
pub struct EffectDecoder {
    pub linear: Linear,
}

impl EffectDecoder {
    fn new(name: &str, hidden: usize, rng: &mut DrpRng) -> Self {
        EffectDecoder {
            linear: Linear::glorot(name, hidden, 1, rng),
        }
    }

    pub fn forward(&self, hidden: &Tensor) -> Result<Vec<f64>> {
        let logits = self.linear.forward(hidden)?;
        Ok(logits.data().iter().map(|&z| sigmoid(z)).collect())
    }

    /// Returns the gradient w.r.t. `hidden` contributed through the effect.
    fn backward(&mut self, hidden: &Tensor, effect: &[f64], d_effect: &[f64]) -> Tensor {
        let dlogit: Vec<f64> = effect
            .iter()
            .zip(d_effect)
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        let dlogit = Tensor::matrix(dlogit.len(), 1, dlogit).expect("finite");
        self.linear.backward(hidden, &dlogit)
    }
}

#[derive(Clone, Debug)]
enum RelevanceNet {
    Dssm { query_tower: Mlp, item_tower: Mlp },
    Qem { tower: Mlp },
    Hem { mix_logit: ParamBlock, tower: Mlp },
}

#[derive(Clone, Debug)]
pub struct RelevanceModel {
    pub kind: RelevanceKind,
    net: RelevanceNet,
    pub decoder: EffectDecoder,
}

#[derive(Clone, Debug)]
enum RelevanceCacheNet {
    Dssm {
        q_cache: MlpCache,
        v_cache: MlpCache,
        q_out: Tensor,
        v_out: Tensor,
    },
    Qem {
        cache: MlpCache,
    },
    Hem {
        cache: MlpCache,
        mix: f64,
        q_minus_u: Tensor,
    },
}

#[derive(Clone, Debug)]
pub struct RelevanceCache {
    net: RelevanceCacheNet,
    hidden: Tensor,
    effect: Vec<f64>,
}

/// Input gradients for the encoded triple.
pub struct TripleGrads {
    pub dq: Tensor,
    pub dv: Tensor,
    pub du: Tensor,
}

impl RelevanceModel {
    pub fn new(kind: RelevanceKind, cfg: &BackboneConfig, dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, 10));
        let (inner, hidden) = (cfg.inner(), cfg.hidden());
        let net = match kind {
            RelevanceKind::Dssm => RelevanceNet::Dssm {
                query_tower: Mlp::glorot("rel.dssm.query", &[dim, inner, hidden], false, &mut rng),
                item_tower: Mlp::glorot("rel.dssm.item", &[dim, inner, hidden], false, &mut rng),
            },
            RelevanceKind::Qem => RelevanceNet::Qem {
                tower: Mlp::glorot("rel.qem", &[2 * dim, inner, hidden], true, &mut rng),
            },
            RelevanceKind::Hem => RelevanceNet::Hem {
                mix_logit: ParamBlock::new("rel.hem.mix", Tensor::zeros(&[1])),
                tower: Mlp::glorot("rel.hem", &[2 * dim, inner, hidden], true, &mut rng),
            },
        };
        Ok(RelevanceModel {
            kind,
            net,
            decoder: EffectDecoder::new("rel.decoder", hidden, &mut rng),
        })
    }

    /// Scalar mixture logit of the HEM query/user combination.
    pub fn hem_mix_logit_mut(&mut self) -> Option<&mut f64> {
        match &mut self.net {
            RelevanceNet::Hem { mix_logit, .. } => Some(&mut mix_logit.value.data_mut()[0]),
            _ => None,
        }
    }

    pub fn forward(&self, x: &EncodedBatch) -> Result<(BackboneOutput, RelevanceCache)> {
        let (hidden, net) = match &self.net {
            RelevanceNet::Dssm {
                query_tower,
                item_tower,
            } => {
                let (q_out, q_cache) = query_tower.forward(&x.q)?;
                let (v_out, v_cache) = item_tower.forward(&x.v)?;
                let mut hidden = q_out.clone();
                for (h, b) in hidden.data_mut().iter_mut().zip(v_out.data()) {
                    *h *= b;
                }
                (
                    hidden,
                    RelevanceCacheNet::Dssm {
                        q_cache,
                        v_cache,
                        q_out,
                        v_out,
                    },
                )
            }
            RelevanceNet::Qem { tower } => {
                let input = Tensor::hconcat(&[&x.q, &x.v])?;
                let (hidden, cache) = tower.forward(&input)?;
                (hidden, RelevanceCacheNet::Qem { cache })
            }
            RelevanceNet::Hem { mix_logit, tower } => {
                let mix = sigmoid(mix_logit.value.data()[0]);
                let mut m = x.u.clone();
                let mut q_minus_u = x.q.clone();
                q_minus_u.add_scaled(&x.u, -1.0);
                m.add_scaled(&q_minus_u, mix);
                let input = Tensor::hconcat(&[&m, &x.v])?;
                let (hidden, cache) = tower.forward(&input)?;
                (
                    hidden,
                    RelevanceCacheNet::Hem {
                        cache,
                        mix,
                        q_minus_u,
                    },
                )
            }
        };
        let effect = self.decoder.forward(&hidden)?;
        Ok((
            BackboneOutput {
                effect: effect.clone(),
                hidden: hidden.clone(),
            },
            RelevanceCache {
                net,
                hidden,
                effect,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &RelevanceCache,
        d_effect: &[f64],
        d_hidden: Option<&Tensor>,
    ) -> TripleGrads {
        let mut dh = self
            .decoder
            .backward(&cache.hidden, &cache.effect, d_effect);
        if let Some(g) = d_hidden {
            dh.add_scaled(g, 1.0);
        }
        let shape = [dh.rows(), 0];
        match (&mut self.net, &cache.net) {
            (
                RelevanceNet::Dssm {
                    query_tower,
                    item_tower,
                },
                RelevanceCacheNet::Dssm {
                    q_cache,
                    v_cache,
                    q_out,
                    v_out,
                },
            ) => {
                let mut dq_out = dh.clone();
                let mut dv_out = dh;
                for ((gq, gv), (a, b)) in dq_out
                    .data_mut()
                    .iter_mut()
                    .zip(dv_out.data_mut())
                    .zip(q_out.data().iter().zip(v_out.data()))
                {
                    *gq *= b;
                    *gv *= a;
                }
                let dq = query_tower.backward(q_cache, &dq_out);
                let dv = item_tower.backward(v_cache, &dv_out);
                let du = Tensor::zeros(&[shape[0], dq.cols()]);
                TripleGrads { dq, dv, du }
            }
            (RelevanceNet::Qem { tower }, RelevanceCacheNet::Qem { cache }) => {
                let d_in = tower.backward(cache, &dh);
                let d = d_in.cols() / 2;
                let mut parts = d_in.hsplit(&[d, d]);
                let dv = parts.pop().expect("two parts");
                let dq = parts.pop().expect("two parts");
                let du = Tensor::zeros(&[dq.rows(), d]);
                TripleGrads { dq, dv, du }
            }
            (
                RelevanceNet::Hem { mix_logit, tower },
                RelevanceCacheNet::Hem {
                    cache,
                    mix,
                    q_minus_u,
                },
            ) => {
                let d_in = tower.backward(cache, &dh);
                let d = d_in.cols() / 2;
                let mut parts = d_in.hsplit(&[d, d]);
                let dv = parts.pop().expect("two parts");
                let dm = parts.pop().expect("two parts");
                let dmix = dot(dm.data(), q_minus_u.data());
                mix_logit.grad.data_mut()[0] += dmix * mix * (1.0 - mix);
                let dq = dm.map(|g| g * mix);
                let du = dm.map(|g| g * (1.0 - mix));
                TripleGrads { dq, dv, du }
            }
            _ => unreachable!("cache built by a different relevance network"),
        }
    }

    pub fn params(&self) -> Vec<&ParamBlock> {
        let mut p: Vec<&ParamBlock> = match &self.net {
            RelevanceNet::Dssm {
                query_tower,
                item_tower,
            } => query_tower
                .params()
                .into_iter()
                .chain(item_tower.params())
                .collect(),
            RelevanceNet::Qem { tower } => tower.params(),
            RelevanceNet::Hem { mix_logit, tower } => {
                std::iter::once(mix_logit).chain(tower.params()).collect()
            }
        };
        p.extend(self.decoder.linear.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut p: Vec<&mut ParamBlock> = match &mut self.net {
            RelevanceNet::Dssm {
                query_tower,
                item_tower,
            } => query_tower
                .params_mut()
                .into_iter()
                .chain(item_tower.params_mut())
                .collect(),
            RelevanceNet::Qem { tower } => tower.params_mut(),
            RelevanceNet::Hem { mix_logit, tower } => std::iter::once(mix_logit)
                .chain(tower.params_mut())
                .collect(),
        };
        p.extend(self.decoder.linear.params_mut());
        p
    }
}

/// One DCN cross layer for a single example: `x0 · (wᵀ xk) + b + xk`.
pub fn cross_layer(x0: &[f64], xk: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let s = dot(w, xk);
    x0.iter()
        .zip(xk)
        .zip(b)
        .map(|((&a, &x), &bb)| a * s + bb + x)
        .collect()
}

pub const DCN_CROSS_LAYERS: usize = 2;

#[derive(Clone, Debug)]
pub struct CrossNetwork {
    pub weights: Vec<ParamBlock>,
    pub biases: Vec<ParamBlock>,
}

#[derive(Clone, Debug)]
struct CrossCache {
    /// x_0 .. x_{L-1}; the input of every layer.
    xs: Vec<Tensor>,
    /// Per layer, per example `w_kᵀ x_k`.
    scalars: Vec<Vec<f64>>,
}

impl CrossNetwork {
    fn new(dim: usize, layers: usize, rng: &mut DrpRng) -> Self {
        let bound = (6.0 / (dim + 1) as f64).sqrt();
        let weights = (0..layers)
            .map(|k| {
                let data = (0..dim).map(|_| rng.random_range(-bound..bound)).collect();
                ParamBlock::new(
                    format!("pref.dcn.cross{k}.weight"),
                    Tensor::vector(data).expect("finite"),
                )
            })
            .collect();
        let biases = (0..layers)
            .map(|k| ParamBlock::new(format!("pref.dcn.cross{k}.bias"), Tensor::zeros(&[dim])))
            .collect();
        CrossNetwork { weights, biases }
    }

    fn forward(&self, x0: &Tensor) -> (Tensor, CrossCache) {
        let mut xs = vec![x0.clone()];
        let mut scalars = Vec::with_capacity(self.weights.len());
        let mut x = x0.clone();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            let mut next = x.clone();
            let mut s_k = Vec::with_capacity(x.rows());
            for r in 0..x.rows() {
                let s = dot(w.value.data(), x.row(r));
                s_k.push(s);
                let row = next.row_mut(r);
                axpy(s, x0.row(r), row);
                axpy(1.0, b.value.data(), row);
            }
            scalars.push(s_k);
            xs.push(next.clone());
            x = next;
        }
        xs.pop();
        (x, CrossCache { xs, scalars })
    }

    fn backward(&mut self, cache: &CrossCache, grad_out: &Tensor) -> Tensor {
        let x0 = &cache.xs[0];
        let mut g = grad_out.clone();
        let mut dx0 = Tensor::zeros(x0.shape());
        for k in (0..self.weights.len()).rev() {
            let xk = &cache.xs[k];
            let mut next = g.clone();
            for r in 0..g.rows() {
                let gr = g.row(r);
                let ds = dot(gr, x0.row(r));
                axpy(cache.scalars[k][r], gr, dx0.row_mut(r));
                axpy(ds, xk.row(r), self.weights[k].grad.data_mut());
                axpy(1.0, gr, self.biases[k].grad.data_mut());
                axpy(ds, self.weights[k].value.data(), next.row_mut(r));
            }
            g = next;
        }
        g.add_scaled(&dx0, 1.0);
        g
    }
}

#[derive(Clone, Debug)]
enum PreferenceNet {
    Mlp {
        tower: Mlp,
    },
    Dcn {
        cross: CrossNetwork,
        deep: Mlp,
        proj: Linear,
    },
}

#[derive(Clone, Debug)]
pub struct PreferenceModel {
    pub kind: PreferenceKind,
    net: PreferenceNet,
    pub decoder: EffectDecoder,
}

#[derive(Clone, Debug)]
enum PreferenceCacheNet {
    Mlp {
        cache: MlpCache,
    },
    Dcn {
        cross: CrossCache,
        deep: MlpCache,
        proj_in: Tensor,
        cross_width: usize,
    },
}

#[derive(Clone, Debug)]
pub struct PreferenceCache {
    net: PreferenceCacheNet,
    hidden: Tensor,
    effect: Vec<f64>,
}

impl PreferenceModel {
    pub fn new(kind: PreferenceKind, cfg: &BackboneConfig, dim: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_from_seed(derive_seed(seed, 20));
        let (inner, hidden) = (cfg.inner(), cfg.hidden());
        let input = 3 * dim;
        let net = match kind {
            PreferenceKind::Mlp => PreferenceNet::Mlp {
                tower: Mlp::glorot("pref.mlp", &[input, inner, hidden], true, &mut rng),
            },
            PreferenceKind::Dcn => PreferenceNet::Dcn {
                cross: CrossNetwork::new(input, DCN_CROSS_LAYERS, &mut rng),
                deep: Mlp::glorot("pref.dcn.deep", &[input, inner, hidden], true, &mut rng),
                proj: Linear::glorot("pref.dcn.proj", input + hidden, hidden, &mut rng),
            },
        };
        Ok(PreferenceModel {
            kind,
            net,
            decoder: EffectDecoder::new("pref.decoder", hidden, &mut rng),
        })
    }

    pub fn forward(&self, x: &EncodedBatch) -> Result<(BackboneOutput, PreferenceCache)> {
        let input = Tensor::hconcat(&[&x.q, &x.v, &x.u])?;
        let (hidden, net) = match &self.net {
            PreferenceNet::Mlp { tower } => {
                let (hidden, cache) = tower.forward(&input)?;
                (hidden, PreferenceCacheNet::Mlp { cache })
            }
            PreferenceNet::Dcn { cross, deep, proj } => {
                let (cross_out, cross_cache) = cross.forward(&input);
                let (deep_out, deep_cache) = deep.forward(&input)?;
                let proj_in = Tensor::hconcat(&[&cross_out, &deep_out])?;
                let mut hidden = proj.forward(&proj_in)?;
                relu_inplace(&mut hidden);
                (
                    hidden,
                    PreferenceCacheNet::Dcn {
                        cross: cross_cache,
                        deep: deep_cache,
                        proj_in,
                        cross_width: input.cols(),
                    },
                )
            }
        };
        hidden.ensure_finite("preference_forward")?;
        let effect = self.decoder.forward(&hidden)?;
        Ok((
            BackboneOutput {
                effect: effect.clone(),
                hidden: hidden.clone(),
            },
            PreferenceCache {
                net,
                hidden,
                effect,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &PreferenceCache,
        d_effect: &[f64],
        d_hidden: Option<&Tensor>,
    ) -> TripleGrads {
        let mut dh = self
            .decoder
            .backward(&cache.hidden, &cache.effect, d_effect);
        if let Some(g) = d_hidden {
            dh.add_scaled(g, 1.0);
        }
        let d_input = match (&mut self.net, &cache.net) {
            (PreferenceNet::Mlp { tower }, PreferenceCacheNet::Mlp { cache }) => {
                tower.backward(cache, &dh)
            }
            (
                PreferenceNet::Dcn { cross, deep, proj },
                PreferenceCacheNet::Dcn {
                    cross: cross_cache,
                    deep: deep_cache,
                    proj_in,
                    cross_width,
                },
            ) => {
                relu_backward_inplace(&cache.hidden, &mut dh);
                let d_proj_in = proj.backward(proj_in, &dh);
                let deep_width = d_proj_in.cols() - cross_width;
                let parts = d_proj_in.hsplit(&[*cross_width, deep_width]);
                let mut d_input = cross.backward(cross_cache, &parts[0]);
                d_input.add_scaled(&deep.backward(deep_cache, &parts[1]), 1.0);
                d_input
            }
            _ => unreachable!("cache built by a different preference network"),
        };
        let d = d_input.cols() / 3;
        let mut parts = d_input.hsplit(&[d, d, d]).into_iter();
        TripleGrads {
            dq: parts.next().expect("q"),
            dv: parts.next().expect("v"),
            du: parts.next().expect("u"),
        }
    }

    pub fn params(&self) -> Vec<&ParamBlock> {
        let mut p: Vec<&ParamBlock> = match &self.net {
            PreferenceNet::Mlp { tower } => tower.params(),
            PreferenceNet::Dcn { cross, deep, proj } => cross
                .weights
                .iter()
                .chain(&cross.biases)
                .chain(deep.params())
                .chain(proj.params())
                .collect(),
        };
        p.extend(self.decoder.linear.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut ParamBlock> {
        let mut p: Vec<&mut ParamBlock> = match &mut self.net {
            PreferenceNet::Mlp { tower } => tower.params_mut(),
            PreferenceNet::Dcn { cross, deep, proj } => cross
                .weights
                .iter_mut()
                .chain(cross.biases.iter_mut())
                .chain(deep.params_mut())
                .chain(proj.params_mut())
                .collect(),
        };
        p.extend(self.decoder.linear.params_mut());
        p
    }
}

/// Single-triple relevance evaluation.
pub fn relevance_forward(
    model: &RelevanceModel,
    q: &Tensor,
    v: &Tensor,
    u: &Tensor,
) -> Result<(f64, Tensor)> {
    let batch = single_batch(q, v, u)?;
    let (out, _) = model.forward(&batch)?;
    Ok((out.effect[0], Tensor::vector(out.hidden.row(0).to_vec())?))
}

/// Single-triple preference evaluation.
pub fn preference_forward(
    model: &PreferenceModel,
    q: &Tensor,
    v: &Tensor,
    u: &Tensor,
) -> Result<(f64, Tensor)> {
    let batch = single_batch(q, v, u)?;
    let (out, _) = model.forward(&batch)?;
    Ok((out.effect[0], Tensor::vector(out.hidden.row(0).to_vec())?))
}

fn single_batch(q: &Tensor, v: &Tensor, u: &Tensor) -> Result<EncodedBatch> {
    q.same_shape(v, "backbone input")?;
    q.same_shape(u, "backbone input")?;
    let row = |t: &Tensor| Tensor::matrix(1, t.len(), t.data().to_vec());
    Ok(EncodedBatch {
        q: row(q)?,
        v: row(v)?,
        u: row(u)?,
    })
}
