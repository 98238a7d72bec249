//! Preference editing in an orthogonal low-rank subspace and dual-level
//! adaptive fusion of relevance and preference.
//!
//! The projection `O` is stored `D × H` with orthonormal rows, so `O e` lives
//! in `R^D` and `Oᵀ` maps back to `R^H`. The edited preference representation
//! is `Oᵀ(O e_p − O e_r)`.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::{
    dot, gemm, matmul, rng_from_seed, sigmoid, DrpRng, Mlp, MlpCache, ParamBlock, Tensor,
};

/// Interior bounds applied to behavior probabilities before the loss.
pub const PROB_FLOOR: f64 = 1e-7;
pub const PROB_CEIL: f64 = 1.0 - 1e-7;

pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_DELTA: f64 = 1.0;
pub const DEFAULT_FUSION_INIT: [f64; 2] = [1.0, 0.5];

const DEGENERATE_NORM: f64 = 1e-12;

pub fn clamp_prob(x: f64) -> f64 {
    x.clamp(PROB_FLOOR, PROB_CEIL)
}

/// Replaces `o` (`D × H`, `D ≤ H`) by the row-orthonormal factor of its
/// Gram–Schmidt decomposition.
///
/// Each row is orthogonalized twice against the previous ones, which keeps
/// `‖O Oᵀ − I‖` at rounding level. The triangular factor has a positive
/// diagonal, so an already orthonormal input comes back unchanged.
pub fn retract(o: &Tensor) -> Result<Tensor> {
    let (d, h) = (o.rows(), o.cols());
    if o.shape().len() != 2 || d > h {
        return Err(Error::dim("retract", o.shape(), &[h, h]));
    }
    let mut q = o.clone();
    for i in 0..d {
        for _pass in 0..2 {
            for j in 0..i {
                let (head, tail) = q.data_mut().split_at_mut(i * h);
                let prev = &head[j * h..(j + 1) * h];
                let row = &mut tail[..h];
                let c = dot(prev, row);
                for (r, p) in row.iter_mut().zip(prev) {
                    *r -= c * p;
                }
            }
        }
        let row = q.row_mut(i);
        let norm = dot(row, row).sqrt();
        if !(norm >= DEGENERATE_NORM) {
            return Err(Error::Degenerate { row: i, norm });
        }
        row.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(q)
}

/// `‖O Oᵀ − I_D‖_F`.
pub fn orthonormality_error(o: &Tensor) -> f64 {
    let mut g = matmul(o, false, o, true).expect("square gram");
    for i in 0..o.rows() {
        g.data_mut()[i * o.rows() + i] -= 1.0;
    }
    g.frobenius_norm()
}

/// Learnable intervention subspace with orthonormal rows.
#[derive(Clone, Debug)]
pub struct Projection {
    pub matrix: ParamBlock,
}

impl Projection {
    /// Seeded Gaussian `D × H` followed by a retraction.
    pub fn random(rank: usize, hidden: usize, rng: &mut DrpRng) -> Result<Self> {
        if rank == 0 || rank > hidden {
            return Err(Error::Config(format!(
                "projection rank must satisfy 1 <= D <= H, got D={rank}, H={hidden}"
            )));
        }
        let data: Vec<f64> = (0..rank * hidden)
            .map(|_| StandardNormal.sample(rng))
            .collect();
        let raw = Tensor::matrix(rank, hidden, data)?;
        Ok(Projection::from_matrix(retract(&raw)?))
    }

    pub fn from_matrix(matrix: Tensor) -> Self {
        Projection {
            matrix: ParamBlock::new("edit.projection", matrix),
        }
    }

    pub fn rank(&self) -> usize {
        self.matrix.value.rows()
    }

    pub fn hidden(&self) -> usize {
        self.matrix.value.cols()
    }

    pub fn retract(&mut self) -> Result<()> {
        self.matrix.value = retract(&self.matrix.value)?;
        Ok(())
    }

    pub fn orthonormality_error(&self) -> f64 {
        orthonormality_error(&self.matrix.value)
    }
}

/// Single-vector edit `Oᵀ(O e_p − O e_r)`.
pub fn edit_preference(e_p: &Tensor, e_r: &Tensor, o: &Projection) -> Result<Tensor> {
    let h = o.hidden();
    if e_p.shape() != [h] || e_r.shape() != [h] {
        return Err(Error::dim(
            "edit_preference",
            e_p.shape(),
            o.matrix.value.shape(),
        ));
    }
    let diff = Tensor::matrix(
        1,
        h,
        e_p.data()
            .iter()
            .zip(e_r.data())
            .map(|(a, b)| a - b)
            .collect(),
    )?;
    let (out, _) = low_rank_edit(&diff, &o.matrix.value, &o.matrix.value)?;
    Tensor::vector(out.into_data())
}

/// Batched `dec ᵀ (enc · diff)` row-wise: `diff: B×H`, `enc, dec: D×H`.
///
/// Returns the edited rows and the latent codes `diff · encᵀ` (`B×D`).
pub fn low_rank_edit(diff: &Tensor, enc: &Tensor, dec: &Tensor) -> Result<(Tensor, Tensor)> {
    if diff.cols() != enc.cols() || enc.shape() != dec.shape() {
        return Err(Error::dim("low_rank_edit", diff.shape(), enc.shape()));
    }
    let z = matmul(diff, false, enc, true)?;
    let out = matmul(&z, false, dec, false)?;
    Ok((out, z))
}

pub struct EditGrads {
    pub d_diff: Tensor,
    pub d_enc: Tensor,
    pub d_dec: Tensor,
}

/// Backward of [`low_rank_edit`].
pub fn low_rank_edit_backward(
    diff: &Tensor,
    z: &Tensor,
    enc: &Tensor,
    dec: &Tensor,
    d_out: &Tensor,
) -> EditGrads {
    let (b, d, h) = (diff.rows(), enc.rows(), enc.cols());
    let mut d_dec = Tensor::zeros(&[d, h]);
    gemm(
        z.data(),
        b,
        d,
        true,
        d_out.data(),
        b,
        h,
        false,
        0.0,
        d_dec.data_mut(),
    );
    let mut dz = Tensor::zeros(&[b, d]);
    gemm(
        d_out.data(),
        b,
        h,
        false,
        dec.data(),
        d,
        h,
        true,
        0.0,
        dz.data_mut(),
    );
    let mut d_enc = Tensor::zeros(&[d, h]);
    gemm(
        dz.data(),
        b,
        d,
        true,
        diff.data(),
        b,
        h,
        false,
        0.0,
        d_enc.data_mut(),
    );
    let mut d_diff = Tensor::zeros(&[b, h]);
    gemm(
        dz.data(),
        b,
        d,
        false,
        enc.data(),
        d,
        h,
        false,
        0.0,
        d_diff.data_mut(),
    );
    EditGrads {
        d_diff,
        d_enc,
        d_dec,
    }
}

/// Linear decoder `W_p e + b_p` read through a sigmoid.
#[derive(Clone, Debug)]
pub struct PreferenceDecoder {
    pub weight: ParamBlock,
    pub bias: ParamBlock,
}

impl PreferenceDecoder {
    pub fn new(weight: Tensor, bias: f64) -> Result<Self> {
        if weight.shape().len() != 2 || weight.rows() != 1 {
            return Err(Error::dim(
                "PreferenceDecoder",
                weight.shape(),
                &[1, weight.cols()],
            ));
        }
        Ok(PreferenceDecoder {
            weight: ParamBlock::new("edit.decoder.weight", weight),
            bias: ParamBlock::new("edit.decoder.bias", Tensor::vector(vec![bias])?),
        })
    }

    pub fn glorot(hidden: usize, rng: &mut DrpRng) -> Self {
        let l = crate::numerics::Linear::glorot("edit.decoder", hidden, 1, rng);
        PreferenceDecoder {
            weight: l.weight,
            bias: l.bias,
        }
    }

    pub fn logit(&self, e_pc: &[f64]) -> f64 {
        dot(self.weight.value.data(), e_pc) + self.bias.value.data()[0]
    }
}

pub fn decode_preference(e_pc: &Tensor, dec: &PreferenceDecoder) -> Result<f64> {
    if e_pc.len() != dec.weight.value.cols() {
        return Err(Error::dim(
            "decode_preference",
            e_pc.shape(),
            dec.weight.value.shape(),
        ));
    }
    Ok(sigmoid(dec.logit(e_pc.data())))
}

/// Multiplicative fusion `r^δ · p`.
pub fn fixed_fusion(p: f64, r: f64, delta: f64) -> Result<f64> {
    if r == 0.0 && delta < 0.0 {
        return Err(Error::Domain(format!(
            "relevance 0 raised to negative exponent {delta}"
        )));
    }
    Ok(r.powf(delta) * p)
}

/// Partials of [`fixed_fusion`] w.r.t. `(p, r)`.
pub fn fixed_fusion_grad(p: f64, r: f64, delta: f64) -> (f64, f64) {
    let dr = if delta == 0.0 {
        0.0
    } else {
        delta * r.powf(delta - 1.0) * p
    };
    (r.powf(delta), dr)
}

/// Joint relevance–preference status probabilities `ℙ_{PR}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AreaProbabilities {
    pub p11: f64,
    pub p10: f64,
    pub p01: f64,
    pub p00: f64,
}

impl AreaProbabilities {
    pub fn sum(&self) -> f64 {
        self.p11 + self.p10 + self.p01 + self.p00
    }
}

pub fn area_probabilities(p_c: f64, r: f64) -> AreaProbabilities {
    AreaProbabilities {
        p11: p_c * r,
        p10: p_c * (1.0 - r),
        p01: (1.0 - p_c) * r,
        p00: (1.0 - p_c) * (1.0 - r),
    }
}

/// `δ`, the global weights `α = (α₁, α₀)`, `β = (β₁, β₀)` and the local corrector.
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub delta: f64,
    pub alpha: ParamBlock,
    pub beta: ParamBlock,
    pub corrector: LocalCorrector,
}

impl FusionParams {
    pub fn new(delta: f64, alpha: [f64; 2], beta: [f64; 2], corrector: LocalCorrector) -> Self {
        FusionParams {
            delta,
            alpha: ParamBlock::new(
                "fusion.alpha",
                Tensor::vector(alpha.to_vec()).expect("finite alpha"),
            ),
            beta: ParamBlock::new(
                "fusion.beta",
                Tensor::vector(beta.to_vec()).expect("finite beta"),
            ),
            corrector,
        }
    }

    pub fn with_defaults(dim: usize, rng: &mut DrpRng) -> Self {
        FusionParams::new(
            DEFAULT_DELTA,
            DEFAULT_FUSION_INIT,
            DEFAULT_FUSION_INIT,
            LocalCorrector::new(dim, rng),
        )
    }

    pub fn alpha(&self) -> [f64; 2] {
        [self.alpha.value.data()[0], self.alpha.value.data()[1]]
    }

    pub fn beta(&self) -> [f64; 2] {
        [self.beta.value.data()[0], self.beta.value.data()[1]]
    }
}

/// `r^{δ−1} · (ℙ11 α1β1 + ℙ10 α1β0 + ℙ01 α0β1 + ℙ00 α0β0)`.
pub fn global_fusion(ap: &AreaProbabilities, r: f64, fp: &FusionParams) -> Result<f64> {
    global_fusion_raw(ap, r, fp.delta, fp.alpha(), fp.beta())
}

pub fn global_fusion_raw(
    ap: &AreaProbabilities,
    r: f64,
    delta: f64,
    alpha: [f64; 2],
    beta: [f64; 2],
) -> Result<f64> {
    if r == 0.0 && delta < 1.0 {
        return Err(Error::Domain(format!(
            "relevance 0 raised to negative exponent {}",
            delta - 1.0
        )));
    }
    let [a1, a0] = alpha;
    let [b1, b0] = beta;
    let s = ap.p11 * a1 * b1 + ap.p10 * a1 * b0 + ap.p01 * a0 * b1 + ap.p00 * a0 * b0;
    Ok(r.powf(delta - 1.0) * s)
}

/// Gradient of the global fusion score w.r.t. its inputs and weights.
#[derive(Clone, Copy, Debug)]
pub struct GlobalFusionGrad {
    pub d_p: f64,
    pub d_r: f64,
    pub d_alpha: [f64; 2],
    pub d_beta: [f64; 2],
}

pub fn global_fusion_grad(
    p_c: f64,
    r: f64,
    delta: f64,
    alpha: [f64; 2],
    beta: [f64; 2],
) -> GlobalFusionGrad {
    // The bilinear sum factors as A(p)·B(r).
    let [a1, a0] = alpha;
    let [b1, b0] = beta;
    let a = p_c * a1 + (1.0 - p_c) * a0;
    let b = r * b1 + (1.0 - r) * b0;
    let scale = r.powf(delta - 1.0);
    let d_scale = if delta == 1.0 {
        0.0
    } else {
        (delta - 1.0) * r.powf(delta - 2.0)
    };
    GlobalFusionGrad {
        d_p: scale * (a1 - a0) * b,
        d_r: d_scale * a * b + scale * a * (b1 - b0),
        d_alpha: [scale * p_c * b, scale * (1.0 - p_c) * b],
        d_beta: [scale * a * r, scale * a * (1.0 - r)],
    }
}

/// Per-example multiplicative corrector `F(u, v, q) = 2σ(MLP([u|v|q])) ∈ (0, 2)`.
#[derive(Clone, Debug)]
pub struct LocalCorrector {
    pub mlp: Mlp,
}

pub const CORRECTOR_HIDDEN: usize = 32;

impl LocalCorrector {
    /// Glorot hidden layer and a zero output layer, so `F ≡ 1` at initialization.
    pub fn new(dim: usize, rng: &mut DrpRng) -> Self {
        let mut mlp = Mlp::glorot(
            "fusion.corrector",
            &[3 * dim, CORRECTOR_HIDDEN, 1],
            false,
            rng,
        );
        for p in mlp.layers[1].params_mut() {
            p.value.fill(0.0);
        }
        LocalCorrector { mlp }
    }

    /// Corrector logits for `[u | v | q]` rows.
    pub fn forward(&self, u: &Tensor, v: &Tensor, q: &Tensor) -> Result<(Vec<f64>, MlpCache)> {
        let input = Tensor::hconcat(&[u, v, q])?;
        let (logits, cache) = self.mlp.forward(&input)?;
        Ok((logits.into_data(), cache))
    }

    /// Returns gradients for `(u, v, q)` given `dL/dlogit`.
    pub fn backward(&mut self, cache: &MlpCache, d_logit: &[f64]) -> [Tensor; 3] {
        let g = Tensor::matrix(d_logit.len(), 1, d_logit.to_vec()).expect("finite");
        let d_in = self.mlp.backward(cache, &g);
        let d = d_in.cols() / 3;
        let mut parts = d_in.hsplit(&[d, d, d]).into_iter();
        [
            parts.next().unwrap(),
            parts.next().unwrap(),
            parts.next().unwrap(),
        ]
    }
}

/// `F = 2σ(logit)`.
pub fn correction_factor(logit: f64) -> f64 {
    2.0 * sigmoid(logit)
}

/// `clamp(y_g · F(u, v, q))`; only `(u, v, q)` enter the forward pass.
pub fn local_fusion(
    y_g: f64,
    q: &Tensor,
    v: &Tensor,
    u: &Tensor,
    fp: &FusionParams,
) -> Result<f64> {
    let row = |t: &Tensor| Tensor::matrix(1, t.len(), t.data().to_vec());
    let (logits, _) = fp.corrector.forward(&row(u)?, &row(v)?, &row(q)?)?;
    Ok(clamp_prob(y_g * correction_factor(logits[0])))
}

/// Projection of `e` onto the row space of an orthonormal `O` via an explicitly formed projector.
pub fn explicit_projector(o: &Tensor) -> Tensor {
    matmul(o, true, o, false).expect("conforming projector")
}

/// Helper for tests and analysis: a seeded random orthonormal projection.
pub fn seeded_projection(rank: usize, hidden: usize, seed: u64) -> Result<Projection> {
    Projection::random(rank, hidden, &mut rng_from_seed(seed))
}
