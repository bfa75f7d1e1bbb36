//! Stage III neural field: aggregated feature + view direction in, radiance
//! and density out.
//!
//! The trunk sees only the aggregated feature, with one skip connection;
//! density comes off the trunk before any view conditioning (so density is
//! view-independent by construction) through a softplus. The color branch
//! concatenates the trunk feature with a sine/cosine encoding of the view
//! direction and ends in a sigmoid.

use crate::params::{Init, LiftedParams, ParamStore};
use crate::tape::{concat_cols, Tape, Var};
use crate::tensor::{Result, Tensor};

pub const VIEW_BANDS: usize = 4;

/// Encoded width of a unit view direction: raw xyz plus sin/cos pairs.
pub fn view_enc_dim() -> usize {
    3 + 3 * 2 * VIEW_BANDS
}

/// Frequency encoding of a unit direction: `[d, sin(2^k d), cos(2^k d)]`.
pub fn encode_view(dir: [f64; 3]) -> Vec<f64> {
    let mut out = Vec::with_capacity(view_enc_dim());
    out.extend_from_slice(&dir);
    for k in 0..VIEW_BANDS {
        let f = (1u32 << k) as f64;
        for d in dir {
            out.push((f * d).sin());
        }
        for d in dir {
            out.push((f * d).cos());
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct NeuralField {
    pub in_dim: usize,
    pub width: usize,
    pub leaky: f64,
}

/// Radiance and density at one point.
#[derive(Debug, Clone, Copy)]
pub struct FieldOutput {
    pub color: [f64; 3],
    pub density: f64,
}

impl NeuralField {
    pub fn new(in_dim: usize, width: usize) -> Self {
        NeuralField {
            in_dim,
            width,
            leaky: 0.01,
        }
    }

    pub fn init(&self, store: &mut ParamStore, init: &mut Init) {
        let w = self.width;
        store.insert("field.l0.w", init.linear_weight(self.in_dim, w));
        store.insert("field.l0.b", Tensor::zeros(&[1, w]));
        store.insert("field.l1.w", init.linear_weight(w, w));
        store.insert("field.l1.b", Tensor::zeros(&[1, w]));
        // skip: the aggregated feature re-enters here
        store.insert("field.l2.w", init.linear_weight(w + self.in_dim, w));
        store.insert("field.l2.b", Tensor::zeros(&[1, w]));
        store.insert("field.l3.w", init.linear_weight(w, w));
        store.insert("field.l3.b", Tensor::zeros(&[1, w]));
        store.insert("field.sigma.w", init.linear_weight(w, 1));
        store.insert("field.sigma.b", Tensor::zeros(&[1, 1]));
        store.insert(
            "field.color1.w",
            init.linear_weight(w + view_enc_dim(), w),
        );
        store.insert("field.color1.b", Tensor::zeros(&[1, w]));
        store.insert("field.color2.w", init.linear_weight(w, 3));
        store.insert("field.color2.b", Tensor::zeros(&[1, 3]));
    }

    /// Trunk feature shared by the density and color heads.
    fn trunk<'t>(
        &self,
        tape: &'t Tape,
        params: &LiftedParams<'t>,
        hhat: Var<'t>,
    ) -> Result<Var<'t>> {
        let lin = |x: Var<'t>, name: &str| -> Result<Var<'t>> {
            x.matmul(params.var(&format!("field.{name}.w")))?
                .add_row(params.var(&format!("field.{name}.b")))
        };
        let x0 = lin(hhat, "l0")?.leaky_relu(self.leaky);
        let x1 = lin(x0, "l1")?.leaky_relu(self.leaky);
        let skip = concat_cols(tape, &[hhat, x1])?;
        let x2 = lin(skip, "l2")?.leaky_relu(self.leaky);
        Ok(lin(x2, "l3")?.leaky_relu(self.leaky))
    }

    /// Batched evaluation: `[n, in_dim]` features and `[n, enc]` encoded view
    /// directions to (`[n,1]` densities, `[n,3]` colors).
    pub fn eval<'t>(
        &self,
        tape: &'t Tape,
        params: &LiftedParams<'t>,
        hhat: Var<'t>,
        view_enc: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let lin = |x: Var<'t>, name: &str| -> Result<Var<'t>> {
            x.matmul(params.var(&format!("field.{name}.w")))?
                .add_row(params.var(&format!("field.{name}.b")))
        };
        let x3 = self.trunk(tape, params, hhat)?;
        let sigma = lin(x3, "sigma")?.softplus();
        let with_view = concat_cols(tape, &[x3, view_enc])?;
        let c1 = lin(with_view, "color1")?.leaky_relu(self.leaky);
        let color = lin(c1, "color2")?.sigmoid();
        Ok((sigma, color))
    }

    /// Density-only evaluation (geometry extraction skips the color branch).
    pub fn eval_density<'t>(
        &self,
        tape: &'t Tape,
        params: &LiftedParams<'t>,
        hhat: Var<'t>,
    ) -> Result<Var<'t>> {
        let x3 = self.trunk(tape, params, hhat)?;
        Ok(x3
            .matmul(params.var("field.sigma.w"))?
            .add_row(params.var("field.sigma.b"))?
            .softplus())
    }
}

/// Single-point convenience wrapper over the batched path.
pub fn eval_field(
    field: &NeuralField,
    params: &ParamStore,
    hhat: &[f64],
    view_dir: [f64; 3],
) -> Result<FieldOutput> {
    let tape = Tape::new();
    let lifted = params.lift(&tape);
    let h = tape.constant(Tensor::new(&[1, hhat.len()], hhat.to_vec())?);
    let enc = tape.constant(Tensor::new(&[1, view_enc_dim()], encode_view(view_dir))?);
    let (sigma, color) = field.eval(&tape, &lifted, h, enc)?;
    let c = color.to_tensor();
    Ok(FieldOutput {
        color: [c.data()[0], c.data()[1], c.data()[2]],
        density: sigma.item()?,
    })
}
