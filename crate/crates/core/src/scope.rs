//! Binding of model parameters onto a tape.

use crate::autograd::{Tape, Tensor, Var};
use crate::error::Result;
use crate::params::ModelParams;

/// A tape plus the parameter leaves placed on it so far.
///
/// In lazy mode a parameter becomes a borrowed leaf the first time it is
/// used, so per-example tapes only carry what the example touches. In bound
/// mode every parameter is a leaf created by the caller.
pub struct Scope<'t, 'p> {
    pub tape: &'t mut Tape<'p>,
    source: Option<&'p [Tensor]>,
    vars: Vec<Option<Var>>,
    grad: bool,
}

impl<'t, 'p> Scope<'t, 'p> {
    pub fn lazy(tape: &'t mut Tape<'p>, params: &'p ModelParams, grad: bool) -> Self {
        Scope {
            tape,
            source: Some(params.tensors()),
            vars: vec![None; params.len()],
            grad,
        }
    }

    pub fn bound(tape: &'t mut Tape<'p>, vars: &[Var]) -> Self {
        Scope {
            tape,
            source: None,
            vars: vars.iter().copied().map(Some).collect(),
            grad: true,
        }
    }

    pub fn param(&mut self, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let src = self.source.expect("bound scope has every parameter");
        let v = self.tape.borrowed(&src[idx], self.grad);
        self.vars[idx] = Some(v);
        v
    }

    /// Parameters placed on the tape, with their leaves.
    pub fn bound_params(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.vars.iter().enumerate().filter_map(|(i, v)| v.map(|v| (i, v)))
    }

    /// `x · Wᵀ` for a parameter `W` stored `[out, in]`.
    pub fn linear(&mut self, x: Var, w: usize) -> Result<Var> {
        let w = self.param(w);
        self.tape.matmul_nt(x, w)
    }

    /// `x · Wᵀ + b`.
    pub fn affine(&mut self, x: Var, w: usize, b: usize) -> Result<Var> {
        let y = self.linear(x, w)?;
        let b = self.param(b);
        self.tape.add_row(y, b)
    }

    pub fn zeros(&mut self, rows: usize, cols: usize) -> Var {
        self.tape.constant(Tensor::zeros(rows, cols))
    }
}
