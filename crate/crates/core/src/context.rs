//! Behavior-aware local context: a GRU over the tagged prefix, attention
//! from each local state onto the item's global neighbors, and fusion.

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::params::GruIds;
use crate::scope::Scope;

/// GRU inputs `q_t = [h⁰_{v_t} ‖ o_{b_t}]`, shape `[L, 2d]`.
pub fn local_inputs(
    s: &mut Scope<'_, '_>,
    item_emb: usize,
    behavior_emb: usize,
    prefix: &[(usize, usize)],
) -> Result<Var> {
    let items: Vec<usize> = prefix.iter().map(|p| p.0).collect();
    let behaviors: Vec<usize> = prefix.iter().map(|p| p.1).collect();
    let h0 = s.param(item_emb);
    let o = s.param(behavior_emb);
    let hi = s.tape.gather_rows(h0, &items)?;
    let ob = s.tape.gather_rows(o, &behaviors)?;
    s.tape.concat(&[hi, ob])
}

/// Runs the GRU over `q: [L, 2d]` from `c_0 = 0` and returns the stacked
/// hidden states `[L, d]`:
///
/// ```text
/// z = σ(W_z q + U_z c + b_z)      r = σ(W_r q + U_r c + b_r)
/// ĉ = tanh(W_h q + U_h (r ⊙ c) + b_h)
/// c' = (1 - z) ⊙ c + z ⊙ ĉ
/// ```
pub fn encode_local_sequence(s: &mut Scope<'_, '_>, gru: &GruIds, q: Var) -> Result<Var> {
    let len = s.tape.shape(q)[0];
    if len == 0 {
        return Err(Error::Invalid("empty prefix".into()));
    }
    let u = s.param(gru.u_z);
    let d = s.tape.value(u).rows();
    let qz = s.affine(q, gru.w_z, gru.b_z)?;
    let qr = s.affine(q, gru.w_r, gru.b_r)?;
    let qh = s.affine(q, gru.w_h, gru.b_h)?;
    let mut c = s.zeros(1, d);
    let mut states = Vec::with_capacity(len);
    for t in 0..len {
        let gate = |s: &mut Scope<'_, '_>, pre: Var, u: usize, h: Var| -> Result<Var> {
            let x = s.tape.gather_rows(pre, &[t])?;
            let uh = s.linear(h, u)?;
            s.tape.add(x, uh)
        };
        let z = gate(s, qz, gru.u_z, c)?;
        let z = s.tape.sigmoid(z)?;
        let r = gate(s, qr, gru.u_r, c)?;
        let r = s.tape.sigmoid(r)?;
        let rc = s.tape.mul(r, c)?;
        let cand = gate(s, qh, gru.u_h, rc)?;
        let cand = s.tape.tanh(cand)?;
        let keep = s.tape.affine(z, -1.0, 1.0)?;
        let old = s.tape.mul(keep, c)?;
        let new = s.tape.mul(z, cand)?;
        c = s.tape.add(old, new)?;
        states.push(c);
    }
    s.tape.stack_rows(&states)
}

/// For each prefix position `t`, attends over `neighbors[t]` (row indices
/// into `hg: [n, d]`) with weights `softmax_j(leaky_relu(cos(W_l c_t, W_g h^g_j)))`
/// and returns `Σ_j α_tj h^g_j`, or a zero row for an empty neighborhood.
pub fn context_attend(
    s: &mut Scope<'_, '_>,
    w_l: usize,
    w_g: usize,
    c: Var,
    neighbors: &[Vec<usize>],
    hg: Var,
) -> Result<Var> {
    let [len, d] = s.tape.shape(c);
    if neighbors.len() != len {
        return Err(Error::shape(
            "context_attend",
            format!("{} neighbor lists for {len} positions", neighbors.len()),
        ));
    }
    let mut offsets = Vec::with_capacity(len + 1);
    offsets.push(0);
    let (mut pos, mut nbr) = (Vec::new(), Vec::new());
    for (t, ns) in neighbors.iter().enumerate() {
        pos.extend(std::iter::repeat_n(t, ns.len()));
        nbr.extend_from_slice(ns);
        offsets.push(nbr.len());
    }
    if nbr.is_empty() {
        return Ok(s.zeros(len, d));
    }
    let local = s.linear(c, w_l)?;
    let global = s.linear(hg, w_g)?;
    let a = s.tape.gather_rows(local, &pos)?;
    let b = s.tape.gather_rows(global, &nbr)?;
    let e = s.tape.cosine_similarity(a, b)?;
    let e = s.tape.leaky_relu(e)?;
    let alpha = s.tape.segment_softmax(e, &offsets)?;
    let msg = s.tape.gather_rows(hg, &nbr)?;
    let msg = s.tape.mul_col(msg, alpha)?;
    s.tape.segment_sum(msg, &offsets)
}

/// `h = h^g + β h^l`.
pub fn fuse_item_representation(s: &mut Scope<'_, '_>, hg: Var, hl: Var, beta: f64) -> Result<Var> {
    let scaled = s.tape.scalar_mul(hl, beta)?;
    s.tape.add(hg, scaled)
}
