//! Session and behavior-intent embeddings from the fused item sequence.

use crate::autograd::Var;
use crate::config::SessionAblation;
use crate::error::{Error, Result};
use crate::params::{AttentionIds, Layout};
use crate::scope::Scope;

/// Messages `m_i = tanh(W_0 [h_i ‖ o_{b_i} ‖ o_next ‖ p_{L-i+1}])`, where the
/// reversed position of the last item is 1.
pub fn build_message(
    s: &mut Scope<'_, '_>,
    layout: &Layout,
    h: Var,
    behaviors: &[usize],
    next_behavior: usize,
    max_len: usize,
) -> Result<Var> {
    let len = behaviors.len();
    if len == 0 || len > max_len {
        return Err(Error::Invalid(format!("prefix length {len} outside 1..={max_len}")));
    }
    if s.tape.shape(h)[0] != len {
        return Err(Error::shape("build_message", format!("{} rows for {len} events", s.tape.shape(h)[0])));
    }
    let o = s.param(layout.behavior_emb);
    let p = s.param(layout.position_emb);
    let ob = s.tape.gather_rows(o, behaviors)?;
    let on = s.tape.gather_rows(o, &vec![next_behavior; len])?;
    let rev: Vec<usize> = (0..len).map(|i| len - 1 - i).collect();
    let pp = s.tape.gather_rows(p, &rev)?;
    let x = s.tape.concat(&[h, ob, on, pp])?;
    let m = s.linear(x, layout.w_0)?;
    s.tape.tanh(m)
}

/// `Σ_i β_i m_i` with `β_i = r · sigmoid(W_1 m_i + W_2 anchor + b)`.
/// Scores are raw unless `normalize`, which softmaxes them over positions.
pub fn attention_pool(
    s: &mut Scope<'_, '_>,
    ids: &AttentionIds,
    items: Var,
    anchor: Var,
    normalize: bool,
) -> Result<Var> {
    let a1 = s.linear(items, ids.w_1)?;
    let a2 = s.affine(anchor, ids.w_2, ids.b)?;
    let g = s.tape.add_row(a1, a2)?;
    let g = s.tape.sigmoid(g)?;
    let r = s.param(ids.r);
    let mut beta = s.tape.matmul_nt(g, r)?;
    if normalize {
        let row = s.tape.transpose(beta)?;
        let row = s.tape.softmax(row, None)?;
        beta = s.tape.transpose(row)?;
    }
    let weighted = s.tape.mul_col(items, beta)?;
    s.tape.sum_rows(weighted)
}

#[derive(Debug, Clone, Copy)]
pub struct SessionRepr {
    pub s_g: Var,
    pub s_c: Var,
    pub s: Var,
}

/// General interest anchored on the mean message, current interest on the
/// last one, fused as `S = tanh(W_c [s_g ‖ s_c])`. An ablated channel enters
/// the fusion as zeros.
pub fn compose_session(
    s: &mut Scope<'_, '_>,
    layout: &Layout,
    m: Var,
    ablation: SessionAblation,
    normalize: bool,
) -> Result<SessionRepr> {
    let [len, d] = s.tape.shape(m);
    if len == 0 {
        return Err(Error::Invalid("no messages".into()));
    }
    let s_g = if ablation == SessionAblation::NoGeneral {
        s.zeros(1, d)
    } else {
        let mean = s.tape.mean_rows(m)?;
        attention_pool(s, &layout.general, m, mean, normalize)?
    };
    let s_c = if ablation == SessionAblation::NoCurrent {
        s.zeros(1, d)
    } else {
        let last = s.tape.gather_rows(m, &[len - 1])?;
        attention_pool(s, &layout.current, m, last, normalize)?
    };
    let both = s.tape.concat(&[s_g, s_c])?;
    let fused = s.linear(both, layout.w_c)?;
    let out = s.tape.tanh(fused)?;
    Ok(SessionRepr { s_g, s_c, s: out })
}

/// `B = tanh(W_bhv · pool(c, c_L) + b_bhv)`. `tie` reuses the
/// general-interest attention parameters.
pub fn behavior_intent(
    s: &mut Scope<'_, '_>,
    layout: &Layout,
    c: Var,
    tie: bool,
    normalize: bool,
) -> Result<Var> {
    let len = s.tape.shape(c)[0];
    if len == 0 {
        return Err(Error::Invalid("empty local context".into()));
    }
    let last = s.tape.gather_rows(c, &[len - 1])?;
    let ids = if tie { layout.general } else { layout.behavior };
    let pooled = attention_pool(s, &ids, c, last, normalize)?;
    let b = s.affine(pooled, layout.w_bhv, layout.b_bhv)?;
    s.tape.tanh(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::{finite_difference_check, Tape, Tensor};
    use crate::params::{Dims, ModelParams};

    fn dims(d: usize) -> Dims {
        Dims { n_items: 3, n_behaviors: 2, d, layers: 0, max_len: 4 }
    }

    fn set(p: &mut ModelParams, i: usize, v: &[f64]) {
        let [r, c] = p.get(i).shape();
        p.set(i, Tensor::new(r, c, v.to_vec()).unwrap()).unwrap();
    }

    fn messages(p: &ModelParams, h: Tensor, behaviors: &[usize], next: usize) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, p, false);
        let h = s.tape.constant(h);
        let m = build_message(&mut s, p.layout(), h, behaviors, next, p.dims().max_len)?;
        Ok(tape.value(m).clone())
    }

    #[test]
    fn messages_are_bounded_and_position_tagged() {
        let p = ModelParams::init(dims(3), 1.0, 2).unwrap();
        let h = Tensor::new(2, 3, vec![0.5, 0.1, -0.2, 0.5, 0.1, -0.2]).unwrap();
        let m = messages(&p, h, &[1, 1], 0).unwrap();
        assert!(m.data().iter().all(|v| v.abs() < 1.0));
        assert_ne!(m.row_slice(0), m.row_slice(1));

        let z = ModelParams::zeros(dims(3));
        let m = messages(&z, Tensor::filled(2, 3, 1.0), &[0, 1], 1).unwrap();
        assert!(m.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn too_long_prefix_is_rejected() {
        let p = ModelParams::zeros(dims(2));
        assert!(messages(&p, Tensor::zeros(5, 2), &[0; 5], 0).is_err());
    }

    #[test]
    fn reversed_positions_swap() {
        // with W_0 selecting only the position block, a two-item prefix gets
        // p_2 on the first message and p_1 on the last
        let mut p = ModelParams::zeros(Dims { n_items: 3, n_behaviors: 2, d: 1, layers: 0, max_len: 4 });
        let l = p.layout().clone();
        set(&mut p, l.position_emb, &[0.1, 0.2, 0.3, 0.4]);
        set(&mut p, l.w_0, &[0.0, 0.0, 0.0, 1.0]);
        let m = messages(&p, Tensor::column(vec![1.0, 2.0]), &[0, 1], 0).unwrap();
        assert_eq!(m.data(), [0.2f64.tanh(), 0.1f64.tanh()]);
        let m = messages(&p, Tensor::column(vec![2.0, 1.0]), &[1, 0], 0).unwrap();
        assert_eq!(m.data(), [0.2f64.tanh(), 0.1f64.tanh()]);
    }

    fn pool(p: &ModelParams, items: Tensor, anchor: Tensor, normalize: bool) -> Tensor {
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, p, false);
        let m = s.tape.constant(items);
        let a = s.tape.constant(anchor);
        let out = attention_pool(&mut s, &p.layout().general, m, a, normalize).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn pool_matches_two_dim_transcription() {
        let mut p = ModelParams::zeros(dims(2));
        let g = p.layout().general;
        set(&mut p, g.w_1, &[0.3, -0.7, 1.2, 0.4]);
        set(&mut p, g.w_2, &[-0.5, 0.2, 0.6, 0.9]);
        set(&mut p, g.r, &[1.5, -0.8]);
        set(&mut p, g.b, &[0.05, -0.1]);
        let items = [[0.4, -0.3], [0.9, 0.2], [-0.6, 0.7]];
        let anchor = [0.25, -0.5];
        let got = pool(&p, Tensor::new(3, 2, items.concat()).unwrap(), Tensor::row(anchor.to_vec()), false);

        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let mut want = [0.0; 2];
        for m in items {
            let g0 = sig(0.3 * m[0] - 0.7 * m[1] + (-0.5 * anchor[0] + 0.2 * anchor[1]) + 0.05);
            let g1 = sig(1.2 * m[0] + 0.4 * m[1] + (0.6 * anchor[0] + 0.9 * anchor[1]) - 0.1);
            let beta = 1.5 * g0 - 0.8 * g1;
            want[0] += beta * m[0];
            want[1] += beta * m[1];
        }
        assert!((got.get(0, 0) - want[0]).abs() < 1e-12);
        assert!((got.get(0, 1) - want[1]).abs() < 1e-12);
    }

    #[test]
    fn pool_degenerate_cases() {
        let mut p = ModelParams::init(dims(2), 0.5, 6).unwrap();
        let g = p.layout().general;
        let single = pool(&p, Tensor::row(vec![0.3, -0.4]), Tensor::row(vec![0.3, -0.4]), false);
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, &p, false);
        let m = s.tape.constant(Tensor::row(vec![0.3, -0.4]));
        let a1 = s.linear(m, g.w_1).unwrap();
        let a2 = s.affine(m, g.w_2, g.b).unwrap();
        let x = s.tape.add(a1, a2).unwrap();
        let x = s.tape.sigmoid(x).unwrap();
        let r = s.param(g.r);
        let beta = s.tape.dot(x, r).unwrap();
        let beta = tape.value(beta).item().unwrap();
        assert!((single.get(0, 0) - beta * 0.3).abs() < 1e-14);

        set(&mut p, g.r, &[0.0, 0.0]);
        let zero = pool(&p, Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap(), Tensor::row(vec![1.0, 1.0]), false);
        assert_eq!(zero.data(), [0.0, 0.0]);
    }

    #[test]
    fn normalized_pool_stays_in_hull() {
        let p = ModelParams::init(dims(2), 1.0, 3).unwrap();
        let items = Tensor::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let out = pool(&p, items, Tensor::row(vec![0.2, 0.1]), true);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!((out.get(0, 0) + out.get(0, 1) - 1.0).abs() < 1e-12);
    }

    fn session(p: &ModelParams, m: Tensor, ablation: SessionAblation) -> (Tensor, Tensor, Tensor) {
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, p, false);
        let m = s.tape.constant(m);
        let r = compose_session(&mut s, p.layout(), m, ablation, false).unwrap();
        (tape.value(r.s_g).clone(), tape.value(r.s_c).clone(), tape.value(r.s).clone())
    }

    #[test]
    fn single_message_anchors_both_pools_on_itself() {
        let mut p = ModelParams::init(dims(2), 0.5, 12).unwrap();
        // copying the general attention into the current one makes the two
        // pools identical exactly when their anchors agree
        let (g, c) = (p.layout().general, p.layout().current);
        for (a, b) in [(g.w_1, c.w_1), (g.w_2, c.w_2), (g.r, c.r), (g.b, c.b)] {
            let t = p.get(a).clone();
            p.set(b, t).unwrap();
        }
        let (s_g, s_c, _) = session(&p, Tensor::row(vec![0.3, -0.6]), SessionAblation::Full);
        assert_eq!(s_g, s_c);
    }

    #[test]
    fn ablations_zero_one_channel() {
        let p = ModelParams::init(dims(2), 0.5, 12).unwrap();
        let m = Tensor::new(2, 2, vec![0.3, -0.6, 0.1, 0.9]).unwrap();
        let (full_g, full_c, _) = session(&p, m.clone(), SessionAblation::Full);
        let (g, c, s) = session(&p, m.clone(), SessionAblation::NoCurrent);
        assert_eq!((g, c.data()), (full_g.clone(), &[0.0, 0.0][..]));
        let w_c = p.get(p.layout().w_c);
        let want: Vec<f64> = (0..2)
            .map(|r| (w_c.get(r, 0) * full_g.get(0, 0) + w_c.get(r, 1) * full_g.get(0, 1)).tanh())
            .collect();
        assert!((s.get(0, 0) - want[0]).abs() < 1e-14 && (s.get(0, 1) - want[1]).abs() < 1e-14);
        let (g, c, _) = session(&p, m, SessionAblation::NoGeneral);
        assert_eq!((g.data(), c), (&[0.0, 0.0][..], full_c));
    }

    fn intent(p: &ModelParams, c: Tensor) -> Tensor {
        let mut tape = Tape::new();
        let mut s = Scope::lazy(&mut tape, p, false);
        let c = s.tape.constant(c);
        let b = behavior_intent(&mut s, p.layout(), c, false, false).unwrap();
        tape.value(b).clone()
    }

    #[test]
    fn behavior_intent_cases() {
        let mut p = ModelParams::init(dims(1), 0.8, 5).unwrap();
        let l = p.layout().clone();
        let c = Tensor::column(vec![0.4, -0.9, 0.6]);
        let b = intent(&p, c.clone());
        assert!(b.data().iter().all(|v| v.abs() < 1.0));

        let v = |i: usize| p.get(i).data()[0];
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let (w1, w2, r, bg) = (v(l.behavior.w_1), v(l.behavior.w_2), v(l.behavior.r), v(l.behavior.b));
        let last = 0.6;
        let pooled: f64 = [0.4, -0.9, 0.6].iter().map(|&ci| r * sig(w1 * ci + w2 * last + bg) * ci).sum();
        let want = (v(l.w_bhv) * pooled + v(l.b_bhv)).tanh();
        assert!((b.data()[0] - want).abs() < 1e-12);

        set(&mut p, l.w_bhv, &[0.0]);
        set(&mut p, l.b_bhv, &[0.0]);
        assert_eq!(intent(&p, c).data(), [0.0]);
    }

    #[test]
    fn gradient_check_through_session_heads() {
        let p = ModelParams::init(dims(3), 0.6, 30).unwrap();
        let h = Tensor::new(3, 3, (0..9).map(|i| (i as f64 * 0.61).cos()).collect()).unwrap();
        let c = Tensor::new(3, 3, (0..9).map(|i| (i as f64 * 0.29).sin()).collect()).unwrap();
        let check = finite_difference_check(
            p.tensors(),
            |tape, vars| {
                let mut s = Scope::bound(tape, vars);
                let l = p.layout();
                let h = s.tape.constant(h.clone());
                let c = s.tape.constant(c.clone());
                let m = build_message(&mut s, l, h, &[0, 1, 1], 1, 4)?;
                let r = compose_session(&mut s, l, m, SessionAblation::Full, false)?;
                let b = behavior_intent(&mut s, l, c, false, false)?;
                let both = s.tape.concat(&[r.s, b])?;
                let sq = s.tape.mul(both, both)?;
                s.tape.sum(sq)
            },
            1e-6,
        )
        .unwrap();
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }
}
