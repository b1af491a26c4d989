//! Time-of-day / day-of-week embeddings, anchored ("enhanced") window time
//! embeddings, and the learnable-frequency continuous-time encoding.

use crate::data::{StepTime, SLOTS_PER_DAY};
use crate::error::{Error, Result};
use crate::tensor::{Element, Graph, Var};

/// Which half of the sequence-to-sequence window a step belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Encoder,
    Decoder,
}

/// Look up `[tod_pool[tod] || dow_pool[dow]]` per batch element: `[B, d_t]`.
pub fn time_embedding<E: Element>(
    g: &mut Graph<E>,
    tod_pool: Var,
    dow_pool: Var,
    tod: &[usize],
    dow: &[usize],
) -> Result<Var> {
    if tod.len() != dow.len() {
        return Err(Error::Shape {
            op: "time_embedding",
            expected: "equal-length tod/dow index lists".into(),
            actual: format!("{} vs {}", tod.len(), dow.len()),
        });
    }
    let tod_rows = g.shape(tod_pool)[0];
    let dow_rows = g.shape(dow_pool)[0];
    if let Some(&bad) = tod.iter().find(|&&i| i >= tod_rows) {
        return Err(Error::Shape {
            op: "time_embedding",
            expected: format!("tod index < {tod_rows}"),
            actual: bad.to_string(),
        });
    }
    if let Some(&bad) = dow.iter().find(|&&i| i >= dow_rows) {
        return Err(Error::Shape {
            op: "time_embedding",
            expected: format!("dow index < {dow_rows}"),
            actual: bad.to_string(),
        });
    }
    let t = g.gather_rows(tod_pool, tod);
    let d = g.gather_rows(dow_pool, dow);
    Ok(g.concat_last(&[t, d]))
}

/// Anchored time embeddings for a window side: `[anchor || current]` per
/// step, `[B, 2*d_t]` each.
///
/// The encoder anchors at its own first step; the decoder anchors at the
/// final historical (last input) step, so identical timestamps at different
/// window positions stay distinguishable.
pub fn enhance_time<E: Element>(
    g: &mut Graph<E>,
    tod_pool: Var,
    dow_pool: Var,
    steps: &[StepTime],
    side: Side,
    last_input: Option<&StepTime>,
) -> Result<Vec<Var>> {
    if steps.is_empty() {
        return Err(Error::Shape {
            op: "enhance_time",
            expected: "at least one step".into(),
            actual: "0 steps".into(),
        });
    }
    let anchor_src = match side {
        Side::Encoder => &steps[0],
        Side::Decoder => last_input.ok_or(Error::Shape {
            op: "enhance_time",
            expected: "last input step time for the decoder anchor".into(),
            actual: "none".into(),
        })?,
    };
    let anchor = time_embedding(g, tod_pool, dow_pool, &anchor_src.tod, &anchor_src.dow)?;
    steps
        .iter()
        .map(|st| {
            let cur = time_embedding(g, tod_pool, dow_pool, &st.tod, &st.dow)?;
            Ok(g.concat_last(&[anchor, cur]))
        })
        .collect()
}

/// Continuous-time encoding `sqrt(1/d) [cos(w_1 t), sin(w_1 t), ...]` with
/// `d = 2*d_c` output entries; `[2*d_c]`.
pub fn continuous_time_encode<E: Element>(g: &mut Graph<E>, omega: Var, tau: f64) -> Var {
    let d_c = g.shape(omega)[0];
    let wt = g.mul_scalar(omega, tau);
    let c = g.cos(wt);
    let s = g.sin(wt);
    let c2 = g.reshape(c, vec![d_c, 1]);
    let s2 = g.reshape(s, vec![d_c, 1]);
    let inter = g.concat_last(&[c2, s2]);
    let flat = g.reshape(inter, vec![2 * d_c]);
    g.mul_scalar(flat, (1.0 / (2.0 * d_c as f64)).sqrt())
}

/// Geometrically spaced initial frequencies covering weekly through
/// two-step periods, in radians per step.
pub fn init_omegas(d_c: usize) -> Vec<f64> {
    let lo: f64 = 1.0 / 2016.0;
    let hi: f64 = 0.5;
    (0..d_c)
        .map(|i| {
            let f = if d_c == 1 {
                lo
            } else {
                lo * (hi / lo).powf(i as f64 / (d_c - 1) as f64)
            };
            std::f64::consts::TAU * f
        })
        .collect()
}

/// Time-of-day fraction used as a raw input channel.
pub fn tod_fraction(tod_index: usize) -> f64 {
    tod_index as f64 / SLOTS_PER_DAY as f64
}
