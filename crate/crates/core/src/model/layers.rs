//! Graph builders for each stage of the network. Every function records
//! onto a caller-supplied [`Tape`] so the same code serves inference and
//! training.

use crate::embedding::cosine;
use crate::error::{Error, Result};
use crate::numerics::{NumericsError, Tape, Tensor, Var};
use crate::ontology::Ontology;

/// Seconds per unit of recency fed to the temporal embedding (days).
pub const RECENCY_UNIT_SECS: f64 = 86_400.0;

/// LSTM over `xs` from a zero state. `w` is `[4h, d_x + h]` and `b` is
/// `[4h]`, gate blocks ordered input, forget, candidate, output.
/// Returns every hidden state and the last one.
pub fn lstm_encode(
    tape: &mut Tape,
    w: Var,
    b: Var,
    xs: &[Var],
    hidden: usize,
) -> Result<(Vec<Var>, Var)> {
    if xs.is_empty() {
        return Err(Error::Validation("cannot encode an empty sequence".into()));
    }
    let mut h = tape.constant(Tensor::zeros(&[hidden]));
    let mut c = tape.constant(Tensor::zeros(&[hidden]));
    let mut states = Vec::with_capacity(xs.len());
    for &x in xs {
        let xh = tape.concat(&[x, h])?;
        let z = tape.matmul(w, xh)?;
        let z = tape.add(z, b)?;
        let zi = tape.slice(z, 0, hidden)?;
        let zf = tape.slice(z, hidden, hidden)?;
        let zg = tape.slice(z, 2 * hidden, hidden)?;
        let zo = tape.slice(z, 3 * hidden, hidden)?;
        let i = tape.sigmoid(zi)?;
        let f = tape.sigmoid(zf)?;
        let g = tape.tanh(zg)?;
        let o = tape.sigmoid(zo)?;
        let keep = tape.mul(f, c)?;
        let write = tape.mul(i, g)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c)?;
        h = tape.mul(o, tc)?;
        states.push(h);
    }
    Ok((states, h))
}

/// `sqrt(1/n) [cos(w τ + θ), sin(w τ + θ)]` for a recency already
/// expressed in [`RECENCY_UNIT_SECS`] units.
pub fn temporal_embed(tape: &mut Tape, freq: Var, phase: Var, recency: f64) -> Result<Var> {
    let n = tape.shape(freq)[0];
    let arg = tape.scale(freq, recency)?;
    let arg = tape.add(arg, phase)?;
    let c = tape.cos(arg)?;
    let s = tape.sin(arg)?;
    let both = tape.concat(&[c, s])?;
    Ok(tape.scale(both, (1.0 / n as f64).sqrt())?)
}

/// Raw temporal scores `tanh(x_iᵀ W_t [h_i; Φ_i])`, one per entity.
pub fn temporal_scores(
    tape: &mut Tape,
    xs: &[Var],
    hs: &[Var],
    phis: &[Var],
    proj: Var,
) -> Result<Var> {
    if xs.is_empty() || xs.len() != hs.len() || hs.len() != phis.len() {
        return Err(Error::Validation(
            "temporal attention needs M ≥ 1 aligned entries".into(),
        ));
    }
    let mut scores = Vec::with_capacity(xs.len());
    for ((&x, &h), &phi) in xs.iter().zip(hs).zip(phis) {
        let key = tape.concat(&[h, phi])?;
        let projected = tape.matmul(proj, key)?;
        scores.push(tape.dot(x, projected)?);
    }
    let stacked = tape.concat(&scores)?;
    Ok(tape.tanh(stacked)?)
}

/// Softmax over entities of [`temporal_scores`].
pub fn temporal_attention(
    tape: &mut Tape,
    xs: &[Var],
    hs: &[Var],
    phis: &[Var],
    proj: Var,
) -> Result<Var> {
    let scores = temporal_scores(tape, xs, hs, phis, proj)?;
    Ok(tape.softmax(scores, 0)?)
}

/// `cos(x̃, o_j) · freq(o_j)` for every concept, in canonical order.
pub fn ontology_relevance(embedding: &[f64], ontology: &Ontology) -> Result<Vec<f64>> {
    ontology
        .concepts()
        .iter()
        .map(|c| {
            let o = c
                .embedding()
                .ok_or_else(|| Error::MissingConceptEmbedding(c.term.clone()))?;
            Ok(cosine(embedding, o)? * c.freq)
        })
        .collect()
}

/// Per-entity ontology score from an `[M, J]` relevance matrix through
/// `J → hidden (tanh) → 1`, then softmax over entities.
///
/// The output layer has no bias: a shared offset cancels in the softmax.
pub fn ontology_attention(
    tape: &mut Tape,
    relevance: Var,
    w1: Var,
    b1: Var,
    w2: Var,
) -> Result<Var> {
    let (rel_j, w1_j) = (tape.shape(relevance)[1], tape.shape(w1)[0]);
    if rel_j != w1_j {
        return Err(Error::ConceptCountMismatch {
            expected: w1_j,
            got: rel_j,
        });
    }
    let hidden = tape.matmul(relevance, w1)?;
    let hidden = tape.add(hidden, b1)?;
    let hidden = tape.tanh(hidden)?;
    let scores = tape.matmul(hidden, w2)?;
    Ok(tape.softmax(scores, 0)?)
}

/// Two-way fusion weights `softmax(W_f h_* + b_f)`.
pub fn fusion_weights(tape: &mut Tape, h_star: Var, w: Var, b: Var) -> Result<Var> {
    let a = tape.matmul(w, h_star)?;
    let a = tape.add(a, b)?;
    Ok(tape.softmax(a, 0)?)
}

pub struct Fused {
    /// Per-entity weights `ã₁ β_temp + ã₂ β_ont`.
    pub weights: Var,
    /// Attention-weighted sum of hidden states.
    pub pooled: Var,
    /// Predicted probability, shape `[1]`.
    pub prob: Var,
}

/// Blends the two attention channels with `fusion` (`[2]`), pools hidden
/// states with the blended weights and predicts through a logistic output.
pub fn fuse_and_predict(
    tape: &mut Tape,
    hs: &[Var],
    beta_temp: Var,
    beta_ont: Var,
    fusion: Var,
    out_w: Var,
    out_b: Var,
) -> Result<Fused> {
    let m = hs.len();
    for v in [beta_temp, beta_ont] {
        if tape.shape(v) != [m] {
            return Err(NumericsError::ShapeMismatch {
                op: "fuse",
                lhs: vec![m],
                rhs: tape.shape(v).to_vec(),
            }
            .into());
        }
    }
    let a1 = tape.slice(fusion, 0, 1)?;
    let a2 = tape.slice(fusion, 1, 1)?;
    let t = tape.mul_scalar(beta_temp, a1)?;
    let o = tape.mul_scalar(beta_ont, a2)?;
    let weights = tape.add(t, o)?;
    let stacked = tape.stack_rows(hs)?;
    let pooled = tape.matmul(weights, stacked)?;
    let logit = tape.dot(out_w, pooled)?;
    let logit = tape.add(logit, out_b)?;
    let prob = tape.sigmoid(logit)?;
    Ok(Fused {
        weights,
        pooled,
        prob,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ontology::{Concept, OntologyClass};
    use std::f64::consts::{FRAC_PI_2, LN_2};

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn lstm_zero_weights_give_zero_states() {
        let mut tape = Tape::new();
        let (dx, h) = (3, 2);
        let w = tape.constant(Tensor::zeros(&[4 * h, dx + h]));
        let b = tape.constant(Tensor::zeros(&[4 * h]));
        let xs: Vec<Var> = (0..4)
            .map(|i| tape.constant(Tensor::vector(vec![i as f64, -1.0, 2.5])))
            .collect();
        let (states, last) = lstm_encode(&mut tape, w, b, &xs, h).unwrap();
        for s in &states {
            assert_eq!(tape.value(*s).data(), &[0.0, 0.0]);
        }
        assert_eq!(last, *states.last().unwrap());
    }

    #[test]
    fn lstm_single_step_last_equals_first() {
        let mut tape = Tape::new();
        let w = tape.constant(
            Tensor::matrix(4, 2, vec![0.3, -0.2, 0.5, 0.1, -0.4, 0.7, 0.2, 0.9]).unwrap(),
        );
        let b = tape.constant(Tensor::vector(vec![0.0; 4]));
        let x = tape.constant(Tensor::vector(vec![1.0]));
        let (states, last) = lstm_encode(&mut tape, w, b, &[x], 1).unwrap();
        assert_eq!(states.len(), 1);
        assert_eq!(tape.value(states[0]), tape.value(last));
    }

    #[test]
    fn lstm_scalar_two_steps_matches_hand_recursion() {
        // d_x = d_h = 1; rows (i, f, g, o), columns (x, h)
        let wx = [0.5, -0.3, 0.8, 0.2];
        let wh = [0.1, 0.4, -0.6, 0.7];
        let bias = [0.05, 1.0, -0.1, 0.2];
        let xs_val = [0.7, -1.2];

        let mut h = 0.0f64;
        let mut c = 0.0f64;
        let mut expected = Vec::new();
        for &x in &xs_val {
            let i = sig(wx[0] * x + wh[0] * h + bias[0]);
            let f = sig(wx[1] * x + wh[1] * h + bias[1]);
            let g = (wx[2] * x + wh[2] * h + bias[2]).tanh();
            let o = sig(wx[3] * x + wh[3] * h + bias[3]);
            c = f * c + i * g;
            h = o * c.tanh();
            expected.push(h);
        }

        let mut tape = Tape::new();
        let wdata: Vec<f64> = (0..4).flat_map(|k| [wx[k], wh[k]]).collect();
        let w = tape.constant(Tensor::matrix(4, 2, wdata).unwrap());
        let b = tape.constant(Tensor::vector(bias.to_vec()));
        let xs: Vec<Var> = xs_val
            .iter()
            .map(|&x| tape.constant(Tensor::scalar(x)))
            .collect();
        let (states, _) = lstm_encode(&mut tape, w, b, &xs, 1).unwrap();
        for (s, e) in states.iter().zip(&expected) {
            assert!((tape.value(*s).item() - e).abs() < 1e-12);
        }
    }

    #[test]
    fn lstm_rejects_empty() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        let b = tape.constant(Tensor::zeros(&[4]));
        assert!(lstm_encode(&mut tape, w, b, &[], 1).is_err());
    }

    #[test]
    fn temporal_embed_examples() {
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::vector(vec![FRAC_PI_2]));
        let th = tape.constant(Tensor::vector(vec![0.0]));
        let v = temporal_embed(&mut tape, w, th, 1.0).unwrap();
        let d = tape.value(v).data();
        assert!(d[0].abs() < 1e-15 && (d[1] - 1.0).abs() < 1e-15);

        let w = tape.constant(Tensor::vector(vec![0.3, 1.0, 2.0, 5.0]));
        let th = tape.constant(Tensor::vector(vec![0.0; 4]));
        let v = temporal_embed(&mut tape, w, th, 0.0).unwrap();
        assert_eq!(
            tape.value(v).data(),
            &[0.5, 0.5, 0.5, 0.5, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn temporal_embed_bounded_with_unit_pairs() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let wv: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let tv: Vec<f64> = (0..4).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut tape = Tape::new();
        let w = tape.constant(Tensor::vector(wv.clone()));
        let th = tape.constant(Tensor::vector(tv.clone()));
        let v = temporal_embed(&mut tape, w, th, 3.7).unwrap();
        let d = tape.value(v).data();
        for k in 0..4 {
            let arg = wv[k] * 3.7 + tv[k];
            assert!((d[k] - 0.5 * arg.cos()).abs() < 1e-15);
            assert!((d[k + 4] - 0.5 * arg.sin()).abs() < 1e-15);
            assert!(d[k].abs() <= 0.5 && d[k + 4].abs() <= 0.5);
            assert!((d[k] * d[k] + d[k + 4] * d[k + 4] - 0.25).abs() < 1e-12);
        }
    }

    fn attention_inputs(tape: &mut Tape, m: usize) -> (Vec<Var>, Vec<Var>, Vec<Var>) {
        let xs = (0..m)
            .map(|i| tape.constant(Tensor::vector(vec![i as f64 + 0.5, 1.0])))
            .collect();
        let hs = (0..m)
            .map(|i| tape.constant(Tensor::vector(vec![0.1 * i as f64])))
            .collect();
        let ps = (0..m)
            .map(|_| tape.constant(Tensor::vector(vec![0.3, -0.2])))
            .collect();
        (xs, hs, ps)
    }

    #[test]
    fn temporal_attention_zero_projection_is_uniform() {
        let mut tape = Tape::new();
        let (xs, hs, ps) = attention_inputs(&mut tape, 4);
        let proj = tape.constant(Tensor::zeros(&[2, 3]));
        let beta = temporal_attention(&mut tape, &xs, &hs, &ps, proj).unwrap();
        assert_eq!(tape.value(beta).data(), &[0.25; 4]);

        let beta = temporal_attention(&mut tape, &xs[..1], &hs[..1], &ps[..1], proj).unwrap();
        assert_eq!(tape.value(beta).data(), &[1.0]);
        assert!(temporal_attention(&mut tape, &[], &[], &[], proj).is_err());
    }

    #[test]
    fn softmax_of_scores_matches_analytic() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::vector(vec![0.0, LN_2, 0.0]));
        let b = tape.softmax(a, 0).unwrap();
        let d = tape.value(b).data();
        for (x, e) in d.iter().zip([0.25, 0.5, 0.25]) {
            assert!((x - e).abs() < 1e-15);
        }
    }

    fn ontology_with(emb: Vec<f64>, freq: f64) -> Ontology {
        let d = emb.len();
        let provider = crate::embedding::EmbeddingProvider::from_table(
            d,
            [("dejected mood".to_string(), emb)],
            crate::embedding::UnknownPolicy::Error,
        )
        .unwrap();
        let mut o = Ontology::new(vec![Concept::new(
            "dejected mood",
            OntologyClass::Symptom,
            freq,
        )])
        .unwrap();
        o.attach_embeddings(&provider).unwrap();
        o
    }

    #[test]
    fn relevance_worked_example() {
        // (3,2,1,1,1) has norm exactly 4, so its cosine with e_1 is exactly 0.75
        let concept = vec![1.0, 0.0, 0.0, 0.0, 0.0];
        let entity = vec![3.0, 2.0, 1.0, 1.0, 1.0];
        let o = ontology_with(concept, 0.90);
        let rel = ontology_relevance(&entity, &o).unwrap();
        let sim = cosine(&entity, o.concepts()[0].embedding().unwrap()).unwrap();
        assert_eq!(sim, 0.75);
        assert_eq!(rel, vec![0.75 * 0.9]);
        assert_eq!(rel[0], 0.675);
    }

    #[test]
    fn relevance_edge_cases() {
        let o = ontology_with(vec![0.3, 0.4], 0.0);
        assert_eq!(ontology_relevance(&[1.0, 2.0], &o).unwrap(), vec![0.0]);
        let o = ontology_with(vec![0.3, 0.4], 0.6);
        let r = ontology_relevance(&[0.3, 0.4], &o).unwrap();
        assert!((r[0] - 0.6).abs() < 1e-15);
        assert!(ontology_relevance(&[0.0, 0.0], &o).is_err());
    }

    #[test]
    fn ontology_attention_cases() {
        let mut tape = Tape::new();
        // identical rows -> uniform
        let rel = tape.constant(Tensor::matrix(3, 2, vec![0.2, 0.5, 0.2, 0.5, 0.2, 0.5]).unwrap());
        let w1 = tape.constant(Tensor::matrix(2, 2, vec![0.3, -0.1, 0.8, 0.4]).unwrap());
        let b1 = tape.constant(Tensor::vector(vec![0.1, 0.0]));
        let w2 = tape.constant(Tensor::vector(vec![1.0, -2.0]));
        let beta = ontology_attention(&mut tape, rel, w1, b1, w2).unwrap();
        for &v in tape.value(beta).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        // single entity
        let rel1 = tape.constant(Tensor::matrix(1, 2, vec![0.9, 0.1]).unwrap());
        let beta = ontology_attention(&mut tape, rel1, w1, b1, w2).unwrap();
        assert_eq!(tape.value(beta).data(), &[1.0]);

        // mismatched J
        let rel3 = tape.constant(Tensor::matrix(1, 3, vec![0.9, 0.1, 0.0]).unwrap());
        assert!(matches!(
            ontology_attention(&mut tape, rel3, w1, b1, w2),
            Err(Error::ConceptCountMismatch {
                expected: 2,
                got: 3
            })
        ));
    }

    #[test]
    fn fuse_hand_example() {
        let mut tape = Tape::new();
        let hs: Vec<Var> = [1.0, 3.0]
            .iter()
            .map(|&h| tape.constant(Tensor::scalar(h)))
            .collect();
        let bt = tape.constant(Tensor::vector(vec![0.2, 0.8]));
        let bo = tape.constant(Tensor::vector(vec![0.6, 0.4]));
        let fusion = tape.constant(Tensor::vector(vec![0.25, 0.75]));
        let ow = tape.constant(Tensor::vector(vec![1.0]));
        let ob = tape.constant(Tensor::scalar(0.0));
        let out = fuse_and_predict(&mut tape, &hs, bt, bo, fusion, ow, ob).unwrap();
        // 0.25*0.2 + 0.75*0.6 = 0.5 ; 0.25*0.8 + 0.75*0.4 = 0.5 ; 0.5*1 + 0.5*3 = 2
        let w = tape.value(out.weights).data();
        assert!((w[0] - 0.5).abs() < 1e-15 && (w[1] - 0.5).abs() < 1e-15);
        assert!((tape.value(out.pooled).item() - 2.0).abs() < 1e-15);
        assert!((tape.value(out.prob).item() - sig(2.0)).abs() < 1e-15);
    }

    #[test]
    fn fusion_symmetric_and_equal_channels() {
        let mut tape = Tape::new();
        let hstar = tape.constant(Tensor::vector(vec![0.4, -0.3]));
        let fw = tape.constant(Tensor::zeros(&[2, 2]));
        let fb = tape.constant(Tensor::zeros(&[2]));
        let fusion = fusion_weights(&mut tape, hstar, fw, fb).unwrap();
        assert_eq!(tape.value(fusion).data(), &[0.5, 0.5]);

        let hs: Vec<Var> = [[1.0, 0.0], [0.0, 2.0]]
            .iter()
            .map(|h| tape.constant(Tensor::vector(h.to_vec())))
            .collect();
        let beta = tape.constant(Tensor::vector(vec![0.3, 0.7]));
        let ow = tape.constant(Tensor::vector(vec![0.5, 0.5]));
        let ob = tape.constant(Tensor::scalar(0.0));
        let pooled: Vec<Vec<f64>> = [[0.1, 0.9], [0.5, 0.5], [0.99, 0.01]]
            .iter()
            .map(|f| {
                let fv = tape.constant(Tensor::vector(f.to_vec()));
                let out = fuse_and_predict(&mut tape, &hs, beta, beta, fv, ow, ob).unwrap();
                tape.value(out.pooled).data().to_vec()
            })
            .collect();
        for p in &pooled[1..] {
            for (a, b) in p.iter().zip(&pooled[0]) {
                assert!((a - b).abs() < 1e-15);
            }
        }
    }
}
