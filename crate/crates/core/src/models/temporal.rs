//! Bidirectional GRU over per-frame feature sequences with per-frame heads.
//!
//! Gates follow the common `r, z, n` convention:
//! `n = tanh(W_in x + b_in + r ⊙ (W_hn h + b_hn))`, `h' = (1 − z) ⊙ n + z ⊙ h`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::nn::{self, Allocator, Linear};
use super::{ModelParams, Role};
use crate::datakit::SequenceSample;
use crate::error::{ensure, Result};
use crate::losses::{FrameModelOutput, OutputGrad, NUM_EXPR_CLASSES, VA_DIMS};
use crate::par;
use crate::seed::SeedStream;

/// Always bidirectional; `num_layers` stacked layers each see both directions of the
/// layer below.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TemporalModelSpec {
    pub input_dim: usize,
    pub hidden_size: usize,
    pub num_layers: usize,
    pub num_bins: usize,
}

impl Default for TemporalModelSpec {
    fn default() -> Self {
        TemporalModelSpec { input_dim: 32, hidden_size: 128, num_layers: 1, num_bins: 20 }
    }
}

impl TemporalModelSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.input_dim >= 1, "input_dim must be positive");
        ensure!(self.hidden_size >= 1, "hidden_size must be positive");
        ensure!(self.num_layers >= 1, "num_layers must be positive");
        ensure!(self.num_bins >= 2, "num_bins must be at least 2, got {}", self.num_bins);
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct Direction {
    ih: Linear,
    hh: Linear,
}

struct Step {
    h_prev: Vec<f32>,
    r: Vec<f32>,
    z: Vec<f32>,
    n: Vec<f32>,
    gh_n: Vec<f32>,
}

struct LayerTape {
    input: Vec<Vec<f32>>,
    steps: [Vec<Step>; 2],
}

/// Activations kept from a training forward pass over one sequence.
pub struct SequenceTape {
    layers: Vec<LayerTape>,
    top: Vec<Vec<f32>>,
}

#[derive(Clone, Debug)]
pub struct TemporalModel {
    pub spec: TemporalModelSpec,
    pub params: ModelParams,
    layers: Vec<[Direction; 2]>,
    expr_head: Linear,
    va_head: Linear,
}

pub fn build_temporal_model(spec: &TemporalModelSpec, seed: u64) -> Result<TemporalModel> {
    TemporalModel::new(spec, seed, Role::Teacher)
}

/// Per-frame outputs for every position of every sample, padded positions included.
pub fn temporal_forward(model: &TemporalModel, samples: &[SequenceSample]) -> Result<Vec<Vec<FrameModelOutput>>> {
    let seqs: Vec<&[Vec<f32>]> = samples.iter().map(|s| s.features.as_slice()).collect();
    model.forward(&seqs)
}

impl TemporalModel {
    pub fn new(spec: &TemporalModelSpec, seed: u64, role: Role) -> Result<Self> {
        spec.validate()?;
        let h = spec.hidden_size;
        let mut alloc = Allocator::default();
        let layers: Vec<[Direction; 2]> = (0..spec.num_layers)
            .map(|l| {
                let inp = if l == 0 { spec.input_dim } else { 2 * h };
                let mut dir = || Direction { ih: Linear::new(&mut alloc, inp, 3 * h), hh: Linear::new(&mut alloc, h, 3 * h) };
                [dir(), dir()]
            })
            .collect();
        let expr_head = Linear::new(&mut alloc, 2 * h, NUM_EXPR_CLASSES);
        let va_head = Linear::new(&mut alloc, 2 * h, VA_DIMS * spec.num_bins);

        let mut values = vec![0.0f32; alloc.len];
        let mut rng = SeedStream::new(seed).child("temporal-init").rng();
        let bound = 1.0 / (h as f32).sqrt();
        for dir in layers.iter().flatten() {
            for lin in [&dir.ih, &dir.hh] {
                for v in &mut values[lin.param_range()] {
                    *v = rng.random_range(-bound..bound);
                }
            }
        }
        let head_std = (1.0 / (2 * h) as f64).sqrt();
        expr_head.init(&mut values, head_std, &mut rng);
        va_head.init(&mut values, head_std, &mut rng);
        Ok(TemporalModel { spec: spec.clone(), params: ModelParams { role, values }, layers, expr_head, va_head })
    }

    pub fn num_params(&self) -> usize {
        self.params.values.len()
    }

    pub fn expr_head_range(&self) -> std::ops::Range<usize> {
        self.expr_head.param_range()
    }

    pub fn va_head_range(&self) -> std::ops::Range<usize> {
        self.va_head.param_range()
    }

    fn check(&self, seq: &[Vec<f32>]) -> Result<()> {
        ensure!(!seq.is_empty(), "empty sequence");
        for f in seq {
            ensure!(f.len() == self.spec.input_dim, "feature dim {} does not match model input {}", f.len(), self.spec.input_dim);
        }
        Ok(())
    }

    fn run_direction(&self, dir: &Direction, input: &[Vec<f32>], reverse: bool, keep: bool) -> (Vec<Vec<f32>>, Vec<Step>) {
        let p = &self.params.values;
        let hs = self.spec.hidden_size;
        let t_len = input.len();
        let mut h = vec![0.0f32; hs];
        let mut outs = vec![Vec::new(); t_len];
        let mut steps = Vec::with_capacity(if keep { t_len } else { 0 });
        for k in 0..t_len {
            let t = if reverse { t_len - 1 - k } else { k };
            let gi = dir.ih.forward(p, &input[t]);
            let gh = dir.hh.forward(p, &h);
            let r: Vec<f32> = (0..hs).map(|j| nn::sigmoid(gi[j] + gh[j])).collect();
            let z: Vec<f32> = (0..hs).map(|j| nn::sigmoid(gi[hs + j] + gh[hs + j])).collect();
            let gh_n = gh[2 * hs..].to_vec();
            let n: Vec<f32> = (0..hs).map(|j| (gi[2 * hs + j] + r[j] * gh_n[j]).tanh()).collect();
            let h_new: Vec<f32> = (0..hs).map(|j| (1.0 - z[j]) * n[j] + z[j] * h[j]).collect();
            if keep {
                steps.push(Step { h_prev: std::mem::replace(&mut h, h_new.clone()), r, z, n, gh_n });
            } else {
                h = h_new.clone();
            }
            outs[t] = h_new;
        }
        (outs, steps)
    }

    fn forward_one(&self, seq: &[Vec<f32>], keep: bool) -> (Vec<FrameModelOutput>, Option<SequenceTape>) {
        let p = &self.params.values;
        let mut x: Vec<Vec<f32>> = seq.to_vec();
        let mut layers = Vec::new();
        for dirs in &self.layers {
            let (fwd, s_f) = self.run_direction(&dirs[0], &x, false, keep);
            let (bwd, s_b) = self.run_direction(&dirs[1], &x, true, keep);
            let y: Vec<Vec<f32>> = fwd.into_iter().zip(bwd).map(|(mut a, b)| {
                a.extend(b);
                a
            }).collect();
            if keep {
                layers.push(LayerTape { input: std::mem::take(&mut x), steps: [s_f, s_b] });
            }
            x = y;
        }
        let outs = x
            .iter()
            .map(|f| FrameModelOutput {
                expr_logits: self.expr_head.forward(p, f).iter().map(|v| *v as f64).collect(),
                va_logits: self.va_head.forward(p, f).iter().map(|v| *v as f64).collect(),
            })
            .collect();
        (outs, keep.then_some(SequenceTape { layers, top: x }))
    }

    pub fn forward(&self, seqs: &[&[Vec<f32>]]) -> Result<Vec<Vec<FrameModelOutput>>> {
        seqs.iter().try_for_each(|s| self.check(s))?;
        Ok(par::map(seqs, |s| self.forward_one(s, false).0))
    }

    pub fn forward_train(&self, seqs: &[&[Vec<f32>]]) -> Result<(Vec<Vec<FrameModelOutput>>, Vec<SequenceTape>)> {
        seqs.iter().try_for_each(|s| self.check(s))?;
        let res = par::map(seqs, |s| {
            let (o, t) = self.forward_one(s, true);
            (o, t.expect("tape requested"))
        });
        Ok(res.into_iter().unzip())
    }

    /// Returns the gradient w.r.t. the direction's input sequence.
    fn backward_direction(
        &self,
        dir: &Direction,
        input: &[Vec<f32>],
        steps: &[Step],
        dout: &[Vec<f32>],
        reverse: bool,
        g: &mut [f32],
    ) -> Vec<Vec<f32>> {
        let p = &self.params.values;
        let hs = self.spec.hidden_size;
        let t_len = input.len();
        let mut dx = vec![Vec::new(); t_len];
        let mut dh = vec![0.0f32; hs];
        for k in (0..t_len).rev() {
            let t = if reverse { t_len - 1 - k } else { k };
            let s = &steps[k];
            dh.iter_mut().zip(&dout[t]).for_each(|(a, b)| *a += b);
            let mut dgi = vec![0.0f32; 3 * hs];
            let mut dgh = vec![0.0f32; 3 * hs];
            let mut dh_prev = vec![0.0f32; hs];
            for j in 0..hs {
                let dn = dh[j] * (1.0 - s.z[j]);
                let dz = dh[j] * (s.h_prev[j] - s.n[j]);
                dh_prev[j] = dh[j] * s.z[j];
                let dn_pre = dn * (1.0 - s.n[j] * s.n[j]);
                let dr = dn_pre * s.gh_n[j];
                let dr_pre = dr * s.r[j] * (1.0 - s.r[j]);
                let dz_pre = dz * s.z[j] * (1.0 - s.z[j]);
                dgi[j] = dr_pre;
                dgi[hs + j] = dz_pre;
                dgi[2 * hs + j] = dn_pre;
                dgh[j] = dr_pre;
                dgh[hs + j] = dz_pre;
                dgh[2 * hs + j] = dn_pre * s.r[j];
            }
            dx[t] = dir.ih.backward(p, &input[t], &dgi, g);
            let dhh = dir.hh.backward(p, &s.h_prev, &dgh, g);
            dh = dh_prev.iter().zip(dhh).map(|(a, b)| a + b).collect();
        }
        dx
    }

    fn backward_one(&self, tape: &SequenceTape, grads: &[OutputGrad]) -> Vec<f32> {
        let p = &self.params.values;
        let hs = self.spec.hidden_size;
        let mut g = vec![0.0f32; p.len()];
        let mut dy: Vec<Vec<f32>> = tape
            .top
            .iter()
            .zip(grads)
            .map(|(f, og)| {
                let ge: Vec<f32> = og.expr_logits.iter().map(|v| *v as f32).collect();
                let gv: Vec<f32> = og.va_logits.iter().map(|v| *v as f32).collect();
                let mut d = self.expr_head.backward(p, f, &ge, &mut g);
                d.iter_mut().zip(self.va_head.backward(p, f, &gv, &mut g)).for_each(|(a, b)| *a += b);
                d
            })
            .collect();
        for (dirs, lt) in self.layers.iter().zip(&tape.layers).rev() {
            let d_f: Vec<Vec<f32>> = dy.iter().map(|d| d[..hs].to_vec()).collect();
            let d_b: Vec<Vec<f32>> = dy.iter().map(|d| d[hs..].to_vec()).collect();
            let dx_f = self.backward_direction(&dirs[0], &lt.input, &lt.steps[0], &d_f, false, &mut g);
            let dx_b = self.backward_direction(&dirs[1], &lt.input, &lt.steps[1], &d_b, true, &mut g);
            dy = dx_f.into_iter().zip(dx_b).map(|(a, b)| a.iter().zip(&b).map(|(x, y)| x + y).collect()).collect();
        }
        g
    }

    /// `grads[s][t]` is the loss gradient for frame `t` of sequence `s`.
    pub fn backward(&self, tapes: &[SequenceTape], grads: &[Vec<OutputGrad>]) -> Result<Vec<f32>> {
        ensure!(tapes.len() == grads.len(), "{} tapes but {} gradient sequences", tapes.len(), grads.len());
        for (t, g) in tapes.iter().zip(grads) {
            ensure!(t.top.len() == g.len(), "sequence has {} frames but {} gradients", t.top.len(), g.len());
        }
        let pairs: Vec<(&SequenceTape, &Vec<OutputGrad>)> = tapes.iter().zip(grads).collect();
        let parts = par::map(&pairs, |(t, g)| self.backward_one(t, g));
        Ok(par::sum_ordered(&parts, self.num_params()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::{supervision_loss_grad, DistillationConfig, ExprLabel, InstanceLabels, TaskId, VaLabel};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn spec() -> TemporalModelSpec {
        TemporalModelSpec { input_dim: 5, hidden_size: 6, num_layers: 2, num_bins: 4 }
    }

    fn random_seq(len: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
        (0..len).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    #[test]
    fn shapes_and_determinism() {
        let m = build_temporal_model(&TemporalModelSpec::default(), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seqs: Vec<Vec<Vec<f32>>> = (0..3).map(|_| random_seq(32, 32, &mut rng)).collect();
        let refs: Vec<&[Vec<f32>]> = seqs.iter().map(|s| s.as_slice()).collect();
        let out = m.forward(&refs).unwrap();
        assert_eq!(out.len(), 3);
        assert!(out.iter().all(|s| s.len() == 32));
        assert_eq!(out[0][0].va_logits.len(), 40);
        assert_eq!(out, m.forward(&refs).unwrap());
        let again = build_temporal_model(&TemporalModelSpec::default(), 1).unwrap();
        assert_eq!(again.params, m.params);
    }

    #[test]
    fn dim_mismatch_is_rejected() {
        let m = build_temporal_model(&spec(), 0).unwrap();
        let seq = vec![vec![0.0; 4]; 3];
        assert!(m.forward(&[seq.as_slice()]).is_err());
    }

    #[test]
    fn reversing_input_changes_outputs() {
        let m = build_temporal_model(&spec(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let seq = random_seq(8, 5, &mut rng);
        let mut rev = seq.clone();
        rev.reverse();
        let a = m.forward(&[seq.as_slice()]).unwrap();
        let mut b = m.forward(&[rev.as_slice()]).unwrap();
        b[0].reverse();
        assert_ne!(a, b);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut m = build_temporal_model(&spec(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let seqs: Vec<Vec<Vec<f32>>> = (0..2).map(|_| random_seq(5, 5, &mut rng)).collect();
        let refs: Vec<&[Vec<f32>]> = seqs.iter().map(|s| s.as_slice()).collect();
        let labels: Vec<InstanceLabels> = (0..10)
            .map(|i| {
                InstanceLabels::both(
                    ExprLabel::new(i % 7).unwrap(),
                    VaLabel::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).unwrap(),
                )
            })
            .collect();
        let cfg = DistillationConfig { num_bins: 4, ..Default::default() };
        let loss_of = |m: &TemporalModel| {
            let out: Vec<FrameModelOutput> = m.forward(&refs).unwrap().into_iter().flatten().collect();
            supervision_loss_grad(TaskId::ExprVa, &labels, &out, &cfg).unwrap()
        };
        let (out, tapes) = m.forward_train(&refs).unwrap();
        let flat: Vec<FrameModelOutput> = out.into_iter().flatten().collect();
        let lg = supervision_loss_grad(TaskId::ExprVa, &labels, &flat, &cfg).unwrap();
        let grads: Vec<Vec<OutputGrad>> = lg.grads.chunks(5).map(|c| c.to_vec()).collect();
        let g = m.backward(&tapes, &grads).unwrap();
        for i in (0..g.len()).step_by(7) {
            let h = 1e-2f32;
            let orig = m.params.values[i];
            m.params.values[i] = orig + h;
            let lp = loss_of(&m).value;
            m.params.values[i] = orig - h;
            let lm = loss_of(&m).value;
            m.params.values[i] = orig;
            let num = (lp - lm) / (2.0 * h as f64);
            let ana = g[i] as f64;
            let err = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-2);
            assert!(err < 2e-2, "param {i}: numeric {num} analytic {ana}");
        }
    }

    #[test]
    fn head_independence() {
        let mut m = build_temporal_model(&spec(), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seq = random_seq(4, 5, &mut rng);
        let before = m.forward(&[seq.as_slice()]).unwrap();
        for i in m.expr_head_range() {
            m.params.values[i] += 0.3;
        }
        let after = m.forward(&[seq.as_slice()]).unwrap();
        for (a, b) in before[0].iter().zip(&after[0]) {
            assert_eq!(a.va_logits, b.va_logits);
            assert_ne!(a.expr_logits, b.expr_logits);
        }
    }
}
