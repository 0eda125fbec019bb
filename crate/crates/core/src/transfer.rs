//! Memory banks, the distillation loss and the joint training objective.
//!
//! Both loss terms are means over the batch axis and sums over time, sources
//! and elements. The default `beta` of 0.1 assumes exactly this reduction.

use std::fmt::Write as _;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::network::SequenceOutput;
use crate::tensor::Tensor;

pub const DEFAULT_BETA: f64 = 0.1;
/// Range in which the objective is known to be insensitive to `beta`.
pub const ROBUST_BETA: (f64, f64) = (1e-3, 1.0);

/// Frozen source memories indexed `[step][layer][source]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    steps: usize,
    layers: usize,
    sources: usize,
    memories: Vec<Tensor>,
}

impl MemoryBank {
    /// `memories` is laid out step-major, then layer, then source.
    pub fn new(steps: usize, layers: usize, sources: usize, memories: Vec<Tensor>) -> Result<Self> {
        if memories.len() != steps * layers * sources {
            return Err(Error::config(format!(
                "memory bank of {steps}x{layers}x{sources} needs {} tensors, got {}",
                steps * layers * sources,
                memories.len()
            )));
        }
        if let Some(first) = memories.first() {
            if let Some(bad) = memories.iter().find(|t| t.shape() != first.shape()) {
                return Err(Error::shape("memory bank", first.shape(), bad.shape()));
            }
        }
        Ok(MemoryBank {
            steps,
            layers,
            sources,
            memories,
        })
    }

    /// A bank with no sources, as used by from-scratch and finetune training.
    pub fn empty(steps: usize, layers: usize) -> Self {
        MemoryBank {
            steps,
            layers,
            sources: 0,
            memories: Vec::new(),
        }
    }

    pub fn num_steps(&self) -> usize {
        self.steps
    }

    pub fn num_layers(&self) -> usize {
        self.layers
    }

    pub fn num_sources(&self) -> usize {
        self.sources
    }

    pub fn get(&self, step: usize, layer: usize, source: usize) -> &Tensor {
        assert!(step < self.steps && layer < self.layers && source < self.sources);
        &self.memories[(step * self.layers + layer) * self.sources + source]
    }

    /// Checks the bank against a network unrolled for `steps` steps on a
    /// batch of `batch` with per-sample state shape `state`.
    pub fn check_layout(
        &self,
        steps: usize,
        layers: usize,
        sources: usize,
        batch: usize,
        state: &[usize; 3],
    ) -> Result<()> {
        let have = [self.steps, self.layers, self.sources];
        let want = [steps, layers, sources];
        if have != want {
            return Err(Error::shape("memory bank [steps, layers, sources]", &have, &want));
        }
        let shape = [batch, state[0], state[1], state[2]];
        match self.memories.first() {
            Some(t) if t.shape() != shape => Err(Error::shape("memory bank entry", t.shape(), &shape)),
            _ => Ok(()),
        }
    }
}

/// Loss terms of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub prediction_loss: f64,
    /// One entry per layer; empty when no sources are used.
    pub distill_loss: Vec<f64>,
    pub beta: f64,
    pub total: f64,
}

impl LossReport {
    /// Combines the terms the same way the tape does.
    pub fn compose(prediction_loss: f64, distill_loss: Vec<f64>, beta: f64) -> Result<Self> {
        check_beta(beta)?;
        let total = match distill_loss.split_first() {
            None => prediction_loss,
            Some((first, rest)) => prediction_loss + beta * rest.iter().fold(*first, |a, b| a + b),
        };
        Ok(LossReport {
            prediction_loss,
            distill_loss,
            beta,
            total,
        })
    }

    pub fn distill_sum(&self) -> f64 {
        self.distill_loss.iter().sum()
    }

    /// `pred_loss=.. [distill_k0=.. .. distill_sum=.. beta=..] total=..`
    pub fn to_kv(&self) -> String {
        let mut s = format!("pred_loss={}", self.prediction_loss);
        if !self.distill_loss.is_empty() {
            for (k, d) in self.distill_loss.iter().enumerate() {
                let _ = write!(s, " distill_k{k}={d}");
            }
            let _ = write!(s, " distill_sum={} beta={}", self.distill_sum(), self.beta);
        }
        let _ = write!(s, " total={}", self.total);
        s
    }
}

pub fn check_beta(beta: f64) -> Result<()> {
    if !beta.is_finite() || beta < 0.0 {
        return Err(Error::config(format!("beta must be a finite non-negative number, got {beta}")));
    }
    Ok(())
}

/// Advisory message when `beta` leaves the robust band.
pub fn beta_warning(beta: f64) -> Option<String> {
    let (lo, hi) = ROBUST_BETA;
    (beta < lo || beta > hi).then(|| format!("beta {beta} is outside the robust range [{lo}, {hi}]"))
}

fn batch_scale(t: &Tensor) -> f64 {
    if t.rank() == 4 {
        1.0 / t.shape()[0] as f64
    } else {
        1.0
    }
}

/// Per-layer distillation terms on the tape. Both arguments are indexed
/// `[step][layer][source]`; bank entries must be gradient-stopped.
pub fn distill_terms(tape: &mut Tape, distilled: &[Vec<Vec<Var>>], bank: &[Vec<Vec<Var>>]) -> Result<Vec<Var>> {
    let dims = |x: &[Vec<Vec<Var>>]| {
        [
            x.len(),
            x.first().map_or(0, Vec::len),
            x.first().and_then(|l| l.first()).map_or(0, Vec::len),
        ]
    };
    let (dd, bd) = (dims(distilled), dims(bank));
    if dd != bd
        || distilled
            .iter()
            .zip(bank)
            .any(|(a, b)| a.len() != b.len() || a.iter().zip(b).any(|(x, y)| x.len() != y.len()))
    {
        return Err(Error::shape("distilled vs bank [steps, layers, sources]", &dd, &bd));
    }
    let [steps, layers, sources] = dd;
    if sources == 0 {
        return Ok(Vec::new());
    }
    let mut out = Vec::with_capacity(layers);
    for k in 0..layers {
        let mut terms = Vec::with_capacity(steps * sources);
        for t in 0..steps {
            for m in 0..sources {
                let b = bank[t][k][m];
                if tape.requires_grad(b) {
                    return Err(Error::Usage("memory bank entries must be gradient-stopped".into()));
                }
                let scale = batch_scale(tape.value(b));
                terms.push(tape.squared_distance(distilled[t][k][m], b, scale)?);
            }
        }
        out.push(tape.sum_scalars(&terms)?);
    }
    Ok(out)
}

/// Per-layer distillation loss on plain tensors; `distilled` is indexed
/// `[step][layer][source]` like the bank.
pub fn distill_loss(distilled: &[Vec<Vec<Tensor>>], bank: &MemoryBank) -> Result<Vec<f64>> {
    let mut tape = Tape::no_grad();
    let mut dv = Vec::with_capacity(distilled.len());
    for layers in distilled {
        dv.push(
            layers
                .iter()
                .map(|ms| ms.iter().map(|c| tape.constant(c.clone())).collect())
                .collect::<Vec<Vec<Var>>>(),
        );
    }
    if dv.len() != bank.num_steps()
        || dv.iter().any(|l| l.len() != bank.num_layers() || l.iter().any(|m| m.len() != bank.num_sources()))
    {
        return Err(Error::config(format!(
            "distilled memories do not match a bank of {}x{}x{}",
            bank.num_steps(),
            bank.num_layers(),
            bank.num_sources()
        )));
    }
    let mut bv = Vec::with_capacity(bank.num_steps());
    for t in 0..bank.num_steps() {
        bv.push(
            (0..bank.num_layers())
                .map(|k| {
                    (0..bank.num_sources())
                        .map(|m| tape.constant(bank.get(t, k, m).clone()))
                        .collect()
                })
                .collect::<Vec<Vec<Var>>>(),
        );
    }
    let terms = distill_terms(&mut tape, &dv, &bv)?;
    Ok(terms.into_iter().map(|v| tape.value(v).data()[0]).collect())
}

/// Prediction term on the tape: `predictions[i]` is compared with `targets[i]`.
pub fn prediction_term(tape: &mut Tape, predictions: &[Var], targets: &[Var]) -> Result<Var> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(Error::config(format!(
            "{} predictions for {} target frames",
            predictions.len(),
            targets.len()
        )));
    }
    let mut terms = Vec::with_capacity(predictions.len());
    for (&p, &x) in predictions.iter().zip(targets) {
        let scale = batch_scale(tape.value(x));
        terms.push(tape.squared_distance(p, x, scale)?);
    }
    tape.sum_scalars(&terms)
}

/// Builds the full objective for an unrolled network. `frames` is the
/// `[N, T, P, H, W]` clip the network consumed; predictions are scored against
/// frames `1..T`.
pub fn objective(tape: &mut Tape, output: &SequenceOutput, frames: &Tensor, beta: f64) -> Result<(Var, LossReport)> {
    check_beta(beta)?;
    let mut targets = Vec::with_capacity(output.predictions.len());
    for t in 0..output.predictions.len() {
        targets.push(tape.constant(crate::data::frame_at(frames, t + 1)?));
    }
    let pred = prediction_term(tape, &output.predictions, &targets)?;
    let distill = if output.bank.is_empty() {
        Vec::new()
    } else {
        let distilled: Vec<Vec<Vec<Var>>> = output
            .steps
            .iter()
            .map(|layers| layers.iter().map(|s| s.distilled.clone()).collect())
            .collect();
        distill_terms(tape, &distilled, &output.bank)?
    };
    let total = if distill.is_empty() {
        pred
    } else {
        let sum = tape.sum_scalars(&distill)?;
        let weighted = tape.scale(sum, beta);
        tape.add(pred, weighted)?
    };
    let report = LossReport {
        prediction_loss: tape.value(pred).data()[0],
        distill_loss: distill.iter().map(|&v| tape.value(v).data()[0]).collect(),
        beta,
        total: tape.value(total).data()[0],
    };
    Ok((total, report))
}

/// The joint objective on plain tensors.
pub fn final_loss(
    predictions: &[Tensor],
    targets: &[Tensor],
    distilled: &[Vec<Vec<Tensor>>],
    bank: Option<&MemoryBank>,
    beta: f64,
) -> Result<LossReport> {
    check_beta(beta)?;
    let mut tape = Tape::no_grad();
    let p: Vec<Var> = predictions.iter().map(|t| tape.constant(t.clone())).collect();
    let x: Vec<Var> = targets.iter().map(|t| tape.constant(t.clone())).collect();
    let pred = prediction_term(&mut tape, &p, &x)?;
    let distill = match bank {
        Some(b) if b.num_sources() > 0 => distill_loss(distilled, b)?,
        _ => Vec::new(),
    };
    LossReport::compose(tape.value(pred).data()[0], distill, beta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{CellGeometry, CellState, CellVars, TmuParams};
    use crate::params::ParamStore;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(v: f64) -> Tensor {
        Tensor::new(&[1], vec![v]).unwrap()
    }

    /// Brute-force oracle: Σ_m Σ_t Σ_i (a−b)².
    fn brute(distilled: &[Vec<Vec<Tensor>>], bank: &MemoryBank, layer: usize) -> f64 {
        let mut acc = 0.0;
        for (t, layers) in distilled.iter().enumerate() {
            for (m, c) in layers[layer].iter().enumerate() {
                for (a, b) in c.data().iter().zip(bank.get(t, layer, m).data()) {
                    acc += (a - b) * (a - b);
                }
            }
        }
        acc
    }

    #[test]
    fn identical_memories_give_zero() {
        let bank = MemoryBank::new(2, 1, 2, vec![s(0.3), s(-1.0), s(2.0), s(0.0)]).unwrap();
        let d = vec![vec![vec![s(0.3), s(-1.0)]], vec![vec![s(2.0), s(0.0)]]];
        assert_eq!(distill_loss(&d, &bank).unwrap(), vec![0.0]);
    }

    #[test]
    fn one_element_off_by_two() {
        let bank = MemoryBank::new(1, 1, 1, vec![Tensor::zeros(&[3])]).unwrap();
        let d = vec![vec![vec![Tensor::new(&[3], vec![0.0, 2.0, 0.0]).unwrap()]]];
        assert_eq!(distill_loss(&d, &bank).unwrap(), vec![4.0]);
    }

    #[test]
    fn two_sources_two_steps() {
        let bank = MemoryBank::new(2, 1, 2, vec![s(0.0); 4]).unwrap();
        let d = vec![vec![vec![s(1.0), s(1.0)]], vec![vec![s(0.0), s(0.0)]]];
        let got = distill_loss(&d, &bank).unwrap();
        assert_eq!(got, vec![brute(&d, &bank, 0)]);
        assert_eq!(got, vec![2.0]);
    }

    #[test]
    fn report_arithmetic() {
        let r = LossReport::compose(2.0, vec![1.0, 3.0], 0.1).unwrap();
        assert!((r.total - 2.4).abs() < 1e-12);
        assert_eq!(LossReport::compose(2.0, vec![1.0, 3.0], 0.0).unwrap().total, 2.0);
        assert!(matches!(LossReport::compose(2.0, vec![1.0], -0.1), Err(Error::Config(_))));
        assert_eq!(r.to_kv(), format!("pred_loss=2 distill_k0=1 distill_k1=3 distill_sum=4 beta=0.1 total={}", r.total));
        assert_eq!(LossReport::compose(1.5, vec![], 0.1).unwrap().to_kv(), "pred_loss=1.5 total=1.5");
    }

    #[test]
    fn perfect_everything_is_zero() {
        let frames = vec![Tensor::ones(&[2, 1, 2, 2]); 3];
        let bank = MemoryBank::new(1, 1, 1, vec![s(0.5)]).unwrap();
        let r = final_loss(&frames, &frames, &[vec![vec![s(0.5)]]], Some(&bank), 0.1).unwrap();
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn prediction_term_is_batch_mean_and_time_sum() {
        let p = vec![Tensor::zeros(&[2, 1, 1, 2]), Tensor::zeros(&[2, 1, 1, 2])];
        let x = vec![
            Tensor::new(&[2, 1, 1, 2], vec![1.0, 1.0, 0.0, 0.0]).unwrap(),
            Tensor::new(&[2, 1, 1, 2], vec![0.0, 0.0, 0.0, 2.0]).unwrap(),
        ];
        // (1+1+0+0)/2 + (0+0+0+4)/2
        assert_eq!(final_loss(&p, &x, &[], None, 0.1).unwrap().prediction_loss, 3.0);
    }

    #[test]
    fn mismatched_indices_are_rejected() {
        let bank = MemoryBank::new(2, 1, 2, vec![s(0.0); 4]).unwrap();
        let d = vec![vec![vec![s(1.0)]], vec![vec![s(0.0)]]];
        assert!(distill_loss(&d, &bank).is_err());
        assert!(MemoryBank::new(2, 1, 2, vec![s(0.0); 3]).is_err());
        assert!(MemoryBank::new(1, 1, 2, vec![s(0.0), Tensor::zeros(&[2])]).is_err());
    }

    #[test]
    fn bank_must_be_gradient_stopped() {
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        let id = store.insert("c", s(1.0)).unwrap();
        let live = tape.param(&store, id);
        let d = tape.constant(s(0.0));
        assert!(distill_terms(&mut tape, &[vec![vec![d]]], &[vec![vec![live]]]).is_err());
    }

    #[test]
    fn per_source_separability() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        use rand::Rng;
        let mut rand_t = || Tensor::from_fn(&[2, 3], |_| rng.gen_range(-1.0..1.0));
        let (steps, sources) = (3, 3);
        let mut bank_t = Vec::new();
        let mut d = Vec::new();
        for _ in 0..steps {
            let mut row = Vec::new();
            for _ in 0..sources {
                bank_t.push(rand_t());
                row.push(rand_t());
            }
            d.push(vec![row]);
        }
        let bank = MemoryBank::new(steps, 1, sources, bank_t).unwrap();
        let full = distill_loss(&d, &bank).unwrap()[0];
        let per_source: Vec<f64> = (0..sources)
            .map(|m| {
                let mut acc = 0.0;
                for (t, row) in d.iter().enumerate() {
                    for (a, b) in row[0][m].data().iter().zip(bank.get(t, 0, m).data()) {
                        acc += (a - b) * (a - b);
                    }
                }
                acc
            })
            .collect();
        for m in 0..sources {
            let mut zeroed = d.clone();
            for (t, row) in zeroed.iter_mut().enumerate() {
                row[0][m] = bank.get(t, 0, m).clone();
            }
            let without = distill_loss(&zeroed, &bank).unwrap()[0];
            assert!((full - without - per_source[m]).abs() < 1e-12);
        }
    }

    /// Distillers trained against two different constant banks learn each
    /// bank, not their average.
    #[test]
    fn distilled_memories_do_not_collapse_to_the_mean() {
        let geom = CellGeometry {
            in_channels: 1,
            channels: 2,
            height: 3,
            width: 3,
            filter_size: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let params = TmuParams::init(&mut store, "l", geom, 2, &mut rng).unwrap();
        let shape = [1, 2, 3, 3];
        let targets = [Tensor::full(&shape, 0.8), Tensor::full(&shape, -0.6)];
        use rand::Rng;
        let x = Tensor::from_fn(&[1, 1, 3, 3], |_| rng.gen_range(-1.0..1.0));
        let prev = CellState::zeros(&shape);
        let run = |store: &ParamStore, grad: bool| {
            let mut tape = if grad { Tape::new() } else { Tape::no_grad() };
            let xv = tape.constant(x.clone());
            let pv = CellVars::constant(&mut tape, &prev);
            let bv: Vec<Var> = targets.iter().map(|t| tape.constant(t.clone())).collect();
            let step = crate::cells::tmu_forward(&mut tape, store, xv, &pv, &params, Some(&bv)).unwrap();
            let terms = distill_terms(&mut tape, &[vec![step.distilled.clone()]], &[vec![bv]]).unwrap();
            let loss = terms[0];
            let out: Vec<Tensor> = step.distilled.iter().map(|&v| tape.value(v).clone()).collect();
            (tape.value(loss).data()[0], if grad { Some(tape.backward(loss).unwrap()) } else { None }, out)
        };
        let (initial, _, _) = run(&store, false);
        for _ in 0..300 {
            let (_, g, _) = run(&store, true);
            for (id, g) in g.unwrap() {
                let p = store.get_mut(id);
                p.data_mut().iter_mut().zip(g.data()).for_each(|(p, g)| *p -= 0.05 * g);
            }
        }
        let (fin, _, out) = run(&store, false);
        assert!(fin < 1e-3 * initial, "loss {initial} -> {fin}");
        let mean = 0.1;
        for (o, t) in out.iter().zip(&targets) {
            let to_target = o.data().iter().zip(t.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let to_mean = o.data().iter().map(|a| (a - mean).abs()).fold(f64::INFINITY, f64::min);
            assert!(to_target < 0.05 && to_mean > 0.5, "target gap {to_target}, mean gap {to_mean}");
        }
    }

    #[test]
    fn beta_band_warning() {
        assert!(beta_warning(0.1).is_none());
        assert!(beta_warning(5.0).is_some());
        assert!(beta_warning(1e-4).is_some());
        assert!(check_beta(f64::NAN).is_err());
    }

    proptest! {
        #[test]
        fn total_is_monotone_in_beta(
            pred in 0.0f64..10.0,
            d in proptest::collection::vec(0.0f64..10.0, 1..5),
            b1 in 0.0f64..2.0,
            b2 in 0.0f64..2.0,
        ) {
            let (lo, hi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
            let a = LossReport::compose(pred, d.clone(), lo).unwrap();
            let b = LossReport::compose(pred, d, hi).unwrap();
            prop_assert!(a.total <= b.total);
            prop_assert!((a.total - (a.prediction_loss + lo * a.distill_sum())).abs() <= 1e-12 * a.total.max(1.0));
        }
    }
}
