//! ConvLSTM and Transferable Memory Unit cells.
//!
//! Both cells share the same gate equations up to the intermediate memory
//! `C̃_t = f ⊙ C_{t−1} + i ⊙ g`. A ConvLSTM uses `C̃_t` as its new memory; a TMU
//! additionally maps `C̃_t` through one distiller per source model
//! (`Ĉ^m = LayerNorm(W^m_distill * C̃_t)`) and blends the results back in with
//! per-source transfer gates:
//!
//! ```text
//! a^m = σ(W_xm * X + W_hm * H_{t−1} + b_m)
//! C_t = C̃_t + Σ_m (a^m ⊙ Ĉ^m + (1 − a^m) ⊙ C̃_t)
//! ```
//!
//! The hidden state is `H_t = o_t ⊙ tanh(C_t)` in both cases, with the output
//! gate peeking at the final `C_t`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub const LN_EPSILON: f64 = 1e-5;

/// Shape of one recurrent layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellGeometry {
    pub in_channels: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filter_size: usize,
}

impl CellGeometry {
    pub fn state_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn validate(&self) -> Result<()> {
        if self.filter_size % 2 == 0 {
            return Err(Error::config(format!("filter size must be odd, got {}", self.filter_size)));
        }
        if [self.in_channels, self.channels, self.height, self.width, self.filter_size].contains(&0) {
            return Err(Error::config(format!("degenerate cell geometry {self:?}")));
        }
        Ok(())
    }
}

/// A convolution kernel living in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParam {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl ConvParam {
    fn init<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        bias_name: Option<&str>,
        shape: [usize; 4],
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let weight = store.insert(name, Tensor::from_fn(&shape, |_| rng.gen_range(-bound..bound)))?;
        let bias = bias_name
            .map(|b| store.insert(b, Tensor::zeros(&[shape[0]])))
            .transpose()?;
        Ok(ConvParam { weight, bias })
    }

    fn apply(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv2d(x, w, b)
    }
}

/// Gate kernels, peepholes and biases of a ConvLSTM layer. The input kernels
/// carry the gate biases (`b_g`, `b_i`, `b_f`, `b_o`); the hidden kernels are
/// bias-free.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvLstmParams {
    pub geometry: CellGeometry,
    pub w_xg: ConvParam,
    pub w_xi: ConvParam,
    pub w_xf: ConvParam,
    pub w_xo: ConvParam,
    pub w_hg: ConvParam,
    pub w_hi: ConvParam,
    pub w_hf: ConvParam,
    pub w_ho: ConvParam,
    pub w_ci: ParamId,
    pub w_cf: ParamId,
    pub w_co: ParamId,
}

impl ConvLstmParams {
    /// Registers a freshly initialized layer under `prefix`. Convolution
    /// weights are uniform in `±sqrt(1/fan_in)`; biases and peepholes start at zero.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, geometry: CellGeometry, rng: &mut R) -> Result<Self> {
        geometry.validate()?;
        let CellGeometry {
            in_channels: ci,
            channels: c,
            filter_size: k,
            ..
        } = geometry;
        let mut conv = |gate: &str, from: &str, inputs: usize, with_bias: bool| {
            let bias_name = format!("{prefix}.b_{gate}");
            ConvParam::init(
                store,
                &format!("{prefix}.w_{from}{gate}"),
                with_bias.then_some(bias_name.as_str()),
                [c, inputs, k, k],
                rng,
            )
        };
        let w_xg = conv("g", "x", ci, true)?;
        let w_xi = conv("i", "x", ci, true)?;
        let w_xf = conv("f", "x", ci, true)?;
        let w_xo = conv("o", "x", ci, true)?;
        let w_hg = conv("g", "h", c, false)?;
        let w_hi = conv("i", "h", c, false)?;
        let w_hf = conv("f", "h", c, false)?;
        let w_ho = conv("o", "h", c, false)?;
        let shape = geometry.state_shape();
        let w_ci = store.insert(format!("{prefix}.w_ci"), Tensor::zeros(&shape))?;
        let w_cf = store.insert(format!("{prefix}.w_cf"), Tensor::zeros(&shape))?;
        let w_co = store.insert(format!("{prefix}.w_co"), Tensor::zeros(&shape))?;
        Ok(ConvLstmParams {
            geometry,
            w_xg,
            w_xi,
            w_xf,
            w_xo,
            w_hg,
            w_hi,
            w_hf,
            w_ho,
            w_ci,
            w_cf,
            w_co,
        })
    }
}

/// Per-source memory distiller: bias-free 1×1 convolution then layer norm.
#[derive(Clone, Debug, PartialEq)]
pub struct Distiller {
    pub weight: ParamId,
    pub gain: ParamId,
    pub shift: ParamId,
}

/// Per-source transfer gate kernels; `w_x` carries the bias `b_m`.
#[derive(Clone, Debug, PartialEq)]
pub struct TransferGate {
    pub w_x: ConvParam,
    pub w_h: ConvParam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmuParams {
    pub base: ConvLstmParams,
    pub distillers: Vec<Distiller>,
    pub gates: Vec<TransferGate>,
}

impl TmuParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        geometry: CellGeometry,
        num_sources: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let base = ConvLstmParams::init(store, prefix, geometry, rng)?;
        let CellGeometry {
            in_channels: ci,
            channels: c,
            filter_size: k,
            ..
        } = geometry;
        let mut distillers = Vec::with_capacity(num_sources);
        let mut gates = Vec::with_capacity(num_sources);
        for m in 0..num_sources {
            let d = ConvParam::init(store, &format!("{prefix}.distill{m}.w"), None, [c, c, 1, 1], rng)?;
            distillers.push(Distiller {
                weight: d.weight,
                gain: store.insert(format!("{prefix}.distill{m}.gain"), Tensor::ones(&[c]))?,
                shift: store.insert(format!("{prefix}.distill{m}.shift"), Tensor::zeros(&[c]))?,
            });
            let bias = format!("{prefix}.gate{m}.b");
            gates.push(TransferGate {
                w_x: ConvParam::init(store, &format!("{prefix}.gate{m}.w_x"), Some(&bias), [c, ci, k, k], rng)?,
                w_h: ConvParam::init(store, &format!("{prefix}.gate{m}.w_h"), None, [c, c, k, k], rng)?,
            });
        }
        Ok(TmuParams {
            base,
            distillers,
            gates,
        })
    }

    pub fn num_sources(&self) -> usize {
        self.distillers.len()
    }
}

/// Hidden and memory state of one layer, as plain tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl CellState {
    pub fn zeros(shape: &[usize]) -> Self {
        CellState {
            h: Tensor::zeros(shape),
            c: Tensor::zeros(shape),
        }
    }
}

/// Hidden and memory state of one layer, as tape nodes.
#[derive(Clone, Copy, Debug)]
pub struct CellVars {
    pub h: Var,
    pub c: Var,
}

impl CellVars {
    pub fn constant(tape: &mut Tape, state: &CellState) -> Self {
        CellVars {
            h: tape.constant(state.h.clone()),
            c: tape.constant(state.c.clone()),
        }
    }

    pub fn to_state(self, tape: &Tape) -> CellState {
        CellState {
            h: tape.value(self.h).clone(),
            c: tape.value(self.c).clone(),
        }
    }
}

/// Tape nodes produced by one TMU step.
#[derive(Clone, Debug)]
pub struct TmuStepVars {
    pub state: CellVars,
    pub distilled: Vec<Var>,
    pub gates: Vec<Var>,
    pub intermediate: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TmuStepOutput {
    pub state: CellState,
    pub distilled: Vec<Tensor>,
    pub gates: Vec<Tensor>,
    pub intermediate: Tensor,
}

impl TmuStepVars {
    pub fn to_output(&self, tape: &Tape) -> TmuStepOutput {
        TmuStepOutput {
            state: self.state.to_state(tape),
            distilled: self.distilled.iter().map(|&v| tape.value(v).clone()).collect(),
            gates: self.gates.iter().map(|&v| tape.value(v).clone()).collect(),
            intermediate: tape.value(self.intermediate).clone(),
        }
    }
}

fn spatial(t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [_, h, w] | [_, _, h, w] => Ok((h, w)),
        _ => Err(Error::Usage(format!("expected an image tensor, got {:?}", t.shape()))),
    }
}

fn channels(t: &Tensor) -> usize {
    t.shape()[t.rank() - 3]
}

fn check_inputs(tape: &Tape, x: Var, prev: &CellVars, g: &CellGeometry) -> Result<()> {
    let (xv, hv, cv) = (tape.value(x), tape.value(prev.h), tape.value(prev.c));
    if channels(xv) != g.in_channels {
        return Err(Error::shape("cell input channels", xv.shape(), &[g.in_channels, g.height, g.width]));
    }
    if spatial(xv)? != (g.height, g.width) {
        return Err(Error::shape("cell input extents", xv.shape(), &g.state_shape()));
    }
    if hv.shape() != cv.shape() {
        return Err(Error::shape("cell state", hv.shape(), cv.shape()));
    }
    if hv.shape()[hv.rank() - 3..] != g.state_shape() {
        return Err(Error::shape("cell state", hv.shape(), &g.state_shape()));
    }
    if xv.rank() != hv.rank() || (xv.rank() == 4 && xv.shape()[0] != hv.shape()[0]) {
        return Err(Error::shape("cell batch", xv.shape(), hv.shape()));
    }
    Ok(())
}

fn gate_preactivation(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    h: Var,
    wx: &ConvParam,
    wh: &ConvParam,
) -> Result<Var> {
    let a = wx.apply(tape, store, x)?;
    let b = wh.apply(tape, store, h)?;
    tape.add(a, b)
}

fn peephole(tape: &mut Tape, store: &ParamStore, pre: Var, w: ParamId, c: Var) -> Result<Var> {
    let wv = tape.param(store, w);
    let p = tape.mul_broadcast(c, wv)?;
    tape.add(pre, p)
}

/// `C̃_t = f ⊙ C_{t−1} + i ⊙ g`.
fn intermediate_memory(tape: &mut Tape, store: &ParamStore, x: Var, prev: &CellVars, p: &ConvLstmParams) -> Result<Var> {
    let g = gate_preactivation(tape, store, x, prev.h, &p.w_xg, &p.w_hg)?;
    let g = tape.tanh(g);
    let i = gate_preactivation(tape, store, x, prev.h, &p.w_xi, &p.w_hi)?;
    let i = peephole(tape, store, i, p.w_ci, prev.c)?;
    let i = tape.sigmoid(i);
    let f = gate_preactivation(tape, store, x, prev.h, &p.w_xf, &p.w_hf)?;
    let f = peephole(tape, store, f, p.w_cf, prev.c)?;
    let f = tape.sigmoid(f);
    let keep = tape.mul(f, prev.c)?;
    let write = tape.mul(i, g)?;
    tape.add(keep, write)
}

/// `H_t = σ(W_xo * X + W_ho * H_{t−1} + W_co ⊙ C_t + b_o) ⊙ tanh(C_t)`.
fn output_block(tape: &mut Tape, store: &ParamStore, x: Var, prev_h: Var, c: Var, p: &ConvLstmParams) -> Result<Var> {
    let o = gate_preactivation(tape, store, x, prev_h, &p.w_xo, &p.w_ho)?;
    let o = peephole(tape, store, o, p.w_co, c)?;
    let o = tape.sigmoid(o);
    let tc = tape.tanh(c);
    tape.mul(o, tc)
}

pub fn convlstm_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    prev: &CellVars,
    params: &ConvLstmParams,
) -> Result<CellVars> {
    check_inputs(tape, x, prev, &params.geometry)?;
    let c = intermediate_memory(tape, store, x, prev, params)?;
    let h = output_block(tape, store, x, prev.h, c, params)?;
    Ok(CellVars { h, c })
}

/// One TMU step. `bank`, when given, is validated against the cell (one
/// gradient-free memory per source, each shaped like the cell state); it does
/// not enter the forward computation.
pub fn tmu_forward(
    tape: &mut Tape,
    store: &ParamStore,
    x: Var,
    prev: &CellVars,
    params: &TmuParams,
    bank: Option<&[Var]>,
) -> Result<TmuStepVars> {
    let base = &params.base;
    check_inputs(tape, x, prev, &base.geometry)?;
    let m_count = params.num_sources();
    if params.gates.len() != m_count {
        return Err(Error::config(format!(
            "TMU has {m_count} distillers but {} gates",
            params.gates.len()
        )));
    }
    if let Some(bank) = bank {
        if bank.len() != m_count {
            return Err(Error::config(format!(
                "memory bank holds {} sources but the TMU expects {m_count}",
                bank.len()
            )));
        }
        let state_shape = tape.value(prev.c).shape().to_vec();
        for &b in bank {
            if tape.value(b).shape() != state_shape.as_slice() {
                return Err(Error::shape("memory bank", tape.value(b).shape(), &state_shape));
            }
            if tape.requires_grad(b) {
                return Err(Error::Usage("memory bank entries must be gradient-stopped".into()));
            }
        }
    }

    let c_tilde = intermediate_memory(tape, store, x, prev, base)?;
    let mut distilled = Vec::with_capacity(m_count);
    let mut gates = Vec::with_capacity(m_count);
    let mut c = c_tilde;
    for (d, gp) in params.distillers.iter().zip(&params.gates) {
        let w = tape.param(store, d.weight);
        let proj = tape.conv2d(c_tilde, w, None)?;
        let gain = tape.param(store, d.gain);
        let shift = tape.param(store, d.shift);
        let c_hat = tape.layer_norm(proj, gain, shift, LN_EPSILON)?;

        let a = gate_preactivation(tape, store, x, prev.h, &gp.w_x, &gp.w_h)?;
        let a = tape.sigmoid(a);

        let take = tape.mul(a, c_hat)?;
        let rest = tape.one_minus(a);
        let keep = tape.mul(rest, c_tilde)?;
        let term = tape.add(take, keep)?;
        c = tape.add(c, term)?;

        distilled.push(c_hat);
        gates.push(a);
    }
    let h = output_block(tape, store, x, prev.h, c, base)?;
    Ok(TmuStepVars {
        state: CellVars { h, c },
        distilled,
        gates,
        intermediate: c_tilde,
    })
}

/// Evaluates one ConvLSTM step on plain tensors.
pub fn convlstm_step(store: &ParamStore, x: &Tensor, prev: &CellState, params: &ConvLstmParams) -> Result<CellState> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let pv = CellVars::constant(&mut tape, prev);
    Ok(convlstm_forward(&mut tape, store, xv, &pv, params)?.to_state(&tape))
}

/// Evaluates one TMU step on plain tensors.
pub fn tmu_step(
    store: &ParamStore,
    x: &Tensor,
    prev: &CellState,
    params: &TmuParams,
    bank: &[Tensor],
) -> Result<TmuStepOutput> {
    let mut tape = Tape::no_grad();
    let xv = tape.constant(x.clone());
    let pv = CellVars::constant(&mut tape, prev);
    let bank: Vec<Var> = bank.iter().map(|b| tape.constant(b.clone())).collect();
    Ok(tmu_forward(&mut tape, store, xv, &pv, params, Some(&bank))?.to_output(&tape))
}

/// Running per-layer, per-source sums of transfer-gate activations.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GateStats {
    sums: Vec<Vec<f64>>,
    counts: Vec<Vec<usize>>,
}

impl GateStats {
    pub fn new(num_layers: usize, num_sources: usize) -> Self {
        GateStats {
            sums: vec![vec![0.0; num_sources]; num_layers],
            counts: vec![vec![0; num_sources]; num_layers],
        }
    }

    pub fn record(&mut self, layer: usize, gates: &[Tensor]) {
        for (m, g) in gates.iter().enumerate() {
            self.sums[layer][m] += g.sum();
            self.counts[layer][m] += g.numel();
        }
    }

    /// Adds another accumulator of the same layout.
    pub fn merge(&mut self, other: &GateStats) {
        for (a, b) in self.sums.iter_mut().flatten().zip(other.sums.iter().flatten()) {
            *a += b;
        }
        for (a, b) in self.counts.iter_mut().flatten().zip(other.counts.iter().flatten()) {
            *a += b;
        }
    }

    pub fn num_layers(&self) -> usize {
        self.sums.len()
    }

    pub fn num_sources(&self) -> usize {
        self.sums.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.iter().flatten().all(|&c| c == 0)
    }

    /// Mean gate value of `source` at `layer`.
    pub fn layer_mean(&self, layer: usize, source: usize) -> f64 {
        self.sums[layer][source] / self.counts[layer][source] as f64
    }

    /// Mean gate value per source over every element, step, layer and sample.
    pub fn source_means(&self) -> Vec<f64> {
        (0..self.num_sources())
            .map(|m| {
                let s: f64 = self.sums.iter().map(|l| l[m]).sum();
                let c: usize = self.counts.iter().map(|l| l[m]).sum();
                s / c as f64
            })
            .collect()
    }
}

/// Mean transfer-gate activation per source over a sequence of step outputs.
pub fn gate_statistics(outputs: &[TmuStepOutput]) -> Result<Vec<f64>> {
    let first = outputs
        .first()
        .ok_or_else(|| Error::Usage("gate statistics need at least one step".into()))?;
    let mut stats = GateStats::new(1, first.gates.len());
    for o in outputs {
        if o.gates.len() != first.gates.len() {
            return Err(Error::config("inconsistent number of sources across steps"));
        }
        stats.record(0, &o.gates);
    }
    Ok(stats.source_means())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(ci: usize, c: usize, hw: usize, k: usize) -> CellGeometry {
        CellGeometry {
            in_channels: ci,
            channels: c,
            height: hw,
            width: hw,
            filter_size: k,
        }
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            for v in store.get_mut(id).data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn zero_all(store: &mut ParamStore) {
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_parameters_give_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let p = ConvLstmParams::init(&mut store, "l0", geom(2, 3, 4, 3), &mut rng).unwrap();
        zero_all(&mut store);
        let x = rand_tensor(&[2, 4, 4], &mut rng);
        let s = convlstm_step(&store, &x, &CellState::zeros(&[3, 4, 4]), &p).unwrap();
        assert!(s.c.data().iter().all(|&v| v == 0.0));
        assert!(s.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn large_forget_bias_saturates_forget_gate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let p = ConvLstmParams::init(&mut store, "l0", geom(1, 1, 2, 3), &mut rng).unwrap();
        zero_all(&mut store);
        store.set("l0.b_f", Tensor::full(&[1], 50.0)).unwrap();
        let prev = CellState {
            h: Tensor::zeros(&[1, 2, 2]),
            c: Tensor::full(&[1, 2, 2], 0.8),
        };
        let s = convlstm_step(&store, &Tensor::zeros(&[1, 2, 2]), &prev, &p).unwrap();
        // f ≈ 1 and g = tanh(0) = 0, so the memory carries over unchanged.
        for &v in s.c.data() {
            assert!((v - 0.8).abs() < 1e-12);
        }
    }

    #[test]
    fn half_open_gates_halve_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let p = ConvLstmParams::init(&mut store, "l0", geom(1, 1, 2, 3), &mut rng).unwrap();
        zero_all(&mut store);
        let prev = CellState {
            h: Tensor::zeros(&[1, 2, 2]),
            c: Tensor::ones(&[1, 2, 2]),
        };
        let s = convlstm_step(&store, &Tensor::zeros(&[1, 2, 2]), &prev, &p).unwrap();
        assert!(s.c.data().iter().all(|&v| v == 0.5));
        // H = σ(0) · tanh(0.5)
        assert!(s.h.data().iter().all(|&v| (v - 0.5 * 0.5f64.tanh()).abs() < 1e-15));
    }

    fn tmu_fixture(m: usize, seed: u64) -> (ParamStore, TmuParams, Tensor, CellState, Vec<Tensor>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let g = geom(2, 3, 4, 3);
        let p = TmuParams::init(&mut store, "l0", g, m, &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.4);
        let x = rand_tensor(&[2, 2, 4, 4], &mut rng);
        let prev = CellState {
            h: rand_tensor(&[2, 3, 4, 4], &mut rng).map(|v| v * 0.5),
            c: rand_tensor(&[2, 3, 4, 4], &mut rng),
        };
        let bank = (0..m).map(|_| rand_tensor(&[2, 3, 4, 4], &mut rng)).collect();
        (store, p, x, prev, bank)
    }

    #[test]
    fn tmu_without_sources_is_convlstm() {
        for seed in 0..10 {
            let (store, p, x, prev, bank) = tmu_fixture(0, seed);
            let t = tmu_step(&store, &x, &prev, &p, &bank).unwrap();
            let c = convlstm_step(&store, &x, &prev, &p.base).unwrap();
            assert_eq!(t.state, c);
            assert_eq!(t.intermediate, c.c);
        }
    }

    #[test]
    fn closed_gates_scale_intermediate_memory() {
        let (mut store, p, x, prev, bank) = tmu_fixture(2, 5);
        for m in 0..2 {
            store.set(&format!("l0.gate{m}.b"), Tensor::full(&[3], -800.0)).unwrap();
        }
        let out = tmu_step(&store, &x, &prev, &p, &bank).unwrap();
        for (c, ct) in out.state.c.data().iter().zip(out.intermediate.data()) {
            assert!((c - 3.0 * ct).abs() < 1e-12);
        }
    }

    #[test]
    fn open_gates_add_distilled_memories() {
        let (mut store, p, x, prev, bank) = tmu_fixture(2, 6);
        for m in 0..2 {
            store.set(&format!("l0.gate{m}.b"), Tensor::full(&[3], 800.0)).unwrap();
        }
        let out = tmu_step(&store, &x, &prev, &p, &bank).unwrap();
        for i in 0..out.state.c.numel() {
            let expected = out.intermediate.data()[i] + out.distilled[0].data()[i] + out.distilled[1].data()[i];
            assert!((out.state.c.data()[i] - expected).abs() < 1e-12);
        }
        assert!(out.gates.iter().all(|g| g.data().iter().all(|&a| a == 1.0)));
    }

    #[test]
    fn distilled_equal_to_intermediate_doubles_memory() {
        // With a single source whose distiller reproduces C̃ exactly, every
        // gate value yields C = 2·C̃. Use a 1-channel cell and pick the layer
        // norm affine so that Ĉ == C̃.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let p = TmuParams::init(&mut store, "l0", geom(1, 1, 3, 3), 1, &mut rng).unwrap();
        randomize(&mut store, &mut rng, 0.5);
        store.set("l0.distill0.w", Tensor::ones(&[1, 1, 1, 1])).unwrap();
        let x = rand_tensor(&[1, 3, 3], &mut rng);
        let prev = CellState {
            h: rand_tensor(&[1, 3, 3], &mut rng).map(|v| v * 0.5),
            c: rand_tensor(&[1, 3, 3], &mut rng),
        };
        let probe = tmu_step(&store, &x, &prev, &p, &[]).unwrap_err();
        assert!(matches!(probe, Error::Config(_)));
        let bank = vec![Tensor::zeros(&[1, 3, 3])];
        let first = tmu_step(&store, &x, &prev, &p, &bank).unwrap();
        let ct = &first.intermediate;
        let mean = ct.mean();
        let std = (ct.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 9.0 + LN_EPSILON).sqrt();
        store.set("l0.distill0.gain", Tensor::full(&[1], std)).unwrap();
        store.set("l0.distill0.shift", Tensor::full(&[1], mean)).unwrap();
        let out = tmu_step(&store, &x, &prev, &p, &bank).unwrap();
        for (c, t) in out.state.c.data().iter().zip(out.intermediate.data()) {
            assert!((c - 2.0 * t).abs() < 1e-12);
        }
    }

    #[test]
    fn bank_shape_and_length_are_checked() {
        let (store, p, x, prev, bank) = tmu_fixture(2, 8);
        assert!(matches!(tmu_step(&store, &x, &prev, &p, &bank[..1]), Err(Error::Config(_))));
        let bad = vec![bank[0].clone(), Tensor::zeros(&[2, 3, 2, 2])];
        assert!(matches!(tmu_step(&store, &x, &prev, &p, &bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn input_channel_mismatch_is_reported() {
        let (store, p, _, prev, bank) = tmu_fixture(1, 9);
        let x = Tensor::zeros(&[2, 5, 4, 4]);
        assert!(matches!(tmu_step(&store, &x, &prev, &p, &bank), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gates_in_open_unit_interval_and_hidden_bounded() {
        for seed in 10..20 {
            let (store, p, x, prev, bank) = tmu_fixture(3, seed);
            let out = tmu_step(&store, &x, &prev, &p, &bank).unwrap();
            assert_eq!(out.gates.len(), 3);
            assert_eq!(out.distilled.len(), 3);
            for g in &out.gates {
                assert!(g.data().iter().all(|&a| a > 0.0 && a < 1.0));
            }
            assert!(out.state.h.data().iter().all(|v| v.abs() < 1.0));
        }
    }

    #[test]
    fn memory_sensitivity_to_gate_is_distilled_minus_intermediate() {
        // Shift gate m's bias by ±δ and compare ∂C/∂b against (Ĉ − C̃)·a(1−a).
        let (store, p, x, prev, bank) = tmu_fixture(2, 11);
        let base = tmu_step(&store, &x, &prev, &p, &bank).unwrap();
        let delta = 1e-6;
        let eval = |shift: f64| {
            let mut s = store.clone();
            let b = s.by_name("l0.gate1.b").unwrap().map(|v| v + shift);
            s.set("l0.gate1.b", b).unwrap();
            tmu_step(&s, &x, &prev, &p, &bank).unwrap().state.c
        };
        let (up, down) = (eval(delta), eval(-delta));
        for i in 0..up.numel() {
            let fd = (up.data()[i] - down.data()[i]) / (2.0 * delta);
            let a = base.gates[1].data()[i];
            let analytic = (base.distilled[1].data()[i] - base.intermediate.data()[i]) * a * (1.0 - a);
            assert!((fd - analytic).abs() < 1e-6 * analytic.abs().max(1.0), "{fd} vs {analytic}");
        }
    }

    #[test]
    fn tmu_step_gradients_match_finite_differences() {
        let (store, p, x, prev, bank) = tmu_fixture(2, 12);
        let target_h = Tensor::from_fn(&[2, 3, 4, 4], |i| ((i % 7) as f64 - 3.0) * 0.1);
        let loss_of = |s: &ParamStore| -> (f64, crate::autodiff::Gradients) {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let pv = CellVars::constant(&mut tape, &prev);
            let bv: Vec<Var> = bank.iter().map(|b| tape.constant(b.clone())).collect();
            let out = tmu_forward(&mut tape, s, xv, &pv, &p, Some(&bv)).unwrap();
            let th = tape.constant(target_h.clone());
            let mut terms = vec![tape.squared_distance(out.state.h, th, 1.0).unwrap()];
            for (d, b) in out.distilled.iter().zip(&bv) {
                terms.push(tape.squared_distance(*d, *b, 0.1).unwrap());
            }
            let loss = tape.sum_scalars(&terms).unwrap();
            let g = tape.backward(loss).unwrap();
            (tape.value(loss).item().unwrap(), g)
        };
        let (_, grads) = loss_of(&store);
        let flat: Vec<f64> = store.iter().flat_map(|(_, _, t)| t.data().to_vec()).collect();
        let analytic: Vec<f64> = store.ids().flat_map(|id| grads[&id].data().to_vec()).collect();
        let unflatten = |v: &[f64]| {
            let mut s = store.clone();
            let mut off = 0;
            let ids: Vec<_> = s.ids().collect();
            for id in ids {
                let n = s.get(id).numel();
                s.get_mut(id).data_mut().copy_from_slice(&v[off..off + n]);
                off += n;
            }
            s
        };
        let err = finite_diff_check(|v| loss_of(&unflatten(v)).0, &flat, &analytic, 1e-5);
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn gate_statistics_examples() {
        assert!(gate_statistics(&[]).is_err());
        let step = |v: f64| TmuStepOutput {
            state: CellState::zeros(&[1, 2, 2]),
            distilled: vec![Tensor::zeros(&[1, 2, 2])],
            gates: vec![Tensor::full(&[1, 2, 2], v)],
            intermediate: Tensor::zeros(&[1, 2, 2]),
        };
        let means = gate_statistics(&[step(0.4), step(0.8)]).unwrap();
        assert!((means[0] - 0.6).abs() < 1e-15);
        assert!((gate_statistics(&[step(0.6)]).unwrap()[0] - 0.60).abs() < 1e-15);

        let (mut store, p, x, prev, bank) = tmu_fixture(2, 13);
        for m in 0..2 {
            for n in ["w_x", "w_h", "b"] {
                let name = format!("l0.gate{m}.{n}");
                let z = store.by_name(&name).unwrap().map(|_| 0.0);
                store.set(&name, z).unwrap();
            }
        }
        let out = tmu_step(&store, &x, &prev, &p, &bank).unwrap();
        assert_eq!(gate_statistics(&[out]).unwrap(), vec![0.5, 0.5]);
    }
}
