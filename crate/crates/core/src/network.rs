//! Stacked recurrent predictors unrolled over a frame sequence.
//!
//! Frames are sub-scaled with [`space_to_depth`](crate::tensor::space_to_depth)
//! before entering the first layer, each higher layer consumes the hidden
//! state of the one below, and a 1×1 convolution of the top hidden state
//! decodes the next frame. During the input horizon the network reads ground
//! truth; afterwards it reads its own previous prediction.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::cells::{self, CellGeometry, CellState, CellVars, ConvParam, GateStats, TmuParams, TmuStepVars};
use crate::data::frame_at;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::transfer::MemoryBank;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellKind {
    ConvLstm,
    Tmu,
}

impl CellKind {
    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::ConvLstm => "convlstm",
            CellKind::Tmu => "tmu",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "convlstm" => Ok(CellKind::ConvLstm),
            "tmu" => Ok(CellKind::Tmu),
            _ => Err(Error::config(format!("unknown cell kind {s:?}"))),
        }
    }
}

/// What the network reads after the input horizon.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Feedback {
    /// Its own previous prediction.
    #[default]
    ClosedLoop,
    /// The ground-truth frame.
    TeacherForced,
}

impl Feedback {
    pub fn as_str(self) -> &'static str {
        match self {
            Feedback::ClosedLoop => "closed-loop",
            Feedback::TeacherForced => "teacher-forced",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "closed-loop" => Ok(Feedback::ClosedLoop),
            "teacher-forced" => Ok(Feedback::TeacherForced),
            _ => Err(Error::config(format!("unknown feedback mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    pub kind: CellKind,
    pub num_layers: usize,
    pub channels: usize,
    pub filter_size: usize,
    pub subscale_factor: usize,
    pub input_len: usize,
    pub predict_len: usize,
    pub num_sources: usize,
    pub frame_channels: usize,
    pub frame_height: usize,
    pub frame_width: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            kind: CellKind::Tmu,
            num_layers: 4,
            channels: 64,
            filter_size: 5,
            subscale_factor: 4,
            input_len: 10,
            predict_len: 10,
            num_sources: 0,
            frame_channels: 1,
            frame_height: 32,
            frame_width: 32,
        }
    }
}

impl NetworkConfig {
    pub fn seq_len(&self) -> usize {
        self.input_len + self.predict_len
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(Error::config("network needs at least one layer"));
        }
        if self.channels == 0 || self.frame_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        if self.filter_size % 2 == 0 {
            return Err(Error::config(format!("filter size must be odd, got {}", self.filter_size)));
        }
        if self.input_len == 0 || self.predict_len == 0 {
            return Err(Error::config("input and prediction horizons must be positive"));
        }
        let s = self.subscale_factor;
        if s == 0 || self.frame_height % s != 0 || self.frame_width % s != 0 {
            return Err(Error::config(format!(
                "frame {}x{} not divisible by subscale factor {s}",
                self.frame_height, self.frame_width
            )));
        }
        if self.kind == CellKind::ConvLstm && self.num_sources != 0 {
            return Err(Error::config("a ConvLSTM network cannot consume memory banks"));
        }
        Ok(())
    }

    pub fn geometry(&self, layer: usize) -> CellGeometry {
        let s = self.subscale_factor;
        CellGeometry {
            in_channels: if layer == 0 {
                self.frame_channels * s * s
            } else {
                self.channels
            },
            channels: self.channels,
            height: self.frame_height / s,
            width: self.frame_width / s,
            filter_size: self.filter_size,
        }
    }

    pub fn state_shape(&self) -> [usize; 3] {
        self.geometry(0).state_shape()
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        [
            ("kind", self.kind.as_str().to_string()),
            ("layers", self.num_layers.to_string()),
            ("channels", self.channels.to_string()),
            ("filter_size", self.filter_size.to_string()),
            ("subscale", self.subscale_factor.to_string()),
            ("input_len", self.input_len.to_string()),
            ("predict_len", self.predict_len.to_string()),
            ("num_sources", self.num_sources.to_string()),
            ("frame_channels", self.frame_channels.to_string()),
            ("frame_height", self.frame_height.to_string()),
            ("frame_width", self.frame_width.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    pub fn from_kv(kv: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| -> Result<&str> {
            kv.iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format(format!("missing network key {key:?}")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::format(format!("bad integer for {key:?}")))
        };
        let cfg = NetworkConfig {
            kind: CellKind::parse(get("kind")?)?,
            num_layers: num("layers")?,
            channels: num("channels")?,
            filter_size: num("filter_size")?,
            subscale_factor: num("subscale")?,
            input_len: num("input_len")?,
            predict_len: num("predict_len")?,
            num_sources: num("num_sources")?,
            frame_channels: num("frame_channels")?,
            frame_height: num("frame_height")?,
            frame_width: num("frame_width")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Everything one unrolled forward pass leaves on the tape.
pub struct SequenceOutput {
    /// Predicted frames `X̂_2..X̂_T`, each `[N, P, H, W]`.
    pub predictions: Vec<Var>,
    /// Cell records indexed `[step][layer]`.
    pub steps: Vec<Vec<TmuStepVars>>,
    /// Memory-bank constants indexed `[step][layer][source]`; empty without a bank.
    pub bank: Vec<Vec<Vec<Var>>>,
}

/// Result of a gradient-free forward pass.
pub struct Prediction {
    /// `[N, T−1, P, H, W]`
    pub frames: Tensor,
    pub gates: GateStats,
}

/// A stacked ConvLSTM or TMU network with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictor {
    pub config: NetworkConfig,
    pub store: ParamStore,
    pub layers: Vec<TmuParams>,
    pub decoder: ConvParam,
}

impl Predictor {
    pub fn new<R: Rng>(config: NetworkConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut layers = Vec::with_capacity(config.num_layers);
        for k in 0..config.num_layers {
            layers.push(TmuParams::init(
                &mut store,
                &format!("layer{k}"),
                config.geometry(k),
                config.num_sources,
                rng,
            )?);
        }
        let s = config.subscale_factor;
        let out = config.frame_channels * s * s;
        let bound = (1.0 / config.channels as f64).sqrt();
        let w = store.insert(
            "decoder.w",
            Tensor::from_fn(&[out, config.channels, 1, 1], |_| rng.gen_range(-bound..bound)),
        )?;
        let b = store.insert("decoder.b", Tensor::zeros(&[out]))?;
        Ok(Predictor {
            config,
            store,
            layers,
            decoder: ConvParam {
                weight: w,
                bias: Some(b),
            },
        })
    }

    /// Rebuilds a predictor from named tensors. The name set and every shape
    /// must match what `config` implies.
    pub fn from_named(config: NetworkConfig, named: &[(String, Tensor)]) -> Result<Self> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 0);
        let mut model = Predictor::new(config, &mut rng)?;
        if named.len() != model.store.len() {
            return Err(Error::format(format!(
                "checkpoint holds {} tensors, model expects {}",
                named.len(),
                model.store.len()
            )));
        }
        for (name, t) in named {
            model
                .store
                .set(name, t.clone())
                .map_err(|e| Error::format(format!("parameter {name:?}: {e}")))?;
        }
        Ok(model)
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.store
            .iter()
            .map(|(_, n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    pub fn num_sources(&self) -> usize {
        self.config.num_sources
    }

    fn check_frames(&self, frames: &Tensor) -> Result<usize> {
        let c = &self.config;
        let expected = [c.seq_len(), c.frame_channels, c.frame_height, c.frame_width];
        match frames.shape() {
            [n, rest @ ..] if rest == expected => Ok(*n),
            other => Err(Error::shape("frames vs network config", other, &expected)),
        }
    }

    /// Unrolls the network over `frames` (`[N, T, P, H, W]`) on `tape`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        frames: &Tensor,
        bank: Option<&MemoryBank>,
        feedback: Feedback,
    ) -> Result<SequenceOutput> {
        let n = self.check_frames(frames)?;
        let cfg = &self.config;
        let steps_total = cfg.seq_len() - 1;
        if let Some(b) = bank {
            b.check_layout(steps_total, cfg.num_layers, cfg.num_sources, n, &cfg.state_shape())?;
        }
        let [c, h, w] = cfg.state_shape();
        let zero = CellState::zeros(&[n, c, h, w]);
        let mut states: Vec<CellVars> = (0..cfg.num_layers).map(|_| CellVars::constant(tape, &zero)).collect();
        let mut predictions: Vec<Var> = Vec::with_capacity(steps_total);
        let mut steps = Vec::with_capacity(steps_total);
        let mut bank_vars = Vec::new();

        for t in 0..steps_total {
            let img = if t < cfg.input_len || feedback == Feedback::TeacherForced {
                tape.constant(frame_at(frames, t)?)
            } else {
                predictions[t - 1]
            };
            let mut x = tape.space_to_depth(img, cfg.subscale_factor)?;
            let mut layer_steps = Vec::with_capacity(cfg.num_layers);
            let mut step_bank = Vec::new();
            for (k, layer) in self.layers.iter().enumerate() {
                let bv: Option<Vec<Var>> = bank.map(|b| {
                    (0..cfg.num_sources)
                        .map(|m| tape.constant(b.get(t, k, m).clone()))
                        .collect()
                });
                let step = match cfg.kind {
                    CellKind::ConvLstm => {
                        let s = cells::convlstm_forward(tape, &self.store, x, &states[k], &layer.base)?;
                        TmuStepVars {
                            state: s,
                            distilled: Vec::new(),
                            gates: Vec::new(),
                            intermediate: s.c,
                        }
                    }
                    CellKind::Tmu => cells::tmu_forward(tape, &self.store, x, &states[k], layer, bv.as_deref())?,
                };
                states[k] = step.state;
                x = step.state.h;
                layer_steps.push(step);
                if let Some(bv) = bv {
                    step_bank.push(bv);
                }
            }
            let dw = tape.param(&self.store, self.decoder.weight);
            let db = self.decoder.bias.map(|b| tape.param(&self.store, b));
            let raw = tape.conv2d(x, dw, db)?;
            let img = tape.depth_to_space(raw, cfg.subscale_factor)?;
            predictions.push(tape.clamp(img, 0.0, 1.0));
            steps.push(layer_steps);
            if bank.is_some() {
                bank_vars.push(step_bank);
            }
        }
        Ok(SequenceOutput {
            predictions,
            steps,
            bank: bank_vars,
        })
    }

    /// Gradient-free closed-loop prediction with transfer-gate statistics.
    pub fn predict(&self, frames: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, frames, None, Feedback::ClosedLoop)?;
        let mut gates = GateStats::new(self.config.num_layers, self.config.num_sources);
        for step in &out.steps {
            for (k, s) in step.iter().enumerate() {
                let g: Vec<Tensor> = s.gates.iter().map(|&v| tape.value(v).clone()).collect();
                gates.record(k, &g);
            }
        }
        let frames = stack_predictions(&tape, &out.predictions)?;
        Ok(Prediction { frames, gates })
    }

    /// Memory states `C_t` of every layer at every step of a gradient-free run.
    pub fn memories(&self, frames: &Tensor, feedback: Feedback) -> Result<Vec<Vec<Tensor>>> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, frames, None, feedback)?;
        Ok(out
            .steps
            .iter()
            .map(|layers| layers.iter().map(|s| tape.value(s.state.c).clone()).collect())
            .collect())
    }
}

/// Stacks per-step `[N, P, H, W]` predictions into `[N, T−1, P, H, W]`.
pub fn stack_predictions(tape: &Tape, preds: &[Var]) -> Result<Tensor> {
    let first = tape.value(*preds.first().ok_or_else(|| Error::Usage("no predictions".into()))?);
    let n = first.shape()[0];
    let per: usize = first.shape()[1..].iter().product();
    let steps = preds.len();
    let mut data = vec![0.0; n * steps * per];
    for (t, &p) in preds.iter().enumerate() {
        let v = tape.value(p).data();
        for b in 0..n {
            data[(b * steps + t) * per..(b * steps + t + 1) * per].copy_from_slice(&v[b * per..(b + 1) * per]);
        }
    }
    let mut shape = vec![n, steps];
    shape.extend_from_slice(&first.shape()[1..]);
    Tensor::new(&shape, data)
}

/// Confirms a source model's states line up with the target's.
pub fn check_source_geometry(target: &NetworkConfig, source: &NetworkConfig) -> Result<()> {
    if source.num_sources != 0 {
        return Err(Error::config("source models must be plain recurrent predictors without their own sources"));
    }
    let mismatch = |what: &str, t: String, s: String| {
        Error::config(format!(
            "source/target {what} mismatch (target {t}, source {s}); memory states must have identical \
             channels and extents: pick --subscale per domain so frame_size/subscale agrees, and use the \
             same --layers and --channels"
        ))
    };
    if source.num_layers != target.num_layers {
        return Err(mismatch("layer count", target.num_layers.to_string(), source.num_layers.to_string()));
    }
    if source.state_shape() != target.state_shape() {
        return Err(mismatch(
            "state shape",
            format!("{:?}", target.state_shape()),
            format!("{:?}", source.state_shape()),
        ));
    }
    if source.geometry(0).in_channels != target.geometry(0).in_channels
        || source.frame_height != target.frame_height
        || source.frame_width != target.frame_width
        || source.frame_channels != target.frame_channels
    {
        return Err(mismatch(
            "input geometry",
            format!("{}x{}x{}", target.frame_channels, target.frame_height, target.frame_width),
            format!("{}x{}x{}", source.frame_channels, source.frame_height, source.frame_width),
        ));
    }
    if source.input_len != target.input_len || source.predict_len != target.predict_len {
        return Err(mismatch(
            "sequence horizon",
            format!("{}+{}", target.input_len, target.predict_len),
            format!("{}+{}", source.input_len, source.predict_len),
        ));
    }
    Ok(())
}

/// Runs every frozen source on `frames` and collects their memories into a
/// bank indexed `[step][layer][source]`, in source order.
pub fn run_source_models(frames: &Tensor, sources: &[Predictor], feedback: Feedback) -> Result<MemoryBank> {
    let Some(first) = sources.first() else {
        let steps = frames.shape().get(1).map_or(0, |t| t.saturating_sub(1));
        return Ok(MemoryBank::empty(steps, 0));
    };
    for s in sources {
        check_source_geometry(&first.config, &s.config)?;
    }
    let per_source: Vec<Vec<Vec<Tensor>>> = sources
        .iter()
        .map(|s| s.memories(frames, feedback))
        .collect::<Result<_>>()?;
    let steps = per_source[0].len();
    let layers = first.config.num_layers;
    let mut tensors = Vec::with_capacity(steps * layers * sources.len());
    for t in 0..steps {
        for k in 0..layers {
            for src in &per_source {
                tensors.push(src[t][k].clone());
            }
        }
    }
    MemoryBank::new(steps, layers, sources.len(), tensors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(kind: CellKind, m: usize) -> NetworkConfig {
        NetworkConfig {
            kind,
            num_layers: 2,
            channels: 4,
            filter_size: 3,
            subscale_factor: 2,
            input_len: 3,
            predict_len: 2,
            num_sources: m,
            frame_channels: 1,
            frame_height: 8,
            frame_width: 8,
        }
    }

    fn frames(n: usize, cfg: &NetworkConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(
            &[n, cfg.seq_len(), cfg.frame_channels, cfg.frame_height, cfg.frame_width],
            |_| rng.gen_range(0.0..1.0),
        )
    }

    #[test]
    fn zero_network_predicts_constant_frames() {
        let cfg = small_config(CellKind::Tmu, 0);
        let mut model = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let out = model.predict(&frames(3, &cfg, 2)).unwrap();
        assert_eq!(out.frames.shape(), &[3, 4, 1, 8, 8]);
        assert!(out.frames.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_step_depends_only_on_first_frame() {
        let mut cfg = small_config(CellKind::Tmu, 0);
        cfg.num_layers = 1;
        cfg.input_len = 1;
        cfg.predict_len = 1;
        let model = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let a = frames(1, &cfg, 4);
        let mut b = a.clone();
        for v in &mut b.data_mut()[64..] {
            *v = 0.123;
        }
        let mut tape = Tape::no_grad();
        let out = model.forward(&mut tape, &a, None, Feedback::ClosedLoop).unwrap();
        assert_eq!(out.steps.len(), 1);
        assert_eq!(out.predictions.len(), 1);
        assert_eq!(model.predict(&a).unwrap().frames, model.predict(&b).unwrap().frames);
    }

    #[test]
    fn batch_entries_are_independent() {
        let cfg = small_config(CellKind::Tmu, 2);
        let model = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let one = frames(1, &cfg, 6);
        let two = Tensor::stack(&[one.index_outer(0).unwrap(), one.index_outer(0).unwrap()]).unwrap();
        let p = model.predict(&two).unwrap().frames;
        let (a, b) = (p.index_outer(0).unwrap(), p.index_outer(1).unwrap());
        assert_eq!(a, b);
        assert_eq!(a, model.predict(&one).unwrap().frames.index_outer(0).unwrap());
    }

    #[test]
    fn predictions_are_causal() {
        let cfg = small_config(CellKind::Tmu, 1);
        let model = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let base = frames(2, &cfg, 8);
        let reference = model.predict(&base).unwrap().frames;
        let per_frame = 64;
        // Perturb ground-truth frame index j and check predictions of frames <= j.
        for j in 1..cfg.seq_len() {
            let mut moved = base.clone();
            for b in 0..2 {
                let off = (b * cfg.seq_len() + j) * per_frame;
                for v in &mut moved.data_mut()[off..off + per_frame] {
                    *v = 1.0 - *v;
                }
            }
            let p = model.predict(&moved).unwrap().frames;
            for b in 0..2 {
                for t in 0..j {
                    // prediction index t is frame t+1
                    if t + 1 <= j {
                        let off = (b * (cfg.seq_len() - 1) + t) * per_frame;
                        assert_eq!(
                            &p.data()[off..off + per_frame],
                            &reference.data()[off..off + per_frame],
                            "frame {} changed when perturbing frame {j}",
                            t + 1
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let cfg = small_config(CellKind::Tmu, 2);
        let mut model = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        model.store.set("decoder.b", Tensor::full(&[4], 0.5)).unwrap();
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            model.store.get_mut(id).data_mut().iter_mut().for_each(|v| *v *= 8.0);
        }
        let p = model.predict(&frames(2, &cfg, 10)).unwrap().frames;
        assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(p.data().iter().any(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn tmu_without_sources_matches_convlstm_network() {
        let tmu_cfg = small_config(CellKind::Tmu, 0);
        let lstm_cfg = small_config(CellKind::ConvLstm, 0);
        let tmu = Predictor::new(tmu_cfg.clone(), &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let lstm = Predictor::from_named(lstm_cfg, &tmu.named_tensors()).unwrap();
        let f = frames(2, &tmu_cfg, 12);
        assert_eq!(tmu.predict(&f).unwrap().frames, lstm.predict(&f).unwrap().frames);
    }

    #[test]
    fn bank_from_single_source_equals_its_memories() {
        let cfg = small_config(CellKind::ConvLstm, 0);
        let src = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(13)).unwrap();
        let f = frames(2, &cfg, 14);
        let bank = run_source_models(&f, std::slice::from_ref(&src), Feedback::ClosedLoop).unwrap();
        let mem = src.memories(&f, Feedback::ClosedLoop).unwrap();
        assert_eq!(bank.num_steps(), cfg.seq_len() - 1);
        for (t, layers) in mem.iter().enumerate() {
            for (k, c) in layers.iter().enumerate() {
                assert_eq!(bank.get(t, k, 0), c);
            }
        }
        let empty = run_source_models(&f, &[], Feedback::ClosedLoop).unwrap();
        assert_eq!(empty.num_sources(), 0);
    }

    #[test]
    fn distinct_sources_give_distinct_banks() {
        let cfg = small_config(CellKind::ConvLstm, 0);
        let a = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(15)).unwrap();
        let b = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(16)).unwrap();
        let f = frames(1, &cfg, 17);
        let bank = run_source_models(&f, &[a, b], Feedback::ClosedLoop).unwrap();
        let differs = (0..bank.num_steps()).any(|t| bank.get(t, 0, 0) != bank.get(t, 0, 1));
        assert!(differs);
    }

    #[test]
    fn teacher_forced_bank_differs_after_input_horizon() {
        let cfg = small_config(CellKind::ConvLstm, 0);
        let src = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(18)).unwrap();
        let f = frames(1, &cfg, 19);
        let closed = src.memories(&f, Feedback::ClosedLoop).unwrap();
        let forced = src.memories(&f, Feedback::TeacherForced).unwrap();
        for t in 0..cfg.input_len {
            assert_eq!(closed[t], forced[t]);
        }
        assert_ne!(closed[cfg.input_len], forced[cfg.input_len]);
    }

    #[test]
    fn geometry_mismatch_carries_remediation_hint() {
        let target = small_config(CellKind::Tmu, 1);
        let mut source = small_config(CellKind::ConvLstm, 0);
        source.subscale_factor = 4;
        let err = check_source_geometry(&target, &source).unwrap_err().to_string();
        assert!(err.contains("--subscale"), "{err}");
        source.subscale_factor = 2;
        source.channels = 8;
        assert!(check_source_geometry(&target, &source).is_err());
    }

    #[test]
    fn frame_shape_mismatch_is_rejected() {
        let cfg = small_config(CellKind::Tmu, 0);
        let model = Predictor::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(20)).unwrap();
        let bad = Tensor::zeros(&[1, 4, 1, 8, 8]);
        assert!(matches!(model.predict(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn config_kv_roundtrip_and_validation() {
        let cfg = small_config(CellKind::Tmu, 3);
        assert_eq!(NetworkConfig::from_kv(&cfg.to_kv()).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.frame_height = 7;
        assert!(bad.validate().is_err());
        bad = cfg;
        bad.filter_size = 4;
        assert!(bad.validate().is_err());
    }
}
