//! The DISTANA lattice.
//!
//! One Prediction Kernel (PK) parameter set is shared by every cell. A PK maps
//! its dynamic, static and lateral inputs through a linear pre-layer, one LSTM
//! step and a linear post-layer; the post-layer output splits into the
//! dynamic prediction and the lateral output. Lateral outputs produced at step
//! `t` reach the neighbors at step `t + 1`, either through one shared linear
//! Transition Kernel (TK) summed over all present neighbors, or directly with
//! one input slot per compass direction.
//!
//! Layer layout:
//!
//! ```text
//! x     = [dynamic | static | lateral]                 rows = cells
//! p     = x · W_pre                                    no bias, no activation
//! z     = [p | h] · W_lstm + 1 · b_lstm                gate columns [i | f | g | o]
//! c'    = σ(f) ⊙ c + σ(i) ⊙ tanh(g)
//! h'    = σ(o) ⊙ tanh(c')
//! y     = h' · W_post = [dynamic_out | lateral_out]    no bias
//! ```

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mesh::MeshTopology;
use crate::tape::{GatherMap, Tape, Var};
use crate::tensor::Tensor;

/// Model family member; selects the lateral routing and default sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Shared transition kernel, one-unit pre-layer.
    Base,
    /// Shared transition kernel, four-unit pre-layer.
    V1,
    /// Direct routing: one lateral input slot per direction, one shared lateral output.
    V2,
    /// Direct routing with one lateral output slot per direction.
    V3,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Base, Variant::V1, Variant::V2, Variant::V3];

    pub fn routing(self) -> Routing {
        match self {
            Variant::Base | Variant::V1 => Routing::Transition,
            Variant::V2 => Routing::Direct,
            Variant::V3 => Routing::DirectPerNeighbor,
        }
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::Base => "distana",
            Variant::V1 => "distana-v1",
            Variant::V2 => "distana-v2",
            Variant::V3 => "distana-v3",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .iter()
            .copied()
            .find(|v| v.cli_name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model {s:?} (distana, distana-v1, distana-v2, distana-v3)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Routing {
    /// `lateral_in = Σ_neighbors buffer · W_tk`.
    Transition,
    /// `lateral_in[d]` = the neighbor in direction `d`'s single lateral output.
    Direct,
    /// `lateral_in[d]` = slot `opposite(d)` of the neighbor in direction `d`.
    DirectPerNeighbor,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PkConfig {
    pub dyn_in: usize,
    pub static_in: usize,
    pub lateral_in: usize,
    pub pre_units: usize,
    pub lstm_cells: usize,
    pub dyn_out: usize,
    pub lateral_out: usize,
}

impl PkConfig {
    pub fn input_width(&self) -> usize {
        self.dyn_in + self.static_in + self.lateral_in
    }

    pub fn output_width(&self) -> usize {
        self.dyn_out + self.lateral_out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub pk: PkConfig,
}

impl ModelConfig {
    /// Standard sizes for a variant. `lstm_cells` is 4 for every variant in the
    /// reference configurations; the base model also appears with 26.
    pub fn preset(variant: Variant, lstm_cells: usize) -> Self {
        let (lateral_in, pre_units, lateral_out) = match variant {
            Variant::Base => (1, 1, 1),
            Variant::V1 => (1, 4, 1),
            Variant::V2 => (8, 4, 1),
            Variant::V3 => (8, 4, 8),
        };
        Self {
            variant,
            pk: PkConfig {
                dyn_in: 1,
                static_in: 0,
                lateral_in,
                pre_units,
                lstm_cells,
                dyn_out: 1,
                lateral_out,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let pk = &self.pk;
        if pk.dyn_in == 0 || pk.dyn_out == 0 {
            return Err(Error::Config("dyn_in and dyn_out must be >= 1".into()));
        }
        if pk.lstm_cells == 0 {
            return Err(Error::Config("lstm_cells must be >= 1".into()));
        }
        match self.variant.routing() {
            Routing::Transition => Ok(()),
            Routing::Direct if pk.lateral_in == 8 && pk.lateral_out == 1 => Ok(()),
            Routing::DirectPerNeighbor if pk.lateral_in == 8 && pk.lateral_out == 8 => Ok(()),
            _ => Err(Error::Config(format!(
                "{:?} routing needs lateral_in = 8 and lateral_out = {}, got {} / {}",
                self.variant,
                if self.variant == Variant::V3 { 8 } else { 1 },
                pk.lateral_in,
                pk.lateral_out
            ))),
        }
    }

    /// Display name in the style `DISTANA4`, `DISTANAv2`.
    pub fn display_name(&self) -> String {
        match self.variant {
            Variant::Base => format!("DISTANA{}", self.pk.lstm_cells),
            Variant::V1 => "DISTANAv1".into(),
            Variant::V2 => "DISTANAv2".into(),
            Variant::V3 => "DISTANAv3".into(),
        }
    }

    fn param_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let pk = &self.pk;
        let l = pk.lstm_cells;
        let mut shapes = vec![
            ("pk.w_pre", vec![pk.input_width(), pk.pre_units]),
            ("pk.w_lstm", vec![pk.pre_units + l, 4 * l]),
            ("pk.b_lstm", vec![1, 4 * l]),
            ("pk.w_post", vec![l, pk.output_width()]),
        ];
        if self.variant.routing() == Routing::Transition {
            shapes.push(("tk.w_tk", vec![pk.lateral_out, pk.lateral_in]));
        }
        shapes
    }

    /// Names of the parameter tensors in their declared order.
    pub fn param_names(&self) -> Vec<&'static str> {
        self.param_shapes().into_iter().map(|(n, _)| n).collect()
    }
}

/// Shared Prediction Kernel weights.
#[derive(Clone, Debug, PartialEq)]
pub struct PkParams {
    pub w_pre: Tensor,
    pub w_lstm: Tensor,
    pub b_lstm: Tensor,
    pub w_post: Tensor,
}

/// Shared Transition Kernel weights, `[lateral_out, lateral_in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct TkParams {
    pub w_tk: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distana {
    config: ModelConfig,
    pub pk: PkParams,
    pub tk: Option<TkParams>,
}

impl Distana {
    /// Every weight zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config.param_shapes().iter().map(|(_, s)| Tensor::zeros(s)).collect();
        Self::from_tensors(config, tensors)
    }

    /// Weights uniform in `±1/√fan_in` per layer, forget-gate bias 1, other biases 0.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let l = config.pk.lstm_cells;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data = if name == "pk.b_lstm" {
                    (0..n).map(|j| if (l..2 * l).contains(&j) { 1.0 } else { 0.0 }).collect()
                } else {
                    let fan_in = shape[0];
                    if fan_in == 0 {
                        vec![0.0; n]
                    } else {
                        let s = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| rng.gen_range(-s..=s)).collect()
                    }
                };
                Tensor::from_parts(shape, data)
            })
            .collect();
        Self::from_tensors(config, tensors)
    }

    /// Rebuilds a model from tensors in [`ModelConfig::param_names`] order.
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(Error::Config(format!(
                "{:?} expects {} parameter tensors, got {}",
                config.variant,
                shapes.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, config needs {shape:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let pk = PkParams {
            w_pre: next(),
            w_lstm: next(),
            b_lstm: next(),
            w_post: next(),
        };
        let tk = (config.variant.routing() == Routing::Transition).then(|| TkParams { w_tk: next() });
        Ok(Self { config, pk, tk })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut v = vec![&self.pk.w_pre, &self.pk.w_lstm, &self.pk.b_lstm, &self.pk.w_post];
        if let Some(tk) = &self.tk {
            v.push(&tk.w_tk);
        }
        v
    }

    pub fn into_tensors(self) -> Vec<Tensor> {
        let mut v = vec![self.pk.w_pre, self.pk.w_lstm, self.pk.b_lstm, self.pk.w_post];
        if let Some(tk) = self.tk {
            v.push(tk.w_tk);
        }
        v
    }

    /// Total number of scalar weights.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Records all weights as differentiable leaves.
    pub fn record(&self, tape: &mut Tape) -> ParamVars {
        let vars = self.tensors().into_iter().map(|t| tape.leaf(t.clone())).collect::<Vec<_>>();
        ParamVars::from_slice(&self.config, &vars).expect("model tensors match config")
    }

    /// Records all weights as constants (inference only).
    pub fn record_constants(&self, tape: &mut Tape) -> ParamVars {
        let vars = self.tensors().into_iter().map(|t| tape.constant(t.clone())).collect::<Vec<_>>();
        ParamVars::from_slice(&self.config, &vars).expect("model tensors match config")
    }

    /// One lattice step on concrete values.
    pub fn step(&self, lattice: &Lattice, input: &Tensor, state: &LatticeState) -> Result<(Tensor, LatticeState)> {
        let mut tape = Tape::new();
        let params = self.record_constants(&mut tape);
        let input = tape.constant(input.clone());
        let sv = state.record(&mut tape);
        let (pred, next) = lattice_step(&mut tape, lattice, &params, input, &sv)?;
        let out = tape.value(pred)?.clone();
        let next = LatticeState {
            h: tape.value(next.h)?.clone(),
            c: tape.value(next.c)?.clone(),
            lateral: tape.value(next.lateral)?.clone(),
        };
        Ok((out, next))
    }
}

/// Model weights as handles on a tape.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub w_pre: Var,
    pub w_lstm: Var,
    pub b_lstm: Var,
    pub w_post: Var,
    pub w_tk: Option<Var>,
}

impl ParamVars {
    /// Handles in [`ModelConfig::param_names`] order.
    pub fn from_slice(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        let want = config.param_shapes().len();
        if vars.len() != want {
            return Err(Error::Config(format!("expected {want} parameter handles, got {}", vars.len())));
        }
        Ok(Self {
            w_pre: vars[0],
            w_lstm: vars[1],
            b_lstm: vars[2],
            w_post: vars[3],
            w_tk: vars.get(4).copied(),
        })
    }

    pub fn to_vec(&self) -> Vec<Var> {
        let mut v = vec![self.w_pre, self.w_lstm, self.b_lstm, self.w_post];
        v.extend(self.w_tk);
        v
    }
}

/// Per-cell recurrent state: LSTM hidden and cell values, and the lateral
/// outputs waiting to be read by neighbors on the next step.
#[derive(Clone, Debug, PartialEq)]
pub struct LatticeState {
    pub h: Tensor,
    pub c: Tensor,
    pub lateral: Tensor,
}

impl LatticeState {
    pub fn zeros(config: &ModelConfig, cells: usize) -> Self {
        let l = config.pk.lstm_cells;
        Self {
            h: Tensor::zeros(&[cells, l]),
            c: Tensor::zeros(&[cells, l]),
            lateral: Tensor::zeros(&[cells, config.pk.lateral_out]),
        }
    }

    pub fn reset(&mut self) {
        for t in [&mut self.h, &mut self.c, &mut self.lateral] {
            t.data_mut().fill(0.0);
        }
    }

    pub fn record(&self, tape: &mut Tape) -> StateVars {
        StateVars {
            h: tape.constant(self.h.clone()),
            c: tape.constant(self.c.clone()),
            lateral: tape.constant(self.lateral.clone()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct StateVars {
    pub h: Var,
    pub c: Var,
    pub lateral: Var,
}

/// Builds the sparse map that moves lateral outputs to neighbor inputs.
///
/// For transition routing the map only sums neighbor buffers; the shared TK
/// matrix is applied afterwards, which is equivalent because the TK is linear.
pub fn routing_map(config: &ModelConfig, topology: &MeshTopology) -> Result<GatherMap> {
    config.validate()?;
    let n = topology.cells();
    let lo = config.pk.lateral_out;
    let mut pairs = Vec::new();
    match config.variant.routing() {
        Routing::Transition => {
            for cell in 0..n {
                for (_, nb) in topology.present_neighbors(cell) {
                    for k in 0..lo {
                        pairs.push((cell * lo + k, nb * lo + k));
                    }
                }
            }
            GatherMap::new(n * lo, vec![n, lo], pairs)
        }
        Routing::Direct => {
            for cell in 0..n {
                for (d, nb) in topology.present_neighbors(cell) {
                    pairs.push((cell * 8 + d.index(), nb));
                }
            }
            GatherMap::new(n, vec![n, 8], pairs)
        }
        Routing::DirectPerNeighbor => {
            for cell in 0..n {
                for (d, nb) in topology.present_neighbors(cell) {
                    pairs.push((cell * 8 + d.index(), nb * 8 + d.opposite().index()));
                }
            }
            GatherMap::new(n * 8, vec![n, 8], pairs)
        }
    }
}

/// A model configuration bound to a topology, plus per-cell static inputs.
#[derive(Clone, Debug)]
pub struct Lattice {
    config: ModelConfig,
    topology: Arc<MeshTopology>,
    routing: Arc<GatherMap>,
    statics: Option<Tensor>,
}

impl Lattice {
    pub fn new(config: &ModelConfig, topology: Arc<MeshTopology>) -> Result<Self> {
        let routing = Arc::new(routing_map(config, &topology)?);
        let statics = (config.pk.static_in > 0).then(|| Tensor::zeros(&[topology.cells(), config.pk.static_in]));
        Ok(Self {
            config: config.clone(),
            topology,
            routing,
            statics,
        })
    }

    /// Sets the constant per-cell static features, `[cells, static_in]`.
    pub fn with_static(mut self, statics: Tensor) -> Result<Self> {
        let want = [self.topology.cells(), self.config.pk.static_in];
        if statics.shape() != want {
            return Err(Error::shape(
                "Lattice::with_static",
                format!("expected {want:?}, got {:?}", statics.shape()),
            ));
        }
        self.statics = (self.config.pk.static_in > 0).then_some(statics);
        Ok(self)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn topology(&self) -> &MeshTopology {
        &self.topology
    }

    pub fn cells(&self) -> usize {
        self.topology.cells()
    }

    pub fn zero_state(&self) -> LatticeState {
        LatticeState::zeros(&self.config, self.cells())
    }
}

pub struct PkInputs {
    pub dynamic: Var,
    pub statics: Option<Var>,
    pub lateral: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct PkOutputs {
    pub dynamic: Var,
    pub lateral: Var,
    pub h: Var,
    pub c: Var,
}

fn expect_cols(tape: &Tape, v: Var, rows: usize, cols: usize, what: &str) -> Result<()> {
    let shape = tape.value(v)?.shape();
    if shape != [rows, cols] {
        return Err(Error::shape(
            "pk_forward",
            format!("{what} must be [{rows}, {cols}], got {shape:?}"),
        ));
    }
    Ok(())
}

/// Evaluates the shared PK on a batch of rows (one row per cell).
pub fn pk_forward(
    tape: &mut Tape,
    config: &PkConfig,
    params: &ParamVars,
    inputs: &PkInputs,
    h: Var,
    c: Var,
) -> Result<PkOutputs> {
    let rows = tape.value(inputs.dynamic)?.dims2("pk_forward")?.0;
    let l = config.lstm_cells;
    expect_cols(tape, inputs.dynamic, rows, config.dyn_in, "dynamic input")?;
    expect_cols(tape, inputs.lateral, rows, config.lateral_in, "lateral input")?;
    expect_cols(tape, h, rows, l, "hidden state")?;
    expect_cols(tape, c, rows, l, "cell state")?;

    let mut parts = vec![inputs.dynamic];
    match (inputs.statics, config.static_in) {
        (Some(s), k) => {
            expect_cols(tape, s, rows, k, "static input")?;
            parts.push(s);
        }
        (None, 0) => {}
        (None, k) => {
            return Err(Error::shape("pk_forward", format!("config expects {k} static inputs, none given")));
        }
    }
    parts.push(inputs.lateral);
    let x = tape.concat_cols(&parts)?;
    let pre = tape.matmul(x, params.w_pre)?;

    let xh = tape.concat_cols(&[pre, h])?;
    let gates_w = tape.matmul(xh, params.w_lstm)?;
    let ones = tape.constant(Tensor::filled(&[rows, 1], 1.0));
    let gates_b = tape.matmul(ones, params.b_lstm)?;
    let gates = tape.add(gates_w, gates_b)?;

    let i_raw = tape.slice_cols(gates, 0, l)?;
    let f_raw = tape.slice_cols(gates, l, 2 * l)?;
    let g_raw = tape.slice_cols(gates, 2 * l, 3 * l)?;
    let o_raw = tape.slice_cols(gates, 3 * l, 4 * l)?;
    let i = tape.sigmoid(i_raw)?;
    let f = tape.sigmoid(f_raw)?;
    let g = tape.tanh(g_raw)?;
    let o = tape.sigmoid(o_raw)?;

    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_next = tape.add(keep, write)?;
    let c_act = tape.tanh(c_next)?;
    let h_next = tape.mul(o, c_act)?;

    let y = tape.matmul(h_next, params.w_post)?;
    let dynamic = tape.slice_cols(y, 0, config.dyn_out)?;
    let lateral = tape.slice_cols(y, config.dyn_out, config.output_width())?;
    Ok(PkOutputs {
        dynamic,
        lateral,
        h: h_next,
        c: c_next,
    })
}

/// Computes every cell's lateral input from the neighbors' previous-step outputs.
pub fn route_lateral(tape: &mut Tape, lattice: &Lattice, params: &ParamVars, buffers: Var) -> Result<Var> {
    let gathered = tape.gather(buffers, &lattice.routing)?;
    match lattice.config.variant.routing() {
        Routing::Transition => {
            let w_tk = params
                .w_tk
                .ok_or_else(|| Error::Config("transition routing needs TK weights".into()))?;
            tape.matmul(gathered, w_tk)
        }
        Routing::Direct | Routing::DirectPerNeighbor => Ok(gathered),
    }
}

/// One synchronous update of every cell. `input` is `[cells, dyn_in]`.
pub fn lattice_step(
    tape: &mut Tape,
    lattice: &Lattice,
    params: &ParamVars,
    input: Var,
    state: &StateVars,
) -> Result<(Var, StateVars)> {
    let n = lattice.cells();
    let shape = tape.value(input)?.shape();
    if shape != [n, lattice.config.pk.dyn_in] {
        return Err(Error::shape(
            "lattice_step",
            format!("input must be [{n}, {}], got {shape:?}", lattice.config.pk.dyn_in),
        ));
    }
    let lateral = route_lateral(tape, lattice, params, state.lateral)?;
    let statics = lattice.statics.as_ref().map(|s| tape.constant(s.clone()));
    let out = pk_forward(
        tape,
        &lattice.config.pk,
        params,
        &PkInputs {
            dynamic: input,
            statics,
            lateral,
        },
        state.h,
        state.c,
    )?;
    Ok((
        out.dynamic,
        StateVars {
            h: out.h,
            c: out.c,
            lateral: out.lateral,
        },
    ))
}

/// Concrete outputs of one PK evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PkValues {
    pub dynamic: Tensor,
    pub lateral: Tensor,
    pub h: Tensor,
    pub c: Tensor,
}

/// [`pk_forward`] on concrete values.
pub fn pk_forward_values(
    model: &Distana,
    dynamic: &Tensor,
    statics: Option<&Tensor>,
    lateral: &Tensor,
    h: &Tensor,
    c: &Tensor,
) -> Result<PkValues> {
    let mut tape = Tape::new();
    let params = model.record_constants(&mut tape);
    let inputs = PkInputs {
        dynamic: tape.constant(dynamic.clone()),
        statics: statics.map(|s| tape.constant(s.clone())),
        lateral: tape.constant(lateral.clone()),
    };
    let h = tape.constant(h.clone());
    let c = tape.constant(c.clone());
    let out = pk_forward(&mut tape, &model.config().pk, &params, &inputs, h, c)?;
    Ok(PkValues {
        dynamic: tape.value(out.dynamic)?.clone(),
        lateral: tape.value(out.lateral)?.clone(),
        h: tape.value(out.h)?.clone(),
        c: tape.value(out.c)?.clone(),
    })
}

/// Transition-kernel routing on concrete values. Fails for direct-routing configs.
pub fn lateral_route_tk(
    config: &ModelConfig,
    topology: &MeshTopology,
    tk: &TkParams,
    buffers: &Tensor,
) -> Result<Tensor> {
    if config.variant.routing() != Routing::Transition {
        return Err(Error::Config(format!("{:?} does not route through a transition kernel", config.variant)));
    }
    let map = routing_map(config, topology)?;
    let (rows, cols) = buffers.dims2("lateral_route_tk")?;
    if rows * cols != map.in_len() {
        return Err(Error::shape("lateral_route_tk", "buffer size does not match topology"));
    }
    let (lo, li) = tk.w_tk.dims2("lateral_route_tk")?;
    let summed = map.apply(buffers.data());
    let out = crate::tape::matmul_raw(&summed, tk.w_tk.data(), topology.cells(), lo, li);
    Tensor::new(vec![topology.cells(), li], out)
}

/// Direct routing on concrete values. Fails for transition-kernel configs.
pub fn lateral_route_direct(config: &ModelConfig, topology: &MeshTopology, buffers: &Tensor) -> Result<Tensor> {
    if config.variant.routing() == Routing::Transition {
        return Err(Error::Config(format!("{:?} does not use direct routing", config.variant)));
    }
    let map = routing_map(config, topology)?;
    if buffers.numel() != map.in_len() {
        return Err(Error::shape("lateral_route_direct", "buffer size does not match topology"));
    }
    Tensor::new(vec![topology.cells(), 8], map.apply(buffers.data()))
}
