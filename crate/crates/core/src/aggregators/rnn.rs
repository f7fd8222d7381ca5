//! GRU/LSTM cells and stacked recurrent aggregation with hand-derived
//! backpropagation through time.
//!
//! Cell equations are the standard ones: GRU with update/reset gates and a
//! tanh candidate, LSTM with input/forget/output gates and no peepholes.
//! A GRU layer's final state is h_T; an LSTM layer contributes c_T.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{sigmoid, SeededRng, Tensor2D};
use crate::transforms::split_halves;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Gru,
    Lstm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RnnMode {
    Forward,
    Bidirectional,
    SplitBidirectional,
}

impl RnnMode {
    /// 1 for forward, 2 for the bidirectional variants.
    pub fn direction_count(&self) -> usize {
        match self {
            RnnMode::Forward => 1,
            RnnMode::Bidirectional | RnnMode::SplitBidirectional => 2,
        }
    }
}

/// Stack shape: cell kind, per-layer hidden dims, residual connections
/// between layers, recurrent dropout rate, and direction mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RnnStackConfig {
    pub cell: CellKind,
    pub layers: Vec<usize>,
    #[serde(default)]
    pub residual: bool,
    #[serde(default)]
    pub dropout: f64,
    #[serde(default = "default_mode")]
    pub mode: RnnMode,
}

fn default_mode() -> RnnMode {
    RnnMode::Forward
}

impl RnnStackConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::config("an rnn stack needs at least one layer"));
        }
        if self.layers.iter().any(|&h| h == 0) {
            return Err(Error::config("layer hidden dims must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout rate must be in [0, 1)"));
        }
        if self.residual && self.layers.windows(2).any(|w| w[0] != w[1]) {
            return Err(Error::config(
                "residual connections require equal adjacent layer dims",
            ));
        }
        Ok(())
    }
}

/// One GRU cell's weights. Naming: `w_*` act on the input, `u_*` on the
/// previous hidden state, `b_*` are biases (stored 1 x H).
#[derive(Debug, Clone, PartialEq)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: Tensor2D,
    pub u_update: Tensor2D,
    pub b_update: Tensor2D,
    pub w_reset: Tensor2D,
    pub u_reset: Tensor2D,
    pub b_reset: Tensor2D,
    pub w_cand: Tensor2D,
    pub u_cand: Tensor2D,
    pub b_cand: Tensor2D,
}

/// One LSTM cell's weights, gate order: input, forget, cell, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_input: Tensor2D,
    pub u_input: Tensor2D,
    pub b_input: Tensor2D,
    pub w_forget: Tensor2D,
    pub u_forget: Tensor2D,
    pub b_forget: Tensor2D,
    pub w_cell: Tensor2D,
    pub u_cell: Tensor2D,
    pub b_cell: Tensor2D,
    pub w_output: Tensor2D,
    pub u_output: Tensor2D,
    pub b_output: Tensor2D,
}

#[derive(Debug, Clone, PartialEq)]
pub enum RnnCellParams {
    Gru(GruCell),
    Lstm(LstmCell),
}

fn init_matrix(rows: usize, cols: usize, fan_in: usize, rng: &mut SeededRng) -> Tensor2D {
    let std = 1.0 / (fan_in as f64).sqrt();
    let mut t = Tensor2D::zeros(rows, cols);
    for v in t.values_mut() {
        *v = rng.next_normal() * std;
    }
    t
}

impl GruCell {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        GruCell {
            input_dim,
            hidden_dim,
            w_update: init_matrix(hidden_dim, input_dim, input_dim, rng),
            u_update: init_matrix(hidden_dim, hidden_dim, hidden_dim, rng),
            b_update: Tensor2D::zeros(1, hidden_dim),
            w_reset: init_matrix(hidden_dim, input_dim, input_dim, rng),
            u_reset: init_matrix(hidden_dim, hidden_dim, hidden_dim, rng),
            b_reset: Tensor2D::zeros(1, hidden_dim),
            w_cand: init_matrix(hidden_dim, input_dim, input_dim, rng),
            u_cand: init_matrix(hidden_dim, hidden_dim, hidden_dim, rng),
            b_cand: Tensor2D::zeros(1, hidden_dim),
        }
    }

    pub fn zeros_like(&self) -> Self {
        GruCell {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_update: self.w_update.zeros_like(),
            u_update: self.u_update.zeros_like(),
            b_update: self.b_update.zeros_like(),
            w_reset: self.w_reset.zeros_like(),
            u_reset: self.u_reset.zeros_like(),
            b_reset: self.b_reset.zeros_like(),
            w_cand: self.w_cand.zeros_like(),
            u_cand: self.u_cand.zeros_like(),
            b_cand: self.b_cand.zeros_like(),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor2D)> {
        vec![
            ("w_update", &self.w_update),
            ("u_update", &self.u_update),
            ("b_update", &self.b_update),
            ("w_reset", &self.w_reset),
            ("u_reset", &self.u_reset),
            ("b_reset", &self.b_reset),
            ("w_cand", &self.w_cand),
            ("u_cand", &self.u_cand),
            ("b_cand", &self.b_cand),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor2D)> {
        vec![
            ("w_update", &mut self.w_update),
            ("u_update", &mut self.u_update),
            ("b_update", &mut self.b_update),
            ("w_reset", &mut self.w_reset),
            ("u_reset", &mut self.u_reset),
            ("b_reset", &mut self.b_reset),
            ("w_cand", &mut self.w_cand),
            ("u_cand", &mut self.u_cand),
            ("b_cand", &mut self.b_cand),
        ]
    }

    fn step_cached(&self, x: &[f64], h_prev: &[f64]) -> (Vec<f64>, GruStepCache) {
        let h = self.hidden_dim;
        let mut zl = self.w_update.matvec(x);
        add_assign(&mut zl, &self.u_update.matvec(h_prev));
        add_assign(&mut zl, self.b_update.row(0));
        let z: Vec<f64> = zl.iter().map(|&v| sigmoid(v)).collect();

        let mut rl = self.w_reset.matvec(x);
        add_assign(&mut rl, &self.u_reset.matvec(h_prev));
        add_assign(&mut rl, self.b_reset.row(0));
        let r: Vec<f64> = rl.iter().map(|&v| sigmoid(v)).collect();

        let q: Vec<f64> = r.iter().zip(h_prev).map(|(ri, hi)| ri * hi).collect();
        let mut gl = self.w_cand.matvec(x);
        add_assign(&mut gl, &self.u_cand.matvec(&q));
        add_assign(&mut gl, self.b_cand.row(0));
        let g: Vec<f64> = gl.iter().map(|&v| v.tanh()).collect();

        let mut h_new = vec![0.0; h];
        for i in 0..h {
            h_new[i] = (1.0 - z[i]) * h_prev[i] + z[i] * g[i];
        }
        let cache = GruStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            z,
            r,
            q,
            g,
        };
        (h_new, cache)
    }

    /// BPTT for one step; returns (dx, dh_prev) and accumulates into `grads`.
    fn backward_step(&self, cache: &GruStepCache, dh: &[f64], grads: &mut GruCell) -> (Vec<f64>, Vec<f64>) {
        let h = self.hidden_dim;
        let mut dzl = vec![0.0; h];
        let mut dgl = vec![0.0; h];
        let mut dh_prev = vec![0.0; h];
        for i in 0..h {
            let dz = dh[i] * (cache.g[i] - cache.h_prev[i]);
            dzl[i] = dz * cache.z[i] * (1.0 - cache.z[i]);
            let dg = dh[i] * cache.z[i];
            dgl[i] = dg * (1.0 - cache.g[i] * cache.g[i]);
            dh_prev[i] = dh[i] * (1.0 - cache.z[i]);
        }

        // Candidate path.
        grads.w_cand.add_outer(&dgl, &cache.x, 1.0);
        grads.u_cand.add_outer(&dgl, &cache.q, 1.0);
        add_assign(grads.b_cand.row_mut(0), &dgl);
        let dq = self.u_cand.matvec_t(&dgl);
        let mut drl = vec![0.0; h];
        for i in 0..h {
            let dr = dq[i] * cache.h_prev[i];
            drl[i] = dr * cache.r[i] * (1.0 - cache.r[i]);
            dh_prev[i] += dq[i] * cache.r[i];
        }
        let mut dx = self.w_cand.matvec_t(&dgl);

        // Reset gate.
        grads.w_reset.add_outer(&drl, &cache.x, 1.0);
        grads.u_reset.add_outer(&drl, &cache.h_prev, 1.0);
        add_assign(grads.b_reset.row_mut(0), &drl);
        add_assign(&mut dx, &self.w_reset.matvec_t(&drl));
        add_assign(&mut dh_prev, &self.u_reset.matvec_t(&drl));

        // Update gate.
        grads.w_update.add_outer(&dzl, &cache.x, 1.0);
        grads.u_update.add_outer(&dzl, &cache.h_prev, 1.0);
        add_assign(grads.b_update.row_mut(0), &dzl);
        add_assign(&mut dx, &self.w_update.matvec_t(&dzl));
        add_assign(&mut dh_prev, &self.u_update.matvec_t(&dzl));

        (dx, dh_prev)
    }
}

impl LstmCell {
    pub fn init(input_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        let mut cell = LstmCell {
            input_dim,
            hidden_dim,
            w_input: init_matrix(hidden_dim, input_dim, input_dim, rng),
            u_input: init_matrix(hidden_dim, hidden_dim, hidden_dim, rng),
            b_input: Tensor2D::zeros(1, hidden_dim),
            w_forget: init_matrix(hidden_dim, input_dim, input_dim, rng),
            u_forget: init_matrix(hidden_dim, hidden_dim, hidden_dim, rng),
            b_forget: Tensor2D::zeros(1, hidden_dim),
            w_cell: init_matrix(hidden_dim, input_dim, input_dim, rng),
            u_cell: init_matrix(hidden_dim, hidden_dim, hidden_dim, rng),
            b_cell: Tensor2D::zeros(1, hidden_dim),
            w_output: init_matrix(hidden_dim, input_dim, input_dim, rng),
            u_output: init_matrix(hidden_dim, hidden_dim, hidden_dim, rng),
            b_output: Tensor2D::zeros(1, hidden_dim),
        };
        // Forget-gate bias starts open so early training keeps memory.
        for v in cell.b_forget.values_mut() {
            *v = 1.0;
        }
        cell
    }

    pub fn zeros_like(&self) -> Self {
        LstmCell {
            input_dim: self.input_dim,
            hidden_dim: self.hidden_dim,
            w_input: self.w_input.zeros_like(),
            u_input: self.u_input.zeros_like(),
            b_input: self.b_input.zeros_like(),
            w_forget: self.w_forget.zeros_like(),
            u_forget: self.u_forget.zeros_like(),
            b_forget: self.b_forget.zeros_like(),
            w_cell: self.w_cell.zeros_like(),
            u_cell: self.u_cell.zeros_like(),
            b_cell: self.b_cell.zeros_like(),
            w_output: self.w_output.zeros_like(),
            u_output: self.u_output.zeros_like(),
            b_output: self.b_output.zeros_like(),
        }
    }

    fn tensors(&self) -> Vec<(&'static str, &Tensor2D)> {
        vec![
            ("w_input", &self.w_input),
            ("u_input", &self.u_input),
            ("b_input", &self.b_input),
            ("w_forget", &self.w_forget),
            ("u_forget", &self.u_forget),
            ("b_forget", &self.b_forget),
            ("w_cell", &self.w_cell),
            ("u_cell", &self.u_cell),
            ("b_cell", &self.b_cell),
            ("w_output", &self.w_output),
            ("u_output", &self.u_output),
            ("b_output", &self.b_output),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor2D)> {
        vec![
            ("w_input", &mut self.w_input),
            ("u_input", &mut self.u_input),
            ("b_input", &mut self.b_input),
            ("w_forget", &mut self.w_forget),
            ("u_forget", &mut self.u_forget),
            ("b_forget", &mut self.b_forget),
            ("w_cell", &mut self.w_cell),
            ("u_cell", &mut self.u_cell),
            ("b_cell", &mut self.b_cell),
            ("w_output", &mut self.w_output),
            ("u_output", &mut self.u_output),
            ("b_output", &mut self.b_output),
        ]
    }

    fn step_cached(&self, x: &[f64], h_prev: &[f64], c_prev: &[f64]) -> (Vec<f64>, Vec<f64>, LstmStepCache) {
        let h = self.hidden_dim;
        let gate = |w: &Tensor2D, u: &Tensor2D, b: &Tensor2D| {
            let mut l = w.matvec(x);
            add_assign(&mut l, &u.matvec(h_prev));
            add_assign(&mut l, b.row(0));
            l
        };
        let i: Vec<f64> = gate(&self.w_input, &self.u_input, &self.b_input)
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let f: Vec<f64> = gate(&self.w_forget, &self.u_forget, &self.b_forget)
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let g: Vec<f64> = gate(&self.w_cell, &self.u_cell, &self.b_cell)
            .iter()
            .map(|&v| v.tanh())
            .collect();
        let o: Vec<f64> = gate(&self.w_output, &self.u_output, &self.b_output)
            .iter()
            .map(|&v| sigmoid(v))
            .collect();
        let mut c = vec![0.0; h];
        let mut h_new = vec![0.0; h];
        for k in 0..h {
            c[k] = f[k] * c_prev[k] + i[k] * g[k];
            h_new[k] = o[k] * c[k].tanh();
        }
        let cache = LstmStepCache {
            x: x.to_vec(),
            h_prev: h_prev.to_vec(),
            c_prev: c_prev.to_vec(),
            i,
            f,
            g,
            o,
            c: c.clone(),
        };
        (h_new, c, cache)
    }

    fn backward_step(
        &self,
        cache: &LstmStepCache,
        dh: &[f64],
        dc_in: &[f64],
        grads: &mut LstmCell,
    ) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let h = self.hidden_dim;
        let mut dil = vec![0.0; h];
        let mut dfl = vec![0.0; h];
        let mut dgl = vec![0.0; h];
        let mut dol = vec![0.0; h];
        let mut dc_prev = vec![0.0; h];
        for k in 0..h {
            let tanh_c = cache.c[k].tanh();
            dol[k] = dh[k] * tanh_c * cache.o[k] * (1.0 - cache.o[k]);
            let dc = dc_in[k] + dh[k] * cache.o[k] * (1.0 - tanh_c * tanh_c);
            dfl[k] = dc * cache.c_prev[k] * cache.f[k] * (1.0 - cache.f[k]);
            dil[k] = dc * cache.g[k] * cache.i[k] * (1.0 - cache.i[k]);
            dgl[k] = dc * cache.i[k] * (1.0 - cache.g[k] * cache.g[k]);
            dc_prev[k] = dc * cache.f[k];
        }

        let mut dx = vec![0.0; self.input_dim];
        let mut dh_prev = vec![0.0; h];
        let apply = |dl: &[f64],
                         w: &Tensor2D,
                         u: &Tensor2D,
                         gw: &mut Tensor2D,
                         gu: &mut Tensor2D,
                         gb: &mut Tensor2D,
                         dx: &mut Vec<f64>,
                         dh_prev: &mut Vec<f64>| {
            gw.add_outer(dl, &cache.x, 1.0);
            gu.add_outer(dl, &cache.h_prev, 1.0);
            add_assign(gb.row_mut(0), dl);
            add_assign(dx, &w.matvec_t(dl));
            add_assign(dh_prev, &u.matvec_t(dl));
        };
        apply(&dil, &self.w_input, &self.u_input, &mut grads.w_input, &mut grads.u_input, &mut grads.b_input, &mut dx, &mut dh_prev);
        apply(&dfl, &self.w_forget, &self.u_forget, &mut grads.w_forget, &mut grads.u_forget, &mut grads.b_forget, &mut dx, &mut dh_prev);
        apply(&dgl, &self.w_cell, &self.u_cell, &mut grads.w_cell, &mut grads.u_cell, &mut grads.b_cell, &mut dx, &mut dh_prev);
        apply(&dol, &self.w_output, &self.u_output, &mut grads.w_output, &mut grads.u_output, &mut grads.b_output, &mut dx, &mut dh_prev);
        (dx, dh_prev, dc_prev)
    }
}

/// One GRU update `h = (1-z) ⊙ h_prev + z ⊙ tanh-candidate`.
pub fn gru_step(params: &GruCell, x: &[f64], h_prev: &[f64]) -> Result<Vec<f64>> {
    if x.len() != params.input_dim || h_prev.len() != params.hidden_dim {
        return Err(Error::argument(format!(
            "gru step wants input {} / hidden {}, got {} / {}",
            params.input_dim,
            params.hidden_dim,
            x.len(),
            h_prev.len()
        )));
    }
    Ok(params.step_cached(x, h_prev).0)
}

/// One LSTM update, returning `(h, c)`.
pub fn lstm_step(
    params: &LstmCell,
    x: &[f64],
    h_prev: &[f64],
    c_prev: &[f64],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if x.len() != params.input_dim || h_prev.len() != params.hidden_dim || c_prev.len() != params.hidden_dim {
        return Err(Error::argument(format!(
            "lstm step wants input {} / hidden {}, got {} / {} / {}",
            params.input_dim,
            params.hidden_dim,
            x.len(),
            h_prev.len(),
            c_prev.len()
        )));
    }
    let (h, c, _) = params.step_cached(x, h_prev, c_prev);
    Ok((h, c))
}

impl RnnCellParams {
    pub fn init(kind: CellKind, input_dim: usize, hidden_dim: usize, rng: &mut SeededRng) -> Self {
        match kind {
            CellKind::Gru => RnnCellParams::Gru(GruCell::init(input_dim, hidden_dim, rng)),
            CellKind::Lstm => RnnCellParams::Lstm(LstmCell::init(input_dim, hidden_dim, rng)),
        }
    }

    pub fn hidden_dim(&self) -> usize {
        match self {
            RnnCellParams::Gru(c) => c.hidden_dim,
            RnnCellParams::Lstm(c) => c.hidden_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        match self {
            RnnCellParams::Gru(c) => c.input_dim,
            RnnCellParams::Lstm(c) => c.input_dim,
        }
    }

    pub fn zeros_like(&self) -> Self {
        match self {
            RnnCellParams::Gru(c) => RnnCellParams::Gru(c.zeros_like()),
            RnnCellParams::Lstm(c) => RnnCellParams::Lstm(c.zeros_like()),
        }
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Tensor2D)> {
        match self {
            RnnCellParams::Gru(c) => c.tensors(),
            RnnCellParams::Lstm(c) => c.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<(&'static str, &mut Tensor2D)> {
        match self {
            RnnCellParams::Gru(c) => c.tensors_mut(),
            RnnCellParams::Lstm(c) => c.tensors_mut(),
        }
    }
}

enum StepCache {
    Gru(GruStepCache),
    Lstm(LstmStepCache),
}

struct GruStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    q: Vec<f64>,
    g: Vec<f64>,
}

struct LstmStepCache {
    x: Vec<f64>,
    h_prev: Vec<f64>,
    c_prev: Vec<f64>,
    i: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    o: Vec<f64>,
    c: Vec<f64>,
}

struct LayerCache {
    steps: Vec<StepCache>,
    in_masks: Option<Vec<Vec<f64>>>,
    out_masks: Option<Vec<Vec<f64>>>,
}

struct DirectionCache {
    layer_inputs: Vec<Tensor2D>,
    layer_caches: Vec<LayerCache>,
    residual_applied: Vec<bool>,
}

/// Caches of one aggregation pass, consumed by [`RnnStack::backward`].
pub struct RnnCache {
    directions: Vec<DirectionCache>,
}

/// A stack of recurrent cells with optional second direction.
/// `directions[1]`, when present, runs on the reversed (or split-reversed)
/// sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct RnnStack {
    pub config: RnnStackConfig,
    pub directions: Vec<Vec<RnnCellParams>>,
}

impl RnnStack {
    pub fn init(config: RnnStackConfig, input_dim: usize, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        if input_dim == 0 {
            return Err(Error::config("rnn input dim must be >= 1"));
        }
        let mut directions = Vec::new();
        for _ in 0..config.mode.direction_count() {
            let mut layers = Vec::new();
            let mut dim = input_dim;
            for &hidden in &config.layers {
                layers.push(RnnCellParams::init(config.cell, dim, hidden, rng));
                dim = hidden;
            }
            directions.push(layers);
        }
        Ok(RnnStack { config, directions })
    }

    /// Descriptor length: direction count times the sum of layer dims.
    pub fn descriptor_dim(&self) -> usize {
        self.config.mode.direction_count() * self.config.layers.iter().sum::<usize>()
    }

    pub fn zeros_like(&self) -> Self {
        RnnStack {
            config: self.config.clone(),
            directions: self
                .directions
                .iter()
                .map(|layers| layers.iter().map(|c| c.zeros_like()).collect())
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<(String, &Tensor2D)> {
        let mut out = Vec::new();
        for (d, layers) in self.directions.iter().enumerate() {
            for (l, cell) in layers.iter().enumerate() {
                for (name, t) in cell.tensors() {
                    out.push((format!("dir{d}.layer{l}.{name}"), t));
                }
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor2D)> {
        let mut out = Vec::new();
        for (d, layers) in self.directions.iter_mut().enumerate() {
            for (l, cell) in layers.iter_mut().enumerate() {
                for (name, t) in cell.tensors_mut() {
                    out.push((format!("dir{d}.layer{l}.{name}"), t));
                }
            }
        }
        out
    }

    /// Aggregates a frame sequence into a descriptor: the concatenation over
    /// directions and layers of each layer's final state. Dropout masks are
    /// drawn from `rng` only when `training` and the rate is nonzero.
    pub fn aggregate(
        &self,
        frames: &Tensor2D,
        training: bool,
        rng: &mut SeededRng,
    ) -> Result<(Vec<f64>, RnnCache)> {
        if frames.rows() == 0 {
            return Err(Error::argument("rnn aggregation needs at least one frame"));
        }
        if frames.cols() != self.directions[0][0].input_dim() {
            return Err(Error::argument(format!(
                "frame dim {} does not match rnn input dim {}",
                frames.cols(),
                self.directions[0][0].input_dim()
            )));
        }
        let inputs: Vec<Tensor2D> = match self.config.mode {
            RnnMode::Forward => vec![frames.clone()],
            RnnMode::Bidirectional => vec![frames.clone(), frames.reversed_rows()],
            RnnMode::SplitBidirectional => {
                let (first, second) = split_halves(frames)?;
                if first.rows() == 0 {
                    return Err(Error::argument(
                        "split-bidirectional aggregation needs at least 2 frames",
                    ));
                }
                vec![first, second]
            }
        };

        let dropout = if training && self.config.dropout > 0.0 {
            Some(self.config.dropout)
        } else {
            None
        };

        let mut descriptor = Vec::with_capacity(self.descriptor_dim());
        let mut caches = Vec::with_capacity(self.directions.len());
        for (layers, input) in self.directions.iter().zip(&inputs) {
            let (states, cache) = run_direction(layers, input, self.config.residual, dropout, rng);
            descriptor.extend(states);
            caches.push(cache);
        }
        Ok((descriptor, RnnCache { directions: caches }))
    }

    /// Inference-mode descriptor (no dropout, no randomness).
    pub fn infer(&self, frames: &Tensor2D) -> Result<Vec<f64>> {
        let mut rng = SeededRng::new(0);
        Ok(self.aggregate(frames, false, &mut rng)?.0)
    }

    /// Accumulates parameter gradients for `d_descriptor` into `grads`.
    pub fn backward(&self, cache: &RnnCache, d_descriptor: &[f64], grads: &mut RnnStack) {
        debug_assert_eq!(d_descriptor.len(), self.descriptor_dim());
        let per_direction: usize = self.config.layers.iter().sum();
        for (d, (layers, dir_cache)) in self.directions.iter().zip(&cache.directions).enumerate() {
            let d_states = &d_descriptor[d * per_direction..(d + 1) * per_direction];
            backward_direction(
                layers,
                dir_cache,
                d_states,
                &self.config.layers,
                grads.directions[d].as_mut_slice(),
            );
        }
    }
}

fn dropout_mask(len: usize, rate: f64, rng: &mut SeededRng) -> Vec<f64> {
    let keep = 1.0 - rate;
    (0..len)
        .map(|_| if rng.next_f64() < rate { 0.0 } else { 1.0 / keep })
        .collect()
}

/// Runs every layer of one direction over `input`, returning the
/// concatenated final states and the caches for BPTT.
fn run_direction(
    layers: &[RnnCellParams],
    input: &Tensor2D,
    residual: bool,
    dropout: Option<f64>,
    rng: &mut SeededRng,
) -> (Vec<f64>, DirectionCache) {
    let t = input.rows();
    let mut states = Vec::new();
    let mut layer_inputs = Vec::with_capacity(layers.len());
    let mut layer_caches = Vec::with_capacity(layers.len());
    let mut residual_applied = Vec::with_capacity(layers.len());
    let mut current = input.clone();

    for cell in layers {
        let hidden = cell.hidden_dim();
        let mut h = vec![0.0; hidden];
        let mut c = vec![0.0; hidden];
        let mut outputs = Tensor2D::zeros(t, hidden);
        let mut steps = Vec::with_capacity(t);
        let (mut in_masks, mut out_masks) = (None, None);
        if dropout.is_some() {
            in_masks = Some(Vec::with_capacity(t));
            out_masks = Some(Vec::with_capacity(t));
        }

        for step in 0..t {
            let mut x = current.row(step).to_vec();
            if let Some(rate) = dropout {
                let mask = dropout_mask(x.len(), rate, rng);
                for (xi, m) in x.iter_mut().zip(&mask) {
                    *xi *= m;
                }
                in_masks.as_mut().unwrap().push(mask);
            }
            let (h_new, cache) = match cell {
                RnnCellParams::Gru(g) => {
                    let (h_new, cache) = g.step_cached(&x, &h);
                    (h_new, StepCache::Gru(cache))
                }
                RnnCellParams::Lstm(l) => {
                    let (h_new, c_new, cache) = l.step_cached(&x, &h, &c);
                    c = c_new;
                    (h_new, StepCache::Lstm(cache))
                }
            };
            h = h_new;
            let out_row = outputs.row_mut(step);
            out_row.copy_from_slice(&h);
            if let Some(rate) = dropout {
                let mask = dropout_mask(hidden, rate, rng);
                for (o, m) in out_row.iter_mut().zip(&mask) {
                    *o *= m;
                }
                out_masks.as_mut().unwrap().push(mask);
            }
            steps.push(cache);
        }

        // GRU contributes h_T, LSTM contributes c_T.
        match cell {
            RnnCellParams::Gru(_) => states.extend_from_slice(&h),
            RnnCellParams::Lstm(_) => states.extend_from_slice(&c),
        }

        let applied = residual && current.cols() == hidden;
        let next = if applied {
            let mut sum = outputs.clone();
            sum.add_scaled(&current, 1.0);
            sum
        } else {
            outputs
        };
        layer_inputs.push(current);
        layer_caches.push(LayerCache {
            steps,
            in_masks,
            out_masks,
        });
        residual_applied.push(applied);
        current = next;
    }

    (
        states,
        DirectionCache {
            layer_inputs,
            layer_caches,
            residual_applied,
        },
    )
}

fn backward_direction(
    layers: &[RnnCellParams],
    cache: &DirectionCache,
    d_states: &[f64],
    layer_dims: &[usize],
    grads: &mut [RnnCellParams],
) {
    let t = cache.layer_inputs[0].rows();
    // Gradient flowing into each layer's (post-residual) output sequence.
    // The top layer's sequence feeds nothing.
    let top_hidden = *layer_dims.last().unwrap();
    let mut d_seq = Tensor2D::zeros(t, top_hidden);

    let mut offsets = Vec::with_capacity(layers.len());
    let mut acc = 0;
    for &dim in layer_dims {
        offsets.push(acc);
        acc += dim;
    }

    for l in (0..layers.len()).rev() {
        let cell = &layers[l];
        let layer_cache = &cache.layer_caches[l];
        let hidden = cell.hidden_dim();
        let d_final = &d_states[offsets[l]..offsets[l] + hidden];

        // d_seq is the gradient w.r.t. this layer's post-residual sequence;
        // the masked cell outputs receive it directly, the skip path (when
        // residual was applied) forwards it to the layer input as well.
        let mut d_input = Tensor2D::zeros(t, cell.input_dim());
        if cache.residual_applied[l] {
            d_input.add_scaled(&d_seq, 1.0);
        }

        let mut dh_carry = vec![0.0; hidden];
        let mut dc_carry = vec![0.0; hidden];
        match cell {
            RnnCellParams::Gru(_) => add_assign(&mut dh_carry, d_final),
            RnnCellParams::Lstm(_) => add_assign(&mut dc_carry, d_final),
        }

        for step in (0..t).rev() {
            let mut dh = dh_carry.clone();
            // Output-mask path from the sequence gradient.
            let d_out = d_seq.row(step);
            match &layer_cache.out_masks {
                Some(masks) => {
                    for ((dhi, &doi), &m) in dh.iter_mut().zip(d_out).zip(&masks[step]) {
                        *dhi += doi * m;
                    }
                }
                None => add_assign(&mut dh, d_out),
            }

            let (mut dx, dh_prev, dc_prev) = match (cell, &layer_cache.steps[step]) {
                (RnnCellParams::Gru(g), StepCache::Gru(c)) => {
                    let gru_grads = match &mut grads[l] {
                        RnnCellParams::Gru(gg) => gg,
                        _ => unreachable!("cell kind mismatch"),
                    };
                    let (dx, dh_prev) = g.backward_step(c, &dh, gru_grads);
                    (dx, dh_prev, vec![0.0; hidden])
                }
                (RnnCellParams::Lstm(lstm), StepCache::Lstm(c)) => {
                    let lstm_grads = match &mut grads[l] {
                        RnnCellParams::Lstm(lg) => lg,
                        _ => unreachable!("cell kind mismatch"),
                    };
                    let (dx, dh_prev, dc_prev) = lstm.backward_step(c, &dh, &dc_carry, lstm_grads);
                    (dx, dh_prev, dc_prev)
                }
                _ => unreachable!("cell kind mismatch"),
            };
            dh_carry = dh_prev;
            dc_carry = dc_prev;

            if let Some(masks) = &layer_cache.in_masks {
                for (dxi, &m) in dx.iter_mut().zip(&masks[step]) {
                    *dxi *= m;
                }
            }
            add_assign(d_input.row_mut(step), &dx);
        }

        d_seq = d_input;
    }
}

#[inline]
fn add_assign(dst: &mut [f64], src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}
