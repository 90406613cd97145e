//! The two temporal frameworks: a parameter-shared two-layer GCN with
//! temporal-smoothness state carry (DynGCN), and the same GCN feeding a
//! GRU cell (GRUGCN). Hidden state is carried across steps as values only;
//! gradients never cross a step boundary unless the caller widens the
//! backpropagation window.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{glorot_values, Tape, Tensor};
use crate::error::{Error, Result};
use crate::graph::NormalizedAdjacency;
use crate::matrix::Matrix;
use crate::norms::{self, NormKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Framework {
    DynGcn,
    GruGcn,
}

impl Framework {
    pub fn parse(name: &str) -> Result<Framework> {
        match name {
            "dyn-gcn" | "dyn_gcn" => Ok(Framework::DynGcn),
            "gru-gcn" | "gru_gcn" => Ok(Framework::GruGcn),
            other => Err(Error::Validation(format!(
                "unknown framework {other:?} (expected dyn-gcn|gru-gcn)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Framework::DynGcn => "dyn-gcn",
            Framework::GruGcn => "gru-gcn",
        }
    }
}

/// Two-layer graph convolution weights, shared by every time step.
pub struct GcnBlock {
    pub w1: Tensor,
    pub w2: Tensor,
    pub dropout_p: f64,
}

impl GcnBlock {
    pub fn new<R: Rng>(dim: usize, dropout_p: f64, rng: &mut R) -> Result<GcnBlock> {
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Validation(format!(
                "dropout {dropout_p} must be in [0, 1)"
            )));
        }
        Ok(GcnBlock {
            w1: Tensor::parameter(dim, dim, glorot_values(dim, dim, dim, dim, rng))?,
            w2: Tensor::parameter(dim, dim, glorot_values(dim, dim, dim, dim, rng))?,
            dropout_p,
        })
    }
}

/// GRU gate weights: input map, hidden map, and bias per gate.
pub struct RecurrentCell {
    pub w_update: Tensor,
    pub u_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub u_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
}

impl RecurrentCell {
    pub fn new<R: Rng>(dim: usize, rng: &mut R) -> Result<RecurrentCell> {
        let weight = |rng: &mut R| -> Result<Tensor> {
            Tensor::parameter(dim, dim, glorot_values(dim, dim, dim, dim, rng))
        };
        Ok(RecurrentCell {
            w_update: weight(rng)?,
            u_update: weight(rng)?,
            b_update: Tensor::parameter(1, dim, vec![0.0; dim])?,
            w_reset: weight(rng)?,
            u_reset: weight(rng)?,
            b_reset: Tensor::parameter(1, dim, vec![0.0; dim])?,
            w_cand: weight(rng)?,
            u_cand: weight(rng)?,
            b_cand: Tensor::parameter(1, dim, vec![0.0; dim])?,
        })
    }

    /// `h' = (1 - u) ⊙ h + u ⊙ c` with standard gate equations.
    pub fn forward(&self, tape: &mut Tape, input: &Tensor, hidden: &Tensor) -> Result<Tensor> {
        let gate = |tape: &mut Tape, w: &Tensor, u: &Tensor, b: &Tensor, h: &Tensor| {
            let xi = tape.matmul(input, w)?;
            let hh = tape.matmul(h, u)?;
            let s = tape.add(&xi, &hh)?;
            tape.add(&s, b)
        };
        let u = {
            let pre = gate(tape, &self.w_update, &self.u_update, &self.b_update, hidden)?;
            tape.sigmoid(&pre)?
        };
        let r = {
            let pre = gate(tape, &self.w_reset, &self.u_reset, &self.b_reset, hidden)?;
            tape.sigmoid(&pre)?
        };
        let gated_hidden = tape.hadamard(&r, hidden)?;
        let c = {
            let pre = gate(tape, &self.w_cand, &self.u_cand, &self.b_cand, &gated_hidden)?;
            tape.tanh(&pre)?
        };
        let one_minus_u = tape.affine(&u, -1.0, 1.0)?;
        let keep = tape.hadamard(&one_minus_u, hidden)?;
        let update = tape.hadamard(&u, &c)?;
        tape.add(&keep, &update)
    }
}

/// Learnable parameters plus the per-node hidden state carried across steps.
pub struct ModelState {
    pub block: GcnBlock,
    pub cell: Option<RecurrentCell>,
    pub hidden: Tensor,
    pub framework: Framework,
    pub norm: NormKind,
    pub dim: usize,
    initial_hidden: Matrix,
}

impl ModelState {
    pub fn new<R: Rng>(
        framework: Framework,
        dim: usize,
        dropout_p: f64,
        norm: NormKind,
        initial_nodes: usize,
        rng: &mut R,
    ) -> Result<ModelState> {
        let block = GcnBlock::new(dim, dropout_p, rng)?;
        let cell = match framework {
            Framework::DynGcn => None,
            Framework::GruGcn => Some(RecurrentCell::new(dim, rng)?),
        };
        let h0 = Matrix::new(
            initial_nodes,
            dim,
            glorot_values(initial_nodes, dim, dim, dim, rng),
        )?;
        Ok(ModelState {
            block,
            cell,
            hidden: Tensor::from_matrix(&h0),
            framework,
            norm,
            dim,
            initial_hidden: h0,
        })
    }

    /// Reset the carried state to the matrix drawn at construction time.
    pub fn reset_hidden(&mut self) {
        self.hidden = Tensor::from_matrix(&self.initial_hidden);
    }

    /// Snap the carried state to a plain constant (the gradient barrier
    /// between backpropagation windows).
    pub fn detach_hidden(&mut self) {
        self.hidden = self.hidden.detach();
    }

    pub fn parameters(&self) -> Vec<Tensor> {
        let mut params = vec![self.block.w1.clone(), self.block.w2.clone()];
        if let Some(c) = &self.cell {
            params.extend([
                c.w_update.clone(),
                c.u_update.clone(),
                c.b_update.clone(),
                c.w_reset.clone(),
                c.u_reset.clone(),
                c.b_reset.clone(),
                c.w_cand.clone(),
                c.u_cand.clone(),
                c.b_cand.clone(),
            ]);
        }
        params
    }

    pub fn parameter_names(&self) -> Vec<&'static str> {
        match self.framework {
            Framework::DynGcn => vec!["w1", "w2"],
            Framework::GruGcn => vec![
                "w1", "w2", "gru.w_update", "gru.u_update", "gru.b_update", "gru.w_reset",
                "gru.u_reset", "gru.b_reset", "gru.w_cand", "gru.u_cand", "gru.b_cand",
            ],
        }
    }
}

/// `Ã · ReLU(Ã · dropout(x) · W1)` then `dropout` and `· W2`; dropout sits
/// before each convolution layer and is disabled in eval mode.
pub fn gcn_forward<R: Rng>(
    tape: &mut Tape,
    block: &GcnBlock,
    adj: &Rc<NormalizedAdjacency>,
    x: &Tensor,
    train: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if adj.dim() != x.rows() {
        return Err(Error::Shape {
            op: "gcn_forward",
            expected: (adj.dim(), x.cols()),
            got: x.shape(),
        });
    }
    let x0 = tape.dropout(x, block.dropout_p, train, rng)?;
    let h = tape.spmm_node(adj, &x0)?;
    let h = tape.matmul(&h, &block.w1)?;
    let h = tape.relu(&h)?;
    let h1 = tape.dropout(&h, block.dropout_p, train, rng)?;
    let z = tape.spmm_node(adj, &h1)?;
    tape.matmul(&z, &block.w2)
}

/// Extend the carried hidden state with Glorot-initialized rows for newly
/// appeared nodes; existing rows are untouched. Fan is `(dim, dim)` since
/// new rows have no incoming layer.
pub fn grow_state<R: Rng>(state: &mut ModelState, new_n: usize, rng: &mut R) -> Result<()> {
    let old_n = state.hidden.rows();
    if new_n < old_n {
        return Err(Error::Validation(format!(
            "cannot shrink state from {old_n} to {new_n} rows; the node set never shrinks"
        )));
    }
    if new_n == old_n {
        return Ok(());
    }
    grow_with_rows(
        state,
        new_n,
        glorot_values(new_n - old_n, state.dim, state.dim, state.dim, rng),
    )
}

/// Growth with caller-supplied rows; diagnostics use this to feed identical
/// new-node values to paired runs.
pub fn grow_with_rows(state: &mut ModelState, new_n: usize, rows: Vec<f64>) -> Result<()> {
    let old_n = state.hidden.rows();
    let dim = state.dim;
    if rows.len() != (new_n - old_n) * dim {
        return Err(Error::Validation(format!(
            "growth rows length {} does not match {} new rows of width {dim}",
            rows.len(),
            new_n - old_n
        )));
    }
    let mut values = state.hidden.values().clone();
    values.extend_from_slice(&rows);
    state.hidden = Tensor::from_values(new_n, dim, values)?;
    Ok(())
}

fn step_inner<R: Rng>(
    state: &mut ModelState,
    tape: &mut Tape,
    adj: &Rc<NormalizedAdjacency>,
    train: bool,
    rng: &mut R,
) -> Result<Tensor> {
    grow_state(state, adj.dim(), rng)?;
    let x = state.hidden.clone();
    let z_raw = match state.framework {
        Framework::DynGcn => gcn_forward(tape, &state.block, adj, &x, train, rng)?,
        Framework::GruGcn => {
            let cell = state
                .cell
                .as_ref()
                .ok_or_else(|| Error::Validation("gru-gcn state missing recurrent cell".into()))?;
            let s = gcn_forward(tape, &state.block, adj, &x, train, rng)?;
            cell.forward(tape, &s, &x)?
        }
    };
    let z = norms::apply(tape, &z_raw, state.norm)?;
    state.hidden = z.clone();
    Ok(z)
}

/// One temporal-smoothness step: grow, convolve, normalize, carry detached.
pub fn step_dyn_gcn<R: Rng>(
    state: &mut ModelState,
    tape: &mut Tape,
    adj: &Rc<NormalizedAdjacency>,
    train: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if state.framework != Framework::DynGcn {
        return Err(Error::Validation("state framework is not dyn-gcn".into()));
    }
    let z = step_inner(state, tape, adj, train, rng)?;
    state.detach_hidden();
    Ok(z)
}

/// One recurrent step: grow, convolve, GRU-update, normalize, carry detached.
pub fn step_gru_gcn<R: Rng>(
    state: &mut ModelState,
    tape: &mut Tape,
    adj: &Rc<NormalizedAdjacency>,
    train: bool,
    rng: &mut R,
) -> Result<Tensor> {
    if state.framework != Framework::GruGcn {
        return Err(Error::Validation("state framework is not gru-gcn".into()));
    }
    let z = step_inner(state, tape, adj, train, rng)?;
    state.detach_hidden();
    Ok(z)
}

/// Step without the internal detach; the training loop places the gradient
/// barrier itself at backpropagation-window boundaries.
pub fn step_windowed<R: Rng>(
    state: &mut ModelState,
    tape: &mut Tape,
    adj: &Rc<NormalizedAdjacency>,
    train: bool,
    rng: &mut R,
) -> Result<Tensor> {
    step_inner(state, tape, adj, train, rng)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DYNEMB01";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub framework: Framework,
    pub dim: usize,
    pub dropout_p: f64,
    pub norm: NormKind,
    pub seed: u64,
}

/// Serialized model: JSON header plus shape-tagged f64 arrays
/// (parameters first, then the initial hidden matrix).
pub struct ModelCheckpoint {
    pub header: CheckpointHeader,
    pub tensors: Vec<(String, Matrix)>,
}

impl ModelCheckpoint {
    pub fn from_state(state: &ModelState, seed: u64) -> ModelCheckpoint {
        let mut tensors: Vec<(String, Matrix)> = state
            .parameter_names()
            .into_iter()
            .map(str::to_owned)
            .zip(state.parameters().iter().map(Tensor::to_matrix))
            .collect();
        tensors.push(("hidden0".into(), state.initial_hidden.clone()));
        ModelCheckpoint {
            header: CheckpointHeader {
                framework: state.framework,
                dim: state.dim,
                dropout_p: state.block.dropout_p,
                norm: state.norm,
                seed,
            },
            tensors,
        }
    }

    /// Rebuild a model with the stored parameters and initial hidden state.
    pub fn to_state(&self) -> Result<ModelState> {
        let find = |name: &str| -> Result<&Matrix> {
            self.tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Format(format!("checkpoint missing tensor {name:?}")))
        };
        let param = |name: &str| -> Result<Tensor> {
            let m = find(name)?;
            Tensor::parameter(m.rows, m.cols, m.data.clone())
        };
        let block = GcnBlock {
            w1: param("w1")?,
            w2: param("w2")?,
            dropout_p: self.header.dropout_p,
        };
        let cell = match self.header.framework {
            Framework::DynGcn => None,
            Framework::GruGcn => Some(RecurrentCell {
                w_update: param("gru.w_update")?,
                u_update: param("gru.u_update")?,
                b_update: param("gru.b_update")?,
                w_reset: param("gru.w_reset")?,
                u_reset: param("gru.u_reset")?,
                b_reset: param("gru.b_reset")?,
                w_cand: param("gru.w_cand")?,
                u_cand: param("gru.u_cand")?,
                b_cand: param("gru.b_cand")?,
            }),
        };
        let h0 = find("hidden0")?.clone();
        Ok(ModelState {
            block,
            cell,
            hidden: Tensor::from_matrix(&h0),
            framework: self.header.framework,
            norm: self.header.norm,
            dim: self.header.dim,
            initial_hidden: h0,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = serde_json::to_vec(&self.header)
            .map_err(|e| Error::Format(format!("header serialization failed: {e}")))?;
        let mut f = fs::File::create(path)?;
        f.write_all(CHECKPOINT_MAGIC)?;
        f.write_all(&(header.len() as u64).to_le_bytes())?;
        f.write_all(&header)?;
        f.write_all(&(self.tensors.len() as u64).to_le_bytes())?;
        for (name, m) in &self.tensors {
            f.write_all(&(name.len() as u64).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
            f.write_all(&(m.rows as u64).to_le_bytes())?;
            f.write_all(&(m.cols as u64).to_le_bytes())?;
            for v in &m.data {
                f.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ModelCheckpoint> {
        let mut f = fs::File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format(format!(
                "{} is not a model checkpoint (bad magic)",
                path.display()
            )));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |f: &mut fs::File| -> Result<u64> {
            f.read_exact(&mut u64buf)?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let header_len = read_u64(&mut f)? as usize;
        let mut header_bytes = vec![0u8; header_len];
        f.read_exact(&mut header_bytes)?;
        let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Format(format!("invalid checkpoint header: {e}")))?;
        let count = read_u64(&mut f)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u64(&mut f)? as usize;
            let mut name = vec![0u8; name_len];
            f.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("non-utf8 tensor name in checkpoint".into()))?;
            let rows = read_u64(&mut f)? as usize;
            let cols = read_u64(&mut f)? as usize;
            let mut data = Vec::with_capacity(rows * cols);
            let mut vbuf = [0u8; 8];
            for _ in 0..rows * cols {
                f.read_exact(&mut vbuf)?;
                data.push(f64::from_le_bytes(vbuf));
            }
            tensors.push((name, Matrix::new(rows, cols, data)?));
        }
        Ok(ModelCheckpoint { header, tensors })
    }
}

/// Deterministic eval-mode forward pass over a snapshot sequence: returns
/// per-step embeddings. New-node rows are drawn from `replay_seed`, so a
/// checkpoint plus a seed reproduces the trajectory bit-exactly.
pub fn replay_embeddings(
    state: &mut ModelState,
    adjacencies: &[Rc<NormalizedAdjacency>],
    replay_seed: u64,
) -> Result<Vec<Matrix>> {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(replay_seed);
    state.reset_hidden();
    let mut tape = Tape::new();
    let mut out = Vec::with_capacity(adjacencies.len());
    for adj in adjacencies {
        let z = match state.framework {
            Framework::DynGcn => step_dyn_gcn(state, &mut tape, adj, false, &mut rng)?,
            Framework::GruGcn => step_gru_gcn(state, &mut tape, adj, false, &mut rng)?,
        };
        out.push(z.to_matrix());
        tape.discard();
    }
    Ok(out)
}
