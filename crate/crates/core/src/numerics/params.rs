use serde::{Deserialize, Serialize};

use super::tensor::Tensor2D;
use crate::error::{ensure_dim, Result};

/// One trainable block with its gradient and optimizer moment buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: Tensor2D,
    pub grad: Tensor2D,
    pub(crate) first_moment: Tensor2D,
    pub(crate) second_moment: Tensor2D,
}

impl ParamBlock {
    pub fn new(name: impl Into<String>, value: Tensor2D) -> Self {
        let (r, c) = value.shape();
        Self {
            name: name.into(),
            value,
            grad: Tensor2D::zeros(r, c),
            first_moment: Tensor2D::zeros(r, c),
            second_moment: Tensor2D::zeros(r, c),
        }
    }

    pub fn len(&self) -> usize {
        self.value.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named parameter blocks plus the optimizer step counter.
///
/// Serializes names, shapes and values only; gradient and moment buffers
/// come back zeroed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "StoredParams", from = "StoredParams")]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
    pub(crate) step: u64,
    pub(crate) grads_ready: bool,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self {
            blocks: Vec::new(),
            step: 0,
            grads_ready: false,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor2D) -> usize {
        self.blocks.push(ParamBlock::new(name, value));
        self.blocks.len() - 1
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn block(&self, idx: usize) -> &ParamBlock {
        &self.blocks[idx]
    }

    pub fn block_mut(&mut self, idx: usize) -> &mut ParamBlock {
        &mut self.blocks[idx]
    }

    pub fn find(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn num_params(&self) -> usize {
        self.blocks.iter().map(ParamBlock::len).sum()
    }

    /// Marks gradients as populated; backward routines call this.
    pub fn mark_grads_ready(&mut self) {
        self.grads_ready = true;
    }

    pub fn grads_ready(&self) -> bool {
        self.grads_ready
    }

    pub fn zero_grads(&mut self) {
        for b in &mut self.blocks {
            b.grad.fill(0.0);
        }
        self.grads_ready = false;
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.value.as_slice().iter().copied())
            .collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.blocks
            .iter()
            .flat_map(|b| b.grad.as_slice().iter().copied())
            .collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        ensure_dim("flat parameter vector", self.num_params(), flat.len())?;
        let mut offset = 0;
        for b in &mut self.blocks {
            let n = b.len();
            b.value
                .as_mut_slice()
                .copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(|b| b.value.is_finite())
    }
}

#[derive(Serialize, Deserialize)]
struct StoredBlock {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredParams {
    step: u64,
    blocks: Vec<StoredBlock>,
}

impl From<ParamStore> for StoredParams {
    fn from(p: ParamStore) -> Self {
        StoredParams {
            step: p.step,
            blocks: p
                .blocks
                .into_iter()
                .map(|b| {
                    let (rows, cols) = b.value.shape();
                    StoredBlock {
                        name: b.name,
                        rows,
                        cols,
                        values: b.value.as_slice().to_vec(),
                    }
                })
                .collect(),
        }
    }
}

impl From<StoredParams> for ParamStore {
    fn from(s: StoredParams) -> Self {
        let blocks = s
            .blocks
            .into_iter()
            .map(|b| {
                // A malformed block falls back to zeros of the declared shape;
                // loaders validate shapes against the model spec afterwards.
                let value = Tensor2D::from_vec(b.rows, b.cols, b.values)
                    .unwrap_or_else(|_| Tensor2D::zeros(b.rows, b.cols));
                ParamBlock::new(b.name, value)
            })
            .collect();
        ParamStore {
            blocks,
            step: s.step,
            grads_ready: false,
        }
    }
}
