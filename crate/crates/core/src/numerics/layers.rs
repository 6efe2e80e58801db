//! Parameter registration and composite blocks built on the tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{NodeId, ParamStore, Tape, Tensor};
use crate::error::{Error, Result};

/// Seeded parameter initializer.
pub struct ParamInit<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
}

impl ParamInit<'_> {
    /// Xavier-uniform weight `[d_in, d_out]` and zero bias.
    pub fn dense(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<()> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        self.dense_with(prefix, d_in, d_out, bound)
    }

    pub fn dense_with(&mut self, prefix: &str, d_in: usize, d_out: usize, bound: f64) -> Result<()> {
        let w = self.uniform(&[d_in, d_out], bound);
        self.store.insert(format!("{prefix}.w"), w)?;
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[d_out]))?;
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, d: usize) -> Result<()> {
        self.store.insert(format!("{prefix}.g"), Tensor::full(&[d], 1.0))?;
        self.store.insert(format!("{prefix}.b"), Tensor::zeros(&[d]))?;
        Ok(())
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor {
        Tensor::from_fn(shape, |_| self.rng.gen_range(-bound..=bound))
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.store.insert(name, value).map(|_| ())
    }
}

/// Widths of a transformer block.
#[derive(Clone, Copy, Debug)]
pub struct BlockShape {
    pub width: usize,
    pub hidden: usize,
    pub heads: usize,
}

/// Registers the parameters used by [`sa_block`].
pub fn init_sa_block(init: &mut ParamInit<'_>, prefix: &str, shape: BlockShape) -> Result<()> {
    let BlockShape { width, hidden, heads } = shape;
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
    }
    init.norm(&format!("{prefix}.ln1"), width)?;
    init.dense(&format!("{prefix}.qkv"), width, 3 * width)?;
    init.dense(&format!("{prefix}.proj"), width, width)?;
    init.norm(&format!("{prefix}.ln2"), width)?;
    init.dense(&format!("{prefix}.fc1"), width, hidden)?;
    init.dense(&format!("{prefix}.fc2"), hidden, width)?;
    Ok(())
}

/// Pre-norm self-attention block.
pub fn sa_block(tape: &mut Tape<'_>, x: NodeId, prefix: &str, heads: usize) -> Result<NodeId> {
    let width = tape.value(x).last_dim();
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!("width {width} not divisible by {heads} heads")));
    }
    let h = tape.norm(x, &format!("{prefix}.ln1"))?;
    let qkv = tape.dense(h, &format!("{prefix}.qkv"))?;
    let a = tape.attention(qkv, heads)?;
    let o = tape.dense(a, &format!("{prefix}.proj"))?;
    let x = tape.add(x, o)?;
    let m = mlp(tape, x, prefix)?;
    tape.add(x, m)
}

/// `fc2(gelu(fc1(LN2(x))))`.
fn mlp(tape: &mut Tape<'_>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let h = tape.norm(x, &format!("{prefix}.ln2"))?;
    let h = tape.dense(h, &format!("{prefix}.fc1"))?;
    let h = tape.gelu(h)?;
    tape.dense(h, &format!("{prefix}.fc2"))
}

/// Residual MLP sub-block `x + fc2(gelu(fc1(LN(x))))` with parameters
/// `{prefix}.ln2/fc1/fc2`.
pub fn mlp_residual(tape: &mut Tape<'_>, x: NodeId, prefix: &str) -> Result<NodeId> {
    let m = mlp(tape, x, prefix)?;
    tape.add(x, m)
}

/// Registers `{prefix}.ln2/fc1/fc2` for [`mlp_residual`].
pub fn init_mlp(init: &mut ParamInit<'_>, prefix: &str, width: usize, hidden: usize) -> Result<()> {
    init.norm(&format!("{prefix}.ln2"), width)?;
    init.dense(&format!("{prefix}.fc1"), width, hidden)?;
    init.dense(&format!("{prefix}.fc2"), hidden, width)?;
    Ok(())
}
