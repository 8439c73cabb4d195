use crate::error::{shape_err, Result};
use crate::sim::{NUM_PHASES, WINDOW_BUCKETS};
use crate::tensor::{Tape, Tensor, Var};

use super::params::{CnnVars, MTS_CHANNELS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Queue length series, ReLU-activated.
    Ql,
    /// Travel-time logits.
    Tt,
}

/// Runs the shared conv stack over each of the 8 phase slices of `v`
/// (8×7×80) and stacks the per-phase outputs row-wise.
pub fn cnn_forward(tape: &mut Tape, v: &Tensor, p: &CnnVars, head: Head) -> Result<Var> {
    if v.shape() != [NUM_PHASES, MTS_CHANNELS, WINDOW_BUCKETS] {
        return Err(shape_err!("multivariate series must be 8x7x80, got {:?}", v.shape()));
    }
    let slice = MTS_CHANNELS * WINDOW_BUCKETS;
    let mut rows = Vec::with_capacity(NUM_PHASES);
    for phase in 0..NUM_PHASES {
        let data = v.data()[phase * slice..(phase + 1) * slice].to_vec();
        let mut x = tape.constant(Tensor::new(vec![MTS_CHANNELS, WINDOW_BUCKETS], data)?);
        for (k, b) in p.conv.iter().zip(&p.conv_b) {
            x = tape.conv1d(x, *k)?;
            x = tape.add_bias(x, *b, 0)?;
            x = tape.relu(x);
            x = tape.maxpool1d(x)?;
        }
        let flat = tape.value(x).len();
        let x = tape.reshape(x, vec![1, flat])?;
        let y = tape.matmul(x, p.lin_w)?;
        let y = tape.add_bias(y, p.lin_b, 1)?;
        rows.push(if head == Head::Ql { tape.relu(y) } else { y });
    }
    tape.concat(&rows, 0)
}
