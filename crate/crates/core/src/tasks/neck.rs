use alloc::format;

use crate::diffcore::{ParameterStore, Session, Var};
use crate::rng::{init_uniform, Key};
use crate::{Error, Result};

/// Two affine `D → D` maps with a rectifier between them.
pub fn init_neck(store: &mut ParameterStore, key: Key, prefix: &str, dim: usize) -> Result<()> {
    let b = 1.0 / libm::sqrt(dim as f64);
    for (name, shape) in [("w1", &[dim, dim][..]), ("b1", &[dim]), ("w2", &[dim, dim]), ("b2", &[dim])] {
        let full = format!("{prefix}.{name}");
        store.insert(&full, init_uniform(key, &full, shape, b))?;
    }
    Ok(())
}

pub fn neck_forward(sess: &mut Session, prefix: &str, x: Var) -> Result<Var> {
    let w1 = sess.param(&format!("{prefix}.w1"))?;
    let b1 = sess.param(&format!("{prefix}.b1"))?;
    let w2 = sess.param(&format!("{prefix}.w2"))?;
    let b2 = sess.param(&format!("{prefix}.b2"))?;
    let t = &mut sess.tape;
    let d = t.shape(w1)[0];
    if t.shape(x).len() != 2 || t.shape(x)[1] != d {
        return Err(Error::dim("neck_forward", t.shape(x), &[d]));
    }
    let h = t.matmul(x, w1)?;
    let h = t.add_row(h, b1)?;
    let h = t.relu(h);
    let y = t.matmul(h, w2)?;
    t.add_row(y, b2)
}
