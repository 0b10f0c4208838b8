use rand::Rng;

use super::{BatchNorm, Ctx, Linear};
use crate::error::Result;
use crate::tensor::{ParamStore, Var};

/// Two linear layers with batch normalisation and Swish in between, mapping
/// relative coordinates to `basis` kernel values.
#[derive(Clone, Debug)]
pub struct KernelNet {
    pub l1: Linear,
    pub bn: BatchNorm,
    pub l2: Linear,
    pub d_in: usize,
    pub basis: usize,
}

impl KernelNet {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        basis: usize,
        rng: &mut R,
    ) -> Self {
        KernelNet {
            l1: Linear::new(store, &format!("{name}.l1"), d_in, hidden, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, basis, rng),
            d_in,
            basis,
        }
    }

    /// `inputs: [R, d_in] → [R, basis]`.
    pub fn forward(&self, ctx: &mut Ctx, inputs: Var) -> Result<Var> {
        let h = self.l1.forward(ctx, inputs)?;
        let h = self.bn.forward(ctx, h)?;
        let h = ctx.tape.swish(h);
        self.l2.forward(ctx, h)
    }
}
