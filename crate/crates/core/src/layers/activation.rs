use crate::error::{Error, Result};
use crate::ledger::OpKind;
use crate::scalar::Scalar;
use crate::tensor::{gelu_derivative, Tensor};

use super::policy::Module;
use super::store::{ActivationStore, LayerContext, TensorRole};

/// Softmax over the last axis of attention logits `(B, heads, N, N)`.
/// Stores its output; `dx = y * (dy - sum(dy * y))`.
pub fn softmax_forward<T: Scalar>(
    x: &Tensor<T>,
    layer: &str,
    module: Module,
    store: &mut ActivationStore,
) -> Result<(Tensor<T>, LayerContext<T>)> {
    let y = x.softmax(x.rank() - 1)?;
    let mut ctx = LayerContext::new(layer, store);
    ctx.push(
        "probs",
        store.save(
            layer,
            "probs",
            OpKind::Softmax,
            module,
            TensorRole::Attention,
            &y,
        )?,
    );
    Ok((y, ctx))
}

pub fn softmax_backward<T: Scalar>(
    ctx: &mut LayerContext<T>,
    dy: &Tensor<T>,
    store: &mut ActivationStore,
) -> Result<Tensor<T>> {
    let y = ctx.take(store)?.get("probs")?;
    if y.shape() != dy.shape() {
        return Err(Error::shape("softmax backward", dy.shape(), y.shape()));
    }
    let n = y.last_dim();
    let mut dx = vec![T::ZERO; y.len()];
    for ((yr, dyr), dxr) in y
        .data()
        .chunks_exact(n)
        .zip(dy.data().chunks_exact(n))
        .zip(dx.chunks_exact_mut(n))
    {
        let dot: T = yr.iter().zip(dyr).map(|(&a, &b)| a * b).sum();
        for j in 0..n {
            dxr[j] = yr[j] * (dyr[j] - dot);
        }
    }
    Tensor::new(y.shape(), dx)
}

/// Exact GELU. Stores its input; `dx = dy * (Phi(x) + x phi(x))`.
pub fn gelu_forward<T: Scalar>(
    x: &Tensor<T>,
    layer: &str,
    module: Module,
    groups: usize,
    store: &mut ActivationStore,
) -> Result<(Tensor<T>, LayerContext<T>)> {
    let y = x.gelu()?;
    let mut ctx = LayerContext::new(layer, store);
    ctx.push(
        "input",
        store.save(
            layer,
            "input",
            OpKind::Gelu,
            module,
            TensorRole::Channels(groups),
            x,
        )?,
    );
    Ok((y, ctx))
}

pub fn gelu_backward<T: Scalar>(
    ctx: &mut LayerContext<T>,
    dy: &Tensor<T>,
    store: &mut ActivationStore,
) -> Result<Tensor<T>> {
    let x = ctx.take(store)?.get("input")?;
    if x.shape() != dy.shape() {
        return Err(Error::shape("gelu backward", dy.shape(), x.shape()));
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| g * gelu_derivative(xv))
        .collect();
    Tensor::new(x.shape(), data)
}
