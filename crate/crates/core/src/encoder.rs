//! State windows and the shared mean-pooling encoder.

use std::fmt;

use rand::Rng;

use crate::error::{dim_check, Error, Result};
use crate::numerics::{DenseNet, GradientSet};
use crate::Scalar;

/// Dense item identifier. Items are `1..=catalog_size`; 0 is padding.
pub type ItemId = u32;

pub const PADDING: ItemId = 0;
pub const DEFAULT_WINDOW_LEN: usize = 10;

/// The last `L` interacted items, oldest first, left-padded with [`PADDING`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StateWindow {
    items: Vec<ItemId>,
}

impl StateWindow {
    pub fn empty(len: usize) -> Self {
        assert!(len > 0, "window length must be positive");
        StateWindow {
            items: vec![PADDING; len],
        }
    }

    /// Validates the contiguous-left-padding invariant.
    pub fn from_items(items: Vec<ItemId>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("window length must be positive".into()));
        }
        let first_item = items.iter().position(|&i| i != PADDING).unwrap_or(items.len());
        if items[first_item..].contains(&PADDING) {
            return Err(Error::Contract(format!(
                "padding must be a contiguous left prefix: {items:?}"
            )));
        }
        Ok(StateWindow { items })
    }

    pub fn items(&self) -> &[ItemId] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.iter().all(|&i| i == PADDING)
    }

    /// The non-padding suffix.
    pub fn interacted(&self) -> &[ItemId] {
        let start = self.items.iter().position(|&i| i != PADDING).unwrap_or(self.items.len());
        &self.items[start..]
    }

    pub fn last_item(&self) -> Option<ItemId> {
        self.items.last().copied().filter(|&i| i != PADDING)
    }

    pub fn check_catalog(&self, catalog_size: usize) -> Result<()> {
        match self.items.iter().find(|&&i| i as usize > catalog_size) {
            Some(i) => Err(Error::Contract(format!(
                "item id {i} out of range for catalog size {catalog_size}"
            ))),
            None => Ok(()),
        }
    }

    /// Drops the oldest entry and appends `item` on the right.
    pub fn push_item(&self, item: ItemId) -> Result<Self> {
        if item == PADDING {
            return Err(Error::Contract("cannot push the padding id into a window".into()));
        }
        let mut items = Vec::with_capacity(self.items.len());
        items.extend_from_slice(&self.items[1..]);
        items.push(item);
        Ok(StateWindow { items })
    }
}

impl fmt::Display for StateWindow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[")?;
        for (i, item) in self.items.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{item}")?;
        }
        write!(f, "]")
    }
}

/// `(catalog_size + 1) x dim` item embeddings; row 0 is the all-zero padding row.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    catalog_size: usize,
    dim: usize,
    data: Vec<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    pub fn zeros(catalog_size: usize, dim: usize) -> Self {
        EmbeddingTable {
            catalog_size,
            dim,
            data: vec![T::zero(); (catalog_size + 1) * dim],
        }
    }

    /// Entries uniform in `±sqrt(3 / dim)`, so rows have roughly unit norm.
    pub fn random<R: Rng + ?Sized>(catalog_size: usize, dim: usize, rng: &mut R) -> Self {
        let mut table = Self::zeros(catalog_size, dim);
        let limit = (3.0 / dim as f64).sqrt();
        for x in &mut table.data[dim..] {
            *x = T::lit(rng.random_range(-limit..=limit));
        }
        table
    }

    pub fn from_data(catalog_size: usize, dim: usize, data: Vec<T>) -> Result<Self> {
        dim_check("embedding table size", (catalog_size + 1) * dim, data.len())?;
        if data[..dim].iter().any(|&x| x != T::zero()) {
            return Err(Error::Contract("padding embedding row must be zero".into()));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(Error::Contract("embedding entries must be finite".into()));
        }
        Ok(EmbeddingTable { catalog_size, dim, data })
    }

    pub fn catalog_size(&self) -> usize {
        self.catalog_size
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, item: ItemId) -> &[T] {
        let i = item as usize;
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn row_mut(&mut self, item: ItemId) -> &mut [T] {
        let i = item as usize;
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Restores the padding row to zero after an optimizer step.
    pub fn clear_padding(&mut self) {
        let d = self.dim;
        self.data[..d].iter_mut().for_each(|x| *x = T::zero());
    }
}

/// Masked mean of the window's embeddings. An all-padding window pools to zero.
pub fn mean_pool<T: Scalar>(window: &StateWindow, table: &EmbeddingTable<T>) -> Result<Vec<T>> {
    window.check_catalog(table.catalog_size())?;
    let items = window.interacted();
    let mut pooled = vec![T::zero(); table.dim()];
    if items.is_empty() {
        return Ok(pooled);
    }
    for &item in items {
        for (p, &e) in pooled.iter_mut().zip(table.row(item)) {
            *p += e;
        }
    }
    let inv = T::one() / T::lit(items.len() as f64);
    pooled.iter_mut().for_each(|p| *p *= inv);
    Ok(pooled)
}

/// `head_net(mean of non-padding embeddings)`.
pub fn encode<T: Scalar>(window: &StateWindow, table: &EmbeddingTable<T>, head_net: &DenseNet<T>) -> Result<Vec<T>> {
    dim_check("encoder head input", table.dim(), head_net.input_dim())?;
    let pooled = mean_pool(window, table)?;
    head_net.forward(&pooled)
}

/// Gradients of the encoder parameters; `table` is dense and shape-matched
/// with [`EmbeddingTable::data`].
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderGrads<T> {
    pub table: Vec<T>,
    pub head: GradientSet<T>,
}

impl<T: Scalar> EncoderGrads<T> {
    pub fn zeros_like(encoder: &Encoder<T>) -> Self {
        EncoderGrads {
            table: vec![T::zero(); encoder.table.data().len()],
            head: GradientSet::zeros_like(&encoder.head),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.table.iter().all(|&g| g == T::zero()) && self.head.is_zero()
    }

    pub fn flat(&self) -> impl Iterator<Item = &T> + '_ {
        self.table.iter().chain(self.head.flat())
    }
}

pub fn encode_backward<T: Scalar>(
    window: &StateWindow,
    table: &EmbeddingTable<T>,
    head_net: &DenseNet<T>,
    feature_grad: &[T],
) -> Result<EncoderGrads<T>> {
    let mut grads = EncoderGrads {
        table: vec![T::zero(); table.data().len()],
        head: GradientSet::zeros_like(head_net),
    };
    accumulate_encode_backward(window, table, head_net, feature_grad, &mut grads)?;
    Ok(grads)
}

/// Adds the gradient of `encode(...) . feature_grad` into `grads`.
pub fn accumulate_encode_backward<T: Scalar>(
    window: &StateWindow,
    table: &EmbeddingTable<T>,
    head_net: &DenseNet<T>,
    feature_grad: &[T],
    grads: &mut EncoderGrads<T>,
) -> Result<()> {
    dim_check("encoder feature grad", head_net.output_dim(), feature_grad.len())?;
    let pooled = mean_pool(window, table)?;
    let pooled_grad = head_net.accumulate_backward(&pooled, feature_grad, &mut grads.head)?;
    let items = window.interacted();
    if items.is_empty() {
        return Ok(());
    }
    let inv = T::one() / T::lit(items.len() as f64);
    let d = table.dim();
    for &item in items {
        let i = item as usize;
        for (g, &pg) in grads.table[i * d..(i + 1) * d].iter_mut().zip(&pooled_grad) {
            *g += pg * inv;
        }
    }
    Ok(())
}

/// Embedding table plus dense head, shared by the Q-heads and the CE head.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub table: EmbeddingTable<T>,
    pub head: DenseNet<T>,
}

impl<T: Scalar> Encoder<T> {
    /// Random table and a `[d_embed, d_state, d_state]` head: one tanh layer
    /// followed by a linear projection.
    pub fn new<R: Rng + ?Sized>(catalog_size: usize, d_embed: usize, d_state: usize, rng: &mut R) -> Result<Self> {
        let table = EmbeddingTable::random(catalog_size, d_embed, rng);
        let head = DenseNet::glorot(&[d_embed, d_state, d_state], rng)?;
        Ok(Encoder { table, head })
    }

    pub fn from_parts(table: EmbeddingTable<T>, head: DenseNet<T>) -> Result<Self> {
        dim_check("encoder head input", table.dim(), head.input_dim())?;
        Ok(Encoder { table, head })
    }

    pub fn catalog_size(&self) -> usize {
        self.table.catalog_size()
    }

    pub fn state_dim(&self) -> usize {
        self.head.output_dim()
    }

    pub fn encode(&self, window: &StateWindow) -> Result<Vec<T>> {
        encode(window, &self.table, &self.head)
    }

    pub fn accumulate_backward(&self, window: &StateWindow, feature_grad: &[T], grads: &mut EncoderGrads<T>) -> Result<()> {
        accumulate_encode_backward(window, &self.table, &self.head, feature_grad, grads)
    }

    pub fn num_params(&self) -> usize {
        self.table.data().len() + self.head.num_params()
    }

    pub fn copy_from(&mut self, other: &Encoder<T>) {
        self.table.data_mut().copy_from_slice(other.table.data());
        self.head.copy_from(&other.head);
    }

    /// Flat parameter access: table entries first, then head parameters.
    pub fn param_mut(&mut self, index: usize) -> &mut T {
        let n = self.table.data().len();
        if index < n {
            &mut self.table.data_mut()[index]
        } else {
            self.head.param_mut(index - n)
        }
    }
}
