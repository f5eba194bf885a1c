//! Chunked online inference with carried state.
//!
//! A [`StreamState`] holds everything an online model needs to continue
//! from the last processed frame: the last `k − 1` inputs of every depthwise
//! convolution, the S4 hidden states, the attention keys and values seen so
//! far, and the materialised REP kernels. Feeding a sequence chunk by chunk
//! through [`process_chunk`] reproduces the full-sequence eval forward.

use crate::conv_module::{Approach, Forward, Model};
use crate::error::{Error, Result};
use crate::numerics::{Complex, Tensor, TimeSeries};
use crate::s4d::materialize_kernel;

fn empty_rows(width: usize) -> Tensor {
    Tensor::zeros(vec![0, width])
}

/// Appends `x`'s rows to `buf`, keeping at most `keep` trailing rows.
fn append_rows(buf: &Tensor, x: &Tensor, keep: Option<usize>) -> Tensor {
    let width = x.cols();
    let mut data = buf.data().to_vec();
    data.extend_from_slice(x.data());
    let rows = data.len() / width;
    let start = keep.map_or(0, |k| rows.saturating_sub(k));
    let kept = data.split_off(start * width);
    Tensor::matrix(rows - start, width, kept).expect("row buffer")
}

/// Carried state of one convolution module.
#[derive(Clone, Debug, PartialEq)]
pub struct ModuleCarry {
    pub(crate) conv_tail: Tensor,
    pub(crate) s4_state: Option<Vec<Complex>>,
    pub(crate) rep_kernel: Option<Tensor>,
}

impl ModuleCarry {
    fn new(width: usize) -> Self {
        Self {
            conv_tail: empty_rows(width),
            s4_state: None,
            rep_kernel: None,
        }
    }

    /// Most recent inputs of the depthwise convolution, `[min(seen, k−1) × H]`.
    pub fn conv_tail(&self) -> &Tensor {
        &self.conv_tail
    }

    /// S4 hidden state `[H × N]`, once at least one frame was processed.
    pub fn s4_state(&self) -> Option<&[Complex]> {
        self.s4_state.as_deref()
    }

    /// The cached truncated S4 kernel `[H × L]` of a REP module.
    pub fn rep_kernel(&self) -> Option<&Tensor> {
        self.rep_kernel.as_ref()
    }

    pub(crate) fn push_conv_input(&mut self, x: &Tensor, keep: usize) {
        self.conv_tail = append_rows(&self.conv_tail, x, Some(keep));
    }

    fn reset(&mut self) {
        self.conv_tail = empty_rows(self.conv_tail.cols());
        self.s4_state = None;
    }
}

/// Keys and values of every frame seen by one attention layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionCarry {
    pub(crate) keys: Tensor,
    pub(crate) values: Tensor,
}

impl AttentionCarry {
    fn new(width: usize) -> Self {
        Self {
            keys: empty_rows(width),
            values: empty_rows(width),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub(crate) fn append(&mut self, k: &Tensor, v: &Tensor) {
        self.keys = append_rows(&self.keys, k, None);
        self.values = append_rows(&self.values, v, None);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockCarry {
    pub(crate) attention: AttentionCarry,
    pub(crate) module: ModuleCarry,
}

impl BlockCarry {
    pub fn attention(&self) -> &AttentionCarry {
        &self.attention
    }

    pub fn module(&self) -> &ModuleCarry {
        &self.module
    }
}

/// State of one online stream over a particular model.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    store_uid: u64,
    store_version: u64,
    frames_seen: usize,
    blocks: Vec<BlockCarry>,
}

impl StreamState {
    pub fn frames_seen(&self) -> usize {
        self.frames_seen
    }

    pub fn blocks(&self) -> &[BlockCarry] {
        &self.blocks
    }

    /// Forgets all processed frames. Cached REP kernels stay valid because
    /// they only depend on the parameters.
    pub fn reset(&mut self) {
        self.frames_seen = 0;
        for b in &mut self.blocks {
            b.attention = AttentionCarry::new(b.attention.keys.cols());
            b.module.reset();
        }
    }

    /// Ends the stream, returning the number of frames processed.
    pub fn close(self) -> usize {
        self.frames_seen
    }
}

/// Opens a stream over an online model.
pub fn open_stream<M: Model + ?Sized>(model: &M) -> Result<StreamState> {
    let layout = model.layout();
    if !layout.spec.is_online() {
        return Err(Error::invalid(
            "streaming needs an online model; this one has offline (centred) convolutions",
        ));
    }
    let store = model.store();
    let width = layout.spec.width;
    let mut blocks = Vec::with_capacity(layout.blocks.len());
    for block in &layout.blocks {
        let mut module = ModuleCarry::new(width);
        if block.conv.spec.approach == Approach::Rep {
            let ids = block.conv.s4.as_ref().expect("rep s4");
            module.rep_kernel = Some(materialize_kernel(
                &ids.params(store),
                block.conv.spec.rep_left_context,
            )?);
        }
        blocks.push(BlockCarry {
            attention: AttentionCarry::new(width),
            module,
        });
    }
    Ok(StreamState {
        store_uid: store.uid(),
        store_version: store.version(),
        frames_seen: 0,
        blocks,
    })
}

/// Runs the next `t` frames of the stream through the model in eval mode.
pub fn process_chunk<M: Model + ?Sized>(
    model: &M,
    state: &mut StreamState,
    chunk: &TimeSeries,
) -> Result<TimeSeries> {
    let store = model.store();
    if store.uid() != state.store_uid || store.version() != state.store_version {
        return Err(Error::StaleState);
    }
    if chunk.channels() != model.input_width() {
        return Err(Error::invalid(format!(
            "chunk has {} channels, model expects {}",
            chunk.channels(),
            model.input_width()
        )));
    }
    let mut f = Forward::eval(store, chunk.steps());
    let x = f.input(chunk.as_tensor().clone());
    let mut blocks = state.blocks.clone();
    let y = model.forward(&mut f, x, Some(&mut blocks))?;
    state.blocks = blocks;
    state.frames_seen += chunk.steps();
    TimeSeries::try_from(f.tape.value(y).clone())
}
