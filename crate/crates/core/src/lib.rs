//! Private machine translation on the local CPU.
//!
//! The engine runs small transformer-encoder / SSRU-decoder student models
//! with 8-bit integer matrix products, restricts the output vocabulary with a
//! lexical shortlist, and translates documents sentence by sentence while
//! keeping every byte of the surrounding whitespace. Models are installed as
//! verified packages in a local store; downloading is the only network access.
//!
//! Modules, bottom up:
//!
//! - [`tensor`]: float and int8 matrices, quantization, the integer GEMM.
//! - [`model`]: architecture, weights file and greedy batched decoding.
//! - [`shortlist`]: per-source candidate target lists.
//! - [`textops`]: sentence splitting and the lossless subword tokenizer.
//! - [`pipeline`]: batching, worker pools and as-you-type supersession.
//! - [`registry`]: packages, the model store and catalog downloads.
//! - [`bench`](mod@bench): words-per-second measurement.

pub mod bench;
pub mod model;
pub mod pipeline;
pub mod registry;
pub mod shortlist;
pub mod tensor;
pub mod textops;
