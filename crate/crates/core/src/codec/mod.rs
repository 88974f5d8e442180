//! Progressive lossy compression: quantized latents, range-coded under the
//! model's own priors.

mod bitstream;
mod coder;
mod pipeline;
mod quant;

pub use bitstream::{hex, Bitstream, HEADER_LEN, MAGIC, VERSION};
pub use coder::{ac_decode, ac_encode, Pmf, RangeDecoder, RangeEncoder, PROB_BITS, TOTAL};
pub use pipeline::{
    compress, decompress, has_codec_grids, rate_report, CodecModel, Compressed, RateReport, RateRow,
};
pub use quant::{bin_pmf, dequantize_latent, quantize_latent, QuantGrid, MAX_SYMBOLS};
