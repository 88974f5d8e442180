//! Evaluation and figure outputs.

mod eval;
mod images;

pub use eval::{eval_bound, evaluate, kl_profile, EvalResult, KlProfile};
pub use images::{
    chunk_rows, default_t_list, emit_grid, grid, mse, parse_ppm, ppm_bytes, progression_rows,
    progression_sheet, psnr, read_ppm, rgb_to_batch, write_ppm, Rgb, SEPARATOR,
};
