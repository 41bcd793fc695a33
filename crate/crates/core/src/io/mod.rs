//! File formats: feature maps, attention traces, checkpoints, images,
//! tables and logs. All binary formats are little-endian.

mod bytes;
mod checkpoint;
mod ppm;
mod table;
mod tokens;

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_model, model_checkpoint, model_from_checkpoint,
    read_checkpoint, save_model, write_checkpoint, Checkpoint, TRCK_MAGIC, TRCK_VERSION,
};
pub use ppm::{
    colormap, decode_ppm, encode_ppm, encode_ppm_rgb, load_image, render_heatmap, save_heatmap,
    save_image,
};
pub use table::{csv_bytes, load_json, read_jsonl, save_csv, save_json, JsonlWriter};
pub use tokens::{
    decode_atrc, decode_fmap, encode_atrc, encode_fmap, read_atrc, read_fmap, write_atrc,
    write_fmap, ATRC_MAGIC, ATRC_VERSION, FMAP_MAGIC, FMAP_VERSION, ROW_SUM_TOL,
};
