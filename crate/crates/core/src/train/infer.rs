use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{read_image, write_image, write_mask};
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::network::NetworkParams;
use crate::ops::Mode;

#[derive(Clone, Debug)]
pub struct InferOutput {
    /// Class ids scaled to span `0..=255`.
    pub mask: PathBuf,
    /// Edge probabilities scaled to `0..=255`; absent without an edge head.
    pub edge: Option<PathBuf>,
}

/// Segments one image file and writes `<stem>_mask.pgm` and
/// `<stem>_edge.pgm` into `out_dir`.
pub fn infer(params: &mut NetworkParams<f32>, image: &Path, out_dir: &Path) -> Result<InferOutput> {
    let x = read_image(image)?;
    params.config.check_input(x.shape()).map_err(|e| Error::Data(format!("{}: {e}", image.display())))?;
    let pred = params.forward(&x, Mode::Eval)?;
    if !pred.logits.all_finite() {
        return Err(Error::NonFinite(format!("logits for {}", image.display())));
    }
    fs::create_dir_all(out_dir)?;
    let stem = image.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let mask_path = out_dir.join(format!("{stem}_mask.pgm"));
    let scale = (255 / (params.config.classes - 1)) as u8;
    write_mask(&mask_path, &Mask::argmax(&pred.logits), scale)?;
    let edge = match pred.edge {
        Some(e) => {
            let p = out_dir.join(format!("{stem}_edge.pgm"));
            write_image(&p, &e)?;
            Some(p)
        }
        None => None,
    };
    Ok(InferOutput { mask: mask_path, edge })
}
