//! Signed one-hot codec between label maps and the continuous space the
//! diffusion model noises and denoises.

use crate::types::{argmax, ClassField, LabelMap, IGNORE};
use crate::{Error, Result};

/// Class `c` becomes `+scale` at channel `c` and `−scale` elsewhere;
/// IGNORE pixels become the zero vector.
pub fn encode_labels(labels: &LabelMap, scale: f32) -> Result<ClassField> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!("codec scale must be positive, got {scale}")));
    }
    let k = labels.num_classes;
    let mut field = ClassField::zeros(labels.height, labels.width, k);
    for (p, &l) in labels.data.iter().enumerate() {
        if l == IGNORE {
            continue;
        }
        if l as usize >= k {
            return Err(Error::format(
                p as u64,
                format!("class id {l} at pixel {p} is not below num_classes {k}"),
            ));
        }
        let px = &mut field.data[p * k..(p + 1) * k];
        px.fill(-scale);
        px[l as usize] = scale;
    }
    Ok(field)
}

/// Per-pixel argmax (lowest index on ties). Never produces IGNORE.
pub fn decode_labels(field: &ClassField) -> Result<LabelMap> {
    if let Some(i) = field.data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite value at element {i}")));
    }
    let data = (0..field.pixels()).map(|p| argmax(field.pixel(p)) as u8).collect();
    LabelMap::new(field.height, field.width, field.classes, data)
}
