//! Synthetic datasets shaped like the BreaKHis breast-histopathology corpus.
//!
//! No pixels are involved; these are manifests with the corpus's class and
//! magnification distribution, useful for exercising the split and balance
//! arithmetic at full scale.

use crate::manifest::{Magnification, Manifest, SampleRecord, DEFAULT_CLASSES};

/// Images per magnification (40X, 100X, 200X, 400X) for benign and malignant.
pub const BREAKHIS_IMAGES: [[usize; 4]; 2] = [[625, 644, 623, 588], [1370, 1437, 1390, 1232]];

/// Patients per class.
pub const BREAKHIS_PATIENTS: [usize; 2] = [24, 58];

const SUBTYPES: [[&str; 4]; 2] = [
    ["adenosis", "fibroadenoma", "phyllodes_tumor", "tubular_adenoma"],
    ["ductal_carcinoma", "lobular_carcinoma", "mucinous_carcinoma", "papillary_carcinoma"],
];

/// An unsplit manifest with 2,480 benign and 5,429 malignant originals.
pub fn breakhis_shaped_manifest() -> Manifest {
    let mut records = Vec::new();
    for (class, per_mag) in BREAKHIS_IMAGES.iter().enumerate() {
        let tag = if class == 0 { "B" } else { "M" };
        let mut serial = 0usize;
        for (mag, &count) in Magnification::ALL.iter().zip(per_mag) {
            for _ in 0..count {
                let patient = serial % BREAKHIS_PATIENTS[class];
                let id = format!("SOB_{tag}_{}_p{patient:02}_{serial:05}", mag.as_str());
                let mut r = SampleRecord::original(id.clone(), format!("{}/{}/{id}.png", DEFAULT_CLASSES[class], mag.as_str()), class);
                r.magnification = Some(*mag);
                r.patient_id = Some(format!("{tag}{patient:02}"));
                r.subtype = Some(SUBTYPES[class][patient % 4].to_string());
                records.push(r);
                serial += 1;
            }
        }
    }
    Manifest::new(DEFAULT_CLASSES.map(String::from).to_vec(), records).expect("fixture is well-formed")
}
