//! Class colours and binary PPM output for label maps.

use mpresnet::data::LabelMap;
use mpresnet::tensor::kernels::IGNORE_LABEL;

pub const IGNORE_COLOR: [u8; 3] = [128, 128, 128];

/// water, built-up, industrial, grassland, barren, others.
const BASE: [[u8; 3]; 6] = [
    [0, 0, 255],
    [255, 0, 0],
    [255, 0, 255],
    [0, 255, 0],
    [255, 255, 0],
    [255, 255, 255],
];

/// One distinct colour per class. Classes past the base six get colours from
/// a fixed integer sequence, skipping any already used and the ignore grey.
pub fn palette(num_classes: usize) -> Vec<[u8; 3]> {
    let mut colors: Vec<[u8; 3]> = BASE.iter().copied().take(num_classes).collect();
    let mut k: u32 = 1;
    while colors.len() < num_classes {
        let c = [(k * 37 % 256) as u8, (k * 91 % 256) as u8, (k * 173 % 256) as u8];
        k += 1;
        if c != IGNORE_COLOR && !colors.contains(&c) {
            colors.push(c);
        }
    }
    colors
}

pub fn color_of(colors: &[[u8; 3]], label: u8) -> [u8; 3] {
    if label == IGNORE_LABEL {
        IGNORE_COLOR
    } else {
        colors[label as usize]
    }
}

/// Binary P6 image of `map`.
pub fn encode_ppm(map: &LabelMap, colors: &[[u8; 3]]) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.reserve(3 * map.data().len());
    for &l in map.data() {
        out.extend_from_slice(&color_of(colors, l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn palette_is_injective() {
        for n in [1, 6, 40, 254] {
            let p = palette(n);
            assert_eq!(p.len(), n);
            for (i, a) in p.iter().enumerate() {
                assert_ne!(*a, IGNORE_COLOR);
                assert!(!p[i + 1..].contains(a));
            }
        }
    }

    #[test]
    fn ppm_layout() {
        let map = LabelMap::new(1, 2, vec![0, IGNORE_LABEL]).unwrap();
        let bytes = encode_ppm(&map, &palette(6));
        assert_eq!(bytes, b"P6\n2 1\n255\n\x00\x00\xff\x80\x80\x80".to_vec());
    }
}
