//! PPM rendering of id maps with a fixed id → color hash.

use super::panoptic::{IdMap, SegmentId, VOID};

pub fn id_color(id: SegmentId) -> [u8; 3] {
    if id == VOID {
        return [0, 0, 0];
    }
    let mut z = u64::from(id).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z ^= z >> 29;
    z = z.wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z ^= z >> 32;
    let c = [
        (z & 0xff) as u8,
        ((z >> 8) & 0xff) as u8,
        ((z >> 16) & 0xff) as u8,
    ];
    if c == [0, 0, 0] {
        [1, 1, 1]
    } else {
        c
    }
}

/// Binary (P6) PPM of the maps placed left to right.
pub fn render_ppm(maps: &[&IdMap]) -> Vec<u8> {
    let h = maps.iter().map(|m| m.height).max().unwrap_or(0);
    let w: usize = maps.iter().map(|m| m.width).sum();
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for m in maps {
            for x in 0..m.width {
                let id = if y < m.height { m.get(y, x) } else { VOID };
                out.extend_from_slice(&id_color(id));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn void_is_black_and_colors_count() {
        let map = IdMap::new(2, 2, vec![0, 3, 3, 1001]).unwrap();
        let ppm = render_ppm(&[&map]);
        let header = b"P6\n2 2\n255\n".len();
        let px: BTreeSet<&[u8]> = ppm[header..].chunks(3).collect();
        assert_eq!(px.len(), 3);
        assert_eq!(&ppm[header..header + 3], &[0, 0, 0]);
        assert_eq!(render_ppm(&[&map]), ppm);
    }
}
