//! Row-major tensor byte manipulation and the fp8 (e4m3) quantizer.

/// Largest finite e4m3 value.
pub const E4M3_MAX: f32 = 448.0;

pub fn bf16_to_f32(bits: u16) -> f32 {
    f32::from_bits((bits as u32) << 16)
}

/// Round-to-nearest-even narrowing to bf16.
pub fn f32_to_bf16(x: f32) -> u16 {
    if x.is_nan() {
        return 0x7fc0;
    }
    let b = x.to_bits();
    let lsb = (b >> 16) & 1;
    ((b + 0x7fff + lsb) >> 16) as u16
}

pub fn e4m3_to_f32(code: u8) -> f32 {
    let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
    let e = (code >> 3) & 0xf;
    let m = (code & 7) as f32;
    if e == 0xf && m == 7.0 {
        return f32::NAN;
    }
    if e == 0 {
        sign * m / 8.0 * 2f32.powi(-6)
    } else {
        sign * (1.0 + m / 8.0) * 2f32.powi(e as i32 - 7)
    }
}

/// Round-to-nearest-even into e4m3, saturating at ±448.
pub fn f32_to_e4m3(x: f32) -> u8 {
    if x.is_nan() {
        return 0x7f;
    }
    let sign = if x.is_sign_negative() { 0x80 } else { 0 };
    let a = x.abs() as f64;
    if a >= E4M3_MAX as f64 {
        return sign | 0x7e;
    }
    let min_normal = 2f64.powi(-6);
    if a < min_normal {
        // Subnormal grid of 2^-9; q == 8 rolls into the smallest normal.
        let q = (a * 512.0).round_ties_even() as u8;
        return sign | q;
    }
    let mut e = a.log2().floor() as i32;
    // log2 can be off by one right at powers of two.
    if 2f64.powi(e) > a {
        e -= 1;
    } else if 2f64.powi(e + 1) <= a {
        e += 1;
    }
    let mut q = ((a / 2f64.powi(e) - 1.0) * 8.0).round_ties_even() as i32;
    if q == 8 {
        q = 0;
        e += 1;
    }
    let code = (((e + 7) as u8) << 3) | q as u8;
    if code >= 0x7f {
        return sign | 0x7e;
    }
    sign | code
}

/// Per-tensor scale mapping the absolute maximum onto the e4m3 range.
pub fn fp8_scale(values: &[f32]) -> f32 {
    let amax = values.iter().fold(0f32, |m, v| m.max(v.abs()));
    if amax == 0.0 || !amax.is_finite() {
        1.0
    } else {
        amax / E4M3_MAX
    }
}

/// bf16 bytes to `[scale: f32 LE][e4m3 codes]`.
pub fn quantize_bf16_to_fp8(bf16: &[u8]) -> Vec<u8> {
    let vals: Vec<f32> = bf16.chunks_exact(2).map(|c| bf16_to_f32(u16::from_le_bytes([c[0], c[1]]))).collect();
    let scale = fp8_scale(&vals);
    let mut out = Vec::with_capacity(4 + vals.len());
    out.extend_from_slice(&scale.to_le_bytes());
    out.extend(vals.iter().map(|v| f32_to_e4m3(v / scale)));
    out
}

/// `(outer, dim, inner_bytes)` of `shape` split at `axis`.
fn split(shape: &[usize], axis: usize, elem: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product::<usize>() * elem;
    (outer, shape[axis], inner)
}

/// Concatenates tensors along `axis`. All shapes agree except at `axis`.
pub fn concat(parts: &[(&[u8], Vec<usize>)], axis: usize, elem: usize) -> (Vec<u8>, Vec<usize>) {
    let mut shape = parts[0].1.clone();
    shape[axis] = parts.iter().map(|p| p.1[axis]).sum();
    let outer = split(&shape, axis, elem).0;
    let mut out = Vec::with_capacity(parts.iter().map(|p| p.0.len()).sum());
    for o in 0..outer {
        for (bytes, s) in parts {
            let (_, dim, inner) = split(s, axis, elem);
            let row = dim * inner;
            out.extend_from_slice(&bytes[o * row..(o + 1) * row]);
        }
    }
    (out, shape)
}

/// Slice `index` of `count` equal slices along `axis`.
pub fn slice(bytes: &[u8], shape: &[usize], axis: usize, index: usize, count: usize, elem: usize) -> (Vec<u8>, Vec<usize>) {
    let (outer, dim, inner) = split(shape, axis, elem);
    let part = dim / count;
    let mut out = Vec::with_capacity(bytes.len() / count);
    for o in 0..outer {
        let start = (o * dim + index * part) * inner;
        out.extend_from_slice(&bytes[start..start + part * inner]);
    }
    let mut s = shape.to_vec();
    s[axis] = part;
    (out, s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn e4m3_round_trips_every_finite_code() {
        for c in 0u8..=255 {
            if c & 0x7f == 0x7f {
                continue;
            }
            let v = e4m3_to_f32(c);
            let back = f32_to_e4m3(v);
            // +0 and -0 both exist.
            assert!(back == c || (v == 0.0 && back & 0x7f == 0), "code {c:#x} -> {v} -> {back:#x}");
        }
    }

    #[test]
    fn e4m3_known_values() {
        assert_eq!(f32_to_e4m3(448.0), 0x7e);
        assert_eq!(f32_to_e4m3(1e6), 0x7e);
        assert_eq!(f32_to_e4m3(-1e6), 0xfe);
        assert_eq!(f32_to_e4m3(1.0), 0x38);
        assert_eq!(e4m3_to_f32(0x01), 2f32.powi(-9));
    }

    #[test]
    fn concat_then_slice_inverts() {
        // Two 2x3 int16 tensors.
        let a: Vec<u8> = (0..12).collect();
        let b: Vec<u8> = (100..112).collect();
        for axis in 0..2 {
            let (c, s) = concat(&[(&a, vec![2, 3]), (&b, vec![2, 3])], axis, 2);
            assert_eq!(slice(&c, &s, axis, 0, 2, 2).0, a);
            assert_eq!(slice(&c, &s, axis, 1, 2, 2).0, b);
        }
    }

    #[test]
    fn rows_of_a_4x4_split_in_two() {
        let t: Vec<u8> = (0..16).collect();
        let (top, s) = slice(&t, &[4, 4], 0, 0, 2, 1);
        assert_eq!(s, vec![2, 4]);
        assert_eq!(top, (0..8).collect::<Vec<u8>>());
    }
}
