//! Data-space transforms applied before tensors reach the network: crops,
//! flips, rotations, bilinear resizing, and per-sample standardization.
//! These run outside the tape — nothing here participates in gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{dims_str, Tensor};

/// Bilinear resize of a (C, H, W) tensor using half-pixel source centers:
/// src = (dst + 0.5) * in/out - 0.5, clamped to the image.
pub fn bilinear_resize(t: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!(
            "bilinear_resize expects a rank-3 (C,H,W) tensor, got {}",
            dims_str(dims)
        )));
    }
    if out_h == 0 || out_w == 0 {
        return Err(Error::Param(format!("bilinear_resize target {out_h}x{out_w} is empty")));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let scale_y = h as f64 / out_h as f64;
    let scale_x = w as f64 / out_w as f64;
    let src = t.data();
    let mut out = vec![0.0; c * out_h * out_w];
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * scale_y - 0.5).clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * scale_x - 0.5).clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let v00 = plane[y0 * w + x0];
                let v01 = plane[y0 * w + x1];
                let v10 = plane[y1 * w + x0];
                let v11 = plane[y1 * w + x1];
                let top = v00 * (1.0 - fx) + v01 * fx;
                let bot = v10 * (1.0 - fx) + v11 * fx;
                out[(ch * out_h + oy) * out_w + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Copy a window out of a (C, H, W) tensor.
pub fn crop3(t: &Tensor, top: usize, left: usize, out_h: usize, out_w: usize) -> Result<Tensor> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!(
            "crop3 expects a rank-3 (C,H,W) tensor, got {}",
            dims_str(dims)
        )));
    }
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    if out_h == 0 || out_w == 0 || top + out_h > h || left + out_w > w {
        return Err(Error::Param(format!(
            "crop window {out_h}x{out_w} at ({top},{left}) does not fit inside {h}x{w}"
        )));
    }
    let src = t.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        for y in 0..out_h {
            let row = (ch * h + top + y) * w + left;
            out.extend_from_slice(&src[row..row + out_w]);
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Flip the last axis (width) of a tensor of any rank ≥ 1.
pub fn hflip(t: &Tensor) -> Tensor {
    let dims = t.dims().to_vec();
    let w = *dims.last().expect("hflip needs rank >= 1");
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for row in src.chunks(w) {
        out.extend(row.iter().rev());
    }
    Tensor::new(dims, out).expect("same element count")
}

/// Flip the second-to-last axis (height) of a tensor of rank ≥ 2.
pub fn vflip(t: &Tensor) -> Tensor {
    let dims = t.dims().to_vec();
    assert!(dims.len() >= 2, "vflip needs rank >= 2");
    let w = dims[dims.len() - 1];
    let h = dims[dims.len() - 2];
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for plane in src.chunks(h * w) {
        for y in (0..h).rev() {
            out.extend_from_slice(&plane[y * w..(y + 1) * w]);
        }
    }
    Tensor::new(dims, out).expect("same element count")
}

/// Rotate each H×W plane of a (C, H, W) tensor counterclockwise by
/// `quarter_turns` × 90°. Odd turn counts require a square plane; half turns
/// work for any shape.
pub fn rot90(t: &Tensor, quarter_turns: usize) -> Result<Tensor> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!(
            "rot90 expects a rank-3 (C,H,W) tensor, got {}",
            dims_str(dims)
        )));
    }
    let k = quarter_turns % 4;
    let (h, w) = (dims[1], dims[2]);
    if k % 2 == 1 && h != w {
        return Err(Error::Param(format!(
            "quarter rotation needs a square plane, got {h}x{w}"
        )));
    }
    let mut cur = t.clone();
    for _ in 0..k {
        cur = rot90_once(&cur);
    }
    Ok(cur)
}

fn rot90_once(t: &Tensor) -> Tensor {
    let dims = t.dims();
    let (c, h, w) = (dims[0], dims[1], dims[2]);
    let src = t.data();
    // counterclockwise: out[y][x] = in[x][w - 1 - y]; out is (c, w, h)
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..w {
            for x in 0..h {
                out[(ch * w + y) * h + x] = src[(ch * h + x) * w + (w - 1 - y)];
            }
        }
    }
    Tensor::new(vec![c, w, h], out).expect("same element count")
}

/// Side-length fraction range for the random resized crop.
const CROP_SCALE_LO: f64 = 0.8;
const CROP_SCALE_HI: f64 = 1.0;

/// Random augmentation for a (3, H, W) fundus image: resized crop with a
/// uniform side fraction in [0.8, 1], then independent horizontal/vertical
/// flips at p = 0.5, then a right-angle rotation (quarter turns only when the
/// image is square, half turns otherwise).
pub fn augment_fundus<R: Rng>(t: &Tensor, rng: &mut R) -> Result<Tensor> {
    let dims = t.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!(
            "augment_fundus expects a rank-3 (C,H,W) tensor, got {}",
            dims_str(dims)
        )));
    }
    let (h, w) = (dims[1], dims[2]);
    let f = rng.gen_range(CROP_SCALE_LO..=CROP_SCALE_HI);
    let ch = ((h as f64 * f).round() as usize).clamp(1, h);
    let cw = ((w as f64 * f).round() as usize).clamp(1, w);
    let top = rng.gen_range(0..=h - ch);
    let left = rng.gen_range(0..=w - cw);
    let mut out = crop3(t, top, left, ch, cw)?;
    out = bilinear_resize(&out, h, w)?;
    if rng.gen_bool(0.5) {
        out = hflip(&out);
    }
    if rng.gen_bool(0.5) {
        out = vflip(&out);
    }
    let turns = if h == w { rng.gen_range(0..4usize) } else { 2 * rng.gen_range(0..2usize) };
    rot90(&out, turns)
}

/// Fraction of each slice kept by the OCT center crop.
const OCT_CROP_FRACTION: f64 = 0.9;

/// Center-crop every slice of a (T, 1, H, W) volume to `OCT_CROP_FRACTION` of
/// its side lengths and resize back.
pub fn center_crop_volume(vol: &Tensor) -> Result<Tensor> {
    let dims = vol.dims();
    if dims.len() != 4 || dims[1] != 1 {
        return Err(Error::Shape(format!(
            "center_crop_volume expects a (T,1,H,W) tensor, got {}",
            dims_str(dims)
        )));
    }
    let (t_len, h, w) = (dims[0], dims[2], dims[3]);
    let ch = ((h as f64 * OCT_CROP_FRACTION).round() as usize).clamp(1, h);
    let cw = ((w as f64 * OCT_CROP_FRACTION).round() as usize).clamp(1, w);
    let top = (h - ch) / 2;
    let left = (w - cw) / 2;
    let src = vol.data();
    let mut out = Vec::with_capacity(src.len());
    for ti in 0..t_len {
        let slice = Tensor::new(vec![1, h, w], src[ti * h * w..(ti + 1) * h * w].to_vec())?;
        let cropped = crop3(&slice, top, left, ch, cw)?;
        let resized = bilinear_resize(&cropped, h, w)?;
        out.extend_from_slice(resized.data());
    }
    Tensor::new(dims.to_vec(), out)
}

/// Random augmentation for a (T, 1, H, W) OCT volume: center crop + resize,
/// then a horizontal flip at p = 0.5 applied to every slice with one shared
/// decision so the volume stays spatially consistent.
pub fn augment_oct<R: Rng>(vol: &Tensor, rng: &mut R) -> Result<Tensor> {
    let out = center_crop_volume(vol)?;
    Ok(if rng.gen_bool(0.5) { hflip(&out) } else { out })
}

/// Shift and scale all elements to mean 0 and population standard deviation 1.
/// A zero-variance tensor is returned unchanged with a warning on stderr since
/// there is nothing to normalize.
pub fn standardize(t: &Tensor) -> Tensor {
    let data = t.data();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std > 0.0) || !std.is_finite() {
        eprintln!(
            "warning: tensor {} has zero variance; standardization skipped",
            dims_str(t.dims())
        );
        return t.clone();
    }
    let out: Vec<f64> = data.iter().map(|v| (v - mean) / std).collect();
    Tensor::new(t.dims().to_vec(), out).expect("same element count")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(seed: u64, dims: &[usize]) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::rand_uniform(dims, -2.0, 2.0, &mut rng)
    }

    #[test]
    fn double_flips_are_identity() {
        let t = rand_t(1, &[3, 5, 7]);
        assert!(hflip(&hflip(&t)).bits_eq(&t));
        assert!(vflip(&vflip(&t)).bits_eq(&t));
        let vol = rand_t(2, &[4, 1, 5, 6]);
        assert!(hflip(&hflip(&vol)).bits_eq(&vol));
    }

    #[test]
    fn hflip_moves_the_left_edge_to_the_right_edge() {
        let mut t = Tensor::zeros(&[1, 2, 4]);
        t.data_mut()[0] = 1.0; // (0, 0, 0)
        let f = hflip(&t);
        assert_eq!(f.at(&[0, 0, 3]), 1.0);
        assert_eq!(f.at(&[0, 0, 0]), 0.0);
    }

    #[test]
    fn vflip_moves_the_top_row_to_the_bottom() {
        let mut t = Tensor::zeros(&[1, 3, 2]);
        t.data_mut()[1] = 7.0; // (0, 0, 1)
        let f = vflip(&t);
        assert_eq!(f.at(&[0, 2, 1]), 7.0);
    }

    #[test]
    fn four_quarter_turns_are_identity_and_one_turn_moves_a_marker() {
        let t = rand_t(3, &[2, 4, 4]);
        assert!(rot90(&t, 4).unwrap().bits_eq(&t));

        let mut m = Tensor::zeros(&[1, 3, 3]);
        m.data_mut()[2] = 5.0; // top-right (0, 0, 2)
        let r = rot90(&m, 1).unwrap();
        assert_eq!(r.at(&[0, 0, 0]), 5.0, "counterclockwise sends top-right to top-left");
    }

    #[test]
    fn half_turns_work_on_rectangles_but_quarter_turns_do_not() {
        let t = rand_t(4, &[2, 3, 5]);
        let r2 = rot90(&t, 2).unwrap();
        assert_eq!(r2.dims(), t.dims());
        assert!(rot90(&r2, 2).unwrap().bits_eq(&t));
        assert!(matches!(rot90(&t, 1), Err(Error::Param(_))));
        assert!(matches!(rot90(&t, 3), Err(Error::Param(_))));
    }

    #[test]
    fn resize_to_the_same_size_is_bit_exact_identity() {
        let t = rand_t(5, &[3, 6, 9]);
        assert!(bilinear_resize(&t, 6, 9).unwrap().bits_eq(&t));
    }

    #[test]
    fn resize_keeps_constants_constant() {
        let t = Tensor::full(&[2, 4, 4], 2.5);
        for (h, w) in [(7, 3), (2, 9), (5, 5)] {
            let r = bilinear_resize(&t, h, w).unwrap();
            assert_eq!(r.dims(), &[2, h, w]);
            for v in r.data().iter() {
                assert!((v - 2.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn exact_halving_averages_two_by_two_blocks() {
        let t = Tensor::new(vec![1, 4, 4], (0..16).map(|v| v as f64).collect()).unwrap();
        let r = bilinear_resize(&t, 2, 2).unwrap();
        assert!((r.at(&[0, 0, 0]) - 2.5).abs() < 1e-12);
        assert!((r.at(&[0, 0, 1]) - 4.5).abs() < 1e-12);
        assert!((r.at(&[0, 1, 0]) - 10.5).abs() < 1e-12);
        assert!((r.at(&[0, 1, 1]) - 12.5).abs() < 1e-12);
    }

    #[test]
    fn crop_pulls_the_expected_window() {
        let t = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64).collect()).unwrap();
        let c = crop3(&t, 1, 1, 2, 2).unwrap();
        assert_eq!(c.data().as_ref() as &[f64], &[4.0, 5.0, 7.0, 8.0]);
        assert!(crop3(&t, 2, 2, 2, 2).is_err());
    }

    #[test]
    fn fundus_augmentation_is_seed_deterministic_and_shape_preserving() {
        let t = rand_t(6, &[3, 16, 16]);
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            augment_fundus(&t, &mut rng).unwrap()
        };
        let a = run(10);
        assert_eq!(a.dims(), t.dims());
        assert!(a.bits_eq(&run(10)));
        // different draws almost surely disagree somewhere
        assert!(a.max_abs_diff(&run(11)) > 0.0);
    }

    #[test]
    fn rectangular_fundus_augmentation_never_transposes_dims() {
        let t = rand_t(7, &[3, 8, 12]);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            assert_eq!(augment_fundus(&t, &mut rng).unwrap().dims(), &[3, 8, 12]);
        }
    }

    #[test]
    fn oct_augmentation_flips_the_whole_volume_or_nothing() {
        let vol = rand_t(8, &[3, 1, 10, 10]);
        let base = center_crop_volume(&vol).unwrap();
        let flipped = hflip(&base);
        let (mut saw_plain, mut saw_flipped) = (false, false);
        for seed in 0..32 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = augment_oct(&vol, &mut rng).unwrap();
            if out.bits_eq(&base) {
                saw_plain = true;
            } else if out.bits_eq(&flipped) {
                saw_flipped = true;
            } else {
                panic!("augmented volume is neither the crop nor its mirror");
            }
        }
        assert!(saw_plain && saw_flipped, "both flip decisions should occur across seeds");
    }

    #[test]
    fn center_crop_keeps_constants_and_dims() {
        let vol = Tensor::full(&[2, 1, 9, 9], -1.25);
        let out = center_crop_volume(&vol).unwrap();
        assert_eq!(out.dims(), vol.dims());
        for v in out.data().iter() {
            assert!((v + 1.25).abs() < 1e-12);
        }
    }

    #[test]
    fn standardize_hits_mean_zero_std_one() {
        let t = rand_t(9, &[3, 8, 8]);
        let s = standardize(&t);
        let data = s.data();
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-6, "mean {mean}");
        assert!((var.sqrt() - 1.0).abs() < 1e-6, "std {}", var.sqrt());
    }

    #[test]
    fn standardize_skips_zero_variance_input() {
        let t = Tensor::full(&[2, 3, 3], 4.0);
        let s = standardize(&t);
        assert!(s.bits_eq(&t));
    }
}
