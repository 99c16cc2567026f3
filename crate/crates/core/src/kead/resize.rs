use crate::map::AnomalyMap;

/// Bilinear resize with half-pixel centres and border clamping
/// (`align_corners = false`).
///
/// Source coordinate for destination column `x` is
/// `(x + 0.5) * src_w / dst_w - 0.5`, clamped to `[0, src_w - 1]`; rows
/// likewise. Every output is a convex combination of at most four source
/// values, so the result never leaves `[min(src), max(src)]`.
pub fn bilinear_resize(src: &AnomalyMap, height: usize, width: usize) -> AnomalyMap {
    assert!(
        src.height >= 1 && src.width >= 1 && height >= 1 && width >= 1,
        "bilinear_resize needs non-empty grids"
    );
    if (src.height, src.width) == (height, width) {
        return src.clone();
    }
    if src.values.len() == 1 {
        return AnomalyMap::filled(height, width, src.values[0]);
    }

    let cols = axis_taps(src.width, width);
    let rows = axis_taps(src.height, height);
    let mut out = Vec::with_capacity(height * width);
    for &(r0, r1, fy) in &rows {
        let top = &src.values[r0 * src.width..(r0 + 1) * src.width];
        let bottom = &src.values[r1 * src.width..(r1 + 1) * src.width];
        for &(c0, c1, fx) in &cols {
            let (a, b) = (top[c0] as f64, top[c1] as f64);
            let (c, d) = (bottom[c0] as f64, bottom[c1] as f64);
            let upper = a + fx * (b - a);
            let lower = c + fx * (d - c);
            let v = upper + fy * (lower - upper);
            let lo = a.min(b).min(c).min(d);
            let hi = a.max(b).max(c).max(d);
            out.push(v.clamp(lo, hi) as f32);
        }
    }
    AnomalyMap::new(height, width, out)
}

/// Per destination index: the two source indices and the weight of the second.
fn axis_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    let last = (src_len - 1) as f64;
    (0..dst_len)
        .map(|x| {
            let s = ((x as f64 + 0.5) * scale - 0.5).clamp(0.0, last);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::oracle;
    use proptest::prelude::*;

    #[test]
    fn same_size_is_bitwise_copy() {
        let src = AnomalyMap::new(2, 3, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]);
        let out = bilinear_resize(&src, 2, 3);
        assert_eq!(out, src);
    }

    #[test]
    fn single_pixel_is_constant() {
        let src = AnomalyMap::new(1, 1, vec![0.37]);
        let out = bilinear_resize(&src, 5, 9);
        assert!(out.values.iter().all(|&v| v == 0.37));
    }

    #[test]
    fn checkerboard_center_is_half() {
        let src = AnomalyMap::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]);
        let out = bilinear_resize(&src, 3, 3);
        assert_eq!(out.get(1, 1), 0.5);
        // Corners clamp to the source corners.
        assert_eq!(out.get(0, 0), 0.0);
        assert_eq!(out.get(0, 2), 1.0);
    }

    fn grid() -> impl Strategy<Value = AnomalyMap> {
        (1usize..7, 1usize..7).prop_flat_map(|(h, w)| {
            proptest::collection::vec(-2.0f32..2.0, h * w)
                .prop_map(move |v| AnomalyMap::new(h, w, v))
        })
    }

    proptest! {
        #[test]
        fn never_overshoots(src in grid(), h in 1usize..20, w in 1usize..20) {
            let out = bilinear_resize(&src, h, w);
            let (lo, hi) = (src.min().unwrap(), src.max().unwrap());
            prop_assert!(out.values.iter().all(|&v| v >= lo && v <= hi));
        }

        #[test]
        fn matches_reference(src in grid(), h in 1usize..20, w in 1usize..20) {
            let out = bilinear_resize(&src, h, w);
            let reference = oracle::bilinear(&src.values, src.height, src.width, h, w);
            for (a, b) in out.values.iter().zip(&reference) {
                prop_assert!((*a as f64 - b).abs() < 1e-6, "{} vs {}", a, b);
            }
        }
    }
}
