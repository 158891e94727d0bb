use latentpaint_core::dissection::channel_iou;
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Straight pixel-level IoU with the threshold computed by sorting.
fn naive(acts: &[Array3<f32>], segs: &[Array2<u8>], class: u8, q: f64) -> Vec<f32> {
    let (c, gh, gw) = acts[0].dim();
    let (h, w) = segs[0].dim();
    (0..c)
        .map(|ch| {
            let mut all: Vec<f32> = acts.iter().flat_map(|a| a.index_axis(ndarray::Axis(0), ch).to_owned().into_raw_vec_and_offset().0).collect();
            all.sort_by(f32::total_cmp);
            let k = ((q * all.len() as f64).ceil() as usize).max(1) - 1;
            let (t, lo) = (all[k], all[0]);
            let mut ious = Vec::new();
            for (a, s) in acts.iter().zip(segs) {
                let (mut i, mut u) = (0, 0);
                for y in 0..h {
                    for x in 0..w {
                        let v = a[[ch, y * gh / h, x * gw / w]];
                        let on = v >= t && v > lo;
                        let m = s[[y, x]] == class;
                        i += (on && m) as usize;
                        u += (on || m) as usize;
                    }
                }
                if u > 0 {
                    ious.push(i as f64 / u as f64);
                }
            }
            if ious.is_empty() { 0.0 } else { (ious.iter().sum::<f64>() / ious.len() as f64) as f32 }
        })
        .collect()
}

#[test]
fn cellwise_iou_matches_pixel_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for trial in 0..20 {
        let n = rng.random_range(1..12);
        let acts: Vec<Array3<f32>> = (0..n)
            .map(|_| Array3::from_shape_fn((5, 4, 4), |(c, _, _)| if c == 4 { 1.0 } else { (rng.random_range(0..6) as f32) * 0.5 }))
            .collect();
        let segs: Vec<Array2<u8>> = (0..n).map(|_| Array2::from_shape_fn((16, 16), |_| rng.random_range(0..3))).collect();
        let q = [0.5, 0.9, 0.99][trial % 3];
        let got = channel_iou(&acts, &segs, 1, q).unwrap();
        let want = naive(&acts, &segs, 1, q);
        assert_eq!(got, want, "trial {trial}");
        assert_eq!(got[4], 0.0, "constant channel must never be active");
    }
}
