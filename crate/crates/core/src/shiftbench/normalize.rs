use alloc::vec::Vec;

pub const P95_FLOOR: f32 = 1e-8;

/// Percentile (0..=100) of a sample by linear interpolation between order
/// statistics at rank `q/100 · (n - 1)`.
pub fn percentile(values: &[f32], q: f64) -> f32 {
    let mut sorted: Vec<f32> = values.to_vec();
    sorted.sort_by(f32::total_cmp);
    percentile_sorted(&sorted, q)
}

fn percentile_sorted(sorted: &[f32], q: f64) -> f32 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = q / 100.0 * (sorted.len() - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = rank - lo as f64;
    (f64::from(sorted[lo]) + frac * (f64::from(sorted[hi]) - f64::from(sorted[lo]))) as f32
}

/// Divide every channel of a `channels × samples` window by the 95th
/// percentile of its absolute values, floored at [`P95_FLOOR`].
pub fn normalize_p95(window: &mut [f32], channels: usize, samples: usize) {
    debug_assert_eq!(window.len(), channels * samples);
    let mut scratch = Vec::with_capacity(samples);
    for ch in window.chunks_exact_mut(samples) {
        scratch.clear();
        scratch.extend(ch.iter().map(|v| v.abs()));
        scratch.sort_by(f32::total_cmp);
        let scale = percentile_sorted(&scratch, 95.0).max(P95_FLOOR);
        for v in ch.iter_mut() {
            *v /= scale;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn zero_channel_stays_zero() {
        let mut w = vec![0.0f32; 8];
        normalize_p95(&mut w, 2, 4);
        assert!(w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_channel_maps_to_unit_magnitude() {
        let mut w = vec![3.0f32, -3.0, 3.0, 3.0];
        normalize_p95(&mut w, 1, 4);
        assert_eq!(w, vec![1.0, -1.0, 1.0, 1.0]);
    }

    #[test]
    fn equally_spaced_ramp_divisor() {
        let ramp: Vec<f32> = (1..=100).map(|v| v as f32).collect();
        assert!((percentile(&ramp, 95.0) - 95.05).abs() < 1e-4);
        let mut w = ramp.clone();
        normalize_p95(&mut w, 1, 100);
        assert!((w[99] - 100.0 / 95.05).abs() < 1e-6);
    }

    #[test]
    fn channels_are_independent() {
        let mut w = vec![1.0f32, 2.0, 100.0, 200.0];
        normalize_p95(&mut w, 2, 2);
        assert!((w[1] - w[3]).abs() < 1e-6);
    }
}
