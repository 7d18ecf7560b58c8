//! Separable sinusoidal embedding of `(t, x, y)` positions.
//!
//! Each axis gets `dim / 3` channels of interleaved `sin, cos` pairs at
//! geometrically spaced frequencies `base^(-k / (dim/6))`. Coordinates are
//! real-valued, so positions outside the visual grid are encoded as easily
//! as positions inside it.

use groundkit_autograd::Tensor;

fn axis(value: f64, width: usize, base: f64, out: &mut [f64]) {
    let pairs = width / 2;
    for k in 0..pairs {
        let freq = base.powf(-(k as f64) / pairs as f64);
        let (s, c) = (value * freq).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
}

/// Embedding of one position. `dim` must be divisible by 6.
pub fn pos_embed(t: f64, x: f64, y: f64, dim: usize, base: f64) -> Vec<f64> {
    assert!(dim.is_multiple_of(6), "position width must be divisible by 6");
    let w = dim / 3;
    let mut out = vec![0.0; dim];
    axis(t, w, base, &mut out[..w]);
    axis(x, w, base, &mut out[w..2 * w]);
    axis(y, w, base, &mut out[2 * w..]);
    out
}

/// One embedding row per position.
pub fn pos_table(positions: &[[f64; 3]], dim: usize, base: f64) -> Tensor {
    let mut data = Vec::with_capacity(positions.len() * dim);
    for p in positions {
        data.extend(pos_embed(p[0], p[1], p[2], dim, base));
    }
    Tensor::from_vec(positions.len(), dim, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
    }

    #[test]
    fn origin_is_zero_phase() {
        let e = pos_embed(0.0, 0.0, 0.0, 48, 100.0);
        for k in 0..24 {
            assert_eq!(e[2 * k], 0.0);
            assert_eq!(e[2 * k + 1], 1.0);
        }
    }

    #[test]
    fn injective_on_lattice() {
        // Separable, so the lattice map is injective iff each axis map is.
        let w = 16;
        let codes: Vec<Vec<f64>> = (0..64)
            .map(|v| {
                let mut o = vec![0.0; w];
                axis(v as f64, w, 100.0, &mut o);
                o
            })
            .collect();
        let mut min = f64::INFINITY;
        for i in 0..64 {
            for j in 0..i {
                min = min.min(dist(&codes[i], &codes[j]));
            }
        }
        assert!(min > 1e-3, "closest pair distance {min}");
        // And the full lattice has no exact duplicates.
        let mut keys: Vec<Vec<u64>> = Vec::with_capacity(64 * 64 * 64);
        for t in 0..64 {
            for x in 0..64 {
                for y in 0..64 {
                    keys.push(pos_embed(t as f64, x as f64, y as f64, 48, 100.0).iter().map(|v| v.to_bits()).collect());
                }
            }
        }
        keys.sort_unstable();
        keys.dedup();
        assert_eq!(keys.len(), 64 * 64 * 64);
    }
}
