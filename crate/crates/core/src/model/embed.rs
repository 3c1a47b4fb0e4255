//! Sinusoidal codes shared by the noise-level, horizon and shift embeddings.

pub const SINUSOID_BASE: f64 = 10_000.0;

/// `[sin(v·f_0) .. sin(v·f_{k-1}), cos(v·f_0) .. cos(v·f_{k-1})]` with
/// `f_i = base^{-i/k}` and `k = dim / 2`. An odd `dim` leaves a trailing 0.
pub fn sinusoidal(value: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(SINUSOID_BASE.ln()) * i as f64 / half as f64).exp();
        let arg = value * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_code_is_constant() {
        let z = sinusoidal(0.0, 8);
        assert_eq!(z, vec![0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0]);
        assert_eq!(z, sinusoidal(0.0, 8));
    }

    #[test]
    fn integer_codes_are_distinct() {
        let codes: Vec<Vec<f64>> = (-27..=27).map(|v| sinusoidal(v as f64, 4)).collect();
        for i in 0..codes.len() {
            for j in 0..i {
                let dist: f64 = codes[i].iter().zip(&codes[j]).map(|(a, b)| (a - b).abs()).sum();
                assert!(dist > 1e-6, "codes {i} and {j} collide");
            }
        }
    }
}
